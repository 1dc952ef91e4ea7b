#include "duet/tokenization.hpp"

#include "duet/binio.hpp"
#include "duet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace duet {

namespace {

double sqdist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

int nearest(const double* s, const Codebook& cb) {
    int best = 0;
    double best_d = sqdist(s, cb.entries.row_ptr(0), cb.dim());
    for (int i = 1; i < cb.size(); ++i) {
        double d = sqdist(s, cb.entries.row_ptr(i), cb.dim());
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace

int quantize(const std::vector<double>& s, const Codebook& cb) {
    if (int(s.size()) != cb.dim()) {
        throw InvalidInput("quantize: vector dim " + std::to_string(s.size()) +
                           " != codebook dim " + std::to_string(cb.dim()));
    }
    for (double x : s) {
        if (!std::isfinite(x)) throw InvalidInput("quantize: non-finite input");
    }
    return nearest(s.data(), cb);
}

int quantize_row(const Tensor& latents, int row, const Codebook& cb) {
    if (latents.cols() != cb.dim()) throw InvalidInput("quantize_row: dim mismatch");
    return nearest(latents.row_ptr(row), cb);
}

std::vector<int> quantize_utterance(const Tensor& latents, const Codebook& cb) {
    if (latents.rows() < 1) throw InvalidInput("quantize_utterance: empty sequence");
    if (latents.cols() != cb.dim()) throw InvalidInput("quantize_utterance: dim mismatch");
    std::vector<int> ids(size_t(latents.rows()), 0);
    for (int i = 0; i < latents.rows(); ++i) ids[size_t(i)] = nearest(latents.row_ptr(i), cb);
    return ids;
}

double quantization_error(const Tensor& latents, const Codebook& cb) {
    double total = 0.0;
    for (int i = 0; i < latents.rows(); ++i) {
        int z = nearest(latents.row_ptr(i), cb);
        total += sqdist(latents.row_ptr(i), cb.entries.row_ptr(z), cb.dim());
    }
    return total / double(latents.rows());
}

Codebook fit_codebook(const Tensor& latents, int k, int iters, uint64_t seed) {
    const int n = latents.rows(), d = latents.cols();
    if (k < 2) throw InvalidInput("fit_codebook: k must be >= 2");
    {
        std::set<std::vector<double>> distinct;
        for (int i = 0; i < n && int(distinct.size()) < k; ++i) {
            distinct.insert(std::vector<double>(latents.row_ptr(i), latents.row_ptr(i) + d));
        }
        if (int(distinct.size()) < k) {
            throw InvalidInput("fit_codebook: fewer than k distinct vectors");
        }
    }

    Rng rng(Rng::derive(seed, 0xc0deb00c));
    Codebook cb;
    cb.entries = Tensor(k, d);

    // k-means++ seeding
    std::vector<double> min_d(size_t(n), 0.0);
    int first = int(rng.uniform_int(uint64_t(n)));
    std::copy_n(latents.row_ptr(first), d, cb.entries.row_ptr(0));
    for (int i = 0; i < n; ++i) {
        min_d[size_t(i)] = sqdist(latents.row_ptr(i), cb.entries.row_ptr(0), d);
    }
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (double x : min_d) total += x;
        int pick;
        if (total <= 0.0) {
            pick = int(rng.uniform_int(uint64_t(n)));
        } else {
            double u = rng.uniform() * total, acc = 0.0;
            pick = n - 1;
            for (int i = 0; i < n; ++i) {
                acc += min_d[size_t(i)];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy_n(latents.row_ptr(pick), d, cb.entries.row_ptr(c));
        for (int i = 0; i < n; ++i) {
            double dist = sqdist(latents.row_ptr(i), cb.entries.row_ptr(c), d);
            min_d[size_t(i)] = std::min(min_d[size_t(i)], dist);
        }
    }

    // Lloyd iterations; empty clusters keep their previous centroid
    std::vector<int> assign(size_t(n), 0);
    Tensor sums(k, d);
    std::vector<int> counts(size_t(k), 0);
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < n; ++i) assign[size_t(i)] = nearest(latents.row_ptr(i), cb);
        sums.fill(0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < n; ++i) {
            int c = assign[size_t(i)];
            counts[size_t(c)]++;
            double* sp = sums.row_ptr(c);
            const double* xp = latents.row_ptr(i);
            for (int j = 0; j < d; ++j) sp[j] += xp[j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[size_t(c)] == 0) continue;
            double inv = 1.0 / double(counts[size_t(c)]);
            double* cp = cb.entries.row_ptr(c);
            const double* sp = sums.row_ptr(c);
            for (int j = 0; j < d; ++j) cp[j] = sp[j] * inv;
        }
    }
    return cb;
}

void write_codebook(const std::string& path, const Codebook& cb) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("write_codebook: cannot open " + path);
    write_magic(os, "MU2C");
    write_u32(os, uint32_t(cb.size()));
    write_u32(os, uint32_t(cb.dim()));
    for (double x : cb.entries.v) write_f32(os, float(x));
}

Codebook read_codebook(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("read_codebook: cannot open " + path);
    expect_magic(is, "MU2C", "codebook");
    const int k = int(read_u32(is));
    const int d = int(read_u32(is));
    Codebook cb;
    cb.entries = Tensor(k, d);
    for (auto& x : cb.entries.v) x = double(read_f32(is));
    return cb;
}

uint64_t codebook_checksum(const Codebook& cb) {
    uint64_t h = 0xcbf29ce484222325ull;
    h = fnv1a64(&cb.entries.shape[0], cb.entries.shape.size() * sizeof(int), h);
    for (double x : cb.entries.v) {
        float f = float(x);
        h = fnv1a64(&f, sizeof(f), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// TextVocab
// ---------------------------------------------------------------------------

TextVocab TextVocab::from_chars(const std::string& chars) {
    TextVocab v;
    for (char c : chars) {
        std::string s(1, c);
        if (v.to_id_.count(s)) throw InvalidInput("TextVocab: duplicate symbol");
        v.to_id_[s] = NUM_RESERVED + int(v.symbols_.size());
        v.symbols_.push_back(s);
    }
    v.max_symbol_len_ = 1;
    v.wordpiece_ = false;
    return v;
}

TextVocab TextVocab::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidInput("TextVocab: cannot open " + path);
    TextVocab v;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (v.to_id_.count(line)) throw InvalidInput("TextVocab: duplicate symbol " + line);
        v.to_id_[line] = NUM_RESERVED + int(v.symbols_.size());
        v.symbols_.push_back(line);
        v.max_symbol_len_ = std::max(v.max_symbol_len_, line.size());
    }
    if (v.symbols_.empty()) throw InvalidInput("TextVocab: empty vocabulary file");
    v.wordpiece_ = v.max_symbol_len_ > 1;
    return v;
}

std::vector<int> TextVocab::encode(const std::string& text) const {
    std::vector<int> ids;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t best_len = 0;
        int best_id = UNK;
        const size_t limit = std::min(max_symbol_len_, text.size() - pos);
        for (size_t len = limit; len >= 1; --len) {
            auto it = to_id_.find(text.substr(pos, len));
            if (it != to_id_.end()) {
                best_len = len;
                best_id = it->second;
                break;
            }
        }
        if (best_len == 0) {
            ids.push_back(UNK);
            pos += 1;
        } else {
            ids.push_back(best_id);
            pos += best_len;
        }
    }
    return ids;
}

std::string TextVocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < NUM_RESERVED) continue;
        if (id >= total_size()) throw InvalidInput("TextVocab::decode: id out of range");
        out += symbols_[size_t(id - NUM_RESERVED)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// SynonymTable
// ---------------------------------------------------------------------------

SynonymTable build_synonym_table(const Tensor& embeddings, int first_id, int count,
                                 uint64_t seed) {
    if (count < 2) throw InvalidInput("build_synonym_table: need >= 2 tokens");
    if (first_id + count > embeddings.rows()) {
        throw InvalidInput("build_synonym_table: embedding table too small");
    }
    const int d = embeddings.cols();
    std::vector<double> norms(size_t(count), 0.0);
    for (int i = 0; i < count; ++i) {
        double s = 0.0;
        const double* row = embeddings.row_ptr(first_id + i);
        for (int j = 0; j < d; ++j) s += row[j] * row[j];
        norms[size_t(i)] = std::sqrt(s);
    }
    SynonymTable table;
    table.first_id = first_id;
    table.nearest.resize(size_t(count));
    Rng rng(Rng::derive(seed, 0x5e70));
    for (int i = 0; i < count; ++i) {
        if (norms[size_t(i)] == 0.0) {
            int pick = int(rng.uniform_int(uint64_t(count - 1)));
            if (pick >= i) pick++;
            table.nearest[size_t(i)] = first_id + pick;
            continue;
        }
        const double* qi = embeddings.row_ptr(first_id + i);
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int j = 0; j < count; ++j) {
            if (j == i || norms[size_t(j)] == 0.0) continue;
            const double* qj = embeddings.row_ptr(first_id + j);
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += qi[c] * qj[c];
            double dist = 1.0 - dot / (norms[size_t(i)] * norms[size_t(j)]);
            if (dist < best_d) {
                best_d = dist;
                best = j;
            }
        }
        if (best < 0) {
            int pick = int(rng.uniform_int(uint64_t(count - 1)));
            if (pick >= i) pick++;
            best = pick;
        }
        table.nearest[size_t(i)] = first_id + best;
    }
    return table;
}

}  // namespace duet
