#include "duet/data.hpp"

#include "duet/common.hpp"
#include "duet/frontend.hpp"
#include "duet/rng.hpp"
#include "duet/wav.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace duet {

using nlohmann::json;

const char* stream_name(Stream s) {
    switch (s) {
        case Stream::SpeechOnly: return "speech_only";
        case Stream::TextOnly: return "text_only";
        case Stream::Ast: return "ast";
        case Stream::Asr: return "asr";
        case Stream::Mt: return "mt";
    }
    return "?";
}

Stream stream_from_name(const std::string& name) {
    for (int i = 0; i < kNumStreams; ++i) {
        if (name == stream_name(Stream(i))) return Stream(i);
    }
    throw InvalidInput("unknown stream name: " + name);
}

std::vector<StreamSpec> default_pretrain_specs() {
    return {
        {Stream::SpeechOnly, 4, 0.5, 10},
        {Stream::TextOnly, 8, 0.5, 5},
        {Stream::Ast, 1, 0.5, 10},
        {Stream::Asr, 1, 0.5, 10},
        {Stream::Mt, 1, 0.25, 5},
    };
}

std::vector<StreamSpec> finetune_multi_task_specs() {
    return {
        {Stream::Ast, 4, 0.0, 1},
        {Stream::Asr, 2, 0.0, 1},
        {Stream::Mt, 2, 0.0, 1},
    };
}

std::vector<StreamSpec> finetune_single_task_specs(Stream s, int batch_size) {
    return {{s, batch_size, 0.0, 1}};
}

std::vector<double> language_distribution(const std::vector<int64_t>& counts,
                                          double temperature) {
    if (counts.empty()) throw InvalidInput("language_distribution: no languages");
    if (!(temperature > 0.0)) throw InvalidInput("language_distribution: T must be > 0");
    double total = 0.0;
    for (int64_t c : counts) {
        if (c < 1) throw InvalidInput("language_distribution: counts must be >= 1");
        total += double(c);
    }
    std::vector<double> p(counts.size());
    double norm = 0.0;
    for (size_t i = 0; i < counts.size(); ++i) {
        p[i] = std::pow(double(counts[i]) / total, 1.0 / temperature);
        norm += p[i];
    }
    for (double& x : p) x /= norm;
    return p;
}

// ---------------------------------------------------------------------------
// DatasetRegistry
// ---------------------------------------------------------------------------

void DatasetRegistry::add(TrainItem item) {
    item.id = next_id_++;
    n_languages_ = std::max({n_languages_, item.src_lang + 1, item.tgt_lang + 1});
    items_[int(item.stream)].push_back(std::move(item));
}

std::vector<int64_t> DatasetRegistry::language_counts(Stream s) const {
    std::vector<int64_t> counts(size_t(n_languages_), 0);
    for (const TrainItem& item : items_[int(s)]) counts[size_t(item.src_lang)]++;
    return counts;
}

namespace {

Tensor load_audio_features(const std::string& corpus_dir, const std::string& audio_rel) {
    namespace fs = std::filesystem;
    // prefer the cached feature file written next to the wav
    std::string cached = audio_rel;
    const std::string from = "wav/", to = "feat/";
    auto pos = cached.find(from);
    if (pos != std::string::npos) {
        cached = cached.substr(0, pos) + to + cached.substr(pos + from.size());
        auto dot = cached.rfind('.');
        if (dot != std::string::npos) cached = cached.substr(0, dot) + ".mu2f";
        if (fs::exists(corpus_dir + "/" + cached)) {
            return read_features(corpus_dir + "/" + cached);
        }
    }
    return compute_log_mel(read_wav(corpus_dir + "/" + audio_rel)).frames;
}

}  // namespace

DatasetRegistry DatasetRegistry::load(const std::string& corpus_dir,
                                      const std::string& manifest, const TextVocab& vocab,
                                      int max_frames, int max_tokens) {
    std::ifstream is(corpus_dir + "/" + manifest);
    if (!is) throw InvalidInput("DatasetRegistry: cannot open " + corpus_dir + "/" + manifest);
    DatasetRegistry reg;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json js = json::parse(line);
        TrainItem item;
        item.stream = stream_from_name(js.at("stream").get<std::string>());
        switch (item.stream) {
            case Stream::SpeechOnly:
                item.src_lang = item.tgt_lang = js.at("lang").get<int>();
                item.features = load_audio_features(corpus_dir, js.at("audio").get<std::string>());
                break;
            case Stream::TextOnly:
                item.src_lang = item.tgt_lang = js.at("lang").get<int>();
                item.src_text = vocab.encode(js.at("text").get<std::string>());
                break;
            case Stream::Asr:
                item.src_lang = item.tgt_lang = js.at("lang").get<int>();
                item.features = load_audio_features(corpus_dir, js.at("audio").get<std::string>());
                item.tgt_text = vocab.encode(js.at("transcript").get<std::string>());
                break;
            case Stream::Ast:
                item.src_lang = js.at("src_lang").get<int>();
                item.tgt_lang = js.at("tgt_lang").get<int>();
                item.features = load_audio_features(corpus_dir, js.at("audio").get<std::string>());
                item.tgt_text = vocab.encode(js.at("translation").get<std::string>());
                break;
            case Stream::Mt:
                item.src_lang = js.at("src_lang").get<int>();
                item.tgt_lang = js.at("tgt_lang").get<int>();
                item.src_text = vocab.encode(js.at("source").get<std::string>());
                item.tgt_text = vocab.encode(js.at("target").get<std::string>());
                break;
        }
        if (item.features.rows() > max_frames) continue;
        if (int(item.src_text.size()) > max_tokens || int(item.tgt_text.size()) > max_tokens) {
            continue;
        }
        reg.add(std::move(item));
    }
    return reg;
}

// ---------------------------------------------------------------------------
// BatchSampler
// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(const DatasetRegistry& registry, std::vector<StreamSpec> specs,
                           SamplerConfig sampler, uint64_t seed)
    : registry_(registry), specs_(std::move(specs)), sampler_(sampler), seed_(seed) {
    for (const StreamSpec& spec : specs_) {
        if (spec.batch_size < 0) throw InvalidInput("BatchSampler: negative batch size");
        if (spec.batch_size == 0) continue;
        const int si = int(spec.stream);
        const auto& items = registry_.items(spec.stream);
        if (items.empty()) {
            throw InvalidInput(std::string("BatchSampler: stream ") +
                               stream_name(spec.stream) + " is enabled but empty");
        }
        auto& buckets = buckets_[si];
        buckets.assign(size_t(registry_.n_languages()), Bucket{});
        for (size_t i = 0; i < items.size(); ++i) {
            buckets[size_t(items[i].src_lang)].item_indices.push_back(int(i));
        }
        // drop empty language buckets, keep a parallel count list
        std::vector<Bucket> kept;
        std::vector<int64_t> counts;
        for (auto& b : buckets) {
            if (b.item_indices.empty()) continue;
            counts.push_back(int64_t(b.item_indices.size()));
            kept.push_back(std::move(b));
        }
        buckets_[si] = std::move(kept);
        double temperature = 1.0;
        if (spec.stream == Stream::TextOnly) temperature = sampler_.text_only_temperature;
        if (spec.stream == Stream::Mt) temperature = sampler_.mt_temperature;
        lang_dist_[si] = language_distribution(counts, temperature);
    }
}

const StreamSpec& BatchSampler::spec_for(Stream s) const {
    for (const StreamSpec& spec : specs_) {
        if (spec.stream == s) return spec;
    }
    throw InvalidInput("BatchSampler: stream not configured");
}

const TrainItem& BatchSampler::draw_item(Stream s, Rng& rng) {
    const int si = int(s);
    auto& buckets = buckets_[si];
    // language by temperature distribution
    size_t lang_idx = 0;
    if (buckets.size() > 1) {
        double u = rng.uniform(), acc = 0.0;
        lang_idx = buckets.size() - 1;
        for (size_t l = 0; l < buckets.size(); ++l) {
            acc += lang_dist_[si][l];
            if (u < acc) {
                lang_idx = l;
                break;
            }
        }
    }
    Bucket& bucket = buckets[lang_idx];
    const int64_t n = int64_t(bucket.item_indices.size());
    const int64_t epoch = bucket.pos / n;
    const int64_t offset = bucket.pos % n;
    bucket.pos++;
    // per-epoch permutation, derived on demand so state is just the counter
    std::vector<int> order = bucket.item_indices;
    Rng perm_rng(Rng::derive(seed_, 0xe90c0 + uint64_t(si) * 1315423911ull +
                                        lang_idx * 2654435761ull + uint64_t(epoch)));
    perm_rng.shuffle(order);
    return registry_.items(s)[size_t(order[size_t(offset)])];
}

std::vector<TrainItem> BatchSampler::next_batch(uint64_t step) {
    Rng rng(Rng::derive(seed_, 0xba7c4 + step));
    std::vector<TrainItem> batch;
    for (const StreamSpec& spec : specs_) {
        for (int b = 0; b < spec.batch_size; ++b) {
            batch.push_back(draw_item(spec.stream, rng));
        }
    }
    if (batch.empty()) throw InvalidInput("next_batch: all streams disabled");
    return batch;
}

std::vector<int64_t> BatchSampler::state() const {
    std::vector<int64_t> st;
    for (const auto& buckets : buckets_) {
        for (const Bucket& b : buckets) st.push_back(b.pos);
    }
    return st;
}

void BatchSampler::restore(const std::vector<int64_t>& state) {
    size_t i = 0;
    for (auto& buckets : buckets_) {
        for (Bucket& b : buckets) {
            if (i >= state.size()) throw InvalidInput("BatchSampler::restore: bad state");
            b.pos = state[i++];
        }
    }
    if (i != state.size()) throw InvalidInput("BatchSampler::restore: bad state size");
}

}  // namespace duet
