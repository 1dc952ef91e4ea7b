#include "duet/frontend.hpp"

#include "duet/binio.hpp"
#include "duet/common.hpp"
#include "duet/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

namespace duet {

namespace {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// In-place iterative radix-2 FFT.
void fft(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * M_PI / double(len);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                auto u = a[i + j];
                auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

// Triangular filterbank, HTK mel scale, fmin..Nyquist.
std::vector<std::vector<double>> mel_filterbank(int n_mels, int n_fft, int sample_rate,
                                                double fmin) {
    const int n_bins = n_fft / 2 + 1;
    const double fmax = double(sample_rate) / 2.0;
    const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
    std::vector<double> centers(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i) {
        centers[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * double(i) / double(n_mels + 1));
    }
    std::vector<std::vector<double>> fb(n_mels, std::vector<double>(n_bins, 0.0));
    for (int m = 0; m < n_mels; ++m) {
        double f0 = centers[m], f1 = centers[m + 1], f2 = centers[m + 2];
        for (int k = 0; k < n_bins; ++k) {
            double fk = double(k) * double(sample_rate) / double(n_fft);
            if (fk > f0 && fk < f1) {
                fb[m][k] = (fk - f0) / (f1 - f0);
            } else if (fk >= f1 && fk < f2) {
                fb[m][k] = (f2 - fk) / (f2 - f1);
            }
        }
    }
    return fb;
}

size_t next_pow2(size_t n) {
    size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

}  // namespace

SpeechFeatures compute_log_mel(const Waveform& w, double window_ms, double hop_ms) {
    if (w.samples.empty()) throw InvalidInput("compute_log_mel: empty waveform");
    if (!(hop_ms > 0.0) || window_ms < hop_ms) {
        throw InvalidInput("compute_log_mel: require window_ms >= hop_ms > 0");
    }
    for (double x : w.samples) {
        if (!std::isfinite(x)) throw InvalidInput("compute_log_mel: non-finite sample");
    }
    const int window = int(std::lround(window_ms * 1e-3 * w.sample_rate));
    const int hop = int(std::lround(hop_ms * 1e-3 * w.sample_rate));
    const size_t n_fft = next_pow2(size_t(window));

    std::vector<double> samples = w.samples;
    if (int(samples.size()) < window) samples.resize(size_t(window), 0.0);
    const int t_len = 1 + int(samples.size() - size_t(window)) / hop;

    std::vector<double> hann(static_cast<size_t>(window), 0.0);
    for (int i = 0; i < window; ++i) {
        hann[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(i) / double(window - 1));
    }
    auto fb = mel_filterbank(kNumMels, int(n_fft), w.sample_rate, kMelFmin);

    SpeechFeatures out;
    out.frames = Tensor(t_len, kNumMels);
    out.frame_shift_ms = hop_ms;
    std::vector<std::complex<double>> buf(n_fft);
    std::vector<double> power(n_fft / 2 + 1);
    for (int t = 0; t < t_len; ++t) {
        const size_t start = size_t(t) * hop;
        for (size_t i = 0; i < n_fft; ++i) {
            buf[i] = i < size_t(window) ? samples[start + i] * hann[i] : 0.0;
        }
        fft(buf);
        for (size_t k = 0; k < power.size(); ++k) power[k] = std::norm(buf[k]);
        double* row = out.frames.row_ptr(t);
        for (int m = 0; m < kNumMels; ++m) {
            double e = 0.0;
            for (size_t k = 0; k < power.size(); ++k) e += fb[m][k] * power[k];
            row[m] = std::log(e + kMelFloor);
        }
    }
    return out;
}

void write_features(const std::string& path, const Tensor& frames) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("write_features: cannot open " + path);
    write_magic(os, "MU2F");
    write_u32(os, uint32_t(frames.rows()));
    write_u32(os, uint32_t(frames.cols()));
    for (double x : frames.v) write_f32(os, float(x));
}

Tensor read_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("read_features: cannot open " + path);
    expect_magic(is, "MU2F", "features");
    const int t_len = int(read_u32(is));
    const int dim = int(read_u32(is));
    if (dim != kNumMels) throw InvalidInput("read_features: expected 80 columns");
    Tensor frames(t_len, dim);
    for (auto& x : frames.v) x = double(read_f32(is));
    return frames;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kAlphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
constexpr int kMaxVocab = 52;

// Zipf(1) rank draw over [0, n).
int draw_rank(Rng& rng, int n) {
    double total = 0.0;
    for (int r = 0; r < n; ++r) total += 1.0 / double(r + 1);
    double u = rng.uniform() * total;
    double acc = 0.0;
    for (int r = 0; r < n; ++r) {
        acc += 1.0 / double(r + 1);
        if (u < acc) return r;
    }
    return n - 1;
}

struct LangModel {
    std::vector<int> perm;      // rank -> token
    std::vector<int> inv_perm;  // token -> rank
};

LangModel make_lang_model(uint64_t seed, int lang, int vocab) {
    LangModel lm;
    lm.perm.resize(vocab);
    for (int i = 0; i < vocab; ++i) lm.perm[i] = i;
    Rng rng(Rng::derive(seed, 0x1a6000 + uint64_t(lang)));
    rng.shuffle(lm.perm);
    lm.inv_perm.assign(vocab, 0);
    for (int r = 0; r < vocab; ++r) lm.inv_perm[lm.perm[r]] = r;
    return lm;
}

std::string tokens_to_text(const std::vector<int>& tokens) {
    std::string s;
    for (int t : tokens) s.push_back(kAlphabet[t]);
    return s;
}

}  // namespace

double tone_frequency(int token, int vocab_size) {
    const double mel_lo = hz_to_mel(300.0), mel_hi = hz_to_mel(6000.0);
    double mel = mel_lo + (mel_hi - mel_lo) * double(token + 1) / double(vocab_size + 1);
    return mel_to_hz(mel);
}

Waveform render_tones(const std::vector<int>& tokens, int vocab_size, int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    const int tone_n = kToneMs * sample_rate / 1000;
    const int gap_n = kGapMs * sample_rate / 1000;
    const int ramp_n = 5 * sample_rate / 1000;
    w.samples.reserve(tokens.size() * size_t(tone_n + gap_n));
    for (int tok : tokens) {
        const double freq = tone_frequency(tok, vocab_size);
        for (int i = 0; i < tone_n; ++i) {
            double env = 1.0;
            if (i < ramp_n) env = 0.5 - 0.5 * std::cos(M_PI * double(i) / double(ramp_n));
            if (i >= tone_n - ramp_n) {
                env = 0.5 - 0.5 * std::cos(M_PI * double(tone_n - 1 - i) / double(ramp_n));
            }
            w.samples.push_back(0.3 * env *
                                std::sin(2.0 * M_PI * freq * double(i) / double(sample_rate)));
        }
        for (int i = 0; i < gap_n; ++i) w.samples.push_back(0.0);
    }
    return w;
}

void make_corpus(const SyntheticCorpusSpec& spec, const std::string& out_dir) {
    if (spec.n_languages < 1 || spec.utterances_per_lang < 1 ||
        spec.dev_utterances_per_lang < 0 || spec.min_duration_ms < kTokenMs ||
        spec.max_duration_ms < spec.min_duration_ms) {
        throw InvalidInput("make_corpus: invalid spec");
    }
    if (spec.vocab_size < 4) throw InvalidInput("make_corpus: vocab_size must be >= 4");
    if (spec.vocab_size > kMaxVocab) {
        throw InvalidInput("make_corpus: vocab_size must be <= 52");
    }

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    fs::create_directories(out_dir + "/wav");
    fs::create_directories(out_dir + "/feat");

    // vocabulary file: one symbol per line, id = line index + 5
    {
        std::ofstream os(out_dir + "/vocab.txt", std::ios::binary);
        for (int i = 0; i < spec.vocab_size; ++i) os << kAlphabet[i] << "\n";
    }

    std::vector<LangModel> langs;
    for (int l = 0; l < spec.n_languages; ++l) {
        langs.push_back(make_lang_model(spec.seed, l, spec.vocab_size));
    }
    auto translate = [&](const std::vector<int>& tokens, int src, int tgt) {
        std::vector<int> out;
        out.reserve(tokens.size());
        for (int t : tokens) out.push_back(langs[tgt].perm[langs[src].inv_perm[t]]);
        return out;
    };

    std::ofstream train(out_dir + "/manifest_train.jsonl", std::ios::binary);
    std::ofstream dev(out_dir + "/manifest_dev.jsonl", std::ios::binary);
    const int total_per_lang = spec.utterances_per_lang + spec.dev_utterances_per_lang;
    char name[64];
    for (int l = 0; l < spec.n_languages; ++l) {
        const int tgt = (l + 1) % spec.n_languages;
        for (int u = 0; u < total_per_lang; ++u) {
            Rng rng(Rng::derive(spec.seed, 0x07000000 + uint64_t(l) * 1000000 + uint64_t(u)));
            const int dur = rng.uniform_range(spec.min_duration_ms, spec.max_duration_ms);
            const int n_tokens = std::max(1, (dur + kTokenMs / 2) / kTokenMs);
            std::vector<int> tokens;
            for (int i = 0; i < n_tokens; ++i) {
                tokens.push_back(langs[l].perm[draw_rank(rng, spec.vocab_size)]);
            }
            std::snprintf(name, sizeof(name), "l%d_u%03d", l, u);
            const std::string wav_rel = std::string("wav/") + name + ".wav";
            const std::string feat_rel = std::string("feat/") + name + ".mu2f";

            Waveform w = render_tones(tokens, spec.vocab_size);
            write_wav(out_dir + "/" + wav_rel, w);
            write_features(out_dir + "/" + feat_rel, compute_log_mel(w).frames);

            const std::string text = tokens_to_text(tokens);
            const std::string trans = tokens_to_text(translate(tokens, l, tgt));
            const bool is_dev = u >= spec.utterances_per_lang;
            std::ofstream& m = is_dev ? dev : train;
            using nlohmann::json;
            if (!is_dev) {
                m << json{{"audio", wav_rel}, {"lang", l}, {"stream", "speech_only"}}.dump()
                  << "\n";
                m << json{{"lang", l}, {"stream", "text_only"}, {"text", text}}.dump() << "\n";
            }
            m << json{{"audio", wav_rel},
                      {"lang", l},
                      {"stream", "asr"},
                      {"transcript", text}}
                     .dump()
              << "\n";
            m << json{{"audio", wav_rel},
                      {"src_lang", l},
                      {"stream", "ast"},
                      {"tgt_lang", tgt},
                      {"translation", trans}}
                     .dump()
              << "\n";
            m << json{{"source", text},
                      {"src_lang", l},
                      {"stream", "mt"},
                      {"target", trans},
                      {"tgt_lang", tgt}}
                     .dump()
              << "\n";
        }
    }

    // resolved spec written next to the outputs
    nlohmann::json js{{"n_languages", spec.n_languages},
                      {"utterances_per_lang", spec.utterances_per_lang},
                      {"dev_utterances_per_lang", spec.dev_utterances_per_lang},
                      {"vocab_size", spec.vocab_size},
                      {"seed", spec.seed},
                      {"min_duration_ms", spec.min_duration_ms},
                      {"max_duration_ms", spec.max_duration_ms}};
    std::ofstream os(out_dir + "/corpus_spec.json", std::ios::binary);
    os << js.dump(2) << "\n";
}

}  // namespace duet
