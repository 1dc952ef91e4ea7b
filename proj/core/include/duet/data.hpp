#pragma once

#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/tokenization.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace duet {

enum class Stream : int { SpeechOnly = 0, TextOnly, Ast, Asr, Mt };
constexpr int kNumStreams = 5;

const char* stream_name(Stream s);
Stream stream_from_name(const std::string& name);

// One training example, already featurized/tokenized at registry load.
struct TrainItem {
    int id = -1;  // registry-unique, used for target caching
    Stream stream = Stream::SpeechOnly;
    int src_lang = 0;
    int tgt_lang = 0;
    Tensor features;            // speech streams: T x 80 log-mel
    std::vector<int> src_text;  // text-only / MT source ids
    std::vector<int> tgt_text;  // transcript / translation / MT target ids
};

struct StreamSpec {
    Stream stream = Stream::SpeechOnly;
    int batch_size = 0;  // 0 disables the stream
    double mask_ratio = 0.5;
    int max_span = 10;
};

// Pre-training defaults: per-step stream mix 4/8/1/1/1, speech masks 0.5/10,
// text masks 0.5/5, MT source masks 0.25/5.
std::vector<StreamSpec> default_pretrain_specs();

struct SamplerConfig {
    double text_only_temperature = 3.0;
    double mt_temperature = 2.0;
};

// p_l proportional to (n_l / sum_n)^(1/T).
std::vector<double> language_distribution(const std::vector<int64_t>& counts, double temperature);

class DatasetRegistry {
public:
    // Reads a manifest (one JSON object per line) relative to corpus_dir.
    // Prefers cached .mu2f features next to each wav; speech longer than
    // max_frames or text longer than max_tokens is filtered out.
    static DatasetRegistry load(const std::string& corpus_dir, const std::string& manifest,
                                const TextVocab& vocab, int max_frames = 512,
                                int max_tokens = 128);

    void add(TrainItem item);

    const std::vector<TrainItem>& items(Stream s) const { return items_[int(s)]; }
    int n_languages() const { return n_languages_; }
    // Example count per language for one stream (language = src_lang).
    std::vector<int64_t> language_counts(Stream s) const;

private:
    std::vector<TrainItem> items_[kNumStreams];
    int n_languages_ = 0;
    int next_id_ = 0;
};

// Deterministic mixed-batch builder. Within each (stream, language) bucket,
// items are visited in per-epoch shuffled order with no repeats inside an
// epoch; languages are drawn per draw from the temperature distribution.
// State is the per-bucket position counters, so a resumed run continues the
// exact example sequence.
class BatchSampler {
public:
    BatchSampler(const DatasetRegistry& registry, std::vector<StreamSpec> specs,
                 SamplerConfig sampler, uint64_t seed);

    // Draws the step-th batch. Mutates bucket counters.
    std::vector<TrainItem> next_batch(uint64_t step);
    // Mask parameters for a stream, as configured.
    const StreamSpec& spec_for(Stream s) const;

    std::vector<int64_t> state() const;
    void restore(const std::vector<int64_t>& state);

private:
    struct Bucket {
        std::vector<int> item_indices;  // into registry items(stream)
        int64_t pos = 0;
    };

    const DatasetRegistry& registry_;
    std::vector<StreamSpec> specs_;
    SamplerConfig sampler_;
    uint64_t seed_;
    // per stream: buckets by language and the language distribution
    std::vector<Bucket> buckets_[kNumStreams];
    std::vector<double> lang_dist_[kNumStreams];

    const TrainItem& draw_item(Stream s, Rng& rng);
};

// Fine-tuning mixes: multi_task = {4 ast, 2 asr, 2 mt}; single_task = one
// homogeneous stream. Masking is disabled (ratio 0) in both.
std::vector<StreamSpec> finetune_multi_task_specs();
std::vector<StreamSpec> finetune_single_task_specs(Stream s, int batch_size);

}  // namespace duet
