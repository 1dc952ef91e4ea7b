#pragma once

#include "duet/data.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"
#include "duet/trainer.hpp"

#include <string>

namespace duet {

struct DataConfig {
    int speech_only_batch = 4;
    int text_only_batch = 8;
    int ast_batch = 1;
    int asr_batch = 1;
    int mt_batch = 1;
    double speech_mask_ratio = 0.5;
    int speech_max_span = 10;
    double text_mask_ratio = 0.5;
    int text_max_span = 5;
    double mt_mask_ratio = 0.25;
    double align_mask_ratio = 0.5;
    double text_only_temperature = 3.0;
    double mt_temperature = 2.0;
    int max_frames = 512;
    int max_tokens = 128;

    std::vector<StreamSpec> pretrain_specs() const;
    MaskConfig mask_config() const;
    SamplerConfig sampler_config() const;
};

struct OptimSection {
    double pretrain_peak_lr = 3e-3;
    int64_t pretrain_warmup = 400;
    double finetune_peak_lr = 1e-3;
    int64_t finetune_warmup = 160;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int64_t checkpoint_interval = 500;
    int64_t pretrain_steps = 2000;
    LossWeights weights;

    OptimConfig pretrain_optim() const;
    OptimConfig finetune_optim() const;
};

struct FinetuneSection {
    std::string regime = "direct";  // direct | gradual
    std::string task = "ast";       // ast | asr | mt
    int batch_size = 8;
    int64_t steps = 1000;
    int64_t stage1_steps = 1000;
    bool noisy = false;
    double noise_ratio = 0.06;
    double src_mask_ratio = 0.0;
    int src_max_span = 1;

    FinetuneConfig finetune_config() const;
};

struct PathsSection {
    std::string corpus = "corpus";
    std::string codebook = "codebook.mu2c";
    std::string checkpoints = "checkpoints";
    std::string logs = "logs";
};

// The full run configuration: schema-versioned, strict about unknown keys.
struct RunConfig {
    int schema = 1;
    uint64_t seed = 0;
    PathsSection paths;
    ModelConfig model;
    DataConfig data;
    OptimSection optim;
    FinetuneSection finetune;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);
    std::string to_json(int indent = 2) const;
    uint64_t digest() const;
    // Writes the resolved config next to a run's outputs.
    void write_resolved(const std::string& path) const;
};

}  // namespace duet
