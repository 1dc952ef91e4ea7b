#pragma once

#include "duet/data.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>

namespace duet {

struct OptimConfig {
    enum class Kind { Adam, AdamW };
    Kind kind = Kind::Adam;       // Adam for pre-training, AdamW for fine-tuning
    double peak_lr = 3e-3;        // fine-tune default 1e-3
    int64_t warmup_steps = 400;   // fine-tune default 160
    double weight_decay = 0.01;   // AdamW only
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double clip_norm = 1.0;
    int64_t checkpoint_interval = 500;

    static OptimConfig pretrain_defaults();
    static OptimConfig finetune_defaults();
};

// Transformer schedule: linear warmup to peak_lr, inverse-sqrt decay after.
double lr_at(const OptimConfig& cfg, int64_t step);

// Adam / AdamW over a ParamStore, with global-norm gradient clipping.
class Optimizer {
public:
    Optimizer(ParamStore& params, OptimConfig cfg);

    void step();
    int64_t step_count() const { return t_; }
    double last_grad_norm() const { return last_grad_norm_; }
    double last_lr() const { return last_lr_; }

    std::map<std::string, Tensor> state_blobs() const;
    void restore(const std::map<std::string, Tensor>& blobs);
    void quantize_f32();

private:
    ParamStore& params_;
    OptimConfig cfg_;
    int64_t t_ = 0;
    double last_grad_norm_ = 0.0;
    double last_lr_ = 0.0;
    std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop shared by pre-training and fine-tuning.
// ---------------------------------------------------------------------------

enum class ObjectiveKind { Pretrain, Seq2Seq };

struct TrainerSetup {
    ObjectiveKind objective = ObjectiveKind::Pretrain;
    std::vector<StreamSpec> specs;
    SamplerConfig sampler;
    LossWeights weights;  // pretrain only
    MaskConfig masks;     // pretrain only
    OptimConfig optim;
    uint64_t seed = 0;
    // seq2seq extras
    const SynonymTable* noise_table = nullptr;
    double noise_ratio = 0.0;
    double src_mask_ratio = 0.0;  // fine-tuning masks are disabled by default
    int src_max_span = 1;
};

class Trainer {
public:
    // `frozen` carries the tokenizer-path subsampler for pre-training; pass
    // std::nullopt for fine-tuning (no quantized targets needed).
    Trainer(Model& model, const DatasetRegistry& registry, const Codebook* codebook,
            std::optional<FrozenSubsampler> frozen, TrainerSetup setup);

    // One optimization step; returns the step's loss report.
    // Throws NumericalError (with the step index) on non-finite values.
    LossReport step_once();

    // Runs `steps` steps, checkpointing every optim.checkpoint_interval into
    // ckpt_dir (if non-empty) and writing one JSON object per step to metrics
    // (if non-null). Returns the final checkpoint path ("" if no ckpt_dir).
    std::string run(int64_t steps, const std::string& ckpt_dir, std::ostream* metrics);

    void save(const std::string& path);
    void resume(const std::string& ckpt_path);

    int64_t step() const { return step_; }
    Model& model() { return model_; }

private:
    Model& model_;
    const Codebook* codebook_;
    std::optional<FrozenSubsampler> frozen_;
    std::optional<TokenizerCache> cache_;
    TrainerSetup setup_;
    BatchSampler sampler_;
    Optimizer optimizer_;
    int64_t step_ = 0;

    void log_line(std::ostream* metrics, const LossReport& rep);
};

// ---------------------------------------------------------------------------
// Fine-tuning regimes
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    enum class Regime { Direct, Gradual };
    Regime regime = Regime::Direct;
    Stream task = Stream::Ast;   // direct / gradual stage-2 task
    int batch_size = 8;
    int64_t steps = 1000;        // direct or stage-2 steps
    int64_t stage1_steps = 1000; // gradual stage 1 (multi-task 4/2/2)
    bool noisy = false;
    double noise_ratio = 0.06;
    double src_mask_ratio = 0.0; // override: re-enable source masking
    int src_max_span = 1;
};

// Runs every speech item's features through the frozen subsampler and fits
// the k-means codebook on the pooled latent rows (duplicate feature tensors
// are counted once).
Codebook fit_codebook_from_registry(const DatasetRegistry& registry,
                                    const FrozenSubsampler& frozen, int k, int iters,
                                    uint64_t seed);

// Initializes the model from seed, pre-trains for `steps`, returns the final
// checkpoint path. steps = 0 still writes the init checkpoint.
std::string pretrain(Model& model, const DatasetRegistry& registry, const Codebook& codebook,
                     const LossWeights& weights, const MaskConfig& masks,
                     std::vector<StreamSpec> specs, SamplerConfig sampler, OptimConfig optim,
                     int64_t steps, uint64_t seed, const std::string& ckpt_dir,
                     std::ostream* metrics);

// Builds the synonym table from the decoder token embeddings of `model`
// (text ids only). Used by noisy fine-tuning.
SynonymTable synonym_table_from_model(const Model& model, uint64_t seed);

// `model` holds the pre-trained parameters on entry. Both return the final
// checkpoint path; gradual also writes its stage-1 checkpoint.
std::string finetune_direct(Model& model, const DatasetRegistry& registry,
                            const FinetuneConfig& cfg, OptimConfig optim, uint64_t seed,
                            const std::string& ckpt_dir, std::ostream* metrics);
std::string finetune_gradual(Model& model, const DatasetRegistry& registry,
                             const FinetuneConfig& cfg, OptimConfig optim, uint64_t seed,
                             const std::string& ckpt_dir, std::ostream* metrics);

}  // namespace duet
