#include "duet/trainer.hpp"

#include "duet/common.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <set>
#include <fstream>

namespace duet {

using nlohmann::json;

OptimConfig OptimConfig::pretrain_defaults() {
    OptimConfig cfg;
    cfg.kind = Kind::Adam;
    cfg.peak_lr = 3e-3;
    cfg.warmup_steps = 400;
    return cfg;
}

OptimConfig OptimConfig::finetune_defaults() {
    OptimConfig cfg;
    cfg.kind = Kind::AdamW;
    cfg.peak_lr = 1e-3;
    cfg.warmup_steps = 160;
    cfg.weight_decay = 0.01;
    return cfg;
}

double lr_at(const OptimConfig& cfg, int64_t step) {
    if (step < 1) throw InvalidInput("lr_at: step must be >= 1");
    const double w = double(cfg.warmup_steps);
    const double s = double(step);
    return cfg.peak_lr * std::min(s / w, std::sqrt(w / s));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Optimizer::Optimizer(ParamStore& params, OptimConfig cfg) : params_(params), cfg_(cfg) {
    if (cfg_.warmup_steps < 1) throw InvalidInput("Optimizer: warmup must be >= 1");
    if (!(cfg_.peak_lr > 0.0)) throw InvalidInput("Optimizer: peak_lr must be > 0");
    for (Param* p : params_.all()) {
        m_.push_back(Tensor(p->value.shape));
        v_.push_back(Tensor(p->value.shape));
    }
}

void Optimizer::step() {
    double norm_sq = 0.0;
    for (Param* p : params_.all()) {
        for (double g : p->grad.v) norm_sq += g * g;
    }
    last_grad_norm_ = std::sqrt(norm_sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && last_grad_norm_ > cfg_.clip_norm) {
        scale = cfg_.clip_norm / last_grad_norm_;
    }

    t_++;
    last_lr_ = lr_at(cfg_, t_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t pi = 0; pi < params_.all().size(); ++pi) {
        Param* p = params_.all()[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad.v[i] * scale;
            m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * g;
            v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * g * g;
            const double m_hat = m.v[i] / bc1;
            const double v_hat = v.v[i] / bc2;
            double update = m_hat / (std::sqrt(v_hat) + cfg_.eps);
            if (cfg_.kind == OptimConfig::Kind::AdamW) {
                update += cfg_.weight_decay * p->value.v[i];
            }
            p->value.v[i] -= last_lr_ * update;
        }
    }
}

std::map<std::string, Tensor> Optimizer::state_blobs() const {
    std::map<std::string, Tensor> blobs;
    for (size_t pi = 0; pi < params_.all().size(); ++pi) {
        blobs["opt.m." + params_.all()[pi]->name] = m_[pi];
        blobs["opt.v." + params_.all()[pi]->name] = v_[pi];
    }
    Tensor t_blob(1, 1);
    t_blob.v[0] = double(t_);
    blobs["opt.t"] = t_blob;
    return blobs;
}

void Optimizer::restore(const std::map<std::string, Tensor>& blobs) {
    for (size_t pi = 0; pi < params_.all().size(); ++pi) {
        const std::string& name = params_.all()[pi]->name;
        auto im = blobs.find("opt.m." + name);
        auto iv = blobs.find("opt.v." + name);
        if (im == blobs.end() || iv == blobs.end()) {
            throw InvalidInput("Optimizer::restore: missing state for " + name);
        }
        m_[pi] = im->second;
        v_[pi] = iv->second;
    }
    auto it = blobs.find("opt.t");
    if (it == blobs.end()) throw InvalidInput("Optimizer::restore: missing opt.t");
    t_ = int64_t(it->second.v[0]);
}

void Optimizer::quantize_f32() {
    for (auto& m : m_) {
        for (auto& x : m.v) x = double(float(x));
    }
    for (auto& v : v_) {
        for (auto& x : v.v) x = double(float(x));
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(Model& model, const DatasetRegistry& registry, const Codebook* codebook,
                 std::optional<FrozenSubsampler> frozen, TrainerSetup setup)
    : model_(model),
      codebook_(codebook),
      frozen_(std::move(frozen)),
      setup_(std::move(setup)),
      sampler_(registry, setup_.specs, setup_.sampler, Rng::derive(setup_.seed, 0xda7a)),
      optimizer_(model.params(), setup_.optim) {
    if (setup_.objective == ObjectiveKind::Pretrain) {
        if (!codebook_ || !frozen_) {
            throw InvalidInput("Trainer: pre-training needs a codebook and tokenizer CNN");
        }
        if (codebook_->dim() != model_.config().d_model) {
            throw InvalidInput("Trainer: codebook dim != d_model");
        }
        if (codebook_->size() != model_.config().speech_codebook_size) {
            throw InvalidInput("Trainer: codebook size != config K");
        }
        cache_.emplace(*frozen_, *codebook_);
    }
}

LossReport Trainer::step_once() {
    const int64_t step_idx = step_;
    auto batch = sampler_.next_batch(uint64_t(step_idx));
    Tape tape;
    Rng dropout_rng(Rng::derive(setup_.seed, 0xd309 + uint64_t(step_idx)));
    Model::Ctx ctx{tape, dropout_rng, true, {}};

    ObjectiveResult res;
    try {
        if (setup_.objective == ObjectiveKind::Pretrain) {
            res = total_objective(model_, ctx, batch, setup_.weights, setup_.masks, *cache_,
                                  Rng::derive(setup_.seed, 0x3a5c + uint64_t(step_idx)));
        } else {
            Rng noise_rng(Rng::derive(setup_.seed, 0x401e + uint64_t(step_idx)));
            res = seq2seq_objective(model_, ctx, batch, setup_.noise_table,
                                    setup_.noise_ratio, noise_rng, setup_.src_mask_ratio,
                                    setup_.src_max_span,
                                    Rng::derive(setup_.seed, 0x3a5c + uint64_t(step_idx)));
        }
    } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(step_idx) + ": " + e.what());
    }
    if (!std::isfinite(res.total.val().v[0])) {
        throw NumericalError("step " + std::to_string(step_idx) + ": non-finite loss");
    }

    tape.backward(res.total);
    model_.params().zero_grads();
    for (auto& [param, var] : ctx.cache) {
        if (!tape.has_grad(var)) continue;
        const Tensor& g = tape.grad(var);
        for (size_t i = 0; i < g.size(); ++i) param->grad.v[i] += g.v[i];
    }
    for (Param* p : model_.params().all()) {
        if (!p->grad.all_finite()) {
            throw NumericalError("step " + std::to_string(step_idx) + ": non-finite gradient");
        }
    }
    optimizer_.step();
    step_++;
    return res.report;
}

void Trainer::log_line(std::ostream* metrics, const LossReport& rep) {
    if (!metrics) return;
    json terms = json::object();
    for (const auto& e : rep.entries) {
        terms[e.name] = {{"value", e.value}, {"count", e.count}, {"weight", e.weight}};
    }
    json js{{"step", step_},
            {"lr", optimizer_.last_lr()},
            {"grad_norm", optimizer_.last_grad_norm()},
            {"total", rep.total},
            {"terms", terms}};
    *metrics << js.dump() << "\n";
}

void Trainer::save(const std::string& path) {
    // round the live state through f32 so saved and in-memory states agree
    model_.params().quantize_f32();
    optimizer_.quantize_f32();
    std::map<std::string, Tensor> extra = optimizer_.state_blobs();
    if (frozen_) {
        for (const auto& [name, tensor] : frozen_->weights) extra["tok." + name] = tensor;
    }
    auto state = sampler_.state();
    Tensor st(1, int(state.size()));
    for (size_t i = 0; i < state.size(); ++i) st.v[i] = double(state[i]);
    extra["data.sampler_pos"] = st;
    save_checkpoint(path, model_.config(), model_.params(), uint64_t(step_), extra);
}

void Trainer::resume(const std::string& ckpt_path) {
    auto ck = load_checkpoint(ckpt_path, model_.config());
    assign_params(model_.params(), ck.blobs);
    optimizer_.restore(ck.blobs);
    auto it = ck.blobs.find("data.sampler_pos");
    if (it == ck.blobs.end()) throw InvalidInput("resume: missing sampler state");
    std::vector<int64_t> state;
    for (double x : it->second.v) state.push_back(int64_t(x));
    sampler_.restore(state);
    if (frozen_) {
        for (auto& [name, tensor] : frozen_->weights) {
            auto jt = ck.blobs.find("tok." + name);
            if (jt == ck.blobs.end()) throw InvalidInput("resume: missing tokenizer blob");
            tensor = jt->second;
        }
        cache_.emplace(*frozen_, *codebook_);
    }
    step_ = int64_t(ck.step);
}

std::string Trainer::run(int64_t steps, const std::string& ckpt_dir, std::ostream* metrics) {
    namespace fs = std::filesystem;
    if (!ckpt_dir.empty()) fs::create_directories(ckpt_dir);
    auto ckpt_name = [&](int64_t s) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "ckpt_%08lld.mu2k", static_cast<long long>(s));
        return ckpt_dir + "/" + buf;
    };
    const int64_t target = step_ + steps;
    while (step_ < target) {
        LossReport rep;
        try {
            rep = step_once();
        } catch (const NumericalError& e) {
            if (metrics) {
                json js{{"step", step_}, {"error", e.what()}};
                *metrics << js.dump() << "\n";
            }
            throw;
        }
        log_line(metrics, rep);
        if (!ckpt_dir.empty() && setup_.optim.checkpoint_interval > 0 &&
            step_ % setup_.optim.checkpoint_interval == 0 && step_ < target) {
            save(ckpt_name(step_));
        }
    }
    if (ckpt_dir.empty()) return "";
    const std::string final_path = ckpt_dir + "/final.mu2k";
    save(final_path);
    return final_path;
}

// ---------------------------------------------------------------------------
// Top-level regimes
// ---------------------------------------------------------------------------

Codebook fit_codebook_from_registry(const DatasetRegistry& registry,
                                    const FrozenSubsampler& frozen, int k, int iters,
                                    uint64_t seed) {
    std::vector<const Tensor*> feats;
    std::set<uint64_t> seen;
    for (Stream s : {Stream::SpeechOnly, Stream::Asr, Stream::Ast}) {
        for (const TrainItem& item : registry.items(s)) {
            uint64_t h = fnv1a64(item.features.v.data(),
                                 item.features.v.size() * sizeof(double));
            if (!seen.insert(h).second) continue;
            feats.push_back(&item.features);
        }
    }
    if (feats.empty()) throw InvalidInput("fit_codebook_from_registry: no speech items");
    std::vector<Tensor> latents;
    size_t total_rows = 0;
    for (const Tensor* f : feats) {
        latents.push_back(frozen.run(*f));
        total_rows += size_t(latents.back().rows());
    }
    Tensor pooled(int(total_rows), latents[0].cols());
    size_t row = 0;
    for (const Tensor& l : latents) {
        std::copy(l.v.begin(), l.v.end(), pooled.v.begin() + row * size_t(pooled.cols()));
        row += size_t(l.rows());
    }
    return fit_codebook(pooled, k, iters, seed);
}

std::string pretrain(Model& model, const DatasetRegistry& registry, const Codebook& codebook,
                     const LossWeights& weights, const MaskConfig& masks,
                     std::vector<StreamSpec> specs, SamplerConfig sampler, OptimConfig optim,
                     int64_t steps, uint64_t seed, const std::string& ckpt_dir,
                     std::ostream* metrics) {
    model.init_params(seed);
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Pretrain;
    setup.specs = std::move(specs);
    setup.sampler = sampler;
    setup.weights = weights;
    setup.masks = masks;
    setup.optim = optim;
    setup.seed = seed;
    Trainer trainer(model, registry, &codebook, model.snapshot_subsampler(), setup);
    return trainer.run(steps, ckpt_dir, metrics);
}

SynonymTable synonym_table_from_model(const Model& model, uint64_t seed) {
    const Param& emb = model.params().get("dec.emb.token");
    return build_synonym_table(emb.value, NUM_RESERVED, model.config().text_vocab_size, seed);
}

namespace {

std::string finetune_stage(Model& model, const DatasetRegistry& registry,
                           std::vector<StreamSpec> specs, const FinetuneConfig& cfg,
                           OptimConfig optim, int64_t steps, uint64_t seed,
                           const std::string& ckpt_dir, std::ostream* metrics,
                           const SynonymTable* noise_table) {
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Seq2Seq;
    setup.specs = std::move(specs);
    setup.optim = optim;
    setup.seed = seed;
    setup.noise_table = noise_table;
    setup.noise_ratio = noise_table ? cfg.noise_ratio : 0.0;
    setup.src_mask_ratio = cfg.src_mask_ratio;
    setup.src_max_span = cfg.src_max_span;
    Trainer trainer(model, registry, nullptr, std::nullopt, setup);
    return trainer.run(steps, ckpt_dir, metrics);
}

}  // namespace

std::string finetune_direct(Model& model, const DatasetRegistry& registry,
                            const FinetuneConfig& cfg, OptimConfig optim, uint64_t seed,
                            const std::string& ckpt_dir, std::ostream* metrics) {
    if (cfg.steps < 0) throw InvalidInput("finetune: negative step count");
    SynonymTable table;
    const SynonymTable* table_ptr = nullptr;
    if (cfg.noisy) {
        table = synonym_table_from_model(model, seed);
        table_ptr = &table;
    }
    return finetune_stage(model, registry,
                          finetune_single_task_specs(cfg.task, cfg.batch_size), cfg, optim,
                          cfg.steps, seed, ckpt_dir, metrics, table_ptr);
}

std::string finetune_gradual(Model& model, const DatasetRegistry& registry,
                             const FinetuneConfig& cfg, OptimConfig optim, uint64_t seed,
                             const std::string& ckpt_dir, std::ostream* metrics) {
    SynonymTable table;
    const SynonymTable* table_ptr = nullptr;
    if (cfg.noisy) {
        table = synonym_table_from_model(model, seed);
        table_ptr = &table;
    }
    // stage 1: multi-task 4/2/2, no masks, forward seq2seq only
    const std::string stage1_dir = ckpt_dir.empty() ? "" : ckpt_dir + "/stage1";
    finetune_stage(model, registry, finetune_multi_task_specs(), cfg, optim,
                   cfg.stage1_steps, seed, stage1_dir, metrics, table_ptr);
    // stage 2: continue on the selected task with a fresh optimizer
    return finetune_stage(model, registry,
                          finetune_single_task_specs(cfg.task, cfg.batch_size), cfg, optim,
                          cfg.steps, Rng::derive(seed, 0x57a6e2), ckpt_dir, metrics,
                          table_ptr);
}

}  // namespace duet
