#include "duet/config.hpp"

#include "duet/common.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace duet {

using nlohmann::json;

namespace {

void check_keys(const json& js, const std::string& where,
                const std::set<std::string>& allowed) {
    if (!js.is_object()) throw InvalidInput("config: " + where + " must be an object");
    for (const auto& [key, value] : js.items()) {
        if (!allowed.count(key)) {
            throw InvalidInput("config: unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void get_if(const json& js, const char* key, T& out) {
    if (js.contains(key)) out = js.at(key).get<T>();
}

}  // namespace

std::vector<StreamSpec> DataConfig::pretrain_specs() const {
    return {
        {Stream::SpeechOnly, speech_only_batch, speech_mask_ratio, speech_max_span},
        {Stream::TextOnly, text_only_batch, text_mask_ratio, text_max_span},
        {Stream::Ast, ast_batch, speech_mask_ratio, speech_max_span},
        {Stream::Asr, asr_batch, speech_mask_ratio, speech_max_span},
        {Stream::Mt, mt_batch, mt_mask_ratio, text_max_span},
    };
}

MaskConfig DataConfig::mask_config() const {
    MaskConfig mc;
    mc.speech_ratio = speech_mask_ratio;
    mc.speech_max_span = speech_max_span;
    mc.text_ratio = text_mask_ratio;
    mc.text_max_span = text_max_span;
    mc.mt_ratio = mt_mask_ratio;
    mc.align_ratio = align_mask_ratio;
    return mc;
}

SamplerConfig DataConfig::sampler_config() const {
    SamplerConfig sc;
    sc.text_only_temperature = text_only_temperature;
    sc.mt_temperature = mt_temperature;
    return sc;
}

OptimConfig OptimSection::pretrain_optim() const {
    OptimConfig cfg = OptimConfig::pretrain_defaults();
    cfg.peak_lr = pretrain_peak_lr;
    cfg.warmup_steps = pretrain_warmup;
    cfg.clip_norm = clip_norm;
    cfg.checkpoint_interval = checkpoint_interval;
    return cfg;
}

OptimConfig OptimSection::finetune_optim() const {
    OptimConfig cfg = OptimConfig::finetune_defaults();
    cfg.peak_lr = finetune_peak_lr;
    cfg.warmup_steps = finetune_warmup;
    cfg.weight_decay = weight_decay;
    cfg.clip_norm = clip_norm;
    cfg.checkpoint_interval = checkpoint_interval;
    return cfg;
}

FinetuneConfig FinetuneSection::finetune_config() const {
    FinetuneConfig cfg;
    if (regime == "direct") {
        cfg.regime = FinetuneConfig::Regime::Direct;
    } else if (regime == "gradual") {
        cfg.regime = FinetuneConfig::Regime::Gradual;
    } else {
        throw InvalidInput("config: finetune.regime must be direct or gradual");
    }
    cfg.task = stream_from_name(task);
    if (cfg.task != Stream::Ast && cfg.task != Stream::Asr && cfg.task != Stream::Mt) {
        throw InvalidInput("config: finetune.task must be ast, asr or mt");
    }
    cfg.batch_size = batch_size;
    cfg.steps = steps;
    cfg.stage1_steps = stage1_steps;
    cfg.noisy = noisy;
    cfg.noise_ratio = noise_ratio;
    cfg.src_mask_ratio = src_mask_ratio;
    cfg.src_max_span = src_max_span;
    if (cfg.noise_ratio < 0.0 || cfg.noise_ratio > 1.0) {
        throw InvalidInput("config: finetune.noise_ratio must be in [0, 1]");
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidInput("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json js;
    try {
        js = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InvalidInput(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(js, "top level",
               {"schema", "seed", "paths", "model", "data", "optim", "finetune"});
    RunConfig cfg;
    get_if(js, "schema", cfg.schema);
    if (cfg.schema != 1) throw InvalidInput("config: unsupported schema version");
    get_if(js, "seed", cfg.seed);

    if (js.contains("paths")) {
        const json& p = js.at("paths");
        check_keys(p, "paths", {"corpus", "codebook", "checkpoints", "logs"});
        get_if(p, "corpus", cfg.paths.corpus);
        get_if(p, "codebook", cfg.paths.codebook);
        get_if(p, "checkpoints", cfg.paths.checkpoints);
        get_if(p, "logs", cfg.paths.logs);
    }
    if (js.contains("model")) {
        const json& m = js.at("model");
        check_keys(m, "model",
                   {"d_model", "n_enc_layers", "n_dec_layers", "n_heads", "ffn_dim",
                    "conv_kernel", "subsample_channels", "text_vocab_size",
                    "speech_codebook_size", "n_languages", "dropout", "enc_dropout",
                    "max_target_len"});
        get_if(m, "d_model", cfg.model.d_model);
        get_if(m, "n_enc_layers", cfg.model.n_enc_layers);
        get_if(m, "n_dec_layers", cfg.model.n_dec_layers);
        get_if(m, "n_heads", cfg.model.n_heads);
        get_if(m, "ffn_dim", cfg.model.ffn_dim);
        get_if(m, "conv_kernel", cfg.model.conv_kernel);
        get_if(m, "subsample_channels", cfg.model.subsample_channels);
        get_if(m, "text_vocab_size", cfg.model.text_vocab_size);
        get_if(m, "speech_codebook_size", cfg.model.speech_codebook_size);
        get_if(m, "n_languages", cfg.model.n_languages);
        get_if(m, "dropout", cfg.model.dropout);
        get_if(m, "enc_dropout", cfg.model.enc_dropout);
        get_if(m, "max_target_len", cfg.model.max_target_len);
        cfg.model.validate();
    }
    if (js.contains("data")) {
        const json& d = js.at("data");
        check_keys(d, "data",
                   {"speech_only_batch", "text_only_batch", "ast_batch", "asr_batch",
                    "mt_batch", "speech_mask_ratio", "speech_max_span", "text_mask_ratio",
                    "text_max_span", "mt_mask_ratio", "align_mask_ratio",
                    "text_only_temperature", "mt_temperature", "max_frames", "max_tokens"});
        get_if(d, "speech_only_batch", cfg.data.speech_only_batch);
        get_if(d, "text_only_batch", cfg.data.text_only_batch);
        get_if(d, "ast_batch", cfg.data.ast_batch);
        get_if(d, "asr_batch", cfg.data.asr_batch);
        get_if(d, "mt_batch", cfg.data.mt_batch);
        get_if(d, "speech_mask_ratio", cfg.data.speech_mask_ratio);
        get_if(d, "speech_max_span", cfg.data.speech_max_span);
        get_if(d, "text_mask_ratio", cfg.data.text_mask_ratio);
        get_if(d, "text_max_span", cfg.data.text_max_span);
        get_if(d, "mt_mask_ratio", cfg.data.mt_mask_ratio);
        get_if(d, "align_mask_ratio", cfg.data.align_mask_ratio);
        get_if(d, "text_only_temperature", cfg.data.text_only_temperature);
        get_if(d, "mt_temperature", cfg.data.mt_temperature);
        get_if(d, "max_frames", cfg.data.max_frames);
        get_if(d, "max_tokens", cfg.data.max_tokens);
    }
    if (js.contains("optim")) {
        const json& o = js.at("optim");
        check_keys(o, "optim",
                   {"pretrain_peak_lr", "pretrain_warmup", "finetune_peak_lr",
                    "finetune_warmup", "weight_decay", "clip_norm", "checkpoint_interval",
                    "pretrain_steps", "w_speech_only", "w_text_only", "w_text_to_speech",
                    "w_align", "w_speech_to_text_dec", "w_ctc"});
        get_if(o, "pretrain_peak_lr", cfg.optim.pretrain_peak_lr);
        get_if(o, "pretrain_warmup", cfg.optim.pretrain_warmup);
        get_if(o, "finetune_peak_lr", cfg.optim.finetune_peak_lr);
        get_if(o, "finetune_warmup", cfg.optim.finetune_warmup);
        get_if(o, "weight_decay", cfg.optim.weight_decay);
        get_if(o, "clip_norm", cfg.optim.clip_norm);
        get_if(o, "checkpoint_interval", cfg.optim.checkpoint_interval);
        get_if(o, "pretrain_steps", cfg.optim.pretrain_steps);
        get_if(o, "w_speech_only", cfg.optim.weights.speech_only);
        get_if(o, "w_text_only", cfg.optim.weights.text_only);
        get_if(o, "w_text_to_speech", cfg.optim.weights.text_to_speech);
        get_if(o, "w_align", cfg.optim.weights.align);
        get_if(o, "w_speech_to_text_dec", cfg.optim.weights.speech_to_text_dec);
        get_if(o, "w_ctc", cfg.optim.weights.ctc);
    }
    if (js.contains("finetune")) {
        const json& f = js.at("finetune");
        check_keys(f, "finetune",
                   {"regime", "task", "batch_size", "steps", "stage1_steps", "noisy",
                    "noise_ratio", "src_mask_ratio", "src_max_span"});
        get_if(f, "regime", cfg.finetune.regime);
        get_if(f, "task", cfg.finetune.task);
        get_if(f, "batch_size", cfg.finetune.batch_size);
        get_if(f, "steps", cfg.finetune.steps);
        get_if(f, "stage1_steps", cfg.finetune.stage1_steps);
        get_if(f, "noisy", cfg.finetune.noisy);
        get_if(f, "noise_ratio", cfg.finetune.noise_ratio);
        get_if(f, "src_mask_ratio", cfg.finetune.src_mask_ratio);
        get_if(f, "src_max_span", cfg.finetune.src_max_span);
        (void)cfg.finetune.finetune_config();  // validates
    }
    return cfg;
}

std::string RunConfig::to_json(int indent) const {
    json js{
        {"schema", schema},
        {"seed", seed},
        {"paths",
         {{"corpus", paths.corpus},
          {"codebook", paths.codebook},
          {"checkpoints", paths.checkpoints},
          {"logs", paths.logs}}},
        {"model", json::parse(model.to_json())},
        {"data",
         {{"speech_only_batch", data.speech_only_batch},
          {"text_only_batch", data.text_only_batch},
          {"ast_batch", data.ast_batch},
          {"asr_batch", data.asr_batch},
          {"mt_batch", data.mt_batch},
          {"speech_mask_ratio", data.speech_mask_ratio},
          {"speech_max_span", data.speech_max_span},
          {"text_mask_ratio", data.text_mask_ratio},
          {"text_max_span", data.text_max_span},
          {"mt_mask_ratio", data.mt_mask_ratio},
          {"align_mask_ratio", data.align_mask_ratio},
          {"text_only_temperature", data.text_only_temperature},
          {"mt_temperature", data.mt_temperature},
          {"max_frames", data.max_frames},
          {"max_tokens", data.max_tokens}}},
        {"optim",
         {{"pretrain_peak_lr", optim.pretrain_peak_lr},
          {"pretrain_warmup", optim.pretrain_warmup},
          {"finetune_peak_lr", optim.finetune_peak_lr},
          {"finetune_warmup", optim.finetune_warmup},
          {"weight_decay", optim.weight_decay},
          {"clip_norm", optim.clip_norm},
          {"checkpoint_interval", optim.checkpoint_interval},
          {"pretrain_steps", optim.pretrain_steps},
          {"w_speech_only", optim.weights.speech_only},
          {"w_text_only", optim.weights.text_only},
          {"w_text_to_speech", optim.weights.text_to_speech},
          {"w_align", optim.weights.align},
          {"w_speech_to_text_dec", optim.weights.speech_to_text_dec},
          {"w_ctc", optim.weights.ctc}}},
        {"finetune",
         {{"regime", finetune.regime},
          {"task", finetune.task},
          {"batch_size", finetune.batch_size},
          {"steps", finetune.steps},
          {"stage1_steps", finetune.stage1_steps},
          {"noisy", finetune.noisy},
          {"noise_ratio", finetune.noise_ratio},
          {"src_mask_ratio", finetune.src_mask_ratio},
          {"src_max_span", finetune.src_max_span}}},
    };
    return js.dump(indent);
}

uint64_t RunConfig::digest() const { return fnv1a64(to_json(-1)); }

void RunConfig::write_resolved(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("config: cannot write " + path);
    os << to_json(2) << "\n";
}

}  // namespace duet
