// duet: multitask multilingual speech-text pre-training at desk scale.
//
// Subcommands: make-corpus, fit-codebook, pretrain, finetune, evaluate,
// inspect. Exit codes: 0 ok, 1 invalid input, 2 numerical error.

#include "duet/common.hpp"
#include "duet/config.hpp"
#include "duet/data.hpp"
#include "duet/eval.hpp"
#include "duet/frontend.hpp"
#include "duet/model.hpp"
#include "duet/tokenization.hpp"
#include "duet/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace duet;

namespace {

struct CommonArgs {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = RunConfig::from_file(args.config_path);
    if (args.seed_set) cfg.seed = args.seed;
    return cfg;
}

TextVocab load_vocab(const RunConfig& cfg) {
    const std::string path = cfg.paths.corpus + "/vocab.txt";
    TextVocab vocab = TextVocab::from_file(path);
    if (vocab.num_symbols() != cfg.model.text_vocab_size) {
        throw InvalidInput("vocab " + path + " has " + std::to_string(vocab.num_symbols()) +
                           " symbols but model.text_vocab_size is " +
                           std::to_string(cfg.model.text_vocab_size));
    }
    return vocab;
}

DatasetRegistry load_registry(const RunConfig& cfg, const TextVocab& vocab,
                              const std::string& manifest) {
    auto reg = DatasetRegistry::load(cfg.paths.corpus, manifest, vocab, cfg.data.max_frames,
                                     cfg.data.max_tokens);
    if (reg.n_languages() > cfg.model.n_languages) {
        throw InvalidInput("corpus has " + std::to_string(reg.n_languages()) +
                           " languages but model.n_languages is " +
                           std::to_string(cfg.model.n_languages));
    }
    return reg;
}

Model load_model_from_checkpoint(const RunConfig& cfg, const std::string& ckpt) {
    Model model(cfg.model);
    auto loaded = load_checkpoint(ckpt, cfg.model);
    assign_params(model.params(), loaded.blobs);
    return model;
}

int run_make_corpus(const CommonArgs& common, const std::string& out_flag,
                    SyntheticCorpusSpec spec) {
    RunConfig cfg = load_config(common);
    spec.seed = common.seed_set ? common.seed : cfg.seed;
    const std::string out = out_flag.empty() ? cfg.paths.corpus : out_flag;
    make_corpus(spec, out);
    std::printf("corpus written to %s\n", out.c_str());
    return 0;
}

int run_fit_codebook(const CommonArgs& common, const std::string& out_flag, int iters) {
    RunConfig cfg = load_config(common);
    TextVocab vocab = load_vocab(cfg);
    auto registry = load_registry(cfg, vocab, "manifest_train.jsonl");
    Model model(cfg.model);
    model.init_params(cfg.seed);
    auto codebook = fit_codebook_from_registry(registry, model.snapshot_subsampler(),
                                               cfg.model.speech_codebook_size, iters,
                                               cfg.seed);
    const std::string out = out_flag.empty() ? cfg.paths.codebook : out_flag;
    if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
    write_codebook(out, codebook);
    cfg.write_resolved(out + ".config.json");
    std::printf("codebook (K=%d, d=%d) written to %s, checksum %016llx\n", codebook.size(),
                codebook.dim(), out.c_str(),
                static_cast<unsigned long long>(codebook_checksum(codebook)));
    return 0;
}

int run_pretrain(const CommonArgs& common, int64_t steps_flag, bool steps_set) {
    RunConfig cfg = load_config(common);
    const int64_t steps = steps_set ? steps_flag : cfg.optim.pretrain_steps;
    TextVocab vocab = load_vocab(cfg);
    auto registry = load_registry(cfg, vocab, "manifest_train.jsonl");
    Codebook codebook = read_codebook(cfg.paths.codebook);

    fs::create_directories(cfg.paths.checkpoints);
    fs::create_directories(cfg.paths.logs);
    cfg.write_resolved(cfg.paths.checkpoints + "/run_config.json");
    std::ofstream metrics(cfg.paths.logs + "/pretrain_metrics.jsonl", std::ios::binary);

    Model model(cfg.model);
    auto final_path = pretrain(model, registry, codebook, cfg.optim.weights,
                               cfg.data.mask_config(), cfg.data.pretrain_specs(),
                               cfg.data.sampler_config(), cfg.optim.pretrain_optim(), steps,
                               cfg.seed, cfg.paths.checkpoints, &metrics);
    std::printf("pre-trained %lld steps, final checkpoint %s\n",
                static_cast<long long>(steps), final_path.c_str());
    return 0;
}

int run_finetune(const CommonArgs& common, const std::string& ckpt,
                 const std::string& regime_flag, const std::string& task_flag,
                 int64_t steps_flag, int64_t stage1_flag, int noisy_flag,
                 double noise_ratio_flag, const std::string& out_flag) {
    RunConfig cfg = load_config(common);
    if (!regime_flag.empty()) cfg.finetune.regime = regime_flag;
    if (!task_flag.empty()) cfg.finetune.task = task_flag;
    if (steps_flag >= 0) cfg.finetune.steps = steps_flag;
    if (stage1_flag >= 0) cfg.finetune.stage1_steps = stage1_flag;
    if (noisy_flag >= 0) cfg.finetune.noisy = noisy_flag != 0;
    if (noise_ratio_flag >= 0.0) cfg.finetune.noise_ratio = noise_ratio_flag;
    FinetuneConfig ft = cfg.finetune.finetune_config();

    TextVocab vocab = load_vocab(cfg);
    auto registry = load_registry(cfg, vocab, "manifest_train.jsonl");
    Model model = load_model_from_checkpoint(cfg, ckpt);

    const std::string out =
        out_flag.empty() ? cfg.paths.checkpoints + "/finetune_" + cfg.finetune.task : out_flag;
    fs::create_directories(out);
    fs::create_directories(cfg.paths.logs);
    cfg.write_resolved(out + "/run_config.json");
    std::ofstream metrics(cfg.paths.logs + "/finetune_metrics.jsonl", std::ios::binary);

    std::string final_path;
    if (ft.regime == FinetuneConfig::Regime::Direct) {
        final_path = finetune_direct(model, registry, ft, cfg.optim.finetune_optim(),
                                     cfg.seed, out, &metrics);
    } else {
        final_path = finetune_gradual(model, registry, ft, cfg.optim.finetune_optim(),
                                      cfg.seed, out, &metrics);
    }
    std::printf("fine-tuned (%s, %s), final checkpoint %s\n", cfg.finetune.regime.c_str(),
                cfg.finetune.task.c_str(), final_path.c_str());
    return 0;
}

int run_evaluate(const CommonArgs& common, const std::string& ckpt,
                 const std::string& task_flag, const std::string& split, int beam,
                 int max_len, const std::string& out_flag) {
    RunConfig cfg = load_config(common);
    const std::string task = task_flag.empty() ? cfg.finetune.task : task_flag;
    TextVocab vocab = load_vocab(cfg);
    auto registry = load_registry(cfg, vocab, "manifest_" + split + ".jsonl");
    Model model = load_model_from_checkpoint(cfg, ckpt);

    auto report = evaluate_task(model, registry, stream_from_name(task), beam, max_len);
    const std::string out = out_flag.empty()
                                ? cfg.paths.logs + "/eval_" + task + "_" + split + ".json"
                                : out_flag;
    if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream os(out, std::ios::binary);
    os << report.to_json() << "\n";
    cfg.write_resolved(out + ".config.json");
    std::printf("%s\n", report.to_json().c_str());
    return 0;
}

int run_inspect(const CommonArgs& common, const std::string& ckpt) {
    auto [digest, step] = read_checkpoint_header(ckpt);
    std::printf("checkpoint:    %s\n", ckpt.c_str());
    std::printf("config digest: %016llx\n", static_cast<unsigned long long>(digest));
    std::printf("training step: %llu\n", static_cast<unsigned long long>(step));
    if (!common.config_path.empty()) {
        RunConfig cfg = load_config(common);
        Model model(cfg.model);
        auto loaded = load_checkpoint(ckpt, cfg.model);
        assign_params(model.params(), loaded.blobs);
        const size_t enc = model.params().count_scalars(true);
        const size_t dec = model.params().count_scalars(false);
        std::printf("theta_e params: %zu\n", enc);
        std::printf("theta_d params: %zu\n", dec);
        std::printf("total params:   %zu\n", enc + dec);
        std::printf("blobs:          %zu\n", loaded.blobs.size());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"duet: joint speech-text sequence-to-sequence training"};
    app.require_subcommand(1);

    CommonArgs common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "Run configuration JSON");
        auto* seed_opt = sub->add_option("--seed", common.seed, "Random seed");
        sub->callback([&common, seed_opt]() { common.seed_set = seed_opt->count() > 0; });
    };

    // make-corpus
    auto* mc = app.add_subcommand("make-corpus", "Generate a synthetic corpus");
    std::string mc_out;
    SyntheticCorpusSpec spec;
    add_common(mc);
    mc->add_option("--out", mc_out, "Output directory");
    mc->add_option("--languages", spec.n_languages, "Number of synthetic languages");
    mc->add_option("--utterances", spec.utterances_per_lang, "Train utterances per language");
    mc->add_option("--dev-utterances", spec.dev_utterances_per_lang,
                   "Held-out utterances per language");
    mc->add_option("--vocab-size", spec.vocab_size, "Symbols per language (4..52)");
    mc->add_option("--min-ms", spec.min_duration_ms, "Minimum utterance duration");
    mc->add_option("--max-ms", spec.max_duration_ms, "Maximum utterance duration");

    // fit-codebook
    auto* fc = app.add_subcommand("fit-codebook", "Fit the frozen speech codebook");
    std::string fc_out;
    int fc_iters = 20;
    add_common(fc);
    fc->add_option("--out", fc_out, "Codebook output file");
    fc->add_option("--iters", fc_iters, "k-means iterations");

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "Pre-train on the mixed objective");
    int64_t pt_steps = 0;
    add_common(pt);
    auto* pt_steps_opt = pt->add_option("--steps", pt_steps, "Optimization steps");

    // finetune
    auto* ft = app.add_subcommand("finetune", "Fine-tune from a checkpoint");
    std::string ft_ckpt, ft_regime, ft_task, ft_out;
    int64_t ft_steps = -1, ft_stage1 = -1;
    int ft_noisy = -1;
    double ft_noise_ratio = -1.0;
    add_common(ft);
    ft->add_option("--ckpt", ft_ckpt, "Pre-trained checkpoint")->required();
    ft->add_option("--regime", ft_regime, "direct or gradual");
    ft->add_option("--task", ft_task, "ast, asr or mt");
    ft->add_option("--steps", ft_steps, "Fine-tune steps (stage 2 for gradual)");
    ft->add_option("--stage1-steps", ft_stage1, "Gradual stage-1 steps");
    ft->add_option("--noisy", ft_noisy, "1 to enable synonym noise, 0 to disable");
    ft->add_option("--noise-ratio", ft_noise_ratio, "Decoder-input noise ratio");
    ft->add_option("--out", ft_out, "Checkpoint output directory");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Decode and score a task");
    std::string ev_ckpt, ev_task, ev_split = "dev", ev_out;
    int ev_beam = 4, ev_max_len = 64;
    add_common(ev);
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint to evaluate")->required();
    ev->add_option("--task", ev_task, "ast, asr or mt");
    ev->add_option("--split", ev_split, "train or dev manifest");
    ev->add_option("--beam", ev_beam, "Beam size");
    ev->add_option("--max-len", ev_max_len, "Maximum decode length");
    ev->add_option("--out", ev_out, "Report output file");

    // inspect
    auto* in = app.add_subcommand("inspect", "Describe a checkpoint");
    std::string in_ckpt;
    add_common(in);
    in->add_option("--ckpt", in_ckpt, "Checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 1;
    }

    try {
        if (mc->parsed()) return run_make_corpus(common, mc_out, spec);
        if (fc->parsed()) return run_fit_codebook(common, fc_out, fc_iters);
        if (pt->parsed()) return run_pretrain(common, pt_steps, pt_steps_opt->count() > 0);
        if (ft->parsed()) {
            return run_finetune(common, ft_ckpt, ft_regime, ft_task, ft_steps, ft_stage1,
                                ft_noisy, ft_noise_ratio, ft_out);
        }
        if (ev->parsed()) {
            return run_evaluate(common, ev_ckpt, ev_task, ev_split, ev_beam, ev_max_len,
                                ev_out);
        }
        if (in->parsed()) return run_inspect(common, in_ckpt);
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
