#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/common.hpp"
#include "duet/eval.hpp"
#include "duet/frontend.hpp"
#include "duet/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace duet;
namespace fs = std::filesystem;

namespace {

struct Corpus {
    std::string dir;
    TextVocab vocab;
    DatasetRegistry registry;

    explicit Corpus(const std::string& d, int utterances = 6, uint64_t seed = 5)
        : dir(d), vocab(make(d, utterances, seed)), registry(DatasetRegistry::load(
                                                         d, "manifest_train.jsonl", vocab)) {}
    ~Corpus() { fs::remove_all(dir); }

    static TextVocab make(const std::string& dir, int utterances, uint64_t seed) {
        fs::remove_all(dir);
        SyntheticCorpusSpec spec;
        spec.n_languages = 2;
        spec.utterances_per_lang = utterances;
        spec.dev_utterances_per_lang = 0;
        spec.vocab_size = 8;
        spec.seed = seed;
        spec.min_duration_ms = 240;
        spec.max_duration_ms = 400;
        make_corpus(spec, dir);
        return TextVocab::from_file(dir + "/vocab.txt");
    }
};

ModelConfig small_config(const TextVocab& vocab, int k = 8) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.conv_kernel = 5;
    cfg.subsample_channels = 2;
    cfg.text_vocab_size = vocab.num_symbols();
    cfg.speech_codebook_size = k;
    cfg.n_languages = 2;
    cfg.dropout = 0.0;
    cfg.enc_dropout = 0.0;
    return cfg;
}

struct PretrainFixture {
    Corpus corpus;
    Model model;
    Codebook codebook;

    explicit PretrainFixture(const std::string& dir, uint64_t seed = 7)
        : corpus(dir), model(small_config(corpus.vocab)) {
        model.init_params(seed);
        codebook =
            fit_codebook_from_registry(corpus.registry, model.snapshot_subsampler(), 8, 5, seed);
    }

    Trainer trainer(uint64_t seed, OptimConfig optim = OptimConfig::pretrain_defaults()) {
        TrainerSetup setup;
        setup.objective = ObjectiveKind::Pretrain;
        setup.specs = default_pretrain_specs();
        setup.optim = optim;
        setup.seed = seed;
        return Trainer(model, corpus.registry, &codebook, model.snapshot_subsampler(), setup);
    }
};

}  // namespace

TEST_CASE("learning-rate schedule: warmup then inverse square root") {
    OptimConfig cfg = OptimConfig::pretrain_defaults();
    cfg.peak_lr = 2e-3;
    cfg.warmup_steps = 100;
    CHECK(lr_at(cfg, 1) == doctest::Approx(2e-5).epsilon(1e-12));
    CHECK(lr_at(cfg, 50) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(cfg, 100) == doctest::Approx(2e-3).epsilon(1e-12));
    CHECK(lr_at(cfg, 400) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK_THROWS_AS((void)lr_at(cfg, 0), InvalidInput);
}

TEST_CASE("pretrain with steps=0 checkpoints the initialization") {
    PretrainFixture fx("/tmp/duet_tr_init");
    const std::string out = "/tmp/duet_tr_init_ckpt";
    fs::remove_all(out);

    Model fresh(fx.model.config());
    std::ostringstream metrics;
    auto path = pretrain(fresh, fx.corpus.registry, fx.codebook, LossWeights{}, MaskConfig{},
                         default_pretrain_specs(), SamplerConfig{},
                         OptimConfig::pretrain_defaults(), 0, 7, out, &metrics);
    CHECK(metrics.str().empty());

    auto ck = load_checkpoint(path, fresh.config());
    CHECK(ck.step == 0);
    Model expected(fresh.config());
    expected.init_params(7);
    expected.params().quantize_f32();
    for (const Param* p : expected.params().all()) {
        REQUIRE(ck.blobs.at(p->name).v == p->value.v);
    }
    fs::remove_all(out);
}

TEST_CASE("identical seeds give byte-identical metrics logs") {
    PretrainFixture fx("/tmp/duet_tr_det");
    auto run = [&]() {
        Model m(fx.model.config());
        m.init_params(11);
        TrainerSetup setup;
        setup.objective = ObjectiveKind::Pretrain;
        setup.specs = default_pretrain_specs();
        setup.optim = OptimConfig::pretrain_defaults();
        setup.seed = 11;
        Trainer t(m, fx.corpus.registry, &fx.codebook, m.snapshot_subsampler(), setup);
        std::ostringstream metrics;
        t.run(4, "", &metrics);
        return metrics.str();
    };
    auto log1 = run();
    auto log2 = run();
    CHECK(!log1.empty());
    CHECK(log1 == log2);
}

TEST_CASE("checkpoint save/load resumes bit-identically") {
    PretrainFixture fx("/tmp/duet_tr_resume");
    const std::string out = "/tmp/duet_tr_resume_ckpt";
    fs::remove_all(out);
    fs::create_directories(out);

    Model m1(fx.model.config());
    m1.init_params(13);
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Pretrain;
    setup.specs = default_pretrain_specs();
    setup.optim = OptimConfig::pretrain_defaults();
    setup.seed = 13;
    Trainer a(m1, fx.corpus.registry, &fx.codebook, m1.snapshot_subsampler(), setup);
    for (int i = 0; i < 3; ++i) (void)a.step_once();
    a.save(out + "/mid.mu2k");
    auto rep_a = a.step_once();  // straight-through step 4

    Model m2(fx.model.config());
    Trainer b(m2, fx.corpus.registry, &fx.codebook, m1.snapshot_subsampler(), setup);
    b.resume(out + "/mid.mu2k");
    CHECK(b.step() == 3);
    auto rep_b = b.step_once();  // resumed step 4

    CHECK(rep_a.total == rep_b.total);
    for (size_t i = 0; i < m1.params().all().size(); ++i) {
        REQUIRE(m1.params().all()[i]->value.v == m2.params().all()[i]->value.v);
    }
    fs::remove_all(out);
}

TEST_CASE("a short pre-training run reduces the loss") {
    PretrainFixture fx("/tmp/duet_tr_learn");
    Model m(fx.model.config());
    m.init_params(17);
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Pretrain;
    setup.specs = default_pretrain_specs();
    setup.optim = OptimConfig::pretrain_defaults();
    setup.optim.warmup_steps = 20;
    setup.seed = 17;
    Trainer t(m, fx.corpus.registry, &fx.codebook, m.snapshot_subsampler(), setup);
    double first = 0.0, last = 0.0;
    const int steps = 60;
    for (int i = 0; i < steps; ++i) {
        auto rep = t.step_once();
        if (i < 10) first += rep.total;
        if (i >= steps - 10) last += rep.total;
    }
    CHECK(last < first);
}

TEST_CASE("numerical errors carry the offending step index") {
    PretrainFixture fx("/tmp/duet_tr_nan");
    Model m(fx.model.config());
    m.init_params(19);
    m.params().get("enc.l0.attn.wq").value.at(0, 0) = std::nan("");
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Pretrain;
    setup.specs = default_pretrain_specs();
    setup.optim = OptimConfig::pretrain_defaults();
    setup.seed = 19;
    Trainer t(m, fx.corpus.registry, &fx.codebook, m.snapshot_subsampler(), setup);
    bool threw = false;
    try {
        (void)t.step_once();
    } catch (const NumericalError& e) {
        threw = true;
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("direct fine-tuning: no CTC gradients, zero MLM terms, loss falls") {
    PretrainFixture fx("/tmp/duet_tr_ft");
    Model m(fx.model.config());
    m.init_params(23);

    FinetuneConfig ft;
    ft.task = Stream::Ast;
    ft.batch_size = 4;
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Seq2Seq;
    setup.specs = finetune_single_task_specs(ft.task, ft.batch_size);
    setup.optim = OptimConfig::finetune_defaults();
    setup.optim.warmup_steps = 10;
    setup.seed = 23;
    Trainer t(m, fx.corpus.registry, nullptr, std::nullopt, setup);

    double first = 0.0, last = 0.0;
    for (int i = 0; i < 40; ++i) {
        auto rep = t.step_once();
        // seq2seq only: the CTC head never receives gradient
        for (const char* name : {"enc.ctc.w", "enc.ctc.b", "enc.mlm.w", "enc.mlm.b"}) {
            const Param& p = m.params().get(name);
            for (double g : p.grad.v) REQUIRE(g == 0.0);
        }
        CHECK(rep.find("enc_mlm")->value == 0.0);
        CHECK(rep.find("align_enc")->value == 0.0);
        if (i < 5) first += rep.total;
        if (i >= 35) last += rep.total;
    }
    CHECK(last < first);
}

TEST_CASE("noisy fine-tuning at ratio 0 matches the no-noise trajectory") {
    PretrainFixture fx("/tmp/duet_tr_noise");
    auto run = [&](bool noisy, double ratio) {
        Model m(fx.model.config());
        m.init_params(29);
        FinetuneConfig ft;
        ft.task = Stream::Ast;
        ft.batch_size = 2;
        ft.steps = 5;
        ft.noisy = noisy;
        ft.noise_ratio = ratio;
        std::ostringstream metrics;
        finetune_direct(m, fx.corpus.registry, ft, OptimConfig::finetune_defaults(), 29, "",
                        &metrics);
        return metrics.str();
    };
    CHECK(run(false, 0.0) == run(true, 0.0));
    CHECK(run(false, 0.0) != run(true, 1.0));
}

TEST_CASE("gradual fine-tuning: stage 1 logs stay mask-free, stages chain") {
    PretrainFixture fx("/tmp/duet_tr_grad");
    Model m(fx.model.config());
    m.init_params(31);
    const std::string out = "/tmp/duet_tr_grad_ckpt";
    fs::remove_all(out);

    FinetuneConfig ft;
    ft.regime = FinetuneConfig::Regime::Gradual;
    ft.task = Stream::Ast;
    ft.batch_size = 2;
    ft.stage1_steps = 4;
    ft.steps = 3;
    std::ostringstream metrics;
    auto final_path = finetune_gradual(m, fx.corpus.registry, ft,
                                       OptimConfig::finetune_defaults(), 31, out, &metrics);
    // stage-1 lines carry the multi-task mix and zero mask terms
    std::istringstream lines(metrics.str());
    std::string line;
    int n_lines = 0;
    while (std::getline(lines, line)) {
        n_lines++;
        CHECK(line.find("\"enc_mlm\":{\"count\":0") != std::string::npos);
        CHECK(line.find("\"align_enc\":{\"count\":0") != std::string::npos);
    }
    CHECK(n_lines == 7);

    auto ck = load_checkpoint(final_path, m.config());
    CHECK(ck.step == 3);  // stage-2 counter
    CHECK(fs::exists(out + "/stage1/final.mu2k"));
    fs::remove_all(out);
}

TEST_CASE("gradual stage boundary carries parameters unchanged") {
    PretrainFixture fx("/tmp/duet_tr_grad0");
    Model m(fx.model.config());
    m.init_params(41);
    const std::string out = "/tmp/duet_tr_grad0_ckpt";
    fs::remove_all(out);

    FinetuneConfig ft;
    ft.regime = FinetuneConfig::Regime::Gradual;
    ft.task = Stream::Ast;
    ft.batch_size = 2;
    ft.stage1_steps = 4;
    ft.steps = 0;  // stage 2 runs no updates
    auto final_path = finetune_gradual(m, fx.corpus.registry, ft,
                                       OptimConfig::finetune_defaults(), 41, out, nullptr);
    auto stage2 = load_checkpoint(final_path, m.config());
    auto stage1 = load_checkpoint(out + "/stage1/final.mu2k", m.config());
    for (const Param* p : m.params().all()) {
        REQUIRE(stage2.blobs.at(p->name).v == stage1.blobs.at(p->name).v);
    }
    fs::remove_all(out);
}

TEST_CASE("the codebook is frozen across a training run") {
    PretrainFixture fx("/tmp/duet_tr_frozen");
    const uint64_t before = codebook_checksum(fx.codebook);
    Model m(fx.model.config());
    m.init_params(37);
    TrainerSetup setup;
    setup.objective = ObjectiveKind::Pretrain;
    setup.specs = default_pretrain_specs();
    setup.optim = OptimConfig::pretrain_defaults();
    setup.seed = 37;
    Trainer t(m, fx.corpus.registry, &fx.codebook, m.snapshot_subsampler(), setup);
    for (int i = 0; i < 5; ++i) (void)t.step_once();
    CHECK(codebook_checksum(fx.codebook) == before);
}

TEST_CASE("fit_codebook_from_registry is deterministic and sized right") {
    PretrainFixture fx("/tmp/duet_tr_cb");
    auto frozen = fx.model.snapshot_subsampler();
    auto a = fit_codebook_from_registry(fx.corpus.registry, frozen, 8, 5, 3);
    auto b = fit_codebook_from_registry(fx.corpus.registry, frozen, 8, 5, 3);
    CHECK(a.size() == 8);
    CHECK(a.dim() == fx.model.config().d_model);
    CHECK(codebook_checksum(a) == codebook_checksum(b));
}
