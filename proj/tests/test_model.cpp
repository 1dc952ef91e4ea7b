#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/common.hpp"
#include "duet/model.hpp"
#include "duet/rng.hpp"

#include "fd_check.hpp"

#include <cmath>
#include <filesystem>

using namespace duet;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_dim = 16;
    cfg.conv_kernel = 5;
    cfg.subsample_channels = 2;
    cfg.text_vocab_size = 11;
    cfg.speech_codebook_size = 7;
    cfg.n_languages = 2;
    cfg.dropout = 0.0;
    cfg.enc_dropout = 0.0;
    return cfg;
}

Tensor random_features(int t_len, Rng& rng) {
    Tensor f(t_len, 80);
    for (auto& x : f.v) x = rng.uniform() * 2.0 - 1.0;
    return f;
}

}  // namespace

TEST_CASE("subsampling reduces the sequence length 4x with ceil semantics") {
    CHECK(Model::subsampled_len(100) == 25);
    CHECK(Model::subsampled_len(1) == 1);
    CHECK(Model::subsampled_len(7) == 2);

    Model model(micro_config());
    model.init_params(3);
    Rng rng(5);
    for (int t_len : {100, 1, 7}) {
        auto feats = random_features(t_len, rng);
        Tape tape;
        Rng drop(0);
        Model::Ctx ctx{tape, drop, false, {}};
        Var latents = model.subsample(ctx, feats);
        CHECK(latents.val().rows() == Model::subsampled_len(t_len));
        CHECK(latents.val().cols() == 8);
    }
    // frozen snapshot produces the identical latents
    auto frozen = model.snapshot_subsampler();
    auto feats = random_features(13, rng);
    Tape tape;
    Rng drop(0);
    Model::Ctx ctx{tape, drop, false, {}};
    Var live = model.subsample(ctx, feats);
    Tensor cold = frozen.run(feats);
    REQUIRE(cold.shape == live.val().shape);
    for (size_t i = 0; i < cold.size(); ++i) CHECK(cold.v[i] == live.val().v[i]);
}

TEST_CASE("language embeddings shift token embeddings by a constant row") {
    Model model(micro_config());
    model.init_params(11);
    std::vector<int> ids = {5, 6, 7, 8};
    Tape tape;
    Rng drop(0);
    Model::Ctx ctx{tape, drop, false, {}};
    Var a = model.embed_tokens(ctx, ids, 0, Modality::Text);
    Var b = model.embed_tokens(ctx, ids, 1, Modality::Text);
    Tensor diff(1, 8);
    for (int j = 0; j < 8; ++j) diff.v[size_t(j)] = b.val().at(0, j) - a.val().at(0, j);
    for (int i = 1; i < 4; ++i) {
        for (int j = 0; j < 8; ++j) {
            CHECK(b.val().at(i, j) - a.val().at(i, j) ==
                  doctest::Approx(diff.v[size_t(j)]).epsilon(1e-12));
        }
    }
    // modality changes the embedding path too
    Var c = model.embed_tokens(ctx, ids, 0, Modality::Speech);
    bool any_diff = false;
    for (size_t i = 0; i < c.val().size(); ++i) {
        if (c.val().v[i] != a.val().v[i]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("embed rejects bad inputs") {
    Model model(micro_config());
    model.init_params(1);
    Tape tape;
    Rng drop(0);
    Model::Ctx ctx{tape, drop, false, {}};
    CHECK_THROWS_AS((void)model.embed_tokens(ctx, {}, 0, Modality::Text), InvalidInput);
    CHECK_THROWS_AS((void)model.embed_tokens(ctx, {5}, 9, Modality::Text), InvalidInput);
    CHECK_THROWS_AS((void)model.embed_tokens(ctx, {999}, 0, Modality::Text), InvalidInput);
}

TEST_CASE("encoder output shape and pad isolation") {
    Model model(micro_config());
    model.init_params(7);
    Rng rng(13);

    Tensor content(10, 8);
    for (auto& x : content.v) x = rng.uniform() - 0.5;
    const int valid = 7;

    auto run = [&](double pad_fill_a, double pad_fill_b) {
        Tensor padded = content;
        for (int i = valid; i < 10; ++i) {
            for (int j = 0; j < 8; ++j) {
                padded.at(i, j) = (i % 2 == 0) ? pad_fill_a : pad_fill_b;
            }
        }
        Tape tape;
        Rng drop(0);
        Model::Ctx ctx{tape, drop, false, {}};
        Var x = model.embed_speech(ctx, tape.input(padded, false), 0);
        Var h = model.encode(ctx, x, valid);
        return h.val();
    };

    Tensor h1 = run(0.0, 0.0);
    CHECK(h1.rows() == 10);
    CHECK(h1.cols() == 8);
    Tensor h2 = run(17.0, -3.5);
    for (int i = 0; i < valid; ++i) {
        for (int j = 0; j < 8; ++j) {
            CHECK(h1.at(i, j) == doctest::Approx(h2.at(i, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("decoder causality: changing token j leaves earlier rows unchanged") {
    Model model(micro_config());
    model.init_params(19);
    Rng rng(3);
    Tensor feats = random_features(9, rng);

    auto logits_for = [&](const std::vector<int>& prefix) {
        Tape tape;
        Rng drop(0);
        Model::Ctx ctx{tape, drop, false, {}};
        Var lat = model.subsample(ctx, feats);
        Var enc = model.encode(ctx, model.embed_speech(ctx, lat, 0), lat.val().rows());
        Var lg =
            model.decode_logits(ctx, prefix, 0, Modality::Text, enc, lat.val().rows());
        return lg.val();
    };

    std::vector<int> prefix = {BOS, 5, 6, 7, 8};
    Tensor base = logits_for(prefix);
    CHECK(base.rows() == 5);
    CHECK(base.cols() == 5 + 11 + 7);
    for (int j = 1; j < 5; ++j) {
        auto changed = prefix;
        changed[size_t(j)] = 9;
        Tensor out = logits_for(changed);
        for (int i = 0; i < j; ++i) {
            for (int c = 0; c < base.cols(); ++c) {
                REQUIRE(out.at(i, c) == doctest::Approx(base.at(i, c)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("all heads produce normalized log-softmax rows") {
    Model model(micro_config());
    model.init_params(23);
    Rng rng(29);
    Tensor feats = random_features(11, rng);

    Tape tape;
    Rng drop(0);
    Model::Ctx ctx{tape, drop, false, {}};
    Var lat = model.subsample(ctx, feats);
    const int n = lat.val().rows();
    Var enc = model.encode(ctx, model.embed_speech(ctx, lat, 1), n);

    Var mlm = model.encoder_mlm_logits(ctx, enc);
    Var ctc = model.ctc_head_logits(ctx, enc);
    Var dec = model.decode_logits(ctx, {BOS, 5, 6}, 0, Modality::Text, enc, n);
    CHECK(mlm.val().rows() == n);
    CHECK(mlm.val().cols() == 5 + 11 + 7);
    CHECK(ctc.val().cols() == 5 + 11 + 1);

    for (Var head : {mlm, ctc, dec}) {
        Var lsm = tape.log_softmax_rows(head);
        for (int i = 0; i < lsm.val().rows(); ++i) {
            double sum_exp = 0.0;
            for (int j = 0; j < lsm.val().cols(); ++j) sum_exp += std::exp(lsm.val().at(i, j));
            CHECK(std::fabs(std::log(sum_exp)) < 1e-6);
        }
    }
}

TEST_CASE("encoder gradients match finite differences on sampled parameters") {
    Model model(micro_config());
    model.init_params(31);
    Rng rng(37);
    Tensor feats = random_features(10, rng);

    auto forward_loss = [&](Model::Ctx& ctx) {
        Var lat = model.subsample(ctx, feats);
        Var enc = model.encode(ctx, model.embed_speech(ctx, lat, 0), lat.val().rows());
        // nonlinear reduction so every output entry matters
        return ctx.tape.sum_all(ctx.tape.swish(enc));
    };

    Tape tape;
    Rng drop(0);
    Model::Ctx ctx{tape, drop, false, {}};
    Var loss = forward_loss(ctx);
    tape.backward(loss);

    auto fd_forward = [&]() {
        Tape t2;
        Rng d2(0);
        Model::Ctx c2{t2, d2, false, {}};
        return forward_loss(c2).val().v[0];
    };

    Rng pick(101);
    int failed = 0, checked = 0;
    for (const char* name :
         {"enc.sub.conv1.w", "enc.sub.proj.w", "enc.emb.lang", "enc.l0.ffn1.w1",
          "enc.l0.attn.wq", "enc.l0.attn.wo", "enc.l0.conv.dw.w", "enc.l0.conv.pw1.w",
          "enc.l0.ffn2.w2", "enc.l0.out_ln.g"}) {
        Param& p = model.params().get(name);
        auto it = ctx.cache.find(&p);
        REQUIRE(it != ctx.cache.end());
        std::vector<size_t> idx;
        for (int k = 0; k < 6; ++k) idx.push_back(pick.uniform_int(p.value.size()));
        auto rep = duet::testing::check_gradient(fd_forward, p.value, tape.grad(it->second),
                                                 idx, 1e-4, 1e-3, 1e-6, true);
        failed += rep.failed;
        checked += rep.checked;
    }
    CHECK(checked == 60);
    CHECK(failed == 0);
}

TEST_CASE("fixed seed gives bit-identical init and forward") {
    Model a(micro_config()), b(micro_config());
    a.init_params(5);
    b.init_params(5);
    for (size_t i = 0; i < a.params().all().size(); ++i) {
        REQUIRE(a.params().all()[i]->value.v == b.params().all()[i]->value.v);
    }
    Model c(micro_config());
    c.init_params(6);
    bool differ = false;
    for (size_t i = 0; i < a.params().all().size(); ++i) {
        if (a.params().all()[i]->value.v != c.params().all()[i]->value.v) differ = true;
    }
    CHECK(differ);
}

TEST_CASE("theta_e / theta_d partition covers every parameter exactly once") {
    Model model(micro_config());
    size_t enc = model.params().count_scalars(true);
    size_t dec = model.params().count_scalars(false);
    CHECK(enc + dec == model.params().count_scalars());
    CHECK(enc > 0);
    CHECK(dec > 0);
    // embeddings are tied nowhere: encoder and decoder have separate tables
    CHECK(model.params().get("enc.emb.token").encoder_side);
    CHECK(!model.params().get("dec.emb.token").encoder_side);
}

TEST_CASE("checkpoint round trip is exact and digest-checked") {
    auto cfg = micro_config();
    Model model(cfg);
    model.init_params(77);
    model.params().quantize_f32();

    std::map<std::string, Tensor> extra;
    extra["tok.enc.sub.conv1.w"] = model.params().get("enc.sub.conv1.w").value;
    const std::string path = "/tmp/duet_test_ckpt.mu2k";
    save_checkpoint(path, cfg, model.params(), 42, extra);

    auto ck = load_checkpoint(path, cfg);
    CHECK(ck.step == 42);
    CHECK(ck.blobs.count("tok.enc.sub.conv1.w") == 1);

    Model other(cfg);
    assign_params(other.params(), ck.blobs);
    for (size_t i = 0; i < model.params().all().size(); ++i) {
        REQUIRE(model.params().all()[i]->value.v == other.params().all()[i]->value.v);
    }

    auto wrong = cfg;
    wrong.d_model = 16;
    wrong.n_heads = 4;
    CHECK_THROWS_AS((void)load_checkpoint(path, wrong), InvalidInput);
    std::filesystem::remove(path);
}

TEST_CASE("decode_hidden validates the prefix") {
    auto cfg = micro_config();
    cfg.max_target_len = 4;
    Model model(cfg);
    model.init_params(1);
    Tape tape;
    Rng drop(0);
    Model::Ctx ctx{tape, drop, false, {}};
    Tensor latents(3, 8);
    Var enc = model.encode(ctx, model.embed_speech(ctx, tape.input(latents, false), 0), 3);
    CHECK_THROWS_AS((void)model.decode_hidden(ctx, {5, 6}, 0, Modality::Text, enc, 3),
                    InvalidInput);
    CHECK_THROWS_AS(
        (void)model.decode_hidden(ctx, {BOS, 5, 6, 7, 8}, 0, Modality::Text, enc, 3),
        InvalidInput);
    CHECK_NOTHROW((void)model.decode_hidden(ctx, {BOS, 5, 6}, 0, Modality::Text, enc, 3));
}
