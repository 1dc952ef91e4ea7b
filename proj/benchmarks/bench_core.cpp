#include "duet/frontend.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"
#include "duet/tape.hpp"
#include "duet/tokenization.hpp"

#include <benchmark/benchmark.h>

using namespace duet;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = rng.uniform() * 2.0 - 1.0;
    return t;
}

ModelConfig desk_config() {
    ModelConfig cfg;
    cfg.text_vocab_size = 12;
    cfg.speech_codebook_size = 64;
    cfg.n_languages = 2;
    cfg.dropout = 0.0;
    return cfg;
}

void bm_matmul(benchmark::State& state) {
    const int n = int(state.range(0));
    Tensor a = random_tensor({n, 64}, 1), b = random_tensor({64, 64}, 2), c;
    for (auto _ : state) {
        matmul(a, b, c);
        benchmark::DoNotOptimize(c.v.data());
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * 2 * n * 64 * 64);
}
BENCHMARK(bm_matmul)->Arg(16)->Arg(64)->Arg(256);

void bm_log_mel(benchmark::State& state) {
    Waveform w;
    w.samples.assign(16000, 0.0);
    Rng rng(3);
    for (auto& x : w.samples) x = rng.uniform() * 0.2 - 0.1;
    for (auto _ : state) {
        auto feats = compute_log_mel(w);
        benchmark::DoNotOptimize(feats.frames.v.data());
    }
}
BENCHMARK(bm_log_mel);

void bm_quantize_utterance(benchmark::State& state) {
    Codebook cb;
    cb.entries = random_tensor({64, 64}, 4);
    Tensor latents = random_tensor({32, 64}, 5);
    for (auto _ : state) {
        auto ids = quantize_utterance(latents, cb);
        benchmark::DoNotOptimize(ids.data());
    }
    state.SetItemsProcessed(int64_t(state.iterations()) * 32);
}
BENCHMARK(bm_quantize_utterance);

void bm_encoder_forward(benchmark::State& state) {
    Model model(desk_config());
    model.init_params(6);
    Tensor feats = random_tensor({int(state.range(0)), 80}, 7);
    for (auto _ : state) {
        Tape tape;
        Rng rng(0);
        Model::Ctx ctx{tape, rng, false, {}};
        Var lat = model.subsample(ctx, feats);
        Var enc = model.encode(ctx, model.embed_speech(ctx, lat, 0), lat.val().rows());
        benchmark::DoNotOptimize(enc.val().v.data());
    }
}
BENCHMARK(bm_encoder_forward)->Arg(32)->Arg(128);

void bm_denoise_step_backward(benchmark::State& state) {
    Model model(desk_config());
    model.init_params(8);
    Codebook cb;
    cb.entries = random_tensor({64, 64}, 9);
    auto frozen = model.snapshot_subsampler();
    Tensor feats = random_tensor({48, 80}, 10);
    std::vector<int> z = quantize_utterance(frozen.run(feats), cb);
    for (auto _ : state) {
        Tape tape;
        Rng drop(0);
        Model::Ctx ctx{tape, drop, false, {}};
        Rng mask_rng(11);
        auto pieces = loss_u_speech(model, ctx, feats, 0, z, 0.5, 10, 1.0, mask_rng, "u");
        BatchLoss acc;
        acc.add(pieces);
        Var total = acc.total(tape);
        tape.backward(total);
        benchmark::DoNotOptimize(total.val().v[0]);
    }
}
BENCHMARK(bm_denoise_step_backward);

void bm_ctc_forward(benchmark::State& state) {
    Tensor logits = random_tensor({int(state.range(0)), 18}, 12);
    std::vector<int> labels = {5, 6, 7, 8, 9, 10};
    for (auto _ : state) {
        Tape tape;
        Var lv = tape.input(logits, false);
        Var loss = tape.ctc_loss(lv, labels, 17);
        benchmark::DoNotOptimize(loss.val().v[0]);
    }
}
BENCHMARK(bm_ctc_forward)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
