#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/common.hpp"
#include "duet/data.hpp"
#include "duet/frontend.hpp"

#include <cmath>
#include <filesystem>
#include <map>

using namespace duet;

namespace {

TrainItem text_item(Stream s, int lang, std::vector<int> ids) {
    TrainItem item;
    item.stream = s;
    item.src_lang = item.tgt_lang = lang;
    item.src_text = std::move(ids);
    return item;
}

// registry with `counts[l]` text-only items per language plus one item in
// every other stream so any spec can be enabled
DatasetRegistry synthetic_registry(const std::vector<int>& text_counts) {
    DatasetRegistry reg;
    for (size_t lang = 0; lang < text_counts.size(); ++lang) {
        for (int i = 0; i < text_counts[lang]; ++i) {
            reg.add(text_item(Stream::TextOnly, int(lang), {5, 6, 7}));
        }
    }
    for (int lang = 0; lang < int(text_counts.size()); ++lang) {
        TrainItem speech;
        speech.stream = Stream::SpeechOnly;
        speech.src_lang = speech.tgt_lang = lang;
        speech.features = Tensor(10, 80);
        reg.add(speech);
        TrainItem asr = speech;
        asr.stream = Stream::Asr;
        asr.tgt_text = {5, 6};
        reg.add(asr);
        TrainItem ast = asr;
        ast.stream = Stream::Ast;
        ast.tgt_lang = (lang + 1) % int(text_counts.size());
        reg.add(ast);
        TrainItem mt = text_item(Stream::Mt, lang, {5, 6});
        mt.tgt_lang = (lang + 1) % int(text_counts.size());
        mt.tgt_text = {7, 8};
        reg.add(mt);
    }
    return reg;
}

}  // namespace

TEST_CASE("language_distribution basic laws") {
    auto uni = language_distribution({10, 10, 10, 10}, 3.0);
    for (double p : uni) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));

    // huge temperature flattens even a 100:1 imbalance
    auto flat = language_distribution({100, 1}, 1e6);
    CHECK(std::fabs(flat[0] - 0.5) < 1e-4);
    CHECK(std::fabs(flat[1] - 0.5) < 1e-4);

    // arithmetic oracle for counts {90, 10}, T = 3
    auto p = language_distribution({90, 10}, 3.0);
    double a = std::pow(0.9, 1.0 / 3.0), b = std::pow(0.1, 1.0 / 3.0);
    CHECK(p[0] == doctest::Approx(a / (a + b)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(b / (a + b)).epsilon(1e-12));
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[0] > p[1]);  // monotone in counts

    CHECK_THROWS_AS((void)language_distribution({0, 5}, 3.0), InvalidInput);
    CHECK_THROWS_AS((void)language_distribution({5}, 0.0), InvalidInput);
}

TEST_CASE("default pre-train batches mix 4/8/1/1/1") {
    auto reg = synthetic_registry({4, 4});
    BatchSampler sampler(reg, default_pretrain_specs(), SamplerConfig{}, 7);
    for (uint64_t step = 0; step < 50; ++step) {
        auto batch = sampler.next_batch(step);
        REQUIRE(batch.size() == 15);
        std::map<Stream, int> counts;
        for (const auto& item : batch) counts[item.stream]++;
        CHECK(counts[Stream::SpeechOnly] == 4);
        CHECK(counts[Stream::TextOnly] == 8);
        CHECK(counts[Stream::Ast] == 1);
        CHECK(counts[Stream::Asr] == 1);
        CHECK(counts[Stream::Mt] == 1);
    }
}

TEST_CASE("single-stream batches and empty-stream validation") {
    auto reg = synthetic_registry({2, 2});
    auto batch = BatchSampler(reg, finetune_single_task_specs(Stream::Asr, 2),
                              SamplerConfig{}, 3)
                     .next_batch(0);
    CHECK(batch.size() == 2);
    for (const auto& item : batch) CHECK(item.stream == Stream::Asr);

    DatasetRegistry empty;
    empty.add(text_item(Stream::TextOnly, 0, {5}));
    CHECK_THROWS_AS(
        BatchSampler(empty, finetune_single_task_specs(Stream::Asr, 2), SamplerConfig{}, 3),
        InvalidInput);
}

TEST_CASE("finetune multi-task batches mix 4/2/2") {
    auto reg = synthetic_registry({3, 3});
    BatchSampler sampler(reg, finetune_multi_task_specs(), SamplerConfig{}, 11);
    auto batch = sampler.next_batch(0);
    REQUIRE(batch.size() == 8);
    std::map<Stream, int> counts;
    for (const auto& item : batch) counts[item.stream]++;
    CHECK(counts[Stream::Ast] == 4);
    CHECK(counts[Stream::Asr] == 2);
    CHECK(counts[Stream::Mt] == 2);
}

TEST_CASE("text-only language frequencies track the T=3 distribution") {
    auto reg = synthetic_registry({90, 10});
    std::vector<StreamSpec> specs = {{Stream::TextOnly, 1, 0.5, 5}};
    BatchSampler sampler(reg, specs, SamplerConfig{}, 13);
    auto expect = language_distribution({90, 10}, 3.0);
    int counts[2] = {0, 0};
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto batch = sampler.next_batch(uint64_t(i));
        counts[batch[0].src_lang]++;
    }
    CHECK(std::fabs(double(counts[0]) / draws - expect[0]) < 0.02);
    CHECK(std::fabs(double(counts[1]) / draws - expect[1]) < 0.02);
}

TEST_CASE("epoch coverage: every example once before any repeat") {
    DatasetRegistry reg;
    for (int i = 0; i < 8; ++i) {
        auto item = text_item(Stream::TextOnly, 0, {5, 6, 7, 8});
        item.src_text[3] = 5 + i;  // make items distinguishable
        reg.add(item);
    }
    std::vector<StreamSpec> specs = {{Stream::TextOnly, 1, 0.5, 5}};
    BatchSampler sampler(reg, specs, SamplerConfig{}, 17);
    std::map<int, int> seen;
    for (int i = 0; i < 8; ++i) {
        auto batch = sampler.next_batch(uint64_t(i));
        seen[batch[0].id]++;
    }
    CHECK(seen.size() == 8);
    for (auto& [id, n] : seen) CHECK(n == 1);
    // second epoch repeats the set (in a new order)
    for (int i = 8; i < 16; ++i) {
        auto batch = sampler.next_batch(uint64_t(i));
        seen[batch[0].id]++;
    }
    for (auto& [id, n] : seen) CHECK(n == 2);
}

TEST_CASE("sampler state round trip resumes the exact sequence") {
    auto reg = synthetic_registry({5, 3});
    auto specs = default_pretrain_specs();
    BatchSampler a(reg, specs, SamplerConfig{}, 19);
    for (int i = 0; i < 7; ++i) (void)a.next_batch(uint64_t(i));
    auto state = a.state();

    BatchSampler b(reg, specs, SamplerConfig{}, 19);
    b.restore(state);
    for (int i = 7; i < 12; ++i) {
        auto ba = a.next_batch(uint64_t(i));
        auto bb = b.next_batch(uint64_t(i));
        REQUIRE(ba.size() == bb.size());
        for (size_t k = 0; k < ba.size(); ++k) CHECK(ba[k].id == bb[k].id);
    }
}

TEST_CASE("registry loads a generated corpus manifest") {
    const std::string dir = "/tmp/duet_data_corpus";
    std::filesystem::remove_all(dir);
    SyntheticCorpusSpec spec;
    spec.n_languages = 2;
    spec.utterances_per_lang = 6;
    spec.dev_utterances_per_lang = 2;
    spec.seed = 5;
    make_corpus(spec, dir);
    auto vocab = TextVocab::from_file(dir + "/vocab.txt");
    auto reg = DatasetRegistry::load(dir, "manifest_train.jsonl", vocab);
    CHECK(reg.n_languages() == 2);
    CHECK(reg.items(Stream::SpeechOnly).size() == 12);
    CHECK(reg.items(Stream::TextOnly).size() == 12);
    CHECK(reg.items(Stream::Asr).size() == 12);
    CHECK(reg.items(Stream::Ast).size() == 12);
    CHECK(reg.items(Stream::Mt).size() == 12);
    // features came from the cache and are 80-dim
    const auto& asr = reg.items(Stream::Asr)[0];
    CHECK(asr.features.cols() == 80);
    CHECK(asr.features.rows() >= 1);
    CHECK(!asr.tgt_text.empty());
    // ASR transcript ids decode back to characters of our alphabet
    for (int id : asr.tgt_text) CHECK(id >= NUM_RESERVED);

    auto dev = DatasetRegistry::load(dir, "manifest_dev.jsonl", vocab);
    CHECK(dev.items(Stream::Asr).size() == 4);
    CHECK(dev.items(Stream::SpeechOnly).empty());
    std::filesystem::remove_all(dir);
}

TEST_CASE("registry filters over-length examples") {
    DatasetRegistry reg;  // direct add path is unfiltered; loader path filters
    const std::string dir = "/tmp/duet_data_filter";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    {
        std::ofstream mf(dir + "/manifest_train.jsonl");
        mf << R"({"lang":0,"stream":"text_only","text":"abcabc"})" << "\n";
        mf << R"({"lang":0,"stream":"text_only","text":"abcabcabc"})" << "\n";
    }
    auto vocab = TextVocab::from_chars("abc");
    auto loaded = DatasetRegistry::load(dir, "manifest_train.jsonl", vocab, 512, 8);
    CHECK(loaded.items(Stream::TextOnly).size() == 1);
    std::filesystem::remove_all(dir);
}
