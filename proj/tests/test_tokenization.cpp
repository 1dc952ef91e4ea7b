#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "duet/common.hpp"
#include "duet/rng.hpp"
#include "duet/tokenization.hpp"

#include "oracles.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace duet;

namespace {

Codebook make_cb(int k, int d, std::vector<double> vals) {
    Codebook cb;
    cb.entries = Tensor(k, d);
    cb.entries.v = std::move(vals);
    return cb;
}

Tensor random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
    Tensor t(r, c);
    for (auto& x : t.v) x = (rng.uniform() * 2.0 - 1.0) * scale;
    return t;
}

}  // namespace

TEST_CASE("quantize picks the nearest prototype") {
    auto cb = make_cb(2, 2, {0.0, 0.0, 1.0, 1.0});
    CHECK(quantize({0.1, 0.2}, cb) == 0);
    CHECK(quantize({0.9, 0.8}, cb) == 1);
}

TEST_CASE("quantize breaks ties toward the lowest index") {
    auto cb = make_cb(2, 2, {0.0, 0.0, 1.0, 0.0});
    CHECK(quantize({0.5, 0.0}, cb) == 0);
    // identical rows: still index 0
    auto cb2 = make_cb(3, 2, {2.0, 2.0, 2.0, 2.0, 2.0, 2.0});
    CHECK(quantize({5.0, -1.0}, cb2) == 0);
}

TEST_CASE("quantize validates its input") {
    auto cb = make_cb(2, 2, {0.0, 0.0, 1.0, 1.0});
    CHECK_THROWS_AS((void)quantize({0.1}, cb), InvalidInput);
    CHECK_THROWS_AS((void)quantize({0.1, std::nan("")}, cb), InvalidInput);
}

TEST_CASE("1000 random vectors match the exhaustive nearest-neighbor oracle") {
    Rng rng(99);
    Codebook cb;
    cb.entries = random_matrix(8, 4, rng);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> s(4);
        for (auto& x : s) x = rng.uniform() * 2.0 - 1.0;
        int got = quantize(s, cb);
        int want = duet::testing::nearest_row_bruteforce(cb.entries, s.data());
        REQUIRE(got == want);
    }
}

TEST_CASE("quantize_utterance applies quantize element-wise") {
    Rng rng(123);
    Codebook cb;
    cb.entries = random_matrix(8, 4, rng);

    Tensor one(1, 4);
    for (auto& x : one.v) x = rng.uniform();
    CHECK(quantize_utterance(one, cb).size() == 1);

    // rows equal to codebook rows come back as their own indices
    auto ids = quantize_utterance(cb.entries, cb);
    for (int i = 0; i < 8; ++i) CHECK(ids[size_t(i)] == i);

    Tensor seq = random_matrix(16, 4, rng);
    auto got = quantize_utterance(seq, cb);
    for (int i = 0; i < 16; ++i) {
        CHECK(got[size_t(i)] ==
              duet::testing::nearest_row_bruteforce(cb.entries, seq.row_ptr(i)));
    }
}

TEST_CASE("fit_codebook recovers two tight clusters") {
    Rng rng(5);
    Tensor data(40, 2);
    for (int i = 0; i < 40; ++i) {
        double cx = i < 20 ? 0.0 : 10.0;
        data.at(i, 0) = cx + rng.uniform() * 0.4 - 0.2;
        data.at(i, 1) = cx + rng.uniform() * 0.4 - 0.2;
    }
    auto cb = fit_codebook(data, 2, 10, 1);
    // centroids land within 0.5 of the true cluster means, in some order
    auto near = [&](double cx) {
        for (int i = 0; i < 2; ++i) {
            if (std::fabs(cb.entries.at(i, 0) - cx) < 0.5 &&
                std::fabs(cb.entries.at(i, 1) - cx) < 0.5) {
                return true;
            }
        }
        return false;
    };
    CHECK(near(0.0));
    CHECK(near(10.0));
}

TEST_CASE("fit_codebook with zero iterations returns the k-means++ seeds") {
    Rng rng(17);
    Tensor data = random_matrix(50, 3, rng);
    auto init = fit_codebook(data, 4, 0, 42);
    // every seed must be one of the input rows
    for (int c = 0; c < 4; ++c) {
        bool found = false;
        for (int i = 0; i < 50 && !found; ++i) {
            bool eq = true;
            for (int j = 0; j < 3; ++j) {
                if (data.at(i, j) != init.entries.at(c, j)) eq = false;
            }
            found = eq;
        }
        CHECK(found);
    }
}

TEST_CASE("fit_codebook is deterministic and error is non-increasing") {
    Rng rng(31);
    Tensor data = random_matrix(200, 4, rng);
    auto a = fit_codebook(data, 8, 15, 7);
    auto b = fit_codebook(data, 8, 15, 7);
    CHECK(a.entries.v == b.entries.v);
    CHECK(codebook_checksum(a) == codebook_checksum(b));

    double prev = std::numeric_limits<double>::infinity();
    for (int iters : {0, 1, 2, 4, 8, 15}) {
        auto cb = fit_codebook(data, 8, iters, 7);
        double err = quantization_error(data, cb);
        CHECK(err <= prev + 1e-12);
        prev = err;
    }
}

TEST_CASE("fit_codebook rejects inputs with too few distinct rows") {
    Tensor data(5, 2);
    for (int i = 0; i < 5; ++i) {
        data.at(i, 0) = i < 3 ? 1.0 : 2.0;
        data.at(i, 1) = i < 3 ? 1.0 : 2.0;
    }
    CHECK_THROWS_AS((void)fit_codebook(data, 3, 5, 0), InvalidInput);
    CHECK_NOTHROW((void)fit_codebook(data, 2, 5, 0));
}

TEST_CASE("codebook file round trip") {
    Rng rng(3);
    Codebook cb;
    cb.entries = random_matrix(6, 3, rng);
    const std::string path = "/tmp/duet_test_cb.mu2c";
    write_codebook(path, cb);
    auto back = read_codebook(path);
    CHECK(back.size() == 6);
    CHECK(back.dim() == 3);
    for (size_t i = 0; i < cb.entries.size(); ++i) {
        CHECK(back.entries.v[i] == doctest::Approx(cb.entries.v[i]).epsilon(1e-6));
    }
    std::filesystem::remove(path);
}

TEST_CASE("text encode/decode round trips") {
    auto v = TextVocab::from_chars("ab");
    CHECK(v.encode("").empty());
    CHECK(v.decode({}) == "");
    CHECK(v.encode("ab") == std::vector<int>{5, 6});
    CHECK(v.decode({5, 6}) == "ab");
    // reserved-only sequences decode to the empty string
    CHECK(v.decode({PAD, BOS, EOS, MASK}) == "");
    // unknown characters map to UNK
    CHECK(v.encode("axb") == std::vector<int>{5, UNK, 6});

    auto full = TextVocab::from_chars("abcdefgh");
    Rng rng(12);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string s;
        int len = int(rng.uniform_int(12));
        for (int i = 0; i < len; ++i) s.push_back(char('a' + rng.uniform_int(8)));
        CHECK(full.decode(full.encode(s)) == s);
    }
}

TEST_CASE("word-piece vocab encodes by greedy longest match") {
    const std::string path = "/tmp/duet_test_vocab.txt";
    {
        std::ofstream os(path);
        os << "ab\na\nb\nabc\n";
    }
    auto v = TextVocab::from_file(path);
    CHECK(v.is_wordpiece());
    CHECK(v.num_symbols() == 4);
    // "abc" matches the longest symbol first
    CHECK(v.encode("abc") == std::vector<int>{8});
    CHECK(v.encode("abb") == std::vector<int>{5, 7});
    CHECK(v.decode(v.encode("ababc")) == "ababc");
    std::filesystem::remove(path);
}

TEST_CASE("synonym table: two tokens map to each other") {
    Tensor emb(7, 3);
    // ids 5 and 6 are the only non-reserved tokens
    emb.at(5, 0) = 1.0;
    emb.at(6, 1) = 1.0;
    auto table = build_synonym_table(emb, 5, 2, 0);
    CHECK(table.at(5) == 6);
    CHECK(table.at(6) == 5);
}

TEST_CASE("synonym table: orthonormal embeddings tie-break to lowest id") {
    Tensor emb(9, 4);
    for (int i = 0; i < 4; ++i) emb.at(5 + i, i) = 1.0;
    auto table = build_synonym_table(emb, 5, 4, 0);
    CHECK(table.at(5) == 6);  // lowest admissible (self excluded)
    CHECK(table.at(6) == 5);
    CHECK(table.at(7) == 5);
    CHECK(table.at(8) == 5);
}

TEST_CASE("synonym table matches the exhaustive cosine oracle") {
    Rng rng(2718);
    Tensor emb(NUM_RESERVED + 32, 8);
    for (auto& x : emb.v) x = rng.uniform() * 2.0 - 1.0;
    auto table = build_synonym_table(emb, NUM_RESERVED, 32, 0);
    for (int i = 0; i < 32; ++i) {
        int got = table.at(NUM_RESERVED + i);
        int want = duet::testing::nearest_cosine_bruteforce(emb, NUM_RESERVED + i,
                                                            NUM_RESERVED, 32);
        CHECK(got == want);
        CHECK(got != NUM_RESERVED + i);
    }
}

TEST_CASE("synonym table: zero rows fall back to a seeded non-self pick") {
    Tensor emb(8, 3);
    emb.at(6, 0) = 1.0;
    emb.at(7, 1) = 1.0;
    // id 5 is all zeros
    auto t1 = build_synonym_table(emb, 5, 3, 4);
    auto t2 = build_synonym_table(emb, 5, 3, 4);
    CHECK(t1.at(5) == t2.at(5));
    CHECK(t1.at(5) != 5);
    CHECK(t1.at(5) >= 6);
    CHECK(t1.at(5) <= 7);
}
