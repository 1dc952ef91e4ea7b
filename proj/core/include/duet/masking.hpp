#pragma once

#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/tokenization.hpp"

#include <cstdint>
#include <vector>

namespace duet {

// 0/1 mask over sequence positions. bits[i] == 1 means "masked".
struct MaskVector {
    std::vector<uint8_t> bits;

    int size() const { return int(bits.size()); }
    int count_ones() const {
        int n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
    double fraction() const { return bits.empty() ? 0.0 : double(count_ones()) / size(); }
    MaskVector complement() const {
        MaskVector c;
        c.bits.reserve(bits.size());
        for (uint8_t b : bits) c.bits.push_back(b ? 0 : 1);
        return c;
    }
};

// Places uniform-length spans (1..max_span) at uniform starts, overlaps
// allowed, until the masked fraction reaches ratio. ratio 0 -> all zeros,
// ratio 1 -> all ones. The result can overshoot but never undershoot ratio.
MaskVector sample_span_mask(int len, double ratio, int max_span, Rng& rng);

// BERT-style corruption at masked positions: MASK 80% of the time, a uniform
// random non-reserved token 10%, unchanged 10%. Unmasked positions pass through.
std::vector<int> corrupt_text(const std::vector<int>& tokens, const MaskVector& m,
                              const TextVocab& vocab, Rng& rng);
std::vector<int> corrupt_text(const std::vector<int>& tokens, const MaskVector& m,
                              int n_symbols, Rng& rng);

// Masked rows replaced by the mask embedding row (1 x d); others unchanged.
Tensor corrupt_speech(const Tensor& latents, const MaskVector& m, const Tensor& mask_emb);

// The complementary-masked stream x^{~m}: token kept where m_i = 1 (the
// decoder must reconstruct exactly those), MASK everywhere else.
std::vector<int> complement_stream(const std::vector<int>& tokens, const MaskVector& m);

// One mask drawn over the concatenation [x, y]; boundary records where y
// starts so the two decoder streams of the alignment loss can be scored
// separately.
struct ConcatMask {
    MaskVector mask;
    int boundary = 0;

    MaskVector x_part() const {
        MaskVector p;
        p.bits.assign(mask.bits.begin(), mask.bits.begin() + boundary);
        return p;
    }
    MaskVector y_part() const {
        MaskVector p;
        p.bits.assign(mask.bits.begin() + boundary, mask.bits.end());
        return p;
    }
};

ConcatMask build_concat_pair(int len_x, int len_y, double ratio, int max_span, Rng& rng);

}  // namespace duet
