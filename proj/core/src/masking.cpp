#include "duet/masking.hpp"

#include "duet/common.hpp"

#include <algorithm>

namespace duet {

MaskVector sample_span_mask(int len, double ratio, int max_span, Rng& rng) {
    if (len < 1) throw InvalidInput("sample_span_mask: len must be >= 1");
    if (ratio < 0.0 || ratio > 1.0) throw InvalidInput("sample_span_mask: ratio out of range");
    if (max_span < 1) throw InvalidInput("sample_span_mask: max_span must be >= 1");
    MaskVector m;
    m.bits.assign(size_t(len), 0);
    if (ratio <= 0.0) return m;
    if (ratio >= 1.0) {
        std::fill(m.bits.begin(), m.bits.end(), 1);
        return m;
    }
    int masked = 0;
    const double target = ratio * double(len);
    while (double(masked) < target) {
        int span = 1 + int(rng.uniform_int(uint64_t(max_span)));
        int start = int(rng.uniform_int(uint64_t(len)));
        int end = std::min(start + span, len);
        for (int i = start; i < end; ++i) {
            if (!m.bits[size_t(i)]) {
                m.bits[size_t(i)] = 1;
                masked++;
            }
        }
    }
    return m;
}

std::vector<int> corrupt_text(const std::vector<int>& tokens, const MaskVector& m,
                              const TextVocab& vocab, Rng& rng) {
    return corrupt_text(tokens, m, vocab.num_symbols(), rng);
}

std::vector<int> corrupt_text(const std::vector<int>& tokens, const MaskVector& m,
                              int n_symbols, Rng& rng) {
    if (int(tokens.size()) != m.size()) {
        throw InvalidInput("corrupt_text: mask/sequence length mismatch");
    }
    std::vector<int> out = tokens;
    for (size_t i = 0; i < out.size(); ++i) {
        if (!m.bits[i]) continue;
        double u = rng.uniform();
        if (u < 0.8) {
            out[i] = MASK;
        } else if (u < 0.9) {
            out[i] = NUM_RESERVED + int(rng.uniform_int(uint64_t(n_symbols)));
        }
        // else: keep the original token
    }
    return out;
}

Tensor corrupt_speech(const Tensor& latents, const MaskVector& m, const Tensor& mask_emb) {
    if (latents.rows() != m.size()) {
        throw InvalidInput("corrupt_speech: mask/sequence length mismatch");
    }
    if (mask_emb.rows() != 1 || mask_emb.cols() != latents.cols()) {
        throw InvalidInput("corrupt_speech: mask embedding dim mismatch");
    }
    Tensor out = latents;
    for (int i = 0; i < out.rows(); ++i) {
        if (!m.bits[size_t(i)]) continue;
        std::copy_n(mask_emb.row_ptr(0), out.cols(), out.row_ptr(i));
    }
    return out;
}

std::vector<int> complement_stream(const std::vector<int>& tokens, const MaskVector& m) {
    if (int(tokens.size()) != m.size()) {
        throw InvalidInput("complement_stream: mask/sequence length mismatch");
    }
    std::vector<int> out(tokens.size(), MASK);
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (m.bits[i]) out[i] = tokens[i];
    }
    return out;
}

ConcatMask build_concat_pair(int len_x, int len_y, double ratio, int max_span, Rng& rng) {
    if (len_x < 1 || len_y < 1) {
        throw InvalidInput("build_concat_pair: both sequences must be non-empty");
    }
    ConcatMask cm;
    cm.mask = sample_span_mask(len_x + len_y, ratio, max_span, rng);
    cm.boundary = len_x;
    return cm;
}

}  // namespace duet
