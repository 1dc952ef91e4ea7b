#pragma once

#include "duet/common.hpp"
#include "duet/tensor.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace duet {

// Frozen speech quantizer: K x d prototype matrix. Never updated by training.
struct Codebook {
    Tensor entries;

    int size() const { return entries.rows(); }
    int dim() const { return entries.cols(); }
};

// Nearest prototype by Euclidean distance, lowest index on ties.
int quantize(const std::vector<double>& s, const Codebook& cb);
int quantize_row(const Tensor& latents, int row, const Codebook& cb);

// Element-wise quantization of an N x d latent sequence.
std::vector<int> quantize_utterance(const Tensor& latents, const Codebook& cb);

// Plain k-means with k-means++ init and a fixed iteration count.
// iters = 0 returns the initialization. Throws InvalidInput when the input
// has fewer than k distinct rows.
Codebook fit_codebook(const Tensor& latents, int k, int iters, uint64_t seed);

// Mean squared distance from each row to its assigned prototype.
double quantization_error(const Tensor& latents, const Codebook& cb);

// Codebook file: "MU2C", u32 K, u32 d, then K*d little-endian f32.
void write_codebook(const std::string& path, const Codebook& cb);
Codebook read_codebook(const std::string& path);
uint64_t codebook_checksum(const Codebook& cb);

// ---------------------------------------------------------------------------
// Text vocabulary. Reserved ids 0..4 (PAD/BOS/EOS/MASK/UNK); symbols start
// at id 5 in file line order. Char mode segments per character; word-piece
// mode (multi-char symbols loaded from file) encodes by greedy longest match.
// ---------------------------------------------------------------------------
class TextVocab {
public:
    static TextVocab from_chars(const std::string& chars);
    static TextVocab from_file(const std::string& path);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    int num_symbols() const { return int(symbols_.size()); }
    // total id space including the 5 reserved ids
    int total_size() const { return NUM_RESERVED + num_symbols(); }
    bool is_wordpiece() const { return wordpiece_; }
    const std::string& symbol(int id) const { return symbols_[id - NUM_RESERVED]; }

private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> to_id_;
    size_t max_symbol_len_ = 0;
    bool wordpiece_ = false;
};

// Decoder output space: [reserved | text symbols | speech codes].
// Speech code z occupies class speech_class(z); the CTC head covers the text
// ids plus one trailing blank.
struct OutputSpace {
    int text_symbols = 0;
    int codebook_size = 0;

    int n_classes() const { return NUM_RESERVED + text_symbols + codebook_size; }
    int speech_class(int z) const { return NUM_RESERVED + text_symbols + z; }
    int speech_code(int cls) const { return cls - NUM_RESERVED - text_symbols; }
    bool is_speech_class(int cls) const {
        return cls >= NUM_RESERVED + text_symbols && cls < n_classes();
    }
    int ctc_classes() const { return NUM_RESERVED + text_symbols + 1; }
    int ctc_blank() const { return NUM_RESERVED + text_symbols; }
};

// For every token id in [first_id, first_id + count): the nearest other token
// in that range under cosine distance, lowest id on ties. All-zero embedding
// rows fall back to a seeded uniform draw over the other tokens.
struct SynonymTable {
    int first_id = NUM_RESERVED;
    std::vector<int> nearest;

    int at(int token) const { return nearest[size_t(token - first_id)]; }
    bool covers(int token) const {
        return token >= first_id && token < first_id + int(nearest.size());
    }
};

SynonymTable build_synonym_table(const Tensor& embeddings, int first_id, int count,
                                 uint64_t seed);

}  // namespace duet
