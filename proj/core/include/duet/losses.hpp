#pragma once

#include "duet/data.hpp"
#include "duet/masking.hpp"
#include "duet/model.hpp"
#include "duet/tokenization.hpp"

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace duet {

// Loss coefficients. Speech/text-only denoising and both MT directions run at
// full weight; text-to-speech and alignment at 0.1; the decoder part of
// speech-to-text at 0.3 (its encoder MLM part stays 1.0). CTC fires on ASR
// pairs only.
struct LossWeights {
    double speech_only = 1.0;
    double text_only = 1.0;
    double text_to_speech = 0.1;
    double align = 0.1;
    double speech_to_text_dec = 0.3;
    double ctc = 0.3;
};

// Mask geometry per input kind (pre-training defaults).
struct MaskConfig {
    double speech_ratio = 0.5;
    int speech_max_span = 10;
    double text_ratio = 0.5;
    int text_max_span = 5;
    double mt_ratio = 0.25;
    double align_ratio = 0.5;
};

// One named contribution: a summed NLL over `count` scoring positions plus
// the coefficient it enters the total with.
struct LossPiece {
    std::string term;
    double weight = 1.0;
    Var sum;
    int count = 0;
};

struct LossReport {
    struct Entry {
        std::string name;
        double value = 0.0;  // per-token mean (exact 0 for empty terms)
        int count = 0;
        double weight = 1.0;
    };
    std::vector<Entry> entries;
    double total = 0.0;

    double recompute_total() const;
    const Entry* find(const std::string& name) const;
    std::string to_json() const;  // single line, fixed field order
};

// Accumulates pieces across a batch (pooled per-token means per term) and
// finalizes total = sum_t weight_t * mean_t as a differentiable scalar.
class BatchLoss {
public:
    void add(const std::vector<LossPiece>& pieces);
    void add(const LossPiece& piece);
    Var total(Tape& tape);
    LossReport report() const;

private:
    struct Term {
        std::string name;
        double weight = 1.0;
        std::vector<Var> sums;
        double value_sum = 0.0;
        int count = 0;
    };
    std::vector<Term> terms_;
    std::optional<double> total_value_;
};

// Caches frozen-subsampler + codebook targets per registry item.
class TokenizerCache {
public:
    TokenizerCache(const FrozenSubsampler& frozen, const Codebook& codebook)
        : frozen_(frozen), codebook_(codebook) {}

    const std::vector<int>& speech_targets(const TrainItem& item);
    std::vector<int> speech_targets_uncached(const Tensor& features) const;

private:
    const FrozenSubsampler& frozen_;
    const Codebook& codebook_;
    std::unordered_map<int, std::vector<int>> cache_;
};

// Either side of a paired example (speech features or text ids).
struct PairedSource {
    bool is_speech = false;
    Tensor features;        // is_speech
    std::vector<int> ids;   // !is_speech (text vocab ids)
    int lang = 0;
};

struct PairedTarget {
    std::vector<int> classes;  // decoder output-space classes, no BOS/EOS
    int lang = 0;
    Modality modality = Modality::Text;
};

// ---------------------------------------------------------------------------
// Per-example losses. Each returns its term pieces; `prefix` names the terms
// (e.g. "u_speech" -> "u_speech_enc", "u_speech_dec"). Weights are attached
// by the caller. A forced mask overrides the internally drawn one (tests).
// ---------------------------------------------------------------------------

std::vector<LossPiece> loss_u_speech(Model& model, Model::Ctx& ctx, const Tensor& features,
                                     int lang, const std::vector<int>& z_targets,
                                     double ratio, int max_span, double weight, Rng& mask_rng,
                                     const std::string& prefix,
                                     const MaskVector* forced_mask = nullptr);

std::vector<LossPiece> loss_u_text(Model& model, Model::Ctx& ctx,
                                   const std::vector<int>& tokens, int lang, double ratio,
                                   int max_span, double weight, Rng& mask_rng,
                                   const std::string& prefix,
                                   const MaskVector* forced_mask = nullptr);

struct PairedLoss {
    std::vector<LossPiece> pieces;
    Var enc_states;  // for the CTC head on ASR items
    int enc_len = 0;
};

PairedLoss loss_p(Model& model, Model::Ctx& ctx, const PairedSource& src,
                  const PairedTarget& tgt, const std::vector<int>& src_z_targets,
                  double src_ratio, int src_max_span, double enc_weight, double dec_weight,
                  Rng& mask_rng, const std::string& prefix,
                  const MaskVector* forced_mask = nullptr);

std::vector<LossPiece> loss_align(Model& model, Model::Ctx& ctx, const PairedSource& x,
                                  const std::vector<int>& y_ids, int y_lang,
                                  const std::vector<int>& x_z_targets, double ratio,
                                  int max_span, double weight, Rng& mask_rng,
                                  const std::string& prefix,
                                  const ConcatMask* forced_mask = nullptr);

LossPiece loss_ctc_piece(Model& model, Model::Ctx& ctx, Var enc_states,
                         const std::vector<int>& transcript, double weight,
                         const std::string& term);

struct ObjectiveResult {
    Var total;
    LossReport report;
};

// The combined pre-training objective over a mixed batch. Each item's masks
// come from a stream derived from (mask_seed, item.id), so duplicated items
// mask identically; gradients flow through `total`.
ObjectiveResult total_objective(Model& model, Model::Ctx& ctx,
                                const std::vector<TrainItem>& batch, const LossWeights& w,
                                const MaskConfig& masks, TokenizerCache& tok_cache,
                                uint64_t mask_seed);

// Plain forward seq2seq objective used by fine-tuning: no MLM, no alignment,
// no CTC; optional decoder-input synonym noise. Source masking is off by
// default (src_mask_ratio 0) and can be re-enabled as a config override.
ObjectiveResult seq2seq_objective(Model& model, Model::Ctx& ctx,
                                  const std::vector<TrainItem>& batch,
                                  const SynonymTable* noise_table, double noise_ratio,
                                  Rng& noise_rng, double src_mask_ratio = 0.0,
                                  int src_max_span = 1, uint64_t mask_seed = 0);

// Replaces non-reserved decoder-input tokens by their synonym with
// probability `ratio`. Targets are never touched.
std::vector<int> apply_decoder_noise(const std::vector<int>& decoder_in,
                                     const SynonymTable& table, double ratio, Rng& rng);

}  // namespace duet
