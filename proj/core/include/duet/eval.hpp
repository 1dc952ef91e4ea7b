#pragma once

#include "duet/data.hpp"
#include "duet/model.hpp"

#include <string>
#include <vector>

namespace duet {

// Decoded output. tokens are output-space classes with BOS/EOS stripped;
// score is the raw sum of chosen log-probs (log-softmax over the full class
// set, EOS step included when the decode ended on EOS).
struct Hypothesis {
    std::vector<int> tokens;
    double score = 0.0;
};

// GNMT length normalization at alpha = 0.6.
double length_penalty(int len);

// Argmax decode from BOS until EOS or max_len emitted tokens. Reserved ids
// other than EOS are never emitted. Ties resolve to the lowest class id.
Hypothesis greedy_decode(Model& model, Model::Ctx& ctx, Var enc_states, int enc_len,
                         int tgt_lang, Modality tgt_mod, int max_len);

// Length-normalized beam search; beam = 1 reproduces greedy_decode exactly.
Hypothesis beam_decode(Model& model, Model::Ctx& ctx, Var enc_states, int enc_len,
                       int tgt_lang, Modality tgt_mod, int beam, int max_len);

// Teacher-forced log-prob of an emitted sequence (the decode-score oracle):
// sum over tokens plus the EOS step when include_eos is set.
double rescore(Model& model, Model::Ctx& ctx, Var enc_states, int enc_len,
               const std::vector<int>& tokens, int tgt_lang, Modality tgt_mod,
               bool include_eos);

// Encodes a paired item's source (speech or text) and decodes its target.
Hypothesis decode_item(Model& model, const TrainItem& item, int beam, int max_len);

// Token-level WER: edit_distance(hyp, ref) / len(ref).
double wer(const std::vector<int>& hyp, const std::vector<int>& ref);
// Word-level WER on whitespace-split strings.
double wer(const std::string& hyp, const std::string& ref);

// Corpus-level BLEU-4 in [0, 100]: clipped n-gram precisions with add-1
// smoothing for zero precisions at n >= 2, n-gram orders with no candidate
// n-grams skipped, brevity penalty exp(min(0, 1 - ref_len / hyp_len)).
double bleu(const std::vector<std::vector<int>>& hyps,
            const std::vector<std::vector<int>>& refs);

struct EvalReport {
    std::string task;
    double exact_match = 0.0;
    double wer_value = -1.0;   // ASR only
    double bleu_value = -1.0;  // AST / MT only
    int n_examples = 0;
    uint64_t config_digest = 0;

    std::string to_json() const;
};

// Greedy/beam decode over every item of one stream; WER for ASR, BLEU for
// AST/MT, exact match always.
EvalReport evaluate_task(Model& model, const DatasetRegistry& registry, Stream task,
                         int beam, int max_len);

}  // namespace duet
