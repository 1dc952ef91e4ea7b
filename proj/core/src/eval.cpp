#include "duet/eval.hpp"

#include "duet/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace duet {

namespace {

constexpr double kLengthAlpha = 0.6;

// per-row log-softmax of the last row of a logits matrix
std::vector<double> last_row_log_probs(const Tensor& logits) {
    const int n = logits.cols();
    const double* row = logits.row_ptr(logits.rows() - 1);
    double hi = row[0];
    for (int j = 1; j < n; ++j) hi = std::max(hi, row[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - hi);
    const double lse = hi + std::log(z);
    std::vector<double> lp(size_t(n), 0.0);
    for (int j = 0; j < n; ++j) lp[size_t(j)] = row[j] - lse;
    return lp;
}

bool emittable(int cls) {
    return cls == EOS || cls >= NUM_RESERVED;
}

}  // namespace

double length_penalty(int len) {
    return std::pow((5.0 + double(len)) / 6.0, kLengthAlpha);
}

Hypothesis greedy_decode(Model& model, Model::Ctx& ctx, Var enc_states, int enc_len,
                         int tgt_lang, Modality tgt_mod, int max_len) {
    if (max_len < 1) throw InvalidInput("greedy_decode: max_len must be >= 1");
    Hypothesis hyp;
    std::vector<int> prefix = {BOS};
    for (int step = 0; step < max_len; ++step) {
        Var logits = model.decode_logits(ctx, prefix, tgt_lang, tgt_mod, enc_states, enc_len);
        auto lp = last_row_log_probs(logits.val());
        int best = -1;
        for (int cls = 0; cls < int(lp.size()); ++cls) {
            if (!emittable(cls)) continue;
            if (best < 0 || lp[size_t(cls)] > lp[size_t(best)]) best = cls;
        }
        hyp.score += lp[size_t(best)];
        if (best == EOS) return hyp;
        hyp.tokens.push_back(best);
        prefix.push_back(best);
    }
    return hyp;
}

Hypothesis beam_decode(Model& model, Model::Ctx& ctx, Var enc_states, int enc_len,
                       int tgt_lang, Modality tgt_mod, int beam, int max_len) {
    if (beam < 1) throw InvalidInput("beam_decode: beam must be >= 1");
    if (max_len < 1) throw InvalidInput("beam_decode: max_len must be >= 1");

    struct Beam {
        std::vector<int> tokens;
        double logp = 0.0;
    };
    struct Done {
        std::vector<int> tokens;
        double logp = 0.0;
        double normalized = 0.0;
    };
    std::vector<Beam> live = {Beam{}};
    std::vector<Done> done;

    auto finish = [&](const Beam& b) {
        done.push_back(Done{b.tokens, b.logp, b.logp / length_penalty(int(b.tokens.size()))});
    };

    for (int step = 0; step < max_len && !live.empty(); ++step) {
        struct Cand {
            size_t parent;
            int cls;
            double logp;
        };
        std::vector<Cand> cands;
        for (size_t bi = 0; bi < live.size(); ++bi) {
            std::vector<int> prefix = {BOS};
            prefix.insert(prefix.end(), live[bi].tokens.begin(), live[bi].tokens.end());
            Var logits =
                model.decode_logits(ctx, prefix, tgt_lang, tgt_mod, enc_states, enc_len);
            auto lp = last_row_log_probs(logits.val());
            for (int cls = 0; cls < int(lp.size()); ++cls) {
                if (!emittable(cls)) continue;
                cands.push_back(Cand{bi, cls, live[bi].logp + lp[size_t(cls)]});
            }
        }
        // deterministic top-k: logp descending, then parent, then class id
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.cls < b.cls;
        });
        // finished hypotheses consume beam slots, so beam=1 stops exactly
        // where greedy stops
        std::vector<Beam> next;
        int taken = 0;
        for (const Cand& c : cands) {
            if (taken >= beam) break;
            taken++;
            Beam nb = live[c.parent];
            nb.logp = c.logp;
            if (c.cls == EOS) {
                finish(nb);
            } else {
                nb.tokens.push_back(c.cls);
                next.push_back(std::move(nb));
            }
        }
        live = std::move(next);
    }
    for (const Beam& b : live) finish(b);

    const Done* best = nullptr;
    for (const Done& d : done) {
        if (!best || d.normalized > best->normalized) best = &d;
    }
    Hypothesis hyp;
    hyp.tokens = best->tokens;
    hyp.score = best->logp;
    return hyp;
}

double rescore(Model& model, Model::Ctx& ctx, Var enc_states, int enc_len,
               const std::vector<int>& tokens, int tgt_lang, Modality tgt_mod,
               bool include_eos) {
    std::vector<int> prefix = {BOS};
    prefix.insert(prefix.end(), tokens.begin(), tokens.end());
    Var logits = model.decode_logits(ctx, prefix, tgt_lang, tgt_mod, enc_states, enc_len);
    Var lsm = ctx.tape.log_softmax_rows(logits);
    double total = 0.0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        total += lsm.val().at(int(i), tokens[i]);
    }
    if (include_eos) total += lsm.val().at(int(tokens.size()), EOS);
    return total;
}

Hypothesis decode_item(Model& model, const TrainItem& item, int beam, int max_len) {
    Tape tape;
    Rng rng(0);
    Model::Ctx ctx{tape, rng, false, {}};
    Var enc_in;
    int len = 0;
    switch (item.stream) {
        case Stream::Asr:
        case Stream::Ast: {
            Var latents = model.subsample(ctx, item.features);
            len = latents.val().rows();
            enc_in = model.embed_speech(ctx, latents, item.src_lang);
            break;
        }
        case Stream::Mt: {
            len = int(item.src_text.size());
            enc_in = model.embed_tokens(ctx, item.src_text, item.src_lang, Modality::Text);
            break;
        }
        default:
            throw InvalidInput("decode_item: only paired streams can be decoded");
    }
    Var enc_states = model.encode(ctx, enc_in, len);
    return beam_decode(model, ctx, enc_states, len, item.tgt_lang, Modality::Text, beam,
                       max_len);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

template <typename T>
int edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = int(j);
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = int(i);
        for (size_t j = 1; j <= b.size(); ++j) {
            int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> words;
    std::istringstream is(s);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

}  // namespace

double wer(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (ref.empty()) throw InvalidInput("wer: empty reference");
    return double(edit_distance(hyp, ref)) / double(ref.size());
}

double wer(const std::string& hyp, const std::string& ref) {
    auto rw = split_words(ref);
    if (rw.empty()) throw InvalidInput("wer: empty reference");
    return double(edit_distance(split_words(hyp), rw)) / double(rw.size());
}

double bleu(const std::vector<std::vector<int>>& hyps,
            const std::vector<std::vector<int>>& refs) {
    if (hyps.size() != refs.size()) throw InvalidInput("bleu: corpus size mismatch");
    if (refs.empty()) throw InvalidInput("bleu: empty corpus");
    for (const auto& r : refs) {
        if (r.empty()) throw InvalidInput("bleu: empty reference");
    }

    int64_t hyp_len = 0, ref_len = 0;
    int64_t total[4] = {0, 0, 0, 0};
    int64_t match[4] = {0, 0, 0, 0};
    for (size_t i = 0; i < hyps.size(); ++i) {
        const auto& h = hyps[i];
        const auto& r = refs[i];
        hyp_len += int64_t(h.size());
        ref_len += int64_t(r.size());
        for (int n = 1; n <= 4; ++n) {
            if (int(h.size()) < n) continue;
            std::map<std::vector<int>, int64_t> ref_counts;
            for (size_t j = 0; j + n <= r.size(); ++j) {
                ref_counts[std::vector<int>(r.begin() + j, r.begin() + j + n)]++;
            }
            std::map<std::vector<int>, int64_t> hyp_counts;
            for (size_t j = 0; j + n <= h.size(); ++j) {
                hyp_counts[std::vector<int>(h.begin() + j, h.begin() + j + n)]++;
            }
            for (const auto& [gram, count] : hyp_counts) {
                total[n - 1] += count;
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) match[n - 1] += std::min(count, it->second);
            }
        }
    }
    if (hyp_len == 0) return 0.0;
    if (total[0] > 0 && match[0] == 0) return 0.0;

    double log_sum = 0.0;
    int orders = 0;
    for (int n = 0; n < 4; ++n) {
        if (total[n] == 0) continue;
        double p;
        if (match[n] > 0) {
            p = double(match[n]) / double(total[n]);
        } else {
            // add-1 smoothing for zero precisions at n >= 2
            p = 1.0 / double(total[n] + 1);
        }
        log_sum += std::log(p);
        orders++;
    }
    if (orders == 0) return 0.0;
    const double bp = std::exp(std::min(0.0, 1.0 - double(ref_len) / double(hyp_len)));
    return 100.0 * bp * std::exp(log_sum / double(orders));
}

// ---------------------------------------------------------------------------
// Task evaluation
// ---------------------------------------------------------------------------

std::string EvalReport::to_json() const {
    nlohmann::json js{{"task", task},
                      {"exact_match", exact_match},
                      {"n_examples", n_examples},
                      {"config_digest", config_digest}};
    if (wer_value >= 0.0) js["wer"] = wer_value;
    if (bleu_value >= 0.0) js["bleu"] = bleu_value;
    return js.dump();
}

EvalReport evaluate_task(Model& model, const DatasetRegistry& registry, Stream task,
                         int beam, int max_len) {
    if (task != Stream::Asr && task != Stream::Ast && task != Stream::Mt) {
        throw InvalidInput("evaluate_task: only asr/ast/mt");
    }
    const auto& items = registry.items(task);
    if (items.empty()) throw InvalidInput("evaluate_task: no examples for task");

    EvalReport rep;
    rep.task = stream_name(task);
    rep.n_examples = int(items.size());
    rep.config_digest = model.config().digest();

    std::vector<std::vector<int>> hyps, refs;
    int exact = 0;
    double wer_sum = 0.0;
    for (const TrainItem& item : items) {
        Hypothesis hyp = decode_item(model, item, beam, max_len);
        hyps.push_back(hyp.tokens);
        refs.push_back(item.tgt_text);
        if (hyp.tokens == item.tgt_text) exact++;
        if (task == Stream::Asr) wer_sum += wer(hyp.tokens, item.tgt_text);
    }
    rep.exact_match = double(exact) / double(items.size());
    if (task == Stream::Asr) {
        rep.wer_value = wer_sum / double(items.size());
    } else {
        rep.bleu_value = bleu(hyps, refs);
    }
    return rep;
}

}  // namespace duet
