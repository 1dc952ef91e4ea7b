#include "duet/losses.hpp"

#include "duet/common.hpp"

#include <json.hpp>

#include <cmath>

namespace duet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// LossReport / BatchLoss
// ---------------------------------------------------------------------------

double LossReport::recompute_total() const {
    double t = 0.0;
    for (const Entry& e : entries) t += e.weight * e.value;
    return t;
}

const LossReport::Entry* LossReport::find(const std::string& name) const {
    for (const Entry& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

std::string LossReport::to_json() const {
    json terms = json::object();
    for (const Entry& e : entries) {
        terms[e.name] = {{"value", e.value}, {"count", e.count}, {"weight", e.weight}};
    }
    json js{{"total", total}, {"terms", terms}};
    return js.dump();
}

void BatchLoss::add(const LossPiece& piece) {
    Term* term = nullptr;
    for (Term& t : terms_) {
        if (t.name == piece.term) {
            term = &t;
            break;
        }
    }
    if (!term) {
        terms_.push_back(Term{piece.term, piece.weight, {}, 0.0, 0});
        term = &terms_.back();
    }
    if (term->weight != piece.weight) {
        throw InvalidInput("BatchLoss: inconsistent weight for term " + piece.term);
    }
    if (piece.count > 0) {
        term->sums.push_back(piece.sum);
        term->value_sum += piece.sum.val().v[0];
        term->count += piece.count;
    }
}

void BatchLoss::add(const std::vector<LossPiece>& pieces) {
    for (const LossPiece& p : pieces) add(p);
}

Var BatchLoss::total(Tape& tape) {
    Var tot = tape.constant(Tensor(1, 1));
    for (Term& t : terms_) {
        if (t.count == 0) continue;
        Var s = t.sums[0];
        for (size_t i = 1; i < t.sums.size(); ++i) s = tape.add(s, t.sums[i]);
        tot = tape.add(tot, tape.scale(s, t.weight / double(t.count)));
    }
    total_value_ = tot.val().v[0];
    return tot;
}

LossReport BatchLoss::report() const {
    LossReport rep;
    for (const Term& t : terms_) {
        LossReport::Entry e;
        e.name = t.name;
        e.count = t.count;
        e.weight = t.weight;
        e.value = t.count > 0 ? t.value_sum / double(t.count) : 0.0;
        rep.entries.push_back(std::move(e));
    }
    rep.total = total_value_.value_or(rep.recompute_total());
    return rep;
}

// ---------------------------------------------------------------------------
// TokenizerCache
// ---------------------------------------------------------------------------

std::vector<int> TokenizerCache::speech_targets_uncached(const Tensor& features) const {
    return quantize_utterance(frozen_.run(features), codebook_);
}

const std::vector<int>& TokenizerCache::speech_targets(const TrainItem& item) {
    auto it = cache_.find(item.id);
    if (it != cache_.end()) return it->second;
    auto [ins, ok] = cache_.emplace(item.id, speech_targets_uncached(item.features));
    return ins->second;
}

// ---------------------------------------------------------------------------
// Shared assembly helpers
// ---------------------------------------------------------------------------

namespace {

std::vector<int> to_speech_classes(const std::vector<int>& z, const OutputSpace& os) {
    std::vector<int> classes;
    classes.reserve(z.size());
    for (int id : z) classes.push_back(os.speech_class(id));
    return classes;
}

// decoder denoising pass: input [BOS] + stream, targets = class at masked
// positions, ignore elsewhere (one trailing ignore for the last input token).
std::vector<int> denoise_targets(const std::vector<int>& classes, const MaskVector& m) {
    std::vector<int> tg(classes.size() + 1, -1);
    for (size_t i = 0; i < classes.size(); ++i) {
        if (m.bits[i]) tg[i] = classes[i];
    }
    return tg;
}

std::vector<int> bos_prefixed(const std::vector<int>& stream) {
    std::vector<int> in;
    in.reserve(stream.size() + 1);
    in.push_back(BOS);
    in.insert(in.end(), stream.begin(), stream.end());
    return in;
}

}  // namespace

// ---------------------------------------------------------------------------
// Unlabeled denoising losses
// ---------------------------------------------------------------------------

std::vector<LossPiece> loss_u_speech(Model& model, Model::Ctx& ctx, const Tensor& features,
                                     int lang, const std::vector<int>& z_targets,
                                     double ratio, int max_span, double weight, Rng& mask_rng,
                                     const std::string& prefix,
                                     const MaskVector* forced_mask) {
    Tape& t = ctx.tape;
    const OutputSpace os = model.config().output_space();
    Var latents = model.subsample(ctx, features);
    const int n = latents.val().rows();
    if (int(z_targets.size()) != n) {
        throw InvalidInput("loss_u_speech: target length mismatch");
    }
    MaskVector m = forced_mask ? *forced_mask : sample_span_mask(n, ratio, max_span, mask_rng);
    if (m.size() != n) throw InvalidInput("loss_u_speech: mask length mismatch");

    Var corrupted =
        t.replace_rows(latents, model.use(ctx, model.params().get("enc.mask_emb")), m.bits);
    Var enc_states = model.encode(ctx, model.embed_speech(ctx, corrupted, lang), n);

    std::vector<int> z_classes = to_speech_classes(z_targets, os);
    std::vector<int> enc_targets(size_t(n), -1);
    for (int i = 0; i < n; ++i) {
        if (m.bits[size_t(i)]) enc_targets[size_t(i)] = z_classes[size_t(i)];
    }
    Var enc_sum = t.cross_entropy_sum(model.encoder_mlm_logits(ctx, enc_states), enc_targets);

    Var dec_logits = model.decode_logits(ctx, bos_prefixed(complement_stream(z_classes, m)),
                                         lang, Modality::Speech, enc_states, n);
    Var dec_sum = t.cross_entropy_sum(dec_logits, denoise_targets(z_classes, m));

    const int n_masked = m.count_ones();
    return {{prefix + "_enc", weight, enc_sum, n_masked},
            {prefix + "_dec", weight, dec_sum, n_masked}};
}

std::vector<LossPiece> loss_u_text(Model& model, Model::Ctx& ctx,
                                   const std::vector<int>& tokens, int lang, double ratio,
                                   int max_span, double weight, Rng& mask_rng,
                                   const std::string& prefix, const MaskVector* forced_mask) {
    Tape& t = ctx.tape;
    const int n = int(tokens.size());
    if (n < 1) throw InvalidInput("loss_u_text: empty sequence");
    MaskVector m = forced_mask ? *forced_mask : sample_span_mask(n, ratio, max_span, mask_rng);
    if (m.size() != n) throw InvalidInput("loss_u_text: mask length mismatch");

    std::vector<int> corrupted =
        corrupt_text(tokens, m, model.config().text_vocab_size, mask_rng);
    Var enc_states =
        model.encode(ctx, model.embed_tokens(ctx, corrupted, lang, Modality::Text), n);

    std::vector<int> enc_targets(size_t(n), -1);
    for (int i = 0; i < n; ++i) {
        if (m.bits[size_t(i)]) enc_targets[size_t(i)] = tokens[size_t(i)];
    }
    Var enc_sum = t.cross_entropy_sum(model.encoder_mlm_logits(ctx, enc_states), enc_targets);

    Var dec_logits = model.decode_logits(ctx, bos_prefixed(complement_stream(tokens, m)),
                                         lang, Modality::Text, enc_states, n);
    Var dec_sum = t.cross_entropy_sum(dec_logits, denoise_targets(tokens, m));

    const int n_masked = m.count_ones();
    return {{prefix + "_enc", weight, enc_sum, n_masked},
            {prefix + "_dec", weight, dec_sum, n_masked}};
}

// ---------------------------------------------------------------------------
// Paired seq2seq loss
// ---------------------------------------------------------------------------

PairedLoss loss_p(Model& model, Model::Ctx& ctx, const PairedSource& src,
                  const PairedTarget& tgt, const std::vector<int>& src_z_targets,
                  double src_ratio, int src_max_span, double enc_weight, double dec_weight,
                  Rng& mask_rng, const std::string& prefix, const MaskVector* forced_mask) {
    if (tgt.classes.empty()) throw InvalidInput("loss_p: empty target");
    Tape& t = ctx.tape;
    const OutputSpace os = model.config().output_space();

    Var enc_in;
    int len = 0;
    MaskVector m;
    std::vector<int> enc_targets;
    if (src.is_speech) {
        Var latents = model.subsample(ctx, src.features);
        len = latents.val().rows();
        if (int(src_z_targets.size()) != len) {
            throw InvalidInput("loss_p: speech target length mismatch");
        }
        m = forced_mask ? *forced_mask
                        : sample_span_mask(len, src_ratio, src_max_span, mask_rng);
        Var corrupted = t.replace_rows(
            latents, model.use(ctx, model.params().get("enc.mask_emb")), m.bits);
        enc_in = model.embed_speech(ctx, corrupted, src.lang);
        enc_targets.assign(size_t(len), -1);
        for (int i = 0; i < len; ++i) {
            if (m.bits[size_t(i)]) enc_targets[size_t(i)] = os.speech_class(src_z_targets[size_t(i)]);
        }
    } else {
        len = int(src.ids.size());
        if (len < 1) throw InvalidInput("loss_p: empty source");
        m = forced_mask ? *forced_mask
                        : sample_span_mask(len, src_ratio, src_max_span, mask_rng);
        std::vector<int> corrupted =
            corrupt_text(src.ids, m, model.config().text_vocab_size, mask_rng);
        enc_in = model.embed_tokens(ctx, corrupted, src.lang, Modality::Text);
        enc_targets.assign(size_t(len), -1);
        for (int i = 0; i < len; ++i) {
            if (m.bits[size_t(i)]) enc_targets[size_t(i)] = src.ids[size_t(i)];
        }
    }

    Var enc_states = model.encode(ctx, enc_in, len);
    Var enc_sum = t.cross_entropy_sum(model.encoder_mlm_logits(ctx, enc_states), enc_targets);

    std::vector<int> dec_targets = tgt.classes;
    dec_targets.push_back(EOS);
    Var dec_logits = model.decode_logits(ctx, bos_prefixed(tgt.classes), tgt.lang,
                                         tgt.modality, enc_states, len);
    Var dec_sum = t.cross_entropy_sum(dec_logits, dec_targets);

    PairedLoss out;
    out.pieces = {{prefix + "_enc", enc_weight, enc_sum, m.count_ones()},
                  {prefix + "_dec", dec_weight, dec_sum, int(dec_targets.size())}};
    out.enc_states = enc_states;
    out.enc_len = len;
    return out;
}

// ---------------------------------------------------------------------------
// Alignment loss over the concatenated pair
// ---------------------------------------------------------------------------

std::vector<LossPiece> loss_align(Model& model, Model::Ctx& ctx, const PairedSource& x,
                                  const std::vector<int>& y_ids, int y_lang,
                                  const std::vector<int>& x_z_targets, double ratio,
                                  int max_span, double weight, Rng& mask_rng,
                                  const std::string& prefix, const ConcatMask* forced_mask) {
    if (y_ids.empty()) throw InvalidInput("loss_align: empty y side");
    Tape& t = ctx.tape;
    const OutputSpace os = model.config().output_space();

    // x-side content and its output-space classes
    Var x_latents;
    int x_len = 0;
    std::vector<int> x_classes;
    if (x.is_speech) {
        x_latents = model.subsample(ctx, x.features);
        x_len = x_latents.val().rows();
        if (int(x_z_targets.size()) != x_len) {
            throw InvalidInput("loss_align: speech target length mismatch");
        }
        x_classes = to_speech_classes(x_z_targets, os);
    } else {
        x_len = int(x.ids.size());
        if (x_len < 1) throw InvalidInput("loss_align: empty x side");
        x_classes = x.ids;
    }
    const int y_len = int(y_ids.size());

    ConcatMask cm = forced_mask
                        ? *forced_mask
                        : build_concat_pair(x_len, y_len, ratio, max_span, mask_rng);
    if (cm.mask.size() != x_len + y_len || cm.boundary != x_len) {
        throw InvalidInput("loss_align: mask does not fit the pair");
    }
    MaskVector mx = cm.x_part(), my = cm.y_part();

    // encoder input: [x, y]^m with continuous positions across the boundary
    Var x_part;
    if (x.is_speech) {
        Var corrupted = t.replace_rows(
            x_latents, model.use(ctx, model.params().get("enc.mask_emb")), mx.bits);
        x_part = model.embed_speech(ctx, corrupted, x.lang, 0);
    } else {
        std::vector<int> corrupted =
            corrupt_text(x.ids, mx, model.config().text_vocab_size, mask_rng);
        x_part = model.embed_tokens(ctx, corrupted, x.lang, Modality::Text, 0);
    }
    std::vector<int> y_corrupted =
        corrupt_text(y_ids, my, model.config().text_vocab_size, mask_rng);
    Var y_part = model.embed_tokens(ctx, y_corrupted, y_lang, Modality::Text, x_len);
    Var enc_states = model.encode(ctx, t.concat_rows(x_part, y_part), x_len + y_len);

    // term 1: encoder MLM over every masked position of the concatenation
    std::vector<int> enc_targets(size_t(x_len + y_len), -1);
    for (int i = 0; i < x_len; ++i) {
        if (mx.bits[size_t(i)]) enc_targets[size_t(i)] = x_classes[size_t(i)];
    }
    for (int i = 0; i < y_len; ++i) {
        if (my.bits[size_t(i)]) enc_targets[size_t(x_len + i)] = y_ids[size_t(i)];
    }
    Var enc_sum = t.cross_entropy_sum(model.encoder_mlm_logits(ctx, enc_states), enc_targets);

    // terms 2 and 3: separate decoder passes per stream
    Var dec_x_logits = model.decode_logits(
        ctx, bos_prefixed(complement_stream(x_classes, mx)), x.lang,
        x.is_speech ? Modality::Speech : Modality::Text, enc_states, x_len + y_len);
    Var dec_x_sum = t.cross_entropy_sum(dec_x_logits, denoise_targets(x_classes, mx));

    Var dec_y_logits =
        model.decode_logits(ctx, bos_prefixed(complement_stream(y_ids, my)), y_lang,
                            Modality::Text, enc_states, x_len + y_len);
    Var dec_y_sum = t.cross_entropy_sum(dec_y_logits, denoise_targets(y_ids, my));

    return {{prefix + "_enc", weight, enc_sum, cm.mask.count_ones()},
            {prefix + "_dec_x", weight, dec_x_sum, mx.count_ones()},
            {prefix + "_dec_y", weight, dec_y_sum, my.count_ones()}};
}

LossPiece loss_ctc_piece(Model& model, Model::Ctx& ctx, Var enc_states,
                         const std::vector<int>& transcript, double weight,
                         const std::string& term) {
    if (transcript.empty()) throw InvalidInput("loss_ctc: empty transcript");
    Var logits = model.ctc_head_logits(ctx, enc_states);
    Var nll = ctx.tape.ctc_loss(logits, transcript, model.config().output_space().ctc_blank());
    return {term, weight, nll, int(transcript.size())};
}

// ---------------------------------------------------------------------------
// Batch objectives
// ---------------------------------------------------------------------------

ObjectiveResult total_objective(Model& model, Model::Ctx& ctx,
                                const std::vector<TrainItem>& batch, const LossWeights& w,
                                const MaskConfig& masks, TokenizerCache& tok_cache,
                                uint64_t mask_seed) {
    if (batch.empty()) throw InvalidInput("total_objective: empty batch");
    const OutputSpace os = model.config().output_space();
    BatchLoss acc;
    for (const TrainItem& item : batch) {
        Rng mask_rng(Rng::derive(mask_seed, 0x17e30 + uint64_t(item.id)));
        switch (item.stream) {
            case Stream::SpeechOnly:
                acc.add(loss_u_speech(model, ctx, item.features, item.src_lang,
                                      tok_cache.speech_targets(item), masks.speech_ratio,
                                      masks.speech_max_span, w.speech_only, mask_rng,
                                      "u_speech"));
                break;
            case Stream::TextOnly:
                acc.add(loss_u_text(model, ctx, item.src_text, item.src_lang,
                                    masks.text_ratio, masks.text_max_span, w.text_only,
                                    mask_rng, "u_text"));
                break;
            case Stream::Asr:
            case Stream::Ast: {
                const std::vector<int>& z = tok_cache.speech_targets(item);
                PairedSource src{true, item.features, {}, item.src_lang};
                PairedTarget tgt{item.tgt_text, item.tgt_lang, Modality::Text};
                PairedLoss fwd =
                    loss_p(model, ctx, src, tgt, z, masks.speech_ratio, masks.speech_max_span,
                           1.0, w.speech_to_text_dec, mask_rng, "st_fwd");
                acc.add(fwd.pieces);
                if (item.stream == Stream::Asr) {
                    acc.add(loss_ctc_piece(model, ctx, fwd.enc_states, item.tgt_text, w.ctc,
                                           "ctc"));
                }
                PairedSource bwd_src{false, Tensor{}, item.tgt_text, item.tgt_lang};
                PairedTarget bwd_tgt{to_speech_classes(z, os), item.src_lang,
                                     Modality::Speech};
                acc.add(loss_p(model, ctx, bwd_src, bwd_tgt, {}, masks.text_ratio,
                               masks.text_max_span, w.text_to_speech, w.text_to_speech,
                               mask_rng, "st_bwd")
                            .pieces);
                acc.add(loss_align(model, ctx, src, item.tgt_text, item.tgt_lang, z,
                                   masks.align_ratio, masks.speech_max_span, w.align,
                                   mask_rng, "st_align"));
                break;
            }
            case Stream::Mt: {
                PairedSource src{false, Tensor{}, item.src_text, item.src_lang};
                PairedTarget tgt{item.tgt_text, item.tgt_lang, Modality::Text};
                acc.add(loss_p(model, ctx, src, tgt, {}, masks.mt_ratio, masks.text_max_span,
                               1.0, 1.0, mask_rng, "tt_fwd")
                            .pieces);
                PairedSource bwd_src{false, Tensor{}, item.tgt_text, item.tgt_lang};
                PairedTarget bwd_tgt{item.src_text, item.src_lang, Modality::Text};
                acc.add(loss_p(model, ctx, bwd_src, bwd_tgt, {}, masks.mt_ratio,
                               masks.text_max_span, 1.0, 1.0, mask_rng, "tt_bwd")
                            .pieces);
                acc.add(loss_align(model, ctx, src, item.tgt_text, item.tgt_lang, {},
                                   masks.align_ratio, masks.text_max_span, w.align, mask_rng,
                                   "tt_align"));
                break;
            }
        }
    }
    ObjectiveResult out;
    out.total = acc.total(ctx.tape);
    out.report = acc.report();
    return out;
}

std::vector<int> apply_decoder_noise(const std::vector<int>& decoder_in,
                                     const SynonymTable& table, double ratio, Rng& rng) {
    std::vector<int> out = decoder_in;
    for (int& id : out) {
        if (id < NUM_RESERVED || !table.covers(id)) continue;
        if (rng.uniform() < ratio) id = table.at(id);
    }
    return out;
}

ObjectiveResult seq2seq_objective(Model& model, Model::Ctx& ctx,
                                  const std::vector<TrainItem>& batch,
                                  const SynonymTable* noise_table, double noise_ratio,
                                  Rng& noise_rng, double src_mask_ratio, int src_max_span,
                                  uint64_t mask_seed) {
    if (batch.empty()) throw InvalidInput("seq2seq_objective: empty batch");
    Tape& t = ctx.tape;
    BatchLoss acc;
    for (const TrainItem& item : batch) {
        Rng mask_rng(Rng::derive(mask_seed, 0x17e30 + uint64_t(item.id)));
        Var enc_in;
        int len = 0;
        switch (item.stream) {
            case Stream::Asr:
            case Stream::Ast: {
                Var latents = model.subsample(ctx, item.features);
                len = latents.val().rows();
                if (src_mask_ratio > 0.0) {
                    MaskVector m = sample_span_mask(len, src_mask_ratio, src_max_span, mask_rng);
                    latents = t.replace_rows(
                        latents, model.use(ctx, model.params().get("enc.mask_emb")), m.bits);
                }
                enc_in = model.embed_speech(ctx, latents, item.src_lang);
                break;
            }
            case Stream::Mt: {
                len = int(item.src_text.size());
                std::vector<int> src_ids = item.src_text;
                if (src_mask_ratio > 0.0) {
                    MaskVector m = sample_span_mask(len, src_mask_ratio, src_max_span, mask_rng);
                    src_ids = corrupt_text(src_ids, m, model.config().text_vocab_size, mask_rng);
                }
                enc_in = model.embed_tokens(ctx, src_ids, item.src_lang, Modality::Text);
                break;
            }
            default:
                throw InvalidInput("seq2seq_objective: only paired streams allowed");
        }
        if (item.tgt_text.empty()) throw InvalidInput("seq2seq_objective: empty target");
        Var enc_states = model.encode(ctx, enc_in, len);

        std::vector<int> dec_in = bos_prefixed(item.tgt_text);
        if (noise_table && noise_ratio > 0.0) {
            dec_in = apply_decoder_noise(dec_in, *noise_table, noise_ratio, noise_rng);
        }
        std::vector<int> dec_targets = item.tgt_text;
        dec_targets.push_back(EOS);
        // decoder input ids may be noised, the forced prefix targets are not
        Var dec_hidden = model.decode_hidden(ctx, dec_in, item.tgt_lang, Modality::Text,
                                             enc_states, len);
        Var dec_sum = t.cross_entropy_sum(model.decoder_logits(ctx, dec_hidden), dec_targets);
        acc.add(LossPiece{std::string("s2s_") + stream_name(item.stream), 1.0, dec_sum,
                          int(dec_targets.size())});
    }
    // disabled pre-training terms stay in the log as exact zeros
    for (const char* name : {"enc_mlm", "align_enc", "align_dec_x", "align_dec_y", "ctc"}) {
        acc.add(LossPiece{name, 1.0, Var{}, 0});
    }
    ObjectiveResult out;
    out.total = acc.total(ctx.tape);
    out.report = acc.report();
    return out;
}

}  // namespace duet
