#include "duet/model.hpp"

#include "duet/binio.hpp"
#include "duet/common.hpp"
#include "duet/rng.hpp"

#include <json.hpp>

#include <cassert>
#include <cmath>
#include <fstream>

namespace duet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (d_model < 1 || n_enc_layers < 1 || n_dec_layers < 1 || n_heads < 1 || ffn_dim < 1 ||
        conv_kernel < 1 || subsample_channels < 1 || text_vocab_size < 1 ||
        speech_codebook_size < 2 || n_languages < 1 || max_target_len < 2) {
        throw InvalidInput("ModelConfig: all sizes must be >= 1 (codebook >= 2)");
    }
    if (d_model % n_heads != 0) {
        throw InvalidInput("ModelConfig: d_model must be divisible by n_heads");
    }
    if (conv_kernel % 2 == 0) throw InvalidInput("ModelConfig: conv_kernel must be odd");
    if (dropout < 0.0 || dropout >= 1.0 || enc_dropout < 0.0 || enc_dropout >= 1.0) {
        throw InvalidInput("ModelConfig: dropout must be in [0, 1)");
    }
}

std::string ModelConfig::to_json() const {
    json js{{"d_model", d_model},
            {"n_enc_layers", n_enc_layers},
            {"n_dec_layers", n_dec_layers},
            {"n_heads", n_heads},
            {"ffn_dim", ffn_dim},
            {"conv_kernel", conv_kernel},
            {"subsample_channels", subsample_channels},
            {"text_vocab_size", text_vocab_size},
            {"speech_codebook_size", speech_codebook_size},
            {"n_languages", n_languages},
            {"dropout", dropout},
            {"enc_dropout", enc_dropout},
            {"max_target_len", max_target_len}};
    return js.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json js = json::parse(text);
    ModelConfig cfg;
    cfg.d_model = js.at("d_model").get<int>();
    cfg.n_enc_layers = js.at("n_enc_layers").get<int>();
    cfg.n_dec_layers = js.at("n_dec_layers").get<int>();
    cfg.n_heads = js.at("n_heads").get<int>();
    cfg.ffn_dim = js.at("ffn_dim").get<int>();
    cfg.conv_kernel = js.at("conv_kernel").get<int>();
    cfg.subsample_channels = js.at("subsample_channels").get<int>();
    cfg.text_vocab_size = js.at("text_vocab_size").get<int>();
    cfg.speech_codebook_size = js.at("speech_codebook_size").get<int>();
    cfg.n_languages = js.at("n_languages").get<int>();
    cfg.dropout = js.at("dropout").get<double>();
    cfg.enc_dropout = js.at("enc_dropout").get<double>();
    cfg.max_target_len = js.at("max_target_len").get<int>();
    return cfg;
}

uint64_t ModelConfig::digest() const { return fnv1a64(to_json()); }

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Param& ParamStore::create(const std::string& name, std::vector<int> shape,
                          bool encoder_side) {
    if (by_name_.count(name)) throw InvalidInput("ParamStore: duplicate " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Tensor(std::move(shape));
    p->grad = Tensor(p->value.shape);
    p->encoder_side = encoder_side;
    Param& ref = *p;
    by_name_[name] = p.get();
    order_.push_back(p.get());
    params_.push_back(std::move(p));
    return ref;
}

Param& ParamStore::get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw InvalidInput("ParamStore: unknown param " + name);
    return *it->second;
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw InvalidInput("ParamStore: unknown param " + name);
    return *it->second;
}

size_t ParamStore::count_scalars(bool encoder_side) const {
    size_t n = 0;
    for (const Param* p : order_) {
        if (p->encoder_side == encoder_side) n += p->value.size();
    }
    return n;
}

size_t ParamStore::count_scalars() const {
    return count_scalars(true) + count_scalars(false);
}

void ParamStore::zero_grads() {
    for (Param* p : order_) p->grad.fill(0.0);
}

void ParamStore::quantize_f32() {
    for (Param* p : order_) {
        for (auto& x : p->value.v) x = double(float(x));
    }
}

// ---------------------------------------------------------------------------
// Positional encodings and masks
// ---------------------------------------------------------------------------

Tensor sinusoidal_positions(int len, int d, int offset) {
    Tensor pe(len, d);
    for (int p = 0; p < len; ++p) {
        double pos = double(p + offset);
        for (int i = 0; i < d; i += 2) {
            double denom = std::pow(10000.0, double(i) / double(d));
            pe.at(p, i) = std::sin(pos / denom);
            if (i + 1 < d) pe.at(p, i + 1) = std::cos(pos / denom);
        }
    }
    return pe;
}

Tensor causal_mask(int n) {
    Tensor m(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) m.at(i, j) = -1.0e30;
    }
    return m;
}

Tensor key_pad_mask(int query_rows, int key_cols, int valid_keys) {
    Tensor m(query_rows, key_cols);
    for (int i = 0; i < query_rows; ++i) {
        for (int j = valid_keys; j < key_cols; ++j) m.at(i, j) = -1.0e30;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

std::string lname(const char* side, int layer, const char* rest) {
    return std::string(side) + ".l" + std::to_string(layer) + "." + rest;
}

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int d = cfg_.d_model;
    const int c = cfg_.subsample_channels;
    const int n_cls = cfg_.output_space().n_classes();
    const int ctc_cls = cfg_.output_space().ctc_classes();

    params_.create("enc.sub.conv1.w", {c, 3, 3, 1}, true);
    params_.create("enc.sub.conv1.b", {1, c}, true);
    params_.create("enc.sub.conv2.w", {c, 3, 3, c}, true);
    params_.create("enc.sub.conv2.b", {1, c}, true);
    params_.create("enc.sub.proj.w", {20 * c, d}, true);
    params_.create("enc.sub.proj.b", {1, d}, true);

    params_.create("enc.emb.token", {n_cls, d}, true);
    params_.create("enc.emb.lang", {cfg_.n_languages, d}, true);
    params_.create("enc.emb.modality", {2, d}, true);
    params_.create("enc.mask_emb", {1, d}, true);

    auto make_ln = [&](const std::string& p, bool enc) {
        params_.create(p + ".g", {1, d}, enc);
        params_.create(p + ".b", {1, d}, enc);
    };
    auto make_ffn = [&](const std::string& p, bool enc) {
        make_ln(p + ".ln", enc);
        params_.create(p + ".w1", {d, cfg_.ffn_dim}, enc);
        params_.create(p + ".b1", {1, cfg_.ffn_dim}, enc);
        params_.create(p + ".w2", {cfg_.ffn_dim, d}, enc);
        params_.create(p + ".b2", {1, d}, enc);
    };
    auto make_attn = [&](const std::string& p, bool enc) {
        make_ln(p + ".ln", enc);
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            params_.create(p + "." + w, {d, d}, enc);
        }
        for (const char* b : {"bq", "bk", "bv", "bo"}) {
            params_.create(p + "." + b, {1, d}, enc);
        }
    };

    for (int i = 0; i < cfg_.n_enc_layers; ++i) {
        make_ffn(lname("enc", i, "ffn1"), true);
        make_attn(lname("enc", i, "attn"), true);
        make_ln(lname("enc", i, "conv.ln"), true);
        params_.create(lname("enc", i, "conv.pw1.w"), {d, 2 * d}, true);
        params_.create(lname("enc", i, "conv.pw1.b"), {1, 2 * d}, true);
        params_.create(lname("enc", i, "conv.dw.w"), {cfg_.conv_kernel, d}, true);
        params_.create(lname("enc", i, "conv.dw.b"), {1, d}, true);
        make_ln(lname("enc", i, "conv.ln2"), true);
        params_.create(lname("enc", i, "conv.pw2.w"), {d, d}, true);
        params_.create(lname("enc", i, "conv.pw2.b"), {1, d}, true);
        make_ffn(lname("enc", i, "ffn2"), true);
        make_ln(lname("enc", i, "out_ln"), true);
    }

    params_.create("enc.mlm.w", {d, n_cls}, true);
    params_.create("enc.mlm.b", {1, n_cls}, true);
    params_.create("enc.ctc.w", {d, ctc_cls}, true);
    params_.create("enc.ctc.b", {1, ctc_cls}, true);

    params_.create("dec.emb.token", {n_cls, d}, false);
    params_.create("dec.emb.lang", {cfg_.n_languages, d}, false);
    params_.create("dec.emb.modality", {2, d}, false);

    for (int i = 0; i < cfg_.n_dec_layers; ++i) {
        make_attn(lname("dec", i, "self"), false);
        make_attn(lname("dec", i, "cross"), false);
        make_ffn(lname("dec", i, "ffn"), false);
    }
    make_ln("dec.final_ln", false);
    params_.create("dec.lm.w", {d, n_cls}, false);
    params_.create("dec.lm.b", {1, n_cls}, false);
}

void Model::init_params(uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x1417));
    for (Param* p : params_.all()) {
        const bool is_ln_gain = p->name.ends_with("ln.g") || p->name.ends_with(".g");
        const bool is_bias = p->name.ends_with(".b") || p->name.ends_with(".b1") ||
                             p->name.ends_with(".b2") || p->name.ends_with(".bq") ||
                             p->name.ends_with(".bk") || p->name.ends_with(".bv") ||
                             p->name.ends_with(".bo");
        if (is_ln_gain) {
            p->value.fill(1.0);
        } else if (is_bias) {
            p->value.fill(0.0);
        } else {
            for (auto& x : p->value.v) x = rng.truncated_normal(0.02);
        }
    }
}

Var Model::use(Ctx& ctx, Param& p) {
    auto it = ctx.cache.find(&p);
    if (it != ctx.cache.end()) return it->second;
    Var v = ctx.tape.input(p.value, true);
    ctx.cache.emplace(&p, v);
    return v;
}

// ---------------------------------------------------------------------------
// Subsampler
// ---------------------------------------------------------------------------

namespace {

Var subsample_ops(Tape& t, const Tensor& features, Var c1w, Var c1b, Var c2w, Var c2b,
                  Var pw, Var pb) {
    if (features.rows() < 1) throw InvalidInput("subsample: empty features");
    if (features.cols() != 80) throw InvalidInput("subsample: expected 80 feature columns");
    Tensor img = features;
    img.shape = {features.rows(), 80, 1};
    Var x = t.constant(std::move(img));
    x = t.swish(t.conv2d_s2(x, c1w, c1b));
    x = t.swish(t.conv2d_s2(x, c2w, c2b));
    const int n = x.val().shape[0];
    const int flat = x.val().shape[1] * x.val().shape[2];
    x = t.reshape(x, {n, flat});
    return t.add_rowvec(t.matmul(x, pw), pb);
}

}  // namespace

Var Model::subsample(Ctx& ctx, const Tensor& features) {
    return subsample_ops(ctx.tape, features, use(ctx, params_.get("enc.sub.conv1.w")),
                         use(ctx, params_.get("enc.sub.conv1.b")),
                         use(ctx, params_.get("enc.sub.conv2.w")),
                         use(ctx, params_.get("enc.sub.conv2.b")),
                         use(ctx, params_.get("enc.sub.proj.w")),
                         use(ctx, params_.get("enc.sub.proj.b")));
}

FrozenSubsampler Model::snapshot_subsampler() const {
    FrozenSubsampler fs;
    fs.cfg = cfg_;
    for (const char* name : kSubsamplerParams) {
        fs.weights[name] = params_.get(name).value;
    }
    return fs;
}

Tensor FrozenSubsampler::run(const Tensor& features) const {
    Tape t;
    Var out = subsample_ops(t, features, t.constant(weights.at("enc.sub.conv1.w")),
                            t.constant(weights.at("enc.sub.conv1.b")),
                            t.constant(weights.at("enc.sub.conv2.w")),
                            t.constant(weights.at("enc.sub.conv2.b")),
                            t.constant(weights.at("enc.sub.proj.w")),
                            t.constant(weights.at("enc.sub.proj.b")));
    return out.val();
}

// ---------------------------------------------------------------------------
// Input assembly
// ---------------------------------------------------------------------------

Var Model::embed_speech(Ctx& ctx, Var latents, int lang, int pos_offset) {
    if (lang < 0 || lang >= cfg_.n_languages) throw InvalidInput("embed: unknown lang id");
    const int n = latents.val().rows();
    if (n < 1) throw InvalidInput("embed: zero-length sequence");
    Tape& t = ctx.tape;
    Var x = latents;
    Var lang_row = t.gather_rows(use(ctx, params_.get("enc.emb.lang")), {lang});
    Var mod_row = t.gather_rows(use(ctx, params_.get("enc.emb.modality")),
                                {int(Modality::Speech)});
    x = t.add_rowvec(x, lang_row);
    x = t.add_rowvec(x, mod_row);
    return t.add_const(x, sinusoidal_positions(n, cfg_.d_model, pos_offset));
}

Var Model::embed_tokens(Ctx& ctx, const std::vector<int>& ids, int lang, Modality mod,
                        int pos_offset) {
    if (lang < 0 || lang >= cfg_.n_languages) throw InvalidInput("embed: unknown lang id");
    if (ids.empty()) throw InvalidInput("embed: zero-length sequence");
    const int n_cls = cfg_.output_space().n_classes();
    for (int id : ids) {
        if (id < 0 || id >= n_cls) throw InvalidInput("embed: token id out of range");
    }
    Tape& t = ctx.tape;
    Var x = t.gather_rows(use(ctx, params_.get("enc.emb.token")), ids);
    x = t.scale(x, std::sqrt(double(cfg_.d_model)));
    x = t.add_rowvec(x, t.gather_rows(use(ctx, params_.get("enc.emb.lang")), {lang}));
    x = t.add_rowvec(x, t.gather_rows(use(ctx, params_.get("enc.emb.modality")),
                                      {int(mod)}));
    return t.add_const(x, sinusoidal_positions(int(ids.size()), cfg_.d_model, pos_offset));
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Var Model::ffn(Ctx& ctx, Var x, const std::string& prefix, bool half_step, bool use_swish,
               double drop) {
    Tape& t = ctx.tape;
    Var h = t.layer_norm(x, use(ctx, params_.get(prefix + ".ln.g")),
                         use(ctx, params_.get(prefix + ".ln.b")));
    h = t.add_rowvec(t.matmul(h, use(ctx, params_.get(prefix + ".w1"))),
                     use(ctx, params_.get(prefix + ".b1")));
    h = use_swish ? t.swish(h) : t.relu(h);
    h = t.add_rowvec(t.matmul(h, use(ctx, params_.get(prefix + ".w2"))),
                     use(ctx, params_.get(prefix + ".b2")));
    if (ctx.train && drop > 0.0) h = t.dropout(h, drop, ctx.rng);
    return half_step ? t.add_scaled(x, h, 0.5) : t.add(x, h);
}

Var Model::attention(Ctx& ctx, Var q_in, Var kv_in, const std::string& prefix,
                     const Tensor& score_mask) {
    Tape& t = ctx.tape;
    const int dh = cfg_.d_model / cfg_.n_heads;
    Var q = t.add_rowvec(t.matmul(q_in, use(ctx, params_.get(prefix + ".wq"))),
                         use(ctx, params_.get(prefix + ".bq")));
    Var k = t.add_rowvec(t.matmul(kv_in, use(ctx, params_.get(prefix + ".wk"))),
                         use(ctx, params_.get(prefix + ".bk")));
    Var v = t.add_rowvec(t.matmul(kv_in, use(ctx, params_.get(prefix + ".wv"))),
                         use(ctx, params_.get(prefix + ".bv")));
    std::vector<Var> heads;
    heads.reserve(size_t(cfg_.n_heads));
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));
    for (int h = 0; h < cfg_.n_heads; ++h) {
        Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
        scores = t.add_const(scores, score_mask);
        heads.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    Var cat = t.concat_cols(heads);
    return t.add_rowvec(t.matmul(cat, use(ctx, params_.get(prefix + ".wo"))),
                        use(ctx, params_.get(prefix + ".bo")));
}

Var Model::conformer_layer(Ctx& ctx, Var x, int layer, int valid_len) {
    Tape& t = ctx.tape;
    const int rows = x.val().rows();
    const double drop = cfg_.enc_dropout;

    x = ffn(ctx, x, lname("enc", layer, "ffn1"), true, true, drop);

    {
        Var h = t.layer_norm(x, use(ctx, params_.get(lname("enc", layer, "attn.ln.g"))),
                             use(ctx, params_.get(lname("enc", layer, "attn.ln.b"))));
        Var a = attention(ctx, h, h, lname("enc", layer, "attn"),
                          key_pad_mask(rows, rows, valid_len));
        if (ctx.train && drop > 0.0) a = t.dropout(a, drop, ctx.rng);
        x = t.add(x, a);
    }

    {
        Var h = t.layer_norm(x, use(ctx, params_.get(lname("enc", layer, "conv.ln.g"))),
                             use(ctx, params_.get(lname("enc", layer, "conv.ln.b"))));
        h = t.add_rowvec(t.matmul(h, use(ctx, params_.get(lname("enc", layer, "conv.pw1.w")))),
                         use(ctx, params_.get(lname("enc", layer, "conv.pw1.b"))));
        h = t.glu(h);
        if (valid_len < rows) {
            std::vector<double> keep(size_t(rows), 1.0);
            for (int i = valid_len; i < rows; ++i) keep[size_t(i)] = 0.0;
            h = t.mul_rowmask(h, keep);
        }
        h = t.depthwise_conv1d(h, use(ctx, params_.get(lname("enc", layer, "conv.dw.w"))),
                               use(ctx, params_.get(lname("enc", layer, "conv.dw.b"))));
        h = t.layer_norm(h, use(ctx, params_.get(lname("enc", layer, "conv.ln2.g"))),
                         use(ctx, params_.get(lname("enc", layer, "conv.ln2.b"))));
        h = t.swish(h);
        h = t.add_rowvec(t.matmul(h, use(ctx, params_.get(lname("enc", layer, "conv.pw2.w")))),
                         use(ctx, params_.get(lname("enc", layer, "conv.pw2.b"))));
        if (ctx.train && drop > 0.0) h = t.dropout(h, drop, ctx.rng);
        x = t.add(x, h);
    }

    x = ffn(ctx, x, lname("enc", layer, "ffn2"), true, true, drop);
    return t.layer_norm(x, use(ctx, params_.get(lname("enc", layer, "out_ln.g"))),
                        use(ctx, params_.get(lname("enc", layer, "out_ln.b"))));
}

Var Model::encode(Ctx& ctx, Var x, int valid_len) {
    if (valid_len < 1 || valid_len > x.val().rows()) {
        throw InvalidInput("encode: valid_len out of range");
    }
    for (int i = 0; i < cfg_.n_enc_layers; ++i) x = conformer_layer(ctx, x, i, valid_len);
    if (!x.val().all_finite()) throw NumericalError("encode: non-finite activation");
    return x;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Var Model::decoder_layer(Ctx& ctx, Var x, int layer, Var enc_states,
                         const Tensor& cross_mask) {
    Tape& t = ctx.tape;
    const double drop = cfg_.dropout;
    {
        Var h = t.layer_norm(x, use(ctx, params_.get(lname("dec", layer, "self.ln.g"))),
                             use(ctx, params_.get(lname("dec", layer, "self.ln.b"))));
        Var a = attention(ctx, h, h, lname("dec", layer, "self"),
                          causal_mask(x.val().rows()));
        if (ctx.train && drop > 0.0) a = t.dropout(a, drop, ctx.rng);
        x = t.add(x, a);
    }
    {
        Var h = t.layer_norm(x, use(ctx, params_.get(lname("dec", layer, "cross.ln.g"))),
                             use(ctx, params_.get(lname("dec", layer, "cross.ln.b"))));
        Var a = attention(ctx, h, enc_states, lname("dec", layer, "cross"), cross_mask);
        if (ctx.train && drop > 0.0) a = t.dropout(a, drop, ctx.rng);
        x = t.add(x, a);
    }
    return ffn(ctx, x, lname("dec", layer, "ffn"), false, true, drop);
}

Var Model::decode_hidden(Ctx& ctx, const std::vector<int>& prefix, int tgt_lang,
                         Modality tgt_mod, Var enc_states, int enc_valid_len) {
    if (prefix.empty() || prefix[0] != BOS) {
        throw InvalidInput("decode: prefix must start with BOS");
    }
    if (int(prefix.size()) > cfg_.max_target_len) {
        throw InvalidInput("decode: prefix longer than max_target_len");
    }
    if (tgt_lang < 0 || tgt_lang >= cfg_.n_languages) {
        throw InvalidInput("decode: unknown lang id");
    }
    const int n_cls = cfg_.output_space().n_classes();
    for (int id : prefix) {
        if (id < 0 || id >= n_cls) throw InvalidInput("decode: token id out of range");
    }
    Tape& t = ctx.tape;
    Var x = t.gather_rows(use(ctx, params_.get("dec.emb.token")), prefix);
    x = t.scale(x, std::sqrt(double(cfg_.d_model)));
    x = t.add_rowvec(x, t.gather_rows(use(ctx, params_.get("dec.emb.lang")), {tgt_lang}));
    x = t.add_rowvec(x,
                     t.gather_rows(use(ctx, params_.get("dec.emb.modality")), {int(tgt_mod)}));
    x = t.add_const(x, sinusoidal_positions(int(prefix.size()), cfg_.d_model, 0));

    Tensor cross = key_pad_mask(int(prefix.size()), enc_states.val().rows(), enc_valid_len);
    for (int i = 0; i < cfg_.n_dec_layers; ++i) {
        x = decoder_layer(ctx, x, i, enc_states, cross);
    }
    x = t.layer_norm(x, use(ctx, params_.get("dec.final_ln.g")),
                     use(ctx, params_.get("dec.final_ln.b")));
    if (!x.val().all_finite()) throw NumericalError("decode: non-finite activation");
    return x;
}

Var Model::decoder_logits(Ctx& ctx, Var dec_hidden) {
    return ctx.tape.add_rowvec(ctx.tape.matmul(dec_hidden, use(ctx, params_.get("dec.lm.w"))),
                               use(ctx, params_.get("dec.lm.b")));
}

Var Model::encoder_mlm_logits(Ctx& ctx, Var enc_states) {
    return ctx.tape.add_rowvec(
        ctx.tape.matmul(enc_states, use(ctx, params_.get("enc.mlm.w"))),
        use(ctx, params_.get("enc.mlm.b")));
}

Var Model::ctc_head_logits(Ctx& ctx, Var enc_states) {
    return ctx.tape.add_rowvec(ctx.tape.matmul(enc_states, use(ctx, params_.get("enc.ctc.w"))),
                               use(ctx, params_.get("enc.ctc.b")));
}

Var Model::decode_logits(Ctx& ctx, const std::vector<int>& prefix, int tgt_lang,
                         Modality tgt_mod, Var enc_states, int enc_valid_len) {
    return decoder_logits(
        ctx, decode_hidden(ctx, prefix, tgt_lang, tgt_mod, enc_states, enc_valid_len));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_blob(std::ostream& os, const std::string& name, const Tensor& t) {
    write_u32(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_u32(os, uint32_t(t.shape.size()));
    for (int dim : t.shape) write_u32(os, uint32_t(dim));
    for (double x : t.v) write_f32(os, float(x));
}

std::pair<std::string, Tensor> read_blob(std::istream& is) {
    const uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), std::streamsize(name_len));
    const uint32_t ndim = read_u32(is);
    std::vector<int> shape(ndim);
    for (auto& dim : shape) dim = int(read_u32(is));
    Tensor t(shape);
    for (auto& x : t.v) x = double(read_f32(is));
    return {name, std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore& params, uint64_t step,
                     const std::map<std::string, Tensor>& extra) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("save_checkpoint: cannot open " + path);
    write_magic(os, "MU2K");
    write_u64(os, cfg.digest());
    write_u64(os, step);
    write_u32(os, uint32_t(params.all().size() + extra.size()));
    for (const Param* p : params.all()) write_blob(os, p->name, p->value);
    for (const auto& [name, tensor] : extra) write_blob(os, name, tensor);
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& cfg) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("load_checkpoint: cannot open " + path);
    expect_magic(is, "MU2K", "checkpoint");
    const uint64_t digest = read_u64(is);
    if (digest != cfg.digest()) {
        throw InvalidInput("load_checkpoint: config digest mismatch");
    }
    LoadedCheckpoint ck;
    ck.step = read_u64(is);
    const uint32_t n = read_u32(is);
    for (uint32_t i = 0; i < n; ++i) {
        auto [name, tensor] = read_blob(is);
        ck.blobs.emplace(std::move(name), std::move(tensor));
    }
    if (!is) throw InvalidInput("load_checkpoint: truncated file");
    return ck;
}

std::pair<uint64_t, uint64_t> read_checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("read_checkpoint_header: cannot open " + path);
    expect_magic(is, "MU2K", "checkpoint");
    const uint64_t digest = read_u64(is);
    const uint64_t step = read_u64(is);
    return {digest, step};
}

void assign_params(ParamStore& params, const std::map<std::string, Tensor>& blobs) {
    for (Param* p : params.all()) {
        auto it = blobs.find(p->name);
        if (it == blobs.end()) {
            throw InvalidInput("assign_params: missing blob " + p->name);
        }
        if (it->second.shape != p->value.shape) {
            throw InvalidInput("assign_params: shape mismatch for " + p->name);
        }
        p->value = it->second;
    }
}

}  // namespace duet
