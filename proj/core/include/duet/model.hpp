#pragma once

#include "duet/tape.hpp"
#include "duet/tokenization.hpp"

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace duet {

struct ModelConfig {
    int d_model = 64;
    int n_enc_layers = 4;
    int n_dec_layers = 2;
    int n_heads = 4;
    int ffn_dim = 128;
    int conv_kernel = 5;
    int subsample_channels = 8;
    int text_vocab_size = 16;       // non-reserved symbols
    int speech_codebook_size = 64;  // K
    int n_languages = 2;
    double dropout = 0.1;      // decoder sublayers
    double enc_dropout = 0.0;  // conformer sublayers
    int max_target_len = 256;

    OutputSpace output_space() const {
        return OutputSpace{text_vocab_size, speech_codebook_size};
    }
    void validate() const;
    uint64_t digest() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& js);
};

enum class Modality : int { Speech = 0, Text = 1 };

// One named parameter. encoder_side tags the theta_e / theta_d partition.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool encoder_side = true;
};

class ParamStore {
public:
    Param& create(const std::string& name, std::vector<int> shape, bool encoder_side);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const { return by_name_.count(name) > 0; }

    std::vector<Param*>& all() { return order_; }
    const std::vector<Param*>& all() const { return order_; }

    size_t count_scalars(bool encoder_side) const;
    size_t count_scalars() const;
    void zero_grads();
    // Rounds every value through f32; called right before checkpointing so a
    // resumed run continues from exactly the state on disk.
    void quantize_f32();

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::vector<Param*> order_;
    std::unordered_map<std::string, Param*> by_name_;
};

// Plain-tensor snapshot of the CNN subsampler + projection. The tokenizer
// feature path runs through a frozen copy of the initial subsampler so the
// quantized targets stay fixed while the live CNN trains.
struct FrozenSubsampler {
    ModelConfig cfg;
    std::map<std::string, Tensor> weights;

    Tensor run(const Tensor& features) const;
};

constexpr const char* kSubsamplerParams[] = {"enc.sub.conv1.w", "enc.sub.conv1.b",
                                             "enc.sub.conv2.w", "enc.sub.conv2.b",
                                             "enc.sub.proj.w",  "enc.sub.proj.b"};

// Sinusoidal position rows [len x d] starting at `offset`.
Tensor sinusoidal_positions(int len, int d, int offset = 0);
// Additive masks: 0 where allowed, -1e30 where blocked.
Tensor causal_mask(int n);
Tensor key_pad_mask(int query_rows, int key_cols, int valid_keys);

class Model {
public:
    explicit Model(ModelConfig cfg);

    void init_params(uint64_t seed);
    ModelConfig& config() { return cfg_; }
    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    FrozenSubsampler snapshot_subsampler() const;

    // Per-step evaluation context: one tape, one dropout stream.
    struct Ctx {
        Tape& tape;
        Rng& rng;
        bool train = false;
        std::unordered_map<Param*, Var> cache;
    };
    Var use(Ctx& ctx, Param& p);

    static int subsampled_len(int t_len) { return (((t_len + 1) / 2) + 1) / 2; }

    // T x 80 log-mel -> N x d_model latents (conv block + linear projection).
    Var subsample(Ctx& ctx, const Tensor& features);

    // Input assembly: content + positional + language + modality embeddings.
    Var embed_speech(Ctx& ctx, Var latents, int lang, int pos_offset = 0);
    Var embed_tokens(Ctx& ctx, const std::vector<int>& ids, int lang, Modality mod,
                     int pos_offset = 0);

    // Conformer stack. Rows at positions >= valid_len are padding: they never
    // attend, contribute to convolution windows, or receive loss.
    Var encode(Ctx& ctx, Var x, int valid_len);

    // Teacher-forced decoder over the whole prefix; returns L x d hidden states.
    // prefix[0] must be BOS; length is capped by max_target_len.
    Var decode_hidden(Ctx& ctx, const std::vector<int>& prefix, int tgt_lang,
                      Modality tgt_mod, Var enc_states, int enc_valid_len);

    Var decoder_logits(Ctx& ctx, Var dec_hidden);    // L x (5 + V + K)
    Var encoder_mlm_logits(Ctx& ctx, Var enc_states);  // len x (5 + V + K)
    Var ctc_head_logits(Ctx& ctx, Var enc_states);     // len x (5 + V + 1)

    // decode_hidden + decoder_logits in one call.
    Var decode_logits(Ctx& ctx, const std::vector<int>& prefix, int tgt_lang,
                      Modality tgt_mod, Var enc_states, int enc_valid_len);

private:
    ModelConfig cfg_;
    ParamStore params_;

    Var attention(Ctx& ctx, Var q_in, Var kv_in, const std::string& prefix,
                  const Tensor& score_mask);
    Var conformer_layer(Ctx& ctx, Var x, int layer, int valid_len);
    Var decoder_layer(Ctx& ctx, Var x, int layer, Var enc_states, const Tensor& cross_mask);
    Var ffn(Ctx& ctx, Var x, const std::string& prefix, bool half_step, bool use_swish,
            double drop);
};

// Checkpoint: "MU2K", u64 config digest, u64 step, named f32 blobs. `extra`
// carries optimizer state and the frozen tokenizer snapshot.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore& params, uint64_t step,
                     const std::map<std::string, Tensor>& extra = {});

struct LoadedCheckpoint {
    uint64_t step = 0;
    std::map<std::string, Tensor> blobs;  // params and extras together
};

// Verifies the stored digest against cfg before reading blobs.
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& cfg);
// Reads only the header (digest + step) without validating against a config.
std::pair<uint64_t, uint64_t> read_checkpoint_header(const std::string& path);

// Copies parameter blobs into the store; throws on missing or unknown names.
void assign_params(ParamStore& params, const std::map<std::string, Tensor>& blobs);

}  // namespace duet
