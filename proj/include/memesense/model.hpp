#pragma once

// Word-level decoder-only transformer with image-slot conditioning and
// per-layer additive steering vectors.
//
// Design notes:
//  * All parameters are doubles constrained to be exactly f32-representable
//    (initialization draws are rounded, optimizer steps re-round), so
//    checkpoints written as .f32 round-trip bit-exactly while activations
//    and gradients still enjoy double precision.
//  * The forward pass caches every intermediate needed by the manual
//    backward pass; no autodiff library is involved.
//  * Generation recomputes the full prefix each step (no KV cache): prompt
//    length then dominates runtime, which keeps latency measurements an
//    honest function of demonstration count.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "memesense/corpus.hpp"

namespace memesense::model {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

// Fixed special-token ids, then "params:" / "intervention:" markers, then the
// fifteen category names in canonical order, then the training split's
// intervention vocabulary in sorted order. Unknown words map to [UNK].
class Tokenizer {
public:
    static Tokenizer build(const corpus::Corpus& corpus);
    static Tokenizer from_vocab(std::vector<std::string> tokens);

    int pad_id() const { return 0; }
    int unk_id() const { return 1; }
    int bos_id() const { return 2; }
    int eos_id() const { return 3; }
    int img_id() const { return 4; }
    int sep_id() const { return 5; }
    int params_id() const { return 6; }
    int intervention_id() const { return 7; }
    int category_id(corpus::Param p) const { return 8 + static_cast<int>(p); }

    std::size_t size() const { return id_to_token_.size(); }
    const std::string& token(int id) const;
    int word_id(const std::string& word) const;  // [UNK] when absent

    // Whitespace-split word sequence; every word mapped via word_id.
    std::vector<int> words(const std::string& text) const;

    // Inverse of words(): joins non-special tokens with single spaces,
    // stopping at [EOS] and skipping [PAD]/[UNK] markers verbatim.
    std::string decode(const std::vector<int>& ids) const;

    const std::vector<std::string>& vocab() const { return id_to_token_; }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// ---------------------------------------------------------------------------
// Prompt encoding
// ---------------------------------------------------------------------------

struct DemoInput {
    std::vector<float> image_features;
    std::vector<corpus::Param> commonsense;
    std::string intervention;
};

// Token layout, one block per demonstration then the anchor block:
//   demo:   [IMG]*P  params:  <cat>*  intervention:  <words>  [SEP]
//   anchor: [IMG]*P  (params: <cat>*)?  intervention:  <response words> [EOS]
// The params sub-block of the anchor is omitted when no commonsense is
// supplied. Image positions keep the [IMG] token id but their embeddings are
// replaced by a learned projection of the block's image features.
struct PromptEncoding {
    std::vector<int> tokens;
    std::vector<std::size_t> image_starts;          // ascending block starts
    std::vector<std::vector<float>> image_feats;    // parallel to image_starts
    std::size_t response_start = 0;  // index of the first response token
};

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t vocab_size = 0;  // filled from the tokenizer
    std::size_t max_seq = 256;
    std::size_t d_img = 16;
    std::size_t img_prefix_len = 2;
    std::uint64_t seed = 0;

    std::size_t d_head() const { return d_model / n_heads; }
};

// response_text may be empty: the encoding then ends right after the anchor's
// "intervention:" marker and response_start == tokens.size(). Throws when the
// full sequence would exceed config.max_seq, naming the required length.
PromptEncoding encode_prompt(const Tokenizer& tok, const ModelConfig& config,
                             const std::vector<float>& anchor_features,
                             const std::vector<corpus::Param>& anchor_commonsense,
                             const std::vector<DemoInput>& demos,
                             const std::string& response_text);

// Positions whose next-token predictions are scored by any loss:
// response_start-1 .. T-2 (each predicts the response token to its right).
std::vector<std::size_t> loss_positions(const PromptEncoding& enc);

// ---------------------------------------------------------------------------
// Steering vectors (consumed by the forward pass; trained elsewhere)
// ---------------------------------------------------------------------------

struct LayerShifts {
    std::vector<double> csv;    // n_layers * d_model, row-major by layer
    std::vector<double> alpha;  // n_layers

    std::size_t n_layers() const { return alpha.size(); }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LayerParams {
    std::vector<double> ln1_g, ln1_b;
    std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
    std::vector<double> ln2_g, ln2_b;
    std::vector<double> w1, b1, w2, b2;
};

struct Params {
    std::vector<double> tok_emb;  // vocab * d
    std::vector<double> pos_emb;  // max_seq * d
    std::vector<double> img_w;    // (img_prefix_len * d) * d_img
    std::vector<double> img_b;    // img_prefix_len * d
    std::vector<LayerParams> layers;
    std::vector<double> lnf_g, lnf_b;  // d
    std::vector<double> head;          // vocab * d (untied)

    // Canonical tensor enumeration used by initialization, the optimizer,
    // checkpoints, and gradient checks. Visits (name, vector&) pairs in a
    // fixed order.
    template <typename Fn>
    void for_each(Fn&& fn) {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        fn("img_w", img_w);
        fn("img_b", img_b);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            auto& L = layers[l];
            fn(p + "ln1_g", L.ln1_g);
            fn(p + "ln1_b", L.ln1_b);
            fn(p + "wq", L.wq);
            fn(p + "bq", L.bq);
            fn(p + "wk", L.wk);
            fn(p + "bk", L.bk);
            fn(p + "wv", L.wv);
            fn(p + "bv", L.bv);
            fn(p + "wo", L.wo);
            fn(p + "bo", L.bo);
            fn(p + "ln2_g", L.ln2_g);
            fn(p + "ln2_b", L.ln2_b);
            fn(p + "w1", L.w1);
            fn(p + "b1", L.b1);
            fn(p + "w2", L.w2);
            fn(p + "b2", L.b2);
        }
        fn("lnf_g", lnf_g);
        fn("lnf_b", lnf_b);
        fn("head", head);
    }

    template <typename Fn>
    void for_each(Fn&& fn) const {
        const_cast<Params*>(this)->for_each(
            [&](const std::string& name, std::vector<double>& v) {
                fn(name, static_cast<const std::vector<double>&>(v));
            });
    }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

// Per-sequence activation caches captured by forward() for backward().
struct Activations {
    std::size_t T = 0;
    std::vector<double> x0;  // T*d, embeddings (token/image + positional)
    struct LayerCache {
        std::vector<double> in;         // T*d, layer input
        std::vector<double> ln1;        // T*d
        std::vector<double> ln1_mu, ln1_rstd;  // T
        std::vector<double> q, k, v;    // T*d
        std::vector<double> probs;      // heads*T*T, attention rows
        std::vector<double> att;        // T*d, pre-wo mixed values
        std::vector<double> resid1;     // T*d
        std::vector<double> ln2;        // T*d
        std::vector<double> ln2_mu, ln2_rstd;  // T
        std::vector<double> pre;        // T*4d, MLP pre-activation
        std::vector<double> gelu;       // T*4d
        std::vector<double> out;        // T*d, post-shift layer output
    };
    std::vector<LayerCache> layers;
    std::vector<double> lnf;  // T*d
    std::vector<double> lnf_mu, lnf_rstd;  // T
};

struct ForwardResult {
    std::vector<double> logits;  // T * vocab
    Activations acts;
};

class Model {
public:
    Model() = default;
    Model(ModelConfig config, Tokenizer tokenizer);  // random init from seed

    const ModelConfig& config() const { return config_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    Params& params() { return params_; }
    const Params& params() const { return params_; }

    // shifts == nullptr runs the unmodified model; otherwise shifts->csv is
    // added, scaled by shifts->alpha, to every position after every layer.
    ForwardResult forward(const PromptEncoding& enc,
                          const LayerShifts* shifts = nullptr) const;

    // dlogits: T*vocab upstream gradient. Accumulates parameter gradients
    // into param_grads (skipped entirely when nullptr) and steering-vector
    // gradients into shift_grads (skipped when nullptr; requires shifts).
    void backward(const PromptEncoding& enc, const ForwardResult& fwd,
                  const std::vector<double>& dlogits,
                  const LayerShifts* shifts, Params* param_grads,
                  LayerShifts* shift_grads) const;

    // Greedy decode from the encoding's response_start; stops at [EOS],
    // max_new tokens, or the positional-embedding horizon. Ties break toward
    // the smaller token id. Returns generated ids without the [EOS].
    std::vector<int> generate(const PromptEncoding& enc, std::size_t max_new,
                              const LayerShifts* shifts = nullptr) const;

    // Hidden state at position enc.response_start-1 after layer `layer`'s
    // shift injection; layer is 1-based in [1, n_layers].
    std::vector<double> first_token_hidden(const PromptEncoding& enc,
                                           std::size_t layer,
                                           const LayerShifts* shifts) const;

    // Row-wise softmax of logits restricted to loss_positions(enc); rows are
    // returned in position order, each of vocab_size entries.
    std::vector<std::vector<double>> response_distributions(
        const PromptEncoding& enc, const LayerShifts* shifts = nullptr) const;

    void save(const std::string& dir) const;
    static Model load(const std::string& dir);

    // Zero-filled gradient buffers matching this model's parameter shapes.
    Params zero_like() const;

private:
    ModelConfig config_;
    Tokenizer tokenizer_;
    Params params_;
};

// ---------------------------------------------------------------------------
// Training (base model; steering vectors stay untouched/absent here)
// ---------------------------------------------------------------------------

struct LmTrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 4;
    double learning_rate = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 0;
};

struct LmTrainReport {
    std::vector<double> epoch_loss;  // mean per-token NLL per epoch
};

// Mean next-token NLL restricted to loss_positions() of each encoding.
double lm_loss(const Model& model, const PromptEncoding& enc);

// Adam on all parameters; sequences are visited in a seed-shuffled order
// re-drawn each epoch; every updated value is re-rounded to f32 precision.
LmTrainReport train_lm(Model& model, const std::vector<PromptEncoding>& data,
                       const LmTrainConfig& config);

// ---------------------------------------------------------------------------
// Numeric helpers shared by the trainers
// ---------------------------------------------------------------------------

// In-place row softmax (max-subtracted, double accumulation).
void softmax_row(double* row, std::size_t n);

double gelu(double x);
double gelu_grad(double x);

}  // namespace memesense::model
