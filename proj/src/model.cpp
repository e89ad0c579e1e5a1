#include "memesense/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "memesense/io.hpp"
#include "memesense/kernels.hpp"
#include "memesense/rng.hpp"

namespace memesense::model {

namespace {

constexpr double kLnEps = 1e-5;

// y = W*x + b with W (rows x cols) row-major; b may be null.
void matvec(const double* W, const double* x, const double* b, double* y,
            std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        y[i] = kernels::dot(W + i * cols, x, cols) + (b ? b[i] : 0.0);
    }
}

// dW += outer(dy, x); db += dy.
void grad_linear(const double* dy, const double* x, double* dW, double* db,
                 std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        if (dy[i] != 0.0) kernels::axpy(dy[i], x, dW + i * cols, cols);
        if (db) db[i] += dy[i];
    }
}

// dx += W^T * dy.
void backprop_input(const double* W, const double* dy, double* dx,
                    std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        if (dy[i] != 0.0) kernels::axpy(dy[i], W + i * cols, dx, cols);
    }
}

void ln_forward(const double* x, const double* g, const double* b, double* y,
                double& mu, double& rstd, std::size_t d) {
    mu = kernels::sum(x, d) / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double c = x[i] - mu;
        var += c * c;
    }
    var /= static_cast<double>(d);
    rstd = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t i = 0; i < d; ++i) {
        y[i] = g[i] * ((x[i] - mu) * rstd) + b[i];
    }
}

// dx += backprop; dg/db accumulated when non-null.
void ln_backward(const double* x, const double* g, double mu, double rstd,
                 const double* dy, double* dx, double* dg, double* db,
                 std::size_t d) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double xhat = (x[i] - mu) * rstd;
        const double dxhat = dy[i] * g[i];
        m1 += dxhat;
        m2 += dxhat * xhat;
        if (dg) dg[i] += dy[i] * xhat;
        if (db) db[i] += dy[i];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double xhat = (x[i] - mu) * rstd;
        const double dxhat = dy[i] * g[i];
        dx[i] += rstd * (dxhat - m1 - xhat * m2);
    }
}

std::vector<double> init_tensor(std::size_t n, double sigma,
                                std::uint64_t seed, const std::string& name) {
    std::vector<double> v(n);
    rng::Rng gen(rng::derive(seed, "init", name));
    for (auto& x : v) x = io::round_f32(sigma * gen.normal());
    return v;
}

int argmax_row(const double* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
        if (row[i] > row[best]) best = i;  // ties keep the smaller id
    }
    return static_cast<int>(best);
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
           x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

void softmax_row(double* row, std::size_t n) {
    const double mx = kernels::max(row, n);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        denom += row[i];
    }
    const double inv = 1.0 / denom;
    for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Tokenizer Tokenizer::build(const corpus::Corpus& c) {
    std::vector<std::string> vocab = {"[PAD]", "[UNK]", "[BOS]", "[EOS]",
                                      "[IMG]", "[SEP]", "params:",
                                      "intervention:"};
    for (auto p : corpus::all_params()) vocab.push_back(corpus::name(p));

    // Word inventory comes from the training split only; unseen evaluation
    // words degrade to [UNK] instead of growing the embedding table.
    std::set<std::string> words;
    for (const auto* r : c.train_records()) {
        std::istringstream in(r->intervention);
        std::string w;
        while (in >> w) words.insert(w);
        if (r->overlay_text) {
            std::istringstream in2(*r->overlay_text);
            while (in2 >> w) words.insert(w);
        }
    }
    const std::set<std::string> reserved(vocab.begin(), vocab.end());
    for (const auto& w : words) {
        if (!reserved.count(w)) vocab.push_back(w);
    }
    return from_vocab(std::move(vocab));
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> tokens) {
    Tokenizer t;
    t.id_to_token_ = std::move(tokens);
    for (std::size_t i = 0; i < t.id_to_token_.size(); ++i) {
        if (!t.token_to_id_.emplace(t.id_to_token_[i], static_cast<int>(i))
                 .second) {
            throw std::runtime_error("tokenizer vocabulary repeats token '" +
                                     t.id_to_token_[i] + "'");
        }
    }
    if (t.id_to_token_.size() < 8 + corpus::kNumParams) {
        throw std::runtime_error(
            "tokenizer vocabulary is missing reserved entries");
    }
    return t;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw std::runtime_error("token id " + std::to_string(id) +
                                 " outside vocabulary of size " +
                                 std::to_string(id_to_token_.size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

int Tokenizer::word_id(const std::string& word) const {
    auto it = token_to_id_.find(word);
    return it == token_to_id_.end() ? unk_id() : it->second;
}

std::vector<int> Tokenizer::words(const std::string& text) const {
    std::vector<int> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(word_id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == eos_id()) break;
        if (id == pad_id()) continue;
        if (!out.empty()) out += ' ';
        out += token(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt encoding
// ---------------------------------------------------------------------------

PromptEncoding encode_prompt(const Tokenizer& tok, const ModelConfig& config,
                             const std::vector<float>& anchor_features,
                             const std::vector<corpus::Param>& anchor_commonsense,
                             const std::vector<DemoInput>& demos,
                             const std::string& response_text) {
    PromptEncoding enc;
    const std::size_t P = config.img_prefix_len;

    auto add_image_block = [&](const std::vector<float>& feats) {
        if (feats.size() != config.d_img) {
            throw std::runtime_error(
                "image features have " + std::to_string(feats.size()) +
                " dims; the model expects " + std::to_string(config.d_img));
        }
        enc.image_starts.push_back(enc.tokens.size());
        enc.image_feats.push_back(feats);
        for (std::size_t p = 0; p < P; ++p) enc.tokens.push_back(tok.img_id());
    };

    for (const auto& demo : demos) {
        add_image_block(demo.image_features);
        enc.tokens.push_back(tok.params_id());
        auto cats = demo.commonsense;
        std::sort(cats.begin(), cats.end());
        for (auto p : cats) enc.tokens.push_back(tok.category_id(p));
        enc.tokens.push_back(tok.intervention_id());
        for (int id : tok.words(demo.intervention)) enc.tokens.push_back(id);
        enc.tokens.push_back(tok.sep_id());
    }

    add_image_block(anchor_features);
    if (!anchor_commonsense.empty()) {
        enc.tokens.push_back(tok.params_id());
        auto cats = anchor_commonsense;
        std::sort(cats.begin(), cats.end());
        for (auto p : cats) enc.tokens.push_back(tok.category_id(p));
    }
    enc.tokens.push_back(tok.intervention_id());
    enc.response_start = enc.tokens.size();

    if (!response_text.empty()) {
        for (int id : tok.words(response_text)) enc.tokens.push_back(id);
        enc.tokens.push_back(tok.eos_id());
    }

    if (enc.tokens.size() > config.max_seq) {
        throw std::runtime_error(
            "sequence needs " + std::to_string(enc.tokens.size()) +
            " tokens but the positional horizon is " +
            std::to_string(config.max_seq));
    }
    return enc;
}

std::vector<std::size_t> loss_positions(const PromptEncoding& enc) {
    std::vector<std::size_t> out;
    if (enc.response_start == 0 || enc.response_start >= enc.tokens.size()) {
        return out;
    }
    for (std::size_t p = enc.response_start - 1; p + 1 < enc.tokens.size(); ++p) {
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig config, Tokenizer tokenizer)
    : config_(config), tokenizer_(std::move(tokenizer)) {
    config_.vocab_size = tokenizer_.size();
    if (config_.d_model % config_.n_heads != 0) {
        throw std::runtime_error("d_model " + std::to_string(config_.d_model) +
                                 " is not divisible by n_heads " +
                                 std::to_string(config_.n_heads));
    }
    const std::size_t d = config_.d_model, V = config_.vocab_size;
    const std::uint64_t s = config_.seed;
    constexpr double kSigma = 0.02;

    params_.tok_emb = init_tensor(V * d, kSigma, s, "tok_emb");
    params_.pos_emb = init_tensor(config_.max_seq * d, kSigma, s, "pos_emb");
    params_.img_w =
        init_tensor(config_.img_prefix_len * d * config_.d_img, kSigma, s,
                    "img_w");
    params_.img_b.assign(config_.img_prefix_len * d, 0.0);
    params_.layers.resize(config_.n_layers);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        auto& L = params_.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        L.ln1_g.assign(d, 1.0);
        L.ln1_b.assign(d, 0.0);
        L.wq = init_tensor(d * d, kSigma, s, p + "wq");
        L.bq.assign(d, 0.0);
        L.wk = init_tensor(d * d, kSigma, s, p + "wk");
        L.bk.assign(d, 0.0);
        L.wv = init_tensor(d * d, kSigma, s, p + "wv");
        L.bv.assign(d, 0.0);
        L.wo = init_tensor(d * d, kSigma, s, p + "wo");
        L.bo.assign(d, 0.0);
        L.ln2_g.assign(d, 1.0);
        L.ln2_b.assign(d, 0.0);
        L.w1 = init_tensor(4 * d * d, kSigma, s, p + "w1");
        L.b1.assign(4 * d, 0.0);
        L.w2 = init_tensor(d * 4 * d, kSigma, s, p + "w2");
        L.b2.assign(d, 0.0);
    }
    params_.lnf_g.assign(d, 1.0);
    params_.lnf_b.assign(d, 0.0);
    params_.head = init_tensor(V * d, kSigma, s, "head");
}

Params Model::zero_like() const {
    Params z = params_;
    z.for_each([](const std::string&, std::vector<double>& v) {
        std::fill(v.begin(), v.end(), 0.0);
    });
    return z;
}

ForwardResult Model::forward(const PromptEncoding& enc,
                             const LayerShifts* shifts) const {
    const std::size_t T = enc.tokens.size();
    const std::size_t d = config_.d_model;
    const std::size_t H = config_.n_heads;
    const std::size_t dh = config_.d_head();
    const std::size_t V = config_.vocab_size;
    if (T == 0) throw std::runtime_error("cannot run an empty sequence");
    if (T > config_.max_seq) {
        throw std::runtime_error(
            "sequence needs " + std::to_string(T) +
            " tokens but the positional horizon is " +
            std::to_string(config_.max_seq));
    }
    if (shifts && (shifts->n_layers() != config_.n_layers ||
                   shifts->csv.size() != config_.n_layers * d)) {
        throw std::runtime_error("steering vectors do not match the model: " +
                                 std::to_string(shifts->n_layers()) +
                                 " layers of " +
                                 std::to_string(shifts->csv.size() /
                                                std::max<std::size_t>(
                                                    1, shifts->n_layers())) +
                                 " dims");
    }

    ForwardResult out;
    auto& A = out.acts;
    A.T = T;
    A.x0.assign(T * d, 0.0);

    // Embeddings: token or image-slot projection, plus learned positions.
    std::vector<bool> is_image(T, false);
    for (std::size_t b = 0; b < enc.image_starts.size(); ++b) {
        const std::size_t s0 = enc.image_starts[b];
        const auto& feats = enc.image_feats[b];
        std::vector<double> f(feats.begin(), feats.end());
        for (std::size_t p = 0; p < config_.img_prefix_len; ++p) {
            const std::size_t t = s0 + p;
            is_image[t] = true;
            double* row = A.x0.data() + t * d;
            matvec(params_.img_w.data() + p * d * config_.d_img, f.data(),
                   params_.img_b.data() + p * d, row, d, config_.d_img);
        }
    }
    for (std::size_t t = 0; t < T; ++t) {
        double* row = A.x0.data() + t * d;
        if (!is_image[t]) {
            const int id = enc.tokens[t];
            const double* e = params_.tok_emb.data() +
                              static_cast<std::size_t>(id) * d;
            std::copy(e, e + d, row);
        }
        kernels::axpy(1.0, params_.pos_emb.data() + t * d, row, d);
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    A.layers.resize(config_.n_layers);
    const std::vector<double>* x = &A.x0;

    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        auto& C = A.layers[l];
        const auto& L = params_.layers[l];
        C.in = *x;
        C.ln1.assign(T * d, 0.0);
        C.ln1_mu.assign(T, 0.0);
        C.ln1_rstd.assign(T, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            ln_forward(C.in.data() + t * d, L.ln1_g.data(), L.ln1_b.data(),
                       C.ln1.data() + t * d, C.ln1_mu[t], C.ln1_rstd[t], d);
        }
        C.q.assign(T * d, 0.0);
        C.k.assign(T * d, 0.0);
        C.v.assign(T * d, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double* lt = C.ln1.data() + t * d;
            matvec(L.wq.data(), lt, L.bq.data(), C.q.data() + t * d, d, d);
            matvec(L.wk.data(), lt, L.bk.data(), C.k.data() + t * d, d, d);
            matvec(L.wv.data(), lt, L.bv.data(), C.v.data() + t * d, d, d);
        }
        C.probs.assign(H * T * T, 0.0);
        C.att.assign(T * d, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < T; ++i) {
                double* row = C.probs.data() + (h * T + i) * T;
                for (std::size_t j = 0; j <= i; ++j) {
                    row[j] = scale * kernels::dot(C.q.data() + i * d + off,
                                                  C.k.data() + j * d + off, dh);
                }
                softmax_row(row, i + 1);  // positions > i stay zero
                double* at = C.att.data() + i * d + off;
                for (std::size_t j = 0; j <= i; ++j) {
                    kernels::axpy(row[j], C.v.data() + j * d + off, at, dh);
                }
            }
        }
        C.resid1.assign(T * d, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            double* r = C.resid1.data() + t * d;
            matvec(L.wo.data(), C.att.data() + t * d, L.bo.data(), r, d, d);
            kernels::axpy(1.0, C.in.data() + t * d, r, d);
        }
        C.ln2.assign(T * d, 0.0);
        C.ln2_mu.assign(T, 0.0);
        C.ln2_rstd.assign(T, 0.0);
        C.pre.assign(T * 4 * d, 0.0);
        C.gelu.assign(T * 4 * d, 0.0);
        C.out.assign(T * d, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            ln_forward(C.resid1.data() + t * d, L.ln2_g.data(), L.ln2_b.data(),
                       C.ln2.data() + t * d, C.ln2_mu[t], C.ln2_rstd[t], d);
            double* pre = C.pre.data() + t * 4 * d;
            matvec(L.w1.data(), C.ln2.data() + t * d, L.b1.data(), pre, 4 * d,
                   d);
            double* ge = C.gelu.data() + t * 4 * d;
            for (std::size_t i = 0; i < 4 * d; ++i) ge[i] = gelu(pre[i]);
            double* o = C.out.data() + t * d;
            matvec(L.w2.data(), ge, L.b2.data(), o, d, 4 * d);
            kernels::axpy(1.0, C.resid1.data() + t * d, o, d);
            if (shifts) {
                kernels::axpy(shifts->alpha[l], shifts->csv.data() + l * d, o,
                              d);
            }
        }
        x = &C.out;
    }

    A.lnf.assign(T * d, 0.0);
    A.lnf_mu.assign(T, 0.0);
    A.lnf_rstd.assign(T, 0.0);
    out.logits.assign(T * V, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        ln_forward(x->data() + t * d, params_.lnf_g.data(),
                   params_.lnf_b.data(), A.lnf.data() + t * d, A.lnf_mu[t],
                   A.lnf_rstd[t], d);
        matvec(params_.head.data(), A.lnf.data() + t * d, nullptr,
               out.logits.data() + t * V, V, d);
    }
    return out;
}

void Model::backward(const PromptEncoding& enc, const ForwardResult& fwd,
                     const std::vector<double>& dlogits,
                     const LayerShifts* shifts, Params* param_grads,
                     LayerShifts* shift_grads) const {
    const std::size_t T = fwd.acts.T;
    const std::size_t d = config_.d_model;
    const std::size_t H = config_.n_heads;
    const std::size_t dh = config_.d_head();
    const std::size_t V = config_.vocab_size;
    const auto& A = fwd.acts;
    if (dlogits.size() != T * V) {
        throw std::runtime_error("upstream gradient has " +
                                 std::to_string(dlogits.size()) +
                                 " entries; expected " + std::to_string(T * V));
    }
    if (shift_grads && !shifts) {
        throw std::runtime_error(
            "steering-vector gradients need the steering vectors themselves");
    }

    // Head + final layer norm.
    std::vector<double> dlnf(T * d, 0.0);
    std::vector<double> dout(T * d, 0.0);
    const std::vector<double>& top =
        config_.n_layers > 0 ? A.layers.back().out : A.x0;
    for (std::size_t t = 0; t < T; ++t) {
        const double* dl = dlogits.data() + t * V;
        backprop_input(params_.head.data(), dl, dlnf.data() + t * d, V, d);
        if (param_grads) {
            grad_linear(dl, A.lnf.data() + t * d, param_grads->head.data(),
                        nullptr, V, d);
        }
        ln_backward(top.data() + t * d, params_.lnf_g.data(), A.lnf_mu[t],
                    A.lnf_rstd[t], dlnf.data() + t * d, dout.data() + t * d,
                    param_grads ? param_grads->lnf_g.data() : nullptr,
                    param_grads ? param_grads->lnf_b.data() : nullptr, d);
    }

    std::vector<double> din(T * d), dln1(T * d), dq(T * d), dk(T * d),
        dv(T * d), datt(T * d), dresid1(T * d), dln2(T * d), dpre(T * 4 * d),
        dgelu(T * 4 * d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = config_.n_layers; l-- > 0;) {
        const auto& C = A.layers[l];
        const auto& L = params_.layers[l];
        LayerParams* G = param_grads ? &param_grads->layers[l] : nullptr;

        // Shift injection: pass-through for activations; csv/alpha grads.
        if (shift_grads) {
            double* dcsv = shift_grads->csv.data() + l * d;
            const double* csv = shifts->csv.data() + l * d;
            double dalpha = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                kernels::axpy(shifts->alpha[l], dout.data() + t * d, dcsv, d);
                dalpha += kernels::dot(csv, dout.data() + t * d, d);
            }
            shift_grads->alpha[l] += dalpha;
        }

        // resid2 = resid1 + mlp(ln2(resid1)).
        std::fill(dresid1.begin(), dresid1.end(), 0.0);
        std::fill(dln2.begin(), dln2.end(), 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double* do_t = dout.data() + t * d;
            double* dpre_t = dpre.data() + t * 4 * d;
            // Through the MLP.
            std::fill(dgelu.begin() + t * 4 * d,
                      dgelu.begin() + (t + 1) * 4 * d, 0.0);
            backprop_input(L.w2.data(), do_t, dgelu.data() + t * 4 * d, d,
                           4 * d);
            if (G) {
                grad_linear(do_t, C.gelu.data() + t * 4 * d, G->w2.data(),
                            G->b2.data(), d, 4 * d);
            }
            for (std::size_t i = 0; i < 4 * d; ++i) {
                dpre_t[i] = dgelu[t * 4 * d + i] *
                            gelu_grad(C.pre[t * 4 * d + i]);
            }
            backprop_input(L.w1.data(), dpre_t, dln2.data() + t * d, 4 * d, d);
            if (G) {
                grad_linear(dpre_t, C.ln2.data() + t * d, G->w1.data(),
                            G->b1.data(), 4 * d, d);
            }
            // Residual path.
            kernels::axpy(1.0, do_t, dresid1.data() + t * d, d);
            ln_backward(C.resid1.data() + t * d, L.ln2_g.data(), C.ln2_mu[t],
                        C.ln2_rstd[t], dln2.data() + t * d,
                        dresid1.data() + t * d, G ? G->ln2_g.data() : nullptr,
                        G ? G->ln2_b.data() : nullptr, d);
        }

        // resid1 = in + wo(att) + bo.
        std::fill(datt.begin(), datt.end(), 0.0);
        std::fill(din.begin(), din.end(), 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double* dr = dresid1.data() + t * d;
            backprop_input(L.wo.data(), dr, datt.data() + t * d, d, d);
            if (G) {
                grad_linear(dr, C.att.data() + t * d, G->wo.data(),
                            G->bo.data(), d, d);
            }
            kernels::axpy(1.0, dr, din.data() + t * d, d);
        }

        // Attention.
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dprobs_row;
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < T; ++i) {
                const double* prow = C.probs.data() + (h * T + i) * T;
                const double* da = datt.data() + i * d + off;
                dprobs_row.assign(i + 1, 0.0);
                for (std::size_t j = 0; j <= i; ++j) {
                    dprobs_row[j] =
                        kernels::dot(da, C.v.data() + j * d + off, dh);
                    kernels::axpy(prow[j], da, dv.data() + j * d + off, dh);
                }
                double inner = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    inner += dprobs_row[j] * prow[j];
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = prow[j] * (dprobs_row[j] - inner) * scale;
                    if (ds == 0.0) continue;
                    kernels::axpy(ds, C.k.data() + j * d + off,
                                  dq.data() + i * d + off, dh);
                    kernels::axpy(ds, C.q.data() + i * d + off,
                                  dk.data() + j * d + off, dh);
                }
            }
        }

        // Projections back to ln1, then layer norm back to the input.
        std::fill(dln1.begin(), dln1.end(), 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            double* dl = dln1.data() + t * d;
            backprop_input(L.wq.data(), dq.data() + t * d, dl, d, d);
            backprop_input(L.wk.data(), dk.data() + t * d, dl, d, d);
            backprop_input(L.wv.data(), dv.data() + t * d, dl, d, d);
            if (G) {
                const double* lt = C.ln1.data() + t * d;
                grad_linear(dq.data() + t * d, lt, G->wq.data(), G->bq.data(),
                            d, d);
                grad_linear(dk.data() + t * d, lt, G->wk.data(), G->bk.data(),
                            d, d);
                grad_linear(dv.data() + t * d, lt, G->wv.data(), G->bv.data(),
                            d, d);
            }
            ln_backward(C.in.data() + t * d, L.ln1_g.data(), C.ln1_mu[t],
                        C.ln1_rstd[t], dln1.data() + t * d, din.data() + t * d,
                        G ? G->ln1_g.data() : nullptr,
                        G ? G->ln1_b.data() : nullptr, d);
        }
        dout = din;
    }

    if (!param_grads) return;

    // Embedding gradients.
    std::vector<int> image_slot(T, -1);  // prefix position p, or -1
    std::vector<std::size_t> image_block(T, 0);
    for (std::size_t b = 0; b < enc.image_starts.size(); ++b) {
        for (std::size_t p = 0; p < config_.img_prefix_len; ++p) {
            image_slot[enc.image_starts[b] + p] = static_cast<int>(p);
            image_block[enc.image_starts[b] + p] = b;
        }
    }
    for (std::size_t t = 0; t < T; ++t) {
        const double* dx = dout.data() + t * d;
        kernels::axpy(1.0, dx, param_grads->pos_emb.data() + t * d, d);
        if (image_slot[t] >= 0) {
            const std::size_t p = static_cast<std::size_t>(image_slot[t]);
            const auto& feats = enc.image_feats[image_block[t]];
            std::vector<double> f(feats.begin(), feats.end());
            grad_linear(dx, f.data(),
                        param_grads->img_w.data() + p * d * config_.d_img,
                        param_grads->img_b.data() + p * d, d, config_.d_img);
        } else {
            kernels::axpy(1.0, dx,
                          param_grads->tok_emb.data() +
                              static_cast<std::size_t>(enc.tokens[t]) * d,
                          d);
        }
    }
}

std::vector<int> Model::generate(const PromptEncoding& enc,
                                 std::size_t max_new,
                                 const LayerShifts* shifts) const {
    if (max_new == 0) {
        throw std::runtime_error(
            "generation budget must allow at least one token");
    }
    PromptEncoding cur = enc;
    cur.tokens.resize(enc.response_start);  // drop any teacher-forced tail
    std::vector<int> out;
    while (out.size() < max_new && cur.tokens.size() < config_.max_seq) {
        const auto fwd = forward(cur, shifts);
        const std::size_t V = config_.vocab_size;
        const int next = argmax_row(
            fwd.logits.data() + (cur.tokens.size() - 1) * V, V);
        if (next == tokenizer_.eos_id()) break;
        out.push_back(next);
        cur.tokens.push_back(next);
    }
    return out;
}

std::vector<double> Model::first_token_hidden(const PromptEncoding& enc,
                                              std::size_t layer,
                                              const LayerShifts* shifts) const {
    if (layer < 1 || layer > config_.n_layers) {
        throw std::runtime_error("layer " + std::to_string(layer) +
                                 " outside [1, " +
                                 std::to_string(config_.n_layers) + "]");
    }
    if (enc.response_start == 0) {
        throw std::runtime_error("encoding has no response position");
    }
    const auto fwd = forward(enc, shifts);
    const std::size_t d = config_.d_model;
    const auto& row = fwd.acts.layers[layer - 1].out;
    const std::size_t t = enc.response_start - 1;
    return std::vector<double>(row.begin() + t * d, row.begin() + (t + 1) * d);
}

std::vector<std::vector<double>> Model::response_distributions(
    const PromptEncoding& enc, const LayerShifts* shifts) const {
    const auto fwd = forward(enc, shifts);
    const std::size_t V = config_.vocab_size;
    std::vector<std::vector<double>> rows;
    for (std::size_t pos : loss_positions(enc)) {
        std::vector<double> row(fwd.logits.begin() + pos * V,
                                fwd.logits.begin() + (pos + 1) * V);
        softmax_row(row.data(), V);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

void Model::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::ordered_json manifest;
    manifest["kind"] = "decoder_lm";
    manifest["config"] = {{"n_layers", config_.n_layers},
                          {"d_model", config_.d_model},
                          {"n_heads", config_.n_heads},
                          {"vocab_size", config_.vocab_size},
                          {"max_seq", config_.max_seq},
                          {"d_img", config_.d_img},
                          {"img_prefix_len", config_.img_prefix_len},
                          {"seed", config_.seed}};
    manifest["vocab"] = tokenizer_.vocab();

    std::vector<double> flat;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    params_.for_each([&](const std::string& name,
                         const std::vector<double>& v) {
        tensors.push_back({{"name", name},
                           {"offset", flat.size()},
                           {"size", v.size()}});
        flat.insert(flat.end(), v.begin(), v.end());
    });
    manifest["tensors"] = std::move(tensors);
    manifest["total"] = flat.size();

    io::write_text((fs::path(dir) / "manifest.json").string(),
                   manifest.dump(2) + "\n");
    io::write_f32((fs::path(dir) / "weights.f32").string(), flat);
}

Model Model::load(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = nlohmann::json::parse(
        io::read_text((fs::path(dir) / "manifest.json").string()));
    const auto& mc = manifest.at("config");
    ModelConfig config;
    config.n_layers = mc.at("n_layers").get<std::size_t>();
    config.d_model = mc.at("d_model").get<std::size_t>();
    config.n_heads = mc.at("n_heads").get<std::size_t>();
    config.vocab_size = mc.at("vocab_size").get<std::size_t>();
    config.max_seq = mc.at("max_seq").get<std::size_t>();
    config.d_img = mc.at("d_img").get<std::size_t>();
    config.img_prefix_len = mc.at("img_prefix_len").get<std::size_t>();
    config.seed = mc.at("seed").get<std::uint64_t>();

    Model m(config, Tokenizer::from_vocab(
                        manifest.at("vocab").get<std::vector<std::string>>()));
    if (m.config_.vocab_size != config.vocab_size) {
        throw std::runtime_error("checkpoint vocabulary has " +
                                 std::to_string(m.config_.vocab_size) +
                                 " entries but the manifest claims " +
                                 std::to_string(config.vocab_size));
    }

    const auto flat = io::read_f32(
        (fs::path(dir) / "weights.f32").string(),
        manifest.at("total").get<std::size_t>());
    std::size_t cursor = 0;
    const auto& tensors = manifest.at("tensors");
    std::size_t index = 0;
    m.params_.for_each([&](const std::string& name, std::vector<double>& v) {
        if (index >= tensors.size()) {
            throw std::runtime_error("checkpoint manifest lists too few tensors");
        }
        const auto& entry = tensors.at(index++);
        if (entry.at("name").get<std::string>() != name ||
            entry.at("size").get<std::size_t>() != v.size() ||
            entry.at("offset").get<std::size_t>() != cursor) {
            throw std::runtime_error("checkpoint tensor '" + name +
                                     "' does not match the manifest layout");
        }
        std::copy(flat.begin() + cursor, flat.begin() + cursor + v.size(),
                  v.begin());
        cursor += v.size();
    });
    if (index != tensors.size() || cursor != flat.size()) {
        throw std::runtime_error("checkpoint holds unexpected extra tensors");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Base-model training
// ---------------------------------------------------------------------------

double lm_loss(const Model& model, const PromptEncoding& enc) {
    const auto fwd = model.forward(enc);
    const std::size_t V = model.config().vocab_size;
    const auto positions = loss_positions(enc);
    if (positions.empty()) {
        throw std::runtime_error("encoding has no response tokens to score");
    }
    double total = 0.0;
    for (std::size_t pos : positions) {
        const double* row = fwd.logits.data() + pos * V;
        const double mx = kernels::max(row, V);
        double denom = 0.0;
        for (std::size_t i = 0; i < V; ++i) denom += std::exp(row[i] - mx);
        const int target = enc.tokens[pos + 1];
        total += std::log(denom) + mx - row[static_cast<std::size_t>(target)];
    }
    return total / static_cast<double>(positions.size());
}

LmTrainReport train_lm(Model& model, const std::vector<PromptEncoding>& data,
                       const LmTrainConfig& config) {
    if (data.empty()) {
        throw std::runtime_error("no training sequences were provided");
    }
    for (const auto& enc : data) {
        if (loss_positions(enc).empty()) {
            throw std::runtime_error(
                "a training sequence has no response tokens");
        }
    }
    const std::size_t V = model.config().vocab_size;

    Params grads = model.zero_like();
    Params m_state = model.zero_like();
    Params v_state = model.zero_like();
    std::vector<std::vector<double>*> p_list, g_list, m_list, v_list;
    auto collect = [](Params& ps, std::vector<std::vector<double>*>& out) {
        ps.for_each([&](const std::string&, std::vector<double>& v) {
            out.push_back(&v);
        });
    };
    collect(model.params(), p_list);
    collect(grads, g_list);
    collect(m_state, m_list);
    collect(v_state, v_list);
    std::size_t step = 0;
    LmTrainReport report;

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng::Rng shuffler(rng::derive(config.seed, "epoch_order",
                                      std::to_string(epoch)));
        shuffler.shuffle(order);

        double epoch_nll = 0.0;
        std::size_t epoch_tokens = 0;

        for (std::size_t start = 0; start < order.size();
             start += config.batch_size) {
            const std::size_t end =
                std::min(order.size(), start + config.batch_size);
            std::size_t batch_tokens = 0;
            for (std::size_t b = start; b < end; ++b) {
                batch_tokens += loss_positions(data[order[b]]).size();
            }
            const double inv = 1.0 / static_cast<double>(batch_tokens);

            grads.for_each([](const std::string&, std::vector<double>& g) {
                std::fill(g.begin(), g.end(), 0.0);
            });

            for (std::size_t b = start; b < end; ++b) {
                const auto& enc = data[order[b]];
                const auto fwd = model.forward(enc);
                std::vector<double> dlogits(fwd.acts.T * V, 0.0);
                for (std::size_t pos : loss_positions(enc)) {
                    double* row = dlogits.data() + pos * V;
                    std::copy(fwd.logits.begin() + pos * V,
                              fwd.logits.begin() + (pos + 1) * V, row);
                    softmax_row(row, V);
                    const auto target =
                        static_cast<std::size_t>(enc.tokens[pos + 1]);
                    epoch_nll += -std::log(
                        std::max(row[target], 1e-300));
                    ++epoch_tokens;
                    row[target] -= 1.0;
                    kernels::scale(inv, row, V);
                }
                model.backward(enc, fwd, dlogits, nullptr, &grads, nullptr);
            }

            ++step;
            const double bc1 = 1.0 - std::pow(config.beta1,
                                              static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(config.beta2,
                                              static_cast<double>(step));
            for (std::size_t ti = 0; ti < p_list.size(); ++ti) {
                auto& p = *p_list[ti];
                auto& g = *g_list[ti];
                auto& mm = *m_list[ti];
                auto& vv = *v_list[ti];
                for (std::size_t i = 0; i < p.size(); ++i) {
                    mm[i] = config.beta1 * mm[i] + (1.0 - config.beta1) * g[i];
                    vv[i] = config.beta2 * vv[i] +
                            (1.0 - config.beta2) * g[i] * g[i];
                    const double mhat = mm[i] / bc1;
                    const double vhat = vv[i] / bc2;
                    p[i] = io::round_f32(
                        p[i] - config.learning_rate * mhat /
                                   (std::sqrt(vhat) + config.adam_eps));
                }
            }
        }
        report.epoch_loss.push_back(epoch_nll /
                                    static_cast<double>(epoch_tokens));
    }
    return report;
}

}  // namespace memesense::model
