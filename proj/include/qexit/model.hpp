// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-exit transformer action model and entropy-gated early-exit inference.
//
// Token layout for one observation with a k x k window:
//   [readout, row_0, ..., row_{k-1}, compass]
// The readout token's embedding after block l is the summary z_l that the
// exit head at layer l (or the final head at layer L) reads.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qexit/adapters.hpp"
#include "qexit/errors.hpp"
#include "qexit/navsim.hpp"
#include "qexit/numerics.hpp"
#include "qexit/quantizer.hpp"

namespace qexit {

struct ModelConfig {
    std::size_t num_layers = 6;
    std::size_t d_model = 64;
    std::size_t num_heads = 4;
    std::size_t d_ff = 256;
    std::vector<std::size_t> exit_layers{2, 4};  // 1-based block indices
    std::size_t action_count = kNumActions;
    std::size_t exit_hidden = 32;
    std::size_t window = 7;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    std::size_t block_size = 64;

    std::size_t num_tokens() const { return window + 2; }
    std::size_t head_dim() const { return d_model / num_heads; }
    std::size_t compass_features() const { return 3; }

    void validate() const {
        if (num_layers < 2) throw StructuralError("ModelConfig: num_layers must be >= 2");
        if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
            throw StructuralError("ModelConfig: d_model must be divisible by num_heads");
        }
        if (d_ff == 0 || exit_hidden == 0) throw StructuralError("ModelConfig: zero-width layer");
        if (action_count != kNumActions) throw StructuralError("ModelConfig: action_count must be 4");
        if (window == 0 || window % 2 == 0) throw StructuralError("ModelConfig: window must be odd");
        if (lora_rank == 0 || lora_rank > d_model) throw StructuralError("ModelConfig: lora_rank out of range");
        if (block_size == 0) throw StructuralError("ModelConfig: block_size must be >= 1");
        for (std::size_t i = 0; i < exit_layers.size(); ++i) {
            const std::size_t l = exit_layers[i];
            if (l < 1 || l >= num_layers) throw StructuralError("ModelConfig: exit layers must lie in [1, L-1]");
            if (i > 0 && l <= exit_layers[i - 1]) throw StructuralError("ModelConfig: exit layers must increase");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class ModelMode { full_precision, quantized };

/// A projection y = x W^T with W of shape [out x in]. Either a dense weight or
/// a frozen quantized base, optionally with a LoRA adapter on top.
template <typename T>
struct Linear {
    Matrix<T> weight;
    std::optional<QuantizedTensor> base;
    std::optional<LoraAdapter<T>> lora;

    bool quantized() const { return base.has_value(); }
    std::size_t out_features() const { return base ? base->rows : weight.rows(); }
    std::size_t in_features() const { return base ? base->cols : weight.cols(); }

    Matrix<T> effective() const {
        if (base) return lora ? effective_weight(*base, *lora) : dequantize<T>(*base);
        return lora ? effective_weight(weight, *lora) : weight;
    }
};

template <typename T>
struct Block {
    Matrix<T> ln1_gain, ln1_bias;
    Linear<T> wq, wk, wv, wo;
    Matrix<T> ln2_gain, ln2_bias;
    Linear<T> w1;
    Matrix<T> b1;
    Linear<T> w2;
    Matrix<T> b2;
};

// Softmax(W2 ReLU(W1 z + b1) + b2)
template <typename T>
struct ExitHead {
    Matrix<T> w1;  // [hidden x d]
    Matrix<T> b1;  // [1 x hidden]
    Matrix<T> w2;  // [actions x hidden]
    Matrix<T> b2;  // [1 x actions]
};

template <typename T>
struct Embedder {
    Matrix<T> row_proj;      // [d x window]
    Matrix<T> row_bias;      // [1 x d]
    Matrix<T> compass_proj;  // [d x 3]
    Matrix<T> compass_bias;  // [1 x d]
    Matrix<T> position;      // [tokens x d]
    Matrix<T> readout;       // [1 x d]
};

template <typename T>
struct MultiExitModel {
    ModelConfig config;
    ModelMode mode = ModelMode::full_precision;
    Embedder<T> embed;
    std::vector<Block<T>> blocks;
    std::vector<ExitHead<T>> exit_heads;  // parallel to config.exit_layers
    ExitHead<T> final_head;

    bool is_exit_layer(std::size_t layer) const {
        return std::find(config.exit_layers.begin(), config.exit_layers.end(), layer) != config.exit_layers.end();
    }
};

// Parameter roles, used to decide what a training mode may update.
enum class ParamKind { embed, norm, dense, bias, lora_a, lora_b, exit_head, final_head };

/// Calls f(name, kind, m.field...) for every dense parameter matrix, walking
/// several structurally identical models in lockstep (e.g. a model and its
/// gradient). The first model decides which slots exist: the dense weight of a
/// quantized projection is not a parameter and is skipped.
template <typename F, typename M0, typename... Ms>
void for_each_param(F&& f, M0& m0, Ms&... ms) {
    f("embed.row_proj", ParamKind::embed, m0.embed.row_proj, ms.embed.row_proj...);
    f("embed.row_bias", ParamKind::embed, m0.embed.row_bias, ms.embed.row_bias...);
    f("embed.compass_proj", ParamKind::embed, m0.embed.compass_proj, ms.embed.compass_proj...);
    f("embed.compass_bias", ParamKind::embed, m0.embed.compass_bias, ms.embed.compass_bias...);
    f("embed.position", ParamKind::embed, m0.embed.position, ms.embed.position...);
    f("embed.readout", ParamKind::embed, m0.embed.readout, ms.embed.readout...);
    for (std::size_t l = 0; l < m0.blocks.size(); ++l) {
        const std::string p = "block" + std::to_string(l + 1) + ".";
        auto linear = [&](const char* name, auto& lin0, auto&... lins) {
            if (!lin0.quantized()) f(p + name, ParamKind::dense, lin0.weight, lins.weight...);
            if (lin0.lora) {
                f(p + name + ".lora_a", ParamKind::lora_a, lin0.lora->a, lins.lora->a...);
                f(p + name + ".lora_b", ParamKind::lora_b, lin0.lora->b, lins.lora->b...);
            }
        };
        auto& b0 = m0.blocks[l];
        f(p + "ln1_gain", ParamKind::norm, b0.ln1_gain, ms.blocks[l].ln1_gain...);
        f(p + "ln1_bias", ParamKind::norm, b0.ln1_bias, ms.blocks[l].ln1_bias...);
        linear("wq", b0.wq, ms.blocks[l].wq...);
        linear("wk", b0.wk, ms.blocks[l].wk...);
        linear("wv", b0.wv, ms.blocks[l].wv...);
        linear("wo", b0.wo, ms.blocks[l].wo...);
        f(p + "ln2_gain", ParamKind::norm, b0.ln2_gain, ms.blocks[l].ln2_gain...);
        f(p + "ln2_bias", ParamKind::norm, b0.ln2_bias, ms.blocks[l].ln2_bias...);
        linear("w1", b0.w1, ms.blocks[l].w1...);
        f(p + "b1", ParamKind::bias, b0.b1, ms.blocks[l].b1...);
        linear("w2", b0.w2, ms.blocks[l].w2...);
        f(p + "b2", ParamKind::bias, b0.b2, ms.blocks[l].b2...);
    }
    auto head = [&](const std::string& p, ParamKind kind, auto& h0, auto&... hs) {
        f(p + ".w1", kind, h0.w1, hs.w1...);
        f(p + ".b1", kind, h0.b1, hs.b1...);
        f(p + ".w2", kind, h0.w2, hs.w2...);
        f(p + ".b2", kind, h0.b2, hs.b2...);
    };
    for (std::size_t k = 0; k < m0.exit_heads.size(); ++k) {
        head("exit" + std::to_string(m0.config.exit_layers[k]), ParamKind::exit_head, m0.exit_heads[k],
             ms.exit_heads[k]...);
    }
    head(std::string("final"), ParamKind::final_head, m0.final_head, ms.final_head...);
}

namespace detail {

template <typename T>
Linear<T> init_linear(std::size_t out, std::size_t in, Rng& rng) {
    return Linear<T>{random_normal<T>(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng), {}, {}};
}

template <typename T>
ExitHead<T> init_head(const ModelConfig& c, Rng& rng) {
    ExitHead<T> h;
    h.w1 = random_normal<T>(c.exit_hidden, c.d_model, 1.0 / std::sqrt(static_cast<double>(c.d_model)), rng);
    h.b1 = Matrix<T>(1, c.exit_hidden);
    h.w2 = random_normal<T>(c.action_count, c.exit_hidden, 1.0 / std::sqrt(static_cast<double>(c.exit_hidden)), rng);
    h.b2 = Matrix<T>(1, c.action_count);
    return h;
}

}  // namespace detail

/// Fresh full-precision model. Projections use N(0, 1/in); norms start at
/// gain 1, bias 0.
template <typename T>
MultiExitModel<T> init_model(const ModelConfig& config, Rng& rng) {
    config.validate();
    const std::size_t d = config.d_model;
    MultiExitModel<T> m;
    m.config = config;
    m.embed.row_proj = random_normal<T>(d, config.window, 1.0 / std::sqrt(static_cast<double>(config.window)), rng);
    m.embed.row_bias = Matrix<T>(1, d);
    m.embed.compass_proj = random_normal<T>(d, config.compass_features(), 1.0, rng);
    m.embed.compass_bias = Matrix<T>(1, d);
    m.embed.position = random_normal<T>(config.num_tokens(), d, 0.1, rng);
    m.embed.readout = random_normal<T>(1, d, 0.1, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        Block<T> b;
        b.ln1_gain = Matrix<T>(1, d, T(1));
        b.ln1_bias = Matrix<T>(1, d);
        b.wq = detail::init_linear<T>(d, d, rng);
        b.wk = detail::init_linear<T>(d, d, rng);
        b.wv = detail::init_linear<T>(d, d, rng);
        b.wo = detail::init_linear<T>(d, d, rng);
        b.ln2_gain = Matrix<T>(1, d, T(1));
        b.ln2_bias = Matrix<T>(1, d);
        b.w1 = detail::init_linear<T>(config.d_ff, d, rng);
        b.b1 = Matrix<T>(1, config.d_ff);
        b.w2 = detail::init_linear<T>(d, config.d_ff, rng);
        b.b2 = Matrix<T>(1, d);
        m.blocks.push_back(std::move(b));
    }
    for (std::size_t k = 0; k < config.exit_layers.size(); ++k) m.exit_heads.push_back(detail::init_head<T>(config, rng));
    m.final_head = detail::init_head<T>(config, rng);
    return m;
}

/// Quantizes the Q and V projections of every block (all block projections
/// when `all_projections`) and attaches fresh zero-update LoRA adapters to Q
/// and V.
template <typename T>
MultiExitModel<T> quantize_model(const MultiExitModel<T>& dense, Rng& rng, bool all_projections = false,
                                 QuantScheme scheme = QuantScheme::nf4) {
    if (dense.mode != ModelMode::full_precision) throw StructuralError("quantize_model: model is already quantized");
    const auto& c = dense.config;
    MultiExitModel<T> q = dense;
    q.mode = ModelMode::quantized;
    auto freeze = [&](Linear<T>& lin) {
        lin.base = quantize(lin.weight, c.block_size, scheme);
        lin.weight = Matrix<T>();
    };
    for (auto& b : q.blocks) {
        freeze(b.wq);
        freeze(b.wv);
        if (all_projections) {
            freeze(b.wk);
            freeze(b.wo);
            freeze(b.w1);
            freeze(b.w2);
        }
        b.wq.lora = init_lora<T>(c.d_model, c.d_model, c.lora_rank, c.lora_alpha, rng);
        b.wv.lora = init_lora<T>(c.d_model, c.d_model, c.lora_rank, c.lora_alpha, rng);
    }
    return q;
}

/// Dense model with every projection replaced by its effective weight.
template <typename T>
MultiExitModel<T> dense_equivalent(const MultiExitModel<T>& m) {
    MultiExitModel<T> out = m;
    out.mode = ModelMode::full_precision;
    auto flatten = [](Linear<T>& lin) { lin = Linear<T>{lin.effective(), {}, {}}; };
    for (auto& b : out.blocks) {
        flatten(b.wq);
        flatten(b.wk);
        flatten(b.wv);
        flatten(b.wo);
        flatten(b.w1);
        flatten(b.w2);
    }
    return out;
}

template <typename T>
std::size_t count_parameters(MultiExitModel<T>& m, bool (*pred)(ParamKind)) {
    std::size_t n = 0;
    for_each_param([&](const std::string&, ParamKind kind, Matrix<T>& p) {
        if (pred(kind)) n += p.size();
    }, m);
    return n;
}

/// Natural-log Shannon entropy with 0 ln 0 = 0, evaluated in double and
/// clamped to the exact range [0, ln n].
template <typename T>
double entropy(std::span<const T> p) {
    double h = 0.0;
    for (T v : p) {
        const double x = static_cast<double>(v);
        if (x > 0.0) h -= x * std::log(x);
    }
    return std::clamp(h, 0.0, std::log(static_cast<double>(p.size())));
}

template <typename T>
double entropy(const std::vector<T>& p) {
    return entropy(std::span<const T>(p));
}

// Index of the largest probability, smallest index on ties.
template <typename T>
std::size_t argmax_index(std::span<const T> p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

template <typename T>
Action argmax_action(const std::vector<T>& p) {
    if (p.size() != kNumActions) throw StructuralError("argmax_action: expected 4 probabilities");
    return static_cast<Action>(argmax_index(std::span<const T>(p)));
}

template <typename T>
struct HeadTrace {
    std::vector<T> z;       // input embedding
    std::vector<T> pre;     // W1 z + b1
    std::vector<T> hidden;  // ReLU(pre)
    ProbVector<T> probs;
};

template <typename T>
HeadTrace<T> exit_head_trace(const ExitHead<T>& head, std::span<const T> z) {
    if (z.size() != head.w1.cols()) throw StructuralError("exit_head_forward: embedding dimension mismatch");
    HeadTrace<T> tr;
    tr.z.assign(z.begin(), z.end());
    const std::size_t h = head.w1.rows();
    tr.pre.resize(h);
    tr.hidden.resize(h);
    for (std::size_t j = 0; j < h; ++j) {
        T s = head.b1[j];
        const auto w = head.w1.row(j);
        for (std::size_t k = 0; k < z.size(); ++k) s += w[k] * z[k];
        tr.pre[j] = s;
        tr.hidden[j] = relu(s);
    }
    std::vector<T> logits(head.w2.rows());
    for (std::size_t a = 0; a < logits.size(); ++a) {
        T s = head.b2[a];
        const auto w = head.w2.row(a);
        for (std::size_t j = 0; j < h; ++j) s += w[j] * tr.hidden[j];
        logits[a] = s;
    }
    tr.probs = softmax(logits);
    return tr;
}

template <typename T>
ProbVector<T> exit_head_forward(const ExitHead<T>& head, std::span<const T> z) {
    return exit_head_trace(head, z).probs;
}

/// Token sequence [readout, window rows..., compass] with position embeddings added.
template <typename T>
Matrix<T> encode_observation(const MultiExitModel<T>& model, const Observation& obs) {
    const auto& c = model.config;
    const std::size_t k = c.window;
    if (static_cast<std::size_t>(obs.window_size) != k || obs.window.size() != k * k) {
        throw StructuralError("encode_observation: window size does not match model");
    }
    const std::size_t d = c.d_model;
    const auto& e = model.embed;
    Matrix<T> x(c.num_tokens(), d);
    for (std::size_t i = 0; i < d; ++i) x(0, i) = e.readout[i] + e.position(0, i);
    for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t i = 0; i < d; ++i) {
            T s = e.row_bias[i];
            for (std::size_t col = 0; col < k; ++col) s += e.row_proj(i, col) * T(obs.window[r * k + col]);
            x(1 + r, i) = s + e.position(1 + r, i);
        }
    }
    const T feats[3] = {T(obs.goal_compass[0]), T(obs.goal_compass[1]), T(obs.goal_visible)};
    const std::size_t last = k + 1;
    for (std::size_t i = 0; i < d; ++i) {
        T s = e.compass_bias[i];
        for (std::size_t f = 0; f < 3; ++f) s += e.compass_proj(i, f) * feats[f];
        x(last, i) = s + e.position(last, i);
    }
    return x;
}

/// Effective projection weights, materialized once and stored both as
/// [out x in] and transposed for the row-major forward kernel.
template <typename T>
struct PreparedLinear {
    Matrix<T> w;    // [out x in]
    Matrix<T> w_t;  // [in x out]

    explicit PreparedLinear(const Linear<T>& lin) : w(lin.effective()), w_t(transpose(w)) {}
};

template <typename T>
struct PreparedBlock {
    PreparedLinear<T> wq, wk, wv, wo, w1, w2;

    explicit PreparedBlock(const Block<T>& b)
        : wq(b.wq), wk(b.wk), wv(b.wv), wo(b.wo), w1(b.w1), w2(b.w2) {}
};

/// Read-only inference view over a model. The model must outlive it.
template <typename T>
struct PreparedModel {
    const MultiExitModel<T>* model;
    std::vector<PreparedBlock<T>> blocks;

    explicit PreparedModel(const MultiExitModel<T>& m) : model(&m) {
        m.config.validate();
        blocks.reserve(m.blocks.size());
        for (const auto& b : m.blocks) blocks.emplace_back(b);
    }
};

template <typename T>
struct BlockTrace {
    Matrix<T> x_in;
    Matrix<T> h1;  // LN1(x_in)
    std::vector<LayerNormStats<T>> ln1;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs;  // per attention head, [tokens x tokens]
    Matrix<T> attn;                // concatenated head outputs
    Matrix<T> x_mid;
    Matrix<T> h2;
    std::vector<LayerNormStats<T>> ln2;
    Matrix<T> u;  // pre-activation of the MLP
    Matrix<T> g;  // gelu(u)
};

namespace detail {

template <typename T>
void add_row_bias(Matrix<T>& y, const Matrix<T>& bias) {
    for (std::size_t r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] += bias[i];
    }
}

template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                          std::vector<LayerNormStats<T>>* stats) {
    Matrix<T> y(x.rows(), x.cols());
    if (stats) stats->resize(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto s = layer_norm_into<T>(x.row(r), gain.flat(), bias.flat(), y.row(r));
        if (stats) (*stats)[r] = s;
    }
    return y;
}

}  // namespace detail

/// One pre-norm transformer block: x + MHA(LN1 x), then + MLP(LN2 .), gelu MLP.
template <typename T>
Matrix<T> block_forward(const Block<T>& blk, const PreparedBlock<T>& pb, std::size_t num_heads, const Matrix<T>& x,
                        BlockTrace<T>* tr) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    const std::size_t dh = d / num_heads;
    const T scale = T(1) / std::sqrt(T(dh));

    std::vector<LayerNormStats<T>> ln1, ln2;
    Matrix<T> h1 = detail::layer_norm_rows(x, blk.ln1_gain, blk.ln1_bias, tr ? &ln1 : nullptr);
    Matrix<T> q = matmul(h1, pb.wq.w_t);
    Matrix<T> k = matmul(h1, pb.wk.w_t);
    Matrix<T> v = matmul(h1, pb.wv.w_t);

    Matrix<T> attn(n, d);
    std::vector<Matrix<T>> head_probs;
    std::vector<T> logits(n);
    for (std::size_t hd = 0; hd < num_heads; ++hd) {
        const std::size_t off = hd * dh;
        Matrix<T> p(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
                logits[j] = s * scale;
            }
            const auto pi = softmax(std::span<const T>(logits));
            std::copy(pi.begin(), pi.end(), p.row(i).begin());
            for (std::size_t j = 0; j < n; ++j) {
                const T w = pi[j];
                for (std::size_t c = 0; c < dh; ++c) attn(i, off + c) += w * v(j, off + c);
            }
        }
        if (tr) head_probs.push_back(std::move(p));
    }
    Matrix<T> x_mid = matmul(attn, pb.wo.w_t);
    for (std::size_t i = 0; i < x_mid.size(); ++i) x_mid[i] += x[i];

    Matrix<T> h2 = detail::layer_norm_rows(x_mid, blk.ln2_gain, blk.ln2_bias, tr ? &ln2 : nullptr);
    Matrix<T> u = matmul(h2, pb.w1.w_t);
    detail::add_row_bias(u, blk.b1);
    Matrix<T> g(u.rows(), u.cols());
    for (std::size_t i = 0; i < u.size(); ++i) g[i] = gelu(u[i]);
    Matrix<T> out = matmul(g, pb.w2.w_t);
    detail::add_row_bias(out, blk.b2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x_mid[i];

    if (tr) {
        tr->x_in = x;
        tr->h1 = std::move(h1);
        tr->ln1 = std::move(ln1);
        tr->q = std::move(q);
        tr->k = std::move(k);
        tr->v = std::move(v);
        tr->probs = std::move(head_probs);
        tr->attn = std::move(attn);
        tr->x_mid = std::move(x_mid);
        tr->h2 = std::move(h2);
        tr->ln2 = std::move(ln2);
        tr->u = std::move(u);
        tr->g = std::move(g);
    }
    return out;
}

namespace detail {

template <typename T>
void check_finite(const Matrix<T>& x, std::size_t layer) {
    if (!all_finite(x)) {
        throw NumericalError("non-finite activation after layer " + std::to_string(layer), static_cast<int>(layer));
    }
}

}  // namespace detail

template <typename T>
struct FullForward {
    std::vector<ProbVector<T>> exit_probs;  // one per exit layer, in order
    ProbVector<T> final_probs;
    std::vector<std::vector<T>> readouts;   // z_l for l = 1..L
};

/// Runs every block. Applies each exit head at its layer and the final head
/// at layer L.
template <typename T>
FullForward<T> forward_full(const PreparedModel<T>& pm, const Observation& obs) {
    const auto& m = *pm.model;
    FullForward<T> out;
    Matrix<T> x = encode_observation(m, obs);
    std::size_t next_exit = 0;
    for (std::size_t l = 1; l <= m.config.num_layers; ++l) {
        x = block_forward<T>(m.blocks[l - 1], pm.blocks[l - 1], m.config.num_heads, x, nullptr);
        detail::check_finite(x, l);
        const auto z = x.row(0);
        out.readouts.emplace_back(z.begin(), z.end());
        if (next_exit < m.config.exit_layers.size() && m.config.exit_layers[next_exit] == l) {
            out.exit_probs.push_back(exit_head_forward(m.exit_heads[next_exit], std::span<const T>(z)));
            ++next_exit;
        }
    }
    out.final_probs = exit_head_forward(m.final_head, std::span<const T>(x.row(0)));
    return out;
}

template <typename T>
FullForward<T> forward_full(const MultiExitModel<T>& m, const Observation& obs) {
    return forward_full(PreparedModel<T>(m), obs);
}

template <typename T>
struct DeeOutcome {
    Action action = Action::forward;
    std::size_t exit_layer = 0;
    ProbVector<T> distribution;
    double entropy = 0.0;
    std::size_t blocks_executed = 0;
};

/// Entropy-gated early exit: runs blocks in order, evaluates the head at each
/// exit layer and returns at the first one with H(p) <= tau; otherwise the
/// final head at layer L decides.
template <typename T>
DeeOutcome<T> dee_infer(const PreparedModel<T>& pm, const Observation& obs, double tau) {
    if (!std::isfinite(tau)) throw StructuralError("dee_infer: tau must be finite");
    const auto& m = *pm.model;
    const std::size_t num_layers = m.config.num_layers;
    Matrix<T> x = encode_observation(m, obs);
    std::size_t next_exit = 0;
    for (std::size_t l = 1; l <= num_layers; ++l) {
        x = block_forward<T>(m.blocks[l - 1], pm.blocks[l - 1], m.config.num_heads, x, nullptr);
        detail::check_finite(x, l);
        const bool at_exit = next_exit < m.config.exit_layers.size() && m.config.exit_layers[next_exit] == l;
        if (!at_exit && l != num_layers) continue;
        const ExitHead<T>& head = at_exit ? m.exit_heads[next_exit] : m.final_head;
        if (at_exit) ++next_exit;
        DeeOutcome<T> r;
        r.distribution = exit_head_forward(head, std::span<const T>(x.row(0)));
        r.entropy = entropy(r.distribution);
        if (l == num_layers || r.entropy <= tau) {
            r.action = argmax_action(r.distribution);
            r.exit_layer = l;
            r.blocks_executed = l;
            return r;
        }
    }
    throw StructuralError("dee_infer: model has no final layer");
}

template <typename T>
DeeOutcome<T> dee_infer(const MultiExitModel<T>& m, const Observation& obs, double tau) {
    return dee_infer(PreparedModel<T>(m), obs, tau);
}

template <typename T>
struct ForwardTrace {
    Matrix<T> x0;
    std::vector<BlockTrace<T>> blocks;
    std::vector<HeadTrace<T>> exit_heads;
    HeadTrace<T> final_head;
};

template <typename T>
ForwardTrace<T> forward_traced(const PreparedModel<T>& pm, const Observation& obs) {
    const auto& m = *pm.model;
    ForwardTrace<T> tr;
    tr.x0 = encode_observation(m, obs);
    tr.blocks.resize(m.config.num_layers);
    Matrix<T> x = tr.x0;
    std::size_t next_exit = 0;
    for (std::size_t l = 1; l <= m.config.num_layers; ++l) {
        x = block_forward(m.blocks[l - 1], pm.blocks[l - 1], m.config.num_heads, x, &tr.blocks[l - 1]);
        detail::check_finite(x, l);
        if (next_exit < m.config.exit_layers.size() && m.config.exit_layers[next_exit] == l) {
            tr.exit_heads.push_back(exit_head_trace(m.exit_heads[next_exit], std::span<const T>(x.row(0))));
            ++next_exit;
        }
    }
    tr.final_head = exit_head_trace(m.final_head, std::span<const T>(x.row(0)));
    return tr;
}

}  // namespace qexit
