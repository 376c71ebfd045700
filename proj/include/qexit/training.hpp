// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Behavior cloning for the multi-exit model: the BFS teacher, dataset
// generation, the weighted multi-exit cross-entropy, hand-written reverse-mode
// gradients, Adam, and threshold calibration.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "qexit/episode.hpp"
#include "qexit/errors.hpp"
#include "qexit/model.hpp"
#include "qexit/navsim.hpp"
#include "qexit/numerics.hpp"

namespace qexit {

// ---------------------------------------------------------------------------
// Teacher

/// BFS distance field towards the goal region of one episode.
struct GoalField {
    const GridMap* map = nullptr;
    Cell goal;
    int radius = 1;
    std::vector<int> dist;

    GoalField(const GridMap& m, Cell g, int r) : map(&m), goal(g), radius(r), dist(bfs_distances(m, goal_region(m, g, r))) {}

    int at(Cell c) const { return map->is_free(c) ? dist[map->index(c)] : kUnreachable; }
};

/// STOP inside the goal region; FORWARD when the faced cell is strictly
/// closer; otherwise turn toward a closer neighbor, LEFT before RIGHT, and
/// LEFT when the only closer cell is behind.
inline Action oracle_action(const GoalField& field, const AgentState& s) {
    const int d = field.at(s.position);
    if (d == kUnreachable) throw DataError("oracle_action: goal unreachable");
    if (chebyshev(s.position, field.goal) <= field.radius) return Action::stop;
    auto closer = [&](Heading h) {
        const Cell delta = heading_delta(h);
        const int nd = field.at({s.position.x + delta.x, s.position.y + delta.y});
        return nd != kUnreachable && nd < d;
    };
    if (closer(s.heading)) return Action::forward;
    if (closer(turn_left(s.heading))) return Action::turn_left;
    if (closer(turn_right(s.heading))) return Action::turn_right;
    return Action::turn_left;
}

inline Policy oracle_policy(const GridMap& map, const EpisodeSpec& ep, int radius) {
    auto field = std::make_shared<GoalField>(map, ep.goal, radius);
    return [field](const Observation&, const AgentState& s) {
        return PolicyStep{oracle_action(*field, s), 0, 0, 0.0, false};
    };
}

struct Sample {
    Observation observation;
    Action gt_action = Action::stop;
};

struct DatasetOptions {
    int success_radius = 1;
    int max_steps = 200;
    int window = 7;
    double perturb_prob = 0.1;  // chance of executing a random move instead of the teacher's
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t episodes = 0;
};

/// Teacher rollouts from random start/goal pairs, recording (observation,
/// teacher action) at every visited state. Episodes are kept whole, so the
/// result holds at least n_samples samples.
inline Dataset generate_dataset(const std::vector<GridMap>& maps, Rng& rng, std::size_t n_samples,
                                const DatasetOptions& opt = {}) {
    if (n_samples == 0) throw StructuralError("generate_dataset: n_samples must be >= 1");
    if (maps.empty()) throw StructuralError("generate_dataset: no maps");
    for (const auto& m : maps) {
        if (m.free_cells().size() < 2) throw DataError("generate_dataset: map without free cells");
    }
    Dataset ds;
    while (ds.samples.size() < n_samples) {
        const auto eps = make_episodes(maps, rng.next_u64(), 1, opt.success_radius);
        const EpisodeSpec& ep = eps.front();
        const GridMap& map = maps[ep.map_index];
        const GoalField field(map, ep.goal, opt.success_radius);
        AgentState s{ep.start, ep.heading, ep.goal, 0, 0.0, false};
        while (!s.terminated && s.steps_taken < opt.max_steps) {
            const Action teacher = oracle_action(field, s);
            ds.samples.push_back({observe(map, s, opt.window), teacher});
            Action executed = teacher;
            if (teacher != Action::stop && rng.uniform() < opt.perturb_prob) {
                executed = static_cast<Action>(rng.below(3));
            }
            s = step(map, s, executed);
        }
        ++ds.episodes;
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbFloor = 1e-12;

struct LossBreakdown {
    double final_loss = 0.0;
    std::vector<double> exit_losses;
    std::vector<double> alphas;
    double total = 0.0;
};

/// alpha_k = 1 - 0.5 (k-1)/(K-1): 1.0 at the shallowest exit down to 0.5.
inline std::vector<double> default_exit_alphas(std::size_t num_exits) {
    std::vector<double> a(num_exits, 1.0);
    for (std::size_t k = 0; num_exits > 1 && k < num_exits; ++k) {
        a[k] = 1.0 - 0.5 * static_cast<double>(k) / static_cast<double>(num_exits - 1);
    }
    return a;
}

/// L_total = -log p_L(gt) + sum_k alpha_k * -log p_k(gt)
template <typename T>
LossBreakdown multi_exit_loss(std::span<const ProbVector<T>> exit_probs, const ProbVector<T>& final_probs,
                              std::size_t gt, std::span<const double> alphas) {
    if (alphas.size() != exit_probs.size()) throw StructuralError("multi_exit_loss: one alpha per exit required");
    if (gt >= final_probs.size()) throw StructuralError("multi_exit_loss: ground-truth action out of range");
    auto ce = [gt](const ProbVector<T>& p) {
        if (gt >= p.size()) throw StructuralError("multi_exit_loss: ground-truth action out of range");
        return -std::log(std::max(static_cast<double>(p[gt]), kProbFloor));
    };
    LossBreakdown lb;
    lb.final_loss = ce(final_probs);
    lb.alphas.assign(alphas.begin(), alphas.end());
    lb.total = lb.final_loss;
    for (std::size_t k = 0; k < exit_probs.size(); ++k) {
        lb.exit_losses.push_back(ce(exit_probs[k]));
        lb.total += alphas[k] * lb.exit_losses.back();
    }
    return lb;
}

// ---------------------------------------------------------------------------
// Gradients

enum class TrainMode { pretrain, finetune };

/// Which parameter roles a mode updates. Pretraining updates every dense
/// parameter; fine-tuning updates adapters, heads and the embedder while the
/// backbone (quantized or not) stays frozen.
struct TrainableSet {
    TrainMode mode = TrainMode::pretrain;
    bool exit_heads = true;

    bool operator()(ParamKind k) const {
        switch (k) {
            case ParamKind::exit_head: return exit_heads;
            case ParamKind::final_head:
            case ParamKind::embed: return true;
            case ParamKind::lora_a:
            case ParamKind::lora_b: return mode == TrainMode::finetune;
            case ParamKind::norm:
            case ParamKind::dense:
            case ParamKind::bias: return mode == TrainMode::pretrain;
        }
        return false;
    }
};

/// Zero gradient buffer shaped like `m`. Every projection gets a dense
/// [out x in] slot (the effective-weight gradient) even when its base is
/// quantized; adapter slots mirror the model's.
template <typename T>
MultiExitModel<T> zeros_like(const MultiExitModel<T>& m) {
    MultiExitModel<T> g = m;
    for_each_param([](const std::string&, ParamKind, Matrix<T>& p) { p.fill(T(0)); }, g);
    for (auto& b : g.blocks) {
        for (Linear<T>* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) {
            lin->weight = Matrix<T>(lin->out_features(), lin->in_features());
            lin->base.reset();
        }
    }
    return g;
}

template <typename T>
struct BackwardResult {
    MultiExitModel<T> grads;
    double loss = 0.0;                        // mean L_total over the batch
    std::vector<std::size_t> correct;         // per head (exits..., final)
};

namespace detail {

template <typename T>
void head_backward(const ExitHead<T>& head, const HeadTrace<T>& tr, std::span<const T> dlogits, ExitHead<T>* g,
                   std::span<T> dz) {
    const std::size_t h = head.w1.rows();
    const std::size_t d = head.w1.cols();
    std::vector<T> dpre(h, T(0));
    for (std::size_t j = 0; j < h; ++j) {
        T s = T(0);
        for (std::size_t a = 0; a < dlogits.size(); ++a) s += head.w2(a, j) * dlogits[a];
        dpre[j] = tr.pre[j] > T(0) ? s : T(0);
    }
    if (g) {
        for (std::size_t a = 0; a < dlogits.size(); ++a) {
            g->b2[a] += dlogits[a];
            for (std::size_t j = 0; j < h; ++j) g->w2(a, j) += dlogits[a] * tr.hidden[j];
        }
        for (std::size_t j = 0; j < h; ++j) {
            g->b1[j] += dpre[j];
            for (std::size_t k = 0; k < d; ++k) g->w1(j, k) += dpre[j] * tr.z[k];
        }
    }
    for (std::size_t j = 0; j < h; ++j) {
        const auto w = head.w1.row(j);
        for (std::size_t k = 0; k < d; ++k) dz[k] += w[k] * dpre[j];
    }
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), row by row.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& x, const std::vector<LayerNormStats<T>>& stats,
                              const Matrix<T>& gain, Matrix<T>* dgain, Matrix<T>* dbias) {
    const std::size_t d = x.cols();
    Matrix<T> dx(x.rows(), d);
    std::vector<T> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        T m1 = T(0), m2 = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (x(r, i) - stats[r].mean) * stats[r].rstd;
            dxhat[i] = dy(r, i) * gain[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
            if (dgain) {
                (*dgain)[i] += dy(r, i) * xhat[i];
                (*dbias)[i] += dy(r, i);
            }
        }
        m1 /= T(d);
        m2 /= T(d);
        for (std::size_t i = 0; i < d; ++i) dx(r, i) = stats[r].rstd * (dxhat[i] - m1 - xhat[i] * m2);
    }
    return dx;
}

template <typename T>
void add_col_sums(Matrix<T>& acc, const Matrix<T>& x) {
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) acc[c] += x(r, c);
}

template <typename T>
bool wants_weight_grad(const Linear<T>& lin, const TrainableSet& tr) {
    return (!lin.quantized() && tr(ParamKind::dense)) || (lin.lora && tr(ParamKind::lora_a));
}

// Gradient w.r.t. the block input, given the gradient w.r.t. its output.
template <typename T>
Matrix<T> block_backward(const Block<T>& blk, const PreparedBlock<T>& pb, std::size_t num_heads,
                         const BlockTrace<T>& tr, const Matrix<T>& dout, Block<T>& g, const TrainableSet& trainable) {
    const bool dense = trainable(ParamKind::dense);
    const std::size_t n = dout.rows();
    const std::size_t d = dout.cols();
    const std::size_t dh = d / num_heads;
    const T scale = T(1) / std::sqrt(T(dh));

    // MLP branch.
    if (dense) add_col_sums(g.b2, dout);
    if (wants_weight_grad(blk.w2, trainable)) accumulate_at_b(g.w2.weight, dout, tr.g);
    Matrix<T> du = matmul(dout, pb.w2.w);
    for (std::size_t i = 0; i < du.size(); ++i) du[i] *= gelu_grad(tr.u[i]);
    if (dense) add_col_sums(g.b1, du);
    if (wants_weight_grad(blk.w1, trainable)) accumulate_at_b(g.w1.weight, du, tr.h2);
    const Matrix<T> dh2 = matmul(du, pb.w1.w);
    Matrix<T> dx_mid = layer_norm_backward(dh2, tr.x_mid, tr.ln2, blk.ln2_gain, dense ? &g.ln2_gain : nullptr,
                                           dense ? &g.ln2_bias : nullptr);
    for (std::size_t i = 0; i < dx_mid.size(); ++i) dx_mid[i] += dout[i];

    // Attention branch.
    if (wants_weight_grad(blk.wo, trainable)) accumulate_at_b(g.wo.weight, dx_mid, tr.attn);
    const Matrix<T> dattn = matmul(dx_mid, pb.wo.w);
    Matrix<T> dq(n, d), dk(n, d), dv(n, d);
    std::vector<T> dp(n);
    for (std::size_t hd = 0; hd < num_heads; ++hd) {
        const std::size_t off = hd * dh;
        const Matrix<T>& p = tr.probs[hd];
        for (std::size_t i = 0; i < n; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += dattn(i, off + c) * tr.v(j, off + c);
                dp[j] = s;
                dot += p(i, j) * s;
                for (std::size_t c = 0; c < dh; ++c) dv(j, off + c) += p(i, j) * dattn(i, off + c);
            }
            for (std::size_t j = 0; j < n; ++j) {
                const T ds = p(i, j) * (dp[j] - dot) * scale;
                for (std::size_t c = 0; c < dh; ++c) {
                    dq(i, off + c) += ds * tr.k(j, off + c);
                    dk(j, off + c) += ds * tr.q(i, off + c);
                }
            }
        }
    }
    if (wants_weight_grad(blk.wq, trainable)) accumulate_at_b(g.wq.weight, dq, tr.h1);
    if (wants_weight_grad(blk.wk, trainable)) accumulate_at_b(g.wk.weight, dk, tr.h1);
    if (wants_weight_grad(blk.wv, trainable)) accumulate_at_b(g.wv.weight, dv, tr.h1);
    Matrix<T> dh1 = matmul(dq, pb.wq.w);
    const Matrix<T> dh1k = matmul(dk, pb.wk.w);
    const Matrix<T> dh1v = matmul(dv, pb.wv.w);
    for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] += dh1k[i] + dh1v[i];
    Matrix<T> dx = layer_norm_backward(dh1, tr.x_in, tr.ln1, blk.ln1_gain, dense ? &g.ln1_gain : nullptr,
                                       dense ? &g.ln1_bias : nullptr);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx_mid[i];
    return dx;
}

template <typename T>
void embed_backward(const Observation& obs, const Matrix<T>& dx, Embedder<T>& g, std::size_t window) {
    const std::size_t d = dx.cols();
    for (std::size_t i = 0; i < d; ++i) g.readout[i] += dx(0, i);
    for (std::size_t i = 0; i < g.position.size(); ++i) g.position[i] += dx[i];
    for (std::size_t r = 0; r < window; ++r) {
        for (std::size_t i = 0; i < d; ++i) {
            const T v = dx(1 + r, i);
            g.row_bias[i] += v;
            for (std::size_t c = 0; c < window; ++c) g.row_proj(i, c) += v * T(obs.window[r * window + c]);
        }
    }
    const T feats[3] = {T(obs.goal_compass[0]), T(obs.goal_compass[1]), T(obs.goal_visible)};
    const std::size_t last = window + 1;
    for (std::size_t i = 0; i < d; ++i) {
        g.compass_bias[i] += dx(last, i);
        for (std::size_t f = 0; f < 3; ++f) g.compass_proj(i, f) += dx(last, i) * feats[f];
    }
}

// Cross-entropy gradient w.r.t. logits, scaled: coef * (p - onehot(gt)).
template <typename T>
std::vector<T> ce_logit_grad(const ProbVector<T>& p, std::size_t gt, double coef) {
    std::vector<T> g(p.size(), T(0));
    if (static_cast<double>(p[gt]) < kProbFloor) return g;  // clamped: flat
    for (std::size_t a = 0; a < p.size(); ++a) g[a] = static_cast<T>(coef) * (p[a] - (a == gt ? T(1) : T(0)));
    return g;
}

}  // namespace detail

/// Exact gradients of the batch-mean multi-exit loss with respect to every
/// trainable parameter. LoRA factors receive dA = s B^T dW and dB = s dW A^T
/// from the effective-weight gradient dW.
template <typename T>
BackwardResult<T> backward(const MultiExitModel<T>& model, const PreparedModel<T>& pm, std::span<const Sample> batch,
                           std::span<const double> alphas, const TrainableSet& trainable) {
    if (batch.empty()) throw StructuralError("backward: empty batch");
    if (alphas.size() != model.config.exit_layers.size()) throw StructuralError("backward: one alpha per exit");
    const auto& cfg = model.config;
    BackwardResult<T> res{zeros_like(model), 0.0, std::vector<std::size_t>(cfg.exit_layers.size() + 1, 0)};
    auto& g = res.grads;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const bool exit_g = trainable(ParamKind::exit_head);
    const bool final_g = trainable(ParamKind::final_head);

    for (const Sample& s : batch) {
        const ForwardTrace<T> tr = forward_traced(pm, s.observation);
        const std::size_t gt = static_cast<std::size_t>(s.gt_action);
        std::vector<ProbVector<T>> exit_probs;
        for (const auto& h : tr.exit_heads) exit_probs.push_back(h.probs);
        const LossBreakdown lb = multi_exit_loss<T>(exit_probs, tr.final_head.probs, gt, alphas);
        if (!std::isfinite(lb.total)) throw NumericalError("backward: non-finite loss");
        res.loss += lb.total * inv_b;
        for (std::size_t k = 0; k < exit_probs.size(); ++k) {
            if (argmax_index(std::span<const T>(exit_probs[k])) == gt) ++res.correct[k];
        }
        if (argmax_index(std::span<const T>(tr.final_head.probs)) == gt) ++res.correct.back();

        Matrix<T> dx(cfg.num_tokens(), cfg.d_model);
        std::size_t exit_idx = exit_probs.size();
        for (std::size_t l = cfg.num_layers; l >= 1; --l) {
            auto dz = dx.row(0);
            if (l == cfg.num_layers) {
                const auto dl = detail::ce_logit_grad(tr.final_head.probs, gt, inv_b);
                detail::head_backward(model.final_head, tr.final_head, std::span<const T>(dl),
                                      final_g ? &g.final_head : nullptr, dz);
            }
            if (exit_idx > 0 && cfg.exit_layers[exit_idx - 1] == l) {
                --exit_idx;
                const auto dl = detail::ce_logit_grad(tr.exit_heads[exit_idx].probs, gt, alphas[exit_idx] * inv_b);
                detail::head_backward(model.exit_heads[exit_idx], tr.exit_heads[exit_idx], std::span<const T>(dl),
                                      exit_g ? &g.exit_heads[exit_idx] : nullptr, dz);
            }
            dx = detail::block_backward(model.blocks[l - 1], pm.blocks[l - 1], cfg.num_heads, tr.blocks[l - 1], dx,
                                        g.blocks[l - 1], trainable);
        }
        if (trainable(ParamKind::embed)) detail::embed_backward(s.observation, dx, g.embed, cfg.window);
    }

    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        auto lora_grads = [&](const Linear<T>& lin, Linear<T>& gl) {
            if (!lin.lora) return;
            const T sc = lin.lora->scale();
            Matrix<T> gb = matmul(gl.weight, transpose(lin.lora->a));
            Matrix<T> ga = matmul(transpose(lin.lora->b), gl.weight);
            for (auto& v : gb.data()) v *= sc;
            for (auto& v : ga.data()) v *= sc;
            gl.lora->a = std::move(ga);
            gl.lora->b = std::move(gb);
        };
        lora_grads(model.blocks[l].wq, g.blocks[l].wq);
        lora_grads(model.blocks[l].wv, g.blocks[l].wv);
    }
    return res;
}

template <typename T>
BackwardResult<T> backward(const MultiExitModel<T>& model, std::span<const Sample> batch,
                           std::span<const double> alphas, const TrainableSet& trainable) {
    return backward(model, PreparedModel<T>(model), batch, alphas, trainable);
}

/// Mean multi-exit loss of a batch, forward only.
template <typename T>
double batch_loss(const PreparedModel<T>& pm, std::span<const Sample> batch, std::span<const double> alphas) {
    double total = 0.0;
    for (const Sample& s : batch) {
        const FullForward<T> f = forward_full(pm, s.observation);
        total += multi_exit_loss<T>(f.exit_probs, f.final_probs, static_cast<std::size_t>(s.gt_action), alphas).total;
    }
    return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<Matrix<T>> m;
    std::vector<Matrix<T>> v;
};

/// Bias-corrected Adam update, applied in place.
template <typename T>
void adam_step(std::span<Matrix<T>* const> params, std::span<const Matrix<T>* const> grads, AdamState<T>& st) {
    if (params.size() != grads.size()) throw StructuralError("adam_step: params/grads count mismatch");
    if (st.m.empty()) {
        for (const Matrix<T>* p : params) {
            st.m.emplace_back(p->rows(), p->cols());
            st.v.emplace_back(p->rows(), p->cols());
        }
    }
    if (st.m.size() != params.size()) throw StructuralError("adam_step: optimizer state does not match params");
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix<T>& p = *params[i];
        const Matrix<T>& g = *grads[i];
        if (!p.same_shape(g) || !p.same_shape(st.m[i])) throw StructuralError("adam_step: shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = st.beta1 * static_cast<double>(st.m[i][j]) + (1.0 - st.beta1) * gj;
            const double vj = st.beta2 * static_cast<double>(st.v[i][j]) + (1.0 - st.beta2) * gj * gj;
            st.m[i][j] = static_cast<T>(mj);
            st.v[i][j] = static_cast<T>(vj);
            const double update = st.lr * (mj / bc1) / (std::sqrt(vj / bc2) + st.eps);
            p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double grad_clip = 1.0;
    std::vector<double> exit_alphas;  // empty: default_exit_alphas
    bool train_exit_heads = true;
};

struct EpochLog {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;
    std::vector<double> accuracy;  // per head: exits..., final
};

inline std::string train_csv_header(const ModelConfig& c) {
    std::string h = "epoch,split,loss";
    for (auto l : c.exit_layers) h += ",acc_exit_" + std::to_string(l);
    return h + ",acc_final";
}

inline void write_train_csv(std::ostream& out, const ModelConfig& c, std::span<const EpochLog> logs) {
    out << train_csv_header(c) << '\n';
    char buf[64];
    for (const auto& e : logs) {
        std::snprintf(buf, sizeof buf, "%.6f", e.loss);
        out << e.epoch << ',' << e.split << ',' << buf;
        for (double a : e.accuracy) {
            std::snprintf(buf, sizeof buf, ",%.6f", a);
            out << buf;
        }
        out << '\n';
    }
}

/// Loss and per-head accuracy of a dataset, forward only.
template <typename T>
EpochLog evaluate_dataset(const MultiExitModel<T>& model, std::span<const Sample> data, std::span<const double> alphas) {
    if (data.empty()) throw StructuralError("evaluate_dataset: empty dataset");
    const PreparedModel<T> pm(model);
    EpochLog log;
    log.split = "val";
    log.accuracy.assign(model.config.exit_layers.size() + 1, 0.0);
    for (const Sample& s : data) {
        const FullForward<T> f = forward_full(pm, s.observation);
        const auto gt = static_cast<std::size_t>(s.gt_action);
        log.loss += multi_exit_loss<T>(f.exit_probs, f.final_probs, gt, alphas).total;
        for (std::size_t k = 0; k < f.exit_probs.size(); ++k)
            log.accuracy[k] += argmax_index(std::span<const T>(f.exit_probs[k])) == gt ? 1.0 : 0.0;
        log.accuracy.back() += argmax_index(std::span<const T>(f.final_probs)) == gt ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(data.size());
    log.loss /= n;
    for (double& a : log.accuracy) a /= n;
    return log;
}

inline std::vector<double> resolve_alphas(const TrainOptions& opt, const ModelConfig& cfg) {
    std::vector<double> a = opt.exit_alphas.empty() ? default_exit_alphas(cfg.exit_layers.size()) : opt.exit_alphas;
    if (a.size() != cfg.exit_layers.size()) throw StructuralError("exit_alphas: one weight per exit layer required");
    if (!opt.train_exit_heads) std::fill(a.begin(), a.end(), 0.0);
    return a;
}

/// Minibatch Adam over shuffled epochs with global-norm clipping. Returns one
/// "train" log per epoch (running loss/accuracy of the minibatches) and, when
/// a validation set is given, one "val" log per epoch.
template <typename T>
std::vector<EpochLog> train(MultiExitModel<T>& model, std::span<const Sample> data, const TrainOptions& opt,
                            TrainMode mode, Rng& rng, std::span<const Sample> validation = {}) {
    if (opt.batch_size == 0) throw StructuralError("train: batch_size must be >= 1");
    if (data.empty() && opt.epochs > 0) throw StructuralError("train: empty dataset");
    const TrainableSet trainable{mode, opt.train_exit_heads};
    const std::vector<double> alphas = resolve_alphas(opt, model.config);
    AdamState<T> adam;
    adam.lr = opt.lr;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochLog> logs;
    std::vector<Sample> batch;
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        EpochLog log{epoch, "train", 0.0, std::vector<double>(model.config.exit_layers.size() + 1, 0.0)};
        for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + opt.batch_size); ++i) {
                batch.push_back(data[order[i]]);
            }
            const PreparedModel<T> pm(model);
            BackwardResult<T> br = backward(model, pm, std::span<const Sample>(batch), alphas, trainable);
            log.loss += br.loss * static_cast<double>(batch.size());
            for (std::size_t k = 0; k < br.correct.size(); ++k) log.accuracy[k] += static_cast<double>(br.correct[k]);

            std::vector<Matrix<T>*> params;
            std::vector<Matrix<T>*> grads;
            double sq = 0.0;
            for_each_param([&](const std::string&, ParamKind kind, Matrix<T>& p, Matrix<T>& gr) {
                if (!trainable(kind)) return;
                params.push_back(&p);
                grads.push_back(&gr);
                for (T v : gr.data()) sq += static_cast<double>(v) * static_cast<double>(v);
            }, model, br.grads);
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) throw NumericalError("train: non-finite gradient norm");
            if (opt.grad_clip > 0.0 && norm > opt.grad_clip) {
                const T s = static_cast<T>(opt.grad_clip / norm);
                for (Matrix<T>* gp : grads) {
                    for (T& v : gp->data()) v *= s;
                }
            }
            const std::vector<const Matrix<T>*> grads_view(grads.begin(), grads.end());
            adam_step<T>(params, grads_view, adam);
        }
        const double n = static_cast<double>(data.size());
        log.loss /= n;
        for (double& a : log.accuracy) a /= n;
        if (!std::isfinite(log.loss)) throw NumericalError("train: loss diverged in epoch " + std::to_string(epoch));
        logs.push_back(log);
        if (!validation.empty()) {
            EpochLog v = evaluate_dataset(model, validation, alphas);
            v.epoch = epoch;
            logs.push_back(v);
        }
    }
    return logs;
}

/// Full-precision behavior cloning of every dense parameter.
template <typename T>
std::vector<EpochLog> pretrain_backbone(MultiExitModel<T>& model, std::span<const Sample> data, std::size_t epochs,
                                        Rng& rng, TrainOptions opt = {}, std::span<const Sample> validation = {}) {
    if (model.mode != ModelMode::full_precision) throw StructuralError("pretrain_backbone: model must be full precision");
    opt.epochs = epochs;
    return train(model, data, opt, TrainMode::pretrain, rng, validation);
}

/// Adapter + head fine-tuning over a frozen quantized backbone.
template <typename T>
std::vector<EpochLog> finetune_qlora(MultiExitModel<T>& model, std::span<const Sample> data, std::size_t epochs,
                                     Rng& rng, TrainOptions opt = {}, std::span<const Sample> validation = {}) {
    if (model.mode != ModelMode::quantized) throw StructuralError("finetune_qlora: model must be quantized");
    opt.epochs = epochs;
    opt.train_exit_heads = true;
    return train(model, data, opt, TrainMode::finetune, rng, validation);
}

// ---------------------------------------------------------------------------
// Threshold calibration

struct CalibrationRow {
    double tau = 0.0;
    double latency_reduction = 0.0;
    double sr_retention = 0.0;
    double score = 0.0;
    Metrics metrics;
};

struct Calibration {
    double tau = 0.0;
    double score = 0.0;
    Metrics full_depth;
    std::vector<CalibrationRow> rows;
};

inline constexpr double kFullDepthTau = -1.0;

/// Scores each tau by the harmonic mean of the latency reduction
/// 1 - proxy(tau)/proxy(full) and the success retention SR(tau)/SR(full),
/// both clamped to [0, 1]. Retention is 1 when the full-depth model never
/// succeeds. Ties keep the smaller tau.
inline CalibrationRow score_tau(double tau, const Metrics& m, const Metrics& full) {
    CalibrationRow row{tau, 0.0, 0.0, 0.0, m};
    row.latency_reduction =
        full.latency_proxy > 0.0 ? std::clamp(1.0 - m.latency_proxy / full.latency_proxy, 0.0, 1.0) : 0.0;
    row.sr_retention = full.sr > 0.0 ? std::clamp(m.sr / full.sr, 0.0, 1.0) : 1.0;
    const double sum = row.latency_reduction + row.sr_retention;
    row.score = sum > 0.0 ? 2.0 * row.latency_reduction * row.sr_retention / sum : 0.0;
    return row;
}

template <typename T>
Calibration calibrate_tau(const PreparedModel<T>& pm, const std::vector<GridMap>& maps,
                          std::span<const EpisodeSpec> validation, std::span<const double> grid,
                          const EpisodeOptions& opt) {
    if (grid.empty()) throw StructuralError("calibrate_tau: empty tau grid");
    Calibration cal;
    cal.full_depth = evaluate(pm, maps, validation, kFullDepthTau, opt);
    bool first = true;
    for (double tau : grid) {
        CalibrationRow row = score_tau(tau, evaluate(pm, maps, validation, tau, opt), cal.full_depth);
        if (first || row.score > cal.score || (row.score == cal.score && tau < cal.tau)) {
            cal.tau = tau;
            cal.score = row.score;
            first = false;
        }
        cal.rows.push_back(std::move(row));
    }
    return cal;
}

}  // namespace qexit
