#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "cedc/common.hpp"
#include "cedc/gemm.hpp"
#include "cedc/tensor.hpp"

namespace cedc::nn {

using NodeId = std::int32_t;

/// Optional capture of attention internals for inspection and tests.
template <typename S>
struct ForwardTrace {
  // One entry per attention op, shaped [batch * heads, seq, seq].
  std::vector<Tensor<S>> attention_probs;
};

/// Recorded-graph reverse-mode autodiff over dense tensors.
///
/// A Graph is built fresh for every forward pass; ops append nodes in
/// topological order and record a backward closure. backward(loss) walks the
/// tape once in reverse and accumulates gradients of parameter leaves into
/// the tensors they were bound to.
template <typename S>
class Graph {
public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant leaf; gradients are not tracked through it.
  NodeId input(Tensor<S> value) { return push(std::move(value), false, nullptr); }

  /// Learnable leaf bound to external storage. After backward(), the node's
  /// gradient is added into external.grad (allocated on demand).
  NodeId parameter(Tensor<S>& external) {
    const NodeId id = push(external, true, &external);
    return id;
  }

  const Tensor<S>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  /// Gradient of a node, valid after backward(). Empty if nothing flowed.
  const std::vector<S>& grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  // ---- ops ------------------------------------------------------------

  /// Row gather: out[i, :] = table[ids[i], :]. table must be 2-D.
  NodeId embedding(NodeId table, std::vector<std::int32_t> ids) {
    const Tensor<S>& t = value(table);
    const std::int64_t cols = t.dim(1);
    const std::int64_t rows = t.dim(0);
    Tensor<S> out({static_cast<std::int64_t>(ids.size()), cols});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::int32_t id = ids[i];
      if (id < 0 || id >= rows) throw UsageError("embedding: id out of range");
      std::copy_n(&t.data[static_cast<std::size_t>(id) * cols], cols,
                  &out.data[i * static_cast<std::size_t>(cols)]);
    }
    const NodeId o = push(std::move(out), needs_grad(table), nullptr);
    record(o, [this, o, table, ids = std::move(ids), cols]() {
      if (!needs_grad(table)) return;
      std::vector<S>& dt = grad_buf(table);
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* drow = dt.data() + static_cast<std::size_t>(ids[i]) * cols;
        const S* g = dout.data() + i * static_cast<std::size_t>(cols);
        for (std::int64_t c = 0; c < cols; ++c) drow[c] += g[c];
      }
    });
    return o;
  }

  /// Elementwise sum of two same-shaped tensors.
  NodeId add(NodeId a, NodeId b) {
    const Tensor<S>& ta = value(a);
    const Tensor<S>& tb = value(b);
    if (!ta.same_shape(tb)) throw UsageError("add: shape mismatch");
    Tensor<S> out(ta.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    const NodeId o = push(std::move(out), needs_grad(a) || needs_grad(b), nullptr);
    record(o, [this, o, a, b]() {
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      for (NodeId in : {a, b}) {
        if (!needs_grad(in)) continue;
        std::vector<S>& din = grad_buf(in);
        for (std::size_t i = 0; i < dout.size(); ++i) din[i] += dout[i];
      }
    });
    return o;
  }

  /// x[R,C] * w[C,N] + bias[N]; bias may be < 0 sentinel... not allowed:
  /// always pass a bias node (use a zero parameter if none is wanted).
  NodeId linear(NodeId x, NodeId w, NodeId bias) {
    const Tensor<S>& tx = value(x);
    const Tensor<S>& tw = value(w);
    const Tensor<S>& tb = value(bias);
    const std::int64_t R = tx.dim(0), K = tx.dim(1), N = tw.dim(1);
    if (tw.dim(0) != K || tb.numel() != N) throw UsageError("linear: shape mismatch");
    Tensor<S> out({R, N});
    gemm_nn(tx.data.data(), tw.data.data(), out.data.data(), R, K, N);
    for (std::int64_t i = 0; i < R; ++i) {
      S* row = out.data.data() + i * N;
      for (std::int64_t j = 0; j < N; ++j) row[j] += tb.data[static_cast<std::size_t>(j)];
    }
    const NodeId o = push(std::move(out), true, nullptr);
    record(o, [this, o, x, w, bias, R, K, N]() {
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      const Tensor<S>& tx = value(x);
      const Tensor<S>& tw = value(w);
      if (needs_grad(x)) {
        std::vector<S> wt(static_cast<std::size_t>(K * N));
        transpose(tw.data.data(), wt.data(), K, N);
        gemm_nn(dout.data(), wt.data(), grad_buf(x).data(), R, N, K, /*accumulate=*/true);
      }
      if (needs_grad(w)) {
        gemm_tn(tx.data.data(), dout.data(), grad_buf(w).data(), R, K, N, /*accumulate=*/true);
      }
      if (needs_grad(bias)) {
        std::vector<S>& db = grad_buf(bias);
        for (std::int64_t i = 0; i < R; ++i) {
          const S* row = dout.data() + i * N;
          for (std::int64_t j = 0; j < N; ++j) db[static_cast<std::size_t>(j)] += row[j];
        }
      }
    });
    return o;
  }

  /// Row-wise layer normalization with learnable gain and bias.
  /// Statistics are accumulated in double regardless of Scalar.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5) {
    const Tensor<S>& tx = value(x);
    const std::int64_t R = tx.dim(0), C = tx.dim(1);
    const Tensor<S>& tg = value(gain);
    const Tensor<S>& tb = value(bias);
    if (tg.numel() != C || tb.numel() != C) throw UsageError("layer_norm: shape mismatch");
    Tensor<S> out({R, C});
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * R));
    for (std::int64_t i = 0; i < R; ++i) {
      const S* row = tx.data.data() + i * C;
      double mean = 0.0;
      for (std::int64_t c = 0; c < C; ++c) mean += static_cast<double>(row[c]);
      mean /= static_cast<double>(C);
      double var = 0.0;
      for (std::int64_t c = 0; c < C; ++c) {
        const double d = static_cast<double>(row[c]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*stats)[static_cast<std::size_t>(2 * i)] = mean;
      (*stats)[static_cast<std::size_t>(2 * i + 1)] = rstd;
      S* orow = out.data.data() + i * C;
      for (std::int64_t c = 0; c < C; ++c) {
        const double xhat = (static_cast<double>(row[c]) - mean) * rstd;
        orow[c] = static_cast<S>(xhat * static_cast<double>(tg.data[static_cast<std::size_t>(c)]) +
                                 static_cast<double>(tb.data[static_cast<std::size_t>(c)]));
      }
    }
    const NodeId o = push(std::move(out), true, nullptr);
    record(o, [this, o, x, gain, bias, R, C, stats]() {
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      const Tensor<S>& tx = value(x);
      const Tensor<S>& tg = value(gain);
      const bool want_x = needs_grad(x);
      std::vector<S>* dx = want_x ? &grad_buf(x) : nullptr;
      std::vector<S>* dg = needs_grad(gain) ? &grad_buf(gain) : nullptr;
      std::vector<S>* db = needs_grad(bias) ? &grad_buf(bias) : nullptr;
      for (std::int64_t i = 0; i < R; ++i) {
        const double mean = (*stats)[static_cast<std::size_t>(2 * i)];
        const double rstd = (*stats)[static_cast<std::size_t>(2 * i + 1)];
        const S* xrow = tx.data.data() + i * C;
        const S* drow = dout.data() + i * C;
        double sum_gdy = 0.0, sum_gdy_xhat = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
          const double xhat = (static_cast<double>(xrow[c]) - mean) * rstd;
          const double gdy = static_cast<double>(tg.data[static_cast<std::size_t>(c)]) *
                             static_cast<double>(drow[c]);
          sum_gdy += gdy;
          sum_gdy_xhat += gdy * xhat;
          if (dg) (*dg)[static_cast<std::size_t>(c)] += static_cast<S>(drow[c] * xhat);
          if (db) (*db)[static_cast<std::size_t>(c)] += drow[c];
        }
        if (want_x) {
          S* dxrow = dx->data() + i * C;
          const double invC = 1.0 / static_cast<double>(C);
          for (std::int64_t c = 0; c < C; ++c) {
            const double xhat = (static_cast<double>(xrow[c]) - mean) * rstd;
            const double gdy = static_cast<double>(tg.data[static_cast<std::size_t>(c)]) *
                               static_cast<double>(drow[c]);
            dxrow[c] += static_cast<S>(rstd * (gdy - invC * sum_gdy - xhat * invC * sum_gdy_xhat));
          }
        }
      }
    });
    return o;
  }

  /// GELU, tanh approximation.
  NodeId gelu(NodeId x) {
    const Tensor<S>& tx = value(x);
    Tensor<S> out(tx.shape);
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      const double v = static_cast<double>(tx.data[i]);
      const double t = std::tanh(kC * (v + kA * v * v * v));
      out.data[i] = static_cast<S>(0.5 * v * (1.0 + t));
    }
    const NodeId o = push(std::move(out), needs_grad(x), nullptr);
    record(o, [this, o, x]() {
      if (!needs_grad(x)) return;
      constexpr double kC = 0.7978845608028654;
      constexpr double kA = 0.044715;
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      const Tensor<S>& tx = value(x);
      std::vector<S>& dx = grad_buf(x);
      for (std::size_t i = 0; i < dout.size(); ++i) {
        const double v = static_cast<double>(tx.data[i]);
        const double u = kC * (v + kA * v * v * v);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        dx[i] += static_cast<S>(static_cast<double>(dout[i]) * d);
      }
    });
    return o;
  }

  /// Inverted dropout with keep-probability 1-p. No-op node when p == 0.
  NodeId dropout(NodeId x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw UsageError("dropout: p must be < 1");
    const Tensor<S>& tx = value(x);
    const S scale = static_cast<S>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<S>>(tx.data.size());
    Tensor<S> out(tx.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      const S m = rng.uniform_real() < p ? S(0) : scale;
      (*mask)[i] = m;
      out.data[i] = tx.data[i] * m;
    }
    const NodeId o = push(std::move(out), needs_grad(x), nullptr);
    record(o, [this, o, x, mask]() {
      if (!needs_grad(x)) return;
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      std::vector<S>& dx = grad_buf(x);
      for (std::size_t i = 0; i < dout.size(); ++i) dx[i] += dout[i] * (*mask)[i];
    });
    return o;
  }

  /// Multi-head causal self-attention over packed rows.
  ///
  /// q, k, v are [batch*seq, d_model]; head h uses the column slice
  /// [h*dh, (h+1)*dh). Scores are scaled by 1/sqrt(dh); when alibi_slopes is
  /// non-null, -slope[h] * (i - j) is added before the softmax. Softmax
  /// normalizers accumulate in double. Positions j > i carry exactly zero
  /// weight by construction.
  NodeId causal_self_attention(NodeId q, NodeId k, NodeId v, std::int64_t batch,
                               std::int64_t seq, std::int64_t n_heads,
                               const std::vector<double>* alibi_slopes,
                               ForwardTrace<S>* trace = nullptr) {
    const Tensor<S>& tq = value(q);
    const std::int64_t d = tq.dim(1);
    if (d % n_heads != 0) throw UsageError("attention: d_model not divisible by heads");
    if (tq.dim(0) != batch * seq) throw UsageError("attention: rows != batch*seq");
    const std::int64_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<S>>(
        static_cast<std::size_t>(batch * n_heads * seq * seq), S(0));
    Tensor<S> out({batch * seq, d});

    const Tensor<S>& tk = value(k);
    const Tensor<S>& tv = value(v);
    auto run = [&](std::int64_t bh0, std::int64_t bh1) {
      for (std::int64_t bh = bh0; bh < bh1; ++bh) {
        const std::int64_t b = bh / n_heads;
        const std::int64_t h = bh % n_heads;
        const S* qb = tq.data.data() + b * seq * d + h * dh;
        const S* kb = tk.data.data() + b * seq * d + h * dh;
        const S* vb = tv.data.data() + b * seq * d + h * dh;
        S* pb = probs->data() + bh * seq * seq;
        S* ob = out.data.data() + b * seq * d + h * dh;
        const double slope = alibi_slopes ? (*alibi_slopes)[static_cast<std::size_t>(h)] : 0.0;
        for (std::int64_t i = 0; i < seq; ++i) {
          const S* qi = qb + i * d;
          S* pi = pb + i * seq;
          double mx = -1e300;
          for (std::int64_t j = 0; j <= i; ++j) {
            const S* kj = kb + j * d;
            double s = 0.0;
            for (std::int64_t c = 0; c < dh; ++c)
              s += static_cast<double>(qi[c]) * static_cast<double>(kj[c]);
            s = s * scale - slope * static_cast<double>(i - j);
            pi[j] = static_cast<S>(s);
            if (s > mx) mx = s;
          }
          double denom = 0.0;
          for (std::int64_t j = 0; j <= i; ++j) denom += std::exp(static_cast<double>(pi[j]) - mx);
          const double inv = 1.0 / denom;
          S* oi = ob + i * d;
          std::fill(oi, oi + dh, S(0));
          for (std::int64_t j = 0; j <= i; ++j) {
            const S p = static_cast<S>(std::exp(static_cast<double>(pi[j]) - mx) * inv);
            pi[j] = p;
            const S* vj = vb + j * d;
            for (std::int64_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
          }
        }
      }
    };
    if (batch * n_heads > 1 && batch * n_heads * seq * seq * dh >= detail::kParallelFlops) {
      parallel_for(0, batch * n_heads, run);
    } else {
      run(0, batch * n_heads);
    }

    if (trace) {
      Tensor<S> snap({batch * n_heads, seq, seq}, *probs);
      trace->attention_probs.push_back(std::move(snap));
    }

    const NodeId o = push(std::move(out), true, nullptr);
    record(o, [this, o, q, k, v, batch, seq, n_heads, dh, d, scale, probs]() {
      const std::vector<S>& dout = nodes_[static_cast<std::size_t>(o)].grad;
      const Tensor<S>& tq = value(q);
      const Tensor<S>& tk = value(k);
      const Tensor<S>& tv = value(v);
      std::vector<S>& dq = grad_buf(q);
      std::vector<S>& dk = grad_buf(k);
      std::vector<S>& dv = grad_buf(v);
      auto run = [&](std::int64_t bh0, std::int64_t bh1) {
        std::vector<double> dp(static_cast<std::size_t>(seq));
        for (std::int64_t bh = bh0; bh < bh1; ++bh) {
          const std::int64_t b = bh / n_heads;
          const std::int64_t h = bh % n_heads;
          const std::int64_t base = b * seq * d + h * dh;
          const S* qb = tq.data.data() + base;
          const S* kb = tk.data.data() + base;
          const S* vb = tv.data.data() + base;
          const S* gb = dout.data() + base;
          const S* pb = probs->data() + bh * seq * seq;
          S* dqb = dq.data() + base;
          S* dkb = dk.data() + base;
          S* dvb = dv.data() + base;
          for (std::int64_t i = 0; i < seq; ++i) {
            const S* gi = gb + i * d;
            const S* pi = pb + i * seq;
            // dprobs and softmax jacobian, double accumulated per row
            double dot = 0.0;
            for (std::int64_t j = 0; j <= i; ++j) {
              const S* vj = vb + j * d;
              double s = 0.0;
              for (std::int64_t c = 0; c < dh; ++c)
                s += static_cast<double>(gi[c]) * static_cast<double>(vj[c]);
              dp[static_cast<std::size_t>(j)] = s;
              dot += s * static_cast<double>(pi[j]);
            }
            const S* qi = qb + i * d;
            S* dqi = dqb + i * d;
            for (std::int64_t j = 0; j <= i; ++j) {
              const double pij = static_cast<double>(pi[j]);
              const double ds = pij * (dp[static_cast<std::size_t>(j)] - dot) * scale;
              const S dss = static_cast<S>(ds);
              const S* kj = kb + j * d;
              S* dkj = dkb + j * d;
              S* dvj = dvb + j * d;
              const S pij_s = pi[j];
              for (std::int64_t c = 0; c < dh; ++c) {
                dqi[c] += dss * kj[c];
                dkj[c] += dss * qi[c];
                dvj[c] += pij_s * gi[c];
              }
            }
          }
        }
      };
      // dk/dv rows are written across many (i) iterations of the same (b,h)
      // slice; ownership is per (b,h), so the partition stays race-free.
      if (batch * n_heads > 1 && batch * n_heads * seq * seq * dh >= detail::kParallelFlops) {
        parallel_for(0, batch * n_heads, run);
      } else {
        run(0, batch * n_heads);
      }
    });
    return o;
  }

  /// Mean negative log-likelihood of targets under logits [R, V], restricted
  /// to rows with include_mask != 0. Throws if every row is excluded.
  NodeId cross_entropy(NodeId logits, std::vector<std::int32_t> targets,
                       std::vector<std::uint8_t> include_mask) {
    const Tensor<S>& tl = value(logits);
    const std::int64_t R = tl.dim(0), V = tl.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != R ||
        static_cast<std::int64_t>(include_mask.size()) != R)
      throw UsageError("cross_entropy: targets/mask size mismatch");
    std::int64_t n_used = 0;
    for (auto m : include_mask) n_used += m ? 1 : 0;
    if (n_used == 0) throw UsageError("cross_entropy: all positions excluded from the loss");

    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(R * V));
    double total = 0.0;
    for (std::int64_t i = 0; i < R; ++i) {
      if (!include_mask[static_cast<std::size_t>(i)]) continue;
      const S* row = tl.data.data() + i * V;
      const std::int32_t tgt = targets[static_cast<std::size_t>(i)];
      if (tgt < 0 || tgt >= V) throw UsageError("cross_entropy: target id out of range");
      double mx = -1e300;
      for (std::int64_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double denom = 0.0;
      for (std::int64_t j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
      const double inv = 1.0 / denom;
      S* prow = probs->data() + i * V;
      for (std::int64_t j = 0; j < V; ++j)
        prow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - mx) * inv);
      total += mx + std::log(denom) - static_cast<double>(row[tgt]);
    }
    Tensor<S> out({1});
    out.data[0] = static_cast<S>(total / static_cast<double>(n_used));
    const NodeId o = push(std::move(out), true, nullptr);
    record(o, [this, o, logits, targets = std::move(targets), mask = std::move(include_mask),
               probs, R, V, n_used]() {
      if (!needs_grad(logits)) return;
      const S upstream = nodes_[static_cast<std::size_t>(o)].grad[0];
      const S inv_n = upstream / static_cast<S>(n_used);
      std::vector<S>& dl = grad_buf(logits);
      for (std::int64_t i = 0; i < R; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const S* prow = probs->data() + i * V;
        S* drow = dl.data() + i * V;
        for (std::int64_t j = 0; j < V; ++j) drow[j] += prow[j] * inv_n;
        drow[targets[static_cast<std::size_t>(i)]] -= inv_n;
      }
    });
    return o;
  }

  /// Reverse pass from a scalar loss node. May be called once per graph.
  void backward(NodeId loss) {
    if (backward_done_) throw UsageError("backward: called twice on the same recorded graph");
    backward_done_ = true;
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.value.numel() != 1) throw UsageError("backward: loss must be scalar");
    grad_buf(loss)[0] = S(1);
    for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward_fn && !n.grad.empty()) n.backward_fn();
    }
    // Flush parameter leaves into their bound tensors; untouched parameters
    // get a zero gradient so optimizers see every tensor populated.
    for (Node& n : nodes_) {
      if (!n.external) continue;
      n.external->ensure_grad();
      if (n.grad.empty()) continue;
      std::vector<S>& dst = *n.external->grad;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

  bool backward_done() const { return backward_done_; }
  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Tensor<S> value;
    std::vector<S> grad;
    std::function<void()> backward_fn;
    Tensor<S>* external = nullptr;
    bool needs_grad = false;
  };

  NodeId push(Tensor<S> value, bool needs, Tensor<S>* external) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.external = external;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void record(NodeId id, std::function<void()> fn) {
    nodes_[static_cast<std::size_t>(id)].backward_fn = std::move(fn);
  }

  bool needs_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  std::vector<S>& grad_buf(NodeId id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.data.size(), S(0));
    return n.grad;
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace cedc::nn
