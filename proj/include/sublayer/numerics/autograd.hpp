#pragma once

// Tape-based reverse-mode differentiation over matrix-valued nodes.
//
// Nodes are appended in evaluation order, so walking the tape backwards is a
// valid topological order and every node's backward runs at most once. A
// graph built with recording disabled stores values only, which is what the
// evaluation paths use.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "sublayer/numerics/kernels.hpp"
#include "sublayer/numerics/rng.hpp"
#include "sublayer/numerics/tensor.hpp"

namespace sublayer {

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad && record_});
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op result. `backward` runs only when gradients are tracked.
  Var node(Tensor value, std::vector<std::size_t> parents, Backward backward, const char* op) {
    require_finite(value, op);
    bool needs = false;
    if (record_)
      for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    Node n{std::move(value), {}, {}, {}, needs};
    if (needs) {
      n.parents = std::move(parents);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // Gradient of the last backward() target with respect to the node; zeros
  // when no path reached it.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

  // Mutable accumulator for a parent's gradient, allocated on first use.
  Tensor& grad_acc(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor& acc = grad_acc(id);
    require_same_shape(acc, g, "gradient accumulate");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

  // Reverse sweep from `output`, seeded with ones (scalar losses) or `seed`.
  void backward(Var output) {
    const Tensor& v = value(output.id());
    backward(output, Tensor(v.shape(), 1.0));
  }

  void backward(Var output, const Tensor& seed) {
    if (!record_) throw Error("backward on a graph built without recording");
    zero_grad();
    require_same_shape(seed, value(output.id()), "backward seed");
    if (!nodes_[output.id()].requires_grad) return;
    nodes_[output.id()].grad = seed;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      require_finite(n.grad, "backward");
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool record_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) throw Error("operands belong to different graphs");
  return a.graph();
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return g.node(kernels::matmul(a.value(), b.value()), {ia, ib},
                [ia, ib](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad_of(self);
                  if (g.requires_grad(ia)) g.accumulate(ia, kernels::matmul(dy, g.value(ib), false, true));
                  if (g.requires_grad(ib)) g.accumulate(ib, kernels::matmul(g.value(ia), dy, true, false));
                },
                "matmul");
}

// x W + b, bias broadcast over rows.
inline Var linear(Var x, Var w, Var b) {
  Graph& g = detail::same_graph(x, w);
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return g.node(kernels::linear(x.value(), w.value(), b.value()), {ix, iw, ib},
                [ix, iw, ib](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad_of(self);
                  if (g.requires_grad(ix)) g.accumulate(ix, kernels::matmul(dy, g.value(iw), false, true));
                  if (g.requires_grad(iw)) g.accumulate(iw, kernels::matmul(g.value(ix), dy, true, false));
                  if (g.requires_grad(ib)) {
                    Tensor db(g.value(ib).shape());
                    for (std::size_t i = 0; i < dy.rows(); ++i)
                      for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += dy(i, j);
                    g.accumulate(ib, db);
                  }
                },
                "linear");
}

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return g.node(kernels::add(a.value(), b.value()), {ia, ib},
                [ia, ib](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad_of(self);
                  g.accumulate(ia, dy);
                  g.accumulate(ib, dy);
                },
                "add");
}

// Row-broadcast add of a vector to every row of a matrix.
inline Var add_row(Var x, Var b) {
  Graph& g = detail::same_graph(x, b);
  const Tensor& xv = x.value();
  require_matrix(xv, "add_row");
  if (b.value().size() != xv.cols()) throw ShapeError("add_row: width mismatch");
  Tensor y = xv;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b.value()[j];
  const std::size_t ix = x.id(), ib = b.id();
  return g.node(std::move(y), {ix, ib},
                [ix, ib](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad_of(self);
                  g.accumulate(ix, dy);
                  if (g.requires_grad(ib)) {
                    Tensor db(g.value(ib).shape());
                    for (std::size_t i = 0; i < dy.rows(); ++i)
                      for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += dy(i, j);
                    g.accumulate(ib, db);
                  }
                },
                "add_row");
}

inline Var scale(Var x, double s) {
  Tensor y = x.value();
  for (double& v : y.data()) v *= s;
  const std::size_t ix = x.id();
  return x.graph().node(std::move(y), {ix},
                        [ix, s](Graph& g, std::size_t self) {
                          Tensor dx = g.grad_of(self);
                          for (double& v : dx.data()) v *= s;
                          g.accumulate(ix, dx);
                        },
                        "scale");
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.node(std::move(y), {ia, ib},
                [ia, ib](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad_of(self);
                  Tensor da = dy, db = dy;
                  for (std::size_t i = 0; i < dy.size(); ++i) {
                    da[i] *= g.value(ib)[i];
                    db[i] *= g.value(ia)[i];
                  }
                  g.accumulate(ia, da);
                  g.accumulate(ib, db);
                },
                "mul");
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.graph().node(Tensor::scalar(s), {ix},
                        [ix](Graph& g, std::size_t self) {
                          g.accumulate(ix, Tensor(g.value(ix).shape(), g.grad_of(self).item()));
                        },
                        "sum");
}

inline Var relu(Var x) {
  const std::size_t ix = x.id();
  return x.graph().node(kernels::relu(x.value()), {ix},
                        [ix](Graph& g, std::size_t self) {
                          Tensor dx = g.grad_of(self);
                          const Tensor& xv = g.value(ix);
                          for (std::size_t i = 0; i < dx.size(); ++i)
                            if (!(xv[i] > 0.0)) dx[i] = 0.0;
                          g.accumulate(ix, dx);
                        },
                        "relu");
}

inline Var softmax(Var x) {
  const std::size_t ix = x.id();
  return x.graph().node(kernels::softmax_rows(x.value()), {ix},
                        [ix](Graph& g, std::size_t self) {
                          const Tensor& y = g.value(self);
                          const Tensor& dy = g.grad_of(self);
                          const std::size_t w = y.rank() == 2 ? y.cols() : y.size();
                          Tensor dx(y.shape());
                          for (std::size_t r = 0; r < y.size() / w; ++r) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < w; ++j) dot += dy[r * w + j] * y[r * w + j];
                            for (std::size_t j = 0; j < w; ++j)
                              dx[r * w + j] = y[r * w + j] * (dy[r * w + j] - dot);
                          }
                          g.accumulate(ix, dx);
                        },
                        "softmax");
}

inline Var layer_norm(Var x, Var gamma, Var beta) {
  Graph& g = detail::same_graph(x, gamma);
  auto stats = std::make_shared<kernels::LayerNormStats>();
  Tensor y = kernels::layer_norm(x.value(), gamma.value(), beta.value(),
                                 g.recording() ? stats.get() : nullptr);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.node(std::move(y), {ix, ig, ib},
                [ix, ig, ib, stats](Graph& g, std::size_t self) {
                  const Tensor& xv = g.value(ix);
                  const Tensor& gm = g.value(ig);
                  const Tensor& dy = g.grad_of(self);
                  const std::size_t n = xv.rows(), d = xv.cols();
                  Tensor dx = Tensor::matrix(n, d);
                  Tensor dg(gm.shape()), db(gm.shape());
                  std::vector<double> xhat(d), dxhat(d);
                  for (std::size_t i = 0; i < n; ++i) {
                    const double mean = stats->mean[i], rstd = stats->rstd[i];
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      xhat[j] = (xv(i, j) - mean) * rstd;
                      dxhat[j] = dy(i, j) * gm[j];
                      sum_dxhat += dxhat[j];
                      sum_dxhat_xhat += dxhat[j] * xhat[j];
                      dg[j] += dy(i, j) * xhat[j];
                      db[j] += dy(i, j);
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j)
                      dx(i, j) = rstd * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
                  }
                  g.accumulate(ix, dx);
                  g.accumulate(ig, dg);
                  g.accumulate(ib, db);
                },
                "layer_norm");
}

// Scaled dot-product multi-head attention over a packed batch. Projections
// happen outside; this op covers softmax(QK^T/sqrt(dk))V per segment and head.
inline Var attention(Var q, Var k, Var v, const kernels::AttentionLayout& layout) {
  Graph& g = detail::same_graph(q, k);
  auto cache = std::make_shared<kernels::AttentionCache>();
  Tensor out = kernels::attention(q.value(), k.value(), v.value(), layout, cache.get());
  if (!g.recording()) cache.reset();
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return g.node(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, layout, cache](Graph& g, std::size_t self) {
        const Tensor& qv = g.value(iq);
        const Tensor& kv = g.value(ik);
        const Tensor& vv = g.value(iv);
        const Tensor& dout = g.grad_of(self);
        const std::size_t d = qv.cols();
        const std::size_t dk = d / layout.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        Tensor dq(qv.shape()), dkey(kv.shape()), dval(vv.shape());
        std::vector<double> dp;
        for (std::size_t b = 0; b < layout.queries.segments(); ++b) {
          const std::size_t lq = layout.queries.length(b), lk = layout.keys.length(b);
          const std::size_t q0 = layout.queries.begin(b), k0 = layout.keys.begin(b);
          for (std::size_t h = 0; h < layout.heads; ++h) {
            const std::size_t c0 = h * dk;
            for (std::size_t i = 0; i < lq; ++i) {
              const std::size_t visible = layout.causal ? (lk - lq + i + 1) : lk;
              const double* p = cache->probs.data() + cache->segment_base[b] + (h * lq + i) * lk;
              const double* go = dout.data().data() + (q0 + i) * d + c0;
              dp.assign(visible, 0.0);
              double dot = 0.0;
              for (std::size_t j = 0; j < visible; ++j) {
                const double* vr = vv.data().data() + (k0 + j) * d + c0;
                double* dvr = dval.data().data() + (k0 + j) * d + c0;
                double s = 0.0;
                for (std::size_t c = 0; c < dk; ++c) {
                  s += go[c] * vr[c];
                  dvr[c] += p[j] * go[c];
                }
                dp[j] = s;
                dot += p[j] * s;
              }
              const double* qr = qv.data().data() + (q0 + i) * d + c0;
              double* dqr = dq.data().data() + (q0 + i) * d + c0;
              for (std::size_t j = 0; j < visible; ++j) {
                const double ds = p[j] * (dp[j] - dot) * scale;
                const double* kr = kv.data().data() + (k0 + j) * d + c0;
                double* dkr = dkey.data().data() + (k0 + j) * d + c0;
                for (std::size_t c = 0; c < dk; ++c) {
                  dqr[c] += ds * kr[c];
                  dkr[c] += ds * qr[c];
                }
              }
            }
          }
        }
        g.accumulate(iq, dq);
        g.accumulate(ik, dkey);
        g.accumulate(iv, dval);
      },
      "attention");
}

inline Var embedding_lookup(Var table, std::span<const int> ids) {
  const Tensor& t = table.value();
  require_matrix(t, "embedding_lookup");
  Tensor y = Tensor::matrix(ids.size(), t.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= t.rows()) {
      throw ShapeError("embedding_lookup: token id " + std::to_string(ids[r]) +
                       " outside vocabulary of " + std::to_string(t.rows()));
    }
    auto src = t.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), y.row(r).begin());
  }
  const std::size_t it = table.id();
  std::vector<int> keep(ids.begin(), ids.end());
  return table.graph().node(std::move(y), {it},
                            [it, keep = std::move(keep)](Graph& g, std::size_t self) {
                              const Tensor& dy = g.grad_of(self);
                              Tensor& acc = g.grad_acc(it);
                              for (std::size_t r = 0; r < keep.size(); ++r) {
                                auto dst = acc.row(static_cast<std::size_t>(keep[r]));
                                auto src = dy.row(r);
                                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                              }
                            },
                            "embedding_lookup");
}

// Inverted dropout: kept units are scaled by 1/(1-p). p == 0 draws nothing.
inline Var dropout(Var x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(x.value().shape());
  for (double& m : mask.data()) m = rng.uniform() < p ? 0.0 : keep_scale;
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.graph().node(std::move(y), {ix},
                        [ix, mask = std::move(mask)](Graph& g, std::size_t self) {
                          Tensor dx = g.grad_of(self);
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
                          g.accumulate(ix, dx);
                        },
                        "dropout");
}

// Mean label-smoothed cross-entropy over rows; target distribution is
// (1 - smoothing) on the gold id plus smoothing / vocab everywhere.
inline Var cross_entropy(Var logits, std::span<const int> targets, double smoothing) {
  const Tensor& z = logits.value();
  require_matrix(z, "cross_entropy");
  if (targets.size() != z.rows()) throw ShapeError("cross_entropy: target count mismatch");
  if (z.rows() == 0) throw ShapeError("cross_entropy: empty batch");
  const std::size_t vocab = z.cols();
  Tensor logp = kernels::log_softmax_rows(z);
  const double uniform = smoothing / static_cast<double>(vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw ShapeError("cross_entropy: bad target");
    double row_sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) row_sum += logp(r, j);
    total -= (1.0 - smoothing) * logp(r, static_cast<std::size_t>(t)) + uniform * row_sum;
  }
  const double n = static_cast<double>(z.rows());
  const std::size_t il = logits.id();
  std::vector<int> keep(targets.begin(), targets.end());
  return logits.graph().node(
      Tensor::scalar(total / n), {il},
      [il, logp = std::move(logp), keep = std::move(keep), smoothing, uniform, n](Graph& g,
                                                                                  std::size_t self) {
        const double scale = g.grad_of(self).item() / n;
        Tensor dz(logp.shape());
        for (std::size_t r = 0; r < logp.rows(); ++r)
          for (std::size_t j = 0; j < logp.cols(); ++j) {
            double target = uniform;
            if (static_cast<int>(j) == keep[r]) target += 1.0 - smoothing;
            dz(r, j) = (std::exp(logp(r, j)) - target) * scale;
          }
        g.accumulate(il, dz);
      },
      "cross_entropy");
}

}  // namespace sublayer
