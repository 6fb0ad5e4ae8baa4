#pragma once

// Forward (and a few backward) kernels on plain tensors. Both the autograd
// graph and the incremental decoder call these, so a row computed by either
// path goes through identical arithmetic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "sublayer/numerics/tensor.hpp"

namespace sublayer::kernels {

inline constexpr double kLayerNormEps = 1e-5;

// C = op(A) * op(B) where op transposes when the flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t m = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(n, m);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < n; ++i) {
      double* crow = pc + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        const double* arow = pa + i * k;
        const double* brow = pb + j * k;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        pc[i * m + j] = s;
      }
  } else if (trans_a && !trans_b) {
    // a is k x n, b is k x m
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = pa + p * n;
      const double* brow = pb + p * m;
      for (std::size_t i = 0; i < n; ++i) {
        const double av = arow[i];
        double* crow = pc + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += pa[p * n + i] * pb[j * k + p];
        pc[i * m + j] = s;
      }
  }
  return c;
}

// X W + b with b broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (b.size() != y.cols()) throw ShapeError("linear: bias length mismatch");
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto row = y.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
  return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline void softmax_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double s = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : row) v /= s;
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor y = x.rank() == 1 ? x.reshaped({1, x.size()}) : x;
  require_matrix(y, "softmax");
  for (std::size_t i = 0; i < y.rows(); ++i) softmax_inplace(y.row(i));
  return x.rank() == 1 ? y.reshaped(x.shape()) : y;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax");
  Tensor y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto row = y.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : row) v -= lse;
  }
  return y;
}

struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};

// Row-wise (x - mean) / sqrt(var + eps) * gamma + beta, population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         LayerNormStats* stats = nullptr) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: affine size mismatch");
  Tensor y = Tensor::matrix(n, d);
  if (stats) {
    stats->mean.assign(n, 0.0);
    stats->rstd.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    auto yr = y.row(i);
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
    if (stats) {
      stats->mean[i] = mean;
      stats->rstd[i] = rstd;
    }
  }
  return y;
}

// Packed variable-length batch: segment b occupies rows [offsets[b], offsets[b+1]).
struct SegmentLayout {
  std::vector<std::size_t> offsets{0};

  std::size_t segments() const { return offsets.size() - 1; }
  std::size_t begin(std::size_t b) const { return offsets[b]; }
  std::size_t length(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
  std::size_t total() const { return offsets.back(); }

  static SegmentLayout from_lengths(std::span<const std::size_t> lengths) {
    SegmentLayout s;
    for (std::size_t len : lengths) s.offsets.push_back(s.offsets.back() + len);
    return s;
  }

  bool operator==(const SegmentLayout&) const = default;
};

struct AttentionLayout {
  SegmentLayout queries;
  SegmentLayout keys;
  std::size_t heads = 1;
  // Causal: query i of a segment sits at position (key_len - query_len + i)
  // and sees keys 0..position. This covers both full and incremental decoding.
  bool causal = false;
};

// Per (segment, head, query) softmax rows, kept for the backward pass.
struct AttentionCache {
  std::vector<double> probs;
  std::vector<std::size_t> segment_base;  // start of each segment's block in probs
};

inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& layout, AttentionCache* cache = nullptr) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_same_shape(k, v, "attention(k, v)");
  const std::size_t d = q.cols();
  if (k.cols() != d) throw ShapeError("attention: query/key width mismatch");
  if (layout.heads == 0 || d % layout.heads != 0) throw ShapeError("attention: bad head count");
  if (layout.queries.total() != q.rows() || layout.keys.total() != k.rows() ||
      layout.queries.segments() != layout.keys.segments()) {
    throw ShapeError("attention: layout does not match operands");
  }
  const std::size_t dk = d / layout.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor out = Tensor::matrix(q.rows(), d);

  std::size_t prob_size = 0;
  std::vector<std::size_t> base(layout.queries.segments());
  for (std::size_t b = 0; b < layout.queries.segments(); ++b) {
    base[b] = prob_size;
    prob_size += layout.heads * layout.queries.length(b) * layout.keys.length(b);
  }
  std::vector<double> local;
  std::vector<double>& probs = cache ? cache->probs : local;
  probs.assign(prob_size, 0.0);

  for (std::size_t b = 0; b < layout.queries.segments(); ++b) {
    const std::size_t lq = layout.queries.length(b), lk = layout.keys.length(b);
    const std::size_t q0 = layout.queries.begin(b), k0 = layout.keys.begin(b);
    if (lk == 0 && lq > 0) throw ShapeError("attention: empty key segment");
    if (layout.causal && lq > lk) throw ShapeError("attention: causal with more queries than keys");
    for (std::size_t h = 0; h < layout.heads; ++h) {
      const std::size_t c0 = h * dk;
      for (std::size_t i = 0; i < lq; ++i) {
        const std::size_t visible = layout.causal ? (lk - lq + i + 1) : lk;
        double* p = probs.data() + base[b] + (h * lq + i) * lk;
        const double* qr = q.data().data() + (q0 + i) * d + c0;
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kr = k.data().data() + (k0 + j) * d + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qr[c] * kr[c];
          p[j] = s * scale;
        }
        softmax_inplace({p, visible});
        double* orow = out.data().data() + (q0 + i) * d + c0;
        for (std::size_t j = 0; j < visible; ++j) {
          const double pj = p[j];
          const double* vr = v.data().data() + (k0 + j) * d + c0;
          for (std::size_t c = 0; c < dk; ++c) orow[c] += pj * vr[c];
        }
      }
    }
  }
  if (cache) cache->segment_base = std::move(base);
  return out;
}

inline Tensor sinusoidal_positions(std::span<const std::size_t> positions, std::size_t d_model) {
  Tensor pe = Tensor::matrix(positions.size(), d_model);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      pe(r, i) = std::sin(pos * freq);
      if (i + 1 < d_model) pe(r, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

}  // namespace sublayer::kernels
