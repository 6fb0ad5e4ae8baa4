#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "sublayer/numerics/autograd.hpp"
#include "sublayer/numerics/tensor.hpp"

namespace sublayer {

struct SvdResult {
  Tensor u;                  // r x k, orthonormal columns
  std::vector<double> s;     // k values, non-negative, descending
  Tensor v;                  // c x k, orthonormal columns
};

struct JacobiOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;
};

namespace detail {

// One-sided Jacobi (Hestenes) on a tall matrix stored column-major in `cols`.
// Rotates column pairs until every pair is orthogonal to `tolerance`
// relative to the product of their norms; `v` accumulates the rotations.
inline void hestenes(std::vector<std::vector<double>>& cols, std::vector<std::vector<double>>& v,
                     const JacobiOptions& opts) {
  const std::size_t n = cols.size();
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        auto& a = cols[i];
        auto& b = cols[j];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t r = 0; r < a.size(); ++r) {
          alpha += a[r] * a[r];
          beta += b[r] * b[r];
          gamma += a[r] * b[r];
        }
        if (gamma == 0.0 || std::abs(gamma) <= opts.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < a.size(); ++r) {
          const double x = a[r], y = b[r];
          a[r] = c * x - s * y;
          b[r] = s * x + c * y;
        }
        auto& va = v[i];
        auto& vb = v[j];
        for (std::size_t r = 0; r < va.size(); ++r) {
          const double x = va[r], y = vb[r];
          va[r] = c * x - s * y;
          vb[r] = s * x + c * y;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericError("Jacobi SVD did not converge within " + std::to_string(opts.max_sweeps) +
                     " sweeps");
}

// Fills zero columns of an orthonormal set with unit vectors orthogonalised
// against everything already present (modified Gram-Schmidt, two passes).
inline void complete_orthonormal(std::vector<std::vector<double>>& basis,
                                 const std::vector<bool>& present) {
  const std::size_t dim = basis.empty() ? 0 : basis[0].size();
  std::size_t candidate = 0;
  for (std::size_t k = 0; k < basis.size(); ++k) {
    if (present[k]) continue;
    while (candidate < dim) {
      std::vector<double> e(dim, 0.0);
      e[candidate++] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t o = 0; o < basis.size(); ++o) {
          if (o == k || (!present[o] && o > k)) continue;
          double dot = 0.0;
          for (std::size_t r = 0; r < dim; ++r) dot += e[r] * basis[o][r];
          for (std::size_t r = 0; r < dim; ++r) e[r] -= dot * basis[o][r];
        }
      double norm = 0.0;
      for (double x : e) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-8) {
        for (double& x : e) x /= norm;
        basis[k] = std::move(e);
        break;
      }
    }
  }
}

}  // namespace detail

// Thin SVD of an r x c matrix by one-sided Jacobi rotations; m = U diag(S) V^T.
inline SvdResult svd(const Tensor& m, const JacobiOptions& opts = {}) {
  require_matrix(m, "svd");
  require_finite(m, "svd input");
  const bool wide = m.cols() > m.rows();
  const Tensor a = wide ? m.transposed() : m;
  const std::size_t rows = a.rows(), cols = a.cols();

  std::vector<std::vector<double>> work(cols, std::vector<double>(rows));
  std::vector<std::vector<double>> v(cols, std::vector<double>(cols, 0.0));
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t i = 0; i < rows; ++i) work[j][i] = a(i, j);
    v[j][j] = 1.0;
  }
  detail::hestenes(work, v, opts);

  std::vector<double> sigma(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (double x : work[j]) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double smax = cols ? sigma[order[0]] : 0.0;
  std::vector<std::vector<double>> ucols(cols), vcols(cols);
  std::vector<bool> present(cols, false);
  SvdResult out;
  out.s.resize(cols);
  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sigma[j];
    vcols[k] = v[j];
    ucols[k].assign(rows, 0.0);
    if (sigma[j] > 0.0 && sigma[j] > smax * 1e-300) {
      for (std::size_t i = 0; i < rows; ++i) ucols[k][i] = work[j][i] / sigma[j];
      present[k] = true;
    }
  }
  detail::complete_orthonormal(ucols, present);

  Tensor u = Tensor::matrix(rows, cols), vt = Tensor::matrix(cols, cols);
  for (std::size_t k = 0; k < cols; ++k) {
    for (std::size_t i = 0; i < rows; ++i) u(i, k) = ucols[k][i];
    for (std::size_t i = 0; i < cols; ++i) vt(i, k) = vcols[k][i];
  }
  if (wide) {
    out.u = std::move(vt);
    out.v = std::move(u);
  } else {
    out.u = std::move(u);
    out.v = std::move(vt);
  }
  return out;
}

inline Tensor svd_reconstruct(const SvdResult& r) {
  Tensor us = r.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= r.s[k];
  return kernels::matmul(us, r.v, false, true);
}

struct EigenResult {
  std::vector<double> values;  // descending
  Tensor vectors;              // columns are eigenvectors
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline EigenResult symmetric_eigen(const Tensor& m, const JacobiOptions& opts = {}) {
  require_matrix(m, "symmetric_eigen");
  if (m.rows() != m.cols()) throw ShapeError("symmetric_eigen needs a square matrix");
  const std::size_t n = m.rows();
  Tensor a = m;
  Tensor v = Tensor::identity(n);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  const double scale = std::max(frobenius_norm(m), 1e-300);
  int sweep = 0;
  while (off_norm() > opts.tolerance * scale) {
    if (sweep++ >= opts.max_sweeps) throw NumericError("Jacobi eigensolver did not converge");
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  EigenResult out;
  out.vectors = Tensor::matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values.push_back(a(order[k], order[k]));
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

using DifferentiableMap = std::function<Var(Graph&, Var)>;

inline constexpr std::size_t kMaxJacobianEntries = 1'000'000;

// Dense Jacobian d f(x) / d x, flattened row-major on both sides; one reverse
// sweep per output component.
inline Tensor jacobian(const DifferentiableMap& f, const Tensor& x) {
  Graph g;
  Var in = g.leaf(x, true);
  Var out = f(g, in);
  const std::size_t out_dim = out.value().size(), in_dim = x.size();
  if (out_dim * in_dim > kMaxJacobianEntries) {
    throw ShapeError("jacobian: " + std::to_string(out_dim) + "x" + std::to_string(in_dim) +
                     " exceeds the dense Jacobian cap");
  }
  Tensor jac = Tensor::matrix(out_dim, in_dim);
  Tensor seed(out.value().shape());
  for (std::size_t i = 0; i < out_dim; ++i) {
    seed[i] = 1.0;
    g.backward(out, seed);
    seed[i] = 0.0;
    if (g.has_grad(in.id())) {
      const Tensor& gi = g.grad_of(in.id());
      std::copy(gi.data().begin(), gi.data().end(), jac.row(i).begin());
    }
  }
  require_finite(jac, "jacobian");
  return jac;
}

}  // namespace sublayer
