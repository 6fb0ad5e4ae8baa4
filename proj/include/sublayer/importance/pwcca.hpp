#pragma once

// Projection-weighted CCA between two activation matrices with one row per
// sample, plus the harness that taps sub-layer outputs for it.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sublayer/importance/evaluator.hpp"
#include "sublayer/importance/grid.hpp"
#include "sublayer/numerics/linalg.hpp"

namespace sublayer {

namespace detail {

inline Tensor center_columns(const Tensor& x) {
  Tensor c = x;
  const double n = static_cast<double>(x.rows());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
    mean /= n;
    for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= mean;
  }
  return c;
}

// Orthonormal basis of the column space, dropping directions whose singular
// value is below `rel_tol` times the largest.
inline Tensor column_basis(const Tensor& x, double rel_tol) {
  const SvdResult s = svd(x);
  const double top = s.s.empty() ? 0.0 : s.s.front();
  std::size_t k = 0;
  while (k < s.s.size() && top > 0.0 && s.s[k] >= rel_tol * top) ++k;
  if (k == 0) throw NumericError("pwcca: activations have no variance");
  Tensor u = Tensor::matrix(x.rows(), k);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) u(i, j) = s.u(i, j);
  return u;
}

}  // namespace detail

inline constexpr double kPwccaRankTolerance = 1e-10;

struct PwccaResult {
  double similarity = 0.0;
  std::vector<double> correlations;  // descending
  std::vector<double> weights;       // sum to 1
};

// Canonical correlations come from the SVD of Ux^T Uy, the product of the two
// column-space bases. Weights follow each X-side canonical variate's summed
// absolute projection onto the centered columns of x.
inline PwccaResult pwcca(const Tensor& x, const Tensor& y) {
  require_matrix(x, "pwcca");
  require_matrix(y, "pwcca");
  require_finite(x, "pwcca");
  require_finite(y, "pwcca");
  if (x.rows() != y.rows()) throw ShapeError("pwcca: row counts differ");
  if (x.rows() < 2) throw ShapeError("pwcca: need at least two samples");
  const Tensor xc = detail::center_columns(x);
  const Tensor yc = detail::center_columns(y);
  const Tensor ux = detail::column_basis(xc, kPwccaRankTolerance);
  const Tensor uy = detail::column_basis(yc, kPwccaRankTolerance);
  const SvdResult m = svd(kernels::matmul(ux, uy, true, false));
  const std::size_t k = std::min(ux.cols(), uy.cols());

  PwccaResult r;
  const Tensor h = kernels::matmul(ux, m.u);  // n x kx canonical variates of x
  const Tensor proj = kernels::matmul(h, xc, true, false);  // kx x d_x
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    r.correlations.push_back(std::clamp(m.s[i], 0.0, 1.0));
    double w = 0.0;
    for (std::size_t j = 0; j < proj.cols(); ++j) w += std::abs(proj(i, j));
    r.weights.push_back(w);
    total += w;
  }
  if (!(total > 0.0)) throw NumericError("pwcca: zero projection weight");
  for (std::size_t i = 0; i < k; ++i) {
    r.weights[i] /= total;
    r.similarity += r.weights[i] * r.correlations[i];
  }
  r.similarity = std::clamp(r.similarity, 0.0, 1.0);
  return r;
}

// Per-sentence row alignment used for every tap: positions i < min(|src|,
// |tgt| + 1), so encoder rows (source positions) and decoder rows (decoder
// input positions) pair up by index.
struct ActivationTaps {
  std::map<ComponentId, Tensor> component;
  Tensor final_output;
};

inline ActivationTaps collect_activations(const Checkpoint& ck, std::span<const SentencePair> pairs) {
  const ModelConfig& cfg = ck.config;
  const PackedBatch batch = pack_batch(pairs);
  Graph g(false);
  ParamVars vars = make_param_vars(g, ck.params, false);
  ForwardTrace trace;
  ForwardOptions opt;
  opt.trace = &trace;
  forward(cfg, vars, batch, opt);

  std::vector<std::size_t> enc_rows, dec_rows;
  for (std::size_t s = 0; s < pairs.size(); ++s) {
    const std::size_t n = std::min(pairs[s].src.size(), pairs[s].tgt.size() + 1);
    for (std::size_t i = 0; i < n; ++i) {
      enc_rows.push_back(batch.src_layout.offsets[s] + i);
      dec_rows.push_back(batch.dec_layout.offsets[s] + i);
    }
  }
  auto pick = [](const Tensor& t, const std::vector<std::size_t>& rows) {
    Tensor out = Tensor::matrix(rows.size(), t.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(t.row(rows[r]).begin(), t.row(rows[r]).end(), out.row(r).begin());
    return out;
  };
  ActivationTaps taps;
  for (const auto& [id, v] : trace.block_output)
    taps.component[id] = pick(v.value(), id.side == Side::kEncoder ? enc_rows : dec_rows);
  taps.final_output = pick(trace.decoder_output.value(), dec_rows);
  return taps;
}

// Similarity of every component's output to the top decoder output.
inline ImportanceGrid pwcca_grid(const Checkpoint& ck, std::span<const SentencePair> probe) {
  const ActivationTaps taps = collect_activations(ck, probe);
  const std::size_t need = 5 * ck.config.d_model;
  if (taps.final_output.rows() < need)
    throw Error("pwcca: probe set has " + std::to_string(taps.final_output.rows()) + " aligned positions, need " +
                std::to_string(need));
  ImportanceGrid g = make_grid("pwcca", ck.config);
  for (const auto& [id, x] : taps.component) g.scores[id] = pwcca(x, taps.final_output).similarity;
  g.metadata = {{"positions", taps.final_output.rows()}, {"sentences", probe.size()}};
  return g;
}

}  // namespace sublayer
