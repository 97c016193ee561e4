#pragma once

// Post-pruning distortion reconstruction for one prunable linear layer
// Y = X W + B. Dropping input channels splits the output into
//   X_u W_u + B   (kept)   and   X_m W_m   (dropped),
// and every method below folds an estimate of the dropped part back into the
// kept weight and bias so the surgered layer keeps its (C_u x C_out) shape.
//
// LIAR estimates X_m ~ X_u Q + mean(X_m) and W_m ~ P W_u by least squares and
// installs W' = (I + Q P) W_u, B' = mean(X_m) W_m + B.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "prunekit/errors.hpp"
#include "prunekit/linalg.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

enum class ReconMethod { naive, bias_comp, mask_tuning, liar, liar_direct, liar_weight_only, liar_bias_only };

inline const char* method_name(ReconMethod m) {
  switch (m) {
    case ReconMethod::naive: return "naive";
    case ReconMethod::bias_comp: return "bias";
    case ReconMethod::mask_tuning: return "mask-tuning";
    case ReconMethod::liar: return "liar";
    case ReconMethod::liar_direct: return "liar-direct";
    case ReconMethod::liar_weight_only: return "liar-weight-only";
    case ReconMethod::liar_bias_only: return "liar-bias-only";
  }
  return "?";
}

inline ReconMethod parse_method(const std::string& s) {
  for (auto m : {ReconMethod::naive, ReconMethod::bias_comp, ReconMethod::mask_tuning, ReconMethod::liar,
                 ReconMethod::liar_direct, ReconMethod::liar_weight_only, ReconMethod::liar_bias_only})
    if (s == method_name(m)) return m;
  throw ValidationError("unknown reconstruction method '" + s + "'");
}

struct SplitView {
  Matrix x_u;  // NT x C_u
  Matrix x_m;  // NT x C_m
  Matrix w_u;  // C_u x C_out
  Matrix w_m;  // C_m x C_out
  std::vector<std::size_t> kept;
  std::vector<std::size_t> dropped;
};

struct ReconPlan {
  ReconMethod method = ReconMethod::naive;
  Matrix q;       // C_u x C_m
  Matrix p;       // C_m x C_u
  Matrix xbar_m;  // 1 x C_m
  std::vector<double> scales;  // mask-tuning r, empty otherwise
  Matrix w_new;   // C_u x C_out
  std::vector<double> b_new;
};

inline SplitView split(const Matrix& x, const Matrix& w, const ChannelMask& mask) {
  if (x.cols() != w.rows()) throw ShapeError("activation channels != weight rows");
  if (mask.keep.size() != w.rows())
    throw ValidationError("mask length " + std::to_string(mask.keep.size()) + " != " + std::to_string(w.rows()));
  SplitView v;
  v.kept = mask.kept_indices();
  v.dropped = mask.dropped_indices();
  if (v.kept.empty()) throw ValidationError("all channels pruned");
  v.x_u = select_columns(x, v.kept);
  v.x_m = select_columns(x, v.dropped);
  v.w_u = select_rows(w, v.kept);
  v.w_m = select_rows(w, v.dropped);
  return v;
}

inline SplitView split(const Batch3& x, const Matrix& w, const ChannelMask& mask) {
  return split(x.flatten(), w, mask);
}

/// X W + B for a flattened activation matrix.
inline Matrix layer_output(const Matrix& x, const Matrix& w, std::span<const double> b) {
  return add_row(matmul(x, w), b);
}

/// Q = argmin || X_m - (X_u Q + xbar_m) ||.
inline Matrix solve_q(const Matrix& x_u, const Matrix& x_m, const Matrix& xbar_m) {
  if (x_m.cols() == 0) return Matrix(x_u.cols(), 0);
  return least_squares(x_u, add_row(x_m, scale(xbar_m, -1.0).row(0)));
}

/// P = argmin || W_m - P W_u ||, via the transposed system W_u^T P^T = W_m^T.
inline Matrix solve_p(const Matrix& w_u, const Matrix& w_m) {
  if (w_u.cols() != w_m.cols()) throw ShapeError("W_u and W_m column counts differ");
  if (w_m.rows() == 0) return Matrix(0, w_u.rows());
  return transpose(least_squares(transpose(w_u), transpose(w_m)));
}

namespace detail {

inline std::vector<double> compensated_bias(const Matrix& xbar_m, const Matrix& w_m, std::span<const double> b) {
  std::vector<double> out(b.begin(), b.end());
  if (w_m.rows() == 0) return out;
  const Matrix shift = matmul(xbar_m, w_m);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += shift(0, j);
  return out;
}

inline ReconPlan identity_plan(ReconMethod method, const SplitView& v, std::span<const double> b) {
  ReconPlan plan;
  plan.method = method;
  plan.q = Matrix(v.w_u.rows(), 0);
  plan.p = Matrix(0, v.w_u.rows());
  plan.xbar_m = Matrix(1, 0);
  plan.w_new = v.w_u;
  plan.b_new.assign(b.begin(), b.end());
  if (method == ReconMethod::mask_tuning) plan.scales.assign(v.w_u.rows(), 1.0);
  return plan;
}

inline void check_bias(const SplitView& v, std::span<const double> b) {
  if (b.size() != v.w_u.cols()) throw ShapeError("bias length != output channels");
}

}  // namespace detail

inline ReconPlan naive_plan(const SplitView& v, std::span<const double> b) {
  detail::check_bias(v, b);
  return detail::identity_plan(ReconMethod::naive, v, b);
}

/// Dropped channels replaced by their calibration means, folded into the bias.
inline ReconPlan bias_compensation(const SplitView& v, std::span<const double> b) {
  detail::check_bias(v, b);
  if (v.dropped.empty()) return detail::identity_plan(ReconMethod::bias_comp, v, b);
  ReconPlan plan = detail::identity_plan(ReconMethod::bias_comp, v, b);
  plan.q = Matrix(v.w_u.rows(), v.w_m.rows());
  plan.p = Matrix(v.w_m.rows(), v.w_u.rows());
  plan.xbar_m = column_means(v.x_m);
  plan.b_new = detail::compensated_bias(plan.xbar_m, v.w_m, b);
  return plan;
}

/// Per-kept-channel scales r minimizing || X W - X_u diag(r) W_u ||_F. The
/// normal equations are assembled directly: G = (X_u^T X_u) .* (W_u W_u^T),
/// rhs_i = sum_j W_u[i,j] (X_u^T X W)[i,j].
inline ReconPlan mask_tuning(const SplitView& v, std::span<const double> b) {
  detail::check_bias(v, b);
  ReconPlan plan = detail::identity_plan(ReconMethod::mask_tuning, v, b);
  if (v.dropped.empty()) return plan;

  const Matrix xtx = matmul_tn(v.x_u, v.x_u);
  const Matrix wwt = matmul_nt(v.w_u, v.w_u);
  const std::size_t cu = v.w_u.rows();
  Matrix gram(cu, cu);
  for (std::size_t i = 0; i < cu; ++i)
    for (std::size_t j = 0; j < cu; ++j) gram(i, j) = xtx(i, j) * wwt(i, j);

  const Matrix target = add(matmul(xtx, v.w_u), matmul(matmul_tn(v.x_u, v.x_m), v.w_m));
  Matrix rhs(cu, 1);
  for (std::size_t i = 0; i < cu; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < v.w_u.cols(); ++j) acc += v.w_u(i, j) * target(i, j);
    rhs(i, 0) = acc;
  }
  const Matrix r = solve_ridge_normal(gram, rhs);
  plan.scales.assign(r.data().begin(), r.data().end());
  for (std::size_t i = 0; i < cu; ++i)
    for (double& w : plan.w_new.row(i)) w *= plan.scales[i];
  return plan;
}

namespace detail {

enum class LiarTerms { both, weight_only, bias_only };

inline ReconPlan liar_impl(ReconMethod method, const SplitView& v, std::span<const double> b, LiarTerms terms) {
  check_bias(v, b);
  if (v.dropped.empty()) return identity_plan(method, v, b);
  ReconPlan plan;
  plan.method = method;
  plan.xbar_m = column_means(v.x_m);
  plan.q = solve_q(v.x_u, v.x_m, plan.xbar_m);
  plan.p = solve_p(v.w_u, v.w_m);
  // (I + Q P) W_u evaluated as W_u + Q (P W_u).
  plan.w_new = terms == LiarTerms::bias_only ? v.w_u : add(v.w_u, matmul(plan.q, matmul(plan.p, v.w_u)));
  plan.b_new = terms == LiarTerms::weight_only ? std::vector<double>(b.begin(), b.end())
                                               : compensated_bias(plan.xbar_m, v.w_m, b);
  return plan;
}

}  // namespace detail

inline ReconPlan liar_update(const SplitView& v, std::span<const double> b) {
  return detail::liar_impl(ReconMethod::liar, v, b, detail::LiarTerms::both);
}

/// Ablation: keeps the weight term, drops the mean(X_m) W_m bias term.
inline ReconPlan liar_weight_only(const SplitView& v, std::span<const double> b) {
  return detail::liar_impl(ReconMethod::liar_weight_only, v, b, detail::LiarTerms::weight_only);
}

/// Ablation: keeps the bias term, leaves W_u untouched.
inline ReconPlan liar_bias_only(const SplitView& v, std::span<const double> b) {
  return detail::liar_impl(ReconMethod::liar_bias_only, v, b, detail::LiarTerms::bias_only);
}

/// Folds Q W_m into the kept weight directly, skipping the P approximation.
inline ReconPlan direct_fold_update(const SplitView& v, std::span<const double> b) {
  detail::check_bias(v, b);
  if (v.dropped.empty()) return detail::identity_plan(ReconMethod::liar_direct, v, b);
  ReconPlan plan;
  plan.method = ReconMethod::liar_direct;
  plan.xbar_m = column_means(v.x_m);
  plan.q = solve_q(v.x_u, v.x_m, plan.xbar_m);
  plan.p = Matrix(v.w_m.rows(), v.w_u.rows());
  plan.w_new = add(v.w_u, matmul(plan.q, v.w_m));
  plan.b_new = detail::compensated_bias(plan.xbar_m, v.w_m, b);
  return plan;
}

inline ReconPlan reconstruct(ReconMethod method, const SplitView& v, std::span<const double> b) {
  switch (method) {
    case ReconMethod::naive: return naive_plan(v, b);
    case ReconMethod::bias_comp: return bias_compensation(v, b);
    case ReconMethod::mask_tuning: return mask_tuning(v, b);
    case ReconMethod::liar: return liar_update(v, b);
    case ReconMethod::liar_direct: return direct_fold_update(v, b);
    case ReconMethod::liar_weight_only: return liar_weight_only(v, b);
    case ReconMethod::liar_bias_only: return liar_bias_only(v, b);
  }
  throw ValidationError("unknown reconstruction method");
}

/// Per-channel ||X_hat_k - X_k||^2 / ||X_k||^2. A zero reference channel
/// yields 0 when the estimate is also zero and +inf otherwise.
inline std::vector<double> channel_recon_error(const Matrix& x_hat, const Matrix& x) {
  require_same_shape(x_hat, x, "channel_recon_error");
  std::vector<double> num(x.cols(), 0.0), den(x.cols(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double d = x_hat(i, k) - x(i, k);
      num[k] += d * d;
      den[k] += x(i, k) * x(i, k);
    }
  std::vector<double> eps(x.cols());
  for (std::size_t k = 0; k < x.cols(); ++k) {
    if (den[k] > 0.0)
      eps[k] = num[k] / den[k];
    else
      eps[k] = num[k] == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return eps;
}

/// The estimate of X_m a plan implicitly relies on. Mask tuning rescales the
/// kept channels instead of estimating X_m, so it has none.
inline std::optional<Matrix> masked_input_estimate(const SplitView& v, const ReconPlan& plan) {
  const std::size_t rows = v.x_m.rows();
  auto broadcast_mean = [&] {
    Matrix m(rows, v.x_m.cols());
    return add_row(m, plan.xbar_m.row(0));
  };
  switch (plan.method) {
    case ReconMethod::naive: return Matrix(rows, v.x_m.cols());
    case ReconMethod::bias_comp:
    case ReconMethod::liar_bias_only: return v.dropped.empty() ? Matrix(rows, 0) : broadcast_mean();
    case ReconMethod::liar:
    case ReconMethod::liar_direct:
      if (v.dropped.empty()) return Matrix(rows, 0);
      return add_row(matmul(v.x_u, plan.q), plan.xbar_m.row(0));
    case ReconMethod::liar_weight_only:
      if (v.dropped.empty()) return Matrix(rows, 0);
      return matmul(v.x_u, plan.q);
    case ReconMethod::mask_tuning: return std::nullopt;
  }
  return std::nullopt;
}

}  // namespace prunekit
