#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crossray/error.hpp"

namespace crossray::linalg {

/// Small dense row-major matrix (double precision). Used for the C x C
/// statistics of feature distributions, C <= 64.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) throw ShapeError("matrix: value count does not match shape");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(const std::vector<double>& d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  const std::vector<double>& values() const noexcept { return data_; }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double trace() const {
    double t = 0;
    for (std::size_t i = 0; i < std::min(rows_, cols_); ++i) t += (*this)(i, i);
    return t;
  }

  double frobenius() const {
    double s = 0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  friend Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols_ != b.rows_) throw ShapeError("matrix product: inner dimensions differ");
    Matrix c(a.rows_, b.cols_);
    for (std::size_t i = 0; i < a.rows_; ++i)
      for (std::size_t k = 0; k < a.cols_; ++k) {
        const double aik = a(i, k);
        for (std::size_t j = 0; j < b.cols_; ++j) c(i, j) += aik * b(k, j);
      }
    return c;
  }
  friend Matrix operator+(Matrix a, const Matrix& b) {
    a.check_same(b);
    for (std::size_t i = 0; i < a.data_.size(); ++i) a.data_[i] += b.data_[i];
    return a;
  }
  friend Matrix operator-(Matrix a, const Matrix& b) {
    a.check_same(b);
    for (std::size_t i = 0; i < a.data_.size(); ++i) a.data_[i] -= b.data_[i];
    return a;
  }
  friend Matrix operator*(double s, Matrix a) {
    for (auto& v : a.data_) v *= s;
    return a;
  }

  std::vector<double> apply(const std::vector<double>& x) const {
    if (x.size() != cols_) throw ShapeError("matrix-vector product: size mismatch");
    std::vector<double> y(rows_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) y[i] += (*this)(i, j) * x[j];
    return y;
  }

  Matrix symmetrized() const {
    if (!square()) throw ShapeError("symmetrize: matrix is not square");
    Matrix s(rows_, cols_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) s(i, j) = 0.5 * ((*this)(i, j) + (*this)(j, i));
    return s;
  }

 private:
  void check_same(const Matrix& b) const {
    if (rows_ != b.rows_ || cols_ != b.cols_) throw ShapeError("matrix sum: shapes differ");
  }

  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

struct Eigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // columns are eigenvectors
  int sweeps = 0;
};

/// Cyclic Jacobi eigensolver for a symmetric matrix (symmetrized first).
/// Stops when the off-diagonal Frobenius norm drops below 1e-12 * ||A||_F.
inline Eigen eigh_symmetric(const Matrix& input, int max_sweeps = 100) {
  if (!input.square()) throw ShapeError("eigh: matrix is not square");
  Matrix a = input.symmetrized();
  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);
  const double norm = a.frobenius();
  auto off = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  int sweep = 0;
  for (; off() > 1e-12 * norm; ++sweep) {
    if (sweep >= max_sweeps) {
      throw NumericalError("eigh: no convergence after " + std::to_string(max_sweeps) +
                           " sweeps, off-diagonal residual " + std::to_string(off()));
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
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
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });
  Eigen out;
  out.sweeps = sweep;
  out.vectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    out.values.push_back(a(order[c], order[c]));
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  return out;
}

/// V diag(f(lambda)) V^T
template <class F>
Matrix spectral_map(const Eigen& e, F f) {
  const std::size_t n = e.values.size();
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double fk = f(e.values[k]);
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = e.vectors(i, k) * fk;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * e.vectors(j, k);
    }
  }
  return out.symmetrized();
}

/// Symmetric PSD square root (or inverse square root). Eigenvalues are
/// clamped at zero; the inverse requires lambda_min > 1e-10 * trace.
inline Matrix sqrtm_psd(const Matrix& a, bool inverse = false) {
  const auto e = eigh_symmetric(a);
  const double tr = std::abs(a.trace());
  const double lmin = e.values.empty() ? 0.0 : e.values.back();
  if (lmin < -1e-9 * tr) {
    throw NumericalError("sqrtm: matrix is not positive semi-definite (min eigenvalue " + std::to_string(lmin) + ")");
  }
  if (inverse) {
    if (!(lmin > 1e-10 * tr)) {
      throw NumericalError("sqrtm: matrix is near-singular (min eigenvalue " + std::to_string(lmin) + ")");
    }
    return spectral_map(e, [](double l) { return 1.0 / std::sqrt(l); });
  }
  return spectral_map(e, [](double l) { return std::sqrt(std::max(l, 0.0)); });
}

/// 2-norm condition number, sqrt(lambda_max / lambda_min) of P^T P.
inline double condition_number(const Matrix& p) {
  const auto e = eigh_symmetric(p.transpose() * p);
  const double lmin = e.values.back();
  if (lmin <= 0) return std::numeric_limits<double>::infinity();
  return std::sqrt(e.values.front() / lmin);
}

struct GaussianSpec {
  std::vector<double> mean;
  Matrix covariance;

  std::size_t dim() const noexcept { return mean.size(); }
};

/// ||T S T^T - target||_F / ||target||_F
inline double constraint_residual(const Matrix& t, const Matrix& source_cov, const Matrix& target_cov) {
  const Matrix d = t * source_cov * t.transpose() - target_cov;
  const double scale = target_cov.frobenius();
  return scale > 0 ? d.frobenius() / scale : d.frobenius();
}

namespace detail {

inline void check_pair(const GaussianSpec& cr, const GaussianSpec& a) {
  const std::size_t c = cr.dim();
  if (a.dim() != c || cr.covariance.rows() != c || cr.covariance.cols() != c || a.covariance.rows() != c ||
      a.covariance.cols() != c) {
    throw ShapeError("transform: inconsistent dimensions of the two Gaussians");
  }
}

}  // namespace detail

/// Minimiser of the Gaussian appearance-alignment objective over all T with
/// T Sigma_cr T^T = Sigma_a:
///
///   T = Sa^{1/2} (Sa^{1/2} P^T Scr P Sa^{1/2})^{-1/2} Sa^{1/2} P^T
///
/// Every feasible T is Sa^{1/2} Q Scr^{-1/2} with Q orthogonal, and only the
/// cross term -2 beta tr(P T Scr) depends on Q; the maximiser of tr(Q M) for
/// M = Scr^{1/2} P Sa^{1/2} is the transposed polar factor of M, which
/// expands to the expression above. Requires both covariances and P to be
/// invertible.
inline Matrix closed_form_transform(const GaussianSpec& cr, const GaussianSpec& a, const Matrix& p) {
  detail::check_pair(cr, a);
  if (p.rows() != cr.dim() || p.cols() != cr.dim()) throw ShapeError("transform: P has the wrong shape");
  const double cond = condition_number(p);
  if (!(cond < 1e8)) throw NumericalError("transform: P is not invertible (condition number " + std::to_string(cond) + ")");
  // Validates Sigma_cr invertibility.
  (void)sqrtm_psd(cr.covariance, true);
  const Matrix sa_half = sqrtm_psd(a.covariance);
  const Matrix inner = sa_half * p.transpose() * cr.covariance * p * sa_half;
  const Matrix t = sa_half * sqrtm_psd(inner, true) * sa_half * p.transpose();
  const double res = constraint_residual(t, cr.covariance, a.covariance);
  if (!(res < 1e-8)) {
    throw NumericalError("transform: distribution constraint violated after solve (residual " + std::to_string(res) + ")");
  }
  return t;
}

/// Exact expectation of
///   ||T(x_cr - mu_cr) + mu_a - x_a||^2 + beta ||P(T(x_cr - mu_cr) + mu_a) - x_cr||^2
/// for independent x_cr ~ N(mu_cr, Scr), x_a ~ N(mu_a, Sa).
inline double transform_objective(const Matrix& t, const GaussianSpec& cr, const GaussianSpec& a, const Matrix& p,
                                  double beta) {
  detail::check_pair(cr, a);
  const std::size_t c = cr.dim();
  if (t.rows() != c || t.cols() != c || p.rows() != c || p.cols() != c) {
    throw ShapeError("objective: T and P must be C x C");
  }
  const Matrix tst = t * cr.covariance * t.transpose();
  const double first = tst.trace() + a.covariance.trace();
  const auto pmu = p.apply(a.mean);
  double offset = 0;
  for (std::size_t i = 0; i < c; ++i) offset += (pmu[i] - cr.mean[i]) * (pmu[i] - cr.mean[i]);
  const double second = (p * tst * p.transpose()).trace() + cr.covariance.trace() -
                        2.0 * (p * t * cr.covariance).trace() + offset;
  return first + beta * second;
}

/// Haar-distributed orthogonal matrix: Gram-Schmidt QR of a Gaussian matrix
/// with the R diagonal made positive.
inline Matrix haar_orthogonal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g(i, j) = normal(rng);
  Matrix q(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = g(i, j);
    // Two passes of modified Gram-Schmidt.
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += q(i, k) * col[i];
        for (std::size_t i = 0; i < n; ++i) col[i] -= dot * q(i, k);
      }
    }
    double norm = 0;
    for (double v : col) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0) throw NumericalError("haar_orthogonal: degenerate Gaussian draw");
    for (std::size_t i = 0; i < n; ++i) q(i, j) = col[i] / norm;
  }
  return q;
}

/// Sa^{1/2} Q Scr^{-1/2}: a member of the feasible set for a given orthogonal Q.
inline Matrix feasible_transform(const GaussianSpec& cr, const GaussianSpec& a, const Matrix& q) {
  detail::check_pair(cr, a);
  return sqrtm_psd(a.covariance) * q * sqrtm_psd(cr.covariance, true);
}

inline Matrix sample_feasible_transform(const GaussianSpec& cr, const GaussianSpec& a, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return feasible_transform(cr, a, haar_orthogonal(cr.dim(), rng));
}

/// Random SPD matrix with eigenvalues log-uniform in [scale, scale * max_condition].
inline Matrix random_spd(std::size_t n, double max_condition, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(0.0, std::log(max_condition));
  std::vector<double> d(n);
  for (auto& v : d) v = scale * std::exp(u(rng));
  const Matrix q = haar_orthogonal(n, rng);
  return (q * Matrix::diagonal(d) * q.transpose()).symmetrized();
}

/// Random invertible matrix with singular values in [0.5, 2].
inline Matrix random_well_conditioned(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 2.0);
  std::vector<double> d(n);
  for (auto& v : d) v = u(rng);
  return haar_orthogonal(n, rng) * Matrix::diagonal(d) * haar_orthogonal(n, rng);
}

inline GaussianSpec random_gaussian(std::size_t c, std::mt19937_64& rng, double max_condition = 100.0) {
  std::normal_distribution<double> g;
  GaussianSpec s;
  s.mean.resize(c);
  for (auto& m : s.mean) m = g(rng);
  s.covariance = random_spd(c, max_condition, rng);
  return s;
}

struct TransformTrial {
  std::size_t trial = 0, dim = 0;
  double beta = 0;
  double objective_closed_form = 0;
  double min_objective_random = 0;
  double constraint_residual = 0;

  bool optimal(double slack = 1e-9) const { return objective_closed_form <= min_objective_random + slack; }
};

/// Random instances (covariance condition <= 100, P with singular values in
/// [0.5, 2], beta cycling 0.1 / 1 / 10) comparing the closed form against
/// `feasible_samples` random feasible transforms. `dim` = 0 cycles C over 2..8.
inline std::vector<TransformTrial> verify_transform_optimality(std::size_t dim, std::size_t trials,
                                                               std::size_t feasible_samples, std::uint64_t seed) {
  if (feasible_samples == 0) throw ConfigError("verify_transform_optimality: need at least one feasible sample");
  const double betas[] = {0.1, 1.0, 10.0};
  std::mt19937_64 rng(seed);
  std::vector<TransformTrial> out;
  for (std::size_t i = 0; i < trials; ++i) {
    TransformTrial r;
    r.trial = i;
    r.dim = dim ? dim : 2 + i % 7;
    r.beta = betas[i % 3];
    const auto cr = random_gaussian(r.dim, rng), a = random_gaussian(r.dim, rng);
    const auto p = random_well_conditioned(r.dim, rng);
    const auto t = closed_form_transform(cr, a, p);
    r.constraint_residual = constraint_residual(t, cr.covariance, a.covariance);
    r.objective_closed_form = transform_objective(t, cr, a, p, r.beta);
    r.min_objective_random = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < feasible_samples; ++s) {
      const auto tq = feasible_transform(cr, a, haar_orthogonal(r.dim, rng));
      r.min_objective_random = std::min(r.min_objective_random, transform_objective(tq, cr, a, p, r.beta));
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace crossray::linalg
