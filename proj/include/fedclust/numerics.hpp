#pragma once

// Dense linear algebra and clustering primitives. Everything here is a pure
// function of its arguments and templated on the scalar type; the rest of the
// library instantiates it with double.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "fedclust/error.hpp"

namespace fedclust {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Labels = std::vector<int>;

/// Mixes a base seed with stream identifiers (splitmix64 finalizer), so that
/// e.g. (seed, client, round) triples get independent generators.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(seed);
  h = mix(h ^ a);
  h = mix(h ^ b);
  h = mix(h ^ c);
  return h;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite())
    throw InvalidArgument(std::string(what) + ": matrix contains non-finite entries");
}

// ---------------------------------------------------------------------------
// SVD

template <typename Scalar>
struct SvdResult {
  MatrixX<Scalar> U;  ///< left singular vectors as columns (thin)
  VectorX<Scalar> S;  ///< singular values, descending
  MatrixX<Scalar> Vt; ///< right singular vectors as rows (thin)

  MatrixX<Scalar> reconstruct() const { return U * S.asDiagonal() * Vt; }
};

/// Thin SVD backed by Eigen's two-sided Jacobi solver (accurate to a few ulps
/// on the small matrices this library deals with).
template <typename Derived>
SvdResult<typename Derived::Scalar> svd(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  require_finite(m, "svd");
  SvdResult<Scalar> out;
  if (m.rows() == 0 || m.cols() == 0) {
    out.U = MatrixX<Scalar>::Zero(m.rows(), 0);
    out.S = VectorX<Scalar>::Zero(0);
    out.Vt = MatrixX<Scalar>::Zero(0, m.cols());
    return out;
  }
  Eigen::JacobiSVD<MatrixX<Scalar>> solver(m.eval(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.U = solver.matrixU();
  out.S = solver.singularValues();
  out.Vt = solver.matrixV().transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Second-order statistics

/// Population covariance (1/n) sum (z_i - mean)(z_i - mean)^T of the columns of z.
template <typename Derived>
MatrixX<typename Derived::Scalar> covariance(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  if (z.cols() < 1)
    throw InvalidArgument("covariance: need at least one sample");
  require_finite(z, "covariance");
  const VectorX<Scalar> mean = z.rowwise().mean();
  const MatrixX<Scalar> centered = z.colwise() - mean;
  MatrixX<Scalar> cov = (centered * centered.transpose()) / static_cast<Scalar>(z.cols());
  // enforce exact symmetry
  return (cov + cov.transpose()) / Scalar(2);
}

template <typename Scalar>
struct Correlation {
  MatrixX<Scalar> R;
  std::vector<bool> degenerate; ///< dims with variance below the threshold
  bool any_degenerate() const {
    return std::any_of(degenerate.begin(), degenerate.end(), [](bool b) { return b; });
  }
};

/// Pearson correlation from a covariance matrix. Dimensions with variance below
/// `min_variance` get an all-zero row and column (diagonal 0) and are flagged.
template <typename Derived>
Correlation<typename Derived::Scalar>
correlation_matrix(const Eigen::MatrixBase<Derived>& sigma,
                   typename Derived::Scalar min_variance = 1e-12) {
  using Scalar = typename Derived::Scalar;
  if (sigma.rows() != sigma.cols())
    throw DimensionError("correlation_matrix: covariance must be square");
  require_finite(sigma, "correlation_matrix");
  const Scalar scale = std::max<Scalar>(sigma.cwiseAbs().maxCoeff(), Scalar(1));
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12) * scale)
    throw InvalidArgument("correlation_matrix: covariance is not symmetric");

  const Eigen::Index d = sigma.rows();
  Correlation<Scalar> out;
  out.R = MatrixX<Scalar>::Zero(d, d);
  out.degenerate.assign(static_cast<std::size_t>(d), false);
  VectorX<Scalar> sd(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    out.degenerate[i] = !(sigma(i, i) >= min_variance);
    sd(i) = out.degenerate[i] ? Scalar(0) : std::sqrt(sigma(i, i));
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    if (out.degenerate[i])
      continue;
    out.R(i, i) = Scalar(1);
    for (Eigen::Index j = i + 1; j < d; ++j) {
      if (out.degenerate[j])
        continue;
      const Scalar r = sigma(i, j) / (sd(i) * sd(j));
      out.R(i, j) = r;
      out.R(j, i) = r;
    }
  }
  return out;
}

template <typename Derived>
typename Derived::Scalar frobenius_norm_sq(const Eigen::MatrixBase<Derived>& m) {
  return m.squaredNorm();
}

// ---------------------------------------------------------------------------
// k-means

template <typename Scalar>
struct KMeansResult {
  MatrixX<Scalar> centroids; ///< k x dim
  Labels labels;             ///< one per input row
  Scalar inertia = 0;        ///< sum of squared distances to assigned centroid
  int iterations = 0;
  bool converged = false;
  std::vector<Scalar> inertia_trace; ///< inertia after every Lloyd step of the winning restart
};

struct KMeansOptions {
  int max_iter = 100;
  int restarts = 1;
};

namespace detail {

template <typename Scalar>
Scalar assign_nearest(const MatrixX<Scalar>& points, const MatrixX<Scalar>& centroids,
                      Labels& labels, std::vector<Scalar>* dist = nullptr) {
  const Eigen::Index n = points.rows();
  labels.resize(static_cast<std::size_t>(n));
  if (dist)
    dist->resize(static_cast<std::size_t>(n));
  Scalar total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    Scalar best_d = (points.row(i) - centroids.row(0)).squaredNorm();
    for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
      const Scalar d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[i] = best;
    if (dist)
      (*dist)[i] = best_d;
    total += best_d;
  }
  return total;
}

template <typename Scalar>
MatrixX<Scalar> kmeanspp_seed(const MatrixX<Scalar>& points, int k, std::mt19937_64& rng) {
  const Eigen::Index n = points.rows();
  MatrixX<Scalar> centroids(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  centroids.row(0) = points.row(pick(rng));
  std::vector<Scalar> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    d2[i] = (points.row(i) - centroids.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    Scalar total = 0;
    for (Scalar v : d2)
      total += v;
    Eigen::Index chosen = 0;
    if (total <= Scalar(0)) {
      chosen = pick(rng);
    } else {
      const Scalar target = static_cast<Scalar>(unit(rng)) * total;
      Scalar acc = 0;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > Scalar(0)) {
          chosen = i;
          break;
        }
      }
    }
    centroids.row(c) = points.row(chosen);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (points.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

// Centroids as means of their members. A cluster that ends up empty is
// re-seeded at the point farthest from its own centroid, taken from a cluster
// with at least two members; that point is relabeled.
template <typename Scalar>
MatrixX<Scalar> update_means(const MatrixX<Scalar>& points, const MatrixX<Scalar>& old_centroids,
                             Labels& labels) {
  const int k = static_cast<int>(old_centroids.rows());
  const Eigen::Index n = points.rows();
  std::vector<Eigen::Index> counts(k, 0);
  for (int l : labels)
    ++counts[l];
  for (int c = 0; c < k; ++c) {
    if (counts[c] > 0)
      continue;
    Eigen::Index far = -1;
    Scalar far_d = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (counts[labels[i]] < 2)
        continue;
      const Scalar d = (points.row(i) - old_centroids.row(labels[i])).squaredNorm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far < 0)
      break; // fewer distinct members than clusters; leave the rest empty
    --counts[labels[far]];
    labels[far] = c;
    counts[c] = 1;
  }
  MatrixX<Scalar> sums = MatrixX<Scalar>::Zero(k, points.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    sums.row(labels[i]) += points.row(i);
  MatrixX<Scalar> centroids = old_centroids;
  for (int c = 0; c < k; ++c)
    if (counts[c] > 0)
      centroids.row(c) = sums.row(c) / static_cast<Scalar>(counts[c]);
  return centroids;
}

} // namespace detail

/// Lloyd's algorithm with k-means++ seeding. `points` holds one point per row.
/// The restart with the lowest inertia wins (first one on ties).
template <typename Derived>
KMeansResult<typename Derived::Scalar> kmeans(const Eigen::MatrixBase<Derived>& points_in, int k,
                                              std::uint64_t seed, KMeansOptions opts = {}) {
  using Scalar = typename Derived::Scalar;
  const MatrixX<Scalar> points = points_in;
  if (k < 1)
    throw InvalidArgument("kmeans: k must be at least 1");
  if (points.rows() < k)
    throw InvalidArgument("kmeans: k=" + std::to_string(k) + " exceeds number of points " +
                          std::to_string(points.rows()));
  require_finite(points, "kmeans");
  std::mt19937_64 rng(seed);

  KMeansResult<Scalar> best;
  best.inertia = std::numeric_limits<Scalar>::infinity();
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    KMeansResult<Scalar> run;
    run.centroids = detail::kmeanspp_seed(points, k, rng);
    detail::assign_nearest(points, run.centroids, run.labels);
    for (int it = 0; it < opts.max_iter; ++it) {
      Labels prev = run.labels;
      run.centroids = detail::update_means(points, run.centroids, prev);
      const Scalar inertia = detail::assign_nearest(points, run.centroids, run.labels);
      run.inertia_trace.push_back(inertia);
      run.iterations = it + 1;
      if (run.labels == prev) {
        run.converged = true;
        break;
      }
    }
    run.inertia = 0;
    for (Eigen::Index i = 0; i < points.rows(); ++i)
      run.inertia += (points.row(i) - run.centroids.row(run.labels[i])).squaredNorm();
    if (run.inertia < best.inertia)
      best = std::move(run);
  }
  return best;
}

// ---------------------------------------------------------------------------
// CSV output

/// Writes one matrix row per line with 17 significant digits.
template <typename Derived>
void write_csv(std::ostream& os, const Eigen::MatrixBase<Derived>& m) {
  char buf[40];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(m(i, j)));
      if (j)
        os << ',';
      os << buf;
    }
    os << '\n';
  }
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

} // namespace fedclust
