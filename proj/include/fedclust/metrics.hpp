#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedclust/numerics.hpp"

namespace fedclust {

/// A score plus a flag raised when a documented convention replaced the formula.
struct Score {
  double value = 0.0;
  bool degenerate = false;
};

/// Normalized mutual information I(a;b) / sqrt(H(a) H(b)), natural logs.
/// Two single-cluster labelings score 1 (degenerate); one single-cluster
/// labeling against a non-trivial one scores 0 (degenerate).
Score nmi_score(const Labels& a, const Labels& b);
inline double nmi(const Labels& a, const Labels& b) { return nmi_score(a, b).value; }

/// Cohen's kappa after aligning predicted clusters to classes one-to-one.
/// The alignment maximizes the number of agreeing samples; among equally good
/// alignments it takes the one with the smallest chance agreement. When the
/// chance agreement is 1 the score is 0 (degenerate).
Score kappa_score(const Labels& pred, const Labels& truth);
inline double kappa(const Labels& pred, const Labels& truth) { return kappa_score(pred, truth).value; }

/// Maximum-weight perfect matching on a square matrix; returns the column
/// assigned to every row.
std::vector<int> hungarian_max(const std::vector<std::vector<std::int64_t>>& weight);

inline constexpr int kCorrelationBins = 40;

struct CollapseReport {
  std::vector<double> singular_values; ///< of the representation covariance, descending
  double effective_rank = 0.0;         ///< exp of the entropy of the normalized spectrum
  int near_zero_count = 0;             ///< singular values below tau0 * max
  double tau0 = 1e-3;
  std::vector<int> offdiag_corr_hist; ///< 40 bins over [-1, 1], one entry per pair i < j
  double mean_abs_offdiag = 0.0;
  int degenerate_dims = 0; ///< dims with (near) zero variance
};

/// Collapse diagnostics for representations Z (d' x n, columns are samples).
CollapseReport collapse_report(const Matrix& Z, double tau0 = 1e-3);

nlohmann::json to_json(const CollapseReport& r);
/// "index,singular_value" with a header row.
void write_spectrum_csv(std::ostream& os, const CollapseReport& r);

} // namespace fedclust
