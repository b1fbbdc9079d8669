#include "fedclust/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

namespace fedclust {

namespace {

// Relabels to dense ids 0..K-1 in ascending order of the original label.
Labels densify(const Labels& in, int& count) {
  std::map<int, int> ids;
  for (int v : in)
    ids.emplace(v, 0);
  int next = 0;
  for (auto& kv : ids)
    kv.second = next++;
  count = next;
  Labels out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = ids[in[i]];
  return out;
}

void check_lengths(const Labels& a, const Labels& b, const char* what) {
  if (a.size() != b.size())
    throw DimensionError(std::string(what) + ": label vectors differ in length (" +
                         std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  if (a.empty())
    throw InvalidArgument(std::string(what) + ": empty labelings");
}

} // namespace

Score nmi_score(const Labels& a_in, const Labels& b_in) {
  check_lengths(a_in, b_in, "nmi");
  int ka = 0, kb = 0;
  const Labels a = densify(a_in, ka);
  const Labels b = densify(b_in, kb);
  const double n = static_cast<double>(a.size());

  std::vector<double> ca(ka, 0.0), cb(kb, 0.0);
  std::vector<double> joint(static_cast<std::size_t>(ka) * kb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1;
    cb[b[i]] += 1;
    joint[static_cast<std::size_t>(a[i]) * kb + b[i]] += 1;
  }
  auto entropy = [n](const std::vector<double>& counts) {
    double h = 0;
    for (double c : counts)
      if (c > 0)
        h -= c / n * std::log(c / n);
    return h;
  };
  const double ha = entropy(ca);
  const double hb = entropy(cb);
  if (ka == 1 && kb == 1)
    return {1.0, true};
  if (ka == 1 || kb == 1)
    return {0.0, true};

  double mi = 0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j) {
      const double nij = joint[static_cast<std::size_t>(i) * kb + j];
      if (nij > 0)
        mi += nij / n * std::log(n * nij / (ca[i] * cb[j]));
    }
  return {std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0), false};
}

std::vector<int> hungarian_max(const std::vector<std::vector<std::int64_t>>& weight) {
  // Shortest augmenting path formulation on costs -weight (1-based potentials).
  const int n = static_cast<int>(weight.size());
  for (const auto& row : weight)
    if (static_cast<int>(row.size()) != n)
      throw DimensionError("hungarian: weight matrix must be square");
  if (n == 0)
    return {};
  const std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<std::int64_t> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      std::int64_t delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j])
          continue;
        const std::int64_t cur = -weight[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j)
    assignment[p[j] - 1] = j - 1;
  return assignment;
}

Score kappa_score(const Labels& pred_in, const Labels& truth_in) {
  check_lengths(pred_in, truth_in, "kappa");
  int kp = 0, kt = 0;
  const Labels pred = densify(pred_in, kp);
  const Labels truth = densify(truth_in, kt);
  const int K = std::max(kp, kt);
  const std::int64_t n = static_cast<std::int64_t>(pred.size());

  std::vector<std::vector<std::int64_t>> table(K, std::vector<std::int64_t>(K, 0));
  std::vector<std::int64_t> rows(K, 0), cols(K, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++table[pred[i]][truth[i]];
    ++rows[pred[i]];
    ++cols[truth[i]];
  }
  // Lexicographic objective: agreement first, then smallest chance term.
  // sum_p rows[p] * cols[pi(p)] never exceeds n^2, so a weight of n^2 + 1 per
  // agreeing sample keeps the two levels apart.
  if (n > 1'000'000)
    throw InvalidArgument("kappa: too many samples for exact integer alignment");
  const std::int64_t big = n * n + 1;
  std::vector<std::vector<std::int64_t>> weight(K, std::vector<std::int64_t>(K));
  for (int p = 0; p < K; ++p)
    for (int t = 0; t < K; ++t)
      weight[p][t] = table[p][t] * big - rows[p] * cols[t];
  const auto match = hungarian_max(weight);

  std::int64_t agree = 0, chance = 0;
  for (int p = 0; p < K; ++p) {
    agree += table[p][match[p]];
    chance += rows[p] * cols[match[p]];
  }
  const double po = static_cast<double>(agree) / static_cast<double>(n);
  const double pe = static_cast<double>(chance) / (static_cast<double>(n) * static_cast<double>(n));
  if (chance == n * n)
    return {0.0, true};
  return {(po - pe) / (1.0 - pe), false};
}

CollapseReport collapse_report(const Matrix& Z, double tau0) {
  if (Z.cols() < 2)
    throw InvalidArgument("collapse_report: need at least two samples");
  const Matrix sigma = covariance(Z);
  const auto dec = svd(sigma);

  CollapseReport r;
  r.tau0 = tau0;
  r.singular_values.assign(dec.S.data(), dec.S.data() + dec.S.size());
  const double total = dec.S.sum();
  const double smax = dec.S.size() ? dec.S(0) : 0.0;
  if (total > 0) {
    double h = 0;
    for (double s : r.singular_values)
      if (s > 0)
        h -= s / total * std::log(s / total);
    r.effective_rank = std::exp(h);
  }
  for (double s : r.singular_values)
    r.near_zero_count += (smax <= 0.0 || s < tau0 * smax) ? 1 : 0;

  const auto corr = correlation_matrix(sigma);
  for (bool d : corr.degenerate)
    r.degenerate_dims += d;
  r.offdiag_corr_hist.assign(kCorrelationBins, 0);
  const Eigen::Index d = sigma.rows();
  double abs_sum = 0;
  std::int64_t pairs = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i + 1; j < d; ++j) {
      const double v = corr.R(i, j);
      int bin = static_cast<int>(std::floor((v + 1.0) / 2.0 * kCorrelationBins));
      bin = std::clamp(bin, 0, kCorrelationBins - 1);
      ++r.offdiag_corr_hist[bin];
      abs_sum += std::abs(v);
      ++pairs;
    }
  r.mean_abs_offdiag = pairs ? abs_sum / static_cast<double>(pairs) : 0.0;
  return r;
}

nlohmann::json to_json(const CollapseReport& r) {
  return {{"singular_values", r.singular_values},
          {"effective_rank", r.effective_rank},
          {"near_zero_count", r.near_zero_count},
          {"tau0", r.tau0},
          {"offdiag_corr_hist", r.offdiag_corr_hist},
          {"offdiag_corr_hist_range", {-1.0, 1.0}},
          {"mean_abs_offdiag", r.mean_abs_offdiag},
          {"degenerate_dims", r.degenerate_dims}};
}

void write_spectrum_csv(std::ostream& os, const CollapseReport& r) {
  os << "index,singular_value\n";
  for (std::size_t i = 0; i < r.singular_values.size(); ++i)
    os << i << ',' << format_real(r.singular_values[i]) << '\n';
}

} // namespace fedclust
