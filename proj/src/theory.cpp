#include "fedclust/theory.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

namespace fedclust {

std::string to_string(GradientModel g) { return g == GradientModel::ClosedForm ? "closed_form" : "exact"; }

GradientModel gradient_model_from_string(const std::string& s) {
  if (s == "exact")
    return GradientModel::Exact;
  if (s == "closed_form")
    return GradientModel::ClosedForm;
  throw InvalidArgument("unknown gradient model '" + s + "'");
}

void TheoryConfig::validate() const {
  if (d < 1 || d_prime < 1)
    throw InvalidArgument("theory: d and d_prime must be positive");
  if (L1 < 1 || L2 < 1)
    throw InvalidArgument("theory: L1 and L2 must be at least 1");
  if (k < 1 || n_c < 1)
    throw InvalidArgument("theory: k and n_c must be positive");
  if (!(lambda >= 0.0))
    throw InvalidArgument("theory: lambda must be non-negative");
  if (!(dt > 0.0))
    throw InvalidArgument("theory: dt must be positive");
  if (steps < 0)
    throw InvalidArgument("theory: steps must be non-negative");
  if (!(imbalance >= 0.0 && imbalance <= 1.0))
    throw InvalidArgument("theory: imbalance must lie in [0, 1]");
  if (!(separation >= 0.0) || !(noise >= 0.0) || !(init_scale > 0.0))
    throw InvalidArgument("theory: separation and noise must be non-negative, init_scale positive");
}

// ---------------------------------------------------------------------------
// State

namespace {

Matrix chain(const std::vector<Matrix>& layers, std::size_t begin, std::size_t end, Eigen::Index dim) {
  Matrix prod = Matrix::Identity(dim, dim);
  for (std::size_t i = begin; i < end; ++i)
    prod = layers[i] * prod;
  return prod;
}

Matrix random_orthonormal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix g(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      g(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(rows, cols);
}

// PSD matrix power via the symmetric eigendecomposition; power 0 is the identity.
Matrix psd_power(const Matrix& m, double a) {
  if (a == 0.0)
    return Matrix::Identity(m.rows(), m.cols());
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  Vector ev = es.eigenvalues().cwiseMax(0.0);
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    ev(i) = std::pow(ev(i), a);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

void FlowState::refresh() {
  const Eigen::Index d = layers.front().cols();
  Pi = chain(layers, 0, static_cast<std::size_t>(L1), d);
  Phi = chain(layers, static_cast<std::size_t>(L1), layers.size(), Pi.rows());
}

void FlowState::validate() const {
  if (L1 < 1 || L2() < 1)
    throw InvalidArgument("flow state: need at least one encoder and one predictor layer");
  for (std::size_t i = 1; i < layers.size(); ++i)
    if (layers[i].cols() != layers[i - 1].rows())
      throw DimensionError("flow state: layer " + std::to_string(i + 1) + " does not chain");
  if (layers.back().rows() != layers[L1 - 1].rows())
    throw DimensionError("flow state: predictor must map the latent space onto itself");
  if (X.empty())
    throw InvalidArgument("flow state: no clusters");
  for (const auto& x : X)
    if (x.rows() != layers.front().cols() || x.cols() < 1)
      throw DimensionError("flow state: cluster data does not match the input dimension");
}

std::vector<Matrix> theory_clusters(const TheoryConfig& cfg) {
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x7E0));
  std::normal_distribution<double> normal;
  const double a = cfg.imbalance;
  std::vector<Matrix> X;
  for (int c = 0; c < cfg.k; ++c) {
    Matrix x(cfg.d, cfg.n_c);
    for (int i = 0; i < cfg.n_c; ++i) {
      Vector own = Vector::Zero(cfg.d);
      own(c % cfg.d) = cfg.separation;
      for (int r = 0; r < cfg.d; ++r)
        own(r) += cfg.noise * normal(rng);
      Vector shared = Vector::Zero(cfg.d);
      shared(0) = cfg.separation;
      x.col(i) = (1.0 - a) * own + a * shared;
    }
    X.push_back(std::move(x));
  }
  return X;
}

std::vector<Matrix> balanced_factors(const Matrix& target, int L, std::uint64_t seed) {
  if (L < 1)
    throw InvalidArgument("balanced_factors: need at least one layer");
  const auto dec = svd(target);
  const Eigen::Index r = dec.S.size();
  const Eigen::Index width = target.rows();
  Vector root = dec.S;
  for (Eigen::Index i = 0; i < r; ++i)
    root(i) = std::pow(root(i), 1.0 / L);

  std::mt19937_64 rng(seed);
  std::vector<Matrix> R;
  R.push_back(dec.Vt.transpose());
  for (int i = 1; i < L; ++i)
    R.push_back(random_orthonormal(width, r, rng));
  R.push_back(dec.U);

  std::vector<Matrix> layers;
  for (int i = 1; i <= L; ++i)
    layers.push_back(R[i] * root.asDiagonal() * R[i - 1].transpose());
  return layers;
}

FlowState make_flow_state(std::vector<Matrix> layers, int L1, std::vector<Matrix> X, double lambda,
                          GradientModel gradient) {
  FlowState s;
  s.layers = std::move(layers);
  s.L1 = L1;
  s.X = std::move(X);
  s.lambda = lambda;
  s.gradient = gradient;
  if (s.layers.empty())
    throw InvalidArgument("flow state: no layers");
  s.validate();
  s.refresh();
  s.Pi_global = s.Pi;
  s.Phi_global = s.Phi;
  return s;
}

FlowState balanced_init(const TheoryConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xBA1));
  std::normal_distribution<double> normal(0.0, cfg.init_scale / std::sqrt(static_cast<double>(cfg.d)));
  Matrix target(cfg.d_prime, cfg.d);
  for (Eigen::Index i = 0; i < target.rows(); ++i)
    for (Eigen::Index j = 0; j < target.cols(); ++j)
      target(i, j) = normal(rng);
  auto layers = balanced_factors(target, cfg.L1 + cfg.L2, derive_seed(cfg.seed, 0xBA2));
  return make_flow_state(std::move(layers), cfg.L1, theory_clusters(cfg), cfg.lambda, cfg.gradient);
}

// ---------------------------------------------------------------------------
// Q

namespace {

Matrix normalized(const Matrix& m, const char* what) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n < kDegenerateNorm)
      throw DegenerateInput(std::string(what) + ": column " + std::to_string(j) + " has norm " +
                            format_real(n));
    out.col(j) = m.col(j) / n;
  }
  return out;
}

} // namespace

Matrix build_Q(const FlowState& s, int c, QForm form) {
  if (c < 0 || c >= s.k())
    throw InvalidArgument("build_Q: cluster " + std::to_string(c) + " out of range");
  const Matrix& X = s.X[c];
  const double n = static_cast<double>(X.cols());
  const Matrix Z = s.Pi * X;
  const Matrix P = s.Phi * Z;
  const Matrix z_hat = normalized(Z, "build_Q: representation");
  const Matrix p_hat = normalized(P, "build_Q: prediction");
  const Matrix pg_hat = normalized(s.Phi_global * (s.Pi_global * X), "build_Q: global prediction");
  const Vector zsum = z_hat.rowwise().sum();

  Matrix Q(P.rows(), P.cols());
  for (Eigen::Index i = 0; i < P.cols(); ++i) {
    const Vector g = zsum / (n * n) + s.lambda / n * pg_hat.col(i);
    const double norm = P.col(i).norm();
    if (form == QForm::Literal)
      Q.col(i) = g.cwiseProduct((1.0 - p_hat.col(i).array().square()).matrix()) / norm;
    else
      Q.col(i) = (g - p_hat.col(i) * p_hat.col(i).dot(g)) / norm;
  }
  return Q;
}

Matrix build_Qbar(const FlowState& s, QForm form) {
  Matrix Qbar = Matrix::Zero(s.Pi.rows(), s.Pi.cols());
  for (int c = 0; c < s.k(); ++c)
    Qbar += build_Q(s, c, form) * s.X[c].transpose();
  return Qbar / static_cast<double>(s.k());
}

// ---------------------------------------------------------------------------
// Dynamics

namespace {

struct ModelView {
  ClusterContrastiveModel model, global;
  Matrix X;
  Labels labels;
  TrainConfig cfg;
};

ModelView model_view(const FlowState& s) {
  ModelView v;
  std::vector<Matrix> enc(s.layers.begin(), s.layers.begin() + s.L1);
  std::vector<Matrix> pred(s.layers.begin() + s.L1, s.layers.end());
  v.model = make_linear_model(enc, pred);
  v.global = make_linear_model({s.Pi_global}, {s.Phi_global});
  Eigen::Index total = 0;
  for (const auto& x : s.X)
    total += x.cols();
  v.X.resize(s.Pi.cols(), total);
  Eigen::Index at = 0;
  for (int c = 0; c < s.k(); ++c) {
    v.X.middleCols(at, s.X[c].cols()) = s.X[c];
    v.labels.insert(v.labels.end(), static_cast<std::size_t>(s.X[c].cols()), c);
    at += s.X[c].cols();
  }
  v.cfg.lambda = s.lambda;
  v.cfg.eta_reg = 0.0;
  return v;
}

} // namespace

double theory_loss(const FlowState& s) {
  const auto v = model_view(s);
  return ccfc_loss(v.model, v.global, v.X, v.labels, s.k(), v.cfg);
}

Matrix encoder_product_gradient(const FlowState& s) {
  const QForm form = s.gradient == GradientModel::Exact ? QForm::Exact : QForm::Literal;
  return -s.Phi.transpose() * build_Qbar(s, form);
}

std::vector<Matrix> layer_gradients(const FlowState& s) {
  if (s.gradient == GradientModel::Exact) {
    const auto v = model_view(s);
    const auto cache = make_forward_cache(v.model, v.global, v.X, v.labels, s.k());
    const auto g = backward(v.model, cache, v.cfg);
    std::vector<Matrix> out = g.encoder.dW;
    out.insert(out.end(), g.predictor.dW.begin(), g.predictor.dW.end());
    return out;
  }
  // Drive the end-to-end map M = Phi Pi with dl/dM = -Q̄ and chain through the layers.
  const Matrix GM = -build_Qbar(s, QForm::Literal);
  const std::size_t L = s.layers.size();
  const Eigen::Index d = s.layers.front().cols();
  std::vector<Matrix> out(L);
  for (std::size_t i = 0; i < L; ++i) {
    const Matrix below = chain(s.layers, 0, i, d);
    const Matrix above = chain(s.layers, i + 1, L, s.layers[i].rows());
    out[i] = above.transpose() * GM * below.transpose();
  }
  return out;
}

FlowState flow_step(const FlowState& s, double dt) {
  if (!(dt >= 0.0))
    throw InvalidArgument("flow_step: dt must be non-negative");
  if (dt == 0.0)
    return s;
  const auto grads = layer_gradients(s);
  FlowState next = s;
  for (std::size_t i = 0; i < next.layers.size(); ++i) {
    next.layers[i] -= dt * grads[i];
    if (!next.layers[i].allFinite())
      throw Error("flow_step: layer " + std::to_string(i + 1) + " became non-finite at t = " +
                  format_real(s.time + dt));
  }
  next.refresh();
  next.time = s.time + dt;
  return next;
}

Matrix product_velocity(const FlowState& s) {
  const Matrix G = encoder_product_gradient(s);
  const Matrix left = s.Pi * s.Pi.transpose();
  const Matrix right = s.Pi.transpose() * s.Pi;
  const double L1 = s.L1;
  Matrix v = Matrix::Zero(s.Pi.rows(), s.Pi.cols());
  for (int i = 1; i <= s.L1; ++i)
    v -= psd_power(left, (L1 - i) / L1) * G * psd_power(right, (i - 1) / L1);
  return v;
}

double product_rule_residual(const FlowState& s, double dt) {
  const FlowState next = flow_step(s, dt);
  return (next.Pi - (s.Pi + dt * product_velocity(s))).norm();
}

double balancedness_residual(const FlowState& s) {
  double worst = 0.0;
  for (int i = 0; i + 1 < s.L1; ++i) {
    const Matrix& a = s.layers[i];
    const Matrix& b = s.layers[i + 1];
    worst = std::max(worst, (a * a.transpose() - b.transpose() * b).norm());
  }
  return worst;
}

Matrix pooled_data(const FlowState& s) { return model_view(s).X; }

Matrix representation_covariance(const FlowState& s) { return covariance(Matrix(s.Pi * pooled_data(s))); }

int numerical_rank(const Matrix& m, double rtol) {
  const auto dec = svd(m);
  if (dec.S.size() == 0 || dec.S(0) <= 0.0)
    return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < dec.S.size(); ++i)
    r += dec.S(i) > rtol * dec.S(0) ? 1 : 0;
  return r;
}

// ---------------------------------------------------------------------------
// Probe

namespace {

// Greedy one-to-one matching of rows to columns by largest |overlap|.
std::vector<int> match_by_overlap(const Matrix& overlap) {
  const Eigen::Index rows = overlap.rows(), cols = overlap.cols();
  std::vector<int> assign(rows, -1);
  std::vector<char> row_used(rows, 0), col_used(cols, 0);
  for (Eigen::Index round = 0; round < std::min(rows, cols); ++round) {
    double best = -1.0;
    Eigen::Index bi = 0, bj = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (row_used[i])
        continue;
      for (Eigen::Index j = 0; j < cols; ++j)
        if (!col_used[j] && std::abs(overlap(i, j)) > best) {
          best = std::abs(overlap(i, j));
          bi = i;
          bj = j;
        }
    }
    assign[bi] = static_cast<int>(bj);
    row_used[bi] = col_used[bj] = 1;
  }
  return assign;
}

struct Snapshot {
  Vector sigma_pi, sigma_phi;
  Matrix u_pi, v_pi;   ///< tracked Pi triplets (columns)
  Matrix u_phi, v_phi; ///< Phi triplets, the first `ranks` matched to Pi's
  Vector rhs, rhs_exact;
  Vector align_dev;
  double balance = 0.0;
};

Snapshot snapshot(const FlowState& s, const Snapshot* prev) {
  Snapshot out;
  auto pi = svd(s.Pi);
  const Eigen::Index r = pi.S.size();
  Matrix U = pi.U, V = pi.Vt.transpose();
  Vector S = pi.S;
  if (prev) {
    const auto order = match_by_overlap(prev->v_pi.transpose() * V);
    Matrix U2(U.rows(), r), V2(V.rows(), r);
    Vector S2(r);
    for (Eigen::Index t = 0; t < r; ++t) {
      const int j = order[t];
      const double sign = prev->v_pi.col(t).dot(V.col(j)) < 0 ? -1.0 : 1.0;
      U2.col(t) = sign * U.col(j);
      V2.col(t) = sign * V.col(j);
      S2(t) = S(j);
    }
    U = U2;
    V = V2;
    S = S2;
  }
  out.sigma_pi = S;
  out.u_pi = U;
  out.v_pi = V;

  auto phi = svd(s.Phi);
  const Matrix PhiV = phi.Vt.transpose();
  const Eigen::Index rp = phi.S.size();
  const auto order = match_by_overlap(U.transpose() * PhiV);
  std::vector<int> perm(order.begin(), order.end());
  std::vector<char> used(rp, 0);
  for (int j : perm)
    if (j >= 0)
      used[j] = 1;
  for (Eigen::Index j = 0; j < rp; ++j)
    if (!used[j])
      perm.push_back(static_cast<int>(j));
  out.sigma_phi.resize(rp);
  out.u_phi.resize(phi.U.rows(), rp);
  out.v_phi.resize(PhiV.rows(), rp);
  for (Eigen::Index t = 0; t < rp; ++t) {
    const int j = perm[t];
    double sign = 1.0;
    if (t < r && U.col(t).dot(PhiV.col(j)) < 0)
      sign = -1.0;
    out.sigma_phi(t) = phi.S(j);
    out.u_phi.col(t) = sign * phi.U.col(j);
    out.v_phi.col(t) = sign * PhiV.col(j);
  }

  const Matrix A = (U.transpose() * out.v_phi).cwiseAbs();
  out.align_dev.resize(r);
  for (Eigen::Index t = 0; t < r; ++t) {
    double dev = 0.0;
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      dev = std::max(dev, std::abs(A(t, j) - (t == j ? 1.0 : 0.0)));
    out.align_dev(t) = dev;
  }
  out.balance = balancedness_residual(s);
  return out;
}

void fill_rhs(Snapshot& snap, const FlowState& s, const std::vector<double>& C0) {
  const Matrix Ql = build_Qbar(s, QForm::Literal);
  const Matrix Qe = build_Qbar(s, QForm::Exact);
  const double L1 = s.L1;
  const Eigen::Index r = snap.sigma_pi.size();
  snap.rhs.resize(r);
  snap.rhs_exact.resize(r);
  for (Eigen::Index t = 0; t < r; ++t) {
    const double sig = snap.sigma_pi(t);
    const double inner = std::max(0.0, std::pow(sig, 2.0 / L1) + C0[t]);
    const double factor = L1 * std::pow(sig, 2.0 - 2.0 / L1) * std::sqrt(inner);
    snap.rhs(t) = factor * snap.u_phi.col(t).dot(Ql * snap.v_pi.col(t));
    snap.rhs_exact(t) = factor * snap.u_phi.col(t).dot(Qe * snap.v_pi.col(t));
  }
}

double median(std::vector<double> v) {
  if (v.empty())
    return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

ResidualSummary summarize(const std::vector<double>& v) {
  ResidualSummary s;
  s.count = static_cast<int>(v.size());
  s.median = median(v);
  for (double x : v)
    s.max = std::max(s.max, x);
  return s;
}

} // namespace

const ProbeRecord& ProbeLog::at(int step, int tau) const {
  const std::size_t i = static_cast<std::size_t>(step) * ranks + (tau - 1);
  if (tau < 1 || tau > ranks || i >= records.size())
    throw InvalidArgument("probe log: no record for step " + std::to_string(step) + ", tau " +
                          std::to_string(tau));
  return records[i];
}

ProbeLog run_probe(FlowState state, double dt, int steps) {
  if (!(dt > 0.0))
    throw InvalidArgument("run_probe: dt must be positive");
  if (steps < 0)
    throw InvalidArgument("run_probe: steps must be non-negative");
  state.validate();

  ProbeLog log;
  log.steps = steps;
  log.dt = dt;
  log.L1 = state.L1;

  std::vector<Snapshot> snaps;
  snaps.push_back(snapshot(state, nullptr));
  const Eigen::Index r = snaps[0].sigma_pi.size();
  log.ranks = static_cast<int>(r);
  for (Eigen::Index t = 0; t < r; ++t)
    log.C0.push_back(snaps[0].sigma_phi(t) * snaps[0].sigma_phi(t) -
                     std::pow(snaps[0].sigma_pi(t), 2.0 / state.L1));
  log.sigma_initial = snaps[0].sigma_pi;
  log.sigma_final = snaps[0].sigma_pi;
  if (steps == 0)
    return log;

  try {
    fill_rhs(snaps[0], state, log.C0);
    for (int step = 1; step <= steps; ++step) {
      state = flow_step(state, dt);
      snaps.push_back(snapshot(state, &snaps.back()));
      if (step < steps)
        fill_rhs(snaps.back(), state, log.C0);
    }
  } catch (const Error& e) {
    log.halted = true;
    log.halt_reason = e.what();
  }

  const int usable = static_cast<int>(snaps.size()) - 1; // states with a successor
  for (int step = 0; step < usable; ++step) {
    const Snapshot& cur = snaps[step];
    if (cur.rhs.size() != r)
      break;
    for (Eigen::Index t = 0; t < r; ++t) {
      ProbeRecord rec;
      rec.step = step;
      rec.tau = static_cast<int>(t) + 1;
      rec.sigma_pi = cur.sigma_pi(t);
      rec.sigma_phi = cur.sigma_phi(t);
      rec.numeric_dot = step == 0
                            ? (snaps[1].sigma_pi(t) - cur.sigma_pi(t)) / dt
                            : (snaps[step + 1].sigma_pi(t) - snaps[step - 1].sigma_pi(t)) / (2 * dt);
      rec.formula_rhs = cur.rhs(t);
      rec.formula_rhs_exact = cur.rhs_exact(t);
      rec.alignment_dev = cur.align_dev(t);
      rec.balance_res = cur.balance;
      rec.C_val = cur.sigma_phi(t) * cur.sigma_phi(t) - std::pow(cur.sigma_pi(t), 2.0 / state.L1);
      log.records.push_back(rec);
    }
  }
  log.sigma_final = snaps.back().sigma_pi;
  return log;
}

ProbeLog run_probe(const TheoryConfig& cfg) { return run_probe(balanced_init(cfg), cfg.dt, cfg.steps); }

SigmaDynamicsReport verify_sigma_dynamics(const ProbeLog& log, const VerifyOptions& opts) {
  const int top = std::min(opts.top, log.ranks);
  std::vector<std::vector<double>> lit(top), ex(top);
  std::vector<double> lit_all, ex_all;
  SigmaDynamicsReport rep;
  for (const auto& rec : log.records) {
    rep.max_alignment_dev = std::max(rep.max_alignment_dev, rec.alignment_dev);
    if (rec.step < 1 || rec.tau > top)
      continue;
    const double a =
        std::abs(rec.numeric_dot - rec.formula_rhs) / std::max(std::abs(rec.formula_rhs), opts.residual_floor);
    const double b = std::abs(rec.numeric_dot - rec.formula_rhs_exact) /
                     std::max(std::abs(rec.formula_rhs_exact), opts.residual_floor);
    lit[rec.tau - 1].push_back(a);
    ex[rec.tau - 1].push_back(b);
    lit_all.push_back(a);
    ex_all.push_back(b);
  }
  for (int t = 0; t < top; ++t) {
    rep.literal.push_back(summarize(lit[t]));
    rep.exact.push_back(summarize(ex[t]));
  }
  rep.literal_all = summarize(lit_all);
  rep.exact_all = summarize(ex_all);
  rep.assumption_broken = rep.max_alignment_dev > opts.alignment_threshold;
  return rep;
}

AssumptionReport check_assumptions(const ProbeLog& log) {
  if (log.records.empty())
    throw InvalidArgument("check_assumptions: empty probe log");
  AssumptionReport r;
  for (const auto& rec : log.records) {
    r.balancedness_max_residual = std::max(r.balancedness_max_residual, rec.balance_res);
    r.alignment_matrix_deviation = std::max(r.alignment_matrix_deviation, rec.alignment_dev);
    r.C_drift = std::max(r.C_drift, std::abs(rec.C_val - log.C0[rec.tau - 1]));
  }
  return r;
}

std::vector<SweepRow> imbalance_sweep(const TheoryConfig& base, const std::vector<double>& levels) {
  if (levels.size() < 2)
    throw InvalidArgument("imbalance_sweep: need at least two levels");
  std::vector<SweepRow> rows;
  for (double level : levels) {
    TheoryConfig cfg = base;
    cfg.imbalance = level;
    const FlowState init = balanced_init(cfg);
    SweepRow row;
    row.level = level;
    row.qbar_rank = numerical_rank(build_Qbar(init, QForm::Literal));
    row.qbar_rank_exact = numerical_rank(build_Qbar(init, QForm::Exact));
    const ProbeLog log = run_probe(init, cfg.dt, cfg.steps);
    row.sigma_initial = log.sigma_initial;
    row.sigma_final = log.sigma_final;
    for (Eigen::Index t = 0; t < row.sigma_initial.size(); ++t) {
      const double s0 = row.sigma_initial(t);
      if (s0 > 0 && (row.sigma_final(t) - s0) / s0 > 0.1)
        ++row.growth_count;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_probe_csv(std::ostream& os, const ProbeLog& log) {
  os << "step,tau,sigma_pi,sigma_phi,numeric_dot,formula_rhs,alignment_dev,balance_res,C_val\n";
  for (const auto& r : log.records)
    os << r.step << ',' << r.tau << ',' << format_real(r.sigma_pi) << ',' << format_real(r.sigma_phi) << ','
       << format_real(r.numeric_dot) << ',' << format_real(r.formula_rhs) << ','
       << format_real(r.alignment_dev) << ',' << format_real(r.balance_res) << ','
       << format_real(r.C_val) << '\n';
}

namespace {

nlohmann::json to_json(const ResidualSummary& s) {
  return {{"max", s.max}, {"median", s.median}, {"count", s.count}};
}

} // namespace

nlohmann::json to_json(const SigmaDynamicsReport& r) {
  nlohmann::json lit = nlohmann::json::array(), ex = nlohmann::json::array();
  for (const auto& s : r.literal)
    lit.push_back(to_json(s));
  for (const auto& s : r.exact)
    ex.push_back(to_json(s));
  return {{"literal_q", {{"per_tau", lit}, {"all", to_json(r.literal_all)}}},
          {"exact_q", {{"per_tau", ex}, {"all", to_json(r.exact_all)}}},
          {"max_alignment_dev", r.max_alignment_dev},
          {"assumption_broken", r.assumption_broken}};
}

nlohmann::json to_json(const AssumptionReport& r) {
  return {{"balancedness_max_residual", r.balancedness_max_residual},
          {"alignment_matrix_deviation", r.alignment_matrix_deviation},
          {"C_drift", r.C_drift}};
}

} // namespace fedclust
