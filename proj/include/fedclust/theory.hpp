#pragma once

// Gradient-flow probe for deep linear cluster-contrastive models: encoder
// Pi = W_L1 ... W_1, predictor Phi = W_L ... W_{L1+1}, data grouped by cluster,
// a frozen global copy of the initial weights, and explicit Euler steps.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedclust/model.hpp"
#include "fedclust/numerics.hpp"

namespace fedclust {

/// How flow_step obtains layer gradients. `Exact` differentiates the loss by
/// reverse mode; `ClosedForm` drives the product with -Q̄ built from the
/// closed-form entries (diagonal normalization Jacobian only).
enum class GradientModel { Exact, ClosedForm };

std::string to_string(GradientModel g);
GradientModel gradient_model_from_string(const std::string& s);

struct TheoryConfig {
  int d = 6;
  int d_prime = 4;
  int L1 = 2;
  int L2 = 1;
  int k = 2;
  int n_c = 8;
  double lambda = 1.0;
  double dt = 1e-4;
  int steps = 200;
  /// 0: clusters centred on orthogonal axes; 1: every sample identical.
  double imbalance = 0.0;
  double separation = 3.0;
  double noise = 1.0;
  double init_scale = 1.0; ///< scale of the random end-to-end target at init
  std::uint64_t seed = 0;
  GradientModel gradient = GradientModel::Exact;

  void validate() const;
};

struct FlowState {
  std::vector<Matrix> layers; ///< W_1 .. W_{L1+L2}
  int L1 = 1;
  Matrix Pi, Phi;                ///< cached products
  Matrix Pi_global, Phi_global;  ///< frozen copy of the initial products
  std::vector<Matrix> X;         ///< per-cluster data, d x n_c each
  double lambda = 1.0;
  GradientModel gradient = GradientModel::Exact;
  double time = 0.0;

  int L2() const { return static_cast<int>(layers.size()) - L1; }
  int k() const { return static_cast<int>(X.size()); }
  /// Recomputes Pi and Phi from the layers.
  void refresh();
  void validate() const;
};

/// Per-cluster data for the probe, seeded from cfg.seed.
std::vector<Matrix> theory_clusters(const TheoryConfig& cfg);

/// Factors target = U S V^T into L balanced layers
/// W_i = R_i S^{1/L} R_{i-1}^T with R_0 = V, R_L = U and random orthonormal
/// R_i in between (width = rows of target).
std::vector<Matrix> balanced_factors(const Matrix& target, int L, std::uint64_t seed);

/// Balanced whole-chain initialization around a random Gaussian target map
/// scaled by init_scale; the global products are frozen copies.
FlowState balanced_init(const TheoryConfig& cfg);

/// State from explicit layers; the global products default to the initial ones.
FlowState make_flow_state(std::vector<Matrix> layers, int L1, std::vector<Matrix> X, double lambda,
                          GradientModel gradient = GradientModel::Exact);

enum class QForm {
  Literal, ///< closed-form entries with the diagonal factor (1 - p̂²)/|p|
  Exact,   ///< full normalization Jacobian (I - p̂ p̂^T)/|p|
};

/// Q^(c), d' x n_c. Throws DegenerateInput on a prediction column with norm < 1e-12.
Matrix build_Q(const FlowState& s, int c, QForm form = QForm::Literal);
/// (1/k) sum_c Q^(c) X^(c)^T, d' x d.
Matrix build_Qbar(const FlowState& s, QForm form = QForm::Literal);

/// Loss of the current state (stop-gradient targets, no decorrelation).
double theory_loss(const FlowState& s);

/// Gradient of the loss with respect to every layer, per the state's gradient model.
std::vector<Matrix> layer_gradients(const FlowState& s);
/// Gradient with respect to Pi: -Phi^T Q̄ with Q̄ matching the gradient model.
Matrix encoder_product_gradient(const FlowState& s);

/// Explicit Euler step. Throws Error (and leaves `s` untouched) when the step
/// produces non-finite weights.
FlowState flow_step(const FlowState& s, double dt);

/// Pi-dot from the product dynamics of balanced layers:
/// -sum_i [Pi Pi^T]^{(L1-i)/L1} dl/dPi [Pi^T Pi]^{(i-1)/L1}.
Matrix product_velocity(const FlowState& s);

/// |Pi(after one Euler step of dt) - (Pi + dt * product_velocity)|_F.
double product_rule_residual(const FlowState& s, double dt);

/// max_i |W_i W_i^T - W_{i+1}^T W_{i+1}|_F over adjacent encoder layers.
double balancedness_residual(const FlowState& s);

/// Pooled data of all clusters (d x k n_c) and the covariance of Z = Pi X.
Matrix pooled_data(const FlowState& s);
Matrix representation_covariance(const FlowState& s);

/// Numerical rank: singular values above rtol * max.
int numerical_rank(const Matrix& m, double rtol = 1e-6);

struct ProbeRecord {
  int step = 0;
  int tau = 1; ///< 1-based: tau-th largest singular value at step 0
  double sigma_pi = 0.0;
  double sigma_phi = 0.0;
  double numeric_dot = 0.0; ///< central difference, forward at step 0
  double formula_rhs = 0.0; ///< singular-value velocity with the literal Q̄
  double formula_rhs_exact = 0.0; ///< the same with the exact-gradient Q̄
  double alignment_dev = 0.0;     ///< max_tau' | |u^Pi_tau . v^Phi_tau'| - 1{tau = tau'} |
  double balance_res = 0.0;
  double C_val = 0.0; ///< (sigma_phi)^2 - (sigma_pi)^{2/L1}
};

struct ProbeLog {
  int steps = 0;
  int ranks = 0; ///< number of tracked singular values
  int L1 = 1;
  double dt = 0.0;
  std::vector<ProbeRecord> records; ///< ordered by step, then tau
  std::vector<double> C0;           ///< C_tau(0) per tau
  Vector sigma_initial, sigma_final; ///< tracked sigma^Pi at the first and last state
  bool halted = false;
  std::string halt_reason;

  const ProbeRecord& at(int step, int tau) const;
};

ProbeLog run_probe(FlowState state, double dt, int steps);
ProbeLog run_probe(const TheoryConfig& cfg);

struct ResidualSummary {
  double max = 0.0;
  double median = 0.0;
  int count = 0;
};

struct VerifyOptions {
  int top = 2;                        ///< taus 1..top are checked
  double alignment_threshold = 1e-3;  ///< beyond this the run is flagged
  double residual_floor = 1e-12;      ///< denominator floor for |rhs|
};

struct SigmaDynamicsReport {
  std::vector<ResidualSummary> literal; ///< per tau, against formula_rhs
  std::vector<ResidualSummary> exact;   ///< per tau, against formula_rhs_exact
  ResidualSummary literal_all, exact_all;
  double max_alignment_dev = 0.0;
  bool assumption_broken = false;
};

/// Relative residual |numeric - rhs| / max(|rhs|, floor) over steps >= 1
/// (central differences only).
SigmaDynamicsReport verify_sigma_dynamics(const ProbeLog& log, const VerifyOptions& opts = {});

struct AssumptionReport {
  double balancedness_max_residual = 0.0;
  double alignment_matrix_deviation = 0.0;
  double C_drift = 0.0;
};

AssumptionReport check_assumptions(const ProbeLog& log);

struct SweepRow {
  double level = 0.0;
  int qbar_rank = 0;       ///< literal Q̄ at t = 0
  int qbar_rank_exact = 0; ///< exact-gradient Q̄ at t = 0
  int growth_count = 0;    ///< sigma^Pi with relative growth > 10% over the horizon
  Vector sigma_initial, sigma_final;
};

std::vector<SweepRow> imbalance_sweep(const TheoryConfig& base, const std::vector<double>& levels);

/// step,tau,sigma_pi,sigma_phi,numeric_dot,formula_rhs,alignment_dev,balance_res,C_val
void write_probe_csv(std::ostream& os, const ProbeLog& log);

nlohmann::json to_json(const SigmaDynamicsReport& r);
nlohmann::json to_json(const AssumptionReport& r);

} // namespace fedclust
