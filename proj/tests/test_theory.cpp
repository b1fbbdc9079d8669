#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>
#include <sstream>

#include "fedclust/theory.hpp"
#include "oracles.hpp"

using namespace fedclust;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      m(i, j) = n(rng);
  return m;
}

double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

// Each cluster is n copies of a basis vector; identity encoder and predictor.
// Every prediction then points along its own target, so the loss sits at
// -(1 + lambda) with zero gradient.
FlowState stationary_state(int L1, int L2, double lambda) {
  std::vector<Matrix> layers(static_cast<std::size_t>(L1 + L2), Matrix::Identity(3, 3));
  std::vector<Matrix> X{Matrix::Zero(3, 4), Matrix::Zero(3, 4)};
  X[0].row(0).setConstant(2.0);
  X[1].row(2).setConstant(0.5);
  return make_flow_state(layers, L1, X, lambda);
}

} // namespace

TEST_CASE("balanced_factors") {
  SUBCASE("a single layer is the target") {
    const Matrix t = random_matrix(3, 5, 1);
    const auto f = balanced_factors(t, 1, 2);
    REQUIRE(f.size() == 1);
    CHECK(max_abs(f[0] - t) < 1e-12);
  }
  SUBCASE("square identity target, two layers") {
    const auto f = balanced_factors(Matrix::Identity(4, 4), 2, 3);
    CHECK(max_abs(f[1] * f[0] - Matrix::Identity(4, 4)) < 1e-12);
    CHECK((f[0] * f[0].transpose() - f[1].transpose() * f[1]).norm() < 1e-12);
  }
  SUBCASE("random target, three layers") {
    const Matrix t = random_matrix(4, 6, 4);
    const auto f = balanced_factors(t, 3, 5);
    CHECK(max_abs(f[2] * f[1] * f[0] - t) < 1e-10);
    for (int i = 0; i + 1 < 3; ++i)
      CHECK((f[i] * f[i].transpose() - f[i + 1].transpose() * f[i + 1]).norm() < 1e-10);
  }
  CHECK_THROWS_AS(balanced_factors(Matrix::Identity(2, 2), 0, 0), InvalidArgument);
}

TEST_CASE("balanced_init") {
  TheoryConfig cfg;
  const auto s = balanced_init(cfg);
  CHECK(s.layers.size() == 3);
  CHECK(s.Pi.rows() == 4);
  CHECK(s.Pi.cols() == 6);
  CHECK(s.Phi.rows() == 4);
  CHECK(s.Phi.cols() == 4);
  CHECK(s.k() == 2);
  CHECK(s.X[0].cols() == 8);
  CHECK(balancedness_residual(s) < 1e-12);
  CHECK(s.Pi_global == s.Pi);
  SUBCASE("one encoder layer makes balancedness vacuous") {
    cfg.L1 = 1;
    CHECK(balancedness_residual(balanced_init(cfg)) == 0.0);
  }
  SUBCASE("invalid configs") {
    cfg.dt = 0;
    CHECK_THROWS_AS(balanced_init(cfg), InvalidArgument);
  }
}

TEST_CASE("build_Q") {
  SUBCASE("identical targets, lambda = 0, hand values at d' = 2, n_c = 2") {
    // x = e1, 2 e1; Pi = I; Phi = [[1,0],[1,1]] so p = (1,1), (2,2) and every ẑ = e1.
    // g = (1/4) sum_j ẑ_j = e1 / 2; q_1i = (1/2)(1 - 1/2) / |p_i|, q_2i = 0.
    Matrix Phi(2, 2);
    Phi << 1, 0, 1, 1;
    Matrix X(2, 2);
    X << 1, 2, 0, 0;
    const auto s = make_flow_state({Matrix::Identity(2, 2), Phi}, 1, {X}, 0.0);
    const Matrix Q = build_Q(s, 0);
    CHECK(Q(0, 0) == doctest::Approx(0.25 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(Q(0, 1) == doctest::Approx(0.25 / (2 * std::sqrt(2.0))).epsilon(1e-15));
    CHECK(Q(1, 0) == 0.0);
    CHECK(Q(1, 1) == 0.0);
  }
  SUBCASE("one sample, lambda = 0") {
    const Matrix Pi = random_matrix(3, 4, 7), Phi = random_matrix(3, 3, 8);
    const Matrix x = random_matrix(4, 1, 9);
    const auto s = make_flow_state({Pi, Phi}, 1, {x}, 0.0);
    const Vector z = Pi * x, p = Phi * z;
    const Matrix Q = build_Q(s, 0);
    for (int r = 0; r < 3; ++r) {
      const double ph = p(r) / p.norm();
      CHECK(Q(r, 0) == doctest::Approx(z(r) / z.norm() * (1 - ph * ph) / p.norm()).epsilon(1e-14));
    }
  }
  SUBCASE("Q̄ matches an independent entrywise transcription") {
    TheoryConfig cfg;
    cfg.L1 = 1;
    auto s = balanced_init(cfg);
    // move away from the initial state so the global copy differs
    s.layers[0] += 0.1 * random_matrix(4, 6, 10);
    s.layers[1] += 0.1 * random_matrix(4, 4, 11);
    s.refresh();
    const Matrix oracle = oracle::qbar_closed_form(s.Pi, s.Phi, s.Pi_global, s.Phi_global, s.X, s.lambda);
    CHECK(max_abs(build_Qbar(s) - oracle) < 1e-12);
  }
  SUBCASE("degenerate prediction") {
    Matrix X(2, 1);
    X << 1, 0;
    Matrix Phi = Matrix::Zero(2, 2);
    Phi(0, 1) = 1;
    const auto s = make_flow_state({Matrix::Identity(2, 2), Matrix::Identity(2, 2)}, 1, {X}, 0.0);
    auto bad = s;
    bad.layers[1] = Phi;
    bad.refresh();
    CHECK_THROWS_AS(build_Q(bad, 0), DegenerateInput);
    CHECK_THROWS_AS(build_Q(s, 1), InvalidArgument);
  }
}

TEST_CASE("layer gradients") {
  TheoryConfig cfg;
  auto s = balanced_init(cfg);
  s.layers[2] += 0.05 * random_matrix(4, 4, 12);
  s.refresh();

  SUBCASE("exact gradients equal the end-to-end chain with the full-Jacobian Q̄") {
    const Matrix GM = -build_Qbar(s, QForm::Exact);
    const auto g = layer_gradients(s);
    const Matrix& W1 = s.layers[0];
    const Matrix& W2 = s.layers[1];
    const Matrix& W3 = s.layers[2];
    const double scale = max_abs(GM);
    CHECK(max_abs(g[0] - (W3 * W2).transpose() * GM) < 1e-12 * scale);
    CHECK(max_abs(g[1] - W3.transpose() * GM * W1.transpose()) < 1e-12 * scale);
    CHECK(max_abs(g[2] - GM * (W2 * W1).transpose()) < 1e-12 * scale);
    CHECK(max_abs(encoder_product_gradient(s) + s.Phi.transpose() * build_Qbar(s, QForm::Exact)) == 0.0);
  }
  SUBCASE("exact gradients agree with finite differences of the loss") {
    // targets are frozen by holding the data's normalized representations fixed:
    // perturb only the predictor, which no target depends on
    const auto g = layer_gradients(s);
    const double h = 1e-6;
    double worst = 0;
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) {
        auto plus = s, minus = s;
        plus.layers[2](i, j) += h;
        minus.layers[2](i, j) -= h;
        plus.refresh();
        minus.refresh();
        const double fd = (theory_loss(plus) - theory_loss(minus)) / (2 * h);
        worst = std::max(worst, std::abs(fd - g[2](i, j)));
      }
    CHECK(worst < 1e-7 * std::max(1.0, max_abs(g[2])));
  }
  SUBCASE("closed-form mode drives the product with the literal Q̄") {
    s.gradient = GradientModel::ClosedForm;
    const Matrix GM = -build_Qbar(s, QForm::Literal);
    const auto g = layer_gradients(s);
    CHECK(max_abs(g[2] - GM * s.Pi.transpose()) < 1e-12 * max_abs(GM));
  }
  CHECK(gradient_model_from_string(to_string(GradientModel::ClosedForm)) == GradientModel::ClosedForm);
  CHECK(gradient_model_from_string("exact") == GradientModel::Exact);
  CHECK_THROWS_AS(gradient_model_from_string("other"), InvalidArgument);
}

TEST_CASE("flow_step") {
  TheoryConfig cfg;
  const auto s = balanced_init(cfg);
  SUBCASE("dt = 0 leaves the state unchanged") {
    const auto n = flow_step(s, 0.0);
    for (std::size_t i = 0; i < s.layers.size(); ++i)
      CHECK(n.layers[i] == s.layers[i]);
    CHECK(n.time == 0.0);
  }
  SUBCASE("stationary configuration stays put") {
    const auto st = stationary_state(2, 1, 0.5);
    CHECK(theory_loss(st) == doctest::Approx(-1.5).epsilon(1e-14));
    const auto n = flow_step(st, 0.1);
    for (std::size_t i = 0; i < st.layers.size(); ++i)
      CHECK(max_abs(n.layers[i] - st.layers[i]) < 1e-15);
  }
  SUBCASE("one step against two half-steps is second order") {
    auto gap = [&](double dt) {
      const auto one = flow_step(s, dt);
      const auto two = flow_step(flow_step(s, dt / 2), dt / 2);
      return (one.Pi - two.Pi).norm();
    };
    const double ratio = gap(1e-2) / gap(5e-3);
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.05));
  }
  SUBCASE("product dynamics of balanced layers hold to second order") {
    const double ratio = product_rule_residual(s, 1e-2) / product_rule_residual(s, 5e-3);
    CHECK(ratio == doctest::Approx(4.0).epsilon(0.05));
    CHECK(product_rule_residual(s, 1e-4) < 1e-6 * product_velocity(s).norm() * 1e-4 * 1e3);
  }
  SUBCASE("non-finite result halts") { CHECK_THROWS_AS(flow_step(s, std::numeric_limits<double>::infinity()), Error); }
  CHECK_THROWS_AS(flow_step(s, -1.0), InvalidArgument);
}

TEST_CASE("representation covariance factors through the encoder") {
  TheoryConfig cfg;
  cfg.k = 3;
  auto s = balanced_init(cfg);
  // rank-2 encoder
  const Matrix target = random_matrix(4, 2, 13) * random_matrix(2, 6, 14);
  const auto enc = balanced_factors(target, 2, 15);
  s.layers[0] = enc[0];
  s.layers[1] = enc[1];
  s.refresh();
  const Matrix sigma = representation_covariance(s);
  const Matrix expect = s.Pi * covariance(pooled_data(s)) * s.Pi.transpose();
  CHECK(max_abs(sigma - expect) < 1e-10 * std::max(1.0, max_abs(expect)));
  CHECK(numerical_rank(sigma) <= numerical_rank(s.Pi));
  CHECK(numerical_rank(s.Pi) == 2);
  CHECK(pooled_data(s).cols() == 24);
}

TEST_CASE("probe on the reference instance") {
  TheoryConfig cfg;
  const auto log = run_probe(cfg);
  REQUIRE_FALSE(log.halted);
  CHECK(log.ranks == 4);
  CHECK(log.records.size() == static_cast<std::size_t>(200 * 4));

  SUBCASE("step 0 is balanced") { CHECK(log.at(0, 1).balance_res < 1e-12); }
  SUBCASE("coupling constant drifts little") { CHECK(check_assumptions(log).C_drift < 1e-3); }
  SUBCASE("singular-value velocity matches the full-Jacobian form") {
    const auto rep = verify_sigma_dynamics(log);
    REQUIRE(rep.exact.size() == 2);
    for (const auto& r : rep.exact)
      CHECK(r.median < 5e-2);
    CHECK(rep.exact_all.count == 2 * 199);
    CHECK_FALSE(rep.assumption_broken);
  }
  SUBCASE("closed-form flow matches the closed-form velocity") {
    cfg.gradient = GradientModel::ClosedForm;
    const auto rep = verify_sigma_dynamics(run_probe(cfg));
    for (const auto& r : rep.literal)
      CHECK(r.median < 5e-2);
  }
  SUBCASE("two-layer chain starts aligned") {
    cfg.L1 = 1;
    const auto one = run_probe(cfg);
    for (int t = 1; t <= one.ranks; ++t)
      CHECK(one.at(0, t).alignment_dev < 1e-12);
  }
  SUBCASE("csv layout") {
    std::ostringstream os;
    write_probe_csv(os, log);
    const std::string text = os.str();
    CHECK(text.rfind("step,tau,sigma_pi,sigma_phi,numeric_dot,formula_rhs,alignment_dev,balance_res,C_val\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 200 * 4);
    CHECK(to_json(check_assumptions(log)).contains("C_drift"));
  }
}

TEST_CASE("zero Q̄ gives zero velocity on both sides") {
  const auto st = stationary_state(2, 1, 1.0);
  CHECK(max_abs(build_Qbar(st)) == 0.0);
  const auto log = run_probe(st, 1e-3, 3);
  for (const auto& r : log.records) {
    CHECK(std::abs(r.numeric_dot) < 1e-12);
    CHECK(std::abs(r.formula_rhs) < 1e-12);
  }
}

TEST_CASE("zero steps") {
  TheoryConfig cfg;
  cfg.steps = 0;
  const auto log = run_probe(cfg);
  CHECK(log.records.empty());
  std::ostringstream os;
  write_probe_csv(os, log);
  const std::string text = os.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 1);
  CHECK_THROWS_AS(check_assumptions(log), InvalidArgument);
  const auto rows = imbalance_sweep(cfg, {0.0, 1.0});
  for (const auto& r : rows)
    CHECK(r.growth_count == 0);
}

TEST_CASE("imbalance sweep") {
  TheoryConfig cfg;
  cfg.k = 4;
  cfg.init_scale = 0.3;
  cfg.dt = 1e-2;
  cfg.steps = 1000;
  const auto rows = imbalance_sweep(cfg, {0.0, 1.0});
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].qbar_rank <= 1);
  CHECK(rows[1].qbar_rank_exact <= 1);
  CHECK(rows[0].qbar_rank == 4);
  CHECK(rows[0].growth_count > rows[1].growth_count);
  CHECK_THROWS_AS(imbalance_sweep(cfg, {0.0}), InvalidArgument);
}
