#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ssl_lab/losses.hpp"
#include "support.hpp"

namespace {

using namespace ssl_lab;
using autodiff::Bindings;
using autodiff::Expr;
using ssl_lab::testing::random_matrix;

double value(const Expr& e, const Bindings& b = {}) { return autodiff::evaluate_scalar(e, b); }

Expr logits_of(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return Expr::constant(m);
}

// ---------------------------------------------------------------------------

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  const std::vector<int> y{0};
  EXPECT_NEAR(value(cross_entropy(logits_of({{50, -50}}), y)), 0.0, 1e-12);
}

TEST(CrossEntropy, UniformIsLogTwo) {
  const std::vector<int> y{0, 1, 1};
  EXPECT_NEAR(value(cross_entropy(logits_of({{0, 0}, {0, 0}, {0, 0}}), y)), std::numbers::ln2, 1e-15);
}

TEST(CrossEntropy, ClosedForm) {
  const std::vector<int> y{1};
  EXPECT_NEAR(value(cross_entropy(logits_of({{1, 0}}), y)), std::log1p(std::exp(1.0)), 1e-12);
  EXPECT_NEAR(value(cross_entropy(logits_of({{1, 0}}), y)), 1.313262, 1e-6);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
  const std::vector<int> y{2};
  EXPECT_THROW(cross_entropy(logits_of({{1, 0}}), y), LabelError);
  const std::vector<int> neg{-1};
  EXPECT_THROW(cross_entropy(logits_of({{1, 0}}), neg), LabelError);
}

// ---------------------------------------------------------------------------

TEST(ConsistencyMse, IdenticalLogitsGiveZero) {
  const Expr l = logits_of({{0.3, -1.2, 2.0}, {1.0, 1.0, 0.0}});
  EXPECT_EQ(value(consistency_mse(l, l)), 0.0);
}

TEST(ConsistencyMse, OppositeCertaintyGivesOne) {
  EXPECT_EQ(value(consistency_mse(logits_of({{800, -800}}), logits_of({{-800, 800}}))), 1.0);
}

TEST(ConsistencyMse, ShapeMismatchThrows) {
  EXPECT_THROW(consistency_mse(logits_of({{1, 0}}), logits_of({{1, 0, 0}})), ShapeError);
}

TEST(ConsistencyMse, TargetBranchHasNoGradient) {
  RngStream rng(1);
  Bindings b;
  const Expr s = Expr::input({4, 3}, "s");
  const Expr t = Expr::input({4, 3}, "t");
  b.bind(s, random_matrix(4, 3, rng));
  b.bind(t, random_matrix(4, 3, rng));
  const Expr wrt[] = {s, t};
  const autodiff::Gradient g = autodiff::gradient(consistency_mse(s, t), b, wrt);
  EXPECT_TRUE((g[t].array() == 0.0).all());
  EXPECT_FALSE(g[s].isZero(0.0));
}

// ---------------------------------------------------------------------------

struct SmallNet {
  ParameterSet params = mlp_init({2, 10, 10, 10, 2}, 4);
  Bindings bindings;
  ParameterNodes nodes = bind_parameters(params, bindings);
  Matrix x;

  SmallNet() {
    RngStream rng(2);
    x = random_matrix(16, 2, rng);
  }
};

TEST(PiModel, DeterministicPassesGiveExactZero) {
  SmallNet net;
  RngStream rng(0);
  EXPECT_EQ(value(pi_model_loss(net.nodes, net.x, StochasticConfig{}, rng), net.bindings), 0.0);
}

TEST(PiModel, LossShrinksWithNoise) {
  SmallNet net;
  double previous = std::numeric_limits<double>::infinity();
  for (double std : {0.1, 0.01, 0.001}) {
    RngStream rng(17);
    double total = 0.0;
    for (int i = 0; i < 1000; ++i) total += value(pi_model_loss(net.nodes, net.x, {std, 0.0}, rng), net.bindings);
    const double mean = total / 1000.0;
    EXPECT_LT(mean, previous) << "std " << std;
    EXPECT_GT(mean, 0.0);
    previous = mean;
  }
}

TEST(PiModel, FixedSeedIsDeterministic) {
  SmallNet net;
  RngStream a(5), b(5);
  EXPECT_EQ(value(pi_model_loss(net.nodes, net.x, {0.1, 0.2}, a), net.bindings),
            value(pi_model_loss(net.nodes, net.x, {0.1, 0.2}, b), net.bindings));
}

// ---------------------------------------------------------------------------

TEST(MeanTeacher, TeacherEqualsStudentWithoutNoiseIsZero) {
  SmallNet net;
  RngStream rng(0);
  EXPECT_EQ(value(mean_teacher_loss(net.nodes, constant_parameters(net.params), net.x, StochasticConfig{}, rng),
                  net.bindings),
            0.0);
}

TEST(MeanTeacher, TeacherParametersGetExactZeroGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = ssl_lab::testing::make_loss_instance(ssl_lab::testing::LossKind::mean_teacher, seed);
    const autodiff::Gradient g = autodiff::gradient(inst.loss, inst.bindings, inst.blocked);
    for (const Expr& t : inst.blocked) EXPECT_TRUE((g[t].array() == 0.0).all());
  }
}

TEST(MeanTeacher, EmaFixpointMatchesPiModel) {
  SmallNet net;
  // A teacher equal to the constant student is an EMA fixpoint up to rounding.
  const ParameterSet teacher = net.params;
  const ParameterSet next = ema_update(teacher, net.params, 0.95);
  for (std::size_t i = 0; i < teacher.layers.size(); ++i) {
    EXPECT_LT((next.layers[i].weights - teacher.layers[i].weights).cwiseAbs().maxCoeff(), 1e-15);
  }
  for (const StochasticConfig s : {StochasticConfig{0.0, 0.0}, StochasticConfig{0.1, 0.0}}) {
    RngStream a(3), b(3);
    const double mt = value(mean_teacher_loss(net.nodes, constant_parameters(teacher), net.x, s, a), net.bindings);
    const double pi = value(pi_model_loss(net.nodes, net.x, s, b), net.bindings);
    EXPECT_EQ(mt, pi);
  }
}

TEST(MeanTeacher, ArchitectureMismatchThrows) {
  SmallNet net;
  RngStream rng(0);
  EXPECT_THROW(mean_teacher_loss(net.nodes, constant_parameters(mlp_init({2, 5, 2}, 0)), net.x, {}, rng), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(TemporalEnsembling, FirstStepBiasCorrectionIsExact) {
  RngStream rng(8);
  for (double decay : {0.0, 0.3, 0.6, 0.9, 0.99}) {
    const Matrix z = random_matrix(5, 3, rng, 0.0, 1.0);
    const auto [state, targets] = temporal_ensemble_targets(make_ensemble_state(5, 3, decay), z, decay);
    EXPECT_EQ(targets, z) << decay;
    EXPECT_EQ(state.step_count, 1u);
    EXPECT_LT((state.accumulated - (1.0 - decay) * z).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(TemporalEnsembling, ZeroDecayTracksNewestOutputs) {
  RngStream rng(9);
  EnsembleState state = make_ensemble_state(4, 2, 0.0);
  for (int step = 0; step < 10; ++step) {
    const Matrix z = random_matrix(4, 2, rng, 0.0, 1.0);
    Matrix targets;
    std::tie(state, targets) = temporal_ensemble_targets(state, z, 0.0);
    EXPECT_EQ(targets, z);
  }
}

TEST(TemporalEnsembling, ConstantOutputsAreAFixpoint) {
  // Dyadic outputs and decay make the fixpoint exact in floating point.
  Matrix z(2, 2);
  z << 0.25, 0.75, 0.5, 0.5;
  EnsembleState state = make_ensemble_state(2, 2, 0.5);
  for (int step = 0; step < 40; ++step) {
    Matrix targets;
    std::tie(state, targets) = temporal_ensemble_targets(state, z, 0.5);
    EXPECT_EQ(targets, z) << step;
  }
}

TEST(TemporalEnsembling, ConstantOutputsAreAFixpointForAnyDecay) {
  RngStream rng(4);
  for (double decay : {0.0, 0.6, 0.95}) {
    const Matrix z = softmax(random_matrix(6, 3, rng));
    EnsembleState state = make_ensemble_state(6, 3, decay);
    for (int step = 0; step < 100; ++step) {
      Matrix targets;
      std::tie(state, targets) = temporal_ensemble_targets(state, z, decay);
      EXPECT_EQ(targets, z) << decay << " step " << step;
    }
  }
}

TEST(TemporalEnsembling, TargetsAreBiasCorrectedAverage) {
  RngStream rng(5);
  const double decay = 0.6;
  EnsembleState state = make_ensemble_state(3, 2, decay);
  Matrix raw = Matrix::Zero(3, 2);
  for (int step = 1; step <= 30; ++step) {
    const Matrix z = random_matrix(3, 2, rng, 0.0, 1.0);
    raw = decay * raw + (1.0 - decay) * z;
    Matrix targets;
    std::tie(state, targets) = temporal_ensemble_targets(state, z, decay);
    const Matrix expected = raw / (1.0 - std::pow(decay, step));
    EXPECT_LT((targets - expected).cwiseAbs().maxCoeff(), 1e-14) << step;
    EXPECT_LT((state.accumulated - raw).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(TemporalEnsembling, ShapeMismatchThrows) {
  EXPECT_THROW(temporal_ensemble_targets(make_ensemble_state(3, 2, 0.6), Matrix::Zero(2, 2), 0.6), ShapeError);
}

TEST(TemporalEnsembling, TargetsGetExactZeroGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = ssl_lab::testing::make_loss_instance(ssl_lab::testing::LossKind::temporal_ensembling, seed);
    const autodiff::Gradient g = autodiff::gradient(inst.loss, inst.bindings, inst.blocked);
    EXPECT_TRUE((g[inst.blocked.front()].array() == 0.0).all());
  }
}

// ---------------------------------------------------------------------------

TEST(Vat, RowsHaveNormEpsilon) {
  SmallNet net;
  for (double eps : {0.3, 1.0, 6.0}) {
    RngStream rng(1);
    const VatPerturbation r = vat_perturbation(net.params, net.x, eps, 1e-6, rng);
    for (Eigen::Index i = 0; i < r.r_adv.rows(); ++i) {
      if (r.degenerate[static_cast<std::size_t>(i)]) continue;
      EXPECT_NEAR(r.r_adv.row(i).norm(), eps, 1e-9);
    }
  }
}

TEST(Vat, NormalizationIgnoresPositiveScale) {
  RngStream rng(3);
  const Matrix g = random_matrix(6, 2, rng);
  const Matrix base = normalize_rows(g, 1.0).r_adv;
  for (double c : {1e-8, 0.5, 3.0, 1e6}) {
    EXPECT_LT((normalize_rows(c * g, 1.0).r_adv - base).cwiseAbs().maxCoeff(), 1e-15) << c;
  }
}

TEST(Vat, ZeroGradientRowsAreFlagged) {
  Matrix g = Matrix::Zero(3, 2);
  g(1, 0) = 2.0;
  const VatPerturbation r = normalize_rows(g, 0.5);
  EXPECT_TRUE(r.degenerate[0]);
  EXPECT_FALSE(r.degenerate[1]);
  EXPECT_TRUE(r.any_degenerate());
  EXPECT_TRUE(r.r_adv.row(0).isZero(0.0));
  EXPECT_DOUBLE_EQ(r.r_adv(1, 0), 0.5);
}

TEST(Vat, ConstantModelIsDegenerate) {
  const ParameterSet zero = zeros_like(mlp_init({2, 4, 2}, 0));
  RngStream rng(0);
  const VatPerturbation r = vat_perturbation(zero, Matrix::Ones(3, 2), 1.0, 1e-6, rng);
  EXPECT_TRUE(r.any_degenerate());
  EXPECT_TRUE(r.r_adv.isZero(0.0));
}

TEST(Vat, OneDimensionalLogisticPicksTheBetterEndpoint) {
  // f(x) = softmax([w x, 0]); the perturbation is +-epsilon and to second
  // order both endpoints are maximizers, so the chosen one must match the
  // best of the two up to a third-order gap.
  const double eps = 1e-3;
  RngStream rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    ParameterSet p = mlp_init({1, 2}, 0);
    p.layers[0].weights(0, 0) = rng.uniform(-3.0, 3.0);
    p.layers[0].weights(0, 1) = 0.0;
    const Matrix x = Matrix::Constant(1, 1, rng.uniform(-2.0, 2.0));
    RngStream vrng = rng.derive(static_cast<std::uint64_t>(trial));
    const VatPerturbation r = vat_perturbation(p, x, eps, 1e-6, vrng);
    ASSERT_FALSE(r.any_degenerate());
    EXPECT_NEAR(std::abs(r.r_adv(0, 0)), eps, 1e-15);
    const double chosen = ssl_lab::testing::vat_divergence(p, x, r.r_adv);
    const double plus = ssl_lab::testing::vat_divergence(p, x, Matrix::Constant(1, 1, eps));
    const double minus = ssl_lab::testing::vat_divergence(p, x, Matrix::Constant(1, 1, -eps));
    const double best = std::max(plus, minus);
    EXPECT_GE(chosen, best * (1.0 - 1e-2)) << "trial " << trial;
    EXPECT_GT(chosen, 0.0);
  }
}

TEST(Vat, LossVanishesWithEpsilon) {
  SmallNet net;
  double previous = std::numeric_limits<double>::infinity();
  for (double eps : {1.0, 1e-2, 1e-4, 1e-6}) {
    MethodConfig c = default_method_config(Method::vat);
    c.vat_epsilon = eps;
    RngStream rng(2);
    const double v = value(vat_loss(net.nodes, net.params, net.x, c, rng), net.bindings);
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, previous);
    previous = v;
  }
  EXPECT_LT(previous, 1e-10);
}

TEST(Vat, RejectsNonPositiveParameters) {
  SmallNet net;
  RngStream rng(0);
  EXPECT_THROW(vat_perturbation(net.params, net.x, 0.0, 1e-6, rng), ConfigError);
  EXPECT_THROW(vat_perturbation(net.params, net.x, 1.0, 0.0, rng), ConfigError);
}

TEST(Vat, BeatsRandomPerturbationsOnLinearModels) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) wins += ssl_lab::testing::vat_beats_random(seed, 0.3) ? 1 : 0;
  EXPECT_GE(wins, 38);
}

TEST(Vat, PerturbationGetsExactZeroGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = ssl_lab::testing::make_loss_instance(ssl_lab::testing::LossKind::vat, seed);
    const autodiff::Gradient g = autodiff::gradient(inst.loss, inst.bindings, inst.blocked);
    EXPECT_TRUE((g[inst.blocked.front()].array() == 0.0).all());
  }
}

// ---------------------------------------------------------------------------

TEST(Entropy, CertainPredictionIsNearZero) {
  EXPECT_NEAR(value(entropy_loss(logits_of({{50, -50}}))), 0.0, 1e-12);
}

TEST(Entropy, UniformIsLogK) {
  EXPECT_NEAR(value(entropy_loss(logits_of({{0, 0}}))), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(value(entropy_loss(logits_of({{1, 1, 1, 1, 1}}))), std::log(5.0), 1e-15);
}

TEST(Entropy, NinetyTen) {
  // softmax([ln 9, 0]) = (0.9, 0.1)
  EXPECT_NEAR(value(entropy_loss(logits_of({{std::log(9.0), 0.0}}))), -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)),
              1e-12);
  EXPECT_NEAR(value(entropy_loss(logits_of({{std::log(9.0), 0.0}}))), 0.325083, 1e-6);
}

// ---------------------------------------------------------------------------

TEST(PseudoLabel, UniformRowsGiveZero) {
  const Expr l = logits_of({{0, 0}, {1, 1}});
  EXPECT_EQ(value(pseudo_label_loss(l, {}, 0.95)), 0.0);
}

TEST(PseudoLabel, SingleConfidentRow) {
  // softmax([ln 24, 0]) = (0.96, 0.04)
  const Expr l = logits_of({{std::log(24.0), 0.0}});
  EXPECT_NEAR(value(pseudo_label_loss(l, {}, 0.95)), -std::log(0.96), 1e-12);
  EXPECT_NEAR(value(pseudo_label_loss(l, {}, 0.95)), 0.040822, 1e-6);
}

TEST(PseudoLabel, NormalizedByFullBatch) {
  const Expr l = logits_of({{std::log(24.0), 0.0}, {0.0, 0.0}});
  EXPECT_NEAR(value(pseudo_label_loss(l, {}, 0.95)), -std::log(0.96) / 2.0, 1e-12);
}

TEST(PseudoLabel, HigherThresholdNeverIncreasesLoss) {
  RngStream rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const Expr l = Expr::constant(random_matrix(10, 3, rng, -6.0, 6.0));
    EXPECT_LE(value(pseudo_label_loss(l, {}, 0.99)), value(pseudo_label_loss(l, {}, 0.95)));
  }
}

TEST(PseudoLabel, MaskAndArgmaxIgnoreRowShifts) {
  RngStream rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix l = random_matrix(8, 3, rng, -5.0, 5.0);
    const Matrix mask = pseudo_label_mask(l, 0.8);
    for (Eigen::Index r = 0; r < l.rows(); ++r) l.row(r).array() += rng.uniform(-20.0, 20.0);
    EXPECT_EQ(pseudo_label_mask(l, 0.8), mask);
  }
}

TEST(PseudoLabel, TiesGoToLowestClass) {
  const Matrix mask = pseudo_label_mask((Matrix(1, 3) << 10.0, 10.0, -10.0).finished(), 0.4);
  EXPECT_EQ(mask(0, 0), 1.0);
  EXPECT_EQ(mask(0, 1), 0.0);
}

TEST(PseudoLabel, MaskGetsExactZeroGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = ssl_lab::testing::make_loss_instance(ssl_lab::testing::LossKind::pseudo_label, seed);
    const autodiff::Gradient g = autodiff::gradient(inst.loss, inst.bindings, inst.blocked);
    EXPECT_TRUE((g[inst.blocked.front()].array() == 0.0).all());
  }
}

TEST(PseudoLabel, RejectsThresholdOutsideUnitInterval) {
  EXPECT_THROW(pseudo_label_loss(logits_of({{1, 0}}), {}, 1.0), ConfigError);
  EXPECT_THROW(pseudo_label_loss(logits_of({{1, 0}}), {}, 0.0), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Ramp, Endpoints) {
  EXPECT_EQ(ramp_weight(800, 800, 3.5), 3.5);
  EXPECT_EQ(ramp_weight(5000, 800, 3.5), 3.5);
  EXPECT_DOUBLE_EQ(ramp_weight(0, 800, 1.0), std::exp(-5.0));
  EXPECT_NEAR(ramp_weight(0, 800, 1.0), 0.006738, 1e-6);
  EXPECT_EQ(ramp_weight(800, 800, default_method_config(Method::pi_model).max_consistency), 20.0);
}

TEST(Ramp, NonDecreasingAndFlatAfterLength) {
  double previous = 0.0;
  for (std::size_t s = 0; s < 1200; ++s) {
    const double w = ramp_weight(s, 800, 8.0);
    EXPECT_GE(w, previous);
    if (s >= 800) EXPECT_EQ(w, 8.0);
    previous = w;
  }
}

TEST(Ramp, ZeroLengthRejected) { EXPECT_THROW(ramp_weight(0, 0, 1.0), ConfigError); }

// ---------------------------------------------------------------------------

struct Composition {
  SmallNet net;
  LabeledBatch labeled;
  Matrix unlabeled;
  ParameterSet teacher = mlp_init({2, 10, 10, 10, 2}, 99);
  Matrix targets;

  Composition() {
    RngStream rng(12);
    labeled.x = random_matrix(6, 2, rng);
    labeled.labels = {0, 1, 0, 1, 1, 0};
    unlabeled = random_matrix(10, 2, rng);
    targets = softmax(random_matrix(10, 2, rng));
  }

  double supervised() {
    RngStream rng(0);
    return value(cross_entropy(mlp_forward(net.nodes, labeled.x, StochasticConfig{}, rng), labeled.labels), net.bindings);
  }

  LossGraph build(const MethodConfig& c, std::size_t step, std::uint64_t seed) {
    RngStream rng(seed);
    const MethodState state{&teacher, &targets};
    return total_loss(c, net.params, net.nodes, net.bindings, state, labeled, unlabeled, step, rng);
  }
};

TEST(TotalLoss, SupervisedIsCrossEntropyAlone) {
  Composition c;
  const LossGraph g = c.build(default_method_config(Method::supervised), 500, 1);
  EXPECT_EQ(value(g.total, c.net.bindings), c.supervised());
  EXPECT_FALSE(g.unlabeled_term.has_value());
}

TEST(TotalLoss, VatEntMinDecomposition) {
  Composition c;
  const MethodConfig config = default_method_config(Method::vat_entmin);
  ASSERT_EQ(config.entropy_multiplier, 0.06);
  const LossGraph g = c.build(config, 300, 2);
  ASSERT_TRUE(g.unlabeled_term && g.entropy_term);
  const double vat = value(*g.unlabeled_term, c.net.bindings);
  const double ent = value(*g.entropy_term, c.net.bindings);
  EXPECT_EQ(g.weight, ramp_weight(300, config.ramp_length, config.max_consistency));
  EXPECT_NEAR(value(g.total, c.net.bindings), c.supervised() + g.weight * vat + 0.06 * ent, 1e-12);

  // Independent recomputation of each part.
  RngStream rng(0);
  const double direct_entropy =
      value(entropy_loss(mlp_forward(c.net.nodes, c.unlabeled, StochasticConfig{}, rng)), c.net.bindings);
  EXPECT_EQ(ent, direct_entropy);
  RngStream vrng(2);
  EXPECT_EQ(vat, value(vat_loss(c.net.nodes, c.net.params, c.unlabeled, config, vrng), c.net.bindings));
}

TEST(TotalLoss, StepZeroIsAdditive) {
  Composition c;
  for (Method m : kAllMethods) {
    const MethodConfig config = default_method_config(m);
    const LossGraph g = c.build(config, 0, 3);
    double expected = c.supervised();
    if (g.unlabeled_term) {
      EXPECT_EQ(g.weight, config.max_consistency * std::exp(-5.0));
      expected += g.weight * value(*g.unlabeled_term, c.net.bindings);
    }
    if (g.entropy_term) expected += config.entropy_multiplier * value(*g.entropy_term, c.net.bindings);
    EXPECT_NEAR(value(g.total, c.net.bindings), expected, 1e-12) << method_name(m);
  }
}

TEST(TotalLoss, EmptyUnlabeledBatchIsSupervised) {
  Composition c;
  c.unlabeled = Matrix(0, 2);
  for (Method m : kAllMethods) {
    EXPECT_EQ(value(c.build(default_method_config(m), 900, 4).total, c.net.bindings), c.supervised());
  }
}

TEST(TotalLoss, MeanTeacherRequiresTeacher) {
  Composition c;
  RngStream rng(0);
  EXPECT_THROW(total_loss(default_method_config(Method::mean_teacher), c.net.params, c.net.nodes, c.net.bindings, {},
                          c.labeled, c.unlabeled, 0, rng),
               ConfigError);
}

TEST(TotalLoss, UnknownMethodIsConfigurationError) { EXPECT_THROW(parse_method("ladder"), ConfigError); }

// ---------------------------------------------------------------------------

TEST(LossProperty, GradientsMatchFiniteDifferences) {
  using namespace ssl_lab::testing;
  for (LossKind kind : kAllLossKinds) {
    int accepted = 0;
    for (std::uint64_t seed = 0; accepted < 20; ++seed) {
      ASSERT_LT(seed, 500u);
      const LossInstance inst = make_loss_instance(kind, seed);
      const GradientCheck check = check_gradient(inst.loss, inst.bindings, inst.wrt);
      if (check.relu_margin < 1e-3) continue;
      ++accepted;
      EXPECT_LT(check.max_error, 1e-4) << loss_kind_name(kind) << " seed " << seed;
    }
  }
}

TEST(LossProperty, StopGradientBranchesContributeNothing) {
  // Gradients of the live graph equal those of the graph with every target
  // frozen to a constant, bit for bit.
  using namespace ssl_lab::testing;
  for (LossKind kind : kAllLossKinds) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const LossInstance inst = make_loss_instance(kind, seed);
      const autodiff::Gradient live = autodiff::gradient(inst.loss, inst.bindings, inst.wrt);
      const autodiff::Gradient frozen =
          autodiff::gradient(freeze_stop_gradients(inst.loss, inst.bindings), inst.bindings, inst.wrt);
      for (const Expr& w : inst.wrt) EXPECT_EQ(live[w], frozen[w]) << loss_kind_name(kind) << " seed " << seed;
    }
  }
}

TEST(LossProperty, Ranges) {
  RngStream rng(30);
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = 2 + static_cast<Eigen::Index>(rng.index(4));
    const auto n = 1 + static_cast<Eigen::Index>(rng.index(8));
    const Expr a = Expr::constant(random_matrix(n, k, rng, -10.0, 10.0));
    const Expr b = Expr::constant(random_matrix(n, k, rng, -10.0, 10.0));
    const double h = value(entropy_loss(a));
    EXPECT_GE(h, -1e-15);
    EXPECT_LE(h, std::log(static_cast<double>(k)) + 1e-12);
    const std::vector<int> y = ssl_lab::testing::random_labels(n, static_cast<int>(k), rng);
    EXPECT_GE(value(cross_entropy(a, y)), 0.0);
    const double mse = value(consistency_mse(a, b));
    EXPECT_GE(mse, 0.0);
    EXPECT_LE(mse, 2.0);
    EXPECT_GE(value(pseudo_label_loss(a, {}, 0.7)), 0.0);
  }
  SmallNet net;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    RngStream vrng(seed);
    EXPECT_GE(value(vat_loss(net.nodes, net.params, net.x, default_method_config(Method::vat), vrng), net.bindings),
              0.0);
  }
}

// ---------------------------------------------------------------------------

TEST(MethodConfig, Defaults) {
  EXPECT_EQ(default_method_config(Method::pi_model).max_consistency, 20.0);
  EXPECT_EQ(default_method_config(Method::mean_teacher).max_consistency, 8.0);
  EXPECT_EQ(default_method_config(Method::mean_teacher).ema_decay, 0.95);
  EXPECT_EQ(default_method_config(Method::vat).max_consistency, 0.3);
  EXPECT_EQ(default_method_config(Method::vat).vat_xi, 1e-6);
  EXPECT_EQ(default_method_config(Method::pseudo_label).max_consistency, 1.0);
  EXPECT_EQ(default_method_config(Method::pseudo_label).pseudo_threshold, 0.95);
  EXPECT_EQ(default_method_config(Method::vat_entmin).entropy_multiplier, 0.06);
  for (Method m : kAllMethods) {
    EXPECT_EQ(parse_method(method_name(m)), m);
    EXPECT_NO_THROW(validate(default_method_config(m)));
  }
}

TEST(MethodConfig, IrrelevantFieldsMustStillBeValid) {
  MethodConfig c = default_method_config(Method::supervised);
  c.vat_epsilon = -1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = default_method_config(Method::vat);
  c.pseudo_threshold = 1.5;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(MethodConfig, JsonRoundTripAndStrictKeys) {
  MethodConfig c = default_method_config(Method::mean_teacher);
  c.ema_decay = 0.99;
  c.stochastic.dropout_rate = 0.25;
  EXPECT_EQ(method_config_from_json(to_json(c)), c);
  EXPECT_THROW(method_config_from_json({{"method", "vat"}, {"foo", 1}}), ConfigError);
  EXPECT_THROW(method_config_from_json({{"max_consistency", 1}}), ConfigError);
  EXPECT_THROW(method_config_from_json({{"method", "vat"}, {"vat_epsilon", "big"}}), ConfigError);
}

}  // namespace
