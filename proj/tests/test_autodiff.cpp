#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "mno/autodiff.hpp"
#include "mno/errors.hpp"
#include "mno/nn.hpp"
#include "mno/optim.hpp"
#include "oracle.hpp"

using namespace mno;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Max relative error between tape gradients and central differences over every
// entry of every input.
double fd_error(const Fn& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  Var<double> loss = f(tape, leaves);
  tape.backward(loss);
  double worst = 0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const Tensor<double> g = tape.grad_tensor(leaves[a].id);
    for (std::size_t i = 0; i < inputs[a].numel(); ++i) {
      auto eval = [&](double delta) {
        auto shifted = inputs;
        shifted[a][i] += delta;
        Tape<double> t2;
        std::vector<Var<double>> l2;
        for (const auto& t : shifted) l2.push_back(t2.constant(t));
        return f(t2, l2).value().item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - g[i]) / denom);
    }
  }
  return worst;
}

// A fixed weighting so that every output entry matters to the scalar loss.
Var<double> weighted_sum(Tape<double>& tape, Var<double> x) {
  Tensor<double> w(x.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return sum_all(mul(x, tape.constant(w)));
}

}  // namespace

TEST(Softmax, Examples) {
  Tape<double> tape;
  auto s = softmax(tape.constant(Tensor<double>::vector({0, 0})), 0).value();
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  for (double c : {-40.0, 0.0, 7.5, 300.0}) {
    auto t = softmax(tape.constant(Tensor<double>::vector({c, c, c})), 0).value();
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(t[i], 1.0 / 3.0, 1e-15);
  }
  auto r = softmax(tape.constant(Tensor<double>::vector({1, 2, 3})), 0).value();
  EXPECT_NEAR(r[0], 0.09003057, 1e-8);
  EXPECT_NEAR(r[1], 0.24472847, 1e-8);
  EXPECT_NEAR(r[2], 0.66524096, 1e-8);
}

TEST(Softmax, SlicesSumToOneAndShiftInvariant) {
  Rng rng(3);
  std::uniform_real_distribution<float> u(-50.0f, 50.0f);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> x({5, 7, 3});
    for (auto& v : x.values()) v = u(rng);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tape<float> tape;
      const auto s = softmax(tape.constant(x), axis).value();
      const auto ss = sum_axis(tape.constant(s), axis).value();
      for (float v : ss.values()) EXPECT_NEAR(v, 1.0f, 1e-6f);
      Tensor<float> shifted = x;
      for (auto& v : shifted.values()) v += 13.25f;
      const auto s2 = softmax(tape.constant(shifted), axis).value();
      for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s[i], s2[i], 1e-6f);
    }
  }
}

TEST(Backward, SumAndSquare) {
  Tape<double> tape;
  auto w = tape.leaf(Tensor<double>::vector({1, -2, 3}));
  tape.backward(sum_all(w));
  const auto g = tape.grad_tensor(w.id);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(g[i], 1.0);

  Tape<double> t2;
  auto w2 = t2.leaf(Tensor<double>::vector({1, -2, 3}));
  t2.backward(sum_all(mul(w2, w2)));
  const auto g2 = t2.grad_tensor(w2.id);
  EXPECT_EQ(g2[0], 2.0);
  EXPECT_EQ(g2[1], -4.0);
  EXPECT_EQ(g2[2], 6.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> tape;
  auto w = tape.leaf(Tensor<double>::vector({1, 2}));
  EXPECT_THROW(tape.backward(w), std::invalid_argument);
}

TEST(Backward, NonFiniteValuesRaise) {
  Tape<double> tape;
  auto w = tape.leaf(Tensor<double>::vector({1.0}));
  auto big = scale(w, 1e308);
  EXPECT_THROW(scale(big, 10.0), NumericError);
}

TEST(FiniteDifference, Primitives) {
  const double tol = 1e-4;
  auto a = random_tensor({4, 3}, 1), b = random_tensor({3, 5}, 2), c = random_tensor({4, 3}, 3);
  auto bt = random_tensor({5, 3}, 4), at = random_tensor({3, 4}, 5);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, matmul(v[0], v[1])); }, {a, b}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, matmul(v[0], v[1], false, true)); },
                     {a, bt}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, matmul(v[0], v[1], true, false)); },
                     {at, b}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, linear(v[0], v[1], v[2])); },
                     {a, b, random_tensor({5}, 6)}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, add(v[0], v[1])); }, {a, c}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, sub(v[0], v[1])); }, {a, c}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, mul(v[0], v[1])); }, {a, c}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, scale(v[0], -2.5)); }, {a}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, gelu(v[0])); },
                     {random_tensor({4, 3}, 7, -3, 3)}),
            tol);
  auto x3 = random_tensor({3, 4, 5}, 8, -2, 2);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    EXPECT_LT(fd_error([axis](auto& t, auto& v) { return weighted_sum(t, softmax(v[0], axis)); }, {x3}), tol)
        << "axis " << axis;
    EXPECT_LT(fd_error([axis](auto& t, auto& v) { return weighted_sum(t, sum_axis(v[0], axis)); }, {x3}), tol)
        << "axis " << axis;
  }
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, reshape(v[0], {12})); }, {a}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, gather_rows(v[0], {3, 0, 0, 2, 1, 3})); },
                     {a}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, scale_rows(v[0], v[1])); },
                     {a, random_tensor({4, 1}, 9)}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, layer_norm(v[0], v[1], v[2])); },
                     {random_tensor({4, 6}, 10, -2, 2), random_tensor({6}, 11), random_tensor({6}, 12)}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, concat_cols<double>({v[0], v[1]})); },
                     {a, random_tensor({4, 2}, 13)}),
            tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, slice_cols(v[0], 1, 3)); }, {a}), tol);
  EXPECT_LT(fd_error([](auto& t, auto& v) { return weighted_sum(t, affine_cols(v[0], {2.0, -1.0, 0.5}, {1.0, 0.0, 3.0})); },
                     {a}),
            tol);
  const Tensor<double> truth = random_tensor({4, 3}, 14);
  EXPECT_LT(fd_error([&](auto&, auto& v) { return relative_l2(v[0], truth); }, {a}), tol);
  EXPECT_LT(fd_error([](auto&, auto& v) { return add_scalars<double>({sum_all(v[0]), sum_all(mul(v[0], v[0]))}); },
                     {a}),
            tol);
}

TEST(RelativeL2, ZeroNormTruthIsAnError) {
  Tape<double> tape;
  auto p = tape.leaf(Tensor<double>::vector({1, 2}));
  EXPECT_THROW(relative_l2(p, Tensor<double>::vector({0, 0})), NumericError);
}

TEST(Mlp, Examples) {
  {
    ParamSet<double> ps;
    Tensor<double> eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1;
    ps.add("m.l0.w", eye);
    ps.add("m.l0.b", Tensor<double>({3}));
    Tape<double> tape;
    ParamBinding<double> b(tape, ps);
    auto y = mlp_forward(MlpSpec{{3, 3}}, b, "m", tape.constant(Tensor<double>({1, 3}, std::vector<double>{1, 2, 3})));
    EXPECT_EQ(y.value()[0], 1);
    EXPECT_EQ(y.value()[1], 2);
    EXPECT_EQ(y.value()[2], 3);
  }
  {
    ParamSet<double> ps;
    ps.add("m.l0.w", Tensor<double>({2, 1}, std::vector<double>{1, 1}));
    ps.add("m.l0.b", Tensor<double>({1}));
    Tape<double> tape;
    ParamBinding<double> b(tape, ps);
    auto y = mlp_forward(MlpSpec{{2, 1}}, b, "m", tape.constant(Tensor<double>({1, 2}, std::vector<double>{0.5, -0.5})));
    EXPECT_EQ(y.value()[0], 0);
  }
  {
    ParamSet<double> ps;
    Rng rng(0);
    const MlpSpec spec{{1, 2, 1}};
    init_mlp(ps, "m", spec, rng);
    Tape<double> tape;
    ParamBinding<double> b(tape, ps);
    auto y = mlp_forward(spec, b, "m", tape.constant(Tensor<double>({1, 1}, 1.0)));
    // Straight-line: h_j = gelu(w0[j] + b0[j]); y = sum_j h_j w1[j] + b1.
    const auto& w0 = ps.value("m.l0.w");
    const auto& b0 = ps.value("m.l0.b");
    const auto& w1 = ps.value("m.l1.w");
    const auto& b1 = ps.value("m.l1.b");
    double expect = b1[0];
    for (int j = 0; j < 2; ++j) expect += oracle::gelu(w0[j] + b0[j]) * w1[j];
    EXPECT_NEAR(y.value()[0], expect, 1e-14);
  }
}

TEST(Mlp, InitIsUniformInFanInBound) {
  ParamSet<double> ps;
  Rng rng(0);
  init_mlp(ps, "m", MlpSpec::two_layer(16, 32, 4), rng);
  const double bound0 = std::sqrt(1.0 / 16), bound1 = std::sqrt(1.0 / 32);
  for (double v : ps.value("m.l0.w").values()) EXPECT_LE(std::abs(v), bound0);
  for (double v : ps.value("m.l1.w").values()) EXPECT_LE(std::abs(v), bound1);
  EXPECT_EQ(ps.value("m.l0.w").shape(), (Shape{16, 32}));
}

TEST(Mlp, WidthMismatchThrows) {
  ParamSet<double> ps;
  Rng rng(0);
  init_mlp(ps, "m", MlpSpec::two_layer(3, 4, 2), rng);
  Tape<double> tape;
  ParamBinding<double> b(tape, ps);
  EXPECT_THROW(mlp_forward(MlpSpec::two_layer(3, 4, 2), b, "m", tape.constant(Tensor<double>({2, 5}))),
               std::invalid_argument);
}

TEST(Msa, SingleTokenAndIdenticalTokens) {
  ParamSet<double> ps;
  Rng rng(0);
  init_msa(ps, "a", 4, rng);
  {
    Tape<double> tape;
    ParamBinding<double> b(tape, ps);
    MsaTrace<double> tr;
    msa_forward(b, "a", tape.constant(random_tensor({1, 4}, 1)), 2, &tr);
    ASSERT_EQ(tr.weights.size(), 2u);
    for (const auto& w : tr.weights) EXPECT_EQ(w[0], 1.0);
  }
  {
    Tensor<double> same({5, 4});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 4; ++c) same.at(i, c) = 0.1 * static_cast<double>(c) - 0.2;
    Tape<double> tape;
    ParamBinding<double> b(tape, ps);
    MsaTrace<double> tr;
    msa_forward(b, "a", tape.constant(same), 1, &tr);
    for (double w : tr.weights[0].values()) EXPECT_NEAR(w, 0.2, 1e-15);
  }
}

TEST(Msa, MatchesOracle) {
  ParamSet<double> ps;
  Rng rng(0);
  init_msa(ps, "a", 2, rng);
  const auto x = random_tensor({2, 2}, 42);
  Tape<double> tape;
  ParamBinding<double> b(tape, ps);
  const auto y = msa_forward(b, "a", tape.constant(x), 1).value();
  EXPECT_LT(oracle::max_abs_diff(y, oracle::msa(ps, "a", oracle::from_tensor(x), 1)), 1e-14);

  ParamSet<double> ps8;
  init_msa(ps8, "a", 8, rng);
  const auto x8 = random_tensor({6, 8}, 43);
  Tape<double> t8;
  ParamBinding<double> b8(t8, ps8);
  const auto y8 = msa_forward(b8, "a", t8.constant(x8), 4).value();
  EXPECT_LT(oracle::max_abs_diff(y8, oracle::msa(ps8, "a", oracle::from_tensor(x8), 4)), 1e-13);
}

TEST(Msa, PermutationEquivariant) {
  ParamSet<float> ps;
  Rng rng(1);
  init_msa(ps, "a", 8, rng);
  Tensor<float> x({7, 8});
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : x.values()) v = u(rng);
  std::vector<int> perm{3, 6, 0, 1, 5, 2, 4};
  Tape<float> tape;
  ParamBinding<float> b(tape, ps);
  const auto y = msa_forward(b, "a", tape.constant(x), 2).value();
  const auto yp = msa_forward(b, "a", gather_rows(tape.constant(x), perm), 2).value();
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp.at(i, c), y.at(static_cast<std::size_t>(perm[i]), c), 1e-5f);
}

TEST(Msa, HeadsMustDivideDim) {
  ParamSet<double> ps;
  Rng rng(0);
  init_msa(ps, "a", 6, rng);
  Tape<double> tape;
  ParamBinding<double> b(tape, ps);
  EXPECT_THROW(msa_forward(b, "a", tape.constant(Tensor<double>({2, 6})), 4), std::invalid_argument);
}

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  ParamSet<double> ps;
  ps.add("w", random_tensor({3, 2}, 1));
  const auto before = ps.value("w");
  ps.zero_grad();
  OptimizerState<double> st;
  st.config.weight_decay = 0;
  adamw_step(st, ps, 0.1);
  EXPECT_EQ(ps.value("w"), before);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, OneStepHandComputation) {
  ParamSet<double> ps;
  ps.add("w", Tensor<double>::vector({1.0}));
  ps.zero_grad();
  ps.at("w").grad[0] = 1.0;
  OptimizerState<double> st;
  st.config.weight_decay = 0;
  adamw_step(st, ps, 0.1);
  // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(ps.value("w")[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(ps.value("w")[0], 0.9, 1e-8);
}

TEST(AdamW, PureDecay) {
  ParamSet<double> ps;
  ps.add("w", Tensor<double>::vector({1.0}));
  ps.zero_grad();
  OptimizerState<double> st;
  st.config.weight_decay = 0.01;
  adamw_step(st, ps, 0.1);
  EXPECT_NEAR(ps.value("w")[0], 0.999, 1e-15);
}

TEST(AdamW, SkipsFrozenAndRejectsMissingGradients) {
  ParamSet<double> ps;
  ps.add("frozen", Tensor<double>::vector({2.0}), /*trainable=*/false);
  ps.add("w", Tensor<double>::vector({1.0}));
  OptimizerState<double> st;
  EXPECT_THROW(adamw_step(st, ps, 0.1), std::invalid_argument);
  ps.zero_grad();
  ps.at("w").grad[0] = 1.0;
  adamw_step(st, ps, 0.1);
  EXPECT_EQ(ps.value("frozen")[0], 2.0);
  EXPECT_THROW(adamw_step(st, ps, -1.0), std::invalid_argument);
}

TEST(OneCycle, Examples) {
  const double max_lr = 1e-3;
  EXPECT_DOUBLE_EQ(onecycle_lr(30, 100, max_lr), max_lr);
  EXPECT_DOUBLE_EQ(onecycle_lr(0, 100, max_lr), max_lr / 25);
  // Anneal runs from step 30 to 100; step 65 is its cosine midpoint.
  const double min_lr = max_lr / 1e4;
  EXPECT_NEAR(onecycle_lr(65, 100, max_lr), min_lr + (max_lr - min_lr) * 0.5, 1e-15);
  EXPECT_NEAR(onecycle_lr(65, 100, max_lr), 5.0005e-4, 1e-15);
  // Warm-up midpoint.
  const double start = max_lr / 25;
  EXPECT_NEAR(onecycle_lr(15, 100, max_lr), start + (max_lr - start) * 0.5, 1e-15);
  EXPECT_THROW(onecycle_lr(100, 100, max_lr), std::invalid_argument);
  EXPECT_THROW(onecycle_lr(-1, 100, max_lr), std::invalid_argument);
  EXPECT_THROW(onecycle_lr(0, 100, 0.0), std::invalid_argument);
}

TEST(OneCycle, MonotoneWarmupAndAnneal) {
  double prev = 0;
  for (int s = 0; s <= 30; ++s) {
    const double lr = onecycle_lr(s, 100, 1e-3);
    EXPECT_GE(lr, prev);
    prev = lr;
  }
  for (int s = 31; s < 100; ++s) {
    const double lr = onecycle_lr(s, 100, 1e-3);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}
