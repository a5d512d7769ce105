#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cwd/objectives.hpp"
#include "cwd/optimizers.hpp"

using namespace cwd;

namespace {

OptimizerSpec make_spec(Family f, double eta, double lambda, DecayMode decay = DecayMode::cautious()) {
  OptimizerSpec s;
  s.family = f;
  s.eta = LearningRate::constant(eta);
  s.lambda = lambda;
  s.decay = std::move(decay);
  if (f == Family::Muon) s.shape = {2, 2};
  return s;
}

ParamVector gaussian(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  ParamVector v(n, 0.0);
  for (auto& x : v) x = nd(rng);
  return v;
}

// Runs `steps` iterations from x0 on a fixed gradient stream.
ParamVector run_stream(const OptimizerSpec& spec, ParamVector x, const std::vector<ParamVector>& grads) {
  OptState st(x.dim(), 1);
  for (const auto& g : grads) x = step(spec, st, x, g);
  return x;
}

std::vector<ParamVector> stream(std::uint64_t seed, std::size_t dim, int n) {
  std::mt19937_64 rng(seed);
  std::vector<ParamVector> out;
  for (int i = 0; i < n; ++i) out.push_back(gaussian(rng, dim));
  return out;
}

const Family kAll[] = {Family::SGD, Family::SGDM, Family::Adam, Family::Lion, Family::LionK, Family::Muon};

}  // namespace

TEST_CASE("cwd_mask sign cases") {
  CHECK(cwd_mask({1.0, -1.0, 0.0}, {2.0, 3.0, 5.0}) == ParamVector{1.0, 0.0, 1.0});
  const ParamVector x{1.5, -2.0, 0.25};
  CHECK(cwd_mask(x, x) == ParamVector{1.0, 1.0, 1.0});
  CHECK(cwd_mask(elementwise(ElementOp::mul, x, -1.0), x) == ParamVector{0.0, 0.0, 0.0});
  CHECK_THROWS_AS(cwd_mask({1.0}, {1.0, 2.0}), DimensionError);
}

TEST_CASE("SGD cautious step by hand") {
  const OptimizerSpec spec = make_spec(Family::SGD, 0.1, 1.0);
  OptState st(2, 0);
  const ParamVector out = step_sgd(spec, st, {1.0, -1.0}, {1.0, 1.0});
  CHECK(out[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(-1.1).epsilon(1e-15));
  CHECK(st.last_mask == ParamVector{1.0, 0.0});
  CHECK(st.t == 2);
}

TEST_CASE("lambda = 0 makes all decay modes bitwise identical") {
  const auto grads = stream(3, 4, 200);
  const ParamVector x0{0.5, -1.0, 2.0, -0.1};
  for (Family f : kAll) {
    CAPTURE(to_string(f));
    const ParamVector a = run_stream(make_spec(f, 1e-2, 0.0, DecayMode::cautious()), x0, grads);
    const ParamVector b = run_stream(make_spec(f, 1e-2, 0.0, DecayMode::decoupled()), x0, grads);
    const ParamVector c = run_stream(make_spec(f, 1e-2, 0.0, DecayMode::none()), x0, grads);
    CHECK(a == b);
    CHECK(a == c);
  }
}

TEST_CASE("decoupled SGD equals plain SGD on the l2-regularized objective") {
  const double lambda = 0.3, eta = 1e-2;
  const std::vector<double> diag{2.0, 0.5, 0.0};
  for (const Objective& f : {toy_hyperbola(), toy_parabola(), quadratic_manifold(DenseMatrix::diagonal(diag), {1.0, 2.0, 3.0})}) {
    const Objective reg = ell2_regularize(f, lambda);
    ParamVector x(f.dim(), 1.7), y(f.dim(), 1.7);
    OptState sa(f.dim(), 0), sb(f.dim(), 0);
    const OptimizerSpec dec = make_spec(Family::SGD, eta, lambda, DecayMode::decoupled());
    const OptimizerSpec plain = make_spec(Family::SGD, eta, 0.0, DecayMode::none());
    for (int t = 0; t < 1000; ++t) {
      x = step_sgd(dec, sa, x, f.gradient(x));
      y = step_sgd(plain, sb, y, reg.gradient(y));
    }
    CHECK(x == y);
  }
}

TEST_CASE("every family follows the generic masked update with its raw direction") {
  std::mt19937_64 rng(5);
  for (Family f : kAll) {
    CAPTURE(to_string(f));
    const OptimizerSpec spec = make_spec(f, 0.05, 0.7);
    OptState st(4, 0);
    ParamVector x = gaussian(rng, 4);
    for (int t = 0; t < 50; ++t) {
      const ParamVector g = gaussian(rng, 4);
      const ParamVector next = step(spec, st, x, g);
      const ParamVector& u = st.last_update;
      const ParamVector mask = cwd_mask(u, x);
      CHECK(st.last_mask == mask);
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(next[i] == doctest::Approx(x[i] - 0.05 * (u[i] + 0.7 * mask[i] * x[i])).epsilon(1e-14));
      }
      x = next;
    }
  }
}

TEST_CASE("masked decay never flips a coordinate's sign from the decay term alone") {
  std::mt19937_64 rng(8);
  const OptimizerSpec spec = make_spec(Family::SGD, 0.5, 2.0);  // eta * lambda = 1
  for (int k = 0; k < 200; ++k) {
    const ParamVector x = gaussian(rng, 5);
    OptState st(5, 0);
    const ParamVector zero(5, 0.0);
    const ParamVector out = step_sgd(spec, st, x, zero);
    for (std::size_t i = 0; i < 5; ++i) CHECK(out[i] * x[i] >= 0.0);
  }
}

TEST_CASE("SGDM momentum") {
  SUBCASE("beta = 0 is SGD") {
    const auto grads = stream(9, 3, 100);
    OptimizerSpec m = make_spec(Family::SGDM, 0.02, 0.4);
    m.beta = 0.0;
    CHECK(run_stream(m, {1.0, -2.0, 0.5}, grads) == run_stream(make_spec(Family::SGD, 0.02, 0.4), {1.0, -2.0, 0.5}, grads));
  }
  SUBCASE("first step and geometric convergence") {
    OptimizerSpec spec = make_spec(Family::SGDM, 1e-3, 0.0);
    spec.beta = 0.9;
    OptState st(1, 0);
    ParamVector x{0.0};
    x = step_sgdm(spec, st, x, {2.0});
    CHECK(st.m[0] == doctest::Approx(0.2));
    for (int t = 2; t <= 60; ++t) {
      x = step_sgdm(spec, st, x, {2.0});
      CHECK(std::abs(st.m[0] - 2.0) == doctest::Approx(std::pow(0.9, t) * 2.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("Adam") {
  SUBCASE("first step direction") {
    OptimizerSpec spec = make_spec(Family::Adam, 0.1, 0.0);
    spec.beta1 = 0.9;
    spec.beta2 = 0.95;
    OptState st(1, 0);
    step_adam(spec, st, {0.0}, {1.0});
    CHECK(st.last_update[0] == doctest::Approx(1.0 / (1.0 + 1e-8)).epsilon(1e-14));
  }
  SUBCASE("bounded update over random streams") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> unif(0.0, 0.999);
    std::normal_distribution<double> nd(0.0, 1.0);
    double worst = 0.0;
    for (int s = 0; s < 10000; ++s) {
      OptimizerSpec spec = make_spec(Family::Adam, 1e-3, 0.0);
      double b1 = unif(rng), b2 = unif(rng);
      if (b1 > b2) std::swap(b1, b2);
      spec.beta1 = b1;
      spec.beta2 = b2;
      const double bound = std::sqrt((1.0 - b1) / (1.0 - b2));
      OptState st(2, 0);
      ParamVector x{0.0, 0.0};
      const double scale = std::exp(3.0 * nd(rng));
      for (int t = 0; t < 20; ++t) {
        x = step_adam(spec, st, x, {scale * nd(rng), scale * nd(rng)});
        worst = std::max(worst, norms(st.last_update).linf / bound);
      }
    }
    CHECK(worst <= 1.0 + 1e-12);
  }
  SUBCASE("mask uses the uncorrected first moment, same signs as the corrected one") {
    OptState st(3, 0);
    const OptimizerSpec spec = make_spec(Family::Adam, 1e-2, 1.0);
    std::mt19937_64 rng(4);
    ParamVector x = gaussian(rng, 3);
    for (int t = 0; t < 30; ++t) {
      const ParamVector prev = x;
      x = step_adam(spec, st, x, gaussian(rng, 3));
      CHECK(st.last_mask == cwd_mask(st.m, prev));
      for (std::size_t i = 0; i < 3; ++i) CHECK(sign(st.m[i]) == sign(st.last_update[i]));
    }
  }
  SUBCASE("epsilon = 0 with zero second moment") {
    OptimizerSpec spec = make_spec(Family::Adam, 1e-2, 0.0);
    spec.epsilon = 0.0;
    OptState st(2, 0);
    CHECK_THROWS_AS(step_adam(spec, st, {1.0, 1.0}, {1.0, 0.0}), NumericalError);
  }
  SUBCASE("beta ordering is validated") {
    OptimizerSpec spec = make_spec(Family::Adam, 1e-2, 0.0);
    spec.beta1 = 0.99;
    spec.beta2 = 0.9;
    CHECK_THROWS_AS(spec.validate(2), std::invalid_argument);
  }
}

TEST_CASE("Lion") {
  SUBCASE("hand evaluation") {
    // beta1 = 0 makes the filtered momentum equal to g = (1, 1).
    OptimizerSpec spec = make_spec(Family::Lion, 0.1, 1.0);
    spec.beta1 = 0.0;
    OptState st(2, 0);
    const ParamVector out = step_lion(spec, st, {2.0, -2.0}, {1.0, 1.0});
    CHECK(out[0] == doctest::Approx(1.7).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(-2.1).epsilon(1e-15));
  }
  SUBCASE("constant positive gradient decays exactly the nonnegative coordinates") {
    const OptimizerSpec spec = make_spec(Family::Lion, 1e-3, 0.5);
    OptState st(3, 0);
    ParamVector x{1.0, -1.0, 0.0};
    for (int t = 0; t < 10; ++t) {
      const ParamVector expected = cwd_mask({1.0, 1.0, 1.0}, x);
      x = step_lion(spec, st, x, {0.3, 0.3, 0.3});
      CHECK(st.last_mask == expected);
      CHECK(st.last_update == ParamVector{1.0, 1.0, 1.0});
    }
  }
  SUBCASE("Lion-K with the l1 map reproduces Lion with negated momentum") {
    const auto grads = stream(21, 5, 300);
    for (DecayMode mode : {DecayMode::cautious(), DecayMode::decoupled(), DecayMode::none()}) {
      OptimizerSpec lion = make_spec(Family::Lion, 1e-2, 0.4, mode);
      OptimizerSpec lionk = make_spec(Family::LionK, 1e-2, 0.4, mode);
      lion.beta1 = lionk.beta1 = 0.9;
      lion.beta2 = lionk.beta2 = 0.99;
      OptState a(5, 0), b(5, 0);
      ParamVector x{0.3, -0.2, 1.0, 0.0, -3.0}, y = x;
      for (const auto& g : grads) {
        x = step_lion(lion, a, x, g);
        y = step_lionk(lionk, b, y, g);
        CHECK(x == y);
        CHECK(a.last_mask == b.last_mask);
        CHECK(elementwise(ElementOp::mul, a.m, -1.0) == b.m);
      }
    }
  }
  SUBCASE("Lion-K ascent form without decay") {
    OptimizerSpec spec = make_spec(Family::LionK, 0.1, 0.0);
    spec.beta1 = 0.5;
    OptState st(2, 0);
    const ParamVector out = step_lionk(spec, st, {1.0, 1.0}, {2.0, -3.0});
    CHECK(out == ParamVector{0.9, 1.1});
  }
  SUBCASE("Lion-K mask is cwd_mask of the negated subgradient") {
    std::mt19937_64 rng(30);
    const OptimizerSpec spec = make_spec(Family::LionK, 1e-2, 1.0);
    OptState st(4, 0);
    ParamVector x = gaussian(rng, 4);
    for (int t = 0; t < 50; ++t) {
      const ParamVector prev = x;
      x = step_lionk(spec, st, x, gaussian(rng, 4));
      CHECK(st.last_mask == cwd_mask(st.last_update, prev));
    }
  }
  SUBCASE("trace-norm Lion-K needs a matching shape") {
    OptimizerSpec spec = make_spec(Family::LionK, 1e-2, 0.0);
    spec.k_map = ConvexMap::trace;
    spec.shape = {2, 3};
    CHECK_THROWS_AS(spec.validate(4), std::invalid_argument);
    CHECK_NOTHROW(spec.validate(6));
  }
}

TEST_CASE("Muon") {
  SUBCASE("1x1 matrix is sign momentum") {
    OptimizerSpec spec = make_spec(Family::Muon, 0.1, 0.0);
    spec.shape = {1, 1};
    OptState st(1, 0);
    ParamVector x{0.0};
    for (double g : {0.3, -0.1, -0.5, 2.0}) {
      x = step_muon(spec, st, x, {g});
      CHECK(st.last_update[0] == doctest::Approx(sign(st.m[0])).epsilon(1e-6));
    }
  }
  SUBCASE("stateless step with an orthogonal gradient") {
    OptimizerSpec spec = make_spec(Family::Muon, 0.1, 0.0);
    spec.beta = 0.0;
    OptState st(4, 0);
    const ParamVector g{0.6, -0.8, 0.8, 0.6};
    for (int t = 0; t < 3; ++t) {
      const ParamVector x{1.0, 2.0, 3.0, 4.0};
      const ParamVector out = step_muon(spec, st, x, g);
      double err = 0.0;
      for (std::size_t i = 0; i < 4; ++i) err += std::pow(st.last_update[i] - g[i], 2);
      CHECK(std::sqrt(err) <= 1e-2);
      const ParamVector o = newton_schulz_sign(g, {2, 2}, spec.newton_schulz);
      for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == x[i] - 0.1 * o[i]);
    }
  }
  SUBCASE("shape mismatch") {
    OptimizerSpec spec = make_spec(Family::Muon, 0.1, 0.0);
    spec.shape = {2, 3};
    OptState st(4, 0);
    CHECK_THROWS_AS(step_muon(spec, st, ParamVector(4, 1.0), ParamVector(4, 1.0)), DimensionError);
  }
}

TEST_CASE("ablation masks") {
  std::mt19937_64 rng(2);
  const ParamVector u{1.0, -1.0}, g{-1.0, -1.0}, x{1.0, 1.0};
  CHECK(apply_ablation_mask(DecayMode::cautious(), u, g, x, rng, 1) == ParamVector{1.0, 0.0});
  CHECK(apply_ablation_mask(DecayMode::gradient_mask(), u, g, x, rng, 1) == ParamVector{0.0, 0.0});
  CHECK(apply_ablation_mask(DecayMode::random({1.0}), u, g, x, rng, 1) == ParamVector{1.0, 1.0});
  CHECK(apply_ablation_mask(DecayMode::random({0.0}), u, g, x, rng, 1) == ParamVector{0.0, 0.0});
  CHECK_THROWS_AS(apply_ablation_mask(DecayMode::random({0.5}), u, g, x, rng, 2), std::invalid_argument);
  CHECK_THROWS_AS(apply_ablation_mask(DecayMode::random({}), u, g, x, rng, 1), std::invalid_argument);

  const std::size_t n = 100000;
  const ParamVector ones(n, 1.0);
  const ParamVector mask = apply_ablation_mask(DecayMode::random({0.7}), ones, ones, ones, rng, 1);
  CHECK(norms(mask).l1 / static_cast<double>(n) == doctest::Approx(0.7).epsilon(0.005 / 0.7));

  OptimizerSpec bad = make_spec(Family::SGD, 0.1, 0.1, DecayMode::random({0.5, 1.5}));
  CHECK_THROWS_AS(bad.validate(2), std::invalid_argument);
}

TEST_CASE("random-mask runs with ratio 1 and 0 recover decoupled and no decay") {
  const auto grads = stream(40, 3, 100);
  const ParamVector x0{1.0, -2.0, 0.5};
  const OptimizerSpec r1 = make_spec(Family::Adam, 1e-2, 0.5, DecayMode::random(std::vector<double>(100, 1.0)));
  const OptimizerSpec r0 = make_spec(Family::Adam, 1e-2, 0.5, DecayMode::random(std::vector<double>(100, 0.0)));
  CHECK(run_stream(r1, x0, grads) == run_stream(make_spec(Family::Adam, 1e-2, 0.5, DecayMode::decoupled()), x0, grads));
  // A zero mask still evaluates x - eta*(u + lambda*0*x), which equals x - eta*u exactly.
  CHECK(run_stream(r0, x0, grads) == run_stream(make_spec(Family::Adam, 1e-2, 0.5, DecayMode::none()), x0, grads));
}

TEST_CASE("mask_ratio") {
  OptState st(2, 0);
  CHECK_THROWS_AS(mask_ratio(st), std::logic_error);
  const OptimizerSpec spec = make_spec(Family::SGD, 0.1, 0.1);
  step_sgd(spec, st, {1.0, 1.0}, {1.0, -1.0});
  CHECK(mask_ratio(st).inclusive == 0.5);
  step_sgd(spec, st, {2.0, -3.0}, {2.0, -3.0});
  CHECK(mask_ratio(st).inclusive == 1.0);
  step_sgd(spec, st, {2.0, -3.0}, {-2.0, 3.0});
  CHECK(mask_ratio(st).inclusive == 0.0);
  step_sgd(spec, st, {0.0, 1.0}, {1.0, 1.0});
  CHECK(mask_ratio(st).inclusive == 1.0);
  CHECK(mask_ratio(st).strict == 0.5);
}

TEST_CASE("nonfinite inputs are rejected") {
  OptState st(2, 0);
  const OptimizerSpec spec = make_spec(Family::SGD, 0.1, 0.1);
  CHECK_THROWS_AS(step_sgd(spec, st, {1.0, 1.0}, {NAN, 0.0}), NumericalError);
  CHECK_THROWS_AS(step_sgd(spec, st, {1.7e308, 1.0}, {-1.7e308, 0.0}), NumericalError);
  CHECK_THROWS_AS(step_adam(spec, st, {1.0, 1.0}, {1.0, 1.0}), std::invalid_argument);
}

TEST_CASE("learning-rate schedules") {
  const LearningRate cos = LearningRate::cosine(1.0, 0.1, 100);
  CHECK(cos(1) == 1.0);
  CHECK(cos(51) == doctest::Approx(0.55));
  CHECK(cos(101) == doctest::Approx(0.1));
  CHECK(cos(500) == doctest::Approx(0.1));
  CHECK(LearningRate::inverse_sqrt(2.0)(4) == 1.0);
}

TEST_CASE("specs round-trip through key=value form") {
  OptimizerSpec spec = make_spec(Family::Muon, 3e-3, 0.25, DecayMode::decoupled());
  spec.eta = LearningRate::cosine(3e-3, 1e-5, 777);
  spec.beta = 0.95;
  spec.shape = {3, 4};
  spec.newton_schulz.polish_steps = 2;
  const OptimizerSpec back = spec_from_key_values(to_key_values(spec));
  CHECK(back.family == spec.family);
  CHECK(back.eta.kind == ScheduleKind::cosine);
  CHECK(back.eta.base == spec.eta.base);
  CHECK(back.eta.final_value == spec.eta.final_value);
  CHECK(back.eta.horizon == 777);
  CHECK(back.beta == 0.95);
  CHECK(back.lambda == 0.25);
  CHECK(back.decay.kind == DecayKind::Decoupled);
  CHECK(back.shape.rows == 3);
  CHECK(back.shape.cols == 4);
  CHECK(back.newton_schulz.polish_steps == 2);
  CHECK(to_key_values(back) == to_key_values(spec));
  CHECK_THROWS_AS(spec_from_key_values({{"famliy", "adam"}}), std::invalid_argument);
  CHECK_THROWS_AS(spec_from_key_values({{"eta", "fast"}}), std::invalid_argument);
  CHECK_THROWS_AS(spec_from_key_values({{"decay", "sometimes"}}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip exactly and resume identically") {
  const auto grads = stream(50, 3, 40);
  const OptimizerSpec spec = make_spec(Family::Adam, 1e-2, 0.3);
  OptState st(3, 0);
  ParamVector x{0.1, 0.2, -0.3};
  for (int t = 0; t < 20; ++t) x = step(spec, st, x, grads[t]);
  const auto path = std::filesystem::temp_directory_path() / "cwd_ckpt_test.csv";
  save_checkpoint(st, path);
  OptState back = load_checkpoint(path, 0);
  std::filesystem::remove(path);
  CHECK(back.t == st.t);
  CHECK(back.m == st.m);
  CHECK(back.v == st.v);
  ParamVector y = x;
  for (int t = 20; t < 40; ++t) {
    x = step(spec, st, x, grads[t]);
    y = step(spec, back, y, grads[t]);
  }
  CHECK(x == y);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.csv", 0), std::invalid_argument);
}
