#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "timesaf/rng.hpp"
#include "timesaf/theory.hpp"

using namespace timesaf;

namespace {

// Closed-form oracles for the true (not worst-case) variances, derived
// directly from the covariance structure of each correlation model:
//   Var(sum_i a_i eps_i) = sigma^2 (sum_i a_i^2 + rho * sum_{i != j} a_i a_j)
// with rho = 0 for iid and rho = 1 for fully correlated draws.
double true_variance(const std::vector<double>& coeffs, double sigma,
                     double rho) {
  double sum = 0, sumsq = 0;
  for (double a : coeffs) {
    sum += a;
    sumsq += a * a;
  }
  return sigma * sigma * (sumsq + rho * (sum * sum - sumsq));
}

double true_sync(const NoiseSpec& spec, double rho) {
  std::vector<double> coeffs(static_cast<std::size_t>(spec.depth),
                             spec.lambda);
  return true_variance(coeffs, spec.sigma, rho);
}

double true_async(const NoiseSpec& spec, double rho) {
  return true_variance(spec.resolved_lambda_s(), spec.sigma, rho);
}

double rho_of(const NoiseSpec& spec) {
  switch (spec.correlation) {
    case NoiseCorrelation::Iid: return 0.0;
    case NoiseCorrelation::FullyCorrelated: return 1.0;
    case NoiseCorrelation::RhoUniform: return spec.rho;
  }
  return 0.0;
}

// Three Monte-Carlo standard errors of a Gaussian variance estimate.
double three_stderr(double variance, Index trials) {
  return 3.0 * variance * std::sqrt(2.0 / (static_cast<double>(trials) - 1));
}

}  // namespace

TEST_CASE("the synchronous bound is the squared-depth worst case") {
  NoiseSpec spec;
  spec.depth = 6;
  spec.stages = 2;
  spec.lambda = 1.0;
  spec.sigma = 1.0;
  CHECK(var_sync_bound(spec) == 36.0);

  spec.lambda = 0.0;
  CHECK(var_sync_bound(spec) == 0.0);

  spec.lambda = 0.7;
  spec.sigma = 1.3;
  spec.depth = 1;
  spec.stages = 1;
  CHECK(var_sync_bound(spec) ==
        doctest::Approx(0.7 * 0.7 * 1.3 * 1.3).epsilon(1e-15));
}

TEST_CASE("the staged bound scales with the stage count and peak strength") {
  NoiseSpec spec;
  spec.depth = 6;
  spec.stages = 2;
  spec.lambda = 1.0;
  spec.sigma = 1.0;
  CHECK(var_async_bound(spec) == 4.0);

  spec.stages = 0;
  CHECK(var_async_bound(spec) == 0.0);

  // The headline ratio: two staged injections against six per-layer ones.
  spec.stages = 2;
  CHECK(var_async_bound(spec) / var_sync_bound(spec) ==
        doctest::Approx(1.0 / 9.0).epsilon(1e-15));

  // The peak strength drives the bound, not the individual values.
  spec.lambda_s = {0.2, -1.5};
  CHECK(var_async_bound(spec) == doctest::Approx(4.0 * 1.5 * 1.5));
}

TEST_CASE("invalid specifications are rejected up front") {
  NoiseSpec spec;
  spec.depth = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = NoiseSpec{};
  spec.stages = spec.depth + 1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = NoiseSpec{};
  spec.sigma = -1.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = NoiseSpec{};
  spec.lambda_s = {1.0};  // two stages expect two strengths
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = NoiseSpec{};
  spec.correlation = NoiseCorrelation::RhoUniform;
  spec.rho = 1.5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = NoiseSpec{};
  spec.trials = 9999;
  CHECK_THROWS_AS(simulate_accumulation(spec), ConfigError);

  CHECK(parse_correlation("iid") == NoiseCorrelation::Iid);
  CHECK(parse_correlation("fully_correlated") ==
        NoiseCorrelation::FullyCorrelated);
  CHECK(parse_correlation("rho_uniform") == NoiseCorrelation::RhoUniform);
  CHECK_THROWS_AS(parse_correlation("weird"), ConfigError);
  CHECK(correlation_name(NoiseCorrelation::Iid) == std::string("iid"));
}

TEST_CASE("independent noise accumulates linearly, not quadratically") {
  NoiseSpec spec;
  spec.depth = 6;
  spec.stages = 2;
  spec.lambda = 1.0;
  spec.sigma = 1.0;
  spec.trials = 200000;
  spec.seed = 31;
  auto r = simulate_accumulation(spec);
  CHECK(std::abs(r.var_sync_mc - 6.0) < three_stderr(6.0, spec.trials));
  CHECK(std::abs(r.var_async_mc - 2.0) < three_stderr(2.0, spec.trials));
  CHECK(r.ratio_mc == doctest::Approx(1.0 / 3.0).epsilon(0.05));
  CHECK(r.bound_ok);
}

TEST_CASE("shared noise attains the quadratic worst case exactly") {
  NoiseSpec spec;
  spec.depth = 6;
  spec.stages = 2;
  spec.lambda = 1.0;
  spec.sigma = 1.0;
  spec.correlation = NoiseCorrelation::FullyCorrelated;
  spec.trials = 200000;
  spec.seed = 32;
  auto r = simulate_accumulation(spec);
  CHECK(std::abs(r.var_sync_mc - 36.0) < three_stderr(36.0, spec.trials));
  CHECK(std::abs(r.var_async_mc - 4.0) < three_stderr(4.0, spec.trials));
  CHECK(r.bound_ok);
}

TEST_CASE("pairwise correlation interpolates between the extremes") {
  NoiseSpec spec;
  spec.depth = 6;
  spec.stages = 2;
  spec.correlation = NoiseCorrelation::RhoUniform;
  spec.trials = 200000;
  spec.seed = 33;
  for (double rho : {0.0, 0.5, 1.0}) {
    spec.rho = rho;
    auto r = simulate_accumulation(spec);
    double want_sync = true_sync(spec, rho);
    double want_async = true_async(spec, rho);
    CHECK(std::abs(r.var_sync_mc - want_sync) <
          three_stderr(want_sync, spec.trials));
    CHECK(std::abs(r.var_async_mc - want_async) <
          three_stderr(want_async, spec.trials));
    CHECK(r.bound_ok);
  }
}

TEST_CASE("zero noise accumulates to exactly zero") {
  NoiseSpec spec;
  spec.sigma = 0.0;
  spec.trials = 10000;
  for (auto c : {NoiseCorrelation::Iid, NoiseCorrelation::FullyCorrelated,
                 NoiseCorrelation::RhoUniform}) {
    spec.correlation = c;
    auto r = simulate_accumulation(spec);
    CHECK(r.var_sync_mc == 0.0);
    CHECK(r.var_async_mc == 0.0);
    CHECK(r.ratio_mc == 0.0);
    CHECK(r.bound_ok);
  }
}

TEST_CASE("random configurations agree with the closed form in three errors") {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    NoiseSpec spec;
    spec.depth = 1 + static_cast<Index>(rng.below(8));
    spec.stages = static_cast<Index>(rng.below(
        static_cast<std::uint64_t>(spec.depth) + 1));
    spec.lambda = 0.2 + rng.uniform();
    spec.sigma = 0.2 + rng.uniform();
    spec.lambda_s.clear();
    for (Index s = 0; s < spec.stages; ++s) {
      spec.lambda_s.push_back(rng.uniform() * 2.0 - 1.0);
    }
    spec.correlation = (trial % 2 == 0) ? NoiseCorrelation::Iid
                                        : NoiseCorrelation::FullyCorrelated;
    spec.trials = 60000;
    spec.seed = 1000 + static_cast<std::uint64_t>(trial);
    double rho = rho_of(spec);
    auto r = simulate_accumulation(spec);
    INFO("trial ", trial, " depth ", spec.depth, " stages ", spec.stages);
    CHECK(std::abs(r.var_sync_mc - true_sync(spec, rho)) <=
          three_stderr(true_sync(spec, rho), spec.trials) + 1e-12);
    CHECK(std::abs(r.var_async_mc - true_async(spec, rho)) <=
          three_stderr(true_async(spec, rho), spec.trials) + 1e-12);
    // The Cauchy-Schwarz bounds hold for every correlation model.
    CHECK(r.bound_ok);
    double slack = 1.0 + 5.0 * std::sqrt(2.0 / (spec.trials - 1.0));
    CHECK(r.var_sync_mc <= var_sync_bound(spec) * slack);
    CHECK(r.var_async_mc <= var_async_bound(spec) * slack);
  }
}

TEST_CASE("more stages never shrink the staged bound") {
  NoiseSpec spec;
  spec.depth = 8;
  double prev = -1.0;
  for (Index s = 0; s <= 8; ++s) {
    spec.stages = s;
    spec.lambda_s.clear();
    double bound = var_async_bound(spec);
    CHECK(bound >= prev);
    prev = bound;
  }
}

TEST_CASE("the simulator is deterministic in the seed") {
  NoiseSpec spec;
  spec.trials = 20000;
  spec.seed = 5;
  auto a = simulate_accumulation(spec);
  auto b = simulate_accumulation(spec);
  CHECK(a.var_sync_mc == b.var_sync_mc);
  CHECK(a.var_async_mc == b.var_async_mc);
  spec.seed = 6;
  auto c = simulate_accumulation(spec);
  CHECK(a.var_sync_mc != c.var_sync_mc);
}

TEST_CASE("gate attenuation quarters the bound at zero and kills it at minus infinity") {
  NoiseSpec spec;
  spec.depth = 6;
  spec.stages = 2;
  double full = var_async_bound(spec);
  auto rows = gate_attenuation_curve(spec, {-30.0, -2.0, 0.0, 2.0, 30.0});
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].bound < 1e-20);
  CHECK(rows[2].scale == doctest::Approx(0.5));
  CHECK(rows[2].bound == doctest::Approx(full / 4.0));
  CHECK(rows[4].bound == doctest::Approx(full).epsilon(1e-9));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].bound >= rows[i - 1].bound);  // monotone in the gate
  }
}

TEST_CASE("the report is one labeled CSV row per configuration") {
  NoiseSpec iid;
  iid.trials = 20000;
  NoiseSpec rho;
  rho.correlation = NoiseCorrelation::RhoUniform;
  rho.rho = 0.5;
  rho.trials = 20000;
  std::string csv = theory_report_csv({iid, rho});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line ==
        "L,S,correlation,var_sync,var_async,ratio,sync_bound,async_bound");
  std::getline(in, line);
  CHECK(line.rfind("6,2,iid,", 0) == 0);
  CHECK(line.find(",36.000000,4.000000") != std::string::npos);
  std::getline(in, line);
  CHECK(line.rfind("6,2,rho_uniform(0.50),", 0) == 0);
  CHECK_FALSE(std::getline(in, line));
}
