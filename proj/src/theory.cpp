#include "timesaf/theory.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

#include "timesaf/rng.hpp"

namespace timesaf {

const char* correlation_name(NoiseCorrelation c) {
  switch (c) {
    case NoiseCorrelation::Iid: return "iid";
    case NoiseCorrelation::FullyCorrelated: return "fully_correlated";
    case NoiseCorrelation::RhoUniform: return "rho_uniform";
  }
  throw ConfigError("unknown correlation model");
}

NoiseCorrelation parse_correlation(const std::string& name) {
  if (name == "iid") return NoiseCorrelation::Iid;
  if (name == "fully_correlated") return NoiseCorrelation::FullyCorrelated;
  if (name == "rho_uniform") return NoiseCorrelation::RhoUniform;
  throw ConfigError("unknown correlation model '" + name +
                    "'; expected iid, fully_correlated or rho_uniform");
}

void NoiseSpec::validate() const {
  if (depth < 1) {
    throw ConfigError("noise depth must be at least 1, got " +
                      std::to_string(depth));
  }
  if (stages < 0 || stages > depth) {
    throw ConfigError("stage count must lie in [0, depth]; got " +
                      std::to_string(stages) + " stages for depth " +
                      std::to_string(depth));
  }
  if (!(sigma >= 0.0)) {
    throw ConfigError("noise sigma must be nonnegative");
  }
  if (!lambda_s.empty() &&
      lambda_s.size() != static_cast<std::size_t>(stages)) {
    throw ConfigError("expected " + std::to_string(stages) +
                      " staged strengths, got " +
                      std::to_string(lambda_s.size()));
  }
  if (correlation == NoiseCorrelation::RhoUniform &&
      !(rho >= 0.0 && rho <= 1.0)) {
    throw ConfigError("pairwise correlation rho must lie in [0, 1]");
  }
}

std::vector<double> NoiseSpec::resolved_lambda_s() const {
  if (!lambda_s.empty()) return lambda_s;
  return std::vector<double>(static_cast<std::size_t>(stages), lambda);
}

double NoiseSpec::lambda_max() const {
  double m = 0.0;
  for (double l : resolved_lambda_s()) m = std::max(m, std::abs(l));
  return m;
}

double var_sync_bound(const NoiseSpec& spec) {
  spec.validate();
  double l = static_cast<double>(spec.depth);
  return l * l * spec.lambda * spec.lambda * spec.sigma * spec.sigma;
}

double var_async_bound(const NoiseSpec& spec) {
  spec.validate();
  double s = static_cast<double>(spec.stages);
  double lm = spec.lambda_max();
  return s * s * lm * lm * spec.sigma * spec.sigma;
}

namespace {

struct MomentSums {
  double sum_sync = 0, sumsq_sync = 0;
  double sum_async = 0, sumsq_async = 0;
};

// Accumulates one worker's share of trials. Each trial draws the noise
// vector eps_1..eps_L for the requested correlation model; the staged sum
// uses the first S entries (the joint law is exchangeable, so the choice
// of injection indices does not matter).
MomentSums run_chunk(const NoiseSpec& spec, const std::vector<double>& ls,
                     Rng rng, Index count) {
  MomentSums out;
  const Index L = spec.depth;
  const Index S = spec.stages;
  const double sqrt_rho = std::sqrt(spec.rho);
  const double sqrt_rest = std::sqrt(1.0 - spec.rho);
  std::vector<double> eps(static_cast<std::size_t>(L));
  for (Index t = 0; t < count; ++t) {
    switch (spec.correlation) {
      case NoiseCorrelation::Iid:
        for (auto& e : eps) e = spec.sigma * rng.normal();
        break;
      case NoiseCorrelation::FullyCorrelated: {
        double shared = spec.sigma * rng.normal();
        for (auto& e : eps) e = shared;
        break;
      }
      case NoiseCorrelation::RhoUniform: {
        double shared = rng.normal();
        for (auto& e : eps) {
          e = spec.sigma * (sqrt_rho * shared + sqrt_rest * rng.normal());
        }
        break;
      }
    }
    double e_sync = 0;
    for (Index l = 0; l < L; ++l) {
      e_sync += spec.lambda * eps[static_cast<std::size_t>(l)];
    }
    double e_async = 0;
    for (Index s = 0; s < S; ++s) {
      e_async += ls[static_cast<std::size_t>(s)] *
                 eps[static_cast<std::size_t>(s)];
    }
    out.sum_sync += e_sync;
    out.sumsq_sync += e_sync * e_sync;
    out.sum_async += e_async;
    out.sumsq_async += e_async * e_async;
  }
  return out;
}

double sample_variance(double sum, double sumsq, double n) {
  double centered = sumsq - sum * sum / n;
  return std::max(0.0, centered / (n - 1.0));
}

}  // namespace

SimulationResult simulate_accumulation(const NoiseSpec& spec) {
  spec.validate();
  if (spec.trials < 10000) {
    throw ConfigError(
        "the accumulation simulator needs at least 10000 trials for its "
        "variance estimates; got " +
        std::to_string(spec.trials));
  }
  const std::vector<double> ls = spec.resolved_lambda_s();

  // A fixed worker count keeps the draw streams, and therefore the
  // result, identical on any machine.
  constexpr Index kChunks = 8;
  const Index base = spec.trials / kChunks;
  const Index extra = spec.trials % kChunks;
  Rng root(spec.seed);
  std::vector<std::future<MomentSums>> futures;
  for (Index c = 0; c < kChunks; ++c) {
    Index count = base + (c < extra ? 1 : 0);
    Rng stream = root.fork(static_cast<std::uint64_t>(c + 1));
    futures.push_back(std::async(std::launch::async, run_chunk,
                                 std::cref(spec), std::cref(ls), stream,
                                 count));
  }
  MomentSums total;
  for (auto& f : futures) {
    MomentSums part = f.get();
    total.sum_sync += part.sum_sync;
    total.sumsq_sync += part.sumsq_sync;
    total.sum_async += part.sum_async;
    total.sumsq_async += part.sumsq_async;
  }

  const double n = static_cast<double>(spec.trials);
  SimulationResult result;
  result.var_sync_mc = sample_variance(total.sum_sync, total.sumsq_sync, n);
  result.var_async_mc =
      sample_variance(total.sum_async, total.sumsq_async, n);
  result.ratio_mc = result.var_sync_mc > 0.0
                        ? result.var_async_mc / result.var_sync_mc
                        : 0.0;
  // Relative Monte-Carlo standard error of a Gaussian variance estimate.
  const double stderr_rel = std::sqrt(2.0 / (n - 1.0));
  const double slack = 1.0 + 5.0 * stderr_rel;
  result.bound_ok =
      result.var_sync_mc <= var_sync_bound(spec) * slack &&
      result.var_async_mc <= var_async_bound(spec) * slack;
  return result;
}

std::vector<GateAttenuationRow> gate_attenuation_curve(
    const NoiseSpec& spec, const std::vector<double>& gate_values) {
  spec.validate();
  const double unattenuated = var_async_bound(spec);
  std::vector<GateAttenuationRow> rows;
  rows.reserve(gate_values.size());
  for (double g : gate_values) {
    GateAttenuationRow row;
    row.gate = g;
    row.scale = 1.0 / (1.0 + std::exp(-g));
    row.bound = unattenuated * row.scale * row.scale;
    rows.push_back(row);
  }
  return rows;
}

std::string theory_report_csv(const std::vector<NoiseSpec>& specs) {
  std::ostringstream out;
  out << "L,S,correlation,var_sync,var_async,ratio,sync_bound,async_bound\n";
  for (const auto& spec : specs) {
    SimulationResult r = simulate_accumulation(spec);
    std::string corr = correlation_name(spec.correlation);
    if (spec.correlation == NoiseCorrelation::RhoUniform) {
      corr += "(" + format_real(spec.rho, 2) + ")";
    }
    out << spec.depth << ',' << spec.stages << ',' << corr << ','
        << format_real(r.var_sync_mc, 6) << ','
        << format_real(r.var_async_mc, 6) << ','
        << format_real(r.ratio_mc, 6) << ','
        << format_real(var_sync_bound(spec), 6) << ','
        << format_real(var_async_bound(spec), 6) << '\n';
  }
  return out.str();
}

}  // namespace timesaf
