#pragma once

// Stylized variance analysis of semantic-noise accumulation. A semantic
// signal injected into a deep stack contributes s_l = mu + eps_l at each
// injection point, with Var(eps_l) <= sigma^2. Injecting at every one of
// the L layers (synchronous) accumulates E_syn = sum_l lambda * eps_l,
// while injecting only at S staged points (asynchronous) accumulates
// E_asy = sum_s lambda_s * eps_s. This module provides the closed-form
// worst-case bounds on both variances, a Monte-Carlo simulator that
// checks them under several correlation models, and the gate-attenuation
// view where a sigmoid gate scales the staged strengths down.

#include <cstdint>
#include <string>
#include <vector>

#include "timesaf/common.hpp"

namespace timesaf {

// How the injection noises eps_1..eps_L relate to each other.
enum class NoiseCorrelation {
  Iid,              // independent draws
  FullyCorrelated,  // a single shared draw, the bound-attaining worst case
  RhoUniform,       // pairwise correlation rho, interpolating the extremes
};

const char* correlation_name(NoiseCorrelation c);
NoiseCorrelation parse_correlation(const std::string& name);

struct NoiseSpec {
  double sigma = 1.0;  // per-injection noise standard deviation bound
  NoiseCorrelation correlation = NoiseCorrelation::Iid;
  double rho = 0.0;              // only used by RhoUniform
  double lambda = 1.0;           // synchronous injection strength
  std::vector<double> lambda_s;  // staged strengths; empty = S copies of
                                 // lambda
  Index depth = 6;               // L
  Index stages = 2;              // S
  Index trials = 100000;         // Monte-Carlo sample count
  std::uint64_t seed = 2024;

  void validate() const;
  // The staged strengths actually used: lambda_s when given (size must be
  // S), otherwise S copies of lambda.
  std::vector<double> resolved_lambda_s() const;
  double lambda_max() const;  // max |lambda_s| over the resolved list
};

// Worst-case variance of the synchronous accumulation: L^2 lambda^2 sigma^2.
double var_sync_bound(const NoiseSpec& spec);
// Worst-case variance of the staged accumulation: S^2 lambda_max^2 sigma^2.
double var_async_bound(const NoiseSpec& spec);

struct SimulationResult {
  double var_sync_mc = 0;   // sample variance of E_syn
  double var_async_mc = 0;  // sample variance of E_asy
  double ratio_mc = 0;      // var_async_mc / var_sync_mc, 0 when undefined
  bool bound_ok = false;    // both sample variances within their bounds,
                            // up to 5 Monte-Carlo standard errors
};

// Draws `trials` realizations of the noise vector under the requested
// correlation model, forms both accumulations and returns their sample
// variances. Trials run in fixed-size worker chunks with independently
// seeded streams and an order-fixed reduction, so the result does not
// depend on the machine's core count. Requires trials >= 10000.
SimulationResult simulate_accumulation(const NoiseSpec& spec);

// One row of the gate view: the staged strengths scale by sigmoid(gate), so
// the staged bound scales by sigmoid(gate)^2.
struct GateAttenuationRow {
  double gate = 0;
  double scale = 0;  // sigmoid(gate)
  double bound = 0;  // var_async_bound with lambda_s * scale
};

std::vector<GateAttenuationRow> gate_attenuation_curve(
    const NoiseSpec& spec, const std::vector<double>& gate_values);

// CSV with the column header
// L,S,correlation,var_sync,var_async,ratio,sync_bound,async_bound
// and one simulated row per spec.
std::string theory_report_csv(const std::vector<NoiseSpec>& specs);

}  // namespace timesaf
