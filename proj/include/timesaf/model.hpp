#pragma once

// The full forecaster: dual patch/text backbones, staged fusion trunk,
// asynchronous gated refinement, temporal head, objective, metrics, and a
// deterministic training loop with validation early stopping.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "timesaf/blocks.hpp"
#include "timesaf/params.hpp"
#include "timesaf/preprocess.hpp"
#include "timesaf/prompts.hpp"

namespace timesaf {

// Wiring ablations; Full is the reference model.
enum class Variant {
  Full,          // staged fusion + gated asynchronous refinement
  NoTrunk,       // pure dual unimodal backbones, no fusion, no refinement
  NoQuery,       // fusion queries replaced by the time-branch hidden state
  NoGate,        // refinement residual applied with scale fixed to 1
  SyncRefine,    // memory recomputed and injected at every layer
  TrunkDecoder,  // final memory feeds a small decoder; temporal head bypassed
};

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  Index depth = 2;               // dp: backbone layers
  Index stages = 1;              // S: fusion stages
  std::vector<Index> kappa;      // fusion layers; empty = auto-schedule
  std::vector<Index> refine_at;  // refinement layers; empty = default set
  Index width = 64;              // D
  Index fusion_width = 64;       // D_f
  Index query_slots = 4;         // P_f
  Index heads = 4;               // h
  Index ffn_expansion = 4;
  PatchConfig patch;
  Index horizon = 96;  // H
  Index channels = 7;  // N
  Index llm_width = 64;
  PromptVariant prompt = PromptVariant::Full;
  Variant variant = Variant::Full;
  std::uint64_t seed = 2024;

  void validate() const;
  // The fusion layers actually used: explicit kappa, or the auto-schedule
  // kappa_s = s*(depth/stages) for s < S with kappa_S = depth-1 so the last
  // memory is consumed; when depth == stages the schedule degenerates to
  // kappa_s = s. Empty for variants that never fuse.
  std::vector<Index> resolved_kappa() const;
  // Layers that refine when a memory exists: explicit refine_at, or every
  // layer after the first fusion. SyncRefine refines everywhere.
  std::vector<Index> resolved_refine() const;
  // Stable key=value rendering; its hash keys checkpoints to the config.
  std::string canonical_text() const;
  std::uint64_t hash() const;
};

// Ordered record of one forward pass's block invocations, for wiring tests
// and the ablation reports.
struct WiringTrace {
  std::vector<std::string> events;
  int fusion_count() const;
};

struct Metrics {
  double mse = 0;
  double mae = 0;
};

// Sum of squared errors averaged over the batch dimension only; the
// training objective's data term, differentiable.
Tensor forecast_loss(const Tensor& yhat, const Tensor& y);
// Reported training loss: data term plus alpha * sum(theta^2). The decay
// gradient itself is applied inside the optimizer step.
double loss_value(const Tensor& yhat, const Tensor& y,
                  const ParameterStore& params, double alpha);
// Plain means of squared and absolute error over every element.
Metrics forecast_metrics(const Tensor& yhat, const Tensor& y);

// Renders and embeds the per-window channel prompts of a dataset, cached so
// each window's text is embedded once. Rows come back in b*N+n order.
class PromptCache {
 public:
  PromptCache(const WindowedDataset& data, PromptTemplateSpec spec,
              const EmbeddingProvider& provider);

  Index width() const { return provider_.dim(); }
  Tensor rows(Split split, std::span<const Index> ids) const;
  // The rendered texts for one window, channel by channel.
  std::vector<std::string> texts(Split split, Index id) const;

 private:
  const WindowedDataset& data_;
  PromptTemplateSpec spec_;
  const EmbeddingProvider& provider_;
  mutable std::array<std::vector<std::vector<real>>, 3> cache_;
};

class TimeSafModel {
 public:
  explicit TimeSafModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  // One forward pass: x (B, L, N) on the model scale, text_rows
  // (B*N, llm_width) in b*N+n order. Returns (B, H, N) mapped back through
  // the captured per-window statistics. When `features` is given it
  // receives the flattened pre-head representation, one row per
  // (sample, channel), for external embedding/visualization tools.
  Tensor forward(const Tensor& x, const Tensor& text_rows,
                 WiringTrace* wiring = nullptr,
                 const AttentionTraceSink* attn_sink = nullptr,
                 Tensor* features = nullptr);

  void save(const std::string& path) const;
  // Loads values saved by a model with an identical configuration.
  void load(const std::string& path);

 private:
  struct Layer {
    bool refine_capable = false;
    RefineParams refine;      // set when refine_capable
    UnimodalParams unimodal;  // set otherwise
    GatedAdapter adapter;     // per modality, refine_capable only
  };

  Tensor run_backbones(const Tensor& h_time0, const Tensor& h_text0,
                       WiringTrace* wiring, const AttentionTraceSink* sink);
  Tensor fuse(Index ordinal, Index after_layer, const Tensor& h_time,
              const Tensor& h_text, WiringTrace* wiring,
              const AttentionTraceSink* sink);
  Tensor head(const Tensor& h_time_final, const Tensor& memory_final,
              Index batch, const AttentionTraceSink* sink,
              WiringTrace* wiring, Tensor* features);

  ModelConfig cfg_;
  ParameterStore store_;
  BlockConfig block_cfg_;
  std::vector<Index> kappa_, refine_;

  RevinAffine revin_;
  Tensor patch_w_, patch_b_, patch_pos_;
  Tensor text_w_, text_b_, text_pos_;
  std::vector<Layer> time_layers_, text_layers_;
  std::vector<Tensor> queries_;       // per stage; empty for NoQuery
  std::vector<FusionParams> trunk_;   // per stage (single entry for sync)
  Tensor head_w_, head_b_;            // temporal head
  UnimodalParams decoder_block_;      // TrunkDecoder only
  Tensor decoder_w_, decoder_b_;
};

struct HyperConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;  // alpha in the objective
  Index batch_size = 32;
  int max_epochs = 50;
  int patience = 5;     // non-improving epochs tolerated; 0 disables
  Index max_steps = 0;  // 0 = no step cap

  void validate() const;
};

struct EpochStats {
  double train_loss = 0;  // mean reported loss over the epoch's steps
  double val_mse = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;      // index into history
  double best_val_mse = 0;  // of the restored weights
  Index steps = 0;
  int untouched_params = 0;  // parameters with no gradient in the last step
};

// Deterministic epoch loop: seed-locked batch order, per-epoch validation
// MSE, early stopping on `patience` non-improving epochs, and restoration
// of the best-validation weights before returning.
TrainResult train_model(TimeSafModel& model, const WindowedDataset& data,
                        const PromptCache& prompts, const HyperConfig& hyper);

// Mean metrics over a whole split, computed without growing the tape, in a
// fixed order regardless of batch size.
Metrics evaluate_split(TimeSafModel& model, const WindowedDataset& data,
                       const PromptCache& prompts, Split split,
                       Index batch_size);

// Denormalized forecasts for a span of windows; no tape.
Tensor predict_windows(TimeSafModel& model, const WindowedDataset& data,
                       const PromptCache& prompts, Split split,
                       std::span<const Index> ids);

}  // namespace timesaf
