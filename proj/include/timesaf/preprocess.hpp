#pragma once

// Input plumbing: reversible instance normalization, patch extraction and
// embedding, CSV ingestion, and the windowed train/val/test view over a
// series that every protocol runs on.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "timesaf/tensor.hpp"

namespace timesaf {

// ------------------------------------------------------- instance norm --

// Learnable per-channel affine applied after per-window standardization.
struct RevinAffine {
  Tensor gain;  // (N)
  Tensor bias;  // (N)
  real eps = 1e-5;
};

// Captured statistics of one forward pass: per (sample, channel) mean and
// population standard deviation over the lookback axis, clamped below by
// eps. Shape (B, 1, N) so they broadcast against (B, L, N) and (B, H, N).
struct RevinState {
  Tensor mean;
  Tensor stddev;
  bool captured = false;
};

// x: (B, L, N) -> standardized (B, L, N); fills `state`.
Tensor revin_normalize(const Tensor& x, const RevinAffine& affine,
                       RevinState& state);
// y: (B, H, N) -> y mapped back through the inverse affine and the captured
// statistics. Requires a captured state; the gain must stay away from zero
// (a zero gain surfaces as a non-finite diagnostic from the division).
Tensor revin_denormalize(const Tensor& y, const RevinAffine& affine,
                         const RevinState& state);

// ------------------------------------------------------------- patching --

struct PatchConfig {
  Index lookback = 96;
  Index patch_len = 16;
  Index stride = 8;

  Index patch_count() const { return (lookback - patch_len) / stride + 1; }
  void validate() const;
};

// (B, L, N) -> (B*N, N_p, P). Channels become independent batch rows in
// order b*N + n; trailing samples that no patch reaches are dropped by the
// floor in patch_count().
Tensor make_patches(const Tensor& x, const PatchConfig& cfg);

// patches (B*N, N_p, P) -> tokens (B*N, N_p, D): linear projection plus a
// learnable positional table pos (N_p, D).
Tensor embed_patches(const Tensor& patches, const Tensor& proj_w,
                     const Tensor& proj_b, const Tensor& pos);

// ------------------------------------------------------------- raw series --

struct SeriesData {
  std::vector<std::string> timestamps;     // length T
  std::vector<std::string> channel_names;  // length N
  std::vector<double> values;              // row-major (T, N), raw scale
  Index steps = 0;
  Index channels = 0;
  std::string freq_label;  // e.g. "1 hour"; used by the prompt renderer

  double value(Index t, Index n) const {
    return values[static_cast<std::size_t>(t * channels + n)];
  }
};

// First column is the timestamp (ISO-8601 text or an integer), remaining
// columns are numeric channels. A header row is required. Parse failures
// name the file, row and column.
SeriesData load_csv(const std::string& path, char delimiter = ',');

// ---------------------------------------------------------- windowing --

enum class Split { Train, Val, Test };
const char* split_name(Split s);

struct SplitRatios {
  int train = 7;
  int val = 1;
  int test = 2;
};

struct WindowBatch {
  Tensor x;                    // (B, L, N), model scale
  Tensor y;                    // (B, H, N), model scale
  std::vector<Index> starts;   // absolute series index per window
};

// Sliding-window view over a series. Split regions follow the usual
// long-term-forecasting convention: the train region is the first
// floor(f_train*T) steps, the test region the last floor(f_test*T), and
// validation sits between. Val/test histories may reach back into the
// preceding region, targets never leave their own region. Optional
// few-shot restriction keeps only the leading fraction of the train
// region; z-scoring statistics come from that same visible region.
class WindowedDataset {
 public:
  static WindowedDataset build(SeriesData series, Index lookback,
                               Index horizon, SplitRatios ratios,
                               double few_shot_fraction = 1.0,
                               bool z_score = true);

  Index lookback() const { return lookback_; }
  Index horizon() const { return horizon_; }
  Index window_count(Split s) const;
  // First window start of a split, in absolute series steps.
  Index window_start(Split s, Index id) const;

  WindowBatch make_batch(Split s, std::span<const Index> ids) const;

  // Raw (pre-scaling) history values of one channel, for prompt rendering.
  std::vector<double> raw_history(Split s, Index id, Index channel) const;
  std::pair<std::string, std::string> history_timestamps(Split s,
                                                         Index id) const;

  const SeriesData& series() const { return series_; }
  Index n_train() const { return n_train_; }
  Index n_val() const { return n_val_; }
  Index n_test() const { return n_test_; }
  Index effective_train() const { return effective_train_; }
  bool z_scored() const { return z_score_; }
  const std::vector<double>& scale_mean() const { return scale_mean_; }
  const std::vector<double>& scale_std() const { return scale_std_; }

 private:
  SeriesData series_;
  std::vector<double> scaled_;  // same layout as series_.values
  Index lookback_ = 0, horizon_ = 0;
  Index n_train_ = 0, n_val_ = 0, n_test_ = 0;
  Index effective_train_ = 0;
  bool z_score_ = true;
  std::vector<double> scale_mean_, scale_std_;
  Index base_[3] = {0, 0, 0};
  Index count_[3] = {0, 0, 0};
};

}  // namespace timesaf
