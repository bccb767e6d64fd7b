#pragma once

// Experiment orchestration: the dataset registry with its bundled
// synthetic series, the long-term / few-shot / zero-shot / ablation /
// stage-sweep protocols, deterministic CSV and text reports, and the
// key=value experiment-config format shared by files and CLI flags.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "timesaf/model.hpp"
#include "timesaf/theory.hpp"

namespace timesaf {

// ------------------------------------------------------------- registry --

struct DatasetEntry {
  std::string id;
  std::string description;
  SplitRatios ratios;  // the split rule travels with the dataset
  std::string csv_path;                   // file-backed entries
  std::function<SeriesData()> generator;  // bundled entries
};

// Maps dataset ids to loaders. Bundled entries are deterministic synthetic
// generators; real CSV files join through add_csv without code changes.
class DatasetRegistry {
 public:
  // sim_hourly, sim_quarter: two 7-channel benchmark-style series (mixed
  // sinusoids + trend + seeded noise) on a 6:2:2 split, hourly and
  // 15-minute sampling. sine_tiny: one clean sine channel on 7:1:2, small
  // enough for smoke tests.
  static DatasetRegistry with_builtins();

  void add_csv(const std::string& id, const std::string& path,
               SplitRatios ratios, const std::string& description = "");
  bool contains(const std::string& id) const;
  const DatasetEntry& entry(const std::string& id) const;
  SeriesData load(const std::string& id) const;
  std::vector<std::string> ids() const;

 private:
  std::map<std::string, DatasetEntry> entries_;
};

// ----------------------------------------------------------- experiment --

enum class Task { LongTerm, FewShot, ZeroShot, Ablation, StageSweep, Theory };
const char* task_name(Task t);
Task parse_task(const std::string& name);

struct ExperimentSpec {
  Task task = Task::LongTerm;
  std::string dataset = "sim_hourly";
  std::string source, target;  // zero-shot transfer pair
  std::vector<Index> horizons = {96, 192, 336, 720};
  ModelConfig model;  // horizon/channels are overwritten per run
  HyperConfig hyper;
  std::vector<double> lr_grid;  // non-empty: pick the best validation MSE
  double few_shot_fraction = 0.10;
  bool include_trunk_decoder = false;  // extra ablation variant on request
  std::vector<Index> stage_grid = {1, 2, 4};
  std::string output_dir;        // when set, reports/checkpoints land here
  std::string embeddings_path;   // optional embedding container file
  std::uint64_t embedding_seed = 5;  // stub-embedder stream otherwise
  std::string checkpoint;  // optional pre-trained weights for zero-shot

  NoiseSpec noise;  // the theory task's simulator settings

  void validate() const;
};

// Builds the provider the spec selects: the embedding container when a
// path is given (its width must match the model), else the hash-seeded
// stub at the model's text width.
std::unique_ptr<EmbeddingProvider> make_provider(const ExperimentSpec& spec);

// --------------------------------------------------------------- report --

struct ReportRow {
  std::string dataset;
  std::string variant;  // model variant or sweep-cell label
  Index horizon = 0;
  bool skipped = false;
  double mse = 0;
  double mae = 0;
  std::uint64_t config_hash = 0;
  std::string note;  // kappa lists, skip reasons; never contains commas
};

struct RunReport {
  std::string task;
  std::uint64_t seed = 0;
  std::vector<ReportRow> rows;
  // One row per variant label: the arithmetic mean of its horizon rows.
  std::vector<ReportRow> averages;
  double wall_seconds = 0;  // informational; excluded from csv()/table()
                            // so reruns are byte-identical

  // task,dataset,variant,horizon,mse,mae,config_hash,seed,note with
  // horizon "avg" on average rows and empty metric cells on skipped rows.
  std::string csv() const;
  std::string table() const;  // aligned plain text, same content
};

// ------------------------------------------------------------ protocols --

// Trains one model per horizon on the spec's dataset and evaluates the
// test split; no windows are dropped from evaluation.
RunReport run_long_term(const ExperimentSpec& spec,
                        const DatasetRegistry& registry);
// Long-term protocol with the train region restricted to the leading
// few_shot_fraction of the train split.
RunReport run_few_shot(const ExperimentSpec& spec,
                       const DatasetRegistry& registry);
// Trains on the source dataset (or loads spec.checkpoint), then evaluates
// the target test split without any fine-tuning. Window statistics come
// from the target; prompts use the target's frequency label. Channel
// counts must match.
RunReport run_zero_shot(const ExperimentSpec& spec,
                        const DatasetRegistry& registry);
// Runs the wiring variants under one seed and hyper setting: full,
// no_trunk, no_query, no_gate, sync_refine, plus trunk_decoder when
// requested. Each row notes its fusion-invocation count.
RunReport run_ablation(const ExperimentSpec& spec,
                       const DatasetRegistry& registry);
// Grid over stage counts and fusion-layer placements (shallow / middle /
// deep presets); incompatible cells appear as skipped rows with reasons.
RunReport run_stage_sweep(const ExperimentSpec& spec,
                          const DatasetRegistry& registry);

// The fusion layers a placement preset selects for (depth, stages):
// shallow = {1..S}, deep = the latest block ending at depth-1 so the last
// memory is always consumed, middle = round(s*depth/(S+1)) spread. When
// S == depth every preset degenerates to {1..depth}.
std::vector<Index> placement_kappa(Index depth, Index stages,
                                   const std::string& placement);

// --------------------------------------------------------------- config --

// Experiment files are "key = value" lines; '#' starts a comment. Keys
// mirror the spec fields ("dataset", "horizons", "model.width",
// "hyper.lr", "theory.trials", ...); unknown keys are configuration
// errors naming the key. CLI flags apply the same keys on top.
void apply_spec_key(ExperimentSpec& spec, const std::string& key,
                    const std::string& value);
ExperimentSpec parse_spec_file(const std::string& path);
ExperimentSpec parse_spec_text(const std::string& text,
                               const std::string& origin = "<config>");

}  // namespace timesaf
