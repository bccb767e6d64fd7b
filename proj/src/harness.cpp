#include "timesaf/harness.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "timesaf/rng.hpp"

namespace timesaf {

namespace {

// "YYYY-MM-DD HH:MM" for a fixed origin plus a minute offset, so the
// bundled series carry calendar-shaped timestamps into the prompts.
std::string minute_timestamp(std::int64_t minutes) {
  using namespace std::chrono;
  sys_days origin = sys_days(year{2016} / July / 1);
  sys_time<std::chrono::minutes> tp = origin + std::chrono::minutes(minutes);
  sys_days day = floor<days>(tp);
  year_month_day ymd{day};
  auto of_day = duration_cast<std::chrono::minutes>(tp - day).count();
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u %02lld:%02lld",
                static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()),
                static_cast<long long>(of_day / 60),
                static_cast<long long>(of_day % 60));
  return buf;
}

// Mixed sinusoids (a daily and a weekly component), a mild linear trend
// and seeded noise; one parameter draw per channel. Deterministic in the
// seed, so reruns see identical bytes.
SeriesData synthetic_series(Index steps, Index step_minutes,
                            const std::string& freq_label, Index channels,
                            std::uint64_t seed) {
  SeriesData s;
  s.steps = steps;
  s.channels = channels;
  s.freq_label = freq_label;
  s.timestamps.reserve(static_cast<std::size_t>(steps));
  for (Index t = 0; t < steps; ++t) {
    s.timestamps.push_back(minute_timestamp(t * step_minutes));
  }
  const double daily = 1440.0 / static_cast<double>(step_minutes);
  const double weekly = 7.0 * daily;
  Rng param_rng(seed);
  struct ChannelParams {
    double amp1, phase1, amp2, phase2, trend, noise;
  };
  std::vector<ChannelParams> params;
  for (Index n = 0; n < channels; ++n) {
    ChannelParams p;
    p.amp1 = 0.6 + 0.8 * param_rng.uniform();
    p.phase1 = 6.283185307179586 * param_rng.uniform();
    p.amp2 = 0.2 + 0.3 * param_rng.uniform();
    p.phase2 = 6.283185307179586 * param_rng.uniform();
    p.trend = 2.0 * (param_rng.uniform() - 0.5);
    p.noise = 0.05 + 0.1 * param_rng.uniform();
    params.push_back(p);
    s.channel_names.push_back("ch" + std::to_string(n));
  }
  Rng noise_rng(seed + 1);
  s.values.resize(static_cast<std::size_t>(steps * channels));
  for (Index t = 0; t < steps; ++t) {
    for (Index n = 0; n < channels; ++n) {
      const auto& p = params[static_cast<std::size_t>(n)];
      double tt = static_cast<double>(t);
      double v = p.amp1 * std::sin(6.283185307179586 * tt / daily +
                                   p.phase1) +
                 p.amp2 * std::sin(6.283185307179586 * tt / weekly +
                                   p.phase2) +
                 p.trend * tt / static_cast<double>(steps) +
                 p.noise * noise_rng.normal();
      s.values[static_cast<std::size_t>(t * channels + n)] = v;
    }
  }
  return s;
}

SeriesData sine_tiny_series() {
  SeriesData s;
  s.steps = 260;
  s.channels = 1;
  s.freq_label = "10 minutes";
  s.channel_names = {"ch0"};
  s.timestamps.reserve(260);
  s.values.reserve(260);
  for (Index t = 0; t < 260; ++t) {
    s.timestamps.push_back(minute_timestamp(t * 10));
    s.values.push_back(
        std::sin(6.283185307179586 * static_cast<double>(t) / 24.0));
  }
  return s;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

std::string join_with(const std::vector<Index>& xs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out.push_back(sep);
    out += std::to_string(xs[i]);
  }
  return out;
}

}  // namespace

// --------------------------------------------------------------- registry

DatasetRegistry DatasetRegistry::with_builtins() {
  DatasetRegistry reg;
  DatasetEntry hourly;
  hourly.id = "sim_hourly";
  hourly.description = "synthetic 7-channel hourly series (6:2:2 split)";
  hourly.ratios = SplitRatios{6, 2, 2};
  hourly.generator = [] {
    return synthetic_series(4400, 60, "1 hour", 7, 7001);
  };
  reg.entries_[hourly.id] = hourly;

  DatasetEntry quarter;
  quarter.id = "sim_quarter";
  quarter.description =
      "synthetic 7-channel 15-minute series (6:2:2 split)";
  quarter.ratios = SplitRatios{6, 2, 2};
  quarter.generator = [] {
    return synthetic_series(8800, 15, "15 minutes", 7, 7002);
  };
  reg.entries_[quarter.id] = quarter;

  DatasetEntry tiny;
  tiny.id = "sine_tiny";
  tiny.description = "one clean sine channel for smoke tests (7:1:2 split)";
  tiny.ratios = SplitRatios{7, 1, 2};
  tiny.generator = sine_tiny_series;
  reg.entries_[tiny.id] = tiny;
  return reg;
}

void DatasetRegistry::add_csv(const std::string& id, const std::string& path,
                              SplitRatios ratios,
                              const std::string& description) {
  if (id.empty()) throw ConfigError("dataset id must not be empty");
  DatasetEntry e;
  e.id = id;
  e.csv_path = path;
  e.ratios = ratios;
  e.description = description;
  entries_[id] = e;
}

bool DatasetRegistry::contains(const std::string& id) const {
  return entries_.count(id) > 0;
}

const DatasetEntry& DatasetRegistry::entry(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) {
    std::string known;
    for (const auto& [k, v] : entries_) {
      if (!known.empty()) known += ", ";
      known += k;
    }
    throw ConfigError("unknown dataset '" + id + "'; registered: " + known);
  }
  return it->second;
}

SeriesData DatasetRegistry::load(const std::string& id) const {
  const DatasetEntry& e = entry(id);
  if (e.generator) return e.generator();
  return load_csv(e.csv_path);
}

std::vector<std::string> DatasetRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

// ------------------------------------------------------------- experiment

const char* task_name(Task t) {
  switch (t) {
    case Task::LongTerm: return "long_term";
    case Task::FewShot: return "few_shot";
    case Task::ZeroShot: return "zero_shot";
    case Task::Ablation: return "ablation";
    case Task::StageSweep: return "stage_sweep";
    case Task::Theory: return "theory";
  }
  throw ConfigError("unknown task");
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::LongTerm, Task::FewShot, Task::ZeroShot,
                 Task::Ablation, Task::StageSweep, Task::Theory}) {
    if (name == task_name(t)) return t;
  }
  throw ConfigError("unknown task '" + name +
                    "'; expected long_term, few_shot, zero_shot, ablation, "
                    "stage_sweep or theory");
}

void ExperimentSpec::validate() const {
  hyper.validate();
  if (horizons.empty()) throw ConfigError("at least one horizon is needed");
  for (Index h : horizons) {
    if (h < 1) throw ConfigError("horizons must be positive");
  }
  if (!(few_shot_fraction > 0.0 && few_shot_fraction <= 1.0)) {
    throw ConfigError("few-shot fraction must lie in (0, 1]");
  }
  for (double lr : lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("grid learning rates must be > 0");
  }
  if (task == Task::ZeroShot && (source.empty() || target.empty())) {
    throw ConfigError("zero-shot needs both a source and a target dataset");
  }
}

std::unique_ptr<EmbeddingProvider> make_provider(const ExperimentSpec& spec) {
  if (!spec.embeddings_path.empty()) {
    auto file = std::make_unique<FileEmbedder>(spec.embeddings_path);
    if (file->dim() != spec.model.llm_width) {
      throw ConfigError("embedding container width " +
                        std::to_string(file->dim()) +
                        " does not match the configured text width " +
                        std::to_string(spec.model.llm_width));
    }
    return file;
  }
  return std::make_unique<StubEmbedder>(spec.model.llm_width,
                                        spec.embedding_seed);
}

// ----------------------------------------------------------------- report

namespace {

std::string metric_cell(const ReportRow& row, double v) {
  return row.skipped ? std::string() : format_real(v, 15);
}

std::string hash_cell(const ReportRow& row) {
  return (row.skipped || row.config_hash == 0) ? std::string()
                                               : hex64(row.config_hash);
}

std::vector<std::array<std::string, 7>> report_cells(const RunReport& rep) {
  std::vector<std::array<std::string, 7>> cells;
  auto push = [&](const ReportRow& r, bool is_avg) {
    cells.push_back({r.dataset, r.variant,
                     is_avg ? std::string("avg") : std::to_string(r.horizon),
                     metric_cell(r, r.mse), metric_cell(r, r.mae),
                     hash_cell(r), r.note});
  };
  for (const auto& r : rep.rows) push(r, false);
  for (const auto& r : rep.averages) push(r, true);
  return cells;
}

}  // namespace

std::string RunReport::csv() const {
  std::ostringstream out;
  out << "task,dataset,variant,horizon,mse,mae,config_hash,seed,note\n";
  for (const auto& c : report_cells(*this)) {
    out << task << ',' << c[0] << ',' << c[1] << ',' << c[2] << ',' << c[3]
        << ',' << c[4] << ',' << c[5] << ',' << seed << ',' << c[6] << '\n';
  }
  return out.str();
}

std::string RunReport::table() const {
  const std::array<std::string, 7> header = {
      "dataset", "variant", "horizon", "mse", "mae", "config_hash", "note"};
  auto cells = report_cells(*this);
  std::array<std::size_t, 7> width{};
  for (std::size_t i = 0; i < 7; ++i) width[i] = header[i].size();
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < 7; ++i) {
      width[i] = std::max(width[i], row[i].size());
    }
  }
  std::ostringstream out;
  out << "task: " << task << "  seed: " << seed << '\n';
  auto emit = [&](const std::array<std::string, 7>& row) {
    for (std::size_t i = 0; i < 7; ++i) {
      out << row[i] << std::string(width[i] - row[i].size(), ' ');
      out << (i + 1 < 7 ? "  " : "");
    }
    out << '\n';
  };
  emit(header);
  for (const auto& row : cells) emit(row);
  return out.str();
}

// -------------------------------------------------------------- protocols

namespace {

// Mean over the non-skipped rows of each variant label, in order of first
// appearance. Labels whose rows are all skipped yield a skipped average.
std::vector<ReportRow> average_rows(const std::vector<ReportRow>& rows) {
  std::vector<ReportRow> avgs;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (std::find(order.begin(), order.end(), r.variant) == order.end()) {
      order.push_back(r.variant);
    }
  }
  for (const auto& label : order) {
    ReportRow avg;
    avg.variant = label;
    int n = 0;
    for (const auto& r : rows) {
      if (r.variant != label || r.skipped) continue;
      if (n == 0) avg.dataset = r.dataset;
      avg.mse += r.mse;
      avg.mae += r.mae;
      ++n;
    }
    if (n == 0) {
      avg.skipped = true;
      avg.note = "all cells skipped";
      for (const auto& r : rows) {
        if (r.variant == label) {
          avg.dataset = r.dataset;
          break;
        }
      }
    } else {
      avg.mse /= n;
      avg.mae /= n;
      avg.note = "mean of " + std::to_string(n) + " horizons";
    }
    avgs.push_back(avg);
  }
  return avgs;
}

void write_outputs(const ExperimentSpec& spec, const RunReport& rep) {
  if (spec.output_dir.empty()) return;
  std::filesystem::create_directories(spec.output_dir);
  std::string base = spec.output_dir + "/" + rep.task + "_report";
  std::ofstream csv(base + ".csv", std::ios::binary);
  csv << rep.csv();
  std::ofstream txt(base + ".txt", std::ios::binary);
  txt << rep.table();
  if (!csv || !txt) {
    throw IoError("could not write report files under " + spec.output_dir);
  }
}

// Trains one configuration on one windowed dataset and evaluates the test
// split. With a learning-rate grid, each rate trains a fresh model and the
// best validation MSE wins (first on ties, deterministically).
struct CellOutcome {
  std::unique_ptr<TimeSafModel> model;
  Metrics test;
  int fusion_invocations = 0;
};

CellOutcome train_cell(const ExperimentSpec& spec, const ModelConfig& cfg,
                       const WindowedDataset& data,
                       const PromptCache& cache) {
  std::vector<double> rates =
      spec.lr_grid.empty() ? std::vector<double>{spec.hyper.lr}
                           : spec.lr_grid;
  CellOutcome out;
  double best_val = 0;
  for (double lr : rates) {
    HyperConfig hyper = spec.hyper;
    hyper.lr = lr;
    auto model = std::make_unique<TimeSafModel>(cfg);
    TrainResult tr = train_model(*model, data, cache, hyper);
    if (!out.model || tr.best_val_mse < best_val) {
      best_val = tr.best_val_mse;
      out.model = std::move(model);
    }
  }
  out.test = evaluate_split(*out.model, data, cache,
                            Split::Test, spec.hyper.batch_size);
  {
    NoGradGuard guard;
    std::vector<Index> one = {0};
    WindowBatch wb = data.make_batch(Split::Train, one);
    WiringTrace trace;
    out.model->forward(wb.x, cache.rows(Split::Train, one), &trace);
    out.fusion_invocations = trace.fusion_count();
  }
  return out;
}

// One (dataset, config, horizon) protocol cell: build windows, train,
// evaluate, optionally save the checkpoint, and fill the report row.
ReportRow run_one(const ExperimentSpec& spec, const DatasetRegistry& reg,
                  const std::string& id, ModelConfig cfg, Index horizon,
                  double fraction, ReportRow row,
                  const std::string& save_name) {
  const DatasetEntry& ent = reg.entry(id);
  SeriesData series = reg.load(id);
  cfg.horizon = horizon;
  cfg.channels = series.channels;
  cfg.validate();
  auto data = WindowedDataset::build(std::move(series), cfg.patch.lookback,
                                     horizon, ent.ratios, fraction);
  auto provider = make_provider(spec);
  PromptTemplateSpec pts;
  pts.variant = cfg.prompt;
  pts.frequency = data.series().freq_label;
  PromptCache cache(data, pts, *provider);
  CellOutcome cell = train_cell(spec, cfg, data, cache);

  row.horizon = horizon;
  row.mse = cell.test.mse;
  row.mae = cell.test.mae;
  row.config_hash = cfg.hash();
  if (!row.note.empty()) row.note += ' ';
  row.note += "fusion_invocations=" +
              std::to_string(cell.fusion_invocations);
  if (!spec.output_dir.empty() && !save_name.empty()) {
    std::filesystem::create_directories(spec.output_dir);
    cell.model->save(spec.output_dir + "/" + save_name);
  }
  return row;
}

RunReport run_protocol(const ExperimentSpec& spec,
                       const DatasetRegistry& reg, Task task,
                       double fraction) {
  spec.validate();
  auto start = std::chrono::steady_clock::now();
  RunReport rep;
  rep.task = task_name(task);
  rep.seed = spec.model.seed;
  for (Index h : spec.horizons) {
    ReportRow row;
    row.dataset = spec.dataset;
    row.variant = variant_name(spec.model.variant);
    std::string save = std::string(task_name(task)) + "_" + spec.dataset +
                       "_" + row.variant + "_h" + std::to_string(h) +
                       ".ckpt";
    rep.rows.push_back(run_one(spec, reg, spec.dataset, spec.model, h,
                               fraction, row, save));
  }
  rep.averages = average_rows(rep.rows);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  write_outputs(spec, rep);
  return rep;
}

}  // namespace

RunReport run_long_term(const ExperimentSpec& spec,
                        const DatasetRegistry& registry) {
  return run_protocol(spec, registry, Task::LongTerm, 1.0);
}

RunReport run_few_shot(const ExperimentSpec& spec,
                       const DatasetRegistry& registry) {
  return run_protocol(spec, registry, Task::FewShot,
                      spec.few_shot_fraction);
}

RunReport run_zero_shot(const ExperimentSpec& spec,
                        const DatasetRegistry& registry) {
  ExperimentSpec checked = spec;
  checked.task = Task::ZeroShot;
  checked.validate();
  auto start = std::chrono::steady_clock::now();

  SeriesData source = registry.load(spec.source);
  SeriesData target = registry.load(spec.target);
  if (source.channels != target.channels) {
    throw UsageError(
        "zero-shot transfer needs matching channel counts; '" + spec.source +
        "' has " + std::to_string(source.channels) + " channels, '" +
        spec.target + "' has " + std::to_string(target.channels));
  }

  RunReport rep;
  rep.task = task_name(Task::ZeroShot);
  rep.seed = spec.model.seed;
  for (Index h : spec.horizons) {
    ModelConfig cfg = spec.model;
    cfg.horizon = h;
    cfg.channels = source.channels;
    cfg.validate();

    auto provider = make_provider(spec);
    auto model = std::make_unique<TimeSafModel>(cfg);
    if (!spec.checkpoint.empty()) {
      model->load(spec.checkpoint);
    } else {
      auto src_data = WindowedDataset::build(
          source, cfg.patch.lookback, h, registry.entry(spec.source).ratios);
      PromptTemplateSpec src_pts;
      src_pts.variant = cfg.prompt;
      src_pts.frequency = src_data.series().freq_label;
      PromptCache src_cache(src_data, src_pts, *provider);
      train_model(*model, src_data, src_cache, spec.hyper);
    }

    // Target-side window statistics and prompt frequency label.
    auto tgt_data = WindowedDataset::build(
        target, cfg.patch.lookback, h, registry.entry(spec.target).ratios);
    PromptTemplateSpec tgt_pts;
    tgt_pts.variant = cfg.prompt;
    tgt_pts.frequency = tgt_data.series().freq_label;
    PromptCache tgt_cache(tgt_data, tgt_pts, *provider);
    Metrics m = evaluate_split(*model, tgt_data, tgt_cache, Split::Test,
                               spec.hyper.batch_size);

    ReportRow row;
    row.dataset = spec.source + "->" + spec.target;
    row.variant = variant_name(cfg.variant);
    row.horizon = h;
    row.mse = m.mse;
    row.mae = m.mae;
    row.config_hash = cfg.hash();
    row.note = "prompt_freq=target";
    rep.rows.push_back(row);

    if (!spec.output_dir.empty()) {
      std::filesystem::create_directories(spec.output_dir);
      model->save(spec.output_dir + "/zero_shot_" + spec.source + "_h" +
                  std::to_string(h) + ".ckpt");
    }
  }
  rep.averages = average_rows(rep.rows);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  write_outputs(spec, rep);
  return rep;
}

RunReport run_ablation(const ExperimentSpec& spec,
                       const DatasetRegistry& registry) {
  spec.validate();
  auto start = std::chrono::steady_clock::now();
  RunReport rep;
  rep.task = task_name(Task::Ablation);
  rep.seed = spec.model.seed;
  std::vector<Variant> variants = {Variant::Full, Variant::NoTrunk,
                                   Variant::NoQuery, Variant::NoGate,
                                   Variant::SyncRefine};
  if (spec.include_trunk_decoder) variants.push_back(Variant::TrunkDecoder);
  for (Index h : spec.horizons) {
    for (Variant v : variants) {
      ModelConfig cfg = spec.model;
      cfg.variant = v;
      ReportRow row;
      row.dataset = spec.dataset;
      row.variant = variant_name(v);
      std::string save = "ablation_" + spec.dataset + "_" + row.variant +
                         "_h" + std::to_string(h) + ".ckpt";
      rep.rows.push_back(
          run_one(spec, registry, spec.dataset, cfg, h, 1.0, row, save));
    }
  }
  rep.averages = average_rows(rep.rows);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  write_outputs(spec, rep);
  return rep;
}

std::vector<Index> placement_kappa(Index depth, Index stages,
                                   const std::string& placement) {
  if (stages < 1 || stages > depth) {
    throw ConfigError("no fusion placement exists for " +
                      std::to_string(stages) + " stages at depth " +
                      std::to_string(depth));
  }
  std::vector<Index> kappa;
  if (stages == depth) {
    for (Index s = 1; s <= depth; ++s) kappa.push_back(s);
    return kappa;
  }
  if (placement == "shallow") {
    for (Index s = 1; s <= stages; ++s) kappa.push_back(s);
  } else if (placement == "deep") {
    // Latest contiguous block that still leaves one layer to consume the
    // final memory.
    for (Index s = 0; s < stages; ++s) {
      kappa.push_back(depth - stages + s);
    }
  } else if (placement == "middle") {
    // Evenly spread across the stack, nudged to stay strictly increasing.
    Index prev = 0;
    for (Index s = 1; s <= stages; ++s) {
      double ideal = static_cast<double>(s) * static_cast<double>(depth) /
                     (static_cast<double>(stages) + 1.0);
      Index k = static_cast<Index>(std::llround(ideal));
      k = std::max(k, prev + 1);
      k = std::min(k, depth - 1 - (stages - s));
      kappa.push_back(k);
      prev = k;
    }
  } else {
    throw ConfigError("unknown placement '" + placement +
                      "'; expected shallow, middle or deep");
  }
  return kappa;
}

RunReport run_stage_sweep(const ExperimentSpec& spec,
                          const DatasetRegistry& registry) {
  spec.validate();
  auto start = std::chrono::steady_clock::now();
  RunReport rep;
  rep.task = task_name(Task::StageSweep);
  rep.seed = spec.model.seed;
  const std::vector<std::string> placements = {"shallow", "middle", "deep"};
  for (Index h : spec.horizons) {
    for (Index s : spec.stage_grid) {
      for (const auto& placement : placements) {
        ReportRow row;
        row.dataset = spec.dataset;
        row.variant = "S" + std::to_string(s) + "-" + placement;
        try {
          ModelConfig cfg = spec.model;
          cfg.stages = s;
          cfg.kappa = placement_kappa(cfg.depth, s, placement);
          cfg.refine_at.clear();
          row.note = "kappa=" + join_with(cfg.kappa, '|');
          cfg.validate();
          std::string save = "stage_sweep_" + spec.dataset + "_" +
                             row.variant + "_h" + std::to_string(h) +
                             ".ckpt";
          rep.rows.push_back(run_one(spec, registry, spec.dataset, cfg, h,
                                     1.0, row, save));
        } catch (const ConfigError& e) {
          row.horizon = h;
          row.skipped = true;
          row.note = std::string("skipped: ") + e.what();
          rep.rows.push_back(row);
        }
      }
    }
  }
  rep.averages = average_rows(rep.rows);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  write_outputs(spec, rep);
  return rep;
}

// ------------------------------------------------------------------ config

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(value);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) parts.push_back(cur);
  }
  return parts;
}

Index parse_index(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs an integer, got '" + value +
                      "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs a number, got '" + value +
                      "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("key '" + key + "' needs true or false, got '" + value +
                    "'");
}

std::vector<Index> parse_index_list(const std::string& key,
                                    const std::string& value) {
  std::vector<Index> out;
  for (const auto& p : split_list(value)) out.push_back(parse_index(key, p));
  return out;
}

std::vector<double> parse_double_list(const std::string& key,
                                      const std::string& value) {
  std::vector<double> out;
  for (const auto& p : split_list(value)) {
    out.push_back(parse_double(key, p));
  }
  return out;
}

}  // namespace

void apply_spec_key(ExperimentSpec& spec, const std::string& key,
                    const std::string& value) {
  // experiment-level keys
  if (key == "task") { spec.task = parse_task(value); return; }
  if (key == "dataset") { spec.dataset = value; return; }
  if (key == "source") { spec.source = value; return; }
  if (key == "target") { spec.target = value; return; }
  if (key == "horizons") {
    spec.horizons = parse_index_list(key, value);
    return;
  }
  if (key == "few_shot_fraction") {
    spec.few_shot_fraction = parse_double(key, value);
    return;
  }
  if (key == "include_trunk_decoder") {
    spec.include_trunk_decoder = parse_bool(key, value);
    return;
  }
  if (key == "stage_grid") {
    spec.stage_grid = parse_index_list(key, value);
    return;
  }
  if (key == "output_dir") { spec.output_dir = value; return; }
  if (key == "embeddings") { spec.embeddings_path = value; return; }
  if (key == "embedding_seed") {
    spec.embedding_seed =
        static_cast<std::uint64_t>(parse_index(key, value));
    return;
  }
  if (key == "checkpoint") { spec.checkpoint = value; return; }
  if (key == "lr_grid") {
    spec.lr_grid = parse_double_list(key, value);
    return;
  }
  // model keys
  if (key == "model.depth") { spec.model.depth = parse_index(key, value); return; }
  if (key == "model.stages") { spec.model.stages = parse_index(key, value); return; }
  if (key == "model.kappa") { spec.model.kappa = parse_index_list(key, value); return; }
  if (key == "model.refine_at") { spec.model.refine_at = parse_index_list(key, value); return; }
  if (key == "model.horizon") { spec.model.horizon = parse_index(key, value); return; }
  if (key == "model.width") { spec.model.width = parse_index(key, value); return; }
  if (key == "model.fusion_width") { spec.model.fusion_width = parse_index(key, value); return; }
  if (key == "model.query_slots") { spec.model.query_slots = parse_index(key, value); return; }
  if (key == "model.heads") { spec.model.heads = parse_index(key, value); return; }
  if (key == "model.ffn_expansion") { spec.model.ffn_expansion = parse_index(key, value); return; }
  if (key == "model.lookback") { spec.model.patch.lookback = parse_index(key, value); return; }
  if (key == "model.patch_len") { spec.model.patch.patch_len = parse_index(key, value); return; }
  if (key == "model.stride") { spec.model.patch.stride = parse_index(key, value); return; }
  if (key == "model.llm_width") { spec.model.llm_width = parse_index(key, value); return; }
  if (key == "model.prompt") { spec.model.prompt = parse_prompt_variant(value); return; }
  if (key == "model.variant") { spec.model.variant = parse_variant(value); return; }
  if (key == "model.seed") {
    spec.model.seed = static_cast<std::uint64_t>(parse_index(key, value));
    return;
  }
  // hyper keys
  if (key == "hyper.lr") { spec.hyper.lr = parse_double(key, value); return; }
  if (key == "hyper.weight_decay") { spec.hyper.weight_decay = parse_double(key, value); return; }
  if (key == "hyper.batch_size") { spec.hyper.batch_size = parse_index(key, value); return; }
  if (key == "hyper.max_epochs") { spec.hyper.max_epochs = static_cast<int>(parse_index(key, value)); return; }
  if (key == "hyper.patience") { spec.hyper.patience = static_cast<int>(parse_index(key, value)); return; }
  if (key == "hyper.max_steps") { spec.hyper.max_steps = parse_index(key, value); return; }
  // theory keys
  if (key == "theory.sigma") { spec.noise.sigma = parse_double(key, value); return; }
  if (key == "theory.correlation") { spec.noise.correlation = parse_correlation(value); return; }
  if (key == "theory.rho") { spec.noise.rho = parse_double(key, value); return; }
  if (key == "theory.lambda") { spec.noise.lambda = parse_double(key, value); return; }
  if (key == "theory.lambda_s") { spec.noise.lambda_s = parse_double_list(key, value); return; }
  if (key == "theory.depth") { spec.noise.depth = parse_index(key, value); return; }
  if (key == "theory.stages") { spec.noise.stages = parse_index(key, value); return; }
  if (key == "theory.trials") { spec.noise.trials = parse_index(key, value); return; }
  if (key == "theory.seed") {
    spec.noise.seed = static_cast<std::uint64_t>(parse_index(key, value));
    return;
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

ExperimentSpec parse_spec_text(const std::string& text,
                               const std::string& origin) {
  ExperimentSpec spec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": empty key");
    }
    try {
      apply_spec_key(spec, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  return spec;
}

ExperimentSpec parse_spec_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("could not open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_spec_text(buf.str(), path);
}

}  // namespace timesaf
