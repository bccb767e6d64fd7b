// Command-line front end: experiment protocols, checkpoint evaluation,
// the noise-accumulation simulator, prompt rendering and attention export.
// Every subcommand accepts --config <file> plus repeatable --set key=value
// overrides; direct flags override both.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "timesaf/harness.hpp"

using namespace timesaf;

namespace {

std::string trim_copy(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Collects --config, --set and direct flags; assembles the spec with
// direct flags winning over --set, which wins over the file.
struct SpecBuilder {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> direct_values;
  std::vector<std::pair<std::string, CLI::Option*>> direct_opts;

  void add_common(CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "experiment config file (key = value lines)");
    cmd->add_option("--set", sets,
                    "override one config key, e.g. --set model.width=32");
  }

  void add_direct(CLI::App* cmd, const std::string& flag,
                  const std::string& key, const std::string& help) {
    auto& slot = direct_values[key];
    direct_opts.emplace_back(key, cmd->add_option(flag, slot, help));
  }

  ExperimentSpec build() const {
    ExperimentSpec spec;
    if (!config_path.empty()) spec = parse_spec_file(config_path);
    for (const auto& kv : sets) {
      std::size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("--set expects key=value, got '" + kv + "'");
      }
      apply_spec_key(spec, trim_copy(kv.substr(0, eq)),
                     trim_copy(kv.substr(eq + 1)));
    }
    for (const auto& [key, opt] : direct_opts) {
      if (opt->count() > 0) {
        apply_spec_key(spec, key, direct_values.at(key));
      }
    }
    return spec;
  }
};

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name +
                    "'; expected train, val or test");
}

// --csv id=path[:train:val:test] registers an external dataset.
void register_csvs(DatasetRegistry& reg,
                   const std::vector<std::string>& entries) {
  for (const auto& e : entries) {
    std::size_t eq = e.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--csv expects id=path[:train:val:test], got '" + e +
                        "'");
    }
    std::string id = e.substr(0, eq);
    std::string rest = e.substr(eq + 1);
    SplitRatios ratios{7, 1, 2};
    std::size_t colon = rest.find(':');
    std::string path = rest.substr(0, colon);
    if (colon != std::string::npos) {
      int t = 0, v = 0, s = 0;
      if (std::sscanf(rest.c_str() + colon, ":%d:%d:%d", &t, &v, &s) != 3) {
        throw ConfigError("--csv ratio suffix must be :train:val:test");
      }
      ratios = SplitRatios{t, v, s};
    }
    reg.add_csv(id, path, ratios, "registered from the command line");
  }
}

void print_report(const RunReport& rep, const ExperimentSpec& spec) {
  std::cout << rep.table();
  if (!spec.output_dir.empty()) {
    std::cout << "report files: " << spec.output_dir << "/" << rep.task
              << "_report.{csv,txt}\n";
  }
  std::cout << "wall time: " << format_real(rep.wall_seconds, 2) << " s\n";
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw IoError("could not write '" + path + "'");
}

// Splits a protocol run out of the shared boilerplate.
int run_protocol_command(const SpecBuilder& builder,
                         const std::vector<std::string>& csvs,
                         RunReport (*runner)(const ExperimentSpec&,
                                             const DatasetRegistry&)) {
  ExperimentSpec spec = builder.build();
  DatasetRegistry reg = DatasetRegistry::with_builtins();
  register_csvs(reg, csvs);
  RunReport rep = runner(spec, reg);
  print_report(rep, spec);
  return 0;
}

struct EvalContext {
  ExperimentSpec spec;
  DatasetRegistry reg = DatasetRegistry::with_builtins();
  std::unique_ptr<WindowedDataset> data;
  std::unique_ptr<EmbeddingProvider> provider;
  std::unique_ptr<PromptCache> cache;
  std::unique_ptr<TimeSafModel> model;
};

// Shared setup for eval/dump-attn: dataset windows at the configured
// horizon, prompt cache, model, optional checkpoint.
EvalContext make_eval_context(const SpecBuilder& builder,
                              const std::vector<std::string>& csvs,
                              const std::string& checkpoint) {
  EvalContext ctx;
  ctx.spec = builder.build();
  register_csvs(ctx.reg, csvs);
  SeriesData series = ctx.reg.load(ctx.spec.dataset);
  ModelConfig cfg = ctx.spec.model;
  cfg.channels = series.channels;
  cfg.validate();
  ctx.data = std::make_unique<WindowedDataset>(WindowedDataset::build(
      std::move(series), cfg.patch.lookback, cfg.horizon,
      ctx.reg.entry(ctx.spec.dataset).ratios));
  ctx.spec.model = cfg;
  ctx.provider = make_provider(ctx.spec);
  PromptTemplateSpec pts;
  pts.variant = cfg.prompt;
  pts.frequency = ctx.data->series().freq_label;
  ctx.cache = std::make_unique<PromptCache>(*ctx.data, pts, *ctx.provider);
  ctx.model = std::make_unique<TimeSafModel>(cfg);
  if (!checkpoint.empty()) ctx.model->load(checkpoint);
  return ctx;
}

std::vector<Index> limited_ids(Index available, Index limit) {
  Index n = (limit > 0 && limit < available) ? limit : available;
  std::vector<Index> ids(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Patch-based time-series forecaster with staged text fusion"};
  app.require_subcommand(1);
  std::vector<std::string> csvs;
  app.add_option("--csv", csvs,
                 "register an external dataset: id=path[:train:val:test]")
      ->expected(-1);

  // Protocol subcommands share the builder pattern; each gets its own
  // builder so flags do not leak across subcommands.
  struct ProtocolCmd {
    const char* name;
    const char* help;
    RunReport (*runner)(const ExperimentSpec&, const DatasetRegistry&);
    SpecBuilder builder;
    CLI::App* cmd = nullptr;
  };
  std::vector<ProtocolCmd> protocols = {
      {"train",
       "train one model per horizon and evaluate the test split",
       &run_long_term},
      {"few-shot",
       "the training protocol restricted to a fraction of the train region",
       &run_few_shot},
      {"zero-shot",
       "train on a source dataset, evaluate a target without fine-tuning",
       &run_zero_shot},
      {"ablate", "run the wiring variants under one seed", &run_ablation},
      {"sweep-stages",
       "grid over stage counts and fusion-layer placements",
       &run_stage_sweep},
  };
  for (auto& p : protocols) {
    p.cmd = app.add_subcommand(p.name, p.help);
    p.builder.add_common(p.cmd);
    p.builder.add_direct(p.cmd, "--dataset", "dataset", "dataset id");
    p.builder.add_direct(p.cmd, "--horizons", "horizons",
                         "comma-separated forecast horizons");
    p.builder.add_direct(p.cmd, "--output-dir", "output_dir",
                         "directory for reports and checkpoints");
    p.builder.add_direct(p.cmd, "--seed", "model.seed", "training seed");
    p.builder.add_direct(p.cmd, "--variant", "model.variant",
                         "wiring variant");
    p.builder.add_direct(p.cmd, "--lr", "hyper.lr", "learning rate");
    p.builder.add_direct(p.cmd, "--epochs", "hyper.max_epochs",
                         "epoch cap");
    p.builder.add_direct(p.cmd, "--steps", "hyper.max_steps",
                         "optimizer step cap (0 = none)");
    p.builder.add_direct(p.cmd, "--batch", "hyper.batch_size",
                         "batch size");
    if (std::string(p.name) == "few-shot") {
      p.builder.add_direct(p.cmd, "--fraction", "few_shot_fraction",
                           "visible fraction of the train region");
    }
    if (std::string(p.name) == "zero-shot") {
      p.builder.add_direct(p.cmd, "--source", "source", "source dataset");
      p.builder.add_direct(p.cmd, "--target", "target", "target dataset");
      p.builder.add_direct(p.cmd, "--checkpoint", "checkpoint",
                           "pre-trained source weights");
    }
    if (std::string(p.name) == "ablate") {
      p.cmd->add_flag_callback(
          "--trunk-decoder",
          [&p] { p.builder.sets.push_back("include_trunk_decoder=true"); },
          "include the trunk-decoder variant");
    }
    if (std::string(p.name) == "sweep-stages") {
      p.builder.add_direct(p.cmd, "--stage-grid", "stage_grid",
                           "comma-separated stage counts");
    }
  }

  // ------------------------------------------------------------- eval --
  auto* eval_cmd = app.add_subcommand(
      "eval", "evaluate a checkpoint on one dataset split");
  SpecBuilder eval_builder;
  eval_builder.add_common(eval_cmd);
  eval_builder.add_direct(eval_cmd, "--dataset", "dataset", "dataset id");
  eval_builder.add_direct(eval_cmd, "--horizon", "model.horizon",
                          "forecast horizon the checkpoint was trained at");
  eval_builder.add_direct(eval_cmd, "--seed", "model.seed",
                          "seed the checkpoint was trained with");
  eval_builder.add_direct(eval_cmd, "--batch", "hyper.batch_size",
                          "evaluation batch size");
  std::string eval_checkpoint, eval_split = "test";
  std::string forecasts_path, features_path;
  Index eval_limit = 8;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "weights to load")
      ->required();
  eval_cmd->add_option("--split", eval_split, "train, val or test");
  eval_cmd->add_option("--forecasts", forecasts_path,
                       "write forecasts as window,step,channel,value CSV");
  eval_cmd->add_option("--features", features_path,
                       "write pre-head feature rows as CSV");
  eval_cmd->add_option("--limit", eval_limit,
                       "windows to export (0 = all)");

  // ----------------------------------------------------------- theory --
  auto* theory_cmd = app.add_subcommand(
      "theory", "noise-accumulation bounds and Monte-Carlo checks");
  SpecBuilder theory_builder;
  theory_builder.add_common(theory_cmd);
  theory_builder.add_direct(theory_cmd, "--depth", "theory.depth",
                            "injection depth L");
  theory_builder.add_direct(theory_cmd, "--stages", "theory.stages",
                            "staged injection count S");
  theory_builder.add_direct(theory_cmd, "--sigma", "theory.sigma",
                            "per-injection noise std");
  theory_builder.add_direct(theory_cmd, "--lambda", "theory.lambda",
                            "injection strength");
  theory_builder.add_direct(theory_cmd, "--rho", "theory.rho",
                            "pairwise correlation for rho_uniform");
  theory_builder.add_direct(theory_cmd, "--trials", "theory.trials",
                            "Monte-Carlo trials");
  theory_builder.add_direct(theory_cmd, "--seed", "theory.seed",
                            "simulator seed");
  std::string theory_correlations = "iid,fully_correlated";
  std::string theory_out, gates_arg, gates_out;
  theory_cmd->add_option("--correlations", theory_correlations,
                         "comma-separated correlation models to simulate");
  theory_cmd->add_option("--out", theory_out, "CSV path (default stdout)");
  theory_cmd->add_option("--gates", gates_arg,
                         "comma-separated gate values for the attenuation "
                         "curve");
  theory_cmd->add_option("--gates-out", gates_out,
                         "gate curve CSV path (default stdout)");

  // --------------------------------------------------- render-prompts --
  auto* prompts_cmd = app.add_subcommand(
      "render-prompts", "render per-channel prompt texts for windows");
  SpecBuilder prompts_builder;
  prompts_builder.add_common(prompts_cmd);
  prompts_builder.add_direct(prompts_cmd, "--dataset", "dataset",
                             "dataset id");
  prompts_builder.add_direct(prompts_cmd, "--variant", "model.prompt",
                             "prompt variant: full, timestamp, domain, "
                             "instruction");
  std::string prompts_split = "train", prompts_out, embed_out;
  Index prompts_window = 0, prompts_count = 1;
  prompts_cmd->add_option("--split", prompts_split, "train, val or test");
  prompts_cmd->add_option("--window", prompts_window, "first window id");
  prompts_cmd->add_option("--count", prompts_count, "window count");
  prompts_cmd->add_option("--out", prompts_out,
                          "write texts here, one per line (default "
                          "stdout)");
  prompts_cmd->add_option("--embed-out", embed_out,
                          "also write a stub-embedding container for the "
                          "rendered texts");

  // -------------------------------------------------------- dump-attn --
  auto* attn_cmd = app.add_subcommand(
      "dump-attn", "export attention maps of one forward pass as CSV");
  SpecBuilder attn_builder;
  attn_builder.add_common(attn_cmd);
  attn_builder.add_direct(attn_cmd, "--dataset", "dataset", "dataset id");
  attn_builder.add_direct(attn_cmd, "--horizon", "model.horizon",
                          "forecast horizon");
  attn_builder.add_direct(attn_cmd, "--seed", "model.seed",
                          "seed a loaded checkpoint was trained with");
  std::string attn_split = "test", attn_out, attn_checkpoint;
  Index attn_window = 0, attn_count = 1;
  attn_cmd->add_option("--split", attn_split, "train, val or test");
  attn_cmd->add_option("--window", attn_window, "first window id");
  attn_cmd->add_option("--count", attn_count, "windows in the batch");
  attn_cmd->add_option("--checkpoint", attn_checkpoint,
                       "optional trained weights");
  attn_cmd->add_option("--out", attn_out, "output directory")->required();

  try {
    app.parse(argc, argv);

    for (auto& p : protocols) {
      if (p.cmd->parsed()) {
        return run_protocol_command(p.builder, csvs, p.runner);
      }
    }

    if (eval_cmd->parsed()) {
      EvalContext ctx = make_eval_context(eval_builder, csvs,
                                          eval_checkpoint);
      Split split = parse_split(eval_split);
      Metrics m = evaluate_split(*ctx.model, *ctx.data, *ctx.cache, split,
                                 ctx.spec.hyper.batch_size);
      std::cout << "dataset " << ctx.spec.dataset << " split " << eval_split
                << ": mse " << format_real(m.mse, 15) << "  mae "
                << format_real(m.mae, 15) << "\n";
      if (!forecasts_path.empty()) {
        auto ids = limited_ids(ctx.data->window_count(split), eval_limit);
        Tensor yhat = predict_windows(*ctx.model, *ctx.data, *ctx.cache,
                                      split, ids);
        std::ostringstream out;
        out << "window,step,channel,value\n";
        for (Index b = 0; b < yhat.dim(0); ++b) {
          for (Index h = 0; h < yhat.dim(1); ++h) {
            for (Index n = 0; n < yhat.dim(2); ++n) {
              out << ids[static_cast<std::size_t>(b)] << ',' << h << ','
                  << n << ',' << format_real(yhat.at({b, h, n}), 9) << '\n';
            }
          }
        }
        write_text_file(forecasts_path, out.str());
        std::cout << "forecasts (" << yhat.dim(0) << "," << yhat.dim(1)
                  << "," << yhat.dim(2) << ") -> " << forecasts_path
                  << "\n";
      }
      if (!features_path.empty()) {
        NoGradGuard guard;
        auto ids = limited_ids(ctx.data->window_count(split), eval_limit);
        WindowBatch wb = ctx.data->make_batch(split, ids);
        Tensor rows = ctx.cache->rows(split, ids);
        Tensor features;
        ctx.model->forward(wb.x, rows, nullptr, nullptr, &features);
        std::ostringstream out;
        for (Index r = 0; r < features.dim(0); ++r) {
          for (Index c = 0; c < features.dim(1); ++c) {
            out << (c ? "," : "") << format_real(features.at({r, c}), 9);
          }
          out << '\n';
        }
        write_text_file(features_path, out.str());
        std::cout << "features (" << features.dim(0) << ","
                  << features.dim(1) << ") -> " << features_path << "\n";
      }
      return 0;
    }

    if (theory_cmd->parsed()) {
      ExperimentSpec spec = theory_builder.build();
      std::vector<NoiseSpec> specs;
      std::istringstream in(theory_correlations);
      std::string name;
      while (std::getline(in, name, ',')) {
        NoiseSpec s = spec.noise;
        s.correlation = parse_correlation(trim_copy(name));
        specs.push_back(s);
      }
      std::string csv = theory_report_csv(specs);
      if (theory_out.empty()) {
        std::cout << csv;
      } else {
        write_text_file(theory_out, csv);
        std::cout << "theory report -> " << theory_out << "\n";
      }
      if (!gates_arg.empty()) {
        std::vector<double> gates;
        std::istringstream gin(gates_arg);
        std::string g;
        while (std::getline(gin, g, ',')) {
          gates.push_back(std::stod(trim_copy(g)));
        }
        auto curve = gate_attenuation_curve(spec.noise, gates);
        std::ostringstream out;
        out << "gate,scale,async_bound\n";
        for (const auto& row : curve) {
          out << format_real(row.gate, 6) << ','
              << format_real(row.scale, 9) << ','
              << format_real(row.bound, 9) << '\n';
        }
        if (gates_out.empty()) {
          std::cout << out.str();
        } else {
          write_text_file(gates_out, out.str());
          std::cout << "gate curve -> " << gates_out << "\n";
        }
      }
      return 0;
    }

    if (prompts_cmd->parsed()) {
      ExperimentSpec spec = prompts_builder.build();
      DatasetRegistry reg = DatasetRegistry::with_builtins();
      register_csvs(reg, csvs);
      SeriesData series = reg.load(spec.dataset);
      Index channels = series.channels;
      auto data = WindowedDataset::build(
          std::move(series), spec.model.patch.lookback, spec.model.horizon,
          reg.entry(spec.dataset).ratios);
      PromptTemplateSpec pts;
      pts.variant = spec.model.prompt;
      pts.frequency = data.series().freq_label;
      Split split = parse_split(prompts_split);
      std::vector<std::pair<std::string, std::vector<real>>> embeds;
      StubEmbedder stub(spec.model.llm_width, spec.embedding_seed);
      std::ostringstream out;
      for (Index w = prompts_window; w < prompts_window + prompts_count;
           ++w) {
        auto [first, last] = data.history_timestamps(split, w);
        for (Index n = 0; n < channels; ++n) {
          std::string text =
              render_prompt(data.raw_history(split, w, n), first, last,
                            pts);
          out << text << '\n';
          if (!embed_out.empty()) embeds.emplace_back(text, stub.embed(text));
        }
      }
      if (prompts_out.empty()) {
        std::cout << out.str();
      } else {
        write_text_file(prompts_out, out.str());
        std::cout << "prompts -> " << prompts_out << "\n";
      }
      if (!embed_out.empty()) {
        write_embedding_file(embed_out, spec.model.llm_width, embeds);
        std::cout << "embedding container -> " << embed_out << "\n";
      }
      return 0;
    }

    if (attn_cmd->parsed()) {
      EvalContext ctx = make_eval_context(attn_builder, csvs,
                                          attn_checkpoint);
      Split split = parse_split(attn_split);
      std::filesystem::create_directories(attn_out);
      Index available = ctx.data->window_count(split);
      if (attn_window < 0 || attn_window + attn_count > available) {
        throw UsageError("window range [" + std::to_string(attn_window) +
                         ", " + std::to_string(attn_window + attn_count) +
                         ") exceeds the " + std::to_string(available) +
                         " windows of the split");
      }
      std::vector<Index> ids;
      for (Index i = 0; i < attn_count; ++i) {
        ids.push_back(attn_window + i);
      }
      NoGradGuard guard;
      WindowBatch wb = ctx.data->make_batch(split, ids);
      Tensor rows = ctx.cache->rows(split, ids);
      AttentionTraceSink sink(attn_out);
      WiringTrace trace;
      ctx.model->forward(wb.x, rows, &trace, &sink);
      std::ostringstream wiring;
      for (const auto& e : trace.events) wiring << e << '\n';
      write_text_file(attn_out + "/wiring.txt", wiring.str());
      std::cout << "attention maps -> " << attn_out << "\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
