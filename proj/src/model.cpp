#include "timesaf/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "timesaf/rng.hpp"

namespace timesaf {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoTrunk: return "no_trunk";
    case Variant::NoQuery: return "no_query";
    case Variant::NoGate: return "no_gate";
    case Variant::SyncRefine: return "sync_refine";
    case Variant::TrunkDecoder: return "trunk_decoder";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::Full;
  if (name == "no_trunk") return Variant::NoTrunk;
  if (name == "no_query") return Variant::NoQuery;
  if (name == "no_gate") return Variant::NoGate;
  if (name == "sync_refine") return Variant::SyncRefine;
  if (name == "trunk_decoder") return Variant::TrunkDecoder;
  throw ConfigError("unknown variant '" + name +
                    "' (full|no_trunk|no_query|no_gate|sync_refine|"
                    "trunk_decoder)");
}

namespace {

bool fuses(Variant v) { return v != Variant::NoTrunk; }

std::string join_indices(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out.empty() ? "-" : out;
}

}  // namespace

void ModelConfig::validate() const {
  if (depth != 2 && depth != 4) {
    throw ConfigError("backbone depth " + std::to_string(depth) +
                      " unsupported (2 or 4)");
  }
  if (width < 1 || fusion_width < 1 || heads < 1 || ffn_expansion < 1 ||
      query_slots < 1 || horizon < 1 || channels < 1 || llm_width < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (width % heads != 0 || fusion_width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " / fusion width " +
                      std::to_string(fusion_width) +
                      " must be divisible by " + std::to_string(heads) +
                      " heads");
  }
  patch.validate();
  if (fuses(variant)) {
    if (stages != 1 && stages != 2 && stages != 4) {
      throw ConfigError("stage count " + std::to_string(stages) +
                        " unsupported (1, 2 or 4)");
    }
    if (!kappa.empty()) {
      if (static_cast<Index>(kappa.size()) != stages) {
        throw ConfigError("explicit fusion layers: got " +
                          std::to_string(kappa.size()) + " for " +
                          std::to_string(stages) + " stages");
      }
      Index prev = 0;
      for (Index k : kappa) {
        if (k <= prev || k > depth) {
          throw ConfigError(
              "fusion layers must be strictly increasing within [1, " +
              std::to_string(depth) + "], got " + join_indices(kappa));
        }
        prev = k;
      }
    } else if (depth % stages != 0) {
      throw ConfigError("auto fusion schedule needs depth divisible by "
                        "stages; " +
                        std::to_string(depth) + " does not divide into " +
                        std::to_string(stages));
    }
    for (std::size_t i = 0; i < refine_at.size(); ++i) {
      if (refine_at[i] < 1 || refine_at[i] > depth ||
          (i > 0 && refine_at[i] <= refine_at[i - 1])) {
        throw ConfigError(
            "refinement layers must be strictly increasing within [1, " +
            std::to_string(depth) + "], got " + join_indices(refine_at));
      }
    }
  }
  if (variant == Variant::NoQuery && width != fusion_width) {
    throw ConfigError(
        "the query-free variant feeds backbone states into the trunk, so "
        "fusion width must equal width");
  }
}

std::vector<Index> ModelConfig::resolved_kappa() const {
  if (!fuses(variant) || variant == Variant::SyncRefine) return {};
  if (!kappa.empty()) return kappa;
  std::vector<Index> out;
  Index interval = depth / stages;
  if (interval == 1) {
    for (Index s = 1; s <= stages; ++s) out.push_back(s);
  } else {
    for (Index s = 1; s < stages; ++s) out.push_back(s * interval);
    out.push_back(depth - 1);
  }
  return out;
}

std::vector<Index> ModelConfig::resolved_refine() const {
  if (!fuses(variant)) return {};
  if (variant == Variant::SyncRefine) {
    std::vector<Index> out(static_cast<std::size_t>(depth));
    std::iota(out.begin(), out.end(), Index(1));
    return out;
  }
  if (!refine_at.empty()) return refine_at;
  auto k = resolved_kappa();
  std::vector<Index> out;
  if (!k.empty()) {
    for (Index l = k.front() + 1; l <= depth; ++l) out.push_back(l);
  }
  return out;
}

std::string ModelConfig::canonical_text() const {
  std::string s;
  s += "channels=" + std::to_string(channels) + "\n";
  s += "depth=" + std::to_string(depth) + "\n";
  s += "ffn_expansion=" + std::to_string(ffn_expansion) + "\n";
  s += "fusion_width=" + std::to_string(fusion_width) + "\n";
  s += "heads=" + std::to_string(heads) + "\n";
  s += "horizon=" + std::to_string(horizon) + "\n";
  s += "kappa=" + join_indices(resolved_kappa()) + "\n";
  s += "llm_width=" + std::to_string(llm_width) + "\n";
  s += "lookback=" + std::to_string(patch.lookback) + "\n";
  s += "patch_len=" + std::to_string(patch.patch_len) + "\n";
  s += "prompt=" + std::string(prompt_variant_name(prompt)) + "\n";
  s += "query_slots=" + std::to_string(query_slots) + "\n";
  s += "refine=" + join_indices(resolved_refine()) + "\n";
  s += "seed=" + std::to_string(seed) + "\n";
  s += "stages=" + std::to_string(stages) + "\n";
  s += "stride=" + std::to_string(patch.stride) + "\n";
  s += "variant=" + std::string(variant_name(variant)) + "\n";
  s += "width=" + std::to_string(width) + "\n";
  return s;
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(canonical_text()); }

int WiringTrace::fusion_count() const {
  int n = 0;
  for (const auto& e : events) {
    if (e.rfind("fusion", 0) == 0) ++n;
  }
  return n;
}

// ----------------------------------------------------------- objective --

Tensor forecast_loss(const Tensor& yhat, const Tensor& y) {
  if (yhat.shape() != y.shape()) {
    throw ShapeError("prediction " + shape_str(yhat.shape()) +
                     " vs target " + shape_str(y.shape()));
  }
  Tensor d = sub(yhat, y);
  return scale(sum(mul(d, d)), real(1.0 / static_cast<double>(yhat.dim(0))));
}

double loss_value(const Tensor& yhat, const Tensor& y,
                  const ParameterStore& params, double alpha) {
  if (yhat.shape() != y.shape()) {
    throw ShapeError("prediction " + shape_str(yhat.shape()) +
                     " vs target " + shape_str(y.shape()));
  }
  double se = 0;
  for (Index i = 0; i < yhat.size(); ++i) {
    double d = static_cast<double>(yhat.data()[i]) -
               static_cast<double>(y.data()[i]);
    se += d * d;
  }
  return se / static_cast<double>(yhat.dim(0)) + alpha * params.l2_sum();
}

Metrics forecast_metrics(const Tensor& yhat, const Tensor& y) {
  if (yhat.shape() != y.shape()) {
    throw ShapeError("prediction " + shape_str(yhat.shape()) +
                     " vs target " + shape_str(y.shape()));
  }
  double se = 0, ae = 0;
  for (Index i = 0; i < yhat.size(); ++i) {
    double d = static_cast<double>(yhat.data()[i]) -
               static_cast<double>(y.data()[i]);
    se += d * d;
    ae += std::abs(d);
  }
  double m = static_cast<double>(yhat.size());
  return {se / m, ae / m};
}

// --------------------------------------------------------- prompt cache --

namespace {

std::size_t split_slot(Split s) { return static_cast<std::size_t>(s); }

}  // namespace

PromptCache::PromptCache(const WindowedDataset& data, PromptTemplateSpec spec,
                         const EmbeddingProvider& provider)
    : data_(data), spec_(std::move(spec)), provider_(provider) {
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    cache_[split_slot(s)].resize(
        static_cast<std::size_t>(data_.window_count(s)));
  }
}

std::vector<std::string> PromptCache::texts(Split split, Index id) const {
  Index n_channels = static_cast<Index>(data_.scale_mean().size());
  auto [first, last] = data_.history_timestamps(split, id);
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n_channels));
  for (Index n = 0; n < n_channels; ++n) {
    out.push_back(
        render_prompt(data_.raw_history(split, id, n), first, last, spec_));
  }
  return out;
}

Tensor PromptCache::rows(Split split, std::span<const Index> ids) const {
  if (ids.empty()) throw UsageError("prompt rows: no windows requested");
  Index n_channels = static_cast<Index>(data_.scale_mean().size());
  Index d = provider_.dim();
  auto& slots = cache_[split_slot(split)];
  std::vector<real> out;
  out.reserve(ids.size() * static_cast<std::size_t>(n_channels * d));
  for (Index id : ids) {
    auto& slot = slots.at(static_cast<std::size_t>(id));
    if (slot.empty()) {
      slot.reserve(static_cast<std::size_t>(n_channels * d));
      for (const auto& text : texts(split, id)) {
        auto v = provider_.embed(text);
        if (static_cast<Index>(v.size()) != d) {
          throw Error("embedding provider returned " +
                      std::to_string(v.size()) + " values, declared width " +
                      std::to_string(d));
        }
        slot.insert(slot.end(), v.begin(), v.end());
      }
    }
    out.insert(out.end(), slot.begin(), slot.end());
  }
  return Tensor::from_data(
      {static_cast<Index>(ids.size()) * n_channels, d}, std::move(out));
}

// ----------------------------------------------------------------- model --

TimeSafModel::TimeSafModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  kappa_ = cfg_.resolved_kappa();
  refine_ = cfg_.resolved_refine();
  block_cfg_.width = cfg_.width;
  block_cfg_.fusion_width = cfg_.fusion_width;
  block_cfg_.heads = cfg_.heads;
  block_cfg_.ffn_expansion = cfg_.ffn_expansion;
  block_cfg_.validate();

  Rng rng(cfg_.seed);
  Index N = cfg_.channels, D = cfg_.width, Df = cfg_.fusion_width;
  Index Np = cfg_.patch.patch_count();

  revin_.gain = store_.create("revin.gain", Tensor::full({N}, real(1)));
  revin_.bias = store_.create("revin.bias", Tensor::zeros({N}));

  patch_w_ = store_.create(
      "patch.w",
      Tensor::truncated_normal({cfg_.patch.patch_len, D}, rng, real(0.02)));
  patch_b_ = store_.create("patch.b", Tensor::zeros({D}));
  patch_pos_ = store_.create(
      "patch.pos", Tensor::truncated_normal({Np, D}, rng, real(0.02)));

  text_w_ = store_.create(
      "text.adapter.w",
      Tensor::truncated_normal({cfg_.llm_width, D}, rng, real(0.02)));
  text_b_ = store_.create("text.adapter.b", Tensor::zeros({D}));
  text_pos_ = store_.create(
      "text.adapter.pos", Tensor::truncated_normal({N, D}, rng, real(0.02)));

  time_layers_.resize(static_cast<std::size_t>(cfg_.depth));
  text_layers_.resize(static_cast<std::size_t>(cfg_.depth));
  for (Index l = 1; l <= cfg_.depth; ++l) {
    bool capable = std::find(refine_.begin(), refine_.end(), l) !=
                   refine_.end();
    Layer& lt = time_layers_[static_cast<std::size_t>(l - 1)];
    Layer& lx = text_layers_[static_cast<std::size_t>(l - 1)];
    lt.refine_capable = lx.refine_capable = capable;
    std::string time_prefix = "time.layer" + std::to_string(l);
    std::string text_prefix = "text.layer" + std::to_string(l);
    if (capable) {
      lt.refine = make_refine_block(store_, time_prefix, block_cfg_, rng);
      lx.refine = make_refine_block(store_, text_prefix, block_cfg_, rng);
      Tensor gate;
      if (cfg_.variant != Variant::NoGate) {
        gate = make_refine_gate(store_,
                                "layer" + std::to_string(l) + ".gate");
      }
      lt.adapter = make_gated_adapter(store_, time_prefix + ".adapter",
                                      block_cfg_, gate, rng);
      lx.adapter = make_gated_adapter(store_, text_prefix + ".adapter",
                                      block_cfg_, gate, rng);
    } else {
      lt.unimodal = make_unimodal_block(store_, time_prefix, block_cfg_, rng);
      lx.unimodal = make_unimodal_block(store_, text_prefix, block_cfg_, rng);
    }
  }

  if (cfg_.variant == Variant::SyncRefine) {
    queries_.push_back(store_.create(
        "trunk.sync.queries",
        Tensor::truncated_normal({cfg_.query_slots, Df}, rng, real(0.02))));
    trunk_.push_back(make_fusion_block(store_, "trunk.sync", block_cfg_, rng));
  } else if (fuses(cfg_.variant)) {
    for (Index s = 1; s <= cfg_.stages; ++s) {
      std::string prefix = "trunk.stage" + std::to_string(s);
      if (cfg_.variant != Variant::NoQuery) {
        queries_.push_back(store_.create(
            prefix + ".queries",
            Tensor::truncated_normal({cfg_.query_slots, Df}, rng,
                                     real(0.02))));
      }
      trunk_.push_back(make_fusion_block(store_, prefix, block_cfg_, rng));
    }
  }

  if (cfg_.variant == Variant::TrunkDecoder) {
    BlockConfig dcfg = block_cfg_;
    dcfg.width = Df;
    decoder_block_ = make_unimodal_block(store_, "decoder.block", dcfg, rng);
    decoder_w_ = store_.create(
        "decoder.w", Tensor::truncated_normal({cfg_.query_slots * Df,
                                               cfg_.horizon},
                                              rng, real(0.02)));
    decoder_b_ = store_.create("decoder.b", Tensor::zeros({cfg_.horizon}));
  } else {
    head_w_ = store_.create(
        "head.w",
        Tensor::truncated_normal({Np * D, cfg_.horizon}, rng, real(0.02)));
    head_b_ = store_.create("head.b", Tensor::zeros({cfg_.horizon}));
  }
}

Tensor TimeSafModel::fuse(Index ordinal, Index after_layer,
                          const Tensor& h_time, const Tensor& h_text,
                          WiringTrace* wiring,
                          const AttentionTraceSink* sink) {
  const FusionParams& fp =
      trunk_[cfg_.variant == Variant::SyncRefine
                 ? 0
                 : static_cast<std::size_t>(ordinal - 1)];
  Tensor q0;
  if (cfg_.variant == Variant::NoQuery) {
    q0 = h_time;
  } else {
    const Tensor& table =
        queries_[cfg_.variant == Variant::SyncRefine
                     ? 0
                     : static_cast<std::size_t>(ordinal - 1)];
    q0 = broadcast_rows(table, h_time.dim(0));
  }
  if (wiring) {
    wiring->events.push_back("fusion stage " + std::to_string(ordinal) +
                             " after layer " + std::to_string(after_layer));
  }
  return fusion_block(q0, h_time, h_text, fp, block_cfg_, sink,
                      "stage" + std::to_string(ordinal));
}

Tensor TimeSafModel::head(const Tensor& h_time_final,
                          const Tensor& memory_final, Index batch,
                          const AttentionTraceSink* sink,
                          WiringTrace* wiring, Tensor* features) {
  Index N = cfg_.channels, H = cfg_.horizon;
  Tensor flat_pred;
  if (cfg_.variant == Variant::TrunkDecoder) {
    if (!memory_final.defined()) {
      throw ConfigError("trunk decoder needs a fusion memory");
    }
    BlockConfig dcfg = block_cfg_;
    dcfg.width = cfg_.fusion_width;
    if (wiring) wiring->events.push_back("decoder");
    Tensor dec =
        unimodal_block(memory_final, decoder_block_, dcfg, sink, "decoder");
    Tensor flat = reshape(
        dec, {dec.dim(0), cfg_.query_slots * cfg_.fusion_width});
    if (features) *features = flat;
    flat_pred = add(matmul(flat, decoder_w_), decoder_b_);
  } else {
    Tensor flat = reshape(h_time_final,
                          {h_time_final.dim(0),
                           cfg_.patch.patch_count() * cfg_.width});
    if (features) *features = flat;
    flat_pred = add(matmul(flat, head_w_), head_b_);
  }
  // (B*N, H) -> (B, H, N): element (b, h, n) reads row b*N+n, column h.
  auto idx = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(batch * H * N));
  std::size_t w = 0;
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < H; ++h) {
      for (Index n = 0; n < N; ++n) (*idx)[w++] = (b * N + n) * H + h;
    }
  }
  return take(flat_pred, std::move(idx), {batch, H, N});
}

Tensor TimeSafModel::forward(const Tensor& x, const Tensor& text_rows,
                             WiringTrace* wiring,
                             const AttentionTraceSink* attn_sink,
                             Tensor* features) {
  if (x.ndim() != 3 || x.dim(1) != cfg_.patch.lookback ||
      x.dim(2) != cfg_.channels) {
    throw ShapeError("model input " + shape_str(x.shape()) +
                     ", expected (batch, " +
                     std::to_string(cfg_.patch.lookback) + ", " +
                     std::to_string(cfg_.channels) + ")");
  }
  Index B = x.dim(0), N = cfg_.channels;
  if (text_rows.ndim() != 2 || text_rows.dim(0) != B * N ||
      text_rows.dim(1) != cfg_.llm_width) {
    throw ShapeError("text rows " + shape_str(text_rows.shape()) +
                     ", expected (" + std::to_string(B * N) + ", " +
                     std::to_string(cfg_.llm_width) + ")");
  }

  RevinState state;
  Tensor xn = revin_normalize(x, revin_, state);
  Tensor h_time = embed_patches(make_patches(xn, cfg_.patch), patch_w_,
                                patch_b_, patch_pos_);
  Tensor h_text =
      adapt_semantics_rows(text_rows, text_w_, text_b_, text_pos_, N);

  Tensor memory;
  Index mem_ordinal = 0;
  std::size_t next_stage = 0;
  if (cfg_.variant == Variant::SyncRefine) {
    memory = fuse(1, 0, h_time, h_text, wiring, attn_sink);
    mem_ordinal = 1;
  }
  for (Index l = 1; l <= cfg_.depth; ++l) {
    Layer& lt = time_layers_[static_cast<std::size_t>(l - 1)];
    Layer& lx = text_layers_[static_cast<std::size_t>(l - 1)];
    bool do_refine = lt.refine_capable && memory.defined();
    std::string time_tag = "time_layer" + std::to_string(l);
    std::string text_tag = "text_layer" + std::to_string(l);
    if (do_refine) {
      if (wiring) {
        wiring->events.push_back("refine time layer " + std::to_string(l) +
                                 " memory " + std::to_string(mem_ordinal));
      }
      h_time = refine_block(h_time, memory, lt.adapter, lt.refine, block_cfg_,
                            attn_sink, time_tag);
      if (wiring) {
        wiring->events.push_back("refine text layer " + std::to_string(l) +
                                 " memory " + std::to_string(mem_ordinal));
      }
      h_text = refine_block(h_text, memory, lx.adapter, lx.refine, block_cfg_,
                            attn_sink, text_tag);
    } else {
      UnimodalParams ut =
          lt.refine_capable ? UnimodalParams{lt.refine.self_attn,
                                             lt.refine.ffn}
                            : lt.unimodal;
      UnimodalParams ux =
          lx.refine_capable ? UnimodalParams{lx.refine.self_attn,
                                             lx.refine.ffn}
                            : lx.unimodal;
      if (wiring) {
        wiring->events.push_back("unimodal time layer " + std::to_string(l));
      }
      h_time = unimodal_block(h_time, ut, block_cfg_, attn_sink, time_tag);
      if (wiring) {
        wiring->events.push_back("unimodal text layer " + std::to_string(l));
      }
      h_text = unimodal_block(h_text, ux, block_cfg_, attn_sink, text_tag);
    }
    if (cfg_.variant == Variant::SyncRefine) {
      if (l < cfg_.depth) {
        memory = fuse(mem_ordinal + 1, l, h_time, h_text, wiring, attn_sink);
        ++mem_ordinal;
      }
    } else if (next_stage < kappa_.size() && kappa_[next_stage] == l) {
      memory = fuse(static_cast<Index>(next_stage + 1), l, h_time, h_text,
                    wiring, attn_sink);
      mem_ordinal = static_cast<Index>(next_stage + 1);
      ++next_stage;
    }
  }

  Tensor yn = head(h_time, memory, B, attn_sink, wiring, features);
  return revin_denormalize(yn, revin_, state);
}

void TimeSafModel::save(const std::string& path) const {
  CheckpointInfo info;
  info.config_hash = cfg_.hash();
  info.seed = cfg_.seed;
  info.config_text = cfg_.canonical_text();
  save_checkpoint(path, store_, info);
}

void TimeSafModel::load(const std::string& path) {
  CheckpointInfo info = peek_checkpoint(path);
  if (info.config_hash != cfg_.hash()) {
    throw IoError("checkpoint '" + path +
                  "' was written by a different configuration:\n" +
                  info.config_text + "-- this model --\n" +
                  cfg_.canonical_text());
  }
  load_checkpoint(path, store_);
}

// -------------------------------------------------------------- training --

void HyperConfig::validate() const {
  if (lr < 0) throw ConfigError("learning rate must be nonnegative");
  if (weight_decay < 0) throw ConfigError("weight decay must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (max_epochs < 1) throw ConfigError("epoch cap must be positive");
  if (patience < 0) throw ConfigError("patience must be nonnegative");
  if (max_steps < 0) throw ConfigError("step cap must be nonnegative");
}

namespace {

std::vector<std::span<const Index>> chunked(const std::vector<Index>& ids,
                                            Index batch_size) {
  std::vector<std::span<const Index>> out;
  for (std::size_t at = 0; at < ids.size();) {
    std::size_t len = std::min(static_cast<std::size_t>(batch_size),
                               ids.size() - at);
    out.emplace_back(ids.data() + at, len);
    at += len;
  }
  return out;
}

}  // namespace

Metrics evaluate_split(TimeSafModel& model, const WindowedDataset& data,
                       const PromptCache& prompts, Split split,
                       Index batch_size) {
  Index count = data.window_count(split);
  if (count == 0) throw UsageError("evaluation split has no windows");
  NoGradGuard guard;
  std::vector<Index> ids(static_cast<std::size_t>(count));
  std::iota(ids.begin(), ids.end(), Index(0));
  double se = 0, ae = 0, m = 0;
  for (auto chunk : chunked(ids, batch_size)) {
    WindowBatch batch = data.make_batch(split, chunk);
    Tensor rows = prompts.rows(split, chunk);
    Tensor yhat = model.forward(batch.x, rows);
    for (Index i = 0; i < yhat.size(); ++i) {
      double d = static_cast<double>(yhat.data()[i]) -
                 static_cast<double>(batch.y.data()[i]);
      se += d * d;
      ae += std::abs(d);
    }
    m += static_cast<double>(yhat.size());
  }
  return {se / m, ae / m};
}

Tensor predict_windows(TimeSafModel& model, const WindowedDataset& data,
                       const PromptCache& prompts, Split split,
                       std::span<const Index> ids) {
  NoGradGuard guard;
  WindowBatch batch = data.make_batch(split, ids);
  Tensor rows = prompts.rows(split, ids);
  return model.forward(batch.x, rows);
}

TrainResult train_model(TimeSafModel& model, const WindowedDataset& data,
                        const PromptCache& prompts, const HyperConfig& hyper) {
  hyper.validate();
  Index n_train = data.window_count(Split::Train);
  if (n_train == 0) throw UsageError("training split has no windows");
  bool has_val = data.window_count(Split::Val) > 0;

  ParameterStore& ps = model.params();
  ps.adam.lr = static_cast<real>(hyper.lr);
  ps.adam.weight_decay = static_cast<real>(hyper.weight_decay);

  Rng order_rng = Rng(model.config().seed).fork(1);
  std::vector<Index> ids(static_cast<std::size_t>(n_train));
  std::iota(ids.begin(), ids.end(), Index(0));

  TrainResult res;
  std::vector<std::vector<real>> best_values;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  bool step_capped = false;

  for (int epoch = 0; epoch < hyper.max_epochs && !step_capped; ++epoch) {
    order_rng.shuffle(ids);
    double loss_sum = 0;
    int batches = 0;
    for (auto chunk : chunked(ids, hyper.batch_size)) {
      WindowBatch batch = data.make_batch(Split::Train, chunk);
      Tensor rows = prompts.rows(Split::Train, chunk);
      Tensor yhat = model.forward(batch.x, rows);
      Tensor loss = forecast_loss(yhat, batch.y);
      loss_sum += static_cast<double>(loss.value()) +
                  hyper.weight_decay * ps.l2_sum();
      loss.backward();
      res.untouched_params = ps.adam_step();
      ++batches;
      ++res.steps;
      if (hyper.max_steps > 0 && res.steps >= hyper.max_steps) {
        step_capped = true;
        break;
      }
    }
    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(batches);
    // With no complete validation window, the epoch's train loss stands in
    // as the stopping signal.
    stats.val_mse =
        has_val
            ? evaluate_split(model, data, prompts, Split::Val,
                             hyper.batch_size)
                  .mse
            : stats.train_loss;
    res.history.push_back(stats);
    if (stats.val_mse < best_val) {
      best_val = stats.val_mse;
      best_values = ps.export_values();
      res.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= hyper.patience && hyper.patience > 0) break;
  }
  if (res.best_epoch >= 0) ps.import_values(best_values);
  res.best_val_mse = best_val;
  return res;
}

}  // namespace timesaf
