#include "timesaf/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace timesaf {

namespace {

void require_rank3(const char* op, const Tensor& x) {
  if (x.ndim() != 3) {
    throw ShapeError(std::string(op) + ": expected rank-3 (batch, time, " +
                     "channels), got " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor revin_normalize(const Tensor& x, const RevinAffine& affine,
                       RevinState& state) {
  require_rank3("revin_normalize", x);
  Index B = x.dim(0), L = x.dim(1), N = x.dim(2);
  if (affine.gain.size() != N || affine.bias.size() != N) {
    throw ShapeError("revin_normalize: affine " +
                     shape_str(affine.gain.shape()) + "/" +
                     shape_str(affine.bias.shape()) + " for " +
                     std::to_string(N) + " channels");
  }
  std::vector<real> mu(static_cast<std::size_t>(B * N));
  std::vector<real> sd(static_cast<std::size_t>(B * N));
  auto xd = x.data();
  for (Index b = 0; b < B; ++b) {
    for (Index n = 0; n < N; ++n) {
      double m = 0;
      for (Index t = 0; t < L; ++t) {
        m += xd[static_cast<std::size_t>((b * L + t) * N + n)];
      }
      m /= static_cast<double>(L);
      double var = 0;
      for (Index t = 0; t < L; ++t) {
        double d = xd[static_cast<std::size_t>((b * L + t) * N + n)] - m;
        var += d * d;
      }
      var /= static_cast<double>(L);  // population variance
      double s = std::sqrt(var);
      if (s < affine.eps) s = affine.eps;
      mu[static_cast<std::size_t>(b * N + n)] = static_cast<real>(m);
      sd[static_cast<std::size_t>(b * N + n)] = static_cast<real>(s);
    }
  }
  state.mean = Tensor::from_data({B, 1, N}, std::move(mu));
  state.stddev = Tensor::from_data({B, 1, N}, std::move(sd));
  state.captured = true;
  Tensor standardized = divide(sub(x, state.mean), state.stddev);
  return add(mul(standardized, affine.gain), affine.bias);
}

Tensor revin_denormalize(const Tensor& y, const RevinAffine& affine,
                         const RevinState& state) {
  require_rank3("revin_denormalize", y);
  if (!state.captured) {
    throw UsageError(
        "revin_denormalize: no captured statistics; normalize first");
  }
  if (y.dim(0) != state.mean.dim(0) || y.dim(2) != state.mean.dim(2)) {
    throw ShapeError("revin_denormalize: " + shape_str(y.shape()) +
                     " does not match captured stats " +
                     shape_str(state.mean.shape()));
  }
  Tensor unaffine = divide(sub(y, affine.bias), affine.gain);
  return add(mul(unaffine, state.stddev), state.mean);
}

void PatchConfig::validate() const {
  if (lookback < 1 || patch_len < 1 || stride < 1) {
    throw ConfigError("patching: lookback " + std::to_string(lookback) +
                      ", patch_len " + std::to_string(patch_len) +
                      ", stride " + std::to_string(stride) +
                      " must all be positive");
  }
  if (patch_len > lookback) {
    throw ConfigError("patching: patch_len " + std::to_string(patch_len) +
                      " exceeds lookback " + std::to_string(lookback));
  }
}

Tensor make_patches(const Tensor& x, const PatchConfig& cfg) {
  cfg.validate();
  require_rank3("make_patches", x);
  Index B = x.dim(0), L = x.dim(1), N = x.dim(2);
  if (L != cfg.lookback) {
    throw ShapeError("make_patches: input has " + std::to_string(L) +
                     " steps, config expects " + std::to_string(cfg.lookback));
  }
  Index np = cfg.patch_count();
  Index P = cfg.patch_len;
  auto idx = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(B * N * np * P));
  std::size_t w = 0;
  for (Index b = 0; b < B; ++b) {
    for (Index n = 0; n < N; ++n) {
      for (Index i = 0; i < np; ++i) {
        for (Index t = 0; t < P; ++t) {
          (*idx)[w++] = (b * L + i * cfg.stride + t) * N + n;
        }
      }
    }
  }
  return take(x, std::move(idx), {B * N, np, P});
}

Tensor embed_patches(const Tensor& patches, const Tensor& proj_w,
                     const Tensor& proj_b, const Tensor& pos) {
  if (patches.ndim() != 3) {
    throw ShapeError("embed_patches: expected (rows, patches, patch_len), "
                     "got " + shape_str(patches.shape()));
  }
  Index P = patches.dim(2), np = patches.dim(1);
  if (proj_w.ndim() != 2 || proj_w.dim(0) != P) {
    throw ShapeError("embed_patches: projection " + shape_str(proj_w.shape()) +
                     " does not accept patch length " + std::to_string(P));
  }
  Index D = proj_w.dim(1);
  if (proj_b.size() != D) {
    throw ShapeError("embed_patches: bias " + shape_str(proj_b.shape()) +
                     " for width " + std::to_string(D));
  }
  if (pos.ndim() != 2 || pos.dim(0) != np || pos.dim(1) != D) {
    throw ShapeError("embed_patches: positional table " +
                     shape_str(pos.shape()) + " for " + std::to_string(np) +
                     " patches of width " + std::to_string(D));
  }
  return add(add(matmul(patches, proj_w), proj_b), pos);
}

// ------------------------------------------------------------------ CSV --

SeriesData load_csv(const std::string& path, char delimiter) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");

  auto split_line = [&](const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
      if (c == delimiter) {
        fields.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur += c;
      }
    }
    fields.push_back(cur);
    return fields;
  };

  std::string line;
  if (!std::getline(f, line)) {
    throw IoError("'" + path + "': empty file, header row required");
  }
  auto header = split_line(line);
  if (header.size() < 2) {
    throw IoError("'" + path + "': header needs a timestamp column and at "
                  "least one channel");
  }
  SeriesData out;
  out.channels = static_cast<Index>(header.size()) - 1;
  out.channel_names.assign(header.begin() + 1, header.end());

  Index row = 1;  // header was row 1
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    auto fields = split_line(line);
    if (static_cast<Index>(fields.size()) != out.channels + 1) {
      throw IoError("'" + path + "': row " + std::to_string(row) + " has " +
                    std::to_string(fields.size()) + " fields, expected " +
                    std::to_string(out.channels + 1));
    }
    out.timestamps.push_back(fields[0]);
    for (Index c = 1; c <= out.channels; ++c) {
      const std::string& s = fields[static_cast<std::size_t>(c)];
      char* end = nullptr;
      double v = std::strtod(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) {
        throw IoError("'" + path + "': row " + std::to_string(row) +
                      ", column " + std::to_string(c + 1) +
                      ": cannot parse '" + s + "' as a number");
      }
      out.values.push_back(v);
    }
  }
  out.steps = static_cast<Index>(out.timestamps.size());
  if (out.steps == 0) {
    throw IoError("'" + path + "': no data rows after the header");
  }
  return out;
}

// ------------------------------------------------------------ windowing --

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

WindowedDataset WindowedDataset::build(SeriesData series, Index lookback,
                                       Index horizon, SplitRatios ratios,
                                       double few_shot_fraction,
                                       bool z_score) {
  if (lookback < 1 || horizon < 1) {
    throw ConfigError("windows: lookback " + std::to_string(lookback) +
                      " and horizon " + std::to_string(horizon) +
                      " must be positive");
  }
  if (few_shot_fraction <= 0.0 || few_shot_fraction > 1.0) {
    throw ConfigError("windows: few-shot fraction " +
                      std::to_string(few_shot_fraction) +
                      " outside (0, 1]");
  }
  int rsum = ratios.train + ratios.val + ratios.test;
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0 || rsum <= 0) {
    throw ConfigError("windows: bad split ratios " +
                      std::to_string(ratios.train) + ":" +
                      std::to_string(ratios.val) + ":" +
                      std::to_string(ratios.test));
  }

  WindowedDataset ds;
  ds.lookback_ = lookback;
  ds.horizon_ = horizon;
  ds.z_score_ = z_score;

  Index T = series.steps;
  if (T < lookback + horizon) {
    throw ConfigError("windows: series has " + std::to_string(T) +
                      " steps, shorter than lookback+horizon = " +
                      std::to_string(lookback + horizon));
  }
  ds.n_train_ = T * ratios.train / rsum;
  ds.n_test_ = T * ratios.test / rsum;
  ds.n_val_ = T - ds.n_train_ - ds.n_test_;
  if (ds.n_train_ < lookback) {
    throw ConfigError("windows: train region " + std::to_string(ds.n_train_) +
                      " is shorter than the lookback " +
                      std::to_string(lookback));
  }
  ds.effective_train_ = static_cast<Index>(
      std::floor(few_shot_fraction * static_cast<double>(ds.n_train_)));

  ds.base_[0] = 0;
  ds.count_[0] = ds.effective_train_ - lookback - horizon + 1;
  ds.base_[1] = ds.n_train_ - lookback;
  ds.count_[1] = ds.n_val_ - horizon + 1;
  ds.base_[2] = ds.n_train_ + ds.n_val_ - lookback;
  ds.count_[2] = ds.n_test_ - horizon + 1;
  for (int s = 0; s < 3; ++s) {
    if (ds.count_[s] <= 0) {
      throw ConfigError(std::string("windows: ") +
                        split_name(static_cast<Split>(s)) +
                        " split has no complete window (lookback " +
                        std::to_string(lookback) + ", horizon " +
                        std::to_string(horizon) + ", region sizes " +
                        std::to_string(ds.effective_train_) + "/" +
                        std::to_string(ds.n_val_) + "/" +
                        std::to_string(ds.n_test_) + ")");
    }
  }

  Index N = series.channels;
  ds.scale_mean_.assign(static_cast<std::size_t>(N), 0.0);
  ds.scale_std_.assign(static_cast<std::size_t>(N), 1.0);
  if (z_score) {
    // statistics over the visible train region only
    Index R = ds.effective_train_;
    for (Index n = 0; n < N; ++n) {
      double m = 0;
      for (Index t = 0; t < R; ++t) m += series.value(t, n);
      m /= static_cast<double>(R);
      double var = 0;
      for (Index t = 0; t < R; ++t) {
        double d = series.value(t, n) - m;
        var += d * d;
      }
      var /= static_cast<double>(R);
      double sd = std::sqrt(var);
      if (sd < 1e-8) sd = 1e-8;
      ds.scale_mean_[static_cast<std::size_t>(n)] = m;
      ds.scale_std_[static_cast<std::size_t>(n)] = sd;
    }
  }
  ds.scaled_.resize(series.values.size());
  for (Index t = 0; t < T; ++t) {
    for (Index n = 0; n < N; ++n) {
      auto i = static_cast<std::size_t>(t * N + n);
      ds.scaled_[i] = (series.values[i] -
                       ds.scale_mean_[static_cast<std::size_t>(n)]) /
                      ds.scale_std_[static_cast<std::size_t>(n)];
    }
  }
  ds.series_ = std::move(series);
  return ds;
}

Index WindowedDataset::window_count(Split s) const {
  return count_[static_cast<int>(s)];
}

Index WindowedDataset::window_start(Split s, Index id) const {
  if (id < 0 || id >= count_[static_cast<int>(s)]) {
    throw UsageError(std::string("windows: ") + split_name(s) + " id " +
                     std::to_string(id) + " out of range (count " +
                     std::to_string(count_[static_cast<int>(s)]) + ")");
  }
  return base_[static_cast<int>(s)] + id;
}

WindowBatch WindowedDataset::make_batch(Split s,
                                        std::span<const Index> ids) const {
  Index B = static_cast<Index>(ids.size());
  if (B == 0) throw UsageError("windows: empty batch requested");
  Index L = lookback_, H = horizon_, N = series_.channels;
  std::vector<real> xs(static_cast<std::size_t>(B * L * N));
  std::vector<real> ys(static_cast<std::size_t>(B * H * N));
  WindowBatch batch;
  batch.starts.reserve(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    Index start = window_start(s, ids[static_cast<std::size_t>(b)]);
    batch.starts.push_back(start);
    for (Index t = 0; t < L; ++t) {
      for (Index n = 0; n < N; ++n) {
        xs[static_cast<std::size_t>((b * L + t) * N + n)] = static_cast<real>(
            scaled_[static_cast<std::size_t>((start + t) * N + n)]);
      }
    }
    for (Index t = 0; t < H; ++t) {
      for (Index n = 0; n < N; ++n) {
        ys[static_cast<std::size_t>((b * H + t) * N + n)] = static_cast<real>(
            scaled_[static_cast<std::size_t>((start + L + t) * N + n)]);
      }
    }
  }
  batch.x = Tensor::from_data({B, L, N}, std::move(xs));
  batch.y = Tensor::from_data({B, H, N}, std::move(ys));
  return batch;
}

std::vector<double> WindowedDataset::raw_history(Split s, Index id,
                                                 Index channel) const {
  if (channel < 0 || channel >= series_.channels) {
    throw UsageError("windows: channel " + std::to_string(channel) +
                     " out of range");
  }
  Index start = window_start(s, id);
  std::vector<double> out(static_cast<std::size_t>(lookback_));
  for (Index t = 0; t < lookback_; ++t) {
    out[static_cast<std::size_t>(t)] = series_.value(start + t, channel);
  }
  return out;
}

std::pair<std::string, std::string> WindowedDataset::history_timestamps(
    Split s, Index id) const {
  Index start = window_start(s, id);
  return {series_.timestamps[static_cast<std::size_t>(start)],
          series_.timestamps[static_cast<std::size_t>(start + lookback_ - 1)]};
}

}  // namespace timesaf
