#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support/oracles.hpp"
#include "timesaf/preprocess.hpp"

using namespace timesaf;

namespace {

RevinAffine identity_affine(Index n) {
  RevinAffine a;
  a.gain = Tensor::full({n}, 1.0);
  a.bias = Tensor::zeros({n});
  return a;
}

// Independent derivation of split window counts: enumerate every start and
// keep those whose target lies inside the split region (histories may reach
// back into the preceding region; train histories may not).
struct WindowOracle {
  Index train = 0, val = 0, test = 0;
};
WindowOracle count_windows_oracle(Index T, Index L, Index H, int rt, int rv,
                                  int rs, double fraction = 1.0) {
  Index n_train = T * rt / (rt + rv + rs);
  Index n_test = T * rs / (rt + rv + rs);
  Index n_val = T - n_train - n_test;
  auto eff = static_cast<Index>(std::floor(fraction * double(n_train)));
  WindowOracle w;
  for (Index s = 0; s + L + H <= T; ++s) {
    if (s + L + H <= eff) ++w.train;
    if (s + L >= n_train && s + L + H <= n_train + n_val) ++w.val;
    if (s + L >= n_train + n_val) ++w.test;
  }
  return w;
}

SeriesData ramp_series(Index T, Index N) {
  SeriesData s;
  s.steps = T;
  s.channels = N;
  s.freq_label = "1 hour";
  for (Index t = 0; t < T; ++t) {
    s.timestamps.push_back("t" + std::to_string(t));
    for (Index n = 0; n < N; ++n) {
      s.values.push_back(static_cast<double>(t) + 0.1 * static_cast<double>(n));
    }
  }
  for (Index n = 0; n < N; ++n) {
    s.channel_names.push_back("c" + std::to_string(n));
  }
  return s;
}

}  // namespace

TEST_CASE("revin: pinned [1,2,3] standardization (population std)") {
  Tensor x = Tensor::from_data({1, 3, 1}, {1, 2, 3});
  RevinAffine a = identity_affine(1);
  RevinState st;
  Tensor y = revin_normalize(x, a, st);
  double expected = 1.0 / std::sqrt(2.0 / 3.0);  // = 1.224744...
  CHECK(std::abs(y.at({0, 0, 0}) + expected) < 1e-4);
  CHECK(std::abs(y.at({0, 1, 0})) < 1e-9);
  CHECK(std::abs(y.at({0, 2, 0}) - expected) < 1e-4);
}

TEST_CASE("revin: constant window maps to zeros under identity affine") {
  Tensor x = Tensor::full({2, 5, 3}, 7.25);
  RevinAffine a = identity_affine(3);
  RevinState st;
  Tensor y = revin_normalize(x, a, st);
  for (Index i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("revin: denormalize(normalize(x)) == x over 500 random windows") {
  Rng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    Index B = 1 + static_cast<Index>(rng.below(3));
    Index L = 4 + static_cast<Index>(rng.below(20));
    Index N = 1 + static_cast<Index>(rng.below(4));
    std::vector<real> v(static_cast<std::size_t>(B * L * N));
    for (auto& x : v) x = static_cast<real>(rng.normal() * 10 + 3);
    // some trials force one or more constant channels
    if (trial % 5 == 0) {
      for (Index b = 0; b < B; ++b) {
        for (Index t = 0; t < L; ++t) {
          v[static_cast<std::size_t>((b * L + t) * N)] = 4.5;
        }
      }
    }
    Tensor x = Tensor::from_data({B, L, N}, v);

    RevinAffine a;
    std::vector<real> g(static_cast<std::size_t>(N)), bi(static_cast<std::size_t>(N));
    for (auto& e : g) e = static_cast<real>(0.5 + rng.uniform());
    for (auto& e : bi) e = static_cast<real>(rng.normal());
    a.gain = Tensor::from_data({N}, g);
    a.bias = Tensor::from_data({N}, bi);

    RevinState st;
    Tensor norm = revin_normalize(x, a, st);
    Tensor back = revin_denormalize(norm, a, st);
    for (Index i = 0; i < x.size(); ++i) {
      CHECK(std::abs(back.data()[i] - x.data()[i]) < 1e-6);
    }
  }
}

TEST_CASE("revin: gradients reach the affine through norm and denorm") {
  Rng rng(5);
  Tensor x = Tensor::randn({2, 6, 3}, rng);
  Tensor target = Tensor::randn({2, 6, 3}, rng);
  RevinAffine a;
  a.gain = Tensor::from_data({3}, {1.0, 1.2, 0.8});
  a.bias = Tensor::from_data({3}, {0.0, 0.1, -0.2});
  a.gain.set_requires_grad(true);
  a.bias.set_requires_grad(true);

  auto forward = [&]() -> Tensor {
    RevinState st;
    Tensor y = revin_normalize(x, a, st);
    Tensor back = revin_denormalize(y, a, st);
    Tensor d = sub(add(y, back), target);
    return sum(mul(d, d));
  };
  auto check = oracle::check_gradients(forward,
                                       {{"gain", a.gain}, {"bias", a.bias}});
  INFO("worst: ", check.worst, " err=", check.max_err);
  CHECK(check.ok(1e-4));
}

TEST_CASE("revin: denormalize without captured stats is a usage error") {
  RevinAffine a = identity_affine(2);
  RevinState st;
  Tensor y = Tensor::zeros({1, 4, 2});
  CHECK_THROWS_AS(revin_denormalize(y, a, st), UsageError);
}

TEST_CASE("patching: pinned count for 96/16/8 and content vs oracle") {
  PatchConfig cfg{96, 16, 8};
  CHECK(cfg.patch_count() == 11);

  Rng rng(9);
  PatchConfig small{20, 6, 4};
  CHECK(small.patch_count() == 4);
  Index B = 2, N = 3;
  Tensor x = Tensor::randn({B, small.lookback, N}, rng);
  Tensor p = make_patches(x, small);
  REQUIRE(p.shape() == Shape{B * N, 4, 6});
  for (Index b = 0; b < B; ++b) {
    for (Index n = 0; n < N; ++n) {
      for (Index i = 0; i < 4; ++i) {
        for (Index t = 0; t < 6; ++t) {
          CHECK(p.at({b * N + n, i, t}) ==
                x.at({b, i * small.stride + t, n}));
        }
      }
    }
  }
}

TEST_CASE("patching: stride == patch_len tiles the window exactly") {
  PatchConfig cfg{24, 6, 6};
  CHECK(cfg.patch_count() == 4);
  Rng rng(3);
  Tensor x = Tensor::randn({1, 24, 1}, rng);
  Tensor p = make_patches(x, cfg);
  for (Index i = 0; i < 4; ++i) {
    for (Index t = 0; t < 6; ++t) {
      CHECK(p.at({0, i, t}) == x.at({0, i * 6 + t, 0}));
    }
  }
}

TEST_CASE("patching: config validation names offending values") {
  CHECK_THROWS_AS((PatchConfig{10, 16, 8}.validate()), ConfigError);
  CHECK_THROWS_AS((PatchConfig{10, 4, 0}.validate()), ConfigError);
  try {
    PatchConfig{10, 16, 8}.validate();
  } catch (const ConfigError& e) {
    std::string m = e.what();
    CHECK(m.find("16") != std::string::npos);
    CHECK(m.find("10") != std::string::npos);
  }
}

TEST_CASE("embedding: pinned shape (14, 11, 64) and linear content") {
  Rng rng(21);
  PatchConfig cfg{96, 16, 8};
  Tensor x = Tensor::randn({2, 96, 7}, rng);
  Tensor p = make_patches(x, cfg);
  Tensor w = Tensor::randn({16, 64}, rng, 0.1);
  Tensor b = Tensor::randn({64}, rng, 0.1);
  Tensor pos = Tensor::randn({11, 64}, rng, 0.1);
  Tensor tok = embed_patches(p, w, b, pos);
  REQUIRE(tok.shape() == Shape{14, 11, 64});

  // spot-check one row against the brute-force projection
  std::vector<double> patch_row(16), col(64);
  for (int t = 0; t < 16; ++t) patch_row[t] = p.at({5, 3, t});
  for (int d = 0; d < 64; ++d) {
    double acc = 0;
    for (int t = 0; t < 16; ++t) acc += patch_row[t] * w.at({t, d});
    acc += b.at({d}) + pos.at({3, d});
    CHECK(tok.at({5, 3, d}) == doctest::Approx(acc).epsilon(1e-9));
  }
}

TEST_CASE("windows: pinned 409 train windows for 1000 steps at 6:2:2") {
  auto oracle_counts = count_windows_oracle(1000, 96, 96, 6, 2, 2);
  CHECK(oracle_counts.train == 409);  // independent enumeration

  auto ds = WindowedDataset::build(ramp_series(1000, 2), 96, 96,
                                   SplitRatios{6, 2, 2});
  CHECK(ds.n_train() == 600);
  CHECK(ds.window_count(Split::Train) == 409);
  CHECK(ds.window_count(Split::Val) == oracle_counts.val);
  CHECK(ds.window_count(Split::Test) == oracle_counts.test);
}

TEST_CASE("windows: counts match the enumeration oracle across geometries") {
  Rng rng(13);
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    Index T = 200 + static_cast<Index>(rng.below(1200));
    Index L = 8 + static_cast<Index>(rng.below(48));
    Index H = 4 + static_cast<Index>(rng.below(48));
    bool ett = rng.uniform() < 0.5;
    SplitRatios r = ett ? SplitRatios{6, 2, 2} : SplitRatios{7, 1, 2};
    auto o = count_windows_oracle(T, L, H, r.train, r.val, r.test);
    if (o.train <= 0 || o.val <= 0 || o.test <= 0) continue;
    auto ds = WindowedDataset::build(ramp_series(T, 1), L, H, r);
    CHECK(ds.window_count(Split::Train) == o.train);
    CHECK(ds.window_count(Split::Val) == o.val);
    CHECK(ds.window_count(Split::Test) == o.test);
    ++checked;
  }
  CHECK(checked > 20);
}

TEST_CASE("windows: split targets stay out of other regions") {
  auto ds = WindowedDataset::build(ramp_series(500, 1), 24, 12,
                                   SplitRatios{6, 2, 2});
  Index L = 24, H = 12;
  // max index touched by any train window < first val target index
  Index train_last = ds.window_start(Split::Train,
                                     ds.window_count(Split::Train) - 1);
  CHECK(train_last + L + H <= ds.n_train());
  Index val_first = ds.window_start(Split::Val, 0);
  CHECK(val_first + L == ds.n_train());  // first val target right at border
  Index test_first = ds.window_start(Split::Test, 0);
  CHECK(test_first + L == ds.n_train() + ds.n_val());
  Index test_last = ds.window_start(Split::Test,
                                    ds.window_count(Split::Test) - 1);
  CHECK(test_last + L + H == 500);
}

TEST_CASE("windows: few-shot fraction restricts a contiguous train prefix") {
  auto full = WindowedDataset::build(ramp_series(1000, 1), 48, 24,
                                     SplitRatios{7, 1, 2}, 1.0);
  auto tenth = WindowedDataset::build(ramp_series(1000, 1), 48, 24,
                                      SplitRatios{7, 1, 2}, 0.3);
  CHECK(tenth.effective_train() == 210);
  CHECK(tenth.window_count(Split::Train) <
        full.window_count(Split::Train));
  // identical at fraction 1.0
  CHECK(full.effective_train() == full.n_train());
  // monotone in the fraction
  Index prev = 0;
  for (double f : {0.2, 0.4, 0.6, 0.8, 1.0}) {
    auto ds = WindowedDataset::build(ramp_series(1000, 1), 48, 24,
                                     SplitRatios{7, 1, 2}, f);
    CHECK(ds.window_count(Split::Train) >= prev);
    prev = ds.window_count(Split::Train);
  }
  // val and test are untouched by the restriction
  CHECK(tenth.window_count(Split::Test) == full.window_count(Split::Test));
  CHECK(tenth.window_count(Split::Val) == full.window_count(Split::Val));
}

TEST_CASE("windows: an unachievable split raises a config error") {
  CHECK_THROWS_AS(WindowedDataset::build(ramp_series(100, 1), 48, 48,
                                         SplitRatios{6, 2, 2}),
                  ConfigError);
  // few-shot fraction cutting the train region below L+H
  CHECK_THROWS_AS(WindowedDataset::build(ramp_series(400, 1), 48, 24,
                                         SplitRatios{6, 2, 2}, 0.05),
                  ConfigError);
}

TEST_CASE("windows: z-score statistics come from the visible train region") {
  Index T = 400, L = 24, H = 8;
  auto series = ramp_series(T, 2);
  auto ds = WindowedDataset::build(series, L, H, SplitRatios{6, 2, 2});
  Index R = ds.effective_train();
  for (Index n = 0; n < 2; ++n) {
    double m = 0;
    for (Index t = 0; t < R; ++t) m += series.value(t, n);
    m /= static_cast<double>(R);
    CHECK(ds.scale_mean()[static_cast<std::size_t>(n)] ==
          doctest::Approx(m).epsilon(1e-12));
  }
  // a batch value equals (raw - mean)/std
  std::vector<Index> ids = {0};
  auto batch = ds.make_batch(Split::Test, ids);
  Index start = ds.window_start(Split::Test, 0);
  double expect = (series.value(start, 1) - ds.scale_mean()[1]) /
                  ds.scale_std()[1];
  CHECK(batch.x.at({0, 0, 1}) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(batch.y.shape() == Shape{1, H, 2});

  // toggled off: raw values pass through
  auto raw_ds = WindowedDataset::build(series, L, H, SplitRatios{6, 2, 2},
                                       1.0, /*z_score=*/false);
  auto raw_batch = raw_ds.make_batch(Split::Test, ids);
  CHECK(raw_batch.x.at({0, 0, 1}) ==
        doctest::Approx(series.value(start, 1)).epsilon(1e-12));
}

TEST_CASE("windows: raw history and timestamps for prompt rendering") {
  auto series = ramp_series(300, 2);
  auto ds = WindowedDataset::build(series, 16, 8, SplitRatios{6, 2, 2});
  auto hist = ds.raw_history(Split::Train, 3, 1);
  REQUIRE(hist.size() == 16);
  CHECK(hist[0] == doctest::Approx(series.value(3, 1)));
  CHECK(hist[15] == doctest::Approx(series.value(18, 1)));
  auto [first, last] = ds.history_timestamps(Split::Train, 3);
  CHECK(first == "t3");
  CHECK(last == "t18");
}

TEST_CASE("csv: round trip with custom delimiter and error reporting") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "timesaf_csv_test";
  fs::create_directories(dir);

  auto good = dir / "good.csv";
  {
    std::ofstream f(good);
    f << "date;load;temp\n";
    f << "2016-07-01 00:00;1.5;-3.25\n";
    f << "2016-07-01 01:00;2.5;4.5\n";
  }
  SeriesData s = load_csv(good.string(), ';');
  CHECK(s.steps == 2);
  CHECK(s.channels == 2);
  CHECK(s.channel_names[0] == "load");
  CHECK(s.timestamps[1] == "2016-07-01 01:00");
  CHECK(s.value(0, 1) == doctest::Approx(-3.25));
  CHECK(s.value(1, 0) == doctest::Approx(2.5));

  auto bad = dir / "bad.csv";
  {
    std::ofstream f(bad);
    f << "date,a,b\n";
    f << "0,1.0,2.0\n";
    f << "1,oops,3.0\n";
  }
  try {
    load_csv(bad.string());
    FAIL("expected IoError");
  } catch (const IoError& e) {
    std::string m = e.what();
    CHECK(m.find("row 3") != std::string::npos);
    CHECK(m.find("column 2") != std::string::npos);
    CHECK(m.find("oops") != std::string::npos);
  }

  auto ragged = dir / "ragged.csv";
  {
    std::ofstream f(ragged);
    f << "date,a,b\n";
    f << "0,1.0\n";
  }
  CHECK_THROWS_AS(load_csv(ragged.string()), IoError);

  auto empty = dir / "empty.csv";
  { std::ofstream f(empty); }
  CHECK_THROWS_AS(load_csv(empty.string()), IoError);

  fs::remove_all(dir);
}
