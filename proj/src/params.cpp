#include "timesaf/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace timesaf {

Tensor ParameterStore::create(const std::string& name, Tensor init) {
  if (index_.count(name)) {
    throw ConfigError("parameter '" + name + "' registered twice");
  }
  init.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, init, {}, {}, 0});
  return init;
}

bool ParameterStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("unknown parameter '" + name + "'");
  }
  return entries_[it->second].value;
}

void ParameterStore::zero_grads() {
  for (auto& e : entries_) e.value.zero_grad();
}

double ParameterStore::l2_sum() const {
  double acc = 0;
  for (const auto& e : entries_) {
    for (real v : e.value.data()) acc += static_cast<double>(v) * v;
  }
  return acc;
}

int ParameterStore::adam_step() {
  int skipped = 0;
  for (auto& e : entries_) {
    if (!e.value.has_grad()) {
      ++skipped;
      continue;
    }
    auto theta = e.value.mutable_data();
    auto grad = e.value.mutable_grad();
    std::size_t n = theta.size();
    if (e.m.size() != n) {
      e.m.assign(n, real(0));
      e.v.assign(n, real(0));
    }
    ++e.step;
    real b1 = adam.beta1, b2 = adam.beta2;
    real corr1 = real(1) - std::pow(b1, static_cast<real>(e.step));
    real corr2 = real(1) - std::pow(b2, static_cast<real>(e.step));
    for (std::size_t i = 0; i < n; ++i) {
      real g = grad[i] + adam.weight_decay * real(2) * theta[i];
      e.m[i] = b1 * e.m[i] + (real(1) - b1) * g;
      e.v[i] = b2 * e.v[i] + (real(1) - b2) * g * g;
      real mhat = e.m[i] / corr1;
      real vhat = e.v[i] / corr2;
      theta[i] -= adam.lr * mhat / (std::sqrt(vhat) + adam.eps);
    }
    e.value.zero_grad();
  }
  return skipped;
}

int ParameterStore::copy_common_values(const ParameterStore& from) {
  int copied = 0;
  for (auto& e : entries_) {
    if (!from.contains(e.name)) continue;
    Tensor src = from.get(e.name);
    if (src.shape() != e.value.shape()) {
      throw ShapeError("copy_common_values: '" + e.name + "' is " +
                       shape_str(e.value.shape()) + " here but " +
                       shape_str(src.shape()) + " in the source store");
    }
    auto dst = e.value.mutable_data();
    auto s = src.data();
    std::copy(s.begin(), s.end(), dst.begin());
    ++copied;
  }
  return copied;
}

std::vector<std::vector<real>> ParameterStore::export_values() const {
  std::vector<std::vector<real>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    auto d = e.value.data();
    out.emplace_back(d.begin(), d.end());
  }
  return out;
}

void ParameterStore::import_values(const std::vector<std::vector<real>>& values) {
  if (values.size() != entries_.size()) {
    throw UsageError("import_values: " + std::to_string(values.size()) +
                     " value blocks for " + std::to_string(entries_.size()) +
                     " parameters");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].value.mutable_data();
    if (values[i].size() != dst.size()) {
      throw UsageError("import_values: size mismatch on '" +
                       entries_[i].name + "'");
    }
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

// ----------------------------------------------------------- checkpoints --

namespace {

constexpr char kMagic[4] = {'T', 'S', 'A', 'F'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw IoError("checkpoint '" + path + "': truncated");
  return v;
}

void write_string(std::ofstream& f, const std::string& s) {
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& f, const std::string& path) {
  auto n = read_pod<std::uint32_t>(f, path);
  std::string s(n, '\0');
  f.read(s.data(), n);
  if (!f) throw IoError("checkpoint '" + path + "': truncated");
  return s;
}

CheckpointInfo read_header(std::ifstream& f, const std::string& path) {
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("checkpoint '" + path + "': bad magic");
  }
  auto version = read_pod<std::uint32_t>(f, path);
  if (version != kVersion) {
    throw IoError("checkpoint '" + path + "': unsupported version " +
                  std::to_string(version));
  }
  CheckpointInfo info;
  info.config_hash = read_pod<std::uint64_t>(f, path);
  info.seed = read_pod<std::uint64_t>(f, path);
  info.config_text = read_string(f, path);
  return info;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParameterStore& store,
                     const CheckpointInfo& info) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(kMagic, 4);
  write_pod<std::uint32_t>(f, kVersion);
  write_pod<std::uint64_t>(f, info.config_hash);
  write_pod<std::uint64_t>(f, info.seed);
  write_string(f, info.config_text);
  write_pod<std::uint64_t>(f, static_cast<std::uint64_t>(store.count()));
  for (const auto& e : store.entries()) {
    write_string(f, e.name);
    const Shape& s = e.value.shape();
    write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(s.size()));
    for (Index d : s) write_pod<std::int64_t>(f, d);
    for (real v : e.value.data()) {
      write_pod<double>(f, static_cast<double>(v));
    }
  }
  if (!f) throw IoError("write failure on '" + path + "'");
}

CheckpointInfo peek_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  return read_header(f, path);
}

CheckpointInfo load_checkpoint(const std::string& path,
                               ParameterStore& store) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  CheckpointInfo info = read_header(f, path);
  auto count = read_pod<std::uint64_t>(f, path);
  if (count != store.count()) {
    throw IoError("checkpoint '" + path + "': holds " +
                  std::to_string(count) + " parameters, store expects " +
                  std::to_string(store.count()));
  }
  for (const auto& e : store.entries()) {
    std::string name = read_string(f, path);
    if (name != e.name) {
      throw IoError("checkpoint '" + path + "': parameter '" + name +
                    "' where '" + e.name + "' was expected");
    }
    auto ndim = read_pod<std::uint32_t>(f, path);
    Shape s(ndim);
    for (auto& d : s) d = read_pod<std::int64_t>(f, path);
    if (s != e.value.shape()) {
      throw IoError("checkpoint '" + path + "': '" + name + "' has shape " +
                    shape_str(s) + ", store expects " +
                    shape_str(e.value.shape()));
    }
    Tensor t = e.value;  // shared handle
    auto dst = t.mutable_data();
    for (auto& v : dst) v = static_cast<real>(read_pod<double>(f, path));
  }
  return info;
}

}  // namespace timesaf
