#pragma once

// Named parameter registry with Adam state and a binary checkpoint format.
//
// Parameters live in insertion order so that every walk over the store —
// optimizer steps, L2 sums, serialization — is deterministic for a given
// construction sequence. Lookups go through a side index.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "timesaf/tensor.hpp"

namespace timesaf {

struct AdamConfig {
  real lr = 1e-3;
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
  // Weight decay coefficient for an L2 penalty of alpha * sum(theta^2):
  // realized inside adam_step by adding 2*alpha*theta to the gradient.
  real weight_decay = 0.0;
};

class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    std::vector<real> m, v;  // Adam moments, lazily sized
    std::int64_t step = 0;
  };

  AdamConfig adam;

  // Registers and returns the parameter; the tensor is marked as a leaf
  // requiring gradients. Duplicate names are a configuration error.
  Tensor create(const std::string& name, Tensor init);
  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const { return entries_.size(); }

  void zero_grads();
  double l2_sum() const;  // sum(theta^2) over every parameter

  // One Adam update over all parameters with bias correction. Parameters
  // whose gradient buffer was never touched are skipped; the return value
  // counts them so training loops can surface the warning.
  int adam_step();

  // Copies values for every name present in both stores; returns how many
  // parameters were copied.
  int copy_common_values(const ParameterStore& from);

  // Value snapshot/restore, used to keep the best validation weights.
  std::vector<std::vector<real>> export_values() const;
  void import_values(const std::vector<std::vector<real>>& values);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Binary checkpoint: header (magic, version, config hash, seed, config
// text), then name/shape/float64 payload per parameter in store order.
// Values are written as little-endian 64-bit floats regardless of the
// build's storage precision.
struct CheckpointInfo {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string config_text;
};

void save_checkpoint(const std::string& path, const ParameterStore& store,
                     const CheckpointInfo& info);
// Reads header only; used to rebuild a model before loading values.
CheckpointInfo peek_checkpoint(const std::string& path);
// Loads values into an existing store; every name and shape must match.
CheckpointInfo load_checkpoint(const std::string& path, ParameterStore& store);

}  // namespace timesaf
