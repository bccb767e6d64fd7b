#pragma once

// Text branch: per-variable prompt rendering, embedding providers, and the
// adaptation that turns frozen language-model embeddings into backbone
// tokens.
//
// Providers are deterministic functions of the exact prompt text. The stub
// derives a unit-norm vector from a hash of the text, the file provider
// looks the text's SHA-256 up in a binary container produced offline. Both
// satisfy the same contract, so swapping them never changes shapes.

#include <array>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "timesaf/tensor.hpp"

namespace timesaf {

enum class PromptVariant { Full, Domain, Timestamp, Instruction };

const char* prompt_variant_name(PromptVariant v);
PromptVariant parse_prompt_variant(const std::string& name);

struct PromptTemplateSpec {
  PromptVariant variant = PromptVariant::Full;
  std::string frequency = "1 hour";  // e.g. "15 minutes", "1 day"
  int precision = 3;                 // decimal places for rendered values
};

// Renders one variable's observation window. The full template reads
//   "From <t1> to <tn>, the values were <v1, ..., vn> every <f>.
//    The total trend value was <last - first>."
// The other variants emit only their clause: the numeric description
// (timestamp), a frequency-derived domain sentence (domain), or a fixed
// forecasting instruction (instruction).
std::string render_prompt(std::span<const double> values,
                          const std::string& first_time,
                          const std::string& last_time,
                          const PromptTemplateSpec& spec);

std::array<unsigned char, 32> sha256_bytes(const std::string& text);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual Index dim() const = 0;
  // Deterministic; identical text always yields the identical vector.
  virtual std::vector<real> embed(const std::string& text) const = 0;
};

class StubEmbedder : public EmbeddingProvider {
 public:
  StubEmbedder(Index dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  Index dim() const override { return dim_; }
  std::vector<real> embed(const std::string& text) const override;

 private:
  Index dim_;
  std::uint64_t seed_;
};

// Reads the whole container eagerly; lookups are by SHA-256 of the text.
class FileEmbedder : public EmbeddingProvider {
 public:
  explicit FileEmbedder(const std::string& path);
  Index dim() const override { return dim_; }
  std::vector<real> embed(const std::string& text) const override;

 private:
  std::string path_;
  Index dim_ = 0;
  std::unordered_map<std::string, std::vector<real>> table_;
};

// Writes the binary container the FileEmbedder reads: a header with the
// embedding width and entry count, then (32-byte text hash, float64 values)
// records. Duplicate texts keep their first occurrence.
void write_embedding_file(
    const std::string& path, Index dim,
    std::span<const std::pair<std::string, std::vector<real>>> entries);

// One window's per-variable prompt texts -> (D_llm, N): column n is the
// provider's embedding of texts[n].
Tensor embed_prompts(const std::vector<std::string>& texts,
                     const EmbeddingProvider& provider);

// E (D_llm, N) -> (B*N, 1, D): linear adaptation plus a per-variable
// positional embedding, replicated across the batch so each variable
// contributes one token aligned with the temporal branch's batch rows.
Tensor adapt_semantics(const Tensor& E, const Tensor& adapter_w,
                       const Tensor& adapter_b, const Tensor& pos,
                       Index batch);

// Per-sample version: rows (B*N, D_llm) hold each sample's own prompt
// embeddings in b*N+n order. Coincides with adapt_semantics when all
// samples share one E.
Tensor adapt_semantics_rows(const Tensor& rows, const Tensor& adapter_w,
                            const Tensor& adapter_b, const Tensor& pos,
                            Index channels);

}  // namespace timesaf
