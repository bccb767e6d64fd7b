#include "timesaf/prompts.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "timesaf/rng.hpp"

namespace timesaf {

const char* prompt_variant_name(PromptVariant v) {
  switch (v) {
    case PromptVariant::Full: return "full";
    case PromptVariant::Domain: return "domain";
    case PromptVariant::Timestamp: return "timestamp";
    case PromptVariant::Instruction: return "instruction";
  }
  return "?";
}

PromptVariant parse_prompt_variant(const std::string& name) {
  if (name == "full") return PromptVariant::Full;
  if (name == "domain") return PromptVariant::Domain;
  if (name == "timestamp") return PromptVariant::Timestamp;
  if (name == "instruction") return PromptVariant::Instruction;
  throw ConfigError("unknown prompt variant '" + name +
                    "' (full|domain|timestamp|instruction)");
}

std::string render_prompt(std::span<const double> values,
                          const std::string& first_time,
                          const std::string& last_time,
                          const PromptTemplateSpec& spec) {
  if (spec.precision < 0 || spec.precision > 17) {
    throw ConfigError("prompt precision " + std::to_string(spec.precision) +
                      " outside [0, 17]");
  }
  switch (spec.variant) {
    case PromptVariant::Domain:
      return "This series records observations sampled every " +
             spec.frequency + ".";
    case PromptVariant::Instruction:
      return "Given the historical observations, forecast the future values "
             "of this series.";
    case PromptVariant::Full:
    case PromptVariant::Timestamp:
      break;
  }
  if (values.empty()) {
    throw UsageError("render_prompt: empty observation window");
  }
  std::string joined;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) joined += ", ";
    joined += format_real(values[i], spec.precision);
  }
  std::string text = "From " + first_time + " to " + last_time +
                     ", the values were " + joined + " every " +
                     spec.frequency + ".";
  if (spec.variant == PromptVariant::Full) {
    double trend = values.back() - values.front();
    text += " The total trend value was " +
            format_real(trend, spec.precision) + ".";
  }
  return text;
}

std::array<unsigned char, 32> sha256_bytes(const std::string& text) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(),
                 nullptr) != 1 ||
      len != out.size()) {
    throw Error("sha256 digest failed");
  }
  return out;
}

std::vector<real> StubEmbedder::embed(const std::string& text) const {
  auto h = sha256_bytes(text);
  std::uint64_t key = fnv1a64(&seed_, sizeof(seed_));
  key = fnv1a64(h.data(), h.size(), key);
  Rng rng(key);
  std::vector<real> v(static_cast<std::size_t>(dim_));
  double norm2 = 0;
  for (auto& x : v) {
    double z = rng.normal();
    x = static_cast<real>(z);
    norm2 += z * z;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x = static_cast<real>(x * inv);
  return v;
}

namespace {

constexpr char kEmbMagic[4] = {'T', 'S', 'E', 'B'};
constexpr std::uint32_t kEmbVersion = 1;

std::string hash_key(const std::array<unsigned char, 32>& h) {
  return std::string(reinterpret_cast<const char*>(h.data()), h.size());
}

}  // namespace

FileEmbedder::FileEmbedder(const std::string& path) : path_(path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open embedding file '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kEmbMagic, 4) != 0) {
    throw IoError("embedding file '" + path + "': bad magic");
  }
  std::uint32_t version = 0, dim = 0;
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!f || version != kEmbVersion) {
    throw IoError("embedding file '" + path + "': unsupported layout");
  }
  if (dim == 0) {
    throw IoError("embedding file '" + path + "': zero embedding width");
  }
  dim_ = static_cast<Index>(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::array<unsigned char, 32> h{};
    f.read(reinterpret_cast<char*>(h.data()), h.size());
    std::vector<double> raw(dim);
    f.read(reinterpret_cast<char*>(raw.data()),
           static_cast<std::streamsize>(dim * sizeof(double)));
    if (!f) {
      throw IoError("embedding file '" + path + "': truncated at entry " +
                    std::to_string(i));
    }
    std::vector<real> v(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
      v[j] = static_cast<real>(raw[j]);
    }
    table_.emplace(hash_key(h), std::move(v));
  }
}

std::vector<real> FileEmbedder::embed(const std::string& text) const {
  auto it = table_.find(hash_key(sha256_bytes(text)));
  if (it == table_.end()) {
    std::string preview = text.substr(0, 60);
    if (text.size() > 60) preview += "...";
    throw IoError("embedding file '" + path_ + "' has no entry for \"" +
                  preview + "\"; regenerate it from the exported prompts");
  }
  return it->second;
}

void write_embedding_file(
    const std::string& path, Index dim,
    std::span<const std::pair<std::string, std::vector<real>>> entries) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  std::vector<std::pair<std::array<unsigned char, 32>, const std::vector<real>*>>
      rows;
  std::unordered_map<std::string, bool> seen;
  for (const auto& [text, vec] : entries) {
    if (static_cast<Index>(vec.size()) != dim) {
      throw UsageError("embedding for \"" + text.substr(0, 40) + "\" has " +
                       std::to_string(vec.size()) + " values, expected " +
                       std::to_string(dim));
    }
    auto h = sha256_bytes(text);
    if (!seen.emplace(hash_key(h), true).second) continue;
    rows.emplace_back(h, &vec);
  }
  f.write(kEmbMagic, 4);
  std::uint32_t version = kEmbVersion;
  std::uint32_t d32 = static_cast<std::uint32_t>(dim);
  std::uint64_t count = rows.size();
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&d32), sizeof(d32));
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [h, vec] : rows) {
    f.write(reinterpret_cast<const char*>(h.data()),
            static_cast<std::streamsize>(h.size()));
    for (real v : *vec) {
      double dv = static_cast<double>(v);
      f.write(reinterpret_cast<const char*>(&dv), sizeof(dv));
    }
  }
  if (!f) throw IoError("write failure on '" + path + "'");
}

Tensor embed_prompts(const std::vector<std::string>& texts,
                     const EmbeddingProvider& provider) {
  if (texts.empty()) throw UsageError("embed_prompts: no prompt texts");
  Index D = provider.dim();
  Index N = static_cast<Index>(texts.size());
  std::vector<real> out(static_cast<std::size_t>(D * N));
  for (Index n = 0; n < N; ++n) {
    auto v = provider.embed(texts[static_cast<std::size_t>(n)]);
    if (static_cast<Index>(v.size()) != D) {
      throw Error("embedding provider returned " + std::to_string(v.size()) +
                  " values, declared width is " + std::to_string(D));
    }
    for (Index d = 0; d < D; ++d) {
      out[static_cast<std::size_t>(d * N + n)] =
          v[static_cast<std::size_t>(d)];
    }
  }
  return Tensor::from_data({D, N}, std::move(out));
}

namespace {

void check_adapter(const Tensor& w, const Tensor& b, const Tensor& pos,
                   Index d_llm) {
  if (w.ndim() != 2 || w.dim(0) != d_llm) {
    throw ShapeError("semantic adapter " + shape_str(w.shape()) +
                     " does not accept embedding width " +
                     std::to_string(d_llm));
  }
  if (b.size() != w.dim(1)) {
    throw ShapeError("semantic adapter bias " + shape_str(b.shape()) +
                     " for width " + std::to_string(w.dim(1)));
  }
  if (pos.ndim() != 2 || pos.dim(1) != w.dim(1)) {
    throw ShapeError("variable positional table " + shape_str(pos.shape()) +
                     " for width " + std::to_string(w.dim(1)));
  }
}

}  // namespace

Tensor adapt_semantics(const Tensor& E, const Tensor& adapter_w,
                       const Tensor& adapter_b, const Tensor& pos,
                       Index batch) {
  if (E.ndim() != 2) {
    throw ShapeError("adapt_semantics: embeddings " + shape_str(E.shape()) +
                     ", expected (width, variables)");
  }
  Index d_llm = E.dim(0), N = E.dim(1);
  check_adapter(adapter_w, adapter_b, pos, d_llm);
  if (pos.dim(0) != N) {
    throw ShapeError("adapt_semantics: positional table " +
                     shape_str(pos.shape()) + " for " + std::to_string(N) +
                     " variables");
  }
  if (batch < 1) throw UsageError("adapt_semantics: batch must be positive");
  Index D = adapter_w.dim(1);
  Tensor per_var = add(add(matmul(transpose_last2(E), adapter_w), adapter_b),
                       pos);  // (N, D)
  auto idx = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(batch * N * D));
  std::size_t w = 0;
  for (Index b = 0; b < batch; ++b) {
    for (Index n = 0; n < N; ++n) {
      for (Index d = 0; d < D; ++d) (*idx)[w++] = n * D + d;
    }
  }
  return take(per_var, std::move(idx), {batch * N, 1, D});
}

Tensor adapt_semantics_rows(const Tensor& rows, const Tensor& adapter_w,
                            const Tensor& adapter_b, const Tensor& pos,
                            Index channels) {
  if (rows.ndim() != 2) {
    throw ShapeError("adapt_semantics_rows: " + shape_str(rows.shape()) +
                     ", expected (batch*variables, width)");
  }
  Index BN = rows.dim(0), d_llm = rows.dim(1);
  check_adapter(adapter_w, adapter_b, pos, d_llm);
  if (channels < 1 || BN % channels != 0) {
    throw ShapeError("adapt_semantics_rows: " + std::to_string(BN) +
                     " rows not divisible by " + std::to_string(channels) +
                     " variables");
  }
  if (pos.dim(0) != channels) {
    throw ShapeError("adapt_semantics_rows: positional table " +
                     shape_str(pos.shape()) + " for " +
                     std::to_string(channels) + " variables");
  }
  Index D = adapter_w.dim(1);
  Tensor mapped = add(matmul(rows, adapter_w), adapter_b);  // (B*N, D)
  auto idx = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(BN * D));
  std::size_t w = 0;
  for (Index r = 0; r < BN; ++r) {
    Index n = r % channels;
    for (Index d = 0; d < D; ++d) (*idx)[w++] = n * D + d;
  }
  Tensor pos_rows = take(pos, std::move(idx), {BN, D});
  return reshape(add(mapped, pos_rows), {BN, 1, D});
}

}  // namespace timesaf
