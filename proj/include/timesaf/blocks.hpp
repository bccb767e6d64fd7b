#pragma once

// Transformer-style building blocks shared by the two backbones and the
// fusion trunk: multi-head attention with internal input normalization, a
// position-wise feed-forward network, and the three composite blocks
// (unimodal encoding, fusion over learnable queries, gated semantic
// refinement). Blocks are pure functions of (inputs, parameters): safe to
// evaluate concurrently between optimizer steps.

#include <string>

#include "timesaf/params.hpp"
#include "timesaf/tensor.hpp"

namespace timesaf {

struct BlockConfig {
  Index width = 64;         // D: backbone model width
  Index fusion_width = 64;  // D_f: fusion-trunk width (queries and memory)
  Index heads = 4;          // h: attention heads
  Index ffn_expansion = 4;  // FFN hidden width multiplier
  bool pre_norm = true;     // normalize attention/FFN inputs

  Index head_dim() const { return width / heads; }
  void validate() const;
};

// Parameter bundle for one attention operation. The kv-side norm is present
// only for cross-attention; self-attention shares the query norm. Projection
// shapes: w_q (d_q, d_attn), w_k/w_v (d_kv, d_attn), w_o (d_attn, d_out).
struct AttentionParams {
  Tensor norm_q_g, norm_q_b;
  Tensor norm_kv_g, norm_kv_b;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Index heads = 1;

  bool has_kv_norm() const { return norm_kv_g.defined(); }
};

struct FfnParams {
  Tensor norm_g, norm_b;
  Tensor w1, b1, w2, b2;
};

// Per-modality linear map applied to retrieved memory, scaled by the
// sigmoid of a scalar gate that is shared across modalities within a layer.
// An undefined gate fixes the scale to 1 (the ungated ablation).
struct GatedAdapter {
  Tensor w;     // (fusion_width, width)
  Tensor b;     // (width)
  Tensor gate;  // scalar; shared handle across the layer's adapters
};

struct UnimodalParams {
  AttentionParams attn;
  FfnParams ffn;
};

struct FusionParams {
  AttentionParams query_self;
  AttentionParams cross_time;
  AttentionParams cross_text;
  FfnParams ffn;
};

struct RefineParams {
  AttentionParams self_attn;
  AttentionParams cross_mem;
  FfnParams ffn;
};

// Builders register every tensor in the store under "<prefix>." names so
// checkpoints are stable and optimizers see each block exactly once.
AttentionParams make_self_attention(ParameterStore& ps,
                                    const std::string& prefix, Index d,
                                    Index heads, Rng& rng);
AttentionParams make_cross_attention(ParameterStore& ps,
                                     const std::string& prefix, Index d_q,
                                     Index d_kv, Index d_attn, Index d_out,
                                     Index heads, Rng& rng);
FfnParams make_ffn(ParameterStore& ps, const std::string& prefix, Index d,
                   Index expansion, Rng& rng);
UnimodalParams make_unimodal_block(ParameterStore& ps,
                                   const std::string& prefix,
                                   const BlockConfig& cfg, Rng& rng);
FusionParams make_fusion_block(ParameterStore& ps, const std::string& prefix,
                               const BlockConfig& cfg, Rng& rng);
RefineParams make_refine_block(ParameterStore& ps, const std::string& prefix,
                               const BlockConfig& cfg, Rng& rng);
// The scalar gate, initialized to 0 so the sigmoid starts at 1/2.
Tensor make_refine_gate(ParameterStore& ps, const std::string& name);
GatedAdapter make_gated_adapter(ParameterStore& ps, const std::string& prefix,
                                const BlockConfig& cfg,
                                const Tensor& shared_gate, Rng& rng);

// Writes attention maps for offline inspection. Each emitted map is the
// batch- and head-averaged (t_q, t_k) matrix, stored as <dir>/<name>.csv.
class AttentionTraceSink {
 public:
  AttentionTraceSink() = default;
  explicit AttentionTraceSink(std::string dir) : dir_(std::move(dir)) {}

  bool enabled() const { return !dir_.empty(); }
  void emit(const std::string& name, const Tensor& attn) const;

 private:
  std::string dir_;
};

struct AttentionResult {
  Tensor out;   // (b, t_q, d_out)
  Tensor attn;  // (b, heads, t_q, t_k); rows sum to 1
};

// Scaled dot-product multi-head attention with internal input
// normalization. Self-attention is the q == kv case (same handle).
AttentionResult multihead_attn(const Tensor& q, const Tensor& kv,
                               const AttentionParams& p, bool pre_norm = true);

// The feed-forward branch (norm, linear, GELU, linear); callers add the
// residual themselves.
Tensor ffn_forward(const Tensor& x, const FfnParams& p, bool pre_norm = true);

// Replicates a (P, D) table into (rows, P, D); all copies share the table's
// parameters, so gradients accumulate back onto it.
Tensor broadcast_rows(const Tensor& table, Index rows);

// U = H + SelfAttn(H); out = U + FFN(U).
Tensor unimodal_block(const Tensor& h, const UnimodalParams& p,
                      const BlockConfig& cfg,
                      const AttentionTraceSink* trace = nullptr,
                      const std::string& tag = "");

// Queries self-attend, then cross-attend into the time tokens and the text
// tokens in that order (each with a residual), then pass through the FFN.
// q_init: (B*N, P_f, D_f); h_time: (B*N, t_time, D); h_text: (B*N, t_text, D).
Tensor fusion_block(const Tensor& q_init, const Tensor& h_time,
                    const Tensor& h_text, const FusionParams& p,
                    const BlockConfig& cfg,
                    const AttentionTraceSink* trace = nullptr,
                    const std::string& tag = "");

// U = H + SelfAttn(H); Z = CrossAttn(U, memory); R = sigmoid(gate)·(Z·W+b);
// Ĥ = U + R; out = Ĥ + FFN(Ĥ).
Tensor refine_block(const Tensor& h, const Tensor& memory,
                    const GatedAdapter& adapter, const RefineParams& p,
                    const BlockConfig& cfg,
                    const AttentionTraceSink* trace = nullptr,
                    const std::string& tag = "");

}  // namespace timesaf
