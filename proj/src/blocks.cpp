#include "timesaf/blocks.hpp"

#include <cmath>
#include <fstream>

namespace timesaf {

void BlockConfig::validate() const {
  if (width < 1 || fusion_width < 1 || heads < 1 || ffn_expansion < 1) {
    throw ConfigError("block config values must be positive");
  }
  if (width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) +
                      " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (fusion_width % heads != 0) {
    throw ConfigError("fusion width " + std::to_string(fusion_width) +
                      " not divisible by " + std::to_string(heads) +
                      " heads");
  }
}

namespace {

constexpr real kInitStd = real(0.02);

Tensor linear_weight(ParameterStore& ps, const std::string& name, Index in,
                     Index out, Rng& rng) {
  return ps.create(name, Tensor::truncated_normal({in, out}, rng, kInitStd));
}

Tensor zero_bias(ParameterStore& ps, const std::string& name, Index n) {
  return ps.create(name, Tensor::zeros({n}));
}

void make_projections(ParameterStore& ps, const std::string& prefix,
                      Index d_q, Index d_kv, Index d_attn, Index d_out,
                      Rng& rng, AttentionParams& p) {
  p.w_q = linear_weight(ps, prefix + ".w_q", d_q, d_attn, rng);
  p.b_q = zero_bias(ps, prefix + ".b_q", d_attn);
  p.w_k = linear_weight(ps, prefix + ".w_k", d_kv, d_attn, rng);
  p.b_k = zero_bias(ps, prefix + ".b_k", d_attn);
  p.w_v = linear_weight(ps, prefix + ".w_v", d_kv, d_attn, rng);
  p.b_v = zero_bias(ps, prefix + ".b_v", d_attn);
  p.w_o = linear_weight(ps, prefix + ".w_o", d_attn, d_out, rng);
  p.b_o = zero_bias(ps, prefix + ".b_o", d_out);
}

Tensor norm_gain(ParameterStore& ps, const std::string& name, Index d) {
  return ps.create(name, Tensor::full({d}, real(1)));
}

}  // namespace

AttentionParams make_self_attention(ParameterStore& ps,
                                    const std::string& prefix, Index d,
                                    Index heads, Rng& rng) {
  if (d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  AttentionParams p;
  p.heads = heads;
  p.norm_q_g = norm_gain(ps, prefix + ".norm.g", d);
  p.norm_q_b = zero_bias(ps, prefix + ".norm.b", d);
  make_projections(ps, prefix, d, d, d, d, rng, p);
  return p;
}

AttentionParams make_cross_attention(ParameterStore& ps,
                                     const std::string& prefix, Index d_q,
                                     Index d_kv, Index d_attn, Index d_out,
                                     Index heads, Rng& rng) {
  if (d_attn % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d_attn) +
                      " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  AttentionParams p;
  p.heads = heads;
  p.norm_q_g = norm_gain(ps, prefix + ".norm_q.g", d_q);
  p.norm_q_b = zero_bias(ps, prefix + ".norm_q.b", d_q);
  p.norm_kv_g = norm_gain(ps, prefix + ".norm_kv.g", d_kv);
  p.norm_kv_b = zero_bias(ps, prefix + ".norm_kv.b", d_kv);
  make_projections(ps, prefix, d_q, d_kv, d_attn, d_out, rng, p);
  return p;
}

FfnParams make_ffn(ParameterStore& ps, const std::string& prefix, Index d,
                   Index expansion, Rng& rng) {
  FfnParams p;
  Index hidden = d * expansion;
  p.norm_g = norm_gain(ps, prefix + ".norm.g", d);
  p.norm_b = zero_bias(ps, prefix + ".norm.b", d);
  p.w1 = linear_weight(ps, prefix + ".w1", d, hidden, rng);
  p.b1 = zero_bias(ps, prefix + ".b1", hidden);
  p.w2 = linear_weight(ps, prefix + ".w2", hidden, d, rng);
  p.b2 = zero_bias(ps, prefix + ".b2", d);
  return p;
}

UnimodalParams make_unimodal_block(ParameterStore& ps,
                                   const std::string& prefix,
                                   const BlockConfig& cfg, Rng& rng) {
  cfg.validate();
  UnimodalParams p;
  p.attn = make_self_attention(ps, prefix + ".attn", cfg.width, cfg.heads, rng);
  p.ffn = make_ffn(ps, prefix + ".ffn", cfg.width, cfg.ffn_expansion, rng);
  return p;
}

FusionParams make_fusion_block(ParameterStore& ps, const std::string& prefix,
                               const BlockConfig& cfg, Rng& rng) {
  cfg.validate();
  FusionParams p;
  p.query_self = make_self_attention(ps, prefix + ".query_self",
                                     cfg.fusion_width, cfg.heads, rng);
  p.cross_time =
      make_cross_attention(ps, prefix + ".cross_time", cfg.fusion_width,
                           cfg.width, cfg.fusion_width, cfg.fusion_width,
                           cfg.heads, rng);
  p.cross_text =
      make_cross_attention(ps, prefix + ".cross_text", cfg.fusion_width,
                           cfg.width, cfg.fusion_width, cfg.fusion_width,
                           cfg.heads, rng);
  p.ffn = make_ffn(ps, prefix + ".ffn", cfg.fusion_width, cfg.ffn_expansion,
                   rng);
  return p;
}

RefineParams make_refine_block(ParameterStore& ps, const std::string& prefix,
                               const BlockConfig& cfg, Rng& rng) {
  cfg.validate();
  RefineParams p;
  p.self_attn =
      make_self_attention(ps, prefix + ".attn", cfg.width, cfg.heads, rng);
  p.cross_mem = make_cross_attention(ps, prefix + ".cross_mem", cfg.width,
                                     cfg.fusion_width, cfg.fusion_width,
                                     cfg.fusion_width, cfg.heads, rng);
  p.ffn = make_ffn(ps, prefix + ".ffn", cfg.width, cfg.ffn_expansion, rng);
  return p;
}

Tensor make_refine_gate(ParameterStore& ps, const std::string& name) {
  return ps.create(name, Tensor::zeros({1}));
}

GatedAdapter make_gated_adapter(ParameterStore& ps, const std::string& prefix,
                                const BlockConfig& cfg,
                                const Tensor& shared_gate, Rng& rng) {
  GatedAdapter a;
  a.w = linear_weight(ps, prefix + ".w", cfg.fusion_width, cfg.width, rng);
  a.b = zero_bias(ps, prefix + ".b", cfg.width);
  a.gate = shared_gate;
  return a;
}

void AttentionTraceSink::emit(const std::string& name,
                              const Tensor& attn) const {
  if (!enabled()) return;
  if (attn.ndim() != 4) {
    throw UsageError("attention trace expects a (b, h, t_q, t_k) map, got " +
                     shape_str(attn.shape()));
  }
  Index B = attn.dim(0), H = attn.dim(1), TQ = attn.dim(2), TK = attn.dim(3);
  std::vector<double> avg(static_cast<std::size_t>(TQ * TK), 0.0);
  auto d = attn.data();
  std::size_t off = 0;
  for (Index i = 0; i < B * H; ++i) {
    for (Index r = 0; r < TQ * TK; ++r) {
      avg[static_cast<std::size_t>(r)] += static_cast<double>(d[off++]);
    }
  }
  double inv = 1.0 / static_cast<double>(B * H);
  std::string path = dir_ + "/" + name + ".csv";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write attention trace '" + path + "'");
  for (Index r = 0; r < TQ; ++r) {
    for (Index c = 0; c < TK; ++c) {
      if (c) f << ',';
      f << format_real(avg[static_cast<std::size_t>(r * TK + c)] * inv, 9);
    }
    f << '\n';
  }
  if (!f) throw IoError("write failure on attention trace '" + path + "'");
}

namespace {

Tensor split_heads(const Tensor& x, Index heads) {
  Index b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  Index b = x.dim(0), h = x.dim(1), t = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * dh});
}

void maybe_emit(const AttentionTraceSink* trace, const std::string& tag,
                const std::string& direction, const Tensor& attn) {
  if (trace && trace->enabled() && !tag.empty()) {
    trace->emit(tag + "_" + direction, attn);
  }
}

}  // namespace

AttentionResult multihead_attn(const Tensor& q, const Tensor& kv,
                               const AttentionParams& p, bool pre_norm) {
  if (q.ndim() != 3 || kv.ndim() != 3) {
    throw ShapeError("attention expects (b, t, d) inputs, got " +
                     shape_str(q.shape()) + " and " + shape_str(kv.shape()));
  }
  if (q.dim(0) != kv.dim(0)) {
    throw ShapeError("attention batch rows disagree: " +
                     shape_str(q.shape()) + " vs " + shape_str(kv.shape()));
  }
  if (q.dim(2) != p.w_q.dim(0)) {
    throw ShapeError("query width " + std::to_string(q.dim(2)) +
                     " does not match projection " +
                     shape_str(p.w_q.shape()));
  }
  if (kv.dim(2) != p.w_k.dim(0)) {
    throw ShapeError("key/value width " + std::to_string(kv.dim(2)) +
                     " does not match projection " +
                     shape_str(p.w_k.shape()));
  }
  bool self = q.impl() == kv.impl();
  Tensor nq = pre_norm ? layernorm(q, p.norm_q_g, p.norm_q_b) : q;
  Tensor nkv = nq;
  if (!self) {
    if (p.has_kv_norm()) {
      nkv = pre_norm ? layernorm(kv, p.norm_kv_g, p.norm_kv_b) : kv;
    } else {
      nkv = pre_norm ? layernorm(kv, p.norm_q_g, p.norm_q_b) : kv;
    }
  }
  Index d_attn = p.w_q.dim(1);
  Index dh = d_attn / p.heads;
  Tensor qh = split_heads(add(matmul(nq, p.w_q), p.b_q), p.heads);
  Tensor kh = split_heads(add(matmul(nkv, p.w_k), p.b_k), p.heads);
  Tensor vh = split_heads(add(matmul(nkv, p.w_v), p.b_v), p.heads);
  Tensor scores = scale(matmul(qh, transpose_last2(kh)),
                        real(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor attn = softmax_lastdim(scores);
  Tensor ctx = merge_heads(matmul(attn, vh));
  Tensor out = add(matmul(ctx, p.w_o), p.b_o);
  return {out, attn};
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p, bool pre_norm) {
  Tensor nx = pre_norm ? layernorm(x, p.norm_g, p.norm_b) : x;
  return add(matmul(gelu(add(matmul(nx, p.w1), p.b1)), p.w2), p.b2);
}

Tensor broadcast_rows(const Tensor& table, Index rows) {
  if (table.ndim() != 2) {
    throw ShapeError("broadcast_rows expects a (slots, width) table, got " +
                     shape_str(table.shape()));
  }
  if (rows < 1) throw UsageError("broadcast_rows: rows must be positive");
  Index P = table.dim(0), D = table.dim(1);
  auto idx =
      std::make_shared<std::vector<Index>>(static_cast<std::size_t>(rows * P * D));
  std::size_t w = 0;
  for (Index r = 0; r < rows; ++r) {
    for (Index i = 0; i < P * D; ++i) (*idx)[w++] = i;
  }
  return take(table, std::move(idx), {rows, P, D});
}

Tensor unimodal_block(const Tensor& h, const UnimodalParams& p,
                      const BlockConfig& cfg, const AttentionTraceSink* trace,
                      const std::string& tag) {
  auto sa = multihead_attn(h, h, p.attn, cfg.pre_norm);
  maybe_emit(trace, tag, "self", sa.attn);
  Tensor u = add(h, sa.out);
  return add(u, ffn_forward(u, p.ffn, cfg.pre_norm));
}

Tensor fusion_block(const Tensor& q_init, const Tensor& h_time,
                    const Tensor& h_text, const FusionParams& p,
                    const BlockConfig& cfg, const AttentionTraceSink* trace,
                    const std::string& tag) {
  if (h_time.ndim() != 3 || h_text.ndim() != 3 ||
      h_time.dim(0) != h_text.dim(0)) {
    throw ShapeError("fusion inputs are misaligned: time " +
                     shape_str(h_time.shape()) + " vs text " +
                     shape_str(h_text.shape()));
  }
  auto qs = multihead_attn(q_init, q_init, p.query_self, cfg.pre_norm);
  maybe_emit(trace, tag, "query_self", qs.attn);
  Tensor q1 = add(q_init, qs.out);

  auto ct = multihead_attn(q1, h_time, p.cross_time, cfg.pre_norm);
  maybe_emit(trace, tag, "time", ct.attn);
  Tensor q2 = add(q1, ct.out);

  auto cx = multihead_attn(q2, h_text, p.cross_text, cfg.pre_norm);
  maybe_emit(trace, tag, "text", cx.attn);
  Tensor q3 = add(q2, cx.out);

  return add(q3, ffn_forward(q3, p.ffn, cfg.pre_norm));
}

Tensor refine_block(const Tensor& h, const Tensor& memory,
                    const GatedAdapter& adapter, const RefineParams& p,
                    const BlockConfig& cfg, const AttentionTraceSink* trace,
                    const std::string& tag) {
  if (!memory.defined()) {
    throw UsageError(
        "refine_block needs a fusion memory; layers without one take the "
        "unimodal path");
  }
  auto sa = multihead_attn(h, h, p.self_attn, cfg.pre_norm);
  maybe_emit(trace, tag, "self", sa.attn);
  Tensor u = add(h, sa.out);

  auto cm = multihead_attn(u, memory, p.cross_mem, cfg.pre_norm);
  maybe_emit(trace, tag, "memory", cm.attn);
  Tensor z = cm.out;

  Tensor adapted = add(matmul(z, adapter.w), adapter.b);
  Tensor r =
      adapter.gate.defined() ? mul(sigmoid(adapter.gate), adapted) : adapted;
  Tensor h_hat = add(u, r);
  return add(h_hat, ffn_forward(h_hat, p.ffn, cfg.pre_norm));
}

}  // namespace timesaf
