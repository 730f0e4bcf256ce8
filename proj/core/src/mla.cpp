#include "movelab/mla.hpp"

#include <cmath>
#include <stdexcept>

namespace movelab {

namespace {

Value as_batched(Value x) {
  const Shape& s = x.shape();
  if (s.size() == 3) return x;
  if (s.size() == 2) return reshape(x, Shape{1, s[0], s[1]});
  throw std::invalid_argument("mla: hidden states must be [B, T, d] or [T, d], got " + shape_str(s));
}

// Memory injection for one layer; returns the augmented latent [B, T, d_c].
Value augment_latent(Value c, Value x_normed, std::span<const int64_t> tokens, const MemoryWeights& mem,
                     GateCapture* capture) {
  if (mem.kind == MemoryWeights::Kind::none) return c;
  const Shape& cs = c.shape();
  const int64_t b = cs[0], t = cs[1], dc = cs[2];
  const int64_t hkv = mem.groups;
  if (dc % hkv != 0)
    throw std::invalid_argument("mla memory: latent width " + std::to_string(dc) + " not divisible into " +
                                std::to_string(hkv) + " chunks");
  const int64_t cw = dc / hkv;
  if (static_cast<int64_t>(tokens.size()) != b * t)
    throw std::invalid_argument("mla memory: got " + std::to_string(tokens.size()) + " tokens for " +
                                std::to_string(b * t) + " positions");

  Value mt = retrieve_memory(mem.bank, tokens, mem.slots, hkv);  // [N, M, H_kv, cw]

  if (mem.kind == MemoryWeights::Kind::global_bank) {
    Value gates = memory_gates(x_normed, mem, capture);  // [B, T, H_kv, K]
    return inject_latent_memory(c, reshape(mt, Shape{b, t, mem.slots, hkv, cw}), gates, mem.gates_std_path, hkv);
  }

  // layer-local latent bank: one vector per token, gated per chunk
  Value chunks = reshape(c, Shape{b, t, hkv, cw});
  Value mem_chunks = reshape(mt, Shape{b, t, hkv, cw});
  Value gate = scaled_gate(matmul(x_normed, mem.router));  // [B, T, H_kv]
  std::optional<Value> std_gate;
  if (mem.layer_std_gate.valid()) std_gate = scaled_gate(matmul(x_normed, mem.layer_std_gate));
  if (capture) {
    Array out(Shape{b * t, hkv, 2});
    auto gm = gate.data();
    for (int64_t r = 0; r < b * t; ++r)
      for (int64_t g = 0; g < hkv; ++g) {
        out.ptr()[(r * hkv + g) * 2 + 0] = std_gate ? std_gate->data()[r * hkv + g] : 1.0;
        out.ptr()[(r * hkv + g) * 2 + 1] = gm[r * hkv + g];
      }
    capture->gates = std::move(out);
  }
  Value mixed = mix_values_lave(chunks, mem_chunks, gate, std_gate);
  return reshape(mixed, Shape{b, t, dc});
}

// Fuses W_uv and W_o per head on the tape and applies the absorbed output
// path: attn [B, H, T, S] x latent [B, S, d_c] -> [B, T, d].
Value absorbed_output_on_tape(Value latent, Value attn_weights, Value w_uv, Value w_out, int64_t heads) {
  const Shape& ls = latent.shape();
  const Shape& as = attn_weights.shape();
  const int64_t b = ls[0], s = ls[1], dc = ls[2];
  const int64_t t = as[2];
  const int64_t d = w_out.shape()[1];
  const int64_t hw = d / heads;
  Value uv_heads = transpose(reshape(w_uv, Shape{dc, heads, hw}), {1, 0, 2});    // [H, d_c, hw]
  Value out_heads = reshape(w_out, Shape{heads, hw, d});                         // [H, hw, d]
  Value fused = reshape(matmul(uv_heads, out_heads), Shape{heads * dc, d});      // [H*d_c, d]
  Value attended = matmul(attn_weights, reshape(latent, Shape{b, 1, s, dc}));    // [B, H, T, d_c]
  Value flat = reshape(transpose(attended, {0, 2, 1, 3}), Shape{b, t, heads * dc});
  return matmul(flat, fused);
}

}  // namespace

Value compress_latent(Value x_normed, Value w_dkv) { return matmul(x_normed, w_dkv); }

Value inject_latent_memory(Value c, Value mt, Value gates, bool gates_include_std, int64_t latent_heads) {
  const Shape& cs = c.shape();
  if (cs.size() != 3) throw std::invalid_argument("inject_latent_memory: latent must be [B, T, d_c], got " + shape_str(cs));
  const int64_t b = cs[0], t = cs[1], dc = cs[2];
  if (latent_heads < 1 || dc % latent_heads != 0)
    throw std::invalid_argument("inject_latent_memory: latent width " + std::to_string(dc) +
                                " not divisible into " + std::to_string(latent_heads) + " chunks");
  const int64_t cw = dc / latent_heads;
  Value chunks = reshape(c, Shape{b, t, latent_heads, cw});
  Value mixed = gated_slot_mix(chunks, mt, gates, gates_include_std);
  return reshape(mixed, Shape{b, t, dc});
}

FusedOutputProjection fuse_output_projection(const Array& w_uv, const Array& w_out, int64_t heads,
                                             uint64_t params_version) {
  const int64_t dc = w_uv.dim(0), d = w_uv.dim(1);
  if (w_out.dim(0) != d) throw std::invalid_argument("fuse_output_projection: W_uv and W_o widths disagree");
  const int64_t dout = w_out.dim(1);
  const int64_t hw = d / heads;
  FusedOutputProjection fp;
  fp.fused = Array(Shape{heads * dc, dout});
  fp.source_version = params_version;
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < dc; ++i) {
      double* dst = fp.fused.ptr() + (h * dc + i) * dout;
      for (int64_t l = 0; l < hw; ++l) {
        const double uv = w_uv.ptr()[i * d + h * hw + l];
        const double* orow = w_out.ptr() + (h * hw + l) * dout;
        for (int64_t j = 0; j < dout; ++j) dst[j] += uv * orow[j];
      }
    }
  }
  return fp;
}

Value absorbed_output(Value latent, Value attn_weights, const FusedOutputProjection& fused,
                      uint64_t params_version) {
  if (fused.source_version != params_version)
    throw std::invalid_argument("absorbed_output: fused projection is stale (fused at version " +
                                std::to_string(fused.source_version) + ", parameters at version " +
                                std::to_string(params_version) + ")");
  const Shape& ls = latent.shape();
  const Shape& as = attn_weights.shape();
  if (ls.size() != 3 || as.size() != 4 || as[3] != ls[1])
    throw std::invalid_argument("absorbed_output: expected latent [B, S, d_c] and weights [B, H, T, S], got " +
                                shape_str(ls) + " and " + shape_str(as));
  const int64_t b = ls[0], s = ls[1], dc = ls[2];
  const int64_t heads = as[1], t = as[2];
  if (fused.fused.dim(0) != heads * dc)
    throw std::invalid_argument("absorbed_output: fused matrix rows " + std::to_string(fused.fused.dim(0)) +
                                " do not match heads*d_c = " + std::to_string(heads * dc));
  Tape& tape = *latent.tape();
  Value f = tape.constant(fused.fused);
  Value attended = matmul(attn_weights, reshape(latent, Shape{b, 1, s, dc}));  // [B, H, T, d_c]
  Value flat = reshape(transpose(attended, {0, 2, 1, 3}), Shape{b, t, heads * dc});
  return matmul(flat, f);
}

Value mla_forward(Value x, std::span<const int64_t> tokens, const MlaWeights& mla, const MemoryWeights& mem,
                  GateCapture* capture) {
  const bool was_2d = x.shape().size() == 2;
  Value xb = as_batched(x);
  const Shape& xs = xb.shape();
  const int64_t b = xs[0], t = xs[1], d = xs[2];
  const int64_t h = mla.heads;
  if (h < 1 || d % h != 0)
    throw std::invalid_argument("mla_forward: width " + std::to_string(d) + " not divisible by " +
                                std::to_string(h) + " heads");
  const int64_t hw = d / h;

  Value q = transpose(reshape(matmul(xb, mla.w_query), Shape{b, t, h, hw}), {0, 2, 1, 3});  // [B, H, T, hw]
  Value c = compress_latent(xb, mla.w_dkv);                                                 // [B, T, d_c]
  Value c_aug = augment_latent(c, xb, tokens, mem, capture);

  Value key_src = mla.keys_from_augmented ? c_aug : c;
  Value k = transpose(reshape(matmul(key_src, mla.w_uk), Shape{b, t, h, hw}), {0, 2, 3, 1});  // [B, H, hw, T]
  Value scores = scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(hw)));
  Value weights = causal_softmax(scores);  // [B, H, T, T]

  Value out = absorbed_output_on_tape(c_aug, weights, mla.w_uv, mla.w_out, h);
  return was_2d ? reshape(out, Shape{t, d}) : out;
}

Value mla_decode_step(Value x_normed, int64_t token, int64_t pos, const MlaWeights& mla, const MemoryWeights& mem,
                      LayerKvCache& cache, const FusedOutputProjection& fused, uint64_t params_version,
                      GateCapture* capture) {
  if (cache.len != pos)
    throw std::invalid_argument("mla_decode_step: cache length " + std::to_string(cache.len) +
                                " does not match position " + std::to_string(pos));
  const Shape& xs = x_normed.shape();
  if (xs.size() != 3 || xs[0] != 1 || xs[1] != 1)
    throw std::invalid_argument("mla_decode_step: expected [1, 1, d] hidden state, got " + shape_str(xs));
  const int64_t d = xs[2];
  const int64_t h = mla.heads;
  const int64_t hw = d / h;
  Tape& tape = *x_normed.tape();

  Value q = transpose(reshape(matmul(x_normed, mla.w_query), Shape{1, 1, h, hw}), {0, 2, 1, 3});  // [1, H, 1, hw]
  Value c = compress_latent(x_normed, mla.w_dkv);  // [1, 1, d_c]
  const int64_t tok_arr[1] = {token};
  Value c_aug = augment_latent(c, x_normed, std::span<const int64_t>(tok_arr, 1), mem, capture);
  const int64_t dc = c_aug.shape()[2];

  // The augmented latent is the only tensor a step adds to the cache. The
  // raw-key diagnostic mode additionally keeps raw latents so keys can be
  // rebuilt; the default mode reconstructs keys from the augmented cache.
  cache.values.insert(cache.values.end(), c_aug.data().begin(), c_aug.data().end());
  if (!mla.keys_from_augmented) cache.keys.insert(cache.keys.end(), c.data().begin(), c.data().end());
  cache.len += 1;
  const int64_t s = cache.len;

  Value latent = tape.constant(Array(Shape{1, s, dc}, cache.values));
  Value key_src = mla.keys_from_augmented ? latent : tape.constant(Array(Shape{1, s, dc}, cache.keys));
  Value k = transpose(reshape(matmul(key_src, mla.w_uk), Shape{1, s, h, hw}), {0, 2, 3, 1});  // [1, H, hw, S]
  Value scores = scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(hw)));
  Value weights = causal_softmax(scores);  // [1, H, 1, S]
  return absorbed_output(latent, weights, fused, params_version);
}

}  // namespace movelab
