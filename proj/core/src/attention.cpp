#include "movelab/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace movelab {

namespace {

// Normalizes [T, d] to [B=1, T, d]; callers always see 3-D internally.
Value as_batched(Value x) {
  const Shape& s = x.shape();
  if (s.size() == 3) return x;
  if (s.size() == 2) return reshape(x, Shape{1, s[0], s[1]});
  throw std::invalid_argument("attention: hidden states must be [B, T, d] or [T, d], got " + shape_str(s));
}

}  // namespace

Value scaled_gate(Value logits) { return scale(sigmoid(logits), 2.0); }

Value retrieve_memory(Value bank_table, std::span<const int64_t> tokens, int64_t slots, int64_t groups) {
  const Shape& bs = bank_table.shape();
  if (bs.size() != 2) throw std::invalid_argument("retrieve_memory: bank must be 2-D, got " + shape_str(bs));
  if (slots < 1 || groups < 1 || bs[1] % (slots * groups) != 0)
    throw std::invalid_argument("retrieve_memory: bank row width " + std::to_string(bs[1]) +
                                " not divisible into " + std::to_string(slots) + " slots x " +
                                std::to_string(groups) + " groups");
  const int64_t width = bs[1] / (slots * groups);
  Value rows = gather(bank_table, tokens);
  return reshape(rows, Shape{static_cast<int64_t>(tokens.size()), slots, groups, width});
}

Value mix_values_move(Value v, Value mt, Value gates, bool gates_include_std) {
  return gated_slot_mix(v, mt, gates, gates_include_std);
}

Value mix_values_lave(Value v, Value mt, Value gate, std::optional<Value> std_gate) {
  if (!shapes_equal(v.shape(), mt.shape()))
    throw std::invalid_argument("mix_values_lave: value/memory shape mismatch: " + shape_str(v.shape()) + " vs " +
                                shape_str(mt.shape()));
  Value gated_mem = mul_bcast_last(mt, gate);
  if (std_gate) return add(mul_bcast_last(v, *std_gate), gated_mem);
  return add(v, gated_mem);
}

Value memory_gates(Value x_normed, const MemoryWeights& mem, GateCapture* capture) {
  if (mem.kind != MemoryWeights::Kind::global_bank)
    throw std::invalid_argument("memory_gates: only the shared-bank memory kind produces a gate tensor");
  const Shape& xs = x_normed.shape();
  const int64_t rows = xs[0] * xs[1];
  const int64_t k = mem.slots + (mem.gates_std_path ? 1 : 0);
  Value logits = matmul(x_normed, mem.router);  // [B, T, G*K]
  Value gates = scaled_gate(reshape(logits, Shape{xs[0], xs[1], mem.groups, k}));
  if (capture) {
    // Export a uniform [N, G, M+1] view; the standard-path column is an
    // exact 1.0 when that path is ungated.
    Array out(Shape{rows, mem.groups, mem.slots + 1});
    auto src = gates.data();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t g = 0; g < mem.groups; ++g) {
        double* dst = out.ptr() + (r * mem.groups + g) * (mem.slots + 1);
        const double* s = src.data() + (r * mem.groups + g) * k;
        if (mem.gates_std_path) {
          for (int64_t i = 0; i <= mem.slots; ++i) dst[i] = s[i];
        } else {
          dst[0] = 1.0;
          for (int64_t i = 0; i < mem.slots; ++i) dst[i + 1] = s[i];
        }
      }
    }
    capture->gates = std::move(out);
  }
  return gates;
}

namespace {

// Applies the layer's memory state to per-head values v [B, T, H, W].
Value apply_memory(Value v, Value x_normed, std::span<const int64_t> tokens, const MemoryWeights& mem,
                   GateCapture* capture) {
  if (mem.kind == MemoryWeights::Kind::none) return v;
  const Shape& vs = v.shape();
  const int64_t b = vs[0], t = vs[1], groups = vs[2], width = vs[3];
  if (static_cast<int64_t>(tokens.size()) != b * t)
    throw std::invalid_argument("attention memory: got " + std::to_string(tokens.size()) + " tokens for " +
                                std::to_string(b * t) + " positions");
  if (groups != mem.groups)
    throw std::invalid_argument("attention memory: group count mismatch");

  Value mt = retrieve_memory(mem.bank, tokens, mem.slots, mem.groups);  // [N, M, G, W]
  mt = reshape(mt, Shape{b, t, mem.slots, groups, width});

  if (mem.kind == MemoryWeights::Kind::global_bank) {
    Value gates = memory_gates(x_normed, mem, capture);  // [B, T, G, K]
    return mix_values_move(v, mt, gates, mem.gates_std_path);
  }

  // layer bank: single slot per token
  Value mt_single = reshape(mt, Shape{b, t, groups, width});
  Value gate = scaled_gate(matmul(x_normed, mem.router));  // [B, T, G]
  std::optional<Value> std_gate;
  if (mem.layer_std_gate.valid()) std_gate = scaled_gate(matmul(x_normed, mem.layer_std_gate));
  if (capture) {
    Array out(Shape{b * t, groups, 2});
    auto gm = gate.data();
    for (int64_t r = 0; r < b * t; ++r)
      for (int64_t g = 0; g < groups; ++g) {
        out.ptr()[(r * groups + g) * 2 + 0] = std_gate ? std_gate->data()[r * groups + g] : 1.0;
        out.ptr()[(r * groups + g) * 2 + 1] = gm[r * groups + g];
      }
    capture->gates = std::move(out);
  }
  return mix_values_lave(v, mt_single, gate, std_gate);
}

}  // namespace

Value mha_forward(Value x, std::span<const int64_t> tokens, const AttnWeights& attn, const MemoryWeights& mem,
                  GateCapture* capture, int64_t pos_offset) {
  const bool was_2d = x.shape().size() == 2;
  Value xb = as_batched(x);
  const Shape& xs = xb.shape();
  const int64_t b = xs[0], t = xs[1], d = xs[2];
  const int64_t h = attn.heads;
  if (h < 1 || d % h != 0)
    throw std::invalid_argument("mha_forward: width " + std::to_string(d) + " not divisible by " +
                                std::to_string(h) + " heads");
  const int64_t hw = d / h;

  Value q = reshape(matmul(xb, attn.w_query), Shape{b, t, h, hw});
  Value k = reshape(matmul(xb, attn.w_key), Shape{b, t, h, hw});
  Value v = reshape(matmul(xb, attn.w_value), Shape{b, t, h, hw});
  if (attn.use_rope) {
    q = rope(q, pos_offset, attn.rope_base);
    k = rope(k, pos_offset, attn.rope_base);
  }
  v = apply_memory(v, xb, tokens, mem, capture);

  Value qt = transpose(q, {0, 2, 1, 3});  // [B, H, T, W]
  Value kt = transpose(k, {0, 2, 3, 1});  // [B, H, W, T]
  Value vt = transpose(v, {0, 2, 1, 3});  // [B, H, T, W]
  Value scores = scale(matmul(qt, kt), 1.0 / std::sqrt(static_cast<double>(hw)));
  Value weights = causal_softmax(scores);           // [B, H, T, T]
  Value mixed = matmul(weights, vt);                // [B, H, T, W]
  Value merged = reshape(transpose(mixed, {0, 2, 1, 3}), Shape{b, t, d});
  Value out = matmul(merged, attn.w_out);
  return was_2d ? reshape(out, Shape{t, d}) : out;
}

Value decode_step(Value x_normed, int64_t token, int64_t pos, const AttnWeights& attn, const MemoryWeights& mem,
                  LayerKvCache& cache, GateCapture* capture) {
  if (cache.len != pos)
    throw std::invalid_argument("decode_step: cache length " + std::to_string(cache.len) +
                                " does not match position " + std::to_string(pos));
  const Shape& xs = x_normed.shape();
  if (xs.size() != 3 || xs[0] != 1 || xs[1] != 1)
    throw std::invalid_argument("decode_step: expected [1, 1, d] hidden state, got " + shape_str(xs));
  const int64_t d = xs[2];
  const int64_t h = attn.heads;
  const int64_t hw = d / h;
  Tape& tape = *x_normed.tape();

  Value q = reshape(matmul(x_normed, attn.w_query), Shape{1, 1, h, hw});
  Value k = reshape(matmul(x_normed, attn.w_key), Shape{1, 1, h, hw});
  Value v = reshape(matmul(x_normed, attn.w_value), Shape{1, 1, h, hw});
  if (attn.use_rope) {
    q = rope(q, pos, attn.rope_base);
    k = rope(k, pos, attn.rope_base);
  }
  const int64_t tok_arr[1] = {token};
  v = apply_memory(v, x_normed, std::span<const int64_t>(tok_arr, 1), mem, capture);

  // The new position's K and mixed V are computed once, then live in the
  // cache; later router/weight mutations cannot reach them.
  cache.keys.insert(cache.keys.end(), k.data().begin(), k.data().end());
  cache.values.insert(cache.values.end(), v.data().begin(), v.data().end());
  cache.len += 1;
  const int64_t s = cache.len;

  Value keys = tape.constant(Array(Shape{1, s, h, hw}, cache.keys));
  Value vals = tape.constant(Array(Shape{1, s, h, hw}, cache.values));
  Value qt = transpose(q, {0, 2, 1, 3});     // [1, H, 1, W]
  Value kt = transpose(keys, {0, 2, 3, 1});  // [1, H, W, S]
  Value vt = transpose(vals, {0, 2, 1, 3});  // [1, H, S, W]
  Value scores = scale(matmul(qt, kt), 1.0 / std::sqrt(static_cast<double>(hw)));
  Value weights = causal_softmax(scores);  // [1, H, 1, S]: single row, all positions valid
  Value mixed = matmul(weights, vt);       // [1, H, 1, W]
  Value merged = reshape(transpose(mixed, {0, 2, 1, 3}), Shape{1, 1, d});
  return matmul(merged, attn.w_out);
}

}  // namespace movelab
