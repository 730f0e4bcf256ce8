#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "movelab/array.hpp"
#include "movelab/tape.hpp"

namespace movelab {

/// Per-layer attention projections, bound to a tape. The per-head Q/K/V/O
/// maps are stored fused as [d, d] matrices (column blocks per head), with
/// heads * head_width == d.
struct AttnWeights {
  Value w_query, w_key, w_value, w_out;
  int64_t heads = 0;
  bool use_rope = false;
  double rope_base = 10000.0;
};

/// Memory state seen by one attention layer. `bank` is the global
/// value-embedding table for the shared-bank variant (one per model, all
/// layers alias the same tape leaf) or a layer-local single-slot table for
/// the layer-wise variant.
struct MemoryWeights {
  enum class Kind { none, global_bank, layer_bank };
  Kind kind = Kind::none;
  Value bank;             // global: [V, M*G*W]; layer: [V, G*W]
  Value router;           // global: [d, G*(M+1)] gated / [d, G*M] ungated; layer: [d, G]
  Value layer_std_gate;   // layer-wise gated-standard-path only: [d, G]
  int64_t slots = 0;      // M (global) or 1 (layer)
  int64_t groups = 0;     // H for value mixing, H_kv for latent mixing
  bool gates_std_path = false;
};

/// Optional per-layer gate observation. Values are copied off the tape;
/// capture never alters the computation. Gates have layout [N, G, M+1] with
/// column 0 the standard-path gate (exactly 1 when that path is ungated).
struct GateCapture {
  Array gates;
};

/// g = 2 * sigmoid(z): per-token mixing coefficients in (0, 2), exactly 1 at
/// zero logits. Saturates to the interval endpoints beyond |z| ~ 37 in double
/// precision.
Value scaled_gate(Value logits);

/// Pure gather + reshape of bank rows: table [V, slots*groups*width] indexed
/// by tokens -> [N, slots, groups, width]. Gradients scatter-add into the
/// rows of occurring tokens only.
Value retrieve_memory(Value bank_table, std::span<const int64_t> tokens, int64_t slots, int64_t groups);

/// Shared-bank value mixing:
///   out[t,g] = g0 * v[t,g] + sum_i gate_i * mt[t,i,g]     (gated std path)
///   out[t,g] =      v[t,g] + sum_i gate_i * mt[t,i,g]     (ungated)
/// v: [..., G, W], mt: [..., M, G, W], gates: [..., G, M+1] or [..., G, M].
Value mix_values_move(Value v, Value mt, Value gates, bool gates_include_std);

/// Layer-wise value mixing: out = v + gate (.) mt, or with the optional
/// standard-path gate, out = std_gate (.) v + gate (.) mt.
/// v, mt: [..., G, W]; gate, std_gate: [..., G].
Value mix_values_lave(Value v, Value mt, Value gate, std::optional<Value> std_gate = std::nullopt);

/// Computes the shared-bank gate tensor from the normed hidden state
/// x [B, T, d] -> [B, T, G, K]. Fills `capture` (if non-null) with a uniform
/// [B*T, G, M+1] view whose column 0 is exactly 1 when the standard path is
/// ungated. Rejects non-shared-bank memory kinds.
Value memory_gates(Value x_normed, const MemoryWeights& mem, GateCapture* capture);

/// Causal multi-head attention over hidden states x [B, T, d] (or [T, d]),
/// with the layer's memory state mixed into the value stream before the
/// attention-weighted sum. `tokens` are the B*T token ids used for bank
/// retrieval (may be empty for Kind::none). Returns [B, T, d].
Value mha_forward(Value x, std::span<const int64_t> tokens, const AttnWeights& attn, const MemoryWeights& mem,
                  GateCapture* capture = nullptr, int64_t pos_offset = 0);

/// Append-only per-layer decode cache. Keys and mixed values for positions
/// <= t are computed exactly once; later steps never touch them.
struct LayerKvCache {
  std::vector<double> keys;    // [len, H, W] for attention; empty for latent caches
  std::vector<double> values;  // [len, H, W] mixed values, or [len, d_c] latents
  int64_t len = 0;
};

/// One incremental decoding step: consumes the new position's normed hidden
/// state [1, 1, d], appends K_t / mixed V_t to the cache, attends over all
/// cached positions, and returns [1, 1, d]. Rejects a cache whose length
/// disagrees with `pos`.
Value decode_step(Value x_normed, int64_t token, int64_t pos, const AttnWeights& attn, const MemoryWeights& mem,
                  LayerKvCache& cache, GateCapture* capture = nullptr);

}  // namespace movelab
