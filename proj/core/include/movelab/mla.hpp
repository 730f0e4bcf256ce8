#pragma once

#include <cstdint>
#include <span>

#include "movelab/attention.hpp"
#include "movelab/tape.hpp"

namespace movelab {

/// Latent-attention projections bound to a tape. Keys and values are
/// reconstructed from a compressed latent of width `latent_dim` < d; the
/// latent is partitioned into `latent_heads` chunks for head-wise memory
/// mixing, so latent_dim % latent_heads == 0.
struct MlaWeights {
  Value w_query;  // [d, d]
  Value w_dkv;    // [d, d_c]
  Value w_uk;     // [d_c, d]
  Value w_uv;     // [d_c, d]
  Value w_out;    // [d, d]
  int64_t heads = 0;
  int64_t latent_heads = 0;
  bool keys_from_augmented = true;  // derive K from the memory-mixed latent
};

/// c = x W_dkv: low-rank compression of the hidden state, [B, T, d] -> [B, T, d_c].
Value compress_latent(Value x_normed, Value w_dkv);

/// Head-chunk-wise memory mixing in the latent space:
///   c_aug[t, h] = g0 * c[t, h] + sum_i gate_i * mt[t, i, h]
/// c: [B, T, d_c] viewed as [B, T, H_kv, d_c/H_kv]; mt from a latent bank with
/// matching chunking; gates: [B, T, H_kv, M+1] (or M when the standard chunk
/// is ungated). Returns [B, T, d_c].
Value inject_latent_memory(Value c, Value mt, Value gates, bool gates_include_std, int64_t latent_heads);

/// Inference-time fused value-to-output projection. `source_version` pins the
/// parameter snapshot the fusion was computed from; decoding with a stale
/// fusion is rejected.
struct FusedOutputProjection {
  Array fused;  // [H * d_c, d]: per-head blocks of W_uv^(h) W_o^(h)
  uint64_t source_version = 0;
};

/// Folds the per-head value up-projection into the output projection.
FusedOutputProjection fuse_output_projection(const Array& w_uv, const Array& w_out, int64_t heads,
                                             uint64_t params_version);

/// Output path that never materializes the full-rank value tensor: pushes the
/// attention-weighted latent rows through the fused matrix.
/// attn: [B, H, T, S], latent: [B, S, d_c] -> [B, T, d].
Value absorbed_output(Value latent, Value attn_weights, const FusedOutputProjection& fused,
                      uint64_t params_version);

/// Latent attention over hidden states [B, T, d] (or [T, d]) with optional
/// memory injected into the compressed latent space. Values reach the output
/// through on-tape absorption (differentiable, still never materializes the
/// [B, T, d] value tensor); only the augmented latent would be cached.
Value mla_forward(Value x, std::span<const int64_t> tokens, const MlaWeights& mla, const MemoryWeights& mem,
                  GateCapture* capture = nullptr);

/// Incremental latent decode: appends the new position's augmented latent
/// (d_c floats, the only cached tensor) and attends over the cached latents,
/// reconstructing keys from the cache and using the fused output path.
Value mla_decode_step(Value x_normed, int64_t token, int64_t pos, const MlaWeights& mla, const MemoryWeights& mem,
                      LayerKvCache& cache, const FusedOutputProjection& fused, uint64_t params_version,
                      GateCapture* capture = nullptr);

}  // namespace movelab
