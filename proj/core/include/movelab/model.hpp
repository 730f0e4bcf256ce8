#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "movelab/array.hpp"
#include "movelab/attention.hpp"
#include "movelab/mla.hpp"
#include "movelab/tape.hpp"

namespace movelab {

enum class Variant { standard, lave, move, mla, mla_lave, mla_move };
enum class StdPath { ungated, gated };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

/// All architecture hyperparameters in one validated record. Memory capacity
/// follows the x-scaling convention: slot count M = scale * layers / 2, so
/// x1 -> L/2, x2 -> L, x4 -> 2L, ... Layer-bank variants are structurally
/// bound by depth and only admit x1 (banks at layers L-1, L-3, ...) and x2
/// (banks at every layer).
struct ModelConfig {
  int64_t layers = 0;
  int64_t width = 0;
  int64_t heads = 0;
  int64_t vocab = 0;
  int64_t context = 0;
  Variant variant = Variant::standard;
  int64_t scale = 0;                 // x-factor: 1, 2, 4, 8, 16, 32; 0 for memory-free variants
  StdPath std_path = StdPath::gated; // gate on the standard value path (shared-bank default)
  int64_t latent_dim = 0;            // d_c, latent-attention variants
  int64_t latent_heads = 0;          // H_kv
  bool mla_keys_from_augmented = true;
  double rope_base = 10000.0;
  uint64_t seed = 0;

  int64_t head_width() const { return heads > 0 ? width / heads : 0; }
  bool is_mla() const { return variant == Variant::mla || variant == Variant::mla_lave || variant == Variant::mla_move; }
  bool has_global_bank() const { return variant == Variant::move || variant == Variant::mla_move; }
  bool has_layer_bank() const { return variant == Variant::lave || variant == Variant::mla_lave; }
  bool has_memory() const { return has_global_bank() || has_layer_bank(); }
  int64_t slots() const { return has_memory() ? scale * layers / 2 : 0; }
  int64_t bank_width() const { return is_mla() ? latent_dim : width; }
  int64_t memory_groups() const { return is_mla() ? latent_heads : heads; }
  std::vector<int64_t> lave_layers() const;
  bool lave_layer_selected(int64_t layer) const;

  void validate() const;  // throws std::invalid_argument with the reason
};

std::vector<std::pair<std::string, std::string>> config_to_kv(const ModelConfig& config);
ModelConfig config_from_kv(std::span<const std::pair<std::string, std::string>> kv);

struct LayerParams {
  Array norm1_gain, norm2_gain;
  Array w_query, w_key, w_value, w_out;   // w_key/w_value empty for latent variants
  Array w_dkv, w_uk, w_uv;                // latent variants only
  Array router;                           // shared-bank variants: [d, G*(M+1)] or [d, G*M]
  Array lave_bank, lave_gate, lave_std_gate;  // layer-bank variants, selected layers only
  Array ffn_in, ffn_out;
};

/// Concrete network parameters. The input embedding and the value-embedding
/// bank are distinct storage; exactly one global bank exists for shared-bank
/// variants while layer-bank variants own one bank per selected layer.
struct ModelParams {
  ModelConfig config;
  Array tok_emb;      // [V, d]
  Array pos_emb;      // [T_max, d], latent variants (learned absolute positions)
  Array value_bank;   // [V, M * bank_width], shared-bank variants
  std::vector<LayerParams> layers;
  Array final_norm_gain;
  Array head;         // [d, V], untied from tok_emb
  uint64_t version = 0;  // bumped on every parameter mutation

  /// Visits every non-empty tensor in a fixed canonical order (checkpoint
  /// manifest order, optimizer state order).
  void for_each_tensor(const std::function<void(const std::string&, Array&)>& f);
  void for_each_tensor(const std::function<void(const std::string&, const Array&)>& f) const;
};

/// Deterministic build: shared tensors draw from per-name streams of
/// (seed, name), so two variants with the same seed agree bit-for-bit on
/// every tensor they share; banks, routers, and gates start at zero, making
/// every memory variant forward-identical to its memory-free counterpart.
ModelParams build_model(const ModelConfig& config);

/// Adds N(0, stddev^2) noise to every tensor; handy for tests that need
/// nonzero banks and routers.
void perturb_params(ModelParams& params, double stddev, uint64_t seed);

struct ParamAuditEntry {
  std::string name;
  Shape shape;
  int64_t count = 0;
};
struct ParamAudit {
  std::vector<ParamAuditEntry> tensors;
  int64_t total = 0;
  int64_t bank_total = 0;    // value-embedding storage (shared or layer-local)
  int64_t router_total = 0;  // routing / gating projections
};
ParamAudit audit_params(const ModelParams& params);
/// Same accounting from the config alone, without allocating the tensors.
ParamAudit audit_config(const ModelConfig& config);

/// Model parameters bound onto a tape, as leaves (trainable) or constants.
struct BoundLayer {
  Value norm1_gain, norm2_gain;
  Value w_query, w_key, w_value, w_out;
  Value w_dkv, w_uk, w_uv;
  Value router;
  Value lave_bank, lave_gate, lave_std_gate;
  Value ffn_in, ffn_out;
};
struct BoundModel {
  const ModelParams* params = nullptr;
  Tape* tape = nullptr;
  Value tok_emb, pos_emb, value_bank, final_norm_gain, head;
  std::vector<BoundLayer> layers;
  std::vector<std::pair<std::string, Value>> named;  // for_each_tensor order
};
BoundModel bind_model(Tape& tape, const ModelParams& params, bool trainable);

struct ForwardOptions {
  /// When set, resized to one entry per layer; layers without a gate leave
  /// their entry empty. Capture copies values off the tape and never alters
  /// the computation.
  std::vector<GateCapture>* captures = nullptr;
  /// Shared-bank variants: route bank gradients through this layer only,
  /// detaching the retrievals of every other layer (forward unchanged).
  /// -1 attaches all layers.
  int64_t bank_grad_layer = -1;
};

/// Full causal forward pass: tokens (batch * seq, row-major) -> logits
/// [batch, seq, vocab].
Value forward_logits(const BoundModel& model, std::span<const int64_t> tokens, int64_t batch,
                     const ForwardOptions& options = {});

/// Single-sequence convenience wrapper (inference): logits [T, vocab].
Array forward_logits(const ModelParams& params, std::span<const int64_t> tokens,
                     std::vector<GateCapture>* captures = nullptr);

/// Autoregressive objective: sum over positions of -log P(target | context).
struct ArLoss {
  Value total_nats;  // scalar
  Value per_token;   // [N]
};
ArLoss ar_loss(Value logits, std::span<const int64_t> targets);

struct ArLossValue {
  double total_nats = 0.0;
  std::vector<double> per_token;
};
ArLossValue ar_loss(const Array& logits, std::span<const int64_t> targets);

/// Tokenizer-invariant compression metric: bpb = nats / (ln 2 * bytes).
struct EvalReport {
  double total_loss_nats = 0.0;
  int64_t token_count = 0;
  int64_t byte_count = 0;
  double bpb = 0.0;
  std::string label;
};
EvalReport bits_per_byte(double total_loss_nats, int64_t token_count, int64_t byte_count, std::string label = {});

/// Incremental decoding state: per-layer caches plus the fused output
/// projection for latent variants, pinned to the parameter version it was
/// built from.
struct DecodeState {
  std::vector<LayerKvCache> layers;
  std::vector<FusedOutputProjection> fused;  // per layer, latent variants only
  int64_t len = 0;
};
DecodeState make_decode_state(const ModelParams& params);

/// Feeds one token through the decoder with caching; returns the next-token
/// logits [vocab]. Optionally captures per-layer gates for this position.
Array decode_logits(const ModelParams& params, DecodeState& state, int64_t token,
                    std::vector<GateCapture>* captures = nullptr);

struct GenerateOptions {
  enum class Mode { greedy, temperature };
  Mode mode = Mode::greedy;
  double temperature = 1.0;
  uint64_t seed = 0;
};

/// Autoregressive generation from a nonempty prompt. Greedy mode is
/// deterministic; temperature mode is reproducible under a fixed seed and
/// approaches greedy as temperature -> 0.
std::vector<int64_t> generate(const ModelParams& params, std::span<const int64_t> prompt, int64_t steps,
                              const GenerateOptions& options = {});

}  // namespace movelab
