#include "movelab/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_map>

#include "movelab/rng.hpp"

namespace movelab {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::standard: return "standard";
    case Variant::lave: return "lave";
    case Variant::move: return "move";
    case Variant::mla: return "mla";
    case Variant::mla_lave: return "mla+lave";
    case Variant::mla_move: return "mla+move";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "standard") return Variant::standard;
  if (name == "lave") return Variant::lave;
  if (name == "move") return Variant::move;
  if (name == "mla") return Variant::mla;
  if (name == "mla+lave") return Variant::mla_lave;
  if (name == "mla+move") return Variant::mla_move;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::vector<int64_t> ModelConfig::lave_layers() const {
  std::vector<int64_t> out;
  if (!has_layer_bank()) return out;
  if (scale == 2) {
    for (int64_t i = layers - 1; i >= 0; --i) out.push_back(i);
  } else {
    for (int64_t i = layers - 1; i >= 0; i -= 2) out.push_back(i);
  }
  return out;
}

bool ModelConfig::lave_layer_selected(int64_t layer) const {
  if (!has_layer_bank()) return false;
  if (scale == 2) return true;
  return (layers - 1 - layer) % 2 == 0;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("ModelConfig: " + why); };
  if (layers < 1) fail("layers must be >= 1");
  if (width < 1) fail("width must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  if (vocab < 2) fail("vocab must be >= 2");
  if (context < 1) fail("context must be >= 1");
  if (rope_base <= 1.0) fail("rope_base must be > 1");
  if (has_memory()) {
    if (scale != 1 && scale != 2 && scale != 4 && scale != 8 && scale != 16 && scale != 32)
      fail("memory scale must be one of x1, x2, x4, x8, x16, x32; got " + std::to_string(scale));
    if (layers % 2 != 0) fail("memory variants need an even layer count (slot convention M = scale * L/2)");
    if (has_layer_bank() && scale > 2)
      fail("layer-bank memory is structurally bound by depth: only x1 and x2 are valid, got x" + std::to_string(scale));
  } else if (scale != 0) {
    fail("memory-free variant '" + variant_name(variant) + "' must have scale 0");
  }
  if (is_mla()) {
    if (latent_dim < 1) fail("latent variants need latent_dim >= 1");
    if (latent_dim >= width) fail("latent_dim " + std::to_string(latent_dim) + " must compress: require < width " +
                                  std::to_string(width));
    if (latent_heads < 1) fail("latent variants need latent_heads >= 1");
    if (latent_dim % latent_heads != 0)
      fail("latent_dim " + std::to_string(latent_dim) + " not divisible by latent_heads " +
           std::to_string(latent_heads));
  }
}

std::vector<std::pair<std::string, std::string>> config_to_kv(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("variant", variant_name(c.variant));
  kv.emplace_back("layers", std::to_string(c.layers));
  kv.emplace_back("width", std::to_string(c.width));
  kv.emplace_back("heads", std::to_string(c.heads));
  kv.emplace_back("vocab", std::to_string(c.vocab));
  kv.emplace_back("context", std::to_string(c.context));
  kv.emplace_back("scale", std::to_string(c.scale));
  kv.emplace_back("std_path", c.std_path == StdPath::gated ? "gated" : "ungated");
  kv.emplace_back("latent_dim", std::to_string(c.latent_dim));
  kv.emplace_back("latent_heads", std::to_string(c.latent_heads));
  kv.emplace_back("mla_keys", c.mla_keys_from_augmented ? "augmented" : "raw");
  kv.emplace_back("rope_base", std::to_string(c.rope_base));
  kv.emplace_back("seed", std::to_string(c.seed));
  return kv;
}

ModelConfig config_from_kv(std::span<const std::pair<std::string, std::string>> kv) {
  ModelConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "variant") c.variant = variant_from_name(value);
    else if (key == "layers") c.layers = std::stoll(value);
    else if (key == "width") c.width = std::stoll(value);
    else if (key == "heads") c.heads = std::stoll(value);
    else if (key == "vocab") c.vocab = std::stoll(value);
    else if (key == "context") c.context = std::stoll(value);
    else if (key == "scale") c.scale = std::stoll(value);
    else if (key == "std_path") c.std_path = value == "gated" ? StdPath::gated : StdPath::ungated;
    else if (key == "latent_dim") c.latent_dim = std::stoll(value);
    else if (key == "latent_heads") c.latent_heads = std::stoll(value);
    else if (key == "mla_keys") c.mla_keys_from_augmented = value != "raw";
    else if (key == "rope_base") c.rope_base = std::stod(value);
    else if (key == "seed") c.seed = std::stoull(value);
  }
  return c;
}

namespace {

// Canonical tensor traversal; checkpoint manifests, the optimizer state, and
// bound tapes all follow this order.
template <typename Params, typename Fn>
void visit_tensors(Params& p, Fn&& f) {
  auto emit = [&](const std::string& name, auto& array) {
    if (array.numel() > 0) f(name, array);
  };
  emit("tok_emb", p.tok_emb);
  emit("pos_emb", p.pos_emb);
  emit("value_bank", p.value_bank);
  for (size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string prefix = "layer" + std::to_string(i) + ".";
    emit(prefix + "norm1.gain", l.norm1_gain);
    emit(prefix + "attn.w_query", l.w_query);
    emit(prefix + "attn.w_key", l.w_key);
    emit(prefix + "attn.w_value", l.w_value);
    emit(prefix + "attn.w_dkv", l.w_dkv);
    emit(prefix + "attn.w_uk", l.w_uk);
    emit(prefix + "attn.w_uv", l.w_uv);
    emit(prefix + "attn.w_out", l.w_out);
    emit(prefix + "attn.router", l.router);
    emit(prefix + "attn.lave_bank", l.lave_bank);
    emit(prefix + "attn.lave_gate", l.lave_gate);
    emit(prefix + "attn.lave_std_gate", l.lave_std_gate);
    emit(prefix + "norm2.gain", l.norm2_gain);
    emit(prefix + "ffn.w_in", l.ffn_in);
    emit(prefix + "ffn.w_out", l.ffn_out);
  }
  emit("final_norm.gain", p.final_norm_gain);
  emit("head", p.head);
}

bool is_bank_tensor(const std::string& name) {
  return name == "value_bank" || name.find("lave_bank") != std::string::npos;
}
bool is_router_tensor(const std::string& name) {
  return name.find("router") != std::string::npos || name.find("lave_gate") != std::string::npos ||
         name.find("lave_std_gate") != std::string::npos;
}

}  // namespace

void ModelParams::for_each_tensor(const std::function<void(const std::string&, Array&)>& f) {
  visit_tensors(*this, f);
}
void ModelParams::for_each_tensor(const std::function<void(const std::string&, const Array&)>& f) const {
  visit_tensors(*this, f);
}

ModelParams build_model(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  const int64_t d = config.width, v = config.vocab;
  const double sd = 0.02;
  const double sd_out = 0.02 / std::sqrt(2.0 * static_cast<double>(config.layers));

  auto normal_init = [&](const std::string& name, Shape shape, double stddev) {
    Array a(std::move(shape));
    Rng rng = Rng::for_name(config.seed, name);
    for (double& x : a.data()) x = rng.normal() * stddev;
    return a;
  };

  p.tok_emb = normal_init("tok_emb", {v, d}, sd);
  if (config.is_mla()) p.pos_emb = normal_init("pos_emb", {config.context, d}, sd);
  if (config.has_global_bank()) p.value_bank = Array(Shape{v, config.slots() * config.bank_width()});

  p.layers.resize(static_cast<size_t>(config.layers));
  for (int64_t i = 0; i < config.layers; ++i) {
    LayerParams& l = p.layers[static_cast<size_t>(i)];
    const std::string prefix = "layer" + std::to_string(i) + ".";
    l.norm1_gain = Array::full({d}, 1.0);
    l.norm2_gain = Array::full({d}, 1.0);
    l.w_query = normal_init(prefix + "attn.w_query", {d, d}, sd);
    l.w_out = normal_init(prefix + "attn.w_out", {d, d}, sd_out);
    if (config.is_mla()) {
      l.w_dkv = normal_init(prefix + "attn.w_dkv", {d, config.latent_dim}, sd);
      l.w_uk = normal_init(prefix + "attn.w_uk", {config.latent_dim, d}, sd);
      l.w_uv = normal_init(prefix + "attn.w_uv", {config.latent_dim, d}, sd);
    } else {
      l.w_key = normal_init(prefix + "attn.w_key", {d, d}, sd);
      l.w_value = normal_init(prefix + "attn.w_value", {d, d}, sd);
    }
    if (config.has_global_bank()) {
      const int64_t k = config.slots() + (config.std_path == StdPath::gated ? 1 : 0);
      l.router = Array(Shape{d, config.memory_groups() * k});
    }
    if (config.has_layer_bank() && config.lave_layer_selected(i)) {
      l.lave_bank = Array(Shape{v, config.bank_width()});
      l.lave_gate = Array(Shape{d, config.memory_groups()});
      if (config.std_path == StdPath::gated) l.lave_std_gate = Array(Shape{d, config.memory_groups()});
    }
    l.ffn_in = normal_init(prefix + "ffn.w_in", {d, 4 * d}, sd);
    l.ffn_out = normal_init(prefix + "ffn.w_out", {4 * d, d}, sd_out);
  }
  p.final_norm_gain = Array::full({d}, 1.0);
  p.head = normal_init("head", {d, v}, sd);
  return p;
}

void perturb_params(ModelParams& params, double stddev, uint64_t seed) {
  params.for_each_tensor([&](const std::string& name, Array& a) {
    Rng rng = Rng::for_name(seed ^ 0x70657274ULL, name);
    for (double& x : a.data()) x += rng.normal() * stddev;
  });
  params.version++;
}

ParamAudit audit_params(const ModelParams& params) {
  ParamAudit audit;
  params.for_each_tensor([&](const std::string& name, const Array& a) {
    audit.tensors.push_back({name, a.shape(), a.numel()});
    audit.total += a.numel();
    if (is_bank_tensor(name)) audit.bank_total += a.numel();
    if (is_router_tensor(name)) audit.router_total += a.numel();
  });
  return audit;
}

ParamAudit audit_config(const ModelConfig& config) {
  config.validate();
  ParamAudit audit;
  auto emit = [&](const std::string& name, Shape shape) {
    ParamAuditEntry e{name, std::move(shape), 0};
    e.count = shape_numel(e.shape);
    audit.total += e.count;
    if (is_bank_tensor(name)) audit.bank_total += e.count;
    if (is_router_tensor(name)) audit.router_total += e.count;
    audit.tensors.push_back(std::move(e));
  };
  const int64_t d = config.width, v = config.vocab;
  emit("tok_emb", {v, d});
  if (config.is_mla()) emit("pos_emb", {config.context, d});
  if (config.has_global_bank()) emit("value_bank", {v, config.slots() * config.bank_width()});
  for (int64_t i = 0; i < config.layers; ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    emit(prefix + "norm1.gain", {d});
    emit(prefix + "attn.w_query", {d, d});
    if (!config.is_mla()) {
      emit(prefix + "attn.w_key", {d, d});
      emit(prefix + "attn.w_value", {d, d});
    } else {
      emit(prefix + "attn.w_dkv", {d, config.latent_dim});
      emit(prefix + "attn.w_uk", {config.latent_dim, d});
      emit(prefix + "attn.w_uv", {config.latent_dim, d});
    }
    emit(prefix + "attn.w_out", {d, d});
    if (config.has_global_bank()) {
      const int64_t k = config.slots() + (config.std_path == StdPath::gated ? 1 : 0);
      emit(prefix + "attn.router", {d, config.memory_groups() * k});
    }
    if (config.has_layer_bank() && config.lave_layer_selected(i)) {
      emit(prefix + "attn.lave_bank", {v, config.bank_width()});
      emit(prefix + "attn.lave_gate", {d, config.memory_groups()});
      if (config.std_path == StdPath::gated) emit(prefix + "attn.lave_std_gate", {d, config.memory_groups()});
    }
    emit(prefix + "norm2.gain", {d});
    emit(prefix + "ffn.w_in", {d, 4 * d});
    emit(prefix + "ffn.w_out", {4 * d, d});
  }
  emit("final_norm.gain", {d});
  emit("head", {d, v});
  return audit;
}

BoundModel bind_model(Tape& tape, const ModelParams& params, bool trainable) {
  BoundModel m;
  m.params = &params;
  m.tape = &tape;
  std::unordered_map<std::string, Value> by_name;
  params.for_each_tensor([&](const std::string& name, const Array& a) {
    Value v = trainable ? tape.leaf(a) : tape.constant(a);
    by_name.emplace(name, v);
    m.named.emplace_back(name, v);
  });
  auto find = [&](const std::string& name) {
    auto it = by_name.find(name);
    return it == by_name.end() ? Value() : it->second;
  };
  m.tok_emb = find("tok_emb");
  m.pos_emb = find("pos_emb");
  m.value_bank = find("value_bank");
  m.final_norm_gain = find("final_norm.gain");
  m.head = find("head");
  m.layers.resize(params.layers.size());
  for (size_t i = 0; i < params.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    BoundLayer& l = m.layers[i];
    l.norm1_gain = find(prefix + "norm1.gain");
    l.norm2_gain = find(prefix + "norm2.gain");
    l.w_query = find(prefix + "attn.w_query");
    l.w_key = find(prefix + "attn.w_key");
    l.w_value = find(prefix + "attn.w_value");
    l.w_dkv = find(prefix + "attn.w_dkv");
    l.w_uk = find(prefix + "attn.w_uk");
    l.w_uv = find(prefix + "attn.w_uv");
    l.w_out = find(prefix + "attn.w_out");
    l.router = find(prefix + "attn.router");
    l.lave_bank = find(prefix + "attn.lave_bank");
    l.lave_gate = find(prefix + "attn.lave_gate");
    l.lave_std_gate = find(prefix + "attn.lave_std_gate");
    l.ffn_in = find(prefix + "ffn.w_in");
    l.ffn_out = find(prefix + "ffn.w_out");
  }
  return m;
}

namespace {

MemoryWeights layer_memory(const BoundModel& m, int64_t layer, Value detached_bank, const ForwardOptions& opts) {
  const ModelConfig& cfg = m.params->config;
  MemoryWeights mem;
  if (cfg.has_global_bank()) {
    mem.kind = MemoryWeights::Kind::global_bank;
    const bool attached = opts.bank_grad_layer < 0 || opts.bank_grad_layer == layer;
    mem.bank = attached ? m.value_bank : detached_bank;
    mem.router = m.layers[static_cast<size_t>(layer)].router;
    mem.slots = cfg.slots();
    mem.groups = cfg.memory_groups();
    mem.gates_std_path = cfg.std_path == StdPath::gated;
  } else if (cfg.has_layer_bank() && cfg.lave_layer_selected(layer)) {
    const BoundLayer& l = m.layers[static_cast<size_t>(layer)];
    mem.kind = MemoryWeights::Kind::layer_bank;
    mem.bank = l.lave_bank;
    mem.router = l.lave_gate;
    mem.layer_std_gate = l.lave_std_gate;
    mem.slots = 1;
    mem.groups = cfg.memory_groups();
    mem.gates_std_path = cfg.std_path == StdPath::gated;
  }
  return mem;
}

std::vector<int64_t> position_ids(int64_t batch, int64_t seq) {
  std::vector<int64_t> ids(static_cast<size_t>(batch * seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq; ++t) ids[static_cast<size_t>(b * seq + t)] = t;
  return ids;
}

}  // namespace

Value forward_logits(const BoundModel& m, std::span<const int64_t> tokens, int64_t batch,
                     const ForwardOptions& opts) {
  const ModelConfig& cfg = m.params->config;
  if (batch < 1 || tokens.empty() || static_cast<int64_t>(tokens.size()) % batch != 0)
    throw std::invalid_argument("forward_logits: token count " + std::to_string(tokens.size()) +
                                " not divisible into batch " + std::to_string(batch));
  const int64_t seq = static_cast<int64_t>(tokens.size()) / batch;
  if (seq > cfg.context)
    throw std::invalid_argument("forward_logits: sequence length " + std::to_string(seq) + " exceeds context " +
                                std::to_string(cfg.context));
  Tape& tape = *m.tape;

  Value x = reshape(gather(m.tok_emb, tokens), Shape{batch, seq, cfg.width});
  if (cfg.is_mla()) {
    const std::vector<int64_t> pos = position_ids(batch, seq);
    x = add(x, reshape(gather(m.pos_emb, pos), Shape{batch, seq, cfg.width}));
  }

  Value detached_bank;
  if (cfg.has_global_bank() && opts.bank_grad_layer >= 0) detached_bank = tape.constant(m.params->value_bank);

  if (opts.captures) {
    opts.captures->clear();
    opts.captures->resize(static_cast<size_t>(cfg.layers));
  }

  for (int64_t i = 0; i < cfg.layers; ++i) {
    const BoundLayer& l = m.layers[static_cast<size_t>(i)];
    GateCapture* cap = opts.captures ? &(*opts.captures)[static_cast<size_t>(i)] : nullptr;
    const MemoryWeights mem = layer_memory(m, i, detached_bank, opts);

    Value xn = rmsnorm(x, l.norm1_gain);
    Value attn_out;
    if (cfg.is_mla()) {
      MlaWeights w;
      w.w_query = l.w_query;
      w.w_dkv = l.w_dkv;
      w.w_uk = l.w_uk;
      w.w_uv = l.w_uv;
      w.w_out = l.w_out;
      w.heads = cfg.heads;
      w.latent_heads = cfg.latent_heads;
      w.keys_from_augmented = cfg.mla_keys_from_augmented;
      attn_out = mla_forward(xn, tokens, w, mem, cap);
    } else {
      AttnWeights w{l.w_query, l.w_key, l.w_value, l.w_out, cfg.heads, /*use_rope=*/true, cfg.rope_base};
      attn_out = mha_forward(xn, tokens, w, mem, cap);
    }
    x = add(x, attn_out);

    Value xn2 = rmsnorm(x, l.norm2_gain);
    Value mid = gelu(matmul(xn2, l.ffn_in));
    x = add(x, matmul(mid, l.ffn_out));
  }

  Value xf = rmsnorm(x, m.final_norm_gain);
  return matmul(xf, m.head);
}

Array forward_logits(const ModelParams& params, std::span<const int64_t> tokens,
                     std::vector<GateCapture>* captures) {
  Tape tape;
  BoundModel m = bind_model(tape, params, /*trainable=*/false);
  ForwardOptions opts;
  opts.captures = captures;
  Value logits = forward_logits(m, tokens, /*batch=*/1, opts);
  Array out = logits.array();
  return Array(Shape{static_cast<int64_t>(tokens.size()), params.config.vocab}, {out.data().begin(), out.data().end()});
}

ArLoss ar_loss(Value logits, std::span<const int64_t> targets) {
  const Shape& ls = logits.shape();
  if (ls.size() < 2) throw std::invalid_argument("ar_loss: logits must be at least 2-D, got " + shape_str(ls));
  const int64_t vocab = ls.back();
  const int64_t rows = shape_numel(ls) / vocab;
  Value flat = reshape(logits, Shape{rows, vocab});
  ArLoss out;
  out.per_token = cross_entropy(flat, targets);
  out.total_nats = reduce_sum(out.per_token);
  return out;
}

ArLossValue ar_loss(const Array& logits, std::span<const int64_t> targets) {
  Tape tape;
  ArLoss l = ar_loss(tape.constant(logits), targets);
  ArLossValue out;
  out.total_nats = l.total_nats.data()[0];
  out.per_token.assign(l.per_token.data().begin(), l.per_token.data().end());
  return out;
}

EvalReport bits_per_byte(double total_loss_nats, int64_t token_count, int64_t byte_count, std::string label) {
  if (byte_count <= 0) throw std::invalid_argument("bits_per_byte: byte count must be positive");
  EvalReport r;
  r.total_loss_nats = total_loss_nats;
  r.token_count = token_count;
  r.byte_count = byte_count;
  r.bpb = total_loss_nats / (std::numbers::ln2 * static_cast<double>(byte_count));
  r.label = std::move(label);
  return r;
}

DecodeState make_decode_state(const ModelParams& params) {
  DecodeState st;
  st.layers.resize(static_cast<size_t>(params.config.layers));
  if (params.config.is_mla()) {
    st.fused.reserve(st.layers.size());
    for (const LayerParams& l : params.layers)
      st.fused.push_back(fuse_output_projection(l.w_uv, l.w_out, params.config.heads, params.version));
  }
  return st;
}

Array decode_logits(const ModelParams& params, DecodeState& state, int64_t token,
                    std::vector<GateCapture>* captures) {
  const ModelConfig& cfg = params.config;
  if (state.len >= cfg.context)
    throw std::invalid_argument("decode_logits: context " + std::to_string(cfg.context) + " exhausted");
  Tape tape;
  BoundModel m = bind_model(tape, params, /*trainable=*/false);

  const int64_t tok_arr[1] = {token};
  Value x = reshape(gather(m.tok_emb, std::span<const int64_t>(tok_arr, 1)), Shape{1, 1, cfg.width});
  if (cfg.is_mla()) {
    const int64_t pos_arr[1] = {state.len};
    x = add(x, reshape(gather(m.pos_emb, std::span<const int64_t>(pos_arr, 1)), Shape{1, 1, cfg.width}));
  }

  if (captures) {
    captures->clear();
    captures->resize(static_cast<size_t>(cfg.layers));
  }

  for (int64_t i = 0; i < cfg.layers; ++i) {
    const BoundLayer& l = m.layers[static_cast<size_t>(i)];
    GateCapture* cap = captures ? &(*captures)[static_cast<size_t>(i)] : nullptr;
    const MemoryWeights mem = layer_memory(m, i, Value(), ForwardOptions{});
    LayerKvCache& cache = state.layers[static_cast<size_t>(i)];

    Value xn = rmsnorm(x, l.norm1_gain);
    Value attn_out;
    if (cfg.is_mla()) {
      MlaWeights w;
      w.w_query = l.w_query;
      w.w_dkv = l.w_dkv;
      w.w_uk = l.w_uk;
      w.w_uv = l.w_uv;
      w.w_out = l.w_out;
      w.heads = cfg.heads;
      w.latent_heads = cfg.latent_heads;
      w.keys_from_augmented = cfg.mla_keys_from_augmented;
      attn_out = mla_decode_step(xn, token, state.len, w, mem, cache, state.fused[static_cast<size_t>(i)],
                                 params.version, cap);
    } else {
      AttnWeights w{l.w_query, l.w_key, l.w_value, l.w_out, cfg.heads, /*use_rope=*/true, cfg.rope_base};
      attn_out = decode_step(xn, token, state.len, w, mem, cache, cap);
    }
    x = add(x, attn_out);

    Value xn2 = rmsnorm(x, l.norm2_gain);
    Value mid = gelu(matmul(xn2, l.ffn_in));
    x = add(x, matmul(mid, l.ffn_out));
  }

  Value logits = matmul(rmsnorm(x, m.final_norm_gain), m.head);
  state.len += 1;
  auto span = logits.data();
  return Array(Shape{cfg.vocab}, {span.begin(), span.end()});
}

namespace {

int64_t sample_from_logits(std::span<const double> logits, double temperature, Rng& rng) {
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> w(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp((logits[i] - mx) / temperature);
    sum += w[i];
  }
  const double u = rng.uniform() * sum;
  double acc = 0.0;
  for (size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return static_cast<int64_t>(i);
  }
  return static_cast<int64_t>(w.size()) - 1;
}

}  // namespace

std::vector<int64_t> generate(const ModelParams& params, std::span<const int64_t> prompt, int64_t steps,
                              const GenerateOptions& options) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be nonempty");
  if (steps < 0) throw std::invalid_argument("generate: negative step budget");
  std::vector<int64_t> out(prompt.begin(), prompt.end());
  if (steps == 0) return out;
  if (options.mode == GenerateOptions::Mode::temperature && !(options.temperature > 0.0))
    throw std::invalid_argument("generate: temperature must be positive");

  Rng rng(options.seed);
  DecodeState state = make_decode_state(params);
  Array logits;
  for (int64_t tok : prompt) logits = decode_logits(params, state, tok);
  for (int64_t i = 0; i < steps; ++i) {
    int64_t next;
    if (options.mode == GenerateOptions::Mode::greedy) {
      next = argmax(logits.data());
    } else {
      next = sample_from_logits(logits.data(), options.temperature, rng);
    }
    out.push_back(next);
    if (i + 1 < steps) logits = decode_logits(params, state, next);
  }
  return out;
}

}  // namespace movelab
