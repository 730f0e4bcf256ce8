#include "movelab/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace movelab {

void tune_host_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
  });
#endif
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("TrainConfig: " + why); };
  if (steps < 1) fail("steps must be >= 1");
  if (batch_seq < 1) fail("batch_seq must be >= 1");
  if (seq_len < 1) fail("seq_len must be >= 1");
  if (!(lr >= 0.0)) fail("lr must be >= 0");
  if (warmup_frac < 0.0 || warmup_frac >= 1.0) fail("warmup_frac must be in [0, 1)");
  if (lr_floor_frac < 0.0 || lr_floor_frac > 1.0) fail("lr_floor_frac must be in [0, 1]");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
}

double lr_at_step(const TrainConfig& c, int64_t step) {
  const double warmup = std::max<double>(1.0, std::floor(c.warmup_frac * static_cast<double>(c.steps)));
  if (static_cast<double>(step) < warmup) return c.lr * (static_cast<double>(step) + 1.0) / warmup;
  const double floor_lr = c.lr * c.lr_floor_frac;
  const double span = std::max(1.0, static_cast<double>(c.steps) - warmup);
  const double progress = std::min(1.0, (static_cast<double>(step) - warmup) / span);
  return floor_lr + 0.5 * (c.lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

bool decay_applies(const std::string& name) {
  if (name.find("gain") != std::string::npos) return false;
  if (name == "value_bank" || name.find("lave_bank") != std::string::npos) return false;
  if (name.find("router") != std::string::npos || name.find("lave_gate") != std::string::npos ||
      name.find("lave_std_gate") != std::string::npos)
    return false;
  return true;
}

AdamState init_adam_state(const ModelParams& params) {
  AdamState s;
  params.for_each_tensor([&](const std::string&, const Array& a) {
    s.m.emplace_back(a.shape());
    s.v.emplace_back(a.shape());
  });
  return s;
}

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.95;
constexpr double kAdamEps = 1e-8;

}  // namespace

void adamw_update(std::span<Array*> tensors, std::span<const std::string> names,
                  std::span<const std::span<const double>> grads, AdamState& opt, const TrainConfig& config,
                  int64_t step, double clip_factor) {
  if (tensors.size() != names.size() || tensors.size() != grads.size() || tensors.size() != opt.m.size())
    throw std::invalid_argument("adamw_update: tensor/name/grad/state counts disagree");
  const double lr = lr_at_step(config, step);
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(opt.step));
  for (size_t idx = 0; idx < tensors.size(); ++idx) {
    Array& tensor = *tensors[idx];
    std::span<const double> grad = grads[idx];
    Array& m = opt.m[idx];
    Array& v = opt.v[idx];
    const bool decay = config.weight_decay > 0.0 && decay_applies(names[idx]);
    for (int64_t i = 0; i < tensor.numel(); ++i) {
      const double g = (grad.empty() ? 0.0 : grad[static_cast<size_t>(i)]) * clip_factor;
      m.ptr()[i] = kBeta1 * m.ptr()[i] + (1.0 - kBeta1) * g;
      v.ptr()[i] = kBeta2 * v.ptr()[i] + (1.0 - kBeta2) * g * g;
      const double mhat = m.ptr()[i] / bc1;
      const double vhat = v.ptr()[i] / bc2;
      double x = tensor.ptr()[i];
      if (decay) x -= lr * config.weight_decay * x;
      x -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
      tensor.ptr()[i] = x;
    }
  }
}

StepResult train_step(ModelParams& params, AdamState& opt, const Batch& batch, const TrainConfig& config,
                      int64_t step) {
  Tape tape;
  BoundModel bound = bind_model(tape, params, /*trainable=*/true);
  Value logits = forward_logits(bound, batch.inputs, batch.batch);
  ArLoss loss = ar_loss(logits, batch.targets);
  const int64_t targets = static_cast<int64_t>(batch.targets.size());
  Value mean_loss = scale(loss.total_nats, 1.0 / static_cast<double>(targets));

  StepResult result;
  result.mean_loss_nats = mean_loss.data()[0];
  if (!std::isfinite(result.mean_loss_nats))
    throw std::runtime_error("train_step: non-finite loss " + std::to_string(result.mean_loss_nats) + " at step " +
                             std::to_string(step));

  tape.backward(mean_loss);

  // Global gradient norm across every tensor, then a single clip factor.
  double sq = 0.0;
  for (const auto& [name, value] : bound.named) {
    for (double g : tape.grad_data(value)) sq += g * g;
  }
  result.grad_norm = std::sqrt(sq);
  double clip_factor = 1.0;
  if (config.clip_norm > 0.0 && result.grad_norm > config.clip_norm)
    clip_factor = config.clip_norm / result.grad_norm;

  std::vector<Array*> tensors;
  std::vector<std::string> names;
  std::vector<std::span<const double>> grads;
  size_t index = 0;
  params.for_each_tensor([&](const std::string& name, Array& tensor) {
    const auto& [bound_name, value] = bound.named[index];
    if (bound_name != name) throw std::logic_error("train_step: tensor order mismatch at '" + name + "'");
    tensors.push_back(&tensor);
    names.push_back(name);
    grads.push_back(tape.grad_data(value));
    ++index;
  });
  adamw_update(tensors, names, grads, opt, config, step, clip_factor);
  params.version += 1;
  return result;
}

EvalResult evaluate(const ModelParams& params, std::span<const int64_t> eval_tokens,
                    const std::vector<uint8_t>* target_mask, int64_t seq_len, int64_t batch_seq,
                    int64_t max_windows) {
  if (static_cast<int64_t>(eval_tokens.size()) < seq_len + 1)
    throw std::invalid_argument("evaluate: eval stream shorter than one window");
  if (target_mask && target_mask->size() != eval_tokens.size())
    throw std::invalid_argument("evaluate: target mask length does not match the eval stream");

  const int64_t windows = (static_cast<int64_t>(eval_tokens.size()) - 1) / seq_len;
  const int64_t use_windows = max_windows > 0 ? std::min(windows, max_windows) : windows;

  EvalResult r;
  std::vector<int64_t> inputs, targets;
  std::vector<uint8_t> mask;
  int64_t w = 0;
  while (w < use_windows) {
    const int64_t take = std::min<int64_t>(batch_seq, use_windows - w);
    inputs.clear();
    targets.clear();
    mask.clear();
    for (int64_t b = 0; b < take; ++b) {
      const int64_t base = (w + b) * seq_len;
      for (int64_t t = 0; t < seq_len; ++t) {
        inputs.push_back(eval_tokens[static_cast<size_t>(base + t)]);
        targets.push_back(eval_tokens[static_cast<size_t>(base + t + 1)]);
        mask.push_back(target_mask ? (*target_mask)[static_cast<size_t>(base + t)] : uint8_t{1});
      }
    }
    Tape tape;
    BoundModel bound = bind_model(tape, params, /*trainable=*/false);
    Value logits = forward_logits(bound, inputs, take);
    ArLoss loss = ar_loss(logits, targets);
    auto per_token = loss.per_token.data();
    for (size_t i = 0; i < per_token.size(); ++i) {
      if (!mask[i]) continue;
      r.total_nats += per_token[i];
      r.targets_counted += 1;
    }
    w += take;
  }
  r.bytes_counted = r.targets_counted;  // byte-level corpora: one token per byte
  r.mean_nats = r.targets_counted > 0 ? r.total_nats / static_cast<double>(r.targets_counted) : 0.0;
  return r;
}

RunResult run_training(const ModelConfig& model_config, const TrainConfig& train_config, const TrainData& data,
                       const std::string& label,
                       const std::function<void(const std::string&, const LedgerRecord&)>& on_record) {
  train_config.validate();
  tune_host_allocator();
  RunResult out;
  out.params = build_model(model_config);
  out.opt = init_adam_state(out.params);
  out.ledger.label = label;
  out.ledger.config = model_config;
  out.ledger.audit = audit_params(out.params);

  ShardStream stream(data.train_tokens, train_config.seq_len, train_config.batch_seq, train_config.seed);
  const auto t0 = std::chrono::steady_clock::now();
  double last_train_loss = 0.0;

  auto record_eval = [&](int64_t step, bool final_eval) {
    const EvalResult ev =
        evaluate(out.params, data.eval_tokens, data.eval_target_mask.empty() ? nullptr : &data.eval_target_mask,
                 train_config.seq_len, train_config.batch_seq, final_eval ? 0 : train_config.eval_max_windows);
    LedgerRecord rec;
    rec.step = step;
    rec.train_loss = last_train_loss;
    rec.eval_loss = ev.mean_nats;
    rec.bpb = data.byte_level && ev.bytes_counted > 0
                  ? bits_per_byte(ev.total_nats, ev.targets_counted, ev.bytes_counted).bpb
                  : 0.0;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.ledger.records.push_back(rec);
    out.ledger.final_eval_loss = rec.eval_loss;
    out.ledger.final_bpb = rec.bpb;
    if (on_record) on_record(label, rec);
  };

  for (int64_t step = 0; step < train_config.steps; ++step) {
    const Batch batch = stream.batch_at(step);
    const StepResult sr = train_step(out.params, out.opt, batch, train_config, step);
    last_train_loss = sr.mean_loss_nats;
    const bool last = step + 1 == train_config.steps;
    if (!last && train_config.eval_interval > 0 && (step + 1) % train_config.eval_interval == 0)
      record_eval(step + 1, /*final_eval=*/false);
    if (last) record_eval(step + 1, /*final_eval=*/true);
  }
  return out;
}

std::vector<RunResult> run_experiment(const std::vector<ModelConfig>& configs, const TrainConfig& train_config,
                                      const TrainData& data, const std::vector<std::string>& labels, int jobs) {
  if (configs.empty()) throw std::invalid_argument("run_experiment: no configurations");
  if (labels.size() != configs.size()) throw std::invalid_argument("run_experiment: one label per config required");
  for (const ModelConfig& c : configs) {
    if (c.width != configs[0].width || c.layers != configs[0].layers || c.heads != configs[0].heads ||
        c.vocab != configs[0].vocab)
      throw std::invalid_argument(
          "run_experiment: mismatched comparison set (width/layers/heads/vocab must agree so the variant is the "
          "sole independent variable)");
    c.validate();
  }

  std::vector<RunResult> results(configs.size());
  if (jobs <= 1) {
    for (size_t i = 0; i < configs.size(); ++i)
      results[i] = run_training(configs[i], train_config, data, labels[i]);
    return results;
  }

  std::atomic<size_t> next{0};
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(configs.size());
  const int n_workers = std::min<int>(jobs, static_cast<int>(configs.size()));
  for (int w = 0; w < n_workers; ++w) {
    workers.emplace_back([&]() {
      while (true) {
        const size_t i = next.fetch_add(1);
        if (i >= configs.size()) return;
        try {
          results[i] = run_training(configs[i], train_config, data, labels[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

void write_ledger_records(const std::filesystem::path& path, const RunLedger& ledger) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_ledger_records: cannot open " + path.string());
  out.precision(17);
  for (const LedgerRecord& r : ledger.records) {
    out << "{\"label\":\"" << ledger.label << "\",\"step\":" << r.step << ",\"train_loss\":" << r.train_loss
        << ",\"eval_loss\":" << r.eval_loss << ",\"bpb\":" << r.bpb << ",\"wall_seconds\":" << r.wall_seconds
        << "}\n";
  }
  if (!out) throw std::runtime_error("write_ledger_records: write failed for " + path.string());
}

}  // namespace movelab
