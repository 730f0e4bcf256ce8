#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "movelab/checkpoint.hpp"
#include "movelab/data.hpp"
#include "movelab/model.hpp"

namespace movelab {

/// Optimization settings. Every variant in a comparison run shares every
/// field here, so the architecture is the sole independent variable.
struct TrainConfig {
  int64_t steps = 0;
  int64_t batch_seq = 0;     // sequences per step
  int64_t seq_len = 0;       // tokens per sequence
  double lr = 1e-3;
  double warmup_frac = 0.02; // cosine-to-floor schedule after linear warmup
  double lr_floor_frac = 0.1;
  double weight_decay = 0.0; // decoupled; banks, routers, and norms are never decayed
  double clip_norm = 1.0;    // global-norm gradient clip; <= 0 disables
  int64_t eval_interval = 0; // 0 evaluates only at the final step
  int64_t eval_max_windows = 0;  // subsample interim evals; 0 = full; the final eval is always full
  uint64_t seed = 0;

  int64_t tokens_per_step() const { return batch_seq * seq_len; }
  void validate() const;
};

double lr_at_step(const TrainConfig& config, int64_t step);

/// Raises the allocator's mmap/trim thresholds (glibc) so the multi-megabyte
/// tape buffers a training step churns through are served from the heap
/// free-list instead of fresh kernel pages. Called once by run_training;
/// safe to call from any entry point that loops over tapes.
void tune_host_allocator();

/// Whether decoupled weight decay applies to a tensor (norm gains, banks,
/// and gating projections are exempt).
bool decay_applies(const std::string& tensor_name);

AdamState init_adam_state(const ModelParams& params);

/// One AdamW update (beta 0.9/0.95, eps 1e-8, decoupled decay) over a flat
/// tensor list; `names` selects the decay exemptions and `clip_factor`
/// rescales gradients (1 = no clipping). This is the exact rule train_step
/// applies.
void adamw_update(std::span<Array*> tensors, std::span<const std::string> names,
                  std::span<const std::span<const double>> grads, AdamState& opt, const TrainConfig& config,
                  int64_t step, double clip_factor);

struct StepResult {
  double mean_loss_nats = 0.0;  // per-target mean
  double grad_norm = 0.0;       // pre-clip global norm
};

/// One forward/backward/update cycle: global-norm clipping followed by an
/// AdamW-style decoupled-weight-decay update. Aborts on a non-finite loss.
StepResult train_step(ModelParams& params, AdamState& opt, const Batch& batch, const TrainConfig& config,
                      int64_t step);

struct EvalResult {
  double total_nats = 0.0;
  int64_t targets_counted = 0;
  int64_t bytes_counted = 0;  // raw bytes behind the evaluated targets (byte corpora)
  double mean_nats = 0.0;
};

/// Next-token loss over non-overlapping windows of the eval stream,
/// optionally restricted by a per-position target mask and truncated to
/// max_windows (0 = all).
EvalResult evaluate(const ModelParams& params, std::span<const int64_t> eval_tokens,
                    const std::vector<uint8_t>* target_mask, int64_t seq_len, int64_t batch_seq,
                    int64_t max_windows = 0);

struct LedgerRecord {
  int64_t step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double bpb = 0.0;
  double wall_seconds = 0.0;
};

/// Per-run result: eval-point records reproducible from (config, seed), the
/// final parameter audit, and the trained parameters.
struct RunLedger {
  std::string label;
  ModelConfig config;
  std::vector<LedgerRecord> records;
  double final_eval_loss = 0.0;
  double final_bpb = 0.0;
  ParamAudit audit;
};

struct TrainData {
  std::vector<int64_t> train_tokens;
  std::vector<int64_t> eval_tokens;
  std::vector<uint8_t> eval_target_mask;  // empty = all targets count
  bool byte_level = false;                // tokens are bytes; BPB is exact
};

struct RunResult {
  RunLedger ledger;
  ModelParams params;
  AdamState opt;
};

/// Trains one model configuration against the shared data and schedule.
/// `on_record` (optional) observes each eval-point record as it is produced.
RunResult run_training(const ModelConfig& model_config, const TrainConfig& train_config, const TrainData& data,
                       const std::string& label,
                       const std::function<void(const std::string&, const LedgerRecord&)>& on_record = {});

/// Matched-budget comparison: every config trains on the identical token
/// stream in identical order (same TrainConfig seed), differing only in the
/// model variant. Configs must share width, layers, and heads. `jobs` > 1
/// runs configurations in parallel threads.
std::vector<RunResult> run_experiment(const std::vector<ModelConfig>& configs, const TrainConfig& train_config,
                                      const TrainData& data, const std::vector<std::string>& labels, int jobs = 1);

void write_ledger_records(const std::filesystem::path& path, const RunLedger& ledger);

}  // namespace movelab
