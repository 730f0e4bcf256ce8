// movelab: train, evaluate, and analyze value-embedding-augmented
// transformers from declarative key=value config files. Subcommands:
//   train     one model on the configured task
//   sweep     a matched-budget comparison across variants and seeds
//   eval      bits-per-byte of a checkpoint on a UTF-8 text file
//   generate  autoregressive continuation from a checkpoint
//   flops     closed-form per-token cost report
//   trace     routing-trace tables from a checkpoint and a sentence file
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "movelab/checkpoint.hpp"
#include "movelab/costmodel.hpp"
#include "movelab/data.hpp"
#include "movelab/model.hpp"
#include "movelab/routelab.hpp"
#include "movelab/runconfig.hpp"
#include "movelab/trainer.hpp"

namespace fs = std::filesystem;
using namespace movelab;

namespace {

constexpr const char* kToolVersion = "movelab 0.1.0";

extern "C" void openblas_set_num_threads(int) __attribute__((weak));

void limit_blas_threads(int n) {
  if (openblas_set_num_threads) openblas_set_num_threads(n);
}

int64_t parse_scale(const std::string& s) {
  if (s.empty() || s == "0") return 0;
  const std::string body = s[0] == 'x' || s[0] == 'X' ? s.substr(1) : s;
  return std::stoll(body);
}

// variant spec string: name[:scale][:std_path], e.g. "move:x4" or
// "move:x1:ungated"
ModelConfig variant_from_spec(ModelConfig base, const std::string& spec) {
  std::vector<std::string> parts;
  std::istringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ':')) parts.push_back(part);
  if (parts.empty()) throw std::invalid_argument("empty variant spec");
  base.variant = variant_from_name(parts[0]);
  if (!base.has_memory()) base.scale = 0;
  for (size_t i = 1; i < parts.size(); ++i) {
    if (parts[i] == "gated") base.std_path = StdPath::gated;
    else if (parts[i] == "ungated") base.std_path = StdPath::ungated;
    else base.scale = parse_scale(parts[i]);
  }
  return base;
}

ModelConfig model_from_config(const RunConfig& cfg) {
  ModelConfig m;
  m.variant = variant_from_name(cfg.get_str("variant", "standard"));
  m.layers = cfg.get_int("layers");
  m.width = cfg.get_int("width");
  m.heads = cfg.get_int("heads");
  m.context = cfg.get_int("context");
  m.scale = parse_scale(cfg.get_str("scale", m.has_memory() ? "x1" : "0"));
  m.std_path = cfg.get_str("std_path", "gated") == "ungated" ? StdPath::ungated : StdPath::gated;
  m.latent_dim = cfg.get_int("latent_dim", 0);
  m.latent_heads = cfg.get_int("latent_heads", 0);
  m.mla_keys_from_augmented = cfg.get_str("mla_keys", "augmented") != "raw";
  m.rope_base = cfg.get_double("rope_base", 10000.0);
  m.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  return m;
}

TrainConfig train_from_config(const RunConfig& cfg) {
  TrainConfig t;
  t.steps = cfg.get_int("steps");
  t.batch_seq = cfg.get_int("batch_seq");
  t.seq_len = cfg.get_int("seq_len");
  t.lr = cfg.get_double("lr", 1e-3);
  t.warmup_frac = cfg.get_double("warmup_frac", 0.02);
  t.lr_floor_frac = cfg.get_double("lr_floor_frac", 0.1);
  t.weight_decay = cfg.get_double("weight_decay", 0.0);
  t.clip_norm = cfg.get_double("clip_norm", 1.0);
  t.eval_interval = cfg.get_int("eval_interval", 0);
  t.eval_max_windows = cfg.get_int("eval_max_windows", 0);
  t.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  return t;
}

struct TaskData {
  TrainData data;
  int64_t vocab = 0;
  std::optional<FactCorpus> facts;
};

TaskData build_task(const RunConfig& cfg, const TrainConfig& train) {
  TaskData out;
  const std::string task = cfg.get_str("task", "facts");
  if (task == "facts") {
    FactTaskSpec spec;
    spec.key_vocab = cfg.get_int("key_vocab");
    spec.def_len = cfg.get_int("def_len", 12);
    spec.facts = cfg.get_int("facts");
    spec.key_length = cfg.get_int("key_length", 2);
    spec.def_vocab = cfg.get_int("def_vocab", 64);
    spec.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
    const int64_t need = train.steps * train.tokens_per_step() + train.seq_len + 1;
    const int64_t epoch_tokens = spec.facts * spec.fact_len();
    const int64_t epochs = std::max<int64_t>(1, (need + epoch_tokens - 1) / epoch_tokens);
    FactCorpus corpus = gen_fact_corpus(spec, epochs);
    out.vocab = spec.vocab();
    out.data.train_tokens = std::move(corpus.train_tokens);
    out.data.eval_tokens = corpus.eval_tokens;
    out.data.eval_target_mask = corpus.eval_target_mask;
    out.data.byte_level = false;
    corpus.train_tokens.clear();
    out.facts = std::move(corpus);
  } else if (task == "text") {
    const std::string path = cfg.get_str("text_path");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("text_path not found: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    TokenSequence seq = tokenize_bytes(text);
    SplitTokens split = split_holdout(seq.tokens, cfg.get_double("eval_frac", 0.05));
    out.vocab = kByteVocab;
    out.data.train_tokens = std::move(split.train);
    out.data.eval_tokens = std::move(split.eval);
    out.data.byte_level = true;
  } else {
    throw std::invalid_argument("unknown task '" + task + "' (expected facts or text)");
  }
  return out;
}

void write_summary(const fs::path& path, const std::vector<RunResult>& results) {
  std::ofstream out(path);
  out << "label                          eval_loss      bpb     params\n";
  for (const RunResult& r : results) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-28s %10.6f %8.4f %10lld\n", r.ledger.label.c_str(),
                  r.ledger.final_eval_loss, r.ledger.final_bpb, static_cast<long long>(r.ledger.audit.total));
    out << line;
  }
}

int cmd_train(const std::string& config_path, const std::string& out_dir, int64_t seed_override, bool have_seed,
              int verbosity) {
  RunConfig cfg = RunConfig::from_file(config_path);
  if (have_seed) cfg.set("seed", std::to_string(seed_override));
  fs::create_directories(out_dir);

  TrainConfig tc = train_from_config(cfg);
  TaskData task = build_task(cfg, tc);
  ModelConfig mc = model_from_config(cfg);
  mc.vocab = task.vocab;
  mc.validate();
  tc.validate();

  cfg.set("vocab", std::to_string(mc.vocab));
  cfg.write_manifest(fs::path(out_dir) / "manifest.txt", kToolVersion);
  if (task.facts) save_fact_table(fs::path(out_dir) / "facts.txt", *task.facts);

  if (verbosity > 0)
    std::cerr << "training " << variant_name(mc.variant) << " for " << tc.steps << " steps ("
              << tc.tokens_per_step() << " tokens/step)\n";
  const auto progress = [&](const std::string& label, const LedgerRecord& rec) {
    if (verbosity > 0)
      std::cerr << label << " step " << rec.step << " train_loss " << rec.train_loss << " eval_loss "
                << rec.eval_loss << "\n";
  };
  RunResult run = run_training(mc, tc, task.data, variant_name(mc.variant), progress);
  write_ledger_records(fs::path(out_dir) / "ledger.jsonl", run.ledger);
  const std::string dtype = cfg.get_str("ckpt_dtype", "f64");
  checkpoint_save(fs::path(out_dir) / "model.ckpt", run.params, &run.opt,
                  dtype == "f32" ? StorageDtype::f32 : StorageDtype::f64);
  std::cout << "final eval_loss " << run.ledger.final_eval_loss;
  if (task.data.byte_level) std::cout << " bpb " << run.ledger.final_bpb;
  std::cout << " (ledger: " << (fs::path(out_dir) / "ledger.jsonl").string() << ")\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir, int jobs, int verbosity) {
  RunConfig cfg = RunConfig::from_file(config_path);
  fs::create_directories(out_dir);

  std::vector<std::string> specs;
  {
    std::istringstream ss(cfg.get_str("sweep"));
    std::string s;
    while (ss >> s) specs.push_back(s);
  }
  if (specs.empty()) throw std::invalid_argument("sweep: the 'sweep' key lists no variant specs");
  std::vector<uint64_t> seeds;
  {
    std::istringstream ss(cfg.get_str("seeds", cfg.get_str("seed", "0")));
    std::string s;
    while (ss >> s) seeds.push_back(std::stoull(s));
  }
  if (jobs > 1) limit_blas_threads(1);

  cfg.write_manifest(fs::path(out_dir) / "manifest.txt", kToolVersion);

  std::vector<RunResult> all;
  for (uint64_t seed : seeds) {
    RunConfig seeded = cfg;
    seeded.set("seed", std::to_string(seed));
    TrainConfig tc = train_from_config(seeded);
    TaskData task = build_task(seeded, tc);
    ModelConfig base = model_from_config(seeded);
    base.vocab = task.vocab;

    std::vector<ModelConfig> configs;
    std::vector<std::string> labels;
    for (const std::string& spec : specs) {
      configs.push_back(variant_from_spec(base, spec));
      labels.push_back(spec + "_seed" + std::to_string(seed));
    }
    if (verbosity > 0)
      std::cerr << "sweep seed " << seed << ": " << configs.size() << " variants x " << tc.steps << " steps\n";
    std::vector<RunResult> results = run_experiment(configs, tc, task.data, labels, jobs);
    for (RunResult& r : results) {
      const fs::path run_dir = fs::path(out_dir) / r.ledger.label;
      fs::create_directories(run_dir);
      write_ledger_records(run_dir / "ledger.jsonl", r.ledger);
      checkpoint_save(run_dir / "model.ckpt", r.params, nullptr);
      all.push_back(std::move(r));
    }
  }
  write_summary(fs::path(out_dir) / "summary.txt", all);
  for (const RunResult& r : all)
    std::cout << r.ledger.label << " eval_loss " << r.ledger.final_eval_loss << "\n";
  std::cout << "summary: " << (fs::path(out_dir) / "summary.txt").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& text_path, int64_t seq_len, int64_t batch_seq,
             bool machine) {
  LoadedCheckpoint loaded = checkpoint_load(ckpt_path);
  if (loaded.params.config.vocab != kByteVocab)
    throw std::invalid_argument("eval: checkpoint vocab " + std::to_string(loaded.params.config.vocab) +
                                " is not byte-level; eval expects a text model");
  std::ifstream in(text_path, std::ios::binary);
  if (!in) throw std::invalid_argument("eval: text file not found: " + text_path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  TokenSequence seq = tokenize_bytes(text);
  if (seq_len <= 0) seq_len = loaded.params.config.context;
  EvalResult r = evaluate(loaded.params, seq.tokens, nullptr, seq_len, batch_seq);
  EvalReport report = bits_per_byte(r.total_nats, r.targets_counted, r.bytes_counted,
                                    variant_name(loaded.params.config.variant));
  if (machine) {
    std::cout << "total_loss_nats=" << report.total_loss_nats << "\n"
              << "token_count=" << report.token_count << "\n"
              << "byte_count=" << report.byte_count << "\n"
              << "bpb=" << report.bpb << "\n";
  } else {
    std::cout << "evaluated " << report.token_count << " targets (" << report.byte_count << " bytes): bpb "
              << report.bpb << ", mean nats/token " << r.mean_nats << "\n";
  }
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& prompt, int64_t steps, const std::string& mode,
                 double temperature, int64_t seed) {
  LoadedCheckpoint loaded = checkpoint_load(ckpt_path);
  GenerateOptions opts;
  if (mode == "greedy") {
    opts.mode = GenerateOptions::Mode::greedy;
  } else if (mode == "temperature") {
    opts.mode = GenerateOptions::Mode::temperature;
    opts.temperature = temperature;
    opts.seed = static_cast<uint64_t>(seed);
  } else {
    throw std::invalid_argument("generate: unknown mode '" + mode + "' (greedy | temperature)");
  }

  std::vector<int64_t> prompt_tokens;
  const bool byte_model = loaded.params.config.vocab == kByteVocab;
  if (byte_model) {
    prompt_tokens = tokenize_bytes(prompt).tokens;
  } else {
    std::istringstream ss(prompt);
    std::string tok;
    while (ss >> tok) prompt_tokens.push_back(std::stoll(tok));
  }
  std::vector<int64_t> out = generate(loaded.params, prompt_tokens, steps, opts);
  if (byte_model) {
    std::cout << detokenize_bytes(out) << "\n";
  } else {
    for (size_t i = 0; i < out.size(); ++i) std::cout << (i ? " " : "") << out[i];
    std::cout << "\n";
  }
  return 0;
}

int cmd_flops(int64_t d, int64_t heads, int64_t slots, int64_t seq, bool machine) {
  FlopReport rep = flop_report(d, heads, slots, seq);
  if (machine) {
    std::cout << "d=" << rep.d << "\nheads=" << rep.heads << "\nslots=" << rep.slots << "\nseq=" << rep.seq
              << "\nc_proj=" << rep.c_proj << "\nc_ffn=" << rep.c_ffn << "\nc_sdpa=" << rep.c_sdpa
              << "\nc_std=" << rep.c_std << "\nc_move=" << rep.c_move << "\nratio_num=" << rep.ratio_num
              << "\nratio_den=" << rep.ratio_den << "\nratio_num_lowest=" << rep.ratio_num_lowest
              << "\nratio_den_lowest=" << rep.ratio_den_lowest << "\nratio=" << rep.ratio << "\n";
    return 0;
  }
  char pct[32];
  std::snprintf(pct, sizeof(pct), "%.2f%%", rep.ratio * 100.0);
  std::cout << "per-token FLOPs (d=" << rep.d << ", H=" << rep.heads << ", M=" << rep.slots << ", T=" << rep.seq
            << ")\n";
  std::cout << "  projections  8d^2      = " << rep.c_proj << "\n";
  std::cout << "  feed-forward 16d^2     = " << rep.c_ffn << "\n";
  std::cout << "  attention    4Td       = " << rep.c_sdpa << "\n";
  std::cout << "  baseline     24d^2+4Td = " << rep.c_std << "\n";
  std::cout << "  routing      2dH(M+1)  = " << rep.c_move << "\n";
  std::cout << "  overhead ratio = " << rep.ratio_num << "/" << rep.ratio_den << " = " << rep.ratio_num_lowest
            << "/" << rep.ratio_den_lowest << " ~ " << pct << "\n";
  std::cout << "  excluded from the model:";
  for (const auto& e : rep.excluded) std::cout << " " << e << ";";
  std::cout << "\n";
  return 0;
}

int cmd_trace(const std::string& ckpt_path, const std::string& sentences_path, int64_t target_id,
              const std::string& target_word, const std::string& out_dir) {
  LoadedCheckpoint loaded = checkpoint_load(ckpt_path);
  const ModelParams& params = loaded.params;
  if (!params.config.has_global_bank())
    throw std::invalid_argument("trace: checkpoint variant '" + variant_name(params.config.variant) +
                                "' has no shared bank to trace");

  std::ifstream in(sentences_path);
  if (!in) throw std::invalid_argument("trace: sentence file not found: " + sentences_path);
  // sentence file: context<TAB>role<TAB>text, context in {short, medium,
  // long}, role in {A1, A2, B1}
  std::map<std::string, std::map<std::string, std::string>> grid;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos)
      throw std::invalid_argument(sentences_path + ":" + std::to_string(lineno) +
                                  ": expected context<TAB>role<TAB>text");
    std::string context = line.substr(0, tab1);
    std::string role = line.substr(tab1 + 1, tab2 - tab1 - 1);
    std::transform(context.begin(), context.end(), context.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (context != "short" && context != "medium" && context != "long")
      throw std::invalid_argument(sentences_path + ":" + std::to_string(lineno) + ": unknown context '" + context +
                                  "'");
    if (role != "A1" && role != "A2" && role != "B1")
      throw std::invalid_argument(sentences_path + ":" + std::to_string(lineno) + ": unknown role '" + role + "'");
    grid[context][role] = line.substr(tab2 + 1);
  }
  for (const char* context : {"short", "medium", "long"}) {
    auto it = grid.find(context);
    std::string missing;
    for (const char* role : {"A1", "A2", "B1"}) {
      if (it == grid.end() || !it->second.count(role)) missing += missing.empty() ? role : std::string(", ") + role;
    }
    if (!missing.empty())
      throw std::invalid_argument("trace: context '" + std::string(context) + "' is missing roles: " + missing);
  }

  const bool byte_model = params.config.vocab == kByteVocab;
  std::vector<int64_t> word_tokens;
  if (target_id < 0) {
    if (target_word.empty()) throw std::invalid_argument("trace: provide --target-id or --target");
    if (!byte_model)
      throw std::invalid_argument("trace: --target needs a byte-level model; use --target-id for this vocab");
    word_tokens = tokenize_bytes(target_word).tokens;
    if (word_tokens.empty()) throw std::invalid_argument("trace: empty --target word");
  }

  auto tokens_of = [&](const std::string& text) {
    std::vector<int64_t> toks;
    if (byte_model) {
      toks = tokenize_bytes(text).tokens;
    } else {
      std::istringstream ss(text);
      std::string tok;
      while (ss >> tok) toks.push_back(std::stoll(tok));
    }
    return toks;
  };
  auto capture = [&](const std::string& text, const std::string& context, const std::string& role) {
    const std::vector<int64_t> toks = tokens_of(text);
    if (target_id >= 0) return capture_trace(params, toks, target_id, context, role);
    const std::vector<int64_t> ends = find_subsequence_ends(toks, word_tokens);
    return capture_trace_at(params, toks, ends, word_tokens.back(), context, role);
  };

  std::vector<TraceTriple> triples;
  for (const char* context : {"Short", "Medium", "Long"}) {
    std::string key = context;
    std::transform(key.begin(), key.end(), key.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    TraceTriple t;
    t.a1 = capture(grid[key]["A1"], context, "A1");
    t.a2 = capture(grid[key]["A2"], context, "A2");
    t.b1 = capture(grid[key]["B1"], context, "B1");
    triples.push_back(std::move(t));
  }
  std::vector<TraceDiff> diffs = diff_traces(triples);
  std::vector<TraceRow> rows = trace_rows(triples, diffs);

  fs::create_directories(out_dir);
  export_trace_csv(fs::path(out_dir) / "trace.csv", rows);
  export_trace_records(fs::path(out_dir) / "trace_records.jsonl", rows);
  export_trace_per_head_csv(fs::path(out_dir) / "trace_per_head.csv", triples);
  for (const TraceDiff& d : diffs) {
    if (d.degenerate) std::cout << d.context << ": degenerate (all differentials zero), normalization skipped\n";
  }
  std::cout << "wrote " << rows.size() << " rows to " << (fs::path(out_dir) / "trace.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{kToolVersion};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run_out", ckpt_path, text_path, prompt, mode = "greedy";
  std::string sentences_path, target_word;
  int64_t seed_override = 0, steps = 32, seq_len = 0, batch_seq = 4, target_id = -1;
  int64_t flops_d = 0, flops_h = 0, flops_m = 0, flops_t = 0;
  double temperature = 1.0;
  int jobs = 1, verbosity = 0;
  bool machine = false;

  CLI::App* train = app.add_subcommand("train", "train one model from a config file");
  train->add_option("--config", config_path, "key=value config file")->required();
  train->add_option("--out", out_dir, "output directory");
  CLI::Option* train_seed = train->add_option("--seed", seed_override, "override the config seed");
  train->add_flag("-v,--verbose", verbosity, "progress to stderr");

  CLI::App* sweep = app.add_subcommand("sweep", "matched-budget comparison across variants and seeds");
  sweep->add_option("--config", config_path, "key=value config file with a 'sweep' list")->required();
  sweep->add_option("--out", out_dir, "output directory");
  sweep->add_option("--jobs", jobs, "parallel training runs");
  sweep->add_flag("-v,--verbose", verbosity, "progress to stderr");

  CLI::App* eval = app.add_subcommand("eval", "bits-per-byte of a checkpoint on a text file");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--text", text_path, "UTF-8 text file")->required();
  eval->add_option("--seq", seq_len, "window length (default: model context)");
  eval->add_option("--batch", batch_seq, "windows per forward pass");
  eval->add_flag("--machine", machine, "machine-readable key=value output");

  CLI::App* gen = app.add_subcommand("generate", "continue a prompt");
  gen->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  gen->add_option("--prompt", prompt, "prompt text (byte models) or space-separated token ids")->required();
  gen->add_option("--steps", steps, "tokens to generate");
  gen->add_option("--mode", mode, "greedy | temperature");
  gen->add_option("--temp", temperature, "sampling temperature");
  gen->add_option("--seed", seed_override, "sampling seed");

  CLI::App* flops = app.add_subcommand("flops", "closed-form per-token cost report");
  flops->add_option("--d", flops_d, "model width")->required();
  flops->add_option("--heads", flops_h, "attention heads")->required();
  flops->add_option("--slots", flops_m, "memory slots M")->required();
  flops->add_option("--seq", flops_t, "context length T")->required();
  flops->add_flag("--machine", machine, "machine-readable key=value output");

  CLI::App* trace = app.add_subcommand("trace", "routing-trace tables from a checkpoint");
  trace->add_option("--ckpt", ckpt_path, "checkpoint of a shared-bank variant")->required();
  trace->add_option("--sentences", sentences_path, "context<TAB>role<TAB>text file")->required();
  trace->add_option("--target-id", target_id, "target token id");
  trace->add_option("--target", target_word, "target word (byte-level models)");
  trace->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, out_dir, seed_override, !train_seed->empty(), verbosity);
    if (sweep->parsed()) return cmd_sweep(config_path, out_dir, jobs, verbosity);
    if (eval->parsed()) return cmd_eval(ckpt_path, text_path, seq_len, batch_seq, machine);
    if (gen->parsed()) return cmd_generate(ckpt_path, prompt, steps, mode, temperature, seed_override);
    if (flops->parsed()) return cmd_flops(flops_d, flops_h, flops_m, flops_t, machine);
    if (trace->parsed()) return cmd_trace(ckpt_path, sentences_path, target_id, target_word, out_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
