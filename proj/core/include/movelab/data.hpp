#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace movelab {

/// Token indices plus the raw UTF-8 byte count of the originating text.
/// Under the byte tokenizer the two counts coincide, which makes BPB exact.
struct TokenSequence {
  std::vector<int64_t> tokens;
  int64_t byte_length = 0;
};

/// One token per UTF-8 byte, vocab 256. Invalid UTF-8 is rejected.
TokenSequence tokenize_bytes(const std::string& text);
std::string detokenize_bytes(std::span<const int64_t> tokens);
constexpr int64_t kByteVocab = 256;

/// Synthetic recall task: random multi-token keys map to random definition
/// strings, emitted as `key tokens, SEP, definition tokens, EOS` records in
/// shuffled order. Definitions carry no structure, so eval loss on them
/// measures pure parametric storage. With key_length 1 the fact count is
/// bounded by key_vocab; longer keys extend the bound to key_vocab^key_length.
struct FactTaskSpec {
  int64_t key_vocab = 0;
  int64_t def_len = 0;
  int64_t facts = 0;
  int64_t key_length = 2;
  int64_t def_vocab = 64;
  std::string query_format = "key-sep-def";
  uint64_t seed = 0;

  int64_t vocab() const { return key_vocab + def_vocab + 2; }
  int64_t sep_token() const { return key_vocab + def_vocab; }
  int64_t eos_token() const { return key_vocab + def_vocab + 1; }
  int64_t fact_len() const { return key_length + 1 + def_len + 1; }
  void validate() const;
};

struct FactCorpus {
  FactTaskSpec spec;
  std::vector<std::vector<int64_t>> keys;        // facts x key_length
  std::vector<std::vector<int64_t>> definitions; // facts x def_len
  std::vector<int64_t> train_tokens;             // train_epochs reshuffled passes
  std::vector<int64_t> eval_tokens;              // one pass in an order unseen during training
  std::vector<uint8_t> eval_target_mask;         // 1 where eval target is a definition token
};

/// Deterministic from the spec seed; byte-identical across platforms.
FactCorpus gen_fact_corpus(const FactTaskSpec& spec, int64_t train_epochs);

void save_fact_table(const std::filesystem::path& path, const FactCorpus& corpus);
FactCorpus load_fact_table(const std::filesystem::path& path, int64_t train_epochs);

/// Fixed-windows batches with targets shifted by one.
struct Batch {
  std::vector<int64_t> inputs;   // batch * seq
  std::vector<int64_t> targets;  // batch * seq
  int64_t batch = 0, seq = 0;
};

/// Deterministic batch schedule over non-overlapping windows of `seq`
/// tokens: windows are shuffled once from the seed and the schedule cycles,
/// so batch k is a pure function of (stream, seq, batch, seed, k). The final
/// partial window is dropped. Rejects streams shorter than seq + 1.
class ShardStream {
 public:
  ShardStream(std::vector<int64_t> tokens, int64_t seq, int64_t batch, uint64_t seed);
  Batch batch_at(int64_t step) const;
  int64_t windows() const { return static_cast<int64_t>(order_.size()); }
  int64_t tokens_per_batch() const { return batch_ * seq_; }

 private:
  std::vector<int64_t> tokens_;
  std::vector<int64_t> order_;
  int64_t seq_ = 0, batch_ = 0;
};

/// Splits text-corpus tokens into train/eval, reserving the final `frac`
/// (default 5%) for evaluation.
struct SplitTokens {
  std::vector<int64_t> train;
  std::vector<int64_t> eval;
};
SplitTokens split_holdout(std::span<const int64_t> tokens, double eval_frac = 0.05);

}  // namespace movelab
