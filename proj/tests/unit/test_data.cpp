#include <doctest.h>

#include <filesystem>
#include <set>
#include <stdexcept>

#include "movelab/data.hpp"
#include "movelab/rng.hpp"

using namespace movelab;

TEST_CASE("byte tokenizer basics and round trip") {
  TokenSequence ab = tokenize_bytes("AB");
  CHECK(ab.tokens == std::vector<int64_t>{65, 66});
  CHECK(ab.byte_length == 2);

  TokenSequence empty = tokenize_bytes("");
  CHECK(empty.tokens.empty());
  CHECK(empty.byte_length == 0);

  Rng rng(3);
  for (int i = 0; i < 30; ++i) {
    std::string s;
    const int len = static_cast<int>(rng.uniform_int(40));
    for (int j = 0; j < len; ++j) s.push_back(static_cast<char>(rng.uniform_int(128)));  // ASCII is valid UTF-8
    TokenSequence seq = tokenize_bytes(s);
    CHECK(static_cast<int64_t>(seq.tokens.size()) == seq.byte_length);
    CHECK(detokenize_bytes(seq.tokens) == s);
  }
  // multi-byte text round-trips and counts bytes, not characters
  const std::string uni = "caf\xC3\xA9";
  TokenSequence u = tokenize_bytes(uni);
  CHECK(u.byte_length == 5);
  CHECK(detokenize_bytes(u.tokens) == uni);
}

TEST_CASE("invalid UTF-8 is rejected") {
  CHECK_THROWS_AS(tokenize_bytes(std::string("\xFF")), std::invalid_argument);
  CHECK_THROWS_AS(tokenize_bytes(std::string("\xC3")), std::invalid_argument);          // truncated
  CHECK_THROWS_AS(tokenize_bytes(std::string("\xC0\xAF")), std::invalid_argument);      // overlong
  CHECK_THROWS_AS(tokenize_bytes(std::string("\xED\xA0\x80")), std::invalid_argument);  // surrogate
}

TEST_CASE("fact corpus construction and determinism") {
  FactTaskSpec spec;
  spec.key_vocab = 32;
  spec.def_len = 4;
  spec.facts = 50;
  spec.key_length = 2;
  spec.def_vocab = 16;
  spec.seed = 11;
  FactCorpus a = gen_fact_corpus(spec, 3);
  FactCorpus b = gen_fact_corpus(spec, 3);
  CHECK(a.train_tokens == b.train_tokens);  // byte-identical across runs
  CHECK(a.eval_tokens == b.eval_tokens);

  // unique keys, exactly one definition per key
  std::set<std::vector<int64_t>> keys(a.keys.begin(), a.keys.end());
  CHECK(keys.size() == a.keys.size());

  // different seed -> different table
  FactTaskSpec spec2 = spec;
  spec2.seed = 12;
  FactCorpus c = gen_fact_corpus(spec2, 1);
  CHECK(c.keys != a.keys);

  // streams: each epoch is a permutation of whole facts
  CHECK(static_cast<int64_t>(a.train_tokens.size()) == 3 * spec.facts * spec.fact_len());
  CHECK(static_cast<int64_t>(a.eval_tokens.size()) == spec.facts * spec.fact_len());

  // eval order differs from each training epoch's order
  std::vector<int64_t> epoch0(a.train_tokens.begin(), a.train_tokens.begin() + spec.facts * spec.fact_len());
  CHECK(epoch0 != a.eval_tokens);

  // the mask marks exactly the definition targets
  for (size_t i = 0; i + 1 < a.eval_tokens.size(); ++i) {
    const int64_t target = a.eval_tokens[i + 1];
    const bool is_def = target >= spec.key_vocab && target < spec.key_vocab + spec.def_vocab;
    CHECK(static_cast<bool>(a.eval_target_mask[i]) == is_def);
  }
}

TEST_CASE("oversubscribed key space is rejected") {
  FactTaskSpec spec;
  spec.key_vocab = 4;
  spec.def_len = 2;
  spec.facts = 5;
  spec.key_length = 1;  // only 4 distinct keys available
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.key_length = 2;  // 16 keys
  spec.validate();
  // the setup mirroring the recall experiment: 2000 facts over 512 keys
  FactTaskSpec big;
  big.key_vocab = 512;
  big.def_len = 12;
  big.facts = 2000;
  big.validate();
}

TEST_CASE("fact table save/load round trip") {
  FactTaskSpec spec;
  spec.key_vocab = 16;
  spec.def_len = 3;
  spec.facts = 10;
  spec.seed = 5;
  FactCorpus a = gen_fact_corpus(spec, 2);
  const auto path = std::filesystem::temp_directory_path() / "movelab_facts_test.txt";
  save_fact_table(path, a);
  FactCorpus b = load_fact_table(path, 2);
  CHECK(a.keys == b.keys);
  CHECK(a.definitions == b.definitions);
  CHECK(a.train_tokens == b.train_tokens);
  CHECK(a.eval_tokens == b.eval_tokens);
  std::filesystem::remove(path);
}

TEST_CASE("shard stream windows, shift, and determinism") {
  std::vector<int64_t> tokens(33);
  for (size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int64_t>(i);

  // stream of length T+1 -> exactly one window
  ShardStream one(std::vector<int64_t>(tokens.begin(), tokens.begin() + 9), 8, 1, 7);
  CHECK(one.windows() == 1);
  Batch b0 = one.batch_at(0);
  for (int64_t t = 0; t < 8; ++t) {
    CHECK(b0.inputs[static_cast<size_t>(t)] == t);
    CHECK(b0.targets[static_cast<size_t>(t)] == t + 1);  // targets[i] == inputs[i+1]
  }

  // partial final window dropped: 33 tokens, seq 8 -> (33-1)/8 = 4 windows
  ShardStream s(tokens, 8, 2, 7);
  CHECK(s.windows() == 4);

  // same seed -> identical batch order across epochs
  ShardStream s2(tokens, 8, 2, 7);
  for (int64_t step = 0; step < 6; ++step) {
    Batch x = s.batch_at(step);
    Batch y = s2.batch_at(step);
    CHECK(x.inputs == y.inputs);
    CHECK(x.targets == y.targets);
  }
  // two cycles over the windows agree (2 windows per batch, 4 windows total)
  CHECK(s.batch_at(0).inputs == s.batch_at(2).inputs);

  CHECK_THROWS_AS(ShardStream(std::vector<int64_t>(5, 0), 8, 1, 7), std::invalid_argument);
}

TEST_CASE("holdout split reserves the final fraction") {
  std::vector<int64_t> tokens(1000);
  for (size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int64_t>(i);
  SplitTokens s = split_holdout(tokens, 0.05);
  CHECK(s.train.size() == 950);
  CHECK(s.eval.size() == 50);
  CHECK(s.eval.front() == 950);  // the tail of the stream
  CHECK(s.eval.back() == 999);
}
