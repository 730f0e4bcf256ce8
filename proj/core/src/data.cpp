#include "movelab/data.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "movelab/rng.hpp"

namespace movelab {

namespace {

bool valid_utf8(const std::string& s) {
  const auto* p = reinterpret_cast<const unsigned char*>(s.data());
  size_t i = 0, n = s.size();
  while (i < n) {
    const unsigned char b0 = p[i];
    if (b0 < 0x80) {
      i += 1;
      continue;
    }
    size_t need;
    unsigned char lo = 0x80, hi = 0xBF;
    if (b0 >= 0xC2 && b0 <= 0xDF) {
      need = 1;
    } else if (b0 == 0xE0) {
      need = 2;
      lo = 0xA0;  // reject overlong
    } else if ((b0 >= 0xE1 && b0 <= 0xEC) || b0 == 0xEE || b0 == 0xEF) {
      need = 2;
    } else if (b0 == 0xED) {
      need = 2;
      hi = 0x9F;  // reject surrogates
    } else if (b0 == 0xF0) {
      need = 3;
      lo = 0x90;
    } else if (b0 >= 0xF1 && b0 <= 0xF3) {
      need = 3;
    } else if (b0 == 0xF4) {
      need = 3;
      hi = 0x8F;  // cap at U+10FFFF
    } else {
      return false;
    }
    if (i + need >= n) return false;
    if (p[i + 1] < lo || p[i + 1] > hi) return false;
    for (size_t j = 2; j <= need; ++j) {
      if (p[i + j] < 0x80 || p[i + j] > 0xBF) return false;
    }
    i += need + 1;
  }
  return true;
}

}  // namespace

TokenSequence tokenize_bytes(const std::string& text) {
  if (!valid_utf8(text)) throw std::invalid_argument("tokenize_bytes: input is not valid UTF-8");
  TokenSequence seq;
  seq.byte_length = static_cast<int64_t>(text.size());
  seq.tokens.reserve(text.size());
  for (unsigned char c : text) seq.tokens.push_back(static_cast<int64_t>(c));
  return seq;
}

std::string detokenize_bytes(std::span<const int64_t> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int64_t t : tokens) {
    if (t < 0 || t >= kByteVocab)
      throw std::invalid_argument("detokenize_bytes: token " + std::to_string(t) + " outside byte range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

void FactTaskSpec::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("FactTaskSpec: " + why); };
  if (key_vocab < 1) fail("key_vocab must be >= 1");
  if (def_len < 1) fail("def_len must be >= 1");
  if (facts < 1) fail("facts must be >= 1");
  if (key_length < 1) fail("key_length must be >= 1");
  if (def_vocab < 2) fail("def_vocab must be >= 2");
  if (query_format != "key-sep-def") fail("unsupported query format '" + query_format + "'");
  // capacity check without overflow: key_vocab^key_length >= facts
  int64_t cap = 1;
  bool enough = false;
  for (int64_t i = 0; i < key_length; ++i) {
    cap *= key_vocab;
    if (cap >= facts) {
      enough = true;
      break;
    }
  }
  if (!enough)
    fail("key space oversubscribed: " + std::to_string(facts) + " facts need more than key_vocab^key_length = " +
         std::to_string(cap) + " distinct keys");
}

namespace {

void append_fact(std::vector<int64_t>& stream, const FactCorpus& corpus, int64_t fact) {
  const auto& key = corpus.keys[static_cast<size_t>(fact)];
  const auto& def = corpus.definitions[static_cast<size_t>(fact)];
  stream.insert(stream.end(), key.begin(), key.end());
  stream.push_back(corpus.spec.sep_token());
  stream.insert(stream.end(), def.begin(), def.end());
  stream.push_back(corpus.spec.eos_token());
}

void build_streams(FactCorpus& corpus, int64_t train_epochs) {
  const FactTaskSpec& spec = corpus.spec;
  std::vector<int64_t> order(static_cast<size_t>(spec.facts));
  for (int64_t i = 0; i < spec.facts; ++i) order[static_cast<size_t>(i)] = i;

  corpus.train_tokens.clear();
  corpus.train_tokens.reserve(static_cast<size_t>(train_epochs * spec.facts * spec.fact_len()));
  for (int64_t e = 0; e < train_epochs; ++e) {
    Rng rng = Rng::for_name(spec.seed, "epoch" + std::to_string(e));
    rng.shuffle(order);
    for (int64_t f : order) append_fact(corpus.train_tokens, corpus, f);
  }

  Rng rng = Rng::for_name(spec.seed, "eval-order");
  rng.shuffle(order);
  corpus.eval_tokens.clear();
  corpus.eval_tokens.reserve(static_cast<size_t>(spec.facts * spec.fact_len()));
  for (int64_t f : order) append_fact(corpus.eval_tokens, corpus, f);

  corpus.eval_target_mask.assign(corpus.eval_tokens.size(), 0);
  for (size_t i = 0; i + 1 < corpus.eval_tokens.size(); ++i) {
    const int64_t target = corpus.eval_tokens[i + 1];
    if (target >= spec.key_vocab && target < spec.key_vocab + spec.def_vocab) corpus.eval_target_mask[i] = 1;
  }
}

}  // namespace

FactCorpus gen_fact_corpus(const FactTaskSpec& spec, int64_t train_epochs) {
  spec.validate();
  if (train_epochs < 1) throw std::invalid_argument("gen_fact_corpus: train_epochs must be >= 1");
  FactCorpus corpus;
  corpus.spec = spec;

  Rng key_rng = Rng::for_name(spec.seed, "fact-keys");
  std::set<std::vector<int64_t>> seen;
  corpus.keys.reserve(static_cast<size_t>(spec.facts));
  while (static_cast<int64_t>(corpus.keys.size()) < spec.facts) {
    std::vector<int64_t> key(static_cast<size_t>(spec.key_length));
    for (auto& k : key) k = key_rng.uniform_int(spec.key_vocab);
    if (seen.insert(key).second) corpus.keys.push_back(std::move(key));
  }

  Rng def_rng = Rng::for_name(spec.seed, "fact-defs");
  corpus.definitions.reserve(static_cast<size_t>(spec.facts));
  for (int64_t f = 0; f < spec.facts; ++f) {
    std::vector<int64_t> def(static_cast<size_t>(spec.def_len));
    for (auto& t : def) t = spec.key_vocab + def_rng.uniform_int(spec.def_vocab);
    corpus.definitions.push_back(std::move(def));
  }

  build_streams(corpus, train_epochs);
  return corpus;
}

void save_fact_table(const std::filesystem::path& path, const FactCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_fact_table: cannot open " + path.string());
  const FactTaskSpec& s = corpus.spec;
  out << "movelab-facts v1 key_vocab=" << s.key_vocab << " def_len=" << s.def_len << " facts=" << s.facts
      << " key_length=" << s.key_length << " def_vocab=" << s.def_vocab << " query_format=" << s.query_format
      << " seed=" << s.seed << "\n";
  for (int64_t f = 0; f < s.facts; ++f) {
    const auto& key = corpus.keys[static_cast<size_t>(f)];
    const auto& def = corpus.definitions[static_cast<size_t>(f)];
    for (size_t i = 0; i < key.size(); ++i) out << (i ? " " : "") << key[i];
    out << " ->";
    for (int64_t t : def) out << ' ' << t;
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_fact_table: write failed for " + path.string());
}

FactCorpus load_fact_table(const std::filesystem::path& path, int64_t train_epochs) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_fact_table: cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic, version;
  hs >> magic >> version;
  if (magic != "movelab-facts" || version != "v1")
    throw std::runtime_error("load_fact_table: bad header in " + path.string());
  FactTaskSpec spec;
  std::string kv;
  while (hs >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::runtime_error("load_fact_table: bad header field '" + kv + "'");
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    if (key == "key_vocab") spec.key_vocab = std::stoll(value);
    else if (key == "def_len") spec.def_len = std::stoll(value);
    else if (key == "facts") spec.facts = std::stoll(value);
    else if (key == "key_length") spec.key_length = std::stoll(value);
    else if (key == "def_vocab") spec.def_vocab = std::stoll(value);
    else if (key == "query_format") spec.query_format = value;
    else if (key == "seed") spec.seed = std::stoull(value);
  }
  spec.validate();

  FactCorpus corpus;
  corpus.spec = spec;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<int64_t> key, def;
    std::string tok;
    bool after_arrow = false;
    while (ls >> tok) {
      if (tok == "->") {
        after_arrow = true;
        continue;
      }
      (after_arrow ? def : key).push_back(std::stoll(tok));
    }
    if (static_cast<int64_t>(key.size()) != spec.key_length || static_cast<int64_t>(def.size()) != spec.def_len)
      throw std::runtime_error("load_fact_table: malformed fact line '" + line + "'");
    corpus.keys.push_back(std::move(key));
    corpus.definitions.push_back(std::move(def));
  }
  if (static_cast<int64_t>(corpus.keys.size()) != spec.facts)
    throw std::runtime_error("load_fact_table: expected " + std::to_string(spec.facts) + " facts, found " +
                             std::to_string(corpus.keys.size()));
  build_streams(corpus, train_epochs);
  return corpus;
}

ShardStream::ShardStream(std::vector<int64_t> tokens, int64_t seq, int64_t batch, uint64_t seed)
    : tokens_(std::move(tokens)), seq_(seq), batch_(batch) {
  if (seq_ < 1 || batch_ < 1) throw std::invalid_argument("ShardStream: seq and batch must be >= 1");
  if (static_cast<int64_t>(tokens_.size()) < seq_ + 1)
    throw std::invalid_argument("ShardStream: stream of " + std::to_string(tokens_.size()) +
                                " tokens is shorter than seq + 1 = " + std::to_string(seq_ + 1));
  const int64_t windows = (static_cast<int64_t>(tokens_.size()) - 1) / seq_;
  order_.resize(static_cast<size_t>(windows));
  for (int64_t i = 0; i < windows; ++i) order_[static_cast<size_t>(i)] = i;
  Rng rng = Rng::for_name(seed, "shard-order");
  rng.shuffle(order_);
}

Batch ShardStream::batch_at(int64_t step) const {
  if (step < 0) throw std::invalid_argument("ShardStream: negative step");
  Batch b;
  b.batch = batch_;
  b.seq = seq_;
  b.inputs.resize(static_cast<size_t>(batch_ * seq_));
  b.targets.resize(static_cast<size_t>(batch_ * seq_));
  const int64_t windows = static_cast<int64_t>(order_.size());
  for (int64_t i = 0; i < batch_; ++i) {
    const int64_t w = order_[static_cast<size_t>((step * batch_ + i) % windows)];
    const int64_t base = w * seq_;
    for (int64_t t = 0; t < seq_; ++t) {
      b.inputs[static_cast<size_t>(i * seq_ + t)] = tokens_[static_cast<size_t>(base + t)];
      b.targets[static_cast<size_t>(i * seq_ + t)] = tokens_[static_cast<size_t>(base + t + 1)];
    }
  }
  return b;
}

SplitTokens split_holdout(std::span<const int64_t> tokens, double eval_frac) {
  if (eval_frac <= 0.0 || eval_frac >= 1.0) throw std::invalid_argument("split_holdout: eval_frac must be in (0,1)");
  SplitTokens s;
  const int64_t n = static_cast<int64_t>(tokens.size());
  const int64_t eval_len = std::max<int64_t>(1, static_cast<int64_t>(static_cast<double>(n) * eval_frac));
  const int64_t train_len = n - eval_len;
  if (train_len < 1) throw std::invalid_argument("split_holdout: stream too short to split");
  s.train.assign(tokens.begin(), tokens.begin() + train_len);
  s.eval.assign(tokens.begin() + train_len, tokens.end());
  return s;
}

}  // namespace movelab
