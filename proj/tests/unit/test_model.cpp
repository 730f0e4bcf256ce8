#include <doctest.h>

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "movelab/gradcheck.hpp"
#include "movelab/model.hpp"
#include "movelab/rng.hpp"
#include "support/oracles.hpp"

using namespace movelab;

namespace {

ModelConfig tiny_config(Variant variant, int64_t scale = 0) {
  ModelConfig c;
  c.layers = 2;
  c.width = 16;
  c.heads = 4;
  c.vocab = 24;
  c.context = 12;
  c.variant = variant;
  c.scale = scale;
  c.seed = 42;
  if (c.is_mla()) {
    c.latent_dim = 8;
    c.latent_heads = 4;
  }
  return c;
}

std::vector<int64_t> tiny_tokens(int64_t n, int64_t vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int64_t> toks(static_cast<size_t>(n));
  for (auto& t : toks) t = rng.uniform_int(vocab);
  return toks;
}

}  // namespace

TEST_CASE("config validation rejects bad combinations with a reason") {
  ModelConfig c = tiny_config(Variant::move, 1);
  c.validate();

  ModelConfig bad = c;
  bad.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = c;
  bad.scale = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = c;
  bad.layers = 3;  // odd depth has no L/2 slot convention
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config(Variant::lave, 4);  // layer banks cannot scale past x2
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config(Variant::standard);
  bad.scale = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = tiny_config(Variant::mla);
  bad.latent_dim = 16;  // no compression
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("layer-bank selection follows the descending odd-index rule") {
  ModelConfig c = tiny_config(Variant::lave, 1);
  c.layers = 4;
  CHECK(c.lave_layers() == std::vector<int64_t>{3, 1});
  CHECK(c.lave_layer_selected(3));
  CHECK_FALSE(c.lave_layer_selected(2));
  CHECK(c.lave_layer_selected(1));
  CHECK_FALSE(c.lave_layer_selected(0));
  c.scale = 2;
  CHECK(c.lave_layers() == std::vector<int64_t>{3, 2, 1, 0});
}

TEST_CASE("slot convention: M = scale * L / 2") {
  ModelConfig c = tiny_config(Variant::move, 1);
  c.layers = 12;
  CHECK(c.slots() == 6);
  c.scale = 2;
  CHECK(c.slots() == 12);
  c.scale = 8;
  CHECK(c.slots() == 48);
}

TEST_CASE("bank parameter audit matches the closed form, including the +302M row") {
  // Audit from the config alone; the full-size model is never allocated.
  ModelConfig big;
  big.layers = 12;
  big.width = 768;
  big.heads = 12;
  big.vocab = 65536;
  big.context = 2048;
  big.variant = Variant::move;
  big.scale = 1;  // M = 6
  ParamAudit audit = audit_config(big);
  CHECK(audit.bank_total == 301989888);  // 65536 * 6 * 768

  big.scale = 2;  // M = 12 mirrors the doubled-capacity row
  CHECK(audit_config(big).bank_total == 603979776);
}

TEST_CASE("audit_config agrees tensor-by-tensor with a built model") {
  for (Variant v : {Variant::standard, Variant::lave, Variant::move, Variant::mla, Variant::mla_lave,
                    Variant::mla_move}) {
    CAPTURE(variant_name(v));
    ModelConfig c = tiny_config(v, v == Variant::standard || v == Variant::mla ? 0 : 2);
    ModelParams p = build_model(c);
    ParamAudit from_params = audit_params(p);
    ParamAudit from_config = audit_config(c);
    REQUIRE(from_params.tensors.size() == from_config.tensors.size());
    for (size_t i = 0; i < from_params.tensors.size(); ++i) {
      CHECK(from_params.tensors[i].name == from_config.tensors[i].name);
      CHECK(from_params.tensors[i].shape == from_config.tensors[i].shape);
    }
    CHECK(from_params.total == from_config.total);
    CHECK(from_params.bank_total == from_config.bank_total);
    CHECK(from_params.router_total == from_config.router_total);
    // totals equal the sum of audited tensor sizes
    int64_t sum = 0;
    for (const auto& e : from_params.tensors) sum += e.count;
    CHECK(sum == from_params.total);
  }
}

TEST_CASE("memory tensors start at zero; shared tensors agree across variants of one seed") {
  ModelParams move = build_model(tiny_config(Variant::move, 2));
  ModelParams std_model = build_model(tiny_config(Variant::standard));
  CHECK(exactly_equal(move.tok_emb, std_model.tok_emb));
  CHECK(exactly_equal(move.head, std_model.head));
  CHECK(exactly_equal(move.layers[0].w_query, std_model.layers[0].w_query));
  CHECK(exactly_equal(move.layers[1].ffn_in, std_model.layers[1].ffn_in));
  for (double v : move.value_bank.data()) CHECK(v == 0.0);
  for (double v : move.layers[0].router.data()) CHECK(v == 0.0);
}

TEST_CASE("reduction web: zeroed memory variants equal their memory-free counterparts exactly") {
  const auto tokens = tiny_tokens(10, 24, 7);
  Array std_logits = forward_logits(build_model(tiny_config(Variant::standard)), tokens);
  Array mla_logits = forward_logits(build_model(tiny_config(Variant::mla)), tokens);

  for (auto [variant, scale] : {std::pair{Variant::move, int64_t{2}}, {Variant::lave, 1}, {Variant::move, 8}}) {
    CAPTURE(variant_name(variant));
    Array got = forward_logits(build_model(tiny_config(variant, scale)), tokens);
    CHECK(exactly_equal(got, std_logits));
  }
  for (auto [variant, scale] : {std::pair{Variant::mla_move, int64_t{2}}, {Variant::mla_lave, 2}}) {
    CAPTURE(variant_name(variant));
    Array got = forward_logits(build_model(tiny_config(variant, scale)), tokens);
    CHECK(exactly_equal(got, mla_logits));
  }
}

TEST_CASE("forward causality probe and shape") {
  ModelParams p = build_model(tiny_config(Variant::move, 2));
  perturb_params(p, 0.02, 5);
  auto tokens = tiny_tokens(9, 24, 11);
  Array logits = forward_logits(p, tokens);
  CHECK(logits.shape() == Shape{9, 24});
  auto flipped = tokens;
  flipped[8] = (flipped[8] + 1) % 24;
  Array logits2 = forward_logits(p, flipped);
  for (int64_t t = 0; t < 8; ++t)
    for (int64_t v = 0; v < 24; ++v) CHECK(std::fabs(logits.at({t, v}) - logits2.at({t, v})) <= 1e-12);
  CHECK_THROWS_AS(forward_logits(p, std::vector<int64_t>{0, 99}), std::invalid_argument);
}

TEST_CASE("ar_loss spec cases and enumeration oracle") {
  // uniform logits over 256 classes
  Array logits(Shape{3, 256});
  const int64_t targets[3] = {0, 100, 255};
  ArLossValue lv = ar_loss(logits, targets);
  for (double nats : lv.per_token) CHECK(nats == doctest::Approx(std::log(256.0)).epsilon(1e-13));

  // one-hot-correct logits with a large margin
  Array hot(Shape{1, 5});
  hot.ptr()[3] = 60.0;
  const int64_t t3[1] = {3};
  CHECK(ar_loss(hot, t3).total_nats <= 1e-12);

  // 3-token vocab: direct probability enumeration
  Array small(Shape{2, 3}, {0.3, -1.2, 0.4, 2.0, 0.0, -0.5});
  const int64_t ts[2] = {2, 0};
  ArLossValue got = ar_loss(small, ts);
  double expect = 0.0;
  for (int64_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (int64_t c = 0; c < 3; ++c) z += std::exp(small.at({r, c}));
    expect += -std::log(std::exp(small.at({r, ts[r]})) / z);
  }
  CHECK(got.total_nats == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("bits_per_byte formula and edge cases") {
  CHECK(bits_per_byte(std::numbers::ln2, 1, 1).bpb == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bits_per_byte(std::log(256.0) * 10, 10, 10).bpb == doctest::Approx(8.0).epsilon(1e-13));
  const double full = bits_per_byte(7.5, 4, 12).bpb;
  const double half = bits_per_byte(3.75, 4, 12).bpb;
  CHECK(half == doctest::Approx(full / 2).epsilon(1e-15));
  CHECK_THROWS_AS(bits_per_byte(1.0, 1, 0), std::invalid_argument);
  // tokenizer invariance: same text bytes and same total nats, different
  // token counts (byte vs bigram) -> identical BPB
  CHECK(bits_per_byte(5.0, 100, 100).bpb == bits_per_byte(5.0, 50, 100).bpb);
}

TEST_CASE("greedy generation matches a from-scratch no-cache oracle") {
  for (Variant v : {Variant::move, Variant::mla_move}) {
    CAPTURE(variant_name(v));
    ModelConfig c = tiny_config(v, 2);
    ModelParams p = build_model(c);
    perturb_params(p, 0.05, 9);
    const std::vector<int64_t> prompt = {3, 17, 5};
    const int64_t steps = 6;
    auto out = generate(p, prompt, steps);
    CHECK(out.size() == prompt.size() + steps);

    // oracle: recompute full forward logits from scratch at every step
    std::vector<int64_t> ref(prompt.begin(), prompt.end());
    for (int64_t s = 0; s < steps; ++s) {
      Array logits = forward_logits(p, ref);
      const int64_t t = static_cast<int64_t>(ref.size()) - 1;
      std::vector<double> row(static_cast<size_t>(c.vocab));
      for (int64_t j = 0; j < c.vocab; ++j) row[static_cast<size_t>(j)] = logits.at({t, j});
      ref.push_back(argmax(row));
    }
    CHECK(out == ref);
  }
}

TEST_CASE("generation modes: zero budget, tiny temperature limit, seeded reproducibility") {
  ModelParams p = build_model(tiny_config(Variant::standard));
  perturb_params(p, 0.05, 13);
  const std::vector<int64_t> prompt = {1, 2};
  CHECK(generate(p, prompt, 0) == prompt);

  GenerateOptions greedy;
  GenerateOptions cold;
  cold.mode = GenerateOptions::Mode::temperature;
  cold.temperature = 1e-9;
  cold.seed = 3;
  CHECK(generate(p, prompt, 5, cold) == generate(p, prompt, 5, greedy));

  GenerateOptions warm;
  warm.mode = GenerateOptions::Mode::temperature;
  warm.temperature = 1.5;
  warm.seed = 77;
  CHECK(generate(p, prompt, 8, warm) == generate(p, prompt, 8, warm));
  CHECK_THROWS_AS(generate(p, {}, 3), std::invalid_argument);
}

TEST_CASE("cache parity at the model level for every variant") {
  for (auto [variant, scale] : {std::pair{Variant::standard, int64_t{0}},
                                {Variant::lave, 2},
                                {Variant::move, 2},
                                {Variant::mla, 0},
                                {Variant::mla_lave, 1},
                                {Variant::mla_move, 4}}) {
    CAPTURE(variant_name(variant));
    ModelParams p = build_model(tiny_config(variant, scale));
    perturb_params(p, 0.05, 17);
    auto tokens = tiny_tokens(8, 24, 19);
    Array full = forward_logits(p, tokens);
    DecodeState state = make_decode_state(p);
    for (size_t pos = 0; pos < tokens.size(); ++pos) {
      Array step = decode_logits(p, state, tokens[pos]);
      for (int64_t v = 0; v < 24; ++v)
        CHECK(std::fabs(step.data()[static_cast<size_t>(v)] - full.at({static_cast<int64_t>(pos), v})) <= 1e-10);
    }
  }
}

TEST_CASE("decode with a stale fused projection is rejected after a parameter change") {
  ModelParams p = build_model(tiny_config(Variant::mla));
  DecodeState state = make_decode_state(p);
  (void)decode_logits(p, state, 2);
  perturb_params(p, 0.01, 23);  // bumps the version
  CHECK_THROWS_AS(decode_logits(p, state, 3), std::invalid_argument);
}

TEST_CASE("shared-bank gradient accumulation across layers") {
  // The bank gradient of the full model equals the sum of per-layer
  // contributions obtained by detaching every other layer's retrieval.
  for (Variant variant : {Variant::move, Variant::mla_move}) {
    CAPTURE(variant_name(variant));
    ModelConfig c = tiny_config(variant, 2);
    ModelParams p = build_model(c);
    perturb_params(p, 0.05, 29);
    auto tokens = tiny_tokens(8, 24, 31);
    std::vector<int64_t> targets(tokens.begin() + 1, tokens.end());
    targets.push_back(tokens[0]);

    auto bank_grad = [&](int64_t layer) {
      Tape tape;
      BoundModel m = bind_model(tape, p, true);
      ForwardOptions opts;
      opts.bank_grad_layer = layer;
      Value logits = forward_logits(m, tokens, 1, opts);
      tape.backward(ar_loss(logits, targets).total_nats);
      return tape.grad(m.value_bank);
    };

    Array full = bank_grad(-1);
    double full_norm = 0.0;
    for (double g : full.data()) full_norm += std::fabs(g);
    CHECK(full_norm > 0.0);

    Array sum(full.shape());
    for (int64_t l = 0; l < c.layers; ++l) {
      Array part = bank_grad(l);
      double part_norm = 0.0;
      for (double g : part.data()) part_norm += std::fabs(g);
      CHECK(part_norm > 0.0);  // every layer contributes through the shared tensor
      for (int64_t i = 0; i < sum.numel(); ++i) sum.ptr()[i] += part.data()[i];
    }
    CHECK(max_abs_diff(full, sum) <= 1e-10);
  }
}

TEST_CASE("end-to-end gradient check on full two-layer models of every variant") {
  for (auto [variant, scale] : {std::pair{Variant::standard, int64_t{0}},
                                {Variant::lave, 2},
                                {Variant::move, 2},
                                {Variant::mla, 0},
                                {Variant::mla_lave, 1},
                                {Variant::mla_move, 2}}) {
    CAPTURE(variant_name(variant));
    ModelConfig c = tiny_config(variant, scale);
    c.width = 8;
    c.heads = 2;
    c.vocab = 12;
    if (c.is_mla()) {
      c.latent_dim = 4;
      c.latent_heads = 2;
    }
    ModelParams p = build_model(c);
    perturb_params(p, 0.05, 37);
    auto tokens = tiny_tokens(6, 12, 41);
    std::vector<int64_t> targets(tokens.begin() + 1, tokens.end());
    targets.push_back(tokens[0]);

    std::vector<std::string> names;
    std::vector<Array> leaves;
    p.for_each_tensor([&](const std::string& name, const Array& a) {
      names.push_back(name);
      leaves.push_back(a);
    });

    auto f = [&](Tape& tape, std::span<const Value> vals) {
      // assemble a BoundModel whose tensors are the gradcheck leaves
      BoundModel m;
      m.params = &p;
      m.tape = &tape;
      size_t j = 0;
      p.for_each_tensor([&](const std::string& name, const Array&) { m.named.emplace_back(name, vals[j++]); });
      auto find = [&](const std::string& name) {
        for (auto& [n, v] : m.named)
          if (n == name) return v;
        return Value();
      };
      m.tok_emb = find("tok_emb");
      m.pos_emb = find("pos_emb");
      m.value_bank = find("value_bank");
      m.final_norm_gain = find("final_norm.gain");
      m.head = find("head");
      m.layers.resize(p.layers.size());
      for (size_t li = 0; li < p.layers.size(); ++li) {
        const std::string prefix = "layer" + std::to_string(li) + ".";
        BoundLayer& bl = m.layers[li];
        bl.norm1_gain = find(prefix + "norm1.gain");
        bl.norm2_gain = find(prefix + "norm2.gain");
        bl.w_query = find(prefix + "attn.w_query");
        bl.w_key = find(prefix + "attn.w_key");
        bl.w_value = find(prefix + "attn.w_value");
        bl.w_dkv = find(prefix + "attn.w_dkv");
        bl.w_uk = find(prefix + "attn.w_uk");
        bl.w_uv = find(prefix + "attn.w_uv");
        bl.w_out = find(prefix + "attn.w_out");
        bl.router = find(prefix + "attn.router");
        bl.lave_bank = find(prefix + "attn.lave_bank");
        bl.lave_gate = find(prefix + "attn.lave_gate");
        bl.lave_std_gate = find(prefix + "attn.lave_std_gate");
        bl.ffn_in = find(prefix + "ffn.w_in");
        bl.ffn_out = find(prefix + "ffn.w_out");
      }
      Value logits = forward_logits(m, tokens, 1);
      return ar_loss(logits, targets).total_nats;
    };

    GradCheckReport rep = grad_check(f, leaves, {.samples_per_leaf = 4, .seed = 43});
    INFO(variant_name(variant), " worst tensor #", rep.worst.leaf, " (", names[rep.worst.leaf], ") rel err ",
         rep.max_rel_err);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}
