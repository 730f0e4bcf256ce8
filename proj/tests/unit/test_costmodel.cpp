#include <doctest.h>

#include <numeric>

#include "movelab/costmodel.hpp"
#include "movelab/model.hpp"
#include "movelab/rng.hpp"
#include "movelab/tape.hpp"

using namespace movelab;

TEST_CASE("flops_std components and worked values") {
  StdFlops f = flops_std(2048, 2048);
  CHECK(f.c_proj == 8 * 2048 * 2048);
  CHECK(f.c_ffn == 16 * 2048 * 2048);
  CHECK(f.c_sdpa == 4 * 2048 * 2048);
  CHECK(f.total == 117440512);
  CHECK(f.total == f.c_proj + f.c_ffn + f.c_sdpa);

  CHECK(flops_std(64, 0).total == 24 * 64 * 64);  // degenerate T = 0
  CHECK(flops_std(128, 7).c_proj + flops_std(128, 7).c_ffn == 4 * (flops_std(64, 7).c_proj + flops_std(64, 7).c_ffn));
}

TEST_CASE("flops_move worked values and linearity") {
  CHECK(flops_move(64, 4, 0) == 2 * 64 * 4);  // standard-path gate only
  CHECK(flops_move(2048, 16, 32) == 2162688);
  const int64_t base = flops_move(100, 5, 3);
  CHECK(flops_move(100, 5, 7) - flops_move(100, 5, 3) == 2 * 100 * 5 * 4);  // linear in (M+1)
  CHECK(base == 2 * 100 * 5 * 4);
}

TEST_CASE("overhead ratio reproduces the worked example exactly") {
  OverheadRatio r = overhead_ratio(2048, 16, 32, 2048);
  CHECK(r.num == 528);
  CHECK(r.den == 28672);
  CHECK(r.num_lowest == 33);
  CHECK(r.den_lowest == 1792);
  CHECK(r.value == doctest::Approx(0.0184).epsilon(1e-2));
  CHECK(r.value * 100 == doctest::Approx(1.84).epsilon(1e-2));

  OverheadRatio r2 = overhead_ratio(768, 12, 0, 2048);
  CHECK(r2.num == 12);
  CHECK(r2.den == 13312);

  // T -> infinity drives the ratio to zero
  CHECK(overhead_ratio(64, 4, 3, 1'000'000'000).value < 1e-6);
}

TEST_CASE("ratio times the standard cost recovers the overhead exactly (rational identity)") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const int64_t d = 1 + rng.uniform_int(4096);
    const int64_t h = 1 + rng.uniform_int(64);
    const int64_t m = rng.uniform_int(128);
    const int64_t t = rng.uniform_int(8192);
    OverheadRatio r = overhead_ratio(d, h, m, t);
    const StdFlops f = flops_std(d, t);
    // H(M+1) * (24d^2 + 4Td) == (12d + 2T) * 2dH(M+1)
    CHECK(r.num * f.total == r.den * flops_move(d, h, m));
    CHECK(r.num_lowest * r.den == r.den_lowest * r.num);
    CHECK(std::gcd(r.num_lowest, r.den_lowest) == 1);
  }
}

TEST_CASE("bank parameter counts match the scaled-capacity table rows") {
  CHECK(bank_params(65536, 6, 768) == 301989888);    // +302M
  CHECK(bank_params(65536, 12, 768) == 603979776);   // +604M
  CHECK(bank_params(65536, 0, 768) == 0);
}

TEST_CASE("flop report carries the exact fraction and the exclusion list") {
  FlopReport rep = flop_report(2048, 16, 32, 2048);
  CHECK(rep.c_std == 117440512);
  CHECK(rep.c_move == 2162688);
  CHECK(rep.ratio_num == 528);
  CHECK(rep.ratio_den == 28672);
  CHECK(!rep.excluded.empty());
}

TEST_CASE("instrumented forward pass agrees with the closed-form terms") {
  // A tiny standard+router model, dims chosen so every matmul classifies
  // unambiguously by shape. The formulas count multiply-adds of the dense
  // projections, the FFN, the attention core, and the router; everything
  // else (norms, gathers, activations, the output head) is excluded.
  ModelConfig c;
  c.layers = 2;
  c.width = 32;
  c.heads = 4;
  c.vocab = 97;
  c.context = 16;
  c.variant = Variant::move;
  c.scale = 4;  // M = 4 -> router columns H(M+1) = 20
  c.seed = 3;
  const int64_t seq = 16;
  ModelParams p = build_model(c);

  Rng rng(9);
  std::vector<int64_t> tokens(static_cast<size_t>(seq));
  for (auto& t : tokens) t = rng.uniform_int(c.vocab);

  Tape tape;
  BoundModel bound = bind_model(tape, p, false);
  (void)forward_logits(bound, tokens, 1);

  const int64_t d = c.width, hw = c.width / c.heads, m1 = c.slots() + 1;
  int64_t proj = 0, ffn = 0, sdpa = 0, router = 0, head = 0, other = 0;
  for (size_t i = 0; i < tape.node_count(); ++i) {
    Tape::NodeInfo info = tape.node_info(i);
    if (info.op != Op::matmul) continue;
    const Shape& a = info.inputs[0];
    const Shape& b = info.inputs[1];
    const int64_t k = b[b.size() - 2], n = b.back();
    if (b.size() == 2 && k == d && n == d) proj += info.madds;
    else if (b.size() == 2 && ((k == d && n == 4 * d) || (k == 4 * d && n == d))) ffn += info.madds;
    else if (b.size() == 2 && k == d && n == c.heads * m1) router += info.madds;
    else if (b.size() == 2 && n == c.vocab) head += info.madds;
    else if (a.size() == 4 && (n == hw || k == hw || n == seq)) sdpa += info.madds;
    else other += info.madds;
  }
  // per-token FLOPs = 2 * madds / T, per layer where applicable
  CHECK(2 * proj / seq == c.layers * flops_std(d, seq).c_proj);
  CHECK(2 * ffn / seq == c.layers * flops_std(d, seq).c_ffn);
  CHECK(2 * sdpa / seq == c.layers * flops_std(d, seq).c_sdpa);
  CHECK(2 * router / seq == c.layers * flops_move(d, c.heads, c.slots()));
  CHECK(head > 0);     // present but excluded from the model
  CHECK(other == 0);   // nothing unclassified
}
