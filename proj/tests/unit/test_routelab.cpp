#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "movelab/model.hpp"
#include "movelab/rng.hpp"
#include "movelab/routelab.hpp"

using namespace movelab;

namespace {

ModelConfig trace_config() {
  ModelConfig c;
  c.layers = 4;
  c.width = 16;
  c.heads = 4;
  c.vocab = 32;
  c.context = 24;
  c.variant = Variant::move;
  c.scale = 1;  // M = 2
  c.seed = 7;
  return c;
}

std::vector<int64_t> with_target(int64_t len, int64_t target, std::initializer_list<int64_t> at, uint64_t seed) {
  Rng rng(seed);
  std::vector<int64_t> toks(static_cast<size_t>(len));
  for (auto& t : toks) {
    do {
      t = rng.uniform_int(32);
    } while (t == target);
  }
  for (int64_t p : at) toks[static_cast<size_t>(p)] = target;
  return toks;
}

}  // namespace

TEST_CASE("zero-initialized model traces to the all-ones grid") {
  ModelParams p = build_model(trace_config());
  auto tokens = with_target(10, 5, {2, 7}, 1);
  GateTrace trace = capture_trace(p, tokens, 5, "Short", "A1");
  CHECK(trace.g.shape() == Shape{4, 2});
  CHECK(trace.positions == std::vector<int64_t>{2, 7});
  for (double v : trace.g.data()) CHECK(v == 1.0);
  for (double v : trace.g_per_head.data()) CHECK(v == 1.0);
}

TEST_CASE("trace rejects non-bank variants and absent targets") {
  ModelConfig std_cfg = trace_config();
  std_cfg.variant = Variant::standard;
  std_cfg.scale = 0;
  ModelParams std_model = build_model(std_cfg);
  auto tokens = with_target(8, 5, {1}, 2);
  CHECK_THROWS_AS(capture_trace(std_model, tokens, 5), std::invalid_argument);

  ModelParams p = build_model(trace_config());
  CHECK_THROWS_AS(capture_trace(p, with_target(8, 5, {}, 3), 5), std::invalid_argument);
}

TEST_CASE("trace means equal a direct recomputation from the captured gates") {
  ModelParams p = build_model(trace_config());
  perturb_params(p, 0.08, 9);
  auto tokens = with_target(12, 4, {3, 9, 11}, 4);
  GateTrace trace = capture_trace(p, tokens, 4, "Medium", "A2");

  std::vector<GateCapture> captures;
  (void)forward_logits(p, tokens, &captures);
  const ModelConfig& cfg = p.config;
  for (int64_t l = 0; l < cfg.layers; ++l) {
    for (int64_t m = 0; m < cfg.slots(); ++m) {
      double acc = 0.0;
      for (int64_t pos : {3, 9, 11})
        for (int64_t g = 0; g < cfg.heads; ++g) acc += captures[static_cast<size_t>(l)].gates.at({pos, g, m + 1});
      const double mean = acc / (3.0 * static_cast<double>(cfg.heads));
      CHECK(std::fabs(trace.g.at({l, m}) - mean) <= 1e-12);
    }
  }
  // raw traces stay in the closed gate range
  for (double v : trace.g.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 2.0);
  }
}

TEST_CASE("differential normalization: shared global max, exactly one unit element") {
  ModelParams p = build_model(trace_config());
  perturb_params(p, 0.15, 11);

  std::vector<TraceTriple> triples;
  const char* contexts[3] = {"Short", "Medium", "Long"};
  const int64_t lens[3] = {6, 12, 20};
  for (int i = 0; i < 3; ++i) {
    TraceTriple t;
    t.a1 = capture_trace(p, with_target(lens[i], 4, {1, 4}, 100 + i), 4, contexts[i], "A1");
    t.a2 = capture_trace(p, with_target(lens[i], 4, {2}, 200 + i), 4, contexts[i], "A2");
    t.b1 = capture_trace(p, with_target(lens[i], 4, {0, 3}, 300 + i), 4, contexts[i], "B1");
    triples.push_back(std::move(t));
  }
  std::vector<TraceDiff> diffs = diff_traces(triples);
  REQUIRE(diffs.size() == 3);

  double expect_max = 0.0;
  for (const TraceDiff& d : diffs) {
    for (double v : d.control.data()) expect_max = std::max(expect_max, v);
    for (double v : d.semantic.data()) expect_max = std::max(expect_max, v);
  }
  CHECK(expect_max > 0.0);

  int unit_elements = 0;
  for (const TraceDiff& d : diffs) {
    CHECK(d.global_max == expect_max);
    CHECK_FALSE(d.degenerate);
    for (double v : d.control_norm.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      if (v == 1.0) ++unit_elements;
    }
    for (double v : d.semantic_norm.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      if (v == 1.0) ++unit_elements;
    }
  }
  CHECK(unit_elements >= 1);  // the max itself normalizes to exactly 1
}

TEST_CASE("hand-built 2x2 differential arithmetic") {
  TraceTriple t;
  t.a1.context = t.a2.context = t.b1.context = "Short";
  t.a1.g = Array({2, 2}, {1.0, 1.2, 0.8, 1.0});
  t.a2.g = Array({2, 2}, {1.1, 1.2, 0.8, 0.9});
  t.b1.g = Array({2, 2}, {1.0, 1.6, 0.8, 1.0});
  std::vector<TraceDiff> diffs = diff_traces(std::vector<TraceTriple>{t});
  REQUIRE(diffs.size() == 1);
  const TraceDiff& d = diffs[0];
  CHECK(d.control.at({0, 0}) == doctest::Approx(0.1));
  CHECK(d.control.at({1, 1}) == doctest::Approx(0.1));
  CHECK(d.semantic.at({0, 1}) == doctest::Approx(0.4));
  CHECK(d.global_max == doctest::Approx(0.4));
  CHECK(d.semantic_norm.at({0, 1}) == 1.0);
  CHECK(d.control_norm.at({0, 0}) == doctest::Approx(0.25));
}

TEST_CASE("identical traces give a degenerate, flagged differential (A1 == A2 -> zero control)") {
  TraceTriple t;
  t.a1.context = t.a2.context = t.b1.context = "Long";
  t.a1.g = Array::full({2, 3}, 1.0);
  t.a2.g = Array::full({2, 3}, 1.0);
  t.b1.g = Array::full({2, 3}, 1.0);
  std::vector<TraceDiff> diffs = diff_traces(std::vector<TraceTriple>{t});
  CHECK(diffs[0].degenerate);
  CHECK(diffs[0].global_max == 0.0);
  for (double v : diffs[0].control.data()) CHECK(v == 0.0);
}

TEST_CASE("export grid: row counts, round trip, and the label schema") {
  ModelParams p = build_model(trace_config());
  perturb_params(p, 0.1, 13);
  std::vector<TraceTriple> triples;
  const char* contexts[3] = {"Short", "Medium", "Long"};
  for (int i = 0; i < 3; ++i) {
    TraceTriple t;
    t.a1 = capture_trace(p, with_target(8, 6, {1}, 400 + i), 6, contexts[i], "A1");
    t.a2 = capture_trace(p, with_target(8, 6, {2}, 500 + i), 6, contexts[i], "A2");
    t.b1 = capture_trace(p, with_target(8, 6, {4}, 600 + i), 6, contexts[i], "B1");
    triples.push_back(std::move(t));
  }
  std::vector<TraceDiff> diffs = diff_traces(triples);
  std::vector<TraceRow> rows = trace_rows(triples, diffs);
  const int64_t lm = p.config.layers * p.config.slots();
  CHECK(static_cast<int64_t>(rows.size()) == 3 * 5 * lm);  // 3 contexts x 5 kinds x L*M

  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "movelab_trace_test.csv";
  export_trace_csv(path, rows);
  std::vector<TraceRow> back = import_trace_csv(path);
  REQUIRE(back.size() == rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].layer == rows[i].layer);
    CHECK(back[i].slot == rows[i].slot);
    CHECK(back[i].value == rows[i].value);  // full-precision round trip
    CHECK(back[i].context == rows[i].context);
    CHECK(back[i].sentence == rows[i].sentence);
    CHECK(back[i].kind == rows[i].kind);
    CHECK(back[i].normalized == rows[i].normalized);
  }
  fs::remove(path);

  const fs::path rec_path = fs::temp_directory_path() / "movelab_trace_test.jsonl";
  export_trace_records(rec_path, rows);
  CHECK(fs::file_size(rec_path) > 0);
  fs::remove(rec_path);

  const fs::path head_path = fs::temp_directory_path() / "movelab_trace_head.csv";
  export_trace_per_head_csv(head_path, triples);
  CHECK(fs::file_size(head_path) > 0);
  fs::remove(head_path);
}

TEST_CASE("capture is observationally pure at the model level") {
  ModelParams p = build_model(trace_config());
  perturb_params(p, 0.1, 17);
  auto tokens = with_target(10, 3, {0, 5}, 19);
  Array without = forward_logits(p, tokens);
  std::vector<GateCapture> captures;
  Array with = forward_logits(p, tokens, &captures);
  CHECK(exactly_equal(without, with));  // bit-for-bit
  CHECK(captures.size() == 4);
}
