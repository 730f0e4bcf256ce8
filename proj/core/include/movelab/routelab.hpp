#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "movelab/model.hpp"

namespace movelab {

/// Per-layer, per-slot mean gate values for a target token occurrence:
/// G[l, m] averages the memory-slot gates (standard-path column excluded)
/// over heads and over the target's occurrences. Values live in [0, 2];
/// a zero-initialized model traces to exactly 1 everywhere.
struct GateTrace {
  Array g;           // [L, M]
  Array g_per_head;  // [L, G, M], unaveraged view
  std::string context;   // Short | Medium | Long
  std::string sentence;  // A1 | A2 | B1
  int64_t target_token = -1;
  std::vector<int64_t> positions;
};

/// All occurrence positions of `target` in `tokens`.
std::vector<int64_t> find_occurrences(std::span<const int64_t> tokens, int64_t target);
/// Final positions of every occurrence of `pattern` as a subsequence (used
/// to anchor multi-token words at the position where the word is complete).
std::vector<int64_t> find_subsequence_ends(std::span<const int64_t> tokens, std::span<const int64_t> pattern);

/// Runs a captured forward pass and reduces the gates at the target
/// positions. Requires a shared-bank variant and at least one occurrence.
GateTrace capture_trace(const ModelParams& params, std::span<const int64_t> tokens, int64_t target_token,
                        std::string context = {}, std::string sentence = {});

/// Same reduction over explicit positions (multi-token targets).
GateTrace capture_trace_at(const ModelParams& params, std::span<const int64_t> tokens,
                           std::span<const int64_t> positions, int64_t target_label, std::string context = {},
                           std::string sentence = {});

struct TraceTriple {
  GateTrace a1, a2, b1;
};

/// Differential routing for one context length: the control differential
/// |A1 - A2| (variation within one meaning) against the semantic
/// differential |A1 - B1| (variation across meanings).
struct TraceDiff {
  std::string context;
  Array control, semantic;            // raw absolute differences [L, M]
  Array control_norm, semantic_norm;  // divided by the word's global max
  double global_max = 0.0;            // shared across the word's contexts
  bool degenerate = false;            // global_max == 0: normalization skipped
};

/// One TraceDiff per context; the normalizer is the single maximum over all
/// 2 x contexts difference arrays, so exactly one normalized element equals
/// 1 unless every difference is zero.
std::vector<TraceDiff> diff_traces(std::span<const TraceTriple> per_context);

struct TraceRow {
  int64_t layer = 0, slot = 0;
  double value = 0.0;
  std::string context, sentence, kind;  // kind: raw | control | semantic
  bool normalized = false;
};

/// The full export grid: per context, the three raw traces plus the two
/// differential kinds (normalized unless degenerate) -> 5 * L * M rows per
/// context.
std::vector<TraceRow> trace_rows(std::span<const TraceTriple> per_context, std::span<const TraceDiff> diffs);

/// Delimited table: header `layer,slot,value,context,sentence,kind,normalized`,
/// full-precision values, UTF-8, LF newlines.
void export_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);
/// Structured records: the same rows as JSON objects, one per line.
void export_trace_records(const std::filesystem::path& path, std::span<const TraceRow> rows);
std::vector<TraceRow> import_trace_csv(const std::filesystem::path& path);

/// Unaveraged per-head export (layer, head, slot, value, context, sentence).
void export_trace_per_head_csv(const std::filesystem::path& path, std::span<const TraceTriple> per_context);

}  // namespace movelab
