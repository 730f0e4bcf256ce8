#include "movelab/routelab.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace movelab {

std::vector<int64_t> find_occurrences(std::span<const int64_t> tokens, int64_t target) {
  std::vector<int64_t> out;
  for (size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == target) out.push_back(static_cast<int64_t>(i));
  return out;
}

std::vector<int64_t> find_subsequence_ends(std::span<const int64_t> tokens, std::span<const int64_t> pattern) {
  std::vector<int64_t> out;
  if (pattern.empty() || tokens.size() < pattern.size()) return out;
  for (size_t i = 0; i + pattern.size() <= tokens.size(); ++i) {
    bool match = true;
    for (size_t j = 0; j < pattern.size(); ++j) {
      if (tokens[i + j] != pattern[j]) {
        match = false;
        break;
      }
    }
    if (match) out.push_back(static_cast<int64_t>(i + pattern.size() - 1));
  }
  return out;
}

GateTrace capture_trace(const ModelParams& params, std::span<const int64_t> tokens, int64_t target_token,
                        std::string context, std::string sentence) {
  return capture_trace_at(params, tokens, find_occurrences(tokens, target_token), target_token, std::move(context),
                          std::move(sentence));
}

GateTrace capture_trace_at(const ModelParams& params, std::span<const int64_t> tokens,
                           std::span<const int64_t> positions, int64_t target_label, std::string context,
                           std::string sentence) {
  const ModelConfig& cfg = params.config;
  if (!cfg.has_global_bank())
    throw std::invalid_argument("capture_trace: variant '" + variant_name(cfg.variant) +
                                "' has no shared bank to trace");
  GateTrace trace;
  trace.context = std::move(context);
  trace.sentence = std::move(sentence);
  trace.target_token = target_label;
  trace.positions.assign(positions.begin(), positions.end());
  if (trace.positions.empty())
    throw std::invalid_argument("capture_trace: target token " + std::to_string(target_label) +
                                " does not occur in the input");
  for (int64_t p : trace.positions)
    if (p < 0 || p >= static_cast<int64_t>(tokens.size()))
      throw std::invalid_argument("capture_trace: position " + std::to_string(p) + " outside the input");

  std::vector<GateCapture> captures;
  (void)forward_logits(params, tokens, &captures);

  const int64_t layers = cfg.layers;
  const int64_t groups = cfg.memory_groups();
  const int64_t slots = cfg.slots();
  trace.g = Array(Shape{layers, slots});
  trace.g_per_head = Array(Shape{layers, groups, slots});
  const double occ = static_cast<double>(trace.positions.size());
  for (int64_t l = 0; l < layers; ++l) {
    const Array& gates = captures[static_cast<size_t>(l)].gates;  // [T, G, M+1]
    for (int64_t g = 0; g < groups; ++g) {
      for (int64_t m = 0; m < slots; ++m) {
        double acc = 0.0;
        for (int64_t pos : trace.positions)
          acc += gates.at({pos, g, m + 1});  // slot 0 is the standard-path gate
        trace.g_per_head.ptr()[(l * groups + g) * slots + m] = acc / occ;
      }
    }
    for (int64_t m = 0; m < slots; ++m) {
      double acc = 0.0;
      for (int64_t g = 0; g < groups; ++g) acc += trace.g_per_head.ptr()[(l * groups + g) * slots + m];
      trace.g.ptr()[l * slots + m] = acc / static_cast<double>(groups);
    }
  }
  return trace;
}

namespace {

Array abs_diff(const Array& a, const Array& b) {
  if (!shapes_equal(a.shape(), b.shape()))
    throw std::invalid_argument("diff_traces: trace shapes disagree: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Array out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.ptr()[i] = std::fabs(a.data()[i] - b.data()[i]);
  return out;
}

}  // namespace

std::vector<TraceDiff> diff_traces(std::span<const TraceTriple> per_context) {
  if (per_context.empty()) throw std::invalid_argument("diff_traces: no contexts");
  std::vector<TraceDiff> diffs;
  diffs.reserve(per_context.size());
  double global_max = 0.0;
  for (const TraceTriple& triple : per_context) {
    TraceDiff d;
    d.context = triple.a1.context;
    d.control = abs_diff(triple.a1.g, triple.a2.g);
    d.semantic = abs_diff(triple.a1.g, triple.b1.g);
    for (int64_t i = 0; i < d.control.numel(); ++i) global_max = std::max(global_max, d.control.data()[i]);
    for (int64_t i = 0; i < d.semantic.numel(); ++i) global_max = std::max(global_max, d.semantic.data()[i]);
    diffs.push_back(std::move(d));
  }
  for (TraceDiff& d : diffs) {
    d.global_max = global_max;
    d.degenerate = global_max == 0.0;
    if (d.degenerate) continue;
    d.control_norm = Array(d.control.shape());
    d.semantic_norm = Array(d.semantic.shape());
    for (int64_t i = 0; i < d.control.numel(); ++i) d.control_norm.ptr()[i] = d.control.data()[i] / global_max;
    for (int64_t i = 0; i < d.semantic.numel(); ++i) d.semantic_norm.ptr()[i] = d.semantic.data()[i] / global_max;
  }
  return diffs;
}

std::vector<TraceRow> trace_rows(std::span<const TraceTriple> per_context, std::span<const TraceDiff> diffs) {
  if (per_context.size() != diffs.size())
    throw std::invalid_argument("trace_rows: contexts and diffs must align");
  std::vector<TraceRow> rows;
  auto emit_array = [&rows](const Array& a, const std::string& context, const std::string& sentence,
                            const std::string& kind, bool normalized) {
    const int64_t layers = a.dim(0), slots = a.dim(1);
    for (int64_t l = 0; l < layers; ++l)
      for (int64_t m = 0; m < slots; ++m)
        rows.push_back({l, m, a.at({l, m}), context, sentence, kind, normalized});
  };
  for (size_t c = 0; c < per_context.size(); ++c) {
    const TraceTriple& t = per_context[c];
    const TraceDiff& d = diffs[c];
    emit_array(t.a1.g, t.a1.context, "A1", "raw", false);
    emit_array(t.a2.g, t.a2.context, "A2", "raw", false);
    emit_array(t.b1.g, t.b1.context, "B1", "raw", false);
    if (d.degenerate) {
      emit_array(d.control, d.context, "-", "control", false);
      emit_array(d.semantic, d.context, "-", "semantic", false);
    } else {
      emit_array(d.control_norm, d.context, "-", "control", true);
      emit_array(d.semantic_norm, d.context, "-", "semantic", true);
    }
  }
  return rows;
}

void export_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_trace_csv: cannot open " + path.string());
  out << "layer,slot,value,context,sentence,kind,normalized\n";
  char buf[64];
  for (const TraceRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.layer << ',' << r.slot << ',' << buf << ',' << r.context << ',' << r.sentence << ',' << r.kind << ','
        << (r.normalized ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error("export_trace_csv: write failed for " + path.string());
}

void export_trace_records(const std::filesystem::path& path, std::span<const TraceRow> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_trace_records: cannot open " + path.string());
  char buf[64];
  for (const TraceRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << "{\"layer\":" << r.layer << ",\"slot\":" << r.slot << ",\"value\":" << buf << ",\"context\":\""
        << r.context << "\",\"sentence\":\"" << r.sentence << "\",\"kind\":\"" << r.kind
        << "\",\"normalized\":" << (r.normalized ? "true" : "false") << "}\n";
  }
  if (!out) throw std::runtime_error("export_trace_records: write failed for " + path.string());
}

std::vector<TraceRow> import_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("import_trace_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "layer,slot,value,context,sentence,kind,normalized")
    throw std::runtime_error("import_trace_csv: unexpected header in " + path.string());
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TraceRow r;
    std::string field;
    std::getline(ls, field, ',');
    r.layer = std::stoll(field);
    std::getline(ls, field, ',');
    r.slot = std::stoll(field);
    std::getline(ls, field, ',');
    r.value = std::stod(field);
    std::getline(ls, r.context, ',');
    std::getline(ls, r.sentence, ',');
    std::getline(ls, r.kind, ',');
    std::getline(ls, field);
    r.normalized = field == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

void export_trace_per_head_csv(const std::filesystem::path& path, std::span<const TraceTriple> per_context) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_trace_per_head_csv: cannot open " + path.string());
  out << "layer,head,slot,value,context,sentence\n";
  char buf[64];
  auto emit = [&](const GateTrace& t) {
    const int64_t layers = t.g_per_head.dim(0), groups = t.g_per_head.dim(1), slots = t.g_per_head.dim(2);
    for (int64_t l = 0; l < layers; ++l)
      for (int64_t g = 0; g < groups; ++g)
        for (int64_t m = 0; m < slots; ++m) {
          std::snprintf(buf, sizeof(buf), "%.17g", t.g_per_head.at({l, g, m}));
          out << l << ',' << g << ',' << m << ',' << buf << ',' << t.context << ',' << t.sentence << '\n';
        }
  };
  for (const TraceTriple& triple : per_context) {
    emit(triple.a1);
    emit(triple.a2);
    emit(triple.b1);
  }
  if (!out) throw std::runtime_error("export_trace_per_head_csv: write failed for " + path.string());
}

}  // namespace movelab
