#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace movelab {

/// Closed-form per-token FLOP accounting for one transformer block, counting
/// a multiply-add as 2 FLOPs. The model covers the dense Q/K/V/O projections
/// (8d^2), the 4x feed-forward (16d^2), the amortized attention core (4Td),
/// and the routing projection (2dH(M+1)); everything else is listed in
/// `excluded` rather than silently omitted.
struct FlopReport {
  int64_t d = 0, heads = 0, slots = 0, seq = 0;
  int64_t c_proj = 0;   // 8 d^2
  int64_t c_ffn = 0;    // 16 d^2
  int64_t c_sdpa = 0;   // 4 T d
  int64_t c_std = 0;    // c_proj + c_ffn + c_sdpa
  int64_t c_move = 0;   // 2 d H (M+1)
  int64_t ratio_num = 0, ratio_den = 0;          // H(M+1) / (12d + 2T), as evaluated
  int64_t ratio_num_lowest = 0, ratio_den_lowest = 0;  // same, in lowest terms
  double ratio = 0.0;
  std::vector<std::string> excluded;
};

struct StdFlops {
  int64_t c_proj = 0, c_ffn = 0, c_sdpa = 0, total = 0;
};

/// Per-token baseline cost 24d^2 + 4Td with its components.
StdFlops flops_std(int64_t d, int64_t seq);

/// Routing-projection overhead 2dH(M+1); M = 0 leaves only the
/// standard-path gate column.
int64_t flops_move(int64_t d, int64_t heads, int64_t slots);

struct OverheadRatio {
  int64_t num = 0, den = 0;                // H(M+1) and 12d + 2T as evaluated
  int64_t num_lowest = 0, den_lowest = 0;  // reduced form
  double value = 0.0;
};

/// Exact rational overhead ratio H(M+1) / (12d + 2T).
OverheadRatio overhead_ratio(int64_t d, int64_t heads, int64_t slots, int64_t seq);

/// Value-embedding bank parameter count N_vocab * M * width.
int64_t bank_params(int64_t vocab, int64_t slots, int64_t width);

/// Full report for the CLI.
FlopReport flop_report(int64_t d, int64_t heads, int64_t slots, int64_t seq);

}  // namespace movelab
