#include "movelab/costmodel.hpp"

#include <numeric>
#include <stdexcept>

namespace movelab {

StdFlops flops_std(int64_t d, int64_t seq) {
  if (d < 1 || seq < 0) throw std::invalid_argument("flops_std: need d >= 1 and T >= 0");
  StdFlops f;
  f.c_proj = 8 * d * d;
  f.c_ffn = 16 * d * d;
  f.c_sdpa = 4 * seq * d;
  f.total = f.c_proj + f.c_ffn + f.c_sdpa;
  return f;
}

int64_t flops_move(int64_t d, int64_t heads, int64_t slots) {
  if (d < 1 || heads < 1 || slots < 0) throw std::invalid_argument("flops_move: need d, H >= 1 and M >= 0");
  return 2 * d * heads * (slots + 1);
}

OverheadRatio overhead_ratio(int64_t d, int64_t heads, int64_t slots, int64_t seq) {
  if (d < 1 || heads < 1 || slots < 0 || seq < 0)
    throw std::invalid_argument("overhead_ratio: need d, H >= 1 and M, T >= 0");
  OverheadRatio r;
  r.num = heads * (slots + 1);
  r.den = 12 * d + 2 * seq;
  if (r.den <= 0) throw std::invalid_argument("overhead_ratio: denominator must be positive");
  const int64_t g = std::gcd(r.num, r.den);
  r.num_lowest = r.num / g;
  r.den_lowest = r.den / g;
  r.value = static_cast<double>(r.num) / static_cast<double>(r.den);
  return r;
}

int64_t bank_params(int64_t vocab, int64_t slots, int64_t width) {
  if (vocab < 0 || slots < 0 || width < 0) throw std::invalid_argument("bank_params: arguments must be >= 0");
  return vocab * slots * width;
}

FlopReport flop_report(int64_t d, int64_t heads, int64_t slots, int64_t seq) {
  FlopReport rep;
  rep.d = d;
  rep.heads = heads;
  rep.slots = slots;
  rep.seq = seq;
  const StdFlops f = flops_std(d, seq);
  rep.c_proj = f.c_proj;
  rep.c_ffn = f.c_ffn;
  rep.c_sdpa = f.c_sdpa;
  rep.c_std = f.total;
  rep.c_move = flops_move(d, heads, slots);
  const OverheadRatio r = overhead_ratio(d, heads, slots, seq);
  rep.ratio_num = r.num;
  rep.ratio_den = r.den;
  rep.ratio_num_lowest = r.num_lowest;
  rep.ratio_den_lowest = r.den_lowest;
  rep.ratio = r.value;
  rep.excluded = {"normalization", "activations", "embedding and bank gathers", "output head", "gate arithmetic"};
  return rep;
}

}  // namespace movelab
