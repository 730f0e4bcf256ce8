#include "movelab/tape.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace movelab {

namespace {

[[noreturn]] void shape_fail(const std::string& what) { throw std::invalid_argument(what); }

void check_same_tape(Value a, Value b) {
  if (a.tape() == nullptr || b.tape() == nullptr) shape_fail("op on default-constructed Value");
  if (a.tape() != b.tape()) shape_fail("operands recorded on different tapes");
}

// Row-major strides.
std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> s(shape.size());
  int64_t acc = 1;
  for (int64_t i = static_cast<int64_t>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<size_t>(i)] = acc;
    acc *= shape[static_cast<size_t>(i)];
  }
  return s;
}

constexpr int64_t kGemmThreshold = 4096;  // below this, inline loops beat a BLAS call

void gemm_nn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c, bool accumulate) {
  if (m * n * k >= kGemmThreshold) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(n), accumulate ? 1.0 : 0.0, c,
                static_cast<int>(n));
    return;
  }
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const double av = ai[l];
      const double* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
void gemm_nt(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c, bool accumulate) {
  if (m * n * k >= kGemmThreshold) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, static_cast<int>(k), b, static_cast<int>(k), accumulate ? 1.0 : 0.0, c,
                static_cast<int>(n));
    return;
  }
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      if (accumulate)
        ci[j] += acc;
      else
        ci[j] = acc;
    }
  }
}

// c[m,n] (+)= a[k,m]^T * b[k,n]
void gemm_tn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c, bool accumulate) {
  if (m * n * k >= kGemmThreshold) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, a, static_cast<int>(m), b, static_cast<int>(n), accumulate ? 1.0 : 0.0, c,
                static_cast<int>(n));
    return;
  }
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (int64_t l = 0; l < k; ++l) {
    const double* al = a + l * m;
    const double* bl = b + l * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = al[i];
      double* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// Batch-broadcast bookkeeping shared by the matmul forward and backward.
struct MatmulPlan {
  int64_t m = 0, k = 0, n = 0;
  Shape batch;                         // broadcast batch extents
  std::vector<int64_t> a_off, b_off;   // per batch cell, element offsets of the [m,k]/[k,n] blocks
  int64_t cells() const { return static_cast<int64_t>(a_off.size()); }
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2)
    shape_fail("matmul: operands must have rank >= 2: " + shape_str(as) + " x " + shape_str(bs));
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as[as.size() - 1];
  p.n = bs[bs.size() - 1];
  if (bs[bs.size() - 2] != p.k)
    shape_fail("matmul: inner extents disagree: " + shape_str(as) + " x " + shape_str(bs));

  const int64_t na = static_cast<int64_t>(as.size()) - 2;
  const int64_t nb = static_cast<int64_t>(bs.size()) - 2;
  const int64_t nd = std::max(na, nb);
  p.batch.assign(static_cast<size_t>(nd), 1);
  for (int64_t i = 0; i < nd; ++i) {
    const int64_t ad = i - (nd - na) >= 0 ? as[static_cast<size_t>(i - (nd - na))] : 1;
    const int64_t bd = i - (nd - nb) >= 0 ? bs[static_cast<size_t>(i - (nd - nb))] : 1;
    if (ad != bd && ad != 1 && bd != 1)
      shape_fail("matmul: batch extents not broadcastable: " + shape_str(as) + " x " + shape_str(bs));
    p.batch[static_cast<size_t>(i)] = std::max(ad, bd);
  }

  // Per-dimension element strides into a and b (0 where broadcast).
  std::vector<int64_t> a_stride(static_cast<size_t>(nd), 0), b_stride(static_cast<size_t>(nd), 0);
  int64_t acc = p.m * p.k;
  for (int64_t i = na - 1; i >= 0; --i) {
    const int64_t d = as[static_cast<size_t>(i)];
    a_stride[static_cast<size_t>(i + nd - na)] = d == 1 ? 0 : acc;
    acc *= d;
  }
  acc = p.k * p.n;
  for (int64_t i = nb - 1; i >= 0; --i) {
    const int64_t d = bs[static_cast<size_t>(i)];
    b_stride[static_cast<size_t>(i + nd - nb)] = d == 1 ? 0 : acc;
    acc *= d;
  }

  const int64_t cells = shape_numel(p.batch);
  p.a_off.resize(static_cast<size_t>(cells));
  p.b_off.resize(static_cast<size_t>(cells));
  std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
  int64_t ao = 0, bo = 0;
  for (int64_t c = 0; c < cells; ++c) {
    p.a_off[static_cast<size_t>(c)] = ao;
    p.b_off[static_cast<size_t>(c)] = bo;
    for (int64_t d = nd - 1; d >= 0; --d) {
      coord[static_cast<size_t>(d)]++;
      ao += a_stride[static_cast<size_t>(d)];
      bo += b_stride[static_cast<size_t>(d)];
      if (coord[static_cast<size_t>(d)] < p.batch[static_cast<size_t>(d)]) break;
      ao -= a_stride[static_cast<size_t>(d)] * p.batch[static_cast<size_t>(d)];
      bo -= b_stride[static_cast<size_t>(d)] * p.batch[static_cast<size_t>(d)];
      coord[static_cast<size_t>(d)] = 0;
    }
  }
  return p;
}

struct SlotMixDims {
  int64_t cells = 0;  // product of batch extents
  int64_t slots = 0, groups = 0, width = 0;
  bool include_std = false;
};

SlotMixDims plan_slot_mix(const Shape& vs, const Shape& ms, const Shape& gs, bool include_std) {
  if (vs.size() < 2 || ms.size() != vs.size() + 1 || gs.size() != vs.size())
    shape_fail("gated_slot_mix: rank mismatch: v " + shape_str(vs) + ", mt " + shape_str(ms) + ", gates " +
               shape_str(gs));
  SlotMixDims d;
  d.include_std = include_std;
  d.groups = vs[vs.size() - 2];
  d.width = vs[vs.size() - 1];
  d.slots = ms[ms.size() - 3];
  const size_t nb = vs.size() - 2;
  for (size_t i = 0; i < nb; ++i) {
    if (ms[i] != vs[i] || gs[i] != vs[i])
      shape_fail("gated_slot_mix: batch extents disagree: v " + shape_str(vs) + ", mt " + shape_str(ms) + ", gates " +
                 shape_str(gs));
  }
  if (ms[ms.size() - 2] != d.groups || ms[ms.size() - 1] != d.width || gs[gs.size() - 2] != d.groups)
    shape_fail("gated_slot_mix: group/width extents disagree: v " + shape_str(vs) + ", mt " + shape_str(ms) +
               ", gates " + shape_str(gs));
  const int64_t expect_k = d.slots + (include_std ? 1 : 0);
  if (gs[gs.size() - 1] != expect_k)
    shape_fail("gated_slot_mix: gate extent " + std::to_string(gs[gs.size() - 1]) + " != expected " +
               std::to_string(expect_k) + " for " + std::to_string(d.slots) + " slots");
  d.cells = shape_numel(vs) / (d.groups * d.width);
  return d;
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::mul_bcast_last: return "mul_bcast_last";
    case Op::scale: return "scale";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::reshape: return "reshape";
    case Op::sigmoid: return "sigmoid";
    case Op::softmax_lastdim: return "softmax_lastdim";
    case Op::causal_softmax: return "causal_softmax";
    case Op::gelu: return "gelu";
    case Op::rmsnorm: return "rmsnorm";
    case Op::rope: return "rope";
    case Op::gather: return "gather";
    case Op::cross_entropy: return "cross_entropy";
    case Op::reduce_sum: return "reduce_sum";
    case Op::gated_slot_mix: return "gated_slot_mix";
  }
  return "?";
}

// ---- Value ------------------------------------------------------------------

const Shape& Value::shape() const { return tape_->shape(*this); }
std::span<const double> Value::data() const { return tape_->value_data(*this); }
Array Value::array() const { return tape_->value(*this); }

// ---- Tape node plumbing -----------------------------------------------------

struct TapeAccess {
  static Tape::Node& node(Tape& t, int32_t i) { return t.nodes_[static_cast<size_t>(i)]; }
  static const Tape::Node& node(const Tape& t, int32_t i) { return t.nodes_[static_cast<size_t>(i)]; }
  static int32_t push(Tape& t, Tape::Node&& n) {
    t.nodes_.push_back(std::move(n));
    return static_cast<int32_t>(t.nodes_.size() - 1);
  }
};

namespace {

Tape::Node& node_of(Value v) { return TapeAccess::node(*v.tape(), v.index()); }

Value push_node(Tape& tape, Op op, Shape shape, std::array<int32_t, 3> in, std::vector<int64_t> iattr = {},
                double dattr = 0.0, bool alloc = true) {
  Tape::Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.in = in;
  n.iattr = std::move(iattr);
  n.dattr = dattr;
  // every kernel overwrites its full output, so skip the value-init
  if (alloc) n.val = DBuffer::uninitialized(static_cast<size_t>(shape_numel(n.shape)));
  const int32_t idx = TapeAccess::push(tape, std::move(n));
  return Value(&tape, idx);
}

void ensure_grad(Tape::Node& n) {
  if (n.grad.empty()) n.grad = DBuffer::zeros(n.val.size());
}

}  // namespace

Value Tape::leaf(const Array& init) {
  Node n;
  n.op = Op::leaf;
  n.shape = init.shape();
  n.val = DBuffer::copy_of(init.data());
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int32_t>(nodes_.size() - 1));
}

Value Tape::constant(const Array& value) {
  Node n;
  n.op = Op::constant;
  n.shape = value.shape();
  n.val = DBuffer::copy_of(value.data());
  nodes_.push_back(std::move(n));
  return Value(this, static_cast<int32_t>(nodes_.size() - 1));
}

Value Tape::constant(Array&& value) { return constant(static_cast<const Array&>(value)); }

Array Tape::value(Value v) const {
  const Node& n = TapeAccess::node(*this, v.index());
  return Array(n.shape, std::vector<double>(n.val.begin(), n.val.end()));
}

Array Tape::grad(Value v) const {
  const Node& n = TapeAccess::node(*this, v.index());
  if (n.grad.empty()) return Array(n.shape);
  return Array(n.shape, std::vector<double>(n.grad.begin(), n.grad.end()));
}

std::span<const double> Tape::value_data(Value v) const { return TapeAccess::node(*this, v.index()).val.cspan(); }

std::span<const double> Tape::grad_data(Value v) const {
  const Node& n = TapeAccess::node(*this, v.index());
  return n.grad.empty() ? std::span<const double>() : n.grad.cspan();
}

const Shape& Tape::shape(Value v) const { return TapeAccess::node(*this, v.index()).shape; }

Tape::NodeInfo Tape::node_info(size_t index) const {
  const Node& n = nodes_.at(index);
  NodeInfo info;
  info.op = n.op;
  info.shape = n.shape;
  for (int32_t i : n.in) {
    if (i >= 0) info.inputs.push_back(nodes_[static_cast<size_t>(i)].shape);
  }
  if (n.op == Op::matmul) {
    const MatmulPlan p = plan_matmul(info.inputs[0], info.inputs[1]);
    info.madds = p.cells() * p.m * p.k * p.n;
  }
  return info;
}

// ---- forward kernels (invoked by the op constructors below) ------------------

namespace {

void forward_matmul(Tape::Node& out, const Tape::Node& a, const Tape::Node& b, const MatmulPlan& p) {
  for (int64_t c = 0; c < p.cells(); ++c) {
    gemm_nn(p.m, p.n, p.k, a.val.data() + p.a_off[static_cast<size_t>(c)],
            b.val.data() + p.b_off[static_cast<size_t>(c)], out.val.data() + c * p.m * p.n, false);
  }
}

void forward_softmax_rows(std::span<double> out, std::span<const double> in, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
}

}  // namespace

// ---- op constructors ----------------------------------------------------------

Value matmul(Value a, Value b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  const MatmulPlan p = plan_matmul(a.shape(), b.shape());
  Shape out_shape = p.batch;
  out_shape.push_back(p.m);
  out_shape.push_back(p.n);
  Value v = push_node(t, Op::matmul, std::move(out_shape), {a.index(), b.index(), -1});
  forward_matmul(node_of(v), node_of(a), node_of(b), p);
  return v;
}

Value add(Value a, Value b) {
  check_same_tape(a, b);
  if (!shapes_equal(a.shape(), b.shape()))
    shape_fail("add: shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Value v = push_node(*a.tape(), Op::add, a.shape(), {a.index(), b.index(), -1});
  Tape::Node& n = node_of(v);
  const auto& av = node_of(a).val;
  const auto& bv = node_of(b).val;
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] + bv[i];
  return v;
}

Value mul(Value a, Value b) {
  check_same_tape(a, b);
  if (!shapes_equal(a.shape(), b.shape()))
    shape_fail("mul: shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Value v = push_node(*a.tape(), Op::mul, a.shape(), {a.index(), b.index(), -1});
  Tape::Node& n = node_of(v);
  const auto& av = node_of(a).val;
  const auto& bv = node_of(b).val;
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] * bv[i];
  return v;
}

Value mul_bcast_last(Value x, Value s) {
  check_same_tape(x, s);
  const Shape& xs = x.shape();
  const Shape& ss = s.shape();
  if (xs.size() != ss.size() + 1 || !std::equal(ss.begin(), ss.end(), xs.begin()))
    shape_fail("mul_bcast_last: scale shape " + shape_str(ss) + " must equal " + shape_str(xs) +
               " minus its last extent");
  Value v = push_node(*x.tape(), Op::mul_bcast_last, xs, {x.index(), s.index(), -1});
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  const auto& sv = node_of(s).val;
  const int64_t w = xs.back();
  for (int64_t r = 0; r < static_cast<int64_t>(sv.size()); ++r) {
    const double f = sv[static_cast<size_t>(r)];
    for (int64_t j = 0; j < w; ++j) n.val[static_cast<size_t>(r * w + j)] = xv[static_cast<size_t>(r * w + j)] * f;
  }
  return v;
}

Value scale(Value x, double c) {
  Value v = push_node(*x.tape(), Op::scale, x.shape(), {x.index(), -1, -1}, {}, c);
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = xv[i] * c;
  return v;
}

Value sigmoid(Value x) {
  Value v = push_node(*x.tape(), Op::sigmoid, x.shape(), {x.index(), -1, -1});
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = sigmoid_scalar(xv[i]);
  return v;
}

Value softmax_lastdim(Value x) {
  const Shape& xs = x.shape();
  if (xs.empty() || xs.back() < 1) shape_fail("softmax_lastdim: last extent must be >= 1, got " + shape_str(xs));
  Value v = push_node(*x.tape(), Op::softmax_lastdim, xs, {x.index(), -1, -1});
  Tape::Node& n = node_of(v);
  const int64_t cols = xs.back();
  forward_softmax_rows(n.val, node_of(x).val, static_cast<int64_t>(n.val.size()) / cols, cols);
  return v;
}

Value causal_softmax(Value x) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) shape_fail("causal_softmax: need rank >= 2, got " + shape_str(xs));
  const int64_t rows_per = xs[xs.size() - 2];
  const int64_t cols = xs.back();
  if (cols < rows_per)
    shape_fail("causal_softmax: trailing block must have cols >= rows, got " + shape_str(xs));
  Value v = push_node(*x.tape(), Op::causal_softmax, xs, {x.index(), -1, -1});
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  const int64_t blocks = static_cast<int64_t>(n.val.size()) / (rows_per * cols);
  for (int64_t b = 0; b < blocks; ++b) {
    for (int64_t r = 0; r < rows_per; ++r) {
      const double* in = xv.data() + (b * rows_per + r) * cols;
      double* out = n.val.data() + (b * rows_per + r) * cols;
      const int64_t valid = r + (cols - rows_per) + 1;
      double mx = in[0];
      for (int64_t j = 1; j < valid; ++j) mx = std::max(mx, in[j]);
      double sum = 0.0;
      for (int64_t j = 0; j < valid; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
      }
      const double inv = 1.0 / sum;
      for (int64_t j = 0; j < valid; ++j) out[j] *= inv;
      for (int64_t j = valid; j < cols; ++j) out[j] = 0.0;
    }
  }
  return v;
}

Value gelu(Value x) {
  Value v = push_node(*x.tape(), Op::gelu, x.shape(), {x.index(), -1, -1});
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
  for (size_t i = 0; i < n.val.size(); ++i) {
    n.val[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  }
  return v;
}

Value rmsnorm(Value x, Value gain, double eps) {
  check_same_tape(x, gain);
  const Shape& xs = x.shape();
  const Shape& gs = gain.shape();
  if (xs.empty() || gs.size() != 1 || gs[0] != xs.back())
    shape_fail("rmsnorm: gain shape " + shape_str(gs) + " must be the last extent of " + shape_str(xs));
  Value v = push_node(*x.tape(), Op::rmsnorm, xs, {x.index(), gain.index(), -1}, {}, eps);
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  const auto& gv = node_of(gain).val;
  const int64_t w = xs.back();
  const int64_t rows = static_cast<int64_t>(n.val.size()) / w;
  n.aux.resize(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * w;
    double* out = n.val.data() + r * w;
    double ms = 0.0;
    for (int64_t j = 0; j < w; ++j) ms += in[j] * in[j];
    const double inv_r = 1.0 / std::sqrt(ms / static_cast<double>(w) + eps);
    n.aux[static_cast<size_t>(r)] = inv_r;
    for (int64_t j = 0; j < w; ++j) out[j] = in[j] * inv_r * gv[static_cast<size_t>(j)];
  }
  return v;
}

Value rope(Value x, int64_t offset, double base) {
  const Shape& xs = x.shape();
  if (xs.size() < 3) shape_fail("rope: need layout [..., T, H, W], got " + shape_str(xs));
  const int64_t w = xs.back();
  if (w % 2 != 0) shape_fail("rope: head width must be even, got " + shape_str(xs));
  if (offset < 0) shape_fail("rope: negative position offset");
  Value v = push_node(*x.tape(), Op::rope, xs, {x.index(), -1, -1}, {offset}, base);
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  const int64_t heads = xs[xs.size() - 2];
  const int64_t steps = xs[xs.size() - 3];
  const int64_t half = w / 2;
  const int64_t batch = static_cast<int64_t>(n.val.size()) / (steps * heads * w);
  // cos/sin per (step, pair), shared by all batch cells and heads; kept in
  // aux so the backward pass reuses it
  n.aux.resize(static_cast<size_t>(2 * steps * half));
  {
    std::vector<double> inv_freq(static_cast<size_t>(half));
    for (int64_t i = 0; i < half; ++i)
      inv_freq[static_cast<size_t>(i)] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(w));
    for (int64_t tstep = 0; tstep < steps; ++tstep) {
      const double pos = static_cast<double>(tstep + offset);
      for (int64_t i = 0; i < half; ++i) {
        const double theta = pos * inv_freq[static_cast<size_t>(i)];
        n.aux[static_cast<size_t>(2 * (tstep * half + i))] = std::cos(theta);
        n.aux[static_cast<size_t>(2 * (tstep * half + i) + 1)] = std::sin(theta);
      }
    }
  }
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t tstep = 0; tstep < steps; ++tstep) {
      const double* cs = n.aux.data() + 2 * tstep * half;
      for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = ((b * steps + tstep) * heads + h) * w;
        for (int64_t i = 0; i < half; ++i) {
          const double c = cs[2 * i], s = cs[2 * i + 1];
          const double x0 = xv[static_cast<size_t>(off + 2 * i)];
          const double x1 = xv[static_cast<size_t>(off + 2 * i + 1)];
          n.val[static_cast<size_t>(off + 2 * i)] = x0 * c - x1 * s;
          n.val[static_cast<size_t>(off + 2 * i + 1)] = x0 * s + x1 * c;
        }
      }
    }
  }
  return v;
}

Value gather(Value table, std::span<const int64_t> ids) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) shape_fail("gather: table must be 2-D, got " + shape_str(ts));
  const int64_t vocab = ts[0], w = ts[1];
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      shape_fail("gather: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                 " out of range for table " + shape_str(ts));
  }
  Value v = push_node(*table.tape(), Op::gather, Shape{static_cast<int64_t>(ids.size()), w},
                      {table.index(), -1, -1}, std::vector<int64_t>(ids.begin(), ids.end()));
  Tape::Node& n = node_of(v);
  const auto& tv = node_of(table).val;
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + ids[i] * w, w, n.val.data() + static_cast<int64_t>(i) * w);
  }
  return v;
}

Value cross_entropy(Value logits, std::span<const int64_t> targets) {
  const Shape& ls = logits.shape();
  if (ls.size() != 2) shape_fail("cross_entropy: logits must be 2-D, got " + shape_str(ls));
  const int64_t rows = ls[0], vocab = ls[1];
  if (static_cast<int64_t>(targets.size()) != rows)
    shape_fail("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
               " rows");
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= vocab)
      shape_fail("cross_entropy: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                 " out of range for vocab " + std::to_string(vocab));
  }
  Value v = push_node(*logits.tape(), Op::cross_entropy, Shape{rows}, {logits.index(), -1, -1},
                      std::vector<int64_t>(targets.begin(), targets.end()));
  Tape::Node& n = node_of(v);
  const auto& lv = node_of(logits).val;
  n.aux.resize(static_cast<size_t>(2 * rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = lv.data() + r * vocab;
    double mx = x[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < vocab; ++j) sum += std::exp(x[j] - mx);
    n.aux[static_cast<size_t>(2 * r)] = mx;
    n.aux[static_cast<size_t>(2 * r + 1)] = sum;
    n.val[static_cast<size_t>(r)] = mx + std::log(sum) - x[targets[static_cast<size_t>(r)]];
  }
  return v;
}

Value reduce_sum(Value x) {
  Value v = push_node(*x.tape(), Op::reduce_sum, Shape{}, {x.index(), -1, -1});
  Tape::Node& n = node_of(v);
  double acc = 0.0;
  for (double e : node_of(x).val) acc += e;
  n.val[0] = acc;
  return v;
}

Value gated_slot_mix(Value v, Value mt, Value gates, bool gates_include_std) {
  check_same_tape(v, mt);
  check_same_tape(v, gates);
  const SlotMixDims d = plan_slot_mix(v.shape(), mt.shape(), gates.shape(), gates_include_std);
  Value out = push_node(*v.tape(), Op::gated_slot_mix, v.shape(), {v.index(), mt.index(), gates.index()},
                        {gates_include_std ? 1 : 0});
  Tape::Node& n = node_of(out);
  const auto& vv = node_of(v).val;
  const auto& mv = node_of(mt).val;
  const auto& gv = node_of(gates).val;
  const int64_t K = d.slots + (d.include_std ? 1 : 0);
  for (int64_t c = 0; c < d.cells; ++c) {
    for (int64_t g = 0; g < d.groups; ++g) {
      const int64_t vo = (c * d.groups + g) * d.width;
      const int64_t go = (c * d.groups + g) * K;
      double* y = n.val.data() + vo;
      const double g0 = d.include_std ? gv[static_cast<size_t>(go)] : 1.0;
      for (int64_t j = 0; j < d.width; ++j) y[j] = g0 * vv[static_cast<size_t>(vo + j)];
      for (int64_t i = 0; i < d.slots; ++i) {
        const double gi = gv[static_cast<size_t>(go + (d.include_std ? 1 : 0) + i)];
        const int64_t mo = ((c * d.slots + i) * d.groups + g) * d.width;
        for (int64_t j = 0; j < d.width; ++j) y[j] += gi * mv[static_cast<size_t>(mo + j)];
      }
    }
  }
  return out;
}

Value reshape(Value x, Shape shape) {
  if (shape_numel(shape) != shape_numel(x.shape()))
    shape_fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Value v = push_node(*x.tape(), Op::reshape, std::move(shape), {x.index(), -1, -1}, {}, 0.0, /*alloc=*/false);
  node_of(v).val = node_of(x).val;  // aliases the input storage (values are immutable)
  return v;
}

Value transpose(Value x, std::span<const int64_t> perm) {
  const Shape& xs = x.shape();
  const int64_t nd = static_cast<int64_t>(xs.size());
  if (static_cast<int64_t>(perm.size()) != nd) shape_fail("transpose: permutation rank mismatch for " + shape_str(xs));
  std::vector<bool> seen(static_cast<size_t>(nd), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= nd || seen[static_cast<size_t>(p)]) shape_fail("transpose: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(nd));
  for (int64_t i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = xs[static_cast<size_t>(perm[i])];
  Value v = push_node(*x.tape(), Op::transpose, std::move(out_shape), {x.index(), -1, -1},
                      std::vector<int64_t>(perm.begin(), perm.end()));
  Tape::Node& n = node_of(v);
  const auto& xv = node_of(x).val;
  const std::vector<int64_t> in_strides = strides_of(xs);
  std::vector<int64_t> step(static_cast<size_t>(nd));
  for (int64_t i = 0; i < nd; ++i) step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[i])];
  std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
  int64_t in_off = 0;
  const int64_t total = static_cast<int64_t>(n.val.size());
  for (int64_t o = 0; o < total; ++o) {
    n.val[static_cast<size_t>(o)] = xv[static_cast<size_t>(in_off)];
    for (int64_t dd = nd - 1; dd >= 0; --dd) {
      coord[static_cast<size_t>(dd)]++;
      in_off += step[static_cast<size_t>(dd)];
      if (coord[static_cast<size_t>(dd)] < n.shape[static_cast<size_t>(dd)]) break;
      in_off -= step[static_cast<size_t>(dd)] * n.shape[static_cast<size_t>(dd)];
      coord[static_cast<size_t>(dd)] = 0;
    }
  }
  return v;
}

Value transpose(Value x, std::initializer_list<int64_t> perm) {
  return transpose(x, std::span<const int64_t>(perm.begin(), perm.size()));
}

// ---- backward ---------------------------------------------------------------

void Tape::backward(Value loss) {
  if (loss.tape() != this) shape_fail("backward: loss recorded on a different tape");
  Node& ln = nodes_[static_cast<size_t>(loss.index())];
  if (ln.val.size() != 1) shape_fail("backward: loss must be scalar, got " + shape_str(ln.shape));
  ensure_grad(ln);
  ln.grad[0] += 1.0;
  backward_run_ = true;

  for (int32_t i = loss.index(); i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.empty()) continue;
    switch (n.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::add: {
        for (int slot = 0; slot < 2; ++slot) {
          Node& in = nodes_[static_cast<size_t>(n.in[static_cast<size_t>(slot)])];
          ensure_grad(in);
          for (size_t j = 0; j < n.grad.size(); ++j) in.grad[j] += n.grad[j];
        }
        break;
      }
      case Op::mul: {
        Node& a = nodes_[static_cast<size_t>(n.in[0])];
        Node& b = nodes_[static_cast<size_t>(n.in[1])];
        ensure_grad(a);
        ensure_grad(b);
        for (size_t j = 0; j < n.grad.size(); ++j) {
          a.grad[j] += n.grad[j] * b.val[j];
          b.grad[j] += n.grad[j] * a.val[j];
        }
        break;
      }
      case Op::mul_bcast_last: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        Node& s = nodes_[static_cast<size_t>(n.in[1])];
        ensure_grad(x);
        ensure_grad(s);
        const int64_t w = n.shape.back();
        const int64_t rows = static_cast<int64_t>(s.val.size());
        for (int64_t r = 0; r < rows; ++r) {
          const double f = s.val[static_cast<size_t>(r)];
          double acc = 0.0;
          for (int64_t j = 0; j < w; ++j) {
            const size_t idx = static_cast<size_t>(r * w + j);
            x.grad[idx] += n.grad[idx] * f;
            acc += n.grad[idx] * x.val[idx];
          }
          s.grad[static_cast<size_t>(r)] += acc;
        }
        break;
      }
      case Op::scale: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        for (size_t j = 0; j < n.grad.size(); ++j) x.grad[j] += n.grad[j] * n.dattr;
        break;
      }
      case Op::matmul: {
        Node& a = nodes_[static_cast<size_t>(n.in[0])];
        Node& b = nodes_[static_cast<size_t>(n.in[1])];
        ensure_grad(a);
        ensure_grad(b);
        const MatmulPlan p = plan_matmul(a.shape, b.shape);
        for (int64_t c = 0; c < p.cells(); ++c) {
          const double* dy = n.grad.data() + c * p.m * p.n;
          // da += dy * b^T
          gemm_nt(p.m, p.k, p.n, dy, b.val.data() + p.b_off[static_cast<size_t>(c)],
                  a.grad.data() + p.a_off[static_cast<size_t>(c)], true);
          // db += a^T * dy
          gemm_tn(p.k, p.n, p.m, a.val.data() + p.a_off[static_cast<size_t>(c)], dy,
                  b.grad.data() + p.b_off[static_cast<size_t>(c)], true);
        }
        break;
      }
      case Op::transpose: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        const int64_t nd = static_cast<int64_t>(n.shape.size());
        const std::vector<int64_t> in_strides = strides_of(x.shape);
        std::vector<int64_t> step(static_cast<size_t>(nd));
        for (int64_t d = 0; d < nd; ++d) step[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(n.iattr[d])];
        std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
        int64_t in_off = 0;
        const int64_t total = static_cast<int64_t>(n.grad.size());
        for (int64_t o = 0; o < total; ++o) {
          x.grad[static_cast<size_t>(in_off)] += n.grad[static_cast<size_t>(o)];
          for (int64_t d = nd - 1; d >= 0; --d) {
            coord[static_cast<size_t>(d)]++;
            in_off += step[static_cast<size_t>(d)];
            if (coord[static_cast<size_t>(d)] < n.shape[static_cast<size_t>(d)]) break;
            in_off -= step[static_cast<size_t>(d)] * n.shape[static_cast<size_t>(d)];
            coord[static_cast<size_t>(d)] = 0;
          }
        }
        break;
      }
      case Op::reshape: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        for (size_t j = 0; j < n.grad.size(); ++j) x.grad[j] += n.grad[j];
        break;
      }
      case Op::sigmoid: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        for (size_t j = 0; j < n.grad.size(); ++j) x.grad[j] += n.grad[j] * n.val[j] * (1.0 - n.val[j]);
        break;
      }
      case Op::softmax_lastdim: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        const int64_t cols = n.shape.back();
        const int64_t rows = static_cast<int64_t>(n.val.size()) / cols;
        for (int64_t r = 0; r < rows; ++r) {
          const double* y = n.val.data() + r * cols;
          const double* dy = n.grad.data() + r * cols;
          double dot = 0.0;
          for (int64_t j = 0; j < cols; ++j) dot += y[j] * dy[j];
          double* dx = x.grad.data() + r * cols;
          for (int64_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
        break;
      }
      case Op::causal_softmax: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        const int64_t cols = n.shape.back();
        const int64_t rows_per = n.shape[n.shape.size() - 2];
        const int64_t blocks = static_cast<int64_t>(n.val.size()) / (rows_per * cols);
        for (int64_t b = 0; b < blocks; ++b) {
          for (int64_t r = 0; r < rows_per; ++r) {
            const int64_t off = (b * rows_per + r) * cols;
            const int64_t valid = r + (cols - rows_per) + 1;
            const double* y = n.val.data() + off;
            const double* dy = n.grad.data() + off;
            double dot = 0.0;
            for (int64_t j = 0; j < valid; ++j) dot += y[j] * dy[j];
            double* dx = x.grad.data() + off;
            for (int64_t j = 0; j < valid; ++j) dx[j] += y[j] * (dy[j] - dot);
          }
        }
        break;
      }
      case Op::gelu: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (size_t j = 0; j < n.grad.size(); ++j) {
          const double xv = x.val[j];
          const double phi = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
          const double dens = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
          x.grad[j] += n.grad[j] * (phi + xv * dens);
        }
        break;
      }
      case Op::rmsnorm: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        Node& g = nodes_[static_cast<size_t>(n.in[1])];
        ensure_grad(x);
        ensure_grad(g);
        const int64_t w = n.shape.back();
        const int64_t rows = static_cast<int64_t>(n.val.size()) / w;
        for (int64_t r = 0; r < rows; ++r) {
          const double inv_r = n.aux[static_cast<size_t>(r)];
          const double* xr = x.val.data() + r * w;
          const double* dyr = n.grad.data() + r * w;
          double dot = 0.0;
          for (int64_t j = 0; j < w; ++j) dot += dyr[j] * g.val[static_cast<size_t>(j)] * xr[j];
          const double k = dot * inv_r * inv_r * inv_r / static_cast<double>(w);
          double* dxr = x.grad.data() + r * w;
          for (int64_t j = 0; j < w; ++j) {
            dxr[j] += dyr[j] * g.val[static_cast<size_t>(j)] * inv_r - xr[j] * k;
            g.grad[static_cast<size_t>(j)] += dyr[j] * xr[j] * inv_r;
          }
        }
        break;
      }
      case Op::rope: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        const int64_t w = n.shape.back();
        const int64_t heads = n.shape[n.shape.size() - 2];
        const int64_t steps = n.shape[n.shape.size() - 3];
        const int64_t half = w / 2;
        const int64_t batch = static_cast<int64_t>(n.val.size()) / (steps * heads * w);
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t tstep = 0; tstep < steps; ++tstep) {
            const double* cs = n.aux.data() + 2 * tstep * half;
            for (int64_t h = 0; h < heads; ++h) {
              const int64_t off = ((b * steps + tstep) * heads + h) * w;
              for (int64_t i = 0; i < half; ++i) {
                const double c = cs[2 * i], s = cs[2 * i + 1];
                const double d0 = n.grad[static_cast<size_t>(off + 2 * i)];
                const double d1 = n.grad[static_cast<size_t>(off + 2 * i + 1)];
                x.grad[static_cast<size_t>(off + 2 * i)] += d0 * c + d1 * s;
                x.grad[static_cast<size_t>(off + 2 * i + 1)] += -d0 * s + d1 * c;
              }
            }
          }
        }
        break;
      }
      case Op::gather: {
        Node& tbl = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(tbl);
        const int64_t w = n.shape.back();
        for (size_t r = 0; r < n.iattr.size(); ++r) {
          const double* dy = n.grad.data() + static_cast<int64_t>(r) * w;
          double* dst = tbl.grad.data() + n.iattr[r] * w;
          for (int64_t j = 0; j < w; ++j) dst[j] += dy[j];
        }
        break;
      }
      case Op::cross_entropy: {
        Node& logits = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(logits);
        const int64_t vocab = logits.shape.back();
        const int64_t rows = static_cast<int64_t>(n.val.size());
        for (int64_t r = 0; r < rows; ++r) {
          const double dl = n.grad[static_cast<size_t>(r)];
          if (dl == 0.0) continue;
          const double mx = n.aux[static_cast<size_t>(2 * r)];
          const double sum = n.aux[static_cast<size_t>(2 * r + 1)];
          const double* xr = logits.val.data() + r * vocab;
          double* dxr = logits.grad.data() + r * vocab;
          for (int64_t j = 0; j < vocab; ++j) dxr[j] += dl * std::exp(xr[j] - mx) / sum;
          dxr[n.iattr[static_cast<size_t>(r)]] -= dl;
        }
        break;
      }
      case Op::reduce_sum: {
        Node& x = nodes_[static_cast<size_t>(n.in[0])];
        ensure_grad(x);
        const double dy = n.grad[0];
        for (size_t j = 0; j < x.grad.size(); ++j) x.grad[j] += dy;
        break;
      }
      case Op::gated_slot_mix: {
        Node& v = nodes_[static_cast<size_t>(n.in[0])];
        Node& mt = nodes_[static_cast<size_t>(n.in[1])];
        Node& gt = nodes_[static_cast<size_t>(n.in[2])];
        ensure_grad(v);
        ensure_grad(mt);
        ensure_grad(gt);
        const SlotMixDims d = plan_slot_mix(v.shape, mt.shape, gt.shape, n.iattr[0] != 0);
        const int64_t K = d.slots + (d.include_std ? 1 : 0);
        const int64_t i0 = d.include_std ? 1 : 0;
        for (int64_t c = 0; c < d.cells; ++c) {
          for (int64_t g = 0; g < d.groups; ++g) {
            const int64_t vo = (c * d.groups + g) * d.width;
            const int64_t go = (c * d.groups + g) * K;
            const double* dy = n.grad.data() + vo;
            const double g0 = d.include_std ? gt.val[static_cast<size_t>(go)] : 1.0;
            double acc0 = 0.0;
            for (int64_t j = 0; j < d.width; ++j) {
              v.grad[static_cast<size_t>(vo + j)] += dy[j] * g0;
              acc0 += dy[j] * v.val[static_cast<size_t>(vo + j)];
            }
            if (d.include_std) gt.grad[static_cast<size_t>(go)] += acc0;
            for (int64_t i = 0; i < d.slots; ++i) {
              const int64_t mo = ((c * d.slots + i) * d.groups + g) * d.width;
              const double gi = gt.val[static_cast<size_t>(go + i0 + i)];
              double acc = 0.0;
              for (int64_t j = 0; j < d.width; ++j) {
                mt.grad[static_cast<size_t>(mo + j)] += dy[j] * gi;
                acc += dy[j] * mt.val[static_cast<size_t>(mo + j)];
              }
              gt.grad[static_cast<size_t>(go + i0 + i)] += acc;
            }
          }
        }
        break;
      }
    }
  }
}

}  // namespace movelab
