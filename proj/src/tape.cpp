#include "nk/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "nk/fft_kernel.hpp"

namespace nk {

namespace {

const Tensor& val(const Var& v) {
  if (!v.defined()) throw ConfigError("autodiff: use of undefined Var");
  return *v.val;
}

Tape* tape_of(const Var& a, const Var& b) {
  Tape* t = a.on_tape() ? a.tape : nullptr;
  if (b.defined() && b.on_tape()) {
    if (t && t != b.tape)
      throw ConfigError("autodiff: operands belong to different tapes");
    t = b.tape;
  }
  return t;
}

Tape* tape_of(const std::vector<Var>& xs) {
  Tape* t = nullptr;
  for (const auto& x : xs) {
    if (x.on_tape()) {
      if (t && t != x.tape)
        throw ConfigError("autodiff: operands belong to different tapes");
      t = x.tape;
    }
  }
  return t;
}

void check_complex(const Tensor& t, const char* who) {
  if (t.shape.size() != 2 || t.shape[0] != 2)
    throw ConfigError(std::string(who) + ": expected a [2,M] complex tensor, got " +
                      t.shape_str());
}

// Broadcast contract for elementwise binary ops: identical shapes, or one
// operand with a single element.
void check_broadcast(const Tensor& a, const Tensor& b, const char* who) {
  if (a.numel() != b.numel() && a.numel() != 1 && b.numel() != 1)
    throw ConfigError(std::string(who) + ": shape mismatch " + a.shape_str() +
                      " vs " + b.shape_str());
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

void fft_tensor(const Tensor& in, Tensor& out, bool inverse) {
  check_complex(in, inverse ? "ifft" : "fft");
  const std::size_t m = in.shape[1];
  if (!is_pow2(m))
    throw ConfigError("fft: length must be a power of two");
  out = in;
  detail::fft_inplace(out.data.data(), out.data.data() + m, m, inverse);
}

// Overlap-save constraint: round-trip through the time domain with a
// contiguous zero mask. keep_first zeroes taps [keep, M); keep_last zeroes
// taps [0, zero).
Tensor project_tensor(const Tensor& in, std::size_t split, bool keep_first) {
  Tensor t;
  fft_tensor(in, t, true);
  const std::size_t m = in.shape[1];
  if (split > m) throw ConfigError("projection: split exceeds length");
  double* re = t.data.data();
  double* im = re + m;
  if (keep_first) {
    for (std::size_t i = split; i < m; ++i) re[i] = im[i] = 0.0;
  } else {
    for (std::size_t i = 0; i < split; ++i) re[i] = im[i] = 0.0;
  }
  Tensor out;
  fft_tensor(t, out, false);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape internals

Var detail_record(Tape* tp, Op k, Tensor out, const Var& a, const Var& b,
                  double c, int p0, int p1);
Var detail_record_many(Tape* tp, Op k, Tensor out, const std::vector<Var>& ins);

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::bind(const Var& v) {
  if (v.on_tape()) {
    if (v.tape != this)
      throw ConfigError("autodiff: operand belongs to a different tape");
    return v.id;
  }
  Node n;
  n.kind = Op::Const;
  n.out = v.val;
  return push(std::move(n));
}

Var Tape::leaf(Tensor t) {
  Node n;
  n.kind = Op::Leaf;
  n.out = std::make_shared<const Tensor>(std::move(t));
  Var v;
  v.val = n.out;
  v.tape = this;
  v.id = push(std::move(n));
  return v;
}

Var Tape::constant(Tensor t) {
  Node n;
  n.kind = Op::Const;
  n.out = std::make_shared<const Tensor>(std::move(t));
  Var v;
  v.val = n.out;
  v.tape = this;
  v.id = push(std::move(n));
  return v;
}

Var Tape::constant(const Var& detached_var) {
  Node n;
  n.kind = Op::Const;
  n.out = detached_var.val;
  Var v;
  v.val = n.out;
  v.tape = this;
  v.id = push(std::move(n));
  return v;
}

Tensor& Tape::grad_slot(int id) {
  if (!touched_[id]) {
    grads_[id] = Tensor::zeros(nodes_[id].out->shape);
    touched_[id] = 1;
  }
  return grads_[id];
}

void Tape::accumulate(int id, const double* g, std::size_t n, double s) {
  if (nodes_[id].kind == Op::Const) return;
  Tensor& slot = grad_slot(id);
  for (std::size_t i = 0; i < n; ++i) slot.data[i] += s * g[i];
}

Tensor Tape::grad_of(const Var& v) const {
  if (!v.on_tape() || v.tape != this)
    throw ConfigError("grad_of: Var is not on this tape");
  if (!touched_[v.id]) return Tensor::zeros(v.val->shape);
  return grads_[v.id];
}

bool Tape::touched(const Var& v) const {
  return v.on_tape() && v.tape == this && touched_[v.id] != 0;
}

Var detach(const Var& v) {
  Var out;
  out.val = v.val;
  return out;
}

// ---------------------------------------------------------------------------
// Recording

Var detail_record(Tape* tp, Op k, Tensor out, const Var& a, const Var& b,
                  double c, int p0, int p1) {
  Var r;
  r.val = std::make_shared<const Tensor>(std::move(out));
  if (!tp) return r;
  Tape::Node n;
  n.kind = k;
  n.a = a.defined() ? tp->bind(a) : -1;
  n.b = b.defined() ? tp->bind(b) : -1;
  n.c = c;
  n.p0 = p0;
  n.p1 = p1;
  n.out = r.val;
  r.tape = tp;
  r.id = tp->push(std::move(n));
  return r;
}

Var detail_record_many(Tape* tp, Op k, Tensor out, const std::vector<Var>& ins) {
  Var r;
  r.val = std::make_shared<const Tensor>(std::move(out));
  if (!tp) return r;
  Tape::Node n;
  n.kind = k;
  n.many.reserve(ins.size());
  for (const auto& x : ins) n.many.push_back(tp->bind(x));
  n.out = r.val;
  r.tape = tp;
  r.id = tp->push(std::move(n));
  return r;
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

template <class F>
Tensor ew_binary(const Tensor& a, const Tensor& b, F f, const char* who) {
  check_broadcast(a, b, who);
  const bool as = a.numel() == 1, bs = b.numel() == 1;
  const Tensor& big = as ? b : a;
  Tensor out(big.shape);
  const std::size_t n = big.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.data[i] = f(a.data[as ? 0 : i], b.data[bs ? 0 : i]);
  return out;
}

template <class F>
Tensor ew_unary(const Tensor& a, F f) {
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return detail_record(tape_of(a, b), Op::Add,
                       ew_binary(val(a), val(b), [](double x, double y) { return x + y; }, "add"),
                       a, b, 0, 0, 0);
}

Var sub(const Var& a, const Var& b) {
  return detail_record(tape_of(a, b), Op::Sub,
                       ew_binary(val(a), val(b), [](double x, double y) { return x - y; }, "sub"),
                       a, b, 0, 0, 0);
}

Var mul(const Var& a, const Var& b) {
  return detail_record(tape_of(a, b), Op::Mul,
                       ew_binary(val(a), val(b), [](double x, double y) { return x * y; }, "mul"),
                       a, b, 0, 0, 0);
}

Var divide(const Var& a, const Var& b) {
  return detail_record(tape_of(a, b), Op::Div,
                       ew_binary(val(a), val(b), [](double x, double y) { return x / y; }, "div"),
                       a, b, 0, 0, 0);
}

Var neg(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Neg,
                       ew_unary(val(a), [](double x) { return -x; }), a, {}, 0, 0, 0);
}

Var scale(const Var& a, double c) {
  return detail_record(tape_of(a, {}), Op::Scale,
                       ew_unary(val(a), [c](double x) { return c * x; }), a, {}, c, 0, 0);
}

Var add_const(const Var& a, double c) {
  return detail_record(tape_of(a, {}), Op::AddC,
                       ew_unary(val(a), [c](double x) { return x + c; }), a, {}, c, 0, 0);
}

Var vexp(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Exp,
                       ew_unary(val(a), [](double x) { return std::exp(x); }), a, {}, 0, 0, 0);
}

Var vlog(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Log,
                       ew_unary(val(a), [](double x) { return std::log(x); }), a, {}, 0, 0, 0);
}

Var vtanh(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Tanh,
                       ew_unary(val(a), [](double x) { return std::tanh(x); }), a, {}, 0, 0, 0);
}

Var sigmoid(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Sigmoid,
                       ew_unary(val(a), stable_sigmoid), a, {}, 0, 0, 0);
}

Var relu(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Relu,
                       ew_unary(val(a), [](double x) { return x > 0.0 ? x : 0.0; }), a, {}, 0, 0, 0);
}

Var softplus(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Softplus,
                       ew_unary(val(a), stable_softplus), a, {}, 0, 0, 0);
}

Var vsqrt(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Sqrt,
                       ew_unary(val(a), [](double x) { return std::sqrt(x); }), a, {}, 0, 0, 0);
}

Var vabs(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Abs,
                       ew_unary(val(a), [](double x) { return std::fabs(x); }), a, {}, 0, 0, 0);
}

// ---------------------------------------------------------------------------
// Reductions, linear algebra, layout

Var matmul(const Var& w, const Var& x) {
  const Tensor& wv = val(w);
  const Tensor& xv = val(x);
  if (wv.shape.size() != 2)
    throw ConfigError("matmul: weight must be [m,n], got " + wv.shape_str());
  const std::size_t m = wv.shape[0], n = wv.shape[1];
  if (xv.numel() != n)
    throw ConfigError("matmul: input length " + std::to_string(xv.numel()) +
                      " does not match weight columns " + std::to_string(n));
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* row = wv.data.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * xv.data[j];
    out.data[i] = acc;
  }
  return detail_record(tape_of(w, x), Op::Matmul, std::move(out), w, x, 0, 0, 0);
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : val(a).data) acc += v;
  return detail_record(tape_of(a, {}), Op::Sum, Tensor::scalar(acc), a, {}, 0, 0, 0);
}

Var mean(const Var& a) {
  const std::size_t n = val(a).numel();
  if (n == 0) throw ConfigError("mean of empty tensor");
  double acc = 0.0;
  for (double v : val(a).data) acc += v;
  return detail_record(tape_of(a, {}), Op::Mean,
                       Tensor::scalar(acc / static_cast<double>(n)), a, {}, 0, 0, 0);
}

Var slice(const Var& a, std::size_t offset, std::size_t len) {
  const Tensor& av = val(a);
  if (offset + len > av.numel())
    throw ConfigError("slice: range out of bounds");
  Tensor out({len});
  std::copy(av.data.begin() + static_cast<std::ptrdiff_t>(offset),
            av.data.begin() + static_cast<std::ptrdiff_t>(offset + len),
            out.data.begin());
  return detail_record(tape_of(a, {}), Op::Slice, std::move(out), a, {}, 0,
                       static_cast<int>(offset), static_cast<int>(len));
}

Var concat(const Var& a, const Var& b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  Tensor out({av.numel() + bv.numel()});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(av.numel()));
  return detail_record(tape_of(a, b), Op::Concat2, std::move(out), a, b, 0,
                       static_cast<int>(av.numel()), 0);
}

Var concat_many(const std::vector<Var>& xs) {
  if (xs.empty()) throw ConfigError("concat_many: empty input list");
  std::size_t total = 0;
  for (const auto& x : xs) total += val(x).numel();
  Tensor out({total});
  std::size_t off = 0;
  for (const auto& x : xs) {
    const Tensor& xv = val(x);
    std::copy(xv.data.begin(), xv.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += xv.numel();
  }
  return detail_record_many(tape_of(xs), Op::ConcatN, std::move(out), xs);
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  const Tensor& av = val(a);
  if (Tensor::numel_of(shape) != av.numel())
    throw ConfigError("reshape: element count mismatch");
  Tensor out(std::move(shape), av.data);
  return detail_record(tape_of(a, {}), Op::Reshape, std::move(out), a, {}, 0, 0, 0);
}

Var bias_rows(const Var& a, const Var& b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (av.shape.size() != 2 || bv.numel() != av.shape[0])
    throw ConfigError("bias_rows: expected [C,F] + [C]");
  const std::size_t c = av.shape[0], f = av.shape[1];
  Tensor out(av.shape);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < f; ++j)
      out.data[i * f + j] = av.data[i * f + j] + bv.data[i];
  return detail_record(tape_of(a, b), Op::BiasRows, std::move(out), a, b, 0, 0, 0);
}

// ---------------------------------------------------------------------------
// Complex ops ([2,M] convention)

Var cmul(const Var& a, const Var& b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  check_complex(av, "cmul");
  check_complex(bv, "cmul");
  if (av.shape[1] != bv.shape[1]) throw ConfigError("cmul: length mismatch");
  const std::size_t m = av.shape[1];
  Tensor out(av.shape);
  const double *ar = av.data.data(), *ai = ar + m;
  const double *br = bv.data.data(), *bi = br + m;
  double *or_ = out.data.data(), *oi = or_ + m;
  for (std::size_t i = 0; i < m; ++i) {
    or_[i] = ar[i] * br[i] - ai[i] * bi[i];
    oi[i] = ar[i] * bi[i] + ai[i] * br[i];
  }
  return detail_record(tape_of(a, b), Op::CMul, std::move(out), a, b, 0, 0, 0);
}

Var conj(const Var& a) {
  const Tensor& av = val(a);
  check_complex(av, "conj");
  const std::size_t m = av.shape[1];
  Tensor out(av.shape);
  for (std::size_t i = 0; i < m; ++i) {
    out.data[i] = av.data[i];
    out.data[m + i] = -av.data[m + i];
  }
  return detail_record(tape_of(a, {}), Op::Conj, std::move(out), a, {}, 0, 0, 0);
}

namespace {

void check_real_factor(const Tensor& c, const Tensor& r, const char* who) {
  check_complex(c, who);
  if (r.numel() != c.shape[1] && r.numel() != 1)
    throw ConfigError(std::string(who) + ": real factor must be [M] or [1]");
}

}  // namespace

Var crmul(const Var& c, const Var& r) {
  const Tensor& cv = val(c);
  const Tensor& rv = val(r);
  check_real_factor(cv, rv, "crmul");
  const std::size_t m = cv.shape[1];
  const bool rs = rv.numel() == 1;
  Tensor out(cv.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double f = rv.data[rs ? 0 : i];
    out.data[i] = cv.data[i] * f;
    out.data[m + i] = cv.data[m + i] * f;
  }
  return detail_record(tape_of(c, r), Op::CRMul, std::move(out), c, r, 0, 0, 0);
}

Var crdiv(const Var& c, const Var& r) {
  const Tensor& cv = val(c);
  const Tensor& rv = val(r);
  check_real_factor(cv, rv, "crdiv");
  const std::size_t m = cv.shape[1];
  const bool rs = rv.numel() == 1;
  Tensor out(cv.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double f = rv.data[rs ? 0 : i];
    out.data[i] = cv.data[i] / f;
    out.data[m + i] = cv.data[m + i] / f;
  }
  return detail_record(tape_of(c, r), Op::CRDiv, std::move(out), c, r, 0, 0, 0);
}

Var cabs2(const Var& a) {
  const Tensor& av = val(a);
  check_complex(av, "cabs2");
  const std::size_t m = av.shape[1];
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i)
    out.data[i] = av.data[i] * av.data[i] + av.data[m + i] * av.data[m + i];
  return detail_record(tape_of(a, {}), Op::CAbs2, std::move(out), a, {}, 0, 0, 0);
}

Var cabs(const Var& a) {
  const Tensor& av = val(a);
  check_complex(av, "cabs");
  const std::size_t m = av.shape[1];
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i)
    out.data[i] = std::hypot(av.data[i], av.data[m + i]);
  return detail_record(tape_of(a, {}), Op::CAbs, std::move(out), a, {}, 0, 0, 0);
}

Var fft_c(const Var& a) {
  Tensor out;
  fft_tensor(val(a), out, false);
  return detail_record(tape_of(a, {}), Op::Fft, std::move(out), a, {}, 0, 0, 0);
}

Var ifft_c(const Var& a) {
  Tensor out;
  fft_tensor(val(a), out, true);
  return detail_record(tape_of(a, {}), Op::Ifft, std::move(out), a, {}, 0, 0, 0);
}

Var proj_keep_first(const Var& a, std::size_t keep) {
  Tensor out = project_tensor(val(a), keep, true);
  return detail_record(tape_of(a, {}), Op::ProjKeepFirst, std::move(out), a, {}, 0,
                       static_cast<int>(keep), 0);
}

Var proj_keep_last(const Var& a, std::size_t zero) {
  Tensor out = project_tensor(val(a), zero, false);
  return detail_record(tape_of(a, {}), Op::ProjKeepLast, std::move(out), a, {}, 0,
                       static_cast<int>(zero), 0);
}

namespace {

// one-sided [2,F] -> full [2,M] with M = 2(F-1); interior bins are
// conjugate-mirrored. DC and Nyquist imaginary parts are dropped so the
// result is always the spectrum of a real signal.
Tensor mirror_fwd(const Tensor& in) {
  check_complex(in, "mirror_spectrum");
  const std::size_t f = in.shape[1];
  if (f < 2) throw ConfigError("mirror_spectrum: need at least 2 bins");
  const std::size_t m = 2 * (f - 1);
  Tensor out({2, m});
  for (std::size_t i = 0; i < f; ++i) {
    out.data[i] = in.data[i];
    out.data[m + i] = in.data[f + i];
  }
  out.data[m] = 0.0;
  out.data[m + f - 1] = 0.0;
  for (std::size_t i = 1; i + 1 < f; ++i) {
    out.data[m - i] = in.data[i];
    out.data[m + m - i] = -in.data[f + i];
  }
  return out;
}

}  // namespace

Var mirror_spectrum(const Var& a) {
  return detail_record(tape_of(a, {}), Op::Mirror, mirror_fwd(val(a)), a, {}, 0, 0, 0);
}

Var onesided_spectrum(const Var& a) {
  const Tensor& av = val(a);
  check_complex(av, "onesided_spectrum");
  const std::size_t m = av.shape[1];
  if (m % 2 != 0) throw ConfigError("onesided_spectrum: length must be even");
  const std::size_t f = m / 2 + 1;
  Tensor out({2, f});
  for (std::size_t i = 0; i < f; ++i) {
    out.data[i] = av.data[i];
    out.data[f + i] = av.data[m + i];
  }
  return detail_record(tape_of(a, {}), Op::OneSided, std::move(out), a, {}, 0, 0, 0);
}

Var mirror_real(const Var& a) {
  const Tensor& av = val(a);
  if (av.shape.size() != 1) throw ConfigError("mirror_real: expected [F]");
  const std::size_t f = av.numel();
  if (f < 2) throw ConfigError("mirror_real: need at least 2 bins");
  const std::size_t m = 2 * (f - 1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i)
    out.data[i] = av.data[std::min(i, m - i)];
  return detail_record(tape_of(a, {}), Op::MirrorReal, std::move(out), a, {}, 0, 0, 0);
}

Var conv1d(const Var& x, const Var& w) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  if (xv.shape.size() != 2) throw ConfigError("conv1d: input must be [Cin,F]");
  if (wv.shape.size() != 3) throw ConfigError("conv1d: weight must be [Cout,Cin,K]");
  const std::size_t cin = xv.shape[0], f = xv.shape[1];
  const std::size_t cout = wv.shape[0], k = wv.shape[2];
  if (wv.shape[1] != cin) throw ConfigError("conv1d: channel mismatch");
  if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({cout, f});
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t j = 0; j < f; ++j) {
      double acc = 0.0;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* wrow = wv.data.data() + (co * cin + ci) * k;
        const double* xrow = xv.data.data() + ci * f;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(kk) - half;
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(f))
            acc += wrow[kk] * xrow[src];
        }
      }
      out.data[co * f + j] = acc;
    }
  }
  return detail_record(tape_of(x, w), Op::Conv1d, std::move(out), x, w, 0, 0, 0);
}

// ---------------------------------------------------------------------------
// Backward

void Tape::backward(const Var& loss) {
  if (!loss.on_tape() || loss.tape != this)
    throw ConfigError("backward: loss is not on this tape");
  if (loss.val->numel() != 1)
    throw ConfigError("backward: loss must be a scalar");

  grads_.assign(nodes_.size(), Tensor());
  touched_.assign(nodes_.size(), 0);
  grad_slot(loss.id).data[0] = 1.0;

  for (int i = loss.id; i >= 0; --i) {
    if (!touched_[i]) continue;
    const Node& n = nodes_[i];
    const Tensor& g = grads_[i];
    const Tensor& out = *n.out;
    auto aval = [&](int id) -> const Tensor& { return *nodes_[id].out; };

    switch (n.kind) {
      case Op::Leaf:
      case Op::Const:
        break;

      case Op::Add: {
        const Tensor& av = aval(n.a);
        const Tensor& bv = aval(n.b);
        if (av.numel() == g.numel()) accumulate(n.a, g.data.data(), g.numel(), 1.0);
        else { double s = 0; for (double v : g.data) s += v; accumulate(n.a, &s, 1, 1.0); }
        if (bv.numel() == g.numel()) accumulate(n.b, g.data.data(), g.numel(), 1.0);
        else { double s = 0; for (double v : g.data) s += v; accumulate(n.b, &s, 1, 1.0); }
        break;
      }
      case Op::Sub: {
        const Tensor& av = aval(n.a);
        const Tensor& bv = aval(n.b);
        if (av.numel() == g.numel()) accumulate(n.a, g.data.data(), g.numel(), 1.0);
        else { double s = 0; for (double v : g.data) s += v; accumulate(n.a, &s, 1, 1.0); }
        if (bv.numel() == g.numel()) accumulate(n.b, g.data.data(), g.numel(), -1.0);
        else { double s = 0; for (double v : g.data) s += v; accumulate(n.b, &s, 1, -1.0); }
        break;
      }
      case Op::Mul: {
        const Tensor& av = aval(n.a);
        const Tensor& bv = aval(n.b);
        const bool as = av.numel() == 1, bs = bv.numel() == 1;
        if (nodes_[n.a].kind != Op::Const) {
          Tensor t(as ? std::vector<std::size_t>{1} : g.shape);
          for (std::size_t j = 0; j < g.numel(); ++j) {
            const double v = g.data[j] * bv.data[bs ? 0 : j];
            if (as) t.data[0] += v; else t.data[j] = v;
          }
          accumulate(n.a, t.data.data(), t.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor t(bs ? std::vector<std::size_t>{1} : g.shape);
          for (std::size_t j = 0; j < g.numel(); ++j) {
            const double v = g.data[j] * av.data[as ? 0 : j];
            if (bs) t.data[0] += v; else t.data[j] = v;
          }
          accumulate(n.b, t.data.data(), t.numel(), 1.0);
        }
        break;
      }
      case Op::Div: {
        const Tensor& av = aval(n.a);
        const Tensor& bv = aval(n.b);
        const bool as = av.numel() == 1, bs = bv.numel() == 1;
        if (nodes_[n.a].kind != Op::Const) {
          Tensor t(as ? std::vector<std::size_t>{1} : g.shape);
          for (std::size_t j = 0; j < g.numel(); ++j) {
            const double v = g.data[j] / bv.data[bs ? 0 : j];
            if (as) t.data[0] += v; else t.data[j] = v;
          }
          accumulate(n.a, t.data.data(), t.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor t(bs ? std::vector<std::size_t>{1} : g.shape);
          for (std::size_t j = 0; j < g.numel(); ++j) {
            const double v = -g.data[j] * out.data[j] / bv.data[bs ? 0 : j];
            if (bs) t.data[0] += v; else t.data[j] = v;
          }
          accumulate(n.b, t.data.data(), t.numel(), 1.0);
        }
        break;
      }
      case Op::Neg:
        accumulate(n.a, g.data.data(), g.numel(), -1.0);
        break;
      case Op::Scale:
        accumulate(n.a, g.data.data(), g.numel(), n.c);
        break;
      case Op::AddC:
        accumulate(n.a, g.data.data(), g.numel(), 1.0);
        break;
      case Op::Exp: {
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j) t.data[j] = g.data[j] * out.data[j];
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Log: {
        const Tensor& av = aval(n.a);
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j) t.data[j] = g.data[j] / av.data[j];
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Tanh: {
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j)
          t.data[j] = g.data[j] * (1.0 - out.data[j] * out.data[j]);
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Sigmoid: {
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j)
          t.data[j] = g.data[j] * out.data[j] * (1.0 - out.data[j]);
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Relu: {
        const Tensor& av = aval(n.a);
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j)
          t.data[j] = av.data[j] > 0.0 ? g.data[j] : 0.0;
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Softplus: {
        const Tensor& av = aval(n.a);
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j)
          t.data[j] = g.data[j] * stable_sigmoid(av.data[j]);
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Sqrt: {
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j)
          t.data[j] = out.data[j] > 0.0 ? g.data[j] * 0.5 / out.data[j] : 0.0;
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Abs: {
        const Tensor& av = aval(n.a);
        Tensor t(g.shape);
        for (std::size_t j = 0; j < g.numel(); ++j) {
          const double s = av.data[j] > 0.0 ? 1.0 : (av.data[j] < 0.0 ? -1.0 : 0.0);
          t.data[j] = g.data[j] * s;
        }
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Matmul: {
        const Tensor& wv = aval(n.a);
        const Tensor& xv = aval(n.b);
        const std::size_t m = wv.shape[0], nn = wv.shape[1];
        if (nodes_[n.a].kind != Op::Const) {
          Tensor gw(wv.shape);
          for (std::size_t i2 = 0; i2 < m; ++i2)
            for (std::size_t j = 0; j < nn; ++j)
              gw.data[i2 * nn + j] = g.data[i2] * xv.data[j];
          accumulate(n.a, gw.data.data(), gw.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor gx({nn});
          for (std::size_t i2 = 0; i2 < m; ++i2) {
            const double gi = g.data[i2];
            const double* row = wv.data.data() + i2 * nn;
            for (std::size_t j = 0; j < nn; ++j) gx.data[j] += row[j] * gi;
          }
          accumulate(n.b, gx.data.data(), gx.numel(), 1.0);
        }
        break;
      }
      case Op::Sum: {
        const Tensor& av = aval(n.a);
        Tensor t(av.shape);
        for (auto& v : t.data) v = g.data[0];
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Mean: {
        const Tensor& av = aval(n.a);
        const double s = g.data[0] / static_cast<double>(av.numel());
        Tensor t(av.shape);
        for (auto& v : t.data) v = s;
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Slice: {
        const Tensor& av = aval(n.a);
        Tensor t(av.shape);
        for (int j = 0; j < n.p1; ++j) t.data[static_cast<std::size_t>(n.p0 + j)] = g.data[static_cast<std::size_t>(j)];
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Concat2: {
        const std::size_t na = static_cast<std::size_t>(n.p0);
        accumulate(n.a, g.data.data(), na, 1.0);
        if (nodes_[n.b].kind != Op::Const) {
          const Tensor& bv = aval(n.b);
          accumulate(n.b, g.data.data() + na, bv.numel(), 1.0);
        }
        break;
      }
      case Op::ConcatN: {
        std::size_t off = 0;
        for (int id : n.many) {
          const std::size_t len = nodes_[id].out->numel();
          accumulate(id, g.data.data() + off, len, 1.0);
          off += len;
        }
        break;
      }
      case Op::Reshape:
        accumulate(n.a, g.data.data(), g.numel(), 1.0);
        break;
      case Op::BiasRows: {
        accumulate(n.a, g.data.data(), g.numel(), 1.0);
        if (nodes_[n.b].kind != Op::Const) {
          const std::size_t c = out.shape[0], f = out.shape[1];
          Tensor gb({c});
          for (std::size_t i2 = 0; i2 < c; ++i2) {
            double acc = 0;
            for (std::size_t j = 0; j < f; ++j) acc += g.data[i2 * f + j];
            gb.data[i2] = acc;
          }
          accumulate(n.b, gb.data.data(), gb.numel(), 1.0);
        }
        break;
      }
      case Op::CMul: {
        const Tensor& av = aval(n.a);
        const Tensor& bv = aval(n.b);
        const std::size_t m = av.shape[1];
        const double *gr = g.data.data(), *gi = gr + m;
        if (nodes_[n.a].kind != Op::Const) {
          Tensor t(av.shape);
          const double *br = bv.data.data(), *bi = br + m;
          for (std::size_t j = 0; j < m; ++j) {
            t.data[j] = gr[j] * br[j] + gi[j] * bi[j];
            t.data[m + j] = -gr[j] * bi[j] + gi[j] * br[j];
          }
          accumulate(n.a, t.data.data(), t.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor t(bv.shape);
          const double *ar = av.data.data(), *ai = ar + m;
          for (std::size_t j = 0; j < m; ++j) {
            t.data[j] = gr[j] * ar[j] + gi[j] * ai[j];
            t.data[m + j] = -gr[j] * ai[j] + gi[j] * ar[j];
          }
          accumulate(n.b, t.data.data(), t.numel(), 1.0);
        }
        break;
      }
      case Op::Conj: {
        const std::size_t m = out.shape[1];
        Tensor t(out.shape);
        for (std::size_t j = 0; j < m; ++j) {
          t.data[j] = g.data[j];
          t.data[m + j] = -g.data[m + j];
        }
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::CRMul: {
        const Tensor& cv = aval(n.a);
        const Tensor& rv = aval(n.b);
        const std::size_t m = cv.shape[1];
        const bool rs = rv.numel() == 1;
        const double *gr = g.data.data(), *gi = gr + m;
        if (nodes_[n.a].kind != Op::Const) {
          Tensor t(cv.shape);
          for (std::size_t j = 0; j < m; ++j) {
            const double f = rv.data[rs ? 0 : j];
            t.data[j] = gr[j] * f;
            t.data[m + j] = gi[j] * f;
          }
          accumulate(n.a, t.data.data(), t.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor t(rv.shape);
          for (std::size_t j = 0; j < m; ++j) {
            const double v = gr[j] * cv.data[j] + gi[j] * cv.data[m + j];
            if (rs) t.data[0] += v; else t.data[j] = v;
          }
          accumulate(n.b, t.data.data(), t.numel(), 1.0);
        }
        break;
      }
      case Op::CRDiv: {
        const Tensor& cv = aval(n.a);
        const Tensor& rv = aval(n.b);
        const std::size_t m = cv.shape[1];
        const bool rs = rv.numel() == 1;
        const double *gr = g.data.data(), *gi = gr + m;
        if (nodes_[n.a].kind != Op::Const) {
          Tensor t(cv.shape);
          for (std::size_t j = 0; j < m; ++j) {
            const double f = rv.data[rs ? 0 : j];
            t.data[j] = gr[j] / f;
            t.data[m + j] = gi[j] / f;
          }
          accumulate(n.a, t.data.data(), t.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor t(rv.shape);
          for (std::size_t j = 0; j < m; ++j) {
            const double f = rv.data[rs ? 0 : j];
            const double v = -(gr[j] * out.data[j] + gi[j] * out.data[m + j]) / f;
            if (rs) t.data[0] += v; else t.data[j] = v;
          }
          accumulate(n.b, t.data.data(), t.numel(), 1.0);
        }
        break;
      }
      case Op::CAbs2: {
        const Tensor& av = aval(n.a);
        const std::size_t m = av.shape[1];
        Tensor t(av.shape);
        for (std::size_t j = 0; j < m; ++j) {
          t.data[j] = 2.0 * g.data[j] * av.data[j];
          t.data[m + j] = 2.0 * g.data[j] * av.data[m + j];
        }
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::CAbs: {
        const Tensor& av = aval(n.a);
        const std::size_t m = av.shape[1];
        Tensor t(av.shape);
        for (std::size_t j = 0; j < m; ++j) {
          if (out.data[j] > 0.0) {
            t.data[j] = g.data[j] * av.data[j] / out.data[j];
            t.data[m + j] = g.data[j] * av.data[m + j] / out.data[j];
          }
        }
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Fft: {
        // adjoint of the unnormalized DFT is M * ifft
        Tensor t = g;
        const std::size_t m = t.shape[1];
        detail::fft_inplace(t.data.data(), t.data.data() + m, m, true);
        accumulate(n.a, t.data.data(), t.numel(), static_cast<double>(m));
        break;
      }
      case Op::Ifft: {
        Tensor t = g;
        const std::size_t m = t.shape[1];
        detail::fft_inplace(t.data.data(), t.data.data() + m, m, false);
        accumulate(n.a, t.data.data(), t.numel(), 1.0 / static_cast<double>(m));
        break;
      }
      case Op::ProjKeepFirst: {
        Tensor t = project_tensor(g, static_cast<std::size_t>(n.p0), true);
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::ProjKeepLast: {
        Tensor t = project_tensor(g, static_cast<std::size_t>(n.p0), false);
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Mirror: {
        const Tensor& av = aval(n.a);
        const std::size_t f = av.shape[1];
        const std::size_t m = 2 * (f - 1);
        Tensor t(av.shape);
        for (std::size_t j = 0; j < f; ++j) {
          t.data[j] = g.data[j];
          t.data[f + j] = g.data[m + j];
        }
        t.data[f] = 0.0;      // dropped DC imaginary part
        t.data[2 * f - 1] = 0.0;  // dropped Nyquist imaginary part
        for (std::size_t j = 1; j + 1 < f; ++j) {
          t.data[j] += g.data[m - j];
          t.data[f + j] -= g.data[m + m - j];
        }
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::OneSided: {
        const Tensor& av = aval(n.a);
        const std::size_t m = av.shape[1];
        const std::size_t f = m / 2 + 1;
        Tensor t(av.shape);
        for (std::size_t j = 0; j < f; ++j) {
          t.data[j] = g.data[j];
          t.data[m + j] = g.data[f + j];
        }
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::MirrorReal: {
        const Tensor& av = aval(n.a);
        const std::size_t f = av.numel();
        const std::size_t m = 2 * (f - 1);
        Tensor t(av.shape);
        for (std::size_t j = 0; j < m; ++j)
          t.data[std::min(j, m - j)] += g.data[j];
        accumulate(n.a, t.data.data(), t.numel(), 1.0);
        break;
      }
      case Op::Conv1d: {
        const Tensor& xv = aval(n.a);
        const Tensor& wv = aval(n.b);
        const std::size_t cin = xv.shape[0], f = xv.shape[1];
        const std::size_t cout = wv.shape[0], k = wv.shape[2];
        const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
        if (nodes_[n.a].kind != Op::Const) {
          Tensor gx(xv.shape);
          for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t j = 0; j < f; ++j) {
              const double gj = g.data[co * f + j];
              if (gj == 0.0) continue;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* wrow = wv.data.data() + (co * cin + ci) * k;
                for (std::size_t kk = 0; kk < k; ++kk) {
                  const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(j) +
                                             static_cast<std::ptrdiff_t>(kk) - half;
                  if (src >= 0 && src < static_cast<std::ptrdiff_t>(f))
                    gx.data[ci * f + static_cast<std::size_t>(src)] += wrow[kk] * gj;
                }
              }
            }
          }
          accumulate(n.a, gx.data.data(), gx.numel(), 1.0);
        }
        if (nodes_[n.b].kind != Op::Const) {
          Tensor gw(wv.shape);
          for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t ci = 0; ci < cin; ++ci) {
              double* grow = gw.data.data() + (co * cin + ci) * k;
              const double* xrow = xv.data.data() + ci * f;
              for (std::size_t kk = 0; kk < k; ++kk) {
                double acc = 0.0;
                for (std::size_t j = 0; j < f; ++j) {
                  const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(j) +
                                             static_cast<std::ptrdiff_t>(kk) - half;
                  if (src >= 0 && src < static_cast<std::ptrdiff_t>(f))
                    acc += g.data[co * f + j] * xrow[src];
                }
                grow[kk] = acc;
              }
            }
          }
          accumulate(n.b, gw.data.data(), gw.numel(), 1.0);
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference checker

GradCheckReport grad_check(
    const std::function<Var(const std::map<std::string, Var>&, Tape*)>& fn,
    const std::map<std::string, Tensor>& params, double tol,
    std::size_t max_probes, std::uint64_t probe_seed, double h) {
  Tape tape;
  std::map<std::string, Var> vars;
  for (const auto& [name, t] : params) vars[name] = tape.leaf(t);
  Var loss = fn(vars, &tape);
  tape.backward(loss);

  std::map<std::string, Tensor> grads;
  for (const auto& [name, v] : vars) grads[name] = tape.grad_of(v);

  // Enumerate all (param, index) coordinates, optionally subsample.
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : params)
    for (std::size_t i = 0; i < t.numel(); ++i) coords.emplace_back(name, i);
  if (max_probes > 0 && coords.size() > max_probes) {
    std::mt19937_64 rng(probe_seed);
    for (std::size_t i = 0; i < max_probes; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_probes);
  }

  auto eval_plain = [&](const std::map<std::string, Tensor>& p) {
    std::map<std::string, Var> vs;
    for (const auto& [name, t] : p) vs[name] = Var::detached(t);
    return fn(vs, nullptr).v().data[0];
  };

  GradCheckReport rep;
  std::map<std::string, Tensor> work = params;
  for (const auto& [name, idx] : coords) {
    const double orig = work[name].data[idx];
    work[name].data[idx] = orig + h;
    const double fp = eval_plain(work);
    work[name].data[idx] = orig - h;
    const double fm = eval_plain(work);
    work[name].data[idx] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double ad = grads[name].data[idx];
    // the floor turns the test absolute for near-zero gradients: central
    // differences cannot resolve them against loss-scale round-off
    const double rel =
        std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1e-6});
    if (rel > rep.worst_rel_err) {
      rep.worst_rel_err = rel;
      rep.worst_param = name + "[" + std::to_string(idx) + "]";
    }
    ++rep.probes;
  }
  rep.pass = rep.worst_rel_err < tol;
  return rep;
}

}  // namespace nk
