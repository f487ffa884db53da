// Reverse-mode autodiff over real tensors.
//
// A Var is a tensor value optionally bound to a node on a Tape. Ops on
// unbound Vars just compute values (eager, no recording); as soon as one
// operand is bound, the op is recorded and backward() can accumulate exact
// vector-Jacobian products. One implementation therefore serves both the
// plain inference path and the unrolled training path.
//
// Complex vectors travel as real tensors of shape [2, M]: row 0 holds the
// real parts, row 1 the imaginary parts.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nk/tensor.hpp"

namespace nk {

class Tape;

struct Var {
  std::shared_ptr<const Tensor> val;
  Tape* tape = nullptr;
  int id = -1;

  Var() = default;

  static Var detached(Tensor t) {
    Var v;
    v.val = std::make_shared<const Tensor>(std::move(t));
    return v;
  }

  const Tensor& v() const { return *val; }
  bool defined() const { return val != nullptr; }
  bool on_tape() const { return tape != nullptr; }
};

enum class Op : std::uint8_t {
  Leaf, Const,
  Add, Sub, Mul, Div, Neg, Scale, AddC,
  Exp, Log, Tanh, Sigmoid, Relu, Softplus, Sqrt, Abs,
  Matmul, Sum, Mean,
  Slice, Concat2, ConcatN, Reshape, BiasRows,
  CMul, Conj, CRMul, CRDiv, CAbs2, CAbs,
  Fft, Ifft, ProjKeepFirst, ProjKeepLast,
  Mirror, OneSided, MirrorReal,
  Conv1d,
};

class Tape {
 public:
  Var leaf(Tensor t);
  Var constant(Tensor t);
  Var constant(const Var& detached_var);

  // Reverse sweep from a scalar loss. Gradients are retrievable afterwards
  // with grad_of(); untouched leaves report zeros.
  void backward(const Var& loss);

  Tensor grad_of(const Var& v) const;
  bool touched(const Var& v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op kind;
    int a = -1, b = -1;
    double c = 0.0;
    int p0 = 0, p1 = 0;
    std::shared_ptr<const Tensor> out;
    std::vector<int> many;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> touched_;

  int push(Node n);
  int bind(const Var& v);
  Tensor& grad_slot(int id);
  void accumulate(int id, const double* g, std::size_t n, double scale);

  friend Var detail_record(Tape* tp, Op k, Tensor out, const Var& a,
                           const Var& b, double c, int p0, int p1);
  friend Var detail_record_many(Tape* tp, Op k, Tensor out,
                                const std::vector<Var>& ins);
};

// Returns a copy of v's value with no tape binding; no gradient flows
// through it (diagnostics only).
Var detach(const Var& v);

// ---- Elementwise / scalar ops. Add/Sub/Mul/Div broadcast a 1-element
// operand against any shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_const(const Var& a, double c);
Var vexp(const Var& a);
Var vlog(const Var& a);
Var vtanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
Var vsqrt(const Var& a);
Var vabs(const Var& a);

// ---- Reductions / linear algebra / layout.
Var matmul(const Var& w, const Var& x);  // [m,n] x [n] -> [m]
Var sum(const Var& a);                   // -> [1]
Var mean(const Var& a);                  // -> [1]
Var slice(const Var& a, std::size_t offset, std::size_t len);  // flat -> [len]
Var concat(const Var& a, const Var& b);                        // flat
Var concat_many(const std::vector<Var>& xs);                   // flat
Var reshape(const Var& a, std::vector<std::size_t> shape);
Var bias_rows(const Var& a, const Var& b);  // [C,F] + [C] broadcast over F

// ---- Complex ops on [2,M] tensors.
Var cmul(const Var& a, const Var& b);
Var conj(const Var& a);
Var crmul(const Var& c, const Var& r);  // complex [2,M] * real [M] (or [1])
Var crdiv(const Var& c, const Var& r);  // complex [2,M] / real [M] (or [1])
Var cabs2(const Var& a);                // -> [M]
Var cabs(const Var& a);                 // -> [M], subgradient 0 at 0
Var fft_c(const Var& a);                // unnormalized forward DFT
Var ifft_c(const Var& a);               // true inverse (1/M scaling)
Var proj_keep_first(const Var& a, std::size_t keep);  // zero last M-keep taps
Var proj_keep_last(const Var& a, std::size_t zero);   // zero first `zero` taps
Var mirror_spectrum(const Var& a);       // one-sided [2,F] -> full [2,M]
Var onesided_spectrum(const Var& a);     // full [2,M] -> [2,F]
Var mirror_real(const Var& a);           // [F] -> [M] symmetric copy
Var conv1d(const Var& x, const Var& w);  // [Cin,F] conv [Cout,Cin,K] -> [Cout,F]

// ---- Finite-difference gradient checker.
struct GradCheckReport {
  double worst_rel_err = 0.0;
  std::string worst_param;
  std::size_t probes = 0;
  bool pass = false;
};

// fn evaluates the scalar objective from named parameter tensors; when tape
// is non-null the parameters must be registered as leaves on it. grad_check
// runs one reverse sweep, then probes up to max_probes entries (all, if 0)
// with central differences at step h and reports the worst relative error.
GradCheckReport grad_check(
    const std::function<Var(const std::map<std::string, Var>&, Tape*)>& fn,
    const std::map<std::string, Tensor>& params, double tol,
    std::size_t max_probes = 0, std::uint64_t probe_seed = 0,
    double h = 1e-6);

}  // namespace nk
