#include "l4seg/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace l4s {

const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void check_shape(bool ok, const std::string& msg) {
  if (!ok) fail(Err::shape_mismatch, msg);
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    fail(Err::dtype_mismatch, std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) +
                                  " vs " + dtype_name(b.dtype()));
}

}  // namespace

#define L4S_DISPATCH(DT, ...)                          \
  do {                                                 \
    if ((DT) == Dtype::F32) {                          \
      using scalar_t = float;                          \
      __VA_ARGS__;                                     \
    } else {                                           \
      using scalar_t = double;                         \
      __VA_ARGS__;                                     \
    }                                                  \
  } while (0)

// ---------------------------------------------------------------------------
// Tensor basics

Tensor make_tensor(Shape shape, Dtype dt) {
  Tensor t;
  t.st_ = std::make_shared<detail::Storage>();
  t.st_->dtype = dt;
  t.st_->resize(static_cast<size_t>(shape_numel(shape)));
  t.shape_ = std::move(shape);
  return t;
}

Tensor wrap_storage(std::shared_ptr<detail::Storage> st, Shape shape) {
  Tensor t;
  t.st_ = std::move(st);
  t.shape_ = std::move(shape);
  return t;
}

std::shared_ptr<detail::Storage> storage_of(const Tensor& t) { return t.st_; }

Tensor sum_to_shape(const Tensor& g, const Shape& target);

Tensor Tensor::zeros(Shape shape, Dtype dt) { return make_tensor(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t = make_tensor(std::move(shape), dt);
  L4S_DISPATCH(dt, {
    auto* p = t.data_mut<scalar_t>();
    std::fill(p, p + t.numel(), static_cast<scalar_t>(value));
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> vals, Dtype dt) {
  return from_vec(std::move(shape), std::vector<double>(vals), dt);
}

Tensor Tensor::from_vec(Shape shape, const std::vector<double>& vals, Dtype dt) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(vals.size()))
    fail(Err::shape_mismatch, "from_vec: " + std::to_string(vals.size()) + " values for shape " +
                                  shape_str(shape));
  Tensor t = make_tensor(std::move(shape), dt);
  for (int64_t i = 0; i < n; ++i) t.set(i, vals[static_cast<size_t>(i)]);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, Dtype dt) {
  Tensor t = make_tensor(std::move(shape), dt);
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.set(i, stddev * rng.normal());
  return t;
}

Tensor Tensor::trunc_normal(Shape shape, Rng& rng, double stddev, Dtype dt) {
  Tensor t = make_tensor(std::move(shape), dt);
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) t.set(i, rng.trunc_normal(stddev));
  return t;
}

double Tensor::at(int64_t flat) const {
  if (!st_ || flat < 0 || flat >= numel()) fail(Err::out_of_range, "Tensor::at: bad index");
  return st_->dtype == Dtype::F32 ? static_cast<double>(st_->f[static_cast<size_t>(flat)])
                                  : st_->d[static_cast<size_t>(flat)];
}

void Tensor::set(int64_t flat, double v) {
  if (!st_ || flat < 0 || flat >= numel()) fail(Err::out_of_range, "Tensor::set: bad index");
  if (st_->dtype == Dtype::F32)
    st_->f[static_cast<size_t>(flat)] = static_cast<float>(v);
  else
    st_->d[static_cast<size_t>(flat)] = v;
}

double Tensor::item() const {
  if (numel() != 1) fail(Err::not_scalar, "item: tensor has " + std::to_string(numel()) + " elements");
  return at(0);
}

std::vector<double> Tensor::to_vec() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = at(i);
  return out;
}

Tensor& Tensor::set_requires_grad(bool rg) {
  requires_grad_ = rg;
  if (rg && !grad_) grad_ = std::make_shared<detail::GradHolder>();
  return *this;
}

Tensor Tensor::grad() const {
  if (!has_grad()) return Tensor();
  return wrap_storage(grad_->buf, shape_);
}

void Tensor::zero_grad() {
  if (grad_) grad_->buf = nullptr;
}

void Tensor::accumulate_grad(const Tensor& g) {
  if (!grad_) grad_ = std::make_shared<detail::GradHolder>();
  check_shape(g.shape() == shape_, "accumulate_grad: shape mismatch");
  if (g.dtype() != dtype()) fail(Err::dtype_mismatch, "accumulate_grad: dtype mismatch");
  if (!grad_->buf) {
    Tensor copy = g.clone();
    grad_->buf = copy.st_;
    return;
  }
  L4S_DISPATCH(dtype(), {
    auto* dst = grad_->buf->ptr<scalar_t>();
    const auto* src = g.data<scalar_t>();
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  });
}

Tensor Tensor::detach() const {
  Tensor t;
  t.st_ = st_;
  t.shape_ = shape_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(shape_, dtype());
  if (dtype() == Dtype::F32)
    t.st_->f = st_->f;
  else
    t.st_->d = st_->d;
  return t;
}

Tensor Tensor::to(Dtype dt) const {
  if (dt == dtype()) return clone();
  Tensor t = make_tensor(shape_, dt);
  for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
  return t;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (dtype() != other.dtype() || shape_ != other.shape_) return false;
  if (dtype() == Dtype::F32)
    return std::memcmp(st_->f.data(), other.st_->f.data(), st_->f.size() * 4) == 0;
  return std::memcmp(st_->d.data(), other.st_->d.data(), st_->d.size() * 8) == 0;
}

// ---------------------------------------------------------------------------
// Grad mode + tape

namespace {
thread_local bool g_grad_enabled = true;
thread_local Tape* g_active_tape = nullptr;
thread_local uint64_t g_tape_counter = 0;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tape::Tape() : id_(++g_tape_counter) {
  if (g_active_tape) fail(Err::runtime, "Tape: another tape is already active on this thread");
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

bool Tape::relevant(const Tensor& t) const {
  if (!t.defined()) return false;
  if (t.requires_grad()) return true;
  return t.tape_id() == id_ && t.node() >= 0;
}

bool Tape::recording(std::initializer_list<const Tensor*> inputs) {
  Tape* t = g_active_tape;
  if (!t || !g_grad_enabled) return false;
  for (const Tensor* in : inputs)
    if (t->relevant(*in)) return true;
  return false;
}

void Tape::record(Tensor& out, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  Tape* t = g_active_tape;
  Node node;
  node.fn = std::move(fn);
  node.out_shape = out.shape();
  node.out_dtype = out.dtype();
  for (const Tensor* in : inputs) {
    InputRef ref;
    if (in->defined() && in->tape_id() == t->id_ && in->node() >= 0) {
      ref.node = in->node();
    } else if (in->defined() && in->requires_grad()) {
      ref.leaf = in->grad_;
      ref.leaf_tensor = *in;
    }
    node.inputs.push_back(std::move(ref));
  }
  t->nodes_.push_back(std::move(node));
  out.tape_id_ = t->id_;
  out.node_ = static_cast<int64_t>(t->nodes_.size()) - 1;
  out.requires_grad_ = true;  // non-leaf: grad flows through, stored tape-side
  out.grad_ = nullptr;
}

Tensor Tape::Ctx::grad_out() const { return tape_->node_grads_[static_cast<size_t>(node_)]; }

bool Tape::Ctx::needs(size_t input) const {
  const InputRef& ref = tape_->nodes_[static_cast<size_t>(node_)].inputs.at(input);
  return ref.node >= 0 || ref.leaf != nullptr;
}

void Tape::Ctx::accum(size_t input, const Tensor& g) {
  InputRef& ref = tape_->nodes_[static_cast<size_t>(node_)].inputs.at(input);
  if (ref.node >= 0) {
    Tensor& slot = tape_->node_grads_[static_cast<size_t>(ref.node)];
    if (!slot.defined()) {
      slot = g.clone();
    } else {
      check_shape(slot.shape() == g.shape(), "backward: grad shape mismatch");
      L4S_DISPATCH(slot.dtype(), {
        auto* dst = slot.data_mut<scalar_t>();
        const auto* src = g.data<scalar_t>();
        int64_t n = slot.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
      });
    }
  } else if (ref.leaf) {
    Tensor leaf = ref.leaf_tensor;
    leaf.accumulate_grad(g);
  }
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) fail(Err::tape_consumed, "backward: tape already consumed");
  if (loss.numel() != 1) fail(Err::not_scalar, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  consumed_ = true;
  if (loss.tape_id() != id_ || loss.node() < 0) return;  // loss not on this tape: no grads flow
  NoGradGuard ng;
  node_grads_.assign(nodes_.size(), Tensor());
  node_grads_[static_cast<size_t>(loss.node())] = Tensor::full(loss.shape(), 1.0, loss.dtype());
  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    if (!node_grads_[static_cast<size_t>(i)].defined()) continue;
    Ctx ctx(this, i);
    nodes_[static_cast<size_t>(i)].fn(ctx);
    node_grads_[static_cast<size_t>(i)] = Tensor();  // release as we go
  }
  node_grads_.clear();
}

// ---------------------------------------------------------------------------
// Debug finite check

namespace {

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* op) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.at(i)))
      fail(Err::non_finite, std::string(op) + ": non-finite value at flat index " + std::to_string(i));
}
#define L4S_CHECK_FINITE(t, op) debug_check_finite((t), (op))
#else
#define L4S_CHECK_FINITE(t, op) ((void)0)
#endif

}  // namespace

// ---------------------------------------------------------------------------
// GEMM kernels. Row-major. Deterministic: each output element is reduced in a
// fixed sequential order; threads split output rows disjointly.

namespace {

constexpr int64_t kGemmParGrain = 8;          // rows per chunk
constexpr int64_t kGemmParThreshold = 1 << 15;  // flops below this run inline

template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
  auto rows = [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      T* crow = c + i * N;
      if (!acc) std::fill(crow, crow + N, T(0));
      const T* arow = a + i * K;
      for (int64_t k = 0; k < K; ++k) {
        T av = arow[k];
        const T* brow = b + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  };
  if (M * K * N < kGemmParThreshold)
    rows(0, M);
  else
    parallel_for(M, kGemmParGrain, rows);
}

// c[M,N] (+)= a[M,K] . b[N,K]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
  auto rows = [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* arow = a + i * K;
      T* crow = c + i * N;
      for (int64_t j = 0; j < N; ++j) {
        const T* brow = b + j * K;
        T sum = 0;
        for (int64_t k = 0; k < K; ++k) sum += arow[k] * brow[k];
        crow[j] = acc ? crow[j] + sum : sum;
      }
    }
  };
  if (M * K * N < kGemmParThreshold)
    rows(0, M);
  else
    parallel_for(M, kGemmParGrain, rows);
}

// c[M,N] (+)= a[K,M]^T . b[K,N]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc) {
  auto rows = [&](int64_t i0, int64_t i1) {
    if (!acc)
      for (int64_t i = i0; i < i1; ++i) std::fill(c + i * N, c + i * N + N, T(0));
    for (int64_t k = 0; k < K; ++k) {
      const T* arow = a + k * M;
      const T* brow = b + k * N;
      for (int64_t i = i0; i < i1; ++i) {
        T av = arow[i];
        T* crow = c + i * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  };
  if (M * K * N < kGemmParThreshold)
    rows(0, M);
  else
    parallel_for(M, kGemmParGrain, rows);
}

template <class T>
void gemm(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool ta, bool tb,
          bool acc) {
  if (!ta && !tb)
    gemm_nn(a, b, c, M, K, N, acc);
  else if (!ta && tb)
    gemm_nt(a, b, c, M, K, N, acc);
  else if (ta && !tb)
    gemm_tn(a, b, c, M, K, N, acc);
  else
    fail(Err::usage, "gemm: double-transpose form not supported");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

template <class F>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F&& kernel,
                 Tape::BackwardFn (*make_bw)(const Tensor&, const Tensor&, const Tensor&)) {
  check_same_dtype(a, b, name);
  check_shape(a.shape() == b.shape(),
              std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = make_tensor(a.shape(), a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    const auto* pb = b.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = kernel(pa[i], pb[i]);
  });
  if (Tape::recording({&a, &b})) Tape::record(out, {&a, &b}, make_bw(a, b, out));
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](auto x, auto y) { return x + y; },
                   +[](const Tensor&, const Tensor&, const Tensor&) -> Tape::BackwardFn {
                     return [](Tape::Ctx& ctx) {
                       Tensor g = ctx.grad_out();
                       if (ctx.needs(0)) ctx.accum(0, g);
                       if (ctx.needs(1)) ctx.accum(1, g);
                     };
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](auto x, auto y) { return x - y; },
                   +[](const Tensor&, const Tensor&, const Tensor&) -> Tape::BackwardFn {
                     return [](Tape::Ctx& ctx) {
                       Tensor g = ctx.grad_out();
                       if (ctx.needs(0)) ctx.accum(0, g);
                       if (ctx.needs(1)) ctx.accum(1, mul_scalar(g, -1.0));
                     };
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](auto x, auto y) { return x * y; },
                   +[](const Tensor& a, const Tensor& b, const Tensor&) -> Tape::BackwardFn {
                     return [a, b](Tape::Ctx& ctx) {
                       Tensor g = ctx.grad_out();
                       if (ctx.needs(0)) ctx.accum(0, mul(g, b));
                       if (ctx.needs(1)) ctx.accum(1, mul(g, a));
                     };
                   });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "div", [](auto x, auto y) { return x / y; },
                   +[](const Tensor& a, const Tensor& b, const Tensor&) -> Tape::BackwardFn {
                     return [a, b](Tape::Ctx& ctx) {
                       Tensor g = ctx.grad_out();
                       if (ctx.needs(0)) ctx.accum(0, divide(g, b));
                       if (ctx.needs(1)) {
                         Tensor gb = mul_scalar(divide(mul(g, a), mul(b, b)), -1.0);
                         ctx.accum(1, gb);
                       }
                     };
                   });
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = make_tensor(a.shape(), a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    auto cc = static_cast<scalar_t>(c);
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + cc;
  });
  if (Tape::recording({&a}))
    Tape::record(out, {&a}, [](Tape::Ctx& ctx) {
      if (ctx.needs(0)) ctx.accum(0, ctx.grad_out());
    });
  return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out = make_tensor(a.shape(), a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    auto cc = static_cast<scalar_t>(c);
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * cc;
  });
  if (Tape::recording({&a}))
    Tape::record(out, {&a}, [c](Tape::Ctx& ctx) {
      if (ctx.needs(0)) ctx.accum(0, mul_scalar(ctx.grad_out(), c));
    });
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor out = make_tensor({1}, a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    scalar_t s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
    out.data_mut<scalar_t>()[0] = s;
  });
  if (Tape::recording({&a})) {
    Shape in_shape = a.shape();
    Tape::record(out, {&a}, [in_shape](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      ctx.accum(0, Tensor::full(in_shape, ctx.grad_out().item(), ctx.grad_out().dtype()));
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// matmul

namespace {

struct MatmulDims {
  int64_t batch;     // number of matrices in the batched operand(s)
  int64_t M, K, N;
  bool a_batched, b_batched;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.ndim() < 2 || b.ndim() < 2) fail(Err::shape_mismatch, "matmul: operands must have >= 2 dims");
  auto rows_cols = [](const Tensor& t, bool tr) {
    int64_t r = t.dim(static_cast<size_t>(t.ndim() - 2));
    int64_t c = t.dim(static_cast<size_t>(t.ndim() - 1));
    return tr ? std::pair{c, r} : std::pair{r, c};
  };
  auto [M, Ka] = rows_cols(a, ta);
  auto [Kb, N] = rows_cols(b, tb);
  if (Ka != Kb)
    fail(Err::shape_mismatch,
         "matmul: inner dimensions differ: " + shape_str(a.shape()) + (ta ? "^T" : "") + " x " +
             shape_str(b.shape()) + (tb ? "^T" : ""));
  int64_t abatch = 1, bbatch = 1;
  for (int i = 0; i + 2 < a.ndim(); ++i) abatch *= a.dim(static_cast<size_t>(i));
  for (int i = 0; i + 2 < b.ndim(); ++i) bbatch *= b.dim(static_cast<size_t>(i));
  bool ab = a.ndim() > 2, bb = b.ndim() > 2;
  if (ab && bb) {
    Shape la(a.shape().begin(), a.shape().end() - 2), lb(b.shape().begin(), b.shape().end() - 2);
    if (la != lb) fail(Err::shape_mismatch, "matmul: leading dims differ");
  }
  int64_t batch = ab ? abatch : (bb ? bbatch : 1);
  return {batch, M, Ka, N, ab, bb};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_same_dtype(a, b, "matmul");
  MatmulDims d = matmul_dims(a, b, trans_a, trans_b);
  Shape out_shape;
  if (d.a_batched)
    out_shape.assign(a.shape().begin(), a.shape().end() - 2);
  else if (d.b_batched)
    out_shape.assign(b.shape().begin(), b.shape().end() - 2);
  out_shape.push_back(d.M);
  out_shape.push_back(d.N);
  Tensor out = make_tensor(out_shape, a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    const auto* pb = b.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    int64_t astride = d.a_batched ? d.M * d.K : 0;
    int64_t bstride = d.b_batched ? d.K * d.N : 0;
    for (int64_t i = 0; i < d.batch; ++i)
      gemm(pa + i * astride, pb + i * bstride, po + i * d.M * d.N, d.M, d.K, d.N, trans_a,
           trans_b, false);
  });
  L4S_CHECK_FINITE(out, "matmul");
  if (Tape::recording({&a, &b})) {
    Tape::record(out, {&a, &b}, [a, b, trans_a, trans_b](Tape::Ctx& ctx) {
      Tensor g = ctx.grad_out();
      // dA and dB for C = opA(A) . opB(B); cases by transpose flags
      if (ctx.needs(0)) {
        Tensor ga;
        if (!trans_a)
          ga = trans_b ? matmul(g, b) : matmul(g, b, false, true);
        else
          ga = trans_b ? matmul(b, g, true, true) : matmul(b, g, false, true);
        // batched C with unbatched A cannot happen for grads we need (A carries batch)
        ctx.accum(0, sum_to_shape(ga, a.shape()));
      }
      if (ctx.needs(1)) {
        Tensor gb;
        if (!trans_b)
          gb = trans_a ? matmul(a, g) : matmul(a, g, true, false);
        else
          gb = trans_a ? matmul(g, a, true, true) : matmul(g, a, true, false);
        ctx.accum(1, sum_to_shape(gb, b.shape()));
      }
    });
  }
  return out;
}

// Reduces leading batch dims of g down to `target` (for a plain-matrix operand
// shared across a batch). No-op when shapes already agree.
Tensor sum_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  int64_t tn = shape_numel(target);
  int64_t batch = g.numel() / tn;
  check_shape(batch * tn == g.numel(), "sum_to_shape: incompatible shapes");
  Tensor out = make_tensor(target, g.dtype());
  L4S_DISPATCH(g.dtype(), {
    const auto* pg = g.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t i = 0; i < tn; ++i) po[i] += pg[b * tn + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// reshape / permute / concat

Tensor reshape(const Tensor& a, Shape shape) {
  // one extent may be -1 (inferred)
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) fail(Err::shape_mismatch, "reshape: multiple -1 extents");
      infer = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[static_cast<size_t>(infer)] = a.numel() / known;
  check_shape(shape_numel(shape) == a.numel(),
              "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  // storage shared; everything is contiguous row-major
  Tensor out = wrap_storage(storage_of(a), shape);
  if (Tape::recording({&a})) {
    Shape in_shape = a.shape();
    Tape::record(out, {&a}, [in_shape](Tape::Ctx& ctx) {
      if (ctx.needs(0)) ctx.accum(0, reshape(ctx.grad_out(), in_shape));
    });
  }
  return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  int nd = a.ndim();
  check_shape(static_cast<int>(perm.size()) == nd, "permute: order length mismatch");
  Shape out_shape(static_cast<size_t>(nd));
  std::vector<int64_t> in_strides(static_cast<size_t>(nd)), out_strides(static_cast<size_t>(nd));
  int64_t s = 1;
  for (int i = nd - 1; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = s;
    s *= a.dim(static_cast<size_t>(i));
  }
  for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = a.dim(static_cast<size_t>(perm[static_cast<size_t>(i)]));
  s = 1;
  for (int i = nd - 1; i >= 0; --i) {
    out_strides[static_cast<size_t>(i)] = s;
    s *= out_shape[static_cast<size_t>(i)];
  }
  Tensor out = make_tensor(out_shape, a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    int64_t n = a.numel();
    std::vector<int64_t> gather(static_cast<size_t>(nd));  // stride of input per output axis
    for (int i = 0; i < nd; ++i) gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    for (int64_t o = 0; o < n; ++o) {
      int64_t rem = o, src = 0;
      for (int i = 0; i < nd; ++i) {
        int64_t idx = rem / out_strides[static_cast<size_t>(i)];
        rem -= idx * out_strides[static_cast<size_t>(i)];
        src += idx * gather[static_cast<size_t>(i)];
      }
      po[o] = pa[src];
    }
  });
  if (Tape::recording({&a})) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    Tape::record(out, {&a}, [inv](Tape::Ctx& ctx) {
      if (ctx.needs(0)) ctx.accum(0, permute(ctx.grad_out(), inv));
    });
  }
  return out;
}

Tensor concat_ch(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "concat");
  check_shape(a.ndim() == 4 && b.ndim() == 4, "concat: expects B x C x H x W");
  check_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
              "concat: non-channel extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor out = make_tensor({B, Ca + Cb, a.dim(2), a.dim(3)}, a.dtype());
  L4S_DISPATCH(a.dtype(), {
    const auto* pa = a.data<scalar_t>();
    const auto* pb = b.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t i = 0; i < B; ++i) {
      std::memcpy(po + i * (Ca + Cb) * HW, pa + i * Ca * HW, sizeof(scalar_t) * static_cast<size_t>(Ca * HW));
      std::memcpy(po + i * (Ca + Cb) * HW + Ca * HW, pb + i * Cb * HW,
                  sizeof(scalar_t) * static_cast<size_t>(Cb * HW));
    }
  });
  if (Tape::recording({&a, &b})) {
    Shape sa = a.shape(), sb = b.shape();
    Tape::record(out, {&a, &b}, [sa, sb, B, Ca, Cb, HW](Tape::Ctx& ctx) {
      Tensor g = ctx.grad_out();
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        if (ctx.needs(0)) {
          Tensor ga = make_tensor(sa, g.dtype());
          auto* p = ga.data_mut<scalar_t>();
          for (int64_t i = 0; i < B; ++i)
            std::memcpy(p + i * Ca * HW, pg + i * (Ca + Cb) * HW, sizeof(scalar_t) * static_cast<size_t>(Ca * HW));
          ctx.accum(0, ga);
        }
        if (ctx.needs(1)) {
          Tensor gb = make_tensor(sb, g.dtype());
          auto* p = gb.data_mut<scalar_t>();
          for (int64_t i = 0; i < B; ++i)
            std::memcpy(p + i * Cb * HW, pg + i * (Ca + Cb) * HW + Ca * HW,
                        sizeof(scalar_t) * static_cast<size_t>(Cb * HW));
          ctx.accum(1, gb);
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride, int64_t pad,
            int64_t Ho, int64_t Wo, T* col) {
  // col: [C*k*k, Ho*Wo]
  for (int64_t c = 0; c < C; ++c) {
    const T* xc = x + c * H * W;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        T* crow = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(crow + oh * Wo, crow + (oh + 1) * Wo, T(0));
            continue;
          }
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            crow[oh * Wo + ow] = (iw >= 0 && iw < W) ? xc[ih * W + iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t k, int64_t stride,
                int64_t pad, int64_t Ho, int64_t Wo, T* x) {
  for (int64_t c = 0; c < C; ++c) {
    T* xc = x + c * H * W;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* crow = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) xc[ih * W + iw] += crow[oh * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  check_shape(x.ndim() == 4, "conv2d: input must be B x C x H x W, got " + shape_str(x.shape()));
  check_shape(w.ndim() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be Cout x Cin x k x k");
  check_same_dtype(x, w, "conv2d");
  if (stride < 1) fail(Err::usage, "conv2d: stride must be >= 1");
  int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    fail(Err::shape_mismatch, "conv2d: channel mismatch, input has " + std::to_string(Cin) +
                                  ", weight expects " + std::to_string(w.dim(1)));
  if (pad > 0 && k % 2 == 0) fail(Err::usage, "conv2d: even kernel requires pad = 0");
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0)
    fail(Err::shape_mismatch, "conv2d: non-positive output extent for input " + shape_str(x.shape()) +
                                  " and kernel " + std::to_string(k));
  if (bias.defined()) {
    check_shape(bias.ndim() == 1 && bias.dim(0) == Cout, "conv2d: bias extent mismatch");
    check_same_dtype(x, bias, "conv2d");
  }
  Tensor out = make_tensor({B, Cout, Ho, Wo}, x.dtype());
  int64_t CKK = Cin * k * k, HoWo = Ho * Wo;
  L4S_DISPATCH(x.dtype(), {
    std::vector<scalar_t> col(static_cast<size_t>(CKK * HoWo));
    const auto* px = x.data<scalar_t>();
    const auto* pw = w.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t b = 0; b < B; ++b) {
      im2col(px + b * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
      gemm_nn(pw, col.data(), po + b * Cout * HoWo, Cout, CKK, HoWo, false);
      if (bias.defined()) {
        const auto* pb = bias.data<scalar_t>();
        for (int64_t c = 0; c < Cout; ++c) {
          scalar_t bv = pb[c];
          scalar_t* row = po + (b * Cout + c) * HoWo;
          for (int64_t i = 0; i < HoWo; ++i) row[i] += bv;
        }
      }
    }
  });
  L4S_CHECK_FINITE(out, "conv2d");
  bool rec = bias.defined() ? Tape::recording({&x, &w, &bias}) : Tape::recording({&x, &w});
  if (rec) {
    bool has_bias = bias.defined();
    auto fn = [x, w, has_bias, B, Cin, H, W, Cout, k, stride, pad, Ho, Wo, CKK, HoWo](Tape::Ctx& ctx) {
      Tensor g = ctx.grad_out();
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        const auto* px = x.data<scalar_t>();
        const auto* pw = w.data<scalar_t>();
        std::vector<scalar_t> col(static_cast<size_t>(CKK * HoWo));
        if (ctx.needs(0)) {
          Tensor gx = make_tensor(x.shape(), g.dtype());
          auto* pgx = gx.data_mut<scalar_t>();
          for (int64_t b = 0; b < B; ++b) {
            gemm_tn(pw, pg + b * Cout * HoWo, col.data(), CKK, Cout, HoWo, false);
            col2im_add(col.data(), Cin, H, W, k, stride, pad, Ho, Wo, pgx + b * Cin * H * W);
          }
          ctx.accum(0, gx);
        }
        if (ctx.needs(1)) {
          Tensor gw = make_tensor(w.shape(), g.dtype());
          auto* pgw = gw.data_mut<scalar_t>();
          for (int64_t b = 0; b < B; ++b) {
            im2col(px + b * Cin * H * W, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
            gemm_nt(pg + b * Cout * HoWo, col.data(), pgw, Cout, HoWo, CKK, b > 0);
          }
          ctx.accum(1, gw);
        }
        if (has_bias && ctx.needs(2)) {
          Tensor gb = make_tensor({Cout}, g.dtype());
          auto* pgb = gb.data_mut<scalar_t>();
          for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < Cout; ++c) {
              const scalar_t* row = pg + (b * Cout + c) * HoWo;
              scalar_t s = 0;
              for (int64_t i = 0; i < HoWo; ++i) s += row[i];
              pgb[c] += s;
            }
          ctx.accum(2, gb);
        }
      });
    };
    if (bias.defined())
      Tape::record(out, {&x, &w, &bias}, fn);
    else
      Tape::record(out, {&x, &w}, fn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d (window == stride)

Tensor maxpool2d(const Tensor& x, int window) {
  check_shape(x.ndim() == 4, "maxpool2d: input must be B x C x H x W");
  if (window < 1) fail(Err::usage, "maxpool2d: window must be >= 1");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % window != 0 || W % window != 0)
    fail(Err::shape_mismatch, "maxpool2d: extents " + std::to_string(H) + "x" + std::to_string(W) +
                                  " not divisible by stride " + std::to_string(window));
  int64_t Ho = H / window, Wo = W / window;
  Tensor out = make_tensor({B, C, Ho, Wo}, x.dtype());
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    int64_t oi = 0;
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const scalar_t* plane = px + bc * H * W;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow, ++oi) {
          int64_t best = -1;
          scalar_t bv = -std::numeric_limits<scalar_t>::infinity();
          for (int64_t i = 0; i < window; ++i)
            for (int64_t j = 0; j < window; ++j) {
              int64_t idx = (oh * window + i) * W + ow * window + j;
              if (plane[idx] > bv) {  // strict: ties keep the lowest flat index
                bv = plane[idx];
                best = idx;
              }
            }
          po[oi] = bv;
          (*argmax)[static_cast<size_t>(oi)] = bc * H * W + best;
        }
    }
  });
  if (Tape::recording({&x})) {
    Shape in_shape = x.shape();
    Tape::record(out, {&x}, [argmax, in_shape](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gx = make_tensor(in_shape, g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t i = 0; i < g.numel(); ++i) p[(*argmax)[static_cast<size_t>(i)]] += pg[i];
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear 2x upsample, align-corners = false

namespace {

struct Lerp {
  int64_t lo, hi;
  double w;  // weight of hi
};

// source coordinate of output index i at scale 2: (i + 0.5)/2 - 0.5
Lerp lerp_at(int64_t i, int64_t n) {
  double u = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
  double fl = std::floor(u);
  auto clamp = [n](int64_t v) { return std::min(std::max(v, int64_t(0)), n - 1); };
  return {clamp(static_cast<int64_t>(fl)), clamp(static_cast<int64_t>(fl) + 1), u - fl};
}

}  // namespace

Tensor upsample2x_bilinear(const Tensor& x) {
  check_shape(x.ndim() == 4, "upsample2x: input must be B x C x H x W");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = H * 2, Wo = W * 2;
  Tensor out = make_tensor({B, C, Ho, Wo}, x.dtype());
  std::vector<Lerp> li(static_cast<size_t>(Ho)), lj(static_cast<size_t>(Wo));
  for (int64_t i = 0; i < Ho; ++i) li[static_cast<size_t>(i)] = lerp_at(i, H);
  for (int64_t j = 0; j < Wo; ++j) lj[static_cast<size_t>(j)] = lerp_at(j, W);
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const scalar_t* in = px + bc * H * W;
      scalar_t* o = po + bc * Ho * Wo;
      for (int64_t i = 0; i < Ho; ++i) {
        const Lerp& a = li[static_cast<size_t>(i)];
        for (int64_t j = 0; j < Wo; ++j) {
          const Lerp& b = lj[static_cast<size_t>(j)];
          double v00 = in[a.lo * W + b.lo], v01 = in[a.lo * W + b.hi];
          double v10 = in[a.hi * W + b.lo], v11 = in[a.hi * W + b.hi];
          double top = v00 + (v01 - v00) * b.w;
          double bot = v10 + (v11 - v10) * b.w;
          o[i * Wo + j] = static_cast<scalar_t>(top + (bot - top) * a.w);
        }
      }
    }
  });
  if (Tape::recording({&x})) {
    Shape in_shape = x.shape();
    Tape::record(out, {&x}, [in_shape, li, lj, B, C, H, W, Ho, Wo](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gx = make_tensor(in_shape, g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t bc = 0; bc < B * C; ++bc) {
          const scalar_t* go = pg + bc * Ho * Wo;
          scalar_t* gi = p + bc * H * W;
          for (int64_t i = 0; i < Ho; ++i) {
            const Lerp& a = li[static_cast<size_t>(i)];
            for (int64_t j = 0; j < Wo; ++j) {
              const Lerp& b = lj[static_cast<size_t>(j)];
              double gv = go[i * Wo + j];
              gi[a.lo * W + b.lo] += static_cast<scalar_t>(gv * (1 - a.w) * (1 - b.w));
              gi[a.lo * W + b.hi] += static_cast<scalar_t>(gv * (1 - a.w) * b.w);
              gi[a.hi * W + b.lo] += static_cast<scalar_t>(gv * a.w * (1 - b.w));
              gi[a.hi * W + b.hi] += static_cast<scalar_t>(gv * a.w * b.w);
            }
          }
        }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

namespace {

// iterate slices of `axis`: outer x len x inner
struct AxisIter {
  int64_t outer = 1, len = 1, inner = 1;
};

AxisIter axis_iter(const Shape& s, int axis) {
  AxisIter it;
  it.len = s[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) it.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) it.inner *= s[i];
  return it;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim()) fail(Err::usage, "softmax: axis out of range");
  AxisIter it = axis_iter(x.shape(), axis);
  Tensor out = make_tensor(x.shape(), x.dtype());
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t o = 0; o < it.outer; ++o)
      for (int64_t in = 0; in < it.inner; ++in) {
        int64_t base = o * it.len * it.inner + in;
        scalar_t mx = px[base];
        for (int64_t l = 1; l < it.len; ++l) mx = std::max(mx, px[base + l * it.inner]);
        scalar_t sum = 0;
        for (int64_t l = 0; l < it.len; ++l) {
          scalar_t e = std::exp(px[base + l * it.inner] - mx);
          po[base + l * it.inner] = e;
          sum += e;
        }
        scalar_t inv = scalar_t(1) / sum;
        for (int64_t l = 0; l < it.len; ++l) po[base + l * it.inner] *= inv;
      }
  });
  if (Tape::recording({&x})) {
    Tape::record(out, {&x}, [out, it](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gx = make_tensor(out.shape(), g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        const auto* py = out.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t o = 0; o < it.outer; ++o)
          for (int64_t in = 0; in < it.inner; ++in) {
            int64_t base = o * it.len * it.inner + in;
            scalar_t dot = 0;
            for (int64_t l = 0; l < it.len; ++l)
              dot += pg[base + l * it.inner] * py[base + l * it.inner];
            for (int64_t l = 0; l < it.len; ++l) {
              int64_t idx = base + l * it.inner;
              p[idx] = py[idx] * (pg[idx] - dot);
            }
          }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

Tensor attention_softmax(const Tensor& scores, bool causal) {
  if (!causal) return softmax(scores, scores.ndim() - 1);
  check_shape(scores.ndim() >= 2, "attention_softmax: need at least 2 dims");
  int64_t S = scores.dim(static_cast<size_t>(scores.ndim() - 1));
  int64_t L = scores.dim(static_cast<size_t>(scores.ndim() - 2));
  check_shape(L == S, "attention_softmax: causal mask needs square score matrices");
  int64_t rows = scores.numel() / S;
  Tensor out = make_tensor(scores.shape(), scores.dtype());
  L4S_DISPATCH(scores.dtype(), {
    const auto* px = scores.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t r = 0; r < rows; ++r) {
      int64_t pos = r % L;                // row index within the L x L block
      int64_t allow = pos + 1;
      const scalar_t* in = px + r * S;
      scalar_t* o = po + r * S;
      scalar_t mx = in[0];
      for (int64_t j = 1; j < allow; ++j) mx = std::max(mx, in[j]);
      scalar_t sum = 0;
      for (int64_t j = 0; j < allow; ++j) {
        scalar_t e = std::exp(in[j] - mx);
        o[j] = e;
        sum += e;
      }
      scalar_t inv = scalar_t(1) / sum;
      for (int64_t j = 0; j < allow; ++j) o[j] *= inv;
      for (int64_t j = allow; j < S; ++j) o[j] = 0;
    }
  });
  if (Tape::recording({&scores})) {
    Tape::record(out, {&scores}, [out, rows, S, L](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gx = make_tensor(out.shape(), g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        const auto* py = out.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t r = 0; r < rows; ++r) {
          int64_t allow = (r % L) + 1;
          const scalar_t* grow = pg + r * S;
          const scalar_t* yrow = py + r * S;
          scalar_t* xrow = p + r * S;
          scalar_t dot = 0;
          for (int64_t j = 0; j < allow; ++j) dot += grow[j] * yrow[j];
          for (int64_t j = 0; j < allow; ++j) xrow[j] = yrow[j] * (grow[j] - dot);
          // masked columns keep zero grad
        }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// rmsnorm (last axis)

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  check_same_dtype(x, weight, "rmsnorm");
  int64_t d = x.dim(static_cast<size_t>(x.ndim() - 1));
  check_shape(weight.ndim() == 1 && weight.dim(0) == d,
              "rmsnorm: weight extent " + shape_str(weight.shape()) + " does not match feature dim " +
                  std::to_string(d));
  int64_t rows = x.numel() / d;
  Tensor out = make_tensor(x.shape(), x.dtype());
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    const auto* pw = weight.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t r = 0; r < rows; ++r) {
      const scalar_t* in = px + r * d;
      scalar_t* o = po + r * d;
      double ms = 0;
      for (int64_t i = 0; i < d; ++i) ms += static_cast<double>(in[i]) * in[i];
      scalar_t inv = static_cast<scalar_t>(1.0 / std::sqrt(ms / static_cast<double>(d) + eps));
      for (int64_t i = 0; i < d; ++i) o[i] = in[i] * inv * pw[i];
    }
  });
  if (Tape::recording({&x, &weight})) {
    Tape::record(out, {&x, &weight}, [x, weight, eps, d, rows](Tape::Ctx& ctx) {
      Tensor g = ctx.grad_out();
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        const auto* px = x.data<scalar_t>();
        const auto* pw = weight.data<scalar_t>();
        Tensor gx, gw;
        scalar_t *pgx = nullptr, *pgw = nullptr;
        if (ctx.needs(0)) {
          gx = make_tensor(x.shape(), g.dtype());
          pgx = gx.data_mut<scalar_t>();
        }
        if (ctx.needs(1)) {
          gw = make_tensor(weight.shape(), g.dtype());
          pgw = gw.data_mut<scalar_t>();
        }
        for (int64_t r = 0; r < rows; ++r) {
          const scalar_t* in = px + r * d;
          const scalar_t* grow = pg + r * d;
          double ms = 0;
          for (int64_t i = 0; i < d; ++i) ms += static_cast<double>(in[i]) * in[i];
          double rinv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
          if (pgx) {
            double dot = 0;  // sum_i g_i w_i x_i
            for (int64_t i = 0; i < d; ++i) dot += static_cast<double>(grow[i]) * pw[i] * in[i];
            double coef = dot * rinv * rinv * rinv / static_cast<double>(d);
            for (int64_t i = 0; i < d; ++i)
              pgx[r * d + i] = static_cast<scalar_t>(grow[i] * pw[i] * rinv - in[i] * coef);
          }
          if (pgw)
            for (int64_t i = 0; i < d; ++i)
              pgw[i] += static_cast<scalar_t>(grow[i] * in[i] * rinv);
        }
        if (pgx) ctx.accum(0, gx);
        if (pgw) ctx.accum(1, gw);
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// groupnorm over B x C x H x W

Tensor groupnorm(const Tensor& x, const Tensor& weight, const Tensor& bias, int groups, double eps) {
  check_shape(x.ndim() == 4, "groupnorm: input must be B x C x H x W");
  check_same_dtype(x, weight, "groupnorm");
  check_same_dtype(x, bias, "groupnorm");
  int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups < 1 || C % groups != 0)
    fail(Err::usage, "groupnorm: channels " + std::to_string(C) + " not divisible by groups " +
                         std::to_string(groups));
  check_shape(weight.numel() == C && bias.numel() == C, "groupnorm: affine params must have C extents");
  int64_t cpg = C / groups, m = cpg * HW;
  Tensor out = make_tensor(x.shape(), x.dtype());
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    const auto* pw = weight.data<scalar_t>();
    const auto* pb = bias.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t g = 0; g < groups; ++g) {
        const scalar_t* in = px + (b * C + g * cpg) * HW;
        scalar_t* o = po + (b * C + g * cpg) * HW;
        double mean = 0;
        for (int64_t i = 0; i < m; ++i) mean += in[i];
        mean /= static_cast<double>(m);
        double var = 0;
        for (int64_t i = 0; i < m; ++i) {
          double dv = in[i] - mean;
          var += dv * dv;
        }
        var /= static_cast<double>(m);
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < cpg; ++c) {
          double wc = pw[g * cpg + c], bc = pb[g * cpg + c];
          for (int64_t i = 0; i < HW; ++i)
            o[c * HW + i] = static_cast<scalar_t>((in[c * HW + i] - mean) * inv * wc + bc);
        }
      }
  });
  if (Tape::recording({&x, &weight, &bias})) {
    Tape::record(out, {&x, &weight, &bias}, [x, weight, groups, eps, B, C, HW, cpg, m](Tape::Ctx& ctx) {
      Tensor g = ctx.grad_out();
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        const auto* px = x.data<scalar_t>();
        const auto* pw = weight.data<scalar_t>();
        Tensor gx, gw, gb;
        scalar_t *pgx = nullptr, *pgw = nullptr, *pgb = nullptr;
        if (ctx.needs(0)) { gx = make_tensor(x.shape(), g.dtype()); pgx = gx.data_mut<scalar_t>(); }
        if (ctx.needs(1)) { gw = make_tensor({C}, g.dtype()); pgw = gw.data_mut<scalar_t>(); }
        if (ctx.needs(2)) { gb = make_tensor({C}, g.dtype()); pgb = gb.data_mut<scalar_t>(); }
        for (int64_t b = 0; b < B; ++b)
          for (int64_t grp = 0; grp < groups; ++grp) {
            const scalar_t* in = px + (b * C + grp * cpg) * HW;
            const scalar_t* grow = pg + (b * C + grp * cpg) * HW;
            double mean = 0;
            for (int64_t i = 0; i < m; ++i) mean += in[i];
            mean /= static_cast<double>(m);
            double var = 0;
            for (int64_t i = 0; i < m; ++i) { double dv = in[i] - mean; var += dv * dv; }
            var /= static_cast<double>(m);
            double inv = 1.0 / std::sqrt(var + eps);
            if (pgw || pgb) {
              for (int64_t c = 0; c < cpg; ++c) {
                double sw = 0, sb = 0;
                for (int64_t i = 0; i < HW; ++i) {
                  double gv = grow[c * HW + i];
                  sw += gv * (in[c * HW + i] - mean) * inv;
                  sb += gv;
                }
                if (pgw) pgw[grp * cpg + c] += static_cast<scalar_t>(sw);
                if (pgb) pgb[grp * cpg + c] += static_cast<scalar_t>(sb);
              }
            }
            if (pgx) {
              // dxhat = g * w_c; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
              double sum_dxh = 0, sum_dxh_xh = 0;
              for (int64_t c = 0; c < cpg; ++c) {
                double wc = pw[grp * cpg + c];
                for (int64_t i = 0; i < HW; ++i) {
                  double dxh = grow[c * HW + i] * wc;
                  double xh = (in[c * HW + i] - mean) * inv;
                  sum_dxh += dxh;
                  sum_dxh_xh += dxh * xh;
                }
              }
              double mean_dxh = sum_dxh / static_cast<double>(m);
              double mean_dxh_xh = sum_dxh_xh / static_cast<double>(m);
              scalar_t* o = pgx + (b * C + grp * cpg) * HW;
              for (int64_t c = 0; c < cpg; ++c) {
                double wc = pw[grp * cpg + c];
                for (int64_t i = 0; i < HW; ++i) {
                  double dxh = grow[c * HW + i] * wc;
                  double xh = (in[c * HW + i] - mean) * inv;
                  o[c * HW + i] = static_cast<scalar_t>(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
                }
              }
            }
          }
        if (pgx) ctx.accum(0, gx);
        if (pgw) ctx.accum(1, gw);
        if (pgb) ctx.accum(2, gb);
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations

Tensor activation(const Tensor& x, Act kind) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    int64_t n = x.numel();
    switch (kind) {
      case Act::relu:
        for (int64_t i = 0; i < n; ++i) po[i] = px[i] > 0 ? px[i] : scalar_t(0);
        break;
      case Act::silu:
        for (int64_t i = 0; i < n; ++i) {
          scalar_t s = scalar_t(1) / (scalar_t(1) + std::exp(-px[i]));
          po[i] = px[i] * s;
        }
        break;
      case Act::sigmoid:
        for (int64_t i = 0; i < n; ++i) po[i] = scalar_t(1) / (scalar_t(1) + std::exp(-px[i]));
        break;
    }
  });
  if (Tape::recording({&x})) {
    Tape::record(out, {&x}, [x, out, kind](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gx = make_tensor(x.shape(), g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        const auto* px = x.data<scalar_t>();
        const auto* py = out.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        int64_t n = x.numel();
        switch (kind) {
          case Act::relu:
            for (int64_t i = 0; i < n; ++i) p[i] = px[i] > 0 ? pg[i] : scalar_t(0);
            break;
          case Act::silu:
            for (int64_t i = 0; i < n; ++i) {
              scalar_t s = scalar_t(1) / (scalar_t(1) + std::exp(-px[i]));
              p[i] = pg[i] * (s + px[i] * s * (scalar_t(1) - s));
            }
            break;
          case Act::sigmoid:
            for (int64_t i = 0; i < n; ++i) p[i] = pg[i] * py[i] * (scalar_t(1) - py[i]);
            break;
        }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// rotary position embedding

Tensor rope_apply(const Tensor& x, double theta) {
  check_shape(x.ndim() == 4, "rope: input must be B x heads x L x d_head");
  int64_t dh = x.dim(3);
  if (dh % 2 != 0) fail(Err::shape_mismatch, "rope: d_head must be even, got " + std::to_string(dh));
  int64_t BH = x.dim(0) * x.dim(1), L = x.dim(2);
  // angle table: [L, dh/2]
  auto angles = std::make_shared<std::vector<double>>(static_cast<size_t>(L * dh / 2));
  for (int64_t p = 0; p < L; ++p)
    for (int64_t i = 0; i < dh / 2; ++i)
      (*angles)[static_cast<size_t>(p * dh / 2 + i)] =
          static_cast<double>(p) * std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
  auto rotate = [angles, BH, L, dh](const Tensor& in, bool inverse) {
    Tensor out = make_tensor(in.shape(), in.dtype());
    L4S_DISPATCH(in.dtype(), {
      const auto* px = in.data<scalar_t>();
      auto* po = out.data_mut<scalar_t>();
      for (int64_t bh = 0; bh < BH; ++bh)
        for (int64_t p = 0; p < L; ++p) {
          const scalar_t* row = px + (bh * L + p) * dh;
          scalar_t* o = po + (bh * L + p) * dh;
          for (int64_t i = 0; i < dh / 2; ++i) {
            double ang = (*angles)[static_cast<size_t>(p * dh / 2 + i)];
            double c = std::cos(ang), s = inverse ? -std::sin(ang) : std::sin(ang);
            double a = row[2 * i], b = row[2 * i + 1];
            o[2 * i] = static_cast<scalar_t>(a * c - b * s);
            o[2 * i + 1] = static_cast<scalar_t>(a * s + b * c);
          }
        }
    });
    return out;
  };
  Tensor out = rotate(x, false);
  if (Tape::recording({&x})) {
    Tape::record(out, {&x}, [rotate](Tape::Ctx& ctx) {
      if (ctx.needs(0)) ctx.accum(0, rotate(ctx.grad_out(), true));
    });
  }
  return out;
}

Tensor repeat_heads(const Tensor& x, int repeat) {
  check_shape(x.ndim() == 4, "repeat_heads: input must be B x kv x L x d");
  if (repeat < 1) fail(Err::usage, "repeat_heads: repeat must be >= 1");
  if (repeat == 1) return reshape(x, x.shape());
  int64_t B = x.dim(0), KV = x.dim(1), Ld = x.dim(2) * x.dim(3);
  Tensor out = make_tensor({B, KV * repeat, x.dim(2), x.dim(3)}, x.dtype());
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < KV; ++h)
        for (int64_t r = 0; r < repeat; ++r)
          std::memcpy(po + ((b * KV + h) * repeat + r) * Ld, px + (b * KV + h) * Ld,
                      sizeof(scalar_t) * static_cast<size_t>(Ld));
  });
  if (Tape::recording({&x})) {
    Shape in_shape = x.shape();
    Tape::record(out, {&x}, [in_shape, B, KV, Ld, repeat](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gx = make_tensor(in_shape, g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t h = 0; h < KV; ++h)
            for (int64_t r = 0; r < repeat; ++r) {
              const scalar_t* src = pg + ((b * KV + h) * repeat + r) * Ld;
              scalar_t* dst = p + (b * KV + h) * Ld;
              for (int64_t i = 0; i < Ld; ++i) dst[i] += src[i];
            }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embedding / losses

Tensor embedding(const Tensor& weight, const std::vector<int32_t>& ids, int64_t B, int64_t L) {
  check_shape(weight.ndim() == 2, "embedding: weight must be V x d");
  check_shape(static_cast<int64_t>(ids.size()) == B * L, "embedding: id count mismatch");
  int64_t V = weight.dim(0), d = weight.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= V) fail(Err::out_of_range, "embedding: id " + std::to_string(id) + " out of range");
  Tensor out = make_tensor({B, L, d}, weight.dtype());
  L4S_DISPATCH(weight.dtype(), {
    const auto* pw = weight.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(po + static_cast<int64_t>(i) * d, pw + ids[i] * d, sizeof(scalar_t) * static_cast<size_t>(d));
  });
  if (Tape::recording({&weight})) {
    Shape wshape = weight.shape();
    Tape::record(out, {&weight}, [ids, wshape, d](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      Tensor g = ctx.grad_out();
      Tensor gw = make_tensor(wshape, g.dtype());
      L4S_DISPATCH(g.dtype(), {
        const auto* pg = g.data<scalar_t>();
        auto* p = gw.data_mut<scalar_t>();
        for (size_t i = 0; i < ids.size(); ++i) {
          scalar_t* dst = p + ids[i] * d;
          const scalar_t* src = pg + static_cast<int64_t>(i) * d;
          for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
      ctx.accum(0, gw);
    });
  }
  return out;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int32_t>& targets) {
  check_shape(logits.ndim() == 2, "cross_entropy: logits must be N x V");
  int64_t N = logits.dim(0), V = logits.dim(1);
  check_shape(static_cast<int64_t>(targets.size()) == N, "cross_entropy: target count mismatch");
  for (int32_t t : targets)
    if (t < 0 || t >= V) fail(Err::out_of_range, "cross_entropy: target out of range");
  Tensor out = make_tensor({1}, logits.dtype());
  L4S_DISPATCH(logits.dtype(), {
    const auto* pl = logits.data<scalar_t>();
    double total = 0;
    for (int64_t r = 0; r < N; ++r) {
      const scalar_t* row = pl + r * V;
      double mx = row[0];
      for (int64_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double lse = 0;
      for (int64_t v = 0; v < V; ++v) lse += std::exp(row[v] - mx);
      lse = std::log(lse) + mx;
      total += lse - row[targets[static_cast<size_t>(r)]];
    }
    out.data_mut<scalar_t>()[0] = static_cast<scalar_t>(total / static_cast<double>(N));
  });
  if (Tape::recording({&logits})) {
    Tape::record(out, {&logits}, [logits, targets, N, V](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;
      double gscale = ctx.grad_out().item() / static_cast<double>(N);
      Tensor gx = make_tensor(logits.shape(), logits.dtype());
      L4S_DISPATCH(logits.dtype(), {
        const auto* pl = logits.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t r = 0; r < N; ++r) {
          const scalar_t* row = pl + r * V;
          scalar_t* grow = p + r * V;
          double mx = row[0];
          for (int64_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
          double sum = 0;
          for (int64_t v = 0; v < V; ++v) sum += std::exp(row[v] - mx);
          for (int64_t v = 0; v < V; ++v)
            grow[v] = static_cast<scalar_t>(gscale * (std::exp(row[v] - mx) / sum -
                                                      (targets[static_cast<size_t>(r)] == v ? 1.0 : 0.0)));
        }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  check_same_dtype(logits, targets, "bce");
  check_shape(logits.shape() == targets.shape(), "bce: shapes differ: " + shape_str(logits.shape()) +
                                                     " vs " + shape_str(targets.shape()));
  int64_t n = logits.numel();
  Tensor out = make_tensor({1}, logits.dtype());
  L4S_DISPATCH(logits.dtype(), {
    const auto* pz = logits.data<scalar_t>();
    const auto* pt = targets.data<scalar_t>();
    double total = 0;
    for (int64_t i = 0; i < n; ++i) {
      double z = pz[i], t = pt[i];
      // stable: max(z,0) - z*t + log(1 + exp(-|z|))
      total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
    }
    out.data_mut<scalar_t>()[0] = static_cast<scalar_t>(total / static_cast<double>(n));
  });
  if (Tape::recording({&logits, &targets})) {
    Tape::record(out, {&logits, &targets}, [logits, targets, n](Tape::Ctx& ctx) {
      if (!ctx.needs(0)) return;  // grads w.r.t. targets intentionally unsupported
      double gscale = ctx.grad_out().item() / static_cast<double>(n);
      Tensor gx = make_tensor(logits.shape(), logits.dtype());
      L4S_DISPATCH(logits.dtype(), {
        const auto* pz = logits.data<scalar_t>();
        const auto* pt = targets.data<scalar_t>();
        auto* p = gx.data_mut<scalar_t>();
        for (int64_t i = 0; i < n; ++i) {
          double s = 1.0 / (1.0 + std::exp(-static_cast<double>(pz[i])));
          p[i] = static_cast<scalar_t>(gscale * (s - pt[i]));
        }
      });
      ctx.accum(0, gx);
    });
  }
  return out;
}

Tensor add_bias_lastdim(const Tensor& x, const Tensor& b) {
  check_same_dtype(x, b, "add_bias");
  int64_t d = x.dim(static_cast<size_t>(x.ndim() - 1));
  check_shape(b.ndim() == 1 && b.dim(0) == d, "add_bias: bias extent mismatch");
  int64_t rows = x.numel() / d;
  Tensor out = make_tensor(x.shape(), x.dtype());
  L4S_DISPATCH(x.dtype(), {
    const auto* px = x.data<scalar_t>();
    const auto* pb = b.data<scalar_t>();
    auto* po = out.data_mut<scalar_t>();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < d; ++i) po[r * d + i] = px[r * d + i] + pb[i];
  });
  if (Tape::recording({&x, &b})) {
    Tape::record(out, {&x, &b}, [rows, d](Tape::Ctx& ctx) {
      Tensor g = ctx.grad_out();
      if (ctx.needs(0)) ctx.accum(0, g);
      if (ctx.needs(1)) {
        Tensor gb = make_tensor({d}, g.dtype());
        L4S_DISPATCH(g.dtype(), {
          const auto* pg = g.data<scalar_t>();
          auto* p = gb.data_mut<scalar_t>();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) p[i] += pg[r * d + i];
        });
        ctx.accum(1, gb);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w, false, true);
  if (b.defined()) y = add_bias_lastdim(y, b);
  return y;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Tensor& p : params_) {
    m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;  // zero grad everywhere: parameter unchanged
    Tensor g = p.grad();
    L4S_DISPATCH(p.dtype(), {
      auto* pp = p.data_mut<scalar_t>();
      const auto* pg = g.data<scalar_t>();
      auto* pm = m_[i].data_mut<scalar_t>();
      auto* pv = v_[i].data_mut<scalar_t>();
      int64_t n = p.numel();
      for (int64_t j = 0; j < n; ++j) {
        double gv = pg[j];
        double m = cfg_.beta1 * pm[j] + (1.0 - cfg_.beta1) * gv;
        double v = cfg_.beta2 * pv[j] + (1.0 - cfg_.beta2) * gv * gv;
        pm[j] = static_cast<scalar_t>(m);
        pv[j] = static_cast<scalar_t>(v);
        double mh = m / bc1, vh = v / bc2;
        pp[j] = static_cast<scalar_t>(pp[j] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    });
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double h) {
  for (Tensor& t : inputs) {
    if (t.dtype() != Dtype::F64) fail(Err::dtype_mismatch, "grad_check: inputs must be F64");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<Tensor> ad_grads;
  {
    Tape tape;
    Tensor loss = f(inputs);
    if (loss.numel() != 1) fail(Err::not_scalar, "grad_check: f must be scalar-valued");
    tape.backward(loss);
  }
  for (Tensor& t : inputs)
    ad_grads.push_back(t.has_grad() ? t.grad().clone() : Tensor::zeros(t.shape(), Dtype::F64));

  double max_rel = 0.0;
  NoGradGuard ng;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    auto* p = t.data_mut<double>();
    for (int64_t i = 0; i < t.numel(); ++i) {
      double orig = p[i];
      p[i] = orig + h;
      double fp = f(inputs).item();
      p[i] = orig - h;
      double fm = f(inputs).item();
      p[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double ad = ad_grads[ti].at(i);
      double rel = std::fabs(ad - fd) / std::max(1.0, std::fabs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace l4s
