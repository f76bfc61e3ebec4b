#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a value-semantics handle: copies share storage, and storage is
// immutable after creation except for gradient accumulation and explicit
// optimizer updates (single writer). Ops record backward rules onto the
// currently active Tape; one training step builds and consumes one tape.

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <vector>

#include "l4seg/common.hpp"

namespace l4s {

enum class Dtype : uint8_t { F32, F64 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }
const char* dtype_name(Dtype dt);

using Shape = std::vector<int64_t>;
int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Storage {
  Dtype dtype = Dtype::F32;
  std::vector<float> f;
  std::vector<double> d;

  size_t size() const { return dtype == Dtype::F32 ? f.size() : d.size(); }
  void resize(size_t n) {
    if (dtype == Dtype::F32)
      f.assign(n, 0.0f);
    else
      d.assign(n, 0.0);
  }
  template <class T> T* ptr();
  template <class T> const T* ptr() const;
};

template <> inline float* Storage::ptr<float>() { return f.data(); }
template <> inline double* Storage::ptr<double>() { return d.data(); }
template <> inline const float* Storage::ptr<float>() const { return f.data(); }
template <> inline const double* Storage::ptr<double>() const { return d.data(); }

// Shared between all Tensor copies of one logical parameter so that grads
// accumulated through any copy are visible everywhere.
struct GradHolder {
  std::shared_ptr<Storage> buf;  // null until first accumulation
};

}  // namespace detail

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dt = Dtype::F32);
  static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32);
  static Tensor from(Shape shape, std::initializer_list<double> vals, Dtype dt = Dtype::F64);
  static Tensor from_vec(Shape shape, const std::vector<double>& vals, Dtype dt = Dtype::F64);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, Dtype dt = Dtype::F32);
  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev, Dtype dt = Dtype::F32);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return st_ ? static_cast<int64_t>(st_->size()) : 0; }
  Dtype dtype() const { return st_ ? st_->dtype : Dtype::F32; }

  template <class T> const T* data() const { return st_->ptr<T>(); }
  // single-writer escape hatch for the optimizer and in-place init
  template <class T> T* data_mut() { return st_->ptr<T>(); }

  double at(int64_t flat) const;           // dtype-agnostic element read
  void set(int64_t flat, double v);        // dtype-agnostic element write (init/tests)
  double item() const;                     // scalar fetch; errors when numel != 1
  std::vector<double> to_vec() const;

  Tensor& set_requires_grad(bool rg);
  bool requires_grad() const { return requires_grad_; }

  bool has_grad() const { return grad_ && grad_->buf != nullptr; }
  Tensor grad() const;        // undefined Tensor when absent
  void zero_grad();           // drops the accumulated gradient
  void accumulate_grad(const Tensor& g);

  Tensor detach() const;      // same storage, no grad tracking
  Tensor clone() const;       // deep copy of storage
  Tensor to(Dtype dt) const;  // converting copy (same dtype returns a clone)

  // tape linkage
  int64_t node() const { return node_; }
  uint64_t tape_id() const { return tape_id_; }

  // bitwise storage equality (same dtype, shape, and payload bytes)
  bool bitwise_equal(const Tensor& other) const;

 private:
  friend class Tape;
  friend Tensor make_tensor(Shape, Dtype);
  friend Tensor wrap_storage(std::shared_ptr<detail::Storage>, Shape);
  friend std::shared_ptr<detail::Storage> storage_of(const Tensor&);

  std::shared_ptr<detail::Storage> st_;
  Shape shape_;
  bool requires_grad_ = false;
  std::shared_ptr<detail::GradHolder> grad_;
  uint64_t tape_id_ = 0;
  int64_t node_ = -1;
};

// --- grad mode -------------------------------------------------------------

bool grad_enabled();

// RAII scope that suppresses tape recording (inference / analysis passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- tape ------------------------------------------------------------------

class Tape {
 public:
  Tape();   // becomes the active tape
  ~Tape();  // deactivates
  Tape(const Tape&) = delete;

  // Populates grads of every requires_grad tensor reachable from `loss`.
  // Gradients accumulate across calls until zeroed. A tape can be consumed
  // exactly once.
  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  size_t num_nodes() const { return nodes_.size(); }
  uint64_t id() const { return id_; }

  static Tape* active();

  // --- recording internals (used by ops) ---
  struct InputRef {
    int64_t node = -1;                            // producing node on this tape
    std::shared_ptr<detail::GradHolder> leaf;     // leaf grad slot
    Tensor leaf_tensor;                           // keeps leaf alive, carries shape/dtype
  };
  class Ctx {
   public:
    Tensor grad_out() const;       // gradient w.r.t. this node's output
    bool needs(size_t input) const;
    void accum(size_t input, const Tensor& g);

   private:
    friend class Tape;
    Ctx(Tape* t, int64_t n) : tape_(t), node_(n) {}
    Tape* tape_;
    int64_t node_;
  };
  using BackwardFn = std::function<void(Ctx&)>;

  // Returns true when recording should happen for these inputs.
  static bool recording(std::initializer_list<const Tensor*> inputs);
  // Registers a node producing `out` (mutates its tape linkage).
  static void record(Tensor& out, std::initializer_list<const Tensor*> inputs, BackwardFn fn);

 private:
  struct Node {
    std::vector<InputRef> inputs;
    BackwardFn fn;
    Shape out_shape;
    Dtype out_dtype = Dtype::F32;
  };

  bool relevant(const Tensor& t) const;

  uint64_t id_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<Tensor> node_grads_;  // live only during backward
};

// --- ops ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// C = opA(A) . opB(B) on the last two axes; leading axes must match, or one
// operand may be a plain matrix shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat_ch(const Tensor& a, const Tensor& b);  // axis 1 of B x C x H x W

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1, int pad = 0);
Tensor maxpool2d(const Tensor& x, int window = 2);
Tensor upsample2x_bilinear(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);
// scores: B x h x L x S; causal masks j > i (requires L == S)
Tensor attention_softmax(const Tensor& scores, bool causal);

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);
Tensor groupnorm(const Tensor& x, const Tensor& weight, const Tensor& bias, int groups, double eps);

enum class Act { relu, silu, sigmoid };
Tensor activation(const Tensor& x, Act kind);

// pairs (x_{2i}, x_{2i+1}) of B x heads x L x d_head rotated by pos*theta^(-2i/d_head)
Tensor rope_apply(const Tensor& x, double theta);
Tensor repeat_heads(const Tensor& x, int repeat);  // B x kv x L x d -> B x kv*repeat x L x d

Tensor embedding(const Tensor& weight, const std::vector<int32_t>& ids, int64_t B, int64_t L);
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int32_t>& targets);
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);

Tensor add_bias_lastdim(const Tensor& x, const Tensor& b);
// y = x . W^T + b with W stored [out, in]; x is [..., in]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// --- optimizer ---------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});
  void step();       // reads param grads, updates params in place
  void zero_grad();
  int64_t step_count() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// --- verification -------------------------------------------------------

// Central-difference check of d f / d inputs at the current input values.
// f must be scalar-valued; inputs must be F64. Returns the max over elements
// of |g_ad - g_fd| / max(1, |g_fd|).
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double h = 1e-4);

}  // namespace l4s
