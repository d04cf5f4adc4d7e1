#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Dense double tensors with reverse-mode automatic differentiation.
//
// Operations record onto the thread-local active Tape (see TapeScope) whenever
// at least one input requires a gradient. With no active tape, every op is a
// plain value computation, which is what evaluation paths use. A tape is
// confined to one training context; independent contexts on separate threads
// each get their own tape.

namespace us3l {

// Numeric degeneracy: zero norms, non-finite values. Distinct from API
// misuse so training loops can turn it into a collapse diagnostic.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::unique_ptr<std::vector<double>> grad;  // allocated on first accumulation
  bool requires_grad = false;
  int64_t id = 0;
  us3l::Tape* tape = nullptr;  // tape that recorded this node, if any

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  // Leaf construction. Registers on the active tape iff requires_grad.
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int axis) const;
  int64_t numel() const;
  int64_t id() const;

  std::span<const double> data() const;
  // Raw write access for parameter updates. Only valid outside a recorded
  // region; the optimizer mutates parameters between tapes.
  std::span<double> mutable_data();

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;  // numel()==1
  double operator()(int64_t i) const;
  double operator()(int64_t i, int64_t j) const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class Tape;
  friend struct OpHelper;
};

enum class OpKind {
  leaf,
  add,
  mul,
  scale,
  matmul,
  transpose,
  relu,
  pow_scalar,
  sum_all,
  sum_axis0,
  rowwise_dot,
  l2_normalize,
  log_sum_exp,
  slice,
  concat_cols,
  gather_cols,
};

// Ordered record of operations. Entries are appended in execution order, so
// every input precedes its consumer and a single reverse sweep visits each
// node exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }
  bool contains(const Tensor& t) const;
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    OpKind kind;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward;  // accumulates adjoints into input grads
  };
  std::vector<Entry> entries_;

  friend struct OpHelper;
  friend void backward(const Tensor& loss);
};

// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Elementwise. Shapes must match, or b may broadcast: [d] over the rows of
// an [n,d] tensor, or [n,1] over its columns.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double exponent);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);

Tensor sum_all(const Tensor& a);    // -> scalar
Tensor sum_axis0(const Tensor& a);  // [n,d] -> [d]
Tensor rowwise_dot(const Tensor& a, const Tensor& b);  // [n,d],[n,d] -> [n]

// Each row scaled to unit Euclidean norm. Rows with norm below 1e-12 are a
// degenerate input and raise; collapsed embeddings must surface, not hide.
Tensor l2_normalize(const Tensor& a);

// Max-shifted log sum exp of x/scale. Rank-1 input -> scalar.
Tensor log_sum_exp(const Tensor& x, double scale = 1.0);
// Row-wise variant: [n,m] -> [n].
Tensor log_sum_exp_rows(const Tensor& x, double scale = 1.0);

// Contiguous block of a rank-2 tensor; prefix of a rank-1 tensor.
Tensor slice(const Tensor& a, int64_t row0, int64_t rows, int64_t col0,
             int64_t cols);
Tensor slice_prefix(const Tensor& a, int64_t count);  // rank-1

Tensor concat_cols(const Tensor& a, const Tensor& b);  // [n,m1],[n,m2] -> [n,m1+m2]

// Picks a[i, index[i]] for each row -> [n].
Tensor gather_cols(const Tensor& a, const std::vector<int64_t>& index);

// Same values, detached from the tape; never accumulates a gradient.
Tensor stop_gradient(const Tensor& a);

// Reverse sweep from a scalar loss; fills grad on every requires_grad leaf.
void backward(const Tensor& loss);

}  // namespace us3l
