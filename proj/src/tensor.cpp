#include "us3l/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace us3l {

namespace {

std::atomic<int64_t> g_next_node_id{1};
thread_local Tape* g_active_tape = nullptr;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) fail("negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
  if (!grad) grad = std::make_unique<std::vector<double>>(value.size(), 0.0);
  return *grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op plumbing

struct OpHelper {
  // Makes the result node; records the entry when grad tracking applies.
  static Tensor make(OpKind kind, Shape shape, std::vector<double> value,
                     std::vector<Tensor> inputs,
                     std::function<void()> backward_with_output_bound,
                     bool any_input_requires_grad) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->id = g_next_node_id.fetch_add(1);
    Tensor out(node);
    if (any_input_requires_grad && g_active_tape != nullptr) {
      node->requires_grad = true;
      node->tape = g_active_tape;
      Tape::Entry entry;
      entry.kind = kind;
      entry.inputs.reserve(inputs.size());
      for (const Tensor& t : inputs) entry.inputs.push_back(t.node_);
      entry.output = node;
      entry.backward = std::move(backward_with_output_bound);
      g_active_tape->entries_.push_back(std::move(entry));
    }
    return out;
  }

  static detail::Node* node(const Tensor& t) { return t.node_.get(); }
  static std::shared_ptr<detail::Node> share(const Tensor& t) { return t.node_; }

  static Tape::Entry& last_entry(Tape* tape) { return tape->entries_.back(); }

  static void push_leaf(Tape* tape, std::shared_ptr<detail::Node> node) {
    tape->entries_.push_back(Tape::Entry{OpKind::leaf, {}, std::move(node), [] {}});
  }
};

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  const int64_t n = shape_numel(shape);
  check(n == static_cast<int64_t>(values.size()),
        "from_data: shape " + shape_to_string(shape) + " expects " +
            std::to_string(n) + " values, got " +
            std::to_string(values.size()));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->id = g_next_node_id.fetch_add(1);
  Tensor t(std::move(node));
  if (requires_grad && g_active_tape != nullptr) {
    t.node_->tape = g_active_tape;
    // Leaf registration keeps the tape a complete record of participating
    // nodes; the entry itself has no adjoint work.
    OpHelper::push_leaf(g_active_tape, t.node_);
  }
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  check(defined(), "undefined tensor");
  return node_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  check(axis >= 0 && axis < static_cast<int>(s.size()), "dim: axis out of range");
  return s[axis];
}

int64_t Tensor::numel() const {
  check(defined(), "undefined tensor");
  return static_cast<int64_t>(node_->value.size());
}

int64_t Tensor::id() const {
  check(defined(), "undefined tensor");
  return node_->id;
}

std::span<const double> Tensor::data() const {
  check(defined(), "undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  check(defined(), "undefined tensor");
  return node_->value;
}

bool Tensor::requires_grad() const {
  check(defined(), "undefined tensor");
  return node_->requires_grad;
}

bool Tensor::has_grad() const {
  check(defined(), "undefined tensor");
  return node_->grad != nullptr;
}

std::span<const double> Tensor::grad() const {
  check(defined(), "undefined tensor");
  check(node_->grad != nullptr, "grad() called on tensor without a gradient");
  return *node_->grad;
}

void Tensor::zero_grad() {
  check(defined(), "undefined tensor");
  if (node_->grad) std::fill(node_->grad->begin(), node_->grad->end(), 0.0);
}

double Tensor::item() const {
  check(numel() == 1, "item(): tensor is not a scalar");
  return node_->value[0];
}

double Tensor::operator()(int64_t i) const {
  check(rank() == 1, "operator()(i): tensor is not rank 1");
  check(i >= 0 && i < dim(0), "index out of range");
  return node_->value[static_cast<std::size_t>(i)];
}

double Tensor::operator()(int64_t i, int64_t j) const {
  check(rank() == 2, "operator()(i,j): tensor is not rank 2");
  check(i >= 0 && i < dim(0) && j >= 0 && j < dim(1), "index out of range");
  return node_->value[static_cast<std::size_t>(i * dim(1) + j)];
}

// ---------------------------------------------------------------------------
// Tape

bool Tape::contains(const Tensor& t) const {
  if (!t.defined()) return false;
  for (const Entry& e : entries_) {
    if (e.output == t.node_) return true;
    for (const auto& in : e.inputs)
      if (in == t.node_) return true;
  }
  return false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }


namespace {

// Broadcast layouts for elementwise binary ops.
enum class Bcast { same, row_vector, col_vector };

Bcast broadcast_kind(const Shape& a, const Shape& b) {
  if (a == b) return Bcast::same;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Bcast::row_vector;
  if (a.size() == 2 && b.size() == 2 && b[0] == a[0] && b[1] == 1)
    return Bcast::col_vector;
  fail("elementwise op: incompatible shapes " + shape_to_string(a) + " and " +
       shape_to_string(b));
}

void accumulate(detail::Node* n, int64_t i, double v) {
  n->grad_buffer()[static_cast<std::size_t>(i)] += v;
}

const std::vector<double>& out_grad(const std::shared_ptr<detail::Node>& n) {
  return *n->grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

Tensor elementwise_binary(OpKind kind, const Tensor& a, const Tensor& b,
                          bool is_mul) {
  const Bcast bc = broadcast_kind(a.shape(), b.shape());
  const int64_t n = a.numel();
  const int64_t cols = a.rank() == 2 ? a.dim(1) : n;
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.data();
  auto bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    double bval = 0.0;
    switch (bc) {
      case Bcast::same: bval = bv[static_cast<std::size_t>(i)]; break;
      case Bcast::row_vector: bval = bv[static_cast<std::size_t>(i % cols)]; break;
      case Bcast::col_vector: bval = bv[static_cast<std::size_t>(i / cols)]; break;
    }
    const double x = av[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = is_mul ? x * bval : x + bval;
  }

  const bool track = a.requires_grad() || b.requires_grad();
  auto an = OpHelper::share(a);
  auto bn = OpHelper::share(b);
  Shape shape = a.shape();
  auto result = OpHelper::make(
      kind, shape, std::move(out), {a, b},
      [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, bn, on, bc, cols, is_mul] {
      const auto& g = out_grad(on);
      const int64_t n = static_cast<int64_t>(g.size());
      for (int64_t i = 0; i < n; ++i) {
        const double gi = g[static_cast<std::size_t>(i)];
        if (gi == 0.0) continue;
        int64_t bi = 0;
        switch (bc) {
          case Bcast::same: bi = i; break;
          case Bcast::row_vector: bi = i % cols; break;
          case Bcast::col_vector: bi = i / cols; break;
        }
        if (is_mul) {
          const double aval = an->value[static_cast<std::size_t>(i)];
          const double bval = bn->value[static_cast<std::size_t>(bi)];
          if (an->requires_grad) accumulate(an.get(), i, gi * bval);
          if (bn->requires_grad) accumulate(bn.get(), bi, gi * aval);
        } else {
          if (an->requires_grad) accumulate(an.get(), i, gi);
          if (bn->requires_grad) accumulate(bn.get(), bi, gi);
        }
      }
    };
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(OpKind::add, a, b, /*is_mul=*/false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(OpKind::mul, a, b, /*is_mul=*/true);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor scale(const Tensor& a, double c) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.data();
  for (int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(i)] * c;
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::scale, a.shape(), std::move(out), {a},
                               [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, c] {
      const auto& g = out_grad(on);
      for (std::size_t i = 0; i < g.size(); ++i)
        accumulate(an.get(), static_cast<int64_t>(i), g[i] * c);
    };
  }
  return result;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.data();
  for (int64_t i = 0; i < n; ++i) {
    const double x = av[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = x > 0.0 ? x : 0.0;
  }
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::relu, a.shape(), std::move(out), {a},
                               [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on] {
      const auto& g = out_grad(on);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (an->value[i] > 0.0)
          accumulate(an.get(), static_cast<int64_t>(i), g[i]);
    };
  }
  return result;
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  const int64_t n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.data();
  for (int64_t i = 0; i < n; ++i) {
    const double v = std::pow(av[static_cast<std::size_t>(i)], exponent);
    if (!std::isfinite(v))
      throw NumericError("pow_scalar: non-finite result (base " +
                         std::to_string(av[static_cast<std::size_t>(i)]) +
                         ", exponent " + std::to_string(exponent) + ")");
    out[static_cast<std::size_t>(i)] = v;
  }
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::pow_scalar, a.shape(), std::move(out),
                               {a}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, exponent] {
      const auto& g = out_grad(on);
      for (std::size_t i = 0; i < g.size(); ++i)
        accumulate(an.get(), static_cast<int64_t>(i),
                   g[i] * exponent * std::pow(an->value[i], exponent - 1.0));
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  check(k == k2, "matmul: inner dimensions disagree, " +
                     shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i * k + p)];
      if (aip == 0.0) continue;
      const std::size_t brow = static_cast<std::size_t>(p * n);
      const std::size_t orow = static_cast<std::size_t>(i * n);
      for (int64_t j = 0; j < n; ++j)
        out[orow + static_cast<std::size_t>(j)] +=
            aip * bv[brow + static_cast<std::size_t>(j)];
    }
  }
  const bool track = a.requires_grad() || b.requires_grad();
  auto result = OpHelper::make(OpKind::matmul, Shape{m, n}, std::move(out),
                               {a, b}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto bn = OpHelper::share(b);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, bn, on, m, k, n] {
      const auto& g = out_grad(on);
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        // dA = G * B^T
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j)
              s += g[static_cast<std::size_t>(i * n + j)] *
                   bn->value[static_cast<std::size_t>(p * n + j)];
            ga[static_cast<std::size_t>(i * k + p)] += s;
          }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        // dB = A^T * G
        for (int64_t p = 0; p < k; ++p)
          for (int64_t i = 0; i < m; ++i) {
            const double aip = an->value[static_cast<std::size_t>(i * k + p)];
            if (aip == 0.0) continue;
            for (int64_t j = 0; j < n; ++j)
              gb[static_cast<std::size_t>(p * n + j)] +=
                  aip * g[static_cast<std::size_t>(i * n + j)];
          }
      }
    };
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  check(a.rank() == 2, "transpose: rank-2 tensor required");
  const int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  auto av = a.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j * m + i)] =
          av[static_cast<std::size_t>(i * n + j)];
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::transpose, Shape{n, m}, std::move(out),
                               {a}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, m, n] {
      const auto& g = out_grad(on);
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i)
          accumulate(an.get(), i * n + j, g[static_cast<std::size_t>(j * m + i)]);
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::sum_all, Shape{}, {s}, {a}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on] {
      const double g = out_grad(on)[0];
      if (g == 0.0) return;
      auto& ga = an->grad_buffer();
      for (double& v : ga) v += g;
    };
  }
  return result;
}

Tensor sum_axis0(const Tensor& a) {
  check(a.rank() == 2, "sum_axis0: rank-2 tensor required");
  const int64_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  auto av = a.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<std::size_t>(j)] += av[static_cast<std::size_t>(i * d + j)];
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::sum_axis0, Shape{d}, std::move(out), {a},
                               [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, n, d] {
      const auto& g = out_grad(on);
      auto& ga = an->grad_buffer();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          ga[static_cast<std::size_t>(i * d + j)] += g[static_cast<std::size_t>(j)];
    };
  }
  return result;
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.shape() == b.shape(),
        "rowwise_dot: matching rank-2 tensors required");
  const int64_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j)
      s += av[static_cast<std::size_t>(i * d + j)] *
           bv[static_cast<std::size_t>(i * d + j)];
    out[static_cast<std::size_t>(i)] = s;
  }
  const bool track = a.requires_grad() || b.requires_grad();
  auto result = OpHelper::make(OpKind::rowwise_dot, Shape{n}, std::move(out),
                               {a, b}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto bn = OpHelper::share(b);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, bn, on, n, d] {
      const auto& g = out_grad(on);
      for (int64_t i = 0; i < n; ++i) {
        const double gi = g[static_cast<std::size_t>(i)];
        if (gi == 0.0) continue;
        for (int64_t j = 0; j < d; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i * d + j);
          if (an->requires_grad) accumulate(an.get(), i * d + j, gi * bn->value[idx]);
          if (bn->requires_grad) accumulate(bn.get(), i * d + j, gi * an->value[idx]);
        }
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalization and log-sum-exp

Tensor l2_normalize(const Tensor& a) {
  check(a.rank() == 2, "l2_normalize: rank-2 tensor required");
  const int64_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * d));
  std::vector<double> norms(static_cast<std::size_t>(n));
  auto av = a.data();
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = av[static_cast<std::size_t>(i * d + j)];
      s += v * v;
    }
    const double norm = std::sqrt(s);
    if (!(norm >= 1e-12))
      throw NumericError("l2_normalize: row " + std::to_string(i) +
                         " has near-zero or non-finite norm (" +
                         std::to_string(norm) + ")");
    norms[static_cast<std::size_t>(i)] = norm;
    for (int64_t j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i * d + j)] =
          av[static_cast<std::size_t>(i * d + j)] / norm;
  }
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::l2_normalize, a.shape(), std::move(out),
                               {a}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, n, d,
                                               norms = std::move(norms)] {
      const auto& g = out_grad(on);
      for (int64_t i = 0; i < n; ++i) {
        double gy = 0.0;  // g . y for this row
        for (int64_t j = 0; j < d; ++j)
          gy += g[static_cast<std::size_t>(i * d + j)] *
                on->value[static_cast<std::size_t>(i * d + j)];
        const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
        for (int64_t j = 0; j < d; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i * d + j);
          accumulate(an.get(), i * d + j, (g[idx] - on->value[idx] * gy) * inv);
        }
      }
    };
  }
  return result;
}

namespace {

// Shared log-sum-exp kernel over rows; writes one output per row plus the
// softmax-needed max shift.
void lse_forward(std::span<const double> x, int64_t rows, int64_t cols,
                 double scale, std::vector<double>& out) {
  for (int64_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j)
      mx = std::max(mx, x[static_cast<std::size_t>(i * cols + j)] / scale);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j)
      s += std::exp(x[static_cast<std::size_t>(i * cols + j)] / scale - mx);
    out[static_cast<std::size_t>(i)] = mx + std::log(s);
  }
}

Tensor lse_impl(const Tensor& x, double scale, bool rows_variant) {
  check(scale > 0.0, "log_sum_exp: scale must be positive");
  int64_t rows, cols;
  if (rows_variant) {
    check(x.rank() == 2, "log_sum_exp_rows: rank-2 tensor required");
    rows = x.dim(0);
    cols = x.dim(1);
  } else {
    check(x.rank() == 1, "log_sum_exp: rank-1 tensor required");
    rows = 1;
    cols = x.dim(0);
  }
  check(cols >= 1, "log_sum_exp: empty input");
  for (double v : x.data())
    if (!std::isfinite(v)) throw NumericError("log_sum_exp: non-finite input");
  std::vector<double> out(static_cast<std::size_t>(rows));
  lse_forward(x.data(), rows, cols, scale, out);

  const bool track = x.requires_grad();
  Shape out_shape = rows_variant ? Shape{rows} : Shape{};
  auto result = OpHelper::make(OpKind::log_sum_exp, std::move(out_shape),
                               std::move(out), {x}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto xn = OpHelper::share(x);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [xn, on, rows, cols, scale] {
      const auto& g = out_grad(on);
      for (int64_t i = 0; i < rows; ++i) {
        const double gi = g[static_cast<std::size_t>(i)];
        if (gi == 0.0) continue;
        const double lse = on->value[static_cast<std::size_t>(i)];
        for (int64_t j = 0; j < cols; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i * cols + j);
          const double soft = std::exp(xn->value[idx] / scale - lse);
          accumulate(xn.get(), i * cols + j, gi * soft / scale);
        }
      }
    };
  }
  return result;
}

}  // namespace

Tensor log_sum_exp(const Tensor& x, double scale) {
  return lse_impl(x, scale, /*rows_variant=*/false);
}

Tensor log_sum_exp_rows(const Tensor& x, double scale) {
  return lse_impl(x, scale, /*rows_variant=*/true);
}

// ---------------------------------------------------------------------------
// Structure ops

Tensor slice(const Tensor& a, int64_t row0, int64_t rows, int64_t col0,
             int64_t cols) {
  check(a.rank() == 2, "slice: rank-2 tensor required");
  const int64_t m = a.dim(0), n = a.dim(1);
  check(row0 >= 0 && rows >= 1 && row0 + rows <= m && col0 >= 0 && cols >= 1 &&
            col0 + cols <= n,
        "slice: block out of range");
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  auto av = a.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(i * cols + j)] =
          av[static_cast<std::size_t>((row0 + i) * n + (col0 + j))];
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::slice, Shape{rows, cols}, std::move(out),
                               {a}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, row0, rows, col0, cols, n] {
      const auto& g = out_grad(on);
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j)
          accumulate(an.get(), (row0 + i) * n + (col0 + j),
                     g[static_cast<std::size_t>(i * cols + j)]);
    };
  }
  return result;
}

Tensor slice_prefix(const Tensor& a, int64_t count) {
  check(a.rank() == 1, "slice_prefix: rank-1 tensor required");
  check(count >= 1 && count <= a.dim(0), "slice_prefix: count out of range");
  std::vector<double> out(a.data().begin(), a.data().begin() + count);
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::slice, Shape{count}, std::move(out), {a},
                               [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, count] {
      const auto& g = out_grad(on);
      for (int64_t i = 0; i < count; ++i)
        accumulate(an.get(), i, g[static_cast<std::size_t>(i)]);
    };
  }
  return result;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
        "concat_cols: row counts must match");
  const int64_t n = a.dim(0), m1 = a.dim(1), m2 = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * (m1 + m2)));
  auto av = a.data();
  auto bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m1; ++j)
      out[static_cast<std::size_t>(i * (m1 + m2) + j)] =
          av[static_cast<std::size_t>(i * m1 + j)];
    for (int64_t j = 0; j < m2; ++j)
      out[static_cast<std::size_t>(i * (m1 + m2) + m1 + j)] =
          bv[static_cast<std::size_t>(i * m2 + j)];
  }
  const bool track = a.requires_grad() || b.requires_grad();
  auto result = OpHelper::make(OpKind::concat_cols, Shape{n, m1 + m2},
                               std::move(out), {a, b}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto bn = OpHelper::share(b);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, bn, on, n, m1, m2] {
      const auto& g = out_grad(on);
      for (int64_t i = 0; i < n; ++i) {
        if (an->requires_grad)
          for (int64_t j = 0; j < m1; ++j)
            accumulate(an.get(), i * m1 + j,
                       g[static_cast<std::size_t>(i * (m1 + m2) + j)]);
        if (bn->requires_grad)
          for (int64_t j = 0; j < m2; ++j)
            accumulate(bn.get(), i * m2 + j,
                       g[static_cast<std::size_t>(i * (m1 + m2) + m1 + j)]);
      }
    };
  }
  return result;
}

Tensor gather_cols(const Tensor& a, const std::vector<int64_t>& index) {
  check(a.rank() == 2, "gather_cols: rank-2 tensor required");
  const int64_t n = a.dim(0), m = a.dim(1);
  check(static_cast<int64_t>(index.size()) == n,
        "gather_cols: one index per row required");
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.data();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = index[static_cast<std::size_t>(i)];
    check(j >= 0 && j < m, "gather_cols: index out of range at row " +
                               std::to_string(i));
    out[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(i * m + j)];
  }
  const bool track = a.requires_grad();
  auto result = OpHelper::make(OpKind::gather_cols, Shape{n}, std::move(out),
                               {a}, [] {}, track);
  if (track && g_active_tape != nullptr) {
    auto an = OpHelper::share(a);
    auto on = OpHelper::share(result);
    OpHelper::last_entry(g_active_tape).backward = [an, on, index, m] {
      const auto& g = out_grad(on);
      for (std::size_t i = 0; i < g.size(); ++i)
        accumulate(an.get(), static_cast<int64_t>(i) * m + index[i], g[i]);
    };
  }
  return result;
}

Tensor stop_gradient(const Tensor& a) {
  return OpHelper::make(OpKind::leaf, a.shape(),
                        std::vector<double>(a.data().begin(), a.data().end()),
                        {}, [] {}, false);
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  check(loss.defined(), "backward: undefined loss");
  check(loss.numel() == 1, "backward: loss must be a scalar, got shape " +
                               shape_to_string(loss.shape()));
  detail::Node* node = OpHelper::node(loss);
  check(node->requires_grad && node->tape != nullptr,
        "backward: loss is not on a tape");
  Tape* tape = node->tape;
  node->grad_buffer()[0] += 1.0;
  for (auto it = tape->entries_.rbegin(); it != tape->entries_.rend(); ++it) {
    if (it->output->grad == nullptr) continue;  // no adjoint reached this node
    it->backward();
  }
  // Registered leaves that received nothing hold an exact zero gradient.
  for (const auto& entry : tape->entries_)
    if (entry.kind == OpKind::leaf && entry.output->requires_grad)
      entry.output->grad_buffer();
}

}  // namespace us3l
