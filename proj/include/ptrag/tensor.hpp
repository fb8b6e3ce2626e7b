#pragma once

// Reverse-mode autodiff over dense row-major f64 tensors. Define-by-run: a
// fresh Tape is built per forward pass, ops record nodes only while a
// TapeScope is active and some input requires gradients. Dense matrix
// products are delegated to Eigen; everything else is explicit loops.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptrag {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void contract_violation(const std::string& msg) {
  throw std::invalid_argument("contract violation: " + msg);
}

struct TensorData {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;       // allocated on demand, same length as value
  std::int64_t node = -1;         // id on the tape identified by tape_epoch
  std::uint64_t tape_epoch = 0;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      contract_violation("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(data);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->value.size(); }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }
  const std::vector<double>& value() const { return d_->value; }
  bool requires_grad() const { return d_->requires_grad; }

  double item() const {
    if (size() != 1) contract_violation("item() on non-scalar tensor " + shape_str(shape()));
    return d_->value[0];
  }

  // Gradient of the last backward() pass; zeros if the tensor never
  // participated. Only meaningful for requires_grad leaves.
  const std::vector<double>& grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad;
  }

  void zero_grad() { d_->grad.assign(d_->value.size(), 0.0); }

  std::shared_ptr<TensorData> data() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  struct Node {
    std::vector<std::int64_t> inputs;
    std::size_t out_size = 0;
    std::vector<double> grad;  // d(loss)/d(node output), allocated on demand
    std::function<void(Tape&, const std::vector<double>&)> backprop;
    std::shared_ptr<TensorData> leaf;  // set for leaf nodes only
  };

  Tape() : epoch_(next_epoch()++) {}

  std::uint64_t epoch() const { return epoch_; }
  bool consumed() const { return consumed_; }
  void mark_consumed() { consumed_ = true; }

  std::int64_t add_node(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<std::int64_t>(nodes_.size()) - 1;
  }

  Node& node(std::int64_t id) { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t node_count() const { return nodes_.size(); }

  std::vector<double>& grad_buffer(std::int64_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.out_size, 0.0);
    return n.grad;
  }

 private:
  static std::uint64_t& next_epoch() {
    static std::uint64_t e = 1;
    return e;
  }
  std::vector<Node> nodes_;
  std::uint64_t epoch_;
  bool consumed_ = false;
};

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(active_tape()) { active_tape() = &tape; }
  ~TapeScope() { active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Registers `t` as a leaf on `tape` if it has no node there yet.
inline std::int64_t ensure_node(Tape& tape, const Tensor& t) {
  TensorData& d = *t.data();
  if (d.node >= 0 && d.tape_epoch == tape.epoch()) return d.node;
  Tape::Node leaf;
  leaf.out_size = d.value.size();
  leaf.leaf = t.data();
  std::int64_t id = tape.add_node(std::move(leaf));
  d.node = id;
  d.tape_epoch = tape.epoch();
  return id;
}

// ---------------------------------------------------------------------------
// Primitive set

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMatmul,
  kConcatLastDim,
  kSlice,
  kGatherRows,
  kRelu,
  kSoftmaxLastDim,
  kLog,
  kExp,
  kMeanAll,
  kSumAll,
  kSumAxis,
  kL2NormRows,
  kLayerNormStats,
  kPairwiseEuclidean,
  kStopGradient,
  kStraightThroughCombine,
  kReshape,
};

struct OpAttrs {
  double scalar = 0.0;                 // scalar-mul factor
  int axis = -1;                       // sum-axis
  std::size_t start = 0;               // slice offset along the last dim
  std::size_t length = 0;              // slice length
  std::vector<std::size_t> rows;       // gather-rows indices
  bool trans_a = false;                // matmul transposes
  bool trans_b = false;
  double eps = 1e-5;                   // layer-norm variance floor
  Shape new_shape;                     // reshape target
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Sequential left-to-right sum; used for per-row statistics.
inline double sequential_sum(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

inline double sequential_mean(const double* x, std::size_t n) {
  return sequential_sum(x, n) / static_cast<double>(n);
}

// Order-canonical sum: accumulate in ascending value order so the result is
// invariant under any permutation of the elements. mean-all/sum-all use this,
// which is what makes the distance losses exactly symmetric in their
// arguments and permutation tests exact; the metrics module reuses it so the
// training loss and the evaluation metric agree bitwise.
inline double canonical_sum(const double* x, std::size_t n) {
  std::vector<double> sorted(x, x + n);
  std::sort(sorted.begin(), sorted.end());
  double s = 0.0;
  for (double v : sorted) s += v;
  return s;
}

inline double canonical_mean(const double* x, std::size_t n) {
  return canonical_sum(x, n) / static_cast<double>(n);
}

inline void pairwise_distances(const double* a, std::size_t n, const double* b, std::size_t m,
                               std::size_t d, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * d;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * d;
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = ai[k] - bj[k];
        acc += diff * diff;
      }
      out[i * m + j] = std::sqrt(acc);
    }
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    contract_violation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    contract_violation(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                       shape_str(t.shape()));
  }
}

}  // namespace detail

Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// Named wrappers over apply_primitive.
inline Tensor add(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kAdd, {a, b}); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kSub, {a, b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kMul, {a, b}); }
inline Tensor scalar_mul(const Tensor& a, double c) {
  OpAttrs at;
  at.scalar = c;
  return apply_primitive(OpKind::kScalarMul, {a}, at);
}
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  OpAttrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return apply_primitive(OpKind::kMatmul, {a, b}, at);
}
inline Tensor concat_last_dim(const std::vector<Tensor>& parts) {
  return apply_primitive(OpKind::kConcatLastDim, parts);
}
inline Tensor slice_last_dim(const Tensor& a, std::size_t start, std::size_t length) {
  OpAttrs at;
  at.start = start;
  at.length = length;
  return apply_primitive(OpKind::kSlice, {a}, at);
}
inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> rows) {
  OpAttrs at;
  at.rows = std::move(rows);
  return apply_primitive(OpKind::kGatherRows, {a}, at);
}
inline Tensor relu(const Tensor& a) { return apply_primitive(OpKind::kRelu, {a}); }
inline Tensor softmax_last_dim(const Tensor& a) {
  return apply_primitive(OpKind::kSoftmaxLastDim, {a});
}
inline Tensor log(const Tensor& a) { return apply_primitive(OpKind::kLog, {a}); }
inline Tensor exp(const Tensor& a) { return apply_primitive(OpKind::kExp, {a}); }
inline Tensor mean_all(const Tensor& a) { return apply_primitive(OpKind::kMeanAll, {a}); }
inline Tensor sum_all(const Tensor& a) { return apply_primitive(OpKind::kSumAll, {a}); }
inline Tensor sum_axis(const Tensor& a, int axis) {
  OpAttrs at;
  at.axis = axis;
  return apply_primitive(OpKind::kSumAxis, {a}, at);
}
inline Tensor l2_norm_rows(const Tensor& a) { return apply_primitive(OpKind::kL2NormRows, {a}); }
inline Tensor layer_norm_stats(const Tensor& a, double eps = 1e-5) {
  OpAttrs at;
  at.eps = eps;
  return apply_primitive(OpKind::kLayerNormStats, {a}, at);
}
inline Tensor pairwise_euclidean(const Tensor& a, const Tensor& b) {
  return apply_primitive(OpKind::kPairwiseEuclidean, {a, b});
}
inline Tensor stop_gradient(const Tensor& a) {
  return apply_primitive(OpKind::kStopGradient, {a});
}
inline Tensor straight_through_combine(const Tensor& hard, const Tensor& soft) {
  return apply_primitive(OpKind::kStraightThroughCombine, {hard, soft});
}
inline Tensor reshape(const Tensor& a, Shape new_shape) {
  OpAttrs at;
  at.new_shape = std::move(new_shape);
  return apply_primitive(OpKind::kReshape, {a}, at);
}

// ---------------------------------------------------------------------------
// Implementation

inline Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  using namespace detail;

  Shape out_shape;
  std::vector<double> out;

  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      if (inputs.size() != 2) contract_violation("binary op needs 2 inputs");
      const Tensor &a = inputs[0], &b = inputs[1];
      const char* name = kind == OpKind::kAdd ? "add" : kind == OpKind::kSub ? "sub" : "mul";
      require_same_shape(a, b, name);
      out_shape = a.shape();
      out.resize(a.size());
      const auto &av = a.value(), &bv = b.value();
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = kind == OpKind::kAdd ? av[i] + bv[i]
                 : kind == OpKind::kSub ? av[i] - bv[i]
                                        : av[i] * bv[i];
      }
      break;
    }
    case OpKind::kScalarMul: {
      const Tensor& a = inputs[0];
      out_shape = a.shape();
      out.resize(a.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * attrs.scalar;
      break;
    }
    case OpKind::kMatmul: {
      const Tensor &a = inputs[0], &b = inputs[1];
      require_rank(a, 2, "matmul");
      require_rank(b, 2, "matmul");
      std::size_t n = attrs.trans_a ? a.dim(1) : a.dim(0);
      std::size_t k = attrs.trans_a ? a.dim(0) : a.dim(1);
      std::size_t kb = attrs.trans_b ? b.dim(1) : b.dim(0);
      std::size_t m = attrs.trans_b ? b.dim(0) : b.dim(1);
      if (k != kb) {
        contract_violation("matmul: inner dims disagree, " + shape_str(a.shape()) +
                           (attrs.trans_a ? "^T" : "") + " * " + shape_str(b.shape()) +
                           (attrs.trans_b ? "^T" : ""));
      }
      out_shape = {n, m};
      out.resize(n * m);
      ConstMap A(a.value().data(), static_cast<Eigen::Index>(a.dim(0)),
                 static_cast<Eigen::Index>(a.dim(1)));
      ConstMap B(b.value().data(), static_cast<Eigen::Index>(b.dim(0)),
                 static_cast<Eigen::Index>(b.dim(1)));
      MutMap C(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
      if (!attrs.trans_a && !attrs.trans_b) C.noalias() = A * B;
      else if (attrs.trans_a && !attrs.trans_b) C.noalias() = A.transpose() * B;
      else if (!attrs.trans_a && attrs.trans_b) C.noalias() = A * B.transpose();
      else C.noalias() = A.transpose() * B.transpose();
      break;
    }
    case OpKind::kConcatLastDim: {
      if (inputs.empty()) contract_violation("concat-last-dim: no inputs");
      const Shape& s0 = inputs[0].shape();
      if (s0.empty()) contract_violation("concat-last-dim: rank 0 input");
      std::size_t last_total = 0;
      for (const Tensor& t : inputs) {
        if (t.rank() != s0.size()) contract_violation("concat-last-dim: rank mismatch");
        for (std::size_t i = 0; i + 1 < s0.size(); ++i) {
          if (t.shape()[i] != s0[i]) {
            contract_violation("concat-last-dim: leading dims differ, " + shape_str(t.shape()) +
                               " vs " + shape_str(s0));
          }
        }
        last_total += t.shape().back();
      }
      out_shape = s0;
      out_shape.back() = last_total;
      std::size_t lead = shape_numel(out_shape) / last_total;
      out.resize(lead * last_total);
      std::size_t offset = 0;
      for (const Tensor& t : inputs) {
        std::size_t w = t.shape().back();
        for (std::size_t r = 0; r < lead; ++r) {
          std::copy_n(t.value().data() + r * w, w, out.data() + r * last_total + offset);
        }
        offset += w;
      }
      break;
    }
    case OpKind::kSlice: {
      const Tensor& a = inputs[0];
      if (a.rank() < 1) contract_violation("slice: rank 0 input");
      std::size_t last = a.shape().back();
      if (attrs.start + attrs.length > last || attrs.length == 0) {
        contract_violation("slice: range [" + std::to_string(attrs.start) + ", " +
                           std::to_string(attrs.start + attrs.length) + ") out of " +
                           std::to_string(last));
      }
      out_shape = a.shape();
      out_shape.back() = attrs.length;
      std::size_t lead = a.size() / last;
      out.resize(lead * attrs.length);
      for (std::size_t r = 0; r < lead; ++r) {
        std::copy_n(a.value().data() + r * last + attrs.start, attrs.length,
                    out.data() + r * attrs.length);
      }
      break;
    }
    case OpKind::kGatherRows: {
      const Tensor& a = inputs[0];
      if (a.rank() < 1) contract_violation("gather-rows: rank 0 input");
      std::size_t n = a.dim(0);
      std::size_t stride = a.size() / std::max<std::size_t>(n, 1);
      for (std::size_t r : attrs.rows) {
        if (r >= n) {
          contract_violation("gather-rows: index " + std::to_string(r) + " out of " +
                             std::to_string(n));
        }
      }
      out_shape = a.shape();
      out_shape[0] = attrs.rows.size();
      out.resize(attrs.rows.size() * stride);
      for (std::size_t i = 0; i < attrs.rows.size(); ++i) {
        std::copy_n(a.value().data() + attrs.rows[i] * stride, stride, out.data() + i * stride);
      }
      break;
    }
    case OpKind::kRelu: {
      const Tensor& a = inputs[0];
      out_shape = a.shape();
      out.resize(a.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
      break;
    }
    case OpKind::kSoftmaxLastDim: {
      const Tensor& a = inputs[0];
      if (a.rank() < 1 || a.shape().back() == 0) contract_violation("softmax on empty axis");
      std::size_t last = a.shape().back();
      std::size_t lead = a.size() / last;
      out_shape = a.shape();
      out.resize(a.size());
      for (std::size_t r = 0; r < lead; ++r) {
        const double* x = a.value().data() + r * last;
        double* y = out.data() + r * last;
        double mx = x[0];
        for (std::size_t j = 1; j < last; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < last; ++j) {
          y[j] = std::exp(x[j] - mx);
          z += y[j];
        }
        for (std::size_t j = 0; j < last; ++j) y[j] /= z;
      }
      break;
    }
    case OpKind::kLog: {
      const Tensor& a = inputs[0];
      out_shape = a.shape();
      out.resize(a.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.value()[i] <= 0.0) contract_violation("log: non-positive input");
        out[i] = std::log(a.value()[i]);
      }
      break;
    }
    case OpKind::kExp: {
      const Tensor& a = inputs[0];
      out_shape = a.shape();
      out.resize(a.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
      break;
    }
    case OpKind::kMeanAll:
    case OpKind::kSumAll: {
      const Tensor& a = inputs[0];
      out_shape = {1};
      double s = canonical_sum(a.value().data(), a.size());
      out = {kind == OpKind::kMeanAll ? s / static_cast<double>(a.size()) : s};
      break;
    }
    case OpKind::kSumAxis: {
      const Tensor& a = inputs[0];
      require_rank(a, 2, "sum-axis");
      if (attrs.axis != 0 && attrs.axis != 1) contract_violation("sum-axis: axis must be 0 or 1");
      std::size_t n = a.dim(0), m = a.dim(1);
      if (attrs.axis == 0) {
        out_shape = {m};
        out.assign(m, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) out[j] += a.value()[i * m + j];
      } else {
        out_shape = {n};
        out.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) out[i] += a.value()[i * m + j];
      }
      break;
    }
    case OpKind::kL2NormRows: {
      const Tensor& a = inputs[0];
      require_rank(a, 2, "l2-norm-rows");
      std::size_t n = a.dim(0), m = a.dim(1);
      out_shape = {n};
      out.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += a.value()[i * m + j] * a.value()[i * m + j];
        out[i] = std::sqrt(acc);
      }
      break;
    }
    case OpKind::kLayerNormStats: {
      const Tensor& a = inputs[0];
      require_rank(a, 2, "layer-norm-stats");
      std::size_t n = a.dim(0), m = a.dim(1);
      if (m == 0) contract_violation("layer-norm-stats: empty rows");
      out_shape = a.shape();
      out.resize(a.size());
      for (std::size_t i = 0; i < n; ++i) {
        const double* x = a.value().data() + i * m;
        double* y = out.data() + i * m;
        double mu = sequential_mean(x, m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(m);
        double inv = 1.0 / std::sqrt(var + attrs.eps);
        for (std::size_t j = 0; j < m; ++j) y[j] = (x[j] - mu) * inv;
      }
      break;
    }
    case OpKind::kPairwiseEuclidean: {
      const Tensor &a = inputs[0], &b = inputs[1];
      require_rank(a, 2, "pairwise-euclidean");
      require_rank(b, 2, "pairwise-euclidean");
      if (a.dim(1) != b.dim(1)) {
        contract_violation("pairwise-euclidean: column mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
      }
      out_shape = {a.dim(0), b.dim(0)};
      out.resize(a.dim(0) * b.dim(0));
      pairwise_distances(a.value().data(), a.dim(0), b.value().data(), b.dim(0), a.dim(1),
                         out.data());
      break;
    }
    case OpKind::kStopGradient: {
      const Tensor& a = inputs[0];
      return Tensor::from_data(a.shape(), a.value(), false);
    }
    case OpKind::kStraightThroughCombine: {
      const Tensor &hard = inputs[0], &soft = inputs[1];
      require_same_shape(hard, soft, "straight-through-combine");
      out_shape = hard.shape();
      out = hard.value();  // forward value is the hard argument, bitwise
      break;
    }
    case OpKind::kReshape: {
      const Tensor& a = inputs[0];
      if (shape_numel(attrs.new_shape) != a.size()) {
        contract_violation("reshape: " + shape_str(a.shape()) + " to " +
                           shape_str(attrs.new_shape));
      }
      out_shape = attrs.new_shape;
      out = a.value();
      break;
    }
  }

  bool needs_grad = false;
  if (kind != OpKind::kStopGradient) {
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (kind == OpKind::kStraightThroughCombine) needs_grad = inputs[1].requires_grad();

  Tensor result = Tensor::from_data(std::move(out_shape), std::move(out), needs_grad);

  Tape* tape = active_tape();
  if (!needs_grad || tape == nullptr) return result;

  // Record the node. Inputs that do not carry gradients keep id -1.
  std::vector<std::int64_t> ids(inputs.size(), -1);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (kind == OpKind::kStraightThroughCombine && i == 0) continue;  // value path only
    if (inputs[i].requires_grad()) ids[i] = ensure_node(*tape, inputs[i]);
  }

  Tape::Node node;
  node.inputs = ids;
  node.out_size = result.size();

  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub: {
      bool is_sub = kind == OpKind::kSub;
      node.backprop = [ids, is_sub](Tape& t, const std::vector<double>& gout) {
        if (ids[0] >= 0) {
          auto& g = t.grad_buffer(ids[0]);
          for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
        }
        if (ids[1] >= 0) {
          auto& g = t.grad_buffer(ids[1]);
          for (std::size_t i = 0; i < gout.size(); ++i) g[i] += is_sub ? -gout[i] : gout[i];
        }
      };
      break;
    }
    case OpKind::kMul: {
      auto a = inputs[0].data();
      auto b = inputs[1].data();
      node.backprop = [ids, a, b](Tape& t, const std::vector<double>& gout) {
        if (ids[0] >= 0) {
          auto& g = t.grad_buffer(ids[0]);
          for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * b->value[i];
        }
        if (ids[1] >= 0) {
          auto& g = t.grad_buffer(ids[1]);
          for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * a->value[i];
        }
      };
      break;
    }
    case OpKind::kScalarMul: {
      double c = attrs.scalar;
      node.backprop = [ids, c](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * c;
      };
      break;
    }
    case OpKind::kMatmul: {
      auto a = inputs[0].data();
      auto b = inputs[1].data();
      bool ta = attrs.trans_a, tb = attrs.trans_b;
      std::size_t n = ta ? a->shape[1] : a->shape[0];
      std::size_t m = tb ? b->shape[0] : b->shape[1];
      node.backprop = [ids, a, b, ta, tb, n, m](Tape& t, const std::vector<double>& gout) {
        ConstMap A(a->value.data(), static_cast<Eigen::Index>(a->shape[0]),
                   static_cast<Eigen::Index>(a->shape[1]));
        ConstMap B(b->value.data(), static_cast<Eigen::Index>(b->shape[0]),
                   static_cast<Eigen::Index>(b->shape[1]));
        ConstMap G(gout.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
        if (ids[0] >= 0) {
          MutMap GA(t.grad_buffer(ids[0]).data(), static_cast<Eigen::Index>(a->shape[0]),
                    static_cast<Eigen::Index>(a->shape[1]));
          // dA' = G * B'^T, then undo the a-transpose.
          if (!ta && !tb) GA.noalias() += G * B.transpose();
          else if (!ta && tb) GA.noalias() += G * B;
          else if (ta && !tb) GA.noalias() += B * G.transpose();
          else GA.noalias() += B.transpose() * G.transpose();
        }
        if (ids[1] >= 0) {
          MutMap GB(t.grad_buffer(ids[1]).data(), static_cast<Eigen::Index>(b->shape[0]),
                    static_cast<Eigen::Index>(b->shape[1]));
          if (!ta && !tb) GB.noalias() += A.transpose() * G;
          else if (!ta && tb) GB.noalias() += G.transpose() * A;
          else if (ta && !tb) GB.noalias() += A * G;
          else GB.noalias() += G.transpose() * A.transpose();
        }
      };
      break;
    }
    case OpKind::kConcatLastDim: {
      std::vector<std::size_t> widths;
      widths.reserve(inputs.size());
      for (const Tensor& t : inputs) widths.push_back(t.shape().back());
      std::size_t total = result.shape().back();
      std::size_t lead = result.size() / total;
      node.backprop = [ids, widths, total, lead](Tape& t, const std::vector<double>& gout) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (ids[p] >= 0) {
            auto& g = t.grad_buffer(ids[p]);
            for (std::size_t r = 0; r < lead; ++r)
              for (std::size_t j = 0; j < widths[p]; ++j)
                g[r * widths[p] + j] += gout[r * total + offset + j];
          }
          offset += widths[p];
        }
      };
      break;
    }
    case OpKind::kSlice: {
      std::size_t last = inputs[0].shape().back();
      std::size_t lead = inputs[0].size() / last;
      std::size_t start = attrs.start, length = attrs.length;
      node.backprop = [ids, last, lead, start, length](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t r = 0; r < lead; ++r)
          for (std::size_t j = 0; j < length; ++j)
            g[r * last + start + j] += gout[r * length + j];
      };
      break;
    }
    case OpKind::kGatherRows: {
      std::size_t stride = inputs[0].size() / inputs[0].dim(0);
      auto rows = attrs.rows;
      node.backprop = [ids, rows, stride](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < stride; ++j)
            g[rows[i] * stride + j] += gout[i * stride + j];
      };
      break;
    }
    case OpKind::kRelu: {
      auto a = inputs[0].data();
      node.backprop = [ids, a](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < gout.size(); ++i)
          if (a->value[i] > 0.0) g[i] += gout[i];
      };
      break;
    }
    case OpKind::kSoftmaxLastDim: {
      auto y = result.data();
      std::size_t last = result.shape().back();
      node.backprop = [ids, y, last](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        std::size_t lead = y->value.size() / last;
        for (std::size_t r = 0; r < lead; ++r) {
          const double* yr = y->value.data() + r * last;
          const double* gr = gout.data() + r * last;
          double dot = 0.0;
          for (std::size_t j = 0; j < last; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < last; ++j) g[r * last + j] += yr[j] * (gr[j] - dot);
        }
      };
      break;
    }
    case OpKind::kLog: {
      auto a = inputs[0].data();
      node.backprop = [ids, a](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] / a->value[i];
      };
      break;
    }
    case OpKind::kExp: {
      auto y = result.data();
      node.backprop = [ids, y](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * y->value[i];
      };
      break;
    }
    case OpKind::kMeanAll:
    case OpKind::kSumAll: {
      std::size_t n = inputs[0].size();
      double scale = kind == OpKind::kMeanAll ? 1.0 / static_cast<double>(n) : 1.0;
      node.backprop = [ids, n, scale](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < n; ++i) g[i] += gout[0] * scale;
      };
      break;
    }
    case OpKind::kSumAxis: {
      std::size_t n = inputs[0].dim(0), m = inputs[0].dim(1);
      int axis = attrs.axis;
      node.backprop = [ids, n, m, axis](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) g[i * m + j] += gout[axis == 0 ? j : i];
      };
      break;
    }
    case OpKind::kL2NormRows: {
      auto a = inputs[0].data();
      auto y = result.data();
      std::size_t m = inputs[0].dim(1);
      node.backprop = [ids, a, y, m](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < y->value.size(); ++i) {
          double norm = y->value[i];
          if (norm == 0.0) continue;  // subgradient 0 at the origin
          for (std::size_t j = 0; j < m; ++j)
            g[i * m + j] += gout[i] * a->value[i * m + j] / norm;
        }
      };
      break;
    }
    case OpKind::kLayerNormStats: {
      auto a = inputs[0].data();
      auto y = result.data();
      std::size_t m = inputs[0].dim(1);
      double eps = attrs.eps;
      node.backprop = [ids, a, y, m, eps](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        std::size_t n = a->value.size() / m;
        for (std::size_t i = 0; i < n; ++i) {
          const double* x = a->value.data() + i * m;
          const double* yr = y->value.data() + i * m;
          const double* gr = gout.data() + i * m;
          double mu = detail::sequential_mean(x, m);
          double var = 0.0;
          for (std::size_t j = 0; j < m; ++j) var += (x[j] - mu) * (x[j] - mu);
          var /= static_cast<double>(m);
          double inv = 1.0 / std::sqrt(var + eps);
          double gmean = detail::sequential_mean(gr, m);
          double gydot = 0.0;
          for (std::size_t j = 0; j < m; ++j) gydot += gr[j] * yr[j];
          gydot /= static_cast<double>(m);
          for (std::size_t j = 0; j < m; ++j)
            g[i * m + j] += inv * (gr[j] - gmean - yr[j] * gydot);
        }
      };
      break;
    }
    case OpKind::kPairwiseEuclidean: {
      auto a = inputs[0].data();
      auto b = inputs[1].data();
      auto dist = result.data();
      std::size_t d = inputs[0].dim(1);
      node.backprop = [ids, a, b, dist, d](Tape& t, const std::vector<double>& gout) {
        std::size_t n = a->shape[0], m = b->shape[0];
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            double dij = dist->value[i * m + j];
            if (dij == 0.0) continue;  // subgradient 0 at coincident points
            double w = gout[i * m + j] / dij;
            if (w == 0.0) continue;
            for (std::size_t k = 0; k < d; ++k) {
              double diff = a->value[i * d + k] - b->value[j * d + k];
              if (ids[0] >= 0) t.grad_buffer(ids[0])[i * d + k] += w * diff;
              if (ids[1] >= 0) t.grad_buffer(ids[1])[j * d + k] -= w * diff;
            }
          }
        }
      };
      break;
    }
    case OpKind::kStraightThroughCombine: {
      // Value is the hard argument; the gradient flows wholly to the soft one.
      node.backprop = [ids](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[1]);
        for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
      };
      break;
    }
    case OpKind::kReshape: {
      node.backprop = [ids](Tape& t, const std::vector<double>& gout) {
        auto& g = t.grad_buffer(ids[0]);
        for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
      };
      break;
    }
    case OpKind::kStopGradient:
      break;  // unreachable, returned above
  }

  std::int64_t id = tape->add_node(std::move(node));
  result.data()->node = id;
  result.data()->tape_epoch = tape->epoch();
  return result;
}

// Runs reverse-mode accumulation from a scalar loss over the active tape.
// Populates .grad on every requires_grad leaf reachable from the loss;
// leaves off the path keep zero grads.
inline void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw std::logic_error("backward: no active tape");
  if (tape->consumed()) throw std::logic_error("backward: tape already consumed");
  if (loss.size() != 1) {
    contract_violation("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  const TensorData& d = *loss.data();
  if (d.node < 0 || d.tape_epoch != tape->epoch()) {
    throw std::logic_error("backward: loss was not recorded on the active tape");
  }

  tape->grad_buffer(d.node)[0] = 1.0;
  for (std::int64_t id = d.node; id >= 0; --id) {
    Tape::Node& node = tape->node(id);
    if (node.grad.empty()) continue;
    if (node.backprop) node.backprop(*tape, node.grad);
  }
  // Fold leaf-node gradients back into their tensors.
  for (std::size_t i = 0; i < tape->node_count(); ++i) {
    Tape::Node& node = tape->node(static_cast<std::int64_t>(i));
    if (node.leaf && !node.grad.empty()) {
      auto& g = node.leaf->grad;
      if (g.empty()) g.assign(node.leaf->value.size(), 0.0);
      for (std::size_t j = 0; j < node.grad.size(); ++j) g[j] += node.grad[j];
    }
  }
  tape->mark_consumed();
}

}  // namespace ptrag
