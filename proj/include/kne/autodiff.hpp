#pragma once

#include <functional>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "kne/common.hpp"

namespace kne {

class Tape;

// Dense row-major tensor of 64-bit floats. Immutable once constructed;
// copies share the underlying buffer. A tensor is "tracked" when it was
// produced on (or registered as a leaf of) a Tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<long> shape, std::vector<double> data);

  static Tensor zeros(std::vector<long> shape);
  static Tensor full(std::vector<long> shape, double value);
  static Tensor scalar(double value);  // shape {1}

  const std::vector<long>& shape() const { return shape_; }
  long ndim() const { return static_cast<long>(shape_.size()); }
  long numel() const;
  long rows() const;  // dim 0 (1 for scalars)
  long cols() const;  // last dim
  const double* data() const { return data_->data(); }
  const std::vector<double>& vec() const { return *data_; }
  double at(long i) const { return (*data_)[i]; }
  double at(long r, long c) const { return (*data_)[r * cols() + c]; }
  double scalar_value() const;

  bool tracked() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  long node() const { return node_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  uint64_t content_hash() const;

 private:
  friend class Tape;
  std::vector<long> shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  long node_ = -1;
};

// Per-backward-call gradient buffers, indexed by tape node id.
// Allocated lazily; absent buffer means zero gradient.
class GradientStore {
 public:
  explicit GradientStore(size_t n_nodes) : bufs_(n_nodes) {}
  std::vector<double>& acc(long node, long numel);
  const std::vector<double>* get(long node) const;
  std::vector<double>* take(long node);  // buffer may be moved from afterwards

 private:
  std::vector<std::unique_ptr<std::vector<double>>> bufs_;
};

// Result of a backward pass: gradients for every leaf reachable from the
// output, in the leaf's shape. Unreachable leaves map to zeros.
class GradientMap {
 public:
  Tensor grad(const Tensor& leaf) const;
  bool reachable(const Tensor& leaf) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::shared_ptr<std::map<long, Tensor>> grads_;
};

// Append-only record of primitive applications. Nodes are stored in
// topological order by construction (an op can only consume tensors that
// already exist). Backward walks the list once, in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a differentiable input and returns the tracked handle.
  Tensor leaf(const Tensor& value);

  // Records a primitive application. Called by op implementations.
  Tensor record(const char* op, std::vector<long> shape, std::vector<double> data,
                std::function<void(const std::vector<double>&, GradientStore&)> backprop);

  size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar output. Pure: leaves the tape and all
  // forward values untouched, so it can be called repeatedly with different
  // outputs of the same graph.
  GradientMap backward(const Tensor& output) const;

 private:
  struct Node {
    const char* op;
    long numel;
    bool is_leaf;
    std::function<void(const std::vector<double>&, GradientStore&)> backprop;
  };
  std::vector<Node> nodes_;
};

GradientMap backward(const Tape& tape, const Tensor& output);

// ---- Primitives ------------------------------------------------------
// Every op works on tracked or untracked inputs; the result is recorded on
// the inputs' tape iff at least one input is tracked.

Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                      // 2-D
Tensor add(const Tensor& a, const Tensor& b);           // same shape, or b = row vector
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise, same shape
Tensor scale(const Tensor& a, double s);
Tensor softmax(const Tensor& a);                        // last axis
Tensor log(const Tensor& a);                            // domain error on x <= 0
Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor rms_normalize(const Tensor& x, const Tensor& gain);  // rows of x, eps 1e-6
Tensor rows(const Tensor& table, const std::vector<int>& ids);  // row gather
Tensor row_scatter(const Tensor& src, const std::vector<long>& ids, long n_rows);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, long start, long len);
Tensor reduce_sum(const Tensor& a);                     // -> scalar
// Sum of -log softmax(logits[pos])[id] over the listed (position, token) pairs.
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<std::pair<long, int>>& targets);

// ---- Gradient checking ------------------------------------------------
// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12),
// with central differences of the given step. NaN anywhere propagates into
// the returned value.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& point, double step);

}  // namespace kne
