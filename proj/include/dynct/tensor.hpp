#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a handle to a shared value node. Operations eagerly compute
// values; when gradient recording is enabled and any input requires
// gradients, the op pushes a pullback closure onto the active Tape.
// Tape::backward replays the pullbacks in reverse, accumulating adjoints in
// a per-call map and finally adding leaf adjoints into the persistent
// Node::grad buffers (so repeated backward calls accumulate).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynct/util.hpp"

namespace dynct::ad {

struct Node {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // leaf gradient accumulator, lazily sized
  bool requires_grad = false;
  bool leaf = true;  // created directly rather than as an op output
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value,
                     bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  double value() const;  // single-element convenience
  double at(size_t i) const { return node_->values[i]; }

  // In-place access to a leaf's values (optimizer updates). Mutating an op
  // output would silently desynchronize recorded pullbacks, so only leaves
  // may be touched.
  std::span<double> values_mut();

  bool requires_grad() const { return !frozen_ && node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  std::span<const double> grad() const;
  void zero_grad();

  // Same storage, but reports requires_grad() == false: ops treat this
  // handle as a constant, so no gradient flows into the underlying node.
  Tensor frozen() const;

  // Deep copy of the values as a non-differentiable leaf.
  Tensor detached() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
  bool frozen_ = false;
};

// Per-backward adjoint storage keyed by node identity.
class AdjointStore {
 public:
  // Adjoint buffer for a node, created zero-filled on first access.
  std::vector<double>& at(const Node* n, size_t size);
  const std::vector<double>* find(const Node* n) const;
  const std::unordered_map<const Node*, std::vector<double>>& all() const {
    return map_;
  }

 private:
  std::unordered_map<const Node*, std::vector<double>> map_;
};

// Pullback: given the adjoint of the op output, scatter adjoints into the
// op inputs. Closures capture their input tensors by value (keeping nodes
// alive for the lifetime of the tape entry).
using Pullback = std::function<void(const std::vector<double>& out_adj,
                                    AdjointStore& adj)>;

class Tape {
 public:
  // Process-wide active tape (the engine is single-threaded).
  static Tape& active();

  void record(std::shared_ptr<Node> out, Pullback pull);
  void backward(const Tensor& root);

  size_t size() const { return entries_.size(); }
  void truncate(size_t mark);
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<Node> out;
    Pullback pull;
  };
  std::vector<Entry> entries_;
};

// Global gradient-recording switch with RAII disabling.
struct GradMode {
  static bool enabled();
  static void set(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- ops -------------------------------------------------------------
// Elementwise ops require identical shapes; matmul/linear validate inner
// extents. Shape mismatches throw ContractViolation naming the op.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
// max(x, slope*x) for slope in [0,1); keeps a gradient path through
// inactive units.
Tensor leaky_relu(const Tensor& a, double slope);
Tensor abs(const Tensor& a);  // subgradient 0 at 0
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
// Elementwise clamp to [lo, hi]; zero gradient where saturated.
Tensor clamp(const Tensor& a, double lo, double hi);
// sqrt(re^2 + im^2) elementwise; gradient defined as 0 where the modulus
// vanishes.
Tensor complex_abs(const Tensor& re, const Tensor& im);

// [n,k] x [k,m] -> [n,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// x:[n,in], w:[out,in], b:[out] -> [n,out]  (y = x w^T + b)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
// [n,m] -> [n,1]
Tensor row_sum(const Tensor& a);
// [rows*width, c] -> [rows, c]: sums each contiguous group of `width` rows.
Tensor segment_sum(const Tensor& a, int rows, int width);
// Column-wise concatenation of same-row-count 2-D tensors.
Tensor concat_cols(const std::vector<Tensor>& parts);
// Columns [c0, c1) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, int c0, int c1);

// Generic custom-op helper: builds the output node, and when recording is
// active registers `pull`. `track` lists the input handles that determine
// whether the result participates in differentiation.
Tensor make_op(std::vector<int> shape, std::vector<double> values,
               const std::vector<Tensor>& track, Pullback pull);

bool all_finite(std::span<const double> v);

}  // namespace dynct::ad
