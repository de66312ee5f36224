#pragma once

#include <functional>
#include <span>
#include <vector>

#include "protopart/errors.hpp"

namespace protopart {

// Row-major extents. A scalar is represented as shape {1}.
using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);

class Tape;

// Dense double-precision tensor. When `tape` is non-null the tensor is a
// node on that tape and participates in reverse-mode differentiation; its
// gradient lives in the tape and is reachable through grad(). A tracked
// tensor must not outlive its tape.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);

  std::size_t size() const { return values.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int axis) const;
  bool tracked() const { return tape != nullptr; }

  // Value of a size-1 tensor.
  double scalar() const;

  // Gradient accumulated by the owning tape's backward pass. Same shape as
  // values. Throws ArgumentError when the tensor is untracked.
  const std::vector<double>& grad() const;
};

// Records operations in topological order (parents always precede their
// children) and replays them backwards exactly once per node. A tape is
// confined to one thread; reset() frees all nodes and invalidates every
// tensor previously bound to the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf: returns a copy of `t` bound to this tape whose
  // gradient is available after backward().
  Tensor watch(const Tensor& t);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Rejects a
  // non-scalar loss, a loss from another tape, and a second call without
  // reset().
  void backward(const Tensor& loss);

  const std::vector<double>& grad(const Tensor& t) const;

  void reset();

  std::size_t node_count() const { return nodes_.size(); }
  bool backward_run() const { return backward_run_; }

  // Recording interface used by the op implementations. `backprop`
  // receives the tape and the node's own id; it reads upstream(id) and
  // accumulates into grad_buffer(parent). Parent id -1 marks an untracked
  // input and is skipped by convention.
  int record(std::size_t out_size, std::vector<int> parents,
             std::function<void(Tape&, int)> backprop);
  const std::vector<double>& upstream(int node) const { return grads_[node]; }
  std::vector<double>& grad_buffer(int node) { return grads_[node]; }

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void(Tape&, int)> backprop;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool backward_run_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Each op computes its output from the input
// values; when any input is tracked the op is recorded on that input's tape
// (all tracked inputs must share one tape) and gradients flow to every
// tracked input on backward().
// ---------------------------------------------------------------------------

// input H x W x Cin, filters Kh x Kw x Cin x Cout, zero padding.
// Output extent: floor((H + 2*padding - Kh)/stride) + 1, same for width.
Tensor conv2d(const Tensor& input, const Tensor& filters, int stride,
              int padding);

enum class Elementwise { kRelu, kSigmoid };

Tensor elementwise(const Tensor& input, Elementwise kind);

// Window max pooling over H x W x C, window k, given stride. Gradient
// routes to the argmax element; ties break to the first element in
// row-major order.
Tensor max_pool_window(const Tensor& input, int window, int stride);

// Global max pooling to 1 x 1 x C.
Tensor max_pool_global(const Tensor& input);

// input length m, weights K x m, no bias. Output length K.
Tensor linear(const Tensor& input, const Tensor& weights);

// -log(softmax(logits)[label]) with max-subtraction stabilization.
Tensor softmax_cross_entropy(const Tensor& logits, int label);

// z H x W x D, p H1 x W1 x D. Output (H-H1+1) x (W-W1+1); entry (r, c) is
// the squared L2 distance between p and the window of z anchored at (r, c),
// accumulated as a direct per-patch sum so an exact-match window yields
// exactly zero.
Tensor l2_distance_map(const Tensor& z, const Tensor& p);

// Second algebraic route for the same map: |window|^2 - 2<window, p> + |p|^2
// via separate accumulation passes. Values only (never recorded on a tape);
// agrees with l2_distance_map within 1e-8 on bounded inputs.
std::vector<double> l2_distance_map_expanded(const Tensor& z, const Tensor& p);

// Minimum over every element; gradient routes to the argmin (first in
// row-major order on ties). Output shape {1}.
Tensor reduce_min_global(const Tensor& t);

// Minimum over vec[indices] for a rank-1 vec; ties break to the earliest
// listed index. Output shape {1}.
Tensor min_over(const Tensor& vec, std::span<const int> indices);

// Gathers size-1 tensors into a rank-1 tensor of length parts.size().
Tensor concat_scalars(std::span<const Tensor> parts);

// Elementwise log((v + 1)/(v + eps)); defined for v >= 0, 0 < eps < 1.
// This is the prototype similarity transform applied to squared distances.
Tensor log_distance_ratio(const Tensor& d2, double eps);

// Scalar sum(coeffs[i] * terms[i]) over size-1 tensors.
Tensor weighted_sum(std::span<const Tensor> terms,
                    std::span<const double> coeffs);

// Same values under a new shape of equal size; gradient passes through
// unchanged.
Tensor reshape(const Tensor& t, Shape s);

// Reshape to rank-1.
Tensor flatten(const Tensor& t);

// Central-difference gradient of a tensor-to-scalar function:
// (fn(x + h e_i) - fn(x - h e_i)) / (2h) per coordinate. fn is evaluated on
// untracked copies. The test-side oracle for backward().
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn,
                        const Tensor& at, double step);

}  // namespace protopart
