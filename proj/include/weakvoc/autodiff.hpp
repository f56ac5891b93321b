#ifndef WEAKVOC_AUTODIFF_HPP
#define WEAKVOC_AUTODIFF_HPP

#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

#include "weakvoc/box.hpp"
#include "weakvoc/tensor.hpp"

namespace weakvoc::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(int axis) const { return value().dim(axis); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records operations in execution order and replays them in reverse.
///
/// Nodes are only given a backward rule when at least one input requires a
/// gradient, so a tape with no trainable leaves doubles as an inference
/// context. A tape is single-threaded; use one per concurrent forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  /// Mutable gradient buffer of `v`, zero-filled on first access.
  Tensor& grad_buffer(Var v);

  /// Reverse sweep from a scalar loss. Every requires_grad leaf ends with a
  /// gradient of its own shape, zero when it does not reach the loss.
  void backward(Var loss);
  /// Gradient after backward(); zeros when none was accumulated.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };
  const Node& node(Var v) const;
  Node& node(Var v);

  std::deque<Node> nodes_;
};

// Elementwise arithmetic on equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }

/// x (n×m) + b (m) broadcast over rows.
Var add_rowwise(Var x, Var b);

Var relu(Var x);
Var sigmoid(Var x);
Var abs(Var x);

Var matmul(Var a, Var b);
Var transpose(Var a);

/// Softmax along `axis` of a rank-1 or rank-2 array.
Var softmax(Var x, int axis);
Var sum(Var x);
/// Sum of a rank-2 array along `axis`, dropping it.
Var sum(Var x, int axis);
Var mean(Var x);

Var reshape(Var x, Shape shape);
/// Concatenates along axis 0; trailing extents must agree.
Var concat(std::span<const Var> parts);
/// Rows [begin, end) along axis 0.
Var slice(Var x, Index begin, Index end);
Var gather_rows(Var x, std::span<const Index> rows);
Var gather_cols(Var x, std::span<const Index> cols);

/// Row-wise x / max(‖x‖, eps) for rank-2 input, whole-vector for rank-1.
Var l2_normalize(Var x, double eps = 1e-12);

/// Σ w·[max(s,0) − s·t + log(1 + e^{−|s|})] over all entries; targets in {0,1}.
/// `weights` (same shape, optional) masks or reweights individual entries.
Var bce_with_logits(Var logits, const Tensor& targets, const Tensor* weights = nullptr);

/// Cross-correlation with zero padding. x: C×H×W or N×C×H×W, w: O×C×kh×kw,
/// bias: O (may be an invalid Var). Output keeps x's rank.
Var conv2d(Var x, Var w, Var bias, int stride, int pad);

/// Bilinear RoI pooling: P×P samples at cell centres of each box, mapped to
/// feature coordinates by `spatial_scale` (half-pixel aligned, clamped to the
/// map). featmap C×H×W; output n×C×P×P.
Var roi_align(Var featmap, std::span<const Box> boxes, int grid, double spatial_scale);
/// Single-box form, output C×P×P.
Var roi_pool_bilinear(Var featmap, const Box& box, int grid, double spatial_scale = 1.0);

/// Index of the largest entry, ties to the lowest index. Not differentiable.
Index argmax(const Eigen::Ref<const Eigen::VectorXd>& v);

}  // namespace weakvoc::ad

#endif  // WEAKVOC_AUTODIFF_HPP
