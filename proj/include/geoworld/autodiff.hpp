#pragma once

// Define-by-run reverse-mode differentiation over the small operator set the
// transformer needs. Values are dense row-per-token matrices.

#include <Eigen/Core>
#include <functional>
#include <string_view>
#include <vector>

namespace geoworld::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Attention runs independently inside each group: queries in group g attend
/// only to keys in group g.
struct AttentionGroups {
  std::vector<std::vector<int>> queries;
  std::vector<std::vector<int>> keys;

  static AttentionGroups full(int num_queries, int num_keys);
  /// Tokens laid out frame-major (row = frame * per_frame + patch).
  static AttentionGroups spatial(int frames, int per_frame);
  static AttentionGroups temporal(int frames, int per_frame);
};

class Tape {
 public:
  /// With record = false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Differentiable leaf.
  Var leaf(Matrix value);

  /// Seeds d(loss) = 1 for a 1x1 `loss` and propagates to every node.
  void backward(Var loss);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  /// Zero-size when nothing flowed into `v`. After backward only leaves keep their gradient.
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string_view> op_names() const;

  // Used by the operator implementations.
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  Var push(std::string_view op, Matrix value, bool needs_grad, std::function<void(Tape&, const Matrix&)> backward);
  void accumulate(Var v, const Matrix& g);

 private:
  struct Node {
    std::string_view op;
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&, const Matrix&)> backward;
  };
  std::vector<Node> nodes_;
  bool record_;
};

// -- operators ----------------------------------------------------------------

Var matmul(Var a, Var b);
/// x W + b with b a 1 x out row broadcast over rows.
Var linear(Var x, Var W, Var b);
Var add(Var a, Var b);
Var scale(Var a, double s);
/// x plus a 1 x C row broadcast over rows.
Var add_row(Var x, Var row);
/// x scaled column-wise by a 1 x C row.
Var mul_row(Var x, Var row);
/// x * (1 + scale) + shift with 1 x C rows broadcast.
Var modulate(Var x, Var shift, Var scale);
/// Per-row normalization to zero mean, unit variance (no affine).
Var layer_norm(Var x, double eps = 1e-6);
Var silu(Var x);
/// Multi-head scaled dot-product attention, q: Lq x D, k and v: Lk x D.
Var attention(Var q, Var k, Var v, int heads, const AttentionGroups& groups);
/// Identity forward, zero gradient.
Var detach(Var x);
/// Mean of (pred - target)^2 over all elements, as a 1 x 1 value.
Var mse(Var pred, const Matrix& target);
/// Stacks `times` copies of x vertically.
Var tile_rows(Var x, int times);
Var slice_cols(Var x, int start, int count);
Var row(Var x, int index);

}  // namespace geoworld::ad
