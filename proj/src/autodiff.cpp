#include "geoworld/autodiff.hpp"

#include <cmath>

#include "geoworld/error.hpp"

namespace geoworld::ad {

const Matrix& Var::value() const { return tape->value(*this); }

AttentionGroups AttentionGroups::full(int num_queries, int num_keys) {
  AttentionGroups g;
  g.queries.emplace_back(num_queries);
  g.keys.emplace_back(num_keys);
  for (int i = 0; i < num_queries; ++i) g.queries[0][static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < num_keys; ++i) g.keys[0][static_cast<std::size_t>(i)] = i;
  return g;
}

AttentionGroups AttentionGroups::spatial(int frames, int per_frame) {
  AttentionGroups g;
  for (int f = 0; f < frames; ++f) {
    std::vector<int> rows(static_cast<std::size_t>(per_frame));
    for (int p = 0; p < per_frame; ++p) rows[static_cast<std::size_t>(p)] = f * per_frame + p;
    g.queries.push_back(rows);
    g.keys.push_back(std::move(rows));
  }
  return g;
}

AttentionGroups AttentionGroups::temporal(int frames, int per_frame) {
  AttentionGroups g;
  for (int p = 0; p < per_frame; ++p) {
    std::vector<int> rows(static_cast<std::size_t>(frames));
    for (int f = 0; f < frames; ++f) rows[static_cast<std::size_t>(f)] = f * per_frame + p;
    g.queries.push_back(rows);
    g.keys.push_back(std::move(rows));
  }
  return g;
}

Var Tape::constant(Matrix value) { return push("const", std::move(value), false, nullptr); }

Var Tape::leaf(Matrix value) { return push("leaf", std::move(value), true, nullptr); }

Var Tape::push(std::string_view op, Matrix value, bool needs_grad,
               std::function<void(Tape&, const Matrix&)> backward) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.needs_grad = needs_grad && record_;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) n.grad = g;
  else n.grad += g;
}

void Tape::backward(Var loss) {
  if (!record_) throw InvalidInputError("backward on a non-recording tape");
  if (value(loss).size() != 1) throw InvalidInputError("backward needs a scalar loss");
  accumulate(loss, Matrix::Ones(1, 1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    // Interior gradients are consumed here; only leaf gradients stay readable.
    const Matrix g = std::move(n.grad);
    n.grad = Matrix();
    n.backward(*this, g);
  }
}

std::vector<std::string_view> Tape::op_names() const {
  std::vector<std::string_view> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.op);
  return names;
}

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw InvalidInputError("operands live on different tapes");
}

void require(bool ok, const char* what) {
  if (!ok) throw InvalidInputError(what);
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape& T = *a.tape;
  return T.push("matmul", a.value() * b.value(), T.needs_grad(a) || T.needs_grad(b),
                [a, b](Tape& t, const Matrix& g) {
                  if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
                  if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
                });
}

Var linear(Var x, Var W, Var b) {
  check_same_tape(x, W);
  check_same_tape(x, b);
  require(x.cols() == W.rows(), "linear: input width differs from weight rows");
  require(b.rows() == 1 && b.cols() == W.cols(), "linear: bias must be 1 x out");
  Tape& T = *x.tape;
  Matrix y = x.value() * W.value();
  y.rowwise() += b.value().row(0);
  return T.push("linear", std::move(y), T.needs_grad(x) || T.needs_grad(W) || T.needs_grad(b),
                [x, W, b](Tape& t, const Matrix& g) {
                  if (t.needs_grad(x)) t.accumulate(x, g * t.value(W).transpose());
                  if (t.needs_grad(W)) t.accumulate(W, t.value(x).transpose() * g);
                  if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
                });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Tape& T = *a.tape;
  return T.push("add", a.value() + b.value(), T.needs_grad(a) || T.needs_grad(b),
                [a, b](Tape& t, const Matrix& g) {
                  t.accumulate(a, g);
                  t.accumulate(b, g);
                });
}

Var scale(Var a, double s) {
  Tape& T = *a.tape;
  return T.push("scale", s * a.value(), T.needs_grad(a), [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

Var add_row(Var x, Var r) {
  check_same_tape(x, r);
  require(r.rows() == 1 && r.cols() == x.cols(), "add_row: row must be 1 x C");
  Tape& T = *x.tape;
  Matrix y = x.value();
  y.rowwise() += r.value().row(0);
  return T.push("add_row", std::move(y), T.needs_grad(x) || T.needs_grad(r), [x, r](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    if (t.needs_grad(r)) t.accumulate(r, g.colwise().sum());
  });
}

Var mul_row(Var x, Var r) {
  check_same_tape(x, r);
  require(r.rows() == 1 && r.cols() == x.cols(), "mul_row: row must be 1 x C");
  Tape& T = *x.tape;
  Matrix y = x.value().array().rowwise() * r.value().row(0).array();
  return T.push("mul_row", std::move(y), T.needs_grad(x) || T.needs_grad(r), [x, r](Tape& t, const Matrix& g) {
    if (t.needs_grad(x)) t.accumulate(x, (g.array().rowwise() * t.value(r).row(0).array()).matrix());
    if (t.needs_grad(r)) t.accumulate(r, (g.array() * t.value(x).array()).matrix().colwise().sum());
  });
}

Var modulate(Var x, Var shift, Var scl) {
  check_same_tape(x, shift);
  check_same_tape(x, scl);
  require(shift.rows() == 1 && scl.rows() == 1 && shift.cols() == x.cols() && scl.cols() == x.cols(),
          "modulate: shift/scale must be 1 x C");
  Tape& T = *x.tape;
  const Eigen::RowVectorXd gain = scl.value().row(0).array() + 1.0;
  Matrix y = x.value().array().rowwise() * gain.array();
  y.rowwise() += shift.value().row(0);
  return T.push("modulate", std::move(y), T.needs_grad(x) || T.needs_grad(shift) || T.needs_grad(scl),
                [x, shift, scl, gain](Tape& t, const Matrix& g) {
                  if (t.needs_grad(x)) t.accumulate(x, (g.array().rowwise() * gain.array()).matrix());
                  if (t.needs_grad(shift)) t.accumulate(shift, g.colwise().sum());
                  if (t.needs_grad(scl)) t.accumulate(scl, (g.array() * t.value(x).array()).matrix().colwise().sum());
                });
}

Var layer_norm(Var x, double eps) {
  Tape& T = *x.tape;
  const Matrix& v = x.value();
  const Eigen::Index C = v.cols();
  const Eigen::VectorXd mean = v.rowwise().mean();
  Matrix centered = v.colwise() - mean;
  const Eigen::VectorXd inv =
      ((centered.array().square().rowwise().sum() / static_cast<double>(C)) + eps).rsqrt().matrix();
  Matrix y = centered.array().colwise() * inv.array();
  Matrix y_saved = T.recording() ? y : Matrix();
  return T.push("layer_norm", std::move(y), T.needs_grad(x), [x, inv, y = std::move(y_saved), C](Tape& t, const Matrix& g) {
    const Eigen::VectorXd g_mean = g.rowwise().mean();
    const Eigen::VectorXd gy_mean = (g.array() * y.array()).rowwise().sum().matrix() / static_cast<double>(C);
    Matrix dx = g;
    dx.colwise() -= g_mean;
    dx -= (y.array().colwise() * gy_mean.array()).matrix();
    dx = dx.array().colwise() * inv.array();
    t.accumulate(x, dx);
  });
}

Var silu(Var x) {
  Tape& T = *x.tape;
  const Matrix s = (1.0 + (-x.value().array()).exp()).inverse().matrix();
  Matrix y = (x.value().array() * s.array()).matrix();
  return T.push("silu", std::move(y), T.needs_grad(x), [x, s](Tape& t, const Matrix& g) {
    const auto& xv = t.value(x).array();
    t.accumulate(x, (g.array() * s.array() * (1.0 + xv * (1.0 - s.array()))).matrix());
  });
}

Var attention(Var q, Var k, Var v, int heads, const AttentionGroups& groups) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Eigen::Index D = q.cols();
  require(k.cols() == D && v.cols() == D, "attention: q, k, v widths differ");
  require(k.rows() == v.rows(), "attention: k and v row counts differ");
  require(heads >= 1 && D % heads == 0, "attention: width must divide into heads");
  require(groups.queries.size() == groups.keys.size(), "attention: malformed groups");
  Tape& T = *q.tape;
  const Eigen::Index dh = D / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  Matrix out = Matrix::Zero(Q.rows(), D);
  std::vector<Matrix> probs;  // per group, per head
  const bool keep = T.recording() && (T.needs_grad(q) || T.needs_grad(k) || T.needs_grad(v));

  auto gather = [](const Matrix& M, const std::vector<int>& rows) {
    Matrix G(static_cast<Eigen::Index>(rows.size()), M.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) G.row(static_cast<Eigen::Index>(i)) = M.row(rows[i]);
    return G;
  };

  for (std::size_t g = 0; g < groups.queries.size(); ++g) {
    const auto& qr = groups.queries[g];
    const auto& kr = groups.keys[g];
    const Matrix Qg = gather(Q, qr), Kg = gather(K, kr), Vg = gather(V, kr);
    for (int h = 0; h < heads; ++h) {
      Matrix S = Qg.middleCols(h * dh, dh) * Kg.middleCols(h * dh, dh).transpose() * inv_sqrt;
      const Eigen::VectorXd mx = S.rowwise().maxCoeff();
      S = (S.colwise() - mx).array().exp().matrix();
      const Eigen::VectorXd z = S.rowwise().sum();
      S = S.array().colwise() / z.array();
      const Matrix O = S * Vg.middleCols(h * dh, dh);
      for (std::size_t i = 0; i < qr.size(); ++i) out.row(qr[i]).segment(h * dh, dh) = O.row(static_cast<Eigen::Index>(i));
      if (keep) probs.push_back(std::move(S));
    }
  }

  return T.push("attention", std::move(out), T.needs_grad(q) || T.needs_grad(k) || T.needs_grad(v),
                [q, k, v, heads, groups, dh, inv_sqrt, probs = std::move(probs), gather](Tape& t, const Matrix& dO) {
                  const Matrix& Qv = t.value(q);
                  const Matrix& Kv = t.value(k);
                  const Matrix& Vv = t.value(v);
                  Matrix dQ = Matrix::Zero(Qv.rows(), Qv.cols());
                  Matrix dK = Matrix::Zero(Kv.rows(), Kv.cols());
                  Matrix dV = Matrix::Zero(Vv.rows(), Vv.cols());
                  std::size_t pi = 0;
                  for (std::size_t g = 0; g < groups.queries.size(); ++g) {
                    const auto& qr = groups.queries[g];
                    const auto& kr = groups.keys[g];
                    const Matrix Qg = gather(Qv, qr), Kg = gather(Kv, kr), Vg = gather(Vv, kr), dOg = gather(dO, qr);
                    for (int h = 0; h < heads; ++h) {
                      const Matrix& P = probs[pi++];
                      const auto dOh = dOg.middleCols(h * dh, dh);
                      const Matrix dVh = P.transpose() * dOh;
                      const Matrix dP = dOh * Vg.middleCols(h * dh, dh).transpose();
                      const Eigen::VectorXd rs = (dP.array() * P.array()).rowwise().sum();
                      const Matrix dS = (P.array() * (dP.colwise() - rs).array()).matrix() * inv_sqrt;
                      const Matrix dQh = dS * Kg.middleCols(h * dh, dh);
                      const Matrix dKh = dS.transpose() * Qg.middleCols(h * dh, dh);
                      for (std::size_t i = 0; i < qr.size(); ++i)
                        dQ.row(qr[i]).segment(h * dh, dh) += dQh.row(static_cast<Eigen::Index>(i));
                      for (std::size_t i = 0; i < kr.size(); ++i) {
                        dK.row(kr[i]).segment(h * dh, dh) += dKh.row(static_cast<Eigen::Index>(i));
                        dV.row(kr[i]).segment(h * dh, dh) += dVh.row(static_cast<Eigen::Index>(i));
                      }
                    }
                  }
                  t.accumulate(q, dQ);
                  t.accumulate(k, dK);
                  t.accumulate(v, dV);
                });
}

Var detach(Var x) { return x.tape->push("detach", x.value(), false, nullptr); }

Var mse(Var pred, const Matrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse: shape mismatch");
  Tape& T = *pred.tape;
  const double n = static_cast<double>(target.size());
  Matrix diff = pred.value() - target;
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return T.push("mse", std::move(out), T.needs_grad(pred), [pred, diff = std::move(diff), n](Tape& t, const Matrix& g) {
    t.accumulate(pred, (2.0 * g(0, 0) / n) * diff);
  });
}

Var tile_rows(Var x, int times) {
  require(times >= 1, "tile_rows: times must be >= 1");
  Tape& T = *x.tape;
  const Eigen::Index r = x.rows();
  Matrix y(r * times, x.cols());
  for (int i = 0; i < times; ++i) y.middleRows(i * r, r) = x.value();
  return T.push("tile_rows", std::move(y), T.needs_grad(x), [x, times, r](Tape& t, const Matrix& g) {
    Matrix acc = g.middleRows(0, r);
    for (int i = 1; i < times; ++i) acc += g.middleRows(i * r, r);
    t.accumulate(x, acc);
  });
}

Var slice_cols(Var x, int start, int count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: out of range");
  Tape& T = *x.tape;
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return T.push("slice_cols", x.value().middleCols(start, count), T.needs_grad(x),
                [x, start, count, rows, cols](Tape& t, const Matrix& g) {
                  Matrix full = Matrix::Zero(rows, cols);
                  full.middleCols(start, count) = g;
                  t.accumulate(x, full);
                });
}

Var row(Var x, int index) {
  require(index >= 0 && index < x.rows(), "row: index out of range");
  Tape& T = *x.tape;
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return T.push("row", x.value().row(index), T.needs_grad(x), [x, index, rows, cols](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(rows, cols);
    full.row(index) = g;
    t.accumulate(x, full);
  });
}

}  // namespace geoworld::ad
