#include "weakvoc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace weakvoc::ad {

const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Tape

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw ValidationError("variable does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id_)];
}

Tape::Node& Tape::node(Var v) { return const_cast<Node&>(std::as_const(*this).node(v)); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (!in.valid()) continue;
    needs = needs || node(in).requires_grad;
  }
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.grad) n.grad.emplace(n.value.shape(), 0.0);
  return *n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!v.valid() || !node(v).requires_grad) return;
  Tensor& buf = grad_buffer(v);
  if (buf.size() != g.size()) {
    throw DimensionError("gradient " + shape_string(g.shape()) + " for value " + shape_string(buf.shape()));
  }
  buf.data() += g.data();
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ValidationError("backward() needs a scalar loss, got shape " + shape_string(root.value.shape()));
  }
  for (Node& n : nodes_) n.grad.reset();
  if (root.requires_grad) {
    grad_buffer(loss).data().setOnes();
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad) n.backward(*this, *n.grad);
    }
  }
  for (Node& n : nodes_) {
    if (n.is_leaf && n.requires_grad && !n.grad) n.grad.emplace(n.value.shape(), 0.0);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad ? *n.grad : Tensor(n.value.shape(), 0.0);
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ValidationError("operation on an unbound variable");
  return *a.tape();
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.value().data() + b.value().data());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.value().data() - b.value().data());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.grad_buffer(b).data() -= g.data();
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).data() += g.data().cwiseProduct(b.value().data());
    if (t.requires_grad(b)) t.grad_buffer(b).data() += g.data().cwiseProduct(a.value().data());
  });
}

Var scale(Var a, double s) {
  Tensor out(a.shape(), a.value().data() * s);
  return tape_of(a).record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    t.grad_buffer(a).data() += s * g.data();
  });
}

Var add_scalar(Var a, double s) {
  Tensor out(a.shape(), a.value().data().array() + s);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var add_rowwise(Var x, Var b) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || b.value().size() != xv.dim(1)) {
    throw DimensionError("add_rowwise: " + shape_string(xv.shape()) + " with bias " + shape_string(b.shape()));
  }
  Tensor out = xv;
  out.matrix().rowwise() += b.value().data().transpose();
  return tape_of(x).record(std::move(out), {x, b}, [x, b](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(b)) t.grad_buffer(b).data() += g.matrix().colwise().sum().transpose();
  });
}

Var relu(Var x) {
  Tensor out(x.shape(), x.value().data().cwiseMax(0.0));
  return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    const auto& xv = x.value().data();
    for (Index i = 0; i < gx.size(); ++i) {
      if (xv[i] > 0) gx[i] += g[i];
    }
  });
}

Var sigmoid(Var x) {
  Tensor out(x.shape(), x.value().data().unaryExpr(&stable_sigmoid));
  auto y = std::make_shared<Eigen::VectorXd>(out.data());
  return tape_of(x).record(std::move(out), {x}, [x, y](Tape& t, const Tensor& g) {
    t.grad_buffer(x).data().array() += g.data().array() * y->array() * (1.0 - y->array());
  });
}

Var abs(Var x) {
  Tensor out(x.shape(), x.value().data().cwiseAbs());
  return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    const auto& xv = x.value().data();
    for (Index i = 0; i < gx.size(); ++i) {
      if (xv[i] > 0) gx[i] += g[i];
      else if (xv[i] < 0) gx[i] -= g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  Tensor out(Shape{av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).matrix().noalias() += g.matrix() * b.value().matrix().transpose();
    if (t.requires_grad(b)) t.grad_buffer(b).matrix().noalias() += a.value().matrix().transpose() * g.matrix();
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw DimensionError("transpose needs rank 2, got " + shape_string(av.shape()));
  Tensor out(Shape{av.dim(1), av.dim(0)});
  out.matrix() = av.matrix().transpose();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    t.grad_buffer(a).matrix() += g.matrix().transpose();
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  if (xv.rank() == 1) {
    if (axis != 0) throw DimensionError("softmax: axis out of range for rank 1");
  } else if (xv.rank() != 2 || (axis != 0 && axis != 1)) {
    throw DimensionError("softmax: needs rank 1/2 and axis 0/1, got " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  auto m = out.matrix();
  // rank 1 is viewed as a single row, so its axis 0 is the matrix column axis
  const bool over_rows = xv.rank() == 2 && axis == 0;
  if (over_rows) {
    for (Index c = 0; c < m.cols(); ++c) {
      auto col = m.col(c);
      col.array() = (col.array() - col.maxCoeff()).exp();
      col /= col.sum();
    }
  } else {
    for (Index r = 0; r < m.rows(); ++r) {
      auto row = m.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
  }
  auto y = std::make_shared<Tensor>(out);
  return tape_of(x).record(std::move(out), {x}, [x, y, over_rows](Tape& t, const Tensor& g) {
    const auto ym = y->matrix();
    const auto gm = g.matrix();
    auto gx = t.grad_buffer(x).matrix();
    if (over_rows) {
      const Eigen::RowVectorXd dots = (gm.array() * ym.array()).colwise().sum();
      gx.array() += ym.array() * (gm.rowwise() - dots).array();
    } else {
      const Eigen::VectorXd dots = (gm.array() * ym.array()).rowwise().sum();
      gx.array() += ym.array() * (gm.colwise() - dots).array();
    }
  });
}

Var sum(Var x) {
  Tensor out = Tensor::scalar(x.value().data().sum());
  return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    t.grad_buffer(x).data().array() += g.item();
  });
}

Var sum(Var x, int axis) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || (axis != 0 && axis != 1)) {
    throw DimensionError("sum(axis): needs rank 2, got " + shape_string(xv.shape()));
  }
  Tensor out;
  if (axis == 0) {
    out = Tensor(Shape{xv.dim(1)}, Eigen::VectorXd(xv.matrix().colwise().sum().transpose()));
  } else {
    out = Tensor(Shape{xv.dim(0)}, Eigen::VectorXd(xv.matrix().rowwise().sum()));
  }
  return tape_of(x).record(std::move(out), {x}, [x, axis](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x).matrix();
    if (axis == 0) gx.rowwise() += g.data().transpose();
    else gx.colwise() += g.data();
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), n > 0 ? 1.0 / n : 0.0);
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return tape_of(x).record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    t.grad_buffer(x).data() += g.data();
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat of zero arrays");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw DimensionError("concat needs rank >= 1");
  Index rows = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw DimensionError("concat: " + shape_string(s) + " does not match " + shape_string(shape));
    }
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::vector<Index> offsets;
  Index off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    out.data().segment(off, p.value().size()) = p.value().data();
    off += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts.front()).record(std::move(out), std::span<const Var>(inputs),
                                       [inputs, offsets](Tape& t, const Tensor& g) {
                                         for (std::size_t i = 0; i < inputs.size(); ++i) {
                                           if (!t.requires_grad(inputs[i])) continue;
                                           Tensor& gi = t.grad_buffer(inputs[i]);
                                           gi.data() += g.data().segment(offsets[i], gi.size());
                                         }
                                       });
}

Var slice(Var x, Index begin, Index end) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1 || begin < 0 || end > xv.dim(0) || begin > end) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_string(xv.shape()));
  }
  Shape shape = xv.shape();
  const Index stride = xv.dim(0) > 0 ? xv.size() / xv.dim(0) : 0;
  shape[0] = end - begin;
  Tensor out(shape, Eigen::VectorXd(xv.data().segment(begin * stride, (end - begin) * stride)));
  return tape_of(x).record(std::move(out), {x}, [x, begin, stride](Tape& t, const Tensor& g) {
    t.grad_buffer(x).data().segment(begin * stride, g.size()) += g.data();
  });
}

Var gather_rows(Var x, std::span<const Index> rows) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("gather_rows needs rank 2, got " + shape_string(xv.shape()));
  std::vector<Index> idx(rows.begin(), rows.end());
  for (Index r : idx) {
    if (r < 0 || r >= xv.dim(0)) throw ValidationError("gather_rows: row " + std::to_string(r) + " out of range");
  }
  Tensor out(Shape{static_cast<Index>(idx.size()), xv.dim(1)});
  for (std::size_t i = 0; i < idx.size(); ++i) out.matrix().row(static_cast<Index>(i)) = xv.matrix().row(idx[i]);
  return tape_of(x).record(std::move(out), {x}, [x, idx](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x).matrix();
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.matrix().row(static_cast<Index>(i));
  });
}

Var gather_cols(Var x, std::span<const Index> cols) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("gather_cols needs rank 2, got " + shape_string(xv.shape()));
  std::vector<Index> idx(cols.begin(), cols.end());
  for (Index c : idx) {
    if (c < 0 || c >= xv.dim(1)) throw ValidationError("gather_cols: column " + std::to_string(c) + " out of range");
  }
  Tensor out(Shape{xv.dim(0), static_cast<Index>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) out.matrix().col(static_cast<Index>(i)) = xv.matrix().col(idx[i]);
  return tape_of(x).record(std::move(out), {x}, [x, idx](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x).matrix();
    for (std::size_t i = 0; i < idx.size(); ++i) gx.col(idx[i]) += g.matrix().col(static_cast<Index>(i));
  });
}

// ---------------------------------------------------------------------------
// Normalization and losses

Var l2_normalize(Var x, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() != 1 && xv.rank() != 2) {
    throw DimensionError("l2_normalize needs rank 1 or 2, got " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  auto m = out.matrix();
  auto norms = std::make_shared<Eigen::VectorXd>(m.rowwise().norm());
  for (Index r = 0; r < m.rows(); ++r) m.row(r) /= std::max((*norms)[r], eps);
  auto y = std::make_shared<Tensor>(out);
  return tape_of(x).record(std::move(out), {x}, [x, y, norms, eps](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x).matrix();
    const auto ym = y->matrix();
    const auto gm = g.matrix();
    for (Index r = 0; r < gm.rows(); ++r) {
      const double n = (*norms)[r];
      if (n >= eps) {
        gx.row(r) += (gm.row(r) - ym.row(r) * ym.row(r).dot(gm.row(r))) / n;
      } else {
        gx.row(r) += gm.row(r) / eps;
      }
    }
  });
}

Var bce_with_logits(Var logits, const Tensor& targets, const Tensor* weights) {
  const Tensor& s = logits.value();
  if (targets.size() != s.size()) {
    throw DimensionError("bce_with_logits: targets " + shape_string(targets.shape()) + " for logits " +
                         shape_string(s.shape()));
  }
  if (weights && weights->size() != s.size()) {
    throw DimensionError("bce_with_logits: weights " + shape_string(weights->shape()) + " for logits " +
                         shape_string(s.shape()));
  }
  double total = 0.0;
  for (Index i = 0; i < s.size(); ++i) {
    const double t = targets[i];
    if (t != 0.0 && t != 1.0) throw ValidationError("bce_with_logits: target " + std::to_string(t) + " not in {0,1}");
    const double w = weights ? (*weights)[i] : 1.0;
    if (w == 0.0) continue;
    const double x = s[i];
    total += w * (std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))));
  }
  auto tgt = std::make_shared<Tensor>(targets);
  auto wts = weights ? std::make_shared<Tensor>(*weights) : nullptr;
  return tape_of(logits).record(Tensor::scalar(total), {logits}, [logits, tgt, wts](Tape& t, const Tensor& g) {
    Tensor& gl = t.grad_buffer(logits);
    const Tensor& s = logits.value();
    const double go = g.item();
    for (Index i = 0; i < s.size(); ++i) {
      const double w = wts ? (*wts)[i] : 1.0;
      if (w == 0.0) continue;
      gl[i] += go * w * (stable_sigmoid(s[i]) - (*tgt)[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

Var conv2d(Var x, Var w, Var bias, int stride, int pad) {
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (pad < 0) throw ConfigError("conv2d: padding must be non-negative, got " + std::to_string(pad));
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if ((xv.rank() != 3 && xv.rank() != 4) || wv.rank() != 4) {
    throw DimensionError("conv2d: input " + shape_string(xv.shape()) + ", weights " + shape_string(wv.shape()));
  }
  const bool batched = xv.rank() == 4;
  const Index N = batched ? xv.dim(0) : 1;
  const Index C = xv.dim(-3), H = xv.dim(-2), W = xv.dim(-1);
  const Index O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != C) {
    throw DimensionError("conv2d: input " + shape_string(xv.shape()) + " has " + std::to_string(C) +
                         " channels, weights " + shape_string(wv.shape()));
  }
  if (kh > H + 2 * pad || kw > W + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_string(wv.shape()) + " larger than padded input " +
                         shape_string(xv.shape()));
  }
  if (bias.valid() && bias.value().size() != O) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " for " + std::to_string(O) + " outputs");
  }
  const Index Ho = (H + 2 * pad - kh) / stride + 1;
  const Index Wo = (W + 2 * pad - kw) / stride + 1;
  const Index P = Ho * Wo;
  const Index K = C * kh * kw;

  // Patch matrix: rows are (c, ki, kj), columns are (n, oy, ox).
  auto cols = std::make_shared<RowMatrix>(RowMatrix::Zero(K, N * P));
  const double* xp = xv.ptr();
  for (Index c = 0; c < C; ++c) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        double* row = cols->row((c * kh + ki) * kw + kj).data();
        for (Index n = 0; n < N; ++n) {
          const double* plane = xp + (n * C + c) * H * W;
          for (Index oy = 0; oy < Ho; ++oy) {
            const Index iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= H) continue;
            for (Index ox = 0; ox < Wo; ++ox) {
              const Index ix = ox * stride - pad + kj;
              if (ix >= 0 && ix < W) row[n * P + oy * Wo + ox] = plane[iy * W + ix];
            }
          }
        }
      }
    }
  }
  const ConstMatrixMap wm(wv.ptr(), O, K);
  RowMatrix out_m = wm * (*cols);
  if (bias.valid()) out_m.colwise() += bias.value().data();

  Shape out_shape = batched ? Shape{N, O, Ho, Wo} : Shape{O, Ho, Wo};
  Tensor out(out_shape);
  for (Index n = 0; n < N; ++n) {
    MatrixMap(out.ptr() + n * O * P, O, P) = out_m.middleCols(n * P, P);
  }

  struct Geometry {
    Index N, C, H, W, O, kh, kw, Ho, Wo, stride, pad;
  };
  const Geometry geo{N, C, H, W, O, kh, kw, Ho, Wo, stride, pad};
  return tape_of(x).record(std::move(out), {x, w, bias}, [x, w, bias, cols, geo](Tape& t, const Tensor& g) {
    const Index P = geo.Ho * geo.Wo;
    const Index K = geo.C * geo.kh * geo.kw;
    RowMatrix gm(geo.O, geo.N * P);
    for (Index n = 0; n < geo.N; ++n) {
      gm.middleCols(n * P, P) = ConstMatrixMap(g.ptr() + n * geo.O * P, geo.O, P);
    }
    if (t.requires_grad(w)) {
      MatrixMap(t.grad_buffer(w).ptr(), geo.O, K).noalias() += gm * cols->transpose();
    }
    if (bias.valid() && t.requires_grad(bias)) t.grad_buffer(bias).data() += gm.rowwise().sum();
    if (!t.requires_grad(x)) return;
    const ConstMatrixMap wm(w.value().ptr(), geo.O, K);
    const RowMatrix dcols = wm.transpose() * gm;
    double* gx = t.grad_buffer(x).ptr();
    for (Index c = 0; c < geo.C; ++c) {
      for (Index ki = 0; ki < geo.kh; ++ki) {
        for (Index kj = 0; kj < geo.kw; ++kj) {
          const double* row = dcols.row((c * geo.kh + ki) * geo.kw + kj).data();
          for (Index n = 0; n < geo.N; ++n) {
            double* plane = gx + (n * geo.C + c) * geo.H * geo.W;
            for (Index oy = 0; oy < geo.Ho; ++oy) {
              const Index iy = oy * geo.stride - geo.pad + ki;
              if (iy < 0 || iy >= geo.H) continue;
              for (Index ox = 0; ox < geo.Wo; ++ox) {
                const Index ix = ox * geo.stride - geo.pad + kj;
                if (ix >= 0 && ix < geo.W) plane[iy * geo.W + ix] += row[n * P + oy * geo.Wo + ox];
              }
            }
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// RoI pooling

namespace {

struct BilinearTap {
  Index offset[4];
  double weight[4];
};

BilinearTap bilinear_tap(double fx, double fy, Index H, Index W) {
  fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
  fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
  const Index x0 = static_cast<Index>(std::floor(fx));
  const Index y0 = static_cast<Index>(std::floor(fy));
  const Index x1 = std::min(x0 + 1, W - 1);
  const Index y1 = std::min(y0 + 1, H - 1);
  const double ax = fx - static_cast<double>(x0);
  const double ay = fy - static_cast<double>(y0);
  return {{y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1},
          {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax}};
}

}  // namespace

Var roi_align(Var featmap, std::span<const Box> boxes, int grid, double spatial_scale) {
  const Tensor& fv = featmap.value();
  if (fv.rank() != 3) throw DimensionError("roi_align: feature map must be C×H×W, got " + shape_string(fv.shape()));
  if (grid <= 0) throw ConfigError("roi_align: grid must be positive");
  const Index C = fv.dim(0), H = fv.dim(1), W = fv.dim(2);
  const Index S = static_cast<Index>(grid) * grid;
  const Index n = static_cast<Index>(boxes.size());

  auto taps = std::make_shared<std::vector<BilinearTap>>();
  taps->reserve(static_cast<std::size_t>(n * S));
  for (const Box& b : boxes) {
    if (!b.valid()) {
      throw ValidationError("roi_align: degenerate box (" + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," +
                            std::to_string(b.x2) + "," + std::to_string(b.y2) + ")");
    }
    const double cw = b.width() / grid, ch = b.height() / grid;
    for (int py = 0; py < grid; ++py) {
      for (int px = 0; px < grid; ++px) {
        const double x = b.x1 + (px + 0.5) * cw;
        const double y = b.y1 + (py + 0.5) * ch;
        taps->push_back(bilinear_tap(x * spatial_scale - 0.5, y * spatial_scale - 0.5, H, W));
      }
    }
  }

  Tensor out(Shape{n, C, grid, grid});
  const Index plane = H * W;
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < C; ++c) {
      const double* f = fv.ptr() + c * plane;
      double* o = out.ptr() + (r * C + c) * S;
      for (Index s = 0; s < S; ++s) {
        const BilinearTap& tp = (*taps)[static_cast<std::size_t>(r * S + s)];
        o[s] = tp.weight[0] * f[tp.offset[0]] + tp.weight[1] * f[tp.offset[1]] + tp.weight[2] * f[tp.offset[2]] +
               tp.weight[3] * f[tp.offset[3]];
      }
    }
  }
  return tape_of(featmap).record(std::move(out), {featmap}, [featmap, taps, n, C, S, plane](Tape& t, const Tensor& g) {
    double* gf = t.grad_buffer(featmap).ptr();
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < C; ++c) {
        double* dst = gf + c * plane;
        const double* go = g.ptr() + (r * C + c) * S;
        for (Index s = 0; s < S; ++s) {
          const BilinearTap& tp = (*taps)[static_cast<std::size_t>(r * S + s)];
          for (int k = 0; k < 4; ++k) dst[tp.offset[k]] += tp.weight[k] * go[s];
        }
      }
    }
  });
}

Var roi_pool_bilinear(Var featmap, const Box& box, int grid, double spatial_scale) {
  Var pooled = roi_align(featmap, std::span<const Box>(&box, 1), grid, spatial_scale);
  return reshape(pooled, Shape{featmap.dim(0), grid, grid});
}

Index argmax(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() == 0) throw ValidationError("argmax of an empty array");
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace weakvoc::ad
