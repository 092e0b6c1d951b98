#include "mbpb/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mbpb {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kAffine: return "affine";
    case Op::kElu: return "elu";
    case Op::kRelu: return "relu";
    case Op::kTanh: return "tanh";
    case Op::kLogistic: return "logistic";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kSquare: return "square";
    case Op::kAbs: return "abs";
    case Op::kMean: return "mean";
    case Op::kConcatCols: return "concat_cols";
  }
  return "unknown";
}

namespace {

double logistic_value(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

[[noreturn]] void shape_mismatch(Op op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + a.shape_string() + " vs " +
                   b.shape_string());
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.index >= nodes_.size()) {
    throw TapeError("variable " + std::to_string(v.index) + " is not on this tape");
  }
  return nodes_[v.index];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Tensor value) {
  Node n;
  n.op = Op::kParameter;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::affine(Var x, Var w, Var b) {
  const Tensor& xv = node(x).value;
  const Tensor& wv = node(w).value;
  const Tensor& bv = node(b).value;
  if (xv.cols() != wv.rows()) shape_mismatch(Op::kAffine, xv, wv);
  if (bv.rows() != 1 || bv.cols() != wv.cols()) shape_mismatch(Op::kAffine, wv, bv);

  const std::size_t n = xv.rows();
  const std::size_t in = wv.rows();
  const std::size_t out = wv.cols();
  Tensor y = Tensor::uninitialized(n, out);
  for (std::size_t r = 0; r < n; ++r) {
    double* yr = y.data() + r * out;
    const double* xr = xv.data() + r * in;
    for (std::size_t j = 0; j < out; ++j) yr[j] = bv[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double xk = xr[k];
      const double* wk = wv.data() + k * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xk * wk[j];
    }
  }
  Node nd;
  nd.op = Op::kAffine;
  nd.in0 = x.index;
  nd.in1 = w.index;
  nd.in2 = b.index;
  nd.requires_grad = node(x).requires_grad || node(w).requires_grad || node(b).requires_grad;
  nd.value = std::move(y);
  return push(std::move(nd));
}

Var Tape::unary(Op op, Var x) {
  const Node& src = node(x);
  Tensor y = Tensor::uninitialized(src.value.rows(), src.value.cols());
  const double* xs = src.value.data();
  double* ys = y.data();
  const std::size_t n = y.size();
  switch (op) {
    case Op::kElu:
      for (std::size_t i = 0; i < n; ++i) ys[i] = xs[i] > 0.0 ? xs[i] : std::expm1(xs[i]);
      break;
    case Op::kRelu:
      for (std::size_t i = 0; i < n; ++i) ys[i] = xs[i] > 0.0 ? xs[i] : 0.0;
      break;
    case Op::kTanh:
      for (std::size_t i = 0; i < n; ++i) ys[i] = std::tanh(xs[i]);
      break;
    case Op::kLogistic:
      for (std::size_t i = 0; i < n; ++i) ys[i] = logistic_value(xs[i]);
      break;
    case Op::kSquare:
      for (std::size_t i = 0; i < n; ++i) ys[i] = xs[i] * xs[i];
      break;
    case Op::kAbs:
      for (std::size_t i = 0; i < n; ++i) ys[i] = std::fabs(xs[i]);
      break;
    default:
      throw TapeError(std::string(op_name(op)) + " is not a unary operation");
  }
  Node nd;
  nd.op = op;
  nd.in0 = x.index;
  nd.requires_grad = src.requires_grad;
  nd.value = std::move(y);
  return push(std::move(nd));
}

Var Tape::elu(Var x) { return unary(Op::kElu, x); }
Var Tape::relu(Var x) { return unary(Op::kRelu, x); }
Var Tape::tanh(Var x) { return unary(Op::kTanh, x); }
Var Tape::logistic(Var x) { return unary(Op::kLogistic, x); }
Var Tape::square(Var x) { return unary(Op::kSquare, x); }
Var Tape::abs(Var x) { return unary(Op::kAbs, x); }

Var Tape::binary(Op op, Var a, Var b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (!na.value.same_shape(nb.value)) shape_mismatch(op, na.value, nb.value);
  Tensor y = Tensor::uninitialized(na.value.rows(), na.value.cols());
  const double* as = na.value.data();
  const double* bs = nb.value.data();
  double* ys = y.data();
  const std::size_t n = y.size();
  switch (op) {
    case Op::kAdd:
      for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] + bs[i];
      break;
    case Op::kSub:
      for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] - bs[i];
      break;
    case Op::kMul:
      for (std::size_t i = 0; i < n; ++i) ys[i] = as[i] * bs[i];
      break;
    default:
      throw TapeError(std::string(op_name(op)) + " is not a binary operation");
  }
  Node nd;
  nd.op = op;
  nd.in0 = a.index;
  nd.in1 = b.index;
  nd.requires_grad = na.requires_grad || nb.requires_grad;
  nd.value = std::move(y);
  return push(std::move(nd));
}

Var Tape::add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::kSub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::kMul, a, b); }

Var Tape::scale(Var a, double factor) {
  const Node& src = node(a);
  Tensor y = src.value;
  for (double& v : y.values()) v *= factor;
  Node nd;
  nd.op = Op::kScale;
  nd.in0 = a.index;
  nd.factor = factor;
  nd.requires_grad = src.requires_grad;
  nd.value = std::move(y);
  return push(std::move(nd));
}

Var Tape::mean(Var a) {
  const Node& src = node(a);
  if (src.value.size() == 0) {
    throw ShapeError("mean: empty operand " + src.value.shape_string());
  }
  double sum = 0.0;
  for (double v : src.value.values()) sum += v;
  Node nd;
  nd.op = Op::kMean;
  nd.in0 = a.index;
  nd.requires_grad = src.requires_grad;
  nd.value = Tensor::scalar(sum / static_cast<double>(src.value.size()));
  return push(std::move(nd));
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = node(parts[0]).value.rows();
  std::size_t cols = 0;
  bool needs_grad = false;
  for (Var p : parts) {
    const Node& np = node(p);
    if (np.value.rows() != rows) shape_mismatch(Op::kConcatCols, node(parts[0]).value, np.value);
    cols += np.value.cols();
    needs_grad = needs_grad || np.requires_grad;
  }
  Tensor y = Tensor::uninitialized(rows, cols);
  std::size_t offset = 0;
  Node nd;
  nd.op = Op::kConcatCols;
  for (Var p : parts) {
    const Tensor& pv = node(p).value;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) y(r, offset + c) = pv(r, c);
    }
    offset += pv.cols();
    nd.extra.push_back(p.index);
  }
  nd.requires_grad = needs_grad;
  nd.value = std::move(y);
  return push(std::move(nd));
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_) throw TapeError("grad: backward has not been run on this tape");
  if (!n.requires_grad) return Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Op Tape::op(Var v) const { return node(v).op; }

double Tape::kink_margin() const {
  double margin = std::numeric_limits<double>::infinity();
  for (const Node& n : nodes_) {
    if (n.op != Op::kRelu && n.op != Op::kAbs) continue;
    for (double v : nodes_[n.in0].value.values()) margin = std::min(margin, std::fabs(v));
  }
  return margin;
}

void Tape::accumulate(std::size_t target, const Tensor& contribution) {
  Tensor& g = nodes_[target].grad;
  const double* cs = contribution.data();
  double* gs = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) gs[i] += cs[i];
}

void Tape::backward(Var root) {
  if (nodes_.empty()) throw TapeError("backward: nothing recorded on this tape");
  if (backward_done_) throw TapeError("backward: already run on this tape");
  const Node& r = node(root);
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw ShapeError("backward: root must be 1x1, got " + r.value.shape_string());
  }
  backward_done_ = true;

  for (Node& n : nodes_) {
    if (n.requires_grad) n.grad = Tensor(n.value.rows(), n.value.cols());
  }
  nodes_[root.index].grad[0] = 1.0;

  for (std::size_t idx = root.index + 1; idx-- > 0;) {
    Node& n = nodes_[idx];
    if (!n.requires_grad) continue;
    const Tensor& gy = n.grad;
    const double* gys = gy.data();
    const std::size_t count = gy.size();
    switch (n.op) {
      case Op::kConstant:
      case Op::kParameter:
        break;
      case Op::kAffine: {
        Node& x = nodes_[n.in0];
        Node& w = nodes_[n.in1];
        Node& b = nodes_[n.in2];
        const std::size_t rows = x.value.rows();
        const std::size_t in = w.value.rows();
        const std::size_t out = w.value.cols();
        if (x.requires_grad) {
          // dX = dY W^T, accumulated row-wise against a transposed copy of W.
          std::vector<double> wt(in * out);
          for (std::size_t k = 0; k < in; ++k) {
            for (std::size_t j = 0; j < out; ++j) wt[j * in + k] = w.value[k * out + j];
          }
          for (std::size_t r = 0; r < rows; ++r) {
            const double* g = gys + r * out;
            double* gx = x.grad.data() + r * in;
            for (std::size_t j = 0; j < out; ++j) {
              const double gj = g[j];
              const double* wj = wt.data() + j * in;
              for (std::size_t k = 0; k < in; ++k) gx[k] += gj * wj[k];
            }
          }
        }
        if (w.requires_grad) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double* g = gys + r * out;
            const double* xr = x.value.data() + r * in;
            for (std::size_t k = 0; k < in; ++k) {
              const double xk = xr[k];
              double* gw = w.grad.data() + k * out;
              for (std::size_t j = 0; j < out; ++j) gw[j] += xk * g[j];
            }
          }
        }
        if (b.requires_grad) {
          double* gb = b.grad.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const double* g = gys + r * out;
            for (std::size_t j = 0; j < out; ++j) gb[j] += g[j];
          }
        }
        break;
      }
      case Op::kElu: {
        Node& x = nodes_[n.in0];
        const double* xs = x.value.data();
        const double* ys = n.value.data();
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) {
          gx[i] += gys[i] * (xs[i] > 0.0 ? 1.0 : ys[i] + 1.0);
        }
        break;
      }
      case Op::kRelu: {
        Node& x = nodes_[n.in0];
        const double* xs = x.value.data();
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) {
          if (xs[i] > 0.0) gx[i] += gys[i];
        }
        break;
      }
      case Op::kTanh: {
        Node& x = nodes_[n.in0];
        const double* ys = n.value.data();
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) gx[i] += gys[i] * (1.0 - ys[i] * ys[i]);
        break;
      }
      case Op::kLogistic: {
        Node& x = nodes_[n.in0];
        const double* ys = n.value.data();
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) gx[i] += gys[i] * ys[i] * (1.0 - ys[i]);
        break;
      }
      case Op::kSquare: {
        Node& x = nodes_[n.in0];
        const double* xs = x.value.data();
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) gx[i] += 2.0 * xs[i] * gys[i];
        break;
      }
      case Op::kAbs: {
        Node& x = nodes_[n.in0];
        const double* xs = x.value.data();
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) {
          gx[i] += xs[i] > 0.0 ? gys[i] : (xs[i] < 0.0 ? -gys[i] : 0.0);
        }
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        const double sign = n.op == Op::kAdd ? 1.0 : -1.0;
        if (nodes_[n.in0].requires_grad) accumulate(n.in0, gy);
        Node& b = nodes_[n.in1];
        if (b.requires_grad) {
          double* gb = b.grad.data();
          for (std::size_t i = 0; i < count; ++i) gb[i] += sign * gys[i];
        }
        break;
      }
      case Op::kMul: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        if (a.requires_grad) {
          const double* bs = b.value.data();
          double* ga = a.grad.data();
          for (std::size_t i = 0; i < count; ++i) ga[i] += gys[i] * bs[i];
        }
        if (b.requires_grad) {
          const double* as = a.value.data();
          double* gb = b.grad.data();
          for (std::size_t i = 0; i < count; ++i) gb[i] += gys[i] * as[i];
        }
        break;
      }
      case Op::kScale: {
        Node& x = nodes_[n.in0];
        double* gx = x.grad.data();
        for (std::size_t i = 0; i < count; ++i) gx[i] += n.factor * gys[i];
        break;
      }
      case Op::kMean: {
        Node& x = nodes_[n.in0];
        const double share = gys[0] / static_cast<double>(x.value.size());
        for (double& g : x.grad.values()) g += share;
        break;
      }
      case Op::kConcatCols: {
        std::size_t offset = 0;
        const std::size_t cols = n.value.cols();
        for (std::size_t part : n.extra) {
          Node& p = nodes_[part];
          const std::size_t pc = p.value.cols();
          if (p.requires_grad) {
            for (std::size_t r = 0; r < p.value.rows(); ++r) {
              for (std::size_t c = 0; c < pc; ++c) p.grad(r, c) += gys[r * cols + offset + c];
            }
          }
          offset += pc;
        }
        break;
      }
    }
  }
}

}  // namespace mbpb
