#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "mbpb/tensor.hpp"

namespace mbpb {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t index = 0;
};

enum class Op {
  kConstant,
  kParameter,
  kAffine,
  kElu,
  kRelu,
  kTanh,
  kLogistic,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSquare,
  kAbs,
  kMean,
  kConcatCols,
};

std::string_view op_name(Op op);

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Define-by-run record of tensor operations with reverse-mode accumulation.
///
/// Every operation is evaluated eagerly when it is recorded, so the recorded
/// order is a topological order of the computation. `backward` walks the
/// record once in reverse. A tape is single-use: build it, call backward at
/// most once, read the gradients, discard it.
class Tape {
 public:
  Tape() { nodes_.reserve(64); }

  Var constant(Tensor value);
  /// Leaf that receives a gradient on backward.
  Var parameter(Tensor value);

  /// x * w + b with x: n x in, w: in x out, b: 1 x out.
  Var affine(Var x, Var w, Var b);
  Var elu(Var x);
  Var relu(Var x);
  Var tanh(Var x);
  Var logistic(Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var square(Var a);
  Var abs(Var a);
  /// Mean over all entries, as a 1 x 1 tensor.
  Var mean(Var a);
  /// Horizontal concatenation of operands with equal row counts.
  Var concat_cols(std::span<const Var> parts);

  const Tensor& value(Var v) const;
  /// Gradient of the backward root with respect to v. Zero tensor for
  /// values that do not depend on any parameter.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;

  /// Reverse sweep from a 1 x 1 root. Throws TapeError if the root is not on
  /// this tape, the tape is empty, or backward already ran.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  /// Smallest |input| over recorded relu and abs nodes (+inf if none):
  /// how far the tape sits from a point of non-differentiability.
  double kink_margin() const;
  Op op(Var v) const;

 private:
  struct Node {
    Op op = Op::kConstant;
    std::size_t in0 = 0;
    std::size_t in1 = 0;
    std::size_t in2 = 0;
    std::vector<std::size_t> extra;
    double factor = 0.0;
    bool requires_grad = false;
    Tensor value;
    Tensor grad;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  Var unary(Op op, Var x);
  Var binary(Op op, Var a, Var b);
  void accumulate(std::size_t target, const Tensor& contribution);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace mbpb
