#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "g3m/error.hpp"

namespace g3m {

// Dense row-major tensor of doubles. Shapes are 1-D or 2-D throughout the
// model; scalars are represented as shape {1}.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int numel() const { return static_cast<int>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  int rows() const;  // 2-D only
  int cols() const;  // 2-D only

  double& at(int i) { return data_[static_cast<size_t>(i)]; }
  double at(int i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double item() const;  // numel() == 1
  bool all_finite() const;
  std::string shape_str() const;

private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

enum class Op {
  Matmul,
  Add,
  Concat,
  Tanh,
  Softmax,
  Log,
  Hadamard,
  OuterProduct,
  FlattenRowMajor,
  MaxPoolRows,
  Mean,
  Square,
  EmbeddingGather,
  Dropout,
  LayerNorm,
  ScaledDotAttention,
};

const char* op_name(Op op);

// A learnable value plus its accumulated gradient.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;
  std::string name;

  Parameter() = default;
  Parameter(Tensor v, std::string n, bool train = true)
      : value(std::move(v)), grad(Tensor::zeros(value.shape())), trainable(train), name(std::move(n)) {}

  void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), 0.0); }
};

struct OpAttrs {
  int axis = 0;                      // Concat
  std::vector<int> indices;          // EmbeddingGather row ids
  double keep_prob = 1.0;            // Dropout
  uint64_t mask_seed = 0;            // Dropout mask stream
  double log_floor = 0.0;            // Log: inputs clamped at floor when > 0
  std::vector<uint8_t> key_valid;    // ScaledDotAttention: 1 = key attends; empty = all
};

// Define-by-run tape. Nodes are appended in execution order, which is also a
// topological order, so backward() is a single reverse sweep.
class Tape {
public:
  struct Var {
    int id = -1;
  };

  Var constant(Tensor t);
  Var leaf(Parameter& p);

  // Generic primitive dispatch; named wrappers below forward to this.
  Var apply(Op op, const std::vector<Var>& inputs, OpAttrs attrs = {});

  Var matmul(Var a, Var b) { return apply(Op::Matmul, {a, b}); }
  Var add(Var a, Var b) { return apply(Op::Add, {a, b}); }
  Var concat(const std::vector<Var>& xs, int axis = 0);
  Var tanh(Var x) { return apply(Op::Tanh, {x}); }
  Var softmax(Var x) { return apply(Op::Softmax, {x}); }
  Var log(Var x, double floor = 0.0);
  Var hadamard(Var a, Var b) { return apply(Op::Hadamard, {a, b}); }
  Var outer(Var a, Var b) { return apply(Op::OuterProduct, {a, b}); }
  Var flatten(Var x) { return apply(Op::FlattenRowMajor, {x}); }
  Var max_pool_rows(Var x) { return apply(Op::MaxPoolRows, {x}); }
  Var mean(Var x) { return apply(Op::Mean, {x}); }
  Var square(Var x) { return apply(Op::Square, {x}); }
  Var gather_rows(Var table, std::vector<int> ids);
  Var dropout(Var x, double keep_prob, uint64_t mask_seed);
  Var layer_norm(Var x, Var gamma, Var beta) { return apply(Op::LayerNorm, {x, gamma, beta}); }
  Var attention(Var q, Var k, Var v, std::vector<uint8_t> key_valid = {});

  // hadamard with a constant filled tensor
  Var scale(Var x, double s);

  const Tensor& value(Var v) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  // Accumulates d(loss)/d(param) into every trainable Parameter leaf.
  void backward(Var loss);

private:
  struct Node {
    Op op{};
    bool is_input = false;        // constant or leaf; no backward rule
    Parameter* param = nullptr;   // set for leaves
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    OpAttrs attrs;
    Tensor saved;                 // op context: softmax/attention probs, dropout mask, layer_norm xhat
    std::vector<double> saved_stats;  // layer_norm inv-std per row
    std::vector<int> saved_idx;       // max_pool argmax row per column
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  int check_var(Var v) const;

  Tensor eval(Node& n) const;          // forward
  void accumulate(Node& n);            // backward for one node

  std::vector<Node> nodes_;
};

}  // namespace g3m
