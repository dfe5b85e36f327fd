#include "g3m/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "g3m/rng.hpp"

namespace g3m {

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw ValidationError("tensor shape must have at least one dimension");
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ValidationError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw ValidationError(std::string(op_name(op)) + ": incompatible shapes " + a.shape_str() +
                        " and " + b.shape_str());
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const std::string& why) {
  throw ValidationError(std::string(op_name(op)) + ": " + why + " (got " + a.shape_str() + ")");
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
    throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str());
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

int Tensor::rows() const {
  if (ndim() != 2) throw ValidationError("rows(): tensor is not 2-D, shape " + shape_str());
  return shape_[0];
}

int Tensor::cols() const {
  if (ndim() != 2) throw ValidationError("cols(): tensor is not 2-D, shape " + shape_str());
  return shape_[1];
}

double Tensor::item() const {
  if (numel() != 1) throw ValidationError("item(): tensor is not scalar, shape " + shape_str());
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Matmul: return "matmul";
    case Op::Add: return "add";
    case Op::Concat: return "concat";
    case Op::Tanh: return "tanh";
    case Op::Softmax: return "softmax";
    case Op::Log: return "log";
    case Op::Hadamard: return "hadamard";
    case Op::OuterProduct: return "outer_product";
    case Op::FlattenRowMajor: return "flatten_rowmajor";
    case Op::MaxPoolRows: return "max_pool_rows";
    case Op::Mean: return "mean";
    case Op::Square: return "square";
    case Op::EmbeddingGather: return "embedding_gather";
    case Op::Dropout: return "dropout";
    case Op::LayerNorm: return "layer_norm";
    case Op::ScaledDotAttention: return "scaled_dot_attention";
  }
  throw ValidationError("unknown op_kind " + std::to_string(static_cast<int>(op)));
}

Tape::Var Tape::constant(Tensor t) {
  Node n;
  n.is_input = true;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::leaf(Parameter& p) {
  Node n;
  n.is_input = true;
  n.param = &p;
  n.value = p.value;
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::concat(const std::vector<Var>& xs, int axis) {
  OpAttrs a;
  a.axis = axis;
  return apply(Op::Concat, xs, std::move(a));
}

Tape::Var Tape::log(Var x, double floor) {
  OpAttrs a;
  a.log_floor = floor;
  return apply(Op::Log, {x}, std::move(a));
}

Tape::Var Tape::gather_rows(Var table, std::vector<int> ids) {
  OpAttrs a;
  a.indices = std::move(ids);
  return apply(Op::EmbeddingGather, {table}, std::move(a));
}

Tape::Var Tape::dropout(Var x, double keep_prob, uint64_t mask_seed) {
  OpAttrs a;
  a.keep_prob = keep_prob;
  a.mask_seed = mask_seed;
  return apply(Op::Dropout, {x}, std::move(a));
}

Tape::Var Tape::attention(Var q, Var k, Var v, std::vector<uint8_t> key_valid) {
  OpAttrs a;
  a.key_valid = std::move(key_valid);
  return apply(Op::ScaledDotAttention, {q, k, v}, std::move(a));
}

Tape::Var Tape::scale(Var x, double s) {
  return hadamard(x, constant(Tensor::full(value(x).shape(), s)));
}

int Tape::check_var(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw ValidationError("tape: node id " + std::to_string(v.id) + " is not on this tape");
  return v.id;
}

const Tape::Node& Tape::node(Var v) const { return nodes_[static_cast<size_t>(check_var(v))]; }
Tape::Node& Tape::node(Var v) { return nodes_[static_cast<size_t>(check_var(v))]; }

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tape::Var Tape::apply(Op op, const std::vector<Var>& inputs, OpAttrs attrs) {
  Node n;
  n.op = op;
  n.attrs = std::move(attrs);
  n.inputs.reserve(inputs.size());
  for (Var v : inputs) n.inputs.push_back(check_var(v));
  n.value = eval(n);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Tensor Tape::eval(Node& n) const {
  auto in = [&](size_t i) -> const Tensor& { return nodes_[static_cast<size_t>(n.inputs[i])].value; };
  auto arity = [&](size_t k) {
    if (n.inputs.size() != k)
      throw ValidationError(std::string(op_name(n.op)) + ": expects " + std::to_string(k) +
                            " inputs, got " + std::to_string(n.inputs.size()));
  };

  switch (n.op) {
    case Op::Matmul: {
      arity(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.ndim() == 2 && b.ndim() == 2) {
        if (a.cols() != b.rows()) shape_error(n.op, a, b);
        const int m = a.rows(), k = a.cols(), p = b.cols();
        Tensor out({m, p});
        for (int i = 0; i < m; ++i) {
          double* orow = out.data() + static_cast<size_t>(i) * p;
          const double* arow = a.data() + static_cast<size_t>(i) * k;
          for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b.data() + static_cast<size_t>(kk) * p;
            for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
          }
        }
        return out;
      }
      if (a.ndim() == 2 && b.ndim() == 1) {
        if (a.cols() != b.numel()) shape_error(n.op, a, b);
        const int m = a.rows(), k = a.cols();
        Tensor out({m});
        for (int i = 0; i < m; ++i) {
          const double* arow = a.data() + static_cast<size_t>(i) * k;
          double s = 0.0;
          for (int kk = 0; kk < k; ++kk) s += arow[kk] * b.at(kk);
          out.at(i) = s;
        }
        return out;
      }
      if (a.ndim() == 1 && b.ndim() == 2) {
        if (a.numel() != b.rows()) shape_error(n.op, a, b);
        const int k = b.rows(), p = b.cols();
        Tensor out({p});
        for (int kk = 0; kk < k; ++kk) {
          const double av = a.at(kk);
          if (av == 0.0) continue;
          const double* brow = b.data() + static_cast<size_t>(kk) * p;
          for (int j = 0; j < p; ++j) out.at(j) += av * brow[j];
        }
        return out;
      }
      shape_error(n.op, a, b);
    }
    case Op::Add: {
      arity(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        Tensor out = a;
        for (int i = 0; i < out.numel(); ++i) out.at(i) += b.at(i);
        return out;
      }
      if (a.ndim() == 2 && b.ndim() == 1 && a.cols() == b.numel()) {
        Tensor out = a;  // row-broadcast bias
        for (int r = 0; r < a.rows(); ++r)
          for (int c = 0; c < a.cols(); ++c) out.at(r, c) += b.at(c);
        return out;
      }
      shape_error(n.op, a, b);
    }
    case Op::Concat: {
      if (n.inputs.empty()) throw ValidationError("concat: needs at least one input");
      if (n.attrs.axis == 0) {
        int total = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          if (in(i).ndim() != 1) shape_error(n.op, in(i), "axis-0 concat expects 1-D inputs");
          total += in(i).numel();
        }
        Tensor out({total});
        int off = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          std::copy(in(i).vec().begin(), in(i).vec().end(), out.data() + off);
          off += in(i).numel();
        }
        return out;
      }
      if (n.attrs.axis == 1) {
        const int r = in(0).ndim() == 2 ? in(0).rows() : -1;
        if (r < 0) shape_error(n.op, in(0), "axis-1 concat expects 2-D inputs");
        int total = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          if (in(i).ndim() != 2 || in(i).rows() != r) shape_error(n.op, in(0), in(i));
          total += in(i).cols();
        }
        Tensor out({r, total});
        for (int row = 0; row < r; ++row) {
          int off = 0;
          for (size_t i = 0; i < n.inputs.size(); ++i) {
            const int c = in(i).cols();
            std::copy(in(i).data() + static_cast<size_t>(row) * c,
                      in(i).data() + static_cast<size_t>(row + 1) * c,
                      out.data() + static_cast<size_t>(row) * total + off);
            off += c;
          }
        }
        return out;
      }
      throw ValidationError("concat: axis must be 0 or 1");
    }
    case Op::Tanh: {
      arity(1);
      Tensor out = in(0);
      for (double& v : out.vec()) v = std::tanh(v);
      return out;
    }
    case Op::Softmax: {
      arity(1);
      const Tensor& x = in(0);
      Tensor out = x;
      const int ncols = x.ndim() == 2 ? x.cols() : x.numel();
      const int nrows = x.ndim() == 2 ? x.rows() : 1;
      for (int r = 0; r < nrows; ++r) {
        double* row = out.data() + static_cast<size_t>(r) * ncols;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < ncols; ++c) mx = std::max(mx, row[c]);
        if (!std::isfinite(mx))
          throw ValidationError("softmax: row " + std::to_string(r) + " has no finite entries");
        double sum = 0.0;
        for (int c = 0; c < ncols; ++c) {
          row[c] = std::exp(row[c] - mx);
          sum += row[c];
        }
        for (int c = 0; c < ncols; ++c) row[c] /= sum;
      }
      n.saved = out;
      return out;
    }
    case Op::Log: {
      arity(1);
      Tensor out = in(0);
      const double floor = n.attrs.log_floor;
      for (double& v : out.vec()) v = std::log(floor > 0.0 ? std::max(v, floor) : v);
      return out;
    }
    case Op::Hadamard: {
      arity(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (!a.same_shape(b)) shape_error(n.op, a, b);
      Tensor out = a;
      for (int i = 0; i < out.numel(); ++i) out.at(i) *= b.at(i);
      return out;
    }
    case Op::OuterProduct: {
      arity(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.ndim() != 1 || b.ndim() != 1) shape_error(n.op, a, b);
      Tensor out({a.numel(), b.numel()});
      for (int i = 0; i < a.numel(); ++i)
        for (int j = 0; j < b.numel(); ++j) out.at(i, j) = a.at(i) * b.at(j);
      return out;
    }
    case Op::FlattenRowMajor: {
      arity(1);
      return Tensor({in(0).numel()}, in(0).vec());
    }
    case Op::MaxPoolRows: {
      arity(1);
      const Tensor& x = in(0);
      if (x.ndim() != 2) shape_error(n.op, x, "expects a 2-D input");
      const int r = x.rows(), c = x.cols();
      Tensor out({c});
      n.saved_idx.assign(static_cast<size_t>(c), 0);
      for (int j = 0; j < c; ++j) {
        double best = x.at(0, j);
        int arg = 0;
        for (int i = 1; i < r; ++i) {
          if (x.at(i, j) > best) {
            best = x.at(i, j);
            arg = i;
          }
        }
        out.at(j) = best;
        n.saved_idx[static_cast<size_t>(j)] = arg;
      }
      return out;
    }
    case Op::Mean: {
      arity(1);
      double s = 0.0;
      for (double v : in(0).vec()) s += v;
      return Tensor::scalar(s / in(0).numel());
    }
    case Op::Square: {
      arity(1);
      Tensor out = in(0);
      for (double& v : out.vec()) v *= v;
      return out;
    }
    case Op::EmbeddingGather: {
      arity(1);
      const Tensor& table = in(0);
      if (table.ndim() != 2) shape_error(n.op, table, "expects a 2-D table");
      const int rows = static_cast<int>(n.attrs.indices.size());
      if (rows == 0) throw ValidationError("embedding_gather: empty index list");
      Tensor out({rows, table.cols()});
      for (int i = 0; i < rows; ++i) {
        const int id = n.attrs.indices[static_cast<size_t>(i)];
        if (id < 0 || id >= table.rows())
          throw ValidationError("embedding_gather: index " + std::to_string(id) +
                                " out of range for table " + table.shape_str());
        std::copy(table.data() + static_cast<size_t>(id) * table.cols(),
                  table.data() + static_cast<size_t>(id + 1) * table.cols(),
                  out.data() + static_cast<size_t>(i) * table.cols());
      }
      return out;
    }
    case Op::Dropout: {
      arity(1);
      const double keep = n.attrs.keep_prob;
      if (keep <= 0.0 || keep > 1.0)
        throw ValidationError("dropout: keep probability must be in (0, 1]");
      Tensor out = in(0);
      Tensor mask = Tensor::full(out.shape(), 1.0);
      if (keep < 1.0) {
        Rng rng(n.attrs.mask_seed);
        for (int i = 0; i < out.numel(); ++i) {
          const double m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
          mask.at(i) = m;
          out.at(i) *= m;
        }
      }
      n.saved = std::move(mask);
      return out;
    }
    case Op::LayerNorm: {
      arity(3);
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      const int ncols = x.ndim() == 2 ? x.cols() : x.numel();
      const int nrows = x.ndim() == 2 ? x.rows() : 1;
      if (gamma.ndim() != 1 || gamma.numel() != ncols) shape_error(n.op, x, gamma);
      if (beta.ndim() != 1 || beta.numel() != ncols) shape_error(n.op, x, beta);
      constexpr double kEps = 1e-5;
      Tensor out = x;
      Tensor xhat = x;
      n.saved_stats.assign(static_cast<size_t>(nrows), 0.0);
      for (int r = 0; r < nrows; ++r) {
        double* orow = out.data() + static_cast<size_t>(r) * ncols;
        double* hrow = xhat.data() + static_cast<size_t>(r) * ncols;
        double mu = 0.0;
        for (int c = 0; c < ncols; ++c) mu += orow[c];
        mu /= ncols;
        double var = 0.0;
        for (int c = 0; c < ncols; ++c) var += (orow[c] - mu) * (orow[c] - mu);
        var /= ncols;
        const double inv = 1.0 / std::sqrt(var + kEps);
        n.saved_stats[static_cast<size_t>(r)] = inv;
        for (int c = 0; c < ncols; ++c) {
          hrow[c] = (orow[c] - mu) * inv;
          orow[c] = gamma.at(c) * hrow[c] + beta.at(c);
        }
      }
      n.saved = std::move(xhat);
      return out;
    }
    case Op::ScaledDotAttention: {
      arity(3);
      const Tensor& q = in(0);
      const Tensor& k = in(1);
      const Tensor& v = in(2);
      if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.cols() != k.cols() ||
          k.rows() != v.rows())
        shape_error(n.op, q, k);
      const int nq = q.rows(), nk = k.rows(), d = q.cols(), dv = v.cols();
      if (!n.attrs.key_valid.empty() && static_cast<int>(n.attrs.key_valid.size()) != nk)
        throw ValidationError("scaled_dot_attention: key mask length " +
                              std::to_string(n.attrs.key_valid.size()) + " != key count " +
                              std::to_string(nk));
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
      Tensor probs({nq, nk});
      Tensor out({nq, dv});
      for (int i = 0; i < nq; ++i) {
        double* prow = probs.data() + static_cast<size_t>(i) * nk;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < nk; ++j) {
          if (!n.attrs.key_valid.empty() && !n.attrs.key_valid[static_cast<size_t>(j)]) {
            prow[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          double s = 0.0;
          const double* qi = q.data() + static_cast<size_t>(i) * d;
          const double* kj = k.data() + static_cast<size_t>(j) * d;
          for (int c = 0; c < d; ++c) s += qi[c] * kj[c];
          prow[j] = s * inv_sqrt_d;
          mx = std::max(mx, prow[j]);
        }
        if (!std::isfinite(mx))
          throw ValidationError("scaled_dot_attention: query row " + std::to_string(i) +
                                " has no valid keys");
        double sum = 0.0;
        for (int j = 0; j < nk; ++j) {
          prow[j] = std::isfinite(prow[j]) ? std::exp(prow[j] - mx) : 0.0;
          sum += prow[j];
        }
        double* orow = out.data() + static_cast<size_t>(i) * dv;
        for (int j = 0; j < nk; ++j) {
          prow[j] /= sum;
          if (prow[j] == 0.0) continue;
          const double* vj = v.data() + static_cast<size_t>(j) * dv;
          for (int c = 0; c < dv; ++c) orow[c] += prow[j] * vj[c];
        }
      }
      n.saved = std::move(probs);
      return out;
    }
  }
  throw ValidationError("unknown op_kind " + std::to_string(static_cast<int>(n.op)));
}

void Tape::backward(Var loss) {
  Node& top = node(loss);
  if (top.value.numel() != 1)
    throw ValidationError("backward: loss must be scalar, got shape " + top.value.shape_str());

  for (Node& n : nodes_) n.grad = Tensor();
  top.grad = Tensor::scalar(1.0);

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) continue;  // not on the path to the loss
    if (n.is_input) {
      if (n.param != nullptr && n.param->trainable) {
        for (int i = 0; i < n.grad.numel(); ++i) n.param->grad.at(i) += n.grad.at(i);
      }
      continue;
    }
    accumulate(n);
  }
}

void Tape::accumulate(Node& n) {
  auto input = [&](size_t i) -> Node& { return nodes_[static_cast<size_t>(n.inputs[i])]; };
  auto g = [&](size_t i) -> Tensor& {
    Node& m = input(i);
    if (m.grad.numel() == 0) m.grad = Tensor::zeros(m.value.shape());
    return m.grad;
  };
  const Tensor& dy = n.grad;

  switch (n.op) {
    case Op::Matmul: {
      const Tensor& a = input(0).value;
      const Tensor& b = input(1).value;
      Tensor& da = g(0);
      Tensor& db = g(1);
      if (a.ndim() == 2 && b.ndim() == 2) {
        const int m = a.rows(), k = a.cols(), p = b.cols();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double s = 0.0;
            for (int j = 0; j < p; ++j) s += dy.at(i, j) * b.at(kk, j);
            da.at(i, kk) += s;
          }
        for (int kk = 0; kk < k; ++kk)
          for (int j = 0; j < p; ++j) {
            double s = 0.0;
            for (int i = 0; i < m; ++i) s += a.at(i, kk) * dy.at(i, j);
            db.at(kk, j) += s;
          }
      } else if (a.ndim() == 2 && b.ndim() == 1) {
        const int m = a.rows(), k = a.cols();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            da.at(i, kk) += dy.at(i) * b.at(kk);
            db.at(kk) += a.at(i, kk) * dy.at(i);
          }
      } else {  // 1-D x 2-D
        const int k = b.rows(), p = b.cols();
        for (int kk = 0; kk < k; ++kk)
          for (int j = 0; j < p; ++j) {
            da.at(kk) += dy.at(j) * b.at(kk, j);
            db.at(kk, j) += a.at(kk) * dy.at(j);
          }
      }
      return;
    }
    case Op::Add: {
      const Tensor& a = input(0).value;
      const Tensor& b = input(1).value;
      Tensor& da = g(0);
      Tensor& db = g(1);
      for (int i = 0; i < da.numel(); ++i) da.at(i) += dy.at(i);
      if (a.same_shape(b)) {
        for (int i = 0; i < db.numel(); ++i) db.at(i) += dy.at(i);
      } else {  // row-broadcast: bias gradient is the column sum
        for (int r = 0; r < a.rows(); ++r)
          for (int c = 0; c < a.cols(); ++c) db.at(c) += dy.at(r, c);
      }
      return;
    }
    case Op::Concat: {
      if (n.attrs.axis == 0) {
        int off = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          Tensor& di = g(i);
          for (int j = 0; j < di.numel(); ++j) di.at(j) += dy.at(off + j);
          off += di.numel();
        }
      } else {
        const int r = n.value.rows();
        int off = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          Tensor& di = g(i);
          const int c = input(i).value.cols();
          for (int row = 0; row < r; ++row)
            for (int col = 0; col < c; ++col) di.at(row, col) += dy.at(row, off + col);
          off += c;
        }
      }
      return;
    }
    case Op::Tanh: {
      Tensor& dx = g(0);
      for (int i = 0; i < dx.numel(); ++i) {
        const double y = n.value.at(i);
        dx.at(i) += dy.at(i) * (1.0 - y * y);
      }
      return;
    }
    case Op::Softmax: {
      Tensor& dx = g(0);
      const Tensor& p = n.saved;
      const int ncols = p.ndim() == 2 ? p.cols() : p.numel();
      const int nrows = p.ndim() == 2 ? p.rows() : 1;
      for (int r = 0; r < nrows; ++r) {
        const double* prow = p.data() + static_cast<size_t>(r) * ncols;
        const double* gyrow = dy.data() + static_cast<size_t>(r) * ncols;
        double dot = 0.0;
        for (int c = 0; c < ncols; ++c) dot += gyrow[c] * prow[c];
        double* dxrow = dx.data() + static_cast<size_t>(r) * ncols;
        for (int c = 0; c < ncols; ++c) dxrow[c] += prow[c] * (gyrow[c] - dot);
      }
      return;
    }
    case Op::Log: {
      Tensor& dx = g(0);
      const Tensor& x = input(0).value;
      const double floor = n.attrs.log_floor;
      for (int i = 0; i < dx.numel(); ++i) {
        if (floor > 0.0 && x.at(i) <= floor)
          continue;  // clamped region is constant
        dx.at(i) += dy.at(i) / x.at(i);
      }
      return;
    }
    case Op::Hadamard: {
      const Tensor& a = input(0).value;
      const Tensor& b = input(1).value;
      Tensor& da = g(0);
      Tensor& db = g(1);
      for (int i = 0; i < da.numel(); ++i) {
        da.at(i) += dy.at(i) * b.at(i);
        db.at(i) += dy.at(i) * a.at(i);
      }
      return;
    }
    case Op::OuterProduct: {
      const Tensor& a = input(0).value;
      const Tensor& b = input(1).value;
      Tensor& da = g(0);
      Tensor& db = g(1);
      for (int i = 0; i < a.numel(); ++i)
        for (int j = 0; j < b.numel(); ++j) {
          da.at(i) += dy.at(i, j) * b.at(j);
          db.at(j) += dy.at(i, j) * a.at(i);
        }
      return;
    }
    case Op::FlattenRowMajor: {
      Tensor& dx = g(0);
      for (int i = 0; i < dx.numel(); ++i) dx.at(i) += dy.at(i);
      return;
    }
    case Op::MaxPoolRows: {
      Tensor& dx = g(0);
      for (int j = 0; j < n.value.numel(); ++j)
        dx.at(n.saved_idx[static_cast<size_t>(j)], j) += dy.at(j);
      return;
    }
    case Op::Mean: {
      Tensor& dx = g(0);
      const double s = dy.item() / dx.numel();
      for (int i = 0; i < dx.numel(); ++i) dx.at(i) += s;
      return;
    }
    case Op::Square: {
      Tensor& dx = g(0);
      const Tensor& x = input(0).value;
      for (int i = 0; i < dx.numel(); ++i) dx.at(i) += dy.at(i) * 2.0 * x.at(i);
      return;
    }
    case Op::EmbeddingGather: {
      Tensor& dt = g(0);
      const int c = dt.cols();
      for (size_t i = 0; i < n.attrs.indices.size(); ++i) {
        const int id = n.attrs.indices[i];
        for (int j = 0; j < c; ++j) dt.at(id, j) += dy.at(static_cast<int>(i), j);
      }
      return;
    }
    case Op::Dropout: {
      Tensor& dx = g(0);
      for (int i = 0; i < dx.numel(); ++i) dx.at(i) += dy.at(i) * n.saved.at(i);
      return;
    }
    case Op::LayerNorm: {
      const Tensor& gamma = input(1).value;
      const Tensor& xhat = n.saved;
      Tensor& dx = g(0);
      Tensor& dgamma = g(1);
      Tensor& dbeta = g(2);
      const int ncols = xhat.ndim() == 2 ? xhat.cols() : xhat.numel();
      const int nrows = xhat.ndim() == 2 ? xhat.rows() : 1;
      for (int r = 0; r < nrows; ++r) {
        const double* h = xhat.data() + static_cast<size_t>(r) * ncols;
        const double* dyr = dy.data() + static_cast<size_t>(r) * ncols;
        double* dxr = dx.data() + static_cast<size_t>(r) * ncols;
        const double inv = n.saved_stats[static_cast<size_t>(r)];
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (int c = 0; c < ncols; ++c) {
          const double dh = dyr[c] * gamma.at(c);
          sum_dh += dh;
          sum_dh_h += dh * h[c];
          dgamma.at(c) += dyr[c] * h[c];
          dbeta.at(c) += dyr[c];
        }
        for (int c = 0; c < ncols; ++c) {
          const double dh = dyr[c] * gamma.at(c);
          dxr[c] += inv * (dh - sum_dh / ncols - h[c] * sum_dh_h / ncols);
        }
      }
      return;
    }
    case Op::ScaledDotAttention: {
      const Tensor& q = input(0).value;
      const Tensor& k = input(1).value;
      const Tensor& v = input(2).value;
      const Tensor& p = n.saved;
      Tensor& dq = g(0);
      Tensor& dk = g(1);
      Tensor& dv = g(2);
      const int nq = q.rows(), nk = k.rows(), d = q.cols(), dvc = v.cols();
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
      for (int i = 0; i < nq; ++i) {
        // dV += P^T dO ; dP = dO V^T ; dS = P (dP - rowdot) / sqrt(d)
        std::vector<double> dp(static_cast<size_t>(nk), 0.0);
        for (int j = 0; j < nk; ++j) {
          const double pij = p.at(i, j);
          double s = 0.0;
          for (int c = 0; c < dvc; ++c) {
            s += dy.at(i, c) * v.at(j, c);
            dv.at(j, c) += pij * dy.at(i, c);
          }
          dp[static_cast<size_t>(j)] = s;
        }
        double dot = 0.0;
        for (int j = 0; j < nk; ++j) dot += dp[static_cast<size_t>(j)] * p.at(i, j);
        for (int j = 0; j < nk; ++j) {
          const double ds = p.at(i, j) * (dp[static_cast<size_t>(j)] - dot) * inv_sqrt_d;
          if (ds == 0.0) continue;
          for (int c = 0; c < d; ++c) {
            dq.at(i, c) += ds * k.at(j, c);
            dk.at(j, c) += ds * q.at(i, c);
          }
        }
      }
      return;
    }
  }
  throw ValidationError("backward: unknown op_kind");
}

}  // namespace g3m
