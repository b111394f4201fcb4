#pragma once

// Minimal reverse-mode automatic differentiation over row-major matrices.
//
// Batched sequences are stored "row stacked": a batch of B sequences of n
// tokens with width d is a (B*n) x d matrix whose block b occupies rows
// [b*n, (b+1)*n). Every op that mixes tokens takes the per-block row counts
// explicitly so that blocks never exchange information.

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace aurora::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// A tape of nodes. With recording disabled no backward closures are kept,
// which is what inference uses.
class Graph {
 public:
  using Backward = std::function<void(Graph&)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var param(Parameter& p);

  // Seeds d(loss)/d(loss) = 1 and propagates; parameter gradients are
  // accumulated into Parameter::grad (which must already be sized).
  void backward(const Var& loss);

  bool recording() const { return record_; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  bool needs_grad_id(int id) const { return nodes_[id].needs_grad; }

  const Matrix& value(int id) const {
    const Node& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.value;
  }
  Matrix& grad(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  // Adds a computed node. `parents` decides whether a gradient is needed;
  // the closure is only stored when recording and needed.
  Var push(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var push(Matrix value, const std::vector<Var>& parents, Backward backward);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Parameter* param = nullptr;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };

  bool record_;
  std::deque<Node> nodes_;
};

// ---- elementwise and linear algebra ----------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a (N x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a (N x m) * (1 + scale) + shift, where scale/shift are N x m.
Var modulate(const Var& a, const Var& scale, const Var& shift);
Var gelu(const Var& a);
Var silu(const Var& a);
Var softmax_rows(const Var& a);
// Per-row normalization; gain/bias are optional 1 x m rows.
Var layer_norm(const Var& a, const Var* gain, const Var* bias, double eps = 1e-5);

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a);
// Mean over rows of the squared row norm: (1/N) sum_i ||a_i||^2.
Var mean_row_sq_norm(const Var& a);

// ---- row/block bookkeeping -------------------------------------------------

Var concat_cols(const Var& a, const Var& b);
// For each block b, stacks parts[0] block b, parts[1] block b, ... The
// `rows` entry is the per-block row count of the corresponding part.
Var concat_blocks(const std::vector<Var>& parts, const std::vector<int>& rows);
// Rows [start, start+len) of every block of `n` rows.
Var slice_blocks(const Var& a, int n, int start, int len);
// Rows of `table` selected by `ids` (embedding lookup); gradients scatter-add.
Var gather_rows(const Var& table, const std::vector<int>& ids);
// Row r of `a` multiplied by factors[r].
Var scale_rows(const Var& a, const Eigen::VectorXd& factors);
// Repeats the whole matrix `times` times vertically.
Var tile(const Var& a, int times);
// Repeats each row `times` times consecutively.
Var repeat_rows(const Var& a, int times);
// Block b is taken from `a` when take_a[b] is true, else from `b`.
Var where_blocks(const std::vector<std::uint8_t>& take_a, const Var& a, const Var& b, int n);
// Per-block a_b * b_b^T for blocks of na and nb rows.
Var bmm_nt(const Var& a, const Var& b, int na, int nb);

// Rotary position encoding applied independently per head. `positions`
// gives the position of each row inside its block (size = rows per block).
Var rope(const Var& a, const std::vector<int>& positions, int heads, double base = 10000.0);

// ---- attention -------------------------------------------------------------

struct AttentionSpec {
  int batch = 1;
  int nq = 1;
  int nk = 1;
  int heads = 1;
  double scale = 1.0;
  bool causal = false;
  // batch x nk, nonzero = key usable. Empty means all keys usable.
  std::vector<std::uint8_t> key_mask;
  // Optional (batch*nq) x nk additive score bias, shared by every head and
  // added before scaling: S = (Q K^T + bias) * scale.
  std::optional<Var> bias;
  // When set, receives softmax weights, one (nq x nk) matrix per (block, head)
  // in block-major order.
  std::vector<Matrix>* weights_out = nullptr;
};

// Multi-head scaled dot-product attention over row-stacked blocks. Q is
// (batch*nq) x dk, K is (batch*nk) x dk, V is (batch*nk) x dv. Rows whose
// keys are all masked produce zero output.
Var attention(const Var& q, const Var& k, const Var& v, const AttentionSpec& spec);

}  // namespace aurora::ad
