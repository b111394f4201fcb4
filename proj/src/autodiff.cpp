#include "aurora/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace aurora::ad {

const Matrix& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::param(Parameter& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Graph::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad.setZero(v.rows(), v.cols());
  }
  return n.grad;
}

Var Graph::push(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return push(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Graph::push(Matrix value, const std::vector<Var>& parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (p.graph() != this) throw std::logic_error("autodiff: mixing graphs");
      n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::backward(const Var& loss) {
  if (!record_) throw std::logic_error("autodiff: backward on a non-recording graph");
  if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("autodiff: loss must be 1x1");
  grad(loss.id())(0, 0) += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this);
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols())
        n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

namespace {

Graph& graph_of(const Var& v) {
  if (!v.valid()) throw std::invalid_argument("autodiff: invalid variable");
  return *v.graph();
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
}

int next_id(const Graph& g) { return static_cast<int>(g.size()); }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  if (a.cols() != b.rows()) throw std::invalid_argument("autodiff: matmul inner dimension mismatch");
  Matrix out;
  out.noalias() = a.value() * b.value();
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  return g.push(std::move(out), {a, b}, [ia, ib, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia).noalias() += dc * g.value(ib).transpose();
    if (g.needs_grad_id(ib)) g.grad(ib).noalias() += g.value(ia).transpose() * dc;
  });
}

Var add(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  check_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  return g.push(a.value() + b.value(), {a, b}, [ia, ib, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia) += dc;
    if (g.needs_grad_id(ib)) g.grad(ib) += dc;
  });
}

Var sub(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  check_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  return g.push(a.value() - b.value(), {a, b}, [ia, ib, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia) += dc;
    if (g.needs_grad_id(ib)) g.grad(ib) -= dc;
  });
}

Var mul(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  check_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  return g.push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia) += dc.cwiseProduct(g.value(ib));
    if (g.needs_grad_id(ib)) g.grad(ib) += dc.cwiseProduct(g.value(ia));
  });
}

Var scale(const Var& a, double s) {
  Graph& g = graph_of(a);
  const int ia = a.id(), self = next_id(g);
  return g.push(a.value() * s, {a}, [ia, self, s](Graph& g) { g.grad(ia) += g.grad(self) * s; });
}

Var add_row(const Var& a, const Var& row) {
  Graph& g = graph_of(a);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("autodiff: add_row shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id(), ir = row.id(), self = next_id(g);
  return g.push(std::move(out), {a, row}, [ia, ir, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia) += dc;
    if (g.needs_grad_id(ir)) g.grad(ir) += dc.colwise().sum();
  });
}

Var modulate(const Var& a, const Var& scale_v, const Var& shift) {
  Graph& g = graph_of(a);
  check_same_shape(a, scale_v, "modulate");
  check_same_shape(a, shift, "modulate");
  Matrix out = a.value().cwiseProduct((scale_v.value().array() + 1.0).matrix()) + shift.value();
  const int ia = a.id(), is = scale_v.id(), ih = shift.id(), self = next_id(g);
  return g.push(std::move(out), {a, scale_v, shift}, [ia, is, ih, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia) += dc.cwiseProduct((g.value(is).array() + 1.0).matrix());
    if (g.needs_grad_id(is)) g.grad(is) += dc.cwiseProduct(g.value(ia));
    if (g.needs_grad_id(ih)) g.grad(ih) += dc;
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  Graph& g = graph_of(a);
  Matrix out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self](Graph& g) {
    const Matrix& x = g.value(ia);
    Matrix d = x.unaryExpr([](double v) {
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    g.grad(ia) += g.grad(self).cwiseProduct(d);
  });
}

Var silu(const Var& a) {
  Graph& g = graph_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return x / (1.0 + std::exp(-x)); });
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self](Graph& g) {
    Matrix d = g.value(ia).unaryExpr([](double v) {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    });
    g.grad(ia) += g.grad(self).cwiseProduct(d);
  });
}

namespace {

void softmax_row_inplace(Eigen::Ref<RowVector> row) {
  const double mx = row.maxCoeff();
  if (!std::isfinite(mx)) {
    row.setZero();
    return;
  }
  row = (row.array() - mx).exp().matrix();
  row /= row.sum();
}

}  // namespace

Var softmax_rows(const Var& a) {
  Graph& g = graph_of(a);
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) softmax_row_inplace(out.row(r));
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self](Graph& g) {
    const Matrix& y = g.value(self);
    const Matrix& dy = g.grad(self);
    Eigen::VectorXd dots = dy.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct(dy - dots.replicate(1, y.cols()));
    g.grad(ia) += dx;
  });
}

Var layer_norm(const Var& a, const Var* gain, const Var* bias, double eps) {
  Graph& g = graph_of(a);
  const Matrix& x = a.value();
  const Eigen::Index n = x.rows(), m = x.cols();
  if (gain != nullptr && (gain->rows() != 1 || gain->cols() != m))
    throw std::invalid_argument("autodiff: layer_norm gain shape");
  if (bias != nullptr && (bias->rows() != 1 || bias->cols() != m))
    throw std::invalid_argument("autodiff: layer_norm bias shape");
  auto xhat = std::make_shared<Matrix>(n, m);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = (x.row(r).array() - mu) * is;
  }
  Matrix out = *xhat;
  if (gain != nullptr) out = out.array().rowwise() * gain->value().row(0).array();
  if (bias != nullptr) out.rowwise() += bias->value().row(0);

  std::vector<Var> parents{a};
  const int ig = gain != nullptr ? gain->id() : -1;
  const int ib = bias != nullptr ? bias->id() : -1;
  if (gain != nullptr) parents.push_back(*gain);
  if (bias != nullptr) parents.push_back(*bias);
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), parents, [ia, ig, ib, self, xhat, inv_std](Graph& g) {
    const Matrix& dy = g.grad(self);
    Matrix dxhat = dy;
    if (ig >= 0) {
      dxhat = dy.array().rowwise() * g.value(ig).row(0).array();
      if (g.needs_grad_id(ig)) g.grad(ig) += dy.cwiseProduct(*xhat).colwise().sum();
    }
    if (ib >= 0 && g.needs_grad_id(ib)) g.grad(ib) += dy.colwise().sum();
    if (!g.needs_grad_id(ia)) return;
    const double m = static_cast<double>(dy.cols());
    Matrix& dx = g.grad(ia);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const double mean_d = dxhat.row(r).sum() / m;
      const double mean_dx = dxhat.row(r).dot(xhat->row(r)) / m;
      dx.row(r).array() += (*inv_std)(r) * (dxhat.row(r).array() - mean_d - xhat->row(r).array() * mean_dx);
    }
  });
}

Var sum(const Var& a) {
  Graph& g = graph_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self](Graph& g) { g.grad(ia).array() += g.grad(self)(0, 0); });
}

Var mean_row_sq_norm(const Var& a) {
  Graph& g = graph_of(a);
  const double n = static_cast<double>(a.rows());
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm() / n;
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self, n](Graph& g) {
    g.grad(ia) += g.value(ia) * (2.0 * g.grad(self)(0, 0) / n);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  if (a.rows() != b.rows()) throw std::invalid_argument("autodiff: concat_cols row mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return g.push(std::move(out), {a, b}, [ia, ib, self, ca, cb](Graph& g) {
    const Matrix& dc = g.grad(self);
    if (g.needs_grad_id(ia)) g.grad(ia) += dc.leftCols(ca);
    if (g.needs_grad_id(ib)) g.grad(ib) += dc.rightCols(cb);
  });
}

Var concat_blocks(const std::vector<Var>& parts, const std::vector<int>& rows) {
  if (parts.empty() || parts.size() != rows.size()) throw std::invalid_argument("autodiff: concat_blocks arity");
  Graph& g = graph_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  if (rows[0] <= 0 || parts[0].rows() % rows[0] != 0) throw std::invalid_argument("autodiff: concat_blocks rows");
  const Eigen::Index batch = parts[0].rows() / rows[0];
  int total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].cols() != cols || parts[i].rows() != batch * rows[i])
      throw std::invalid_argument("autodiff: concat_blocks shape mismatch");
    total += rows[i];
  }
  Matrix out(batch * total, cols);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Eigen::Index off = b * total;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      out.middleRows(off, rows[i]) = parts[i].value().middleRows(b * rows[i], rows[i]);
      off += rows[i];
    }
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  const int self = next_id(g);
  return g.push(std::move(out), parts, [ids, rows, total, batch, self](Graph& g) {
    const Matrix& dc = g.grad(self);
    for (Eigen::Index b = 0; b < batch; ++b) {
      Eigen::Index off = b * total;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (g.needs_grad_id(ids[i])) g.grad(ids[i]).middleRows(b * rows[i], rows[i]) += dc.middleRows(off, rows[i]);
        off += rows[i];
      }
    }
  });
}

Var slice_blocks(const Var& a, int n, int start, int len) {
  Graph& g = graph_of(a);
  if (n <= 0 || a.rows() % n != 0 || start < 0 || len <= 0 || start + len > n)
    throw std::invalid_argument("autodiff: slice_blocks range");
  const Eigen::Index batch = a.rows() / n;
  Matrix out(batch * len, a.cols());
  for (Eigen::Index b = 0; b < batch; ++b) out.middleRows(b * len, len) = a.value().middleRows(b * n + start, len);
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self, batch, n, start, len](Graph& g) {
    const Matrix& dc = g.grad(self);
    Matrix& da = g.grad(ia);
    for (Eigen::Index b = 0; b < batch; ++b) da.middleRows(b * n + start, len) += dc.middleRows(b * len, len);
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  Graph& g = graph_of(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= table.rows()) throw std::out_of_range("autodiff: gather_rows id out of range");
    out.row(static_cast<Eigen::Index>(r)) = table.value().row(ids[r]);
  }
  const int it = table.id(), self = next_id(g);
  return g.push(std::move(out), {table}, [it, self, ids](Graph& g) {
    const Matrix& dc = g.grad(self);
    Matrix& dt = g.grad(it);
    for (std::size_t r = 0; r < ids.size(); ++r) dt.row(ids[r]) += dc.row(static_cast<Eigen::Index>(r));
  });
}

Var scale_rows(const Var& a, const Eigen::VectorXd& factors) {
  Graph& g = graph_of(a);
  if (factors.size() != a.rows()) throw std::invalid_argument("autodiff: scale_rows size");
  Matrix out = a.value().array().colwise() * factors.array();
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self, factors](Graph& g) {
    g.grad(ia).array() += g.grad(self).array().colwise() * factors.array();
  });
}

Var tile(const Var& a, int times) {
  Graph& g = graph_of(a);
  if (times <= 0) throw std::invalid_argument("autodiff: tile count");
  Matrix out = a.value().replicate(times, 1);
  const int ia = a.id(), self = next_id(g);
  const Eigen::Index n = a.rows();
  return g.push(std::move(out), {a}, [ia, self, times, n](Graph& g) {
    const Matrix& dc = g.grad(self);
    Matrix& da = g.grad(ia);
    for (int t = 0; t < times; ++t) da += dc.middleRows(t * n, n);
  });
}

Var repeat_rows(const Var& a, int times) {
  Graph& g = graph_of(a);
  if (times <= 0) throw std::invalid_argument("autodiff: repeat count");
  Matrix out(a.rows() * times, a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (int t = 0; t < times; ++t) out.row(r * times + t) = a.value().row(r);
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self, times](Graph& g) {
    const Matrix& dc = g.grad(self);
    Matrix& da = g.grad(ia);
    for (Eigen::Index r = 0; r < da.rows(); ++r)
      for (int t = 0; t < times; ++t) da.row(r) += dc.row(r * times + t);
  });
}

Var where_blocks(const std::vector<std::uint8_t>& take_a, const Var& a, const Var& b, int n) {
  Graph& g = graph_of(a);
  check_same_shape(a, b, "where_blocks");
  if (a.rows() != static_cast<Eigen::Index>(take_a.size()) * n)
    throw std::invalid_argument("autodiff: where_blocks mask size");
  Matrix out(a.rows(), a.cols());
  for (std::size_t blk = 0; blk < take_a.size(); ++blk)
    out.middleRows(blk * n, n) = (take_a[blk] ? a : b).value().middleRows(blk * n, n);
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  return g.push(std::move(out), {a, b}, [ia, ib, self, take_a, n](Graph& g) {
    const Matrix& dc = g.grad(self);
    for (std::size_t blk = 0; blk < take_a.size(); ++blk) {
      const int target = take_a[blk] ? ia : ib;
      if (g.needs_grad_id(target)) g.grad(target).middleRows(blk * n, n) += dc.middleRows(blk * n, n);
    }
  });
}

Var bmm_nt(const Var& a, const Var& b, int na, int nb) {
  Graph& g = graph_of(a);
  if (na <= 0 || nb <= 0 || a.rows() % na != 0 || a.cols() != b.cols())
    throw std::invalid_argument("autodiff: bmm_nt shape");
  const Eigen::Index batch = a.rows() / na;
  if (b.rows() != batch * nb) throw std::invalid_argument("autodiff: bmm_nt batch mismatch");
  Matrix out(batch * na, nb);
  for (Eigen::Index i = 0; i < batch; ++i)
    out.middleRows(i * na, na).noalias() = a.value().middleRows(i * na, na) * b.value().middleRows(i * nb, nb).transpose();
  const int ia = a.id(), ib = b.id(), self = next_id(g);
  return g.push(std::move(out), {a, b}, [ia, ib, self, batch, na, nb](Graph& g) {
    const Matrix& dc = g.grad(self);
    const bool need_a = g.needs_grad_id(ia), need_b = g.needs_grad_id(ib);
    for (Eigen::Index i = 0; i < batch; ++i) {
      auto dci = dc.middleRows(i * na, na);
      if (need_a) g.grad(ia).middleRows(i * na, na).noalias() += dci * g.value(ib).middleRows(i * nb, nb);
      if (need_b) g.grad(ib).middleRows(i * nb, nb).noalias() += dci.transpose() * g.value(ia).middleRows(i * na, na);
    }
  });
}

namespace {

// Rotates (x[2i], x[2i+1]) pairs of every head by angle pos * base^(-2i/dh);
// sign = -1 applies the inverse rotation.
void rotate_rows(Matrix& m, const std::vector<int>& positions, int heads, double base, double sign) {
  const Eigen::Index n = static_cast<Eigen::Index>(positions.size());
  const Eigen::Index dh = m.cols() / heads;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double pos = positions[r % n];
    for (int h = 0; h < heads; ++h) {
      for (Eigen::Index i = 0; i < dh / 2; ++i) {
        const double theta = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
        const double c = std::cos(theta), s = sign * std::sin(theta);
        const Eigen::Index c0 = h * dh + 2 * i;
        const double x0 = m(r, c0), x1 = m(r, c0 + 1);
        m(r, c0) = x0 * c - x1 * s;
        m(r, c0 + 1) = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace

Var rope(const Var& a, const std::vector<int>& positions, int heads, double base) {
  Graph& g = graph_of(a);
  if (heads <= 0 || a.cols() % heads != 0 || (a.cols() / heads) % 2 != 0)
    throw std::invalid_argument("autodiff: rope needs an even per-head width");
  if (positions.empty() || a.rows() % static_cast<Eigen::Index>(positions.size()) != 0)
    throw std::invalid_argument("autodiff: rope positions do not tile the rows");
  Matrix out = a.value();
  rotate_rows(out, positions, heads, base, 1.0);
  const int ia = a.id(), self = next_id(g);
  return g.push(std::move(out), {a}, [ia, self, positions, heads, base](Graph& g) {
    Matrix d = g.grad(self);
    rotate_rows(d, positions, heads, base, -1.0);
    g.grad(ia) += d;
  });
}

Var attention(const Var& q, const Var& k, const Var& v, const AttentionSpec& spec) {
  Graph& g = graph_of(q);
  const int B = spec.batch, nq = spec.nq, nk = spec.nk, H = spec.heads;
  if (B <= 0 || nq <= 0 || nk <= 0 || H <= 0) throw std::invalid_argument("attention: bad sizes");
  if (q.rows() != B * nq || k.rows() != B * nk || v.rows() != B * nk)
    throw std::invalid_argument("attention: row counts do not match batch layout");
  if (q.cols() != k.cols() || q.cols() % H != 0 || v.cols() % H != 0)
    throw std::invalid_argument("attention: width/head mismatch");
  if (!spec.key_mask.empty() && spec.key_mask.size() != static_cast<std::size_t>(B) * nk)
    throw std::invalid_argument("attention: key mask size");
  if (spec.causal && nq != nk) throw std::invalid_argument("attention: causal requires nq == nk");
  if (spec.bias && (spec.bias->rows() != B * nq || spec.bias->cols() != nk))
    throw std::invalid_argument("attention: bias shape");

  const Eigen::Index dkh = q.cols() / H, dvh = v.cols() / H;
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  auto weights = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(B) * H);
  Matrix out(B * nq, v.cols());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < H; ++h) {
      Matrix s = Q.block(b * nq, h * dkh, nq, dkh) * K.block(b * nk, h * dkh, nk, dkh).transpose();
      if (spec.bias) s += spec.bias->value().middleRows(b * nq, nq);
      s *= spec.scale;
      for (int i = 0; i < nq; ++i) {
        for (int j = 0; j < nk; ++j) {
          const bool masked = (!spec.key_mask.empty() && spec.key_mask[b * nk + j] == 0) || (spec.causal && j > i);
          if (masked) s(i, j) = kNegInf;
        }
        softmax_row_inplace(s.row(i));
      }
      out.block(b * nq, h * dvh, nq, dvh).noalias() = s * V.block(b * nk, h * dvh, nk, dvh);
      (*weights)[b * H + h] = std::move(s);
    }
  }
  if (spec.weights_out != nullptr) *spec.weights_out = *weights;

  std::vector<Var> parents{q, k, v};
  const int ibias = spec.bias ? spec.bias->id() : -1;
  if (spec.bias) parents.push_back(*spec.bias);
  const int iq = q.id(), ik = k.id(), iv = v.id(), self = next_id(g);
  const double sc = spec.scale;
  return g.push(std::move(out), parents, [=](Graph& g) {
    const Matrix& dout = g.grad(self);
    const Matrix& Qv = g.value(iq);
    const Matrix& Kv = g.value(ik);
    const Matrix& Vv = g.value(iv);
    const bool nq_ = g.needs_grad_id(iq), nk_ = g.needs_grad_id(ik), nv_ = g.needs_grad_id(iv);
    const bool nb_ = ibias >= 0 && g.needs_grad_id(ibias);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const Matrix& a = (*weights)[b * H + h];
        auto dO = dout.block(b * nq, h * dvh, nq, dvh);
        if (nv_) g.grad(iv).block(b * nk, h * dvh, nk, dvh).noalias() += a.transpose() * dO;
        Matrix da = dO * Vv.block(b * nk, h * dvh, nk, dvh).transpose();
        Eigen::VectorXd dots = da.cwiseProduct(a).rowwise().sum();
        Matrix ds = a.cwiseProduct(da - dots.replicate(1, nk)) * sc;
        if (nq_) g.grad(iq).block(b * nq, h * dkh, nq, dkh).noalias() += ds * Kv.block(b * nk, h * dkh, nk, dkh);
        if (nk_) g.grad(ik).block(b * nk, h * dkh, nk, dkh).noalias() += ds.transpose() * Qv.block(b * nq, h * dkh, nq, dkh);
        if (nb_) g.grad(ibias).middleRows(b * nq, nq) += ds;
      }
    }
  });
}

}  // namespace aurora::ad
