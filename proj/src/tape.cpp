#include "forgetlab/tape.hpp"

#include "forgetlab/errors.hpp"

#include <cmath>
#include <string>

namespace forgetlab::numerics {

namespace {

using Eigen::Index;
using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;

void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

}  // namespace

Tape::Var Tape::push(Array value, bool requires_grad) {
  if (backward_done_) throw ContractError("tape already differentiated; build a new tape");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw IndexError("tape variable " + std::to_string(v.id) + " out of range");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw IndexError("tape variable " + std::to_string(v.id) + " out of range");
  return nodes_[v.id];
}

Array& Tape::adjoint(Var v) { return nodes_[v.id].grad; }

bool Tape::any_grad(std::initializer_list<Var> vars) const {
  for (Var v : vars)
    if (node(v).requires_grad) return true;
  return false;
}

Tape::Var Tape::constant(Array value) { return push(std::move(value), false); }

Tape::Var Tape::variable(Array value) { return push(std::move(value), true); }

Tape::Var Tape::parameter(const Array& value) {
  Var v = push(Array{}, true);
  nodes_[v.id].borrowed = &value;
  return v;
}

const Array& Tape::value(Var v) const { return node(v).value(); }

const Array& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.requires_grad) throw ContractError("grad() requested for a constant");
  if (!backward_done_) throw ContractError("grad() requested before backward()");
  return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tape::Var Tape::matmul(Var a, Var b) {
  Var out = push(numerics::matmul(value(a), value(b)), any_grad({a, b}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, a, b, out] {
      const auto dc = nodes_[out.id].grad.mat();
      if (node(a).requires_grad) adjoint(a).mat().noalias() += dc * value(b).mat().transpose();
      if (node(b).requires_grad) adjoint(b).mat().noalias() += value(a).mat().transpose() * dc;
    };
  }
  return out;
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
  Var out = push(numerics::matmul_nt(value(a), value(b)), any_grad({a, b}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, a, b, out] {
      const auto dc = nodes_[out.id].grad.mat();
      if (node(a).requires_grad) adjoint(a).mat().noalias() += dc * value(b).mat();
      if (node(b).requires_grad) adjoint(b).mat().noalias() += dc.transpose() * value(a).mat();
    };
  }
  return out;
}

Tape::Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Array y = value(a);
  y.mat() += value(b).mat();
  Var out = push(std::move(y), any_grad({a, b}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, a, b, out] {
      const auto dy = nodes_[out.id].grad.mat();
      if (node(a).requires_grad) adjoint(a).mat() += dy;
      if (node(b).requires_grad) adjoint(b).mat() += dy;
    };
  }
  return out;
}

Tape::Var Tape::add_bias(Var x, Var bias) {
  const Array& xv = value(x);
  const Array& bv = value(bias);
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: " + shape_string(xv.shape()) + " + " + shape_string(bv.shape()));
  }
  Array y = xv;
  const Eigen::Map<const Eigen::RowVectorXd> b(bv.data(), static_cast<Index>(bv.size()));
  y.mat().rowwise() += b;
  Var out = push(std::move(y), any_grad({x, bias}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, bias, out] {
      const auto dy = nodes_[out.id].grad.mat();
      if (node(x).requires_grad) adjoint(x).mat() += dy;
      if (node(bias).requires_grad) {
        Array& db = adjoint(bias);
        Eigen::Map<Eigen::RowVectorXd>(db.data(), static_cast<Index>(db.size())) += dy.colwise().sum();
      }
    };
  }
  return out;
}

Tape::Var Tape::add_tiled(Var x, Var tile) {
  const Array& xv = value(x);
  const Array& tv = value(tile);
  const std::size_t block = tv.rows();
  if (tv.cols() != xv.cols() || block == 0 || xv.rows() % block != 0) {
    throw DimensionError("add_tiled: " + shape_string(xv.shape()) + " + " + shape_string(tv.shape()));
  }
  Array y = xv;
  const Index nb = static_cast<Index>(xv.rows() / block);
  const Index bl = static_cast<Index>(block);
  for (Index b = 0; b < nb; ++b) y.mat().middleRows(b * bl, bl) += tv.mat();
  Var out = push(std::move(y), any_grad({x, tile}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, tile, out, nb, bl] {
      const auto dy = nodes_[out.id].grad.mat();
      if (node(x).requires_grad) adjoint(x).mat() += dy;
      if (node(tile).requires_grad) {
        auto dt = adjoint(tile).mat();
        for (Index b = 0; b < nb; ++b) dt += dy.middleRows(b * bl, bl);
      }
    };
  }
  return out;
}

Tape::Var Tape::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  Array y = value(a);
  y.mat().array() *= value(b).mat().array();
  Var out = push(std::move(y), any_grad({a, b}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, a, b, out] {
      const auto dy = nodes_[out.id].grad.mat().array();
      if (node(a).requires_grad) adjoint(a).mat().array() += dy * value(b).mat().array();
      if (node(b).requires_grad) adjoint(b).mat().array() += dy * value(a).mat().array();
    };
  }
  return out;
}

Tape::Var Tape::scale(Var x, double factor) {
  Array y = value(x);
  y.mat() *= factor;
  Var out = push(std::move(y), any_grad({x}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, out, factor] { adjoint(x).mat() += factor * nodes_[out.id].grad.mat(); };
  }
  return out;
}

Tape::Var Tape::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  Var out = push(Array::scalar(s), any_grad({x}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, out] { adjoint(x).mat().array() += nodes_[out.id].grad.item(); };
  }
  return out;
}

Tape::Var Tape::gelu(Var x) {
  // tanh(u) = 1 - 2 / (exp(2u) + 1) keeps the whole pass on vectorized exp.
  const auto xs = value(x).mat().array();
  RowArray u = kGeluC * (xs + kGeluA * xs.cube());
  RowArray t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
  Array y = Array::uninitialized(value(x).shape());
  y.mat().array() = 0.5 * xs * (1.0 + t);
  Var out = push(std::move(y), any_grad({x}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, out, t = std::move(t)] {
      const auto xs = value(x).mat().array();
      const auto dy = nodes_[out.id].grad.mat().array();
      const auto du = kGeluC * (1.0 + 3.0 * kGeluA * xs.square());
      adjoint(x).mat().array() += dy * (0.5 * (1.0 + t) + 0.5 * xs * (1.0 - t.square()) * du);
    };
  }
  return out;
}

Tape::Var Tape::softmax(Var x) {
  Var out = push(numerics::softmax(value(x)), any_grad({x}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, out] {
      const auto y = value(out).mat();
      const auto dy = nodes_[out.id].grad.mat();
      auto dx = adjoint(x).mat();
      for (Index r = 0; r < y.rows(); ++r) {
        const double inner = y.row(r).dot(dy.row(r));
        dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - inner);
      }
    };
  }
  return out;
}

Tape::Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Array& xv = value(x);
  const Array& gv = value(gamma);
  const Array& bv = value(beta);
  const std::size_t d = xv.cols();
  if (d == 0 || gv.size() != d || bv.size() != d) {
    throw DimensionError("layer_norm: input " + shape_string(xv.shape()) + " with gamma " +
                         shape_string(gv.shape()));
  }
  const Index rows = static_cast<Index>(xv.rows());
  const Index cols = static_cast<Index>(d);
  Array xhat = xv;
  Eigen::VectorXd inv_std(rows);
  auto xh = xhat.mat();
  for (Index r = 0; r < rows; ++r) {
    auto row = xh.row(r);
    row.array() -= row.mean();
    inv_std[r] = 1.0 / std::sqrt(row.squaredNorm() / static_cast<double>(d) + eps);
    row *= inv_std[r];
  }
  Array y = xhat;
  const Eigen::Map<const Eigen::RowVectorXd> g(gv.data(), cols);
  const Eigen::Map<const Eigen::RowVectorXd> b(bv.data(), cols);
  {
    auto ym = y.mat();
    ym.array().rowwise() *= g.array();
    ym.rowwise() += b;
  }
  Var out = push(std::move(y), any_grad({x, gamma, beta}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                          cols] {
      const auto dy = nodes_[out.id].grad.mat();
      const auto xh = xhat.mat();
      if (node(gamma).requires_grad) {
        Array& dg = adjoint(gamma);
        Eigen::Map<Eigen::RowVectorXd>(dg.data(), cols) += dy.cwiseProduct(xh).colwise().sum();
      }
      if (node(beta).requires_grad) {
        Array& db = adjoint(beta);
        Eigen::Map<Eigen::RowVectorXd>(db.data(), cols) += dy.colwise().sum();
      }
      if (node(x).requires_grad) {
        const Eigen::Map<const Eigen::RowVectorXd> g(value(gamma).data(), cols);
        auto dx = adjoint(x).mat();
        const double n = static_cast<double>(cols);
        Eigen::RowVectorXd dxh(cols);
        for (Index r = 0; r < rows; ++r) {
          dxh = dy.row(r).cwiseProduct(g);
          const double s1 = dxh.sum();
          const double s2 = dxh.dot(xh.row(r));
          dx.row(r).array() += (inv_std[r] / n) * (n * dxh.array() - s1 - xh.row(r).array() * s2);
        }
      }
    };
  }
  return out;
}

Tape::Var Tape::block_attention(Var q, Var k, Var v, std::size_t block, double scale) {
  const Array& qv = value(q);
  const Array& kv = value(k);
  const Array& vv = value(v);
  require_same_shape(qv, kv, "block_attention q/k");
  if (block == 0 || qv.rank() != 2 || qv.rows() % block != 0 || vv.rows() != qv.rows()) {
    throw DimensionError("block_attention: q " + shape_string(qv.shape()) + ", v " + shape_string(vv.shape()) +
                         ", block " + std::to_string(block));
  }
  const Index bl = static_cast<Index>(block);
  const Index nb = static_cast<Index>(qv.rows() / block);
  Array probs = Array::uninitialized({qv.rows(), block});
  Array y = Array::uninitialized({qv.rows(), vv.cols()});
  auto pm = probs.mat();
  auto ym = y.mat();
  for (Index b = 0; b < nb; ++b) {
    const auto qb = qv.mat().middleRows(b * bl, bl);
    const auto kb = kv.mat().middleRows(b * bl, bl);
    auto pb = pm.middleRows(b * bl, bl);
    pb.noalias() = scale * (qb * kb.transpose());
    for (Index r = 0; r < bl; ++r) {
      auto row = pb.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
    ym.middleRows(b * bl, bl).noalias() = pb * vv.mat().middleRows(b * bl, bl);
  }
  last_attention_ = probs;
  Var out = push(std::move(y), any_grad({q, k, v}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, q, k, v, out, probs = std::move(probs), bl, nb, scale] {
      const auto dy = nodes_[out.id].grad.mat();
      const auto pm = probs.mat();
      const bool gq = node(q).requires_grad, gk = node(k).requires_grad, gv = node(v).requires_grad;
      RowMatrix dp(bl, bl);
      for (Index b = 0; b < nb; ++b) {
        const auto pb = pm.middleRows(b * bl, bl);
        const auto dyb = dy.middleRows(b * bl, bl);
        if (gv) adjoint(v).mat().middleRows(b * bl, bl).noalias() += pb.transpose() * dyb;
        if (!gq && !gk) continue;
        dp.noalias() = dyb * value(v).mat().middleRows(b * bl, bl).transpose();
        for (Index r = 0; r < bl; ++r) {
          const double inner = dp.row(r).dot(pb.row(r));
          dp.row(r).array() = pb.row(r).array() * (dp.row(r).array() - inner) * scale;
        }
        if (gq) adjoint(q).mat().middleRows(b * bl, bl).noalias() += dp * value(k).mat().middleRows(b * bl, bl);
        if (gk)
          adjoint(k).mat().middleRows(b * bl, bl).noalias() +=
              dp.transpose() * value(q).mat().middleRows(b * bl, bl);
      }
    };
  }
  return out;
}

Tape::Var Tape::gather_rows(Var table, std::vector<std::size_t> ids) {
  const Array& tv = value(table);
  const std::size_t n = tv.rows();
  const std::size_t d = tv.cols();
  Array y = Array::uninitialized({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= n) {
      throw IndexError("row id " + std::to_string(ids[i]) + " out of range for table with " + std::to_string(n) +
                       " rows");
    }
    std::copy_n(tv.data() + ids[i] * d, d, y.data() + i * d);
  }
  Var out = push(std::move(y), any_grad({table}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, table, out, ids = std::move(ids), d] {
      const Array& dy = nodes_[out.id].grad;
      Array& dt = adjoint(table);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = dy.data() + i * d;
        double* dst = dt.data() + ids[i] * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

Tape::Var Tape::concat_rows(Var top, Var bottom) {
  const Array& a = value(top);
  const Array& b = value(bottom);
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: " + shape_string(a.shape()) + " over " + shape_string(b.shape()));
  }
  Array y = Array::uninitialized({a.rows() + b.rows(), a.cols()});
  std::copy(a.values().begin(), a.values().end(), y.data());
  std::copy(b.values().begin(), b.values().end(), y.data() + a.size());
  Var out = push(std::move(y), any_grad({top, bottom}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, top, bottom, out] {
      const Array& dy = nodes_[out.id].grad;
      if (node(top).requires_grad) {
        auto dt = adjoint(top).values();
        for (std::size_t i = 0; i < dt.size(); ++i) dt[i] += dy[i];
      }
      if (node(bottom).requires_grad) {
        auto db = adjoint(bottom).values();
        const std::size_t offset = value(top).size();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[offset + i];
      }
    };
  }
  return out;
}

Tape::Var Tape::cross_entropy(Var logits, std::vector<std::size_t> targets) {
  const Array& lv = value(logits);
  if (lv.rows() != targets.size() || targets.empty()) {
    throw DimensionError("cross_entropy: " + std::to_string(lv.rows()) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  Array probs = numerics::softmax(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= lv.cols()) throw IndexError("cross_entropy target " + std::to_string(targets[r]));
    const auto row = lv.mat().row(static_cast<Index>(r));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    loss += lse - lv(r, targets[r]);
  }
  loss /= static_cast<double>(targets.size());
  Var out = push(Array::scalar(loss), any_grad({logits}));
  if (node(out).requires_grad) {
    node(out).backprop = [this, logits, out, probs = std::move(probs), targets = std::move(targets)]() mutable {
      const double g = nodes_[out.id].grad.item() / static_cast<double>(targets.size());
      for (std::size_t r = 0; r < targets.size(); ++r) probs(r, targets[r]) -= 1.0;
      adjoint(logits).mat() += g * probs.mat();
    };
  }
  return out;
}

void Tape::backward(Var loss) {
  if (backward_done_) throw ContractError("backward() called twice on one tape");
  Node& ln = node(loss);
  if (ln.value().size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(ln.value().shape()));
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) n.grad = Array(n.value().shape(), 0.0);
  }
  backward_done_ = true;
  if (!ln.requires_grad) return;
  ln.grad.fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backprop) n.backprop();
  }
}

}  // namespace forgetlab::numerics
