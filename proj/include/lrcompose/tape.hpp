// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lrcompose/matrix.hpp"

namespace lrcompose {

/// Handle to a value recorded on a GradientTape.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  friend auto operator<=>(const Var&, const Var&) = default;
};

enum class Reduction { Mean, Sum };

/// Gradients keyed by parameter handle.
class Gradients {
 public:
  const Matrix& operator[](Var v) const {
    auto it = grads_.find(v);
    if (it == grads_.end()) throw std::out_of_range("no gradient for var " + std::to_string(v.id));
    return it->second;
  }
  bool contains(Var v) const { return grads_.count(v) != 0; }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  Matrix& mutable_at(Var v) { return grads_.at(v); }
  void set(Var v, Matrix g) { grads_[v] = std::move(g); }

 private:
  std::map<Var, Matrix> grads_;
};

/// Append-only record of primitive operations with reverse-mode replay.
///
/// Node ids are assigned in creation order and every op only reads earlier
/// nodes, so walking ids downward is a reverse topological order. A tape
/// built with `record = false` computes values only (inference).
class GradientTape {
 public:
  explicit GradientTape(bool record = true) : record_(record) {}

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Trainable leaf.
  Var parameter(Matrix value) { return push(std::move(value), Kind::Parameter, {}); }
  /// Non-trainable leaf.
  Var constant(Matrix value) { return push(std::move(value), Kind::Constant, {}); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }

  Var matmul(Var a, Var b) {
    Matrix out = lrcompose::matmul(value(a), value(b));
    return push(std::move(out), Kind::Op, [a, b](GradientTape& t, const Matrix& g) {
      if (t.needs_grad(a)) t.accumulate(a, matmul_nt(g, t.value(b)));
      if (t.needs_grad(b)) t.accumulate(b, matmul_tn(t.value(a), g));
    }, {a, b});
  }

  Var add(Var a, Var b) {
    Matrix out = value(a) + value(b);
    return push(std::move(out), Kind::Op, [a, b](GradientTape& t, const Matrix& g) {
      if (t.needs_grad(a)) t.accumulate(a, g);
      if (t.needs_grad(b)) t.accumulate(b, g);
    }, {a, b});
  }

  Var scale(Var a, double s) {
    Matrix out = value(a) * s;
    return push(std::move(out), Kind::Op, [a, s](GradientTape& t, const Matrix& g) {
      if (t.needs_grad(a)) t.accumulate(a, g * s);
    }, {a});
  }

  Var transpose(Var a) {
    Matrix out = lrcompose::transpose(value(a));
    return push(std::move(out), Kind::Op, [a](GradientTape& t, const Matrix& g) {
      if (t.needs_grad(a)) t.accumulate(a, lrcompose::transpose(g));
    }, {a});
  }

  /// Elementwise product.
  Var hadamard(Var a, Var b) {
    Matrix out = lrcompose::hadamard(value(a), value(b));
    return push(std::move(out), Kind::Op, [a, b](GradientTape& t, const Matrix& g) {
      if (t.needs_grad(a)) t.accumulate(a, lrcompose::hadamard(g, t.value(b)));
      if (t.needs_grad(b)) t.accumulate(b, lrcompose::hadamard(g, t.value(a)));
    }, {a, b});
  }

  /// x * sigmoid(x), elementwise.
  Var silu(Var a) {
    const Matrix& x = value(a);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      out.data()[i] = v / (1.0 + std::exp(-v));
    }
    return push(std::move(out), Kind::Op, [a](GradientTape& t, const Matrix& g) {
      if (!t.needs_grad(a)) return;
      const Matrix& x = t.value(a);
      Matrix d(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        d.data()[i] = g.data()[i] * s * (1.0 + v * (1.0 - s));
      }
      t.accumulate(a, d);
    }, {a});
  }

  /// Softmax over each row. With `causal`, entry (i, j) for j > i is masked
  /// to zero probability (rows are queries, columns are keys).
  Var softmax_rows(Var a, bool causal) {
    const Matrix& x = value(a);
    if (causal && x.rows() > x.cols()) {
      throw ShapeError("softmax_rows: causal mask needs rows <= cols, got " + x.shape_string());
    }
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const std::size_t limit = causal ? i + 1 : x.cols();
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, x(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < limit; ++j) {
        out(i, j) = std::exp(x(i, j) - mx);
        z += out(i, j);
      }
      for (std::size_t j = 0; j < limit; ++j) out(i, j) /= z;
    }
    const Var self{static_cast<std::uint32_t>(nodes_.size())};
    return push(std::move(out), Kind::Op, [a, self](GradientTape& t, const Matrix& g) {
      if (!t.needs_grad(a)) return;
      const Matrix& p = t.value(self);
      Matrix d(p.rows(), p.cols());
      for (std::size_t i = 0; i < p.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) dot += g(i, j) * p(i, j);
        for (std::size_t j = 0; j < p.cols(); ++j) d(i, j) = p(i, j) * (g(i, j) - dot);
      }
      t.accumulate(a, d);
    }, {a});
  }

  /// Normalizes each column to zero mean and unit variance (no affine part).
  Var layer_norm(Var a, double eps = 1e-5) {
    const Matrix& x = value(a);
    const std::size_t n = x.rows();
    Matrix out(x.rows(), x.cols());
    std::vector<double> inv_std(x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < n; ++r) mean += x(r, c);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t r = 0; r < n; ++r) var += (x(r, c) - mean) * (x(r, c) - mean);
      var /= static_cast<double>(n);
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      for (std::size_t r = 0; r < n; ++r) out(r, c) = (x(r, c) - mean) * inv_std[c];
    }
    const Var self{static_cast<std::uint32_t>(nodes_.size())};
    return push(std::move(out), Kind::Op,
                [a, self, inv_std = std::move(inv_std)](GradientTape& t, const Matrix& g) {
                  if (!t.needs_grad(a)) return;
                  const Matrix& y = t.value(self);
                  const std::size_t n = y.rows();
                  Matrix d(y.rows(), y.cols());
                  for (std::size_t c = 0; c < y.cols(); ++c) {
                    double mg = 0.0, mgy = 0.0;
                    for (std::size_t r = 0; r < n; ++r) {
                      mg += g(r, c);
                      mgy += g(r, c) * y(r, c);
                    }
                    mg /= static_cast<double>(n);
                    mgy /= static_cast<double>(n);
                    for (std::size_t r = 0; r < n; ++r)
                      d(r, c) = inv_std[c] * (g(r, c) - mg - y(r, c) * mgy);
                  }
                  t.accumulate(a, d);
                },
                {a});
  }

  /// Gathers columns `ids` of `table` into a (rows x ids.size()) matrix.
  Var embedding(Var table, std::span<const int> ids) {
    const Matrix& tab = value(table);
    Matrix out(tab.rows(), ids.size());
    for (std::size_t c = 0; c < ids.size(); ++c) {
      if (ids[c] < 0 || static_cast<std::size_t>(ids[c]) >= tab.cols()) {
        throw std::out_of_range("embedding: id " + std::to_string(ids[c]) + " outside table " +
                                tab.shape_string());
      }
      for (std::size_t r = 0; r < tab.rows(); ++r) out(r, c) = tab(r, static_cast<std::size_t>(ids[c]));
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return push(std::move(out), Kind::Op,
                [table, idv = std::move(idv)](GradientTape& t, const Matrix& g) {
                  if (!t.needs_grad(table)) return;
                  const Matrix& tab = t.value(table);
                  Matrix d(tab.rows(), tab.cols());
                  for (std::size_t c = 0; c < idv.size(); ++c)
                    for (std::size_t r = 0; r < tab.rows(); ++r)
                      d(r, static_cast<std::size_t>(idv[c])) += g(r, c);
                  t.accumulate(table, d);
                },
                {table});
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    const Matrix& x = value(a);
    if (begin + count > x.rows()) {
      throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") outside " + x.shape_string());
    }
    Matrix out(count, x.cols());
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()), count * x.cols(),
                out.data().begin());
    return push(std::move(out), Kind::Op, [a, begin, count](GradientTape& t, const Matrix& g) {
      if (!t.needs_grad(a)) return;
      const Matrix& x = t.value(a);
      Matrix d(x.rows(), x.cols());
      std::copy_n(g.data().begin(), count * x.cols(),
                  d.data().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()));
      t.accumulate(a, d);
    }, {a});
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != cols) {
        throw ShapeError("concat_rows: column mismatch " + value(parts[0]).shape_string() + " vs " +
                         value(p).shape_string());
      }
      rows += value(p).rows();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (Var p : parts) {
      const Matrix& x = value(p);
      std::copy(x.data().begin(), x.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(offset * cols));
      offset += x.rows();
    }
    std::vector<Var> pv(parts.begin(), parts.end());
    return push(std::move(out), Kind::Op, [pv](GradientTape& t, const Matrix& g) {
      std::size_t offset = 0;
      for (Var p : pv) {
        const std::size_t r = t.value(p).rows();
        if (t.needs_grad(p)) {
          Matrix d(r, g.cols());
          std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(offset * g.cols()),
                      r * g.cols(), d.data().begin());
          t.accumulate(p, d);
        }
        offset += r;
      }
    }, pv);
  }

  /// Token-level cross entropy of column-wise logits (vocab x positions).
  /// Positions whose target is negative are excluded. Mean divides by the
  /// number of included positions.
  Var cross_entropy(Var logits, std::span<const int> targets, Reduction reduction = Reduction::Mean) {
    const Matrix& z = value(logits);
    if (targets.size() != z.cols()) {
      throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                       z.shape_string());
    }
    Matrix probs(z.rows(), z.cols());
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < z.cols(); ++c) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < z.rows(); ++r) mx = std::max(mx, z(r, c));
      double s = 0.0;
      for (std::size_t r = 0; r < z.rows(); ++r) {
        probs(r, c) = std::exp(z(r, c) - mx);
        s += probs(r, c);
      }
      for (std::size_t r = 0; r < z.rows(); ++r) probs(r, c) /= s;
      if (targets[c] < 0) continue;
      if (static_cast<std::size_t>(targets[c]) >= z.rows()) {
        throw std::out_of_range("cross_entropy: target " + std::to_string(targets[c]) +
                                " outside vocab " + std::to_string(z.rows()));
      }
      total += mx + std::log(s) - z(static_cast<std::size_t>(targets[c]), c);
      ++counted;
    }
    const double w = reduction == Reduction::Mean ? (counted ? 1.0 / static_cast<double>(counted) : 0.0) : 1.0;
    Matrix out(1, 1, total * w);
    std::vector<int> tv(targets.begin(), targets.end());
    return push(std::move(out), Kind::Op,
                [logits, w, tv = std::move(tv), probs = std::move(probs)](GradientTape& t,
                                                                          const Matrix& g) {
                  if (!t.needs_grad(logits)) return;
                  const double gs = g(0, 0) * w;
                  Matrix d(probs.rows(), probs.cols());
                  for (std::size_t c = 0; c < probs.cols(); ++c) {
                    if (tv[c] < 0) continue;
                    for (std::size_t r = 0; r < probs.rows(); ++r) d(r, c) = gs * probs(r, c);
                    d(static_cast<std::size_t>(tv[c]), c) -= gs;
                  }
                  t.accumulate(logits, d);
                },
                {logits});
  }

  /// Sum of all entries, as a 1x1 value.
  Var sum(Var a) {
    Matrix out(1, 1, lrcompose::sum(value(a)));
    return push(std::move(out), Kind::Op, [a](GradientTape& t, const Matrix& g) {
      if (!t.needs_grad(a)) return;
      const Matrix& x = t.value(a);
      t.accumulate(a, Matrix(x.rows(), x.cols(), g(0, 0)));
    }, {a});
  }

  /// Reverse-mode replay from a scalar. Every parameter leaf gets an entry;
  /// leaves the loss does not reach get a zero matrix.
  Gradients backward(Var loss) {
    if (!record_) throw std::logic_error("backward: tape was created without recording");
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + lv.shape_string());
    }
    for (auto& n : nodes_) {
      n.grad = Matrix();
      n.has_grad = false;
    }
    nodes_[loss.id].grad = Matrix(1, 1, 1.0);
    nodes_[loss.id].has_grad = true;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.has_grad || !n.backward) continue;
      // Ops only write to inputs with smaller ids, so n.grad is stable here.
      n.backward(*this, n.grad);
    }
    Gradients out;
    for (std::uint32_t id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.kind != Kind::Parameter) continue;
      out.set(Var{id}, n.has_grad ? n.grad : Matrix(n.value.rows(), n.value.cols()));
    }
    return out;
  }

 private:
  enum class Kind : std::uint8_t { Parameter, Constant, Op };
  using Backward = std::function<void(GradientTape&, const Matrix&)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    Kind kind = Kind::Op;
    Backward backward;
  };

  Var push(Matrix value, Kind kind, Backward bw, std::initializer_list<Var> inputs = {}) {
    return push(std::move(value), kind, std::move(bw), std::vector<Var>(inputs));
  }

  Var push(Matrix value, Kind kind, Backward bw, const std::vector<Var>& inputs) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape");
    Node n;
    n.value = std::move(value);
    n.kind = kind;
    if (kind == Kind::Parameter) {
      n.requires_grad = record_;
    } else if (kind == Kind::Op && record_) {
      for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
      if (n.requires_grad) n.backward = std::move(bw);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }

  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace lrcompose
