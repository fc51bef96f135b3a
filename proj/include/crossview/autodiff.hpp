#pragma once

// Reverse-mode tape over dense matrices. A Tape owns every intermediate of
// one forward pass; Vars are cheap handles into it. Parameters enter via
// slot ids so the caller can collect per-slot gradients after backward().
//
// Nodes whose inputs are all constant skip gradient bookkeeping entirely,
// which is what makes frozen-backbone passes cheap.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crossview/core.hpp"

namespace crossview {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int idx = -1;
  bool ok() const { return tape != nullptr && idx >= 0; }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Mat<T> val;
    Mat<T> grad;
    bool needs_grad = false;
    bool grad_set = false;
    std::function<void(Tape&, int)> back;
  };

  Var<T> input(Mat<T> v, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(v), {}, needs_grad, false, nullptr});
    return {this, int(nodes_.size()) - 1};
  }

  // Parameter leaf, cached per slot so repeated uses share one node.
  Var<T> param(const Mat<T>& v, std::int64_t slot, bool trainable = true) {
    auto it = slot_nodes_.find(slot);
    if (it != slot_nodes_.end()) return {this, it->second};
    Var<T> var = input(v, trainable);
    slot_nodes_[slot] = var.idx;
    return var;
  }

  Var<T> make(Mat<T> v, bool needs_grad, std::function<void(Tape&, int)> back) {
    nodes_.push_back(Node{std::move(v), {}, needs_grad, false, needs_grad ? std::move(back) : nullptr});
    return {this, int(nodes_.size()) - 1};
  }

  const Mat<T>& val(Var<T> v) const { return nodes_[v.idx].val; }
  Node& node(int i) { return nodes_[i]; }
  bool needs_grad(int i) const { return nodes_[i].needs_grad; }

  Mat<T>& grad_ref(int i) {
    Node& n = nodes_[i];
    if (!n.grad_set) {
      n.grad = Mat<T>::Zero(n.val.rows(), n.val.cols());
      n.grad_set = true;
    }
    return n.grad;
  }

  void backward(Var<T> loss) {
    require(loss.tape == this, "backward: var from another tape");
    const Node& ln = nodes_[loss.idx];
    require(ln.val.rows() == 1 && ln.val.cols() == 1, "backward: loss must be scalar");
    if (!ln.needs_grad) return;
    grad_ref(loss.idx)(0, 0) = T(1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad_set && n.back) n.back(*this, i);
    }
  }

  // Zero matrix if the slot never entered the graph or got no gradient.
  Mat<T> slot_grad(std::int64_t slot) const {
    auto it = slot_nodes_.find(slot);
    if (it == slot_nodes_.end()) return Mat<T>();
    const Node& n = nodes_[it->second];
    if (!n.grad_set) return Mat<T>::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  bool slot_used(std::int64_t slot) const { return slot_nodes_.count(slot) != 0; }

  size_t size() const { return nodes_.size(); }
  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::int64_t, int> slot_nodes_;
};

// ---- ops ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  require(t.val(a).rows() == t.val(b).rows() && t.val(a).cols() == t.val(b).cols(), "add: shape mismatch");
  Mat<T> v = t.val(a) + t.val(b);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng, [ai = a.idx, bi = b.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g;
    if (t.needs_grad(bi)) t.grad_ref(bi) += g;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  Mat<T> v = t.val(a) - t.val(b);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng, [ai = a.idx, bi = b.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g;
    if (t.needs_grad(bi)) t.grad_ref(bi) -= g;
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {  // elementwise
  Tape<T>& t = *a.tape;
  Mat<T> v = t.val(a).cwiseProduct(t.val(b));
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng, [ai = a.idx, bi = b.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g.cwiseProduct(t.node(bi).val);
    if (t.needs_grad(bi)) t.grad_ref(bi) += g.cwiseProduct(t.node(ai).val);
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tape<T>& t = *a.tape;
  Mat<T> v = t.val(a) * c;
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx, c](Tape<T>& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai) += t.node(self).grad * c;
  });
}

// Multiply by a 1x1 learnable gate.
template <typename T>
Var<T> vscale(Var<T> a, Var<T> s) {
  Tape<T>& t = *a.tape;
  require(t.val(s).rows() == 1 && t.val(s).cols() == 1, "vscale: gate must be 1x1");
  Mat<T> v = t.val(a) * t.val(s)(0, 0);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(s.idx);
  return t.make(std::move(v), ng, [ai = a.idx, si = s.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g * t.node(si).val(0, 0);
    if (t.needs_grad(si)) t.grad_ref(si)(0, 0) += g.cwiseProduct(t.node(ai).val).sum();
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  require(t.val(a).cols() == t.val(b).rows(), "matmul: inner dim mismatch");
  Mat<T> v = t.val(a) * t.val(b);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng, [ai = a.idx, bi = b.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai).noalias() += g * t.node(bi).val.transpose();
    if (t.needs_grad(bi)) t.grad_ref(bi).noalias() += t.node(ai).val.transpose() * g;
  });
}

// A * B^T without materializing the transpose.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  require(t.val(a).cols() == t.val(b).cols(), "matmul_nt: inner dim mismatch");
  Mat<T> v = t.val(a) * t.val(b).transpose();
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng, [ai = a.idx, bi = b.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai).noalias() += g * t.node(bi).val;
    if (t.needs_grad(bi)) t.grad_ref(bi).noalias() += g.transpose() * t.node(ai).val;
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> v = t.val(a).transpose();
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx](Tape<T>& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai) += t.node(self).grad.transpose();
  });
}

// Broadcast-add a 1xN row (bias) to every row of a.
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> r) {
  Tape<T>& t = *a.tape;
  require(t.val(r).rows() == 1 && t.val(r).cols() == t.val(a).cols(), "add_rowvec: shape mismatch");
  Mat<T> v = t.val(a).rowwise() + t.val(r).row(0);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(r.idx);
  return t.make(std::move(v), ng, [ai = a.idx, ri = r.idx](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g;
    if (t.needs_grad(ri)) t.grad_ref(ri).row(0) += g.colwise().sum();
  });
}

// Broadcast a 1xN row to n identical rows.
template <typename T>
Var<T> repeat_rows(Var<T> r, int n) {
  Tape<T>& t = *r.tape;
  require(t.val(r).rows() == 1, "repeat_rows: input must be a row");
  Mat<T> v = t.val(r).replicate(n, 1);
  return t.make(std::move(v), t.needs_grad(r.idx), [ri = r.idx](Tape<T>& t, int self) {
    if (t.needs_grad(ri)) t.grad_ref(ri).row(0) += t.node(self).grad.colwise().sum();
  });
}

template <typename T>
Var<T> rowwise_softmax(Var<T> a) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  Mat<T> p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    T mx = x.row(i).maxCoeff();
    p.row(i) = (x.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return t.make(std::move(p), t.needs_grad(a.idx), [ai = a.idx](Tape<T>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Mat<T>& p = t.node(self).val;
    const Mat<T>& g = t.node(self).grad;
    Mat<T>& da = t.grad_ref(ai);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      T dot = g.row(i).cwiseProduct(p.row(i)).sum();
      da.row(i) += p.row(i).cwiseProduct(g.row(i).array() - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  Tape<T>& t = *x.tape;
  const Mat<T>& v = t.val(x);
  Eigen::Index n = v.rows(), d = v.cols();
  Mat<T> xhat(n, d);
  Mat<T> inv_sd(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    T mu = v.row(i).mean();
    T var = (v.row(i).array() - mu).square().mean();
    T is = T(1) / std::sqrt(var + eps);
    inv_sd(i, 0) = is;
    xhat.row(i) = (v.row(i).array() - mu) * is;
  }
  Mat<T> out = (xhat.array().rowwise() * t.val(gamma).row(0).array()).rowwise() +
               t.val(beta).row(0).array();
  bool ng = t.needs_grad(x.idx) || t.needs_grad(gamma.idx) || t.needs_grad(beta.idx);
  // xhat/inv_sd survive in the closure for the backward pass.
  return t.make(std::move(out), ng,
                [xi = x.idx, gi = gamma.idx, bi = beta.idx, xhat = std::move(xhat),
                 inv_sd = std::move(inv_sd)](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    Eigen::Index n = g.rows();
    if (t.needs_grad(bi)) t.grad_ref(bi).row(0) += g.colwise().sum();
    if (t.needs_grad(gi)) t.grad_ref(gi).row(0) += g.cwiseProduct(xhat).colwise().sum();
    if (t.needs_grad(xi)) {
      const Mat<T>& gamma_v = t.node(gi).val;
      Mat<T>& dx = t.grad_ref(xi);
      for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Array<T, 1, Eigen::Dynamic> gy = g.row(i).array() * gamma_v.row(0).array();
        T m1 = gy.mean();
        T m2 = (gy * xhat.row(i).array()).mean();
        dx.row(i) += ((gy - m1 - xhat.row(i).array() * m2) * inv_sd(i, 0)).matrix();
      }
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  Mat<T> v = x.unaryExpr([](T u) { return T(0.5) * u * (T(1) + std::erf(u * T(0.7071067811865476))); });
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx](Tape<T>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Mat<T>& x = t.node(ai).val;
    Mat<T> d = x.unaryExpr([](T u) {
      T cdf = T(0.5) * (T(1) + std::erf(u * T(0.7071067811865476)));
      T pdf = std::exp(T(-0.5) * u * u) * T(0.3989422804014327);
      return cdf + u * pdf;
    });
    t.grad_ref(ai) += t.node(self).grad.cwiseProduct(d);
  });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  require(t.val(a).rows() == t.val(b).rows(), "concat_cols: row mismatch");
  Mat<T> v(t.val(a).rows(), t.val(a).cols() + t.val(b).cols());
  v << t.val(a), t.val(b);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng,
                [ai = a.idx, bi = b.idx, ca = t.val(a).cols()](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g.leftCols(ca);
    if (t.needs_grad(bi)) t.grad_ref(bi) += g.rightCols(g.cols() - ca);
  });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  require(t.val(a).cols() == t.val(b).cols(), "concat_rows: col mismatch");
  Mat<T> v(t.val(a).rows() + t.val(b).rows(), t.val(a).cols());
  v << t.val(a), t.val(b);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  return t.make(std::move(v), ng,
                [ai = a.idx, bi = b.idx, ra = t.val(a).rows()](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    if (t.needs_grad(ai)) t.grad_ref(ai) += g.topRows(ra);
    if (t.needs_grad(bi)) t.grad_ref(bi) += g.bottomRows(g.rows() - ra);
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, int j0, int n) {
  Tape<T>& t = *a.tape;
  require(j0 >= 0 && j0 + n <= t.val(a).cols(), "slice_cols: out of range");
  Mat<T> v = t.val(a).middleCols(j0, n);
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx, j0, n](Tape<T>& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai).middleCols(j0, n) += t.node(self).grad;
  });
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> idx) {
  Tape<T>& t = *a.tape;
  Mat<T> v(Eigen::Index(idx.size()), t.val(a).cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < t.val(a).rows(), "gather_rows: index out of range");
    v.row(Eigen::Index(i)) = t.val(a).row(idx[i]);
  }
  return t.make(std::move(v), t.needs_grad(a.idx),
                [ai = a.idx, idx = std::move(idx)](Tape<T>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Mat<T>& g = t.node(self).grad;
    Mat<T>& da = t.grad_ref(ai);
    for (size_t i = 0; i < idx.size(); ++i) da.row(idx[i]) += g.row(Eigen::Index(i));
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> v(1, 1);
  v(0, 0) = t.val(a).sum();
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx](Tape<T>& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai).array() += t.node(self).grad(0, 0);
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  Tape<T>& t = *a.tape;
  T inv = T(1) / T(t.val(a).size());
  return scale(sum_all(a), inv);
}

// Per-row sum -> column vector (n x 1).
template <typename T>
Var<T> rowsum(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> v = t.val(a).rowwise().sum();
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx](Tape<T>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Mat<T>& g = t.node(self).grad;
    t.grad_ref(ai) += g.replicate(1, t.node(ai).val.cols());
  });
}

template <typename T>
Var<T> sqrt_eps(Var<T> a, T eps) {
  Tape<T>& t = *a.tape;
  Mat<T> v = (t.val(a).array() + eps).sqrt();
  return t.make(std::move(v), t.needs_grad(a.idx), [ai = a.idx](Tape<T>& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Mat<T>& y = t.node(self).val;
    t.grad_ref(ai).array() += t.node(self).grad.array() * T(0.5) / y.array();
  });
}

// out(o,:) = sum_k w(o,k) * x(taps(o,k),:). taps is a constant index table;
// the weights are learnable. Columns of x are never mixed.
template <typename T>
Var<T> stencil_mix(Var<T> x, Var<T> w, std::shared_ptr<const std::vector<std::vector<int>>> taps) {
  Tape<T>& t = *x.tape;
  const Mat<T>& xv = t.val(x);
  const Mat<T>& wv = t.val(w);
  require(Eigen::Index(taps->size()) == wv.rows(), "stencil_mix: taps/weights row mismatch");
  Mat<T> v = Mat<T>::Zero(Eigen::Index(taps->size()), xv.cols());
  for (size_t o = 0; o < taps->size(); ++o) {
    require(int((*taps)[o].size()) == wv.cols(), "stencil_mix: tap arity mismatch");
    for (size_t k = 0; k < (*taps)[o].size(); ++k)
      v.row(Eigen::Index(o)) += wv(Eigen::Index(o), Eigen::Index(k)) * xv.row((*taps)[o][k]);
  }
  bool ng = t.needs_grad(x.idx) || t.needs_grad(w.idx);
  return t.make(std::move(v), ng, [xi = x.idx, wi = w.idx, taps = std::move(taps)](Tape<T>& t, int self) {
    const Mat<T>& g = t.node(self).grad;
    const Mat<T>& xv = t.node(xi).val;
    const Mat<T>& wv = t.node(wi).val;
    for (size_t o = 0; o < taps->size(); ++o)
      for (size_t k = 0; k < (*taps)[o].size(); ++k) {
        if (t.needs_grad(xi))
          t.grad_ref(xi).row((*taps)[o][k]) += wv(Eigen::Index(o), Eigen::Index(k)) * g.row(Eigen::Index(o));
        if (t.needs_grad(wi))
          t.grad_ref(wi)(Eigen::Index(o), Eigen::Index(k)) +=
              g.row(Eigen::Index(o)).cwiseProduct(xv.row((*taps)[o][k])).sum();
      }
  });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }

}  // namespace crossview
