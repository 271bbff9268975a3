#include "compdis/graph.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

namespace compdis {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Graph& same_graph(Var a, Var b) {
  require(a.valid() && b.valid() && a.g == b.g, "vars must belong to one graph");
  return *a.g;
}

}  // namespace

const Tensor& Var::val() const { return g->val(*this); }
const std::vector<int>& Var::shape() const { return g->val(*this).shape(); }

bool tracked(Var v) { return v.valid() && v.g->node(v.id).tracked; }

Var Graph::make(Tensor val, bool is_tracked, std::function<void(Graph&, int)> back) {
  Node n;
  n.val = std::move(val);
  n.tracked = is_tracked && recording();
  if (n.tracked) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Tensor t) { return make(std::move(t), false, nullptr); }

Var Graph::leaf(Tensor t, bool requires_grad) {
  // Leaves declare differentiability; the no-grad scope only masks ops, so a
  // parameter first touched inside a no-grad region still feeds gradients to
  // ops recorded later.
  Node n;
  n.val = std::move(t);
  n.tracked = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::use(Param& p, bool trainable) {
  auto it = param_vars_.find(&p);
  if (it != param_vars_.end()) {
    if (it->second.second != trainable)
      throw std::logic_error("param used with conflicting trainable flags in one graph");
    return Var{this, it->second.first};
  }
  Var v = leaf(p.value, trainable);
  param_vars_.emplace(&p, std::make_pair(v.id, trainable));
  return v;
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad) n.grad = std::make_unique<Tensor>(n.val.shape());
  return *n.grad;
}

const Tensor& Graph::val(Var v) const { return node(v.id).val; }

bool Graph::has_grad(Var v) const { return node(v.id).grad != nullptr; }

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v.id);
  if (!n.grad) throw std::logic_error("no gradient recorded for this var");
  return *n.grad;
}

Tensor Graph::grad_or_zero(Var v) const {
  const Node& n = node(v.id);
  return n.grad ? *n.grad : Tensor(n.val.shape());
}

void Graph::backward(Var root) {
  require(root.valid() && root.g == this, "backward: root not in this graph");
  require(node(root.id).val.numel() == 1, "backward: root must be scalar");
  for (auto& n : nodes_) n.grad.reset();
  if (!node(root.id).tracked) return;  // nothing upstream to differentiate
  grad_buf(root.id)[0] = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad && n.back) n.back(*this, id);
  }
}

void Graph::accumulate_param_grads(const std::vector<Param*>& params) {
  for (Param* p : params) {
    auto it = param_vars_.find(p);
    if (it == param_vars_.end()) continue;
    const Node& n = node(it->second.first);
    if (!n.grad) continue;
    if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.shape());
    p->grad.add_(*n.grad);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require(a.val().same_shape(b.val()), "add: shape mismatch");
  Tensor out = a.val();
  out.add_(b.val());
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(ai).tracked) g.grad_buf(ai).add_(dy);
    if (g.node(bi).tracked) g.grad_buf(bi).add_(dy);
  });
}

Var sub(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require(a.val().same_shape(b.val()), "sub: shape mismatch");
  Tensor out = a.val();
  out.axpy_(-1.0, b.val());
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(ai).tracked) g.grad_buf(ai).add_(dy);
    if (g.node(bi).tracked) g.grad_buf(bi).axpy_(-1.0, dy);
  });
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(ai).tracked) {
      Tensor& da = g.grad_buf(ai);
      const Tensor& bv = g.node(bi).val;
      for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i] * bv[i];
    }
    if (g.node(bi).tracked) {
      Tensor& db = g.grad_buf(bi);
      const Tensor& av = g.node(ai).val;
      for (size_t i = 0; i < db.numel(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

Var add_scalar(Var a, double c) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] += c;
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (g.node(ai).tracked) g.grad_buf(ai).add_(*g.node(self).grad);
  });
}

Var mul_scalar(Var a, double c) {
  Graph& g = *a.g;
  Tensor out = a.val();
  out.scale_(c);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, c](Graph& g, int self) {
    if (g.node(ai).tracked) g.grad_buf(ai).axpy_(c, *g.node(self).grad);
  });
}

Var neg(Var a) { return mul_scalar(a, -1.0); }

Var vexp(Var a) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& y = g.node(self).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i] * y[i];
  });
}

Var vlog(Var a) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& x = g.node(ai).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i] / x[i];
  });
}

Var vsqrt(Var a) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& y = g.node(self).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i] * 0.5 / y[i];
  });
}

Var vrsqrt(Var a, double eps) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / std::sqrt(out[i] + eps);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& y = g.node(self).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i] * (-0.5) * y[i] * y[i] * y[i];
  });
}

Var relu(Var a) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0 ? out[i] : 0.0;
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& x = g.node(ai).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i)
      if (x[i] > 0) da[i] += dy[i];
  });
}

Var silu(Var a) {
  Graph& g = *a.g;
  Tensor out = a.val();
  for (size_t i = 0; i < out.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-out[i]));
    out[i] *= s;
  }
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& x = g.node(ai).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      da[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

Var detach(Var a) { return a.g->constant(a.val()); }

// ---------------------------------------------------------------------------
// broadcast adds / scales
// ---------------------------------------------------------------------------

Var add_bias_last(Var x, Var b) {
  Graph& g = same_graph(x, b);
  const Tensor& X = x.val();
  const Tensor& B = b.val();
  require(B.rank() == 1, "add_bias_last: bias must be rank 1");
  const int C = B.dim(0);
  require(X.rank() >= 1 && X.shape().back() == C, "add_bias_last: trailing dim mismatch");
  const size_t rows = X.numel() / static_cast<size_t>(C);
  Tensor out = X;
  for (size_t r = 0; r < rows; ++r)
    for (int c = 0; c < C; ++c) out[r * C + c] += B[static_cast<size_t>(c)];
  const int xi = x.id, bi = b.id;
  return g.make(std::move(out), tracked(x) || tracked(b), [xi, bi, C, rows](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(xi).tracked) g.grad_buf(xi).add_(dy);
    if (g.node(bi).tracked) {
      Tensor& db = g.grad_buf(bi);
      for (size_t r = 0; r < rows; ++r)
        for (int c = 0; c < C; ++c) db[static_cast<size_t>(c)] += dy[r * C + c];
    }
  });
}

Var add_bias_ch(Var x, Var b) {
  Graph& g = same_graph(x, b);
  const Tensor& X = x.val();
  const Tensor& B = b.val();
  require(X.rank() == 4 && B.rank() == 1 && X.dim(1) == B.dim(0), "add_bias_ch: need (N,C,H,W)+(C)");
  const int N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* p = out.data() + (static_cast<size_t>(n) * C + c) * HW;
      const double bc = B[static_cast<size_t>(c)];
      for (int i = 0; i < HW; ++i) p[i] += bc;
    }
  const int xi = x.id, bi = b.id;
  return g.make(std::move(out), tracked(x) || tracked(b), [xi, bi, N, C, HW](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(xi).tracked) g.grad_buf(xi).add_(dy);
    if (g.node(bi).tracked) {
      Tensor& db = g.grad_buf(bi);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* p = dy.data() + (static_cast<size_t>(n) * C + c) * HW;
          double s = 0;
          for (int i = 0; i < HW; ++i) s += p[i];
          db[static_cast<size_t>(c)] += s;
        }
    }
  });
}

Var add_per_sample_ch(Var x, Var e) {
  Graph& g = same_graph(x, e);
  const Tensor& X = x.val();
  const Tensor& E = e.val();
  require(X.rank() == 4 && E.rank() == 2 && X.dim(0) == E.dim(0) && X.dim(1) == E.dim(1),
          "add_per_sample_ch: need (N,C,H,W)+(N,C)");
  const int N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* p = out.data() + (static_cast<size_t>(n) * C + c) * HW;
      const double v = E[static_cast<size_t>(n) * C + c];
      for (int i = 0; i < HW; ++i) p[i] += v;
    }
  const int xi = x.id, ei = e.id;
  return g.make(std::move(out), tracked(x) || tracked(e), [xi, ei, N, C, HW](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(xi).tracked) g.grad_buf(xi).add_(dy);
    if (g.node(ei).tracked) {
      Tensor& de = g.grad_buf(ei);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* p = dy.data() + (static_cast<size_t>(n) * C + c) * HW;
          double s = 0;
          for (int i = 0; i < HW; ++i) s += p[i];
          de[static_cast<size_t>(n) * C + c] += s;
        }
    }
  });
}

Var scale_per_sample(Var x, Var s) {
  Graph& g = same_graph(x, s);
  const Tensor& X = x.val();
  const Tensor& S = s.val();
  require(X.rank() >= 1 && S.rank() == 1 && X.dim(0) == S.dim(0), "scale_per_sample: need (N,...)*(N)");
  const int N = X.dim(0);
  const size_t stride = X.numel() / static_cast<size_t>(N);
  Tensor out = X;
  for (int n = 0; n < N; ++n) {
    double* p = out.data() + static_cast<size_t>(n) * stride;
    const double sv = S[static_cast<size_t>(n)];
    for (size_t i = 0; i < stride; ++i) p[i] *= sv;
  }
  const int xi = x.id, si = s.id;
  return g.make(std::move(out), tracked(x) || tracked(s), [xi, si, N, stride](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    const Tensor& X = g.node(xi).val;
    const Tensor& S = g.node(si).val;
    if (g.node(xi).tracked) {
      Tensor& dx = g.grad_buf(xi);
      for (int n = 0; n < N; ++n) {
        const double sv = S[static_cast<size_t>(n)];
        double* d = dx.data() + static_cast<size_t>(n) * stride;
        const double* p = dy.data() + static_cast<size_t>(n) * stride;
        for (size_t i = 0; i < stride; ++i) d[i] += p[i] * sv;
      }
    }
    if (g.node(si).tracked) {
      Tensor& ds = g.grad_buf(si);
      for (int n = 0; n < N; ++n) {
        const double* p = dy.data() + static_cast<size_t>(n) * stride;
        const double* xv = X.data() + static_cast<size_t>(n) * stride;
        double acc = 0;
        for (size_t i = 0; i < stride; ++i) acc += p[i] * xv[i];
        ds[static_cast<size_t>(n)] += acc;
      }
    }
  });
}

Var mul_colvec(Var x, Var v) {
  Graph& g = same_graph(x, v);
  const Tensor& X = x.val();
  const Tensor& V = v.val();
  require(X.rank() == 2 && V.rank() == 1 && X.dim(0) == V.dim(0), "mul_colvec: need (R,C)*(R)");
  const int R = X.dim(0), C = X.dim(1);
  Tensor out = X;
  for (int r = 0; r < R; ++r) {
    const double sv = V[static_cast<size_t>(r)];
    for (int c = 0; c < C; ++c) out[static_cast<size_t>(r) * C + c] *= sv;
  }
  const int xi = x.id, vi = v.id;
  return g.make(std::move(out), tracked(x) || tracked(v), [xi, vi, R, C](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    const Tensor& X = g.node(xi).val;
    const Tensor& V = g.node(vi).val;
    if (g.node(xi).tracked) {
      Tensor& dx = g.grad_buf(xi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          dx[static_cast<size_t>(r) * C + c] += dy[static_cast<size_t>(r) * C + c] * V[static_cast<size_t>(r)];
    }
    if (g.node(vi).tracked) {
      Tensor& dv = g.grad_buf(vi);
      for (int r = 0; r < R; ++r) {
        double acc = 0;
        for (int c = 0; c < C; ++c)
          acc += dy[static_cast<size_t>(r) * C + c] * X[static_cast<size_t>(r) * C + c];
        dv[static_cast<size_t>(r)] += acc;
      }
    }
  });
}

Var add_colvec(Var x, Var v) {
  Graph& g = same_graph(x, v);
  const Tensor& X = x.val();
  const Tensor& V = v.val();
  require(X.rank() == 2 && V.rank() == 1 && X.dim(0) == V.dim(0), "add_colvec: need (R,C)+(R)");
  const int R = X.dim(0), C = X.dim(1);
  Tensor out = X;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<size_t>(r) * C + c] += V[static_cast<size_t>(r)];
  const int xi = x.id, vi = v.id;
  return g.make(std::move(out), tracked(x) || tracked(v), [xi, vi, R, C](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(xi).tracked) g.grad_buf(xi).add_(dy);
    if (g.node(vi).tracked) {
      Tensor& dv = g.grad_buf(vi);
      for (int r = 0; r < R; ++r) {
        double acc = 0;
        for (int c = 0; c < C; ++c) acc += dy[static_cast<size_t>(r) * C + c];
        dv[static_cast<size_t>(r)] += acc;
      }
    }
  });
}

Var add_rowvec(Var x, Var v) {
  Graph& g = same_graph(x, v);
  const Tensor& X = x.val();
  const Tensor& V = v.val();
  require(X.rank() == 2 && V.rank() == 1 && X.dim(1) == V.dim(0), "add_rowvec: need (R,C)+(C)");
  const int R = X.dim(0), C = X.dim(1);
  Tensor out = X;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<size_t>(r) * C + c] += V[static_cast<size_t>(c)];
  const int xi = x.id, vi = v.id;
  return g.make(std::move(out), tracked(x) || tracked(v), [xi, vi, R, C](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(xi).tracked) g.grad_buf(xi).add_(dy);
    if (g.node(vi).tracked) {
      Tensor& dv = g.grad_buf(vi);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) dv[static_cast<size_t>(c)] += dy[static_cast<size_t>(r) * C + c];
    }
  });
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0), "matmul: bad shapes");
  const int M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor out({M, N});
  MapM(out.data(), M, N).noalias() = CMapM(A.data(), M, K) * CMapM(B.data(), K, N);
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, M, K, N](Graph& g, int self) {
    CMapM dy(g.node(self).grad->data(), M, N);
    if (g.node(ai).tracked)
      MapM(g.grad_buf(ai).data(), M, K).noalias() += dy * CMapM(g.node(bi).val.data(), K, N).transpose();
    if (g.node(bi).tracked)
      MapM(g.grad_buf(bi).data(), K, N).noalias() += CMapM(g.node(ai).val.data(), M, K).transpose() * dy;
  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1), "matmul_nt: bad shapes");
  const int M = A.dim(0), K = A.dim(1), N = B.dim(0);
  Tensor out({M, N});
  MapM(out.data(), M, N).noalias() = CMapM(A.data(), M, K) * CMapM(B.data(), N, K).transpose();
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, M, K, N](Graph& g, int self) {
    CMapM dy(g.node(self).grad->data(), M, N);
    if (g.node(ai).tracked)
      MapM(g.grad_buf(ai).data(), M, K).noalias() += dy * CMapM(g.node(bi).val.data(), N, K);
    if (g.node(bi).tracked)
      MapM(g.grad_buf(bi).data(), N, K).noalias() += dy.transpose() * CMapM(g.node(ai).val.data(), M, K);
  });
}

Var matmul_tn(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(0) == B.dim(0), "matmul_tn: bad shapes");
  const int K = A.dim(0), M = A.dim(1), N = B.dim(1);
  Tensor out({M, N});
  MapM(out.data(), M, N).noalias() = CMapM(A.data(), K, M).transpose() * CMapM(B.data(), K, N);
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, K, M, N](Graph& g, int self) {
    CMapM dy(g.node(self).grad->data(), M, N);
    if (g.node(ai).tracked)
      MapM(g.grad_buf(ai).data(), K, M).noalias() += CMapM(g.node(bi).val.data(), K, N) * dy.transpose();
    if (g.node(bi).tracked)
      MapM(g.grad_buf(bi).data(), K, N).noalias() += CMapM(g.node(ai).val.data(), K, M) * dy;
  });
}

Var bmm(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(1), "bmm: bad shapes");
  const int Bn = A.dim(0), M = A.dim(1), K = A.dim(2), N = B.dim(2);
  Tensor out({Bn, M, N});
  for (int i = 0; i < Bn; ++i)
    MapM(out.data() + static_cast<size_t>(i) * M * N, M, N).noalias() =
        CMapM(A.data() + static_cast<size_t>(i) * M * K, M, K) *
        CMapM(B.data() + static_cast<size_t>(i) * K * N, K, N);
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, Bn, M, K, N](Graph& g, int self) {
    const Tensor& dyt = *g.node(self).grad;
    for (int i = 0; i < Bn; ++i) {
      CMapM dy(dyt.data() + static_cast<size_t>(i) * M * N, M, N);
      if (g.node(ai).tracked)
        MapM(g.grad_buf(ai).data() + static_cast<size_t>(i) * M * K, M, K).noalias() +=
            dy * CMapM(g.node(bi).val.data() + static_cast<size_t>(i) * K * N, K, N).transpose();
      if (g.node(bi).tracked)
        MapM(g.grad_buf(bi).data() + static_cast<size_t>(i) * K * N, K, N).noalias() +=
            CMapM(g.node(ai).val.data() + static_cast<size_t>(i) * M * K, M, K).transpose() * dy;
    }
  });
}

Var bmm_nt(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(2), "bmm_nt: bad shapes");
  const int Bn = A.dim(0), M = A.dim(1), K = A.dim(2), N = B.dim(1);
  Tensor out({Bn, M, N});
  for (int i = 0; i < Bn; ++i)
    MapM(out.data() + static_cast<size_t>(i) * M * N, M, N).noalias() =
        CMapM(A.data() + static_cast<size_t>(i) * M * K, M, K) *
        CMapM(B.data() + static_cast<size_t>(i) * N * K, N, K).transpose();
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, Bn, M, K, N](Graph& g, int self) {
    const Tensor& dyt = *g.node(self).grad;
    for (int i = 0; i < Bn; ++i) {
      CMapM dy(dyt.data() + static_cast<size_t>(i) * M * N, M, N);
      if (g.node(ai).tracked)
        MapM(g.grad_buf(ai).data() + static_cast<size_t>(i) * M * K, M, K).noalias() +=
            dy * CMapM(g.node(bi).val.data() + static_cast<size_t>(i) * N * K, N, K);
      if (g.node(bi).tracked)
        MapM(g.grad_buf(bi).data() + static_cast<size_t>(i) * N * K, N, K).noalias() +=
            dy.transpose() * CMapM(g.node(ai).val.data() + static_cast<size_t>(i) * M * K, M, K);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions, softmax
// ---------------------------------------------------------------------------

Var sum_all(Var a) {
  Graph& g = *a.g;
  Tensor out({1});
  out[0] = a.val().sum();
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const double d = (*g.node(self).grad)[0];
    Tensor& da = g.grad_buf(ai);
    for (size_t i = 0; i < da.numel(); ++i) da[i] += d;
  });
}

Var mean_all(Var a) {
  const double inv = 1.0 / static_cast<double>(a.val().numel());
  return mul_scalar(sum_all(a), inv);
}

Var row_sum(Var a) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() == 2, "row_sum: need rank 2");
  const int R = A.dim(0), C = A.dim(1);
  Tensor out({R});
  for (int r = 0; r < R; ++r) {
    double s = 0;
    for (int c = 0; c < C; ++c) s += A[static_cast<size_t>(r) * C + c];
    out[static_cast<size_t>(r)] = s;
  }
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, R, C](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& da = g.grad_buf(ai);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) da[static_cast<size_t>(r) * C + c] += dy[static_cast<size_t>(r)];
  });
}

Var lse_rows(Var a) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() == 2, "lse_rows: need rank 2");
  const int R = A.dim(0), C = A.dim(1);
  Tensor out({R});
  for (int r = 0; r < R; ++r) {
    const double* row = A.data() + static_cast<size_t>(r) * C;
    double m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    double s = 0;
    for (int c = 0; c < C; ++c) s += std::exp(row[c] - m);
    out[static_cast<size_t>(r)] = m + std::log(s);
  }
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, R, C](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& y = g.node(self).val;
    const Tensor& A = g.node(ai).val;
    Tensor& da = g.grad_buf(ai);
    for (int r = 0; r < R; ++r) {
      const double yr = y[static_cast<size_t>(r)], dr = dy[static_cast<size_t>(r)];
      for (int c = 0; c < C; ++c) {
        const size_t i = static_cast<size_t>(r) * C + c;
        da[i] += dr * std::exp(A[i] - yr);
      }
    }
  });
}

Var softmax_last(Var a) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() >= 1, "softmax_last: need rank >= 1");
  const int C = A.shape().back();
  const size_t rows = A.numel() / static_cast<size_t>(C);
  Tensor out = A;
  for (size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * C;
    double m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    double s = 0;
    for (int c = 0; c < C; ++c) {
      row[c] = std::exp(row[c] - m);
      s += row[c];
    }
    for (int c = 0; c < C; ++c) row[c] /= s;
  }
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, C, rows](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    const Tensor& y = g.node(self).val;
    Tensor& da = g.grad_buf(ai);
    for (size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * C;
      const double* dr = dy.data() + r * C;
      double dot = 0;
      for (int c = 0; c < C; ++c) dot += dr[c] * yr[c];
      double* dar = da.data() + r * C;
      for (int c = 0; c < C; ++c) dar[c] += yr[c] * (dr[c] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var reshape(Var a, std::vector<int> shape) {
  Graph& g = *a.g;
  Tensor out = a.val().reshaped(shape);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    Tensor& da = g.grad_buf(ai);
    const Tensor& dy = *g.node(self).grad;
    for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i];
  });
}

Var transpose2d(Var a) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() == 2, "transpose2d: need rank 2");
  const int R = A.dim(0), C = A.dim(1);
  Tensor out({C, R});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<size_t>(c) * R + r] = A[static_cast<size_t>(r) * C + c];
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, R, C](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& da = g.grad_buf(ai);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) da[static_cast<size_t>(r) * C + c] += dy[static_cast<size_t>(c) * R + r];
  });
}

Var slice_rows(Var a, int r0, int r1) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= A.dim(0), "slice_rows: bad range");
  const int C = A.dim(1), R = r1 - r0;
  Tensor out({R, C});
  std::copy(A.data() + static_cast<size_t>(r0) * C, A.data() + static_cast<size_t>(r1) * C, out.data());
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, r0, R, C](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& da = g.grad_buf(ai);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c)
        da[static_cast<size_t>(r0 + r) * C + c] += dy[static_cast<size_t>(r) * C + c];
  });
}

Var concat_rows(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1), "concat_rows: bad shapes");
  const int Ra = A.dim(0), Rb = B.dim(0), C = A.dim(1);
  Tensor out({Ra + Rb, C});
  std::copy(A.data(), A.data() + A.numel(), out.data());
  std::copy(B.data(), B.data() + B.numel(), out.data() + A.numel());
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, Ra, Rb, C](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(ai).tracked) {
      Tensor& da = g.grad_buf(ai);
      for (size_t i = 0; i < da.numel(); ++i) da[i] += dy[i];
    }
    if (g.node(bi).tracked) {
      Tensor& db = g.grad_buf(bi);
      const size_t off = static_cast<size_t>(Ra) * C;
      for (size_t i = 0; i < db.numel(); ++i) db[i] += dy[off + i];
    }
  });
}

Var concat_rows_n(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows_n: empty input");
  Graph& g = *parts[0].g;
  const int C = parts[0].val().dim(1);
  int R = 0;
  bool tr = false;
  for (Var p : parts) {
    require(p.valid() && p.g == &g && p.val().rank() == 2 && p.val().dim(1) == C,
            "concat_rows_n: mismatched parts");
    R += p.val().dim(0);
    tr = tr || tracked(p);
  }
  Tensor out({R, C});
  size_t off = 0;
  std::vector<int> ids;
  std::vector<size_t> offsets;
  std::vector<size_t> sizes;
  for (Var p : parts) {
    const Tensor& t = p.val();
    std::copy(t.data(), t.data() + t.numel(), out.data() + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    sizes.push_back(t.numel());
    off += t.numel();
  }
  return g.make(std::move(out), tr,
                [ids = std::move(ids), offsets = std::move(offsets), sizes = std::move(sizes)](
                    Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    for (size_t k = 0; k < ids.size(); ++k) {
      if (!g.node(ids[k]).tracked) continue;
      Tensor& dp = g.grad_buf(ids[k]);
      for (size_t i = 0; i < sizes[k]; ++i) dp[i] += dy[offsets[k] + i];
    }
  });
}

Var gather_rows(Var a, std::vector<int> idx) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() == 2, "gather_rows: need rank 2");
  const int C = A.dim(1), R = A.dim(0);
  for (int i : idx) require(0 <= i && i < R, "gather_rows: index out of range");
  const int G = static_cast<int>(idx.size());
  Tensor out({G, C});
  for (int r = 0; r < G; ++r)
    std::copy(A.data() + static_cast<size_t>(idx[static_cast<size_t>(r)]) * C,
              A.data() + static_cast<size_t>(idx[static_cast<size_t>(r)] + 1) * C,
              out.data() + static_cast<size_t>(r) * C);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, idx = std::move(idx), C](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& da = g.grad_buf(ai);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < C; ++c)
        da[static_cast<size_t>(idx[r]) * C + c] += dy[r * C + c];
  });
}

Var concat_ch(Var a, Var b) {
  Graph& g = same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  require(A.rank() == 4 && B.rank() == 4 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(2) &&
              A.dim(3) == B.dim(3),
          "concat_ch: bad shapes");
  const int N = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), HW = A.dim(2) * A.dim(3);
  Tensor out({N, Ca + Cb, A.dim(2), A.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy(A.data() + static_cast<size_t>(n) * Ca * HW, A.data() + static_cast<size_t>(n + 1) * Ca * HW,
              out.data() + static_cast<size_t>(n) * (Ca + Cb) * HW);
    std::copy(B.data() + static_cast<size_t>(n) * Cb * HW, B.data() + static_cast<size_t>(n + 1) * Cb * HW,
              out.data() + static_cast<size_t>(n) * (Ca + Cb) * HW + static_cast<size_t>(Ca) * HW);
  }
  const int ai = a.id, bi = b.id;
  return g.make(std::move(out), tracked(a) || tracked(b), [ai, bi, N, Ca, Cb, HW](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    if (g.node(ai).tracked) {
      Tensor& da = g.grad_buf(ai);
      for (int n = 0; n < N; ++n) {
        const double* src = dy.data() + static_cast<size_t>(n) * (Ca + Cb) * HW;
        double* dst = da.data() + static_cast<size_t>(n) * Ca * HW;
        for (int i = 0; i < Ca * HW; ++i) dst[i] += src[i];
      }
    }
    if (g.node(bi).tracked) {
      Tensor& db = g.grad_buf(bi);
      for (int n = 0; n < N; ++n) {
        const double* src = dy.data() + static_cast<size_t>(n) * (Ca + Cb) * HW + static_cast<size_t>(Ca) * HW;
        double* dst = db.data() + static_cast<size_t>(n) * Cb * HW;
        for (int i = 0; i < Cb * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

Var slice_ch(Var a, int c0, int c1) {
  Graph& g = *a.g;
  const Tensor& A = a.val();
  require(A.rank() == 4 && 0 <= c0 && c0 < c1 && c1 <= A.dim(1), "slice_ch: bad range");
  const int N = A.dim(0), C = A.dim(1), HW = A.dim(2) * A.dim(3), Cs = c1 - c0;
  Tensor out({N, Cs, A.dim(2), A.dim(3)});
  for (int n = 0; n < N; ++n)
    std::copy(A.data() + (static_cast<size_t>(n) * C + c0) * HW,
              A.data() + (static_cast<size_t>(n) * C + c1) * HW,
              out.data() + static_cast<size_t>(n) * Cs * HW);
  const int ai = a.id;
  return g.make(std::move(out), tracked(a), [ai, N, C, HW, c0, Cs](Graph& g, int self) {
    if (!g.node(ai).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& da = g.grad_buf(ai);
    for (int n = 0; n < N; ++n) {
      const double* src = dy.data() + static_cast<size_t>(n) * Cs * HW;
      double* dst = da.data() + (static_cast<size_t>(n) * C + c0) * HW;
      for (int i = 0; i < Cs * HW; ++i) dst[i] += src[i];
    }
  });
}

Var mul_bc_ch(Var x, Var m) {
  Graph& g = same_graph(x, m);
  const Tensor& X = x.val();
  const Tensor& M = m.val();
  require(X.rank() == 4 && M.rank() == 4 && M.dim(1) == 1 && X.dim(0) == M.dim(0) &&
              X.dim(2) == M.dim(2) && X.dim(3) == M.dim(3),
          "mul_bc_ch: need (N,C,H,W)*(N,1,H,W)");
  const int N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  Tensor out = X;
  for (int n = 0; n < N; ++n) {
    const double* mm = M.data() + static_cast<size_t>(n) * HW;
    for (int c = 0; c < C; ++c) {
      double* p = out.data() + (static_cast<size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) p[i] *= mm[i];
    }
  }
  const int xi = x.id, mi = m.id;
  return g.make(std::move(out), tracked(x) || tracked(m), [xi, mi, N, C, HW](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    const Tensor& X = g.node(xi).val;
    const Tensor& M = g.node(mi).val;
    if (g.node(xi).tracked) {
      Tensor& dx = g.grad_buf(xi);
      for (int n = 0; n < N; ++n) {
        const double* mm = M.data() + static_cast<size_t>(n) * HW;
        for (int c = 0; c < C; ++c) {
          const size_t off = (static_cast<size_t>(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) dx[off + i] += dy[off + i] * mm[i];
        }
      }
    }
    if (g.node(mi).tracked) {
      Tensor& dm = g.grad_buf(mi);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const size_t off = (static_cast<size_t>(n) * C + c) * HW;
          double* d = dm.data() + static_cast<size_t>(n) * HW;
          for (int i = 0; i < HW; ++i) d[i] += dy[off + i] * X[off + i];
        }
    }
  });
}

Var heads_split(Var x, int heads) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 3 && X.dim(2) % heads == 0, "heads_split: bad shapes");
  const int N = X.dim(0), T = X.dim(1), C = X.dim(2), dh = C / heads;
  Tensor out({N * heads, T, dh});
  for (int n = 0; n < N; ++n)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy(X.data() + ((static_cast<size_t>(n) * T + t) * C + h * dh),
                  X.data() + ((static_cast<size_t>(n) * T + t) * C + (h + 1) * dh),
                  out.data() + ((static_cast<size_t>(n) * heads + h) * T + t) * dh);
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, heads, N, T, C, dh](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int n = 0; n < N; ++n)
      for (int t = 0; t < T; ++t)
        for (int h = 0; h < heads; ++h) {
          const double* src = dy.data() + ((static_cast<size_t>(n) * heads + h) * T + t) * dh;
          double* dst = dx.data() + ((static_cast<size_t>(n) * T + t) * C + h * dh);
          for (int d = 0; d < dh; ++d) dst[d] += src[d];
        }
  });
}

Var heads_merge(Var x, int heads) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 3 && X.dim(0) % heads == 0, "heads_merge: bad shapes");
  const int N = X.dim(0) / heads, T = X.dim(1), dh = X.dim(2), C = heads * dh;
  Tensor out({N, T, C});
  for (int n = 0; n < N; ++n)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy(X.data() + ((static_cast<size_t>(n) * heads + h) * T + t) * dh,
                  X.data() + ((static_cast<size_t>(n) * heads + h) * T + t + 1) * dh,
                  out.data() + ((static_cast<size_t>(n) * T + t) * C + h * dh));
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, heads, N, T, dh, C](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int n = 0; n < N; ++n)
      for (int t = 0; t < T; ++t)
        for (int h = 0; h < heads; ++h) {
          const double* src = dy.data() + ((static_cast<size_t>(n) * T + t) * C + h * dh);
          double* dst = dx.data() + ((static_cast<size_t>(n) * heads + h) * T + t) * dh;
          for (int d = 0; d < dh; ++d) dst[d] += src[d];
        }
  });
}

Var nchw_to_ntc(Var x) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 4, "nchw_to_ntc: need (N,C,H,W)");
  const int N = X.dim(0), C = X.dim(1), T = X.dim(2) * X.dim(3);
  Tensor out({N, T, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = X.data() + (static_cast<size_t>(n) * C + c) * T;
      for (int t = 0; t < T; ++t) out[(static_cast<size_t>(n) * T + t) * C + c] = src[t];
    }
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, N, C, T](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double* dst = dx.data() + (static_cast<size_t>(n) * C + c) * T;
        for (int t = 0; t < T; ++t) dst[t] += dy[(static_cast<size_t>(n) * T + t) * C + c];
      }
  });
}

Var ntc_to_nchw(Var x, int H, int W) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 3 && X.dim(1) == H * W, "ntc_to_nchw: bad shapes");
  const int N = X.dim(0), T = X.dim(1), C = X.dim(2);
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c)
        out[(static_cast<size_t>(n) * C + c) * T + t] = X[(static_cast<size_t>(n) * T + t) * C + c];
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, N, T, C](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int n = 0; n < N; ++n)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c)
          dx[(static_cast<size_t>(n) * T + t) * C + c] += dy[(static_cast<size_t>(n) * C + c) * T + t];
  });
}

// ---------------------------------------------------------------------------
// conv / vision
// ---------------------------------------------------------------------------

namespace {

void im2col(const double* x, int Ci, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            double* col) {
  // col is (Ho*Wo, Ci*kh*kw) row-major
  for (int i = 0; i < Ho; ++i)
    for (int j = 0; j < Wo; ++j) {
      double* dst = col + (static_cast<size_t>(i) * Wo + j) * Ci * kh * kw;
      for (int c = 0; c < Ci; ++c)
        for (int u = 0; u < kh; ++u) {
          const int y = i * stride + u - pad;
          for (int v = 0; v < kw; ++v) {
            const int xw = j * stride + v - pad;
            *dst++ = (y >= 0 && y < H && xw >= 0 && xw < W)
                         ? x[(static_cast<size_t>(c) * H + y) * W + xw]
                         : 0.0;
          }
        }
    }
}

void col2im_add(const double* col, int Ci, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                int Wo, double* x) {
  for (int i = 0; i < Ho; ++i)
    for (int j = 0; j < Wo; ++j) {
      const double* src = col + (static_cast<size_t>(i) * Wo + j) * Ci * kh * kw;
      for (int c = 0; c < Ci; ++c)
        for (int u = 0; u < kh; ++u) {
          const int y = i * stride + u - pad;
          for (int v = 0; v < kw; ++v) {
            const int xw = j * stride + v - pad;
            if (y >= 0 && y < H && xw >= 0 && xw < W)
              x[(static_cast<size_t>(c) * H + y) * W + xw] += *src;
            ++src;
          }
        }
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  const Tensor& Wt = w.val();
  require(X.rank() == 4 && Wt.rank() == 4 && X.dim(1) == Wt.dim(1), "conv2d: bad shapes");
  if (b.valid()) require(b.val().rank() == 1 && b.val().dim(0) == Wt.dim(0), "conv2d: bad bias");
  const int N = X.dim(0), Ci = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int Co = Wt.dim(0), kh = Wt.dim(2), kw = Wt.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: empty output");
  Tensor out({N, Co, Ho, Wo});
  const int colw = Ci * kh * kw;
  std::vector<double> col(static_cast<size_t>(Ho) * Wo * colw);
  CMapM wm(Wt.data(), Co, colw);
  for (int n = 0; n < N; ++n) {
    im2col(X.data() + static_cast<size_t>(n) * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
           col.data());
    MapM on(out.data() + static_cast<size_t>(n) * Co * Ho * Wo, Co, Ho * Wo);
    on.noalias() = wm * CMapM(col.data(), Ho * Wo, colw).transpose();
  }
  if (b.valid()) {
    const Tensor& B = b.val();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Co; ++c) {
        double* p = out.data() + (static_cast<size_t>(n) * Co + c) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) p[i] += B[static_cast<size_t>(c)];
      }
  }
  const int xi = x.id, wi = w.id, bi = b.valid() ? b.id : -1;
  const bool tr = tracked(x) || tracked(w) || (b.valid() && tracked(b));
  return g.make(std::move(out), tr, [xi, wi, bi, N, Ci, H, W, Co, kh, kw, stride, pad, Ho, Wo, colw](
                                        Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    const Tensor& X = g.node(xi).val;
    const Tensor& Wt = g.node(wi).val;
    const bool need_dx = g.node(xi).tracked;
    const bool need_dw = g.node(wi).tracked;
    const bool need_db = bi >= 0 && g.node(bi).tracked;
    std::vector<double> col(static_cast<size_t>(Ho) * Wo * colw);
    std::vector<double> dcol(need_dx ? col.size() : 0);
    CMapM wm(Wt.data(), Co, colw);
    for (int n = 0; n < N; ++n) {
      CMapM dyn(dy.data() + static_cast<size_t>(n) * Co * Ho * Wo, Co, Ho * Wo);
      if (need_dw) {
        im2col(X.data() + static_cast<size_t>(n) * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
               col.data());
        MapM dwm(g.grad_buf(wi).data(), Co, colw);
        dwm.noalias() += dyn * CMapM(col.data(), Ho * Wo, colw);
      }
      if (need_dx) {
        MapM(dcol.data(), Ho * Wo, colw).noalias() = dyn.transpose() * wm;
        col2im_add(dcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                   g.grad_buf(xi).data() + static_cast<size_t>(n) * Ci * H * W);
      }
      if (need_db) {
        Tensor& db = g.grad_buf(bi);
        for (int c = 0; c < Co; ++c) {
          const double* p = dy.data() + (static_cast<size_t>(n) * Co + c) * Ho * Wo;
          double s = 0;
          for (int i = 0; i < Ho * Wo; ++i) s += p[i];
          db[static_cast<size_t>(c)] += s;
        }
      }
    }
  });
}

Var upsample2x(Var x) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 4, "upsample2x: need (N,C,H,W)");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  for (int nc = 0; nc < N * C; ++nc) {
    const double* src = X.data() + static_cast<size_t>(nc) * H * W;
    double* dst = out.data() + static_cast<size_t>(nc) * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double v = src[static_cast<size_t>(i) * W + j];
        dst[(static_cast<size_t>(2 * i)) * 2 * W + 2 * j] = v;
        dst[(static_cast<size_t>(2 * i)) * 2 * W + 2 * j + 1] = v;
        dst[(static_cast<size_t>(2 * i + 1)) * 2 * W + 2 * j] = v;
        dst[(static_cast<size_t>(2 * i + 1)) * 2 * W + 2 * j + 1] = v;
      }
  }
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, N, C, H, W](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dy = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int nc = 0; nc < N * C; ++nc) {
      double* dst = dx.data() + static_cast<size_t>(nc) * H * W;
      const double* src = dy.data() + static_cast<size_t>(nc) * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          dst[static_cast<size_t>(i) * W + j] +=
              src[(static_cast<size_t>(2 * i)) * 2 * W + 2 * j] +
              src[(static_cast<size_t>(2 * i)) * 2 * W + 2 * j + 1] +
              src[(static_cast<size_t>(2 * i + 1)) * 2 * W + 2 * j] +
              src[(static_cast<size_t>(2 * i + 1)) * 2 * W + 2 * j + 1];
    }
  });
}

Var space_to_depth(Var x, int r) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 4 && X.dim(2) % r == 0 && X.dim(3) % r == 0, "space_to_depth: bad shapes");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3), Ho = H / r, Wo = W / r;
  Tensor out({N, C * r * r, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int dy_ = 0; dy_ < r; ++dy_)
        for (int dx_ = 0; dx_ < r; ++dx_) {
          const int co = (c * r + dy_) * r + dx_;
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
              out[((static_cast<size_t>(n) * C * r * r + co) * Ho + i) * Wo + j] =
                  X[((static_cast<size_t>(n) * C + c) * H + i * r + dy_) * W + j * r + dx_];
        }
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, N, C, H, W, Ho, Wo, r](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dyt = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int dy_ = 0; dy_ < r; ++dy_)
          for (int dx_ = 0; dx_ < r; ++dx_) {
            const int co = (c * r + dy_) * r + dx_;
            for (int i = 0; i < Ho; ++i)
              for (int j = 0; j < Wo; ++j)
                dx[((static_cast<size_t>(n) * C + c) * H + i * r + dy_) * W + j * r + dx_] +=
                    dyt[((static_cast<size_t>(n) * C * r * r + co) * Ho + i) * Wo + j];
          }
  });
}

Var depth_to_space(Var x, int r) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 4 && X.dim(1) % (r * r) == 0, "depth_to_space: bad shapes");
  const int N = X.dim(0), Ci = X.dim(1), Hi = X.dim(2), Wi = X.dim(3);
  const int C = Ci / (r * r), H = Hi * r, W = Wi * r;
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int dy_ = 0; dy_ < r; ++dy_)
        for (int dx_ = 0; dx_ < r; ++dx_) {
          const int ci = (c * r + dy_) * r + dx_;
          for (int i = 0; i < Hi; ++i)
            for (int j = 0; j < Wi; ++j)
              out[((static_cast<size_t>(n) * C + c) * H + i * r + dy_) * W + j * r + dx_] =
                  X[((static_cast<size_t>(n) * Ci + ci) * Hi + i) * Wi + j];
        }
  const int xi = x.id;
  return g.make(std::move(out), tracked(x), [xi, N, C, Ci, Hi, Wi, H, W, r](Graph& g, int self) {
    if (!g.node(xi).tracked) return;
    const Tensor& dyt = *g.node(self).grad;
    Tensor& dx = g.grad_buf(xi);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int dy_ = 0; dy_ < r; ++dy_)
          for (int dx_ = 0; dx_ < r; ++dx_) {
            const int ci = (c * r + dy_) * r + dx_;
            for (int i = 0; i < Hi; ++i)
              for (int j = 0; j < Wi; ++j)
                dx[((static_cast<size_t>(n) * Ci + ci) * Hi + i) * Wi + j] +=
                    dyt[((static_cast<size_t>(n) * C + c) * H + i * r + dy_) * W + j * r + dx_];
          }
  });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  require(X.rank() == 4, "group_norm: need (N,C,H,W)");
  const int N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  require(C % groups == 0, "group_norm: groups must divide channels");
  require(gamma.val().rank() == 1 && gamma.val().dim(0) == C, "group_norm: bad gamma");
  require(beta.val().rank() == 1 && beta.val().dim(0) == C, "group_norm: bad beta");
  const int cg = C / groups;
  const size_t m = static_cast<size_t>(cg) * HW;
  Tensor out(X.shape());
  std::vector<double> mu(static_cast<size_t>(N) * groups), inv(static_cast<size_t>(N) * groups);
  const Tensor& G = gamma.val();
  const Tensor& B = beta.val();
  for (int n = 0; n < N; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const double* p = X.data() + (static_cast<size_t>(n) * C + gi * cg) * HW;
      double s = 0, s2 = 0;
      for (size_t i = 0; i < m; ++i) {
        s += p[i];
        s2 += p[i] * p[i];
      }
      const double mean = s / static_cast<double>(m);
      const double var = s2 / static_cast<double>(m) - mean * mean;
      const double iv = 1.0 / std::sqrt(var + eps);
      mu[static_cast<size_t>(n) * groups + gi] = mean;
      inv[static_cast<size_t>(n) * groups + gi] = iv;
      double* o = out.data() + (static_cast<size_t>(n) * C + gi * cg) * HW;
      for (int c = 0; c < cg; ++c) {
        const double ga = G[static_cast<size_t>(gi * cg + c)];
        const double be = B[static_cast<size_t>(gi * cg + c)];
        for (int i = 0; i < HW; ++i) {
          const size_t k = static_cast<size_t>(c) * HW + i;
          o[k] = (p[k] - mean) * iv * ga + be;
        }
      }
    }
  const int xi = x.id, gi_ = gamma.id, bi = beta.id;
  const bool tr = tracked(x) || tracked(gamma) || tracked(beta);
  return g.make(std::move(out), tr,
                [xi, gi_, bi, N, C, HW, groups, cg, m, mu = std::move(mu), inv = std::move(inv)](
                    Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    const Tensor& X = g.node(xi).val;
    const Tensor& G = g.node(gi_).val;
    const bool need_dx = g.node(xi).tracked;
    const bool need_dg = g.node(gi_).tracked;
    const bool need_db = g.node(bi).tracked;
    std::vector<double> xhat(m), dxh(m);
    for (int n = 0; n < N; ++n)
      for (int gr = 0; gr < groups; ++gr) {
        const size_t base = (static_cast<size_t>(n) * C + gr * cg) * HW;
        const double mean = mu[static_cast<size_t>(n) * groups + gr];
        const double iv = inv[static_cast<size_t>(n) * groups + gr];
        for (size_t i = 0; i < m; ++i) xhat[i] = (X.data()[base + i] - mean) * iv;
        if (need_dg || need_db) {
          for (int c = 0; c < cg; ++c) {
            double sg = 0, sb = 0;
            const double* dptr = dy.data() + base + static_cast<size_t>(c) * HW;
            for (int i = 0; i < HW; ++i) {
              sg += dptr[i] * xhat[static_cast<size_t>(c) * HW + i];
              sb += dptr[i];
            }
            if (need_dg) g.grad_buf(gi_)[static_cast<size_t>(gr * cg + c)] += sg;
            if (need_db) g.grad_buf(bi)[static_cast<size_t>(gr * cg + c)] += sb;
          }
        }
        if (need_dx) {
          double mean_dxh = 0, mean_dxh_xhat = 0;
          for (int c = 0; c < cg; ++c) {
            const double ga = G[static_cast<size_t>(gr * cg + c)];
            const double* dptr = dy.data() + base + static_cast<size_t>(c) * HW;
            for (int i = 0; i < HW; ++i) {
              const size_t k = static_cast<size_t>(c) * HW + i;
              dxh[k] = dptr[i] * ga;
              mean_dxh += dxh[k];
              mean_dxh_xhat += dxh[k] * xhat[k];
            }
          }
          mean_dxh /= static_cast<double>(m);
          mean_dxh_xhat /= static_cast<double>(m);
          double* dxp = g.grad_buf(xi).data() + base;
          for (size_t i = 0; i < m; ++i)
            dxp[i] += iv * (dxh[i] - mean_dxh - xhat[i] * mean_dxh_xhat);
        }
      }
  });
}

Var layer_norm_last(Var x, Var gamma, Var beta, double eps) {
  Graph& g = *x.g;
  const Tensor& X = x.val();
  const int C = X.shape().back();
  require(gamma.val().rank() == 1 && gamma.val().dim(0) == C, "layer_norm_last: bad gamma");
  require(beta.val().rank() == 1 && beta.val().dim(0) == C, "layer_norm_last: bad beta");
  const size_t rows = X.numel() / static_cast<size_t>(C);
  Tensor out(X.shape());
  std::vector<double> mu(rows), inv(rows);
  const Tensor& G = gamma.val();
  const Tensor& B = beta.val();
  for (size_t r = 0; r < rows; ++r) {
    const double* p = X.data() + r * C;
    double s = 0, s2 = 0;
    for (int c = 0; c < C; ++c) {
      s += p[c];
      s2 += p[c] * p[c];
    }
    const double mean = s / C;
    const double var = s2 / C - mean * mean;
    const double iv = 1.0 / std::sqrt(var + eps);
    mu[r] = mean;
    inv[r] = iv;
    double* o = out.data() + r * C;
    for (int c = 0; c < C; ++c)
      o[c] = (p[c] - mean) * iv * G[static_cast<size_t>(c)] + B[static_cast<size_t>(c)];
  }
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  const bool tr = tracked(x) || tracked(gamma) || tracked(beta);
  return g.make(std::move(out), tr,
                [xi, gi, bi, C, rows, mu = std::move(mu), inv = std::move(inv)](Graph& g, int self) {
    const Tensor& dy = *g.node(self).grad;
    const Tensor& X = g.node(xi).val;
    const Tensor& G = g.node(gi).val;
    const bool need_dx = g.node(xi).tracked;
    const bool need_dg = g.node(gi).tracked;
    const bool need_db = g.node(bi).tracked;
    std::vector<double> xhat(static_cast<size_t>(C)), dxh(static_cast<size_t>(C));
    for (size_t r = 0; r < rows; ++r) {
      const double* p = X.data() + r * C;
      const double* d = dy.data() + r * C;
      for (int c = 0; c < C; ++c) xhat[static_cast<size_t>(c)] = (p[c] - mu[r]) * inv[r];
      if (need_dg)
        for (int c = 0; c < C; ++c) g.grad_buf(gi)[static_cast<size_t>(c)] += d[c] * xhat[static_cast<size_t>(c)];
      if (need_db)
        for (int c = 0; c < C; ++c) g.grad_buf(bi)[static_cast<size_t>(c)] += d[c];
      if (need_dx) {
        double mean_dxh = 0, mean_dxh_xhat = 0;
        for (int c = 0; c < C; ++c) {
          dxh[static_cast<size_t>(c)] = d[c] * G[static_cast<size_t>(c)];
          mean_dxh += dxh[static_cast<size_t>(c)];
          mean_dxh_xhat += dxh[static_cast<size_t>(c)] * xhat[static_cast<size_t>(c)];
        }
        mean_dxh /= C;
        mean_dxh_xhat /= C;
        double* dxp = g.grad_buf(xi).data() + r * C;
        for (int c = 0; c < C; ++c)
          dxp[c] += inv[r] * (dxh[static_cast<size_t>(c)] - mean_dxh -
                              xhat[static_cast<size_t>(c)] * mean_dxh_xhat);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Var linear(Var x2d, Var w, Var b) {
  Var y = matmul(x2d, w);
  return b.valid() ? add_bias_last(y, b) : y;
}

Var l2_normalize_rows(Var x, double eps) {
  Var n2 = row_sum(mul(x, x));
  Var inv = vrsqrt(n2, eps);
  return mul_colvec(x, inv);
}

Var cosine_matrix(Var a, Var b, double eps) {
  return matmul_nt(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps));
}

Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean_all(mul(d, d));
}

Var dot_all(Var a, Var b) { return sum_all(mul(a, b)); }

// ---------------------------------------------------------------------------
// optimizer / module
// ---------------------------------------------------------------------------

void Adam::step(const std::vector<Param*>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : params) {
    if (!p->grad.same_shape(p->value)) continue;  // no gradient this step
    if (!p->m.same_shape(p->value)) {
      p->m = Tensor(p->value.shape());
      p->v = Tensor(p->value.shape());
    }
    for (size_t i = 0; i < p->value.numel(); ++i) {
      const double gi = p->grad[i];
      p->m[i] = cfg_.beta1 * p->m[i] + (1.0 - cfg_.beta1) * gi;
      p->v[i] = cfg_.beta2 * p->v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = p->m[i] / bc1;
      const double vhat = p->v[i] / bc2;
      p->value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

Param& Module::add_param(const std::string& name, Tensor init) {
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = std::move(init);
  params_.push_back(std::move(p));
  return *params_.back();
}

std::vector<Param*> Module::params() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Param*> Module::params() const {
  std::vector<const Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Param* Module::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

size_t Module::num_scalars() const {
  size_t n = 0;
  for (auto& p : params_) n += p->value.numel();
  return n;
}

}  // namespace compdis
