#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "compdis/tensor.hpp"

namespace compdis {

class Graph;

// Handle to a node in a Graph.
struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& val() const;
  const std::vector<int>& shape() const;
};

// Trainable tensor plus gradient accumulator and Adam slots.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m, v;  // Adam moments, sized on first optimizer step

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor(value.shape());
    else grad.fill(0.0);
  }
};

// Reverse-mode tape. Nodes are append-only, so every parent id is smaller
// than its children's; backward is a single decreasing-id sweep.
class Graph {
 public:
  Var constant(Tensor t);
  Var leaf(Tensor t, bool requires_grad);
  // Cached leaf for a parameter: repeated use() within one graph aliases the
  // same node so gradients accumulate across call sites.
  Var use(Param& p, bool trainable = true);

  bool recording() const { return no_grad_depth_ == 0; }

  class NoGrad {
   public:
    explicit NoGrad(Graph& g) : g_(g) { ++g_.no_grad_depth_; }
    ~NoGrad() { --g_.no_grad_depth_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Graph& g_;
  };

  // Clears all node gradients, seeds `root` (a scalar) with 1, and sweeps.
  void backward(Var root);

  const Tensor& val(Var v) const;
  bool has_grad(Var v) const;
  const Tensor& grad(Var v) const;  // throws if absent
  Tensor grad_or_zero(Var v) const;

  // Adds whatever gradient this graph holds for each param into param.grad.
  void accumulate_param_grads(const std::vector<Param*>& params);

  size_t num_nodes() const { return nodes_.size(); }

  // --- internal node plumbing (used by the op implementations) ---
  // The backward closure receives the graph and the node's own id, so it can
  // read its output gradient and push contributions into its parents.
  struct Node {
    Tensor val;
    std::unique_ptr<Tensor> grad;
    std::function<void(Graph&, int)> back;
    bool tracked = false;
  };
  Var make(Tensor val, bool tracked, std::function<void(Graph&, int)> back);
  Tensor& grad_buf(int id);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

 private:
  std::deque<Node> nodes_;
  std::unordered_map<const Param*, std::pair<int, bool>> param_vars_;
  int no_grad_depth_ = 0;
};

bool tracked(Var v);

// ---- elementwise / broadcast ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);
Var neg(Var a);
Var vexp(Var a);
Var vlog(Var a);
Var vsqrt(Var a);
Var vrsqrt(Var a, double eps = 0.0);
Var relu(Var a);
Var silu(Var a);
Var detach(Var a);

// bias/broadcast adds
Var add_bias_last(Var x, Var b);         // (..., C) + (C)
Var add_bias_ch(Var x, Var b);           // (N,C,H,W) + (C)
Var add_per_sample_ch(Var x, Var e);     // (N,C,H,W) + (N,C)
Var scale_per_sample(Var x, Var s);      // (N,...) * s[n]
Var mul_colvec(Var x, Var v);            // (R,C) * v[r]
Var add_colvec(Var x, Var v);            // (R,C) + v[r]
Var add_rowvec(Var x, Var v);            // (R,C) + v[c]

// ---- linear algebra ----
Var matmul(Var a, Var b);     // (M,K)x(K,N)
Var matmul_nt(Var a, Var b);  // (M,K)x(N,K)^T -> (M,N)
Var matmul_tn(Var a, Var b);  // (K,M)^T x (K,N) -> (M,N)
Var bmm(Var a, Var b);        // (B,M,K)x(B,K,N)
Var bmm_nt(Var a, Var b);     // (B,M,K)x(B,N,K)^T -> (B,M,N)

// ---- reductions ----
Var sum_all(Var a);   // -> (1)
Var mean_all(Var a);  // -> (1)
Var row_sum(Var a);   // (R,C) -> (R)
Var lse_rows(Var a);  // (R,C) -> (R), stabilized log-sum-exp
Var softmax_last(Var a);

// ---- shape ----
Var reshape(Var a, std::vector<int> shape);
Var transpose2d(Var a);
Var slice_rows(Var a, int r0, int r1);
Var concat_rows(Var a, Var b);
Var concat_rows_n(const std::vector<Var>& parts);
Var gather_rows(Var a, std::vector<int> idx);
Var concat_ch(Var a, Var b);              // (N,C1,H,W) ++ (N,C2,H,W)
Var slice_ch(Var a, int c0, int c1);      // (N,C,H,W) -> (N,c1-c0,H,W)
Var mul_bc_ch(Var x, Var m);              // (N,C,H,W) * (N,1,H,W)
Var heads_split(Var x, int heads);        // (N,T,C) -> (N*h,T,C/h)
Var heads_merge(Var x, int heads);        // (N*h,T,C/h) -> (N,T,h*(C/h))
Var nchw_to_ntc(Var x);                   // (N,C,H,W) -> (N,H*W,C)
Var ntc_to_nchw(Var x, int H, int W);     // (N,H*W,C) -> (N,C,H,W)

// ---- conv / vision ----
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var upsample2x(Var x);
Var space_to_depth(Var x, int r);
Var depth_to_space(Var x, int r);

// ---- normalization ----
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
Var layer_norm_last(Var x, Var gamma, Var beta, double eps = 1e-5);

// ---- small composites ----
Var linear(Var x2d, Var w, Var b);  // (R,Cin)x(Cin,Cout) + b
Var l2_normalize_rows(Var x, double eps = 1e-12);
Var cosine_matrix(Var a, Var b, double eps = 1e-12);  // (Ka,D),(Kb,D) -> (Ka,Kb)
Var mse(Var a, Var b);                                // mean squared error -> (1)
Var dot_all(Var a, Var b);                            // sum(a*b) -> (1)

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  void step(const std::vector<Param*>& params);
  void zero_grads(const std::vector<Param*>& params);
  int64_t steps_done() const { return t_; }
  void set_steps_done(int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Parameter container shared by the nets and probes.
class Module {
 public:
  virtual ~Module() = default;
  Param& add_param(const std::string& name, Tensor init);
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  Param* find(const std::string& name);
  size_t num_scalars() const;

 protected:
  std::vector<std::unique_ptr<Param>> params_;
};

}  // namespace compdis
