#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "pivl/tensor.hpp"

// Minimal tape-free reverse-mode autodiff. Every op returns a Var whose node
// keeps its inputs alive; backward() walks the DAG in reverse topological
// order. Nodes that cannot reach a parameter with requires_grad carry no
// closure, so frozen sub-networks cost a plain forward pass.
namespace pivl::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && !node_->grad.data.empty(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->ensure_grad(); }
  void zero_grad();

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Seeds d(root)/d(root) = 1 and accumulates into every reachable leaf.
void backward(const Var& root);

// ---------------------------------------------------------------- elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var gelu(const Var& a);
Var square(const Var& a);
// x + tile(p): p.numel() must divide x.numel(). Used for biases and
// positional embeddings.
Var add_tiled(const Var& x, const Var& p);
Var reshape(const Var& a, Shape shape);

// ---------------------------------------------------------------- reductions
Var sum(const Var& a);
Var mean(const Var& a);
// sum_i weights[i] * a[i]; weights are constants.
Var weighted_sum(const Var& a, const Tensor& weights);
Var add_n(std::span<const Var> terms);

// ------------------------------------------------------------- matrix (2-D)
Var matmul(const Var& a, const Var& b);     // [N,K] x [K,M]
Var matmul_nt(const Var& a, const Var& b);  // [N,K] x [M,K]^T
Var linear(const Var& x, const Var& weight, const Var& bias);  // weight [out,in]; bias may be undefined
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var l2_normalize_rows(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var index_rows(const Var& a, std::span<const int> rows);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, int begin, int end);
// [B*T, D] -> [B, D], averaging consecutive groups of T rows.
Var segment_mean_rows(const Var& a, int group);
// Euclidean distances ||a[first[k]] - a[second[k]]|| between row pairs.
Var row_distances(const Var& a, std::span<const int> first, std::span<const int> second);
// Flat gather of single elements.
Var gather(const Var& a, std::span<const std::size_t> flat_index);

// Mean over anchors (rows with at least one positive) of the mean over that
// row's positives p of -log(e^{l_ip} / (e^{l_ip} + sum_{n in neg(i)} e^{l_in})).
// masks are [N,M] with 1 marking membership.
Var infonce_pairs(const Var& logits, const Tensor& positive_mask, const Tensor& negative_mask);

// ---------------------------------------------------------------- images NCHW
enum class PadMode { Zero, Replicate };

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad,
           PadMode mode = PadMode::Zero);
Var avg_pool2x2(const Var& x);
Var upsample_nearest2x(const Var& x);
// Bilinear x2 with half-pixel centers and edge clamping (align_corners=false).
Var upsample_bilinear2x(const Var& x);
// [B,C,H,W] <-> [B*H*W, C]
Var nchw_to_rows(const Var& x);
Var rows_to_nchw(const Var& x, int batch, int height, int width);

}  // namespace pivl::ag
