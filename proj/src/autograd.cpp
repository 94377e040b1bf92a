#include "pivl/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace pivl {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace pivl

namespace pivl::ag {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local bool g_grad_enabled = true;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, int rank, const char* op) {
  require(a.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_str(a.shape()));
}

Var make(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var::from_node(std::move(node));
}

Var make_n(Tensor value, std::span<const Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var::from_node(std::move(node));
}

// Input gradient buffer if that input participates in differentiation.
Tensor* grad_of(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return &in->ensure_grad();
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.data.size() != value.data.size()) grad = Tensor(value.shape, 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

double Var::item() const {
  require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->value.data[0];
}

void Var::zero_grad() {
  if (node_) std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  require(root.defined() && root.numel() == 1, "backward(): root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

// ----------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = grad_of(self, k))
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return make(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v += s;
  return make(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return make(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i)
        if (self.value[i] > 0.0) (*g)[i] += self.grad[i];
  });
}

Var gelu(const Var& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out = a.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  return make(std::move(out), {a}, [](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const Tensor& x = self.inputs[0]->value;
    for (std::size_t i = 0; i < g->numel(); ++i) {
      const double v = x[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      (*g)[i] += self.grad[i] * d;
    }
  });
}

Var square(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.data) v *= v;
  return make(std::move(out), {a}, [](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const Tensor& x = self.inputs[0]->value;
    for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += 2.0 * x[i] * self.grad[i];
  });
}

Var add_tiled(const Var& x, const Var& p) {
  const std::size_t n = x.numel(), m = p.numel();
  require(m > 0 && n % m == 0, "add_tiled: " + shape_str(p.shape()) + " does not tile " + shape_str(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i) out[i] += p.value()[i % m];
  return make(std::move(out), {x, p}, [m](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.numel(); ++i) (*g)[i % m] += self.grad[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  return make(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

// ------------------------------------------------------------------ reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return make(Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (double& v : g->data) v += self.grad[0];
  });
}

Var mean(const Var& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var weighted_sum(const Var& a, const Tensor& weights) {
  require(weights.numel() == a.numel(), "weighted_sum: weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) s += weights[i] * a.value()[i];
  return make(Tensor::scalar(s), {a}, [weights](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += weights[i] * self.grad[0];
  });
}

Var add_n(std::span<const Var> terms) {
  require(!terms.empty(), "add_n: no terms");
  const Shape shape = terms.front().shape();
  Tensor out(shape, 0.0);
  for (const auto& t : terms) {
    require(t.shape() == shape, "add_n: shape mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += t.value()[i];
  }
  return make_n(std::move(out), terms, [](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k)
      if (Tensor* g = grad_of(self, k))
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------- matrix

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({n, m});
  MapR(out.data.data(), n, m).noalias() = CMapR(a.value().data.data(), n, k) * CMapR(b.value().data.data(), k, m);
  return make(std::move(out), {a, b}, [n, k, m](Node& self) {
    CMapR dc(self.grad.data.data(), n, m);
    if (Tensor* g = grad_of(self, 0))
      MapR(g->data.data(), n, k).noalias() += dc * CMapR(self.inputs[1]->value.data.data(), k, m).transpose();
    if (Tensor* g = grad_of(self, 1))
      MapR(g->data.data(), k, m).noalias() += CMapR(self.inputs[0]->value.data.data(), n, k).transpose() * dc;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({n, m});
  MapR(out.data.data(), n, m).noalias() =
      CMapR(a.value().data.data(), n, k) * CMapR(b.value().data.data(), m, k).transpose();
  return make(std::move(out), {a, b}, [n, k, m](Node& self) {
    CMapR dc(self.grad.data.data(), n, m);
    if (Tensor* g = grad_of(self, 0))
      MapR(g->data.data(), n, k).noalias() += dc * CMapR(self.inputs[1]->value.data.data(), m, k);
    if (Tensor* g = grad_of(self, 1))
      MapR(g->data.data(), m, k).noalias() += dc.transpose() * CMapR(self.inputs[0]->value.data.data(), n, k);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Var y = matmul_nt(x, weight);
  return bias.defined() ? add_tiled(y, bias) : y;
}

Var softmax_rows(const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const int n = a.dim(0), m = a.dim(1);
  Tensor out = a.value();
  for (int r = 0; r < n; ++r) {
    double* row = out.data.data() + static_cast<std::size_t>(r) * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (int c = 0; c < m; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (int c = 0; c < m; ++c) row[c] /= z;
  }
  return make(std::move(out), {a}, [n, m](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < n; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * m;
      double dot = 0.0;
      for (int c = 0; c < m; ++c) dot += self.grad[off + c] * self.value[off + c];
      for (int c = 0; c < m; ++c) (*g)[off + c] += self.value[off + c] * (self.grad[off + c] - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  require_rank(a, 2, "log_softmax_rows");
  const int n = a.dim(0), m = a.dim(1);
  Tensor out = a.value();
  for (int r = 0; r < n; ++r) {
    double* row = out.data.data() + static_cast<std::size_t>(r) * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (int c = 0; c < m; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (int c = 0; c < m; ++c) row[c] -= lse;
  }
  return make(std::move(out), {a}, [n, m](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < n; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * m;
      double gs = 0.0;
      for (int c = 0; c < m; ++c) gs += self.grad[off + c];
      for (int c = 0; c < m; ++c) (*g)[off + c] += self.grad[off + c] - std::exp(self.value[off + c]) * gs;
    }
  });
}

Var l2_normalize_rows(const Var& a) {
  require_rank(a, 2, "l2_normalize_rows");
  const int n = a.dim(0), d = a.dim(1);
  constexpr double kMinNorm = 1e-12;
  Tensor out = a.value();
  std::vector<double> norms(n);
  for (int r = 0; r < n; ++r) {
    double* row = out.data.data() + static_cast<std::size_t>(r) * d;
    double ss = 0.0;
    for (int c = 0; c < d; ++c) ss += row[c] * row[c];
    norms[r] = std::max(std::sqrt(ss), kMinNorm);
    for (int c = 0; c < d; ++c) row[c] /= norms[r];
  }
  return make(std::move(out), {a}, [n, d, norms = std::move(norms)](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < n; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * d;
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += self.grad[off + c] * self.value[off + c];
      for (int c = 0; c < d; ++c)
        (*g)[off + c] += (self.grad[off + c] - self.value[off + c] * dot) / norms[r];
    }
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  require_rank(a, 2, "layer_norm_rows");
  const int n = a.dim(0), d = a.dim(1);
  require(gamma.numel() == static_cast<std::size_t>(d) && beta.numel() == static_cast<std::size_t>(d),
          "layer_norm_rows: affine size mismatch");
  Tensor xhat = a.value();
  std::vector<double> rstd(n);
  for (int r = 0; r < n; ++r) {
    double* row = xhat.data.data() + static_cast<std::size_t>(r) * d;
    double mu = 0.0;
    for (int c = 0; c < d; ++c) mu += row[c];
    mu /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < d; ++c) row[c] = (row[c] - mu) * rstd[r];
  }
  Tensor out = xhat;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = xhat.at(r, c) * gamma.value()[c] + beta.value()[c];
  return make(std::move(out), {a, gamma, beta},
              [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                const Tensor& gm = self.inputs[1]->value;
                if (Tensor* gg = grad_of(self, 1))
                  for (int r = 0; r < n; ++r)
                    for (int c = 0; c < d; ++c) (*gg)[c] += self.grad.at(r, c) * xhat.at(r, c);
                if (Tensor* gb = grad_of(self, 2))
                  for (int r = 0; r < n; ++r)
                    for (int c = 0; c < d; ++c) (*gb)[c] += self.grad.at(r, c);
                if (Tensor* g = grad_of(self, 0)) {
                  std::vector<double> dxhat(d);
                  for (int r = 0; r < n; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int c = 0; c < d; ++c) {
                      dxhat[c] = self.grad.at(r, c) * gm[c];
                      m1 += dxhat[c];
                      m2 += dxhat[c] * xhat.at(r, c);
                    }
                    m1 /= d;
                    m2 /= d;
                    for (int c = 0; c < d; ++c) g->at(r, c) += rstd[r] * (dxhat[c] - m1 - xhat.at(r, c) * m2);
                  }
                }
              });
}

Var index_rows(const Var& a, std::span<const int> rows) {
  require_rank(a, 2, "index_rows");
  const int n = a.dim(0), d = a.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  Tensor out({static_cast<int>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < n, "index_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(idx[i]) * d, d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  return make(std::move(out), {a}, [d, idx = std::move(idx)](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < d; ++c) g->at(idx[i], c) += self.grad.at(static_cast<int>(i), c);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int d = parts.front().dim(1);
  int total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    require(p.dim(1) == d, "concat_rows: column mismatch");
    total += p.dim(0);
  }
  Tensor out({total, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  return make_n(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t len = self.inputs[k]->value.numel();
      if (Tensor* g = grad_of(self, k))
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[off + i];
      off += len;
    }
  });
}

Var slice_rows(const Var& a, int begin, int end) {
  require_rank(a, 2, "slice_rows");
  require(0 <= begin && begin <= end && end <= a.dim(0), "slice_rows: bad range");
  const int d = a.dim(1);
  Tensor out({end - begin, d});
  std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(begin) * d, out.numel(), out.data.begin());
  return make(std::move(out), {a}, [begin, d](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.numel(); ++i) (*g)[static_cast<std::size_t>(begin) * d + i] += self.grad[i];
  });
}

Var segment_mean_rows(const Var& a, int group) {
  require_rank(a, 2, "segment_mean_rows");
  require(group > 0 && a.dim(0) % group == 0, "segment_mean_rows: rows not divisible by group");
  const int b = a.dim(0) / group, d = a.dim(1);
  Tensor out({b, d});
  for (int r = 0; r < a.dim(0); ++r)
    for (int c = 0; c < d; ++c) out.at(r / group, c) += a.value().at(r, c) / group;
  return make(std::move(out), {a}, [group, d](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int r = 0; r < g->dim(0); ++r)
      for (int c = 0; c < d; ++c) g->at(r, c) += self.grad.at(r / group, c) / group;
  });
}

Var gather(const Var& a, std::span<const std::size_t> flat_index) {
  std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < a.numel(), "gather: index out of range");
    out[i] = a.value()[idx[i]];
  }
  return make(std::move(out), {a}, [idx = std::move(idx)](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) (*g)[idx[i]] += self.grad[i];
  });
}

Var row_distances(const Var& a, std::span<const int> first, std::span<const int> second) {
  require_rank(a, 2, "row_distances");
  require(first.size() == second.size(), "row_distances: index lists differ in length");
  const int n = a.dim(0), d = a.dim(1);
  std::vector<int> i0(first.begin(), first.end()), i1(second.begin(), second.end());
  Tensor out({static_cast<int>(i0.size())});
  for (std::size_t k = 0; k < i0.size(); ++k) {
    require(i0[k] >= 0 && i0[k] < n && i1[k] >= 0 && i1[k] < n, "row_distances: row out of range");
    double ss = 0.0;
    for (int c = 0; c < d; ++c) ss += std::pow(a.value().at(i0[k], c) - a.value().at(i1[k], c), 2);
    out[k] = std::sqrt(ss);
  }
  return make(std::move(out), {a}, [d, i0 = std::move(i0), i1 = std::move(i1)](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    const Tensor& x = self.inputs[0]->value;
    for (std::size_t k = 0; k < i0.size(); ++k) {
      const double dist = self.value[k];
      if (dist <= 0.0) continue;  // subgradient 0 at coincident rows
      for (int c = 0; c < d; ++c) {
        const double v = self.grad[k] * (x.at(i0[k], c) - x.at(i1[k], c)) / dist;
        g->at(i0[k], c) += v;
        g->at(i1[k], c) -= v;
      }
    }
  });
}

Var infonce_pairs(const Var& logits, const Tensor& positive_mask, const Tensor& negative_mask) {
  require_rank(logits, 2, "infonce_pairs");
  require(positive_mask.shape == logits.shape() && negative_mask.shape == logits.shape(),
          "infonce_pairs: mask shape mismatch");
  const int n = logits.dim(0), m = logits.dim(1);
  const Tensor& l = logits.value();

  std::vector<double> row_max(n, 0.0), neg_sum(n, 0.0), weight(n, 0.0);
  int anchors = 0;
  for (int r = 0; r < n; ++r) {
    int npos = 0;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < m; ++c) {
      if (positive_mask.at(r, c) > 0.0) ++npos;
      if (positive_mask.at(r, c) > 0.0 || negative_mask.at(r, c) > 0.0) mx = std::max(mx, l.at(r, c));
    }
    if (npos == 0) continue;
    ++anchors;
    row_max[r] = mx;
    for (int c = 0; c < m; ++c)
      if (negative_mask.at(r, c) > 0.0) neg_sum[r] += std::exp(l.at(r, c) - mx);
    weight[r] = 1.0 / npos;
  }
  double loss = 0.0;
  if (anchors > 0) {
    for (int r = 0; r < n; ++r) {
      if (weight[r] == 0.0) continue;
      weight[r] /= anchors;
      for (int c = 0; c < m; ++c) {
        if (positive_mask.at(r, c) <= 0.0) continue;
        const double shifted = l.at(r, c) - row_max[r];
        loss += weight[r] * (-shifted + std::log(std::exp(shifted) + neg_sum[r]));
      }
    }
  }
  return make(Tensor::scalar(loss), {logits},
              [n, m, positive_mask, negative_mask, row_max = std::move(row_max), neg_sum = std::move(neg_sum),
               weight = std::move(weight)](Node& self) {
                Tensor* g = grad_of(self, 0);
                if (!g) return;
                const Tensor& l = self.inputs[0]->value;
                const double up = self.grad[0];
                for (int r = 0; r < n; ++r) {
                  if (weight[r] == 0.0) continue;
                  double neg_coeff = 0.0;
                  for (int c = 0; c < m; ++c) {
                    if (positive_mask.at(r, c) <= 0.0) continue;
                    const double e = std::exp(l.at(r, c) - row_max[r]);
                    const double denom = e + neg_sum[r];
                    g->at(r, c) += up * weight[r] * (-1.0 + e / denom);
                    neg_coeff += 1.0 / denom;
                  }
                  for (int c = 0; c < m; ++c)
                    if (negative_mask.at(r, c) > 0.0)
                      g->at(r, c) += up * weight[r] * neg_coeff * std::exp(l.at(r, c) - row_max[r]);
                }
              });
}

// ---------------------------------------------------------------------- images

namespace {

// Source plane offset per (kernel tap, output pixel); -1 marks zero padding.
std::vector<int> im2col_table(int h, int w, int k, int stride, int pad, PadMode mode, int ho, int wo) {
  std::vector<int> table(static_cast<std::size_t>(k) * k * ho * wo);
  std::size_t t = 0;
  for (int ki = 0; ki < k; ++ki)
    for (int kj = 0; kj < k; ++kj)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          int y = oy * stride - pad + ki;
          int x = ox * stride - pad + kj;
          if (mode == PadMode::Replicate) {
            y = std::clamp(y, 0, h - 1);
            x = std::clamp(x, 0, w - 1);
            table[t++] = y * w + x;
          } else {
            table[t++] = (y < 0 || y >= h || x < 0 || x >= w) ? -1 : y * w + x;
          }
        }
  return table;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, PadMode mode) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d(weight)");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == c && weight.dim(3) == k,
          "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  require(stride > 0 && h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  const int taps = k * k, rows = c * taps, cols = ho * wo, plane = h * w;

  auto table = std::make_shared<std::vector<int>>(im2col_table(h, w, k, stride, pad, mode, ho, wo));
  auto col_buf = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b) * rows * cols);
  for (int n = 0; n < b; ++n) {
    const double* src = x.value().data.data() + static_cast<std::size_t>(n) * c * plane;
    double* dst = col_buf->data() + static_cast<std::size_t>(n) * rows * cols;
    for (int ch = 0; ch < c; ++ch)
      for (int t = 0; t < taps * cols; ++t) {
        const int s = (*table)[t];
        dst[static_cast<std::size_t>(ch) * taps * cols + t] = s < 0 ? 0.0 : src[static_cast<std::size_t>(ch) * plane + s];
      }
  }
  Tensor out({b, o, ho, wo});
  CMapR wm(weight.value().data.data(), o, rows);
  for (int n = 0; n < b; ++n) {
    MapR y(out.data.data() + static_cast<std::size_t>(n) * o * cols, o, cols);
    y.noalias() = wm * CMapR(col_buf->data() + static_cast<std::size_t>(n) * rows * cols, rows, cols);
    if (bias.defined())
      for (int oc = 0; oc < o; ++oc) y.row(oc).array() += bias.value()[oc];
  }
  const bool has_bias = bias.defined();
  return make(std::move(out), {x, weight, bias},
              [=](Node& self) {
                Tensor* gx = grad_of(self, 0);
                Tensor* gw = grad_of(self, 1);
                Tensor* gb = has_bias ? grad_of(self, 2) : nullptr;
                CMapR wmat(self.inputs[1]->value.data.data(), o, rows);
                std::vector<double> dcol(static_cast<std::size_t>(rows) * cols);
                for (int n = 0; n < b; ++n) {
                  CMapR dy(self.grad.data.data() + static_cast<std::size_t>(n) * o * cols, o, cols);
                  CMapR colm(col_buf->data() + static_cast<std::size_t>(n) * rows * cols, rows, cols);
                  if (gw) MapR(gw->data.data(), o, rows).noalias() += dy * colm.transpose();
                  if (gb)
                    for (int oc = 0; oc < o; ++oc) (*gb)[oc] += dy.row(oc).sum();
                  if (gx) {
                    MapR(dcol.data(), rows, cols).noalias() = wmat.transpose() * dy;
                    double* dst = gx->data.data() + static_cast<std::size_t>(n) * c * plane;
                    for (int ch = 0; ch < c; ++ch)
                      for (int t = 0; t < taps * cols; ++t) {
                        const int s = (*table)[t];
                        if (s >= 0) dst[static_cast<std::size_t>(ch) * plane + s] += dcol[static_cast<std::size_t>(ch) * taps * cols + t];
                      }
                  }
                }
              });
}

Var avg_pool2x2(const Var& x) {
  require_rank(x, 4, "avg_pool2x2");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "avg_pool2x2: odd spatial size " + shape_str(x.shape()));
  Tensor out({b, c, h / 2, w / 2});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out.at(n, ch, y / 2, xx / 2) += 0.25 * x.value().at(n, ch, y, xx);
  return make(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int n = 0; n < b; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) g->at(n, ch, y, xx) += 0.25 * self.grad.at(n, ch, y / 2, xx / 2);
  });
}

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({b, c, 2 * h, 2 * w});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) out.at(n, ch, y, xx) = x.value().at(n, ch, y / 2, xx / 2);
  return make(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int n = 0; n < b; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx) g->at(n, ch, y / 2, xx / 2) += self.grad.at(n, ch, y, xx);
  });
}

namespace {

struct Tap {
  int lo, hi;
  double w_lo, w_hi;
};

// Output index o maps to source coordinate o/2 - 0.25 (half-pixel centers).
std::vector<Tap> bilinear_taps(int in) {
  std::vector<Tap> taps(2 * in);
  for (int o = 0; o < 2 * in; ++o) {
    const int i = o / 2;
    if (o % 2 == 0)
      taps[o] = {std::max(i - 1, 0), i, 0.25, 0.75};
    else
      taps[o] = {i, std::min(i + 1, in - 1), 0.75, 0.25};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear2x(const Var& x) {
  require_rank(x, 4, "upsample_bilinear2x");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = bilinear_taps(h);
  const auto tx = bilinear_taps(w);
  Tensor out({b, c, 2 * h, 2 * w});
  const Tensor& in = x.value();
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) {
          const Tap& a = ty[y];
          const Tap& e = tx[xx];
          out.at(n, ch, y, xx) = a.w_lo * (e.w_lo * in.at(n, ch, a.lo, e.lo) + e.w_hi * in.at(n, ch, a.lo, e.hi)) +
                                 a.w_hi * (e.w_lo * in.at(n, ch, a.hi, e.lo) + e.w_hi * in.at(n, ch, a.hi, e.hi));
        }
  return make(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int n = 0; n < b; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx) {
            const double d = self.grad.at(n, ch, y, xx);
            const Tap& a = ty[y];
            const Tap& e = tx[xx];
            g->at(n, ch, a.lo, e.lo) += d * a.w_lo * e.w_lo;
            g->at(n, ch, a.lo, e.hi) += d * a.w_lo * e.w_hi;
            g->at(n, ch, a.hi, e.lo) += d * a.w_hi * e.w_lo;
            g->at(n, ch, a.hi, e.hi) += d * a.w_hi * e.w_hi;
          }
  });
}

Var nchw_to_rows(const Var& x) {
  require_rank(x, 4, "nchw_to_rows");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hw = h * w;
  Tensor out({b * hw, c});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p)
        out.at(n * hw + p, ch) = x.value().data[(static_cast<std::size_t>(n) * c + ch) * hw + p];
  return make(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int n = 0; n < b; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p)
          g->data[(static_cast<std::size_t>(n) * c + ch) * hw + p] += self.grad.at(n * hw + p, ch);
  });
}

Var rows_to_nchw(const Var& x, int batch, int height, int width) {
  require_rank(x, 2, "rows_to_nchw");
  const int hw = height * width, c = x.dim(1);
  require(x.dim(0) == batch * hw, "rows_to_nchw: row count " + std::to_string(x.dim(0)) +
                                      " != " + std::to_string(batch * hw));
  Tensor out({batch, c, height, width});
  for (int n = 0; n < batch; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p)
        out.data[(static_cast<std::size_t>(n) * c + ch) * hw + p] = x.value().at(n * hw + p, ch);
  return make(std::move(out), {x}, [=](Node& self) {
    Tensor* g = grad_of(self, 0);
    if (!g) return;
    for (int n = 0; n < batch; ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p)
          g->at(n * hw + p, ch) += self.grad.data[(static_cast<std::size_t>(n) * c + ch) * hw + p];
  });
}

}  // namespace pivl::ag
