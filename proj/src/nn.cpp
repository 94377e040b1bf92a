#include "pivl/nn.hpp"

#include <cmath>
#include <cstdio>

namespace pivl::nn {

void Module::register_parameter(std::string name, Var& var) { own_.push_back({std::move(name), &var}); }

void Module::register_module(std::string name, Module& child) { children_.emplace_back(std::move(name), &child); }

void Module::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
  for (const auto& p : own_) out.push_back({prefix + p.name, p.var});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

std::vector<NamedParameter> Module::parameters() const {
  std::vector<NamedParameter> out;
  collect("", out);
  return out;
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.var->numel();
  return n;
}

void Module::set_trainable(bool on) {
  for (auto& p : parameters()) p.var->set_requires_grad(on);
}

void Module::zero_grad() {
  for (auto& p : parameters()) p.var->zero_grad();
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
  return t;
}

Linear::Linear(int in, int out, Rng& rng, bool with_bias, double stddev) {
  if (stddev < 0.0) stddev = 1.0 / std::sqrt(static_cast<double>(in));
  weight = Var(normal_tensor({out, in}, stddev, rng), true);
  register_parameter("weight", weight);
  if (with_bias) {
    bias = Var(Tensor({out}, 0.0), true);
    register_parameter("bias", bias);
  }
}

Conv2d::Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng) : stride_(stride), pad_(pad) {
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in) * kernel * kernel));
  weight = Var(normal_tensor({out, in, kernel, kernel}, stddev, rng), true);
  bias = Var(Tensor({out}, 0.0), true);
  register_parameter("weight", weight);
  register_parameter("bias", bias);
}

LayerNorm::LayerNorm(int dim) : gamma(Tensor({dim}, 1.0), true), beta(Tensor({dim}, 0.0), true) {
  register_parameter("gamma", gamma);
  register_parameter("beta", beta);
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t parameter_digest(const Module& module) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : module.parameters()) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    const auto& d = p.var->value().data;
    h = fnv1a(d.data(), d.size() * sizeof(double), h);
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Adam::Adam(std::vector<Var*> params, Options options) : params_(std::move(params)), opt_(options) {
  for (Var* p : params_) {
    m_.emplace_back(p->shape(), 0.0);
    v_.emplace_back(p->shape(), 0.0);
  }
}

void Adam::step(double lr) {
  ++step_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var& p = *params_[k];
    if (!p.has_grad()) continue;
    Tensor& value = p.mutable_value();
    Tensor& g = p.grad();
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const double gi = g[i] + opt_.weight_decay * value[i];
      m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * gi;
      v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * gi * gi;
      value[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + opt_.eps);
    }
    p.zero_grad();
  }
}

std::vector<Var*> trainable(const std::vector<NamedParameter>& params) {
  std::vector<Var*> out;
  for (const auto& p : params)
    if (p.var->requires_grad()) out.push_back(p.var);
  return out;
}

}  // namespace pivl::nn
