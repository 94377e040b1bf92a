#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pivl/autograd.hpp"

namespace pivl::nn {

using ag::Var;
using Rng = std::mt19937_64;

struct NamedParameter {
  std::string name;
  Var* var;
};

// Parameter registry. Modules own their Vars as members and register
// pointers to them, so modules are pinned in memory (non-copyable,
// non-movable); hold them by unique_ptr when ownership must move.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool on);
  void zero_grad();

 protected:
  void register_parameter(std::string name, Var& var);
  void register_module(std::string name, Module& child);

 private:
  void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;

  std::vector<NamedParameter> own_;
  std::vector<std::pair<std::string, Module*>> children_;
};

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

class Linear : public Module {
 public:
  Linear(int in, int out, Rng& rng, bool bias = true, double stddev = -1.0);
  Var forward(const Var& x) const { return ag::linear(x, weight, bias); }
  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  Var weight;
  Var bias;
};

class Conv2d : public Module {
 public:
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng);
  Var forward(const Var& x) const { return ag::conv2d(x, weight, bias, stride_, pad_, mode); }

  Var weight;
  Var bias;
  ag::PadMode mode = ag::PadMode::Zero;

 private:
  int stride_;
  int pad_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(int dim);
  Var forward(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }

  Var gamma;
  Var beta;
};

// FNV-1a over parameter names and raw value bytes, in registration order.
std::uint64_t parameter_digest(const Module& module);
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam(std::vector<Var*> params, Options options);
  Adam(std::vector<Var*> params) : Adam(std::move(params), Options{}) {}

  // Applies one update with the given learning rate, then clears gradients.
  void step(double lr);
  long steps() const { return step_; }

 private:
  std::vector<Var*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  Options opt_;
  long step_ = 0;
};

std::vector<Var*> trainable(const std::vector<NamedParameter>& params);

}  // namespace pivl::nn
