#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pivl/encoders.hpp"
#include "pivl/fusion.hpp"

using namespace pivl;
using ag::Var;

namespace {

using Mat = Eigen::MatrixXd;

Mat to_eigen(const Tensor& t) {
  Mat m(t.dim(0), t.numel() / t.dim(0));
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) m(r, c) = t.data[static_cast<std::size_t>(r) * m.cols() + c];
  return m;
}

Mat affine(const Mat& x, const nn::Linear& l) {
  Mat y = x * to_eigen(l.weight.value()).transpose();
  if (l.bias.defined())
    for (int r = 0; r < y.rows(); ++r)
      for (int c = 0; c < y.cols(); ++c) y(r, c) += l.bias.value().data[c];
  return y;
}

Mat layer_norm(const Mat& x, const nn::LayerNorm& ln) {
  Mat y(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    for (int c = 0; c < x.cols(); ++c)
      y(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * ln.gamma.value().data[c] + ln.beta.value().data[c];
  }
  return y;
}

// Independent forward pass of the text tower.
Mat text_oracle(const encoders::TextEncoder& t, const Mat& tokens) {
  const int len = static_cast<int>(tokens.rows());
  const Mat h0 = tokens + to_eigen(t.pos.value()).topRows(len);
  const Mat a = layer_norm(h0, *t.ln_attn);
  const Mat q = affine(a, *t.q), k = affine(a, *t.k), v = affine(a, *t.v);
  Mat s = q * k.transpose() / std::sqrt(static_cast<double>(q.cols()));
  for (int r = 0; r < len; ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
  const Mat h1 = h0 + affine(s * v, *t.o);
  const Mat pooled = layer_norm(h1.colwise().mean(), *t.ln_out);
  return affine(affine(pooled, *t.fc1).cwiseMax(0.0), *t.fc2);
}

Tensor from_eigen(const Mat& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
  return t;
}

}  // namespace

TEST_CASE("conv encoder stride arithmetic and sanity") {
  encoders::EncoderConfig cfg;
  auto enc = encoders::make_image_encoder(cfg, 1);
  const auto p = enc->forward(Var(Tensor({2, 3, 64, 32})));
  CHECK(p.c2.shape() == Shape{2, 32, 16, 8});
  CHECK(p.c3.shape() == Shape{2, 48, 8, 4});
  CHECK(p.c4.shape() == Shape{2, 64, 4, 2});
  CHECK(p.global.shape() == Shape{2, 64});
  CHECK(p.global.value().all_finite());
  CHECK(p.c2.value().all_finite());

  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({1, 3, 64, 32}, rng);
  CHECK(enc->forward(Var(x)).global.value().data == enc->forward(Var(x)).global.value().data);
  CHECK_THROWS_AS(enc->forward(Var(Tensor({1, 3, 32, 32}))), std::invalid_argument);

  cfg.image_height = 128;
  cfg.image_width = 64;
  auto big = encoders::make_image_encoder(cfg, 1);
  CHECK(big->forward(Var(Tensor({1, 3, 128, 64}))).c4.shape() == Shape{1, 64, 8, 4});
}

TEST_CASE("vit encoder produces the stride-8 token grid") {
  encoders::EncoderConfig cfg;
  cfg.variant = encoders::Variant::Vit;
  auto enc = encoders::make_image_encoder(cfg, 2);
  const auto p = enc->forward(Var(Tensor({2, 3, 64, 32})));
  CHECK(p.c3.shape() == Shape{2, cfg.vit_dim, 8, 4});
  CHECK_FALSE(p.c2.defined());
  CHECK(p.global.shape() == Shape{2, 64});
  CHECK(p.global.value().all_finite());
}

TEST_CASE("text encoder matches an independent forward pass") {
  encoders::TextEncoder text(8, 6, 16, 4);
  std::mt19937_64 rng(5);
  const Tensor u = oracle::random_tensor({1, 8}, rng);
  Tensor uu({2, 8});
  for (int c = 0; c < 8; ++c) uu.at(0, c) = uu.at(1, c) = u.at(0, c);
  for (const Tensor* tok : {&u, static_cast<const Tensor*>(&uu)}) {
    const Tensor got = text.forward(Var(*tok)).value();
    const Tensor want = from_eigen(text_oracle(text, to_eigen(*tok)));
    CHECK(got.shape == Shape{1, 6});
    for (std::size_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got.data[i] - want.data[i]) < 1e-6);
  }
  const Tensor seq = oracle::random_tensor({5, 8}, rng);
  const Tensor got = text.forward(Var(seq)).value();
  const Tensor want = from_eigen(text_oracle(text, to_eigen(seq)));
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(std::abs(got.data[i] - want.data[i]) < 1e-6);
}

TEST_CASE("text encoder: symmetric under swapping identical tokens, rejects bad lengths") {
  encoders::TextEncoder text(8, 6, 4, 6);
  std::mt19937_64 rng(7);
  Tensor seq = oracle::random_tensor({3, 8}, rng);
  for (int c = 0; c < 8; ++c) seq.at(2, c) = seq.at(0, c);
  Tensor swapped = seq;
  for (int c = 0; c < 8; ++c) std::swap(swapped.at(0, c), swapped.at(2, c));
  CHECK(text.forward(Var(seq)).value().data == text.forward(Var(swapped)).value().data);
  CHECK_THROWS_AS(text.forward(Var(Tensor({0, 8}))), std::invalid_argument);
  CHECK_THROWS_AS(text.forward(Var(Tensor({5, 8}))), std::invalid_argument);
  CHECK_THROWS_AS(text.forward(Var(Tensor({2, 7}))), std::invalid_argument);
}

TEST_CASE("inference parameter counting") {
  encoders::EncoderConfig cfg;
  auto a = encoders::make_image_encoder(cfg, 1);
  auto b = encoders::make_image_encoder(cfg, 99);
  fusion::FusionHead head(cfg.variant, a->tap_channels(), {}, 3);
  encoders::TextEncoder text(cfg.text_dim, cfg.embed_dim, cfg.max_tokens, 4);
  const encoders::ModelComponents with_head{a.get(), {&head, &text}};
  const encoders::ModelComponents plain{b.get(), {}};
  CHECK(encoders::count_inference_params(with_head, true) == encoders::count_inference_params(plain, true));
  CHECK(encoders::count_inference_params(with_head, false) > encoders::count_inference_params(with_head, true));
  CHECK(encoders::count_inference_params(plain, true) == encoders::count_inference_params(plain, true));
}
