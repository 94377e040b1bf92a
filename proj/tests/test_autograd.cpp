#include <doctest.h>

#include <random>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "pivl/autograd.hpp"

using namespace pivl;
using ag::Var;

namespace {

std::mt19937_64 rng(2024);

Var rnd(Shape s, double scale = 1.0) { return Var(oracle::random_tensor(std::move(s), rng, scale)); }

// Contracts an arbitrary output with fixed random weights to get a scalar.
Var contract(const Var& y) {
  std::mt19937_64 local(y.numel());
  return ag::weighted_sum(y, oracle::random_tensor(y.shape(), local));
}

void check_unary(const char* name, Shape shape, const std::function<Var(const Var&)>& f) {
  CAPTURE(name);
  std::vector<Var> in = {rnd(std::move(shape))};
  CHECK(gradcheck::max_relative_error(in, [&] { return contract(f(in[0])); }) < 1e-4);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
  check_unary("scale", {3, 4}, [](const Var& x) { return ag::scale(x, -1.7); });
  check_unary("add_scalar", {3, 4}, [](const Var& x) { return ag::square(ag::add_scalar(x, 0.3)); });
  check_unary("relu", {3, 4}, [](const Var& x) { return ag::relu(x); });
  check_unary("gelu", {3, 4}, [](const Var& x) { return ag::gelu(x); });
  check_unary("square", {3, 4}, [](const Var& x) { return ag::square(x); });
  check_unary("sum", {3, 4}, [](const Var& x) { return ag::sum(ag::square(x)); });
  check_unary("mean", {3, 4}, [](const Var& x) { return ag::mean(ag::square(x)); });
  check_unary("reshape", {3, 4}, [](const Var& x) { return ag::square(ag::reshape(x, {2, 6})); });

  std::vector<Var> two = {rnd({3, 4}), rnd({3, 4})};
  CHECK(gradcheck::max_relative_error(two, [&] { return contract(ag::mul(ag::add(two[0], two[1]), ag::sub(two[0], two[1]))); }) < 1e-4);
  std::vector<Var> tiled = {rnd({6, 4}), rnd({4})};
  CHECK(gradcheck::max_relative_error(tiled, [&] { return contract(ag::square(ag::add_tiled(tiled[0], tiled[1]))); }) < 1e-4);
  std::vector<Var> many = {rnd({2, 3}), rnd({2, 3}), rnd({2, 3})};
  CHECK(gradcheck::max_relative_error(many, [&] {
          std::vector<Var> sq = {ag::square(many[0]), many[1], ag::mul(many[1], many[2])};
          return contract(ag::add_n(sq));
        }) < 1e-4);
}

TEST_CASE("matrix gradients") {
  std::vector<Var> mm = {rnd({3, 4}), rnd({4, 5})};
  CHECK(gradcheck::max_relative_error(mm, [&] { return contract(ag::matmul(mm[0], mm[1])); }) < 1e-4);
  std::vector<Var> nt = {rnd({3, 4}), rnd({5, 4})};
  CHECK(gradcheck::max_relative_error(nt, [&] { return contract(ag::matmul_nt(nt[0], nt[1])); }) < 1e-4);
  std::vector<Var> lin = {rnd({3, 4}), rnd({2, 4}), rnd({2})};
  CHECK(gradcheck::max_relative_error(lin, [&] { return contract(ag::linear(lin[0], lin[1], lin[2])); }) < 1e-4);

  check_unary("softmax", {3, 5}, [](const Var& x) { return ag::softmax_rows(x); });
  check_unary("log_softmax", {3, 5}, [](const Var& x) { return ag::log_softmax_rows(x); });
  check_unary("l2_normalize", {3, 5}, [](const Var& x) { return ag::l2_normalize_rows(x); });
  std::vector<Var> ln = {rnd({4, 6}), rnd({6}), rnd({6})};
  CHECK(gradcheck::max_relative_error(ln, [&] { return contract(ag::layer_norm_rows(ln[0], ln[1], ln[2])); }) < 1e-4);

  const std::vector<int> rows = {2, 0, 2, 1};
  check_unary("index_rows", {3, 4}, [&](const Var& x) { return ag::square(ag::index_rows(x, rows)); });
  check_unary("slice_rows", {5, 2}, [](const Var& x) { return ag::square(ag::slice_rows(x, 1, 4)); });
  check_unary("segment_mean", {6, 2}, [](const Var& x) { return ag::square(ag::segment_mean_rows(x, 3)); });
  const std::vector<int> a = {0, 1, 3}, b = {2, 3, 0};
  check_unary("row_distances", {4, 3}, [&](const Var& x) { return ag::row_distances(x, a, b); });
  const std::vector<std::size_t> flat = {0, 5, 5, 11};
  check_unary("gather", {3, 4}, [&](const Var& x) { return ag::square(ag::gather(x, flat)); });

  std::vector<Var> cat = {rnd({2, 3}), rnd({1, 3})};
  CHECK(gradcheck::max_relative_error(cat, [&] { return contract(ag::square(ag::concat_rows(cat))); }) < 1e-4);

  Tensor pos({3, 4}), neg({3, 4});
  pos.at(0, 1) = pos.at(0, 2) = pos.at(2, 3) = 1;
  neg.at(0, 0) = neg.at(0, 3) = neg.at(2, 0) = neg.at(2, 1) = neg.at(1, 1) = 1;
  check_unary("infonce", {3, 4}, [&](const Var& x) { return ag::infonce_pairs(x, pos, neg); });
}

TEST_CASE("image op gradients") {
  for (auto mode : {ag::PadMode::Zero, ag::PadMode::Replicate}) {
    std::vector<Var> conv = {rnd({2, 2, 5, 4}), rnd({3, 2, 3, 3}), rnd({3})};
    for (int stride : {1, 2})
      CHECK(gradcheck::max_relative_error(conv, [&] { return contract(ag::conv2d(conv[0], conv[1], conv[2], stride, 1, mode)); }) <
            1e-4);
  }
  check_unary("avg_pool", {2, 2, 4, 6}, [](const Var& x) { return ag::avg_pool2x2(x); });
  check_unary("nearest", {1, 2, 3, 2}, [](const Var& x) { return ag::upsample_nearest2x(x); });
  check_unary("bilinear", {1, 2, 3, 2}, [](const Var& x) { return ag::upsample_bilinear2x(x); });
  check_unary("nchw_rows", {2, 3, 2, 2}, [](const Var& x) { return ag::square(ag::nchw_to_rows(x)); });
  check_unary("rows_nchw", {8, 3}, [](const Var& x) { return ag::square(ag::rows_to_nchw(x, 2, 2, 2)); });
}

TEST_CASE("forward values of resampling ops") {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor pooled = ag::avg_pool2x2(Var(x)).value();
  CHECK(pooled.data == std::vector<double>{2.5});
  const Tensor near = ag::upsample_nearest2x(Var(x)).value();
  CHECK(near.at(0, 0, 1, 1) == 1.0);
  CHECK(near.at(0, 0, 3, 2) == 4.0);
  // Half-pixel bilinear with edge clamping: output row 0 samples input y=-0.25 -> clamps to row 0.
  const Tensor up = ag::upsample_bilinear2x(Var(x)).value();
  CHECK(up.at(0, 0, 0, 0) == doctest::Approx(1.0));
  CHECK(up.at(0, 0, 0, 1) == doctest::Approx(1.25));
  CHECK(up.at(0, 0, 1, 1) == doctest::Approx(0.75 * 1.25 + 0.25 * 3.25));
  const Tensor rows = ag::nchw_to_rows(Var(Tensor({1, 2, 1, 2}, {1, 2, 3, 4}))).value();
  CHECK(rows.data == std::vector<double>{1, 3, 2, 4});
}

TEST_CASE("no-grad guard and frozen leaves") {
  Var w(Tensor({2, 2}, 1.0), true);
  {
    ag::NoGradGuard guard;
    CHECK_FALSE(ag::grad_enabled());
    const Var y = ag::sum(ag::square(w));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::grad_enabled());
  Var frozen(Tensor({2, 2}, 2.0), false);
  ag::backward(ag::sum(ag::mul(w, frozen)));
  CHECK(w.grad().data == std::vector<double>(4, 2.0));
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("gradients accumulate across backward calls") {
  Var w(Tensor({3}, {1, 2, 3}), true);
  ag::backward(ag::sum(w));
  ag::backward(ag::sum(ag::scale(w, 2.0)));
  CHECK(w.grad().data == std::vector<double>{3, 3, 3});
  w.zero_grad();
  CHECK(w.grad().data == std::vector<double>{0, 0, 0});
}
