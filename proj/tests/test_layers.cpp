#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "cvt/layers.hpp"
#include "support/test_util.hpp"

using namespace cvt;
using cvt_test::random_tensor;

namespace {

std::int64_t count(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

// Identity normalization for eval mode: (x - 0) / sqrt((1 - eps) + eps) = x.
void make_identity_bn(BatchNorm2d& bn) {
  for (auto& v : bn.buffers.running_var.mutable_data()) v = Real(1) - bn.eps;
}

// Reorders the spatial tokens of [B x (cls + T) x C] by `perm` (cls stays first).
Tensor permute_tokens(const Tensor& x, const std::vector<std::int64_t>& perm, std::int64_t n_cls) {
  const std::int64_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
  std::vector<Real> out(x.data().begin(), x.data().end());
  auto in = x.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T - n_cls; ++t)
      for (std::int64_t c = 0; c < C; ++c)
        out[(b * T + n_cls + t) * C + c] = in[(b * T + n_cls + perm[t]) * C + c];
  return Tensor::from_data(x.shape(), std::move(out));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(double(a.data()[i]) - b.data()[i]));
  return d;
}

}  // namespace

TEST_CASE("conv token embedding geometry") {
  Rng rng(1);
  ConvTokenEmbedding e1({7, 4, 3, 64}, 3, rng);
  std::mt19937_64 g(2);
  auto out = e1.forward(random_tensor({1, 3, 224, 224}, g));
  CHECK(out.tokens.shape() == Shape{1, 3136, 64});
  CHECK(out.height == 56);
  CHECK(out.width == 56);

  ConvTokenEmbedding e2({3, 2, 1, 192}, 64, rng);
  auto x2 = random_tensor({1, 64, 56, 56}, g);
  auto out2 = e2.forward(x2);
  CHECK(out2.tokens.shape() == Shape{1, 784, 192});
  CHECK(out2.height == 28);

  // Padding 3 keeps any input >= 1 valid; without padding a 3x3 image is too small.
  ConvTokenEmbedding e3({7, 4, 0, 64}, 3, rng);
  CHECK_THROWS_AS(e3.forward(random_tensor({1, 3, 3, 3}, g)), GeometryError);
  CHECK(e1.forward(random_tensor({1, 3, 3, 3}, g)).height == 1);
}

TEST_CASE("1x1 identity embedding is layernorm of the unchanged map") {
  Rng rng(3);
  ConvTokenEmbedding e({1, 1, 0, 5}, 5, rng);
  auto w = e.conv_weight.mutable_data();
  std::fill(w.begin(), w.end(), Real(0));
  for (int c = 0; c < 5; ++c) w[c * 5 + c] = 1;
  std::mt19937_64 g(4);
  auto x = random_tensor({2, 5, 3, 4}, g);
  auto got = e.forward(x).tokens;
  auto expect = e.norm.forward(map_to_tokens(x));
  CHECK(got.shape() == Shape{2, 12, 5});
  CHECK(max_abs_diff(got, expect) == 0.0);
}

TEST_CASE("conv projection token counts") {
  Rng rng(5);
  std::mt19937_64 g(6);
  auto x = random_tensor({1, 3136, 8}, g);
  ConvProjection q(8, 3, 1, 1, false, rng);
  ConvProjection kv(8, 3, 2, 1, false, rng);
  CHECK(q.forward(x, 56, 56, {}, Mode::train).dim(1) == 3136);
  CHECK(kv.forward(x, 56, 56, {}, Mode::train).dim(1) == 784);
  auto cls = random_tensor({1, 1, 8}, g);
  CHECK(kv.forward(x, 56, 56, cls, Mode::train).dim(1) == 785);
  CHECK_THROWS_AS(q.forward(x, 56, 55, {}, Mode::train), ContractError);
}

TEST_CASE("KV token count is T/4 for even grids") {
  Rng rng(7);
  ConvProjection kv(4, 3, 2, 1, false, rng);
  for (std::int64_t h = 2; h <= 20; h += 2)
    for (std::int64_t w = 2; w <= 20; w += 6) CHECK(kv.output_extent(h) * kv.output_extent(w) == h * w / 4);
}

TEST_CASE("degeneracy: 1x1 projection with identity norm is a position-wise linear map") {
  std::mt19937_64 g(8);
  std::uniform_int_distribution<int> dim(1, 12), side(1, 6), batch(1, 3);
  double worst = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::int64_t C = dim(g), H = side(g), W = side(g), B = batch(g);
    const bool with_cls = inst % 2 == 1;
    Rng rng(100 + inst);
    ConvProjection p(C, 1, 1, 0, false, rng);
    auto dw = p.dw_weight.mutable_data();
    std::fill(dw.begin(), dw.end(), Real(1));
    make_identity_bn(p.bn);
    auto pw = p.pointwise.weight.mutable_data();
    for (auto& v : pw) v = static_cast<Real>(std::normal_distribution<double>(0, 1)(g));

    auto x = random_tensor({B, H * W, C}, g);
    Tensor cls = with_cls ? random_tensor({B, 1, C}, g) : Tensor();
    auto y = p.forward(x, H, W, cls, Mode::eval);

    const std::int64_t T = H * W + (with_cls ? 1 : 0);
    REQUIRE(y.shape() == Shape{B, T, C});
    std::vector<double> expect(static_cast<std::size_t>(B * T * C), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t t = 0; t < T; ++t) {
        const Real* row = with_cls ? (t == 0 ? &cls.data()[b * C] : &x.data()[(b * H * W + t - 1) * C])
                                   : &x.data()[(b * H * W + t) * C];
        for (std::int64_t o = 0; o < C; ++o) {
          double acc = 0;
          for (std::int64_t i = 0; i < C; ++i) acc += double(row[i]) * pw[i * C + o];
          expect[(b * T + t) * C + o] = acc;
        }
      }
    worst = std::max(worst, cvt_test::max_rel_diff(y.data(), expect));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("attention over a single token") {
  Rng rng(9);
  ConvAttention a({6, 2, false}, {3, 1, 1, 1}, false, rng);
  std::mt19937_64 g(10);
  auto x = random_tensor({2, 1, 6}, g);
  Tensor w;
  auto y = a.forward(x, 1, 1, Mode::eval, &w);
  CHECK(w.shape() == Shape{4, 1, 1});
  for (Real v : w.data()) CHECK(v == 1.0f);
  auto v = a.v.forward(x, 1, 1, {}, Mode::eval);
  CHECK(max_abs_diff(y, a.proj.forward(v)) <= 1e-7);
}

TEST_CASE("squeezed attention matrix is rectangular") {
  Rng rng(11);
  ConvAttention a({4, 1, false}, {3, 1, 2, 1}, false, rng);
  std::mt19937_64 g(12);
  Tensor w;
  NoGradGuard ng;
  auto y = a.forward(random_tensor({1, 3136, 4}, g), 56, 56, Mode::train, &w);
  CHECK(w.shape() == Shape{1, 3136, 784});
  CHECK(y.shape() == Shape{1, 3136, 4});

  ConvAttention c({8, 2, true}, {3, 1, 2, 1}, false, rng);
  c.forward(random_tensor({2, 1 + 14 * 14, 8}, g), 14, 14, Mode::train, &w);
  CHECK(w.shape() == Shape{4, 197, 50});
}

TEST_CASE("attention rows sum to one") {
  Rng rng(13);
  ConvAttention a({12, 3, true}, {3, 1, 2, 1}, false, rng);
  std::mt19937_64 g(14);
  Tensor w;
  a.forward(random_tensor({2, 1 + 6 * 5, 12}, g, false, 3.0), 6, 5, Mode::train, &w);
  const std::int64_t rows = w.dim(0) * w.dim(1), n = w.dim(2);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      const Real v = w.data()[r * n + j];
      CHECK(v > 0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("block is the identity when its residual branches end in zeros") {
  Rng rng(15);
  ConvTransformerBlock b({8, 2, true}, {3, 1, 2, 1}, 4, false, rng);
  for (auto* t : {&b.attn.proj.weight, &b.attn.proj.bias, &b.mlp.fc2.weight, &b.mlp.fc2.bias}) {
    auto d = t->mutable_data();
    std::fill(d.begin(), d.end(), Real(0));
  }
  std::mt19937_64 g(16);
  auto x = random_tensor({2, 1 + 4 * 3, 8}, g);
  auto y = b.forward(x, 4, 3, Mode::train);
  CHECK(y.shape() == x.shape());
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("block output shape equals input shape") {
  std::mt19937_64 g(17);
  for (auto [h, w, d, heads, cls] : std::vector<std::tuple<int, int, int, int, bool>>{
           {1, 1, 4, 1, false}, {3, 5, 6, 3, true}, {7, 2, 8, 2, false}, {8, 8, 16, 4, true}}) {
    Rng rng(18);
    ConvTransformerBlock b({d, heads, cls}, {3, 1, 2, 1}, 2, false, rng);
    auto x = random_tensor({2, h * w + (cls ? 1 : 0), d}, g);
    CHECK(b.forward(x, h, w, Mode::train).shape() == x.shape());
  }
}

TEST_CASE("permutation sensitivity of the convolutional projection") {
  std::mt19937_64 g(19);
  const std::int64_t H = 6, W = 6, C = 64;
  std::vector<std::int64_t> perm(H * W);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), g);
  for (bool cls : {false, true}) {
    const std::int64_t n_cls = cls ? 1 : 0;
    auto x = random_tensor({2, n_cls + H * W, C}, g);
    auto xp = permute_tokens(x, perm, n_cls);

    Rng r3(20);
    ConvAttention local({C, 2, cls}, {3, 1, 1, 1}, false, r3);
    auto d3 = max_abs_diff(local.forward(xp, H, W, Mode::train),
                           permute_tokens(local.forward(x, H, W, Mode::train), perm, n_cls));
    CHECK(d3 > 1e-3);

    Rng r1(20);
    ConvAttention pointwise({C, 2, cls}, {1, 1, 1, 0}, false, r1);
    auto d1 = max_abs_diff(pointwise.forward(xp, H, W, Mode::train),
                           permute_tokens(pointwise.forward(x, H, W, Mode::train), perm, n_cls));
    CHECK(d1 <= 1e-6);
  }
}

TEST_CASE("conv projection costs s^2 C + 2C parameters more than a linear map") {
  for (auto [C, s] : std::vector<std::pair<int, int>>{{64, 3}, {192, 3}, {384, 5}, {8, 1}}) {
    Rng rng(21);
    ConvProjection p(C, s, 1, s / 2, false, rng);
    Linear lin(C, C, false, rng);
    ParamList pp, pb, lp;
    p.collect("", pp, pb);
    lin.collect("", lp);
    CHECK(count(pp) - count(lp) == std::int64_t(s) * s * C + 2 * C);
    CHECK(count(pb) == 2 * C);  // running stats are not learnable
  }
}

TEST_CASE("embedding and projection settings are validated") {
  CHECK_THROWS_AS(validate(AttnSpec{10, 3, false}), ConfigError);
  CHECK_THROWS_AS(validate(ConvProjSpec{2, 1, 2, 1}), ConfigError);
  CHECK_THROWS_AS(validate(ConvProjSpec{3, 2, 2, 1}), ConfigError);
  CHECK_THROWS_AS(validate(ConvProjSpec{3, 1, 3, 1}), ConfigError);
  CHECK_THROWS_AS(validate(ConvEmbedSpec{3, 4, 1, 8}), ConfigError);
  CHECK_NOTHROW(validate(ConvEmbedSpec{7, 4, 3, 64}));
}

TEST_CASE("initialization statistics") {
  Rng rng(22);
  Linear lin(256, 256, true, rng);
  double mean = 0, sq = 0, mx = 0;
  auto w = lin.weight.data();
  for (Real v : w) {
    mean += v;
    sq += double(v) * v;
    mx = std::max(mx, std::abs(double(v)));
  }
  mean /= double(w.size());
  const double sd = std::sqrt(sq / double(w.size()) - mean * mean);
  CHECK(std::abs(mean) < 1e-3);
  // Truncation at two std shrinks the std by a factor of about 0.88.
  CHECK(sd == doctest::Approx(0.02 * 0.8796).epsilon(0.03));
  CHECK(mx <= 0.04 + 1e-7);
  for (Real b : lin.bias.data()) CHECK(b == 0);
}
