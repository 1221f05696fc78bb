#include <cstdio>
#include <random>

#include "acceptance/criteria.hpp"
#include "cvt/layers.hpp"
#include "cvt/model.hpp"
#include "support/test_util.hpp"

static_assert(sizeof(cvt::Real) == 8);

namespace acceptance {

using namespace cvt;
using cvt_test::check_gradient;
using cvt_test::probe;
using cvt_test::random_tensor;

namespace {

struct Tally {
  double worst = 0;
  std::string worst_name;
  std::size_t checked = 0;
  int groups = 0;

  void add(const std::string& name, const cvt_test::GradCheck& r) {
    checked += r.checked;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_name = name;
    }
  }
  void all(const std::string& name, const std::function<Tensor()>& f, std::initializer_list<Tensor> leaves) {
    ++groups;
    for (const auto& leaf : leaves) add(name, check_gradient(f, leaf));
  }
};

void perturb(ParamList& params, std::mt19937_64& g, double sd) {
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_data()) v += static_cast<Real>(std::normal_distribution<double>(0, sd)(g));
}

}  // namespace

Outcome gradient_correctness() {
  std::mt19937_64 g(70);
  Tally layers;

  auto a = random_tensor({4, 6}, g, true), b = random_tensor({6, 5}, g, true);
  layers.all("matmul", [&] { return probe(matmul(a, b)); }, {a, b});

  auto x = random_tensor({2, 3, 4}, g, true), w = random_tensor({4, 5}, g, true), bias = random_tensor({5}, g, true);
  layers.all("linear", [&] { return probe(linear(x, w, bias)); }, {x, w, bias});

  auto img = random_tensor({1, 2, 6, 6}, g, true);
  auto cw = random_tensor({3, 2, 3, 3}, g, true), cb = random_tensor({3}, g, true);
  layers.all("conv2d", [&] { return probe(conv2d(img, cw, cb, {2, 1, 1})); }, {img, cw, cb});

  auto dw = random_tensor({2, 1, 3, 3}, g, true);
  layers.all("depthwise conv", [&] { return probe(conv2d(img, dw, {}, {2, 1, 2})); }, {img, dw});

  auto rows = random_tensor({3, 7}, g, true), lg = random_tensor({7}, g, true), lb = random_tensor({7}, g, true);
  layers.all("layernorm", [&] { return probe(layernorm(rows, lg, lb)); }, {rows, lg, lb});
  layers.all("softmax", [&] { return probe(softmax(rows, 1)); }, {rows});
  layers.all("gelu", [&] { return probe(gelu(rows)); }, {rows});
  std::vector<int> labels{6, 0, 3};
  layers.all("cross entropy", [&] { return cross_entropy(rows, labels); }, {rows});

  auto maps = random_tensor({2, 3, 3, 4}, g, true), bg = random_tensor({3}, g, true), bb = random_tensor({3}, g, true);
  BatchNormBuffers buf{Tensor::zeros({3}), Tensor::full({3}, 1)};
  layers.all("batchnorm", [&] { return probe(batchnorm2d(maps, bg, bb, buf, Mode::train)); }, {maps, bg, bb});

  Rng init(71);
  ConvTokenEmbedding embed({3, 2, 1, 4}, 2, init);
  ParamList ep;
  embed.collect("", ep);
  perturb(ep, g, 0.3);
  layers.all("token embedding", [&] { return probe(embed.forward(img).tokens); },
             {img, embed.conv_weight, embed.conv_bias, embed.norm.weight});

  ConvProjection proj(4, 3, 2, 1, false, init);
  ParamList pp, pbuf;
  proj.collect("", pp, pbuf);
  perturb(pp, g, 0.3);
  auto seq = random_tensor({2, 16, 4}, g, true), cls = random_tensor({2, 1, 4}, g, true);
  layers.all("conv projection", [&] { return probe(proj.forward(seq, 4, 4, cls, Mode::train)); },
             {seq, cls, proj.dw_weight, proj.bn.weight, proj.pointwise.weight});

  ConvAttention attn({8, 2, true}, {3, 1, 2, 1}, false, init);
  ParamList ap, abuf;
  attn.collect("", ap, abuf);
  perturb(ap, g, 0.3);
  auto tokens = random_tensor({2, 17, 8}, g, true);
  layers.all("conv attention", [&] { return probe(attn.forward(tokens, 4, 4, Mode::train)); },
             {tokens, attn.q.dw_weight, attn.k.pointwise.weight, attn.v.bn.bias, attn.proj.weight});

  ConvTransformerBlock block({8, 2, true}, {3, 1, 2, 1}, 2, false, init);
  ParamList bp, bbuf;
  block.collect("", bp, bbuf);
  perturb(bp, g, 0.3);
  auto f = [&] { return probe(block.forward(tokens, 4, 4, Mode::train)); };
  ++layers.groups;
  layers.add("block", check_gradient(f, tokens));
  for (auto& p : bp)
    layers.add("block " + p.name,
               check_gradient(f, p.tensor, cvt_test::sample_coords(std::size_t(p.tensor.numel()), 6, g)));

  // Whole tiny model; weights are widened so no branch sits at the 0.02 init scale.
  CvtModel model(presets::tiny(), 72);
  auto params = model.parameters();
  perturb(params, g, 0.2);
  auto images = random_tensor({2, 3, 32, 32}, g);
  std::vector<int> targets{1, 3};
  auto loss = [&] { return cross_entropy(model.forward(images), targets); };
  // Key biases before the final stage have an exactly zero gradient; the 1e-5
  // floor keeps difference round-off (~1e-9) from reading as relative error.
  Tally e2e;
  for (auto& p : params)
    e2e.add(p.name, check_gradient(loss, p.tensor, cvt_test::sample_coords(std::size_t(p.tensor.numel()), 20, g),
                                   1e-5, 1e-5));

  const bool ok = layers.worst < 1e-3 && e2e.worst < 1e-3;
  char buf2[400];
  std::snprintf(buf2, sizeof buf2,
                "%d layer groups, %zu coords, worst %.2e (%s)  tiny model %zu tensors, %zu coords, worst %.2e (%s)  "
                "tol 1e-3",
                layers.groups, layers.checked, layers.worst, layers.worst_name.c_str(), params.size(), e2e.checked,
                e2e.worst, e2e.worst_name.c_str());
  return {ok, buf2};
}

}  // namespace acceptance
