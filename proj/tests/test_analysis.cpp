#include <doctest.h>

#include <map>
#include <random>
#include <sstream>

#include "cvt/analysis.hpp"
#include "cvt/model.hpp"

using namespace cvt;

namespace {

const LayerRecord& find(const CostReport& r, const std::string& path) {
  for (const auto& rec : r.records)
    if (rec.path == path) return rec;
  FAIL("missing record " << path);
  throw 0;
}

bool within(double value, double target, double rel) { return std::abs(value - target) <= rel * target; }

ModelConfig all_stride(ModelConfig c, int stride) {
  for (auto& s : c.stages) s.proj.stride_kv = stride;
  return c;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("parameter totals match the published table") {
  const double c13 = count_params(presets::cvt13()).total_params;
  const double c21 = count_params(presets::cvt21()).total_params;
  const double w24 = count_params(presets::cvtw24()).total_params;
  MESSAGE("cvt13 " << c13 << "  cvt21 " << c21 << "  cvtw24 " << w24);
  CHECK(within(c13, 19.98e6, 0.01));
  CHECK(within(c21, 31.54e6, 0.01));
  CHECK(within(w24, 276.7e6, 0.01));
  CHECK(human_params(static_cast<std::int64_t>(c13)) == "19.98M");
}

TEST_CASE("FLOP totals match the published table") {
  const double c13 = count_flops(presets::cvt13(), 224, 224).total_flops;
  const double c21 = count_flops(presets::cvt21(), 224, 224).total_flops;
  const double w24 = count_flops(presets::cvtw24(), 224, 224).total_flops;
  MESSAGE("cvt13 " << c13 << "  cvt21 " << c21 << "  cvtw24 " << w24);
  CHECK(within(c13, 4.53e9, 0.05));
  CHECK(within(c21, 7.13e9, 0.05));
  CHECK(within(w24, 60.86e9, 0.05));
}

TEST_CASE("stride ablation and high resolution") {
  const double base = count_flops(presets::cvt13(), 224, 224).total_flops;
  const double s1 = count_flops(all_stride(presets::cvt13(), 1), 224, 224).total_flops;
  CHECK(within(s1, 6.55e9, 0.05));
  CHECK(s1 / base >= 1.40);
  CHECK(s1 / base <= 1.50);
  const double hi = count_flops(presets::cvt13(), 384, 384).total_flops;
  CHECK(within(hi, 16.3e9, 0.05));
}

TEST_CASE("depthwise projection cost is s^2 C T") {
  auto r = count_flops(presets::cvt13(), 224, 224);
  CHECK(find(r, "stage1.block0.attn.q.dw").flops == 9 * 64 * 3136);
  CHECK(find(r, "stage1.block0.attn.q.dw").flops == 1806336);
  CHECK(find(r, "stage1.block0.attn.k.dw").flops == 9 * 64 * 784);
  CHECK(find(r, "stage1.block0.attn.q.dw").params == 9 * 64);
}

TEST_CASE("totals equal the sum of records") {
  for (const auto& name : presets::names()) {
    auto r = count_flops(presets::by_name(name), 224, 224);
    std::int64_t p = 0, f = 0;
    for (const auto& rec : r.records) {
      p += rec.params;
      f += rec.flops;
    }
    CHECK(p == r.total_params);
    CHECK(f == r.total_flops);
    CHECK(r.total_params == count_params(presets::by_name(name)).total_params);
  }
}

TEST_CASE("params do not depend on input size, flops grow with area") {
  auto cfg = presets::cvt13();
  std::int64_t last = 0;
  for (int s : {1, 16, 32, 64, 100, 224, 300, 384}) {
    auto r = count_flops(cfg, s, s);
    CHECK(r.total_params == count_params(cfg).total_params);
    CHECK(r.total_flops >= last);
    last = r.total_flops;
  }
  CHECK(count_flops(cfg, 224, 300).total_flops >= count_flops(cfg, 224, 224).total_flops);
}

TEST_CASE("scaling laws from 224 to 448") {
  auto cfg = presets::cvt13();
  auto a = count_flops(cfg, 224, 224), b = count_flops(cfg, 448, 448);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& ra = a.records[i];
    const auto& rb = b.records[i];
    REQUIRE(ra.path == rb.path);
    // The cls row and the head do not scale with area.
    const bool no_cls = ra.path.starts_with("stage1.") || ra.path.starts_with("stage2.");
    if (ra.kind == "conv" || ra.kind == "dwconv") CHECK(rb.flops == 4 * ra.flops);
    if (no_cls && ra.kind == "linear") CHECK(rb.flops == 4 * ra.flops);
    if (no_cls && ra.kind == "attention") CHECK(rb.flops == 16 * ra.flops);
  }
  CHECK(b.total_flops > 4 * a.total_flops);
}

TEST_CASE("stage geometry of all presets") {
  for (const auto& name : {"cvt13", "cvt21", "cvtw24"}) {
    auto cfg = presets::by_name(name);
    auto r = count_flops(cfg, 224, 224);
    const std::int64_t grid[3] = {56, 28, 14};
    for (int s = 0; s < 3; ++s) {
      const auto& rec = find(r, "stage" + std::to_string(s + 1) + ".output");
      CHECK(rec.shape == Shape{grid[s], grid[s], cfg.stages[s].embed_dim});
    }
  }
  auto hi = count_flops(presets::cvt13(), 384, 384);
  CHECK(find(hi, "stage1.output").shape == Shape{96, 96, 64});
  CHECK(find(hi, "stage3.output").shape == Shape{24, 24, 384});
}

TEST_CASE("stage-3 key/value token count") {
  auto r = count_flops(presets::cvt13(), 224, 224);
  for (int b = 0; b < 10; ++b) {
    const std::string bp = "stage3.block" + std::to_string(b) + ".attn.";
    CHECK(find(r, bp + "k.pw").shape == Shape{50, 384});
    CHECK(find(r, bp + "scores").shape == Shape{6, 197, 50});
  }
  CHECK(find(r, "stage1.block0.attn.scores").shape == Shape{1, 3136, 784});
}

TEST_CASE("trace lists layers in execution order") {
  auto t = shape_trace(presets::cvt13(), 224, 224);
  CHECK(t.front().path == "stage1.embed.conv");
  CHECK(t.front().shape == Shape{56, 56, 64});
  CHECK(t.back().path == "head.linear");
  CHECK(t.back().shape == Shape{1000});
  std::vector<std::string> outputs;
  for (const auto& e : t)
    if (e.path.ends_with(".output")) outputs.push_back(e.path);
  CHECK(outputs == std::vector<std::string>{"stage1.output", "stage2.output", "stage3.output"});
}

TEST_CASE("boundary inputs") {
  auto t = shape_trace(presets::cvt13(), 7, 7);
  CHECK(t.front().shape == Shape{2, 2, 64});
  auto one = shape_trace(presets::cvt13(), 1, 1);
  CHECK(one.front().shape == Shape{1, 1, 64});
  CHECK_THROWS_AS(count_flops(presets::cvt13(), 0, 224), GeometryError);
  auto unpadded = presets::cvt13();
  unpadded.stages[0].embed.padding = 0;
  CHECK(shape_trace(unpadded, 7, 7).front().shape == Shape{1, 1, 64});
  try {
    count_flops(unpadded, 6, 224);
    FAIL("expected a geometry error");
  } catch (const GeometryError& e) {
    CHECK(e.axis() == "height");
  }
}

TEST_CASE("static count agrees with live enumeration of a linear layer") {
  Rng rng(0);
  Linear lin(64, 64, true, rng);
  ParamList params;
  lin.collect("", params);
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  CHECK(n == 4160);

  ModelConfig c = presets::tiny();
  c.num_classes = 64;
  auto r = count_params(c);
  CHECK(find(r, "head.linear").params == 4160);
  CvtModel m(c, 0);
  std::int64_t head = 0;
  for (const auto& p : m.parameters())
    if (p.name.rfind("head.linear.", 0) == 0) head += p.tensor.numel();
  CHECK(head == 4160);
}

TEST_CASE("record paths name the live parameters") {
  auto cfg = presets::tiny();
  cfg.qkv_bias = true;
  CvtModel m(cfg, 0);
  std::map<std::string, std::int64_t> live;
  for (const auto& p : m.parameters()) {
    const std::string owner = p.name.ends_with("cls_token") ? p.name : p.name.substr(0, p.name.rfind('.'));
    live[owner] += p.tensor.numel();
  }
  std::map<std::string, std::int64_t> counted;
  for (const auto& rec : count_params(cfg).records)
    if (rec.params) counted[rec.path] = rec.params;
  CHECK(live == counted);
}

TEST_CASE("output formats") {
  auto r = count_flops(presets::cvt13(), 224, 224);
  auto table = format_table(r);
  const auto last = table.substr(table.rfind("total:"));
  CHECK(last.find(std::to_string(r.total_params)) != std::string::npos);
  CHECK(last.find("(19.98M)") != std::string::npos);
  CHECK(last.find(std::to_string(r.total_flops)) != std::string::npos);
  CHECK(last.find("(4.57G)") != std::string::npos);
  CHECK(last.find("input 224x224") != std::string::npos);

  std::istringstream rec(format_records(r));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(rec, line)) {
    CHECK(split(line, '\t').size() == 5);
    ++lines;
  }
  CHECK(lines == r.records.size() + 1);

  CHECK(dims_str({56, 56, 64}) == "56x56x64");
  CHECK(dims_str({}) == "-");
  CHECK(human_flops(4534000000) == "4.53G");
  CHECK(human_params(276700000) == "276.70M");
}

TEST_CASE("search space") {
  auto base = presets::cvt13();
  auto rep = enumerate_search_space(base, 20, 7);
  REQUIRE(rep.entries.size() == 22);
  const auto& lo = rep.entries[0];
  const auto& hi = rep.entries[1];
  CHECK(lo.candidate.label == "all-min");
  CHECK(hi.candidate.label == "all-max");
  CHECK(hi.params == count_params(base).total_params);
  CHECK(hi.flops == count_flops(base, 224, 224).total_flops);
  CHECK(lo.params < 19.98e6);
  CHECK(lo.flops < 4.53e9);
  for (const auto& e : rep.entries) {
    CHECK(e.candidate.stride_kv.size() == 13);
    CHECK(e.candidate.mlp_ratio.size() == 13);
    CHECK(e.params >= lo.params);
    CHECK(e.params <= hi.params);
    CHECK(e.flops >= lo.flops);
    CHECK(e.flops >= rep.min_flops);
    CHECK(e.flops <= rep.max_flops);
  }
  CHECK(rep.min_params == lo.params);
  CHECK(rep.max_params == hi.params);
  CHECK(rep.min_flops == lo.flops);

  auto again = enumerate_search_space(base, 20, 7);
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    CHECK(again.entries[i].candidate.stride_kv == rep.entries[i].candidate.stride_kv);
    CHECK(again.entries[i].flops == rep.entries[i].flops);
  }
  auto other = enumerate_search_space(base, 20, 8);
  bool differs = false;
  for (std::size_t i = 2; i < rep.entries.size(); ++i)
    differs = differs || other.entries[i].candidate.mlp_ratio != rep.entries[i].candidate.mlp_ratio;
  CHECK(differs);

  SearchCandidate bad{"cvt13", "bad", std::vector<int>(13, 2), std::vector<int>(13, 3)};
  CHECK_THROWS_AS(apply_candidate(base, bad), ConfigError);
  bad.mlp_ratio = std::vector<int>(12, 2);
  CHECK_THROWS_AS(apply_candidate(base, bad), ConfigError);
  CHECK_THROWS_AS(enumerate_search_space(base, 0, 1), ConfigError);
}

TEST_CASE("per-block choices change costs of exactly that block") {
  auto base = presets::tiny();
  SearchCandidate c{"tiny", "x", {2, 2, 1, 2}, {4, 2, 4, 4}};
  auto cfg = apply_candidate(base, c);
  auto a = count_flops(base, 32, 32), b = count_flops(cfg, 32, 32);
  CHECK(find(b, "stage2.block0.mlp.fc1").params < find(a, "stage2.block0.mlp.fc1").params);
  CHECK(find(b, "stage3.block0.attn.scores").flops > find(a, "stage3.block0.attn.scores").flops);
  CHECK(find(b, "stage3.block1.attn.scores").flops == find(a, "stage3.block1.attn.scores").flops);
  CvtModel m(cfg, 0);
  CHECK(m.num_parameters() == b.total_params);
}
