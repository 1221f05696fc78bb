#include "cvt/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cvt/analysis.hpp"
#include "cvt/checkpoint.hpp"
#include "cvt/config_json.hpp"
#include "cvt/train.hpp"

namespace cvt::cli {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Run configuration file: {"model": {...}, "train": {...}}

struct TrainSettings {
  TrainOptions options;
  DatasetConfig data;
  std::int64_t eval_samples = 1024;
};

struct RunConfig {
  ModelConfig model;
  TrainSettings train;
};

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + "." + key, "unknown key");
  }
}

template <typename T>
void take(const json& j, const char* key, T& target, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key, "wrong type: " + j.at(key).dump());
  }
}

TrainSettings parse_train(const json& j) {
  TrainSettings s;
  reject_unknown(j, {"steps", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "warmup_frac", "seed",
                     "shuffle_labels", "eval_samples", "data"},
                 "train");
  auto& o = s.options;
  take(j, "steps", o.steps, "train");
  take(j, "batch_size", o.batch_size, "train");
  take(j, "lr", o.optim.lr, "train");
  take(j, "beta1", o.optim.beta1, "train");
  take(j, "beta2", o.optim.beta2, "train");
  take(j, "eps", o.optim.eps, "train");
  take(j, "weight_decay", o.optim.weight_decay, "train");
  take(j, "warmup_frac", o.warmup_frac, "train");
  take(j, "seed", o.seed, "train");
  take(j, "shuffle_labels", o.shuffle_labels, "train");
  take(j, "eval_samples", s.eval_samples, "train");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"image_size", "noise", "min_margin", "seed"}, "train.data");
    take(d, "image_size", s.data.image_size, "train.data");
    take(d, "noise", s.data.noise, "train.data");
    take(d, "min_margin", s.data.min_margin, "train.data");
    take(d, "seed", s.data.seed, "train.data");
  }
  if (s.eval_samples < 1) throw ConfigError("train.eval_samples", "must be >= 1");
  return s;
}

json train_to_json(const TrainSettings& s) {
  const auto& o = s.options;
  return {{"steps", o.steps},
          {"batch_size", o.batch_size},
          {"lr", o.optim.lr},
          {"beta1", o.optim.beta1},
          {"beta2", o.optim.beta2},
          {"eps", o.optim.eps},
          {"weight_decay", o.optim.weight_decay},
          {"warmup_frac", o.warmup_frac},
          {"seed", o.seed},
          {"shuffle_labels", o.shuffle_labels},
          {"eval_samples", s.eval_samples},
          {"data",
           {{"image_size", s.data.image_size},
            {"noise", s.data.noise},
            {"min_margin", s.data.min_margin},
            {"seed", s.data.seed}}}};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  reject_unknown(j, {"model", "train"}, "config");
  if (!j.contains("model")) throw ConfigError("config.model", "required");
  RunConfig rc;
  rc.model = model_config_from_json(j.at("model").dump());
  if (j.contains("train")) rc.train = parse_train(j.at("train"));
  return rc;
}

RunConfig resolve(const std::string& preset, const std::string& config_path) {
  if (!preset.empty() && !config_path.empty()) throw ConfigError("preset", "use either --preset or --config");
  if (!config_path.empty()) return parse_run_config(read_file(config_path));
  RunConfig rc;
  rc.model = presets::by_name(preset.empty() ? "cvt13" : preset);
  return rc;
}

DatasetConfig dataset_for(const ModelConfig& model, DatasetConfig data) {
  data.num_classes = model.num_classes;
  data.channels = model.input_channels;
  return data;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void check_writable(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
}

void write_file(const std::string& path, const void* data, std::size_t size) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size))) {
    throw IoError("cannot write '" + path + "'");
  }
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// ---------------------------------------------------------------------------

struct Args {
  std::string preset, config, checkpoint, out, log, format = "table";
  std::int64_t input_size = 224;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  int samples = 16;
  std::optional<std::int64_t> eval_samples;
};

int cmd_analyze(const Args& a, std::ostream& out) {
  if (a.format != "table" && a.format != "records") throw ConfigError("format", "expected table or records");
  const auto rc = resolve(a.preset, a.config);
  const auto report = count_flops(rc.model, a.input_size, a.input_size);
  out << (a.format == "table" ? format_table(report) : format_records(report));
  return kOk;
}

int cmd_trace(const Args& a, std::ostream& out) {
  const auto rc = resolve(a.preset, a.config);
  const auto report = count_flops(rc.model, a.input_size, a.input_size);
  std::string section;
  for (const auto& r : report.records) {
    const std::string head = r.path.substr(0, r.path.find('.'));
    if (head != section) {
      section = head;
      out << "== " << section << " ==\n";
    }
    out << r.path << '\t' << dims_str(r.shape);
    if (r.path.ends_with("attn.scores")) out << "\tq_tokens=" << r.shape[1] << " kv_tokens=" << r.shape[2];
    out << '\n';
  }
  return kOk;
}

int cmd_search(const Args& a, std::ostream& out) {
  const auto rc = resolve(a.preset, a.config);
  const auto rep = enumerate_search_space(rc.model, a.samples, a.seed.value_or(0), a.input_size);
  for (const auto& e : rep.entries) {
    out << e.candidate.label << "\tstride_kv=" << join(e.candidate.stride_kv)
        << "\tmlp_ratio=" << join(e.candidate.mlp_ratio) << "\tparams " << e.params << " ("
        << human_params(e.params) << ")\tflops " << e.flops << " (" << human_flops(e.flops) << ")\n";
  }
  out << "range: params " << human_params(rep.min_params) << " .. " << human_params(rep.max_params) << "  flops "
      << human_flops(rep.min_flops) << " .. " << human_flops(rep.max_flops) << '\n';
  return kOk;
}

int cmd_train(const Args& a, std::ostream& out) {
  RunConfig rc = resolve(a.preset.empty() && a.config.empty() ? "tiny" : a.preset, a.config);
  auto& settings = rc.train;
  if (a.steps) settings.options.steps = *a.steps;
  if (a.seed) settings.options.seed = *a.seed;
  if (a.eval_samples) settings.eval_samples = *a.eval_samples;
  if (settings.eval_samples < 1) throw ConfigError("eval_samples", "must be >= 1");
  if (a.out.empty()) throw ConfigError("out", "--out is required");
  check_writable(a.out);
  if (!a.log.empty()) check_writable(a.log);

  SyntheticDataset dataset(dataset_for(rc.model, settings.data));
  CvtModel model(rc.model, settings.options.seed);
  const TrainingLog log = train(model, dataset, settings.options);
  const auto result = evaluate(model, dataset, settings.eval_samples, settings.options.seed);

  const json meta = {{"train", train_to_json(settings)}};
  const auto bytes = serialize_checkpoint(model, meta.dump());
  write_file(a.out, bytes.data(), bytes.size());
  if (!a.log.empty()) {
    const auto text = log.to_lines();
    write_file(a.log, text.data(), text.size());
  }
  std::uint64_t checksum = 0;
  for (int i = 0; i < 8; ++i) checksum |= std::uint64_t(bytes[bytes.size() - 8 + i]) << (8 * i);
  out << "trained " << settings.options.steps << " steps  final_loss " << fixed(log.records.back().loss, 6)
      << "  accuracy " << fixed(result.accuracy, 4) << "  samples " << result.samples << '\n';
  out << "checkpoint " << a.out << "  checksum " << hex64(checksum) << '\n';
  return kOk;
}

int cmd_eval(const Args& a, std::ostream& out) {
  if (a.checkpoint.empty()) throw ConfigError("checkpoint", "--checkpoint is required");
  std::optional<ModelConfig> expected;
  if (!a.preset.empty() || !a.config.empty()) expected = resolve(a.preset, a.config).model;
  auto loaded = load_checkpoint(a.checkpoint, expected ? &*expected : nullptr);

  TrainSettings settings;
  json meta = json::parse(loaded.metadata_json, nullptr, false);
  if (meta.is_object() && meta.contains("train")) {
    try {
      settings = parse_train(meta.at("train"));
    } catch (const ConfigError& e) {
      throw CheckpointFormatError(std::string("bad training metadata: ") + e.what());
    }
  }
  if (a.eval_samples) settings.eval_samples = *a.eval_samples;
  if (settings.eval_samples < 1) throw ConfigError("eval_samples", "must be >= 1");
  SyntheticDataset dataset(dataset_for(loaded.model.config(), settings.data));
  const auto r = evaluate(loaded.model, dataset, settings.eval_samples, a.seed.value_or(0));
  out << "accuracy " << fixed(r.accuracy, 4) << "  loss " << fixed(r.mean_loss, 6) << "  samples " << r.samples
      << "  model " << loaded.model.config().name << "  checksum " << hex64(loaded.checksum) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Convolutional vision Transformer toolkit", "cvt"};
  app.require_subcommand(1);
  Args a;

  auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--preset", a.preset, "Preset model: cvt13, cvt21, cvtw24, tiny");
    sub->add_option("--config", a.config, "JSON run configuration file");
  };

  auto* analyze = app.add_subcommand("analyze", "Parameter and FLOP report");
  model_opts(analyze);
  analyze->add_option("--input-size", a.input_size, "Square input side")->capture_default_str();
  analyze->add_option("--format", a.format, "table or records")->capture_default_str();

  auto* trace = app.add_subcommand("trace", "Per-layer output shapes");
  model_opts(trace);
  trace->add_option("--input-size", a.input_size, "Square input side")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic task");
  model_opts(train_cmd);
  train_cmd->add_option("--steps", a.steps, "Optimizer steps");
  train_cmd->add_option("--seed", a.seed, "Init and sampling seed");
  train_cmd->add_option("--out", a.out, "Checkpoint path");
  train_cmd->add_option("--log", a.log, "Training log path");
  train_cmd->add_option("--eval-samples", a.eval_samples, "Held-out samples scored after training");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on held-out synthetic samples");
  model_opts(eval_cmd);
  eval_cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint path");
  eval_cmd->add_option("--seed", a.seed, "Evaluation sample seed");
  eval_cmd->add_option("--samples", a.eval_samples, "Number of samples");

  auto* search = app.add_subcommand("search", "Enumerate search-space candidate costs");
  model_opts(search);
  search->add_option("--samples", a.samples, "Random candidates")->capture_default_str();
  search->add_option("--seed", a.seed, "Sampling seed");
  search->add_option("--input-size", a.input_size, "Square input side")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (analyze->parsed()) return cmd_analyze(a, out);
    if (trace->parsed()) return cmd_trace(a, out);
    if (train_cmd->parsed()) return cmd_train(a, out);
    if (eval_cmd->parsed()) return cmd_eval(a, out);
    if (search->parsed()) return cmd_search(a, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const GeometryError& e) {
    err << "error: " << e.what() << '\n';
    return kGeometry;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kUnwritable;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace cvt::cli
