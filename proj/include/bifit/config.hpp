#pragma once

// Run configuration: INI-style sections, every field addressable by a
// dotted "section.key" name for files and command-line overrides.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "bifit/losses.hpp"
#include "bifit/model_config.hpp"
#include "bifit/optim.hpp"
#include "bifit/synthetic.hpp"

namespace bifit {

struct RunSettings {
  std::uint64_t seed = 1;        // parameter init and clip order
  int precision = 32;            // 32 or 64
  std::string dataset = "data/synthetic";
  std::string output = "runs/default";
  std::string split = "train";   // split used by train
  int train_subset = 0;          // use only the first K clips (0 = all)
  std::string eval_split = "val";
  int checkpoint_every = 0;      // 0: only the final checkpoint
  std::string resume;            // checkpoint to continue from
  bool supervise_negatives = true;
  bool aux_losses = true;
  int threads = 1;               // evaluation workers
};

struct AblateSettings {
  int seeds = 3;
  bool variants = false;         // also run fusion / text-source / ratio variants
};

struct BenchSettings {
  int t_min = 2, t_max = 16;
  int queries = 5;
  std::string channels = "32,64,128";
  int repeats = 5;
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  OptimConfig optim;
  DataConfig data;
  RunSettings run;
  AblateSettings ablate;
  BenchSettings bench;

  /// Calls f(key, field) for every configurable field.
  template <class F>
  void visit(F&& f) {
    f("model.channels", model.channels);
    f("model.heads", model.heads);
    f("model.encoder_layers", model.encoder_layers);
    f("model.decoder_layers", model.decoder_layers);
    f("model.queries", model.queries);
    f("model.levels", model.levels);
    f("model.mask_channels", model.mask_channels);
    f("model.ffn_dim", model.ffn_dim);
    f("model.stem1", model.stem1);
    f("model.stem2", model.stem2);
    f("model.norm_groups", model.norm_groups);
    f("model.text_layers", model.text_layers);
    f("model.vocab_size", model.vocab_size);
    f("model.max_words", model.max_words);
    f("model.ifi_enabled", model.ifi_enabled);
    f("model.vewl_enabled", model.vewl_enabled);
    f("model.lewv_enabled", model.lewv_enabled);
    f("model.fusion", model.fusion);
    f("model.vewl_text", model.vewl_text);
    f("model.ifi_ratio_decoder", model.ifi_ratio_decoder);
    f("model.ifi_ratio_ifi", model.ifi_ratio_ifi);
    f("loss.cls", loss.cls);
    f("loss.l1", loss.l1);
    f("loss.giou", loss.giou);
    f("loss.dice", loss.dice);
    f("loss.focal", loss.focal);
    f("loss.supervise_negatives", run.supervise_negatives);
    f("loss.aux_losses", run.aux_losses);
    f("optim.lr", optim.lr);
    f("optim.weight_decay", optim.weight_decay);
    f("optim.beta1", optim.beta1);
    f("optim.beta2", optim.beta2);
    f("optim.eps", optim.eps);
    f("optim.grad_clip", optim.grad_clip);
    f("optim.steps", optim.steps);
    f("optim.batch_clips", optim.batch_clips);
    f("optim.milestone1", optim.milestone1);
    f("optim.milestone2", optim.milestone2);
    f("optim.decay", optim.decay);
    f("data.frames", data.frames);
    f("data.height", data.height);
    f("data.width", data.width);
    f("data.train_clips", data.train_clips);
    f("data.val_clips", data.val_clips);
    f("data.seed", data.seed);
    f("data.min_objects", data.min_objects);
    f("data.max_objects", data.max_objects);
    f("data.hard_distractor_prob", data.hard_distractor_prob);
    f("data.speed", data.speed);
    f("run.seed", run.seed);
    f("run.precision", run.precision);
    f("run.dataset", run.dataset);
    f("run.output", run.output);
    f("run.split", run.split);
    f("run.train_subset", run.train_subset);
    f("run.eval_split", run.eval_split);
    f("run.checkpoint_every", run.checkpoint_every);
    f("run.resume", run.resume);
    f("run.threads", run.threads);
    f("ablate.seeds", ablate.seeds);
    f("ablate.variants", ablate.variants);
    f("bench.t_min", bench.t_min);
    f("bench.t_max", bench.t_max);
    f("bench.queries", bench.queries);
    f("bench.channels", bench.channels);
    f("bench.repeats", bench.repeats);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<RunConfig*>(this)->visit([&](const char* k, auto& v) { f(k, std::as_const(v)); });
  }

  void set(const std::string& key, const std::string& value) {
    bool found = false;
    visit([&](const char* k, auto& field) {
      if (key != k) return;
      found = true;
      parse_into(key, value, field);
    });
    if (!found) throw ConfigError("unknown configuration key '" + key + "'");
  }

  bool has(const std::string& key) const {
    bool found = false;
    visit([&](const char* k, const auto&) { found = found || key == k; });
    return found;
  }

  /// Every field as (dotted key, text value), in declaration order.
  std::vector<std::pair<std::string, std::string>> entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    visit([&](const char* k, const auto& v) { out.emplace_back(k, format(v)); });
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : entries()) j[k] = v;
    return j;
  }
  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) c.set(it.key(), it.value().get<std::string>());
    return c;
  }

  std::string to_ini() const {
    std::ostringstream os;
    std::string section;
    for (const auto& [k, v] : entries()) {
      const auto dot = k.find('.');
      const std::string s = k.substr(0, dot);
      if (s != section) {
        os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
        section = s;
      }
      os << k.substr(dot + 1) << " = " << v << '\n';
    }
    return os.str();
  }

  void validate() const {
    model.validate();
    loss.validate();
    optim.validate();
    data.validate();
    if (run.precision != 32 && run.precision != 64) throw ConfigError("run.precision must be 32 or 64");
    if (run.train_subset < 0 || run.checkpoint_every < 0 || run.threads < 1)
      throw ConfigError("run.train_subset and run.checkpoint_every must be >= 0, run.threads >= 1");
    if (ablate.seeds < 1) throw ConfigError("ablate.seeds must be >= 1");
    if (bench.t_min < 1 || bench.t_max < bench.t_min || bench.queries < 1 || bench.repeats < 1)
      throw ConfigError("bench ranges must be positive and ordered");
  }

  /// Applies `[section] key = value` lines from an INI file.
  void load_ini(const std::filesystem::path& path) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
      pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
      if (!std::filesystem::exists(path)) throw IoError("cannot open config " + path.string());
      throw ConfigError(path.string() + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError(path.string() + ": key '" + section + "' is outside any section");
      for (const auto& [key, value] : body) set(section + "." + key, value.get_value<std::string>());
    }
  }

  static RunConfig from_ini(const std::filesystem::path& path) {
    RunConfig c;
    c.load_ini(path);
    return c;
  }

 private:
  static void parse_into(const std::string& key, const std::string& v, int& out) { out = static_cast<int>(parse_number(key, v, true)); }
  static void parse_into(const std::string& key, const std::string& v, std::uint64_t& out) {
    try {
      std::size_t used = 0;
      out = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
  }
  static void parse_into(const std::string& key, const std::string& v, double& out) { out = parse_number(key, v, false); }
  static void parse_into(const std::string& key, const std::string& v, bool& out) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") out = true;
    else if (v == "false" || v == "0" || v == "off" || v == "no") out = false;
    else throw ConfigError(key + ": expected a boolean, got '" + v + "'");
  }
  static void parse_into(const std::string&, const std::string& v, std::string& out) { out = v; }
  static void parse_into(const std::string&, const std::string& v, Fusion& out) { out = parse_fusion(v); }
  static void parse_into(const std::string&, const std::string& v, VewlText& out) { out = parse_vewl_text(v); }

  static double parse_number(const std::string& key, const std::string& v, bool integer) {
    try {
      std::size_t used = 0;
      const double d = integer ? static_cast<double>(std::stoll(v, &used)) : std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected " + (integer ? "an integer" : "a number") + ", got '" + v + "'");
    }
  }

  static std::string format(int v) { return std::to_string(v); }
  static std::string format(std::uint64_t v) { return std::to_string(v); }
  static std::string format(bool v) { return v ? "true" : "false"; }
  static std::string format(const std::string& v) { return v; }
  static std::string format(Fusion v) { return to_string(v); }
  static std::string format(VewlText v) { return to_string(v); }
  static std::string format(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    return std::string(buf, r.ptr);
  }
};

/// Comma-separated integers.
inline std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected comma-separated integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace bifit
