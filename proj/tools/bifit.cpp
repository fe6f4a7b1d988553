// bifit train|eval|infer|ablate|bench|generate --config <path> [--<section.key> <value>]...

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bifit/harness.hpp"

namespace {

using namespace bifit;

struct Options {
  std::string config;
  std::string checkpoint;
  std::string clip;
  std::string expression;
  std::string out;
  std::vector<std::string> extras;
};

RunConfig load_config(const Options& o) {
  RunConfig cfg;
  if (!o.config.empty()) cfg.load_ini(o.config);
  const auto& ex = o.extras;
  for (std::size_t i = 0; i < ex.size(); ++i) {
    std::string key = ex[i];
    if (key.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + key + "'");
    key = key.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= ex.size()) throw ConfigError("override --" + key + " needs a value");
      value = ex[++i];
    }
    cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

int cmd_generate(const RunConfig& cfg) {
  ensure_dataset(cfg);
  std::cout << "dataset ready at " << cfg.run.dataset << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  return with_precision(cfg.run.precision, [&]<class T>() {
    const auto res = train_run<T>(cfg);
    std::cout << "trained " << res.rows.size() << " steps; checkpoint " << res.checkpoint.string() << "\n";
    return 0;
  });
}

int cmd_eval(const RunConfig& cfg, const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const auto d = read_checkpoint(o.checkpoint);
  ensure_dataset(cfg);
  const auto clips = load_split(cfg, cfg.run.eval_split);
  return with_precision(d.config.run.precision, [&]<class T>() {
    const auto model = load_model<T>(d);
    const auto report = evaluate(*model, clips, cfg.run.threads);
    const fs::path out = cfg.run.output;
    write_text(out / "metrics.json", report.to_json().dump(2) + "\n");
    write_text(out / "metrics.csv", MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
  });
}

int cmd_infer(const RunConfig& cfg, const Options& o) {
  if (o.checkpoint.empty() || o.clip.empty() || o.expression.empty())
    throw ConfigError("infer needs --checkpoint, --clip and --expression");
  const auto d = read_checkpoint(o.checkpoint);
  const fs::path out = o.out.empty() ? fs::path(cfg.run.output) / "infer" : fs::path(o.out);
  return with_precision(d.config.run.precision, [&]<class T>() {
    const auto model = load_model<T>(d);
    const auto r = infer(*model, o.clip, o.expression, out);
    std::cout << "sequence " << r.index << " score " << r.score << "; " << r.frames << " masks in " << out.string() << "\n";
    return 0;
  });
}

int cmd_ablate(const RunConfig& cfg) {
  return with_precision(cfg.run.precision, [&]<class T>() {
    const auto results = ablate<T>(cfg, [](const std::string& row, int seed, double jf) {
      std::fprintf(stderr, "%-14s seed %d  J&F %.4f\n", row.c_str(), seed, jf);
    });
    std::cout << ablation_csv(results);
    return 0;
  });
}

int cmd_bench(const RunConfig& cfg) {
  const auto rows = bench_ifi(cfg);
  const auto fit = fit_ifi_cost(rows);
  const std::string csv = bench_csv(rows, fit);
  write_text(fs::path(cfg.run.output) / "bench_ifi.csv", csv);
  std::cout << csv << "fit a=" << fit.a << " b=" << fit.b << " max_rel_residual=" << fit.max_rel_residual << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BIFIT referring video object segmentation"};
  app.require_subcommand(1);
  Options o;
  std::vector<CLI::App*> subs;
  for (const char* name : {"train", "eval", "infer", "ablate", "bench", "generate"}) {
    auto* s = app.add_subcommand(name);
    s->add_option("--config", o.config, "INI configuration file");
    s->allow_extras();
    subs.push_back(s);
  }
  app.get_subcommand("eval")->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  auto* inf = app.get_subcommand("infer");
  inf->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  inf->add_option("--clip", o.clip, "directory of frame_%03d.ppm files");
  inf->add_option("--expression", o.expression, "referring expression");
  inf->add_option("--out", o.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_CONFIG: " << e.what() << "\n";
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    o.extras = sub->remaining();
    const RunConfig cfg = load_config(o);
    const std::string name = sub->get_name();
    if (name == "train") return cmd_train(cfg);
    if (name == "eval") return cmd_eval(cfg, o);
    if (name == "infer") return cmd_infer(cfg, o);
    if (name == "ablate") return cmd_ablate(cfg);
    if (name == "bench") return cmd_bench(cfg);
    return cmd_generate(cfg);
  } catch (const bifit::Error& e) {
    std::cerr << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
    return 1;
  }
}
