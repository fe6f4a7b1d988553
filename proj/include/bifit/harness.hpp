#pragma once

// Training, evaluation, inference, ablation and the IFI cost benchmark.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bifit/checkpoint.hpp"
#include "bifit/config.hpp"
#include "bifit/metrics.hpp"
#include "bifit/model.hpp"
#include "bifit/optim.hpp"
#include "bifit/synthetic.hpp"

namespace bifit {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ dataset

/// Dataset root holds one directory per split ("train", "val").
inline fs::path split_dir(const RunConfig& cfg, const std::string& split) { return fs::path(cfg.run.dataset) / split; }

/// Generates both splits under run.dataset unless a manifest already exists.
inline void ensure_dataset(const RunConfig& cfg) {
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", cfg.data.train_clips}, {"val", cfg.data.val_clips}}) {
    const fs::path dir = split_dir(cfg, split);
    if (fs::exists(dir / "manifest.jsonl")) continue;
    write_dataset(generate_split(cfg.data, split, count), dir);
  }
}

inline std::vector<ClipRecord> load_split(const RunConfig& cfg, const std::string& split, int limit = 0) {
  auto clips = read_dataset(split_dir(cfg, split));
  if (limit > 0 && static_cast<int>(clips.size()) > limit) clips.resize(static_cast<std::size_t>(limit));
  if (clips.empty()) throw InputError("split '" + split + "' under " + cfg.run.dataset + " has no clips");
  return clips;
}

// ----------------------------------------------------------------- training

struct LossRow {
  std::uint64_t step = 0;
  double loss = 0, lr = 0, grad_norm = 0;
  std::string clip_id;
  int positive = 0;
};

inline std::string loss_csv_header() { return "step,loss,lr,grad_norm,clip_id,positive"; }
inline std::string loss_csv_row(const LossRow& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.step << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << ',' << r.clip_id << ',' << r.positive;
  return os.str();
}

/// Loss terms of the selected positive at the final decoder layer.
template <class T>
std::map<std::string, double> loss_breakdown(const ForwardOutput<T>& out, const GroundTruthSequence<T>& gt, const LossWeights& w) {
  const auto seqs = out.sequences();
  const int pos = select_positive(gt, seqs, w);
  std::map<std::string, double> parts;
  const std::pair<const char*, LossWeights> only[] = {{"cls", {w.cls, 0, 0, 0, 0}},   {"l1", {0, w.l1, 0, 0, 0}},
                                                      {"giou", {0, 0, w.giou, 0, 0}}, {"dice", {0, 0, 0, w.dice, 0}},
                                                      {"focal", {0, 0, 0, 0, w.focal}}};
  for (const auto& [name, ww] : only) parts[name] = static_cast<double>(matching_cost(gt, seqs[pos], ww));
  return parts;
}

/// Training data converted once to the working precision.
template <class T>
struct PreparedClip {
  std::string id;
  VideoClip<T> clip;
  std::vector<int> tokens;
  GroundTruthSequence<T> gt;
};

template <class T>
std::vector<PreparedClip<T>> prepare(const std::vector<ClipRecord>& records) {
  std::vector<PreparedClip<T>> out;
  for (const auto& r : records) out.push_back({r.id, r.clip<T>(), r.tokens, r.ground_truth<T>(4)});
  return out;
}

template <class T>
class Trainer {
 public:
  explicit Trainer(RunConfig cfg)
      : cfg_(std::move(cfg)), model_(std::make_unique<BifitModel<T>>(cfg_.model, cfg_.run.seed)), opt_(cfg_.optim), rng_(cfg_.run.seed) {
    cfg_.validate();
  }

  BifitModel<T>& model() { return *model_; }
  const BifitModel<T>& model() const { return *model_; }
  AdamW<T>& optimizer() { return opt_; }
  std::uint64_t step() const { return step_; }
  const RunConfig& config() const { return cfg_; }

  void resume(const CheckpointData& d) {
    restore_checkpoint(d, model_->params(), &opt_);
    step_ = d.step;
    rng_.set_state(d.rng_state);
  }

  void save(const fs::path& path) const { save_checkpoint(path, cfg_, step_, rng_.state(), model_->params(), &opt_); }

  /// Clip index for the draw-th clip of training: each epoch visits every
  /// clip once in an order fixed by (seed, epoch).
  std::size_t clip_for_step(std::uint64_t draw, std::size_t n) const {
    const std::uint64_t epoch = draw / n;
    if (epoch != order_epoch_ || order_.size() != n) {
      order_.resize(n);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Rng r(detail::mix_seed(cfg_.run.seed, epoch));
      r.shuffle(order_);
      order_epoch_ = epoch;
    }
    return order_[draw % n];
  }

  /// One optimisation step on one clip.
  LossRow train_step(const PreparedClip<T>& c) { return train_step(std::vector<const PreparedClip<T>*>{&c}); }

  /// One optimisation step on the mean loss of several clips.
  LossRow train_step(const std::vector<const PreparedClip<T>*>& batch) {
    if (batch.empty()) throw InputError("train_step: empty batch");
    TrainingObjective obj{cfg_.loss, cfg_.run.supervise_negatives, cfg_.run.aux_losses};
    LossRow row;
    row.step = step_;
    Var<T> loss;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const PreparedClip<T>& c = *batch[b];
      row.clip_id += (b ? "+" : "") + c.id;
      ForwardOutput<T> out = model_->forward(c.clip, c.tokens, obj.aux_losses);
      Var<T> term;
      try {
        term = objective(out, c.gt, obj, b == 0 ? &row.positive : nullptr);
      } catch (const NumericError&) {
        std::ostringstream os;
        os << "non-finite loss at step " << step_ << " on clip " << c.id << " (";
        bool first = true;
        for (const auto& [k, v] : loss_breakdown(out, c.gt, cfg_.loss)) {
          os << (first ? "" : ", ") << k << "=" << v;
          first = false;
        }
        os << ")";
        throw NumericError(os.str());
      }
      loss = b == 0 ? term : add(loss, term);
    }
    if (batch.size() > 1) loss = scale(loss, T(1) / static_cast<T>(batch.size()));
    row.loss = static_cast<double>(loss.value()[0]);
    backward(loss);
    row.grad_norm = AdamW<T>::clip_grad_norm(model_->params(), cfg_.optim.grad_clip);
    if (!std::isfinite(row.grad_norm))
      throw NumericError("non-finite gradient norm at step " + std::to_string(step_) + " on clip " + row.clip_id);
    row.lr = cfg_.optim.lr_at(static_cast<int>(step_));
    opt_.step(model_->params(), row.lr);
    model_->params().zero_grad();
    ++step_;
    return row;
  }

  /// Runs until optim.steps updates have been made in total.
  std::vector<LossRow> run(const std::vector<PreparedClip<T>>& clips, const std::function<void(const LossRow&)>& on_row = {},
                           const std::function<void(std::uint64_t)>& on_checkpoint = {}) {
    if (clips.empty()) throw InputError("no training clips");
    std::vector<LossRow> rows;
    while (step_ < static_cast<std::uint64_t>(cfg_.optim.steps)) {
      std::vector<const PreparedClip<T>*> batch;
      const auto k = static_cast<std::uint64_t>(cfg_.optim.batch_clips);
      for (std::uint64_t i = 0; i < k; ++i) batch.push_back(&clips[clip_for_step(step_ * k + i, clips.size())]);
      rows.push_back(train_step(batch));
      if (on_row) on_row(rows.back());
      if (on_checkpoint && cfg_.run.checkpoint_every > 0 && step_ % static_cast<std::uint64_t>(cfg_.run.checkpoint_every) == 0 &&
          step_ < static_cast<std::uint64_t>(cfg_.optim.steps))
        on_checkpoint(step_);
    }
    return rows;
  }

 private:
  RunConfig cfg_;
  std::unique_ptr<BifitModel<T>> model_;
  AdamW<T> opt_;
  Rng rng_;
  std::uint64_t step_ = 0;
  mutable std::vector<std::size_t> order_;
  mutable std::uint64_t order_epoch_ = ~std::uint64_t{0};
};

// --------------------------------------------------------------- evaluation

template <class T>
SelectedSequence<T> predict(const BifitModel<T>& model, const VideoClip<T>& clip, const std::vector<int>& tokens) {
  NoGradGuard ng;
  return select_and_upsample(model.forward(clip, tokens), clip.height(), clip.width());
}

/// Metrics of the selected sequence on every clip. Clips are spread over
/// `threads` workers; parameters are read-only during evaluation.
template <class T>
MetricsReport evaluate(const BifitModel<T>& model, const std::vector<ClipRecord>& clips, int threads = 1) {
  if (clips.empty()) throw InputError("evaluate: no clips");
  std::vector<std::vector<std::uint8_t>> preds(clips.size());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(threads, 1)));
  auto work = [&](std::size_t worker, std::size_t stride) {
    try {
      for (std::size_t i = worker; i < clips.size(); i += stride) preds[i] = predict(model, clips[i].clip<T>(), clips[i].tokens).masks;
    } catch (...) {
      errors[worker] = std::current_exception();
    }
  };
  const std::size_t n = errors.size();
  if (n == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(work, w, n);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  MetricsAccumulator acc;
  for (std::size_t i = 0; i < clips.size(); ++i) acc.add_sample(preds[i], clips[i].masks, clips[i].frames, clips[i].height, clips[i].width);
  return acc.report();
}

/// Ground truth fed back as the prediction; exercises the metric path.
inline MetricsReport evaluate_ground_truth(const std::vector<ClipRecord>& clips) {
  MetricsAccumulator acc;
  for (const auto& c : clips) acc.add_sample(c.masks, c.masks, c.frames, c.height, c.width);
  return acc.report();
}

// ------------------------------------------------------------ model loading

template <class T>
std::unique_ptr<BifitModel<T>> load_model(const CheckpointData& d) {
  auto m = std::make_unique<BifitModel<T>>(d.config.model, d.config.run.seed);
  restore_checkpoint(d, m->params());
  return m;
}

/// Calls f.template operator()<T>() with T chosen by run.precision.
template <class F>
decltype(auto) with_precision(int precision, F&& f) {
  if (precision == 64) return f.template operator()<double>();
  if (precision == 32) return f.template operator()<float>();
  throw ConfigError("run.precision must be 32 or 64");
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  detail::write_file(p, s);
}

inline std::string checkpoint_name(std::uint64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_%llu.bin", static_cast<unsigned long long>(step));
  return buf;
}

struct TrainResult {
  std::vector<LossRow> rows;
  fs::path checkpoint;
};

/// Trains on run.split, writing loss.csv, config.ini and checkpoints under
/// run.output.
template <class T>
TrainResult train_run(const RunConfig& cfg, bool quiet = false) {
  cfg.validate();
  ensure_dataset(cfg);
  const fs::path out = cfg.run.output;
  fs::create_directories(out);
  Trainer<T> trainer(cfg);
  std::string csv;
  if (!cfg.run.resume.empty()) {
    const auto d = read_checkpoint(cfg.run.resume);
    trainer.resume(d);
    // Keep the rows of the run being continued.
    if (fs::exists(out / "loss.csv")) {
      std::istringstream is(detail::read_file(out / "loss.csv"));
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line))
        if (!line.empty() && std::stoull(line.substr(0, line.find(','))) < d.step) csv += line + "\n";
    }
  }
  const auto clips = prepare<T>(load_split(cfg, cfg.run.split, cfg.run.train_subset));
  write_text(out / "config.ini", cfg.to_ini());
  auto flush = [&] { write_text(out / "loss.csv", loss_csv_header() + "\n" + csv); };
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  try {
    res.rows = trainer.run(
      clips,
      [&](const LossRow& r) {
        csv += loss_csv_row(r) + "\n";
        if (!quiet && (r.step % 50 == 0 || r.step + 1 == static_cast<std::uint64_t>(cfg.optim.steps))) {
          const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          std::fprintf(stderr, "step %llu loss %.4f lr %.2e (%.1fs)\n", static_cast<unsigned long long>(r.step), r.loss, r.lr, sec);
        }
      },
      [&](std::uint64_t step) {
        flush();
        trainer.save(out / checkpoint_name(step));
      });
  } catch (...) {
    flush();  // keep the rows leading up to a failure
    throw;
  }
  flush();
  res.checkpoint = out / checkpoint_name(trainer.step());
  trainer.save(res.checkpoint);
  return res;
}

// --------------------------------------------------------------- inference

struct InferResult {
  int index = 0;
  double score = 0;
  std::vector<std::array<double, 4>> boxes;
  std::vector<double> probs;
  int frames = 0;
};

/// Reads frame_%03d.ppm files from `clip_dir` in order.
inline ClipRecord read_frames(const fs::path& clip_dir) {
  ClipRecord r;
  r.id = clip_dir.filename().string();
  for (int t = 0;; ++t) {
    const fs::path p = clip_dir / frame_name("frame", t, "ppm");
    if (!fs::exists(p)) break;
    int h = 0, w = 0;
    auto px = read_ppm(p, h, w);
    if (t > 0 && (h != r.height || w != r.width)) throw IoError(p.string() + ": frame size differs from frame 0");
    r.height = h;
    r.width = w;
    r.pixels.insert(r.pixels.end(), px.begin(), px.end());
    r.frames = t + 1;
  }
  if (r.frames == 0) throw IoError("no frame_000.ppm in " + clip_dir.string());
  return r;
}

/// Writes mask_%03d.pbm per frame and result.json into `out_dir`.
template <class T>
InferResult infer(const BifitModel<T>& model, const fs::path& clip_dir, const std::string& expression, const fs::path& out_dir) {
  const auto tokens = tokenize(expression);
  const ClipRecord rec = read_frames(clip_dir);
  const auto sel = predict(model, rec.clip<T>(), tokens);
  fs::create_directories(out_dir);
  InferResult res;
  res.index = sel.index;
  res.score = static_cast<double>(sel.score);
  res.frames = rec.frames;
  nlohmann::json j;
  j["expression"] = expression;
  j["score"] = res.score;
  j["sequence"] = sel.index;
  for (int t = 0; t < rec.frames; ++t) {
    write_pbm(out_dir / frame_name("mask", t, "pbm"),
              std::span<const std::uint8_t>(sel.masks.data() + rec.frame_pixels() * t, rec.frame_pixels()), rec.height, rec.width);
    const auto& b = sel.boxes[t];
    res.boxes.push_back({double(b[0]), double(b[1]), double(b[2]), double(b[3])});
    res.probs.push_back(static_cast<double>(sel.probs[t]));
  }
  j["boxes"] = res.boxes;
  j["probs"] = res.probs;
  write_text(out_dir / "result.json", j.dump(2) + "\n");
  return res;
}

// ----------------------------------------------------------------- ablation

struct AblationRow {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
  double reference = 0;  // published J&F, percent
};

/// Component grid, then (optionally) fusion / text-source / ratio variants.
inline std::vector<AblationRow> ablation_rows(bool variants) {
  const std::string f = "false", t = "true";
  std::vector<AblationRow> rows = {
      {"baseline", {{"model.vewl_enabled", f}, {"model.lewv_enabled", f}, {"model.ifi_enabled", f}}, 54.0},
      {"+VEwL", {{"model.vewl_enabled", t}, {"model.lewv_enabled", f}, {"model.ifi_enabled", f}}, 55.8},
      {"+LEwV", {{"model.vewl_enabled", f}, {"model.lewv_enabled", t}, {"model.ifi_enabled", f}}, 55.1},
      {"+BVLIM", {{"model.vewl_enabled", t}, {"model.lewv_enabled", t}, {"model.ifi_enabled", f}}, 57.1},
      {"+IFI", {{"model.vewl_enabled", f}, {"model.lewv_enabled", f}, {"model.ifi_enabled", t}}, 55.3},
      {"full", {}, 59.9},
  };
  if (variants) {
    rows.push_back({"attention_ffn", {{"model.fusion", "attention_ffn"}}, 58.7});
    rows.push_back({"vewl_dynamic", {{"model.vewl_text", "dynamic"}}, 58.0});
    rows.push_back({"ratio_1:2", {{"model.ifi_ratio_decoder", "1"}, {"model.ifi_ratio_ifi", "2"}}, 58.2});
    rows.push_back({"ratio_2:1", {{"model.ifi_ratio_decoder", "2"}, {"model.ifi_ratio_ifi", "1"}}, 57.1});
  }
  return rows;
}

struct AblationResult {
  std::string name;
  std::vector<double> jf;  // one per seed
  double reference = 0;

  double mean() const { return std::accumulate(jf.begin(), jf.end(), 0.0) / static_cast<double>(jf.size()); }
  double min() const { return *std::min_element(jf.begin(), jf.end()); }
  double max() const { return *std::max_element(jf.begin(), jf.end()); }
};

inline std::string ablation_csv(const std::vector<AblationResult>& rs) {
  std::ostringstream os;
  os.precision(6);
  os << "row,seeds,jf_mean,jf_min,jf_max,reference_jf\n";
  for (const auto& r : rs) os << r.name << ',' << r.jf.size() << ',' << r.mean() << ',' << r.min() << ',' << r.max() << ',' << r.reference << '\n';
  return os.str();
}

/// Trains and evaluates every row with ablate.seeds seeds (model seed
/// run.seed + k). Per-run artefacts go to run.output/<row>/seed<k>.
/// `on_run` sees (row, seed index, J&F) after each run.
template <class T>
std::vector<AblationResult> ablate(const RunConfig& base, const std::function<void(const std::string&, int, double)>& on_run = {}) {
  base.validate();
  ensure_dataset(base);
  const auto eval_clips = load_split(base, base.run.eval_split);
  std::vector<AblationResult> results;
  for (const auto& row : ablation_rows(base.ablate.variants)) {
    AblationResult ar{row.name, {}, row.reference};
    for (int k = 0; k < base.ablate.seeds; ++k) {
      RunConfig cfg = base;
      for (const auto& [key, v] : row.overrides) cfg.set(key, v);
      cfg.run.seed = base.run.seed + static_cast<std::uint64_t>(k);
      std::string dir = row.name;
      std::replace(dir.begin(), dir.end(), ':', '-');
      cfg.run.output = (fs::path(base.run.output) / dir / ("seed" + std::to_string(k))).string();
      cfg.run.resume.clear();
      const auto res = train_run<T>(cfg, true);
      const auto model = load_model<T>(read_checkpoint(res.checkpoint));
      const auto report = evaluate(*model, eval_clips, base.run.threads);
      write_text(fs::path(cfg.run.output) / "metrics.json", report.to_json().dump(2) + "\n");
      ar.jf.push_back(report.jf);
      if (on_run) on_run(row.name, k, report.jf);
    }
    results.push_back(std::move(ar));
    write_text(fs::path(base.run.output) / "ablation.csv", ablation_csv(results));
  }
  return results;
}

// -------------------------------------------------------------- IFI bench

struct BenchRow {
  int frames = 0, queries = 0, channels = 0;
  std::int64_t flops = 0;
  double seconds = 0;
};

struct BenchFit {
  double a = 0, b = 0;         // flops ≈ a·C²·TN + b·C·(TN)²
  double max_rel_residual = 0;
};

/// Least-squares fit of the two-term cost model to the FLOP column.
inline BenchFit fit_ifi_cost(const std::vector<BenchRow>& rows) {
  double s11 = 0, s12 = 0, s22 = 0, y1 = 0, y2 = 0;
  for (const auto& r : rows) {
    const double tn = double(r.frames) * r.queries, c = r.channels;
    const double x1 = c * c * tn, x2 = c * tn * tn, y = static_cast<double>(r.flops);
    s11 += x1 * x1;
    s12 += x1 * x2;
    s22 += x2 * x2;
    y1 += x1 * y;
    y2 += x2 * y;
  }
  const double det = s11 * s22 - s12 * s12;
  if (std::abs(det) < 1e-300) throw NumericError("bench fit is singular; vary T and C");
  BenchFit f;
  f.a = (y1 * s22 - y2 * s12) / det;
  f.b = (s11 * y2 - s12 * y1) / det;
  for (const auto& r : rows) {
    const double tn = double(r.frames) * r.queries, c = r.channels;
    const double pred = f.a * c * c * tn + f.b * c * tn * tn;
    f.max_rel_residual = std::max(f.max_rel_residual, std::abs(pred - double(r.flops)) / double(r.flops));
  }
  return f;
}

/// FLOPs and forward wall time of one IFI layer per (T, C).
inline std::vector<BenchRow> bench_ifi(const RunConfig& cfg, bool time_it = true) {
  std::vector<BenchRow> rows;
  for (int c : parse_int_list("bench.channels", cfg.bench.channels))
    for (int Tn = cfg.bench.t_min; Tn <= cfg.bench.t_max; ++Tn) {
      BenchRow r{Tn, cfg.bench.queries, c, 0, 0};
      ModelConfig mc = cfg.model;
      mc.channels = c;
      mc.ffn_dim = 2 * c;
      r.flops = ifi_flop_count(Tn, r.queries, c, mc.heads, mc.ffn_dim);
      if (time_it) {
        ParamStore<float> ps;
        Rng rng(cfg.run.seed);
        const auto layer = IfiLayer<float>::create(ps, "bench", mc, rng);
        Tensor<float> x({Tn, r.queries, c});
        for (auto& v : x.vec()) v = static_cast<float>(rng.normal());
        InstanceEmbeddings<float> q{constant(x), 1, Tn, r.queries, QueryLayout::FrameIndependent};
        NoGradGuard ng;
        ifi_layer(q, layer);  // warm-up
        const auto t0 = std::chrono::steady_clock::now();
        for (int k = 0; k < cfg.bench.repeats; ++k) ifi_layer(q, layer);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / cfg.bench.repeats;
      }
      rows.push_back(r);
    }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows, const BenchFit& fit) {
  std::ostringstream os;
  os.precision(8);
  os << "frames,queries,channels,flops,fit_flops,seconds\n";
  for (const auto& r : rows) {
    const double tn = double(r.frames) * r.queries, c = r.channels;
    os << r.frames << ',' << r.queries << ',' << r.channels << ',' << r.flops << ',' << fit.a * c * c * tn + fit.b * c * tn * tn << ','
       << r.seconds << '\n';
  }
  return os.str();
}

}  // namespace bifit
