// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.
//
//   acceptance [--criteria 1,2,...] [--workdir DIR]

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "bifit/harness.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "metric_oracle.hpp"

using namespace bifit;
using namespace bifit::testkit;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig tiny_model() { return tiny_config(); }

RunConfig shipped(const fs::path& workdir, const char* name) {
  RunConfig c = RunConfig::from_ini(fs::path(BIFIT_SOURCE_DIR) / "configs" / name);
  c.run.dataset = (workdir / "data").string();
  return c;
}

// ------------------------------------------------------------------ 1

Outcome gradient_check() {
  const auto t0 = Clock::now();
  DataConfig dc;
  dc.frames = 2;
  const ClipRecord rec = generate_split(dc, "gradcheck", 1).front();
  const auto clip = rec.clip<double>();
  const auto gt = rec.ground_truth<double>(4);
  const std::vector<int> words{0, 3, 7};  // "the red square"
  BifitModel<double> model(tiny_model(), 5);
  // Perturb every parameter away from its structured initial value so that
  // zero-initialized biases and identity norms are exercised too.
  Rng jitter(6);
  for (auto& [_, p] : model.params().entries())
    for (auto& v : p.mutable_value().vec()) v += 0.05 * jitter.normal();
  const TrainingObjective obj{LossWeights{}, true, true};
  auto f = [&] { return objective(model.forward(clip, words, true), gt, obj); };

  Rng pick(7);
  double worst = 0;
  std::string worst_name;
  int groups = 0, probes = 0, failing = 0;
  for (auto& [name, p] : model.params().entries()) {
    const auto r = check_leaf(p, f, 3, 1e-6, &pick);
    ++groups;
    probes += r.checked;
    failing += !r.ok(1e-4);
    if (!r.ok(0) && r.rel_error > worst) {
      worst = r.rel_error;
      worst_name = name;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failing == 0 && secs < 120;
  o.detail = fmt("gradient check: %d parameter groups (%d failing), %d probes, max rel err %.2e (%s), %.1f s", groups, failing,
                 probes, worst, worst_name.c_str(), secs);
  return o;
}

// ------------------------------------------------------------------ 2

Outcome softmax_rows() {
  long long rows = 0;
  double worst_sum = 0, most_negative = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + trial);
    ModelConfig cfg = tiny_model();
    cfg.decoder_layers = 2;
    cfg.queries = rng.uniform_int(1, 3);
    cfg.fusion = trial % 2 ? Fusion::AttentionFfn : Fusion::AttentionMultiply;
    cfg.vewl_text = trial % 3 ? VewlText::Fixed : VewlText::Dynamic;
    BifitModel<double> model(cfg, 2000 + trial);
    const int T = rng.uniform_int(1, 3), L = rng.uniform_int(1, 6);
    Tensor<double> frames({T, 64, 64, 3});
    for (auto& v : frames.vec()) v = 3 * rng.normal();
    std::vector<int> words;
    for (int i = 0; i < L; ++i) words.push_back(rng.uniform_int(0, cfg.vocab_size - 1));
    AttentionLog<double> log;
    {
      AttentionLogScope<double> scope(log);
      NoGradGuard ng;
      model.forward(VideoClip<double>{frames}, words);
    }
    for (const auto& w : log.weights) {
      const int m = w.dim(0), k = w.dim(1);
      for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < k; ++j) {
          s += w.at(i, j);
          most_negative = std::min(most_negative, w.at(i, j));
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1));
        ++rows;
      }
    }
  }
  Outcome o;
  o.pass = rows > 0 && worst_sum <= 1e-6 && most_negative >= 0;
  o.detail = fmt("softmax rows: %lld rows over 100 trials, max |sum-1| %.2e, min weight %.2e", rows, worst_sum, most_negative);
  return o;
}

// ------------------------------------------------------------------ 3

FeaturePyramid<double> random_pyramid(int frames, int C, std::uint64_t seed) {
  FeaturePyramid<double> p;
  p.frames = frames;
  p.channels = C;
  const int sides[4] = {4, 2, 1, 1};
  for (int i = 0; i < 4; ++i) {
    p.sizes.push_back({sides[i], sides[i], 8 << i});
    p.levels.push_back(random_var<double>({frames * sides[i] * sides[i], C}, seed + i));
  }
  return p;
}

Outcome ifi_contracts() {
  const ModelConfig cfg = tiny_model();
  ParamStore<double> ps;
  Rng rng(31);
  const auto layer = IfiLayer<double>::create(ps, "ifi", cfg, rng);
  const int T = 4, N = 3, C = cfg.channels;

  // Reshape round trip.
  Tensor<double> x({T, N, C});
  for (auto& v : x.vec()) v = rng.normal();
  InstanceEmbeddings<double> e{Var<double>(x, false), 1, T, N, QueryLayout::FrameIndependent};
  const auto back = e.unfold().fold();
  const bool round_trip = back.q.value().vec() == x.vec() && back.q.shape() == x.shape() && back.layout == e.layout;

  // Permutation equivariance over the T*N axis.
  double equiv = 0;
  std::mt19937 g(9);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> perm(T * N);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g);
    Var<double> xp = reshape(gather_rows(reshape(e.q, {T * N, C}), perm), {T, N, C});
    const auto a = ifi_layer(e, layer);
    const auto b = ifi_layer(InstanceEmbeddings<double>{xp, 1, T, N, QueryLayout::FrameIndependent}, layer);
    const auto ap = gather_rows(reshape(a.q, {T * N, C}), perm).value();
    equiv = std::max(equiv, max_abs_diff(ap, b.q.value().reshaped({T * N, C})));
  }

  // Masking probe: change frame 2's features and look at frames 0 and 1.
  Tensor<double> st({1, C});
  for (auto& v : st.vec()) v = rng.normal();
  const Var<double> sentence(st, false);
  const auto p = random_pyramid(3, C, 41);
  auto moved = p;
  for (std::size_t l = 0; l < moved.levels.size(); ++l) {
    Tensor<double> v = moved.levels[l].value();
    const int P = moved.sizes[l].pixels();
    for (int i = 2 * P * C; i < 3 * P * C; ++i) v[i] += 0.5;
    moved.levels[l] = Var<double>(v, false);
  }
  bool probe_off = false, probe_on = false;
  for (bool ifi : {false, true}) {
    ModelConfig mc = cfg;
    mc.decoder_layers = 2;
    mc.ifi_enabled = ifi;
    ParamStore<double> ps2;
    Rng r2(43);
    const auto enc = TransformerEncoder<double>::create(ps2, mc, r2);
    const auto dec = TransformerDecoder<double>::create(ps2, mc, r2);
    auto run = [&](const FeaturePyramid<double>& pyr) {
      return decode(init_queries(sentence, mc.queries, pyr.frames, dec.query_embed), encode_multiscale(pyr, enc), dec).back();
    };
    const auto a = run(p), b = run(moved);
    const auto va = a.q.value().reshaped({3 * mc.queries, C}), vb = b.q.value().reshaped({3 * mc.queries, C});
    const bool unchanged = rows_of(va, 0, 2 * mc.queries) == rows_of(vb, 0, 2 * mc.queries);
    (ifi ? probe_on : probe_off) = ifi ? !unchanged : unchanged;
  }
  Outcome o;
  o.pass = round_trip && equiv <= 1e-6 && probe_off && probe_on;
  o.detail = fmt("IFI contracts: round trip %s, permutation max diff %.2e, frames isolated without IFI %s, coupled with IFI %s",
                 round_trip ? "bit-exact" : "DIFFERS", equiv, probe_off ? "yes" : "NO", probe_on ? "yes" : "NO");
  return o;
}

// ------------------------------------------------------------------ 4

Outcome matching_oracle() {
  Rng rng(77);
  const LossWeights w;
  int agree = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int T = rng.uniform_int(1, 4), N = rng.uniform_int(1, 6), H = 3, W = 3;
    GroundTruthSequence<double> gt;
    gt.height = H;
    gt.width = W;
    for (int t = 0; t < T; ++t) {
      gt.visible.push_back(rng.uniform() < 0.75);
      gt.boxes.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)});
      for (int i = 0; i < H * W; ++i) gt.masks.push_back(gt.visible.back() && rng.uniform() < 0.4);
    }
    std::vector<PredictionSequence<double>> preds(N);
    for (auto& p : preds) {
      p.height = H;
      p.width = W;
      for (int t = 0; t < T; ++t) {
        p.probs.push_back(rng.uniform(0.01, 0.99));
        p.boxes.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6)});
        for (int i = 0; i < H * W; ++i) p.logits.push_back(3 * rng.normal());
      }
    }
    if (N > 2 && trial % 4 == 0) {
      preds[N - 1] = preds[1];  // exact tie: the lower index must win
      ++ties;
    }
    // Exhaustive enumeration, costs summed frame by frame from the per-term
    // definitions.
    int best = -1;
    double best_cost = 0;
    for (int n = 0; n < N; ++n) {
      double c = 0;
      for (int t = 0; t < T; ++t) {
        const auto& p = preds[n];
        c += w.cls * focal_loss(p.probs[t], gt.visible[t] ? 1 : 0);
        if (!gt.visible[t]) continue;
        c += w.l1 * l1_box_loss(p.boxes[t], gt.boxes[t]) + w.giou * giou_loss(p.boxes[t], gt.boxes[t]);
        c += w.dice * dice_loss(p.frame_logits(t), gt.mask(t)) + w.focal * mask_focal_loss(p.frame_logits(t), gt.mask(t));
      }
      c /= T;
      if (best < 0 || c < best_cost) {
        best = n;
        best_cost = c;
      }
    }
    agree += select_positive(gt, preds, w) == best;
  }
  Outcome o;
  o.pass = agree == 1000;
  o.detail = fmt("matching oracle: %d/1000 instances agree with exhaustive enumeration (%d with exact ties)", agree, ties);
  return o;
}

// ------------------------------------------------------------------ 5

Outcome loss_values() {
  const double focal = focal_loss(0.5, 1);
  const double giou = giou_loss<double>({0.25, 0.25, 0.5, 0.5}, {0.75, 0.75, 0.5, 0.5});
  const std::vector<double> logits{40, -40, -40, -40};
  const std::vector<std::uint8_t> target{0, 1, 0, 0};
  const double dice = dice_loss<double>(logits, target);
  Outcome o;
  o.pass = std::abs(focal - 0.04332) <= 1e-5 && std::abs(giou - 1.5) <= 1e-6 && std::abs(dice - 2.0 / 3) <= 1e-6;
  o.detail = fmt("loss values: focal(0.5,1) %.6f, GIoU corner pair %.7f, dice 2x2 %.7f", focal, giou, dice);
  return o;
}

// ------------------------------------------------------------------ 6

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  const auto s = check_all_3x3_pairs();
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = s.mismatches == 0 && secs < 60;
  o.detail = fmt("metric oracle: %lld 3x3 mask pairs, %lld mismatches%s%s, %.1f s", s.pairs, s.mismatches,
                 s.mismatches ? " first: " : "", s.first_mismatch.c_str(), secs);
  return o;
}

// ------------------------------------------------------------------ 7

Outcome overfit(const fs::path& workdir) {
  const auto t0 = Clock::now();
  RunConfig cfg = shipped(workdir, "overfit.ini");
  cfg.run.output = (workdir / "overfit").string();
  fs::remove_all(cfg.run.output);
  const MetricsReport r = with_precision(cfg.run.precision, [&]<class T>() {
    const auto res = train_run<T>(cfg, true);
    const auto model = load_model<T>(read_checkpoint(res.checkpoint));
    return evaluate(*model, load_split(cfg, cfg.run.eval_split, cfg.run.train_subset), cfg.run.threads);
  });
  write_text(fs::path(cfg.run.output) / "metrics.json", r.to_json().dump(2) + "\n");
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = r.jf >= 0.80 && secs < 1800 && r.samples == 20;
  o.detail = fmt("overfit: J&F %.4f (J %.4f, F %.4f) on %d training clips after %d steps, target >= 0.80, %.0f s", r.jf, r.j, r.f,
                 r.samples, cfg.optim.steps, secs);
  return o;
}

// ------------------------------------------------------------------ 8

Outcome ablation(const fs::path& workdir) {
  const auto t0 = Clock::now();
  RunConfig cfg = shipped(workdir, "desk.ini");
  cfg.run.output = (workdir / "ablation").string();
  cfg.ablate.seeds = 3;
  cfg.ablate.variants = false;
  const auto results = with_precision(cfg.run.precision, [&]<class T>() {
    return ablate<T>(cfg, [](const std::string& row, int seed, double jf) {
      std::fprintf(stderr, "  ablation %-8s seed %d  J&F %.4f\n", row.c_str(), seed, jf);
    });
  });
  std::map<std::string, double> m;
  for (const auto& r : results) m[r.name] = r.mean();
  const double base = m.at("baseline"), full = m.at("full");
  bool ordered = true;
  std::ostringstream rows;
  rows.precision(4);
  rows << std::fixed;
  for (const char* v : {"+VEwL", "+LEwV", "+BVLIM", "+IFI"}) {
    ordered = ordered && full >= m.at(v) && m.at(v) >= base;
    rows << ' ' << v << ' ' << m.at(v);
  }
  Outcome o;
  o.pass = ordered && full - base >= 0.02;
  o.detail = fmt("ablation (3 seeds, val split): baseline %.4f,%s, full %.4f; full-baseline %+.4f (need >= 0.02), ordering %s, %.0f s",
                 base, rows.str().c_str(), full, full - base, ordered ? "holds" : "VIOLATED", seconds_since(t0));
  return o;
}

// ------------------------------------------------------------------ 9

Outcome bench_fit() {
  RunConfig cfg;
  cfg.bench.t_min = 2;
  cfg.bench.t_max = 16;
  cfg.bench.queries = 5;
  cfg.bench.channels = "32,64,128";
  const auto rows = bench_ifi(cfg, false);
  const auto fit = fit_ifi_cost(rows);
  Outcome o;
  o.pass = fit.max_rel_residual < 0.10;
  o.detail = fmt("complexity fit: %zu (T, C) points, flops ~ %.3f*C^2*TN + %.3f*C*(TN)^2, max rel residual %.4f", rows.size(), fit.a,
                 fit.b, fit.max_rel_residual);
  return o;
}

// ----------------------------------------------------------------- 10

Outcome determinism(const fs::path& workdir) {
  RunConfig cfg;
  cfg.model = tiny_model();
  cfg.data.frames = 2;
  cfg.data.train_clips = 4;
  cfg.data.val_clips = 3;
  cfg.run.precision = 64;
  cfg.run.dataset = (workdir / "tiny_data").string();
  cfg.optim.steps = 5;
  cfg.optim.batch_clips = 2;
  for (const char* run : {"twice_a", "twice_b"}) {
    cfg.run.output = (workdir / run).string();
    fs::remove_all(cfg.run.output);
    train_run<double>(cfg, true);
  }
  // Checkpoints embed the output directory through the config; compare the
  // parameter tensors instead of raw bytes.
  const auto a = read_checkpoint(workdir / "twice_a" / checkpoint_name(5)), b = read_checkpoint(workdir / "twice_b" / checkpoint_name(5));
  bool same = a.tensors.size() == b.tensors.size();
  for (std::size_t i = 0; same && i < a.tensors.size(); ++i)
    same = a.tensors[i].first == b.tensors[i].first && a.tensors[i].second.values == b.tensors[i].second.values;

  // Round trip: metrics of the in-memory model against the reloaded one, at
  // both precisions.
  bool round_trip = true;
  const auto val = load_split(cfg, "val");
  for (int precision : {64, 32}) {
    cfg.run.precision = precision;
    with_precision(precision, [&]<class T>() {
      ensure_dataset(cfg);
      const auto clips = prepare<T>(load_split(cfg, "train"));
      Trainer<T> tr(cfg);
      tr.run(clips);
      const auto path = workdir / fmt("roundtrip_%d.bin", precision);
      tr.save(path);
      const auto loaded = load_model<T>(read_checkpoint(path));
      round_trip = round_trip && evaluate(tr.model(), val).to_json() == evaluate(*loaded, val).to_json();
      return 0;
    });
  }
  Outcome o;
  o.pass = same && round_trip;
  o.detail = fmt("determinism: two 64-bit runs %s, checkpoint round trip metrics %s", same ? "bit-identical" : "DIFFER",
                 round_trip ? "identical at 32 and 64 bits" : "DIFFER");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BIFIT acceptance checks"};
  std::string criteria = "1,2,3,4,5,6,7,8,9,10";
  std::string workdir = "acceptance_work";
  app.add_option("--criteria", criteria, "comma-separated criterion numbers");
  app.add_option("--workdir", workdir, "scratch directory for datasets and runs");
  CLI11_PARSE(app, argc, argv);

  const fs::path wd = fs::absolute(workdir);
  fs::create_directories(wd);
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> all = {
      {1, {"gradient correctness", gradient_check}},
      {2, {"attention invariants", softmax_rows}},
      {3, {"IFI contracts", ifi_contracts}},
      {4, {"matching oracle", matching_oracle}},
      {5, {"loss unit values", loss_values}},
      {6, {"metric oracle", metric_oracle}},
      {7, {"overfit run", [&] { return overfit(wd); }}},
      {8, {"ablation direction", [&] { return ablation(wd); }}},
      {9, {"complexity claim", bench_fit}},
      {10, {"determinism and persistence", [&] { return determinism(wd); }}},
  };
  std::vector<int> chosen;
  try {
    chosen = parse_int_list("--criteria", criteria);
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << e.what() << "\n";
    return 2;
  }
  int failed = 0;
  for (int c : chosen) {
    auto it = all.find(c);
    if (it == all.end()) {
      std::cerr << "E_CONFIG: no criterion " << c << "\n";
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string(it->second.first) + ": exception: " + e.what()};
    }
    std::printf("%s %2d %s\n", o.pass ? "PASS" : "FAIL", c, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
