// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit code 1
// when any criterion fails. `--only 3,4` runs a subset.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sgdc/bench.hpp"
#include "sgdc/gradsuite.hpp"
#include "sgdc/nn.hpp"
#include "sgdc/objective.hpp"
#include "sgdc/trainer.hpp"

using namespace sgdc;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Same split seeding as `sgdc gen-data`.
Dataset split(const SynthConfig& c, int which, int count, const std::string& prefix) {
  return Dataset{c, gen_samples(c, mix_seed(c.seed, static_cast<std::uint64_t>(which)), count, prefix)};
}

Outcome grad_oracle() {
  const auto t0 = Clock::now();
  const auto entries = run_grad_suite(0);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_op;
  std::set<std::string> ops;
  bool sgdc_full = false, all_ok = true;
  for (const auto& e : entries) {
    ops.insert(e.op);
    sgdc_full = sgdc_full || e.op.starts_with("sgdc_forward");
    all_ok = all_ok && e.max_rel_error < kGradTolerance;
    if (worst_op.empty() || e.max_rel_error > worst) {
      worst = e.max_rel_error;
      worst_op = e.op + "/" + e.input;
    }
  }
  const bool ok = all_ok && sgdc_full && secs < 120;
  return {ok, std::to_string(entries.size()) + " checks over " + std::to_string(ops.size()) + " ops, worst " +
                  fmt("%.2e", worst) + " (" + worst_op + "), " + fmt("%.1f s", secs)};
}

Outcome dynconv_equivalence() {
  Rng r(2024);
  double worst_f = 0, worst_d = 0;
  int trials = 0;
  for (; trials < 120; ++trials) {
    const int g = r.range(1, 2), k = trials % 2 ? 7 : 3;
    const Shape xs{r.range(1, 2), g * r.range(1, 4), r.range(1, 12), r.range(1, 12)};
    const Shape ws{xs[0], g, k * k, xs[2], xs[3]};
    const auto xd = oracle::randn<double>(r, xs), wd = oracle::randn<double>(r, ws);
    const auto ref = oracle::svconv(xd, wd, g);
    worst_d = std::max(worst_d, oracle::max_abs_diff(nn::kernels::svconv_unfold(xd, wd, g), ref));
    worst_d = std::max(worst_d, oracle::max_abs_diff(nn::kernels::svconv_naive(xd, wd, g), ref));
    const auto xf = xd.cast<float>(), wf = wd.cast<float>();
    worst_f = std::max(worst_f, oracle::max_abs_diff(nn::kernels::svconv_unfold(xf, wf, g), nn::kernels::svconv_naive(xf, wf, g)));
    // the differentiable op must route through the same paths
    Tape<double> t;
    const auto fast = nn::spatially_variant_conv(t.constant(xd), t.constant(wd), g, nn::SvConvPath::kUnfold).value();
    worst_d = std::max(worst_d, oracle::max_abs_diff(fast, ref));
  }
  return {worst_f < 1e-6 && worst_d < 1e-12,
          std::to_string(trials) + " trials, max |diff| f32 " + fmt("%.2e", worst_f) + ", f64 " + fmt("%.2e", worst_d)};
}

Outcome modulation_closed_form() {
  bool ok = true;
  int checked = 0;
  for (auto kind : {nn::OperatorKind::kSobel, nn::OperatorKind::kScharr, nn::OperatorKind::kLaplacian}) {
    for (double c : {0.0, 1.0, -0.37, 0.731, 12.5, -1e3}) {
      Tape<float> tf;
      const auto yf = nn::edge_modulation(tf.constant(Tensor<float>({1, 2, 6, 6}, static_cast<float>(c))),
                                          nn::fixed_operator(tf, kind)).value();
      for (float v : yf.data()) ok = ok && v == 0.5f * static_cast<float>(c);
      Tape<double> td;
      const auto yd = nn::edge_modulation(td.constant(Tensor<double>({1, 2, 6, 6}, c)), nn::fixed_operator(td, kind)).value();
      for (double v : yd.data()) ok = ok && v == 0.5 * c;
      checked += 2;
    }
  }
  // vertical unit step: |Gx| = 4 on both columns next to the edge, 0 away from it
  Tensor<double> step({1, 1, 8, 8});
  for (int y = 0; y < 8; ++y)
    for (int x = 4; x < 8; ++x) step.at(0, 0, y, x) = 1.0;
  Tape<double> t;
  const auto s = nn::structural_response(t.constant(step), nn::fixed_operator(t, nn::OperatorKind::kSobel)).value();
  double worst = 0;
  for (int y = 0; y < 8; ++y) {
    worst = std::max({worst, std::abs(s.at(0, 0, y, 3) - 4.0), std::abs(s.at(0, 0, y, 4) - 4.0)});
    ok = ok && s.at(0, 0, y, 0) == 0.0 && s.at(0, 0, y, 7) == 0.0;
  }
  ok = ok && worst < 1e-9;
  return {ok, std::to_string(checked) + " constant maps give 0.5*c exactly; sobel step |r-4| = " + fmt("%.1e", worst)};
}

Outcome metric_oracles() {
  auto from_bits = [](unsigned bits) {
    BinaryMap m(3, 3);
    for (int i = 0; i < 9; ++i) m.px[static_cast<std::size_t>(i)] = (bits >> i) & 1u;
    return m;
  };
  long mismatches = 0;
  for (unsigned a = 0; a < 512; ++a)
    for (unsigned b = 0; b < 512; ++b) {
      const auto pa = from_bits(a), pb = from_bits(b);
      if (metric_dice(pa, pb) != oracle::dice(pa, pb) || metric_iou(pa, pb) != oracle::iou(pa, pb)) ++mismatches;
    }
  Rng r(7);
  int hd_bad = 0;
  for (int i = 0; i < 200; ++i) {
    const auto p = i % 2 ? oracle::random_map(r, 16, 16, r.uniform(0.05, 0.7)) : oracle::random_rects(r, 16, 16, r.range(0, 4));
    const auto g = oracle::random_rects(r, 16, 16, r.range(0, 4));
    const double h = hd95(p, g), ref = oracle::hd95(p, g);
    if (std::abs(h - ref) > 1e-12 * std::max(1.0, ref)) ++hd_bad;
  }
  auto rows = [](std::initializer_list<const char*> rs) {
    BinaryMap m(static_cast<int>(rs.size()), static_cast<int>(std::string(*rs.begin()).size()));
    int y = 0;
    for (const char* s : rs) {
      for (int x = 0; x < m.w; ++x) m.at(y, x) = s[x] == '#';
      ++y;
    }
    return m;
  };
  const auto three = rows({"##...#", "##...#", "......", "..##.."});
  const bool pq_ok = pq_binary(three, three) == 1.0 &&
                     pq_binary(rows({"##....", "##...."}), rows({"....##", "....##"})) == 0.0 &&
                     pq_binary(rows({"##....", "##...."}), rows({"##..##", "##..##"})) == 2.0 / 3.0;
  return {mismatches == 0 && hd_bad == 0 && pq_ok,
          "262144 3x3 pairs: " + std::to_string(mismatches) + " mismatches; 200 HD95 pairs: " + std::to_string(hd_bad) +
              " mismatches; PQ hand cases " + (pq_ok ? "exact" : "wrong")};
}

Outcome fold_softmax_invariants() {
  Rng r(11);
  std::size_t fold_locs = 0, fold_bad = 0, sm_locs = 0, sm_bad = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int k = std::array{1, 3, 7}[trial % 3];
    const auto x = oracle::randn<double>(r, {r.range(1, 2), r.range(1, 4), r.range(1, 10), r.range(1, 10)});
    Tape<double> t;
    const auto y = nn::fold(nn::unfold(t.constant(x), k, k / 2), k, k / 2, x.dim(2), x.dim(3), true).value();
    for (std::size_t i = 0; i < x.numel(); ++i) fold_bad += y[i] != x[i];
    fold_locs += x.numel();

    const int g = r.range(1, 2), kk = trial % 2 ? 49 : 9, h = r.range(2, 8), w = r.range(2, 8);
    const auto s = nn::softmax_kernel(t.constant(oracle::randn<double>(r, {2, g, kk, h, w}, 6.0))).value();
    for (int b = 0; b < 2 * g; ++b)
      for (int p = 0; p < h * w; ++p) {
        double sum = 0;
        bool positive = true;
        for (int q = 0; q < kk; ++q) {
          const double v = s[(static_cast<std::size_t>(b) * kk + q) * h * w + p];
          positive = positive && v > 0;
          sum += v;
        }
        sm_bad += !(positive && std::abs(sum - 1.0) < 1e-6);
        ++sm_locs;
      }
  }
  return {fold_locs >= 1000 && sm_locs >= 1000 && fold_bad == 0 && sm_bad == 0,
          "fold(unfold) exact at " + std::to_string(fold_locs - fold_bad) + "/" + std::to_string(fold_locs) +
              " locations; softmax normalised at " + std::to_string(sm_locs - sm_bad) + "/" + std::to_string(sm_locs)};
}

Outcome overfit() {
  SynthConfig dc;
  dc.seed = 11;
  const auto data = split(dc, 1, 4, "of_");
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_iters = 300;
  tc.augment = false;
  tc.eval_every = 0;
  tc.lr0 = 1e-3;
  const auto t0 = Clock::now();
  auto net = build_variant<float>(NetConfig{}, tc.seed);
  const auto res = train(net, data, tc);
  const auto m = evaluate(net, data).report;
  const double secs = seconds_since(t0);
  return {m.dice >= 0.99 && secs < 300,
          "train-batch Dice " + fmt("%.4f", m.dice) + " after " + std::to_string(res.history.size()) + " iterations (lr0 1e-3), " +
              fmt("%.0f s", secs)};
}

Outcome generalization() {
  SynthConfig dc;
  dc.seed = 1;
  const auto tr = split(dc, 1, 200, "train_"), va = split(dc, 2, 50, "val_"), te = split(dc, 3, 50, "test_");
  TrainConfig tc;  // defaults: 30 epochs, batch 8, lr0 1e-4, poly 0.9, augmentation on
  tc.eval_every = 0;
  const auto t0 = Clock::now();
  auto net = build_variant<float>(NetConfig{}, tc.seed);
  train(net, tr, tc);
  const auto mt = evaluate(net, te).report;
  const auto mv = evaluate(net, va).report;
  const double secs = seconds_since(t0);
  return {mt.dice >= 0.90 && mt.iou >= 0.82,
          "test Dice " + fmt("%.4f", mt.dice) + " IoU " + fmt("%.4f", mt.iou) + " HD95 " + fmt("%.3f", mt.hd95) +
              " (val Dice " + fmt("%.4f", mv.dice) + "), " + fmt("%.0f s", secs)};
}

Outcome ablation_directions() {
  SynthConfig dc;
  dc.seed = 1;
  const auto tr = split(dc, 1, 200, "train_"), te = split(dc, 3, 50, "test_");
  struct Arm {
    std::string name;
    std::function<void(NetConfig&)> apply;
    double dice = 0, hd95 = 0;
  };
  std::vector<Arm> arms{{"full", [](NetConfig&) {}},
                        {"lambda=0", [](NetConfig& c) { c.lambda = 0.0; }},
                        {"no_dynamic", [](NetConfig& c) { c.set_variant(SgdcVariant::kNoDynamic); }}};
  const int seeds = 3;
  for (auto& arm : arms) {
    for (int s = 0; s < seeds; ++s) {
      NetConfig nc;
      arm.apply(nc);
      TrainConfig tc;
      tc.seed = static_cast<std::uint64_t>(s);
      tc.eval_every = 0;
      auto net = build_variant<float>(nc, tc.seed);
      train(net, tr, tc);
      const auto m = evaluate(net, te).report;
      arm.dice += m.dice / seeds;
      arm.hd95 += m.hd95 / seeds;
      std::printf("  %-10s seed=%d dice=%.4f hd95=%.3f\n", arm.name.c_str(), s, m.dice, m.hd95);
      std::fflush(stdout);
    }
  }
  const bool hd_ok = arms[0].hd95 <= arms[1].hd95;
  const bool dice_ok = arms[0].dice >= arms[2].dice;

  // guidance invariance at network level: perturb the guidance head
  Rng r(5);
  const auto img = oracle::uniform<float>(r, {1, 3, 64, 64}, 0.0, 1.0);
  auto invariant = [&](SgdcVariant v) {
    NetConfig nc;
    nc.set_variant(v);
    auto net = build_variant<float>(nc, 3);
    auto run = [&] {
      Tape<float> t;
      Binder<float> b(t, net.store, true);
      const auto o = net_forward(b, t.constant(img), net.params, nc);
      return std::vector<Tensor<float>>{o.o[0].value(), o.o[1].value(), o.o[2].value()};
    };
    const auto before = run();
    for (auto& w : net.store.value(net.params.sge.head_guide.weight).storage()) w += static_cast<float>(r.normal());
    return before == run();
  };
  const bool self_inv = invariant(SgdcVariant::kSelfGuidance);
  const bool full_dep = !invariant(SgdcVariant::kFull);

  std::ostringstream d;
  d << "HD95 full " << fmt("%.3f", arms[0].hd95) << " vs lambda=0 " << fmt("%.3f", arms[1].hd95) << "; Dice full "
    << fmt("%.4f", arms[0].dice) << " vs no_dynamic " << fmt("%.4f", arms[2].dice) << "; self_guidance invariant "
    << (self_inv ? "yes" : "no") << ", full depends on guidance " << (full_dep ? "yes" : "no");
  return {hd_ok && dice_ok && self_inv && full_dep, d.str()};
}

Outcome determinism() {
  SynthConfig dc;
  dc.image_size = 32;
  dc.seed = 3;
  const auto data = split(dc, 1, 8, "d_");
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_iters = 6;
  tc.eval_every = 0;
  tc.seed = 9;
  NetConfig nc;
  nc.stage_channels = {8, 16, 16, 32};
  auto run = [&] {
    auto net = build_variant<float>(nc, tc.seed);
    const auto res = train(net, data, tc);
    return std::pair{history_csv(res.history), std::move(net)};
  };
  auto [ha, net] = run();
  const auto [hb, unused] = run();
  const bool same_history = ha == hb;

  const auto before = evaluate(net, data);
  const auto dir = std::filesystem::temp_directory_path() / "sgdc_acceptance_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, net, tc.max_iters, nlohmann::json::object());
  const auto ck = load_checkpoint(dir);
  const auto after = evaluate(ck.net, data);
  std::filesystem::remove_all(dir);
  const bool same_report = format_report(before.report) == format_report(after.report) &&
                           per_sample_csv(before) == per_sample_csv(after);
  return {same_history && same_report, std::string("loss history ") + (same_history ? "bit-identical" : "differs") +
                                           "; checkpoint round trip report " + (same_report ? "identical" : "differs")};
}

Outcome bench() {
  const auto b = bench_svconv({1, 64, 64, 64}, 7, 1, 3);
  return {b.speedup() >= 3.0 && b.max_abs_diff < 1e-4,
          "k=7 (1,64,64,64): naive " + fmt("%.1f ms", b.naive_ms) + ", fast " + fmt("%.1f ms", b.fast_ms) + ", speedup " +
              fmt("%.2fx", b.speedup())};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle", grad_oracle},
      {"dynamic-conv equivalence", dynconv_equivalence},
      {"edge modulation closed form", modulation_closed_form},
      {"metric oracles", metric_oracles},
      {"fold/unfold and softmax invariants", fold_softmax_invariants},
      {"overfit sanity", overfit},
      {"generalization", generalization},
      {"ablation directions", ablation_directions},
      {"determinism and persistence", determinism},
      {"bench speedup", bench},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
