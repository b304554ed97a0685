// sgdc: data generation, training, evaluation, inference, ablations,
// gradient checks and kernel benchmarks.
#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "sgdc/bench.hpp"
#include "sgdc/config.hpp"
#include "sgdc/errors.hpp"
#include "sgdc/gradsuite.hpp"
#include "sgdc/tnsr.hpp"
#include "sgdc/trainer.hpp"

namespace fs = std::filesystem;
using namespace sgdc;

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "manifest.json")) return p;
  if (fs::exists(p / "best" / "manifest.json")) return p / "best";
  if (fs::exists(p / "last" / "manifest.json")) return p / "last";
  throw IoError(p.string() + ": no checkpoint manifest found");
}

void check_resolution(const Checkpoint& ck, const Dataset& ds) {
  if (ck.run_config.is_object() && ck.run_config.contains("data")) {
    const int want = ck.run_config["data"].value("image_size", ds.config.image_size);
    if (want != ds.config.image_size) {
      throw ConfigError("dataset resolution " + std::to_string(ds.config.image_size) +
                        " does not match the checkpoint's " + std::to_string(want));
    }
  }
  if (ds.config.channels != ck.net.cfg.in_ch) {
    throw ConfigError("dataset has " + std::to_string(ds.config.channels) + " channels, the checkpoint expects " +
                      std::to_string(ck.net.cfg.in_ch));
  }
}

// 8-bit PGM of a single plane, values scaled by 255 / `scale` and clamped.
void write_pgm(const fs::path& path, const float* v, int h, int w, double scale) {
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (int i = 0; i < h * w; ++i) {
    const double s = scale > 0 ? v[i] / scale : 0.0;
    bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0)));
  }
  write_file_atomic(path, bytes);
}

int cmd_gen_data(const std::string& config, const std::string& out, int n_train, int n_val, int n_test) {
  const auto rc = load_run_config(config);
  const std::pair<const char*, int> splits[] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
  std::uint64_t stream = 1;
  for (const auto& [name, count] : splits) {
    if (count < 0) throw ConfigError(std::string("--") + name + " must be >= 0");
    Dataset ds{rc.data, gen_samples(rc.data, mix_seed(rc.data.seed, stream++), count, std::string(name) + "_")};
    write_dataset(ds, fs::path(out) / name);
    std::cout << name << ": " << count << " samples -> " << (fs::path(out) / name).string() << "\n";
  }
  return 0;
}

TrainResult run_training(Network<float>& net, const RunConfig& rc, const fs::path& data, const fs::path& out,
                         bool quiet) {
  const auto train_set = read_dataset(data / "train");
  Dataset val_set;
  TrainOptions opt;
  opt.out_dir = out;
  opt.run_config = nlohmann::json::parse(rc.source);
  if (fs::exists(data / "val" / "manifest.json")) {
    val_set = read_dataset(data / "val");
    if (!val_set.samples.empty()) opt.val = &val_set;
  }
  if (!quiet) {
    opt.on_iter = [](const IterRecord& r) {
      if (r.iter % 25 == 0) {
        std::cerr << "iter " << r.iter << " lr=" << fmt("%.3g", r.lr) << " total=" << fmt("%.4f", r.loss.total)
                  << " edge=" << fmt("%.4f", r.loss.edge) << "\n";
      }
    };
    opt.on_eval = [](const EvalRecord& e) {
      std::cerr << "epoch " << e.epoch << " val dice=" << fmt("%.4f", e.metrics.dice)
                << " iou=" << fmt("%.4f", e.metrics.iou) << " hd95=" << fmt("%.3f", e.metrics.hd95) << "\n";
    };
  }
  return train(net, train_set, rc.train, opt);
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out, bool quiet) {
  const auto rc = load_run_config(config);
  auto net = build_variant<float>(rc.net, rc.train.seed);
  const auto res = run_training(net, rc, data, out, quiet);
  std::cout << "iterations=" << res.max_iter << "\n";
  if (!res.history.empty()) std::cout << "final_loss=" << fmt("%.6f", res.history.back().loss.total) << "\n";
  if (res.best_iter >= 0) std::cout << "best_val_dice=" << fmt("%.6f", res.best_dice) << "\n";
  std::cout << "checkpoint=" << (fs::path(out) / "best").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& csv) {
  const auto ck = load_checkpoint(resolve_checkpoint(ckpt));
  const auto ds = read_dataset(data);
  check_resolution(ck, ds);
  const auto r = evaluate(ck.net, ds);
  std::cout << format_report(r.report);
  if (!csv.empty()) write_text_atomic(csv, per_sample_csv(r));
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image, const std::string& prefix) {
  const auto ck = load_checkpoint(resolve_checkpoint(ckpt));
  auto img = read_tnsr(image).to_float();
  if (img.rank() == 4 && img.dim(0) == 1) img = img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
  if (img.rank() != 3) throw ShapeError(image + ": expected a (C,H,W) image, got " + shape_str(img.shape()));
  const auto p = predict(ck.net, img);
  const int h = p.prob.dim(2), w = p.prob.dim(3);
  write_pgm(prefix + "_pred.pgm", p.prob.ptr(), h, w, 1.0);
  write_pgm(prefix + "_edge.pgm", p.edge.ptr(), h, w, 1.0);
  // guidance: channel-mean magnitude, normalised to its maximum
  const int gc = p.guidance.dim(1), gh = p.guidance.dim(2), gw = p.guidance.dim(3);
  std::vector<float> mag(static_cast<std::size_t>(gh) * gw, 0.f);
  for (int c = 0; c < gc; ++c) {
    for (std::size_t i = 0; i < mag.size(); ++i) mag[i] += std::abs(p.guidance[c * mag.size() + i]) / gc;
  }
  const float mx = *std::max_element(mag.begin(), mag.end());
  write_pgm(prefix + "_guidance.pgm", mag.data(), gh, gw, mx);
  std::cout << prefix << "_pred.pgm\n" << prefix << "_edge.pgm\n" << prefix << "_guidance.pgm\n";
  return 0;
}

struct Arm {
  std::string label;
  std::function<void(NetConfig&)> apply;
};

// "full,no_local,lambda=0,1,3,op=sobel,laplacian": bare values after key=...
// continue that key while they parse for it.
std::vector<Arm> parse_arms(const std::string& text) {
  std::vector<Arm> arms;
  std::string key;
  std::stringstream ss(text);
  std::string tok;
  auto lambda_arm = [](const std::string& v) {
    std::size_t used = 0;
    double l = 0;
    try {
      l = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty() || l < 0) throw ConfigError("bad lambda arm '" + v + "'");
    return Arm{"lambda=" + v, [l](NetConfig& c) {
                 c.lambda = l;
                 c.no_boundary_supervision = false;
               }};
  };
  auto op_arm = [](const std::string& v) {
    const auto op = nn::parse_operator(v);
    return Arm{"op=" + v, [op](NetConfig& c) { c.op = op; }};
  };
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    const auto eq = tok.find('=');
    if (eq != std::string::npos) {
      key = tok.substr(0, eq);
      const auto val = tok.substr(eq + 1);
      if (key == "lambda") arms.push_back(lambda_arm(val));
      else if (key == "op" || key == "operator") arms.push_back(op_arm(val));
      else throw ConfigError("unknown arm key '" + key + "'");
      continue;
    }
    if (key == "lambda" && (std::isdigit(static_cast<unsigned char>(tok[0])) || tok[0] == '.')) {
      arms.push_back(lambda_arm(tok));
      continue;
    }
    if (key == "op") {
      try {
        arms.push_back(op_arm(tok));
        continue;
      } catch (const ConfigError&) {
      }
    }
    key.clear();
    const auto v = parse_variant(tok);
    arms.push_back(Arm{tok, [v](NetConfig& c) { c.set_variant(v); }});
  }
  if (arms.empty()) throw ConfigError("--arms is empty");
  return arms;
}

int cmd_ablate(const std::string& config, const std::string& data, const std::string& arms_text, int seeds,
               const std::string& out, bool quiet) {
  const auto rc = load_run_config(config);
  const auto arms = parse_arms(arms_text);
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  const fs::path dp(data);
  const auto train_set = read_dataset(dp / "train");
  const fs::path held = fs::exists(dp / "test" / "manifest.json") ? dp / "test" : dp / "val";
  const auto test_set = read_dataset(held);

  std::string csv = "arm,seed,dice,iou,hd95,pq\n";
  struct Row {
    std::string label;
    std::vector<MetricsReport> runs;
  };
  std::vector<Row> rows;
  for (const auto& arm : arms) {
    Row row{arm.label, {}};
    for (int s = 0; s < seeds; ++s) {
      NetConfig cfg = rc.net;
      arm.apply(cfg);
      TrainConfig tc = rc.train;
      tc.seed = rc.train.seed + static_cast<std::uint64_t>(s);
      tc.eval_every = 0;
      auto net = build_variant<float>(cfg, tc.seed);
      train(net, train_set, tc);
      const auto m = evaluate(net, test_set).report;
      row.runs.push_back(m);
      csv += arm.label + "," + std::to_string(tc.seed) + "," + fmt("%.6f", m.dice) + "," + fmt("%.6f", m.iou) + "," +
             fmt("%.6f", m.hd95) + "," + fmt("%.6f", m.pq) + "\n";
      if (!quiet) {
        std::cerr << arm.label << " seed=" << tc.seed << " dice=" << fmt("%.4f", m.dice)
                  << " hd95=" << fmt("%.3f", m.hd95) << "\n";
      }
    }
    rows.push_back(std::move(row));
  }

  auto stat = [](const std::vector<MetricsReport>& v, double MetricsReport::*f) {
    double mean = 0, var = 0;
    for (const auto& m : v) mean += m.*f;
    mean /= v.size();
    for (const auto& m : v) var += (m.*f - mean) * (m.*f - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
    return std::pair{mean, sd};
  };
  std::ostringstream table;
  table << "held-out split: " << held.string() << ", seeds: " << seeds << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %-18s %-18s %-18s\n", "arm", "Dice(%)", "IoU(%)", "HD95");
  table << line;
  for (const auto& r : rows) {
    const auto [d, ds] = stat(r.runs, &MetricsReport::dice);
    const auto [i, is] = stat(r.runs, &MetricsReport::iou);
    const auto [h, hs] = stat(r.runs, &MetricsReport::hd95);
    char a[32], b[32], c[32];
    std::snprintf(a, sizeof a, "%.2f +- %.2f", 100 * d, 100 * ds);
    std::snprintf(b, sizeof b, "%.2f +- %.2f", 100 * i, 100 * is);
    std::snprintf(c, sizeof c, "%.3f +- %.3f", h, hs);
    std::snprintf(line, sizeof line, "%-18s %-18s %-18s %-18s\n", r.label.c_str(), a, b, c);
    table << line;
  }
  std::cout << table.str();
  if (!out.empty()) {
    fs::create_directories(out);
    write_text_atomic(fs::path(out) / "ablation.csv", csv);
    write_text_atomic(fs::path(out) / "ablation.txt", table.str());
  }
  return 0;
}

int cmd_grad_check(std::uint64_t seed, bool verbose) {
  const auto entries = run_grad_suite(seed);
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (const auto& e : entries) {
    if (!worst.count(e.op)) order.push_back(e.op);
    worst[e.op] = std::max(worst[e.op], e.max_rel_error);
    if (verbose) std::cout << "  " << e.op << " [" << e.input << "] " << fmt("%.3e", e.max_rel_error) << "\n";
  }
  bool ok = true;
  for (const auto& op : order) {
    const bool pass = worst[op] < kGradTolerance;
    ok = ok && pass;
    char line[160];
    std::snprintf(line, sizeof line, "%-4s %-40s max_rel_err=%.3e\n", pass ? "ok" : "FAIL", op.c_str(), worst[op]);
    std::cout << line;
  }
  std::cout << (ok ? "grad-check passed" : "grad-check FAILED") << " (" << entries.size() << " checks, tolerance "
            << fmt("%.0e", kGradTolerance) << ")\n";
  if (!ok) throw NumericError("gradient check exceeded tolerance");
  return 0;
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> v;
  std::stringstream ss(text);
  std::string t;
  while (std::getline(ss, t, ',')) {
    try {
      v.push_back(std::stoi(t));
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " list '" + text + "'");
    }
  }
  return v;
}

int cmd_bench(const std::string& shapes, const std::string& kernels, int groups, int repeats) {
  std::stringstream ss(shapes);
  std::string s;
  while (std::getline(ss, s, ',')) {
    const auto shape = parse_shape(s);
    for (int k : parse_int_list(kernels, "kernel")) {
      const auto r = bench_svconv(shape, k, groups, repeats);
      char line[200];
      std::snprintf(line, sizeof line, "shape=%s k=%d G=%d naive_ms=%.2f fast_ms=%.2f speedup=%.2fx max_abs_diff=%.2e\n",
                    s.c_str(), k, groups, r.naive_ms, r.fast_ms, r.speedup(), r.max_abs_diff);
      std::cout << line;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-guided dynamic convolution segmentation toolkit"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, csv, image, prefix, arms = "full,self_guidance,no_local,no_dynamic";
  int n_train = 200, n_val = 50, n_test = 50, seeds = 3, groups = 1, repeats = 3;
  std::uint64_t seed = 0;
  bool quiet = false, verbose = false;
  std::string shapes = "1x64x64x64", kernels = "3,7";

  auto* gen = app.add_subcommand("gen-data", "Generate train/val/test synthetic splits");
  gen->add_option("--config", config, "Run config JSON")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--train", n_train, "Training samples");
  gen->add_option("--val", n_val, "Validation samples");
  gen->add_option("--test", n_test, "Test samples");

  auto* tr = app.add_subcommand("train", "Train a network");
  tr->add_option("--config", config, "Run config JSON")->required();
  tr->add_option("--data", data, "Dataset root (with train/ and optional val/)")->required();
  tr->add_option("--out", out, "Checkpoint directory")->required();
  tr->add_flag("--quiet", quiet, "No progress output");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  ev->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", data, "Split directory")->required();
  ev->add_option("--csv", csv, "Per-sample CSV output");

  auto* inf = app.add_subcommand("infer", "Predict one image and export PGMs");
  inf->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  inf->add_option("--image", image, "TNSR image (C,H,W)")->required();
  inf->add_option("--out-prefix", prefix, "Output path prefix")->required();

  auto* ab = app.add_subcommand("ablate", "Paired-seed ablation sweep");
  ab->add_option("--config", config, "Run config JSON")->required();
  ab->add_option("--data", data, "Dataset root")->required();
  ab->add_option("--arms", arms, "Comma-separated arms");
  ab->add_option("--seeds", seeds, "Seeds per arm");
  ab->add_option("--out", out, "Directory for ablation.csv / ablation.txt");
  ab->add_flag("--quiet", quiet, "No progress output");

  auto* gc = app.add_subcommand("grad-check", "64-bit finite-difference gradient suite");
  gc->add_option("--seed", seed, "Random seed");
  gc->add_flag("--verbose", verbose, "Print every check");

  auto* be = app.add_subcommand("bench", "Naive vs unfold spatially variant convolution timings");
  be->add_option("--shapes", shapes, "Comma-separated NxCxHxW shapes");
  be->add_option("--kernels", kernels, "Comma-separated kernel sizes");
  be->add_option("--groups", groups, "Kernel groups");
  be->add_option("--repeats", repeats, "Timing repeats (best is reported)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(config, out, n_train, n_val, n_test);
    if (*tr) return cmd_train(config, data, out, quiet);
    if (*ev) return cmd_eval(ckpt, data, csv);
    if (*inf) return cmd_infer(ckpt, image, prefix);
    if (*ab) return cmd_ablate(config, data, arms, seeds, out, quiet);
    if (*gc) return cmd_grad_check(seed, verbose);
    if (*be) return cmd_bench(shapes, kernels, groups, repeats);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
