#include "sgdc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <thread>

#include "sgdc/errors.hpp"
#include "sgdc/nn.hpp"
#include "sgdc/ops.hpp"
#include "sgdc/tnsr.hpp"

namespace sgdc {

namespace fs = std::filesystem;

template <typename T>
OptimState<T> init_optim(const ParamStore<T>& store) {
  OptimState<T> st;
  for (std::size_t i = 0; i < store.size(); ++i) {
    st.m.emplace_back(store.entry(i).value.shape());
    st.v.emplace_back(store.entry(i).value.shape());
  }
  return st;
}

template <typename T>
void adam_step(ParamStore<T>& store, const std::vector<Tensor<T>>& grads, OptimState<T>& st, double lr) {
  if (grads.size() != store.size() || st.m.size() != store.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(store.size()) + " parameters");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    if (!e.trainable) continue;
    if (grads[i].shape() != e.value.shape()) {
      throw ContractError("adam_step: gradient shape " + shape_str(grads[i].shape()) + " for parameter '" + e.name +
                          "' of shape " + shape_str(e.value.shape()));
    }
    for (T g : grads[i].data()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + e.name + "'");
      }
    }
  }
  st.t += 1;
  const double b1 = st.beta1, b2 = st.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(i);
    if (!e.trainable) continue;
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < g.numel(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1 - b1) * gk;
      const double vk = b2 * v[k] + (1 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mh = mk / c1, vh = vk / c2;
      e.value[k] = static_cast<T>(e.value[k] - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

double poly_lr(long iter, long max_iter, double lr0, double power) {
  if (iter < 0 || max_iter < 1) throw ContractError("poly_lr: need iter >= 0 and max_iter >= 1");
  if (iter >= max_iter) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

int worker_threads() {
  if (const char* env = std::getenv("SGDC_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Tensor<float> stack_batch(const std::vector<const Tensor<float>*>& items) {
  if (items.empty()) throw ContractError("stack_batch: empty batch");
  const Shape& s = items[0]->shape();
  Shape out_shape{static_cast<int>(items.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  std::vector<float> data;
  data.reserve(shape_numel(out_shape));
  for (const auto* t : items) {
    if (t->shape() != s) throw ShapeError("stack_batch: " + shape_str(t->shape()) + " vs " + shape_str(s));
    data.insert(data.end(), t->data().begin(), t->data().end());
  }
  return Tensor<float>(std::move(out_shape), std::move(data));
}

namespace {

void check_data_fits(const NetConfig& cfg, const Dataset& data) {
  if (data.samples.empty()) throw ConfigError("dataset is empty");
  const auto& img = data.samples.front().image;
  if (img.rank() != 3 || img.dim(0) != cfg.in_ch) {
    throw ConfigError("dataset images " + shape_str(img.shape()) + " do not match net.in_ch = " +
                      std::to_string(cfg.in_ch));
  }
  if (img.dim(1) % 16 != 0 || img.dim(2) % 16 != 0) {
    throw ConfigError("dataset resolution " + shape_str(img.shape()) + " is not divisible by 16");
  }
}

}  // namespace

TrainResult train(Network<float>& net, const Dataset& data, const TrainConfig& tc, const TrainOptions& opt) {
  tc.validate();
  check_data_fits(net.cfg, data);
  if (opt.val) check_data_fits(net.cfg, *opt.val);
  const int n = static_cast<int>(data.samples.size());
  const int bs = std::min(tc.batch_size, n);
  const long per_epoch = (n + bs - 1) / bs;
  const long max_iter = tc.max_iters > 0 ? tc.max_iters : per_epoch * tc.epochs;
  const double lambda = net.cfg.effective_lambda();
  const int morph_iters = data.config.morph_iters;

  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);

  TrainResult res;
  res.max_iter = max_iter;
  auto st = init_optim(net.store);
  Rng shuffle_rng(mix_seed(tc.seed, 0x5eed5u));
  const std::uint64_t aug_seed = mix_seed(tc.seed, 0xa06u);
  std::vector<int> order(static_cast<std::size_t>(n));

  auto run_eval = [&](long iter, int epoch) {
    EvalRecord rec{iter, epoch, evaluate(net, *opt.val).report};
    res.evals.push_back(rec);
    if (opt.on_eval) opt.on_eval(rec);
    if (rec.metrics.dice > res.best_dice) {
      res.best_dice = rec.metrics.dice;
      res.best_iter = iter;
      if (!opt.out_dir.empty()) save_checkpoint(opt.out_dir / "best", net, iter, opt.run_config);
    }
  };

  long pos = per_epoch;  // batch index inside the current epoch
  int epoch = 0;
  for (long it = 0; it < max_iter; ++it) {
    if (pos == per_epoch) {
      for (int i = 0; i < n; ++i) order[i] = i;
      for (int i = n - 1; i > 0; --i) {
        std::swap(order[i], order[shuffle_rng.below(static_cast<std::uint64_t>(i) + 1)]);
      }
      pos = 0;
    }
    std::vector<Sample> batch;
    for (int j = 0; j < bs; ++j) {
      const auto& s = data.samples[order[(pos * bs + j) % n]];
      if (tc.augment) {
        Rng r(mix_seed(aug_seed, static_cast<std::uint64_t>(it) * 1024u + static_cast<std::uint64_t>(j)));
        batch.push_back(augment(s, r, morph_iters));
      } else {
        batch.push_back(s);
      }
    }
    ++pos;
    std::vector<const Tensor<float>*> imgs, masks, edges;
    for (const auto& s : batch) {
      imgs.push_back(&s.image);
      masks.push_back(&s.mask);
      edges.push_back(&s.edge);
    }

    Tape<float> tape;
    Binder<float> b(tape, net.store);
    auto out = net_forward(b, tape.constant(stack_batch(imgs)), net.params, net.cfg);
    auto terms = total_loss(out, stack_batch(masks), stack_batch(edges), lambda);

    IterRecord rec;
    rec.iter = it;
    rec.lr = poly_lr(it, max_iter, tc.lr0, tc.poly_power);
    rec.loss = terms.report(lambda);
    if (!std::isfinite(rec.loss.total)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(it));
    }
    const Var<float> retain[] = {out.edge_logits};
    auto grads = tape.backward(terms.total, retain);
    if (grads.has(out.edge_logits)) {
      double ss = 0;
      for (float g : grads[out.edge_logits].data()) ss += static_cast<double>(g) * g;
      rec.edge_grad_norm = std::sqrt(ss);
    }
    std::vector<Tensor<float>> pg(net.store.size());
    for (std::size_t i = 0; i < net.store.size(); ++i) {
      const auto& v = b.bound(i);
      pg[i] = v.valid() ? grads[v] : Tensor<float>(net.store.entry(i).value.shape());
    }
    adam_step(net.store, pg, st, rec.lr);
    res.history.push_back(rec);
    if (opt.on_iter) opt.on_iter(rec);

    if (pos == per_epoch || it + 1 == max_iter) {
      ++epoch;
      const bool last = it + 1 == max_iter;
      if (opt.val && tc.eval_every > 0 && (epoch % tc.eval_every == 0 || last)) run_eval(it + 1, epoch);
    }
  }

  if (!opt.out_dir.empty()) {
    save_checkpoint(opt.out_dir / "last", net, max_iter, opt.run_config);
    // without any validation pass the final weights are the best we know of
    if (res.evals.empty()) save_checkpoint(opt.out_dir / "best", net, max_iter, opt.run_config);
    write_text_atomic(opt.out_dir / "history.csv", history_csv(res.history));
    if (!res.evals.empty()) write_text_atomic(opt.out_dir / "eval_history.csv", eval_history_csv(res.evals));
  }
  return res;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string history_csv(const std::vector<IterRecord>& h) {
  std::string s = "iter,lr,total,seg1,seg2,seg3,edge,edge_grad_norm\n";
  for (const auto& r : h) {
    s += std::to_string(r.iter) + "," + fmt("%.9g", r.lr) + "," + fmt("%.9g", r.loss.total);
    for (double v : r.loss.seg_per_scale) s += "," + fmt("%.9g", v);
    s += "," + fmt("%.9g", r.loss.edge) + "," + fmt("%.9g", r.edge_grad_norm) + "\n";
  }
  return s;
}

std::string eval_history_csv(const std::vector<EvalRecord>& e) {
  std::string s = "iter,epoch,dice,iou,hd95,pq\n";
  for (const auto& r : e) {
    s += std::to_string(r.iter) + "," + std::to_string(r.epoch) + "," + fmt("%.6f", r.metrics.dice) + "," +
         fmt("%.6f", r.metrics.iou) + "," + fmt("%.6f", r.metrics.hd95) + "," + fmt("%.6f", r.metrics.pq) + "\n";
  }
  return s;
}

Prediction predict(const Network<float>& net, const Tensor<float>& image_chw) {
  Tape<float> tape;
  Binder<float> b(tape, net.store, true);
  auto out = net_forward(b, tape.constant(stack_batch({&image_chw})), net.params, net.cfg);
  Prediction p;
  p.logits = out.o[0].value();
  p.prob = p.logits;
  for (auto& v : p.prob.storage()) v = sigmoid_value(v);
  p.edge = out.edge_logits.value();
  for (auto& v : p.edge.storage()) v = sigmoid_value(v);
  p.guidance = out.guidance.value();
  return p;
}

EvalResult evaluate(const Network<float>& net, const Dataset& data, int threads) {
  check_data_fits(net.cfg, data);
  const std::size_t n = data.samples.size();
  EvalResult r;
  r.per_sample.resize(n);
  for (const auto& s : data.samples) r.ids.push_back(s.id);
  if (threads <= 0) threads = worker_threads();
  threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));

  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& s = data.samples[i];
      const auto p = predict(net, s.image);
      r.per_sample[i] = compute_metrics(threshold_map(p.logits, 0.0), to_binary(s.mask));
    }
  };
  if (threads <= 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      const std::size_t lo = n * t / threads, hi = n * (t + 1) / threads;
      pool.emplace_back([&, lo, hi, t] {
        try {
          work(lo, hi);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  r.report = aggregate(r.per_sample);
  return r;
}

std::string format_report(const MetricsReport& r) {
  return "samples=" + std::to_string(r.count) + "\n" + "dice=" + fmt("%.6f", r.dice) + "\n" +
         "iou=" + fmt("%.6f", r.iou) + "\n" + "hd95=" + fmt("%.6f", r.hd95) + "\n" + "pq=" + fmt("%.6f", r.pq) +
         "\n";
}

std::string per_sample_csv(const EvalResult& r) {
  std::string s = "id,dice,iou,hd95\n";
  for (std::size_t i = 0; i < r.per_sample.size(); ++i) {
    const auto& m = r.per_sample[i];
    s += r.ids[i] + "," + fmt("%.6f", m.dice) + "," + fmt("%.6f", m.iou) + "," + fmt("%.6f", m.hd95) + "\n";
  }
  return s;
}

void save_checkpoint(const fs::path& dir, const Network<float>& net, long iteration, const nlohmann::json& run_config) {
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + tmp.string() + ": " + ec.message());
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < net.store.size(); ++i) {
    const auto& e = net.store.entry(i);
    write_tnsr(tmp / (e.name + ".tnsr"), e.value);
    tensors.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"trainable", e.trainable}});
  }
  nlohmann::json m = {{"format_version", 1},   {"seed", net.seed},      {"iteration", iteration},
                      {"net", to_json(net.cfg)}, {"tensors", tensors}, {"run_config", run_config}};
  write_text_atomic(tmp / "manifest.json", m.dump(2) + "\n");
  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw IoError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto mp = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(mp));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(mp.string() + ": corrupt manifest: " + e.what());
  }
  Checkpoint c;
  try {
    const auto cfg = net_config_from_json(m.at("net"));
    c.net = build_variant<float>(cfg, m.at("seed").get<std::uint64_t>());
    c.iteration = m.at("iteration").get<long>();
    c.run_config = m.value("run_config", nlohmann::json());
    const auto& tensors = m.at("tensors");
    if (tensors.size() != c.net.store.size()) {
      throw IoError(mp.string() + ": lists " + std::to_string(tensors.size()) + " tensors, the network has " +
                    std::to_string(c.net.store.size()));
    }
    for (const auto& t : tensors) {
      const auto name = t.at("name").get<std::string>();
      auto ref = c.net.store.find(name);
      if (!ref) throw IoError(mp.string() + ": unknown parameter '" + name + "'");
      const auto p = dir / (name + ".tnsr");
      auto v = read_tnsr(p).to_float();
      if (v.shape() != c.net.store.value(*ref).shape()) {
        throw IoError(p.string() + ": shape " + shape_str(v.shape()) + " does not match the network " +
                      shape_str(c.net.store.value(*ref).shape()));
      }
      c.net.store.value(*ref) = std::move(v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(mp.string() + ": malformed manifest: " + e.what());
  }
  return c;
}

template OptimState<float> init_optim<float>(const ParamStore<float>&);
template OptimState<double> init_optim<double>(const ParamStore<double>&);
template void adam_step<float>(ParamStore<float>&, const std::vector<Tensor<float>>&, OptimState<float>&, double);
template void adam_step<double>(ParamStore<double>&, const std::vector<Tensor<double>>&, OptimState<double>&, double);

}  // namespace sgdc
