#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <string>
#include <vector>

#include "sgdc/config.hpp"
#include "sgdc/net.hpp"
#include "sgdc/objective.hpp"
#include "sgdc/synthdata.hpp"

namespace sgdc {

template <typename T>
struct OptimState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
OptimState<T> init_optim(const ParamStore<T>& store);

// One Adam update of every trainable entry. grads[i] aligns with store entry i.
// A non-finite gradient throws NumericError naming the parameter; nothing is updated.
template <typename T>
void adam_step(ParamStore<T>& store, const std::vector<Tensor<T>>& grads, OptimState<T>& st, double lr);

// lr0 * (1 - iter / max_iter)^power; 0 once iter >= max_iter.
double poly_lr(long iter, long max_iter, double lr0, double power);

// Number of worker threads for evaluation: SGDC_THREADS, else hardware concurrency.
int worker_threads();

// Stacks per-sample (C,H,W) tensors into (N,C,H,W).
Tensor<float> stack_batch(const std::vector<const Tensor<float>*>& items);

struct IterRecord {
  long iter = 0;
  double lr = 0;
  LossReport loss;
  double edge_grad_norm = 0;  // norm of d(total)/d(o_e)
};

struct EvalRecord {
  long iter = 0;
  int epoch = 0;
  MetricsReport metrics;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  const Dataset* val = nullptr;   // enables periodic evaluation and best-Dice checkpoint
  nlohmann::json run_config;      // echoed into checkpoint manifests
  std::function<void(const IterRecord&)> on_iter;
  std::function<void(const EvalRecord&)> on_eval;
};

struct TrainResult {
  std::vector<IterRecord> history;
  std::vector<EvalRecord> evals;
  long max_iter = 0;
  double best_dice = -1;
  long best_iter = -1;
};

// Trains `net` in place. Throws NumericError on a non-finite loss (naming the
// iteration) and ConfigError when the data does not fit the network.
TrainResult train(Network<float>& net, const Dataset& data, const TrainConfig& tc, const TrainOptions& opt = {});

std::string history_csv(const std::vector<IterRecord>& h);
std::string eval_history_csv(const std::vector<EvalRecord>& e);

struct Prediction {
  Tensor<float> prob;      // (1,1,H,W) sigmoid(o1)
  Tensor<float> logits;    // (1,1,H,W) o1
  Tensor<float> edge;      // (1,1,H,W) sigmoid(o_e)
  Tensor<float> guidance;  // (1,Cg,H/2,W/2)
};

Prediction predict(const Network<float>& net, const Tensor<float>& image_chw);

struct EvalResult {
  MetricsReport report;
  std::vector<std::string> ids;
  std::vector<SampleMetrics> per_sample;
};

// Thresholds sigmoid(o1) at 0.5 (logit > 0); samples are sharded over
// worker_threads() and reduced in dataset order.
EvalResult evaluate(const Network<float>& net, const Dataset& data, int threads = 0);

std::string format_report(const MetricsReport& r);
std::string per_sample_csv(const EvalResult& r);

struct Checkpoint {
  Network<float> net;
  long iteration = 0;
  nlohmann::json run_config;
};

// Directory of one TNSR per parameter plus manifest.json. The directory is
// assembled next to its destination and renamed into place.
void save_checkpoint(const std::filesystem::path& dir, const Network<float>& net, long iteration,
                     const nlohmann::json& run_config);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace sgdc
