#include <doctest.h>

#include <cmath>
#include <filesystem>

#include <unistd.h>

#include "sgdc/trainer.hpp"

using namespace sgdc;
namespace fs = std::filesystem;

namespace {

NetConfig tiny_net() {
  NetConfig cfg;
  cfg.in_ch = 1;
  cfg.stage_channels = {4, 6, 8, 8};
  cfg.kernel = 3;
  cfg.ffn_ratio = 2;
  return cfg;
}

Dataset tiny_data(int count, std::uint64_t seed = 1) {
  SynthConfig c;
  c.image_size = 16;
  c.channels = 1;
  return Dataset{c, gen_samples(c, seed, count, "t")};
}

TrainConfig short_run() {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_iters = 4;
  tc.lr0 = 1e-3;
  tc.seed = 3;
  tc.eval_every = 0;
  return tc;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("adam closed forms") {
  ParamStore<double> store;
  const auto p = store.add("theta", Tensor<double>({1}, 0.0));
  store.add("frozen", Tensor<double>({1}, 2.0), false);
  auto st = init_optim(store);
  adam_step(store, {Tensor<double>({1}, 1.0), Tensor<double>({1}, 1.0)}, st, 0.1);
  CHECK(st.t == 1);
  CHECK(store.value(p)[0] == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(store.entry(1).value[0] == 2.0);

  ParamStore<double> z;
  z.add("w", Tensor<double>({3}, {0.5, -1.0, 2.0}));
  auto sz = init_optim(z);
  for (int i = 0; i < 5; ++i) adam_step(z, {Tensor<double>({3})}, sz, 0.1);
  CHECK(z.entry(0).value == Tensor<double>({3}, {0.5, -1.0, 2.0}));

  // f = theta^2 from theta = 1
  ParamStore<double> q;
  const auto th = q.add("theta", Tensor<double>({1}, 1.0));
  auto sq = init_optim(q);
  double prev = 1.0;
  for (int i = 0; i < 10; ++i) {
    adam_step(q, {Tensor<double>({1}, 2 * q.value(th)[0])}, sq, 0.1);
    const double now = std::abs(q.value(th)[0]);
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ParamStore<float> store;
  store.add("enc.weight", Tensor<float>({2}, 1.f));
  store.add("dec.bias", Tensor<float>({2}, 1.f));
  auto st = init_optim(store);
  try {
    adam_step(store, {Tensor<float>({2}, 0.5f), Tensor<float>({2}, {0.f, NAN})}, st, 0.1);
    FAIL("NaN accepted");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("dec.bias") != std::string::npos);
  }
  CHECK(store.entry(0).value == Tensor<float>({2}, 1.f));
  CHECK(st.t == 0);
  CHECK_THROWS_AS(adam_step(store, {Tensor<float>({2})}, st, 0.1), ContractError);
}

TEST_CASE("polynomial schedule") {
  CHECK(poly_lr(0, 100, 1e-4, 0.9) == 1e-4);
  CHECK(poly_lr(100, 100, 1e-4, 0.9) == 0.0);
  CHECK(poly_lr(150, 100, 1e-4, 0.9) == 0.0);
  CHECK(poly_lr(50, 100, 1.0, 0.9) == doctest::Approx(0.53589).epsilon(1e-5));
  double prev = 1.0;
  for (long i = 0; i <= 1000; ++i) {
    const double lr = poly_lr(i, 1000, 1.0, 0.9);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("training is bitwise reproducible") {
  const auto data = tiny_data(4);
  auto run = [&] {
    auto net = build_variant<float>(tiny_net(), 11);
    return std::pair{train(net, data, short_run()).history, net.store.entry(0).value};
  };
  const auto [ha, wa] = run();
  const auto [hb, wb] = run();
  REQUIRE(ha.size() == 4);
  CHECK(history_csv(ha) == history_csv(hb));
  CHECK(wa == wb);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].loss.total == hb[i].loss.total);
    CHECK(ha[i].edge_grad_norm > 0.0);
  }
  CHECK(history_csv(ha).starts_with("iter,lr,total,seg1,seg2,seg3,edge,edge_grad_norm\n"));
}

TEST_CASE("lambda = 0 records a zero edge gradient") {
  auto cfg = tiny_net();
  cfg.lambda = 0.0;
  auto net = build_variant<float>(cfg, 12);
  const auto res = train(net, tiny_data(4), short_run());
  for (const auto& r : res.history) CHECK(r.edge_grad_norm == 0.0);
}

TEST_CASE("training rejects mismatched data and non-finite losses") {
  auto net = build_variant<float>(tiny_net(), 13);
  SynthConfig rgb;
  rgb.image_size = 16;
  CHECK_THROWS_AS(train(net, Dataset{rgb, gen_samples(rgb, 1, 2, "c")}, short_run()), ConfigError);

  net.store.value(*net.params.decoder[2].head.bias).fill(NAN);
  try {
    train(net, tiny_data(2), short_run());
    FAIL("NaN loss accepted");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
  }
}

TEST_CASE("evaluation") {
  const auto data = tiny_data(6, 4);
  auto net = build_variant<float>(tiny_net(), 14);
  const auto a = evaluate(net, data, 1), b = evaluate(net, data, 3);
  CHECK(format_report(a.report) == format_report(b.report));
  CHECK(per_sample_csv(a) == per_sample_csv(b));
  CHECK(a.ids.front() == "t0000");
  CHECK(a.report.count == 6);

  // all-background predictor
  auto& head = net.params.decoder[2].head;
  net.store.value(head.weight).fill(0.f);
  net.store.value(*head.bias).fill(-100.f);
  const auto bg = evaluate(net, data);
  CHECK(bg.report.dice == 0.0);
  CHECK(bg.report.iou == 0.0);
  const auto diag = std::hypot(16.0, 16.0);
  CHECK(bg.report.hd95 == doctest::Approx(diag));
  CHECK(format_report(bg.report).find("dice=0.000000") != std::string::npos);
}

TEST_CASE("checkpoint round trip reproduces the report") {
  const auto data = tiny_data(4, 5);
  auto cfg = tiny_net();
  cfg.op = nn::OperatorKind::kLearnable;
  auto net = build_variant<float>(cfg, 15);
  train(net, data, short_run());
  const auto before = evaluate(net, data);

  const fs::path dir = fs::temp_directory_path() / ("sgdc_ckpt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  save_checkpoint(dir, net, 4, nlohmann::json{{"note", "x"}});
  CHECK_FALSE(fs::exists(dir.string() + ".tmp"));
  const auto ck = load_checkpoint(dir);
  CHECK(ck.iteration == 4);
  CHECK(ck.run_config["note"] == "x");
  REQUIRE(ck.net.store.size() == net.store.size());
  for (std::size_t i = 0; i < net.store.size(); ++i) CHECK(ck.net.store.entry(i).value == net.store.entry(i).value);
  const auto after = evaluate(ck.net, data);
  CHECK(format_report(after.report) == format_report(before.report));
  CHECK(per_sample_csv(after) == per_sample_csv(before));

  fs::remove(dir / "sge.op.kx.tnsr");
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
}

TEST_CASE("training writes history and checkpoints") {
  const fs::path dir = fs::temp_directory_path() / ("sgdc_run_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto data = tiny_data(4, 6), val = tiny_data(2, 7);
  auto net = build_variant<float>(tiny_net(), 16);
  auto tc = short_run();
  tc.max_iters = 0;
  tc.epochs = 2;
  tc.eval_every = 1;
  TrainOptions opt;
  opt.out_dir = dir;
  opt.val = &val;
  int evals = 0;
  opt.on_eval = [&](const EvalRecord&) { ++evals; };
  const auto res = train(net, data, tc, opt);
  CHECK(res.max_iter == 4);
  CHECK(evals == 2);
  CHECK(res.best_iter >= 0);
  CHECK(fs::exists(dir / "history.csv"));
  CHECK(fs::exists(dir / "eval_history.csv"));
  CHECK(fs::exists(dir / "last" / "manifest.json"));
  CHECK(fs::exists(dir / "best" / "manifest.json"));
  fs::remove_all(dir);
}

}  // TEST_SUITE
