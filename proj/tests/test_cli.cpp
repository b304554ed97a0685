#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "sgdc/config.hpp"

using namespace sgdc;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run sgdc_run(const std::string& args) {
  const std::string cmd = std::string(SGDC_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  Run r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyConfig = R"({
  "data": {"image_size": 16, "channels": 1, "seed": 4},
  "net": {"in_ch": 1, "stage_channels": [4, 6, 8, 8], "kernel": 3, "ffn_ratio": 2},
  "train": {"batch_size": 2, "max_iters": 3, "lr0": 0.001, "eval_every": 0},
  "lambda": 3
})";

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / ("sgdc_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "run.json") << kTinyConfig;
  }
  ~Workspace() { fs::remove_all(root); }
  std::string p(const std::string& rel) const { return (root / rel).string(); }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("run config parsing is strict") {
  const auto rc = parse_run_config(kTinyConfig);
  CHECK(rc.data.image_size == 16);
  CHECK(rc.net.stage_channels[1] == 6);
  CHECK(rc.train.max_iters == 3);
  CHECK(rc.net.lambda == 3.0);

  const auto v = parse_run_config(R"({"data": {"channels": 1}, "net": {"in_ch": 1}, "variant": "no_local", "operator": "scharr"})");
  CHECK_FALSE(v.net.local);
  CHECK(v.net.dynamic);
  CHECK(v.net.op == nn::OperatorKind::kScharr);

  CHECK_THROWS_AS(parse_run_config(R"({"trian": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"learning_rate": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"variant": "nope"})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"data": {"channels": 3}, "net": {"in_ch": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch_size": 0}})"), ConfigError);
  CHECK(net_config_from_json(to_json(rc.net)).stage_channels == rc.net.stage_channels);
  CHECK(to_json(train_config_from_json(to_json(rc.train))) == to_json(rc.train));
}

TEST_CASE("usage errors exit with 1") {
  CHECK(sgdc_run("").code == 1);
  CHECK(sgdc_run("frobnicate").code == 1);
  CHECK(sgdc_run("eval --bogus-flag").code == 1);
  CHECK(sgdc_run("gen-data --config /nonexistent.json --out /tmp/x").code == 1);

  Workspace ws;
  std::ofstream(ws.root / "bad.json") << R"({"train": {"epochz": 3}})";
  const auto r = sgdc_run("gen-data --config " + ws.p("bad.json") + " --out " + ws.p("d"));
  CHECK(r.code == 1);
  CHECK(r.out.find("epochz") != std::string::npos);
}

TEST_CASE("grad-check passes") {
  const auto r = sgdc_run("grad-check");
  CHECK(r.code == 0);
  CHECK(r.out.find("grad-check passed") != std::string::npos);
}

TEST_CASE("bench reports a speedup") {
  const auto r = sgdc_run("bench --shapes 1x8x16x16 --kernels 3 --repeats 1");
  CHECK(r.code == 0);
  CHECK(r.out.find("speedup") != std::string::npos);
}

TEST_CASE("end to end workflow") {
  Workspace ws;
  const auto gen = sgdc_run("gen-data --config " + ws.p("run.json") + " --out " + ws.p("data") + " --train 4 --val 2 --test 2");
  REQUIRE(gen.code == 0);
  CHECK(fs::exists(ws.root / "data" / "train" / "manifest.json"));
  CHECK(fs::exists(ws.root / "data" / "test" / "manifest.json"));

  const auto tr = sgdc_run("train --quiet --config " + ws.p("run.json") + " --data " + ws.p("data") + " --out " + ws.p("ck"));
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(ws.root / "ck" / "history.csv"));
  CHECK(fs::exists(ws.root / "ck" / "last" / "manifest.json"));

  const std::string eval = "eval --ckpt " + ws.p("ck") + " --data " + ws.p("data/test");
  const auto e1 = sgdc_run(eval + " --csv " + ws.p("a.csv"));
  const auto e2 = sgdc_run(eval + " --csv " + ws.p("b.csv"));
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  CHECK(e1.out.find("dice=") != std::string::npos);
  CHECK(slurp(ws.root / "a.csv") == slurp(ws.root / "b.csv"));
  CHECK(slurp(ws.root / "a.csv").starts_with("id,dice,iou,hd95\n"));

  const auto inf = sgdc_run("infer --ckpt " + ws.p("ck") + " --image " + ws.p("data/test/test_0000_img.tnsr") +
                            " --out-prefix " + ws.p("x"));
  REQUIRE(inf.code == 0);
  for (const char* suffix : {"x_pred.pgm", "x_edge.pgm", "x_guidance.pgm"}) {
    const auto s = slurp(ws.root / suffix);
    CHECK(s.starts_with("P5\n"));
  }

  // checkpoint / data mismatch is a validation error
  std::ofstream(ws.root / "rgb.json") << R"({"data": {"image_size": 32, "channels": 3}})";
  REQUIRE(sgdc_run("gen-data --config " + ws.p("rgb.json") + " --out " + ws.p("rgb") + " --train 1 --val 1 --test 1").code == 0);
  CHECK(sgdc_run("eval --ckpt " + ws.p("ck") + " --data " + ws.p("rgb/test")).code == 1);
  // a missing split is a runtime error
  CHECK(sgdc_run("eval --ckpt " + ws.p("ck") + " --data " + ws.p("nothing")).code == 2);

  const auto ab = sgdc_run("ablate --quiet --config " + ws.p("run.json") + " --data " + ws.p("data") +
                           " --arms full,lambda=0,1 --seeds 1 --out " + ws.p("abl"));
  REQUIRE(ab.code == 0);
  CHECK(ab.out.find("lambda=0") != std::string::npos);
  CHECK(ab.out.find("HD95") != std::string::npos);
  CHECK(fs::exists(ws.root / "abl" / "ablation.csv"));
  CHECK(sgdc_run("ablate --config " + ws.p("run.json") + " --data " + ws.p("data") + " --arms warp").code == 1);
}

}  // TEST_SUITE
