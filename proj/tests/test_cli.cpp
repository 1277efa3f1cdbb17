#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ominictl/checkpoint.hpp"
#include "ominictl/cli.hpp"
#include "ominictl/config.hpp"

using namespace omini;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "ominictl_cli_test";

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ominictl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string write_config(const std::string& name, const std::string& body) {
  fs::create_directories(kRoot);
  const fs::path p = kRoot / name;
  std::ofstream(p) << body;
  return p.string();
}

const char* kTiny = R"({
  "task": "edge_to_image",
  "model": {"image_size": 12, "d_model": 48, "n_dual_blocks": 1, "n_single_blocks": 1, "mlp_ratio": 2},
  "pretrain": {"steps": 2, "accum_steps": 2, "loss_log_every": 1},
  "train": {"steps": 3, "accum_steps": 2, "loss_log_every": 1},
  "eval": {"n": 2, "n_steps": 2},
  "seeds": [1, 2]
})";

std::string path(const char* name) { return (kRoot / name).string(); }

// One trained tiny run shared by the read-only commands below.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    const fs::path d = kRoot / "shared";
    fs::remove_all(d);
    const Result r = cli({"train", "--config", write_config("tiny.json", kTiny), "--out", d.string()});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("count-params reports the closed-form adapter count") {
  const Result r = cli({"count-params"});
  REQUIRE(r.code == 0);
  const Json j = Json::parse(r.out);
  CHECK(j.at("lora_params") == 9232);
  CHECK(j.at("ratio").get<double>() < 0.02);
}

TEST_CASE("train writes a complete run directory") {
  const fs::path& d = trained_run();
  for (const char* f : {"resolved_config.json", "base.odit", "model.odit", "adapters.odit",
                        "loss.log", "summary.json", "metadata.json"}) {
    CHECK(fs::exists(d / f));
  }
  const RunConfig echoed = run_config_from_json(Json::parse(slurp(d / "resolved_config.json")));
  CHECK(echoed.train.steps == 3);
  CHECK(echoed.out == d.string());
  const std::string log = slurp(d / "loss.log");
  CHECK(log.starts_with("# step arm loss\n"));
  CHECK(log.find("\n1 base ") != std::string::npos);
  CHECK(log.find("\n3 adapter ") != std::string::npos);
  // Timestamps live only in the metadata file.
  CHECK(slurp(d / "summary.json").find("utc") == std::string::npos);
  CHECK(Json::parse(slurp(d / "metadata.json")).contains("started_utc"));
}

TEST_CASE("rerunning with the same seed reproduces every artifact") {
  const fs::path a = kRoot / "rep_a", b = kRoot / "rep_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const std::string cfg = write_config("tiny.json", kTiny);
  REQUIRE(cli({"train", "--config", cfg, "--seed", "4", "--out", a.string()}).code == 0);
  REQUIRE(cli({"train", "--config", cfg, "--seed", "4", "--out", b.string()}).code == 0);
  for (const char* f : {"loss.log", "model.odit", "adapters.odit", "summary.json"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
}

TEST_CASE("a zero learning rate run checkpoints the initialization") {
  const std::string cfg = write_config("lr0.json", R"({
    "model": {"image_size": 12, "d_model": 48, "n_dual_blocks": 1, "n_single_blocks": 1, "mlp_ratio": 2},
    "pretrain": {"steps": 0},
    "train": {"steps": 2, "accum_steps": 1, "lr": 0.0}
  })");
  const fs::path d = kRoot / "lr0";
  REQUIRE(cli({"train", "--config", cfg, "--out", d.string()}).code == 0);
  const RunConfig rc = load_run_config(cfg);
  const Model init = make_arm(Model(rc.model), rc.model, adapter_seed_for(rc.train.seed));
  const Model saved = load_model((d / "model.odit").string());
  const auto a = init.base_parameters(), b = saved.base_parameters();
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k]->value.bit_equal(b[k]->value));
  const auto ia = init.adapters(), sa = saved.adapters();
  for (std::size_t k = 0; k < ia.size(); ++k) {
    CHECK(ia[k]->down.value.bit_equal(sa[k]->down.value));
    CHECK(ia[k]->up.value.bit_equal(sa[k]->up.value));
  }
}

TEST_CASE("eval emits the documented schema and handles n = 0") {
  const std::string ckpt = (trained_run() / "model.odit").string();
  const std::string before = slurp(ckpt);
  Result r = cli({"eval", "--checkpoint", ckpt, "--n", "0"});
  REQUIRE(r.code == 0);
  Json j = Json::parse(r.out);
  CHECK(j.at("per_sample").empty());
  CHECK(j.at("aggregate").is_null());

  r = cli({"eval", "--checkpoint", ckpt, "--n", "2", "--steps", "2", "--out", path("ev")});
  REQUIRE(r.code == 0);
  j = Json::parse(slurp(kRoot / "ev" / "eval.json"));
  CHECK(j.at("metric") == "edge_f1");
  CHECK(j.at("task") == "edge_to_image");
  REQUIRE(j.at("per_sample").size() == 2);
  const double mean = (j.at("per_sample")[0].get<double>() + j.at("per_sample")[1].get<double>()) / 2;
  CHECK(j.at("aggregate").get<double>() == doctest::Approx(mean));
  CHECK(cli({"eval", "--checkpoint", ckpt, "--n", "2", "--steps", "2"}).out == r.out);
  CHECK(slurp(ckpt) == before);
}

TEST_CASE("eval rejects a task the checkpoint was not trained on") {
  const std::string ckpt = (trained_run() / "model.odit").string();
  const Result r = cli({"eval", "--checkpoint", ckpt, "--task", "colorization", "--n", "1"});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("does not match") != std::string::npos);
}

TEST_CASE("sample writes images and leaves the checkpoint untouched") {
  const std::string ckpt = (trained_run() / "model.odit").string();
  const std::string before = slurp(ckpt);
  const Result r = cli({"sample", "--checkpoint", ckpt, "--steps", "2", "--index", "3", "--out", path("smp")});
  REQUIRE(r.code == 0);
  for (const char* f : {"condition.ppm", "target.ppm", "sample.ppm", "sample.json"}) {
    CHECK(fs::exists(kRoot / "smp" / f));
  }
  CHECK(slurp(kRoot / "smp" / "sample.ppm").starts_with("P3"));
  CHECK(slurp(ckpt) == before);
}

TEST_CASE("inspect-attn exports stochastic cross blocks and checks its ranges") {
  const std::string ckpt = (trained_run() / "model.odit").string();
  const Result r = cli({"inspect-attn", "--checkpoint", ckpt, "--layer", "1", "--head", "3", "--out", path("att")});
  REQUIRE(r.code == 0);
  const Json j = Json::parse(r.out);
  CHECK(j.at("uniform_baseline").get<double>() == doctest::Approx(1.0 / 9.0));
  for (const char* f : {"x_to_cond.txt", "cond_to_x.txt"}) {
    std::ifstream in(kRoot / "att" / f);
    const Tensor m = read_matrix_text(in);
    REQUIRE(m.rows() == 9);
    for (std::size_t row = 0; row < 9; ++row) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) s += m(row, c);
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
  CHECK(cli({"inspect-attn", "--checkpoint", ckpt, "--layer", "2"}).code != 0);
  CHECK(cli({"inspect-attn", "--checkpoint", ckpt, "--head", "4"}).code != 0);
}

TEST_CASE("compare writes per-arm logs and a verdict from the fixed vocabulary") {
  const std::string cfg = write_config("tiny.json", kTiny);
  const fs::path d = kRoot / "cmp";
  fs::remove_all(d);
  const Result r = cli({"compare", "--config", cfg, "--mode", "integration", "--out", d.string()});
  REQUIRE(r.code == 0);
  const Json s = Json::parse(slurp(d / "summary.json"));
  const std::string v = s.at("verdict");
  CHECK((v == "unified_lower" || v == "adding_lower" || v == "tie"));
  CHECK(fs::exists(d / "loss_unified_sequence_seed1.log"));
  CHECK(fs::exists(d / "loss_feature_adding_seed2.log"));
  const ComparisonReport rep = comparison_report_from_json(Json::parse(slurp(d / "report.json")));
  CHECK(rep.seeds.size() == 2);

  CHECK(cli({"compare", "--config", cfg, "--mode", "position", "--out", path("cmp2")}).code == kExitConfig);
}

TEST_CASE("position comparisons emit their own verdict vocabulary") {
  const std::string cfg = write_config("reloc.json", R"({
    "task": "subject_relocation",
    "model": {"image_size": 12, "d_model": 48, "n_dual_blocks": 1, "n_single_blocks": 0, "mlp_ratio": 2},
    "pretrain": {"steps": 1, "accum_steps": 1},
    "train": {"steps": 2, "accum_steps": 1, "loss_log_every": 1},
    "seeds": [3]
  })");
  const Result r = cli({"compare", "--config", cfg, "--mode", "position", "--out", path("pos")});
  REQUIRE(r.code == 0);
  const std::string v = Json::parse(r.out).at("verdict");
  CHECK((v == "shifted_faster" || v == "shared_faster" || v == "tie"));
}

TEST_CASE("config and usage errors exit with 2, runtime failures with 3") {
  CHECK(cli({"train", "--config", write_config("bad.json", R"({"trian": {}})")}).code == kExitConfig);
  CHECK(cli({"train", "--config", path("missing.json")}).code == kExitConfig);
  CHECK(cli({"count-params", "--bogus"}).code == kExitConfig);
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"compare", "--mode", "sideways"}).code == kExitConfig);
  CHECK(cli({"eval", "--checkpoint", path("nope.odit")}).code == kExitRuntime);
  CHECK(cli({"--help"}).code == kExitOk);
}
