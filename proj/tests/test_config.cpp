#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ominictl/config.hpp"
#include "ominictl/errors.hpp"

using namespace omini;

namespace {

std::string error_of(const std::string& text) {
  try {
    run_config_from_json(parse_json(text, "test"));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("an empty object resolves to the defaults") {
  const RunConfig c = run_config_from_json(Json::object());
  CHECK(c.task.kind == TaskKind::EdgeToImage);
  CHECK(c.model.d_model == 64);
  CHECK(c.train.steps == 3000);
  CHECK(c.train.effective_batch() == 8);
  CHECK(c.seeds.size() == 5);
  CHECK_FALSE(c.gamma.has_value());
}

TEST_CASE("resolved configs round-trip through JSON") {
  RunConfig c;
  c.task = TaskSpec::make(TaskKind::SubjectRelocation);
  c.model.position_mode = PositionMode::NonAligned;
  c.model.position_delta = Position2D{0, 4};
  c.model.lora_alpha = 2.0;
  c.model.lora_targets.insert(LoraTarget::MlpIn);
  c.train.lr = 5e-4;
  c.gamma = 0.5;
  c.seeds = {7, 8};
  const Json j = to_json(c);
  const RunConfig back = run_config_from_json(Json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());
  CHECK(back.model.position_delta == Position2D{0, 4});
  CHECK(back.gamma == 0.5);
}

TEST_CASE("unknown keys are rejected and named") {
  CHECK(error_of(R"({"lerning_rate": 1})").find("lerning_rate") != std::string::npos);
  CHECK(error_of(R"({"train": {"step": 10}})").find("step") != std::string::npos);
  CHECK(error_of(R"({"model": {"heads": 4}})").find("heads") != std::string::npos);
  CHECK(error_of(R"({"eval": {"gamma": 1}})").find("gamma") != std::string::npos);
}

TEST_CASE("values are type- and range-checked") {
  CHECK_FALSE(error_of(R"({"train": {"steps": -5}})").empty());
  CHECK_FALSE(error_of(R"({"train": {"lr": "fast"}})").empty());
  CHECK_FALSE(error_of(R"({"task": "depth_to_image"})").empty());
  CHECK_FALSE(error_of(R"({"model": {"integration": "concat"}})").empty());
  CHECK_FALSE(error_of(R"({"model": {"lora_targets": ["W_Z"]}})").empty());
  CHECK_FALSE(error_of(R"({"model": {"d_model": 60}})").empty());
  CHECK_FALSE(error_of(R"({"gamma": -1})").empty());
  CHECK_FALSE(error_of(R"({"seeds": [1, -2]})").empty());
  CHECK_FALSE(error_of(R"({"eval": {"n_steps": 0}})").empty());
  CHECK_FALSE(error_of(R"([1, 2])").empty());
  CHECK_FALSE(error_of("{not json").empty());
}

TEST_CASE("feature adding with non-aligned positions is a config error") {
  CHECK_FALSE(
      error_of(R"({"model": {"integration": "feature_adding", "position_mode": "non_aligned"}})").empty());
}

TEST_CASE("the task canvas follows the model") {
  const RunConfig c = run_config_from_json(
      parse_json(R"({"task": "colorization", "model": {"image_size": 12}})", "t"));
  CHECK(c.task.image_size == 12);
  CHECK(c.task.kind == TaskKind::Colorization);
}

TEST_CASE("missing config files are config errors") {
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("eval reports serialise an empty run as null") {
  EvalReport r;
  r.metric = "edge_f1";
  const Json j = to_json(r);
  CHECK(j.at("per_sample").empty());
  CHECK(j.at("aggregate").is_null());
  CHECK(j.at("task") == "edge_to_image");
}
