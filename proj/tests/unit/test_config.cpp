#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "g2a/config.hpp"

using namespace g2a;

namespace {

std::string error_of(const std::string& text) {
  std::istringstream is(text);
  try {
    parse_config(is);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config keys are unique and sectioned") {
  std::set<std::string> seen;
  for (const auto& k : config_keys()) {
    CHECK(seen.insert(k.key).second);
    const auto dot = k.key.find('.');
    REQUIRE(dot != std::string::npos);
    const std::string section = k.key.substr(0, dot);
    CHECK((section == "scene" || section == "prop" || section == "mask" || section == "train" || section == "eval"));
  }
}

TEST_CASE("describe round trips through the parser") {
  RunConfig c;
  c.train.adda_epochs = 7;
  c.bench.aerial_ratio = 0.00125;
  c.train.dual_cell = false;
  std::istringstream is(describe(c));
  const RunConfig back = parse_config(is);
  CHECK(describe(back) == describe(c));
  CHECK(config_digest(back) == config_digest(c));
  CHECK(back.train == c.train);
}

TEST_CASE("parser accepts comments and blank lines") {
  std::istringstream is("# desk run\n\nscene.seed = 9   # trailing\n  train.adda_lr=0.0002\ntrain.adda = false\n");
  const RunConfig c = parse_config(is);
  CHECK(c.bench.seed == 9);
  CHECK(c.train.adda_lr == 0.0002);
  CHECK_FALSE(c.train.adda);
  CHECK(c.train.pretrain);
}

TEST_CASE("parser errors name the line and key") {
  CHECK(error_of("scene.seed = 1\nscene.colour = red\n").find("line 2: unknown key scene.colour") != std::string::npos);
  CHECK(error_of("train.seed = 1\ntrain.seed = 2\n").find("already set on line 1") != std::string::npos);
  CHECK(error_of("train.adda = maybe\n").find("train.adda") != std::string::npos);
  CHECK(error_of("train.pretrain_lr = fast\n").find("train.pretrain_lr") != std::string::npos);
  CHECK(error_of("scene.pairs = 0\n").find("scene.pairs must be at least 1") != std::string::npos);
  CHECK(error_of("just words\n").find("line 1: expected key = value") != std::string::npos);
  CHECK(error_of("scene.seed = 1\n").empty());
}

TEST_CASE("digest tracks every key") {
  const RunConfig base;
  const std::uint64_t d0 = config_digest(base);
  std::set<std::uint64_t> digests{d0};
  for (const auto& k : config_keys()) {
    RunConfig c;
    const std::string v = k.get(c);
    if (v == "true" || v == "false")
      k.set(c, v == "true" ? "false" : "true");
    else
      k.set(c, v + "1");
    CHECK_MESSAGE(digests.insert(config_digest(c)).second, k.key);
  }
}

TEST_CASE("seed override and validation") {
  RunConfig c;
  c.set_seed(42);
  CHECK(c.bench.seed == 42);
  CHECK(c.train.seed == 42);
  CHECK_NOTHROW(c.validate());
  c.train.finetune_lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("bundled desk config spells out the defaults") {
  const RunConfig c = load_config(std::string(G2A_SOURCE_DIR) + "/configs/desk.cfg");
  CHECK(describe(c) == describe(RunConfig{}));
  std::size_t listed = 0;
  std::ifstream is(std::string(G2A_SOURCE_DIR) + "/configs/desk.cfg");
  for (std::string l; std::getline(is, l);) listed += !l.empty() && l[0] != '#';
  CHECK(listed == config_keys().size());
}
