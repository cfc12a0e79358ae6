#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "g2a/cli.hpp"
#include "g2a/config.hpp"

using namespace g2a;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# small enough for unit tests
scene.crop_x = 16
scene.crop_y = 16
scene.crop_z = 8
scene.levels = 8
scene.pairs = 2
eval.ground_per_cell = 3000
eval.aerial_ratio = 0.005
eval.train_routes = 2
eval.test_routes = 2
eval.route_alt_lo = 60
eval.route_alt_hi = 75
eval.route_margin = 10
eval.gp_max_points = 300
train.depth = 2
train.base_channels = 4
train.disc_hidden = 8
train.pretrain_epochs = 2
train.adda_epochs = 2
train.finetune_epochs = 2
train.disc_warmup_epochs = 1
train.autoencoder_epochs = 2
)";

struct Result {
  int code;
  std::string out, err;
};

Result g2a_run(std::vector<std::string> args) {
  args.insert(args.begin(), "g2a");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("g2a_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.cfg";
  std::ofstream(p) << kTiny;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

const std::vector<std::string> kChain = {"gen_scene", "simulate", "make_dataset", "pretrain", "adapt", "finetune"};

void chain(const fs::path& run, const std::vector<std::string>& extra) {
  for (const auto& c : kChain) {
    std::vector<std::string> args{c, "--run-dir", run.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const Result r = g2a_run(args);
    const std::string what = c + ": " + r.err;
    REQUIRE_MESSAGE(r.code == 0, what);
  }
}

}  // namespace

TEST_CASE("cli ordering guards and exit codes") {
  const fs::path dir = scratch("guards");
  const fs::path cfg = tiny_config(dir);
  const std::string run = (dir / "run").string();

  Result r = g2a_run({"simulate", "--config", cfg.string(), "--run-dir", run});
  CHECK(r.code == exit_missing);
  CHECK(r.err.find("g2a gen_scene") != std::string::npos);

  for (const char* c : {"gen_scene", "simulate", "make_dataset"})
    REQUIRE(g2a_run({c, "--config", cfg.string(), "--run-dir", run}).code == 0);
  r = g2a_run({"evaluate", "--run-dir", run});
  CHECK(r.code == exit_missing);
  CHECK(r.err.find("checkpoints/finetune.ckpt") != std::string::npos);
  CHECK(r.err.find("g2a finetune") != std::string::npos);
  CHECK(g2a_run({"finetune", "--run-dir", run}).err.find("g2a adapt") != std::string::npos);

  // A different config cannot write into an existing run.
  r = g2a_run({"pretrain", "--run-dir", run, "--seed", "9"});
  CHECK(r.code == exit_config);
  CHECK(r.err.find("fresh --run-dir") != std::string::npos);

  std::ofstream(dir / "bad.cfg") << "train.finetune_lr = -1\n";
  r = g2a_run({"gen_scene", "--config", (dir / "bad.cfg").string(), "--run-dir", (dir / "other").string()});
  CHECK(r.code == exit_config);
  CHECK(r.err.find("train.finetune_lr") != std::string::npos);

  std::ofstream(dir / "typo.cfg") << "train.finetune_rate = 1\n";
  r = g2a_run({"gen_scene", "--config", (dir / "typo.cfg").string(), "--run-dir", (dir / "other").string()});
  CHECK(r.code == exit_config);
  CHECK(r.err.find("unknown key train.finetune_rate") != std::string::npos);

  CHECK(g2a_run({"gen_scene"}).code == exit_config);
  CHECK(g2a_run({"baseline", "--run-dir", run, "--method", "svm"}).code == exit_config);

  std::ofstream(fs::path(run) / "data" / "aerial_bogus.csv") << "";
  std::ofstream(fs::path(run) / "pairs.txt", std::ios::app) << "1 2 three\n";
  r = g2a_run({"pretrain", "--run-dir", run});
  CHECK(r.code == exit_format);

  // The manifest is the lock.
  std::ofstream(fs::path(run) / "manifest.lock") << "1\n";
  r = g2a_run({"gen_scene", "--run-dir", run});
  CHECK(r.code == exit_other);
  CHECK(r.err.find("locked") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("cli chain is idempotent, thread independent and matches the library pipeline") {
  const fs::path dir = scratch("chain");
  const fs::path cfg = tiny_config(dir);
  const fs::path a = dir / "a", b = dir / "b", c = dir / "c";

  chain(a, {"--config", cfg.string(), "--threads", "1"});
  for (const char* extra : {"baseline", "evaluate", "ablate", "emit_figures"})
    REQUIRE(g2a_run({extra, "--run-dir", a.string()}).code == 0);
  const Result pr = g2a_run({"predict_route", "--run-dir", a.string(), "--routes",
                             (a / "data" / "routes_test_p1.txt").string(), "--pair", "1", "--stream", "1"});
  REQUIRE(pr.code == 0);
  const auto first = snapshot(a);
  CHECK(first.count("reports/table2.txt"));
  CHECK(first.count("reports/ablation.txt"));
  CHECK(first.count("predictions/route_0.csv"));
  CHECK(first.at("reports/evaluation.txt").find("method autoencoder") != std::string::npos);

  // Rerunning every command leaves every byte unchanged.
  chain(a, {});
  for (const char* extra : {"baseline", "evaluate", "ablate", "emit_figures"})
    REQUIRE(g2a_run({extra, "--run-dir", a.string()}).code == 0);
  REQUIRE(g2a_run({"predict_route", "--run-dir", a.string(), "--routes", (a / "data" / "routes_test_p1.txt").string(),
                   "--pair", "1", "--stream", "1"})
              .code == 0);
  CHECK(snapshot(a) == first);

  // More threads, same bytes.
  chain(b, {"--config", cfg.string(), "--threads", "3"});
  const auto threaded = snapshot(b);
  for (const auto& [name, bytes] : threaded)
    if (name != "manifest.json") CHECK_MESSAGE(first.at(name) == bytes, name);

  // The manifest alone is enough to reproduce the run.
  fs::create_directories(c);
  {
    std::string m = slurp(a / "manifest.json");
    m = m.substr(0, m.find("\"stages\"")) + "\"stages\": {}\n}\n";
    std::ofstream(c / "manifest.json") << m;
  }
  chain(c, {});
  for (const auto& [name, bytes] : snapshot(c))
    if (name != "manifest.json") CHECK_MESSAGE(first.at(name) == bytes, name);
  CHECK(slurp(c / "manifest.json") == slurp(b / "manifest.json"));

  // Same checkpoint as one in-process pipeline run.
  std::ifstream is(cfg);
  const RunConfig rc = parse_config(is);
  const PipelineResult direct = run_pipeline(build_benchmark(rc.bench), rc.train);
  std::ostringstream ck;
  nn::write_checkpoint(direct.model, ck);
  CHECK(ck.str() == first.at("checkpoints/finetune.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("cli disabled stages pass checkpoints through") {
  const fs::path dir = scratch("skip");
  const fs::path cfg = tiny_config(dir);
  std::ofstream(cfg, std::ios::app) << "train.adda = false\ntrain.pretrain = false\n";
  chain(dir / "run", {"--config", cfg.string()});
  const std::string manifest = slurp(dir / "run" / "manifest.json");
  CHECK(manifest.find("\"pretrain\": {\n      \"status\": \"skipped\"") != std::string::npos);
  CHECK(manifest.find("\"finetune\": {\n      \"status\": \"done\"") != std::string::npos);
  CHECK(slurp(dir / "run" / "reports" / "adapt.txt") == "stage adapt\nskipped\n");

  std::ifstream is(cfg);
  const RunConfig rc = parse_config(is);
  const PipelineResult direct = run_pipeline(build_benchmark(rc.bench), rc.train);
  std::ostringstream ck;
  nn::write_checkpoint(direct.model, ck);
  CHECK(ck.str() == slurp(dir / "run" / "checkpoints" / "finetune.ckpt"));
  fs::remove_all(dir);
}
