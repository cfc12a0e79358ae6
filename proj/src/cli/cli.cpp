#include "g2a/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "g2a/config.hpp"

namespace g2a {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// Canonical command order; the manifest lists stages in this order.
const std::vector<std::string> kStages = {
    "gen_scene", "simulate", "make_dataset", "pretrain", "adapt",        "finetune",         "baseline_kriging",
    "baseline_gp", "baseline_autoencoder", "evaluate", "ablate", "predict_route", "emit_figures"};

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Exclusive lock on a run directory, held for the life of one command.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / "manifest.lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw Error("run directory " + dir.string() + " is locked by another command (" + path_.string() +
                  "); remove it if no g2a process is running");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
    }
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

struct Options {
  std::string config;
  std::string run_dir;
  std::int64_t seed = -1;
  unsigned threads = 1;
};

struct Run {
  fs::path dir;
  RunConfig cfg;
  std::uint64_t digest = 0;
  unsigned threads = 1;
  json manifest;
  std::ostream& out;
  std::ostream& err;

  fs::path at(const std::string& rel) const { return dir / rel; }

  void require(const std::string& stage, const std::string& rel, const std::string& command) const {
    const bool recorded = manifest.contains("stages") && manifest["stages"].contains(stage);
    if (!recorded || !fs::exists(at(rel)))
      throw MissingArtifactError("missing " + rel + " in " + dir.string() + "; run `g2a " + command + "` first");
  }

  SeedBlock seeds() const { return {cfg.bench.seed, cfg.train.seed}; }

  void record(const std::string& stage, const std::string& status, std::vector<std::string> outputs) {
    json& st = manifest["stages"];
    json entry;
    entry["status"] = status;
    entry["outputs"] = std::move(outputs);
    st[stage] = std::move(entry);
    json ordered = json::object();
    for (const auto& s : kStages)
      if (st.contains(s)) ordered[s] = st[s];
    st = std::move(ordered);
    write_manifest();
  }

  void write_manifest() const {
    const fs::path tmp = at("manifest.json.tmp");
    {
      std::ofstream os(tmp, std::ios::binary);
      os << manifest.dump(2) << '\n';
      if (!os) throw Error("cannot write " + tmp.string());
    }
    fs::rename(tmp, at("manifest.json"));
  }

  Benchmark benchmark() const {
    require("make_dataset", "data", "make_dataset");
    return load_benchmark(cfg.bench, dir);
  }

  nn::DualTxModel checkpoint(const std::string& stage) const {
    const std::string rel = "checkpoints/" + stage + ".ckpt";
    require(stage, rel, stage);
    return nn::load_checkpoint(at(rel), cfg.train.arch);
  }
};

template <typename F>
void write_text(const fs::path& path, F&& body) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  body(os);
  if (!os) throw Error("write failed: " + path.string());
}

json config_object(const RunConfig& c) {
  json j = json::object();
  for (const auto& k : config_keys()) j[k.key] = k.get(c);
  return j;
}

RunConfig config_from_manifest(const json& m) {
  if (!m.contains("config") || !m["config"].is_object()) throw FormatError("manifest.json has no config block");
  std::string text;
  for (const auto& [k, v] : m["config"].items()) {
    if (!v.is_string()) throw FormatError("manifest.json: config value of " + k + " is not a string");
    text += k + " = " + v.get<std::string>() + "\n";
  }
  std::istringstream is(text);
  return parse_config(is);
}

Run open_run(const Options& o, std::ostream& out, std::ostream& err) {
  Run r{fs::path(o.run_dir), {}, 0, o.threads, json::object(), out, err};
  if (r.threads == 0) throw ConfigError("--threads must be at least 1");
  const fs::path mpath = r.at("manifest.json");
  const bool have_manifest = fs::exists(mpath);
  if (have_manifest) {
    std::ifstream is(mpath, std::ios::binary);
    try {
      r.manifest = json::parse(is);
    } catch (const json::exception& e) {
      throw FormatError("manifest.json: " + std::string(e.what()));
    }
  }
  if (!o.config.empty())
    r.cfg = load_config(o.config);
  else if (have_manifest)
    r.cfg = config_from_manifest(r.manifest);
  if (o.seed >= 0) r.cfg.set_seed(static_cast<std::uint64_t>(o.seed));
  r.cfg.validate();
  r.digest = config_digest(r.cfg);

  if (have_manifest) {
    const std::string old = r.manifest.value("config_digest", "");
    if (old != hex(r.digest))
      throw ConfigError("config digest " + hex(r.digest) + " differs from the one recorded in " + mpath.string() +
                        " (" + old + "); use a fresh --run-dir");
  } else {
    r.manifest["tool"] = "g2a";
    r.manifest["tool_version"] = tool_version;
    r.manifest["config_digest"] = hex(r.digest);
    r.manifest["seeds"] = {{"benchmark", r.cfg.bench.seed}, {"train", r.cfg.train.seed}};
    r.manifest["config"] = config_object(r.cfg);
    r.manifest["stages"] = json::object();
  }
  return r;
}

void warn(const Run& r, const StageReport& rep) {
  for (const auto& w : rep.warnings) r.err << "warning: " << rep.stage << ": " << w << '\n';
}

// --- commands --------------------------------------------------------------

void cmd_gen_scene(Run& r) {
  Benchmark b;
  b.scene = benchmark_scene(r.cfg.bench);
  save_benchmark(b, r.dir, part_scene);
  r.record("gen_scene", "done", {"scene.txt"});
  r.out << "scene: " << b.scene.buildings.size() << " buildings, " << b.scene.transmitters.size()
        << " transmitters\n";
}

Benchmark rebuild(const Run& r) {
  r.require("gen_scene", "scene.txt", "gen_scene");
  return build_benchmark(r.cfg.bench, ingest_scene(r.at("scene.txt")), r.threads);
}

void cmd_simulate(Run& r) {
  const Benchmark b = rebuild(r);
  save_benchmark(b, r.dir, part_maps);
  r.record("simulate", "done", {"pairs.txt", "maps"});
  r.out << "simulated " << b.pairs.size() << " pairs, " << 4 * b.pairs.size() << " maps\n";
}

void cmd_make_dataset(Run& r) {
  r.require("simulate", "pairs.txt", "simulate");
  const Benchmark b = rebuild(r);
  save_benchmark(b, r.dir, part_data);
  r.record("make_dataset", "done", {"data"});
  std::size_t ng = 0, na = 0;
  for (const auto& p : b.pairs) {
    ng += p.ground_i.size() + p.ground_j.size();
    na += p.aerial_i.size() + p.aerial_j.size();
  }
  r.out << "dataset: " << ng << " ground and " << na << " aerial samples\n";
}

/// Shared tail of the three training commands: the checkpoint is always
/// written, so a disabled stage passes its input through.
void finish_stage(Run& r, const std::string& stage, const nn::DualTxModel& model, const StageReport* rep) {
  const std::string ckpt = "checkpoints/" + stage + ".ckpt";
  const std::string report = "reports/" + stage + ".txt";
  fs::create_directories(r.at("checkpoints"));
  nn::save_checkpoint(model, r.at(ckpt));
  write_text(r.at(report), [&](std::ostream& os) {
    if (rep)
      rep->write(os);
    else
      os << "stage " << stage << "\nskipped\n";
  });
  r.record(stage, rep ? "done" : "skipped", {ckpt, report});
  if (rep) {
    warn(r, *rep);
    r.out << stage << ": " << rep->losses.size() << " epochs, final loss " << format_exact(rep->losses.back())
          << '\n';
  } else {
    r.out << stage << ": skipped (disabled in config), checkpoint passed through\n";
  }
}

void cmd_pretrain(Run& r) {
  const Benchmark b = r.benchmark();
  const TrainConfig& t = r.cfg.train;
  auto model = nn::DualTxModel::create(t.arch, b.norm(), derive_seed(t.seed, "model"));
  if (t.pretrain) {
    const StageReport rep = pretrain(model, b, t);
    finish_stage(r, "pretrain", model, &rep);
  } else {
    finish_stage(r, "pretrain", model, nullptr);
  }
}

void cmd_adapt(Run& r) {
  auto model = r.checkpoint("pretrain");
  const Benchmark b = r.benchmark();
  if (r.cfg.train.adda) {
    const StageReport rep = adapt(model, b, r.cfg.train);
    finish_stage(r, "adapt", model, &rep);
  } else {
    init_target_encoder(model);
    finish_stage(r, "adapt", model, nullptr);
  }
}

void cmd_finetune(Run& r) {
  auto model = r.checkpoint("adapt");
  const Benchmark b = r.benchmark();
  if (r.cfg.train.finetune) {
    const StageReport rep = finetune(model, b, r.cfg.train);
    finish_stage(r, "finetune", model, &rep);
  } else {
    finish_stage(r, "finetune", model, nullptr);
  }
}

void write_report_file(const Run& r, const std::string& rel, const std::vector<RouteReport>& reps) {
  write_text(r.at(rel), [&](std::ostream& os) { write_route_reports(os, reps, r.digest, r.seeds()); });
}

void cmd_baseline(Run& r, const std::string& method) {
  if (method == "all") {
    for (const char* m : {"kriging", "gp", "autoencoder"}) cmd_baseline(r, m);
    return;
  }
  const Benchmark b = r.benchmark();
  const std::string rel = "reports/baseline_" + method + ".txt";
  std::vector<std::string> outputs{rel};
  RouteReport rep;
  if (method == "kriging") {
    rep = evaluate_kriging(b, r.cfg.eval, r.cfg.train.seed);
  } else if (method == "gp") {
    rep = evaluate_gp(b, r.cfg.eval, r.cfg.train.seed);
  } else if (method == "autoencoder") {
    const AutoencoderResult ae = train_autoencoder(b, r.cfg.train);
    warn(r, ae.report);
    fs::create_directories(r.at("checkpoints"));
    nn::save_checkpoint(ae.model, r.at("checkpoints/autoencoder.ckpt"));
    write_text(r.at("reports/autoencoder_train.txt"), [&](std::ostream& os) { ae.report.write(os); });
    outputs.push_back("checkpoints/autoencoder.ckpt");
    outputs.push_back("reports/autoencoder_train.txt");
    rep = evaluate_model("autoencoder", ae.model, b, false);
  } else {
    throw ConfigError("--method must be kriging, gp, autoencoder or all, got " + method);
  }
  write_report_file(r, rel, {rep});
  r.record("baseline_" + method, "done", outputs);
  r.out << method << ": mean route RMSE " << std::fixed << std::setprecision(2) << rep.agg.mean << " dB over "
        << rep.per_route.size() << " routes\n";
  r.out.unsetf(std::ios::floatfield);
}

void cmd_evaluate(Run& r) {
  const auto model = r.checkpoint("finetune");
  const Benchmark b = r.benchmark();
  std::vector<RouteReport> reps{evaluate_model("proposed", model, b, r.cfg.train.dual_cell)};
  for (const char* m : {"kriging", "gp", "autoencoder"}) {
    const std::string stage = std::string("baseline_") + m;
    if (!r.manifest["stages"].contains(stage)) continue;
    const fs::path p = r.at("reports/" + stage + ".txt");
    std::ifstream is(p, std::ios::binary);
    if (!is) throw MissingArtifactError("missing " + p.string() + "; run `g2a baseline --method " + m + "`");
    RouteReportFile f = read_route_reports(is);
    if (f.config_digest != r.digest) throw FormatError(p.string() + " was written under a different config");
    for (auto& rep : f.reports) reps.push_back(std::move(rep));
  }
  write_report_file(r, "reports/evaluation.txt", reps);

  std::ostringstream table;
  table << std::fixed << std::setprecision(2);
  table << std::left << std::setw(14) << "method" << std::right << std::setw(9) << "best" << std::setw(9) << "mean"
        << std::setw(9) << "worst" << std::setw(16) << "proposed_gain%" << '\n';
  for (const auto& rep : reps) {
    table << std::left << std::setw(14) << rep.method << std::right << std::setw(9) << rep.agg.best << std::setw(9)
          << rep.agg.mean << std::setw(9) << rep.agg.worst;
    if (rep.method == "proposed")
      table << std::setw(16) << "-";
    else
      table << std::setw(16) << improvement_pct(reps[0].agg.mean, rep.agg.mean);
    table << '\n';
  }
  write_text(r.at("reports/table2.txt"), [&](std::ostream& os) { os << table.str(); });
  r.record("evaluate", "done", {"reports/evaluation.txt", "reports/table2.txt"});
  r.out << table.str();
}

void cmd_ablate(Run& r) {
  const Benchmark b = r.benchmark();
  auto rows = standard_rows(r.cfg.train);
  ablation_suite(b, rows);
  write_text(r.at("reports/ablation.txt"),
             [&](std::ostream& os) { write_ablation(os, rows, r.digest, r.seeds()); });
  r.record("ablate", "done", {"reports/ablation.txt"});
  r.out << std::fixed << std::setprecision(2);
  for (const auto& row : rows) {
    for (const auto& s : row.stages) warn(r, s);
    r.out << std::left << std::setw(14) << row.label << std::right << std::setw(9) << row.report.agg.mean
          << " dB\n";
  }
  r.out.unsetf(std::ios::floatfield);
}

std::size_t pick(std::int64_t v, std::size_t n, const char* what) {
  if (v < 0 || static_cast<std::size_t>(v) >= n)
    throw ConfigError(std::string(what) + " must be in [0, " + std::to_string(n) + ")");
  return static_cast<std::size_t>(v);
}

void cmd_predict_route(Run& r, const std::string& routes_path, std::int64_t pair, std::int64_t stream,
                       const std::string& name) {
  const auto model = r.checkpoint("finetune");
  const Benchmark b = r.benchmark();
  const PairData& p = b.pairs[pick(pair, b.pairs.size(), "--pair")];
  const int s = static_cast<int>(pick(stream, 2, "--stream"));
  std::ifstream is(routes_path, std::ios::binary);
  if (!is) throw MissingArtifactError("cannot open route file " + routes_path);
  const std::vector<Route> routes = read_routes(is);
  const GridSample ground = ground_input(b, p, s);
  std::vector<std::string> outputs;
  for (std::size_t i = 0; i < routes.size(); ++i) {
    const auto pred = predict_route(model, ground, routes[i], decoder_for(s, r.cfg.train.dual_cell));
    const auto truth = truth_profile(p, s, routes[i]);
    const std::string rel = "predictions/" + name + "_" + std::to_string(i) + ".csv";
    emit_profile(routes[i], pred, truth, r.at(rel));
    outputs.push_back(rel);
    r.out << rel << ": rmse " << format_exact(route_rmse(pred, truth)) << " dB\n";
  }
  r.record("predict_route", "done", outputs);
}

/// Route profiles for every test route, plus map slices of the first pair:
/// prediction vs truth, and the masked reconstruction after pretraining.
void cmd_emit_figures(Run& r) {
  const auto model = r.checkpoint("finetune");
  const Benchmark b = r.benchmark();
  const auto pre = r.checkpoint("pretrain");
  const TrainConfig& t = r.cfg.train;
  std::vector<std::string> outputs;

  for (std::size_t k = 0; k < b.pairs.size(); ++k) {
    const PairData& p = b.pairs[k];
    for (int s = 0; s < 2; ++s) {
      const RadioMap map = predict_map(model, ground_input(b, p, s), decoder_for(s, t.dual_cell), "");
      for (std::size_t i = 0; i < p.test_routes.size(); ++i) {
        const std::string rel =
            "figures/profile_p" + std::to_string(k) + "_s" + std::to_string(s) + "_r" + std::to_string(i) + ".csv";
        emit_profile(p.test_routes[i], profile_from_map(map, p.test_routes[i]), truth_profile(p, s, p.test_routes[i]),
                     r.at(rel));
        outputs.push_back(rel);
      }
    }
  }

  const PairData& p = b.pairs.front();
  const std::size_t nz = p.grid.nz();
  for (int s = 0; s < 2; ++s) {
    const std::string cell = b.scene.transmitters[p.tx(s)].cell_id;
    const RadioMap pred = predict_map(model, ground_input(b, p, s), decoder_for(s, t.dual_cell), cell);

    const GridSample masked = masked_source_input(b, p, s, t.mask, t.seed, 0);
    RadioMap masked_map = p.source(s);
    for (std::size_t v = 0; v < masked_map.values.size(); ++v)
      masked_map.values[v] = static_cast<float>(masked.mask[v] > 0 ? b.norm().denormalize(masked.value[v])
                                                                    : std::numeric_limits<double>::quiet_NaN());
    const nn::Tensor y =
        nn::decode(pre.decoder(decoder_for(s, t.dual_cell)), nn::encode(pre.source_encoder, nn::to_tensor(masked)));
    RadioMap recon = p.source(s);
    for (std::size_t v = 0; v < recon.values.size(); ++v)
      recon.values[v] = static_cast<float>(pre.norm.denormalize(y[v]));

    const std::vector<std::pair<std::string, const RadioMap*>> maps = {{"pred", &pred},
                                                                        {"truth", &p.target(s)},
                                                                        {"source", &p.source(s)},
                                                                        {"masked", &masked_map},
                                                                        {"recon", &recon}};
    for (std::size_t level : {std::size_t{0}, nz / 2, nz - 1})
      for (const auto& [tag, m] : maps) {
        const std::string rel = "figures/slice_" + cell + "_" + tag + "_z" + std::to_string(level) + ".csv";
        emit_slice(*m, level, r.at(rel));
        outputs.push_back(rel);
      }
  }
  r.record("emit_figures", "done", outputs);
  r.out << "wrote " << outputs.size() << " figure files under " << r.at("figures").string() << '\n';
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return exit_config;
  if (dynamic_cast<const MissingArtifactError*>(&e)) return exit_missing;
  if (dynamic_cast<const NumericalError*>(&e)) return exit_numerical;
  if (dynamic_cast<const FormatError*>(&e)) return exit_format;
  return exit_other;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"g2a: ground-to-aerial radio map reconstruction"};
  app.set_version_flag("--version", std::string(tool_version));
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value config file (defaults to the run's manifest)");
    sub->add_option("--run-dir", o.run_dir, "run directory")->required();
    sub->add_option("--seed", o.seed, "overrides scene.seed and train.seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--threads", o.threads, "worker threads for simulation");
    return sub;
  };

  std::string method = "all", routes_path, pred_name = "route";
  std::int64_t pair = 0, stream = 0;
  std::vector<std::pair<CLI::App*, std::function<void(Run&)>>> commands;
  auto add = [&](const char* name, const char* help, std::function<void(Run&)> fn) {
    CLI::App* sub = common(app.add_subcommand(name, help));
    commands.emplace_back(sub, std::move(fn));
    return sub;
  };
  add("gen_scene", "generate the synthetic city scene", cmd_gen_scene);
  add("simulate", "compute source and target radio maps for every pair", cmd_simulate);
  add("make_dataset", "draw ground and aerial samples and flight routes", cmd_make_dataset);
  add("pretrain", "masked reconstruction on simulated maps", cmd_pretrain);
  add("adapt", "adversarial alignment of the target encoder", cmd_adapt);
  add("finetune", "decoder fine-tuning on aerial samples", cmd_finetune);
  add("baseline", "run a baseline on the test routes", [&](Run& r) { cmd_baseline(r, method); })
      ->add_option("--method", method, "kriging, gp, autoencoder or all");
  add("evaluate", "route RMSE of the trained model next to finished baselines", cmd_evaluate);
  add("ablate", "train and score the six ablation rows", cmd_ablate);
  {
    CLI::App* sub = add("predict_route", "predict RSRP along routes from a file",
                        [&](Run& r) { cmd_predict_route(r, routes_path, pair, stream, pred_name); });
    sub->add_option("--routes", routes_path, "route file")->required();
    sub->add_option("--pair", pair, "pair index");
    sub->add_option("--stream", stream, "0 or 1");
    sub->add_option("--name", pred_name, "output file stem under predictions/");
  }
  add("emit_figures", "write plot-ready CSVs for profiles and map slices", cmd_emit_figures);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    for (auto& [sub, fn] : commands) {
      if (!sub->parsed()) continue;
      const DirLock lock(o.run_dir);
      Run run = open_run(o, out, err);
      fn(run);
    }
  } catch (const std::exception& e) {
    err << "g2a: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return exit_ok;
}

}  // namespace g2a
