// lungquant: phantom generation, training, segmentation, quantification and the HITL loop.
//
// Exit codes: 0 success, 1 internal failure, 2 invalid input.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lungquant/dataset.hpp"
#include "lungquant/hitl.hpp"
#include "lungquant/hitl_server.hpp"
#include "lungquant/phantom.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/trainer.hpp"
#include "lungquant/vbnet.hpp"
#include "lungquant/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lungquant;

namespace {

constexpr const char* kVersion = "0.1.0";

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
};

struct Overrides {
  std::optional<int> epochs;
  std::optional<double> lr;
  std::vector<int> patch_size;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  auto j = read_json_file(path);
  if (!j.is_object()) throw InputError("config " + path + " must hold a JSON object");
  return j;
}

fs::path beside(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

void make_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  make_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("short write to " + path.string());
}

void snapshot(const fs::path& path, const std::string& command, const json& effective) {
  make_parent(path);
  write_json_file(path, {{"tool", "lungquant"}, {"version", kVersion}, {"command", command}, {"config", effective}});
}

json range_json(const std::vector<double>& r) {
  if (r.size() != 2) throw InputError("a range needs exactly two values lo,hi");
  return json::array({r[0], r[1]});
}

HuRange range_from(const json& j, HuRange fallback) {
  if (j.is_null()) return fallback;
  HuRange r{j.at(0).get<double>(), j.at(1).get<double>()};
  r.validate("range");
  return r;
}

/// Applies --seed/--epochs/--lr/--patch-size onto a config holding "hyper" and "model_seed".
void apply_training_overrides(json& cfg, const Common& c, const Overrides& o) {
  if (!cfg.contains("hyper")) cfg["hyper"] = json::object();
  if (c.seed) {
    cfg["model_seed"] = *c.seed;
    cfg["hyper"]["seed"] = *c.seed;
  }
  if (o.epochs) cfg["hyper"]["epochs"] = *o.epochs;
  if (o.lr) cfg["hyper"]["learning_rate"] = *o.lr;
  if (!o.patch_size.empty()) {
    if (o.patch_size.size() == 1) cfg["hyper"]["patch_size"] = {o.patch_size[0], o.patch_size[0], o.patch_size[0]};
    else if (o.patch_size.size() == 3) cfg["hyper"]["patch_size"] = o.patch_size;
    else throw InputError("--patch-size takes one or three values");
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hitl::fnv1a(bytes);
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
  int n = 1;
  std::string out;
  std::vector<double> ggo, consolidation;
};

int cmd_phantom(const Common& c, const PhantomArgs& a, const CLI::App& sub) {
  json cfg = load_config(c.config);
  if (sub.count("--n") || !cfg.contains("n")) cfg["n"] = a.n;
  if (c.seed) cfg["seed"] = *c.seed;
  if (!cfg.contains("seed")) cfg["seed"] = 1;
  if (!cfg.contains("base")) cfg["base"] = json::object();
  if (!a.ggo.empty()) cfg["base"]["ggo_range"] = range_json(a.ggo);
  if (!a.consolidation.empty()) cfg["base"]["consolidation_range"] = range_json(a.consolidation);
  const auto base = phantom_spec_from_json(cfg["base"]);
  const auto opt = cohort_options_from_json(cfg.value("cohort", json::object()));
  const int n = cfg["n"].get<int>();
  if (n < 1) throw InputError("--n must be >= 1");
  const auto seed = cfg["seed"].get<std::uint64_t>();
  json effective{{"n", n}, {"seed", seed}, {"base", to_json(base)}, {"cohort", to_json(opt)}};

  const auto cohort = gen_cohort(n, base, seed, opt);
  const fs::path out(a.out);
  write_dataset(out, cohort, effective);
  snapshot(out / "config.json", "phantom", effective);
  std::cout << "wrote " << n << " phantom case(s) to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out;
};

std::vector<TrainingCase> training_cases(const fs::path& dir, const Manifest& m, const std::vector<std::string>& ids) {
  std::vector<TrainingCase> out;
  for (const auto& id : ids) {
    auto lc = load_case(dir, m.find(id));
    out.push_back({lc.id, std::move(lc.volume), std::move(lc.infection)});
  }
  return out;
}

int cmd_train(const Common& c, const Overrides& o, const TrainArgs& a) {
  json cfg = load_config(c.config);
  apply_training_overrides(cfg, c, o);
  const fs::path data(a.data);
  const auto manifest = read_manifest(data);
  const auto model_cfg = VbNetConfig::from_json(cfg.value("model", json::object()));
  auto hyper = hyperparams_from_json(cfg["hyper"]);
  const std::uint64_t model_seed = cfg.value("model_seed", std::uint64_t{1});
  const auto holdout_ids = cfg.value("holdout", std::vector<std::string>{});
  std::vector<std::string> train_ids;
  for (const auto& id : manifest.ids())
    if (std::find(holdout_ids.begin(), holdout_ids.end(), id) == holdout_ids.end()) train_ids.push_back(id);
  if (train_ids.empty()) throw InputError("no training cases left after removing the holdout");

  const int epochs = hyper.epochs;
  if (epochs < 0) throw InputError("--epochs must be >= 0");
  {
    auto check = hyper;
    check.epochs = std::max(epochs, 1);
    check.validate(model_cfg);
  }
  json effective{{"data", a.data},
                 {"model", model_cfg.to_json()},
                 {"model_seed", model_seed},
                 {"hyper", to_json(hyper)},
                 {"holdout", holdout_ids},
                 {"training_ids", train_ids}};
  const fs::path out(a.out);
  make_parent(out);
  snapshot(beside(out, ".config.json"), "train", effective);

  auto model = build_vbnet(model_cfg, model_seed);
  std::string record;
  if (epochs > 0) {
    const auto train_set = training_cases(data, manifest, train_ids);
    const auto holdout = training_cases(data, manifest, holdout_ids);
    auto result = train(std::move(model), train_set, hyper, holdout, [](const EpochRecord& e) {
      std::cerr << "epoch " << e.epoch << " loss " << e.loss << " (" << e.seconds << " s)\n";
    });
    model = std::move(result.model);
    for (const auto& e : result.record.epochs) {
      auto j = to_json(e);
      j.erase("seconds");
      record += j.dump() + "\n";
    }
    for (const auto& w : result.record.warnings) std::cerr << "warning: " << w << "\n";
  }
  save_checkpoint(model, out);
  write_text(beside(out, ".train.jsonl"), record);
  std::cout << "wrote checkpoint " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// segment

struct SegmentArgs {
  std::string checkpoint, volume, out, data, out_dir;
  double threshold = kDefaultThreshold;
};

int cmd_segment(const Common& c, const SegmentArgs& a, const CLI::App& sub) {
  json cfg = load_config(c.config);
  if (sub.count("--threshold") || !cfg.contains("threshold")) cfg["threshold"] = a.threshold;
  const double threshold = cfg["threshold"].get<double>();
  if (!(threshold >= 0.0 && threshold < 1.0)) throw InputError("--threshold must be in [0, 1)");
  const bool batch = !a.data.empty();
  if (batch == !a.volume.empty()) throw InputError("segment needs either --volume/--out or --data/--out-dir");
  if (batch ? a.out_dir.empty() : a.out.empty()) throw InputError(batch ? "--out-dir is required" : "--out is required");

  const auto model = load_checkpoint(a.checkpoint);
  char note[80];
  std::snprintf(note, sizeof note, "lungquant segment t=%.4g ckpt=%s", threshold,
                hex64(file_hash(a.checkpoint)).c_str());
  json effective{{"checkpoint", a.checkpoint}, {"threshold", threshold}, {"model", model.config().to_json()}};

  auto run_one = [&](const Volume& v, const fs::path& out) {
    make_parent(out);
    write_nifti(segment(model, v, threshold), out, note);
  };
  if (!batch) {
    effective["volume"] = a.volume;
    snapshot(beside(a.out, ".config.json"), "segment", effective);
    run_one(read_volume(a.volume), a.out);
    std::cout << "wrote " << a.out << "\n";
    return 0;
  }
  const fs::path data(a.data), out_dir(a.out_dir);
  const auto manifest = read_manifest(data);
  effective["data"] = a.data;
  fs::create_directories(out_dir);
  snapshot(out_dir / "config.json", "segment", effective);
  for (const auto& cs : manifest.cases) run_one(read_volume(data / cs.volume), out_dir / (cs.id + ".nii.gz"));
  std::cout << "wrote " << manifest.cases.size() << " mask(s) to " << out_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// quantify

struct QuantifyArgs {
  std::string volume, mask, regions, out;
  std::vector<double> ggo, consolidation;
};

QuantOptions quant_options(json& cfg, const std::vector<double>& ggo, const std::vector<double>& cons) {
  if (!ggo.empty()) cfg["ggo_range"] = range_json(ggo);
  if (!cons.empty()) cfg["consolidation_range"] = range_json(cons);
  QuantOptions q;
  q.ggo = range_from(cfg.value("ggo_range", json()), q.ggo);
  q.consolidation = range_from(cfg.value("consolidation_range", json()), q.consolidation);
  if (cfg.contains("histogram_edges")) q.histogram_edges = cfg["histogram_edges"].get<std::vector<double>>();
  cfg["ggo_range"] = {q.ggo.lo, q.ggo.hi};
  cfg["consolidation_range"] = {q.consolidation.lo, q.consolidation.hi};
  cfg["histogram_edges"] = q.histogram_edges;
  return q;
}

int cmd_quantify(const Common& c, const QuantifyArgs& a) {
  json cfg = load_config(c.config);
  const auto opt = quant_options(cfg, a.ggo, a.consolidation);
  const auto volume = read_volume(a.volume);
  const auto mask = read_label_mask(a.mask);
  const auto regions = read_regions(a.regions);
  const auto report = quantify(volume, mask, regions, opt);
  cfg["volume"] = a.volume;
  cfg["mask"] = a.mask;
  cfg["regions"] = a.regions;
  snapshot(beside(a.out, ".config.json"), "quantify", cfg);
  make_parent(a.out);
  write_json_file(a.out, to_json(report));
  std::cout << "infection " << report.infection_volume_cm3 << " cm3, POI " << report.poi.lung.poi << " %\n";
  return 0;
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
  std::string ref, pred, volume, regions, out, case_id, data, pred_dir;
};

int cmd_compare(const Common& c, const CompareArgs& a) {
  json cfg = load_config(c.config);
  const bool batch = !a.data.empty();
  if (batch == !a.ref.empty()) throw InputError("compare needs either --ref/--pred/--volume/--regions or --data/--pred-dir");
  if (!batch) {
    if (a.pred.empty() || a.volume.empty() || a.regions.empty())
      throw InputError("--pred, --volume and --regions are required with --ref");
    const auto row = compare_masks(read_label_mask(a.ref), read_label_mask(a.pred), read_volume(a.volume),
                                   read_regions(a.regions), a.case_id);
    cfg.update({{"ref", a.ref}, {"pred", a.pred}, {"volume", a.volume}, {"regions", a.regions}, {"case_id", a.case_id}});
    snapshot(beside(a.out, ".config.json"), "compare", cfg);
    write_text(a.out, evaluation_csv_header() + "\n" + evaluation_csv_line(row) + "\n");
    std::cout << "dice " << row.dice << "\n";
    return 0;
  }
  if (a.pred_dir.empty()) throw InputError("--pred-dir is required with --data");
  const fs::path data(a.data), preds(a.pred_dir);
  const auto manifest = read_manifest(data);
  std::vector<EvaluationRow> rows;
  std::string lines = evaluation_csv_header() + "\n";
  for (const auto& cs : manifest.cases) {
    const auto lc = load_case(data, cs);
    rows.push_back(compare_masks(lc.infection, read_label_mask(preds / (cs.id + ".nii.gz")), lc.volume, lc.regions, cs.id));
    lines += evaluation_csv_line(rows.back()) + "\n";
  }
  cfg.update({{"data", a.data}, {"pred_dir", a.pred_dir}});
  snapshot(beside(a.out, ".config.json"), "compare", cfg);
  write_text(a.out, aggregate_csv(aggregate_rows(rows)));
  write_text(beside(a.out, ".rows.csv"), lines);
  std::cout << "compared " << rows.size() << " case(s)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// hitl-serve / hitl-simulate

struct HitlArgs {
  std::string data, session_dir, out, host = "127.0.0.1";
  int port = 8080;
};

/// Session config with batches resolved from "batch_sizes"/"holdout_count" when not listed explicitly.
json resolve_session(json cfg, const Manifest& m) {
  if (!cfg.contains("batches")) {
    if (!cfg.contains("batch_sizes")) throw InputError("session config needs \"batches\" or \"batch_sizes\"");
    const auto sizes = cfg["batch_sizes"].get<std::vector<int>>();
    const int holdout_count = cfg.value("holdout_count", 1);
    const auto ids = m.ids();
    int scheduled = 0;
    for (int s : sizes) scheduled += s;
    if (holdout_count < 1 || scheduled + holdout_count > static_cast<int>(ids.size()))
      throw InputError("dataset has " + std::to_string(ids.size()) + " cases, session needs " +
                       std::to_string(scheduled + holdout_count));
    cfg["batches"] = hitl::make_batches({ids.begin(), ids.begin() + scheduled}, sizes);
    cfg["holdout"] = std::vector<std::string>(ids.begin() + scheduled, ids.begin() + scheduled + holdout_count);
  }
  if (!cfg.contains("holdout")) throw InputError("session config needs \"holdout\" or \"holdout_count\"");
  return cfg;
}

struct LoadedSession {
  hitl::SessionConfig config;
  hitl::DataStore data;
  std::map<std::string, LabelMask> truth;
  json effective;
};

LoadedSession load_session_inputs(const Common& c, const Overrides& o, const HitlArgs& a) {
  json cfg = load_config(c.config);
  apply_training_overrides(cfg, c, o);
  const fs::path data(a.data);
  const auto manifest = read_manifest(data);
  cfg = resolve_session(cfg, manifest);
  LoadedSession s;
  s.config = hitl::session_config_from_json(cfg);
  s.config.validate();
  std::vector<std::string> ids = s.config.holdout;
  for (const auto& b : s.config.batches) ids.insert(ids.end(), b.begin(), b.end());
  for (const auto& id : ids) {
    auto lc = load_case(data, manifest.find(id));
    s.truth.emplace(id, lc.infection);
    s.data.volumes.emplace(id, std::move(lc.volume));
  }
  for (const auto& id : s.config.holdout) s.data.references.emplace(id, s.truth.at(id));
  s.effective = to_json(s.config);
  s.effective["data"] = a.data;
  if (cfg.contains("corrector")) s.effective["corrector"] = cfg["corrector"];
  if (cfg.contains("max_iterations")) s.effective["max_iterations"] = cfg["max_iterations"];
  return s;
}

hitl::Session open_or_create(const fs::path& dir, LoadedSession& in) {
  if (fs::exists(dir / hitl::Session::kEventLog)) {
    auto s = hitl::Session::open(dir, std::move(in.data));
    if (to_json(s.config()) != to_json(in.config))
      throw InputError("session in " + dir.string() + " was started with a different configuration");
    return s;
  }
  return hitl::Session::create(dir, in.config, std::move(in.data));
}

int cmd_hitl_serve(const Common& c, const Overrides& o, const HitlArgs& a) {
  auto in = load_session_inputs(c, o, a);
  const fs::path dir(a.session_dir);
  fs::create_directories(dir);
  snapshot(dir / "serve.config.json", "hitl-serve", in.effective);

  // Signals are taken by a dedicated thread so that shutdown runs outside a handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  hitl::Service service(open_or_create(dir, in));
  hitl::Server server(service);
  const int port = a.port == 0 ? server.bind_any_port(a.host) : (server.bind_port(a.host, a.port) ? a.port : -1);
  if (port < 0) {
    std::cerr << "error: cannot bind " << a.host << ":" << a.port << "\n";
    return 1;
  }
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  std::cout << "session " << in.config.session_id << " listening on http://" << a.host << ":" << port << std::endl;
  server.listen_after_bind();
  // Unblock the waiter if the server stopped for any other reason.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  service.wait_idle();
  std::cout << "stopped; state " << service.with_session([](const hitl::Session& s) { return to_string(s.state()); })
            << std::endl;
  return 0;
}

int cmd_hitl_simulate(const Common& c, const Overrides& o, const HitlArgs& a) {
  auto in = load_session_inputs(c, o, a);
  hitl::SimulationOptions opt;
  if (in.effective.contains("corrector")) opt.corrector = corrector_from_json(in.effective["corrector"]);
  opt.max_iterations = in.effective.value("max_iterations", opt.max_iterations);
  in.effective["corrector"] = to_json(opt.corrector);
  in.effective["max_iterations"] = opt.max_iterations;
  const fs::path out(a.out);
  const fs::path dir = a.session_dir.empty() ? beside(out, ".session") : fs::path(a.session_dir);
  snapshot(beside(out, ".config.json"), "hitl-simulate", in.effective);
  auto truth = in.truth;
  auto session = open_or_create(dir, in);
  hitl::simulate(session, truth, opt, [](const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << " loss " << e.loss << "\n";
  });
  const auto report = session.time_report();
  const auto table = hitl::render_table(report);
  json j{{"schema", "lungquant.hitl_report/v1"},
         {"session_id", session.config().session_id},
         {"time_report", to_json(report)},
         {"iterations", session.records_json()},
         {"table", table}};
  make_parent(out);
  write_json_file(out, j);
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"lungquant: lung infection segmentation and quantification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Common common;
  Overrides ov;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--seed", common.seed, "Random seed");
    s->add_option("--config", common.config, "JSON config file; flags take precedence")->check(CLI::ExistingFile);
  };
  auto add_training = [&](CLI::App* s) {
    s->add_option("--epochs", ov.epochs, "Training epochs");
    s->add_option("--lr", ov.lr, "Learning rate");
    s->add_option("--patch-size", ov.patch_size, "Patch edge length, or x,y,z")->delimiter(',');
  };

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic cohort on disk");
  add_common(phantom);
  phantom->add_option("--n", pa.n, "Number of cases");
  phantom->add_option("--out", pa.out, "Output directory")->required();
  phantom->add_option("--ggo-range", pa.ggo, "Ground-glass HU range lo,hi")->delimiter(',')->expected(2);
  phantom->add_option("--consolidation-range", pa.consolidation, "Consolidation HU range lo,hi")->delimiter(',')->expected(2);

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train a segmentation network on a dataset");
  add_common(trainc);
  add_training(trainc);
  trainc->add_option("--data", ta.data, "Dataset directory")->required();
  trainc->add_option("--out", ta.out, "Checkpoint path")->required();

  SegmentArgs sa;
  auto* seg = app.add_subcommand("segment", "Segment infection with a trained checkpoint");
  add_common(seg);
  seg->add_option("--checkpoint", sa.checkpoint, "Checkpoint path")->required()->check(CLI::ExistingFile);
  seg->add_option("--volume", sa.volume, "Input CT volume")->check(CLI::ExistingFile);
  seg->add_option("--out", sa.out, "Output mask");
  seg->add_option("--data", sa.data, "Dataset directory (batch mode)");
  seg->add_option("--out-dir", sa.out_dir, "Output directory (batch mode)");
  seg->add_option("--threshold", sa.threshold, "Probability threshold in [0, 1)");

  QuantifyArgs qa;
  auto* quant = app.add_subcommand("quantify", "Infection volume, POI and opacity report");
  add_common(quant);
  quant->add_option("--volume", qa.volume, "CT volume")->required()->check(CLI::ExistingFile);
  quant->add_option("--mask", qa.mask, "Infection mask")->required()->check(CLI::ExistingFile);
  quant->add_option("--regions", qa.regions, "Segment label map")->required()->check(CLI::ExistingFile);
  quant->add_option("--out", qa.out, "Report JSON")->required();
  quant->add_option("--ggo-range", qa.ggo, "Ground-glass HU range lo,hi")->delimiter(',')->expected(2);
  quant->add_option("--consolidation-range", qa.consolidation, "Consolidation HU range lo,hi")->delimiter(',')->expected(2);

  CompareArgs ca;
  auto* cmp = app.add_subcommand("compare", "Accuracy of predicted masks against references");
  add_common(cmp);
  cmp->add_option("--ref", ca.ref, "Reference mask")->check(CLI::ExistingFile);
  cmp->add_option("--pred", ca.pred, "Predicted mask")->check(CLI::ExistingFile);
  cmp->add_option("--volume", ca.volume, "CT volume")->check(CLI::ExistingFile);
  cmp->add_option("--regions", ca.regions, "Segment label map")->check(CLI::ExistingFile);
  cmp->add_option("--case-id", ca.case_id, "Case id for the output row");
  cmp->add_option("--data", ca.data, "Dataset directory (batch mode)");
  cmp->add_option("--pred-dir", ca.pred_dir, "Directory of <id>.nii.gz predictions (batch mode)");
  cmp->add_option("--out", ca.out, "Output CSV")->required();

  HitlArgs ha;
  auto* serve = app.add_subcommand("hitl-serve", "Serve a HITL session over HTTP");
  add_common(serve);
  add_training(serve);
  serve->add_option("--data", ha.data, "Dataset directory")->required();
  serve->add_option("--session-dir", ha.session_dir, "Session directory (resumed if it exists)")->required();
  serve->add_option("--host", ha.host, "Bind address");
  serve->add_option("--port", ha.port, "Port; 0 picks a free one");

  auto* sim = app.add_subcommand("hitl-simulate", "Run a HITL session with a simulated annotator");
  add_common(sim);
  add_training(sim);
  sim->add_option("--data", ha.data, "Dataset directory")->required();
  sim->add_option("--out", ha.out, "Report JSON")->required();
  sim->add_option("--session-dir", ha.session_dir, "Session directory (default <out>.session)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*phantom) return cmd_phantom(common, pa, *phantom);
  if (*trainc) return cmd_train(common, ov, ta);
  if (*seg) return cmd_segment(common, sa, *seg);
  if (*quant) return cmd_quantify(common, qa);
  if (*cmp) return cmd_compare(common, ca);
  if (*serve) return cmd_hitl_serve(common, ov, ha);
  if (*sim) return cmd_hitl_simulate(common, ov, ha);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << "\n";
    return 2;
  } catch (const nifti::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == nifti::ErrorCode::io ? 1 : 2;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == CheckpointError::Code::io ? 1 : 2;
  } catch (const hitl::SessionIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
