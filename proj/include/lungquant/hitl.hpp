#pragma once

// Human-in-the-loop annotation engine. Batch 0 is annotated from scratch;
// every later batch is pre-segmented by the latest model and corrected.
// Each state change is appended to an event log so a session can be
// reopened after a crash by replaying the log.

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lungquant/grid.hpp"
#include "lungquant/phantom.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/rle.hpp"
#include "lungquant/trainer.hpp"
#include "lungquant/vbnet.hpp"

namespace lungquant::hitl {

enum class Phase { awaiting_annotation, training, serving_proposals, converged };

/// training(k): iteration k runs next. serving_proposals(k): batch k is out for correction.
struct State {
  Phase phase = Phase::awaiting_annotation;
  int index = 0;
  bool operator==(const State&) const = default;
};

inline std::string to_string(const State& s) {
  switch (s.phase) {
    case Phase::awaiting_annotation: return "awaiting_annotation";
    case Phase::training: return "training(" + std::to_string(s.index) + ")";
    case Phase::serving_proposals: return "serving_proposals(" + std::to_string(s.index) + ")";
    case Phase::converged: return "converged";
  }
  return "?";
}

class StateError : public std::logic_error {
 public:
  explicit StateError(const std::string& what) : std::logic_error(what) {}
};

class UnknownVolume : public std::invalid_argument {
 public:
  explicit UnknownVolume(const std::string& id) : std::invalid_argument("unknown volume " + id) {}
};

class StaleProposal : public std::invalid_argument {
 public:
  explicit StaleProposal(const std::string& what) : std::invalid_argument(what) {}
};

class SessionIoError : public std::runtime_error {
 public:
  explicit SessionIoError(const std::string& what) : std::runtime_error(what) {}
};

struct SessionConfig {
  std::string session_id = "session";
  /// Volume ids per batch; batch 0 is annotated without model help.
  std::vector<std::vector<std::string>> batches;
  /// Fixed evaluation set, never trained on.
  std::vector<std::string> holdout;
  VbNetConfig model;
  std::uint64_t model_seed = 1;
  Hyperparams hyper;
  double epsilon = 0.005;
  bool warm_start = true;

  void validate() const {
    if (batches.empty()) throw std::invalid_argument("session: at least one batch is required");
    if (holdout.empty()) throw std::invalid_argument("session: holdout set must not be empty");
    std::set<std::string> seen;
    for (const auto& b : batches) {
      if (b.empty()) throw std::invalid_argument("session: empty batch");
      if (b.size() < batches[0].size()) throw std::invalid_argument("session: the first batch must be the smallest");
      for (const auto& id : b)
        if (!seen.insert(id).second) throw std::invalid_argument("session: volume listed twice: " + id);
    }
    for (const auto& id : holdout)
      if (!seen.insert(id).second) throw std::invalid_argument("session: holdout volume also scheduled: " + id);
    if (!(epsilon >= 0.0)) throw std::invalid_argument("session: epsilon must be >= 0");
    model.validate();
    hyper.validate(model);
  }

  int batch_of(const std::string& id) const {
    for (std::size_t b = 0; b < batches.size(); ++b)
      for (const auto& v : batches[b])
        if (v == id) return static_cast<int>(b);
    return -1;
  }
};

/// Splits `ids`, in order, into consecutive batches of the given sizes.
inline std::vector<std::vector<std::string>> make_batches(const std::vector<std::string>& ids,
                                                         const std::vector<int>& sizes) {
  std::size_t total = 0;
  for (int n : sizes) {
    if (n <= 0) throw std::invalid_argument("batch sizes must be positive");
    total += static_cast<std::size_t>(n);
  }
  if (total != ids.size())
    throw std::invalid_argument("batch sizes sum to " + std::to_string(total) + " but " + std::to_string(ids.size()) +
                                " volumes were given");
  for (int n : sizes)
    if (n < sizes.front()) throw std::invalid_argument("the first batch must be the smallest");
  std::vector<std::vector<std::string>> out;
  auto it = ids.begin();
  for (int n : sizes) {
    out.emplace_back(it, it + n);
    it += n;
  }
  return out;
}

inline nlohmann::json to_json(const SessionConfig& c) {
  return {{"session_id", c.session_id}, {"batches", c.batches},     {"holdout", c.holdout},
          {"model", c.model.to_json()}, {"model_seed", c.model_seed}, {"hyper", to_json(c.hyper)},
          {"epsilon", c.epsilon},       {"warm_start", c.warm_start}};
}

inline SessionConfig session_config_from_json(const nlohmann::json& j) {
  SessionConfig c;
  c.session_id = j.value("session_id", c.session_id);
  c.batches = j.at("batches").get<std::vector<std::vector<std::string>>>();
  c.holdout = j.at("holdout").get<std::vector<std::string>>();
  if (j.contains("model")) c.model = VbNetConfig::from_json(j["model"]);
  c.model_seed = j.value("model_seed", c.model_seed);
  if (j.contains("hyper")) c.hyper = hyperparams_from_json(j["hyper"]);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.warm_start = j.value("warm_start", c.warm_start);
  return c;
}

/// Images plus reference masks for the holdout set.
struct DataStore {
  std::map<std::string, Volume> volumes;
  std::map<std::string, LabelMask> references;
};

/// A finished mask for one volume, drawn from scratch or corrected from a proposal.
struct Annotation {
  std::string volume_id;
  LabelMask mask;
  double seconds = 0.0;
  std::string editor;
  /// Iteration whose model produced the proposal; absent for batch 0.
  std::optional<int> proposal_iteration;
  /// Voxels changed relative to the starting point (empty mask for batch 0).
  std::int64_t edit_cost = 0;
};

struct IterationRecord {
  int iteration = 0;
  std::string checkpoint;
  std::vector<std::string> training_ids;
  std::vector<CaseScore> holdout;
  double holdout_dice_mean = 0.0;
  double holdout_dice_sd = 0.0;
  /// Mean |proposal Δ reference| over the holdout set.
  double holdout_edit_cost_mean = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  bool converged = false;

  std::size_t training_size() const { return training_ids.size(); }
};

inline nlohmann::json to_json(const IterationRecord& r) {
  nlohmann::json holdout = nlohmann::json::array();
  for (const auto& c : r.holdout) holdout.push_back({{"id", c.id}, {"dice", c.dice}});
  return {{"iteration", r.iteration},
          {"checkpoint", r.checkpoint},
          {"training_size", r.training_size()},
          {"training_ids", r.training_ids},
          {"holdout", holdout},
          {"holdout_dice_mean", r.holdout_dice_mean},
          {"holdout_dice_sd", r.holdout_dice_sd},
          {"holdout_edit_cost_mean", r.holdout_edit_cost_mean},
          {"final_loss", r.final_loss},
          {"steps", r.steps},
          {"converged", r.converged}};
}

inline IterationRecord iteration_record_from_json(const nlohmann::json& j) {
  IterationRecord r;
  r.iteration = j.at("iteration");
  r.checkpoint = j.at("checkpoint");
  r.training_ids = j.at("training_ids").get<std::vector<std::string>>();
  for (const auto& c : j.at("holdout")) r.holdout.push_back({c.at("id"), c.at("dice")});
  r.holdout_dice_mean = j.at("holdout_dice_mean");
  r.holdout_dice_sd = j.at("holdout_dice_sd");
  r.holdout_edit_cost_mean = j.at("holdout_edit_cost_mean");
  r.final_loss = j.at("final_loss");
  r.steps = j.at("steps");
  r.converged = j.at("converged");
  return r;
}

/// True iff the last holdout Dice gain is below epsilon (needs two
/// iterations) or every batch has been trained on.
inline bool converged(const std::vector<double>& dice_history, double epsilon, bool batches_exhausted) {
  if (batches_exhausted) return true;
  const auto n = dice_history.size();
  return n >= 2 && dice_history[n - 1] - dice_history[n - 2] < epsilon;
}

// ---------------------------------------------------------------------------
// Labeling-time report

struct Cell {
  std::optional<double> mean;
  std::optional<double> sd;
  std::size_t n = 0;
};

inline Cell make_cell(const std::vector<double>& v) {
  Cell c;
  c.n = v.size();
  if (!v.empty()) {
    const auto s = summary_stats(v);
    c.mean = s.mean;
    c.sd = s.sd;
  }
  return c;
}

struct ReportColumn {
  std::string label;
  std::size_t images = 0;
  /// Seconds spent per volume on the batch this column's model pre-segmented.
  Cell manual_seconds;
  /// Voxels changed per volume on that batch.
  Cell edit_cost;
  Cell holdout_edit_cost;
  Cell holdout_dice;
};

struct TimeReport {
  std::vector<ReportColumn> columns;
};

inline nlohmann::json to_json(const Cell& c) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"mean", opt(c.mean)}, {"sd", opt(c.sd)}, {"n", c.n}};
}

inline nlohmann::json to_json(const TimeReport& r) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : r.columns)
    cols.push_back({{"label", c.label},
                    {"images", c.images},
                    {"manual_seconds", to_json(c.manual_seconds)},
                    {"edit_cost", to_json(c.edit_cost)},
                    {"holdout_edit_cost", to_json(c.holdout_edit_cost)},
                    {"holdout_dice", to_json(c.holdout_dice)}});
  return {{"schema", "lungquant.time_report/v1"}, {"columns", cols}};
}

/// Plain-text table, one row per measure and one column per stage.
inline std::string render_table(const TimeReport& r) {
  auto fmt = [](const Cell& c, int prec) {
    if (!c.mean) return std::string("N/A");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f ± %.*f", prec, *c.mean, prec, *c.sd);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> rows = {{"Measure"}, {"Training images"}, {"Labeling seconds"},
                                                {"Edit cost (voxels)"}, {"Holdout edit cost"}, {"Holdout Dice"}};
  for (const auto& c : r.columns) {
    rows[0].push_back(c.label);
    rows[1].push_back(std::to_string(c.images));
    rows[2].push_back(fmt(c.manual_seconds, 1));
    rows[3].push_back(fmt(c.edit_cost, 1));
    rows[4].push_back(fmt(c.holdout_edit_cost, 1));
    rows[5].push_back(fmt(c.holdout_dice, 4));
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += row[i];
      if (i + 1 < row.size()) out += std::string(width[i] - row[i].size() + 2, ' ');
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Iteration work split into prepare / execute / commit so training can run
// without holding the session.

struct IterationJob {
  int iteration = 0;
  Model start;
  std::vector<TrainingCase> training;
  std::vector<TrainingCase> holdout;
  Hyperparams hyper;
  std::vector<double> dice_history;
  double epsilon = 0.005;
  bool last_batch = false;
  /// Volumes of the next batch, to be pre-segmented unless the session converges.
  std::vector<std::pair<std::string, Volume>> next_batch;
  std::filesystem::path checkpoint_path;
  std::string checkpoint_name;
};

struct IterationOutcome {
  IterationRecord record;
  Model model;
  std::map<std::string, LabelMask> proposals;
  TrainRecord train_record;
};

inline IterationOutcome execute(const IterationJob& job, const EpochCallback& on_epoch = {}) {
  auto trained = train(job.start, job.training, job.hyper, {}, on_epoch);
  IterationOutcome out{};
  out.model = std::move(trained.model);
  out.train_record = std::move(trained.record);
  auto& r = out.record;
  r.iteration = job.iteration;
  r.checkpoint = job.checkpoint_name;
  for (const auto& c : job.training) r.training_ids.push_back(c.id);
  r.steps = out.train_record.steps;
  r.final_loss = out.train_record.epochs.empty() ? 0.0 : out.train_record.epochs.back().loss;

  std::vector<double> dice_values, edit_costs;
  for (const auto& c : job.holdout) {
    const auto pred = segment(out.model, c.volume, job.hyper.threshold);
    const double d = dice(c.mask, pred);
    r.holdout.push_back({c.id, d});
    dice_values.push_back(d);
    edit_costs.push_back(static_cast<double>(symmetric_difference(pred, c.mask)));
  }
  const auto ds = summary_stats(dice_values);
  r.holdout_dice_mean = ds.mean;
  r.holdout_dice_sd = ds.sd;
  r.holdout_edit_cost_mean = summary_stats(edit_costs).mean;

  auto history = job.dice_history;
  history.push_back(r.holdout_dice_mean);
  r.converged = converged(history, job.epsilon, job.last_batch);
  if (!r.converged)
    for (const auto& [id, v] : job.next_batch) out.proposals.emplace(id, segment(out.model, v, job.hyper.threshold));

  std::filesystem::create_directories(job.checkpoint_path.parent_path());
  save_checkpoint(out.model, job.checkpoint_path);
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

// ---------------------------------------------------------------------------

class Session {
 public:
  static constexpr const char* kEventLog = "events.jsonl";

  /// Starts a new session in `dir`, which must not already hold one.
  static Session create(const std::filesystem::path& dir, SessionConfig config, DataStore data) {
    config.validate();
    check_data(config, data);
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(dir / kEventLog)) throw SessionIoError("session already exists in " + dir.string());
    Session s(dir, std::move(config), std::move(data));
    s.append({{"type", "init"}, {"config", to_json(s.config_)}});
    return s;
  }

  /// Reopens a session by replaying its event log.
  static Session open(const std::filesystem::path& dir, DataStore data) {
    std::ifstream in(dir / kEventLog);
    if (!in) throw SessionIoError("no session event log in " + dir.string());
    std::string line;
    std::optional<Session> s;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json ev;
      try {
        ev = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        // A torn final line from a crash mid-append is dropped.
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw SessionIoError("corrupt event log line " + std::to_string(lineno));
      }
      if (!s) {
        if (ev.value("type", "") != "init") throw SessionIoError("event log does not start with init");
        auto cfg = session_config_from_json(ev.at("config"));
        cfg.validate();
        check_data(cfg, data);
        s.emplace(Session(dir, std::move(cfg), std::move(data)));
        continue;
      }
      s->apply(ev);
    }
    if (!s) throw SessionIoError("empty event log in " + dir.string());
    return std::move(*s);
  }

  const SessionConfig& config() const { return config_; }
  const std::filesystem::path& directory() const { return dir_; }
  State state() const { return state_; }
  const std::vector<IterationRecord>& iterations() const { return records_; }
  const std::map<std::string, Annotation>& annotations() const { return annotations_; }
  const std::map<std::string, LabelMask>& proposals() const { return proposals_; }
  const DataStore& data() const { return data_; }

  bool has_volume(const std::string& id) const { return data_.volumes.contains(id); }
  const Volume& volume(const std::string& id) const {
    auto it = data_.volumes.find(id);
    if (it == data_.volumes.end()) throw UnknownVolume(id);
    return it->second;
  }

  /// Proposal currently out for correction, if any.
  const LabelMask* proposal(const std::string& id) const {
    auto it = proposals_.find(id);
    return it == proposals_.end() ? nullptr : &it->second;
  }
  int proposal_iteration(const std::string& id) const {
    auto it = proposal_from_.find(id);
    return it == proposal_from_.end() ? 0 : it->second;
  }

  /// Volumes still waiting for a human in the current state.
  std::vector<std::string> pending() const {
    std::vector<std::string> out;
    int b = -1;
    if (state_.phase == Phase::awaiting_annotation) b = 0;
    if (state_.phase == Phase::serving_proposals) b = state_.index;
    if (b < 0) return out;
    for (const auto& id : config_.batches[static_cast<std::size_t>(b)])
      if (!annotations_.contains(id)) out.push_back(id);
    return out;
  }

  /// Manual mask for a batch-0 volume. Resubmitting replaces the earlier mask.
  void submit_annotation(const std::string& id, const LabelMask& mask, double seconds, const std::string& editor = {}) {
    if (state_.phase != Phase::awaiting_annotation)
      throw StateError("annotations are accepted only while awaiting_annotation (state " + to_string(state_) + ")");
    check_mask(id, 0, mask, seconds);
    const auto cost = static_cast<std::int64_t>(mask.count_nonzero());
    append({{"type", "annotation"}, {"volume", id}, {"mask", rle::mask_json(mask)}, {"seconds", seconds},
            {"editor", editor}, {"edit_cost", cost}});
    apply_annotation(id, mask, seconds, editor, std::nullopt, cost);
  }

  /// Corrected mask for a proposed volume. `proposal_iteration`, when given,
  /// must name the model whose proposal the editor started from.
  void ingest_correction(const std::string& id, const LabelMask& corrected, double seconds,
                         const std::string& editor = {}, std::optional<int> proposal_iteration = {}) {
    if (!has_volume(id) || config_.batch_of(id) < 0) throw UnknownVolume(id);
    if (state_.phase != Phase::serving_proposals)
      throw StateError("corrections are accepted only while serving_proposals (state " + to_string(state_) + ")");
    check_mask(id, state_.index, corrected, seconds);
    auto it = proposals_.find(id);
    if (it == proposals_.end()) throw StaleProposal("no proposal outstanding for " + id);
    const int from = proposal_from_.at(id);
    if (proposal_iteration && *proposal_iteration != from)
      throw StaleProposal("correction for " + id + " refers to iteration " + std::to_string(*proposal_iteration) +
                          " but the current proposal is from iteration " + std::to_string(from));
    const auto cost = symmetric_difference(it->second, corrected);
    append({{"type", "correction"}, {"volume", id}, {"mask", rle::mask_json(corrected)}, {"seconds", seconds},
            {"editor", editor}, {"proposal_iteration", from}, {"edit_cost", cost}});
    apply_annotation(id, corrected, seconds, editor, from, cost);
  }

  bool convergence_check() const {
    if (records_.empty()) throw StateError("convergence_check needs at least one iteration");
    return records_.back().converged;
  }

  /// Snapshot of everything iteration k needs, taken in state training(k).
  IterationJob prepare_iteration() const {
    if (state_.phase != Phase::training)
      throw StateError("run_iteration requires state training(k), not " + to_string(state_));
    IterationJob job;
    job.iteration = state_.index;
    const int k = job.iteration;
    if (k > 1 && config_.warm_start) {
      job.start = load_checkpoint(dir_ / records_.back().checkpoint);
    } else {
      job.start = build_vbnet(config_.model, config_.model_seed);
    }
    for (int b = 0; b < k; ++b)
      for (const auto& id : config_.batches[static_cast<std::size_t>(b)])
        job.training.push_back({id, data_.volumes.at(id), annotations_.at(id).mask});
    for (const auto& id : config_.holdout) job.holdout.push_back({id, data_.volumes.at(id), data_.references.at(id)});
    job.hyper = config_.hyper;
    job.hyper.seed = derive_seed(config_.hyper.seed, static_cast<std::uint64_t>(k));
    for (const auto& r : records_) job.dice_history.push_back(r.holdout_dice_mean);
    job.epsilon = config_.epsilon;
    job.last_batch = k >= static_cast<int>(config_.batches.size());
    if (!job.last_batch)
      for (const auto& id : config_.batches[static_cast<std::size_t>(k)]) job.next_batch.emplace_back(id, data_.volumes.at(id));
    job.checkpoint_name = "checkpoints/iter_" + std::to_string(k) + ".vbn";
    job.checkpoint_path = dir_ / job.checkpoint_name;
    return job;
  }

  const IterationRecord& commit(const IterationOutcome& out) {
    if (state_ != State{Phase::training, out.record.iteration})
      throw StateError("iteration " + std::to_string(out.record.iteration) + " does not match state " + to_string(state_));
    nlohmann::json props = nlohmann::json::object();
    for (const auto& [id, m] : out.proposals) props[id] = rle::mask_json(m);
    append({{"type", "iteration"}, {"record", to_json(out.record)}, {"proposals", props}});
    apply_iteration(out.record, out.proposals);
    return records_.back();
  }

  const IterationRecord& run_iteration(const EpochCallback& on_epoch = {}) {
    return commit(execute(prepare_iteration(), on_epoch));
  }

  /// Annotations made on the batch proposed by iteration k's model.
  std::vector<const Annotation*> corrections_from(int iteration) const {
    std::vector<const Annotation*> out;
    for (const auto& [_, a] : annotations_)
      if (a.proposal_iteration && *a.proposal_iteration == iteration) out.push_back(&a);
    return out;
  }

  /// Labeling-effort progression: a from-scratch column, then one per iteration.
  TimeReport time_report() const {
    TimeReport rep;
    ReportColumn base;
    base.label = "Without model";
    std::vector<double> secs, costs;
    for (const auto& id : config_.batches[0]) {
      auto it = annotations_.find(id);
      if (it == annotations_.end()) continue;
      secs.push_back(it->second.seconds);
      costs.push_back(static_cast<double>(it->second.edit_cost));
    }
    base.images = secs.size();
    base.manual_seconds = make_cell(secs);
    base.edit_cost = make_cell(costs);
    rep.columns.push_back(base);
    for (const auto& r : records_) {
      ReportColumn c;
      c.label = "Iteration " + std::to_string(r.iteration);
      c.images = r.training_size();
      secs.clear();
      costs.clear();
      for (const auto* a : corrections_from(r.iteration)) {
        secs.push_back(a->seconds);
        costs.push_back(static_cast<double>(a->edit_cost));
      }
      c.manual_seconds = make_cell(secs);
      c.edit_cost = make_cell(costs);
      std::vector<double> d;
      for (const auto& h : r.holdout) d.push_back(h.dice);
      c.holdout_dice = make_cell(d);
      c.holdout_edit_cost = {r.holdout_edit_cost_mean, std::nullopt, r.holdout.size()};
      rep.columns.push_back(c);
    }
    return rep;
  }

  nlohmann::json status_json() const {
    nlohmann::json iters = nlohmann::json::array();
    for (const auto& r : records_) iters.push_back(iteration_json(r));
    return {{"session_id", config_.session_id},
            {"state", to_string(state_)},
            {"phase", phase_name()},
            {"index", state_.index},
            {"batches", config_.batches},
            {"holdout", config_.holdout},
            {"pending", pending()},
            {"iterations", iters}};
  }

  /// Iteration record plus per-volume labeling seconds on the batch its model proposed.
  nlohmann::json iteration_json(const IterationRecord& r) const {
    auto j = to_json(r);
    nlohmann::json secs = nlohmann::json::object();
    for (const auto* a : corrections_from(r.iteration)) secs[a->volume_id] = a->seconds;
    j["labeling_seconds"] = secs;
    return j;
  }

  nlohmann::json records_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : records_) out.push_back(iteration_json(r));
    return out;
  }

 private:
  Session(std::filesystem::path dir, SessionConfig config, DataStore data)
      : dir_(std::move(dir)), config_(std::move(config)), data_(std::move(data)) {}

  static void check_data(const SessionConfig& c, const DataStore& d) {
    for (const auto& b : c.batches)
      for (const auto& id : b)
        if (!d.volumes.contains(id)) throw UnknownVolume(id);
    for (const auto& id : c.holdout) {
      if (!d.volumes.contains(id)) throw UnknownVolume(id);
      if (!d.references.contains(id)) throw std::invalid_argument("holdout volume " + id + " has no reference mask");
      require_same_geometry(d.volumes.at(id).geometry(), d.references.at(id).geometry(), "holdout reference");
    }
  }

  void check_mask(const std::string& id, int expected_batch, const LabelMask& mask, double seconds) const {
    if (!has_volume(id)) throw UnknownVolume(id);
    const int b = config_.batch_of(id);
    if (b < 0) throw UnknownVolume(id);
    if (b != expected_batch)
      throw StateError("volume " + id + " belongs to batch " + std::to_string(b) + ", the open batch is " +
                       std::to_string(expected_batch));
    require_same_geometry(volume(id).geometry(), mask.geometry(), "annotation mask");
    if (!(seconds >= 0.0)) throw std::invalid_argument("labeling seconds must be >= 0");
  }

  std::string phase_name() const {
    switch (state_.phase) {
      case Phase::awaiting_annotation: return "awaiting_annotation";
      case Phase::training: return "training";
      case Phase::serving_proposals: return "serving_proposals";
      case Phase::converged: return "converged";
    }
    return "?";
  }

  void append(const nlohmann::json& ev) {
    std::ofstream out(dir_ / kEventLog, std::ios::app | std::ios::binary);
    if (!out) throw SessionIoError("cannot append to event log in " + dir_.string());
    out << ev.dump() << '\n';
    out.flush();
    if (!out) throw SessionIoError("write to event log failed");
  }

  void apply(const nlohmann::json& ev) {
    const std::string type = ev.at("type");
    if (type == "annotation" || type == "correction") {
      const std::string id = ev.at("volume");
      auto mask = rle::mask_from_json(ev.at("mask"), volume(id).geometry());
      std::optional<int> from;
      if (type == "correction") from = ev.at("proposal_iteration").get<int>();
      apply_annotation(id, mask, ev.at("seconds"), ev.value("editor", ""), from, ev.at("edit_cost"));
    } else if (type == "iteration") {
      auto rec = iteration_record_from_json(ev.at("record"));
      std::map<std::string, LabelMask> props;
      for (const auto& [id, m] : ev.at("proposals").items()) props.emplace(id, rle::mask_from_json(m, volume(id).geometry()));
      apply_iteration(rec, props);
    } else {
      throw SessionIoError("unknown event type " + type);
    }
  }

  void apply_annotation(const std::string& id, const LabelMask& mask, double seconds, const std::string& editor,
                        std::optional<int> from, std::int64_t cost) {
    Annotation a{id, mask, seconds, editor, from, cost};
    a.mask.set_label_names({{1, "infection"}});
    annotations_[id] = std::move(a);
    if (from) {
      proposals_.erase(id);
      proposal_from_.erase(id);
    }
    if (pending().empty()) state_ = {Phase::training, state_.phase == Phase::awaiting_annotation ? 1 : state_.index + 1};
  }

  void apply_iteration(const IterationRecord& r, const std::map<std::string, LabelMask>& proposals) {
    records_.push_back(r);
    if (r.converged) {
      state_ = {Phase::converged, r.iteration};
      return;
    }
    for (const auto& [id, m] : proposals) {
      proposals_[id] = m;
      proposal_from_[id] = r.iteration;
    }
    state_ = {Phase::serving_proposals, r.iteration};
  }

  std::filesystem::path dir_;
  SessionConfig config_;
  DataStore data_;
  State state_;
  std::vector<IterationRecord> records_;
  std::map<std::string, Annotation> annotations_;
  std::map<std::string, LabelMask> proposals_;
  std::map<std::string, int> proposal_from_;
};

// ---------------------------------------------------------------------------
// Thread-safe front end: training runs on a worker thread while the session
// keeps answering queries. Submissions that arrive mid-training are queued.

class Service {
 public:
  explicit Service(Session session) : session_(std::move(session)) {}
  ~Service() { wait_idle(); }
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  enum class Start { accepted, busy, not_ready };
  enum class Submitted { annotation, correction, queued };

  template <typename F>
  auto with_session(F&& f) const {
    std::lock_guard lock(mu_);
    return f(session_);
  }

  bool busy() const {
    std::lock_guard lock(mu_);
    return busy_;
  }

  nlohmann::json status() const {
    std::lock_guard lock(mu_);
    auto j = session_.status_json();
    j["training"] = busy_;
    j["queued"] = queue_.size();
    j["last_error"] = last_error_ ? nlohmann::json(*last_error_) : nlohmann::json(nullptr);
    return j;
  }

  Start start_iteration() {
    std::lock_guard lock(mu_);
    if (busy_) return Start::busy;
    if (session_.state().phase != Phase::training) return Start::not_ready;
    IterationJob job = session_.prepare_iteration();
    busy_ = true;
    last_error_.reset();
    if (worker_.joinable()) worker_.join();
    worker_ = std::thread([this, job = std::move(job)]() mutable { run(std::move(job)); });
    return Start::accepted;
  }

  void wait_idle() {
    std::unique_lock lock(mu_);
    idle_.wait(lock, [this] { return !busy_; });
    if (worker_.joinable()) {
      auto t = std::move(worker_);
      lock.unlock();
      t.join();
    }
  }

  Submitted submit(const std::string& id, const LabelMask& mask, double seconds, const std::string& editor,
                   std::optional<int> proposal_iteration) {
    std::lock_guard lock(mu_);
    if (!session_.has_volume(id) || session_.config().batch_of(id) < 0) throw UnknownVolume(id);
    if (busy_) {
      queue_.push_back({id, mask, seconds, editor, proposal_iteration});
      return Submitted::queued;
    }
    return route(id, mask, seconds, editor, proposal_iteration);
  }

  std::optional<std::string> last_error() const {
    std::lock_guard lock(mu_);
    return last_error_;
  }

 private:
  struct Pending {
    std::string id;
    LabelMask mask;
    double seconds;
    std::string editor;
    std::optional<int> proposal_iteration;
  };

  Submitted route(const std::string& id, const LabelMask& mask, double seconds, const std::string& editor,
                  std::optional<int> proposal_iteration) {
    if (session_.state().phase == Phase::awaiting_annotation) {
      session_.submit_annotation(id, mask, seconds, editor);
      return Submitted::annotation;
    }
    session_.ingest_correction(id, mask, seconds, editor, proposal_iteration);
    return Submitted::correction;
  }

  void run(IterationJob job) {
    std::optional<IterationOutcome> out;
    std::string error;
    try {
      out = execute(job);
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard lock(mu_);
    try {
      if (out) session_.commit(*out);
    } catch (const std::exception& e) {
      error = e.what();
    }
    if (!error.empty()) last_error_ = error;
    for (auto& p : queue_) {
      try {
        route(p.id, p.mask, p.seconds, p.editor, p.proposal_iteration);
      } catch (const std::exception& e) {
        last_error_ = "queued submission for " + p.id + " rejected: " + e.what();
      }
    }
    queue_.clear();
    busy_ = false;
    idle_.notify_all();
  }

  mutable std::mutex mu_;
  std::condition_variable idle_;
  Session session_;
  bool busy_ = false;
  std::thread worker_;
  std::vector<Pending> queue_;
  std::optional<std::string> last_error_;
};

// ---------------------------------------------------------------------------
// Simulated annotation stream

struct SimulationOptions {
  CorrectorModel corrector;
  /// Iteration cap, as a guard against sessions that never converge.
  int max_iterations = 16;
};

/// Corrector habits for one volume, seeded from the volume id.
inline CorrectorModel corrector_for(const CorrectorModel& c, const std::string& id) {
  CorrectorModel out = c;
  out.seed = derive_seed(c.seed, fnv1a(id));
  return out;
}

/// Drives a session to convergence with a simulated radiologist who knows `truth`.
inline void simulate(Session& s, const std::map<std::string, LabelMask>& truth, const SimulationOptions& opt,
                     const EpochCallback& on_epoch = {}) {
  int iterations = 0;
  while (s.state().phase != Phase::converged) {
    switch (s.state().phase) {
      case Phase::awaiting_annotation:
        for (const auto& id : s.pending()) {
          const auto& t = truth.at(id);
          const auto r = simulate_correction(LabelMask::binary(t.geometry()), t, corrector_for(opt.corrector, id));
          s.submit_annotation(id, r.corrected, r.seconds, "simulated");
        }
        break;
      case Phase::training:
        if (++iterations > opt.max_iterations) throw std::runtime_error("simulate: iteration cap reached");
        s.run_iteration(on_epoch);
        break;
      case Phase::serving_proposals:
        for (const auto& id : s.pending()) {
          const auto r = simulate_correction(*s.proposal(id), truth.at(id), corrector_for(opt.corrector, id));
          s.ingest_correction(id, r.corrected, r.seconds, "simulated", s.proposal_iteration(id));
        }
        break;
      case Phase::converged:
        break;
    }
  }
}

}  // namespace lungquant::hitl
