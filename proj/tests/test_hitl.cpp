#include <gtest/gtest.h>

#include <fstream>

#include "lungquant/hitl.hpp"
#include "hitl_fixture.hpp"
#include "test_util.hpp"

using namespace lungquant;
using namespace lungquant::hitl;

using namespace lqtest;

TEST(Convergence, Rule) {
  EXPECT_FALSE(converged({}, 0.005, false));
  EXPECT_FALSE(converged({0.5}, 0.005, false));
  EXPECT_TRUE(converged({0.5}, 0.005, true));
  EXPECT_TRUE(converged({0.5, 0.503}, 0.005, false));
  EXPECT_FALSE(converged({0.5, 0.505}, 0.005, false));
  EXPECT_TRUE(converged({0.5, 0.4}, 0.005, false));
  EXPECT_FALSE(converged({0.5, 0.6, 0.7}, 0.005, false));
}

TEST(SessionConfig, Validation) {
  auto f = make_fixture();
  EXPECT_NO_THROW(f.config.validate());
  auto c = f.config;
  c.batches[1].push_back(c.batches[0][0]);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = f.config;
  c.batches[2].push_back(c.holdout[0]);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = f.config;
  c.batches.push_back({});
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = f.config;
  c.holdout.clear();
  EXPECT_THROW(c.validate(), std::invalid_argument);
  const auto back = session_config_from_json(to_json(f.config));
  EXPECT_EQ(to_json(back), to_json(f.config));
}

TEST(Session, CreateRejectsMissingDataAndExistingLog) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto missing = f.data;
  missing.volumes.erase(f.config.batches[1][0]);
  EXPECT_THROW(Session::create(dir / "a", f.config, missing), UnknownVolume);
  auto noref = f.data;
  noref.references.erase(f.config.holdout[0]);
  EXPECT_THROW(Session::create(dir / "b", f.config, noref), std::invalid_argument);
  Session::create(dir / "c", f.config, f.data);
  EXPECT_THROW(Session::create(dir / "c", f.config, f.data), SessionIoError);
  EXPECT_THROW(Session::open(dir / "nothing", f.data), SessionIoError);
}

TEST(Session, StateMachineWalk) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  EXPECT_EQ(s.state(), (State{Phase::awaiting_annotation, 0}));
  EXPECT_EQ(s.pending(), f.config.batches[0]);
  EXPECT_THROW(s.prepare_iteration(), StateError);
  EXPECT_THROW(s.convergence_check(), StateError);

  const auto& b0 = f.config.batches[0];
  const auto& b1 = f.config.batches[1];
  EXPECT_THROW(s.ingest_correction(b0[0], f.truth.at(b0[0]), 1.0), StateError);
  EXPECT_THROW(s.submit_annotation(b1[0], f.truth.at(b1[0]), 1.0), StateError);
  EXPECT_THROW(s.submit_annotation("nope", f.truth.at(b0[0]), 1.0), UnknownVolume);
  EXPECT_THROW(s.submit_annotation(b0[0], f.truth.at(b0[0]), -1.0), std::invalid_argument);
  EXPECT_THROW(s.submit_annotation(b0[0], LabelMask::binary({{8, 8, 8}, {1, 1, 1}, {0, 0, 0}}), 1.0), GeometryMismatch);

  s.submit_annotation(b0[0], f.truth.at(b0[0]), 30.0);
  EXPECT_EQ(s.state().phase, Phase::awaiting_annotation);
  EXPECT_EQ(s.annotations().at(b0[0]).edit_cost, static_cast<std::int64_t>(f.truth.at(b0[0]).count_nonzero()));
  s.submit_annotation(b0[1], f.truth.at(b0[1]), 30.0);
  EXPECT_EQ(s.state(), (State{Phase::training, 1}));
  EXPECT_TRUE(s.pending().empty());
  EXPECT_THROW(s.submit_annotation(b0[0], f.truth.at(b0[0]), 1.0), StateError);

  const auto& r1 = s.run_iteration();
  EXPECT_EQ(r1.iteration, 1);
  EXPECT_EQ(r1.training_ids, b0);
  EXPECT_EQ(r1.checkpoint, "checkpoints/iter_1.vbn");
  EXPECT_TRUE(std::filesystem::exists(dir / r1.checkpoint));
  EXPECT_EQ(s.state(), (State{Phase::serving_proposals, 1}));
  EXPECT_EQ(s.pending(), b1);
  ASSERT_NE(s.proposal(b1[0]), nullptr);
  EXPECT_EQ(s.proposal_iteration(b1[0]), 1);
  EXPECT_EQ(s.proposal(b0[0]), nullptr);

  EXPECT_THROW(s.ingest_correction(b1[0], f.truth.at(b1[0]), 1.0, "", 7), StaleProposal);
  const auto proposal = *s.proposal(b1[0]);
  s.ingest_correction(b1[0], f.truth.at(b1[0]), 12.0, "ed", 1);
  EXPECT_EQ(s.annotations().at(b1[0]).edit_cost, symmetric_difference(proposal, f.truth.at(b1[0])));
  EXPECT_EQ(s.proposal(b1[0]), nullptr);
  EXPECT_THROW(s.ingest_correction(b1[0], f.truth.at(b1[0]), 1.0), StaleProposal);
  s.ingest_correction(b1[1], f.truth.at(b1[1]), 12.0);
  EXPECT_EQ(s.state(), (State{Phase::training, 2}));

  s.run_iteration();
  correct_pending(s, f);
  const auto& r3 = s.run_iteration();
  EXPECT_EQ(r3.iteration, 3);
  EXPECT_EQ(r3.training_size(), 6u);
  // Every batch has been trained on.
  EXPECT_TRUE(r3.converged);
  EXPECT_TRUE(s.convergence_check());
  EXPECT_EQ(s.state(), (State{Phase::converged, 3}));
  EXPECT_TRUE(s.pending().empty());
  EXPECT_THROW(s.prepare_iteration(), StateError);

  // Training sets grow strictly.
  for (std::size_t i = 1; i < s.iterations().size(); ++i)
    EXPECT_GT(s.iterations()[i].training_size(), s.iterations()[i - 1].training_size());
}

TEST(Session, ConvergesEarlyOnSmallGain) {
  lqtest::TempDir dir;
  auto f = make_fixture({2, 2, 2, 2});
  f.config.hyper.learning_rate = 0.0;
  f.config.epsilon = 0.005;
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  s.run_iteration();
  correct_pending(s, f);
  // A frozen model gains nothing, so iteration 2 converges.
  const auto& r2 = s.run_iteration();
  EXPECT_TRUE(r2.converged);
  EXPECT_EQ(r2.holdout_dice_mean, s.iterations()[0].holdout_dice_mean);
  EXPECT_EQ(s.state().phase, Phase::converged);
}

TEST(Session, RecordedHoldoutDiceReproducesFromCheckpoint) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  s.run_iteration();
  correct_pending(s, f);
  s.run_iteration();
  for (const auto& r : s.iterations()) {
    const auto model = load_checkpoint(dir / r.checkpoint);
    double sum = 0;
    for (const auto& h : r.holdout) {
      const double d = dice(f.truth.at(h.id), segment(model, f.data.volumes.at(h.id)));
      EXPECT_EQ(d, h.dice);
      sum += d;
    }
    EXPECT_DOUBLE_EQ(sum / r.holdout.size(), r.holdout_dice_mean);
  }
}

TEST(Session, WarmStartContinuesFromPreviousCheckpoint) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  s.run_iteration();
  correct_pending(s, f);
  const auto job = s.prepare_iteration();
  const auto prev = load_checkpoint(dir / s.iterations()[0].checkpoint);
  EXPECT_EQ(encode_checkpoint(job.start), encode_checkpoint(prev));
  EXPECT_EQ(job.hyper.seed, derive_seed(f.config.hyper.seed, 2));
  EXPECT_EQ(job.training.size(), 4u);
}

TEST(Session, ReplayRestoresEverything) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  {
    auto s = Session::create(dir.path(), f.config, f.data);
    annotate_batch0(s, f);
    s.run_iteration();
    s.ingest_correction(f.config.batches[1][0], f.truth.at(f.config.batches[1][0]), 9.0, "x", 1);
  }
  auto reopened = Session::open(dir.path(), f.data);
  EXPECT_EQ(reopened.state(), (State{Phase::serving_proposals, 1}));
  EXPECT_EQ(reopened.pending(), std::vector<std::string>{f.config.batches[1][1]});
  EXPECT_EQ(reopened.records_json(), [&] {
    auto fresh = Session::open(dir.path(), f.data);
    return fresh.records_json();
  }());
  // Drive the reopened session and an uninterrupted one to the end; records agree.
  correct_pending(reopened, f);
  reopened.run_iteration();

  lqtest::TempDir dir2;
  auto straight = Session::create(dir2.path(), f.config, f.data);
  annotate_batch0(straight, f);
  straight.run_iteration();
  straight.ingest_correction(f.config.batches[1][0], f.truth.at(f.config.batches[1][0]), 9.0, "x", 1);
  correct_pending(straight, f);
  straight.run_iteration();
  EXPECT_EQ(reopened.records_json(), straight.records_json());
  EXPECT_EQ(reopened.state(), straight.state());
  for (const auto& [id, a] : straight.annotations()) {
    EXPECT_TRUE(reopened.annotations().at(id).mask == a.mask);
    EXPECT_EQ(reopened.annotations().at(id).edit_cost, a.edit_cost);
  }
  for (const auto& [id, p] : straight.proposals()) EXPECT_TRUE(*reopened.proposal(id) == p);

  const auto again = Session::open(dir.path(), f.data);
  EXPECT_EQ(again.records_json(), straight.records_json());
  EXPECT_EQ(to_json(again.time_report()), to_json(straight.time_report()));
}

TEST(Session, TornFinalLineIsDroppedCorruptMiddleIsNot) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  {
    auto s = Session::create(dir.path(), f.config, f.data);
    s.submit_annotation(f.config.batches[0][0], f.truth.at(f.config.batches[0][0]), 1.0);
  }
  const auto log = dir / Session::kEventLog;
  { std::ofstream(log, std::ios::app) << "{\"type\":\"annot"; }
  auto s = Session::open(dir.path(), f.data);
  EXPECT_EQ(s.annotations().size(), 1u);

  auto lines = lines_of(log);
  ASSERT_EQ(lines.size(), 3u);
  {
    std::ofstream out(log, std::ios::trunc);
    out << lines[0] << "\n" << "garbage\n" << lines[1] << "\n";
  }
  EXPECT_THROW(Session::open(dir.path(), f.data), SessionIoError);
  {
    std::ofstream out(log, std::ios::trunc);
    out << lines[1] << "\n";
  }
  EXPECT_THROW(Session::open(dir.path(), f.data), SessionIoError);
}

TEST(Session, EventLogHasOneEventPerChange) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  s.run_iteration();
  const auto lines = lines_of(dir / Session::kEventLog);
  ASSERT_EQ(lines.size(), 4u);
  std::vector<std::string> types;
  for (const auto& l : lines) types.push_back(nlohmann::json::parse(l).at("type"));
  EXPECT_EQ(types, (std::vector<std::string>{"init", "annotation", "annotation", "iteration"}));
  const auto ev = nlohmann::json::parse(lines[3]);
  EXPECT_EQ(ev["proposals"].size(), f.config.batches[1].size());
}

TEST(TimeReport, ColumnsMatchAnnotations) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  const auto& b0 = f.config.batches[0];
  s.submit_annotation(b0[0], f.truth.at(b0[0]), 20.0);
  s.submit_annotation(b0[1], f.truth.at(b0[1]), 40.0);
  s.run_iteration();
  const auto& b1 = f.config.batches[1];
  s.ingest_correction(b1[0], f.truth.at(b1[0]), 5.0, "", 1);
  s.ingest_correction(b1[1], f.truth.at(b1[1]), 15.0, "", 1);
  s.run_iteration();
  const auto rep = s.time_report();
  ASSERT_EQ(rep.columns.size(), 3u);
  EXPECT_EQ(rep.columns[0].label, "Without model");
  EXPECT_DOUBLE_EQ(*rep.columns[0].manual_seconds.mean, 30.0);
  // Population sd of {20, 40}.
  EXPECT_DOUBLE_EQ(*rep.columns[0].manual_seconds.sd, 10.0);
  EXPECT_EQ(rep.columns[1].images, 2u);
  EXPECT_DOUBLE_EQ(*rep.columns[1].manual_seconds.mean, 10.0);
  EXPECT_EQ(rep.columns[2].images, 4u);
  EXPECT_FALSE(rep.columns[2].manual_seconds.mean.has_value());
  EXPECT_EQ(rep.columns[2].manual_seconds.n, 0u);
  const auto table = render_table(rep);
  EXPECT_NE(table.find("N/A"), std::string::npos);
  EXPECT_NE(table.find("Iteration 2"), std::string::npos);
  EXPECT_EQ(to_json(rep)["columns"][2]["manual_seconds"]["mean"], nullptr);
}

TEST(Service, QueuesSubmissionsWhileTraining) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  f.config.hyper.epochs = 3;
  Service svc(Session::create(dir.path(), f.config, f.data));
  EXPECT_EQ(svc.start_iteration(), Service::Start::not_ready);
  const auto& b0 = f.config.batches[0];
  EXPECT_EQ(svc.submit(b0[0], f.truth.at(b0[0]), 1.0, "", {}), Service::Submitted::annotation);
  EXPECT_EQ(svc.submit(b0[1], f.truth.at(b0[1]), 1.0, "", {}), Service::Submitted::annotation);
  EXPECT_THROW(svc.submit("zzz", f.truth.at(b0[0]), 1.0, "", {}), UnknownVolume);
  ASSERT_EQ(svc.start_iteration(), Service::Start::accepted);
  EXPECT_EQ(svc.start_iteration(), Service::Start::busy);
  const auto& b1 = f.config.batches[1];
  // Training takes far longer than this call, so it is queued.
  EXPECT_EQ(svc.submit(b1[0], f.truth.at(b1[0]), 3.0, "", 1), Service::Submitted::queued);
  EXPECT_EQ(svc.status()["queued"], 1);
  svc.wait_idle();
  EXPECT_FALSE(svc.last_error().has_value()) << *svc.last_error();
  svc.with_session([&](const Session& s) {
    EXPECT_EQ(s.state(), (State{Phase::serving_proposals, 1}));
    EXPECT_TRUE(s.annotations().contains(b1[0]));
    EXPECT_EQ(s.pending(), std::vector<std::string>{b1[1]});
    return 0;
  });
  EXPECT_EQ(svc.status()["queued"], 0);
}

TEST(Service, RejectedQueuedSubmissionIsReported) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  f.config.hyper.epochs = 3;
  Service svc(Session::create(dir.path(), f.config, f.data));
  for (const auto& id : f.config.batches[0]) svc.submit(id, f.truth.at(id), 1.0, "", {});
  ASSERT_EQ(svc.start_iteration(), Service::Start::accepted);
  const auto& b1 = f.config.batches[1];
  EXPECT_EQ(svc.submit(b1[0], f.truth.at(b1[0]), 3.0, "", 5), Service::Submitted::queued);
  svc.wait_idle();
  ASSERT_TRUE(svc.last_error().has_value());
  EXPECT_NE(svc.last_error()->find("rejected"), std::string::npos);
}

TEST(Simulate, DeterministicAcrossSessions) {
  auto f = make_fixture();
  SimulationOptions opt;
  opt.corrector.flip_probability = 0.1;
  lqtest::TempDir a, b;
  auto s1 = Session::create(a.path(), f.config, f.data);
  auto s2 = Session::create(b.path(), f.config, f.data);
  simulate(s1, f.truth, opt);
  simulate(s2, f.truth, opt);
  EXPECT_EQ(s1.records_json(), s2.records_json());
  EXPECT_EQ(s1.state().phase, Phase::converged);
  for (const auto& [id, ann] : s1.annotations()) EXPECT_TRUE(s2.annotations().at(id).mask == ann.mask);
  // Event logs are byte-identical: nothing in them depends on wall-clock time.
  EXPECT_EQ(lines_of(a / Session::kEventLog), lines_of(b / Session::kEventLog));
}

TEST(Simulate, ZeroNoiseAnnotationsEqualTruth) {
  auto f = make_fixture();
  lqtest::TempDir dir;
  auto s = Session::create(dir.path(), f.config, f.data);
  simulate(s, f.truth, {});
  for (const auto& [id, a] : s.annotations()) {
    EXPECT_EQ(symmetric_difference(a.mask, f.truth.at(id)), 0);
    EXPECT_DOUBLE_EQ(a.seconds, CorrectorModel{}.seconds_per_voxel * a.edit_cost);
  }
}

TEST(Simulate, IterationCapGuards) {
  auto f = make_fixture();
  lqtest::TempDir dir;
  auto s = Session::create(dir.path(), f.config, f.data);
  SimulationOptions opt;
  opt.max_iterations = 1;
  EXPECT_THROW(simulate(s, f.truth, opt), std::runtime_error);
  EXPECT_EQ(s.iterations().size(), 1u);
}

TEST(Batches, SplitsBySizes) {
  const std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
  const auto b = make_batches(ids, {1, 2, 3});
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0], std::vector<std::string>{"a"});
  EXPECT_EQ(b[2], (std::vector<std::string>{"d", "e", "f"}));
  EXPECT_THROW(make_batches(ids, {1, 2, 2}), std::invalid_argument);
  EXPECT_THROW(make_batches(ids, {3, 2, 1}), std::invalid_argument);
  EXPECT_THROW(make_batches(ids, {0, 6}), std::invalid_argument);
  EXPECT_EQ(make_batches(ids, {6}).size(), 1u);
  auto f = make_fixture({3, 2});
  EXPECT_THROW(f.config.validate(), std::invalid_argument);
}

TEST(Session, SingleBatchConvergesAfterOneIteration) {
  lqtest::TempDir dir;
  auto f = make_fixture({4});
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  const auto& r = s.run_iteration();
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(s.state(), (State{Phase::converged, 1}));
}

TEST(Session, DuplicateAnnotationReplacesAndIsLogged) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  const auto& id = f.config.batches[0][0];
  const auto empty = LabelMask::binary(f.truth.at(id).geometry());
  s.submit_annotation(id, empty, 5.0);
  s.submit_annotation(id, f.truth.at(id), 7.0);
  EXPECT_TRUE(s.annotations().at(id).mask == f.truth.at(id));
  EXPECT_EQ(s.annotations().at(id).seconds, 7.0);
  EXPECT_EQ(lines_of(dir / Session::kEventLog).size(), 3u);
  EXPECT_TRUE(Session::open(dir.path(), f.data).annotations().at(id).mask == f.truth.at(id));
}

TEST(Session, EditCostOfComplementIsVoxelCount) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  s.run_iteration();
  const auto& id = f.config.batches[1][0];
  auto flipped = *s.proposal(id);
  for (std::size_t i = 0; i < flipped.size(); ++i) flipped[i] = flipped[i] ? 0 : 1;
  s.ingest_correction(id, flipped, 1.0);
  EXPECT_EQ(s.annotations().at(id).edit_cost, static_cast<std::int64_t>(flipped.size()));
  const auto& id2 = f.config.batches[1][1];
  s.ingest_correction(id2, *s.proposal(id2), 1.0);
  EXPECT_EQ(s.annotations().at(id2).edit_cost, 0);
}

TEST(Session, TrainingFailureLeavesSessionResumable) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  f.config.hyper.optimizer = Optimizer::sgd;
  f.config.hyper.learning_rate = 1e30;
  f.config.hyper.epochs = 3;
  auto s = Session::create(dir.path(), f.config, f.data);
  annotate_batch0(s, f);
  const auto before = lines_of(dir / Session::kEventLog);
  EXPECT_THROW(s.run_iteration(), TrainingDiverged);
  EXPECT_EQ(s.state(), (State{Phase::training, 1}));
  EXPECT_TRUE(s.iterations().empty());
  EXPECT_EQ(lines_of(dir / Session::kEventLog), before);
  EXPECT_EQ(Session::open(dir.path(), f.data).state(), (State{Phase::training, 1}));
}

// Random call sequences: every rejected call leaves state, records and log untouched.
TEST(Session, RandomOperationSequencesAreSafe) {
  lqtest::TempDir dir;
  auto f = make_fixture();
  auto s = Session::create(dir.path(), f.config, f.data);
  std::vector<std::string> ids;
  for (const auto& [id, _] : f.data.volumes) ids.push_back(id);
  ids.push_back("ghost");
  const Geometry wrong{{8, 8, 8}, {1, 1, 1}, {0, 0, 0}};
  std::mt19937_64 rng(17);
  auto snapshot = [&] {
    return std::make_tuple(s.status_json().dump(), s.annotations().size(), s.proposals().size(),
                           lines_of(dir / Session::kEventLog).size());
  };
  int accepted = 0, rejected = 0;
  for (int step = 0; step < 400 && s.state().phase != Phase::converged; ++step) {
    const auto& id = ids[rng() % ids.size()];
    const bool bad_geometry = rng() % 5 == 0;
    const auto geom = bad_geometry || id == "ghost" ? wrong : f.data.volumes.at(id).geometry();
    const auto mask = id != "ghost" && !bad_geometry ? f.truth.at(id) : LabelMask::binary(geom);
    const auto before = snapshot();
    bool ok = true;
    try {
      switch (rng() % 5) {
        case 0: s.submit_annotation(id, mask, 1.0); break;
        case 1: s.ingest_correction(id, mask, 1.0, "", static_cast<int>(rng() % 3)); break;
        case 2: s.ingest_correction(id, mask, -1.0); break;
        case 3: s.convergence_check(); ok = false; break;
        case 4:
          if (s.state().phase == Phase::training && rng() % 3 == 0) s.run_iteration();
          else s.prepare_iteration(), ok = false;
          break;
      }
    } catch (const std::exception&) {
      ok = false;
      EXPECT_EQ(snapshot(), before) << "step " << step;
    }
    (ok ? accepted : rejected)++;
    const auto st = s.state();
    EXPECT_TRUE(st.phase == Phase::awaiting_annotation || st.phase == Phase::training ||
                st.phase == Phase::serving_proposals || st.phase == Phase::converged);
  }
  EXPECT_GT(accepted, 0);
  EXPECT_GT(rejected, 0);
  EXPECT_EQ(Session::open(dir.path(), f.data).status_json(), s.status_json());
}
