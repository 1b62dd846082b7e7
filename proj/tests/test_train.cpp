// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "stmae/train.hpp"
#include "test_util.hpp"

using namespace stmae;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.model.D = 4;
  c.model.n_layers = 1;
  c.graph.window = 20;
  c.graph.stride = 20;
  c.train.batch_size = 4;
  c.train.pretrain_epochs = 2;
  c.train.finetune_epochs = 2;
  c.train.folds = 2;
  return c;
}

FoldSplit split_for(const std::vector<Subject>& subs, int k, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::vector<std::optional<int>> cls;
  for (const auto& s : subs) {
    ids.push_back(s.ts.subject_id);
    cls.push_back(s.labels.cls);
  }
  return split_folds(ids, cls, k, seed);
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 0.01) == 0.01);
  CHECK(cosine_lr(50, 100, 0.01) == doctest::Approx(0.005).epsilon(1e-14));
  CHECK(cosine_lr(100, 100, 0.01) == doctest::Approx(0.0).epsilon(1e-14));
  for (long s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, 0.01) <= cosine_lr(s - 1, 100, 0.01));
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.01), ConfigError);
}

TEST_CASE("one-cycle schedule warms up then anneals to the floor") {
  TrainConfig tc;
  tc.lr = 1e-4;
  tc.onecycle_peak = 1e-2;
  tc.onecycle_floor = 1e-6;
  tc.onecycle_warm_frac = 0.2;
  const long total = 100;
  CHECK(onecycle_lr(0, total, tc) == doctest::Approx(tc.lr).epsilon(1e-12));
  CHECK(onecycle_lr(20, total, tc) == doctest::Approx(tc.onecycle_peak).epsilon(1e-12));
  CHECK(onecycle_lr(10, total, tc) == doctest::Approx((tc.lr + tc.onecycle_peak) / 2).epsilon(1e-12));
  CHECK(onecycle_lr(60, total, tc) == doctest::Approx((tc.onecycle_peak + tc.onecycle_floor) / 2).epsilon(1e-12));
  CHECK(onecycle_lr(total, total, tc) == doctest::Approx(tc.onecycle_floor).epsilon(1e-12));
  for (long s = 1; s <= 20; ++s) CHECK(onecycle_lr(s, total, tc) > onecycle_lr(s - 1, total, tc));
  for (long s = 21; s <= total; ++s) CHECK(onecycle_lr(s, total, tc) < onecycle_lr(s - 1, total, tc));
}

TEST_CASE("adam matches a scalar reference and decay-free AdamW is plain Adam") {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  ParamStore ps;
  ps.add("w", Mat::Constant(2, 3, 0.5));
  TrainConfig tc;
  tc.weight_decay = 0.0;

  double p = 0.5, m = 0, v = 0;
  AdamState st = make_adam_state(ps);
  std::vector<double> gs;
  for (int step = 1; step <= 25; ++step) {
    const double g = nd(gen);
    gs.push_back(g);
    adam_update(ps, {Mat::Constant(2, 3, g)}, st, 1e-2, tc);
    m = tc.beta1 * m + (1 - tc.beta1) * g;
    v = tc.beta2 * v + (1 - tc.beta2) * g * g;
    const double mh = m / (1 - std::pow(tc.beta1, step)), vh = v / (1 - std::pow(tc.beta2, step));
    p -= 1e-2 * mh / (std::sqrt(vh) + tc.adam_eps);
  }
  CHECK(ps.value(0)(1, 2) == doctest::Approx(p).epsilon(1e-13));
  CHECK(st.step == 25);

  ParamStore coupled;
  coupled.add("w", Mat::Constant(2, 3, 0.5));
  TrainConfig tc2 = tc;
  tc2.decoupled_weight_decay = false;
  AdamState st2 = make_adam_state(coupled);
  for (double g : gs) adam_update(coupled, {Mat::Constant(2, 3, g)}, st2, 1e-2, tc2);
  CHECK(coupled.value(0) == ps.value(0));
}

TEST_CASE("decoupled decay shrinks parameters before the Adam step") {
  ParamStore ps;
  ps.add("w", Mat::Constant(1, 1, 2.0));
  TrainConfig tc;
  tc.weight_decay = 0.1;
  AdamState st = make_adam_state(ps);
  adam_update(ps, {Mat::Zero(1, 1)}, st, 0.5, tc);
  CHECK(ps.value(0)(0, 0) == doctest::Approx(2.0 * (1 - 0.05)).epsilon(1e-15));
}

TEST_CASE("zero learning rate and frozen entries leave parameters unchanged") {
  ParamStore ps;
  ps.add("a", Mat::Constant(2, 2, 1.0));
  ps.add("b", Mat::Constant(1, 2, -1.0));
  const Mat a0 = ps.value(0), b0 = ps.value(1);
  TrainConfig tc;
  AdamState st = make_adam_state(ps);
  const Grads g{Mat::Ones(2, 2), Mat::Ones(1, 2)};
  adam_update(ps, g, st, 0.0, tc);
  CHECK(ps.value(0) == a0);
  CHECK(ps.value(1) == b0);
  const std::vector<bool> frozen{true, false};
  adam_update(ps, g, st, 0.1, tc, &frozen);
  CHECK(ps.value(0) == a0);
  CHECK(ps.value(1) != b0);
}

TEST_CASE("pretraining is reproducible and writes its log and checkpoint") {
  const auto subs = synth_subjects(6, 6, 100, 3);
  auto cfg = tiny_config();
  TempDir d1, d2;
  const auto r1 = pretrain(subs, cfg, {d1.path(), {}});
  const auto r2 = pretrain(subs, cfg, {d2.path(), {}});
  CHECK(read_file(d1.path() / "loss.csv") == read_file(d2.path() / "loss.csv"));
  CHECK(read_file(d1.path() / "checkpoint.bin") == read_file(d2.path() / "checkpoint.bin"));

  const std::string log = read_file(d1.path() / "loss.csv");
  CHECK(log.rfind(loss_log_header() + "\n", 0) == 0);
  CHECK(r1.log.size() == 2 * 2);  // 2 epochs x ceil(6 / 4) batches
  CHECK(r1.epoch_loss.size() == 2);
  CHECK(r1.checkpoint.epoch == 2);
  CHECK(r1.checkpoint.global_step == 4);
  CHECK(r1.ssl_subjects.size() == 6);
  for (const auto& row : r1.log)
    CHECK(row.l_total == doctest::Approx(row.l_sp_node + row.l_sp_edge + row.l_tp_node + row.l_tp_edge));

  cfg.train.seed = 1;
  const auto r3 = pretrain(subs, cfg);
  CHECK(r3.log.front().l_total != r1.log.front().l_total);
}

TEST_CASE("pretraining rejects series too short for the temporal objective") {
  const auto subs = synth_subjects(4, 6, 100, 3);
  auto cfg = tiny_config();
  cfg.graph.window = 50;
  cfg.graph.stride = 40;  // T = 2
  CHECK_THROWS_WITH_AS(pretrain(subs, cfg), doctest::Contains("T = 2"), ConfigError);
}

TEST_CASE("ssl_fraction selects a deterministic subset") {
  const auto subs = synth_subjects(8, 6, 100, 3);
  auto cfg = tiny_config();
  cfg.train.pretrain_epochs = 1;
  cfg.train.ssl_fraction = 0.5;
  const auto a = pretrain(subs, cfg);
  const auto b = pretrain(subs, cfg);
  CHECK(a.ssl_subjects.size() == 4);
  CHECK(a.ssl_subjects == b.ssl_subjects);
}

TEST_CASE("checkpoint round trip reproduces forward outputs exactly") {
  const auto subs = synth_subjects(4, 6, 100, 5);
  auto cfg = tiny_config();
  cfg.train.pretrain_epochs = 1;
  const auto res = pretrain(subs, cfg);
  TempDir dir;
  save_checkpoint(dir.path() / "c.bin", res.checkpoint);
  const auto back = load_checkpoint(dir.path() / "c.bin");
  CHECK(back.epoch == res.checkpoint.epoch);
  CHECK(back.global_step == res.checkpoint.global_step);
  CHECK(back.optimizer.step == res.checkpoint.optimizer.step);
  CHECK(diff_keys(back.config, res.checkpoint.config).empty());
  for (std::size_t i = 0; i < back.model.params().size(); ++i) {
    CHECK(back.model.params().value(static_cast<int>(i)) == res.checkpoint.model.params().value(static_cast<int>(i)));
    CHECK(back.optimizer.m[i] == res.checkpoint.optimizer.m[i]);
    CHECK(back.optimizer.v[i] == res.checkpoint.optimizer.v[i]);
  }
  const auto g = build_dynamic_graph(subs[0].ts, cfg.graph.window, cfg.graph.stride, cfg.graph.frac);
  ad::Tape t1, t2;
  Forward f1(res.checkpoint.model, t1), f2(back.model, t2);
  CHECK(f1.predict(g).scalar() == f2.predict(g).scalar());
}

TEST_CASE("checkpoint loader rejects foreign and future files") {
  const auto subs = synth_subjects(4, 6, 100, 5);
  auto cfg = tiny_config();
  cfg.train.pretrain_epochs = 1;
  TempDir dir;
  save_checkpoint(dir.path() / "c.bin", pretrain(subs, cfg).checkpoint);
  std::string bytes = read_file(dir.path() / "c.bin");
  bytes[8] = 9;  // version field
  dir.write("v.bin", bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.path() / "v.bin"), doctest::Contains("version 9"), FormatError);
  dir.write("m.bin", "NOTACKPT........");
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "m.bin"), FormatError);
  dir.write("t.bin", read_file(dir.path() / "c.bin").substr(0, 200));
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "t.bin"), FormatError);
}

TEST_CASE("fine-tuning keeps evaluation subjects out of training") {
  const auto subs = synth_subjects(12, 6, 100, 7);
  auto cfg = tiny_config();
  cfg.train.label_fraction = 0.5;
  const auto split = split_for(subs, 3, 1);
  TempDir dir;
  const auto res = finetune(subs, nullptr, HeadKind::Classify, split, cfg, {dir.path(), {}});
  REQUIRE(res.folds.size() == 3);
  REQUIRE(res.train_sets.size() == 3);
  std::set<std::string> predicted;
  for (int f = 0; f < 3; ++f) {
    const auto members = split.fold_members(f);
    const std::set<std::string> test(members.begin(), members.end());
    for (const auto& id : res.train_sets[static_cast<std::size_t>(f)]) CHECK_FALSE(test.count(id));
    CHECK(res.train_sets[static_cast<std::size_t>(f)].size() == 4);  // half of 8, per class
  }
  for (const auto& p : res.predictions) {
    CHECK(split.assignments.at(p.subject_id) == p.fold);
    CHECK(p.score > 0.0);
    CHECK(p.score < 1.0);
    predicted.insert(p.subject_id);
  }
  CHECK(predicted.size() == subs.size());
  CHECK(read_file(dir.path() / "metrics.csv").rfind("fold,metric,value\n", 0) == 0);
}

TEST_CASE("fine-tuning reports missing labels by subject") {
  auto subs = synth_subjects(6, 6, 100, 7);
  subs[2].labels.cls.reset();
  subs[4].labels.cls.reset();
  auto cfg = tiny_config();
  std::vector<std::string> ids;
  for (const auto& s : subs) ids.push_back(s.ts.subject_id);
  const auto split = split_folds(ids, std::vector<std::optional<int>>(6), 2, 0);
  const std::string msg = "labels for subjects: " + subs[2].ts.subject_id + ", " + subs[4].ts.subject_id;
  CHECK_THROWS_WITH_AS(finetune(subs, nullptr, HeadKind::Classify, split, cfg), doctest::Contains(msg.c_str()),
                       ConfigError);
}

TEST_CASE("pretrained and baseline runs share everything but the encoder") {
  const auto subs = synth_subjects(8, 6, 100, 9);
  auto cfg = tiny_config();
  cfg.train.finetune_epochs = 1;
  const auto split = split_for(subs, 2, 2);
  const auto base1 = finetune(subs, nullptr, HeadKind::Classify, split, cfg);
  const auto base2 = finetune(subs, nullptr, HeadKind::Classify, split, cfg);
  for (std::size_t i = 0; i < base1.predictions.size(); ++i)
    CHECK(base1.predictions[i].score == base2.predictions[i].score);

  cfg.train.pretrain_epochs = 1;
  const auto pre = pretrain(subs, cfg);
  const auto tuned = finetune(subs, &pre.checkpoint.model, HeadKind::Classify, split, cfg);
  CHECK(tuned.train_sets == base1.train_sets);
  CHECK(tuned.predictions.front().score != base1.predictions.front().score);

  auto wide = cfg;
  wide.model.D = 6;
  CHECK_THROWS_AS(finetune(subs, &pre.checkpoint.model, HeadKind::Classify, split, wide), ConfigError);
}

TEST_CASE("regression fine-tuning reports MAE") {
  const auto subs = synth_subjects(8, 6, 100, 11);
  auto cfg = tiny_config();
  cfg.train.finetune_epochs = 1;
  std::vector<std::string> ids;
  for (const auto& s : subs) ids.push_back(s.ts.subject_id);
  const auto split = split_folds(ids, std::vector<std::optional<int>>(8), 2, 0);
  const auto res = finetune(subs, nullptr, HeadKind::Regress, split, cfg);
  REQUIRE(res.mean.mae.has_value());
  CHECK(*res.mean.mae >= 0.0);
  CHECK_FALSE(res.mean.auroc.has_value());
}

TEST_CASE("grad_check passes on the default tiny model") {
  RunConfig cfg;
  cfg.model.D = 3;
  cfg.model.n_layers = 2;
  GradCheckOptions opts;
  opts.samples_per_group = 5;
  const auto rep = grad_check(cfg, 1, opts);
  CHECK(rep.passed());
  CHECK(rep.max_rel_err < 1e-4);
  std::set<std::string> groups;
  for (const auto& g : rep.groups) groups.insert(g.group);
  CHECK(groups.count("gin"));
  CHECK(groups.count("time"));
}

TEST_CASE("parallel_for visits every index once and propagates exceptions") {
  std::vector<int> hits(100, 0);
  parallel_for(100, [&](int i) { hits[static_cast<std::size_t>(i)] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  CHECK_THROWS_AS(parallel_for(10, [](int i) {
                    if (i == 7) throw NumericError("boom");
                  }),
                  NumericError);
  CHECK(worker_count() >= 1);
}
