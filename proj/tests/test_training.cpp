#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mris/pipeline.hpp"
#include "oracles.hpp"

using namespace mris;

namespace {

GeneratedData fixture() {
  GeneratorConfig g;
  g.num_subjects = 60;
  g.query_dim = 16;
  g.shape = {8, 4};
  g.split_db = 0.5;
  g.split_downstream = 0.2;
  g.seed = 3;
  return generate_synthetic(g);
}

TrainConfig quick(std::size_t epochs = 30) {
  TrainConfig c;
  c.embedding_dim = 8;
  c.hidden_dim = 24;
  c.batch_size = 16;
  c.epochs = epochs;
  c.query_schedule = {1e-3, 0.8, 10};
  c.target_schedule = {1e-4, 0.8, 10};
  c.seed = 11;
  return c;
}

std::vector<GroupModel> models_for(const Dataset& ds, const TrainConfig& cfg, std::size_t groups) {
  std::vector<GroupModel> out;
  const auto idx = ds.subject_index(Split::train_db);
  for (const auto& grp : split_rows(ds.shape, groups)) {
    auto enc = train_encoders(ds, idx, cfg, grp);
    auto db = build_database(ds, ds.samples_in(Split::train_db), enc.target, grp);
    out.push_back({grp, enc.query, enc.target, std::move(db)});
  }
  return out;
}

} // namespace

TEST(SplitRows, BandsCoverImage) {
  const auto g = split_rows({8, 4}, 2);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].row_begin, 0u);
  EXPECT_EQ(g[0].row_end, 4u);
  EXPECT_EQ(g[1].row_begin, 4u);
  EXPECT_EQ(g[1].shape(4).pixels(), 16u);
  EXPECT_THROW(split_rows({8, 4}, 3), ConfigError);
  EXPECT_THROW(split_rows({8, 4}, 0), ConfigError);
}

TEST(TrainConfig, Validation) {
  auto c = quick();
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick();
  c.embedding_dim = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick();
  c.loss.margin = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick();
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Training, LossIsFiniteAndDecreases) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  const auto grp = split_rows(ds.shape, 1)[0];
  const auto enc = train_encoders(ds, ds.subject_index(Split::train_db), quick(), grp);
  ASSERT_EQ(enc.history.size(), 30u);
  for (const auto& e : enc.history) {
    EXPECT_TRUE(std::isfinite(e.loss));
    EXPECT_EQ(e.samples, 30u); // 30 train subjects, batches 16 + 14
  }
  EXPECT_LT(enc.history.back().loss, enc.history.front().loss);
  EXPECT_EQ(enc.history[0].lr_query, 1e-3);
  EXPECT_EQ(enc.history[10].lr_query, 1e-3 * 0.8);
}

TEST(Training, DeterministicForFixedSeed) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  const auto grp = split_rows(ds.shape, 1)[0];
  const auto idx = ds.subject_index(Split::train_db);
  const auto a = train_encoders(ds, idx, quick(5), grp);
  const auto b = train_encoders(ds, idx, quick(5), grp);
  EXPECT_EQ(a.query, b.query);
  EXPECT_EQ(a.target, b.target);
  auto other = quick(5);
  other.seed = 12;
  EXPECT_NE(train_encoders(ds, idx, other, grp).query, a.query);
}

TEST(Training, ThreadedRunIsDeterministicAndAgreesWithSerial) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  const auto grp = split_rows(ds.shape, 1)[0];
  const auto idx = ds.subject_index(Split::train_db);
  auto cfg = quick(3);
  const auto serial = train_encoders(ds, idx, cfg, grp);
  cfg.threads = 3;
  const auto t1 = train_encoders(ds, idx, cfg, grp);
  const auto t2 = train_encoders(ds, idx, cfg, grp);
  EXPECT_EQ(t1.query, t2.query);
  auto a = serial.query.cast<double>();
  auto b = t1.query.cast<double>();
  auto ab = a.parameter_blocks();
  auto bb = b.parameter_blocks();
  for (std::size_t k = 0; k < ab.size(); ++k)
    for (std::size_t i = 0; i < ab[k].size(); ++i) EXPECT_NEAR(ab[k][i], bb[k][i], 1e-5);
}

TEST(Training, TooFewSubjects) {
  const auto data = fixture();
  SubjectIndex one{{"S0000", {0}}};
  EXPECT_THROW(train_encoders(data.dataset, one, quick(1), split_rows(data.dataset.shape, 1)[0]),
               DataError);
}

TEST(Pipeline, ErrorReportMatchesScriptedComputation) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  const auto cfg = quick(10);
  const auto models = models_for(ds, cfg, 1);
  const auto test = ds.samples_in(Split::test);
  const SynthesisConfig sc{5};
  const auto report = synthesis_error_report(ds, test, models, sc, true);

  // Script: embed, argsort neighbors, clamp-normalize weights, average,
  // denormalize, pool absolute errors, sort-based median.
  std::vector<double> errors;
  const auto& m = models[0];
  for (auto i : test) {
    const auto& s = ds.samples[i];
    const auto q = oracle::forward(m.query_encoder, normalize_query(to_double(s.query)));
    const auto nn = oracle::argsort_knn(m.db, q, 5);
    double total = 0;
    for (const auto& n : nn) total += std::max(1.0 - n.distance, 0.0);
    for (std::size_t p = 0; p < ds.shape.pixels(); ++p) {
      double yhat = 0;
      for (const auto& n : nn)
        yhat += std::max(1.0 - n.distance, 0.0) / total * m.db.target(n.index)[p];
      errors.push_back(std::abs(3.0 * yhat - s.target[p]));
    }
  }
  const auto [median, mad] = oracle::median_mad(errors);
  EXPECT_NEAR(report.overall.median, median, 1e-9);
  EXPECT_NEAR(report.overall.mad, mad, 1e-9);
  EXPECT_EQ(report.overall.pixels, errors.size());
}

TEST(Pipeline, TrainedBeatsRandomNeighbors) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  // 30 training subjects need a longer, undecayed run to separate clearly.
  auto cfg = quick(300);
  cfg.query_schedule = {3e-3, 1.0, 1};
  cfg.target_schedule = {3e-4, 1.0, 1};
  const auto models = models_for(ds, cfg, 1);
  const auto test = ds.samples_in(Split::test);
  const auto trained = synthesis_error_report(ds, test, models, {5}, true);
  const auto random =
      random_neighbor_error_report(ds, ds.samples_in(Split::train_db), test, 5, 1);
  EXPECT_LT(trained.overall.median, random.overall.median);
}

TEST(Pipeline, SeparateGroupsStitchIntoFullImage) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  const auto models = models_for(ds, quick(3), 2);
  const auto& s = ds.samples[ds.samples_in(Split::test)[0]];
  const auto merged = synthesize_sample(s, ds.shape, models, {3}, true);
  ASSERT_EQ(merged.image.size(), ds.shape.pixels());
  ASSERT_EQ(merged.groups.size(), 2u);
  const auto half = ds.shape.pixels() / 2;
  for (std::size_t p = 0; p < half; ++p) {
    EXPECT_EQ(merged.image[p], merged.groups[0].image[p]);
    EXPECT_EQ(merged.image[half + p], merged.groups[1].image[p]);
  }
}

TEST(Pipeline, RecallUsesBaselineOfEachTestSubject) {
  const auto data = fixture();
  const auto& ds = data.dataset;
  const auto models = models_for(ds, quick(3), 1);
  const auto r = evaluate_recall(ds, models[0], true);
  EXPECT_EQ(r.queries, ds.subject_index(Split::test).size());
  for (std::size_t i = 1; i < r.percent.size(); ++i) EXPECT_LE(r.percent[i - 1], r.percent[i]);
}
