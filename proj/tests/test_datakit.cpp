#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "mris/datakit.hpp"
#include "oracles.hpp"

using namespace mris;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mris_test_" + name);
  fs::remove_all(p);
  return p;
}

GeneratorConfig small_config(std::uint64_t seed = 5) {
  GeneratorConfig c;
  c.num_subjects = 40;
  c.query_dim = 12;
  c.shape = {4, 5};
  c.seed = seed;
  return c;
}

// Gaussian elimination with partial pivoting: solves M z = x.
std::vector<double> solve(const DenseMatrix<double>& m, std::vector<double> x) {
  const std::size_t n = m.rows();
  std::vector<std::vector<double>> a(n, std::vector<double>(n));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) a[r][c] = m(r, c);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(x[c], x[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      x[r] -= f * x[c];
    }
  }
  std::vector<double> z(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = x[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * z[k];
    z[i] = s / a[i][i];
  }
  return z;
}

std::size_t nearest(const std::vector<std::vector<double>>& pts, std::size_t self) {
  std::size_t best = self == 0 ? 1 : 0;
  double best_d = INFINITY;
  for (std::size_t j = 0; j < pts.size(); ++j) {
    if (j == self) continue;
    double d = 0;
    for (std::size_t k = 0; k < pts[j].size(); ++k) d += std::pow(pts[j][k] - pts[self][k], 2);
    if (d < best_d) best_d = d, best = j;
  }
  return best;
}

} // namespace

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(percentile({10, 0, 5}, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(percentile({10, 0, 5}, 1.0), 10.0);
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 0.99), 9.9);
  EXPECT_THROW(percentile({}, 0.5), DataError);
}

TEST(NormalizeQuery, LinearRamp) {
  std::vector<double> x(101);
  for (int i = 0; i <= 100; ++i) x[i] = i;
  const auto y = normalize_query(x);
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_NEAR(y[99], 0.99, 1e-15);
  EXPECT_NEAR(y[100], 1.0, 1e-15); // top 1% is not clipped by default
  EXPECT_EQ(normalize_query(x, true)[100], 0.99);
}

TEST(NormalizeQuery, IdempotentOnNormalizedInput) {
  oracle::Gen g(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto once = normalize_query(g.vec(64));
    const auto twice = normalize_query(once);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-6);
  }
}

TEST(NormalizeQuery, Errors) {
  const std::vector<double> flat(10, 2.5);
  EXPECT_THROW(normalize_query(flat), DegenerateInputError);
  EXPECT_THROW(normalize_query(std::vector<double>{}), DataError);
  const std::vector<double> inf{0, INFINITY};
  EXPECT_THROW(normalize_query(inf), NumericError);
}

TEST(NormalizeTarget, InversePair) {
  EXPECT_EQ(normalize_target(std::vector<double>{3.0}), std::vector<double>{1.0});
  const std::vector<double> round{0.0, 1.5, -3.0, 6.0, 12.0};
  EXPECT_EQ(denormalize_target(normalize_target(round)), round);
  oracle::Gen g(2);
  const auto y = g.vec(1000, 5.0);
  const auto back = denormalize_target(normalize_target(y));
  for (std::size_t i = 0; i < y.size(); ++i)
    EXPECT_LE(std::abs(back[i] - y[i]), 1e-7 * std::abs(y[i]));
}

TEST(Generator, DeterministicPerSeed) {
  const auto a = generate_synthetic(small_config(5));
  const auto b = generate_synthetic(small_config(5));
  const auto c = generate_synthetic(small_config(6));
  EXPECT_EQ(a.dataset, b.dataset);
  EXPECT_NE(a.dataset, c.dataset);
}

TEST(Generator, ShapesLabelsAndSplits) {
  const auto cfg = small_config();
  const auto g = generate_synthetic(cfg);
  const auto& ds = g.dataset;
  EXPECT_NO_THROW(ds.validate());
  EXPECT_EQ(ds.subjects.size(), cfg.num_subjects);
  std::map<std::string, std::size_t> per_subject;
  std::set<std::int32_t> strata;
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.query.size(), cfg.query_dim);
    EXPECT_EQ(s.target.size(), cfg.shape.pixels());
    EXPECT_GE(s.stratum_label, 0);
    EXPECT_LE(s.stratum_label, 3);
    EXPECT_TRUE(s.progression_label.has_value());
    strata.insert(s.stratum_label);
    ++per_subject[s.subject_id];
  }
  EXPECT_EQ(strata.size(), 4u);
  for (const auto& [id, n] : per_subject) {
    EXPECT_GE(n, cfg.min_timepoints);
    EXPECT_LE(n, cfg.max_timepoints);
  }
  // round(0.43 * 40) = 17, round(0.38 * 40) = 15, rest 8.
  std::map<Split, std::size_t> sizes;
  for (const auto& [id, split] : ds.subjects) ++sizes[split];
  EXPECT_EQ(sizes[Split::train_db], 17u);
  EXPECT_EQ(sizes[Split::downstream], 15u);
  EXPECT_EQ(sizes[Split::test], 8u);
}

TEST(Generator, NoiselessEqualLatentsGiveEqualPairs) {
  auto cfg = small_config();
  cfg.noise = 0.0;
  cfg.min_timepoints = cfg.max_timepoints = 1;
  const auto g = generate_synthetic(cfg);
  const std::vector<double> z(cfg.latent_dim, 0.3);
  std::mt19937_64 r1(1), r2(2);
  EXPECT_EQ(g.model.render(z, 0.0, r1), g.model.render(z, 0.0, r2));
  // And the stored samples are exactly the noiseless projection of their latent.
  std::mt19937_64 r3(3);
  const auto [x, y] = g.model.render(g.latents[0], 0.0, r3);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_EQ(g.dataset.samples[0].query[i], static_cast<float>(x[i]));
}

TEST(Generator, SquareNoiselessQueryDeterminesLatent) {
  auto cfg = small_config();
  cfg.noise = 0.0;
  cfg.latent_dim = cfg.query_dim = 6;
  const auto g = generate_synthetic(cfg);
  std::vector<std::vector<double>> recovered;
  for (const auto& s : g.dataset.samples)
    recovered.push_back(solve(g.model.query_map, to_double(s.query)));
  for (std::size_t i = 0; i < recovered.size(); ++i)
    for (std::size_t k = 0; k < cfg.latent_dim; ++k)
      EXPECT_NEAR(recovered[i][k], g.latents[i][k], 1e-4);
  // Nearest neighbor by recovered latent is a nearest neighbor by true latent.
  // Timepoints are evenly spaced along a line, so exact ties are common.
  auto sq = [&](std::size_t a, std::size_t b) {
    double d = 0;
    for (std::size_t k = 0; k < cfg.latent_dim; ++k) d += std::pow(g.latents[a][k] - g.latents[b][k], 2);
    return d;
  };
  for (std::size_t i = 0; i < recovered.size(); ++i)
    EXPECT_NEAR(sq(i, nearest(recovered, i)), sq(i, nearest(g.latents, i)), 1e-6);
}

TEST(Generator, ConfigValidation) {
  auto c = small_config();
  c.max_timepoints = 5;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
  c = small_config();
  c.split_db = 0.7;
  c.split_downstream = 0.4;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
  c = small_config();
  c.noise = -1;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
}

TEST(Dataset, BaselineAndIndexViews) {
  const auto ds = generate_synthetic(small_config()).dataset;
  const auto idx = ds.subject_index(Split::test);
  const auto base = ds.baseline_samples(Split::test);
  EXPECT_EQ(base.size(), idx.size());
  for (auto i : base) EXPECT_EQ(ds.samples[i].timepoint, 0);
  std::size_t total = 0;
  for (auto s : {Split::train_db, Split::downstream, Split::test})
    total += ds.samples_in(s).size();
  EXPECT_EQ(total, ds.samples.size());
}

TEST(DatasetIo, RoundTrip) {
  const auto ds = generate_synthetic(small_config()).dataset;
  const auto dir = fresh_dir("ds_rt");
  save_dataset(ds, dir);
  EXPECT_EQ(load_dataset(dir), ds);
  fs::remove_all(dir);
}

TEST(DatasetIo, RoundTripKeepsMissingProgression) {
  auto ds = generate_synthetic(small_config()).dataset;
  ds.samples[3].progression_label.reset();
  const auto dir = fresh_dir("ds_prog");
  save_dataset(ds, dir);
  EXPECT_EQ(load_dataset(dir), ds);
  fs::remove_all(dir);
}

TEST(DatasetIo, TruncatedArrayIsRejected) {
  const auto ds = generate_synthetic(small_config()).dataset;
  const auto dir = fresh_dir("ds_trunc");
  save_dataset(ds, dir);
  fs::resize_file(dir / "target.f32", fs::file_size(dir / "target.f32") - 4);
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::remove_all(dir);
}

TEST(DatasetIo, CorruptedArrayIsRejected) {
  const auto ds = generate_synthetic(small_config()).dataset;
  const auto dir = fresh_dir("ds_corrupt");
  save_dataset(ds, dir);
  {
    std::fstream f(dir / "query.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x7f');
  }
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::remove_all(dir);
}

TEST(DatasetIo, ManifestCountMismatchIsRejected) {
  const auto ds = generate_synthetic(small_config()).dataset;
  const auto dir = fresh_dir("ds_count");
  save_dataset(ds, dir);
  std::ifstream in(dir / "manifest");
  std::stringstream text;
  text << in.rdbuf();
  in.close();
  auto s = text.str();
  const auto pos = s.find("samples ");
  s.replace(pos, s.find('\n', pos) - pos, "samples 1");
  std::ofstream(dir / "manifest") << s;
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::remove_all(dir);
}

TEST(DatasetIo, MissingOrForeignManifest) {
  const auto dir = fresh_dir("ds_missing");
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::create_directories(dir);
  std::ofstream(dir / "manifest") << "something-else\n";
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::remove_all(dir);
}

TEST(Split, StringRoundTrip) {
  for (auto s : {Split::train_db, Split::downstream, Split::test})
    EXPECT_EQ(split_from_string(to_string(s)), s);
  EXPECT_THROW(split_from_string("validation"), DataError);
}
