#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "jooci/archive.hpp"
#include "jooci/labels.hpp"

using namespace jooci;

namespace {

Features gaussian_blobs(const std::vector<std::vector<double>>& means, std::size_t per_blob, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  Features f{means.size() * per_blob, means[0].size(), {}};
  for (const auto& m : means)
    for (std::size_t i = 0; i < per_blob; ++i)
      for (double c : m) f.data.push_back(c + rng.normal(0, sigma));
  return f;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i], na += a[i] * a[i], nb += b[i] * b[i];
  return d / std::sqrt(na * nb);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("jooci_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(KMeans, DistinctPointsGiveZeroInertia) {
  Features f{4, 2, {0, 0, 1, 0, 0, 1, 5, 5}};
  const auto cb = kmeans_fit(f, 4, 1, 10);
  EXPECT_EQ(cb.inertia, 0.0);
  auto labels = assign_labels(f, cb);
  std::sort(labels.begin(), labels.end());
  EXPECT_EQ(labels, (std::vector<int>{0, 1, 2, 3}));
}

TEST(KMeans, IdenticalPointsSingleCluster) {
  Features f{5, 3, {}};
  for (int i = 0; i < 5; ++i) f.data.insert(f.data.end(), {1.5, -2.0, 0.25});
  const auto cb = kmeans_fit(f, 1, 2, 10);
  EXPECT_EQ(cb.centers, (std::vector<double>{1.5, -2.0, 0.25}));
  EXPECT_EQ(cb.inertia, 0.0);
}

TEST(KMeans, TooFewPointsRejected) {
  Features f{2, 1, {0, 1}};
  EXPECT_THROW(kmeans_fit(f, 3, 1, 5), std::invalid_argument);
}

// Separated blobs: each center is the sample mean of its blob, and that mean
// lies within 3 sigma / sqrt(n) of the generating mean. Each coordinate
// misses the bound with probability 0.0027, so over 60 coordinates more than
// two misses has probability below 1e-3.
TEST(KMeans, SeparatedBlobsRecoverMeans) {
  const std::vector<std::vector<double>> means{{-10, 0, 3}, {10, 4, -3}};
  const std::size_t n = 400;
  const double sigma = 1.0;
  int misses = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto f = gaussian_blobs(means, n, sigma, seed);
    const auto cb = kmeans_fit(f, 2, seed, 50);
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<double> sample(3, 0.0);
      for (std::size_t i = b * n; i < (b + 1) * n; ++i)
        for (std::size_t j = 0; j < 3; ++j) sample[j] += f.row(i)[j] / n;
      const std::size_t c = cb.center(0)[0] < 0 ? b : 1 - b;
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(cb.center(c)[j], sample[j], 1e-9);
        misses += std::abs(cb.center(c)[j] - means[b][j]) > 3 * sigma / std::sqrt(static_cast<double>(n));
      }
    }
  }
  EXPECT_LE(misses, 2);
}

TEST(KMeans, InertiaNonIncreasingAndNoEmptyCluster) {
  const auto f = gaussian_blobs({{0, 0}, {1, 1}, {3, 0}, {0, 4}}, 100, 1.0, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto cb = kmeans_fit(f, 12, seed, 40);
    for (std::size_t i = 1; i < cb.inertia_history.size(); ++i)
      EXPECT_LE(cb.inertia_history[i], cb.inertia_history[i - 1]);
    const auto labels = assign_labels(f, cb);
    std::vector<int> counts(12, 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    for (int c : counts) EXPECT_GT(c, 0);
  }
}

TEST(KMeans, SameSeedSameCodebook) {
  const auto f = gaussian_blobs({{0, 0}, {2, 2}, {4, 0}}, 50, 1.0, 4);
  const auto a = kmeans_fit(f, 5, 8, 30), b = kmeans_fit(f, 5, 8, 30);
  EXPECT_EQ(a.centers, b.centers);
  EXPECT_EQ(assign_labels(f, a), assign_labels(f, b));
}

TEST(Assign, CenterMapsToItsIndex) {
  Codebook cb{3, 2, {0, 0, 1, 1, 2, 0}, 0, {}, 0};
  Features f{3, 2, {2, 0, 0, 0, 1, 1}};
  EXPECT_EQ(assign_labels(f, cb), (std::vector<int>{2, 0, 1}));
}

TEST(Assign, TieGoesToLowerIndex) {
  Codebook cb{3, 1, {3, -1, 1}, 0, {}, 0};
  Features f{1, 1, {0}};  // equidistant from centers 1 and 2
  EXPECT_EQ(assign_labels(f, cb), std::vector<int>{1});
}

TEST(Assign, MatchesExhaustiveScan) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Codebook cb{7, 4, rng.normal_vector<double>(28), 0, {}, 0};
    Features f{200, 4, rng.normal_vector<double>(800)};
    const auto labels = assign_labels(f, cb);
    for (std::size_t i = 0; i < f.rows; ++i) {
      std::vector<double> d(7);
      for (std::size_t c = 0; c < 7; ++c)
        for (std::size_t j = 0; j < 4; ++j) d[c] += std::pow(f.row(i)[j] - cb.centers[c * 4 + j], 2);
      EXPECT_EQ(labels[i], std::min_element(d.begin(), d.end()) - d.begin());
    }
  }
}

TEST(Assign, DimMismatchRejected) {
  Codebook cb{1, 2, {0, 0}, 0, {}, 0};
  EXPECT_THROW(assign_labels(Features{1, 3, {0, 0, 0}}, cb), std::invalid_argument);
}

TEST(Features, BandEnergiesNormalisedPerUtterance) {
  CorpusConfig c;
  c.num_speakers = 1;
  c.utts_per_speaker = 1;
  const auto u = generate_corpus(c, 2)[0];
  const auto f = band_features(u.wave, u.phones.size(), 20);
  ASSERT_EQ(f.rows, u.phones.size());
  ASSERT_EQ(f.dim, 20u);
  for (std::size_t b = 0; b < 20; ++b) {
    double m = 0, v = 0;
    for (std::size_t t = 0; t < f.rows; ++t) m += f.row(t)[b] / f.rows;
    for (std::size_t t = 0; t < f.rows; ++t) v += std::pow(f.row(t)[b] - m, 2) / f.rows;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(Dictionary, LayersAndSizes) {
  CorpusConfig cc;
  cc.num_speakers = 2;
  cc.utts_per_speaker = 3;
  const auto corpus = generate_corpus(cc, 1);
  ModelConfig m;
  const auto dict = build_label_dictionary(m, corpus_band_features(corpus, 20), 20, 5);
  EXPECT_EQ(dict.layers, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(dict.sizes, (std::vector<int>{11, 16, 23, 32}));
  EXPECT_EQ(dict.finest(), 3u);
  ASSERT_EQ(dict.labels.size(), 4u);
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t u = 0; u < corpus.size(); ++u) {
      ASSERT_EQ(dict.labels[s][u].size(), corpus[u].phones.size());
      for (int l : dict.labels[s][u]) {
        EXPECT_GE(l, 0);
        EXPECT_LT(l, dict.sizes[s]);
      }
    }
  for (std::size_t i = 1; i < dict.layers.size(); ++i) EXPECT_LT(dict.layers[i - 1], dict.layers[i]);
  EXPECT_EQ(dict.layers.back(), m.content_layers);
  m.num_label_sets = 5;
  EXPECT_THROW(build_label_dictionary(m, corpus_band_features(corpus, 20), 5, 5), std::invalid_argument);
}

// Pseudo labels from spectral features carry phone information: the
// majority phone of each cluster predicts the true phone well above chance.
TEST(Dictionary, LabelsTrackPhones) {
  CorpusConfig cc;
  cc.utts_per_speaker = 5;
  const auto corpus = generate_corpus(cc, 3);
  ModelConfig m;
  const auto dict = build_label_dictionary(m, corpus_band_features(corpus, 20), 30, 6);
  const auto s = dict.finest();
  std::map<int, std::map<int, int>> table;
  for (std::size_t u = 0; u < corpus.size(); ++u)
    for (std::size_t t = 0; t < corpus[u].phones.size(); ++t) ++table[dict.labels[s][u][t]][corpus[u].phones[t]];
  long hit = 0, total = 0;
  for (const auto& [label, counts] : table) {
    int best = 0;
    for (const auto& [phone, n] : counts) best = std::max(best, n), total += n;
    hit += best;
  }
  EXPECT_GT(static_cast<double>(hit) / total, 0.6);
}

TEST(Dictionary, SaveLoadRoundTrip) {
  CorpusConfig cc;
  cc.num_speakers = 2;
  cc.utts_per_speaker = 2;
  const auto corpus = generate_corpus(cc, 1);
  ModelConfig m;
  const auto dict = build_label_dictionary(m, corpus_band_features(corpus, 20), 10, 5);
  const auto dir = temp_dir("labels");
  save_label_dictionary(dict, corpus, dir);
  const auto back = load_label_dictionary(corpus, dir);
  EXPECT_EQ(back.layers, dict.layers);
  EXPECT_EQ(back.sizes, dict.sizes);
  EXPECT_EQ(back.labels, dict.labels);
  for (std::size_t s = 0; s < dict.codebooks.size(); ++s) {
    EXPECT_EQ(back.codebooks[s].centers, dict.codebooks[s].centers);
    EXPECT_EQ(back.codebooks[s].inertia, dict.codebooks[s].inertia);
    EXPECT_EQ(back.codebooks[s].seed, dict.codebooks[s].seed);
  }
  const auto manifest = read_json(dir / "labels.json");
  EXPECT_EQ(manifest.at("feature_source"), "band_energy");
  EXPECT_EQ(manifest.at("sets").size(), 4u);
  std::filesystem::remove_all(dir);
}

TEST(Teacher, NoiselessSameSpeakerIdentical) {
  TeacherOracle t(1, 512, 0.0);
  const auto a = t.embed(3, "a"), b = t.embed(3, "b");
  EXPECT_EQ(a, b);
  EXPECT_NEAR(cosine(a, b), 1.0, 1e-12);
}

TEST(Teacher, UnitNormAndStableBase) {
  TeacherOracle t(2, 512, 0.1);
  for (int s = 0; s < 10; ++s) {
    EXPECT_EQ(t.base(s), t.base(s));
    double n = 0;
    for (double x : t.embed(s, "u" + std::to_string(s))) n += x * x;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(Teacher, WithinSpeakerCosineHigh) {
  TeacherOracle t(3, 512, 0.1);
  for (int trial = 0; trial < 100; ++trial) {
    const int s = trial % 8;
    EXPECT_GE(cosine(t.embed(s, "x" + std::to_string(trial)), t.embed(s, "y" + std::to_string(trial))), 0.95);
  }
}

// Random unit vectors in 512 dims have |cos| ~ 1/sqrt(512); the 0.2 bound is
// about 4.5 standard deviations.
TEST(Teacher, DistinctSpeakersNearlyOrthogonal) {
  int within = 0;
  const int trials = 1000;
  for (int i = 0; i < trials; ++i) {
    TeacherOracle t(static_cast<std::uint64_t>(i), 512, 0.1);
    within += std::abs(cosine(t.embed(0, "a"), t.embed(1, "b"))) < 0.2;
  }
  EXPECT_GT(static_cast<double>(within) / trials, 0.99);
}

TEST(Teacher, WithinExceedsCrossByHalf) {
  for (double noise : {0.0, 0.1, 0.2}) {
    TeacherOracle t(4, 512, noise);
    double w = 0, c = 0;
    const int n = 200;
    for (int i = 0; i < n; ++i) {
      w += cosine(t.embed(i % 8, "p" + std::to_string(i)), t.embed(i % 8, "q" + std::to_string(i))) / n;
      c += cosine(t.embed(i % 8, "p" + std::to_string(i)), t.embed(8 + i % 8, "q" + std::to_string(i))) / n;
    }
    EXPECT_GE(w - c, 0.5) << noise;
  }
}

TEST(Archive, RoundTripAllDtypes) {
  Archive a;
  a.put("f", Shape{2, 2}, std::vector<float>{1, 2, 3, 4});
  a.put("d", Shape{3}, std::vector<double>{0.1, 0.2, 0.3});
  a.put("i", Shape{2}, std::vector<std::int32_t>{-1, 7});
  a.put("u", Shape{}, std::vector<std::uint64_t>{42});
  a.put("empty", Shape{0}, std::vector<float>{});
  const auto b = Archive::parse(a.serialize());
  EXPECT_EQ(b.get<float>("f"), (std::vector<float>{1, 2, 3, 4}));
  EXPECT_EQ(b.get<double>("d"), (std::vector<double>{0.1, 0.2, 0.3}));
  EXPECT_EQ(b.get<std::int32_t>("i"), (std::vector<std::int32_t>{-1, 7}));
  EXPECT_EQ(b.get<std::uint64_t>("u"), std::vector<std::uint64_t>{42});
  EXPECT_EQ(b.entry("f").shape, (Shape{2, 2}));
  EXPECT_EQ(b.serialize(), a.serialize());
  EXPECT_THROW(b.get<double>("f"), std::runtime_error);
  EXPECT_THROW(b.get<float>("missing"), std::runtime_error);
}

TEST(Archive, CorruptionDetected) {
  Archive a;
  a.put("x", Shape{4}, std::vector<double>{1, 2, 3, 4});
  auto bytes = a.serialize();
  bytes[bytes.size() / 2] ^= 1;
  EXPECT_THROW(Archive::parse(bytes), std::runtime_error);
  EXPECT_THROW(Archive::parse(bytes.substr(0, 10)), std::runtime_error);
  EXPECT_THROW(Archive::parse("NOTANARCHIVE0000000000000"), std::runtime_error);
}

TEST(Archive, ShapeMismatchOnLoadRejected) {
  Archive a;
  a.put("w", Shape{2, 3}, std::vector<float>(6, 1.0f));
  Tensor<float> t(Shape{3, 2});
  EXPECT_THROW(a.get_into("w", t), std::runtime_error);
  Tensor<float> ok(Shape{2, 3});
  a.get_into("w", ok);
  EXPECT_EQ(ok.data()[5], 1.0f);
  EXPECT_THROW(a.put("bad", Shape{2}, std::vector<float>{1}), std::invalid_argument);
}

TEST(Archive, AtomicSaveLeavesNoTemp) {
  const auto dir = temp_dir("archive");
  Archive a;
  a.put("x", Shape{1}, std::vector<float>{1});
  a.save(dir / "a.jar");
  EXPECT_TRUE(std::filesystem::exists(dir / "a.jar"));
  EXPECT_FALSE(std::filesystem::exists(dir / "a.jar.tmp"));
  EXPECT_EQ(Archive::load(dir / "a.jar").get<float>("x"), std::vector<float>{1});
  std::filesystem::remove_all(dir);
}
