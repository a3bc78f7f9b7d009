#pragma once

// Pseudo labels: k-means codebooks over frame features, the layer -> label-set
// dictionary, and the synthetic teacher that stands in for a frozen speaker
// embedding model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jooci/archive.hpp"
#include "jooci/config.hpp"
#include "jooci/data.hpp"
#include "jooci/model.hpp"
#include "jooci/rng.hpp"
#include "jooci/signal.hpp"

namespace jooci {

// Row-major N x dim feature matrix.
struct Features {
  std::size_t rows = 0, dim = 0;
  std::vector<double> data;

  const double* row(std::size_t i) const { return data.data() + i * dim; }
  double* row(std::size_t i) { return data.data() + i * dim; }
};

// Log energies in `bands` log-spaced bands over 100-4000 Hz, one row per
// 320-sample frame, mean and variance normalised per utterance.
inline Features band_features(const std::vector<float>& wave, std::size_t frames, int bands) {
  if (bands < 1) throw std::invalid_argument("band_features: need at least one band");
  constexpr std::size_t fft = 512;
  const auto spec = frame_power_spectra(wave, frames, kFrameSamples, 400, fft);
  std::vector<std::size_t> edge(static_cast<std::size_t>(bands) + 1);
  for (int b = 0; b <= bands; ++b) {
    const double f = 100.0 * std::pow(40.0, static_cast<double>(b) / bands);
    edge[static_cast<std::size_t>(b)] = static_cast<std::size_t>(std::lround(f * fft / kSampleRate));
  }
  for (std::size_t b = 1; b < edge.size(); ++b) edge[b] = std::max(edge[b], edge[b - 1] + 1);
  Features out{frames, static_cast<std::size_t>(bands), std::vector<double>(frames * static_cast<std::size_t>(bands))};
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t b = 0; b < out.dim; ++b) {
      double e = 0;
      for (std::size_t k = edge[b]; k < edge[b + 1]; ++k) e += spec[t][k];
      out.row(t)[b] = std::log(e + 1e-10);
    }
  for (std::size_t b = 0; b < out.dim && frames > 0; ++b) {
    double m = 0, v = 0;
    for (std::size_t t = 0; t < frames; ++t) m += out.row(t)[b];
    m /= static_cast<double>(frames);
    for (std::size_t t = 0; t < frames; ++t) v += (out.row(t)[b] - m) * (out.row(t)[b] - m);
    const double sd = std::sqrt(v / static_cast<double>(frames)) + 1e-8;
    for (std::size_t t = 0; t < frames; ++t) out.row(t)[b] = (out.row(t)[b] - m) / sd;
  }
  return out;
}

struct Codebook {
  std::size_t k = 0, dim = 0;
  std::vector<double> centers;  // k x dim
  double inertia = 0;
  std::vector<double> inertia_history;  // after each assignment step
  std::uint64_t seed = 0;

  const double* center(std::size_t c) const { return centers.data() + c * dim; }
};

inline double squared_distance(const double* a, const double* b, std::size_t dim) {
  double d = 0;
  for (std::size_t i = 0; i < dim; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

// Nearest center per row; the first of equidistant centers wins.
inline std::vector<int> assign_labels(const Features& x, const Codebook& cb, double* inertia = nullptr) {
  if (x.dim != cb.dim)
    throw std::invalid_argument("assign_labels: feature dim " + std::to_string(x.dim) + " vs codebook dim " +
                                std::to_string(cb.dim));
  std::vector<int> labels(x.rows);
  double total = 0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < cb.k; ++c) {
      const double d = squared_distance(x.row(i), cb.center(c), x.dim);
      if (d < best) best = d, arg = static_cast<int>(c);
    }
    labels[i] = arg;
    total += best;
  }
  if (inertia) *inertia = total;
  return labels;
}

// k-means++ seeding followed by Lloyd iterations. A cluster left empty by an
// update is moved onto the point currently farthest from its center. Throws
// if inertia ever increases.
inline Codebook kmeans_fit(const Features& x, std::size_t k, std::uint64_t seed, int iters) {
  if (k < 1) throw std::invalid_argument("kmeans_fit: k must be >= 1");
  if (x.rows < k)
    throw std::invalid_argument("kmeans_fit: " + std::to_string(x.rows) + " points for k=" + std::to_string(k));
  Rng rng(derive_seed(seed, Stream::kmeans));
  Codebook cb;
  cb.k = k;
  cb.dim = x.dim;
  cb.seed = seed;
  cb.centers.resize(k * x.dim);
  auto set_center = [&](std::size_t c, std::size_t row) { std::copy_n(x.row(row), x.dim, cb.centers.begin() + static_cast<long>(c * x.dim)); };

  set_center(0, static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(x.rows) - 1)));
  std::vector<double> d2(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) d2[i] = squared_distance(x.row(i), cb.center(0), x.dim);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0) {
      double r = rng.uniform(0, total);
      for (pick = 0; pick + 1 < x.rows; ++pick) {
        r -= d2[pick];
        if (r < 0) break;
      }
      while (d2[pick] == 0 && pick > 0) --pick;  // never land on an already chosen point
    } else {
      pick = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(x.rows) - 1));
    }
    set_center(c, pick);
    for (std::size_t i = 0; i < x.rows; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), cb.center(c), x.dim));
  }

  double inertia = 0;
  auto labels = assign_labels(x, cb, &inertia);
  cb.inertia_history.push_back(inertia);
  for (int it = 0; it < iters; ++it) {
    std::vector<double> sums(k * x.dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < x.dim; ++j) sums[c * x.dim + j] += x.row(i)[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < x.dim; ++j) cb.centers[c * x.dim + j] = sums[c * x.dim + j] / static_cast<double>(counts[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      double far_d = -1;
      for (std::size_t i = 0; i < x.rows; ++i) {
        const double d = squared_distance(x.row(i), cb.center(static_cast<std::size_t>(labels[i])), x.dim);
        if (d > far_d) far_d = d, far = i;
      }
      set_center(c, far);
      labels[far] = static_cast<int>(c);
    }
    const auto prev = inertia;
    auto next = assign_labels(x, cb, &inertia);
    if (inertia > prev * (1 + 1e-12) + 1e-12)
      throw std::runtime_error("kmeans_fit: inertia increased from " + std::to_string(prev) + " to " +
                               std::to_string(inertia) + " at iteration " + std::to_string(it));
    cb.inertia_history.push_back(inertia);
    const bool converged = next == labels;
    labels = std::move(next);
    if (converged) break;
  }
  cb.inertia = inertia;
  return cb;
}

// Stacks per-utterance feature blocks into one matrix.
inline Features stack(const std::vector<Features>& parts) {
  Features out;
  if (parts.empty()) return out;
  out.dim = parts[0].dim;
  for (const auto& p : parts) {
    if (p.dim != out.dim) throw std::invalid_argument("stack: feature dims differ");
    out.rows += p.rows;
    out.data.insert(out.data.end(), p.data.begin(), p.data.end());
  }
  return out;
}

inline std::vector<Features> corpus_band_features(const std::vector<Utterance>& corpus, int bands) {
  std::vector<Features> out;
  out.reserve(corpus.size());
  for (const auto& u : corpus) out.push_back(band_features(u.wave, u.phones.size(), bands));
  return out;
}

// Per-frame states of one Content layer (unmasked, eval mode), as features
// for refitting labels from a trained model.
template <class T>
std::vector<Features> content_layer_features(const JoociModel<T>& model, const std::vector<Utterance>& corpus, int layer) {
  if (layer < 0 || layer > model.config().content_layers)
    throw std::invalid_argument("content_layer_features: layer " + std::to_string(layer) + " out of range");
  NoGrad<T> guard;
  std::vector<Features> out;
  for (const auto& u : corpus) {
    Tensor<T> wave(Shape{1, u.wave.size()}, std::vector<T>(u.wave.begin(), u.wave.end()));
    auto frames = model.shared_encode(wave);
    auto layers = model.content_encode(frames);
    const auto& h = layers.at(static_cast<std::size_t>(layer));
    Features f{h.dim(1), h.dim(2), std::vector<double>(h.data().begin(), h.data().end())};
    if (f.rows != u.phones.size()) throw std::runtime_error("content_layer_features: frame count mismatch for " + u.id);
    out.push_back(std::move(f));
  }
  return out;
}

// Layer -> label set mapping plus the per-utterance labels of every set.
// labels[s][u] has one entry per frame of utterance u.
struct LabelDictionary {
  std::vector<int> layers;
  std::vector<int> sizes;
  std::vector<Codebook> codebooks;
  std::vector<std::vector<std::vector<int>>> labels;
  std::string feature_source = "band_energy";

  // The finest set, used as the regularizer target.
  std::size_t finest() const {
    return static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  }
};

// Fits one codebook per set on `features` (per utterance), with the size
// ladder and dictionary layers of the model config.
inline LabelDictionary build_label_dictionary(const ModelConfig& model, const std::vector<Features>& features,
                                              int kmeans_iters, std::uint64_t seed,
                                              const std::string& source = "band_energy") {
  LabelDictionary dict;
  dict.layers = dictionary_layers(model.content_layers, model.num_label_sets, model.label_anchor);
  dict.sizes = label_set_sizes(model.vocab_size, model.num_label_sets);
  dict.feature_source = source;
  const auto all = stack(features);
  for (std::size_t s = 0; s < dict.sizes.size(); ++s) {
    auto cb = kmeans_fit(all, static_cast<std::size_t>(dict.sizes[s]), derive_seed(seed, Stream::kmeans, s), kmeans_iters);
    std::vector<std::vector<int>> per_utt;
    per_utt.reserve(features.size());
    for (const auto& f : features) per_utt.push_back(assign_labels(f, cb));
    dict.codebooks.push_back(std::move(cb));
    dict.labels.push_back(std::move(per_utt));
  }
  return dict;
}

// <dir>/labels.jar holds codebook.<s>.centers [k, dim] and labels.<s>.<utt_id>
// [frames]; <dir>/labels.json records k, seed, layer, inertia and the
// feature source per set.
inline void save_label_dictionary(const LabelDictionary& dict, const std::vector<Utterance>& corpus,
                                  const std::filesystem::path& dir) {
  if (dict.labels.size() != dict.codebooks.size()) throw std::invalid_argument("save_label_dictionary: inconsistent dictionary");
  Archive ar;
  nlohmann::json sets = nlohmann::json::array();
  for (std::size_t s = 0; s < dict.codebooks.size(); ++s) {
    const auto& cb = dict.codebooks[s];
    ar.put("codebook." + std::to_string(s) + ".centers", Shape{cb.k, cb.dim}, cb.centers);
    for (std::size_t u = 0; u < corpus.size(); ++u) {
      const auto& l = dict.labels[s].at(u);
      ar.put("labels." + std::to_string(s) + "." + corpus[u].id, Shape{l.size()}, std::vector<std::int32_t>(l.begin(), l.end()));
    }
    sets.push_back({{"k", cb.k},
                    {"seed", cb.seed},
                    {"layer", dict.layers[s]},
                    {"inertia", cb.inertia},
                    {"iterations", cb.inertia_history.size() - 1}});
  }
  std::filesystem::create_directories(dir);
  ar.save(dir / "labels.jar");
  write_json(dir / "labels.json", {{"format_version", 1},
                                  {"feature_source", dict.feature_source},
                                  {"dim", dict.codebooks.empty() ? 0 : dict.codebooks[0].dim},
                                  {"num_utterances", corpus.size()},
                                  {"sets", sets}});
}

inline LabelDictionary load_label_dictionary(const std::vector<Utterance>& corpus, const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "labels.json");
  const auto ar = Archive::load(dir / "labels.jar");
  LabelDictionary dict;
  dict.feature_source = manifest.at("feature_source").get<std::string>();
  const auto& sets = manifest.at("sets");
  for (std::size_t s = 0; s < sets.size(); ++s) {
    Codebook cb;
    cb.k = sets[s].at("k").get<std::size_t>();
    cb.seed = sets[s].at("seed").get<std::uint64_t>();
    cb.inertia = sets[s].at("inertia").get<double>();
    const auto& e = ar.entry("codebook." + std::to_string(s) + ".centers");
    cb.dim = e.shape.at(1);
    cb.centers = ar.get<double>("codebook." + std::to_string(s) + ".centers");
    dict.layers.push_back(sets[s].at("layer").get<int>());
    dict.sizes.push_back(static_cast<int>(cb.k));
    std::vector<std::vector<int>> per_utt;
    for (const auto& u : corpus) {
      const auto l = ar.get<std::int32_t>("labels." + std::to_string(s) + "." + u.id);
      if (l.size() != u.phones.size()) throw std::runtime_error("labels for " + u.id + " do not match its frame count");
      per_utt.emplace_back(l.begin(), l.end());
    }
    dict.codebooks.push_back(std::move(cb));
    dict.labels.push_back(std::move(per_utt));
  }
  return dict;
}

// Synthetic stand-in for a frozen speaker-embedding teacher: each speaker
// owns a random unit vector; an utterance's embedding is that vector plus
// utterance-seeded Gaussian noise of total expected norm `noise_scale`,
// renormalised.
class TeacherOracle {
 public:
  TeacherOracle(std::uint64_t seed, std::size_t dim, double noise_scale)
      : seed_(seed), dim_(dim), noise_scale_(noise_scale) {
    if (dim == 0) throw std::invalid_argument("TeacherOracle: dim must be positive");
    if (noise_scale < 0) throw std::invalid_argument("TeacherOracle: noise_scale must be >= 0");
  }

  std::size_t dim() const { return dim_; }

  std::vector<double> base(int speaker) const {
    Rng rng(derive_seed(seed_, Stream::teacher, 0, speaker));
    return normalized(rng.normal_vector<double>(dim_));
  }

  std::vector<double> embed(int speaker, const std::string& utt_id) const {
    auto v = base(speaker);
    Rng rng(derive_seed(seed_, Stream::teacher, 1, speaker, fnv1a(utt_id.data(), utt_id.size())));
    const double sd = noise_scale_ / std::sqrt(static_cast<double>(dim_));
    for (auto& x : v) x += rng.normal(0, sd);
    return normalized(std::move(v));
  }

 private:
  static std::vector<double> normalized(std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    return v;
  }

  std::uint64_t seed_;
  std::size_t dim_;
  double noise_scale_;
};

}  // namespace jooci
