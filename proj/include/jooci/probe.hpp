#pragma once

// Frozen-encoder evaluation: layer extraction, learned weighted sums, linear
// probes for speaker identity (utterance level) and phones (frame level),
// CCA against frame labels, and the CSV report bundle.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jooci/archive.hpp"
#include "jooci/config.hpp"
#include "jooci/data.hpp"
#include "jooci/model.hpp"
#include "jooci/ops.hpp"
#include "jooci/optim.hpp"
#include "jooci/rng.hpp"

namespace jooci {

enum class ProbeTask { sid, pr };
enum class EncoderSide { content, other };
enum class PostStage { none, asp, bn, fc };

inline const char* task_name(ProbeTask t) { return t == ProbeTask::sid ? "SID" : "PR"; }
inline const char* encoder_name(EncoderSide e) { return e == EncoderSide::content ? "content" : "other"; }

inline ProbeTask parse_task(const std::string& s) {
  if (s == "sid" || s == "SID") return ProbeTask::sid;
  if (s == "pr" || s == "PR") return ProbeTask::pr;
  throw std::invalid_argument("unknown probe task '" + s + "' (expected sid or pr)");
}

inline EncoderSide parse_encoder(const std::string& s) {
  if (s == "content") return EncoderSide::content;
  if (s == "other") return EncoderSide::other;
  throw std::invalid_argument("unknown encoder '" + s + "' (expected content or other)");
}

// States of one utterance. content[l] is [T, D] for l = 0..L; other[l] is
// [S, C] for l = 0..blocks (0 = input projection); asp/bn are [2C], fc [E].
struct UtteranceStates {
  std::vector<Tensor<float>> content, other;
  Tensor<float> asp, bn, fc;
};

// Unmasked, eval-mode, tape-free forward pass.
inline UtteranceStates extract_layers(const JoociModel<float>& model, const std::vector<float>& wave) {
  NoGrad<float> guard;
  ForwardOptions fo;
  fo.training = false;
  fo.mask = false;
  fo.content_grad = false;
  fo.regularizer = false;
  Tensor<float> w(Shape{1, wave.size()}, wave);
  auto f = model.forward(w, fo);
  UtteranceStates s;
  for (const auto& c : f.content_layers) s.content.push_back(reshape(c, Shape{c.dim(1), c.dim(2)}));
  for (const auto& o : f.other_layers) {
    auto t = transpose(o);
    s.other.push_back(reshape(t, Shape{t.dim(1), t.dim(2)}));
  }
  s.asp = reshape(f.post->asp, Shape{f.post->asp.numel()});
  s.bn = reshape(f.post->bn, Shape{f.post->bn.numel()});
  s.fc = reshape(f.post->fc, Shape{f.post->fc.numel()});
  return s;
}

// A set of layers of one encoder, or one post-network stage of the Other
// encoder. `label` is the string used in reports.
struct LayerSelection {
  std::vector<int> layers;
  PostStage post = PostStage::none;
  std::string label;
};

// Accepts all | last | upper | <k> | <a>-<b> | asp | bn | fc. `count` is the
// number of layer states (L + 1); `upper` means ceil(L/2)..L.
inline LayerSelection parse_layer_selection(const std::string& spec, int count, EncoderSide enc) {
  LayerSelection sel;
  sel.label = spec;
  const int last = count - 1;
  auto range = [&](int a, int b) {
    if (a < 0 || b > last || a > b)
      throw std::invalid_argument("layer selection '" + spec + "' outside 0-" + std::to_string(last));
    for (int i = a; i <= b; ++i) sel.layers.push_back(i);
  };
  if (spec == "all") {
    range(0, last);
  } else if (spec == "last") {
    range(last, last);
  } else if (spec == "upper") {
    range((last + 1) / 2, last);
  } else if (spec == "asp" || spec == "bn" || spec == "fc") {
    if (enc != EncoderSide::other) throw std::invalid_argument("post-network stages exist only for the Other encoder");
    sel.post = spec == "asp" ? PostStage::asp : spec == "bn" ? PostStage::bn : PostStage::fc;
  } else {
    const auto dash = spec.find('-');
    try {
      std::size_t used = 0;
      if (dash == std::string::npos) {
        const int k = std::stoi(spec, &used);
        if (used != spec.size()) throw std::invalid_argument(spec);
        range(k, k);
      } else {
        const int a = std::stoi(spec.substr(0, dash), &used);
        if (used != dash) throw std::invalid_argument(spec);
        const auto rest = spec.substr(dash + 1);
        const int b = std::stoi(rest, &used);
        if (used != rest.size()) throw std::invalid_argument(spec);
        range(a, b);
      }
    } catch (const std::logic_error&) {
      throw std::invalid_argument("bad layer selection '" + spec + "' (all, last, upper, k, a-b, asp, bn, fc)");
    }
  }
  return sel;
}

// Softmax-normalised combination of same-shape layers.
template <class T>
Tensor<T> weighted_combine(const std::vector<Tensor<T>>& layers, const Tensor<T>& logits) {
  return weighted_sum(layers, softmax(logits));
}

// Probe inputs: one [n, d] matrix per selected layer plus targets.
struct ProbeData {
  std::vector<Tensor<float>> layers;
  std::vector<int> targets;
};

inline Tensor<float> mean_rows(const Tensor<float>& x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<float> m(d, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m[j] += x[i * d + j];
  for (auto& v : m) v /= static_cast<float>(n);
  return Tensor<float>(Shape{d}, std::move(m));
}

// SID rows are time-averaged layer states (or a post-network vector); PR
// rows are frames, with Other segments repeated over their group of frames.
inline ProbeData probe_data(const std::vector<UtteranceStates>& states, const std::vector<Utterance>& corpus,
                            const std::vector<std::size_t>& utts, ProbeTask task, EncoderSide enc,
                            const LayerSelection& sel, int group_size) {
  if (utts.empty()) throw std::invalid_argument("probe_data: no utterances");
  ProbeData out;
  const std::size_t nl = sel.post == PostStage::none ? sel.layers.size() : 1;
  std::vector<std::vector<float>> rows(nl);
  std::size_t dim = 0;
  auto append = [&](std::size_t l, const float* p, std::size_t d) {
    dim = d;
    rows[l].insert(rows[l].end(), p, p + d);
  };
  for (auto u : utts) {
    const auto& s = states.at(u);
    if (sel.post != PostStage::none) {
      if (task != ProbeTask::sid) throw std::invalid_argument("post-network stages are utterance-level (SID only)");
      const auto& v = sel.post == PostStage::asp ? s.asp : sel.post == PostStage::bn ? s.bn : s.fc;
      append(0, v.data().data(), v.numel());
      out.targets.push_back(corpus[u].speaker);
      continue;
    }
    const auto& src = enc == EncoderSide::content ? s.content : s.other;
    if (task == ProbeTask::sid) {
      for (std::size_t l = 0; l < nl; ++l) {
        const auto m = mean_rows(src.at(static_cast<std::size_t>(sel.layers[l])));
        append(l, m.data().data(), m.numel());
      }
      out.targets.push_back(corpus[u].speaker);
    } else {
      const std::size_t T = corpus[u].phones.size();
      for (std::size_t l = 0; l < nl; ++l) {
        const auto& x = src.at(static_cast<std::size_t>(sel.layers[l]));
        const std::size_t d = x.dim(1);
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t r = enc == EncoderSide::content ? t : t / static_cast<std::size_t>(group_size);
          if (r >= x.dim(0)) throw std::runtime_error("probe_data: state shorter than label sequence");
          append(l, x.data().data() + r * d, d);
        }
      }
      out.targets.insert(out.targets.end(), corpus[u].phones.begin(), corpus[u].phones.end());
    }
  }
  for (auto& r : rows) out.layers.emplace_back(Shape{r.size() / dim, dim}, std::move(r));
  return out;
}

// Per-dimension standardisation with statistics of `fit`, applied to both.
inline void standardize(std::vector<Tensor<float>>& fit, std::vector<Tensor<float>>& apply) {
  for (std::size_t l = 0; l < fit.size(); ++l) {
    const std::size_t n = fit[l].dim(0), d = fit[l].dim(1);
    std::vector<double> m(d, 0.0), v(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) m[j] += fit[l][i * d + j];
    for (auto& x : m) x /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) v[j] += std::pow(fit[l][i * d + j] - m[j], 2);
    for (auto& x : v) x = std::sqrt(x / static_cast<double>(n)) + 1e-6;
    for (auto* t : {&fit[l], &apply[l]}) {
      auto p = t->data();
      for (std::size_t i = 0; i < t->dim(0); ++i)
        for (std::size_t j = 0; j < d; ++j) p[i * d + j] = static_cast<float>((p[i * d + j] - m[j]) / v[j]);
    }
  }
}

struct ProbeReport {
  ProbeTask task = ProbeTask::sid;
  EncoderSide encoder = EncoderSide::content;
  std::string layers;              // selection label
  std::vector<int> layer_ids;      // empty for post-network stages
  double accuracy = 0;             // held-out
  double train_accuracy = 0;
  std::vector<double> weights;     // softmax-normalised; empty for one layer
};

struct LinearProbe {
  Tensor<float> layer_logits;  // [L] or undefined for a single layer
  Tensor<float> weight, bias;

  Tensor<float> logits(const std::vector<Tensor<float>>& xs) const {
    auto x = xs.size() == 1 ? xs[0] : weighted_combine(xs, layer_logits);
    return linear(x, weight, bias);
  }

  std::vector<int> predict(const std::vector<Tensor<float>>& layers) const {
    NoGrad<float> guard;
    const std::size_t n = layers[0].dim(0), chunk = 4096;
    std::vector<int> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; s += chunk) {
      std::vector<std::size_t> rows(std::min(chunk, n - s));
      std::iota(rows.begin(), rows.end(), s);
      std::vector<Tensor<float>> xs;
      for (const auto& l : layers) xs.push_back(gather_rows(l, rows));
      const auto z = logits(xs);
      const std::size_t c = z.dim(1);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const float* r = z.data().data() + i * c;
        out.push_back(static_cast<int>(std::max_element(r, r + c) - r));
      }
    }
    return out;
  }
};

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& target) {
  if (pred.size() != target.size() || pred.empty()) throw std::invalid_argument("accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == target[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Adam on cross-entropy of a linear head over the (weighted) layers; zero
// initialisation, minibatches drawn from a seeded stream.
inline LinearProbe fit_linear_probe(const ProbeData& train, int classes, const ProbeConfig& cfg, std::uint64_t seed) {
  std::set<int> distinct(train.targets.begin(), train.targets.end());
  if (distinct.size() < 2) throw std::invalid_argument("probe: training split has a single class");
  const std::size_t n = train.layers[0].dim(0), d = train.layers[0].dim(1);
  LinearProbe p;
  const auto C = static_cast<std::size_t>(classes);
  p.weight = Tensor<float>(Shape{C, d}).set_requires_grad(true);
  p.bias = Tensor<float>(Shape{C}).set_requires_grad(true);
  if (train.layers.size() > 1) p.layer_logits = Tensor<float>(Shape{train.layers.size()}).set_requires_grad(true);
  AdamW<float> opt(0.9, 0.98, 1e-6, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::min(n, static_cast<std::size_t>(cfg.batch));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> rows;
    if (batch == n) {
      rows = order;
    } else {
      Rng rng(derive_seed(seed, Stream::probe, step));
      for (std::size_t i = 0; i < batch; ++i) {
        const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
        std::swap(order[i], order[j]);
      }
      rows.assign(order.begin(), order.begin() + static_cast<long>(batch));
    }
    std::vector<int> y;
    y.reserve(rows.size());
    for (auto r : rows) y.push_back(train.targets[r]);
    Tape<float> tape;
    std::vector<Tensor<float>> xs;
    for (const auto& l : train.layers) xs.push_back(gather_rows(l, rows));
    backward(tape, cross_entropy(p.logits(xs), y));
    opt.step("weight", p.weight, cfg.lr);
    opt.step("bias", p.bias, cfg.lr);
    if (p.layer_logits.defined()) opt.step("layers", p.layer_logits, cfg.lr);
    p.weight.zero_grad();
    p.bias.zero_grad();
    if (p.layer_logits.defined()) p.layer_logits.zero_grad();
  }
  return p;
}

inline std::vector<double> probe_weights(const LinearProbe& p) {
  if (!p.layer_logits.defined()) return {};
  NoGrad<float> guard;
  const auto w = softmax(p.layer_logits);
  return {w.data().begin(), w.data().end()};
}

struct ProbeContext {
  const std::vector<Utterance>* corpus;
  const std::vector<UtteranceStates>* states;
  CorpusSplit split;
  int group_size = 10;
  int num_speakers = 0;
  int num_phones = 0;
};

inline ProbeContext make_probe_context(const std::vector<Utterance>& corpus, const std::vector<UtteranceStates>& states,
                                       int test_per_speaker, int group_size) {
  ProbeContext ctx{&corpus, &states, split_corpus(corpus, test_per_speaker), group_size, 0, 0};
  for (const auto& u : corpus) {
    ctx.num_speakers = std::max(ctx.num_speakers, u.speaker + 1);
    for (int p : u.phones) ctx.num_phones = std::max(ctx.num_phones, p + 1);
  }
  if (ctx.split.test.empty()) throw std::invalid_argument("probe: no held-out utterances (probe_test_utts = 0)");
  return ctx;
}

inline ProbeReport train_probe(const ProbeContext& ctx, ProbeTask task, EncoderSide enc, const std::string& layers,
                               const ProbeConfig& cfg, std::uint64_t seed) {
  const auto& s0 = ctx.states->at(0);
  const int count = static_cast<int>(enc == EncoderSide::content ? s0.content.size() : s0.other.size());
  const auto sel = parse_layer_selection(layers, count, enc);
  auto train = probe_data(*ctx.states, *ctx.corpus, ctx.split.train, task, enc, sel, ctx.group_size);
  auto test = probe_data(*ctx.states, *ctx.corpus, ctx.split.test, task, enc, sel, ctx.group_size);
  standardize(train.layers, test.layers);
  const int classes = task == ProbeTask::sid ? ctx.num_speakers : ctx.num_phones;
  const auto probe = fit_linear_probe(train, classes, cfg,
                                      derive_seed(seed, static_cast<int>(task), static_cast<int>(enc), fnv1a(layers.data(), layers.size())));
  ProbeReport r;
  r.task = task;
  r.encoder = enc;
  r.layers = layers;
  r.layer_ids = sel.layers;
  r.accuracy = accuracy(probe.predict(test.layers), test.targets);
  r.train_accuracy = accuracy(probe.predict(train.layers), train.targets);
  r.weights = probe_weights(probe);
  return r;
}

// ---------------------------------------------------------------------------
// CCA

struct CcaResult {
  double score = 0;
  std::vector<double> correlations;
  bool regularized = false;  // a covariance was rank deficient before the ridge
};

// Mean canonical correlation between rows of `x` and one-hot indicators of
// `labels` (k present classes, one indicator column dropped after centring).
// Covariances receive a ridge of eps * mean diagonal.
inline CcaResult cca_similarity(const Eigen::MatrixXd& x, const std::vector<int>& labels, double eps = 1e-6) {
  const auto n = x.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("cca: row/label count mismatch");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw std::invalid_argument("cca: need at least two label classes");
  const auto k = static_cast<Eigen::Index>(classes.size());
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, k - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = std::lower_bound(classes.begin(), classes.end(), labels[static_cast<std::size_t>(i)]) - classes.begin();
    if (c < k - 1) y(i, c) = 1;
  }
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  const double denom = static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
  CcaResult res;
  auto inv_sqrt = [&](Eigen::MatrixXd c) {
    const double ridge = eps * std::max(c.diagonal().mean(), 1e-300);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    if (es.eigenvalues().minCoeff() <= ridge) res.regularized = true;
    c.diagonal().array() += ridge;
    es.compute(c);
    return Eigen::MatrixXd(es.eigenvectors() * es.eigenvalues().cwiseMax(ridge).cwiseSqrt().cwiseInverse().asDiagonal() *
                           es.eigenvectors().transpose());
  };
  const Eigen::MatrixXd wx = inv_sqrt(xc.transpose() * xc / denom);
  const Eigen::MatrixXd wy = inv_sqrt(yc.transpose() * yc / denom);
  const Eigen::MatrixXd m = wx * (xc.transpose() * yc / denom) * wy;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto r = std::min<Eigen::Index>(x.cols(), k - 1);
  double total = 0;
  for (Eigen::Index i = 0; i < r; ++i) {
    const double c = std::clamp(svd.singularValues()(i), 0.0, 1.0);
    res.correlations.push_back(c);
    total += c;
  }
  res.score = r > 0 ? total / static_cast<double>(r) : 0.0;
  return res;
}

// CCA of each Content layer's frames with phone labels over `utts`.
inline std::vector<CcaResult> layer_cca(const std::vector<UtteranceStates>& states, const std::vector<Utterance>& corpus,
                                        const std::vector<std::size_t>& utts, EncoderSide enc, int group_size) {
  const std::size_t count = enc == EncoderSide::content ? states.at(0).content.size() : states.at(0).other.size();
  std::vector<CcaResult> out;
  for (std::size_t l = 0; l < count; ++l) {
    LayerSelection sel{{static_cast<int>(l)}, PostStage::none, std::to_string(l)};
    const auto data = probe_data(states, corpus, utts, ProbeTask::pr, enc, sel, group_size);
    const auto& t = data.layers[0];
    Eigen::MatrixXd x(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
      for (std::size_t j = 0; j < t.dim(1); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t[i * t.dim(1) + j];
    out.push_back(cca_similarity(x, data.targets));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV report bundle
//
//   layer_weights.csv        task,layer,weight        Content weighted sums
//   layer_weights_other.csv  task,layer,weight        Other weighted sums
//   cca.csv                  layer,score              Content layers vs phones
//   cca_other.csv            layer,score              Other layers vs phones
//   probes.csv               task,encoder,layers,accuracy
//   ablations.csv            variant,metric,value,delta_vs_base

using CsvRow = std::vector<std::string>;

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_csv(const std::filesystem::path& path, const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::ostringstream os;
  auto line = [&](const CsvRow& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (r[i].find_first_of(",\"\n") != std::string::npos)
        throw std::invalid_argument("write_csv: field needs quoting: " + r[i]);
      os << (i ? "," : "") << r[i];
    }
    os << "\n";
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw std::invalid_argument("write_csv: row width differs from header");
    line(r);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << os.str();
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline std::pair<CsvRow, std::vector<CsvRow>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<CsvRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    CsvRow r;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) r.push_back(f);
    if (!line.empty() && line.back() == ',') r.emplace_back();
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error(path.string() + ": empty CSV");
  CsvRow header = std::move(rows.front());
  rows.erase(rows.begin());
  return {header, rows};
}

inline void write_layer_weights(const std::filesystem::path& path, const std::vector<ProbeReport>& reports) {
  std::vector<CsvRow> rows;
  for (const auto& r : reports) {
    if (r.weights.size() != r.layer_ids.size()) throw std::invalid_argument("write_layer_weights: report without weights");
    for (std::size_t i = 0; i < r.weights.size(); ++i)
      rows.push_back({task_name(r.task), std::to_string(r.layer_ids[i]), format_double(r.weights[i])});
  }
  write_csv(path, {"task", "layer", "weight"}, rows);
}

inline void write_cca(const std::filesystem::path& path, const std::vector<CcaResult>& layers) {
  std::vector<CsvRow> rows;
  for (std::size_t l = 0; l < layers.size(); ++l) rows.push_back({std::to_string(l), format_double(layers[l].score)});
  write_csv(path, {"layer", "score"}, rows);
}

inline void write_probes(const std::filesystem::path& path, const std::vector<ProbeReport>& reports) {
  std::vector<CsvRow> rows;
  for (const auto& r : reports)
    rows.push_back({task_name(r.task), encoder_name(r.encoder), r.layers, format_double(r.accuracy)});
  write_csv(path, {"task", "encoder", "layers", "accuracy"}, rows);
}

struct AblationRow {
  std::string variant, metric;
  double value = 0, delta_vs_base = 0;
};

inline void write_ablations(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::vector<CsvRow> out;
  for (const auto& r : rows) out.push_back({r.variant, r.metric, format_double(r.value), format_double(r.delta_vs_base)});
  write_csv(path, {"variant", "metric", "value", "delta_vs_base"}, out);
}

// ---------------------------------------------------------------------------
// Full analysis

struct ProbeCell {
  ProbeTask task;
  EncoderSide encoder;
  std::string layers;
};

inline std::vector<ProbeCell> default_probe_suite() {
  return {
      {ProbeTask::sid, EncoderSide::content, "all"}, {ProbeTask::sid, EncoderSide::content, "last"},
      {ProbeTask::sid, EncoderSide::other, "all"},   {ProbeTask::sid, EncoderSide::other, "last"},
      {ProbeTask::sid, EncoderSide::other, "asp"},   {ProbeTask::sid, EncoderSide::other, "bn"},
      {ProbeTask::sid, EncoderSide::other, "fc"},    {ProbeTask::pr, EncoderSide::content, "all"},
      {ProbeTask::pr, EncoderSide::content, "upper"}, {ProbeTask::pr, EncoderSide::content, "last"},
      {ProbeTask::pr, EncoderSide::other, "all"},    {ProbeTask::pr, EncoderSide::other, "last"},
  };
}

struct Analysis {
  std::vector<ProbeReport> probes;
  std::vector<CcaResult> cca_content, cca_other;

  const ProbeReport& find(ProbeTask t, EncoderSide e, const std::string& layers) const {
    for (const auto& p : probes)
      if (p.task == t && p.encoder == e && p.layers == layers) return p;
    throw std::out_of_range(std::string("no probe ") + task_name(t) + "/" + encoder_name(e) + "/" + layers);
  }
};

inline std::vector<UtteranceStates> extract_corpus(const JoociModel<float>& model, const std::vector<Utterance>& corpus) {
  std::vector<UtteranceStates> states;
  states.reserve(corpus.size());
  for (const auto& u : corpus) states.push_back(extract_layers(model, u.wave));
  return states;
}

// Runs `cells` and CCA on held-out frames; writes the CSV bundle when
// out_dir is non-empty.
inline Analysis analyze(const JoociModel<float>& model, const std::vector<Utterance>& corpus, const ProbeConfig& cfg,
                        std::uint64_t seed, const std::filesystem::path& out_dir,
                        const std::vector<ProbeCell>& cells = default_probe_suite()) {
  const auto states = extract_corpus(model, corpus);
  const auto ctx = make_probe_context(corpus, states, cfg.test_utts_per_speaker, model.config().group_size);
  Analysis a;
  for (const auto& c : cells) a.probes.push_back(train_probe(ctx, c.task, c.encoder, c.layers, cfg, seed));
  a.cca_content = layer_cca(states, corpus, ctx.split.test, EncoderSide::content, ctx.group_size);
  a.cca_other = layer_cca(states, corpus, ctx.split.test, EncoderSide::other, ctx.group_size);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::vector<ProbeReport> wc, wo;
    for (const auto& p : a.probes)
      if (p.layers == "all") (p.encoder == EncoderSide::content ? wc : wo).push_back(p);
    write_layer_weights(out_dir / "layer_weights.csv", wc);
    write_layer_weights(out_dir / "layer_weights_other.csv", wo);
    write_cca(out_dir / "cca.csv", a.cca_content);
    write_cca(out_dir / "cca_other.csv", a.cca_other);
    write_probes(out_dir / "probes.csv", a.probes);
  }
  return a;
}

}  // namespace jooci
