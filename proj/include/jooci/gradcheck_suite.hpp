#pragma once

// Named finite-difference checks over every differentiable primitive and the
// composite blocks of the model, run in double precision. Shared by the CLI
// and the acceptance binary.

#include <functional>
#include <string>
#include <vector>

#include "jooci/gradcheck.hpp"
#include "jooci/losses.hpp"
#include "jooci/model.hpp"
#include "jooci/ops.hpp"

namespace jooci {

struct GradCheckCase {
  std::string name;
  bool composite = false;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

// A model small enough that checking every parameter element stays cheap.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.conv_channels = 4;
  c.content_layers = 2;
  c.content_dim = 8;
  c.content_heads = 2;
  c.content_ffn = 12;
  c.pos_conv_kernel = 4;
  c.pos_conv_groups = 2;
  c.other_blocks = 2;
  c.other_dim = 8;
  c.vocab_size = 6;
  c.num_label_sets = 2;
  c.code_dim = 4;
  c.teacher_dim = 6;
  c.reg_heads = 2;
  c.reg_dim = 8;
  c.reg_ffn = 10;
  return c;
}

namespace detail {

using TD = Tensor<double>;
using Inputs = std::vector<std::pair<std::string, TD>>;

inline TD gc_randn(Shape s, std::uint64_t seed, std::uint64_t part, double sd = 1.0) {
  Rng rng(derive_seed(seed, Stream::gradcheck, part));
  const auto n = numel(s);
  return TD(std::move(s), rng.normal_vector<double>(n, sd));
}

// Scalar readout through a fixed random projection so every output element
// contributes a distinct weight.
inline TD gc_project(const TD& y, std::uint64_t seed) {
  return sum(mul(y, gc_randn(y.shape(), seed, 999)));
}

inline std::vector<int> gc_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::gradcheck, 777));
  std::vector<int> l(n);
  for (auto& v : l) v = static_cast<int>(rng.integer(0, classes - 1));
  return l;
}

inline GradCheckOptions gc_options(std::uint64_t seed, std::size_t samples = 0) {
  GradCheckOptions o;
  o.seed = derive_seed(seed, Stream::gradcheck);
  o.samples_per_tensor = samples;
  return o;
}

inline Inputs gc_params(JoociModel<double>& m, const std::function<bool(const NamedParam<double>&)>& keep) {
  Inputs in;
  for (auto& p : m.registry().params())
    if (keep(p)) in.emplace_back(p.name, p.tensor);
  return in;
}

inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

// Unary op on a [2,3,5] input.
inline GradCheckCase unary(std::string name, TD (*op)(const TD&), double sd = 1.0) {
  return {name, false, [op, sd](std::uint64_t s) {
            TD x = gc_randn({2, 3, 5}, s, 1, sd);
            return grad_check([&] { return gc_project(op(x), s); }, {{"x", x}}, gc_options(s));
          }};
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_cases() {
  using namespace detail;
  std::vector<GradCheckCase> cs;

  cs.push_back({"add", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1), b = gc_randn({3, 4}, s, 2);
                  return grad_check([&] { return gc_project(add(a, b), s); }, {{"a", a}, {"b", b}}, gc_options(s));
                }});
  cs.push_back({"sub", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1), b = gc_randn({3, 4}, s, 2);
                  return grad_check([&] { return gc_project(sub(a, b), s); }, {{"a", a}, {"b", b}}, gc_options(s));
                }});
  cs.push_back({"mul", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1), b = gc_randn({3, 4}, s, 2);
                  return grad_check([&] { return gc_project(mul(a, b), s); }, {{"a", a}, {"b", b}}, gc_options(s));
                }});
  cs.push_back({"scale", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1);
                  return grad_check([&] { return gc_project(scale(a, 0.37), s); }, {{"a", a}}, gc_options(s));
                }});
  cs.push_back({"divide", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1);
                  return grad_check([&] { return gc_project(divide(a, 10.0), s); }, {{"a", a}}, gc_options(s));
                }});
  cs.push_back({"sum", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1);
                  return grad_check([&] { return mul(sum(a), sum(a)); }, {{"a", a}}, gc_options(s));
                }});
  cs.push_back({"mean", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1);
                  return grad_check([&] { return mul(mean(a), sum(a)); }, {{"a", a}}, gc_options(s));
                }});
  cs.push_back(unary("relu", [](const TD& x) { return relu(x); }));
  cs.push_back(unary("tanh", [](const TD& x) { return tanh(x); }));
  cs.push_back(unary("gelu", [](const TD& x) { return gelu(x); }));
  cs.push_back(unary("softmax", [](const TD& x) { return softmax(x); }, 2.0));
  cs.push_back(unary("transpose", [](const TD& x) { return transpose(x); }));
  cs.push_back(unary("reshape", [](const TD& x) { return reshape(x, Shape{6, 5}); }));
  cs.push_back(unary("slice", [](const TD& x) { return slice(x, 2, 1, 3); }));
  cs.push_back(unary("pad_time", [](const TD& x) { return pad_time(x, 3); }));
  cs.push_back(unary("repeat_time", [](const TD& x) { return repeat_time(x, 3, 13); }));
  cs.push_back(unary("avg_pool1d", [](const TD& x) { return avg_pool1d(x, 2, 2); }));
  // Identity reversal so the numeric derivative matches; the sign itself is
  // covered by the exact negation check.
  cs.push_back(unary("grad_reverse", [](const TD& x) { return grad_reverse(x, -1.0); }));
  cs.push_back({"concat", false, [](std::uint64_t s) {
                  TD a = gc_randn({2, 3, 4}, s, 1), b = gc_randn({2, 2, 4}, s, 2);
                  return grad_check([&] { return gc_project(concat<double>({a, b}, 1), s); }, {{"a", a}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"gather_rows", false, [](std::uint64_t s) {
                  TD a = gc_randn({6, 3}, s, 1);
                  return grad_check([&] { return gc_project(gather_rows(a, {4, 0, 4, 2}), s); }, {{"a", a}},
                                    gc_options(s));
                }});
  cs.push_back({"masked_replace", false, [](std::uint64_t s) {
                  TD a = gc_randn({2, 3, 4}, s, 1), f = gc_randn({4}, s, 2);
                  const std::vector<std::uint8_t> m{1, 0, 0, 0, 1, 1};
                  return grad_check([&] { return gc_project(masked_replace(a, m, f), s); }, {{"a", a}, {"fill", f}},
                                    gc_options(s));
                }});
  cs.push_back({"linear", false, [](std::uint64_t s) {
                  TD x = gc_randn({2, 3, 5}, s, 1), w = gc_randn({4, 5}, s, 2), b = gc_randn({4}, s, 3);
                  return grad_check([&] { return gc_project(linear(x, w, b), s); }, {{"x", x}, {"w", w}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"conv1d", false, [](std::uint64_t s) {
                  TD x = gc_randn({2, 4, 11}, s, 1), w = gc_randn({6, 2, 3}, s, 2), b = gc_randn({6}, s, 3);
                  const Conv1dOptions o{2, 2, 2, 1, 2};
                  return grad_check([&] { return gc_project(conv1d(x, w, b, o), s); }, {{"x", x}, {"w", w}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"conv1d_depthwise", false, [](std::uint64_t s) {
                  TD x = gc_randn({2, 3, 12}, s, 1), w = gc_randn({3, 1, 4}, s, 2), b = gc_randn({3}, s, 3);
                  const Conv1dOptions o{4, 1, 0, 0, 3};
                  return grad_check([&] { return gc_project(conv1d(x, w, b, o), s); }, {{"x", x}, {"w", w}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"layer_norm", false, [](std::uint64_t s) {
                  TD x = gc_randn({2, 3, 5}, s, 1), g = gc_randn({5}, s, 2), b = gc_randn({5}, s, 3);
                  return grad_check([&] { return gc_project(layer_norm(x, g, b), s); }, {{"x", x}, {"g", g}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"instance_norm", false, [](std::uint64_t s) {
                  TD x = gc_randn({2, 3, 6}, s, 1), g = gc_randn({3}, s, 2), b = gc_randn({3}, s, 3);
                  return grad_check([&] { return gc_project(instance_norm(x, g, b), s); },
                                    {{"x", x}, {"g", g}, {"b", b}}, gc_options(s));
                }});
  cs.push_back({"batch_norm", false, [](std::uint64_t s) {
                  TD x = gc_randn({3, 2, 4}, s, 1), g = gc_randn({2}, s, 2), b = gc_randn({2}, s, 3);
                  BatchNormState<double> st(2);
                  return grad_check([&] { return gc_project(batch_norm(x, g, b, st, true), s); },
                                    {{"x", x}, {"g", g}, {"b", b}}, gc_options(s));
                }});
  cs.push_back({"attention", false, [](std::uint64_t s) {
                  TD q = gc_randn({2, 3, 4}, s, 1), k = gc_randn({2, 5, 4}, s, 2), v = gc_randn({2, 5, 4}, s, 3);
                  return grad_check([&] { return gc_project(attention(q, k, v, 2), s); },
                                    {{"q", q}, {"k", k}, {"v", v}}, gc_options(s));
                }});
  cs.push_back({"cosine_similarity", false, [](std::uint64_t s) {
                  TD u = gc_randn({5}, s, 1), v = gc_randn({5}, s, 2);
                  return grad_check([&] { return cosine_similarity(u, v); }, {{"u", u}, {"v", v}}, gc_options(s));
                }});
  cs.push_back({"rowwise_cosine", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1), b = gc_randn({3, 4}, s, 2);
                  return grad_check([&] { return gc_project(rowwise_cosine(a, b), s); }, {{"a", a}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"cosine_matrix", false, [](std::uint64_t s) {
                  TD a = gc_randn({3, 4}, s, 1), b = gc_randn({5, 4}, s, 2);
                  return grad_check([&] { return gc_project(cosine_matrix(a, b), s); }, {{"a", a}, {"b", b}},
                                    gc_options(s));
                }});
  cs.push_back({"cross_entropy", false, [](std::uint64_t s) {
                  TD z = gc_randn({4, 5}, s, 1, 2.0);
                  return grad_check([&] { return cross_entropy(z, {2, -1, 0, 4}); }, {{"logits", z}}, gc_options(s));
                }});
  cs.push_back({"split_and_append", false, [](std::uint64_t s) {
                  TD c = gc_randn({2, 3, 6}, s, 1), o = gc_randn({2, 3, 2}, s, 2);
                  return grad_check([&] { return gc_project(split_and_append(c, o, 3), s); },
                                    {{"content", c}, {"other", o}}, gc_options(s));
                }});
  cs.push_back({"weighted_stats", false, [](std::uint64_t s) {
                  TD h = gc_randn({2, 3, 5}, s, 1), z = gc_randn({2, 1, 5}, s, 2);
                  return grad_check([&] { return gc_project(weighted_stats(h, softmax(z)), s); },
                                    {{"h", h}, {"score", z}}, gc_options(s));
                }});
  cs.push_back({"weighted_sum", false, [](std::uint64_t s) {
                  TD a = gc_randn({2, 3}, s, 1), b = gc_randn({2, 3}, s, 2), w = gc_randn({2}, s, 3);
                  return grad_check([&] { return gc_project(weighted_sum<double>({a, b}, softmax(w)), s); },
                                    {{"a", a}, {"b", b}, {"w", w}}, gc_options(s));
                }});

  // Composite blocks of the micro model. Parameters are checked in full.
  cs.push_back({"shared_encoder", true, [](std::uint64_t s) {
                  JoociModel<double> m(gradcheck_model_config(), s);
                  TD wave = gc_randn({2, 4 * m.min_samples()}, s, 1, 0.3);
                  auto in = gc_params(m, [](const auto& p) { return p.component == Component::shared; });
                  in.emplace_back("wave", wave);
                  return grad_check([&] { return gc_project(m.shared_encode(wave), s); }, in, gc_options(s, 16));
                }});
  cs.push_back({"content_encoder", true, [](std::uint64_t s) {
                  JoociModel<double> m(gradcheck_model_config(), s);
                  TD x = gc_randn({2, 6, 8}, s, 1);
                  auto in = gc_params(m, [](const auto& p) { return starts_with(p.name, "content.") && !starts_with(p.name, "content.head") && p.name != "content.mask_embedding"; });
                  in.emplace_back("frames", x);
                  return grad_check([&] { return gc_project(m.content_encode(x).back(), s); }, in, gc_options(s));
                }});
  cs.push_back({"other_block", true, [](std::uint64_t s) {
                  JoociModel<double> m(gradcheck_model_config(), s);
                  TD x = gc_randn({2, 8, 3}, s, 1), tap = gc_randn({2, 25, 8}, s, 2);
                  auto in = gc_params(m, [](const auto& p) { return starts_with(p.name, "other.block1."); });
                  in.emplace_back("x", x);
                  return grad_check([&] { return gc_project(m.other_block(1, x, tap, true), s); }, in, gc_options(s));
                }});
  cs.push_back({"asp_post_network", true, [](std::uint64_t s) {
                  JoociModel<double> m(gradcheck_model_config(), s);
                  TD h = gc_randn({3, 8, 4}, s, 1);
                  auto in = gc_params(m, [](const auto& p) { return starts_with(p.name, "post."); });
                  in.emplace_back("h", h);
                  return grad_check([&] { return gc_project(m.post_network(h, true).fc, s); }, in, gc_options(s));
                }});
  cs.push_back({"regularizer_decoder", true, [](std::uint64_t s) {
                  auto cfg = gradcheck_model_config();
                  cfg.grl_lambda = -1.0;
                  JoociModel<double> m(cfg, s);
                  TD h = gc_randn({2, 8, 2}, s, 1);
                  auto in = gc_params(m, [](const auto& p) { return p.component == Component::regularizer; });
                  in.emplace_back("other_final", h);
                  return grad_check([&] { return gc_project(m.regularizer_forward(h, 17), s); }, in, gc_options(s));
                }});

  // Loss terms.
  cs.push_back({"mpl", true, [](std::uint64_t s) {
                  ParamRegistry<double> reg(derive_seed(s, Stream::gradcheck), true);
                  Linear<double> proj(reg, "p", Component::content_heads, 5, 3);
                  TD cw = gc_randn({4, 3}, s, 1), states = gc_randn({6, 5}, s, 2);
                  return grad_check([&] { return mpl(states, {0, 2, 3, 5}, gc_labels(4, 4, s), proj, cw, 0.1); },
                                    {{"states", states}, {"proj.w", proj.weight}, {"proj.b", proj.bias}, {"codewords", cw}},
                                    gc_options(s));
                }});
  cs.push_back({"other_loss", true, [](std::uint64_t s) {
                  TD a = gc_randn({3, 6}, s, 1), t = gc_randn({3, 6}, s, 2);
                  return grad_check([&] { return other_loss(a, t); }, {{"student", a}}, gc_options(s));
                }});
  cs.push_back({"regularizer_loss", true, [](std::uint64_t s) {
                  TD z = gc_randn({5, 6}, s, 1, 2.0);
                  auto l = gc_labels(5, 6, s);
                  l[1] = -1;
                  return grad_check([&] { return regularizer_loss(z, l); }, {{"logits", z}}, gc_options(s));
                }});
  // Whole-model terms, sampled. Batch norm over a handful of mostly inactive
  // ReLU outputs makes these sharply curved, so the numeric side uses the
  // five-point stencil.
  auto model_term = [](int which) {
    return [which](std::uint64_t s) {
      auto cfg = gradcheck_model_config();
      cfg.grl_lambda = -1.0;
      JoociModel<double> m(cfg, s);
      TD wave = gc_randn({2, 30 * m.min_samples()}, s, 1, 0.3);
      TD teacher = gc_randn({2, 6}, s, 2);
      std::vector<std::vector<int>> labels;
      for (std::size_t k = 0; k < m.label_sizes().size(); ++k)
        labels.push_back(gc_labels(60, m.label_sizes()[k], derive_seed(s, k)));
      auto term = [&] {
        ForwardOptions fo;
        fo.mask_seed = derive_seed(s, Stream::mask);
        auto f = m.forward(wave, fo);
        const auto& lg = f.reg_logits;
        auto cl = mmpl(f.content_layers, f.mask, m, labels);
        auto ol = other_loss(f.post->fc, teacher);
        auto rl = regularizer_loss(reshape(lg, Shape{lg.dim(0) * lg.dim(1), lg.dim(2)}), labels.back());
        if (which == 0) return cl;
        if (which == 1) return ol;
        if (which == 2) return rl;
        return total_loss(cl, ol, rl);
      };
      // Shared and Content parameters also reach OL and RL through the
      // stop-gradient tap, which finite differences would see; those terms are
      // therefore checked over the parameters downstream of the tap only.
      auto in = gc_params(m, [which](const auto& p) {
        const bool content_path = p.component == Component::shared || is_content_side(p.component);
        if (which == 0) return content_path;
        if (which == 1) return p.component == Component::other || is_post(p.component);
        if (which == 2) return p.component == Component::other || p.component == Component::regularizer;
        return !content_path || p.component == Component::content_heads;
      });
      auto o = gc_options(s, 4);
      o.fourth_order = true;
      return grad_check(term, in, o);
    };
  };
  cs.push_back({"mmpl_model", true, model_term(0)});
  cs.push_back({"other_loss_model", true, model_term(1)});
  cs.push_back({"regularizer_loss_model", true, model_term(2)});
  cs.push_back({"total_loss_model", true, model_term(3)});
  return cs;
}

}  // namespace jooci
