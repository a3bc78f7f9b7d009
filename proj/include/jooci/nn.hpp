#pragma once

// Parameter registry and the small layer types the model is assembled from.
// Every trainable tensor is registered once under a stable dotted name and a
// component tag; parameter accounting, freezing, optimisation and
// checkpointing all walk this registry.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "jooci/ops.hpp"
#include "jooci/rng.hpp"

namespace jooci {

enum class Component {
  shared,         // convolutional feature encoder
  content,        // transformer stack, positional conv, mask embedding
  content_heads,  // per-label-set projections and codewords (pre-training only)
  other,          // Other encoder blocks
  post_asp,       // attentive statistics pooling
  post_bn,        // batch norm after pooling
  post_fc,        // final projection to the teacher dimension
  regularizer,    // decoder + classifier (pre-training only)
};

inline const char* component_name(Component c) {
  switch (c) {
    case Component::shared: return "shared";
    case Component::content: return "content";
    case Component::content_heads: return "content_heads";
    case Component::other: return "other";
    case Component::post_asp: return "post_asp";
    case Component::post_bn: return "post_bn";
    case Component::post_fc: return "post_fc";
    case Component::regularizer: return "regularizer";
  }
  return "?";
}

inline bool is_content_side(Component c) {
  return c == Component::content || c == Component::content_heads;
}

inline bool is_post(Component c) {
  return c == Component::post_asp || c == Component::post_bn || c == Component::post_fc;
}

inline bool is_other_side(Component c) {
  return c == Component::other || c == Component::post_asp || c == Component::post_bn ||
         c == Component::post_fc || c == Component::regularizer;
}

enum class Init { uniform_fan_in, normal, ones, zeros };

template <class T>
struct NamedParam {
  std::string name;
  Component component;
  Tensor<T> tensor;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Component component;
  BatchNormState<T>* state;
};

// Owns nothing: tensors are shared handles, BN states live in the layers,
// which must outlive the registry (the model is non-movable for this reason).
template <class T>
class ParamRegistry {
 public:
  ParamRegistry(std::uint64_t seed, bool random_init) : rng_(seed), random_(random_init) {}

  Tensor<T> make(const std::string& name, Component comp, Shape shape, Init init,
                 std::size_t fan_in = 1) {
    Tensor<T> t(shape);
    if (random_) {
      auto d = t.data();
      switch (init) {
        case Init::uniform_fan_in: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
          for (auto& v : d) v = static_cast<T>(rng_.uniform(-bound, bound));
          break;
        }
        case Init::normal:
          for (auto& v : d) v = static_cast<T>(rng_.normal());
          break;
        case Init::ones:
          std::fill(d.begin(), d.end(), T(1));
          break;
        case Init::zeros:
          break;
      }
    } else if (init == Init::ones) {
      std::fill(t.data().begin(), t.data().end(), T(1));
    }
    t.set_requires_grad(true);
    for (const auto& p : params_)
      if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
    params_.push_back({name, comp, t});
    return t;
  }

  void add_buffer(const std::string& name, Component comp, BatchNormState<T>* state) {
    buffers_.push_back({name, comp, state});
  }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<NamedBuffer<T>>& buffers() { return buffers_; }
  const std::vector<NamedBuffer<T>>& buffers() const { return buffers_; }

 private:
  Rng rng_;
  bool random_;
  std::vector<NamedParam<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
};

template <class T>
struct Linear {
  Tensor<T> weight, bias;

  Linear() = default;
  Linear(ParamRegistry<T>& reg, const std::string& name, Component comp, std::size_t in, std::size_t out,
         bool with_bias = true) {
    weight = reg.make(name + ".weight", comp, {out, in}, Init::uniform_fan_in, in);
    if (with_bias) bias = reg.make(name + ".bias", comp, {out}, Init::uniform_fan_in, in);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
struct Conv1d {
  Tensor<T> weight, bias;
  Conv1dOptions opt;

  Conv1d() = default;
  Conv1d(ParamRegistry<T>& reg, const std::string& name, Component comp, std::size_t in, std::size_t out,
         std::size_t kernel, Conv1dOptions options = {}, bool with_bias = true)
      : opt(options) {
    const std::size_t fan_in = in / opt.groups * kernel;
    weight = reg.make(name + ".weight", comp, {out, in / opt.groups, kernel}, Init::uniform_fan_in, fan_in);
    if (with_bias) bias = reg.make(name + ".bias", comp, {out}, Init::uniform_fan_in, fan_in);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv1d(x, weight, bias, opt); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamRegistry<T>& reg, const std::string& name, Component comp, std::size_t dim) {
    gamma = reg.make(name + ".gamma", comp, {dim}, Init::ones);
    beta = reg.make(name + ".beta", comp, {dim}, Init::zeros);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <class T>
struct InstanceNorm {
  Tensor<T> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(ParamRegistry<T>& reg, const std::string& name, Component comp, std::size_t ch) {
    gamma = reg.make(name + ".gamma", comp, {ch}, Init::ones);
    beta = reg.make(name + ".beta", comp, {ch}, Init::zeros);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, gamma, beta); }
};

// Holds its running statistics behind a unique_ptr so the registry's pointer
// stays valid when the layer object is moved into a container.
template <class T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  std::unique_ptr<BatchNormState<T>> state;

  BatchNorm() = default;
  BatchNorm(ParamRegistry<T>& reg, const std::string& name, Component comp, std::size_t ch)
      : state(std::make_unique<BatchNormState<T>>(ch)) {
    gamma = reg.make(name + ".gamma", comp, {ch}, Init::ones);
    beta = reg.make(name + ".beta", comp, {ch}, Init::zeros);
    reg.add_buffer(name, comp, state.get());
  }
  Tensor<T> operator()(const Tensor<T>& x, bool training) const {
    return batch_norm(x, gamma, beta, *state, training);
  }
};

// Multi-head attention with separate key/value input width (kdim = vdim).
template <class T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry<T>& reg, const std::string& name, Component comp, std::size_t dim,
                     std::size_t kv_dim, std::size_t n_heads)
      : wq(reg, name + ".wq", comp, dim, dim),
        wk(reg, name + ".wk", comp, kv_dim, dim),
        wv(reg, name + ".wv", comp, kv_dim, dim),
        wo(reg, name + ".wo", comp, dim, dim),
        heads(n_heads) {}

  // query [B,Tq,dim], memory [B,Tk,kv_dim] -> [B,Tq,dim]
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& memory) const {
    return wo(attention(wq(query), wk(memory), wv(memory), heads));
  }
};

}  // namespace jooci
