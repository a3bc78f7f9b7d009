#pragma once

// The dual-encoder model: a convolutional Shared encoder feeding a masked
// transformer Content encoder and a pooled Res2Net-style Other encoder, plus
// the post network (attentive statistics pooling, BN, FC) and the
// gradient-reversed regularizer decoder used only in pre-training.
//
// Layouts: waveforms [B, N]; Shared/Content states [B, T, content_dim];
// Other states [B, other_dim, S] with S = ceil(T / group_size).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "jooci/config.hpp"
#include "jooci/nn.hpp"
#include "jooci/ops.hpp"
#include "jooci/rng.hpp"

namespace jooci {

// Cluster counts of the label sets: a sqrt(2) ladder ending at vocab_size.
inline std::vector<int> label_set_sizes(int vocab_size, int num_sets) {
  if (num_sets < 1) throw std::invalid_argument("label_set_sizes: need at least one set");
  std::vector<int> sizes(num_sets);
  for (int i = 0; i < num_sets; ++i) {
    const double k = vocab_size / std::pow(2.0, (num_sets - 1 - i) / 2.0);
    sizes[i] = std::max(2, static_cast<int>(std::lround(k)));
  }
  return sizes;
}

// Content layers (1-based) supervised by each label set, at regular intervals
// from the anchor up to the last layer.
inline std::vector<int> dictionary_layers(int content_layers, int num_sets, int anchor = 0) {
  if (num_sets < 1) throw std::invalid_argument("dictionary_layers: need at least one set");
  if (content_layers < num_sets)
    throw std::invalid_argument("dictionary_layers: " + std::to_string(content_layers) +
                                " content layers cannot host " + std::to_string(num_sets) + " label sets");
  if (num_sets == 1) return {content_layers};
  const int L = content_layers;
  if (anchor <= 0) anchor = std::min((L + 1) / 2 + 1, L - num_sets + 1);
  if (anchor < 1 || anchor > L - num_sets + 1)
    throw std::invalid_argument("dictionary_layers: anchor " + std::to_string(anchor) +
                                " leaves no room for " + std::to_string(num_sets) + " distinct layers");
  std::vector<int> layers(num_sets);
  for (int i = 0; i < num_sets; ++i)
    layers[i] = anchor + static_cast<int>(std::lround(static_cast<double>(i) * (L - anchor) / (num_sets - 1)));
  return layers;
}

// Content layer tapped by Other block i (1-based): depth-matched pairing.
inline int tap_layer(int block, int content_layers, int other_blocks) {
  return (block * content_layers + other_blocks - 1) / other_blocks;
}

// Parameters of an Other encoder with `dim` channels, counted in closed form.
inline long long other_encoder_parameter_count(const ModelConfig& c, long long dim) {
  const long long D = c.content_dim, w = dim / c.res2net_scale, br = c.res2net_scale - 1;
  const long long res2net_k1 = br * (w * w * 1 + w + 2 * w);
  const long long res2net_k3 = br * (w * w * 3 + w + 2 * w);
  const long long tap = D * dim + dim;
  const long long depthwise = dim * c.sa_kernel + dim;
  const long long bn = 2 * dim;
  const long long input_proj = D * dim + dim;
  return input_proj + c.other_blocks * (res2net_k1 + tap + depthwise + res2net_k3 + bn);
}

// Channel count whose Other encoder size is closest to `target`, among
// multiples of the Res2Net scale (and of 2, for the pooling bottleneck).
inline int solve_other_dim(const ModelConfig& c, double target) {
  const int step = std::lcm(c.res2net_scale, 2);
  int best = step;
  double best_err = std::abs(static_cast<double>(other_encoder_parameter_count(c, step)) - target);
  for (int d = 2 * step; d <= 8192; d += step) {
    const double err = std::abs(static_cast<double>(other_encoder_parameter_count(c, d)) - target);
    if (err < best_err) best = d, best_err = err;
  }
  return best;
}

inline constexpr double kOtherParamTarget = 3.32e6;  // midpoint of the two published sizes

inline void validate(ModelConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (c.conv_kernels.size() != c.conv_strides.size() || c.conv_kernels.empty())
    fail("conv_kernels and conv_strides must be non-empty and equally long");
  if (c.sample_rate == 16000 && c.total_stride() != 320)
    fail("conv strides multiply to " + std::to_string(c.total_stride()) + ", expected 320 (20 ms frames)");
  if (c.pool_kernel != c.group_size) fail("pool_kernel must equal group_size");
  if (c.sa_kernel != c.group_size + 1) fail("sa_kernel must equal group_size + 1");
  if (c.content_dim % c.content_heads != 0) fail("content_dim not divisible by content_heads");
  if (c.content_dim % c.pos_conv_groups != 0) fail("content_dim not divisible by pos_conv_groups");
  if (c.reg_dim % c.reg_heads != 0) fail("reg_dim not divisible by reg_heads");
  if (c.other_dim == 0) c.other_dim = solve_other_dim(c, kOtherParamTarget);
  if (c.other_dim % c.res2net_scale != 0 || c.other_dim % 2 != 0)
    fail("other_dim must be a multiple of res2net_scale and of 2");
  if (c.mask_ratio < 0 || c.mask_ratio > 1) fail("mask_ratio outside [0, 1]");
  if (c.content_layers < 0 || c.other_blocks < 0) fail("negative layer count");
  if (c.num_label_sets > c.content_layers && c.content_layers > 0)
    fail("num_label_sets exceeds content_layers");
  if (c.tau <= 0) fail("tau must be positive");
}

// Per-item span masking. Span starts are drawn uniformly without replacement
// and each marks [s, s + span) truncated at T, until the masked fraction
// reaches `ratio`. Returns B*T flags.
inline std::vector<std::uint8_t> make_mask(std::size_t batch, std::size_t frames, double ratio,
                                           std::size_t span, std::uint64_t seed) {
  std::vector<std::uint8_t> mask(batch * frames, 0);
  if (ratio <= 0 || frames == 0) return mask;
  const auto target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(frames) - 1e-9));
  std::vector<std::size_t> starts(frames);
  for (std::size_t b = 0; b < batch; ++b) {
    Rng rng(derive_seed(seed, b));
    std::iota(starts.begin(), starts.end(), std::size_t{0});
    std::uint8_t* m = mask.data() + b * frames;
    std::size_t count = 0;
    // Partial Fisher-Yates: draw starts one at a time until the target is met.
    for (std::size_t i = 0; i < frames && count < target; ++i) {
      const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i),
                                                          static_cast<std::int64_t>(frames - 1)));
      std::swap(starts[i], starts[j]);
      const std::size_t s = starts[i];
      for (std::size_t t = s; t < std::min(frames, s + span); ++t)
        if (!m[t]) m[t] = 1, ++count;
    }
  }
  return mask;
}

template <class T>
struct PostOutput {
  Tensor<T> asp;  // [B, 2C]
  Tensor<T> bn;   // [B, 2C]
  Tensor<T> fc;   // [B, teacher_dim]
};

template <class T>
struct ForwardOutput {
  Tensor<T> shared_frames;                  // [B, T, D]
  std::vector<Tensor<T>> content_layers;    // L+1 x [B, T, D], from the masked pass when masking
  std::vector<Tensor<T>> tap_layers;        // L+1 x [B, T, D], what the Other encoder consumed
  std::vector<std::uint8_t> mask;           // B*T flags; empty when masking is off
  std::vector<Tensor<T>> other_layers;      // blocks+1 x [B, C, S]
  std::optional<PostOutput<T>> post;
  Tensor<T> reg_logits;                     // [B, T, vocab]
  std::size_t frames = 0;                   // T
  std::size_t segments = 0;                 // S
};

struct ForwardOptions {
  bool training = true;         // BN batch statistics and running-stat updates
  bool mask = true;             // apply span masking to the Content input
  std::uint64_t mask_seed = 0;
  bool content_grad = true;     // record the masked Content pass on the tape
  bool post = true;
  bool regularizer = true;
};

template <class T>
class JoociModel {
 public:
  struct ContentLayer {
    MultiHeadAttention<T> attn;
    LayerNorm<T> ln1;
    Linear<T> ffn1, ffn2;
    LayerNorm<T> ln2;
  };
  struct Res2Net {
    std::vector<Conv1d<T>> convs;
    std::vector<BatchNorm<T>> bns;
  };
  struct OtherBlock {
    Res2Net pre;
    Conv1d<T> tap_proj;
    Conv1d<T> depthwise;
    Res2Net post;
    BatchNorm<T> bn;
  };
  struct LabelHead {
    Linear<T> proj;
    Tensor<T> codewords;  // [k, code_dim]
  };

  JoociModel(ModelConfig cfg, std::uint64_t seed, bool random_init = true)
      : cfg_((validate(cfg), cfg)), reg_(derive_seed(seed, Stream::init), random_init) {
    build();
  }
  JoociModel(const JoociModel&) = delete;
  JoociModel& operator=(const JoociModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  const std::vector<int>& label_layers() const { return label_layers_; }
  const std::vector<int>& label_sizes() const { return label_sizes_; }
  const std::vector<LabelHead>& heads() const { return heads_; }
  const Tensor<T>& mask_embedding() const { return mask_emb_; }

  std::size_t frames_for(std::size_t samples) const {
    return samples / static_cast<std::size_t>(cfg_.total_stride());
  }
  std::size_t min_samples() const { return static_cast<std::size_t>(cfg_.total_stride()); }

  // [B, N] -> [B, T, content_dim] with T = floor(N / 320).
  Tensor<T> shared_encode(const Tensor<T>& wave) const {
    if (wave.rank() != 2) throw std::invalid_argument("shared_encode: expected [B, N] waveform");
    if (wave.dim(1) < min_samples())
      throw std::invalid_argument("shared_encode: waveform of " + std::to_string(wave.dim(1)) +
                                  " samples is shorter than the minimum of " + std::to_string(min_samples()));
    Tensor<T> x = reshape(wave, {wave.dim(0), 1, wave.dim(1)});
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      x = convs_[i](x);
      if (i == 0) x = conv0_norm_(x);
      x = gelu(x);
    }
    x = transpose(x);
    return feature_proj_(feature_ln_(x));
  }

  // Replaces masked frames with the learned mask embedding.
  std::pair<Tensor<T>, std::vector<std::uint8_t>> apply_mask(const Tensor<T>& frames, std::uint64_t seed,
                                                              std::optional<double> ratio = {}) const {
    const std::size_t B = frames.dim(0), Tn = frames.dim(1);
    auto mask = make_mask(B, Tn, ratio.value_or(cfg_.mask_ratio), cfg_.mask_span, seed);
    return {masked_replace(frames, mask, mask_emb_), std::move(mask)};
  }

  // Layer 0 (post positional conv + LN) followed by every transformer layer.
  std::vector<Tensor<T>> content_encode(const Tensor<T>& frames) const {
    const std::size_t K = static_cast<std::size_t>(cfg_.pos_conv_kernel);
    auto xt = transpose(frames);  // [B, D, T]
    auto pos = pos_conv_(xt);
    if (K % 2 == 0) pos = slice(pos, 2, 0, pos.dim(2) - 1);
    auto x = content_ln_(add(frames, transpose(gelu(pos))));
    std::vector<Tensor<T>> layers{x};
    for (const auto& l : content_layers_) {
      x = l.ln1(add(x, l.attn(x, x)));
      x = l.ln2(add(x, l.ffn2(gelu(l.ffn1(x)))));
      layers.push_back(x);
    }
    return layers;
  }

  // Other block i (1-based). x [B,C,S], tap [B,T,D] with T <= group*S.
  Tensor<T> other_block(std::size_t i, const Tensor<T>& x, const Tensor<T>& tap, bool training) const {
    const auto& blk = other_blocks_.at(i - 1);
    const std::size_t S = x.dim(2);
    auto h = res2net(blk.pre, x, training);
    auto t = transpose(stop_gradient(tap));
    const std::size_t tpad = S * static_cast<std::size_t>(cfg_.group_size);
    if (t.dim(2) > tpad) throw std::invalid_argument("other_block: tap longer than group_size x S");
    t = blk.tap_proj(pad_time(t, tpad - t.dim(2)));
    auto merged = split_and_append(t, h, static_cast<std::size_t>(cfg_.group_size));
    auto d = blk.depthwise(merged);
    auto r = res2net(blk.post, d, training);
    return blk.bn(add(r, x), training);
  }

  // frames [B,T,D], taps L+1 x [B,T,D] -> blocks+1 x [B,C,S].
  std::vector<Tensor<T>> other_encode(const Tensor<T>& frames, const std::vector<Tensor<T>>& taps,
                                      bool training) const {
    const std::size_t Tn = frames.dim(1);
    const std::size_t g = static_cast<std::size_t>(cfg_.group_size);
    const std::size_t S = (Tn + g - 1) / g;
    auto x = pad_time(transpose(frames), S * g - Tn);
    x = other_in_(avg_pool1d(x, static_cast<std::size_t>(cfg_.pool_kernel), static_cast<std::size_t>(cfg_.pool_kernel)));
    std::vector<Tensor<T>> out{x};
    for (int i = 1; i <= cfg_.other_blocks; ++i) {
      const int layer = tap_layer(i, cfg_.content_layers, cfg_.other_blocks);
      x = other_block(static_cast<std::size_t>(i), x, taps.at(static_cast<std::size_t>(layer)), training);
      out.push_back(x);
    }
    return out;
  }

  PostOutput<T> post_network(const Tensor<T>& h, bool training) const {
    if (h.rank() != 3 || h.dim(2) == 0) throw std::invalid_argument("post_network: expected [B, C, S>=1]");
    auto score = asp_score_(tanh(asp_hidden_(h)));  // [B,1,S]
    auto stats = weighted_stats(h, softmax(score));
    auto bn = post_bn_(stats, training);
    return {stats, bn, post_fc_(bn)};
  }

  // other_final [B,C,S] -> logits [B, frames, vocab].
  Tensor<T> regularizer_forward(const Tensor<T>& other_final, std::size_t frames) const {
    auto g = grad_reverse(other_final, static_cast<T>(cfg_.grl_lambda));
    auto memory = transpose(g);                                                        // [B,S,C]
    auto x = reg_in_(transpose(repeat_time(g, static_cast<std::size_t>(cfg_.group_size), frames)));  // [B,T,R]
    x = reg_ln1_(add(x, reg_self_(x, x)));
    x = reg_ln2_(add(x, reg_cross_(x, memory)));
    x = reg_ln3_(add(x, reg_ffn2_(gelu(reg_ffn1_(x)))));
    return reg_cls_(x);
  }

  ForwardOutput<T> forward(const Tensor<T>& wave, const ForwardOptions& opt) const {
    ForwardOutput<T> out;
    out.shared_frames = shared_encode(wave);
    out.frames = out.shared_frames.dim(1);
    Tensor<T> other_input = out.shared_frames;
    if (opt.mask) {
      auto [masked, mask] = apply_mask(out.shared_frames, opt.mask_seed);
      out.mask = std::move(mask);
      if (opt.content_grad) {
        out.content_layers = content_encode(masked);
      } else {
        NoGrad<T> guard;
        out.content_layers = content_encode(masked);
      }
      if (cfg_.other_uses_masked) {
        other_input = masked;
        out.tap_layers = out.content_layers;
      } else {
        NoGrad<T> guard;
        out.tap_layers = content_encode(out.shared_frames);
      }
    } else {
      if (opt.content_grad) {
        out.content_layers = content_encode(out.shared_frames);
      } else {
        NoGrad<T> guard;
        out.content_layers = content_encode(out.shared_frames);
      }
      out.tap_layers = out.content_layers;
    }
    out.other_layers = other_encode(other_input, out.tap_layers, opt.training);
    out.segments = out.other_layers.back().dim(2);
    if (opt.post) out.post = post_network(out.other_layers.back(), opt.training);
    if (opt.regularizer) out.reg_logits = regularizer_forward(out.other_layers.back(), out.frames);
    return out;
  }

 private:
  Tensor<T> res2net(const Res2Net& r, const Tensor<T>& x, bool training) const {
    const std::size_t scale = static_cast<std::size_t>(cfg_.res2net_scale);
    const std::size_t w = x.dim(1) / scale;
    std::vector<Tensor<T>> ys{slice(x, 1, 0, w)};
    Tensor<T> prev;
    for (std::size_t i = 1; i < scale; ++i) {
      auto xi = slice(x, 1, i * w, w);
      if (i > 1) xi = add(xi, prev);
      prev = r.bns[i - 1](relu(r.convs[i - 1](xi)), training);
      ys.push_back(prev);
    }
    return concat(ys, 1);
  }

  Res2Net make_res2net(const std::string& name, std::size_t dim, std::size_t kernel, std::size_t dilation) {
    Res2Net r;
    const std::size_t scale = static_cast<std::size_t>(cfg_.res2net_scale);
    const std::size_t w = dim / scale;
    const std::size_t pad = dilation * (kernel - 1) / 2;
    for (std::size_t i = 1; i < scale; ++i) {
      const std::string n = name + ".branch" + std::to_string(i);
      r.convs.emplace_back(reg_, n + ".conv", Component::other, w, w, kernel, Conv1dOptions{1, dilation, pad, pad, 1});
      r.bns.emplace_back(reg_, n + ".bn", Component::other, w);
    }
    return r;
  }

  void build() {
    const auto& c = cfg_;
    const std::size_t C0 = static_cast<std::size_t>(c.conv_channels);
    const std::size_t D = static_cast<std::size_t>(c.content_dim);
    const std::size_t Co = static_cast<std::size_t>(c.other_dim);
    const std::size_t R = static_cast<std::size_t>(c.reg_dim);

    // Shared encoder. Symmetric input padding of (receptive field - stride)/2
    // makes the frame count exactly floor(N / total_stride).
    const std::size_t pad = static_cast<std::size_t>(c.receptive_field() - c.total_stride());
    for (std::size_t i = 0; i < c.conv_kernels.size(); ++i) {
      Conv1dOptions o{static_cast<std::size_t>(c.conv_strides[i]), 1, 0, 0, 1};
      if (i == 0) o.pad_left = pad / 2, o.pad_right = pad - pad / 2;
      convs_.emplace_back(reg_, "shared.conv" + std::to_string(i), Component::shared, i == 0 ? 1 : C0, C0,
                          static_cast<std::size_t>(c.conv_kernels[i]), o, false);
    }
    conv0_norm_ = InstanceNorm<T>(reg_, "shared.conv0.norm", Component::shared, C0);
    feature_ln_ = LayerNorm<T>(reg_, "shared.feature_ln", Component::shared, C0);
    feature_proj_ = Linear<T>(reg_, "shared.feature_proj", Component::shared, C0, D);

    // Content encoder.
    mask_emb_ = reg_.make("content.mask_embedding", Component::content, {D}, Init::normal);
    const std::size_t K = static_cast<std::size_t>(c.pos_conv_kernel);
    pos_conv_ = Conv1d<T>(reg_, "content.pos_conv", Component::content, D, D, K,
                          Conv1dOptions{1, 1, K / 2, K / 2, static_cast<std::size_t>(c.pos_conv_groups)});
    content_ln_ = LayerNorm<T>(reg_, "content.ln", Component::content, D);
    for (int i = 1; i <= c.content_layers; ++i) {
      const std::string n = "content.layer" + std::to_string(i);
      ContentLayer l;
      l.attn = MultiHeadAttention<T>(reg_, n + ".attn", Component::content, D, D, static_cast<std::size_t>(c.content_heads));
      l.ln1 = LayerNorm<T>(reg_, n + ".ln1", Component::content, D);
      l.ffn1 = Linear<T>(reg_, n + ".ffn1", Component::content, D, static_cast<std::size_t>(c.content_ffn));
      l.ffn2 = Linear<T>(reg_, n + ".ffn2", Component::content, static_cast<std::size_t>(c.content_ffn), D);
      l.ln2 = LayerNorm<T>(reg_, n + ".ln2", Component::content, D);
      content_layers_.push_back(std::move(l));
    }
    if (c.content_layers > 0) {
      label_layers_ = dictionary_layers(c.content_layers, c.num_label_sets, c.label_anchor);
      label_sizes_ = label_set_sizes(c.vocab_size, c.num_label_sets);
      for (std::size_t s = 0; s < label_layers_.size(); ++s) {
        const std::string n = "content.head" + std::to_string(s);
        LabelHead h;
        h.proj = Linear<T>(reg_, n + ".proj", Component::content_heads, D, static_cast<std::size_t>(c.code_dim));
        h.codewords = reg_.make(n + ".codewords", Component::content_heads,
                                {static_cast<std::size_t>(label_sizes_[s]), static_cast<std::size_t>(c.code_dim)},
                                Init::normal);
        heads_.push_back(std::move(h));
      }
    }

    // Other encoder.
    other_in_ = Conv1d<T>(reg_, "other.input_proj", Component::other, D, Co, 1);
    const std::size_t sa = static_cast<std::size_t>(c.sa_kernel);
    for (int i = 1; i <= c.other_blocks; ++i) {
      const std::string n = "other.block" + std::to_string(i);
      OtherBlock b;
      b.pre = make_res2net(n + ".res2net_pre", Co, 1, 1);
      b.tap_proj = Conv1d<T>(reg_, n + ".tap_proj", Component::other, D, Co, 1);
      b.depthwise = Conv1d<T>(reg_, n + ".depthwise", Component::other, Co, Co, sa, Conv1dOptions{sa, 1, 0, 0, Co});
      b.post = make_res2net(n + ".res2net_post", Co, 3, 4);
      b.bn = BatchNorm<T>(reg_, n + ".bn", Component::other, Co);
      other_blocks_.push_back(std::move(b));
    }

    // Post network.
    asp_hidden_ = Conv1d<T>(reg_, "post.asp.hidden", Component::post_asp, Co, Co / 2, 1);
    asp_score_ = Conv1d<T>(reg_, "post.asp.score", Component::post_asp, Co / 2, 1, 1);
    post_bn_ = BatchNorm<T>(reg_, "post.bn", Component::post_bn, 2 * Co);
    post_fc_ = Linear<T>(reg_, "post.fc", Component::post_fc, 2 * Co, static_cast<std::size_t>(c.teacher_dim));

    // Regularizer.
    const std::size_t H = static_cast<std::size_t>(c.reg_heads);
    reg_in_ = Linear<T>(reg_, "reg.input_proj", Component::regularizer, Co, R);
    reg_self_ = MultiHeadAttention<T>(reg_, "reg.self_attn", Component::regularizer, R, R, H);
    reg_ln1_ = LayerNorm<T>(reg_, "reg.ln1", Component::regularizer, R);
    reg_cross_ = MultiHeadAttention<T>(reg_, "reg.cross_attn", Component::regularizer, R, Co, H);
    reg_ln2_ = LayerNorm<T>(reg_, "reg.ln2", Component::regularizer, R);
    reg_ffn1_ = Linear<T>(reg_, "reg.ffn1", Component::regularizer, R, static_cast<std::size_t>(c.reg_ffn));
    reg_ffn2_ = Linear<T>(reg_, "reg.ffn2", Component::regularizer, static_cast<std::size_t>(c.reg_ffn), R);
    reg_ln3_ = LayerNorm<T>(reg_, "reg.ln3", Component::regularizer, R);
    reg_cls_ = Linear<T>(reg_, "reg.classifier", Component::regularizer, R, static_cast<std::size_t>(c.vocab_size));
  }

  ModelConfig cfg_;
  ParamRegistry<T> reg_;
  std::vector<int> label_layers_, label_sizes_;

  std::vector<Conv1d<T>> convs_;
  InstanceNorm<T> conv0_norm_;
  LayerNorm<T> feature_ln_;
  Linear<T> feature_proj_;

  Tensor<T> mask_emb_;
  Conv1d<T> pos_conv_;
  LayerNorm<T> content_ln_;
  std::vector<ContentLayer> content_layers_;
  std::vector<LabelHead> heads_;

  Conv1d<T> other_in_;
  std::vector<OtherBlock> other_blocks_;

  Conv1d<T> asp_hidden_, asp_score_;
  BatchNorm<T> post_bn_;
  Linear<T> post_fc_;

  Linear<T> reg_in_;
  MultiHeadAttention<T> reg_self_, reg_cross_;
  LayerNorm<T> reg_ln1_, reg_ln2_, reg_ln3_;
  Linear<T> reg_ffn1_, reg_ffn2_;
  Linear<T> reg_cls_;
};

enum class CountMode { training, inference };

// Parameter totals per component. Inference keeps only what a downstream user
// runs: the Shared, Content and Other encoders.
template <class T>
std::map<Component, long long> count_parameters(const JoociModel<T>& model, CountMode mode) {
  std::map<Component, long long> counts;
  for (const auto& p : model.registry().params()) {
    if (mode == CountMode::inference &&
        (p.component == Component::content_heads || p.component == Component::regularizer ||
         p.component == Component::post_asp || p.component == Component::post_bn ||
         p.component == Component::post_fc))
      continue;
    counts[p.component] += static_cast<long long>(p.tensor.numel());
  }
  return counts;
}

}  // namespace jooci
