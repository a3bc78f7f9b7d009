#pragma once

// Synthetic speech-like corpus, augmentation and batching.
//
// A speaker is a fixed voice: fundamental frequency, vocal-tract scale
// (formant multiplier), source spectral tilt and formant bandwidth. A phone
// is a formant pattern with one dominant resonance. Utterances are random
// sequences of words from a small seeded lexicon (so a phone is predictable
// from its neighbours), 3-8 frames per phone, rendered by additive harmonic
// synthesis with 10 ms envelope crossfades at phone boundaries.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jooci/config.hpp"
#include "jooci/rng.hpp"
#include "jooci/signal.hpp"
#include "jooci/tensor.hpp"

namespace jooci {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kFrameSamples = 320;

struct Utterance {
  std::string id;
  int speaker = 0;
  std::vector<float> wave;
  std::vector<int> phones;  // one per 20 ms frame; size == wave.size() / 320
};

struct Voice {
  double f0 = 120;     // Hz
  double alpha = 1;    // formant scale
  double tilt = 0.2;   // source amplitude ~ k^-tilt
  double bw = 1;       // bandwidth scale
};

struct Formant {
  double freq, gain, bandwidth;
};

// Dominant resonances sit on a ladder with ratio > 1.15/0.85, so no vocal
// tract scaling can move one phone's peak onto another's.
inline const std::vector<std::array<Formant, 2>>& phone_table() {
  static const std::vector<std::array<Formant, 2>> table{
      {{{300, 1.0, 60}, {2200, 0.3, 120}}},
      {{{500, 1.0, 70}, {1500, 0.3, 110}}},
      {{{850, 1.0, 80}, {2400, 0.3, 130}}},
      {{{1450, 1.0, 100}, {400, 0.3, 70}}},
      {{{2500, 1.0, 130}, {650, 0.3, 80}}},
      {{{1100, 1.0, 90}, {3200, 0.3, 150}}},
      {{{650, 1.0, 75}, {1900, 0.3, 110}}},
      {{{1900, 1.0, 110}, {320, 0.3, 60}}},
  };
  return table;
}

inline Voice speaker_voice(std::uint64_t seed, int speaker, int num_speakers) {
  // F0 is stratified over 90-250 Hz so that speakers never collide; strata
  // are assigned in a seeded random order.
  Rng order(derive_seed(seed, Stream::data, 0xF0));
  std::vector<int> strata(static_cast<std::size_t>(num_speakers));
  for (int i = 0; i < num_speakers; ++i) strata[static_cast<std::size_t>(i)] = i;
  std::shuffle(strata.begin(), strata.end(), order.engine());
  Rng rng(derive_seed(seed, Stream::data, 1, speaker));
  Voice v;
  const double width = 160.0 / num_speakers;
  v.f0 = 90 + width * (strata[static_cast<std::size_t>(speaker)] + rng.uniform(0.2, 0.8));
  v.alpha = rng.uniform(0.85, 1.15);
  v.tilt = rng.uniform(0.0, 0.4);
  v.bw = rng.uniform(0.8, 1.25);
  return v;
}

// Harmonic amplitude of `freq` under a phone envelope scaled by the voice.
inline double envelope(const Voice& v, int phone, double freq) {
  double a = 0;
  for (const auto& f : phone_table().at(static_cast<std::size_t>(phone))) {
    const double d = (freq - f.freq * v.alpha) / (f.bandwidth * v.bw * v.alpha);
    a += f.gain / (1 + d * d);
  }
  return a;
}

// Renders per-frame phones at 16 kHz. `f0_scale` perturbs the voice's F0 for
// this utterance.
inline std::vector<float> synthesize(const Voice& voice, const std::vector<int>& phones, std::size_t samples,
                                     double f0_scale, Rng& rng) {
  constexpr std::size_t block = 80;
  constexpr double max_freq = 4500;
  constexpr std::size_t fade = 160;  // 10 ms
  std::vector<float> out(samples, 0.0f);
  const double f0_base = voice.f0 * f0_scale;
  const double vib_rate = rng.uniform(2.0, 5.0), vib_phase = rng.uniform(0, 2 * std::numbers::pi);
  const std::size_t max_h = static_cast<std::size_t>(max_freq / (f0_base * 0.9));
  std::vector<std::complex<double>> phasor(max_h + 1, {1.0, 0.0});
  for (std::size_t k = 1; k <= max_h; ++k) phasor[k] = std::polar(1.0, rng.uniform(0, 2 * std::numbers::pi));
  std::vector<double> amp(max_h + 1);
  auto phone_at = [&](std::size_t sample) {
    const std::size_t f = std::min(sample / kFrameSamples, phones.size() - 1);
    return phones[f];
  };
  for (std::size_t b0 = 0; b0 < samples; b0 += block) {
    const std::size_t mid = b0 + block / 2;
    const double t = static_cast<double>(mid) / kSampleRate;
    const double f0 = f0_base * (1 + 0.02 * std::sin(2 * std::numbers::pi * vib_rate * t + vib_phase));
    // Linear crossfade of envelopes within fade/2 of a phone boundary.
    const int cur = phone_at(mid);
    int other = cur;
    double lambda = 0;
    const std::size_t frame = mid / kFrameSamples;
    const std::size_t into = mid % kFrameSamples;
    if (into < fade / 2 && frame > 0 && phone_at(mid - into - 1) != cur) {
      other = phone_at(mid - into - 1);
      lambda = 0.5 - static_cast<double>(into) / fade;
    } else if (kFrameSamples - into <= fade / 2 && phone_at(mid + (kFrameSamples - into)) != cur &&
               mid + (kFrameSamples - into) < samples) {
      other = phone_at(mid + (kFrameSamples - into));
      lambda = 0.5 - static_cast<double>(kFrameSamples - into) / fade;
    }
    for (std::size_t k = 1; k <= max_h; ++k) {
      const double f = f0 * static_cast<double>(k);
      if (f >= max_freq) {
        amp[k] = 0;
        continue;
      }
      const double e = (1 - lambda) * envelope(voice, cur, f) + lambda * envelope(voice, other, f);
      amp[k] = e * std::pow(static_cast<double>(k), -voice.tilt);
    }
    const std::size_t end = std::min(samples, b0 + block);
    for (std::size_t k = 1; k <= max_h; ++k) {
      if (amp[k] == 0) continue;
      const std::complex<double> rot = std::polar(1.0, 2 * std::numbers::pi * f0 * static_cast<double>(k) / kSampleRate);
      std::complex<double> p = phasor[k];
      const double a = amp[k];
      for (std::size_t s = b0; s < end; ++s) {
        out[s] += static_cast<float>(a * p.imag());
        p *= rot;
      }
      phasor[k] = p / std::abs(p);
    }
    for (std::size_t k = 1; k <= max_h; ++k)
      if (amp[k] == 0) {
        const std::complex<double> rot =
            std::polar(1.0, 2 * std::numbers::pi * f0 * static_cast<double>(k) * static_cast<double>(end - b0) / kSampleRate);
        phasor[k] *= rot;
      }
  }
  // Breath noise 35 dB below the voiced signal.
  const double p = mean_power(out);
  const double sd = std::sqrt(p * std::pow(10.0, -3.5));
  for (auto& v : out) v += static_cast<float>(rng.normal(0, sd));
  return out;
}

// Random phone sequence covering `frames` frames, 3-8 frames per phone,
// never repeating a phone back to back.
inline std::vector<int> random_phones(std::size_t frames, int inventory, Rng& rng) {
  std::vector<int> phones;
  int prev = -1;
  while (phones.size() < frames) {
    int p = static_cast<int>(rng.integer(0, inventory - 1));
    if (inventory > 1)
      while (p == prev) p = static_cast<int>(rng.integer(0, inventory - 1));
    const auto len = static_cast<std::size_t>(rng.integer(3, 8));
    for (std::size_t i = 0; i < len && phones.size() < frames; ++i) phones.push_back(p);
    prev = p;
  }
  return phones;
}

using Lexicon = std::vector<std::vector<int>>;

// 2 * inventory words of 2-4 phones, no phone repeated back to back.
inline Lexicon make_lexicon(int inventory, std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::data, 3));
  Lexicon lex(static_cast<std::size_t>(2 * inventory));
  for (auto& w : lex) {
    const auto len = rng.integer(2, 4);
    int prev = -1;
    for (std::int64_t i = 0; i < len; ++i) {
      int p = static_cast<int>(rng.integer(0, inventory - 1));
      if (inventory > 1)
        while (p == prev) p = static_cast<int>(rng.integer(0, inventory - 1));
      w.push_back(p);
      prev = p;
    }
  }
  return lex;
}

// Per-frame phones of random words covering `frames` frames.
inline std::vector<int> lexicon_phones(std::size_t frames, const Lexicon& lex, Rng& rng) {
  std::vector<int> phones;
  while (phones.size() < frames) {
    const auto& w = lex[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(lex.size()) - 1))];
    for (int p : w) {
      const auto len = static_cast<std::size_t>(rng.integer(3, 8));
      for (std::size_t i = 0; i < len && phones.size() < frames; ++i) phones.push_back(p);
    }
  }
  return phones;
}

inline void scale_to_peak(std::vector<float>& x, double peak) {
  float m = 0;
  for (float v : x) m = std::max(m, std::abs(v));
  if (m == 0) return;
  const float g = static_cast<float>(peak / m);
  for (auto& v : x) v *= g;
}

inline std::vector<Utterance> generate_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  if (cfg.num_speakers < 1 || cfg.utts_per_speaker < 1 || cfg.phone_inventory < 1)
    throw std::invalid_argument("generate_corpus: counts must be >= 1");
  if (cfg.phone_inventory > static_cast<int>(phone_table().size()))
    throw std::invalid_argument("generate_corpus: at most " + std::to_string(phone_table().size()) + " phones");
  if (cfg.min_seconds <= 0 || cfg.max_seconds < cfg.min_seconds)
    throw std::invalid_argument("generate_corpus: bad duration range");
  const auto lexicon = make_lexicon(cfg.phone_inventory, seed);
  std::vector<Utterance> corpus;
  for (int s = 0; s < cfg.num_speakers; ++s) {
    const Voice voice = speaker_voice(seed, s, cfg.num_speakers);
    for (int u = 0; u < cfg.utts_per_speaker; ++u) {
      Rng rng(derive_seed(seed, Stream::data, 2, s, u));
      Utterance utt;
      utt.speaker = s;
      char id[32];
      std::snprintf(id, sizeof id, "spk%02d_utt%03d", s, u);
      utt.id = id;
      const double seconds = rng.uniform(cfg.min_seconds, cfg.max_seconds);
      const std::size_t frames = std::max<std::size_t>(1, static_cast<std::size_t>(seconds * kSampleRate) / kFrameSamples);
      const std::size_t samples = frames * kFrameSamples;
      utt.phones = lexicon_phones(frames, lexicon, rng);
      utt.wave = synthesize(voice, utt.phones, samples, rng.uniform(0.97, 1.03), rng);
      scale_to_peak(utt.wave, rng.uniform(0.5, 0.9));
      corpus.push_back(std::move(utt));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// WAV (32-bit float, mono) and manifest I/O

inline void write_wav(const std::filesystem::path& path, const std::vector<float>& x, int sample_rate = kSampleRate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(x.size() * 4);
  out.write("RIFF", 4);
  u32(36 + data_bytes);
  out.write("WAVEfmt ", 8);
  u32(16);
  u16(3);  // IEEE float
  u16(1);
  u32(static_cast<std::uint32_t>(sample_rate));
  u32(static_cast<std::uint32_t>(sample_rate) * 4);
  u16(4);
  u16(32);
  out.write("data", 4);
  u32(data_bytes);
  out.write(reinterpret_cast<const char*>(x.data()), static_cast<std::streamsize>(data_bytes));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline std::vector<float> read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char tag[4];
  std::uint32_t size = 0;
  in.read(tag, 4);
  in.read(reinterpret_cast<char*>(&size), 4);
  char wave[4];
  in.read(wave, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
    throw std::runtime_error(path.string() + ": not a RIFF/WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  while (in.read(tag, 4)) {
    in.read(reinterpret_cast<char*>(&size), 4);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      std::vector<char> buf(size);
      in.read(buf.data(), size);
      std::memcpy(&format, buf.data(), 2);
      std::memcpy(&channels, buf.data() + 2, 2);
      std::memcpy(&bits, buf.data() + 14, 2);
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (format != 3 || channels != 1 || bits != 32)
        throw std::runtime_error(path.string() + ": expected mono 32-bit float samples");
      std::vector<float> x(size / 4);
      in.read(reinterpret_cast<char*>(x.data()), static_cast<std::streamsize>(x.size() * 4));
      if (!in) throw std::runtime_error(path.string() + ": truncated data chunk");
      return x;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error(path.string() + ": no data chunk");
}

// Writes <dir>/<utt_id>.wav per utterance and <dir>/manifest.jsonl with one
// object per line: utt_id, speaker_id, duration, num_samples, phones, wav.
inline void save_corpus(const std::vector<Utterance>& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& u : corpus) {
    const std::string wav = u.id + ".wav";
    write_wav(dir / wav, u.wave);
    nlohmann::json j{{"utt_id", u.id},
                     {"speaker_id", u.speaker},
                     {"duration", static_cast<double>(u.wave.size()) / kSampleRate},
                     {"num_samples", u.wave.size()},
                     {"phones", u.phones},
                     {"wav", wav}};
    manifest << j.dump() << "\n";
  }
}

inline std::vector<Utterance> load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("no manifest.jsonl in " + dir.string());
  std::vector<Utterance> corpus;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Utterance u;
    u.id = j.at("utt_id").get<std::string>();
    u.speaker = j.at("speaker_id").get<int>();
    u.phones = j.at("phones").get<std::vector<int>>();
    u.wave = read_wav(dir / j.at("wav").get<std::string>());
    if (u.wave.size() != j.at("num_samples").get<std::size_t>())
      throw std::runtime_error(u.id + ": sample count disagrees with manifest");
    corpus.push_back(std::move(u));
  }
  if (corpus.empty()) throw std::runtime_error("empty corpus in " + dir.string());
  return corpus;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class NoiseKind { none, noise, speech, music };

inline const char* noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::noise: return "noise";
    case NoiseKind::speech: return "speech";
    case NoiseKind::music: return "music";
  }
  return "?";
}

struct AugmentResult {
  std::vector<float> wave;
  bool applied = false;
  bool silent = false;  // augmentation drawn but skipped: zero-power input
  NoiseKind kind = NoiseKind::none;
  double snr_drawn = 0;
  double snr_measured = 0;  // of the components actually summed
};

// Coloured broadband noise (one-pole low-pass of white noise).
inline std::vector<float> make_noise(std::size_t n, Rng& rng) {
  const double a = rng.uniform(0.0, 0.9);
  std::vector<float> x(n);
  double y = 0;
  for (auto& v : x) {
    y = a * y + (1 - a) * rng.normal();
    v = static_cast<float>(y);
  }
  return x;
}

// A talker outside the corpus.
inline std::vector<float> make_babble(std::size_t n, Rng& rng) {
  Voice v{rng.uniform(90, 250), rng.uniform(0.85, 1.15), rng.uniform(0, 0.4), rng.uniform(0.8, 1.25)};
  const std::size_t frames = n / kFrameSamples + 1;
  auto phones = random_phones(frames, static_cast<int>(phone_table().size()), rng);
  return synthesize(v, phones, n, 1.0, rng);
}

// Tonal note sequence, 200-500 ms per note, a few harmonics each.
inline std::vector<float> make_music(std::size_t n, Rng& rng) {
  std::vector<float> x(n, 0.0f);
  std::size_t pos = 0;
  while (pos < n) {
    const std::size_t len = static_cast<std::size_t>(rng.uniform(0.2, 0.5) * kSampleRate);
    const double f = 440.0 * std::pow(2.0, (rng.integer(48, 84) - 69) / 12.0);
    const int harmonics = static_cast<int>(rng.integer(1, 4));
    for (std::size_t i = 0; i < len && pos + i < n; ++i) {
      const double t = static_cast<double>(i) / kSampleRate;
      const double env = std::exp(-3.0 * t);
      double s = 0;
      for (int h = 1; h <= harmonics; ++h) s += std::sin(2 * std::numbers::pi * f * h * t) / h;
      x[pos + i] = static_cast<float>(env * s);
    }
    pos += len;
  }
  return x;
}

// Exponentially decaying room response with a unit direct path; T60 in
// 50-150 ms.
inline std::vector<float> make_rir(Rng& rng) {
  const double t60 = rng.uniform(0.05, 0.15);
  const std::size_t len = static_cast<std::size_t>(t60 * kSampleRate);
  std::vector<float> h(len, 0.0f);
  h[0] = 1.0f;
  const double decay = std::log(1000.0) / (t60 * kSampleRate);  // 60 dB over T60
  for (std::size_t i = 1; i < len; ++i) h[i] = static_cast<float>(0.2 * rng.normal() * std::exp(-decay * static_cast<double>(i)));
  return h;
}

// Draws the augmentation decision, category and SNR from `rng`. Mixing is
// exact: the noise is scaled so that 10 log10(P_signal / P_noise) equals the
// drawn SNR; if the mixture clips, both components are scaled together.
inline AugmentResult augment(const std::vector<float>& wave, const AugmentConfig& cfg, Rng& rng,
                             std::optional<NoiseKind> force_kind = {}, std::optional<double> force_snr = {}) {
  if (cfg.apply_fraction < 0 || cfg.apply_fraction > 1) throw std::invalid_argument("augment: apply_fraction outside [0,1]");
  AugmentResult r;
  r.wave = wave;
  const bool apply = force_kind.has_value() || rng.bernoulli(cfg.apply_fraction);
  if (!apply) return r;
  if (mean_power(wave) == 0) {
    r.silent = true;
    return r;
  }
  r.kind = force_kind.value_or(static_cast<NoiseKind>(1 + rng.integer(0, 2)));
  double lo = 0, hi = 0;
  std::vector<float> noise;
  switch (r.kind) {
    case NoiseKind::noise: lo = cfg.snr_noise_lo, hi = cfg.snr_noise_hi, noise = make_noise(wave.size(), rng); break;
    case NoiseKind::speech: lo = cfg.snr_speech_lo, hi = cfg.snr_speech_hi, noise = make_babble(wave.size(), rng); break;
    case NoiseKind::music: lo = cfg.snr_music_lo, hi = cfg.snr_music_hi, noise = make_music(wave.size(), rng); break;
    case NoiseKind::none: throw std::invalid_argument("augment: cannot force kind none");
  }
  if (lo > hi) throw std::invalid_argument("augment: SNR range low exceeds high");
  r.snr_drawn = force_snr.value_or(rng.uniform(lo, hi));
  std::vector<float> speech = cfg.rir_enabled ? fft_convolve(wave, make_rir(rng)) : wave;
  const double ps = mean_power(speech), pn = mean_power(noise);
  const double g = std::sqrt(ps / (pn * std::pow(10.0, r.snr_drawn / 10.0)));
  for (auto& v : noise) v = static_cast<float>(v * g);
  float peak = 0;
  for (std::size_t i = 0; i < speech.size(); ++i) peak = std::max(peak, std::abs(speech[i] + noise[i]));
  if (peak > 1.0f) {
    for (auto& v : speech) v /= peak;
    for (auto& v : noise) v /= peak;
  }
  for (std::size_t i = 0; i < speech.size(); ++i) r.wave[i] = speech[i] + noise[i];
  r.snr_measured = snr_db(speech, noise);
  r.applied = true;
  return r;
}

// ---------------------------------------------------------------------------
// Batching

struct CorpusSplit {
  std::vector<std::size_t> train, test;
};

// The last `test_per_speaker` utterances of every speaker (in corpus order)
// form the held-out set; pre-training and probe fitting use the rest.
inline CorpusSplit split_corpus(const std::vector<Utterance>& corpus, int test_per_speaker) {
  if (test_per_speaker < 0) throw std::invalid_argument("split_corpus: negative held-out count");
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < corpus.size(); ++i) by_speaker[corpus[i].speaker].push_back(i);
  CorpusSplit s;
  for (const auto& [spk, idx] : by_speaker) {
    const std::size_t held = std::min(idx.size(), static_cast<std::size_t>(test_per_speaker));
    if (held == idx.size() && held > 0)
      throw std::invalid_argument("split_corpus: speaker " + std::to_string(spk) + " has no training utterances");
    s.train.insert(s.train.end(), idx.begin(), idx.end() - static_cast<long>(held));
    s.test.insert(s.test.end(), idx.end() - static_cast<long>(held), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct BatchItem {
  std::size_t utt = 0;     // index into the corpus
  std::size_t offset = 0;  // crop start in samples, multiple of 320
};

// Random-access batch schedule over a subset of the corpus: item i of step s
// is position (s*B + i) of the concatenation of per-epoch permutations.
class BatchSchedule {
 public:
  BatchSchedule(const std::vector<Utterance>& corpus, std::vector<std::size_t> subset, double batch_seconds,
                double crop_seconds, std::uint64_t seed)
      : corpus_(&corpus), subset_(std::move(subset)), seed_(seed) {
    if (subset_.empty()) throw std::invalid_argument("BatchSchedule: empty corpus");
    crop_ = static_cast<std::size_t>(std::lround(crop_seconds * kSampleRate / kFrameSamples)) * kFrameSamples;
    if (crop_ == 0) throw std::invalid_argument("BatchSchedule: crop shorter than one frame");
    batch_ = static_cast<std::size_t>(std::floor(batch_seconds / crop_seconds + 1e-9));
    if (batch_ == 0) throw std::invalid_argument("BatchSchedule: batch budget smaller than one crop");
  }

  std::size_t batch_size() const { return batch_; }
  std::size_t crop_samples() const { return crop_; }
  std::size_t crop_frames() const { return crop_ / kFrameSamples; }

  std::vector<BatchItem> items(std::uint64_t step) const {
    std::vector<BatchItem> out;
    const std::size_t n = subset_.size();
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::uint64_t g = step * batch_ + i;
      const std::uint64_t epoch = g / n;
      if (epoch != cached_epoch_) {
        perm_ = subset_;
        Rng rng(derive_seed(seed_, Stream::batch, epoch));
        std::shuffle(perm_.begin(), perm_.end(), rng.engine());
        cached_epoch_ = epoch;
      }
      BatchItem it;
      it.utt = perm_[g % n];
      const std::size_t len = (*corpus_)[it.utt].wave.size();
      if (len > crop_) {
        Rng rng(derive_seed(seed_, Stream::batch, 0xC0, step, i));
        const auto max_frame = static_cast<std::int64_t>((len - crop_) / kFrameSamples);
        it.offset = static_cast<std::size_t>(rng.integer(0, max_frame)) * kFrameSamples;
      }
      out.push_back(it);
    }
    return out;
  }

 private:
  const std::vector<Utterance>* corpus_;
  std::vector<std::size_t> subset_;
  std::uint64_t seed_;
  std::size_t crop_ = 0, batch_ = 0;
  mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  mutable std::vector<std::size_t> perm_;
};

// Crop of a per-frame sequence aligned with a sample crop, padded with -1.
inline std::vector<int> crop_frames(const std::vector<int>& seq, std::size_t offset_samples, std::size_t frames) {
  std::vector<int> out(frames, -1);
  const std::size_t f0 = offset_samples / kFrameSamples;
  for (std::size_t t = 0; t < frames && f0 + t < seq.size(); ++t) out[t] = seq[f0 + t];
  return out;
}

// Crop of a waveform, zero-padded past its end.
inline std::vector<float> crop_wave(const std::vector<float>& w, std::size_t offset, std::size_t samples) {
  std::vector<float> out(samples, 0.0f);
  for (std::size_t i = 0; i < samples && offset + i < w.size(); ++i) out[i] = w[offset + i];
  return out;
}

}  // namespace jooci
