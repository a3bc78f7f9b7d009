#pragma once

// Signal-processing helpers shared by corpus synthesis, augmentation and
// pseudo-label features. FFTs come from Eigen's FFT module.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace jooci {

inline double mean_power(const std::vector<float>& x) {
  if (x.empty()) return 0.0;
  double s = 0;
  for (float v : x) s += static_cast<double>(v) * v;
  return s / static_cast<double>(x.size());
}

inline double snr_db(const std::vector<float>& signal, const std::vector<float>& noise) {
  return 10.0 * std::log10(mean_power(signal) / mean_power(noise));
}

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Full linear convolution truncated to x.size() samples.
inline std::vector<float> fft_convolve(const std::vector<float>& x, const std::vector<float>& h) {
  if (x.empty() || h.empty()) return x;
  const std::size_t n = next_pow2(x.size() + h.size() - 1);
  std::vector<double> a(n, 0.0), b(n, 0.0), y;
  std::copy(x.begin(), x.end(), a.begin());
  std::copy(h.begin(), h.end(), b.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, a);
  fft.fwd(fb, b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  fft.inv(y, fa);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(y[i]);
  return out;
}

// Power spectra of Hann-windowed frames. Frame t is centred on sample
// t*hop + hop/2 and spans `window` samples (zero outside the signal); `fft`
// is the transform size. Returns frames x (fft/2 + 1) powers.
inline std::vector<std::vector<double>> frame_power_spectra(const std::vector<float>& x, std::size_t frames,
                                                            std::size_t hop, std::size_t window,
                                                            std::size_t fft_size) {
  if (window > fft_size) throw std::invalid_argument("frame_power_spectra: window exceeds FFT size");
  Eigen::FFT<double> fft;
  std::vector<double> win(window), buf(fft_size);
  for (std::size_t i = 0; i < window; ++i)
    win[i] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(window));
  std::vector<std::vector<double>> out(frames, std::vector<double>(fft_size / 2 + 1));
  std::vector<std::complex<double>> spec;
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const long start = static_cast<long>(t * hop + hop / 2) - static_cast<long>(window / 2);
    for (std::size_t i = 0; i < window; ++i) {
      const long s = start + static_cast<long>(i);
      if (s >= 0 && s < static_cast<long>(x.size())) buf[i] = x[static_cast<std::size_t>(s)] * win[i];
    }
    fft.fwd(spec, buf);
    for (std::size_t k = 0; k <= fft_size / 2; ++k) out[t][k] = std::norm(spec[k]);
  }
  return out;
}

}  // namespace jooci
