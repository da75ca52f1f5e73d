#pragma once

#include "agreid/harness/train_config.hpp"
#include "agreid/image.hpp"

#include <random>

namespace agreid::harness {

inline Image hflip(const Image& in) {
  Image out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.at(y, in.width - 1 - x, c);
  return out;
}

/// Zero-pad by `pad` on every side, then crop back to the original size at
/// offset (oy, ox) in [0, 2*pad].
inline Image pad_crop(const Image& in, int pad, int oy, int ox) {
  Image out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const int sy = y + oy - pad;
      const int sx = x + ox - pad;
      if (sy < 0 || sx < 0 || sy >= in.height || sx >= in.width) continue;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.at(sy, sx, c);
    }
  return out;
}

struct EraseBox {
  int y = 0, x = 0, h = 0, w = 0;
};

/// Random erasing: area fraction in [0.02, 0.33], aspect ratio in [0.3, 3.3],
/// filled with the per-channel image mean. Returns false if no box fit.
inline bool random_erase(Image& img, std::mt19937_64& rng, EraseBox* box = nullptr) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double area = static_cast<double>(img.height) * img.width;
  double mean[3] = {0, 0, 0};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) mean[c] += img.at(y, x, c) / area;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double target = area * (0.02 + 0.31 * u(rng));
    const double aspect = std::exp(std::log(0.3) + (std::log(3.3) - std::log(0.3)) * u(rng));
    const int h = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int w = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    const double frac = static_cast<double>(h) * w / area;
    if (h < 1 || w < 1 || h > img.height || w > img.width || frac < 0.02 || frac > 0.33) continue;
    const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(img.height - h + 1));
    const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(img.width - w + 1));
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = mean[c];
    if (box) *box = {y0, x0, h, w};
    return true;
  }
  return false;
}

/// Flip (p=0.5), pad-and-crop, random erasing (p=0.5), then clamp to [0,1].
inline Image augment(const Image& in, const Augmentation& toggles, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img = in;
  if (toggles.flip && u(rng) < 0.5) img = hflip(img);
  if (toggles.pad > 0) {
    const auto span = static_cast<std::uint64_t>(2 * toggles.pad + 1);
    const int oy = static_cast<int>(rng() % span);
    const int ox = static_cast<int>(rng() % span);
    img = pad_crop(img, toggles.pad, oy, ox);
  }
  if (toggles.erase && u(rng) < 0.5) random_erase(img, rng);
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace agreid::harness
