#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/pgm.hpp"
#include "bseg/rng.hpp"

namespace bseg {

/// One image / ground-truth pair. Both grids are (H, W).
struct Sample {
  Grid image;
  Grid mask;
  std::string id;
};

enum class Difficulty { Easy, Hard };

inline double noise_sigma(Difficulty d) { return d == Difficulty::Easy ? 0.05 : 0.15; }

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "hard") return Difficulty::Hard;
  fail(ErrorCode::BadConfig, "difficulty must be 'easy' or 'hard', got '" + s + "'");
}

namespace detail {

// Smooth value noise in [0, 1]: a coarse random lattice sampled with
// smoothstep-weighted bilinear interpolation.
inline Grid value_noise(std::size_t h, std::size_t w, std::size_t cells, Rng& rng) {
  const std::size_t n = cells + 1;
  std::vector<double> lattice(n * n);
  for (auto& v : lattice) v = rng.uniform();
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  Grid out(Shape{h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = (y + 0.5) / h * cells, fx = (x + 0.5) / w * cells;
      const std::size_t iy = std::min<std::size_t>(static_cast<std::size_t>(fy), cells - 1);
      const std::size_t ix = std::min<std::size_t>(static_cast<std::size_t>(fx), cells - 1);
      const double ty = smooth(fy - iy), tx = smooth(fx - ix);
      const double a = lattice[iy * n + ix], b = lattice[iy * n + ix + 1];
      const double c = lattice[(iy + 1) * n + ix], d = lattice[(iy + 1) * n + ix + 1];
      out[y * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  return out;
}

}  // namespace detail

/// Synthetic "tumour" images: 1-3 bright rotated ellipses on a smooth
/// textured background with additive Gaussian noise. The mask is the exact
/// union of the ellipses (pixel centres inside). Sample i depends only on
/// (seed, i); the difficulty changes only the noise amplitude, never the
/// shapes or the noise pattern.
inline Sample generate_sample(std::size_t index, std::size_t h, std::size_t w, std::uint64_t seed,
                              Difficulty difficulty) {
  const Rng base = Rng(seed).fork(index);
  Rng shapes = base.fork(0);
  Rng texture = base.fork(1);
  Rng noise = base.fork(2);

  struct Ellipse {
    double cy, cx, a, b, angle, intensity;
  };
  const double extent = static_cast<double>(std::min(h, w));
  std::vector<Ellipse> ellipses(static_cast<std::size_t>(shapes.uniform_int(1, 3)));
  for (auto& e : ellipses) {
    e.cy = shapes.uniform(0.25, 0.75) * h;
    e.cx = shapes.uniform(0.25, 0.75) * w;
    e.a = shapes.uniform(0.10, 0.20) * extent;
    e.b = shapes.uniform(0.10, 0.20) * extent;
    e.angle = shapes.uniform(0.0, std::numbers::pi);
    e.intensity = shapes.uniform(0.70, 0.90);
  }

  Grid coarse = detail::value_noise(h, w, 4, texture);
  Grid fine = detail::value_noise(h, w, 8, texture);

  Sample s{Grid(Shape{h, w}), Grid(Shape{h, w}), "img_" + std::to_string(index)};
  const double sigma = noise_sigma(difficulty);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const double tex = 0.7 * coarse[i] + 0.3 * fine[i];
      double v = 0.20 + 0.20 * tex;
      bool inside = false;
      for (const auto& e : ellipses) {
        const double dy = y + 0.5 - e.cy, dx = x + 0.5 - e.cx;
        const double u = (dx * std::cos(e.angle) + dy * std::sin(e.angle)) / e.a;
        const double t = (-dx * std::sin(e.angle) + dy * std::cos(e.angle)) / e.b;
        if (u * u + t * t <= 1.0) {
          inside = true;
          v = std::max(v, e.intensity + 0.1 * (tex - 0.5));
        }
      }
      // The noise stream is consumed identically for both difficulties.
      v += sigma * noise.normal();
      s.image[i] = std::clamp(v, 0.0, 1.0);
      s.mask[i] = inside ? 1.0 : 0.0;
    }
  return s;
}

inline std::vector<Sample> generate_synthetic(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed,
                                              Difficulty difficulty = Difficulty::Easy,
                                              std::size_t size_multiple = 1) {
  if (n == 0) fail(ErrorCode::BadDims, "sample count must be >= 1");
  if (h < 4 || w < 4) fail(ErrorCode::BadDims, "images must be at least 4x4");
  if (size_multiple > 1 && (h % size_multiple || w % size_multiple))
    fail(ErrorCode::BadDims, "image extents must be divisible by " + std::to_string(size_multiple));
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(i, h, w, seed, difficulty));
  return out;
}

inline double foreground_fraction(const Grid& mask) { return mask.sum() / static_cast<double>(mask.size()); }

/// Stacks samples [indices] into an (N, 1, H, W) image batch and mask batch.
struct Batch {
  Grid images;
  Grid masks;
};

inline Batch stack_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) fail(ErrorCode::EmptySet, "empty batch");
  const Shape& s0 = data.at(indices[0]).image.shape();
  const std::size_t h = s0.at(0), w = s0.at(1), hw = h * w;
  Batch b{Grid(Shape{indices.size(), 1, h, w}), Grid(Shape{indices.size(), 1, h, w})};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = data.at(indices[k]);
    if (s.image.shape() != s0 || s.mask.shape() != s0)
      fail(ErrorCode::ShapeMismatch, "sample " + s.id + " has shape " + shape_str(s.image.shape()));
    std::copy_n(s.image.raw().begin(), hw, b.images.raw().begin() + k * hw);
    std::copy_n(s.mask.raw().begin(), hw, b.masks.raw().begin() + k * hw);
  }
  return b;
}

inline Batch stack_all(const std::vector<Sample>& data) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_batch(data, idx);
}

/// Thresholds a grayscale mask image at 0.5 into {0, 1}.
inline Grid binarize(const Grid& g) {
  Grid out(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] >= 0.5 ? 1.0 : 0.0;
  return out;
}

/// Dataset directory layout: img_XXXX.pgm / msk_XXXX.pgm pairs and a
/// manifest.csv with header `id,image,mask`.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) fail(ErrorCode::IoFailure, "cannot write manifest in " + dir.string());
  manifest << "id,image,mask\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char num[16];
    std::snprintf(num, sizeof num, "%04zu", i);
    const std::string img = std::string("img_") + num + ".pgm";
    const std::string msk = std::string("msk_") + num + ".pgm";
    write_image(dir / img, data[i].image);
    write_image(dir / msk, data[i].mask);
    manifest << data[i].id << ',' << img << ',' << msk << '\n';
  }
  if (!manifest) fail(ErrorCode::IoFailure, "manifest write failed in " + dir.string());
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) fail(ErrorCode::IoFailure, "no manifest.csv in " + dir.string());
  std::string line;
  std::getline(manifest, line);
  std::vector<Sample> out;
  while (std::getline(manifest, line)) {
    if (line.empty() || line == "\r") continue;
    if (line.back() == '\r') line.pop_back();
    std::stringstream ss(line);
    std::string id, img, msk;
    if (!std::getline(ss, id, ',') || !std::getline(ss, img, ',') || !std::getline(ss, msk, ','))
      fail(ErrorCode::IoFailure, "malformed manifest row: " + line);
    Sample s{read_image(dir / img), binarize(read_image(dir / msk)), id};
    if (s.image.shape() != s.mask.shape()) fail(ErrorCode::ShapeMismatch, "image and mask differ in size for " + id);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace bseg
