#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/objective.hpp"

namespace bseg {

struct Confusion {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Score given when both masks are empty (no foreground anywhere).
enum class EmptyMaskScore { One, Zero };

inline Confusion confusion(const Grid& pred, const Grid& truth) {
  require_same_shape(pred, truth, "confusion");
  require_binary(pred, ErrorCode::NotBinary, "confusion (prediction)");
  require_binary(truth, ErrorCode::NotBinary, "confusion (truth)");
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0.0, t = truth[i] != 0.0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 2TP / (2TP + FN + FP).
inline double dsc(const Confusion& c, EmptyMaskScore empty = EmptyMaskScore::One) {
  const double denom = 2.0 * c.tp + c.fn + c.fp;
  if (denom == 0.0) return empty == EmptyMaskScore::One ? 1.0 : 0.0;
  return 2.0 * c.tp / denom;
}

/// TP / (TP + FN + FP).
inline double iou(const Confusion& c, EmptyMaskScore empty = EmptyMaskScore::One) {
  const double denom = static_cast<double>(c.tp + c.fn + c.fp);
  if (denom == 0.0) return empty == EmptyMaskScore::One ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / denom;
}

struct ImageScore {
  Confusion counts;
  double dsc = 0;
  double iou = 0;
};

struct SetScore {
  double mean_dsc = 0;
  double mean_iou = 0;
  std::vector<ImageScore> per_image;
};

/// Per-image scores and their unweighted means.
inline SetScore evaluate_set(const std::vector<Grid>& preds, const std::vector<Grid>& truths,
                             EmptyMaskScore empty = EmptyMaskScore::One) {
  if (preds.empty()) fail(ErrorCode::EmptySet, "evaluate_set on an empty set");
  if (preds.size() != truths.size())
    fail(ErrorCode::ShapeMismatch, "prediction and truth lists differ in length");
  SetScore s;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ImageScore im;
    im.counts = confusion(preds[i], truths[i]);
    im.dsc = dsc(im.counts, empty);
    im.iou = iou(im.counts, empty);
    s.mean_dsc += im.dsc;
    s.mean_iou += im.iou;
    s.per_image.push_back(im);
  }
  s.mean_dsc /= static_cast<double>(preds.size());
  s.mean_iou /= static_cast<double>(preds.size());
  return s;
}

/// Splits an (N, 1, H, W) or (N, H, W) batch into N (H, W) grids.
inline std::vector<Grid> unstack(const Grid& batch) {
  const Shape& s = batch.shape();
  if (s.size() < 3) fail(ErrorCode::ShapeMismatch, "unstack needs a batch, got " + shape_str(s));
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t n = batch.size() / (h * w);
  std::vector<Grid> out;
  for (std::size_t k = 0; k < n; ++k)
    out.emplace_back(Shape{h, w}, std::vector<double>(batch.raw().begin() + static_cast<std::ptrdiff_t>(k * h * w),
                                                      batch.raw().begin() + static_cast<std::ptrdiff_t>((k + 1) * h * w)));
  return out;
}

/// Pixels of an (N, 1, H, W) or (H, W) binary mask with a 4-neighbour of the
/// other label. Both sides of the edge are marked.
inline Grid boundary_pixels(const Grid& mask) {
  require_binary(mask, ErrorCode::NotBinary, "boundary_pixels");
  const Shape& s = mask.shape();
  if (s.size() < 2) fail(ErrorCode::ShapeMismatch, "boundary_pixels needs an image, got " + shape_str(s));
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1], n = mask.size() / (h * w);
  Grid out(s, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = (k * h + y) * w + x;
        const double v = mask[i];
        const bool edge = (y > 0 && mask[i - w] != v) || (y + 1 < h && mask[i + w] != v) ||
                          (x > 0 && mask[i - 1] != v) || (x + 1 < w && mask[i + 1] != v);
        out[i] = edge ? 1.0 : 0.0;
      }
  return out;
}

/// CSV report: `image_id,dsc,iou`, one row per image, then a `mean` row.
inline void write_evaluation_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                                 const SetScore& score) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out << "image_id,dsc,iou\n";
  char buf[128];
  for (std::size_t i = 0; i < score.per_image.size(); ++i) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", score.per_image[i].dsc, score.per_image[i].iou);
    out << (i < ids.size() ? ids[i] : std::to_string(i)) << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.17g,%.17g\n", score.mean_dsc, score.mean_iou);
  out << buf;
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace bseg
