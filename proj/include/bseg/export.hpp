#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/metrics.hpp"
#include "bseg/pgm.hpp"
#include "bseg/uncertainty.hpp"

namespace bseg {

/// Min-max normalizes an uncertainty map to [0, 1] and inverts it, so the most
/// uncertain pixel becomes 0 (black) and the most confident 1 (white).
/// A constant map (zero range) becomes all ones.
inline Grid normalize_uncertainty(const Grid& u) {
  const auto [lo, hi] = std::minmax_element(u.raw().begin(), u.raw().end());
  Grid out(u.shape(), 1.0);
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = 1.0 - (u[i] - *lo) / range;
  return out;
}

/// Writes mean.pgm, mask.pgm, aleatoric.pgm and epistemic.pgm for every image
/// of the report. With more than one image the files get an index suffix
/// (mean_0.pgm, ...). Returns the written paths.
inline std::vector<std::filesystem::path> export_uncertainty_maps(const UncertaintyReport& report,
                                                                  const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  const auto means = unstack(report.mean);
  const auto masks = unstack(report.mask);
  const auto alea = unstack(report.aleatoric);
  const auto epi = unstack(report.epistemic);
  std::vector<std::filesystem::path> written;
  for (std::size_t k = 0; k < means.size(); ++k) {
    const std::string suffix = means.size() == 1 ? "" : "_" + std::to_string(k);
    Grid mean_img = means[k];
    if (report.space == UncertaintySpace::Logit)
      for (auto& v : mean_img.raw()) v = sigmoid(v);
    const std::pair<std::string, Grid> files[] = {
        {"mean", mean_img},
        {"mask", masks[k]},
        {"aleatoric", normalize_uncertainty(alea[k])},
        {"epistemic", normalize_uncertainty(epi[k])},
    };
    for (const auto& [name, g] : files) {
      const auto path = dir / (name + suffix + ".pgm");
      write_image(path, g);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace bseg
