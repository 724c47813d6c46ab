#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"

namespace bseg {

namespace detail {

// Reads the next whitespace-delimited header token, skipping '#' comments.
inline std::string pgm_token(const std::vector<unsigned char>& buf, std::size_t& pos) {
  for (;;) {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n' && buf[pos] != '\r') ++pos;
      continue;
    }
    break;
  }
  std::string tok;
  while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') tok.push_back(static_cast<char>(buf[pos++]));
  if (tok.empty()) fail(ErrorCode::TruncatedFile, "PGM header ended early");
  return tok;
}

inline std::size_t pgm_number(const std::vector<unsigned char>& buf, std::size_t& pos, const char* what) {
  const std::string tok = pgm_token(buf, pos);
  if (!std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    fail(ErrorCode::BadMagic, std::string("PGM ") + what + " is not a number: " + tok);
  return std::stoul(tok);
}

}  // namespace detail

/// Decodes a binary PGM (P5, maxval 255) into an (H, W) grid scaled to [0, 1].
inline Grid decode_pgm(const std::vector<unsigned char>& buf) {
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') fail(ErrorCode::BadMagic, "not a binary PGM (P5) file");
  std::size_t pos = 2;
  const std::size_t width = detail::pgm_number(buf, pos, "width");
  const std::size_t height = detail::pgm_number(buf, pos, "height");
  const std::size_t maxval = detail::pgm_number(buf, pos, "maxval");
  if (maxval != 255) fail(ErrorCode::UnsupportedMaxval, "maxval " + std::to_string(maxval) + " (only 255 supported)");
  if (width == 0 || height == 0) fail(ErrorCode::BadDims, "PGM with zero extent");
  // Exactly one whitespace byte separates the header from the raster.
  if (pos >= buf.size() || !std::isspace(buf[pos])) fail(ErrorCode::TruncatedFile, "missing raster separator");
  ++pos;
  if (buf.size() - pos < width * height)
    fail(ErrorCode::TruncatedFile, "raster holds " + std::to_string(buf.size() - pos) + " of " +
                                       std::to_string(width * height) + " bytes");
  Grid g(Shape{height, width});
  for (std::size_t i = 0; i < width * height; ++i) g[i] = buf[pos + i] / 255.0;
  return g;
}

/// Encodes an (H, W) grid; values are clamped to [0, 1] and mapped by round(v * 255).
inline std::vector<unsigned char> encode_pgm(const Grid& g) {
  if (g.rank() != 2) fail(ErrorCode::ShapeMismatch, "PGM export needs an (H, W) grid, got " + shape_str(g.shape()));
  const std::string header = "P5\n" + std::to_string(g.dim(1)) + " " + std::to_string(g.dim(0)) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + g.size());
  for (double v : g.raw()) out.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline Grid read_image(const std::filesystem::path& path) { return decode_pgm(read_file_bytes(path)); }

inline void write_image(const std::filesystem::path& path, const Grid& g) { write_file_bytes(path, encode_pgm(g)); }

}  // namespace bseg
