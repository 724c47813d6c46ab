#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "bseg/checkpoint.hpp"
#include "bseg/dataset.hpp"
#include "bseg/export.hpp"
#include "bseg/gradcheck.hpp"
#include "bseg/pgm.hpp"

using namespace bseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bseg_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::IoFailure;
}

// Tiny network with hand-set values, so the golden bytes do not depend on the
// random initializer.
SegNet golden_net() {
  NetConfig c;
  c.base_channels = 1;
  c.depth = 1;
  c.latent_dim = 1;
  SegNet net(c, 0);
  for (std::size_t k = 0; k < net.parameters().size(); ++k) {
    auto& p = net.parameters()[k].posterior;
    for (std::size_t j = 0; j < p.size(); ++j) {
      p.mean[j] = static_cast<double>(k + 1) + static_cast<double>(j) / 8.0;
      p.log_var[j] = -static_cast<double>(j + 1) / 4.0;
    }
  }
  return net;
}

}  // namespace

TEST(Generator, ForegroundFractionWithinBounds) {
  for (const auto& s : generate_synthetic(4, 32, 32, 11)) {
    const double f = foreground_fraction(s.mask);
    EXPECT_GE(f, 0.02) << s.id;
    EXPECT_LE(f, 0.4) << s.id;
  }
  for (const auto& s : generate_synthetic(50, 32, 32, 12)) {
    const double f = foreground_fraction(s.mask);
    EXPECT_GE(f, 0.02) << s.id;
    EXPECT_LE(f, 0.4) << s.id;
  }
}

TEST(Generator, SameSeedBitwiseIdentical) {
  const auto a = generate_synthetic(3, 16, 24, 5), b = generate_synthetic(3, 16, 24, 5);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].id, b[i].id);
  }
  EXPECT_NE(a[0].image, generate_synthetic(1, 16, 24, 6)[0].image);
}

TEST(Generator, SampleDependsOnlyOnSeedAndIndex) {
  const auto many = generate_synthetic(5, 16, 16, 9);
  EXPECT_EQ(generate_sample(3, 16, 16, 9, Difficulty::Easy).image, many[3].image);
}

TEST(Generator, HardChangesNoiseOnly) {
  const auto easy = generate_synthetic(3, 32, 32, 7, Difficulty::Easy);
  const auto hard = generate_synthetic(3, 32, 32, 7, Difficulty::Hard);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(easy[i].mask, hard[i].mask);
    EXPECT_NE(easy[i].image, hard[i].image);
  }
}

TEST(Generator, ImagesInUnitRangeMasksBinary) {
  for (const auto& s : generate_synthetic(5, 16, 16, 3, Difficulty::Hard)) {
    for (double v : s.image.raw()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (double v : s.mask.raw()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Generator, RejectsBadDims) {
  EXPECT_THROW(generate_synthetic(0, 16, 16, 1), Error);
  EXPECT_EQ(code_of([] { generate_synthetic(2, 20, 16, 1, Difficulty::Easy, 8); }), ErrorCode::BadDims);
}

TEST(Pgm, RoundTripWithinHalfStep) {
  Rng rng(1);
  Grid g(Shape{7, 9});
  for (auto& v : g.raw()) v = rng.uniform();
  EXPECT_LE(max_abs_diff(decode_pgm(encode_pgm(g)), g), 1.0 / 510.0);
}

TEST(Pgm, MaskRoundTripExact) {
  Rng rng(2);
  const Grid m = random_mask({6, 5}, rng);
  EXPECT_EQ(decode_pgm(encode_pgm(m)), m);
}

TEST(Pgm, ZeroGridBody) {
  const auto bytes = encode_pgm(Grid(Shape{2, 3}, 0.0));
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())), header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 0);
}

TEST(Pgm, ClampsOutOfRange) {
  const Grid g = decode_pgm(encode_pgm(Grid(Shape{1, 2}, {-0.5, 1.5})));
  EXPECT_EQ(g, Grid(Shape{1, 2}, {0.0, 1.0}));
}

TEST(Pgm, ToleratesCommentsAndWhitespace) {
  std::string text = "P5 # made by hand\n# another comment\n  2\t1\n255\n";
  text += static_cast<char>(0);
  text += static_cast<char>(255);
  EXPECT_EQ(decode_pgm(bytes_of(text)), Grid(Shape{1, 2}, {0.0, 1.0}));
}

TEST(Pgm, MalformedFilesRejected) {
  EXPECT_EQ(code_of([] { decode_pgm(bytes_of("P2\n1 1\n255\n0")); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([] { decode_pgm(bytes_of("P5\n2 2\n65535\n")); }), ErrorCode::UnsupportedMaxval);
  EXPECT_EQ(code_of([] { decode_pgm(bytes_of("P5\n2 2\n255\nabc")); }), ErrorCode::TruncatedFile);
  EXPECT_EQ(code_of([] { decode_pgm(bytes_of("P5\n2")); }), ErrorCode::TruncatedFile);
}

TEST(Pgm, FileRoundTripAndMissingFile) {
  TempDir dir("pgm");
  const Grid g(Shape{2, 2}, {0.0, 1.0, 1.0, 0.0});
  write_image(dir.path / "m.pgm", g);
  EXPECT_EQ(read_image(dir.path / "m.pgm"), g);
  EXPECT_EQ(code_of([&] { read_image(dir.path / "absent.pgm"); }), ErrorCode::IoFailure);
}

TEST(DatasetFiles, WriteThenReadBack) {
  TempDir dir("dataset");
  const auto data = generate_synthetic(3, 8, 8, 4);
  write_dataset(dir.path, data);
  EXPECT_TRUE(fs::exists(dir.path / "img_0002.pgm"));
  EXPECT_TRUE(fs::exists(dir.path / "msk_0002.pgm"));
  const auto back = read_dataset(dir.path);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].mask, data[i].mask);
    EXPECT_LE(max_abs_diff(back[i].image, data[i].image), 1.0 / 510.0);
  }
}

TEST(Checkpoint, RoundTripPreservesForwardBitwise) {
  TempDir dir("ckpt");
  SegNet net(NetConfig{}, 5);
  net.shift_log_variances(0.37);
  save_checkpoint(net, dir.path / "a.bseg");
  const SegNet back = load_checkpoint(dir.path / "a.bseg");
  EXPECT_EQ(back.config(), net.config());
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    EXPECT_EQ(back.parameters()[i].posterior.mean, net.parameters()[i].posterior.mean);
    EXPECT_EQ(back.parameters()[i].posterior.log_var, net.parameters()[i].posterior.log_var);
  }
  Rng a(1), b(1);
  const Grid x = generate_synthetic(1, 16, 16, 3)[0].image.reshaped({1, 1, 16, 16});
  EXPECT_EQ(predict(net, x, ForwardMode::MeanOnly, a).mu_logit, predict(back, x, ForwardMode::MeanOnly, b).mu_logit);
}

TEST(Checkpoint, CorruptPayloadByteDetected) {
  auto bytes = encode_checkpoint(SegNet(NetConfig{}, 1));
  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_EQ(code_of([&] { decode_checkpoint(bytes); }), ErrorCode::ChecksumMismatch);
}

TEST(Checkpoint, HeaderErrors) {
  const auto good = encode_checkpoint(golden_net());
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_checkpoint(bad_magic); }), ErrorCode::BadMagic);
  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_EQ(code_of([&] { decode_checkpoint(bad_version); }), ErrorCode::VersionMismatch);
  EXPECT_EQ(code_of([&] { decode_checkpoint({good.begin(), good.begin() + 8}); }), ErrorCode::TruncatedFile);
}

TEST(Checkpoint, MismatchedConfigRejected) {
  TempDir dir("ckpt_mismatch");
  save_checkpoint(SegNet(NetConfig{}, 1), dir.path / "a.bseg");
  NetConfig other;
  other.base_channels = 4;
  SegNet target(other, 1);
  EXPECT_EQ(code_of([&] { load_checkpoint_into(target, dir.path / "a.bseg"); }), ErrorCode::ConfigShapeMismatch);
}

TEST(Checkpoint, GoldenFileIsStable) {
  const auto golden = read_file_bytes(fs::path(BSEG_TEST_DATA) / "golden.bseg");
  EXPECT_EQ(encode_checkpoint(golden_net()), golden);
  // Hand-checked little-endian header: magic, version 1, in_channels 1, base_channels 1.
  const std::vector<unsigned char> head{'B', 'S', 'E', 'G', 1, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  EXPECT_TRUE(std::equal(head.begin(), head.end(), golden.begin()));
  const SegNet net = decode_checkpoint(golden);
  EXPECT_EQ(net.parameters()[0].posterior.mean[1], 1.125);
  EXPECT_EQ(net.parameters()[0].posterior.log_var[0], -0.25);
}

TEST(Export, ZeroRangeMapIsAllWhite) {
  const Grid n = normalize_uncertainty(Grid(Shape{3, 3}, 0.0));
  EXPECT_EQ(n, Grid(Shape{3, 3}, 1.0));
}

TEST(Export, MostUncertainPixelIsBlack) {
  TempDir dir("export");
  UncertaintyReport r;
  r.mean = Grid(Shape{1, 1, 2, 2}, {0.1, 0.6, 0.9, 0.4});
  r.mask = Grid(Shape{1, 1, 2, 2}, {0, 1, 1, 0});
  r.aleatoric = Grid(Shape{1, 1, 2, 2}, {0.01, 0.2, 0.05, 0.1});
  r.epistemic = Grid(Shape{1, 1, 2, 2}, 0.0);
  r.total_var = r.aleatoric;
  r.n_samples = 1;
  const auto files = export_uncertainty_maps(r, dir.path);
  EXPECT_EQ(files.size(), 4u);
  const auto alea = read_file_bytes(dir.path / "aleatoric.pgm");
  const auto px = std::vector<unsigned char>(alea.end() - 4, alea.end());
  EXPECT_EQ(px[1], 0);
  EXPECT_EQ(px[0], 255);
  const auto epi = read_file_bytes(dir.path / "epistemic.pgm");
  for (auto it = epi.end() - 4; it != epi.end(); ++it) EXPECT_EQ(*it, 255);
  const auto mask = read_file_bytes(dir.path / "mask.pgm");
  for (auto it = mask.end() - 4; it != mask.end(); ++it) EXPECT_TRUE(*it == 0 || *it == 255);
}
