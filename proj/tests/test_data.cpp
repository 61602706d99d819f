#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <set>

#include "archforge/data.hpp"
#include "support.hpp"

using namespace archforge;
using archforge::testing::TempDir;

namespace {

IdxImages random_images(Rng& rng) {
  IdxImages img;
  img.count = static_cast<std::uint32_t>(rng.uniform_index(17));
  img.rows = static_cast<std::uint32_t>(1 + rng.uniform_index(8));
  img.cols = static_cast<std::uint32_t>(1 + rng.uniform_index(8));
  img.pixels.resize(std::size_t{img.count} * img.rows * img.cols);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
  return img;
}

std::vector<std::uint8_t> gzip(const std::vector<std::uint8_t>& raw) {
  z_stream zs{};
  EXPECT_EQ(deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY), Z_OK);
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(raw.size())) + 32);
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  EXPECT_EQ(deflate(&zs, Z_FINISH), Z_STREAM_END);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

}  // namespace

TEST(Idx, HandBuiltFileMatchesLayoutAndRoundTrips) {
  IdxImages img{2, 2, 2, {0, 1, 2, 3, 250, 251, 252, 255}};
  const auto bytes = encode_idx_images(img);
  const std::vector<std::uint8_t> expected_header{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
  ASSERT_EQ(bytes.size(), 16u + 8u);
  EXPECT_TRUE(std::equal(expected_header.begin(), expected_header.end(), bytes.begin()));
  EXPECT_EQ(decode_idx_images(bytes), img);

  IdxLabels lab{{7, 3}};
  const auto lb = encode_idx_labels(lab);
  EXPECT_EQ(lb, (std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 2, 7, 3}));
  EXPECT_EQ(decode_idx_labels(lb), lab);
}

TEST(Idx, RoundTripPropertyOnRandomTensors) {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const IdxImages img = random_images(rng);
    IdxLabels lab;
    lab.labels.resize(img.count);
    for (auto& l : lab.labels) l = static_cast<std::uint8_t>(rng.uniform_index(10));
    ASSERT_EQ(decode_idx_images(encode_idx_images(img)), img);
    ASSERT_EQ(decode_idx_labels(encode_idx_labels(lab)), lab);
  }
}

TEST(Idx, WrongMagicIsBadMagic) {
  auto bytes = encode_idx_images({1, 1, 1, {9}});
  bytes[3] = 0x02;
  try {
    decode_idx_images(bytes);
    FAIL() << "expected BadMagicError";
  } catch (const BadMagicError& e) {
    EXPECT_NE(std::string(e.what()).find("0x00000802"), std::string::npos);
  }
  auto lb = encode_idx_labels({{1}});
  lb[3] = 0x03;
  EXPECT_THROW(decode_idx_labels(lb), BadMagicError);
}

TEST(Idx, TruncationIsDetected) {
  auto bytes = encode_idx_images({2, 2, 2, std::vector<std::uint8_t>(8, 1)});
  bytes.pop_back();
  EXPECT_THROW(decode_idx_images(bytes), TruncatedError);
  EXPECT_THROW(decode_idx_images(std::vector<std::uint8_t>(10, 0)), TruncatedError);
  auto lb = encode_idx_labels({{1, 2, 3}});
  lb.pop_back();
  EXPECT_THROW(decode_idx_labels(lb), TruncatedError);
}

TEST(Idx, ErrorClassesAreDistinctDataErrors) {
  auto bytes = encode_idx_images({1, 1, 1, {9}});
  bytes[2] = 0;
  EXPECT_THROW(decode_idx_images(bytes), DataError);
  bytes = encode_idx_images({1, 1, 1, {9}});
  bytes.pop_back();
  try {
    decode_idx_images(bytes);
  } catch (const BadMagicError&) {
    FAIL() << "truncation reported as bad magic";
  } catch (const TruncatedError&) {
  }
}

TEST(Idx, LoadFromFilesCountMismatchAndGzip) {
  TempDir dir("idx");
  const IdxImages img{3, 2, 2, std::vector<std::uint8_t>(12, 128)};
  write_bytes(dir.path() / "img", encode_idx_images(img));
  write_bytes(dir.path() / "lab", encode_idx_labels({{1, 2, 3}}));
  write_bytes(dir.path() / "lab2", encode_idx_labels({{1, 2}}));
  write_bytes(dir.path() / "img.gz", gzip(encode_idx_images(img)));

  const IdxPair p = load_idx(dir.path() / "img", dir.path() / "lab");
  EXPECT_EQ(p.images, img);
  EXPECT_THROW(load_idx(dir.path() / "img", dir.path() / "lab2"), CountMismatchError);
  EXPECT_EQ(load_idx(dir.path() / "img.gz", dir.path() / "lab").images, img);
  EXPECT_THROW(load_idx(dir.path() / "missing", dir.path() / "lab"), DataError);

  auto gz = gzip(encode_idx_images(img));
  gz.resize(gz.size() / 2);
  write_bytes(dir.path() / "cut.gz", gz);
  EXPECT_THROW(read_file_bytes(dir.path() / "cut.gz"), TruncatedError);
}

TEST(Idx, MnistDirectoryLayout) {
  TempDir dir("mnistdir");
  const IdxImages img{4, 28, 28, std::vector<std::uint8_t>(4 * 784, 0)};
  write_bytes(dir.path() / "train-images-idx3-ubyte", encode_idx_images(img));
  write_bytes(dir.path() / "train-labels-idx1-ubyte", encode_idx_labels({{0, 1, 2, 3}}));
  write_bytes(dir.path() / "t10k-images-idx3-ubyte.gz", gzip(encode_idx_images(img)));
  write_bytes(dir.path() / "t10k-labels-idx1-ubyte.gz", gzip(encode_idx_labels({{4, 5, 6, 7}})));
  const auto [train, test] = load_mnist_dir(dir.path());
  EXPECT_EQ(train.size(), 4u);
  EXPECT_EQ(train.input_dim(), 784);
  EXPECT_EQ(test.labels, (std::vector<int>{4, 5, 6, 7}));
}

TEST(ToDataset, NormalisesPixelsAndOneHotEncodes) {
  const IdxImages img{2, 28, 28, std::vector<std::uint8_t>(2 * 784, 0)};
  IdxImages edited = img;
  edited.pixels[0] = 255;
  edited.pixels[784 + 5] = 51;
  const Dataset d = to_dataset(edited, {{3, 9}});
  EXPECT_EQ(d.input_dim(), 784);
  EXPECT_DOUBLE_EQ(d.inputs(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(d.inputs(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(d.inputs(1, 5), 0.2);
  EXPECT_EQ(Vector(d.targets.row(0).transpose()), Vector::Unit(10, 3));
  EXPECT_EQ(d.class_count, 10);
  EXPECT_THROW(to_dataset({1, 1, 1, {0}}, {{10}}), ContractViolation);
}

TEST(Split, SixtyThousandGivesFortyEightAndTwelve) {
  Dataset d = make_dataset(Matrix::Zero(60000, 1), std::vector<int>(60000, 0), 1);
  const auto [train, val] = split(d, {0.2, 1});
  EXPECT_EQ(train.size(), 48000u);
  EXPECT_EQ(val.size(), 12000u);
}

TEST(Split, PropertyDeterministicDisjointExhaustive) {
  Rng rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = trial < 10 ? 2 + static_cast<std::size_t>(trial) : 2 + rng.uniform_index(100000 - 1);
    Matrix x(static_cast<Eigen::Index>(n), 1);
    for (std::size_t i = 0; i < n; ++i) x(static_cast<Eigen::Index>(i), 0) = static_cast<double>(i);
    const Dataset d = make_dataset(std::move(x), std::vector<int>(n, 0), 1);
    const std::uint64_t seed = rng.next_u64();
    const auto [train, val] = split(d, {0.2, seed});
    const auto [train2, val2] = split(d, {0.2, seed});
    ASSERT_EQ(train.inputs, train2.inputs);
    ASSERT_EQ(val.inputs, val2.inputs);
    const auto expected_train = static_cast<std::size_t>(std::ceil(0.8 * static_cast<double>(n) - 1e-9));
    ASSERT_EQ(train.size(), std::clamp<std::size_t>(expected_train, 1, n - 1)) << n;
    ASSERT_EQ(train.size() + val.size(), n);
    std::vector<char> seen(n, 0);
    for (const Dataset* part : {&train, &val})
      for (Eigen::Index i = 0; i < part->inputs.rows(); ++i) {
        auto& s = seen[static_cast<std::size_t>(part->inputs(i, 0))];
        ASSERT_EQ(s, 0);
        s = 1;
      }
  }
}

TEST(Split, RejectsDegenerateInput) {
  const Dataset one = make_dataset(Matrix::Zero(1, 1), {0}, 1);
  EXPECT_THROW(split(one, {0.2, 0}), ContractViolation);
  const Dataset two = make_dataset(Matrix::Zero(2, 1), {0, 0}, 1);
  EXPECT_THROW(split(two, {1.0, 0}), ContractViolation);
}

TEST(Polygons, VerticesAndAreas) {
  // Shoelace by hand for the quadrilateral; closed form for the regular pentagon.
  EXPECT_NEAR(PolygonTask::area(PolygonTask::quadrilateral), 0.1495, 1e-12);
  const double pentagon = 2.5 * 0.28 * 0.28 * std::sin(2 * 3.14159265358979323846 / 5);
  EXPECT_NEAR(PolygonTask::area(PolygonTask::pentagon()), pentagon, 1e-12);
  for (const auto& p : PolygonTask::pentagon()) {
    EXPECT_GE(p.x, 0.0);
    EXPECT_LE(p.x, 1.0);
    EXPECT_GE(p.y, 0.0);
    EXPECT_LE(p.y, 1.0);
  }
}

TEST(Polygons, CentroidsArePositiveAndOriginIsNegative) {
  Point2 c{0, 0};
  for (const auto& p : PolygonTask::quadrilateral) c = {c.x + p.x / 4, c.y + p.y / 4};
  EXPECT_EQ(PolygonTask::label(c), 1);
  EXPECT_EQ(PolygonTask::label({0.68, 0.35}), 1);
  EXPECT_EQ(PolygonTask::label({0.0, 0.0}), 0);
  EXPECT_EQ(PolygonTask::label({1.0, 1.0}), 0);
}

TEST(Polygons, RegionsAreDisjoint) {
  Rng rng(5);
  const auto pent = PolygonTask::pentagon();
  for (int i = 0; i < 200000; ++i) {
    const Point2 q{rng.uniform01(), rng.uniform01()};
    ASSERT_FALSE(PolygonTask::inside_convex(PolygonTask::quadrilateral, q) && PolygonTask::inside_convex(pent, q));
  }
}

TEST(Polygons, PositiveFractionMatchesArea) {
  const std::size_t n = 100000;
  const Dataset d = synthetic_polygons(n, 42);
  EXPECT_EQ(d.input_dim(), 2);
  EXPECT_EQ(d.class_count, 2);
  const double frac = std::accumulate(d.labels.begin(), d.labels.end(), 0.0) / static_cast<double>(n);
  const double a = PolygonTask::positive_area();
  EXPECT_NEAR(frac, a, 3 * std::sqrt(a * (1 - a) / static_cast<double>(n)));
  EXPECT_GE(d.inputs.minCoeff(), 0.0);
  EXPECT_LT(d.inputs.maxCoeff(), 1.0);
}

TEST(Polygons, SeedDeterminesSample) {
  EXPECT_EQ(synthetic_polygons(50, 1).inputs, synthetic_polygons(50, 1).inputs);
  EXPECT_NE(synthetic_polygons(50, 1).inputs, synthetic_polygons(50, 2).inputs);
}

TEST(Dataset, HeadSelectAndWithInputs) {
  Rng rng(1);
  const Dataset d = archforge::testing::random_dataset(10, 3, 4, rng);
  const Dataset h = head(d, 4);
  EXPECT_EQ(h.size(), 4u);
  EXPECT_EQ(h.inputs, Matrix(d.inputs.topRows(4)));
  const Dataset s = select_rows(d, {9, 0});
  EXPECT_EQ(s.labels, (std::vector<int>{d.labels[9], d.labels[0]}));
  const Dataset w = with_inputs(d, Matrix::Zero(10, 7));
  EXPECT_EQ(w.input_dim(), 7);
  EXPECT_EQ(w.labels, d.labels);
  EXPECT_THROW(with_inputs(d, Matrix::Zero(9, 7)), ContractViolation);
}
