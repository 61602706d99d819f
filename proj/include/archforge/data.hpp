#pragma once

// Datasets: MNIST IDX ingestion (optionally gzip-compressed), normalization,
// seeded train/validation splits and the two-polygon synthetic task.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "archforge/errors.hpp"
#include "archforge/numerics.hpp"

namespace archforge {

/// Inputs one pattern per row, integer labels and their one-hot targets.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  Matrix targets;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  Eigen::Index input_dim() const { return inputs.cols(); }
  bool empty() const { return labels.empty(); }
};

inline Matrix one_hot(const std::vector<int>& labels, int class_count) {
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < class_count,
            "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(class_count) + ")");
    t(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return t;
}

inline Dataset make_dataset(Matrix inputs, std::vector<int> labels, int class_count) {
  require(inputs.rows() == static_cast<Eigen::Index>(labels.size()), "make_dataset: row count and label count differ");
  require(class_count >= 1, "make_dataset: class_count must be >= 1");
  Dataset d;
  d.targets = one_hot(labels, class_count);
  d.inputs = std::move(inputs);
  d.labels = std::move(labels);
  d.class_count = class_count;
  return d;
}

inline Dataset select_rows(const Dataset& d, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.class_count = d.class_count;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), d.inputs.cols());
  out.targets.resize(static_cast<Eigen::Index>(rows.size()), d.targets.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    out.inputs.row(static_cast<Eigen::Index>(i)) = d.inputs.row(r);
    out.targets.row(static_cast<Eigen::Index>(i)) = d.targets.row(r);
    out.labels.push_back(d.labels[rows[i]]);
  }
  return out;
}

// First `n` patterns (all of them when n >= size).
inline Dataset head(const Dataset& d, std::size_t n) {
  if (n >= d.size()) return d;
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return select_rows(d, rows);
}

// Same labels, new inputs (used when pushing data through frozen layers).
inline Dataset with_inputs(const Dataset& d, Matrix inputs) {
  require(inputs.rows() == d.inputs.rows(), "with_inputs: row count mismatch");
  Dataset out;
  out.inputs = std::move(inputs);
  out.labels = d.labels;
  out.targets = d.targets;
  out.class_count = d.class_count;
  return out;
}

/// Train / validation / test partitions handed to every algorithm.
struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// ---------------------------------------------------------------------------
// IDX

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, image-major

  bool operator==(const IdxImages&) const = default;
};

struct IdxLabels {
  std::vector<std::uint8_t> labels;

  bool operator==(const IdxLabels&) const = default;
};

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

inline void write_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

inline std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& in, const std::string& what) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) throw DataError(what + ": cannot initialise gzip decoder");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk{};
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw TruncatedError(what + ": corrupt or truncated gzip stream");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw TruncatedError(what + ": truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

}  // namespace detail

// Whole file; gzip members (magic 1f 8b) are inflated transparently.
inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return detail::gunzip(bytes, path.string());
  return bytes;
}

inline IdxImages decode_idx_images(const std::vector<std::uint8_t>& b, const std::string& what = "images") {
  if (b.size() < 16) throw TruncatedError(what + ": header shorter than 16 bytes");
  const std::uint32_t magic = detail::read_be32(b, 0);
  if (magic != kIdxImagesMagic)
    throw BadMagicError(what + ": bad magic " + detail::hex32(magic) + " (expected 0x00000803)");
  IdxImages img;
  img.count = detail::read_be32(b, 4);
  img.rows = detail::read_be32(b, 8);
  img.cols = detail::read_be32(b, 12);
  const std::uint64_t payload = std::uint64_t{img.count} * img.rows * img.cols;
  if (b.size() - 16 < payload)
    throw TruncatedError(what + ": payload has " + std::to_string(b.size() - 16) + " bytes, header promises " +
                         std::to_string(payload));
  img.pixels.assign(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  return img;
}

inline IdxLabels decode_idx_labels(const std::vector<std::uint8_t>& b, const std::string& what = "labels") {
  if (b.size() < 8) throw TruncatedError(what + ": header shorter than 8 bytes");
  const std::uint32_t magic = detail::read_be32(b, 0);
  if (magic != kIdxLabelsMagic)
    throw BadMagicError(what + ": bad magic " + detail::hex32(magic) + " (expected 0x00000801)");
  const std::uint32_t count = detail::read_be32(b, 4);
  if (b.size() - 8 < count)
    throw TruncatedError(what + ": payload has " + std::to_string(b.size() - 8) + " bytes, header promises " +
                         std::to_string(count));
  IdxLabels l;
  l.labels.assign(b.begin() + 8, b.begin() + 8 + count);
  return l;
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& img) {
  require(img.pixels.size() == std::size_t{img.count} * img.rows * img.cols, "encode_idx_images: pixel count mismatch");
  std::vector<std::uint8_t> b;
  b.reserve(16 + img.pixels.size());
  detail::write_be32(b, kIdxImagesMagic);
  detail::write_be32(b, img.count);
  detail::write_be32(b, img.rows);
  detail::write_be32(b, img.cols);
  b.insert(b.end(), img.pixels.begin(), img.pixels.end());
  return b;
}

inline std::vector<std::uint8_t> encode_idx_labels(const IdxLabels& l) {
  std::vector<std::uint8_t> b;
  b.reserve(8 + l.labels.size());
  detail::write_be32(b, kIdxLabelsMagic);
  detail::write_be32(b, static_cast<std::uint32_t>(l.labels.size()));
  b.insert(b.end(), l.labels.begin(), l.labels.end());
  return b;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

struct IdxPair {
  IdxImages images;
  IdxLabels labels;
};

inline IdxPair load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  IdxPair p{decode_idx_images(read_file_bytes(images_path), images_path.string()),
            decode_idx_labels(read_file_bytes(labels_path), labels_path.string())};
  if (p.images.count != p.labels.labels.size())
    throw CountMismatchError(images_path.string() + " holds " + std::to_string(p.images.count) + " images but " +
                             labels_path.string() + " holds " + std::to_string(p.labels.labels.size()) + " labels");
  return p;
}

/// Pixels scaled by 1/255 into [0, 1]; one row per image.
inline Dataset to_dataset(const IdxImages& images, const IdxLabels& labels, int class_count = 10) {
  require(images.count == labels.labels.size(), "to_dataset: image and label counts differ");
  const auto n = static_cast<Eigen::Index>(images.count);
  const auto d = static_cast<Eigen::Index>(images.rows) * images.cols;
  Matrix x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = images.pixels[static_cast<std::size_t>(i * d + j)] / 255.0;
  std::vector<int> y(labels.labels.begin(), labels.labels.end());
  return make_dataset(std::move(x), std::move(y), class_count);
}

/// Loads the four standard MNIST files from `dir` (plain or .gz).
inline std::pair<Dataset, Dataset> load_mnist_dir(const std::filesystem::path& dir) {
  auto pick = [&](const std::string& stem) {
    for (const auto& name : {stem, stem + ".gz"})
      if (std::filesystem::exists(dir / name)) return dir / name;
    throw DataError("missing MNIST file " + (dir / stem).string() + "[.gz]");
  };
  auto train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"));
  auto test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"));
  return {to_dataset(train.images, train.labels), to_dataset(test.images, test.labels)};
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Seeded permutation; the first ceil((1 - f) N) patterns train, the rest validate.
inline std::pair<Dataset, Dataset> split(const Dataset& data, const SplitSpec& spec) {
  require(data.size() >= 2, "split: need at least two patterns");
  require(spec.val_fraction > 0.0 && spec.val_fraction < 1.0, "split: val_fraction must lie in (0, 1)");
  const std::size_t n = data.size();
  // floor(f N) validation rows == N - ceil((1 - f) N); the epsilon absorbs f N landing a hair under an integer.
  auto n_val = static_cast<std::size_t>(std::floor(spec.val_fraction * static_cast<double>(n) + 1e-9));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(spec.seed);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> train_rows(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> val_rows(perm.end() - static_cast<std::ptrdiff_t>(n_val), perm.end());
  return {select_rows(data, train_rows), select_rows(data, val_rows)};
}

// ---------------------------------------------------------------------------
// Two-polygon synthetic task

struct Point2 {
  double x;
  double y;
};

/// The two disjoint convex regions of class 1, vertices counter-clockwise.
struct PolygonTask {
  static constexpr std::array<Point2, 4> quadrilateral{{{0.08, 0.50}, {0.45, 0.55}, {0.42, 0.95}, {0.05, 0.90}}};

  // Regular pentagon, centre (0.68, 0.35), circumradius 0.28, one vertex straight up.
  static std::array<Point2, 5> pentagon() {
    std::array<Point2, 5> p{};
    constexpr double pi = 3.14159265358979323846;
    for (int k = 0; k < 5; ++k) {
      const double angle = pi / 2 + 2 * pi * k / 5;
      p[static_cast<std::size_t>(k)] = {0.68 + 0.28 * std::cos(angle), 0.35 + 0.28 * std::sin(angle)};
    }
    return p;
  }

  template <std::size_t N>
  static bool inside_convex(const std::array<Point2, N>& poly, Point2 q) {
    for (std::size_t i = 0; i < N; ++i) {
      const Point2 a = poly[i];
      const Point2 b = poly[(i + 1) % N];
      if ((b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x) < 0.0) return false;
    }
    return true;
  }

  template <std::size_t N>
  static double area(const std::array<Point2, N>& poly) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const Point2 a = poly[i];
      const Point2 b = poly[(i + 1) % N];
      s += a.x * b.y - b.x * a.y;
    }
    return 0.5 * s;
  }

  static int label(Point2 q) { return inside_convex(quadrilateral, q) || inside_convex(pentagon(), q) ? 1 : 0; }

  static double positive_area() { return area(quadrilateral) + area(pentagon()); }
};

/// `n` points uniform on the unit square; label 1 inside either polygon.
inline Dataset synthetic_polygons(std::size_t n, std::uint64_t seed) {
  require(n >= 1, "synthetic_polygons: n must be >= 1");
  Rng rng(seed);
  Matrix x(static_cast<Eigen::Index>(n), 2);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 q{rng.uniform01(), rng.uniform01()};
    x(static_cast<Eigen::Index>(i), 0) = q.x;
    x(static_cast<Eigen::Index>(i), 1) = q.y;
    y[i] = PolygonTask::label(q);
  }
  return make_dataset(std::move(x), std::move(y), 2);
}

}  // namespace archforge
