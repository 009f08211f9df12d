#pragma once

// Dataset ingestion and batching. Readers for the two classic binary image
// formats (IDX as used by MNIST-style digit sets, and the CIFAR-10 batch
// layout), a deterministic train/validation split, the fixed baseline
// augmentation (pad-and-crop plus optional horizontal flip, applied outside
// any tape), and a synthetic blob dataset for fast tests.
//
// All pixels live in [0,1]. Loaders are byte-deterministic; every parse
// failure reports the offending byte offset.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hyperaug/rng.hpp"
#include "hyperaug/tensor.hpp"

namespace hyperaug {

template <typename Real>
struct Dataset {
  std::string name;
  int64_t class_count = 0;
  int64_t channels = 0, height = 0, width = 0;
  std::vector<Real> pixels;  // count() * channels * height * width, in [0,1]
  std::vector<int64_t> labels;

  int64_t count() const { return int64_t(labels.size()); }
  int64_t image_dim() const { return channels * height * width; }

  void validate() const {
    if (pixels.size() != size_t(count() * image_dim()))
      throw ValueError("Dataset '" + name + "': pixel buffer holds " +
                       std::to_string(pixels.size()) + " values, expected " +
                       std::to_string(count() * image_dim()));
    for (int64_t l : labels)
      if (l < 0 || l >= class_count)
        throw ValueError("Dataset '" + name + "': label " + std::to_string(l) +
                         " outside [0, " + std::to_string(class_count) + ")");
  }

  // Constant (B,C,H,W) tensor of the selected images.
  Tensor<Real> batch(std::span<const int64_t> idx) const {
    const int64_t d = image_dim();
    std::vector<Real> out;
    out.reserve(idx.size() * size_t(d));
    for (int64_t i : idx) {
      if (i < 0 || i >= count())
        throw ValueError("Dataset '" + name + "': index " + std::to_string(i) +
                         " outside [0, " + std::to_string(count()) + ")");
      out.insert(out.end(), pixels.begin() + i * d, pixels.begin() + (i + 1) * d);
    }
    return Tensor<Real>::constant({int64_t(idx.size()), channels, height, width},
                                  std::move(out));
  }

  std::vector<int64_t> batch_labels(std::span<const int64_t> idx) const {
    std::vector<int64_t> out;
    out.reserve(idx.size());
    for (int64_t i : idx) out.push_back(labels[size_t(i)]);
    return out;
  }

  Dataset subset(std::span<const int64_t> idx) const {
    Dataset out;
    out.name = name;
    out.class_count = class_count;
    out.channels = channels;
    out.height = height;
    out.width = width;
    const int64_t d = image_dim();
    out.pixels.reserve(idx.size() * size_t(d));
    out.labels.reserve(idx.size());
    for (int64_t i : idx) {
      out.pixels.insert(out.pixels.end(), pixels.begin() + i * d,
                        pixels.begin() + (i + 1) * d);
      out.labels.push_back(labels[size_t(i)]);
    }
    return out;
  }
};

struct SplitSpec {
  double validation_fraction = 0.10;
  uint64_t split_seed = 0;

  void validate() const {
    if (!(validation_fraction > 0.0) || !(validation_fraction < 1.0))
      throw ValueError("SplitSpec: validation_fraction must be in (0,1), got " +
                       std::to_string(validation_fraction));
  }
};

namespace detail {

inline std::vector<uint8_t> read_all_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

inline uint32_t read_be32(const std::vector<uint8_t>& b, size_t off,
                          const std::string& path) {
  if (off + 4 > b.size())
    throw DataError(path + ": truncated at byte " + std::to_string(b.size()) +
                    " while reading a 32-bit field at offset " +
                    std::to_string(off));
  return (uint32_t(b[off]) << 24) | (uint32_t(b[off + 1]) << 16) |
         (uint32_t(b[off + 2]) << 8) | uint32_t(b[off + 3]);
}

}  // namespace detail

// IDX image file: big-endian magic 0x00000803, count, rows, cols, then
// count*rows*cols unsigned bytes. Pixels scale to [0,1] by /255.
template <typename Real>
Dataset<Real> load_idx_images(const std::string& path) {
  auto bytes = detail::read_all_bytes(path);
  uint32_t magic = detail::read_be32(bytes, 0, path);
  if (magic != 0x00000803u)
    throw DataError(path + ": bad image magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }() + " at byte 0 (want 0x00000803)");
  int64_t n = detail::read_be32(bytes, 4, path);
  int64_t rows = detail::read_be32(bytes, 8, path);
  int64_t cols = detail::read_be32(bytes, 12, path);
  size_t need = 16 + size_t(n) * size_t(rows) * size_t(cols);
  if (bytes.size() < need)
    throw DataError(path + ": truncated at byte " +
                    std::to_string(bytes.size()) + ", header promises " +
                    std::to_string(need));
  Dataset<Real> ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.pixels.reserve(size_t(n * rows * cols));
  for (size_t i = 16; i < need; ++i) ds.pixels.push_back(Real(bytes[i]) / Real(255));
  ds.labels.assign(size_t(n), 0);  // caller overwrites from the label file
  return ds;
}

// IDX label file: big-endian magic 0x00000801, count, then count bytes.
inline std::vector<int64_t> load_idx_labels(const std::string& path) {
  auto bytes = detail::read_all_bytes(path);
  uint32_t magic = detail::read_be32(bytes, 0, path);
  if (magic != 0x00000801u)
    throw DataError(path + ": bad label magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }() + " at byte 0 (want 0x00000801)");
  int64_t n = detail::read_be32(bytes, 4, path);
  size_t need = 8 + size_t(n);
  if (bytes.size() < need)
    throw DataError(path + ": truncated at byte " +
                    std::to_string(bytes.size()) + ", header promises " +
                    std::to_string(need));
  std::vector<int64_t> labels;
  labels.reserve(size_t(n));
  for (size_t i = 8; i < need; ++i) labels.push_back(int64_t(bytes[i]));
  return labels;
}

template <typename Real>
Dataset<Real> load_mnist_idx(const std::string& images_path,
                             const std::string& labels_path,
                             const std::string& name = "mnist") {
  Dataset<Real> ds = load_idx_images<Real>(images_path);
  auto labels = load_idx_labels(labels_path);
  if (labels.size() != ds.labels.size())
    throw DataError(labels_path + ": " + std::to_string(labels.size()) +
                    " labels for " + std::to_string(ds.labels.size()) +
                    " images in " + images_path);
  ds.labels = std::move(labels);
  ds.name = name;
  ds.class_count = 10;
  ds.validate();
  return ds;
}

// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 1024-byte
// R, G, B planes of a 32x32 image.
template <typename Real>
Dataset<Real> load_cifar10_binary(const std::vector<std::string>& paths) {
  Dataset<Real> ds;
  ds.name = "cifar10";
  ds.class_count = 10;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  for (const auto& path : paths) {
    auto bytes = detail::read_all_bytes(path);
    if (bytes.empty() || bytes.size() % 3073 != 0)
      throw DataError(path + ": size " + std::to_string(bytes.size()) +
                      " is not a positive multiple of the 3073-byte record" +
                      " (short by " + std::to_string(3073 - bytes.size() % 3073) +
                      " at byte " + std::to_string(bytes.size()) + ")");
    size_t records = bytes.size() / 3073;
    ds.pixels.reserve(ds.pixels.size() + records * 3072);
    for (size_t r = 0; r < records; ++r) {
      size_t off = r * 3073;
      uint8_t label = bytes[off];
      if (label > 9)
        throw DataError(path + ": label " + std::to_string(int(label)) +
                        " out of range at byte " + std::to_string(off));
      ds.labels.push_back(int64_t(label));
      for (size_t i = 0; i < 3072; ++i)
        ds.pixels.push_back(Real(bytes[off + 1 + i]) / Real(255));
    }
  }
  ds.validate();
  return ds;
}

template <typename Real>
Dataset<Real> load_cifar10_binary(const std::string& path) {
  return load_cifar10_binary<Real>(std::vector<std::string>{path});
}

// Deterministic shuffle by split_seed, then partition: the first
// round(N * fraction) shuffled indices become validation.
template <typename Real>
std::pair<Dataset<Real>, Dataset<Real>> split(const Dataset<Real>& ds,
                                              const SplitSpec& spec) {
  spec.validate();
  int64_t n = ds.count();
  std::vector<int64_t> order(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
  Rng rng(Rng::mix(spec.split_seed, 0x73706c6974ull));
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(order[size_t(i)], order[rng.below(uint64_t(i + 1))]);
  int64_t n_val = int64_t(std::llround(double(n) * spec.validation_fraction));
  n_val = std::clamp<int64_t>(n_val, 1, n - 1);
  std::span<const int64_t> all(order);
  Dataset<Real> val = ds.subset(all.subspan(0, size_t(n_val)));
  Dataset<Real> train = ds.subset(all.subspan(size_t(n_val)));
  val.name = ds.name + "/val";
  train.name = ds.name + "/train";
  return {std::move(train), std::move(val)};
}

// ---- baseline augmentation (fixed, off-tape) ----

// Pad 4 zeros per side, crop back to HxW at a random offset, and flip
// left-right with probability 1/2 when enabled. Digit-style sets keep flip
// off; mirrored digits change class. Runs on raw values, never on a tape.
template <typename Real>
Tensor<Real> baseline_augment(const Tensor<Real>& batch, bool flip_enabled,
                              Rng& rng) {
  const auto& s = batch.shape();
  if (s.size() != 4)
    throw ShapeError("baseline_augment: expected (B,C,H,W), got " +
                     shape_str(batch.shape()));
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  constexpr int64_t pad = 4;
  auto in = batch.values();
  std::vector<Real> out(in.size(), Real(0));
  for (int64_t b = 0; b < B; ++b) {
    int64_t dy = int64_t(rng.below(uint64_t(2 * pad + 1))) - pad;
    int64_t dx = int64_t(rng.below(uint64_t(2 * pad + 1))) - pad;
    bool flip = flip_enabled && rng.uniform01() < 0.5;
    for (int64_t c = 0; c < C; ++c) {
      const Real* src = in.data() + ((b * C + c) * H) * W;
      Real* dst = out.data() + ((b * C + c) * H) * W;
      for (int64_t y = 0; y < H; ++y) {
        int64_t sy = y + dy;
        if (sy < 0 || sy >= H) continue;  // zero padding
        for (int64_t x = 0; x < W; ++x) {
          int64_t sx = flip ? (W - 1 - x) + dx : x + dx;
          if (sx < 0 || sx >= W) continue;
          dst[y * W + x] = src[sy * W + sx];
        }
      }
    }
  }
  return Tensor<Real>::constant(Shape(s), std::move(out));
}

// ---- synthetic fixture ----

// Gaussian blobs at class-specific positions on a 1x16x16 canvas, with a
// small center jitter and pixel noise. Linearly separable by construction.
template <typename Real>
Dataset<Real> synth_dataset(int64_t n, int64_t classes, uint64_t seed) {
  if (n <= 0 || classes <= 0 || classes > 16)
    throw ValueError("synth_dataset: need n > 0 and 0 < classes <= 16");
  Dataset<Real> ds;
  ds.name = "synth";
  ds.class_count = classes;
  ds.channels = 1;
  ds.height = 16;
  ds.width = 16;
  ds.pixels.reserve(size_t(n) * 256);
  ds.labels.reserve(size_t(n));
  Rng rng(Rng::mix(seed, 0x73796e7468ull));
  const double two_pi = 6.283185307179586;
  for (int64_t i = 0; i < n; ++i) {
    int64_t cls = int64_t(rng.below(uint64_t(classes)));
    double ang = two_pi * double(cls) / double(classes);
    double cy = 7.5 + 4.5 * std::sin(ang) + rng.uniform(-0.75, 0.75);
    double cx = 7.5 + 4.5 * std::cos(ang) + rng.uniform(-0.75, 0.75);
    for (int64_t y = 0; y < 16; ++y)
      for (int64_t x = 0; x < 16; ++x) {
        double d2 = (double(y) - cy) * (double(y) - cy) +
                    (double(x) - cx) * (double(x) - cx);
        double v = std::exp(-d2 / (2.0 * 1.5 * 1.5)) + 0.02 * rng.normal();
        ds.pixels.push_back(Real(std::clamp(v, 0.0, 1.0)));
      }
    ds.labels.push_back(cls);
  }
  return ds;
}

// ---- batch iteration ----

// Reshuffles [0,n) each epoch; batches are consecutive slices. The final
// short batch is kept or dropped per keep_partial, consistently.
inline std::vector<std::vector<int64_t>> epoch_batches(int64_t n,
                                                       int64_t batch_size,
                                                       Rng& rng,
                                                       bool keep_partial = true) {
  if (n <= 0 || batch_size <= 0)
    throw ValueError("epoch_batches: need n > 0 and batch_size > 0");
  std::vector<int64_t> order(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(order[size_t(i)], order[rng.below(uint64_t(i + 1))]);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t stop = std::min(n, start + batch_size);
    if (stop - start < batch_size && !keep_partial) break;
    batches.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return batches;
}

// Fixed-order cyclic index source; validation batches for the outer objective
// come from here, one batch per outer step.
class CyclicSampler {
 public:
  CyclicSampler(int64_t n, int64_t batch_size) : n_(n), batch_(batch_size) {
    if (n <= 0 || batch_size <= 0)
      throw ValueError("CyclicSampler: need n > 0 and batch_size > 0");
  }

  std::vector<int64_t> next() {
    std::vector<int64_t> idx;
    idx.reserve(size_t(std::min(batch_, n_)));
    for (int64_t i = 0; i < batch_ && i < n_; ++i) {
      idx.push_back(pos_);
      pos_ = (pos_ + 1) % n_;
    }
    return idx;
  }

 private:
  int64_t n_, batch_, pos_ = 0;
};

}  // namespace hyperaug
