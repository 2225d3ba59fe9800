#include "ckdsnn/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace ckdsnn {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw DataError(DataError::Kind::truncated, path.string() + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr Index kCifarSide = 32;
constexpr Index kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

}  // namespace

Dataset Dataset::take(const std::vector<Index>& indices) const {
  const Index per = images.numel() / std::max<Index>(size(), 1);
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  Vector<float> values(static_cast<Index>(indices.size()) * per);
  std::vector<int> picked;
  picked.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    values.segment(static_cast<Index>(i) * per, per) = images.data().segment(indices[i] * per, per);
    picked.push_back(labels.at(static_cast<std::size_t>(indices[i])));
  }
  return {TensorF(std::move(shape), std::move(values)), std::move(picked), num_classes};
}

Dataset Dataset::head(Index count) const {
  std::vector<Index> idx(static_cast<std::size_t>(std::min(count, size())));
  std::iota(idx.begin(), idx.end(), Index{0});
  return take(idx);
}

Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (read_be32(img, 0, images_path) != kIdxImages) {
    throw DataError(DataError::Kind::bad_magic, images_path.string() + ": not an IDX image file (magic)");
  }
  if (read_be32(lab, 0, labels_path) != kIdxLabels) {
    throw DataError(DataError::Kind::bad_magic, labels_path.string() + ": not an IDX label file (magic)");
  }
  const Index n = read_be32(img, 4, images_path);
  const Index rows = read_be32(img, 8, images_path);
  const Index cols = read_be32(img, 12, images_path);
  const Index n_labels = read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw DataError(DataError::Kind::count_mismatch, "IDX count mismatch: " + std::to_string(n) + " images vs " +
                                                         std::to_string(n_labels) + " labels");
  }
  if (rows == 0 || cols == 0) throw DataError(DataError::Kind::bad_dimensions, images_path.string() + ": zero-sized images");
  const std::size_t need_img = 16 + static_cast<std::size_t>(n * rows * cols);
  if (img.size() < need_img) throw DataError(DataError::Kind::truncated, images_path.string() + ": truncated pixel payload");
  if (lab.size() < 8 + static_cast<std::size_t>(n)) {
    throw DataError(DataError::Kind::truncated, labels_path.string() + ": truncated label payload");
  }
  Vector<float> values(n * rows * cols);
  for (Index i = 0; i < values.size(); ++i) values[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int y = lab[8 + i];
    if (y > 9) {
      throw DataError(DataError::Kind::label_out_of_range, labels_path.string() + ": label " + std::to_string(y) +
                                                               " at index " + std::to_string(i) + " outside [0,10)");
    }
    labels[i] = y;
  }
  return {TensorF(Shape{n, 1, rows, cols}, std::move(values)), std::move(labels), 10};
}

void write_mnist_idx(const Dataset& data, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  if (data.channels() != 1) throw DataError(DataError::Kind::bad_dimensions, "IDX export needs single-channel images");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError(DataError::Kind::io, "cannot write IDX fixture");
  put_be32(img, kIdxImages);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(data.height()));
  put_be32(img, static_cast<std::uint32_t>(data.width()));
  for (Index i = 0; i < data.images.numel(); ++i) img.put(static_cast<char>(to_byte(data.images.data()[i])));
  put_be32(lab, kIdxLabels);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int y : data.labels) lab.put(static_cast<char>(y));
}

Dataset load_cifar10_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw DataError(DataError::Kind::bad_size, path.string() + ": size " + std::to_string(bytes.size()) +
                                                   " is not a multiple of " + std::to_string(kCifarRecord));
  }
  const Index n = static_cast<Index>(bytes.size()) / kCifarRecord;
  const Index pixels = kCifarRecord - 1;
  Vector<float> values(n * pixels);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9) {
      throw DataError(DataError::Kind::label_out_of_range,
                      path.string() + ": label " + std::to_string(rec[0]) + " in record " + std::to_string(i));
    }
    labels[i] = rec[0];
    for (Index p = 0; p < pixels; ++p) values[i * pixels + p] = static_cast<float>(rec[1 + p]) / 255.0f;
  }
  return {TensorF(Shape{n, 3, kCifarSide, kCifarSide}, std::move(values)), std::move(labels), 10};
}

Dataset load_cifar10_bin(const std::filesystem::path& dir, bool train) {
  std::filesystem::path root = dir;
  if (std::filesystem::exists(dir / "cifar-10-batches-bin")) root = dir / "cifar-10-batches-bin";
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) {
      const auto f = root / ("data_batch_" + std::to_string(i) + ".bin");
      if (std::filesystem::exists(f)) files.push_back(f);
    }
  } else if (std::filesystem::exists(root / "test_batch.bin")) {
    files.push_back(root / "test_batch.bin");
  }
  if (files.empty()) throw DataError(DataError::Kind::io, "no CIFAR-10 batch files under " + root.string());

  std::vector<Dataset> parts;
  Index total = 0;
  for (const auto& f : files) {
    parts.push_back(load_cifar10_file(f));
    total += parts.back().size();
  }
  const Index per = 3 * kCifarSide * kCifarSide;
  Vector<float> values(total * per);
  std::vector<int> labels;
  Index offset = 0;
  for (const auto& p : parts) {
    values.segment(offset * per, p.size() * per) = p.images.data();
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
    offset += p.size();
  }
  return {TensorF(Shape{total, 3, kCifarSide, kCifarSide}, std::move(values)), std::move(labels), 10};
}

void write_cifar10_bin(const Dataset& data, const std::filesystem::path& path) {
  if (data.channels() != 3 || data.height() != kCifarSide || data.width() != kCifarSide) {
    throw DataError(DataError::Kind::bad_dimensions, "CIFAR export needs [N,3,32,32] images");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::io, "cannot write " + path.string());
  const Index per = kCifarRecord - 1;
  for (Index i = 0; i < data.size(); ++i) {
    out.put(static_cast<char>(data.labels[static_cast<std::size_t>(i)]));
    for (Index p = 0; p < per; ++p) out.put(static_cast<char>(to_byte(data.images.data()[i * per + p])));
  }
}

// ---------------------------------------------------------------------------

namespace {

bool inside_shape(int cls, double dx, double dy, double r) {
  switch (cls) {
    case 0:  // square
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 1:  // circle
      return dx * dx + dy * dy <= r * r;
    case 2: {  // triangle, apex up
      const double t = (dy + r) / (2.0 * r);
      return t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * r;
    }
    default: {  // cross
      const double arm = r / 3.0;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
  }
}

}  // namespace

Dataset synth_shapes(Index n, int classes, Index size, std::uint64_t seed, const SynthOptions& options) {
  if (classes < 2 || classes > 4) throw std::invalid_argument("synth_shapes: classes must be in [2, 4]");
  if (n < classes) throw std::invalid_argument("synth_shapes: need at least one sample per class");
  if (size < 8) throw std::invalid_argument("synth_shapes: image size must be >= 8");
  Rng rng = Rng(seed).fork(streams::data);
  const Index plane = size * size;
  Vector<float> values = Vector<float>::Zero(n * plane);
  std::vector<int> labels(static_cast<std::size_t>(n));
  const double half = static_cast<double>(size) / 2.0;
  for (Index i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % classes);
    labels[i] = cls;
    float* img = values.data() + i * plane;
    const double r = half * rng.uniform(options.min_scale, std::max(options.min_scale, options.max_scale) + 1e-12);
    double cx = half, cy = half;
    if (options.jitter_position) {
      cx = rng.uniform(r, static_cast<double>(size) - r);
      cy = rng.uniform(r, static_cast<double>(size) - r);
    }
    const float intensity = static_cast<float>(rng.uniform(options.min_intensity, 1.0));
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x)
        if (inside_shape(cls, x + 0.5 - cx, y + 0.5 - cy, r)) img[y * size + x] = intensity;

    for (int k = 0; k < options.clutter; ++k) {
      const double x0 = rng.uniform(0, static_cast<double>(size)), y0 = rng.uniform(0, static_cast<double>(size));
      const double angle = rng.uniform(0, 2 * 3.14159265358979323846);
      const double len = rng.uniform(0.15, 0.35) * static_cast<double>(size);
      const float level = static_cast<float>(rng.uniform(0.3, 0.9));
      const int steps = static_cast<int>(std::ceil(len * 2));
      for (int s = 0; s <= steps; ++s) {
        const double t = len * s / std::max(steps, 1);
        const auto px = static_cast<Index>(x0 + t * std::cos(angle));
        const auto py = static_cast<Index>(y0 + t * std::sin(angle));
        if (px >= 0 && px < size && py >= 0 && py < size) img[py * size + px] = std::max(img[py * size + px], level);
      }
    }
    if (options.noise_std > 0) {
      for (Index p = 0; p < plane; ++p) {
        img[p] = std::clamp(img[p] + static_cast<float>(rng.normal(0.0, options.noise_std)), 0.0f, 1.0f);
      }
    }
  }
  return {TensorF(Shape{n, 1, size, size}, std::move(values)), std::move(labels), classes};
}

// ---------------------------------------------------------------------------

Normalizer Normalizer::fit(const Dataset& data) {
  const Index n = data.size(), c = data.channels(), plane = data.height() * data.width();
  Normalizer out;
  for (Index ch = 0; ch < c; ++ch) {
    double s = 0, ss = 0;
    for (Index i = 0; i < n; ++i) {
      const float* p = data.images.data().data() + (i * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        s += p[k];
        ss += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n * plane);
    const double m = s / count;
    const double var = std::max(ss / count - m * m, 0.0);
    out.mean.push_back(static_cast<float>(m));
    out.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-6)));
  }
  return out;
}

Normalizer Normalizer::identity(Index channels) {
  return {std::vector<float>(static_cast<std::size_t>(channels), 0.0f),
          std::vector<float>(static_cast<std::size_t>(channels), 1.0f)};
}

TensorF Normalizer::apply(const TensorF& images) const {
  if (images.rank() != 4 || images.dim(1) != static_cast<Index>(mean.size())) {
    throw ShapeError("Normalizer: expected [N," + std::to_string(mean.size()) + ",H,W], got " +
                     shape_string(images.shape()));
  }
  const Index n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
  Vector<float> out(images.numel());
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (i * c + ch) * plane;
      out.segment(base, plane) = (images.data().segment(base, plane).array() - mean[ch]) / stddev[ch];
    }
  return TensorF(images.shape(), std::move(out));
}

TensorF hflip(const TensorF& batch, const std::vector<bool>& coins) {
  if (batch.rank() != 4 || static_cast<Index>(coins.size()) != batch.dim(0)) {
    throw ShapeError("hflip: need one coin per sample of a [N,C,H,W] batch");
  }
  const Index n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Vector<float> out = batch.data();
  for (Index i = 0; i < n; ++i) {
    if (!coins[static_cast<std::size_t>(i)]) continue;
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < h; ++y) {
        float* row = out.data() + ((i * c + ch) * h + y) * w;
        std::reverse(row, row + w);
      }
  }
  return TensorF(batch.shape(), std::move(out));
}

TensorF augment(const TensorF& batch, const AugmentConfig& config, Rng& rng) {
  if (batch.rank() != 4) throw ShapeError("augment: expected [N,C,H,W]");
  const Index n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const Index pad = config.crop_pad;
  if (pad < 0 || h < 2 * pad || w < 2 * pad) throw ShapeError("augment: spatial dims must be >= 2 * pad");
  Vector<float> out(batch.numel());
  std::vector<bool> coins(static_cast<std::size_t>(n), false);
  auto reflect = [](Index i, Index len) {
    if (i < 0) return -i;
    if (i >= len) return 2 * (len - 1) - i;
    return i;
  };
  for (Index i = 0; i < n; ++i) {
    const Index oy = pad > 0 ? rng.uniform_int(0, 2 * pad) - pad : 0;
    const Index ox = pad > 0 ? rng.uniform_int(0, 2 * pad) - pad : 0;
    if (config.hflip) coins[static_cast<std::size_t>(i)] = rng.coin();
    for (Index ch = 0; ch < c; ++ch) {
      const float* src = batch.data().data() + (i * c + ch) * h * w;
      float* dst = out.data() + (i * c + ch) * h * w;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) dst[y * w + x] = src[reflect(y + oy, h) * w + reflect(x + ox, w)];
    }
  }
  TensorF cropped(batch.shape(), std::move(out));
  return config.hflip ? hflip(cropped, coins) : cropped;
}

// ---------------------------------------------------------------------------

BatchIterator::BatchIterator(const Dataset& data, Index batch_size, std::uint64_t seed, bool shuffle)
    : data_(&data), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 1) throw std::invalid_argument("BatchIterator: batch size must be >= 1");
}

std::vector<Index> BatchIterator::order(std::int64_t epoch) const {
  std::vector<Index> idx(static_cast<std::size_t>(data_->size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (shuffle_) {
    Rng rng = Rng(seed_).fork(streams::shuffle).fork(static_cast<std::uint64_t>(epoch));
    std::shuffle(idx.begin(), idx.end(), rng.engine());
  }
  return idx;
}

Index BatchIterator::batch_count() const { return (data_->size() + batch_size_ - 1) / batch_size_; }

std::vector<Batch> BatchIterator::batches(std::int64_t epoch) const {
  const auto idx = order(epoch);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size_)) {
    const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(batch_size_));
    Dataset part = data_->take(std::vector<Index>(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                                  idx.begin() + static_cast<std::ptrdiff_t>(stop)));
    out.push_back({std::move(part.images), std::move(part.labels)});
  }
  return out;
}

// ---------------------------------------------------------------------------

DatasetKind parse_dataset_kind(std::string_view text) {
  if (text == "mnist") return DatasetKind::mnist;
  if (text == "cifar10") return DatasetKind::cifar10;
  if (text == "synthetic") return DatasetKind::synthetic;
  throw std::invalid_argument("unknown dataset '" + std::string(text) + "'");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::mnist: return "mnist";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "?";
}

DataSplits load_splits(const DataRequest& request) {
  DataSplits out;
  switch (request.kind) {
    case DatasetKind::synthetic:
      out.train = synth_shapes(request.train_size, 4, request.synth_image_size, request.seed, SynthOptions::hard());
      out.test = synth_shapes(request.test_size, 4, request.synth_image_size, request.seed + 0x5eed,
                              SynthOptions::hard());
      return out;
    case DatasetKind::mnist: {
      const auto& d = request.data_dir;
      out.train = load_mnist_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte");
      out.test = load_mnist_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte");
      break;
    }
    case DatasetKind::cifar10:
      out.train = load_cifar10_bin(request.data_dir, true);
      out.test = load_cifar10_bin(request.data_dir, false);
      break;
  }
  if (request.train_size > 0) out.train = out.train.head(request.train_size);
  if (request.test_size > 0) out.test = out.test.head(request.test_size);
  return out;
}

}  // namespace ckdsnn
