#include "ckdsnn/data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace ckdsnn;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& f) const { return path_ / f; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

std::vector<unsigned char> concat(std::initializer_list<std::vector<unsigned char>> parts) {
  std::vector<unsigned char> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Two 2x3 images and their labels, laid out byte by byte.
void write_idx_fixture(const TempDir& dir, std::uint32_t image_magic = 0x803, std::uint32_t label_count = 2,
                       unsigned char second_label = 7, std::size_t drop_pixels = 0) {
  std::vector<unsigned char> px{0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0};
  px.resize(px.size() - drop_pixels);
  write_bytes(dir / "img", concat({be32(image_magic), be32(2), be32(2), be32(3), px}));
  std::vector<unsigned char> labels{3, second_label};
  labels.resize(label_count);
  write_bytes(dir / "lab", concat({be32(0x801), be32(label_count), labels}));
}

DataError::Kind idx_error(const TempDir& dir) {
  try {
    load_mnist_idx(dir / "img", dir / "lab");
  } catch (const DataError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected DataError";
  return DataError::Kind::io;
}

}  // namespace

TEST(Idx, ReadsHandWrittenFixture) {
  TempDir dir("ckdsnn_idx_ok");
  write_idx_fixture(dir);
  const auto d = load_mnist_idx(dir / "img", dir / "lab");
  ASSERT_EQ(d.images.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(d.labels, (std::vector<int>{3, 7}));
  EXPECT_EQ(d.num_classes, 10);
  EXPECT_FLOAT_EQ(d.images[1], 0.2f);
  EXPECT_FLOAT_EQ(d.images[5], 1.0f);
  EXPECT_FLOAT_EQ(d.images[7], 0.0f);
}

TEST(Idx, RoundTripIsExact) {
  TempDir dir("ckdsnn_idx_rt");
  write_idx_fixture(dir);
  const auto d = load_mnist_idx(dir / "img", dir / "lab");
  write_mnist_idx(d, dir / "img2", dir / "lab2");
  const auto again = load_mnist_idx(dir / "img2", dir / "lab2");
  EXPECT_EQ(again.images.data(), d.images.data());
  EXPECT_EQ(again.labels, d.labels);
}

TEST(Idx, MalformedFilesGiveDistinctErrors) {
  TempDir dir("ckdsnn_idx_bad");
  write_idx_fixture(dir, 0x804);
  EXPECT_EQ(idx_error(dir), DataError::Kind::bad_magic);
  write_idx_fixture(dir, 0x803, 1);
  EXPECT_EQ(idx_error(dir), DataError::Kind::count_mismatch);
  write_idx_fixture(dir, 0x803, 2, 7, 3);
  EXPECT_EQ(idx_error(dir), DataError::Kind::truncated);
  write_idx_fixture(dir, 0x803, 2, 10);
  EXPECT_EQ(idx_error(dir), DataError::Kind::label_out_of_range);
  write_bytes(dir / "img", {0, 0});
  EXPECT_EQ(idx_error(dir), DataError::Kind::truncated);
  fs::remove(dir / "img");
  EXPECT_EQ(idx_error(dir), DataError::Kind::io);
}

TEST(Cifar, ReadsHandWrittenRecords) {
  TempDir dir("ckdsnn_cifar_ok");
  std::vector<unsigned char> bytes;
  for (unsigned char label : {9, 0}) {
    bytes.push_back(label);
    for (int p = 0; p < 3072; ++p) bytes.push_back(static_cast<unsigned char>((p * 7 + label) % 256));
  }
  write_bytes(dir / "data_batch_1.bin", bytes);
  const auto d = load_cifar10_file(dir / "data_batch_1.bin");
  ASSERT_EQ(d.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(d.labels, (std::vector<int>{9, 0}));
  // planar layout: record 0, green plane, pixel (0, 1)
  EXPECT_FLOAT_EQ(d.images[1024 + 1], static_cast<float>((1025 * 7 + 9) % 256) / 255.0f);

  write_cifar10_bin(d, dir / "copy.bin");
  const auto again = load_cifar10_file(dir / "copy.bin");
  EXPECT_EQ(again.images.data(), d.images.data());
  EXPECT_EQ(again.labels, d.labels);

  fs::create_directories(dir.path() / "cifar-10-batches-bin");
  fs::copy_file(dir / "copy.bin", dir.path() / "cifar-10-batches-bin" / "test_batch.bin");
  EXPECT_EQ(load_cifar10_bin(dir.path(), false).size(), 2);
}

TEST(Cifar, MalformedFilesGiveDistinctErrors) {
  TempDir dir("ckdsnn_cifar_bad");
  auto kind_of = [&](const std::vector<unsigned char>& bytes) {
    write_bytes(dir / "b.bin", bytes);
    try {
      load_cifar10_file(dir / "b.bin");
    } catch (const DataError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "expected DataError";
    return DataError::Kind::io;
  };
  EXPECT_EQ(kind_of(std::vector<unsigned char>(3073 + 5, 0)), DataError::Kind::bad_size);
  EXPECT_EQ(kind_of({}), DataError::Kind::bad_size);
  std::vector<unsigned char> rec(3073, 0);
  rec[0] = 255;
  EXPECT_EQ(kind_of(rec), DataError::Kind::label_out_of_range);
  rec[0] = 10;
  EXPECT_EQ(kind_of(rec), DataError::Kind::label_out_of_range);
  EXPECT_THROW(load_cifar10_bin(dir.path() / "missing", true), DataError);
}

TEST(Synth, DeterministicAndBalanced) {
  const auto a = synth_shapes(40, 4, 16, 7, SynthOptions::hard());
  const auto b = synth_shapes(40, 4, 16, 7, SynthOptions::hard());
  EXPECT_EQ(a.images.data(), b.images.data());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(synth_shapes(40, 4, 16, 8, SynthOptions::hard()).images.data(), a.images.data());

  const auto four = synth_shapes(4, 4, 16, 1);
  EXPECT_EQ(four.labels, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_GE(a.images.data().minCoeff(), 0.0f);
  EXPECT_LE(a.images.data().maxCoeff(), 1.0f);
}

TEST(Synth, TrivialShapesAreDistinct) {
  const auto d = synth_shapes(4, 4, 16, 0, SynthOptions::trivial());
  const Index px = 16 * 16;
  for (Index i = 0; i < 4; ++i)
    for (Index j = i + 1; j < 4; ++j) {
      EXPECT_GT((d.images.data().segment(i * px, px) - d.images.data().segment(j * px, px)).norm(), 1.0f);
    }
}

TEST(Augment, IdentityCases) {
  Rng rng(4);
  const auto d = synth_shapes(6, 4, 8, 3);
  AugmentConfig off{0, false};
  EXPECT_EQ(augment(d.images, off, rng).data(), d.images.data());
  EXPECT_EQ(hflip(d.images, std::vector<bool>(6, false)).data(), d.images.data());
  const auto twice = hflip(hflip(d.images, std::vector<bool>(6, true)), std::vector<bool>(6, true));
  EXPECT_EQ(twice.data(), d.images.data());
  EXPECT_EQ(augment(d.images, AugmentConfig{}, rng).shape(), d.images.shape());
}

TEST(Augment, FlipMirrorsRows) {
  const TensorF x(Shape{1, 1, 1, 3}, {1, 2, 3});
  const auto y = hflip(x, {true});
  EXPECT_EQ(y[0], 3.0f);
  EXPECT_EQ(y[2], 1.0f);
}

TEST(Batches, ShuffleIsPermutationAndDeterministic) {
  const auto d = synth_shapes(37, 4, 8, 0);
  const BatchIterator it(d, 8, 11);
  EXPECT_EQ(it.batch_count(), 5);
  for (int epoch = 0; epoch < 3; ++epoch) {
    auto order = it.order(epoch);
    EXPECT_EQ(order, it.order(epoch));
    std::sort(order.begin(), order.end());
    for (Index i = 0; i < 37; ++i) ASSERT_EQ(order[static_cast<std::size_t>(i)], i);
  }
  EXPECT_NE(it.order(0), it.order(1));
  const auto batches = it.batches(0);
  Index total = 0;
  for (const auto& b : batches) total += static_cast<Index>(b.labels.size());
  EXPECT_EQ(total, 37);
  EXPECT_EQ(batches.back().labels.size(), 5u);
  EXPECT_THROW(BatchIterator(d, 0, 1), std::invalid_argument);
}

TEST(Normalize, FitGivesZeroMeanUnitStd) {
  const auto d = synth_shapes(50, 4, 8, 2, SynthOptions::hard());
  const auto n = Normalizer::fit(d);
  const auto z = n.apply(d.images);
  EXPECT_NEAR(z.data().cast<double>().mean(), 0.0, 1e-4);
  EXPECT_NEAR(std::sqrt(z.data().cast<double>().array().square().mean()), 1.0, 1e-3);
}

TEST(Splits, SyntheticRequest) {
  DataRequest req;
  req.train_size = 20;
  req.test_size = 8;
  req.synth_image_size = 12;
  const auto s = load_splits(req);
  EXPECT_EQ(s.train.size(), 20);
  EXPECT_EQ(s.test.size(), 8);
  EXPECT_EQ(s.train.height(), 12);
  EXPECT_NE(s.train.images.data().head(144), s.test.images.data().head(144));
  EXPECT_THROW(parse_dataset_kind("imagenet"), std::invalid_argument);
}
