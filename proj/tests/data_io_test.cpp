#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <zlib.h>

#include "helpers.hpp"

using namespace robustcert;
namespace fs = std::filesystem;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("robustcert_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& bytes, bool gzip = false) {
    const fs::path p = dir_ / name;
    if (gzip) {
      gzFile f = gzopen(p.string().c_str(), "wb");
      gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
      gzclose(f);
    } else {
      std::ofstream(p, std::ios::binary) << bytes;
    }
    return p;
  }

  // Two 2x2 images with pixel bytes {0, 255, 51, 102} and {1, 2, 3, 4}.
  std::string images(std::uint32_t count = 2, std::uint32_t magic = 0x803) {
    std::string s = be32(magic) + be32(count) + be32(2) + be32(2);
    for (unsigned char b : {0, 255, 51, 102, 1, 2, 3, 4}) s += static_cast<char>(b);
    return s;
  }
  std::string labels(std::uint32_t count = 2) { return be32(0x801) + be32(count) + std::string{7, 3}; }

  fs::path dir_;
};

}  // namespace

using DataIo = TempDir;

TEST_F(DataIo, IdxScalesBytesIntoUnitInterval) {
  const Dataset d = load_idx(write("i", images()), write("l", labels()));
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.dim(), 4);
  EXPECT_EQ(d.inputs(0, 1), 1.0);
  EXPECT_EQ(d.inputs(0, 2), 0.2);
  EXPECT_EQ(d.labels, (std::vector<int>{7, 3}));
  EXPECT_EQ(d.num_classes, 10);
  ASSERT_TRUE(d.domain);
}

TEST_F(DataIo, IdxReadsGzipAndHonorsLimit) {
  const Dataset d = load_idx(write("i.gz", images(), true), write("l.gz", labels(), true), 1);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.inputs(0, 3), 0.4);
}

TEST_F(DataIo, IdxRejectsBadMagicCountsAndTruncation) {
  EXPECT_THROW(load_idx(write("i", images(2, 0x801)), write("l", labels())), FormatError);
  EXPECT_THROW(load_idx(write("i", images()), write("l", labels(3))), FormatError);
  EXPECT_THROW(load_idx(write("i", images().substr(0, 20)), write("l", labels())), FormatError);
  EXPECT_THROW(load_idx(dir_ / "missing", write("l", labels())), Error);
}

TEST_F(DataIo, CsvRoundTripIsExact) {
  Dataset d;
  d.inputs = Matrix{{0.1, 1.0 / 3.0}, {-2.5e-7, 4.0}};
  d.labels = {1, 0};
  d.num_classes = 2;
  const fs::path p = dir_ / "d.csv";
  save_csv(d, p);
  const Dataset r = load_csv(p);
  EXPECT_EQ(r.inputs, d.inputs);
  EXPECT_EQ(r.labels, d.labels);
  EXPECT_EQ(r.num_classes, 2);
  EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
}

TEST_F(DataIo, CsvRejectsMalformedRows) {
  EXPECT_THROW(dataset_from_csv("x0,x1,label\n0.1,0.2\n"), FormatError);
  EXPECT_THROW(dataset_from_csv("x0,x1,label\n0.1,abc,1\n"), FormatError);
  EXPECT_THROW(dataset_from_csv("a,b\n1,2\n"), FormatError);
  EXPECT_THROW(dataset_from_csv(""), FormatError);
}

TEST(Gen2d, SeparatedAndDeterministic) {
  const Dataset a = gen_2d(7), b = gen_2d(7), c = gen_2d(8);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.inputs, c.inputs);
  ASSERT_EQ(a.size(), 12u);
  for (Eigen::Index i = 0; i < 12; ++i) {
    EXPECT_GE(a.inputs.row(i).minCoeff(), 0.0);
    EXPECT_LE(a.inputs.row(i).maxCoeff(), 1.0);
    for (Eigen::Index j = 0; j < i; ++j)
      EXPECT_GE((a.inputs.row(i) - a.inputs.row(j)).lpNorm<Eigen::Infinity>(), 0.16);
  }
}

TEST(Gen2d, ImpossibleSeparationFails) { EXPECT_THROW(gen_2d(1, 100, 0.5, 10000), InvalidArgument); }

TEST(Dataset, ValidateAndSlice) {
  Dataset d;
  d.inputs = Matrix::Zero(3, 2);
  d.labels = {0, 1, 2};
  d.num_classes = 2;
  EXPECT_THROW(d.validate(), InvalidArgument);
  d.num_classes = 3;
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(d.slice(1, 2).labels, (std::vector<int>{1, 2}));
  EXPECT_THROW(d.slice(2, 2), InvalidArgument);
}

TEST(Rng, SubstreamsAreIndependentAndReproducible) {
  Rng a = substream(1, "a"), a2 = substream(1, "a"), b = substream(1, "b"), c = substream(2, "a");
  const auto va = a();
  EXPECT_EQ(va, a2());
  EXPECT_NE(va, b());
  EXPECT_NE(va, c());
}
