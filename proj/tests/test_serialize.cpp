#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "test_util.hpp"
#include "vitc/serialize.hpp"

using namespace vitc;
using namespace vitc::testing;

TEST(Serialize, HeaderLayout) {
  std::ostringstream os;
  write_tensor(os, Tensor::from_vector({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6}));
  const std::string b = os.str();
  ASSERT_EQ(b.size(), 4 + 2 + 1 + 1 + 2 * 8 + 6 * 4u);
  EXPECT_EQ(b.substr(0, 4), "VTCT");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(b[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(b[6]), 0);  // f32
  EXPECT_EQ(static_cast<unsigned char>(b[7]), 2);  // rank
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 2);  // first extent, low byte
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 3);
  float first;
  std::memcpy(&first, b.data() + 24, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(Serialize, RoundTripProperty) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> rank_dist(0, 4), extent(1, 5);
  for (int trial = 0; trial < 200; ++trial) {
    Shape s(rank_dist(rng));
    for (auto& e : s) e = extent(rng);
    const DType dt = trial % 2 ? DType::f64 : DType::f32;
    Tensor t = rand_tensor(s, rng, dt, -1e6, 1e6);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.dtype(), t.dtype());
    EXPECT_EQ(back.to_vector(), t.to_vector());
  }
}

TEST(Serialize, RejectsCorruptInput) {
  std::stringstream bad_magic("VTCX\x01\x00\x00\x00");
  EXPECT_THROW(read_tensor(bad_magic), FormatError);

  std::ostringstream os;
  write_tensor(os, Tensor::zeros({4}));
  std::string b = os.str();
  std::stringstream truncated(b.substr(0, b.size() - 1));
  EXPECT_THROW(read_tensor(truncated), FormatError);

  std::string wrong_version = b;
  wrong_version[4] = 9;
  std::stringstream wv(wrong_version);
  EXPECT_THROW(read_tensor(wv), FormatError);

  std::string wrong_dtype = b;
  wrong_dtype[6] = 7;
  std::stringstream wd(wrong_dtype);
  EXPECT_THROW(read_tensor(wd), FormatError);
}

TEST(Checkpoint, RoundTripThroughFile) {
  std::mt19937_64 rng(2);
  NamedTensors entries{{"encoder.block0.attn.qkv.weight", rand_tensor({3, 9}, rng, DType::f32)},
                       {"head.mla.classifier.bias", rand_tensor({5}, rng, DType::f64)},
                       {"unicode.\xc3\xa9", rand_tensor({}, rng)}};
  const auto path = std::filesystem::temp_directory_path() / "vitc_ckpt_test.ckpt";
  save_checkpoint(path, entries);
  const NamedTensors back = load_checkpoint(path);
  ASSERT_EQ(back.size(), entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EXPECT_EQ(back[i].first, entries[i].first);
    EXPECT_EQ(back[i].second.shape(), entries[i].second.shape());
    EXPECT_EQ(back[i].second.to_vector(), entries[i].second.to_vector());
  }
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::exception);
}
