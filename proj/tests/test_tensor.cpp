#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "oracles.hpp"
#include "sparsepool/spt4.hpp"
#include "sparsepool/tensor.hpp"

using namespace sparsepool;

TEST(Tensor4, RejectsZeroDimensions) {
  EXPECT_THROW(Tensor4<float>(Shape4{1, 0, 2, 2}), ShapeError);
  EXPECT_THROW(Tensor4<float>(Shape4{0, 1, 1, 1}), ShapeError);
  EXPECT_NO_THROW(Tensor4<float>(Shape4{1, 1, 1, 1}));
}

TEST(Tensor4, DataLengthMatchesShape) {
  Tensor4<double> t(Shape4{2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  EXPECT_THROW(Tensor4<double>::from_values(Shape4{1, 1, 2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor4, RejectsNonFiniteValues) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(Tensor4<double>::from_values(Shape4{1, 1, 1, 2}, {0.0, nan}), NumericError);
  EXPECT_THROW(Tensor4<double>::from_values(Shape4{1, 1, 1, 2}, {inf, 0.0}), NumericError);
}

TEST(Tensor4, IndexIsRowMajor) {
  Tensor4<double> t(Shape4{2, 3, 4, 5});
  EXPECT_EQ(t.index(1, 2, 3, 4), 119u);
  EXPECT_EQ(t.index(0, 1, 0, 0), 20u);
}

TEST(ChannelStats, ConstantChannel) {
  auto x = Tensor4<double>::from_values(Shape4{1, 1, 2, 2}, {3, 3, 3, 3});
  const auto s = channel_stats(x, 2.0);
  EXPECT_EQ(s.mean[0], 3.0);
  EXPECT_EQ(s.stddev[0], 0.0);
  EXPECT_EQ(s.threshold[0], 3.0);
}

TEST(ChannelStats, SingleSpikeExample) {
  auto x = Tensor4<double>::from_values(Shape4{1, 1, 2, 4}, {0, 0, 0, 0, 0, 0, 0, 8});
  const auto s = channel_stats(x, 2.0);
  // mean 8/8 = 1; variance (7 * 1 + 49) / 8 = 7
  EXPECT_DOUBLE_EQ(s.mean[0], 1.0);
  EXPECT_NEAR(s.stddev[0], std::sqrt(7.0), 1e-15);
  EXPECT_NEAR(s.threshold[0], 1.0 + 2.0 * std::sqrt(7.0), 1e-14);
  EXPECT_NEAR(s.threshold[0], 6.291503, 1e-6);
}

TEST(ChannelStats, LambdaZeroGivesMean) {
  const auto x = oracle::random_tensor(Shape4{3, 4, 5, 6}, 11);
  const auto s = channel_stats(x, 0.0);
  for (std::size_t i = 0; i < s.mean.size(); ++i) EXPECT_EQ(s.threshold[i], s.mean[i]);
}

TEST(ChannelStats, ThresholdIsMeanPlusLambdaStd) {
  const auto x = oracle::random_tensor(Shape4{2, 3, 4, 4}, 5);
  const auto s = channel_stats(x, 1.7);
  for (std::size_t i = 0; i < s.mean.size(); ++i) {
    EXPECT_EQ(s.threshold[i], s.mean[i] + 1.7 * s.stddev[i]);
    EXPECT_GE(s.stddev[i], 0.0);
  }
}

TEST(ChannelStats, MatchesTwoPassOracleOnLargeTensors) {
  const auto x = oracle::random_tensor(Shape4{8, 64, 32, 32}, 3, -5.0, 20.0);
  const auto s = channel_stats(x, 2.0);
  for (std::size_t n = 0; n < 8; ++n) {
    for (std::size_t c = 0; c < 64; ++c) {
      const auto v = oracle::channel(x, n, c);
      const double m = oracle::mean(v), sd = oracle::pop_std(v);
      EXPECT_LE(std::abs(s.mean[s.at(n, c)] - m), 1e-10 * std::abs(m));
      EXPECT_LE(std::abs(s.stddev[s.at(n, c)] - sd), 1e-10 * sd);
    }
  }
}

TEST(ChannelStats, ThresholdMonotoneInLambda) {
  const auto x = oracle::random_tensor(Shape4{2, 5, 3, 3}, 9);
  const auto a = channel_stats(x, 0.5), b = channel_stats(x, 1.0), c = channel_stats(x, 3.0);
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    EXPECT_LE(a.threshold[i], b.threshold[i]);
    EXPECT_LE(b.threshold[i], c.threshold[i]);
  }
}

TEST(ChannelStats, PositivelyHomogeneous) {
  const auto x = oracle::random_tensor(Shape4{2, 3, 6, 6}, 21);
  Tensor4<double> y = x;
  for (auto& v : y.data()) v *= 4.0;  // a power of two keeps the scaling exact
  const auto sx = channel_stats(x, 2.0), sy = channel_stats(y, 2.0);
  for (std::size_t i = 0; i < sx.mean.size(); ++i) {
    EXPECT_NEAR(sy.mean[i], 4.0 * sx.mean[i], 1e-13);
    EXPECT_NEAR(sy.stddev[i], 4.0 * sx.stddev[i], 1e-13);
    EXPECT_NEAR(sy.threshold[i], 4.0 * sx.threshold[i], 1e-13);
  }
}

TEST(ChannelStats, RejectsNonFiniteLambda) {
  const auto x = oracle::random_tensor(Shape4{1, 1, 2, 2}, 1);
  EXPECT_THROW(channel_stats(x, std::numeric_limits<double>::infinity()), ConfigError);
}

TEST(ReduceSpatialMean, Examples) {
  Tensor4<double> ones(Shape4{1, 1, 4, 4}, 1.0);
  EXPECT_EQ(reduce_spatial_mean(ones)(0, 0), 1.0);
  auto x = Tensor4<double>::from_values(Shape4{1, 1, 2, 2}, {0, 0, 0, 8});
  EXPECT_EQ(reduce_spatial_mean(x)(0, 0), 2.0);
}

TEST(ReduceSpatialMean, MatchesOracle) {
  const auto x = oracle::random_tensor(Shape4{2, 3, 5, 5}, 8);
  const auto m = reduce_spatial_mean(x);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_NEAR(m(n, c), oracle::mean(oracle::channel(x, n, c)), 1e-12);
}

TEST(ReduceSpatialMean, ShiftEquivariant) {
  const auto x = oracle::random_tensor(Shape4{2, 3, 5, 5}, 12);
  Tensor4<double> y = x;
  for (auto& v : y.data()) v += 2.5;
  const auto mx = reduce_spatial_mean(x), my = reduce_spatial_mean(y);
  for (std::size_t i = 0; i < mx.size(); ++i) EXPECT_NEAR(my.data()[i], mx.data()[i] + 2.5, 1e-12);
}

TEST(ReduceSpatialMax, FirstMaximumWins) {
  auto x = Tensor4<double>::from_values(Shape4{1, 1, 2, 2}, {1, 5, 5, 2});
  const auto r = reduce_spatial_max(x);
  EXPECT_EQ(r.values(0, 0), 5.0);
  EXPECT_EQ(r.argmax[0], 1u);
  Tensor4<double> c(Shape4{1, 1, 3, 3}, -2.0);
  EXPECT_EQ(reduce_spatial_max(c).values(0, 0), -2.0);
  EXPECT_EQ(reduce_spatial_max(c).argmax[0], 0u);
}

TEST(ReduceSpatialMax, MatchesOracle) {
  const auto x = oracle::random_tensor(Shape4{3, 4, 5, 6}, 13);
  const auto r = reduce_spatial_max(x);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 4; ++c) {
      const auto v = oracle::channel(x, n, c);
      EXPECT_EQ(r.values(n, c), oracle::max_pool(v));
      EXPECT_EQ(v[r.argmax[n * 4 + c]], oracle::max_pool(v));
    }
}

TEST(Spt4, RoundTripsBothDtypes) {
  const auto x = oracle::random_tensor(Shape4{2, 3, 4, 5}, 4);
  std::stringstream ss;
  write_spt4(ss, x);
  const auto back = read_spt4(ss);
  EXPECT_EQ(back.dtype, Dtype::F64);
  EXPECT_EQ(back.tensor.shape(), x.shape());
  EXPECT_EQ(back.tensor.values(), x.values());

  const auto xf = tensor_cast<float>(x);
  std::stringstream sf;
  write_spt4(sf, xf);
  const auto backf = read_spt4(sf);
  EXPECT_EQ(backf.dtype, Dtype::F32);
  for (std::size_t i = 0; i < xf.size(); ++i) {
    EXPECT_EQ(backf.tensor.data()[i], static_cast<double>(xf.data()[i]));
  }
}

TEST(Spt4, HeaderLayoutIsLittleEndian) {
  Tensor4<float> x(Shape4{1, 2, 3, 4}, 1.0f);
  std::stringstream ss;
  write_spt4(ss, x);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 4u + 2 + 16 + 1 + 24 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "SPT4");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);   // N
  EXPECT_EQ(bytes[10], 2);  // C
  EXPECT_EQ(bytes[14], 3);  // H
  EXPECT_EQ(bytes[18], 4);  // W
  EXPECT_EQ(bytes[22], 0);  // f32
}

TEST(Spt4, RejectsMalformedInput) {
  auto bad = [](std::string s) {
    std::stringstream ss(s);
    return read_spt4(ss);
  };
  EXPECT_THROW(bad("XXXX"), IoError);
  Tensor4<float> x(Shape4{1, 1, 1, 2}, 1.0f);
  std::stringstream ss;
  write_spt4(ss, x);
  std::string good = ss.str();
  std::string v2 = good;
  v2[4] = 2;
  EXPECT_THROW(bad(v2), IoError);
  std::string tag = good;
  tag[22] = 7;
  EXPECT_THROW(bad(tag), IoError);
  EXPECT_THROW(bad(good.substr(0, good.size() - 1)), IoError);
  EXPECT_THROW(bad(good + "x"), IoError);
  std::string zero = good;
  zero[6] = 0;
  EXPECT_THROW(bad(zero), IoError);
}
