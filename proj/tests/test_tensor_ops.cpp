#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "nlic/ops.hpp"
#include "test_helpers.hpp"

namespace {

using nlic::Shape;
using nlic::Tensor;
using nlic::testing::gradient_check;
using nlic::testing::probe;
using nlic::testing::random_tensor;

// Direct six-loop cross-correlation, written independently of the op.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b,
                               std::size_t stride, std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const auto HO = (H + 2 * pad - KH) / stride + 1, WO = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> out(B * O * HO * WO);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < HO; ++i)
        for (std::size_t j = 0; j < WO; ++j) {
          double acc = b.data()[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < KH; ++u)
              for (std::size_t v = 0; v < KW; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W))
                  continue;
                acc += w.data()[((o * C + c) * KH + u) * KW + v] *
                       x.data()[((n * C + c) * H + yy) * W + xx];
              }
          out[((n * O + o) * HO + i) * WO + j] = acc;
        }
  return out;
}

// Scatter-add definition of the transposed convolution.
std::vector<double> scatter_conv_t(const Tensor& x, const Tensor& w, const Tensor& b,
                                   std::size_t stride, std::size_t pad) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const auto HO = (H - 1) * stride + KH - 2 * pad, WO = (W - 1) * stride + KW - 2 * pad;
  std::vector<double> out(B * O * HO * WO, 0.0);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t k = 0; k < HO * WO; ++k) out[(n * O + o) * HO * WO + k] = b.data()[o];
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j)
            for (std::size_t u = 0; u < KH; ++u)
              for (std::size_t v = 0; v < KW; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(HO) || xx >= static_cast<long>(WO))
                  continue;
                out[((n * O + o) * HO + yy) * WO + xx] +=
                    x.data()[((n * C + c) * H + i) * W + j] *
                    w.data()[((c * O + o) * KH + u) * KW + v];
              }
    }
  return out;
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 3, 5, 4}, rng);
  Tensor w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.mutable_data()[c * 3 + c] = 1.0;
  Tensor b({3});
  Tensor y = nlic::conv2d(x, w, b);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelCountsNeighbours) {
  Tensor x({1, 1, 5, 5}, 1.0);
  Tensor w({1, 1, 3, 3}, 1.0);
  Tensor b({1});
  Tensor y = nlic::conv2d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  EXPECT_EQ(y.data()[2 * 5 + 2], 9.0);
  EXPECT_EQ(y.data()[0], 4.0);
  EXPECT_EQ(y.data()[4], 4.0);
  EXPECT_EQ(y.data()[24], 4.0);
  EXPECT_EQ(y.data()[1], 6.0);
}

TEST(Conv2d, AgreesWithNaiveLoops) {
  std::mt19937_64 rng(7);
  struct Case {
    std::size_t cin, cout, k, stride, pad;
  };
  for (const Case& c : {Case{3, 4, 3, 1, 1}, Case{2, 5, 3, 2, 1}, Case{4, 2, 5, 1, 2},
                        Case{3, 3, 1, 1, 0}, Case{2, 3, 5, 2, 0}}) {
    Tensor x = random_tensor({2, c.cin, 8, 8}, rng);
    Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
    Tensor b = random_tensor({c.cout}, rng);
    Tensor y = nlic::conv2d(x, w, b, c.stride, c.pad);
    auto ref = naive_conv(x, w, b, c.stride, c.pad);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-10);
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t stride = 1 + seed % 2;
    Tensor x = random_tensor({2, 3, 8, 8}, rng).set_requires_grad(true);
    Tensor w = random_tensor({4, 3, 3, 3}, rng).set_requires_grad(true);
    Tensor b = random_tensor({4}, rng).set_requires_grad(true);
    auto loss = [&] { return probe(nlic::conv2d(x, w, b, stride, 1)); };
    EXPECT_LT(gradient_check(loss, x), 1e-4) << "seed " << seed;
    EXPECT_LT(gradient_check(loss, w), 1e-4) << "seed " << seed;
    EXPECT_LT(gradient_check(loss, b), 1e-4) << "seed " << seed;
  }
}

TEST(Conv2d, ShapeMismatchNamesDimension) {
  Tensor x({1, 3, 6, 6});
  Tensor w({2, 4, 3, 3});
  Tensor b({2});
  try {
    nlic::conv2d(x, w, b, 1, 1);
    FAIL() << "expected ContractViolation";
  } catch (const nlic::ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
  EXPECT_THROW(nlic::conv2d(x, Tensor({2, 3, 2, 2}), b), nlic::ContractViolation);
  EXPECT_THROW(nlic::conv2d(x, Tensor({2, 3, 3, 3}), Tensor({3})), nlic::ContractViolation);
  EXPECT_THROW(nlic::conv2d(Tensor({3, 6, 6}), Tensor({2, 3, 3, 3}), b), nlic::ContractViolation);
}

TEST(Conv2dTransposed, UnitKernelIsIdentity) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({1, 2, 4, 3}, rng);
  Tensor w({2, 2, 1, 1});
  w.mutable_data()[0] = 1.0;
  w.mutable_data()[3] = 1.0;
  Tensor y = nlic::conv2d_transposed(x, w, Tensor({2}), 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2dTransposed, StrideTwoScatter) {
  Tensor x({1, 1, 2, 2}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  Tensor w({1, 1, 2, 2}, 1.0);
  Tensor b({1});
  Tensor y = nlic::conv2d_transposed(x, w, b, 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  auto ref = scatter_conv_t(x, w, b, 2, 0);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(y.data()[i], ref[i]);
  EXPECT_EQ(y.data()[0], 1.0);
  EXPECT_EQ(y.data()[3], 2.0);
  EXPECT_EQ(y.data()[15], 4.0);
}

TEST(Conv2dTransposed, AgreesWithScatterOracle) {
  std::mt19937_64 rng(11);
  struct Case {
    std::size_t cin, cout, k, stride, pad;
  };
  for (const Case& c : {Case{3, 2, 4, 2, 1}, Case{2, 3, 3, 1, 1}, Case{2, 2, 3, 2, 1},
                        Case{1, 2, 2, 2, 0}}) {
    Tensor x = random_tensor({2, c.cin, 5, 4}, rng);
    Tensor w = random_tensor({c.cin, c.cout, c.k, c.k}, rng);
    Tensor b = random_tensor({c.cout}, rng);
    Tensor y = nlic::conv2d_transposed(x, w, b, c.stride, c.pad);
    auto ref = scatter_conv_t(x, w, b, c.stride, c.pad);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-10);
  }
}

TEST(Conv2dTransposed, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Tensor x = random_tensor({2, 3, 4, 4}, rng).set_requires_grad(true);
    Tensor w = random_tensor({3, 2, 4, 4}, rng).set_requires_grad(true);
    Tensor b = random_tensor({2}, rng).set_requires_grad(true);
    auto loss = [&] { return probe(nlic::conv2d_transposed(x, w, b, 2, 1)); };
    EXPECT_LT(gradient_check(loss, x), 1e-4);
    EXPECT_LT(gradient_check(loss, w), 1e-4);
    EXPECT_LT(gradient_check(loss, b), 1e-4);
  }
}

TEST(MaskedConv2d, CentreAndLaterPositionsGiveBiasOnly) {
  std::mt19937_64 rng(5);
  for (std::size_t k : {5u, 7u}) {
    Tensor w = random_tensor({3, 2, k, k}, rng);
    Tensor b = random_tensor({3}, rng);
    const std::size_t pi = 2, pj = 3;
    Tensor x({1, 2, 6, 6});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j)
          if (i * 6 + j >= pi * 6 + pj) x.mutable_data()[(c * 6 + i) * 6 + j] = 1.0 + i + j;
    Tensor y = nlic::masked_conv2d(x, w, b, k);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.data()[(c * 6 + pi) * 6 + pj], b.data()[c]);
  }
}

TEST(MaskedConv2d, ExhaustivePerturbationIsStrictlyCausal) {
  for (std::size_t k : {5u, 7u}) {
    std::mt19937_64 rng(k);
    Tensor w = random_tensor({3, 4, k, k}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor x = random_tensor({1, 4, 6, 6}, rng);
    Tensor base = nlic::masked_conv2d(x, w, b, k);
    for (std::size_t p = 0; p < 36; ++p) {
      for (std::size_t c = 0; c < 4; ++c) {
        Tensor xp = x.detach();
        xp.mutable_data()[c * 36 + p] += 3.25;
        Tensor y = nlic::masked_conv2d(xp, w, b, k);
        for (std::size_t co = 0; co < 3; ++co)
          for (std::size_t q = 0; q < p; ++q)
            ASSERT_EQ(std::memcmp(&y.data()[co * 36 + q], &base.data()[co * 36 + q],
                                  sizeof(double)),
                      0)
                << "kernel " << k << " perturbed " << p << " changed " << q;
      }
    }
  }
}

TEST(MaskedConv2d, MaskedWeightsReceiveNoGradient) {
  std::mt19937_64 rng(9);
  for (std::size_t k : {5u, 7u}) {
    Tensor w = random_tensor({2, 3, k, k}, rng).set_requires_grad(true);
    Tensor b = random_tensor({2}, rng).set_requires_grad(true);
    Tensor x = random_tensor({2, 3, 6, 6}, rng).set_requires_grad(true);
    nlic::backward(probe(nlic::masked_conv2d(x, w, b, k)));
    const std::size_t c = k / 2;
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double g = w.grad()[((o * 3 + i) * k + ky) * k + kx];
            if (ky > c || (ky == c && kx >= c)) {
              EXPECT_EQ(g, 0.0);
            } else {
              EXPECT_NE(g, 0.0);
            }
          }
  }
}

TEST(MaskedConv2d, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(200 + seed);
    const std::size_t k = seed % 2 ? 5 : 7;
    Tensor x = random_tensor({1, 2, 6, 6}, rng).set_requires_grad(true);
    Tensor w = random_tensor({3, 2, k, k}, rng).set_requires_grad(true);
    Tensor b = random_tensor({3}, rng).set_requires_grad(true);
    auto loss = [&] { return probe(nlic::masked_conv2d(x, w, b, k)); };
    EXPECT_LT(gradient_check(loss, x), 1e-4);
    EXPECT_LT(gradient_check(loss, w), 1e-4);
    EXPECT_LT(gradient_check(loss, b), 1e-4);
  }
}

TEST(MaskedConv2d, RejectsUnsupportedKernel) {
  EXPECT_THROW(nlic::masked_conv2d(Tensor({1, 1, 6, 6}), Tensor({1, 1, 3, 3}), Tensor({1}), 3),
               nlic::ConfigError);
}

TEST(ConvPoint, MatchesTensorPassBitForBit) {
  std::mt19937_64 rng(17);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    const auto mask = k >= 5 ? nlic::TapMask::kCausal : nlic::TapMask::kNone;
    Tensor x = random_tensor({1, 3, 7, 5}, rng);
    Tensor w = random_tensor({4, 3, k, k}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor y = mask == nlic::TapMask::kCausal ? nlic::masked_conv2d(x, w, b, k)
                                              : nlic::conv2d(x, w, b, 1, k / 2);
    for (std::size_t co = 0; co < 4; ++co)
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          const double v = nlic::conv_point(x.data(), 3, 7, 5, w, b, co, i, j, mask);
          ASSERT_EQ(std::memcmp(&v, &y.data()[(co * 7 + i) * 5 + j], sizeof(double)), 0);
        }
  }
}

TEST(Elementwise, KnownValues) {
  Tensor z({1}, 0.0);
  EXPECT_EQ(nlic::sigmoid(z).item(), 0.5);
  std::vector<double> xs;
  for (double v = -700.0; v <= 700.0; v += 3.7) xs.push_back(v);
  Tensor x({xs.size()}, xs);
  Tensor sp = nlic::softplus(x);
  for (double v : sp.data()) EXPECT_GT(v, 0.0);
  Tensor neg({2}, std::vector<double>{-1.0, 2.0});
  auto lr = nlic::leaky_relu(neg);
  EXPECT_DOUBLE_EQ(lr.data()[0], -0.2);
  EXPECT_EQ(lr.data()[1], 2.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  using Fn = std::function<Tensor(const Tensor&)>;
  const std::vector<std::pair<const char*, Fn>> unary = {
      {"leaky_relu", [](const Tensor& t) { return nlic::leaky_relu(t); }},
      {"sigmoid", [](const Tensor& t) { return nlic::sigmoid(t); }},
      {"tanh", [](const Tensor& t) { return nlic::tanh(t); }},
      {"exp", [](const Tensor& t) { return nlic::exp(t); }},
      {"softplus", [](const Tensor& t) { return nlic::softplus(t); }},
      {"log", [](const Tensor& t) { return nlic::log(nlic::add_scalar(nlic::square(t), 0.5)); }},
      {"square", [](const Tensor& t) { return nlic::square(t); }},
      {"scale", [](const Tensor& t) { return nlic::scale(t, -1.7); }},
  };
  for (const auto& [name, fn] : unary) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      Tensor x = random_tensor({2, 3, 4}, rng, -2.0, 2.0).set_requires_grad(true);
      // Keep leaky_relu away from its kink.
      for (auto& v : x.mutable_data())
        if (std::fabs(v) < 1e-3) v = 0.5;
      auto loss = [&] { return probe(fn(x)); };
      EXPECT_LT(gradient_check(loss, x), 1e-4) << name << " seed " << seed;
    }
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 50);
    Tensor a = random_tensor({2, 3, 2, 2}, rng).set_requires_grad(true);
    Tensor b = random_tensor({2, 3, 2, 2}, rng).set_requires_grad(true);
    Tensor c = random_tensor({3}, rng).set_requires_grad(true);
    auto loss = [&] {
      return probe(nlic::add(nlic::mul(nlic::sub(a, b), nlic::add(a, b)), c));
    };
    EXPECT_LT(gradient_check(loss, a), 1e-4);
    EXPECT_LT(gradient_check(loss, b), 1e-4);
    EXPECT_LT(gradient_check(loss, c), 1e-4);
  }
}

TEST(Elementwise, NanGuardRejectsDomainViolations) {
  const bool saved = nlic::nan_guard_enabled();
  nlic::nan_guard_enabled() = true;
  EXPECT_THROW(nlic::log(Tensor({2}, std::vector<double>{1.0, -1.0})), nlic::NumericError);
  EXPECT_THROW(nlic::log(Tensor({1}, 0.0)), nlic::NumericError);
  EXPECT_THROW(nlic::exp(Tensor({1}, 1000.0)), nlic::NumericError);
  nlic::nan_guard_enabled() = saved;
}

TEST(SoftmaxChannelGroups, Contract) {
  Tensor equal({1, 6, 2, 2}, 0.3);
  Tensor sm = nlic::softmax_channel_groups(equal, 3);
  for (double v : sm.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  // Group members of channel 0 with K=3, C=1 are channels 0, 1, 2.
  Tensor limit({1, 3, 1, 1}, std::vector<double>{0.0, 0.0, 60.0});
  auto y = nlic::softmax_channel_groups(limit, 3);
  EXPECT_LT(y.data()[0], 1e-25);
  EXPECT_LT(y.data()[1], 1e-25);
  EXPECT_NEAR(y.data()[2], 1.0, 1e-15);

  EXPECT_THROW(nlic::softmax_channel_groups(Tensor({1, 7, 2, 2}), 3), nlic::ConfigError);
}

TEST(SoftmaxChannelGroups, GroupsSumToOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({2, 12, 3, 3}, rng, -30.0, 30.0);
    auto y = nlic::softmax_channel_groups(x, 3);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t s = 0; s < 9; ++s) {
          double total = 0.0;
          for (std::size_t k = 0; k < 3; ++k) {
            const double v = y.data()[(b * 12 + k * 4 + c) * 9 + s];
            EXPECT_GT(v, 0.0);
            total += v;
          }
          EXPECT_NEAR(total, 1.0, 1e-9);
        }
  }
}

TEST(SoftmaxChannelGroups, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 300);
    Tensor x = random_tensor({2, 6, 2, 3}, rng, -2.0, 2.0).set_requires_grad(true);
    auto loss = [&] { return probe(nlic::softmax_channel_groups(x, 3)); };
    EXPECT_LT(gradient_check(loss, x), 1e-4);
    auto loss2 = [&] { return probe(nlic::sum_channel_groups(x, 2)); };
    EXPECT_LT(gradient_check(loss2, x), 1e-4);
  }
}

TEST(Reshaping, ConcatAndSliceGradients) {
  std::mt19937_64 rng(21);
  Tensor a = random_tensor({2, 2, 3, 3}, rng).set_requires_grad(true);
  Tensor b = random_tensor({2, 3, 3, 3}, rng).set_requires_grad(true);
  auto loss = [&] {
    auto cat = nlic::concat_channels({a, b});
    return probe(nlic::mul(nlic::slice_channels(cat, 1, 4), nlic::slice_channels(cat, 2, 5)));
  };
  EXPECT_LT(gradient_check(loss, a), 1e-4);
  EXPECT_LT(gradient_check(loss, b), 1e-4);
  EXPECT_THROW(nlic::concat_channels({a, Tensor({2, 1, 2, 3})}), nlic::ContractViolation);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 4}, rng).set_requires_grad(true);
  nlic::backward(nlic::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({5}, rng).set_requires_grad(true);
  nlic::backward(nlic::sum(nlic::square(x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({1, 2, 6, 6}, rng).set_requires_grad(true);
  Tensor w = random_tensor({3, 2, 3, 3}, rng).set_requires_grad(true);
  Tensor b = random_tensor({3}, rng).set_requires_grad(true);
  auto loss = [&] { return nlic::sum(nlic::leaky_relu(nlic::conv2d(x, w, b, 1, 1))); };
  EXPECT_LT(gradient_check(loss, x), 1e-4);
  EXPECT_LT(gradient_check(loss, w), 1e-4);
}

TEST(Backward, RejectsNonScalarAndSecondCall) {
  Tensor x({3}, 1.0);
  x.set_requires_grad(true);
  EXPECT_THROW(nlic::backward(nlic::square(x)), nlic::ContractViolation);
  Tensor loss = nlic::sum(nlic::square(x));
  nlic::backward(loss);
  EXPECT_THROW(nlic::backward(loss), nlic::ContractViolation);
  // A fresh forward pass works again and accumulates into the leaf.
  nlic::backward(nlic::sum(nlic::square(x)));
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Backward, GraphIsTopologicalAndVisitsEachNodeOnce) {
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  Tensor y = nlic::square(x);
  Tensor loss = nlic::sum(nlic::add(nlic::mul(y, y), y));  // y shared three times
  auto records = nlic::trace_graph(loss);
  ASSERT_EQ(records.size(), 5u);  // x, y, mul, add, sum
  for (std::size_t i = 0; i < records.size(); ++i)
    for (auto in : records[i].inputs) EXPECT_LT(in, i);
  EXPECT_EQ(records.back().op, "sum");
  nlic::backward(loss);
  // d/dx (x^4 + x^2) = 4x^3 + 2x = 6 at x = 1
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

}  // namespace
