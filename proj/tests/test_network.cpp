#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "nlic/network.hpp"
#include "test_helpers.hpp"

namespace {

using nlic::ModelConfig;
using nlic::ModelWeights;
using nlic::Tensor;
using nlic::testing::random_tensor;

ModelConfig small_config() {
  ModelConfig c;
  c.filters_n = 8;
  c.mixtures_k = 2;
  return c;
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Nonzero masked-kernel values on every tap, so causality is not satisfied
// trivially by the initial zero ring.
void randomize(ModelWeights& w, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  for (auto& [key, t] : w.tensors) {
    if (key == "prior.psi") continue;
    t = random_tensor(t.shape(), rng, -scale, scale);
  }
}

TEST(Network, ShapeChainDefaults) {
  const auto w = nlic::init_weights(ModelConfig{}, 1);
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 3, 16, 16}, rng);
  Tensor y = nlic::analysis(w, x);
  EXPECT_EQ(y.shape(), (nlic::Shape{1, 32, 4, 4}));
  Tensor z = nlic::hyper_analysis(w, y);
  EXPECT_EQ(z.shape(), (nlic::Shape{1, 32, 1, 1}));
  Tensor hyper = nlic::hyper_synthesis(w, z);
  EXPECT_EQ(hyper.shape(), (nlic::Shape{1, 64, 4, 4}));
  Tensor pf = nlic::synthesis(w, y);
  EXPECT_EQ(pf.shape(), (nlic::Shape{1, 32, 16, 16}));
  const auto py = nlic::entropy_params_y(w, hyper, y);
  EXPECT_EQ(py.weights.shape(), (nlic::Shape{1, 3 * 32, 4, 4}));
  const auto px = nlic::entropy_params_x(w, pf, x);
  EXPECT_EQ(px.scales.shape(), (nlic::Shape{1, 3 * 3, 16, 16}));
}

TEST(Network, IndivisibleInputIsRejected) {
  const auto w = nlic::init_weights(small_config(), 1);
  EXPECT_THROW(nlic::analysis(w, Tensor({1, 3, 12, 16})), nlic::ContractViolation);
  EXPECT_THROW(nlic::analysis(w, Tensor({1, 4, 16, 16})), nlic::ContractViolation);
  EXPECT_THROW(nlic::hyper_analysis(w, Tensor({1, 8, 2, 4})), nlic::ContractViolation);
  EXPECT_THROW(nlic::entropy_params_y(w, Tensor({1, 16, 4, 4}), Tensor({1, 8, 4, 2})),
               nlic::ContractViolation);
}

TEST(Network, Deterministic) {
  const auto a = nlic::init_weights(ModelConfig{}, 7);
  const auto b = nlic::init_weights(ModelConfig{}, 7);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), nlic::init_weights(ModelConfig{}, 8).hash());
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({1, 3, 16, 16}, rng);
  EXPECT_TRUE(bit_equal(nlic::analysis(a, x).data(), nlic::analysis(a, x).data()));
  Tensor y = nlic::analysis(a, x);
  EXPECT_TRUE(bit_equal(nlic::synthesis(a, y).data(), nlic::synthesis(b, y).data()));
  Tensor z = nlic::hyper_analysis(a, y);
  EXPECT_TRUE(bit_equal(nlic::hyper_synthesis(a, z).data(), nlic::hyper_synthesis(b, z).data()));
}

TEST(Network, ZeroWeightsZeroInput) {
  auto w = nlic::init_weights(ModelConfig{}, 1);
  for (auto& [key, t] : w.tensors) t = Tensor(t.shape());
  Tensor y = nlic::analysis(w, Tensor({1, 3, 16, 16}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Network, KeySetShrinksUnderAblation) {
  const ModelConfig full;
  const auto full_keys = nlic::parameter_keys(full);
  const auto full_w = nlic::init_weights(full, 3);
  for (int variant = 0; variant < 3; ++variant) {
    ModelConfig c = full;
    if (variant == 0) c.use_context_x = false;
    if (variant == 1) c.use_attention = false;
    if (variant == 2) c.use_context_y = false;
    const auto keys = nlic::parameter_keys(c);
    EXPECT_LT(keys.size(), full_keys.size());
    const auto w = nlic::init_weights(c, 3);
    for (const auto& k : keys) {
      ASSERT_TRUE(full_keys.count(k)) << k;
      EXPECT_TRUE(bit_equal(w.at(k).data(), full_w.at(k).data())) << k;
    }
  }
}

TEST(Network, MaskKernelChangesOnlyMaskedBranch) {
  ModelConfig c5;
  c5.mask_kernel_x = 5;
  const auto w7 = nlic::init_weights(ModelConfig{}, 4);
  const auto w5 = nlic::init_weights(c5, 4);
  ASSERT_EQ(nlic::parameter_keys(c5), nlic::parameter_keys(ModelConfig{}));
  for (const auto& [key, t] : w7.tensors) {
    if (key == "ctx_x.masked.weight") {
      EXPECT_EQ(w5.at(key).dim(2), 5u);
      EXPECT_EQ(t.dim(2), 7u);
    } else {
      EXPECT_TRUE(bit_equal(t.data(), w5.at(key).data())) << key;
    }
  }
  // At initialization the 7x7 kernel is the 5x5 kernel padded with zeros.
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({1, 3, 16, 16}, rng);
  Tensor pf = random_tensor({1, 32, 16, 16}, rng);
  const auto p7 = nlic::entropy_params_x(w7, pf, x);
  const auto p5 = nlic::entropy_params_x(w5, pf, x);
  for (std::size_t i = 0; i < p7.means.numel(); ++i) {
    EXPECT_NEAR(p7.means.data()[i], p5.means.data()[i], 1e-12);
  }
}

TEST(Network, InvalidConfigRejected) {
  ModelConfig c;
  c.mask_kernel_x = 3;
  EXPECT_THROW(c.validate(), nlic::ConfigError);
  c = ModelConfig{};
  c.downsample_factor = 6;
  EXPECT_THROW(c.validate(), nlic::ConfigError);
  c = ModelConfig{};
  c.filters_n = 2;
  EXPECT_THROW(c.validate(), nlic::ConfigError);
  c = ModelConfig{};
  c.mixtures_k = 0;
  EXPECT_THROW(c.validate(), nlic::ConfigError);
  EXPECT_THROW(ModelConfig::from_text("bogus=1\n"), nlic::ConfigError);
}

TEST(Network, ConfigTextRoundTrip) {
  ModelConfig c = small_config();
  c.use_attention = false;
  c.scale_floor_steps = 0.25;
  EXPECT_EQ(ModelConfig::from_text(c.canonical_text()), c);
  EXPECT_NE(c.hash(), ModelConfig{}.hash());
}

TEST(Network, InitialMixtureWeightsAreUniform) {
  const auto w = nlic::init_weights(ModelConfig{}, 1);
  Tensor x({1, 3, 16, 16});
  Tensor y = nlic::analysis(w, x);
  Tensor hyper = nlic::hyper_synthesis(w, nlic::hyper_analysis(w, y));
  const auto py = nlic::entropy_params_y(w, hyper, y);
  const auto px = nlic::entropy_params_x(w, nlic::synthesis(w, y), x);
  for (const auto* p : {&py, &px}) {
    for (double v : p->weights.data()) EXPECT_NEAR(v, 1.0 / 3.0, 0.05);
    for (double v : p->scales.data()) EXPECT_NEAR(v, 1.0, 0.5);
  }
}

TEST(Network, InitialPixelRateIsNearlyUninformative) {
  const auto w = nlic::init_weights(ModelConfig{}, 1);
  std::mt19937_64 rng(6);
  Tensor x({2, 3, 16, 16});
  for (auto& v : x.mutable_data()) v = nlic::SymbolGrid::pixel().value(static_cast<int>(rng() % 256));
  Tensor y = nlic::analysis(w, x);
  const auto px = nlic::entropy_params_x(w, nlic::synthesis(w, y), x);
  const double bits = nlic::gmm_bits(px.weights, px.means, px.scales, x, 3,
                                     nlic::SymbolGrid::pixel()).item();
  const double bpsp = bits / static_cast<double>(x.numel());

  // Oracle: a unit Gaussian centred at 0 over the pixel grid.
  double oracle = 0.0;
  const auto grid = nlic::SymbolGrid::pixel();
  for (double v : x.data()) {
    const double lo = (v - grid.step / 2) / std::sqrt(2.0), hi = (v + grid.step / 2) / std::sqrt(2.0);
    oracle -= std::log2(0.5 * (std::erf(hi) - std::erf(lo)));
  }
  oracle /= static_cast<double>(x.numel());
  EXPECT_NEAR(bpsp, 8.0, 1.5);
  EXPECT_NEAR(bpsp, oracle, 0.5);
}

TEST(Network, ParamsAreNormalizedAndFloored) {
  auto w = nlic::init_weights(small_config(), 2);
  randomize(w, 3, 0.8);
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3, 16, 16}, rng);
  Tensor pf = random_tensor({2, 8, 16, 16}, rng, -3, 3);
  const auto p = nlic::entropy_params_x(w, pf, x);
  const double floor = nlic::scale_floor(w.config, nlic::SymbolGrid::pixel());
  const std::size_t plane = 16 * 16;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t j = 0; j < plane; ++j) {
        double total = 0.0;
        for (std::size_t k = 0; k < 2; ++k) {
          const std::size_t idx = ((b * 6) + k * 3 + c) * plane + j;
          const double wt = p.weights.data()[idx];
          EXPECT_GT(wt, 0.0);
          EXPECT_LT(wt, 1.0);
          EXPECT_GE(p.scales.data()[idx], floor);
          total += wt;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

// Perturbs every channel at one raster position and checks that all outputs
// at that position and before it are unchanged bit for bit.
template <typename ParamsFn>
void check_causality(ParamsFn params, Tensor ctx, std::uint64_t seed) {
  const std::size_t channels = ctx.dim(1), h = ctx.dim(2), w = ctx.dim(3);
  const auto base = params(ctx);
  std::mt19937_64 rng(seed);
  int later_changes = 0;
  for (std::size_t p = 0; p < h * w; ++p) {
    Tensor pert(ctx.shape(), std::vector<double>(ctx.data().begin(), ctx.data().end()));
    for (std::size_t c = 0; c < channels; ++c) {
      pert.mutable_data()[c * h * w + p] += 0.5 + static_cast<double>(rng() % 100) / 100.0;
    }
    const auto out = params(pert);
    using Member = Tensor nlic::GmmTensors::*;
    for (Member pair : {&nlic::GmmTensors::weights, &nlic::GmmTensors::means,
                        &nlic::GmmTensors::scales}) {
      const Tensor& a = base.*pair;
      const Tensor& b = out.*pair;
      for (std::size_t oc = 0; oc < a.dim(1); ++oc) {
        for (std::size_t q = 0; q <= p; ++q) {
          const double va = a.data()[oc * h * w + q], vb = b.data()[oc * h * w + q];
          ASSERT_EQ(std::memcmp(&va, &vb, sizeof(double)), 0)
              << "output at " << q << " changed when perturbing " << p;
        }
        for (std::size_t q = p + 1; q < h * w; ++q) {
          later_changes += a.data()[oc * h * w + q] != b.data()[oc * h * w + q];
        }
      }
    }
  }
  // The check is not vacuous: later outputs do react.
  EXPECT_GT(later_changes, 0);
}

TEST(Network, LatentContextIsCausal) {
  auto w = nlic::init_weights(ModelConfig{}, 3);
  randomize(w, 4);
  std::mt19937_64 rng(8);
  Tensor hyper = random_tensor({1, 64, 6, 6}, rng);
  Tensor y = random_tensor({1, 32, 6, 6}, rng, -4, 4);
  check_causality([&](const Tensor& t) { return nlic::entropy_params_y(w, hyper, t); }, y, 9);
}

TEST(Network, PixelContextIsCausal) {
  for (std::size_t kernel : {7u, 5u}) {
    ModelConfig c;
    c.mask_kernel_x = kernel;
    auto w = nlic::init_weights(c, 3);
    randomize(w, 5);
    std::mt19937_64 rng(10);
    Tensor pf = random_tensor({1, 32, 6, 6}, rng);
    Tensor x = random_tensor({1, 3, 6, 6}, rng);
    check_causality([&](const Tensor& t) { return nlic::entropy_params_x(w, pf, t); }, x, 11);
  }
}

TEST(Network, DisabledContextIgnoresSymbols) {
  ModelConfig c = small_config();
  c.use_context_y = false;
  c.use_context_x = false;
  auto w = nlic::init_weights(c, 3);
  randomize(w, 6);
  std::mt19937_64 rng(12);
  Tensor hyper = random_tensor({1, 16, 4, 4}, rng);
  Tensor pf = random_tensor({1, 8, 8, 8}, rng);
  const auto a = nlic::entropy_params_y(w, hyper, random_tensor({1, 8, 4, 4}, rng, -5, 5));
  const auto b = nlic::entropy_params_y(w, hyper, random_tensor({1, 8, 4, 4}, rng, -5, 5));
  EXPECT_TRUE(bit_equal(a.means.data(), b.means.data()));
  const auto pa = nlic::entropy_params_x(w, pf, random_tensor({1, 3, 8, 8}, rng));
  const auto pb = nlic::entropy_params_x(w, pf, random_tensor({1, 3, 8, 8}, rng));
  EXPECT_TRUE(bit_equal(pa.scales.data(), pb.scales.data()));
}

// The decoder's per-location evaluation reproduces the tensor path exactly,
// given only the symbols before the current position.
TEST(Network, LocationPathMatchesTensorPath) {
  for (bool ctx : {true, false}) {
    ModelConfig c = small_config();
    c.use_context_x = ctx;
    c.use_context_y = ctx;
    auto w = nlic::init_weights(c, 3);
    randomize(w, 7);
    std::mt19937_64 rng(13);
    const std::size_t h = 5, wd = 7;
    Tensor feats = random_tensor({1, 16, h, wd}, rng);
    Tensor y = random_tensor({1, 8, h, wd}, rng, -6, 6);
    const auto tensor_params = nlic::entropy_params_y(w, feats, y);
    const auto head = nlic::latent_head_at(w);
    std::vector<double> frontier(y.numel(), 0.0);
    std::vector<nlic::Mixture> mix;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < wd; ++j) {
        head.evaluate(frontier, 8, h, wd, feats, i, j, mix);
        for (std::size_t ch = 0; ch < 8; ++ch) {
          const auto ref = nlic::mixture_at(tensor_params, 2, 8, ch, i * wd + j);
          ASSERT_TRUE(bit_equal(ref.weights, mix[ch].weights));
          ASSERT_TRUE(bit_equal(ref.means, mix[ch].means));
          ASSERT_TRUE(bit_equal(ref.scales, mix[ch].scales));
          frontier[ch * h * wd + i * wd + j] = y.data()[ch * h * wd + i * wd + j];
        }
      }
    }
  }
}

TEST(Network, AttentionStartsAsIdentity) {
  const auto w = nlic::init_weights(ModelConfig{}, 1);
  std::mt19937_64 rng(14);
  Tensor t = random_tensor({1, 32, 4, 4}, rng);
  Tensor out = nlic::attention_block(w, "g_a.attn", t);
  EXPECT_EQ(out.shape(), t.shape());
  EXPECT_TRUE(bit_equal(out.data(), t.data()));
}

TEST(Network, AttentionGradient) {
  auto w = nlic::init_weights(small_config(), 1);
  randomize(w, 8);
  std::mt19937_64 rng(15);
  Tensor t = random_tensor({1, 8, 3, 3}, rng);
  t.set_requires_grad(true);
  auto loss = [&] { return nlic::testing::probe(nlic::attention_block(w, "g_a.attn", t)); };
  EXPECT_LT(nlic::testing::gradient_check(loss, t), 1e-4);
  Tensor& k = w.tensors.at("g_a.attn.mask.out.weight");
  k.set_requires_grad(true);
  EXPECT_LT(nlic::testing::gradient_check(loss, k), 1e-4);
}

TEST(Network, HyperFeaturesGradientReachesY) {
  auto w = nlic::init_weights(small_config(), 2);
  randomize(w, 9);
  std::mt19937_64 rng(16);
  Tensor y = random_tensor({1, 8, 4, 4}, rng, -2, 2);
  y.set_requires_grad(true);
  auto loss = [&] {
    return nlic::testing::probe(nlic::hyper_synthesis(w, nlic::hyper_analysis(w, y)));
  };
  EXPECT_LT(nlic::testing::gradient_check(loss, y), 1e-4);
}

TEST(Network, AnalysisSynthesisGradient) {
  auto w = nlic::init_weights(small_config(), 2);
  randomize(w, 10);
  std::mt19937_64 rng(17);
  Tensor x = random_tensor({1, 3, 16, 16}, rng);
  x.set_requires_grad(true);
  auto loss = [&] { return nlic::testing::probe(nlic::synthesis(w, nlic::analysis(w, x))); };
  EXPECT_LT(nlic::testing::gradient_check(loss, x), 1e-4);
  Tensor& k = w.tensors.at("g_a.in.weight");
  k.set_requires_grad(true);
  EXPECT_LT(nlic::testing::gradient_check(loss, k), 1e-4);
}

TEST(Network, HeadGradient) {
  auto w = nlic::init_weights(small_config(), 2);
  randomize(w, 11);
  std::mt19937_64 rng(18);
  Tensor pf = random_tensor({1, 8, 4, 4}, rng);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Tensor& k = w.tensors.at("ctx_x.masked.weight");
  k.set_requires_grad(true);
  pf.set_requires_grad(true);
  auto loss = [&] {
    const auto p = nlic::entropy_params_x(w, pf, x);
    return nlic::gmm_bits(p.weights, p.means, p.scales, x, 2, nlic::SymbolGrid::pixel());
  };
  EXPECT_LT(nlic::testing::gradient_check(loss, k), 1e-4);
  EXPECT_LT(nlic::testing::gradient_check(loss, pf), 1e-4);
}

TEST(Network, WeightFileRoundTrip) {
  auto w = nlic::init_weights(small_config(), 5);
  randomize(w, 12);
  const auto bytes = nlic::serialize_weights(w);
  const auto back = nlic::deserialize_weights(bytes);
  EXPECT_EQ(back.config, w.config);
  EXPECT_EQ(back.hash(), w.hash());
  for (const auto& [key, t] : w.tensors) {
    EXPECT_EQ(back.at(key).shape(), t.shape());
    EXPECT_TRUE(bit_equal(back.at(key).data(), t.data())) << key;
  }
  EXPECT_EQ(nlic::serialize_weights(back), bytes);
}

TEST(Network, WeightFileErrors) {
  const auto bytes = nlic::serialize_weights(nlic::init_weights(small_config(), 5));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(nlic::deserialize_weights(bad), nlic::BadMagicError);
  EXPECT_THROW(nlic::deserialize_weights(std::span(bytes).first(bytes.size() - 8)),
               nlic::TruncationError);
  EXPECT_THROW(nlic::deserialize_weights(std::span(bytes).first(30)), nlic::TruncationError);
}

}  // namespace
