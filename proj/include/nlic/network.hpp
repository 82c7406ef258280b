#pragma once

// The compression model: analysis/synthesis transforms, hyper transforms,
// attention blocks, and the two masked context models with their parameter
// heads. Every parameter lives in a ModelWeights map under a stable key.
//
// The context heads exist in two forms. The tensor form runs over a whole
// batch (training, encoder). The location form evaluates one raster position
// from a partially decoded buffer (decoder) and performs the same floating
// point operations in the same order, so both yield identical bits.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "nlic/bytes.hpp"
#include "nlic/config.hpp"
#include "nlic/entropy.hpp"
#include "nlic/ops.hpp"
#include "nlic/tensor.hpp"

namespace nlic {

struct ModelConfig {
  std::size_t filters_n = 32;
  std::size_t mixtures_k = 3;
  std::size_t mask_kernel_x = 7;
  bool use_attention = true;
  bool use_context_y = true;
  bool use_context_x = true;
  std::size_t downsample_factor = 4;
  std::size_t hyper_downsample = 4;
  // Lower bound on mixture scales, in symbol steps of the grid being coded.
  double scale_floor_steps = 0.11;

  std::size_t pad_multiple() const { return downsample_factor * hyper_downsample; }
  std::size_t downsample_stages() const { return log2_exact(downsample_factor); }
  std::size_t hyper_stages() const { return log2_exact(hyper_downsample); }

  void validate() const {
    NLIC_REQUIRE(mixtures_k >= 1, ConfigError, "mixtures_k must be >= 1");
    NLIC_REQUIRE(filters_n >= 4, ConfigError, "filters_n must be >= 4");
    NLIC_REQUIRE(mask_kernel_x == 5 || mask_kernel_x == 7, ConfigError,
                 "mask_kernel_x must be 5 or 7, got ", mask_kernel_x);
    NLIC_REQUIRE(is_pow2(downsample_factor) && downsample_factor >= 2, ConfigError,
                 "downsample_factor must be a power of two >= 2");
    NLIC_REQUIRE(is_pow2(hyper_downsample) && hyper_downsample >= 2, ConfigError,
                 "hyper_downsample must be a power of two >= 2");
    NLIC_REQUIRE(scale_floor_steps > 0.0, ConfigError, "scale_floor_steps must be > 0");
  }

  // Sorted key=value lines; its FNV-1a hash identifies the architecture.
  std::string canonical_text() const {
    std::map<std::string, std::string> kv = {
        {"downsample_factor", std::to_string(downsample_factor)},
        {"filters_n", std::to_string(filters_n)},
        {"hyper_downsample", std::to_string(hyper_downsample)},
        {"mask_kernel_x", std::to_string(mask_kernel_x)},
        {"mixtures_k", std::to_string(mixtures_k)},
        {"scale_floor_steps", format_double(scale_floor_steps)},
        {"use_attention", use_attention ? "true" : "false"},
        {"use_context_x", use_context_x ? "true" : "false"},
        {"use_context_y", use_context_y ? "true" : "false"},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
  }

  std::uint64_t hash() const { return fnv1a64(canonical_text()); }

  // Applies recognised keys and returns true; unknown keys are left alone.
  bool apply(const std::string& key, const std::string& value) {
    if (key == "filters_n") filters_n = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "mixtures_k") mixtures_k = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "mask_kernel_x") mask_kernel_x = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "use_attention") use_attention = parse_bool(key, value);
    else if (key == "use_context_y") use_context_y = parse_bool(key, value);
    else if (key == "use_context_x") use_context_x = parse_bool(key, value);
    else if (key == "downsample_factor") downsample_factor = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "hyper_downsample") hyper_downsample = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "scale_floor_steps") scale_floor_steps = parse_double(key, value);
    else return false;
    return true;
  }

  static ModelConfig from_text(std::string_view text) {
    ModelConfig c;
    for (const auto& [k, v] : parse_key_values(text)) {
      NLIC_REQUIRE(c.apply(k, v), ConfigError, "unknown model config key '", k, "'");
    }
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;

 private:
  static bool is_pow2(std::size_t v) { return v && !(v & (v - 1)); }
  static std::size_t log2_exact(std::size_t v) {
    std::size_t s = 0;
    while ((std::size_t{1} << s) < v) ++s;
    return s;
  }
};

struct ModelWeights {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& key) const {
    auto it = tensors.find(key);
    NLIC_REQUIRE(it != tensors.end(), ContractViolation, "missing parameter '", key, "'");
    return it->second;
  }
  bool has(const std::string& key) const { return tensors.count(key) != 0; }

  // Hash over keys, shapes and raw values.
  std::uint64_t hash() const {
    ByteWriter w;
    for (const auto& [key, t] : tensors) {
      w.put(static_cast<std::uint32_t>(key.size()));
      w.put_string(key);
      w.put(static_cast<std::uint32_t>(t.ndim()));
      for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
      for (double v : t.data()) w.put_f64(v);
    }
    return fnv1a64(w.bytes());
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [key, t] : tensors) out.push_back(&t);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [key, t] : tensors) t.set_requires_grad(on);
  }
};

// ---------------------------------------------------------------------------
// Parameter layout.

namespace detail {

enum class Init {
  kHe,        // fan-in scaled uniform for leaky_relu
  kLinear,    // fan-in scaled uniform, no activation gain
  kZero,
  kHeadSmall  // final parameter-head layer
};

struct ParamSpec {
  std::string key;
  Shape shape;
  Init init;
  double fan_in;
};

struct LayoutBuilder {
  std::vector<ParamSpec> specs;

  void conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
            Init init = Init::kHe) {
    specs.push_back({name + ".weight", {out, in, k, k}, init, double(in * k * k)});
    specs.push_back({name + ".bias", {out}, Init::kZero, 0.0});
  }
  void conv_t(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
              std::size_t stride) {
    specs.push_back({name + ".weight", {in, out, k, k}, Init::kHe,
                     double(in * k * k) / double(stride * stride)});
    specs.push_back({name + ".bias", {out}, Init::kZero, 0.0});
  }
  void res_block(const std::string& name, std::size_t n) {
    conv(name + ".conv0", n, n, 3);
    conv(name + ".conv1", n, n, 3);
  }
  void attention(const std::string& name, std::size_t n) {
    for (int i = 0; i < 3; ++i) res_block(name + ".trunk.res" + std::to_string(i), n);
    conv(name + ".trunk.out", n, n, 1, Init::kZero);
    for (int i = 0; i < 3; ++i) res_block(name + ".mask.res" + std::to_string(i), n);
    conv(name + ".mask.out", n, n, 1, Init::kLinear);
  }
};

inline std::size_t hyper_channels(const ModelConfig& c) { return 2 * c.filters_n; }
inline std::size_t ctx_y_channels(const ModelConfig& c) { return 2 * c.filters_n; }
inline std::size_t ctx_x_channels(const ModelConfig& c) { return c.filters_n; }
inline constexpr std::size_t kColorChannels = 3;
inline constexpr std::size_t kMaxMaskKernel = 7;

inline std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t n = c.filters_n, k = c.mixtures_k;
  LayoutBuilder b;
  b.conv("g_a.in", kColorChannels, n, 3);
  for (std::size_t s = 0; s < c.downsample_stages(); ++s) {
    b.conv("g_a.down" + std::to_string(s), n, n, 3);
    b.res_block("g_a.res" + std::to_string(s), n);
  }
  if (c.use_attention) b.attention("g_a.attn", n);
  b.conv("g_a.out", n, n, 3, Init::kLinear);

  b.conv("h_a.in", n, n, 3);
  for (std::size_t s = 0; s < c.hyper_stages(); ++s) b.conv("h_a.down" + std::to_string(s), n, n, 3);
  b.conv("h_a.out", n, n, 3, Init::kLinear);

  b.conv("h_s.in", n, n, 3);
  for (std::size_t s = 0; s < c.hyper_stages(); ++s) b.conv_t("h_s.up" + std::to_string(s), n, n, 4, 2);
  b.conv("h_s.out", n, hyper_channels(c), 3, Init::kLinear);

  b.conv("g_s.in", n, n, 3);
  if (c.use_attention) b.attention("g_s.attn", n);
  for (std::size_t s = 0; s < c.downsample_stages(); ++s) {
    b.res_block("g_s.res" + std::to_string(s), n);
    b.conv_t("g_s.up" + std::to_string(s), n, n, 4, 2);
  }
  b.conv("g_s.out", n, n, 3, Init::kLinear);

  if (c.use_context_y) {
    // fan-in counts only the causal taps of the kernel
    b.specs.push_back({"ctx_y.masked.weight", {ctx_y_channels(c), n, 5, 5}, Init::kHe, double(n * 12)});
    b.specs.push_back({"ctx_y.masked.bias", {ctx_y_channels(c)}, Init::kZero, 0.0});
  }
  b.conv("ctx_y.head0", ctx_y_channels(c) + hyper_channels(c), 2 * n, 1);
  b.conv("ctx_y.head1", 2 * n, 3 * k * n, 1, Init::kHeadSmall);

  if (c.use_context_x) {
    const std::size_t kx = c.mask_kernel_x;
    b.specs.push_back({"ctx_x.masked.weight", {ctx_x_channels(c), kColorChannels, kx, kx},
                       Init::kHe, double(kColorChannels * 12)});
    b.specs.push_back({"ctx_x.masked.bias", {ctx_x_channels(c)}, Init::kZero, 0.0});
  }
  b.conv("ctx_x.head0", ctx_x_channels(c) + n, n, 1);
  b.conv("ctx_x.head1", n, 3 * k * kColorChannels, 1, Init::kHeadSmall);

  b.specs.push_back({"prior.psi", {n, kPriorParams}, Init::kZero, 0.0});
  return b.specs;
}

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

inline std::set<std::string> parameter_keys(const ModelConfig& config) {
  std::set<std::string> keys;
  for (const auto& s : detail::parameter_layout(config)) keys.insert(s.key);
  return keys;
}

// Scale floor in normalized units for a grid.
inline double scale_floor(const ModelConfig& c, const SymbolGrid& grid) {
  return c.scale_floor_steps * grid.step;
}

// Deterministic in (config, seed). Each tensor draws from its own generator
// keyed by (seed, key), so adding or removing a module leaves every other
// tensor unchanged.
inline ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w;
  w.config = config;
  const std::size_t k = config.mixtures_k;
  for (const auto& spec : detail::parameter_layout(config)) {
    Tensor t(spec.shape, 0.0);
    auto d = t.mutable_data();
    ByteWriter seed_bytes;
    seed_bytes.put(seed);
    std::mt19937_64 rng(fnv1a64(spec.key, fnv1a64(seed_bytes.bytes())));
    const double gain = 1.0 + pm::kLeakySlope * pm::kLeakySlope;
    switch (spec.init) {
      case detail::Init::kZero:
        break;
      case detail::Init::kHe:
      case detail::Init::kLinear:
      case detail::Init::kHeadSmall: {
        double bound = spec.init == detail::Init::kHe ? std::sqrt(6.0 / (gain * spec.fan_in))
                                                      : std::sqrt(3.0 / spec.fan_in);
        if (spec.init == detail::Init::kHeadSmall) bound *= 0.1;
        for (auto& v : d) v = bound * (2.0 * detail::uniform01(rng) - 1.0);
        break;
      }
    }
    w.tensors.emplace(spec.key, std::move(t));
  }

  // Masked kernels: draw a full 7x7 kernel per (out, in) pair so that a 5x5
  // kernel is the centre crop of the 7x7 one; the 7x7 outer ring starts at
  // zero, making both variants the same function at initialization.
  auto init_masked = [&](const std::string& key) {
    if (!w.has(key)) return;
    Tensor& t = w.tensors.at(key);
    const std::size_t out = t.dim(0), in = t.dim(1), kk = t.dim(2);
    ByteWriter seed_bytes;
    seed_bytes.put(seed);
    std::mt19937_64 rng(fnv1a64(key, fnv1a64(seed_bytes.bytes())));
    const double gain = 1.0 + pm::kLeakySlope * pm::kLeakySlope;
    const double bound = std::sqrt(6.0 / (gain * double(in * 12)));
    const std::size_t big = detail::kMaxMaskKernel, off = (big - kk) / 2;
    auto d = t.mutable_data();
    for (std::size_t o = 0; o < out; ++o) {
      for (std::size_t i = 0; i < in; ++i) {
        for (std::size_t y = 0; y < big; ++y) {
          for (std::size_t x = 0; x < big; ++x) {
            const double v = bound * (2.0 * detail::uniform01(rng) - 1.0);
            if (y < off || x < off || y >= off + kk || x >= off + kk) continue;
            const std::size_t ky = y - off, kx = x - off;
            const bool inner5 = y >= 1 && x >= 1 && y < 6 && x < 6;
            const bool causal = ky < kk / 2 || (ky == kk / 2 && kx < kk / 2);
            d[((o * in + i) * kk + ky) * kk + kx] = (inner5 && causal) ? v : 0.0;
          }
        }
      }
    }
  };
  init_masked("ctx_y.masked.weight");
  init_masked("ctx_x.masked.weight");

  // Head biases: uniform mixture weights, zero means, scales near 1.0.
  auto init_head_bias = [&](const std::string& key, std::size_t channels, const SymbolGrid& grid) {
    auto d = w.tensors.at(key).mutable_data();
    const double target = 1.0 - scale_floor(config, grid);
    const double raw = std::log(std::expm1(target));
    for (std::size_t i = 0; i < k * channels; ++i) d[2 * k * channels + i] = raw;
  };
  init_head_bias("ctx_y.head1.bias", config.filters_n, SymbolGrid::latent());
  init_head_bias("ctx_x.head1.bias", detail::kColorChannels, SymbolGrid::pixel());

  // Factorized prior: softplus(h) = 10^(-1/3) in each layer, a = b = 0.
  {
    auto d = w.tensors.at("prior.psi").mutable_data();
    const double h = std::log(std::expm1(std::pow(10.0, -1.0 / 3.0)));
    for (std::size_t c = 0; c < config.filters_n; ++c) {
      d[c * kPriorParams + 0] = h;
      d[c * kPriorParams + 3] = h;
      d[c * kPriorParams + 6] = h;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Weight files: "NLW1", u32 config length, canonical config text, u64
// manifest length, manifest (u32 count, then per tensor: u32 key length, key,
// u32 rank, u64 dims, u64 byte offset into the data section), data section of
// little-endian float64 values.

inline constexpr std::array<std::uint8_t, 4> kWeightsMagic = {'N', 'L', 'W', '1'};

inline std::vector<std::uint8_t> serialize_weights(const ModelWeights& w) {
  ByteWriter manifest;
  manifest.put(static_cast<std::uint32_t>(w.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [key, t] : w.tensors) {
    manifest.put(static_cast<std::uint32_t>(key.size()));
    manifest.put_string(key);
    manifest.put(static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) manifest.put(static_cast<std::uint64_t>(d));
    manifest.put(offset);
    offset += 8 * t.numel();
  }
  ByteWriter out;
  out.put_bytes(kWeightsMagic);
  const std::string text = w.config.canonical_text();
  out.put(static_cast<std::uint32_t>(text.size()));
  out.put_string(text);
  out.put(static_cast<std::uint64_t>(manifest.bytes().size()));
  out.put_bytes(manifest.bytes());
  for (const auto& [key, t] : w.tensors) {
    for (double v : t.data()) out.put_f64(v);
  }
  return std::move(out.bytes());
}

inline ModelWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kWeightsMagic.begin())) {
    throw BadMagicError("not an NLW1 weight file");
  }
  ModelWeights w;
  w.config = ModelConfig::from_text(r.get_string(r.get<std::uint32_t>()));
  const auto manifest_len = r.get<std::uint64_t>();
  const std::size_t data_start = r.pos() + static_cast<std::size_t>(manifest_len);
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string key;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.key = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    NLIC_REQUIRE(rank <= 8, DataError, "tensor '", e.key, "' has implausible rank ", rank);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  NLIC_REQUIRE(r.pos() == data_start, DataError, "weight manifest length mismatch");
  std::map<std::string, Shape> expected;
  for (const auto& s : detail::parameter_layout(w.config)) expected[s.key] = s.shape;
  NLIC_REQUIRE(entries.size() == expected.size(), DataError, "weight file has ", entries.size(),
               " tensors, config expects ", expected.size());
  for (const auto& e : entries) {
    auto it = expected.find(e.key);
    NLIC_REQUIRE(it != expected.end(), DataError, "unexpected tensor '", e.key, "'");
    NLIC_REQUIRE(it->second == e.shape, DataError, "tensor '", e.key, "' has shape ",
                 shape_str(e.shape), ", config expects ", shape_str(it->second));
    const std::size_t n = shape_numel(e.shape);
    NLIC_REQUIRE(e.offset <= bytes.size() && data_start + e.offset + 8 * n <= bytes.size(),
                 TruncationError, "tensor '", e.key, "' extends past the end of the file");
    ByteReader dr(bytes.subspan(data_start + static_cast<std::size_t>(e.offset), 8 * n));
    std::vector<double> values(n);
    for (auto& v : values) v = dr.get_f64();
    w.tensors.emplace(e.key, Tensor(e.shape, std::move(values)));
  }
  return w;
}

inline void save_weights(const ModelWeights& w, const std::string& path) {
  write_bytes(path, serialize_weights(w));
}

inline ModelWeights load_weights(const std::string& path) {
  return deserialize_weights(read_bytes(path));
}

// ---------------------------------------------------------------------------
// Tensor-path forward functions.

struct GmmTensors {
  Tensor weights;  // [B, K*C, h, w], softmax over each group {c, C+c, ...}
  Tensor means;
  Tensor scales;
};

namespace detail {

inline Tensor conv(const ModelWeights& w, const std::string& name, const Tensor& x,
                   std::size_t stride = 1) {
  const Tensor& k = w.at(name + ".weight");
  return conv2d(x, k, w.at(name + ".bias"), stride, k.dim(2) / 2);
}

inline Tensor conv_t(const ModelWeights& w, const std::string& name, const Tensor& x) {
  return conv2d_transposed(x, w.at(name + ".weight"), w.at(name + ".bias"), 2, 1);
}

inline Tensor res_block(const ModelWeights& w, const std::string& name, const Tensor& x) {
  Tensor h = leaky_relu(conv(w, name + ".conv0", x));
  return add(x, conv(w, name + ".conv1", h));
}

inline void require_divisible(const Tensor& x, std::size_t factor, const char* what) {
  NLIC_REQUIRE(x.ndim() == 4, ContractViolation, what, ": expected [B, C, H, W], got ",
               shape_str(x.shape()));
  NLIC_REQUIRE(x.dim(2) % factor == 0 && x.dim(3) % factor == 0 && x.dim(2) > 0 && x.dim(3) > 0,
               ContractViolation, what, ": spatial size ", x.dim(2), "x", x.dim(3),
               " is not divisible by ", factor, "; pad the input first");
}

// Splits a raw head output into mixture parameters for `channels` channels.
inline GmmTensors split_head(const Tensor& raw, std::size_t k, std::size_t channels, double floor) {
  const std::size_t kc = k * channels;
  GmmTensors p;
  p.weights = softmax_channel_groups(slice_channels(raw, 0, kc), k);
  p.means = slice_channels(raw, kc, 2 * kc);
  p.scales = add_scalar(softplus(slice_channels(raw, 2 * kc, 3 * kc)), floor);
  return p;
}

}  // namespace detail

inline Tensor attention_block(const ModelWeights& w, const std::string& name, const Tensor& t) {
  Tensor trunk = t, mask = t;
  for (int i = 0; i < 3; ++i) {
    trunk = detail::res_block(w, name + ".trunk.res" + std::to_string(i), trunk);
    mask = detail::res_block(w, name + ".mask.res" + std::to_string(i), mask);
  }
  trunk = detail::conv(w, name + ".trunk.out", trunk);
  mask = sigmoid(detail::conv(w, name + ".mask.out", mask));
  return add(t, mul(trunk, mask));
}

inline Tensor analysis(const ModelWeights& w, const Tensor& x_norm) {
  const auto& c = w.config;
  detail::require_divisible(x_norm, c.pad_multiple(), "analysis");
  NLIC_REQUIRE(x_norm.dim(1) == detail::kColorChannels, ContractViolation,
               "analysis: expected 3 colour channels, got ", x_norm.dim(1));
  Tensor h = leaky_relu(detail::conv(w, "g_a.in", x_norm));
  for (std::size_t s = 0; s < c.downsample_stages(); ++s) {
    h = leaky_relu(detail::conv(w, "g_a.down" + std::to_string(s), h, 2));
    h = detail::res_block(w, "g_a.res" + std::to_string(s), h);
  }
  if (c.use_attention) h = attention_block(w, "g_a.attn", h);
  return detail::conv(w, "g_a.out", h);
}

inline Tensor hyper_analysis(const ModelWeights& w, const Tensor& y) {
  const auto& c = w.config;
  detail::require_divisible(y, c.hyper_downsample, "hyper_analysis");
  Tensor h = leaky_relu(detail::conv(w, "h_a.in", y));
  for (std::size_t s = 0; s < c.hyper_stages(); ++s) {
    h = leaky_relu(detail::conv(w, "h_a.down" + std::to_string(s), h, 2));
  }
  return detail::conv(w, "h_a.out", h);
}

inline Tensor hyper_synthesis(const ModelWeights& w, const Tensor& z_hat) {
  const auto& c = w.config;
  Tensor h = leaky_relu(detail::conv(w, "h_s.in", z_hat));
  for (std::size_t s = 0; s < c.hyper_stages(); ++s) {
    h = leaky_relu(detail::conv_t(w, "h_s.up" + std::to_string(s), h));
  }
  return detail::conv(w, "h_s.out", h);
}

inline Tensor synthesis(const ModelWeights& w, const Tensor& y_hat) {
  const auto& c = w.config;
  Tensor h = leaky_relu(detail::conv(w, "g_s.in", y_hat));
  if (c.use_attention) h = attention_block(w, "g_s.attn", h);
  for (std::size_t s = 0; s < c.downsample_stages(); ++s) {
    h = detail::res_block(w, "g_s.res" + std::to_string(s), h);
    h = leaky_relu(detail::conv_t(w, "g_s.up" + std::to_string(s), h));
  }
  return detail::conv(w, "g_s.out", h);
}

namespace detail {

inline Tensor context_head(const ModelWeights& w, const std::string& prefix, bool use_ctx,
                           std::size_t kernel, std::size_t ctx_channels, const Tensor& ctx_input,
                           const Tensor& features) {
  NLIC_REQUIRE(ctx_input.ndim() == 4 && features.ndim() == 4 &&
                   ctx_input.dim(0) == features.dim(0) && ctx_input.dim(2) == features.dim(2) &&
                   ctx_input.dim(3) == features.dim(3),
               ContractViolation, prefix, ": context input ", shape_str(ctx_input.shape()),
               " and features ", shape_str(features.shape()), " disagree spatially");
  Tensor ctx = use_ctx ? masked_conv2d(ctx_input, w.at(prefix + ".masked.weight"),
                                       w.at(prefix + ".masked.bias"), kernel)
                       : Tensor({ctx_input.dim(0), ctx_channels, ctx_input.dim(2), ctx_input.dim(3)});
  Tensor h = leaky_relu(conv(w, prefix + ".head0", concat_channels({ctx, features})));
  return conv(w, prefix + ".head1", h);
}

}  // namespace detail

inline GmmTensors entropy_params_y(const ModelWeights& w, const Tensor& hyper_features,
                                   const Tensor& y_context) {
  const auto& c = w.config;
  Tensor raw = detail::context_head(w, "ctx_y", c.use_context_y, 5, detail::ctx_y_channels(c),
                                    y_context, hyper_features);
  return detail::split_head(raw, c.mixtures_k, c.filters_n, scale_floor(c, SymbolGrid::latent()));
}

inline GmmTensors entropy_params_x(const ModelWeights& w, const Tensor& pixel_features,
                                   const Tensor& x_context) {
  const auto& c = w.config;
  Tensor raw = detail::context_head(w, "ctx_x", c.use_context_x, c.mask_kernel_x,
                                    detail::ctx_x_channels(c), x_context, pixel_features);
  return detail::split_head(raw, c.mixtures_k, detail::kColorChannels,
                            scale_floor(c, SymbolGrid::pixel()));
}

// Mixture at channel c, location index j of a single-image GmmTensors.
inline Mixture mixture_at(const GmmTensors& p, std::size_t k, std::size_t channels,
                          std::size_t c, std::size_t j) {
  const std::size_t plane = p.weights.dim(2) * p.weights.dim(3);
  Mixture m;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t idx = (i * channels + c) * plane + j;
    m.weights.push_back(p.weights.data()[idx]);
    m.means.push_back(p.means.data()[idx]);
    m.scales.push_back(p.scales.data()[idx]);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Location path, used by the decoder. `ctx` is the partially decoded
// [C, h, w] buffer (values at or after the current position are never read);
// `features` is the [1, F, h, w] conditioning tensor.

class ContextHeadAt {
 public:
  ContextHeadAt(const ModelWeights& w, std::string prefix, bool use_ctx, std::size_t kernel,
                std::size_t ctx_channels, std::size_t out_channels, double floor)
      : w_(w),
        prefix_(std::move(prefix)),
        use_ctx_(use_ctx),
        kernel_(kernel),
        ctx_channels_(ctx_channels),
        out_channels_(out_channels),
        floor_(floor) {}

  // Fills one Mixture per output channel.
  void evaluate(std::span<const double> ctx, std::size_t ctx_in, std::size_t h, std::size_t wd,
                const Tensor& features, std::size_t i, std::size_t j,
                std::vector<Mixture>& out) const {
    const std::size_t feat = features.dim(1);
    const std::size_t plane = h * wd;
    std::vector<double> cat(ctx_channels_ + feat, 0.0);
    if (use_ctx_) {
      const Tensor& mw = w_.at(prefix_ + ".masked.weight");
      const Tensor& mb = w_.at(prefix_ + ".masked.bias");
      for (std::size_t co = 0; co < ctx_channels_; ++co) {
        cat[co] = conv_point(ctx, ctx_in, h, wd, mw, mb, co, i, j, TapMask::kCausal);
      }
    }
    for (std::size_t f = 0; f < feat; ++f) {
      cat[ctx_channels_ + f] = features.data()[f * plane + i * wd + j];
    }
    const std::vector<double> hidden = pointwise(cat, prefix_ + ".head0", true);
    const std::vector<double> raw = pointwise(hidden, prefix_ + ".head1", false);

    const std::size_t k = w_.config.mixtures_k, kc = k * out_channels_;
    std::vector<double> weights(kc);
    out.resize(out_channels_);
    for (std::size_t c = 0; c < out_channels_; ++c) {
      softmax_group(raw.data() + c, k, out_channels_, weights.data() + c);
    }
    for (std::size_t c = 0; c < out_channels_; ++c) {
      Mixture& m = out[c];
      m.weights.resize(k);
      m.means.resize(k);
      m.scales.resize(k);
      for (std::size_t q = 0; q < k; ++q) {
        const std::size_t idx = q * out_channels_ + c;
        m.weights[q] = weights[idx];
        m.means[q] = raw[kc + idx];
        m.scales[q] = pm::softplus(raw[2 * kc + idx]) + floor_;
      }
    }
  }

 private:
  std::vector<double> pointwise(const std::vector<double>& in, const std::string& name,
                                bool activate) const {
    const Tensor& k = w_.at(name + ".weight");
    const Tensor& b = w_.at(name + ".bias");
    std::vector<double> out(k.dim(0));
    for (std::size_t o = 0; o < out.size(); ++o) {
      const double v = conv_point(in, in.size(), 1, 1, k, b, o, 0, 0, TapMask::kNone);
      out[o] = activate ? pm::leaky_relu(v) : v;
    }
    return out;
  }

  const ModelWeights& w_;
  std::string prefix_;
  bool use_ctx_;
  std::size_t kernel_;
  std::size_t ctx_channels_;
  std::size_t out_channels_;
  double floor_;
};

inline ContextHeadAt latent_head_at(const ModelWeights& w) {
  const auto& c = w.config;
  return ContextHeadAt(w, "ctx_y", c.use_context_y, 5, detail::ctx_y_channels(c), c.filters_n,
                       scale_floor(c, SymbolGrid::latent()));
}

inline ContextHeadAt pixel_head_at(const ModelWeights& w) {
  const auto& c = w.config;
  return ContextHeadAt(w, "ctx_x", c.use_context_x, c.mask_kernel_x, detail::ctx_x_channels(c),
                       detail::kColorChannels, scale_floor(c, SymbolGrid::pixel()));
}

}  // namespace nlic
