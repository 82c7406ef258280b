#pragma once

// Lossless compress/decompress.
//
// Encoder: pad, normalize, y = g_a(x), z = h_a(y), round both, code z under
// the factorized prior, then y and the pixels in raster order under mixture
// parameters from the context heads. All mixture parameters are snapped to
// fixed lattices (determinize) before a CDF table is built, so encoder and
// decoder build identical tables.
//
// Decoder: decode z, run h_s, decode y one location at a time from the
// already-decoded frontier, run g_s, decode pixels the same way, crop.

#include <chrono>
#include <cstring>
#include <numeric>
#include <unordered_map>

#include "nlic/container.hpp"
#include "nlic/entropy.hpp"
#include "nlic/image.hpp"
#include "nlic/network.hpp"
#include "nlic/range_coder.hpp"

namespace nlic {

inline constexpr std::size_t kMaxDimension = 1u << 14;
inline constexpr std::uint32_t kWeightLattice = 1u << 12;
inline constexpr std::uint32_t kMeanLattice = 1u << 10;  // per symbol step
inline constexpr std::size_t kScaleLevels = 256;

// ---------------------------------------------------------------------------
// determinize

// Geometric scale levels floor * r^l, l = 0..255, with the last level at the
// grid span.
class ScaleLattice {
 public:
  ScaleLattice(double floor, double span) : floor_(floor) {
    NLIC_REQUIRE(floor > 0.0 && floor < span, ConfigError, "scale floor ", floor,
                 " must lie in (0, ", span, ")");
    delta_ = pm::log(span / floor) / static_cast<double>(kScaleLevels - 1);
    for (std::size_t l = 0; l < kScaleLevels; ++l) {
      levels_[l] = floor * pm::exp(static_cast<double>(l) * delta_);
    }
  }

  std::size_t level(double sigma) const {
    if (!(sigma > floor_)) return 0;
    const double l = pm::round_half_away(pm::log(sigma / floor_) / delta_);
    return static_cast<std::size_t>(std::min(l, static_cast<double>(kScaleLevels - 1)));
  }
  double snap(double sigma) const { return levels_[level(sigma)]; }
  double value(std::size_t l) const { return levels_[l]; }

 private:
  double floor_;
  double delta_;
  std::array<double, kScaleLevels> levels_{};
};

struct Determinizer {
  SymbolGrid grid;
  ScaleLattice scales;

  Determinizer(const SymbolGrid& g, double floor) : grid(g), scales(floor, g.span()) {}

  static Determinizer latent(const ModelConfig& c) {
    return {SymbolGrid::latent(), scale_floor(c, SymbolGrid::latent())};
  }
  static Determinizer pixel(const ModelConfig& c) {
    return {SymbolGrid::pixel(), scale_floor(c, SymbolGrid::pixel())};
  }

  // Weights become multiples of 1/4096 summing to exactly 1 (largest
  // remainder, ties to the lowest index); means multiples of step/1024 from
  // the grid origin, clamped to the support; scales the nearest lattice level.
  Mixture operator()(const Mixture& m) const {
    const std::size_t k = m.size();
    Mixture out;
    out.weights.resize(k);
    out.means.resize(k);
    out.scales.resize(k);

    std::vector<std::int64_t> q(k);
    std::vector<double> rem(k);
    std::int64_t used = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const double w = std::clamp(m.weights[i], 0.0, 1.0) * kWeightLattice;
      q[i] = static_cast<std::int64_t>(std::floor(w));
      rem[i] = w - static_cast<double>(q[i]);
      used += q[i];
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::int64_t d = 0; used < kWeightLattice; ++d, ++used) {
      ++q[order[static_cast<std::size_t>(d) % k]];
    }
    while (used > kWeightLattice) {
      --q[static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin())];
      --used;
    }
    const double mean_step = grid.step / kMeanLattice;
    const double max_index = static_cast<double>(grid.hi - grid.lo) * kMeanLattice;
    for (std::size_t i = 0; i < k; ++i) {
      out.weights[i] = static_cast<double>(q[i]) / kWeightLattice;
      double n = pm::round_half_away((m.means[i] - grid.lo_value) / mean_step);
      if (std::isnan(n)) n = 0.0;
      n = std::clamp(n, 0.0, max_index);
      out.means[i] = grid.lo_value + n * mean_step;
      out.scales[i] = scales.snap(m.scales[i]);
    }
    return out;
  }
};

// Tensor form: applies the determinizer at every (channel, location).
inline GmmTensors determinize(const GmmTensors& p, std::size_t k, const Determinizer& det) {
  const std::size_t batch = p.weights.dim(0), kc = p.weights.dim(1);
  const std::size_t channels = kc / k, plane = p.weights.dim(2) * p.weights.dim(3);
  std::vector<double> w(p.weights.numel()), mu(w.size()), s(w.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t j = 0; j < plane; ++j) {
        Mixture m;
        for (std::size_t q = 0; q < k; ++q) {
          const std::size_t idx = (b * kc + q * channels + c) * plane + j;
          m.weights.push_back(p.weights.data()[idx]);
          m.means.push_back(p.means.data()[idx]);
          m.scales.push_back(p.scales.data()[idx]);
        }
        const Mixture d = det(m);
        for (std::size_t q = 0; q < k; ++q) {
          const std::size_t idx = (b * kc + q * channels + c) * plane + j;
          w[idx] = d.weights[q];
          mu[idx] = d.means[q];
          s[idx] = d.scales[q];
        }
      }
    }
  }
  const Shape shape = p.weights.shape();
  return {Tensor(shape, std::move(w)), Tensor(shape, std::move(mu)), Tensor(shape, std::move(s))};
}

// Memoizes CDF tables by determinized parameters. Purely a speedup: a table
// depends only on its key.
class CdfCache {
 public:
  explicit CdfCache(SymbolGrid grid, std::size_t capacity = 1u << 14)
      : grid_(grid), capacity_(capacity) {}

  const QuantizedCdf& get(const Mixture& m) {
    std::string key(3 * m.size() * sizeof(double), '\0');
    char* p = key.data();
    for (const auto* v : {&m.weights, &m.means, &m.scales}) {
      std::memcpy(p, v->data(), v->size() * sizeof(double));
      p += v->size() * sizeof(double);
    }
    auto it = tables_.find(key);
    if (it != tables_.end()) return it->second;
    if (tables_.size() >= capacity_) tables_.clear();
    return tables_.emplace(std::move(key), build_cdf(m, grid_)).first->second;
  }

 private:
  SymbolGrid grid_;
  std::size_t capacity_;
  std::unordered_map<std::string, QuantizedCdf> tables_;
};

// ---------------------------------------------------------------------------
// Reports

struct CodecReport {
  double total_bits = 0.0;  // 8 * container bytes
  double bits_z = 0.0;      // 8 * segment bytes
  double bits_y = 0.0;
  double bits_x = 0.0;
  double bpsp = 0.0;  // total_bits / (W * H * 3), original dimensions
  double theoretical_bits = 0.0;  // sum of -log2 p over every coded symbol
  double theoretical_z = 0.0;
  double theoretical_y = 0.0;
  double theoretical_x = 0.0;
  std::size_t clamp_count = 0;  // latent values clamped to the grid
  double wall_time = 0.0;       // seconds

  double header_bits() const { return total_bits - bits_z - bits_y - bits_x; }
  double payload_bits() const { return bits_z + bits_y + bits_x; }
};

inline CodecReport bpsp_report(const Bitstream& bs, std::size_t width, std::size_t height) {
  NLIC_REQUIRE(width >= 1 && height >= 1, ContractViolation, "bpsp of an empty image");
  CodecReport r;
  r.total_bits = 8.0 * static_cast<double>(bs.byte_size());
  r.bits_z = 8.0 * static_cast<double>(bs.z.size());
  r.bits_y = 8.0 * static_cast<double>(bs.y.size());
  r.bits_x = 8.0 * static_cast<double>(bs.x.size());
  r.bpsp = r.total_bits / static_cast<double>(width * height * 3);
  return r;
}

// Determinized parameters in coding order, for comparing the encoder's
// one-pass evaluation with the decoder's frontier evaluation.
struct ParamTrace {
  std::vector<Mixture> y;
  std::vector<Mixture> x;
};

namespace detail {

inline Tensor normalized_planes(const Image& img) {
  const auto grid = SymbolGrid::pixel();
  const std::size_t plane = img.width * img.height;
  Tensor t({1, 3, img.height, img.width});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) d[c * plane + i] = grid.value(img.samples[i * 3 + c]);
  }
  return t;
}

inline std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

inline int to_symbol(double v) { return static_cast<int>(pm::round_half_away(v)); }

inline double code_bits(const QuantizedCdf& cdf, int s) {
  return -pm::log2(static_cast<double>(cdf.freq(s)) / kCdfTotal);
}

struct PriorTables {
  std::vector<QuantizedCdf> tables;
  PriorTables(const ModelWeights& w) {
    const Tensor& psi = w.at("prior.psi");
    for (std::size_t c = 0; c < psi.dim(0); ++c) {
      tables.push_back(build_prior_cdf(psi, c, SymbolGrid::latent()));
    }
  }
};

inline void check_dimensions(std::size_t w, std::size_t h) {
  NLIC_REQUIRE(w >= 1 && h >= 1, DataError, "image has zero size ", w, "x", h);
  NLIC_REQUIRE(w <= kMaxDimension && h <= kMaxDimension, CapacityError, "image ", w, "x", h,
               " exceeds the ", kMaxDimension, " pixel limit per side");
}

}  // namespace detail

struct Compressed {
  Bitstream bitstream;
  CodecReport report;
};

inline Compressed compress(const Image& image, const ModelWeights& w, ParamTrace* trace = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  image.validate();
  detail::check_dimensions(image.width, image.height);
  const auto& cfg = w.config;
  const std::size_t k = cfg.mixtures_k, n = cfg.filters_n;

  Bitstream bs;
  bs.header.width = static_cast<std::uint32_t>(image.width);
  bs.header.height = static_cast<std::uint32_t>(image.height);
  const std::size_t pw = detail::round_up(image.width, cfg.pad_multiple());
  const std::size_t ph = detail::round_up(image.height, cfg.pad_multiple());
  bs.header.padded_width = static_cast<std::uint32_t>(pw);
  bs.header.padded_height = static_cast<std::uint32_t>(ph);
  bs.header.config_hash = cfg.hash();
  bs.header.weights_hash = w.hash();

  CodecReport report;
  const Image padded = pad_replicate(image, pw, ph);
  const Tensor x = detail::normalized_planes(padded);
  const Tensor y = analysis(w, x);
  const Quantized z_hat = round_quantize(hyper_analysis(w, y));
  const Quantized y_hat = round_quantize(y);
  report.clamp_count = z_hat.clamped + y_hat.clamped;

  {
    const detail::PriorTables prior(w);
    RangeEncoder enc;
    const std::size_t plane = z_hat.values.dim(2) * z_hat.values.dim(3);
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t j = 0; j < plane; ++j) {
        const int s = detail::to_symbol(z_hat.values.data()[c * plane + j]);
        enc.encode(s, prior.tables[c]);
        report.theoretical_z += detail::code_bits(prior.tables[c], s);
      }
    }
    bs.z = enc.finish();
  }

  {
    const Tensor hyper = hyper_synthesis(w, z_hat.values);
    const GmmTensors params = entropy_params_y(w, hyper, y_hat.values);
    const auto det = Determinizer::latent(cfg);
    CdfCache cache(det.grid);
    RangeEncoder enc;
    const std::size_t plane = y.dim(2) * y.dim(3);
    for (std::size_t j = 0; j < plane; ++j) {
      for (std::size_t c = 0; c < n; ++c) {
        const Mixture m = det(mixture_at(params, k, n, c, j));
        const QuantizedCdf& cdf = cache.get(m);
        const int s = detail::to_symbol(y_hat.values.data()[c * plane + j]);
        enc.encode(s, cdf);
        report.theoretical_y += detail::code_bits(cdf, s);
        if (trace) trace->y.push_back(m);
      }
    }
    bs.y = enc.finish();
  }

  {
    const Tensor features = synthesis(w, y_hat.values);
    const GmmTensors params = entropy_params_x(w, features, x);
    const auto det = Determinizer::pixel(cfg);
    CdfCache cache(det.grid);
    RangeEncoder enc;
    const std::size_t plane = pw * ph;
    for (std::size_t j = 0; j < plane; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        const Mixture m = det(mixture_at(params, k, 3, c, j));
        const QuantizedCdf& cdf = cache.get(m);
        const int s = padded.samples[j * 3 + c];
        enc.encode(s, cdf);
        report.theoretical_x += detail::code_bits(cdf, s);
        if (trace) trace->x.push_back(m);
      }
    }
    bs.x = enc.finish();
  }

  const CodecReport sizes = bpsp_report(bs, image.width, image.height);
  report.total_bits = sizes.total_bits;
  report.bits_z = sizes.bits_z;
  report.bits_y = sizes.bits_y;
  report.bits_x = sizes.bits_x;
  report.bpsp = sizes.bpsp;
  report.theoretical_bits = report.theoretical_z + report.theoretical_y + report.theoretical_x;
  report.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(bs), report};
}

inline Image decompress(const Bitstream& bs, const ModelWeights& w, ParamTrace* trace = nullptr) {
  const auto& cfg = w.config;
  const auto& hdr = bs.header;
  if (hdr.config_hash != cfg.hash()) {
    throw ConfigHashMismatchError(detail::concat(
        "bitstream was produced with model config hash ", hdr.config_hash,
        ", these weights have ", cfg.hash()));
  }
  if (hdr.weights_hash != w.hash()) {
    throw WeightsHashMismatchError(detail::concat(
        "bitstream was produced with weights hash ", hdr.weights_hash, ", these weights have ",
        w.hash()));
  }
  detail::check_dimensions(hdr.width, hdr.height);
  const std::size_t pw = hdr.padded_width, ph = hdr.padded_height;
  NLIC_REQUIRE(pw == detail::round_up(hdr.width, cfg.pad_multiple()) &&
                   ph == detail::round_up(hdr.height, cfg.pad_multiple()),
               DataError, "padded size ", pw, "x", ph, " inconsistent with image size ",
               hdr.width, "x", hdr.height);
  const std::size_t k = cfg.mixtures_k, n = cfg.filters_n;
  const std::size_t yh = ph / cfg.downsample_factor, yw = pw / cfg.downsample_factor;
  const std::size_t zh = yh / cfg.hyper_downsample, zw = yw / cfg.hyper_downsample;
  const auto latent = SymbolGrid::latent();

  Tensor z_hat({1, n, zh, zw});
  {
    const detail::PriorTables prior(w);
    RangeDecoder dec(bs.z);
    auto d = z_hat.mutable_data();
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t j = 0; j < zh * zw; ++j) {
        d[c * zh * zw + j] = latent.value(dec.decode(prior.tables[c]));
      }
    }
  }

  Tensor y_hat({1, n, yh, yw});
  {
    const Tensor hyper = hyper_synthesis(w, z_hat);
    const auto head = latent_head_at(w);
    const auto det = Determinizer::latent(cfg);
    CdfCache cache(latent);
    RangeDecoder dec(bs.y);
    std::vector<double> frontier(n * yh * yw, 0.0);
    std::vector<Mixture> mix;
    for (std::size_t i = 0; i < yh; ++i) {
      for (std::size_t j = 0; j < yw; ++j) {
        head.evaluate(frontier, n, yh, yw, hyper, i, j, mix);
        for (std::size_t c = 0; c < n; ++c) {
          const Mixture m = det(mix[c]);
          frontier[c * yh * yw + i * yw + j] = latent.value(dec.decode(cache.get(m)));
          if (trace) trace->y.push_back(m);
        }
      }
    }
    y_hat = Tensor({1, n, yh, yw}, std::move(frontier));
  }

  Image padded(pw, ph);
  {
    const Tensor features = synthesis(w, y_hat);
    const auto head = pixel_head_at(w);
    const auto det = Determinizer::pixel(cfg);
    CdfCache cache(det.grid);
    RangeDecoder dec(bs.x);
    std::vector<double> frontier(3 * ph * pw, 0.0);
    std::vector<Mixture> mix;
    for (std::size_t i = 0; i < ph; ++i) {
      for (std::size_t j = 0; j < pw; ++j) {
        head.evaluate(frontier, 3, ph, pw, features, i, j, mix);
        for (std::size_t c = 0; c < 3; ++c) {
          const Mixture m = det(mix[c]);
          const int s = dec.decode(cache.get(m));
          padded.at(i, j, c) = static_cast<std::uint8_t>(s);
          frontier[c * ph * pw + i * pw + j] = det.grid.value(s);
          if (trace) trace->x.push_back(m);
        }
      }
    }
  }
  return crop(padded, hdr.width, hdr.height);
}

inline std::vector<std::uint8_t> compress_bytes(const Image& image, const ModelWeights& w,
                                                CodecReport* report = nullptr) {
  auto c = compress(image, w);
  if (report) *report = c.report;
  return write_container(c.bitstream);
}

inline Image decompress_bytes(std::span<const std::uint8_t> bytes, const ModelWeights& w) {
  return decompress(read_container(bytes), w);
}

}  // namespace nlic
