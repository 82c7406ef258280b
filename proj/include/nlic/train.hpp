#pragma once

// Training: rate loss with the warm-up L2 term, patch batches, Adam, metrics
// log, evaluation through the real codec, and a synthetic image generator.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "nlic/codec.hpp"
#include "nlic/config.hpp"
#include "nlic/image.hpp"
#include "nlic/network.hpp"

namespace nlic {

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t patch_size = 32;
  double lr_initial = 1e-4;
  double lr_after = 1e-5;
  std::size_t lr_switch_epoch = 10;
  std::size_t epochs = 40;
  double lambda_warm = 0.6;
  std::size_t lambda_warm_epochs = 2;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 disables
  double grad_clip = 0.0;            // global L2 norm bound; 0 disables
  bool augment = false;              // colour augmentation in BatchSampler
  ModelConfig model;

  void validate() const {
    model.validate();
    NLIC_REQUIRE(batch_size >= 1, ConfigError, "batch_size must be >= 1");
    NLIC_REQUIRE(patch_size >= model.pad_multiple() && patch_size % model.pad_multiple() == 0,
                 ConfigError, "patch_size ", patch_size, " must be a positive multiple of ",
                 model.pad_multiple());
    NLIC_REQUIRE(lr_initial > 0.0 && lr_after > 0.0, ConfigError, "learning rates must be > 0");
    NLIC_REQUIRE(lambda_warm >= 0.0, ConfigError, "lambda_warm must be >= 0");
    NLIC_REQUIRE(grad_clip >= 0.0, ConfigError, "grad_clip must be >= 0");
    NLIC_REQUIRE(epochs >= 1, ConfigError, "epochs must be >= 1");
  }

  double lr_at(std::size_t epoch) const { return epoch < lr_switch_epoch ? lr_initial : lr_after; }
  double lambda_at(std::size_t epoch) const {
    return epoch < lambda_warm_epochs ? lambda_warm : 0.0;
  }

  // Training keys and model keys share one flat file.
  static TrainConfig from_text(std::string_view text) {
    TrainConfig t;
    for (const auto& [k, v] : parse_key_values(text)) {
      if (k == "batch_size") t.batch_size = static_cast<std::size_t>(parse_int(k, v));
      else if (k == "patch_size") t.patch_size = static_cast<std::size_t>(parse_int(k, v));
      else if (k == "lr_initial") t.lr_initial = parse_double(k, v);
      else if (k == "lr_after") t.lr_after = parse_double(k, v);
      else if (k == "lr_switch_epoch") t.lr_switch_epoch = static_cast<std::size_t>(parse_int(k, v));
      else if (k == "epochs") t.epochs = static_cast<std::size_t>(parse_int(k, v));
      else if (k == "lambda_warm") t.lambda_warm = parse_double(k, v);
      else if (k == "lambda_warm_epochs") t.lambda_warm_epochs = static_cast<std::size_t>(parse_int(k, v));
      else if (k == "seed") t.seed = static_cast<std::uint64_t>(parse_int(k, v));
      else if (k == "checkpoint_every") t.checkpoint_every = static_cast<std::size_t>(parse_int(k, v));
      else if (k == "grad_clip") t.grad_clip = parse_double(k, v);
      else if (k == "augment") t.augment = parse_bool(k, v);
      else if (!t.model.apply(k, v)) throw ConfigError("unknown config key '" + k + "'");
    }
    t.validate();
    return t;
  }
};

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  std::vector<std::string> paths;  // one per image; synthetic sets use names
  std::vector<Image> images;

  std::size_t size() const { return images.size(); }

  void validate(std::size_t patch) const {
    NLIC_REQUIRE(!images.empty(), DataError, "dataset is empty");
    for (std::size_t i = 0; i < images.size(); ++i) {
      NLIC_REQUIRE(images[i].width >= patch && images[i].height >= patch, DataError, "image '",
                   paths[i], "' is ", images[i].width, "x", images[i].height,
                   ", smaller than the ", patch, "x", patch, " patch");
    }
  }
};

inline bool is_image_path(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".png";
}

// Every .ppm/.png file in `dir`, sorted by name.
inline Dataset load_dataset(const std::string& dir,
                            const std::function<Image(const std::string&)>& reader) {
  NLIC_REQUIRE(std::filesystem::is_directory(dir), DataError, "'", dir, "' is not a directory");
  Dataset d;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_path(e.path())) d.paths.push_back(e.path().string());
  }
  std::sort(d.paths.begin(), d.paths.end());
  for (const auto& p : d.paths) d.images.push_back(reader(p));
  return d;
}

// Assembles [B, 3, P, P] batches of random crops. Images are visited in a
// fresh shuffled order every epoch.
class BatchSampler {
 public:
  // augment: each patch gets a random channel permutation and a random
  // per-channel inversion v -> 255 - v.
  BatchSampler(const Dataset& data, std::size_t batch, std::size_t patch, std::uint64_t seed,
               bool augment = false)
      : data_(data), batch_(batch), patch_(patch), augment_(augment), rng_(seed) {
    data.validate(patch);
  }

  std::size_t steps_per_epoch() const { return (data_.size() + batch_ - 1) / batch_; }

  Tensor next() {
    const auto grid = SymbolGrid::pixel();
    const std::size_t plane = patch_ * patch_;
    Tensor t({batch_, 3, patch_, patch_});
    auto d = t.mutable_data();
    for (std::size_t b = 0; b < batch_; ++b) {
      if (cursor_ == order_.size()) {
        order_.resize(data_.size());
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      const Image& img = data_.images[order_[cursor_++]];
      const std::size_t oy = rng_() % (img.height - patch_ + 1);
      const std::size_t ox = rng_() % (img.width - patch_ + 1);
      std::array<std::size_t, 3> src{0, 1, 2};
      unsigned flip = 0;
      if (augment_) {
        std::shuffle(src.begin(), src.end(), rng_);
        flip = static_cast<unsigned>(rng_() & 7u);
      }
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < patch_; ++y) {
          for (std::size_t x = 0; x < patch_; ++x) {
            const int v = img.at(oy + y, ox + x, src[c]);
            d[(b * 3 + c) * plane + y * patch_ + x] = grid.value((flip >> c) & 1u ? 255 - v : v);
          }
        }
      }
    }
    return t;
  }

 private:
  const Dataset& data_;
  std::size_t batch_, patch_;
  bool augment_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Loss

struct LossParts {
  Tensor total;
  double r_x = 0.0;  // bits per subpixel
  double r_y = 0.0;
  double r_z = 0.0;
  double lambda_term = 0.0;
};

// Rate of x, y and z in bits per subpixel, plus lambda * mean((x - mixture
// mean)^2). y and z get additive uniform noise from `rng`.
template <class Rng>
LossParts loss(const Tensor& x_norm, const ModelWeights& w, double lambda, Rng& rng) {
  const auto& c = w.config;
  const auto latent = SymbolGrid::latent(), pixel = SymbolGrid::pixel();
  const Tensor y = analysis(w, x_norm);
  const Tensor z_tilde = noisy_quantize(hyper_analysis(w, y), rng);
  const Tensor hyper = hyper_synthesis(w, z_tilde);
  const Tensor y_tilde = noisy_quantize(y, rng);
  const GmmTensors py = entropy_params_y(w, hyper, y_tilde);
  const GmmTensors px = entropy_params_x(w, synthesis(w, y_tilde), x_norm);

  const double subpixels = static_cast<double>(x_norm.numel());
  const Tensor r_z = scale(factorized_bits(z_tilde, w.at("prior.psi"), latent), 1.0 / subpixels);
  const Tensor r_y =
      scale(gmm_bits(py.weights, py.means, py.scales, y_tilde, c.mixtures_k, latent), 1.0 / subpixels);
  const Tensor r_x =
      scale(gmm_bits(px.weights, px.means, px.scales, x_norm, c.mixtures_k, pixel), 1.0 / subpixels);

  LossParts out;
  Tensor total = add(add(r_x, r_y), r_z);
  if (lambda != 0.0) {
    const Tensor mu = sum_channel_groups(mul(px.weights, px.means), c.mixtures_k);
    const Tensor l2 = scale(mean(square(sub(x_norm, mu))), lambda);
    out.lambda_term = l2.item();
    total = add(total, l2);
  }
  out.r_x = r_x.item();
  out.r_y = r_y.item();
  out.r_z = r_z.item();
  if (!std::isfinite(total.item())) {
    throw NumericError(detail::concat("non-finite loss: R_x=", out.r_x, " R_y=", out.r_y,
                                      " R_z=", out.r_z, " lambda_term=", out.lambda_term));
  }
  out.total = total;
  return out;
}

// Global L2 norm of all gradients; rescales them to at most max_norm when
// max_norm > 0.
inline double clip_grad_norm(ModelWeights& w, double max_norm) {
  double sq = 0.0;
  for (auto& [key, p] : w.tensors) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  NLIC_REQUIRE(std::isfinite(norm), NumericError, "non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [key, p] : w.tensors) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Adam

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ModelWeights& w, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [key, p] : w.tensors) {
      if (!p.has_grad()) continue;
      auto& [m, v] = state_[key];
      if (m.empty()) {
        m.assign(p.numel(), 0.0);
        v.assign(p.numel(), 0.0);
      }
      auto d = p.mutable_data();
      const auto g = p.grad();
      for (std::size_t i = 0; i < d.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        d[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
      p.zero_grad();
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

// ---------------------------------------------------------------------------
// Training loop

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double r_x = 0.0, r_y = 0.0, r_z = 0.0;
  double lambda_term = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping

  nlohmann::json to_json() const {
    return {{"step", step}, {"epoch", epoch}, {"loss", loss}, {"r_x", r_x}, {"r_y", r_y},
            {"r_z", r_z},   {"lambda_term", lambda_term},   {"lr", lr}, {"grad_norm", grad_norm}};
  }
};

struct TrainOptions {
  std::ostream* metrics = nullptr;  // one JSON object per line, flushed per step
  std::string checkpoint_path;      // written every checkpoint_every steps
  std::size_t max_steps = 0;        // overrides epochs * steps_per_epoch when > 0
};

struct TrainResult {
  ModelWeights weights;
  std::vector<StepMetrics> log;
};

inline TrainResult train(const TrainConfig& cfg, const Dataset& data,
                         const TrainOptions& opt = {}) {
  cfg.validate();
  BatchSampler sampler(data, cfg.batch_size, cfg.patch_size, cfg.seed ^ 0x5eed5eedull,
                       cfg.augment);
  TrainResult out;
  out.weights = init_weights(cfg.model, cfg.seed);
  out.weights.set_requires_grad(true);
  Adam adam;
  std::mt19937_64 noise(cfg.seed ^ 0x6e6f697365ull);
  const std::size_t per_epoch = sampler.steps_per_epoch();
  const std::size_t steps = opt.max_steps ? opt.max_steps : cfg.epochs * per_epoch;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t epoch = step / per_epoch;
    const Tensor batch = sampler.next();
    StepMetrics m;
    m.step = step;
    m.epoch = epoch;
    m.lr = cfg.lr_at(epoch);
    {
      const LossParts parts = loss(batch, out.weights, cfg.lambda_at(epoch), noise);
      m.loss = parts.total.item();
      m.r_x = parts.r_x;
      m.r_y = parts.r_y;
      m.r_z = parts.r_z;
      m.lambda_term = parts.lambda_term;
      backward(parts.total);
    }
    m.grad_norm = clip_grad_norm(out.weights, cfg.grad_clip);
    adam.step(out.weights, m.lr);
    if (opt.metrics) *opt.metrics << m.to_json().dump() << std::endl;
    out.log.push_back(m);
    if (cfg.checkpoint_every && !opt.checkpoint_path.empty() && (step + 1) % cfg.checkpoint_every == 0) {
      save_weights(out.weights, opt.checkpoint_path);
    }
  }
  out.weights.set_requires_grad(false);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation through the real codec

struct EvalRow {
  std::string path;
  CodecReport report;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  double mean_bpsp = 0.0;
  double mean_gap_bits = 0.0;  // actual minus theoretical, per image
};

inline EvalResult evaluate(const ModelWeights& w, const Dataset& data) {
  EvalResult r;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Image& img = data.images[i];
    CodecReport rep;
    const auto bytes = compress_bytes(img, w, &rep);
    if (decompress_bytes(bytes, w) != img) {
      throw IntegrityError("round trip failed for '" + data.paths[i] + "'");
    }
    r.rows.push_back({data.paths[i], rep});
    r.mean_bpsp += rep.bpsp;
    r.mean_gap_bits += rep.total_bits - rep.theoretical_bits;
  }
  if (!r.rows.empty()) {
    r.mean_bpsp /= static_cast<double>(r.rows.size());
    r.mean_gap_bits /= static_cast<double>(r.rows.size());
  }
  return r;
}

// Rate of an image in bits under rounding instead of noise, from the same
// pmfs the loss uses (no determinization, no fixed-point tables).
inline double rounded_rate_bits(const ModelWeights& w, const Image& image) {
  const auto& c = w.config;
  const Image padded = pad_replicate(image, detail::round_up(image.width, c.pad_multiple()),
                                     detail::round_up(image.height, c.pad_multiple()));
  const Tensor x = detail::normalized_planes(padded);
  const Tensor y = analysis(w, x);
  const Tensor z_hat = round_quantize(hyper_analysis(w, y)).values;
  const Tensor y_hat = round_quantize(y).values;
  const auto latent = SymbolGrid::latent();
  const GmmTensors py = entropy_params_y(w, hyper_synthesis(w, z_hat), y_hat);
  const GmmTensors px = entropy_params_x(w, synthesis(w, y_hat), x);
  return factorized_bits(z_hat, w.at("prior.psi"), latent).item() +
         gmm_bits(py.weights, py.means, py.scales, y_hat, c.mixtures_k, latent).item() +
         gmm_bits(px.weights, px.means, px.scales, x, c.mixtures_k, SymbolGrid::pixel()).item();
}

// ---------------------------------------------------------------------------
// Synthetic images: flat colours, gradients, stripes and checkers, smooth
// waves, and dithered gradients, cycling through the kinds.

inline Image synthetic_image(std::size_t kind, std::size_t w, std::size_t h, std::mt19937_64& rng) {
  auto u = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  Image img(w, h);
  double base[3], dx[3], dy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 40.0 + 175.0 * u();
    dx[c] = (u() - 0.5) * 6.0;
    dy[c] = (u() - 0.5) * 6.0;
  }
  const std::size_t period = 2 + rng() % 6;
  const double freq = 0.2 + 0.6 * u();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = base[c];
        switch (kind % 5) {
          case 0: break;
          case 1: v += dx[c] * double(x) + dy[c] * double(y); break;
          case 2: v += ((x / period + y / period) % 2 ? 50.0 : -50.0); break;
          case 3: v += 60.0 * std::sin(freq * double(x) + 0.7 * double(c)) * std::cos(freq * double(y)); break;
          case 4: v += dx[c] * double(x) + 4.0 * (u() - 0.5); break;
        }
        img.at(y, x, static_cast<std::size_t>(c)) =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
      }
    }
  }
  return img;
}

inline Dataset synthetic_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < count; ++i) {
    d.paths.push_back("synthetic_" + std::to_string(i));
    d.images.push_back(synthetic_image(i, size, size, rng));
  }
  return d;
}

inline Image uniform_noise_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  Image img(w, h);
  for (auto& s : img.samples) s = static_cast<std::uint8_t>(rng() & 255);
  return img;
}

}  // namespace nlic
