// nlic: train, compress, decompress, evaluate.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 integrity
// error (bad magic, CRC, truncation, version or hash mismatch).

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>

#include "nlic/codec.hpp"
#include "nlic/image_png.hpp"
#include "nlic/train.hpp"

namespace {

std::string read_text(const std::string& path) {
  const auto bytes = nlic::read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              std::string metrics, std::size_t steps) {
  const auto cfg = nlic::TrainConfig::from_text(read_text(config));
  const auto dataset = nlic::load_dataset(data, nlic::read_image);
  dataset.validate(cfg.patch_size);
  if (metrics.empty()) metrics = out + ".metrics.jsonl";
  std::ofstream log(metrics, std::ios::app);
  NLIC_REQUIRE(log, nlic::DataError, "cannot open metrics log '", metrics, "'");
  nlic::TrainOptions opt;
  opt.metrics = &log;
  opt.checkpoint_path = out + ".ckpt";
  opt.max_steps = steps;
  const auto result = nlic::train(cfg, dataset, opt);
  nlic::save_weights(result.weights, out);
  const auto& last = result.log.back();
  std::cout << "trained " << result.log.size() << " steps, final loss " << last.loss
            << " bpsp; weights written to " << out << "\n";
  return 0;
}

int cmd_compress(const std::string& weights, const std::string& in, const std::string& out) {
  const auto w = nlic::load_weights(weights);
  const auto image = nlic::read_image(in);
  nlic::CodecReport r;
  const auto bytes = nlic::compress_bytes(image, w, &r);
  nlic::write_bytes(out, bytes);
  std::cout << std::fixed << std::setprecision(4) << in << ": " << image.width << "x"
            << image.height << ", " << bytes.size() << " bytes, " << r.bpsp << " bpsp (z "
            << r.bits_z << ", y " << r.bits_y << ", x " << r.bits_x << " bits)\n";
  return 0;
}

int cmd_decompress(const std::string& weights, const std::string& in, const std::string& out) {
  const auto w = nlic::load_weights(weights);
  const auto image = nlic::decompress_bytes(nlic::read_bytes(in), w);
  nlic::write_image(out, image);
  return 0;
}

int cmd_eval(const std::string& weights, const std::string& data, bool json) {
  const auto w = nlic::load_weights(weights);
  const auto dataset = nlic::load_dataset(data, nlic::read_image);
  NLIC_REQUIRE(dataset.size() > 0, nlic::DataError, "no .ppm or .png images in '", data, "'");
  const auto result = nlic::evaluate(w, dataset);
  if (json) {
    for (const auto& row : result.rows) {
      std::cout << nlohmann::json{{"path", row.path},
                                  {"bpsp", row.report.bpsp},
                                  {"bits_z", row.report.bits_z},
                                  {"bits_y", row.report.bits_y},
                                  {"bits_x", row.report.bits_x}}
                       .dump()
                << "\n";
    }
    return 0;
  }
  std::cout << std::left << std::setw(40) << "image" << std::right << std::setw(10) << "bpsp"
            << std::setw(14) << "gap (bits)" << "\n";
  std::cout << std::fixed << std::setprecision(3);
  for (const auto& row : result.rows) {
    std::cout << std::left << std::setw(40) << std::filesystem::path(row.path).filename().string()
              << std::right << std::setw(10) << row.report.bpsp << std::setw(14)
              << row.report.total_bits - row.report.theoretical_bits << "\n";
  }
  std::cout << std::left << std::setw(40) << "Ours" << std::right << std::setw(10)
            << result.mean_bpsp << std::setw(14) << result.mean_gap_bits << "\n";
  return 0;
}

int cmd_synth(const std::string& out, std::size_t count, std::size_t size, std::uint64_t seed) {
  std::filesystem::create_directories(out);
  const auto d = nlic::synthetic_dataset(count, size, seed);
  for (std::size_t i = 0; i < d.size(); ++i) {
    nlic::write_ppm((std::filesystem::path(out) / (d.paths[i] + ".ppm")).string(), d.images[i]);
  }
  std::cout << "wrote " << d.size() << " images to " << out << "\n";
  return 0;
}

// Quick invariant checks on an untrained model: pmf normalization, coder
// round trip, network causality, encoder/decoder agreement, lossless round trip.
int cmd_selftest() {
  int failures = 0;
  auto report = [&](const char* name, bool ok) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << "\n";
    failures += !ok;
  };
  std::mt19937_64 rng(1);
  auto u = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };

  bool ok = true;
  const auto pixel = nlic::SymbolGrid::pixel();
  for (int i = 0; i < 200 && ok; ++i) {
    nlic::Mixture m{{0.2, 0.3, 0.5}, {u() * 2 - 1, u() * 2 - 1, u() * 2 - 1},
                    {0.001 + u(), 0.001 + u(), 0.001 + u()}};
    double total = 0.0;
    for (int s = pixel.lo; s <= pixel.hi; ++s) total += nlic::gmm_pmf(s, m, pixel);
    const auto cdf = nlic::build_cdf(m, pixel);
    ok = std::abs(total - 1.0) < 1e-12 && cdf.cum.back() == nlic::kCdfTotal;
    for (std::size_t s = 0; s + 1 < cdf.cum.size() && ok; ++s) ok = cdf.cum[s] < cdf.cum[s + 1];
  }
  report("pmf normalization and CDF tables", ok);

  {
    nlic::QuantizedCdf cdf{0, {0, 100, 30000, 65000, 65536}};
    std::vector<int> symbols(20000);
    nlic::RangeEncoder enc;
    for (auto& s : symbols) enc.encode(s = static_cast<int>(rng() % 4), cdf);
    const auto bytes = enc.finish();
    nlic::RangeDecoder dec(bytes);
    ok = true;
    for (int s : symbols) ok = ok && dec.decode(cdf) == s;
    report("range coder round trip", ok);
  }

  nlic::ModelConfig cfg;
  cfg.filters_n = 8;
  auto w = nlic::init_weights(cfg, 1);
  for (auto& [key, t] : w.tensors) {
    if (key == "prior.psi") continue;
    for (auto& v : t.mutable_data()) v = (u() - 0.5) * 0.4;
  }
  {
    nlic::Tensor feats({1, 8, 6, 6}), x({1, 3, 6, 6});
    for (auto& v : feats.mutable_data()) v = u() - 0.5;
    for (auto& v : x.mutable_data()) v = u() * 2 - 1;
    const auto base = nlic::entropy_params_x(w, feats, x);
    ok = true;
    for (std::size_t p = 0; p < 36 && ok; ++p) {
      nlic::Tensor pert = x.detach();
      for (std::size_t c = 0; c < 3; ++c) pert.mutable_data()[c * 36 + p] += 0.5;
      const auto out = nlic::entropy_params_x(w, feats, pert);
      for (std::size_t oc = 0; oc < base.means.dim(1) && ok; ++oc) {
        for (std::size_t q = 0; q <= p; ++q) {
          ok = ok && base.means.data()[oc * 36 + q] == out.means.data()[oc * 36 + q] &&
               base.scales.data()[oc * 36 + q] == out.scales.data()[oc * 36 + q];
        }
      }
    }
    report("pixel context causality", ok);
  }

  {
    nlic::Image img(23, 17);
    for (auto& s : img.samples) s = static_cast<std::uint8_t>(rng() & 255);
    nlic::ParamTrace enc, dec;
    const auto c = nlic::compress(img, w, &enc);
    const auto back = nlic::decompress(nlic::read_container(nlic::write_container(c.bitstream)), w, &dec);
    report("lossless round trip", back == img);
    ok = enc.x.size() == dec.x.size() && enc.y.size() == dec.y.size();
    for (std::size_t i = 0; ok && i < enc.x.size(); ++i) {
      ok = enc.x[i].means == dec.x[i].means && enc.x[i].scales == dec.x[i].scales &&
           enc.x[i].weights == dec.x[i].weights;
    }
    for (std::size_t i = 0; ok && i < enc.y.size(); ++i) {
      ok = enc.y[i].means == dec.y[i].means && enc.y[i].scales == dec.y[i].scales &&
           enc.y[i].weights == dec.y[i].weights;
    }
    report("encoder/decoder parameter agreement", ok);
  }
  return failures ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned lossless image codec"};
  app.require_subcommand(1);

  std::string config, data, out, in, weights, metrics;
  std::size_t steps = 0, count = 16, size = 32;
  std::uint64_t seed = 0;
  bool json = false;

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "key=value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data, "directory of .ppm/.png images")->required();
  train->add_option("--out", out, "output weight file")->required();
  train->add_option("--metrics", metrics, "metrics log (default <out>.metrics.jsonl)");
  train->add_option("--steps", steps, "stop after this many steps (default: config epochs)");

  auto* compress = app.add_subcommand("compress", "Compress an image");
  compress->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  compress->add_option("--in", in, ".ppm or .png image")->required()->check(CLI::ExistingFile);
  compress->add_option("--out", out, "bitstream")->required();

  auto* decompress = app.add_subcommand("decompress", "Decompress a bitstream");
  decompress->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  decompress->add_option("--in", in, "bitstream")->required()->check(CLI::ExistingFile);
  decompress->add_option("--out", out, "image; .png writes PNG, anything else PPM")->required();

  auto* eval = app.add_subcommand("eval", "Compress every image in a directory and report bpsp");
  eval->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data)->required();
  eval->add_flag("--json", json, "one JSON object per image");

  auto* synth = app.add_subcommand("synth", "Write synthetic training images");
  synth->add_option("--out", out)->required();
  synth->add_option("--count", count);
  synth->add_option("--size", size);
  synth->add_option("--seed", seed);

  auto* selftest = app.add_subcommand("selftest", "Run invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*train) return cmd_train(config, data, out, metrics, steps);
    if (*compress) return cmd_compress(weights, in, out);
    if (*decompress) return cmd_decompress(weights, in, out);
    if (*eval) return cmd_eval(weights, data, json);
    if (*synth) return cmd_synth(out, count, size, seed);
    if (*selftest) return cmd_selftest();
  } catch (const nlic::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const nlic::IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 3;
  } catch (const nlic::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
