#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bvit/bvit.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw bvit::FormatError(bvit::FormatError::Kind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Binary PPM (P6, maxval 255) or raw H x W x 3 bytes.
std::vector<std::uint8_t> read_image(const std::string& path, std::size_t side) {
  const auto bytes = read_binary_file(path);
  const std::size_t want = side * side * 3;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    if (bytes.size() != want)
      throw bvit::InputError("image " + path + ": raw RGB8 input must be " + std::to_string(side) + "x" + std::to_string(side) +
                             "x3 = " + std::to_string(want) + " bytes, got " + std::to_string(bytes.size()));
    return bytes;
  }
  std::size_t pos = 2;
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw bvit::InputError("image " + path + ": malformed PPM header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
    return v;
  };
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  ++pos;  // single whitespace before the raster
  if (maxval != 255) throw bvit::InputError("image " + path + ": PPM maxval must be 255, got " + std::to_string(maxval));
  if (w != side || h != side)
    throw bvit::InputError("image " + path + ": model expects " + std::to_string(side) + "x" + std::to_string(side) + ", got " +
                           std::to_string(w) + "x" + std::to_string(h));
  if (bytes.size() < pos + want) throw bvit::InputError("image " + path + ": PPM raster truncated");
  return {bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + want)};
}

int run_infer(const std::string& weights, const std::string& image, std::size_t top_k) {
  const auto model = bvit::load_weights<float>(weights);
  const auto& cfg = model.config();
  const auto px = read_image(image, cfg.img_size);
  const auto logits = model.forward(bvit::normalize_pixels<float>(px, 1, cfg), bvit::Ctx<float>{});
  std::vector<std::size_t> order(logits.cols());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min(top_k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return logits(0, a) > logits(0, b) || (logits(0, a) == logits(0, b) && a < b); });
  std::cout << "model " << cfg.name << "\n";
  for (std::size_t i = 0; i < k; ++i) std::cout << "top" << i + 1 << "  class " << order[i] << "  logit " << logits(0, order[i]) << "\n";
  return 0;
}

int run_count(const std::string& config, bool json, bool per_layer) {
  const auto report = bvit::count_costs(bvit::load_config(config));
  const bool holds = report.ops() == static_cast<double>(report.bops) / 64.0 + static_cast<double>(report.flops);
  if (json) {
    std::cout << bvit::to_json(report).dump(2) << "\n";
  } else {
    std::cout << bvit::to_text(report, per_layer);
    std::cout << "identity ops = bops/64 + flops: " << (holds ? "holds" : "VIOLATED") << "\n";
  }
  return holds ? 0 : kExitFailure;
}

int run_repcap(const std::string& desc, bool json) {
  const auto chain = bvit::load_repcap(desc);
  if (json)
    std::cout << bvit::to_json(chain).dump(2) << "\n";
  else
    std::cout << bvit::to_text(chain);
  return 0;
}

struct TrainArgs {
  std::string config = "tiny_pyramid";
  std::string trace;
  std::string save;
  bvit::TrainOptions opt;
};

int run_train(const TrainArgs& a) {
  const auto cfg = bvit::load_config(a.config);
  std::ofstream trace;
  if (!a.trace.empty()) {
    trace.open(a.trace);
    if (!trace) throw bvit::FormatError(bvit::FormatError::Kind::io, "cannot write " + a.trace);
  }
  const std::size_t every = std::max<std::size_t>(1, a.opt.steps / 10);
  const auto res = bvit::train_toy(cfg, a.opt, [&](const bvit::TrainRecord& r) {
    if (trace.is_open()) trace << bvit::to_json(r).dump() << "\n";
    if (r.step % every == 0 || r.step + 1 == a.opt.steps)
      std::cout << "step " << r.step << "  loss " << r.loss << "  acc " << r.accuracy << "  lr " << r.lr << "\n";
  });
  if (res.diverged_at) {
    if (trace.is_open()) trace << bvit::to_json(res.trace.back()).dump() << "\n";
    std::cerr << "train-toy: loss is not finite at step " << *res.diverged_at << "\n";
    return kExitFailure;
  }
  std::cout << "final training accuracy " << res.final_accuracy << "\n";
  if (!a.save.empty()) {
    bvit::save_weights(res.model, a.save);
    std::cout << "saved " << a.save << "\n";
  }
  return 0;
}

int run_selftest(std::uint64_t seed, std::size_t gemm_cases) {
  const bool ok = bvit::run_selftest(std::cout, seed, gemm_cases);
  std::cout << (ok ? "selftest: all suites passed" : "selftest: FAILED") << "\n";
  return ok ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binary vision transformer engine"};
  app.require_subcommand(1);

  std::string weights, image;
  std::size_t top_k = 5;
  auto* infer = app.add_subcommand("infer", "Classify one image with saved weights");
  infer->add_option("--weights", weights, "Weight container")->required();
  infer->add_option("--image", image, "Binary PPM or raw RGB8 image")->required();
  infer->add_option("--top-k", top_k, "Number of classes to print")->check(CLI::PositiveNumber);

  std::string config;
  bool json = false, per_layer = false;
  auto* count = app.add_subcommand("count", "Print FLOPs, BOPs, OPs and parameters of a configuration");
  count->add_option("--config", config, "Preset name or configuration file")->required();
  count->add_flag("--json", json, "Emit JSON");
  count->add_flag("--per-layer", per_layer, "Include the per-layer table");

  std::string desc;
  bool repcap_json = false;
  auto* repcap = app.add_subcommand("repcap", "Evaluate a representational-capability description");
  repcap->add_option("--desc", desc, "Capability description file")->required();
  repcap->add_flag("--json", repcap_json, "Emit JSON");

  TrainArgs ta;
  auto* train = app.add_subcommand("train-toy", "Train on the synthetic 10-class task");
  train->add_option("--config", ta.config, "Preset name or configuration file")->capture_default_str();
  train->add_option("--steps", ta.opt.steps)->capture_default_str();
  train->add_option("--batch", ta.opt.batch)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", ta.opt.lr)->capture_default_str()->check(CLI::NonNegativeNumber);
  train->add_option("--seed", ta.opt.seed)->capture_default_str();
  train->add_option("--dataset-size", ta.opt.dataset_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_flag("--distill", ta.opt.distill, "Distil from an in-repo full-precision teacher");
  train->add_option("--temperature", ta.opt.temperature)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--teacher-steps", ta.opt.teacher_steps)->capture_default_str();
  train->add_option("--trace", ta.trace, "Write the metrics trace (JSON lines)");
  train->add_option("--save", ta.save, "Save the trained weights");

  std::uint64_t seed = 0;
  std::size_t gemm_cases = 1000;
  auto* selftest = app.add_subcommand("selftest", "Run the GEMM-oracle and gradient-check suites");
  selftest->add_option("--seed", seed)->capture_default_str();
  selftest->add_option("--gemm-cases", gemm_cases)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*infer) return run_infer(weights, image, top_k);
    if (*count) return run_count(config, json, per_layer);
    if (*repcap) return run_repcap(desc, repcap_json);
    if (*train) return run_train(ta);
    if (*selftest) return run_selftest(seed, gemm_cases);
  } catch (const bvit::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const bvit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitInput;
  } catch (const bvit::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const bvit::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kExitInput;
  } catch (const bvit::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
