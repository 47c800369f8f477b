#pragma once

// Static analyzers over a ModelConfig: multiply-accumulate and parameter
// accounting, and the element-wise representational-capability calculus.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bvit/config_io.hpp"
#include "bvit/errors.hpp"
#include "bvit/model.hpp"

namespace bvit {

// ---------------------------------------------------------------------------
// Cost accounting. One multiply-accumulate counts as one FLOP (full
// precision) or one BOP (binary). Elementwise ops, softmax and norms are free.

struct LayerCost {
  std::string name;
  std::string kind;  // patch_embed | bifc | attn_matmul | linear | params
  std::uint64_t flops = 0;
  std::uint64_t bops = 0;
  std::uint64_t params = 0;
};

struct CostReport {
  std::string model;
  std::uint64_t flops = 0;
  std::uint64_t bops = 0;
  std::uint64_t params = 0;
  std::vector<LayerCost> per_layer;

  double ops() const { return static_cast<double>(bops) / 64.0 + static_cast<double>(flops); }

  void add(LayerCost c) {
    flops += c.flops;
    bops += c.bops;
    params += c.params;
    per_layer.push_back(std::move(c));
  }
};

namespace detail {

inline std::uint64_t bn_params(std::size_t c) { return 2 * c; }
inline std::uint64_t rprelu_params(std::size_t c) { return 3 * c; }

inline LayerCost bifc_cost(std::string name, std::size_t tokens, std::size_t din, std::size_t dout) {
  return {std::move(name), "bifc", 0, static_cast<std::uint64_t>(tokens) * din * dout,
          static_cast<std::uint64_t>(din) * dout + din + bn_params(dout) + rprelu_params(dout)};
}

inline LayerCost linear_cost(std::string name, std::string kind, std::size_t tokens, std::size_t din, std::size_t dout) {
  return {std::move(name), std::move(kind), static_cast<std::uint64_t>(tokens) * din * dout, 0,
          static_cast<std::uint64_t>(din) * dout + dout};
}

}  // namespace detail

/// Cost of a model built from `cfg` on one image. Parameter counts cover every
/// learnable tensor (binary weights one per element); BN running statistics
/// and the derived weight scale are not parameters.
inline CostReport count_costs(const ModelConfig& cfg) {
  cfg.validate();
  CostReport r;
  r.model = cfg.name;
  const bool cls = cfg.pooling == Pooling::cls_token;
  std::size_t channels = cfg.in_channels;
  std::size_t side = cfg.img_size;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageConfig& s = cfg.stages[i];
    const std::string sp = "stage" + std::to_string(i);
    side /= s.patch;
    const std::size_t spatial = side * side;
    const std::size_t n = spatial + (cls ? 1 : 0);
    const std::size_t embed_in = s.patch * s.patch * channels;
    if (i == 0 || cfg.mid_patch_embed_precision == Precision::full) {
      r.add(detail::linear_cost(sp + ".embed", "patch_embed", spatial, embed_in, s.dim));
    } else {
      LayerCost c = detail::bifc_cost(sp + ".embed", spatial, embed_in, s.dim);
      c.kind = "patch_embed";
      r.add(std::move(c));
    }
    std::uint64_t extra = 0;
    if (i == 0 || cfg.stage_pos_embed) extra += static_cast<std::uint64_t>(n) * s.dim;
    if (i == 0 && cls) extra += s.dim;
    if (extra) r.add({sp + ".pos", "params", 0, 0, extra});

    const std::size_t kv_side = side / s.reduction;
    const std::size_t m = s.reduction > 1 ? kv_side * kv_side : n;
    const std::size_t D = s.dim, hidden = s.dim * s.ffn_expansion;
    for (std::size_t b = 0; b < s.blocks; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      r.add({bp + ".norms", "params", 0, 0, 2 * detail::bn_params(D) + (cfg.use_layerscale ? 4 * D : 0)});
      r.add(detail::bifc_cost(bp + ".attn.q", n, D, D));
      if (s.reduction > 1) r.add(detail::bifc_cost(bp + ".attn.sr", m, D, D));
      r.add(detail::bifc_cost(bp + ".attn.k", m, D, D));
      r.add(detail::bifc_cost(bp + ".attn.v", m, D, D));
      r.add({bp + ".attn.qk", "attn_matmul", 0, static_cast<std::uint64_t>(n) * m * D, 0});
      r.add({bp + ".attn.pv", "attn_matmul", 0, static_cast<std::uint64_t>(n) * m * D,
             3 * D + 1 + detail::bn_params(D) + detail::rprelu_params(D)});
      r.add(detail::bifc_cost(bp + ".attn.o", n, D, D));
      r.add(detail::bifc_cost(bp + ".ffn1", n, D, hidden));
      r.add(detail::bifc_cost(bp + ".ffn2", n, hidden, D));
    }
    channels = s.dim;
  }
  r.add({"final_bn", "params", 0, 0, detail::bn_params(channels)});
  r.add(detail::linear_cost("head", "linear", 1, channels, cfg.num_classes));
  return r;
}

inline nlohmann::json to_json(const CostReport& r) {
  nlohmann::json j;
  j["model"] = r.model;
  j["flops"] = r.flops;
  j["bops"] = r.bops;
  j["ops"] = r.ops();
  j["params"] = r.params;
  j["per_layer"] = nlohmann::json::array();
  for (const auto& l : r.per_layer)
    j["per_layer"].push_back({{"name", l.name}, {"kind", l.kind}, {"flops", l.flops}, {"bops", l.bops}, {"params", l.params}});
  return j;
}

inline std::string to_text(const CostReport& r, bool per_layer = false) {
  std::ostringstream os;
  os << "model  " << r.model << "\n";
  os << std::setprecision(6);
  os << "flops  " << r.flops << "  (" << static_cast<double>(r.flops) / 1e8 << " x 1e8)\n";
  os << "bops   " << r.bops << "  (" << static_cast<double>(r.bops) / 1e9 << " x 1e9)\n";
  os << "ops    " << std::fixed << std::setprecision(3) << r.ops() << "  (bops/64 + flops, " << std::defaultfloat
     << std::setprecision(6) << r.ops() / 1e8 << " x 1e8)\n";
  os << "params " << r.params << "  (" << static_cast<double>(r.params) / 1e6 << " x 1e6)\n";
  if (per_layer) {
    os << "\n" << std::left << std::setw(28) << "layer" << std::setw(12) << "kind" << std::right << std::setw(14) << "flops"
       << std::setw(14) << "bops" << std::setw(12) << "params" << "\n";
    for (const auto& l : r.per_layer)
      os << std::left << std::setw(28) << l.name << std::setw(12) << l.kind << std::right << std::setw(14) << l.flops << std::setw(14)
         << l.bops << std::setw(12) << l.params << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Representational capability: the number of distinct absolute values an
// output element can take. A binary layer with kernel K over D_in inputs adds
// K^2 * D_in; averaging over n elements multiplies by n; the full-precision
// first layer on integer inputs in [0, max] contributes floor(K^2 * C * max / 2).

enum class RepCapKind { first_layer, add_contribution, multiply_transition };

struct RepCapStep {
  std::string label;
  RepCapKind kind = RepCapKind::add_contribution;
  std::uint64_t value = 0;
  std::uint64_t running = 0;  // total after this step
};

struct RepCapReference {
  std::uint64_t value = 0;
  std::string note;
};

struct RepCapChain {
  std::vector<RepCapStep> steps;
  std::uint64_t total = 0;
  std::optional<RepCapReference> reference;

  bool diverges_from_reference() const { return reference && reference->value != total; }
};

/// Appends a step and updates the running total (left-to-right evaluation).
inline void push_step(RepCapChain& chain, std::string label, RepCapKind kind, std::uint64_t value) {
  if (value == 0) throw InputError("repcap: step '" + label + "' has a non-positive contribution");
  switch (kind) {
    case RepCapKind::first_layer:
      if (!chain.steps.empty()) throw InputError("repcap: the first layer must be the first step");
      chain.total = value;
      break;
    case RepCapKind::add_contribution:
      chain.total += value;
      break;
    case RepCapKind::multiply_transition:
      chain.total *= value;
      break;
  }
  chain.steps.push_back({std::move(label), kind, value, chain.total});
}

inline std::uint64_t first_layer_capability(std::uint64_t kernel, std::uint64_t channels, std::uint64_t max_input) {
  return kernel * kernel * channels * max_input / 2;
}

inline RepCapChain evaluate_repcap(const std::vector<RepCapStep>& steps) {
  RepCapChain c;
  for (const auto& s : steps) push_step(c, s.label, s.kind, s.value);
  return c;
}

namespace detail {

/// Parses "key=value key=value ..." into a map; values may not contain spaces.
inline std::map<std::string, std::string> parse_fields(std::string_view rest, std::size_t lineno) {
  std::map<std::string, std::string> out;
  std::istringstream is{std::string(rest)};
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0)
      throw InputError("repcap line " + std::to_string(lineno) + ": expected key=value, got '" + tok + "'");
    out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

inline std::int64_t field_int(const std::map<std::string, std::string>& f, const std::string& key, std::size_t lineno,
                              std::optional<std::int64_t> fallback = std::nullopt) {
  auto it = f.find(key);
  if (it == f.end()) {
    if (fallback) return *fallback;
    throw InputError("repcap line " + std::to_string(lineno) + ": missing " + key + "=");
  }
  std::int64_t v = 0;
  const auto& s = it->second;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw InputError("repcap line " + std::to_string(lineno) + ": " + key + " must be an integer, got '" + s + "'");
  if (v <= 0) throw InputError("repcap line " + std::to_string(lineno) + ": " + key + " must be positive, got " + s);
  return v;
}

}  // namespace detail

/// Capability description format, one directive per line ('#' comments):
///   first     kernel=K channels=C max=M          floor(K^2*C*M/2), optional, must come first
///   layer     name=S kernel=K din=D [count=N]    adds K^2*D*N
///   add       name=S value=V [count=N]           adds V*N
///   aggregate name=S factor=F                    multiplies by F
///   reference value=V [note=S]                   published total to compare against
inline RepCapChain parse_repcap(std::string_view text) {
  RepCapChain chain;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto sp = line.find_first_of(" \t");
    const std::string directive(line.substr(0, sp));
    const auto f = detail::parse_fields(sp == std::string_view::npos ? std::string_view{} : line.substr(sp), lineno);
    auto label = [&](const std::string& def) {
      auto it = f.find("name");
      return it == f.end() ? def : it->second;
    };
    const auto at = [&](const std::string& key, std::optional<std::int64_t> fb = std::nullopt) {
      return static_cast<std::uint64_t>(detail::field_int(f, key, lineno, fb));
    };
    if (directive == "first") {
      if (!chain.steps.empty()) throw InputError("repcap line " + std::to_string(lineno) + ": 'first' must precede all other steps");
      push_step(chain, label("first_layer"), RepCapKind::first_layer, first_layer_capability(at("kernel"), at("channels"), at("max")));
    } else if (directive == "layer") {
      const std::uint64_t k = at("kernel");
      push_step(chain, label("layer"), RepCapKind::add_contribution, k * k * at("din") * at("count", 1));
    } else if (directive == "add") {
      push_step(chain, label("add"), RepCapKind::add_contribution, at("value") * at("count", 1));
    } else if (directive == "aggregate") {
      push_step(chain, label("aggregate"), RepCapKind::multiply_transition, at("factor"));
    } else if (directive == "reference") {
      auto it = f.find("note");
      chain.reference = RepCapReference{at("value"), it == f.end() ? std::string{} : it->second};
    } else {
      throw InputError("repcap line " + std::to_string(lineno) + ": unknown directive '" + directive + "'");
    }
  }
  if (chain.steps.empty()) throw InputError("repcap: description has no steps");
  return chain;
}

inline RepCapChain load_repcap(const std::string& path) {
  return parse_repcap(read_text_file(path));
}

inline std::string to_text(const RepCapChain& c) {
  std::ostringstream os;
  for (const auto& s : c.steps) {
    const char* op = s.kind == RepCapKind::first_layer ? "=" : (s.kind == RepCapKind::add_contribution ? "+" : "x");
    os << std::left << std::setw(20) << s.label << ' ' << op << ' ' << std::setw(12) << s.value << " -> " << s.running << "\n";
  }
  os << "total " << c.total << "\n";
  if (c.reference) {
    if (c.diverges_from_reference()) {
      const auto diff = static_cast<std::int64_t>(c.total) - static_cast<std::int64_t>(c.reference->value);
      os << "reference " << c.reference->value << " DIVERGES from computed total by " << diff;
    } else {
      os << "reference " << c.reference->value << " matches";
    }
    if (!c.reference->note.empty()) os << " (" << c.reference->note << ")";
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json to_json(const RepCapChain& c) {
  nlohmann::json j;
  j["total"] = c.total;
  j["steps"] = nlohmann::json::array();
  for (const auto& s : c.steps) {
    const char* kind = s.kind == RepCapKind::first_layer ? "first_layer"
                       : s.kind == RepCapKind::add_contribution ? "add_contribution"
                                                                : "multiply_transition";
    j["steps"].push_back({{"label", s.label}, {"kind", kind}, {"value", s.value}, {"running", s.running}});
  }
  if (c.reference) j["reference"] = {{"value", c.reference->value}, {"note", c.reference->note}, {"diverges", c.diverges_from_reference()}};
  return j;
}

}  // namespace bvit
