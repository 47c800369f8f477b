#pragma once

// Plain-text model configuration:
//
//   [model]
//   name = binaryvit
//   img_size = 224
//   pooling = global_avg          # or cls_token
//   norm_mean = 123.675, 116.28, 103.53
//   [stage]
//   dim = 64
//   reduction = 8
//   ...
//
// One [model] section followed by one [stage] section per stage, in order.
// '#' starts a comment.

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bvit/errors.hpp"
#include "bvit/model.hpp"

namespace bvit {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

class ConfigLine {
 public:
  ConfigLine(std::size_t line, std::string key, std::string value) : line_(line), key_(std::move(key)), value_(std::move(value)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + key_ + ": " + what);
  }

  std::size_t as_size() const {
    std::size_t v = 0;
    const auto r = std::from_chars(value_.data(), value_.data() + value_.size(), v);
    if (r.ec != std::errc{} || r.ptr != value_.data() + value_.size()) fail("expected a non-negative integer, got '" + value_ + "'");
    return v;
  }

  double as_double() const { return parse_double(value_); }

  bool as_bool() const {
    if (value_ == "true" || value_ == "1") return true;
    if (value_ == "false" || value_ == "0") return false;
    fail("expected true or false, got '" + value_ + "'");
  }

  std::vector<double> as_doubles() const {
    std::vector<double> out;
    std::string_view rest = value_;
    while (true) {
      const auto comma = rest.find(',');
      out.push_back(parse_double(std::string(trim(rest.substr(0, comma)))));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    return out;
  }

  const std::string& value() const { return value_; }

 private:
  double parse_double(const std::string& s) const {
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) fail("expected a number, got '" + s + "'");
    return v;
  }

  std::size_t line_;
  std::string key_;
  std::string value_;
};

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt_double(v[i]);
  return s;
}

}  // namespace detail

/// Parses and validates a configuration document.
inline ModelConfig parse_config(std::string_view text) {
  ModelConfig cfg;
  cfg.stages.clear();
  enum class Section { none, model, stage } section = Section::none;
  bool seen_model = false;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line == "[model]") {
        if (seen_model) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate [model] section");
        section = Section::model;
        seen_model = true;
      } else if (line == "[stage]") {
        section = Section::stage;
        cfg.stages.emplace_back();
      } else {
        throw ConfigError("config line " + std::to_string(lineno) + ": unknown section " + std::string(line));
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const detail::ConfigLine kv(lineno, std::string(detail::trim(line.substr(0, eq))), std::string(detail::trim(line.substr(eq + 1))));
    const std::string key(detail::trim(line.substr(0, eq)));
    if (section == Section::model) {
      if (key == "name") cfg.name = kv.value();
      else if (key == "img_size") cfg.img_size = kv.as_size();
      else if (key == "in_channels") cfg.in_channels = kv.as_size();
      else if (key == "num_classes") cfg.num_classes = kv.as_size();
      else if (key == "pooling") {
        if (kv.value() == "cls_token") cfg.pooling = Pooling::cls_token;
        else if (kv.value() == "global_avg") cfg.pooling = Pooling::global_avg;
        else kv.fail("expected cls_token or global_avg");
      } else if (key == "use_multibranch") cfg.use_multibranch = kv.as_bool();
      else if (key == "use_layerscale") cfg.use_layerscale = kv.as_bool();
      else if (key == "mid_patch_embed_precision") {
        if (kv.value() == "full") cfg.mid_patch_embed_precision = Precision::full;
        else if (kv.value() == "binary") cfg.mid_patch_embed_precision = Precision::binary;
        else kv.fail("expected full or binary");
      } else if (key == "first_layer_precision") {
        if (kv.value() != "full") kv.fail("the first layer is always full precision");
      } else if (key == "stage_pos_embed") cfg.stage_pos_embed = kv.as_bool();
      else if (key == "layerscale_init") cfg.layerscale_init = kv.as_double();
      else if (key == "norm_mean") cfg.norm_mean = kv.as_doubles();
      else if (key == "norm_std") cfg.norm_std = kv.as_doubles();
      else kv.fail("unknown key");
    } else if (section == Section::stage) {
      StageConfig& s = cfg.stages.back();
      if (key == "dim") s.dim = kv.as_size();
      else if (key == "reduction") s.reduction = kv.as_size();
      else if (key == "heads") s.heads = kv.as_size();
      else if (key == "ffn_expansion") s.ffn_expansion = kv.as_size();
      else if (key == "blocks") s.blocks = kv.as_size();
      else if (key == "patch") s.patch = kv.as_size();
      else kv.fail("unknown key");
    } else {
      throw ConfigError("config line " + std::to_string(lineno) + ": key outside of a section");
    }
  }
  if (!seen_model) throw ConfigError("config: missing [model] section");
  cfg.validate();
  return cfg;
}

inline std::string to_config_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "[model]\n"
     << "name = " << cfg.name << "\n"
     << "img_size = " << cfg.img_size << "\n"
     << "in_channels = " << cfg.in_channels << "\n"
     << "num_classes = " << cfg.num_classes << "\n"
     << "pooling = " << (cfg.pooling == Pooling::cls_token ? "cls_token" : "global_avg") << "\n"
     << "use_multibranch = " << (cfg.use_multibranch ? "true" : "false") << "\n"
     << "use_layerscale = " << (cfg.use_layerscale ? "true" : "false") << "\n"
     << "mid_patch_embed_precision = " << (cfg.mid_patch_embed_precision == Precision::full ? "full" : "binary") << "\n"
     << "stage_pos_embed = " << (cfg.stage_pos_embed ? "true" : "false") << "\n"
     << "layerscale_init = " << detail::fmt_double(cfg.layerscale_init) << "\n"
     << "norm_mean = " << detail::join_doubles(cfg.norm_mean) << "\n"
     << "norm_std = " << detail::join_doubles(cfg.norm_std) << "\n";
  for (const auto& s : cfg.stages)
    os << "\n[stage]\n"
       << "dim = " << s.dim << "\n"
       << "reduction = " << s.reduction << "\n"
       << "heads = " << s.heads << "\n"
       << "ffn_expansion = " << s.ffn_expansion << "\n"
       << "blocks = " << s.blocks << "\n"
       << "patch = " << s.patch << "\n";
  return os.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline const std::vector<std::pair<std::string, ModelConfig (*)()>>& preset_table() {
  static const std::vector<std::pair<std::string, ModelConfig (*)()>> table = {
      {"binaryvit", &presets::binaryvit},
      {"binaryvit_star", &presets::binaryvit_star},
      {"deit_s_baseline", &presets::deit_s_baseline},
      {"tiny_pyramid", &presets::tiny_pyramid},
  };
  return table;
}

/// A preset name or a path to a configuration file.
inline ModelConfig load_config(const std::string& name_or_path) {
  for (const auto& [name, make] : preset_table())
    if (name == name_or_path) return make();
  return parse_config(read_text_file(name_or_path));
}

}  // namespace bvit
