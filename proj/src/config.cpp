#include "vitc/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "vitc/data.hpp"

namespace vitc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": not a number: '" + text + "'");
  return out;
}

// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
ConfigKey number_key(std::string name, std::string help, T RunConfig::*member) {
  return {name, std::move(help),
          [name, member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>(name, v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

// Same, for a field reached through a projection (model.vit.patch, ...).
template <class T, class Proj>
ConfigKey nested_key(std::string name, std::string help, Proj proj) {
  return {name, std::move(help),
          [name, proj](RunConfig& c, const std::string& v) { proj(c) = parse_number<T>(name, v); },
          [proj](const RunConfig& c) {
            const T value = proj(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return format_double(value);
            else return std::to_string(value);
          }};
}

template <class E>
E parse_enum(const std::string& key, const std::string& text, E (*parse)(const std::string&)) {
  try {
    return parse(text);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

DType parse_dtype(const std::string& text) {
  if (text == "f32") return DType::f32;
  if (text == "f64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + text + "' (f32, f64)");
}

std::vector<ConfigKey> build_keys() {
  using Sz = std::size_t;
  std::vector<ConfigKey> k;
  k.push_back(nested_key<Sz>("image_h", "image height", [](RunConfig& c) -> Sz& { return c.model.vit.image_h; }));
  k.push_back(nested_key<Sz>("image_w", "image width", [](RunConfig& c) -> Sz& { return c.model.vit.image_w; }));
  k.push_back(nested_key<Sz>("patch", "patch size", [](RunConfig& c) -> Sz& { return c.model.vit.patch; }));
  k.push_back(nested_key<Sz>("embed_dim", "token width C", [](RunConfig& c) -> Sz& { return c.model.vit.embed_dim; }));
  k.push_back(nested_key<Sz>("num_layers", "transformer blocks N", [](RunConfig& c) -> Sz& { return c.model.vit.num_layers; }));
  k.push_back(nested_key<Sz>("num_heads", "attention heads", [](RunConfig& c) -> Sz& { return c.model.vit.num_heads; }));
  k.push_back(nested_key<Sz>("mlp_ratio", "MLP hidden width / C", [](RunConfig& c) -> Sz& { return c.model.vit.mlp_ratio; }));
  k.push_back(nested_key<std::uint64_t>("seed", "initialization, sampling and augmentation seed",
                                        [](RunConfig& c) -> std::uint64_t& { return c.model.vit.seed; }));
  k.push_back({"neck", "controller_cls | controller_avgpool | last_layer | fixed:i,j,...",
               [](RunConfig& c, const std::string& v) { c.model.neck = parse_enum("neck", v, &NeckPolicy::parse); },
               [](const RunConfig& c) { return c.model.neck.name(); }});
  k.push_back({"head", "mla | fpn",
               [](RunConfig& c, const std::string& v) { c.model.head = parse_enum("head", v, &parse_head_kind); },
               [](const RunConfig& c) { return head_kind_name(c.model.head); }});
  k.push_back({"pyramid", "parameter_free | learned",
               [](RunConfig& c, const std::string& v) { c.model.pyramid = parse_enum("pyramid", v, &parse_pyramid_mode); },
               [](const RunConfig& c) { return pyramid_mode_name(c.model.pyramid); }});
  k.push_back(nested_key<Sz>("classes", "number of classes K, background included",
                             [](RunConfig& c) -> Sz& { return c.model.classes; }));
  k.push_back(nested_key<Sz>("head_channels", "decoder width", [](RunConfig& c) -> Sz& { return c.model.head_channels; }));
  k.push_back({"dtype", "f32 | f64",
               [](RunConfig& c, const std::string& v) { c.model.dtype = parse_enum("dtype", v, &parse_dtype); },
               [](const RunConfig& c) { return std::string(dtype_name(c.model.dtype)); }});
  k.push_back(number_key("data_seed", "synthetic dataset seed", &RunConfig::data_seed));
  k.push_back(number_key("train_size", "training samples", &RunConfig::train_size));
  k.push_back(number_key("eval_size", "held-out samples", &RunConfig::eval_size));
  k.push_back(nested_key<double>("lr", "learning rate", [](RunConfig& c) -> double& { return c.optim.lr; }));
  k.push_back(nested_key<double>("weight_decay", "decoupled weight decay",
                                 [](RunConfig& c) -> double& { return c.optim.weight_decay; }));
  k.push_back(nested_key<double>("beta1", "first-moment decay", [](RunConfig& c) -> double& { return c.optim.beta1; }));
  k.push_back(nested_key<double>("beta2", "second-moment decay", [](RunConfig& c) -> double& { return c.optim.beta2; }));
  k.push_back(nested_key<double>("eps", "optimizer epsilon", [](RunConfig& c) -> double& { return c.optim.eps; }));
  k.push_back(number_key("iterations", "optimizer steps", &RunConfig::iterations));
  k.push_back(number_key("batch_size", "samples per step", &RunConfig::batch_size));
  k.push_back(number_key("crop_h", "training crop height", &RunConfig::crop_h));
  k.push_back(number_key("crop_w", "training crop width", &RunConfig::crop_w));
  k.push_back({"eval_scales", "comma-separated resize ratios",
               [](RunConfig& c, const std::string& v) { c.eval_scales = parse_scales(v); },
               [](const RunConfig& c) { return format_scales(c.eval_scales); }});
  k.push_back(number_key("log_every", "progress line interval, 0 = silent", &RunConfig::log_every));
  k.push_back({"out_dir", "output directory",
               [](RunConfig& c, const std::string& v) { c.out_dir = v; },
               [](const RunConfig& c) { return c.out_dir; }});
  return k;
}

}  // namespace

RunConfig make_run_config() {
  RunConfig cfg;
  cfg.model.head_channels = 64;
  return cfg;
}

void RunConfig::validate() const {
  try {
    model.vit.validate();
    model.neck.validate(model.vit.num_layers);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.classes < 2 || model.classes > kMaxShapeClasses + 1) {
    throw ConfigError("classes must be in [2, " + std::to_string(kMaxShapeClasses + 1) + "]");
  }
  if (model.head_channels == 0) throw ConfigError("head_channels must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (train_size == 0 && iterations > 0) throw ConfigError("train_size must be positive");
  if (eval_size == 0) throw ConfigError("eval_size must be positive");
  if (crop_h == 0 || crop_w == 0 || crop_h % model.vit.patch != 0 || crop_w % model.vit.patch != 0) {
    throw ConfigError("crop extents must be positive multiples of the patch size");
  }
  if (eval_scales.empty()) throw ConfigError("eval_scales must not be empty");
  for (double s : eval_scales) {
    if (!(s > 0.0)) throw ConfigError("eval_scales must be positive");
  }
  if (!(optim.lr > 0.0)) throw ConfigError("lr must be positive");
  if (optim.weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("betas must be in [0, 1)");
  }
  if (!(optim.eps > 0.0)) throw ConfigError("eps must be positive");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

void parse_config(std::istream& is, RunConfig& cfg) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void load_config_file(const std::filesystem::path& path, RunConfig& cfg) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  parse_config(is, cfg);
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::vector<double> parse_scales(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("eval_scales: empty entry in '" + text + "'");
    out.push_back(parse_number<double>("eval_scales", item));
  }
  return out;
}

std::string format_scales(const std::vector<double>& scales) {
  std::string out;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (i) out += ",";
    out += format_double(scales[i]);
  }
  return out;
}

}  // namespace vitc
