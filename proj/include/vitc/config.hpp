#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitc/model.hpp"
#include "vitc/optim.hpp"

namespace vitc {

inline const std::vector<double> kDefaultEvalScales = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75};

struct RunConfig {
  ModelConfig model;  // head_channels defaults to 64 here, see make_run_config()

  std::uint64_t data_seed = 0;
  std::size_t train_size = 1000;
  std::size_t eval_size = 100;

  AdamWConfig optim;
  std::size_t iterations = 2000;
  std::size_t batch_size = 8;
  std::size_t crop_h = 64;
  std::size_t crop_w = 64;
  std::vector<double> eval_scales = kDefaultEvalScales;

  std::size_t log_every = 100;  // 0 disables progress lines
  std::string out_dir;          // empty: nothing written

  // Throws ConfigError on any violated precondition.
  void validate() const;
};

RunConfig make_run_config();

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Every settable field, in file order.
const std::vector<ConfigKey>& config_keys();

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Grammar: one `key = value` per line; `#` starts a comment; blank lines are
// skipped. Unknown keys and malformed lines are errors.
void parse_config(std::istream& is, RunConfig& cfg);
void load_config_file(const std::filesystem::path& path, RunConfig& cfg);

// Inverse of parse_config: every key, one per line.
std::string format_config(const RunConfig& cfg);

std::vector<double> parse_scales(const std::string& text);
std::string format_scales(const std::vector<double>& scales);

}  // namespace vitc
