#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kdlab/data.hpp"
#include "kdlab/distill.hpp"

namespace kdlab {

struct RunConfig {
  std::string command;  // train | distill | evaluate | compare
  std::string model;
  std::string activation = "gelu";
  std::string data;
  std::string out;
  std::string teacher_ckpt;
  std::string ckpt;
  std::string baseline_ckpt;
  std::string layer = "features";
  std::size_t eval_batch_size = 64;
  DistillConfig distill;
  AugmentConfig augment;

  // Every key as `key = value`, one per line, floats at full precision.
  // Feeding the dump back through parse_config reproduces this config.
  std::string resolved() const;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// Built-in defaults for a command and model preset: the teacher preset
// trains on the longer schedule, everything else on the student one.
RunConfig default_run_config(const std::string& command, const std::string& model);

const std::vector<std::string>& config_keys();

// Throws ConfigError naming the key and the expected type.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// `key = value` lines, `#` starts a comment. Malformed lines, unknown keys
// and values of the wrong type raise ParseError carrying the line number.
std::vector<ConfigEntry> read_config_entries(const std::filesystem::path& path);
RunConfig parse_config(const std::filesystem::path& path, const std::string& command = "train");

// Defaults <- config file <- flags.
RunConfig resolve_config(const std::string& command, const std::optional<std::filesystem::path>& file,
                         const std::map<std::string, std::string>& flags);

int cmd_train(const RunConfig& cfg, bool force, std::ostream& log);
int cmd_distill(const RunConfig& cfg, bool force, std::ostream& log);
int cmd_evaluate(const RunConfig& cfg, bool force, std::ostream& log);
int cmd_compare(const RunConfig& cfg, bool force, std::ostream& log);

// Full command line (without the program name). Returns the exit code;
// errors are reported on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kdlab
