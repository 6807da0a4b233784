#pragma once

// Experiment configuration files (YAML). Every mapping is checked against
// its known keys and every value against its range before any compute runs;
// failures carry the file name, line and dotted field path.

#include "pckd/data.hpp"
#include "pckd/train.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace YAML {
class Node;
}

namespace pckd {

enum class Precision { f32, f64 };

std::string_view precision_name(Precision p);

struct ModelEntry {
  BackboneSpec spec;
  std::filesystem::path checkpoint;  // teacher: pretrained weights to distill from

  bool operator==(const ModelEntry&) const = default;
};

struct ExperimentConfig {
  std::filesystem::path output_dir = "runs/experiment";
  Precision precision = Precision::f32;
  DatasetSpec data;
  ModelEntry teacher;
  ModelEntry student;
  TrainConfig train;
  TransferConfig transfer;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Invalid configuration. `line` is 1-based, 0 when the value came from an
/// override or has no source position.
class ConfigError : public ContractViolation {
 public:
  ConfigError(std::string source, int line, std::string field, const std::string& reason);

  const std::string& source() const { return source_; }
  int line() const { return line_; }
  const std::string& field() const { return field_; }
  const std::string& reason() const { return reason_; }

 private:
  std::string source_;
  int line_;
  std::string field_;
  std::string reason_;
};

/// One `dotted.path=value` override; the value is read as YAML.
struct ConfigOverride {
  std::string path;
  std::string value;
};

ExperimentConfig parse_config(const YAML::Node& root, const std::string& source = "<config>");
ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "<config>");

/// Reads the file, applies the overrides in order and validates the result.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<ConfigOverride>& overrides = {});

/// Applies overrides to the text form and re-parses. Override values have
/// precedence over the file; the file has precedence over built-in defaults.
ExperimentConfig apply_overrides(const std::string& text, const std::vector<ConfigOverride>& overrides,
                                 const std::string& source = "<config>");

/// Full, explicit YAML form. parse_config_text(to_yaml(c)) == c.
std::string to_yaml(const ExperimentConfig& config);

}  // namespace pckd
