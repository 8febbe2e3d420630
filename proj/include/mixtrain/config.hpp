#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mixtrain/engine.hpp"

namespace mixtrain {

/// Where the task datasets come from. Each source is one of
///   synthetic                 built-in 10-class generator
///   synthetic:key=v,key=v     generator with overrides (SyntheticSpec keys)
///   path/to/file.spec         generator spec file
///   path/to/*idx3*            idx images (labels found as a sibling)
///   path/to/*.bin             CIFAR-style binary records
/// One source per task; several sources make a multi-task run.
struct DataConfig {
  std::vector<std::string> sources{"synthetic"};
  std::string format = "auto";
  std::string labels;  // explicit idx labels for the first source
  std::size_t num_classes = 10;
  std::string name;  // report label; derived from the sources when empty
  DataPlan plan;
};

/// Everything a run needs, as flat key=value settings.
struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  DataConfig data;
  TrainOptions options;
};

// Known keys in echo order.
const std::vector<std::string>& config_keys();

// Throws ConfigError for unknown keys and unparsable or out-of-range values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// key=value lines; blank lines and # comments ignored; later keys win.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

void apply_text(RunConfig& cfg, const std::string& text);
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

std::map<std::string, std::string> echo_map(const RunConfig& cfg);
// Every key, one per line, in config_keys() order. Feeding it back through
// apply_text reproduces cfg exactly.
std::string echo_config(const RunConfig& cfg);

std::string dataset_label(const DataConfig& data);
std::vector<Dataset> load_datasets(const DataConfig& data);

// Model configuration sized to the datasets' item shape.
ModelConfig model_for(const RunConfig& cfg, const std::vector<Dataset>& datasets);

// Full validation of the run settings (ConfigError).
void validate(const RunConfig& cfg);

}  // namespace mixtrain
