#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dge/encoder.hpp"

namespace dge {

struct DataSpec {
  std::size_t train_count = 1024;
  std::size_t val_count = 256;
  std::size_t window = 12;
  double noise = 0.1;
  double amplitude = 1.0;
};

struct TrainSpec {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  double lr = 3e-4;
  double weight_decay = 0.05;
  std::uint64_t seed = 1;
};

struct AnalysisSpec {
  std::vector<double> thresholds = {-1.0, 0.0,  0.2,  0.4,  0.5, 0.6,
                                    0.7,  0.8,  0.85, 0.9,  0.95, 1.1};
  std::size_t probe_patch = 2;
  std::size_t heatmap_images = 8;
};

struct RunConfig {
  VitConfig model;
  DataSpec data;
  TrainSpec train;
  AnalysisSpec analysis;

  void validate() const;
};

// Line-oriented `key = value` with [section] headers and # comments.
// Unknown sections or keys are errors; so are malformed values.
RunConfig parse_config_text(const std::string& text, const std::string& origin);
RunConfig load_config(const std::string& path);

}  // namespace dge
