#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dge/config.hpp"

namespace dge {

struct DatasetSpec {
  std::size_t image = 32;
  std::size_t classes = 4;
  std::size_t train_count = 1024;
  std::size_t val_count = 256;
  std::size_t window = 12;
  std::size_t align = 4;  // window positions snap to this grid
  double noise = 0.1;
  double amplitude = 1.0;
};

struct Example {
  std::vector<double> pixels;  // image x image, row-major
  std::size_t label = 0;
  std::size_t win_r = 0, win_c = 0;  // top-left pixel of the signal window
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Example> train;
  std::vector<Example> val;
};

DatasetSpec dataset_spec(const RunConfig& cfg);

// Glyph pattern bit at window-local pixel (r, c). All classes fill exactly
// half the window, and the phase flip between adjacent 4x4 cells makes
// pooled cell averages class-independent.
bool glyph_bit(std::size_t cls, std::size_t r, std::size_t c);

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed);

}  // namespace dge
