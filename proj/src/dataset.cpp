#include "dge/dataset.hpp"

#include <stdexcept>
#include <string>

#include "dge/rng.hpp"

namespace dge {

DatasetSpec dataset_spec(const RunConfig& cfg) {
  DatasetSpec s;
  s.image = cfg.model.image;
  s.classes = cfg.model.classes;
  s.train_count = cfg.data.train_count;
  s.val_count = cfg.data.val_count;
  s.window = cfg.data.window;
  s.align = cfg.model.patch;
  s.noise = cfg.data.noise;
  s.amplitude = cfg.data.amplitude;
  return s;
}

bool glyph_bit(std::size_t cls, std::size_t r, std::size_t c) {
  bool base;
  switch (cls % 4) {
    case 0: base = (r % 2) == 0; break;            // horizontal stripes
    case 1: base = (c % 2) == 0; break;            // vertical stripes
    case 2: base = ((r + c) % 2) == 0; break;      // checkerboard
    default: base = (((r + c) >> 1) % 2) == 0;     // diagonal bands
  }
  // Cell parity flips the pattern; classes 4..7 flip in anti-phase.
  std::size_t phase = ((r / 4) + (c / 4) + (cls / 4)) % 2;
  return phase ? !base : base;
}

namespace {

void fill_split(std::vector<Example>& out, std::size_t count,
                const DatasetSpec& s, RngStream& rng) {
  const std::size_t npos = (s.image - s.window) / s.align + 1;
  out.reserve(count);
  for (std::size_t idx = 0; idx < count; ++idx) {
    Example e;
    e.label = idx % s.classes;  // stratified: exact class balance
    e.pixels.resize(s.image * s.image);
    for (auto& p : e.pixels) p = s.noise * rng.normal();
    e.win_r = s.align * rng.below(npos);
    e.win_c = s.align * rng.below(npos);
    for (std::size_t r = 0; r < s.window; ++r)
      for (std::size_t c = 0; c < s.window; ++c)
        if (glyph_bit(e.label, r, c))
          e.pixels[(e.win_r + r) * s.image + (e.win_c + c)] += s.amplitude;
    out.push_back(std::move(e));
  }
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.window > spec.image)
    throw std::invalid_argument("dataset: window " +
                                std::to_string(spec.window) +
                                " exceeds image size " +
                                std::to_string(spec.image));
  if (spec.window < 1 || spec.image < 1)
    throw std::invalid_argument("dataset: degenerate geometry");
  if (spec.classes < 2 || spec.classes > 8)
    throw std::invalid_argument("dataset: class count must lie in [2,8]");
  if (spec.align < 1 || spec.align > spec.image)
    throw std::invalid_argument("dataset: bad alignment step");

  Dataset d;
  d.spec = spec;
  RngStream train_rng(seed, 101);
  RngStream val_rng(seed, 102);
  fill_split(d.train, spec.train_count, spec, train_rng);
  fill_split(d.val, spec.val_count, spec, val_rng);
  return d;
}

}  // namespace dge
