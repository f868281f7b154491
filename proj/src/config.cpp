#include "dge/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dge {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& origin, std::size_t line,
                       const std::string& msg) {
  throw std::invalid_argument("config: " + origin + ":" +
                              std::to_string(line) + ": " + msg);
}

std::size_t parse_size(const std::string& v, const std::string& origin,
                       std::size_t line) {
  try {
    std::size_t pos = 0;
    long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (...) {
    fail(origin, line, "expected a non-negative integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& v, const std::string& origin,
                        std::size_t line) {
  try {
    std::size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    fail(origin, line, "expected an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& v, const std::string& origin,
                    std::size_t line) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    fail(origin, line, "expected a number, got '" + v + "'");
  }
}

std::vector<int> parse_int_list(const std::string& v, const std::string& origin,
                                std::size_t line) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) fail(origin, line, "empty list entry");
    out.push_back(static_cast<int>(parse_size(item, origin, line)));
  }
  if (out.empty()) fail(origin, line, "expected a comma-separated list");
  return out;
}

std::vector<double> parse_double_list(const std::string& v,
                                      const std::string& origin,
                                      std::size_t line) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) fail(origin, line, "empty list entry");
    out.push_back(parse_double(item, origin, line));
  }
  if (out.empty()) fail(origin, line, "expected a comma-separated list");
  return out;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (data.window > model.image)
    throw std::invalid_argument("config: signal window " +
                                std::to_string(data.window) +
                                " exceeds image size " +
                                std::to_string(model.image));
  if (data.window < 1) throw std::invalid_argument("config: window must be positive");
  if (data.noise < 0) throw std::invalid_argument("config: noise must be non-negative");
  if (data.train_count < 1 || data.val_count < 1)
    throw std::invalid_argument("config: need at least one sample per split");
  if (model.classes > 8)
    throw std::invalid_argument("config: at most 8 glyph classes are defined");
  if (train.epochs < 1) throw std::invalid_argument("config: epochs must be positive");
  if (train.batch < 1) throw std::invalid_argument("config: batch must be positive");
  if (train.lr <= 0) throw std::invalid_argument("config: lr must be positive");
  if (train.weight_decay < 0)
    throw std::invalid_argument("config: weight_decay must be non-negative");
  for (double t : analysis.thresholds)
    if (t < -1.5 || t > 1.5)
      throw std::invalid_argument("config: sweep threshold out of range");
}

RunConfig parse_config_text(const std::string& text,
                            const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section = "";
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(origin, lineno, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "dataset" && section != "train" &&
          section != "analysis")
        fail(origin, lineno, "unknown section '" + section + "'");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail(origin, lineno, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) fail(origin, lineno, "empty key");
    if (val.empty()) fail(origin, lineno, "empty value for '" + key + "'");

    if (section == "model") {
      if (key == "image") cfg.model.image = parse_size(val, origin, lineno);
      else if (key == "patch") cfg.model.patch = parse_size(val, origin, lineno);
      else if (key == "channels") cfg.model.channels = parse_size(val, origin, lineno);
      else if (key == "heads") cfg.model.heads = parse_size(val, origin, lineno);
      else if (key == "layers") cfg.model.layers = parse_size(val, origin, lineno);
      else if (key == "ffn_ratio") cfg.model.ffn_ratio = parse_size(val, origin, lineno);
      else if (key == "classes") cfg.model.classes = parse_size(val, origin, lineno);
      else if (key == "phi") cfg.model.phi = parse_int_list(val, origin, lineno);
      else if (key == "region") cfg.model.region = static_cast<int>(parse_size(val, origin, lineno));
      else if (key == "gamma") cfg.model.gamma = parse_double(val, origin, lineno);
      else if (key == "lambda") cfg.model.lambda = parse_double(val, origin, lineno);
      else if (key == "tau") cfg.model.tau = parse_double(val, origin, lineno);
      else fail(origin, lineno, "unknown key '" + key + "' in [model]");
    } else if (section == "dataset") {
      if (key == "train_count") cfg.data.train_count = parse_size(val, origin, lineno);
      else if (key == "val_count") cfg.data.val_count = parse_size(val, origin, lineno);
      else if (key == "window") cfg.data.window = parse_size(val, origin, lineno);
      else if (key == "noise") cfg.data.noise = parse_double(val, origin, lineno);
      else if (key == "amplitude") cfg.data.amplitude = parse_double(val, origin, lineno);
      else fail(origin, lineno, "unknown key '" + key + "' in [dataset]");
    } else if (section == "train") {
      if (key == "epochs") cfg.train.epochs = parse_size(val, origin, lineno);
      else if (key == "batch") cfg.train.batch = parse_size(val, origin, lineno);
      else if (key == "lr") cfg.train.lr = parse_double(val, origin, lineno);
      else if (key == "weight_decay") cfg.train.weight_decay = parse_double(val, origin, lineno);
      else if (key == "seed") cfg.train.seed = parse_u64(val, origin, lineno);
      else fail(origin, lineno, "unknown key '" + key + "' in [train]");
    } else if (section == "analysis") {
      if (key == "thresholds") cfg.analysis.thresholds = parse_double_list(val, origin, lineno);
      else if (key == "probe_patch") cfg.analysis.probe_patch = parse_size(val, origin, lineno);
      else if (key == "heatmap_images") cfg.analysis.heatmap_images = parse_size(val, origin, lineno);
      else fail(origin, lineno, "unknown key '" + key + "' in [analysis]");
    } else {
      fail(origin, lineno, "key '" + key + "' appears before any [section]");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

}  // namespace dge
