#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dge {

struct MetricsRecord {
  std::size_t step = 0;
  double task_loss = 0;
  double budget_loss = 0;
  double beta = 0;
  double accuracy = 0;
  std::vector<double> psi;  // per layer, averaged over the batch
};

// Append-only JSONL. Every record lands on its own line and the stream is
// flushed per write, so an aborted run still leaves a parseable file.
// Deterministic content only; wall-clock timings go to a separate file.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path)
      : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("metrics: cannot write " + path);
  }

  void write(const MetricsRecord& r) {
    if (r.step < next_step_)
      throw std::runtime_error("metrics: step " + std::to_string(r.step) +
                               " is not monotone");
    next_step_ = r.step + 1;
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["task_loss"] = r.task_loss;
    j["budget_loss"] = r.budget_loss;
    j["beta"] = r.beta;
    j["accuracy"] = r.accuracy;
    j["psi"] = r.psi;
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
  std::size_t next_step_ = 0;
};

class TimingWriter {
 public:
  explicit TimingWriter(const std::string& path)
      : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("metrics: cannot write " + path);
  }

  void write(std::size_t step, double seconds) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["seconds"] = seconds;
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace dge
