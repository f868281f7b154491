#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dge/analysis.hpp"
#include "dge/budget.hpp"
#include "dge/checkpoint.hpp"
#include "dge/config.hpp"
#include "dge/dataset.hpp"
#include "dge/encoder.hpp"
#include "dge/train.hpp"

namespace {

struct Opts {
  std::string config_path;
  std::string out = "out";
  std::string checkpoint;  // manifest path; weights sit next to it
  std::uint64_t seed = 0;
  double budget = 0.5;
  std::string phi;
  std::string precision = "f32";
  CLI::Option* seed_opt = nullptr;
  CLI::Option* budget_opt = nullptr;
};

void add_common(CLI::App* sub, Opts& o, bool wants_checkpoint) {
  sub->add_option("--config", o.config_path, "run configuration file");
  sub->add_option("--out", o.out, "output directory");
  o.seed_opt = sub->add_option("--seed", o.seed, "override the run seed");
  o.budget_opt =
      sub->add_option("--budget", o.budget, "override the target ratio");
  sub->add_option("--phi", o.phi,
                  "override the candidate granularities, e.g. 0,1,2");
  sub->add_option("--precision", o.precision, "float width")
      ->check(CLI::IsMember({"f32", "f64"}));
  if (wants_checkpoint)
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint manifest (.json)")
        ->required();
}

std::vector<int> parse_phi(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  if (out.empty()) throw std::invalid_argument("--phi: empty list");
  return out;
}

dge::RunConfig resolve_config(const Opts& o) {
  dge::RunConfig cfg = o.config_path.empty() ? dge::RunConfig{}
                                             : dge::load_config(o.config_path);
  if (o.seed_opt && o.seed_opt->count() > 0) cfg.train.seed = o.seed;
  if (o.budget_opt && o.budget_opt->count() > 0) cfg.model.gamma = o.budget;
  if (!o.phi.empty()) cfg.model.phi = parse_phi(o.phi);
  cfg.validate();
  return cfg;
}

std::string weights_path(const std::string& manifest) {
  const std::string suffix = ".json";
  if (manifest.size() > suffix.size() &&
      manifest.compare(manifest.size() - suffix.size(), suffix.size(),
                       suffix) == 0)
    return manifest.substr(0, manifest.size() - suffix.size()) + ".bin";
  return manifest + ".bin";
}

void ensure_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

nlohmann::ordered_json config_json(const dge::RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["model"] = dge::arch_json(cfg.model);
  j["dataset"] = {{"train_count", cfg.data.train_count},
                  {"val_count", cfg.data.val_count},
                  {"window", cfg.data.window},
                  {"noise", cfg.data.noise},
                  {"amplitude", cfg.data.amplitude}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch", cfg.train.batch},
                {"lr", cfg.train.lr},
                {"weight_decay", cfg.train.weight_decay},
                {"seed", cfg.train.seed}};
  j["analysis"] = {{"thresholds", cfg.analysis.thresholds},
                   {"probe_patch", cfg.analysis.probe_patch},
                   {"heatmap_images", cfg.analysis.heatmap_images}};
  return j;
}

void write_sample_pgm(const dge::Example& ex, std::size_t image,
                      const std::string& path) {
  double lo = ex.pixels[0], hi = ex.pixels[0];
  for (double v : ex.pixels) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<std::size_t> gray(ex.pixels.size());
  for (std::size_t i = 0; i < ex.pixels.size(); ++i)
    gray[i] =
        static_cast<std::size_t>((ex.pixels[i] - lo) / span * 255.0 + 0.5);
  dge::write_pgm(path, image, image, gray);
}

int run_dataset(const Opts& o) {
  const dge::RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  const dge::Dataset data = dge::make_dataset(dge::dataset_spec(cfg),
                                              cfg.train.seed);

  nlohmann::ordered_json rep;
  rep["train_count"] = data.train.size();
  rep["val_count"] = data.val.size();
  rep["classes"] = cfg.model.classes;
  rep["window"] = cfg.data.window;
  rep["noise"] = cfg.data.noise;
  std::vector<std::size_t> hist(cfg.model.classes, 0);
  double mean = 0, sq = 0;
  std::size_t npx = 0;
  for (const auto& ex : data.train) {
    hist[ex.label]++;
    for (double v : ex.pixels) {
      mean += v;
      sq += v * v;
      ++npx;
    }
  }
  mean /= npx;
  rep["train_label_histogram"] = hist;
  rep["pixel_mean"] = mean;
  rep["pixel_var"] = sq / npx - mean * mean;
  write_json(o.out + "/dataset_report.json", rep);

  const std::size_t samples = std::min<std::size_t>(8, data.train.size());
  for (std::size_t i = 0; i < samples; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "/sample_%03zu_class%zu.pgm", i,
                  data.train[i].label);
    write_sample_pgm(data.train[i], cfg.model.image, o.out + name);
  }
  std::printf("dataset: %zu train / %zu val examples, report in %s\n",
              data.train.size(), data.val.size(), o.out.c_str());
  return 0;
}

template <class T>
int run_train(const Opts& o) {
  const dge::RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  write_json(o.out + "/run_config.json", config_json(cfg));
  const dge::Dataset data = dge::make_dataset(dge::dataset_spec(cfg),
                                              cfg.train.seed);
  dge::VitModel<T> m = dge::make_model<T>(cfg.model, cfg.train.seed);
  const dge::TrainResult res =
      dge::train_model(m, cfg, data, o.out, /*verbose=*/true);

  nlohmann::ordered_json j;
  j["steps"] = res.steps;
  j["best_epoch"] = res.best_epoch;
  j["best_val_accuracy"] = res.best_val_accuracy;
  j["final_val_accuracy"] = res.final_val_accuracy;
  j["final_val_beta"] = res.final_val_beta;
  j["checkpoint_best"] = o.out + "/best.json";
  j["checkpoint_final"] = o.out + "/final.json";
  write_json(o.out + "/train_report.json", j);
  std::printf("train: %zu steps, best val acc %.4f, final beta %.4f\n",
              res.steps, res.best_val_accuracy, res.final_val_beta);
  return 0;
}

template <class T>
int run_eval(const Opts& o) {
  const dge::RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  dge::VitModel<T> m =
      dge::model_from_checkpoint<T>(o.checkpoint, weights_path(o.checkpoint));
  const dge::Dataset data = dge::make_dataset(dge::dataset_spec(cfg),
                                              cfg.train.seed);
  const dge::EvalResult ev = dge::evaluate(m, data.val);

  nlohmann::ordered_json j;
  j["checkpoint"] = o.checkpoint;
  j["count"] = ev.count;
  j["accuracy"] = ev.accuracy;
  j["task_loss"] = ev.task_loss;
  j["mean_beta"] = ev.mean_beta;
  j["mean_psi"] = ev.mean_psi;
  j["flops"] = {{"dynamic", ev.dynamic_flops},
                {"static", ev.static_flops},
                {"total", ev.total_flops}};
  write_json(o.out + "/eval_report.json", j);
  std::printf("eval: accuracy %.4f, beta %.4f over %zu images\n", ev.accuracy,
              ev.mean_beta, ev.count);
  return 0;
}

template <class T>
int run_analyze(const Opts& o) {
  const dge::RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  dge::VitModel<T> m =
      dge::model_from_checkpoint<T>(o.checkpoint, weights_path(o.checkpoint));
  const dge::Dataset data = dge::make_dataset(dge::dataset_spec(cfg),
                                              cfg.train.seed);

  const dge::RedundancyProfile prof =
      dge::redundancy_profile(m, data.val, cfg.analysis.probe_patch);
  dge::LayerHistogram all;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < prof.layers.size(); ++l) {
    const auto& h = prof.layers[l];
    dge::write_histogram_csv(
        h, o.out + "/histogram_layer" + std::to_string(l) + ".csv");
    std::size_t high = 0;
    for (std::size_t b = 0; b < dge::kPccBins; ++b) {
      all.counts[b] += h.counts[b];
      if (-1.0 + 2.0 * b / dge::kPccBins >= 0.8) high += h.counts[b];
    }
    all.total += h.total;
    nlohmann::ordered_json lj;
    lj["layer"] = l;
    lj["mean_pcc"] = h.mean;
    lj["var_pcc"] = h.var;
    lj["frac_above_0.8"] = h.total ? static_cast<double>(high) / h.total : 0;
    layers.push_back(lj);
  }
  dge::write_histogram_csv(all, o.out + "/histogram_all.csv");

  const std::vector<dge::SweepRow> sweep = dge::threshold_sweep(
      m, data.val, cfg.analysis.thresholds, cfg.analysis.probe_patch);
  dge::write_sweep_csv(sweep, o.out + "/sweep.csv");

  const dge::LocalizationStats loc =
      dge::routing_localization(m, data.val, cfg.data.window);

  nlohmann::ordered_json j;
  j["checkpoint"] = o.checkpoint;
  j["probe_patch"] = cfg.analysis.probe_patch;
  j["layers"] = layers;
  nlohmann::ordered_json sj = nlohmann::ordered_json::array();
  for (const auto& r : sweep)
    sj.push_back({{"threshold", r.threshold},
                  {"replaced_frac", r.replaced_frac},
                  {"complexity_ratio", r.complexity_ratio},
                  {"accuracy", r.accuracy}});
  j["sweep"] = sj;
  j["localization"] = {{"frac_finest_inside", loc.frac_in},
                       {"frac_finest_outside", loc.frac_out},
                       {"margin", loc.margin}};
  write_json(o.out + "/analyze_report.json", j);
  std::printf("analyze: %zu layers profiled, %zu sweep points, margin %.3f\n",
              prof.layers.size(), sweep.size(), loc.margin);
  return 0;
}

template <class T>
int run_heatmap(const Opts& o) {
  const dge::RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  dge::VitModel<T> m =
      dge::model_from_checkpoint<T>(o.checkpoint, weights_path(o.checkpoint));
  const dge::Dataset data = dge::make_dataset(dge::dataset_spec(cfg),
                                              cfg.train.seed);
  const std::vector<std::string> files = dge::export_heatmaps(
      m, data.val, o.out, cfg.analysis.heatmap_images, cfg.data.window);
  const dge::LocalizationStats loc =
      dge::routing_localization(m, data.val, cfg.data.window);

  nlohmann::ordered_json j;
  j["checkpoint"] = o.checkpoint;
  j["files"] = files;
  j["localization"] = {{"frac_finest_inside", loc.frac_in},
                       {"frac_finest_outside", loc.frac_out},
                       {"margin", loc.margin}};
  write_json(o.out + "/heatmap_report.json", j);
  std::printf("heatmap: wrote %zu files to %s\n", files.size(), o.out.c_str());
  return 0;
}

template <class T>
int run_bench(const Opts& o) {
  const dge::RunConfig cfg = resolve_config(o);
  ensure_dir(o.out);
  dge::VitModel<T> m =
      o.checkpoint.empty()
          ? dge::make_model<T>(cfg.model, cfg.train.seed)
          : dge::model_from_checkpoint<T>(o.checkpoint,
                                          weights_path(o.checkpoint));
  const dge::Dataset data = dge::make_dataset(dge::dataset_spec(cfg),
                                              cfg.train.seed);
  const dge::BenchResult br = dge::bench_model(m, data.val);

  nlohmann::ordered_json j;
  j["images"] = br.images;
  j["routed_median_s"] = br.routed_median_s;
  j["routed_p95_s"] = br.routed_p95_s;
  j["dense_median_s"] = br.dense_median_s;
  j["dense_p95_s"] = br.dense_p95_s;
  j["mean_beta"] = br.mean_beta;
  j["flops_routed"] = br.flops_routed;
  j["flops_dense"] = br.flops_dense;
  j["flops_ratio"] = br.flops_dense > 0 ? br.flops_routed / br.flops_dense : 0;
  write_json(o.out + "/bench_report.json", j);
  std::printf(
      "bench: routed %.2f ms median vs dense %.2f ms, beta %.4f over %zu "
      "images\n",
      br.routed_median_s * 1e3, br.dense_median_s * 1e3, br.mean_beta,
      br.images);
  return 0;
}

template <class Fn32, class Fn64>
int dispatch(const std::string& precision, Fn32 f32, Fn64 f64) {
  return precision == "f64" ? f64() : f32();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamically grained vision transformer harness"};
  app.require_subcommand(1);

  Opts od, otr, oev, oan, ohm, obe;
  CLI::App* c_dataset =
      app.add_subcommand("dataset", "materialize the synthetic dataset");
  add_common(c_dataset, od, false);
  CLI::App* c_train = app.add_subcommand("train", "train a classifier");
  add_common(c_train, otr, false);
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(c_eval, oev, true);
  CLI::App* c_analyze =
      app.add_subcommand("analyze", "redundancy profile and threshold sweep");
  add_common(c_analyze, oan, true);
  CLI::App* c_heatmap =
      app.add_subcommand("heatmap", "export granularity heat maps");
  add_common(c_heatmap, ohm, true);
  CLI::App* c_bench =
      app.add_subcommand("bench", "routed versus dense timings");
  add_common(c_bench, obe, false);
  c_bench->add_option("--checkpoint", obe.checkpoint,
                      "checkpoint manifest (.json)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_dataset->parsed()) return run_dataset(od);
    if (c_train->parsed())
      return dispatch(otr.precision, [&] { return run_train<float>(otr); },
                      [&] { return run_train<double>(otr); });
    if (c_eval->parsed())
      return dispatch(oev.precision, [&] { return run_eval<float>(oev); },
                      [&] { return run_eval<double>(oev); });
    if (c_analyze->parsed())
      return dispatch(oan.precision, [&] { return run_analyze<float>(oan); },
                      [&] { return run_analyze<double>(oan); });
    if (c_heatmap->parsed())
      return dispatch(ohm.precision, [&] { return run_heatmap<float>(ohm); },
                      [&] { return run_heatmap<double>(ohm); });
    if (c_bench->parsed())
      return dispatch(obe.precision, [&] { return run_bench<float>(obe); },
                      [&] { return run_bench<double>(obe); });
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dge: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
