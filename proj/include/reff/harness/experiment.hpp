#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "reff/annotator_pipeline.hpp"
#include "reff/harness/config.hpp"
#include "reff/harness/model_io.hpp"
#include "reff/harness/train.hpp"
#include "reff/parallel.hpp"

namespace reff::harness {

/// Mean over samples of sum(resized I'_top * s) / sum(resized I'_top), for the
/// predicted class at the top tapped layer. Samples whose map is zero are
/// skipped; `zero_maps` reports how many.
inline double mask_coverage(const nn::ClassifierNet<float>& net, const data::Dataset& d, int tap = 0,
                            std::size_t* zero_maps = nullptr) {
  if (d.size() == 0) throw ValueError("mask_coverage: empty dataset");
  if (tap == 0) tap = *net.config().taps.rbegin();
  const std::set<int> taps{tap};
  double total = 0;
  std::size_t counted = 0, zeros = 0;
  const std::size_t n = d.pixels(), chunk = 50;
  for (std::size_t s = 0; s < d.size(); s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(d.size(), s + chunk); ++i) idx.push_back(i);
    const auto x = d.image_batch(std::span<const std::size_t>(idx));
    const auto pred = argmax_rows(net.forward(x).logits);
    const auto maps = explain(net, x, std::span<const int>(pred), taps);
    const auto r = maps.front().resized.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      double in = 0, all = 0;
      for (std::size_t j = 0; j < n; ++j) {
        all += r[b * n + j];
        in += r[b * n + j] * d.masks[idx[b] * n + j];
      }
      if (all > 0) {
        total += in / all;
        ++counted;
      } else {
        ++zeros;
      }
    }
  }
  if (zero_maps) *zero_maps = zeros;
  return counted ? total / static_cast<double>(counted) : 0.0;
}

/// Stable 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// A fully resolved training run.
struct RunSpec {
  ExperimentConfig cfg;  // axis value and method already applied
  std::string method;
  std::string axis, value;
  std::uint64_t seed = 0;
  bool uses_annotator() const {
    return cfg.train.regularized() && cfg.annotator.n_per_class != annot::kAll && cfg.annotator.n_per_class != 0;
  }
};

/// Identity of a run: the effective configuration minus the labels that only
/// name it, so equal runs in different tables share a cache entry.
inline ordered_json run_identity(const RunSpec& r) {
  ordered_json j = to_json(r.cfg);
  j.erase("seeds");
  j["seed"] = r.seed;
  if (!r.cfg.train.regularized()) {
    // Regularizer settings do not influence an unregularized run.
    j["reff"] = {{"variant", "off"}};
    j.erase("annotator");
  } else if (!r.uses_annotator()) {
    j["annotator"] = {{"n_per_class", annot::n_per_class_string(r.cfg.annotator.n_per_class)}};
  }
  return j;
}

inline std::string run_key(const RunSpec& r) { return fnv1a_hex(run_identity(r).dump()); }

struct RunResult {
  double test_accuracy = 0;
  double coverage = 0;
  std::size_t zero_maps = 0;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0;
  double annotator_iou = -1;  // validation IoU of the pseudo-annotator, if any
  double seconds = 0;
  std::vector<MetricsRecord> metrics;
};

inline ordered_json metrics_json(const MetricsRecord& m) {
  return {{"epoch", m.epoch},          {"split", m.split},           {"accuracy", m.accuracy},
          {"main_loss", m.main_loss},  {"reff_loss", m.reff_loss},   {"wall_time", m.wall_time},
          {"seed", m.seed}};
}

inline MetricsRecord metrics_from_json(const json& j) {
  return {j.at("epoch"), j.at("split"), j.at("accuracy"), j.at("main_loss"), j.at("reff_loss"), j.at("wall_time"),
          j.at("seed")};
}

inline ordered_json result_json(const RunResult& r) {
  ordered_json j = {{"test_accuracy", r.test_accuracy}, {"coverage", r.coverage},
                    {"zero_maps", r.zero_maps},         {"best_epoch", r.best_epoch},
                    {"best_val_accuracy", r.best_val_accuracy}, {"annotator_iou", r.annotator_iou},
                    {"seconds", r.seconds}};
  j["metrics"] = ordered_json::array();
  for (const auto& m : r.metrics) j["metrics"].push_back(metrics_json(m));
  return j;
}

inline RunResult result_from_json(const json& j) {
  RunResult r;
  r.test_accuracy = j.at("test_accuracy");
  r.coverage = j.at("coverage");
  r.zero_maps = j.at("zero_maps");
  r.best_epoch = j.at("best_epoch");
  r.best_val_accuracy = j.at("best_val_accuracy");
  r.annotator_iou = j.at("annotator_iou");
  r.seconds = j.at("seconds");
  for (const auto& m : j.at("metrics")) r.metrics.push_back(metrics_from_json(m));
  return r;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << s;
  if (!out) throw IoError("short write to " + p.string());
}

/// Generated or loaded datasets, shared between runs of a grid.
class DataCache {
 public:
  const data::Dataset& get(const data::BiasConfig& cfg, std::size_t n, data::Split split, const std::string& dir) {
    const std::string key = dir.empty() ? data::config_json(cfg).dump() + std::to_string(n) + data::to_string(split) : dir;
    std::lock_guard lock(mu_);
    auto it = sets_.find(key);
    if (it != sets_.end()) return it->second;
    data::Dataset d = dir.empty() ? data::generate_dataset(cfg, n, split) : data::load_dataset(dir);
    return sets_.emplace(key, std::move(d)).first->second;
  }

 private:
  std::mutex mu_;
  std::map<std::string, data::Dataset> sets_;
};

struct RunOptions {
  std::filesystem::path cache_dir;   // empty: no caching
  std::filesystem::path run_dir;     // empty: no per-run artifacts
  bool save_model = true;
  std::function<void(const std::string&)> log;
};

/// Trains (and, when needed, first fits the pseudo-annotator for) one run,
/// then evaluates on the test split.
inline RunResult execute_run(const RunSpec& spec, DataCache& data_cache, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig& c = spec.cfg;
  const data::Dataset& train = data_cache.get(c.data, c.n_train, data::Split::Train, c.train_dir);
  const data::Dataset& test = data_cache.get(c.test_data(), c.n_test, data::Split::Test, c.test_dir);

  RunResult res;
  TrainConfig tc = c.train;
  tc.seed = spec.seed;
  tc.model.num_classes = train.cfg.num_classes;

  std::optional<MaskProvider> masks;
  if (tc.regularized()) {
    const std::size_t n = c.annotator.n_per_class;
    if (n == annot::kAll || n == 0) {
      masks = MaskProvider::manual(train);
    } else {
      auto subset = annot::select_annotated_subset(train, n, spec.seed);
      annot::AnnotatorTrainConfig ac = c.annotator;
      ac.seed = spec.seed;
      if (opt.log) opt.log("annotator n=" + std::to_string(n) + " seed=" + std::to_string(spec.seed));
      const auto g = annot::train_annotator(train, subset, ac);
      // Validation IoU over samples outside the annotated subset.
      std::vector<std::size_t> held;
      for (std::size_t i = 0; i < train.size() && held.size() < 200; ++i)
        if (!std::binary_search(subset.begin(), subset.end(), i)) held.push_back(i);
      if (!held.empty()) res.annotator_iou = annot::dataset_iou(g, train, held);
      if (!opt.run_dir.empty()) {
        std::filesystem::create_directories(opt.run_dir);
        annot::save_annotator(g, opt.run_dir / "annotator.rfc");
      }
      masks = annot::make_mask_provider(train, n, subset, &g, ac.binarize);
    }
  }

  std::ofstream jsonl;
  if (!opt.run_dir.empty()) {
    std::filesystem::create_directories(opt.run_dir);
    jsonl.open(opt.run_dir / "metrics.jsonl", std::ios::binary);
    write_text(opt.run_dir / "config.json", run_identity(spec).dump(2) + "\n");
  }
  auto out = train_classifier(tc, train, masks ? &*masks : nullptr, [&](const MetricsRecord& m) {
    if (jsonl.is_open()) jsonl << metrics_json(m).dump() << "\n" << std::flush;
    if (opt.log && m.split == "val")
      opt.log(spec.method + " " + spec.axis + "=" + spec.value + " seed=" + std::to_string(spec.seed) + " epoch " +
              std::to_string(m.epoch) + " val " + std::to_string(m.accuracy));
  });
  res.metrics = out.metrics;
  res.best_epoch = out.best_epoch;
  res.best_val_accuracy = out.best_val_accuracy;
  res.test_accuracy = evaluate(out.net, test);
  res.coverage = mask_coverage(out.net, test, 0, &res.zero_maps);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!opt.run_dir.empty() && opt.save_model)
    save_classifier(out.net, opt.run_dir / "model.rfc", {{"test_accuracy", res.test_accuracy}});
  return res;
}

/// Applies one axis value and one method to a base configuration.
inline ExperimentConfig apply_cell(ExperimentConfig c, const std::string& axis, const std::string& value,
                                   const Method& m) {
  auto number = [&](const std::string& what) {
    try {
      std::size_t pos;
      const double v = std::stod(value, &pos);
      if (pos == value.size()) return v;
    } catch (...) {
    }
    throw ConfigError("experiment: " + what + " value '" + value + "' is not a number");
  };
  if (axis == "p") c.data.p = number("p");
  else if (axis == "q") c.data.q = number("q");
  else if (axis == "size") c.data.digit_size = static_cast<std::size_t>(number("size"));
  else if (axis == "n") c.annotator.n_per_class = annot::parse_n_per_class(value);
  else throw ConfigError("experiment: unknown sweep axis '" + axis + "' (p, q, size, n)");
  c.train.reg = m.reg;
  if (m.weights) c.train.reff.weights = *m.weights;
  if (m.lambda) c.train.reff.lambda = *m.lambda;
  if ((m.reg == RegMode::L1 || m.reg == RegMode::L2) && !m.lambda) c.train.reff.lambda = kVariantLambda;
  if (m.reg == RegMode::Off) c.annotator.n_per_class = annot::kAll;
  c.data.validate();
  return c;
}

struct CellSummary {
  std::string axis, value, method;
  std::vector<double> accuracies;  // per seed, in seed order
  std::vector<double> coverages;
  double mean = 0, std = 0;
};

struct GridResult {
  std::vector<RunSpec> runs;
  std::vector<RunResult> results;  // parallel to runs
  std::vector<CellSummary> cells;  // ordered by (value, method)
};

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

inline std::string summary_csv(const GridResult& g) {
  std::string s = "axis,value,method,mean_accuracy,std_accuracy,seeds\n";
  for (const auto& c : g.cells)
    s += c.axis + "," + c.value + "," + c.method + "," + fmt(c.mean) + "," + fmt(c.std) + "," +
         std::to_string(c.accuracies.size()) + "\n";
  return s;
}

inline std::string runs_csv(const GridResult& g) {
  std::string s = "axis,value,method,seed,test_accuracy,coverage,best_epoch,best_val_accuracy,annotator_iou\n";
  for (std::size_t i = 0; i < g.runs.size(); ++i) {
    const auto& r = g.runs[i];
    const auto& x = g.results[i];
    s += r.axis + "," + r.value + "," + r.method + "," + std::to_string(r.seed) + "," + fmt(x.test_accuracy) + "," +
         fmt(x.coverage) + "," + std::to_string(x.best_epoch) + "," + fmt(x.best_val_accuracy) + "," +
         fmt(x.annotator_iou) + "\n";
  }
  return s;
}

struct GridOptions {
  std::filesystem::path out_dir;    // results.csv, runs.csv, runs/<key>/...; empty: nothing written
  std::filesystem::path cache_dir;  // <key>.json per finished run; empty: no caching
  std::size_t threads = worker_count();
  std::function<void(const std::string&)> log;
};

/// Runs every (value, method, seed) cell. Finished runs are written to the
/// cache as they complete, so an interrupted grid resumes where it stopped.
inline GridResult run_experiment_grid(const ExperimentConfig& base, const Sweep& sweep, const GridOptions& opt = {}) {
  if (sweep.values.empty() || sweep.methods.empty()) throw ConfigError("experiment: empty sweep");
  GridResult g;
  for (const auto& v : sweep.values)
    for (const auto& m : sweep.methods)
      for (auto seed : base.seeds) g.runs.push_back({apply_cell(base, sweep.axis, v, m), m.name, sweep.axis, v, seed});
  g.results.resize(g.runs.size());

  if (!opt.cache_dir.empty()) std::filesystem::create_directories(opt.cache_dir);
  if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);
  DataCache data_cache;
  std::mutex log_mu;
  auto log = [&](const std::string& s) {
    if (!opt.log) return;
    std::lock_guard lock(log_mu);
    opt.log(s);
  };

  parallel_for(
      g.runs.size(),
      [&](std::size_t i) {
        const RunSpec& r = g.runs[i];
        const std::string key = run_key(r);
        const auto cached = opt.cache_dir.empty() ? std::filesystem::path{} : opt.cache_dir / (key + ".json");
        if (!cached.empty() && std::filesystem::exists(cached)) {
          std::ifstream in(cached);
          try {
            g.results[i] = result_from_json(json::parse(in).at("result"));
            log("cached " + r.method + " " + r.axis + "=" + r.value + " seed=" + std::to_string(r.seed));
            return;
          } catch (const std::exception&) {
            log("ignoring unreadable cache entry " + cached.string());
          }
        }
        RunOptions ro;
        ro.cache_dir = opt.cache_dir;
        if (!opt.out_dir.empty()) ro.run_dir = opt.out_dir / "runs" / key;
        ro.log = log;
        g.results[i] = execute_run(r, data_cache, ro);
        if (!cached.empty()) {
          ordered_json j;
          j["identity"] = run_identity(r);
          j["result"] = result_json(g.results[i]);
          const auto tmp = cached.string() + ".tmp";
          write_text(tmp, j.dump() + "\n");
          std::filesystem::rename(tmp, cached);
        }
        log("done " + r.method + " " + r.axis + "=" + r.value + " seed=" + std::to_string(r.seed) + " test " +
            fmt(g.results[i].test_accuracy, 2));
      },
      opt.threads);

  for (const auto& v : sweep.values)
    for (const auto& m : sweep.methods) {
      CellSummary c{sweep.axis, v, m.name, {}, {}, 0, 0};
      for (std::size_t i = 0; i < g.runs.size(); ++i)
        if (g.runs[i].value == v && g.runs[i].method == m.name) {
          c.accuracies.push_back(g.results[i].test_accuracy);
          c.coverages.push_back(g.results[i].coverage);
        }
      std::tie(c.mean, c.std) = mean_std(c.accuracies);
      g.cells.push_back(c);
    }

  if (!opt.out_dir.empty()) {
    write_text(opt.out_dir / "results.csv", summary_csv(g));
    write_text(opt.out_dir / "runs.csv", runs_csv(g));
    std::ofstream jsonl(opt.out_dir / "metrics.jsonl", std::ios::binary);
    for (std::size_t i = 0; i < g.runs.size(); ++i)
      for (const auto& m : g.results[i].metrics) {
        ordered_json j = metrics_json(m);
        j["method"] = g.runs[i].method;
        j[g.runs[i].axis] = g.runs[i].value;
        jsonl << j.dump() << "\n";
      }
  }
  return g;
}

inline const CellSummary& find_cell(const GridResult& g, const std::string& value, const std::string& method) {
  for (const auto& c : g.cells)
    if (c.value == value && c.method == method) return c;
  throw ValueError("experiment: no cell " + value + "/" + method);
}

}  // namespace reff::harness
