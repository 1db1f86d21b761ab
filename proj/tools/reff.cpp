// reff: dataset generation, training, evaluation, explanation and experiment
// presets from one binary. Exit codes: 0 ok, 1 I/O or runtime error, 2 usage
// or configuration error. Errors go to stderr as one JSON object per line.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <reff/annotator_pipeline.hpp>
#include <reff/harness/experiment.hpp>
#include <reff/harness/heatmap.hpp>
#include <reff/harness/layered_config.hpp>

using namespace reff;
using namespace reff::harness;
namespace fs = std::filesystem;

namespace {

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

/// Flags that stand for a dotted config key.
struct KeyFlags {
  std::vector<std::pair<std::string, std::string>> flags;  // flag name, key
  std::map<std::string, std::string> values;
  std::string config_file;
  std::vector<std::string> sets;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    flags.emplace_back(flag, key);
    app->add_option("--" + flag, values[flag], help + " [" + key + "]");
  }

  /// Defaults < --config < flags < --set.
  LayeredConfig resolve(CLI::App* app, const ExperimentConfig& defaults) const {
    LayeredConfig c(defaults);
    if (!config_file.empty()) c.merge_file(config_file);
    for (const auto& [flag, key] : flags)
      if (app->count("--" + flag)) c.set_text(key, values.at(flag));
    for (const auto& s : sets) c.set_assignment(s);
    return c;
  }
};

void add_common(CLI::App* app, KeyFlags& k) {
  app->add_option("--config", k.config_file, "JSON config file (nested or dotted keys)");
  app->add_option("--set", k.sets, "Override any config key: --set reff.lambda=0.5 (repeatable)");
}

void add_data_flags(CLI::App* app, KeyFlags& k) {
  k.add(app, "p", "data.p", "Background randomness");
  k.add(app, "q", "data.q", "Digit texture randomness");
  k.add(app, "digit-size", "data.digit_size", "Digit side in pixels");
  k.add(app, "canvas", "data.canvas", "Image side in pixels");
  k.add(app, "position", "data.position", "center | random");
  k.add(app, "data-seed", "data.seed", "Dataset seed");
}

void add_train_flags(CLI::App* app, KeyFlags& k) {
  add_data_flags(app, k);
  k.add(app, "n-train", "data.n_train", "Training samples when generating");
  k.add(app, "n-test", "data.n_test", "Test samples when generating");
  k.add(app, "train-dir", "data.train_dir", "Load the training set from this directory");
  k.add(app, "test-dir", "data.test_dir", "Load the test set from this directory");
  k.add(app, "epochs", "train.epochs", "Training epochs");
  k.add(app, "batch", "train.batch", "Batch size");
  k.add(app, "lr", "train.lr", "Learning rate");
  k.add(app, "clip-norm", "train.clip_norm", "Gradient norm cap (0: off)");
  k.add(app, "reff-mode", "reff.variant", "off | reff | l1 | l2");
  k.add(app, "lambda", "reff.lambda", "Regularizer coefficient");
  k.add(app, "weights", "reff.weights", "Per-layer weights w1,w2,...");
  k.add(app, "diff-mode", "reff.diff_mode", "detached | full");
  k.add(app, "reduction", "reff.reduction", "sum | pixel_mean");
  k.add(app, "n-per-class", "annotator.n_per_class", "Manually annotated samples per class (all: every sample)");
  k.add(app, "seeds", "seeds", "Comma-separated training seeds");
}

void write_json(const fs::path& p, const ordered_json& j) {
  std::error_code ec;
  fs::create_directories(p.parent_path(), ec);
  write_text(p, j.dump(2) + "\n");
}

std::string help_footer() {
  const auto doc = to_json(desk_defaults());
  std::string s = "Config keys (defaults; set with --config FILE or --set key=value):\n";
  for (const auto& k : config_keys(doc)) {
    std::string ptr = "/" + k;
    std::replace(ptr.begin(), ptr.end(), '.', '/');
    s += "  " + k + " = " + doc.at(ordered_json::json_pointer(ptr)).dump() + "\n";
  }
  s += "Presets:";
  for (const auto& p : presets()) s += "\n  " + p.name + ": " + p.description;
  s += "\nExit codes: 0 success, 1 I/O or runtime error, 2 usage or configuration error.\n";
  s += "REFF_THREADS caps worker threads.";
  return s;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

data::Dataset dataset_from(const ExperimentConfig& c, data::Split split, const std::string& dir) {
  if (!dir.empty()) return data::load_dataset(dir);
  return split == data::Split::Test ? data::generate_dataset(c.test_data(), c.n_test, split)
                                    : data::generate_dataset(c.data, c.n_train, split);
}

std::vector<std::size_t> parse_indices(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos;
      if (!tok.empty() && tok[0] == '-') throw std::invalid_argument(tok);
      out.push_back(std::stoull(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw UsageError("--indices: '" + tok + "' is not a sample index");
    }
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Relevant-feature-focused training on textured digits", "reff"};
  app.require_subcommand(1);
  app.footer(help_footer());

  // gen-data
  KeyFlags gk;
  std::size_t gen_n = 2000;
  std::string gen_split = "train", gen_out, mnist_images, mnist_labels;
  bool overwrite = false;
  auto* gen = app.add_subcommand("gen-data", "Generate a textured digit dataset");
  add_common(gen, gk);
  add_data_flags(gen, gk);
  gk.add(gen, "seed", "data.seed", "Dataset seed (same as --data-seed)");
  gen->add_option("--n", gen_n, "Number of samples");
  gen->add_option("--split", gen_split, "train | val | test (test forces p = 1)");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--mnist-images", mnist_images, "IDX image file; synthetic glyphs when absent");
  gen->add_option("--mnist-labels", mnist_labels, "IDX label file");
  gen->add_flag("--overwrite", overwrite, "Replace an existing dataset");

  // train
  KeyFlags tk;
  std::string train_out;
  auto* train = app.add_subcommand("train", "Train classifiers, one per seed, and evaluate them");
  add_common(train, tk);
  add_train_flags(train, tk);
  train->add_option("--out", train_out, "Output directory")->required();

  // train-annotator
  KeyFlags ak;
  std::string ann_out;
  auto* train_ann = app.add_subcommand("train-annotator", "Fit the pseudo-annotator on n manual masks per class");
  add_common(train_ann, ak);
  add_data_flags(train_ann, ak);
  ak.add(train_ann, "n-train", "data.n_train", "Training samples when generating");
  ak.add(train_ann, "train-dir", "data.train_dir", "Load the training set from this directory");
  ak.add(train_ann, "n-per-class", "annotator.n_per_class", "Manually annotated samples per class");
  ak.add(train_ann, "iterations", "annotator.iterations", "Optimizer steps");
  ak.add(train_ann, "annotator-loss", "annotator.loss", "bce_l1 | adversarial");
  ak.add(train_ann, "seeds", "seeds", "The first seed is used");
  train_ann->add_option("--out", ann_out, "Output directory")->required();

  // eval
  KeyFlags ek;
  std::string eval_model;
  auto* eval = app.add_subcommand("eval", "Test accuracy and mask coverage of a saved classifier");
  add_common(eval, ek);
  add_data_flags(eval, ek);
  ek.add(eval, "n-test", "data.n_test", "Test samples when generating");
  ek.add(eval, "test-dir", "data.test_dir", "Load the test set from this directory");
  eval->add_option("--model", eval_model, "Classifier checkpoint")->required();

  // explain
  KeyFlags xk;
  std::string x_model, x_out, x_indices = "0,1,2,3";
  std::vector<int> x_taps;
  auto* explain_cmd = app.add_subcommand("explain", "Write explanation heatmaps for chosen test samples");
  add_common(explain_cmd, xk);
  add_data_flags(explain_cmd, xk);
  xk.add(explain_cmd, "n-test", "data.n_test", "Test samples when generating");
  xk.add(explain_cmd, "test-dir", "data.test_dir", "Load samples from this directory");
  explain_cmd->add_option("--model", x_model, "Classifier checkpoint")->required();
  explain_cmd->add_option("--indices", x_indices, "Comma-separated sample indices");
  explain_cmd->add_option("--taps", x_taps, "Layers to explain (default: the model's taps)");
  explain_cmd->add_option("--out", x_out, "Output directory")->required();

  // experiment
  KeyFlags pk;
  std::string preset_name, exp_out, exp_cache;
  std::vector<std::string> exp_values;
  std::size_t exp_threads = worker_count();
  auto* exp = app.add_subcommand("experiment", "Run a named table preset over its sweep, methods and seeds");
  add_common(exp, pk);
  add_train_flags(exp, pk);
  exp->add_option("preset", preset_name, "tab1a | tab1b | tab2 | tab3a | suppC")->required();
  exp->add_option("--values", exp_values, "Restrict the sweep to these values");
  exp->add_option("--out", exp_out, "Output directory")->required();
  exp->add_option("--cache", exp_cache, "Run cache directory (default: OUT/cache)");
  exp->add_option("--threads", exp_threads, "Runs in parallel (default: REFF_THREADS or all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  if (*gen) {
    auto cfg = gk.resolve(gen, desk_defaults()).resolve();
    const auto split = data::parse_split(gen_split);
    if (mnist_images.empty() != mnist_labels.empty())
      throw UsageError("--mnist-images and --mnist-labels go together");
    data::GlyphSource glyphs;
    if (!mnist_images.empty()) glyphs = data::GlyphSource(data::load_mnist_idx(mnist_images, mnist_labels));
    const auto d = data::generate_dataset(cfg.data, gen_n, split, glyphs);
    data::save_dataset(d, gen_out, overwrite);
    write_json(fs::path(gen_out) / "config.json", data::config_json(d.cfg));
    std::cout << ordered_json{{"out", gen_out}, {"split", gen_split}, {"count", d.size()}, {"p", d.cfg.p}, {"q", d.cfg.q}}.dump()
              << "\n";
    return 0;
  }

  if (*train) {
    const auto layered = tk.resolve(train, desk_defaults());
    const auto cfg = layered.resolve();
    write_json(fs::path(train_out) / "config.json", layered.document());
    DataCache cache;
    std::string csv = "seed,test_accuracy,coverage,best_epoch,best_val_accuracy,annotator_iou\n";
    for (auto seed : cfg.seeds) {
      RunSpec spec{cfg, to_string(cfg.train.reg), "seed", std::to_string(seed), seed};
      RunOptions ro;
      ro.run_dir = fs::path(train_out) / ("seed" + std::to_string(seed));
      ro.log = log_line;
      const auto r = execute_run(spec, cache, ro);
      csv += std::to_string(seed) + "," + fmt(r.test_accuracy) + "," + fmt(r.coverage) + "," + std::to_string(r.best_epoch) +
             "," + fmt(r.best_val_accuracy) + "," + fmt(r.annotator_iou) + "\n";
      write_text(fs::path(train_out) / "results.csv", csv);
      std::cout << ordered_json{{"seed", seed}, {"test_accuracy", r.test_accuracy}, {"coverage", r.coverage}}.dump() << "\n";
    }
    return 0;
  }

  if (*train_ann) {
    const auto layered = ak.resolve(train_ann, desk_defaults());
    const auto cfg = layered.resolve();
    if (cfg.annotator.n_per_class == 0) throw UsageError("--n-per-class must be at least 1");
    write_json(fs::path(ann_out) / "config.json", layered.document());
    const auto d = dataset_from(cfg, data::Split::Train, cfg.train_dir);
    const auto seed = cfg.seeds.front();
    const auto subset = annot::select_annotated_subset(d, cfg.annotator.n_per_class, seed);
    auto ac = cfg.annotator;
    ac.seed = seed;
    const auto g = annot::train_annotator(d, subset, ac, [](std::size_t it, double loss) {
      if (it % 500 == 0) log_line("iteration " + std::to_string(it) + " loss " + std::to_string(loss));
    });
    std::vector<std::size_t> held;
    for (std::size_t i = 0; i < d.size() && held.size() < 500; ++i)
      if (!std::binary_search(subset.begin(), subset.end(), i)) held.push_back(i);
    const double iou = held.empty() ? 1.0 : annot::dataset_iou(g, d, held);
    annot::save_annotator(g, fs::path(ann_out) / "annotator.rfc");
    std::cout << ordered_json{{"annotated", subset.size()}, {"train_bce", g.train_bce}, {"heldout_iou", iou}}.dump() << "\n";
    return 0;
  }

  if (*eval) {
    const auto cfg = ek.resolve(eval, desk_defaults()).resolve();
    const auto net = load_classifier(eval_model);
    const auto d = dataset_from(cfg, data::Split::Test, cfg.test_dir);
    std::size_t zeros = 0;
    const double acc = evaluate(net, d);
    const double cov = mask_coverage(net, d, 0, &zeros);
    std::cout << ordered_json{{"accuracy", acc}, {"coverage", cov}, {"zero_maps", zeros}, {"samples", d.size()}}.dump()
              << "\n";
    return 0;
  }

  if (*explain_cmd) {
    const auto layered = xk.resolve(explain_cmd, desk_defaults());
    const auto cfg = layered.resolve();
    const auto net = load_classifier(x_model);
    const auto d = dataset_from(cfg, data::Split::Test, cfg.test_dir);
    std::set<int> taps(x_taps.begin(), x_taps.end());
    if (taps.empty()) taps = net.config().taps;
    for (int t : taps)
      if (!net.config().taps.count(t)) throw UsageError("--taps: layer " + std::to_string(t) + " is not tapped by the model");
    const auto idx = parse_indices(x_indices);
    for (auto i : idx)
      if (i >= d.size()) throw UsageError("--indices: " + std::to_string(i) + " out of range (" + std::to_string(d.size()) + " samples)");
    const auto files = render_heatmaps(net, d, idx, taps, x_out);
    write_json(fs::path(x_out) / "config.json", layered.document());
    std::cout << ordered_json{{"out", x_out}, {"files", files.size()}}.dump() << "\n";
    return 0;
  }

  if (*exp) {
    const Preset& preset = find_preset(preset_name);
    const auto layered = pk.resolve(exp, preset.base);
    const auto cfg = layered.resolve();
    Sweep sweep = preset.sweep;
    if (!exp_values.empty()) {
      for (const auto& v : exp_values)
        if (std::find(sweep.values.begin(), sweep.values.end(), v) == sweep.values.end())
          throw UsageError("--values: '" + v + "' is not in the " + preset.name + " sweep");
      sweep.values = exp_values;
    }
    const fs::path out(exp_out);
    write_json(out / "config.json", layered.document());
    write_json(out / "experiment.json", ordered_json{{"preset", preset.name}, {"axis", sweep.axis}, {"values", sweep.values}});
    GridOptions go;
    go.out_dir = out;
    go.cache_dir = exp_cache.empty() ? out / "cache" : fs::path(exp_cache);
    go.threads = exp_threads;
    go.log = log_line;
    const auto g = run_experiment_grid(cfg, sweep, go);
    std::cout << summary_csv(g);
    return 0;
  }
  return 0;
}

int report(const char* kind, const std::string& message, int code) {
  std::cerr << ordered_json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    return report("usage", e.what(), 2);
  } catch (const ConfigError& e) {
    return report("config", e.what(), 2);
  } catch (const IoError& e) {
    return report("io", e.what(), 1);
  } catch (const FormatError& e) {
    return report("format", e.what(), 1);
  } catch (const std::exception& e) {
    return report("runtime", e.what(), 1);
  }
}
