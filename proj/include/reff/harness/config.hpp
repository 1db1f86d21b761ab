#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "reff/annotator_pipeline.hpp"
#include "reff/data/dataset.hpp"
#include "reff/harness/train.hpp"

namespace reff::harness {

using nlohmann::json;
using nlohmann::ordered_json;

/// Everything one training run needs apart from its seed.
struct ExperimentConfig {
  data::BiasConfig data;  // training distribution
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  double test_q = 1.0;  // negative: same q as training
  std::string train_dir, test_dir;  // load instead of generating when set
  TrainConfig train;
  annot::AnnotatorTrainConfig annotator{.n_per_class = annot::kAll};
  std::vector<std::uint64_t> seeds{0, 1, 2};

  /// Test distribution: background always random, q per test_q.
  data::BiasConfig test_data() const {
    data::BiasConfig t = data;
    t.p = 1.0;
    if (test_q >= 0) t.q = test_q;
    return t;
  }
};

inline std::string weights_string(const std::map<int, double>& w) {
  std::string s;
  const int top = w.empty() ? 0 : w.rbegin()->first;
  for (int l = 1; l <= top; ++l) {
    auto it = w.find(l);
    std::ostringstream os;
    os << (it == w.end() ? 0.0 : it->second);
    s += (l > 1 ? "," : "") + os.str();
  }
  return s;
}

/// "w1,w2,..." -> {layer: w} for positive entries.
inline std::map<int, double> parse_weights(const std::string& s) {
  std::map<int, double> w;
  std::stringstream ss(s);
  std::string tok;
  int layer = 1;
  while (std::getline(ss, tok, ',')) {
    double v;
    try {
      std::size_t pos;
      v = std::stod(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (...) {
      throw ConfigError("reff.weights: '" + tok + "' is not a number");
    }
    if (v < 0) throw ConfigError("reff.weights: weights must be >= 0");
    if (v > 0) w[layer] = v;
    ++layer;
  }
  if (layer == 1) throw ConfigError("reff.weights: empty list");
  return w;
}

inline DiffMode parse_diff_mode(const std::string& s) {
  if (s == "detached") return DiffMode::Detached;
  if (s == "full") return DiffMode::Full;
  throw ConfigError("reff.diff_mode must be detached or full, got '" + s + "'");
}

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::Sum;
  if (s == "pixel_mean") return Reduction::PixelMean;
  throw ConfigError("reff.reduction must be sum or pixel_mean, got '" + s + "'");
}

inline CamTarget parse_cam_target(const std::string& s) {
  if (s == "logit") return CamTarget::Logit;
  if (s == "probability") return CamTarget::Probability;
  throw ConfigError("reff.cam_target must be logit or probability, got '" + s + "'");
}

/// Nested JSON view; every leaf is a config key addressable as a dotted path.
inline ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["data"] = data::config_json(c.data);
  j["data"]["n_train"] = c.n_train;
  j["data"]["n_test"] = c.n_test;
  j["data"]["test_q"] = c.test_q;
  j["data"]["train_dir"] = c.train_dir;
  j["data"]["test_dir"] = c.test_dir;
  j["model"] = {{"widths", c.train.model.widths},
                {"taps", std::vector<int>(c.train.model.taps.begin(), c.train.model.taps.end())}};
  const auto& sgd = std::get<nn::MomentumSgdConfig>(c.train.optimizer);
  j["train"] = {{"epochs", c.train.epochs},           {"batch", c.train.batch},
                {"lr", sgd.lr},                       {"momentum", sgd.momentum},
                {"weight_decay", sgd.weight_decay},   {"val_fraction", c.train.val_fraction},
                {"clip_norm", c.train.clip_norm}};
  j["reff"] = {{"variant", to_string(c.train.reg)},
               {"lambda", c.train.reff.lambda},
               {"weights", weights_string(c.train.reff.weights)},
               {"diff_mode", to_string(c.train.reff.diff_mode)},
               {"reduction", to_string(c.train.reff.reduction)},
               {"cam_target", to_string(c.train.reff.target)}};
  j["annotator"] = annot::config_json(c.annotator);
  j["annotator"].erase("seed");
  j["seeds"] = c.seeds;
  return j;
}

inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  try {
    const auto& d = j.at("data");
    c.data = data::config_from_json(d);
    c.n_train = d.at("n_train");
    c.n_test = d.at("n_test");
    c.test_q = d.at("test_q");
    c.train_dir = d.at("train_dir");
    c.test_dir = d.at("test_dir");
    c.train.model.widths = j.at("model").at("widths").get<std::vector<std::size_t>>();
    const auto taps = j.at("model").at("taps").get<std::vector<int>>();
    c.train.model.taps = std::set<int>(taps.begin(), taps.end());
    c.train.model.num_classes = c.data.num_classes;
    const auto& t = j.at("train");
    c.train.epochs = t.at("epochs");
    c.train.batch = t.at("batch");
    c.train.optimizer = nn::MomentumSgdConfig{t.at("lr"), t.at("momentum"), t.at("weight_decay")};
    c.train.val_fraction = t.at("val_fraction");
    c.train.clip_norm = t.at("clip_norm");
    const auto& r = j.at("reff");
    c.train.reg = parse_reg_mode(r.at("variant"));
    c.train.reff.lambda = r.at("lambda");
    c.train.reff.weights = parse_weights(r.at("weights"));
    c.train.reff.diff_mode = parse_diff_mode(r.at("diff_mode"));
    c.train.reff.reduction = parse_reduction(r.at("reduction"));
    c.train.reff.target = parse_cam_target(r.at("cam_target"));
    json a = j.at("annotator");
    a["seed"] = 0;
    c.annotator = annot::annotator_config_from_json(a);
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  c.data.validate();
  c.train.reff.validate();
  c.annotator.validate();
  if (c.n_train == 0 || c.n_test == 0) throw ConfigError("data.n_train and data.n_test must be positive");
  if (c.train.epochs == 0) throw ConfigError("train.epochs must be positive");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (!(c.train.val_fraction >= 0 && c.train.val_fraction < 1)) throw ConfigError("train.val_fraction must be in [0, 1)");
  for (int t : c.train.model.taps)
    if (t < 1 || static_cast<std::size_t>(t) > c.train.model.widths.size())
      throw ConfigError("model.taps: tap " + std::to_string(t) + " outside 1.." +
                        std::to_string(c.train.model.widths.size()));
  return c;
}

/// Regularized-run defaults for the desk presets: see README.
inline ExperimentConfig desk_defaults() {
  ExperimentConfig c;
  c.train.reff.reduction = Reduction::PixelMean;
  return c;
}

/// One compared method of an experiment table.
struct Method {
  std::string name;
  RegMode reg = RegMode::Off;
  std::optional<std::map<int, double>> weights;
  std::optional<double> lambda;
};

inline Method baseline_method() { return {"baseline", RegMode::Off, {}, {}}; }
inline Method reff_method() { return {"reff", RegMode::Reff, {}, {}}; }
/// Top tap only, lambda 1000, weight 1.
inline Method reff_single_method(int top = 4) { return {"reff_single", RegMode::Reff, std::map<int, double>{{top, 1.0}}, 1000.0}; }

struct Sweep {
  std::string axis;  // p | q | size | n
  std::vector<std::string> values;
  std::vector<Method> methods;
};

struct Preset {
  std::string name;
  std::string description;
  ExperimentConfig base;
  Sweep sweep;
};

inline std::vector<Preset> presets() {
  std::vector<Preset> out;
  {
    Preset p{"tab1a", "background randomness sweep at q = 1", desk_defaults(), {"p", {"0", "0.5", "1"}, {baseline_method(), reff_method()}}};
    p.base.data.q = 1;
    out.push_back(p);
  }
  {
    Preset p{"tab1b", "digit texture randomness sweep at p = 0", desk_defaults(), {"q", {"0.5", "1"}, {baseline_method(), reff_method()}}};
    p.base.data.p = 0;
    out.push_back(p);
  }
  {
    Preset p{"tab2", "digit size sweep, random positions, multi- vs single-layer", desk_defaults(),
             {"size", {"16", "32"}, {baseline_method(), reff_method(), reff_single_method()}}};
    p.base.data.p = 0;
    p.base.data.q = 1;
    p.base.data.position = data::Position::Random;
    out.push_back(p);
  }
  {
    Preset p{"tab3a", "annotated subset size with the pseudo-annotator", desk_defaults(),
             {"n", {"1", "all"}, {baseline_method(), reff_method()}}};
    p.base.data.p = 0;
    p.base.data.q = 1;
    out.push_back(p);
  }
  {
    Preset p{"suppC", "no spurious features: p = 1, test q equals training q", desk_defaults(),
             {"q", {"1"}, {baseline_method(), reff_method()}}};
    p.base.data.p = 1;
    p.base.test_q = -1;
    out.push_back(p);
  }
  return out;
}

inline const Preset& find_preset(const std::string& name) {
  static const std::vector<Preset> all = presets();
  for (const auto& p : all)
    if (p.name == name) return p;
  std::string names;
  for (const auto& p : all) names += (names.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown experiment preset '" + name + "' (available: " + names + ")");
}

}  // namespace reff::harness
