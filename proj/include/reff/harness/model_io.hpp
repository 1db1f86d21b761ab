#pragma once

#include <filesystem>

#include <json.hpp>

#include "reff/io/checkpoint.hpp"
#include "reff/nn/classifier.hpp"

namespace reff::harness {

inline nlohmann::ordered_json model_json(const nn::ClassifierConfig& c) {
  nlohmann::ordered_json j;
  j["in_channels"] = c.in_channels;
  j["widths"] = c.widths;
  j["num_classes"] = c.num_classes;
  j["taps"] = std::vector<int>(c.taps.begin(), c.taps.end());
  return j;
}

inline nn::ClassifierConfig model_from_json(const nlohmann::json& j) {
  nn::ClassifierConfig c;
  try {
    c.in_channels = j.at("in_channels");
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.num_classes = j.at("num_classes");
    const auto taps = j.at("taps").get<std::vector<int>>();
    c.taps = std::set<int>(taps.begin(), taps.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

/// Classifier parameters under "classifier/..." plus metadata
/// {"kind": "classifier", "model": ..., extra...}.
inline void save_classifier(const nn::ClassifierNet<float>& net, const std::filesystem::path& path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  io::Checkpoint ck;
  auto params = const_cast<nn::ClassifierNet<float>&>(net).parameters();
  io::put_parameters(ck, "classifier", params);
  nlohmann::ordered_json meta;
  meta["kind"] = "classifier";
  meta["model"] = model_json(net.config());
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  ck.set_meta(meta);
  ck.save(path);
}

inline nn::ClassifierNet<float> load_classifier(const std::filesystem::path& path) {
  const auto ck = io::Checkpoint::load(path);
  const auto meta = ck.meta();
  if (meta.value("kind", "") != "classifier")
    throw FormatError(path.string() + ": not a classifier checkpoint (kind '" + meta.value("kind", "") + "')");
  nn::ClassifierNet<float> net(model_from_json(meta.at("model")), 0);
  auto params = net.parameters();
  io::get_parameters(ck, "classifier", params);
  return net;
}

}  // namespace reff::harness
