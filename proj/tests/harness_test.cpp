#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <reff/harness/experiment.hpp>
#include <reff/harness/heatmap.hpp>
#include <reff/harness/layered_config.hpp>

using namespace reff;
using namespace reff::harness;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("reff_harness_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

data::Dataset tiny_dataset(std::size_t n, data::Split split = data::Split::Train, double p = 0) {
  data::BiasConfig cfg;
  cfg.canvas = 16;
  cfg.digit_size = 15;
  cfg.p = p;
  return data::generate_dataset(cfg, n, split, {}, 1);
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.model.widths = {4, 8};
  c.model.taps = {1, 2};
  c.epochs = 1;
  c.batch = 8;
  return c;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.data.canvas = 16;
  c.data.digit_size = 15;
  c.n_train = 40;
  c.n_test = 20;
  c.train = tiny_train();
  c.train.epochs = 2;
  c.train.reff.weights = {{1, 1.0}, {2, 1.0}};
  c.seeds = {0, 1};
  return c;
}

}  // namespace

TEST(ModelIo, ClassifierRoundTripIsBitExact) {
  nn::ClassifierNet<float> net(tiny_train().model, 5);
  const auto dir = temp_dir("model");
  std::filesystem::create_directories(dir);
  save_classifier(net, dir / "m.rfc", {{"note", "x"}});
  auto back = load_classifier(dir / "m.rfc");
  auto pa = net.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(std::ranges::equal(pa[i].value->data(), pb[i].value->data()));
  EXPECT_EQ(io::Checkpoint::load(dir / "m.rfc").meta().at("note"), "x");

  // Same bytes on re-save.
  save_classifier(back, dir / "n.rfc", {{"note", "x"}});
  EXPECT_EQ(slurp(dir / "m.rfc"), slurp(dir / "n.rfc"));
  std::filesystem::remove_all(dir);
}

TEST(ModelIo, TruncatedAndCorruptCheckpointsRaiseFormatError) {
  nn::ClassifierNet<float> net(tiny_train().model, 5);
  const auto dir = temp_dir("corrupt");
  std::filesystem::create_directories(dir);
  save_classifier(net, dir / "m.rfc");
  const std::string bytes = slurp(dir / "m.rfc");
  for (std::size_t keep : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(dir / "t.rfc", std::ios::binary) << bytes.substr(0, keep);
    EXPECT_THROW(load_classifier(dir / "t.rfc"), FormatError) << keep;
  }
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  std::ofstream(dir / "f.rfc", std::ios::binary) << flipped;
  try {
    load_classifier(dir / "f.rfc");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
  }
  EXPECT_THROW(load_classifier(dir / "missing.rfc"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(ModelIo, AnnotatorCheckpointIsNotAClassifier) {
  auto d = tiny_dataset(10);
  annot::AnnotatorTrainConfig cfg;
  cfg.iterations = 1;
  cfg.model.widths = {4, 4, 4};
  std::vector<std::size_t> idx{0};
  auto g = annot::train_annotator(d, idx, cfg);
  const auto dir = temp_dir("kind");
  std::filesystem::create_directories(dir);
  annot::save_annotator(g, dir / "a.rfc");
  EXPECT_THROW(load_classifier(dir / "a.rfc"), FormatError);
  save_classifier(nn::ClassifierNet<float>(tiny_train().model, 1), dir / "c.rfc");
  EXPECT_THROW(annot::load_annotator(dir / "c.rfc"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Heatmap, ColormapEndsAndMonotoneChannels) {
  EXPECT_EQ(colormap(0), (std::array<std::uint8_t, 3>{0, 0, 255}));
  EXPECT_EQ(colormap(1), (std::array<std::uint8_t, 3>{255, 0, 0}));
  for (int i = 1; i <= 100; ++i) {
    auto a = colormap((i - 1) / 100.0), b = colormap(i / 100.0);
    EXPECT_GE(b[0], a[0]);
    EXPECT_LE(b[2], a[2]);
  }
}

TEST(Heatmap, ZeroMapIsBlueAndPeakIsRed) {
  std::vector<float> zero(12, 0.0f);
  auto h = heat_layer(zero, 3, 4);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(h.pixels[i * 3 + 2], 255);
  std::vector<float> m(12, 0.1f);
  m[7] = 2.0f;
  h = heat_layer(m, 3, 4);
  EXPECT_EQ(h.pixels[7 * 3 + 0], 255);
  for (std::size_t i = 0; i < 12; ++i)
    if (i != 7) EXPECT_LT(h.pixels[i * 3 + 0], 255);
}

TEST(Heatmap, RenderedArgmaxMatchesExplanation) {
  auto d = tiny_dataset(6);
  nn::ClassifierNet<float> net(tiny_train().model, 3);
  const auto dir = temp_dir("render");
  std::vector<std::size_t> idx{1, 4};
  auto files = render_heatmaps(net, d, idx, {1, 2}, dir);
  ASSERT_EQ(files.size(), 6u);
  EXPECT_EQ(files[0].filename(), "sample1_input.png");
  EXPECT_EQ(files[1].filename(), "sample1_tap1.png");
  EXPECT_EQ(files[5].filename(), "sample4_tap2.png");
  for (const auto& f : files) EXPECT_TRUE(std::filesystem::exists(f));

  // The hottest pixel of the pure heat layer sits where the explanation peaks.
  std::vector<std::size_t> one{4};
  auto x = d.image_batch(std::span<const std::size_t>(one));
  auto pred = argmax_rows(net.forward(x).logits);
  auto maps = explain(net, x, std::span<const int>(pred), std::set<int>{1});
  auto r = maps[0].resized.data();
  auto heat = heat_layer(r, d.height, d.width);
  const auto peak = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  EXPECT_EQ(heat.pixels[peak * 3], 255);
  // Any other full-red pixel is within one colour step of the peak.
  for (std::size_t i = 0; i < d.pixels(); ++i)
    if (heat.pixels[i * 3] == 255) EXPECT_GE(r[i], r[peak] * (1 - 1.0 / 255));
  std::filesystem::remove_all(dir);
}

TEST(Evaluate, MatchesBruteForceAndIgnoresOrder) {
  auto d = tiny_dataset(30);
  nn::ClassifierNet<float> net(tiny_train().model, 9);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<std::size_t> one{i};
    auto pred = argmax_rows(net.forward(d.image_batch(std::span<const std::size_t>(one))).logits);
    correct += pred[0] == d.labels[i];
  }
  EXPECT_NEAR(evaluate(net, d), 100.0 * static_cast<double>(correct) / 30.0, 1e-9);

  // Reversed sample order: same accuracy.
  data::Dataset r = d;
  const std::size_t n = d.pixels();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t j = d.size() - 1 - i;
    r.labels[i] = d.labels[j];
    std::copy_n(d.images.begin() + static_cast<std::ptrdiff_t>(j * n * 3), n * 3,
                r.images.begin() + static_cast<std::ptrdiff_t>(i * n * 3));
  }
  EXPECT_EQ(evaluate(net, d), evaluate(net, r));
}

TEST(Evaluate, ConstantPredictorScoresClassShare) {
  // Zero head weights and a one-hot bias: every image goes to class 3, which
  // holds exactly a tenth of a balanced set.
  auto d = tiny_dataset(200);
  nn::ClassifierNet<float> net(tiny_train().model, 1);
  for (auto& p : net.parameters())
    if (p.name.rfind("head", 0) == 0) {
      std::ranges::fill(p.value->mutable_data(), 0.0f);
      if (p.name == "head.bias") p.value->mutable_data()[3] = 1.0f;
    }
  EXPECT_DOUBLE_EQ(evaluate(net, d), 10.0);
}

TEST(Train, ZeroLambdaMatchesBaselineBitForBit) {
  auto d = tiny_dataset(40);
  auto masks = MaskProvider::manual(d);
  TrainConfig base = tiny_train();
  base.epochs = 2;
  auto a = train_classifier(base, d);
  TrainConfig reg = base;
  reg.reg = RegMode::Reff;
  reg.reff.lambda = 0;
  auto b = train_classifier(reg, d, &masks);
  auto pa = a.net.parameters(), pb = b.net.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(std::ranges::equal(pa[i].value->data(), pb[i].value->data()));
}

TEST(Train, ClippingBoundsTheUpdate) {
  auto d = tiny_dataset(16);
  TrainConfig c = tiny_train();
  c.batch = 16;
  c.val_fraction = 0;
  c.optimizer = nn::MomentumSgdConfig{1.0, 0.0, 0.0};
  c.clip_norm = 1e-3;
  nn::ClassifierNet<float> init(c.model, splitmix64(c.seed ^ 0x6e6574));
  auto out = train_classifier(c, d);
  // One plain SGD step with lr 1: the parameter change is the clipped gradient.
  auto p0 = init.parameters(), p1 = out.net.parameters();
  double sq = 0;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    auto a = p0[i].value->data(), b = p1[i].value->data();
    for (std::size_t k = 0; k < a.size(); ++k) sq += (double(b[k]) - a[k]) * (double(b[k]) - a[k]);
  }
  EXPECT_LE(std::sqrt(sq), 1e-3 * (1 + 1e-4));
  EXPECT_GT(std::sqrt(sq), 0.5e-3);
}

TEST(Coverage, BoundsAndFullMask) {
  auto d = tiny_dataset(20);
  nn::ClassifierNet<float> net(tiny_train().model, 2);
  const double c = mask_coverage(net, d);
  EXPECT_GE(c, 0.0);
  EXPECT_LE(c, 1.0);
  auto full = d;
  std::fill(full.masks.begin(), full.masks.end(), 1);
  std::size_t zeros = 0;
  const double f = mask_coverage(net, full, 0, &zeros);
  if (zeros < full.size()) EXPECT_NEAR(f, 1.0, 1e-6);
  std::fill(full.masks.begin(), full.masks.end(), 0);
  EXPECT_EQ(mask_coverage(net, full), 0.0);
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny_experiment();
  c.train.reg = RegMode::Reff;
  c.train.reff.diff_mode = DiffMode::Full;
  c.train.reff.reduction = Reduction::PixelMean;
  c.train.clip_norm = 2.5;
  c.annotator.n_per_class = 5;
  c.test_q = -1;
  const auto j = to_json(c);
  auto back = from_json(json::parse(j.dump()));
  EXPECT_EQ(to_json(back).dump(), j.dump());
  EXPECT_EQ(back.train.reff.weights, c.train.reff.weights);
  EXPECT_EQ(back.test_data().q, c.data.q);
}

TEST(Config, RejectsBadValues) {
  auto j = json::parse(to_json(tiny_experiment()).dump());
  auto bad = j;
  bad["reff"]["weights"] = "1,x";
  EXPECT_THROW(from_json(bad), ConfigError);
  bad = j;
  bad["reff"]["diff_mode"] = "half";
  EXPECT_THROW(from_json(bad), ConfigError);
  bad = j;
  bad["model"]["taps"] = {3};
  EXPECT_THROW(from_json(bad), ConfigError);
  bad = j;
  bad["data"].erase("p");
  EXPECT_THROW(from_json(bad), ConfigError);
  bad = j;
  bad["seeds"] = json::array();
  EXPECT_THROW(from_json(bad), ConfigError);
}

TEST(Config, WeightsParsing) {
  EXPECT_EQ(parse_weights("15,60,250,1000"), (std::map<int, double>{{1, 15}, {2, 60}, {3, 250}, {4, 1000}}));
  EXPECT_EQ(parse_weights("0,0,0,1"), (std::map<int, double>{{4, 1}}));
  EXPECT_EQ(weights_string({{2, 3}, {4, 1}}), "0,3,0,1");
  EXPECT_THROW(parse_weights("1,-2"), ConfigError);
  EXPECT_THROW(parse_weights(""), ConfigError);
}

TEST(Presets, AllResolveAndCellsValidate) {
  for (const auto& p : presets()) {
    EXPECT_EQ(&find_preset(p.name), &find_preset(p.name));
    for (const auto& v : p.sweep.values)
      for (const auto& m : p.sweep.methods) EXPECT_NO_THROW(apply_cell(p.base, p.sweep.axis, v, m)) << p.name;
  }
  EXPECT_THROW(find_preset("tab9"), ConfigError);
  const auto& t = find_preset("tab2");
  auto single = apply_cell(t.base, "size", "16", reff_single_method());
  EXPECT_EQ(single.train.reff.weights, (std::map<int, double>{{4, 1.0}}));
  EXPECT_EQ(single.train.reff.lambda, 1000.0);
  EXPECT_EQ(single.data.digit_size, 16u);
  EXPECT_THROW(apply_cell(t.base, "size", "big", reff_method()), ConfigError);
  EXPECT_THROW(apply_cell(t.base, "depth", "1", reff_method()), ConfigError);
}

TEST(RunKey, BaselineIgnoresRegularizerSettings) {
  auto c = tiny_experiment();
  RunSpec a{c, "baseline", "q", "1", 0};
  auto c2 = c;
  c2.train.reff.lambda = 7;
  c2.annotator.n_per_class = 1;
  RunSpec b{c2, "baseline", "n", "1", 0};
  EXPECT_EQ(run_key(a), run_key(b));
  RunSpec r1{c, "reff", "q", "1", 0}, r2{c2, "reff", "q", "1", 0};
  r1.cfg.train.reg = r2.cfg.train.reg = RegMode::Reff;
  EXPECT_NE(run_key(r1), run_key(r2));
  RunSpec s = a;
  s.seed = 1;
  EXPECT_NE(run_key(a), run_key(s));
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
}

TEST(Summary, MeanAndSampleStd) {
  auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_EQ(mean_std({7.0}).second, 0.0);
}

TEST(Grid, CsvIsByteDeterministicAndCacheReproducesIt) {
  auto base = tiny_experiment();
  Sweep sweep{"q", {"0", "1"}, {baseline_method(), reff_method()}};
  const auto a = temp_dir("grid_a"), b = temp_dir("grid_b"), cache = temp_dir("grid_cache");
  GridOptions oa{a, {}, 1, {}}, ob{b, cache, 2, {}};
  auto ga = run_experiment_grid(base, sweep, oa);
  auto gb = run_experiment_grid(base, sweep, ob);
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));
  EXPECT_EQ(slurp(a / "runs.csv"), slurp(b / "runs.csv"));
  EXPECT_EQ(ga.cells.size(), 4u);
  EXPECT_EQ(ga.runs.size(), 8u);

  // Second pass reads every run back from the cache.
  std::size_t cached = 0;
  GridOptions oc{b, cache, 1, [&](const std::string& s) { cached += s.rfind("cached", 0) == 0; }};
  run_experiment_grid(base, sweep, oc);
  EXPECT_EQ(cached, 8u);
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));

  const std::string header = slurp(a / "results.csv");
  EXPECT_EQ(header.rfind("axis,value,method,mean_accuracy,std_accuracy,seeds\n", 0), 0u);
  // Per-run artifacts.
  const auto key = run_key(ga.runs[0]);
  EXPECT_TRUE(std::filesystem::exists(a / "runs" / key / "metrics.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(a / "runs" / key / "model.rfc"));
  for (const auto& p : {a, b, cache}) std::filesystem::remove_all(p);
}

TEST(Grid, PseudoAnnotatorCellRecordsIou) {
  auto base = tiny_experiment();
  base.seeds = {0};
  base.train.epochs = 1;
  base.annotator.iterations = 5;
  base.annotator.model.widths = {4, 4, 4};
  Sweep sweep{"n", {"1"}, {baseline_method(), reff_method()}};
  const auto out = std::filesystem::temp_directory_path() / "reff_grid_pseudo";
  std::filesystem::remove_all(out);
  GridOptions opt;
  opt.out_dir = out;
  auto g = run_experiment_grid(base, sweep, opt);
  ASSERT_EQ(g.results.size(), 2u);
  EXPECT_EQ(g.results[0].annotator_iou, -1.0);
  EXPECT_GE(g.results[1].annotator_iou, 0.0);
  EXPECT_LE(g.results[1].annotator_iou, 1.0);
  EXPECT_TRUE(std::filesystem::exists(out / "runs" / run_key(g.runs[1]) / "annotator.rfc"));
  std::filesystem::remove_all(out);
}

TEST(LayeredConfig, PrecedenceAndDottedFileKeys) {
  LayeredConfig c(ExperimentConfig{});
  c.merge(json::parse(R"({"reff": {"lambda": 3.0}, "train.epochs": 4, "seeds": [5]})"));
  EXPECT_EQ(c.resolve().train.reff.lambda, 3.0);
  EXPECT_EQ(c.resolve().train.epochs, 4u);
  c.set_text("reff.lambda", "0.5");
  c.set_assignment("reff.weights=0,0,0,1");
  c.set_assignment("seeds=1,2");
  c.set_assignment("data.position=random");
  c.set_assignment("annotator.binarize=true");
  const auto r = c.resolve();
  EXPECT_EQ(r.train.reff.lambda, 0.5);
  EXPECT_EQ(r.train.reff.weights, (std::map<int, double>{{4, 1.0}}));
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(r.data.position, data::Position::Random);
  EXPECT_TRUE(r.annotator.binarize);
}

TEST(LayeredConfig, RejectsUnknownKeysWithSuggestion) {
  LayeredConfig c(ExperimentConfig{});
  try {
    c.set_text("reff.lamda", "1");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("did you mean 'reff.lambda'"), std::string::npos) << e.what();
  }
  try {
    c.merge(json::parse(R"({"train": {"epoch": 3}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'train.epochs'"), std::string::npos) << e.what();
  }
  EXPECT_EQ(nearest_key("lr", c.keys()), "train.lr");
  EXPECT_EQ(edit_distance("kitten", "sitting"), 3u);
}

TEST(LayeredConfig, TypeChecks) {
  LayeredConfig c(ExperimentConfig{});
  EXPECT_THROW(c.set_text("train.epochs", "2.5"), ConfigError);
  EXPECT_THROW(c.set_text("train.epochs", "-1"), ConfigError);
  EXPECT_THROW(c.set_text("reff.lambda", "big"), ConfigError);
  EXPECT_THROW(c.set("reff.lambda", "1"), ConfigError);
  EXPECT_THROW(c.set("train.epochs", 2.5), ConfigError);
  EXPECT_THROW(c.set_text("annotator.binarize", "yes"), ConfigError);
  EXPECT_THROW(c.set_assignment("reff.lambda"), ConfigError);
  EXPECT_THROW(c.merge(json::array()), ConfigError);
  c.set_text("reff.variant", "sideways");  // strings pass through; resolving validates
  EXPECT_THROW(c.resolve(), ConfigError);
}

TEST(LayeredConfig, EveryKeyIsSettableFromItsOwnText) {
  LayeredConfig c(ExperimentConfig{});
  const auto doc = c.document();
  for (const auto& k : c.keys()) {
    std::string ptr = "/" + k;
    std::replace(ptr.begin(), ptr.end(), '.', '/');
    const auto& v = doc.at(ordered_json::json_pointer(ptr));
    std::string text;
    if (v.is_string()) text = v.get<std::string>();
    else if (v.is_array()) {
      for (const auto& e : v) text += (text.empty() ? "" : ",") + e.dump();
    } else text = v.dump();
    EXPECT_NO_THROW(c.set_text(k, text)) << k;
  }
  EXPECT_EQ(c.document().dump(), doc.dump());
}
