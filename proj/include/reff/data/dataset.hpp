#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "reff/data/glyphs.hpp"
#include "reff/data/texture.hpp"
#include "reff/parallel.hpp"
#include "reff/tensor.hpp"

namespace reff::data {

enum class Position { Center, Random };
enum class Split { Train, Val, Test };

inline std::string to_string(Position p) { return p == Position::Center ? "center" : "random"; }
inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}
inline Position parse_position(const std::string& s) {
  if (s == "center") return Position::Center;
  if (s == "random") return Position::Random;
  throw ConfigError("position must be center or random, got '" + s + "'");
}
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("split must be train, val or test, got '" + s + "'");
}

/// Label -> fixed texture classes (bank ids).
struct ClassMapping {
  std::vector<std::size_t> background;
  std::vector<std::size_t> digit_texture;
};

struct BiasConfig {
  double p = 0.0;  // background randomness
  double q = 1.0;  // digit texture randomness
  std::size_t digit_size = 63;
  std::size_t canvas = 64;
  Position position = Position::Center;
  std::size_t num_classes = 10;
  std::size_t digit_classes = 8;
  std::size_t background_classes = 12;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(p >= 0 && p <= 1)) throw ConfigError("data.p must lie in [0, 1]");
    if (!(q >= 0 && q <= 1)) throw ConfigError("data.q must lie in [0, 1]");
    if (canvas == 0) throw ConfigError("data.canvas must be positive");
    if (digit_size == 0 || digit_size > canvas)
      throw ConfigError("data.digit_size " + std::to_string(digit_size) + " must lie in [1, canvas=" + std::to_string(canvas) + "]");
    if (num_classes == 0 || num_classes > 10) throw ConfigError("data.num_classes must lie in [1, 10]");
    if (digit_classes == 0 || background_classes == 0) throw ConfigError("texture banks must be non-empty");
  }

  /// Label c uses background class c mod B and digit texture c mod D.
  ClassMapping mapping() const {
    ClassMapping m;
    for (std::size_t c = 0; c < num_classes; ++c) {
      m.background.push_back(digit_classes + c % background_classes);
      m.digit_texture.push_back(c % digit_classes);
    }
    return m;
  }

  bool operator==(const BiasConfig&) const = default;
};

struct Provenance {
  bool random_background = false;
  bool random_digit = false;
  std::size_t background_class = 0;
  std::size_t digit_class = 0;
  std::size_t top = 0, left = 0;
  std::uint64_t background_seed = 0, digit_seed = 0;

  bool operator==(const Provenance&) const = default;
};

struct Sample {
  RgbImage image;                  // H x W x 3
  int label = 0;
  std::vector<std::uint8_t> mask;  // H x W, 1 on the digit
  Provenance provenance;
};

/// With probability p a uniform background class, otherwise the label's class.
/// `random_branch` reports which branch was taken.
inline std::size_t sample_background_class(Rng& rng, int label, double p, const ClassMapping& m,
                                           const TextureBank& bank, bool* random_branch = nullptr) {
  if (bank.background_classes() == 0) throw ValueError("sample_background_class: empty bank");
  const bool r = rng.bernoulli(p);
  if (random_branch) *random_branch = r;
  return r ? bank.background_id(rng.below(bank.background_classes())) : m.background.at(static_cast<std::size_t>(label));
}

inline std::size_t sample_digit_texture_class(Rng& rng, int label, double q, const ClassMapping& m,
                                              const TextureBank& bank, bool* random_branch = nullptr) {
  if (bank.digit_classes() == 0) throw ValueError("sample_digit_texture_class: empty bank");
  const bool r = rng.bernoulli(q);
  if (random_branch) *random_branch = r;
  return r ? bank.digit_id(rng.below(bank.digit_classes())) : m.digit_texture.at(static_cast<std::size_t>(label));
}

/// Binary glyph -> size x size, bilinear with half-pixel centers, then >= 0.5.
inline std::vector<std::uint8_t> scale_glyph(const Glyph& g, std::size_t size) {
  std::vector<std::uint8_t> out(size * size);
  const double n = static_cast<double>(kGlyphSide);
  auto coord = [&](std::size_t i) {
    return std::clamp((static_cast<double>(i) + 0.5) * n / static_cast<double>(size) - 0.5, 0.0, n - 1);
  };
  for (std::size_t y = 0; y < size; ++y) {
    const double sy = coord(y);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, kGlyphSide - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double sx = coord(x);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, kGlyphSide - 1);
      const double fx = sx - static_cast<double>(x0);
      auto at = [&](std::size_t i, std::size_t j) { return static_cast<double>(g[i * kGlyphSide + j]); };
      const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      out[y * size + x] = v >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

/// One composited sample. Both textures are full-canvas patches; the digit
/// patch shows through where the scaled glyph is set.
inline Sample render_sample(Rng& rng, const Glyph& glyph, int label, const BiasConfig& cfg, const TextureBank& bank) {
  if (cfg.digit_size > cfg.canvas)
    throw ConfigError("render_sample: digit size " + std::to_string(cfg.digit_size) + " exceeds canvas " + std::to_string(cfg.canvas));
  const ClassMapping m = cfg.mapping();
  Sample s;
  s.label = label;
  auto& pv = s.provenance;
  pv.background_class = sample_background_class(rng, label, cfg.p, m, bank, &pv.random_background);
  pv.digit_class = sample_digit_texture_class(rng, label, cfg.q, m, bank, &pv.random_digit);
  pv.background_seed = rng.next();
  pv.digit_seed = rng.next();
  const std::size_t slack = cfg.canvas - cfg.digit_size;
  if (cfg.position == Position::Center) {
    pv.top = pv.left = slack / 2;
  } else {
    pv.top = rng.below(slack + 1);
    pv.left = rng.below(slack + 1);
  }
  const std::size_t H = cfg.canvas, W = cfg.canvas;
  s.image = bank.patch(pv.background_class, pv.background_seed, H, W);
  const RgbImage fg = bank.patch(pv.digit_class, pv.digit_seed, H, W);
  s.mask.assign(H * W, 0);
  const auto scaled = scale_glyph(glyph, cfg.digit_size);
  for (std::size_t y = 0; y < cfg.digit_size; ++y)
    for (std::size_t x = 0; x < cfg.digit_size; ++x) {
      if (!scaled[y * cfg.digit_size + x]) continue;
      const std::size_t i = (pv.top + y) * W + pv.left + x;
      s.mask[i] = 1;
      std::memcpy(&s.image.pixels[i * 3], &fg.pixels[i * 3], 3);
    }
  return s;
}

/// In-memory dataset: images H x W x 3 and masks H x W stored contiguously.
struct Dataset {
  BiasConfig cfg;
  Split split = Split::Train;
  std::string glyph_source = "synthetic";
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> images;
  std::vector<std::uint8_t> masks;  // 0 / 1
  std::vector<Provenance> provenance;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t pixels() const noexcept { return height * width; }

  /// Images as (B, 3, H, W) in [0, 1].
  template <class T = float>
  Tensor<T> image_batch(std::span<const std::size_t> idx) const {
    Tensor<T> out({idx.size(), 3, height, width});
    auto d = out.mutable_data();
    const std::size_t n = pixels();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::uint8_t* src = &images.at(idx[b] * n * 3);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < n; ++i) d[(b * 3 + c) * n + i] = static_cast<T>(src[i * 3 + c]) / T(255);
    }
    return out;
  }

  /// Masks as (B, 1, H, W).
  template <class T = float>
  Tensor<T> mask_batch(std::span<const std::size_t> idx) const {
    Tensor<T> out({idx.size(), 1, height, width});
    auto d = out.mutable_data();
    const std::size_t n = pixels();
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t i = 0; i < n; ++i) d[b * n + i] = static_cast<T>(masks.at(idx[b] * n + i));
    return out;
  }

  std::vector<int> label_batch(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    for (std::size_t i : idx) out.push_back(labels.at(i));
    return out;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.cfg = cfg;
    d.split = split;
    d.glyph_source = glyph_source;
    d.height = height;
    d.width = width;
    const std::size_t n = pixels();
    for (std::size_t i : idx) {
      d.labels.push_back(labels.at(i));
      d.images.insert(d.images.end(), images.begin() + static_cast<std::ptrdiff_t>(i * n * 3),
                      images.begin() + static_cast<std::ptrdiff_t>((i + 1) * n * 3));
      d.masks.insert(d.masks.end(), masks.begin() + static_cast<std::ptrdiff_t>(i * n),
                     masks.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      if (!provenance.empty()) d.provenance.push_back(provenance.at(i));
    }
    return d;
  }
};

inline std::uint64_t split_seed(std::uint64_t seed, Split split) {
  return splitmix64(seed * 3 + static_cast<std::uint64_t>(split));
}

/// `n` samples with labels i mod num_classes. Sample i depends only on
/// (cfg.seed, split, i). The test split always uses p = 1.
inline Dataset generate_dataset(BiasConfig cfg, std::size_t n, Split split, const GlyphSource& glyphs = {},
                                std::size_t threads = worker_count()) {
  if (split == Split::Test) cfg.p = 1.0;
  cfg.validate();
  const TextureBank bank = TextureBank::procedural(cfg.digit_classes, cfg.background_classes);
  Dataset d;
  d.cfg = cfg;
  d.split = split;
  d.glyph_source = glyphs.name();
  d.height = d.width = cfg.canvas;
  d.labels.resize(n);
  d.images.resize(n * d.pixels() * 3);
  d.masks.resize(n * d.pixels());
  d.provenance.resize(n);
  const std::uint64_t base = split_seed(cfg.seed, split);
  parallel_for(n, [&](std::size_t i) {
    Rng rng = Rng::stream(base, i);
    const int label = static_cast<int>(i % cfg.num_classes);
    const Glyph g = glyphs.draw(label, rng);
    Sample s = render_sample(rng, g, label, cfg, bank);
    d.labels[i] = static_cast<std::uint16_t>(label);
    std::copy(s.image.pixels.begin(), s.image.pixels.end(), d.images.begin() + static_cast<std::ptrdiff_t>(i * d.pixels() * 3));
    std::copy(s.mask.begin(), s.mask.end(), d.masks.begin() + static_cast<std::ptrdiff_t>(i * d.pixels()));
    d.provenance[i] = s.provenance;
  }, threads);
  return d;
}

// ------------------------------------------------------------------ RFD1

inline constexpr std::uint32_t kRfdVersion = 1;
inline constexpr std::uint32_t kRfdHasAnnotation = 1;

namespace detail {
inline void put32(std::vector<char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}
}  // namespace detail

/// Packed container: 'RFD1', header (version, count, C, H, W, flags) as u32,
/// then per sample label u16, image H*W*3 bytes (row-major RGB), annotation
/// H*W bytes (0 or 255). Little-endian.
inline std::vector<char> encode_rfd(const Dataset& d) {
  std::vector<char> b{'R', 'F', 'D', '1'};
  detail::put32(b, kRfdVersion);
  detail::put32(b, static_cast<std::uint32_t>(d.size()));
  detail::put32(b, 3);
  detail::put32(b, static_cast<std::uint32_t>(d.height));
  detail::put32(b, static_cast<std::uint32_t>(d.width));
  detail::put32(b, kRfdHasAnnotation);
  const std::size_t n = d.pixels();
  b.reserve(b.size() + d.size() * (2 + n * 4));
  for (std::size_t i = 0; i < d.size(); ++i) {
    b.push_back(static_cast<char>(d.labels[i] & 0xff));
    b.push_back(static_cast<char>(d.labels[i] >> 8));
    b.insert(b.end(), d.images.begin() + static_cast<std::ptrdiff_t>(i * n * 3),
             d.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * n * 3));
    for (std::size_t j = 0; j < n; ++j) b.push_back(static_cast<char>(d.masks[i * n + j] ? 0xff : 0));
  }
  return b;
}

/// Fills labels, images and masks of `d` from an RFD1 byte buffer.
inline void decode_rfd(const std::vector<char>& buf, Dataset& d, const std::string& what = "rfd") {
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 28) throw FormatError(what + ": " + std::to_string(buf.size()) + " bytes, header needs 28");
  if (std::memcmp(p, "RFD1", 4) != 0) throw FormatError(what + ": bad magic");
  const std::uint32_t version = detail::get32(p + 4), count = detail::get32(p + 8), C = detail::get32(p + 12);
  const std::uint32_t H = detail::get32(p + 16), W = detail::get32(p + 20), flags = detail::get32(p + 24);
  if (version != kRfdVersion) throw FormatError(what + ": unknown version " + std::to_string(version));
  if (C != 3) throw FormatError(what + ": expected 3 channels, got " + std::to_string(C));
  const std::size_t n = std::size_t{H} * W;
  const std::size_t per = 2 + n * 3 + ((flags & kRfdHasAnnotation) ? n : 0);
  const std::size_t want = 28 + per * count;
  if (buf.size() != want)
    throw FormatError(what + ": expected " + std::to_string(want) + " bytes, got " + std::to_string(buf.size()));
  d.height = H;
  d.width = W;
  d.labels.resize(count);
  d.images.resize(count * n * 3);
  d.masks.assign(count * n, 0);
  const unsigned char* q = p + 28;
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = static_cast<std::uint16_t>(q[0] | (q[1] << 8));
    q += 2;
    std::memcpy(&d.images[i * n * 3], q, n * 3);
    q += n * 3;
    if (flags & kRfdHasAnnotation) {
      for (std::size_t j = 0; j < n; ++j) d.masks[i * n + j] = q[j] >= 128 ? 1 : 0;
      q += n;
    }
  }
}

inline nlohmann::ordered_json config_json(const BiasConfig& c) {
  return {{"p", c.p},
          {"q", c.q},
          {"digit_size", c.digit_size},
          {"canvas", c.canvas},
          {"position", to_string(c.position)},
          {"num_classes", c.num_classes},
          {"digit_classes", c.digit_classes},
          {"background_classes", c.background_classes},
          {"seed", c.seed}};
}

inline BiasConfig config_from_json(const nlohmann::json& j) {
  BiasConfig c;
  try {
    c.p = j.at("p").get<double>();
    c.q = j.at("q").get<double>();
    c.digit_size = j.at("digit_size").get<std::size_t>();
    c.canvas = j.at("canvas").get<std::size_t>();
    c.position = parse_position(j.at("position").get<std::string>());
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.digit_classes = j.at("digit_classes").get<std::size_t>();
    c.background_classes = j.at("background_classes").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return c;
}

inline nlohmann::ordered_json manifest_json(const Dataset& d) {
  nlohmann::ordered_json m;
  m["format"] = "RFD1";
  m["version"] = kRfdVersion;
  m["split"] = to_string(d.split);
  m["count"] = d.size();
  m["glyph_source"] = d.glyph_source;
  m["config"] = config_json(d.cfg);
  std::vector<std::size_t> counts(d.cfg.num_classes, 0);
  for (auto l : d.labels) ++counts.at(l);
  m["class_counts"] = counts;
  const ClassMapping cm = d.cfg.mapping();
  m["mapping"] = {{"background", cm.background}, {"digit_texture", cm.digit_texture}};
  nlohmann::ordered_json prov = nlohmann::ordered_json::array();
  for (const auto& p : d.provenance)
    prov.push_back({p.random_background, p.random_digit, p.background_class, p.digit_class, p.top, p.left,
                    p.background_seed, p.digit_seed});
  m["provenance_fields"] = {"random_background", "random_digit", "background_class", "digit_class",
                            "top",               "left",         "background_seed",  "digit_seed"};
  m["provenance"] = prov;
  return m;
}

inline const char* kRfdFile = "dataset.rfd";
inline const char* kManifestFile = "manifest.json";

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes dataset.rfd and manifest.json into `dir`. An existing manifest is a
/// collision unless `overwrite`.
inline void save_dataset(const Dataset& d, const std::filesystem::path& dir, bool overwrite = false) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / kManifestFile;
  if (!overwrite && std::filesystem::exists(manifest))
    throw IoError("dataset: manifest already exists: " + manifest.string());
  const auto bytes = encode_rfd(d);
  write_file(dir / kRfdFile, std::string(bytes.begin(), bytes.end()));
  write_file(manifest, manifest_json(d).dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  const auto mbytes = read_file(dir / kManifestFile);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mbytes.begin(), mbytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
  d.cfg = config_from_json(m.at("config"));
  d.split = parse_split(m.at("split").get<std::string>());
  d.glyph_source = m.value("glyph_source", "synthetic");
  decode_rfd(read_file(dir / kRfdFile), d, (dir / kRfdFile).string());
  if (m.at("count").get<std::size_t>() != d.size())
    throw FormatError("dataset: manifest count " + m.at("count").dump() + " but container holds " + std::to_string(d.size()));
  if (m.contains("provenance"))
    for (const auto& p : m["provenance"])
      d.provenance.push_back({p[0].get<bool>(), p[1].get<bool>(), p[2].get<std::size_t>(), p[3].get<std::size_t>(),
                              p[4].get<std::size_t>(), p[5].get<std::size_t>(), p[6].get<std::uint64_t>(),
                              p[7].get<std::uint64_t>()});
  return d;
}

}  // namespace reff::data
