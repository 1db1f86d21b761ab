#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "reff/error.hpp"
#include "reff/nn/layers.hpp"
#include "reff/nn/optim.hpp"
#include "reff/tensor.hpp"

namespace reff::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

inline std::size_t dtype_size(DType t) { return t == DType::F64 ? 8 : t == DType::F32 ? 4 : 1; }

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else return DType::U8;
}

struct Record {
  DType dtype = DType::F32;
  std::vector<std::uint64_t> dims;
  std::vector<char> bytes;
};

inline constexpr std::uint32_t kRfcVersion = 1;
inline constexpr const char* kMetaRecord = "meta";

/// Named tensor records plus a JSON metadata record.
///
/// Layout: "RFC1", u32 version, u32 record count, then per record u32 name
/// length, name, u8 dtype, u32 rank, u64 dims, raw data; u32 CRC32 of every
/// preceding byte. All integers little-endian.
class Checkpoint {
 public:
  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    Record r;
    r.dtype = dtype_of<T>();
    r.dims.assign(t.shape().begin(), t.shape().end());
    const auto d = t.data();
    r.bytes.resize(d.size() * sizeof(T));
    if (!d.empty()) std::memcpy(r.bytes.data(), d.data(), r.bytes.size());
    records_[name] = std::move(r);
  }

  template <class T>
  Tensor<T> get(const std::string& name) const {
    const Record& r = record(name);
    if (r.dtype != dtype_of<T>())
      throw FormatError("checkpoint: record '" + name + "' has dtype " + std::to_string(int(r.dtype)) + ", expected " +
                        std::to_string(int(dtype_of<T>())));
    Shape shape(r.dims.begin(), r.dims.end());
    Tensor<T> t(shape);
    if (r.bytes.size() != t.size() * sizeof(T)) throw FormatError("checkpoint: record '" + name + "' size mismatch");
    if (!r.bytes.empty()) std::memcpy(t.mutable_data().data(), r.bytes.data(), r.bytes.size());
    return t;
  }

  const Record& record(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw FormatError("checkpoint: missing record '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return records_.count(name) != 0; }
  const std::map<std::string, Record>& records() const { return records_; }

  void set_meta(const nlohmann::json& j) {
    const std::string s = j.dump();
    Record r;
    r.dtype = DType::U8;
    r.dims = {s.size()};
    r.bytes.assign(s.begin(), s.end());
    records_[kMetaRecord] = std::move(r);
  }
  nlohmann::json meta() const {
    if (!has(kMetaRecord)) return nlohmann::json::object();
    const auto& b = record(kMetaRecord).bytes;
    try {
      return nlohmann::json::parse(b.begin(), b.end());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
    }
  }

  std::vector<char> encode() const {
    std::vector<char> b{'R', 'F', 'C', '1'};
    put_u32(b, kRfcVersion);
    put_u32(b, static_cast<std::uint32_t>(records_.size()));
    for (const auto& [name, r] : records_) {
      put_u32(b, static_cast<std::uint32_t>(name.size()));
      b.insert(b.end(), name.begin(), name.end());
      b.push_back(static_cast<char>(r.dtype));
      put_u32(b, static_cast<std::uint32_t>(r.dims.size()));
      for (auto d : r.dims) {
        put_u32(b, static_cast<std::uint32_t>(d & 0xffffffffu));
        put_u32(b, static_cast<std::uint32_t>(d >> 32));
      }
      b.insert(b.end(), r.bytes.begin(), r.bytes.end());
    }
    put_u32(b, crc(b.data(), b.size()));
    return b;
  }

  static Checkpoint decode(const std::vector<char>& buf, const std::string& what = "checkpoint") {
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (buf.size() < 16) throw FormatError(what + ": truncated (" + std::to_string(buf.size()) + " bytes)");
    if (std::memcmp(p, "RFC1", 4) != 0) throw FormatError(what + ": bad magic");
    const std::size_t body = buf.size() - 4;
    if (get_u32(p + body) != crc(buf.data(), body)) throw FormatError(what + ": CRC mismatch (truncated or corrupt)");
    const std::uint32_t version = get_u32(p + 4);
    if (version != kRfcVersion) throw FormatError(what + ": unknown version " + std::to_string(version));
    const std::uint32_t count = get_u32(p + 8);
    std::size_t off = 12;
    auto need = [&](std::size_t n) {
      if (n > body || off > body - n) throw FormatError(what + ": record table overruns file");
    };
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      need(4);
      const std::uint32_t len = get_u32(p + off);
      off += 4;
      need(len);
      std::string name(buf.data() + off, len);
      off += len;
      need(5);
      Record r;
      if (p[off] > 2) throw FormatError(what + ": record '" + name + "' has unknown dtype " + std::to_string(p[off]));
      r.dtype = static_cast<DType>(p[off]);
      const std::uint32_t rank = get_u32(p + off + 1);
      off += 5;
      if (rank > 8) throw FormatError(what + ": record '" + name + "' has rank " + std::to_string(rank));
      need(std::size_t{rank} * 8);
      std::size_t n = 1;
      for (std::uint32_t k = 0; k < rank; ++k) {
        const std::uint64_t d = get_u32(p + off) | (std::uint64_t{get_u32(p + off + 4)} << 32);
        off += 8;
        if (d != 0 && n > (std::size_t{1} << 40) / d) throw FormatError(what + ": record '" + name + "' too large");
        n *= d;
        r.dims.push_back(d);
      }
      const std::size_t bytes = n * dtype_size(r.dtype);
      need(bytes);
      r.bytes.assign(buf.data() + off, buf.data() + off + bytes);
      off += bytes;
      ck.records_[name] = std::move(r);
    }
    if (off != body) throw FormatError(what + ": " + std::to_string(body - off) + " trailing bytes");
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    const auto b = encode();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!out) throw IoError("short write to " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(b, path.string());
  }

 private:
  static void put_u32(std::vector<char>& b, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) b.push_back(static_cast<char>((v >> s) & 0xff));
  }
  static std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
  }
  static std::uint32_t crc(const char* data, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
  }

  std::map<std::string, Record> records_;
};

/// Stores parameters as "<prefix>/<name>".
template <class T>
void put_parameters(Checkpoint& ck, const std::string& prefix, const std::vector<nn::ParamRef<T>>& params) {
  for (const auto& p : params) ck.put(prefix + "/" + p.name, *p.value);
}

/// Loads every parameter; a missing record or a shape change is an error.
template <class T>
void get_parameters(const Checkpoint& ck, const std::string& prefix, std::vector<nn::ParamRef<T>>& params) {
  for (auto& p : params) {
    Tensor<T> t = ck.get<T>(prefix + "/" + p.name);
    if (t.shape() != p.value->shape())
      throw FormatError("checkpoint: record '" + prefix + "/" + p.name + "' has shape " + to_string(t.shape()) +
                        ", expected " + to_string(p.value->shape()));
    *p.value = std::move(t);
  }
}

template <class T>
void put_optimizer(Checkpoint& ck, const std::string& prefix, nn::Optimizer<T>& opt) {
  for (std::size_t i = 0; i < opt.state_a().size(); ++i) ck.put(prefix + "/a" + std::to_string(i), opt.state_a()[i]);
  for (std::size_t i = 0; i < opt.state_b().size(); ++i) ck.put(prefix + "/b" + std::to_string(i), opt.state_b()[i]);
  ck.put(prefix + "/steps", Tensor<double>({1}, {static_cast<double>(opt.steps())}));
}

template <class T>
void get_optimizer(const Checkpoint& ck, const std::string& prefix, nn::Optimizer<T>& opt) {
  std::vector<Tensor<T>> a, b;
  for (std::size_t i = 0; ck.has(prefix + "/a" + std::to_string(i)); ++i) a.push_back(ck.get<T>(prefix + "/a" + std::to_string(i)));
  for (std::size_t i = 0; ck.has(prefix + "/b" + std::to_string(i)); ++i) b.push_back(ck.get<T>(prefix + "/b" + std::to_string(i)));
  const auto steps = static_cast<std::uint64_t>(ck.get<double>(prefix + "/steps").item());
  opt.restore(steps, std::move(a), std::move(b));
}

}  // namespace reff::io
