#pragma once

// .rpwt weight files. All integers little-endian.
//
//   magic          4 bytes  "RPWT"
//   version        u32      (1)
//   config_len     u64
//   config_json    config_len bytes, UTF-8 model config
//   tensor_count   u64
//   per tensor:
//     name_len     u32
//     name         name_len bytes, UTF-8
//     dtype        u8       0 = f32, 1 = f64, 2 = u8 (batch-norm frozen flags)
//     rank         u32
//     dims         rank x u64
//     payload      product(dims) elements, little-endian
//
// Rank-0 tensors hold one element (norm eps values, frozen flags).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "repavit/config.hpp"
#include "repavit/model.hpp"

namespace repavit {

inline constexpr char kWeightMagic[4] = {'R', 'P', 'W', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;
inline constexpr std::uint8_t kFlagDtypeTag = 2;

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    buf_.insert(buf_.end(), b, b + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class U>
  void put_array(std::span<const U> v) {
    if constexpr (std::endian::native == std::endian::little) put_bytes(v.data(), v.size_bytes());
    else
      for (U x : v) put(x);
  }
  const std::vector<unsigned char>& bytes() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data) : data_(std::move(data)) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    unsigned char b[sizeof(U)];
    std::memcpy(b, data_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <class U>
  void get_array(std::span<U> out, const char* what) {
    need(out.size_bytes(), what);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (U& x : out) x = get<U>(what);
    }
  }
  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  std::uint64_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > data_.size() - pos_)
      throw CorruptionError(std::string("weight file truncated while reading ") + what, pos_);
  }
  std::vector<unsigned char> data_;
  std::uint64_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct FileHeader {
  ModelConfig config;
  std::uint64_t tensor_count = 0;
};

inline FileHeader read_header(ByteReader& r) {
  const std::string magic = r.get_string(4, "magic");
  if (magic != std::string(kWeightMagic, 4)) throw FormatError("not a weight file: bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightVersion)
    throw VersionError("unsupported weight file version " + std::to_string(version) + " (expected " +
                       std::to_string(kWeightVersion) + ")");
  const auto len = r.get<std::uint64_t>("config length");
  const std::uint64_t at = r.offset();
  const std::string text = r.get_string(static_cast<std::size_t>(std::min<std::uint64_t>(len, r.remaining() + 1)), "config");
  FileHeader h;
  try {
    h.config = config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("config JSON unreadable: ") + e.what(), at);
  }
  h.tensor_count = r.get<std::uint64_t>("tensor count");
  return h;
}

struct RawTensor {
  std::uint8_t dtype = 0;
  std::vector<std::uint64_t> dims;
  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline RawTensor read_tensor_header(ByteReader& r, std::string& name) {
  const auto name_len = r.get<std::uint32_t>("tensor name length");
  name = r.get_string(name_len, "tensor name");
  RawTensor t;
  t.dtype = r.get<std::uint8_t>("tensor dtype");
  if (t.dtype > kFlagDtypeTag)
    throw CorruptionError("tensor '" + name + "' has unknown dtype tag " + std::to_string(t.dtype), r.offset() - 1);
  const auto rank = r.get<std::uint32_t>("tensor rank");
  if (rank > 8) throw CorruptionError("tensor '" + name + "' has implausible rank " + std::to_string(rank), r.offset() - 4);
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(r.get<std::uint64_t>("tensor dims"));
  return t;
}

}  // namespace detail

/// Writes the model to `path`. The file is assembled in memory and written
/// in one pass.
template <Real T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.put_bytes(kWeightMagic, 4);
  w.put<std::uint32_t>(kWeightVersion);
  const std::string cfg = to_json(model.config).dump();
  w.put<std::uint64_t>(cfg.size());
  w.put_bytes(cfg.data(), cfg.size());

  std::uint64_t count = 0;
  visit_tensors(
      model, [&](const auto&) { ++count; }, [&](const std::string&, const bool&) { ++count; });
  w.put<std::uint64_t>(count);

  auto header = [&](const std::string& name, std::uint8_t tag, const std::vector<std::uint64_t>& dims) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(tag);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) w.put<std::uint64_t>(d);
  };
  visit_tensors(
      model,
      [&](const auto& t) {
        header(t.name, static_cast<std::uint8_t>(dtype_of<T>()), t.dims);
        w.put_array<T>(t.data);
      },
      [&](const std::string& name, const bool& flag) {
        header(name, kFlagDtypeTag, {});
        w.put<std::uint8_t>(flag ? 1 : 0);
      });

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

/// Config and element dtype stored in a weight file, without loading weights.
struct WeightFileInfo {
  ModelConfig config;
  DType dtype = DType::f32;
  std::uint64_t tensor_count = 0;
};

inline WeightFileInfo inspect_weight_file(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path));
  const detail::FileHeader h = detail::read_header(r);
  WeightFileInfo info{h.config, DType::f32, h.tensor_count};
  for (std::uint64_t i = 0; i < h.tensor_count; ++i) {
    std::string name;
    const detail::RawTensor t = detail::read_tensor_header(r, name);
    if (t.dtype != kFlagDtypeTag) {
      info.dtype = static_cast<DType>(t.dtype);
      return info;
    }
    r.get_string(static_cast<std::size_t>(t.count()), "flag payload");
  }
  return info;
}

/// Reads a model of element type T. Throws FormatError (bad magic, dtype or
/// layout mismatch), VersionError, or CorruptionError (truncated or malformed
/// data, with byte offset). Nothing is returned unless every tensor loaded.
template <Real T>
Model<T> load_model(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path));
  const detail::FileHeader h = detail::read_header(r);
  Model<T> model = allocate_model<T>(h.config);

  struct Slot {
    std::span<T> data;
    std::vector<std::uint64_t> dims;
    bool* flag = nullptr;
    bool seen = false;
  };
  std::map<std::string, Slot> slots;
  visit_tensors(
      model, [&](const auto& t) { slots[t.name] = Slot{t.data, t.dims}; },
      [&](const std::string& name, bool& flag) { slots[name] = Slot{{}, {}, &flag}; });

  for (std::uint64_t i = 0; i < h.tensor_count; ++i) {
    std::string name;
    const std::uint64_t at = r.offset();
    const detail::RawTensor t = detail::read_tensor_header(r, name);
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unexpected tensor '" + name + "' for this model config");
    Slot& s = it->second;
    if (s.seen) throw CorruptionError("duplicate tensor '" + name + "'", at);
    s.seen = true;
    if (s.flag) {
      if (t.dtype != kFlagDtypeTag || !t.dims.empty()) throw FormatError("tensor '" + name + "' must be a u8 flag");
      *s.flag = r.get<std::uint8_t>("flag payload") != 0;
      continue;
    }
    if (t.dtype != static_cast<std::uint8_t>(dtype_of<T>()))
      throw FormatError("tensor '" + name + "' has dtype tag " + std::to_string(t.dtype) + ", expected " +
                        dtype_name(dtype_of<T>()));
    if (t.dims != s.dims) throw FormatError("tensor '" + name + "' shape does not match the model config");
    r.get_array<T>(s.data, "tensor payload");
  }
  for (const auto& [name, s] : slots)
    if (!s.seen) throw FormatError("weight file is missing tensor '" + name + "'");
  if (!r.at_end()) throw CorruptionError("trailing bytes after last tensor", r.offset());

  // Infer forms carry their active width in tensor shapes; train forms in config.
  for (auto& b : model.blocks)
    if (auto* f = std::get_if<IdleFfnTrain<T>>(&b.ffn)) f->active = h.config.active_dim();
  return model;
}

using AnyModel = std::variant<Model<float>, Model<double>>;

inline AnyModel load_any_model(const std::filesystem::path& path) {
  if (inspect_weight_file(path).dtype == DType::f64) return load_model<double>(path);
  return load_model<float>(path);
}

}  // namespace repavit
