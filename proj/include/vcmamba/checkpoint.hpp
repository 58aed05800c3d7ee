#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "vcmamba/config.hpp"
#include "vcmamba/model.hpp"

// File layout, all integers little-endian:
//
//   "VCMB" | u32 version | u32 spec_len | spec text (config grammar)
//   u32 tensor_count
//   per tensor: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | data
//   u64 FNV-1a checksum over every preceding byte
//
// dtype: 0 = f32, 1 = f64.

namespace vcm {

inline constexpr char kCheckpointMagic[4] = {'V', 'C', 'M', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(raw, raw + sizeof(U));
    }
    bytes_.insert(bytes_.end(), raw, raw + sizeof(U));
  }

  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, data_ + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(raw, raw + sizeof(U));
    }
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }

  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > size_ - pos_) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

template <typename T>
std::vector<NamedTensor<T>> checkpoint_entries(const Model<T>& model) {
  auto set = model.parameters();
  auto entries = std::move(set.params);
  entries.insert(entries.end(), set.buffers.begin(), set.buffers.end());
  return entries;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const Model<T>& model) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(spec_to_text(model.spec()));
  const auto entries = detail::checkpoint_entries(model);
  w.put(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put_string(e.name);
    w.put(static_cast<std::uint8_t>(dtype_of<T>()));
    w.put(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    for (T v : e.tensor.values()) w.put(v);
  }
  auto& bytes = w.bytes();
  w.put(fnv1a64(bytes.data(), bytes.size()));
  return std::move(bytes);
}

// Verifies the whole byte stream before touching a model, so a corrupt
// file never yields a partially loaded one.
template <typename T>
Model<T> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  if (bytes.size() < 4 + 4 + 8) {
    throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) +
                      " bytes");
  }
  detail::ByteReader header(bytes.data() + 4, bytes.size() - 4);
  const auto version = header.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 8;
  detail::ByteReader tail(bytes.data() + body, 8);
  const auto stored = tail.get<std::uint64_t>("checksum");
  if (stored != fnv1a64(bytes.data(), body)) {
    throw FormatError("checkpoint checksum mismatch (file truncated or corrupted)");
  }

  detail::ByteReader r(bytes.data() + 8, body - 8);
  ModelSpec spec;
  try {
    spec = spec_from_text(r.get_string("model spec"));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint model spec invalid: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::map<std::string, std::pair<Shape, std::vector<T>>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string("tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) {
      throw FormatError("tensor '" + name + "': unknown dtype tag " +
                        std::to_string(dtype));
    }
    if (static_cast<DType>(dtype) != dtype_of<T>()) {
      throw FormatError("tensor '" + name + "' stored as " +
                        (dtype == 0 ? "f32" : "f64") +
                        " but the requested model type differs");
    }
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("dims"));
    if (shape_numel(shape) > r.remaining() / sizeof(T)) {
      throw FormatError("tensor '" + name + "' shape " + shape_str(shape) +
                        " exceeds the remaining file size");
    }
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = r.get<T>("tensor data");
    if (!table.emplace(name, std::make_pair(std::move(shape), std::move(values)))
             .second) {
      throw FormatError("duplicate tensor '" + name + "' in checkpoint");
    }
  }
  if (r.remaining() != 0) {
    throw FormatError("checkpoint has " + std::to_string(r.remaining()) +
                      " trailing bytes");
  }

  Model<T> model = Model<T>::build(spec, 0);
  const auto entries = detail::checkpoint_entries(model);
  if (entries.size() != table.size()) {
    throw FormatError("checkpoint holds " + std::to_string(table.size()) +
                      " tensors but the model expects " +
                      std::to_string(entries.size()));
  }
  for (const auto& e : entries) {
    auto it = table.find(e.name);
    if (it == table.end()) throw FormatError("checkpoint lacks tensor '" + e.name + "'");
    if (it->second.first != e.tensor.shape()) {
      throw FormatError("tensor '" + e.name + "' has shape " +
                        shape_str(it->second.first) + ", model expects " +
                        shape_str(e.tensor.shape()));
    }
  }
  for (auto e : entries) {
    const auto& src = table.at(e.name).second;
    std::copy(src.begin(), src.end(), e.tensor.values().begin());
  }
  return model;
}

// Writes to a sibling temp file and renames, so an interrupted save never
// clobbers the previous checkpoint.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file_bytes(path));
}

}  // namespace vcm
