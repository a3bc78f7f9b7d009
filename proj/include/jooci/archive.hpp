#pragma once

// Named-tensor archive. Layout (little endian):
//   "JOOCIAR1" | u64 entry count | entries | u64 FNV-1a of everything before
// entry: u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | data
// Entries are written in name order, so equal contents give equal bytes.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "jooci/tensor.hpp"

namespace jooci {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u64 = 3 };

template <class T>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) return Dtype::f32;
  else if constexpr (std::is_same_v<T, double>) return Dtype::f64;
  else if constexpr (std::is_same_v<T, std::int32_t>) return Dtype::i32;
  else if constexpr (std::is_same_v<T, std::uint64_t>) return Dtype::u64;
  else static_assert(sizeof(T) == 0, "unsupported archive dtype");
}

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::i32: return 4;
    case Dtype::u64: return 8;
  }
  throw std::runtime_error("archive: unknown dtype");
}

inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Writes `bytes` to `path` through a temporary file and rename, so readers
// never observe a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

class Archive {
 public:
  struct Entry {
    Dtype dtype = Dtype::f32;
    Shape shape;
    std::string bytes;
  };

  template <class T>
  void put(const std::string& name, Shape shape, const std::vector<T>& values) {
    if (numel(shape) != values.size())
      throw std::invalid_argument("archive: " + name + " has " + std::to_string(values.size()) +
                                  " values for shape " + to_string(shape));
    Entry e{dtype_of<T>(), std::move(shape), std::string(values.size() * sizeof(T), '\0')};
    if (!values.empty()) std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
    entries_[name] = std::move(e);
  }

  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    put(name, t.shape(), std::vector<T>(t.data().begin(), t.data().end()));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::runtime_error("archive: missing entry " + name);
    return it->second;
  }

  template <class T>
  std::vector<T> get(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != dtype_of<T>()) throw std::runtime_error("archive: dtype mismatch for " + name);
    std::vector<T> v(e.bytes.size() / sizeof(T));
    if (!v.empty()) std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
    return v;
  }

  // Copies an entry into an existing tensor of the same shape.
  template <class T>
  void get_into(const std::string& name, Tensor<T>& t) const {
    const auto& e = entry(name);
    if (e.shape != t.shape())
      throw std::runtime_error("archive: " + name + " has shape " + to_string(e.shape) + ", expected " +
                               to_string(t.shape()));
    const auto v = get<T>(name);
    std::copy(v.begin(), v.end(), t.data().begin());
  }

  std::string serialize() const {
    std::string out("JOOCIAR1");
    auto raw = [&](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
    const std::uint64_t count = entries_.size();
    raw(&count, 8);
    for (const auto& [name, e] : entries_) {
      const auto len = static_cast<std::uint32_t>(name.size());
      raw(&len, 4);
      out += name;
      const auto dt = static_cast<std::uint8_t>(e.dtype);
      raw(&dt, 1);
      const auto rank = static_cast<std::uint32_t>(e.shape.size());
      raw(&rank, 4);
      for (auto d : e.shape) {
        const std::uint64_t d64 = d;
        raw(&d64, 8);
      }
      out += e.bytes;
    }
    const std::uint64_t h = fnv1a(out.data(), out.size());
    raw(&h, 8);
    return out;
  }

  void save(const std::filesystem::path& path) const { atomic_write(path, serialize()); }

  static Archive parse(const std::string& buf, const std::string& what = "archive") {
    if (buf.size() < 24 || buf.compare(0, 8, "JOOCIAR1") != 0) throw std::runtime_error(what + ": bad magic");
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (stored != fnv1a(buf.data(), buf.size() - 8)) throw std::runtime_error(what + ": checksum mismatch");
    std::size_t pos = 8;
    const std::size_t end = buf.size() - 8;
    auto take = [&](void* dst, std::size_t n) {
      if (pos + n > end) throw std::runtime_error(what + ": truncated");
      std::memcpy(dst, buf.data() + pos, n);
      pos += n;
    };
    Archive a;
    std::uint64_t count = 0;
    take(&count, 8);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint32_t len = 0;
      take(&len, 4);
      std::string name(len, '\0');
      take(name.data(), len);
      std::uint8_t dt = 0;
      take(&dt, 1);
      if (dt > 3) throw std::runtime_error(what + ": unknown dtype for " + name);
      std::uint32_t rank = 0;
      take(&rank, 4);
      Entry e;
      e.dtype = static_cast<Dtype>(dt);
      for (std::uint32_t r = 0; r < rank; ++r) {
        std::uint64_t d = 0;
        take(&d, 8);
        e.shape.push_back(static_cast<std::size_t>(d));
      }
      e.bytes.resize(numel(e.shape) * dtype_size(e.dtype));
      take(e.bytes.data(), e.bytes.size());
      a.entries_[name] = std::move(e);
    }
    if (pos != end) throw std::runtime_error(what + ": trailing bytes");
    return a;
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(buf, path.string());
  }

 private:
  std::map<std::string, Entry> entries_;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  atomic_write(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace jooci
