#pragma once

// Flat binary container of named double arrays: magic, entry count, then
// per entry a name, dims, and raw little-endian doubles. Bit-exact on
// round-trip, shared by model checkpoints and fitted transforms.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace w2vlab {

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NamedArray {
  std::vector<long> dims;
  std::vector<double> data;
};

class ArrayStore {
 public:
  void put(const std::string& name, std::vector<long> dims, std::vector<double> data) {
    long n = 1;
    for (long d : dims) n *= d;
    if (n != static_cast<long>(data.size()))
      throw CheckpointError("array '" + name + "' size does not match dims");
    entries_[name] = NamedArray{std::move(dims), std::move(data)};
  }

  void put_scalar(const std::string& name, double v) { put(name, {1}, {v}); }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  const NamedArray& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw CheckpointError("missing array '" + name + "'");
    return it->second;
  }

  double get_scalar(const std::string& name) const { return get(name).data.at(0); }

  const std::map<std::string, NamedArray>& entries() const { return entries_; }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
    os.write(kMagic, 8);
    write_u64(os, entries_.size());
    for (const auto& [name, arr] : entries_) {
      write_u64(os, name.size());
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u64(os, arr.dims.size());
      for (long d : arr.dims) write_u64(os, static_cast<std::uint64_t>(d));
      write_u64(os, arr.data.size());
      os.write(reinterpret_cast<const char*>(arr.data.data()),
               static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("write failed for '" + path + "'");
  }

  static ArrayStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
      throw CheckpointError("'" + path + "' is not a checkpoint file");
    ArrayStore store;
    const std::uint64_t count = read_u64(is, path);
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint64_t name_len = read_u64(is, path);
      std::string name(name_len, '\0');
      is.read(name.data(), static_cast<std::streamsize>(name_len));
      const std::uint64_t rank = read_u64(is, path);
      std::vector<long> dims(rank);
      for (auto& d : dims) d = static_cast<long>(read_u64(is, path));
      const std::uint64_t n = read_u64(is, path);
      std::vector<double> data(n);
      is.read(reinterpret_cast<char*>(data.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
      if (!is) throw CheckpointError("truncated checkpoint '" + path + "'");
      store.entries_[name] = NamedArray{std::move(dims), std::move(data)};
    }
    return store;
  }

 private:
  static constexpr const char kMagic[9] = "W2VSTORE";

  static void write_u64(std::ofstream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(buf, 8);
  }

  static std::uint64_t read_u64(std::ifstream& is, const std::string& path) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw CheckpointError("truncated checkpoint '" + path + "'");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }

  std::map<std::string, NamedArray> entries_;
};

}  // namespace w2vlab
