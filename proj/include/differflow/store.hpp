#pragma once

// Binary tensor and feature files. All integers and floats little-endian.
//
// Tensor file (.dfn):
//   "DFN1" | u32 version | u32 metadata_len | metadata (UTF-8 "key=value\n"
//   lines) | u32 tensor_count | per tensor: u32 name_len | name | u32 rank |
//   u32 dims[rank] | f32 payload[product(dims)]
//
// Feature file (.dff):
//   "DFF1" | u32 version | u32 dim | u64 record_count | per record:
//   u32 id_len | sample_id | i8 label | u32 transform_id | f32 values[dim]

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "differflow/tensor.hpp"

namespace differflow {

inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::uint32_t kFeatureFileVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct TensorFile {
  // Insertion order is preserved, including keys this library does not use.
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedTensor> tensors;

  std::optional<std::string> meta(std::string_view key) const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return v;
    }
    return std::nullopt;
  }

  std::string require_meta(std::string_view key) const {
    auto v = meta(key);
    if (!v) throw FormatError("missing metadata key '" + std::string(key) + "'");
    return *v;
  }

  void set_meta(const std::string& key, std::string value) {
    for (auto& [k, v] : metadata) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    metadata.emplace_back(key, std::move(value));
  }

  const Tensor<float>* find(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.tensor;
    }
    return nullptr;
  }

  const Tensor<float>& require(std::string_view name) const {
    const auto* t = find(name);
    if (!t) throw FormatError("missing tensor '" + std::string(name) + "'");
    return *t;
  }

  friend bool operator==(const TensorFile&, const TensorFile&) = default;
};

struct FeatureRecord {
  std::string sample_id;
  std::int8_t label = -1;  // -1 unknown, 0 normal, 1 anomalous
  std::uint32_t transform_id = 0;
  std::vector<float> values;
  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureFile {
  std::uint32_t dim = 0;
  std::vector<FeatureRecord> records;
  friend bool operator==(const FeatureFile&, const FeatureFile&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    if (s.size() > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError("string too long to encode");
    }
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) throw FormatError("truncated file: " + what);
  }
  std::uint8_t u8(const std::string& what) {
    need(1, what);
    return in_[pos_++];
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const std::string& what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{in_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const std::string& what) { return std::bit_cast<float>(u32(what)); }
  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::string str(const std::string& what) { return bytes(u32(what), what); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

inline void check_magic(ByteReader& r, std::string_view magic) {
  if (r.remaining() < 4) throw FormatError("bad magic: file shorter than header");
  const std::string m = r.bytes(4, "magic");
  if (m != magic) {
    throw FormatError("bad magic: expected '" + std::string(magic) + "'");
  }
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot create '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensors(const TensorFile& file) {
  detail::ByteWriter w;
  w.bytes("DFN1");
  w.u32(kTensorFileVersion);
  std::string meta;
  for (const auto& [k, v] : file.metadata) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos ||
        v.find('\n') != std::string::npos) {
      throw FormatError("metadata entry '" + k + "' cannot be encoded");
    }
    meta += k + "=" + v + "\n";
  }
  w.str(meta);
  w.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) {
        throw FormatError("dim overflow in tensor '" + t.name + "'");
      }
      w.u32(static_cast<std::uint32_t>(d));
    }
    for (float v : t.tensor.values()) w.f32(v);
  }
  return w.take();
}

inline TensorFile decode_tensors(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  detail::check_magic(r, "DFN1");
  const auto version = r.u32("version");
  if (version != kTensorFileVersion) {
    throw FormatError("version mismatch: file has " + std::to_string(version) +
                      ", reader supports " + std::to_string(kTensorFileVersion));
  }
  TensorFile file;
  const std::string meta = r.str("metadata");
  std::size_t start = 0;
  while (start < meta.size()) {
    const std::size_t end = meta.find('\n', start);
    const std::string line = meta.substr(start, end == std::string::npos ? end : end - start);
    start = end == std::string::npos ? meta.size() : end + 1;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed metadata line '" + line + "'");
    file.metadata.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor " + std::to_string(i);
    NamedTensor t;
    t.name = r.str(where + " name");
    const auto rank = r.u32(where + " rank");
    r.need(std::size_t{rank} * 4, where + " dims");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.u32(where + " dims");
      shape.push_back(d);
      if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / 4 / d) {
        throw FormatError("dim overflow in " + where + " ('" + t.name + "')");
      }
      n *= d;
    }
    if (n * 4 > r.remaining()) {
      throw FormatError("truncated payload in " + where + " ('" + t.name + "')");
    }
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32(where);
    t.tensor = Tensor<float>(std::move(shape), std::move(data));
    file.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after tensor data");
  return file;
}

inline void write_tensors(const std::string& path, const TensorFile& file) {
  detail::write_file(path, encode_tensors(file));
}

inline TensorFile read_tensors(const std::string& path) {
  return decode_tensors(detail::read_file(path));
}

namespace detail {

inline void check_unique(const FeatureFile& file) {
  std::set<std::pair<std::string, std::uint32_t>> seen;
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    const auto& rec = file.records[i];
    if (!seen.emplace(rec.sample_id, rec.transform_id).second) {
      throw FormatError("record " + std::to_string(i) + ": duplicate (sample '" +
                        rec.sample_id + "', transform " +
                        std::to_string(rec.transform_id) + ")");
    }
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_features(const FeatureFile& file) {
  detail::check_unique(file);
  detail::ByteWriter w;
  w.bytes("DFF1");
  w.u32(kFeatureFileVersion);
  w.u32(file.dim);
  w.u64(file.records.size());
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    const auto& rec = file.records[i];
    if (rec.values.size() != file.dim) {
      throw FormatError("record " + std::to_string(i) + " has " +
                        std::to_string(rec.values.size()) + " values, expected " +
                        std::to_string(file.dim));
    }
    if (rec.label < -1 || rec.label > 1) {
      throw FormatError("record " + std::to_string(i) + " has invalid label");
    }
    w.str(rec.sample_id);
    w.u8(static_cast<std::uint8_t>(rec.label));
    w.u32(rec.transform_id);
    for (float v : rec.values) w.f32(v);
  }
  return w.take();
}

inline FeatureFile decode_features(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  detail::check_magic(r, "DFF1");
  const auto version = r.u32("version");
  if (version != kFeatureFileVersion) {
    throw FormatError("version mismatch: file has " + std::to_string(version) +
                      ", reader supports " + std::to_string(kFeatureFileVersion));
  }
  FeatureFile file;
  file.dim = r.u32("feature dim");
  const auto count = r.u64("record count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string where = "record " + std::to_string(i);
    FeatureRecord rec;
    rec.sample_id = r.str(where);
    rec.label = static_cast<std::int8_t>(r.u8(where));
    if (rec.label < -1 || rec.label > 1) throw FormatError(where + ": invalid label");
    rec.transform_id = r.u32(where);
    if (r.remaining() < std::size_t{file.dim} * 4) {
      throw FormatError("truncated file: " + where + " has fewer than " +
                        std::to_string(file.dim) + " values");
    }
    rec.values.resize(file.dim);
    for (auto& v : rec.values) v = r.f32(where);
    file.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last record");
  detail::check_unique(file);
  return file;
}

inline void write_features(const std::string& path, const FeatureFile& file) {
  detail::write_file(path, encode_features(file));
}

inline FeatureFile read_features(const std::string& path) {
  return decode_features(detail::read_file(path));
}

}  // namespace differflow
