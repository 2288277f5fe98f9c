#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "modex/model.hpp"

namespace modex {

// Binary layout, all integers little-endian:
//   "MODEX1"
//   u32 line_count, then per line: u32 byte_length, UTF-8 "key=value"
//   u32 tensor_count, then per tensor:
//     u32 name_length, name, u32 rank, u64 dims[rank],
//     u64 payload_bytes, payload as IEEE-754 binary64
inline constexpr char kCheckpointMagic[] = "MODEX1";

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { little(v); }
  void u64(std::uint64_t v) { little(v); }
  void f64(double v) { little(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return out_; }

 private:
  template <class U>
  void little(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}

  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw IoError("checkpoint truncated at byte " + std::to_string(data_.size()));
    }
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() { return little<std::uint32_t>(); }
  std::uint64_t u64() { return little<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(little<std::uint64_t>()); }
  std::string str() { return raw(u32()); }
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  template <class U>
  U little() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Header lines: every model config key, `config_hash`, then `extra` pairs.
template <class T>
std::string serialize_checkpoint(const BasicModel<T>& model, const KeyValues& extra = {}) {
  KeyValues header = model.config().to_key_values();
  header.set("config_hash", model.config().hash());
  header.merge(extra);

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 6);
  w.u32(static_cast<std::uint32_t>(header.pairs().size()));
  for (const auto& [k, v] : header.pairs()) w.str(k + "=" + v);
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& e : model.params()) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.u64(d);
    w.u64(e.value.size() * sizeof(double));
    for (std::size_t i = 0; i < e.value.size(); ++i) w.f64(static_cast<double>(e.value[i]));
  }
  return w.buffer();
}

struct CheckpointHeader {
  ModelConfig config;
  KeyValues lines;
  std::string stored_hash;
};

template <class T>
BasicModel<T> deserialize_checkpoint(const std::string& bytes, CheckpointHeader* header_out = nullptr) {
  detail::ByteReader r(bytes);
  if (r.raw(6) != std::string(kCheckpointMagic, 6)) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  CheckpointHeader header;
  const std::uint32_t lines = r.u32();
  for (std::uint32_t i = 0; i < lines; ++i) {
    const std::string line = r.str();
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed checkpoint header line: " + line);
    header.lines.set(line.substr(0, eq), line.substr(eq + 1));
  }
  header.config = ModelConfig::from_key_values(header.lines);
  header.stored_hash = header.lines.get_or("config_hash", "");
  if (header.stored_hash != header.config.hash()) {
    throw IoError("checkpoint config hash " + header.stored_hash +
                  " does not match its own config (" + header.config.hash() + ")");
  }

  BasicModel<T> model(header.config);
  const std::uint32_t count = r.u32();
  if (count != model.params().size()) {
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                  std::to_string(model.params().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    auto& entry = model.params()[i];
    if (entry.name != name) {
      throw IoError("checkpoint tensor '" + name + "' where '" + entry.name + "' was expected");
    }
    Shape shape(r.u32());
    for (std::size_t& d : shape) d = r.u64();
    if (shape != entry.value.shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_string(shape) +
                    ", expected " + shape_string(entry.value.shape()));
    }
    const std::uint64_t payload = r.u64();
    if (payload != entry.value.size() * sizeof(double)) {
      throw IoError("checkpoint tensor '" + name + "' has a bad payload length");
    }
    r.need(payload);
    for (std::size_t k = 0; k < entry.value.size(); ++k) entry.value[k] = static_cast<T>(r.f64());
  }
  if (!r.at_end()) throw IoError("trailing bytes after checkpoint payload");
  if (header_out) *header_out = std::move(header);
  return model;
}

template <class T>
void save_checkpoint(const std::string& path, const BasicModel<T>& model, const KeyValues& extra = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const std::string bytes = serialize_checkpoint(model, extra);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

template <class T = double>
BasicModel<T> load_checkpoint(const std::string& path, CheckpointHeader* header = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint<T>(ss.str(), header);
}

}  // namespace modex
