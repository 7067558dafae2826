#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulm {

/// Little-endian binary writer over an owned byte buffer. The host is
/// little-endian on every supported target; raw writes keep formats bit-exact.
class BinaryWriter {
 public:
  template <typename T>
  void write(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void write_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }

  void write_magic(const char magic[4]) { write_bytes(magic, 4); }

  const std::vector<char>& bytes() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
  }

 private:
  std::vector<char> buf_;
};

/// Bounds-checked little-endian reader; short reads throw with the message
/// supplied by the caller so format-specific errors surface verbatim.
class BinaryReader {
 public:
  BinaryReader(std::vector<char> bytes, std::string corrupt_message)
      : buf_(std::move(bytes)), err_(std::move(corrupt_message)) {}

  template <typename T>
  T read() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos_ + sizeof(T) > buf_.size()) throw std::runtime_error(err_);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void read_bytes(void* out, std::size_t n) {
    if (pos_ + n > buf_.size()) throw std::runtime_error(err_);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }

  void expect_magic(const char magic[4]) {
    char m[4];
    read_bytes(m, 4);
    if (std::memcmp(m, magic, 4) != 0) throw std::runtime_error(err_);
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<char> buf_;
  std::string err_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  in.seekg(0, std::ios::end);
  const auto n = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<std::size_t>(n));
  in.read(buf.data(), n);
  if (!in) throw std::runtime_error("read failed: " + path);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace ulm
