#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lapo/errors.hpp"

namespace lapo {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

// Thin binary writer/reader with byte-offset tracking so parse errors can
// name the offending position.

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : path_(path), f_(path, std::ios::binary) {
    if (!f_) throw IoError("cannot open for write: " + path);
  }

  void magic(const char (&m)[9]) { f_.write(m, 8); }
  void u8(uint8_t v) { f_.write(reinterpret_cast<const char*>(&v), 1); }
  void u32(uint32_t v) { f_.write(reinterpret_cast<const char*>(&v), 4); }
  void f32(float v) { f_.write(reinterpret_cast<const char*>(&v), 4); }
  void f32s(const float* p, size_t n) {
    f_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    f_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void close() {
    f_.close();
    if (!f_) throw IoError("write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream f_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    buf_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }

  void expect_magic(const char (&m)[9]) {
    if (buf_.size() < 8 || std::memcmp(buf_.data(), m, 8) != 0)
      fail_("bad magic, expected " + std::string(m, 8));
    pos_ = 8;
  }

  uint8_t u8() {
    need_(1);
    return static_cast<uint8_t>(buf_[pos_++]);
  }
  uint32_t u32() {
    need_(4);
    uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  float f32() {
    need_(4);
    float v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  void f32s(float* p, size_t n) {
    need_(n * 4);
    std::memcpy(p, buf_.data() + pos_, n * 4);
    pos_ += n * 4;
  }
  std::string str() {
    const uint32_t n = u32();
    need_(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  size_t offset() const { return pos_; }
  size_t remaining() const { return buf_.size() - pos_; }

  void expect_eof() const {
    if (pos_ != buf_.size()) fail_("trailing bytes");
  }

 private:
  void need_(size_t n) const {
    if (pos_ + n > buf_.size()) fail_("unexpected end of file");
  }
  [[noreturn]] void fail_(const std::string& what) const {
    throw ParseError(path_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

  std::string path_;
  std::vector<char> buf_;
  size_t pos_ = 0;
};

}  // namespace lapo
