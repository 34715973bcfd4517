#pragma once

// Little-endian primitive encoding shared by every on-disk format
// (MLSA, MLST, MLTW, MLSC, MLLN, MLAN).

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>

namespace mlsae::io {

using Magic = std::array<char, 4>;

class LeWriter {
 public:
  explicit LeWriter(std::ostream& out) : out_(out) {}

  void magic(const Magic& m);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void f32s(std::span<const float> values);
  void f64s(std::span<const double> values);
  void u64s(std::span<const std::uint64_t> values);
  void bytes(std::string_view data);
  /// u32 length followed by the raw bytes.
  void string(std::string_view s);

  std::uint64_t bytes_written() const { return written_; }

 private:
  void raw(const void* data, std::size_t size);

  std::ostream& out_;
  std::uint64_t written_ = 0;
};

class LeReader {
 public:
  /// `what` names the file kind in error messages.
  LeReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  void expect_magic(const Magic& m);
  /// Reads a u32 version and throws unless it equals `expected`.
  void expect_version(std::uint32_t expected);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  void f32s(std::span<float> out);
  void f64s(std::span<double> out);
  void u64s(std::span<std::uint64_t> out);
  std::string string(std::uint32_t max_len = 1u << 20);

  /// True when the stream is positioned at end of file.
  bool at_eof();
  /// Reads exactly `size` bytes; returns false only if zero bytes were
  /// available (clean EOF). A partial read throws FormatError.
  bool try_raw(void* data, std::size_t size);

  const std::string& what() const { return what_; }

 private:
  void raw(void* data, std::size_t size);

  std::istream& in_;
  std::string what_;
};

/// Writes `write_fn(out)` to `path` via a temporary file and an atomic rename.
template <typename WriteFn>
void write_file_atomic(const std::filesystem::path& path, WriteFn&& write_fn);

void open_for_write(std::ofstream& out, const std::filesystem::path& path);
void open_for_read(std::ifstream& in, const std::filesystem::path& path);
void commit_atomic(std::ofstream& out, const std::filesystem::path& tmp,
                   const std::filesystem::path& path);

}  // namespace mlsae::io

#include <fstream>

namespace mlsae::io {

template <typename WriteFn>
void write_file_atomic(const std::filesystem::path& path, WriteFn&& write_fn) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  std::ofstream out;
  open_for_write(out, tmp);
  write_fn(out);
  commit_atomic(out, tmp, path);
}

}  // namespace mlsae::io
