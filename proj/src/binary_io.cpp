#include "mlsae/binary_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <vector>

#include "mlsae/errors.hpp"

namespace mlsae::io {
namespace {

constexpr bool kLittle = std::endian::native == std::endian::little;

template <typename U>
U byteswap(U v) {
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
  }
  return out;
}

template <typename U>
U to_le(U v) {
  if constexpr (kLittle) {
    return v;
  } else {
    return byteswap(v);
  }
}

// Bulk conversion of arrays of 4/8-byte values on big-endian hosts.
template <typename T>
void swap_in_place(std::span<T> values) {
  if constexpr (!kLittle) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (auto& v : values) v = std::bit_cast<T>(byteswap(std::bit_cast<U>(v)));
  } else {
    (void)values;
  }
}

template <typename T>
void write_array(LeWriter& w, std::span<const T> values,
                 void (LeWriter::*one)(T)) {
  if constexpr (kLittle) {
    w.bytes(std::string_view(reinterpret_cast<const char*>(values.data()),
                             values.size_bytes()));
  } else {
    for (T v : values) (w.*one)(v);
  }
}

}  // namespace

void LeWriter::raw(const void* data, std::size_t size) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out_) throw IoError("write failed after " + std::to_string(written_) + " bytes");
  written_ += size;
}

void LeWriter::magic(const Magic& m) { raw(m.data(), m.size()); }
void LeWriter::u8(std::uint8_t v) { raw(&v, 1); }
void LeWriter::u32(std::uint32_t v) {
  v = to_le(v);
  raw(&v, 4);
}
void LeWriter::u64(std::uint64_t v) {
  v = to_le(v);
  raw(&v, 8);
}
void LeWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void LeWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void LeWriter::f32s(std::span<const float> values) { write_array(*this, values, &LeWriter::f32); }
void LeWriter::f64s(std::span<const double> values) { write_array(*this, values, &LeWriter::f64); }
void LeWriter::u64s(std::span<const std::uint64_t> values) {
  write_array(*this, values, &LeWriter::u64);
}
void LeWriter::bytes(std::string_view data) { raw(data.data(), data.size()); }
void LeWriter::string(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void LeReader::raw(void* data, std::size_t size) {
  if (!try_raw(data, size)) throw FormatError(what_ + ": unexpected end of file");
}

bool LeReader::try_raw(void* data, std::size_t size) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got == size) return true;
  if (got == 0 && in_.eof()) return false;
  throw FormatError(what_ + ": truncated (wanted " + std::to_string(size) + " bytes, got " +
                    std::to_string(got) + ")");
}

bool LeReader::at_eof() {
  return in_.peek() == std::char_traits<char>::eof();
}

void LeReader::expect_magic(const Magic& m) {
  Magic got{};
  raw(got.data(), got.size());
  if (got != m) {
    throw FormatError(what_ + ": bad magic \"" + std::string(got.data(), 4) + "\", expected \"" +
                      std::string(m.data(), 4) + "\"");
  }
}

void LeReader::expect_version(std::uint32_t expected) {
  const auto v = u32();
  if (v != expected) {
    throw FormatError(what_ + ": unsupported version " + std::to_string(v));
  }
}

std::uint8_t LeReader::u8() {
  std::uint8_t v;
  raw(&v, 1);
  return v;
}
std::uint32_t LeReader::u32() {
  std::uint32_t v;
  raw(&v, 4);
  return to_le(v);
}
std::uint64_t LeReader::u64() {
  std::uint64_t v;
  raw(&v, 8);
  return to_le(v);
}
float LeReader::f32() { return std::bit_cast<float>(u32()); }
double LeReader::f64() { return std::bit_cast<double>(u64()); }

void LeReader::f32s(std::span<float> out) {
  raw(out.data(), out.size_bytes());
  swap_in_place(out);
}
void LeReader::f64s(std::span<double> out) {
  raw(out.data(), out.size_bytes());
  swap_in_place(out);
}
void LeReader::u64s(std::span<std::uint64_t> out) {
  raw(out.data(), out.size_bytes());
  swap_in_place(out);
}

std::string LeReader::string(std::uint32_t max_len) {
  const auto len = u32();
  if (len > max_len) throw FormatError(what_ + ": string length " + std::to_string(len) + " too large");
  std::string s(len, '\0');
  raw(s.data(), len);
  return s;
}

void open_for_write(std::ofstream& out, const std::filesystem::path& path) {
  out.open(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
}

void open_for_read(std::ifstream& in, const std::filesystem::path& path) {
  in.open(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
}

void commit_atomic(std::ofstream& out, const std::filesystem::path& tmp,
                   const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + tmp.string());
  out.close();
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

}  // namespace mlsae::io
