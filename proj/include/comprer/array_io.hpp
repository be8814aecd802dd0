#pragma once

// Binary container shared by every on-disk artifact:
//
//   bytes 0..3   magic "CMPR"
//   bytes 4..7   format version, u32 little-endian
//   bytes 8..11  JSON header length in bytes, u32 little-endian
//   header       UTF-8 JSON
//   payload      raw little-endian IEEE-754 values, row-major
//
// A single-array file has header {"shape": [...], "dtype": "f32"|"f64"}.
// A container file has header {"kind": "container", "manifest": {...},
// "arrays": [{"name", "shape", "dtype"}, ...]} and the payloads of the listed
// arrays concatenated in order.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "comprer/array.hpp"

namespace comprer {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType { f32, f64 };

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);

void write_array(std::ostream& out, const Array& array, DType dtype = DType::f64);
Array read_array(std::istream& in);

void save_array(const std::filesystem::path& path, const Array& array, DType dtype = DType::f64);
Array load_array(const std::filesystem::path& path);

struct Container {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, Array>> arrays;
  DType dtype = DType::f64;

  void add(std::string name, Array array) { arrays.emplace_back(std::move(name), std::move(array)); }
  bool contains(std::string_view name) const;
  /// Throws IoError when absent.
  const Array& get(std::string_view name) const;
};

void write_container(std::ostream& out, const Container& container);
Container read_container(std::istream& in);

void save_container(const std::filesystem::path& path, const Container& container);
Container load_container(const std::filesystem::path& path);

}  // namespace comprer
