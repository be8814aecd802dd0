#include "comprer/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace comprer {

static_assert(std::endian::native == std::endian::little, "CMPR files are little-endian");

namespace {

constexpr char kMagic[4] = {'C', 'M', 'P', 'R'};

void write_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.write(buf, 4);
}

std::uint32_t read_u32(std::istream& in) {
  char buf[4];
  if (!in.read(buf, 4)) throw IoError("truncated CMPR file");
  std::uint32_t v;
  std::memcpy(&v, buf, 4);
  return v;
}

void write_header(std::ostream& out, const nlohmann::json& header) {
  const std::string text = header.dump();
  out.write(kMagic, 4);
  write_u32(out, kFormatVersion);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

nlohmann::json read_header(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a CMPR file (bad magic)");
  const std::uint32_t version = read_u32(in);
  if (version != kFormatVersion) throw IoError("unsupported CMPR version " + std::to_string(version));
  const std::uint32_t length = read_u32(in);
  std::string text(length, '\0');
  if (!in.read(text.data(), length)) throw IoError("truncated CMPR header");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed CMPR header: ") + e.what());
  }
}

void write_payload(std::ostream& out, const Array& array, DType dtype) {
  if (dtype == DType::f64) {
    out.write(reinterpret_cast<const char*>(array.data()), static_cast<std::streamsize>(array.size() * sizeof(double)));
  } else {
    const Vector<float> narrow = array.values().cast<float>();
    out.write(reinterpret_cast<const char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing CMPR payload");
}

Array read_payload(std::istream& in, Shape shape, DType dtype) {
  Array out(std::move(shape));
  if (dtype == DType::f64) {
    if (!in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(double)))) {
      throw IoError("truncated CMPR payload");
    }
  } else {
    Vector<float> narrow(static_cast<Eigen::Index>(out.size()));
    if (!in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * sizeof(float)))) {
      throw IoError("truncated CMPR payload");
    }
    out.values() = narrow.cast<double>();
  }
  return out;
}

Shape shape_from_json(const nlohmann::json& j) {
  Shape shape;
  for (const auto& d : j) shape.push_back(d.get<std::size_t>());
  return shape;
}

}  // namespace

std::string_view dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw IoError("unknown dtype '" + std::string(name) + "'");
}

void write_array(std::ostream& out, const Array& array, DType dtype) {
  write_header(out, {{"shape", array.shape()}, {"dtype", dtype_name(dtype)}});
  write_payload(out, array, dtype);
}

Array read_array(std::istream& in) {
  const nlohmann::json header = read_header(in);
  if (!header.contains("shape") || !header.contains("dtype")) throw IoError("CMPR header is not a single array");
  return read_payload(in, shape_from_json(header["shape"]), parse_dtype(header["dtype"].get<std::string>()));
}

void save_array(const std::filesystem::path& path, const Array& array, DType dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_array(out, array, dtype);
}

Array load_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_array(in);
}

bool Container::contains(std::string_view name) const {
  for (const auto& [n, a] : arrays) {
    if (n == name) return true;
  }
  return false;
}

const Array& Container::get(std::string_view name) const {
  for (const auto& [n, a] : arrays) {
    if (n == name) return a;
  }
  throw IoError("container has no array named '" + std::string(name) + "'");
}

void write_container(std::ostream& out, const Container& container) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, array] : container.arrays) {
    entries.push_back({{"name", name}, {"shape", array.shape()}, {"dtype", dtype_name(container.dtype)}});
  }
  write_header(out, {{"kind", "container"}, {"manifest", container.manifest}, {"arrays", entries}});
  for (const auto& [name, array] : container.arrays) write_payload(out, array, container.dtype);
}

Container read_container(std::istream& in) {
  const nlohmann::json header = read_header(in);
  if (header.value("kind", "") != "container") throw IoError("CMPR file is not a container");
  Container out;
  out.manifest = header["manifest"];
  for (const auto& entry : header["arrays"]) {
    const DType dtype = parse_dtype(entry["dtype"].get<std::string>());
    out.dtype = dtype;
    out.add(entry["name"].get<std::string>(), read_payload(in, shape_from_json(entry["shape"]), dtype));
  }
  return out;
}

void save_container(const std::filesystem::path& path, const Container& container) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_container(out, container);
  if (!out) throw IoError("failed writing " + path.string());
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_container(in);
}

}  // namespace comprer
