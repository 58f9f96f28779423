#include "geoworld/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "geoworld/error.hpp"

namespace geoworld::io {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (pos + sizeof(T) > in.size()) throw FormatError("truncated binary data");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return std::bit_cast<T>(bits);
}

std::size_t element_size(DType d) { return d == DType::F64 ? 8 : 4; }

void append_payload(std::string& out, DType dtype, std::span<const double> values) {
  out.reserve(out.size() + values.size() * element_size(dtype));
  for (double v : values) {
    switch (dtype) {
      case DType::F32: put_le(out, static_cast<float>(v)); break;
      case DType::I32: put_le(out, static_cast<std::int32_t>(v)); break;
      case DType::F64: put_le(out, v); break;
    }
  }
}

std::vector<double> parse_payload(const std::string& in, std::size_t pos, DType dtype, std::uint64_t n) {
  if (in.size() - pos != n * element_size(dtype))
    throw FormatError("payload size does not match header shape");
  std::vector<double> values(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    switch (dtype) {
      case DType::F32: values[i] = get_le<float>(in, pos); break;
      case DType::I32: values[i] = get_le<std::int32_t>(in, pos); break;
      case DType::F64: values[i] = get_le<double>(in, pos); break;
    }
  }
  return values;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void dump(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingInputError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw MissingInputError("write failed for " + path.string());
}

}  // namespace

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void write_tensor(const std::filesystem::path& path, DType dtype,
                  const std::vector<std::uint64_t>& shape, std::span<const double> values) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  if (n != values.size()) throw InvalidInputError("tensor shape does not match element count");
  std::string out = "GWT1";
  put_le(out, static_cast<std::uint32_t>(dtype));
  put_le(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_le(out, d);
  append_payload(out, dtype, values);
  dump(path, out);
}

Tensor read_tensor(const std::filesystem::path& path) {
  const std::string in = slurp(path);
  if (in.size() < 12 || in.compare(0, 4, "GWT1") != 0) throw FormatError(path.string() + ": not a GWT1 tensor");
  std::size_t pos = 4;
  Tensor t;
  const auto dt = get_le<std::uint32_t>(in, pos);
  if (dt < 1 || dt > 3) throw FormatError(path.string() + ": unknown dtype");
  t.dtype = static_cast<DType>(dt);
  const auto rank = get_le<std::uint32_t>(in, pos);
  if (rank > 8) throw FormatError(path.string() + ": implausible rank");
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(get_le<std::uint64_t>(in, pos));
  t.values = parse_payload(in, pos, t.dtype, t.numel());
  return t;
}

void write_headed(const std::filesystem::path& path, const char (&magic)[5], const nlohmann::json& header,
                  DType dtype, std::span<const double> payload) {
  std::string out(magic, 4);
  const std::string text = header.dump();
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  append_payload(out, dtype, payload);
  dump(path, out);
}

Headed read_headed(const std::filesystem::path& path, const char (&magic)[5], DType dtype) {
  const std::string in = slurp(path);
  if (in.size() < 12 || in.compare(0, 4, magic, 4) != 0)
    throw FormatError(path.string() + ": bad magic, expected " + std::string(magic, 4));
  std::size_t pos = 4;
  const auto len = get_le<std::uint64_t>(in, pos);
  if (pos + len > in.size()) throw FormatError(path.string() + ": truncated header");
  Headed h;
  try {
    h.header = nlohmann::json::parse(in.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  pos += len;
  const std::size_t n = (in.size() - pos) / element_size(dtype);
  h.payload = parse_payload(in, pos, dtype, n);
  return h;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const std::string text = slurp(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) { dump(path, j.dump(2) + "\n"); }

void write_text(const std::filesystem::path& path, const std::string& text) { dump(path, text); }

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace geoworld::io
