#pragma once

// On-disk containers.
//
// Tensor file (.gwt):
//   bytes 0..3   magic "GWT1"
//   u32          dtype (1 = f32, 2 = i32, 3 = f64)
//   u32          rank
//   u64 x rank   shape, outermost first
//   payload      row-major elements
// Every integer and element is little-endian regardless of host.
//
// Headed blob (feature files, checkpoints):
//   bytes 0..3   4-byte magic
//   u64          JSON header length in bytes
//   JSON         UTF-8 header
//   payload      raw little-endian elements described by the header

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace geoworld::io {

enum class DType : std::uint32_t { F32 = 1, I32 = 2, F64 = 3 };

struct Tensor {
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;  // widened copy of the payload

  std::uint64_t numel() const;
};

void write_tensor(const std::filesystem::path& path, DType dtype,
                  const std::vector<std::uint64_t>& shape, std::span<const double> values);
Tensor read_tensor(const std::filesystem::path& path);

void write_headed(const std::filesystem::path& path, const char (&magic)[5],
                  const nlohmann::json& header, DType dtype, std::span<const double> payload);

struct Headed {
  nlohmann::json header;
  std::vector<double> payload;
};
/// Reads a headed blob whose payload holds `dtype` elements.
Headed read_headed(const std::filesystem::path& path, const char (&magic)[5], DType dtype);

nlohmann::json read_json(const std::filesystem::path& path);
/// Writes `j.dump(2)` plus a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
void write_text(const std::filesystem::path& path, const std::string& text);

/// %.17g formatting, shortest-exact for CSV output.
std::string format_double(double x);

}  // namespace geoworld::io
