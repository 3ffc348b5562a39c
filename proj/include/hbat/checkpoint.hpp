#pragma once

#include <filesystem>
#include <string>

#include "hbat/model.hpp"

namespace hbat {

enum class DType { kF32, kF64 };

inline constexpr int kCheckpointFormatVersion = 1;

/// Container layout:
///   "HBATCKPT" | u64 LE manifest length | manifest JSON | payload
/// The manifest lists format_version, dtype, model kind and config, and for
/// every unit its name, shape, byte offset and byte length within the payload.
/// Payload scalars are little-endian and row-major.
std::string encode_checkpoint(const ParameterSet& params, DType dtype = DType::kF64);
ParameterSet decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     DType dtype = DType::kF64);
ParameterSet load_checkpoint(const std::filesystem::path& path);

/// Fixed-width little-endian helpers shared with the ledger container.
void append_le_u64(std::string& out, std::uint64_t v);
std::uint64_t read_le_u64(const std::string& bytes, std::size_t offset);
void append_le_f64(std::string& out, double v);
double read_le_f64(const std::string& bytes, std::size_t offset);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace hbat
