#include "hbat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace hbat {

namespace {

constexpr char kMagic[] = "HBATCKPT";
constexpr std::size_t kMagicLen = 8;

using json = nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},     {"d_model", c.d_model}, {"layers", c.layers},
          {"heads", c.heads},     {"context", c.context}, {"d_ff", c.d_ff}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab = j.at("vocab").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  return c;
}

void append_le_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t read_le_u32(const std::string& bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

}  // namespace

void append_le_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_le_u64(const std::string& bytes, std::size_t offset) {
  if (offset + 8 > bytes.size()) throw std::runtime_error("truncated container");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

void append_le_f64(std::string& out, double v) {
  append_le_u64(out, std::bit_cast<std::uint64_t>(v));
}

double read_le_f64(const std::string& bytes, std::size_t offset) {
  return std::bit_cast<double>(read_le_u64(bytes, offset));
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

std::string encode_checkpoint(const ParameterSet& params, DType dtype) {
  const std::size_t width = dtype == DType::kF64 ? 8 : 4;
  json units = json::array();
  std::string payload;
  for (const auto& u : params.units()) {
    const std::size_t offset = payload.size();
    for (double v : u.tensor.values()) {
      if (dtype == DType::kF64) {
        append_le_f64(payload, v);
      } else {
        append_le_u32(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
    units.push_back({{"name", u.name},
                     {"shape", u.tensor.shape()},
                     {"offset", offset},
                     {"nbytes", u.neuron_count() * width}});
  }
  const json manifest = {{"format_version", kCheckpointFormatVersion},
                         {"dtype", dtype == DType::kF64 ? "f64" : "f32"},
                         {"kind", model_kind_name(params.kind())},
                         {"config", config_to_json(params.config())},
                         {"units", units},
                         {"payload_bytes", payload.size()}};
  const std::string text = manifest.dump();
  std::string out(kMagic, kMagicLen);
  append_le_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

ParameterSet decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw std::runtime_error("not a checkpoint container");
  }
  const std::uint64_t manifest_len = read_le_u64(bytes, kMagicLen);
  const std::size_t payload_start = kMagicLen + 8 + manifest_len;
  if (payload_start > bytes.size()) throw std::runtime_error("truncated checkpoint manifest");
  const json manifest = json::parse(bytes.substr(kMagicLen + 8, manifest_len));
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format version");
  }
  const std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype != "f64" && dtype != "f32") throw std::runtime_error("unknown dtype " + dtype);
  const std::size_t width = dtype == "f64" ? 8 : 4;
  if (payload_start + manifest.at("payload_bytes").get<std::size_t>() != bytes.size()) {
    throw std::runtime_error("checkpoint payload length mismatch");
  }

  ParameterSet params(parse_model_kind(manifest.at("kind").get<std::string>()),
                      config_from_json(manifest.at("config")));
  for (const auto& u : manifest.at("units")) {
    const Shape shape = u.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    const std::size_t offset = payload_start + u.at("offset").get<std::size_t>();
    if (u.at("nbytes").get<std::size_t>() != n * width || offset + n * width > bytes.size()) {
      throw std::runtime_error("checkpoint unit extent mismatch");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = width == 8
                      ? read_le_f64(bytes, offset + 8 * i)
                      : static_cast<double>(std::bit_cast<float>(read_le_u32(bytes, offset + 4 * i)));
    }
    params.add(u.at("name").get<std::string>(), shape, std::move(values));
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     DType dtype) {
  write_file_bytes(path, encode_checkpoint(params, dtype));
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace hbat
