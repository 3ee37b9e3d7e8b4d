#include "robustswap/container.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rswap::io {

namespace {

using nlohmann::json;

std::string dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "F32";
    case torch::kFloat64: return "F64";
    case torch::kInt64: return "I64";
    case torch::kInt32: return "I32";
    case torch::kUInt8: return "U8";
    default: break;
  }
  throw std::invalid_argument("container: unsupported dtype " + std::string(c10::toString(t)));
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
  if (tag == "F32") return torch::kFloat32;
  if (tag == "F64") return torch::kFloat64;
  if (tag == "I64") return torch::kInt64;
  if (tag == "I32") return torch::kInt32;
  if (tag == "U8") return torch::kUInt8;
  throw std::runtime_error("container: unknown dtype tag '" + tag + "'");
}

}  // namespace

std::string serialize_archive(const TensorArchive& archive) {
  json header = json::object();
  std::string payload;
  for (const auto& [name, tensor] : archive.tensors) {
    if (name == "__metadata__") throw std::invalid_argument("container: reserved tensor name");
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto begin = payload.size();
    const auto nbytes = static_cast<size_t>(t.numel()) * t.element_size();
    payload.resize(begin + nbytes);
    if (nbytes > 0) std::memcpy(payload.data() + begin, t.data_ptr(), nbytes);
    header[name] = {{"dtype", dtype_tag(t.scalar_type())},
                    {"shape", t.sizes().vec()},
                    {"data_offsets", {begin, payload.size()}}};
  }
  header["__metadata__"] = {{"manifest", archive.manifest.dump()}};

  const std::string header_text = header.dump();
  const uint64_t header_len = header_text.size();
  std::string out(8, '\0');
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((header_len >> (8 * i)) & 0xff);
  out += header_text;
  out += payload;
  return out;
}

TensorArchive parse_archive(std::string_view bytes) {
  if (bytes.size() < 8) throw std::runtime_error("container: truncated header length");
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= uint64_t(static_cast<unsigned char>(bytes[i])) << (8 * i);
  if (bytes.size() < 8 + header_len) throw std::runtime_error("container: truncated header");
  const json header = json::parse(bytes.substr(8, header_len));
  const auto payload = bytes.substr(8 + header_len);

  TensorArchive archive;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      archive.manifest = json::parse(entry.at("manifest").get<std::string>());
      continue;
    }
    const auto dtype = dtype_from_tag(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<uint64_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > payload.size())
      throw std::runtime_error("container: bad data offsets for '" + name + "'");
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    const auto nbytes = static_cast<size_t>(t.numel()) * t.element_size();
    if (nbytes != offsets[1] - offsets[0])
      throw std::runtime_error("container: size mismatch for '" + name + "'");
    if (nbytes > 0) std::memcpy(t.data_ptr(), payload.data() + offsets[0], nbytes);
    archive.tensors.emplace(name, std::move(t));
  }
  return archive;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  write_file_atomic(path, serialize_archive(archive));
}

TensorArchive load_archive(const std::filesystem::path& path) { return parse_archive(read_file(path)); }

}  // namespace rswap::io
