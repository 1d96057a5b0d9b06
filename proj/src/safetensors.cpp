#include "cwb/safetensors.hpp"

#include "cwb/errors.hpp"
#include "cwb/rng.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>

namespace cwb::safetensors {
namespace {

using nlohmann::json;

size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::F64: return 8;
  }
  return 0;
}

std::optional<DType> parse_dtype(const std::string& s) {
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  if (s == "F64") return DType::F64;
  return std::nullopt;
}

float half_to_float(uint16_t h) {
  const uint32_t sign = (h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1Fu;
  uint32_t mant = h & 0x3FFu;
  uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalise
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

uint64_t read_le64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

Archive Archive::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelLoadError("cannot open weight archive: " + path.string());
  Archive ar;
  ar.path_ = path;
  ar.file_size_ = std::filesystem::file_size(path);
  unsigned char len_bytes[8];
  if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) {
    throw ModelLoadError("unreadable archive (truncated header length): " + path.string());
  }
  const uint64_t header_len = read_le64(len_bytes);
  if (header_len > ar.file_size_ - 8 || header_len > (uint64_t{1} << 30)) {
    throw ModelLoadError("unreadable archive (bad header length): " + path.string());
  }
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
    throw ModelLoadError("unreadable archive (truncated header): " + path.string());
  }
  ar.data_start_ = 8 + header_len;

  json doc;
  try {
    doc = json::parse(header);
  } catch (const json::exception& e) {
    throw ModelLoadError("unreadable archive (header is not JSON): " + std::string(e.what()));
  }
  if (!doc.is_object()) throw ModelLoadError("unreadable archive (header is not an object)");
  const uint64_t data_size = ar.file_size_ - ar.data_start_;
  for (auto& [name, entry] : doc.items()) {
    if (name == "__metadata__") {
      for (auto& [k, v] : entry.items()) {
        ar.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      continue;
    }
    TensorInfo ti;
    const auto dtype = parse_dtype(entry.at("dtype").get<std::string>());
    if (!dtype) {
      throw ModelLoadError("unsupported dtype " + entry.at("dtype").get<std::string>() +
                           " for tensor " + name);
    }
    ti.dtype = *dtype;
    ti.shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offs = entry.at("data_offsets").get<std::vector<uint64_t>>();
    if (offs.size() != 2 || offs[0] > offs[1] || offs[1] > data_size) {
      throw ModelLoadError("bad data offsets for tensor " + name);
    }
    ti.begin = offs[0];
    ti.end = offs[1];
    if ((ti.end - ti.begin) != static_cast<uint64_t>(Tensor::count(ti.shape)) * dtype_size(ti.dtype)) {
      throw ModelLoadError("byte size does not match shape for tensor " + name);
    }
    ar.tensors_.emplace(name, std::move(ti));
  }
  return ar;
}

const TensorInfo& Archive::info(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ModelLoadError("missing tensor: " + name);
  return it->second;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, _] : tensors_) out.push_back(k);
  return out;
}

Tensor Archive::read(const std::string& name) const {
  const TensorInfo& ti = info(name);
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw ModelLoadError("cannot reopen weight archive: " + path_.string());
  const uint64_t nbytes = ti.end - ti.begin;
  std::vector<unsigned char> raw(nbytes);
  in.seekg(static_cast<std::streamoff>(data_start_ + ti.begin));
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(nbytes))) {
    throw ModelLoadError("truncated payload for tensor " + name);
  }
  Tensor out(ti.shape);
  float* dst = out.data();
  const int64_t n = out.numel();
  switch (ti.dtype) {
    case DType::F32:
      std::memcpy(dst, raw.data(), nbytes);
      break;
    case DType::F16:
      for (int64_t i = 0; i < n; ++i) {
        dst[i] = half_to_float(static_cast<uint16_t>(raw[2 * i] | (raw[2 * i + 1] << 8)));
      }
      break;
    case DType::BF16:
      for (int64_t i = 0; i < n; ++i) {
        const uint32_t bits = static_cast<uint32_t>(raw[2 * i] | (raw[2 * i + 1] << 8)) << 16;
        dst[i] = std::bit_cast<float>(bits);
      }
      break;
    case DType::F64:
      for (int64_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, raw.data() + 8 * i, 8);
        dst[i] = static_cast<float>(v);
      }
      break;
  }
  return out;
}

uint64_t write(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
               const std::map<std::string, std::string>& metadata) {
  json header = json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  std::string h = header.dump();
  while ((h.size() + 8) % 8 != 0) h.push_back(' ');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write archive: " + path.string());
  unsigned char len_bytes[8];
  uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
  uint64_t hash = fnv1a64(len_bytes);
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  hash = fnv1a64({reinterpret_cast<const unsigned char*>(h.data()), h.size()}, hash);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  static_assert(std::endian::native == std::endian::little, "writer assumes little-endian floats");
  for (const auto& [name, t] : tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    const size_t nbytes = static_cast<size_t>(t.numel()) * 4;
    hash = fnv1a64({bytes, nbytes}, hash);
    out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
  }
  if (!out) throw std::runtime_error("short write: " + path.string());
  return hash;
}

uint64_t file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelLoadError("cannot open " + path.string());
  std::vector<unsigned char> buf(1 << 20);
  uint64_t h = 0xcbf29ce484222325ull;
  while (in) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<size_t>(in.gcount());
    if (got == 0) break;
    h = fnv1a64({buf.data(), got}, h);
  }
  return h;
}

}  // namespace cwb::safetensors
