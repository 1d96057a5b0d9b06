#pragma once

#include "cwb/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cwb::safetensors {

enum class DType { F32, F16, BF16, F64 };

struct TensorInfo {
  DType dtype;
  std::vector<int64_t> shape;
  uint64_t begin = 0;  // byte offsets relative to the data section
  uint64_t end = 0;
};

// Read-only view of a safetensors archive. Tensor payloads are read on demand
// and widened to float32.
class Archive {
 public:
  static Archive open(const std::filesystem::path& path);

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  const TensorInfo& info(const std::string& name) const;
  std::vector<std::string> names() const;
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  Tensor read(const std::string& name) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  uint64_t data_start_ = 0;
  uint64_t file_size_ = 0;
  std::map<std::string, TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
};

// Writes float32 tensors in name order. Returns the FNV-1a hash of the file bytes.
uint64_t write(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
               const std::map<std::string, std::string>& metadata = {});

uint64_t file_fingerprint(const std::filesystem::path& path);

}  // namespace cwb::safetensors
