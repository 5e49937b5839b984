#pragma once

#include <filesystem>
#include <vector>

namespace contactsense {

// Flat little-endian float32 tensor. File layout: 16-byte header
// ("CSTN", u16 rank, u16 dims[5]) followed by the row-major payload.
struct Tensor {
  std::vector<int> dims;
  std::vector<float> data;

  std::size_t element_count() const;
};

inline constexpr int kTensorMaxRank = 5;

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace contactsense
