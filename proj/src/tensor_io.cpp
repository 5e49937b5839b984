#include "contactsense/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "contactsense/error.hpp"

namespace contactsense {

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return dims.empty() ? 0 : n;
}

namespace {
void put16(unsigned char* p, std::uint16_t v) {
  p[0] = static_cast<unsigned char>(v);
  p[1] = static_cast<unsigned char>(v >> 8);
}
}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > kTensorMaxRank) throw ParameterError("tensor rank must be 1..5");
  for (int d : t.dims) {
    if (d <= 0 || d > 65535) throw ParameterError("tensor dimension out of range");
  }
  if (t.element_count() != t.data.size()) throw ParameterError("tensor payload does not match its dims");

  unsigned char header[16] = {'C', 'S', 'T', 'N'};
  put16(header + 4, static_cast<std::uint16_t>(t.dims.size()));
  for (std::size_t i = 0; i < t.dims.size(); ++i) put16(header + 6 + 2 * i, static_cast<std::uint16_t>(t.dims[i]));

  std::string bytes(16 + 4 * t.data.size(), '\0');
  std::memcpy(bytes.data(), header, 16);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &t.data[i], 4);
    for (int b = 0; b < 4; ++b) bytes[16 + 4 * i + static_cast<std::size_t>(b)] = static_cast<char>(u >> (8 * b));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  unsigned char header[16];
  if (!in.read(reinterpret_cast<char*>(header), 16) || std::memcmp(header, "CSTN", 4) != 0) {
    throw FormatError(path.string() + ": not a tensor file");
  }
  const int rank = header[4] | (header[5] << 8);
  if (rank < 1 || rank > kTensorMaxRank) throw FormatError(path.string() + ": bad tensor rank");
  Tensor t;
  for (int i = 0; i < rank; ++i) t.dims.push_back(header[6 + 2 * i] | (header[7 + 2 * i] << 8));
  const std::size_t n = t.element_count();
  std::vector<unsigned char> raw(4 * n);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError(path.string() + ": truncated tensor payload");
  }
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    std::memcpy(&t.data[i], &u, 4);
  }
  return t;
}

}  // namespace contactsense
