#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "movia/tensor.hpp"

namespace movia {

// NPY v1.0 container, little-endian, C-contiguous. Floats are stored as
// '<f4', masks as '|u1'.

namespace npy_detail {

template <typename T>
const char* dtype_descr();
template <>
inline const char* dtype_descr<float>() { return "<f4"; }
template <>
inline const char* dtype_descr<double>() { return "<f8"; }
template <>
inline const char* dtype_descr<uint8_t>() { return "|u1"; }

inline bool machine_is_little_endian() {
  const uint16_t probe = 0x0102;
  uint8_t first = 0;
  std::memcpy(&first, &probe, 1);
  return first == 0x02;
}

inline std::string shape_tuple(const std::vector<int64_t>& shape) {
  if (shape.empty()) return "()";
  if (shape.size() == 1) return "(" + std::to_string(shape[0]) + ",)";
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace npy_detail

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  check_valid(t.all_finite(), "save_tensor: tensor contains NaN/Inf, refusing to write " + path.string());

  std::string dict = "{'descr': '";
  dict += npy_detail::dtype_descr<T>();
  dict += "', 'fortran_order': False, 'shape': ";
  dict += npy_detail::shape_tuple(t.shape());
  dict += ", }";
  // Pad with spaces so that magic(6) + version(2) + hlen(2) + header is a
  // multiple of 64 bytes, terminated by '\n'.
  size_t unpadded = 6 + 2 + 2 + dict.size() + 1;
  size_t pad = (64 - unpadded % 64) % 64;
  dict += std::string(pad, ' ');
  dict += '\n';

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_tensor: cannot open for writing: " + path.string());
  out.write("\x93NUMPY", 6);
  out.put(1).put(0);
  uint16_t hlen = static_cast<uint16_t>(dict.size());
  char lenb[2] = {static_cast<char>(hlen & 0xFF), static_cast<char>((hlen >> 8) & 0xFF)};
  out.write(lenb, 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  static_assert(sizeof(T) == 1 || sizeof(T) == 4 || sizeof(T) == 8);
  if (!npy_detail::machine_is_little_endian())
    throw IoError("save_tensor: big-endian hosts are not supported");
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(static_cast<size_t>(t.numel()) * sizeof(T)));
  if (!out) throw IoError("save_tensor: write failed: " + path.string());
}

struct NpyHeader {
  std::string descr;
  bool fortran_order = false;
  std::vector<int64_t> shape;
  size_t data_offset = 0;
};

inline NpyHeader read_npy_header(std::istream& in, const std::string& name) {
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0)
    throw IoError("load_tensor: bad magic bytes at offset 0 in " + name);
  char ver[2];
  in.read(ver, 2);
  if (!in) throw IoError("load_tensor: truncated version field at offset 6 in " + name);
  if (ver[0] != 1) throw IoError("load_tensor: unsupported NPY version " + std::to_string(int(ver[0])) + " in " + name);
  unsigned char lenb[2];
  in.read(reinterpret_cast<char*>(lenb), 2);
  if (!in) throw IoError("load_tensor: truncated header length at offset 8 in " + name);
  size_t hlen = static_cast<size_t>(lenb[0]) | (static_cast<size_t>(lenb[1]) << 8);
  std::string dict(hlen, '\0');
  in.read(dict.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("load_tensor: truncated header dict at offset 10 in " + name);

  NpyHeader h;
  h.data_offset = 10 + hlen;

  auto locate = [&](const std::string& key) -> size_t {
    size_t k = dict.find("'" + key + "'");
    if (k == std::string::npos)
      throw IoError("load_tensor: header missing key '" + key + "' in " + name);
    size_t colon = dict.find(':', k);
    if (colon == std::string::npos)
      throw IoError("load_tensor: malformed header dict in " + name);
    return colon + 1;
  };

  size_t dpos = locate("descr");
  size_t q0 = dict.find('\'', dpos);
  size_t q1 = (q0 == std::string::npos) ? std::string::npos : dict.find('\'', q0 + 1);
  if (q1 == std::string::npos) throw IoError("load_tensor: malformed descr in " + name);
  h.descr = dict.substr(q0 + 1, q1 - q0 - 1);

  h.fortran_order = dict.compare(dict.find_first_not_of(' ', locate("fortran_order")), 4, "True") == 0;

  size_t spos = locate("shape");
  size_t p0 = dict.find('(', spos);
  size_t p1 = (p0 == std::string::npos) ? std::string::npos : dict.find(')', p0);
  if (p1 == std::string::npos) throw IoError("load_tensor: malformed shape tuple in " + name);
  std::string inner = dict.substr(p0 + 1, p1 - p0 - 1);
  size_t pos = 0;
  while (pos < inner.size()) {
    while (pos < inner.size() && (inner[pos] == ' ' || inner[pos] == ',')) ++pos;
    if (pos >= inner.size()) break;
    size_t consumed = 0;
    h.shape.push_back(std::stoll(inner.substr(pos), &consumed));
    pos += consumed;
  }
  return h;
}

template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_tensor: cannot open " + path.string());
  NpyHeader h = read_npy_header(in, path.string());

  if (h.descr.size() >= 1 && h.descr[0] == '>')
    throw IoError("load_tensor: big-endian payload ('" + h.descr + "') is not supported: " + path.string());
  if (h.descr != npy_detail::dtype_descr<T>())
    throw IoError("load_tensor: dtype '" + h.descr + "' does not match requested '" +
                  npy_detail::dtype_descr<T>() + "': " + path.string());
  if (h.fortran_order)
    throw IoError("load_tensor: fortran-order payloads are not supported: " + path.string());

  Tensor<T> t(h.shape);
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(static_cast<size_t>(t.numel()) * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(static_cast<size_t>(t.numel()) * sizeof(T)))
    throw IoError("load_tensor: truncated payload at offset " + std::to_string(h.data_offset) +
                  " in " + path.string());
  return t;
}

// Loads '<f4' directly; '|u1' payloads (masks) are widened to float 0/1.
inline TensorF load_tensor(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("load_tensor: cannot open " + path.string());
  NpyHeader h = read_npy_header(probe, path.string());
  probe.close();
  if (h.descr == "|u1") return load_tensor_as<uint8_t>(path).template cast<float>();
  return load_tensor_as<float>(path);
}

}  // namespace movia
