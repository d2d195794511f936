#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "movia/tensor.hpp"

namespace movia {

// PNG (8-bit RGB) and animated GIF export for [-1,1] image tensors, plus a
// PNG reader for key-frame input. 8-bit values map through v/127.5 - 1.

namespace imageio_detail {

inline uint8_t to_u8(float v) {
  float x = (std::clamp(v, -1.f, 1.f) + 1.f) * 127.5f;
  return static_cast<uint8_t>(std::lround(x));
}

inline void put_u32_be(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

inline void png_chunk(std::ofstream& out, const char type[4], const std::vector<uint8_t>& data) {
  std::vector<uint8_t> hdr;
  put_u32_be(hdr, uint32_t(data.size()));
  out.write(reinterpret_cast<const char*>(hdr.data()), 4);
  out.write(type, 4);
  if (!data.empty()) out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
  std::vector<uint8_t> cr;
  put_u32_be(cr, uint32_t(crc));
  out.write(reinterpret_cast<const char*>(cr.data()), 4);
}

}  // namespace imageio_detail

inline void write_png(const std::filesystem::path& path, const TensorF& img) {
  check(img.rank() == 3 && img.size(2) == 3, "write_png: image must be (H,W,3)");
  using namespace imageio_detail;
  int64_t h = img.size(0), w = img.size(1);
  std::vector<uint8_t> raw(size_t(h * (w * 3 + 1)));
  for (int64_t y = 0; y < h; ++y) {
    uint8_t* row = raw.data() + y * (w * 3 + 1);
    row[0] = 0;  // filter: none
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) row[1 + x * 3 + c] = to_u8(img(y, x, c));
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw IoError("write_png: deflate failed");
  compressed.resize(bound);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_png: cannot open " + path.string());
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  out.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, uint32_t(w));
  put_u32_be(ihdr, uint32_t(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", compressed);
  png_chunk(out, "IEND", {});
  if (!out) throw IoError("write_png: write failed: " + path.string());
}

inline TensorF read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_png: cannot open " + path.string());
  std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)), {});
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw IoError("read_png: not a PNG file: " + path.string());

  auto be32 = [&](size_t off) {
    return (uint32_t(file[off]) << 24) | (uint32_t(file[off + 1]) << 16) |
           (uint32_t(file[off + 2]) << 8) | uint32_t(file[off + 3]);
  };

  int64_t w = 0, h = 0;
  int channels = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= file.size()) {
    uint32_t len = be32(pos);
    std::string type(reinterpret_cast<const char*>(file.data() + pos + 4), 4);
    size_t data = pos + 8;
    if (data + len + 4 > file.size()) throw IoError("read_png: truncated chunk in " + path.string());
    if (type == "IHDR") {
      w = be32(data);
      h = be32(data + 4);
      int depth = file[data + 8], color = file[data + 9], interlace = file[data + 12];
      if (depth != 8 || (color != 2 && color != 6) || interlace != 0)
        throw IoError("read_png: only 8-bit non-interlaced RGB/RGBA is supported");
      channels = color == 2 ? 3 : 4;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), file.begin() + std::streamoff(data), file.begin() + std::streamoff(data + len));
    } else if (type == "IEND") {
      break;
    }
    pos = data + len + 4;
  }
  if (w <= 0 || h <= 0 || idat.empty()) throw IoError("read_png: missing image data");

  uLongf raw_len = uLongf(h * (w * channels + 1));
  std::vector<uint8_t> raw(raw_len);
  if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
      raw_len != uLongf(h * (w * channels + 1)))
    throw IoError("read_png: inflate failed for " + path.string());

  // unfilter
  int64_t stride = w * channels;
  std::vector<uint8_t> img(size_t(h * stride));
  for (int64_t y = 0; y < h; ++y) {
    uint8_t filter = raw[size_t(y * (stride + 1))];
    const uint8_t* src = raw.data() + y * (stride + 1) + 1;
    uint8_t* dst = img.data() + y * stride;
    const uint8_t* up = y > 0 ? img.data() + (y - 1) * stride : nullptr;
    for (int64_t i = 0; i < stride; ++i) {
      int a = i >= channels ? dst[i - channels] : 0;
      int b = up ? up[i] : 0;
      int c = (up && i >= channels) ? up[i - channels] : 0;
      int x = src[i];
      switch (filter) {
        case 0: dst[i] = uint8_t(x); break;
        case 1: dst[i] = uint8_t(x + a); break;
        case 2: dst[i] = uint8_t(x + b); break;
        case 3: dst[i] = uint8_t(x + (a + b) / 2); break;
        case 4: {
          int p = a + b - c;
          int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          int pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          dst[i] = uint8_t(x + pred);
          break;
        }
        default: throw IoError("read_png: unknown filter type");
      }
    }
  }

  TensorF out({h, w, 3});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        out(y, x, c) = float(img[size_t(y * stride + x * channels + c)]) / 127.5f - 1.f;
  return out;
}

/*---------------------------------- GIF ------------------------------------*/

namespace imageio_detail {

// LZW for GIF with a fresh table after each clear code.
class GifLzw {
 public:
  explicit GifLzw(int min_code_size) : min_code_(min_code_size) { reset(); }

  std::vector<uint8_t> encode(const std::vector<uint8_t>& indices) {
    out_.clear();
    bits_ = 0;
    nbits_ = 0;
    reset();
    emit(clear_code());
    int32_t prefix = -1;
    for (uint8_t k : indices) {
      if (prefix < 0) {
        prefix = k;
        continue;
      }
      auto it = table_.find(key(prefix, k));
      if (it != table_.end()) {
        prefix = it->second;
      } else {
        emit(prefix);
        if (next_code_ < 4096) {
          table_[key(prefix, k)] = next_code_++;
        } else {
          emit(clear_code());
          reset();
        }
        prefix = k;
      }
    }
    if (prefix >= 0) emit(prefix);
    emit(clear_code() + 1);  // end of information
    if (nbits_ > 0) out_.push_back(uint8_t(bits_ & 0xFF));
    return out_;
  }

 private:
  int32_t clear_code() const { return 1 << min_code_; }
  static uint32_t key(int32_t prefix, uint8_t k) { return (uint32_t(prefix) << 8) | k; }

  void reset() {
    table_.clear();
    next_code_ = clear_code() + 2;
    code_size_ = min_code_ + 1;
  }

  // code-size growth follows the table size as seen before this emission
  void emit(int32_t code) {
    bits_ |= uint32_t(code) << nbits_;
    nbits_ += code_size_;
    while (nbits_ >= 8) {
      out_.push_back(uint8_t(bits_ & 0xFF));
      bits_ >>= 8;
      nbits_ -= 8;
    }
    if (next_code_ > (1 << code_size_) - 1 && code_size_ < 12) ++code_size_;
  }

  int min_code_;
  std::map<uint32_t, int32_t> table_;
  int32_t next_code_ = 0;
  int code_size_ = 0;
  std::vector<uint8_t> out_;
  uint32_t bits_ = 0;
  int nbits_ = 0;
};

}  // namespace imageio_detail

// Animated GIF with a 6x6x6 color cube, looping, frame delay from fps.
inline void write_gif(const std::filesystem::path& path, const TensorF& video, int fps) {
  check(video.rank() == 4 && video.size(3) == 3, "write_gif: video must be (F,H,W,3)");
  check(fps >= 1, "write_gif: fps must be positive");
  using namespace imageio_detail;
  int64_t f = video.size(0), h = video.size(1), w = video.size(2);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_gif: cannot open " + path.string());
  out.write("GIF89a", 6);
  uint8_t screen[7] = {uint8_t(w & 0xFF), uint8_t(w >> 8), uint8_t(h & 0xFF), uint8_t(h >> 8),
                       0xF7, 0, 0};  // global table, 256 entries
  out.write(reinterpret_cast<const char*>(screen), 7);
  // 6-level color cube + grays padding to 256
  std::vector<uint8_t> palette;
  for (int r = 0; r < 6; ++r)
    for (int g = 0; g < 6; ++g)
      for (int b = 0; b < 6; ++b) {
        palette.push_back(uint8_t(r * 51));
        palette.push_back(uint8_t(g * 51));
        palette.push_back(uint8_t(b * 51));
      }
  for (int i = 216; i < 256; ++i) {
    uint8_t g = uint8_t((i - 216) * 255 / 39);
    palette.push_back(g);
    palette.push_back(g);
    palette.push_back(g);
  }
  out.write(reinterpret_cast<const char*>(palette.data()), std::streamsize(palette.size()));

  // netscape loop extension
  const uint8_t loop[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E',
                          '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  out.write(reinterpret_cast<const char*>(loop), sizeof(loop));

  int delay = std::max(2, int(std::lround(100.0 / fps)));
  for (int64_t fi = 0; fi < f; ++fi) {
    uint8_t gce[8] = {0x21, 0xF9, 0x04, 0x04, uint8_t(delay & 0xFF), uint8_t(delay >> 8), 0, 0};
    out.write(reinterpret_cast<const char*>(gce), 8);
    uint8_t desc[10] = {0x2C, 0, 0, 0, 0, uint8_t(w & 0xFF), uint8_t(w >> 8),
                        uint8_t(h & 0xFF), uint8_t(h >> 8), 0};
    out.write(reinterpret_cast<const char*>(desc), 10);

    std::vector<uint8_t> indices(size_t(h * w));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        int r = (to_u8(video(fi, y, x, 0)) + 25) / 51;
        int g = (to_u8(video(fi, y, x, 1)) + 25) / 51;
        int b = (to_u8(video(fi, y, x, 2)) + 25) / 51;
        indices[size_t(y * w + x)] =
            uint8_t(std::min(r, 5) * 36 + std::min(g, 5) * 6 + std::min(b, 5));
      }
    GifLzw lzw(8);
    std::vector<uint8_t> data = lzw.encode(indices);
    out.put(8);  // min code size
    for (size_t off = 0; off < data.size(); off += 255) {
      size_t n = std::min<size_t>(255, data.size() - off);
      out.put(char(n));
      out.write(reinterpret_cast<const char*>(data.data() + off), std::streamsize(n));
    }
    out.put(0);  // block terminator
  }
  out.put(0x3B);  // trailer
  if (!out) throw IoError("write_gif: write failed: " + path.string());
}

}  // namespace movia
