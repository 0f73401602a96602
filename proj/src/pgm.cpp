#include "cxgn/pgm.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace cxgn {

namespace {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace

void write_pgm(const std::string& path, const Tensor& image) {
  Tensor img = image;
  if (img.rank() == 3 && img.shape()[0] == 1)
    img = img.reshaped({img.shape()[1], img.shape()[2]});
  CXGN_CHECK(img.rank() == 2, "write_pgm: expected (H,W) image");
  int64_t h = img.shape()[0], w = img.shape()[1];
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error("cannot open for write: " + path);
  std::fprintf(f.get(), "P5\n%lld %lld\n255\n", static_cast<long long>(w),
               static_cast<long long>(h));
  std::vector<unsigned char> row(static_cast<size_t>(w));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double v = img.at(y * w + x);
      v = std::min(1.0, std::max(0.0, v));
      row[static_cast<size_t>(x)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    if (std::fwrite(row.data(), 1, row.size(), f.get()) != row.size())
      throw Error("short write: " + path);
  }
}

Tensor read_pgm(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw Error("cannot open: " + path);
  char magic[3] = {0, 0, 0};
  if (std::fscanf(f.get(), "%2s", magic) != 1 || magic[0] != 'P' || magic[1] != '5')
    throw Error("not a P5 PGM: " + path);
  long long w = 0, h = 0, maxval = 0;
  // header fields may be separated by comments
  auto read_int = [&](long long* out) {
    int c;
    do {
      c = std::fgetc(f.get());
      if (c == '#')
        while (c != '\n' && c != EOF) c = std::fgetc(f.get());
    } while (c == ' ' || c == '\n' || c == '\t' || c == '\r');
    long long v = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
      v = v * 10 + (c - '0');
      any = true;
      c = std::fgetc(f.get());
    }
    if (!any) throw Error("bad PGM header: " + path);
    *out = v;
  };
  read_int(&w);
  read_int(&h);
  read_int(&maxval);
  CXGN_CHECK(maxval == 255, "read_pgm: only maxval 255 supported");
  Tensor img = Tensor::zeros({h, w}, DType::F32);
  std::vector<unsigned char> buf(static_cast<size_t>(w * h));
  if (std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size())
    throw Error("truncated PGM: " + path);
  float* dst = img.f32();
  for (size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

}  // namespace cxgn
