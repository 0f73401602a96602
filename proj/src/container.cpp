#include "cxgn/container.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

namespace cxgn {

namespace {

constexpr char kMagic[4] = {'C', 'X', 'G', 'N'};
constexpr uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_exact(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) throw Error("short write: " + path);
}

void read_exact(std::FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) throw Error("short read / truncated container: " + path);
}

}  // namespace

bool Container::contains(const std::string& name) const {
  for (const auto& [n, _] : tensors)
    if (n == name) return true;
  return false;
}

Tensor Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw Error("container has no tensor named " + name);
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  out.reserve(tensors.size());
  for (const auto& [n, _] : tensors) out.push_back(n);
  return out;
}

void save_container(const std::string& path, const Container& c) {
  json header;
  json list = json::array();
  for (const auto& [name, t] : c.tensors) {
    json e;
    e["name"] = name;
    e["dtype"] = dtype_name(t.dtype());
    e["shape"] = t.shape();
    list.push_back(std::move(e));
  }
  header["tensors"] = std::move(list);
  header["meta"] = c.meta;
  std::string hs = header.dump();

  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error("cannot open for write: " + path);
  write_exact(f.get(), kMagic, 4, path);
  uint32_t ver = kVersion;
  write_exact(f.get(), &ver, 4, path);
  uint64_t hlen = hs.size();
  write_exact(f.get(), &hlen, 8, path);
  write_exact(f.get(), hs.data(), hs.size(), path);
  for (const auto& [name, t] : c.tensors) {
    size_t bytes = static_cast<size_t>(t.numel()) * dtype_size(t.dtype());
    const void* src = t.dtype() == DType::F32 ? static_cast<const void*>(t.f32())
                                              : static_cast<const void*>(t.f64());
    write_exact(f.get(), src, bytes, path);
  }
  if (std::fflush(f.get()) != 0) throw Error("flush failed: " + path);
}

namespace {

json read_header(std::FILE* f, const std::string& path) {
  char magic[4];
  read_exact(f, magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0) throw Error("bad magic, not a CXGN container: " + path);
  uint32_t ver = 0;
  read_exact(f, &ver, 4, path);
  if (ver != kVersion) throw Error("unsupported container version in " + path);
  uint64_t hlen = 0;
  read_exact(f, &hlen, 8, path);
  std::string hs(hlen, '\0');
  read_exact(f, hs.data(), hlen, path);
  return json::parse(hs);
}

}  // namespace

Container load_container(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw Error("cannot open: " + path);
  json header = read_header(f.get(), path);
  Container c;
  if (header.contains("meta")) c.meta = header["meta"];
  for (const auto& e : header.at("tensors")) {
    std::string name = e.at("name").get<std::string>();
    DType dt = dtype_from_name(e.at("dtype").get<std::string>());
    Shape shape = e.at("shape").get<Shape>();
    Tensor t = Tensor::zeros(shape, dt);
    size_t bytes = static_cast<size_t>(t.numel()) * dtype_size(dt);
    void* dst = dt == DType::F32 ? static_cast<void*>(t.f32()) : static_cast<void*>(t.f64());
    read_exact(f.get(), dst, bytes, path);
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

json load_container_header(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw Error("cannot open: " + path);
  return read_header(f.get(), path);
}

}  // namespace cxgn
