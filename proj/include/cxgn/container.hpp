#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cxgn/tensor.hpp"

namespace cxgn {

using json = nlohmann::ordered_json;

// Repo-wide raw tensor container:
//   magic "CXGN" | u32 version=1 | u64 JSON header length | header bytes |
//   concatenated little-endian IEEE-754 payloads in header order.
// Header: {"tensors": [{"name","dtype","shape"}...], "meta": {...}}.
struct Container {
  std::vector<std::pair<std::string, Tensor>> tensors;
  json meta = json::object();

  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }
  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;
  std::vector<std::string> names() const;
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

// Reads only the header (cheap existence/metadata checks).
json load_container_header(const std::string& path);

}  // namespace cxgn
