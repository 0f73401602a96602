#pragma once

#include <string>

#include "cxgn/tensor.hpp"

namespace cxgn {

// Binary PGM (P5, maxval 255). Values in [0,1] map linearly to 0..255 with
// round-half-away; image must be rank 2 (H, W) or (1, H, W).
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);  // -> (H, W) f32 in [0,1]

}  // namespace cxgn
