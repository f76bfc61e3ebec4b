#pragma once

// Synthetic segmentation data: textured background plus ellipse foreground,
// written as binary PGM (P5) pairs with a JSON manifest.

#include <string>
#include <vector>

#include "l4seg/tensor.hpp"

namespace l4s {

struct GrayImage {
  int64_t w = 0, h = 0;
  std::vector<uint8_t> px;  // row-major
};

void write_pgm(const std::string& path, const GrayImage& img);
GrayImage read_pgm(const std::string& path);

struct Sample {
  std::string id;
  Tensor image;               // 1 x H x W, F32 in [0,1]
  std::vector<uint8_t> mask;  // H*W entries of {0,1}
  int64_t h = 0, w = 0;

  int64_t mask_area() const;
};

// n image/mask pairs under out_dir plus manifest.json; deterministic per seed.
void gen_synthetic(uint64_t seed, int64_t n, int64_t size, const std::string& out_dir);

// in-memory generation of a single pair (used by gen_synthetic and the tests)
Sample gen_sample(Rng& rng, int64_t size, const std::string& id);

std::vector<Sample> load_dataset(const std::string& dir);

// --- binary mask metrics --------------------------------------------------

// |intersection| / |union|; 1.0 when both masks are empty
double iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);
// 2|intersection| / (|pred| + |gt|); 1.0 when both masks are empty
double f1(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

}  // namespace l4s
