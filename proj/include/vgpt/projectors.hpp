#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vgpt/image_io.hpp"
#include "vgpt/rng.hpp"
#include "vgpt/tensor.hpp"

namespace vgpt {

// linear -> GELU -> linear, hidden width max(in, out).
class GenProjector {
 public:
  GenProjector() = default;
  GenProjector(int in_dim, int out_dim, Rng& init_rng);

  Tensor apply(const Tensor& x) const;  // [n x in] -> [n x out]
  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }
  int hidden_dim() const { return hidden_; }

  std::vector<std::pair<std::string, Tensor>> named_params();

 private:
  int in_dim_ = 0, out_dim_ = 0, hidden_ = 0;
  Tensor w1_, b1_, w2_, b2_;
};

// The understanding projector shares the two-layer shape.
using UnderstandProjector = GenProjector;

// Frozen random patch-embedding stack standing in for a pretrained vision
// tower: 16x16 patches -> linear -> GELU -> linear, features per patch.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(int image_size, int feature_dim, Rng& init_rng);

  Tensor encode(const Image& img) const;  // [patches x feature_dim]
  int patches() const { return patches_; }
  int feature_dim() const { return feature_dim_; }

  std::vector<std::pair<std::string, Tensor>> named_params();

 private:
  int image_size_ = 0, patches_ = 0, feature_dim_ = 0;
  Tensor w1_, b1_, w2_, b2_;
};

}  // namespace vgpt
