#include "vgpt/projectors.hpp"

#include <algorithm>
#include <stdexcept>

namespace vgpt {

GenProjector::GenProjector(int in_dim, int out_dim, Rng& init_rng)
    : in_dim_(in_dim), out_dim_(out_dim), hidden_(std::max(in_dim, out_dim)) {
  if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("vgpt: projector: non-positive dims");
  const float std0 = 0.02f;
  w1_ = Tensor::gaussian(init_rng, {in_dim_, hidden_}, std0, true);
  b1_ = Tensor::zeros({hidden_}, true);
  w2_ = Tensor::gaussian(init_rng, {hidden_, out_dim_}, std0, true);
  b2_ = Tensor::zeros({out_dim_}, true);
}

Tensor GenProjector::apply(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_dim_)
    throw std::invalid_argument("vgpt: projector: input width mismatch");
  return add_bias(matmul(gelu(add_bias(matmul(x, w1_), b1_)), w2_), b2_);
}

std::vector<std::pair<std::string, Tensor>> GenProjector::named_params() {
  return {{"w1", w1_}, {"b1", b1_}, {"w2", w2_}, {"b2", b2_}};
}

VisionEncoder::VisionEncoder(int image_size, int feature_dim, Rng& init_rng)
    : image_size_(image_size), feature_dim_(feature_dim) {
  if (image_size < 16 || image_size % 16 != 0)
    throw std::invalid_argument("vgpt: vision encoder: image size must be a multiple of 16");
  int side = image_size / 16;
  patches_ = side * side;
  const float std0 = 0.02f;
  int patch_bytes = 16 * 16 * 3;
  w1_ = Tensor::gaussian(init_rng, {patch_bytes, feature_dim_}, std0, true);
  b1_ = Tensor::zeros({feature_dim_}, true);
  w2_ = Tensor::gaussian(init_rng, {feature_dim_, feature_dim_}, std0, true);
  b2_ = Tensor::zeros({feature_dim_}, true);
}

Tensor VisionEncoder::encode(const Image& img) const {
  if (img.h != image_size_ || img.w != image_size_)
    throw std::invalid_argument("vgpt: vision encoder: image resolution mismatch");
  Tensor x = Tensor::from_data({img.h, img.w, 3}, img.rgb, false);
  Tensor p = im2col(x, 16, 16, 0);  // [patches x 768]
  return add_bias(matmul(gelu(add_bias(matmul(p, w1_), b1_)), w2_), b2_);
}

std::vector<std::pair<std::string, Tensor>> VisionEncoder::named_params() {
  return {{"w1", w1_}, {"b1", b1_}, {"w2", w2_}, {"b2", b2_}};
}

}  // namespace vgpt
