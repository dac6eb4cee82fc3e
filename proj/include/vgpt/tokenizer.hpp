#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vgpt/image_io.hpp"
#include "vgpt/optim.hpp"
#include "vgpt/rng.hpp"
#include "vgpt/tensor.hpp"

namespace vgpt {

// Strictly increasing per-scale grid sides; the last equals the latent side.
struct ScaleSchedule {
  std::vector<int> rs;

  int scales() const { return static_cast<int>(rs.size()); }
  int latent_side() const { return rs.back(); }
  int total_cells() const {
    int t = 0;
    for (int r : rs) t += r * r;
    return t;
  }
  void validate() const;
};

struct TokenPyramid {
  ScaleSchedule schedule;
  std::vector<std::vector<int>> maps;  // maps[k]: rs[k]² indices, row-major

  bool operator==(const TokenPyramid& o) const { return schedule.rs == o.schedule.rs && maps == o.maps; }
};

std::string pyramid_to_json(const TokenPyramid& p);
TokenPyramid pyramid_from_json(const std::string& text);

struct TokenizerConfig {
  int image_size = 64;
  int downsample = 16;  // latent side = image_size / downsample
  int latent_dim = 32;
  int vocab_size = 256;
  ScaleSchedule schedule{{1, 2, 4}};

  int latent_side() const { return image_size / downsample; }
  void validate() const;
};

// Multi-scale residual VQ autoencoder. The encoder/decoder are two mirrored
// stride-4 patch stages; each scale has a 3x3 refinement convolution applied
// at latent resolution after upsampling the dequantized grid.
class Tokenizer {
 public:
  Tokenizer(const TokenizerConfig& cfg, Rng& init_rng);

  const TokenizerConfig& config() const { return cfg_; }

  // inference (no autodiff recording)
  TokenPyramid encode(const Image& img) const;
  Image decode(const TokenPyramid& pyr) const;

  // differentiable pieces used by training and by the model's visual pathway
  Tensor encode_latent(const Image& img) const;            // [side,side,dim]
  Tensor decode_latent(const Tensor& latent) const;        // [H,W,3], unclamped
  Tensor dequantize_pyramid(const TokenPyramid& pyr) const;  // cumulative latent [side,side,dim]
  // cumulative latent over scales < k (zeros for k=0)
  Tensor partial_latent(const TokenPyramid& pyr, int upto_scale) const;

  // residual quantization of a latent; records usage counts
  TokenPyramid quantize_latent(const Tensor& latent);
  TokenPyramid quantize_latent_const(const Tensor& latent) const;

  const Tensor& codebook() const { return codebook_; }
  std::vector<int64_t>& usage_counts() { return usage_; }
  int reseed_dead_entries(Rng& rng, const Tensor& latent_batch);  // returns reseeded count

  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<Tensor> trainable_params();
  void set_frozen(bool frozen);

 private:
  Tensor encode_latent_img(const Image& img) const;
  Tensor refine(const Tensor& up, int scale) const;  // 3x3 conv of scale k

  TokenizerConfig cfg_;
  // encoder
  Tensor enc_w1_, enc_b1_, enc_w2_, enc_b2_;
  // decoder
  Tensor dec_w1_, dec_b1_, dec_w2_, dec_b2_;
  // per-scale refinement convs
  std::vector<Tensor> ref_w_, ref_b_;
  Tensor codebook_;
  std::vector<int64_t> usage_;

  friend struct VqStep;
};

struct VqLosses {
  float recon = 0, codebook = 0, commit = 0, total = 0;
};

// One optimization step with straight-through gradients; beta scales the
// commitment term (a zero beta still evaluates the term, contributing 0).
VqLosses vq_train_step(Tokenizer& tok, const std::vector<Image>& batch, AdamW& opt, float lr,
                       float beta);

int nearest_code(const float* cell, const Tensor& codebook, int dim);

}  // namespace vgpt
