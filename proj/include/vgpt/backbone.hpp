#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vgpt/rng.hpp"
#include "vgpt/tensor.hpp"

namespace vgpt {

struct BackboneConfig {
  int layers = 4;
  int heads = 4;
  int width = 128;
  int ffn_mult = 4;
  int text_vocab = 512;
  int max_seq = 512;
  bool learned_pos = true;

  void validate() const;
};

// Decoder-only transformer over mixed-modal embedding rows. Pre-norm blocks,
// learned absolute positions (added inside forward so overridden rows keep
// positional information), strictly causal attention for every token.
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, Rng& init_rng);

  const BackboneConfig& config() const { return cfg_; }

  Tensor embed_tokens(const std::vector<int>& ids) const;

  struct Output {
    Tensor logits;  // [seq x text_vocab]
    Tensor hidden;  // [seq x width], after the final norm
  };
  Output forward(const Tensor& embeddings) const;

  std::vector<std::pair<std::string, Tensor>> named_params();

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor w1, b1, w2, b2;
  };

  BackboneConfig cfg_;
  Tensor tok_emb_;   // [text_vocab x width]
  Tensor pos_emb_;   // [max_seq x width]
  std::vector<Layer> layers_;
  Tensor head_w_;    // [width x text_vocab]
};

// Additive attention mask: 0 where j may be attended from i, -1e9 otherwise.
// The -1e9 entries underflow to exactly zero probability after softmax, which
// is what makes prefix truncation bit-exact.
Tensor causal_mask_tensor(int seq);

}  // namespace vgpt
