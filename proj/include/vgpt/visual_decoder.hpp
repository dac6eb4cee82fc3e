#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vgpt/rng.hpp"
#include "vgpt/tensor.hpp"
#include "vgpt/tokenizer.hpp"

namespace vgpt {

struct VisualDecoderConfig {
  int layers = 4;
  int heads = 4;
  int width = 128;
  int vocab_size = 256;   // must equal the tokenizer vocab
  int latent_dim = 32;    // must equal the tokenizer latent dim
  ScaleSchedule schedule{{1, 2, 4}};
  bool adaln = true;
  int cond_rows = 1;  // 1 = single condition vector; >1 = condition-sequence variant

  void validate() const;
};

// Boolean attention mask over 1 condition block plus one block per scale:
// (i,j) allowed iff block(j) <= block(i). Full attention within a block.
struct BlockCausalMask {
  int t = 0;
  std::vector<uint8_t> allowed;  // [t*t]

  bool at(int i, int j) const { return allowed[static_cast<size_t>(i) * t + j] != 0; }
};

BlockCausalMask build_block_causal_mask(const ScaleSchedule& schedule, int cond_rows = 1);
// block id of a position: 0 for condition rows, k for rows of scale k (1-based)
int block_of(int pos, const ScaleSchedule& schedule, int cond_rows = 1);

// Transformer over [condition | scale-1 queries | ... | scale-K queries] rows.
// Scale k's content input is the cumulative dequantized latent of scales < k,
// resized to r_k, linearly embedded, plus a per-(scale, cell) learned position
// embedding. Logits at scale-k rows parameterize that scale's token maps.
class VisualDecoder {
 public:
  VisualDecoder(const VisualDecoderConfig& cfg, Rng& init_rng);

  const VisualDecoderConfig& config() const { return cfg_; }

  // contents[k]: [r_k² x latent_dim] rows for scale k (k = 0-based); may cover
  // only the first m scales for incremental decoding. contents[0] is ignored
  // and replaced by zeros (nothing precedes scale 1 but the condition).
  Tensor assemble_inputs(const Tensor& condition, const std::vector<Tensor>& contents) const;

  struct Output {
    Tensor logits;  // [t x vocab]
    Tensor hidden;  // [t x width], after the final (modulated) norm
  };
  // inputs from assemble_inputs (possibly truncated to whole blocks);
  // AdaLN reads its conditioning vector from row 0.
  Output forward(const Tensor& inputs) const;

  // teacher-forced content rows for all scales of a pyramid
  std::vector<Tensor> teacher_contents(const Tokenizer& tok, const TokenPyramid& pyr) const;

  Tensor visual_ce(const Tensor& logits, const TokenPyramid& pyr) const;

  std::vector<std::pair<std::string, Tensor>> named_params();

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor w1, b1, w2, b2;
    Tensor ada_w, ada_b;  // condition -> (s1, b1, s2, b2)
  };

  VisualDecoderConfig cfg_;
  Tensor in_w_, in_b_;     // latent_dim -> width
  Tensor pos_emb_;         // [total_cells x width]
  std::vector<Layer> layers_;
  Tensor final_ada_w_, final_ada_b_;  // condition -> (s, b) for the final norm
  Tensor head_w_;          // [width x vocab]
};

}  // namespace vgpt
