#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vgpt/model.hpp"
#include "vgpt/rng.hpp"
#include "vgpt/stream.hpp"
#include "vgpt/tensor.hpp"
#include "vgpt/tokenizer.hpp"

namespace vgpt {

struct SamplerConfig {
  int top_k = 900;        // clamped to the vocabulary size
  float top_p = 0.95f;    // smallest prefix of the sorted probs reaching this mass
  float cfg_lambda = 1.5f;
  uint64_t seed = 0;
};

// Softmax (double precision, max-shifted), keep the top_k most probable
// entries, then the shortest prob-descending prefix with mass >= top_p
// (ties broken by lower index), renormalize, and draw by inverse CDF with
// one uniform. top_k <= 0 or top_p outside (0, 1] throws.
int sample_from_logits(const std::vector<float>& logits, int top_k, float top_p, Rng& rng);

// Scale-by-scale pyramid sampling with classifier-free guidance.
// cond_hidden: backbone hidden rows at the trigger position(s),
// [cond_rows x backbone width]. The unconditional branch replaces
// cond_hidden with Gaussian noise drawn once per call; guided logits are
// (1 + lambda) * cond - lambda * uncond, combined before the softmax.
// Consumes two child streams of rng (noise, cells) regardless of lambda, so
// a lambda of zero reproduces the unguided sample bit for bit.
TokenPyramid generate_pyramid(const ModelBundle& bundle, const Tensor& cond_hidden,
                              const SamplerConfig& cfg, Rng& rng);

// Features for the <image_gen> slot positions after a pyramid is complete:
// conditional-branch decoder hidden rows, mapped back to backbone width.
// [total_cells x backbone width]
Tensor decoder_slot_features(const ModelBundle& bundle, const Tensor& cond_hidden,
                             const TokenPyramid& pyr);

struct DecodeResult {
  MixedStream stream;                 // prompt plus everything emitted
  std::string text;                   // emitted assistant text (markers canonicalized)
  std::vector<TokenPyramid> pyramids;  // emitted images, token form
  std::vector<Image> images;           // emitted images, decoded
  bool hit_eos = false;
};

// Autoregressive mixed decode: text tokens sample from byte ids, EOS and the
// generation trigger (all other specials are masked out); the trigger emits a
// whole bracketed span atomically, sampling the pyramid under CFG and filling
// the slot embeddings from the decoder for subsequent text. Stops at EOS or
// after max_new_tokens appended ids; a triggered span that cannot fit in the
// remaining budget aborts with an error. forced_prefix ids are consumed in
// place of the first sampled tokens (they route identically but draw nothing
// from the RNG) — the deterministic-trigger hook for tests.
DecodeResult decode_mixed(const ModelBundle& bundle, const MixedStream& prompt,
                          const SamplerConfig& cfg, int max_new_tokens,
                          const std::vector<int>& forced_prefix = {});

}  // namespace vgpt
