#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "vgpt/sampler.hpp"

using namespace vgpt;

namespace {

ModelConfig tiny_model_cfg() {
  ModelConfig cfg;
  cfg.tokenizer.image_size = 32;
  cfg.tokenizer.downsample = 16;
  cfg.tokenizer.latent_dim = 8;
  cfg.tokenizer.vocab_size = 32;
  cfg.tokenizer.schedule = ScaleSchedule{{1, 2}};
  cfg.backbone.layers = 2;
  cfg.backbone.heads = 2;
  cfg.backbone.width = 48;
  cfg.backbone.ffn_mult = 2;
  cfg.backbone.text_vocab = 512;
  cfg.backbone.max_seq = 256;
  cfg.decoder.layers = 2;
  cfg.decoder.heads = 2;
  cfg.decoder.width = 32;
  cfg.decoder.vocab_size = cfg.tokenizer.vocab_size;
  cfg.decoder.latent_dim = cfg.tokenizer.latent_dim;
  cfg.decoder.schedule = cfg.tokenizer.schedule;
  cfg.vision_patch = 16;
  cfg.vision_dim = 16;
  return cfg;
}

// independent reference for the documented selection rule
int oracle_sample(const std::vector<float>& logits, int top_k, float top_p, double u) {
  int n = static_cast<int>(logits.size());
  double mx = logits[0];
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(n);
  double z = 0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (p[a] != p[b]) return p[a] > p[b];
    return a < b;
  });
  int keep = std::min(top_k, n);
  double mass = 0;
  int kept = 0;
  for (int i = 0; i < keep; ++i) {
    mass += p[order[i]];
    kept = i + 1;
    if (mass >= static_cast<double>(top_p)) break;
  }
  double target = u * mass;
  double cum = 0;
  for (int i = 0; i < kept; ++i) {
    cum += p[order[i]];
    if (target < cum) return order[i];
  }
  return order[kept - 1];
}

}  // namespace

TEST_CASE("sampling agrees with an independent top-k/top-p oracle") {
  Rng logit_rng(101);
  for (int trial = 0; trial < 300; ++trial) {
    int n = 2 + static_cast<int>(logit_rng.below(10));
    std::vector<float> logits(n);
    for (float& v : logits) v = static_cast<float>(logit_rng.gaussian() * 2.0);
    int top_k = 1 + static_cast<int>(logit_rng.below(static_cast<uint64_t>(n)));
    float top_p = trial % 3 == 0 ? 1.0f : 0.3f + 0.7f * static_cast<float>(logit_rng.uniform());

    uint64_t seed = derive_seed(55, "sample-trial", static_cast<uint64_t>(trial));
    Rng a(seed), b(seed);
    int got = sample_from_logits(logits, top_k, top_p, a);
    int want = oracle_sample(logits, top_k, top_p, b.uniform());
    CHECK(got == want);
  }
}

TEST_CASE("greedy settings take the argmax with lowest-index ties") {
  Rng rng(103);
  std::vector<float> logits{0.5f, 2.0f, 2.0f, -1.0f};
  CHECK(sample_from_logits(logits, 1, 1.0f, rng) == 1);
  std::vector<float> flat(5, 0.25f);
  CHECK(sample_from_logits(flat, 1, 1.0f, rng) == 0);
  // tiny top_p keeps at least the argmax
  CHECK(sample_from_logits(logits, 4, 1e-9f, rng) == 1);
}

TEST_CASE("degenerate sampling arguments throw") {
  Rng rng(105);
  std::vector<float> logits{1.0f, 2.0f};
  CHECK_THROWS(sample_from_logits({}, 1, 1.0f, rng));
  CHECK_THROWS(sample_from_logits(logits, 0, 1.0f, rng));
  CHECK_THROWS(sample_from_logits(logits, 1, 0.0f, rng));
  CHECK_THROWS(sample_from_logits(logits, 1, 1.5f, rng));
}

TEST_CASE("unrestricted sampling reproduces the softmax distribution within 3 sigma") {
  const int vocab = 8, draws = 100000;
  Rng logit_rng(107);
  std::vector<float> logits(vocab);
  for (float& v : logits) v = static_cast<float>(logit_rng.gaussian());

  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(vocab);
  double z = 0;
  for (int i = 0; i < vocab; ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;

  std::vector<int> counts(vocab, 0);
  Rng rng(108);
  for (int d = 0; d < draws; ++d) ++counts[static_cast<size_t>(sample_from_logits(logits, vocab, 1.0f, rng))];

  for (int i = 0; i < vocab; ++i) {
    double expect = draws * p[i];
    double sigma = std::sqrt(draws * p[i] * (1.0 - p[i]));
    INFO("bucket " << i);
    CHECK(std::fabs(counts[i] - expect) <= 3.0 * sigma);
  }
}

TEST_CASE("zero guidance reproduces the unguided pyramid bit for bit") {
  ModelConfig mc = tiny_model_cfg();
  ModelBundle bundle(mc, 777);
  NoGradGuard ng;

  Rng crng(9);
  Tensor cond = Tensor::gaussian(crng, {1, mc.backbone.width}, 1.0f);
  SamplerConfig sc;
  sc.top_k = 5;
  sc.top_p = 0.9f;
  sc.cfg_lambda = 0.0f;

  Rng r1(4242);
  TokenPyramid guided = generate_pyramid(bundle, cond, sc, r1);

  // unguided replica: identical split discipline, conditional branch only
  Rng r2(4242);
  Rng noise = r2.split();
  (void)noise;
  Rng cells = r2.split();
  const Tokenizer& tok = bundle.tokenizer();
  const VisualDecoder& dec = bundle.decoder();
  Tensor cond_dec = bundle.proj_gen_in().apply(cond);
  TokenPyramid pyr;
  pyr.schedule = mc.tokenizer.schedule;
  for (int k = 0; k < pyr.schedule.scales(); ++k) {
    int r = pyr.schedule.rs[static_cast<size_t>(k)];
    std::vector<Tensor> contents;
    for (int j = 0; j <= k; ++j) {
      int rj = pyr.schedule.rs[static_cast<size_t>(j)];
      if (j == 0) {
        contents.push_back(Tensor::zeros({rj * rj, mc.tokenizer.latent_dim}));
      } else {
        Tensor partial = tok.partial_latent(pyr, j);
        contents.push_back(reshape(bilinear_resize(partial, rj, rj), {rj * rj, mc.tokenizer.latent_dim}));
      }
    }
    Tensor logits = dec.forward(dec.assemble_inputs(cond_dec, contents)).logits;
    int row0 = 1;
    for (int j = 0; j < k; ++j) row0 += pyr.schedule.rs[static_cast<size_t>(j)] * pyr.schedule.rs[static_cast<size_t>(j)];
    std::vector<int> map;
    for (int cell = 0; cell < r * r; ++cell) {
      const float* lrow = logits.data().data() + static_cast<size_t>(row0 + cell) * mc.tokenizer.vocab_size;
      std::vector<float> row(lrow, lrow + mc.tokenizer.vocab_size);
      map.push_back(sample_from_logits(row, sc.top_k, sc.top_p, cells));
    }
    pyr.maps.push_back(std::move(map));
  }
  CHECK(guided == pyr);
}

TEST_CASE("large guidance converges to the argmax of the branch difference") {
  ModelConfig mc = tiny_model_cfg();
  ModelBundle bundle(mc, 778);
  NoGradGuard ng;
  Rng crng(10);
  Tensor cond = Tensor::gaussian(crng, {1, mc.backbone.width}, 1.0f);

  auto run = [&](float lambda) {
    SamplerConfig sc;
    sc.top_k = 1;  // greedy isolates the combined-logit argmax
    sc.top_p = 1.0f;
    sc.cfg_lambda = lambda;
    Rng r(31337);
    return generate_pyramid(bundle, cond, sc, r);
  };

  // greedy replica choosing argmax(l_cond - l_uncond) per cell
  Rng r2(31337);
  Rng noise_rng = r2.split();
  const Tokenizer& tok = bundle.tokenizer();
  const VisualDecoder& dec = bundle.decoder();
  Tensor cond_dec = bundle.proj_gen_in().apply(cond);
  std::vector<float> nz(static_cast<size_t>(mc.backbone.width));
  for (float& v : nz) v = static_cast<float>(noise_rng.gaussian());
  Tensor uncond_dec = bundle.proj_gen_in().apply(Tensor::from_data({1, mc.backbone.width}, nz));
  TokenPyramid want;
  want.schedule = mc.tokenizer.schedule;
  for (int k = 0; k < want.schedule.scales(); ++k) {
    int r = want.schedule.rs[static_cast<size_t>(k)];
    std::vector<Tensor> contents;
    for (int j = 0; j <= k; ++j) {
      int rj = want.schedule.rs[static_cast<size_t>(j)];
      if (j == 0) {
        contents.push_back(Tensor::zeros({rj * rj, mc.tokenizer.latent_dim}));
      } else {
        Tensor partial = tok.partial_latent(want, j);
        contents.push_back(reshape(bilinear_resize(partial, rj, rj), {rj * rj, mc.tokenizer.latent_dim}));
      }
    }
    Tensor lc = dec.forward(dec.assemble_inputs(cond_dec, contents)).logits;
    Tensor lu = dec.forward(dec.assemble_inputs(uncond_dec, contents)).logits;
    int row0 = 1;
    for (int j = 0; j < k; ++j) row0 += want.schedule.rs[static_cast<size_t>(j)] * want.schedule.rs[static_cast<size_t>(j)];
    std::vector<int> map;
    for (int cell = 0; cell < r * r; ++cell) {
      const float* rc = lc.data().data() + static_cast<size_t>(row0 + cell) * mc.tokenizer.vocab_size;
      const float* ru = lu.data().data() + static_cast<size_t>(row0 + cell) * mc.tokenizer.vocab_size;
      int best = 0;
      double best_v = -1e300;
      for (int v = 0; v < mc.tokenizer.vocab_size; ++v) {
        double diff = static_cast<double>(rc[v]) - static_cast<double>(ru[v]);
        if (diff > best_v) {
          best_v = diff;
          best = v;
        }
      }
      map.push_back(best);
    }
    want.maps.push_back(std::move(map));
  }

  CHECK(run(1e6f) == want);
  // moderate guidance still samples a valid pyramid of the right shape
  TokenPyramid mid = run(1.5f);
  CHECK(mid.schedule.rs == want.schedule.rs);
}

TEST_CASE("mixed decode with a forced trigger emits a validated bracketed image") {
  ModelConfig mc = tiny_model_cfg();
  ModelBundle bundle(mc, 779);
  MixedStream prompt = render_prompt({{"user", "draw one", {}, {}}},
                                     mc.tokenizer.schedule, mc.patches_per_image());
  SamplerConfig sc;
  sc.top_k = 40;
  sc.top_p = 0.95f;
  sc.cfg_lambda = 1.0f;
  sc.seed = 2024;

  DecodeResult res = decode_mixed(bundle, prompt, sc, 48, {tok_id::kImageGenStart});
  CHECK(res.images.size() == 1);
  CHECK(res.pyramids.size() == 1);
  CHECK(res.images[0].h == mc.tokenizer.image_size);
  CHECK_NOTHROW(res.stream.validate(mc.tokenizer.schedule));
  CHECK(res.text.find("<image_gen>") != std::string::npos);

  // determinism at equal seeds
  DecodeResult again = decode_mixed(bundle, prompt, sc, 48, {tok_id::kImageGenStart});
  CHECK(again.stream.ids == res.stream.ids);
  CHECK(again.pyramids[0] == res.pyramids[0]);
  CHECK(again.images[0].rgb == res.images[0].rgb);

  // a budget too small for the span must refuse rather than truncate
  CHECK_THROWS(decode_mixed(bundle, prompt, sc, 3, {tok_id::kImageGenStart}));
}

TEST_CASE("decode stops at the token budget when nothing triggers") {
  ModelConfig mc = tiny_model_cfg();
  ModelBundle bundle(mc, 780);
  MixedStream prompt = render_prompt({{"user", "hi", {}, {}}},
                                     mc.tokenizer.schedule, mc.patches_per_image());
  SamplerConfig sc;
  sc.top_k = 5;
  sc.top_p = 1.0f;
  sc.cfg_lambda = 0.0f;
  sc.seed = 11;
  DecodeResult res = decode_mixed(bundle, prompt, sc, 10, {});
  CHECK(res.stream.size() <= prompt.size() + 10);
  CHECK_NOTHROW(res.stream.validate(mc.tokenizer.schedule));
}
