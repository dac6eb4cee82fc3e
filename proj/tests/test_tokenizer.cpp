#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "vgpt/datagen.hpp"
#include "vgpt/image_io.hpp"
#include "vgpt/tokenizer.hpp"

using namespace vgpt;
namespace fs = std::filesystem;

namespace {

TokenizerConfig small_cfg() {
  TokenizerConfig cfg;
  cfg.image_size = 32;
  cfg.downsample = 16;
  cfg.latent_dim = 8;
  cfg.vocab_size = 32;
  cfg.schedule = ScaleSchedule{{1, 2}};
  return cfg;
}

std::vector<Image> small_corpus(int n, int image_size) {
  auto pairs = build_synthetic_pairs(n, image_size, 99);
  std::vector<Image> images;
  for (auto& p : pairs) images.push_back(p.image);
  return images;
}

}  // namespace

TEST_CASE("nearest code matches a brute-force argmin with lowest-index ties") {
  Rng rng(21);
  const int vocab = 16, dim = 4;
  Tensor codebook = Tensor::gaussian(rng, {vocab, dim}, 1.0f);
  // force an exact tie: rows 5 and 11 identical
  for (int d = 0; d < dim; ++d)
    codebook.mutable_data()[11 * dim + d] = codebook.data()[5 * dim + d];

  for (int trial = 0; trial < 200; ++trial) {
    float cell[dim];
    for (int d = 0; d < dim; ++d) cell[d] = static_cast<float>(rng.gaussian());
    int got = nearest_code(cell, codebook, dim);
    int want = 0;
    double best = 1e300;
    for (int c = 0; c < vocab; ++c) {
      double dist = 0;
      for (int d = 0; d < dim; ++d) {
        double diff = static_cast<double>(cell[d]) - codebook.data()[static_cast<size_t>(c) * dim + d];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        want = c;
      }
    }
    CHECK(got == want);
  }
  // querying a tied row itself picks the lower index
  CHECK(nearest_code(codebook.data().data() + 5 * 4, codebook, 4) == 5);
}

TEST_CASE("schedule accounting and validation") {
  ScaleSchedule s{{1, 2, 4}};
  CHECK(s.scales() == 3);
  CHECK(s.latent_side() == 4);
  CHECK(s.total_cells() == 21);
  CHECK_NOTHROW(s.validate());
  CHECK_THROWS(ScaleSchedule{{2, 2}}.validate());
  CHECK_THROWS(ScaleSchedule{{4, 2}}.validate());
  CHECK_THROWS(ScaleSchedule{{}}.validate());
  CHECK_THROWS(ScaleSchedule{{0, 2}}.validate());
}

TEST_CASE("encode produces a pyramid shaped by the schedule, decode an image") {
  Rng rng(31);
  TokenizerConfig cfg = small_cfg();
  Tokenizer tok(cfg, rng);
  Image img = small_corpus(1, cfg.image_size)[0];

  TokenPyramid pyr = tok.encode(img);
  REQUIRE(pyr.maps.size() == 2);
  CHECK(pyr.maps[0].size() == 1);
  CHECK(pyr.maps[1].size() == 4);
  for (const auto& m : pyr.maps)
    for (int id : m) {
      CHECK(id >= 0);
      CHECK(id < cfg.vocab_size);
    }

  TokenPyramid again = tok.encode(img);
  CHECK(pyr == again);  // const path is deterministic

  Image out = tok.decode(pyr);
  CHECK(out.h == cfg.image_size);
  CHECK(out.w == cfg.image_size);
  for (float v : out.rgb) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("partial latent is cumulative and complete at the last scale") {
  Rng rng(33);
  TokenizerConfig cfg = small_cfg();
  Tokenizer tok(cfg, rng);
  Image img = small_corpus(2, cfg.image_size)[1];
  TokenPyramid pyr = tok.encode(img);

  NoGradGuard ng;
  Tensor zero = tok.partial_latent(pyr, 0);
  for (float v : zero.data()) CHECK(v == 0.0f);

  Tensor full = tok.partial_latent(pyr, pyr.schedule.scales());
  Tensor deq = tok.dequantize_pyramid(pyr);
  REQUIRE(full.data().size() == deq.data().size());
  for (size_t i = 0; i < full.data().size(); ++i) CHECK(full.data()[i] == deq.data()[i]);

  CHECK_THROWS(tok.partial_latent(pyr, pyr.schedule.scales() + 1));
}

TEST_CASE("pyramid json round trip is exact") {
  Rng rng(35);
  Tokenizer tok(small_cfg(), rng);
  Image img = small_corpus(3, 32)[2];
  TokenPyramid pyr = tok.encode(img);
  TokenPyramid back = pyramid_from_json(pyramid_to_json(pyr));
  CHECK(back == pyr);
  CHECK_THROWS(pyramid_from_json("{"));
  CHECK_THROWS(pyramid_from_json("{\"schedule\":[1,2],\"maps\":[[0]]}"));  // missing map
}

TEST_CASE("quantization records usage and reseeding revives dead entries") {
  Rng rng(37);
  TokenizerConfig cfg = small_cfg();
  Tokenizer tok(cfg, rng);
  auto images = small_corpus(4, cfg.image_size);

  NoGradGuard ng;
  std::vector<Tensor> latents;
  for (const auto& img : images) {
    Tensor lat = tok.encode_latent(img);
    tok.quantize_latent(lat);
    latents.push_back(reshape(lat, {cfg.latent_side() * cfg.latent_side(), cfg.latent_dim}));
  }
  int64_t used = 0;
  for (int64_t c : tok.usage_counts()) used += (c > 0);
  CHECK(used > 0);

  std::vector<float> before = tok.codebook().data();
  Rng reseed_rng(38);
  Tensor batch = concat_rows(latents);
  int reseeded = tok.reseed_dead_entries(reseed_rng, batch);
  CHECK(reseeded == cfg.vocab_size - used);
  if (reseeded > 0) {
    int changed = 0;
    for (int c = 0; c < cfg.vocab_size; ++c) {
      bool same = true;
      for (int d = 0; d < cfg.latent_dim; ++d)
        same &= before[static_cast<size_t>(c) * cfg.latent_dim + d] ==
                tok.codebook().data()[static_cast<size_t>(c) * cfg.latent_dim + d];
      changed += !same;
    }
    CHECK(changed == reseeded);
  }
}

TEST_CASE("vq training overfits a small corpus and survives the byte round trip") {
  Rng rng(41);
  TokenizerConfig cfg = small_cfg();
  Tokenizer tok(cfg, rng);
  auto images = small_corpus(4, cfg.image_size);

  AdamW opt(tok.trainable_params());
  VqLosses first{}, last{};
  Rng reseed_rng(42);
  for (int step = 0; step < 4000; ++step) {
    VqLosses l = vq_train_step(tok, images, opt, 2e-3f, 0.25f);
    if (step == 0) first = l;
    last = l;
    CHECK(std::isfinite(l.total));
    if (step % 50 == 49) {                  // mirror the trainer's epoch hygiene
      NoGradGuard g;
      std::vector<Tensor> rows;
      for (const auto& img : images) {
        Tensor lat = tok.encode_latent(img);
        int side = lat.dim(0);
        rows.push_back(reshape(lat, {side * side, cfg.latent_dim}));
      }
      tok.reseed_dead_entries(reseed_rng, concat_rows(rows));
    }
  }
  CHECK(last.total < first.total);

  // reconstruction error after overfit
  NoGradGuard ng;
  double mse_sum = 0;
  for (const auto& img : images) {
    TokenPyramid pyr = tok.quantize_latent_const(tok.encode_latent(img));
    Image out = tok.decode(pyr);
    double se = 0;
    for (size_t i = 0; i < img.rgb.size(); ++i) {
      double d = static_cast<double>(out.rgb[i]) - img.rgb[i];
      se += d * d;
    }
    mse_sum += se / static_cast<double>(img.rgb.size());
  }
  CHECK(mse_sum / static_cast<double>(images.size()) < 0.025);

  // pyramid -> image -> ppm bytes -> image -> pyramid: cells nearly stable
  int agree = 0, total = 0;
  for (const auto& img : images) {
    TokenPyramid pyr = tok.encode(img);
    Image decoded = tok.decode(pyr);
    Image back = decode_ppm(encode_ppm(decoded));
    TokenPyramid pyr2 = tok.encode(back);
    for (size_t k = 0; k < pyr.maps.size(); ++k)
      for (size_t i = 0; i < pyr.maps[k].size(); ++i) {
        agree += pyr.maps[k][i] == pyr2.maps[k][i];
        ++total;
      }
  }
  CHECK(total - agree <= total * 2 / 100);
}

TEST_CASE("tokenizer parameters freeze and thaw as one unit") {
  Rng rng(43);
  Tokenizer tok(small_cfg(), rng);
  tok.set_frozen(true);
  for (auto& [name, t] : tok.named_params()) {
    INFO(name);
    CHECK_FALSE(t.requires_grad());
  }
  tok.set_frozen(false);
  for (auto& [name, t] : tok.named_params()) CHECK(t.requires_grad());
  CHECK(tok.trainable_params().size() == tok.named_params().size());
}

TEST_CASE("config validation rejects inconsistent geometry") {
  TokenizerConfig cfg = small_cfg();
  CHECK_NOTHROW(cfg.validate());
  TokenizerConfig bad = cfg;
  bad.schedule = ScaleSchedule{{1, 3}};  // last scale != latent side
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.image_size = 30;  // not divisible by downsample
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.vocab_size = 0;
  CHECK_THROWS(bad.validate());
}
