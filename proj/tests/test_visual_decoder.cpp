#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "vgpt/visual_decoder.hpp"

using namespace vgpt;

namespace {

VisualDecoderConfig small_cfg() {
  VisualDecoderConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 32;
  cfg.vocab_size = 32;
  cfg.latent_dim = 8;
  cfg.schedule = ScaleSchedule{{1, 2}};
  cfg.adaln = true;
  return cfg;
}

TokenizerConfig small_tok_cfg() {
  TokenizerConfig cfg;
  cfg.image_size = 32;
  cfg.downsample = 16;
  cfg.latent_dim = 8;
  cfg.vocab_size = 32;
  cfg.schedule = ScaleSchedule{{1, 2}};
  return cfg;
}

TokenPyramid random_pyramid(const ScaleSchedule& s, int vocab, Rng& rng) {
  TokenPyramid pyr;
  pyr.schedule = s;
  for (int r : s.rs) {
    std::vector<int> map(static_cast<size_t>(r) * r);
    for (int& id : map) id = static_cast<int>(rng.below(static_cast<uint64_t>(vocab)));
    pyr.maps.push_back(std::move(map));
  }
  return pyr;
}

}  // namespace

TEST_CASE("block-causal mask equals brute-force block comparison for every schedule up to 8") {
  // every strictly increasing schedule whose scales are a subset of {1..8}
  int checked = 0;
  for (int bits = 1; bits < 256; ++bits) {
    ScaleSchedule s;
    for (int r = 1; r <= 8; ++r)
      if (bits & (1 << (r - 1))) s.rs.push_back(r);
    for (int cond_rows : {1, 2}) {
      BlockCausalMask m = build_block_causal_mask(s, cond_rows);
      int t = cond_rows + s.total_cells();
      REQUIRE(m.t == t);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) {
          bool want = block_of(j, s, cond_rows) <= block_of(i, s, cond_rows);
          if (m.at(i, j) != want) {
            FAIL("mask mismatch at (" << i << "," << j << ") schedule bits " << bits);
          }
        }
      ++checked;
    }
  }
  CHECK(checked == 255 * 2);
}

TEST_CASE("block ids follow condition-then-scales layout") {
  ScaleSchedule s{{1, 2, 4}};
  CHECK(block_of(0, s) == 0);
  CHECK(block_of(1, s) == 1);
  CHECK(block_of(2, s) == 2);
  CHECK(block_of(5, s) == 2);
  CHECK(block_of(6, s) == 3);
  CHECK(block_of(21, s) == 3);
  CHECK_THROWS(block_of(22, s));
  CHECK_THROWS(block_of(-1, s));
  CHECK(block_of(1, s, 2) == 0);  // second condition row
  CHECK(block_of(2, s, 2) == 1);
}

TEST_CASE("later-block perturbations never change earlier-block logits, bit for bit") {
  Rng rng(61);
  VisualDecoderConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 32;
  cfg.vocab_size = 32;
  cfg.latent_dim = 8;
  cfg.schedule = ScaleSchedule{{1, 2, 4}};
  VisualDecoder dec(cfg, rng);
  NoGradGuard ng;

  int t = 1 + cfg.schedule.total_cells();
  std::vector<int> block_end;  // first row of each block after the condition
  for (int trial = 0; trial < 50; ++trial) {
    Rng tr(derive_seed(2000, "decoder-trial", static_cast<uint64_t>(trial)));
    Tensor inputs = Tensor::gaussian(tr, {t, cfg.width}, 1.0f);
    Tensor base = dec.forward(inputs).logits;

    // perturb all rows of blocks after a random cut block (1..K-1)
    int cut_block = 1 + static_cast<int>(tr.below(static_cast<uint64_t>(cfg.schedule.scales() - 1)));
    int cut_row = 1;
    for (int k = 1; k <= cut_block; ++k) cut_row += cfg.schedule.rs[k - 1] * cfg.schedule.rs[k - 1];
    Tensor mutated = Tensor::from_data(inputs.shape(), inputs.data());
    for (int i = cut_row; i < t; ++i)
      for (int j = 0; j < cfg.width; ++j)
        mutated.mutable_data()[static_cast<size_t>(i) * cfg.width + j] += static_cast<float>(tr.gaussian());
    Tensor out = dec.forward(mutated).logits;
    CHECK(std::memcmp(base.data().data(), out.data().data(),
                      sizeof(float) * static_cast<size_t>(cut_row) * cfg.vocab_size) == 0);
  }
}

TEST_CASE("whole-block truncation reproduces the same leading logits") {
  Rng rng(67);
  VisualDecoderConfig cfg = small_cfg();
  cfg.schedule = ScaleSchedule{{1, 2, 4}};
  VisualDecoder dec(cfg, rng);
  NoGradGuard ng;
  int t = 1 + cfg.schedule.total_cells();
  Tensor inputs = Tensor::gaussian(rng, {t, cfg.width}, 0.9f);
  Tensor full = dec.forward(inputs).logits;
  for (int keep_scales : {1, 2}) {
    int rows = 1;
    for (int k = 0; k < keep_scales; ++k) rows += cfg.schedule.rs[k] * cfg.schedule.rs[k];
    Tensor part = dec.forward(slice_rows(inputs, 0, rows)).logits;
    CHECK(std::memcmp(full.data().data(), part.data().data(),
                      sizeof(float) * static_cast<size_t>(rows) * cfg.vocab_size) == 0);
  }
}

TEST_CASE("permuting rows within one block permutes its logits and leaves others bit-identical") {
  Rng rng(71);
  VisualDecoderConfig cfg = small_cfg();
  cfg.schedule = ScaleSchedule{{1, 2, 4}};
  VisualDecoder dec(cfg, rng);
  NoGradGuard ng;

  int t = 1 + cfg.schedule.total_cells();  // 1 + 1 + 4 + 16
  Tensor inputs = Tensor::gaussian(rng, {t, cfg.width}, 1.0f);
  Tensor base = dec.forward(inputs).logits;

  // permute the 4 rows of block 2 (rows 2..5)
  std::vector<int> perm{3, 0, 2, 1};
  Tensor mutated = Tensor::from_data(inputs.shape(), inputs.data());
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < cfg.width; ++j)
      mutated.mutable_data()[static_cast<size_t>(2 + i) * cfg.width + j] =
          inputs.data()[static_cast<size_t>(2 + perm[i]) * cfg.width + j];
  Tensor out = dec.forward(mutated).logits;

  auto row = [&](const Tensor& m, int i) { return m.data().data() + static_cast<size_t>(i) * cfg.vocab_size; };
  size_t row_bytes = sizeof(float) * cfg.vocab_size;
  // blocks 0..1 (rows 0..1) unchanged
  CHECK(std::memcmp(row(base, 0), row(out, 0), 2 * row_bytes) == 0);
  // block 2's logits permuted the same way
  for (int i = 0; i < 4; ++i) CHECK(std::memcmp(row(base, 2 + perm[i]), row(out, 2 + i), row_bytes) == 0);
  // block 3 sees the same set of rows: identical logits
  CHECK(std::memcmp(row(base, 6), row(out, 6), 16 * row_bytes) == 0);
}

TEST_CASE("teacher contents feed the cumulative latent of earlier scales") {
  Rng rng(73);
  Tokenizer tok(small_tok_cfg(), rng);
  VisualDecoder dec(small_cfg(), rng);
  Rng pr(74);
  TokenPyramid pyr = random_pyramid(ScaleSchedule{{1, 2}}, 32, pr);

  NoGradGuard ng;
  std::vector<Tensor> contents = dec.teacher_contents(tok, pyr);
  REQUIRE(contents.size() == 2);
  CHECK(contents[0].shape() == Shape{1, 8});
  CHECK(contents[1].shape() == Shape{4, 8});
  for (float v : contents[0].data()) CHECK(v == 0.0f);  // nothing precedes scale 1

  Tensor partial = tok.partial_latent(pyr, 1);  // [2, 2, 8] at latent side
  Tensor expect = reshape(bilinear_resize(partial, 2, 2), {4, 8});
  for (size_t i = 0; i < expect.data().size(); ++i)
    CHECK(contents[1].data()[i] == expect.data()[i]);
}

TEST_CASE("visual cross-entropy equals a double-precision oracle") {
  Rng rng(79);
  VisualDecoderConfig cfg = small_cfg();
  VisualDecoder dec(cfg, rng);
  Rng pr(80);
  TokenPyramid pyr = random_pyramid(cfg.schedule, cfg.vocab_size, pr);

  int t = 1 + cfg.schedule.total_cells();
  Tensor inputs = Tensor::gaussian(rng, {t, cfg.width}, 1.0f);
  VisualDecoder::Output out = dec.forward(inputs);
  Tensor ce = dec.visual_ce(out.logits, pyr);

  // oracle: mean over cells of -log softmax(logits_row)[target]
  std::vector<int> flat;
  for (const auto& m : pyr.maps) flat.insert(flat.end(), m.begin(), m.end());
  double total = 0;
  for (size_t cell = 0; cell < flat.size(); ++cell) {
    const float* row = out.logits.data().data() + (1 + cell) * cfg.vocab_size;
    double mx = row[0];
    for (int j = 1; j < cfg.vocab_size; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0;
    for (int j = 0; j < cfg.vocab_size; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    total += -(static_cast<double>(row[flat[cell]]) - mx - std::log(denom));
  }
  CHECK(ce.item() == doctest::Approx(total / static_cast<double>(flat.size())).epsilon(1e-4));
}

TEST_CASE("assemble_inputs shapes rows as condition plus cells and validates arity") {
  Rng rng(83);
  VisualDecoderConfig cfg = small_cfg();
  VisualDecoder dec(cfg, rng);
  Tensor cond = Tensor::gaussian(rng, {1, cfg.width}, 1.0f);

  NoGradGuard ng;
  std::vector<Tensor> contents{Tensor::zeros({1, cfg.latent_dim}),
                               Tensor::zeros({4, cfg.latent_dim})};
  Tensor full = dec.assemble_inputs(cond, contents);
  CHECK(full.shape() == Shape{1 + 5, cfg.width});

  // incremental: only the first scale
  Tensor partial = dec.assemble_inputs(cond, {contents[0]});
  CHECK(partial.shape() == Shape{2, cfg.width});

  CHECK_THROWS(dec.assemble_inputs(Tensor::zeros({1, cfg.width + 1}), contents));
  // scale 0 content is replaced by zeros, so the shape gate bites from scale 1 on
  CHECK_THROWS(dec.assemble_inputs(cond, {contents[0], Tensor::zeros({3, cfg.latent_dim})}));
  CHECK_THROWS(dec.assemble_inputs(cond, {}));
  CHECK_THROWS(dec.assemble_inputs(cond, {contents[0], contents[1], contents[1]}));
}

TEST_CASE("the condition row modulates every block through adaptive normalization") {
  Rng rng(89);
  VisualDecoderConfig cfg = small_cfg();
  VisualDecoder dec(cfg, rng);
  NoGradGuard ng;
  int t = 1 + cfg.schedule.total_cells();
  Tensor a = Tensor::gaussian(rng, {t, cfg.width}, 1.0f);
  Tensor b = Tensor::from_data(a.shape(), a.data());
  for (int j = 0; j < cfg.width; ++j) b.mutable_data()[j] += 0.5f;  // only row 0 differs
  Tensor la = dec.forward(a).logits;
  Tensor lb = dec.forward(b).logits;
  // all scale rows should see a different conditioning signal
  bool any_diff = false;
  for (size_t i = cfg.vocab_size; i < la.data().size(); ++i) any_diff |= la.data()[i] != lb.data()[i];
  CHECK(any_diff);
}
