#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "vgpt/model.hpp"

namespace fs = std::filesystem;
using namespace vgpt;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.tokenizer.image_size = 32;
  cfg.tokenizer.downsample = 16;
  cfg.tokenizer.latent_dim = 8;
  cfg.tokenizer.vocab_size = 16;
  cfg.tokenizer.schedule = ScaleSchedule{{1, 2}};
  cfg.backbone.layers = 2;
  cfg.backbone.heads = 2;
  cfg.backbone.width = 32;
  cfg.backbone.ffn_mult = 2;
  cfg.backbone.text_vocab = 512;
  cfg.backbone.max_seq = 128;
  cfg.decoder.layers = 2;
  cfg.decoder.heads = 2;
  cfg.decoder.width = 32;
  cfg.decoder.vocab_size = cfg.tokenizer.vocab_size;
  cfg.decoder.latent_dim = cfg.tokenizer.latent_dim;
  cfg.decoder.schedule = cfg.tokenizer.schedule;
  cfg.vision_patch = 16;
  cfg.vision_dim = 12;
  return cfg;
}

std::string temp_path(const std::string& stem) {
  fs::path dir = fs::temp_directory_path() / "vgpt_tests" / "model_io";
  fs::create_directories(dir);
  return (dir / stem).string();
}

Image noise_image(int side, uint64_t seed) {
  Image img;
  img.h = side;
  img.w = side;
  img.rgb.resize(static_cast<size_t>(side) * side * 3);
  Rng rng(seed);
  for (float& v : img.rgb) v = static_cast<float>(rng.uniform());
  return img;
}

TokenPyramid zero_pyramid(const ScaleSchedule& sched) {
  TokenPyramid pyr;
  pyr.schedule = sched;
  for (int r : sched.rs) pyr.maps.emplace_back(static_cast<size_t>(r) * r, 0);
  return pyr;
}

bool rows_equal(const Tensor& a, const Tensor& b, int row_a, int row_b, int width) {
  return std::memcmp(a.data().data() + static_cast<size_t>(row_a) * width,
                     b.data().data() + static_cast<size_t>(row_b) * width,
                     sizeof(float) * static_cast<size_t>(width)) == 0;
}

}  // namespace

TEST_CASE("weight groups enumerate every module exactly once") {
  std::vector<std::string> want{"llm",          "visual_decoder", "proj_understand",
                                "proj_gen_in",  "proj_gen_out",   "vision_encoder",
                                "tokenizer"};
  CHECK(kModelGroups == want);

  ModelBundle bundle(tiny_cfg(), 42);
  // registry lists params grouped contiguously, in declared group order
  size_t gi = 0;
  for (size_t i = 0; i < bundle.registry().size(); ++i) {
    const auto& p = bundle.registry()[i];
    while (gi < want.size() && p.group != want[gi]) ++gi;
    REQUIRE(gi < want.size());
  }
  for (const auto& g : want) {
    bool any = false;
    for (const auto& p : bundle.registry()) any = any || p.group == g;
    INFO("group " << g);
    CHECK(any);
  }
  // (group, name) pairs are unique
  for (size_t i = 0; i < bundle.registry().size(); ++i)
    for (size_t j = i + 1; j < bundle.registry().size(); ++j)
      CHECK((bundle.registry()[i].group != bundle.registry()[j].group ||
             bundle.registry()[i].name != bundle.registry()[j].name));
}

TEST_CASE("trainable group selection flags exactly the requested params") {
  ModelBundle bundle(tiny_cfg(), 42);
  bundle.set_trainable_groups({"proj_gen_in", "proj_gen_out"});
  size_t flagged = 0, in_groups = 0;
  for (const auto& p : bundle.registry()) {
    bool member = p.group == "proj_gen_in" || p.group == "proj_gen_out";
    if (member) ++in_groups;
    if (p.tensor.requires_grad()) ++flagged;
    CHECK(p.tensor.requires_grad() == member);
  }
  CHECK(flagged == in_groups);
  CHECK(bundle.trainable_params().size() == in_groups);

  bundle.set_trainable_groups({});
  for (const auto& p : bundle.registry()) CHECK_FALSE(p.tensor.requires_grad());
  CHECK(bundle.trainable_params().empty());

  CHECK_THROWS(bundle.set_trainable_groups({"projector"}));
}

TEST_CASE("group digests detect mutation and match across same-seed bundles") {
  ModelBundle a(tiny_cfg(), 7);
  ModelBundle b(tiny_cfg(), 7);
  ModelBundle c(tiny_cfg(), 8);
  for (const auto& g : kModelGroups) {
    CHECK(a.group_hash(g) == b.group_hash(g));
    CHECK(a.group_hash(g) != c.group_hash(g));
  }
  Sha256 before = a.group_hash("llm");
  Sha256 other = a.group_hash("tokenizer");
  for (const auto& p : a.registry()) {
    if (p.group == "llm") {
      Tensor t = p.tensor;  // handle copy shares storage
      t.mutable_data()[0] += 1.0f;
      break;
    }
  }
  CHECK(a.group_hash("llm") != before);
  CHECK(a.group_hash("tokenizer") == other);
  CHECK_THROWS(a.group_hash("nope"));
}

TEST_CASE("bundle checkpoints round trip bit for bit") {
  ModelBundle a(tiny_cfg(), 101);
  std::string path = temp_path("bundle.ckpt");
  a.save(path);

  CkptFile file = load_checkpoint(path);
  CHECK(file.meta.at("schema") == "model-bundle");
  ModelConfig parsed = model_config_from_json(file.meta.at("config"));
  CHECK(parsed.backbone.width == tiny_cfg().backbone.width);

  ModelBundle b(tiny_cfg(), 202);
  for (const auto& g : kModelGroups) CHECK(a.group_hash(g) != b.group_hash(g));
  b.load(path);
  for (const auto& g : kModelGroups) CHECK(a.group_hash(g) == b.group_hash(g));
  fs::remove(path);
}

TEST_CASE("applying checkpoint entries is strict about coverage and shape") {
  ModelBundle a(tiny_cfg(), 11);
  ModelBundle b(tiny_cfg(), 12);

  auto entries = a.collect_entries();
  CHECK_NOTHROW(b.apply_entries(entries));

  auto missing = entries;
  missing.pop_back();
  CHECK_THROWS(b.apply_entries(missing));

  auto renamed = entries;
  renamed[0].name += "_x";
  CHECK_THROWS(b.apply_entries(renamed));

  auto reshaped = entries;
  reshaped[0].shape[0] += 1;
  CHECK_THROWS(b.apply_entries(reshaped));

  auto doubled = entries;
  doubled.push_back(entries[0]);
  CHECK_THROWS(b.apply_entries(doubled));

  auto extra = entries;
  extra.push_back({"optim", "m.0", {2}, {0.0f, 0.0f}});
  CHECK_THROWS(b.apply_entries(extra));
  CHECK_NOTHROW(b.apply_entries(extra, {"optim"}));
}

TEST_CASE("a single group can be loaded from a larger file") {
  ModelBundle a(tiny_cfg(), 21);
  ModelBundle b(tiny_cfg(), 22);
  CkptFile file;
  for (const auto& e : a.collect_entries())
    if (e.group == "tokenizer") file.entries.push_back(e);

  Sha256 llm_before = b.group_hash("llm");
  b.load_group_from(file, "tokenizer");
  CHECK(b.group_hash("tokenizer") == a.group_hash("tokenizer"));
  CHECK(b.group_hash("llm") == llm_before);

  CHECK_THROWS(b.load_group_from(file, "llm"));  // file lacks the group
  file.entries.pop_back();
  CHECK_THROWS(b.load_group_from(file, "tokenizer"));  // incomplete coverage
}

TEST_CASE("plain text streams embed straight from the token table") {
  ModelConfig cfg = tiny_cfg();
  ModelBundle bundle(cfg, 31);
  NoGradGuard ng;
  MixedStream s = render_dialogue({{"user", "hi", {}, {}}, {"assistant", "ok", {}, {}}},
                                  cfg.tokenizer.schedule, cfg.patches_per_image());
  Tensor got = assemble_embeddings(bundle, s);
  Tensor want = bundle.llm().embed_tokens(s.ids);
  CHECK(got.shape() == want.shape());
  CHECK(std::memcmp(got.data().data(), want.data().data(),
                    got.data().size() * sizeof(float)) == 0);
}

TEST_CASE("understanding placeholders are overwritten with projected vision features") {
  ModelConfig cfg = tiny_cfg();
  ModelBundle bundle(cfg, 32);
  NoGradGuard ng;
  Image img = noise_image(cfg.tokenizer.image_size, 5);
  MixedStream s = render_dialogue({{"user", "what is <image> here", img, {}},
                                   {"assistant", "a blob", {}, {}}},
                                  cfg.tokenizer.schedule, cfg.patches_per_image());
  Tensor got = assemble_embeddings(bundle, s);
  Tensor plain = bundle.llm().embed_tokens(s.ids);
  Tensor feats = bundle.proj_understand().apply(bundle.vision().encode(img));

  int patch = 0;
  for (int i = 0; i < s.size(); ++i) {
    if (s.tags[static_cast<size_t>(i)] == Seg::image_understand) {
      CHECK(rows_equal(got, feats, i, patch, cfg.backbone.width));
      ++patch;
    } else {
      CHECK(rows_equal(got, plain, i, i, cfg.backbone.width));
    }
  }
  CHECK(patch == cfg.patches_per_image());

  // payload mismatch is rejected both ways
  MixedStream extra = s;
  extra.images.push_back(img);
  CHECK_THROWS(assemble_embeddings(bundle, extra));
  MixedStream none = s;
  none.images.clear();
  CHECK_THROWS(assemble_embeddings(bundle, none));
}

TEST_CASE("generation slots keep placeholder embeddings unless rows are supplied") {
  ModelConfig cfg = tiny_cfg();
  ModelBundle bundle(cfg, 33);
  NoGradGuard ng;
  TokenPyramid pyr = zero_pyramid(cfg.tokenizer.schedule);
  MixedStream s = render_dialogue({{"user", "draw", {}, {}},
                                   {"assistant", "here <image_gen>", {}, pyr}},
                                  cfg.tokenizer.schedule, cfg.patches_per_image());
  REQUIRE(s.gen_slot_spans.size() == 1);
  auto [start, len] = s.gen_slot_spans[0];

  Tensor plain = bundle.llm().embed_tokens(s.ids);
  Tensor def = assemble_embeddings(bundle, s);
  CHECK(std::memcmp(def.data().data(), plain.data().data(),
                    def.data().size() * sizeof(float)) == 0);

  Rng rng(9);
  Tensor rows = Tensor::gaussian(rng, {len, cfg.backbone.width}, 1.0f);
  Tensor got = assemble_embeddings(bundle, s, {{0, rows}});
  for (int i = 0; i < s.size(); ++i) {
    if (i >= start && i < start + len) {
      CHECK(rows_equal(got, rows, i, i - start, cfg.backbone.width));
    } else {
      CHECK(rows_equal(got, plain, i, i, cfg.backbone.width));
    }
  }

  Tensor bad = Tensor::gaussian(rng, {len + 1, cfg.backbone.width}, 1.0f);
  CHECK_THROWS(assemble_embeddings(bundle, s, {{0, bad}}));
  CHECK_THROWS(assemble_embeddings(bundle, s, {{1, rows}}));
  CHECK_THROWS(assemble_embeddings(bundle, s, {{-1, rows}}));
}

TEST_CASE("streams longer than the backbone window are rejected") {
  ModelConfig cfg = tiny_cfg();
  ModelBundle bundle(cfg, 34);
  NoGradGuard ng;
  std::string long_text(cfg.backbone.max_seq, 'a');
  MixedStream s = render_dialogue({{"user", long_text, {}, {}}, {"assistant", "x", {}, {}}},
                                  cfg.tokenizer.schedule, cfg.patches_per_image());
  CHECK(s.size() > cfg.backbone.max_seq);
  CHECK_THROWS(assemble_embeddings(bundle, s));
}
