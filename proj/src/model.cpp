#include "vgpt/model.hpp"

#include <algorithm>
#include <cstring>
#include <set>
#include <stdexcept>

namespace vgpt {

int ModelConfig::patches_per_image() const {
  int side = tokenizer.image_size / vision_patch;
  return side * side;
}

void ModelConfig::validate() const {
  tokenizer.validate();
  backbone.validate();
  decoder.validate();
  if (decoder.vocab_size != tokenizer.vocab_size)
    throw std::invalid_argument("vgpt: model: decoder vocab != tokenizer vocab");
  if (decoder.latent_dim != tokenizer.latent_dim)
    throw std::invalid_argument("vgpt: model: decoder latent dim != tokenizer latent dim");
  if (decoder.schedule.rs != tokenizer.schedule.rs)
    throw std::invalid_argument("vgpt: model: decoder and tokenizer schedules differ");
  if (vision_patch <= 0 || tokenizer.image_size % vision_patch != 0)
    throw std::invalid_argument("vgpt: model: vision patch must divide image size");
  if (vision_dim <= 0) throw std::invalid_argument("vgpt: model: vision_dim must be positive");
}

ordered_json model_config_to_json(const ModelConfig& cfg) {
  ordered_json j;
  j["tokenizer"] = {{"image_size", cfg.tokenizer.image_size},
                    {"downsample", cfg.tokenizer.downsample},
                    {"latent_dim", cfg.tokenizer.latent_dim},
                    {"vocab_size", cfg.tokenizer.vocab_size},
                    {"schedule", cfg.tokenizer.schedule.rs}};
  j["backbone"] = {{"layers", cfg.backbone.layers},   {"heads", cfg.backbone.heads},
                   {"width", cfg.backbone.width},     {"ffn_mult", cfg.backbone.ffn_mult},
                   {"text_vocab", cfg.backbone.text_vocab}, {"max_seq", cfg.backbone.max_seq}};
  j["decoder"] = {{"layers", cfg.decoder.layers}, {"heads", cfg.decoder.heads},
                  {"width", cfg.decoder.width},   {"adaln", cfg.decoder.adaln},
                  {"cond_rows", cfg.decoder.cond_rows}};
  j["vision_patch"] = cfg.vision_patch;
  j["vision_dim"] = cfg.vision_dim;
  return j;
}

ModelConfig model_config_from_json(const ordered_json& j) {
  ModelConfig cfg;
  const auto& t = j.at("tokenizer");
  cfg.tokenizer.image_size = t.at("image_size").get<int>();
  cfg.tokenizer.downsample = t.at("downsample").get<int>();
  cfg.tokenizer.latent_dim = t.at("latent_dim").get<int>();
  cfg.tokenizer.vocab_size = t.at("vocab_size").get<int>();
  cfg.tokenizer.schedule.rs = t.at("schedule").get<std::vector<int>>();
  const auto& b = j.at("backbone");
  cfg.backbone.layers = b.at("layers").get<int>();
  cfg.backbone.heads = b.at("heads").get<int>();
  cfg.backbone.width = b.at("width").get<int>();
  cfg.backbone.ffn_mult = b.at("ffn_mult").get<int>();
  cfg.backbone.text_vocab = b.at("text_vocab").get<int>();
  cfg.backbone.max_seq = b.at("max_seq").get<int>();
  const auto& d = j.at("decoder");
  cfg.decoder.layers = d.at("layers").get<int>();
  cfg.decoder.heads = d.at("heads").get<int>();
  cfg.decoder.width = d.at("width").get<int>();
  cfg.decoder.adaln = d.at("adaln").get<bool>();
  cfg.decoder.cond_rows = d.at("cond_rows").get<int>();
  cfg.decoder.vocab_size = cfg.tokenizer.vocab_size;
  cfg.decoder.latent_dim = cfg.tokenizer.latent_dim;
  cfg.decoder.schedule = cfg.tokenizer.schedule;
  cfg.vision_patch = j.at("vision_patch").get<int>();
  cfg.vision_dim = j.at("vision_dim").get<int>();
  cfg.validate();
  return cfg;
}

const std::vector<std::string> kModelGroups = {
    "llm",        "visual_decoder", "proj_understand", "proj_gen_in",
    "proj_gen_out", "vision_encoder", "tokenizer"};

namespace {
Rng sub_rng(uint64_t seed, const char* label) { return Rng(derive_seed(seed, label)); }
}  // namespace

ModelBundle::ModelBundle(const ModelConfig& cfg, uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      tokenizer_([&] {
        Rng r = sub_rng(seed, "tokenizer");
        return Tokenizer(cfg.tokenizer, r);
      }()),
      vision_([&] {
        Rng r = sub_rng(seed, "vision_encoder");
        return VisionEncoder(cfg.tokenizer.image_size, cfg.vision_dim, r);
      }()),
      llm_([&] {
        Rng r = sub_rng(seed, "llm");
        return Backbone(cfg.backbone, r);
      }()),
      decoder_([&] {
        Rng r = sub_rng(seed, "visual_decoder");
        return VisualDecoder(cfg.decoder, r);
      }()),
      proj_understand_([&] {
        Rng r = sub_rng(seed, "proj_understand");
        return GenProjector(cfg.vision_dim, cfg.backbone.width, r);
      }()),
      proj_gen_in_([&] {
        Rng r = sub_rng(seed, "proj_gen_in");
        return GenProjector(cfg.backbone.width, cfg.decoder.width, r);
      }()),
      proj_gen_out_([&] {
        Rng r = sub_rng(seed, "proj_gen_out");
        return GenProjector(cfg.decoder.width, cfg.backbone.width, r);
      }()) {
  build_registry();
  set_trainable_groups({});
}

void ModelBundle::build_registry() {
  registry_.clear();
  auto add = [&](const std::string& group, std::vector<std::pair<std::string, Tensor>> params) {
    for (auto& [name, t] : params) registry_.push_back({group, name, t});
  };
  add("llm", llm_.named_params());
  add("visual_decoder", decoder_.named_params());
  add("proj_understand", proj_understand_.named_params());
  add("proj_gen_in", proj_gen_in_.named_params());
  add("proj_gen_out", proj_gen_out_.named_params());
  add("vision_encoder", vision_.named_params());
  add("tokenizer", tokenizer_.named_params());
}

void ModelBundle::set_trainable_groups(const std::vector<std::string>& groups) {
  for (const auto& g : groups)
    if (std::find(kModelGroups.begin(), kModelGroups.end(), g) == kModelGroups.end())
      throw std::invalid_argument("vgpt: model: unknown weight group '" + g + "'");
  trainable_ = groups;
  for (auto& p : registry_) {
    bool on = std::find(groups.begin(), groups.end(), p.group) != groups.end();
    p.tensor.set_requires_grad(on);
  }
}

std::vector<Tensor> ModelBundle::trainable_params() const {
  std::vector<Tensor> out;
  for (const auto& p : registry_)
    if (std::find(trainable_.begin(), trainable_.end(), p.group) != trainable_.end())
      out.push_back(p.tensor);
  return out;
}

Sha256 ModelBundle::group_hash(const std::string& group) const {
  std::vector<uint8_t> bytes;
  bool found = false;
  for (const auto& p : registry_) {
    if (p.group != group) continue;
    found = true;
    const auto& v = p.tensor.data();
    size_t at = bytes.size();
    bytes.resize(at + v.size() * sizeof(float));
    std::memcpy(bytes.data() + at, v.data(), v.size() * sizeof(float));
  }
  if (!found) throw std::invalid_argument("vgpt: model: unknown weight group '" + group + "'");
  return sha256(bytes);
}

std::vector<CkptEntry> ModelBundle::collect_entries() const {
  std::vector<CkptEntry> out;
  out.reserve(registry_.size());
  for (const auto& p : registry_) out.push_back({p.group, p.name, p.tensor.shape(), p.tensor.data()});
  return out;
}

void ModelBundle::apply_entries(const std::vector<CkptEntry>& entries,
                                const std::vector<std::string>& extra_ok) {
  std::set<std::pair<std::string, std::string>> seen;
  std::set<std::pair<std::string, std::string>> want;
  for (const auto& p : registry_) want.insert({p.group, p.name});
  for (const auto& e : entries) {
    if (std::find(extra_ok.begin(), extra_ok.end(), e.group) != extra_ok.end()) continue;
    auto key = std::make_pair(e.group, e.name);
    if (!want.count(key))
      throw std::runtime_error("vgpt: model: checkpoint has unknown param " + e.group + "/" + e.name);
    if (!seen.insert(key).second)
      throw std::runtime_error("vgpt: model: duplicate param " + e.group + "/" + e.name);
  }
  if (seen.size() != want.size())
    throw std::runtime_error("vgpt: model: checkpoint does not cover every model param");
  for (const auto& e : entries) {
    if (std::find(extra_ok.begin(), extra_ok.end(), e.group) != extra_ok.end()) continue;
    for (auto& p : registry_) {
      if (p.group != e.group || p.name != e.name) continue;
      if (p.tensor.shape() != e.shape)
        throw std::runtime_error("vgpt: model: shape mismatch for " + e.group + "/" + e.name);
      std::copy(e.data.begin(), e.data.end(), p.tensor.mutable_data().begin());
      break;
    }
  }
}

void ModelBundle::load_group_from(const CkptFile& file, const std::string& group) {
  std::set<std::string> want, seen;
  for (const auto& p : registry_)
    if (p.group == group) want.insert(p.name);
  if (want.empty()) throw std::invalid_argument("vgpt: model: unknown weight group '" + group + "'");
  for (const auto& e : file.entries) {
    if (e.group != group) continue;
    bool matched = false;
    for (auto& p : registry_) {
      if (p.group != group || p.name != e.name) continue;
      if (p.tensor.shape() != e.shape)
        throw std::runtime_error("vgpt: model: shape mismatch for " + group + "/" + e.name);
      std::copy(e.data.begin(), e.data.end(), p.tensor.mutable_data().begin());
      matched = true;
      break;
    }
    if (!matched) throw std::runtime_error("vgpt: model: checkpoint has unknown param " + group + "/" + e.name);
    seen.insert(e.name);
  }
  if (seen != want)
    throw std::runtime_error("vgpt: model: checkpoint does not cover group '" + group + "'");
}

void ModelBundle::save(const std::string& path) const {
  CkptFile file;
  file.meta["schema"] = "model-bundle";
  file.meta["config"] = model_config_to_json(cfg_);
  file.entries = collect_entries();
  save_checkpoint(path, file);
}

void ModelBundle::load(const std::string& path) {
  CkptFile file = load_checkpoint(path);
  apply_entries(file.entries);
}

Tensor assemble_embeddings(const ModelBundle& bundle, const MixedStream& stream,
                           const std::vector<std::pair<int, Tensor>>& gen_rows) {
  if (stream.size() > bundle.config().backbone.max_seq)
    throw std::invalid_argument("vgpt: model: stream longer than backbone max_seq");
  Tensor base = bundle.llm().embed_tokens(stream.ids);
  int width = bundle.config().backbone.width;
  int patches = bundle.config().patches_per_image();

  // understanding placeholders -> projected vision features, run by run
  size_t img_idx = 0;
  int i = 0;
  while (i < stream.size()) {
    if (stream.tags[static_cast<size_t>(i)] != Seg::image_understand) {
      ++i;
      continue;
    }
    int start = i;
    while (i < stream.size() && stream.tags[static_cast<size_t>(i)] == Seg::image_understand) ++i;
    if (i - start != patches)
      throw std::invalid_argument("vgpt: model: image placeholder run length != patch count");
    if (img_idx >= stream.images.size())
      throw std::invalid_argument("vgpt: model: image placeholder run without image payload");
    Tensor feats = bundle.vision().encode(stream.images[img_idx]);
    Tensor rows = bundle.proj_understand().apply(feats);  // [patches x width]
    std::vector<int> idx(static_cast<size_t>(patches));
    for (int p = 0; p < patches; ++p) idx[static_cast<size_t>(p)] = start + p;
    base = overwrite_rows(base, rows, idx);
    ++img_idx;
  }
  if (img_idx != stream.images.size())
    throw std::invalid_argument("vgpt: model: unused image payloads");

  for (const auto& [span_idx, rows] : gen_rows) {
    if (span_idx < 0 || span_idx >= static_cast<int>(stream.gen_slot_spans.size()))
      throw std::invalid_argument("vgpt: model: gen span index out of range");
    auto [start, len] = stream.gen_slot_spans[static_cast<size_t>(span_idx)];
    if (rows.shape() != Shape{len, width})
      throw std::invalid_argument("vgpt: model: gen rows shape mismatch");
    std::vector<int> idx(static_cast<size_t>(len));
    for (int p = 0; p < len; ++p) idx[static_cast<size_t>(p)] = start + p;
    base = overwrite_rows(base, rows, idx);
  }
  return base;
}

}  // namespace vgpt
