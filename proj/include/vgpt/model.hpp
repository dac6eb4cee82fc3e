#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vgpt/backbone.hpp"
#include "vgpt/checkpoint.hpp"
#include "vgpt/digest.hpp"
#include "vgpt/projectors.hpp"
#include "vgpt/stream.hpp"
#include "vgpt/tokenizer.hpp"
#include "vgpt/visual_decoder.hpp"

namespace vgpt {

struct ModelConfig {
  TokenizerConfig tokenizer;
  BackboneConfig backbone;
  VisualDecoderConfig decoder;
  int vision_patch = 16;  // side of the frozen vision tower's square patches
  int vision_dim = 64;    // features per patch out of the vision tower

  int patches_per_image() const;
  void validate() const;
};

ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const ordered_json& j);

struct GroupParam {
  std::string group;
  std::string name;
  Tensor tensor;
};

// The seven weight groups the trainer freezes/unfreezes as units.
extern const std::vector<std::string> kModelGroups;

class ModelBundle {
 public:
  ModelBundle(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  Tokenizer& tokenizer() { return tokenizer_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  VisionEncoder& vision() { return vision_; }
  const VisionEncoder& vision() const { return vision_; }
  Backbone& llm() { return llm_; }
  const Backbone& llm() const { return llm_; }
  VisualDecoder& decoder() { return decoder_; }
  const VisualDecoder& decoder() const { return decoder_; }
  GenProjector& proj_understand() { return proj_understand_; }
  const GenProjector& proj_understand() const { return proj_understand_; }
  GenProjector& proj_gen_in() { return proj_gen_in_; }
  const GenProjector& proj_gen_in() const { return proj_gen_in_; }
  GenProjector& proj_gen_out() { return proj_gen_out_; }
  const GenProjector& proj_gen_out() const { return proj_gen_out_; }

  const std::vector<GroupParam>& registry() const { return registry_; }

  // Marks exactly the given groups trainable; everything else is frozen.
  void set_trainable_groups(const std::vector<std::string>& groups);
  std::vector<Tensor> trainable_params() const;
  std::vector<std::string> trainable_groups() const { return trainable_; }

  // Digest of the group's parameter bytes in registry order.
  Sha256 group_hash(const std::string& group) const;

  std::vector<CkptEntry> collect_entries() const;
  // Strict: entries must cover the registry exactly (unknown group/name or
  // shape mismatch throws). Extra entries in other groups are ignored by
  // apply_entries only if listed in `extra_ok` group names.
  void apply_entries(const std::vector<CkptEntry>& entries,
                     const std::vector<std::string>& extra_ok = {});
  // Copies only the named group's params from the file (must cover it).
  void load_group_from(const CkptFile& file, const std::string& group);

  void save(const std::string& path) const;
  void load(const std::string& path);  // full strict bundle load

 private:
  ModelConfig cfg_;
  Tokenizer tokenizer_;
  VisionEncoder vision_;
  Backbone llm_;
  VisualDecoder decoder_;
  GenProjector proj_understand_, proj_gen_in_, proj_gen_out_;
  std::vector<GroupParam> registry_;
  std::vector<std::string> trainable_;

  void build_registry();
};

// Token-embedding rows for a mixed stream: byte/special tokens use the
// backbone table; understanding placeholders are overwritten with projected
// vision features of the paired image. Generation slots keep the placeholder
// embedding unless rows for their span are supplied (span index, [len x width]).
Tensor assemble_embeddings(const ModelBundle& bundle, const MixedStream& stream,
                           const std::vector<std::pair<int, Tensor>>& gen_rows = {});

}  // namespace vgpt
