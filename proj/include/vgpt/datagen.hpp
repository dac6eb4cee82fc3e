#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vgpt/image_io.hpp"
#include "vgpt/rng.hpp"
#include "vgpt/stream.hpp"
#include "vgpt/tokenizer.hpp"

namespace vgpt {

// One instruction record; the JSONL line schema is exactly
// {"id","stage","prompt","answer","image","caption"}.
struct DataRecord {
  std::string id;
  int stage = 0;
  std::string prompt;
  std::string answer;
  std::string image;    // path, relative to the manifest on disk
  std::string caption;
};

// JSONL + sidecar "<path>.meta.json" with counts and the seed. Atomic writes.
void save_manifest(const std::string& path, const std::vector<DataRecord>& records,
                   const std::string& mode, uint64_t seed);
// Image paths come back resolved against the manifest's directory.
std::vector<DataRecord> load_manifest(const std::string& path);

struct SyntheticPair {
  std::string class_name;  // e.g. "red circle"
  std::string caption;     // e.g. "a red circle on a white background"
  std::string image_path;  // e.g. "images/red_circle.ppm"
  Image image;
};

// Procedural (image, caption) pairs: colored geometric shapes on a white
// background. The caption fully determines the image for a given seed, so a
// prompt's target pyramid is unambiguous. n beyond the palette cycles.
std::vector<SyntheticPair> build_synthetic_pairs(int n, int image_size, uint64_t seed);

// Writes each pair's image under dir (creating it) and a pairs manifest
// ("pairs.jsonl": {"class_name","caption","image"} lines) next to it.
void write_pairs(const std::string& dir, const std::vector<SyntheticPair>& pairs, uint64_t seed);
std::vector<SyntheticPair> load_pairs(const std::string& dir);  // re-reads images

// Editable template pools; placeholders are {caption} and {class_name} only.
struct SeedPools {
  std::vector<std::string> prompt_seeds;
  std::vector<std::string> image_cap_seeds;
  std::vector<std::string> answer_seeds;

  static SeedPools load_dir(const std::string& dir);  // *_limit_seeds.txt files
  void validate() const;
};

struct InstructQuery {
  std::string invocation;  // full few-shot instruction text (for remote sources)
  std::string prompt_template;
  std::string image_cap_template;
  std::string answer_template;
  std::string caption;
  std::string class_name;
};

// Pluggable (prompt, answer) source. The local default fills the chosen
// templates deterministically; a remote adapter would parse `invocation`.
class TextSource {
 public:
  virtual ~TextSource() = default;
  virtual std::pair<std::string, std::string> generate(const InstructQuery& q, Rng& rng) = 0;
};

class LocalTemplateSource final : public TextSource {
 public:
  std::pair<std::string, std::string> generate(const InstructQuery& q, Rng& rng) override;
};

std::string fill_template(const std::string& tmpl, const std::string& caption,
                          const std::string& class_name);

// Category-format corpus: prompt "Please generate an image of a {class} for
// me.", answer "The generated image of a {class} is as follows <image>".
std::vector<DataRecord> build_stage1_corpus(const std::vector<SyntheticPair>& classes,
                                            int records_per_class, uint64_t seed);

// Seeded template sampling per record, few-shot invocation text, text_source
// fill, then the generation marker is appended to the answer.
std::vector<DataRecord> build_instruct_corpus(const std::vector<SyntheticPair>& pairs,
                                              const SeedPools& pools, int shots,
                                              TextSource& source, int n, int stage_tag,
                                              const std::string& id_prefix, uint64_t seed);

// Understanding records (user image + assistant text, no generation span);
// style is "describe" or "qa".
std::vector<DataRecord> build_understand_corpus(const std::vector<SyntheticPair>& pairs,
                                                const std::string& style, int n, uint64_t seed);

// Record -> dialogue turns. A "<image>" marker in the prompt attaches the
// record's image; a generation marker in the answer attaches the encoded
// pyramid of the record's image.
struct ImageCache {
  std::map<std::string, Image> images;
  std::map<std::string, TokenPyramid> pyramids;

  const Image& load(const std::string& path);
  const TokenPyramid& encode(const Tokenizer& tok, const std::string& path);
};

std::vector<Turn> record_to_turns(const DataRecord& rec, const Tokenizer& tok, ImageCache& cache);

}  // namespace vgpt
