#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vgpt/model.hpp"
#include "vgpt/sampler.hpp"

namespace vgpt {

// Minimal INI-style reader: [section] headers, key = value lines, '#' or ';'
// comments (full-line or trailing), whitespace-trimmed. Duplicate keys keep
// the last value.
class IniFile {
 public:
  static IniFile parse_file(const std::string& path);
  static IniFile parse_string(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key) const;  // throws if absent
  std::string get_or(const std::string& section, const std::string& key, const std::string& dflt) const;
  int get_int(const std::string& section, const std::string& key) const;
  int get_int_or(const std::string& section, const std::string& key, int dflt) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double_or(const std::string& section, const std::string& key, double dflt) const;
  bool get_bool_or(const std::string& section, const std::string& key, bool dflt) const;
  uint64_t get_u64_or(const std::string& section, const std::string& key, uint64_t dflt) const;
  // comma-separated lists
  std::vector<std::string> get_list(const std::string& section, const std::string& key) const;
  std::vector<double> get_double_list(const std::string& section, const std::string& key) const;
  std::vector<int> get_int_list(const std::string& section, const std::string& key) const;

  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return sections_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

struct OptimizerSettings {
  std::string name = "adamw";      // informational; adamw is the only implementation
  std::string schedule = "cosine";  // cosine is the only implementation
  double warmup_ratio = 0.1;
  double weight_decay = 0.0;
};

struct StageRunConfig {
  int id = 0;  // 1, 2, or 3
  double lr = 0.0;
  int epochs = 0;
  int batch_size = 8;
  std::vector<std::string> manifests;  // file names, resolved against a data dir
  std::vector<double> mixture_weights;
  int epoch_size = 0;  // 0 = sum of source sizes
  double w_text = 1.0;
  double w_vis = 1.0;
};

struct TokenizerTrainConfig {
  double lr = 1e-3;
  int epochs = 100;
  int batch_size = 8;
  double beta = 0.25;
};

struct DatagenConfig {
  int classes = 16;
  int stage1_records = 512;
  int instruct_records = 256;   // stage-2 generation-instruction source
  int gen_records = 512;        // stage-3 corpus
  int understand_records = 256;  // split evenly between describe and qa
  int shots = 4;
  std::string seed_pool_dir = "data/seeds";
};

struct RunConfig {
  uint64_t seed = 1234;
  ModelConfig model;
  SamplerConfig sampler;
  OptimizerSettings optim;
  TokenizerTrainConfig tok_train;
  DatagenConfig datagen;
  StageRunConfig stages[3];

  const StageRunConfig& stage(int id) const;  // id in {1,2,3}
};

RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_ini(const IniFile& ini);

}  // namespace vgpt
