#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vgpt/config.hpp"
#include "vgpt/model.hpp"
#include "vgpt/tokenizer.hpp"
#include "vgpt/trainer.hpp"

namespace vgpt {

// Writes every corpus the stages consume, under fixed names in data_dir:
// pairs.jsonl + images/, stage1.jsonl, instruct.jsonl, gen.jsonl,
// understand_describe.jsonl, understand_qa.jsonl. Deterministic per seed.
void generate_all_corpora(const RunConfig& cfg, const std::string& data_dir);

struct VqTrainResult {
  std::vector<double> losses;  // total VQ loss per step
  double final_mse = 0.0;      // full-path reconstruction MSE over the corpus
  int64_t steps = 0;
};

// Overfits the multi-scale quantizer on the pair images; writes per-step
// metrics ({"step","recon","codebook","commit","total","lr"}) when a path is
// given. Dead codebook entries reseed after every epoch.
VqTrainResult train_tokenizer(Tokenizer& tok, const std::vector<Image>& images,
                              const TokenizerTrainConfig& cfg, double warmup_ratio,
                              const std::string& metrics_path, uint64_t seed);

void save_tokenizer_checkpoint(const std::string& path, Tokenizer& tok);
// Accepts a tokenizer-only file or a full bundle file.
void load_tokenizer_into(ModelBundle& bundle, const std::string& ckpt_path);

struct PipelinePaths {
  std::string data_dir;
  std::string ckpt_dir;
  std::string log_dir;
};

struct PipelineResult {
  std::string tokenizer_ckpt;
  std::string stage_ckpts[3];
  VqTrainResult vq;
  TrainResult stages[3];
  EvalStats gen_eval;         // over generation records (visual + text CE)
  EvalStats understand_eval;  // over understanding records (text CE)
};

// Corpora -> tokenizer overfit -> stages 1..3 -> held-in evaluation. The
// trained bundle ends up in ckpt_dir/stage3.ckpt; a summary lands in
// log_dir/eval.json.
PipelineResult run_full_pipeline(const RunConfig& cfg, const PipelinePaths& paths);

}  // namespace vgpt
