#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vgpt/config.hpp"
#include "vgpt/datagen.hpp"
#include "vgpt/model.hpp"
#include "vgpt/optim.hpp"

namespace vgpt {

// Stage id -> the exact groups that stage trains; everything else is frozen
// (the tokenizer and vision encoder in every stage).
std::vector<std::string> stage_trainable_groups(int stage_id);

struct FreezeLedgerEntry {
  std::string group;
  std::string before_hex;
  std::string after_hex;
  bool trainable = false;
};

struct FreezeLedger {
  std::vector<FreezeLedgerEntry> entries;
  const FreezeLedgerEntry& find(const std::string& group) const;
};

// One epoch's sample order: (source index, record index) per slot. Sources
// are chosen multinomially by weight; records cycle through per-source
// seeded shuffles.
std::vector<std::pair<int, int>> compose_epoch(const std::vector<size_t>& source_sizes,
                                               const std::vector<double>& weights, int epoch_size,
                                               Rng& rng);

struct StageIo {
  std::string metrics_path;    // per-step JSONL, "" = none
  std::string checkpoint_out;  // final model bundle, "" = skip
  std::string state_out;       // resumable snapshot target, "" = never snapshot
  int save_every = 0;          // global steps between snapshots (0 = never)
  std::string resume_from;     // snapshot to continue from, "" = fresh
  int64_t max_steps = 0;       // hard stop after this many global steps (0 = run out)
};

struct TrainResult {
  FreezeLedger ledger;
  std::vector<double> losses;  // total loss per executed step
  double last_loss_text = 0.0;
  double last_loss_vis = 0.0;
  int64_t steps_run = 0;
  int64_t total_steps = 0;
};

// Runs one training stage over pre-loaded manifest sources. Deterministic
// given (bundle state, cfg, sources, seed): data order, losses, and all file
// outputs depend only on these. Frozen groups are verified bit-unchanged.
TrainResult run_stage(ModelBundle& bundle, const StageRunConfig& cfg,
                      const OptimizerSettings& optim, const std::vector<std::vector<DataRecord>>& sources,
                      const StageIo& io, uint64_t seed);

// Per-sample training graph: teacher-forced text CE plus per-span visual CE.
struct SampleLoss {
  Tensor text_ce;              // undefined if the stream has no supervised text
  std::vector<Tensor> vis_ce;  // one per generation span (empty when skipped)
};
SampleLoss sample_loss(const ModelBundle& bundle, const MixedStream& stream, bool want_visual);

struct EvalStats {
  double text_ce = 0.0;    // nats per supervised text token
  double visual_ce = 0.0;  // nats per pyramid cell
  int64_t text_tokens = 0;
  int64_t visual_cells = 0;
};
// Token-weighted teacher-forced CE over a record set (no gradients).
EvalStats evaluate_records(const ModelBundle& bundle, const std::vector<DataRecord>& records,
                           ImageCache& cache);

}  // namespace vgpt
