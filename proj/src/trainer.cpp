#include "vgpt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace vgpt {

namespace fs = std::filesystem;

std::vector<std::string> stage_trainable_groups(int stage_id) {
  switch (stage_id) {
    case 1: return {"proj_gen_in", "proj_gen_out"};
    case 2: return {"llm", "proj_understand"};
    case 3: return {"visual_decoder", "proj_gen_in", "proj_gen_out"};
    default: throw std::invalid_argument("vgpt: trainer: stage id must be 1, 2, or 3");
  }
}

const FreezeLedgerEntry& FreezeLedger::find(const std::string& group) const {
  for (const auto& e : entries)
    if (e.group == group) return e;
  throw std::invalid_argument("vgpt: trainer: no ledger entry for group '" + group + "'");
}

std::vector<std::pair<int, int>> compose_epoch(const std::vector<size_t>& source_sizes,
                                               const std::vector<double>& weights, int epoch_size,
                                               Rng& rng) {
  size_t ns = source_sizes.size();
  if (ns == 0 || weights.size() != ns)
    throw std::invalid_argument("vgpt: trainer: sources and weights must match and be nonempty");
  double total_w = 0.0;
  for (size_t i = 0; i < ns; ++i) {
    if (weights[i] < 0) throw std::invalid_argument("vgpt: trainer: negative mixture weight");
    if (weights[i] > 0 && source_sizes[i] == 0)
      throw std::runtime_error("vgpt: trainer: empty source with positive weight");
    total_w += weights[i];
  }
  if (total_w <= 0) throw std::invalid_argument("vgpt: trainer: mixture weights are all zero");
  if (epoch_size <= 0) throw std::invalid_argument("vgpt: trainer: epoch size must be positive");

  std::vector<Rng> source_rngs;
  source_rngs.reserve(ns);
  for (size_t i = 0; i < ns; ++i) source_rngs.push_back(rng.split());

  std::vector<std::vector<int>> perms(ns);
  std::vector<size_t> cursors(ns, 0);
  auto reshuffle = [&](size_t s) {
    auto& p = perms[s];
    p.resize(source_sizes[s]);
    for (size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(i);
    for (size_t i = p.size(); i > 1; --i)
      std::swap(p[i - 1], p[source_rngs[s].below(i)]);
    cursors[s] = 0;
  };
  for (size_t s = 0; s < ns; ++s)
    if (source_sizes[s] > 0) reshuffle(s);

  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<size_t>(epoch_size));
  for (int slot = 0; slot < epoch_size; ++slot) {
    double u = rng.uniform();
    size_t src = ns - 1;
    double acc = 0.0;
    for (size_t i = 0; i < ns; ++i) {
      acc += weights[i] / total_w;
      if (u < acc) {
        src = i;
        break;
      }
    }
    while (weights[src] == 0) src = (src + ns - 1) % ns;  // guard against fp edge at u ~ 1
    if (cursors[src] >= perms[src].size()) reshuffle(src);
    out.emplace_back(static_cast<int>(src), perms[src][cursors[src]++]);
  }
  return out;
}

SampleLoss sample_loss(const ModelBundle& bundle, const MixedStream& stream, bool want_visual) {
  const auto& dec = bundle.decoder();
  int cond_rows = dec.config().cond_rows;
  int cells = dec.config().schedule.total_cells();

  SampleLoss out;
  std::vector<std::pair<int, Tensor>> gen_rows;
  for (size_t i = 0; i < stream.gen_slot_spans.size(); ++i) {
    auto [start, len] = stream.gen_slot_spans[i];
    if (start < cond_rows + 1)
      throw std::runtime_error("vgpt: trainer: generation span opens before any condition context");
    Tensor emb = assemble_embeddings(bundle, stream, gen_rows);
    auto prefix_out = bundle.llm().forward(slice_rows(emb, 0, start));
    Tensor h = slice_rows(prefix_out.hidden, start - cond_rows, cond_rows);
    Tensor cond = bundle.proj_gen_in().apply(h);
    const TokenPyramid& pyr = stream.pyramids[i];
    auto dec_out = dec.forward(dec.assemble_inputs(cond, dec.teacher_contents(bundle.tokenizer(), pyr)));
    Tensor rows = bundle.proj_gen_out().apply(slice_rows(dec_out.hidden, cond_rows, cells));
    gen_rows.emplace_back(static_cast<int>(i), rows);
    if (want_visual) out.vis_ce.push_back(dec.visual_ce(dec_out.logits, pyr));
  }

  Tensor emb = assemble_embeddings(bundle, stream, gen_rows);
  auto full = bundle.llm().forward(emb);
  int t = stream.size();
  bool any_text = false;
  for (size_t p = 1; p < stream.loss_mask_text.size(); ++p)
    if (stream.loss_mask_text[p]) any_text = true;
  if (any_text && t >= 2) {
    std::vector<int> targets(stream.ids.begin() + 1, stream.ids.end());
    std::vector<uint8_t> mask(stream.loss_mask_text.begin() + 1, stream.loss_mask_text.end());
    out.text_ce = cross_entropy(slice_rows(full.logits, 0, t - 1), targets, mask);
  }
  return out;
}

namespace {

int64_t masked_count(const MixedStream& s) {
  int64_t n = 0;
  for (size_t p = 1; p < s.loss_mask_text.size(); ++p)
    if (s.loss_mask_text[p]) ++n;
  return n;
}

struct OptimState {
  std::vector<CkptEntry> entries;
};

void append_optim_entries(std::vector<CkptEntry>& entries, AdamW& opt) {
  const auto& params = opt.params();
  for (size_t i = 0; i < params.size(); ++i) {
    entries.push_back({"optim", "m." + std::to_string(i), params[i].shape(), opt.exp_avg()[i]});
    entries.push_back({"optim", "v." + std::to_string(i), params[i].shape(), opt.exp_avg_sq()[i]});
  }
}

void restore_optim_entries(const CkptFile& file, AdamW& opt) {
  const auto& params = opt.params();
  size_t found = 0;
  for (const auto& e : file.entries) {
    if (e.group != "optim") continue;
    bool is_m = e.name.rfind("m.", 0) == 0;
    bool is_v = e.name.rfind("v.", 0) == 0;
    if (!is_m && !is_v) throw std::runtime_error("vgpt: trainer: unknown optimizer entry " + e.name);
    size_t idx = std::stoul(e.name.substr(2));
    if (idx >= params.size()) throw std::runtime_error("vgpt: trainer: optimizer entry out of range");
    if (e.shape != params[idx].shape())
      throw std::runtime_error("vgpt: trainer: optimizer entry shape mismatch for " + e.name);
    (is_m ? opt.exp_avg() : opt.exp_avg_sq())[idx] = e.data;
    ++found;
  }
  if (found != params.size() * 2)
    throw std::runtime_error("vgpt: trainer: snapshot does not cover the optimizer state");
}

}  // namespace

TrainResult run_stage(ModelBundle& bundle, const StageRunConfig& cfg,
                      const OptimizerSettings& optim, const std::vector<std::vector<DataRecord>>& sources,
                      const StageIo& io, uint64_t seed) {
  if (sources.size() != cfg.mixture_weights.size())
    throw std::invalid_argument("vgpt: trainer: sources and mixture weights differ in length");
  for (size_t i = 0; i < sources.size(); ++i)
    if (sources[i].empty() && cfg.mixture_weights[i] > 0)
      throw std::runtime_error("vgpt: trainer: empty manifest with positive weight (source " +
                               std::to_string(i) + ")");

  bundle.set_trainable_groups(stage_trainable_groups(cfg.id));

  std::vector<size_t> sizes;
  size_t sum_sizes = 0;
  for (const auto& s : sources) {
    sizes.push_back(s.size());
    sum_sizes += s.size();
  }
  int epoch_size = cfg.epoch_size > 0 ? cfg.epoch_size : static_cast<int>(sum_sizes);
  int steps_per_epoch = epoch_size / cfg.batch_size;
  if (steps_per_epoch < 1)
    throw std::invalid_argument("vgpt: trainer: epoch smaller than one batch");
  int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.epochs;
  LrSchedule schedule = make_schedule(cfg.lr, total_steps, optim.warmup_ratio);

  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(optim.weight_decay);
  AdamW opt(bundle.trainable_params(), ocfg);

  int start_epoch = 0, start_step = 0;
  int64_t global_step = 0;
  if (!io.resume_from.empty()) {
    CkptFile snap = load_checkpoint(io.resume_from);
    if (snap.meta.value("schema", "") != "train-state")
      throw std::runtime_error("vgpt: trainer: resume file is not a training snapshot");
    const auto& ts = snap.meta.at("train_state");
    if (ts.at("stage").get<int>() != cfg.id)
      throw std::runtime_error("vgpt: trainer: snapshot belongs to a different stage");
    bundle.apply_entries(snap.entries, {"optim"});
    restore_optim_entries(snap, opt);
    opt.set_step_count(ts.at("adam_step").get<int64_t>());
    start_epoch = ts.at("epoch").get<int>();
    start_step = ts.at("next_step_in_epoch").get<int>();
    global_step = ts.at("global_step").get<int64_t>();
    if (start_step >= steps_per_epoch) {
      start_step = 0;
      ++start_epoch;
    }
  }

  TrainResult res;
  res.total_steps = total_steps;
  {
    auto tg = stage_trainable_groups(cfg.id);
    for (const auto& g : kModelGroups) {
      FreezeLedgerEntry e;
      e.group = g;
      e.before_hex = hex(bundle.group_hash(g));
      e.trainable = std::find(tg.begin(), tg.end(), g) != tg.end();
      res.ledger.entries.push_back(e);
    }
  }

  std::ofstream metrics;
  if (!io.metrics_path.empty()) {
    fs::path p(io.metrics_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    metrics.open(io.metrics_path, io.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw std::runtime_error("vgpt: trainer: cannot open metrics file " + io.metrics_path);
  }

  ImageCache cache;
  const ScaleSchedule& sched = bundle.config().tokenizer.schedule;
  int patches = bundle.config().patches_per_image();
  bool want_visual = cfg.w_vis > 0.0;

  auto snapshot = [&](int epoch, int next_step) {
    if (io.state_out.empty()) return;
    CkptFile snap;
    snap.meta["schema"] = "train-state";
    snap.meta["config"] = model_config_to_json(bundle.config());
    snap.meta["train_state"] = {{"stage", cfg.id},
                                {"epoch", epoch},
                                {"next_step_in_epoch", next_step},
                                {"global_step", global_step},
                                {"adam_step", opt.step_count()}};
    snap.entries = bundle.collect_entries();
    append_optim_entries(snap.entries, opt);
    save_checkpoint(io.state_out, snap);
  };

  bool stopped = false;
  for (int epoch = start_epoch; epoch < cfg.epochs && !stopped; ++epoch) {
    Rng erng(derive_seed(seed, "stage" + std::to_string(cfg.id) + "-epoch",
                         static_cast<uint64_t>(epoch)));
    auto order = compose_epoch(sizes, cfg.mixture_weights, epoch_size, erng);
    int first = (epoch == start_epoch) ? start_step : 0;
    for (int s = first; s < steps_per_epoch && !stopped; ++s) {
      Tensor text_sum, vis_sum;
      int n_text = 0, n_vis = 0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& [src, idx] = order[static_cast<size_t>(s) * cfg.batch_size + b];
        const DataRecord& rec = sources[static_cast<size_t>(src)][static_cast<size_t>(idx)];
        MixedStream stream =
            render_dialogue(record_to_turns(rec, bundle.tokenizer(), cache), sched, patches);
        SampleLoss sl = sample_loss(bundle, stream, want_visual);
        if (sl.text_ce.defined()) {
          text_sum = text_sum.defined() ? add(text_sum, sl.text_ce) : sl.text_ce;
          ++n_text;
        }
        for (const auto& v : sl.vis_ce) {
          vis_sum = vis_sum.defined() ? add(vis_sum, v) : v;
          ++n_vis;
        }
      }
      double loss_text = 0.0, loss_vis = 0.0;
      Tensor total;
      if (text_sum.defined()) {
        Tensor mean_text = scalar_mul(text_sum, 1.0f / static_cast<float>(n_text));
        loss_text = mean_text.item();
        Tensor weighted = scalar_mul(mean_text, static_cast<float>(cfg.w_text));
        total = weighted;
      }
      if (vis_sum.defined()) {
        Tensor mean_vis = scalar_mul(vis_sum, 1.0f / static_cast<float>(n_vis));
        loss_vis = mean_vis.item();
        Tensor weighted = scalar_mul(mean_vis, static_cast<float>(cfg.w_vis));
        total = total.defined() ? add(total, weighted) : weighted;
      }
      if (!total.defined())
        throw std::runtime_error("vgpt: trainer: batch produced no loss terms");
      double loss = total.item();
      if (!std::isfinite(loss))
        throw std::runtime_error("vgpt: trainer: non-finite loss at stage " + std::to_string(cfg.id) +
                                 " step " + std::to_string(global_step));
      if (!total.requires_grad())
        throw std::runtime_error("vgpt: trainer: loss does not reach any trainable parameter (stage " +
                                 std::to_string(cfg.id) + ")");
      double lr = schedule.at(global_step);
      backward(total);
      opt.step(static_cast<float>(lr));
      opt.zero_grad();

      if (metrics.is_open()) {
        ordered_json line;
        line["step"] = global_step;
        line["loss_text"] = loss_text;
        line["loss_vis"] = loss_vis;
        line["lr"] = lr;
        metrics << line.dump() << "\n";
      }
      res.losses.push_back(loss);
      res.last_loss_text = loss_text;
      res.last_loss_vis = loss_vis;
      ++global_step;
      ++res.steps_run;
      if (io.save_every > 0 && global_step % io.save_every == 0) snapshot(epoch, s + 1);
      if (io.max_steps > 0 && global_step >= io.max_steps) stopped = true;
    }
  }
  if (metrics.is_open()) metrics.flush();

  for (auto& e : res.ledger.entries) {
    e.after_hex = hex(bundle.group_hash(e.group));
    if (!e.trainable && e.after_hex != e.before_hex)
      throw std::runtime_error("vgpt: trainer: frozen group '" + e.group + "' changed during stage " +
                               std::to_string(cfg.id));
  }

  if (!io.checkpoint_out.empty()) {
    CkptFile file;
    file.meta["schema"] = "model-bundle";
    file.meta["config"] = model_config_to_json(bundle.config());
    file.meta["stage"] = cfg.id;
    file.entries = bundle.collect_entries();
    save_checkpoint(io.checkpoint_out, file);
  }
  return res;
}

EvalStats evaluate_records(const ModelBundle& bundle, const std::vector<DataRecord>& records,
                           ImageCache& cache) {
  NoGradGuard ng;
  const ScaleSchedule& sched = bundle.config().tokenizer.schedule;
  int patches = bundle.config().patches_per_image();
  int cells = sched.total_cells();
  EvalStats st;
  double text_nats = 0.0, vis_nats = 0.0;
  for (const auto& rec : records) {
    MixedStream stream = render_dialogue(record_to_turns(rec, bundle.tokenizer(), cache), sched, patches);
    SampleLoss sl = sample_loss(bundle, stream, true);
    if (sl.text_ce.defined()) {
      int64_t n = masked_count(stream);
      text_nats += sl.text_ce.item() * static_cast<double>(n);
      st.text_tokens += n;
    }
    for (const auto& v : sl.vis_ce) {
      vis_nats += v.item() * static_cast<double>(cells);
      st.visual_cells += cells;
    }
  }
  if (st.text_tokens > 0) st.text_ce = text_nats / static_cast<double>(st.text_tokens);
  if (st.visual_cells > 0) st.visual_ce = vis_nats / static_cast<double>(st.visual_cells);
  return st;
}

}  // namespace vgpt
