#include "vgpt/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace vgpt {

namespace fs = std::filesystem;

void generate_all_corpora(const RunConfig& cfg, const std::string& data_dir) {
  const DatagenConfig& dg = cfg.datagen;
  fs::create_directories(data_dir);
  uint64_t seed = cfg.seed;

  auto pairs = build_synthetic_pairs(dg.classes, cfg.model.tokenizer.image_size,
                                     derive_seed(seed, "pairs"));
  write_pairs(data_dir, pairs, seed);

  int per_class = std::max(1, dg.stage1_records / dg.classes);
  auto stage1 = build_stage1_corpus(pairs, per_class, derive_seed(seed, "stage1"));
  save_manifest((fs::path(data_dir) / "stage1.jsonl").string(), stage1, "stage1", seed);

  SeedPools pools = SeedPools::load_dir(dg.seed_pool_dir);
  LocalTemplateSource source;
  auto instruct = build_instruct_corpus(pairs, pools, dg.shots, source, dg.instruct_records, 2,
                                        "instruct-", derive_seed(seed, "instruct"));
  save_manifest((fs::path(data_dir) / "instruct.jsonl").string(), instruct, "instruct", seed);

  auto gen = build_instruct_corpus(pairs, pools, dg.shots, source, dg.gen_records, 3, "gen-",
                                   derive_seed(seed, "gen"));
  save_manifest((fs::path(data_dir) / "gen.jsonl").string(), gen, "instruct", seed);

  int half = dg.understand_records / 2;
  auto describe = build_understand_corpus(pairs, "describe", half, derive_seed(seed, "und-describe"));
  save_manifest((fs::path(data_dir) / "understand_describe.jsonl").string(), describe, "understand",
                seed);
  auto qa = build_understand_corpus(pairs, "qa", dg.understand_records - half,
                                    derive_seed(seed, "und-qa"));
  save_manifest((fs::path(data_dir) / "understand_qa.jsonl").string(), qa, "understand", seed);
}

VqTrainResult train_tokenizer(Tokenizer& tok, const std::vector<Image>& images,
                              const TokenizerTrainConfig& cfg, double warmup_ratio,
                              const std::string& metrics_path, uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("vgpt: pipeline: no tokenizer training images");
  tok.set_frozen(false);
  AdamW opt(tok.trainable_params(), {});

  int batch = std::min<int>(cfg.batch_size, static_cast<int>(images.size()));
  int steps_per_epoch =
      static_cast<int>(std::max<size_t>(1, images.size() / static_cast<size_t>(batch)));
  int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.epochs;
  LrSchedule schedule = make_schedule(cfg.lr, total_steps, warmup_ratio);

  std::ofstream metrics;
  if (!metrics_path.empty()) {
    fs::path p(metrics_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    metrics.open(metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("vgpt: pipeline: cannot open metrics file " + metrics_path);
  }

  VqTrainResult res;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(seed, "tok-epoch", static_cast<uint64_t>(epoch)));
    std::vector<int> order(images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.below(i)]);

    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<Image> batch_imgs;
      for (int b = 0; b < batch; ++b)
        batch_imgs.push_back(images[static_cast<size_t>(order[(s * batch + b) % order.size()])]);
      double lr = schedule.at(step);
      VqLosses l = vq_train_step(tok, batch_imgs, opt, static_cast<float>(lr),
                                 static_cast<float>(cfg.beta));
      if (!std::isfinite(l.total))
        throw std::runtime_error("vgpt: pipeline: non-finite VQ loss at step " + std::to_string(step));
      if (metrics.is_open()) {
        ordered_json line;
        line["step"] = step;
        line["recon"] = l.recon;
        line["codebook"] = l.codebook;
        line["commit"] = l.commit;
        line["total"] = l.total;
        line["lr"] = lr;
        metrics << line.dump() << "\n";
      }
      res.losses.push_back(l.total);
      ++step;
    }

    NoGradGuard ng;
    std::vector<Tensor> latents;
    for (const auto& img : images) {
      Tensor lat = tok.encode_latent(img);
      int side = tok.config().latent_side();
      latents.push_back(reshape(lat, {side * side, tok.config().latent_dim}));
    }
    Rng rrng(derive_seed(seed, "tok-reseed", static_cast<uint64_t>(epoch)));
    tok.reseed_dead_entries(rrng, concat_rows(latents));
  }
  res.steps = step;

  {
    NoGradGuard ng;
    double total = 0.0;
    for (const auto& img : images) {
      Tensor lat = tok.encode_latent(img);
      TokenPyramid pyr = tok.quantize_latent_const(lat);
      Tensor recon = tok.decode_latent(tok.dequantize_pyramid(pyr));
      Tensor target = Tensor::from_data(recon.shape(), img.rgb);
      total += mse(recon, target).item();
    }
    res.final_mse = total / static_cast<double>(images.size());
  }
  if (metrics.is_open()) metrics.flush();
  return res;
}

void save_tokenizer_checkpoint(const std::string& path, Tokenizer& tok) {
  CkptFile file;
  file.meta["schema"] = "tokenizer";
  file.meta["config"] = {{"image_size", tok.config().image_size},
                         {"downsample", tok.config().downsample},
                         {"latent_dim", tok.config().latent_dim},
                         {"vocab_size", tok.config().vocab_size},
                         {"schedule", tok.config().schedule.rs}};
  for (auto& [name, t] : tok.named_params()) file.entries.push_back({"tokenizer", name, t.shape(), t.data()});
  save_checkpoint(path, file);
}

void load_tokenizer_into(ModelBundle& bundle, const std::string& ckpt_path) {
  CkptFile file = load_checkpoint(ckpt_path);
  std::string schema = file.meta.value("schema", "");
  if (schema == "tokenizer")
    bundle.load_group_from(file, "tokenizer");
  else if (schema == "model-bundle")
    bundle.apply_entries(file.entries);
  else
    throw std::runtime_error("vgpt: pipeline: unrecognized checkpoint schema '" + schema + "'");
}

PipelineResult run_full_pipeline(const RunConfig& cfg, const PipelinePaths& paths) {
  fs::create_directories(paths.data_dir);
  fs::create_directories(paths.ckpt_dir);
  fs::create_directories(paths.log_dir);
  PipelineResult res;

  generate_all_corpora(cfg, paths.data_dir);

  auto pairs = load_pairs(paths.data_dir);
  std::vector<Image> images;
  for (const auto& p : pairs) images.push_back(p.image);

  Rng tok_rng(derive_seed(cfg.seed, "tokenizer-init"));
  Tokenizer tok(cfg.model.tokenizer, tok_rng);
  res.vq = train_tokenizer(tok, images, cfg.tok_train, cfg.optim.warmup_ratio,
                           (fs::path(paths.log_dir) / "tokenizer_metrics.jsonl").string(), cfg.seed);
  res.tokenizer_ckpt = (fs::path(paths.ckpt_dir) / "tokenizer.ckpt").string();
  save_tokenizer_checkpoint(res.tokenizer_ckpt, tok);

  ModelBundle bundle(cfg.model, cfg.seed);
  load_tokenizer_into(bundle, res.tokenizer_ckpt);

  for (int stage = 1; stage <= 3; ++stage) {
    const StageRunConfig& sc = cfg.stage(stage);
    std::vector<std::vector<DataRecord>> sources;
    for (const auto& name : sc.manifests)
      sources.push_back(load_manifest((fs::path(paths.data_dir) / name).string()));
    StageIo io;
    io.metrics_path =
        (fs::path(paths.log_dir) / ("stage" + std::to_string(stage) + "_metrics.jsonl")).string();
    io.checkpoint_out =
        (fs::path(paths.ckpt_dir) / ("stage" + std::to_string(stage) + ".ckpt")).string();
    res.stages[stage - 1] = run_stage(bundle, sc, cfg.optim, sources, io, cfg.seed);
    res.stage_ckpts[stage - 1] = io.checkpoint_out;
  }

  ImageCache cache;
  auto gen_records = load_manifest((fs::path(paths.data_dir) / "gen.jsonl").string());
  gen_records.resize(std::min<size_t>(gen_records.size(), 32));
  res.gen_eval = evaluate_records(bundle, gen_records, cache);

  auto und = load_manifest((fs::path(paths.data_dir) / "understand_describe.jsonl").string());
  auto und_qa = load_manifest((fs::path(paths.data_dir) / "understand_qa.jsonl").string());
  und.insert(und.end(), und_qa.begin(), und_qa.end());
  und.resize(std::min<size_t>(und.size(), 32));
  res.understand_eval = evaluate_records(bundle, und, cache);

  ordered_json summary;
  summary["vq_final_mse"] = res.vq.final_mse;
  summary["gen_visual_ce"] = res.gen_eval.visual_ce;
  summary["gen_text_ce"] = res.gen_eval.text_ce;
  summary["understand_text_ce"] = res.understand_eval.text_ce;
  atomic_write_file((fs::path(paths.log_dir) / "eval.json").string(), summary.dump(2) + "\n");
  return res;
}

}  // namespace vgpt
