#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vgpt/config.hpp"
#include "vgpt/datagen.hpp"
#include "vgpt/model.hpp"
#include "vgpt/pipeline.hpp"
#include "vgpt/sampler.hpp"
#include "vgpt/trainer.hpp"

namespace fs = std::filesystem;
using namespace vgpt;

namespace {

std::string default_manifest_name(const std::string& mode, const std::string& style, int stage) {
  if (mode == "stage1") return "stage1.jsonl";
  if (mode == "understand") return "understand_" + style + ".jsonl";
  return stage == 3 ? "gen.jsonl" : "instruct.jsonl";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unified visual understanding and generation engine"};
  app.require_subcommand(1);

  std::string config_path, data_dir = "data", out_path, metrics_path, init_path, resume_path;
  std::string ckpt_path, prompt_text, image_path, pyramid_path, style = "describe", seeds_dir;
  std::string out_dir = "chat_images", state_out;
  uint64_t seed_flag = 0;
  int n_flag = 0, stage_flag = 2, shots_flag = -1, max_tokens = 128, save_every = 0;
  int64_t max_steps = 0;
  int top_k = -1;
  double top_p = -1.0, cfg_lambda = -1e9;
  bool force_trigger = false;

  auto run_cfg = [&]() {
    RunConfig cfg = load_run_config(config_path);
    if (!seeds_dir.empty()) cfg.datagen.seed_pool_dir = seeds_dir;
    return cfg;
  };
  auto pick_seed = [&](const RunConfig& cfg, CLI::App* sub) {
    return sub->count("--seed") ? seed_flag : cfg.seed;
  };
  auto sampler_of = [&](const RunConfig& cfg, CLI::App* sub, uint64_t seed) {
    SamplerConfig s = cfg.sampler;
    if (sub->count("--top-k")) s.top_k = top_k;
    if (sub->count("--top-p")) s.top_p = static_cast<float>(top_p);
    if (sub->count("--cfg")) s.cfg_lambda = static_cast<float>(cfg_lambda);
    s.seed = seed;
    return s;
  };
  auto load_bundle = [&](const RunConfig& cfg, const std::string& path) {
    ModelBundle bundle(cfg.model, cfg.seed);
    load_tokenizer_into(bundle, path);  // accepts tokenizer-only or full bundle files
    return bundle;
  };

  // tokenizer-train
  {
    auto* sub = app.add_subcommand("tokenizer-train", "overfit the multi-scale quantizer on the pair images");
    sub->add_option("--config", config_path)->required();
    sub->add_option("--data-dir", data_dir);
    sub->add_option("--out", out_path)->required();
    sub->add_option("--metrics", metrics_path);
    sub->add_option("--seed", seed_flag);
    sub->callback([&, sub] {
      RunConfig cfg = run_cfg();
      uint64_t seed = pick_seed(cfg, sub);
      auto pairs = load_pairs(data_dir);
      std::vector<Image> images;
      for (const auto& p : pairs) images.push_back(p.image);
      Rng rng(derive_seed(seed, "tokenizer-init"));
      Tokenizer tok(cfg.model.tokenizer, rng);
      VqTrainResult res = train_tokenizer(tok, images, cfg.tok_train, cfg.optim.warmup_ratio,
                                          metrics_path, seed);
      fs::path p(out_path);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      save_tokenizer_checkpoint(out_path, tok);
      std::cout << "tokenizer-train: steps=" << res.steps << " final_mse=" << res.final_mse
                << " checkpoint=" << out_path << "\n";
    });
  }

  // datagen
  {
    auto* sub = app.add_subcommand("datagen", "build corpora (stage1|instruct|synthetic|understand)");
    std::string mode;
    sub->add_option("mode", mode)->required()->check(
        CLI::IsMember({"stage1", "instruct", "synthetic", "understand"}));
    sub->add_option("--config", config_path)->required();
    sub->add_option("--data-dir", data_dir);
    sub->add_option("--out", out_path);
    sub->add_option("--n", n_flag);
    sub->add_option("--stage", stage_flag)->check(CLI::IsMember({2, 3}));
    sub->add_option("--style", style)->check(CLI::IsMember({"describe", "qa"}));
    sub->add_option("--shots", shots_flag);
    sub->add_option("--seeds", seeds_dir);
    sub->add_option("--seed", seed_flag);
    sub->callback([&, sub, &mode = mode] {
      RunConfig cfg = run_cfg();
      uint64_t seed = pick_seed(cfg, sub);
      const DatagenConfig& dg = cfg.datagen;
      if (mode == "synthetic") {
        auto pairs = build_synthetic_pairs(dg.classes, cfg.model.tokenizer.image_size,
                                           derive_seed(seed, "pairs"));
        write_pairs(data_dir, pairs, seed);
        std::cout << "datagen synthetic: " << pairs.size() << " pairs under " << data_dir << "\n";
        return;
      }
      auto pairs = load_pairs(data_dir);
      std::string out = out_path.empty()
                            ? (fs::path(data_dir) / default_manifest_name(mode, style, stage_flag)).string()
                            : out_path;
      std::vector<DataRecord> records;
      if (mode == "stage1") {
        int total = n_flag > 0 ? n_flag : dg.stage1_records;
        records = build_stage1_corpus(pairs, std::max(1, total / dg.classes), derive_seed(seed, "stage1"));
        save_manifest(out, records, "stage1", seed);
      } else if (mode == "instruct") {
        SeedPools pools = SeedPools::load_dir(dg.seed_pool_dir);
        LocalTemplateSource source;
        int shots = shots_flag >= 0 ? shots_flag : dg.shots;
        int total = n_flag > 0 ? n_flag : (stage_flag == 3 ? dg.gen_records : dg.instruct_records);
        const char* prefix = stage_flag == 3 ? "gen-" : "instruct-";
        records = build_instruct_corpus(pairs, pools, shots, source, total, stage_flag, prefix,
                                        derive_seed(seed, stage_flag == 3 ? "gen" : "instruct"));
        save_manifest(out, records, "instruct", seed);
      } else {  // understand
        int half = dg.understand_records / 2;
        int total = n_flag > 0 ? n_flag : (style == "describe" ? half : dg.understand_records - half);
        records = build_understand_corpus(pairs, style, total, derive_seed(seed, "und-" + style));
        save_manifest(out, records, "understand", seed);
      }
      std::cout << "datagen " << mode << ": " << records.size() << " records -> " << out << "\n";
    });
  }

  // train
  {
    auto* sub = app.add_subcommand("train", "run one training stage");
    int stage = 0;
    sub->add_option("--config", config_path)->required();
    sub->add_option("--stage", stage)->required()->check(CLI::IsMember({1, 2, 3}));
    sub->add_option("--data-dir", data_dir);
    sub->add_option("--init", init_path);
    sub->add_option("--out", out_path)->required();
    sub->add_option("--metrics", metrics_path);
    sub->add_option("--state-out", state_out);
    sub->add_option("--save-every", save_every);
    sub->add_option("--resume", resume_path);
    sub->add_option("--max-steps", max_steps);
    sub->add_option("--seed", seed_flag);
    sub->callback([&, sub, &stage = stage] {
      RunConfig cfg = run_cfg();
      uint64_t seed = pick_seed(cfg, sub);
      if (init_path.empty() && resume_path.empty())
        throw std::runtime_error("train: --init or --resume is required");
      ModelBundle bundle(cfg.model, seed);
      if (!init_path.empty()) load_tokenizer_into(bundle, init_path);
      const StageRunConfig& sc = cfg.stage(stage);
      std::vector<std::vector<DataRecord>> sources;
      for (const auto& name : sc.manifests)
        sources.push_back(load_manifest((fs::path(data_dir) / name).string()));
      StageIo io;
      io.metrics_path = metrics_path;
      io.checkpoint_out = out_path;
      io.state_out = state_out;
      io.save_every = save_every;
      io.resume_from = resume_path;
      io.max_steps = max_steps;
      fs::path p(out_path);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      TrainResult res = run_stage(bundle, sc, cfg.optim, sources, io, seed);
      std::cout << "train stage " << stage << ": steps=" << res.steps_run
                << " loss_text=" << res.last_loss_text << " loss_vis=" << res.last_loss_vis
                << " checkpoint=" << out_path << "\n";
    });
  }

  // generate
  {
    auto* sub = app.add_subcommand("generate", "decode an answer (and images) for one prompt");
    sub->add_option("--config", config_path)->required();
    sub->add_option("--ckpt", ckpt_path)->required();
    sub->add_option("--prompt", prompt_text)->required();
    sub->add_option("--out", out_path);
    sub->add_option("--seed", seed_flag);
    sub->add_option("--top-k", top_k);
    sub->add_option("--top-p", top_p);
    sub->add_option("--cfg", cfg_lambda);
    sub->add_option("--max-tokens", max_tokens);
    sub->add_flag("--force-trigger", force_trigger);
    sub->callback([&, sub] {
      RunConfig cfg = run_cfg();
      uint64_t seed = pick_seed(cfg, sub);
      ModelBundle bundle = load_bundle(cfg, ckpt_path);
      SamplerConfig sampler = sampler_of(cfg, sub, seed);
      MixedStream prompt = render_prompt({Turn{"user", prompt_text, {}, {}}},
                                         cfg.model.tokenizer.schedule, cfg.model.patches_per_image());
      std::vector<int> forced;
      if (force_trigger) forced.push_back(tok_id::kImageGenStart);
      DecodeResult res = decode_mixed(bundle, prompt, sampler, max_tokens, forced);
      std::cout << res.text << "\n";
      std::string stem = out_path.empty() ? "generated.ppm" : out_path;
      for (size_t i = 0; i < res.images.size(); ++i) {
        std::string path = stem;
        if (res.images.size() > 1) {
          fs::path sp(stem);
          path = (sp.parent_path() / (sp.stem().string() + "-" + std::to_string(i) + ".ppm")).string();
        }
        fs::path pp(path);
        if (pp.has_parent_path()) fs::create_directories(pp.parent_path());
        write_ppm(path, res.images[i]);
        std::cout << "image: " << path << "\n";
      }
    });
  }

  // chat
  {
    auto* sub = app.add_subcommand("chat", "interactive decode; reads user turns from stdin");
    sub->add_option("--config", config_path)->required();
    sub->add_option("--ckpt", ckpt_path)->required();
    sub->add_option("--out-dir", out_dir);
    sub->add_option("--seed", seed_flag);
    sub->add_option("--top-k", top_k);
    sub->add_option("--top-p", top_p);
    sub->add_option("--cfg", cfg_lambda);
    sub->add_option("--max-tokens", max_tokens);
    sub->add_flag("--force-trigger", force_trigger);
    sub->callback([&, sub] {
      RunConfig cfg = run_cfg();
      uint64_t seed = pick_seed(cfg, sub);
      ModelBundle bundle = load_bundle(cfg, ckpt_path);
      fs::create_directories(out_dir);
      int patches = cfg.model.patches_per_image();
      MixedStream stream;
      std::string line;
      int turn = 0;
      std::vector<int> forced;
      if (force_trigger) forced.push_back(tok_id::kImageGenStart);
      while (std::getline(std::cin, line)) {
        if (line == "/quit") break;
        if (line.empty()) continue;
        if (turn == 0)
          stream = render_prompt({Turn{"user", line, {}, {}}}, cfg.model.tokenizer.schedule, patches);
        else
          append_user_turn(stream, Turn{"user", line, {}, {}}, patches);
        SamplerConfig sampler = sampler_of(cfg, sub, derive_seed(seed, "chat-turn",
                                                                 static_cast<uint64_t>(turn)));
        DecodeResult res = decode_mixed(bundle, stream, sampler, max_tokens, forced);
        stream = res.stream;
        std::cout << "assistant: " << res.text << "\n";
        for (size_t i = 0; i < res.images.size(); ++i) {
          std::string path =
              (fs::path(out_dir) / ("chat-" + std::to_string(turn) + "-" + std::to_string(i) + ".ppm"))
                  .string();
          write_ppm(path, res.images[i]);
          std::cout << "image: " << path << "\n";
        }
        ++turn;
      }
    });
  }

  // encode
  {
    auto* sub = app.add_subcommand("encode", "image -> token pyramid JSON");
    sub->add_option("--config", config_path)->required();
    sub->add_option("--ckpt", ckpt_path)->required();
    sub->add_option("--image", image_path)->required();
    sub->add_option("--out", out_path);
    sub->callback([&] {
      RunConfig cfg = run_cfg();
      ModelBundle bundle = load_bundle(cfg, ckpt_path);
      Image img = read_ppm(image_path);
      TokenPyramid pyr = bundle.tokenizer().encode(img);
      std::string text = pyramid_to_json(pyr) + "\n";
      if (out_path.empty())
        std::cout << text;
      else
        atomic_write_file(out_path, text);
    });
  }

  // decode
  {
    auto* sub = app.add_subcommand("decode", "token pyramid JSON -> image");
    sub->add_option("--config", config_path)->required();
    sub->add_option("--ckpt", ckpt_path)->required();
    sub->add_option("--pyramid", pyramid_path)->required();
    sub->add_option("--out", out_path)->required();
    sub->callback([&] {
      RunConfig cfg = run_cfg();
      ModelBundle bundle = load_bundle(cfg, ckpt_path);
      std::ifstream in(pyramid_path, std::ios::binary);
      if (!in) throw std::runtime_error("decode: cannot open " + pyramid_path);
      std::ostringstream buf;
      buf << in.rdbuf();
      TokenPyramid pyr = pyramid_from_json(buf.str());
      Image img = bundle.tokenizer().decode(pyr);
      fs::path p(out_path);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      write_ppm(out_path, img);
      std::cout << "image: " << out_path << "\n";
    });
  }

  // inspect
  {
    auto* sub = app.add_subcommand("inspect", "print checkpoint schema, groups, and sizes");
    sub->add_option("--ckpt", ckpt_path)->required();
    sub->callback([&] {
      CkptFile file = load_checkpoint(ckpt_path);
      std::cout << "schema: " << file.meta.value("schema", "(none)") << "\n";
      std::vector<std::string> groups;
      std::map<std::string, std::pair<size_t, size_t>> stats;  // tensors, floats
      for (const auto& e : file.entries) {
        if (!stats.count(e.group)) groups.push_back(e.group);
        auto& st = stats[e.group];
        st.first += 1;
        st.second += e.data.size();
      }
      for (const auto& g : groups)
        std::cout << "group " << g << ": " << stats[g].first << " tensors, " << stats[g].second
                  << " floats\n";
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "vgpt: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
