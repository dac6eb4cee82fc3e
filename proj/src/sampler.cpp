#include "vgpt/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace vgpt {

int sample_from_logits(const std::vector<float>& logits, int top_k, float top_p, Rng& rng) {
  if (logits.empty()) throw std::invalid_argument("vgpt: sampler: empty logits");
  if (top_k <= 0) throw std::invalid_argument("vgpt: sampler: top_k must be positive");
  if (!(top_p > 0.0f) || top_p > 1.0f)
    throw std::invalid_argument("vgpt: sampler: top_p must be in (0, 1]");
  size_t n = logits.size();
  double mx = logits[0];
  for (float l : logits) mx = std::max(mx, static_cast<double>(l));
  std::vector<double> p(n);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });

  size_t keep = std::min<size_t>(static_cast<size_t>(top_k), n);
  // shortest prefix reaching top_p mass (never empty)
  double cum = 0.0;
  size_t cut = keep;
  for (size_t i = 0; i < keep; ++i) {
    cum += p[static_cast<size_t>(order[i])];
    if (cum >= static_cast<double>(top_p)) {
      cut = i + 1;
      break;
    }
  }
  double total = 0.0;
  for (size_t i = 0; i < cut; ++i) total += p[static_cast<size_t>(order[i])];

  double u = rng.uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i < cut; ++i) {
    acc += p[static_cast<size_t>(order[i])];
    if (u < acc) return order[i];
  }
  return order[cut - 1];
}

TokenPyramid generate_pyramid(const ModelBundle& bundle, const Tensor& cond_hidden,
                              const SamplerConfig& cfg, Rng& rng) {
  const auto& dec = bundle.decoder();
  const auto& tok = bundle.tokenizer();
  const ScaleSchedule& sched = dec.config().schedule;
  int cond_rows = dec.config().cond_rows;
  int width = bundle.config().backbone.width;
  int dim = dec.config().latent_dim;
  if (cond_hidden.shape() != Shape{cond_rows, width})
    throw std::invalid_argument("vgpt: sampler: condition hidden rows have the wrong shape");

  Rng noise_rng = rng.split();
  Rng cell_rng = rng.split();

  NoGradGuard ng;
  Tensor cond_c = bundle.proj_gen_in().apply(cond_hidden);
  std::vector<float> nz(static_cast<size_t>(cond_hidden.numel()));
  for (float& v : nz) v = static_cast<float>(noise_rng.gaussian());
  Tensor cond_u = bundle.proj_gen_in().apply(Tensor::from_data(cond_hidden.shape(), nz));

  double lam = cfg.cfg_lambda;
  TokenPyramid pyr;
  pyr.schedule = sched;
  int vocab = dec.config().vocab_size;
  for (int k = 0; k < sched.scales(); ++k) {
    std::vector<Tensor> contents;
    contents.push_back(Tensor::zeros({sched.rs[0] * sched.rs[0], dim}));
    for (int j = 1; j <= k; ++j) {
      int r = sched.rs[static_cast<size_t>(j)];
      Tensor part = tok.partial_latent(pyr, j);
      contents.push_back(reshape(bilinear_resize(part, r, r), {r * r, dim}));
    }
    auto out_c = dec.forward(dec.assemble_inputs(cond_c, contents));
    auto out_u = dec.forward(dec.assemble_inputs(cond_u, contents));
    int row0 = cond_rows;
    for (int j = 0; j < k; ++j) row0 += sched.rs[static_cast<size_t>(j)] * sched.rs[static_cast<size_t>(j)];
    int cells = sched.rs[static_cast<size_t>(k)] * sched.rs[static_cast<size_t>(k)];
    const auto& lc = out_c.logits.data();
    const auto& lu = out_u.logits.data();
    std::vector<int> map(static_cast<size_t>(cells));
    std::vector<float> combined(static_cast<size_t>(vocab));
    for (int c = 0; c < cells; ++c) {
      size_t off = static_cast<size_t>(row0 + c) * static_cast<size_t>(vocab);
      for (int v = 0; v < vocab; ++v)
        combined[static_cast<size_t>(v)] =
            static_cast<float>((1.0 + lam) * lc[off + static_cast<size_t>(v)] -
                               lam * lu[off + static_cast<size_t>(v)]);
      map[static_cast<size_t>(c)] = sample_from_logits(combined, cfg.top_k, cfg.top_p, cell_rng);
    }
    pyr.maps.push_back(std::move(map));
  }
  return pyr;
}

Tensor decoder_slot_features(const ModelBundle& bundle, const Tensor& cond_hidden,
                             const TokenPyramid& pyr) {
  NoGradGuard ng;
  const auto& dec = bundle.decoder();
  Tensor cond = bundle.proj_gen_in().apply(cond_hidden);
  auto out = dec.forward(dec.assemble_inputs(cond, dec.teacher_contents(bundle.tokenizer(), pyr)));
  Tensor slots = slice_rows(out.hidden, dec.config().cond_rows, pyr.schedule.total_cells());
  return bundle.proj_gen_out().apply(slots);
}

namespace {

void append_id(MixedStream& s, int id, Seg tag) {
  s.ids.push_back(id);
  s.tags.push_back(tag);
  s.loss_mask_text.push_back(0);
}

}  // namespace

DecodeResult decode_mixed(const ModelBundle& bundle, const MixedStream& prompt,
                          const SamplerConfig& cfg, int max_new_tokens,
                          const std::vector<int>& forced_prefix) {
  if (max_new_tokens <= 0) throw std::invalid_argument("vgpt: decode: max_new_tokens must be positive");
  NoGradGuard ng;
  const ScaleSchedule& sched = bundle.config().tokenizer.schedule;
  int text_vocab = bundle.config().backbone.text_vocab;
  DecodeResult res;
  res.stream = prompt;
  MixedStream& s = res.stream;

  Rng root(cfg.seed);
  Rng text_rng = root.split();

  // fill slot features for spans already present in the prompt, in order
  std::vector<std::pair<int, Tensor>> gen_rows;
  for (size_t i = 0; i < s.gen_slot_spans.size(); ++i) {
    if (i >= s.pyramids.size())
      throw std::invalid_argument("vgpt: decode: prompt gen span without pyramid payload");
    auto [start, len] = s.gen_slot_spans[i];
    Tensor emb = assemble_embeddings(bundle, s, gen_rows);
    auto out = bundle.llm().forward(slice_rows(emb, 0, start));
    Tensor h = slice_rows(out.hidden, start - 1, 1);
    gen_rows.emplace_back(static_cast<int>(i), decoder_slot_features(bundle, h, s.pyramids[i]));
  }

  int appended = 0;
  size_t fi = 0;
  while (appended < max_new_tokens) {
    Tensor emb = assemble_embeddings(bundle, s, gen_rows);
    auto out = bundle.llm().forward(emb);
    int last = s.size() - 1;
    const auto& ld = out.logits.data();
    int next;
    if (fi < forced_prefix.size()) {
      next = forced_prefix[fi++];
    } else {
      std::vector<float> masked(static_cast<size_t>(text_vocab));
      size_t off = static_cast<size_t>(last) * static_cast<size_t>(text_vocab);
      for (int v = 0; v < text_vocab; ++v) {
        bool ok = v < 256 || v == tok_id::kEos || v == tok_id::kImageGenStart;
        masked[static_cast<size_t>(v)] = ok ? ld[off + static_cast<size_t>(v)] : -1e30f;
      }
      next = sample_from_logits(masked, cfg.top_k, cfg.top_p, text_rng);
    }

    if (next == tok_id::kImageGenStart) {
      int cells = sched.total_cells();
      if (appended + 2 + cells > max_new_tokens)
        throw std::runtime_error("vgpt: decode: generation span does not fit in the token budget");
      append_id(s, tok_id::kImageGenStart, Seg::special);
      ++appended;
      Tensor emb2 = assemble_embeddings(bundle, s, gen_rows);
      auto out2 = bundle.llm().forward(emb2);
      Tensor h = slice_rows(out2.hidden, s.size() - 1, 1);
      Rng img_rng = root.split();
      TokenPyramid pyr = generate_pyramid(bundle, h, cfg, img_rng);
      Tensor slots = decoder_slot_features(bundle, h, pyr);
      int span_start = s.size();
      for (int c = 0; c < cells; ++c) append_id(s, tok_id::kImageGen, Seg::gen_slot);
      appended += cells;
      s.gen_slot_spans.emplace_back(span_start, cells);
      append_id(s, tok_id::kImageGenEnd, Seg::special);
      ++appended;
      s.pyramids.push_back(pyr);
      gen_rows.emplace_back(static_cast<int>(s.gen_slot_spans.size()) - 1, slots);
      res.pyramids.push_back(pyr);
      res.images.push_back(bundle.tokenizer().decode(pyr));
      res.text += "<image_gen>";
    } else if (next == tok_id::kEos) {
      append_id(s, tok_id::kEos, Seg::special);
      ++appended;
      res.hit_eos = true;
      break;
    } else if (next >= 0 && next < 256) {
      append_id(s, next, Seg::text);
      ++appended;
      res.text.push_back(static_cast<char>(static_cast<unsigned char>(next)));
    } else {
      throw std::runtime_error("vgpt: decode: illegal token id " + std::to_string(next));
    }
  }
  s.validate(sched);
  return res;
}

}  // namespace vgpt
