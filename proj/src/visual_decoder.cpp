#include "vgpt/visual_decoder.hpp"

#include <cmath>
#include <stdexcept>

namespace vgpt {

void VisualDecoderConfig::validate() const {
  if (layers < 1 || heads < 1 || width < 1) throw std::invalid_argument("vgpt: visual decoder: non-positive dimension");
  if (width % heads != 0) throw std::invalid_argument("vgpt: visual decoder: width not divisible by heads");
  if (vocab_size < 1 || latent_dim < 1) throw std::invalid_argument("vgpt: visual decoder: bad dims");
  if (cond_rows < 1) throw std::invalid_argument("vgpt: visual decoder: cond_rows must be >= 1");
  schedule.validate();
}

int block_of(int pos, const ScaleSchedule& schedule, int cond_rows) {
  if (pos < 0) throw std::invalid_argument("vgpt: block_of: negative position");
  if (pos < cond_rows) return 0;
  int at = cond_rows;
  for (int k = 0; k < schedule.scales(); ++k) {
    at += schedule.rs[static_cast<size_t>(k)] * schedule.rs[static_cast<size_t>(k)];
    if (pos < at) return k + 1;
  }
  throw std::invalid_argument("vgpt: block_of: position beyond schedule");
}

BlockCausalMask build_block_causal_mask(const ScaleSchedule& schedule, int cond_rows) {
  schedule.validate();
  BlockCausalMask m;
  m.t = cond_rows + schedule.total_cells();
  m.allowed.assign(static_cast<size_t>(m.t) * m.t, 0);
  std::vector<int> blk(static_cast<size_t>(m.t));
  for (int i = 0; i < m.t; ++i) blk[static_cast<size_t>(i)] = block_of(i, schedule, cond_rows);
  for (int i = 0; i < m.t; ++i)
    for (int j = 0; j < m.t; ++j)
      if (blk[static_cast<size_t>(j)] <= blk[static_cast<size_t>(i)])
        m.allowed[static_cast<size_t>(i) * m.t + j] = 1;
  return m;
}

namespace {

Tensor mask_to_tensor(const BlockCausalMask& m, int t) {
  std::vector<float> data(static_cast<size_t>(t) * t, 0.0f);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      if (!m.at(i, j)) data[static_cast<size_t>(i) * t + j] = -1e9f;
  return Tensor::from_data({t, t}, std::move(data), false);
}

}  // namespace

VisualDecoder::VisualDecoder(const VisualDecoderConfig& cfg, Rng& init_rng) : cfg_(cfg) {
  cfg_.validate();
  const float std0 = 0.02f;
  int w = cfg_.width;
  in_w_ = Tensor::gaussian(init_rng, {cfg_.latent_dim, w}, std0, true);
  in_b_ = Tensor::zeros({w}, true);
  pos_emb_ = Tensor::gaussian(init_rng, {cfg_.schedule.total_cells(), w}, std0, true);
  for (int l = 0; l < cfg_.layers; ++l) {
    Layer ly;
    ly.wq = Tensor::gaussian(init_rng, {w, w}, std0, true);
    ly.bq = Tensor::zeros({w}, true);
    ly.wk = Tensor::gaussian(init_rng, {w, w}, std0, true);
    ly.bk = Tensor::zeros({w}, true);
    ly.wv = Tensor::gaussian(init_rng, {w, w}, std0, true);
    ly.bv = Tensor::zeros({w}, true);
    ly.wo = Tensor::gaussian(init_rng, {w, w}, std0, true);
    ly.bo = Tensor::zeros({w}, true);
    ly.w1 = Tensor::gaussian(init_rng, {w, w * 4}, std0, true);
    ly.b1 = Tensor::zeros({w * 4}, true);
    ly.w2 = Tensor::gaussian(init_rng, {w * 4, w}, std0, true);
    ly.b2 = Tensor::zeros({w}, true);
    ly.ada_w = Tensor::zeros({w, 4 * w}, true);
    ly.ada_b = Tensor::zeros({4 * w}, true);
    layers_.push_back(std::move(ly));
  }
  final_ada_w_ = Tensor::zeros({w, 2 * w}, true);
  final_ada_b_ = Tensor::zeros({2 * w}, true);
  head_w_ = Tensor::gaussian(init_rng, {w, cfg_.vocab_size}, std0, true);
}

Tensor VisualDecoder::assemble_inputs(const Tensor& condition, const std::vector<Tensor>& contents) const {
  if (condition.rank() != 2 || condition.dim(0) != cfg_.cond_rows || condition.dim(1) != cfg_.width)
    throw std::invalid_argument("vgpt: visual decoder: condition must be [cond_rows x width]");
  if (contents.empty() || static_cast<int>(contents.size()) > cfg_.schedule.scales())
    throw std::invalid_argument("vgpt: visual decoder: contents must cover >= 1 leading scale");
  std::vector<Tensor> rows;
  rows.push_back(condition);
  int flat = 0;
  for (size_t k = 0; k < contents.size(); ++k) {
    int r = cfg_.schedule.rs[k];
    Tensor content = (k == 0) ? Tensor::zeros({r * r, cfg_.latent_dim}, false) : contents[k];
    if (content.rank() != 2 || content.dim(0) != r * r || content.dim(1) != cfg_.latent_dim)
      throw std::invalid_argument("vgpt: visual decoder: content rows mismatch at scale " + std::to_string(k));
    std::vector<int> pos_ids(static_cast<size_t>(r * r));
    for (int i = 0; i < r * r; ++i) pos_ids[static_cast<size_t>(i)] = flat + i;
    Tensor embedded = add(add_bias(matmul(content, in_w_), in_b_), embedding_rows(pos_emb_, pos_ids));
    rows.push_back(embedded);
    flat += r * r;
  }
  return concat_rows(rows);
}

VisualDecoder::Output VisualDecoder::forward(const Tensor& inputs) const {
  if (inputs.rank() != 2 || inputs.dim(1) != cfg_.width)
    throw std::invalid_argument("vgpt: visual decoder: inputs must be [t x width]");
  int t = inputs.dim(0);
  BlockCausalMask full = build_block_causal_mask(cfg_.schedule, cfg_.cond_rows);
  if (t > full.t) throw std::invalid_argument("vgpt: visual decoder: inputs exceed schedule length");
  // truncation must end on a block boundary
  if (t < full.t && t != cfg_.cond_rows) {
    int at = cfg_.cond_rows;
    bool boundary = false;
    for (int r : cfg_.schedule.rs) {
      at += r * r;
      if (at == t) {
        boundary = true;
        break;
      }
    }
    if (!boundary) throw std::invalid_argument("vgpt: visual decoder: truncated input not at a block boundary");
  }
  Tensor mask = mask_to_tensor(full, t);
  Tensor cond_row = slice_rows(inputs, 0, 1);
  int hd = cfg_.width / cfg_.heads;
  float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  int w = cfg_.width;
  Tensor x = inputs;
  auto modulate = [&](const Tensor& h, const Tensor& sb, int pair) {
    Tensor s = reshape(slice_cols(sb, pair * 2 * w, w), {w});
    Tensor b = reshape(slice_cols(sb, pair * 2 * w + w, w), {w});
    return add_bias(mul_rows(h, add_scalar(s, 1.0f)), b);
  };
  for (const Layer& ly : layers_) {
    Tensor sb;
    if (cfg_.adaln) sb = add_bias(matmul(cond_row, ly.ada_w), ly.ada_b);  // [1 x 4w]
    Tensor h = layer_norm(x);
    if (cfg_.adaln) h = modulate(h, sb, 0);
    Tensor q = add_bias(matmul(h, ly.wq), ly.bq);
    Tensor k = add_bias(matmul(h, ly.wk), ly.bk);
    Tensor v = add_bias(matmul(h, ly.wv), ly.bv);
    std::vector<Tensor> ctx_heads;
    ctx_heads.reserve(static_cast<size_t>(cfg_.heads));
    for (int head = 0; head < cfg_.heads; ++head) {
      Tensor qh = slice_cols(q, head * hd, hd);
      Tensor kh = slice_cols(k, head * hd, hd);
      Tensor vh = slice_cols(v, head * hd, hd);
      Tensor scores = add(scalar_mul(matmul(qh, transpose2d(kh)), inv_sqrt), mask);
      // double-accumulated context keeps within-block row permutations bit-exact
      ctx_heads.push_back(matmul_stable(softmax_rows(scores), vh));
    }
    x = add(x, add_bias(matmul(concat_cols(ctx_heads), ly.wo), ly.bo));
    Tensor h2 = layer_norm(x);
    if (cfg_.adaln) h2 = modulate(h2, sb, 1);
    Tensor ffn = add_bias(matmul(gelu(add_bias(matmul(h2, ly.w1), ly.b1)), ly.w2), ly.b2);
    x = add(x, ffn);
  }
  Tensor h = layer_norm(x);
  if (cfg_.adaln) {
    Tensor sbf = add_bias(matmul(cond_row, final_ada_w_), final_ada_b_);
    h = modulate(h, sbf, 0);
  }
  Output out;
  out.hidden = h;
  out.logits = matmul(h, head_w_);
  return out;
}

std::vector<Tensor> VisualDecoder::teacher_contents(const Tokenizer& tok, const TokenPyramid& pyr) const {
  if (pyr.schedule.rs != cfg_.schedule.rs)
    throw std::invalid_argument("vgpt: visual decoder: pyramid schedule mismatch");
  std::vector<Tensor> contents;
  for (int k = 0; k < cfg_.schedule.scales(); ++k) {
    int r = cfg_.schedule.rs[static_cast<size_t>(k)];
    if (k == 0) {
      contents.push_back(Tensor::zeros({r * r, cfg_.latent_dim}, false));
      continue;
    }
    Tensor partial = tok.partial_latent(pyr, k);  // cumulative over scales < k
    contents.push_back(reshape(bilinear_resize(partial, r, r), {r * r, cfg_.latent_dim}));
  }
  return contents;
}

Tensor VisualDecoder::visual_ce(const Tensor& logits, const TokenPyramid& pyr) const {
  int t = cfg_.cond_rows + cfg_.schedule.total_cells();
  if (logits.rank() != 2 || logits.dim(0) != t || logits.dim(1) != cfg_.vocab_size)
    throw std::invalid_argument("vgpt: visual_ce: logits shape mismatch");
  std::vector<int> targets(static_cast<size_t>(t), 0);
  std::vector<uint8_t> mask(static_cast<size_t>(t), 0);
  int at = cfg_.cond_rows;
  for (int k = 0; k < cfg_.schedule.scales(); ++k) {
    for (int id : pyr.maps[static_cast<size_t>(k)]) {
      targets[static_cast<size_t>(at)] = id;
      mask[static_cast<size_t>(at)] = 1;
      ++at;
    }
  }
  return cross_entropy(logits, targets, mask);
}

std::vector<std::pair<std::string, Tensor>> VisualDecoder::named_params() {
  std::vector<std::pair<std::string, Tensor>> out = {{"in.w", in_w_}, {"in.b", in_b_}, {"pos_emb", pos_emb_}};
  for (size_t l = 0; l < layers_.size(); ++l) {
    Layer& ly = layers_[l];
    std::string p = "layer." + std::to_string(l) + ".";
    out.emplace_back(p + "attn.wq", ly.wq);
    out.emplace_back(p + "attn.bq", ly.bq);
    out.emplace_back(p + "attn.wk", ly.wk);
    out.emplace_back(p + "attn.bk", ly.bk);
    out.emplace_back(p + "attn.wv", ly.wv);
    out.emplace_back(p + "attn.bv", ly.bv);
    out.emplace_back(p + "attn.wo", ly.wo);
    out.emplace_back(p + "attn.bo", ly.bo);
    out.emplace_back(p + "ffn.w1", ly.w1);
    out.emplace_back(p + "ffn.b1", ly.b1);
    out.emplace_back(p + "ffn.w2", ly.w2);
    out.emplace_back(p + "ffn.b2", ly.b2);
    out.emplace_back(p + "ada.w", ly.ada_w);
    out.emplace_back(p + "ada.b", ly.ada_b);
  }
  out.emplace_back("final.ada.w", final_ada_w_);
  out.emplace_back("final.ada.b", final_ada_b_);
  out.emplace_back("head.w", head_w_);
  return out;
}

}  // namespace vgpt
