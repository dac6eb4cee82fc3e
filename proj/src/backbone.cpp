#include "vgpt/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace vgpt {

void BackboneConfig::validate() const {
  if (layers < 1 || heads < 1 || width < 1 || ffn_mult < 1)
    throw std::invalid_argument("vgpt: backbone: non-positive dimension");
  if (width % heads != 0) throw std::invalid_argument("vgpt: backbone: width not divisible by heads");
  if (text_vocab < 257) throw std::invalid_argument("vgpt: backbone: vocab must cover bytes plus specials");
  if (max_seq < 1) throw std::invalid_argument("vgpt: backbone: bad max_seq");
  if (!learned_pos) throw std::invalid_argument("vgpt: backbone: only learned positions are implemented");
}

Tensor causal_mask_tensor(int seq) {
  std::vector<float> m(static_cast<size_t>(seq) * seq, 0.0f);
  for (int i = 0; i < seq; ++i)
    for (int j = i + 1; j < seq; ++j) m[static_cast<size_t>(i) * seq + j] = -1e9f;
  return Tensor::from_data({seq, seq}, std::move(m), false);
}

Backbone::Backbone(const BackboneConfig& cfg, Rng& init_rng) : cfg_(cfg) {
  cfg_.validate();
  const float std0 = 0.02f;
  int w = cfg_.width;
  tok_emb_ = Tensor::gaussian(init_rng, {cfg_.text_vocab, w}, std0, true);
  pos_emb_ = Tensor::gaussian(init_rng, {cfg_.max_seq, w}, std0, true);
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
    ly.w1 = Tensor::gaussian(init_rng, {w, w * cfg_.ffn_mult}, std0, true);
    ly.b1 = Tensor::zeros({w * cfg_.ffn_mult}, true);
    ly.w2 = Tensor::gaussian(init_rng, {w * cfg_.ffn_mult, w}, std0, true);
    ly.b2 = Tensor::zeros({w}, true);
    layers_.push_back(std::move(ly));
  }
  head_w_ = Tensor::gaussian(init_rng, {w, cfg_.text_vocab}, std0, true);
}

Tensor Backbone::embed_tokens(const std::vector<int>& ids) const {
  for (int id : ids)
    if (id < 0 || id >= cfg_.text_vocab) throw std::out_of_range("vgpt: token id out of range");
  return embedding_rows(tok_emb_, ids);
}

Backbone::Output Backbone::forward(const Tensor& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.dim(1) != cfg_.width)
    throw std::invalid_argument("vgpt: backbone: embeddings must be [seq x width]");
  int seq = embeddings.dim(0);
  if (seq > cfg_.max_seq) throw std::runtime_error("vgpt: backbone: sequence exceeds max_seq_len");
  std::vector<int> pos_ids(static_cast<size_t>(seq));
  for (int i = 0; i < seq; ++i) pos_ids[static_cast<size_t>(i)] = i;
  Tensor x = add(embeddings, embedding_rows(pos_emb_, pos_ids));
  Tensor mask = causal_mask_tensor(seq);
  int hd = cfg_.width / cfg_.heads;
  float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  for (const Layer& ly : layers_) {
    Tensor h = layer_norm(x);
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
      ctx_heads.push_back(matmul(softmax_rows(scores), vh));
    }
    Tensor attn_out = add_bias(matmul(concat_cols(ctx_heads), ly.wo), ly.bo);
    x = add(x, attn_out);
    Tensor h2 = layer_norm(x);
    Tensor ffn = add_bias(matmul(gelu(add_bias(matmul(h2, ly.w1), ly.b1)), ly.w2), ly.b2);
    x = add(x, ffn);
  }
  Output out;
  out.hidden = layer_norm(x);
  out.logits = matmul(out.hidden, head_w_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_params() {
  std::vector<std::pair<std::string, Tensor>> out = {{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
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
  }
  out.emplace_back("head.w", head_w_);
  return out;
}

}  // namespace vgpt
