#include "vgpt/tokenizer.hpp"

#include <json.hpp>

#include <cmath>
#include <stdexcept>

namespace vgpt {

void ScaleSchedule::validate() const {
  if (rs.empty()) throw std::invalid_argument("vgpt: schedule: empty");
  if (rs.front() < 1) throw std::invalid_argument("vgpt: schedule: r_1 must be >= 1");
  for (size_t i = 1; i < rs.size(); ++i)
    if (rs[i] <= rs[i - 1]) throw std::invalid_argument("vgpt: schedule: not strictly increasing");
}

void TokenizerConfig::validate() const {
  schedule.validate();
  if (downsample != 16) throw std::invalid_argument("vgpt: tokenizer: two stride-4 stages require downsample 16");
  if (image_size <= 0 || image_size % downsample != 0)
    throw std::invalid_argument("vgpt: tokenizer: image size not divisible by downsample factor");
  if (schedule.latent_side() != latent_side())
    throw std::invalid_argument("vgpt: tokenizer: schedule's last side must equal the latent side");
  if (vocab_size < 1 || latent_dim < 1) throw std::invalid_argument("vgpt: tokenizer: bad dims");
}

std::string pyramid_to_json(const TokenPyramid& p) {
  nlohmann::ordered_json j;
  j["schedule"] = p.schedule.rs;
  j["maps"] = p.maps;
  return j.dump();
}

TokenPyramid pyramid_from_json(const std::string& text) {
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(text);
  TokenPyramid p;
  p.schedule.rs = j.at("schedule").get<std::vector<int>>();
  p.schedule.validate();
  p.maps = j.at("maps").get<std::vector<std::vector<int>>>();
  if (p.maps.size() != p.schedule.rs.size())
    throw std::runtime_error("vgpt: pyramid: map count does not match schedule");
  for (size_t k = 0; k < p.maps.size(); ++k)
    if (static_cast<int>(p.maps[k].size()) != p.schedule.rs[k] * p.schedule.rs[k])
      throw std::runtime_error("vgpt: pyramid: map size mismatch at scale " + std::to_string(k));
  return p;
}

namespace {

Tensor image_to_tensor(const Image& img) {
  return Tensor::from_data({img.h, img.w, 3}, img.rgb, false);
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(2) != 3) throw std::invalid_argument("vgpt: tensor_to_image: expected [h,w,3]");
  Image img;
  img.h = t.dim(0);
  img.w = t.dim(1);
  img.rgb = t.data();
  return img;
}

}  // namespace

int nearest_code(const float* cell, const Tensor& codebook, int dim) {
  int vocab = codebook.dim(0);
  const float* cb = codebook.data().data();
  int best = 0;
  double best_d = 0.0;
  for (int v = 0; v < vocab; ++v) {
    const float* e = cb + static_cast<size_t>(v) * dim;
    double d = 0.0;
    for (int i = 0; i < dim; ++i) {
      double diff = static_cast<double>(cell[i]) - e[i];
      d += diff * diff;
    }
    if (v == 0 || d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

Tokenizer::Tokenizer(const TokenizerConfig& cfg, Rng& init_rng) : cfg_(cfg) {
  cfg_.validate();
  const float std0 = 0.02f;
  int d = cfg_.latent_dim;
  enc_w1_ = Tensor::gaussian(init_rng, {4 * 4 * 3, 64}, std0, true);
  enc_b1_ = Tensor::zeros({64}, true);
  enc_w2_ = Tensor::gaussian(init_rng, {4 * 4 * 64, d}, std0, true);
  enc_b2_ = Tensor::zeros({d}, true);
  dec_w1_ = Tensor::gaussian(init_rng, {d, 4 * 4 * 64}, std0, true);
  dec_b1_ = Tensor::zeros({4 * 4 * 64}, true);
  dec_w2_ = Tensor::gaussian(init_rng, {64, 4 * 4 * 3}, std0, true);
  dec_b2_ = Tensor::zeros({4 * 4 * 3}, true);
  for (int k = 0; k < cfg_.schedule.scales(); ++k) {
    // identity-initialized 3x3 refinement: center tap passes channels through
    std::vector<float> w(static_cast<size_t>(9 * d) * d, 0.0f);
    for (int c = 0; c < d; ++c) w[static_cast<size_t>((1 * 3 + 1) * d + c) * d + c] = 1.0f;
    ref_w_.push_back(Tensor::from_data({9 * d, d}, std::move(w), true));
    ref_b_.push_back(Tensor::zeros({d}, true));
  }
  codebook_ = Tensor::gaussian(init_rng, {cfg_.vocab_size, d}, 0.05f, true);
  usage_.assign(static_cast<size_t>(cfg_.vocab_size), 0);
}

Tensor Tokenizer::encode_latent_img(const Image& img) const {
  if (img.h != cfg_.image_size || img.w != cfg_.image_size)
    throw std::invalid_argument("vgpt: tokenizer: image resolution does not match config");
  Tensor x = image_to_tensor(img);
  int s1 = cfg_.image_size / 4;
  Tensor h = gelu(add_bias(matmul(im2col(x, 4, 4, 0), enc_w1_), enc_b1_));
  h = reshape(h, {s1, s1, 64});
  int s2 = s1 / 4;
  Tensor z = add_bias(matmul(im2col(h, 4, 4, 0), enc_w2_), enc_b2_);
  return reshape(z, {s2, s2, cfg_.latent_dim});
}

Tensor Tokenizer::encode_latent(const Image& img) const { return encode_latent_img(img); }

Tensor Tokenizer::decode_latent(const Tensor& latent) const {
  int s = cfg_.latent_side();
  if (latent.shape() != Shape{s, s, cfg_.latent_dim})
    throw std::invalid_argument("vgpt: tokenizer: latent shape mismatch");
  Tensor h = add_bias(matmul(reshape(latent, {s * s, cfg_.latent_dim}), dec_w1_), dec_b1_);
  h = gelu(unpatchify(h, s, s, 4, 64));
  int s1 = s * 4;
  Tensor y = add_bias(matmul(reshape(h, {s1 * s1, 64}), dec_w2_), dec_b2_);
  return unpatchify(y, s1, s1, 4, 3);
}

Tensor Tokenizer::refine(const Tensor& up, int scale) const {
  int s = cfg_.latent_side();
  Tensor y = add_bias(matmul(im2col(up, 3, 1, 1), ref_w_[static_cast<size_t>(scale)]),
                      ref_b_[static_cast<size_t>(scale)]);
  return reshape(y, {s, s, cfg_.latent_dim});
}

namespace {

std::vector<int> pick_indices(const Tensor& z, const Tensor& codebook, int dim) {
  int cells = z.dim(0) * z.dim(1);
  std::vector<int> idx(static_cast<size_t>(cells));
  for (int i = 0; i < cells; ++i)
    idx[static_cast<size_t>(i)] = nearest_code(z.data().data() + static_cast<size_t>(i) * dim, codebook, dim);
  return idx;
}

}  // namespace

TokenPyramid Tokenizer::quantize_latent_const(const Tensor& latent) const {
  NoGradGuard ng;
  int s = cfg_.latent_side(), d = cfg_.latent_dim;
  TokenPyramid pyr;
  pyr.schedule = cfg_.schedule;
  Tensor residual = add_scalar(latent, 0.0f);  // detached value copy under no-grad
  for (int k = 0; k < cfg_.schedule.scales(); ++k) {
    int r = cfg_.schedule.rs[static_cast<size_t>(k)];
    Tensor z = bilinear_resize(residual, r, r);
    std::vector<int> idx = pick_indices(z, codebook_, d);
    Tensor quant = reshape(embedding_rows(codebook_, idx), {r, r, d});
    Tensor refined = refine(bilinear_resize(quant, s, s), k);
    residual = sub(residual, refined);
    pyr.maps.push_back(std::move(idx));
  }
  return pyr;
}

TokenPyramid Tokenizer::quantize_latent(const Tensor& latent) {
  TokenPyramid pyr = quantize_latent_const(latent);
  for (const auto& m : pyr.maps)
    for (int id : m) ++usage_[static_cast<size_t>(id)];
  return pyr;
}

Tensor Tokenizer::partial_latent(const TokenPyramid& pyr, int upto_scale) const {
  int s = cfg_.latent_side(), d = cfg_.latent_dim;
  if (upto_scale < 0 || upto_scale > pyr.schedule.scales())
    throw std::invalid_argument("vgpt: partial_latent: scale out of range");
  Tensor acc = Tensor::zeros({s, s, d}, false);
  for (int k = 0; k < upto_scale; ++k) {
    int r = pyr.schedule.rs[static_cast<size_t>(k)];
    for (int id : pyr.maps[static_cast<size_t>(k)])
      if (id < 0 || id >= cfg_.vocab_size) throw std::out_of_range("vgpt: pyramid index out of range");
    Tensor quant = reshape(embedding_rows(codebook_, pyr.maps[static_cast<size_t>(k)]), {r, r, d});
    acc = add(acc, refine(bilinear_resize(quant, s, s), k));
  }
  return acc;
}

Tensor Tokenizer::dequantize_pyramid(const TokenPyramid& pyr) const {
  if (pyr.schedule.rs != cfg_.schedule.rs)
    throw std::invalid_argument("vgpt: pyramid schedule does not match tokenizer config");
  return partial_latent(pyr, pyr.schedule.scales());
}

TokenPyramid Tokenizer::encode(const Image& img) const {
  NoGradGuard ng;
  return quantize_latent_const(encode_latent_img(img));
}

Image Tokenizer::decode(const TokenPyramid& pyr) const {
  NoGradGuard ng;
  return tensor_to_image(clamp01(decode_latent(dequantize_pyramid(pyr))));
}

int Tokenizer::reseed_dead_entries(Rng& rng, const Tensor& latent_batch) {
  if (latent_batch.rank() != 2 || latent_batch.dim(1) != cfg_.latent_dim)
    throw std::invalid_argument("vgpt: reseed: latent batch must be [n x dim]");
  int n = latent_batch.dim(0);
  int reseeded = 0;
  std::vector<float>& cb = codebook_.mutable_data();
  for (int v = 0; v < cfg_.vocab_size; ++v) {
    if (usage_[static_cast<size_t>(v)] != 0) continue;
    int pick = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    for (int i = 0; i < cfg_.latent_dim; ++i)
      cb[static_cast<size_t>(v) * cfg_.latent_dim + i] =
          latent_batch.data()[static_cast<size_t>(pick) * cfg_.latent_dim + i];
    ++reseeded;
  }
  usage_.assign(static_cast<size_t>(cfg_.vocab_size), 0);
  return reseeded;
}

std::vector<std::pair<std::string, Tensor>> Tokenizer::named_params() {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"enc.w1", enc_w1_}, {"enc.b1", enc_b1_}, {"enc.w2", enc_w2_}, {"enc.b2", enc_b2_},
      {"dec.w1", dec_w1_}, {"dec.b1", dec_b1_}, {"dec.w2", dec_w2_}, {"dec.b2", dec_b2_}};
  for (size_t k = 0; k < ref_w_.size(); ++k) {
    out.emplace_back("ref." + std::to_string(k) + ".w", ref_w_[k]);
    out.emplace_back("ref." + std::to_string(k) + ".b", ref_b_[k]);
  }
  out.emplace_back("codebook", codebook_);
  return out;
}

std::vector<Tensor> Tokenizer::trainable_params() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params())
    if (t.requires_grad()) out.push_back(t);
  return out;
}

void Tokenizer::set_frozen(bool frozen) {
  for (auto& [name, t] : named_params()) t.set_requires_grad(!frozen);
}

VqLosses vq_train_step(Tokenizer& tok, const std::vector<Image>& batch, AdamW& opt, float lr,
                       float beta) {
  if (batch.empty()) throw std::invalid_argument("vgpt: vq_train_step: empty batch");
  opt.zero_grad();
  Tensor total, recon_sum, cb_sum, commit_sum;
  bool first = true;
  for (const Image& img : batch) {
    Tensor f = tok.encode_latent(img);
    TokenPyramid pyr = tok.quantize_latent(f);
    Tensor fhat = tok.dequantize_pyramid(pyr);
    Tensor fst = add(f, stopgrad(sub(fhat, f)));  // straight-through: value fhat, grad to f
    Tensor recon = mse(tok.decode_latent(fst), image_to_tensor(img));
    Tensor cb = mse(fhat, stopgrad(f));
    Tensor commit = mse(stopgrad(fhat), f);
    Tensor sample_total = add(add(recon, cb), scalar_mul(commit, beta));
    if (first) {
      total = sample_total;
      recon_sum = recon;
      cb_sum = cb;
      commit_sum = commit;
      first = false;
    } else {
      total = add(total, sample_total);
      recon_sum = add(recon_sum, recon);
      cb_sum = add(cb_sum, cb);
      commit_sum = add(commit_sum, commit);
    }
  }
  float inv_b = 1.0f / static_cast<float>(batch.size());
  Tensor mean_total = scalar_mul(total, inv_b);
  backward(mean_total);
  opt.step(lr);
  VqLosses out;
  out.recon = recon_sum.item() * inv_b;
  out.codebook = cb_sum.item() * inv_b;
  out.commit = commit_sum.item() * inv_b;
  out.total = mean_total.item();
  return out;
}

}  // namespace vgpt
