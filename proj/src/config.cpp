#include "vgpt/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vgpt {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string strip_comment(const std::string& line) {
  size_t at = line.find_first_of("#;");
  return at == std::string::npos ? line : line.substr(0, at);
}

}  // namespace

IniFile IniFile::parse_string(const std::string& text) {
  IniFile ini;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw std::runtime_error("vgpt: config: unterminated section header at line " + std::to_string(lineno));
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty())
        throw std::runtime_error("vgpt: config: empty section name at line " + std::to_string(lineno));
      ini.sections_[section];
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("vgpt: config: expected key = value at line " + std::to_string(lineno));
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("vgpt: config: empty key at line " + std::to_string(lineno));
    ini.sections_[section][key] = val;
  }
  return ini;
}

IniFile IniFile::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vgpt: config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str());
}

bool IniFile::has(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  return s != sections_.end() && s->second.count(key) > 0;
}

std::string IniFile::get(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s != sections_.end()) {
    auto k = s->second.find(key);
    if (k != s->second.end()) return k->second;
  }
  throw std::runtime_error("vgpt: config: missing [" + section + "] " + key);
}

std::string IniFile::get_or(const std::string& section, const std::string& key,
                            const std::string& dflt) const {
  return has(section, key) ? get(section, key) : dflt;
}

namespace {
int to_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::runtime_error("vgpt: config: bad integer for " + where + ": '" + v + "'");
  }
}
double to_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::runtime_error("vgpt: config: bad number for " + where + ": '" + v + "'");
  }
}
}  // namespace

int IniFile::get_int(const std::string& section, const std::string& key) const {
  return to_int(get(section, key), "[" + section + "] " + key);
}
int IniFile::get_int_or(const std::string& section, const std::string& key, int dflt) const {
  return has(section, key) ? get_int(section, key) : dflt;
}
double IniFile::get_double(const std::string& section, const std::string& key) const {
  return to_double(get(section, key), "[" + section + "] " + key);
}
double IniFile::get_double_or(const std::string& section, const std::string& key, double dflt) const {
  return has(section, key) ? get_double(section, key) : dflt;
}
bool IniFile::get_bool_or(const std::string& section, const std::string& key, bool dflt) const {
  if (!has(section, key)) return dflt;
  std::string v = get(section, key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::runtime_error("vgpt: config: bad boolean for [" + section + "] " + key + ": '" + v + "'");
}
uint64_t IniFile::get_u64_or(const std::string& section, const std::string& key, uint64_t dflt) const {
  if (!has(section, key)) return dflt;
  std::string v = get(section, key);
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw std::runtime_error("vgpt: config: bad unsigned for [" + section + "] " + key + ": '" + v + "'");
  }
}

std::vector<std::string> IniFile::get_list(const std::string& section, const std::string& key) const {
  std::string v = get(section, key);
  std::vector<std::string> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw std::runtime_error("vgpt: config: empty list for [" + section + "] " + key);
  return out;
}
std::vector<double> IniFile::get_double_list(const std::string& section, const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : get_list(section, key)) out.push_back(to_double(s, "[" + section + "] " + key));
  return out;
}
std::vector<int> IniFile::get_int_list(const std::string& section, const std::string& key) const {
  std::vector<int> out;
  for (const auto& s : get_list(section, key)) out.push_back(to_int(s, "[" + section + "] " + key));
  return out;
}

const StageRunConfig& RunConfig::stage(int id) const {
  if (id < 1 || id > 3) throw std::invalid_argument("vgpt: config: stage id must be 1, 2, or 3");
  return stages[id - 1];
}

RunConfig run_config_from_ini(const IniFile& ini) {
  RunConfig c;
  c.seed = ini.get_u64_or("run", "seed", 1234);

  ModelConfig& m = c.model;
  m.tokenizer.image_size = ini.get_int_or("model", "image_size", 64);
  m.tokenizer.downsample = ini.get_int_or("model", "downsample", 16);
  m.tokenizer.latent_dim = ini.get_int_or("model", "latent_dim", 32);
  m.tokenizer.vocab_size = ini.get_int_or("model", "vocab_size", 256);
  if (ini.has("model", "schedule")) m.tokenizer.schedule.rs = ini.get_int_list("model", "schedule");
  m.backbone.layers = ini.get_int_or("model", "llm_layers", 4);
  m.backbone.heads = ini.get_int_or("model", "llm_heads", 4);
  m.backbone.width = ini.get_int_or("model", "llm_width", 128);
  m.backbone.ffn_mult = ini.get_int_or("model", "ffn_mult", 4);
  m.backbone.text_vocab = ini.get_int_or("model", "text_vocab", 512);
  m.backbone.max_seq = ini.get_int_or("model", "max_seq", 512);
  m.decoder.layers = ini.get_int_or("model", "dec_layers", 4);
  m.decoder.heads = ini.get_int_or("model", "dec_heads", 4);
  m.decoder.width = ini.get_int_or("model", "dec_width", 128);
  m.decoder.adaln = ini.get_bool_or("model", "adaln", true);
  m.decoder.cond_rows = ini.get_int_or("model", "cond_rows", 1);
  m.decoder.vocab_size = m.tokenizer.vocab_size;
  m.decoder.latent_dim = m.tokenizer.latent_dim;
  m.decoder.schedule = m.tokenizer.schedule;
  m.vision_patch = ini.get_int_or("model", "vision_patch", 16);
  m.vision_dim = ini.get_int_or("model", "vision_dim", 64);
  m.validate();

  c.sampler.top_k = ini.get_int_or("sampler", "top_k", 900);
  c.sampler.top_p = static_cast<float>(ini.get_double_or("sampler", "top_p", 0.95));
  c.sampler.cfg_lambda = static_cast<float>(ini.get_double_or("sampler", "cfg_lambda", 1.5));

  c.optim.name = ini.get_or("optimizer", "name", "adamw");
  c.optim.schedule = ini.get_or("optimizer", "schedule", "cosine");
  c.optim.warmup_ratio = ini.get_double_or("optimizer", "warmup_ratio", 0.1);
  c.optim.weight_decay = ini.get_double_or("optimizer", "weight_decay", 0.0);
  if (c.optim.name != "adamw")
    throw std::runtime_error("vgpt: config: only the adamw optimizer is implemented");
  if (c.optim.schedule != "cosine")
    throw std::runtime_error("vgpt: config: only the cosine schedule is implemented");

  c.tok_train.lr = ini.get_double_or("tokenizer_train", "lr", 1e-3);
  c.tok_train.epochs = ini.get_int_or("tokenizer_train", "epochs", 100);
  c.tok_train.batch_size = ini.get_int_or("tokenizer_train", "batch_size", 8);
  c.tok_train.beta = ini.get_double_or("tokenizer_train", "beta", 0.25);

  c.datagen.classes = ini.get_int_or("datagen", "classes", 16);
  c.datagen.stage1_records = ini.get_int_or("datagen", "stage1_records", 512);
  c.datagen.instruct_records = ini.get_int_or("datagen", "instruct_records", 256);
  c.datagen.gen_records = ini.get_int_or("datagen", "gen_records", 512);
  c.datagen.understand_records = ini.get_int_or("datagen", "understand_records", 256);
  c.datagen.shots = ini.get_int_or("datagen", "shots", 4);
  c.datagen.seed_pool_dir = ini.get_or("datagen", "seed_pool_dir", "data/seeds");

  for (int i = 0; i < 3; ++i) {
    std::string sec = "stage" + std::to_string(i + 1);
    StageRunConfig& st = c.stages[i];
    st.id = i + 1;
    st.lr = ini.get_double(sec, "lr");
    st.epochs = ini.get_int(sec, "epochs");
    st.batch_size = ini.get_int_or(sec, "batch_size", 8);
    st.manifests = ini.get_list(sec, "manifests");
    st.mixture_weights = ini.get_double_list(sec, "mixture_weights");
    st.epoch_size = ini.get_int_or(sec, "epoch_size", 0);
    st.w_text = ini.get_double_or(sec, "w_text", 1.0);
    st.w_vis = ini.get_double_or(sec, "w_vis", 1.0);
    if (st.manifests.size() != st.mixture_weights.size())
      throw std::runtime_error("vgpt: config: [" + sec + "] manifests and mixture_weights differ in length");
    if (st.lr <= 0) throw std::runtime_error("vgpt: config: [" + sec + "] lr must be positive");
    if (st.epochs <= 0) throw std::runtime_error("vgpt: config: [" + sec + "] epochs must be positive");
    if (st.batch_size <= 0) throw std::runtime_error("vgpt: config: [" + sec + "] batch_size must be positive");
    bool any = false;
    for (double w : st.mixture_weights) {
      if (w < 0) throw std::runtime_error("vgpt: config: [" + sec + "] negative mixture weight");
      if (w > 0) any = true;
    }
    if (!any) throw std::runtime_error("vgpt: config: [" + sec + "] mixture weights are all zero");
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_ini(IniFile::parse_file(path));
}

}  // namespace vgpt
