#include "vgpt/datagen.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace vgpt {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

ordered_json record_to_json(const DataRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["stage"] = r.stage;
  j["prompt"] = r.prompt;
  j["answer"] = r.answer;
  j["image"] = r.image;
  j["caption"] = r.caption;
  return j;
}

DataRecord record_from_json(const ordered_json& j) {
  DataRecord r;
  r.id = j.at("id").get<std::string>();
  r.stage = j.at("stage").get<int>();
  r.prompt = j.at("prompt").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  r.image = j.at("image").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  if (r.id.empty() || r.prompt.empty() || r.answer.empty())
    throw std::runtime_error("vgpt: datagen: record with empty id/prompt/answer");
  return r;
}

}  // namespace

void save_manifest(const std::string& path, const std::vector<DataRecord>& records,
                   const std::string& mode, uint64_t seed) {
  std::string body;
  for (const auto& r : records) {
    body += record_to_json(r).dump();
    body += '\n';
  }
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  atomic_write_file(path, body);
  ordered_json meta;
  meta["mode"] = mode;
  meta["count"] = records.size();
  meta["seed"] = seed;
  atomic_write_file(path + ".meta.json", meta.dump(2) + "\n");
}

std::vector<DataRecord> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vgpt: datagen: cannot open manifest " + path);
  fs::path dir = fs::path(path).parent_path();
  std::vector<DataRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    DataRecord r;
    try {
      r = record_from_json(ordered_json::parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error("vgpt: datagen: bad record at " + path + ":" + std::to_string(lineno) +
                               ": " + e.what());
    }
    if (!r.image.empty() && !fs::path(r.image).is_absolute()) r.image = (dir / r.image).string();
    out.push_back(std::move(r));
  }
  if (out.empty()) throw std::runtime_error("vgpt: datagen: empty manifest " + path);
  return out;
}

namespace {

struct Palette {
  std::string name;
  uint8_t r, g, b;
};
const std::vector<Palette> kColors = {
    {"red", 220, 40, 40}, {"green", 40, 180, 70}, {"blue", 45, 90, 220}, {"yellow", 235, 200, 40}};
const std::vector<std::string> kShapes = {"circle", "square", "triangle", "cross"};

bool inside_shape(const std::string& shape, int x, int y, int cx, int cy, int r) {
  int dx = x - cx, dy = y - cy;
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") {
    int h = (r * 9) / 10;
    return std::abs(dx) <= h && std::abs(dy) <= h;
  }
  if (shape == "triangle") {
    if (dy < -r || dy > r) return false;
    int half = ((dy + r) * r) / (2 * r);  // width grows from apex down
    return std::abs(dx) <= half;
  }
  // cross
  int arm = std::max(1, r / 3);
  return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
}

std::string slug(const std::string& class_name) {
  std::string s = class_name;
  std::replace(s.begin(), s.end(), ' ', '_');
  return s;
}

}  // namespace

std::vector<SyntheticPair> build_synthetic_pairs(int n, int image_size, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("vgpt: datagen: need at least one pair");
  int combos = static_cast<int>(kShapes.size() * kColors.size());
  std::vector<SyntheticPair> out;
  for (int i = 0; i < n; ++i) {
    int c = i % combos;
    const auto& shape = kShapes[static_cast<size_t>(c) / kColors.size()];
    const auto& col = kColors[static_cast<size_t>(c) % kColors.size()];
    SyntheticPair p;
    p.class_name = col.name + " " + shape;
    p.caption = "a " + col.name + " " + shape + " on a white background";
    p.image_path = "images/" + slug(p.class_name) + ".ppm";
    Rng rng(derive_seed(seed, "pair", static_cast<uint64_t>(c)));
    int base = image_size / 2;
    int cx = base + static_cast<int>(rng.below(7)) - 3;
    int cy = base + static_cast<int>(rng.below(7)) - 3;
    int r = image_size * 5 / 16 + static_cast<int>(rng.below(5)) - 2;
    Image img;
    img.h = image_size;
    img.w = image_size;
    img.rgb.assign(static_cast<size_t>(image_size) * image_size * 3, 1.0f);
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x)
        if (inside_shape(shape, x, y, cx, cy, r)) {
          img.at(y, x, 0) = static_cast<float>(col.r) / 255.0f;
          img.at(y, x, 1) = static_cast<float>(col.g) / 255.0f;
          img.at(y, x, 2) = static_cast<float>(col.b) / 255.0f;
        }
    p.image = std::move(img);
    out.push_back(std::move(p));
  }
  return out;
}

void write_pairs(const std::string& dir, const std::vector<SyntheticPair>& pairs, uint64_t seed) {
  fs::create_directories(fs::path(dir) / "images");
  std::string body;
  for (const auto& p : pairs) {
    write_ppm((fs::path(dir) / p.image_path).string(), p.image);
    ordered_json j;
    j["class_name"] = p.class_name;
    j["caption"] = p.caption;
    j["image"] = p.image_path;
    body += j.dump();
    body += '\n';
  }
  atomic_write_file((fs::path(dir) / "pairs.jsonl").string(), body);
  ordered_json meta;
  meta["mode"] = "synthetic";
  meta["count"] = pairs.size();
  meta["seed"] = seed;
  atomic_write_file((fs::path(dir) / "pairs.jsonl.meta.json").string(), meta.dump(2) + "\n");
}

std::vector<SyntheticPair> load_pairs(const std::string& dir) {
  std::string path = (fs::path(dir) / "pairs.jsonl").string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vgpt: datagen: cannot open " + path);
  std::vector<SyntheticPair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = ordered_json::parse(line);
    SyntheticPair p;
    p.class_name = j.at("class_name").get<std::string>();
    p.caption = j.at("caption").get<std::string>();
    p.image_path = j.at("image").get<std::string>();
    p.image = read_ppm((fs::path(dir) / p.image_path).string());
    out.push_back(std::move(p));
  }
  if (out.empty()) throw std::runtime_error("vgpt: datagen: no pairs in " + path);
  return out;
}

namespace {

std::vector<std::string> load_pool_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vgpt: datagen: cannot open seed pool " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

void check_placeholders(const std::string& tmpl, const std::string& where) {
  size_t at = 0;
  while ((at = tmpl.find('{', at)) != std::string::npos) {
    size_t end = tmpl.find('}', at);
    if (end == std::string::npos)
      throw std::runtime_error("vgpt: datagen: unterminated placeholder in " + where + ": " + tmpl);
    std::string name = tmpl.substr(at + 1, end - at - 1);
    if (name != "caption" && name != "class_name")
      throw std::runtime_error("vgpt: datagen: unknown placeholder {" + name + "} in " + where);
    at = end + 1;
  }
}

}  // namespace

SeedPools SeedPools::load_dir(const std::string& dir) {
  SeedPools p;
  p.prompt_seeds = load_pool_file((fs::path(dir) / "prompt_limit_seeds.txt").string());
  p.image_cap_seeds = load_pool_file((fs::path(dir) / "image_cap_limit_seeds.txt").string());
  p.answer_seeds = load_pool_file((fs::path(dir) / "answer_limit_seeds.txt").string());
  p.validate();
  return p;
}

void SeedPools::validate() const {
  if (prompt_seeds.empty() || image_cap_seeds.empty() || answer_seeds.empty())
    throw std::runtime_error("vgpt: datagen: seed pools must be nonempty");
  for (const auto& t : prompt_seeds) check_placeholders(t, "prompt seeds");
  for (const auto& t : image_cap_seeds) check_placeholders(t, "image caption seeds");
  for (const auto& t : answer_seeds) {
    check_placeholders(t, "answer seeds");
    if (t.find("<image_gen>") != std::string::npos || t.find("<image>") != std::string::npos)
      throw std::runtime_error("vgpt: datagen: answer seeds must not embed generation markers");
  }
}

std::string fill_template(const std::string& tmpl, const std::string& caption,
                          const std::string& class_name) {
  std::string out;
  out.reserve(tmpl.size() + caption.size());
  size_t at = 0;
  while (at < tmpl.size()) {
    size_t open = tmpl.find('{', at);
    if (open == std::string::npos) {
      out += tmpl.substr(at);
      break;
    }
    out += tmpl.substr(at, open - at);
    size_t close = tmpl.find('}', open);
    if (close == std::string::npos)
      throw std::runtime_error("vgpt: datagen: unterminated placeholder in template: " + tmpl);
    std::string name = tmpl.substr(open + 1, close - open - 1);
    if (name == "caption")
      out += caption;
    else if (name == "class_name")
      out += class_name;
    else
      throw std::runtime_error("vgpt: datagen: unknown placeholder {" + name + "}");
    at = close + 1;
  }
  return out;
}

std::pair<std::string, std::string> LocalTemplateSource::generate(const InstructQuery& q, Rng&) {
  return {fill_template(q.prompt_template, q.caption, q.class_name),
          fill_template(q.answer_template, q.caption, q.class_name)};
}

std::vector<DataRecord> build_stage1_corpus(const std::vector<SyntheticPair>& classes,
                                            int records_per_class, uint64_t /*seed*/) {
  if (classes.empty()) throw std::invalid_argument("vgpt: datagen: class list is empty");
  if (records_per_class < 1)
    throw std::invalid_argument("vgpt: datagen: records_per_class must be positive");
  std::vector<DataRecord> out;
  int idx = 0;
  for (const auto& c : classes) {
    for (int r = 0; r < records_per_class; ++r) {
      DataRecord rec;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "stage1-%05d", idx++);
      rec.id = buf;
      rec.stage = 1;
      rec.prompt = "Please generate an image of a " + c.class_name + " for me.";
      rec.answer = "The generated image of a " + c.class_name + " is as follows <image>";
      rec.image = c.image_path;
      rec.caption = c.caption;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

namespace {

std::string build_invocation(const SeedPools& pools, const InstructQuery& q, int shots, Rng& rng) {
  std::ostringstream inv;
  inv << "Construct one image-generation instruction sample.\n";
  inv << "Image caption: " << q.caption << "\n";
  inv << "Prompt seed: " << q.prompt_template << "\n";
  inv << "Image caption seed: " << q.image_cap_template << "\n";
  inv << "Answer seed: " << q.answer_template << "\n";
  if (shots > 0) {
    inv << "Examples:\n";
    for (int s = 0; s < shots; ++s) {
      const auto& p = pools.prompt_seeds[rng.below(pools.prompt_seeds.size())];
      const auto& a = pools.answer_seeds[rng.below(pools.answer_seeds.size())];
      inv << (s + 1) << ". Q: " << fill_template(p, q.caption, q.class_name)
          << " A: " << fill_template(a, q.caption, q.class_name) << "\n";
    }
  }
  inv << "Reply with the filled prompt and answer.";
  return inv.str();
}

}  // namespace

std::vector<DataRecord> build_instruct_corpus(const std::vector<SyntheticPair>& pairs,
                                              const SeedPools& pools, int shots,
                                              TextSource& source, int n, int stage_tag,
                                              const std::string& id_prefix, uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("vgpt: datagen: pairs are empty");
  if (shots < 0) throw std::invalid_argument("vgpt: datagen: shots must be >= 0");
  pools.validate();
  std::vector<DataRecord> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "instruct-record", static_cast<uint64_t>(i)));
    const auto& pair = pairs[static_cast<size_t>(i) % pairs.size()];
    InstructQuery q;
    q.caption = pair.caption;
    q.class_name = pair.class_name;
    q.prompt_template = pools.prompt_seeds[rng.below(pools.prompt_seeds.size())];
    q.image_cap_template = pools.image_cap_seeds[rng.below(pools.image_cap_seeds.size())];
    q.answer_template = pools.answer_seeds[rng.below(pools.answer_seeds.size())];
    q.invocation = build_invocation(pools, q, shots, rng);
    auto [prompt, answer] = source.generate(q, rng);
    if (prompt.empty() || answer.empty())
      throw std::runtime_error("vgpt: datagen: text source returned an empty prompt or answer");
    answer += " <image_gen>";
    if (answer.find("<image_gen>") != answer.rfind("<image_gen>"))
      throw std::runtime_error("vgpt: datagen: answer carries more than one generation marker");
    DataRecord rec;
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s%05d", id_prefix.c_str(), i);
    rec.id = buf;
    rec.stage = stage_tag;
    rec.prompt = prompt;
    rec.answer = answer;
    rec.image = pair.image_path;
    rec.caption = pair.caption;
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

const std::vector<std::string> kDescribePrompts = {
    "<image>\nDescribe this image.",
    "<image>\nWhat is shown in this picture?",
    "<image>\nGive a short description of the image.",
    "<image>\nTell me what you see.",
    "<image>\nCaption this image.",
    "What does this image show?\n<image>"};
const std::vector<std::string> kDescribeAnswers = {
    "The image shows {caption}.", "It is {caption}.", "This picture shows {caption}.",
    "You are looking at {caption}."};

struct QaForm {
  const char* prompt;
  const char* answer;  // {color} / {shape} resolved before fill
};
const std::vector<QaForm> kQaForms = {
    {"<image>\nWhat color is the shape?", "The shape is COLOR."},
    {"<image>\nWhat shape is in the image?", "It is a SHAPE."},
    {"<image>\nIs the background white?", "Yes, the background is white."},
    {"<image>\nName the shape and its color.", "A COLOR SHAPE."}};

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  size_t at = 0;
  while ((at = s.find(from, at)) != std::string::npos) {
    s.replace(at, from.size(), to);
    at += to.size();
  }
  return s;
}

}  // namespace

std::vector<DataRecord> build_understand_corpus(const std::vector<SyntheticPair>& pairs,
                                                const std::string& style, int n, uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("vgpt: datagen: pairs are empty");
  if (style != "describe" && style != "qa")
    throw std::invalid_argument("vgpt: datagen: understand style must be describe or qa");
  std::vector<DataRecord> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "understand-" + style, static_cast<uint64_t>(i)));
    const auto& pair = pairs[static_cast<size_t>(i) % pairs.size()];
    size_t space = pair.class_name.find(' ');
    std::string color = pair.class_name.substr(0, space);
    std::string shape = pair.class_name.substr(space + 1);
    DataRecord rec;
    char buf[48];
    std::snprintf(buf, sizeof(buf), "und-%s-%05d", style.c_str(), i);
    rec.id = buf;
    rec.stage = 2;
    if (style == "describe") {
      rec.prompt = kDescribePrompts[rng.below(kDescribePrompts.size())];
      rec.answer = fill_template(kDescribeAnswers[rng.below(kDescribeAnswers.size())], pair.caption,
                                 pair.class_name);
    } else {
      const auto& form = kQaForms[rng.below(kQaForms.size())];
      rec.prompt = form.prompt;
      rec.answer = replace_all(replace_all(form.answer, "COLOR", color), "SHAPE", shape);
    }
    rec.image = pair.image_path;
    rec.caption = pair.caption;
    out.push_back(std::move(rec));
  }
  return out;
}

const Image& ImageCache::load(const std::string& path) {
  auto it = images.find(path);
  if (it != images.end()) return it->second;
  return images.emplace(path, read_ppm(path)).first->second;
}

const TokenPyramid& ImageCache::encode(const Tokenizer& tok, const std::string& path) {
  auto it = pyramids.find(path);
  if (it != pyramids.end()) return it->second;
  return pyramids.emplace(path, tok.encode(load(path))).first->second;
}

std::vector<Turn> record_to_turns(const DataRecord& rec, const Tokenizer& tok, ImageCache& cache) {
  Turn user{"user", rec.prompt, {}, {}};
  if (rec.prompt.find("<image>") != std::string::npos) {
    if (rec.image.empty())
      throw std::runtime_error("vgpt: datagen: record " + rec.id + " has an <image> marker but no image");
    user.image = cache.load(rec.image);
  }
  Turn assistant{"assistant", rec.answer, {}, {}};
  if (rec.answer.find("<image_gen>") != std::string::npos ||
      rec.answer.find("<image>") != std::string::npos) {
    if (rec.image.empty())
      throw std::runtime_error("vgpt: datagen: record " + rec.id + " has a generation marker but no image");
    assistant.pyramid = cache.encode(tok, rec.image);
  }
  return {user, assistant};
}

}  // namespace vgpt
