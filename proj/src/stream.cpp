#include "vgpt/stream.hpp"

#include <stdexcept>

namespace vgpt {

namespace {

constexpr const char* kUserScaffold = "USER: ";
constexpr const char* kRoleDelimiter = "\nASSISTANT: ";

void push_byte_text(MixedStream& s, const std::string& text, bool supervised) {
  for (unsigned char c : text) {
    s.ids.push_back(static_cast<int>(c));
    s.tags.push_back(Seg::text);
    s.loss_mask_text.push_back(supervised ? 1 : 0);
  }
}

void push_special(MixedStream& s, int id, bool supervised) {
  s.ids.push_back(id);
  s.tags.push_back(Seg::special);
  s.loss_mask_text.push_back(supervised ? 1 : 0);
}

size_t count_occurrences(const std::string& text, const std::string& needle) {
  size_t n = 0;
  for (size_t at = text.find(needle); at != std::string::npos; at = text.find(needle, at + needle.size())) ++n;
  return n;
}

void check_text_legal(const std::string& text) {
  if (text.find(kRoleDelimiter) != std::string::npos)
    throw std::invalid_argument("vgpt: stream: text contains the role delimiter");
}

void render_user_turn(MixedStream& s, const Turn& turn, int patches_per_image) {
  check_text_legal(turn.text);
  push_special(s, tok_id::kBos, false);
  push_byte_text(s, kUserScaffold, false);
  const std::string marker = "<image>";
  size_t markers = count_occurrences(turn.text, marker);
  if (turn.image.has_value()) {
    if (markers != 1)
      throw std::invalid_argument("vgpt: stream: user turn with an image needs exactly one <image> marker");
    size_t at = turn.text.find(marker);
    push_byte_text(s, turn.text.substr(0, at), false);
    for (int p = 0; p < patches_per_image; ++p) {
      s.ids.push_back(tok_id::kImage);
      s.tags.push_back(Seg::image_understand);
      s.loss_mask_text.push_back(0);
    }
    push_byte_text(s, turn.text.substr(at + marker.size()), false);
    s.images.push_back(*turn.image);
  } else {
    push_byte_text(s, turn.text, false);
  }
  push_byte_text(s, kRoleDelimiter, false);
}

void render_assistant_turn(MixedStream& s, const Turn& turn, const ScaleSchedule& schedule) {
  check_text_legal(turn.text);
  std::string marker = "<image_gen>";
  size_t markers = count_occurrences(turn.text, marker);
  if (markers == 0 && turn.pyramid.has_value()) {
    marker = "<image>";  // accepted alias used by the category-pretraining format
    markers = count_occurrences(turn.text, marker);
  }
  if (turn.pyramid.has_value()) {
    if (markers != 1)
      throw std::invalid_argument(
          "vgpt: stream: assistant turn with a pyramid needs exactly one generation marker");
    size_t at = turn.text.find(marker);
    push_byte_text(s, turn.text.substr(0, at), true);
    push_special(s, tok_id::kImageGenStart, true);
    int span_start = s.size();
    int cells = schedule.total_cells();
    for (int i = 0; i < cells; ++i) {
      s.ids.push_back(tok_id::kImageGen);
      s.tags.push_back(Seg::gen_slot);
      s.loss_mask_text.push_back(0);
    }
    s.gen_slot_spans.emplace_back(span_start, cells);
    push_special(s, tok_id::kImageGenEnd, true);
    push_byte_text(s, turn.text.substr(at + marker.size()), true);
    s.pyramids.push_back(*turn.pyramid);
  } else {
    if (count_occurrences(turn.text, "<image_gen>") != 0)
      throw std::invalid_argument("vgpt: stream: generation marker without a target pyramid");
    push_byte_text(s, turn.text, true);
  }
  push_special(s, tok_id::kEos, true);
}

void check_roles(const std::vector<Turn>& turns) {
  for (size_t i = 0; i < turns.size(); ++i) {
    const std::string& want = (i % 2 == 0) ? "user" : "assistant";
    if (turns[i].role != want)
      throw std::invalid_argument("vgpt: stream: roles must alternate user/assistant starting with user");
    if (turns[i].role == "user" && turns[i].pyramid.has_value())
      throw std::invalid_argument("vgpt: stream: pyramid on a user turn");
    if (turns[i].role == "assistant" && turns[i].image.has_value())
      throw std::invalid_argument("vgpt: stream: input image on an assistant turn");
  }
}

}  // namespace

MixedStream render_dialogue(const std::vector<Turn>& turns, const ScaleSchedule& schedule,
                            int patches_per_image) {
  if (turns.empty() || turns.size() % 2 != 0)
    throw std::invalid_argument("vgpt: stream: dialogue must be complete user/assistant pairs");
  check_roles(turns);
  MixedStream s;
  for (size_t i = 0; i < turns.size(); i += 2) {
    render_user_turn(s, turns[i], patches_per_image);
    render_assistant_turn(s, turns[i + 1], schedule);
  }
  s.validate(schedule);
  return s;
}

MixedStream render_prompt(const std::vector<Turn>& turns, const ScaleSchedule& schedule,
                          int patches_per_image) {
  if (turns.empty() || turns.size() % 2 != 1)
    throw std::invalid_argument("vgpt: stream: prompt must end with a user turn");
  check_roles(turns);
  MixedStream s;
  for (size_t i = 0; i + 1 < turns.size(); i += 2) {
    render_user_turn(s, turns[i], patches_per_image);
    render_assistant_turn(s, turns[i + 1], schedule);
  }
  render_user_turn(s, turns.back(), patches_per_image);
  return s;
}

void append_user_turn(MixedStream& stream, const Turn& turn, int patches_per_image) {
  if (turn.role != "user") throw std::invalid_argument("vgpt: stream: appended turn must be a user turn");
  if (turn.pyramid.has_value()) throw std::invalid_argument("vgpt: stream: pyramid on a user turn");
  render_user_turn(stream, turn, patches_per_image);
}

std::string byte_decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) throw std::invalid_argument("vgpt: byte_decode: non-byte id");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

namespace {

struct Walker {
  const MixedStream& s;
  int pos = 0;

  bool done() const { return pos >= s.size(); }
  int id() const { return s.ids[static_cast<size_t>(pos)]; }
  Seg tag() const { return s.tags[static_cast<size_t>(pos)]; }
  bool supervised() const { return s.loss_mask_text[static_cast<size_t>(pos)] != 0; }
};

void fail(const char* what) { throw std::runtime_error(std::string("vgpt: stream invariant violated: ") + what); }

}  // namespace

void MixedStream::validate(const ScaleSchedule& schedule) const {
  size_t n = ids.size();
  if (tags.size() != n || loss_mask_text.size() != n) fail("field lengths differ");
  for (int id : ids)
    if (id < 0 || id >= tok_id::kCount) fail("token id out of range");

  // span table must exactly describe the gen_slot-tagged positions
  std::vector<uint8_t> in_span(n, 0);
  int cells = schedule.total_cells();
  for (auto [start, len] : gen_slot_spans) {
    if (len != cells) fail("gen span length != total cells of schedule");
    if (start < 1 || start + len + 1 > static_cast<int>(n)) fail("gen span not bracketed inside stream");
    if (ids[static_cast<size_t>(start - 1)] != tok_id::kImageGenStart) fail("gen span missing start bracket");
    if (ids[static_cast<size_t>(start + len)] != tok_id::kImageGenEnd) fail("gen span missing end bracket");
    for (int i = start; i < start + len; ++i) {
      if (ids[static_cast<size_t>(i)] != tok_id::kImageGen || tags[static_cast<size_t>(i)] != Seg::gen_slot)
        fail("gen span contains a non-slot token");
      if (in_span[static_cast<size_t>(i)]) fail("overlapping gen spans");
      in_span[static_cast<size_t>(i)] = 1;
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if ((tags[i] == Seg::gen_slot) != (in_span[i] != 0)) fail("gen_slot tag outside any span");
    if (tags[i] == Seg::gen_slot && loss_mask_text[i]) fail("supervised gen_slot token");
    if (tags[i] == Seg::image_understand && loss_mask_text[i]) fail("supervised image placeholder");
  }

  // template walk: pairs of <s>USER: ...\nASSISTANT: ...</s>; user region unsupervised
  Walker w{*this};
  size_t image_runs = 0, gen_spans_seen = 0;
  const std::string delim = kRoleDelimiter;
  while (!w.done()) {
    if (w.id() != tok_id::kBos) fail("pair must start with BOS");
    if (w.supervised()) fail("supervised BOS");
    ++w.pos;
    std::string acc;
    bool saw_delim = false;
    while (!w.done()) {  // user region
      if (w.tag() == Seg::text) {
        if (w.supervised()) fail("supervised user-region token");
        acc.push_back(static_cast<char>(static_cast<unsigned char>(w.id())));
        ++w.pos;
        if (acc.size() >= delim.size() && acc.compare(acc.size() - delim.size(), delim.size(), delim) == 0) {
          saw_delim = true;
          break;
        }
      } else if (w.tag() == Seg::image_understand) {
        if (w.id() != tok_id::kImage) fail("bad placeholder id in image run");
        ++image_runs;
        int run = 0;
        while (!w.done() && w.tag() == Seg::image_understand) {
          ++w.pos;
          ++run;
        }
        if (run <= 0) fail("empty image run");
      } else {
        fail("unexpected token in user region");
      }
    }
    if (!saw_delim) fail("missing role delimiter");
    if (acc.compare(0, 6, kUserScaffold) != 0) fail("missing user scaffold");
    // assistant region: until EOS (or stream end on a decode cut short)
    bool closed = false;
    while (!w.done()) {
      if (w.id() == tok_id::kEos) {
        ++w.pos;
        closed = true;
        break;
      }
      if (w.tag() == Seg::text) {
        ++w.pos;
      } else if (w.id() == tok_id::kImageGenStart) {
        ++w.pos;
        ++gen_spans_seen;
        int run = 0;
        while (!w.done() && w.tag() == Seg::gen_slot) {
          ++w.pos;
          ++run;
        }
        if (run != cells) fail("gen span run length mismatch");
        if (w.done() || w.id() != tok_id::kImageGenEnd) fail("gen span missing end bracket");
        ++w.pos;
      } else {
        fail("unexpected token in assistant region");
      }
    }
    if (!closed && !w.done()) fail("tokens after an unterminated assistant region");
    if (!closed) break;  // decode cut short by a length cap: acceptable
  }
  if (gen_spans_seen != gen_slot_spans.size()) fail("span table does not match stream");
  if (pyramids.size() > gen_slot_spans.size()) fail("more pyramids than gen spans");
  if (images.size() != image_runs) fail("image payload count does not match placeholder runs");
}

std::vector<std::string> derender_texts(const MixedStream& stream, int patches_per_image) {
  std::vector<std::string> out;
  Walker w{stream};
  const std::string delim = kRoleDelimiter;
  while (!w.done()) {
    if (w.id() != tok_id::kBos) throw std::runtime_error("vgpt: derender: expected BOS");
    ++w.pos;
    std::string acc;
    while (!w.done()) {
      if (w.tag() == Seg::text) {
        acc.push_back(static_cast<char>(static_cast<unsigned char>(w.id())));
        ++w.pos;
        if (acc.size() >= delim.size() && acc.compare(acc.size() - delim.size(), delim.size(), delim) == 0)
          break;
      } else if (w.tag() == Seg::image_understand) {
        for (int p = 0; p < patches_per_image; ++p) {
          if (w.done() || w.tag() != Seg::image_understand)
            throw std::runtime_error("vgpt: derender: short image run");
          ++w.pos;
        }
        acc += "<image>";
      } else {
        throw std::runtime_error("vgpt: derender: unexpected token in user region");
      }
    }
    if (acc.size() < 6 + delim.size()) throw std::runtime_error("vgpt: derender: malformed user region");
    out.push_back(acc.substr(6, acc.size() - 6 - delim.size()));
    std::string assistant;
    while (!w.done() && w.id() != tok_id::kEos) {
      if (w.tag() == Seg::text) {
        assistant.push_back(static_cast<char>(static_cast<unsigned char>(w.id())));
        ++w.pos;
      } else if (w.id() == tok_id::kImageGenStart) {
        ++w.pos;
        while (!w.done() && w.tag() == Seg::gen_slot) ++w.pos;
        if (w.done() || w.id() != tok_id::kImageGenEnd)
          throw std::runtime_error("vgpt: derender: unterminated gen span");
        ++w.pos;
        assistant += "<image_gen>";
      } else {
        throw std::runtime_error("vgpt: derender: unexpected token in assistant region");
      }
    }
    if (!w.done()) ++w.pos;  // consume EOS
    out.push_back(assistant);
  }
  return out;
}

}  // namespace vgpt
