#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vgpt/image_io.hpp"
#include "vgpt/tokenizer.hpp"

namespace vgpt {

// Byte-level text tokens occupy 0..255; specials sit above.
namespace tok_id {
inline constexpr int kBos = 256;            // surface form "<s>"
inline constexpr int kEos = 257;            // surface form "</s>"
inline constexpr int kImage = 258;          // "<image>" understanding placeholder
inline constexpr int kImageGenStart = 259;  // "<image_gen_start>"
inline constexpr int kImageGen = 260;       // "<image_gen>" generation slot
inline constexpr int kImageGenEnd = 261;    // "<image_gen_end>"
inline constexpr int kCount = 262;          // ids below this are assigned
}  // namespace tok_id

enum class Seg : uint8_t { text, image_understand, gen_slot, special };

struct MixedStream {
  std::vector<int> ids;
  std::vector<Seg> tags;
  std::vector<uint8_t> loss_mask_text;  // token at position t is a supervised target
  std::vector<std::pair<int, int>> gen_slot_spans;  // (start, length)

  // payloads, in order of appearance
  std::vector<Image> images;
  std::vector<TokenPyramid> pyramids;

  int size() const { return static_cast<int>(ids.size()); }
  void validate(const ScaleSchedule& schedule) const;
};

struct Turn {
  std::string role;  // "user" or "assistant"
  std::string text;
  std::optional<Image> image;          // user-side input image
  std::optional<TokenPyramid> pyramid;  // assistant-side generation target
};

// Wire format per user/assistant pair: <s>USER: {text}\nASSISTANT: {text}</s>
// ("<s>"/"</s>" are the BOS/EOS token ids, not bytes). A user-side "<image>"
// marker expands to one placeholder per vision patch; an assistant-side
// "<image_gen>" (alias "<image>") marker expands to
// <image_gen_start> + total_cells x <image_gen> + <image_gen_end>.
// Texts must not contain the role delimiter "\nASSISTANT: ".
MixedStream render_dialogue(const std::vector<Turn>& turns, const ScaleSchedule& schedule,
                            int patches_per_image);

// Prompt-side rendering for decoding: turns must end with a user turn; the
// stream ends right after the "\nASSISTANT: " scaffold bytes.
MixedStream render_prompt(const std::vector<Turn>& turns, const ScaleSchedule& schedule,
                          int patches_per_image);

// Extends an existing stream (e.g. a finished decode) with one more user turn
// plus the assistant scaffold, for multi-turn decoding.
void append_user_turn(MixedStream& stream, const Turn& turn, int patches_per_image);

// Inverse of render_dialogue up to marker canonicalization: placeholder runs
// collapse back to "<image>" (user side) / "<image_gen>" (assistant side).
std::vector<std::string> derender_texts(const MixedStream& stream, int patches_per_image);

std::string byte_decode(const std::vector<int>& ids);  // text-tagged byte ids -> string

}  // namespace vgpt
