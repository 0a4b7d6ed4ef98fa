#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mas/common.hpp"
#include "mas/masking.hpp"

namespace mas {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by the special
// tokens. Fixed mapping, version-stamped for serialized artifacts.
namespace vocab {
constexpr int kBytes = 256;
constexpr int kBos = 256;
constexpr int kEos = 257;
constexpr int kSysBegin = 258;
constexpr int kUserBegin = 259;
constexpr int kAsstBegin = 260;
constexpr int kSize = 261;
constexpr const char* kVersion = "bytes-v1";

bool is_byte(int id);
bool is_special(int id);
}  // namespace vocab

struct ChatExample {
  std::string system;
  std::string user;
  std::string assistant;  // gold answer text
  std::vector<std::string> choices;
  std::string task;
};

std::vector<int> tokenize_bytes(std::string_view text);

/// Inverse of tokenize_bytes over byte ids; special tokens are dropped.
std::string detokenize(std::span<const int> ids);

/// Chat template:
///   [BOS, SYS_BEGIN, system bytes]            segment 0, role system
///   [USER_BEGIN, user bytes]                  segment 1, role user
///   [ASST_BEGIN, assistant bytes, EOS]        sentinel, role assistant
/// The assistant block is emitted only when include_assistant is set.
SegmentedTokens render_chat(const ChatExample& ex, bool include_assistant);

/// Keeps the first cutoff_len tokens. Returns nothing (skip the example)
/// when truncation would leave fewer than two assistant tokens, i.e. the
/// assistant span would effectively vanish from a training item.
std::optional<SegmentedTokens> truncate_chat(const SegmentedTokens& seg, int cutoff_len);

/// Synthetic retrieval task: the user prompt lists single-letter key=value
/// facts, asks for one key, and offers lettered choices; the answer is the
/// letter of the matching value. Answer letters are uniform, so a constant
/// baseline scores 1/n_choices.
std::vector<ChatExample> gen_retrieval_task(int n, int n_facts, int n_choices,
                                            std::uint64_t seed);

/// Train/test split with no shared user prompt between the two sets.
void gen_retrieval_split(int n_train, int n_test, int n_facts, int n_choices,
                         std::uint64_t seed, std::vector<ChatExample>& train,
                         std::vector<ChatExample>& test);

void write_jsonl(const std::string& path, const std::vector<ChatExample>& examples);
std::vector<ChatExample> read_jsonl(const std::string& path);

}  // namespace mas
