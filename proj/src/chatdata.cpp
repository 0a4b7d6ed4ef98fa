#include "mas/chatdata.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

namespace mas {

namespace vocab {
bool is_byte(int id) { return id >= 0 && id < kBytes; }
bool is_special(int id) { return id >= kBytes && id < kSize; }
}  // namespace vocab

std::vector<int> tokenize_bytes(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab::kSize) fail("vocab_range", "detokenize: id " + std::to_string(id));
    if (vocab::is_byte(id)) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

SegmentedTokens render_chat(const ChatExample& ex, bool include_assistant) {
  if (ex.user.empty()) fail("invalid_example", "chat example has empty user prompt");
  if (include_assistant && ex.assistant.empty()) {
    fail("invalid_example", "training example has empty assistant text");
  }
  SegmentedTokens seg;
  auto push = [&seg](int token, int segment, Role role) {
    seg.token_ids.push_back(token);
    seg.segment_ids.push_back(segment);
    seg.roles.push_back(role);
  };
  push(vocab::kBos, 0, Role::System);
  push(vocab::kSysBegin, 0, Role::System);
  for (int id : tokenize_bytes(ex.system)) push(id, 0, Role::System);
  push(vocab::kUserBegin, 1, Role::User);
  for (int id : tokenize_bytes(ex.user)) push(id, 1, Role::User);
  seg.prefill_len = seg.size();
  if (include_assistant) {
    push(vocab::kAsstBegin, kSentinelSegment, Role::Assistant);
    for (int id : tokenize_bytes(ex.assistant)) push(id, kSentinelSegment, Role::Assistant);
    push(vocab::kEos, kSentinelSegment, Role::Assistant);
  }
  seg.validate();
  return seg;
}

std::optional<SegmentedTokens> truncate_chat(const SegmentedTokens& seg, int cutoff_len) {
  if (cutoff_len < 1) fail("config", "cutoff_len must be >= 1");
  if (seg.size() <= cutoff_len) return seg;
  int assistant_kept = 0;
  for (int i = 0; i < cutoff_len; ++i) {
    if (seg.roles[static_cast<std::size_t>(i)] == Role::Assistant) ++assistant_kept;
  }
  if (assistant_kept < 2) return std::nullopt;  // ASST_BEGIN alone is not a span
  SegmentedTokens out;
  out.token_ids.assign(seg.token_ids.begin(), seg.token_ids.begin() + cutoff_len);
  out.segment_ids.assign(seg.segment_ids.begin(), seg.segment_ids.begin() + cutoff_len);
  out.roles.assign(seg.roles.begin(), seg.roles.begin() + cutoff_len);
  out.prefill_len = std::min(seg.prefill_len, cutoff_len);
  out.validate();
  return out;
}

namespace {

constexpr const char* kSystemPrompt = "pick the letter of the right value.";

ChatExample make_retrieval_example(int n_facts, int n_choices, Rng& rng) {
  // Distinct single-letter keys; single-letter values may repeat across facts.
  std::vector<char> keys;
  {
    std::vector<char> pool;
    for (char c = 'a'; c <= 'z'; ++c) pool.push_back(c);
    rng.shuffle(pool);
    keys.assign(pool.begin(), pool.begin() + n_facts);
  }
  std::vector<char> values(static_cast<std::size_t>(n_facts));
  for (auto& v : values) v = static_cast<char>('a' + rng.uniform_int(26));

  const int asked = rng.uniform_int(n_facts);
  const char correct = values[static_cast<std::size_t>(asked)];

  // Choice values: the correct one plus distinct distractors != correct.
  std::vector<char> choice_values;
  choice_values.push_back(correct);
  std::unordered_set<char> used = {correct};
  for (int f = 0; f < n_facts && static_cast<int>(choice_values.size()) < n_choices; ++f) {
    if (f == asked) continue;
    if (rng.uniform() < 0.5 && !used.count(values[static_cast<std::size_t>(f)])) {
      choice_values.push_back(values[static_cast<std::size_t>(f)]);
      used.insert(values[static_cast<std::size_t>(f)]);
    }
  }
  while (static_cast<int>(choice_values.size()) < n_choices) {
    char c = static_cast<char>('a' + rng.uniform_int(26));
    if (!used.count(c)) {
      choice_values.push_back(c);
      used.insert(c);
    }
  }
  // Place the correct value at a uniform letter.
  const int correct_pos = rng.uniform_int(n_choices);
  std::swap(choice_values[0], choice_values[static_cast<std::size_t>(correct_pos)]);

  std::string user;
  for (int f = 0; f < n_facts; ++f) {
    user += keys[static_cast<std::size_t>(f)];
    user += '=';
    user += values[static_cast<std::size_t>(f)];
    user += ';';
  }
  user += '?';
  user += keys[static_cast<std::size_t>(asked)];
  for (int c = 0; c < n_choices; ++c) {
    user += ';';
    user += static_cast<char>('A' + c);
    user += '=';
    user += choice_values[static_cast<std::size_t>(c)];
  }

  ChatExample ex;
  ex.system = kSystemPrompt;
  ex.user = user;
  ex.assistant = std::string(1, static_cast<char>('A' + correct_pos));
  for (int c = 0; c < n_choices; ++c) {
    ex.choices.push_back(std::string(1, choice_values[static_cast<std::size_t>(c)]));
  }
  ex.task = "retrieval";
  return ex;
}

}  // namespace

std::vector<ChatExample> gen_retrieval_task(int n, int n_facts, int n_choices,
                                            std::uint64_t seed) {
  if (n_facts < 2 || n_facts > 26) fail("config", "n_facts must be in [2, 26]");
  if (n_choices < 2 || n_choices > 26) fail("config", "n_choices must be in [2, 26]");
  if (n < 0) fail("config", "n must be >= 0");
  Rng rng(seed);
  std::vector<ChatExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_retrieval_example(n_facts, n_choices, rng));
  return out;
}

void gen_retrieval_split(int n_train, int n_test, int n_facts, int n_choices,
                         std::uint64_t seed, std::vector<ChatExample>& train,
                         std::vector<ChatExample>& test) {
  Rng root(seed);
  Rng train_rng = root.fork(1);
  Rng test_rng = root.fork(2);
  train.clear();
  test.clear();
  std::unordered_set<std::string> seen;
  for (int i = 0; i < n_train; ++i) {
    train.push_back(make_retrieval_example(n_facts, n_choices, train_rng));
    seen.insert(train.back().user);
  }
  int attempts = 0;
  while (static_cast<int>(test.size()) < n_test) {
    ChatExample ex = make_retrieval_example(n_facts, n_choices, test_rng);
    if (seen.count(ex.user)) {
      if (++attempts > 100 * n_test) fail("config", "cannot build a disjoint test split");
      continue;
    }
    seen.insert(ex.user);
    test.push_back(std::move(ex));
  }
}

void write_jsonl(const std::string& path, const std::vector<ChatExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot open " + path + " for writing");
  for (const auto& ex : examples) {
    nlohmann::json j{{"system", ex.system}, {"user", ex.user},       {"answer", ex.assistant},
                     {"choices", ex.choices}, {"task", ex.task}};
    out << j.dump() << "\n";
  }
  if (!out) fail("io", "failed writing " + path);
}

std::vector<ChatExample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open " + path);
  std::vector<ChatExample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      fail("format", path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    ChatExample ex;
    ex.system = j.value("system", "");
    ex.user = j.value("user", "");
    ex.assistant = j.value("answer", "");
    if (j.contains("choices")) ex.choices = j["choices"].get<std::vector<std::string>>();
    ex.task = j.value("task", "default");
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mas
