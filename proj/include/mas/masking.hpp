#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mas/common.hpp"

namespace mas {

/// Segment id carried by generated (assistant) tokens. Such tokens always
/// attend causally; prompt tokens carry non-negative segment ids.
constexpr int kSentinelSegment = -1;

enum class Role : std::uint8_t { System, User, Assistant };

enum class MaskMode : std::uint8_t { Causal, Mas };

MaskMode parse_mask_mode(const std::string& s);
std::string to_string(MaskMode mode);

/// Token ids annotated with per-token segment ids and roles.
///
/// Invariants (checked by validate()):
///   - token_ids, segment_ids and roles have equal length
///   - the first prefill_len tokens carry non-negative segment ids forming
///     contiguous non-decreasing runs 0,0,...,1,1,...
///   - tokens at positions >= prefill_len carry the sentinel id
///   - assistant-role tokens carry the sentinel id
struct SegmentedTokens {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<Role> roles;
  int prefill_len = 0;

  int size() const { return static_cast<int>(token_ids.size()); }
  void validate() const;
};

/// Builds a SegmentedTokens from segment ids alone (token ids 0..n-1, roles
/// derived: sentinel -> assistant, segment 0 -> system, otherwise user).
/// Convenient for mask-level tests and the mask-dump CLI.
SegmentedTokens segments_from_ids(const std::vector<int>& segment_ids);

/// Boolean n x n attention mask; allowed(i, j) == true means query i may
/// attend key j. Rendered to an additive {0, -1e9} matrix on demand (see
/// additive_mask in tensor.hpp).
class AttnMask {
 public:
  AttnMask() = default;
  explicit AttnMask(int n) : n_(n), allowed_(static_cast<std::size_t>(n) * n, 0) {}

  int size() const { return n_; }
  bool at(int i, int j) const { return allowed_[idx(i, j)] != 0; }
  void set(int i, int j, bool v) { allowed_[idx(i, j)] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& raw() const { return allowed_; }

  /// Diagonal true and at least one allowed entry per row.
  void validate() const;

  bool operator==(const AttnMask& other) const {
    return n_ == other.n_ && allowed_ == other.allowed_;
  }

 private:
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(n_) +
           static_cast<std::size_t>(j);
  }

  int n_ = 0;
  std::vector<std::uint8_t> allowed_;
};

/// Causal: allowed(i, j) iff j <= i.
/// Mas: additionally allows j > i when both tokens share a non-sentinel
/// segment, so each prompt segment becomes a bidirectional block while
/// generated tokens stay causal.
AttnMask build_mask(const SegmentedTokens& seg, MaskMode mode);

/// Mask row for one freshly generated token attending a cache of cache_len
/// positions plus itself: all allowed.
std::vector<std::uint8_t> decode_mask_row(int cache_len);

/// Replaces every non-sentinel segment id by 0 (single prompt block).
SegmentedTokens unify_segments(const SegmentedTokens& seg);

/// Copies [begin, end) into a standalone fragment. Not validated: fragments
/// handed to the engine's resume path legitimately start at segment ids > 0.
SegmentedTokens slice_tokens(const SegmentedTokens& seg, int begin, int end);

}  // namespace mas
