#include "mas/masking.hpp"

#include <algorithm>

namespace mas {

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "causal") return MaskMode::Causal;
  if (s == "mas") return MaskMode::Mas;
  fail("config", "unknown mask mode '" + s + "' (expected causal|mas)");
}

std::string to_string(MaskMode mode) {
  return mode == MaskMode::Causal ? "causal" : "mas";
}

void SegmentedTokens::validate() const {
  const std::size_t n = token_ids.size();
  if (segment_ids.size() != n || roles.size() != n) {
    fail("invalid_segments", "token/segment/role lengths differ");
  }
  if (prefill_len < 0 || prefill_len > static_cast<int>(n)) {
    fail("invalid_segments", "prefill_len out of range");
  }
  int prev = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const int s = segment_ids[i];
    const bool prompt = static_cast<int>(i) < prefill_len;
    if (prompt && s < 0) {
      fail("invalid_segments", "prompt token " + std::to_string(i) + " has sentinel id");
    }
    if (!prompt && s != kSentinelSegment) {
      fail("invalid_segments",
           "generated token " + std::to_string(i) + " must carry the sentinel id");
    }
    if (roles[i] == Role::Assistant && s != kSentinelSegment) {
      fail("invalid_segments", "assistant token " + std::to_string(i) + " is not sentinel");
    }
    if (s >= 0) {
      if (prev == -1) {
        if (s != 0) fail("invalid_segments", "first segment id must be 0");
      } else if (s != prev && s != prev + 1) {
        fail("invalid_segments",
             "segment ids must form contiguous non-decreasing runs, got " +
                 std::to_string(prev) + " -> " + std::to_string(s));
      }
      prev = s;
    }
  }
}

SegmentedTokens segments_from_ids(const std::vector<int>& segment_ids) {
  SegmentedTokens seg;
  seg.segment_ids = segment_ids;
  seg.token_ids.resize(segment_ids.size());
  seg.roles.resize(segment_ids.size());
  int prefill = 0;
  for (std::size_t i = 0; i < segment_ids.size(); ++i) {
    seg.token_ids[i] = static_cast<int>(i);
    const int s = segment_ids[i];
    if (s == kSentinelSegment) {
      seg.roles[i] = Role::Assistant;
    } else {
      seg.roles[i] = s == 0 ? Role::System : Role::User;
      prefill = static_cast<int>(i) + 1;
    }
  }
  seg.prefill_len = prefill;
  seg.validate();
  return seg;
}

void AttnMask::validate() const {
  for (int i = 0; i < n_; ++i) {
    if (!at(i, i)) fail("invalid_mask", "diagonal not allowed at row " + std::to_string(i));
    bool any = false;
    for (int j = 0; j < n_ && !any; ++j) any = at(i, j);
    if (!any) fail("invalid_mask", "fully masked row " + std::to_string(i));
  }
}

AttnMask build_mask(const SegmentedTokens& seg, MaskMode mode) {
  seg.validate();
  const int n = seg.size();
  AttnMask mask(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) mask.set(i, j, true);
  }
  if (mode == MaskMode::Mas) {
    // Unmask each non-sentinel segment run as a full block.
    int i = 0;
    while (i < seg.prefill_len) {
      int run_end = i + 1;
      while (run_end < seg.prefill_len && seg.segment_ids[run_end] == seg.segment_ids[i]) {
        ++run_end;
      }
      for (int r = i; r < run_end; ++r) {
        for (int c = i; c < run_end; ++c) mask.set(r, c, true);
      }
      i = run_end;
    }
  }
  return mask;
}

std::vector<std::uint8_t> decode_mask_row(int cache_len) {
  if (cache_len < 0) fail("config", "decode_mask_row: negative cache length");
  return std::vector<std::uint8_t>(static_cast<std::size_t>(cache_len) + 1, 1);
}

SegmentedTokens unify_segments(const SegmentedTokens& seg) {
  seg.validate();
  SegmentedTokens out = seg;
  for (int& s : out.segment_ids) {
    if (s != kSentinelSegment) s = 0;
  }
  return out;
}

SegmentedTokens slice_tokens(const SegmentedTokens& seg, int begin, int end) {
  if (begin < 0 || end > seg.size() || begin > end) {
    fail("invalid_segments", "slice_tokens: range out of bounds");
  }
  SegmentedTokens out;
  out.token_ids.assign(seg.token_ids.begin() + begin, seg.token_ids.begin() + end);
  out.segment_ids.assign(seg.segment_ids.begin() + begin, seg.segment_ids.begin() + end);
  out.roles.assign(seg.roles.begin() + begin, seg.roles.begin() + end);
  out.prefill_len = std::clamp(seg.prefill_len - begin, 0, end - begin);
  return out;
}

}  // namespace mas
