#pragma once

#include "mas/masking.hpp"

namespace mas {

// Brute-force reference for build_mask: evaluates the masking predicate
// literally, cell by cell. Used only by property tests; intentionally kept
// apart from the block-fill implementation in masking.cpp.
inline AttnMask mask_oracle(const SegmentedTokens& seg, MaskMode mode) {
  seg.validate();
  const int n = seg.size();
  AttnMask mask(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      bool allowed = j <= i;
      if (mode == MaskMode::Mas) {
        const int si = seg.segment_ids[i];
        const int sj = seg.segment_ids[j];
        allowed = allowed || (si == sj && si != kSentinelSegment);
      }
      mask.set(i, j, allowed);
    }
  }
  return mask;
}

}  // namespace mas
