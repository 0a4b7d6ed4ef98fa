#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mas/common.hpp"

namespace mas {

/// One recorded post-softmax attention map with the segment layout of its
/// run. Rows sum to 1 within 1e-5 and masked cells are exactly zero.
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  Eigen::MatrixXd map;
  std::vector<int> segment_ids;

  int size() const { return static_cast<int>(map.rows()); }
  void validate() const;
};

enum class PatternLabel : std::uint8_t {
  Preserved,
  BlockSpecific,
  NGram,
  ForwardLooking,
  Unclassified,
};

std::string to_string(PatternLabel label);

struct AtlasThresholds {
  double forward_looking = 0.5;  // max super-diagonal offset mass
  double vertical = 0.5;         // column concentration within a block
  double band = 0.6;             // |i-j| <= band_radius mass
  double ngram_above = 0.05;     // minimum above-diagonal mass for NGram
  double preserved_above = 0.02; // maximum above-diagonal mass for Preserved
  int band_radius = 2;
  int max_offset = 4;
};

struct PatternScores {
  double above_block = 0;  // above-diagonal mass within blocks / total
  double vertical = 0;     // strongest single-column share of a block's mass
  double band = 0;         // near-diagonal band mass / total
  double offset = 0;       // best mean super-diagonal mass, offsets 1..max
  PatternLabel label = PatternLabel::Unclassified;
};

/// Scores the four pattern features and applies the decision order:
/// ForwardLooking, then BlockSpecific, then NGram, then Preserved.
PatternScores classify(const AttentionRecord& rec, const AtlasThresholds& th = {});

/// Binary PGM (P5) heatmap, pixel = round(255 * a_ij), with a JSON sidecar
/// at path + ".json" carrying segment boundaries.
void export_heatmap(const AttentionRecord& rec, const std::string& path);

/// Parses a P5 file written by export_heatmap; returns values in [0, 1].
Eigen::MatrixXd read_pgm(const std::string& path);

struct ReportRow {
  int layer = 0;
  int head = 0;
  PatternScores scores;
};

/// Writes out_dir/report.csv (one row per record, ordered by layer then
/// head) and returns the rows.
std::vector<ReportRow> report(const std::vector<AttentionRecord>& records,
                              const std::string& out_dir);

std::vector<ReportRow> parse_report_csv(const std::string& path);

}  // namespace mas
