#include "mas/atlas.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mas/masking.hpp"

namespace mas {

namespace {

struct Block {
  int begin = 0;
  int end = 0;  // exclusive
};

std::vector<Block> prompt_blocks(const std::vector<int>& segment_ids) {
  std::vector<Block> blocks;
  const int n = static_cast<int>(segment_ids.size());
  int i = 0;
  while (i < n) {
    if (segment_ids[static_cast<std::size_t>(i)] == kSentinelSegment) {
      ++i;
      continue;
    }
    int j = i + 1;
    while (j < n && segment_ids[static_cast<std::size_t>(j)] ==
                        segment_ids[static_cast<std::size_t>(i)]) {
      ++j;
    }
    blocks.push_back({i, j});
    i = j;
  }
  return blocks;
}

}  // namespace

void AttentionRecord::validate() const {
  const int n = size();
  if (n == 0) fail("invalid_record", "empty attention map");
  if (map.cols() != map.rows()) fail("invalid_record", "attention map must be square");
  if (static_cast<int>(segment_ids.size()) != n) {
    fail("invalid_record", "segment ids do not match map size");
  }
  for (int i = 0; i < n; ++i) {
    double row_sum = 0;
    for (int j = 0; j < n; ++j) {
      const double v = map(i, j);
      if (v < 0 || !std::isfinite(v)) fail("invalid_record", "negative or non-finite cell");
      row_sum += v;
    }
    if (std::abs(row_sum - 1.0) > 1e-5) {
      fail("invalid_record", "row " + std::to_string(i) + " sums to " + std::to_string(row_sum));
    }
  }
}

std::string to_string(PatternLabel label) {
  switch (label) {
    case PatternLabel::Preserved: return "Preserved";
    case PatternLabel::BlockSpecific: return "BlockSpecific";
    case PatternLabel::NGram: return "NGram";
    case PatternLabel::ForwardLooking: return "ForwardLooking";
    case PatternLabel::Unclassified: return "Unclassified";
  }
  return "?";
}

PatternScores classify(const AttentionRecord& rec, const AtlasThresholds& th) {
  rec.validate();
  const int n = rec.size();
  const auto& m = rec.map;
  const auto& seg = rec.segment_ids;
  const auto blocks = prompt_blocks(seg);
  const double total_mass = static_cast<double>(n);  // rows are stochastic

  PatternScores scores;

  // (a) above-diagonal mass restricted to within-block cells.
  double above = 0;
  for (const auto& b : blocks) {
    for (int i = b.begin; i < b.end; ++i) {
      for (int j = i + 1; j < b.end; ++j) above += m(i, j);
    }
  }
  scores.above_block = above / total_mass;

  // (b) strongest single-column concentration of any block's internal mass.
  for (const auto& b : blocks) {
    double block_mass = 0;
    double best_col = 0;
    for (int j = b.begin; j < b.end; ++j) {
      double col = 0;
      for (int i = b.begin; i < b.end; ++i) col += m(i, j);
      block_mass += col;
      best_col = std::max(best_col, col);
    }
    if (block_mass > 1e-9) scores.vertical = std::max(scores.vertical, best_col / block_mass);
  }

  // (c) band mass around the diagonal.
  double band = 0;
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - th.band_radius);
    const int hi = std::min(n - 1, i + th.band_radius);
    for (int j = lo; j <= hi; ++j) band += m(i, j);
  }
  scores.band = band / total_mass;

  // (d) best mean super-diagonal mass within blocks, offsets 1..max_offset.
  for (int k = 1; k <= th.max_offset; ++k) {
    double mass = 0;
    int applicable = 0;
    for (int i = 0; i + k < n; ++i) {
      if (seg[static_cast<std::size_t>(i)] != kSentinelSegment &&
          seg[static_cast<std::size_t>(i)] == seg[static_cast<std::size_t>(i + k)]) {
        mass += m(i, i + k);
        ++applicable;
      }
    }
    if (applicable > 0) scores.offset = std::max(scores.offset, mass / applicable);
  }

  if (scores.offset > th.forward_looking) {
    scores.label = PatternLabel::ForwardLooking;
  } else if (scores.vertical > th.vertical) {
    scores.label = PatternLabel::BlockSpecific;
  } else if (scores.band > th.band && scores.above_block > th.ngram_above) {
    scores.label = PatternLabel::NGram;
  } else if (scores.above_block < th.preserved_above) {
    scores.label = PatternLabel::Preserved;
  } else {
    scores.label = PatternLabel::Unclassified;
  }
  return scores;
}

void export_heatmap(const AttentionRecord& rec, const std::string& path) {
  const int n = rec.size();
  if (n == 0) fail("invalid_record", "cannot export an empty attention map");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot open " + path + " for writing");
  out << "P5\n" << n << " " << n << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double v = std::clamp(rec.map(i, j), 0.0, 1.0);
      row[static_cast<std::size_t>(j)] =
          static_cast<unsigned char>(std::floor(255.0 * v + 0.5));
    }
    out.write(reinterpret_cast<const char*>(row.data()), n);
  }
  if (!out) fail("io", "failed writing " + path);

  std::vector<int> boundaries;
  for (const auto& b : prompt_blocks(rec.segment_ids)) boundaries.push_back(b.begin);
  nlohmann::json j{{"n", n},
                   {"layer", rec.layer},
                   {"head", rec.head},
                   {"segment_ids", rec.segment_ids},
                   {"block_starts", boundaries}};
  std::ofstream side(path + ".json", std::ios::binary);
  if (!side) fail("io", "cannot open " + path + ".json for writing");
  side << j.dump(2) << "\n";
}

Eigen::MatrixXd read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") fail("format", path + ": not a P5 PGM");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) fail("format", path + ": bad PGM header");
  in.get();  // single whitespace after maxval
  Eigen::MatrixXd out(h, w);
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (int i = 0; i < h; ++i) {
    in.read(reinterpret_cast<char*>(row.data()), w);
    if (!in) fail("format", path + ": truncated pixel data");
    for (int j = 0; j < w; ++j) out(i, j) = row[static_cast<std::size_t>(j)] / 255.0;
  }
  return out;
}

std::vector<ReportRow> report(const std::vector<AttentionRecord>& records,
                              const std::string& out_dir) {
  std::vector<ReportRow> rows;
  rows.reserve(records.size());
  for (const auto& rec : records) rows.push_back({rec.layer, rec.head, classify(rec)});
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.head < b.head;
  });

  std::filesystem::create_directories(out_dir);
  const std::string path = out_dir + "/report.csv";
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot open " + path + " for writing");
  out << "layer,head,label,above_block,vertical,band,offset\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%s,%.6f,%.6f,%.6f,%.6f\n", r.layer, r.head,
                  to_string(r.scores.label).c_str(), r.scores.above_block, r.scores.vertical,
                  r.scores.band, r.scores.offset);
    out << buf;
  }
  if (!out) fail("io", "failed writing " + path);
  return rows;
}

std::vector<ReportRow> parse_report_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open " + path);
  std::vector<ReportRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ReportRow r;
    char label[64];
    if (std::sscanf(line.c_str(), "%d,%d,%63[^,],%lf,%lf,%lf,%lf", &r.layer, &r.head, label,
                    &r.scores.above_block, &r.scores.vertical, &r.scores.band,
                    &r.scores.offset) != 7) {
      fail("format", path + ": malformed row '" + line + "'");
    }
    const std::string name(label);
    if (name == "Preserved") r.scores.label = PatternLabel::Preserved;
    else if (name == "BlockSpecific") r.scores.label = PatternLabel::BlockSpecific;
    else if (name == "NGram") r.scores.label = PatternLabel::NGram;
    else if (name == "ForwardLooking") r.scores.label = PatternLabel::ForwardLooking;
    else r.scores.label = PatternLabel::Unclassified;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace mas
