#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mas/atlas.hpp"
#include "mas/model.hpp"
#include "support/testing.hpp"

using namespace mas;

namespace {

// Fixture layouts: two prompt blocks plus a sentinel tail.
std::vector<int> fixture_segments(int block, int tail) {
  std::vector<int> ids;
  ids.insert(ids.end(), static_cast<std::size_t>(block), 0);
  ids.insert(ids.end(), static_cast<std::size_t>(block), 1);
  ids.insert(ids.end(), static_cast<std::size_t>(tail), kSentinelSegment);
  return ids;
}

AttentionRecord base_record(const std::vector<int>& seg) {
  AttentionRecord rec;
  rec.segment_ids = seg;
  const int n = static_cast<int>(seg.size());
  rec.map = Eigen::MatrixXd::Zero(n, n);
  return rec;
}

bool same_block(const std::vector<int>& seg, int i, int j) {
  return seg[static_cast<std::size_t>(i)] != kSentinelSegment &&
         seg[static_cast<std::size_t>(i)] == seg[static_cast<std::size_t>(j)];
}

AttentionRecord make_preserved(const std::vector<int>& seg) {
  AttentionRecord rec = base_record(seg);
  const int n = rec.size();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) rec.map(i, j) = 1.0 / (i + 1);
  }
  return rec;
}

AttentionRecord make_forward_looking(const std::vector<int>& seg) {
  AttentionRecord rec = base_record(seg);
  const int n = rec.size();
  for (int i = 0; i < n; ++i) {
    if (i + 1 < n && same_block(rec.segment_ids, i, i + 1)) {
      rec.map(i, i + 1) = 1.0;
    } else {
      rec.map(i, i) = 1.0;  // block ends and sentinels fall back to self
    }
  }
  return rec;
}

AttentionRecord make_block_specific(const std::vector<int>& seg) {
  AttentionRecord rec = base_record(seg);
  const int n = rec.size();
  int i = 0;
  while (i < n) {
    if (rec.segment_ids[static_cast<std::size_t>(i)] == kSentinelSegment) {
      rec.map(i, i) = 1.0;
      ++i;
      continue;
    }
    int j = i + 1;
    while (j < n && same_block(rec.segment_ids, i, j)) ++j;
    for (int r = i; r < j; ++r) rec.map(r, i) = 1.0;  // one vertical line per block
    i = j;
  }
  return rec;
}

AttentionRecord make_ngram(const std::vector<int>& seg) {
  AttentionRecord rec = base_record(seg);
  const int n = rec.size();
  for (int i = 0; i < n; ++i) {
    std::vector<int> cells = {i};
    if (i > 0 && same_block(rec.segment_ids, i, i - 1)) cells.push_back(i - 1);
    if (i + 1 < n && same_block(rec.segment_ids, i, i + 1)) cells.push_back(i + 1);
    for (int j : cells) rec.map(i, j) = 1.0 / static_cast<double>(cells.size());
  }
  return rec;
}

}  // namespace

TEST_CASE("twelve-map fixture corpus classifies perfectly") {
  int checked = 0;
  for (int block : {8, 12, 16}) {
    const auto seg = fixture_segments(block, block / 2);
    CHECK(classify(make_preserved(seg)).label == PatternLabel::Preserved);
    CHECK(classify(make_forward_looking(seg)).label == PatternLabel::ForwardLooking);
    CHECK(classify(make_block_specific(seg)).label == PatternLabel::BlockSpecific);
    CHECK(classify(make_ngram(seg)).label == PatternLabel::NGram);
    checked += 4;
  }
  CHECK(checked == 12);
}

TEST_CASE("score details behave as defined") {
  const auto seg = fixture_segments(8, 4);

  PatternScores preserved = classify(make_preserved(seg));
  CHECK(preserved.above_block == 0.0);

  PatternScores fl = classify(make_forward_looking(seg));
  CHECK(fl.offset > 0.9);

  PatternScores bs = classify(make_block_specific(seg));
  CHECK(bs.vertical > 0.9);

  PatternScores ng = classify(make_ngram(seg));
  CHECK(ng.band > 0.9);
  CHECK(ng.above_block > 0.05);
}

TEST_CASE("non-stochastic maps are rejected") {
  AttentionRecord rec = base_record(fixture_segments(4, 0));
  rec.map(0, 0) = 0.7;  // row sums to 0.7
  CHECK_THROWS_WITH_AS(classify(rec), doctest::Contains("sums"), Error);
}

TEST_CASE("causal-model records never classify as ForwardLooking") {
  Rng rng(41);
  ModelConfig cfg;
  cfg.d = 16;
  cfg.h = 4;
  cfg.n_layers = 2;
  cfg.d_m = 32;
  cfg.vocab_size = 23;
  cfg.max_seq = 64;
  ModelWeights<double> w = init_weights<double>(cfg, rng);

  SegmentedTokens seg = segments_from_ids(fixture_segments(6, 3));
  for (auto& t : seg.token_ids) t = rng.uniform_int(cfg.vocab_size);

  ForwardOptions opts;
  opts.record_attention = true;
  auto fwd = forward<double>(seg.token_ids, build_mask(seg, MaskMode::Causal), w, cfg, opts);
  REQUIRE(fwd.attention.size() == static_cast<std::size_t>(cfg.n_layers * cfg.h));
  for (const auto& entry : fwd.attention) {
    AttentionRecord rec{entry.layer, entry.head, entry.map, seg.segment_ids};
    PatternScores scores = classify(rec);
    CHECK(scores.above_block == 0.0);
    CHECK(scores.offset == 0.0);
    CHECK(scores.label != PatternLabel::ForwardLooking);
  }
}

TEST_CASE("heatmap export") {
  AttentionRecord rec;
  rec.segment_ids = {0, 0};
  rec.map = Eigen::MatrixXd(2, 2);
  rec.map << 1.0, 0.0, 0.5, 0.5;
  const std::string path = "test_atlas_tmp.pgm";
  export_heatmap(rec, path);

  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::string magic;
  int w, h, maxval;
  in >> magic >> w >> h >> maxval;
  in.get();
  CHECK(magic == "P5");
  CHECK(w == 2);
  CHECK(h == 2);
  CHECK(maxval == 255);
  unsigned char px[4];
  in.read(reinterpret_cast<char*>(px), 4);
  CHECK(px[0] == 255);
  CHECK(px[1] == 0);
  CHECK(px[2] == 128);  // 0.5 rounds half-up
  CHECK(px[3] == 128);

  SUBCASE("round trip within quantization") {
    Eigen::MatrixXd back = read_pgm(path);
    CHECK((back - rec.map).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
  }

  SUBCASE("sidecar carries block starts") {
    std::ifstream side(path + ".json");
    REQUIRE(side.good());
    std::string content((std::istreambuf_iterator<char>(side)), {});
    CHECK(content.find("block_starts") != std::string::npos);
  }

  std::remove(path.c_str());
  std::remove((path + ".json").c_str());

  AttentionRecord empty;
  CHECK_THROWS_WITH_AS(export_heatmap(empty, "x.pgm"), doctest::Contains("empty"), Error);
}

TEST_CASE("report writes one deterministic row per record and reparses") {
  const auto seg = fixture_segments(8, 4);
  std::vector<AttentionRecord> records;
  for (int layer = 1; layer >= 0; --layer) {
    for (int head = 1; head >= 0; --head) {
      AttentionRecord rec = make_forward_looking(seg);
      rec.layer = layer;
      rec.head = head;
      records.push_back(std::move(rec));
    }
  }
  const std::string dir = "test_atlas_report_tmp";
  auto rows = report(records, dir);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].layer == 0);
  CHECK(rows[0].head == 0);
  CHECK(rows[3].layer == 1);
  CHECK(rows[3].head == 1);

  auto parsed = parse_report_csv(dir + "/report.csv");
  REQUIRE(parsed.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(parsed[i].layer == rows[i].layer);
    CHECK(parsed[i].head == rows[i].head);
    CHECK(parsed[i].scores.label == rows[i].scores.label);
  }
  std::filesystem::remove_all(dir);
}
