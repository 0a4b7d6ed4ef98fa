#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mas/model.hpp"
#include "mas/model_graph.hpp"
#include "support/testing.hpp"

using namespace mas;
using mas::testing::max_fd_rel_err;
using mas::testing::rand_matrix;

namespace {

ModelConfig tiny_config(int d = 8, int h = 2, int layers = 2, int d_m = 16, int vocab = 11) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.h = h;
  cfg.n_layers = layers;
  cfg.d_m = d_m;
  cfg.vocab_size = vocab;
  cfg.max_seq = 64;
  return cfg;
}

template <typename S>
Matrix<S> plain_logits(const std::vector<int>& tokens, const SegmentedTokens& seg, MaskMode mode,
                       const ModelWeights<S>& w, const ModelConfig& cfg) {
  (void)tokens;
  return forward<S>(seg.token_ids, build_mask(seg, mode), w, cfg).logits;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.h = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);  // d % h != 0
}

TEST_CASE("odd head dim rejected") {
  ModelConfig cfg = tiny_config(6, 2, 1, 8, 5);  // dh = 3
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("even"), Error);
}

TEST_CASE("single-token attention reduces to value path") {
  Rng rng(2);
  ModelConfig cfg = tiny_config();
  ModelWeights<double> w = init_weights<double>(cfg, rng);
  Matrix<double> x = rand_matrix<double>(rng, 1, cfg.d);
  AttnMask mask(1);
  mask.set(0, 0, true);
  std::vector<int> pos = {0};
  Matrix<double> out = mha_forward(x, w.layers[0], mask, pos, cfg);
  Matrix<double> expected = matmul(Matrix<double>(matmul(x, w.layers[0].wv)), w.layers[0].wo);
  CHECK((out - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("causal rows ignore future tokens, mas rows see their block") {
  Rng rng(4);
  ModelConfig cfg = tiny_config();
  ModelWeights<double> w = init_weights<double>(cfg, rng);

  SegmentedTokens seg = segments_from_ids({0, 0, 1, 1});
  std::vector<int> tokens = {1, 2, 3, 4};
  seg.token_ids = tokens;
  std::vector<int> tokens2 = tokens;
  tokens2[3] = 9;  // perturb the last token
  SegmentedTokens seg2 = seg;
  seg2.token_ids = tokens2;

  SUBCASE("causal: rows before the perturbed position are unchanged") {
    Matrix<double> a = forward<double>(seg.token_ids, build_mask(seg, MaskMode::Causal), w, cfg).logits;
    Matrix<double> b = forward<double>(seg2.token_ids, build_mask(seg2, MaskMode::Causal), w, cfg).logits;
    for (int i = 0; i < 3; ++i) {
      CHECK((a.row(i) - b.row(i)).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK((a.row(3) - b.row(3)).cwiseAbs().maxCoeff() > 0.0);
  }

  SUBCASE("mas: same-segment rows change, other-segment rows do not") {
    Matrix<double> a = forward<double>(seg.token_ids, build_mask(seg, MaskMode::Mas), w, cfg).logits;
    Matrix<double> b = forward<double>(seg2.token_ids, build_mask(seg2, MaskMode::Mas), w, cfg).logits;
    // Rows 0,1 live in segment 0 and cannot see segment 1.
    CHECK((a.row(0) - b.row(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.row(1) - b.row(1)).cwiseAbs().maxCoeff() == 0.0);
    // Row 2 shares segment 1 with the perturbed token 3.
    CHECK((a.row(2) - b.row(2)).cwiseAbs().maxCoeff() > 0.0);
  }

  SUBCASE("mas prefill is bidirectional within a block") {
    std::vector<int> t1 = {1, 2}, t2 = {1, 7};
    SegmentedTokens s = segments_from_ids({0, 0});
    SegmentedTokens s1 = s, s2 = s;
    s1.token_ids = t1;
    s2.token_ids = t2;
    Matrix<double> a = forward<double>(s1.token_ids, build_mask(s1, MaskMode::Mas), w, cfg).logits;
    Matrix<double> b = forward<double>(s2.token_ids, build_mask(s2, MaskMode::Mas), w, cfg).logits;
    CHECK((a.row(0) - b.row(0)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("swiglu values") {
  ModelConfig cfg = tiny_config(1, 1, 1, 1, 3);
  // d = 1 fails head-dim validation; build weights by hand instead.
  LayerWeights<double> lw;
  lw.wu = Matrix<double>::Ones(1, 1);
  lw.wg = Matrix<double>::Ones(1, 1);
  lw.wd = Matrix<double>::Ones(1, 1);
  Matrix<double> zero = Matrix<double>::Zero(1, 1);
  CHECK(swiglu_mlp(zero, lw)(0, 0) == 0.0);
  Matrix<double> one = Matrix<double>::Ones(1, 1);
  CHECK(swiglu_mlp(one, lw)(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  (void)cfg;
}

TEST_CASE("block with zero attention and mlp weights is the identity") {
  Rng rng(6);
  ModelConfig cfg = tiny_config();
  ModelWeights<double> w = init_weights<double>(cfg, rng);
  auto& lw = w.layers[0];
  lw.wq.setZero();
  lw.wk.setZero();
  lw.wv.setZero();
  lw.wo.setZero();
  lw.wu.setZero();
  lw.wg.setZero();
  lw.wd.setZero();
  Matrix<double> x = rand_matrix<double>(rng, 3, cfg.d);
  SegmentedTokens seg = segments_from_ids({0, 1, 2});
  std::vector<int> pos = {0, 1, 2};
  Matrix<double> out = block_forward(x, lw, build_mask(seg, MaskMode::Causal), pos, cfg);
  CHECK((out - x).cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.rows() == 3);
  CHECK(out.cols() == cfg.d);
}

TEST_CASE("forward determinism and mask degeneration") {
  Rng rng(8);
  ModelConfig cfg = tiny_config();
  ModelWeights<float> w = init_weights<float>(cfg, rng);
  SegmentedTokens seg = segments_from_ids({0, 1, 2, 3});
  seg.token_ids = {5, 1, 9, 2};

  Matrix<float> a = forward<float>(seg.token_ids, build_mask(seg, MaskMode::Mas), w, cfg).logits;
  Matrix<float> b = forward<float>(seg.token_ids, build_mask(seg, MaskMode::Mas), w, cfg).logits;
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0f);

  // All-singleton segments: MAS mask equals causal mask, logits bit-identical.
  Matrix<float> c = forward<float>(seg.token_ids, build_mask(seg, MaskMode::Causal), w, cfg).logits;
  CHECK((a - c).cwiseAbs().maxCoeff() == 0.0f);

  CHECK(a.allFinite());
}

TEST_CASE("forward input validation") {
  Rng rng(10);
  ModelConfig cfg = tiny_config();
  cfg.max_seq = 3;
  ModelWeights<double> w = init_weights<double>(cfg, rng);
  SegmentedTokens seg = segments_from_ids({0, 0, 0, 0});
  seg.token_ids = {0, 1, 2, 3};
  CHECK_THROWS_WITH_AS(
      (void)forward<double>(seg.token_ids, build_mask(seg, MaskMode::Causal), w, cfg),
      doctest::Contains("max_seq"), Error);

  cfg.max_seq = 64;
  SegmentedTokens short_seg = segments_from_ids({0, 0});
  short_seg.token_ids = {0, 99};  // out of vocab
  CHECK_THROWS_WITH_AS(
      (void)forward<double>(short_seg.token_ids, build_mask(short_seg, MaskMode::Causal), w, cfg),
      doctest::Contains("vocab"), Error);
}

TEST_CASE("graph forward matches plain forward bit for bit") {
  Rng rng(12);
  for (NormKind norm : {NormKind::LayerNorm, NormKind::RmsNorm}) {
    ModelConfig cfg = tiny_config();
    cfg.norm = norm;
    ModelWeights<double> w = init_weights<double>(cfg, rng);
    SegmentedTokens seg = segments_from_ids({0, 0, 1, 1, -1});
    seg.token_ids = {1, 4, 7, 2, 10};
    AttnMask mask = build_mask(seg, MaskMode::Mas);

    Matrix<double> plain = forward<double>(seg.token_ids, mask, w, cfg).logits;

    Graph<double> g;
    GraphWeights<double> gw = make_graph_weights(g, w, false);
    auto logits = forward_graph(g, std::span<const int>(seg.token_ids), mask, gw, cfg);
    CHECK((g.value(logits) - plain).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("full-model gradient check (2 layers, d=8, h=2, vocab=11)") {
  Rng rng(14);
  ModelConfig cfg = tiny_config(8, 2, 2, 16, 11);
  ModelWeights<double> w = init_weights<double>(cfg, rng);
  SegmentedTokens seg = segments_from_ids({0, 0, 1, -1});
  seg.token_ids = {3, 9, 1, 6};
  AttnMask mask = build_mask(seg, MaskMode::Mas);
  std::vector<int> targets = {9, 1, 6, 0};
  std::vector<std::uint8_t> loss_mask = {1, 1, 1, 0};

  auto loss_of = [&](Graph<double>& g, bool trainable) {
    GraphWeights<double> gw = make_graph_weights(g, w, trainable);
    auto logits = forward_graph(g, std::span<const int>(seg.token_ids), mask, gw, cfg);
    return std::pair(g.cross_entropy(logits, targets, loss_mask), gw);
  };

  Graph<double> g;
  auto [loss, gw] = loss_of(g, true);
  g.backward(loss);

  auto fd = [&]() {
    Graph<double> h;
    auto [l, _] = loss_of(h, false);
    return h.value(l)(0, 0);
  };

  // h = 1e-4: the loss is O(ln vocab), so smaller steps drown tiny gradient
  // entries in f64 rounding noise rather than truncation error.
  auto check_param = [&](Matrix<double>& param, const Matrix<double>& grad, const char* name) {
    INFO("param ", name);
    CHECK(max_fd_rel_err(param, grad, fd, 1e-4) < 1e-4);
  };

  check_param(w.tok_embed, g.grad(gw.tok_embed), "tok_embed");
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    auto& lw = w.layers[static_cast<std::size_t>(layer)];
    auto& gl = gw.layers[static_cast<std::size_t>(layer)];
    check_param(lw.wq, g.grad(gl.wq), "wq");
    check_param(lw.wk, g.grad(gl.wk), "wk");
    check_param(lw.wv, g.grad(gl.wv), "wv");
    check_param(lw.wo, g.grad(gl.wo), "wo");
    check_param(lw.wu, g.grad(gl.wu), "wu");
    check_param(lw.wg, g.grad(gl.wg), "wg");
    check_param(lw.wd, g.grad(gl.wd), "wd");
    check_param(lw.ln1_gamma, g.grad(gl.ln1_gamma), "ln1_gamma");
    check_param(lw.ln1_beta, g.grad(gl.ln1_beta), "ln1_beta");
    check_param(lw.ln2_gamma, g.grad(gl.ln2_gamma), "ln2_gamma");
    check_param(lw.ln2_beta, g.grad(gl.ln2_beta), "ln2_beta");
  }
  check_param(w.final_ln_gamma, g.grad(gw.final_ln_gamma), "final_ln_gamma");
  check_param(w.final_ln_beta, g.grad(gw.final_ln_beta), "final_ln_beta");
  check_param(w.unembed, g.grad(gw.unembed), "unembed");
}

TEST_CASE("attention records cover every layer and head and are stochastic") {
  Rng rng(16);
  ModelConfig cfg = tiny_config();
  ModelWeights<double> w = init_weights<double>(cfg, rng);
  SegmentedTokens seg = segments_from_ids({0, 0, 1, -1});
  seg.token_ids = {1, 2, 3, 4};
  AttnMask mask = build_mask(seg, MaskMode::Mas);
  ForwardOptions opts;
  opts.record_attention = true;
  auto result = forward<double>(seg.token_ids, mask, w, cfg, opts);
  CHECK(result.attention.size() == static_cast<std::size_t>(cfg.n_layers * cfg.h));
  for (const auto& rec : result.attention) {
    for (int i = 0; i < rec.map.rows(); ++i) {
      CHECK(rec.map.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
      for (int j = 0; j < rec.map.cols(); ++j) {
        if (!mask.at(i, j)) CHECK(rec.map(i, j) == 0.0);
      }
    }
  }
}

TEST_CASE("tied unembedding works") {
  Rng rng(18);
  ModelConfig cfg = tiny_config();
  cfg.tied_unembedding = true;
  ModelWeights<double> w = init_weights<double>(cfg, rng);
  CHECK(w.unembed.size() == 0);
  SegmentedTokens seg = segments_from_ids({0, 0});
  seg.token_ids = {1, 2};
  auto logits = forward<double>(seg.token_ids, build_mask(seg, MaskMode::Causal), w, cfg).logits;
  CHECK(logits.cols() == cfg.vocab_size);
  CHECK(logits.allFinite());
}
