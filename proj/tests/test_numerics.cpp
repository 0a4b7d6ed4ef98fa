#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mas/graph.hpp"
#include "mas/tensor.hpp"
#include "support/testing.hpp"

using namespace mas;
using mas::testing::max_fd_rel_err;
using mas::testing::rand_matrix;
using mas::testing::rel_err;

using Md = Matrix<double>;
using Gd = Graph<double>;

TEST_CASE("matmul basics") {
  Rng rng(1);
  Md b = rand_matrix<double>(rng, 2, 3);
  Md identity = Md::Identity(2, 2);
  CHECK((matmul(identity, b) - b).cwiseAbs().maxCoeff() == 0.0);

  Md a(2, 2);
  a << 1, 2, 3, 4;
  Md ones(2, 1);
  ones << 1, 1;
  Md prod = matmul(a, ones);
  CHECK(prod(0, 0) == doctest::Approx(3.0));
  CHECK(prod(1, 0) == doctest::Approx(7.0));

  Md wrong = Md::Zero(3, 2);
  CHECK_THROWS_WITH_AS(matmul(a, wrong), doctest::Contains("matmul"), Error);
}

TEST_CASE("matmul gradients vs central differences") {
  Rng rng(42);
  Md a = rand_matrix<double>(rng, 5, 7);
  Md b = rand_matrix<double>(rng, 7, 3);

  Gd g;
  auto va = g.leaf(a, true);
  auto vb = g.leaf(b, true);
  auto loss = g.sum(g.matmul(va, vb));
  g.backward(loss);
  Md ga = g.grad(va);
  Md gb = g.grad(vb);

  auto loss_fn = [&]() {
    Gd h;
    auto xa = h.leaf(a, false);
    auto xb = h.leaf(b, false);
    return h.value(h.sum(h.matmul(xa, xb)))(0, 0);
  };
  CHECK(max_fd_rel_err(a, ga, loss_fn) < 1e-6);
  CHECK(max_fd_rel_err(b, gb, loss_fn) < 1e-6);
}

TEST_CASE("masked_softmax spec rows") {
  Matrix<double> scores(1, 3);
  scores << 1, 1, 1;
  std::vector<std::uint8_t> allowed = {1, 1, 0};
  Md out = masked_softmax_rows(scores, allowed.data());
  CHECK(out(0, 0) == doctest::Approx(0.5));
  CHECK(out(0, 1) == doctest::Approx(0.5));
  CHECK(out(0, 2) == 0.0);

  Matrix<double> one(1, 1);
  one << 0;
  std::vector<std::uint8_t> single = {1};
  CHECK(masked_softmax_rows(one, single.data())(0, 0) == 1.0);
}

TEST_CASE("masked_softmax over random masks is row-stochastic with exact zeros") {
  Rng rng(3);
  for (int iter = 0; iter < 50; ++iter) {
    const int n = 8;
    Md scores = rand_matrix<double>(rng, n, n, 3.0);
    AttnMask mask(n);
    for (int i = 0; i < n; ++i) {
      mask.set(i, i, true);  // keep every row feasible
      for (int j = 0; j < n; ++j) {
        if (rng.uniform() < 0.5) mask.set(i, j, true);
      }
    }
    Md out = masked_softmax(scores, mask);
    for (int i = 0; i < n; ++i) {
      double sum = 0;
      for (int j = 0; j < n; ++j) {
        if (!mask.at(i, j)) CHECK(out(i, j) == 0.0);
        sum += out(i, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("masked_softmax rejects fully masked rows and bad shapes") {
  Md scores = Md::Zero(2, 2);
  AttnMask mask(2);
  mask.set(0, 0, true);  // row 1 fully masked
  CHECK_THROWS_WITH_AS(masked_softmax(scores, mask), doctest::Contains("fully masked"), Error);
  AttnMask small(3);
  CHECK_THROWS_WITH_AS(masked_softmax(scores, small), doctest::Contains("masked_softmax"), Error);
}

TEST_CASE("silu values") {
  Md x(1, 3);
  x << 0.0, 1.0, -1000.0;
  Md y = silu(x);
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(std::abs(y(0, 2)) < 1e-6);  // saturates without overflow
}

TEST_CASE("layer_norm values") {
  Md gamma = Md::Ones(1, 4);
  Md beta = Md::Zero(1, 4);

  Md constant = Md::Constant(1, 4, 3.25);
  Md out = layer_norm(constant, gamma, beta, 1e-5);
  for (int j = 0; j < 4; ++j) CHECK(std::abs(out(0, j)) < 1e-9);

  Md pm(1, 2);
  pm << 1, -1;
  Md gamma2 = Md::Ones(1, 2), beta2 = Md::Zero(1, 2);
  Md out2 = layer_norm(pm, gamma2, beta2, 1e-12);
  CHECK(out2(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(out2(0, 1) == doctest::Approx(-1.0).epsilon(1e-9));

  Rng rng(5);
  Md row = rand_matrix<double>(rng, 1, 64, 2.0);
  Md gamma64 = Md::Ones(1, 64), beta64 = Md::Zero(1, 64);
  Md out3 = layer_norm(row, gamma64, beta64, 1e-5);
  const double mean = out3.mean();
  const double var = (out3.array() - mean).square().sum() / 64.0;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("rope behavior") {
  Rng rng(11);
  Md x = rand_matrix<double>(rng, 3, 8);

  SUBCASE("position zero is identity") {
    std::vector<int> zeros = {0, 0, 0};
    Md y = rope_apply<double>(x, zeros, 10000.0);
    CHECK((y - x).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("pairwise norms preserved") {
    std::vector<int> pos = {3, 17, 254};
    Md y = rope_apply<double>(x, pos, 10000.0);
    for (int t = 0; t < 3; ++t) {
      for (int k = 0; k < 4; ++k) {
        const double n0 = std::hypot(x(t, 2 * k), x(t, 2 * k + 1));
        const double n1 = std::hypot(y(t, 2 * k), y(t, 2 * k + 1));
        CHECK(n0 == doctest::Approx(n1).epsilon(1e-12));
      }
    }
  }

  SUBCASE("scores depend only on relative offset") {
    Md q = rand_matrix<double>(rng, 1, 8);
    Md k = rand_matrix<double>(rng, 1, 8);
    for (int c : {1, 5, 40}) {
      std::vector<int> pm = {4}, pn = {9};
      std::vector<int> pmc = {4 + c}, pnc = {9 + c};
      const double dot0 =
          (rope_apply<double>(q, pm, 10000.0) * rope_apply<double>(k, pn, 10000.0).transpose())(0, 0);
      const double dot1 =
          (rope_apply<double>(q, pmc, 10000.0) * rope_apply<double>(k, pnc, 10000.0).transpose())(0, 0);
      CHECK(std::abs(dot0 - dot1) < 1e-5);
    }
  }

  SUBCASE("odd head dim rejected") {
    Md odd = Md::Zero(1, 3);
    std::vector<int> p = {0};
    CHECK_THROWS_WITH_AS(rope_apply<double>(odd, p, 10000.0), doctest::Contains("even"), Error);
  }
}

TEST_CASE("backward of a linear map gives the outer-product gradient") {
  Rng rng(21);
  Md w = rand_matrix<double>(rng, 4, 6);
  Md x = rand_matrix<double>(rng, 6, 1);
  Gd g;
  auto vw = g.leaf(w, true);
  auto vx = g.leaf(x, false);
  auto loss = g.sum(g.matmul(vw, vx));
  g.backward(loss);
  Md expected = Md::Ones(4, 1) * x.transpose();
  CHECK((g.grad(vw) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("graph contract errors") {
  Gd empty;
  CHECK_THROWS_WITH_AS(empty.backward({0}), doctest::Contains("before any forward"), Error);

  Gd g;
  auto a = g.leaf(Md::Ones(2, 2), true);
  CHECK_THROWS_WITH_AS(g.backward(a), doctest::Contains("scalar"), Error);
  auto loss = g.sum(a);
  g.backward(loss);
  CHECK_THROWS_WITH_AS(g.backward(loss), doctest::Contains("already run"), Error);
  CHECK_THROWS_WITH_AS(g.sum(a), doctest::Contains("sealed"), Error);
}

TEST_CASE("two-layer composite network matches finite differences") {
  Rng rng(33);
  Md w1 = rand_matrix<double>(rng, 5, 8, 0.5);
  Md w2 = rand_matrix<double>(rng, 8, 3, 0.5);
  Md x = rand_matrix<double>(rng, 2, 5, 1.0);
  Md gamma = Md::Ones(1, 8);
  Md beta = Md::Zero(1, 8);

  auto build = [&](Gd& g, bool want_grad) {
    auto vx = g.leaf(x, false);
    auto vw1 = g.leaf(w1, want_grad);
    auto vw2 = g.leaf(w2, want_grad);
    auto vgamma = g.leaf(gamma, want_grad);
    auto vbeta = g.leaf(beta, want_grad);
    auto h = g.layer_norm(g.silu(g.matmul(vx, vw1)), vgamma, vbeta, 1e-5);
    auto out = g.matmul(h, vw2);
    struct Vars {
      Gd::Var loss, w1, w2, gamma, beta;
    };
    return Vars{g.sum(g.silu(out)), vw1, vw2, vgamma, vbeta};
  };

  Gd g;
  auto vars = build(g, true);
  g.backward(vars.loss);
  Md gw1 = g.grad(vars.w1);
  Md gw2 = g.grad(vars.w2);
  Md ggamma = g.grad(vars.gamma);
  Md gbeta = g.grad(vars.beta);

  auto loss_fn = [&]() {
    Gd h;
    return h.value(build(h, false).loss)(0, 0);
  };
  CHECK(max_fd_rel_err(w1, gw1, loss_fn) < 1e-4);
  CHECK(max_fd_rel_err(w2, gw2, loss_fn) < 1e-4);
  CHECK(max_fd_rel_err(gamma, ggamma, loss_fn) < 1e-4);
  CHECK(max_fd_rel_err(beta, gbeta, loss_fn) < 1e-4);
}

TEST_CASE("per-op gradients vs finite differences") {
  Rng rng(55);

  SUBCASE("matmul_nt") {
    Md a = rand_matrix<double>(rng, 4, 6);
    Md b = rand_matrix<double>(rng, 5, 6);
    Gd g;
    auto va = g.leaf(a, true);
    auto vb = g.leaf(b, true);
    auto loss = g.sum(g.silu(g.matmul_nt(va, vb)));
    g.backward(loss);
    Md ga = g.grad(va), gb = g.grad(vb);
    auto fn = [&]() {
      Gd h;
      return h.value(h.sum(h.silu(h.matmul_nt(h.leaf(a, false), h.leaf(b, false)))))(0, 0);
    };
    CHECK(max_fd_rel_err(a, ga, fn) < 1e-4);
    CHECK(max_fd_rel_err(b, gb, fn) < 1e-4);
  }

  SUBCASE("mul and scale") {
    Md a = rand_matrix<double>(rng, 3, 4);
    Md b = rand_matrix<double>(rng, 3, 4);
    Gd g;
    auto va = g.leaf(a, true);
    auto vb = g.leaf(b, true);
    auto loss = g.sum(g.scale(g.mul(g.silu(va), vb), 1.75));
    g.backward(loss);
    Md ga = g.grad(va), gb = g.grad(vb);
    auto fn = [&]() {
      Gd h;
      return h.value(
          h.sum(h.scale(h.mul(h.silu(h.leaf(a, false)), h.leaf(b, false)), 1.75)))(0, 0);
    };
    CHECK(max_fd_rel_err(a, ga, fn) < 1e-4);
    CHECK(max_fd_rel_err(b, gb, fn) < 1e-4);
  }

  SUBCASE("slice and concat") {
    Md a = rand_matrix<double>(rng, 3, 8);
    Gd g;
    auto va = g.leaf(a, true);
    auto left = g.slice_cols(va, 0, 4);
    auto right = g.slice_cols(va, 4, 4);
    auto loss = g.sum(g.silu(g.concat_cols({g.mul(left, right), right})));
    g.backward(loss);
    Md ga = g.grad(va);
    auto fn = [&]() {
      Gd h;
      auto xa = h.leaf(a, false);
      auto l = h.slice_cols(xa, 0, 4);
      auto r = h.slice_cols(xa, 4, 4);
      return h.value(h.sum(h.silu(h.concat_cols({h.mul(l, r), r}))))(0, 0);
    };
    CHECK(max_fd_rel_err(a, ga, fn) < 1e-4);
  }

  SUBCASE("rms_norm") {
    Md x = rand_matrix<double>(rng, 3, 6);
    Md gamma = rand_matrix<double>(rng, 1, 6, 0.3);
    Gd g;
    auto vx = g.leaf(x, true);
    auto vgamma = g.leaf(gamma, true);
    auto loss = g.sum(g.silu(g.rms_norm(vx, vgamma, 1e-5)));
    g.backward(loss);
    Md gx = g.grad(vx), gg = g.grad(vgamma);
    auto fn = [&]() {
      Gd h;
      return h.value(
          h.sum(h.silu(h.rms_norm(h.leaf(x, false), h.leaf(gamma, false), 1e-5))))(0, 0);
    };
    CHECK(max_fd_rel_err(x, gx, fn) < 1e-4);
    CHECK(max_fd_rel_err(gamma, gg, fn) < 1e-4);
  }

  SUBCASE("masked_softmax") {
    Md scores = rand_matrix<double>(rng, 5, 5, 2.0);
    AttnMask mask(5);
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j <= i; ++j) mask.set(i, j, true);
    }
    Md post = rand_matrix<double>(rng, 5, 5);
    Gd g;
    auto vs = g.leaf(scores, true);
    auto loss = g.sum(g.mul(g.masked_softmax(vs, mask), g.leaf(post, false)));
    g.backward(loss);
    Md gs = g.grad(vs);
    auto fn = [&]() {
      Gd h;
      return h.value(
          h.sum(h.mul(h.masked_softmax(h.leaf(scores, false), mask), h.leaf(post, false))))(0, 0);
    };
    CHECK(max_fd_rel_err(scores, gs, fn) < 1e-4);
  }

  SUBCASE("rope") {
    Md x = rand_matrix<double>(rng, 4, 6);
    std::vector<int> pos = {0, 2, 5, 9};
    Md post = rand_matrix<double>(rng, 4, 6);
    Gd g;
    auto vx = g.leaf(x, true);
    auto loss = g.sum(g.mul(g.rope(vx, pos, 10000.0), g.leaf(post, false)));
    g.backward(loss);
    Md gx = g.grad(vx);
    auto fn = [&]() {
      Gd h;
      return h.value(h.sum(h.mul(h.rope(h.leaf(x, false), pos, 10000.0),
                                 h.leaf(post, false))))(0, 0);
    };
    CHECK(max_fd_rel_err(x, gx, fn) < 1e-4);
  }

  SUBCASE("embed_rows") {
    Md table = rand_matrix<double>(rng, 7, 4);
    std::vector<int> ids = {2, 5, 2, 0};
    Gd g;
    auto vt = g.leaf(table, true);
    auto loss = g.sum(g.silu(g.embed_rows(vt, ids)));
    g.backward(loss);
    Md gt = g.grad(vt);
    auto fn = [&]() {
      Gd h;
      return h.value(h.sum(h.silu(h.embed_rows(h.leaf(table, false), ids))))(0, 0);
    };
    CHECK(max_fd_rel_err(table, gt, fn) < 1e-4);
  }

  SUBCASE("cross_entropy") {
    Md logits = rand_matrix<double>(rng, 6, 9, 2.0);
    std::vector<int> targets = {1, 4, 0, 8, 3, 2};
    std::vector<std::uint8_t> mask = {0, 1, 1, 0, 1, 0};
    Gd g;
    auto vl = g.leaf(logits, true);
    auto loss = g.cross_entropy(vl, targets, mask);
    g.backward(loss);
    Md gl = g.grad(vl);
    auto fn = [&]() {
      Gd h;
      return h.value(h.cross_entropy(h.leaf(logits, false), targets, mask))(0, 0);
    };
    CHECK(max_fd_rel_err(logits, gl, fn) < 1e-4);
  }
}

TEST_CASE("dropout keeps forward and backward masks aligned") {
  Rng rng(77);
  Md x = Md::Ones(8, 8);
  Gd g;
  g.set_rng(&rng);
  auto vx = g.leaf(x, true);
  auto dropped = g.dropout(vx, 0.5);
  auto loss = g.sum(dropped);
  g.backward(loss);
  const Md& y = g.value(dropped);
  Md gx = g.grad(vx);
  int kept = 0;
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      if (y(i, j) == 0.0) {
        CHECK(gx(i, j) == 0.0);
      } else {
        CHECK(y(i, j) == doctest::Approx(2.0));
        CHECK(gx(i, j) == doctest::Approx(2.0));
        ++kept;
      }
    }
  }
  CHECK(kept > 10);
  CHECK(kept < 54);

  Gd g2;
  auto v2 = g2.leaf(x, true);
  CHECK(g2.dropout(v2, 0.0).id == v2.id);  // p == 0 is the identity
  CHECK_THROWS_AS(g2.dropout(v2, 0.5), Error);  // no rng attached
}

TEST_CASE("ops are bit-deterministic") {
  Rng rng(99);
  Matrix<float> a = rand_matrix<float>(rng, 17, 31);
  Matrix<float> b = rand_matrix<float>(rng, 31, 13);
  Matrix<float> c1 = matmul(a, b);
  Matrix<float> c2 = matmul(a, b);
  CHECK(std::memcmp(c1.data(), c2.data(), sizeof(float) * c1.size()) == 0);

  Matrix<float> s1 = silu(c1);
  Matrix<float> s2 = silu(c2);
  CHECK(std::memcmp(s1.data(), s2.data(), sizeof(float) * s1.size()) == 0);
}

TEST_CASE("matmul stats accumulate") {
  reset_matmul_stats();
  Md a = Md::Ones(3, 4);
  Md b = Md::Ones(4, 5);
  matmul(a, b);
  CHECK(matmul_stats().calls == 1);
  CHECK(matmul_stats().flops == 2ull * 3 * 4 * 5);
  reset_matmul_stats();
  CHECK(matmul_stats().calls == 0);
}
