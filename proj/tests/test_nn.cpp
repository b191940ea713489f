#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <set>

#include "helpers.hpp"
#include "htr/htr.hpp"

using Catch::Approx;
using namespace htr;

#ifndef HTR_TEST_DIR
#define HTR_TEST_DIR "."
#endif

namespace {

const std::vector<ConvGeometry>& test_geometries() {
  static const std::vector<ConvGeometry> gs = {
      {7, 9, 2, 3, 3, 3, 1, 1},  {8, 10, 1, 4, 4, 2, 4, 2}, {5, 5, 3, 2, 1, 1, 2, 2},
      {6, 4, 2, 2, 5, 3, 1, 2},  {3, 3, 2, 2, 7, 7, 3, 3},  {10, 6, 3, 5, 2, 4, 2, 1},
  };
  return gs;
}

Tensor reverse_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t T = x.dim(0), D = x.dim(1);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) out.at(T - 1 - t, d) = x.at(t, d);
  return out;
}

struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("htr_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }

  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Tiny two-block model exercising every layer family, dropout disabled so
// forward passes are deterministic and finite differences are meaningful.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_h = 8;
  cfg.input_w = 16;
  cfg.charset_size = 3;
  cfg.blocks = {
      {'C', 3, 3, 3, 2, 2, true, 0.0},
      {'D', 4, 3, 3, 2, 2, false, 0.0},
  };
  cfg.pool_h = 2;
  cfg.pool_w = 1;
  cfg.rnn_units = {3, 3};
  cfg.dense_between = 6;
  cfg.rnn_dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("conv2d matches the direct oracle") {
  Rng rng(101);
  for (const ConvGeometry& g : test_geometries()) {
    const ConvLayer l = oracle::make_conv(g, rng);
    const Tensor x = oracle::random_tensor({g.in_h, g.in_w, g.in_ch}, rng);
    const Tensor got = conv2d_forward(l, x);
    const Tensor want = oracle::naive_conv2d(l, x);
    REQUIRE(got.same_shape(want));
    REQUIRE(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("dwsep conv matches the direct oracle") {
  Rng rng(102);
  for (const ConvGeometry& g : test_geometries()) {
    const DWSepConvLayer l = oracle::make_dwsep(g, rng);
    const Tensor x = oracle::random_tensor({g.in_h, g.in_w, g.in_ch}, rng);
    const Tensor got = dwsep_conv2d_forward(l, x);
    const Tensor want = oracle::naive_dwsep(l, x);
    REQUIRE(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("gated conv matches the direct oracle") {
  Rng rng(103);
  for (const ConvGeometry& g : test_geometries()) {
    const GatedConvLayer l = oracle::make_gated(g, rng);
    const Tensor x = oracle::random_tensor({g.in_h, g.in_w, g.in_ch}, rng);
    const Tensor got = gated_conv2d_forward(l, x);
    const Tensor want = oracle::naive_gated(l, x);
    REQUIRE(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("instrumented kernels count exactly the closed-form multiplications") {
  Rng rng(104);
  for (const ConvGeometry& g : test_geometries()) {
    const Tensor x = oracle::random_tensor({g.in_h, g.in_w, g.in_ch}, rng);

    MultCounter cs;
    conv2d_forward(oracle::make_conv(g, rng), x, cs);
    const std::uint64_t pp = static_cast<std::uint64_t>(g.out_h()) * g.out_w();
    REQUIRE(cs.mults == count_mults(g, ConvKind::Standard));
    REQUIRE(cs.mults == static_cast<std::uint64_t>(g.out_ch) * pp * g.kernel_area() * g.in_ch);

    MultCounter cd;
    dwsep_conv2d_forward(oracle::make_dwsep(g, rng), x, cd);
    REQUIRE(cd.mults == count_mults(g, ConvKind::DWSep));
    REQUIRE(cd.mults == static_cast<std::uint64_t>(g.in_ch) * pp * (g.kernel_area() + g.out_ch));

    MultCounter cg;
    const GatedConvLayer gl = oracle::make_gated(g, rng);
    gated_conv2d_forward(gl, x, cg);
    REQUIRE(cg.mults == gated_conv_mults(gl.feature.geom));
  }
}

TEST_CASE("standard conv always multiplies more than dwsep on the default blocks") {
  const ModelConfig cfg = ModelConfig::reference();
  std::size_t h = cfg.input_h, w = cfg.input_w, ch = 1;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const ConvGeometry g = cfg.block_geometry(i, h, w, ch);
    REQUIRE(count_mults(g, ConvKind::Standard) > count_mults(g, ConvKind::DWSep));
    // equivalent closed form of the gap's sign
    REQUIRE(g.kernel_area() * (g.out_ch - 1) > g.out_ch);
    h = g.out_h();
    w = g.out_w();
    ch = g.out_ch;
  }
}

TEST_CASE("maxpool forward and tie-breaking backward") {
  MaxPoolLayer pool{2, 2};
  Tensor x({2, 4, 1});
  const double vals[2][4] = {{1, 1, 3, 2}, {1, 1, 0, 3}};
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t xx = 0; xx < 4; ++xx) x.at(y, xx, 0) = vals[y][xx];

  const Tensor out = maxpool_forward(pool, x);
  REQUIRE(out.shape() == std::vector<std::size_t>{1, 2, 1});
  REQUIRE(out.at(0, 0, 0) == 1.0);
  REQUIRE(out.at(0, 1, 0) == 3.0);

  Tensor go({1, 2, 1});
  go.at(0, 0, 0) = 5.0;
  go.at(0, 1, 0) = 7.0;
  const Tensor gin = maxpool_backward(pool, x, go);
  // all-equal window: the first cell in row-major order wins
  REQUIRE(gin.at(0, 0, 0) == 5.0);
  REQUIRE(gin.at(0, 1, 0) == 0.0);
  REQUIRE(gin.at(1, 0, 0) == 0.0);
  // tie between (0,2) and (1,3): row-major first wins
  REQUIRE(gin.at(0, 2, 0) == 7.0);
  REQUIRE(gin.at(1, 3, 0) == 0.0);

  // rectangular extents divide the axes independently
  MaxPoolLayer tall{2, 1};
  const Tensor rect = maxpool_forward(tall, x);
  REQUIRE(rect.shape() == std::vector<std::size_t>{1, 4, 1});
  REQUIRE(rect.at(0, 3, 0) == 3.0);
}

TEST_CASE("batchnorm applies fixed statistics with trainable affine") {
  BatchNormLayer l = BatchNormLayer::make(2);
  l.scale = Tensor::from({2}, {2.0, -1.0});
  l.shift = Tensor::from({2}, {1.0, 0.5});
  l.mean = Tensor::from({2}, {0.5, -1.0});
  l.var = Tensor::from({2}, {4.0, 0.25});

  Tensor x({1, 1, 2});
  x.at(0, 0, 0) = 1.5;
  x.at(0, 0, 1) = 0.0;
  const Tensor out = batchnorm_forward(l, x);
  REQUIRE(out.at(0, 0, 0) == Approx(2.0 * 1.0 / std::sqrt(4.0 + 1e-5) + 1.0).epsilon(1e-14));
  REQUIRE(out.at(0, 0, 1) == Approx(-1.0 * 1.0 / std::sqrt(0.25 + 1e-5) + 0.5).epsilon(1e-14));
}

TEST_CASE("prelu keeps positives and scales negatives per channel") {
  PReLULayer l = PReLULayer::make(2);
  l.alpha = Tensor::from({2}, {0.25, -0.5});
  Tensor x({2, 1, 2});
  x.at(0, 0, 0) = 3.0;
  x.at(0, 0, 1) = -2.0;
  x.at(1, 0, 0) = -4.0;
  x.at(1, 0, 1) = 5.0;
  const Tensor out = prelu_forward(l, x);
  REQUIRE(out.at(0, 0, 0) == 3.0);
  REQUIRE(out.at(0, 0, 1) == 1.0);
  REQUIRE(out.at(1, 0, 0) == -1.0);
  REQUIRE(out.at(1, 0, 1) == 5.0);
}

TEST_CASE("inverted dropout") {
  Rng rng(105);
  Tensor x({100, 100});
  x.fill(1.0);

  SECTION("rate zero is the identity") {
    const DropoutResult r = dropout_forward(x, 0.0, rng);
    REQUIRE(max_abs_diff(r.output, x) == 0.0);
    for (std::size_t i = 0; i < r.mask.size(); ++i) REQUIRE(r.mask.raw()[i] == 1.0);
  }

  SECTION("mask values and drop statistics") {
    const double rate = 0.3;
    const DropoutResult r = dropout_forward(x, rate, rng);
    std::size_t zeros = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < r.mask.size(); ++i) {
      const double m = r.mask.raw()[i];
      REQUIRE((m == 0.0 || m == Approx(1.0 / 0.7).epsilon(1e-14)));
      zeros += m == 0.0 ? 1 : 0;
      sum += r.output.raw()[i];
    }
    const double zfrac = static_cast<double>(zeros) / r.mask.size();
    REQUIRE(zfrac == Approx(rate).margin(0.02));
    // inverted scaling keeps the expectation
    REQUIRE(sum / x.size() == Approx(1.0).margin(0.05));
  }

  SECTION("backward is the stored mask times the gradient") {
    const DropoutResult r = dropout_forward(x, 0.4, rng);
    Tensor go({100, 100});
    go.fill(2.0);
    const Tensor gin = dropout_backward(r.mask, go);
    for (std::size_t i = 0; i < gin.size(); ++i)
      REQUIRE(gin.raw()[i] == r.mask.raw()[i] * 2.0);
  }

  SECTION("rate validation") {
    REQUIRE_THROWS_AS(dropout_forward(x, -0.1, rng), ValidationError);
    REQUIRE_THROWS_AS(dropout_forward(x, 1.0, rng), ValidationError);
  }
}

TEST_CASE("dense layer forward example") {
  DenseLayer l;
  l.in_dim = 2;
  l.out_dim = 3;
  l.weight = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  l.bias = Tensor::from({3}, {0.5, -0.5, 0.0});
  const Tensor x = Tensor::from({1, 2}, {2.0, -1.0});
  const Tensor out = dense_forward(l, x);
  REQUIRE(out.at(0, 0) == Approx(2 * 1 - 1 * 4 + 0.5));
  REQUIRE(out.at(0, 1) == Approx(2 * 2 - 1 * 5 - 0.5));
  REQUIRE(out.at(0, 2) == Approx(2 * 3 - 1 * 6));
}

TEST_CASE("softmax rows are normalized and shift-invariant") {
  Rng rng(106);
  Tensor logits = oracle::random_tensor({5, 7}, rng, -30.0, 30.0);
  const Tensor p = softmax_rows(logits);
  for (std::size_t t = 0; t < 5; ++t) {
    double sum = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      REQUIRE(p.at(t, k) > 0.0);
      sum += p.at(t, k);
    }
    REQUIRE(sum == Approx(1.0).epsilon(1e-12));
  }

  Tensor shifted = logits;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted.raw()[i] += 1234.5;
  REQUIRE(max_abs_diff(softmax_rows(shifted), p) < 1e-12);

  // extreme logits stay finite
  Tensor huge = Tensor::from({1, 2}, {5000.0, -5000.0});
  const Tensor ph = softmax_rows(huge);
  REQUIRE(ph.at(0, 0) == Approx(1.0));
  REQUIRE(ph.all_finite());
}

TEST_CASE("finite differences validate every layer backward") {
  Rng rng(107);
  const ConvGeometry g{5, 6, 2, 3, 3, 3, 2, 1};
  const Tensor coeff3 = oracle::random_tensor({g.out_h(), g.out_w(), g.out_ch}, rng);

  SECTION("conv2d") {
    ConvLayer l = oracle::make_conv(g, rng);
    Tensor x = oracle::random_tensor({g.in_h, g.in_w, g.in_ch}, rng);
    const ConvGrads grads = conv2d_backward(l, x, coeff3);
    const auto loss = [&] { return oracle::project(conv2d_forward(l, x), coeff3); };
    REQUIRE(oracle::fd_check(l.weight, grads.weight, loss).pass());
    REQUIRE(oracle::fd_check(l.bias, grads.bias, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }

  SECTION("dwsep conv") {
    DWSepConvLayer l = oracle::make_dwsep(g, rng);
    Tensor x = oracle::random_tensor({g.in_h, g.in_w, g.in_ch}, rng);
    const DWSepGrads grads = dwsep_conv2d_backward(l, x, coeff3);
    const auto loss = [&] { return oracle::project(dwsep_conv2d_forward(l, x), coeff3); };
    REQUIRE(oracle::fd_check(l.depth_weight, grads.depth_weight, loss).pass());
    REQUIRE(oracle::fd_check(l.depth_bias, grads.depth_bias, loss).pass());
    REQUIRE(oracle::fd_check(l.point_weight, grads.point_weight, loss).pass());
    REQUIRE(oracle::fd_check(l.point_bias, grads.point_bias, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }

  SECTION("gated conv") {
    GatedConvLayer l = oracle::make_gated(g, rng);
    const ConvGeometry& gg = l.feature.geom;
    Tensor x = oracle::random_tensor({gg.in_h, gg.in_w, gg.in_ch}, rng);
    const Tensor coeff = oracle::random_tensor({gg.out_h(), gg.out_w(), gg.out_ch}, rng);
    const GatedConvGrads grads = gated_conv2d_backward(l, x, coeff);
    const auto loss = [&] { return oracle::project(gated_conv2d_forward(l, x), coeff); };
    REQUIRE(oracle::fd_check(l.feature.weight, grads.feature.weight, loss).pass());
    REQUIRE(oracle::fd_check(l.gate.weight, grads.gate.weight, loss).pass());
    REQUIRE(oracle::fd_check(l.gate.bias, grads.gate.bias, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }

  SECTION("batchnorm") {
    BatchNormLayer l = BatchNormLayer::make(3);
    l.scale = oracle::random_tensor({3}, rng, 0.5, 2.0);
    l.shift = oracle::random_tensor({3}, rng);
    l.mean = oracle::random_tensor({3}, rng);
    l.var = oracle::random_tensor({3}, rng, 0.5, 2.0);
    Tensor x = oracle::random_tensor({4, 2, 3}, rng);
    const Tensor coeff = oracle::random_tensor({4, 2, 3}, rng);
    const BatchNormGrads grads = batchnorm_backward(l, x, coeff);
    const auto loss = [&] { return oracle::project(batchnorm_forward(l, x), coeff); };
    REQUIRE(oracle::fd_check(l.scale, grads.scale, loss).pass());
    REQUIRE(oracle::fd_check(l.shift, grads.shift, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }

  SECTION("prelu") {
    PReLULayer l = PReLULayer::make(3);
    l.alpha = oracle::random_tensor({3}, rng, -0.5, 0.5);
    // keep values away from the kink at zero so the derivative exists
    Tensor x = oracle::random_tensor({5, 2, 3}, rng);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::abs(x.raw()[i]) < 0.05) x.raw()[i] = 0.1;
    const Tensor coeff = oracle::random_tensor({5, 2, 3}, rng);
    const PReLUGrads grads = prelu_backward(l, x, coeff);
    const auto loss = [&] { return oracle::project(prelu_forward(l, x), coeff); };
    REQUIRE(oracle::fd_check(l.alpha, grads.alpha, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }

  SECTION("dense") {
    DenseLayer l;
    l.in_dim = 4;
    l.out_dim = 3;
    l.weight = oracle::random_tensor({4, 3}, rng);
    l.bias = oracle::random_tensor({3}, rng);
    Tensor x = oracle::random_tensor({5, 4}, rng);
    const Tensor coeff = oracle::random_tensor({5, 3}, rng);
    const DenseGrads grads = dense_backward(l, x, coeff);
    const auto loss = [&] { return oracle::project(dense_forward(l, x), coeff); };
    REQUIRE(oracle::fd_check(l.weight, grads.weight, loss).pass());
    REQUIRE(oracle::fd_check(l.bias, grads.bias, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }

  SECTION("maxpool input gradient") {
    MaxPoolLayer pool{2, 2};
    // distinct values keep the argmax stable under the probe step
    Tensor x({4, 6, 2});
    for (std::size_t i = 0; i < x.size(); ++i)
      x.raw()[i] = static_cast<double>((i * 7919) % 97) / 10.0;
    const Tensor coeff = oracle::random_tensor({2, 3, 2}, rng);
    const Tensor gin = maxpool_backward(pool, x, coeff);
    const auto loss = [&] { return oracle::project(maxpool_forward(pool, x), coeff); };
    REQUIRE(oracle::fd_check(x, gin, loss).pass());
  }
}

TEST_CASE("gru forward equals a step-by-step recurrence") {
  Rng rng(108);
  GRULayer l = GRULayer::make(3, 2, false);
  l.init(rng);
  l.bz = oracle::random_tensor({2}, rng);
  l.br = oracle::random_tensor({2}, rng);
  l.bh = oracle::random_tensor({2}, rng);
  const Tensor x = oracle::random_tensor({4, 3}, rng);
  const Tensor out = gru_forward(l, x);

  std::vector<double> h(2, 0.0);
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> z(2), r(2), hc(2);
    for (std::size_t u = 0; u < 2; ++u) {
      double az = l.bz.raw()[u], ar = l.br.raw()[u];
      for (std::size_t d = 0; d < 3; ++d) {
        az += x.at(t, d) * l.wz.at(d, u);
        ar += x.at(t, d) * l.wr.at(d, u);
      }
      for (std::size_t v = 0; v < 2; ++v) {
        az += l.uz.at(v, u) * h[v];
        ar += l.ur.at(v, u) * h[v];
      }
      z[u] = 1.0 / (1.0 + std::exp(-az));
      r[u] = 1.0 / (1.0 + std::exp(-ar));
    }
    for (std::size_t u = 0; u < 2; ++u) {
      double ah = l.bh.raw()[u];
      for (std::size_t d = 0; d < 3; ++d) ah += x.at(t, d) * l.wh.at(d, u);
      for (std::size_t v = 0; v < 2; ++v) ah += l.uh.at(v, u) * (r[v] * h[v]);
      hc[u] = std::tanh(ah);
    }
    for (std::size_t u = 0; u < 2; ++u) {
      h[u] = (1.0 - z[u]) * h[u] + z[u] * hc[u];
      REQUIRE(out.at(t, u) == Approx(h[u]).epsilon(1e-12));
    }
  }
}

TEST_CASE("reverse gru equals forward gru on the reversed sequence") {
  Rng rng(109);
  GRULayer fwd = GRULayer::make(3, 4, false);
  fwd.init(rng);
  GRULayer rev = fwd;
  rev.reverse = true;

  const Tensor x = oracle::random_tensor({6, 3}, rng);
  const Tensor out_rev = gru_forward(rev, x);
  const Tensor out_fwd = gru_forward(fwd, reverse_rows(x));
  REQUIRE(max_abs_diff(out_rev, reverse_rows(out_fwd)) == 0.0);
}

TEST_CASE("gru handles an empty sequence") {
  Rng rng(110);
  GRULayer l = GRULayer::make(2, 3, false);
  l.init(rng);
  const Tensor out = gru_forward(l, Tensor({0, 2}));
  REQUIRE(out.dim(0) == 0);
  GRUCache cache;
  gru_forward(l, Tensor({0, 2}), &cache);
  const GRUGrads g = gru_backward(l, Tensor({0, 2}), cache, Tensor({0, 3}));
  REQUIRE(g.wz.size() == 6);
}

TEST_CASE("gru and bgru backward pass finite differences") {
  Rng rng(111);

  SECTION("single direction") {
    for (bool reverse : {false, true}) {
      GRULayer l = GRULayer::make(3, 2, reverse);
      l.init(rng);
      l.bz = oracle::random_tensor({2}, rng);
      l.bh = oracle::random_tensor({2}, rng);
      Tensor x = oracle::random_tensor({4, 3}, rng);
      const Tensor coeff = oracle::random_tensor({4, 2}, rng);
      GRUCache cache;
      gru_forward(l, x, &cache);
      const GRUGrads grads = gru_backward(l, x, cache, coeff);
      const auto loss = [&] { return oracle::project(gru_forward(l, x), coeff); };
      REQUIRE(oracle::fd_check(l.wz, grads.wz, loss).pass());
      REQUIRE(oracle::fd_check(l.wr, grads.wr, loss).pass());
      REQUIRE(oracle::fd_check(l.wh, grads.wh, loss).pass());
      REQUIRE(oracle::fd_check(l.uz, grads.uz, loss).pass());
      REQUIRE(oracle::fd_check(l.ur, grads.ur, loss).pass());
      REQUIRE(oracle::fd_check(l.uh, grads.uh, loss).pass());
      REQUIRE(oracle::fd_check(l.bz, grads.bz, loss).pass());
      REQUIRE(oracle::fd_check(l.br, grads.br, loss).pass());
      REQUIRE(oracle::fd_check(l.bh, grads.bh, loss).pass());
      REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
    }
  }

  SECTION("bidirectional wrapper") {
    BGRULayer l = BGRULayer::make(3, 2);
    l.init(rng);
    Tensor x = oracle::random_tensor({5, 3}, rng);
    const Tensor coeff = oracle::random_tensor({5, 4}, rng);
    BGRUCache cache;
    const Tensor out = bgru_forward(l, x, &cache);

    // output layout: forward features first, then backward
    const Tensor hf = gru_forward(l.fwd, x);
    const Tensor hb = gru_forward(l.bwd, x);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t u = 0; u < 2; ++u) {
        REQUIRE(out.at(t, u) == hf.at(t, u));
        REQUIRE(out.at(t, 2 + u) == hb.at(t, u));
      }

    const BGRUGrads grads = bgru_backward(l, x, cache, coeff);
    const auto loss = [&] { return oracle::project(bgru_forward(l, x), coeff); };
    REQUIRE(oracle::fd_check(l.fwd.wz, grads.fwd.wz, loss).pass());
    REQUIRE(oracle::fd_check(l.bwd.uh, grads.bwd.uh, loss).pass());
    REQUIRE(oracle::fd_check(x, grads.input, loss).pass());
  }
}

TEST_CASE("weight initializers") {
  Rng rng(112);

  SECTION("orthogonal columns for tall shapes") {
    const Tensor q = orthogonal_init(6, 4, rng);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < 6; ++i) dot += q.at(i, a) * q.at(i, b);
        REQUIRE(dot == Approx(a == b ? 1.0 : 0.0).margin(1e-10));
      }
  }

  SECTION("orthogonal rows for wide shapes") {
    const Tensor q = orthogonal_init(3, 5, rng);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < 5; ++i) dot += q.at(a, i) * q.at(b, i);
        REQUIRE(dot == Approx(a == b ? 1.0 : 0.0).margin(1e-10));
      }
  }

  SECTION("glorot uniform stays inside its limit") {
    const Tensor t = glorot_uniform({40, 30}, 40, 30, rng);
    const double limit = std::sqrt(6.0 / 70.0);
    double hi = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      REQUIRE(std::abs(t.raw()[i]) <= limit);
      hi = std::max(hi, std::abs(t.raw()[i]));
    }
    REQUIRE(hi > 0.5 * limit);  // actually spreads out
  }
}

TEST_CASE("model geometry of the pinned configurations") {
  const ModelConfig ref = ModelConfig::reference();
  REQUIRE(ref.time_steps() == 128);
  REQUIRE(ref.feature_dim() == 128);
  std::size_t h = 0, w = 0;
  ref.conv_output_dims(h, w);
  REQUIRE(h == 2);
  REQUIRE(w == 128);
  REQUIRE(ref.layout() == "C--C--C--C--C--C");

  const ModelConfig micro = ModelConfig::micro();
  REQUIRE(micro.time_steps() == 48);
  REQUIRE(micro.feature_dim() == 64);
  micro.validate();
}

TEST_CASE("layout strings parse in both spellings") {
  ModelConfig cfg = ModelConfig::reference();
  cfg.apply_layout("C--C--C--D--D--C");
  REQUIRE(cfg.layout() == "C--C--C--D--D--C");
  cfg.apply_layout("DDDDDD");
  REQUIRE(cfg.blocks[0].kind == 'D');
  REQUIRE(cfg.layout() == "D--D--D--D--D--D");
  REQUIRE_THROWS_AS(cfg.apply_layout("CCC"), ValidationError);
  REQUIRE_THROWS_AS(cfg.apply_layout("CCXDDC"), ValidationError);
}

TEST_CASE("parameter count anchors for the full-size architecture") {
  const ModelConfig ref = ModelConfig::reference();
  const CostReport all_c = model_cost(ref);

  // convolutional stack subtotal and grand total
  std::uint64_t cnn = 0;
  for (const LayerCost& row : all_c.rows)
    if (row.name.rfind("block", 0) == 0 || row.name == "pool") cnn += row.params;
  REQUIRE(cnn == 237200);
  REQUIRE(all_c.total_params == 821234);

  // per-block savings of swapping one standard conv for a dwsep conv
  const std::uint64_t deltas[6] = {118, 3936, 8672, 14960, 18384, 28112};
  std::size_t h = ref.input_h, w = ref.input_w, ch = 1;
  for (std::size_t i = 0; i < 6; ++i) {
    const ConvGeometry g = ref.block_geometry(i, h, w, ch);
    REQUIRE(conv_param_count(g) - dwsep_param_count(g) == deltas[i]);
    h = g.out_h();
    w = g.out_w();
    ch = g.out_ch;
  }
}

TEST_CASE("layout variants: computed totals, orderings, and reference gap") {
  const std::uint64_t expected_totals[6] = {787890, 747052, 759778,
                                            774226, 751106, 747170};
  const auto& variants = layout_variants();
  REQUIRE(variants.size() == 6);

  std::uint64_t min_computed = UINT64_MAX, min_reference = UINT64_MAX;
  std::string min_computed_layout, min_reference_layout;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    ModelConfig cfg = ModelConfig::reference();
    cfg.apply_layout(variants[i].layout);
    const CostReport report = model_cost(cfg);
    REQUIRE(report.total_params == expected_totals[i]);
    REQUIRE(report.total_params < model_cost(ModelConfig::reference()).total_params);
    if (report.total_params < min_computed) {
      min_computed = report.total_params;
      min_computed_layout = variants[i].layout;
    }
    if (variants[i].reference_total < min_reference) {
      min_reference = variants[i].reference_total;
      min_reference_layout = variants[i].layout;
    }
  }

  // the all-dwsep layout is the cheapest under both counting conventions
  REQUIRE(min_computed_layout == "D--D--D--D--D--D");
  REQUIRE(min_reference_layout == "D--D--D--D--D--D");

  // shipped layout against the all-standard baseline, reference convention
  REQUIRE(static_cast<std::int64_t>(variants[0].reference_total) -
              static_cast<std::int64_t>(kBaselineReferenceTotal) ==
          -1992);
}

TEST_CASE("rows outside the conv stack are layout-invariant") {
  std::vector<std::pair<std::string, std::uint64_t>> base;
  for (std::size_t i = 0; i < layout_variants().size(); ++i) {
    ModelConfig cfg = ModelConfig::reference();
    cfg.apply_layout(layout_variants()[i].layout);
    std::vector<std::pair<std::string, std::uint64_t>> rows;
    for (const LayerCost& row : model_cost(cfg).rows)
      if (row.name.find("gate") != std::string::npos ||
          row.name.find("rnn") != std::string::npos ||
          row.name.find("dense") != std::string::npos ||
          row.name.find("prelu") != std::string::npos ||
          row.name.find(".bn") != std::string::npos)
        rows.emplace_back(row.name, row.params);
    if (i == 0) {
      base = rows;
      REQUIRE_FALSE(base.empty());
    } else {
      REQUIRE(rows == base);
    }
  }
}

TEST_CASE("collected parameters match the cost model on every variant") {
  for (const LayoutVariant& v : layout_variants()) {
    ModelConfig cfg = ModelConfig::reference();
    cfg.apply_layout(v.layout);
    Model m = build_model(cfg, 1);
    std::uint64_t total = 0;
    for (const ParamRef& p : collect_params(m))
      if (p.trainable) total += p.tensor->size();
    REQUIRE(total == model_cost(cfg).total_params);
  }
}

TEST_CASE("every variant builds and runs forward at reduced input size") {
  for (const LayoutVariant& v : layout_variants()) {
    ModelConfig cfg = ModelConfig::reference();
    cfg.input_h = 64;
    cfg.input_w = 256;
    cfg.apply_layout(v.layout);
    cfg.validate();
    Model m = build_model(cfg, 2);
    Tensor img({64, 256, 1});
    img.fill(1.0);
    const Tensor probs = model_forward(m, img);
    REQUIRE(probs.dim(0) == cfg.time_steps());
    REQUIRE(probs.dim(1) == 98);
    for (std::size_t t = 0; t < probs.dim(0); ++t) {
      double sum = 0.0;
      for (std::size_t k = 0; k < probs.dim(1); ++k) sum += probs.at(t, k);
      REQUIRE(sum == Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("build_model is seed-deterministic") {
  const ModelConfig cfg = ModelConfig::micro();
  Model a = build_model(cfg, 77), b = build_model(cfg, 77), c = build_model(cfg, 78);
  const auto pa = collect_params(a), pb = collect_params(b), pc = collect_params(c);
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].name == pb[i].name);
    REQUIRE(max_abs_diff(*pa[i].tensor, *pb[i].tensor) == 0.0);
    if (max_abs_diff(*pa[i].tensor, *pc[i].tensor) != 0.0) any_diff = true;
  }
  REQUIRE(any_diff);
}

TEST_CASE("collapse keeps time on the width axis") {
  Tensor x({2, 3, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x.raw()[i] = static_cast<double>(i);
  const Tensor seq = detail::collapse_maps(x);
  REQUIRE(seq.shape() == std::vector<std::size_t>{3, 4});
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t w = 0; w < 3; ++w)
      for (std::size_t c = 0; c < 2; ++c) REQUIRE(seq.at(w, h * 2 + c) == x.at(h, w, c));

  const Tensor back = detail::collapse_maps_backward(seq, 2, 3, 2);
  REQUIRE(max_abs_diff(back, x) == 0.0);
}

TEST_CASE("model forward emits a probability sequence") {
  const ModelConfig cfg = ModelConfig::micro();
  Model m = build_model(cfg, 5);
  Tensor img({32, 192, 1});
  img.fill(1.0);
  for (std::size_t y = 10; y < 20; ++y)
    for (std::size_t x = 40; x < 120; ++x) img.at(y, x, 0) = 0.0;

  const Tensor probs = model_forward(m, img);
  REQUIRE(probs.shape() == std::vector<std::size_t>{48, 6});
  for (std::size_t t = 0; t < 48; ++t) {
    double sum = 0.0;
    for (std::size_t k = 0; k < 6; ++k) sum += probs.at(t, k);
    REQUIRE(sum == Approx(1.0).epsilon(1e-9));
  }

  Tensor bad({16, 192, 1});
  REQUIRE_THROWS_AS(model_forward(m, bad), ValidationError);
}

TEST_CASE("model backward agrees with finite differences end to end") {
  const ModelConfig cfg = tiny_config();
  Model m = build_model(cfg, 3);
  Rng rng(113);
  // nudge every trainable tensor off its init so gradients are generic
  for (ParamRef& p : collect_params(m)) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.tensor->size(); ++i)
      p.tensor->raw()[i] += rng.range(-0.05, 0.05);
  }

  Tensor img = oracle::random_tensor({8, 16, 1}, rng, 0.0, 1.0);
  const std::vector<std::size_t> label = {0, 2};

  Rng fwd_rng(1);
  ForwardCache cache;
  const Tensor probs = model_forward_train(m, img, fwd_rng, cache);
  REQUIRE(probs.dim(0) == 4);
  const CtcLoss base = ctc_loss(probs, label);
  REQUIRE(base.feasible);
  const GradMap grads = model_backward(m, cache, base.grad);

  const auto loss = [&] { return ctc_loss(model_forward(m, img), label).value; };
  // inference and training forward agree when no dropout is configured
  REQUIRE(loss() == Approx(base.value).epsilon(1e-12));

  for (ParamRef& p : collect_params(m)) {
    if (!p.trainable) continue;
    REQUIRE(grads.count(p.name) == 1);
    const std::size_t stride = std::max<std::size_t>(1, p.tensor->size() / 12);
    oracle::FdReport rep =
        oracle::fd_check(*p.tensor, grads.at(p.name), loss, 1e-5, stride);
    INFO("tensor " << p.name << " worst index " << rep.worst_index << " analytic "
                   << rep.analytic << " numeric " << rep.numeric);
    REQUIRE(rep.pass());
  }
}

TEST_CASE("training-mode dropout is reproducible and actually drops") {
  ModelConfig cfg = ModelConfig::micro();
  cfg.rnn_dropout = 0.5;
  Model m = build_model(cfg, 9);
  Tensor img({32, 192, 1});
  img.fill(0.5);

  ForwardCache c1, c2, c3;
  Rng r1(42), r2(42), r3(43);
  const Tensor p1 = model_forward_train(m, img, r1, c1);
  const Tensor p2 = model_forward_train(m, img, r2, c2);
  const Tensor p3 = model_forward_train(m, img, r3, c3);
  REQUIRE(max_abs_diff(p1, p2) == 0.0);
  REQUIRE(max_abs_diff(p1, p3) > 0.0);

  // with dropout disabled at inference, outputs differ from training mode
  const Tensor pi = model_forward(m, img);
  REQUIRE(max_abs_diff(p1, pi) > 0.0);
  // the rnn input mask was recorded
  REQUIRE(c1.rnn_drop_mask.at(0).size() > 0);
}

TEST_CASE("config text round trip") {
  ModelConfig cfg = ModelConfig::reference(42);
  cfg.apply_layout("CDCDCD");
  cfg.rnn_dropout = 0.25;
  const std::string text = serialize_config(cfg);
  const ModelConfig back = parse_config(text);
  REQUIRE(serialize_config(back) == text);
  REQUIRE(back.charset_size == 42);
  REQUIRE(back.layout() == "C--D--C--D--C--D");
  REQUIRE(back.rnn_dropout == 0.25);
  REQUIRE(back.blocks[2].sh == 4);

  // comments and blank lines are tolerated
  const ModelConfig commented = parse_config("# header\n\n" + text);
  REQUIRE(serialize_config(commented) == text);

  REQUIRE_THROWS_AS(parse_config(""), ValidationError);
  REQUIRE_THROWS_AS(parse_config("input not_a_number 12\n"), ValidationError);
  REQUIRE_THROWS_AS(parse_config("bogus_key 5\n"), ValidationError);
}

TEST_CASE("checkpoints round trip bit for bit") {
  TempDir dir("ckpt");
  const ModelConfig cfg = ModelConfig::micro();
  Model m = build_model(cfg, 21);
  Rng rng(114);
  for (ParamRef& p : collect_params(m))
    for (std::size_t i = 0; i < p.tensor->size(); ++i)
      p.tensor->raw()[i] = rng.range(-2.0, 2.0);

  const std::string path = dir.file("model.ckpt");
  save_checkpoint(path, m);
  Model back = load_checkpoint(path);

  REQUIRE(serialize_config(back.cfg) == serialize_config(m.cfg));
  auto pa = collect_params(m), pb = collect_params(back);
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].name == pb[i].name);
    REQUIRE(pa[i].tensor->raw() == pb[i].tensor->raw());
  }
}

TEST_CASE("corrupted checkpoints are rejected") {
  TempDir dir("ckpt_bad");
  const ModelConfig cfg = ModelConfig::micro();
  Model m = build_model(cfg, 22);
  const std::string path = dir.file("model.ckpt");
  save_checkpoint(path, m);
  const std::string blob = read_text_file(path);

  SECTION("wrong magic") {
    std::string bad = blob;
    bad[0] = 'X';
    write_text_file(dir.file("bad1"), bad);
    REQUIRE_THROWS_AS(load_checkpoint(dir.file("bad1")), ValidationError);
  }
  SECTION("wrong version") {
    std::string bad = blob;
    bad[8] = static_cast<char>(9);
    write_text_file(dir.file("bad2"), bad);
    REQUIRE_THROWS_AS(load_checkpoint(dir.file("bad2")), ValidationError);
  }
  SECTION("truncated") {
    write_text_file(dir.file("bad3"), blob.substr(0, blob.size() / 2));
    REQUIRE_THROWS_AS(load_checkpoint(dir.file("bad3")), ValidationError);
  }
  SECTION("trailing junk") {
    write_text_file(dir.file("bad4"), blob + "extra");
    REQUIRE_THROWS_AS(load_checkpoint(dir.file("bad4")), ValidationError);
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_checkpoint(dir.file("nothere")), RuntimeFailure);
  }
}

TEST_CASE("fixed-seed forward pass matches the recorded reference") {
  const std::string path = std::string(HTR_TEST_DIR) + "/golden/micro_forward.txt";

  const ModelConfig cfg = ModelConfig::micro();
  Model m = build_model(cfg, 20240817);
  Rng draw(derive_seed(31, 7));
  const GrayImage img = render_micro_line("ab cd", draw);
  PreprocConfig pc;
  pc.target_h = cfg.input_h;
  pc.target_w = cfg.input_w;
  const Tensor in = normalize_size(img, pc);
  const Tensor probs = model_forward(m, in);
  REQUIRE(probs.dim(0) >= 5);
  REQUIRE(probs.dim(1) == 6);

  std::ostringstream current;
  current.precision(17);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t k = 0; k < 6; ++k) current << (k ? " " : "") << probs.at(t, k);
    current << "\n";
  }

  if (std::getenv("HTR_UPDATE_GOLDEN")) {
    std::filesystem::create_directories(std::string(HTR_TEST_DIR) + "/golden");
    write_text_file(path, current.str());
  }
  INFO("set HTR_UPDATE_GOLDEN=1 to record " << path);
  REQUIRE(std::filesystem::exists(path));

  const std::string recorded = read_text_file(path);
  const auto want_lines = split_lines(recorded);
  const auto got_lines = split_lines(current.str());
  REQUIRE(want_lines.size() == got_lines.size());
  for (std::size_t i = 0; i < want_lines.size(); ++i) {
    const auto want = split_ws(want_lines[i]), got = split_ws(got_lines[i]);
    REQUIRE(want.size() == got.size());
    for (std::size_t j = 0; j < want.size(); ++j)
      REQUIRE(std::stod(got[j]) == Approx(std::stod(want[j])).margin(1e-12));
  }
}
