#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dcaps/capsules.hpp"
#include "dcaps/gradcheck.hpp"

using namespace dcaps;
using T64 = Tensor<double>;

namespace {

CapsuleGrid<double> make_grid(std::size_t b, std::size_t h, std::size_t w,
                              std::size_t n, std::size_t a,
                              std::vector<double> vals) {
  return CapsuleGrid<double>(b, h, w, n, a, T64({b, h, w, n, a}, std::move(vals)));
}

CapsuleGrid<double> random_grid(std::size_t b, std::size_t h, std::size_t w,
                                std::size_t n, std::size_t a, Rng& rng,
                                double scl = 0.5) {
  return CapsuleGrid<double>(b, h, w, n, a,
                             random_tensor<double>({b, h, w, n, a}, rng, scl));
}

}  // namespace

TEST_CASE("squash worked examples") {
  // zero stays zero
  auto z = squash_last(T64({1, 2}, {0.0, 0.0}));
  CHECK(z.data() == std::vector<double>{0.0, 0.0});

  // unit vector keeps direction, magnitude 1/2
  auto u = squash_last(T64({1, 2}, {1.0, 0.0}));
  CHECK(u.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(u.data()[1] == 0.0);

  // (3,0) -> (0.9, 0)
  auto v = squash_last(T64({1, 2}, {3.0, 0.0}));
  CHECK(v.data()[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(v.data()[1] == 0.0);
}

TEST_CASE("squash properties: bounded, monotone, direction-preserving") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor<double>({4}, rng, std::pow(10.0, rng.uniform(-3, 2)));
    auto y = squash_last(x);
    double nx = 0, ny = 0, dot = 0;
    for (int i = 0; i < 4; ++i) {
      nx += x.data()[i] * x.data()[i];
      ny += y.data()[i] * y.data()[i];
      dot += x.data()[i] * y.data()[i];
    }
    nx = std::sqrt(nx);
    ny = std::sqrt(ny);
    CHECK(ny < 1.0);
    CHECK(ny == doctest::Approx(nx * nx / (1 + nx * nx)).epsilon(1e-12));
    if (nx > 0) CHECK(dot > 0);  // parallel, never flipped

    // |squash| strictly increases with |s|
    auto x2 = scale(x, 1.5);
    auto y2 = squash_last(x2);
    double ny2 = 0;
    for (int i = 0; i < 4; ++i) ny2 += y2.data()[i] * y2.data()[i];
    if (nx > 0) CHECK(std::sqrt(ny2) > ny);
  }
}

TEST_CASE("capsule grid construction guards") {
  CHECK_THROWS_AS(make_grid(1, 0, 1, 1, 1, {}), ConfigError);
  CHECK_THROWS_AS(CapsuleGrid<double>(1, 2, 2, 1, 2, T64({1, 2, 2, 2}, std::vector<double>(8, 0.0))),
                  DimensionError);
}

TEST_CASE("form_predictions identity and scaling") {
  ConvCapsuleSpec spec;
  spec.kernel = 1;
  spec.stride = 1;
  spec.in_types = 1;
  spec.out_types = 1;
  spec.in_atoms = 2;
  spec.out_atoms = 2;
  spec.routing_iterations = 1;

  auto grid = make_grid(1, 2, 2, 1, 2, {1, 0, 0, 1, 2, 3, -1, 4});
  // identity transform: predictions equal child activations
  T64 ident({1, 1, 1, 2, 2}, {1, 0, 0, 1});
  auto pred = form_predictions(grid, spec, ident);
  CHECK(pred.shape() == Shape{1, 2, 2, 1, 1, 2});
  CHECK(pred.data() == grid.activations.data());

  // 2x identity doubles the child vector
  T64 twice({1, 1, 1, 2, 2}, {2, 0, 0, 2});
  auto pred2 = form_predictions(make_grid(1, 1, 1, 1, 2, {1, 0}), spec, twice);
  CHECK(pred2.data() == std::vector<double>{2, 0});

  // spec/grid mismatch
  CHECK_THROWS_AS(form_predictions(make_grid(1, 1, 1, 2, 2, {1, 0, 0, 1}), spec, ident),
                  DimensionError);
  CHECK_THROWS_AS(form_predictions(grid, spec, T64({1, 1, 1, 2, 4}, std::vector<double>(8, 0.0))),
                  DimensionError);
}

TEST_CASE("form_predictions 3x3 window enumeration") {
  // all-ones children, identity transform: the center parent of a 3x3 grid
  // sees 9 identical predictions; corner parents see 4 in-bounds + 5 zeros.
  ConvCapsuleSpec spec;
  spec.kernel = 3;
  spec.stride = 1;
  spec.in_types = 1;
  spec.out_types = 1;
  spec.in_atoms = 2;
  spec.out_atoms = 2;

  auto grid = make_grid(1, 3, 3, 1, 2, std::vector<double>(18, 1.0));
  T64 ident({1, 3, 3, 2, 2}, [] {
    std::vector<double> w(3 * 3 * 2 * 2, 0.0);
    for (int pos = 0; pos < 9; ++pos) {
      w[pos * 4 + 0] = 1.0;
      w[pos * 4 + 3] = 1.0;
    }
    return w;
  }());
  auto pred = form_predictions(grid, spec, ident);
  CHECK(pred.shape() == Shape{1, 3, 3, 9, 1, 2});
  // center location (1,1): every window child in bounds
  for (int child = 0; child < 9; ++child) {
    for (int atom = 0; atom < 2; ++atom) {
      CHECK(pred.data()[((1 * 3 + 1) * 9 + child) * 2 + atom] == doctest::Approx(1.0));
    }
  }
  // top-left location: children with kh=0 or kw=0 are padded out
  int nonzero = 0;
  for (int child = 0; child < 9; ++child) {
    if (pred.data()[child * 2] != 0.0) ++nonzero;
  }
  CHECK(nonzero == 4);
}

TEST_CASE("dynamic_route degenerate cases") {
  CHECK_THROWS_AS(dynamic_route(T64::zeros({1, 1, 1, 1, 1, 2}), 0), ConfigError);

  // single child, single parent type: softmax over one type is 1, so the
  // output is squash(u_hat) for any r
  T64 pred({1, 1, 1, 1, 1, 2}, {3.0, 0.0});
  for (std::size_t r : {1, 2, 3, 5}) {
    auto v = dynamic_route(pred, r);
    CHECK(v.data()[0] == doctest::Approx(0.9).epsilon(1e-14));
    CHECK(v.data()[1] == 0.0);
  }

  // two parent types, r = 1: couplings forced uniform by zero logits
  Rng rng(11);
  auto p = random_tensor<double>({1, 2, 2, 3, 2, 4}, rng);
  auto v1 = dynamic_route(p, 1);
  // closed form: v_j = squash(0.5 * sum_i u_hat_j|i)
  auto s = scale(sum(p, {3}), 0.5);
  auto expect = squash_last(s);
  for (std::size_t i = 0; i < v1.size(); ++i) {
    CHECK(v1.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("routing sharpens agreement over iterations") {
  // children agree on parent type 1 and cancel on type 2
  //   u_hat[child, parent] vectors of dim 2
  //   child 0: type0 -> (1,0), type1 -> (0,1)
  //   child 1: type0 -> (1,0), type1 -> (0,-1)
  T64 pred({1, 1, 1, 2, 2, 2}, {1, 0, 0, 1, 1, 0, 0, -1});
  std::vector<T64> trace;
  auto v = dynamic_route(pred, 3, Tensor<double>(), &trace);
  const double n_agree = std::hypot(v.data()[0], v.data()[1]);
  const double n_cancel = std::hypot(v.data()[2], v.data()[3]);
  CHECK(n_agree > n_cancel);
  REQUIRE(trace.size() == 3);
  // final couplings: both children favor the agreeing type
  const auto& c = trace.back().data();  // [1,1,1,2,2,1]
  CHECK(c[0] > 0.5);  // child 0 -> type 0
  CHECK(c[2] > 0.5);  // child 1 -> type 0

  // scalar transcription of the update loop as an independent oracle
  {
    double uh[2][2][2] = {{{1, 0}, {0, 1}}, {{1, 0}, {0, -1}}};
    double b[2][2] = {{0, 0}, {0, 0}};
    double vv[2][2] = {{0, 0}, {0, 0}};
    for (int it = 0; it < 3; ++it) {
      double cc[2][2];
      for (int i = 0; i < 2; ++i) {
        double mx = std::max(b[i][0], b[i][1]);
        double z = std::exp(b[i][0] - mx) + std::exp(b[i][1] - mx);
        for (int j = 0; j < 2; ++j) cc[i][j] = std::exp(b[i][j] - mx) / z;
      }
      for (int j = 0; j < 2; ++j) {
        double s0 = 0, s1 = 0;
        for (int i = 0; i < 2; ++i) {
          s0 += cc[i][j] * uh[i][j][0];
          s1 += cc[i][j] * uh[i][j][1];
        }
        const double n2 = s0 * s0 + s1 * s1;
        const double sc = n2 > 0 ? std::sqrt(n2) / (1 + n2) : 0.0;
        vv[j][0] = sc * s0;
        vv[j][1] = sc * s1;
      }
      if (it < 2) {
        for (int i = 0; i < 2; ++i) {
          for (int j = 0; j < 2; ++j) {
            b[i][j] += uh[i][j][0] * vv[j][0] + uh[i][j][1] * vv[j][1];
          }
        }
      }
    }
    CHECK(v.data()[0] == doctest::Approx(vv[0][0]).epsilon(1e-12));
    CHECK(v.data()[1] == doctest::Approx(vv[0][1]).epsilon(1e-12));
    CHECK(v.data()[2] == doctest::Approx(vv[1][0]).epsilon(1e-12));
    CHECK(v.data()[3] == doctest::Approx(vv[1][1]).epsilon(1e-12));
  }
}

TEST_CASE("coupling normalization at every iteration") {
  Rng rng(23);
  auto pred = random_tensor<double>({2, 3, 2, 12, 4, 6}, rng);
  std::vector<T64> trace;
  dynamic_route(pred, 4, Tensor<double>(), &trace);
  REQUIRE(trace.size() == 4);
  for (const auto& c : trace) {
    // c: [B,H,W,nc,n_out,1]; couplings over n_out sum to 1 per child
    const auto& d = c.data();
    const std::size_t n_out = 4;
    for (std::size_t row = 0; row < d.size() / n_out; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < n_out; ++j) s += d[row * n_out + j];
      CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
  }
}

// Straight-line reimplementation of the full layer with no shared code:
// plain loops, local softmax/squash, explicit zero padding.
namespace {

std::vector<double> straight_line_conv_capsule(
    const std::vector<double>& child,  // [h][w][ti][ai]
    std::size_t h, std::size_t w, std::size_t ti_n, std::size_t ai_n,
    const std::vector<double>& wmat,  // [ti][kh][kw][ai][to*ao]
    const std::vector<double>& bias,  // [to][ao]
    std::size_t k, std::size_t stride, std::size_t to_n, std::size_t ao_n,
    std::size_t r, std::size_t* out_h, std::size_t* out_w) {
  const std::size_t oh = (h + stride - 1) / stride;
  const std::size_t ow = (w + stride - 1) / stride;
  const std::ptrdiff_t pad_h = ((oh - 1) * stride + k > h) ? static_cast<std::ptrdiff_t>(((oh - 1) * stride + k - h) / 2) : 0;
  const std::ptrdiff_t pad_w = ((ow - 1) * stride + k > w) ? static_cast<std::ptrdiff_t>(((ow - 1) * stride + k - w) / 2) : 0;
  *out_h = oh;
  *out_w = ow;
  std::vector<double> out(oh * ow * to_n * ao_n, 0.0);
  const std::size_t nc = k * k * ti_n;
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      // prediction vectors for this location: [child][to][ao]
      std::vector<double> uh(nc * to_n * ao_n, 0.0);
      for (std::size_t kh = 0; kh < k; ++kh) {
        for (std::size_t kw = 0; kw < k; ++kw) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + kh) - pad_h;
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kw) - pad_w;
          for (std::size_t ti = 0; ti < ti_n; ++ti) {
            const std::size_t ci = (kh * k + kw) * ti_n + ti;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                ix >= static_cast<std::ptrdiff_t>(w)) {
              continue;  // padded child: zero predictions
            }
            for (std::size_t to = 0; to < to_n; ++to) {
              for (std::size_t ao = 0; ao < ao_n; ++ao) {
                double acc = 0;
                for (std::size_t ai = 0; ai < ai_n; ++ai) {
                  const double u =
                      child[((static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * ti_n + ti) * ai_n + ai];
                  const double wv =
                      wmat[(((ti * k + kh) * k + kw) * ai_n + ai) * (to_n * ao_n) + to * ao_n + ao];
                  acc += u * wv;
                }
                uh[(ci * to_n + to) * ao_n + ao] = acc;
              }
            }
          }
        }
      }
      // routing
      std::vector<double> b(nc * to_n, 0.0);
      std::vector<double> v(to_n * ao_n, 0.0);
      for (std::size_t it = 0; it < r; ++it) {
        std::vector<double> c(nc * to_n);
        for (std::size_t ci = 0; ci < nc; ++ci) {
          double mx = b[ci * to_n];
          for (std::size_t j = 1; j < to_n; ++j) mx = std::max(mx, b[ci * to_n + j]);
          double z = 0;
          for (std::size_t j = 0; j < to_n; ++j) z += std::exp(b[ci * to_n + j] - mx);
          for (std::size_t j = 0; j < to_n; ++j) {
            c[ci * to_n + j] = std::exp(b[ci * to_n + j] - mx) / z;
          }
        }
        for (std::size_t j = 0; j < to_n; ++j) {
          std::vector<double> s(ao_n, 0.0);
          for (std::size_t ci = 0; ci < nc; ++ci) {
            for (std::size_t ao = 0; ao < ao_n; ++ao) {
              s[ao] += c[ci * to_n + j] * uh[(ci * to_n + j) * ao_n + ao];
            }
          }
          for (std::size_t ao = 0; ao < ao_n; ++ao) s[ao] += bias[j * ao_n + ao];
          double n2 = 0;
          for (double sv : s) n2 += sv * sv;
          const double sc = n2 > 0 ? std::sqrt(n2) / (1 + n2) : 0.0;
          for (std::size_t ao = 0; ao < ao_n; ++ao) v[j * ao_n + ao] = sc * s[ao];
        }
        if (it + 1 < r) {
          for (std::size_t ci = 0; ci < nc; ++ci) {
            for (std::size_t j = 0; j < to_n; ++j) {
              double dot = 0;
              for (std::size_t ao = 0; ao < ao_n; ++ao) {
                dot += uh[(ci * to_n + j) * ao_n + ao] * v[j * ao_n + ao];
              }
              b[ci * to_n + j] += dot;
            }
          }
        }
        for (std::size_t j = 0; j < to_n * ao_n; ++j) {
          out[((oy * ow + ox) * to_n * ao_n) + j] = v[j];
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("conv_capsule_forward matches the straight-line oracle") {
  Rng rng(31);
  const std::size_t h = 3, w = 3, ti = 2, ai = 4, to = 2, ao = 3, k = 3;
  for (std::size_t r : {1, 3}) {
    for (std::size_t stride : {1, 2}) {
      auto grid = random_grid(1, h, w, ti, ai, rng, 1.0);
      ConvCapsuleSpec spec;
      spec.kernel = k;
      spec.stride = stride;
      spec.in_types = ti;
      spec.out_types = to;
      spec.in_atoms = ai;
      spec.out_atoms = ao;
      spec.routing_iterations = r;
      auto wt = random_tensor<double>(spec.transform_shape(), rng, 0.5);
      auto bias = random_tensor<double>({to, ao}, rng, 0.2);

      auto got = conv_capsule_forward(grid, spec, wt, bias);
      std::size_t oh = 0, ow = 0;
      auto expect = straight_line_conv_capsule(
          grid.activations.data(), h, w, ti, ai, wt.data(), bias.data(), k,
          stride, to, ao, r, &oh, &ow);
      REQUIRE(got.height == oh);
      REQUIRE(got.width == ow);
      REQUIRE(got.activations.size() == expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::fabs(got.activations.data()[i] - expect[i]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("conv_capsule_forward shapes and identity case") {
  // 1x1 grid, identity transform, r=1, single types: squash of child vector
  ConvCapsuleSpec spec;
  spec.kernel = 1;
  spec.stride = 1;
  spec.in_types = 1;
  spec.out_types = 1;
  spec.in_atoms = 2;
  spec.out_atoms = 2;
  spec.routing_iterations = 1;
  auto grid = make_grid(1, 1, 1, 1, 2, {3.0, 0.0});
  T64 ident({1, 1, 1, 2, 2}, {1, 0, 0, 1});
  auto out = conv_capsule_forward(grid, spec, ident);
  CHECK(out.activations.data()[0] == doctest::Approx(0.9).epsilon(1e-14));

  // stride 2 on a 4x4 grid gives a 2x2 parent grid
  Rng rng(3);
  auto g4 = random_grid(2, 4, 4, 1, 2, rng);
  spec.stride = 2;
  spec.kernel = 3;
  auto wt = random_tensor<double>(spec.transform_shape(), rng, 0.3);
  auto out2 = conv_capsule_forward(g4, spec, wt);
  CHECK(out2.height == 2);
  CHECK(out2.width == 2);
  CHECK(out2.batch == 2);
  CHECK(is_squashed(out2));
}

TEST_CASE("shared transforms give translation equivariance") {
  // content placed in the interior, then shifted by the stride: parent grids
  // shift by one cell (away from borders, where zero padding breaks it)
  Rng rng(17);
  const std::size_t h = 8, w = 8, stride = 2;
  ConvCapsuleSpec spec;
  spec.kernel = 3;
  spec.stride = stride;
  spec.in_types = 2;
  spec.out_types = 2;
  spec.in_atoms = 3;
  spec.out_atoms = 3;
  spec.routing_iterations = 3;
  auto wt = random_tensor<double>(spec.transform_shape(), rng, 0.4);
  auto bias = random_tensor<double>({2, 3}, rng, 0.1);

  // 2x2-cell content block at (2,2) vs (2+stride, 2)
  std::vector<double> base(h * w * 2 * 3, 0.0), shifted(h * w * 2 * 3, 0.0);
  Rng content(99);
  for (std::size_t y = 2; y < 4; ++y) {
    for (std::size_t x = 2; x < 4; ++x) {
      for (std::size_t c = 0; c < 6; ++c) {
        const double v = content.normal();
        base[(y * w + x) * 6 + c] = v;
        shifted[((y + stride) * w + x) * 6 + c] = v;
      }
    }
  }
  auto out_a = conv_capsule_forward(CapsuleGrid<double>(1, h, w, 2, 3, T64({1, h, w, 2, 3}, base)),
                                    spec, wt, bias);
  auto out_b = conv_capsule_forward(CapsuleGrid<double>(1, h, w, 2, 3, T64({1, h, w, 2, 3}, shifted)),
                                    spec, wt, bias);
  // compare parent rows 1..2 of A against rows 2..3 of B (shift of 1 cell)
  const std::size_t row_elems = out_a.width * 2 * 3;
  for (std::size_t row = 1; row <= 2; ++row) {
    for (std::size_t i = 0; i < row_elems; ++i) {
      CHECK(out_a.activations.data()[row * row_elems + i] ==
            doctest::Approx(out_b.activations.data()[(row + 1) * row_elems + i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("capsule_average_pool worked examples") {
  // identical vectors: mean is that vector
  auto g = make_grid(1, 2, 2, 1, 2, {0.2, 0.7, 0.2, 0.7, 0.2, 0.7, 0.2, 0.7});
  auto p = capsule_average_pool(g);
  CHECK(p.shape() == Shape{1, 1, 2});
  CHECK(p.data()[0] == doctest::Approx(0.2));
  CHECK(p.data()[1] == doctest::Approx(0.7));

  // 1x1 grid: identity
  auto g1 = make_grid(1, 1, 1, 2, 2, {1, 2, 3, 4});
  CHECK(capsule_average_pool(g1).data() == std::vector<double>{1, 2, 3, 4});

  // 2x2 grid, one type: (1,0),(0,1),(1,1),(2,3) -> (1.0, 1.25)
  auto g2 = make_grid(1, 2, 2, 1, 2, {1, 0, 0, 1, 1, 1, 2, 3});
  auto p2 = capsule_average_pool(g2);
  CHECK(p2.data()[0] == doctest::Approx(1.0));
  CHECK(p2.data()[1] == doctest::Approx(1.25));
}

TEST_CASE("CAP permutation invariance and linearity") {
  Rng rng(41);
  // dyadic-rational grid values make the mean exactly order-independent
  const std::size_t h = 3, w = 4, n = 2, a = 3;
  std::vector<double> vals(h * w * n * a);
  for (auto& v : vals) v = static_cast<double>(static_cast<int>(rng.uniform_index(512)) - 256) / 64.0;
  auto grid = make_grid(1, h, w, n, a, vals);
  auto pooled = capsule_average_pool(grid);

  // shuffle (h,w) cells
  std::vector<std::size_t> perm(h * w);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<double> shuffled(vals.size());
  for (std::size_t cell = 0; cell < perm.size(); ++cell) {
    for (std::size_t c = 0; c < n * a; ++c) {
      shuffled[cell * n * a + c] = vals[perm[cell] * n * a + c];
    }
  }
  auto pooled2 = capsule_average_pool(make_grid(1, h, w, n, a, shuffled));
  CHECK(pooled.data() == pooled2.data());  // exact

  // linearity to 1e-12 on arbitrary real grids
  auto A = random_grid(1, h, w, n, a, rng, 1.0);
  auto B = random_grid(1, h, w, n, a, rng, 1.0);
  const double alpha = 0.37, beta = -1.91;
  auto combo = capsule_average_pool(CapsuleGrid<double>(
      1, h, w, n, a, add(scale(A.activations, alpha), scale(B.activations, beta))));
  auto pa = capsule_average_pool(A);
  auto pb = capsule_average_pool(B);
  for (std::size_t i = 0; i < combo.size(); ++i) {
    CHECK(std::fabs(combo.data()[i] - (alpha * pa.data()[i] + beta * pb.data()[i])) <= 1e-12);
  }
}

TEST_CASE("magnitudes") {
  CHECK(magnitudes(T64({1, 1, 2}, {0, 0})).data() == std::vector<double>{0});
  auto m = magnitudes(T64({1, 2, 2}, {0.3, 0.4, 0.1, 0.0}));
  CHECK(m.data()[0] == doctest::Approx(0.5));
  CHECK(m.data()[1] == doctest::Approx(0.1));
  // a (0.6, 0.8) capsule has magnitude exactly 1: legal for magnitudes(),
  // but flagged as a violation when claimed to be post-squash output
  auto grid = make_grid(1, 1, 1, 1, 2, {0.6, 0.8});
  CHECK(magnitudes(grid.activations).data()[0] == doctest::Approx(1.0));
  CHECK_FALSE(is_squashed(grid));
}

TEST_CASE("capsule layer gradients match finite differences") {
  Rng rng(57);
  for (std::size_t r : {1, 3}) {
    ConvCapsuleSpec spec;
    spec.kernel = 3;
    spec.stride = 2;
    spec.in_types = 2;
    spec.out_types = 2;
    spec.in_atoms = 3;
    spec.out_atoms = 3;
    spec.routing_iterations = r;
    const std::size_t h = 3, w = 4;
    auto act = random_tensor<double>({1, h, w, 2, 3}, rng);
    auto wt = random_tensor<double>(spec.transform_shape(), rng, 0.4);
    auto bias = random_tensor<double>({2, 3}, rng, 0.2);
    auto weights = random_tensor<double>({1, 2, 2, 2, 3}, rng);

    auto run = [&](const T64& a, const T64& t, const T64& b) {
      CapsuleGrid<double> g(1, h, w, 2, 3, a);
      auto out = conv_capsule_forward(g, spec, t, b);
      return sum(mul(out.activations, weights));
    };
    const double e_act = check_gradient<double>(
        [&](const T64& x) { return run(x, wt, bias); }, act);
    CHECK(e_act < 1e-4);
    const double e_w = check_gradient<double>(
        [&](const T64& x) { return run(act, x, bias); }, wt);
    CHECK(e_w < 1e-4);
    const double e_b = check_gradient<double>(
        [&](const T64& x) { return run(act, wt, x); }, bias);
    CHECK(e_b < 1e-4);
  }
}

TEST_CASE("CAP gradient") {
  Rng rng(71);
  auto act = random_tensor<double>({1, 3, 3, 2, 2}, rng);
  auto wv = random_tensor<double>({1, 2, 2}, rng);
  const double err = check_gradient<double>(
      [&](const T64& x) {
        CapsuleGrid<double> g(1, 3, 3, 2, 2, x);
        return sum(mul(capsule_average_pool(g), wv));
      },
      act);
  CHECK(err < 1e-4);
}
