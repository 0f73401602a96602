#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "cxgn/nn.hpp"
#include "cxgn/ops.hpp"
#include "cxgn/rng.hpp"
#include "cxgn/tape.hpp"
#include "cxgn/tensor.hpp"

using namespace cxgn;

namespace {

Tensor randn64(const Shape& s, uint64_t seed, uint64_t stream = 0) {
  SeededRng rng(seed, stream);
  return Tensor::randn(s, rng, DType::F64);
}

// independent central-difference oracle over all coordinates of `leaf`
double fd_max_rel(const std::function<Tensor()>& fn, Tensor leaf, const Tensor& auto_grad,
                  double h = 1e-4) {
  NoGradScope ng;
  double worst = 0.0;
  for (int64_t i = 0; i < leaf.numel(); ++i) {
    double orig = leaf.at(i);
    leaf.set(i, orig + h);
    double fp = fn().item();
    leaf.set(i, orig - h);
    double fm = fn().item();
    leaf.set(i, orig);
    double fd = (fp - fm) / (2 * h);
    double ga = auto_grad.at(i);
    worst = std::max(worst, std::abs(ga - fd) / std::max(1e-12, std::abs(ga) + std::abs(fd)));
  }
  return worst;
}

// runs fn under a fresh tape, returns grad of `leaf`
Tensor auto_grad_of(const std::function<Tensor()>& fn, const Tensor& leaf) {
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = fn();
  tape.backward(loss);
  REQUIRE(leaf.has_grad());
  return Tensor(leaf.impl()->grad).clone();
}

}  // namespace

TEST_CASE("broadcast shape rule") {
  CHECK(broadcast_shape({3, 1, 5}, {4, 5}) == Shape{3, 4, 5});
  CHECK(broadcast_shape({1}, {7}) == Shape{7});
  CHECK(broadcast_shape({2, 3}, {2, 3}) == Shape{2, 3});
  CHECK_THROWS_AS(broadcast_shape({2, 3}, {4, 3}), Error);
  CHECK_THROWS_AS((void)add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), Error);
}

TEST_CASE("broadcasting matches the trailing rule on shape pairs up to rank 4") {
  // exhaustive over extents {1,2,3} per axis, ranks 1..4 vs 1..2 (cost-bounded)
  std::vector<Shape> shapes;
  for (int64_t a : {1, 2, 3}) {
    shapes.push_back({a});
    for (int64_t b : {1, 2, 3}) {
      shapes.push_back({a, b});
      for (int64_t c : {1, 2}) {
        shapes.push_back({a, b, c});
        shapes.push_back({a, b, c, 2});
      }
    }
  }
  SeededRng rng(11, 0);
  int checked = 0;
  for (const auto& sa : shapes) {
    for (const auto& sb : shapes) {
      bool compatible = true;
      size_t r = std::max(sa.size(), sb.size());
      Shape expect(r);
      for (size_t i = 0; i < r; ++i) {
        int64_t da = i < sa.size() ? sa[sa.size() - 1 - i] : 1;
        int64_t db = i < sb.size() ? sb[sb.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) compatible = false;
        expect[r - 1 - i] = std::max(da, db);
      }
      if (!compatible) {
        CHECK_THROWS_AS(broadcast_shape(sa, sb), Error);
        continue;
      }
      Tensor a = Tensor::randn(sa, rng, DType::F64);
      Tensor b = Tensor::randn(sb, rng, DType::F64);
      Tensor c = add(a, b);
      REQUIRE(c.shape() == expect);
      // spot-check element correspondence against direct indexing
      auto strides_for = [&](const Shape& s) {
        std::vector<int64_t> st(r, 0);
        auto raw = row_major_strides(s);
        size_t off = r - s.size();
        for (size_t d = 0; d < s.size(); ++d) st[off + d] = s[d] == 1 ? 0 : raw[d];
        return st;
      };
      auto stra = strides_for(sa), strb = strides_for(sb);
      auto ostr = row_major_strides(expect);
      for (int64_t flat = 0; flat < c.numel(); ++flat) {
        int64_t rem = flat, ao = 0, bo = 0;
        for (size_t d = 0; d < r; ++d) {
          int64_t id = rem / ostr[d];
          rem %= ostr[d];
          ao += id * stra[d];
          bo += id * strb[d];
        }
        REQUIRE(c.at(flat) == doctest::Approx(a.at(ao) + b.at(bo)).epsilon(1e-12));
      }
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::zeros({3}, DType::F64);
  Tensor y = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("matmul identity") {
  Tensor eye = Tensor::zeros({3, 3}, DType::F64);
  for (int i = 0; i < 3; ++i) eye.set(i * 3 + i, 1.0);
  Tensor a = randn64({3, 3}, 5);
  Tensor y = matmul(eye, a);
  for (int64_t i = 0; i < 9; ++i) CHECK(y.at(i) == doctest::Approx(a.at(i)).epsilon(1e-15));
}

TEST_CASE("layer_norm of a constant vector with unit scale and zero shift is zero") {
  Tensor x = Tensor::full({1, 8}, 3.7, DType::F64);
  Tensor gamma = Tensor::full({8}, 1.0, DType::F64);
  Tensor beta = Tensor::zeros({8}, DType::F64);
  Tensor y = layer_norm(x, gamma, beta);
  for (int64_t i = 0; i < 8; ++i) CHECK(y.at(i) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("backward: x^2 at x=3 gives 6") {
  Tensor x = Tensor::scalar(3.0, DType::F64).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = mul(x, x);
  tape.backward(loss);
  CHECK(Tensor(x.impl()->grad).item() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: loss = sum(A.B) grad matches finite differences") {
  Tensor a = randn64({4, 3}, 7).set_requires_grad(true);
  Tensor b = randn64({3, 5}, 8);
  auto fn = [&]() { return sum_all(matmul(a, b)); };
  Tensor ga = auto_grad_of(fn, a);
  CHECK(fd_max_rel(fn, a, ga) < 1e-6);
}

TEST_CASE("backward: loss independent of p leaves zero grad") {
  Tensor p = randn64({3}, 9).set_requires_grad(true);
  Tensor x = randn64({3}, 10).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum_all(mul(x, x));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(p.has_grad());
  CHECK(Tensor(p.grad()).at(0) == 0.0);  // zero-initialized view
}

TEST_CASE("backward errors: non-scalar loss and off-tape loss") {
  Tensor x = randn64({3}, 1).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), Error);
  Tensor off = Tensor::scalar(1.0, DType::F64);
  CHECK_THROWS_AS(tape.backward(off), Error);
}

TEST_CASE("tape replay determinism: two backward passes bitwise identical") {
  Tensor x = randn64({6, 6}, 21).set_requires_grad(true);
  Tensor w = randn64({6, 6}, 22).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = mean_all(gelu(matmul(x, w)));
  tape.backward(loss);
  Tensor g1 = Tensor(x.impl()->grad).clone();
  tape.backward(loss);
  Tensor g2 = Tensor(x.impl()->grad).clone();
  CHECK(g1.content_hash() == g2.content_hash());
}

TEST_CASE("per-primitive gradients match central finite differences (1e-6 relative)") {
  SeededRng seeds(123, 0);
  auto check_unary = [&](const char* name, std::function<Tensor(const Tensor&)> op,
                         double lo = -2.0, double hi = 2.0) {
    CAPTURE(name);
    SeededRng r = seeds.derive(name);
    Tensor x = Tensor::zeros({2, 7}, DType::F64);
    for (int64_t i = 0; i < x.numel(); ++i) x.set(i, r.uniform(lo, hi));
    x.set_requires_grad(true);
    Tensor m = Tensor::randn({2, 7}, r, DType::F64);  // random linear functional
    auto fn = [&]() { return sum_all(mul(op(x), m.detach())); };
    Tensor ga = auto_grad_of(fn, x);
    CHECK(fd_max_rel(fn, x, ga, 1e-5) < 1e-6);
  };

  check_unary("gelu", [](const Tensor& x) { return gelu(x); });
  check_unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  check_unary("exp", [](const Tensor& x) { return exp(x); });
  check_unary("log", [](const Tensor& x) { return log(x); }, 0.3, 3.0);
  check_unary("softplus", [](const Tensor& x) { return softplus(x); });
  check_unary("softmax", [](const Tensor& x) { return softmax(x); });
  check_unary("clamp", [](const Tensor& x) { return clamp(x, -1.0, 1.0); }, -0.9, 0.9);
  check_unary("mul_scalar", [](const Tensor& x) { return mul_scalar(x, -2.5); });
  check_unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 1.25); });
  check_unary("reshape", [](const Tensor& x) { return reshape(x, {7, 2}); });
  check_unary("transpose", [](const Tensor& x) { return transpose(x, {1, 0}); });
  check_unary("slice", [](const Tensor& x) { return slice(x, {{0, 2}, {2, 6}}); });
  check_unary("sum_axis", [](const Tensor& x) { return sum(x, {1}); });
  check_unary("mean_axis", [](const Tensor& x) { return mean(x, {0}, true); });

  // binary ops with broadcasting
  {
    SeededRng r = seeds.derive("binary");
    Tensor a = Tensor::randn({3, 1, 4}, r, DType::F64).set_requires_grad(true);
    Tensor b = Tensor::randn({2, 4}, r, DType::F64).set_requires_grad(true);
    for (auto op : {0, 1, 2}) {
      auto fn = [&]() {
        Tensor y = op == 0 ? add(a, b) : op == 1 ? sub(a, b) : mul(a, b);
        return sum_all(mul(y, y));
      };
      Tensor ga = auto_grad_of(fn, a);
      Tensor gb = auto_grad_of(fn, b);
      CHECK(fd_max_rel(fn, a, ga, 1e-5) < 1e-6);
      CHECK(fd_max_rel(fn, b, gb, 1e-5) < 1e-6);
    }
  }
  // concat
  {
    SeededRng r = seeds.derive("concat");
    Tensor a = Tensor::randn({2, 3}, r, DType::F64).set_requires_grad(true);
    Tensor b = Tensor::randn({2, 2}, r, DType::F64).set_requires_grad(true);
    Tensor m = Tensor::randn({2, 5}, r, DType::F64);
    auto fn = [&]() { return sum_all(mul(concat({a, b}, 1), m)); };
    CHECK(fd_max_rel(fn, a, auto_grad_of(fn, a), 1e-5) < 1e-6);
    CHECK(fd_max_rel(fn, b, auto_grad_of(fn, b), 1e-5) < 1e-6);
  }
  // matmul
  {
    SeededRng r = seeds.derive("matmul");
    Tensor a = Tensor::randn({3, 4}, r, DType::F64).set_requires_grad(true);
    Tensor b = Tensor::randn({4, 2}, r, DType::F64).set_requires_grad(true);
    auto fn = [&]() {
      Tensor y = matmul(a, b);
      return sum_all(mul(y, y));
    };
    CHECK(fd_max_rel(fn, a, auto_grad_of(fn, a), 1e-5) < 1e-6);
    CHECK(fd_max_rel(fn, b, auto_grad_of(fn, b), 1e-5) < 1e-6);
  }
  // layer_norm (x, gamma, beta)
  {
    SeededRng r = seeds.derive("layer_norm");
    Tensor x = Tensor::randn({3, 6}, r, DType::F64).set_requires_grad(true);
    Tensor gamma = Tensor::randn({6}, r, DType::F64).set_requires_grad(true);
    Tensor beta = Tensor::randn({6}, r, DType::F64).set_requires_grad(true);
    Tensor m = Tensor::randn({3, 6}, r, DType::F64);
    auto fn = [&]() { return sum_all(mul(layer_norm(x, gamma, beta), m)); };
    CHECK(fd_max_rel(fn, x, auto_grad_of(fn, x), 1e-5) < 1e-6);
    CHECK(fd_max_rel(fn, gamma, auto_grad_of(fn, gamma), 1e-5) < 1e-6);
    CHECK(fd_max_rel(fn, beta, auto_grad_of(fn, beta), 1e-5) < 1e-6);
  }
  // embedding_lookup
  {
    SeededRng r = seeds.derive("embedding");
    Tensor table = Tensor::randn({5, 3}, r, DType::F64).set_requires_grad(true);
    std::vector<int32_t> ids = {0, 2, 2, 4};
    Tensor m = Tensor::randn({4, 3}, r, DType::F64);
    auto fn = [&]() { return sum_all(mul(embedding_lookup(table, ids, {4}), m)); };
    CHECK(fd_max_rel(fn, table, auto_grad_of(fn, table), 1e-5) < 1e-6);
  }
  // scaled_dot_product_attention
  {
    SeededRng r = seeds.derive("sdpa");
    Tensor q = Tensor::randn({2, 2, 3, 4}, r, DType::F64).set_requires_grad(true);
    Tensor k = Tensor::randn({2, 2, 5, 4}, r, DType::F64).set_requires_grad(true);
    Tensor v = Tensor::randn({2, 2, 5, 4}, r, DType::F64).set_requires_grad(true);
    Tensor m = Tensor::randn({2, 2, 3, 4}, r, DType::F64);
    auto fn = [&]() { return sum_all(mul(scaled_dot_product_attention(q, k, v), m)); };
    CHECK(fd_max_rel(fn, q, auto_grad_of(fn, q), 1e-5) < 1e-6);
    CHECK(fd_max_rel(fn, k, auto_grad_of(fn, k), 1e-5) < 1e-6);
    CHECK(fd_max_rel(fn, v, auto_grad_of(fn, v), 1e-5) < 1e-6);
  }
}

TEST_CASE("grad_check utility") {
  SeededRng r(42, 0);
  Tensor p = Tensor::randn({4}, r, DType::F64).set_requires_grad(true);

  SUBCASE("polynomial below 1e-7") {
    auto fn = [&]() { return sum_all(mul(mul(p, p), p)); };
    CHECK(grad_check(fn, {p}, 1e-4) < 1e-7);
  }
  SUBCASE("constant function gives zero error") {
    auto fn = [&]() { return Tensor::scalar(2.0, DType::F64); };
    CHECK(grad_check(fn, {p}, 1e-4) == 0.0);
  }
  SUBCASE("non-deterministic fn is rejected") {
    SeededRng noisy(1, 2);
    auto fn = [&]() { return Tensor::scalar(noisy.uniform(), DType::F64); };
    CHECK_THROWS_AS(grad_check(fn, {p}, 1e-4), Error);
  }
}

TEST_CASE("strict mode flags non-finite inputs") {
  Tensor x = Tensor::full({3}, std::numeric_limits<double>::infinity(), DType::F64);
  Tensor y = Tensor::zeros({3}, DType::F64);
  set_strict_finite(true);
  CHECK_THROWS_AS((void)add(x, y), Error);
  set_strict_finite(false);
  CHECK_NOTHROW((void)add(x, y));
}

TEST_CASE("rng reproducibility and stream independence") {
  SUBCASE("identical seed and stream reproduce identical buffers bitwise") {
    SeededRng a(99, 3), b(99, 3);
    Tensor ta = Tensor::zeros({1000});
    Tensor tb = Tensor::zeros({1000});
    a.fill_normal(ta.f32(), 1000);
    b.fill_normal(tb.f32(), 1000);
    CHECK(ta.content_hash() == tb.content_hash());
  }
  SUBCASE("split streams pass a pairwise cross-correlation smoke test") {
    SeededRng root(7, 0);
    auto streams = root.split(4);
    const int n = 10000;
    std::vector<std::vector<double>> draws(4, std::vector<double>(n));
    for (int s = 0; s < 4; ++s)
      for (int i = 0; i < n; ++i) draws[s][i] = streams[s].normal();
    for (int i = 0; i < 4; ++i) {
      for (int j = i + 1; j < 4; ++j) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (int k = 0; k < n; ++k) {
          sx += draws[i][k];
          sy += draws[j][k];
          sxx += draws[i][k] * draws[i][k];
          syy += draws[j][k] * draws[j][k];
          sxy += draws[i][k] * draws[j][k];
        }
        double num = n * sxy - sx * sy;
        double den = std::sqrt(n * sxx - sx * sx) * std::sqrt(n * syy - sy * sy);
        CHECK(std::abs(num / den) < 0.05);
      }
    }
  }
  SUBCASE("normal moments") {
    SeededRng r(5, 1);
    const int n = 100000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
      double v = r.normal();
      s += v;
      s2 += v * v;
    }
    double mean = s / n;
    double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
  }
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient and zero weight decay leave parameters unchanged") {
    ParamSet ps;
    SeededRng r(3, 0);
    Tensor p = ps.add("p", Tensor::randn({4}, r));
    Tensor before = p.clone();
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    // no grads populated; step is a no-op
    opt.step(ps);
    CHECK(p.content_hash() == before.content_hash());
  }
  SUBCASE("single scalar parameter, constant gradient, one hand-computed step") {
    ParamSet ps;
    Tensor p = ps.add("p", Tensor::scalar(0.5));
    Tensor g = p.grad();
    g.set(0, 1.0);
    AdamWConfig cfg;  // lr 1e-4, wd 0.01, clip 1.0
    AdamW opt(cfg);
    opt.step(ps);
    // m_hat = 1, v_hat = 1: p <- p - lr*(1/(1+eps)) - lr*wd*p
    double expect = 0.5 - 1e-4 * (1.0 / (1.0 + 1e-8)) - 1e-4 * 0.01 * 0.5;
    CHECK(p.item() == doctest::Approx(expect).epsilon(1e-6));
  }
  SUBCASE("global norm clipping scales the effective gradient") {
    ParamSet ps;
    Tensor p = ps.add("p", Tensor::zeros({1}));
    p.grad().set(0, 10.0);  // norm 10, clip 1.0 -> scale 0.1
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    opt.step(ps);
    // effective g = 1.0; same update as unclipped unit gradient
    double expect = 0.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
    CHECK(p.item() == doctest::Approx(expect).epsilon(1e-6));
    CHECK(opt.last_grad_norm() == doctest::Approx(10.0));
  }
  SUBCASE("NaN gradient aborts naming the parameter") {
    ParamSet ps;
    Tensor p = ps.add("layer.w", Tensor::zeros({1}));
    p.grad().set(0, std::numeric_limits<double>::quiet_NaN());
    AdamW opt;
    try {
      opt.step(ps);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
    }
  }
}

#include "cxgn/container.hpp"

TEST_CASE("container round-trip preserves bytes, order and meta") {
  SeededRng r(1, 1);
  Container c;
  c.add("a", Tensor::randn({3, 4}, r));
  c.add("b", Tensor::randn({5}, r, DType::F64));
  c.meta["note"] = "x";
  c.meta["k"] = 3;
  std::string path = "/tmp/cxgn_test_container.cxgn";
  save_container(path, c);
  Container d = load_container(path);
  REQUIRE(d.tensors.size() == 2);
  CHECK(d.tensors[0].first == "a");
  CHECK(d.tensors[1].first == "b");
  CHECK(d.get("a").content_hash() == c.get("a").content_hash());
  CHECK(d.get("b").content_hash() == c.get("b").content_hash());
  CHECK(d.get("b").dtype() == DType::F64);
  CHECK(d.meta["note"] == "x");
  CHECK(d.meta["k"] == 3);
  json h = load_container_header(path);
  CHECK(h["tensors"][0]["dtype"] == "f32");
}
