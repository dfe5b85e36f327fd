#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "g3m/gradcheck.hpp"
#include "g3m/optim.hpp"
#include "g3m/rng.hpp"
#include "g3m/tensor.hpp"

using namespace g3m;
using Var = Tape::Var;

namespace {

// Independent central-difference oracle. Kept separate from g3m::grad_check
// on purpose: it verifies Tape::backward without trusting src/gradcheck.cpp.
double fd_max_rel_err(const std::function<double(bool)>& loss_fn,
                      const std::vector<Parameter*>& params, double eps) {
  for (Parameter* p : params) p->zero_grad();
  loss_fn(true);
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (int j = 0; j < p.value.numel(); ++j) {
      const double orig = p.value.at(j);
      p.value.at(j) = orig + eps;
      const double up = loss_fn(false);
      p.value.at(j) = orig - eps;
      const double down = loss_fn(false);
      p.value.at(j) = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel =
          std::abs(analytic[pi].at(j) - numeric) / std::max(std::abs(numeric), 1e-8);
      worst = std::max(worst, rel);
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return worst;
}

double signed_mag(Rng& rng, double lo, double hi) {
  const double m = rng.uniform(lo, hi);
  return rng.bernoulli(0.5) ? m : -m;
}

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = 0.2, double hi = 1.2) {
  Tensor t(std::move(shape));
  for (int i = 0; i < t.numel(); ++i) t.at(i) = signed_mag(rng, lo, hi);
  return t;
}

// loss = mean(y * c + y^2) with a fixed random c, so dL/dy stays away from 0.
Var probe_loss(Tape& tape, Var y, Rng& rng) {
  Tensor c(tape.value(y).shape());
  for (int i = 0; i < c.numel(); ++i) c.at(i) = signed_mag(rng, 0.5, 1.5);
  Var cv = tape.constant(std::move(c));
  return tape.mean(tape.add(tape.hadamard(y, cv), tape.square(y)));
}

}  // namespace

TEST_CASE("tensor shape and data invariants") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ValidationError);
  CHECK_THROWS_AS(Tensor({0}), ValidationError);
  CHECK_THROWS_AS(Tensor({2, -1}), ValidationError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("forward examples from the primitive contracts") {
  Tape tape;
  SUBCASE("matmul identity") {
    Var i2 = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    Var x = tape.constant(Tensor({2, 1}, {3, 4}));
    const Tensor& y = tape.value(tape.matmul(i2, x));
    CHECK(y.shape() == std::vector<int>{2, 1});
    CHECK(y.at(0) == 3.0);
    CHECK(y.at(1) == 4.0);
  }
  SUBCASE("tanh and softmax symmetry") {
    Var z = tape.constant(Tensor({1}, {0.0}));
    CHECK(tape.value(tape.tanh(z)).at(0) == 0.0);
    Var s = tape.constant(Tensor({2}, {0.0, 0.0}));
    const Tensor& p = tape.value(tape.softmax(s));
    CHECK(p.at(0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.at(1) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("flatten of outer product") {
    Var a = tape.constant(Tensor({2}, {1, 2}));
    Var b = tape.constant(Tensor({3}, {3, 4, 5}));
    const Tensor& f = tape.value(tape.flatten(tape.outer(a, b)));
    const std::vector<double> want{3, 4, 5, 6, 8, 10};
    CHECK(f.vec() == want);
  }
  SUBCASE("max_pool_rows is the column-wise maximum") {
    Var m = tape.constant(Tensor({3, 2}, {1, 9, 5, 2, 3, 4}));
    const Tensor& p = tape.value(tape.max_pool_rows(m));
    CHECK(p.vec() == std::vector<double>{5, 9});
  }
  SUBCASE("shape mismatch errors name the op and both shapes") {
    Var a = tape.constant(Tensor({2, 3}));
    Var b = tape.constant(Tensor({4, 5}));
    try {
      tape.matmul(a, b);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("matmul") != std::string::npos);
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x5]") != std::string::npos);
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("d(x^2)/dx at 3 is 6") {
    Parameter x(Tensor::scalar(3.0), "x");
    Tape tape;
    Var loss = tape.mean(tape.square(tape.leaf(x)));
    tape.backward(loss);
    CHECK(x.grad.at(0) == doctest::Approx(6.0).epsilon(1e-12));
  }
  SUBCASE("loss must be scalar") {
    Tape tape;
    Var v = tape.constant(Tensor({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(v), ValidationError);
  }
  SUBCASE("foreign node id rejected") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(Var{42}), ValidationError);
  }
  SUBCASE("grads accumulate across backward calls") {
    Parameter x(Tensor::scalar(3.0), "x");
    Tape tape;
    Var loss = tape.mean(tape.square(tape.leaf(x)));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad.at(0) == doctest::Approx(12.0).epsilon(1e-12));
  }
  SUBCASE("non-trainable inputs stay untouched") {
    Parameter x(Tensor::scalar(3.0), "x", /*train=*/false);
    Tape tape;
    tape.backward(tape.mean(tape.square(tape.leaf(x))));
    CHECK(x.grad.at(0) == 0.0);
  }
}

TEST_CASE("sum(tanh(W.x)) gradient matches central finite differences") {
  Rng rng(12);
  Parameter w(random_tensor(rng, {3, 4}), "w");
  Parameter x(random_tensor(rng, {4}), "x");
  auto loss_fn = [&](bool grads) {
    Tape tape;
    Var y = tape.tanh(tape.matmul(tape.leaf(w), tape.leaf(x)));
    Var loss = tape.scale(tape.mean(y), 3.0);  // sum of a length-3 vector
    if (grads) tape.backward(loss);
    return tape.value(loss).item();
  };
  CHECK(fd_max_rel_err(loss_fn, {&w, &x}, 1e-5) < 1e-4);
}

TEST_CASE("max_pool_rows routes gradient to the argmax row per column") {
  // 3x2 input; sum of pooled output differentiates to exactly 1.0 at the two
  // argmax cells and 0 elsewhere. Cross-check by perturbation.
  Parameter x(Tensor({3, 2}, {1, 9, 5, 2, 3, 4}), "x");
  auto sum_pooled = [&](bool grads) {
    Tape tape;
    Var loss = tape.scale(tape.mean(tape.max_pool_rows(tape.leaf(x))), 2.0);
    if (grads) tape.backward(loss);
    return tape.value(loss).item();
  };
  x.zero_grad();
  sum_pooled(true);
  const std::vector<double> want{0, 1, 1, 0, 0, 0};  // argmax cells: (1,0)=5 and (0,1)=9
  CHECK(x.grad.vec() == want);
  for (int i = 0; i < 6; ++i) {
    const double orig = x.value.at(i);
    x.value.at(i) = orig + 1e-6;
    const double up = sum_pooled(false);
    x.value.at(i) = orig - 1e-6;
    const double down = sum_pooled(false);
    x.value.at(i) = orig;
    CHECK((up - down) / 2e-6 == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-6));
  }
}

TEST_CASE("every primitive passes finite-difference checks over 100 seeded trials") {
  Rng rng(20250810);
  double worst = 0.0;
  auto run = [&](const std::function<double(bool)>& fn, std::vector<Parameter*> ps) {
    worst = std::max(worst, fd_max_rel_err(fn, ps, 1e-5));
  };

  for (int trial = 0; trial < 100; ++trial) {
    const uint64_t mask_seed = rng.next_u64();
    switch (trial % 14) {
      case 0: {  // matmul 2D x 2D
        Parameter a(random_tensor(rng, {3, 4}), "a");
        Parameter b(random_tensor(rng, {4, 2}), "b");
        run([&](bool g) {
          Tape t;
          Var y = t.matmul(t.leaf(a), t.leaf(b));
          Var l = probe_loss(t, y, rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&a, &b});
        break;
      }
      case 1: {  // matmul with vectors on either side
        Parameter a(random_tensor(rng, {3, 4}), "a");
        Parameter v(random_tensor(rng, {4}), "v");
        Parameter u(random_tensor(rng, {3}), "u");
        run([&](bool g) {
          Tape t;
          Var y1 = t.matmul(t.leaf(a), t.leaf(v));
          Var y2 = t.matmul(t.leaf(u), t.leaf(a));
          Var l = t.add(probe_loss(t, y1, rng), probe_loss(t, y2, rng));
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&a, &v, &u});
        break;
      }
      case 2: {  // add, same shape and row broadcast
        Parameter a(random_tensor(rng, {3, 4}), "a");
        Parameter b(random_tensor(rng, {3, 4}), "b");
        Parameter bias(random_tensor(rng, {4}), "bias");
        run([&](bool g) {
          Tape t;
          Var y = t.add(t.add(t.leaf(a), t.leaf(b)), t.leaf(bias));
          Var l = probe_loss(t, y, rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&a, &b, &bias});
        break;
      }
      case 3: {  // concat on both axes
        Parameter a(random_tensor(rng, {3}), "a");
        Parameter b(random_tensor(rng, {2}), "b");
        Parameter m1(random_tensor(rng, {2, 2}), "m1");
        Parameter m2(random_tensor(rng, {2, 3}), "m2");
        run([&](bool g) {
          Tape t;
          Var v = t.concat({t.leaf(a), t.leaf(b)}, 0);
          Var m = t.concat({t.leaf(m1), t.leaf(m2)}, 1);
          Var l = t.add(probe_loss(t, v, rng), probe_loss(t, m, rng));
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&a, &b, &m1, &m2});
        break;
      }
      case 4: {  // tanh
        Parameter x(random_tensor(rng, {2, 5}), "x");
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.tanh(t.leaf(x)), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&x});
        break;
      }
      case 5: {  // softmax rows
        Parameter x(random_tensor(rng, {3, 4}), "x");
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.softmax(t.leaf(x)), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&x});
        break;
      }
      case 6: {  // log on positive inputs
        Parameter x(random_tensor(rng, {6}), "x");
        for (int i = 0; i < 6; ++i) x.value.at(i) = std::abs(x.value.at(i)) + 0.3;
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.log(t.leaf(x)), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&x});
        break;
      }
      case 7: {  // hadamard and square
        Parameter a(random_tensor(rng, {2, 3}), "a");
        Parameter b(random_tensor(rng, {2, 3}), "b");
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.square(t.hadamard(t.leaf(a), t.leaf(b))), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&a, &b});
        break;
      }
      case 8: {  // outer product then flatten
        Parameter a(random_tensor(rng, {3}), "a");
        Parameter b(random_tensor(rng, {4}), "b");
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.flatten(t.outer(t.leaf(a), t.leaf(b))), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&a, &b});
        break;
      }
      case 9: {  // max pool (inputs spread to keep the argmax stable under eps)
        Parameter x(random_tensor(rng, {4, 3}), "x");
        for (int i = 0; i < x.value.numel(); ++i) x.value.at(i) += 0.01 * i;
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.max_pool_rows(t.leaf(x)), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&x});
        break;
      }
      case 10: {  // embedding gather
        Parameter table(random_tensor(rng, {5, 3}), "table");
        const std::vector<int> ids{0, 2, 2, 4};
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.gather_rows(t.leaf(table), ids), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&table});
        break;
      }
      case 11: {  // dropout with a pinned mask
        Parameter x(random_tensor(rng, {3, 4}), "x");
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.dropout(t.leaf(x), 0.7, mask_seed), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&x});
        break;
      }
      case 12: {  // layer norm with affine
        Parameter x(random_tensor(rng, {3, 5}), "x");
        Parameter gamma(random_tensor(rng, {5}), "gamma");
        Parameter beta(random_tensor(rng, {5}), "beta");
        run([&](bool g) {
          Tape t;
          Var l = probe_loss(t, t.layer_norm(t.leaf(x), t.leaf(gamma), t.leaf(beta)), rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&x, &gamma, &beta});
        break;
      }
      default: {  // scaled dot attention, with and without key mask
        Parameter q(random_tensor(rng, {3, 4}), "q");
        Parameter k(random_tensor(rng, {5, 4}), "k");
        Parameter v(random_tensor(rng, {5, 2}), "v");
        const std::vector<uint8_t> mask{1, 1, 0, 1, 1};
        const bool use_mask = trial % 2 == 0;
        run([&](bool g) {
          Tape t;
          Var y = t.attention(t.leaf(q), t.leaf(k), t.leaf(v),
                              use_mask ? mask : std::vector<uint8_t>{});
          Var l = probe_loss(t, y, rng);
          if (g) t.backward(l);
          return t.value(l).item();
        }, {&q, &k, &v});
        break;
      }
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("softmax rows are a probability simplex") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    Var p = tape.softmax(tape.constant(random_tensor(rng, {4, 6}, 0.0, 3.0)));
    const Tensor& probs = tape.value(p);
    for (int r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (int c = 0; c < 6; ++c) {
        CHECK(probs.at(r, c) >= 0.0);
        sum += probs.at(r, c);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("flatten then reshape is the identity") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = 1 + rng.uniform_int(5), c = 1 + rng.uniform_int(5);
    Tensor m = random_tensor(rng, {r, c});
    Tape tape;
    const Tensor& flat = tape.value(tape.flatten(tape.constant(m)));
    Tensor back({r, c}, flat.vec());
    CHECK(back.vec() == m.vec());
    // element (g, h) of the source lands at index g*cols + h
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) CHECK(flat.at(i * c + j) == m.at(i, j));
  }
}

TEST_CASE("dropout is deterministic per mask seed and rescales kept values") {
  Tensor x = Tensor::full({200}, 1.0);
  Tape t1, t2;
  const Tensor& y1 = t1.value(t1.dropout(t1.constant(x), 0.8, 77));
  const Tensor& y2 = t2.value(t2.dropout(t2.constant(x), 0.8, 77));
  CHECK(y1.vec() == y2.vec());
  int kept = 0;
  for (double v : y1.vec()) {
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.8).epsilon(1e-12)));
    kept += v != 0.0;
  }
  CHECK(kept > 120);
  CHECK(kept < 200);
  Tape t3;
  const Tensor& y3 = t3.value(t3.dropout(t3.constant(x), 0.8, 78));
  CHECK(y1.vec() != y3.vec());
}

TEST_CASE("adam examples") {
  SUBCASE("zero gradient at fresh state leaves the parameter alone") {
    Parameter p(Tensor::scalar(1.0), "p");
    Adam opt({&p}, {.lr = 0.01});
    opt.step();
    CHECK(p.value.at(0) == 1.0);
    CHECK(opt.t() == 1);
  }
  SUBCASE("hand-computed first step: m_hat=0.5, v_hat=0.25, delta=lr") {
    Parameter p(Tensor::scalar(1.0), "p");
    Adam opt({&p}, {.lr = 0.01, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8});
    p.grad.at(0) = 0.5;
    opt.step();
    CHECK(p.value.at(0) == doctest::Approx(0.99).epsilon(1e-7));
    CHECK(p.grad.at(0) == 0.0);  // reset after the step
  }
  SUBCASE("identical state produces bit-identical updates") {
    Parameter a(Tensor({3}, {0.4, -1.0, 2.0}), "a");
    Parameter b(Tensor({3}, {0.4, -1.0, 2.0}), "b");
    Adam oa({&a}, {.lr = 0.05});
    Adam ob({&b}, {.lr = 0.05});
    for (int s = 0; s < 5; ++s) {
      for (int i = 0; i < 3; ++i) {
        a.grad.at(i) = 0.1 * (s + 1) * (i - 1);
        b.grad.at(i) = 0.1 * (s + 1) * (i - 1);
      }
      oa.step();
      ob.step();
    }
    CHECK(a.value.vec() == b.value.vec());
  }
  SUBCASE("lr=0 leaves parameters bit-identical") {
    Parameter p(Tensor({2}, {1.25, -0.5}), "p");
    const std::vector<double> before = p.value.vec();
    Adam opt({&p}, {.lr = 0.0});
    for (int s = 0; s < 3; ++s) {
      p.grad.at(0) = 1.0;
      p.grad.at(1) = -2.0;
      opt.step();
    }
    CHECK(p.value.vec() == before);
  }
  SUBCASE("duplicate registration rejected") {
    Parameter p(Tensor::scalar(1.0), "p");
    CHECK_THROWS_AS(Adam({&p, &p}, {}), ValidationError);
  }
}

TEST_CASE("grad_check harness") {
  SUBCASE("linear model is exact to 1e-6") {
    Rng rng(3);
    Parameter w(random_tensor(rng, {4}), "w");
    const Tensor x = random_tensor(rng, {4});
    const double target = 0.7;
    auto loss_fn = [&](bool grads) {
      Tape t;
      Var pred = t.matmul(t.leaf(w), t.constant(Tensor({4, 1}, x.vec())));
      Var diff = t.add(pred, t.constant(Tensor({1}, {-target})));
      Var loss = t.mean(t.square(diff));
      if (grads) t.backward(loss);
      return t.value(loss).item();
    };
    GradCheckReport report = grad_check(loss_fn, {&w}, 1e-5, 1e-6);
    CHECK(report.entries.size() == 1);
    CHECK(report.worst() < 1e-6);
    CHECK(report.within(1e-6));
  }
  SUBCASE("eps=0 rejected") {
    Parameter w(Tensor::scalar(1.0), "w");
    auto fn = [&](bool) { return 0.0; };
    CHECK_THROWS_AS(grad_check(fn, {&w}, 0.0, 1e-3), ValidationError);
  }
  SUBCASE("non-finite loss names the perturbed parameter") {
    Parameter w(Tensor::scalar(2.0), "w_bad");
    auto fn = [&](bool grads) {
      if (grads) return 1.0;             // base pass is finite
      return w.value.at(0) > 2.0 ? std::numeric_limits<double>::infinity() : 1.0;
    };
    try {
      grad_check(fn, {&w}, 1e-5, 1e-3);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("w_bad") != std::string::npos);
    }
  }
}
