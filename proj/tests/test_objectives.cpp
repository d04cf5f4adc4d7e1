#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fd_check.hpp"
#include "us3l/objectives.hpp"
#include "us3l/rng.hpp"
#include "us3l/tensor.hpp"

using namespace us3l;

namespace {

std::vector<double> unit_rows(Rng& rng, int64_t n, int64_t d) {
  std::vector<double> v(static_cast<std::size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double x = rng.gauss();
      v[static_cast<std::size_t>(i * d + j)] = x;
      s += x * x;
    }
    const double norm = std::sqrt(s);
    for (int64_t j = 0; j < d; ++j)
      v[static_cast<std::size_t>(i * d + j)] /= norm;
  }
  return v;
}

// Brute-force loss for a batch of paired views, written independently of the
// tensor engine: softmax over the positive and every cross/same-view negative.
double info_nce_brute(const std::vector<double>& z1,
                      const std::vector<double>& z2, int64_t n, int64_t d,
                      double tau) {
  auto dot = [&](const std::vector<double>& a, int64_t i,
                 const std::vector<double>& b, int64_t j) {
    double s = 0.0;
    for (int64_t k = 0; k < d; ++k)
      s += a[static_cast<std::size_t>(i * d + k)] *
           b[static_cast<std::size_t>(j * d + k)];
    return s;
  };
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double pos = std::exp(dot(z1, i, z2, i) / tau);
    double denom = pos;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      denom += std::exp(dot(z1, i, z2, j) / tau);
      denom += std::exp(dot(z1, i, z1, j) / tau);
    }
    loss += -std::log(pos / denom);
  }
  return loss;
}

}  // namespace

TEST_CASE("neg_cosine values") {
  auto a = Tensor::from_data({1, 2}, {0.6, 0.8});
  CHECK(neg_cosine(a, a)(0) == doctest::Approx(-1.0).epsilon(1e-12));

  auto x = Tensor::from_data({1, 2}, {1, 0});
  auto y = Tensor::from_data({1, 2}, {0, 1});
  CHECK(neg_cosine(x, y)(0) == doctest::Approx(0.0));

  auto p = Tensor::from_data({1, 2}, {0.6, 0.8});
  CHECK(neg_cosine(p, x)(0) == doctest::Approx(-0.6).epsilon(1e-12));

  auto zero = Tensor::from_data({1, 2}, {0, 0});
  CHECK_THROWS_AS(neg_cosine(zero, x), std::domain_error);
}

TEST_CASE("neg_cosine is invariant to positive scaling") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto pv = unit_rows(rng, 3, 4);
    auto zv = unit_rows(rng, 3, 4);
    auto p = Tensor::from_data({3, 4}, pv);
    auto z = Tensor::from_data({3, 4}, zv);
    auto base = neg_cosine(p, z);
    const double c = 0.1 + 5.0 * rng.uniform();
    std::vector<double> scaled = pv;
    for (double& v : scaled) v *= c;
    auto again = neg_cosine(Tensor::from_data({3, 4}, scaled), z);
    for (int64_t i = 0; i < 3; ++i)
      CHECK(again(i) == doctest::Approx(base(i)).epsilon(1e-10));
  }
}

TEST_CASE("simsiam_loss values and stop-gradient") {
  auto v = Tensor::from_data({1, 2}, {0.6, 0.8});
  CHECK(simsiam_loss(v, v, v, v).item() == doctest::Approx(-2.0).epsilon(1e-12));

  // p1 pairs with z2 and p2 with z1; orthogonal pairs give zero.
  auto x = Tensor::from_data({1, 2}, {1, 0});
  auto y = Tensor::from_data({1, 2}, {0, 1});
  CHECK(simsiam_loss(x, x, y, y).item() == doctest::Approx(0.0));

  // Gradient must flow only through the predictor branch.
  Tape tape;
  TapeScope scope(tape);
  auto p1 = Tensor::from_data({2, 3}, {1, 0.2, 0, 0, 1, 0.3}, true);
  auto z1 = Tensor::from_data({2, 3}, {0.5, 0.5, 0, 0, 0.5, 0.5}, true);
  auto p2 = Tensor::from_data({2, 3}, {0.1, 1, 0, 0.4, 0, 1}, true);
  auto z2 = Tensor::from_data({2, 3}, {1, 0.1, 0.1, 0.1, 1, 0.1}, true);
  backward(simsiam_loss(p1, z1, p2, z2));
  for (double g : z1.grad()) CHECK(g == 0.0);
  for (double g : z2.grad()) CHECK(g == 0.0);
  bool any = false;
  for (double g : p1.grad()) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("info_nce degenerate batch is exactly zero") {
  Rng rng(17);
  for (int t = 0; t < 25; ++t) {
    auto z1 = Tensor::from_data({1, 6}, unit_rows(rng, 1, 6));
    auto z2 = Tensor::from_data({1, 6}, unit_rows(rng, 1, 6));
    CHECK(info_nce(z1, z2, 0.5).item() == 0.0);
  }
}

TEST_CASE("info_nce matches brute-force enumeration") {
  Rng rng(31);
  for (int t = 0; t < 30; ++t) {
    const int64_t n = 2 + static_cast<int64_t>(rng.uniform_int(4));
    const int64_t d = 3 + static_cast<int64_t>(rng.uniform_int(4));
    const double tau = (t % 2 == 0) ? 1.0 : 0.5;
    auto z1v = unit_rows(rng, n, d);
    auto z2v = unit_rows(rng, n, d);
    auto loss = info_nce(Tensor::from_data({n, d}, z1v),
                         Tensor::from_data({n, d}, z2v), tau);
    CHECK(loss.item() ==
          doctest::Approx(info_nce_brute(z1v, z2v, n, d, tau)).epsilon(1e-10));
  }
}

TEST_CASE("info_nce decreases as the positive similarity rises") {
  // Rotate z2's first row toward z1's first row, negatives fixed.
  auto make_z2 = [](double angle) {
    return Tensor::from_data({2, 2}, {std::cos(angle), std::sin(angle), 0, 1});
  };
  auto z1 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  double prev = info_nce(z1, make_z2(1.2), 0.5).item();
  for (double angle : {0.9, 0.6, 0.3, 0.05}) {
    const double cur = info_nce(z1, make_z2(angle), 0.5).item();
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("info_nce rejects unnormalized rows") {
  auto good = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto bad = Tensor::from_data({2, 2}, {2, 0, 0, 1});
  CHECK_THROWS_AS(info_nce(good, bad, 0.5), NumericError);
}

TEST_CASE("mse_distill values and exact gradient") {
  auto s = Tensor::from_data({1, 2}, {0.6, 0.8});
  CHECK(mse_distill(s, s).item() == doctest::Approx(-1.0).epsilon(1e-12));

  auto anti = Tensor::from_data({1, 2}, {-0.6, -0.8});
  CHECK(mse_distill(s, anti).item() == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(41);
  auto tv = unit_rows(rng, 3, 5);
  auto sv = unit_rows(rng, 3, 5);
  Tape tape;
  TapeScope scope(tape);
  auto zs = Tensor::from_data({3, 5}, sv, true);
  auto zt = Tensor::from_data({3, 5}, tv);
  backward(mse_distill(zs, zt));
  // d/dz_s of -sum z_s.z_t is exactly -z_t.
  for (std::size_t i = 0; i < tv.size(); ++i)
    CHECK(zs.grad()[i] == -tv[i]);
}

TEST_CASE("nce_distill hand-enumerated values") {
  // Single target equal to the student: loss = -1 + log e = 0.
  auto s = Tensor::from_data({1, 2}, {1, 0});
  CHECK(nce_distill(s, s, 1.0).item() == doctest::Approx(0.0).epsilon(1e-12));

  // Two orthogonal targets, student sitting on the first.
  auto zs = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto zt = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  // Row 0: -1 + log(e^1 + e^0) for targets {e1, e2}; same for row 1.
  const double row = -1.0 + std::log(std::exp(1.0) + 1.0);
  CHECK(nce_distill(zs, zt, 1.0).item() ==
        doctest::Approx(2 * row).epsilon(1e-12));
  CHECK(row == doctest::Approx(0.3132616875).epsilon(1e-9));

  auto empty_ok = Tensor::from_data({1, 2}, {1, 0});
  CHECK_THROWS_AS(nce_distill(empty_ok, Tensor::from_data({0, 2}, {}), 1.0),
                  std::invalid_argument);
}

TEST_CASE("nce_distill gradient matches softmax-weighted form") {
  Rng rng(43);
  for (int t = 0; t < 25; ++t) {
    const int64_t n = 4, d = 6;
    auto sv = unit_rows(rng, n, d);
    auto tv = unit_rows(rng, n, d);
    const double tau = (t % 2 == 0) ? 1.0 : 0.7;

    Tape tape;
    TapeScope scope(tape);
    auto zs = Tensor::from_data({n, d}, sv, true);
    auto zt = Tensor::from_data({n, d}, tv);
    backward(nce_distill(zs, zt, tau));

    // Closed form per row: (-z_t_i + sum_j P_j z_t_j) / tau.
    for (int64_t i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (int64_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int64_t k = 0; k < d; ++k)
          dot += sv[static_cast<std::size_t>(i * d + k)] *
                 tv[static_cast<std::size_t>(j * d + k)];
        logits[static_cast<std::size_t>(j)] = dot / tau;
        mx = std::max(mx, dot / tau);
      }
      double zsum = 0.0;
      for (double l : logits) zsum += std::exp(l - mx);
      for (int64_t k = 0; k < d; ++k) {
        double expected = -tv[static_cast<std::size_t>(i * d + k)];
        for (int64_t j = 0; j < n; ++j) {
          const double pj = std::exp(logits[static_cast<std::size_t>(j)] - mx) / zsum;
          expected += pj * tv[static_cast<std::size_t>(j * d + k)];
        }
        expected /= tau;
        const double got = zs.grad()[static_cast<std::size_t>(i * d + k)];
        CHECK(us3l::testing::relative_error(got, expected) <= 1e-8);
      }
    }
  }
}

TEST_CASE("cross_entropy values") {
  // Uniform logits over 4 classes.
  auto z = Tensor::from_data({1, 2}, {0, 0});
  ClassifierHead head{Tensor::from_data({2, 4}, {1, 1, 1, 1, 1, 1, 1, 1})};
  CHECK(cross_entropy(z, head, {2}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // Dominant correct logit saturates to ~0.
  ClassifierHead strong{Tensor::from_data({2, 2}, {30, -30, -30, 30})};
  auto x = Tensor::from_data({1, 2}, {1, 0});
  CHECK(cross_entropy(x, strong, {0}).item() == doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(cross_entropy(x, strong, {5}), std::invalid_argument);
}

TEST_CASE("cross_entropy gradient matches class-weighted form") {
  Rng rng(47);
  for (int t = 0; t < 25; ++t) {
    const int64_t n = 3, d = 4, c = 5;
    std::vector<double> zv(static_cast<std::size_t>(n * d));
    for (double& v : zv) v = rng.gauss();
    std::vector<double> wv(static_cast<std::size_t>(d * c));
    for (double& v : wv) v = rng.gauss();
    std::vector<int64_t> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<int64_t>(rng.uniform_int(c));

    Tape tape;
    TapeScope scope(tape);
    auto z = Tensor::from_data({n, d}, zv, true);
    ClassifierHead head{Tensor::from_data({d, c}, wv)};
    backward(cross_entropy(z, head, labels));

    // -w_y + sum_j P_j w_j per sample.
    for (int64_t i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(c), 0.0);
      double mx = -1e300;
      for (int64_t j = 0; j < c; ++j) {
        for (int64_t k = 0; k < d; ++k)
          logits[static_cast<std::size_t>(j)] +=
              zv[static_cast<std::size_t>(i * d + k)] *
              wv[static_cast<std::size_t>(k * c + j)];
        mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
      }
      double zsum = 0.0;
      for (double l : logits) zsum += std::exp(l - mx);
      for (int64_t k = 0; k < d; ++k) {
        double expected = -wv[static_cast<std::size_t>(k * c + labels[i])];
        for (int64_t j = 0; j < c; ++j)
          expected += std::exp(logits[static_cast<std::size_t>(j)] - mx) / zsum *
                      wv[static_cast<std::size_t>(k * c + j)];
        const double got = z.grad()[static_cast<std::size_t>(i * d + k)];
        CHECK(us3l::testing::relative_error(got, expected) <= 1e-6);
      }
    }
  }
}

TEST_CASE("group_coefficients paper constants") {
  GroupRegConfig cfg;  // lambda 1e-4, G=8, alpha=0.05
  cfg.lambda = 1.0;
  auto lk = group_coefficients(64, cfg);
  REQUIRE(lk.size() == 64);
  const double expected[8] = {1.00, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70, 0.65};
  for (int64_t k = 0; k < 64; ++k)
    CHECK(lk[static_cast<std::size_t>(k)] == expected[k / 8]);  // exact
}

TEST_CASE("group_coefficients alpha=0 degenerates to flat decay") {
  GroupRegConfig cfg;
  cfg.lambda = 1e-4;
  cfg.alpha = 0.0;
  auto lk = group_coefficients(32, cfg);
  for (double v : lk) CHECK(v == 1e-4);
}

TEST_CASE("group_coefficients clamps trailing channels into last group") {
  GroupRegConfig cfg;
  cfg.lambda = 1.0;
  auto lk = group_coefficients(9, cfg);  // K_G = 1, channel 8 would index group 8
  REQUIRE(lk.size() == 9);
  CHECK(lk[8] == lk[7]);  // clamped to group 7
  CHECK(lk[8] == std::fma(-7.0, 0.05, 1.0));
}

TEST_CASE("group_coefficients is non-increasing; constant iff alpha=0") {
  Rng rng(53);
  for (int t = 0; t < 30; ++t) {
    GroupRegConfig cfg;
    cfg.lambda = rng.uniform(0.0, 2.0);
    cfg.groups = 1 + static_cast<int64_t>(rng.uniform_int(8));
    cfg.alpha = (t % 3 == 0) ? 0.0 : rng.uniform(0.0, 0.9 / std::max<int64_t>(1, cfg.groups - 1));
    const int64_t k = cfg.groups + static_cast<int64_t>(rng.uniform_int(60));
    auto lk = group_coefficients(k, cfg);
    bool constant = true;
    for (std::size_t i = 1; i < lk.size(); ++i) {
      CHECK(lk[i] <= lk[i - 1]);
      constant = constant && lk[i] == lk[0];
    }
    if (cfg.alpha == 0.0) CHECK(constant);
    if (cfg.lambda > 0.0 && cfg.alpha > 0.0 && cfg.groups > 1 &&
        k >= 2 * cfg.groups)
      CHECK_FALSE(constant);
  }
}

TEST_CASE("group_coefficients config errors") {
  GroupRegConfig bad;
  bad.alpha = 0.2;  // 0.2 * 7 >= 1
  CHECK_THROWS_AS(group_coefficients(64, bad), std::invalid_argument);

  GroupRegConfig cfg;
  CHECK_THROWS_AS(group_coefficients(4, cfg), std::invalid_argument);  // K < G
}

TEST_CASE("group_reg_penalty values and oracle") {
  // Unit-norm channels with flat lambda sum to lambda * K.
  const int64_t k = 6, d = 4;
  std::vector<double> wv(static_cast<std::size_t>(k * d), 0.0);
  for (int64_t i = 0; i < k; ++i) wv[static_cast<std::size_t>(i * d)] = 1.0;
  auto w = Tensor::from_data({k, d}, wv);
  std::vector<double> flat(static_cast<std::size_t>(k), 0.25);
  CHECK(group_reg_penalty(w, flat).item() == doctest::Approx(0.25 * 6).epsilon(1e-12));

  auto zeros = Tensor::zeros({k, d});
  CHECK(group_reg_penalty(zeros, flat).item() == 0.0);

  // Random weights against a naive scalar loop.
  Rng rng(59);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> rv(static_cast<std::size_t>(k * d));
    for (double& v : rv) v = rng.gauss();
    std::vector<double> bv(static_cast<std::size_t>(k));
    for (double& v : bv) v = rng.gauss();
    std::vector<double> lk(static_cast<std::size_t>(k));
    for (double& v : lk) v = rng.uniform(0.0, 1.0);

    double naive = 0.0;
    for (int64_t i = 0; i < k; ++i) {
      double row = 0.0;
      for (int64_t j = 0; j < d; ++j)
        row += rv[static_cast<std::size_t>(i * d + j)] *
               rv[static_cast<std::size_t>(i * d + j)];
      row += bv[static_cast<std::size_t>(i)] * bv[static_cast<std::size_t>(i)];
      naive += lk[static_cast<std::size_t>(i)] * row;
    }
    auto got = group_reg_penalty(Tensor::from_data({k, d}, rv),
                                 Tensor::from_data({k}, bv), lk);
    CHECK(got.item() == doctest::Approx(naive).epsilon(1e-12));
  }

  std::vector<double> wrong(static_cast<std::size_t>(k - 1), 0.1);
  CHECK_THROWS_AS(group_reg_penalty(w, wrong), std::invalid_argument);
}

TEST_CASE("group_reg_penalty gradient is 2 lambda_k w_k") {
  Rng rng(61);
  const int64_t k = 5, d = 3;
  std::vector<double> wv(static_cast<std::size_t>(k * d));
  for (double& v : wv) v = rng.gauss();
  std::vector<double> lk(static_cast<std::size_t>(k));
  for (double& v : lk) v = rng.uniform(0.1, 1.0);

  Tape tape;
  TapeScope scope(tape);
  auto w = Tensor::from_data({k, d}, wv, true);
  backward(group_reg_penalty(w, lk));
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < d; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i * d + j);
      CHECK(w.grad()[idx] ==
            doctest::Approx(2.0 * lk[static_cast<std::size_t>(i)] * wv[idx])
                .epsilon(1e-12));
    }
}

TEST_CASE("check_guidelines truth table") {
  auto make = [](BaseLoss b, DistillLoss dl, bool momentum) {
    LossSpec s;
    s.base_loss = b;
    s.distill_loss = dl;
    s.head_mode = dl == DistillLoss::none ? HeadMode::none : HeadMode::separate;
    s.momentum_target_base = momentum;
    s.momentum_target_sub = momentum;
    return s;
  };

  // The collapsing corner: everything absolute, no teacher.
  auto r = check_guidelines(make(BaseLoss::mse, DistillLoss::mse, false));
  CHECK_FALSE(r.g1_base_relative);
  CHECK_FALSE(r.g2_distill_relative);
  CHECK_FALSE(r.g3_momentum_teacher);
  CHECK_FALSE(r.stable);
  CHECK(r.satisfied_count == 0);

  r = check_guidelines(make(BaseLoss::mse, DistillLoss::nce, false));
  CHECK(r.g2_distill_relative);
  CHECK(r.stable);

  r = check_guidelines(make(BaseLoss::nce, DistillLoss::mse, true));
  CHECK(r.g1_base_relative);
  CHECK(r.g3_momentum_teacher);
  CHECK_FALSE(r.g2_distill_relative);
  CHECK(r.satisfied_count == 2);
  CHECK(r.stable);

  // Full 12-combination sweep against first principles.
  for (BaseLoss b : {BaseLoss::mse, BaseLoss::nce})
    for (DistillLoss dl : {DistillLoss::none, DistillLoss::mse, DistillLoss::nce})
      for (bool momentum : {false, true}) {
        auto rep = check_guidelines(make(b, dl, momentum));
        CHECK(rep.g1_base_relative == (b == BaseLoss::nce));
        CHECK(rep.g2_distill_relative == (dl == DistillLoss::nce));
        CHECK(rep.g3_momentum_teacher == momentum);
        CHECK(rep.stable == (rep.satisfied_count >= 1));
      }
}

TEST_CASE("LossSpec validation") {
  LossSpec s;
  s.temperature = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);

  LossSpec t;
  t.distill_loss = DistillLoss::none;
  t.head_mode = HeadMode::separate;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("us3l_total composes additively") {
  Rng rng(67);
  const int64_t n = 2, d = 4;

  LossSpec spec;  // nce base, mse distill, momentum both, new head
  BaseOutputs base{Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor(), Tensor()};
  TeacherOutputs teacher{Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                         Tensor::from_data({n, d}, unit_rows(rng, n, d))};
  SubOutputs sub_a{0.5, Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor::from_data({n, d}, unit_rows(rng, n, d))};
  SubOutputs sub_b{0.25, Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor::from_data({n, d}, unit_rows(rng, n, d))};

  const double no_subs = us3l_total(base, {}, teacher, spec).item();
  const double with_a = us3l_total(base, {sub_a}, teacher, spec).item();
  const double with_ab = us3l_total(base, {sub_a, sub_b}, teacher, spec).item();

  // Independently computed parts.
  auto t1 = l2_normalize(teacher.z1);
  auto t2 = l2_normalize(teacher.z2);
  const double part_a = mse_distill(l2_normalize(sub_a.d1), t2).item() +
                        mse_distill(l2_normalize(sub_a.d2), t1).item();
  const double part_b = mse_distill(l2_normalize(sub_b.d1), t2).item() +
                        mse_distill(l2_normalize(sub_b.d2), t1).item();

  CHECK(with_a == doctest::Approx(no_subs + part_a).epsilon(1e-12));
  CHECK(with_ab == doctest::Approx(no_subs + part_a + part_b).epsilon(1e-12));
  // Removing one sub-network changes the loss by exactly its contribution.
  CHECK(with_ab - with_a == doctest::Approx(part_b).epsilon(1e-10));
}

TEST_CASE("us3l_total default spec composes nce base plus mse distill") {
  Rng rng(71);
  const int64_t n = 3, d = 5;
  LossSpec spec;  // defaults: nce + mse + momentum + new head
  BaseOutputs base{Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor(), Tensor()};
  TeacherOutputs teacher{Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                         Tensor::from_data({n, d}, unit_rows(rng, n, d))};
  SubOutputs sub{0.5, Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                 Tensor::from_data({n, d}, unit_rows(rng, n, d))};

  const double total = us3l_total(base, {sub}, teacher, spec).item();
  const double base_term =
      info_nce(l2_normalize(base.z1), l2_normalize(teacher.z2), spec.temperature)
          .item();
  const double distill_term =
      mse_distill(l2_normalize(sub.d1), l2_normalize(teacher.z2)).item() +
      mse_distill(l2_normalize(sub.d2), l2_normalize(teacher.z1)).item();
  CHECK(total == doctest::Approx(base_term + distill_term).epsilon(1e-12));
}

TEST_CASE("us3l_total warmup degenerates to the base loss") {
  Rng rng(73);
  const int64_t n = 2, d = 4;
  LossSpec spec;
  spec.momentum_target_base = false;
  spec.momentum_target_sub = false;
  BaseOutputs base{Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor(), Tensor()};
  const double total = us3l_total(base, {}, TeacherOutputs{}, spec).item();
  const double expected =
      info_nce(l2_normalize(base.z1), l2_normalize(base.z2), spec.temperature)
          .item();
  CHECK(total == expected);
}

TEST_CASE("us3l_total rejects inconsistent outputs") {
  Rng rng(79);
  const int64_t n = 2, d = 3;
  LossSpec spec;
  spec.distill_loss = DistillLoss::none;
  spec.head_mode = HeadMode::none;
  spec.momentum_target_base = false;
  spec.momentum_target_sub = false;
  BaseOutputs base{Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                   Tensor(), Tensor()};
  SubOutputs sub{0.5, Tensor::from_data({n, d}, unit_rows(rng, n, d)),
                 Tensor::from_data({n, d}, unit_rows(rng, n, d))};
  CHECK_THROWS_AS(us3l_total(base, {sub}, TeacherOutputs{}, spec),
                  std::invalid_argument);
}
