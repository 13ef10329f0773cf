#include <cmath>
#include <random>

#include <Eigen/LU>

#include "doctest.h"
#include "mad/data.hpp"
#include "mad/error.hpp"
#include "mad/eval.hpp"
#include "oracles.hpp"

using namespace mad;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<double> draw(std::mt19937_64& rng, int n, double shift, bool rounded) {
  std::normal_distribution<double> nd(shift, 1.0);
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(rounded ? std::round(nd(rng) * 2) / 2 : nd(rng));
  return v;
}

// Best DER by direct enumeration of accept sets "score >= t" over every observed score.
double der_oracle(const std::vector<CleanEval>& c, const std::vector<BackdoorEval>& b, double cacc, double asr) {
  std::vector<double> ts = {-1e300, 1e300};
  for (auto& x : c) ts.push_back(x.score);
  for (auto& x : b) ts.push_back(x.score);
  double best = 0;
  for (double t : ts) {
    double ok = 0, hit = 0;
    for (auto& x : c)
      if (x.score >= t && x.correct) ok += 1;
    for (auto& x : b)
      if (x.score >= t && x.hits_target) hit += 1;
    const double d_asr = asr - hit / b.size(), d_cacc = cacc - ok / c.size();
    best = std::max(best, (std::max(0.0, d_asr) - std::max(0.0, d_cacc) + 1) / 2);
  }
  return best;
}

}  // namespace

TEST_CASE("auroc worked examples") {
  CHECK(auroc(std::vector<double>{3, 4, 5}, std::vector<double>{0, 1, 2}).auroc == 1.0);
  CHECK(auroc(std::vector<double>{0, 1}, std::vector<double>{3, 4}).auroc == 0.0);
  CHECK(auroc(std::vector<double>{2, 2, 2}, std::vector<double>{2, 2}).auroc == 0.5);
  CHECK(auroc(std::vector<double>{0.9, 0.4}, std::vector<double>{0.5, 0.1}).auroc == doctest::Approx(0.75));
  CHECK_THROWS_AS(auroc(std::vector<double>{}, std::vector<double>{1}), InputError);
  CHECK_THROWS_AS(auroc(std::vector<double>{NAN}, std::vector<double>{1}), InputError);
}

TEST_CASE("auroc matches the exhaustive pair count, with and without ties") {
  std::mt19937_64 rng(1);
  for (bool rounded : {false, true}) {
    for (int t = 0; t < 10; ++t) {
      const auto n = draw(rng, 40 + t, 0.8, rounded), a = draw(rng, 31, 0.0, rounded);
      const auto r = auroc(n, a);
      CHECK(r.auroc == doctest::Approx(oracle::auroc_pairs(n, a)).epsilon(1e-12));
      CHECK(r.points.front().fpr == 0);
      CHECK(r.points.back().fpr == 1);
      CHECK(r.points.back().tpr == 1);
      for (std::size_t i = 1; i < r.points.size(); ++i) {
        CHECK(r.points[i].fpr >= r.points[i - 1].fpr);
        CHECK(r.points[i].tpr >= r.points[i - 1].tpr);
      }
      // trapezoid area over the ROC points reproduces the statistic
      double area = 0;
      for (std::size_t i = 1; i < r.points.size(); ++i)
        area += (r.points[i].fpr - r.points[i - 1].fpr) * (r.points[i].tpr + r.points[i - 1].tpr) / 2;
      CHECK(area == doctest::Approx(r.auroc).epsilon(1e-12));
    }
  }
}

TEST_CASE("auroc invariance and symmetry") {
  std::mt19937_64 rng(2);
  const auto n = draw(rng, 50, 0.5, false), a = draw(rng, 60, 0.0, false);
  std::vector<double> tn, ta;
  for (double v : n) tn.push_back(std::atan(3 * v) + std::exp(v));
  for (double v : a) ta.push_back(std::atan(3 * v) + std::exp(v));
  CHECK(std::abs(auroc(n, a).auroc - auroc(tn, ta).auroc) < 1e-12);
  CHECK(auroc(n, a).auroc + auroc(a, n).auroc == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("der worked examples") {
  std::vector<CleanEval> clean(50, CleanEval{1.0, true});
  std::vector<BackdoorEval> bd(40, BackdoorEval{0.0, true});
  auto r = der(clean, bd, 1.0, 0.976);
  CHECK(r.der == doctest::Approx(0.988));
  CHECK(r.delta_asr == doctest::Approx(0.976));
  CHECK(r.delta_cacc == doctest::Approx(0));
  CHECK(r.threshold > 0.0);
  CHECK(r.threshold <= 1.0);

  r = der(clean, bd, 1.0, 1.0);
  CHECK(r.der == doctest::Approx(1.0));

  // identical scores: only accept-all or reject-all, and accept-all is a no-op
  for (auto& c : clean) c.score = 0.3;
  for (auto& b : bd) b.score = 0.3;
  r = der(clean, bd, 1.0, 1.0);
  CHECK(r.der == doctest::Approx(0.5));
  CHECK(r.post_asr == 1.0);

  CHECK_THROWS_AS(der(clean, bd, 1.2, 0.5), ParameterError);
  CHECK_THROWS_AS(der({}, bd, 1, 1), InputError);
}

TEST_CASE("der: brute-force oracle, policy bounds and monotone response") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u;
  for (int t = 0; t < 20; ++t) {
    std::vector<CleanEval> clean;
    std::vector<BackdoorEval> bd;
    for (int i = 0; i < 30; ++i) clean.push_back({std::round(u(rng) * 20) / 20 + 0.3, u(rng) < 0.93});
    for (int i = 0; i < 25; ++i) bd.push_back({std::round(u(rng) * 20) / 20, u(rng) < 0.9});
    double cacc = 0, asr = 0;
    for (auto& c : clean) cacc += c.correct;
    for (auto& b : bd) asr += b.hits_target;
    cacc /= clean.size();
    asr /= bd.size();
    const auto r = der(clean, bd, cacc, asr);
    CHECK(r.der == doctest::Approx(der_oracle(clean, bd, cacc, asr)).epsilon(1e-12));
    CHECK(r.der >= 0.5 - 1e-12);                               // accept-all
    CHECK(r.der >= der_value(asr, cacc) - 1e-12);              // reject-all
    CHECK(r.der >= 0);
    CHECK(r.der <= 1);

    double lowest = 1e9;
    for (auto& c : clean) lowest = std::min(lowest, c.score);
    auto moved = bd;
    moved[std::size_t(t) % moved.size()].score = lowest - 1;
    CHECK(der(clean, moved, cacc, asr).der >= r.der - 1e-12);
  }
}

TEST_CASE("mahalanobis: class means, identity precision, explicit-inverse oracle") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  const int dim = 5, n = 60;
  MatrixXd x(dim, n);
  std::vector<int> labels;
  for (int j = 0; j < n; ++j) {
    labels.push_back(j % 3);
    for (int i = 0; i < dim; ++i) x(i, j) = nd(rng) * (1 + i) + 2.0 * (j % 3) * (i == 0);
  }
  const auto m = fit_mahalanobis(x, labels, 0.05);
  REQUIRE(m.classes == std::vector<int>{0, 1, 2});

  // oracle: covariance and shrinkage written out, explicit inverse
  MatrixXd mu = MatrixXd::Zero(dim, 3);
  VectorXd count = VectorXd::Zero(3);
  for (int j = 0; j < n; ++j) {
    mu.col(labels[j]) += x.col(j);
    count(labels[j]) += 1;
  }
  for (int c = 0; c < 3; ++c) mu.col(c) /= count(c);
  MatrixXd cov = MatrixXd::Zero(dim, dim);
  for (int j = 0; j < n; ++j) {
    const VectorXd d = x.col(j) - mu.col(labels[j]);
    cov += d * d.transpose();
  }
  cov /= n;
  const MatrixXd shrunk = 0.95 * cov + 0.05 * (cov.trace() / dim) * MatrixXd::Identity(dim, dim);
  const MatrixXd inv = shrunk.inverse();
  CHECK((m.means - mu).cwiseAbs().maxCoeff() < 1e-12);
  MatrixXd probe(dim, 4);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < dim; ++i) probe(i, j) = nd(rng) * 2;
  const MatrixXd d2 = mahalanobis_sq(m, probe);
  for (int j = 0; j < 4; ++j)
    for (int c = 0; c < 3; ++c) {
      const VectorXd diff = probe.col(j) - mu.col(c);
      CHECK(std::abs(d2(c, j) - diff.dot(inv * diff)) < 1e-8);
    }

  const VectorXd at_mean = mahalanobis_scores(m, m.means);
  CHECK(at_mean.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(mahalanobis_scores(m, probe).maxCoeff() < 0);

  MahalanobisModel id = m;
  id.precision = MatrixXd::Identity(dim, dim);
  const VectorXd s = mahalanobis_scores(id, probe);
  for (int j = 0; j < 4; ++j) {
    double best = 1e300;
    for (int c = 0; c < 3; ++c) best = std::min(best, (probe.col(j) - mu.col(c)).norm());
    CHECK(s(j) == doctest::Approx(-best).epsilon(1e-12));
  }

  CHECK_THROWS_AS(fit_mahalanobis(MatrixXd::Random(10, 4), std::vector<int>{0, 1, 0, 1}, 0.0), ParameterError);
  CHECK_NOTHROW(fit_mahalanobis(MatrixXd::Random(10, 4), std::vector<int>{0, 1, 0, 1}, 0.05));
}

TEST_CASE("mahalanobis baseline on a trained model separates uniform noise") {
  auto digits = load_digits(SyntheticDigits{3, 400});
  const auto arch = mlp_arch(196, {12}, 10);
  const auto p = train(init_model(arch, 1), digits, TrainConfig{0.05, 0.9, 0.0, 10, 32, 2}).params;
  const SampleList trusted(digits.begin(), digits.begin() + 200);
  SampleList test(digits.begin() + 200, digits.begin() + 260);
  for (auto& s : test) s.split = Split::test;
  auto ood = gen_ood(OodKind::uniform_noise, 30, 5);
  test.insert(test.end(), ood.begin(), ood.end());
  CHECK(penultimate_activations(p, trusted).rows() == 12);
  const auto scores = mahalanobis_baseline(p, trusted, test);
  REQUIRE(scores.size() == 90);
  CHECK(scores.front().method == Method::mahalanobis);
  CHECK(scores.back().provenance == Provenance::ood);
  std::vector<double> normal, anomalous;
  for (const auto& s : scores) (s.provenance == Provenance::clean ? normal : anomalous).push_back(s.score);
  CHECK(auroc(normal, anomalous).auroc > 0.8);
}
