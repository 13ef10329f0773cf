#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mad/data.hpp"
#include "mad/sgld.hpp"
#include "oracles.hpp"

using namespace mad;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

SgldConfig plain(double eps, double gamma, double n_beta = 0.0) {
  SgldConfig c;
  c.step_size = eps;
  c.gamma = gamma;
  c.n_beta = n_beta;
  c.preconditioner = Preconditioner::none;
  c.batch_size = 8;
  return c;
}

struct Fixture {
  SampleList sampling, observables;
  ParamVector w_star;
  Fixture() {
    auto digits = load_digits(SyntheticDigits{11, 160});
    for (auto& s : digits) s.split = Split::sampling;
    sampling.assign(digits.begin(), digits.begin() + 100);
    observables.assign(digits.begin() + 100, digits.end());
    for (auto& s : observables) s.split = Split::test;
    const auto arch = mlp_arch(196, {12}, 10);
    w_star = train(init_model(arch, 4), sampling, TrainConfig{0.05, 0.9, 0.0, 5, 20, 2}).params;
  }
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("noise-free update contracts the offset by 1 - eps*gamma/2") {
  SgldConfig cfg = plain(1e-6, 1e4);
  cfg.inject_noise = false;
  const VectorXd w_star = VectorXd::LinSpaced(5, -1, 1);
  const VectorXd v = VectorXd::LinSpaced(5, 0.3, -0.7);
  ChainState st = init_chain(w_star, cfg);
  st.w = w_star + v;
  sgld_update(st, w_star, VectorXd::Zero(5), cfg);
  CHECK((st.w - w_star - 0.995 * v).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(st.step == 1);
}

TEST_CASE("zero step size leaves w unchanged") {
  SgldConfig cfg = plain(0.0, 1e4, 100.0);
  const VectorXd w_star = VectorXd::Ones(4);
  ChainState st = init_chain(w_star, cfg);
  st.w = VectorXd::Constant(4, 2.5);
  sgld_update(st, w_star, VectorXd::Constant(4, 7.0), cfg);
  CHECK(st.w == VectorXd::Constant(4, 2.5));
  cfg.preconditioner = Preconditioner::rmsprop;
  sgld_update(st, w_star, VectorXd::Constant(4, 7.0), cfg);
  CHECK(st.w == VectorXd::Constant(4, 2.5));
}

TEST_CASE("pure diffusion increments are N(0, eps)") {
  const double eps = 4e-4;
  SgldConfig cfg = plain(eps, 0.0);
  const Eigen::Index d = 20000;
  ChainState st = init_chain(VectorXd::Zero(d), cfg);
  st.w = VectorXd::Constant(d, 3.0);
  const VectorXd before = st.w;
  sgld_update(st, VectorXd::Zero(d), VectorXd::Zero(d), cfg);
  const VectorXd inc = st.w - before;
  const double mean = inc.mean();
  const double var = (inc.array() - mean).square().sum() / double(d - 1);
  CHECK(std::abs(mean) < 5 * std::sqrt(eps / double(d)));
  CHECK(var == doctest::Approx(eps).epsilon(0.05));
}

TEST_CASE("discretized OU stationary variance matches the linear recursion") {
  // u' = a u + sqrt(eps) eta with a = 1 - eps*gamma/2, so Var = eps / (1 - a^2)
  const double eps = 1e-2, gamma = 10.0;
  SgldConfig cfg = plain(eps, gamma);
  cfg.steps = 10500;
  cfg.burn_in = 500;
  const int d = 20;
  const VectorXd w_star = VectorXd::Zero(d);
  VectorXd sum = VectorXd::Zero(d), sq = VectorXd::Zero(d);
  run_sgld(w_star, cfg, [&](const VectorXd&, Rng&) { return VectorXd::Zero(d).eval(); },
           [&](Eigen::Index, const VectorXd& w) {
             sum += w;
             sq += w.cwiseAbs2();
           });
  const double a = 1 - eps * gamma / 2;
  const double expect = eps / (1 - a * a);
  const VectorXd var = sq / 10000.0 - (sum / 10000.0).cwiseAbs2();
  for (int i = 0; i < d; ++i) CHECK(std::abs(var(i) / expect - 1.0) < 0.2);
}

TEST_CASE("rmsprop preconditioning scales drift and noise") {
  SgldConfig cfg = plain(1e-2, 0.0);
  cfg.preconditioner = Preconditioner::rmsprop;
  cfg.rms_decay = 0.5;
  cfg.rms_damping = 1e-3;
  cfg.inject_noise = false;
  const VectorXd w_star = VectorXd::Zero(2);
  ChainState st = init_chain(w_star, cfg);
  VectorXd g(2);
  g << 4.0, -0.5;
  sgld_update(st, w_star, g, cfg);
  // V = 0.5 g^2, G = 1 / (sqrt(V) + damping)
  for (int i = 0; i < 2; ++i) {
    const double G = 1.0 / (std::sqrt(0.5 * g(i) * g(i)) + 1e-3);
    CHECK(st.sq_avg(i) == doctest::Approx(0.5 * g(i) * g(i)));
    CHECK(st.w(i) == doctest::Approx(-0.5 * 1e-2 * G * g(i)));
  }
  CHECK((st.sq_avg.array() >= 0).all());
}

TEST_CASE("divergence raises with the step index") {
  SgldConfig cfg = plain(1e-3, 1.0);
  ChainState st = init_chain(VectorXd::Zero(3), cfg);
  sgld_update(st, VectorXd::Zero(3), VectorXd::Zero(3), cfg);
  VectorXd bad = VectorXd::Zero(3);
  bad(1) = std::numeric_limits<double>::infinity();
  try {
    sgld_update(st, VectorXd::Zero(3), bad, cfg);
    FAIL("expected ChainDivergence");
  } catch (const ChainDivergence& e) {
    CHECK(e.step() == 2);
  }
}

TEST_CASE("config validation") {
  SgldConfig c;
  CHECK_NOTHROW(c.validate(1000));
  c.burn_in = c.steps;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = SgldConfig{};
  CHECK_THROWS_AS(c.validate(100), ParameterError);  // m = 256 > |D_S|
  c.step_size = -1;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  CHECK(preconditioner_from_string(to_string(Preconditioner::none)) == Preconditioner::none);
  CHECK_THROWS_AS(preconditioner_from_string("adam"), ParameterError);
}

TEST_CASE("run_chain shapes, frozen targets and determinism") {
  Fixture f;
  SgldConfig cfg = plain(1e-5, 1e3, 100.0);
  cfg.steps = 6;
  cfg.burn_in = 5;
  const auto one = run_chain(f.w_star, f.sampling, f.observables, cfg);
  CHECK(one.draws() == 1);
  CHECK(one.rows.size() == f.observables.size());
  for (std::size_t i = 0; i < f.observables.size(); ++i) {
    CHECK(one.rows[i].target_label == predict(f.w_star, f.observables[i].input));
    CHECK(one.rows[i].sample_id == "test:" + std::to_string(f.observables[i].id));
  }

  cfg.steps = 40;
  cfg.burn_in = 10;
  cfg.preconditioner = Preconditioner::rmsprop;
  const auto a = run_chain(f.w_star, f.sampling, f.observables, cfg);
  const auto b = run_chain(f.w_star, f.sampling, f.observables, cfg);
  CHECK(a.draws() == 30);
  CHECK(std::memcmp(a.values.data(), b.values.data(), std::size_t(a.values.size()) * 8) == 0);
  cfg.seed = 1;
  CHECK(run_chain(f.w_star, f.sampling, f.observables, cfg).values != a.values);
  CHECK(a.invalid_count() == 0);
  CHECK_THROWS_AS(run_chain(f.w_star, f.sampling, SampleList{}, cfg), InputError);
}

TEST_CASE("run_chain matches a manual sgld_step replay") {
  Fixture f;
  SgldConfig cfg = plain(1e-5, 1e3, 50.0);
  cfg.preconditioner = Preconditioner::rmsprop;
  cfg.steps = 12;
  cfg.burn_in = 2;
  const auto traces = run_chain(f.w_star, f.sampling, f.observables, cfg);
  const auto kl = kl_observable_trace(f.w_star, f.sampling, f.observables, cfg);

  ChainState st = init_chain(f.w_star.values, cfg);
  for (int t = 0; t < cfg.steps; ++t) {
    sgld_step(st, f.w_star, f.sampling, cfg);
    if (t < cfg.burn_in) continue;
    const ParamVector wt{st.w, f.w_star.arch};
    for (std::size_t i = 0; i < f.observables.size(); ++i) {
      const auto& x = f.observables[i].input;
      const double ce = loss(wt, x, traces.rows[i].target_label);
      CHECK(traces.values(Eigen::Index(i), t - cfg.burn_in) == doctest::Approx(ce).epsilon(1e-12));
      // direct two-distribution KL on stored softmax outputs
      const VectorXd p = softmax(forward(f.w_star, x)), q = softmax(forward(wt, x));
      double d = 0;
      for (Eigen::Index k = 0; k < p.size(); ++k) d += p(k) * (std::log(p(k)) - std::log(q(k)));
      CHECK(std::abs(kl.values(Eigen::Index(i), t - cfg.burn_in) - d) < 1e-9);
    }
  }
}

TEST_CASE("KL observable is zero at w* and never negative") {
  Fixture f;
  SgldConfig cfg = plain(0.0, 1e3, 100.0);
  cfg.steps = 3;
  cfg.burn_in = 0;
  const auto still = kl_observable_trace(f.w_star, f.sampling, f.observables, cfg);
  CHECK(still.values.cwiseAbs().maxCoeff() == 0.0);
  cfg.step_size = 1e-4;
  cfg.steps = 20;
  const auto moving = kl_observable_trace(f.w_star, f.sampling, f.observables, cfg);
  CHECK(moving.values.minCoeff() >= 0.0);
  CHECK(moving.values.maxCoeff() > 0.0);
  VectorXd z(3);
  z << 1000, 0, -1000;
  CHECK(kl_from_logits(z, z) == 0.0);
}

TEST_CASE("localization: trace variance and distance shrink with gamma") {
  Fixture f;
  std::vector<double> var_median, dist_median;
  for (double gamma : {1e3, 1e4, 1e5}) {
    std::vector<double> dists;
    std::vector<double> vars;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SgldConfig cfg = plain(1e-6, gamma, 1e-3);
      cfg.steps = 400;
      cfg.burn_in = 100;
      cfg.seed = seed;
      double dist = 0;
      run_sgld(f.w_star.values, cfg, [](const VectorXd& w, Rng&) { return VectorXd::Zero(w.size()).eval(); },
               [&](Eigen::Index, const VectorXd& w) { dist += (w - f.w_star.values).norm(); });
      dists.push_back(dist / 300.0);
      if (seed == 0) {
        const auto tr = run_chain(f.w_star, f.sampling, f.observables, cfg);
        for (Eigen::Index i = 0; i < tr.values.rows(); ++i) {
          const VectorXd r = tr.values.row(i).transpose();
          std::vector<double> rv(r.data(), r.data() + r.size());
          vars.push_back(oracle::cov(rv, rv));
        }
      }
    }
    dist_median.push_back(median(dists));
    var_median.push_back(median(vars));
  }
  CHECK(dist_median[1] <= dist_median[0]);
  CHECK(dist_median[2] <= dist_median[1]);
  CHECK(var_median[1] < var_median[0]);
  CHECK(var_median[2] < var_median[1]);
}

TEST_CASE("non-finite observables mark rows invalid without aborting") {
  Fixture f;
  SampleList obs(f.observables.begin(), f.observables.begin() + 5);
  obs[2].input(0) = std::numeric_limits<double>::quiet_NaN();
  SgldConfig cfg = plain(1e-5, 1e3, 10.0);
  cfg.steps = 5;
  cfg.burn_in = 0;
  const auto tr = run_chain(f.w_star, f.sampling, obs, cfg);
  CHECK(tr.invalid_count() == 1);
  CHECK_FALSE(tr.rows[2].valid);
  CHECK(tr.rows[1].valid);
}

TEST_CASE("trace CSV and binary round trips") {
  TraceMatrix t;
  t.values.resize(3, 4);
  t.values << 0.1, 1.0 / 3.0, 2.5e-300, 7, -0.0, 1e10, 3.14159265358979, 0, 5, 6, 7, 8;
  t.rows = {{"trusted:4", Provenance::clean, 3, 3, true},
            {"test-backdoor:9", Provenance::backdoor, 0, 0, true},
            {"test-ood:1", Provenance::ood, 7, 2, true}};
  const std::string csv = trace_csv(t);
  CHECK(csv.rfind("sample_id,provenance,target_label,t0,t1,t2,t3\ntrusted:4,clean,3,0.10000000000000001,", 0) == 0);
  const auto back = parse_trace_csv(csv);
  CHECK(back.values == t.values);
  CHECK(back.rows[1].sample_id == "test-backdoor:9");
  CHECK(back.rows[2].provenance == Provenance::ood);
  CHECK(trace_csv(back) == csv);

  const auto bytes = encode_traces(t);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MADT");
  const auto dec = decode_traces(bytes);
  CHECK(dec.values == t.values);
  CHECK(dec.rows[2].label == 2);
  CHECK(back.rows[2].label == 7);
  CHECK(encode_traces(dec) == bytes);
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_traces(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_traces(bad), FormatError);
  CHECK_THROWS_AS(parse_trace_csv("id,x\n"), FormatError);
  CHECK_THROWS_AS(parse_trace_csv("sample_id,provenance,target_label,t0\na,clean,1,zz\n"), FormatError);

  const auto sub = t.select_rows(std::vector<std::size_t>{2, 0});
  CHECK(sub.rows[0].sample_id == "test-ood:1");
  CHECK(t.first_draws(2).draws() == 2);
  CHECK(t.rows_with_prefix("test").size() == 2);
}
