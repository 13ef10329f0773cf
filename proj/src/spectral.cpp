#include "mad/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include <Eigen/Eigenvalues>

#include "bytes.hpp"
#include "mad/error.hpp"
#include "mad/rng.hpp"

namespace mad {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(SpectrumSource s) { return s == SpectrumSource::dense ? "dense" : "lanczos"; }

namespace {

Spectrum from_ascending(const VectorXd& vals, const MatrixXd& vecs, Index k) {
  Spectrum s;
  const Index n = vals.size();
  s.values.resize(k);
  s.vectors.resize(vecs.rows(), k);
  for (Index i = 0; i < k; ++i) {
    s.values(i) = vals(n - 1 - i);
    s.vectors.col(i) = vecs.col(n - 1 - i);
  }
  return s;
}

void check_complete(const Spectrum& s, const char* what) {
  if (!s.complete()) throw ParameterError(std::string(what) + " needs a complete spectrum");
}

}  // namespace

Spectrum eigendecompose(const MatrixXd& h) {
  if (h.rows() != h.cols() || h.rows() == 0) throw InputError("eigendecompose needs a non-empty square matrix");
  if (!h.allFinite()) throw InputError("matrix has non-finite entries");
  const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
  const double asym = (h - h.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-5 * scale) throw InputError("matrix is not symmetric (max |H - H^T| = " + std::to_string(asym) + ")");
  const MatrixXd sym = 0.5 * (h + h.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw InputError("eigensolver failed");
  Spectrum s = from_ascending(es.eigenvalues(), es.eigenvectors(), h.rows());
  s.source = SpectrumSource::dense;
  return s;
}

Spectrum lanczos_topk(const std::function<VectorXd(const VectorXd&)>& hvp, Index d, int k, int iters,
                      std::uint64_t seed) {
  if (k < 1 || k > iters || Index(iters) > d) throw ParameterError("lanczos needs 1 <= k <= iters <= d");
  Rng rng = make_rng(seed, 0x1a2c);
  std::normal_distribution<double> normal;
  MatrixXd q(d, iters);
  VectorXd alpha(iters), beta = VectorXd::Zero(iters);

  auto fresh = [&](Index j) {
    VectorXd v(d);
    for (;;) {
      for (Index i = 0; i < d; ++i) v(i) = normal(rng);
      for (int pass = 0; pass < 2; ++pass) v -= q.leftCols(j) * (q.leftCols(j).transpose() * v);
      const double n = v.norm();
      if (n > 1e-8) return VectorXd(v / n);
    }
  };

  q.col(0) = fresh(0);
  double hnorm = 0;
  for (int j = 0; j < iters; ++j) {
    VectorXd w = hvp(q.col(j));
    if (w.size() != d) throw InputError("hvp returned a vector of the wrong size");
    alpha(j) = q.col(j).dot(w);
    for (int pass = 0; pass < 2; ++pass) w -= q.leftCols(j + 1) * (q.leftCols(j + 1).transpose() * w);
    hnorm = std::max(hnorm, std::abs(alpha(j)));
    if (j + 1 == iters) break;
    const double b = w.norm();
    hnorm = std::max(hnorm, b);
    if (b <= 1e-10 * std::max(1.0, hnorm)) {
      // invariant subspace found; restart in the complement
      beta(j) = 0;
      q.col(j + 1) = fresh(j + 1);
    } else {
      beta(j) = b;
      q.col(j + 1) = w / b;
    }
  }

  MatrixXd t = MatrixXd::Zero(iters, iters);
  for (int j = 0; j < iters; ++j) {
    t(j, j) = alpha(j);
    if (j + 1 < iters) t(j, j + 1) = t(j + 1, j) = beta(j);
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(t);
  Spectrum ritz = from_ascending(es.eigenvalues(), es.eigenvectors(), k);
  Spectrum s;
  s.source = SpectrumSource::lanczos;
  s.values = ritz.values;
  s.vectors = q * ritz.vectors;
  s.residuals.resize(k);
  for (int i = 0; i < k; ++i) {
    s.vectors.col(i).normalize();
    const VectorXd r = hvp(s.vectors.col(i)) - s.values(i) * s.vectors.col(i);
    const double denom = std::max(std::abs(s.values(i)), std::numeric_limits<double>::min());
    s.residuals(i) = r.norm() / denom;
    if (!(s.residuals(i) < 1e-3))
      throw ParameterError("Ritz pair " + std::to_string(i + 1) + " not converged (relative residual " +
                           std::to_string(s.residuals(i)) + "); increase iters");
  }
  return s;
}

VectorXd probe_weights(const VectorXd& eigenvalues, double beta, double gamma) {
  if (!(beta > 0) || !(gamma > 0)) throw ParameterError("probe weights need beta > 0 and gamma > 0");
  VectorXd sigma = (beta * eigenvalues.array() + gamma).inverse().matrix();
  for (Index i = 0; i < sigma.size(); ++i)
    if (!(sigma(i) > 0) || !std::isfinite(sigma(i)))
      throw ParameterError("beta * lambda + gamma must be positive for every eigenvalue");
  return sigma;
}

EnergyProfile energy_distribution(const VectorXd& g, const Spectrum& spectrum) {
  check_complete(spectrum, "energy_distribution");
  if (g.size() != spectrum.dim()) throw InputError("gradient size does not match spectrum");
  const double norm = g.norm();
  if (!(norm > 1e-12)) throw DegenerateGradient("gradient norm " + std::to_string(norm) + " is too small");
  EnergyProfile p;
  p.norm = norm;
  p.mu = (spectrum.vectors.transpose() * (g / norm)).array().square().matrix();
  p.mu /= p.mu.sum();
  return p;
}

EnergyProfile mean_profile(std::span<const EnergyProfile> profiles) {
  if (profiles.empty()) throw InputError("mean_profile of an empty population");
  EnergyProfile m;
  m.mu = VectorXd::Zero(profiles.front().mu.size());
  for (const auto& p : profiles) {
    if (p.mu.size() != m.mu.size()) throw InputError("energy profiles differ in length");
    m.mu += p.mu;
    m.norm += p.norm;
  }
  m.mu /= double(profiles.size());
  m.norm /= double(profiles.size());
  return m;
}

double weighted_self_energy(const VectorXd& mu, const VectorXd& sigma) {
  if (mu.size() != sigma.size()) throw InputError("mu and sigma differ in length");
  return sigma.dot(mu);
}

VectorXd alignment(const VectorXd& g, const VectorXd& g2, const Spectrum& spectrum) {
  if (g.size() != spectrum.dim() || g2.size() != spectrum.dim()) throw InputError("gradient size does not match spectrum");
  const VectorXd a = spectrum.vectors.transpose() * g;
  const VectorXd b = spectrum.vectors.transpose() * g2;
  VectorXd out(a.size());
  for (Index i = 0; i < a.size(); ++i) {
    const double p = a(i) * b(i);
    out(i) = p > 0 ? 1.0 : (p < 0 ? -1.0 : 0.0);
  }
  return out;
}

double bhattacharyya_weighted(const VectorXd& mu, const VectorXd& mu2, const VectorXd& sigma, const VectorXd& alpha) {
  if (mu.size() != mu2.size() || mu.size() != sigma.size() || mu.size() != alpha.size())
    throw InputError("overlap inputs differ in length");
  return (sigma.array() * alpha.array() * (mu.array() * mu2.array()).sqrt()).sum();
}

namespace {

void finish(DetectionConditionReport& r) {
  r.A = r.S_backdoor / r.S_clean;
  r.R = r.B_trusted_backdoor == 0 ? std::numeric_limits<double>::infinity() : r.B_trusted_clean / r.B_trusted_backdoor;
  r.product = std::isinf(r.R) ? r.R : r.R * r.R * r.A;
  r.condition = r.product > 1;
  if (r.has_empirical) {
    r.R_emp = r.B_trusted_backdoor_emp == 0 ? std::numeric_limits<double>::infinity()
                                            : r.B_trusted_clean_emp / r.B_trusted_backdoor_emp;
    r.product_emp = std::isinf(r.R_emp) ? r.R_emp : r.R_emp * r.R_emp * r.A;
    r.condition_emp = r.product_emp > 1;
  }
}

}  // namespace

DetectionConditionReport detection_condition(const VectorXd& mu_trusted, const VectorXd& mu_clean,
                                             const VectorXd& mu_backdoor, const VectorXd& sigma, double beta,
                                             double gamma) {
  const VectorXd ones = VectorXd::Ones(sigma.size());
  DetectionConditionReport r;
  r.beta = beta;
  r.gamma = gamma;
  r.S_trusted = weighted_self_energy(mu_trusted, sigma);
  r.S_clean = weighted_self_energy(mu_clean, sigma);
  r.S_backdoor = weighted_self_energy(mu_backdoor, sigma);
  if (!(r.S_clean > 0) || !(r.S_backdoor > 0)) throw ParameterError("self-energies must be positive");
  r.B_trusted_clean = bhattacharyya_weighted(mu_trusted, mu_clean, sigma, ones);
  r.B_trusted_backdoor = bhattacharyya_weighted(mu_trusted, mu_backdoor, sigma, ones);
  finish(r);
  return r;
}

DetectionConditionReport detection_condition_from_gradients(const MatrixXd& g_trusted, const MatrixXd& g_clean,
                                                            const MatrixXd& g_backdoor, const Spectrum& spectrum,
                                                            double beta, double gamma) {
  check_complete(spectrum, "detection_condition_from_gradients");
  const VectorXd sigma = probe_weights(spectrum, beta, gamma);
  struct Population {
    VectorXd mu;
    VectorXd mean_unit;  // mean of V^T g / ||g||
  };
  auto summarize = [&](const MatrixXd& g) {
    if (g.cols() == 0) throw InputError("empty gradient population");
    if (g.rows() != spectrum.dim()) throw InputError("gradient size does not match spectrum");
    Population p;
    p.mu = VectorXd::Zero(spectrum.size());
    p.mean_unit = VectorXd::Zero(spectrum.size());
    for (Index j = 0; j < g.cols(); ++j) {
      const double norm = g.col(j).norm();
      if (!(norm > 1e-12)) throw DegenerateGradient("gradient " + std::to_string(j) + " has zero norm");
      const VectorXd c = spectrum.vectors.transpose() * (g.col(j) / norm);
      p.mu += c.array().square().matrix() / c.squaredNorm();
      p.mean_unit += c;
    }
    p.mu /= double(g.cols());
    p.mean_unit /= double(g.cols());
    return p;
  };
  const Population t = summarize(g_trusted), c = summarize(g_clean), b = summarize(g_backdoor);
  DetectionConditionReport r = detection_condition(t.mu, c.mu, b.mu, sigma, beta, gamma);
  r.has_empirical = true;
  r.B_trusted_clean_emp = (sigma.array() * t.mean_unit.array() * c.mean_unit.array()).sum();
  r.B_trusted_backdoor_emp = (sigma.array() * t.mean_unit.array() * b.mean_unit.array()).sum();
  finish(r);
  return r;
}

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
  if (std::isnan(v)) return "\"nan\"";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_json(const DetectionConditionReport& r) {
  std::string s = "{\n";
  auto field = [&](const char* k, const std::string& v, bool last = false) {
    s += "  \"";
    s += k;
    s += "\": " + v + (last ? "\n" : ",\n");
  };
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  field("beta", num(r.beta));
  field("gamma", num(r.gamma));
  field("S_trusted", num(r.S_trusted));
  field("S_clean", num(r.S_clean));
  field("S_backdoor", num(r.S_backdoor));
  field("B_trusted_clean", num(r.B_trusted_clean));
  field("B_trusted_backdoor", num(r.B_trusted_backdoor));
  field("R_sigma", num(r.R));
  field("A_sigma", num(r.A));
  field("R2A", num(r.product));
  field("condition", flag(r.condition), !r.has_empirical);
  if (r.has_empirical) {
    field("empirical_B_trusted_clean", num(r.B_trusted_clean_emp));
    field("empirical_B_trusted_backdoor", num(r.B_trusted_backdoor_emp));
    field("empirical_R_sigma", num(r.R_emp));
    field("empirical_R2A", num(r.product_emp));
    field("empirical_condition", flag(r.condition_emp), true);
  }
  s += "}\n";
  return s;
}

double laplace_covariance(const VectorXd& g, const VectorXd& g2, const Spectrum& spectrum, double beta,
                          double gamma) {
  if (g.size() != spectrum.dim() || g2.size() != spectrum.dim()) throw InputError("gradient size does not match spectrum");
  const VectorXd sigma = probe_weights(spectrum, beta, gamma);
  const VectorXd a = spectrum.vectors.transpose() * g;
  const VectorXd b = spectrum.vectors.transpose() * g2;
  double out = (sigma.array() * a.array() * b.array()).sum();
  if (!spectrum.complete()) out += (g.dot(g2) - a.dot(b)) / gamma;
  return out;
}

VectorXd cumulative_energy(const VectorXd& mu) {
  VectorXd c(mu.size());
  double acc = 0;
  for (Index i = 0; i < mu.size(); ++i) c(i) = acc += mu(i);
  return c;
}

int k_at_energy(const VectorXd& mu, double threshold) {
  if (mu.size() == 0) throw InputError("empty energy profile");
  if (!(threshold > 0) || threshold > 1) throw ParameterError("energy threshold must lie in (0, 1]");
  const VectorXd c = cumulative_energy(mu);
  const double target = threshold * c(c.size() - 1) * (1 - 1e-12);
  for (Index i = 0; i < c.size(); ++i)
    if (c(i) >= target) return int(i + 1);
  return int(c.size());
}

int k_at_eigenvalue_mass(const VectorXd& eigenvalues, double threshold) {
  const VectorXd pos = eigenvalues.cwiseMax(0.0);
  if (!(pos.sum() > 0)) throw ParameterError("no positive eigenvalue mass");
  return k_at_energy(pos, threshold);
}

VectorXd weight_delta_energy(const VectorXd& dw, const Spectrum& spectrum) {
  check_complete(spectrum, "weight_delta_energy");
  if (dw.size() != spectrum.dim()) throw InputError("weight delta size does not match spectrum");
  const double n = dw.squaredNorm();
  if (!(n > 0)) throw DegenerateGradient("weight delta is zero");
  VectorXd c = cumulative_energy((spectrum.vectors.transpose() * dw).array().square().matrix() / n);
  return c / c(c.size() - 1);
}

VectorXd mean_alignment(const MatrixXd& coords_a, const MatrixXd& coords_b) {
  if (coords_a.rows() != coords_b.rows()) throw InputError("coordinate matrices differ in dimension");
  if (coords_a.cols() == 0 || coords_b.cols() == 0) throw InputError("empty population");
  auto signs = [](const MatrixXd& m) { return MatrixXd(m.array().sign()); };
  // mean over pairs of sign(a)sign(b) factorizes into the product of mean signs
  return (signs(coords_a).rowwise().mean().array() * signs(coords_b).rowwise().mean().array()).matrix();
}

namespace {
constexpr std::uint32_t kSpectrumVersion = 1;
}

std::vector<std::uint8_t> encode_spectrum(const Spectrum& s) {
  detail::ByteWriter w;
  w.raw("MADS", 4);
  w.u32(kSpectrumVersion);
  w.u64(std::uint64_t(s.dim()));
  w.u64(std::uint64_t(s.size()));
  w.u32(s.source == SpectrumSource::dense ? 0 : 1);
  w.f64(s.beta);
  w.f64(s.gamma);
  for (Index i = 0; i < s.size(); ++i) w.f64(s.values(i));
  for (Index j = 0; j < s.vectors.cols(); ++j)
    for (Index i = 0; i < s.vectors.rows(); ++i) w.f64(s.vectors(i, j));
  for (Index i = 0; i < s.size(); ++i) w.f64(s.residuals.size() == s.size() ? s.residuals(i) : 0.0);
  return std::move(w.bytes());
}

Spectrum decode_spectrum(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.magic(4) != "MADS") throw FormatError("bad spectrum magic", 0);
  const auto version = r.u32("version");
  if (version != kSpectrumVersion) throw FormatError("unsupported spectrum version " + std::to_string(version), 4);
  const auto d = r.u64("dimension");
  const auto k = r.u64("eigenpair count");
  if (k > d || d > (std::uint64_t(1) << 24)) throw FormatError("implausible spectrum size", 8);
  const auto at = r.pos();
  const auto src = r.u32("source");
  if (src > 1) throw FormatError("unknown spectrum source", at);
  r.need(8 * (2 + k + d * k + k), "spectrum payload");
  Spectrum s;
  s.source = src == 0 ? SpectrumSource::dense : SpectrumSource::lanczos;
  s.beta = r.f64("beta");
  s.gamma = r.f64("gamma");
  s.values.resize(Index(k));
  s.vectors.resize(Index(d), Index(k));
  s.residuals.resize(Index(k));
  for (Index i = 0; i < Index(k); ++i) s.values(i) = r.f64("eigenvalue");
  for (Index j = 0; j < Index(k); ++j)
    for (Index i = 0; i < Index(d); ++i) s.vectors(i, j) = r.f64("eigenvector");
  for (Index i = 0; i < Index(k); ++i) s.residuals(i) = r.f64("residual");
  if (r.remaining() != 0) throw FormatError("trailing bytes after spectrum", r.pos());
  return s;
}

void save_spectrum(const std::string& path, const Spectrum& s) { detail::write_file(path, encode_spectrum(s)); }

Spectrum load_spectrum(const std::string& path) { return decode_spectrum(detail::read_file(path)); }

std::string spectrum_csv(const Spectrum& s, double beta, double gamma) {
  const VectorXd sigma = probe_weights(s, beta, gamma);
  const VectorXd pos = s.values.cwiseMax(0.0);
  const double total = pos.sum();
  std::string out = "index,lambda,sigma,cumulative_mass\n";
  double acc = 0;
  char buf[128];
  for (Index i = 0; i < s.size(); ++i) {
    acc += pos(i);
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g\n", long(i + 1), s.values(i), sigma(i),
                  total > 0 ? acc / total : 0.0);
    out += buf;
  }
  return out;
}

}  // namespace mad
