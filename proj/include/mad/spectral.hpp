#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mad {

enum class SpectrumSource { dense, lanczos };
std::string to_string(SpectrumSource s);

/// Eigenpairs sorted by eigenvalue, largest first. A Lanczos spectrum holds
/// only the top-k pairs.
struct Spectrum {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;  ///< d x k, orthonormal columns
  SpectrumSource source = SpectrumSource::dense;
  Eigen::VectorXd residuals;  ///< ||Hv - lambda v|| / |lambda| (Lanczos only)
  double beta = 0, gamma = 0;  ///< probe parameters recorded with the spectrum

  Eigen::Index dim() const { return vectors.rows(); }
  Eigen::Index size() const { return values.size(); }
  bool complete() const { return values.size() == vectors.rows(); }
};

/// Full decomposition of a symmetric matrix. Throws InputError when
/// max|H - H^T| exceeds 1e-5 * max(1, max|H|).
Spectrum eigendecompose(const Eigen::MatrixXd& h);

/// Top-k Ritz pairs from `iters` Lanczos steps with full reorthogonalization.
/// Requires 1 <= k <= iters <= d. Throws ParameterError when any Ritz pair
/// misses the 1e-3 relative residual.
Spectrum lanczos_topk(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& hvp, Eigen::Index d, int k,
                      int iters, std::uint64_t seed);

/// sigma_i = 1 / (beta lambda_i + gamma).
Eigen::VectorXd probe_weights(const Eigen::VectorXd& eigenvalues, double beta, double gamma);
inline Eigen::VectorXd probe_weights(const Spectrum& s, double beta, double gamma) {
  return probe_weights(s.values, beta, gamma);
}

struct EnergyProfile {
  Eigen::VectorXd mu;  ///< nonnegative, sums to 1
  double norm = 0;     ///< ||g||
};

/// mu_i = (v_i . g)^2 / ||g||^2 over a complete spectrum. Throws
/// DegenerateGradient when ||g|| <= 1e-12.
EnergyProfile energy_distribution(const Eigen::VectorXd& g, const Spectrum& spectrum);
/// Elementwise mean of per-sample profiles.
EnergyProfile mean_profile(std::span<const EnergyProfile> profiles);

double weighted_self_energy(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma);
/// sign(g_i g'_i) of the eigenbasis components.
Eigen::VectorXd alignment(const Eigen::VectorXd& g, const Eigen::VectorXd& g2, const Spectrum& spectrum);
double bhattacharyya_weighted(const Eigen::VectorXd& mu, const Eigen::VectorXd& mu2, const Eigen::VectorXd& sigma,
                              const Eigen::VectorXd& alpha);

struct DetectionConditionReport {
  double beta = 0, gamma = 0;
  double S_trusted = 0, S_clean = 0, S_backdoor = 0;
  // all alignments taken as +1
  double B_trusted_clean = 0, B_trusted_backdoor = 0;
  double R = 0, A = 0, product = 0;
  bool condition = false;
  // measured alignments, averaged over sample pairs
  bool has_empirical = false;
  double B_trusted_clean_emp = 0, B_trusted_backdoor_emp = 0;
  double R_emp = 0, product_emp = 0;
  bool condition_emp = false;
};

/// Positive-alignment report from population energy profiles.
DetectionConditionReport detection_condition(const Eigen::VectorXd& mu_trusted, const Eigen::VectorXd& mu_clean,
                                             const Eigen::VectorXd& mu_backdoor, const Eigen::VectorXd& sigma,
                                             double beta = 0, double gamma = 0);

/// Both variants from per-sample gradients (columns of each matrix) and a
/// complete spectrum. Population profiles are means of per-sample profiles;
/// the empirical overlap is the mean over pairs of sum_i sigma_i alpha_i sqrt(mu_i mu'_i).
DetectionConditionReport detection_condition_from_gradients(const Eigen::MatrixXd& g_trusted,
                                                            const Eigen::MatrixXd& g_clean,
                                                            const Eigen::MatrixXd& g_backdoor,
                                                            const Spectrum& spectrum, double beta, double gamma);

/// JSON object with every scalar at 17 significant digits; infinities as "inf".
std::string to_json(const DetectionConditionReport& r);

/// g^T (beta H + gamma I)^(-1) g' in the eigenbasis. For a partial spectrum
/// the orthogonal complement is weighted by 1/gamma.
double laplace_covariance(const Eigen::VectorXd& g, const Eigen::VectorXd& g2, const Spectrum& spectrum, double beta,
                          double gamma);

/// Cumulative sums of mu in eigenvalue order.
Eigen::VectorXd cumulative_energy(const Eigen::VectorXd& mu);
/// Smallest k (1-based) whose cumulative energy reaches `threshold`.
int k_at_energy(const Eigen::VectorXd& mu, double threshold);
/// Number of leading eigenvalues holding `threshold` of the positive eigenvalue mass.
int k_at_eigenvalue_mass(const Eigen::VectorXd& eigenvalues, double threshold);
/// Cumulative squared-projection fraction of dw over eigenvectors, sharp to flat.
Eigen::VectorXd weight_delta_energy(const Eigen::VectorXd& dw, const Spectrum& spectrum);

/// Mean of sign(a_i b_i) over all column pairs, per eigen-direction.
/// Inputs are eigenbasis coordinates (rows: directions, columns: samples).
Eigen::VectorXd mean_alignment(const Eigen::MatrixXd& coords_a, const Eigen::MatrixXd& coords_b);

/// "MADS", u32 version, u64 d, u64 k, u32 source, f64 beta, f64 gamma,
/// k x f64 eigenvalues, d*k x f64 vectors (column-major), k x f64 residuals.
std::vector<std::uint8_t> encode_spectrum(const Spectrum& s);
Spectrum decode_spectrum(std::span<const std::uint8_t> bytes);
void save_spectrum(const std::string& path, const Spectrum& s);
Spectrum load_spectrum(const std::string& path);
/// CSV: index,lambda,sigma,cumulative_mass.
std::string spectrum_csv(const Spectrum& s, double beta, double gamma);

}  // namespace mad
