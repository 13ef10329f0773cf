#include "mad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <Eigen/Cholesky>

#include "mad/error.hpp"
#include "mad/sgld.hpp"

namespace mad {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

RocResult auroc(std::span<const double> normal, std::span<const double> anomalous) {
  if (normal.empty() || anomalous.empty()) throw InputError("auroc needs non-empty normal and anomalous scores");
  for (double v : normal)
    if (std::isnan(v)) throw InputError("NaN score");
  for (double v : anomalous)
    if (std::isnan(v)) throw InputError("NaN score");

  // (score, is_normal), sorted descending so thresholds sweep from strict to permissive
  std::vector<std::pair<double, bool>> all;
  all.reserve(normal.size() + anomalous.size());
  for (double v : normal) all.emplace_back(v, true);
  for (double v : anomalous) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  const double np = double(normal.size()), na = double(anomalous.size());
  RocResult r;
  r.points.push_back({0, 0});
  double tp = 0, fp = 0, area = 0;
  for (std::size_t i = 0; i < all.size();) {
    double dtp = 0, dfp = 0;
    std::size_t j = i;
    for (; j < all.size() && all[j].first == all[i].first; ++j) (all[j].second ? dtp : dfp) += 1;
    // trapezoid over a tie block counts each tied pair as one half
    area += dfp * (tp + 0.5 * dtp);
    tp += dtp;
    fp += dfp;
    r.points.push_back({fp / na, tp / np});
    i = j;
  }
  r.auroc = area / (np * na);
  return r;
}

std::vector<double> score_values(std::span<const DetectionScore> scores) {
  std::vector<double> v;
  v.reserve(scores.size());
  for (const auto& s : scores) v.push_back(s.score);
  return v;
}

double der_value(double delta_asr, double delta_cacc) {
  return (std::max(0.0, delta_asr) - std::max(0.0, delta_cacc) + 1) / 2;
}

DerResult der(std::span<const CleanEval> clean, std::span<const BackdoorEval> backdoor, double baseline_cacc,
              double baseline_asr) {
  if (clean.empty() || backdoor.empty()) throw InputError("der needs clean and backdoor evaluations");
  if (!(baseline_cacc >= 0 && baseline_cacc <= 1) || !(baseline_asr >= 0 && baseline_asr <= 1))
    throw ParameterError("baselines must lie in [0, 1]");
  std::vector<double> thresholds = {-std::numeric_limits<double>::infinity()};
  for (const auto& c : clean) thresholds.push_back(c.score);
  for (const auto& b : backdoor) thresholds.push_back(b.score);
  thresholds.push_back(std::numeric_limits<double>::infinity());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  DerResult best;
  best.der = -1;
  for (double t : thresholds) {
    double ok = 0, hit = 0;
    for (const auto& c : clean) ok += (c.score >= t && c.correct) ? 1 : 0;
    for (const auto& b : backdoor) hit += (b.score >= t && b.hits_target) ? 1 : 0;
    DerResult r;
    r.baseline_cacc = baseline_cacc;
    r.baseline_asr = baseline_asr;
    r.post_cacc = ok / double(clean.size());
    r.post_asr = hit / double(backdoor.size());
    r.delta_asr = baseline_asr - r.post_asr;
    r.delta_cacc = baseline_cacc - r.post_cacc;
    r.der = der_value(r.delta_asr, r.delta_cacc);
    r.threshold = t;
    if (r.der > best.der) best = r;
  }
  return best;
}

MahalanobisModel fit_mahalanobis(const MatrixXd& activations, std::span<const int> labels, double shrinkage) {
  const Index dim = activations.rows(), n = activations.cols();
  if (n == 0 || Index(labels.size()) != n) throw InputError("one label per activation column is required");
  if (!(shrinkage >= 0 && shrinkage <= 1)) throw ParameterError("shrinkage must lie in [0, 1]");
  if (shrinkage == 0 && dim > n) throw ParameterError("activation dim exceeds sample count without shrinkage");

  std::map<int, std::vector<Index>> groups;
  for (Index j = 0; j < n; ++j) groups[labels[std::size_t(j)]].push_back(j);
  MahalanobisModel m;
  m.shrinkage = shrinkage;
  m.means.resize(dim, Index(groups.size()));
  MatrixXd centered(dim, n);
  Index c = 0;
  for (const auto& [label, idx] : groups) {
    VectorXd mu = VectorXd::Zero(dim);
    for (Index j : idx) mu += activations.col(j);
    mu /= double(idx.size());
    for (Index j : idx) centered.col(j) = activations.col(j) - mu;
    m.means.col(c++) = mu;
    m.classes.push_back(label);
  }
  MatrixXd cov = centered * centered.transpose() / double(n);
  const double scale = cov.trace() / double(dim);
  cov = (1 - shrinkage) * cov + shrinkage * (scale > 0 ? scale : 1.0) * MatrixXd::Identity(dim, dim);
  Eigen::LDLT<MatrixXd> ldlt(cov);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0))
    throw ParameterError("shrunk covariance is singular; increase shrinkage");
  m.precision = ldlt.solve(MatrixXd::Identity(dim, dim));
  m.precision = 0.5 * (m.precision + m.precision.transpose());
  return m;
}

MatrixXd mahalanobis_sq(const MahalanobisModel& model, const MatrixXd& activations) {
  if (activations.rows() != model.means.rows()) throw InputError("activation dim does not match the model");
  MatrixXd d(model.means.cols(), activations.cols());
  for (Index c = 0; c < model.means.cols(); ++c) {
    const MatrixXd diff = activations.colwise() - model.means.col(c);
    d.row(c) = (diff.array() * (model.precision * diff).array()).colwise().sum();
  }
  return d.cwiseMax(0.0);
}

VectorXd mahalanobis_scores(const MahalanobisModel& model, const MatrixXd& activations) {
  return -mahalanobis_sq(model, activations).colwise().minCoeff().cwiseSqrt().transpose();
}

MatrixXd penultimate_activations(const ParamVector& params, std::span<const LabeledSample> samples) {
  const auto& layers = params.arch.layers;
  std::size_t last = layers.size();
  for (std::size_t i = layers.size(); i-- > 0;)
    if (std::holds_alternative<Dense>(layers[i])) {
      last = i;
      break;
    }
  if (last == layers.size()) throw DescriptorError("architecture has no dense output layer");
  Network net(params.arch);
  return net.activations(params.values, stack_inputs(samples), last);
}

std::vector<DetectionScore> mahalanobis_baseline(const ParamVector& params, std::span<const LabeledSample> trusted,
                                                 std::span<const LabeledSample> test, double shrinkage) {
  const auto model = fit_mahalanobis(penultimate_activations(params, trusted), labels_of(trusted), shrinkage);
  const VectorXd s = mahalanobis_scores(model, penultimate_activations(params, test));
  std::vector<DetectionScore> out;
  out.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i)
    out.push_back({sample_key(test[i]), test[i].provenance, Method::mahalanobis, s(Index(i))});
  return out;
}

}  // namespace mad
