#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "mad/attribution.hpp"
#include "mad/model.hpp"
#include "mad/sample.hpp"

namespace mad {

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
};

/// Higher scores are treated as more normal: the "positive" class is the
/// normal population, so a point is (P(anomalous accepted), P(normal accepted)).
struct RocResult {
  double auroc = 0;
  std::vector<RocPoint> points;  ///< from (0,0) to (1,1), one per distinct threshold
  bool positive_is_normal = true;
};

/// Mann-Whitney form: P(normal > anomalous) + 0.5 P(tie).
RocResult auroc(std::span<const double> normal, std::span<const double> anomalous);
std::vector<double> score_values(std::span<const DetectionScore> scores);

struct CleanEval {
  double score = 0;
  bool correct = false;
};
struct BackdoorEval {
  double score = 0;
  bool hits_target = false;
};

struct DerResult {
  double baseline_cacc = 0, baseline_asr = 0;
  double post_cacc = 0, post_asr = 0;
  double delta_asr = 0, delta_cacc = 0;
  double der = 0;
  double threshold = 0;  ///< samples with score >= threshold are accepted
};

/// Sweeps every threshold (reject-all, accept-all and each distinct score);
/// rejected clean samples count as wrong and rejected backdoor samples as
/// failed attacks. Ties in DER keep the most permissive threshold.
DerResult der(std::span<const CleanEval> clean, std::span<const BackdoorEval> backdoor, double baseline_cacc,
              double baseline_asr);
double der_value(double delta_asr, double delta_cacc);

struct MahalanobisModel {
  Eigen::MatrixXd means;  ///< dim x classes present
  std::vector<int> classes;
  Eigen::MatrixXd precision;
  double shrinkage = 0.05;
};

/// Class means and a shared covariance shrunk toward (tr / dim) I.
MahalanobisModel fit_mahalanobis(const Eigen::MatrixXd& activations, std::span<const int> labels,
                                 double shrinkage = 0.05);
/// Squared distance to each class mean, one row per class.
Eigen::MatrixXd mahalanobis_sq(const MahalanobisModel& model, const Eigen::MatrixXd& activations);
/// Negated distance to the nearest class mean.
Eigen::VectorXd mahalanobis_scores(const MahalanobisModel& model, const Eigen::MatrixXd& activations);
/// Activations entering the final dense layer.
Eigen::MatrixXd penultimate_activations(const ParamVector& params, std::span<const LabeledSample> samples);
/// Fits on trusted penultimate activations and scores the test samples.
std::vector<DetectionScore> mahalanobis_baseline(const ParamVector& params, std::span<const LabeledSample> trusted,
                                                 std::span<const LabeledSample> test, double shrinkage = 0.05);

}  // namespace mad
