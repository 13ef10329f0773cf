#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mad/sgld.hpp"

namespace mad {

enum class Measure { cov, pearson, ccc };
std::string to_string(Measure m);
Measure measure_from_string(const std::string& s);

/// mahalanobis is the activation-space baseline; it is not computed from traces.
enum class Method { mean, clc, cccc, knn_offline, mahalanobis };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Variances at or below tol * max(mean^2, 0) count as degenerate; a trace that
/// is constant up to rounding is caught at any scale.
inline constexpr double kDegenerateTol = 1e-12;

/// Sample covariance (divisor n - 1).
double covariance(std::span<const double> a, std::span<const double> b);
/// Throws DegenerateTrace when either trace is (numerically) constant.
double pearson(std::span<const double> a, std::span<const double> b);
/// Lin's concordance 2 s12 / (s1^2 + s2^2 + (m1 - m2)^2) with population moments.
double ccc(std::span<const double> a, std::span<const double> b);

struct CouplingMatrix {
  Eigen::MatrixXd values;  ///< rows: test samples, cols: trusted samples
  Measure measure = Measure::pearson;
  std::vector<TraceRow> rows;
  std::vector<TraceRow> cols;
  std::vector<std::string> excluded;  ///< invalid trace rows dropped on input
  std::size_t degenerate = 0;         ///< pairs mapped to 0 due to a constant trace
};

/// Invalid rows (TraceRow::valid == false) of either input are dropped.
CouplingMatrix coupling_matrix(const TraceMatrix& test, const TraceMatrix& trusted, Measure measure);

double agg_mean(std::span<const double> row);
/// Max over classes of the mean coupling within that class.
double agg_clc(std::span<const double> row, std::span<const int> trusted_labels);

struct DetectionScore {
  std::string sample_id;
  Provenance provenance = Provenance::clean;
  Method method = Method::mean;
  double score = 0;  ///< higher = more normal
};

struct AttributionReport {
  std::vector<std::string> excluded;
  std::size_t degenerate = 0;
};

/// One score per valid test row, in input order. CLC groups trusted samples by
/// TraceRow::label.
std::vector<DetectionScore> detect(const TraceMatrix& test, const TraceMatrix& trusted, Measure measure,
                                   Method aggregation, AttributionReport* report = nullptr);
/// mean = pearson/mean, clc = pearson/clc, cccc = ccc/clc, knn_offline = offline_knn_score(k = 10).
std::vector<DetectionScore> detect(const TraceMatrix& test, const TraceMatrix& trusted, Method method,
                                   AttributionReport* report = nullptr);

/// d = 1 - pearson over all rows of `traces` with same-predicted-class pairs set
/// to +inf (the diagonal stays 0).
Eigen::MatrixXd masked_distance_matrix(const TraceMatrix& traces);

/// Negated mean masked distance to the k nearest trusted samples whose
/// predicted class differs. Throws ParameterError when fewer than k are eligible.
std::vector<DetectionScore> offline_knn_score(const TraceMatrix& test, const TraceMatrix& trusted, int k = 10,
                                              AttributionReport* report = nullptr);

/// CSV: sample_id,provenance,method,score (17 significant digits).
std::string scores_csv(std::span<const DetectionScore> scores);
std::vector<DetectionScore> parse_scores_csv(const std::string& text);

}  // namespace mad
