#include "mad/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <sstream>

namespace mad {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(Measure m) {
  switch (m) {
    case Measure::cov: return "cov";
    case Measure::pearson: return "pearson";
    case Measure::ccc: return "ccc";
  }
  return "pearson";
}

Measure measure_from_string(const std::string& s) {
  if (s == "cov") return Measure::cov;
  if (s == "pearson") return Measure::pearson;
  if (s == "ccc") return Measure::ccc;
  throw ParameterError("unknown coupling measure '" + s + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::mean: return "mean";
    case Method::clc: return "clc";
    case Method::cccc: return "cccc";
    case Method::knn_offline: return "knn_offline";
    case Method::mahalanobis: return "mahalanobis";
  }
  return "mean";
}

Method method_from_string(const std::string& s) {
  if (s == "mean") return Method::mean;
  if (s == "clc") return Method::clc;
  if (s == "cccc") return Method::cccc;
  if (s == "knn_offline") return Method::knn_offline;
  if (s == "mahalanobis") return Method::mahalanobis;
  throw ParameterError("unknown detection method '" + s + "'");
}

namespace {

struct Moments {
  double mean = 0;
  double ss = 0;  // sum of squared deviations
};

Moments moments(std::span<const double> a) {
  Moments m;
  for (double v : a) m.mean += v;
  m.mean /= double(a.size());
  for (double v : a) m.ss += (v - m.mean) * (v - m.mean);
  return m;
}

bool degenerate(double var, double mean) { return var <= kDegenerateTol * mean * mean; }

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("trace lengths differ");
  if (a.size() < 2) throw InputError("traces need at least two draws");
}

double cross(std::span<const double> a, std::span<const double> b, double ma, double mb) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  return s;
}

}  // namespace

double covariance(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  const auto ma = moments(a), mb = moments(b);
  return cross(a, b, ma.mean, mb.mean) / double(a.size() - 1);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  const auto ma = moments(a), mb = moments(b);
  const double n = double(a.size());
  if (degenerate(ma.ss / n, ma.mean) || degenerate(mb.ss / n, mb.mean))
    throw DegenerateTrace("trace has zero variance");
  const double r = cross(a, b, ma.mean, mb.mean) / std::sqrt(ma.ss * mb.ss);
  return std::clamp(r, -1.0, 1.0);
}

double ccc(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  const auto ma = moments(a), mb = moments(b);
  const double n = double(a.size());
  if (degenerate(ma.ss / n, ma.mean) || degenerate(mb.ss / n, mb.mean))
    throw DegenerateTrace("trace has zero variance");
  const double s12 = cross(a, b, ma.mean, mb.mean) / n;
  const double d = ma.mean - mb.mean;
  return std::clamp(2 * s12 / (ma.ss / n + mb.ss / n + d * d), -1.0, 1.0);
}

namespace {

struct Prepared {
  MatrixXd centered;  // rows centered
  VectorXd mean, ss;
  std::vector<bool> flat;
  std::vector<TraceRow> rows;
};

Prepared prepare(const TraceMatrix& t, std::vector<std::string>& excluded) {
  Prepared p;
  std::vector<Index> keep;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.rows[i].valid && t.values.row(Index(i)).allFinite()) {
      keep.push_back(Index(i));
      p.rows.push_back(t.rows[i]);
    } else {
      excluded.push_back(t.rows[i].sample_id);
    }
  }
  const Index n = t.values.cols();
  p.centered.resize(Index(keep.size()), n);
  p.mean.resize(Index(keep.size()));
  p.ss.resize(Index(keep.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto row = t.values.row(keep[r]);
    const double m = row.mean();
    p.centered.row(Index(r)) = row.array() - m;
    p.mean(Index(r)) = m;
    p.ss(Index(r)) = p.centered.row(Index(r)).squaredNorm();
    p.flat.push_back(degenerate(p.ss(Index(r)) / double(n), m));
  }
  return p;
}

}  // namespace

CouplingMatrix coupling_matrix(const TraceMatrix& test, const TraceMatrix& trusted, Measure measure) {
  if (test.draws() != trusted.draws()) throw InputError("test and trusted traces differ in length");
  if (test.draws() < 2) throw InputError("traces need at least two draws");
  CouplingMatrix out;
  out.measure = measure;
  const Prepared a = prepare(test, out.excluded);
  const Prepared b = prepare(trusted, out.excluded);
  out.rows = a.rows;
  out.cols = b.rows;
  const double n = double(test.draws());
  const MatrixXd dots = a.centered * b.centered.transpose();
  out.values.resize(dots.rows(), dots.cols());
  for (Index j = 0; j < dots.cols(); ++j)
    for (Index i = 0; i < dots.rows(); ++i) {
      if (measure == Measure::cov) {
        out.values(i, j) = dots(i, j) / (n - 1);
        continue;
      }
      if (a.flat[std::size_t(i)] || b.flat[std::size_t(j)]) {
        out.values(i, j) = 0.0;
        ++out.degenerate;
        continue;
      }
      double v;
      if (measure == Measure::pearson) {
        v = dots(i, j) / std::sqrt(a.ss(i) * b.ss(j));
      } else {
        const double d = a.mean(i) - b.mean(j);
        v = 2 * dots(i, j) / n / (a.ss(i) / n + b.ss(j) / n + d * d);
      }
      out.values(i, j) = std::clamp(v, -1.0, 1.0);
    }
  return out;
}

double agg_mean(std::span<const double> row) {
  if (row.empty()) throw InputError("empty coupling row");
  double s = 0;
  for (double v : row) s += v;
  return s / double(row.size());
}

double agg_clc(std::span<const double> row, std::span<const int> trusted_labels) {
  if (row.empty()) throw InputError("empty coupling row");
  if (row.size() != trusted_labels.size()) throw InputError("one label per trusted sample required");
  std::map<int, std::pair<double, int>> by_class;
  for (std::size_t i = 0; i < row.size(); ++i) {
    auto& [sum, count] = by_class[trusted_labels[i]];
    sum += row[i];
    ++count;
  }
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [label, acc] : by_class) best = std::max(best, acc.first / acc.second);
  return best;
}

std::vector<DetectionScore> detect(const TraceMatrix& test, const TraceMatrix& trusted, Measure measure,
                                   Method aggregation, AttributionReport* report) {
  if (aggregation != Method::mean && aggregation != Method::clc && aggregation != Method::cccc)
    throw ParameterError("aggregation must be mean, clc or cccc");
  const CouplingMatrix c = coupling_matrix(test, trusted, measure);
  if (c.cols.empty()) throw InputError("no valid trusted traces");
  std::vector<int> labels;
  for (const auto& r : c.cols) labels.push_back(r.label);
  std::vector<DetectionScore> out;
  std::vector<double> row(std::size_t(c.values.cols()));
  for (Index i = 0; i < c.values.rows(); ++i) {
    for (Index j = 0; j < c.values.cols(); ++j) row[std::size_t(j)] = c.values(i, j);
    DetectionScore s;
    s.sample_id = c.rows[std::size_t(i)].sample_id;
    s.provenance = c.rows[std::size_t(i)].provenance;
    s.method = aggregation;
    s.score = aggregation == Method::mean ? agg_mean(row) : agg_clc(row, labels);
    out.push_back(std::move(s));
  }
  if (report) {
    report->excluded.insert(report->excluded.end(), c.excluded.begin(), c.excluded.end());
    report->degenerate += c.degenerate;
  }
  return out;
}

std::vector<DetectionScore> detect(const TraceMatrix& test, const TraceMatrix& trusted, Method method,
                                   AttributionReport* report) {
  switch (method) {
    case Method::mean: return detect(test, trusted, Measure::pearson, Method::mean, report);
    case Method::clc: return detect(test, trusted, Measure::pearson, Method::clc, report);
    case Method::cccc: return detect(test, trusted, Measure::ccc, Method::cccc, report);
    case Method::knn_offline: return offline_knn_score(test, trusted, 10, report);
    case Method::mahalanobis: throw ParameterError("mahalanobis scores activations, not traces");
  }
  return {};
}

MatrixXd masked_distance_matrix(const TraceMatrix& traces) {
  const CouplingMatrix c = coupling_matrix(traces, traces, Measure::pearson);
  if (!c.excluded.empty()) throw InputError("invalid traces in offline matrix");
  MatrixXd d(c.values.rows(), c.values.cols());
  const double inf = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < d.rows(); ++i) {
    d(i, i) = 0.0;
    for (Index j = i + 1; j < d.cols(); ++j) {
      const bool same = c.rows[std::size_t(i)].target_label == c.cols[std::size_t(j)].target_label;
      d(i, j) = d(j, i) = same ? inf : 1.0 - c.values(i, j);
    }
  }
  return d;
}

std::vector<DetectionScore> offline_knn_score(const TraceMatrix& test, const TraceMatrix& trusted, int k,
                                              AttributionReport* report) {
  if (k < 1) throw ParameterError("k must be >= 1");
  const CouplingMatrix c = coupling_matrix(test, trusted, Measure::pearson);
  std::vector<DetectionScore> out;
  std::vector<double> dist;
  for (Index i = 0; i < c.values.rows(); ++i) {
    dist.clear();
    const int yi = c.rows[std::size_t(i)].target_label;
    for (Index j = 0; j < c.values.cols(); ++j)
      if (c.cols[std::size_t(j)].target_label != yi) dist.push_back(1.0 - c.values(i, j));
    if (dist.size() < std::size_t(k))
      throw ParameterError("fewer than k trusted samples with a different predicted class");
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    double s = 0;
    for (int j = 0; j < k; ++j) s += dist[std::size_t(j)];
    DetectionScore d;
    d.sample_id = c.rows[std::size_t(i)].sample_id;
    d.provenance = c.rows[std::size_t(i)].provenance;
    d.method = Method::knn_offline;
    d.score = -s / k;
    out.push_back(std::move(d));
  }
  if (report) {
    report->excluded.insert(report->excluded.end(), c.excluded.begin(), c.excluded.end());
    report->degenerate += c.degenerate;
  }
  return out;
}

std::string scores_csv(std::span<const DetectionScore> scores) {
  std::string out = "sample_id,provenance,method,score\n";
  char buf[40];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.17g", s.score);
    out += s.sample_id + ',' + to_string(s.provenance) + ',' + to_string(s.method) + ',' + buf + '\n';
  }
  return out;
}

std::vector<DetectionScore> parse_scores_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,provenance,method,score")
    throw FormatError("score CSV header missing", 0);
  std::vector<DetectionScore> out;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw FormatError("score CSV row needs 4 fields", offset);
    DetectionScore s;
    s.sample_id = f[0];
    try {
      s.provenance = provenance_from_string(f[1]);
      s.method = method_from_string(f[2]);
    } catch (const Error&) {
      throw FormatError("bad score CSV row", offset);
    }
    char* end = nullptr;
    s.score = std::strtod(f[3].c_str(), &end);
    if (f[3].empty() || *end != '\0') throw FormatError("bad score value", offset);
    out.push_back(std::move(s));
    offset += line.size() + 1;
  }
  return out;
}

}  // namespace mad
