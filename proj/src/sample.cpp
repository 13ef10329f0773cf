#include "mad/sample.hpp"

#include "mad/error.hpp"

namespace mad {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::clean: return "clean";
    case Provenance::backdoor: return "backdoor";
    case Provenance::adversarial: return "adversarial";
    case Provenance::ood: return "ood";
  }
  return "clean";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::trusted: return "trusted";
    case Split::sampling: return "sampling";
    case Split::test: return "test";
  }
  return "train";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "clean") return Provenance::clean;
  if (s == "backdoor") return Provenance::backdoor;
  if (s == "adversarial") return Provenance::adversarial;
  if (s == "ood") return Provenance::ood;
  throw InputError("unknown provenance '" + s + "'");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "trusted") return Split::trusted;
  if (s == "sampling") return Split::sampling;
  if (s == "test") return Split::test;
  throw InputError("unknown split '" + s + "'");
}

Eigen::MatrixXd stack_inputs(std::span<const LabeledSample> samples) {
  if (samples.empty()) return {};
  const Eigen::Index rows = samples.front().input.size();
  Eigen::MatrixXd x(rows, Eigen::Index(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].input.size() != rows) throw InputError("inconsistent sample sizes in batch");
    x.col(Eigen::Index(i)) = samples[i].input;
  }
  return x;
}

std::vector<int> labels_of(std::span<const LabeledSample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

}  // namespace mad
