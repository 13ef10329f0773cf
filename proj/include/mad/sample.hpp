#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mad {

enum class Provenance { clean, backdoor, adversarial, ood };
enum class Split { train, trusted, sampling, test };

std::string to_string(Provenance p);
std::string to_string(Split s);
Provenance provenance_from_string(const std::string& s);
Split split_from_string(const std::string& s);

/// One input tensor (stored flat, HWC with channels fastest) with its label.
struct LabeledSample {
  Eigen::VectorXd input;
  int label = 0;
  Provenance provenance = Provenance::clean;
  Split split = Split::train;
  std::int64_t id = 0;
  std::int64_t source_offset = -1;  ///< byte offset in the source IDX file, -1 if generated
};

using SampleList = std::vector<LabeledSample>;

/// Inputs as columns of a (features x N) matrix.
Eigen::MatrixXd stack_inputs(std::span<const LabeledSample> samples);
std::vector<int> labels_of(std::span<const LabeledSample> samples);

}  // namespace mad
