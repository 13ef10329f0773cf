#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "mad/model.hpp"
#include "mad/sample.hpp"

namespace mad {

// ---------------------------------------------------------------------------
// Digit sources
// ---------------------------------------------------------------------------

/// IDX image/label pair. Files may be gzip-compressed.
struct IdxFiles {
  std::string images;
  std::string labels;
  std::optional<std::size_t> limit;  ///< keep only the first N samples
};

/// Procedurally rendered seven-segment style glyphs (14x14, 10 classes).
struct SyntheticDigits {
  std::uint64_t seed = 0;
  std::size_t count = 1000;
};

using DigitSource = std::variant<IdxFiles, SyntheticDigits>;

/// Loads digits as 14x14x1 inputs in [0,1]. 28x28 IDX images are reduced by
/// 2x2 average pooling. Sample ids are the record index in the file.
SampleList load_digits(const DigitSource& source);

/// IDX files under `dir` (digits-* or the standard MNIST train-* names), if any.
std::optional<IdxFiles> find_idx_files(const std::string& dir);

/// 2x2 average pooling of a row-major 8-bit image, scaled to [0,1].
Eigen::VectorXd downsample_2x2(std::span<const std::uint8_t> pixels, int rows, int cols);

// ---------------------------------------------------------------------------
// Triggers and poisoning
// ---------------------------------------------------------------------------

struct TriggerSpec {
  enum class Kind { random_noise, checkerboard_patch };
  Kind kind = Kind::random_noise;
  std::uint64_t seed = 0;
  double opacity = 0.2;
  // patch geometry (checkerboard_patch only), top-left corner and side
  int patch_row = 10;
  int patch_col = 10;
  int patch_size = 3;

  void validate(const Shape& shape) const;
};

/// Trigger image t (same shape as the input). For the patch kind entries
/// outside the patch are unused.
Eigen::VectorXd trigger_pattern(const TriggerSpec& trigger, const Shape& shape);

/// x' = clip((1 - a) x + a t) (inside the patch for the patch kind);
/// label <- target; provenance <- backdoor.
LabeledSample apply_trigger(const LabeledSample& sample, const TriggerSpec& trigger,
                            const Shape& shape, int target);

/// Training set with `rate` of the non-target samples replaced by triggered copies.
SampleList poison_dataset(std::span<const LabeledSample> clean, const TriggerSpec& trigger,
                          const Shape& shape, int target, double rate, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::size_t train = 0;
  std::size_t trusted = 0;
  std::size_t sampling = 0;
  std::size_t test_clean = 0;
  std::size_t test_backdoor = 0;
  std::uint64_t seed = 0;
  bool class_balanced_trusted = true;
  int classes = 10;
  int target = 0;
  /// When set, test_backdoor samples are triggered; otherwise they are the
  /// untriggered non-target sources.
  std::optional<TriggerSpec> trigger;
  Shape shape{14, 14, 1};
};

struct Splits {
  SampleList train;
  SampleList trusted;
  SampleList sampling;
  SampleList test_clean;
  SampleList test_backdoor;
};

/// Disjoint, seed-deterministic partition. test_backdoor draws only from
/// samples whose label differs from spec.target.
Splits make_splits(std::span<const LabeledSample> samples, const SplitSpec& spec);

/// `count` samples with equal share per class (remainder to the lowest classes).
SampleList class_balanced_subset(std::span<const LabeledSample> samples, std::size_t count,
                                 int classes, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Other pathologies
// ---------------------------------------------------------------------------

/// Targeted L-inf PGD: x <- Proj(x - step * sign(grad_x CE(x, target))).
LabeledSample gen_adversarial_pgd(const ParamVector& params, const LabeledSample& sample,
                                  double eps, double step, int iters, int target);
/// Batched form; targets[i] is the target for samples[i].
SampleList gen_adversarial_pgd(const ParamVector& params, std::span<const LabeledSample> samples,
                               double eps, double step, int iters, std::span<const int> targets);

enum class OodKind { uniform_noise, shifted_digits };
SampleList gen_ood(OodKind kind, std::size_t count, std::uint64_t seed,
                   const Shape& shape = Shape{14, 14, 1});

struct ContaminationSpec {
  enum class Mode { same_type, wrong_type, gaussian_noise };
  Mode mode = Mode::same_type;
  double rate = 0.0;   ///< poisoning modes
  double sigma = 0.0;  ///< gaussian mode
  std::uint64_t seed = 0;

  void validate() const;
};

std::string to_string(ContaminationSpec::Mode m);

/// Replaces exactly floor(rate * |D_T|) non-target samples with triggered
/// copies (same or other trigger), or perturbs every input with N(0, sigma^2)
/// and clips. The replaced set for a smaller rate is a prefix of the set for a
/// larger rate under the same seed.
SampleList contaminate_trusted(std::span<const LabeledSample> trusted, const ContaminationSpec& spec,
                               const TriggerSpec& trigger_same, const TriggerSpec& trigger_other,
                               const Shape& shape, int target);

// ---------------------------------------------------------------------------
// Manifest CSV: sample_id,split,provenance,label,file_offset
// ---------------------------------------------------------------------------

std::string manifest_csv(std::span<const LabeledSample> samples);

}  // namespace mad
