#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "mad/sample.hpp"

namespace mad {

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Activation shape. Flat storage is HWC with channels fastest.
struct Shape {
  int height = 1;
  int width = 1;
  int channels = 1;
  Eigen::Index size() const { return Eigen::Index(height) * width * channels; }
  bool operator==(const Shape&) const = default;
};

/// Valid (unpadded) convolution.
struct Conv2d {
  int in_ch = 1;
  int out_ch = 1;
  int kernel = 3;
  int stride = 1;
  bool operator==(const Conv2d&) const = default;
};
struct Dense {
  int in = 1;
  int out = 1;
  bool operator==(const Dense&) const = default;
};
struct Relu {
  bool operator==(const Relu&) const = default;
};
/// Non-overlapping k x k max pooling (stride k, trailing rows/cols dropped).
struct MaxPool {
  int k = 2;
  bool operator==(const MaxPool&) const = default;
};
struct Flatten {
  bool operator==(const Flatten&) const = default;
};

using Layer = std::variant<Conv2d, Dense, Relu, MaxPool, Flatten>;

struct ArchDescriptor {
  std::vector<Layer> layers;
  Shape input{14, 14, 1};
  int classes = 10;

  /// Activation shape entering each layer, plus the output shape at the end.
  /// Throws DescriptorError when layers do not compose.
  std::vector<Shape> shapes() const;
  Eigen::Index parameter_count() const;
  void validate() const { (void)shapes(); }

  /// JSON text used in checkpoint headers and manifests.
  std::string to_text() const;
  static ArchDescriptor from_text(const std::string& text);

  bool operator==(const ArchDescriptor&) const = default;
};

/// conv(1->4,3x3) relu pool2 dense(144->16) relu dense(16->10): 2530 parameters.
ArchDescriptor toy_cnn_arch();
/// Wider variant close to the ~12.5k-parameter reference model.
ArchDescriptor toy_cnn_arch_large();
/// Fully connected network in -> hidden... -> classes with ReLUs in between.
ArchDescriptor mlp_arch(int in, std::vector<int> hidden, int classes);

enum class Origin { initialized, pretrained, backdoored };
std::string to_string(Origin o);
Origin origin_from_string(const std::string& s);

struct ParamVector {
  Eigen::VectorXd values;
  ArchDescriptor arch;
  Origin origin = Origin::initialized;

  Eigen::Index size() const { return values.size(); }
  /// Throws if the length disagrees with the arch or any entry is non-finite.
  void check() const;
};

// ---------------------------------------------------------------------------
// Network engine
// ---------------------------------------------------------------------------

enum class Reduction { sum, mean };

/// Compiled architecture: parameter offsets and per-layer shapes. Evaluation
/// is batched, with samples as matrix columns. All methods are const and
/// safe to call concurrently.
class Network {
 public:
  explicit Network(ArchDescriptor arch);

  const ArchDescriptor& arch() const { return arch_; }
  Eigen::Index parameter_count() const { return n_params_; }
  Eigen::Index input_size() const { return arch_.input.size(); }
  int classes() const { return arch_.classes; }

  /// Logits, one column per input column.
  Eigen::MatrixXd forward(const Eigen::VectorXd& w, const Eigen::MatrixXd& x) const;
  /// Activations entering layer `layer` (layer == layers.size() gives logits).
  Eigen::MatrixXd activations(const Eigen::VectorXd& w, const Eigen::MatrixXd& x,
                              std::size_t layer) const;
  /// Per-sample cross-entropy toward `targets`.
  Eigen::VectorXd losses(const Eigen::VectorXd& w, const Eigen::MatrixXd& x,
                         std::span<const int> targets) const;
  /// Gradient of the reduced cross-entropy; optionally returns the reduced loss.
  Eigen::VectorXd gradient(const Eigen::VectorXd& w, const Eigen::MatrixXd& x,
                           std::span<const int> targets, Reduction reduction,
                           double* loss_out = nullptr) const;
  /// d(sum of per-sample losses)/d(input), one column per sample.
  Eigen::MatrixXd input_gradient(const Eigen::VectorXd& w, const Eigen::MatrixXd& x,
                                 std::span<const int> targets) const;
  /// Exact Hessian-vector product of the reduced cross-entropy (R-operator).
  Eigen::VectorXd hvp(const Eigen::VectorXd& w, const Eigen::MatrixXd& x,
                      std::span<const int> targets, Reduction reduction,
                      const Eigen::VectorXd& v) const;

  /// Caches the primal pass so repeated HVPs at one point only redo the
  /// tangent passes.
  class HvpContext {
   public:
    Eigen::VectorXd apply(const Eigen::VectorXd& v) const;

   private:
    friend class Network;
    struct Impl;
    std::shared_ptr<const Impl> impl_;
  };
  HvpContext hvp_context(const Eigen::VectorXd& w, const Eigen::MatrixXd& x,
                         std::span<const int> targets, Reduction reduction) const;

  /// Compiled layer: kind, shapes and parameter offsets into w.
  struct Op {
    enum class Kind { conv, dense, relu, pool, flatten } kind;
    Shape in, out;
    int kernel = 0;
    int stride = 1;
    Eigen::Index w_off = 0, w_rows = 0, w_cols = 0, b_off = 0;
  };
  struct Tape;

  const std::vector<Op>& ops() const { return ops_; }

 private:
  Eigen::MatrixXd run_forward(const Eigen::VectorXd& w, const Eigen::MatrixXd& x, Tape* tape,
                              std::size_t stop) const;

  ArchDescriptor arch_;
  std::vector<Op> ops_;
  Eigen::Index n_params_ = 0;
};

// ---------------------------------------------------------------------------
// Operations over ParamVector
// ---------------------------------------------------------------------------

/// He-style scaled uniform init: weights ~ U(-b, b), b = sqrt(6 / fan_in); biases 0.
ParamVector init_model(const ArchDescriptor& arch, std::uint64_t seed);

Eigen::VectorXd forward(const ParamVector& params, const Eigen::VectorXd& input);
double loss(const ParamVector& params, const Eigen::VectorXd& input, int target);
/// Cross-entropy of a logit vector; the stable log-sum-exp form.
double cross_entropy(const Eigen::VectorXd& logits, int target);
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);
/// Argmax with ties broken toward the lowest index.
int argmax(const Eigen::VectorXd& logits);
int predict(const ParamVector& params, const Eigen::VectorXd& input);
std::vector<int> predict_batch(const ParamVector& params, const Eigen::MatrixXd& inputs);

Eigen::VectorXd grad(const ParamVector& params, std::span<const LabeledSample> batch,
                     Reduction reduction);
Eigen::VectorXd hvp(const ParamVector& params, std::span<const LabeledSample> batch,
                    const Eigen::VectorXd& v, Reduction reduction = Reduction::mean);

inline constexpr Eigen::Index kDefaultHessianCap = 15000;

struct DenseHessian {
  Eigen::MatrixXd matrix;     ///< symmetrized (H + H^T) / 2
  double max_asymmetry = 0;   ///< max |H - H^T| before symmetrization
};

/// Stack HVP columns of any linear operator into a symmetrized matrix.
DenseHessian dense_hessian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& hvp_fn,
                           Eigen::Index d, Eigen::Index cap = kDefaultHessianCap);
/// Hessian of the mean cross-entropy over `dataset`.
DenseHessian dense_hessian(const ParamVector& params, std::span<const LabeledSample> dataset,
                           Eigen::Index cap = kDefaultHessianCap);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 1;
  int batch_size = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  ParamVector params;
  std::vector<double> epoch_loss;  ///< mean minibatch loss per epoch
};

/// Called after every optimizer step with (epoch, step within epoch, weights).
using StepObserver = std::function<void(int, int, const Eigen::VectorXd&)>;

/// SGD with heavy-ball momentum (v <- mu v + g + wd w; w <- w - lr v).
TrainResult train(ParamVector start, std::span<const LabeledSample> data, const TrainConfig& cfg,
                  const StepObserver& observer = {});

struct TwoStageResult {
  ParamVector clean;
  ParamVector backdoored;
  std::vector<double> clean_loss;
  std::vector<double> backdoor_loss;
};

/// Clean pretraining from a fresh init (seeded by cfg_clean.seed), then
/// finetuning on the poisoned set. Stage 2 with zero epochs returns w_clean.
TwoStageResult train_two_stage(const ArchDescriptor& arch, std::span<const LabeledSample> clean_data,
                               std::span<const LabeledSample> poisoned_data,
                               const TrainConfig& cfg_clean, const TrainConfig& cfg_bd);

double accuracy(const ParamVector& params, std::span<const LabeledSample> data);
/// Fraction of samples predicted as `target`.
double hit_rate(const ParamVector& params, std::span<const LabeledSample> data, int target);

// ---------------------------------------------------------------------------
// Checkpoints: "MADW", u32 version, u32 text length, arch text, u64 d, d x f64 (all LE)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamVector& params);
ParamVector decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const ParamVector& params);
ParamVector load_checkpoint(const std::string& path);

}  // namespace mad
