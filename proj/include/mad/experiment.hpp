#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mad/attribution.hpp"
#include "mad/data.hpp"
#include "mad/eval.hpp"
#include "mad/model.hpp"
#include "mad/sgld.hpp"
#include "mad/spectral.hpp"

namespace mad {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Toy-profile experiment. Defaults are the reference toy settings
/// scaled to the 10k-digit desk dataset.
struct ExperimentConfig {
  std::uint64_t seed = 0;

  // [data]
  std::string data_source = "idx";  ///< idx | synthetic
  std::string data_dir;             ///< empty: $MAD_DATA_DIR
  std::size_t data_limit = 10000;
  std::size_t train = 6000;
  std::size_t trusted = 500;
  std::size_t sampling = 1000;
  std::size_t test_clean = 250;
  std::size_t test_backdoor = 250;
  std::size_t target_clean = 100;  ///< clean target-class test digits

  // [attack]
  TriggerSpec::Kind trigger = TriggerSpec::Kind::random_noise;
  double opacity = 0.2;
  int target = 0;
  double poison_rate = 0.02;

  // [model], [clean_train], [backdoor_train]
  std::string arch = "toy_cnn";  ///< toy_cnn | toy_cnn_large
  TrainConfig clean_train{0.05, 0.9, 0.01, 60, 256, 0};
  TrainConfig backdoor_train{0.01, 0.9, 0.0, 100, 256, 0};

  // [sgld] plain SGLD on the toy model
  SgldConfig sgld = toy_sgld();
  static SgldConfig toy_sgld() {
    SgldConfig c;
    c.step_size = 1e-4;
    c.preconditioner = Preconditioner::none;
    return c;
  }

  // [detect]
  std::vector<Method> methods{Method::mean, Method::clc, Method::cccc};
  std::string normal = "target_class";  ///< target_class | all_classes

  // [spectral]
  std::size_t hessian_samples = 1000;
  std::size_t spectral_population = 50;
  double spectral_beta = 100;
  double spectral_gamma = 1e4;
  double energy_threshold = 0.9;
  Eigen::Index hessian_cap = kDefaultHessianCap;

  // [pathology]
  std::size_t adversarial = 100;
  double pgd_eps = 0.3;
  double pgd_step = 0.01;
  int pgd_iters = 100;
  std::size_t ood = 100;

  // [contamination]
  std::vector<double> contamination_rates{0.01, 0.02, 0.05};

  // [sweep]
  std::vector<double> sweep_gamma{1e3, 1e4, 1e5};
  std::vector<double> sweep_n_beta{100};
  std::vector<int> sweep_draws{25, 250, 1750};
  std::vector<std::size_t> sweep_trusted{50, 100, 250, 500};
  int sweep_subsamples = 5;
  bool sweep_scale_step = true;  ///< step_size * gamma held at its base value across the sweep

  /// Throws ParameterError before any compute.
  void validate() const;
};

struct ConfigField {
  std::string key;  ///< "section.name"
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

/// Every configurable key, in canonical order.
const std::vector<ConfigField>& config_fields();
/// Throws ParameterError on an unknown key or a malformed value.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Sectioned "key = value" text with every field; stable across runs.
std::string config_text(const ExperimentConfig& cfg);

ArchDescriptor arch_by_name(const std::string& name);

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

struct ToyData {
  Splits splits;            ///< test_backdoor holds triggered non-target samples
  SampleList poisoned_train;
  SampleList hessian;       ///< clean training subset for H_T
  SampleList spectral_trusted, spectral_clean, spectral_backdoor;
  SampleList target_clean;  ///< target-class members of test_clean, then held-out digits
  SampleList adversarial;   ///< targeted PGD, target (label + 1) mod classes
  SampleList ood;
  SampleList pool;          ///< digits not used by any population
  TriggerSpec trigger, other_trigger;
  Shape shape{14, 14, 1};
};

/// Loads digits from cfg (idx: data_dir or $MAD_DATA_DIR) and builds every population.
SampleList load_experiment_digits(const ExperimentConfig& cfg);
ToyData prepare_data(const ExperimentConfig& cfg, const SampleList& digits);
/// Fills data.adversarial from the pool (sources whose PGD target would be the
/// backdoor target are skipped). Returns the targeted success rate.
double add_adversarial(ToyData& data, const ExperimentConfig& cfg, const ParamVector& model);

struct TrainedModels {
  ParamVector clean, backdoored;
  std::vector<double> clean_loss, backdoor_loss;
  double clean_accuracy = 0;  ///< backdoored model on test_clean
  double asr = 0;             ///< backdoored model on test_backdoor
};

TrainedModels train_models(const ExperimentConfig& cfg, const ToyData& data);

struct SpectralResult {
  Spectrum spectrum;
  DetectionConditionReport report;
  int k_trusted = 0, k_clean = 0, k_backdoor = 0;
  int mass_index = 0;  ///< eigenvalues holding energy_threshold of the positive mass
  Eigen::VectorXd trusted_curve, clean_curve, backdoor_curve, delta_curve;
  Eigen::VectorXd align_clean, align_backdoor;  ///< mean alignment with trusted per direction
  double sharp_align_clean = 0, sharp_align_backdoor = 0;  ///< sharpest decile averages
};

/// Per-sample loss gradients toward the prediction at w, one column per sample.
Eigen::MatrixXd per_sample_gradients(const ParamVector& w, std::span<const LabeledSample> samples);
SpectralResult analyze_spectrum(const ExperimentConfig& cfg, const TrainedModels& models, const ToyData& data);

/// Row indices of each population inside a chain's trace matrix.
struct ChainLayout {
  std::vector<std::size_t> trusted, test_clean, test_backdoor, adversarial, ood;
  std::vector<std::size_t> test_target;  ///< rows of data.target_clean
  std::vector<std::size_t> normal;       ///< the normal population scored against test_backdoor
  /// Contaminated replacements, parallel to trusted (npos when unchanged).
  std::vector<std::vector<std::size_t>> contaminated;
  std::vector<ContaminationSpec> contamination;
};

struct ChainRun {
  TraceMatrix traces;
  ChainLayout layout;
};

/// One chain over trusted, test, pathology and contaminated-trusted observables.
ChainRun run_detection_chain(const ExperimentConfig& cfg, const ParamVector& w_star, const ToyData& data,
                             bool pathologies, std::span<const ContaminationSpec> contamination);

struct DetectionResult {
  Method method = Method::mean;
  RocResult roc;
  DerResult der;
  std::vector<DetectionScore> scores;
};

/// layout.normal rows are normal, backdoor rows anomalous. `trusted_rows`
/// defaults to layout.trusted.
DetectionResult evaluate_detection(const TraceMatrix& traces, const ChainLayout& layout, Method method, int target,
                                   const std::vector<std::size_t>* trusted_rows = nullptr);

struct PopulationSummary {
  Provenance provenance = Provenance::clean;
  std::size_t count = 0;
  double median = 0, mean = 0;
};

struct MultipathologyResult {
  Method method = Method::mean;
  std::vector<PopulationSummary> populations;  ///< clean, backdoor, adversarial, ood (those present)
  std::vector<DetectionScore> scores;
  bool clean_highest = false;  ///< clean median above every other population median
};

MultipathologyResult multipathology(const TraceMatrix& traces, const ChainLayout& layout, Method method);
/// Pearson coupling over every test-population row (for external clustering).
CouplingMatrix offline_coupling(const TraceMatrix& traces, const ChainLayout& layout);

struct ContaminationRow {
  ContaminationSpec spec;
  Method method = Method::mean;
  double auroc = 0;
};

std::vector<ContaminationSpec> default_contamination(const ExperimentConfig& cfg);
std::vector<ContaminationRow> contamination_study(const ChainRun& run, std::span<const Method> methods, int target);

struct SensitivityRow {
  double gamma = 0, n_beta = 0;
  int draws = 0;
  std::size_t trusted = 0;
  Method method = Method::mean;
  double auroc = 0;  ///< mean over trusted subsamples
};

/// Runs one chain per (gamma, n_beta) pair. Draw counts and trusted sizes are
/// varied on the chain matching the base config (or the first pair).
std::vector<SensitivityRow> sensitivity_sweep(const ExperimentConfig& cfg, const ParamVector& w_star,
                                              const ToyData& data, const ChainRun* base = nullptr);

// ---------------------------------------------------------------------------
// End to end
// ---------------------------------------------------------------------------

struct ToyOptions {
  bool spectral = true;
  bool detection = true;
  bool pathologies = true;
  bool contamination = true;
  bool sensitivity = true;
};

struct ToyReport {
  std::uint64_t seed = 0;
  std::string normal;  ///< detect.normal of the run
  TrainedModels models;
  SpectralResult spectral;
  bool has_spectral = false;
  ChainRun chain;
  std::vector<DetectionResult> detection;
  std::vector<DetectionResult> detection_all_classes;  ///< every clean test digit as normal
  std::vector<MultipathologyResult> multipathology;
  std::vector<ContaminationRow> contamination;
  std::vector<SensitivityRow> sensitivity;
  double adversarial_success = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

ToyReport run_toy(const ExperimentConfig& cfg, const ToyOptions& options = {}, const ProgressFn& progress = {});

/// CSV tables (header + rows, 17 significant digits).
std::string detection_csv(const ToyReport& r);
std::string contamination_csv(std::span<const ContaminationRow> rows, std::uint64_t seed);
std::string sensitivity_csv(std::span<const SensitivityRow> rows, std::uint64_t seed);
std::string multipathology_csv(std::span<const MultipathologyResult> rows, std::uint64_t seed);
/// index,lambda,trusted,clean,backdoor,weight_delta,align_clean,align_backdoor
std::string spectral_curves_csv(const SpectralResult& s);
/// metric,mean,std,n over seeds for clean_accuracy, asr, r2a, auroc_<method>.
std::string seed_summary_csv(std::span<const ToyReport> reports);

}  // namespace mad
