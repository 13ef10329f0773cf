#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mad/error.hpp"
#include "mad/model.hpp"
#include "mad/rng.hpp"
#include "mad/sample.hpp"

namespace mad {

enum class Preconditioner { none, rmsprop };
std::string to_string(Preconditioner p);
Preconditioner preconditioner_from_string(const std::string& s);

struct SgldConfig {
  double step_size = 1e-6;   ///< epsilon
  double n_beta = 100.0;     ///< effective inverse temperature
  double gamma = 1e4;        ///< localization strength
  int batch_size = 256;      ///< m
  int steps = 2000;          ///< T
  int burn_in = 250;         ///< B
  std::uint64_t seed = 0;
  Preconditioner preconditioner = Preconditioner::rmsprop;
  double rms_decay = 0.99;
  double rms_damping = 0.1;
  /// Test hook: when false the Gaussian term is dropped.
  bool inject_noise = true;

  /// Throws ParameterError. `sampling_size` is |D_S| (0 skips the batch check).
  void validate(std::size_t sampling_size = 0) const;
};

struct ChainState {
  Eigen::VectorXd w;
  std::int64_t step = 0;
  Eigen::VectorXd sq_avg;  ///< RMSprop second moment
  Rng rng;
};

ChainState init_chain(const Eigen::VectorXd& w_star, const SgldConfig& cfg);

/// One update given the scaled data gradient (n_beta / m) * grad L_B(w_t):
///   w <- w - (eps/2) G [data_grad + gamma (w - w*)] + sqrt(eps) G^(1/2) eta
/// with G = I, or G = 1 / (sqrt(V) + damping) and V <- decay V + (1 - decay) data_grad^2.
/// Throws ChainDivergence when the new w is not finite.
void sgld_update(ChainState& state, const Eigen::VectorXd& w_star, const Eigen::VectorXd& data_grad,
                 const SgldConfig& cfg);

/// Draws a minibatch of size m from D_S (with replacement) and applies sgld_update.
void sgld_step(ChainState& state, const ParamVector& w_star, std::span<const LabeledSample> sampling,
               const SgldConfig& cfg);

/// Generic chain: data_grad(w, rng) returns the scaled data gradient; on_draw(column, w)
/// is called for every step past burn-in.
template <class GradFn, class DrawFn>
void run_sgld(const Eigen::VectorXd& w_star, const SgldConfig& cfg, GradFn&& data_grad, DrawFn&& on_draw) {
  cfg.validate();
  ChainState state = init_chain(w_star, cfg);
  for (int t = 0; t < cfg.steps; ++t) {
    const Eigen::VectorXd g = data_grad(static_cast<const Eigen::VectorXd&>(state.w), state.rng);
    sgld_update(state, w_star, g, cfg);
    if (t >= cfg.burn_in) on_draw(t - cfg.burn_in, static_cast<const Eigen::VectorXd&>(state.w));
  }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

struct TraceRow {
  std::string sample_id;  ///< "<split>:<id>"
  Provenance provenance = Provenance::clean;
  int target_label = 0;   ///< frozen prediction at w*
  int label = 0;          ///< dataset label (poisoned samples carry the target)
  bool valid = true;      ///< false when any recorded value was non-finite
};

/// Observable values: one row per sample, one column per post-burn-in draw.
struct TraceMatrix {
  Eigen::MatrixXd values;
  std::vector<TraceRow> rows;

  Eigen::Index draws() const { return values.cols(); }
  std::size_t invalid_count() const;
  /// Rows whose sample_id starts with `prefix` (e.g. "trusted:").
  std::vector<std::size_t> rows_with_prefix(const std::string& prefix) const;
  /// Keeps columns [0, n).
  TraceMatrix first_draws(Eigen::Index n) const;
  TraceMatrix select_rows(std::span<const std::size_t> idx) const;
};

std::string sample_key(const LabeledSample& s);

enum class Observable { cross_entropy, kl };

/// Single chain from w*. Targets are frozen at w* before sampling. Records the
/// chosen observable for every sample at every post-burn-in step.
TraceMatrix run_chain(const ParamVector& w_star, std::span<const LabeledSample> sampling,
                      std::span<const LabeledSample> observables, const SgldConfig& cfg,
                      Observable kind = Observable::cross_entropy);

/// KL(p(.|x; w*) || p(.|x; w_t)) traces.
TraceMatrix kl_observable_trace(const ParamVector& w_star, std::span<const LabeledSample> sampling,
                                std::span<const LabeledSample> observables, const SgldConfig& cfg);

/// KL(p || q) between the softmax distributions of two logit columns.
double kl_from_logits(const Eigen::VectorXd& p_logits, const Eigen::VectorXd& q_logits);

/// CSV: sample_id,provenance,target_label,t0..tN with 17 significant digits.
/// The CSV has no dataset label column; parsed rows take label = target_label.
std::string trace_csv(const TraceMatrix& traces);
TraceMatrix parse_trace_csv(const std::string& text);

/// "MADT", u32 version, u64 rows, u64 cols, per row {text id, text provenance,
/// i32 target, i32 label, u8 valid, cols x f64}, all little-endian.
std::vector<std::uint8_t> encode_traces(const TraceMatrix& traces);
TraceMatrix decode_traces(std::span<const std::uint8_t> bytes);
void save_traces(const std::string& path, const TraceMatrix& traces);
TraceMatrix load_traces(const std::string& path);

}  // namespace mad
