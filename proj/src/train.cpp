#include <algorithm>
#include <cmath>
#include <numeric>

#include "mad/error.hpp"
#include "mad/model.hpp"
#include "mad/rng.hpp"

namespace mad {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ParameterError("learning rate must be > 0");
  if (epochs < 0) throw ParameterError("epochs must be >= 0");
  if (batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (momentum < 0 || momentum >= 1) throw ParameterError("momentum must be in [0, 1)");
  if (weight_decay < 0) throw ParameterError("weight decay must be >= 0");
}

TrainResult train(ParamVector start, std::span<const LabeledSample> data, const TrainConfig& cfg,
                  const StepObserver& observer) {
  cfg.validate();
  TrainResult out{std::move(start), {}};
  if (cfg.epochs == 0) return out;
  if (data.empty()) throw InputError("empty training set");
  const Network net(out.params.arch);
  Eigen::VectorXd& w = out.params.values;
  if (w.size() != net.parameter_count()) throw DescriptorError("parameter length mismatch");

  const Eigen::MatrixXd x_all = stack_inputs(data);
  const std::vector<int> y_all = labels_of(data);
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(w.size());
  Rng rng = make_rng(cfg.seed, 0x7a11);

  Eigen::MatrixXd xb;
  std::vector<int> yb;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    int batches = 0;
    for (std::size_t start_i = 0; start_i < n; start_i += std::size_t(cfg.batch_size)) {
      const std::size_t m = std::min(n - start_i, std::size_t(cfg.batch_size));
      xb.resize(x_all.rows(), Eigen::Index(m));
      yb.resize(m);
      for (std::size_t j = 0; j < m; ++j) {
        xb.col(Eigen::Index(j)) = x_all.col(Eigen::Index(order[start_i + j]));
        yb[j] = y_all[order[start_i + j]];
      }
      double batch_loss = 0;
      Eigen::VectorXd g = net.gradient(w, xb, yb, Reduction::mean, &batch_loss);
      if (!std::isfinite(batch_loss) || !g.allFinite())
        throw TrainingError("training diverged: non-finite loss", epoch);
      if (cfg.weight_decay > 0) g += cfg.weight_decay * w;
      velocity = cfg.momentum * velocity + g;
      w -= cfg.learning_rate * velocity;
      if (!w.allFinite()) throw TrainingError("training diverged: non-finite weights", epoch);
      epoch_loss += batch_loss;
      if (observer) observer(epoch, batches, w);
      ++batches;
    }
    out.epoch_loss.push_back(epoch_loss / batches);
  }
  return out;
}

TwoStageResult train_two_stage(const ArchDescriptor& arch, std::span<const LabeledSample> clean_data,
                               std::span<const LabeledSample> poisoned_data,
                               const TrainConfig& cfg_clean, const TrainConfig& cfg_bd) {
  cfg_clean.validate();
  cfg_bd.validate();
  TwoStageResult out;
  auto stage1 = train(init_model(arch, cfg_clean.seed), clean_data, cfg_clean);
  stage1.params.origin = Origin::pretrained;
  out.clean = stage1.params;
  out.clean_loss = std::move(stage1.epoch_loss);
  auto stage2 = train(stage1.params, poisoned_data, cfg_bd);
  stage2.params.origin = Origin::backdoored;
  out.backdoored = std::move(stage2.params);
  out.backdoor_loss = std::move(stage2.epoch_loss);
  return out;
}

double accuracy(const ParamVector& params, std::span<const LabeledSample> data) {
  if (data.empty()) return 0.0;
  const auto pred = predict_batch(params, stack_inputs(data));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += pred[i] == data[i].label;
  return double(hits) / double(data.size());
}

double hit_rate(const ParamVector& params, std::span<const LabeledSample> data, int target) {
  if (data.empty()) return 0.0;
  const auto pred = predict_batch(params, stack_inputs(data));
  return double(std::count(pred.begin(), pred.end(), target)) / double(data.size());
}

}  // namespace mad
