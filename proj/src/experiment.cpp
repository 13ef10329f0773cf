#include "mad/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "mad/error.hpp"
#include "mad/rng.hpp"

namespace mad {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::size_t npos = std::size_t(-1);

std::uint64_t derive(std::uint64_t seed, std::uint64_t k) { return mix_seed(seed ^ (k * 0x9E3779B97F4A7C15ULL)); }

std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = b + text.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && e[-1] == ' ') --e;
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e || b == e)
    throw ParameterError("bad value '" + text + "' for " + key);
  return v;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text + ",") {
    if (c == ',') {
      const auto b = cur.find_first_not_of(" []");
      const auto e = cur.find_last_not_of(" []");
      if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
  return s;
}

std::string trigger_name(TriggerSpec::Kind k) {
  return k == TriggerSpec::Kind::random_noise ? "random_noise" : "checkerboard_patch";
}

TriggerSpec::Kind trigger_from(const std::string& s) {
  if (s == "random_noise") return TriggerSpec::Kind::random_noise;
  if (s == "checkerboard_patch") return TriggerSpec::Kind::checkerboard_patch;
  throw ParameterError("unknown trigger '" + s + "'");
}

std::vector<ConfigField> build_fields() {
  std::vector<ConfigField> f;
  using C = ExperimentConfig;
  auto num = [&f](std::string key, std::string help, auto member) {
    using T = std::remove_reference_t<decltype(std::declval<C&>().*member)>;
    f.push_back({key, help,
                 [member](const C& c) {
                   if constexpr (std::is_floating_point_v<T>) return fmt_double(c.*member);
                   else return std::to_string(c.*member);
                 },
                 [member, key](C& c, const std::string& v) { c.*member = parse_number<T>(key, v); }});
  };
  auto str = [&f](std::string key, std::string help, std::string C::*member) {
    f.push_back({key, help, [member](const C& c) { return c.*member; },
                 [member](C& c, const std::string& v) { c.*member = v; }});
  };
  auto train = [&f](const std::string& sec, TrainConfig C::*tc) {
    auto add = [&](std::string name, std::string help, auto member) {
      using T = std::remove_reference_t<decltype(std::declval<TrainConfig&>().*member)>;
      const std::string key = sec + "." + name;
      f.push_back({key, help,
                   [tc, member](const C& c) {
                     if constexpr (std::is_floating_point_v<T>) return fmt_double((c.*tc).*member);
                     else return std::to_string((c.*tc).*member);
                   },
                   [tc, member, key](C& c, const std::string& v) { (c.*tc).*member = parse_number<T>(key, v); }});
    };
    add("lr", "learning rate", &TrainConfig::learning_rate);
    add("momentum", "heavy-ball momentum", &TrainConfig::momentum);
    add("weight_decay", "L2 weight decay", &TrainConfig::weight_decay);
    add("epochs", "epochs", &TrainConfig::epochs);
    add("batch_size", "minibatch size", &TrainConfig::batch_size);
  };
  auto sgld = [&f](std::string name, std::string help, auto member) {
    using T = std::remove_reference_t<decltype(std::declval<SgldConfig&>().*member)>;
    const std::string key = "sgld." + name;
    f.push_back({key, help,
                 [member](const C& c) {
                   if constexpr (std::is_floating_point_v<T>) return fmt_double(c.sgld.*member);
                   else return std::to_string(c.sgld.*member);
                 },
                 [member, key](C& c, const std::string& v) { c.sgld.*member = parse_number<T>(key, v); }});
  };
  auto doubles = [&f](std::string key, std::string help, std::vector<double> C::*member) {
    f.push_back({key, help,
                 [member](const C& c) { return join<double>(c.*member, [](const double& x) { return fmt_double(x); }); },
                 [member, key](C& c, const std::string& v) {
                   (c.*member).clear();
                   for (const auto& s : split_list(v)) (c.*member).push_back(parse_number<double>(key, s));
                 }});
  };

  num("run.seed", "master seed; every other stream is derived from it", &C::seed);

  str("data.source", "idx | synthetic", &C::data_source);
  str("data.dir", "directory with IDX digit files (empty: $MAD_DATA_DIR)", &C::data_dir);
  num("data.limit", "maximum digits read", &C::data_limit);
  num("data.train", "training split size", &C::train);
  num("data.trusted", "trusted split size (class balanced)", &C::trusted);
  num("data.sampling", "SGLD sampling split size", &C::sampling);
  num("data.test_clean", "clean test samples", &C::test_clean);
  num("data.test_backdoor", "triggered test samples", &C::test_backdoor);
  num("data.target_clean", "clean target-class test samples", &C::target_clean);

  f.push_back({"attack.trigger", "random_noise | checkerboard_patch",
               [](const C& c) { return trigger_name(c.trigger); },
               [](C& c, const std::string& v) { c.trigger = trigger_from(v); }});
  num("attack.opacity", "blend opacity", &C::opacity);
  num("attack.target", "backdoor target class", &C::target);
  num("attack.poison_rate", "fraction of non-target training samples poisoned", &C::poison_rate);

  str("model.arch", "toy_cnn | toy_cnn_large", &C::arch);
  train("clean_train", &C::clean_train);
  train("backdoor_train", &C::backdoor_train);

  sgld("step_size", "SGLD step size epsilon", &SgldConfig::step_size);
  sgld("n_beta", "effective inverse temperature", &SgldConfig::n_beta);
  sgld("gamma", "localization strength", &SgldConfig::gamma);
  sgld("batch_size", "SGLD minibatch size", &SgldConfig::batch_size);
  sgld("steps", "total SGLD steps", &SgldConfig::steps);
  sgld("burn_in", "discarded leading steps", &SgldConfig::burn_in);
  f.push_back({"sgld.preconditioner", "none | rmsprop",
               [](const C& c) { return to_string(c.sgld.preconditioner); },
               [](C& c, const std::string& v) { c.sgld.preconditioner = preconditioner_from_string(v); }});
  sgld("rms_decay", "RMSprop decay", &SgldConfig::rms_decay);
  sgld("rms_damping", "RMSprop damping", &SgldConfig::rms_damping);

  f.push_back({"detect.methods", "comma list of mean, clc, cccc, knn_offline, mahalanobis",
               [](const C& c) { return join<Method>(c.methods, [](const Method& m) { return to_string(m); }); },
               [](C& c, const std::string& v) {
                 c.methods.clear();
                 for (const auto& s : split_list(v)) c.methods.push_back(method_from_string(s));
               }});
  str("detect.normal", "target_class | all_classes: clean test digits scored as normal", &C::normal);

  num("spectral.hessian_samples", "clean training samples in the Hessian", &C::hessian_samples);
  num("spectral.population", "samples per spectral population", &C::spectral_population);
  num("spectral.beta", "probe inverse temperature", &C::spectral_beta);
  num("spectral.gamma", "probe localization", &C::spectral_gamma);
  num("spectral.energy_threshold", "cumulative energy threshold", &C::energy_threshold);
  num("spectral.hessian_cap", "largest dense Hessian dimension", &C::hessian_cap);

  num("pathology.adversarial", "targeted PGD samples", &C::adversarial);
  num("pathology.pgd_eps", "PGD L-inf budget", &C::pgd_eps);
  num("pathology.pgd_step", "PGD step", &C::pgd_step);
  num("pathology.pgd_iters", "PGD iterations", &C::pgd_iters);
  num("pathology.ood", "uniform-noise OOD samples", &C::ood);

  doubles("contamination.rates", "same/wrong-type contamination rates", &C::contamination_rates);

  doubles("sweep.gamma", "localization values", &C::sweep_gamma);
  doubles("sweep.n_beta", "inverse temperature values", &C::sweep_n_beta);
  f.push_back({"sweep.draws", "draw counts (prefixes of the base chain)",
               [](const C& c) { return join<int>(c.sweep_draws, [](const int& x) { return std::to_string(x); }); },
               [](C& c, const std::string& v) {
                 c.sweep_draws.clear();
                 for (const auto& s : split_list(v)) c.sweep_draws.push_back(parse_number<int>("sweep.draws", s));
               }});
  f.push_back({"sweep.trusted", "trusted subsample sizes (class balanced)",
               [](const C& c) {
                 return join<std::size_t>(c.sweep_trusted, [](const std::size_t& x) { return std::to_string(x); });
               },
               [](C& c, const std::string& v) {
                 c.sweep_trusted.clear();
                 for (const auto& s : split_list(v))
                   c.sweep_trusted.push_back(parse_number<std::size_t>("sweep.trusted", s));
               }});
  num("sweep.subsamples", "trusted subsamples averaged per size", &C::sweep_subsamples);
  f.push_back({"sweep.scale_step", "true: hold step_size * gamma at its base value across gamma values",
               [](const C& c) { return std::string(c.sweep_scale_step ? "true" : "false"); },
               [](C& c, const std::string& v) {
                 if (v == "true" || v == "1") c.sweep_scale_step = true;
                 else if (v == "false" || v == "0") c.sweep_scale_step = false;
                 else throw ParameterError("bad value '" + v + "' for sweep.scale_step");
               }});
  return f;
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = build_fields();
  return fields;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields())
    if (f.key == key) {
      try {
        f.set(cfg, value);
      } catch (const InputError& e) {
        throw ParameterError(e.what());
      }
      return;
    }
  throw ParameterError("unknown config key '" + key + "'");
}

std::string config_text(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& f : config_fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

void ExperimentConfig::validate() const {
  if (data_source != "idx" && data_source != "synthetic") throw ParameterError("data.source must be idx or synthetic");
  (void)arch_by_name(arch);
  if (train == 0 || trusted == 0 || sampling == 0 || test_clean == 0 || test_backdoor == 0)
    throw ParameterError("split sizes must be positive");
  if (target < 0 || target > 9) throw ParameterError("attack.target must be a class index");
  if (!(opacity > 0 && opacity <= 1)) throw ParameterError("attack.opacity must lie in (0, 1]");
  if (!(poison_rate > 0 && poison_rate < 1)) throw ParameterError("attack.poison_rate must lie in (0, 1)");
  clean_train.validate();
  backdoor_train.validate();
  sgld.validate(sampling);
  if (methods.empty()) throw ParameterError("detect.methods is empty");
  if (normal != "target_class" && normal != "all_classes")
    throw ParameterError("detect.normal must be target_class or all_classes");
  if (target_clean == 0) throw ParameterError("data.target_clean must be positive");
  if (hessian_samples == 0 || hessian_samples > train) throw ParameterError("spectral.hessian_samples must be in [1, train]");
  if (spectral_population < 2) throw ParameterError("spectral.population must be >= 2");
  if (!(spectral_beta > 0) || !(spectral_gamma > 0)) throw ParameterError("spectral beta and gamma must be positive");
  if (!(energy_threshold > 0 && energy_threshold <= 1)) throw ParameterError("spectral.energy_threshold must lie in (0, 1]");
  if (!(pgd_eps >= 0) || !(pgd_step >= 0) || pgd_iters < 0) throw ParameterError("PGD parameters must be non-negative");
  for (double r : contamination_rates)
    if (!(r > 0 && r <= 0.5)) throw ParameterError("contamination rates must lie in (0, 0.5]");
  for (double g : sweep_gamma)
    if (!(g > 0)) throw ParameterError("sweep.gamma values must be positive");
  for (double b : sweep_n_beta)
    if (!(b >= 0)) throw ParameterError("sweep.n_beta values must be non-negative");
  for (int d : sweep_draws)
    if (d < 2 || d > sgld.steps - sgld.burn_in) throw ParameterError("sweep.draws must lie in [2, steps - burn_in]");
  for (auto t : sweep_trusted)
    if (t == 0 || t > trusted) throw ParameterError("sweep.trusted sizes must lie in [1, data.trusted]");
  if (sweep_subsamples < 1) throw ParameterError("sweep.subsamples must be >= 1");
}

ArchDescriptor arch_by_name(const std::string& name) {
  if (name == "toy_cnn") return toy_cnn_arch();
  if (name == "toy_cnn_large") return toy_cnn_arch_large();
  throw ParameterError("unknown architecture '" + name + "'");
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

SampleList load_experiment_digits(const ExperimentConfig& cfg) {
  if (cfg.data_source == "synthetic") return load_digits(SyntheticDigits{0, cfg.data_limit});
  std::string dir = cfg.data_dir;
  if (dir.empty())
    if (const char* env = std::getenv("MAD_DATA_DIR")) dir = env;
  if (dir.empty()) throw InputError("no data directory: set data.dir or MAD_DATA_DIR");
  auto files = find_idx_files(dir);
  if (!files) throw InputError("no IDX digit files under '" + dir + "'");
  files->limit = cfg.data_limit;
  return load_digits(*files);
}

ToyData prepare_data(const ExperimentConfig& cfg, const SampleList& digits) {
  ToyData d;
  d.trigger.kind = cfg.trigger;
  d.trigger.seed = derive(cfg.seed, 2);
  d.trigger.opacity = cfg.opacity;
  if (cfg.trigger == TriggerSpec::Kind::random_noise) {
    d.other_trigger.kind = TriggerSpec::Kind::checkerboard_patch;
    d.other_trigger.opacity = 1.0;
  } else {
    d.other_trigger.kind = TriggerSpec::Kind::random_noise;
    d.other_trigger.opacity = 0.2;
  }
  d.other_trigger.seed = derive(cfg.seed, 3);

  SplitSpec spec;
  spec.train = cfg.train;
  spec.trusted = cfg.trusted;
  spec.sampling = cfg.sampling;
  spec.test_clean = cfg.test_clean;
  spec.test_backdoor = cfg.test_backdoor;
  spec.seed = derive(cfg.seed, 1);
  spec.target = cfg.target;
  spec.trigger = d.trigger;
  spec.shape = d.shape;
  d.splits = make_splits(digits, spec);
  d.poisoned_train = poison_dataset(d.splits.train, d.trigger, d.shape, cfg.target, cfg.poison_rate, derive(cfg.seed, 4));
  d.hessian = class_balanced_subset(d.splits.train, cfg.hessian_samples, 10, derive(cfg.seed, 5));

  std::set<std::int64_t> used;
  for (const auto* list : {&d.splits.train, &d.splits.trusted, &d.splits.sampling, &d.splits.test_clean,
                           &d.splits.test_backdoor})
    for (const auto& s : *list) used.insert(s.id);
  SampleList pool;
  for (const auto& s : digits)
    if (!used.count(s.id)) pool.push_back(s);
  Rng rng = make_rng(cfg.seed, 0x9001);
  std::shuffle(pool.begin(), pool.end(), rng);

  const std::size_t n = cfg.spectral_population;
  for (const auto& s : d.splits.trusted)
    if (s.label == cfg.target && d.spectral_trusted.size() < n) d.spectral_trusted.push_back(s);
  SampleList rest;
  for (auto s : pool) {
    s.split = Split::test;
    if (s.label == cfg.target && d.spectral_trusted.size() < n) {
      s.split = Split::trusted;
      d.spectral_trusted.push_back(s);
    } else if (s.label == cfg.target && d.spectral_clean.size() < n) {
      d.spectral_clean.push_back(s);
    } else if (s.label != cfg.target && d.spectral_backdoor.size() < n) {
      d.spectral_backdoor.push_back(apply_trigger(s, d.trigger, d.shape, cfg.target));
    } else {
      rest.push_back(s);
    }
  }
  if (d.spectral_trusted.size() < n || d.spectral_clean.size() < n || d.spectral_backdoor.size() < n)
    throw CapacityError("not enough held-out digits for the spectral populations");
  for (const auto& s : d.splits.test_clean)
    if (s.label == cfg.target && d.target_clean.size() < cfg.target_clean) d.target_clean.push_back(s);
  d.pool.clear();
  for (auto& s : rest) {
    if (s.label == cfg.target && d.target_clean.size() < cfg.target_clean) {
      s.split = Split::test;
      d.target_clean.push_back(s);
    } else
      d.pool.push_back(std::move(s));
  }
  if (d.target_clean.size() < cfg.target_clean)
    throw CapacityError("not enough held-out target-class digits for data.target_clean");
  d.ood = gen_ood(OodKind::uniform_noise, cfg.ood, derive(cfg.seed, 6), d.shape);
  return d;
}

double add_adversarial(ToyData& data, const ExperimentConfig& cfg, const ParamVector& model) {
  data.adversarial.clear();
  if (cfg.adversarial == 0) return 0;
  SampleList sources;
  std::vector<int> targets;
  for (const auto& s : data.pool) {
    if (sources.size() == cfg.adversarial) break;
    const int t = (s.label + 1) % model.arch.classes;
    if (t == cfg.target) continue;
    sources.push_back(s);
    targets.push_back(t);
  }
  if (sources.size() < cfg.adversarial) throw CapacityError("not enough held-out digits for adversarial samples");
  data.adversarial = gen_adversarial_pgd(model, sources, cfg.pgd_eps, cfg.pgd_step, cfg.pgd_iters, targets);
  double hit = 0;
  const auto pred = predict_batch(model, stack_inputs(data.adversarial));
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == targets[i];
  return hit / double(pred.size());
}

// ---------------------------------------------------------------------------
// Training and spectra
// ---------------------------------------------------------------------------

TrainedModels train_models(const ExperimentConfig& cfg, const ToyData& data) {
  TrainConfig c = cfg.clean_train, b = cfg.backdoor_train;
  c.seed = derive(cfg.seed, 7);
  b.seed = derive(cfg.seed, 8);
  auto r = train_two_stage(arch_by_name(cfg.arch), data.splits.train, data.poisoned_train, c, b);
  TrainedModels m;
  m.clean = std::move(r.clean);
  m.backdoored = std::move(r.backdoored);
  m.clean_loss = std::move(r.clean_loss);
  m.backdoor_loss = std::move(r.backdoor_loss);
  m.clean_accuracy = accuracy(m.backdoored, data.splits.test_clean);
  m.asr = hit_rate(m.backdoored, data.splits.test_backdoor, cfg.target);
  return m;
}

MatrixXd per_sample_gradients(const ParamVector& w, std::span<const LabeledSample> samples) {
  Network net(w.arch);
  const MatrixXd x = stack_inputs(samples);
  const auto pred = predict_batch(w, x);
  MatrixXd g(w.size(), Index(samples.size()));
  for (Index j = 0; j < x.cols(); ++j) {
    const int t = pred[std::size_t(j)];
    g.col(j) = net.gradient(w.values, x.col(j), std::span<const int>(&t, 1), Reduction::sum);
  }
  return g;
}

SpectralResult analyze_spectrum(const ExperimentConfig& cfg, const TrainedModels& models, const ToyData& data) {
  const ParamVector& w = models.backdoored;
  SpectralResult r;
  r.spectrum = eigendecompose(dense_hessian(w, data.hessian, cfg.hessian_cap).matrix);
  r.spectrum.beta = cfg.spectral_beta;
  r.spectrum.gamma = cfg.spectral_gamma;
  const MatrixXd gt = per_sample_gradients(w, data.spectral_trusted);
  const MatrixXd gc = per_sample_gradients(w, data.spectral_clean);
  const MatrixXd gb = per_sample_gradients(w, data.spectral_backdoor);
  r.report = detection_condition_from_gradients(gt, gc, gb, r.spectrum, cfg.spectral_beta, cfg.spectral_gamma);

  auto mean_mu = [&](const MatrixXd& g) {
    std::vector<EnergyProfile> ps;
    for (Index j = 0; j < g.cols(); ++j) ps.push_back(energy_distribution(g.col(j), r.spectrum));
    return mean_profile(ps).mu;
  };
  const VectorXd mt = mean_mu(gt), mc = mean_mu(gc), mb = mean_mu(gb);
  r.trusted_curve = cumulative_energy(mt);
  r.clean_curve = cumulative_energy(mc);
  r.backdoor_curve = cumulative_energy(mb);
  r.k_trusted = k_at_energy(mt, cfg.energy_threshold);
  r.k_clean = k_at_energy(mc, cfg.energy_threshold);
  r.k_backdoor = k_at_energy(mb, cfg.energy_threshold);
  r.mass_index = k_at_eigenvalue_mass(r.spectrum.values, cfg.energy_threshold);
  r.delta_curve = weight_delta_energy(models.backdoored.values - models.clean.values, r.spectrum);

  const MatrixXd vt = r.spectrum.vectors.transpose();
  const MatrixXd ct = vt * gt, cc = vt * gc, cb = vt * gb;
  r.align_clean = mean_alignment(ct, cc);
  r.align_backdoor = mean_alignment(ct, cb);
  const Index decile = std::max<Index>(1, (r.spectrum.size() + 9) / 10);
  r.sharp_align_clean = r.align_clean.head(decile).mean();
  r.sharp_align_backdoor = r.align_backdoor.head(decile).mean();
  return r;
}

// ---------------------------------------------------------------------------
// Chains and detection
// ---------------------------------------------------------------------------

ChainRun run_detection_chain(const ExperimentConfig& cfg, const ParamVector& w_star, const ToyData& data,
                             bool pathologies, std::span<const ContaminationSpec> contamination) {
  SampleList obs;
  ChainRun run;
  auto add = [&](const SampleList& list, std::vector<std::size_t>& rows) {
    for (const auto& s : list) {
      rows.push_back(obs.size());
      obs.push_back(s);
    }
  };
  add(data.splits.trusted, run.layout.trusted);
  add(data.splits.test_clean, run.layout.test_clean);
  add(data.splits.test_backdoor, run.layout.test_backdoor);
  std::map<std::int64_t, std::size_t> clean_row;
  for (auto i : run.layout.test_clean) clean_row[obs[i].id] = i;
  for (const auto& s : data.target_clean) {
    const auto it = clean_row.find(s.id);
    if (it != clean_row.end()) {
      run.layout.test_target.push_back(it->second);
    } else {
      run.layout.test_target.push_back(obs.size());
      obs.push_back(s);
    }
  }
  run.layout.normal = cfg.normal == "all_classes" ? run.layout.test_clean : run.layout.test_target;
  if (pathologies) {
    add(data.adversarial, run.layout.adversarial);
    add(data.ood, run.layout.ood);
  }

  // replacement rows are shared across specs whose contaminated sample is identical
  std::map<std::pair<int, std::size_t>, std::size_t> extra;
  std::vector<std::string> suffix(obs.size());
  const auto& trusted = data.splits.trusted;
  for (const auto& spec : contamination) {
    const auto c = contaminate_trusted(trusted, spec, data.trigger, data.other_trigger, data.shape, cfg.target);
    std::vector<std::size_t> rows(trusted.size(), npos);
    for (std::size_t i = 0; i < trusted.size(); ++i) {
      if (c[i].input == trusted[i].input && c[i].label == trusted[i].label) continue;
      const int mode = int(spec.mode);
      auto key = std::make_pair(mode, i);
      auto it = extra.find(key);
      if (it != extra.end() && obs[it->second].input == c[i].input) {
        rows[i] = it->second;
        continue;
      }
      rows[i] = obs.size();
      if (it == extra.end()) extra.emplace(key, obs.size());
      obs.push_back(c[i]);
      std::string tag = "#" + to_string(spec.mode);
      if (spec.mode == ContaminationSpec::Mode::gaussian_noise) tag += "-" + fmt_double(spec.sigma);
      suffix.push_back(tag);
    }
    run.layout.contaminated.push_back(std::move(rows));
    run.layout.contamination.push_back(spec);
  }

  SgldConfig sc = cfg.sgld;
  sc.seed = derive(cfg.seed, 9);
  run.traces = run_chain(w_star, data.splits.sampling, obs, sc);
  for (std::size_t i = 0; i < suffix.size(); ++i) run.traces.rows[i].sample_id += suffix[i];
  return run;
}

namespace {

std::vector<std::size_t> concat(std::initializer_list<const std::vector<std::size_t>*> parts) {
  std::vector<std::size_t> out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  return out;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

DetectionResult evaluate_detection(const TraceMatrix& traces, const ChainLayout& layout, Method method, int target,
                                   const std::vector<std::size_t>* trusted_rows) {
  const auto& tr = trusted_rows ? *trusted_rows : layout.trusted;
  const TraceMatrix trusted = traces.select_rows(tr);
  std::vector<std::size_t> test_rows;
  for (auto i : concat({&layout.normal, &layout.test_backdoor}))
    if (traces.rows[i].valid) test_rows.push_back(i);
  const TraceMatrix test = traces.select_rows(test_rows);

  DetectionResult r;
  r.method = method;
  r.scores = detect(test, trusted, method);
  std::vector<double> normal, anomalous;
  std::vector<CleanEval> ce;
  std::vector<BackdoorEval> be;
  double correct = 0, hits = 0;
  for (std::size_t k = 0; k < test.rows.size(); ++k) {
    const auto& row = test.rows[k];
    const double s = r.scores[k].score;
    if (row.provenance == Provenance::clean) {
      normal.push_back(s);
      const bool ok = row.target_label == row.label;
      ce.push_back({s, ok});
      correct += ok;
    } else {
      anomalous.push_back(s);
      const bool hit = row.target_label == target;
      be.push_back({s, hit});
      hits += hit;
    }
  }
  r.roc = auroc(normal, anomalous);
  r.der = der(ce, be, correct / double(ce.size()), hits / double(be.size()));
  return r;
}

MultipathologyResult multipathology(const TraceMatrix& traces, const ChainLayout& layout, Method method) {
  std::vector<std::size_t> rows;
  for (auto i : concat({&layout.normal, &layout.test_backdoor, &layout.adversarial, &layout.ood}))
    if (traces.rows[i].valid) rows.push_back(i);
  MultipathologyResult r;
  r.method = method;
  r.scores = detect(traces.select_rows(rows), traces.select_rows(layout.trusted), method);
  std::map<Provenance, std::vector<double>> groups;
  for (const auto& s : r.scores) groups[s.provenance].push_back(s.score);
  for (const auto& [p, v] : groups) {
    PopulationSummary ps;
    ps.provenance = p;
    ps.count = v.size();
    ps.median = median_of(v);
    double sum = 0;
    for (double x : v) sum += x;
    ps.mean = sum / double(v.size());
    r.populations.push_back(ps);
  }
  const auto clean = std::find_if(r.populations.begin(), r.populations.end(),
                                  [](const auto& p) { return p.provenance == Provenance::clean; });
  r.clean_highest = clean != r.populations.end();
  for (const auto& p : r.populations)
    if (p.provenance != Provenance::clean && clean != r.populations.end() && !(clean->median > p.median))
      r.clean_highest = false;
  return r;
}

CouplingMatrix offline_coupling(const TraceMatrix& traces, const ChainLayout& layout) {
  auto rows = concat({&layout.test_clean, &layout.test_backdoor, &layout.adversarial, &layout.ood});
  for (auto i : layout.test_target)
    if (std::find(layout.test_clean.begin(), layout.test_clean.end(), i) == layout.test_clean.end()) rows.push_back(i);
  const TraceMatrix t = traces.select_rows(rows);
  return coupling_matrix(t, t, Measure::pearson);
}

std::vector<ContaminationSpec> default_contamination(const ExperimentConfig& cfg) {
  std::vector<ContaminationSpec> out;
  for (auto mode : {ContaminationSpec::Mode::same_type, ContaminationSpec::Mode::wrong_type}) {
    std::vector<double> rates = {0.0};
    rates.insert(rates.end(), cfg.contamination_rates.begin(), cfg.contamination_rates.end());
    for (double r : rates) {
      ContaminationSpec s;
      s.mode = mode;
      s.rate = r;
      s.seed = derive(cfg.seed, 10);
      out.push_back(s);
    }
  }
  return out;
}

std::vector<ContaminationRow> contamination_study(const ChainRun& run, std::span<const Method> methods, int target) {
  std::vector<ContaminationRow> out;
  for (std::size_t k = 0; k < run.layout.contamination.size(); ++k) {
    std::vector<std::size_t> trusted = run.layout.trusted;
    for (std::size_t i = 0; i < trusted.size(); ++i)
      if (run.layout.contaminated[k][i] != npos) trusted[i] = run.layout.contaminated[k][i];
    for (Method m : methods) {
      if (m == Method::mahalanobis) continue;
      ContaminationRow row;
      row.spec = run.layout.contamination[k];
      row.method = m;
      row.auroc = evaluate_detection(run.traces, run.layout, m, target, &trusted).roc.auroc;
      out.push_back(row);
    }
  }
  return out;
}

namespace {

std::vector<std::size_t> balanced_rows(const TraceMatrix& traces, const std::vector<std::size_t>& rows,
                                       std::size_t count, std::uint64_t seed) {
  if (count >= rows.size()) return rows;
  std::map<int, std::vector<std::size_t>> by_label;
  for (auto i : rows) by_label[traces.rows[i].label].push_back(i);
  Rng rng = make_rng(seed, 0x5b5a);
  for (auto& [label, v] : by_label) std::shuffle(v.begin(), v.end(), rng);
  // round robin over classes keeps shares within one of each other
  std::vector<std::size_t> out;
  for (std::size_t depth = 0; out.size() < count; ++depth)
    for (auto& [label, v] : by_label)
      if (depth < v.size() && out.size() < count) out.push_back(v[depth]);
  return out;
}

}  // namespace

std::vector<SensitivityRow> sensitivity_sweep(const ExperimentConfig& cfg, const ParamVector& w_star,
                                              const ToyData& data, const ChainRun* base) {
  std::vector<SensitivityRow> out;
  std::vector<Method> methods;
  for (Method m : cfg.methods)
    if (m != Method::mahalanobis) methods.push_back(m);
  const int full = cfg.sgld.steps - cfg.sgld.burn_in;
  std::vector<std::pair<double, double>> grid;
  for (double gamma : cfg.sweep_gamma)
    for (double n_beta : cfg.sweep_n_beta) grid.emplace_back(gamma, n_beta);
  // draw counts and trusted sizes are varied on the base pair, or the first pair if absent
  std::size_t vary = 0;
  for (std::size_t k = 0; k < grid.size(); ++k)
    if (grid[k] == std::make_pair(cfg.sgld.gamma, cfg.sgld.n_beta)) vary = k;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const auto [gamma, n_beta] = grid[k];
    const bool is_base = gamma == cfg.sgld.gamma && n_beta == cfg.sgld.n_beta;
    ChainRun local;
    const ChainRun* run = is_base && base ? base : nullptr;
    if (!run) {
      ExperimentConfig c = cfg;
      c.sgld.gamma = gamma;
      c.sgld.n_beta = n_beta;
      if (cfg.sweep_scale_step) c.sgld.step_size = cfg.sgld.step_size * cfg.sgld.gamma / gamma;
      local = run_detection_chain(c, w_star, data, false, {});
      run = &local;
    }
    for (Method m : methods)
      out.push_back({gamma, n_beta, full, run->layout.trusted.size(), m,
                     evaluate_detection(run->traces, run->layout, m, cfg.target).roc.auroc});
    if (k != vary) continue;
    for (int d : cfg.sweep_draws) {
      if (d == full) continue;
      const TraceMatrix t = run->traces.first_draws(d);
      for (Method m : methods)
        out.push_back({gamma, n_beta, d, run->layout.trusted.size(), m,
                       evaluate_detection(t, run->layout, m, cfg.target).roc.auroc});
    }
    for (std::size_t size : cfg.sweep_trusted) {
      if (size == run->layout.trusted.size()) continue;
      for (Method m : methods) {
        double acc = 0;
        for (int j = 0; j < cfg.sweep_subsamples; ++j) {
          const auto rows = balanced_rows(run->traces, run->layout.trusted, size, derive(cfg.seed, 100 + j));
          acc += evaluate_detection(run->traces, run->layout, m, cfg.target, &rows).roc.auroc;
        }
        out.push_back({gamma, n_beta, full, size, m, acc / cfg.sweep_subsamples});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// End to end
// ---------------------------------------------------------------------------

ToyReport run_toy(const ExperimentConfig& cfg, const ToyOptions& options, const ProgressFn& progress) {
  cfg.validate();
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  ToyReport r;
  r.seed = cfg.seed;
  r.normal = cfg.normal;
  note("loading digits");
  const SampleList digits = load_experiment_digits(cfg);
  ToyData data = prepare_data(cfg, digits);
  note("training");
  r.models = train_models(cfg, data);
  if (options.pathologies) {
    note("generating adversarial samples");
    r.adversarial_success = add_adversarial(data, cfg, r.models.backdoored);
  }
  if (options.spectral) {
    note("spectral analysis");
    r.spectral = analyze_spectrum(cfg, r.models, data);
    r.has_spectral = true;
  }
  const bool need_chain = options.detection || options.pathologies || options.contamination || options.sensitivity;
  if (!need_chain) return r;
  note("sampling");
  const auto specs = options.contamination ? default_contamination(cfg) : std::vector<ContaminationSpec>{};
  r.chain = run_detection_chain(cfg, r.models.backdoored, data, options.pathologies, specs);
  for (Method m : cfg.methods) {
    if (m == Method::mahalanobis) {
      SampleList test = cfg.normal == "all_classes" ? data.splits.test_clean : data.target_clean;
      test.insert(test.end(), data.splits.test_backdoor.begin(), data.splits.test_backdoor.end());
      DetectionResult d;
      d.method = m;
      d.scores = mahalanobis_baseline(r.models.backdoored, data.splits.trusted, test);
      std::vector<double> normal, anomalous;
      std::vector<CleanEval> ce;
      std::vector<BackdoorEval> be;
      const auto pred = predict_batch(r.models.backdoored, stack_inputs(test));
      double ok = 0, hit = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        if (test[i].provenance == Provenance::clean) {
          normal.push_back(d.scores[i].score);
          ce.push_back({d.scores[i].score, pred[i] == test[i].label});
          ok += pred[i] == test[i].label;
        } else {
          anomalous.push_back(d.scores[i].score);
          be.push_back({d.scores[i].score, pred[i] == cfg.target});
          hit += pred[i] == cfg.target;
        }
      }
      d.roc = auroc(normal, anomalous);
      d.der = der(ce, be, ok / double(ce.size()), hit / double(be.size()));
      if (options.detection) r.detection.push_back(std::move(d));
      continue;
    }
    if (options.detection) {
      r.detection.push_back(evaluate_detection(r.chain.traces, r.chain.layout, m, cfg.target));
      ChainLayout all = r.chain.layout;
      all.normal = all.test_clean;
      r.detection_all_classes.push_back(evaluate_detection(r.chain.traces, all, m, cfg.target));
    }
    if (options.pathologies) r.multipathology.push_back(multipathology(r.chain.traces, r.chain.layout, m));
  }
  if (options.contamination) r.contamination = contamination_study(r.chain, cfg.methods, cfg.target);
  if (options.sensitivity) {
    note("sensitivity sweep");
    r.sensitivity = sensitivity_sweep(cfg, r.models.backdoored, data, &r.chain);
  }
  return r;
}

namespace {

std::string g17(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string detection_csv(const ToyReport& r) {
  std::ostringstream os;
  os << "seed,normal,method,auroc,der,threshold,post_cacc,post_asr,baseline_cacc,baseline_asr\n";
  const std::string normal = r.normal;
  auto row = [&](const DetectionResult& d, const std::string& population) {
    os << r.seed << ',' << population << ',' << to_string(d.method) << ',' << g17(d.roc.auroc) << ',' << g17(d.der.der) << ','
       << g17(d.der.threshold) << ',' << g17(d.der.post_cacc) << ',' << g17(d.der.post_asr) << ','
       << g17(d.der.baseline_cacc) << ',' << g17(d.der.baseline_asr) << '\n';
  };
  for (const auto& d : r.detection) row(d, normal);
  for (const auto& d : r.detection_all_classes)
    if (normal != "all_classes") row(d, "all_classes");
  return os.str();
}

std::string contamination_csv(std::span<const ContaminationRow> rows, std::uint64_t seed) {
  std::ostringstream os;
  os << "seed,mode,rate,sigma,method,auroc\n";
  for (const auto& r : rows)
    os << seed << ',' << to_string(r.spec.mode) << ',' << g17(r.spec.rate) << ',' << g17(r.spec.sigma) << ','
       << to_string(r.method) << ',' << g17(r.auroc) << '\n';
  return os.str();
}

std::string sensitivity_csv(std::span<const SensitivityRow> rows, std::uint64_t seed) {
  std::ostringstream os;
  os << "seed,gamma,n_beta,draws,trusted,method,auroc\n";
  for (const auto& r : rows)
    os << seed << ',' << g17(r.gamma) << ',' << g17(r.n_beta) << ',' << r.draws << ',' << r.trusted << ','
       << to_string(r.method) << ',' << g17(r.auroc) << '\n';
  return os.str();
}

std::string multipathology_csv(std::span<const MultipathologyResult> rows, std::uint64_t seed) {
  std::ostringstream os;
  os << "seed,method,population,count,median,mean\n";
  for (const auto& m : rows)
    for (const auto& p : m.populations)
      os << seed << ',' << to_string(m.method) << ',' << to_string(p.provenance) << ',' << p.count << ','
         << g17(p.median) << ',' << g17(p.mean) << '\n';
  return os.str();
}

std::string spectral_curves_csv(const SpectralResult& s) {
  std::ostringstream os;
  os << "index,lambda,trusted,clean,backdoor,weight_delta,align_clean,align_backdoor\n";
  for (Index i = 0; i < s.spectrum.size(); ++i)
    os << i + 1 << ',' << g17(s.spectrum.values(i)) << ',' << g17(s.trusted_curve(i)) << ',' << g17(s.clean_curve(i))
       << ',' << g17(s.backdoor_curve(i)) << ',' << g17(s.delta_curve(i)) << ',' << g17(s.align_clean(i)) << ','
       << g17(s.align_backdoor(i)) << '\n';
  return os.str();
}

std::string seed_summary_csv(std::span<const ToyReport> reports) {
  std::map<std::string, std::vector<double>> metrics;
  std::vector<std::string> order;
  auto put = [&](const std::string& k, double v) {
    if (!metrics.count(k)) order.push_back(k);
    metrics[k].push_back(v);
  };
  for (const auto& r : reports) {
    put("clean_accuracy", r.models.clean_accuracy);
    put("asr", r.models.asr);
    if (r.has_spectral) put("r2a", r.spectral.report.product);
    for (const auto& d : r.detection) put("auroc_" + to_string(d.method), d.roc.auroc);
  }
  std::ostringstream os;
  os << "metric,mean,std,n\n";
  for (const auto& k : order) {
    const auto& v = metrics[k];
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
    os << k << ',' << g17(mean) << ',' << g17(sd) << ',' << v.size() << '\n';
  }
  return os.str();
}

}  // namespace mad
