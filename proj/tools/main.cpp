#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mad/error.hpp"
#include "mad/experiment.hpp"
#include "report.hpp"

namespace fs = std::filesystem;
using namespace mad;
using namespace mad::cli;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
  bool force = false;
  int threads = 1;
  std::map<std::string, std::string> overrides;  // "section.key" -> flag value
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// "[section]" headers and "key = value" lines; '#' and ';' start comments.
void apply_ini(ExperimentConfig& cfg, const std::string& path) {
  if (!fs::exists(path)) throw InputError("config file '" + path + "' not found");
  std::istringstream in(read_file(path));
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find_first_of("#;")));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParameterError(path + ":" + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParameterError(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    set_config_value(cfg, section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
}

ExperimentConfig resolve_config(const Globals& g, const CLI::App& app) {
  ExperimentConfig cfg;
  if (!g.config_path.empty()) apply_ini(cfg, g.config_path);
  for (const auto& [key, value] : g.overrides)
    if (app.count("--" + key)) set_config_value(cfg, key, value);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void note(const std::string& s) { std::cerr << "mad: " << s << '\n'; }

/// Names the run directory and checks it before any compute.
struct Run {
  std::string command;
  std::string hash;
  fs::path path;
  std::vector<std::pair<std::string, fs::path>> inputs;

  Run(const Globals& g, const ExperimentConfig& cfg, std::string cmd, const std::vector<std::pair<std::string, fs::path>>& in,
      const std::string& options = "")
      : command(std::move(cmd)), inputs(in) {
    std::string key = command + "\n" + config_text(cfg) + options + "\n";
    for (const auto& [role, p] : inputs) key += role + " " + sha1_hex(read_file(p)) + "\n";
    hash = sha1_hex(key);
    path = fs::path(g.out_dir) / (command + "-" + hash.substr(0, 12));
    if (fs::exists(path) && !g.force)
      throw ParameterError("run directory '" + path.string() + "' exists; pass --force to replace it");
  }

  RunDir open(const Globals& g, const ExperimentConfig& cfg) const {
    RunDir dir(path, g.force);
    dir.write("config.ini", config_text(cfg));
    for (const auto& [role, p] : inputs) dir.input(role, p);
    return dir;
  }

  void close(RunDir& dir, const ExperimentConfig& cfg) const {
    dir.finish(command, hash, cfg.seed);
    std::cout << dir.path().string() << '\n';
  }
};

std::string g17(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string as_string(const std::vector<std::uint8_t>& b) { return std::string(b.begin(), b.end()); }
std::vector<std::uint8_t> as_bytes(const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); }

ParamVector read_checkpoint(const fs::path& p) { return decode_checkpoint(as_bytes(read_file(p))); }

TraceMatrix read_traces(const fs::path& p) {
  const std::string bytes = read_file(p);
  if (p.extension() == ".madt") return decode_traces(as_bytes(bytes));
  return parse_trace_csv(bytes);
}

ToyData load_data(const ExperimentConfig& cfg) {
  note("loading digits");
  return prepare_data(cfg, load_experiment_digits(cfg));
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string roc_svg(const std::string& title, const std::vector<std::pair<std::string, RocResult>>& rocs) {
  std::vector<Series> series;
  for (const auto& [name, roc] : rocs) {
    Series s{name + " (" + g17(std::round(roc.auroc * 1000) / 1000) + ")", {}, {}};
    for (const auto& p : roc.points) {
      s.x.push_back(p.fpr);
      s.y.push_back(p.tpr);
    }
    series.push_back(std::move(s));
  }
  return svg_lines(title, "false positive rate", "true positive rate", series, true);
}

// ---------------------------------------------------------------------------

int cmd_train(const Globals& g, const CLI::App& app) {
  const auto cfg = resolve_config(g, app);
  Run run(g, cfg, "train", {});
  const auto data = load_data(cfg);
  note("training");
  const auto m = train_models(cfg, data);

  RunDir dir = run.open(g, cfg);
  dir.write("clean.madw", as_string(encode_checkpoint(m.clean)));
  dir.write("backdoored.madw", as_string(encode_checkpoint(m.backdoored)));
  std::ostringstream loss;
  loss << "stage,epoch,loss\n";
  for (std::size_t e = 0; e < m.clean_loss.size(); ++e) loss << "clean," << e << ',' << g17(m.clean_loss[e]) << '\n';
  for (std::size_t e = 0; e < m.backdoor_loss.size(); ++e)
    loss << "backdoor," << e << ',' << g17(m.backdoor_loss[e]) << '\n';
  dir.write("losses.csv", loss.str());
  dir.write("metrics.csv", "metric,value\nclean_accuracy," + g17(m.clean_accuracy) + "\nasr," + g17(m.asr) + "\n");
  SampleList all;
  for (const auto* list : {&data.splits.train, &data.splits.trusted, &data.splits.sampling, &data.splits.test_clean,
                           &data.splits.test_backdoor})
    all.insert(all.end(), list->begin(), list->end());
  dir.write("splits.csv", manifest_csv(all));
  std::vector<Series> curves{{"clean", {}, {}}, {"backdoor", {}, {}}};
  for (std::size_t e = 0; e < m.clean_loss.size(); ++e) {
    curves[0].x.push_back(double(e));
    curves[0].y.push_back(m.clean_loss[e]);
  }
  for (std::size_t e = 0; e < m.backdoor_loss.size(); ++e) {
    curves[1].x.push_back(double(m.clean_loss.size() + e));
    curves[1].y.push_back(m.backdoor_loss[e]);
  }
  dir.write("losses.svg", svg_lines("training loss", "epoch", "mean loss", curves));
  run.close(dir, cfg);
  return 0;
}

int cmd_sample(const Globals& g, const CLI::App& app, const std::string& checkpoint, bool pathologies) {
  const auto cfg = resolve_config(g, app);
  Run run(g, cfg, "sample", {{"checkpoint", checkpoint}}, pathologies ? "pathologies" : "");
  const ParamVector w = read_checkpoint(checkpoint);
  auto data = load_data(cfg);
  if (pathologies) {
    note("generating adversarial samples");
    add_adversarial(data, cfg, w);
  }
  note("sampling");
  const auto chain = run_detection_chain(cfg, w, data, pathologies, {});

  std::vector<std::string> role(chain.traces.rows.size(), "other");
  for (auto i : chain.layout.trusted) role[i] = "trusted";
  for (auto i : chain.layout.normal) role[i] = "normal";
  for (auto i : chain.layout.test_backdoor) role[i] = "anomalous";
  std::ostringstream labels;
  labels << "sample_id,provenance,label,prediction,role\n";
  for (std::size_t i = 0; i < role.size(); ++i) {
    const auto& r = chain.traces.rows[i];
    labels << r.sample_id << ',' << to_string(r.provenance) << ',' << r.label << ',' << r.target_label << ','
           << role[i] << '\n';
  }

  RunDir dir = run.open(g, cfg);
  dir.write("traces.csv", trace_csv(chain.traces));
  dir.write("traces.madt", as_string(encode_traces(chain.traces)));
  dir.write("labels.csv", labels.str());
  run.close(dir, cfg);
  return 0;
}

int cmd_score(const Globals& g, const CLI::App& app, const std::string& traces_path,
              const std::vector<std::string>& method_names) {
  const auto cfg = resolve_config(g, app);
  std::vector<Method> methods;
  for (const auto& m : method_names) methods.push_back(method_from_string(m));
  if (methods.empty()) methods = cfg.methods;
  std::string opts = "methods";
  for (Method m : methods) {
    if (m == Method::mahalanobis) throw ParameterError("mahalanobis scores activations, not traces; use reproduce-toy");
    opts += " " + to_string(m);
  }
  Run run(g, cfg, "score", {{"traces", traces_path}}, opts);
  const TraceMatrix traces = read_traces(traces_path);

  std::vector<std::size_t> trusted, test;
  for (std::size_t i = 0; i < traces.rows.size(); ++i) {
    const auto& id = traces.rows[i].sample_id;
    if (id.rfind("trusted", 0) != 0) test.push_back(i);
    else if (id.rfind("trusted:", 0) == 0 && id.find('#') == std::string::npos) trusted.push_back(i);
  }
  if (trusted.empty()) throw InputError("'" + traces_path + "' has no trusted rows");
  if (test.empty()) throw InputError("'" + traces_path + "' has no test rows");
  const TraceMatrix t = traces.select_rows(trusted), x = traces.select_rows(test);
  std::vector<DetectionScore> scores;
  for (Method m : methods) {
    note("scoring " + to_string(m));
    const auto s = detect(x, t, m);
    scores.insert(scores.end(), s.begin(), s.end());
  }

  RunDir dir = run.open(g, cfg);
  dir.write("scores.csv", scores_csv(scores));
  run.close(dir, cfg);
  return 0;
}

struct LabelRow {
  std::string provenance;
  int label = 0, prediction = 0;
  std::string role;
};

std::map<std::string, LabelRow> parse_labels(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || trim(line) != "sample_id,provenance,label,prediction,role")
    throw InputError("'" + path + "' is not a labels file (expected sample_id,provenance,label,prediction,role)");
  std::map<std::string, LabelRow> out;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw InputError("'" + path + "': malformed row '" + line + "'");
    try {
      out[f[0]] = {f[1], std::stoi(f[2]), std::stoi(f[3]), f[4]};
    } catch (const std::exception&) {
      throw InputError("'" + path + "': malformed row '" + line + "'");
    }
  }
  return out;
}

int cmd_eval(const Globals& g, const CLI::App& app, const std::string& scores_path, const std::string& labels_path) {
  const auto cfg = resolve_config(g, app);
  Run run(g, cfg, "eval", {{"scores", scores_path}, {"labels", labels_path}});
  const auto scores = parse_scores_csv(read_file(scores_path));
  if (scores.empty()) throw InputError("score file '" + scores_path + "' has no rows");
  const auto labels = parse_labels(labels_path);

  std::vector<Method> order;
  for (const auto& s : scores)
    if (std::find(order.begin(), order.end(), s.method) == order.end()) order.push_back(s.method);

  std::ostringstream metrics, pops, ratio_csv;
  metrics << "method,n_normal,n_anomalous,auroc,der,threshold,post_cacc,post_asr,baseline_cacc,baseline_asr\n";
  pops << "method,provenance,count,median,mean\n";
  ratio_csv << "method,threshold,rejection_ratio,der\n";
  std::vector<std::pair<std::string, RocResult>> rocs;
  std::vector<Series> der_series;
  std::vector<std::pair<std::string, std::string>> hists;

  for (Method m : order) {
    std::vector<double> normal, anomalous;
    std::vector<CleanEval> ce;
    std::vector<BackdoorEval> be;
    std::map<std::string, std::vector<double>> by_prov;
    for (const auto& s : scores) {
      if (s.method != m) continue;
      by_prov[to_string(s.provenance)].push_back(s.score);
      const auto it = labels.find(s.sample_id);
      if (it == labels.end()) throw InputError("sample '" + s.sample_id + "' missing from '" + labels_path + "'");
      const auto& l = it->second;
      if (l.role == "normal") {
        normal.push_back(s.score);
        ce.push_back({s.score, l.prediction == l.label});
      } else if (l.role == "anomalous") {
        anomalous.push_back(s.score);
        be.push_back({s.score, l.prediction == l.label});
      }
    }
    if (normal.empty() || anomalous.empty())
      throw InputError("method " + to_string(m) + " needs both normal and anomalous scored samples");
    double ok = 0, hit = 0;
    for (const auto& c : ce) ok += c.correct;
    for (const auto& b : be) hit += b.hits_target;
    const double base_cacc = ok / double(ce.size()), base_asr = hit / double(be.size());
    const RocResult roc = auroc(normal, anomalous);
    const DerResult d = der(ce, be, base_cacc, base_asr);
    metrics << to_string(m) << ',' << normal.size() << ',' << anomalous.size() << ',' << g17(roc.auroc) << ','
            << g17(d.der) << ',' << g17(d.threshold) << ',' << g17(d.post_cacc) << ',' << g17(d.post_asr) << ','
            << g17(base_cacc) << ',' << g17(base_asr) << '\n';
    for (const auto& [prov, v] : by_prov) {
      double mean = 0;
      for (double x : v) mean += x;
      pops << to_string(m) << ',' << prov << ',' << v.size() << ',' << g17(median(v)) << ','
           << g17(mean / double(v.size())) << '\n';
    }
    rocs.emplace_back(to_string(m), roc);

    // DER as the rejection threshold moves through every distinct score
    std::vector<double> cuts(normal);
    cuts.insert(cuts.end(), anomalous.begin(), anomalous.end());
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    cuts.push_back(std::numeric_limits<double>::infinity());
    Series s{to_string(m), {}, {}};
    const double total = double(ce.size() + be.size());
    for (double t : cuts) {
      double acc = 0, asr = 0, rejected = 0;
      for (const auto& c : ce) {
        if (c.score >= t) acc += c.correct;
        else rejected += 1;
      }
      for (const auto& b : be) {
        if (b.score >= t) asr += b.hits_target;
        else rejected += 1;
      }
      const double dv = der_value(base_asr - asr / double(be.size()), base_cacc - acc / double(ce.size()));
      ratio_csv << to_string(m) << ',' << g17(t) << ',' << g17(rejected / total) << ',' << g17(dv) << '\n';
      s.x.push_back(rejected / total);
      s.y.push_back(dv);
    }
    der_series.push_back(std::move(s));

    std::vector<std::pair<std::string, std::vector<double>>> groups(by_prov.begin(), by_prov.end());
    hists.emplace_back("hist_" + to_string(m) + ".svg", svg_histograms("scores: " + to_string(m), groups));
  }

  RunDir dir = run.open(g, cfg);
  dir.write("metrics.csv", metrics.str());
  dir.write("populations.csv", pops.str());
  dir.write("der_ratio.csv", ratio_csv.str());
  dir.write("roc.svg", roc_svg("ROC (normal = positive)", rocs));
  dir.write("der_ratio.svg", svg_lines("DER vs rejection ratio", "fraction rejected", "DER", der_series));
  for (const auto& [name, svg] : hists) dir.write(name, svg);
  run.close(dir, cfg);
  return 0;
}

std::string spectral_summary(const SpectralResult& s) {
  std::ostringstream os;
  const auto at = [](const Eigen::VectorXd& v, int i) { return i > 0 && i <= v.size() ? v(i - 1) : std::nan(""); };
  os << "metric,value\n"
     << "r2a," << g17(s.report.product) << '\n'
     << "r2a_empirical," << g17(s.report.product_emp) << '\n'
     << "k_trusted," << s.k_trusted << '\n'
     << "k_clean," << s.k_clean << '\n'
     << "k_backdoor," << s.k_backdoor << '\n'
     << "mass_index," << s.mass_index << '\n'
     << "delta_at_mass," << g17(at(s.delta_curve, s.mass_index)) << '\n'
     << "clean_at_mass," << g17(at(s.clean_curve, s.mass_index)) << '\n'
     << "sharp_align_clean," << g17(s.sharp_align_clean) << '\n'
     << "sharp_align_backdoor," << g17(s.sharp_align_backdoor) << '\n';
  return os.str();
}

void write_spectral(RunDir& dir, const ExperimentConfig& cfg, const SpectralResult& s, const std::string& prefix = "") {
  dir.write(prefix + "spectrum.mads", as_string(encode_spectrum(s.spectrum)));
  dir.write(prefix + "spectrum.csv", spectrum_csv(s.spectrum, cfg.spectral_beta, cfg.spectral_gamma));
  dir.write(prefix + "condition.json", to_json(s.report));
  dir.write(prefix + "curves.csv", spectral_curves_csv(s));
  dir.write(prefix + "spectral_summary.csv", spectral_summary(s));
  Series eig{"log10 lambda", {}, {}};
  for (Eigen::Index i = 0; i < s.spectrum.values.size(); ++i)
    if (s.spectrum.values(i) > 0) {
      eig.x.push_back(double(i + 1));
      eig.y.push_back(std::log10(s.spectrum.values(i)));
    }
  dir.write(prefix + "eigenspectrum.svg", svg_lines("Hessian eigenspectrum", "index", "log10 eigenvalue", {eig}));
  std::vector<Series> energy{{"trusted", {}, {}}, {"clean", {}, {}}, {"backdoor", {}, {}}, {"weight delta", {}, {}}};
  const Eigen::VectorXd* curves[] = {&s.trusted_curve, &s.clean_curve, &s.backdoor_curve, &s.delta_curve};
  for (int k = 0; k < 4; ++k)
    for (Eigen::Index i = 0; i < curves[k]->size(); ++i) {
      energy[std::size_t(k)].x.push_back(double(i + 1));
      energy[std::size_t(k)].y.push_back((*curves[k])(i));
    }
  dir.write(prefix + "energy.svg", svg_lines("cumulative energy", "eigen-direction", "fraction", energy));
}

int cmd_spectral(const Globals& g, const CLI::App& app, const std::string& train_dir, std::string clean,
                 std::string backdoored) {
  const auto cfg = resolve_config(g, app);
  if (!train_dir.empty()) {
    clean = (fs::path(train_dir) / "clean.madw").string();
    backdoored = (fs::path(train_dir) / "backdoored.madw").string();
  }
  if (clean.empty() || backdoored.empty()) throw ParameterError("spectral needs --train-dir or --clean and --backdoored");
  Run run(g, cfg, "spectral", {{"clean", clean}, {"backdoored", backdoored}});
  TrainedModels models;
  models.clean = read_checkpoint(clean);
  models.backdoored = read_checkpoint(backdoored);
  const auto d = models.backdoored.size();
  if (d > cfg.hessian_cap)
    throw CapacityError("dense Hessian of dimension " + std::to_string(d) + " exceeds spectral.hessian_cap " +
                        std::to_string(cfg.hessian_cap));
  const auto data = load_data(cfg);
  note("spectral analysis");
  const auto s = analyze_spectrum(cfg, models, data);

  RunDir dir = run.open(g, cfg);
  write_spectral(dir, cfg, s);
  run.close(dir, cfg);
  return 0;
}

int cmd_sweep(const Globals& g, const CLI::App& app, const std::string& checkpoint) {
  const auto cfg = resolve_config(g, app);
  Run run(g, cfg, "sweep", {{"checkpoint", checkpoint}});
  const ParamVector w = read_checkpoint(checkpoint);
  const auto data = load_data(cfg);
  note("sensitivity sweep");
  const auto rows = sensitivity_sweep(cfg, w, data);

  std::vector<Series> by_gamma;
  for (Method m : cfg.methods) {
    Series s{to_string(m), {}, {}};
    for (const auto& r : rows)
      if (r.method == m && r.draws == cfg.sgld.steps - cfg.sgld.burn_in && r.trusted == cfg.trusted &&
          r.n_beta == cfg.sweep_n_beta.front()) {
        s.x.push_back(std::log10(r.gamma));
        s.y.push_back(r.auroc);
      }
    by_gamma.push_back(std::move(s));
  }
  RunDir dir = run.open(g, cfg);
  dir.write("sensitivity.csv", sensitivity_csv(rows, cfg.seed));
  dir.write("sensitivity_gamma.svg", svg_lines("AUROC vs localization", "log10 gamma", "AUROC", by_gamma));
  run.close(dir, cfg);
  return 0;
}

std::vector<Series> contamination_series(const std::vector<ContaminationRow>& rows) {
  std::map<std::string, Series> m;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    const std::string key = to_string(r.method) + " " + to_string(r.spec.mode);
    if (!m.count(key)) {
      order.push_back(key);
      m[key].label = key;
    }
    m[key].x.push_back(100 * r.spec.rate);
    m[key].y.push_back(r.auroc);
  }
  std::vector<Series> out;
  for (const auto& k : order) out.push_back(m[k]);
  return out;
}

int cmd_contaminate(const Globals& g, const CLI::App& app, const std::string& checkpoint) {
  const auto cfg = resolve_config(g, app);
  Run run(g, cfg, "contaminate", {{"checkpoint", checkpoint}});
  const ParamVector w = read_checkpoint(checkpoint);
  const auto data = load_data(cfg);
  note("sampling");
  const auto specs = default_contamination(cfg);
  const auto chain = run_detection_chain(cfg, w, data, false, specs);
  const auto rows = contamination_study(chain, cfg.methods, cfg.target);

  RunDir dir = run.open(g, cfg);
  dir.write("contamination.csv", contamination_csv(rows, cfg.seed));
  dir.write("contamination.svg",
            svg_lines("AUROC vs trusted-set contamination", "contamination (%)", "AUROC", contamination_series(rows)));
  run.close(dir, cfg);
  return 0;
}

std::string metrics_csv(const ToyReport& r) {
  std::ostringstream os;
  os << "metric,value\n"
     << "clean_accuracy," << g17(r.models.clean_accuracy) << '\n'
     << "asr," << g17(r.models.asr) << '\n'
     << "adversarial_success," << g17(r.adversarial_success) << '\n'
     << "invalid_trace_rows," << r.chain.traces.invalid_count() << '\n';
  return os.str();
}

int cmd_reproduce(const Globals& g, const CLI::App& app, int seeds, bool sensitivity) {
  const auto cfg = resolve_config(g, app);
  if (seeds < 1) throw ParameterError("--seeds must be at least 1");
  Run run(g, cfg, "reproduce-toy", {}, "seeds " + std::to_string(seeds) + (sensitivity ? " sensitivity" : ""));
  ToyOptions opt;
  opt.sensitivity = sensitivity;

  std::vector<ToyReport> reports(static_cast<std::size_t>(seeds));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(seeds));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i; (i = next++) < seeds;) {
      ExperimentConfig c = cfg;
      c.seed = cfg.seed + std::uint64_t(i);
      try {
        reports[std::size_t(i)] = run_toy(c, opt, [&](const std::string& s) { note("seed " + std::to_string(c.seed) + ": " + s); });
      } catch (...) {
        errors[std::size_t(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::clamp(g.threads, 1, seeds); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  RunDir dir = run.open(g, cfg);
  for (const auto& r : reports) {
    const std::string p = "seed-" + std::to_string(r.seed) + "/";
    dir.write(p + "clean.madw", as_string(encode_checkpoint(r.models.clean)));
    dir.write(p + "backdoored.madw", as_string(encode_checkpoint(r.models.backdoored)));
    dir.write(p + "metrics.csv", metrics_csv(r));
    write_spectral(dir, cfg, r.spectral, p);
    dir.write(p + "detection.csv", detection_csv(r));
    std::vector<DetectionScore> scores;
    std::vector<std::pair<std::string, RocResult>> rocs;
    for (const auto& d : r.detection) {
      scores.insert(scores.end(), d.scores.begin(), d.scores.end());
      rocs.emplace_back(to_string(d.method), d.roc);
    }
    dir.write(p + "scores.csv", scores_csv(scores));
    dir.write(p + "roc.svg", roc_svg("ROC, seed " + std::to_string(r.seed), rocs));
    dir.write(p + "multipathology.csv", multipathology_csv(r.multipathology, r.seed));
    dir.write(p + "contamination.csv", contamination_csv(r.contamination, r.seed));
    dir.write(p + "contamination.svg", svg_lines("AUROC vs trusted-set contamination", "contamination (%)", "AUROC",
                                                 contamination_series(r.contamination)));
    if (sensitivity) dir.write(p + "sensitivity.csv", sensitivity_csv(r.sensitivity, r.seed));
  }
  const std::string summary = seed_summary_csv(reports);
  dir.write("summary.csv", summary);
  std::istringstream in(summary);
  std::ostringstream txt;
  std::string line;
  std::getline(in, line);
  txt << "seeds " << cfg.seed << ".." << cfg.seed + std::uint64_t(seeds - 1) << '\n';
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-20s %.4f +/- %.4f (n=%s)\n", f[0].c_str(), std::stod(f[1]), std::stod(f[2]),
                  f[3].c_str());
    txt << buf;
  }
  dir.write("summary.txt", txt.str());
  run.close(dir, cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mechanistic anomaly detection with Bayesian influence functions"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "INI config file ([section] then key = value)");
  app.add_option("--seed", g.seed, "overrides run.seed");
  app.add_option("--out-dir", g.out_dir, "parent of the run directories")->capture_default_str();
  app.add_flag("--force", g.force, "replace an existing run directory");
  app.add_option("--threads", g.threads, "parallel seeds for reproduce-toy")->capture_default_str();
  auto* keys = app.add_option_group("config keys", "override any config key; flag > file > default");
  for (const auto& f : config_fields()) keys->add_option("--" + f.key, g.overrides[f.key], f.help);

  std::string checkpoint, traces, scores, labels, train_dir, clean, backdoored;
  std::vector<std::string> methods;
  bool pathologies = false, no_sensitivity = false;
  int seeds = 5;

  auto* train = app.add_subcommand("train", "train the clean and backdoored models");
  auto* sample = app.add_subcommand("sample", "run the SGLD chain and export observable traces");
  sample->add_option("--checkpoint", checkpoint, "model checkpoint (.madw)")->required();
  sample->add_flag("--pathologies", pathologies, "also trace adversarial and OOD samples");
  auto* score = app.add_subcommand("score", "score test rows of a trace file against its trusted rows");
  score->add_option("--traces", traces, "trace file (.csv or .madt)")->required();
  score->add_option("--method", methods, "mean, clc, cccc or knn_offline (repeatable; default detect.methods)");
  auto* spectral = app.add_subcommand("spectral", "Hessian spectrum, detection condition and energy curves");
  spectral->add_option("--train-dir", train_dir, "directory holding clean.madw and backdoored.madw");
  spectral->add_option("--clean", clean, "clean checkpoint");
  spectral->add_option("--backdoored", backdoored, "backdoored checkpoint");
  auto* eval = app.add_subcommand("eval", "AUROC, DER and plots from a score file");
  eval->add_option("--scores", scores, "scores.csv from score")->required();
  eval->add_option("--labels", labels, "labels.csv from sample")->required();
  auto* sweep = app.add_subcommand("sweep", "gamma, draw-count and trusted-size sensitivity");
  sweep->add_option("--checkpoint", checkpoint, "backdoored checkpoint")->required();
  auto* contaminate = app.add_subcommand("contaminate", "trusted-set contamination study");
  contaminate->add_option("--checkpoint", checkpoint, "backdoored checkpoint")->required();
  auto* reproduce = app.add_subcommand("reproduce-toy", "full toy pipeline over several seeds");
  reproduce->add_option("--seeds", seeds, "number of consecutive seeds from run.seed")->capture_default_str();
  reproduce->add_flag("--no-sensitivity", no_sensitivity, "skip the sensitivity sweep");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(g, app);
    if (sample->parsed()) return cmd_sample(g, app, checkpoint, pathologies);
    if (score->parsed()) return cmd_score(g, app, traces, methods);
    if (spectral->parsed()) return cmd_spectral(g, app, train_dir, clean, backdoored);
    if (eval->parsed()) return cmd_eval(g, app, scores, labels);
    if (sweep->parsed()) return cmd_sweep(g, app, checkpoint);
    if (contaminate->parsed()) return cmd_contaminate(g, app, checkpoint);
    if (reproduce->parsed()) return cmd_reproduce(g, app, seeds, !no_sensitivity);
  } catch (const ChainDivergence& e) {
    std::cerr << "mad: chain diverged: " << e.what() << '\n';
    return 3;
  } catch (const TrainingError& e) {
    std::cerr << "mad: training failed: " << e.what() << '\n';
    return 3;
  } catch (const DegenerateTrace& e) {
    std::cerr << "mad: " << e.what() << '\n';
    return 3;
  } catch (const DegenerateGradient& e) {
    std::cerr << "mad: " << e.what() << '\n';
    return 3;
  } catch (const mad::Error& e) {
    std::cerr << "mad: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "mad: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mad: unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
