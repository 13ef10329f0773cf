#include "mad/sgld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "bytes.hpp"

namespace mad {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(Preconditioner p) { return p == Preconditioner::none ? "none" : "rmsprop"; }

Preconditioner preconditioner_from_string(const std::string& s) {
  if (s == "none") return Preconditioner::none;
  if (s == "rmsprop") return Preconditioner::rmsprop;
  throw ParameterError("unknown preconditioner '" + s + "'");
}

void SgldConfig::validate(std::size_t sampling_size) const {
  if (!(step_size >= 0) || !std::isfinite(step_size)) throw ParameterError("step size must be >= 0");
  if (!(n_beta >= 0) || !std::isfinite(n_beta)) throw ParameterError("n_beta must be >= 0");
  if (!(gamma >= 0) || !std::isfinite(gamma)) throw ParameterError("gamma must be >= 0");
  if (batch_size < 1) throw ParameterError("sgld batch size must be >= 1");
  if (steps < 1) throw ParameterError("sgld steps must be >= 1");
  if (burn_in < 0 || burn_in >= steps) throw ParameterError("burn-in must be in [0, steps)");
  if (!(rms_decay >= 0 && rms_decay < 1)) throw ParameterError("rmsprop decay must be in [0, 1)");
  if (!(rms_damping > 0)) throw ParameterError("rmsprop damping must be > 0");
  if (sampling_size > 0 && std::size_t(batch_size) > sampling_size)
    throw ParameterError("sgld batch size exceeds the sampling set");
}

ChainState init_chain(const VectorXd& w_star, const SgldConfig& cfg) {
  ChainState s;
  s.w = w_star;
  s.sq_avg = VectorXd::Zero(w_star.size());
  s.rng = make_rng(cfg.seed, 0x5e1d);
  return s;
}

void sgld_update(ChainState& state, const VectorXd& w_star, const VectorXd& data_grad, const SgldConfig& cfg) {
  const Index d = state.w.size();
  if (data_grad.size() != d || w_star.size() != d) throw InputError("sgld vectors differ in length");
  const double eps = cfg.step_size;
  VectorXd drift = data_grad + cfg.gamma * (state.w - w_star);
  VectorXd noise_sd;
  if (cfg.preconditioner == Preconditioner::rmsprop) {
    state.sq_avg = cfg.rms_decay * state.sq_avg + (1.0 - cfg.rms_decay) * data_grad.cwiseAbs2();
    const VectorXd g = (state.sq_avg.cwiseSqrt().array() + cfg.rms_damping).inverse().matrix();
    drift = drift.cwiseProduct(g);
    noise_sd = (eps * g).cwiseSqrt();
  }
  state.w -= 0.5 * eps * drift;
  if (cfg.inject_noise && eps > 0) {
    std::normal_distribution<double> nd(0.0, 1.0);
    const double s = std::sqrt(eps);
    for (Index i = 0; i < d; ++i) state.w(i) += (noise_sd.size() ? noise_sd(i) : s) * nd(state.rng);
  }
  ++state.step;
  if (!state.w.allFinite()) throw ChainDivergence("sgld parameters became non-finite", state.step);
}

namespace {

struct BatchGrad {
  const Network& net;
  const MatrixXd& x;
  const std::vector<int>& y;
  const SgldConfig& cfg;
  MatrixXd xb;
  std::vector<int> yb;

  VectorXd operator()(const VectorXd& w, Rng& rng) {
    const auto m = std::size_t(cfg.batch_size);
    std::uniform_int_distribution<std::size_t> pick(0, y.size() - 1);
    xb.resize(x.rows(), Index(m));
    yb.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t k = pick(rng);
      xb.col(Index(j)) = x.col(Index(k));
      yb[j] = y[k];
    }
    // (n beta / m) * sum over the batch
    return (cfg.n_beta / double(m)) * net.gradient(w, xb, yb, Reduction::sum);
  }
};

}  // namespace

void sgld_step(ChainState& state, const ParamVector& w_star, std::span<const LabeledSample> sampling,
               const SgldConfig& cfg) {
  cfg.validate(sampling.size());
  if (sampling.empty()) throw InputError("empty sampling set");
  const Network net(w_star.arch);
  const MatrixXd x = stack_inputs(sampling);
  const std::vector<int> y = labels_of(sampling);
  BatchGrad bg{net, x, y, cfg, {}, {}};
  const VectorXd g = bg(state.w, state.rng);
  sgld_update(state, w_star.values, g, cfg);
}

std::string sample_key(const LabeledSample& s) {
  std::string key = to_string(s.split);
  if (s.provenance != Provenance::clean) key += "-" + to_string(s.provenance);
  return key + ":" + std::to_string(s.id);
}

double kl_from_logits(const VectorXd& p_logits, const VectorXd& q_logits) {
  const double mp = p_logits.maxCoeff(), mq = q_logits.maxCoeff();
  const VectorXd lp = p_logits.array() - mp - std::log((p_logits.array() - mp).exp().sum());
  const VectorXd lq = q_logits.array() - mq - std::log((q_logits.array() - mq).exp().sum());
  const double kl = (lp.array().exp() * (lp - lq).array()).sum();
  return kl < 0 ? 0.0 : kl;
}

TraceMatrix run_chain(const ParamVector& w_star, std::span<const LabeledSample> sampling,
                      std::span<const LabeledSample> observables, const SgldConfig& cfg, Observable kind) {
  cfg.validate(sampling.size());
  if (observables.empty()) throw InputError("no observable samples");
  if (sampling.empty()) throw InputError("empty sampling set");
  w_star.check();
  const Network net(w_star.arch);
  const MatrixXd xs = stack_inputs(sampling);
  const std::vector<int> ys = labels_of(sampling);
  const MatrixXd xo = stack_inputs(observables);
  const MatrixXd logits0 = net.forward(w_star.values, xo);

  TraceMatrix out;
  out.values.resize(Index(observables.size()), cfg.steps - cfg.burn_in);
  std::vector<int> targets(observables.size());
  for (std::size_t i = 0; i < observables.size(); ++i) {
    targets[i] = argmax(logits0.col(Index(i)));
    out.rows.push_back(
        {sample_key(observables[i]), observables[i].provenance, targets[i], observables[i].label, true});
  }

  BatchGrad bg{net, xs, ys, cfg, {}, {}};
  run_sgld(w_star.values, cfg, bg, [&](Index col, const VectorXd& w) {
    if (kind == Observable::cross_entropy) {
      out.values.col(col) = net.losses(w, xo, targets);
    } else {
      const MatrixXd z = net.forward(w, xo);
      for (Index i = 0; i < z.cols(); ++i) out.values(i, col) = kl_from_logits(logits0.col(i), z.col(i));
    }
  });
  for (std::size_t i = 0; i < out.rows.size(); ++i)
    out.rows[i].valid = out.values.row(Index(i)).allFinite();
  return out;
}

TraceMatrix kl_observable_trace(const ParamVector& w_star, std::span<const LabeledSample> sampling,
                                std::span<const LabeledSample> observables, const SgldConfig& cfg) {
  return run_chain(w_star, sampling, observables, cfg, Observable::kl);
}

std::size_t TraceMatrix::invalid_count() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += !r.valid;
  return n;
}

std::vector<std::size_t> TraceMatrix::rows_with_prefix(const std::string& prefix) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].sample_id.compare(0, prefix.size(), prefix) == 0) idx.push_back(i);
  return idx;
}

TraceMatrix TraceMatrix::first_draws(Index n) const {
  if (n < 1 || n > draws()) throw ParameterError("draw count out of range");
  TraceMatrix t;
  t.values = values.leftCols(n);
  t.rows = rows;
  for (std::size_t i = 0; i < t.rows.size(); ++i) t.rows[i].valid = t.values.row(Index(i)).allFinite();
  return t;
}

TraceMatrix TraceMatrix::select_rows(std::span<const std::size_t> idx) const {
  TraceMatrix t;
  t.values.resize(Index(idx.size()), values.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows.size()) throw InputError("trace row index out of range");
    t.values.row(Index(i)) = values.row(Index(idx[i]));
    t.rows.push_back(rows[idx[i]]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string trace_csv(const TraceMatrix& traces) {
  std::string out = "sample_id,provenance,target_label";
  for (Index t = 0; t < traces.draws(); ++t) out += ",t" + std::to_string(t);
  out += '\n';
  char buf[40];
  for (std::size_t i = 0; i < traces.rows.size(); ++i) {
    const auto& r = traces.rows[i];
    out += r.sample_id + ',' + to_string(r.provenance) + ',' + std::to_string(r.target_label);
    for (Index t = 0; t < traces.draws(); ++t) {
      std::snprintf(buf, sizeof buf, ",%.17g", traces.values(Index(i), t));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

TraceMatrix parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sample_id,provenance,target_label", 0) != 0)
    throw FormatError("trace CSV header missing", 0);
  const auto cols = std::count(line.begin(), line.end(), ',') - 2;
  std::vector<TraceRow> rows;
  std::vector<double> vals;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t a = 0;
    for (std::size_t b; (b = line.find(',', a)) != std::string::npos; a = b + 1) f.push_back(line.substr(a, b - a));
    f.push_back(line.substr(a));
    if (Index(f.size()) != cols + 3) throw FormatError("trace CSV row has the wrong field count", offset);
    TraceRow r;
    r.sample_id = f[0];
    try {
      r.provenance = provenance_from_string(f[1]);
      r.target_label = std::stoi(f[2]);
      r.label = r.target_label;
    } catch (const std::exception&) {
      throw FormatError("bad trace CSV row metadata", offset);
    }
    for (Index t = 0; t < cols; ++t) {
      const std::string& s = f[std::size_t(t + 3)];
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || *end != '\0') throw FormatError("bad number in trace CSV", offset);
      vals.push_back(v);
      r.valid = r.valid && std::isfinite(v);
    }
    rows.push_back(r);
    offset += line.size() + 1;
  }
  TraceMatrix t;
  t.rows = std::move(rows);
  t.values.resize(Index(t.rows.size()), cols);
  for (Index i = 0; i < t.values.rows(); ++i)
    for (Index j = 0; j < cols; ++j) t.values(i, j) = vals[std::size_t(i * cols + j)];
  return t;
}

namespace {
constexpr std::uint32_t kTraceVersion = 1;
}

std::vector<std::uint8_t> encode_traces(const TraceMatrix& traces) {
  detail::ByteWriter w;
  w.raw("MADT", 4);
  w.u32(kTraceVersion);
  w.u64(traces.rows.size());
  w.u64(std::uint64_t(traces.draws()));
  for (std::size_t i = 0; i < traces.rows.size(); ++i) {
    const auto& r = traces.rows[i];
    w.text(r.sample_id);
    w.text(to_string(r.provenance));
    w.u32(std::uint32_t(std::int32_t(r.target_label)));
    w.u32(std::uint32_t(std::int32_t(r.label)));
    const std::uint8_t valid = r.valid ? 1 : 0;
    w.raw(&valid, 1);
    for (Index t = 0; t < traces.draws(); ++t) w.f64(traces.values(Index(i), t));
  }
  return std::move(w.bytes());
}

TraceMatrix decode_traces(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.magic(4) != "MADT") throw FormatError("bad trace magic", 0);
  const auto version = r.u32("version");
  if (version != kTraceVersion) throw FormatError("unsupported trace version " + std::to_string(version), 4);
  const auto n = r.u64("row count");
  const auto cols = r.u64("column count");
  if (cols > (std::uint64_t(1) << 32) || n > (std::uint64_t(1) << 32)) throw FormatError("implausible trace size", 8);
  TraceMatrix t;
  t.values.resize(Index(n), Index(cols));
  for (std::uint64_t i = 0; i < n; ++i) {
    TraceRow row;
    row.sample_id = r.text("sample id");
    const auto at = r.pos();
    try {
      row.provenance = provenance_from_string(r.text("provenance"));
    } catch (const InputError&) {
      throw FormatError("unknown provenance", at);
    }
    row.target_label = int(std::int32_t(r.u32("target label")));
    row.label = int(std::int32_t(r.u32("label")));
    r.need(1, "valid flag");
    row.valid = r.magic(1)[0] != 0;
    for (std::uint64_t c = 0; c < cols; ++c) t.values(Index(i), Index(c)) = r.f64("trace value");
    t.rows.push_back(std::move(row));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after traces", r.pos());
  return t;
}

void save_traces(const std::string& path, const TraceMatrix& traces) {
  detail::write_file(path, encode_traces(traces));
}

TraceMatrix load_traces(const std::string& path) { return decode_traces(detail::read_file(path)); }

}  // namespace mad
