#include "mad/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <new>

#include <nlohmann/json.hpp>

#include "mad/error.hpp"
#include "mad/rng.hpp"

namespace mad {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using ConstMatMap = Eigen::Map<const MatrixXd>;
using MatMap = Eigen::Map<MatrixXd>;
using ConstVecMap = Eigen::Map<const VectorXd>;
using VecMap = Eigen::Map<VectorXd>;

// ---------------------------------------------------------------------------
// Descriptor
// ---------------------------------------------------------------------------

std::vector<Shape> ArchDescriptor::shapes() const {
  if (classes < 2) throw DescriptorError("class count must be >= 2");
  if (input.height < 1 || input.width < 1 || input.channels < 1)
    throw DescriptorError("input shape must be positive");
  std::vector<Shape> out{input};
  Shape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto where = " (layer " + std::to_string(i) + ")";
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv2d>) {
            if (l.in_ch != cur.channels)
              throw DescriptorError("conv2d in_ch " + std::to_string(l.in_ch) +
                                    " does not match " + std::to_string(cur.channels) + where);
            if (l.out_ch < 1 || l.kernel < 1 || l.stride < 1)
              throw DescriptorError("conv2d sizes must be positive" + where);
            if (l.kernel > cur.height || l.kernel > cur.width)
              throw DescriptorError("conv2d kernel larger than input" + where);
            cur = Shape{(cur.height - l.kernel) / l.stride + 1, (cur.width - l.kernel) / l.stride + 1,
                        l.out_ch};
          } else if constexpr (std::is_same_v<T, Dense>) {
            if (l.in != cur.size())
              throw DescriptorError("dense in " + std::to_string(l.in) + " does not match " +
                                    std::to_string(cur.size()) + where);
            if (l.out < 1) throw DescriptorError("dense out must be positive" + where);
            cur = Shape{1, 1, l.out};
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            if (l.k < 1 || l.k > cur.height || l.k > cur.width)
              throw DescriptorError("maxpool k out of range" + where);
            cur = Shape{cur.height / l.k, cur.width / l.k, cur.channels};
          } else if constexpr (std::is_same_v<T, Flatten>) {
            cur = Shape{1, 1, static_cast<int>(cur.size())};
          }
        },
        layers[i]);
    out.push_back(cur);
  }
  if (cur.size() != classes)
    throw DescriptorError("network output size " + std::to_string(cur.size()) +
                          " does not match class count " + std::to_string(classes));
  return out;
}

Index ArchDescriptor::parameter_count() const {
  (void)shapes();
  Index n = 0;
  for (const auto& layer : layers) {
    if (const auto* c = std::get_if<Conv2d>(&layer))
      n += Index(c->out_ch) * c->in_ch * c->kernel * c->kernel + c->out_ch;
    else if (const auto* d = std::get_if<Dense>(&layer))
      n += Index(d->out) * d->in + d->out;
  }
  return n;
}

std::string ArchDescriptor::to_text() const {
  nlohmann::json j;
  j["input"] = {input.height, input.width, input.channels};
  j["classes"] = classes;
  auto& ls = j["layers"] = nlohmann::json::array();
  for (const auto& layer : layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv2d>)
            ls.push_back({{"type", "conv2d"},
                          {"in_ch", l.in_ch},
                          {"out_ch", l.out_ch},
                          {"kernel", l.kernel},
                          {"stride", l.stride}});
          else if constexpr (std::is_same_v<T, Dense>)
            ls.push_back({{"type", "dense"}, {"in", l.in}, {"out", l.out}});
          else if constexpr (std::is_same_v<T, Relu>)
            ls.push_back({{"type", "relu"}});
          else if constexpr (std::is_same_v<T, MaxPool>)
            ls.push_back({{"type", "maxpool"}, {"k", l.k}});
          else
            ls.push_back({{"type", "flatten"}});
        },
        layer);
  }
  return j.dump();
}

ArchDescriptor ArchDescriptor::from_text(const std::string& text) {
  ArchDescriptor a;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& in = j.at("input");
    a.input = Shape{in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
    a.classes = j.at("classes").get<int>();
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "conv2d")
        a.layers.emplace_back(Conv2d{l.at("in_ch").get<int>(), l.at("out_ch").get<int>(),
                                     l.at("kernel").get<int>(), l.value("stride", 1)});
      else if (type == "dense")
        a.layers.emplace_back(Dense{l.at("in").get<int>(), l.at("out").get<int>()});
      else if (type == "relu")
        a.layers.emplace_back(Relu{});
      else if (type == "maxpool")
        a.layers.emplace_back(MaxPool{l.at("k").get<int>()});
      else if (type == "flatten")
        a.layers.emplace_back(Flatten{});
      else
        throw DescriptorError("unknown layer type '" + type + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DescriptorError(std::string("malformed architecture text: ") + e.what());
  }
  a.validate();
  return a;
}

ArchDescriptor toy_cnn_arch() {
  ArchDescriptor a;
  a.input = {14, 14, 1};
  a.classes = 10;
  a.layers = {Conv2d{1, 4, 3, 1}, Relu{}, MaxPool{2}, Flatten{}, Dense{144, 16}, Relu{},
              Dense{16, 10}};
  return a;
}

ArchDescriptor toy_cnn_arch_large() {
  ArchDescriptor a;
  a.input = {14, 14, 1};
  a.classes = 10;
  a.layers = {Conv2d{1, 16, 3, 1}, Relu{}, MaxPool{2}, Flatten{}, Dense{576, 20}, Relu{},
              Dense{20, 10}};
  return a;
}

ArchDescriptor mlp_arch(int in, std::vector<int> hidden, int classes) {
  ArchDescriptor a;
  a.input = {1, 1, in};
  a.classes = classes;
  int prev = in;
  for (int h : hidden) {
    a.layers.emplace_back(Dense{prev, h});
    a.layers.emplace_back(Relu{});
    prev = h;
  }
  a.layers.emplace_back(Dense{prev, classes});
  return a;
}

std::string to_string(Origin o) {
  switch (o) {
    case Origin::initialized: return "initialized";
    case Origin::pretrained: return "pretrained";
    case Origin::backdoored: return "backdoored";
  }
  return "initialized";
}

Origin origin_from_string(const std::string& s) {
  if (s == "initialized") return Origin::initialized;
  if (s == "pretrained") return Origin::pretrained;
  if (s == "backdoored") return Origin::backdoored;
  throw InputError("unknown origin tag '" + s + "'");
}

void ParamVector::check() const {
  if (values.size() != arch.parameter_count())
    throw DescriptorError("parameter vector length " + std::to_string(values.size()) +
                          " != arch parameter count " + std::to_string(arch.parameter_count()));
  if (!values.allFinite()) throw InputError("parameter vector has non-finite entries");
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct Network::Tape {
  std::vector<MatrixXd> inputs;          // activation entering each op
  std::vector<MatrixXd> cols;            // im2col buffers (conv ops only)
  std::vector<std::vector<Index>> argmax;  // pool ops only
};

namespace {

using Op = Network::Op;

void im2col(const MatrixXd& x, const Op& op, MatrixXd& cols) {
  const int c = op.in.channels, w = op.in.width, k = op.kernel, s = op.stride;
  const int oh = op.out.height, ow = op.out.width;
  const Index n = x.cols();
  cols.resize(Index(c) * k * k, n * oh * ow);
  for (Index i = 0; i < n; ++i) {
    const double* src = x.col(i).data();
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q) {
        double* dst = cols.col((i * oh + r) * ow + q).data();
        for (int ki = 0; ki < k; ++ki)
          for (int kj = 0; kj < k; ++kj)
            std::copy_n(src + (Index(r * s + ki) * w + (q * s + kj)) * c, c,
                        dst + (ki * k + kj) * c);
      }
  }
}

MatrixXd col2im(const MatrixXd& cols, const Op& op, Index n) {
  const int c = op.in.channels, w = op.in.width, k = op.kernel, s = op.stride;
  const int oh = op.out.height, ow = op.out.width;
  MatrixXd x = MatrixXd::Zero(op.in.size(), n);
  for (Index i = 0; i < n; ++i) {
    double* dst = x.col(i).data();
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q) {
        const double* src = cols.col((i * oh + r) * ow + q).data();
        for (int ki = 0; ki < k; ++ki)
          for (int kj = 0; kj < k; ++kj) {
            double* d = dst + (Index(r * s + ki) * w + (q * s + kj)) * c;
            const double* sp = src + (ki * k + kj) * c;
            for (int ch = 0; ch < c; ++ch) d[ch] += sp[ch];
          }
      }
  }
  return x;
}

MatrixXd pool_forward(const MatrixXd& x, const Op& op, std::vector<Index>* argmax) {
  const int c = op.in.channels, w = op.in.width, k = op.kernel;
  const int oh = op.out.height, ow = op.out.width;
  const Index n = x.cols();
  MatrixXd y(op.out.size(), n);
  if (argmax) argmax->resize(std::size_t(op.out.size() * n));
  for (Index i = 0; i < n; ++i)
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q)
        for (int ch = 0; ch < c; ++ch) {
          Index best = (Index(r * k) * w + q * k) * c + ch;
          double bv = x(best, i);
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const Index idx = (Index(r * k + ki) * w + (q * k + kj)) * c + ch;
              if (x(idx, i) > bv) {
                bv = x(idx, i);
                best = idx;
              }
            }
          const Index o = (Index(r) * ow + q) * c + ch;
          y(o, i) = bv;
          if (argmax) (*argmax)[std::size_t(i * op.out.size() + o)] = best;
        }
  return y;
}

MatrixXd pool_gather(const MatrixXd& x, const Op& op, const std::vector<Index>& argmax) {
  const Index n = x.cols(), m = op.out.size();
  MatrixXd y(m, n);
  for (Index i = 0; i < n; ++i)
    for (Index o = 0; o < m; ++o) y(o, i) = x(argmax[std::size_t(i * m + o)], i);
  return y;
}

MatrixXd pool_scatter(const MatrixXd& dy, const Op& op, const std::vector<Index>& argmax) {
  const Index n = dy.cols(), m = op.out.size();
  MatrixXd dx = MatrixXd::Zero(op.in.size(), n);
  for (Index i = 0; i < n; ++i)
    for (Index o = 0; o < m; ++o) dx(argmax[std::size_t(i * m + o)], i) += dy(o, i);
  return dx;
}

// Column-wise softmax of logits.
MatrixXd softmax_cols(const MatrixXd& z) {
  MatrixXd p(z.rows(), z.cols());
  for (Index i = 0; i < z.cols(); ++i) {
    const double m = z.col(i).maxCoeff();
    p.col(i) = (z.col(i).array() - m).exp().matrix();
    p.col(i) /= p.col(i).sum();
  }
  return p;
}

// log1p keeps losses far below machine epsilon on confident samples.
double ce_col(const Eigen::Ref<const VectorXd>& z, int target) {
  Index k = 0;
  const double m = z.maxCoeff(&k);
  double rest = 0;
  for (Index j = 0; j < z.size(); ++j)
    if (j != k) rest += std::exp(z(j) - m);
  return (m - z(target)) + std::log1p(rest);
}

void check_targets(std::span<const int> targets, Index n, int classes) {
  if (Index(targets.size()) != n)
    throw InputError("target count " + std::to_string(targets.size()) + " != batch size " +
                     std::to_string(n));
  for (int t : targets)
    if (t < 0 || t >= classes) throw InputError("target " + std::to_string(t) + " out of range");
}

}  // namespace

Network::Network(ArchDescriptor arch) : arch_(std::move(arch)) {
  const auto shapes = arch_.shapes();
  Index off = 0;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    Op op{};
    op.in = shapes[i];
    op.out = shapes[i + 1];
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv2d>) {
            op.kind = Op::Kind::conv;
            op.kernel = l.kernel;
            op.stride = l.stride;
            op.w_rows = l.out_ch;
            op.w_cols = Index(l.in_ch) * l.kernel * l.kernel;
          } else if constexpr (std::is_same_v<T, Dense>) {
            op.kind = Op::Kind::dense;
            op.w_rows = l.out;
            op.w_cols = l.in;
          } else if constexpr (std::is_same_v<T, Relu>) {
            op.kind = Op::Kind::relu;
          } else if constexpr (std::is_same_v<T, MaxPool>) {
            op.kind = Op::Kind::pool;
            op.kernel = l.k;
            op.stride = l.k;
          } else {
            op.kind = Op::Kind::flatten;
          }
        },
        arch_.layers[i]);
    if (op.w_rows > 0) {
      op.w_off = off;
      off += op.w_rows * op.w_cols;
      op.b_off = off;
      off += op.w_rows;
    }
    ops_.push_back(op);
  }
  n_params_ = off;
}

MatrixXd Network::run_forward(const VectorXd& w, const MatrixXd& x, Tape* tape,
                              std::size_t stop) const {
  if (w.size() != n_params_)
    throw InputError("parameter length " + std::to_string(w.size()) + " != " +
                     std::to_string(n_params_));
  if (x.rows() != input_size())
    throw InputError("input size " + std::to_string(x.rows()) + " != expected " +
                     std::to_string(input_size()));
  if (tape) {
    tape->inputs.assign(ops_.size(), MatrixXd());
    tape->cols.assign(ops_.size(), MatrixXd());
    tape->argmax.assign(ops_.size(), {});
  }
  MatrixXd a = x;
  const Index n = x.cols();
  for (std::size_t i = 0; i < ops_.size() && i < stop; ++i) {
    const Op& op = ops_[i];
    MatrixXd next;
    switch (op.kind) {
      case Op::Kind::dense: {
        ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
        ConstVecMap b(w.data() + op.b_off, op.w_rows);
        next.noalias() = W * a;
        next.colwise() += b;
        break;
      }
      case Op::Kind::conv: {
        ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
        ConstVecMap b(w.data() + op.b_off, op.w_rows);
        MatrixXd local;
        MatrixXd& cols = tape ? tape->cols[i] : local;
        im2col(a, op, cols);
        next.resize(op.out.size(), n);
        MatMap y(next.data(), op.w_rows, cols.cols());
        y.noalias() = W * cols;
        y.colwise() += b;
        break;
      }
      case Op::Kind::relu:
        next = a.cwiseMax(0.0);
        break;
      case Op::Kind::pool:
        next = pool_forward(a, op, tape ? &tape->argmax[i] : nullptr);
        break;
      case Op::Kind::flatten:
        next = a;
        break;
    }
    if (tape) tape->inputs[i] = std::move(a);
    a = std::move(next);
  }
  return a;
}

MatrixXd Network::forward(const VectorXd& w, const MatrixXd& x) const {
  return run_forward(w, x, nullptr, ops_.size());
}

MatrixXd Network::activations(const VectorXd& w, const MatrixXd& x, std::size_t layer) const {
  if (layer > ops_.size()) throw InputError("layer index out of range");
  return run_forward(w, x, nullptr, layer);
}

VectorXd Network::losses(const VectorXd& w, const MatrixXd& x, std::span<const int> targets) const {
  check_targets(targets, x.cols(), classes());
  const MatrixXd z = forward(w, x);
  VectorXd out(z.cols());
  for (Index i = 0; i < z.cols(); ++i) out(i) = ce_col(z.col(i), targets[std::size_t(i)]);
  return out;
}

namespace {

// Backward pass through all ops given d(loss)/d(logits). Accumulates parameter
// gradients into g when non-null; returns d(loss)/d(input) if want_input.
MatrixXd backprop(const std::vector<Op>& ops, const VectorXd& w, const Network::Tape& tape,
                  MatrixXd delta, VectorXd* gp, bool want_input) {
  const Index n = delta.cols();
  VectorXd scratch;
  if (!gp) {
    scratch = VectorXd::Zero(w.size());
    gp = &scratch;
  }
  VectorXd& g = *gp;
  for (std::size_t ii = ops.size(); ii-- > 0;) {
    const Op& op = ops[ii];
    const MatrixXd& a = tape.inputs[ii];
    const bool need_input_grad = ii > 0 || want_input;
    switch (op.kind) {
      case Op::Kind::dense: {
        ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
        MatMap gW(g.data() + op.w_off, op.w_rows, op.w_cols);
        VecMap gb(g.data() + op.b_off, op.w_rows);
        gW.noalias() += delta * a.transpose();
        gb += delta.rowwise().sum();
        if (need_input_grad) delta = W.transpose() * delta;
        break;
      }
      case Op::Kind::conv: {
        ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
        MatMap gW(g.data() + op.w_off, op.w_rows, op.w_cols);
        VecMap gb(g.data() + op.b_off, op.w_rows);
        const MatrixXd& cols = tape.cols[ii];
        ConstMatMap dm(delta.data(), op.w_rows, cols.cols());
        gW.noalias() += dm * cols.transpose();
        gb += dm.rowwise().sum();
        if (need_input_grad) {
          MatrixXd dcols = W.transpose() * dm;
          delta = col2im(dcols, op, n);
        }
        break;
      }
      case Op::Kind::relu:
        delta = (a.array() > 0.0).select(delta, 0.0);
        break;
      case Op::Kind::pool:
        delta = pool_scatter(delta, op, tape.argmax[ii]);
        break;
      case Op::Kind::flatten:
        break;
    }
  }
  return delta;
}

}  // namespace

VectorXd Network::gradient(const VectorXd& w, const MatrixXd& x, std::span<const int> targets,
                           Reduction reduction, double* loss_out) const {
  if (x.cols() == 0) throw InputError("empty batch");
  check_targets(targets, x.cols(), classes());
  Tape tape;
  const MatrixXd z = run_forward(w, x, &tape, ops_.size());
  const double scale = reduction == Reduction::mean ? 1.0 / double(x.cols()) : 1.0;
  MatrixXd delta = softmax_cols(z);
  double total = 0;
  for (Index i = 0; i < z.cols(); ++i) {
    const int t = targets[std::size_t(i)];
    total += ce_col(z.col(i), t);
    delta(t, i) -= 1.0;
  }
  delta *= scale;
  if (loss_out) *loss_out = total * scale;
  VectorXd g = VectorXd::Zero(n_params_);
  backprop(ops_, w, tape, std::move(delta), &g, false);
  return g;
}

MatrixXd Network::input_gradient(const VectorXd& w, const MatrixXd& x,
                                 std::span<const int> targets) const {
  check_targets(targets, x.cols(), classes());
  Tape tape;
  const MatrixXd z = run_forward(w, x, &tape, ops_.size());
  MatrixXd delta = softmax_cols(z);
  for (Index i = 0; i < z.cols(); ++i) delta(targets[std::size_t(i)], i) -= 1.0;
  return backprop(ops_, w, tape, std::move(delta), nullptr, true);
}

// Tangent (R-operator) passes over a cached primal tape.
struct Network::HvpContext::Impl {
  const std::vector<Op>* ops = nullptr;
  VectorXd w;
  Tape tape;
  MatrixXd probs;                 // softmax of logits
  std::vector<MatrixXd> deltas;   // d(loss)/d(output of op i)
  double scale = 1.0;
  Index n_params = 0;

  VectorXd apply(const VectorXd& v) const {
    const auto& os = *ops;
    const Index n = probs.cols();
    // R-forward
    std::vector<MatrixXd> r_in(os.size());
    std::vector<MatrixXd> r_cols(os.size());
    std::vector<bool> r_zero(os.size() + 1, false);
    MatrixXd ra = MatrixXd::Zero(tape.inputs[0].rows(), n);
    bool zero = true;
    for (std::size_t i = 0; i < os.size(); ++i) {
      const Op& op = os[i];
      const MatrixXd& a = tape.inputs[i];
      MatrixXd next;
      switch (op.kind) {
        case Op::Kind::dense: {
          ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
          ConstMatMap RW(v.data() + op.w_off, op.w_rows, op.w_cols);
          ConstVecMap Rb(v.data() + op.b_off, op.w_rows);
          next.noalias() = RW * a;
          if (!zero) next.noalias() += W * ra;
          next.colwise() += Rb;
          break;
        }
        case Op::Kind::conv: {
          ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
          ConstMatMap RW(v.data() + op.w_off, op.w_rows, op.w_cols);
          ConstVecMap Rb(v.data() + op.b_off, op.w_rows);
          const MatrixXd& cols = tape.cols[i];
          next.resize(op.out.size(), n);
          MatMap y(next.data(), op.w_rows, cols.cols());
          y.noalias() = RW * cols;
          if (!zero) {
            im2col(ra, op, r_cols[i]);
            y.noalias() += W * r_cols[i];
          }
          y.colwise() += Rb;
          break;
        }
        case Op::Kind::relu:
          next = (a.array() > 0.0).select(ra, 0.0);
          break;
        case Op::Kind::pool:
          next = zero ? MatrixXd::Zero(op.out.size(), n) : pool_gather(ra, op, tape.argmax[i]);
          break;
        case Op::Kind::flatten:
          next = ra;
          break;
      }
      r_zero[i] = zero;
      r_in[i] = std::move(ra);
      ra = std::move(next);
      if (op.kind == Op::Kind::dense || op.kind == Op::Kind::conv) zero = false;
    }
    // R of d(loss)/d(logits): scale * (diag(p) - p p^T) Rz
    MatrixXd rdelta(probs.rows(), n);
    for (Index i = 0; i < n; ++i) {
      const double dot = probs.col(i).dot(ra.col(i));
      rdelta.col(i) = scale * (probs.col(i).cwiseProduct(ra.col(i)) - dot * probs.col(i));
    }
    // R-backward
    VectorXd hv = VectorXd::Zero(n_params);
    for (std::size_t ii = os.size(); ii-- > 0;) {
      const Op& op = os[ii];
      const MatrixXd& a = tape.inputs[ii];
      const MatrixXd& delta = deltas[ii];
      const bool need_input = ii > 0;
      switch (op.kind) {
        case Op::Kind::dense: {
          ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
          ConstMatMap RW(v.data() + op.w_off, op.w_rows, op.w_cols);
          MatMap hW(hv.data() + op.w_off, op.w_rows, op.w_cols);
          VecMap hb(hv.data() + op.b_off, op.w_rows);
          hW.noalias() += rdelta * a.transpose();
          if (!r_zero[ii]) hW.noalias() += delta * r_in[ii].transpose();
          hb += rdelta.rowwise().sum();
          if (need_input) {
            MatrixXd next = W.transpose() * rdelta;
            next.noalias() += RW.transpose() * delta;
            rdelta = std::move(next);
          }
          break;
        }
        case Op::Kind::conv: {
          ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
          ConstMatMap RW(v.data() + op.w_off, op.w_rows, op.w_cols);
          MatMap hW(hv.data() + op.w_off, op.w_rows, op.w_cols);
          VecMap hb(hv.data() + op.b_off, op.w_rows);
          const MatrixXd& cols = tape.cols[ii];
          ConstMatMap rdm(rdelta.data(), op.w_rows, cols.cols());
          ConstMatMap dm(delta.data(), op.w_rows, cols.cols());
          hW.noalias() += rdm * cols.transpose();
          if (!r_zero[ii]) hW.noalias() += dm * r_cols[ii].transpose();
          hb += rdm.rowwise().sum();
          if (need_input) {
            MatrixXd dcols = W.transpose() * rdm;
            dcols.noalias() += RW.transpose() * dm;
            rdelta = col2im(dcols, op, n);
          }
          break;
        }
        case Op::Kind::relu:
          rdelta = (a.array() > 0.0).select(rdelta, 0.0);
          break;
        case Op::Kind::pool:
          rdelta = pool_scatter(rdelta, op, tape.argmax[ii]);
          break;
        case Op::Kind::flatten:
          break;
      }
    }
    return hv;
  }
};

VectorXd Network::HvpContext::apply(const VectorXd& v) const {
  if (v.size() != impl_->n_params)
    throw InputError("hvp direction length " + std::to_string(v.size()) + " != " +
                     std::to_string(impl_->n_params));
  return impl_->apply(v);
}

Network::HvpContext Network::hvp_context(const VectorXd& w, const MatrixXd& x,
                                         std::span<const int> targets, Reduction reduction) const {
  if (x.cols() == 0) throw InputError("empty batch");
  check_targets(targets, x.cols(), classes());
  auto impl = std::make_shared<HvpContext::Impl>();
  impl->ops = &ops_;
  impl->w = w;
  impl->n_params = n_params_;
  const MatrixXd z = run_forward(w, x, &impl->tape, ops_.size());
  impl->scale = reduction == Reduction::mean ? 1.0 / double(x.cols()) : 1.0;
  impl->probs = softmax_cols(z);
  MatrixXd delta = impl->probs;
  for (Index i = 0; i < z.cols(); ++i) delta(targets[std::size_t(i)], i) -= 1.0;
  delta *= impl->scale;
  // deltas[i] = gradient w.r.t. the output of op i
  impl->deltas.assign(ops_.size(), MatrixXd());
  const Index n = x.cols();
  for (std::size_t ii = ops_.size(); ii-- > 0;) {
    impl->deltas[ii] = delta;
    if (ii == 0) break;
    const Op& op = ops_[ii];
    const MatrixXd& a = impl->tape.inputs[ii];
    switch (op.kind) {
      case Op::Kind::dense: {
        ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
        delta = W.transpose() * delta;
        break;
      }
      case Op::Kind::conv: {
        ConstMatMap W(w.data() + op.w_off, op.w_rows, op.w_cols);
        ConstMatMap dm(delta.data(), op.w_rows, impl->tape.cols[ii].cols());
        MatrixXd dcols = W.transpose() * dm;
        delta = col2im(dcols, op, n);
        break;
      }
      case Op::Kind::relu:
        delta = (a.array() > 0.0).select(delta, 0.0);
        break;
      case Op::Kind::pool:
        delta = pool_scatter(delta, op, impl->tape.argmax[ii]);
        break;
      case Op::Kind::flatten:
        break;
    }
  }
  HvpContext ctx;
  ctx.impl_ = std::move(impl);
  return ctx;
}

VectorXd Network::hvp(const VectorXd& w, const MatrixXd& x, std::span<const int> targets,
                      Reduction reduction, const VectorXd& v) const {
  return hvp_context(w, x, targets, reduction).apply(v);
}

// ---------------------------------------------------------------------------
// ParamVector-level operations
// ---------------------------------------------------------------------------

ParamVector init_model(const ArchDescriptor& arch, std::uint64_t seed) {
  const Network net(arch);
  ParamVector p;
  p.arch = arch;
  p.values = VectorXd::Zero(net.parameter_count());
  Rng rng = make_rng(seed, 0x1417);
  for (const auto& op : net.ops()) {
    if (op.w_rows == 0) continue;
    // fan-in of one output unit is the weight row length
    const double bound = std::sqrt(6.0 / double(op.w_cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < op.w_rows * op.w_cols; ++i) p.values(op.w_off + i) = u(rng);
  }
  return p;
}

VectorXd forward(const ParamVector& params, const VectorXd& input) {
  const Network net(params.arch);
  return net.forward(params.values, input);
}

double cross_entropy(const VectorXd& logits, int target) {
  if (target < 0 || target >= logits.size()) throw InputError("target out of range");
  return ce_col(logits, target);
}

VectorXd softmax(const VectorXd& logits) { return softmax_cols(logits); }

double loss(const ParamVector& params, const VectorXd& input, int target) {
  return cross_entropy(forward(params, input), target);
}

int argmax(const VectorXd& logits) {
  Index best = 0;
  for (Index i = 1; i < logits.size(); ++i)
    if (logits(i) > logits(best)) best = i;
  return int(best);
}

int predict(const ParamVector& params, const VectorXd& input) {
  return argmax(forward(params, input));
}

std::vector<int> predict_batch(const ParamVector& params, const MatrixXd& inputs) {
  const Network net(params.arch);
  const MatrixXd z = net.forward(params.values, inputs);
  std::vector<int> out(std::size_t(z.cols()));
  for (Index i = 0; i < z.cols(); ++i) out[std::size_t(i)] = argmax(z.col(i));
  return out;
}

VectorXd grad(const ParamVector& params, std::span<const LabeledSample> batch, Reduction reduction) {
  if (batch.empty()) throw InputError("empty batch");
  const Network net(params.arch);
  const auto targets = labels_of(batch);
  return net.gradient(params.values, stack_inputs(batch), targets, reduction);
}

VectorXd hvp(const ParamVector& params, std::span<const LabeledSample> batch, const VectorXd& v,
             Reduction reduction) {
  if (batch.empty()) throw InputError("empty batch");
  const Network net(params.arch);
  if (v.size() != net.parameter_count())
    throw InputError("hvp direction length " + std::to_string(v.size()) + " != " +
                     std::to_string(net.parameter_count()));
  const auto targets = labels_of(batch);
  return net.hvp(params.values, stack_inputs(batch), targets, reduction, v);
}

DenseHessian dense_hessian(const std::function<VectorXd(const VectorXd&)>& hvp_fn, Index d,
                           Index cap) {
  if (d > cap)
    throw CapacityError("dense Hessian of dimension " + std::to_string(d) + " exceeds cap " +
                        std::to_string(cap));
  DenseHessian out;
  try {
    out.matrix.resize(d, d);
  } catch (const std::bad_alloc&) {
    throw CapacityError("cannot allocate " + std::to_string(d) + "^2 Hessian");
  }
  VectorXd e = VectorXd::Zero(d);
  for (Index j = 0; j < d; ++j) {
    e(j) = 1.0;
    out.matrix.col(j) = hvp_fn(e);
    e(j) = 0.0;
  }
  double asym = 0;
  for (Index j = 0; j < d; ++j)
    for (Index i = j + 1; i < d; ++i) {
      const double a = out.matrix(i, j), b = out.matrix(j, i);
      asym = std::max(asym, std::abs(a - b));
      out.matrix(i, j) = out.matrix(j, i) = 0.5 * (a + b);
    }
  out.max_asymmetry = asym;
  return out;
}

DenseHessian dense_hessian(const ParamVector& params, std::span<const LabeledSample> dataset,
                           Index cap) {
  if (dataset.empty()) throw InputError("empty Hessian dataset");
  const Network net(params.arch);
  if (net.parameter_count() > cap)
    throw CapacityError("dense Hessian of dimension " + std::to_string(net.parameter_count()) +
                        " exceeds cap " + std::to_string(cap));
  const auto targets = labels_of(dataset);
  const auto ctx = net.hvp_context(params.values, stack_inputs(dataset), targets, Reduction::mean);
  return dense_hessian([&](const VectorXd& v) { return ctx.apply(v); }, net.parameter_count(), cap);
}

}  // namespace mad
