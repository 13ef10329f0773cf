#include "mad/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>

#include "mad/error.hpp"
#include "mad/rng.hpp"

namespace mad {

using Eigen::Index;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// IDX loading
// ---------------------------------------------------------------------------

namespace {

// gzread transparently passes uncompressed files through.
std::vector<std::uint8_t> read_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw InputError("cannot open '" + path + "'");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), unsigned(buf.size()))) > 0) out.insert(out.end(), buf.data(), buf.data() + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("decompression failed for '" + path + "'", out.size());
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& what) {
  if (at + 4 > b.size()) throw FormatError("truncated IDX header reading " + what, at);
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

SampleList load_idx(const IdxFiles& files) {
  const auto img = read_maybe_gz(files.images);
  const auto lab = read_maybe_gz(files.labels);
  if (be32(img, 0, "image magic") != 0x00000803) throw FormatError("bad IDX image magic", 0);
  if (be32(lab, 0, "label magic") != 0x00000801) throw FormatError("bad IDX label magic", 0);
  const std::size_t n = be32(img, 4, "image count");
  const int rows = int(be32(img, 8, "row count"));
  const int cols = int(be32(img, 12, "column count"));
  const std::size_t n_lab = be32(lab, 4, "label count");
  if (n != n_lab) throw FormatError("image/label counts differ", 4);
  if (rows <= 0 || cols <= 0) throw FormatError("bad image dimensions", 8);
  const std::size_t px = std::size_t(rows) * std::size_t(cols);
  if (img.size() < 16 + n * px) throw FormatError("image payload truncated", img.size());
  if (lab.size() < 8 + n) throw FormatError("label payload truncated", lab.size());
  const bool pool = !(rows == 14 && cols == 14);
  if (pool && (rows % 2 || cols % 2)) throw FormatError("image dimensions must be even", 8);

  const std::size_t count = files.limit ? std::min(*files.limit, n) : n;
  SampleList out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    LabeledSample s;
    const std::size_t off = 16 + i * px;
    std::span<const std::uint8_t> pixels(img.data() + off, px);
    if (pool) {
      s.input = downsample_2x2(pixels, rows, cols);
    } else {
      s.input.resize(Index(px));
      for (std::size_t k = 0; k < px; ++k) s.input(Index(k)) = pixels[k] / 255.0;
    }
    s.label = lab[8 + i];
    if (s.label > 9) throw FormatError("label out of range", 8 + i);
    s.id = std::int64_t(i);
    s.source_offset = std::int64_t(off);
    out.push_back(std::move(s));
  }
  return out;
}

// Seven-segment glyph rendering on a 14x14 canvas.
//   segments: 0 top, 1 top-right, 2 bottom-right, 3 bottom, 4 bottom-left, 5 top-left, 6 middle
constexpr std::array<std::uint8_t, 10> kGlyphs = {
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110,
    0b1101101, 0b1111101, 0b0000111, 0b1111111, 0b1101111};

VectorXd render_glyph(int cls, Rng& rng, bool transposed) {
  std::uniform_int_distribution<int> shift(-1, 1);
  std::uniform_real_distribution<double> inten(0.7, 1.0);
  std::uniform_real_distribution<double> noise(0.0, 0.08);
  std::bernoulli_distribution thick(0.5);
  const int top = 2 + shift(rng), left = 4 + shift(rng);
  const int h = 10, w = 6;
  const int width = thick(rng) ? 2 : 1;
  const double level = inten(rng);
  Eigen::MatrixXd img = Eigen::MatrixXd::Zero(14, 14);
  auto hline = [&](int r, int c0, int c1) {
    for (int t = 0; t < width; ++t)
      for (int c = c0; c <= c1; ++c)
        if (r + t >= 0 && r + t < 14 && c >= 0 && c < 14) img(r + t, c) = level;
  };
  auto vline = [&](int c, int r0, int r1) {
    for (int t = 0; t < width; ++t)
      for (int r = r0; r <= r1; ++r)
        if (r >= 0 && r < 14 && c + t >= 0 && c + t < 14) img(r, c + t) = level;
  };
  const auto g = kGlyphs[std::size_t(cls % 10)];
  const int mid = top + h / 2;
  if (g & 1) hline(top, left, left + w - 1);
  if (g & 2) vline(left + w - width, top, mid);
  if (g & 4) vline(left + w - width, mid, top + h - 1);
  if (g & 8) hline(top + h - width, left, left + w - 1);
  if (g & 16) vline(left, mid, top + h - 1);
  if (g & 32) vline(left, top, mid);
  if (g & 64) hline(mid, left, left + w - 1);
  VectorXd out(196);
  for (int r = 0; r < 14; ++r)
    for (int c = 0; c < 14; ++c) {
      const double v = transposed ? img(c, r) : img(r, c);
      // shifted style: mid-grey background with dark strokes
      const double px = transposed ? 0.55 - 0.5 * v : v;
      out(r * 14 + c) = std::clamp(px + noise(rng), 0.0, 1.0);
    }
  return out;
}

}  // namespace

VectorXd downsample_2x2(std::span<const std::uint8_t> pixels, int rows, int cols) {
  if (rows % 2 || cols % 2 || pixels.size() != std::size_t(rows) * std::size_t(cols))
    throw InputError("downsample_2x2 needs even dimensions matching the buffer");
  const int oh = rows / 2, ow = cols / 2;
  VectorXd out(Index(oh) * ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      const std::size_t a = std::size_t(2 * r) * cols + 2 * c;
      const double sum = double(pixels[a]) + pixels[a + 1] + pixels[a + cols] + pixels[a + cols + 1];
      out(Index(r) * ow + c) = sum / (4.0 * 255.0);
    }
  return out;
}

SampleList load_digits(const DigitSource& source) {
  if (const auto* idx = std::get_if<IdxFiles>(&source)) return load_idx(*idx);
  const auto& syn = std::get<SyntheticDigits>(source);
  SampleList out;
  out.reserve(syn.count);
  for (std::size_t i = 0; i < syn.count; ++i) {
    Rng rng = make_rng(syn.seed, i);
    LabeledSample s;
    s.label = int(i % 10);
    s.input = render_glyph(s.label, rng, false);
    s.id = std::int64_t(i);
    out.push_back(std::move(s));
  }
  return out;
}

std::optional<IdxFiles> find_idx_files(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::array<std::pair<const char*, const char*>, 4> names = {{
      {"digits-images-idx3-ubyte.gz", "digits-labels-idx1-ubyte.gz"},
      {"digits-images-idx3-ubyte", "digits-labels-idx1-ubyte"},
      {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"},
      {"train-images-idx3-ubyte", "train-labels-idx1-ubyte"},
  }};
  for (const auto& [im, lb] : names) {
    const fs::path a = fs::path(dir) / im, b = fs::path(dir) / lb;
    if (fs::exists(a) && fs::exists(b)) return IdxFiles{a.string(), b.string(), std::nullopt};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Triggers
// ---------------------------------------------------------------------------

void TriggerSpec::validate(const Shape& shape) const {
  if (!(opacity >= 0.0 && opacity <= 1.0)) throw ParameterError("trigger opacity must be in [0,1]");
  if (kind == Kind::checkerboard_patch) {
    if (patch_size < 1 || patch_row < 0 || patch_col < 0 || patch_row + patch_size > shape.height ||
        patch_col + patch_size > shape.width)
      throw ParameterError("trigger patch does not fit inside the input");
  }
}

VectorXd trigger_pattern(const TriggerSpec& trigger, const Shape& shape) {
  trigger.validate(shape);
  VectorXd t(shape.size());
  if (trigger.kind == TriggerSpec::Kind::random_noise) {
    Rng rng = make_rng(trigger.seed, 0x7219);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Index i = 0; i < t.size(); ++i) t(i) = u(rng);
  } else {
    for (int r = 0; r < shape.height; ++r)
      for (int c = 0; c < shape.width; ++c)
        for (int ch = 0; ch < shape.channels; ++ch)
          t((Index(r) * shape.width + c) * shape.channels + ch) = (r + c) % 2 == 0 ? 1.0 : 0.0;
  }
  return t;
}

LabeledSample apply_trigger(const LabeledSample& sample, const TriggerSpec& trigger,
                            const Shape& shape, int target) {
  if (sample.input.size() != shape.size()) throw InputError("sample shape does not match trigger shape");
  const VectorXd t = trigger_pattern(trigger, shape);
  const double a = trigger.opacity;
  LabeledSample out = sample;
  if (trigger.kind == TriggerSpec::Kind::random_noise) {
    out.input = ((1.0 - a) * sample.input + a * t).cwiseMax(0.0).cwiseMin(1.0);
  } else {
    for (int r = trigger.patch_row; r < trigger.patch_row + trigger.patch_size; ++r)
      for (int c = trigger.patch_col; c < trigger.patch_col + trigger.patch_size; ++c)
        for (int ch = 0; ch < shape.channels; ++ch) {
          const Index i = (Index(r) * shape.width + c) * shape.channels + ch;
          out.input(i) = std::clamp((1.0 - a) * sample.input(i) + a * t(i), 0.0, 1.0);
        }
  }
  out.label = target;
  out.provenance = Provenance::backdoor;
  return out;
}

SampleList poison_dataset(std::span<const LabeledSample> clean, const TriggerSpec& trigger,
                          const Shape& shape, int target, double rate, std::uint64_t seed) {
  if (rate < 0 || rate > 1) throw ParameterError("poison rate must be in [0,1]");
  SampleList out(clean.begin(), clean.end());
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].label != target) candidates.push_back(i);
  Rng rng = make_rng(seed, 0x9015);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const auto k = std::size_t(std::floor(rate * double(clean.size())));
  if (k > candidates.size()) throw CapacityError("not enough non-target samples to poison");
  for (std::size_t j = 0; j < k; ++j) out[candidates[j]] = apply_trigger(out[candidates[j]], trigger, shape, target);
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

SampleList class_balanced_subset(std::span<const LabeledSample> samples, std::size_t count,
                                 int classes, std::uint64_t seed) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0xba1a);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> quota(std::size_t(classes), count / std::size_t(classes));
  for (std::size_t c = 0; c < count % std::size_t(classes); ++c) ++quota[c];
  SampleList out;
  for (std::size_t i : order) {
    const int y = samples[i].label;
    if (y < 0 || y >= classes || quota[std::size_t(y)] == 0) continue;
    --quota[std::size_t(y)];
    out.push_back(samples[i]);
  }
  if (out.size() != count) throw CapacityError("not enough samples for a class-balanced subset");
  return out;
}

Splits make_splits(std::span<const LabeledSample> samples, const SplitSpec& spec) {
  const std::size_t requested =
      spec.train + spec.trusted + spec.sampling + spec.test_clean + spec.test_backdoor;
  if (requested > samples.size())
    throw CapacityError("requested " + std::to_string(requested) + " samples but only " +
                        std::to_string(samples.size()) + " available");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(spec.seed, 0x5911);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> used(samples.size(), false);

  Splits out;
  auto tag = [](LabeledSample s, Split split) {
    s.split = split;
    return s;
  };
  if (spec.class_balanced_trusted && spec.trusted > 0) {
    std::vector<std::size_t> quota(std::size_t(spec.classes), spec.trusted / std::size_t(spec.classes));
    for (std::size_t c = 0; c < spec.trusted % std::size_t(spec.classes); ++c) ++quota[c];
    for (std::size_t i : order) {
      const int y = samples[i].label;
      if (y < 0 || y >= spec.classes || quota[std::size_t(y)] == 0) continue;
      --quota[std::size_t(y)];
      used[i] = true;
      out.trusted.push_back(tag(samples[i], Split::trusted));
    }
    if (out.trusted.size() != spec.trusted)
      throw CapacityError("not enough samples per class for a balanced trusted set");
  }
  auto take = [&](std::size_t n, Split split, SampleList& dst, bool non_target) {
    for (std::size_t i : order) {
      if (dst.size() == n) break;
      if (used[i] || (non_target && samples[i].label == spec.target)) continue;
      used[i] = true;
      dst.push_back(tag(samples[i], split));
    }
    if (dst.size() != n) throw CapacityError("not enough samples for the " + to_string(split) + " split");
  };
  if (!spec.class_balanced_trusted) take(spec.trusted, Split::trusted, out.trusted, false);
  // the backdoor pool is reserved first so the non-target constraint cannot starve it
  take(spec.test_backdoor, Split::test, out.test_backdoor, true);
  take(spec.sampling, Split::sampling, out.sampling, false);
  take(spec.test_clean, Split::test, out.test_clean, false);
  take(spec.train, Split::train, out.train, false);
  if (spec.trigger)
    for (auto& s : out.test_backdoor) s = apply_trigger(s, *spec.trigger, spec.shape, spec.target);
  return out;
}

// ---------------------------------------------------------------------------
// Adversarial / OOD
// ---------------------------------------------------------------------------

SampleList gen_adversarial_pgd(const ParamVector& params, std::span<const LabeledSample> samples,
                               double eps, double step, int iters, std::span<const int> targets) {
  if (eps < 0) throw ParameterError("eps must be >= 0");
  if (iters < 0) throw ParameterError("iters must be >= 0");
  if (targets.size() != samples.size()) throw InputError("one target per sample required");
  SampleList out(samples.begin(), samples.end());
  if (samples.empty()) return out;
  const Network net(params.arch);
  const Eigen::MatrixXd x0 = stack_inputs(samples);
  const Eigen::MatrixXd lo = (x0.array() - eps).max(0.0).matrix();
  const Eigen::MatrixXd hi = (x0.array() + eps).min(1.0).matrix();
  Eigen::MatrixXd x = x0;
  for (int it = 0; it < iters && eps > 0; ++it) {
    const Eigen::MatrixXd g = net.input_gradient(params.values, x, targets);
    x -= step * g.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    x = x.cwiseMax(lo).cwiseMin(hi);
    // x0 +- eps rounds; step inward until the ball constraint holds exactly
    for (Index k = 0; k < x.size(); ++k) {
      double& v = x.data()[k];
      const double v0 = x0.data()[k];
      while (v - v0 > eps) v = std::nextafter(v, -1.0);
      while (v0 - v > eps) v = std::nextafter(v, 2.0);
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].input = x.col(Index(i));
    out[i].provenance = Provenance::adversarial;
  }
  return out;
}

LabeledSample gen_adversarial_pgd(const ParamVector& params, const LabeledSample& sample, double eps,
                                  double step, int iters, int target) {
  const int t[1] = {target};
  return gen_adversarial_pgd(params, std::span<const LabeledSample>(&sample, 1), eps, step, iters, t)
      .front();
}

SampleList gen_ood(OodKind kind, std::size_t count, std::uint64_t seed, const Shape& shape) {
  if (count < 1) throw ParameterError("ood count must be >= 1");
  SampleList out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, 0x00d0000 + i);
    LabeledSample s;
    s.provenance = Provenance::ood;
    s.split = Split::test;
    s.id = std::int64_t(i);
    if (kind == OodKind::uniform_noise) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      s.input.resize(shape.size());
      for (Index k = 0; k < s.input.size(); ++k) s.input(k) = u(rng);
      s.label = 0;
    } else {
      if (shape != Shape{14, 14, 1}) throw ParameterError("shifted digits are 14x14x1 only");
      s.label = int(i % 10);
      s.input = render_glyph(s.label, rng, true);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contamination
// ---------------------------------------------------------------------------

void ContaminationSpec::validate() const {
  if (mode == Mode::gaussian_noise) {
    if (sigma < 0) throw ParameterError("noise sigma must be >= 0");
  } else if (!(rate >= 0 && rate <= 0.5)) {
    throw ParameterError("contamination rate must be in [0, 0.5]");
  }
}

std::string to_string(ContaminationSpec::Mode m) {
  switch (m) {
    case ContaminationSpec::Mode::same_type: return "same_type";
    case ContaminationSpec::Mode::wrong_type: return "wrong_type";
    case ContaminationSpec::Mode::gaussian_noise: return "gaussian_noise";
  }
  return "same_type";
}

SampleList contaminate_trusted(std::span<const LabeledSample> trusted, const ContaminationSpec& spec,
                               const TriggerSpec& trigger_same, const TriggerSpec& trigger_other,
                               const Shape& shape, int target) {
  spec.validate();
  SampleList out(trusted.begin(), trusted.end());
  if (spec.mode == ContaminationSpec::Mode::gaussian_noise) {
    if (spec.sigma == 0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) {
      Rng rng = make_rng(spec.seed, 0x6a55 + std::uint64_t(out[i].id) * 7919);
      std::normal_distribution<double> nd(0.0, spec.sigma);
      for (Index k = 0; k < out[i].input.size(); ++k)
        out[i].input(k) = std::clamp(out[i].input(k) + nd(rng), 0.0, 1.0);
    }
    return out;
  }
  const auto k = std::size_t(std::floor(spec.rate * double(trusted.size()) + 1e-9));
  if (spec.rate > 0 && k < 1) throw ParameterError("rate * |D_T| must be >= 1");
  if (k == 0) return out;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].label != target) candidates.push_back(i);
  if (candidates.size() < k) throw CapacityError("not enough non-target trusted samples to contaminate");
  Rng rng = make_rng(spec.seed, 0xc0de);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const auto& trig = spec.mode == ContaminationSpec::Mode::same_type ? trigger_same : trigger_other;
  for (std::size_t j = 0; j < k; ++j) {
    auto& s = out[candidates[j]];
    s = apply_trigger(s, trig, shape, target);
  }
  return out;
}

std::string manifest_csv(std::span<const LabeledSample> samples) {
  std::ostringstream os;
  os << "sample_id,split,provenance,label,file_offset\n";
  for (const auto& s : samples)
    os << s.id << ',' << to_string(s.split) << ',' << to_string(s.provenance) << ',' << s.label << ','
       << s.source_offset << '\n';
  return os.str();
}

}  // namespace mad
