#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "mad/error.hpp"

namespace fs = std::filesystem;

namespace mad::cli {

std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr))
    throw Error("sha1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string blob_sha1(const std::string& bytes) {
  std::string s = "blob " + std::to_string(bytes.size());
  s.push_back('\0');
  return sha1_hex(s + bytes);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunDir::RunDir(fs::path path, bool force) : path_(std::move(path)) {
  if (fs::exists(path_)) {
    if (!force) throw ParameterError("run directory '" + path_.string() + "' exists; pass --force to replace it");
    fs::remove_all(path_);
  }
  fs::create_directories(path_);
}

void RunDir::write(const std::string& name, const std::string& bytes) {
  const fs::path p = path_ / name;
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw InputError("cannot write '" + p.string() + "'");
  outputs_.emplace_back(name, blob_sha1(bytes));
}

void RunDir::input(const std::string& role, const fs::path& file) {
  inputs_.emplace_back(role, file.string(), blob_sha1(read_file(file)));
}

void RunDir::finish(const std::string& command, const std::string& config_hash, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["inputs"] = nlohmann::json::array();
  for (const auto& [role, p, h] : inputs_) j["inputs"].push_back({{"role", role}, {"path", p}, {"blob_sha1", h}});
  j["outputs"] = nlohmann::json::array();
  auto sorted = outputs_;
  std::sort(sorted.begin(), sorted.end());
  for (const auto& [name, h] : sorted) j["outputs"].push_back({{"file", name}, {"blob_sha1", h}});
  const std::string text = j.dump(2) + "\n";
  std::ofstream out(path_ / "manifest.json", std::ios::binary);
  out << text;
}

namespace {

constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 55;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else if (c == '"') o += "&quot;";
    else o += c;
  }
  return o;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

void pad(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

std::string axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::ostringstream os;
  os << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double x = f.x0 + (f.x1 - f.x0) * i / 5, y = f.y0 + (f.y1 - f.y0) * i / 5;
    os << "<line x1=\"" << f.px(x) << "\" y1=\"" << H - B << "\" x2=\"" << f.px(x) << "\" y2=\"" << H - B + 5
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << f.px(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << num(x) << "</text>\n";
    os << "<line x1=\"" << L - 5 << "\" y1=\"" << f.py(y) << "\" x2=\"" << L << "\" y2=\"" << f.py(y)
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << L - 8 << "\" y=\"" << f.py(y) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << num(y)
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << esc(xlabel) << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << esc(ylabel) << "</text>\n";
  return os.str();
}

std::string legend(const std::vector<std::string>& labels) {
  std::ostringstream os;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = T + 8 + 16 * double(i);
    os << "<rect x=\"" << W - R - 150 << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"10\" fill=\""
       << kColors[i % 6] << "\"/>\n";
    os << "<text x=\"" << W - R - 133 << "\" y=\"" << y << "\" font-size=\"11\">" << esc(labels[i]) << "</text>\n";
  }
  return os.str();
}

std::string wrap(const std::string& body) {
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n"
     << body << "</svg>\n";
  return os.str();
}

}  // namespace

std::string svg_lines(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series, bool diagonal) {
  Frame f{1e300, -1e300, 1e300, -1e300};
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      f.x0 = std::min(f.x0, s.x[i]);
      f.x1 = std::max(f.x1, s.x[i]);
      f.y0 = std::min(f.y0, s.y[i]);
      f.y1 = std::max(f.y1, s.y[i]);
    }
  if (f.x0 > f.x1) f = {0, 1, 0, 1};
  pad(f.x0, f.x1);
  pad(f.y0, f.y1);
  std::string body = axes(f, title, xlabel, ylabel);
  if (diagonal)
    body += "<line x1=\"" + num(f.px(f.x0)) + "\" y1=\"" + num(f.py(f.y0)) + "\" x2=\"" + num(f.px(f.x1)) +
            "\" y2=\"" + num(f.py(f.y1)) + "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::string pts;
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      if (std::isfinite(series[k].x[i]) && std::isfinite(series[k].y[i]))
        pts += num(f.px(series[k].x[i])) + "," + num(f.py(series[k].y[i])) + " ";
    body += "<polyline fill=\"none\" stroke=\"" + std::string(kColors[k % 6]) + "\" stroke-width=\"1.8\" points=\"" +
            pts + "\"/>\n";
    labels.push_back(series[k].label);
  }
  return wrap(body + legend(labels));
}

std::string svg_histograms(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& groups,
                           int bins) {
  double lo = 1e300, hi = -1e300;
  for (const auto& [name, v] : groups)
    for (double x : v)
      if (std::isfinite(x)) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
  if (lo > hi) lo = 0, hi = 1;
  pad(lo, hi);
  std::vector<std::vector<double>> density;
  double top = 0;
  const double width = (hi - lo) / bins;
  for (const auto& [name, v] : groups) {
    std::vector<double> c(std::size_t(bins), 0.0);
    for (double x : v)
      if (std::isfinite(x)) c[std::size_t(std::clamp(int((x - lo) / width), 0, bins - 1))] += 1;
    for (double& x : c) {
      x /= std::max<double>(1, double(v.size()));
      top = std::max(top, x);
    }
    density.push_back(std::move(c));
  }
  Frame f{lo, hi, 0, top > 0 ? top : 1};
  std::string body = axes(f, title, "score", "fraction");
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < density.size(); ++k) {
    for (int b = 0; b < bins; ++b) {
      const double x = lo + b * width, y = density[k][std::size_t(b)];
      if (y <= 0) continue;
      body += "<rect x=\"" + num(f.px(x)) + "\" y=\"" + num(f.py(y)) + "\" width=\"" +
              num(f.px(x + width) - f.px(x)) + "\" height=\"" + num(f.py(0) - f.py(y)) + "\" fill=\"" +
              kColors[k % 6] + "\" fill-opacity=\"0.45\"/>\n";
    }
    labels.push_back(groups[k].first);
  }
  return wrap(body + legend(labels));
}

}  // namespace mad::cli
