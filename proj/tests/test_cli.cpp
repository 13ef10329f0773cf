#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::path(MAD_CLI_WORK);

int mad(const std::string& args, const std::string& log = "cli.log") {
  const std::string cmd = "cd '" + kWork.string() + "' && '" MAD_CLI_PATH "' " + args + " > '" + log + "' 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void put(const std::string& name, const std::string& text) { std::ofstream(kWork / name, std::ios::binary) << text; }

/// Last stdout line of the previous command: the run directory.
fs::path run_dir(const std::string& log = "cli.log") {
  std::istringstream in(slurp(kWork / log));
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty() && line.rfind("mad:", 0) != 0) last = line;
  return kWork / last;
}

std::map<std::string, std::map<std::string, double>> read_scores(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  std::map<std::string, std::map<std::string, double>> out;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
    out[f[2]][f[0]] = std::stod(f[3]);
  }
  return out;
}

struct Fresh {
  Fresh() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
};

const std::vector<std::vector<double>> kTrusted{{1, 2, 3, 5}, {2, 1, 0, 1}};
const std::vector<std::vector<double>> kTest{{0, 1, 4, 4}, {3, 3, 1, 0}};

std::string hand_traces() {
  std::ostringstream os;
  os << "sample_id,provenance,target_label,t0,t1,t2,t3\n";
  auto row = [&](const std::string& id, const std::string& prov, int label, const std::vector<double>& v) {
    os << id << ',' << prov << ',' << label;
    for (double x : v) os << ',' << x;
    os << '\n';
  };
  row("trusted:1", "clean", 0, kTrusted[0]);
  row("trusted:2", "clean", 1, kTrusted[1]);
  row("test:3", "clean", 0, kTest[0]);
  row("test-backdoor:4", "backdoor", 0, kTest[1]);
  return os.str();
}

}  // namespace

TEST_CASE_FIXTURE(Fresh, "cli: usage and config errors exit with 2") {
  CHECK(mad("train --config missing.ini") == 2);
  CHECK(slurp(kWork / "cli.log").find("missing.ini") != std::string::npos);
  put("bad.ini", "[sgld]\nstepsize = 1\n");
  CHECK(mad("train --config bad.ini") == 2);
  CHECK(slurp(kWork / "cli.log").find("sgld.stepsize") != std::string::npos);
  CHECK(mad("train --no-such-flag") == 2);
  CHECK(mad("") == 2);
  CHECK(mad("--help") == 0);

  put("traces.csv", hand_traces());
  CHECK(mad("score --traces traces.csv --method best") == 2);
  CHECK(mad("score --traces nowhere.csv") == 2);
  put("empty.csv", "sample_id,provenance,method,score\n");
  put("labels.csv", "sample_id,provenance,label,prediction,role\n");
  CHECK(mad("eval --scores empty.csv --labels labels.csv") == 2);
}

TEST_CASE_FIXTURE(Fresh, "cli score: hand-built traces match the pearson-mean oracle") {
  put("traces.csv", hand_traces());
  REQUIRE(mad("score --traces traces.csv --method mean --method clc") == 0);
  const fs::path dir = run_dir();
  const auto s = read_scores(dir / "scores.csv");
  REQUIRE(s.size() == 2);
  CHECK(s.at("mean").size() == 2);
  CHECK(s.at("clc").size() == 2);
  const std::string ids[] = {"test:3", "test-backdoor:4"};
  for (int i = 0; i < 2; ++i) {
    const double want = 0.5 * (oracle::pearson(kTest[std::size_t(i)], kTrusted[0]) +
                               oracle::pearson(kTest[std::size_t(i)], kTrusted[1]));
    CHECK(s.at("mean").at(ids[i]) == doctest::Approx(want).epsilon(1e-12));
  }
  CHECK(fs::exists(dir / "manifest.json"));

  // same inputs and config name the same directory, which needs --force
  CHECK(mad("score --traces traces.csv --method mean --method clc") == 2);
  const std::string before = slurp(dir / "scores.csv");
  REQUIRE(mad("score --traces traces.csv --method mean --method clc --force") == 0);
  CHECK(slurp(dir / "scores.csv") == before);
  CHECK(slurp(kWork / "traces.csv") == hand_traces());
}

TEST_CASE_FIXTURE(Fresh, "cli eval: AUROC and DER match hand values, plots are SVG documents") {
  put("scores.csv",
      "sample_id,provenance,method,score\n"
      "test:1,clean,mean,3\n"
      "test:2,clean,mean,2\n"
      "test-backdoor:3,backdoor,mean,1\n"
      "test-backdoor:4,backdoor,mean,2.5\n");
  put("labels.csv",
      "sample_id,provenance,label,prediction,role\n"
      "test:1,clean,4,4,normal\n"
      "test:2,clean,5,5,normal\n"
      "test-backdoor:3,backdoor,0,0,anomalous\n"
      "test-backdoor:4,backdoor,0,0,anomalous\n");
  REQUIRE(mad("eval --scores scores.csv --labels labels.csv") == 0);
  const fs::path dir = run_dir();
  std::istringstream in(slurp(dir / "metrics.csv"));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "method,n_normal,n_anomalous,auroc,der,threshold,post_cacc,post_asr,baseline_cacc,baseline_asr");
  std::vector<std::string> f;
  std::stringstream ls(row);
  for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
  REQUIRE(f.size() == 10);
  CHECK(std::stod(f[3]) == doctest::Approx(0.75));  // 3 of 4 pairs ordered
  CHECK(std::stod(f[4]) == doctest::Approx(0.75));
  CHECK(std::stod(f[5]) == doctest::Approx(2.0));  // most permissive of the tied thresholds
  for (const char* svg : {"roc.svg", "der_ratio.svg", "hist_mean.svg"}) {
    const std::string text = slurp(dir / svg);
    CHECK(text.rfind("<?xml", 0) == 0);
    CHECK(text.find("<svg") != std::string::npos);
    CHECK(text.substr(text.size() - 7) == "</svg>\n");
  }
}
