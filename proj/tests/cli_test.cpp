// Drives the command-line tool end to end through the shell.

#include "doctest.h"
#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const std::string kCli = LAYERPRUNE_CLI_PATH;

struct Result {
  int status = -1;
  std::string out;
};

Result run(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli_output.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" + kCli + "' " + args + " > '" + log.string() + "' 2>&1";
  const int raw = std::system(cmd.c_str());
  Result r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) ++n;
  return n;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("layerprune_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

}  // namespace

TEST_CASE("gen-latency") {
  const fs::path dir = scratch("gen");
  REQUIRE(run("gen-latency --count 5000 --seed 3 --out a.csv", dir).status == 0);
  REQUIRE(run("gen-latency --count 5000 --seed 3 --out b.csv", dir).status == 0);
  CHECK(count_lines(dir / "a.csv") == 5001);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  REQUIRE(run("gen-latency --count 5000 --seed 4 --out c.csv", dir).status == 0);
  CHECK(slurp(dir / "a.csv") != slurp(dir / "c.csv"));

  REQUIRE(run("gen-latency --count 0 --seed 3 --out empty.csv", dir).status == 0);
  CHECK(slurp(dir / "empty.csv") == "a1,f1,a2,f2,a3,f3,a4,f4,latency_us\n");

  CHECK(run("gen-latency --count -5 --out x.csv", dir).status != 0);
  CHECK(run("gen-latency --spec 4,4 --count 5 --out x.csv", dir).status != 0);
  fs::remove_all(dir);
}

TEST_CASE("train-latency") {
  const fs::path dir = scratch("train");
  REQUIRE(run("gen-latency --count 5000 --seed 1 --out s.csv", dir).status == 0);
  const Result r = run("train-latency --samples s.csv --split 0.8 --seed 1 --out m.txt", dir);
  REQUIRE(r.status == 0);
  CHECK(r.out.find("train rows: 4000, validation rows: 1000") != std::string::npos);
  const auto pos = r.out.find("RMSPE: ");
  REQUIRE(pos != std::string::npos);
  CHECK(std::stod(r.out.substr(pos + 7)) <= 5.0);
  CHECK(fs::exists(dir / "m.txt"));

  const Result missing = run("train-latency --samples nope.csv --out m2.txt", dir);
  CHECK(missing.status == 1);
  CHECK(missing.out.find("nope.csv") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "m2.txt"));

  write(dir / "bad.csv", "a1,f1,a2,f2,a3,f3,a4,f4,latency_us\n0,0,0,0,0,0,0,zero,5\n");
  const Result bad = run("train-latency --samples bad.csv --out m3.txt", dir);
  CHECK(bad.status == 1);
  CHECK(bad.out.find("line 2") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("search and compare") {
  const fs::path dir = scratch("search");
  const std::string common =
      R"("N": 150, "P": 20, "S": 20, "target_latency_us": 1900, "alpha": -1, "seed": 2,
         "oracle": {"type": "surrogate"}, "latency_model": {"type": "cost_model"},)";
  write(dir / "reinforced.json", R"({"algorithm": "reinforced_ea", )" + common + R"( "output_dir": "out_r"})");
  write(dir / "random.json", R"({"algorithm": "random_ea", )" + common + R"( "output_dir": "out_e"})");
  write(dir / "random2.json", R"({"algorithm": "random_ea", )" + common + R"( "output_dir": "out_e2"})");

  const Result r = run("search --config reinforced.json", dir);
  CHECK(r.status == 0);
  REQUIRE(run("search --config random.json", dir).status == 0);
  REQUIRE(run("search --config random2.json", dir).status == 0);

  for (const char* name : {"manifest.json", "history.jsonl", "report.json", "population_stats.csv"}) {
    CHECK(fs::exists(dir / "out_r" / name));
  }
  CHECK(count_lines(dir / "out_r" / "history.jsonl") == 150);
  const auto report = nlohmann::json::parse(slurp(dir / "out_r" / "report.json"));
  CHECK(report["feasible"] == true);
  CHECK(report["final_model"]["predicted_latency_us"].get<double>() <= 1900.0);
  CHECK(slurp(dir / "out_e" / "history.jsonl") == slurp(dir / "out_e2" / "history.jsonl"));

  const Result cmp = run("compare --reports out_r/report.json out_e/report.json --csv cmp.csv", dir);
  CHECK(cmp.status == 0);
  CHECK(cmp.out.find("100") != std::string::npos);
  // Checkpoints 0, 50 and 100 plus a header.
  CHECK(count_lines(dir / "cmp.csv") == 4);

  const Result same = run("compare --reports out_e/report.json out_e/report.json --csv same.csv", dir);
  CHECK(same.status == 0);
  std::ifstream is(dir / "same.csv");
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    REQUIRE(cells.size() == 5);
    CHECK(cells[1] == cells[3]);
    CHECK(cells[2] == cells[4]);
  }

  write(dir / "empty.json", "{}");
  CHECK(run("compare --reports empty.json out_e/report.json", dir).status == 1);

  write(dir / "tight.json", R"({"algorithm": "random_ea", "N": 30, "P": 10, "S": 10, "target_latency_us": 100,
      "max_init_attempts": 2000, "oracle": {"type": "surrogate"}, "latency_model": {"type": "cost_model"},
      "output_dir": "out_t"})");
  const Result tight = run("search --config tight.json", dir);
  CHECK(tight.status == 2);
  CHECK(tight.out.find("infeasible") != std::string::npos);

  write(dir / "broken.json", R"({"algorithm": "annealing", "N": 30})");
  const Result broken = run("search --config broken.json", dir);
  CHECK(broken.status == 1);
  CHECK(broken.out.find("algorithm") != std::string::npos);
  CHECK(broken.out.find("output_dir") != std::string::npos);
  fs::remove_all(dir);
}
