#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("advdrop_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& rel = "") const {
    return rel.empty() ? path.string() : (path / rel).string();
  }
};

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string base = (fs::temp_directory_path() /
                            ("advdrop_cli_io_" + std::to_string(::getpid()) +
                             "_" + std::to_string(counter++)))
                               .string();
  const std::string cmd = std::string(ADVDROP_CLI_PATH) + " " + args + " > " +
                          base + ".out 2> " + base + ".err";
  const int status = std::system(cmd.c_str());
  RunResult res;
  res.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  res.out = slurp(base + ".out");
  res.err = slurp(base + ".err");
  fs::remove(base + ".out");
  fs::remove(base + ".err");
  return res;
}

// The single <hash> directory created under <outdir>.
std::string hash_dir(const std::string& outdir) {
  std::vector<std::string> entries;
  for (const auto& e : fs::directory_iterator(outdir))
    entries.push_back(e.path().string());
  REQUIRE(entries.size() == 1);
  return entries.front();
}

}  // namespace

TEST_CASE("train writes the full per-seed layout and is byte-stable",
          "[cli]") {
  TempDir tmp;
  const std::string flags =
      "train --dataset two_gaussians --epochs 2 --seeds 3 --outdir " +
      tmp.str("runs");
  RunResult r = run_cli(flags);
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("test accuracy (%)") != std::string::npos);

  const std::string dir = hash_dir(tmp.str("runs")) + "/3";
  for (const char* name : {"metrics.jsonl", "rates.csv", "checkpoint",
                           "summary.json", "timing.log"})
    CHECK(fs::exists(dir + "/" + name));

  auto metrics = lines_of(slurp(dir + "/metrics.jsonl"));
  REQUIRE(metrics.size() == 2);
  nlohmann::json row = nlohmann::json::parse(metrics[0]);
  CHECK(row["epoch"] == 1);
  CHECK(row["seed"] == 3);
  CHECK(row["rates"].size() == 1);  // one hidden maskable site

  nlohmann::json summary = nlohmann::json::parse(slurp(dir + "/summary.json"));
  CHECK(summary["dropout"] == "advanced");
  CHECK(summary["hash"].get<std::string>().size() == 16);

  const std::string m1 = slurp(dir + "/metrics.jsonl");
  const std::string c1 = slurp(dir + "/rates.csv");
  const std::string k1 = slurp(dir + "/checkpoint");
  const std::string s1 = slurp(dir + "/summary.json");
  RunResult again = run_cli(flags);
  REQUIRE(again.code == 0);
  CHECK(slurp(dir + "/metrics.jsonl") == m1);
  CHECK(slurp(dir + "/rates.csv") == c1);
  CHECK(slurp(dir + "/checkpoint") == k1);
  CHECK(slurp(dir + "/summary.json") == s1);
  CHECK(again.out == r.out);
}

TEST_CASE("config file values load and flags take precedence", "[cli]") {
  TempDir tmp;
  {
    std::ofstream f(tmp.str("exp.cfg"));
    f << "[dataset]\nname = two_gaussians\nn_train = 64\nn_test = 32\n"
      << "[train]\nepochs = 3\nbatch_size = 16\n"
      << "[experiment]\nseeds = 5\noutdir = " << tmp.str("runs") << "\n";
  }
  RunResult r = run_cli("train --config " + tmp.str("exp.cfg") + " --epochs 1");
  INFO(r.err);
  REQUIRE(r.code == 0);
  const std::string dir = hash_dir(tmp.str("runs")) + "/5";
  CHECK(lines_of(slurp(dir + "/metrics.jsonl")).size() == 1);  // flag wins

  RunResult bad = run_cli("train --config " + tmp.str("nope.cfg"));
  CHECK(bad.code == 2);
  CHECK(bad.err.find("nope.cfg") != std::string::npos);
}

TEST_CASE("eval reuses checkpoints, checks hashes, reports chance-level",
          "[cli]") {
  TempDir tmp;
  const std::string common =
      " --dataset two_gaussians --epochs 1 --seeds 2 --outdir " +
      tmp.str("runs");
  REQUIRE(run_cli("train" + common).code == 0);
  const std::string dir_a = hash_dir(tmp.str("runs")) + "/2";

  RunResult ev = run_cli("eval" + common);
  INFO(ev.err);
  REQUIRE(ev.code == 0);
  CHECK(fs::exists(dir_a + "/eval.json"));
  nlohmann::json eval_j = nlohmann::json::parse(slurp(dir_a + "/eval.json"));
  nlohmann::json summary =
      nlohmann::json::parse(slurp(dir_a + "/summary.json"));
  CHECK(eval_j["test_metric"] == summary["final_test_metric"]);

  // different training config -> different hash -> no checkpoint -> 2
  RunResult missing = run_cli("eval" + common + " --lr 0.05");
  CHECK(missing.code == 2);

  // a checkpoint copied under the wrong hash directory -> 4
  REQUIRE(run_cli("train" + common + " --lr 0.05").code == 0);
  std::string dir_b;
  for (const auto& e : fs::directory_iterator(tmp.str("runs")))
    if (e.path().string() + "/2" != dir_a) dir_b = e.path().string() + "/2";
  REQUIRE_FALSE(dir_b.empty());
  fs::copy_file(dir_a + "/checkpoint", dir_b + "/checkpoint",
                fs::copy_options::overwrite_existing);
  RunResult mismatch = run_cli("eval" + common + " --lr 0.05");
  CHECK(mismatch.code == 4);
  CHECK(mismatch.err.find("trained under config") != std::string::npos);
}

TEST_CASE("uncertainty writes AUROC report from checkpoints", "[cli]") {
  TempDir tmp;
  const std::string common =
      " --dataset two_gaussians --epochs 2 --seeds 1 --outdir " +
      tmp.str("runs");
  REQUIRE(run_cli("train" + common).code == 0);
  RunResult r = run_cli("uncertainty" + common + " --T 8");
  INFO(r.err);
  REQUIRE(r.code == 0);
  const std::string dir = hash_dir(tmp.str("runs")) + "/1";
  REQUIRE(fs::exists(dir + "/uncertainty_T8.json"));
  nlohmann::json j = nlohmann::json::parse(slurp(dir + "/uncertainty_T8.json"));
  CHECK(j.contains("auroc_maxP"));
  CHECK(j.contains("auroc_entropy"));
  CHECK(j["T"] == 8);
  CHECK(j["accuracy"].get<double>() >= 0.0);
  CHECK(j["confusion"].size() == 2);
  CHECK(r.out.find("auroc_maxP") != std::string::npos);
}

TEST_CASE("prune emits one row per preservation level", "[cli]") {
  TempDir tmp;
  RunResult r = run_cli(
      "prune --dataset two_gaussians --epochs 1 --seeds 4 --rounds 2 --q 25 "
      "--granularity node --outdir " +
      tmp.str("runs"));
  INFO(r.err);
  REQUIRE(r.code == 0);
  const std::string dir = hash_dir(tmp.str("runs")) + "/4";
  const std::string csv = dir + "/prune_node_q25_r2_rate_guided.csv";
  REQUIRE(fs::exists(csv));
  auto rows = lines_of(slurp(csv));
  REQUIRE(rows.size() == 4);  // header + rounds 0..2
  CHECK(rows[1].rfind("0,1.0,node,rate_guided,", 0) == 0);
  CHECK(rows[2].rfind("1,0.75,node,rate_guided,", 0) == 0);
  CHECK(rows[3].rfind("2,0.5625,node,rate_guided,", 0) == 0);
}

TEST_CASE("distcheck writes curves and the approximation table", "[cli]") {
  TempDir tmp;
  RunResult r = run_cli("distcheck --outdir " + tmp.str("out"));
  // The full table and all curves are written regardless of the verdict.
  // With moment matching, the log-normal fit carries the heavy tail better,
  // so the softplus-Gaussian does not win and the command reports it.
  CHECK(r.code == 1);
  CHECK(r.err.find("did not win") != std::string::npos);
  const std::string dir = tmp.str("out") + "/distcheck";
  std::size_t curves = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().rfind("pdf_", 0) == 0) ++curves;
  CHECK(curves == 5);
  CHECK(fs::exists(dir + "/pdf_mu0.0_sigma150.0.csv"));
  auto curve = lines_of(slurp(dir + "/pdf_mu0.0_sigma3.0.csv"));
  REQUIRE(curve.size() == 513);  // hash comment + header + 511 grid points
  CHECK(curve[0].rfind("# config_hash=", 0) == 0);
  CHECK(curve[1] == "m,density");

  auto table = lines_of(slurp(dir + "/kl_table.csv"));
  REQUIRE(table.size() == 6);  // hash comment + header + 4 rows
  CHECK(table[0].rfind("# config_hash=", 0) == 0);
  CHECK(table[1] == "shape,scale,kl_softplus_gaussian,kl_lognormal,fit,note");
  int moment_rows = 0;
  bool undefined_flagged = false;
  for (std::size_t i = 2; i < table.size(); ++i) {
    std::vector<std::string> cells;
    std::stringstream ss(table[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() >= 5);
    CHECK(std::stod(cells[2]) > 0.0);
    CHECK(std::stod(cells[3]) > 0.0);
    if (cells[4] == "moments") {
      ++moment_rows;
      CHECK(std::stod(cells[3]) < std::stod(cells[2]));  // log-normal wins
    } else {
      CHECK(table[i].find("moments undefined, mode-matched") !=
            std::string::npos);
      undefined_flagged = true;
    }
  }
  CHECK(moment_rows == 2);  // shape 5 and 8; shape 2 has no finite variance
  CHECK(undefined_flagged);
}

TEST_CASE("missing dataset path exits 2 and names the path", "[cli]") {
  TempDir tmp;
  setenv("ADVDROP_DATA_DIR", tmp.str("empty").c_str(), 1);
  RunResult r = run_cli("train --dataset digits --outdir " + tmp.str("runs"));
  CHECK(r.code == 2);
  CHECK(r.err.find("train-images-idx3-ubyte") != std::string::npos);
  unsetenv("ADVDROP_DATA_DIR");
}

TEST_CASE("image-fixture smoke run trains through the CLI", "[cli][slow]") {
  TempDir tmp;
  setenv("ADVDROP_DATA_DIR", ADVDROP_FIXTURE_DIR, 1);
  {
    std::ofstream f(tmp.str("digits.cfg"));
    f << "[dataset]\nname = digits\nlimit_train = 200\nlimit_test = 100\n"
      << "[model]\ndims = 784,16,10\n"
      << "[train]\nepochs = 1\nbatch_size = 32\n"
      << "[experiment]\nseeds = 1\noutdir = " << tmp.str("runs") << "\n";
  }
  RunResult r = run_cli("train --config " + tmp.str("digits.cfg"));
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("test accuracy (%)") != std::string::npos);
  const std::string dir = hash_dir(tmp.str("runs")) + "/1";
  // two hidden-site... the 784-16-10 net has one hidden layer; with input
  // masking on by default for images there are two maskable sites
  auto rates = lines_of(slurp(dir + "/rates.csv"));
  CHECK(rates.size() == 3);  // header + 2 sites x 1 epoch
  unsetenv("ADVDROP_DATA_DIR");
}

TEST_CASE("usage errors exit nonzero, help exits zero", "[cli]") {
  CHECK(run_cli("").code == 1);
  CHECK(run_cli("trian").code == 1);
  CHECK(run_cli("train --no-such-flag 3").code == 1);
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("train --dataset nosuchset").code == 1);
}
