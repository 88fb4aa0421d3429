#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with stdout and stderr captured into files under `dir`.
Run cli(const testing::TempDir& dir, const std::string& args, const std::string& env = {}) {
  const std::string o = dir / "stdout.txt";
  const std::string e = dir / "stderr.txt";
  const std::string cmd = env + " \"" CMDGOAL_CLI_PATH "\" " + args + " >\"" + o + "\" 2>\"" + e + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::slurp(o);
  r.err = testing::slurp(e);
  return r;
}

std::string q(const std::string& s) { return "\"" + s + "\""; }

void gen(const testing::TempDir& dir, const std::string& out, int seed = 3) {
  const Run r = cli(dir, "gen-data --out " + q(out) + " --seed " + std::to_string(seed) +
                             " --num-train 12 --num-val 4 --num-test 6 --feature-dim 8");
  REQUIRE(r.code == 0);
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    testing::TempDir dir;
    CHECK(cli(dir, "").code == 2);
    CHECK(cli(dir, "frobnicate").code == 2);
    CHECK(cli(dir, "gen-data").code == 2);
    CHECK(cli(dir, "eval --model pdpc --split dev").code == 2);
    CHECK(cli(dir, "--help").code == 0);
    const Run v = cli(dir, "--version");
    CHECK(v.code == 0);
    CHECK_FALSE(v.out.empty());
  }

  TEST_CASE("runtime errors exit with 1 and name the kind") {
    testing::TempDir dir;
    const Run r = cli(dir, "train --model pdpc --data " + q(dir / "missing") + " --out " + q(dir / "m.ckpt"));
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error: ", 0) == 0);
    const Run m = cli(dir, "train --model transformer --data " + q(dir.str()) + " --out " + q(dir / "m.ckpt"));
    CHECK(m.code == 1);
    CHECK(m.err.find("invalid-argument") != std::string::npos);
    const Run d = cli(dir, "rasterize --out " + q(dir / "r"), "CMDGOAL_DATA_DIR=");
    CHECK(d.code == 1);
    CHECK(d.err.find("CMDGOAL_DATA_DIR") != std::string::npos);
  }

  TEST_CASE("gen-data is reproducible and writes a manifest") {
    testing::TempDir dir;
    gen(dir, dir / "a");
    gen(dir, dir / "b");
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "a")) {
      const std::string name = e.path().filename().string();
      if (name == "manifest.json") continue;
      ++files;
      CAPTURE(name);
      CHECK(testing::slurp(e.path().string()) == testing::slurp(dir / ("b/" + name)));
    }
    CHECK(files >= 6);
    const auto m = nlohmann::json::parse(testing::slurp(dir / "a/manifest.json"));
    CHECK(m["subcommand"] == "gen-data");
    CHECK(m.contains("version"));
    const std::string opts = m["options"];
    CHECK(opts.find("seed") != std::string::npos);
    gen(dir, dir / "c", 4);
    CHECK(testing::slurp(dir / "a/train.jsonl") != testing::slurp(dir / "c/train.jsonl"));
  }

  TEST_CASE("data directory from the environment") {
    testing::TempDir dir;
    gen(dir, dir / "data");
    const Run r = cli(dir, "rasterize --split test --index 1 --out " + q(dir / "png"),
                      "CMDGOAL_DATA_DIR=" + q(dir / "data"));
    CHECK(r.code == 0);
    std::size_t pngs = 0;
    for (const auto& e : fs::directory_iterator(dir / "png")) pngs += e.path().extension() == ".png";
    CHECK(pngs == 15);
  }

  TEST_CASE("train, predict and eval pipeline") {
    testing::TempDir dir;
    const std::string data = dir / "data";
    gen(dir, data);
    const std::string ckpt = dir / "pdpc.ckpt";
    Run r = cli(dir, "train --model pdpc --data " + q(data) + " --out " + q(ckpt) + " --channels 8 --max-steps 2");
    CAPTURE(r.err);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(ckpt + ".manifest.json"));
    CHECK(fs::exists(ckpt + ".curve.csv"));

    r = cli(dir, "predict --checkpoint " + q(ckpt) + " --data " + q(data) + " --split test --index 0 --top-k 32 --out " +
                     q(dir / "pred"));
    REQUIRE(r.code == 0);
    bool heat = false;
    std::string comps;
    for (const auto& e : fs::directory_iterator(dir / "pred")) {
      const std::string n = e.path().filename().string();
      heat = heat || n.ends_with("_heatmap.png");
      if (n.ends_with("_components.csv")) comps = testing::slurp(e.path().string());
    }
    CHECK(heat);
    CHECK(std::count(comps.begin(), comps.end(), '\n') == 33);

    const std::string ev = "eval --model pdpc --checkpoint " + q(ckpt) + " --data " + q(data) +
                           " --split test --samples 50 --bootstrap 20 --seed 5 --out ";
    REQUIRE(cli(dir, ev + q(dir / "e1")).code == 0);
    REQUIRE(cli(dir, "--threads 2 " + ev + q(dir / "e2")).code == 0);
    CHECK(testing::slurp(dir / "e1.csv") == testing::slurp(dir / "e2.csv"));
    CHECK(testing::slurp(dir / "e1.json") == testing::slurp(dir / "e2.json"));
    CHECK(fs::exists(dir / "e1_per_intent.csv"));
    CHECK(fs::exists(dir / "e1.manifest.json"));

    REQUIRE(cli(dir, "eval --model generator-truth --data " + q(data) +
                         " --split test --samples 50 --bootstrap 20 --out " + q(dir / "e3"))
                .code == 0);
    REQUIRE(cli(dir, "eval --model pick-ego --data " + q(data) + " --split test --samples 10 --bootstrap 20 --out " +
                         q(dir / "e4"))
                .code == 0);
    r = cli(dir, "report --results " + q(dir / "e1.json") + " " + q(dir / "e3.json") + " " + q(dir / "e4.json") +
                     " --out " + q(dir / "all"));
    REQUIRE(r.code == 0);
    const std::string table = testing::slurp(dir / "all.csv");
    CHECK(std::count(table.begin(), table.end(), '\n') == 4);
  }

  TEST_CASE("gradient audit subcommand") {
    testing::TempDir dir;
    const Run r = cli(dir, "audit-grad --target mixture --mixture-instances 5");
    CHECK(r.code == 0);
    CHECK(r.out.find("mixture") != std::string::npos);
  }
}
