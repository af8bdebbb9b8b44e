#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "dglue_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string p(const std::string& name) { return (work() / name).string(); }

int run(const std::string& args) {
  const std::string cmd =
      std::string(DGLUE_CLI_PATH) + " " + args + " >" + p("stdout.txt") + " 2>" + p("stderr.txt");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json json_of(const std::string& path) { return nlohmann::json::parse(slurp(path)); }

const std::string kSynth = "synth --frames 6 --keypoints 120 --descriptor-dim 32";
const std::string kModel = "--embed-dim 16 --rounds 1 --heads 2 --compact";

}  // namespace

// The pipeline stages depend on each other, so they run in order inside one test.
TEST(Cli, EndToEndPipeline) {
  ASSERT_EQ(run(kSynth + " --seed 3 --out " + p("s")), 0) << slurp(p("stderr.txt"));
  ASSERT_TRUE(fs::exists(p("s/session.json")));
  ASSERT_TRUE(fs::exists(p("s/groundtruth.json")));

  ASSERT_EQ(run("labelgen --session " + p("s") + " --min-shared 5 --out " + p("labels.json")), 0)
      << slurp(p("stderr.txt"));
  EXPECT_GT(json_of(p("labels.json")).at("pairs").size(), 0u);

  ASSERT_EQ(run("train --session " + p("s") + " --labels " + p("labels.json") + " " + kModel +
                " --steps 3 --batch 2 --lr 1e-3 --out " + p("w.dgw") + " --loss-csv " +
                p("loss.csv")),
            0)
      << slurp(p("stderr.txt"));
  const std::string csv = slurp(p("loss.csv"));
  EXPECT_EQ(csv.substr(0, 10), "step,loss\n");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  ASSERT_EQ(run("pair --session " + p("s") + " --a 0 --b 1 --out " + p("pair.json")), 0)
      << slurp(p("stderr.txt"));
  ASSERT_EQ(run("match --weights " + p("w.dgw") + " --pair " + p("pair.json") + " --out " +
                p("m.json") + " --dump-p"),
            0)
      << slurp(p("stderr.txt"));
  const auto m = json_of(p("m.json"));
  EXPECT_TRUE(m.contains("matches"));
  EXPECT_TRUE(m.contains("P"));

  ASSERT_EQ(run("eval --pair " + p("pair.json") + " --matches " + p("m.json") + " --out " +
                p("e1.json")),
            0)
      << slurp(p("stderr.txt"));
  EXPECT_EQ(json_of(p("e1.json")).at("pairs").size(), 1u);

  ASSERT_EQ(run("eval --session " + p("s") + " --min-shared 5 --matcher groundtruth --out " +
                p("gt.json") + " --table " + p("gt.txt")),
            0)
      << slurp(p("stderr.txt"));
  const auto gt = json_of(p("gt.json"));
  EXPECT_DOUBLE_EQ(gt.at("precision").get<double>(), 1.0);
  EXPECT_FALSE(slurp(p("gt.txt")).empty());

  ASSERT_EQ(run("eval --session " + p("s") + " --min-shared 5 --weights " + p("w.dgw") +
                " --out " + p("model.json")),
            0)
      << slurp(p("stderr.txt"));
  ASSERT_EQ(run("eval --session " + p("s") + " --min-shared 5 --matcher mutual-nn --out " +
                p("nn.json")),
            0);
  EXPECT_GT(json_of(p("nn.json")).at("precision").get<double>(), 0.0);
}

TEST(Cli, DeterministicOutputs) {
  ASSERT_EQ(run(kSynth + " --seed 9 --out " + p("d1")), 0);
  ASSERT_EQ(run(kSynth + " --seed 9 --out " + p("d2")), 0);
  EXPECT_EQ(slurp(p("d1/session.json")), slurp(p("d2/session.json")));
  EXPECT_EQ(slurp(p("d1/depth_0002.bin")), slurp(p("d2/depth_0002.bin")));

  ASSERT_EQ(run("bench --sizes 64 128 --no-timing --out " + p("b1.csv")), 0);
  ASSERT_EQ(run("bench --sizes 64 128 --no-timing --out " + p("b2.csv")), 0);
  EXPECT_EQ(slurp(p("b1.csv")), slurp(p("b2.csv")));
  EXPECT_NE(slurp(p("b1.csv")).find("num_keypoints"), std::string::npos);

  ASSERT_EQ(run("labelgen --session " + p("d1") + " --min-shared 5 --out " + p("l1.json")), 0);
  for (int t : {1, 2}) {
    const std::string out = p("tw" + std::to_string(t) + ".dgw");
    ASSERT_EQ(run("train --session " + p("d1") + " --labels " + p("l1.json") + " " + kModel +
                  " --steps 2 --batch 2 --threads " + std::to_string(t) + " --out " + out),
              0);
  }
  EXPECT_EQ(slurp(p("tw1.dgw")), slurp(p("tw2.dgw")));
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("synth"), 1);
  EXPECT_EQ(run("labelgen --session " + p("nope") + " --out " + p("x.json")), 1);
  EXPECT_NE(slurp(p("stderr.txt")).find("error:"), std::string::npos);

  std::ofstream(p("garbage.dgw")) << "not weights";
  ASSERT_EQ(run(kSynth + " --seed 1 --out " + p("e")), 0);
  ASSERT_EQ(run("pair --session " + p("e") + " --out " + p("ep.json")), 0);
  EXPECT_EQ(run("match --weights " + p("garbage.dgw") + " --pair " + p("ep.json") + " --out " +
                p("em.json")),
            1);
  EXPECT_EQ(run("train --session " + p("e") + " --labels " + p("missing.json") + " --out " +
                p("ew.dgw")),
            1);
  EXPECT_EQ(run("pair --session " + p("e") + " --a 0 --b 99 --out " + p("bad.json")), 1);
}
