#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(SPARSEPOOL_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), p)) r.out += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const std::string kFixture = std::string(SPARSEPOOL_TEST_DATA) + "/outlier_example.spt4";

}  // namespace

TEST(Cli, PoolFixturePrintsEight) {
  const auto r = run("pool " + kFixture + " --mode outlier --lambda 2");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "8\n");
  EXPECT_EQ(run("pool " + kFixture).out, "8\n");
  EXPECT_EQ(run("pool " + kFixture + " --mode avg").out, "1\n");
  EXPECT_EQ(run("pool " + kFixture + " --mode max").out, "8\n");
  EXPECT_EQ(run("pool " + kFixture + " --mode dynamic --epoch 0 --total-epochs 4").out, "1\n");
}

TEST(Cli, InputAndConfigErrorsExitTwo) {
  EXPECT_EQ(run("pool /nonexistent.spt4").code, 2);
  EXPECT_EQ(run("pool " + kFixture + " --mode median").code, 2);
  EXPECT_EQ(run("pool " + kFixture + " --mode dynamic --epoch 9 --total-epochs 4").code, 2);
  EXPECT_EQ(run("train --config /nonexistent.ini").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("").code, 2);

  const auto dir = fs::temp_directory_path() / "sparsepool_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "bad.ini") << "[train]\nepochz = 3\n";
  EXPECT_EQ(run("train --config " + (dir / "bad.ini").string()).code, 2);
  std::ofstream(dir / "junk.spt4") << "not a tensor";
  EXPECT_EQ(run("pool " + (dir / "junk.spt4").string()).code, 2);
  EXPECT_EQ(run("report " + (dir / "missing").string()).code, 2);
}

TEST(Cli, CheckFailureExitsOne) {
  EXPECT_EQ(run("gradcheck --scope pool_max --trials 3 --inject-fault pool_max").code, 1);
  EXPECT_EQ(run("gradcheck --scope pool_max --trials 3").code, 0);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run("--help").code, 0); }
