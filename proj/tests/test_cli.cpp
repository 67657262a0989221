#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "einf/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = einf::cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::vector<std::string> split_ids(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string tok; std::getline(ss, tok, ',');) out.push_back(tok);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("einf_cli_" + std::string(
                                                      ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, MaxTokensOneAppendsExactlyOneToken) {
  const auto r = run({"generate", "--text", "hello", "--max-tokens", "1", "--emit-ids"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ids = split_ids(r.out.substr(0, r.out.find('\n')));
  EXPECT_EQ(ids.size(), 1u + 5u + 1u);  // BOS + "hello" + one
  EXPECT_EQ(ids[0], "256");
}

TEST_F(CliTest, GenerateIsDeterministic) {
  const std::vector<std::string> args{"generate", "--text", "the quick brown fox", "--max-tokens", "12", "--emit-ids"};
  const auto a = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, run(args).out);
}

TEST_F(CliTest, DenseAndEdgeAgreeOnShortPrompt) {
  // 1 + 6 prompt tokens + 7 generated stays below the 14-token threshold.
  const auto dense = run({"generate", "--text", "abcdef", "--max-tokens", "7", "--mode", "dense"});
  const auto edge = run({"generate", "--text", "abcdef", "--max-tokens", "7", "--mode", "edgeinfinite"});
  ASSERT_EQ(dense.code, 0);
  EXPECT_EQ(dense.out, edge.out);
}

TEST_F(CliTest, TraceGoesToStderr) {
  const auto r = run({"generate", "--text", "0123456789abcdefghij", "--max-tokens", "12", "--trace"});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("stage=prefill"), std::string::npos);
  EXPECT_NE(r.err.find("stage=flush"), std::string::npos);
  EXPECT_EQ(count_lines(r.err), 12u);
}

TEST_F(CliTest, InitThenLoadFromDirectory) {
  ASSERT_EQ(run({"init", "--out", path("m"), "--seed", "3", "--d-model", "16"}).code, 0);
  EXPECT_TRUE(fs::exists(path("m/model.einf")));
  EXPECT_TRUE(fs::exists(path("m/model.json")));
  const auto a = run({"generate", "--model", path("m/model.einf"), "--text", "xy", "--emit-ids"});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run({"generate", "--model", path("m/model.einf"), "--config", path("m/model.json"), "--text", "xy",
                      "--emit-ids"});
  EXPECT_EQ(a.out, b.out);
}

TEST_F(CliTest, BenchCsvSchemaAndRepeats) {
  const auto r = run({"bench", "--lengths", "8,16,32", "--repeats", "3", "--out", path("b.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("b.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "mode,length,ttft_ms,prefill_flops,peak_cache_rows,peak_bytes");
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(split_ids(line));
  ASSERT_EQ(rows.size(), 2u * 3u * 3u);
  for (std::size_t cell = 0; cell < rows.size(); cell += 3) {
    EXPECT_EQ(rows[cell][3], rows[cell + 1][3]);
    EXPECT_EQ(rows[cell][3], rows[cell + 2][3]);
  }
  EXPECT_EQ(rows.front()[0], "dense");
  EXPECT_EQ(rows.back()[0], "edgeinfinite");
}

TEST_F(CliTest, BenchRejectsBadLengths) {
  auto r = run({"bench", "--lengths", "16,8"});
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(count_lines(r.err), 1u);
  r = run({"bench", "--lengths", "0,8"});
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(count_lines(r.err), 1u);
  r = run({"bench", "--lengths", "-3"});
  EXPECT_NE(r.code, 0);
}

TEST_F(CliTest, CompareShortPromptExitsZeroWithTinyDelta) {
  const auto r = run({"compare", "--text", "short"});
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("route=short"), std::string::npos);
  EXPECT_NE(r.out.find("max_abs_delta=0\n"), std::string::npos);
}

TEST_F(CliTest, CompareLongPromptReportsAndExitsZero) {
  const auto r = run({"compare", "--text", "a considerably longer prompt that crosses the threshold"});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("route=long"), std::string::npos);
  EXPECT_EQ(count_lines(r.out), 1u + 56u + 1u);
}

TEST_F(CliTest, InspectCacheCsv) {
  const auto r = run({"inspect-cache", "--ids", "256,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19", "--max-tokens", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::stringstream ss(r.out);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "step,sink_len,rolling_len,total,memory_segments");
  std::size_t rows = 0;
  while (std::getline(ss, line)) {
    const auto f = split_ids(line);
    ASSERT_EQ(f.size(), 5u);
    EXPECT_LE(std::stoul(f[3]), 14u);
    EXPECT_EQ(std::stoul(f[1]) + std::stoul(f[2]), std::stoul(f[3]));
    ++rows;
  }
  EXPECT_EQ(rows, 10u);
}

TEST_F(CliTest, TrainGateWritesCheckpointAndCurve) {
  const auto r = run({"train-gate", "--samples", "4", "--steps", "3", "--batch", "2", "--out", path("g.einf"),
                      "--loss-csv", path("loss.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("g.einf")));
  std::ifstream in(path("loss.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,loss");
  const auto g = run({"generate", "--gates", path("g.einf"), "--text", "hi", "--emit-ids"});
  EXPECT_EQ(g.code, 0) << g.err;
}

TEST_F(CliTest, MalformedInputGivesOneLineDiagnostic) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"generate", "--model", path("missing.einf"), "--text", "x"},
           {"generate", "--prompt", path("missing.txt")},
           {"generate", "--text", "x", "--mode", "sparse"},
           {"generate", "--ids", "1,999"},
           {"frobnicate"},
           {"compare", "--config", path("missing.json"), "--text", "x"}}) {
    const auto r = run(args);
    EXPECT_NE(r.code, 0) << args[0];
    EXPECT_EQ(count_lines(r.err), 1u) << r.err;
    EXPECT_TRUE(r.out.empty());
  }
}

TEST_F(CliTest, FailedRunLeavesNoOutputFile) {
  const auto r = run({"bench", "--lengths", "16,8", "--out", path("b.csv")});
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(path("b.csv")));
}

TEST_F(CliTest, BinaryRunsEndToEnd) {
  const std::string cmd = std::string(EINF_CLI_PATH) + " generate --text hi --max-tokens 3 --emit-ids";
  FILE* pipe = popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  std::string out;
  char buf[256];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  EXPECT_EQ(pclose(pipe), 0);
  EXPECT_EQ(out, run({"generate", "--text", "hi", "--max-tokens", "3", "--emit-ids"}).out);
}
