#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Result {
  int rc = -1;
  std::string out;
};

Result run(const std::string& args) {
  std::string cmd = std::string(FRED_BIN) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int st = ::pclose(p);
  r.rc = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

fs::path scratch() {
  auto d = fs::temp_directory_path() / "fred_cli_test";
  fs::create_directories(d);
  return d;
}

std::string write(const std::string& name, const std::string& text) {
  auto p = scratch() / name;
  std::ofstream(p, std::ios::trunc) << text;
  return p.string();
}

std::string corpus(const std::string& f) { return std::string(FRED_CORPUS_DIR) + "/" + f; }

}  // namespace

TEST(Batch, PbzipSearchNamesCulpritLine) {
  auto script = write("pbzip.cmds", "break 40\nrun\nfred-checkpoint\ncontinue\nfred-reverse-watch *(&fifo.mut) == 0\n");
  auto r = run("debug " + corpus("pbzip_order.fr") + " --seed 7 --batch " + script);
  EXPECT_EQ(r.rc, 0) << r.out;  // repositioned before the culprit, so no fault is current
  auto last = r.out.rfind("(fred) fred-reverse-watch");
  ASSERT_NE(last, std::string::npos) << r.out;
  EXPECT_NE(r.out.find("pbzip_order.fr:32", last), std::string::npos) << r.out.substr(last);
}

TEST(Batch, EmptyScriptExitsZero) {
  auto script = write("empty.cmds", "");
  auto r = run("debug " + corpus("pbzip_order.fr") + " --batch " + script);
  EXPECT_EQ(r.rc, 0);
  EXPECT_EQ(r.out, "");
}

TEST(Batch, ReplayTwiceIsIdentical) {
  auto script = write("twice.cmds", "break 33\nrun\nnext\nstep\ninfo threads\ncontinue\nbt\nreverse-step\nprint table.ptr\n");
  auto a = run("debug " + corpus("atomicity_12228.fr") + " --seed 3 --batch " + script);
  auto b = run("debug " + corpus("atomicity_12228.fr") + " --seed 3 --batch " + script);
  EXPECT_EQ(a.rc, b.rc);
  EXPECT_EQ(a.out, b.out);
  EXPECT_FALSE(a.out.empty());
}

TEST(Batch, FailedSearchExitsThree) {
  auto prog = write("plain.fr", "fn main() {\n  let x = 1;\n  x = 2;\n}\n");
  auto script = write("fail.cmds", "break 3\nrun\nfred-reverse-watch x == 7\n");
  auto r = run("debug " + prog + " --batch " + script);
  EXPECT_EQ(r.rc, 3) << r.out;
}

TEST(Batch, CleanExitIsZeroAndFaultIsTwo) {
  auto ok = write("ok.fr", "fn main() {\n  print(1);\n}\n");
  auto bad = write("bad.fr", "fn main() {\n  let p = nil;\n  print(*p);\n}\n");
  auto script = write("run.cmds", "run\n");
  EXPECT_EQ(run("debug " + ok + " --batch " + script).rc, 0);
  EXPECT_EQ(run("debug " + bad + " --batch " + script).rc, 2);
}

TEST(Usage, BadArgumentsExitOne) {
  EXPECT_EQ(run("").rc, 1);
  EXPECT_EQ(run("debug").rc, 1);
  EXPECT_EQ(run("debug /nonexistent/x.fr --batch /dev/null").rc, 1);
  auto broken = write("broken.fr", "fn main( {\n");
  EXPECT_EQ(run("debug " + broken + " --dump-bytecode").rc, 1);
}

TEST(DumpBytecode, LineFormat) {
  auto r = run("debug " + corpus("pbzip_order.fr") + " --dump-bytecode");
  ASSERT_EQ(r.rc, 0);
  std::regex row(R"(^\s*\d+\s+[A-Z_]+\b.*; pbzip_order\.fr:\d+$)");
  std::istringstream in(r.out);
  size_t rows = 0;
  for (std::string l; std::getline(in, l);) {
    if (l.empty()) continue;
    ++rows;
    EXPECT_TRUE(std::regex_match(l, row)) << l;
  }
  EXPECT_GT(rows, 20u);
  EXPECT_NE(r.out.find("SPAWN"), std::string::npos);
}

TEST(Bench, CorpusAllPass) {
  auto json = (scratch() / "bench.json").string();
  auto r = run("bench " + std::string(FRED_CORPUS_DIR) + " --json " + json);
  EXPECT_EQ(r.rc, 0) << r.out;
  size_t pass = 0;
  for (size_t at = r.out.find(" PASS "); at != std::string::npos; at = r.out.find(" PASS ", at + 1)) ++pass;
  EXPECT_EQ(pass, 3u) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(json));
}

TEST(Bench, EmptyCorpusIsNotAnError) {
  auto d = scratch() / "empty_corpus";
  fs::remove_all(d);
  fs::create_directories(d);
  auto r = run("bench " + d.string());
  EXPECT_EQ(r.rc, 0);
  EXPECT_NE(r.out.find("Bug"), std::string::npos);
}

TEST(Logdump, SessionDirLogIsReadable) {
  auto d = scratch() / "sess";
  fs::remove_all(d);
  auto script = write("sd.cmds", "run\n");
  run("debug " + corpus("pbzip_order.fr") + " --seed 7 --session-dir " + d.string() + " --batch " + script);
  ASSERT_TRUE(fs::exists(d / "events.log"));
  ASSERT_TRUE(fs::exists(d / "transcript.txt"));
  auto r = run("logdump " + (d / "events.log").string());
  EXPECT_EQ(r.rc, 0);
  EXPECT_FALSE(r.out.empty());
}
