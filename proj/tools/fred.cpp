// fred: reversible debugger front end.
//
//   fred debug prog.fr [--seed N] [--auto-ckpt K] [--strict-eval] [--batch file]
//                      [--serve addr [--serve-only]] [--stats json|FILE]
//                      [--dump-bytecode] [--session-dir DIR] [--input FILE]
//   fred bench corpus/ [--json FILE] [--synthetic LOG2N]...
//   fred logdump events.log
//
// Exit codes: 0 ok, 1 usage error, 2 target fault left unhandled, 3 search failure.

#include <unistd.h>

#include <csignal>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fred/corpus.hpp"
#include "fred/debugger/session.hpp"
#include "fred/log/event_log.hpp"
#include "fred/server/server.hpp"

namespace {

using namespace fred;
using nlohmann::json;

constexpr int kOk = 0, kUsage = 1, kFault = 2, kSearchFailed = 3;

struct DebugFlags {
  std::string program;
  uint64_t seed = 1;
  uint64_t auto_ckpt = 1000;
  bool strict_eval = false;
  std::string batch;
  std::string serve;
  bool serve_only = false;
  std::string stats;
  bool dump_bytecode = false;
  std::string session_dir;
  std::string input;
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

volatile std::sig_atomic_t g_stop = 0;

class Repl {
 public:
  Repl(dbg::Session& s, const DebugFlags& f, std::mutex& driver) : s_(s), f_(f), driver_(driver) {
    if (!f.session_dir.empty()) transcript_.open(f.session_dir + "/transcript.txt", std::ios::trunc);
  }

  // Returns false on quit.
  bool run_line(const std::string& raw, bool echo) {
    std::string line = dbg::DebugCommand::trim(raw);
    if (line.empty() || line[0] == '#') return true;
    if (echo) emit("(fred) " + line + "\n");
    else log("(fred) " + line + "\n");
    if (line == "quit" || line == "q" || line == "exit") return false;
    std::string out;
    bool is_search = false;
    try {
      auto cmd = dbg::DebugCommand::parse(line);
      is_search = cmd.verb == dbg::Verb::ReverseWatch;
      std::lock_guard<std::mutex> g(driver_);
      out = s_.execute(cmd);
      if (is_search && !f_.stats.empty()) {
        const auto& rep = s_.last_search();
        if (f_.stats == "json") out += "\n" + rep["stats"].dump();
        else std::ofstream(f_.stats, std::ios::trunc) << rep.dump(2) << "\n";
      }
    } catch (const Error& e) {
      out = e.message();
      if (is_search) search_failed_ = true;
    }
    if (!out.empty()) emit(out + (out.back() == '\n' ? "" : "\n"));
    return true;
  }

  int exit_code() const {
    if (search_failed_) return kSearchFailed;
    if (s_.vm().fault) return kFault;
    return kOk;
  }

 private:
  void emit(const std::string& text) {
    std::cout << text << std::flush;
    log(text);
  }
  void log(const std::string& text) {
    if (transcript_) transcript_ << text << std::flush;
  }

  dbg::Session& s_;
  const DebugFlags& f_;
  std::mutex& driver_;
  std::ofstream transcript_;
  bool search_failed_ = false;
};

int cmd_debug(const DebugFlags& f) {
  std::shared_ptr<const vm::Program> prog;
  try {
    prog = dbg::Session::load_program(f.program);
  } catch (const lang::SyntaxError& e) {
    std::cerr << f.program << ":" << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << e.message() << "\n";
    return kUsage;
  }
  if (f.dump_bytecode) {
    std::cout << vm::disassemble(*prog);
    return kOk;
  }
  dbg::SessionOptions o;
  o.seed = f.seed;
  o.auto_ckpt = f.auto_ckpt;
  o.strict_eval = f.strict_eval;
  o.session_dir = f.session_dir;
  if (!f.input.empty()) o.input = read_lines(f.input);
  if (!f.session_dir.empty()) std::filesystem::create_directories(f.session_dir);
  dbg::Session s(prog, o);
  std::mutex driver;

  std::unique_ptr<server::SessionServer> srv;
  if (!f.serve.empty()) {
    srv = std::make_unique<server::SessionServer>(s, driver, !f.serve_only);
    srv->listen(f.serve);
    std::cerr << "[fred] serving on 127.0.0.1:" << srv->port() << "\n";
  }
  if (f.serve_only) {
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    while (!g_stop) ::usleep(100 * 1000);
    srv->stop();
    return kOk;
  }

  Repl repl(s, f, driver);
  if (!f.batch.empty()) {
    for (const auto& l : read_lines(f.batch))
      if (!repl.run_line(l, true)) break;
  } else {
    bool tty = ::isatty(0);
    std::string line;
    while (true) {
      if (tty) std::cout << "(fred) " << std::flush;
      if (!std::getline(std::cin, line)) break;
      if (!repl.run_line(line, !tty)) break;
    }
  }
  if (!f.session_dir.empty()) log::save(s.log(), f.session_dir + "/events.log");
  if (srv) srv->stop();
  return repl.exit_code();
}

struct BenchRow {
  std::string bug;
  uint64_t ckpts = 0, restarts = 0, evals = 0, validation = 0, snapshots = 0, steps = 0;
  double avg_ckpt_ms = 0, avg_rstr_ms = 0, seconds = 0;
  bool pass = false;
  std::string culprit;
  std::string note;

  json to_json() const {
    return {{"Bug", bug},
            {"Num Ckpts", ckpts},
            {"Num Rstr", restarts},
            {"Num Expr Eval", evals},
            {"Avg Ckpt", avg_ckpt_ms},
            {"Avg Rstr", avg_rstr_ms},
            {"Validation Evals", validation},
            {"Snapshots", snapshots},
            {"Steps", steps},
            {"Reverse Watch Time", seconds},
            {"Culprit", culprit},
            {"Result", pass ? "PASS" : "FAIL"},
            {"Note", note}};
  }
};

void fill_row(BenchRow& r, const dbg::Session& s, const search::TransitionReport& rep, double secs) {
  const auto& t = s.store().timing();
  r.ckpts = s.store().size();
  r.restarts = rep.stats.restarts;
  r.evals = rep.stats.evaluations();
  r.validation = rep.stats.validation_evals;
  r.snapshots = rep.stats.snapshots;
  r.steps = rep.stats.n_steps;
  r.avg_ckpt_ms = t.takes ? double(t.take_us) / t.takes / 1000.0 : 0;
  r.avg_rstr_ms = t.restores ? double(t.restore_us) / t.restores / 1000.0 : 0;
  r.seconds = secs;
  r.culprit = "thread " + std::to_string(rep.tid) + " " + rep.loc.str();
}

BenchRow bench_bug(const corpus::BugSpec& b) {
  BenchRow r;
  r.bug = b.name;
  try {
    auto s = corpus::open(b);
    corpus::run_setup(*s, b);
    auto t0 = std::chrono::steady_clock::now();
    auto rep = search::reverse_watch(*s, b.watch);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fill_row(r, *s, rep, secs);
    r.pass = b.culprit && b.culprit->tid == rep.tid && b.culprit->stmt == rep.loc.stmt;
  } catch (const std::exception& e) {
    r.note = e.what();
  }
  return r;
}

BenchRow bench_synthetic(unsigned log2n, uint64_t seed) {
  BenchRow r;
  uint64_t n = uint64_t{1} << log2n;
  std::mt19937_64 rng(seed);
  uint64_t k = 1 + rng() % (n / 2 - 1);
  r.bug = "synthetic_2^" + std::to_string(log2n);
  auto prog = std::make_shared<const vm::Program>(vm::compile(corpus::synthetic_source(n), "synthetic.fr"));
  dbg::SessionOptions o;
  dbg::Session s(prog, o);
  s.execute("break 7");
  s.execute("run");
  auto t0 = std::chrono::steady_clock::now();
  auto rep = search::reverse_watch(s, "i < " + std::to_string(k));
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fill_row(r, s, rep, secs);
  unsigned limit = log2n + 8;
  r.pass = rep.tid == 0 && rep.loc.line == 5 && r.evals <= limit;
  r.note = "flip at i=" + std::to_string(k) + ", eval limit " + std::to_string(limit);
  return r;
}

int cmd_bench(const std::string& dir, const std::string& json_out, const std::vector<unsigned>& synth) {
  std::vector<BenchRow> rows;
  try {
    for (const auto& b : corpus::load_dir(dir))
      if (b.culprit && !b.watch.empty()) rows.push_back(bench_bug(b));
  } catch (const Error& e) {
    std::cerr << e.message() << "\n";
    return kUsage;
  }
  for (unsigned l : synth) rows.push_back(bench_synthetic(l, 0xF00D + l));

  std::printf("%-22s %9s %9s %13s %12s %12s %9s %9s  %s\n", "Bug", "Num Ckpts", "Num Rstr", "Num Expr Eval",
              "Avg Ckpt ms", "Avg Rstr ms", "Time s", "Result", "Culprit");
  bool ok = true;
  for (const auto& r : rows) {
    ok &= r.pass;
    std::printf("%-22s %9llu %9llu %13llu %12.3f %12.3f %9.3f %9s  %s\n", r.bug.c_str(),
                (unsigned long long)r.ckpts, (unsigned long long)r.restarts, (unsigned long long)r.evals,
                r.avg_ckpt_ms, r.avg_rstr_ms, r.seconds, r.pass ? "PASS" : "FAIL",
                r.culprit.empty() ? r.note.c_str() : r.culprit.c_str());
  }
  if (!json_out.empty()) {
    json arr = json::array();
    for (const auto& r : rows) arr.push_back(r.to_json());
    std::ofstream(json_out, std::ios::trunc) << arr.dump(2) << "\n";
  }
  return ok ? kOk : kSearchFailed;
}

int cmd_logdump(const std::string& path) {
  try {
    auto l = log::load(path);
    std::cout << log::dump(l);
  } catch (const Error& e) {
    std::cerr << e.message() << "\n";
    return kUsage;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fred: reversible debugger for .fr programs"};
  app.require_subcommand(1);

  DebugFlags df;
  auto* debug = app.add_subcommand("debug", "Debug a program interactively or from a script");
  debug->add_option("program", df.program, "Program (.fr)")->required();
  debug->add_option("--seed", df.seed, "Scheduler seed");
  debug->add_option("--auto-ckpt", df.auto_ckpt, "Expanded steps between intermediate checkpoints (0 = off)");
  debug->add_flag("--strict-eval", df.strict_eval, "Abort searches on expression evaluation errors");
  debug->add_option("--batch", df.batch, "Run commands from a file");
  debug->add_option("--serve", df.serve, "Serve the session on host:port");
  debug->add_flag("--serve-only", df.serve_only, "With --serve: no REPL; a remote client controls the session");
  debug->add_option("--stats", df.stats, "After each reverse-watch: 'json' prints stats, otherwise a file for the report");
  debug->add_flag("--dump-bytecode", df.dump_bytecode, "Print the disassembly and exit");
  debug->add_option("--session-dir", df.session_dir, "Directory for checkpoints, transcript and event log");
  debug->add_option("--input", df.input, "Lines returned by input()");

  std::string bench_dir, bench_json;
  std::vector<unsigned> synth;
  auto* bench = app.add_subcommand("bench", "Run reverse-watch on every corpus bug and report");
  bench->add_option("corpus", bench_dir, "Corpus directory")->required();
  bench->add_option("--json", bench_json, "Write the report as JSON");
  bench->add_option("--synthetic", synth, "Add a synthetic single-threaded run of 2^N statements");

  std::string log_path;
  auto* logdump = app.add_subcommand("logdump", "Print an event log");
  logdump->add_option("log", log_path, "Event log file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    if (*debug) {
      if (df.serve_only && df.serve.empty()) {
        std::cerr << "--serve-only needs --serve\n";
        return kUsage;
      }
      return cmd_debug(df);
    }
    if (*bench) return cmd_bench(bench_dir, bench_json, synth);
    if (*logdump) return cmd_logdump(log_path);
  } catch (const Error& e) {
    std::cerr << e.message() << "\n";
    return kUsage;
  }
  return kUsage;
}
