#pragma once

// Bug-corpus metadata: a `.json` next to each `.fr` naming the seed, the
// commands that reach the failure, the watched expression and the known
// culprit statement.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fred/debugger/session.hpp"

namespace fred::corpus {

struct Culprit {
  uint16_t tid = 0;
  uint32_t stmt = 0;
  uint32_t line = 0;
  std::string function;
};

struct BugSpec {
  std::string name;
  std::string pattern;
  std::string program;  // absolute path
  uint64_t seed = 7;
  uint64_t auto_ckpt = 1000;
  std::vector<std::string> setup;
  uint32_t fault_line = 0;
  std::string watch;
  std::optional<Culprit> culprit;
  nlohmann::json raw;
};

inline BugSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::ProtocolError, path + ": not a JSON object");
  BugSpec b;
  b.raw = j;
  b.name = j.value("name", std::filesystem::path(path).stem().string());
  b.pattern = j.value("pattern", "");
  b.program = (std::filesystem::path(path).parent_path() / j.at("program").get<std::string>()).string();
  b.seed = j.value("seed", uint64_t{7});
  b.auto_ckpt = j.value("auto_ckpt", uint64_t{1000});
  b.setup = j.value("setup", std::vector<std::string>{});
  b.fault_line = j.value("fault_line", 0u);
  b.watch = j.value("watch", "");
  if (j.contains("culprit")) {
    const auto& c = j["culprit"];
    b.culprit = Culprit{c.at("tid").get<uint16_t>(), c.at("stmt").get<uint32_t>(), c.value("line", 0u),
                        c.value("function", "")};
  }
  return b;
}

// Specs in `dir` (not recursive), sorted by name.
inline std::vector<BugSpec> load_dir(const std::string& dir) {
  std::vector<BugSpec> out;
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::IoError, "not a directory: " + dir);
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(load_spec(e.path().string()));
  std::sort(out.begin(), out.end(), [](const BugSpec& a, const BugSpec& b) { return a.name < b.name; });
  return out;
}

inline std::unique_ptr<dbg::Session> open(const BugSpec& b, std::optional<uint64_t> auto_ckpt = std::nullopt) {
  dbg::SessionOptions o;
  o.seed = b.seed;
  o.auto_ckpt = auto_ckpt.value_or(b.auto_ckpt);
  return std::make_unique<dbg::Session>(dbg::Session::load_program(b.program), o);
}

// Opens the program and runs the setup commands; returns the transcript.
inline std::string run_setup(dbg::Session& s, const BugSpec& b) {
  std::string out;
  for (const auto& c : b.setup) out += "(fred) " + c + "\n" + s.execute(c) + "\n";
  return out;
}

inline std::optional<uint64_t> first_user_image(const dbg::Session& s) {
  for (const auto& i : s.store().images())
    if (i.kind == ckpt::ImageKind::User) return i.id;
  return std::nullopt;
}

// Single-threaded synthetic run of about `n` statements: a counting loop,
// watched with `i < k` so the flip lands at a chosen iteration.
inline std::string synthetic_source(uint64_t n) {
  return "fn main() {\n  let i = 0;\n  let n = " + std::to_string(n / 2) +
         ";\n  while (i < n) {\n    i = i + 1;\n  }\n  print(i);\n}\n";
}

}  // namespace fred::corpus
