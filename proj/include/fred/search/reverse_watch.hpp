#pragma once

// reverse-watch: find the statement, and the thread, that first turned a
// watched expression bad. Four narrowing stages:
//   A  bisect over checkpoint images
//   B  bisect over expanded steps between the two bracketing images
//   C  bisect over event-emitting ticks inside the last step (threaded only)
//   D  per-thread bisection with scheduler-locking, descending into calls
// Every probe works on a copy of the target; the session itself is moved
// only once, to the final position.

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fred/debugger/session.hpp"

namespace fred::search {

using dbg::Probe;
using dbg::Session;

struct SearchOptions {
  dbg::Polarity polarity = dbg::Polarity::Observed;
  bool strict_eval = false;
  uint64_t stability_window = 256;  // ticks the endgame backs up per retry
  int stability_retries = 4;
  uint64_t step_budget = 10000;
  std::function<void(const nlohmann::json&)> progress;
};

struct SearchStats {
  uint64_t n_steps = 0;  // expanded steps in the recorded history
  uint64_t n_ticks = 0;
  uint64_t evals_a = 0, evals_b = 0, evals_c = 0, evals_d = 0;
  uint64_t validation_evals = 0;
  uint64_t snapshots = 0;
  uint64_t restarts = 0;  // image restores
  uint64_t retries = 0;
  uint64_t max_step_executions = 0;
  std::map<uint64_t, uint64_t> step_execution_histogram;  // executions -> steps
  double ms_a = 0, ms_b = 0, ms_c = 0, ms_d = 0, ms_total = 0;
  std::vector<uint16_t> skipped_threads;
  uint64_t images_considered = 0;

  uint64_t evaluations() const { return evals_a + evals_b + evals_c + evals_d; }

  nlohmann::json to_json() const {
    nlohmann::json hist = nlohmann::json::object();
    for (auto [k, v] : step_execution_histogram) hist[std::to_string(k)] = v;
    return {{"n_steps", n_steps},
            {"n_ticks", n_ticks},
            {"evaluations", evaluations()},
            {"evals", {{"A", evals_a}, {"B", evals_b}, {"C", evals_c}, {"D", evals_d}}},
            {"validation_evals", validation_evals},
            {"snapshots", snapshots},
            {"restarts", restarts},
            {"retries", retries},
            {"images_considered", images_considered},
            {"max_step_executions", max_step_executions},
            {"step_executions", hist},
            {"ms", {{"A", ms_a}, {"B", ms_b}, {"C", ms_c}, {"D", ms_d}, {"total", ms_total}}},
            {"skipped_threads", skipped_threads}};
  }
};

struct TransitionReport {
  uint16_t tid = 0;
  vm::SourceLoc loc;
  std::string function;
  std::string source;
  ckpt::TimePosition before;
  uint64_t tick = 0;  // tick of the session position (just before the culprit)
  std::string expr;
  std::string before_value, after_value;
  SearchStats stats;

  std::string text() const {
    std::string s = "[fred] `" + expr + "` changed: " + before_value + " -> " + after_value + "\n";
    s += "[fred] culprit: thread " + std::to_string(tid) + ", " + function + " () at " + loc.str() + "\n";
    s += std::to_string(loc.line) + "\t" + source + "\n";
    s += "[fred] stopped before it at " + before.str() + "; " + std::to_string(stats.evaluations()) +
         " evaluations (A " + std::to_string(stats.evals_a) + ", B " + std::to_string(stats.evals_b) + ", C " +
         std::to_string(stats.evals_c) + ", D " + std::to_string(stats.evals_d) + ")";
    return s;
  }

  nlohmann::json to_json() const {
    return {{"tid", tid},
            {"file", loc.file},
            {"line", loc.line},
            {"stmt", loc.stmt},
            {"function", function},
            {"source", source},
            {"position", before.str()},
            {"tick", tick},
            {"expr", expr},
            {"before", before_value},
            {"after", after_value},
            {"stats", stats.to_json()}};
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;
inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

class Search {
 public:
  Search(Session& s, std::string expr, SearchOptions o)
      : s_(s), opts_(std::move(o)), w_(dbg::WatchExpr::parse(expr)) {}

  TransitionReport run() {
    auto t_start = Clock::now();
    st_.n_steps = s_.marks().size() - 1;
    st_.n_ticks = s_.tick();
    if (!s_.running() && s_.tick() == 0) throw Error(ErrorCode::NotRunning, "The program is not being run.");
    init_polarity();

    auto [a_tick, a_mark, hi_mark] = stage_a();
    auto [ta, tb] = stage_b(a_mark, hi_mark);
    uint64_t t_lo = ta, t_hi = tb;
    auto t0 = Clock::now();
    Probe at_tb = state_at_tick(tb);
    if (at_tb.vm.threads.size() > 1) std::tie(t_lo, t_hi) = stage_c(ta, tb);
    st_.ms_c = ms_since(t0);
    (void)a_tick;

    t0 = Clock::now();
    std::optional<Culprit> found;
    bool unstable = false;
    uint64_t lo = t_lo;
    for (int attempt = 0; attempt <= opts_.stability_retries; ++attempt) {
      found = stage_d(lo, t_hi);
      if (found && validate(*found)) break;
      unstable |= found.has_value();
      found.reset();
      ++st_.retries;
      if (lo == 0) break;
      uint64_t back = opts_.stability_window << attempt;
      uint64_t next = lo > back ? lo - back : 0;
      // The wider window must still start good.
      while (next > 0 && free_verdict(next, st_.evals_d) != dbg::Verdict::Good) next = next > back ? next - back : 0;
      lo = next;
    }
    st_.ms_d = ms_since(t0);
    if (!found && unstable)
      throw Error(ErrorCode::StabilityViolation, "Step D: the transition of `" + w_.text + "` did not reproduce under scheduler-locking");
    if (!found) throw Error(ErrorCode::NoCulpritFound, "Step D: no thread flips `" + w_.text + "` in the final window");
    s_.position_at(found->base_tick, found->tid, found->locked_ticks);

    st_.restarts += s_.restarts() - restarts0_;
    st_.ms_total = ms_since(t_start);
    TransitionReport r;
    r.tid = found->tid;
    r.loc = s_.program().loc_of_stmt(found->stmt);
    r.function = found->function;
    r.source = s_.program().source_line(r.loc.line);
    r.before = s_.position();
    r.tick = s_.tick();
    r.expr = w_.text;
    r.before_value = found->before;
    r.after_value = found->after;
    r.stats = st_;
    return r;
  }

 private:
  struct Culprit {
    uint16_t tid = 0;
    uint32_t stmt = 0;
    std::string function;
    uint64_t base_tick = 0;      // free-timeline position
    uint64_t locked_ticks = 0;   // then this many ticks of `tid` alone
    std::string before, after;
  };

  // ---- verdicts -------------------------------------------------------

  void init_polarity() {
    dbg::EvalResult now = dbg::evaluate(s_.vm(), *w_.ast, 0);
    if (opts_.polarity == dbg::Polarity::TrueIsGood) {
      bad_truth_ = false;
      bad_is_error_ = false;
      if (now.ok() && now.truthy())
        throw Error(ErrorCode::PreconditionNotBad, "`" + w_.text + "` is not bad at the current position");
      return;
    }
    bad_is_error_ = !now.ok();
    bad_truth_ = now.truthy();
  }

  dbg::Verdict verdict(const vm::VmState& vm, uint64_t& counter) {
    ++counter;
    dbg::EvalResult r = dbg::evaluate(vm, *w_.ast, 0);
    if (!r.ok()) {
      if (opts_.strict_eval && !bad_is_error_) throw Error(ErrorCode::EvalError, w_.text + ": " + r.error);
      return dbg::Verdict::Bad;
    }
    if (bad_is_error_) return dbg::Verdict::Good;
    return r.truthy() == bad_truth_ ? dbg::Verdict::Bad : dbg::Verdict::Good;
  }

  std::string value_text(const vm::VmState& vm) const { return dbg::evaluate(vm, *w_.ast, 0).text; }

  void progress(const char* stage, uint64_t lo, uint64_t hi, uint64_t probes) {
    nlohmann::json j{{"stage", stage}, {"window", {lo, hi}}, {"probes", probes}};
    if (opts_.progress) opts_.progress(j);
    s_.emit("search-progress", j);
  }

  // ---- stage A: images ------------------------------------------------

  std::tuple<uint64_t, size_t, size_t> stage_a() {
    auto t0 = Clock::now();
    const auto& imgs = s_.store().images();
    uint64_t first_user = 0;
    for (const auto& i : imgs)
      if (i.kind == ckpt::ImageKind::User) {
        first_user = i.tick();
        break;
      }
    std::vector<uint64_t> cand;
    for (const auto& i : imgs)
      if (i.tick() < s_.tick() && i.tick() >= first_user) cand.push_back(i.id);
    if (cand.empty()) throw Error(ErrorCode::NoGoodAnchor, "Step A: no checkpoint before the current position");
    st_.images_considered = cand.size();

    std::map<size_t, Probe> restored;
    auto eval_image = [&](size_t k) {
      auto r = s_.store().restore(cand[k], s_.program_ptr());
      ++st_.restarts;
      Probe p{std::move(r.vm), s_.log_ptr(), r.blob.log_cursor, false};
      auto v = verdict(p.vm, st_.evals_a);
      s_.store().set_value(cand[k], v == dbg::Verdict::Good ? ckpt::Tri::Good : ckpt::Tri::Bad);
      restored.emplace(k, std::move(p));
      return v;
    };
    if (eval_image(0) != dbg::Verdict::Good)
      throw Error(ErrorCode::NoGoodAnchor, "Step A: `" + w_.text + "` is already bad at the earliest usable checkpoint");
    size_t lo = 0, hi = cand.size();  // hi == size: the current position, bad
    while (hi - lo > 1) {
      size_t mid = lo + (hi - lo) / 2;
      progress("A", s_.store().get(cand[lo]).tick(), hi == cand.size() ? s_.tick() : s_.store().get(cand[hi]).tick(),
               st_.evals_a);
      if (eval_image(mid) == dbg::Verdict::Good) lo = mid;
      else hi = mid;
    }
    size_t a_mark = s_.image_mark(cand[lo]);
    size_t hi_mark = hi == cand.size() ? s_.mark_index() : s_.image_mark(cand[hi]);
    cache_.emplace(a_mark, std::move(restored.at(lo)));
    ++st_.snapshots;
    st_.ms_a = ms_since(t0);
    return {s_.store().get(cand[lo]).tick(), a_mark, hi_mark};
  }

  // ---- stage B: expanded steps ----------------------------------------

  Probe state_at_mark(size_t m, size_t stride) {
    auto it = cache_.upper_bound(m);
    --it;
    size_t cur = it->first;
    Probe p = it->second;
    const auto& marks = s_.marks();
    for (size_t k = cur + 1; k <= m; ++k) {
      s_.probe_advance(p, marks[k].tick);
      uint64_t n = ++exec_[k];
      if (k < m && (n > 1 || (k - cur) % stride == 0)) {
        cache_.emplace(k, p);
        ++st_.snapshots;
      }
    }
    return p;
  }

  std::pair<uint64_t, uint64_t> stage_b(size_t lo, size_t hi) {
    auto t0 = Clock::now();
    const auto& marks = s_.marks();
    size_t width = hi - lo;
    uint64_t k = s_.options().auto_ckpt ? s_.options().auto_ckpt : UINT64_MAX;
    size_t stride = static_cast<size_t>(std::max<uint64_t>(
        1, std::min<uint64_t>(k, static_cast<uint64_t>(std::ceil(std::sqrt(double(std::max<size_t>(width, 1))))))));
    while (hi - lo > 1) {
      size_t mid = lo + (hi - lo) / 2;
      progress("B", marks[lo].tick, marks[hi].tick, st_.evals_b);
      Probe p = state_at_mark(mid, stride);
      if (verdict(p.vm, st_.evals_b) == dbg::Verdict::Good) {
        lo = mid;
        if (!cache_.count(mid)) {
          cache_.emplace(mid, std::move(p));
          ++st_.snapshots;
        }
      } else {
        hi = mid;
      }
    }
    for (auto [m, n] : exec_) {
      ++st_.step_execution_histogram[n];
      st_.max_step_executions = std::max(st_.max_step_executions, n);
    }
    lo_probe_ = state_at_mark(lo, stride);
    st_.ms_b = ms_since(t0);
    return {marks[lo].tick, marks[hi].tick};
  }

  Probe state_at_tick(uint64_t t) {
    if (lo_probe_ && lo_probe_->tick() <= t) {
      Probe p = *lo_probe_;
      s_.probe_advance(p, t);
      return p;
    }
    return s_.probe_at(t);
  }

  // ---- stage C: event boundaries --------------------------------------

  std::pair<uint64_t, uint64_t> stage_c(uint64_t ta, uint64_t tb) {
    Probe p = state_at_tick(ta);
    std::vector<uint64_t> pts{ta};
    std::vector<Probe> states{p};
    while (p.tick() < tb) {
      s_.probe_advance(p, p.tick() + 1, [&](const vm::StepOutcome& o) {
        if (o.has_events()) {
          if (pts.back() != p.vm.ticks) {
            pts.push_back(p.vm.ticks);
            states.push_back(p);
            ++st_.snapshots;
          }
        }
      });
    }
    if (pts.back() != tb) {
      pts.push_back(tb);
      states.push_back(p);
    }
    size_t lo = 0, hi = pts.size() - 1;
    while (hi - lo > 1) {
      size_t mid = lo + (hi - lo) / 2;
      progress("C", pts[lo], pts[hi], st_.evals_c);
      if (verdict(states[mid].vm, st_.evals_c) == dbg::Verdict::Good) lo = mid;
      else hi = mid;
    }
    free_memo_[pts[lo]] = dbg::Verdict::Good;
    free_memo_[pts[hi]] = dbg::Verdict::Bad;
    return {pts[lo], pts[hi]};
  }

  // ---- stage D: per-thread endgame ------------------------------------

  dbg::Verdict free_verdict(uint64_t t, uint64_t& counter) {
    if (auto it = free_memo_.find(t); it != free_memo_.end()) return it->second;
    Probe p = state_at_tick(t);
    auto v = verdict(p.vm, counter);
    free_memo_[t] = v;
    return v;
  }

  dbg::Verdict probe_verdict(const Probe& p, uint64_t& counter) {
    if (!p.forked) {
      if (auto it = free_memo_.find(p.tick()); it != free_memo_.end()) return it->second;
      auto v = verdict(p.vm, counter);
      free_memo_[p.tick()] = v;
      return v;
    }
    return verdict(p.vm, counter);
  }

  // One free tick along the recorded timeline, or past its end.
  vm::StepOutcome free_tick(Probe& p) {
    if (p.forked || p.tick() >= s_.tick()) return s_.probe_tick(p, std::nullopt);
    vm::StepOutcome out;
    s_.probe_advance(p, p.tick() + 1, [&](const vm::StepOutcome& o) { out = o; });
    return out;
  }

  static bool alive(const vm::VmState& vm, uint16_t tid) {
    const vm::Thread* t = vm.thread(tid);
    return t && t->status != vm::ThreadStatus::Exited && !t->frames.empty();
  }

  std::string function_of(const vm::VmState& vm, uint16_t tid) const {
    const auto& t = vm.threads.at(tid);
    return s_.program().functions[t.frames.back().func].name;
  }

  std::optional<Culprit> direct(uint64_t t_lo) {
    Probe p = state_at_tick(t_lo);
    Probe q = p;
    auto o = free_tick(q);
    if (o.reason == vm::StopReason::Blocked || !alive(p.vm, o.tid)) return std::nullopt;
    Culprit c;
    c.tid = o.tid;
    c.stmt = p.vm.current_stmt(o.tid);
    c.function = function_of(p.vm, o.tid);
    c.base_tick = t_lo;
    c.locked_ticks = 0;
    c.before = value_text(p.vm);
    c.after = value_text(q.vm);
    return c;
  }

  std::optional<Culprit> stage_d(uint64_t t_lo, uint64_t t_hi) {
    Probe base = state_at_tick(t_lo);
    if (t_hi - t_lo == 1) return direct(t_lo);
    std::vector<uint16_t> order;
    for (const auto& t : base.vm.threads)
      if (alive(base.vm, t.tid)) order.push_back(t.tid);
    for (uint16_t c : order) {
      if (auto r = try_thread(base, c, t_hi)) return r;
      if (std::find(st_.skipped_threads.begin(), st_.skipped_threads.end(), c) == st_.skipped_threads.end())
        st_.skipped_threads.push_back(c);
    }
    return std::nullopt;
  }

  std::optional<Culprit> try_thread(const Probe& base, uint16_t c, uint64_t t_hi) {
    // Free `next` boundaries of thread c, far enough to pass t_hi.
    const size_t dc = base.vm.depth(c);
    std::vector<Probe> bounds{base};
    Probe p = base;
    uint64_t budget = opts_.step_budget;
    while (budget-- > 0 && !p.vm.stopped()) {
      auto o = free_tick(p);
      if (o.reason == vm::StopReason::Blocked) break;
      if (o.tid != c) continue;
      if (!alive(p.vm, c) || p.vm.depth(c) <= dc) {
        bounds.push_back(p);
        if (p.tick() >= t_hi || !alive(p.vm, c)) break;
      }
    }
    if (bounds.size() < 2 || bounds.back().tick() < t_hi) return std::nullopt;
    progress("D", base.tick(), t_hi, st_.evals_d);
    if (probe_verdict(bounds.back(), st_.evals_d) != dbg::Verdict::Bad) return std::nullopt;
    size_t lo = 0, hi = bounds.size() - 1;
    while (hi - lo > 1) {
      size_t mid = lo + (hi - lo) / 2;
      if (probe_verdict(bounds[mid], st_.evals_d) == dbg::Verdict::Good) lo = mid;
      else hi = mid;
    }
    const Probe& s0 = bounds[lo];
    if (!alive(s0.vm, c)) return std::nullopt;

    // Locked timeline from s0: L[k] is s0 after k ticks of c alone.
    locked_.clear();
    locked_memo_.clear();
    locked_.push_back(s0);
    const size_t d0 = s0.vm.depth(c);
    size_t end = 0;
    for (uint64_t n = 0;; ++n) {
      if (n >= opts_.step_budget) return std::nullopt;
      auto r = locked_step(c);
      if (!r) return std::nullopt;  // blocked: c cannot make progress alone
      end = locked_.size() - 1;
      const auto& vm = locked_.back().vm;
      if (vm.stopped() || !alive(vm, c) || vm.depth(c) <= d0) break;
    }
    if (locked_verdict(end) != dbg::Verdict::Bad) return std::nullopt;
    return descend(c, 0, end, s0.tick());
  }

  std::optional<vm::StepOutcome> locked_step(uint16_t c) {
    Probe q = locked_.back();
    if (q.vm.stopped() || !alive(q.vm, c)) return std::nullopt;
    auto o = s_.probe_tick(q, c);
    if (o.reason == vm::StopReason::Blocked) return std::nullopt;
    locked_.push_back(std::move(q));
    return o;
  }

  dbg::Verdict locked_verdict(size_t k) {
    if (auto it = locked_memo_.find(k); it != locked_memo_.end()) return it->second;
    auto v = verdict(locked_[k].vm, st_.evals_d);
    locked_memo_[k] = v;
    return v;
  }

  // L[lo] good, L[hi] bad, hi the end of c's `next` from lo.
  std::optional<Culprit> descend(uint16_t c, size_t lo, size_t hi, uint64_t base_tick) {
    while (true) {
      const auto& pre = locked_[lo].vm;
      bool nosym_call = false;
      if (hi > lo + 1) {
        const auto& in = locked_[lo + 1].vm;
        nosym_call = alive(in, c) && s_.program().functions[in.threads[c].frames.back().func].nosym;
      }
      if (hi == lo + 1 || nosym_call || locked_verdict(lo + 1) == dbg::Verdict::Bad) {
        Culprit r;
        r.tid = c;
        r.stmt = pre.current_stmt(c);
        r.function = function_of(pre, c);
        r.base_tick = base_tick;
        r.locked_ticks = lo;
        r.before = value_text(pre);
        r.after = value_text(locked_[lo + 1].vm);
        return r;
      }
      // Statement boundaries inside the callee.
      const size_t d1 = locked_[lo + 1].vm.depth(c);
      std::vector<size_t> q{lo + 1};
      for (size_t k = lo + 2; k < hi; ++k)
        if (alive(locked_[k].vm, c) && locked_[k].vm.depth(c) == d1) q.push_back(k);
      q.push_back(hi);
      size_t a = 0, b = q.size() - 1;
      while (b - a > 1) {
        size_t mid = a + (b - a) / 2;
        if (locked_verdict(q[mid]) == dbg::Verdict::Good) a = mid;
        else b = mid;
      }
      lo = q[a];
      hi = q[b];
    }
  }

  // Re-derives the culprit's neighbourhood from a fresh restore and checks
  // the transition reproduces there.
  bool validate(const Culprit& c) {
    Probe p = s_.probe_at(c.base_tick);
    for (uint64_t k = 0; k < c.locked_ticks; ++k)
      if (s_.probe_tick(p, c.tid).reason == vm::StopReason::Blocked) return false;
    if (verdict(p.vm, st_.validation_evals) != dbg::Verdict::Good) return false;
    auto o = s_.probe_tick(p, c.tid);
    if (o.reason == vm::StopReason::Blocked) return false;
    return verdict(p.vm, st_.validation_evals) == dbg::Verdict::Bad;
  }

  Session& s_;
  SearchOptions opts_;
  dbg::WatchExpr w_;
  SearchStats st_;
  bool bad_truth_ = false;
  bool bad_is_error_ = false;
  uint64_t restarts0_ = s_.restarts();
  std::map<size_t, Probe> cache_;     // mark index -> state
  std::map<size_t, uint64_t> exec_;   // mark index -> executions of the step ending there
  std::optional<Probe> lo_probe_;
  std::map<uint64_t, dbg::Verdict> free_memo_;
  std::vector<Probe> locked_;
  std::map<size_t, dbg::Verdict> locked_memo_;
};

}  // namespace detail

inline TransitionReport reverse_watch(Session& s, const std::string& expr, SearchOptions opts = {}) {
  if (!opts.strict_eval) opts.strict_eval = s.options().strict_eval;
  opts.step_budget = s.options().step_budget;
  detail::Search search(s, expr, std::move(opts));
  return search.run();
}

}  // namespace fred::search

namespace fred::dbg {

inline std::string Session::reverse_watch_command(Session& s, const std::string& expr) {
  auto r = search::reverse_watch(s, expr);
  s.last_search_ = r.to_json();
  s.emit("search-done", r.to_json());
  return r.text();
}

}  // namespace fred::dbg
