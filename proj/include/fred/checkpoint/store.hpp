#pragma once

// Whole-session snapshots. An image holds the serialized VM, the log
// replay cursor, and the command history from session start up to the
// image, so a process that only has the image directory can still tell
// how the position was reached.

#include <chrono>
#include <compare>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fred/support.hpp"
#include "fred/vm/machine.hpp"

namespace fred::ckpt {

inline constexpr char kImageMagic[8] = {'F', 'R', 'E', 'D', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kImageVersion = 1;
inline constexpr size_t kImageHeaderSize = 8 + 4 + 8 + 8;

// Lexicographic order; `statement` (the tick count) breaks ties and is the
// key every other layer actually uses.
struct TimePosition {
  uint64_t checkpoint = 0;
  uint64_t command = 0;
  uint64_t substep = 0;
  uint64_t event = 0;
  uint64_t statement = 0;

  auto operator<=>(const TimePosition&) const = default;
  std::string str() const {
    return "(" + std::to_string(checkpoint) + "," + std::to_string(command) + "," + std::to_string(substep) +
           "," + std::to_string(event) + ")";
  }
};

enum class Tri : uint8_t { Unknown, Good, Bad };

inline const char* to_string(Tri t) {
  switch (t) {
    case Tri::Good: return "good";
    case Tri::Bad: return "bad";
    default: return "unknown";
  }
}

enum class ImageKind : uint8_t { Initial, User, Intermediate };

inline const char* to_string(ImageKind k) {
  switch (k) {
    case ImageKind::Initial: return "initial";
    case ImageKind::User: return "user";
    default: return "intermediate";
  }
}

// One replayable history line as stored inside an image.
struct HistoryLine {
  std::string command;
  int32_t locked_tid = -1;  // -1: free scheduling
  uint64_t ticks = 0;

  friend bool operator==(const HistoryLine&, const HistoryLine&) = default;
};

struct SessionBlob {
  std::vector<uint8_t> vm;
  uint64_t log_cursor = 0;
  uint64_t tick = 0;
  uint64_t mark = 0;           // expanded-step index
  uint64_t history_index = 0;  // entries completed
  uint64_t substep = 0;        // expanded steps into the running entry
  std::vector<HistoryLine> history;

  friend bool operator==(const SessionBlob&, const SessionBlob&) = default;
};

inline std::vector<uint8_t> encode_blob(const SessionBlob& b) {
  ByteWriter w;
  w.u64(b.log_cursor);
  w.u64(b.tick);
  w.u64(b.mark);
  w.u64(b.history_index);
  w.u64(b.substep);
  w.u32(static_cast<uint32_t>(b.history.size()));
  for (const auto& h : b.history) {
    w.str(h.command);
    w.u32(static_cast<uint32_t>(h.locked_tid));
    w.u64(h.ticks);
  }
  w.u64(b.vm.size());
  w.raw(b.vm);
  return std::move(w).take();
}

inline SessionBlob decode_blob(std::span<const uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::CorruptImage);
  SessionBlob b;
  b.log_cursor = r.u64();
  b.tick = r.u64();
  b.mark = r.u64();
  b.history_index = r.u64();
  b.substep = r.u64();
  b.history.resize(r.u32());
  for (auto& h : b.history) {
    h.command = r.str();
    h.locked_tid = static_cast<int32_t>(r.u32());
    h.ticks = r.u64();
  }
  uint64_t n = r.u64();
  auto raw = r.raw(n);
  b.vm.assign(raw.begin(), raw.end());
  if (!r.done()) throw Error(ErrorCode::CorruptImage, "trailing bytes in session blob");
  return b;
}

struct CheckpointImage {
  uint64_t id = 0;
  ImageKind kind = ImageKind::User;
  TimePosition position;
  std::vector<uint8_t> blob;  // encode_blob output
  uint64_t hash = 0;          // fnv1a of blob
  Tri value = Tri::Unknown;
  int64_t created_us = 0;     // wall time

  uint64_t tick() const { return position.statement; }
};

// File: magic, u32 version, u64 payload length, u64 fnv1a, payload.
inline std::vector<uint8_t> encode_image_file(const CheckpointImage& img) {
  ByteWriter w;
  w.raw(std::span(reinterpret_cast<const uint8_t*>(kImageMagic), 8));
  w.u32(kImageVersion);
  w.u64(img.blob.size());
  w.u64(img.hash);
  w.raw(img.blob);
  return std::move(w).take();
}

inline std::vector<uint8_t> decode_image_file(std::span<const uint8_t> bytes) {
  if (bytes.size() < kImageHeaderSize || !std::equal(kImageMagic, kImageMagic + 8, bytes.begin()))
    throw Error(ErrorCode::CorruptImage, "bad image magic");
  ByteReader r(bytes.subspan(8), ErrorCode::CorruptImage);
  if (uint32_t v = r.u32(); v != kImageVersion)
    throw Error(ErrorCode::CorruptImage, "image version " + std::to_string(v) + " unsupported");
  uint64_t len = r.u64();
  uint64_t hash = r.u64();
  if (r.remaining() != len) throw Error(ErrorCode::CorruptImage, "image length mismatch");
  auto payload = r.raw(len);
  if (fnv1a(payload) != hash) throw Error(ErrorCode::CorruptImage, "image content hash mismatch");
  return {payload.begin(), payload.end()};
}

struct RestoredImage {
  vm::VmState vm;
  SessionBlob blob;
};

inline int64_t wall_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

struct AutoPolicy {
  uint64_t every = 1000;  // expanded steps; 0 disables
};

// Ordered images for one session, optionally mirrored to `<dir>/ckpt/`.
class CheckpointStore {
 public:
  explicit CheckpointStore(size_t cap = 1 << 16, std::string dir = {}) : cap_(cap), dir_(std::move(dir)) {
    if (!dir_.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(ckpt_dir(), ec);
      if (ec) throw Error(ErrorCode::IoError, "cannot create " + ckpt_dir() + ": " + ec.message());
    }
  }

  uint64_t take(ImageKind kind, const TimePosition& pos, const SessionBlob& blob) {
    if (images_.size() >= cap_)
      throw Error(ErrorCode::StoreFull, "checkpoint store holds " + std::to_string(cap_) + " images");
    if (!images_.empty() && pos.statement < images_.back().tick())
      throw Error(ErrorCode::BadCommand, "image positions must not decrease");
    CheckpointImage img;
    img.id = images_.size();
    img.kind = kind;
    img.position = pos;
    img.position.checkpoint = img.id;
    img.blob = encode_blob(blob);
    img.hash = fnv1a(img.blob);
    img.created_us = wall_us();
    images_.push_back(std::move(img));
    persist(images_.back());
    return images_.back().id;
  }

  const CheckpointImage& get(uint64_t id) const {
    if (id >= images_.size()) throw Error(ErrorCode::MissingImage, "no checkpoint " + std::to_string(id));
    return images_[id];
  }
  CheckpointImage& get(uint64_t id) {
    if (id >= images_.size()) throw Error(ErrorCode::MissingImage, "no checkpoint " + std::to_string(id));
    return images_[id];
  }

  RestoredImage restore(uint64_t id, std::shared_ptr<const vm::Program> program) const {
    auto t0 = std::chrono::steady_clock::now();
    const auto& img = get(id);
    if (fnv1a(img.blob) != img.hash) throw Error(ErrorCode::CorruptImage, "image " + std::to_string(id) + " hash mismatch");
    RestoredImage out;
    out.blob = decode_blob(img.blob);
    out.vm = vm::deserialize(std::move(program), out.blob.vm);
    ++timing_.restores;
    timing_.restore_us += static_cast<uint64_t>(
        std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count());
    return out;
  }

  // Latest image whose tick is <= `tick`.
  std::optional<uint64_t> at_or_before(uint64_t tick) const {
    auto it = std::upper_bound(images_.begin(), images_.end(), tick,
                               [](uint64_t t, const CheckpointImage& i) { return t < i.tick(); });
    if (it == images_.begin()) return std::nullopt;
    return std::prev(it)->id;
  }

  // Drops images strictly after `tick` (their future was discarded).
  void truncate_after(uint64_t tick) {
    while (!images_.empty() && images_.back().tick() > tick) {
      if (!dir_.empty()) std::filesystem::remove(image_path(images_.back().id));
      images_.pop_back();
    }
    write_index();
  }

  void set_value(uint64_t id, Tri v) {
    get(id).value = v;
    write_index();
  }

  struct Timing {
    uint64_t takes = 0, take_us = 0;
    uint64_t restores = 0, restore_us = 0;
  };
  const Timing& timing() const { return timing_; }
  void note_take(uint64_t us) const {
    ++timing_.takes;
    timing_.take_us += us;
  }

  const std::vector<CheckpointImage>& images() const { return images_; }
  size_t size() const { return images_.size(); }
  size_t cap() const { return cap_; }
  const std::string& dir() const { return dir_; }

  nlohmann::json index() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& i : images_) {
      arr.push_back({{"id", i.id},
                     {"kind", to_string(i.kind)},
                     {"position",
                      {{"checkpoint", i.position.checkpoint},
                       {"command", i.position.command},
                       {"substep", i.position.substep},
                       {"event", i.position.event},
                       {"statement", i.position.statement}}},
                     {"value", to_string(i.value)},
                     {"hash", hex(i.hash)},
                     {"bytes", i.blob.size()}});
    }
    return {{"images", arr}};
  }

  // Reads a store back from its directory, verifying every image.
  static CheckpointStore load(const std::string& dir, size_t cap = 1 << 16) {
    CheckpointStore st(cap, dir);
    std::ifstream in(st.index_path());
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + st.index_path());
    nlohmann::json idx;
    try {
      in >> idx;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CorruptImage, std::string("index.json: ") + e.what());
    }
    for (const auto& e : idx.at("images")) {
      CheckpointImage img;
      img.id = e.at("id").get<uint64_t>();
      if (img.id != st.images_.size()) throw Error(ErrorCode::CorruptImage, "index ids are not dense");
      std::string kind = e.at("kind").get<std::string>();
      img.kind = kind == "initial" ? ImageKind::Initial : kind == "user" ? ImageKind::User : ImageKind::Intermediate;
      const auto& p = e.at("position");
      img.position = {p.at("checkpoint").get<uint64_t>(), p.at("command").get<uint64_t>(),
                      p.at("substep").get<uint64_t>(), p.at("event").get<uint64_t>(),
                      p.at("statement").get<uint64_t>()};
      std::string v = e.at("value").get<std::string>();
      img.value = v == "good" ? Tri::Good : v == "bad" ? Tri::Bad : Tri::Unknown;
      img.blob = decode_image_file(read_file(st.image_path(img.id)));
      img.hash = fnv1a(img.blob);
      if (hex(img.hash) != e.at("hash").get<std::string>())
        throw Error(ErrorCode::CorruptImage, "image " + std::to_string(img.id) + " does not match index");
      st.images_.push_back(std::move(img));
    }
    return st;
  }

  std::string ckpt_dir() const { return dir_ + "/ckpt"; }
  std::string image_path(uint64_t id) const { return ckpt_dir() + "/" + std::to_string(id) + ".img"; }
  std::string index_path() const { return ckpt_dir() + "/index.json"; }

 private:
  static std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingImage, "cannot read " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  void persist(const CheckpointImage& img) {
    if (dir_.empty()) return;
    auto bytes = encode_image_file(img);
    std::ofstream out(image_path(img.id), std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + image_path(img.id));
    write_index();
  }

  void write_index() const {
    if (dir_.empty()) return;
    std::ofstream out(index_path(), std::ios::trunc);
    out << index().dump(2) << "\n";
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + index_path());
  }

  std::vector<CheckpointImage> images_;
  mutable Timing timing_;
  size_t cap_;
  std::string dir_;
};

}  // namespace fred::ckpt
