#pragma once

// Newline-delimited JSON over TCP on a local address. One controlling
// client drives the session; every other connection is an observer that
// only receives events. Requests are serialized through `driver`, the same
// mutex the local REPL takes around each command.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "fred/server/protocol.hpp"

namespace fred::server {

class SessionServer {
 public:
  // `local_controller`: the REPL in this process owns control, so remote
  // clients can only observe.
  SessionServer(dbg::Session& s, std::mutex& driver, bool local_controller = false)
      : s_(s), driver_(driver), local_controller_(local_controller) {}
  SessionServer(const SessionServer&) = delete;
  SessionServer& operator=(const SessionServer&) = delete;
  ~SessionServer() { stop(); }

  // "host:port", ":port" or "port"; port 0 picks a free one.
  void listen(const std::string& endpoint) {
    std::string host = "127.0.0.1";
    std::string port = endpoint;
    if (auto c = endpoint.rfind(':'); c != std::string::npos) {
      if (c > 0) host = endpoint.substr(0, c);
      port = endpoint.substr(c + 1);
    }
    if (host == "localhost") host = "127.0.0.1";
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(std::stoul(port)));
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      throw Error(ErrorCode::EndpointInUse, "bad address " + endpoint);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(ErrorCode::IoError, std::strerror(errno));
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 8) != 0) {
      std::string why = std::strerror(errno);
      ::close(fd_);
      fd_ = -1;
      throw Error(ErrorCode::EndpointInUse, endpoint + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    s_.set_sink([this](const std::string& kind, const json& payload) { publish(kind, payload); });
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  uint16_t port() const { return port_; }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::list<std::shared_ptr<Client>> all;
    {
      std::lock_guard<std::mutex> g(clients_mu_);
      all = clients_;
    }
    for (auto& c : all) ::shutdown(c->fd, SHUT_RDWR);
    for (auto& c : all)
      if (c->reader.joinable()) c->reader.join();
    std::lock_guard<std::mutex> g(clients_mu_);
    for (auto& c : clients_) ::close(c->fd);
    clients_.clear();
    s_.set_sink({});
  }

  void publish(const std::string& kind, const json& payload) {
    std::lock_guard<std::mutex> g(clients_mu_);
    json ev = {{"event", kind}, {"seq", seq_++}, {"payload", payload}};
    std::string line = ev.dump() + "\n";
    for (auto& c : clients_) send_line(*c, line);
  }

 private:
  struct Client {
    int fd = -1;
    bool controller = false;
    std::mutex write_mu;
    std::thread reader;
  };

  static void send_line(Client& c, const std::string& line) {
    std::lock_guard<std::mutex> g(c.write_mu);
    size_t off = 0;
    while (off < line.size()) {
      ssize_t n = ::send(c.fd, line.data() + off, line.size() - off, MSG_NOSIGNAL);
      if (n <= 0) return;
      off += static_cast<size_t>(n);
    }
  }

  void accept_loop() {
    while (running_) {
      int cfd = ::accept(fd_, nullptr, nullptr);
      if (cfd < 0) {
        if (!running_) return;
        continue;
      }
      auto c = std::make_shared<Client>();
      c->fd = cfd;
      std::lock_guard<std::mutex> g(clients_mu_);
      clients_.push_back(c);
      c->reader = std::thread([this, c] { serve(c); });
    }
  }

  void serve(std::shared_ptr<Client> c) {
    std::string buf;
    char chunk[4096];
    while (true) {
      ssize_t n = ::recv(c->fd, chunk, sizeof chunk, 0);
      if (n <= 0) break;
      buf.append(chunk, static_cast<size_t>(n));
      size_t nl;
      while ((nl = buf.find('\n')) != std::string::npos) {
        std::string line = buf.substr(0, nl);
        buf.erase(0, nl + 1);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        send_line(*c, respond(*c, line).dump() + "\n");
      }
    }
    std::lock_guard<std::mutex> g(control_mu_);
    if (c->controller) controller_taken_ = false;
  }

  json respond(Client& c, const std::string& line) {
    json req = json::parse(line, nullptr, false);
    if (req.is_discarded()) return error_response(nullptr, "ProtocolError", "malformed JSON");
    json id = req.is_object() && req.contains("id") ? req["id"] : json(nullptr);
    std::string verb = req.is_object() && req.contains("verb") && req["verb"].is_string() ? req["verb"].get<std::string>() : "";
    if (verb == "ping") return {{"id", id}, {"ok", true}, {"payload", "pong"}};
    if (verb == "attach") {
      std::string role = req.value("args", json::object()).value("role", "control");
      if (role == "observe") return {{"id", id}, {"ok", true}, {"payload", {{"role", "observer"}}}};
      if (!claim_control(c)) return error_response(id, "Busy", "another client controls this session");
      return {{"id", id}, {"ok", true}, {"payload", {{"role", "controller"}}}};
    }
    if (!claim_control(c)) return error_response(id, "Busy", "another client controls this session");
    std::lock_guard<std::mutex> g(driver_);
    return handle_request(s_, req);
  }

  bool claim_control(Client& c) {
    std::lock_guard<std::mutex> g(control_mu_);
    if (c.controller) return true;
    if (local_controller_ || controller_taken_) return false;
    controller_taken_ = c.controller = true;
    return true;
  }

  dbg::Session& s_;
  std::mutex& driver_;
  bool local_controller_;
  int fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex clients_mu_;
  std::list<std::shared_ptr<Client>> clients_;
  std::mutex control_mu_;
  bool controller_taken_ = false;
  uint64_t seq_ = 0;
};

}  // namespace fred::server
