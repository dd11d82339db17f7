#pragma once

// Blocking TCP transports (POSIX sockets). The server runs one accept thread
// and one reader thread per connection; readers hand decoded frames to the
// coordinator thread through a queue.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fedrad/core/error.hpp"
#include "fedrad/core/log.hpp"
#include "fedrad/fedproto/messages.hpp"
#include "fedrad/fedproto/transport.hpp"

namespace fedrad::proto {

class NetError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline bool write_all(int fd, std::span<const std::byte> bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

/// Reads exactly `n` bytes; false on EOF or error.
inline bool read_exact(int fd, std::byte* out, std::size_t n) {
  std::size_t off = 0;
  while (off < n) {
    const auto r = ::recv(fd, out + off, n - off, 0);
    if (r == 0) return false;
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(r);
  }
  return true;
}

/// Blocks until one full frame has arrived. nullopt on EOF; throws FrameError on garbage.
inline std::optional<Message> read_frame(int fd) {
  std::vector<std::byte> buf(kFrameHeaderSize);
  if (!read_exact(fd, buf.data(), buf.size())) return std::nullopt;
  const auto h = decode_header(buf);
  buf.resize(kFrameHeaderSize + h.payload_len);
  if (!read_exact(fd, buf.data() + kFrameHeaderSize, h.payload_len)) return std::nullopt;
  return decode_frame(buf).message;
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

inline int connect_once(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0) return -1;
  int fd = -1;
  for (auto* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd >= 0) set_nodelay(fd);
  return fd;
}

}  // namespace detail

class TcpServerTransport final : public ServerTransport {
 public:
  /// Listens on `bind_host:port`; port 0 picks a free port (see port()).
  explicit TcpServerTransport(std::uint16_t port, const std::string& bind_host = "127.0.0.1")
      : start_(std::chrono::steady_clock::now()) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw NetError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, bind_host.c_str(), &addr.sin_addr) != 1) {
      ::close(listen_fd_);
      throw NetError("bad bind address '" + bind_host + "'");
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(listen_fd_);
      throw NetError("cannot listen on " + bind_host + ":" + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  TcpServerTransport(const TcpServerTransport&) = delete;
  TcpServerTransport& operator=(const TcpServerTransport&) = delete;

  ~TcpServerTransport() override {
    stopping_ = true;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> readers;
    {
      std::lock_guard lk(mu_);
      for (auto& [id, c] : conns_) ::shutdown(c->fd, SHUT_RDWR);
      readers.swap(readers_);
    }
    for (auto& t : readers) t.join();
    for (auto& [id, c] : conns_) ::close(c->fd);
  }

  std::uint16_t port() const { return port_; }

  double now() override {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  std::optional<Inbound> receive_until(double deadline) override {
    std::unique_lock lk(mu_);
    const auto until = start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                    std::chrono::duration<double>(deadline));
    cv_.wait_until(lk, until, [&] { return !inbox_.empty(); });
    if (inbox_.empty()) return std::nullopt;
    auto in = std::move(inbox_.front());
    inbox_.pop_front();
    return in;
  }

  void send(PeerId peer, const Message& msg) override {
    std::shared_ptr<Conn> c;
    {
      std::lock_guard lk(mu_);
      auto it = conns_.find(peer);
      if (it == conns_.end()) return;
      c = it->second;
    }
    const auto bytes = encode_frame(msg);
    std::lock_guard wl(c->write_mu);
    if (!detail::write_all(c->fd, bytes)) log().info("server: send to peer {} failed", peer);
  }

 private:
  struct Conn {
    int fd = -1;
    std::mutex write_mu;
  };

  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopping_) return;
        if (errno == EINTR || errno == ECONNABORTED) continue;
        return;
      }
      detail::set_nodelay(fd);
      auto c = std::make_shared<Conn>();
      c->fd = fd;
      std::lock_guard lk(mu_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      const PeerId id = next_peer_++;
      conns_[id] = c;
      readers_.emplace_back([this, id, fd] { read_loop(id, fd); });
    }
  }

  void read_loop(PeerId id, int fd) {
    try {
      while (auto msg = detail::read_frame(fd)) {
        std::lock_guard lk(mu_);
        inbox_.push_back({id, std::move(*msg)});
        cv_.notify_one();
      }
    } catch (const FrameError& e) {
      log().warn("server: dropping peer {}: {}", id, e.what());
      ::shutdown(fd, SHUT_RDWR);
    }
  }

  std::chrono::steady_clock::time_point start_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Inbound> inbox_;
  std::map<PeerId, std::shared_ptr<Conn>> conns_;
  std::vector<std::thread> readers_;
  PeerId next_peer_ = 1;
};

class TcpClientTransport final : public ClientTransport {
 public:
  /// Connects, retrying for up to `connect_window_s` seconds.
  TcpClientTransport(std::string host, std::uint16_t port, double connect_window_s = 10.0)
      : host_(std::move(host)), port_(port), window_s_(connect_window_s) {
    if (!connect_with_retry()) throw NetError("cannot connect to " + host_ + ":" + std::to_string(port_));
  }

  TcpClientTransport(const TcpClientTransport&) = delete;
  TcpClientTransport& operator=(const TcpClientTransport&) = delete;
  ~TcpClientTransport() override { close(); }

  bool send(const Message& msg) override { return fd_ >= 0 && detail::write_all(fd_, encode_frame(msg)); }

  ClientEvent receive(double timeout_s) override {
    if (fd_ < 0) return Disconnected{};
    pollfd p{fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(timeout_s * 1000.0));
    if (rc == 0) return Timeout{};
    if (rc < 0) return errno == EINTR ? ClientEvent{Timeout{}} : ClientEvent{Disconnected{}};
    try {
      auto msg = detail::read_frame(fd_);
      if (!msg) {
        close();
        return Disconnected{};
      }
      return std::move(*msg);
    } catch (const FrameError& e) {
      log().warn("client: bad frame from server: {}", e.what());
      close();
      return Disconnected{};
    }
  }

  bool reconnect() override {
    close();
    return connect_with_retry();
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  bool connect_with_retry() {
    const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(window_s_);
    for (;;) {
      fd_ = detail::connect_once(host_, port_);
      if (fd_ >= 0) return true;
      if (std::chrono::steady_clock::now() >= until) return false;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
  }

  std::string host_;
  std::uint16_t port_;
  double window_s_;
  int fd_ = -1;
};

/// Splits "host:port".
inline std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("expected host:port, got '" + s + "'");
  const auto port_str = s.substr(colon + 1);
  try {
    std::size_t used = 0;
    const int port = std::stoi(port_str, &used);
    if (used != port_str.size() || port <= 0 || port > 65535) throw std::out_of_range("port");
    return {s.substr(0, colon), static_cast<std::uint16_t>(port)};
  } catch (const std::logic_error&) {
    throw ConfigError("bad port in '" + s + "'");
  }
}

}  // namespace fedrad::proto
