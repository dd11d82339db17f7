#pragma once

#include <cstdint>
#include <optional>
#include <variant>

#include "fedrad/fedproto/messages.hpp"

namespace fedrad::proto {

using PeerId = std::uint64_t;

struct Inbound {
  PeerId peer = 0;
  Message msg;
};

/// Server side of a transport. Times are seconds on the transport's own
/// clock (wall clock for sockets, virtual clock for the simulator).
class ServerTransport {
 public:
  virtual ~ServerTransport() = default;
  virtual double now() = 0;
  /// Next inbound message, or nullopt once `deadline` has passed (may also
  /// return nullopt early; callers re-check the clock).
  virtual std::optional<Inbound> receive_until(double deadline) = 0;
  /// Best effort; messages to vanished peers are dropped.
  virtual void send(PeerId peer, const Message& msg) = 0;
};

struct Timeout {};
struct Disconnected {};
using ClientEvent = std::variant<Message, Timeout, Disconnected>;

class ClientTransport {
 public:
  virtual ~ClientTransport() = default;
  /// Returns false when the connection is gone.
  virtual bool send(const Message& msg) = 0;
  virtual ClientEvent receive(double timeout_s) = 0;
  /// Re-establishes the connection; false when the server stays unreachable.
  virtual bool reconnect() = 0;
  virtual void close() = 0;
};

}  // namespace fedrad::proto
