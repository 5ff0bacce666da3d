// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Adapter for an external Yes/No critic over TCP. Every message is a frame:
// u32 LE body length, then the body.
//   request body:  u8 version, u32 query length, UTF-8 query,
//                  u32 N, u32 H, u32 W, N*H*W*3 RGB bytes (view-major, row-major)
//   response body: u8 version, f64 LE z_yes, f64 LE z_no
// Verdicts from this path carry no gradient.

#pragma once

#include <netdb.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

#include "cg3d/checkpoint.hpp"
#include "cg3d/critic.hpp"
#include "cg3d/render.hpp"

namespace cg3d {

inline constexpr std::uint8_t kCriticProtocolVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 256u << 20;

class CriticTransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CriticProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CriticLogitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CriticEndpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  int timeout_ms = 10000;
};

struct CriticRequest {
  std::string query;
  std::uint32_t views = 0, height = 0, width = 0;
  std::string rgb;
};

inline std::string encode_request(const CriticQuery& query, const ViewSet& views) {
  if (views.size() == 0) throw std::invalid_argument("empty view set");
  const std::string text = query.serialize();
  const std::size_t h = views.images[0].shape()[0], w = views.images[0].shape()[1];
  std::string body;
  detail::put<std::uint8_t>(body, kCriticProtocolVersion);
  detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(text.size()));
  body += text;
  detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(views.size()));
  detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(h));
  detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(w));
  for (const Tensor& img : views.images) {
    if (img.shape() != Shape{h, w, 3}) throw ShapeError("views differ in size");
    for (double v : img.data()) body.push_back(static_cast<char>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5)));
  }
  return body;
}

inline CriticRequest decode_request(std::string_view body) {
  try {
    if (detail::take<std::uint8_t>(body) != kCriticProtocolVersion) throw CriticProtocolError("unsupported version");
    CriticRequest r;
    const auto len = detail::take<std::uint32_t>(body);
    if (body.size() < len) throw CriticProtocolError("truncated query");
    r.query = std::string(body.substr(0, len));
    body.remove_prefix(len);
    r.views = detail::take<std::uint32_t>(body);
    r.height = detail::take<std::uint32_t>(body);
    r.width = detail::take<std::uint32_t>(body);
    if (body.size() != std::size_t{r.views} * r.height * r.width * 3) throw CriticProtocolError("pixel payload size");
    r.rgb = std::string(body);
    return r;
  } catch (const FormatError& e) {
    throw CriticProtocolError(std::string("malformed request: ") + e.what());
  }
}

inline std::string encode_response(double z_yes, double z_no) {
  std::string body;
  detail::put<std::uint8_t>(body, kCriticProtocolVersion);
  detail::put<double>(body, z_yes);
  detail::put<double>(body, z_no);
  return body;
}

inline std::pair<double, double> decode_response(std::string_view body) {
  if (body.size() != 17) throw CriticProtocolError("response body must be 17 bytes, got " + std::to_string(body.size()));
  if (detail::take<std::uint8_t>(body) != kCriticProtocolVersion) throw CriticProtocolError("unsupported version");
  const double z_yes = detail::take<double>(body);
  const double z_no = detail::take<double>(body);
  return {z_yes, z_no};
}

namespace detail {

inline void send_all(int fd, std::string_view bytes) {
  while (!bytes.empty()) {
    const ssize_t n = ::send(fd, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n <= 0) throw CriticTransportError(std::string("send failed: ") + std::strerror(errno));
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
}

inline std::string recv_exact(int fd, std::size_t n) {
  std::string out(n, '\0');
  std::size_t got = 0;
  while (got < n) {
    const ssize_t k = ::recv(fd, out.data() + got, n - got, 0);
    if (k == 0) throw CriticProtocolError("connection closed mid-frame");
    if (k < 0) throw CriticTransportError(std::string("recv failed: ") + std::strerror(errno));
    got += static_cast<std::size_t>(k);
  }
  return out;
}

}  // namespace detail

inline void write_frame(int fd, std::string_view body) {
  std::string frame;
  detail::put<std::uint32_t>(frame, static_cast<std::uint32_t>(body.size()));
  frame += body;
  detail::send_all(fd, frame);
}

inline std::string read_frame(int fd) {
  const std::string head = detail::recv_exact(fd, 4);
  std::uint32_t len = 0;
  std::memcpy(&len, head.data(), 4);
  if (len > kMaxFrameBytes) throw CriticProtocolError("frame too large: " + std::to_string(len));
  return detail::recv_exact(fd, len);
}

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) reset(std::exchange(o.fd_, -1));
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }
  int get() const { return fd_; }
  void reset(int fd = -1) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = fd;
  }

 private:
  int fd_;
};

inline Socket connect_endpoint(const CriticEndpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  if (const int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw CriticTransportError("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  }
  std::string last = "no addresses";
  for (addrinfo* a = res; a; a = a->ai_next) {
    Socket s(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
    if (s.get() < 0) continue;
    timeval tv{ep.timeout_ms / 1000, (ep.timeout_ms % 1000) * 1000};
    ::setsockopt(s.get(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(s.get(), SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    if (::connect(s.get(), a->ai_addr, a->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      return s;
    }
    last = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  throw CriticTransportError("cannot connect to " + ep.host + ":" + port + ": " + last);
}

inline CriticVerdict remote_critic_eval(const CriticEndpoint& ep, const CriticQuery& query, const ViewSet& views) {
  const std::string body = encode_request(query, views);
  Socket s = connect_endpoint(ep);
  write_frame(s.get(), body);
  const auto [z_yes, z_no] = decode_response(read_frame(s.get()));
  if (!std::isfinite(z_yes) || !std::isfinite(z_no)) {
    throw CriticLogitError("critic returned non-finite logits");
  }
  return make_verdict(Tensor::scalar(z_yes), Tensor::scalar(z_no), false);
}

}  // namespace cg3d
