#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>

#include "sfc/l4l7_plane.hpp"

namespace sfc {

/// Minimal origin server for benchmarks and tests. Every request is answered
/// with 200, header "X-Backend: <name>", header "X-Path: <request path>" and
/// the request body echoed back (or `body` when the request has none).
class UpstreamStub {
public:
    explicit UpstreamStub(std::string name, std::string body = "ok\n");
    ~UpstreamStub();
    UpstreamStub(const UpstreamStub&) = delete;
    UpstreamStub& operator=(const UpstreamStub&) = delete;

    SocketAddress address() const { return {"127.0.0.1", port_}; }
    std::uint64_t hits() const noexcept { return hits_.load(std::memory_order_relaxed); }
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::uint16_t port_ = 0;
    std::atomic<std::uint64_t> hits_{0};
    std::thread thread_;
};

}  // namespace sfc
