#include "sfc/upstream.hpp"

#include "httplib.h"
#include "sfc/error.hpp"

namespace sfc {

struct UpstreamStub::Impl {
    httplib::Server server;
};

UpstreamStub::UpstreamStub(std::string name, std::string body) : impl_(std::make_unique<Impl>()) {
    auto handler = [this, name, body](const httplib::Request& req, httplib::Response& res) {
        hits_.fetch_add(1, std::memory_order_relaxed);
        res.set_header("X-Backend", name);
        res.set_header("X-Path", req.path);
        res.set_content(req.body.empty() ? body : req.body, "application/octet-stream");
    };
    impl_->server.Get(".*", handler);
    impl_->server.Post(".*", handler);
    impl_->server.Put(".*", handler);
    impl_->server.set_keep_alive_max_count(1000000);
    impl_->server.set_tcp_nodelay(true);
    const int port = impl_->server.bind_to_any_port("127.0.0.1");
    if (port <= 0) throw Error(Errc::IoError, "upstream stub cannot bind");
    port_ = static_cast<std::uint16_t>(port);
    thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

UpstreamStub::~UpstreamStub() { stop(); }

void UpstreamStub::stop() {
    if (!thread_.joinable()) return;
    impl_->server.stop();
    thread_.join();
}

}  // namespace sfc
