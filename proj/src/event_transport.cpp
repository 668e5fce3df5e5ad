#include "sfc/event_transport.hpp"

#include <poll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <cerrno>
#include <thread>

#include "sfc/error.hpp"

namespace sfc {

WakeLatch::WakeLatch(bool kernel_context) : kernel_context_(kernel_context) {
    doorbell_ = ::eventfd(0, EFD_CLOEXEC);
    if (doorbell_ < 0) throw Error(Errc::IoError, "eventfd failed");
}

WakeLatch::~WakeLatch() {
    if (doorbell_ >= 0) ::close(doorbell_);
}

void WakeLatch::ring() noexcept {
    const std::uint64_t one = 1;
    ssize_t rc;
    do {
        rc = ::write(doorbell_, &one, sizeof one);
    } while (rc < 0 && errno == EINTR);
}

void WakeLatch::notify(std::uint64_t trace_id, Step step, AuditLedger* ledger) {
    {
        std::lock_guard lock(mu_);
        if (blocked_ && !woken_) {
            woken_ = true;
            wakeups_.fetch_add(1, std::memory_order_relaxed);
            wake_trace_ = trace_id;
            wake_step_ = step;
            wake_ledger_ = ledger;
            if (ledger) ledger->record(trace_id, step, Category::Interrupts);
        }
    }
    ring();
}

void WakeLatch::settle_locked() {
    if (woken_ && wake_ledger_ && !kernel_context_)
        wake_ledger_->record(wake_trace_, wake_step_, Category::ContextSwitches);
    woken_ = false;
    blocked_ = false;
    wake_ledger_ = nullptr;
}

void WakeLatch::sleep(std::optional<std::chrono::nanoseconds> timeout) {
    if (timeout) {
        const auto ns = std::max<std::int64_t>(timeout->count(), 0);
        timespec ts{static_cast<time_t>(ns / 1'000'000'000), static_cast<long>(ns % 1'000'000'000)};
        pollfd p{doorbell_, POLLIN, 0};
        if (::ppoll(&p, 1, &ts, nullptr) <= 0) return;
    }
    std::uint64_t v;
    ssize_t rc;
    do {
        rc = ::read(doorbell_, &v, sizeof v);
    } while (rc < 0 && errno == EINTR);
}

void WakeLatch::close() {
    {
        std::lock_guard lock(mu_);
        closed_ = true;
    }
    ring();
}

bool WakeLatch::closed() const {
    std::lock_guard lock(mu_);
    return closed_;
}

bool WakeLatch::blocked() const {
    std::lock_guard lock(mu_);
    return blocked_ && !woken_;
}

EventEndpoint::EventEndpoint(FnId id, EndpointOptions opts) : id_(id), opts_(opts), latch_(opts.kernel_context) {
    if (opts_.inbox_capacity == 0) throw Error(Errc::InvalidCapacity, "inbox capacity must be >= 1");
}

std::size_t EventEndpoint::pending() const {
    std::lock_guard lock(mu_);
    return inbox_.size();
}

void EventEndpoint::close() {
    {
        std::lock_guard lock(mu_);
        closed_ = true;
    }
    latch_.close();
}

EventEndpoint::Push EventEndpoint::push(const PacketDescriptor& d, Step step, AuditLedger* ledger) {
    {
        std::lock_guard lock(mu_);
        if (closed_) return Push::Closed;
        if (inbox_.size() >= opts_.inbox_capacity) return Push::Full;
        inbox_.push_back(d);
    }
    latch_.notify(d.trace_id, step, ledger);
    return Push::Ok;
}

std::vector<PacketDescriptor> EventEndpoint::receive(const BatchPolicy& policy,
                                                     std::optional<std::chrono::nanoseconds> timeout) {
    auto has_work = [this] {
        std::lock_guard lock(mu_);
        return !inbox_.empty();
    };
    if (!latch_.wait(has_work, timeout)) {
        if (latch_.closed() && !has_work()) throw Error(Errc::Closed, "endpoint " + id_.str() + " closed");
        return {};
    }
    std::lock_guard lock(mu_);
    const std::size_t n = std::min(std::max<std::size_t>(policy.max_batch, 1), inbox_.size());
    std::vector<PacketDescriptor> out(inbox_.begin(), inbox_.begin() + static_cast<std::ptrdiff_t>(n));
    inbox_.erase(inbox_.begin(), inbox_.begin() + static_cast<std::ptrdiff_t>(n));
    drains_.fetch_add(1, std::memory_order_relaxed);
    received_.fetch_add(n, std::memory_order_relaxed);
    return out;
}

std::vector<PacketDescriptor> EventEndpoint::recv_batch(const BatchPolicy& policy) {
    return receive(policy, std::nullopt);
}

std::vector<PacketDescriptor> EventEndpoint::recv_batch_for(const BatchPolicy& policy,
                                                            std::chrono::nanoseconds timeout) {
    return receive(policy, timeout);
}

std::vector<PacketDescriptor> EventEndpoint::try_recv_batch(const BatchPolicy& policy) {
    return receive(policy, std::chrono::nanoseconds{0});
}

std::string_view to_string(SendStatus s) noexcept {
    switch (s) {
        case SendStatus::Ok: return "ok";
        case SendStatus::UnknownDestination: return "unknown_destination";
        case SendStatus::InboxFull: return "inbox_full";
        case SendStatus::Filtered: return "filtered";
        case SendStatus::Closed: return "closed";
    }
    return "?";
}

SocketMap::SocketMap(PoolHandle pool, std::shared_ptr<FilterTable> filter, AuditLedger* ledger)
    : pool_(std::move(pool)), filter_(std::move(filter)), ledger_(ledger) {}

std::shared_ptr<EventEndpoint> SocketMap::register_fn(FnId id, EndpointOptions opts) {
    std::unique_lock lock(mu_);
    if (endpoints_.contains(id)) throw Error(Errc::DuplicateFunction, id.str());
    auto ep = std::make_shared<EventEndpoint>(id, opts);
    endpoints_.emplace(id, ep);
    return ep;
}

void SocketMap::deregister(FnId id) {
    std::shared_ptr<EventEndpoint> ep;
    {
        std::unique_lock lock(mu_);
        auto it = endpoints_.find(id);
        if (it == endpoints_.end()) return;
        ep = it->second;
        endpoints_.erase(it);
    }
    ep->close();
}

std::shared_ptr<EventEndpoint> SocketMap::lookup(FnId id) const {
    std::shared_lock lock(mu_);
    auto it = endpoints_.find(id);
    return it == endpoints_.end() ? nullptr : it->second;
}

SendStatus SocketMap::drop(const PacketDescriptor& desc, SendStatus why) {
    drops_.fetch_add(1, std::memory_order_relaxed);
    if (why == SendStatus::Filtered) filtered_.fetch_add(1, std::memory_order_relaxed);
    if (pool_ && pool_->is_valid(desc.frame)) pool_->free(desc.frame);
    if (ledger_) ledger_->mark_complete(desc.trace_id);
    return why;
}

SendStatus SocketMap::send(const PacketDescriptor& desc, Step step) {
    if (filter_ && !filter_->allows(desc.src_fn, desc.dst_fn)) return drop(desc, SendStatus::Filtered);
    auto ep = lookup(desc.dst_fn);
    if (!ep) return drop(desc, SendStatus::UnknownDestination);
    switch (ep->push(desc, step, ledger_)) {
        case EventEndpoint::Push::Ok: return SendStatus::Ok;
        case EventEndpoint::Push::Full: return drop(desc, SendStatus::InboxFull);
        case EventEndpoint::Push::Closed: return drop(desc, SendStatus::Closed);
    }
    return SendStatus::Ok;
}

LatencyStats event_hop_latency_probe(std::size_t n_samples) {
    if (n_samples == 0) throw Error(Errc::InvalidSampleCount, "n_samples must be >= 1");
    SocketMap map(nullptr);
    const FnId probe_id{1}, echo_id{2};
    auto probe = map.register_fn(probe_id);
    auto echo = map.register_fn(echo_id);
    std::vector<std::uint64_t> samples;
    samples.reserve(n_samples);

    std::thread echo_ctx([&] {
        try {
            for (;;) {
                for (auto d : echo->recv_batch()) {
                    samples.push_back(now_ns() - d.t_ingress_ns);
                    d.src_fn = echo_id;
                    d.dst_fn = probe_id;
                    map.send(d, 0);
                }
            }
        } catch (const Error&) {
        }
    });
    for (std::size_t i = 0; i < n_samples; ++i) {
        PacketDescriptor d;
        d.trace_id = i;
        d.src_fn = probe_id;
        d.dst_fn = echo_id;
        d.t_ingress_ns = now_ns();
        map.send(d, 0);
        probe->recv_batch();
    }
    echo->close();
    echo_ctx.join();
    return summarize(samples);
}

}  // namespace sfc
