#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sfc/audit.hpp"
#include "sfc/descriptor.hpp"
#include "sfc/routing.hpp"
#include "sfc/shm_pool.hpp"
#include "sfc/stats.hpp"

namespace sfc {

inline constexpr std::size_t kDefaultInboxCapacity = 4096;
inline constexpr std::size_t kDefaultMaxBatch = 32;

struct BatchPolicy {
    std::size_t max_batch = kDefaultMaxBatch;
};

struct EndpointOptions {
    std::size_t inbox_capacity = kDefaultInboxCapacity;
    /// Wakeups of a kernel-side context are audited as interrupts only; a
    /// userspace receiver also pays a context switch on each wakeup.
    bool kernel_context = false;
};

/// Blocked/runnable state of one consumer context plus its eventfd doorbell.
/// Producers publish work first and then call notify(); the consumer checks
/// for work under the latch lock before it sleeps, so a notify can never fall
/// between the check and the sleep.
///
/// Audit accounting: a notify that finds the consumer blocked records one
/// interrupt for (trace, step); the consumer's return from that sleep records
/// one context switch for the same trace and step, unless the consumer is a
/// kernel-side context.
class WakeLatch {
public:
    explicit WakeLatch(bool kernel_context = false);
    ~WakeLatch();
    WakeLatch(const WakeLatch&) = delete;
    WakeLatch& operator=(const WakeLatch&) = delete;

    /// Rings the doorbell (one syscall) on every call.
    void notify(std::uint64_t trace_id, Step step, AuditLedger* ledger);
    void notify() { notify(0, 0, nullptr); }

    /// Blocks until ready() holds (evaluated under the latch lock). Returns
    /// false on timeout, or when closed while ready() is false. A zero
    /// timeout never sleeps.
    template <typename Ready>
    bool wait(Ready&& ready, std::optional<std::chrono::nanoseconds> timeout = std::nullopt);

    void close();
    bool closed() const;
    /// True while the consumer is parked on the doorbell with no wakeup
    /// pending.
    bool blocked() const;
    std::uint64_t wakeups() const noexcept { return wakeups_.load(std::memory_order_relaxed); }

private:
    void settle_locked();
    void sleep(std::optional<std::chrono::nanoseconds> timeout);
    void ring() noexcept;

    const bool kernel_context_;
    int doorbell_ = -1;
    mutable std::mutex mu_;
    bool blocked_ = false;
    bool woken_ = false;
    bool closed_ = false;
    std::uint64_t wake_trace_ = 0;
    Step wake_step_ = 0;
    AuditLedger* wake_ledger_ = nullptr;
    std::atomic<std::uint64_t> wakeups_{0};
};

template <typename Ready>
bool WakeLatch::wait(Ready&& ready, std::optional<std::chrono::nanoseconds> timeout) {
    const auto deadline = timeout ? std::optional(std::chrono::steady_clock::now() + *timeout) : std::nullopt;
    for (;;) {
        {
            std::lock_guard lock(mu_);
            if (ready()) {
                settle_locked();
                return true;
            }
            if (closed_ || (deadline && std::chrono::steady_clock::now() >= *deadline)) {
                blocked_ = false;
                woken_ = false;
                wake_ledger_ = nullptr;
                return false;
            }
            blocked_ = true;
        }
        std::optional<std::chrono::nanoseconds> left;
        if (deadline) left = *deadline - std::chrono::steady_clock::now();
        sleep(left);
    }
}

/// Notification-driven inbox owned by exactly one receiver. Every send rings
/// the receiver's doorbell; the receiver sleeps only while its inbox is empty.
class EventEndpoint {
public:
    EventEndpoint(FnId id, EndpointOptions opts);
    EventEndpoint(const EventEndpoint&) = delete;
    EventEndpoint& operator=(const EventEndpoint&) = delete;

    FnId id() const noexcept { return id_; }
    std::size_t capacity() const noexcept { return opts_.inbox_capacity; }
    std::size_t pending() const;
    bool closed() const { return latch_.closed(); }
    bool blocked() const { return latch_.blocked(); }

    /// Blocks until at least one descriptor is queued, then returns up to
    /// max_batch of them in arrival order. Throws Closed once the endpoint
    /// is closed and drained.
    std::vector<PacketDescriptor> recv_batch(const BatchPolicy& policy = {});
    /// As recv_batch, but gives up after `timeout` and returns an empty list.
    std::vector<PacketDescriptor> recv_batch_for(const BatchPolicy& policy, std::chrono::nanoseconds timeout);
    /// Never blocks.
    std::vector<PacketDescriptor> try_recv_batch(const BatchPolicy& policy = {});

    void close();

    /// Blocked-to-runnable transitions caused by sends.
    std::uint64_t wakeups() const noexcept { return latch_.wakeups(); }
    /// Non-empty batches returned to the receiver.
    std::uint64_t drains() const noexcept { return drains_.load(std::memory_order_relaxed); }
    std::uint64_t received() const noexcept { return received_.load(std::memory_order_relaxed); }

    enum class Push { Ok, Full, Closed };
    /// Appends and notifies. Used by SocketMap and by infrastructure code
    /// that owns a private endpoint.
    Push push(const PacketDescriptor& d, Step step, AuditLedger* ledger);

private:
    std::vector<PacketDescriptor> receive(const BatchPolicy& policy, std::optional<std::chrono::nanoseconds> timeout);

    const FnId id_;
    const EndpointOptions opts_;
    WakeLatch latch_;
    mutable std::mutex mu_;
    std::deque<PacketDescriptor> inbox_;
    bool closed_ = false;
    std::atomic<std::uint64_t> drains_{0};
    std::atomic<std::uint64_t> received_{0};
};

enum class SendStatus : std::uint8_t { Ok, UnknownDestination, InboxFull, Filtered, Closed };

std::string_view to_string(SendStatus s) noexcept;

/// Function id -> endpoint routing for event-driven hops. Undeliverable
/// descriptors have their frame returned to the pool and are counted as
/// drops; the sender never keeps ownership after send().
class SocketMap {
public:
    explicit SocketMap(PoolHandle pool, std::shared_ptr<FilterTable> filter = nullptr, AuditLedger* ledger = nullptr);

    /// Throws DuplicateFunction.
    std::shared_ptr<EventEndpoint> register_fn(FnId id, EndpointOptions opts = {});
    void deregister(FnId id);
    std::shared_ptr<EventEndpoint> lookup(FnId id) const;

    /// Delivers to desc.dst_fn. `step` is the audit step charged if this
    /// delivery wakes a blocked receiver.
    SendStatus send(const PacketDescriptor& desc, Step step);
    SendStatus send(const PacketDescriptor& desc) { return send(desc, chain_step(desc.hops)); }

    void set_ledger(AuditLedger* ledger) noexcept { ledger_ = ledger; }
    const std::shared_ptr<FilterTable>& filter() const noexcept { return filter_; }

    std::uint64_t drops() const noexcept { return drops_.load(std::memory_order_relaxed); }
    std::uint64_t filtered() const noexcept { return filtered_.load(std::memory_order_relaxed); }

private:
    SendStatus drop(const PacketDescriptor& desc, SendStatus why);

    PoolHandle pool_;
    std::shared_ptr<FilterTable> filter_;
    AuditLedger* ledger_;
    mutable std::shared_mutex mu_;
    std::unordered_map<FnId, std::shared_ptr<EventEndpoint>> endpoints_;
    std::atomic<std::uint64_t> drops_{0};
    std::atomic<std::uint64_t> filtered_{0};
};

/// One-hop send -> recv_batch latency between a probe context and an echo
/// context, both blocking on their endpoints.
LatencyStats event_hop_latency_probe(std::size_t n_samples);

}  // namespace sfc
