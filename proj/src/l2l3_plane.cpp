#include "sfc/l2l3_plane.hpp"

#include <pthread.h>
#include <sched.h>

#include <cstring>

#include "sfc/error.hpp"

namespace sfc {

struct L2L3Plane::Nf {
    Nf(FnId id, std::unique_ptr<Handler> h) : id(id), handler(std::move(h)) {}
    FnId id;
    std::unique_ptr<Handler> handler;
    std::unique_ptr<RingPair> rings;
    std::shared_ptr<EventEndpoint> ep;
};

std::string_view to_string(PlaneMode m) noexcept { return m == PlaneMode::Polling ? "polling" : "event"; }

PlaneMode parse_mode(std::string_view text) {
    if (text == "polling" || text == "poll") return PlaneMode::Polling;
    if (text == "event" || text == "event-driven") return PlaneMode::Event;
    throw Error(Errc::InvalidConfig, "unknown mode '" + std::string(text) + "'");
}

namespace {

// Event-mode contexts must not preempt the context that woke them: on a
// shared core that would let a receiver run while its sender is still
// mid-batch, hiding the wakeup from the audit.
void no_wakeup_preemption() {
    sched_param p{};
    pthread_setschedparam(pthread_self(), SCHED_BATCH, &p);
}

}  // namespace

L2L3Plane::L2L3Plane(L2L3Config config)
    : config_(std::move(config)),
      pool_(FramePool::create(config_.pool)),
      ledger_(config_.ledger),
      filter_(std::make_shared<FilterTable>(config_.filter_default)) {}

L2L3Plane::~L2L3Plane() { stop(); }

void L2L3Plane::check_started_for_config() const {
    if (started_) throw Error(Errc::ModeChangeAfterStart, "plane already started");
}

void L2L3Plane::set_mode(PlaneMode mode) {
    check_started_for_config();
    config_.mode = mode;
}

void L2L3Plane::register_nf(FnId id, std::unique_ptr<Handler> handler) {
    check_started_for_config();
    routes_.add_function(id);
    nfs_.push_back(std::make_unique<Nf>(id, std::move(handler)));
    nf_index_[id] = nfs_.back().get();
}

void L2L3Plane::set_route(FnId from, FnId to) { routes_.set_route(from, to); }
void L2L3Plane::clear_routes() { routes_.clear_routes(); }

void L2L3Plane::set_filter(FnId src, FnId dst, Verdict v) {
    for (FnId f : {src, dst})
        if (!f.is_infrastructure() && !routes_.has_function(f)) throw Error(Errc::UnknownFunction, f.str());
    filter_->set(src, dst, v);
}

void L2L3Plane::set_sink(PacketSink sink) {
    check_started_for_config();
    sink_ = std::move(sink);
}

L2L3Plane::Nf* L2L3Plane::find_nf(FnId id) const {
    auto it = nf_index_.find(id);
    return it == nf_index_.end() ? nullptr : it->second;
}

void L2L3Plane::start(bool threaded) {
    check_started_for_config();
    if (config_.mode == PlaneMode::Event && !threaded)
        throw Error(Errc::InvalidConfig, "event mode needs its own contexts");
    threaded_ = threaded;
    stopping_ = false;
    const auto cap = config_.ring_capacity;

    if (config_.mode == PlaneMode::Polling) {
        nic_rx_ = std::make_unique<DescriptorRing>(cap);
        egress_ring_ = std::make_unique<DescriptorRing>(cap);
        for (auto& nf : nfs_) nf->rings = std::make_unique<RingPair>(cap);
        started_ = true;
        if (!threaded) return;
        threads_.emplace_back("router", std::thread([this] {
                                  while (!stopping_.load(std::memory_order_relaxed))
                                      if (!route_step()) std::this_thread::yield();
                              }));
        threads_.emplace_back("nic", std::thread([this] {
                                  while (!stopping_.load(std::memory_order_relaxed))
                                      if (!egress_step()) std::this_thread::yield();
                              }));
        for (auto& nf : nfs_) {
            Nf* p = nf.get();
            threads_.emplace_back(p->id.str(), std::thread([this, p] { polling_nf_loop(*p); }));
        }
        return;
    }

    xsk_ = std::make_unique<XskRingSet>(cap);
    for (std::size_t i = 0; i < cap; ++i) {
        auto f = pool_->try_alloc();
        if (!f) break;
        PacketDescriptor d;
        d.frame = *f;
        xsk_->fill.enqueue(d);
    }
    sockets_ = std::make_unique<SocketMap>(pool_, filter_, ledger_);
    const EndpointOptions user{.inbox_capacity = config_.inbox_capacity};
    kernel_ep_ = sockets_->register_fn(kKernel, {.inbox_capacity = config_.inbox_capacity, .kernel_context = true});
    router_ep_ = sockets_->register_fn(kManager, user);
    for (auto& nf : nfs_) nf->ep = sockets_->register_fn(nf->id, user);
    rx_latch_ = std::make_unique<WakeLatch>();
    completion_latch_ = std::make_unique<WakeLatch>();
    started_ = true;
    threads_.emplace_back("kernel", std::thread([this] { kernel_loop(); }));
    threads_.emplace_back("mgr-rx", std::thread([this] { manager_rx_loop(); }));
    threads_.emplace_back("router", std::thread([this] { router_loop(); }));
    threads_.emplace_back("coordinator", std::thread([this] { coordinator_loop(); }));
    for (auto& nf : nfs_) {
        Nf* p = nf.get();
        threads_.emplace_back(p->id.str(), std::thread([this, p] { event_nf_loop(*p); }));
    }
}

void L2L3Plane::stop() {
    if (!started_) return;
    stopping_ = true;
    if (config_.mode == PlaneMode::Event) {
        kernel_ep_->close();
        rx_latch_->close();
        router_ep_->close();
        completion_latch_->close();
        for (auto& nf : nfs_) nf->ep->close();
    }
    for (auto& [name, t] : threads_)
        if (t.joinable()) t.join();
    threads_.clear();
    free_leftovers();
    started_ = false;
}

void L2L3Plane::free_leftovers() {
    auto give_back = [&](const PacketDescriptor& d) {
        if (pool_->is_valid(d.frame)) pool_->free(d.frame);
    };
    auto drain_ring = [&](DescriptorRing* r) {
        if (!r) return;
        while (auto d = r->dequeue()) give_back(*d);
    };
    auto drain_ep = [&](const std::shared_ptr<EventEndpoint>& ep) {
        if (!ep) return;
        try {
            for (;;) {
                auto b = ep->try_recv_batch({1024});
                if (b.empty()) break;
                for (auto& d : b) give_back(d);
            }
        } catch (const Error&) {
        }
    };
    drain_ring(nic_rx_.get());
    drain_ring(egress_ring_.get());
    if (sink_retry_) give_back(*sink_retry_);
    sink_retry_.reset();
    for (auto& nf : nfs_) {
        if (nf->rings) {
            drain_ring(&nf->rings->rx);
            drain_ring(&nf->rings->tx);
        }
        drain_ep(nf->ep);
        nf->ep.reset();
    }
    if (xsk_) {
        drain_ring(&xsk_->rx);
        drain_ring(&xsk_->tx);
        drain_ring(&xsk_->completion);
        drain_ring(&xsk_->fill);
    }
    drain_ep(kernel_ep_);
    drain_ep(router_ep_);
    kernel_ep_.reset();
    router_ep_.reset();
    sockets_.reset();
}

void L2L3Plane::release(const PacketDescriptor& d, std::atomic<std::uint64_t>& reason) {
    reason.fetch_add(1, std::memory_order_relaxed);
    if (pool_->is_valid(d.frame)) pool_->free(d.frame);
    if (ledger_) ledger_->mark_complete(d.trace_id);
}

bool L2L3Plane::transmit(const PacketDescriptor& d) {
    if (!sink_) return true;
    auto frame = std::as_const(*pool_).frame(d.frame);
    return sink_(d, frame.subspan(d.offset, d.length));
}

void L2L3Plane::finish(const PacketDescriptor& d) {
    c_.egressed.fetch_add(1, std::memory_order_relaxed);
    if (ledger_) ledger_->mark_complete(d.trace_id);
}

IngressStatus L2L3Plane::ingress(std::span<const std::uint8_t> packet, const std::optional<FlowKey>& flow,
                                 std::uint64_t trace_id, HairpinLabel origin) {
    if (!started_ || stopping_) return IngressStatus::NotRunning;
    c_.offered.fetch_add(1, std::memory_order_relaxed);
    PacketDescriptor d;
    d.length = static_cast<std::uint32_t>(packet.size());
    d.src_fn = kIngress;
    d.flow = flow;
    d.trace_id = trace_id ? trace_id : next_trace_++;
    d.t_ingress_ns = now_ns();
    d.origin = origin;
    if (packet.size() > pool_->frame_size()) {
        c_.dropped_oversize.fetch_add(1, std::memory_order_relaxed);
        if (ledger_) ledger_->mark_complete(d.trace_id);
        return IngressStatus::DroppedTooLarge;
    }
    if (config_.mode == PlaneMode::Event) return event_ingress(d, packet);

    auto f = pool_->try_alloc();
    if (!f) {
        c_.dropped_pool.fetch_add(1, std::memory_order_relaxed);
        if (ledger_) ledger_->mark_complete(d.trace_id);
        return IngressStatus::DroppedPoolExhausted;
    }
    d.frame = *f;
    // Emulated DMA: the NIC writes the packet straight into the shared frame.
    std::memcpy(pool_->frame(d.frame).data(), packet.data(), packet.size());
    c_.dma_writes.fetch_add(1, std::memory_order_relaxed);
    c_.ingressed.fetch_add(1, std::memory_order_relaxed);
    if (!nic_rx_->enqueue(d)) {
        release(d, c_.dropped_ring);
        return IngressStatus::DroppedRingFull;
    }
    return IngressStatus::Ok;
}

bool L2L3Plane::route_one(PacketDescriptor d) {
    const auto next = routes_.next(d.src_fn);
    if (!next) {
        release(d, c_.dropped_route);
        return false;
    }
    if (*next == kEgress) {
        d.dst_fn = kEgress;
        if (!egress_ring_->enqueue(d)) {
            release(d, c_.dropped_ring);
            return false;
        }
        return true;
    }
    if (!filter_->allows(d.src_fn, *next)) {
        release(d, c_.dropped_filter);
        return false;
    }
    Nf* nf = find_nf(*next);
    if (!nf) {
        release(d, c_.dropped_route);
        return false;
    }
    d.dst_fn = *next;
    ++d.hops;
    if (!nf->rings->rx.enqueue(d)) {
        release(d, c_.dropped_ring);
        return false;
    }
    c_.forwarded.fetch_add(1, std::memory_order_relaxed);
    return true;
}

std::size_t L2L3Plane::route_step() {
    std::vector<PacketDescriptor> buf(config_.burst);
    std::size_t moved = 0;
    std::size_t n = nic_rx_->dequeue_burst(buf);
    for (std::size_t i = 0; i < n; ++i) route_one(buf[i]);
    moved += n;
    for (auto& nf : nfs_) {
        n = nf->rings->tx.dequeue_burst(buf);
        c_.drained.fetch_add(n, std::memory_order_relaxed);
        for (std::size_t i = 0; i < n; ++i) route_one(buf[i]);
        moved += n;
    }
    return moved;
}

std::size_t L2L3Plane::nf_step(FnId id) {
    Nf* nf = find_nf(id);
    if (!nf || !nf->rings) throw Error(Errc::UnknownFunction, id.str());
    std::vector<PacketDescriptor> buf(config_.burst);
    const std::size_t n = nf->rings->rx.dequeue_burst(buf);
    for (std::size_t i = 0; i < n; ++i) {
        auto& d = buf[i];
        if (!nf->handler->handle(d, *pool_)) {
            release(d, c_.dropped_handler);
            continue;
        }
        d.src_fn = nf->id;
        d.dst_fn = kManager;
        ++d.hops;
        if (!nf->rings->tx.enqueue(d)) release(d, c_.dropped_ring);
    }
    return n;
}

void L2L3Plane::polling_nf_loop(Nf& nf) {
    while (!stopping_.load(std::memory_order_relaxed))
        if (!nf_step(nf.id)) std::this_thread::yield();
}

std::size_t L2L3Plane::egress_step() {
    std::size_t moved = 0;
    if (sink_retry_) {
        const auto d = *sink_retry_;
        sink_retry_.reset();
        if (transmit(d)) {
            finish(d);
            pool_->free(d.frame);
        } else {
            release(d, c_.dropped_sink);
        }
        ++moved;
    }
    std::vector<PacketDescriptor> buf(config_.burst);
    const std::size_t n = egress_ring_->dequeue_burst(buf);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& d = buf[i];
        if (transmit(d)) {
            finish(d);
            pool_->free(d.frame);
        } else if (!sink_retry_) {
            sink_retry_ = d;
        } else {
            release(d, c_.dropped_sink);
        }
    }
    return moved + n;
}

void L2L3Plane::drain() {
    if (config_.mode != PlaneMode::Polling || threaded_)
        throw Error(Errc::InvalidConfig, "manual stepping needs an unthreaded polling plane");
    for (;;) {
        std::size_t moved = route_step();
        for (auto& nf : nfs_) moved += nf_step(nf->id);
        moved += egress_step();
        if (!moved) return;
    }
}

// Event mode.

IngressStatus L2L3Plane::event_ingress(PacketDescriptor d, std::span<const std::uint8_t> packet) {
    auto slot = xsk_->fill.dequeue();
    if (!slot) {
        c_.dropped_pool.fetch_add(1, std::memory_order_relaxed);
        if (ledger_) ledger_->mark_complete(d.trace_id);
        fill_low_.store(true, std::memory_order_release);
        completion_latch_->notify();
        return IngressStatus::DroppedPoolExhausted;
    }
    d.frame = slot->frame;
    std::memcpy(pool_->frame(d.frame).data(), packet.data(), packet.size());
    c_.dma_writes.fetch_add(1, std::memory_order_relaxed);
    c_.ingressed.fetch_add(1, std::memory_order_relaxed);
    d.dst_fn = kKernel;
    // NIC receive interrupt into the kernel-side redirect context.
    if (kernel_ep_->push(d, kStepIngress, ledger_) != EventEndpoint::Push::Ok) {
        release(d, c_.dropped_ring);
        return IngressStatus::DroppedRingFull;
    }
    return IngressStatus::Ok;
}

void L2L3Plane::kernel_loop() {
    no_wakeup_preemption();
    try {
        for (;;) {
            for (auto& d : kernel_ep_->recv_batch(config_.batch)) {
                if (!xsk_->rx.enqueue(d)) {
                    release(d, c_.dropped_ring);
                    continue;
                }
                rx_latch_->notify(d.trace_id, kStepIngress, ledger_);
            }
        }
    } catch (const Error& e) {
        if (e.code() != Errc::Closed) throw;
    }
}

void L2L3Plane::manager_rx_loop() {
    no_wakeup_preemption();
    std::vector<PacketDescriptor> buf(config_.batch.max_batch);
    while (rx_latch_->wait([this] { return !xsk_->rx.empty(); })) {
        const std::size_t n = xsk_->rx.dequeue_burst(buf);
        for (std::size_t i = 0; i < n; ++i) {
            auto d = buf[i];
            d.src_fn = kIngress;
            event_forward(d);
        }
    }
}

void L2L3Plane::count_send_failure(SendStatus s) {
    switch (s) {
        case SendStatus::Ok: break;
        case SendStatus::Filtered: c_.dropped_filter.fetch_add(1, std::memory_order_relaxed); break;
        case SendStatus::InboxFull: c_.dropped_ring.fetch_add(1, std::memory_order_relaxed); break;
        case SendStatus::UnknownDestination:
        case SendStatus::Closed: c_.dropped_route.fetch_add(1, std::memory_order_relaxed); break;
    }
}

void L2L3Plane::event_forward(PacketDescriptor d) {
    const auto next = routes_.next(d.src_fn);
    if (!next) {
        release(d, c_.dropped_route);
        return;
    }
    // Egress belongs to the router context; an empty chain still passes it.
    d.dst_fn = *next == kEgress ? kManager : *next;
    const Step step = chain_step(d.hops);
    ++d.hops;
    const auto s = sockets_->send(d, step);
    if (s == SendStatus::Ok) {
        if (*next != kEgress) c_.forwarded.fetch_add(1, std::memory_order_relaxed);
    } else {
        count_send_failure(s);
    }
}

void L2L3Plane::event_egress(const PacketDescriptor& d) {
    if (!xsk_->tx.enqueue(d)) {
        release(d, c_.dropped_ring);
        return;
    }
    // The NIC transmits from the TX ring and reports through Completion.
    auto tx = xsk_->tx.dequeue();
    if (!transmit(*tx) && !transmit(*tx)) {
        release(*tx, c_.dropped_sink);
        return;
    }
    finish(*tx);
    if (!xsk_->completion.enqueue(*tx)) pool_->free(tx->frame);
    completion_latch_->notify(tx->trace_id, kStepEgress, ledger_);
}

void L2L3Plane::router_loop() {
    no_wakeup_preemption();
    try {
        for (;;) {
            for (auto& d : router_ep_->recv_batch(config_.batch)) {
                c_.drained.fetch_add(1, std::memory_order_relaxed);
                const auto next = routes_.next(d.src_fn);
                if (next && *next == kEgress)
                    event_egress(d);
                else
                    event_forward(d);
            }
        }
    } catch (const Error& e) {
        if (e.code() != Errc::Closed) throw;
    }
}

void L2L3Plane::replenish_fill() {
    while (xsk_->fill.size() < xsk_->fill.capacity()) {
        auto f = pool_->try_alloc();
        if (!f) break;
        PacketDescriptor d;
        d.frame = *f;
        xsk_->fill.enqueue(d);
    }
}

void L2L3Plane::coordinator_loop() {
    no_wakeup_preemption();
    auto ready = [this] { return !xsk_->completion.empty() || fill_low_.load(std::memory_order_acquire); };
    while (completion_latch_->wait(ready)) {
        try {
            xsk_cycle(*xsk_);
        } catch (const Error& e) {
            if (e.code() != Errc::FillFull) throw;
            // Fill is full: the surplus completions go back to the pool.
            while (auto d = xsk_->completion.dequeue()) pool_->free(d->frame);
        }
        if (fill_low_.exchange(false, std::memory_order_acq_rel)) replenish_fill();
    }
}

void L2L3Plane::event_nf_loop(Nf& nf) {
    no_wakeup_preemption();
    try {
        for (;;) {
            for (auto& d : nf.ep->recv_batch(config_.batch)) {
                if (!nf.handler->handle(d, *pool_)) {
                    release(d, c_.dropped_handler);
                    continue;
                }
                d.src_fn = nf.id;
                d.dst_fn = kManager;
                const Step step = chain_step(d.hops);
                ++d.hops;
                count_send_failure(sockets_->send(d, step));
            }
        }
    } catch (const Error& e) {
        if (e.code() != Errc::Closed) throw;
    }
}

std::uint64_t L2L3Plane::in_flight() const noexcept {
    const auto done = c_.egressed.load() + c_.dropped_ring.load() + c_.dropped_filter.load() +
                      c_.dropped_handler.load() + c_.dropped_sink.load() + c_.dropped_route.load();
    const auto in = c_.ingressed.load();
    return in > done ? in - done : 0;
}

bool L2L3Plane::wait_quiescent(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    auto parked = [this] {
        if (config_.mode != PlaneMode::Event || !started_) return true;
        if (!kernel_ep_->blocked() || !rx_latch_->blocked() || !router_ep_->blocked() || !completion_latch_->blocked())
            return false;
        for (auto& nf : nfs_)
            if (!nf->ep->blocked()) return false;
        return true;
    };
    while (std::chrono::steady_clock::now() < deadline) {
        if (in_flight() == 0 && parked()) return true;
        std::this_thread::sleep_for(std::chrono::microseconds(50));
    }
    return false;
}

PlaneCounters L2L3Plane::counters() const {
    PlaneCounters p;
    p.offered = c_.offered;
    p.ingressed = c_.ingressed;
    p.egressed = c_.egressed;
    p.forwarded = c_.forwarded;
    p.drained = c_.drained;
    p.dropped_pool = c_.dropped_pool;
    p.dropped_ring = c_.dropped_ring;
    p.dropped_filter = c_.dropped_filter;
    p.dropped_handler = c_.dropped_handler;
    p.dropped_sink = c_.dropped_sink;
    p.dropped_route = c_.dropped_route;
    p.dropped_oversize = c_.dropped_oversize;
    p.dma_writes = c_.dma_writes;
    return p;
}

std::vector<ContextInfo> L2L3Plane::contexts() const {
    std::vector<ContextInfo> out;
    for (const auto& [name, t] : threads_) out.push_back({name, const_cast<std::thread&>(t).native_handle()});
    return out;
}

std::uint64_t L2L3Plane::processed_by(FnId id) const {
    auto* nf = find_nf(id);
    return nf ? nf->handler->processed() : 0;
}

}  // namespace sfc
