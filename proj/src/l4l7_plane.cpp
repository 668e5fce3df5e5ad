#include "sfc/l4l7_plane.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <pthread.h>
#include <sched.h>
#include <sys/epoll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>

#include "sfc/error.hpp"

namespace sfc {

namespace {

enum Tag : std::uint64_t { kTagListen = 0, kTagControl = 1, kTagClient = 2, kTagUpstream = 3 };

std::uint64_t tag(Tag t, std::uint64_t id) { return (static_cast<std::uint64_t>(t) << 62) | id; }
Tag tag_kind(std::uint64_t v) { return static_cast<Tag>(v >> 62); }
std::uint64_t tag_id(std::uint64_t v) { return v & ((1ULL << 62) - 1); }

void no_wakeup_preemption() {
    sched_param p{};
    pthread_setschedparam(pthread_self(), SCHED_BATCH, &p);
}

sockaddr_in to_sockaddr(const SocketAddress& a) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(a.port);
    if (::inet_pton(AF_INET, a.host.c_str(), &sa.sin_addr) != 1)
        throw Error(Errc::InvalidConfig, "not an IPv4 address: " + a.host);
    return sa;
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

/// Writes everything, waiting for buffer space up to `timeout_ms` per stall.
bool send_all(int fd, std::string_view data, int timeout_ms = 2000) {
    while (!data.empty()) {
        const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
        if (n > 0) {
            data.remove_prefix(static_cast<std::size_t>(n));
            continue;
        }
        if (n < 0 && errno == EINTR) continue;
        if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
            pollfd p{fd, POLLOUT, 0};
            if (::poll(&p, 1, timeout_ms) <= 0) return false;
            continue;
        }
        return false;
    }
    return true;
}

/// Reads what is available. Returns false on EOF or a hard error.
bool read_available(int fd, std::string& into) {
    char buf[16384];
    for (;;) {
        const ssize_t n = ::recv(fd, buf, sizeof buf, MSG_DONTWAIT);
        if (n > 0) {
            into.append(buf, static_cast<std::size_t>(n));
            continue;
        }
        if (n == 0) return false;
        if (errno == EINTR) continue;
        return errno == EAGAIN || errno == EWOULDBLOCK;
    }
}

HttpResponse error_response(int status, std::string_view reason) {
    HttpResponse r;
    r.status = status;
    r.reason = reason;
    r.headers = {{"Content-Type", "text/plain"}};
    r.body = std::string(reason) + "\n";
    return r;
}

bool wants_close(const HttpResponse& r) {
    auto c = r.header("connection");
    return c && iequals(*c, "close");
}

}  // namespace

SocketAddress SocketAddress::parse(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0) throw Error(Errc::InvalidConfig, "expected host:port");
    SocketAddress a;
    a.host = std::string(text.substr(0, colon));
    auto p = text.substr(colon + 1);
    unsigned v = 0;
    auto [end, ec] = std::from_chars(p.data(), p.data() + p.size(), v);
    if (ec != std::errc{} || end != p.data() + p.size() || v > 65535)
        throw Error(Errc::InvalidConfig, "bad port in '" + std::string(text) + "'");
    a.port = static_cast<std::uint16_t>(v);
    to_sockaddr(a);
    return a;
}

int connect_tcp(const SocketAddress& a) {
    auto sa = to_sockaddr(a);
    int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) return -1;
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
        ::close(fd);
        return -1;
    }
    set_nodelay(fd);
    return fd;
}

std::string SocketAddress::str() const { return host + ":" + std::to_string(port); }

void BrokerConfig::validate() const {
    if (upstreams.empty()) throw Error(Errc::InvalidConfig, "broker needs at least one upstream");
    pool.validate();
}

CostVector broker_ingress_cost() {
    CostVector c;
    c[Category::Copies] = 2;
    c[Category::Interrupts] = 2;
    c[Category::ContextSwitches] = 1;
    c[Category::ProtocolTasks] = 1;
    c[Category::SerdeTasks] = 1;
    return c;
}

CostVector broker_egress_cost() {
    CostVector c;
    c[Category::Copies] = 2;
    c[Category::Interrupts] = 1;
    c[Category::ContextSwitches] = 1;
    c[Category::ProtocolTasks] = 1;
    c[Category::SerdeTasks] = 1;
    return c;
}

struct Broker::Mf {
    Mf(FnId id, std::unique_ptr<Handler> h) : id(id), handler(std::move(h)) {}
    FnId id;
    std::unique_ptr<Handler> handler;
    std::unique_ptr<RingPair> rings;
    std::shared_ptr<EventEndpoint> ep;
};

struct Broker::ClientConn {
    int fd = -1;
    std::string in;
    bool busy = false;  // a request is in the chain or upstream
    bool stalled = false;
};

struct Broker::UpstreamConn {
    int fd = -1;
    std::size_t backend = 0;
    std::uint64_t client = 0;
    std::uint64_t trace = 0;
    std::string request;  // kept for one resend on a stale pooled connection
    std::string in;
    bool retried = false;
    bool stalled = false;
};

struct Broker::Task {
    enum Kind { Upstream, Error } kind = Upstream;
    int fd = -1;
    std::size_t backend = 0;
    std::uint64_t trace = 0;
    int status = 0;
    std::string reason;
    std::string request;
};

struct Broker::Counters {
    std::atomic<std::uint64_t> connections{0}, requests{0}, egressed{0}, responses{0}, error_responses{0},
        parse_errors{0}, upstream_errors{0}, stalls{0}, forwarded{0}, dropped_filter{0}, dropped_handler{0},
        dropped_ring{0}, dropped_route{0};
};

Broker::Broker(BrokerConfig config)
    : config_(std::move(config)),
      ledger_(config_.ledger),
      filter_(std::make_shared<FilterTable>(config_.filter_default)),
      c_(std::make_unique<Counters>()) {
    config_.validate();
    pool_ = FramePool::create(config_.pool);
    idle_upstreams_.resize(config_.upstreams.size());
}

Broker::~Broker() { stop(); }

void Broker::check_not_started() const {
    if (started_) throw Error(Errc::ModeChangeAfterStart, "broker already started");
}

void Broker::set_mode(PlaneMode mode) {
    check_not_started();
    config_.mode = mode;
}

void Broker::register_mf(FnId id, std::unique_ptr<Handler> handler) {
    check_not_started();
    routes_.add_function(id);
    mfs_.push_back(std::make_unique<Mf>(id, std::move(handler)));
    mf_index_[id] = mfs_.back().get();
}

void Broker::set_route(FnId from, FnId to) { routes_.set_route(from, to); }

void Broker::set_filter(FnId src, FnId dst, Verdict v) {
    for (FnId f : {src, dst})
        if (!f.is_infrastructure() && !routes_.has_function(f)) throw Error(Errc::UnknownFunction, f.str());
    filter_->set(src, dst, v);
}

Broker::Mf* Broker::find_mf(FnId id) const {
    auto it = mf_index_.find(id);
    return it == mf_index_.end() ? nullptr : it->second;
}

SocketAddress Broker::address() const { return bound_; }

void Broker::start() {
    check_not_started();
    auto sa = to_sockaddr(config_.listen);
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (listen_fd_ < 0) throw Error(Errc::IoError, "socket failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0 || ::listen(listen_fd_, 512) != 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw Error(Errc::IoError, "cannot listen on " + config_.listen.str() + ": " + std::strerror(errno));
    }
    socklen_t len = sizeof sa;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    bound_ = config_.listen;
    bound_.port = ntohs(sa.sin_port);

    epoll_fd_ = ::epoll_create1(EPOLL_CLOEXEC);
    control_fd_ = ::eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK);
    epoll_event ev{};
    ev.events = EPOLLIN;
    ev.data.u64 = tag(kTagListen, 0);
    ::epoll_ctl(epoll_fd_, EPOLL_CTL_ADD, listen_fd_, &ev);
    ev.data.u64 = tag(kTagControl, 0);
    ::epoll_ctl(epoll_fd_, EPOLL_CTL_ADD, control_fd_, &ev);

    stopping_ = false;
    started_ = true;
    if (config_.mode == PlaneMode::Polling) {
        egress_ring_ = std::make_unique<DescriptorRing>(config_.ring_capacity);
        for (auto& mf : mfs_) mf->rings = std::make_unique<RingPair>(config_.ring_capacity);
        threads_.emplace_back("rx-poll", std::thread([this] { net_loop(); }));
        threads_.emplace_back("tx-poll", std::thread([this] { tx_poll_loop(); }));
        for (auto& mf : mfs_) {
            Mf* p = mf.get();
            threads_.emplace_back(p->id.str(), std::thread([this, p] { polling_mf_loop(*p); }));
        }
        return;
    }
    sockets_ = std::make_unique<SocketMap>(pool_, filter_, ledger_);
    const EndpointOptions opts{.inbox_capacity = config_.inbox_capacity};
    router_ep_ = sockets_->register_fn(kManager, opts);
    for (auto& mf : mfs_) mf->ep = sockets_->register_fn(mf->id, opts);
    threads_.emplace_back("net", std::thread([this] { net_loop(); }));
    threads_.emplace_back("router", std::thread([this] { router_loop(); }));
    for (auto& mf : mfs_) {
        Mf* p = mf.get();
        threads_.emplace_back(p->id.str(), std::thread([this, p] { event_mf_loop(*p); }));
    }
}

void Broker::stop() {
    if (!started_) return;
    stopping_ = true;
    const std::uint64_t one = 1;
    [[maybe_unused]] auto rc = ::write(control_fd_, &one, sizeof one);
    if (router_ep_) router_ep_->close();
    for (auto& mf : mfs_)
        if (mf->ep) mf->ep->close();
    for (auto& [name, t] : threads_)
        if (t.joinable()) t.join();
    threads_.clear();

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
    drain_ring(egress_ring_.get());
    for (auto& mf : mfs_) {
        if (mf->rings) {
            drain_ring(&mf->rings->rx);
            drain_ring(&mf->rings->tx);
        }
        drain_ep(mf->ep);
        mf->ep.reset();
        mf->rings.reset();
    }
    drain_ep(router_ep_);
    router_ep_.reset();
    sockets_.reset();
    egress_ring_.reset();

    for (auto& [id, c] : clients_) ::close(c->fd);
    clients_.clear();
    for (auto& [id, u] : upstream_conns_) ::close(u->fd);
    upstream_conns_.clear();
    for (auto& list : idle_upstreams_) {
        for (int fd : list) ::close(fd);
        list.clear();
    }
    for (auto& t : tasks_)
        if (t.fd >= 0) ::close(t.fd);
    tasks_.clear();
    stalled_.clear();
    {
        std::lock_guard lock(pending_mu_);
        for (auto& [trace, p] : pending_)
            if (ledger_) ledger_->mark_complete(trace);
        pending_.clear();
    }
    ::close(listen_fd_);
    ::close(epoll_fd_);
    ::close(control_fd_);
    listen_fd_ = epoll_fd_ = control_fd_ = -1;
    started_ = false;
}

// Network context.

void Broker::net_loop() {
    const bool polling = config_.mode == PlaneMode::Polling;
    if (!polling) no_wakeup_preemption();
    epoll_event evs[64];
    while (!stopping_.load(std::memory_order_relaxed)) {
        const int timeout = polling ? 0 : (stalled_.empty() ? -1 : 1);
        const int n = ::epoll_wait(epoll_fd_, evs, 64, timeout);
        for (int i = 0; i < n; ++i) {
            const auto v = evs[i].data.u64;
            switch (tag_kind(v)) {
                case kTagListen: accept_all(); break;
                case kTagControl: {
                    std::uint64_t x;
                    [[maybe_unused]] auto rc = ::read(control_fd_, &x, sizeof x);
                    break;
                }
                case kTagClient: on_client_readable(tag_id(v)); break;
                case kTagUpstream: on_upstream_readable(tag_id(v)); break;
            }
        }
        run_tasks();
        if (!stalled_.empty()) {
            auto retry = std::exchange(stalled_, {});
            for (auto id : retry) {
                if (id & kResponseTraceBit) {
                    auto it = upstream_conns_.find(id & ~kResponseTraceBit);
                    if (it != upstream_conns_.end()) {
                        it->second->stalled = false;
                        on_upstream_readable(it->first);
                    }
                } else if (auto it = clients_.find(id); it != clients_.end()) {
                    it->second->stalled = false;
                    try_ingest(id);
                }
            }
        }
        if (polling) {
            const std::size_t moved = route_step();
            if (n <= 0 && moved == 0) std::this_thread::yield();
        }
    }
}

void Broker::accept_all() {
    for (;;) {
        int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0) return;
        set_nodelay(fd);
        const auto id = next_conn_++;
        auto c = std::make_unique<ClientConn>();
        c->fd = fd;
        epoll_event ev{};
        ev.events = EPOLLIN | EPOLLRDHUP;
        ev.data.u64 = tag(kTagClient, id);
        ::epoll_ctl(epoll_fd_, EPOLL_CTL_ADD, fd, &ev);
        clients_.emplace(id, std::move(c));
        c_->connections.fetch_add(1, std::memory_order_relaxed);
    }
}

void Broker::close_client(std::uint64_t id) {
    auto it = clients_.find(id);
    if (it == clients_.end()) return;
    ::epoll_ctl(epoll_fd_, EPOLL_CTL_DEL, it->second->fd, nullptr);
    ::close(it->second->fd);
    clients_.erase(it);
}

void Broker::on_client_readable(std::uint64_t id) {
    auto it = clients_.find(id);
    if (it == clients_.end()) return;
    auto& c = *it->second;
    if (c.stalled) return;
    if (!read_available(c.fd, c.in) && c.in.empty()) {
        close_client(id);
        return;
    }
    try_ingest(id);
}

void Broker::try_ingest(std::uint64_t id) {
    auto it = clients_.find(id);
    if (it == clients_.end()) return;
    auto& c = *it->second;
    if (c.busy || c.stalled || c.in.empty()) return;
    auto parsed = parse_request(c.in);
    if (parsed.status == ParseStatus::Incomplete) {
        if (c.in.size() > pool_->frame_size()) {
            respond_error(id, 413, "Payload Too Large");
            close_client(id);
        }
        return;
    }
    if (parsed.status == ParseStatus::Error) {
        c_->parse_errors.fetch_add(1, std::memory_order_relaxed);
        respond_error(id, 400, "Bad Request");
        close_client(id);
        return;
    }
    auto frame = pool_->try_alloc();
    if (!frame) {
        // Stop reading: the request stays in the socket buffer path.
        c.stalled = true;
        stalled_.push_back(id);
        c_->stalls.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    const auto used = store_request(pool_->frame(*frame), parsed.message, id);
    c.in.erase(0, parsed.consumed);
    if (!used) {
        pool_->free(*frame);
        respond_error(id, 413, "Payload Too Large");
        try_ingest(id);
        return;
    }
    c.busy = true;
    PacketDescriptor d;
    d.frame = *frame;
    d.length = static_cast<std::uint32_t>(*used);
    d.src_fn = kIngress;
    d.trace_id = next_trace_.fetch_add(1, std::memory_order_relaxed);
    d.t_ingress_ns = now_ns();
    {
        std::lock_guard lock(pending_mu_);
        pending_[d.trace_id] = {id, d.t_ingress_ns};
    }
    if (ledger_) ledger_->record(d.trace_id, kStepIngress, broker_ingress_cost());
    c_->requests.fetch_add(1, std::memory_order_relaxed);
    dispatch(d);
}

void Broker::respond_error(std::uint64_t conn, int status, std::string_view reason) {
    auto it = clients_.find(conn);
    if (it == clients_.end()) return;
    c_->error_responses.fetch_add(1, std::memory_order_relaxed);
    it->second->busy = false;
    if (!send_all(it->second->fd, serialize(error_response(status, reason)))) close_client(conn);
}

void Broker::post(Task t) {
    {
        std::lock_guard lock(task_mu_);
        tasks_.push_back(std::move(t));
    }
    const std::uint64_t one = 1;
    [[maybe_unused]] auto rc = ::write(control_fd_, &one, sizeof one);
}

void Broker::run_tasks() {
    std::vector<Task> work;
    {
        std::lock_guard lock(task_mu_);
        if (tasks_.empty()) return;
        work.swap(tasks_);
    }
    for (auto& t : work) {
        std::uint64_t conn = 0;
        bool known = false;
        {
            std::lock_guard lock(pending_mu_);
            if (auto it = pending_.find(t.trace); it != pending_.end()) {
                conn = it->second.conn;
                known = true;
                if (t.kind == Task::Error) pending_.erase(it);
            }
        }
        if (t.kind == Task::Error) {
            if (known) respond_error(conn, t.status, t.reason);
            try_ingest(conn);
            continue;
        }
        const auto id = next_conn_++;
        auto u = std::make_unique<UpstreamConn>();
        u->fd = t.fd;
        u->backend = t.backend;
        u->client = conn;
        u->trace = t.trace;
        u->request = std::move(t.request);
        epoll_event ev{};
        ev.events = EPOLLIN | EPOLLRDHUP;
        ev.data.u64 = tag(kTagUpstream, id);
        ::epoll_ctl(epoll_fd_, EPOLL_CTL_ADD, u->fd, &ev);
        upstream_conns_.emplace(id, std::move(u));
    }
}

void Broker::close_upstream(std::uint64_t id, bool reusable) {
    auto it = upstream_conns_.find(id);
    if (it == upstream_conns_.end()) return;
    auto& u = *it->second;
    ::epoll_ctl(epoll_fd_, EPOLL_CTL_DEL, u.fd, nullptr);
    if (reusable) {
        std::lock_guard lock(idle_mu_);
        idle_upstreams_[u.backend].push_back(u.fd);
    } else {
        ::close(u.fd);
    }
    upstream_conns_.erase(it);
}

void Broker::on_upstream_readable(std::uint64_t id) {
    auto it = upstream_conns_.find(id);
    if (it == upstream_conns_.end()) return;
    auto& u = *it->second;
    if (u.stalled) return;
    const bool open = read_available(u.fd, u.in);
    if (!u.in.empty()) {
        if (relay_response(u)) return;
        if (u.stalled) return;
    }
    if (open) return;
    // Peer closed before a full response.
    if (u.in.empty() && !u.retried) {
        // A pooled keep-alive connection went stale; resend once.
        ::epoll_ctl(epoll_fd_, EPOLL_CTL_DEL, u.fd, nullptr);
        ::close(u.fd);
        u.retried = true;
        u.fd = connect_upstream(u.backend);
        if (u.fd >= 0 && send_all(u.fd, u.request)) {
            epoll_event ev{};
            ev.events = EPOLLIN | EPOLLRDHUP;
            ev.data.u64 = tag(kTagUpstream, id);
            ::epoll_ctl(epoll_fd_, EPOLL_CTL_ADD, u.fd, &ev);
            return;
        }
        if (u.fd >= 0) ::close(u.fd);
        u.fd = -1;
    }
    c_->upstream_errors.fetch_add(1, std::memory_order_relaxed);
    const auto client = u.client;
    {
        std::lock_guard lock(pending_mu_);
        pending_.erase(u.trace);
    }
    if (u.fd >= 0) ::epoll_ctl(epoll_fd_, EPOLL_CTL_DEL, u.fd, nullptr);
    if (u.fd >= 0) ::close(u.fd);
    upstream_conns_.erase(it);
    respond_error(client, 502, "Bad Gateway");
    try_ingest(client);
}

bool Broker::relay_response(UpstreamConn& u) {
    auto parsed = parse_response(u.in);
    if (parsed.status == ParseStatus::Incomplete) return false;
    std::uint64_t uid = 0;
    for (auto& [k, v] : upstream_conns_)
        if (v.get() == &u) uid = k;
    const auto client = u.client;
    if (parsed.status == ParseStatus::Error) {
        c_->upstream_errors.fetch_add(1, std::memory_order_relaxed);
        {
            std::lock_guard lock(pending_mu_);
            pending_.erase(u.trace);
        }
        close_upstream(uid, false);
        respond_error(client, 502, "Bad Gateway");
        try_ingest(client);
        return true;
    }
    auto frame = pool_->try_alloc();
    if (!frame) {
        u.stalled = true;
        stalled_.push_back(uid | kResponseTraceBit);
        c_->stalls.fetch_add(1, std::memory_order_relaxed);
        return false;
    }
    const std::uint64_t rtrace = u.trace | kResponseTraceBit;
    if (ledger_) ledger_->record(rtrace, kStepIngress, broker_ingress_cost());
    const auto used = store_response(pool_->frame(*frame), parsed.message, client);
    u.in.erase(0, parsed.consumed);
    std::string wire;
    if (used) {
        render_stored(std::as_const(*pool_).frame(*frame), wire);
    } else {
        wire = serialize(error_response(502, "Bad Gateway"));
    }
    pool_->free(*frame);
    const bool reusable = !wants_close(parsed.message) && u.in.empty();
    const auto trace = u.trace;
    close_upstream(uid, reusable);

    Pending p{};
    {
        std::lock_guard lock(pending_mu_);
        if (auto it = pending_.find(trace); it != pending_.end()) p = it->second;
    }
    auto cit = clients_.find(client);
    if (cit != clients_.end()) {
        cit->second->busy = false;
        if (send_all(cit->second->fd, wire)) {
            if (ledger_) ledger_->record(rtrace, kStepEgress, broker_egress_cost());
            c_->responses.fetch_add(1, std::memory_order_relaxed);
            if (config_.record_latency) {
                std::lock_guard lock(latency_mu_);
                latency_.push_back({trace, p.t_ingress, now_ns(), config_.mode});
            }
        } else {
            close_client(client);
        }
    }
    if (ledger_) ledger_->mark_complete(rtrace);
    {
        // Erased last so in_flight() stays nonzero until the books are done.
        std::lock_guard lock(pending_mu_);
        pending_.erase(trace);
    }
    try_ingest(client);
    return true;
}

// Chain.

void Broker::drop(const PacketDescriptor& d, std::atomic<std::uint64_t>& reason, bool free_frame) {
    reason.fetch_add(1, std::memory_order_relaxed);
    if (free_frame && pool_->is_valid(d.frame)) pool_->free(d.frame);
    if (ledger_ && free_frame) ledger_->mark_complete(d.trace_id);
    const bool filtered = &reason == &c_->dropped_filter;
    post(Task{.kind = Task::Error,
              .trace = d.trace_id,
              .status = filtered ? 403 : 503,
              .reason = filtered ? "Forbidden" : "Service Unavailable"});
}

void Broker::dispatch(PacketDescriptor d) {
    if (config_.mode == PlaneMode::Polling)
        route_one(d);
    else
        event_forward(d);
}

bool Broker::route_one(PacketDescriptor d) {
    const auto next = routes_.next(d.src_fn);
    if (!next) {
        drop(d, c_->dropped_route);
        return false;
    }
    if (*next == kEgress) {
        d.dst_fn = kEgress;
        if (!egress_ring_->enqueue(d)) {
            drop(d, c_->dropped_ring);
            return false;
        }
        return true;
    }
    if (!filter_->allows(d.src_fn, *next)) {
        drop(d, c_->dropped_filter);
        return false;
    }
    Mf* mf = find_mf(*next);
    d.dst_fn = *next;
    ++d.hops;
    if (!mf || !mf->rings->rx.enqueue(d)) {
        drop(d, c_->dropped_ring);
        return false;
    }
    c_->forwarded.fetch_add(1, std::memory_order_relaxed);
    return true;
}

std::size_t Broker::route_step() {
    std::size_t moved = 0;
    for (auto& mf : mfs_) {
        while (auto d = mf->rings->tx.dequeue()) {
            route_one(*d);
            ++moved;
        }
    }
    return moved;
}

void Broker::polling_mf_loop(Mf& mf) {
    std::vector<PacketDescriptor> buf(config_.batch.max_batch);
    while (!stopping_.load(std::memory_order_relaxed)) {
        const std::size_t n = mf.rings->rx.dequeue_burst(buf);
        if (n == 0) {
            std::this_thread::yield();
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            auto d = buf[i];
            if (!mf.handler->handle(d, *pool_)) {
                drop(d, c_->dropped_handler);
                continue;
            }
            d.src_fn = mf.id;
            d.dst_fn = kManager;
            ++d.hops;
            while (!mf.rings->tx.enqueue(d)) {
                if (stopping_.load(std::memory_order_relaxed)) {
                    pool_->free(d.frame);
                    break;
                }
                std::this_thread::yield();
            }
        }
    }
}

void Broker::tx_poll_loop() {
    while (!stopping_.load(std::memory_order_relaxed)) {
        auto d = egress_ring_->dequeue();
        if (!d) {
            std::this_thread::yield();
            continue;
        }
        egress(*d);
    }
}

void Broker::count_send_failure(const PacketDescriptor& d, SendStatus s) {
    std::atomic<std::uint64_t>* reason = nullptr;
    switch (s) {
        case SendStatus::Ok: return;
        case SendStatus::Filtered: reason = &c_->dropped_filter; break;
        case SendStatus::InboxFull: reason = &c_->dropped_ring; break;
        case SendStatus::UnknownDestination:
        case SendStatus::Closed: reason = &c_->dropped_route; break;
    }
    // The socket map already released the frame and completed the trace.
    drop(d, *reason, false);
}

void Broker::event_forward(PacketDescriptor d) {
    const auto next = routes_.next(d.src_fn);
    if (!next) {
        drop(d, c_->dropped_route);
        return;
    }
    d.dst_fn = *next == kEgress ? kManager : *next;
    const Step step = chain_step(d.hops);
    ++d.hops;
    const auto s = sockets_->send(d, step);
    if (s == SendStatus::Ok) {
        if (*next != kEgress) c_->forwarded.fetch_add(1, std::memory_order_relaxed);
    } else {
        count_send_failure(d, s);
    }
}

void Broker::router_loop() {
    no_wakeup_preemption();
    try {
        for (;;) {
            for (auto& d : router_ep_->recv_batch(config_.batch)) {
                const auto next = routes_.next(d.src_fn);
                if (next && *next == kEgress)
                    egress(d);
                else
                    event_forward(d);
            }
        }
    } catch (const Error& e) {
        if (e.code() != Errc::Closed) throw;
    }
}

void Broker::event_mf_loop(Mf& mf) {
    no_wakeup_preemption();
    try {
        for (;;) {
            for (auto& d : mf.ep->recv_batch(config_.batch)) {
                if (!mf.handler->handle(d, *pool_)) {
                    drop(d, c_->dropped_handler);
                    continue;
                }
                d.src_fn = mf.id;
                d.dst_fn = kManager;
                const Step step = chain_step(d.hops);
                ++d.hops;
                count_send_failure(d, sockets_->send(d, step));
            }
        }
    } catch (const Error& e) {
        if (e.code() != Errc::Closed) throw;
    }
}

// Egress.

int Broker::connect_upstream(std::size_t backend) { return connect_tcp(config_.upstreams[backend]); }

int Broker::acquire_upstream(std::size_t backend) {
    for (;;) {
        int fd = -1;
        {
            std::lock_guard lock(idle_mu_);
            auto& list = idle_upstreams_[backend];
            if (list.empty()) break;
            fd = list.back();
            list.pop_back();
        }
        char b;
        const ssize_t n = ::recv(fd, &b, 1, MSG_PEEK | MSG_DONTWAIT);
        if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return fd;
        ::close(fd);
    }
    return connect_upstream(backend);
}

void Broker::egress(const PacketDescriptor& d) {
    const auto frame = std::as_const(*pool_).frame(d.frame);
    const auto* meta = meta_of(frame);
    std::size_t backend = 0;
    if (meta && meta->backend_choice >= 0)
        backend = static_cast<std::size_t>(meta->backend_choice);
    else
        backend = rr_.fetch_add(1, std::memory_order_relaxed) % config_.upstreams.size();
    std::string wire;
    if (meta) render_stored(frame, wire);
    pool_->free(d.frame);

    auto fail = [&] {
        c_->upstream_errors.fetch_add(1, std::memory_order_relaxed);
        if (ledger_) ledger_->mark_complete(d.trace_id);
        post(Task{.kind = Task::Error, .trace = d.trace_id, .status = 502, .reason = "Bad Gateway"});
    };
    if (!meta || backend >= config_.upstreams.size()) return fail();
    int fd = acquire_upstream(backend);
    if (fd >= 0 && !send_all(fd, wire)) {
        ::close(fd);
        fd = connect_upstream(backend);
        if (fd >= 0 && !send_all(fd, wire)) {
            ::close(fd);
            fd = -1;
        }
    }
    if (fd < 0) return fail();
    if (ledger_) {
        ledger_->record(d.trace_id, kStepEgress, broker_egress_cost());
        ledger_->mark_complete(d.trace_id);
    }
    c_->egressed.fetch_add(1, std::memory_order_relaxed);
    post(Task{.kind = Task::Upstream, .fd = fd, .backend = backend, .trace = d.trace_id, .request = std::move(wire)});
}

// Queries.

std::size_t Broker::in_flight() const {
    std::lock_guard lock(pending_mu_);
    return pending_.size();
}

bool Broker::wait_quiescent(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    auto parked = [this] {
        if (config_.mode != PlaneMode::Event || !started_) return true;
        if (!router_ep_->blocked()) return false;
        for (auto& mf : mfs_)
            if (!mf->ep->blocked()) return false;
        return true;
    };
    while (std::chrono::steady_clock::now() < deadline) {
        if (in_flight() == 0 && parked()) return true;
        std::this_thread::sleep_for(std::chrono::microseconds(50));
    }
    return false;
}

BrokerCounters Broker::counters() const {
    BrokerCounters b;
    b.connections = c_->connections;
    b.requests = c_->requests;
    b.egressed = c_->egressed;
    b.responses = c_->responses;
    b.error_responses = c_->error_responses;
    b.parse_errors = c_->parse_errors;
    b.upstream_errors = c_->upstream_errors;
    b.stalls = c_->stalls;
    b.forwarded = c_->forwarded;
    b.dropped_filter = c_->dropped_filter;
    b.dropped_handler = c_->dropped_handler;
    b.dropped_ring = c_->dropped_ring;
    b.dropped_route = c_->dropped_route;
    return b;
}

std::vector<LatencyRecord> Broker::latency_records() const {
    std::lock_guard lock(latency_mu_);
    return latency_;
}

std::vector<ContextInfo> Broker::contexts() const {
    std::vector<ContextInfo> out;
    for (const auto& [name, t] : threads_) out.push_back({name, const_cast<std::thread&>(t).native_handle()});
    return out;
}

std::uint64_t Broker::processed_by(FnId id) const {
    auto* mf = find_mf(id);
    return mf ? mf->handler->processed() : 0;
}

// Client side.

HttpConnection::HttpConnection(const SocketAddress& addr) {
    fd_ = connect_tcp(addr);
    if (fd_ < 0) throw Error(Errc::IoError, "cannot connect to " + addr.str() + ": " + std::strerror(errno));
}

HttpConnection::~HttpConnection() {
    if (fd_ >= 0) ::close(fd_);
}

HttpResponse HttpConnection::roundtrip(const HttpRequest& req, std::chrono::milliseconds timeout) {
    if (!send_all(fd_, serialize(req), static_cast<int>(timeout.count())))
        throw Error(Errc::IoError, "send failed");
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        auto r = parse_response(buf_);
        if (r.status == ParseStatus::Complete) {
            buf_.erase(0, r.consumed);
            return std::move(r.message);
        }
        if (r.status == ParseStatus::Error) throw Error(Errc::ParseError, r.error);
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) throw Error(Errc::Timeout, "no response within deadline");
        pollfd p{fd_, POLLIN, 0};
        const int rc = ::poll(&p, 1, static_cast<int>(left.count()));
        if (rc == 0) throw Error(Errc::Timeout, "no response within deadline");
        if (rc < 0 && errno != EINTR) throw Error(Errc::IoError, "poll failed");
        if (!read_available(fd_, buf_) && parse_response(buf_).status != ParseStatus::Complete)
            throw Error(Errc::IoError, "connection closed by peer");
    }
}

std::string HttpConnection::exchange_raw(std::string_view bytes, std::chrono::milliseconds timeout) {
    send_all(fd_, bytes);
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::string out;
    for (;;) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) return out;
        pollfd p{fd_, POLLIN, 0};
        if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) return out;
        if (!read_available(fd_, out)) return out;
        if (parse_response(out).status == ParseStatus::Complete) return out;
    }
}

HttpResponse http_roundtrip(const SocketAddress& addr, const HttpRequest& req, std::chrono::milliseconds timeout) {
    HttpConnection c(addr);
    return c.roundtrip(req, timeout);
}

}  // namespace sfc
