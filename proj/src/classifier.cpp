#include "sfc/classifier.hpp"

#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cmath>

#include "sfc/error.hpp"
#include "sfc/http.hpp"

namespace sfc {

std::string_view to_string(PlaneTarget t) noexcept { return t == PlaneTarget::L2L3 ? "l2l3" : "l4l7"; }

PlaneTarget parse_target(std::string_view text) {
    if (text == "l2l3" || text == "L2L3") return PlaneTarget::L2L3;
    if (text == "l4l7" || text == "L4L7") return PlaneTarget::L4L7;
    throw Error(Errc::SyntaxError, "unknown plane '" + std::string(text) + "'");
}

Ipv4Prefix Ipv4Prefix::parse(std::string_view text) {
    if (text == "*" || text.empty()) return {};
    Ipv4Prefix p;
    p.length = 32;
    if (auto slash = text.find('/'); slash != std::string_view::npos) {
        auto len = text.substr(slash + 1);
        unsigned v = 0;
        auto [end, ec] = std::from_chars(len.data(), len.data() + len.size(), v);
        if (ec != std::errc{} || end != len.data() + len.size() || v > 32)
            throw Error(Errc::SyntaxError, "bad prefix length in '" + std::string(text) + "'");
        p.length = static_cast<std::uint8_t>(v);
        text = text.substr(0, slash);
    }
    p.addr = Ipv4::parse(text);
    return p;
}

bool Ipv4Prefix::matches(Ipv4 ip) const noexcept {
    if (length == 0) return true;
    const std::uint32_t mask = length == 32 ? 0xffffffffu : ~(0xffffffffu >> length);
    return (ip.value & mask) == (addr.value & mask);
}

std::string Ipv4Prefix::str() const {
    if (length == 0) return "*";
    return length == 32 ? addr.str() : addr.str() + "/" + std::to_string(length);
}

bool FlowPattern::matches(const FlowKey& k) const noexcept {
    return src_ip.matches(k.src_ip) && dst_ip.matches(k.dst_ip) && (!src_port || *src_port == k.src_port) &&
           (!dst_port || *dst_port == k.dst_port) && (!protocol || *protocol == k.protocol);
}

std::string FlowPattern::str() const {
    auto port = [](const std::optional<std::uint16_t>& p) { return p ? std::to_string(*p) : std::string("*"); };
    return (protocol ? std::string(to_string(*protocol)) : std::string("*")) + ' ' + src_ip.str() + ':' +
           port(src_port) + " -> " + dst_ip.str() + ':' + port(dst_port);
}

void ClassifierTable::add_rule(const BifurcationRule& rule) {
    std::unique_lock lock(mu_);
    if (rules_.contains(rule.priority))
        throw Error(Errc::DuplicatePriority, "priority " + std::to_string(rule.priority) + " already in use");
    rules_.emplace(rule.priority, rule);
}

bool ClassifierTable::remove_rule(std::int32_t priority) {
    std::unique_lock lock(mu_);
    return rules_.erase(priority) > 0;
}

void ClassifierTable::clear() {
    std::unique_lock lock(mu_);
    rules_.clear();
}

std::optional<BifurcationRule> ClassifierTable::match(const FlowKey& key) const {
    std::shared_lock lock(mu_);
    for (const auto& [prio, r] : rules_)
        if (r.match.matches(key)) return r;
    return std::nullopt;
}

PlaneTarget ClassifierTable::classify(const FlowKey& key) const {
    auto r = match(key);
    return r ? r->target : kDefaultTarget;
}

std::vector<BifurcationRule> ClassifierTable::rules() const {
    std::shared_lock lock(mu_);
    std::vector<BifurcationRule> out;
    for (const auto& [prio, r] : rules_) out.push_back(r);
    return out;
}

namespace {

double mono_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

bool write_all(int fd, std::span<const std::uint8_t> data) {
    while (!data.empty()) {
        const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n > 0) {
            data = data.subspan(static_cast<std::size_t>(n));
            continue;
        }
        if (n < 0 && errno == EINTR) continue;
        return false;
    }
    return true;
}

}  // namespace

LinkShaper::LinkShaper(double rate_per_s, double burst) : rate_(rate_per_s), burst_(burst), tokens_(burst) {
    if (!(rate_per_s > 0) || !(burst >= 1)) throw Error(Errc::InvalidConfig, "shaper needs rate > 0 and burst >= 1");
}

void LinkShaper::refill_locked(double now_s) {
    if (last_s_ >= 0 && now_s > last_s_) tokens_ = std::min(burst_, tokens_ + (now_s - last_s_) * rate_);
    if (now_s > last_s_) last_s_ = now_s;
}

bool LinkShaper::try_consume_at(double n, double now_s) {
    std::lock_guard lock(mu_);
    refill_locked(now_s);
    if (tokens_ < n) return false;
    tokens_ -= n;
    return true;
}

bool LinkShaper::try_consume(double n) { return try_consume_at(n, mono_seconds()); }

bool LinkShaper::consume(double n, std::chrono::nanoseconds max_wait) {
    double wait_s;
    {
        std::lock_guard lock(mu_);
        refill_locked(mono_seconds());
        wait_s = std::max(0.0, (n - tokens_) / rate_);
        if (wait_s > std::chrono::duration<double>(max_wait).count()) return false;
        // Reserve now: the bucket goes into debt and try_consume() callers
        // wait behind this request.
        tokens_ -= n;
    }
    if (wait_s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
    return true;
}

HandoffAdapter::HandoffAdapter(const SocketAddress& broker, std::size_t payload_offset, AuditLedger* ledger)
    : offset_(payload_offset), ledger_(ledger) {
    fd_ = connect_tcp(broker);
    if (fd_ < 0) throw Error(Errc::IoError, "cannot reach broker at " + broker.str());
    reader_ = std::thread([this] { reader(); });
}

HandoffAdapter::~HandoffAdapter() {
    stopping_ = true;
    ::shutdown(fd_, SHUT_RDWR);
    if (reader_.joinable()) reader_.join();
    ::close(fd_);
}

CostVector HandoffAdapter::handoff_cost() {
    CostVector c;
    c[Category::Copies] = 1;
    c[Category::Interrupts] = 2;
    c[Category::ContextSwitches] = 1;
    return c;
}

bool HandoffAdapter::handoff(const PacketDescriptor& d, std::span<const std::uint8_t> packet) {
    if (packet.size() <= offset_) return false;
    if (!write_all(fd_, packet.subspan(offset_))) return false;
    if (ledger_) ledger_->record(d.trace_id, kStepHandoff, handoff_cost());
    handed_.fetch_add(1, std::memory_order_relaxed);
    return true;
}

PacketSink HandoffAdapter::sink() {
    return [this](const PacketDescriptor& d, std::span<const std::uint8_t> p) { return handoff(d, p); };
}

void HandoffAdapter::reader() {
    std::string buf;
    char chunk[16384];
    while (!stopping_.load(std::memory_order_relaxed)) {
        const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
        if (n <= 0) {
            if (n < 0 && errno == EINTR) continue;
            return;
        }
        buf.append(chunk, static_cast<std::size_t>(n));
        for (;;) {
            auto r = parse_response(buf);
            if (r.status != ParseStatus::Complete) break;
            buf.erase(0, r.consumed);
            responses_.fetch_add(1, std::memory_order_relaxed);
        }
    }
}

bool HandoffAdapter::wait_responses(std::uint64_t n, std::chrono::milliseconds timeout) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (responses() < n) {
        if (std::chrono::steady_clock::now() >= deadline) return false;
        std::this_thread::sleep_for(std::chrono::microseconds(200));
    }
    return true;
}

void HairpinRouter::set_side(HairpinLabel label, PacketSink sink) {
    std::unique_lock lock(mu_);
    sides_[label] = std::move(sink);
}

PacketSink HairpinRouter::sink() {
    return [this](const PacketDescriptor& d, std::span<const std::uint8_t> p) {
        PacketSink s;
        {
            std::shared_lock lock(mu_);
            auto it = sides_.find(d.origin);
            if (it != sides_.end()) s = it->second;
        }
        if (!s) {
            unrouted_.fetch_add(1, std::memory_order_relaxed);
            return true;  // consumed: no side to return to
        }
        return s(d, p);
    };
}

Dispatcher::Dispatcher(std::shared_ptr<ClassifierTable> table, L2L3Plane* l2l3, Broker* l4l7)
    : table_(std::move(table)), l2l3_(l2l3), l4l7_(l4l7) {}

Dispatcher::~Dispatcher() = default;

DispatchStatus Dispatcher::dispatch(std::span<const std::uint8_t> packet, const FlowKey& key,
                                    std::uint64_t trace_id) {
    const auto rule = table_->match(key);
    const auto target = rule ? rule->target : ClassifierTable::kDefaultTarget;
    const HairpinLabel label = rule ? rule->hairpin : 0;
    if (target == PlaneTarget::L2L3) {
        if (!l2l3_ || !l2l3_->running()) throw Error(Errc::PlaneUnavailable, "l2l3 plane is not running");
        to_l2l3_.fetch_add(1, std::memory_order_relaxed);
        return l2l3_->ingress(packet, key, trace_id, label) == IngressStatus::Ok ? DispatchStatus::ToL2L3
                                                                                  : DispatchStatus::Dropped;
    }
    if (!l4l7_ || !l4l7_->running()) throw Error(Errc::PlaneUnavailable, "l4l7 plane is not running");
    to_l4l7_.fetch_add(1, std::memory_order_relaxed);
    std::lock_guard lock(conn_mu_);
    try {
        if (!l4l7_conn_) l4l7_conn_ = std::make_unique<HttpConnection>(l4l7_->address());
        auto out = l4l7_conn_->exchange_raw(
            std::string_view(reinterpret_cast<const char*>(packet.data()), packet.size()), std::chrono::seconds(5));
        if (parse_response(out).status == ParseStatus::Complete) return DispatchStatus::ToL4L7;
    } catch (const Error&) {
    }
    l4l7_conn_.reset();
    return DispatchStatus::Dropped;
}

std::optional<SocketAddress> Dispatcher::connection_target(const FlowKey& key) const {
    if (table_->classify(key) == PlaneTarget::L2L3) {
        if (!l2l3_ || !l2l3_->running()) throw Error(Errc::PlaneUnavailable, "l2l3 plane is not running");
        return std::nullopt;
    }
    if (!l4l7_ || !l4l7_->running()) throw Error(Errc::PlaneUnavailable, "l4l7 plane is not running");
    return l4l7_->address();
}

}  // namespace sfc
