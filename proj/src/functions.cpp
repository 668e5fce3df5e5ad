#include "sfc/functions.hpp"

#include <charconv>
#include <cstdio>
#include <cstring>

#include "sfc/error.hpp"

namespace sfc {

namespace {

std::uint16_t load16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] << 8 | p[1]); }
void store16(std::uint8_t* p, std::uint16_t v) {
    p[0] = static_cast<std::uint8_t>(v >> 8);
    p[1] = static_cast<std::uint8_t>(v);
}

// One's-complement checksum update for a single 16-bit word change.
std::uint16_t csum_replace(std::uint16_t check, std::uint16_t old_word, std::uint16_t new_word) {
    std::uint32_t sum = static_cast<std::uint16_t>(~check);
    sum += static_cast<std::uint16_t>(~old_word);
    sum += new_word;
    sum = (sum & 0xffff) + (sum >> 16);
    sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

std::pair<std::string_view, std::string_view> split_arrow(std::string_view v) {
    auto pos = v.find('>');
    if (pos == std::string_view::npos) throw Error(Errc::InvalidConfig, "expected 'from>to' in '" + std::string(v) + "'");
    return {v.substr(0, pos), v.substr(pos + 1)};
}

std::uint64_t parse_count(std::string_view v, std::string_view what) {
    std::uint64_t n = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw Error(Errc::InvalidConfig, std::string(what) + ": not a number: " + std::string(v));
    return n;
}

constexpr std::uint32_t meta_bytes() { return static_cast<std::uint32_t>(sizeof(HttpMetaBlock)); }

}  // namespace

MacAddr MacAddr::parse(std::string_view text) {
    MacAddr m;
    std::size_t i = 0;
    for (auto& b : m.bytes) {
        if (i + 2 > text.size()) throw Error(Errc::InvalidConfig, "bad MAC " + std::string(text));
        auto [p, ec] = std::from_chars(text.data() + i, text.data() + i + 2, b, 16);
        if (ec != std::errc{} || p != text.data() + i + 2)
            throw Error(Errc::InvalidConfig, "bad MAC " + std::string(text));
        i += 2;
        if (&b != &m.bytes.back()) {
            if (i >= text.size() || text[i] != ':') throw Error(Errc::InvalidConfig, "bad MAC " + std::string(text));
            ++i;
        }
    }
    if (i != text.size()) throw Error(Errc::InvalidConfig, "bad MAC " + std::string(text));
    return m;
}

std::string MacAddr::str() const {
    char buf[18];
    std::snprintf(buf, sizeof buf, "%02x:%02x:%02x:%02x:%02x:%02x", bytes[0], bytes[1], bytes[2], bytes[3], bytes[4],
                  bytes[5]);
    return buf;
}

std::uint16_t internet_checksum(std::span<const std::uint8_t> data) {
    std::uint32_t sum = 0;
    std::size_t i = 0;
    for (; i + 1 < data.size(); i += 2) sum += load16(&data[i]);
    if (i < data.size()) sum += static_cast<std::uint32_t>(data[i]) << 8;
    while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

bool l3_route(std::span<std::uint8_t> packet, const std::unordered_map<std::uint32_t, std::uint32_t>& routes) {
    if (packet.size() < kMinIpv4Packet) throw Error(Errc::Malformed, "packet shorter than an IPv4 header");
    std::uint8_t* dst = packet.data() + kIpv4DstOffset;
    const std::uint32_t old_ip = std::uint32_t{load16(dst)} << 16 | load16(dst + 2);
    auto it = routes.find(old_ip);
    if (it == routes.end() || it->second == old_ip) return false;
    const std::uint32_t new_ip = it->second;
    std::uint8_t* ck = packet.data() + kIpv4ChecksumOffset;
    std::uint16_t check = load16(ck);
    check = csum_replace(check, static_cast<std::uint16_t>(old_ip >> 16), static_cast<std::uint16_t>(new_ip >> 16));
    check = csum_replace(check, static_cast<std::uint16_t>(old_ip), static_cast<std::uint16_t>(new_ip));
    store16(dst, static_cast<std::uint16_t>(new_ip >> 16));
    store16(dst + 2, static_cast<std::uint16_t>(new_ip));
    store16(ck, check);
    return true;
}

bool l2_forward(std::span<std::uint8_t> packet, const std::map<MacAddr, MacAddr>& table,
                const std::optional<MacAddr>& next_hop) {
    if (packet.size() < kEthHeaderLen) throw Error(Errc::Malformed, "packet shorter than an Ethernet header");
    MacAddr cur;
    std::memcpy(cur.bytes.data(), packet.data(), 6);
    MacAddr out;
    if (auto it = table.find(cur); it != table.end()) {
        out = it->second;
    } else if (next_hop) {
        out = *next_hop;
    } else {
        return false;
    }
    if (out == cur) return false;
    std::memcpy(packet.data(), out.bytes.data(), 6);
    return true;
}

std::uint64_t count_primes_atkin(std::uint64_t n) {
    if (n < 2) return 0;
    if (n < 3) return 1;
    if (n < 5) return 2;
    std::vector<bool> is_prime(n + 1, false);
    for (std::uint64_t x = 1; x * x <= n; ++x) {
        for (std::uint64_t y = 1; y * y <= n; ++y) {
            std::uint64_t k = 4 * x * x + y * y;
            if (k <= n && (k % 12 == 1 || k % 12 == 5)) is_prime[k] = !is_prime[k];
            k = 3 * x * x + y * y;
            if (k <= n && k % 12 == 7) is_prime[k] = !is_prime[k];
            if (x > y) {
                k = 3 * x * x - y * y;
                if (k <= n && k % 12 == 11) is_prime[k] = !is_prime[k];
            }
        }
    }
    for (std::uint64_t r = 5; r * r <= n; ++r)
        if (is_prime[r])
            for (std::uint64_t i = r * r; i <= n; i += r * r) is_prime[i] = false;
    std::uint64_t count = 2;  // 2 and 3
    for (std::uint64_t i = 5; i <= n; ++i) count += is_prime[i];
    return count;
}

std::size_t RoundRobin::next() {
    if (backends_ == 0) throw Error(Errc::NoBackends, "reverse proxy has no backends");
    return static_cast<std::size_t>(counter_++ % backends_);
}

void UrlRewriter::add(std::string from_prefix, std::string to_prefix) {
    rules_.emplace_back(std::move(from_prefix), std::move(to_prefix));
}

std::string UrlRewriter::rewrite(std::string_view path) const {
    const std::pair<std::string, std::string>* best = nullptr;
    for (const auto& r : rules_)
        if (path.starts_with(r.first) && (!best || r.first.size() > best->first.size())) best = &r;
    if (!best) return std::string(path);
    return best->second + std::string(path.substr(best->first.size()));
}

bool UrlRewriter::apply(HttpMetaBlock& meta) const {
    auto out = rewrite(meta.path_view());
    if (out == meta.path_view()) return false;
    return meta.set_path(out);
}

bool Handler::handle(PacketDescriptor& desc, FramePool& pool) {
    processed_.fetch_add(1, std::memory_order_relaxed);
    Outcome o;
    try {
        auto frame = pool.frame(desc.frame);
        if (std::size_t{desc.offset} + desc.length > frame.size()) throw Error(Errc::Malformed, "descriptor overruns frame");
        o = apply(desc, frame.subspan(desc.offset, desc.length));
    } catch (const Error& e) {
        if (e.code() != Errc::Malformed && e.code() != Errc::NoBackends) throw;
        o = Outcome::Drop;
    }
    if (o == Outcome::Drop) {
        dropped_.fetch_add(1, std::memory_order_relaxed);
        return false;
    }
    if (o == Outcome::Mutated) mutated_.fetch_add(1, std::memory_order_relaxed);
    return true;
}

std::vector<ByteRange> L3RouteHandler::mutable_ranges() const {
    return {{static_cast<std::uint32_t>(kIpv4ChecksumOffset), 2}, {static_cast<std::uint32_t>(kIpv4DstOffset), 4}};
}

Handler::Outcome L3RouteHandler::apply(PacketDescriptor&, std::span<std::uint8_t> payload) {
    return l3_route(payload, routes_) ? Outcome::Mutated : Outcome::Unchanged;
}

Handler::Outcome L2ForwardHandler::apply(PacketDescriptor&, std::span<std::uint8_t> payload) {
    return l2_forward(payload, table_, next_hop_) ? Outcome::Mutated : Outcome::Unchanged;
}

std::vector<ByteRange> ReverseProxyHandler::mutable_ranges() const { return {{0, meta_bytes()}}; }

Handler::Outcome ReverseProxyHandler::apply(PacketDescriptor&, std::span<std::uint8_t> payload) {
    auto* meta = meta_of(payload);
    if (!meta) throw Error(Errc::Malformed, "no HTTP metadata in frame");
    meta->backend_choice = static_cast<std::int32_t>(rr_.next());
    return Outcome::Mutated;
}

std::vector<ByteRange> UrlRewriteHandler::mutable_ranges() const { return {{0, meta_bytes()}}; }

Handler::Outcome UrlRewriteHandler::apply(PacketDescriptor&, std::span<std::uint8_t> payload) {
    auto* meta = meta_of(payload);
    if (!meta) throw Error(Errc::Malformed, "no HTTP metadata in frame");
    return rules_.apply(*meta) ? Outcome::Mutated : Outcome::Unchanged;
}

Handler::Outcome PrimeBurnHandler::apply(PacketDescriptor&, std::span<std::uint8_t>) {
    last_.store(count_primes_atkin(n_), std::memory_order_relaxed);
    return Outcome::Unchanged;
}

std::unique_ptr<Handler> make_handler(std::string_view name, const HandlerParams& params,
                                      std::size_t default_backends) {
    std::string_view base = name;
    std::optional<std::uint64_t> inline_n;
    if (auto colon = name.find(':'); colon != std::string_view::npos) {
        base = name.substr(0, colon);
        inline_n = parse_count(name.substr(colon + 1), name);
    }
    auto unknown_param = [&](const std::string& k) {
        throw Error(Errc::InvalidConfig, std::string(base) + ": unknown parameter '" + k + "'");
    };
    if (base == "l3route") {
        std::unordered_map<std::uint32_t, std::uint32_t> routes;
        for (const auto& [k, v] : params) {
            if (k != "route") unknown_param(k);
            auto [from, to] = split_arrow(v);
            routes[Ipv4::parse(from).value] = Ipv4::parse(to).value;
        }
        return std::make_unique<L3RouteHandler>(std::move(routes));
    }
    if (base == "l2fwd") {
        std::map<MacAddr, MacAddr> table;
        std::optional<MacAddr> next_hop;
        for (const auto& [k, v] : params) {
            if (k == "mac") {
                auto [from, to] = split_arrow(v);
                table[MacAddr::parse(from)] = MacAddr::parse(to);
            } else if (k == "next_hop") {
                next_hop = MacAddr::parse(v);
            } else {
                unknown_param(k);
            }
        }
        return std::make_unique<L2ForwardHandler>(std::move(table), next_hop);
    }
    if (base == "revproxy") {
        std::size_t backends = default_backends;
        for (const auto& [k, v] : params) {
            if (k != "backends") unknown_param(k);
            backends = parse_count(v, k);
        }
        return std::make_unique<ReverseProxyHandler>(backends);
    }
    if (base == "urlrewrite") {
        UrlRewriter rw;
        for (const auto& [k, v] : params) {
            if (k != "rule") unknown_param(k);
            auto [from, to] = split_arrow(v);
            rw.add(std::string(from), std::string(to));
        }
        return std::make_unique<UrlRewriteHandler>(std::move(rw));
    }
    if (base == "primeburn") {
        std::uint64_t n = inline_n.value_or(PrimeBurnHandler::kDefaultN);
        for (const auto& [k, v] : params) {
            if (k != "n") unknown_param(k);
            n = parse_count(v, k);
        }
        if (n < 1) throw Error(Errc::InvalidConfig, "primeburn: n must be >= 1");
        return std::make_unique<PrimeBurnHandler>(n);
    }
    if (base == "noop") return std::make_unique<NoopHandler>();
    throw Error(Errc::InvalidConfig, "unknown handler '" + std::string(name) + "'");
}

}  // namespace sfc
