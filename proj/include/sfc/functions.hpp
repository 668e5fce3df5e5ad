#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sfc/descriptor.hpp"
#include "sfc/flow.hpp"
#include "sfc/http.hpp"
#include "sfc/shm_pool.hpp"

namespace sfc {

/// Byte range relative to the descriptor's payload offset.
struct ByteRange {
    std::uint32_t offset = 0;
    std::uint32_t length = 0;
};

struct MacAddr {
    std::array<std::uint8_t, 6> bytes{};

    static MacAddr parse(std::string_view text);
    std::string str() const;
    friend auto operator<=>(const MacAddr&, const MacAddr&) = default;
};

// Ethernet + IPv4 offsets used by the L2/L3 functions.
inline constexpr std::size_t kEthHeaderLen = 14;
inline constexpr std::size_t kIpv4ChecksumOffset = kEthHeaderLen + 10;
inline constexpr std::size_t kIpv4SrcOffset = kEthHeaderLen + 12;
inline constexpr std::size_t kIpv4DstOffset = kEthHeaderLen + 16;
inline constexpr std::size_t kMinIpv4Packet = kEthHeaderLen + 20;

/// Rewrites the IPv4 destination per `routes` and patches the header
/// checksum incrementally. Returns whether the packet changed. Throws
/// Malformed for packets shorter than an Ethernet + IPv4 header.
bool l3_route(std::span<std::uint8_t> packet, const std::unordered_map<std::uint32_t, std::uint32_t>& routes);

/// Rewrites the destination MAC per `table`, falling back to `next_hop` when
/// set. Throws Malformed for packets shorter than an Ethernet header.
bool l2_forward(std::span<std::uint8_t> packet, const std::map<MacAddr, MacAddr>& table,
                const std::optional<MacAddr>& next_hop);

/// RFC 1071 checksum over `data` (used to build and check IPv4 headers).
std::uint16_t internet_checksum(std::span<const std::uint8_t> data);

/// Number of primes <= n, by the sieve of Atkin.
std::uint64_t count_primes_atkin(std::uint64_t n);

/// Round-robin backend chooser shared by all requests through one function.
class RoundRobin {
public:
    explicit RoundRobin(std::size_t backends) : backends_(backends) {}
    /// Throws NoBackends when no backend is configured.
    std::size_t next();
    std::size_t backends() const noexcept { return backends_; }

private:
    std::size_t backends_;
    std::uint64_t counter_ = 0;
};

/// Longest-prefix path rewrite; no match leaves the path alone.
class UrlRewriter {
public:
    void add(std::string from_prefix, std::string to_prefix);
    std::string rewrite(std::string_view path) const;
    bool apply(HttpMetaBlock& meta) const;
    std::size_t size() const noexcept { return rules_.size(); }

private:
    std::vector<std::pair<std::string, std::string>> rules_;
};

using HandlerParams = std::vector<std::pair<std::string, std::string>>;

/// A chain stage. handle() runs in the function's own context on a frame it
/// currently owns; it may only write inside mutable_ranges().
class Handler {
public:
    virtual ~Handler() = default;

    virtual std::string_view kind() const noexcept = 0;
    virtual std::vector<ByteRange> mutable_ranges() const = 0;

    /// Runs the function. Returns false when the packet must be dropped.
    bool handle(PacketDescriptor& desc, FramePool& pool);

    std::uint64_t processed() const noexcept { return processed_.load(std::memory_order_relaxed); }
    std::uint64_t mutated() const noexcept { return mutated_.load(std::memory_order_relaxed); }
    std::uint64_t dropped() const noexcept { return dropped_.load(std::memory_order_relaxed); }

protected:
    enum class Outcome { Unchanged, Mutated, Drop };
    virtual Outcome apply(PacketDescriptor& desc, std::span<std::uint8_t> payload) = 0;

private:
    std::atomic<std::uint64_t> processed_{0};
    std::atomic<std::uint64_t> mutated_{0};
    std::atomic<std::uint64_t> dropped_{0};
};

class L3RouteHandler final : public Handler {
public:
    explicit L3RouteHandler(std::unordered_map<std::uint32_t, std::uint32_t> routes) : routes_(std::move(routes)) {}
    std::string_view kind() const noexcept override { return "l3route"; }
    std::vector<ByteRange> mutable_ranges() const override;

protected:
    Outcome apply(PacketDescriptor& desc, std::span<std::uint8_t> payload) override;

private:
    std::unordered_map<std::uint32_t, std::uint32_t> routes_;
};

class L2ForwardHandler final : public Handler {
public:
    L2ForwardHandler(std::map<MacAddr, MacAddr> table, std::optional<MacAddr> next_hop)
        : table_(std::move(table)), next_hop_(next_hop) {}
    std::string_view kind() const noexcept override { return "l2fwd"; }
    std::vector<ByteRange> mutable_ranges() const override { return {{0, 6}}; }

protected:
    Outcome apply(PacketDescriptor& desc, std::span<std::uint8_t> payload) override;

private:
    std::map<MacAddr, MacAddr> table_;
    std::optional<MacAddr> next_hop_;
};

class ReverseProxyHandler final : public Handler {
public:
    explicit ReverseProxyHandler(std::size_t backends) : rr_(backends) {}
    std::string_view kind() const noexcept override { return "revproxy"; }
    std::vector<ByteRange> mutable_ranges() const override;

protected:
    Outcome apply(PacketDescriptor& desc, std::span<std::uint8_t> payload) override;

private:
    RoundRobin rr_;
};

class UrlRewriteHandler final : public Handler {
public:
    explicit UrlRewriteHandler(UrlRewriter rules) : rules_(std::move(rules)) {}
    std::string_view kind() const noexcept override { return "urlrewrite"; }
    std::vector<ByteRange> mutable_ranges() const override;

protected:
    Outcome apply(PacketDescriptor& desc, std::span<std::uint8_t> payload) override;

private:
    UrlRewriter rules_;
};

/// CPU-bound stage: counts primes up to n for every message it sees.
class PrimeBurnHandler final : public Handler {
public:
    static constexpr std::uint64_t kDefaultN = 50000;
    explicit PrimeBurnHandler(std::uint64_t n = kDefaultN) : n_(n) {}
    std::string_view kind() const noexcept override { return "primeburn"; }
    std::vector<ByteRange> mutable_ranges() const override { return {}; }
    std::uint64_t last_count() const noexcept { return last_.load(std::memory_order_relaxed); }

protected:
    Outcome apply(PacketDescriptor& desc, std::span<std::uint8_t> payload) override;

private:
    std::uint64_t n_;
    std::atomic<std::uint64_t> last_{0};
};

/// Pass-through stage, used for chains whose only purpose is transport.
class NoopHandler final : public Handler {
public:
    std::string_view kind() const noexcept override { return "noop"; }
    std::vector<ByteRange> mutable_ranges() const override { return {}; }

protected:
    Outcome apply(PacketDescriptor&, std::span<std::uint8_t>) override { return Outcome::Unchanged; }
};

/// Builds a handler from its registered name ("l3route", "l2fwd", "revproxy",
/// "urlrewrite", "primeburn", "noop"; "primeburn:N" sets n). Parameters:
///   l3route    route = A.B.C.D>W.X.Y.Z   (repeatable)
///   l2fwd      mac = aa:..:ff>11:..:66   (repeatable), next_hop = MAC
///   revproxy   backends = count
///   urlrewrite rule = /from>/to          (repeatable)
///   primeburn  n = count
/// Throws InvalidConfig on unknown names or bad parameters.
std::unique_ptr<Handler> make_handler(std::string_view name, const HandlerParams& params,
                                      std::size_t default_backends = 0);

}  // namespace sfc
