#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

namespace sfc {

enum class Protocol : std::uint8_t { Tcp = 6, Udp = 17 };

/// IPv4 address in host byte order.
struct Ipv4 {
    std::uint32_t value = 0;

    static Ipv4 parse(std::string_view dotted);
    std::string str() const;
    friend auto operator<=>(const Ipv4&, const Ipv4&) = default;
};

/// IP 5-tuple identifying a flow.
struct FlowKey {
    Ipv4 src_ip;
    Ipv4 dst_ip;
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    Protocol protocol = Protocol::Udp;

    friend bool operator==(const FlowKey&, const FlowKey&) = default;
    std::string str() const;
};

std::string_view to_string(Protocol p) noexcept;
Protocol parse_protocol(std::string_view text);

}  // namespace sfc

template <>
struct std::hash<sfc::FlowKey> {
    std::size_t operator()(const sfc::FlowKey& k) const noexcept {
        std::uint64_t h = (std::uint64_t{k.src_ip.value} << 32) | k.dst_ip.value;
        h ^= (std::uint64_t{k.src_port} << 24) ^ (std::uint64_t{k.dst_port} << 8) ^ static_cast<std::uint8_t>(k.protocol);
        return std::hash<std::uint64_t>{}(h * 0x9e3779b97f4a7c15ULL);
    }
};
