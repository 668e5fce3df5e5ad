#include "sfc/flow.hpp"

#include <charconv>

#include "sfc/error.hpp"

namespace sfc {

Ipv4 Ipv4::parse(std::string_view dotted) {
    std::uint32_t value = 0;
    int parts = 0;
    const char* p = dotted.data();
    const char* end = dotted.data() + dotted.size();
    while (parts < 4) {
        unsigned octet = 0;
        auto [next, ec] = std::from_chars(p, end, octet);
        if (ec != std::errc{} || octet > 255 || next == p) break;
        value = (value << 8) | octet;
        ++parts;
        p = next;
        if (parts < 4) {
            if (p == end || *p != '.') break;
            ++p;
        }
    }
    if (parts != 4 || p != end) throw Error(Errc::SyntaxError, "bad IPv4 address '" + std::string(dotted) + "'");
    return Ipv4{value};
}

std::string Ipv4::str() const {
    return std::to_string(value >> 24) + '.' + std::to_string((value >> 16) & 0xff) + '.' +
           std::to_string((value >> 8) & 0xff) + '.' + std::to_string(value & 0xff);
}

std::string_view to_string(Protocol p) noexcept { return p == Protocol::Tcp ? "tcp" : "udp"; }

Protocol parse_protocol(std::string_view text) {
    if (text == "tcp" || text == "TCP") return Protocol::Tcp;
    if (text == "udp" || text == "UDP") return Protocol::Udp;
    throw Error(Errc::SyntaxError, "unknown protocol '" + std::string(text) + "'");
}

std::string FlowKey::str() const {
    return std::string(to_string(protocol)) + ' ' + src_ip.str() + ':' + std::to_string(src_port) + " -> " +
           dst_ip.str() + ':' + std::to_string(dst_port);
}

}  // namespace sfc
