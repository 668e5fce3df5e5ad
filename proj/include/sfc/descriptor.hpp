#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>

#include "sfc/flow.hpp"
#include "sfc/shm_pool.hpp"

namespace sfc {

/// Identifier of a chain function. A few values are reserved for the
/// infrastructure endpoints that sit at the edges of every chain.
struct FnId {
    std::uint16_t value = 0;

    friend auto operator<=>(const FnId&, const FnId&) = default;
    bool is_infrastructure() const noexcept { return value == 0 || value >= 0xfff0; }
    std::string str() const;
};

inline constexpr FnId kIngress{0};
/// Kernel-side redirect context of the event-driven ingress path.
inline constexpr FnId kKernel{0xfff0};
inline constexpr FnId kManager{0xfffe};
inline constexpr FnId kEgress{0xffff};

/// Which side of the node a packet entered from; egress returns it there.
using HairpinLabel = std::uint16_t;

/// The unit handed between functions: a reference to payload that stays in
/// shared memory plus routing metadata. Stored by value in ring slots.
struct PacketDescriptor {
    FrameRef frame;
    std::uint32_t offset = 0;
    std::uint32_t length = 0;
    FnId src_fn = kIngress;
    FnId dst_fn = kIngress;
    std::optional<FlowKey> flow;
    std::uint64_t trace_id = 0;
    std::uint64_t t_ingress_ns = 0;
    HairpinLabel origin = 0;
    /// Chain transfers taken so far; drives audit step numbering.
    std::uint16_t hops = 0;
};

static_assert(std::is_trivially_copyable_v<PacketDescriptor>);

}  // namespace sfc

template <>
struct std::hash<sfc::FnId> {
    std::size_t operator()(sfc::FnId id) const noexcept { return id.value; }
};
