#pragma once

#include <cstddef>
#include <vector>

#include "sfc/descriptor.hpp"
#include "sfc/spsc_ring.hpp"
#include "sfc/stats.hpp"

namespace sfc {

inline constexpr std::size_t kDefaultRingCapacity = 1024;

/// Polling descriptor transport between exactly one producer context and one
/// consumer context.
class DescriptorRing : public SpscRing<PacketDescriptor> {
public:
    explicit DescriptorRing(std::size_t capacity = kDefaultRingCapacity) : SpscRing(capacity) {}

    bool enqueue(const PacketDescriptor& d) noexcept { return try_enqueue(d); }
    std::optional<PacketDescriptor> dequeue() noexcept { return try_dequeue(); }

    /// Returns between 0 and max_n descriptors in FIFO order.
    std::vector<PacketDescriptor> burst_dequeue(std::size_t max_n);
};

/// Per-function RX/TX pair: the function consumes rx and produces tx.
struct RingPair {
    explicit RingPair(std::size_t capacity = kDefaultRingCapacity) : rx(capacity), tx(capacity) {}
    DescriptorRing rx;
    DescriptorRing tx;
};

/// The four rings of the event-driven ingress path. `fill` holds free frames
/// waiting for the NIC; `completion` holds transmitted frames to recycle.
struct XskRingSet {
    explicit XskRingSet(std::size_t capacity = kDefaultRingCapacity)
        : rx(capacity), tx(capacity), completion(capacity), fill(capacity) {}
    DescriptorRing rx;
    DescriptorRing tx;
    DescriptorRing completion;
    DescriptorRing fill;
};

/// Moves every completion entry to the fill ring and returns how many moved.
/// When the fill ring is already full and nothing could move, throws
/// Error(FillFull) with the completion ring untouched. A partial move leaves
/// the remainder queued for the next cycle.
std::size_t xsk_cycle(XskRingSet& set);

/// One-hop enqueue->dequeue latency under active polling. With two or more
/// hardware threads the consumer spins on its own thread; on a single-core
/// host the poll loop runs in the producer's context right after the
/// enqueue, since a spinning peer cannot be scheduled concurrently there.
LatencyStats ring_hop_latency_probe(std::size_t n_samples);

}  // namespace sfc
