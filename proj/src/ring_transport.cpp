#include "sfc/ring_transport.hpp"

#include <atomic>
#include <thread>

namespace sfc {

std::string FnId::str() const {
    if (*this == kIngress) return "ingress";
    if (*this == kEgress) return "egress";
    if (*this == kManager) return "manager";
    if (*this == kKernel) return "kernel";
    return "fn" + std::to_string(value);
}

std::vector<PacketDescriptor> DescriptorRing::burst_dequeue(std::size_t max_n) {
    std::vector<PacketDescriptor> out(max_n);
    out.resize(dequeue_burst(out));
    return out;
}

std::size_t xsk_cycle(XskRingSet& set) {
    std::size_t moved = 0;
    while (!set.completion.empty()) {
        if (set.fill.size() == set.fill.capacity()) {
            if (moved == 0) throw Error(Errc::FillFull, "fill ring has no space");
            break;
        }
        auto d = set.completion.dequeue();
        if (!d) break;
        set.fill.enqueue(*d);
        ++moved;
    }
    return moved;
}

LatencyStats ring_hop_latency_probe(std::size_t n_samples) {
    if (n_samples == 0) throw Error(Errc::InvalidSampleCount, "n_samples must be >= 1");
    DescriptorRing ring(64);
    std::vector<std::uint64_t> samples;
    samples.reserve(n_samples);

    if (std::thread::hardware_concurrency() >= 2) {
        std::atomic<std::size_t> received{0};
        std::thread consumer([&] {
            std::size_t got = 0;
            while (got < n_samples) {
                if (auto d = ring.dequeue()) {
                    samples.push_back(now_ns() - d->t_ingress_ns);
                    received.store(++got, std::memory_order_release);
                }
            }
        });
        for (std::size_t i = 0; i < n_samples; ++i) {
            PacketDescriptor d;
            d.trace_id = i;
            d.t_ingress_ns = now_ns();
            while (!ring.enqueue(d)) {
            }
            while (received.load(std::memory_order_acquire) <= i) {
            }
        }
        consumer.join();
    } else {
        for (std::size_t i = 0; i < n_samples; ++i) {
            PacketDescriptor d;
            d.trace_id = i;
            d.t_ingress_ns = now_ns();
            ring.enqueue(d);
            std::optional<PacketDescriptor> got;
            while (!(got = ring.dequeue())) {
            }
            samples.push_back(now_ns() - got->t_ingress_ns);
        }
    }
    return summarize(samples);
}

}  // namespace sfc
