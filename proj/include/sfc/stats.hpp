#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <vector>

namespace sfc {

inline std::uint64_t now_ns() noexcept {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

struct LatencyStats {
    std::size_t samples = 0;
    double median_ns = 0;
    double p95_ns = 0;
    double p99_ns = 0;
    double mean_ns = 0;
    double max_ns = 0;
};

/// Nearest-rank percentiles over a copy of the samples.
LatencyStats summarize(std::span<const std::uint64_t> samples_ns);

}  // namespace sfc
