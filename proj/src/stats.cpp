#include "sfc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sfc {

LatencyStats summarize(std::span<const std::uint64_t> samples_ns) {
    LatencyStats s;
    s.samples = samples_ns.size();
    if (samples_ns.empty()) return s;
    std::vector<std::uint64_t> v(samples_ns.begin(), samples_ns.end());
    std::sort(v.begin(), v.end());
    auto rank = [&](double q) {
        const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
        return static_cast<double>(v[std::min(idx, v.size() - 1)]);
    };
    s.median_ns = rank(0.50);
    s.p95_ns = rank(0.95);
    s.p99_ns = rank(0.99);
    s.max_ns = static_cast<double>(v.back());
    s.mean_ns = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    return s;
}

}  // namespace sfc
