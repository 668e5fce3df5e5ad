#pragma once

#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <type_traits>

#include "sfc/error.hpp"

namespace sfc {

inline constexpr std::size_t kCacheLine = 64;

/// Bounded single-producer/single-consumer FIFO. Cursors grow monotonically
/// and are masked into the slot array; the producer publishes with release
/// and the consumer observes with acquire.
template <typename T>
class SpscRing {
    static_assert(std::is_trivially_copyable_v<T>, "ring slots hold fixed-size records by value");

public:
    explicit SpscRing(std::size_t capacity)
        : capacity_(capacity), mask_(capacity - 1), slots_(std::make_unique<T[]>(capacity)) {
        if (capacity < 2 || !std::has_single_bit(capacity))
            throw Error(Errc::InvalidCapacity, "ring capacity must be a power of two >= 2");
    }

    SpscRing(const SpscRing&) = delete;
    SpscRing& operator=(const SpscRing&) = delete;

    /// Producer side. Returns false when the ring is full; the item is not
    /// resident and the caller keeps ownership.
    bool try_enqueue(const T& item) noexcept {
        const std::size_t head = head_.load(std::memory_order_relaxed);
        if (head - tail_cache_ == capacity_) {
            tail_cache_ = tail_.load(std::memory_order_acquire);
            if (head - tail_cache_ == capacity_) return false;
        }
        slots_[head & mask_] = item;
        head_.store(head + 1, std::memory_order_release);
        return true;
    }

    /// Consumer side.
    std::optional<T> try_dequeue() noexcept {
        const std::size_t tail = tail_.load(std::memory_order_relaxed);
        if (tail == head_cache_) {
            head_cache_ = head_.load(std::memory_order_acquire);
            if (tail == head_cache_) return std::nullopt;
        }
        T item = slots_[tail & mask_];
        tail_.store(tail + 1, std::memory_order_release);
        return item;
    }

    /// Consumer side. Moves up to out.size() items into out, FIFO order.
    std::size_t dequeue_burst(std::span<T> out) noexcept {
        const std::size_t tail = tail_.load(std::memory_order_relaxed);
        std::size_t avail = head_cache_ - tail;
        if (avail < out.size()) {
            head_cache_ = head_.load(std::memory_order_acquire);
            avail = head_cache_ - tail;
        }
        const std::size_t n = avail < out.size() ? avail : out.size();
        for (std::size_t i = 0; i < n; ++i) out[i] = slots_[(tail + i) & mask_];
        if (n) tail_.store(tail + n, std::memory_order_release);
        return n;
    }

    std::size_t size() const noexcept {
        const std::size_t tail = tail_.load(std::memory_order_acquire);
        const std::size_t head = head_.load(std::memory_order_acquire);
        return head - tail;
    }
    bool empty() const noexcept { return size() == 0; }
    std::size_t capacity() const noexcept { return capacity_; }

private:
    const std::size_t capacity_;
    const std::size_t mask_;
    std::unique_ptr<T[]> slots_;

    alignas(kCacheLine) std::atomic<std::size_t> head_{0};
    std::size_t tail_cache_ = 0;  // producer-local
    alignas(kCacheLine) std::atomic<std::size_t> tail_{0};
    std::size_t head_cache_ = 0;  // consumer-local
};

}  // namespace sfc
