#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sfc {

/// Geometry and security-domain token of a frame pool.
struct PoolConfig {
    std::uint32_t frame_count = 4096;
    std::uint32_t frame_size = 2048;
    std::string domain_prefix;
    /// File-backed segments can be attached from other processes; in-process
    /// pools are only visible through the registry that created them.
    bool file_backed = false;

    /// Throws Error(InvalidConfig) when the geometry or prefix is unusable.
    void validate() const;
};

/// Handle to one frame. A ref whose generation no longer matches the frame's
/// current generation is stale and every access through it fails.
struct FrameRef {
    std::uint32_t index = 0;
    std::uint32_t generation = 0;
    std::uint32_t domain = 0;

    friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

namespace detail {
struct PoolRegion;
}

class PoolRegistry;

/// A contiguous region of fixed-size frames shared by every component that
/// attached with the pool's domain prefix. alloc/free are lock-free and safe
/// from any thread; payload access is unsynchronized and relies on the
/// single-owner discipline enforced through FrameRef generations.
class FramePool {
public:
    static constexpr std::uint32_t kLayoutVersion = 1;

    /// Creates and publishes a pool. Throws InvalidConfig or DuplicatePrefix.
    static std::shared_ptr<FramePool> create(const PoolConfig& config);
    static std::shared_ptr<FramePool> create(const PoolConfig& config, PoolRegistry& registry);

    /// Attaches to an existing pool by prefix. An unknown prefix is refused
    /// with UnknownPrefix; this is the admission check for new components.
    static std::shared_ptr<FramePool> attach(std::string_view prefix);
    static std::shared_ptr<FramePool> attach(std::string_view prefix, PoolRegistry& registry);

    ~FramePool();
    FramePool(const FramePool&) = delete;
    FramePool& operator=(const FramePool&) = delete;

    /// Throws PoolExhausted when no frame is free.
    FrameRef alloc();
    std::optional<FrameRef> try_alloc() noexcept;
    /// Throws StaleRef, DoubleFree or ForeignFrame.
    void free(FrameRef ref);

    void write(FrameRef ref, std::size_t offset, std::span<const std::uint8_t> data);
    std::vector<std::uint8_t> read(FrameRef ref, std::size_t offset, std::size_t len) const;
    /// Direct view of the whole frame for in-place processing.
    std::span<std::uint8_t> frame(FrameRef ref);
    std::span<const std::uint8_t> frame(FrameRef ref) const;

    bool is_valid(FrameRef ref) const noexcept;

    std::uint32_t frame_count() const noexcept;
    std::uint32_t frame_size() const noexcept;
    std::uint32_t free_count() const noexcept;
    std::uint32_t in_flight() const noexcept { return frame_count() - free_count(); }
    std::uint32_t domain_id() const noexcept;
    const std::string& prefix() const noexcept { return prefix_; }
    bool file_backed() const noexcept;

private:
    explicit FramePool(std::shared_ptr<detail::PoolRegion> region);

    void check_access(FrameRef ref, std::size_t offset, std::size_t len) const;
    std::uint8_t* frame_base(std::uint32_t index) const noexcept;

    std::shared_ptr<detail::PoolRegion> region_;
    std::string prefix_;
};

using PoolHandle = std::shared_ptr<FramePool>;

/// Prefix -> pool table used for discovery. In-process pools live only here;
/// file-backed pools additionally publish a segment and a sidecar metadata
/// file under `shm_dir()`.
class PoolRegistry {
public:
    PoolRegistry() = default;
    explicit PoolRegistry(std::filesystem::path shm_dir) : shm_dir_(std::move(shm_dir)) {}

    /// Registry shared by the whole process.
    static PoolRegistry& process();

    const std::filesystem::path& shm_dir() const noexcept { return shm_dir_; }
    std::filesystem::path segment_path(std::string_view prefix) const;
    std::filesystem::path sidecar_path(std::string_view prefix) const;

    bool contains(std::string_view prefix);

private:
    friend class FramePool;

    std::mutex mu_;
    std::map<std::string, std::weak_ptr<detail::PoolRegion>, std::less<>> pools_;
    std::filesystem::path shm_dir_ = default_shm_dir();

    static std::filesystem::path default_shm_dir();
};

/// Contents of the sidecar file written next to a file-backed segment.
struct PoolMetadata {
    std::string prefix;
    std::uint32_t frame_count = 0;
    std::uint32_t frame_size = 0;
    std::uint32_t layout_version = 0;

    std::string render() const;
    static PoolMetadata parse(std::string_view text);
};

}  // namespace sfc
