#include "sfc/shm_pool.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <bit>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "sfc/error.hpp"

namespace sfc {

namespace {

constexpr std::uint64_t kMagic = 0x5346435f504f4f4cULL;  // "SFC_POOL"
constexpr std::uint32_t kNil = 0xffffffffu;
constexpr std::size_t kPrefixMax = 63;

struct PoolHeader {
    std::uint64_t magic;
    std::uint32_t layout_version;
    std::uint32_t frame_count;
    std::uint32_t frame_size;
    std::uint32_t domain;
    char prefix[kPrefixMax + 1];
    alignas(64) std::atomic<std::uint64_t> free_head;  // tag << 32 | index
    std::atomic<std::uint32_t> free_count;
};

// generation << 32 | owned, in one word so that a free can check the
// generation and release ownership in a single step.
struct FrameSlot {
    std::atomic<std::uint64_t> state;
    std::atomic<std::uint32_t> next;
    std::uint32_t reserved;
};

constexpr std::uint64_t slot_state(std::uint32_t generation, bool owned) {
    return (std::uint64_t{generation} << 32) | (owned ? 1u : 0u);
}

constexpr std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

std::size_t slots_offset() { return align_up(sizeof(PoolHeader), 64); }

std::size_t frames_offset(std::uint32_t frame_count) {
    return align_up(slots_offset() + sizeof(FrameSlot) * frame_count, 64);
}

std::size_t region_size(std::uint32_t frame_count, std::uint32_t frame_size) {
    return frames_offset(frame_count) + std::size_t{frame_count} * frame_size;
}

bool file_safe_prefix(std::string_view p) {
    for (char c : p) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                        c == '-' || c == '_' || c == '.';
        if (!ok) return false;
    }
    return !p.empty() && p != "." && p != "..";
}

std::uint32_t fresh_domain_id() {
    static std::mutex mu;
    static std::mt19937 rng{std::random_device{}()};
    std::lock_guard lock(mu);
    std::uint32_t id = 0;
    while (id == 0) id = rng();
    return id;
}

}  // namespace

namespace detail {

struct PoolRegion {
    void* base = nullptr;
    std::size_t size = 0;
    bool mapped = false;
    bool owner = false;
    std::filesystem::path segment;
    std::filesystem::path sidecar;

    PoolHeader* header() const { return static_cast<PoolHeader*>(base); }
    FrameSlot* slots() const {
        return reinterpret_cast<FrameSlot*>(static_cast<char*>(base) + slots_offset());
    }
    std::uint8_t* frames() const {
        return reinterpret_cast<std::uint8_t*>(static_cast<char*>(base) +
                                               frames_offset(header()->frame_count));
    }

    ~PoolRegion() {
        if (mapped) {
            ::munmap(base, size);
            if (owner) {
                std::error_code ec;
                std::filesystem::remove(sidecar, ec);
                std::filesystem::remove(segment, ec);
            }
        } else {
            std::free(base);
        }
    }
};

}  // namespace detail

void PoolConfig::validate() const {
    if (frame_count < 2) throw Error(Errc::InvalidConfig, "frame_count must be >= 2");
    if (frame_size < 128) throw Error(Errc::InvalidConfig, "frame_size must be >= 128 bytes");
    if (!std::has_single_bit(frame_size)) throw Error(Errc::InvalidConfig, "frame_size must be a power of two");
    if (domain_prefix.empty()) throw Error(Errc::InvalidConfig, "domain_prefix must be non-empty");
    if (domain_prefix.size() > kPrefixMax) throw Error(Errc::InvalidConfig, "domain_prefix too long");
    if (file_backed && !file_safe_prefix(domain_prefix))
        throw Error(Errc::InvalidConfig, "file-backed prefix must be [A-Za-z0-9._-]");
}

std::string PoolMetadata::render() const {
    std::ostringstream os;
    os << "prefix=" << prefix << '\n'
       << "frame_count=" << frame_count << '\n'
       << "frame_size=" << frame_size << '\n'
       << "layout_version=" << layout_version << '\n';
    return os.str();
}

PoolMetadata PoolMetadata::parse(std::string_view text) {
    PoolMetadata m;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const auto key = line.substr(0, eq);
        const auto val = line.substr(eq + 1);
        if (key == "prefix") m.prefix = val;
        else if (key == "frame_count") m.frame_count = static_cast<std::uint32_t>(std::stoul(val));
        else if (key == "frame_size") m.frame_size = static_cast<std::uint32_t>(std::stoul(val));
        else if (key == "layout_version") m.layout_version = static_cast<std::uint32_t>(std::stoul(val));
    }
    return m;
}

PoolRegistry& PoolRegistry::process() {
    static PoolRegistry registry;
    return registry;
}

std::filesystem::path PoolRegistry::default_shm_dir() {
    if (const char* env = std::getenv("SFC_SHM_DIR"); env && *env) return env;
    if (std::filesystem::is_directory("/dev/shm")) return "/dev/shm";
    return std::filesystem::temp_directory_path();
}

std::filesystem::path PoolRegistry::segment_path(std::string_view prefix) const {
    return shm_dir_ / ("sfc-" + std::string(prefix) + ".pool");
}

std::filesystem::path PoolRegistry::sidecar_path(std::string_view prefix) const {
    return shm_dir_ / ("sfc-" + std::string(prefix) + ".meta");
}

bool PoolRegistry::contains(std::string_view prefix) {
    std::lock_guard lock(mu_);
    auto it = pools_.find(prefix);
    return it != pools_.end() && !it->second.expired();
}

namespace {

void init_region(detail::PoolRegion& r, const PoolConfig& cfg) {
    auto* h = new (r.base) PoolHeader{};
    h->magic = kMagic;
    h->layout_version = FramePool::kLayoutVersion;
    h->frame_count = cfg.frame_count;
    h->frame_size = cfg.frame_size;
    h->domain = fresh_domain_id();
    std::memset(h->prefix, 0, sizeof(h->prefix));
    std::memcpy(h->prefix, cfg.domain_prefix.data(), cfg.domain_prefix.size());

    auto* slots = r.slots();
    for (std::uint32_t i = 0; i < cfg.frame_count; ++i) {
        auto* s = new (&slots[i]) FrameSlot{};
        s->state.store(slot_state(0, false), std::memory_order_relaxed);
        s->next.store(i + 1 < cfg.frame_count ? i + 1 : kNil, std::memory_order_relaxed);
    }
    h->free_head.store(0, std::memory_order_relaxed);
    h->free_count.store(cfg.frame_count, std::memory_order_release);
}

std::shared_ptr<detail::PoolRegion> create_file_region(const PoolConfig& cfg, PoolRegistry& reg) {
    const auto seg = reg.segment_path(cfg.domain_prefix);
    const auto side = reg.sidecar_path(cfg.domain_prefix);

    const int mfd = ::open(side.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0600);
    if (mfd < 0) {
        if (errno == EEXIST) throw Error(Errc::DuplicatePrefix, cfg.domain_prefix);
        throw Error(Errc::IoError, "cannot create " + side.string() + ": " + std::strerror(errno));
    }
    ::close(mfd);

    auto region = std::make_shared<detail::PoolRegion>();
    region->segment = seg;
    region->sidecar = side;
    region->owner = true;
    region->size = region_size(cfg.frame_count, cfg.frame_size);

    const int fd = ::open(seg.c_str(), O_CREAT | O_TRUNC | O_RDWR, 0600);
    if (fd < 0 || ::ftruncate(fd, static_cast<off_t>(region->size)) != 0) {
        const std::string msg = std::strerror(errno);
        if (fd >= 0) ::close(fd);
        std::filesystem::remove(side);
        throw Error(Errc::IoError, "cannot size segment " + seg.string() + ": " + msg);
    }
    void* p = ::mmap(nullptr, region->size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    ::close(fd);
    if (p == MAP_FAILED) {
        std::filesystem::remove(side);
        std::filesystem::remove(seg);
        throw Error(Errc::IoError, "mmap failed for " + seg.string());
    }
    region->base = p;
    region->mapped = true;
    init_region(*region, cfg);

    // Metadata is published last so an attacher never sees a half-built segment.
    PoolMetadata meta{cfg.domain_prefix, cfg.frame_count, cfg.frame_size, FramePool::kLayoutVersion};
    std::ofstream(side, std::ios::trunc) << meta.render();
    return region;
}

std::shared_ptr<detail::PoolRegion> attach_file_region(std::string_view prefix, PoolRegistry& reg) {
    const auto side = reg.sidecar_path(prefix);
    std::ifstream in(side);
    if (!in) throw Error(Errc::UnknownPrefix, std::string(prefix));
    std::stringstream ss;
    ss << in.rdbuf();
    const auto meta = PoolMetadata::parse(ss.str());
    if (meta.prefix != prefix || meta.layout_version != FramePool::kLayoutVersion || meta.frame_count == 0)
        throw Error(Errc::UnknownPrefix, "metadata mismatch for " + std::string(prefix));

    const auto seg = reg.segment_path(prefix);
    const int fd = ::open(seg.c_str(), O_RDWR);
    if (fd < 0) throw Error(Errc::UnknownPrefix, std::string(prefix));

    auto region = std::make_shared<detail::PoolRegion>();
    region->size = region_size(meta.frame_count, meta.frame_size);
    void* p = ::mmap(nullptr, region->size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    ::close(fd);
    if (p == MAP_FAILED) throw Error(Errc::IoError, "mmap failed for " + seg.string());
    region->base = p;
    region->mapped = true;
    region->segment = seg;
    region->sidecar = side;
    const auto* h = region->header();
    if (h->magic != kMagic || std::string_view(h->prefix) != prefix)
        throw Error(Errc::UnknownPrefix, "segment header mismatch for " + std::string(prefix));
    return region;
}

}  // namespace

FramePool::FramePool(std::shared_ptr<detail::PoolRegion> region)
    : region_(std::move(region)), prefix_(region_->header()->prefix) {}

FramePool::~FramePool() = default;

std::shared_ptr<FramePool> FramePool::create(const PoolConfig& config) {
    return create(config, PoolRegistry::process());
}

std::shared_ptr<FramePool> FramePool::create(const PoolConfig& config, PoolRegistry& registry) {
    config.validate();
    std::lock_guard lock(registry.mu_);
    if (auto it = registry.pools_.find(config.domain_prefix);
        it != registry.pools_.end() && !it->second.expired()) {
        throw Error(Errc::DuplicatePrefix, config.domain_prefix);
    }

    std::shared_ptr<detail::PoolRegion> region;
    if (config.file_backed) {
        region = create_file_region(config, registry);
    } else {
        region = std::make_shared<detail::PoolRegion>();
        region->size = region_size(config.frame_count, config.frame_size);
        region->base = std::aligned_alloc(64, align_up(region->size, 64));
        if (!region->base) throw Error(Errc::InvalidConfig, "pool allocation failed");
        init_region(*region, config);
    }
    registry.pools_[config.domain_prefix] = region;
    return std::shared_ptr<FramePool>(new FramePool(std::move(region)));
}

std::shared_ptr<FramePool> FramePool::attach(std::string_view prefix) {
    return attach(prefix, PoolRegistry::process());
}

std::shared_ptr<FramePool> FramePool::attach(std::string_view prefix, PoolRegistry& registry) {
    {
        std::lock_guard lock(registry.mu_);
        if (auto it = registry.pools_.find(prefix); it != registry.pools_.end()) {
            if (auto region = it->second.lock()) return std::shared_ptr<FramePool>(new FramePool(std::move(region)));
        }
    }
    if (prefix.empty() || !file_safe_prefix(prefix)) throw Error(Errc::UnknownPrefix, std::string(prefix));
    return std::shared_ptr<FramePool>(new FramePool(attach_file_region(prefix, registry)));
}

std::uint32_t FramePool::frame_count() const noexcept { return region_->header()->frame_count; }
std::uint32_t FramePool::frame_size() const noexcept { return region_->header()->frame_size; }
std::uint32_t FramePool::domain_id() const noexcept { return region_->header()->domain; }
bool FramePool::file_backed() const noexcept { return region_->mapped; }

std::uint32_t FramePool::free_count() const noexcept {
    return region_->header()->free_count.load(std::memory_order_acquire);
}

std::optional<FrameRef> FramePool::try_alloc() noexcept {
    auto* h = region_->header();
    auto* slots = region_->slots();
    std::uint64_t head = h->free_head.load(std::memory_order_acquire);
    for (;;) {
        const auto index = static_cast<std::uint32_t>(head);
        if (index == kNil) return std::nullopt;
        const std::uint32_t next = slots[index].next.load(std::memory_order_relaxed);
        const std::uint64_t tag = (head >> 32) + 1;
        if (h->free_head.compare_exchange_weak(head, (tag << 32) | next, std::memory_order_acq_rel,
                                               std::memory_order_acquire)) {
            auto& slot = slots[index];
            const auto gen = static_cast<std::uint32_t>(slot.state.load(std::memory_order_acquire) >> 32) + 1;
            slot.state.store(slot_state(gen, true), std::memory_order_release);
            h->free_count.fetch_sub(1, std::memory_order_acq_rel);
            return FrameRef{index, gen, h->domain};
        }
    }
}

FrameRef FramePool::alloc() {
    if (auto ref = try_alloc()) return *ref;
    throw Error(Errc::PoolExhausted, prefix_);
}

void FramePool::free(FrameRef ref) {
    auto* h = region_->header();
    if (ref.domain != h->domain) throw Error(Errc::ForeignFrame, "frame belongs to another pool");
    if (ref.index >= h->frame_count) throw Error(Errc::StaleRef, "frame index out of range");
    auto& slot = region_->slots()[ref.index];
    std::uint64_t expected = slot_state(ref.generation, true);
    if (!slot.state.compare_exchange_strong(expected, slot_state(ref.generation, false), std::memory_order_acq_rel)) {
        if (expected >> 32 != ref.generation) throw Error(Errc::StaleRef, "generation mismatch on free");
        throw Error(Errc::DoubleFree, "frame " + std::to_string(ref.index));
    }

    std::uint64_t head = h->free_head.load(std::memory_order_acquire);
    for (;;) {
        slot.next.store(static_cast<std::uint32_t>(head), std::memory_order_relaxed);
        const std::uint64_t tag = (head >> 32) + 1;
        if (h->free_head.compare_exchange_weak(head, (tag << 32) | ref.index, std::memory_order_acq_rel,
                                               std::memory_order_acquire))
            break;
    }
    h->free_count.fetch_add(1, std::memory_order_acq_rel);
}

bool FramePool::is_valid(FrameRef ref) const noexcept {
    const auto* h = region_->header();
    if (ref.domain != h->domain || ref.index >= h->frame_count) return false;
    const auto& slot = region_->slots()[ref.index];
    return slot.state.load(std::memory_order_acquire) == slot_state(ref.generation, true);
}

void FramePool::check_access(FrameRef ref, std::size_t offset, std::size_t len) const {
    if (ref.domain != region_->header()->domain) throw Error(Errc::ForeignFrame, "frame belongs to another pool");
    if (!is_valid(ref)) throw Error(Errc::StaleRef, "frame " + std::to_string(ref.index));
    if (offset > frame_size() || len > frame_size() - offset)
        throw Error(Errc::OutOfBounds, "offset " + std::to_string(offset) + " len " + std::to_string(len));
}

std::uint8_t* FramePool::frame_base(std::uint32_t index) const noexcept {
    return region_->frames() + std::size_t{index} * frame_size();
}

void FramePool::write(FrameRef ref, std::size_t offset, std::span<const std::uint8_t> data) {
    check_access(ref, offset, data.size());
    std::memcpy(frame_base(ref.index) + offset, data.data(), data.size());
}

std::vector<std::uint8_t> FramePool::read(FrameRef ref, std::size_t offset, std::size_t len) const {
    check_access(ref, offset, len);
    const auto* p = frame_base(ref.index) + offset;
    return {p, p + len};
}

std::span<std::uint8_t> FramePool::frame(FrameRef ref) {
    check_access(ref, 0, 0);
    return {frame_base(ref.index), frame_size()};
}

std::span<const std::uint8_t> FramePool::frame(FrameRef ref) const {
    check_access(ref, 0, 0);
    return {frame_base(ref.index), frame_size()};
}

}  // namespace sfc
