#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace sfc {

using HeaderList = std::vector<std::pair<std::string, std::string>>;

struct HttpRequest {
    std::string method;
    std::string target;
    std::string version = "HTTP/1.1";
    HeaderList headers;
    std::string body;

    std::optional<std::string_view> header(std::string_view name) const;
};

struct HttpResponse {
    int status = 200;
    std::string reason = "OK";
    std::string version = "HTTP/1.1";
    HeaderList headers;
    std::string body;

    std::optional<std::string_view> header(std::string_view name) const;
};

enum class ParseStatus : std::uint8_t { Complete, Incomplete, Error };

template <typename Message>
struct ParseResult {
    ParseStatus status = ParseStatus::Incomplete;
    Message message;
    std::size_t consumed = 0;
    std::string error;
};

/// HTTP/1.1 with Content-Length framing only. Chunked transfer coding is
/// refused as a parse error.
ParseResult<HttpRequest> parse_request(std::string_view buf);
ParseResult<HttpResponse> parse_response(std::string_view buf);

/// Serializers always emit a Content-Length matching the body.
std::string serialize(const HttpRequest& req);
std::string serialize(const HttpResponse& resp);

bool iequals(std::string_view a, std::string_view b) noexcept;

/// Parsed form of an HTTP message as stored at the start of a shared frame.
/// Middlebox functions edit these fields in place; the remaining header
/// lines and the body follow the block in the frame and are never touched
/// by the chain.
struct HttpMetaBlock {
    static constexpr std::uint32_t kMagic = 0x48545450;  // "HTTP"
    static constexpr std::size_t kMethodMax = 16;
    static constexpr std::size_t kPathMax = 1024;
    static constexpr std::size_t kHostMax = 256;
    static constexpr std::size_t kReasonMax = 64;

    std::uint32_t magic = kMagic;
    std::uint8_t is_response = 0;
    std::uint8_t method_len = 0;
    std::uint16_t path_len = 0;
    std::uint16_t host_len = 0;
    std::uint16_t status = 0;
    std::int32_t backend_choice = -1;
    std::uint64_t connection_id = 0;
    std::uint32_t headers_offset = 0;  // raw "Name: value\r\n" lines, frame-relative
    std::uint32_t headers_len = 0;
    std::uint32_t body_offset = 0;
    std::uint32_t body_len = 0;
    std::uint8_t reason_len = 0;
    char method[kMethodMax] = {};
    char path[kPathMax] = {};
    char host[kHostMax] = {};
    char reason[kReasonMax] = {};

    std::string_view method_view() const noexcept { return {method, method_len}; }
    std::string_view path_view() const noexcept { return {path, path_len}; }
    std::string_view host_view() const noexcept { return {host, host_len}; }
    std::string_view reason_view() const noexcept { return {reason, reason_len}; }
    /// Returns false when the value does not fit.
    bool set_path(std::string_view p) noexcept;
    bool set_host(std::string_view h) noexcept;
};

static_assert(std::is_trivially_copyable_v<HttpMetaBlock>);

/// Bytes needed to store a message with this block, headers and body.
std::size_t http_frame_bytes(std::size_t headers_len, std::size_t body_len);

/// Writes the message into `frame`: meta block, then the header lines other
/// than Host and Content-Length, then the body. Returns the number of bytes
/// used or nullopt if it does not fit. This is the single payload copy into
/// shared memory.
std::optional<std::size_t> store_request(std::span<std::uint8_t> frame, const HttpRequest& req,
                                         std::uint64_t connection_id);
std::optional<std::size_t> store_response(std::span<std::uint8_t> frame, const HttpResponse& resp,
                                          std::uint64_t connection_id);

HttpMetaBlock* meta_of(std::span<std::uint8_t> frame) noexcept;
const HttpMetaBlock* meta_of(std::span<const std::uint8_t> frame) noexcept;

/// Renders the stored message back onto the wire into `out` (cleared first).
void render_stored(std::span<const std::uint8_t> frame, std::string& out);

}  // namespace sfc
