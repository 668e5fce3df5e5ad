#include "sfc/http.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>

namespace sfc {

namespace {

constexpr std::string_view kCrlf = "\r\n";
constexpr std::size_t kMaxHead = 64 * 1024;

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

std::optional<std::string_view> find_header(const HeaderList& h, std::string_view name) {
    for (const auto& [k, v] : h)
        if (iequals(k, name)) return std::string_view(v);
    return std::nullopt;
}

bool valid_token(std::string_view s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return c > 32 && c < 127 && c != '(' && c != ')' && c != ',' && c != '/' && c != ':' && c != ';' &&
               c != '<' && c != '=' && c != '>' && c != '?' && c != '@' && c != '[' && c != '\\' && c != ']' &&
               c != '{' && c != '}' && c != '"';
    });
}

struct Head {
    std::string_view start_line;
    HeaderList headers;
    std::size_t head_len = 0;
    std::size_t content_length = 0;
};

template <typename R>
bool fail(R& r, std::string msg) {
    r.status = ParseStatus::Error;
    r.error = std::move(msg);
    return false;
}

template <typename R>
bool parse_head(std::string_view buf, Head& head, R& r) {
    const auto end = buf.find("\r\n\r\n");
    if (end == std::string_view::npos) {
        if (buf.size() > kMaxHead) return fail(r, "header section too large");
        r.status = ParseStatus::Incomplete;
        return false;
    }
    head.head_len = end + 4;
    std::string_view rest = buf.substr(0, end + 2);
    auto eol = rest.find(kCrlf);
    head.start_line = rest.substr(0, eol);
    rest.remove_prefix(eol + 2);
    bool have_length = false;
    while (!rest.empty()) {
        eol = rest.find(kCrlf);
        auto line = rest.substr(0, eol);
        rest.remove_prefix(eol + 2);
        auto colon = line.find(':');
        if (colon == std::string_view::npos || colon == 0) return fail(r, "malformed header line");
        auto name = line.substr(0, colon);
        if (!valid_token(name)) return fail(r, "invalid header name");
        auto value = trim(line.substr(colon + 1));
        if (iequals(name, "transfer-encoding")) return fail(r, "transfer-encoding not supported");
        if (iequals(name, "content-length")) {
            std::size_t n = 0;
            auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), n);
            if (ec != std::errc{} || p != value.data() + value.size()) return fail(r, "bad content-length");
            if (have_length && n != head.content_length) return fail(r, "conflicting content-length");
            head.content_length = n;
            have_length = true;
        }
        head.headers.emplace_back(std::string(name), std::string(value));
    }
    return true;
}

template <typename M>
void finish(ParseResult<M>& r, std::string_view buf, const Head& head) {
    if (buf.size() < head.head_len + head.content_length) {
        r.status = ParseStatus::Incomplete;
        return;
    }
    r.message.headers = head.headers;
    r.message.body.assign(buf.substr(head.head_len, head.content_length));
    r.consumed = head.head_len + head.content_length;
    r.status = ParseStatus::Complete;
}

void append_headers(std::string& out, const HeaderList& headers, std::size_t body_len) {
    for (const auto& [k, v] : headers) {
        if (iequals(k, "content-length")) continue;
        out.append(k).append(": ").append(v).append(kCrlf);
    }
    out.append("Content-Length: ").append(std::to_string(body_len)).append(kCrlf).append(kCrlf);
}

constexpr std::size_t kMetaSpan = (sizeof(HttpMetaBlock) + 63) / 64 * 64;

bool copy_field(char* dst, std::size_t cap, std::string_view v, auto& len) {
    if (v.size() > cap) return false;
    std::memcpy(dst, v.data(), v.size());
    len = static_cast<std::remove_reference_t<decltype(len)>>(v.size());
    return true;
}

template <typename M>
std::optional<std::size_t> store(std::span<std::uint8_t> frame, HttpMetaBlock& meta, const M& msg) {
    std::string other;
    for (const auto& [k, v] : msg.headers) {
        if (iequals(k, "content-length") || (!meta.is_response && iequals(k, "host"))) continue;
        other.append(k).append(": ").append(v).append(kCrlf);
    }
    const std::size_t need = http_frame_bytes(other.size(), msg.body.size());
    if (need > frame.size()) return std::nullopt;
    meta.headers_offset = static_cast<std::uint32_t>(kMetaSpan);
    meta.headers_len = static_cast<std::uint32_t>(other.size());
    meta.body_offset = static_cast<std::uint32_t>(kMetaSpan + other.size());
    meta.body_len = static_cast<std::uint32_t>(msg.body.size());
    std::memcpy(frame.data(), &meta, sizeof meta);
    std::memcpy(frame.data() + meta.headers_offset, other.data(), other.size());
    std::memcpy(frame.data() + meta.body_offset, msg.body.data(), msg.body.size());
    return need;
}

}  // namespace

bool iequals(std::string_view a, std::string_view b) noexcept {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto lower = [](char c) { return c >= 'A' && c <= 'Z' ? static_cast<char>(c + 32) : c; };
        if (lower(a[i]) != lower(b[i])) return false;
    }
    return true;
}

std::optional<std::string_view> HttpRequest::header(std::string_view name) const { return find_header(headers, name); }
std::optional<std::string_view> HttpResponse::header(std::string_view name) const {
    return find_header(headers, name);
}

ParseResult<HttpRequest> parse_request(std::string_view buf) {
    ParseResult<HttpRequest> r;
    Head head;
    if (!parse_head(buf, head, r)) return r;
    auto line = head.start_line;
    auto sp1 = line.find(' ');
    auto sp2 = sp1 == std::string_view::npos ? sp1 : line.find(' ', sp1 + 1);
    if (sp2 == std::string_view::npos || line.find(' ', sp2 + 1) != std::string_view::npos) {
        fail(r, "malformed request line");
        return r;
    }
    auto method = line.substr(0, sp1);
    auto target = line.substr(sp1 + 1, sp2 - sp1 - 1);
    auto version = line.substr(sp2 + 1);
    if (!valid_token(method)) {
        fail(r, "invalid method");
        return r;
    }
    if (target.empty() || target.front() != '/') {
        fail(r, "invalid request target");
        return r;
    }
    if (version != "HTTP/1.1" && version != "HTTP/1.0") {
        fail(r, "unsupported version");
        return r;
    }
    r.message.method = method;
    r.message.target = target;
    r.message.version = version;
    finish(r, buf, head);
    return r;
}

ParseResult<HttpResponse> parse_response(std::string_view buf) {
    ParseResult<HttpResponse> r;
    Head head;
    if (!parse_head(buf, head, r)) return r;
    auto line = head.start_line;
    auto sp1 = line.find(' ');
    if (sp1 == std::string_view::npos || line.substr(0, 5) != "HTTP/") {
        fail(r, "malformed status line");
        return r;
    }
    auto rest = line.substr(sp1 + 1);
    auto sp2 = rest.find(' ');
    auto code = rest.substr(0, sp2);
    int status = 0;
    auto [p, ec] = std::from_chars(code.data(), code.data() + code.size(), status);
    if (ec != std::errc{} || p != code.data() + code.size() || status < 100 || status > 999) {
        fail(r, "bad status code");
        return r;
    }
    r.message.version = line.substr(0, sp1);
    r.message.status = status;
    r.message.reason = sp2 == std::string_view::npos ? "" : std::string(rest.substr(sp2 + 1));
    finish(r, buf, head);
    return r;
}

std::string serialize(const HttpRequest& req) {
    std::string out;
    out.reserve(128 + req.body.size());
    out.append(req.method).append(" ").append(req.target).append(" ").append(req.version).append(kCrlf);
    append_headers(out, req.headers, req.body.size());
    out.append(req.body);
    return out;
}

std::string serialize(const HttpResponse& resp) {
    std::string out;
    out.reserve(128 + resp.body.size());
    out.append(resp.version).append(" ").append(std::to_string(resp.status)).append(" ").append(resp.reason);
    out.append(kCrlf);
    append_headers(out, resp.headers, resp.body.size());
    out.append(resp.body);
    return out;
}

bool HttpMetaBlock::set_path(std::string_view p) noexcept { return copy_field(path, kPathMax, p, path_len); }
bool HttpMetaBlock::set_host(std::string_view h) noexcept { return copy_field(host, kHostMax, h, host_len); }

std::size_t http_frame_bytes(std::size_t headers_len, std::size_t body_len) {
    return kMetaSpan + headers_len + body_len;
}

std::optional<std::size_t> store_request(std::span<std::uint8_t> frame, const HttpRequest& req,
                                         std::uint64_t connection_id) {
    HttpMetaBlock meta;
    meta.connection_id = connection_id;
    if (!copy_field(meta.method, HttpMetaBlock::kMethodMax, req.method, meta.method_len)) return std::nullopt;
    if (!meta.set_path(req.target)) return std::nullopt;
    if (auto h = req.header("host"); h && !meta.set_host(*h)) return std::nullopt;
    return store(frame, meta, req);
}

std::optional<std::size_t> store_response(std::span<std::uint8_t> frame, const HttpResponse& resp,
                                          std::uint64_t connection_id) {
    HttpMetaBlock meta;
    meta.is_response = 1;
    meta.connection_id = connection_id;
    meta.status = static_cast<std::uint16_t>(resp.status);
    std::string_view reason = resp.reason;
    if (reason.size() > HttpMetaBlock::kReasonMax) reason = reason.substr(0, HttpMetaBlock::kReasonMax);
    copy_field(meta.reason, HttpMetaBlock::kReasonMax, reason, meta.reason_len);
    return store(frame, meta, resp);
}

HttpMetaBlock* meta_of(std::span<std::uint8_t> frame) noexcept {
    if (frame.size() < sizeof(HttpMetaBlock)) return nullptr;
    auto* m = reinterpret_cast<HttpMetaBlock*>(frame.data());
    return m->magic == HttpMetaBlock::kMagic ? m : nullptr;
}

const HttpMetaBlock* meta_of(std::span<const std::uint8_t> frame) noexcept {
    if (frame.size() < sizeof(HttpMetaBlock)) return nullptr;
    auto* m = reinterpret_cast<const HttpMetaBlock*>(frame.data());
    return m->magic == HttpMetaBlock::kMagic ? m : nullptr;
}

void render_stored(std::span<const std::uint8_t> frame, std::string& out) {
    out.clear();
    const auto* m = meta_of(frame);
    if (!m) return;
    auto text = [&](std::uint32_t off, std::uint32_t len) {
        return std::string_view(reinterpret_cast<const char*>(frame.data()) + off, len);
    };
    out.reserve(256 + m->headers_len + m->body_len);
    if (m->is_response) {
        out.append("HTTP/1.1 ").append(std::to_string(m->status)).append(" ").append(m->reason_view());
    } else {
        out.append(m->method_view()).append(" ").append(m->path_view()).append(" HTTP/1.1");
    }
    out.append(kCrlf);
    if (!m->is_response && m->host_len) out.append("Host: ").append(m->host_view()).append(kCrlf);
    out.append(text(m->headers_offset, m->headers_len));
    out.append("Content-Length: ").append(std::to_string(m->body_len)).append(kCrlf).append(kCrlf);
    out.append(text(m->body_offset, m->body_len));
}

}  // namespace sfc
