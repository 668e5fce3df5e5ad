#include "doctest.h"
#include "sfc/functions.hpp"
#include "sfc/http.hpp"

using namespace sfc;

TEST_SUITE("http") {
    TEST_CASE("request parsing") {
        auto r = parse_request("GET /index.html HTTP/1.1\r\nHost: a\r\n\r\n");
        REQUIRE(r.status == ParseStatus::Complete);
        CHECK(r.message.method == "GET");
        CHECK(r.message.target == "/index.html");
        CHECK(*r.message.header("HOST") == "a");

        auto post = parse_request("POST /x HTTP/1.1\r\nContent-Length: 5\r\n\r\nhello EXTRA");
        REQUIRE(post.status == ParseStatus::Complete);
        CHECK(post.message.body == "hello");
        CHECK(post.consumed == std::string_view("POST /x HTTP/1.1\r\nContent-Length: 5\r\n\r\nhello").size());

        CHECK(parse_request("GET /x HTTP/1.1\r\nContent-Length: 5\r\n\r\nhel").status == ParseStatus::Incomplete);
        CHECK(parse_request("GET /x HTTP/1.1\r\n").status == ParseStatus::Incomplete);
        CHECK(parse_request("GARBAGE\r\n\r\n").status == ParseStatus::Error);
        CHECK(parse_request("GET x HTTP/1.1\r\n\r\n").status == ParseStatus::Error);
        CHECK(parse_request("GET /x HTTP/1.1\r\nTransfer-Encoding: chunked\r\n\r\n").status == ParseStatus::Error);
        CHECK(parse_request("GET /x HTTP/1.1\r\nContent-Length: x\r\n\r\n").status == ParseStatus::Error);
    }

    TEST_CASE("response round trip") {
        HttpResponse resp;
        resp.status = 404;
        resp.reason = "Not Found";
        resp.headers = {{"X-A", "1"}};
        resp.body = "nope";
        auto wire = serialize(resp);
        auto back = parse_response(wire);
        REQUIRE(back.status == ParseStatus::Complete);
        CHECK(back.message.status == 404);
        CHECK(back.message.reason == "Not Found");
        CHECK(back.message.body == "nope");
        CHECK(*back.message.header("x-a") == "1");
    }

    TEST_CASE("stored request renders back to an equivalent message") {
        HttpRequest req;
        req.method = "POST";
        req.target = "/old/page";
        req.headers = {{"Host", "example"}, {"X-Trace", "7"}};
        req.body = std::string(1024, 'b');
        std::vector<std::uint8_t> frame(4096);
        auto used = store_request(frame, req, 42);
        REQUIRE(used.has_value());
        auto* meta = meta_of(std::span(frame));
        REQUIRE(meta != nullptr);
        CHECK(meta->path_view() == "/old/page");
        CHECK(meta->host_view() == "example");
        CHECK(meta->connection_id == 42);
        CHECK(meta->body_len == 1024);

        UrlRewriter rw;
        rw.add("/old/", "/new/");
        CHECK(rw.apply(*meta));
        std::string wire;
        render_stored(frame, wire);
        auto back = parse_request(wire);
        REQUIRE(back.status == ParseStatus::Complete);
        CHECK(back.message.target == "/new/page");
        CHECK(back.message.body == req.body);
        CHECK(*back.message.header("x-trace") == "7");
        CHECK(*back.message.header("host") == "example");

        std::vector<std::uint8_t> small(64);
        CHECK_FALSE(store_request(small, req, 1).has_value());
    }
}
