#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sfc/bench.hpp"
#include "sfc/chain_spec.hpp"
#include "sfc/error.hpp"
#include "sfc/event_transport.hpp"
#include "sfc/ring_transport.hpp"
#include "sfc/upstream.hpp"

extern char** environ;

using namespace sfc;
using namespace std::chrono_literals;

namespace {

struct Common {
    std::string spec_path;
    std::string mode;
    double duration_s = 0;
    std::string out;
    bool json = false;
};

std::filesystem::path report_dir(const Common& c) {
    std::filesystem::path dir = "reports";
    if (const char* env = std::getenv("SFC_REPORT_DIR"); env && *env) dir = env;
    if (!c.out.empty()) dir = c.out;
    std::filesystem::create_directories(dir);
    return dir;
}

void write_file(const std::filesystem::path& p, const std::string& body) {
    std::ofstream out(p);
    if (!out) throw Error(Errc::IoError, "cannot write " + p.string());
    out << body;
}

ChainSpec spec_of(const Common& c) {
    auto s = c.spec_path.empty() ? default_spec() : load_spec(c.spec_path);
    if (!c.mode.empty()) {
        const auto m = parse_mode(c.mode);
        if (s.l2l3) s.l2l3->mode = m;
        if (s.l4l7) s.l4l7->mode = m;
    }
    return s;
}

std::chrono::milliseconds duration_or(const Common& c, std::uint32_t fallback_ms) {
    return std::chrono::milliseconds(c.duration_s > 0 ? static_cast<std::int64_t>(c.duration_s * 1000) : fallback_ms);
}

// Upstream stubs for an L4/L7 plane declared without upstreams.
std::vector<std::unique_ptr<UpstreamStub>> ensure_upstreams(ChainSpec& s) {
    std::vector<std::unique_ptr<UpstreamStub>> stubs;
    if (s.l4l7 && s.l4l7->upstreams.empty()) {
        for (int i = 0; i < 2; ++i) {
            stubs.push_back(std::make_unique<UpstreamStub>("stub" + std::to_string(i)));
            s.l4l7->upstreams.push_back(stubs.back()->address());
        }
    }
    return stubs;
}

HttpRequest default_request() {
    HttpRequest r;
    r.method = "GET";
    r.target = "/api/bench";
    r.headers = {{"Host", "sfchain"}};
    return r;
}

void emit(const Common& c, const std::string& text, const std::string& json) {
    std::cout << (c.json ? json : text) << (c.json ? "\n" : "");
}

void add_common(CLI::App* app, Common& c, bool spec = true) {
    if (spec) app->add_option("--spec", c.spec_path, "chain spec file (built-in two-function chains if omitted)");
    if (spec) app->add_option("--mode", c.mode, "polling|event, overrides the spec");
    app->add_option("--duration", c.duration_s, "seconds");
    app->add_option("--out", c.out, "report directory (default: $SFC_REPORT_DIR or ./reports)");
    app->add_flag("--json", c.json, "print JSON instead of text");
}

// -- multi-process -----------------------------------------------------------

int spawn_self(const std::vector<std::string>& args) {
    std::vector<char*> argv;
    std::string self = std::filesystem::read_symlink("/proc/self/exe").string();
    argv.push_back(self.data());
    std::vector<std::string> copy = args;
    for (auto& a : copy) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid;
    if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0) return -1;
    return pid;
}

int wait_child(int pid) {
    int status = 0;
    if (waitpid(pid, &status, 0) < 0) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int cmd_attach(const std::string& prefix, std::uint32_t frames, std::uint32_t frame_size, std::uint32_t ops) {
    try {
        auto pool = FramePool::attach(prefix);
        if (pool->frame_count() != frames || pool->frame_size() != frame_size) {
            std::cerr << "attach: geometry mismatch\n";
            return 1;
        }
        // Round trips through the shared free set, from this process.
        for (std::uint32_t i = 0; i < ops; ++i) {
            auto ref = pool->try_alloc();
            if (!ref) continue;
            const std::uint8_t byte = static_cast<std::uint8_t>(i);
            pool->write(*ref, 0, std::span(&byte, 1));
            if (pool->read(*ref, 0, 1)[0] != byte) return 1;
            pool->free(*ref);
        }
        std::cout << "attached " << prefix << " pid " << getpid() << " ops " << ops << "\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "attach: " << e.what() << "\n";
        return 1;
    }
}

// -- run-chain ---------------------------------------------------------------

int cmd_run_chain(Common& c, unsigned workers) {
    auto spec = spec_of(c);
    auto stubs = ensure_upstreams(spec);
    const auto dur = duration_or(c, spec.bench.duration_ms);
    if (workers && spec.l2l3) spec.l2l3->pool.file_backed = true;
    nlohmann::json j;
    bool ok = true;
    std::ostringstream text;

    std::unique_ptr<L2L3Plane> plane;
    DeliveryTracker tracker;
    if (spec.l2l3) {
        plane = build_l2l3(spec);
        plane->set_sink(tracker.sink());
        plane->start();
    }
    std::unique_ptr<Broker> broker;
    if (spec.l4l7) {
        broker = build_broker(spec);
        broker->start();
    }
    std::vector<int> pids;
    if (plane && workers) {
        for (unsigned w = 0; w < workers; ++w)
            pids.push_back(spawn_self({"attach", "--prefix", spec.l2l3->pool.domain_prefix, "--frames",
                                       std::to_string(spec.l2l3->pool.frame_count), "--frame-size",
                                       std::to_string(spec.l2l3->pool.frame_size), "--ops", "1000"}));
    }
    std::unique_ptr<HttpLoadGenerator> http;
    if (broker) {
        HttpLoadConfig hc;
        hc.target = broker->address();
        hc.concurrency = spec.bench.concurrency;
        hc.request = default_request();
        http = std::make_unique<HttpLoadGenerator>(hc);
        http->start();
    }
    if (plane) {
        PktgenConfig pc;
        pc.offered_rate = spec.bench.rate;
        pc.packet_size = spec.bench.packet_size;
        pc.duration = dur;
        auto r = pktgen_run(*plane, tracker, pc);
        const auto k = plane->counters();
        const bool identity = k.offered == k.egressed + k.dropped() && plane->in_flight() == 0;
        ok = ok && identity && tracker.duplicates() == 0 && !r.timed_out;
        j["l2l3"] = nlohmann::json::parse(r.to_json());
        j["l2l3"]["accounting_exact"] = identity;
        text << "l2l3  mode " << to_string(plane->mode()) << "  offered " << r.offered << "  delivered " << r.delivered
             << "  dropped " << r.dropped << "  accounting " << (identity ? "exact" : "MISMATCH") << "\n";
    } else if (http) {
        std::this_thread::sleep_for(dur);
    }
    if (http) {
        http->stop();
        const auto n = http->completed(), e = http->errors();
        ok = ok && e == 0 && n > 0;
        j["l4l7"] = {{"completed", n}, {"errors", e}};
        text << "l4l7  mode " << to_string(broker->mode()) << "  completed " << n << "  errors " << e << "\n";
    }
    for (int pid : pids) {
        const int rc = pid > 0 ? wait_child(pid) : -1;
        ok = ok && rc == 0;
        j["workers"].push_back(rc);
    }
    if (!pids.empty()) {
        text << "workers " << pids.size() << " attached by prefix, exit codes";
        for (auto& rc : j["workers"]) text << " " << rc.get<int>();
        text << "\n";
    }
    if (broker) broker->stop();
    if (plane) {
        plane->stop();
        const bool pool_whole = plane->pool()->free_count() == plane->pool()->frame_count();
        ok = ok && pool_whole;
        j["pool_restored"] = pool_whole;
    }
    j["passed"] = ok;
    write_file(report_dir(c) / "run_chain.json", j.dump(2));
    emit(c, text.str() + (ok ? "PASS\n" : "FAIL\n"), j.dump(2));
    return ok ? 0 : 1;
}

// -- bench -------------------------------------------------------------------

int cmd_bench_l2l3(Common& c, bool mlfr, double rate) {
    auto spec = spec_of(c);
    if (!spec.l2l3) throw Error(Errc::InvalidConfig, "spec declares no l2l3 plane");
    const auto dur = duration_or(c, spec.bench.duration_ms);
    PktgenConfig pc;
    pc.packet_size = spec.bench.packet_size;
    pc.duration = dur;
    pc.offered_rate = rate > 0 ? rate : spec.bench.rate;
    nlohmann::json j;
    bool ok = true;
    std::ostringstream text;
    if (!mlfr) {
        DeliveryTracker tracker;
        auto plane = build_l2l3(spec);
        plane->set_sink(tracker.sink());
        plane->start();
        auto r = pktgen_run(*plane, tracker, pc);
        r.name = "bench-l2l3";
        std::this_thread::sleep_for(100ms);
        r.cpu = cpu_sample(plane->contexts(), 200ms);
        plane->stop();
        ok = r.offered == r.delivered + r.dropped;
        j = nlohmann::json::parse(r.to_json());
        text << "l2l3 " << to_string(spec.l2l3->mode) << "  offered " << r.offered << " @ " << pc.offered_rate
             << " pps  delivered " << r.delivered << "  loss " << r.loss_fraction << "  median latency "
             << r.latency.median_ns << " ns\n";
    } else {
        L2L3LossProbe probe([&](PacketSink sink) {
            auto p = build_l2l3(spec);
            p->set_sink(std::move(sink));
            return p;
        }, pc);
        MlfrOptions o;
        o.rate_min = spec.bench.mlfr_min;
        o.rate_max = spec.bench.mlfr_max;
        o.tolerance = spec.bench.mlfr_tolerance;
        auto r = mlfr_search(probe, o);
        // Confirmation window at the found rate, stepping down on loss.
        PktgenConfig confirm = pc;
        confirm.duration = std::chrono::milliseconds(spec.bench.confirm_ms);
        L2L3LossProbe cprobe([&](PacketSink sink) {
            auto p = build_l2l3(spec);
            p->set_sink(std::move(sink));
            return p;
        }, confirm);
        double confirmed = 0;
        for (double cand = r.rate; cand >= o.rate_min && confirmed == 0; cand *= (1 - o.tolerance))
            if (cprobe.lost_at(cand) == 0) confirmed = cand;
        ok = confirmed > 0;
        j = {{"mode", to_string(spec.l2l3->mode)}, {"mlfr", r.rate},       {"upper", r.upper},
             {"confirmed", confirmed},              {"iterations", r.iterations}, {"bound", o.iteration_bound()}};
        for (auto& [rate_, lost] : r.probes) j["probes"].push_back({{"rate", rate_}, {"lost", lost}});
        text << "l2l3 " << to_string(spec.l2l3->mode) << "  MLFR " << r.rate << " pps (bracket " << r.rate << ".."
             << r.upper << ", " << r.iterations << " probes), confirmed " << confirmed << " pps\n";
    }
    j["passed"] = ok;
    write_file(report_dir(c) / (mlfr ? "bench_l2l3_mlfr.json" : "bench_l2l3.json"), j.dump(2));
    emit(c, text.str(), j.dump(2));
    return ok ? 0 : 1;
}

int cmd_bench_l4l7(Common& c, unsigned concurrency, bool idle) {
    auto spec = spec_of(c);
    if (!spec.l4l7) throw Error(Errc::InvalidConfig, "spec declares no l4l7 plane");
    auto stubs = ensure_upstreams(spec);
    const auto dur = duration_or(c, spec.bench.duration_ms);
    auto broker = build_broker(spec);
    broker->start();
    nlohmann::json j;
    std::ostringstream text;
    bool ok = true;
    if (idle) {
        std::this_thread::sleep_for(200ms);
        auto cpu = cpu_sample(broker->contexts(), dur);
        const double total = total_fraction(cpu);
        j = {{"mode", to_string(broker->mode())}, {"idle_cpu", total}};
        text << "l4l7 " << to_string(broker->mode()) << "  idle CPU " << total * 100 << "% of one core\n";
    } else {
        HttpLoadConfig hc;
        hc.target = broker->address();
        hc.concurrency = concurrency ? concurrency : spec.bench.concurrency;
        hc.duration = dur;
        hc.request = default_request();
        BenchReport r;
        std::vector<CpuSample> cpu;
        std::thread sampler([&] {
            std::this_thread::sleep_for(dur / 10);
            cpu = cpu_sample(broker->contexts(), dur * 8 / 10);
        });
        r = http_load(hc);
        sampler.join();
        r.name = "bench-l4l7";
        r.cpu = cpu;
        ok = r.delivered > 0 && r.dropped == 0;
        j = nlohmann::json::parse(r.to_json());
        j["mode"] = to_string(broker->mode());
        j["rps"] = r.delivered_rate;
        text << "l4l7 " << to_string(broker->mode()) << "  concurrency " << hc.concurrency << "  " << r.delivered_rate
             << " rps  median " << r.latency.median_ns / 1000 << " us  p99 " << r.latency.p99_ns / 1000
             << " us  broker CPU " << total_fraction(cpu) * 100 << "%\n";
        std::ostringstream lines;
        for (const auto& rec : broker->latency_records())
            lines << nlohmann::json{{"trace_id", rec.trace_id},
                                    {"t_ingress", rec.t_ingress_ns},
                                    {"t_egress", rec.t_egress_ns},
                                    {"mode", to_string(rec.mode)}}
                         .dump()
                  << "\n";
        write_file(report_dir(c) / "l4l7_latency.jsonl", lines.str());
    }
    broker->stop();
    j["passed"] = ok;
    write_file(report_dir(c) / (idle ? "bench_l4l7_idle.json" : "bench_l4l7.json"), j.dump(2));
    emit(c, text.str(), j.dump(2));
    return ok ? 0 : 1;
}

int cmd_bench_unified(Common& c, UnifiedConfig u, double step_s) {
    if (c.duration_s > 0) u.duration = std::chrono::milliseconds(static_cast<std::int64_t>(c.duration_s * 1000));
    if (step_s > 0) u.step_at = std::chrono::milliseconds(static_cast<std::int64_t>(step_s * 1000));
    auto r = unified_run(u);
    const bool within = std::abs(r.aggregate_ratio - 1.0) <= 0.10;
    const bool ok = within && r.audit_unchanged;
    write_file(report_dir(c) / "unified.json", r.to_json());
    write_file(report_dir(c) / "unified.tsv", r.to_tsv());
    std::ostringstream text;
    text << r.to_tsv() << "solo plateau " << r.solo_plateau << "  after step: l2l3 " << r.l2l3_after << " + l4l7 "
         << r.l4l7_after << " = " << r.aggregate_after << "  ratio " << r.aggregate_ratio << "\n"
         << "coexistence audit " << (r.audit_unchanged ? "unchanged" : "CHANGED") << "\n"
         << (ok ? "PASS" : "FAIL") << "\n";
    emit(c, text.str(), r.to_json());
    return ok ? 0 : 1;
}

// -- audit -------------------------------------------------------------------

std::vector<ModelId> models_of(const std::string& name) {
    if (name == "all") return {kAllModels.begin(), kAllModels.end()};
    return {parse_model(name)};
}

int cmd_audit_predict(Common& c, const std::string& name) {
    std::string text;
    nlohmann::json j = nlohmann::json::array();
    for (auto m : models_of(name)) {
        text += render_prediction_text(m) + "\n";
        j.push_back(nlohmann::json::parse(render_prediction_json(m)));
    }
    write_file(report_dir(c) / ("audit_predict_" + name + ".json"), j.dump(2));
    emit(c, text, j.dump(2));
    return 0;
}

int cmd_audit_verify(Common& c, const std::string& name, std::size_t count, std::uint32_t chain_len, bool dump) {
    const auto m = parse_model(name);
    auto a = dynamic_audit(m, count, chain_len, "cli-audit");
    const auto dir = report_dir(c);
    if (dump) {
        write_file(dir / ("ledger_" + name + ".csv"), a.ledger->dump_csv());
        std::cout << (c.json ? a.report.to_json() + "\n" : "wrote " + (dir / ("ledger_" + name + ".csv")).string() + "\n");
        return 0;
    }
    write_file(dir / ("audit_verify_" + name + ".json"), a.report.to_json());
    emit(c, a.report.to_text(), a.report.to_json());
    return a.report.passed ? 0 : 1;
}

int cmd_audit_extrapolate(Common& c, const std::string& name, std::uint32_t max_n) {
    nlohmann::json j = nlohmann::json::array();
    std::ostringstream text;
    for (auto m : models_of(name)) {
        text << to_string(m) << "\n  N";
        for (auto cat : kAllCategories) text << "  " << to_string(cat);
        text << "\n";
        for (std::uint32_t n = 1; n <= max_n; ++n) {
            const auto v = extrapolate(m, n);
            text << "  " << n;
            nlohmann::json row{{"model", to_string(m)}, {"n", n}};
            for (auto cat : kAllCategories) {
                text << "  " << v[cat];
                row[std::string(to_string(cat))] = v[cat];
            }
            text << "\n";
            j.push_back(row);
        }
    }
    write_file(report_dir(c) / ("audit_extrapolate_" + name + ".json"), j.dump(2));
    emit(c, text.str(), j.dump(2));
    return 0;
}

int cmd_probe_latency(Common& c, std::size_t samples) {
    const auto ring = ring_hop_latency_probe(samples);
    const auto event = event_hop_latency_probe(samples);
    const bool ok = ring.median_ns * 5 <= event.median_ns;
    nlohmann::json j{{"ring_median_ns", ring.median_ns}, {"ring_p99_ns", ring.p99_ns},
                     {"event_median_ns", event.median_ns}, {"event_p99_ns", event.p99_ns},
                     {"ratio", ring.median_ns > 0 ? event.median_ns / ring.median_ns : 0}, {"passed", ok}};
    write_file(report_dir(c) / "probe_latency.json", j.dump(2));
    std::ostringstream text;
    text << "ring  median " << ring.median_ns << " ns  p99 " << ring.p99_ns << " ns\n"
         << "event median " << event.median_ns << " ns  p99 " << event.p99_ns << " ns\n"
         << "event/ring " << j["ratio"].get<double>() << (ok ? "  PASS" : "  FAIL") << "\n";
    emit(c, text.str(), j.dump(2));
    return ok ? 0 : 1;
}

int cmd_classify(Common& c, const std::string& flow) {
    auto spec = spec_of(c);
    auto table = build_classifier(spec);
    // "proto src:sport dst:dport"
    std::istringstream in(flow);
    std::string proto, src, dst;
    in >> proto >> src >> dst;
    auto s = SocketAddress::parse(src), d = SocketAddress::parse(dst);
    FlowKey k{Ipv4::parse(s.host), Ipv4::parse(d.host), s.port, d.port, parse_protocol(proto)};
    const auto target = table->classify(k);
    nlohmann::json j{{"flow", k.str()}, {"target", to_string(target)}};
    emit(c, std::string(to_string(target)) + "\n", j.dump(2));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Service function chain runner: planes, benchmarks and overhead audits"};
    app.require_subcommand(1);
    Common c;
    int rc = 0;

    auto* run = app.add_subcommand("run-chain", "start the planes of a spec and drive traffic through them");
    add_common(run, c);
    unsigned workers = 0;
    run->add_option("--workers", workers, "worker processes that attach the L2/L3 pool by prefix");

    auto* b23 = app.add_subcommand("bench-l2l3", "packet generator run or MLFR search on the L2/L3 plane");
    add_common(b23, c);
    bool mlfr = false;
    double rate = 0;
    b23->add_flag("--mlfr", mlfr, "search the maximum loss-free rate");
    b23->add_option("--rate", rate, "offered rate in packets per second");

    auto* b47 = app.add_subcommand("bench-l4l7", "HTTP load against the L4/L7 plane");
    add_common(b47, c);
    unsigned concurrency = 0;
    bool idle = false;
    b47->add_option("--concurrency", concurrency, "closed-loop clients (1..512)");
    b47->add_flag("--idle", idle, "measure broker CPU with no load");

    auto* buni = app.add_subcommand("bench-unified", "both planes on one shaped link with an L4/L7 load step");
    add_common(buni, c, false);
    UnifiedConfig ucfg;
    double step_s = 0;
    buni->add_option("--step-at", step_s, "seconds until the L4/L7 load starts");
    buni->add_option("--link-rate", ucfg.link_rate, "link capacity in 64-byte units per second");
    buni->add_option("--l2l3-rate", ucfg.l2l3_offered, "offered L2/L3 packets per second");
    buni->add_option("--concurrency", ucfg.http_concurrency, "L4/L7 clients");
    buni->add_option("--l4l7-share", ucfg.l4l7_share, "fraction of the link the L4/L7 load asks for");

    auto* audit = app.add_subcommand("audit", "overhead audit: predictions and instrumented runs");
    audit->require_subcommand(1);
    std::string model;
    std::size_t count = 1000;
    std::uint32_t chain_len = 2, max_n = 16;
    auto* predict = audit->add_subcommand("predict", "per-step cost vectors and totals of a model");
    predict->add_option("model", model, "a..h, alpha, beta, gamma, delta, unified_hw, unified_sw or all")->required();
    add_common(predict, c, false);
    auto* verify_cmd = audit->add_subcommand("verify", "instrumented run checked against the model");
    verify_cmd->add_option("model", model, "alpha, beta, gamma or delta")->required();
    verify_cmd->add_option("--count", count, "traces");
    verify_cmd->add_option("--chain-len", chain_len, "functions in the chain");
    add_common(verify_cmd, c, false);
    auto* dump = audit->add_subcommand("dump", "instrumented run, raw ledger written as CSV");
    dump->add_option("model", model, "alpha, beta, gamma or delta")->required();
    dump->add_option("--count", count, "traces");
    dump->add_option("--chain-len", chain_len, "functions in the chain");
    add_common(dump, c, false);
    auto* extra = audit->add_subcommand("extrapolate", "closed-form totals for chain lengths 1..N");
    extra->add_option("model", model, "model name or all")->required();
    extra->add_option("--max", max_n, "largest chain length");
    add_common(extra, c, false);

    auto* probe = app.add_subcommand("probe-latency", "one-hop latency of the ring and event transports");
    std::size_t samples = 10000;
    probe->add_option("--samples", samples, "samples per transport");
    add_common(probe, c, false);

    auto* cls = app.add_subcommand("classify", "plane a 5-tuple is steered to");
    std::string flow;
    cls->add_option("flow", flow, "\"udp 10.0.0.1:5000 10.0.0.5:9\"")->required();
    add_common(cls, c);

    auto* att = app.add_subcommand("attach", "worker: attach a file-backed pool by prefix and exercise it");
    std::string prefix;
    std::uint32_t frames = 0, frame_size = 0, ops = 0;
    att->add_option("--prefix", prefix)->required();
    att->add_option("--frames", frames)->required();
    att->add_option("--frame-size", frame_size)->required();
    att->add_option("--ops", ops);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) rc = cmd_run_chain(c, workers);
        else if (*b23) rc = cmd_bench_l2l3(c, mlfr, rate);
        else if (*b47) rc = cmd_bench_l4l7(c, concurrency, idle);
        else if (*buni) rc = cmd_bench_unified(c, ucfg, step_s);
        else if (*predict) rc = cmd_audit_predict(c, model);
        else if (*verify_cmd) rc = cmd_audit_verify(c, model, count, chain_len, false);
        else if (*dump) rc = cmd_audit_verify(c, model, count, chain_len, true);
        else if (*extra) rc = cmd_audit_extrapolate(c, model, max_n);
        else if (*probe) rc = cmd_probe_latency(c, samples);
        else if (*cls) rc = cmd_classify(c, flow);
        else if (*att) rc = cmd_attach(prefix, frames, frame_size, ops);
    } catch (const SpecError& e) {
        std::cerr << (c.spec_path.empty() ? "spec" : c.spec_path) << ":" << e.line() << ":" << e.column() << ": "
                  << to_string(e.code()) << ": " << e.reason() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return rc;
}
