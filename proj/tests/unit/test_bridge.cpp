#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "lev/bridge.hpp"
#include "lev/errors.hpp"
#include "lev/orchestrator.hpp"
#include "lev/toy_backend.hpp"
#include "scenarios.hpp"

namespace lev::bridge {
namespace {

using namespace std::chrono_literals;

ToyConfig desk_toy() {
    ToyConfig c;
    c.max_output_length = 3;
    return c;
}

std::string remote_code(const std::string& response) {
    const auto j = Json::parse(response);
    return j.contains("error") ? j["error"]["code"].get<std::string>() : std::string("ok");
}

// Serves `backend` on the far end of a socketpair until shutdown.
class LocalServer {
public:
    explicit LocalServer(const Backend& backend) {
        auto [near, far] = connection_pair();
        client_end_ = std::move(near);
        thread_ = std::thread([&backend, conn = std::move(far)] { serve(backend, *conn); });
    }
    ~LocalServer() {
        client_end_.reset();
        thread_.join();
    }
    std::unique_ptr<Connection> take() { return std::move(client_end_); }

private:
    std::unique_ptr<FdConnection> client_end_;
    std::thread thread_;
};

TEST(Base64, KnownVectors) {
    auto enc = [](std::string_view s) {
        return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    };
    EXPECT_EQ(enc(""), "");
    EXPECT_EQ(enc("f"), "Zg==");
    EXPECT_EQ(enc("fo"), "Zm8=");
    EXPECT_EQ(enc("foo"), "Zm9v");
    EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
    const auto back = base64_decode("Zm9vYmE=");
    EXPECT_EQ(std::string(back.begin(), back.end()), "fooba");
}

TEST(Base64, RejectsBadInput) {
    for (const char* bad : {"Zm9", "Zm9v!A==", "Z===", "=Zm9", "Zm=v"}) {
        EXPECT_THROW(base64_decode(bad), ProtocolError) << bad;
    }
}

TEST(Base64, PropertyRoundTrip) {
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<std::uint8_t> bytes(rng.below(64));
        for (auto& b : bytes) {
            b = static_cast<std::uint8_t>(rng.below(256));
        }
        EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
    }
}

TEST(Tensor, FloatRoundTripIsLosslessInBothEncodings) {
    Rng rng(2);
    for (auto enc : {TensorEncoding::Decimal, TensorEncoding::Base64}) {
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
            auto v = testing::normals(rng, r * c, std::pow(10.0, static_cast<double>(rng.below(12)) - 6.0));
            v[0] = std::numeric_limits<float>::denorm_min();
            const auto j = Json::parse(encode_tensor(v, {r, c}, enc).dump());
            const auto back = decode_tensor(j, {r, c}, "t");
            for (std::size_t i = 0; i < v.size(); ++i) {
                EXPECT_EQ(static_cast<float>(back[i]), v[i]);
            }
        }
    }
}

TEST(Tensor, DoublesAreExactInDecimalAndRoundedInBase64) {
    const std::vector<double> v = {0.1, -1.0 / 3.0, 1e-300};
    EXPECT_EQ(decode_tensor(Json::parse(encode_tensor(v, {3}, TensorEncoding::Decimal).dump()), {3}, "g"), v);
    const auto b = decode_tensor(encode_tensor(v, {3}, TensorEncoding::Base64), {3}, "g");
    for (std::size_t i = 0; i < v.size(); ++i) {
        EXPECT_EQ(b[i], static_cast<double>(static_cast<float>(v[i])));
    }
}

TEST(Tensor, DecodeValidates) {
    const std::vector<float> v = {1, 2, 3, 4};
    const auto good = encode_tensor(v, {2, 2}, TensorEncoding::Decimal);
    EXPECT_THROW(decode_tensor(good, {4}, "x"), ProtocolError);
    EXPECT_THROW(decode_tensor(good, {2, 3}, "x"), ProtocolError);
    auto both = good;
    both["b64"] = "AAAA";
    EXPECT_THROW(decode_tensor(both, {2, 2}, "x"), ProtocolError);
    auto short_data = good;
    short_data["data"] = {1, 2, 3};
    EXPECT_THROW(decode_tensor(short_data, {2, 2}, "x"), ProtocolError);
    auto text = good;
    text["data"] = {1, 2, "3", 4};
    EXPECT_THROW(decode_tensor(text, {2, 2}, "x"), ProtocolError);
    const std::vector<float> nan = {1, std::numeric_limits<float>::quiet_NaN()};
    EXPECT_THROW(decode_tensor(encode_tensor(nan, {2}, TensorEncoding::Base64), {2}, "x"), ProtocolError);
    auto short_b64 = encode_tensor(v, {2, 2}, TensorEncoding::Base64);
    short_b64["shape"] = {2, 3};
    EXPECT_THROW(decode_tensor(short_b64, {2, 3}, "x"), ProtocolError);
    EXPECT_THROW(decode_tensor(Json::object(), {1}, "x"), ProtocolError);
    try {
        decode_tensor(good, {4}, "embed.embedding");
    } catch (const ProtocolError& e) {
        EXPECT_NE(std::string(e.what()).find("embed.embedding"), std::string::npos);
    }
}

TEST(Codec, ContextAndOutputRoundTrip) {
    // Scoring fields stay on the engine side.
    const QueryContext full("1+2=", "id", "3", "^x$");
    EXPECT_EQ(decode_context(Json::parse(encode_context(full).dump())), QueryContext("1+2=", "id"));
    const QueryContext bare("9", "b");
    EXPECT_EQ(decode_context(encode_context(bare)), bare);
    const OutputSequence y{{1, 2, 15}, "12", -3.25};
    EXPECT_EQ(decode_output(Json::parse(encode_output(y).dump())), y);
    EXPECT_THROW(decode_context(Json{{"text", 3}}), ProtocolError);
    EXPECT_THROW(decode_output(Json{{"tokens", {-1}}, {"text", ""}, {"log_prob", 0}}), ProtocolError);
}

TEST(Client, WrongIdMarksTheConnectionFailed) {
    Client c(std::make_unique<ScriptedConnection>(R"(> {"id":1,"method":"ping","params":{}}
< {"id":7,"result":{}}
)"),
             1s);
    EXPECT_THROW(c.call("ping", Json::object()), ProtocolError);
    EXPECT_TRUE(c.failed());
    EXPECT_THROW(c.call("ping", Json::object()), ProtocolError);
}

TEST(Client, MalformedResponsesAreProtocolErrors) {
    for (const char* reply : {"not json", R"({"id":1})", R"({"id":1,"result":{},"error":{}})",
                              R"({"id":1,"result":3})", R"({"id":1,"error":{"code":5,"message":"x"}})", "[1]"}) {
        Client c(std::make_unique<ScriptedConnection>(std::string("> {\"id\":1,\"method\":\"m\",\"params\":{}}\n< ") +
                                                      reply + "\n"),
                 1s);
        EXPECT_THROW(c.call("m", Json::object()), ProtocolError) << reply;
        EXPECT_TRUE(c.failed()) << reply;
    }
}

TEST(Client, RemoteErrorsLeaveTheConnectionUsable) {
    Client c(std::make_unique<ScriptedConnection>(R"(# two calls
> {"id":1,"method":"m","params":{}}
< {"id":1,"error":{"code":"domain","message":"bad token"}}

> {"id":2,"method":"m","params":{"a":1}}
< {"id":2,"result":{"ok":true}}
)"),
             1s);
    try {
        c.call("m", Json::object());
        FAIL();
    } catch (const RemoteError& e) {
        EXPECT_EQ(e.code(), "domain");
    }
    EXPECT_FALSE(c.failed());
    EXPECT_EQ(c.call("m", Json{{"a", 1}}), (Json{{"ok", true}}));
    EXPECT_EQ(c.next_id(), 3U);
}

TEST(Client, TimeoutAndClosedPeer) {
    {
        auto [near, far] = connection_pair();
        Client c(std::move(near), 50ms);
        const auto t0 = std::chrono::steady_clock::now();
        EXPECT_THROW(c.call("m", Json::object()), TimeoutError);
        EXPECT_GE(std::chrono::steady_clock::now() - t0, 45ms);
        EXPECT_TRUE(c.failed());
    }
    {
        auto [near, far] = connection_pair();
        far.reset();
        Client c(std::move(near), 1s);
        EXPECT_THROW(c.call("m", Json::object()), TransportError);
        EXPECT_TRUE(c.failed());
    }
}

TEST(FdConnection, SplitsAndJoinsLines) {
    auto [a, b] = connection_pair();
    a->send_line("one");
    a->send_line("two");
    EXPECT_EQ(b->receive_line(1s), "one");
    EXPECT_EQ(b->receive_line(1s), "two");
    const std::string big(1 << 20, 'x');
    std::thread writer([&, conn = a.get()] { conn->send_line(big); });
    EXPECT_EQ(b->receive_line(5s), big);
    writer.join();
}

TEST(Server, ErrorCodes) {
    const ToyBackend toy(desk_toy());
    ServerSession s;
    EXPECT_EQ(remote_code(handle_request(toy, "garbage", s)), "malformed");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"method":"shutdown"})", s)), "malformed");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":-1,"method":"shutdown"})", s)), "malformed");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":1,"method":4})", s)), "malformed");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":1,"method":"handshake","params":[]})", s)), "bad_params");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":1,"method":"embed_context","params":{}})", s)),
              "handshake_required");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":1,"method":"frobnicate"})", s)), "unknown_method");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":1,"method":"handshake","params":{"protocol":"LEV/2"}})", s)),
              "protocol_mismatch");
    EXPECT_EQ(
        remote_code(handle_request(
            toy, R"({"id":1,"method":"handshake","params":{"protocol":"LEV/1","tensor_encoding":"hex"}})", s)),
        "bad_params");
    EXPECT_FALSE(s.handshaken);
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":2,"method":"handshake","params":{"protocol":"LEV/1"}})", s)),
              "ok");
    EXPECT_TRUE(s.handshaken);
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":3,"method":"embed_context","params":{}})", s)), "bad_params");
    EXPECT_EQ(remote_code(handle_request(
                  toy, R"({"id":4,"method":"embed_context","params":{"context":{"text":"hi","task_id":"t"}}})", s)),
              "domain");
    EXPECT_EQ(remote_code(handle_request(
                  toy, R"({"id":5,"method":"base_latent","params":{"context":{"text":"1","task_id":"t"},"l_prime":0}})",
                  s)),
              "config");
    EXPECT_EQ(remote_code(handle_request(toy, R"({"id":6,"method":"judge_text","params":{"prompt":"x"}})", s)),
              "unsupported");
    const auto ok = Json::parse(handle_request(toy, R"({"id":7,"method":"shutdown"})", s));
    EXPECT_EQ(ok["id"], 7);
    EXPECT_TRUE(s.stop);
}

TEST(Server, ResponsesEchoTheRequestId) {
    const ToyBackend toy(desk_toy());
    ServerSession s;
    const auto r = Json::parse(handle_request(toy, R"({"id":12345,"method":"handshake","params":{"protocol":"LEV/1"}})", s));
    EXPECT_EQ(r["id"], 12345);
    EXPECT_EQ(r["result"]["d"], 16);
    EXPECT_EQ(r["result"]["tensor_encoding"], "decimal");
}

TEST(BridgeBackend, DecimalBridgeReproducesTheToyExactly) {
    const ToyBackend toy(desk_toy());
    LocalServer server(toy);
    BridgeBackend b(server.take(), 5s);
    EXPECT_EQ(b.encoding(), TensorEncoding::Decimal);
    auto want_desc = toy.descriptor();
    want_desc.supports_exact_enumeration = false;
    EXPECT_EQ(b.descriptor(), want_desc);
    for (const auto& ctx : synthetic_modular_tasks(5, 3)) {
        EXPECT_EQ(b.embed_context(ctx), toy.embed_context(ctx));
        const auto base = b.base_latent(ctx, 2);
        const auto want = toy.base_latent(ctx, 2);
        EXPECT_EQ(base.latent, want.latent);
        EXPECT_EQ(base.short_decode, want.short_decode);
        EXPECT_EQ(base.decoded_tokens, want.decoded_tokens);
        const auto ys = b.sample_outputs(ctx, base.latent, 4, 1.0, 9);
        EXPECT_EQ(ys, toy.sample_outputs(ctx, base.latent, 4, 1.0, 9));
        EXPECT_EQ(b.grad_log_prob(ctx, base.latent, ys[0]), toy.grad_log_prob(ctx, base.latent, ys[0]));
    }
    EXPECT_THROW(b.embed_context(QueryContext("abc", "t")), RemoteError);
    EXPECT_NO_THROW(b.embed_context(QueryContext("1", "t")));
    EXPECT_THROW(b.sample_outputs(QueryContext("1", "t"), LatentSequence(1, 3), 1, 1.0, 1), ShapeError);
    EXPECT_THROW(b.judge_text("x"), DomainError);
    EXPECT_THROW(b.enumerate_outputs(QueryContext("1", "t"), LatentSequence(1, 16)), Error);
    b.shutdown();
}

TEST(BridgeBackend, Base64BridgeRoundsGradientsToFloat) {
    const ToyBackend toy(desk_toy());
    LocalServer server(toy);
    BridgeBackend b(server.take(), 5s, TensorEncoding::Base64);
    EXPECT_EQ(b.encoding(), TensorEncoding::Base64);
    const auto ctx = synthetic_modular_tasks(1, 4).front();
    EXPECT_EQ(b.embed_context(ctx), toy.embed_context(ctx));
    const auto z = toy.base_latent(ctx, 2).latent;
    const auto y = toy.sample_outputs(ctx, z, 1, 1.0, 5).front();
    const auto got = b.grad_log_prob(ctx, z, y);
    const auto want = toy.grad_log_prob(ctx, z, y);
    for (std::size_t i = 0; i < want.data.size(); ++i) {
        EXPECT_EQ(got.data[i], static_cast<double>(static_cast<float>(want.data[i])));
    }
}

TEST(BridgeBackend, ConcurrentCallersShareOneConnection) {
    const ToyBackend toy(desk_toy());
    LocalServer server(toy);
    const BridgeBackend b(server.take(), 5s);
    const auto tasks = synthetic_modular_tasks(8, 5);
    std::vector<std::thread> threads;
    std::atomic<int> wrong{0};
    for (const auto& ctx : tasks) {
        threads.emplace_back([&, ctx] {
            for (int i = 0; i < 10; ++i) {
                if (!(b.embed_context(ctx) == toy.embed_context(ctx))) {
                    ++wrong;
                }
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    EXPECT_EQ(wrong.load(), 0);
}

TEST(BridgeBackend, HandshakeRejectsABadServer) {
    EXPECT_THROW(BridgeBackend(std::make_unique<ScriptedConnection>(
                                   R"(> {"id":1,"method":"handshake","params":{"protocol":"LEV/1","tensor_encoding":"decimal"}}
< {"id":1,"result":{"protocol":"LEV/1","d":0,"d_e":16,"vocab_size":16,"max_output_length":3,"tensor_encoding":"decimal"}}
)"),
                               1s),
                 ProtocolError);
    EXPECT_THROW(BridgeBackend(std::make_unique<ScriptedConnection>(
                                   R"(> {"id":1,"method":"handshake","params":{"protocol":"LEV/1","tensor_encoding":"decimal"}}
< {"id":1,"result":{"protocol":"LEV/1","d":16,"d_e":16,"vocab_size":16,"max_output_length":3,"tensor_encoding":"base64"}}
)"),
                               1s),
                 ProtocolError);
}

TEST(BridgeBackend, BridgedRunMatchesDirectRunByteForByte) {
    EvolveConfig cfg;
    cfg.l_prime = 2;
    cfg.toy = desk_toy();
    cfg.K = 3;
    cfg.period_T = 10;
    cfg.min_consolidation_triplets = 2;
    cfg.weaver_hidden = 8;
    cfg.weaver_train.epochs = 5;
    cfg.eta = 3.0;
    const ToyBackend toy(cfg.toy);
    const RuleScorer rule;
    const auto qs = synthetic_modular_tasks(25, 6);
    std::ostringstream direct, bridged;
    run_stream(cfg, toy, rule, qs, &direct);
    {
        LocalServer server(toy);
        const BridgeBackend b(server.take(), 5s);
        run_stream(cfg, b, rule, qs, &bridged);
    }
    EXPECT_EQ(bridged.str(), direct.str());
    EXPECT_FALSE(direct.str().empty());
}

TEST(Conformance, ToyServerPassesEveryCheck) {
    const ToyBackend toy(desk_toy());
    LocalServer server(toy);
    const auto checks = run_conformance(server.take(), 5s);
    EXPECT_GE(checks.size(), 10U);
    for (const auto& c : checks) {
        EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
    }
}

TEST(Conformance, BrokenServerFailsChecks) {
    // A server that answers everything with an empty result.
    auto [near, far] = connection_pair();
    std::thread t([conn = std::move(far)] {
        try {
            for (;;) {
                const auto req = Json::parse(conn->receive_line(5s));
                conn->send_line(Json{{"id", req["id"]}, {"result", Json::object()}}.dump());
            }
        } catch (const std::exception&) {
        }
    });
    const auto checks = run_conformance(std::move(near), 2s);
    t.join();
    std::size_t failed = 0;
    for (const auto& c : checks) {
        failed += c.passed ? 0 : 1;
    }
    EXPECT_GT(failed, 0U);
}

TEST(OpenConnection, AddressForms) {
    EXPECT_THROW(open_connection("nonsense"), ConfigError);
    EXPECT_THROW(open_connection(":80"), ConfigError);
    EXPECT_THROW(open_connection("host:"), ConfigError);
}

TEST(OpenConnection, TcpEndpoint) {
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    ASSERT_GE(listener, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    ASSERT_EQ(::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
    ASSERT_EQ(::listen(listener, 1), 0);
    socklen_t len = sizeof addr;
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    const int port = ntohs(addr.sin_port);

    const ToyBackend toy(desk_toy());
    std::thread server([&] {
        const int fd = ::accept(listener, nullptr, nullptr);
        FdConnection conn(fd, fd, true);
        serve(toy, conn);
    });
    {
        auto b = BridgeBackend::open("127.0.0.1:" + std::to_string(port), 5s);
        const QueryContext ctx("3+3=", "t");
        EXPECT_EQ(b->embed_context(ctx), toy.embed_context(ctx));
    }
    server.join();
    ::close(listener);
    EXPECT_THROW(open_connection("127.0.0.1:" + std::to_string(port)), TransportError);
}

TEST(ChildProcess, ServesTheToyOverPipes) {
    auto b = BridgeBackend::open(std::string("exec:") + LEV_CLI_PATH + " serve", 10s);
    const ToyBackend toy(EvolveConfig{}.toy);
    EXPECT_EQ(b->descriptor().max_output_length, toy.descriptor().max_output_length);
    const auto ctx = synthetic_modular_tasks(1, 7).front();
    EXPECT_EQ(b->embed_context(ctx), toy.embed_context(ctx));
    const auto z = toy.base_latent(ctx, 3).latent;
    EXPECT_EQ(b->sample_outputs(ctx, z, 3, 1.0, 11), toy.sample_outputs(ctx, z, 3, 1.0, 11));
}

TEST(ChildProcess, ConformanceOverPipes) {
    const auto checks =
        run_conformance(open_connection(std::string("exec:") + LEV_CLI_PATH + " serve"), 10s);
    for (const auto& c : checks) {
        EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;
    }
}

TEST(ChildProcess, DeadChildIsATransportError) {
    auto conn = open_connection("exec:exit 0");
    Client c(std::move(conn), 2s);
    EXPECT_THROW(c.call("handshake", Json{{"protocol", "LEV/1"}}), TransportError);
}

std::string golden_file(const std::string& name) {
    std::ifstream in(std::string(LEV_GOLDEN_DIR) + "/" + name + ".lev1", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TEST(Golden, TranscriptsReplayAndMatchALiveRecording) {
    for (const auto& name : golden::scenario_names()) {
        SCOPED_TRACE(name);
        const auto stored = golden_file(name);
        ASSERT_FALSE(stored.empty()) << "missing golden transcript; run lev_golden_regen";
        const auto live = golden::record_scenario(name);
        EXPECT_EQ(live, stored);
        const auto replayed = golden::replay_scenario(name, stored);
        EXPECT_EQ(replayed, golden::replay_scenario(name, live));
    }
}

TEST(Golden, ErrorScenarioObservesTheExpectedCodes) {
    const auto r = golden::replay_scenario("errors", golden_file("errors"));
    EXPECT_EQ(r["codes"], (Json{"handshake_required", "protocol_mismatch", "ok", "unknown_method", "bad_params",
                                "shape", "config", "domain", "unsupported", "ok"}));
}

TEST(Golden, ReplayDetectsADeviatingClient) {
    auto transcript = golden_file("decimal");
    const auto pos = transcript.find("\"seed\":7");
    ASSERT_NE(pos, std::string::npos);
    transcript.replace(pos, 8, "\"seed\":8");
    EXPECT_THROW(golden::replay_scenario("decimal", transcript), ProtocolError);
}

}  // namespace
}  // namespace lev::bridge
