#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lev/backend.hpp"

namespace lev::bridge {

/// LEV/1: one JSON object per line in each direction, strictly alternating.
///
///   request   {"id": N, "method": M, "params": {...}}
///   response  {"id": N, "result": {...}}
///          or {"id": N, "error": {"code": C, "message": S}}
///
/// Tensors are {"shape": [..], "data": [decimal reals, row-major]} or, when
/// base64 was negotiated at handshake, {"shape": [..], "b64": "..."} holding
/// little-endian f32 values.
inline constexpr std::string_view kProtocol = "LEV/1";

using Json = nlohmann::json;

enum class TensorEncoding : std::uint8_t { Decimal, Base64 };

std::string_view encoding_name(TensorEncoding e);
TensorEncoding parse_encoding(std::string_view name);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws ProtocolError on characters outside the alphabet or bad length.
std::vector<std::uint8_t> base64_decode(std::string_view text);

Json encode_tensor(std::span<const float> values, const std::vector<std::size_t>& shape, TensorEncoding enc);
/// Doubles are sent with full precision in decimal mode and rounded to f32
/// in base64 mode.
Json encode_tensor(std::span<const double> values, const std::vector<std::size_t>& shape, TensorEncoding enc);

/// Validates shape against `expected` and every value for finiteness.
/// Throws ProtocolError naming the field on any mismatch.
std::vector<double> decode_tensor(const Json& tensor, const std::vector<std::size_t>& expected, std::string_view field);

Json encode_context(const QueryContext& ctx);
QueryContext decode_context(const Json& j);
Json encode_output(const OutputSequence& y);
OutputSequence decode_output(const Json& j);

/// Line transport. One request in flight at a time.
class Connection {
public:
    virtual ~Connection() = default;
    virtual void send_line(const std::string& line) = 0;
    /// Throws TimeoutError when no complete line arrives in time and
    /// TransportError when the peer closed the stream.
    virtual std::string receive_line(std::chrono::milliseconds timeout) = 0;
};

/// Line framing over a pair of file descriptors (pipes or a socket).
class FdConnection : public Connection {
public:
    FdConnection(int read_fd, int write_fd, bool owns_fds);
    ~FdConnection() override;
    FdConnection(const FdConnection&) = delete;
    FdConnection& operator=(const FdConnection&) = delete;

    void send_line(const std::string& line) override;
    std::string receive_line(std::chrono::milliseconds timeout) override;

protected:
    void close_fds();

private:
    int read_fd_;
    int write_fd_;
    bool owns_;
    std::string pending_;
};

/// Runs COMMAND under /bin/sh with its stdin/stdout connected to us.
class ChildProcessConnection final : public FdConnection {
public:
    explicit ChildProcessConnection(const std::string& command);
    ~ChildProcessConnection() override;

private:
    struct Spawned {
        int read_fd;
        int write_fd;
        int pid;
    };
    static Spawned spawn(const std::string& command);
    explicit ChildProcessConnection(Spawned s);
    int pid_;
};

/// Opens "exec:COMMAND" or "HOST:PORT".
std::unique_ptr<Connection> open_connection(const std::string& address);

/// Two connected in-process endpoints (a socketpair).
std::pair<std::unique_ptr<FdConnection>, std::unique_ptr<FdConnection>> connection_pair();

/// Replays a recorded exchange. Lines beginning "> " are what the engine
/// must send, byte for byte; lines beginning "< " are the replies handed
/// back. "#" lines and blank lines are ignored.
class ScriptedConnection final : public Connection {
public:
    explicit ScriptedConnection(std::string_view transcript);

    void send_line(const std::string& line) override;
    std::string receive_line(std::chrono::milliseconds timeout) override;

    /// True once every scripted line has been consumed.
    bool finished() const;

private:
    struct Step {
        bool outgoing;
        std::string line;
    };
    std::deque<Step> steps_;
    std::size_t position_ = 0;
};

/// Wraps a connection and records both directions in transcript form.
class RecordingConnection final : public Connection {
public:
    explicit RecordingConnection(std::unique_ptr<Connection> inner) : inner_(std::move(inner)) {}

    void send_line(const std::string& line) override;
    std::string receive_line(std::chrono::milliseconds timeout) override;
    const std::string& transcript() const noexcept { return transcript_; }

private:
    std::unique_ptr<Connection> inner_;
    std::string transcript_;
};

/// Request/response correlation over a connection. After a protocol
/// violation or timeout the client is marked failed and refuses further
/// calls, since the stream can no longer be trusted to be in step.
class Client {
public:
    Client(std::unique_ptr<Connection> connection, std::chrono::milliseconds timeout);

    /// Sends one request and returns its "result" object. Remote error
    /// objects raise RemoteError; the connection stays usable.
    Json call(const std::string& method, Json params);

    bool failed() const;
    std::uint64_t next_id() const;

private:
    std::unique_ptr<Connection> connection_;
    std::chrono::milliseconds timeout_;
    mutable std::mutex mutex_;
    std::uint64_t next_id_ = 1;
    bool failed_ = false;
};

/// Backend driven over LEV/1. Handshakes on construction.
class BridgeBackend final : public Backend {
public:
    BridgeBackend(std::unique_ptr<Connection> connection, std::chrono::milliseconds timeout,
                  TensorEncoding requested = TensorEncoding::Decimal);
    ~BridgeBackend() override;

    static std::unique_ptr<BridgeBackend> open(const std::string& address, std::chrono::milliseconds timeout,
                                               TensorEncoding requested = TensorEncoding::Decimal);

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    ContextEmbedding embed_context(const QueryContext& ctx) const override;
    BaseLatent base_latent(const QueryContext& ctx, std::size_t l_prime) const override;
    std::vector<OutputSequence> sample_outputs(const QueryContext& ctx, const LatentSequence& z, std::size_t n,
                                               double temperature, std::uint64_t seed) const override;
    Matrix grad_log_prob(const QueryContext& ctx, const LatentSequence& z, const OutputSequence& y) const override;
    std::string judge_text(const std::string& prompt) const override;

    TensorEncoding encoding() const noexcept { return encoding_; }
    /// Asks the server to exit. Called by the destructor if not done before.
    void shutdown();

private:
    mutable Client client_;
    BackendDescriptor descriptor_;
    TensorEncoding encoding_;
    bool shut_down_ = false;
};

struct ServerSession {
    TensorEncoding encoding = TensorEncoding::Decimal;
    bool handshaken = false;
    bool stop = false;
};

/// Handles one request line and returns the response line.
std::string handle_request(const Backend& backend, const std::string& line, ServerSession& session);

/// Answers LEV/1 requests with `backend` until shutdown or end of stream.
/// Every request gets exactly one response; failures become error objects.
void serve(const Backend& backend, Connection& connection);

struct ConformanceCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Exercises a LEV/1 server over one connection: handshake, every method,
/// determinism under a fixed seed, shape validation, and the error paths
/// (unknown method, bad params, protocol mismatch). Ends with shutdown.
std::vector<ConformanceCheck> run_conformance(std::unique_ptr<Connection> connection,
                                              std::chrono::milliseconds timeout);

}  // namespace lev::bridge
