#include "lev/bridge.hpp"

#include <cerrno>
#include <cmath>
#include <algorithm>
#include <cstring>
#include <mutex>
#include <thread>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <boost/beast/core/detail/base64.hpp>

#include "lev/errors.hpp"

extern char** environ;

namespace lev::bridge {

namespace {

void ignore_sigpipe() {
    static std::once_flag once;
    std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) {
        n *= s;
    }
    return n;
}

std::string shape_text(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? "," : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

const Json& field(const Json& obj, const char* key, std::string_view where) {
    if (!obj.is_object() || !obj.contains(key)) {
        throw ProtocolError(std::string(where) + ": missing field '" + key + "'");
    }
    return obj[key];
}

std::uint64_t uint_field(const Json& obj, const char* key, std::string_view where) {
    const auto& v = field(obj, key, where);
    if (!v.is_number_unsigned()) {
        throw ProtocolError(std::string(where) + ": field '" + key + "' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

bool bool_field(const Json& obj, const char* key, std::string_view where) {
    const auto& v = field(obj, key, where);
    if (!v.is_boolean()) {
        throw ProtocolError(std::string(where) + ": field '" + key + "' must be a boolean");
    }
    return v.get<bool>();
}

std::string string_field(const Json& obj, const char* key, std::string_view where) {
    const auto& v = field(obj, key, where);
    if (!v.is_string()) {
        throw ProtocolError(std::string(where) + ": field '" + key + "' must be a string");
    }
    return v.get<std::string>();
}

double number_field(const Json& obj, const char* key, std::string_view where) {
    const auto& v = field(obj, key, where);
    if (!v.is_number()) {
        throw ProtocolError(std::string(where) + ": field '" + key + "' must be a number");
    }
    return v.get<double>();
}

std::vector<std::size_t> shape_of(const Json& tensor, std::string_view where) {
    const auto& shape = field(tensor, "shape", where);
    if (!shape.is_array()) {
        throw ProtocolError(std::string(where) + ": tensor shape must be an array");
    }
    std::vector<std::size_t> out;
    for (const auto& s : shape) {
        if (!s.is_number_unsigned()) {
            throw ProtocolError(std::string(where) + ": tensor shape entries must be non-negative integers");
        }
        out.push_back(s.get<std::size_t>());
    }
    return out;
}

std::vector<float> to_floats(const std::vector<double>& v) { return {v.begin(), v.end()}; }

LatentSequence decode_latent_any_rows(const Json& tensor, std::size_t cols, std::string_view where) {
    const auto shape = shape_of(tensor, where);
    if (shape.size() != 2 || shape[0] == 0 || shape[1] != cols) {
        throw ShapeError(std::string(where) + ": latent shape " + shape_text(shape) + " does not have " +
                         std::to_string(cols) + " columns");
    }
    return LatentSequence(shape[0], cols, to_floats(decode_tensor(tensor, shape, where)));
}

}  // namespace

std::string_view encoding_name(TensorEncoding e) { return e == TensorEncoding::Base64 ? "base64" : "decimal"; }

TensorEncoding parse_encoding(std::string_view name) {
    if (name == "decimal") {
        return TensorEncoding::Decimal;
    }
    if (name == "base64") {
        return TensorEncoding::Base64;
    }
    throw ConfigError("unknown tensor encoding '" + std::string(name) + "'");
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    namespace b64 = boost::beast::detail::base64;
    if (text.size() % 4 != 0) {
        throw ProtocolError("base64 payload length is not a multiple of 4");
    }
    std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
    const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
    std::size_t consumed = read;
    // The decoder stops at the first '='; only padding may follow.
    while (consumed < text.size() && text[consumed] == '=') {
        ++consumed;
    }
    if (consumed != text.size() || text.size() - read > 2) {
        throw ProtocolError("base64 payload contains characters outside the alphabet");
    }
    out.resize(written);
    return out;
}

Json encode_tensor(std::span<const float> values, const std::vector<std::size_t>& shape, TensorEncoding enc) {
    if (element_count(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_text(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
    }
    Json t;
    t["shape"] = shape;
    if (enc == TensorEncoding::Base64) {
        t["b64"] = base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(values.data()), values.size() * 4));
    } else {
        Json data = Json::array();
        for (float v : values) {
            data.push_back(static_cast<double>(v));
        }
        t["data"] = std::move(data);
    }
    return t;
}

Json encode_tensor(std::span<const double> values, const std::vector<std::size_t>& shape, TensorEncoding enc) {
    if (enc == TensorEncoding::Base64) {
        const std::vector<float> rounded(values.begin(), values.end());
        return encode_tensor(std::span<const float>(rounded), shape, enc);
    }
    if (element_count(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_text(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
    }
    Json t;
    t["shape"] = shape;
    t["data"] = std::vector<double>(values.begin(), values.end());
    return t;
}

std::vector<double> decode_tensor(const Json& tensor, const std::vector<std::size_t>& expected,
                                  std::string_view where) {
    if (!tensor.is_object()) {
        throw ProtocolError(std::string(where) + ": tensor must be an object");
    }
    const auto shape = shape_of(tensor, where);
    if (shape != expected) {
        throw ProtocolError(std::string(where) + ": tensor shape " + shape_text(shape) + ", expected " +
                            shape_text(expected));
    }
    const std::size_t n = element_count(shape);
    const bool has_data = tensor.contains("data");
    const bool has_b64 = tensor.contains("b64");
    if (has_data == has_b64) {
        throw ProtocolError(std::string(where) + ": tensor needs exactly one of 'data' or 'b64'");
    }
    std::vector<double> out;
    out.reserve(n);
    if (has_data) {
        const auto& data = tensor["data"];
        if (!data.is_array() || data.size() != n) {
            throw ProtocolError(std::string(where) + ": tensor data must be an array of " + std::to_string(n) +
                                " numbers");
        }
        for (const auto& v : data) {
            if (!v.is_number()) {
                throw ProtocolError(std::string(where) + ": tensor data holds a non-number");
            }
            out.push_back(v.get<double>());
        }
    } else {
        if (!tensor["b64"].is_string()) {
            throw ProtocolError(std::string(where) + ": tensor b64 must be a string");
        }
        const auto bytes = base64_decode(tensor["b64"].get<std::string>());
        if (bytes.size() != n * 4) {
            throw ProtocolError(std::string(where) + ": tensor blob holds " + std::to_string(bytes.size()) +
                                " bytes, expected " + std::to_string(n * 4));
        }
        for (std::size_t i = 0; i < n; ++i) {
            float v = 0.0F;
            std::memcpy(&v, bytes.data() + 4 * i, 4);
            out.push_back(static_cast<double>(v));
        }
    }
    for (double v : out) {
        if (!std::isfinite(v)) {
            throw ProtocolError(std::string(where) + ": tensor holds a non-finite value");
        }
    }
    return out;
}

Json encode_context(const QueryContext& ctx) { return Json{{"task_id", ctx.task_id}, {"text", ctx.text}}; }

QueryContext decode_context(const Json& j) {
    return QueryContext(string_field(j, "text", "context"), string_field(j, "task_id", "context"));
}

Json encode_output(const OutputSequence& y) {
    return Json{{"tokens", y.tokens}, {"text", y.text}, {"log_prob", y.log_prob}};
}

OutputSequence decode_output(const Json& j) {
    OutputSequence y;
    const auto& tokens = field(j, "tokens", "output");
    if (!tokens.is_array() || tokens.empty()) {
        throw ProtocolError("output: tokens must be a non-empty array");
    }
    for (const auto& t : tokens) {
        if (!t.is_number_unsigned() || t.get<std::uint64_t>() > UINT32_MAX) {
            throw ProtocolError("output: token ids must be unsigned 32-bit integers");
        }
        y.tokens.push_back(t.get<std::uint32_t>());
    }
    y.text = string_field(j, "text", "output");
    y.log_prob = number_field(j, "log_prob", "output");
    if (!std::isfinite(y.log_prob) || y.log_prob > 0.0) {
        throw ProtocolError("output: log_prob must be finite and <= 0");
    }
    return y;
}

// ---------------------------------------------------------------- transport

FdConnection::FdConnection(int read_fd, int write_fd, bool owns_fds)
    : read_fd_(read_fd), write_fd_(write_fd), owns_(owns_fds) {
    ignore_sigpipe();
}

FdConnection::~FdConnection() { close_fds(); }

void FdConnection::close_fds() {
    if (!owns_) {
        return;
    }
    if (write_fd_ >= 0 && write_fd_ != read_fd_) {
        ::close(write_fd_);
    }
    if (read_fd_ >= 0) {
        ::close(read_fd_);
    }
    read_fd_ = write_fd_ = -1;
    owns_ = false;
}

void FdConnection::send_line(const std::string& line) {
    if (line.find('\n') != std::string::npos) {
        throw ProtocolError("frame contains a raw newline");
    }
    const std::string frame = line + "\n";
    std::size_t off = 0;
    while (off < frame.size()) {
        const ssize_t n = ::write(write_fd_, frame.data() + off, frame.size() - off);
        if (n < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw TransportError(errno_text("write to backend"));
        }
        off += static_cast<std::size_t>(n);
    }
}

std::string FdConnection::receive_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    char buf[65536];
    while (true) {
        if (const auto nl = pending_.find('\n'); nl != std::string::npos) {
            std::string line = pending_.substr(0, nl);
            pending_.erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            return line;
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            throw TimeoutError("no response within " + std::to_string(timeout.count()) + " ms");
        }
        pollfd p{read_fd_, POLLIN, 0};
        const int ready = ::poll(&p, 1, static_cast<int>(std::min<std::int64_t>(left.count(), INT32_MAX)));
        if (ready < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw TransportError(errno_text("poll"));
        }
        if (ready == 0) {
            continue;
        }
        const ssize_t n = ::read(read_fd_, buf, sizeof(buf));
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) {
                continue;
            }
            throw TransportError(errno_text("read from backend"));
        }
        if (n == 0) {
            throw TransportError("backend closed the connection");
        }
        pending_.append(buf, static_cast<std::size_t>(n));
    }
}

ChildProcessConnection::Spawned ChildProcessConnection::spawn(const std::string& command) {
    int to_child[2];
    int from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0) {
        throw TransportError(errno_text("pipe"));
    }
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw TransportError(errno_text("pipe"));
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], 0);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], 1);
    std::string cmd = command;
    char sh[] = "/bin/sh";
    char dash_c[] = "-c";
    char* argv[] = {sh, dash_c, cmd.data(), nullptr};
    pid_t pid = 0;
    const int rc = ::posix_spawn(&pid, "/bin/sh", &actions, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
        ::close(to_child[1]);
        ::close(from_child[0]);
        errno = rc;
        throw TransportError(errno_text("spawn backend process"));
    }
    return {from_child[0], to_child[1], pid};
}

ChildProcessConnection::ChildProcessConnection(const std::string& command) : ChildProcessConnection(spawn(command)) {}

ChildProcessConnection::ChildProcessConnection(Spawned s) : FdConnection(s.read_fd, s.write_fd, true), pid_(s.pid) {}

ChildProcessConnection::~ChildProcessConnection() {
    close_fds();
    if (pid_ <= 0) {
        return;
    }
    int status = 0;
    for (int i = 0; i < 200; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) != 0) {
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
}

std::unique_ptr<Connection> open_connection(const std::string& address) {
    if (address.starts_with("exec:")) {
        return std::make_unique<ChildProcessConnection>(address.substr(5));
    }
    const auto colon = address.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
        throw ConfigError("backend address must be exec:COMMAND or HOST:PORT, got '" + address + "'");
    }
    const std::string host = address.substr(0, colon);
    const std::string port = address.substr(colon + 1);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* found = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &found); rc != 0) {
        throw TransportError("resolve " + address + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (addrinfo* a = found; a != nullptr; a = a->ai_next) {
        fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
        if (fd < 0) {
            continue;
        }
        if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
            break;
        }
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(found);
    if (fd < 0) {
        throw TransportError("cannot connect to " + address);
    }
    return std::make_unique<FdConnection>(fd, fd, true);
}

std::pair<std::unique_ptr<FdConnection>, std::unique_ptr<FdConnection>> connection_pair() {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0) {
        throw TransportError(errno_text("socketpair"));
    }
    return {std::make_unique<FdConnection>(fds[0], fds[0], true), std::make_unique<FdConnection>(fds[1], fds[1], true)};
}

ScriptedConnection::ScriptedConnection(std::string_view transcript) {
    std::size_t start = 0;
    while (start < transcript.size()) {
        auto end = transcript.find('\n', start);
        if (end == std::string_view::npos) {
            end = transcript.size();
        }
        const auto line = transcript.substr(start, end - start);
        start = end + 1;
        if (line.empty() || line.front() == '#') {
            continue;
        }
        if (line.size() < 2 || (line[0] != '>' && line[0] != '<') || line[1] != ' ') {
            throw ConfigError("transcript line must start with '> ' or '< ': " + std::string(line.substr(0, 40)));
        }
        steps_.push_back({line[0] == '>', std::string(line.substr(2))});
    }
}

void ScriptedConnection::send_line(const std::string& line) {
    ++position_;
    if (steps_.empty() || !steps_.front().outgoing) {
        throw ProtocolError("transcript step " + std::to_string(position_) + ": unexpected request " + line);
    }
    if (steps_.front().line != line) {
        throw ProtocolError("transcript step " + std::to_string(position_) + ": expected\n  " + steps_.front().line +
                            "\ngot\n  " + line);
    }
    steps_.pop_front();
}

std::string ScriptedConnection::receive_line(std::chrono::milliseconds timeout) {
    ++position_;
    if (steps_.empty() || steps_.front().outgoing) {
        throw TimeoutError("transcript step " + std::to_string(position_) + ": no scripted reply within " +
                           std::to_string(timeout.count()) + " ms");
    }
    std::string line = std::move(steps_.front().line);
    steps_.pop_front();
    return line;
}

bool ScriptedConnection::finished() const { return steps_.empty(); }

void RecordingConnection::send_line(const std::string& line) {
    transcript_ += "> " + line + "\n";
    inner_->send_line(line);
}

std::string RecordingConnection::receive_line(std::chrono::milliseconds timeout) {
    std::string line = inner_->receive_line(timeout);
    transcript_ += "< " + line + "\n";
    return line;
}

// ------------------------------------------------------------------- client

Client::Client(std::unique_ptr<Connection> connection, std::chrono::milliseconds timeout)
    : connection_(std::move(connection)), timeout_(timeout) {
    if (!connection_) {
        throw PreconditionError("bridge client needs a connection");
    }
}

bool Client::failed() const {
    std::lock_guard lock(mutex_);
    return failed_;
}

std::uint64_t Client::next_id() const {
    std::lock_guard lock(mutex_);
    return next_id_;
}

Json Client::call(const std::string& method, Json params) {
    std::lock_guard lock(mutex_);
    if (failed_) {
        throw ProtocolError("bridge connection is marked failed; no further requests are sent");
    }
    const std::uint64_t id = next_id_++;
    Json request;
    request["id"] = id;
    request["method"] = method;
    request["params"] = params.is_null() ? Json::object() : std::move(params);

    std::string line;
    try {
        connection_->send_line(request.dump());
        line = connection_->receive_line(timeout_);
    } catch (const TransportError&) {
        failed_ = true;
        throw;
    }

    auto fail = [&](const std::string& why) {
        failed_ = true;
        throw ProtocolError(method + " (id " + std::to_string(id) + "): " + why);
    };
    const Json response = Json::parse(line, nullptr, false);
    if (response.is_discarded() || !response.is_object()) {
        fail("malformed response frame");
    }
    if (!response.contains("id") || !response["id"].is_number_unsigned() ||
        response["id"].get<std::uint64_t>() != id) {
        fail("response id " + (response.contains("id") ? response["id"].dump() : std::string("(none)")) +
             " does not match the request");
    }
    const bool has_result = response.contains("result");
    const bool has_error = response.contains("error");
    if (has_result == has_error) {
        fail("response must carry exactly one of result or error");
    }
    if (has_error) {
        const auto& err = response["error"];
        if (!err.is_object() || !err.contains("code") || !err["code"].is_string() || !err.contains("message") ||
            !err["message"].is_string()) {
            fail("malformed error object");
        }
        throw RemoteError(err["code"].get<std::string>(), err["message"].get<std::string>());
    }
    if (!response["result"].is_object()) {
        fail("result must be an object");
    }
    return response["result"];
}

// ------------------------------------------------------------------ backend

BridgeBackend::BridgeBackend(std::unique_ptr<Connection> connection, std::chrono::milliseconds timeout,
                             TensorEncoding requested)
    : client_(std::move(connection), timeout), encoding_(TensorEncoding::Decimal) {
    const Json r = client_.call("handshake", Json{{"protocol", kProtocol}, {"tensor_encoding", encoding_name(requested)}});
    if (string_field(r, "protocol", "handshake") != kProtocol) {
        throw ProtocolError("handshake: server speaks " + r["protocol"].get<std::string>());
    }
    auto dim = [&](const char* key) {
        const auto v = uint_field(r, key, "handshake");
        if (v == 0 || v > UINT32_MAX) {
            throw ProtocolError(std::string("handshake: ") + key + " must be a positive 32-bit count");
        }
        return static_cast<std::uint32_t>(v);
    };
    descriptor_.d = dim("d");
    descriptor_.d_e = dim("d_e");
    descriptor_.vocab_size = dim("vocab_size");
    descriptor_.max_output_length = dim("max_output_length");
    descriptor_.supports_exact_enumeration = false;
    descriptor_.supports_judge = r.contains("supports_judge") && bool_field(r, "supports_judge", "handshake");
    const auto accepted = string_field(r, "tensor_encoding", "handshake");
    if (accepted != encoding_name(requested) && accepted != "decimal") {
        throw ProtocolError("handshake: server chose unsupported tensor encoding '" + accepted + "'");
    }
    encoding_ = parse_encoding(accepted);
}

BridgeBackend::~BridgeBackend() {
    try {
        shutdown();
    } catch (const std::exception&) {
        // The peer may already be gone; nothing left to release.
    }
}

std::unique_ptr<BridgeBackend> BridgeBackend::open(const std::string& address, std::chrono::milliseconds timeout,
                                                   TensorEncoding requested) {
    return std::make_unique<BridgeBackend>(open_connection(address), timeout, requested);
}

void BridgeBackend::shutdown() {
    if (shut_down_ || client_.failed()) {
        shut_down_ = true;
        return;
    }
    shut_down_ = true;
    client_.call("shutdown", Json::object());
}

ContextEmbedding BridgeBackend::embed_context(const QueryContext& ctx) const {
    const Json r = client_.call("embed_context", Json{{"context", encode_context(ctx)}});
    return ContextEmbedding(to_floats(decode_tensor(field(r, "embedding", "embed_context"), {descriptor_.d_e},
                                                    "embed_context.embedding")));
}

BaseLatent BridgeBackend::base_latent(const QueryContext& ctx, std::size_t l_prime) const {
    const Json r = client_.call("base_latent", Json{{"context", encode_context(ctx)}, {"l_prime", l_prime}});
    auto values = decode_tensor(field(r, "latent", "base_latent"), {l_prime, descriptor_.d}, "base_latent.latent");
    BaseLatent out{LatentSequence(l_prime, descriptor_.d, to_floats(values)), bool_field(r, "short_decode", "base_latent"),
                   static_cast<std::size_t>(uint_field(r, "decoded_tokens", "base_latent"))};
    return out;
}

std::vector<OutputSequence> BridgeBackend::sample_outputs(const QueryContext& ctx, const LatentSequence& z,
                                                          std::size_t n, double temperature,
                                                          std::uint64_t seed) const {
    if (z.cols() != descriptor_.d) {
        throw ShapeError("latent width does not match the bridged model width");
    }
    const Json r = client_.call("sample_outputs", Json{{"context", encode_context(ctx)},
                                                       {"z", encode_tensor(z.values(), {z.rows(), z.cols()}, encoding_)},
                                                       {"n", n},
                                                       {"temperature", temperature},
                                                       {"seed", seed}});
    const auto& outputs = field(r, "outputs", "sample_outputs");
    if (!outputs.is_array() || outputs.size() != n) {
        throw ProtocolError("sample_outputs: expected " + std::to_string(n) + " outputs");
    }
    std::vector<OutputSequence> out;
    out.reserve(n);
    for (const auto& o : outputs) {
        out.push_back(decode_output(o));
        for (auto t : out.back().tokens) {
            if (t >= descriptor_.vocab_size) {
                throw ProtocolError("sample_outputs: token id outside the declared vocabulary");
            }
        }
    }
    return out;
}

Matrix BridgeBackend::grad_log_prob(const QueryContext& ctx, const LatentSequence& z, const OutputSequence& y) const {
    if (z.cols() != descriptor_.d) {
        throw ShapeError("latent width does not match the bridged model width");
    }
    const Json r = client_.call("grad_log_prob", Json{{"context", encode_context(ctx)},
                                                      {"z", encode_tensor(z.values(), {z.rows(), z.cols()}, encoding_)},
                                                      {"output", encode_output(y)}});
    return Matrix(z.rows(), z.cols(),
                  decode_tensor(field(r, "grad", "grad_log_prob"), {z.rows(), z.cols()}, "grad_log_prob.grad"));
}

std::string BridgeBackend::judge_text(const std::string& prompt) const {
    if (!descriptor_.supports_judge) {
        throw DomainError("bridged backend did not announce judge support");
    }
    const Json r = client_.call("judge_text", Json{{"prompt", prompt}});
    return string_field(r, "text", "judge_text");
}

// ------------------------------------------------------------------- server

namespace {

Json error_response(const Json& id, std::string_view code, const std::string& message) {
    return Json{{"id", id}, {"error", {{"code", code}, {"message", message}}}};
}

Json dispatch(const Backend& backend, const std::string& method, const Json& params, ServerSession& session) {
    const auto& desc = backend.descriptor();
    if (method == "handshake") {
        const auto protocol = string_field(params, "protocol", "handshake");
        if (protocol != kProtocol) {
            throw RemoteError("protocol_mismatch", "server speaks " + std::string(kProtocol) + ", client sent " + protocol);
        }
        TensorEncoding enc = TensorEncoding::Decimal;
        if (params.contains("tensor_encoding")) {
            const auto name = string_field(params, "tensor_encoding", "handshake");
            if (name == "base64") {
                enc = TensorEncoding::Base64;
            } else if (name != "decimal") {
                throw ProtocolError("handshake: unknown tensor_encoding '" + name + "'");
            }
        }
        session.encoding = enc;
        session.handshaken = true;
        return Json{{"protocol", kProtocol},
                    {"d", desc.d},
                    {"d_e", desc.d_e},
                    {"vocab_size", desc.vocab_size},
                    {"max_output_length", desc.max_output_length},
                    {"supports_judge", desc.supports_judge},
                    {"tensor_encoding", encoding_name(enc)}};
    }
    if (method == "shutdown") {
        session.stop = true;
        return Json{{"ok", true}};
    }
    static const char* const kKnown[] = {"embed_context", "base_latent", "sample_outputs", "grad_log_prob",
                                         "judge_text"};
    if (std::find(std::begin(kKnown), std::end(kKnown), method) == std::end(kKnown)) {
        throw RemoteError("unknown_method", "no method named '" + method + "'");
    }
    if (!session.handshaken) {
        throw RemoteError("handshake_required", "call handshake before " + method);
    }
    const auto enc = session.encoding;
    if (method == "embed_context") {
        const auto e = backend.embed_context(decode_context(field(params, "context", method)));
        return Json{{"embedding", encode_tensor(e.values(), {e.width()}, enc)}};
    }
    if (method == "base_latent") {
        const auto b = backend.base_latent(decode_context(field(params, "context", method)),
                                           uint_field(params, "l_prime", method));
        return Json{{"latent", encode_tensor(b.latent.values(), {b.latent.rows(), b.latent.cols()}, enc)},
                    {"short_decode", b.short_decode},
                    {"decoded_tokens", b.decoded_tokens}};
    }
    if (method == "sample_outputs") {
        const auto ctx = decode_context(field(params, "context", method));
        const auto z = decode_latent_any_rows(field(params, "z", method), desc.d, "sample_outputs.z");
        const auto outs = backend.sample_outputs(ctx, z, uint_field(params, "n", method),
                                                 number_field(params, "temperature", method),
                                                 uint_field(params, "seed", method));
        Json arr = Json::array();
        for (const auto& y : outs) {
            arr.push_back(encode_output(y));
        }
        return Json{{"outputs", std::move(arr)}};
    }
    if (method == "grad_log_prob") {
        const auto ctx = decode_context(field(params, "context", method));
        const auto z = decode_latent_any_rows(field(params, "z", method), desc.d, "grad_log_prob.z");
        const auto g = backend.grad_log_prob(ctx, z, decode_output(field(params, "output", method)));
        return Json{{"grad", encode_tensor(std::span<const double>(g.data), {g.rows, g.cols}, enc)}};
    }
    // judge_text
    if (!desc.supports_judge) {
        throw RemoteError("unsupported", "this backend does not evaluate judge prompts");
    }
    return Json{{"text", backend.judge_text(string_field(params, "prompt", method))}};
}

}  // namespace

std::string handle_request(const Backend& backend, const std::string& line, ServerSession& session) {
    const Json request = Json::parse(line, nullptr, false);
    if (request.is_discarded() || !request.is_object()) {
        return error_response(nullptr, "malformed", "request is not a JSON object").dump();
    }
    if (!request.contains("id") || !request["id"].is_number_unsigned()) {
        return error_response(nullptr, "malformed", "request id must be a non-negative integer").dump();
    }
    const Json id = request["id"];
    if (!request.contains("method") || !request["method"].is_string()) {
        return error_response(id, "malformed", "request method must be a string").dump();
    }
    const Json params = request.contains("params") ? request["params"] : Json::object();
    if (!params.is_object()) {
        return error_response(id, "bad_params", "params must be an object").dump();
    }
    try {
        return Json{{"id", id}, {"result", dispatch(backend, request["method"].get<std::string>(), params, session)}}
            .dump();
    } catch (const RemoteError& e) {
        const std::string what = e.what();
        const auto cut = what.find("]: ");
        return error_response(id, e.code(), cut == std::string::npos ? what : what.substr(cut + 3)).dump();
    } catch (const ProtocolError& e) {
        return error_response(id, "bad_params", e.what()).dump();
    } catch (const ShapeError& e) {
        return error_response(id, "shape", e.what()).dump();
    } catch (const DomainError& e) {
        return error_response(id, "domain", e.what()).dump();
    } catch (const ConfigError& e) {
        return error_response(id, "config", e.what()).dump();
    } catch (const CapacityError& e) {
        return error_response(id, "capacity", e.what()).dump();
    } catch (const PreconditionError& e) {
        return error_response(id, "precondition", e.what()).dump();
    } catch (const std::exception& e) {
        return error_response(id, "internal", e.what()).dump();
    }
}

void serve(const Backend& backend, Connection& connection) {
    ServerSession session;
    while (!session.stop) {
        std::string line;
        try {
            line = connection.receive_line(std::chrono::hours(24 * 365));
        } catch (const TimeoutError&) {
            continue;
        } catch (const TransportError&) {
            return;  // peer went away
        }
        if (line.empty()) {
            continue;
        }
        connection.send_line(handle_request(backend, line, session));
    }
}

// -------------------------------------------------------------- conformance

std::vector<ConformanceCheck> run_conformance(std::unique_ptr<Connection> connection,
                                              std::chrono::milliseconds timeout) {
    std::vector<ConformanceCheck> checks;
    Client client(std::move(connection), timeout);
    auto check = [&](const std::string& name, const std::function<std::string()>& body) {
        ConformanceCheck c{name, false, {}};
        try {
            c.detail = body();
            c.passed = true;
        } catch (const std::exception& e) {
            c.detail = e.what();
        }
        checks.push_back(std::move(c));
        return checks.back().passed;
    };
    auto expect_remote = [&](const std::string& method, const Json& params, std::string_view code) {
        try {
            client.call(method, params);
        } catch (const RemoteError& e) {
            if (!code.empty() && e.code() != code) {
                throw ProtocolError("error code '" + e.code() + "', expected '" + std::string(code) + "'");
            }
            return "structured error '" + e.code() + "'";
        }
        throw ProtocolError("request succeeded but should have failed");
    };

    check("handshake rejects a foreign protocol version", [&] {
        return expect_remote("handshake", Json{{"protocol", "LEV/0"}}, "protocol_mismatch");
    });

    BackendDescriptor desc;
    const bool handshaken = check("handshake", [&] {
        const Json r = client.call("handshake", Json{{"protocol", kProtocol}, {"tensor_encoding", "decimal"}});
        if (string_field(r, "protocol", "handshake") != kProtocol) {
            throw ProtocolError("server protocol differs");
        }
        desc.d = static_cast<std::uint32_t>(uint_field(r, "d", "handshake"));
        desc.d_e = static_cast<std::uint32_t>(uint_field(r, "d_e", "handshake"));
        desc.vocab_size = static_cast<std::uint32_t>(uint_field(r, "vocab_size", "handshake"));
        desc.max_output_length = static_cast<std::uint32_t>(uint_field(r, "max_output_length", "handshake"));
        desc.supports_judge = r.contains("supports_judge") && bool_field(r, "supports_judge", "handshake");
        if (desc.d == 0 || desc.d_e == 0 || desc.vocab_size == 0 || desc.max_output_length == 0) {
            throw ProtocolError("descriptor has a zero dimension");
        }
        return "d=" + std::to_string(desc.d) + " d_e=" + std::to_string(desc.d_e) +
               " vocab=" + std::to_string(desc.vocab_size) + " max_len=" + std::to_string(desc.max_output_length);
    });
    if (!handshaken) {
        return checks;
    }

    // Probe inputs built from whatever the server accepts as a prompt. The
    // digit "1" is tried first; servers with other vocabularies may reject it,
    // which the embed check reports.
    const Json ctx = encode_context(QueryContext("1+2=", "conformance"));
    const std::size_t rows = 1;
    std::vector<float> zv(rows * desc.d);
    for (std::size_t i = 0; i < zv.size(); ++i) {
        zv[i] = 0.25F * static_cast<float>((i % 7)) - 0.5F;
    }
    const Json z = encode_tensor(std::span<const float>(zv), {rows, desc.d}, TensorEncoding::Decimal);

    check("embed_context returns a deterministic d_e vector", [&] {
        const Json a = client.call("embed_context", Json{{"context", ctx}});
        const Json b = client.call("embed_context", Json{{"context", ctx}});
        decode_tensor(field(a, "embedding", "embed_context"), {desc.d_e}, "embedding");
        if (a != b) {
            throw ProtocolError("two identical requests gave different embeddings");
        }
        return std::string("ok");
    });
    check("base_latent returns an l_prime x d latent", [&] {
        const Json r = client.call("base_latent", Json{{"context", ctx}, {"l_prime", 1}});
        decode_tensor(field(r, "latent", "base_latent"), {1, desc.d}, "latent");
        bool_field(r, "short_decode", "base_latent");
        uint_field(r, "decoded_tokens", "base_latent");
        return std::string("ok");
    });

    Json first_output;
    check("sample_outputs is reproducible under a fixed seed", [&] {
        const Json params{{"context", ctx}, {"z", z}, {"n", 4}, {"temperature", 1.0}, {"seed", 12345}};
        const Json a = client.call("sample_outputs", params);
        const Json b = client.call("sample_outputs", params);
        if (a != b) {
            throw ProtocolError("identical seeded requests gave different samples");
        }
        const auto& outs = field(a, "outputs", "sample_outputs");
        if (!outs.is_array() || outs.size() != 4) {
            throw ProtocolError("expected 4 outputs");
        }
        for (const auto& o : outs) {
            const auto y = decode_output(o);
            for (auto t : y.tokens) {
                if (t >= desc.vocab_size) {
                    throw ProtocolError("token outside the vocabulary");
                }
            }
        }
        first_output = outs[0];
        return std::string("ok");
    });
    check("sample_outputs at temperature 0 repeats the greedy decode", [&] {
        const Json r = client.call("sample_outputs",
                                   Json{{"context", ctx}, {"z", z}, {"n", 3}, {"temperature", 0.0}, {"seed", 1}});
        const auto& outs = field(r, "outputs", "sample_outputs");
        if (!outs.is_array() || outs.size() != 3 || outs[0] != outs[1] || outs[1] != outs[2]) {
            throw ProtocolError("greedy samples differ");
        }
        return std::string("ok");
    });
    check("grad_log_prob returns a finite gradient shaped like z", [&] {
        if (first_output.is_null()) {
            throw ProtocolError("no sample available to differentiate");
        }
        const Json r = client.call("grad_log_prob", Json{{"context", ctx}, {"z", z}, {"output", first_output}});
        decode_tensor(field(r, "grad", "grad_log_prob"), {rows, desc.d}, "grad");
        return std::string("ok");
    });
    check("unknown method yields a structured error", [&] {
        return expect_remote("no_such_method", Json::object(), "unknown_method");
    });
    check("latent of the wrong width is rejected", [&] {
        const Json bad = encode_tensor(std::span<const float>(zv.data(), desc.d - 1 + (desc.d == 1 ? 1 : 0)),
                                       {1, desc.d == 1 ? 1 : desc.d - 1}, TensorEncoding::Decimal);
        if (desc.d == 1) {
            return std::string("skipped: width 1 has no smaller width");
        }
        return expect_remote("sample_outputs",
                             Json{{"context", ctx}, {"z", bad}, {"n", 1}, {"temperature", 1.0}, {"seed", 1}}, "");
    });
    check("missing params are rejected", [&] { return expect_remote("embed_context", Json::object(), ""); });
    check("judge_text answers when announced", [&] {
        if (!desc.supports_judge) {
            expect_remote("judge_text", Json{{"prompt", "SCORE?"}}, "");
            return std::string("server does not judge; request refused with a structured error");
        }
        const Json r = client.call("judge_text", Json{{"prompt", "Reply with SCORE: 1.0"}});
        string_field(r, "text", "judge_text");
        return std::string("ok");
    });
    check("connection survives the error cases", [&] {
        client.call("embed_context", Json{{"context", ctx}});
        return std::string("ok");
    });
    check("shutdown", [&] {
        const Json r = client.call("shutdown", Json::object());
        if (!bool_field(r, "ok", "shutdown")) {
            throw ProtocolError("shutdown not acknowledged");
        }
        return std::string("ok");
    });
    return checks;
}

}  // namespace lev::bridge
