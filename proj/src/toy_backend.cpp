#include "lev/toy_backend.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "lev/errors.hpp"
#include "lev/rng.hpp"

namespace lev {

namespace {

constexpr double kLayerNormEps = 1e-5;

using Vec = std::vector<double>;

// y (n x m) = a (n x k) * w (k x m)
Vec matmul(const Vec& a, const Vec& w, std::size_t n, std::size_t k, std::size_t m) {
    Vec y(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* wr = &w[p * m];
            double* yr = &y[i * m];
            for (std::size_t j = 0; j < m; ++j) {
                yr[j] += av * wr[j];
            }
        }
    }
    return y;
}

// da (n x k) = dy (n x m) * w^T, for y = a * w with w (k x m)
Vec matmul_grad_input(const Vec& dy, const Vec& w, std::size_t n, std::size_t k, std::size_t m) {
    Vec da(n * k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double* wr = &w[p * m];
            const double* dyr = &dy[i * m];
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                acc += dyr[j] * wr[j];
            }
            da[i * k + p] = acc;
        }
    }
    return da;
}

struct NormCache {
    Vec xhat;  // n x d
    Vec rstd;  // n
};

Vec layer_norm(const Vec& x, const Vec& gain, const Vec& bias, std::size_t n, std::size_t d, NormCache& cache) {
    Vec y(n * d);
    cache.xhat.assign(n * d, 0.0);
    cache.rstd.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = &x[i * d];
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += xr[j];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (xr[j] - mean) * (xr[j] - mean);
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd[i] = rstd;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mean) * rstd;
            cache.xhat[i * d + j] = xh;
            y[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    return y;
}

Vec layer_norm_backward(const Vec& dy, const NormCache& cache, const Vec& gain, std::size_t n, std::size_t d) {
    Vec dx(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy[i * d + j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.xhat[i * d + j];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dy[i * d + j] * gain[j];
            dx[i * d + j] = cache.rstd[i] * (dxh - mean_dxhat - cache.xhat[i * d + j] * mean_dxhat_xhat);
        }
    }
    return dx;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u / std::numbers::sqrt2)); }

double gelu_grad(double u) {
    const double cdf = 0.5 * (1.0 + std::erf(u / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + u * pdf;
}

Vec log_softmax(std::span<const double> logits) {
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double l : logits) {
        total += std::exp(l - peak);
    }
    const double lse = peak + std::log(total);
    Vec out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

std::uint32_t argmax(std::span<const double> values) {
    return static_cast<std::uint32_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

Vec gaussian(Rng& rng, std::size_t n, double stddev) {
    Vec v(n);
    for (double& x : v) {
        x = rng.normal() * stddev;
    }
    return v;
}

}  // namespace

struct ToyBackend::Input {
    std::size_t length = 0;
    Vec x;                                  // length x d, embedding + position
    std::vector<std::ptrdiff_t> latent_row;  // latent row feeding each input row, or -1
    std::size_t context_end = 0;            // rows before the first generated token
};

struct ToyBackend::Trace {
    struct Layer {
        NormCache ln1;
        Vec q, k, v;
        Vec probs;  // heads x T x T
        Vec heads_out;
        NormCache ln2;
        Vec u;
    };
    std::size_t length = 0;
    std::vector<Layer> layers;
    NormCache lnf;
    Vec hidden;  // T x d after the final norm
    Vec logits;  // T x vocab
};

ToyBackend::ToyBackend(ToyConfig config) : config_(config) {
    if (config_.vocab_size < 2 || config_.vocab_size > kAlphabet.size() + 1) {
        throw ConfigError("toy vocabulary size must lie in [2, " + std::to_string(kAlphabet.size() + 1) + "]");
    }
    if (config_.d == 0 || config_.layers == 0 || config_.heads == 0 || config_.d % config_.heads != 0) {
        throw ConfigError("toy width must be positive and divisible by the head count");
    }
    if (config_.max_output_length == 0 || config_.ffn == 0 || config_.max_positions == 0) {
        throw ConfigError("toy lengths must be positive");
    }
    descriptor_ = BackendDescriptor{config_.d, config_.d, config_.vocab_size, config_.max_output_length, true, false};

    const std::size_t d = config_.d;
    const std::size_t f = config_.ffn;
    const std::size_t v = config_.vocab_size;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Rng rng(config_.seed);
    weights_.token_embedding = gaussian(rng, v * d, 1.0);
    weights_.position_embedding = gaussian(rng, config_.max_positions * d, 0.3);
    for (std::uint32_t l = 0; l < config_.layers; ++l) {
        ToyWeights::Layer layer;
        layer.ln1_gain.assign(d, 1.0);
        layer.ln1_bias.assign(d, 0.0);
        layer.wq = gaussian(rng, d * d, inv_sqrt_d);
        layer.wk = gaussian(rng, d * d, inv_sqrt_d);
        layer.wv = gaussian(rng, d * d, inv_sqrt_d);
        layer.wo = gaussian(rng, d * d, inv_sqrt_d);
        layer.ln2_gain.assign(d, 1.0);
        layer.ln2_bias.assign(d, 0.0);
        layer.w1 = gaussian(rng, d * f, inv_sqrt_d);
        layer.b1 = gaussian(rng, f, 0.1);
        layer.w2 = gaussian(rng, f * d, 1.0 / std::sqrt(static_cast<double>(f)));
        layer.b2.assign(d, 0.0);
        weights_.layers.push_back(std::move(layer));
    }
    weights_.lnf_gain.assign(d, 1.0);
    weights_.lnf_bias.assign(d, 0.0);
    weights_.w_out = gaussian(rng, d * v, config_.logit_scale * inv_sqrt_d);
    weights_.b_out = gaussian(rng, v, 0.5);
}

std::vector<std::uint32_t> ToyBackend::encode(const std::string& text) const {
    if (text.empty()) {
        throw DomainError("toy backend: empty prompt");
    }
    const auto alphabet = kAlphabet.substr(0, config_.vocab_size - 1);
    std::vector<std::uint32_t> tokens;
    tokens.reserve(text.size());
    for (char c : text) {
        const auto pos = alphabet.find(c);
        if (pos == std::string_view::npos) {
            throw DomainError(std::string("toy backend: character '") + c + "' is outside the vocabulary");
        }
        tokens.push_back(static_cast<std::uint32_t>(pos));
    }
    return tokens;
}

std::string ToyBackend::decode(const std::vector<std::uint32_t>& tokens) const {
    std::string out;
    for (auto t : tokens) {
        if (t >= config_.vocab_size) {
            throw DomainError("toy backend: token id " + std::to_string(t) + " out of vocabulary");
        }
        if (t != eos()) {
            out.push_back(kAlphabet[t]);
        }
    }
    return out;
}

void ToyBackend::validate_latent(const LatentSequence& z) const {
    if (z.cols() != config_.d) {
        throw ShapeError("latent width " + std::to_string(z.cols()) + " does not match model width " +
                         std::to_string(config_.d));
    }
}

void ToyBackend::validate_output(const std::vector<std::uint32_t>& tokens) const {
    if (tokens.empty() || tokens.size() > config_.max_output_length) {
        throw DomainError("toy backend: output length outside [1, max_output_length]");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= config_.vocab_size) {
            throw DomainError("toy backend: token id " + std::to_string(tokens[i]) + " out of vocabulary");
        }
        if (tokens[i] == eos() && i + 1 != tokens.size()) {
            throw DomainError("toy backend: end-of-sequence before the last output token");
        }
    }
    if (tokens.back() != eos() && tokens.size() != config_.max_output_length) {
        throw DomainError("toy backend: output stops before max length without end-of-sequence");
    }
}

ToyBackend::Input ToyBackend::build_input(const QueryContext& ctx, const LatentSequence* z,
                                          const std::vector<std::uint32_t>& generated) const {
    const auto prompt = encode(ctx.text);
    const std::size_t d = config_.d;
    const std::size_t latent_rows = z ? z->rows() : 0;
    const std::size_t total_positions = latent_rows + prompt.size() + generated.size();
    if (total_positions > config_.max_positions) {
        throw DomainError("toy backend: input of " + std::to_string(total_positions) + " positions exceeds " +
                          std::to_string(config_.max_positions));
    }

    Input in;
    auto push = [&](std::span<const double> embedding, std::size_t position, std::ptrdiff_t latent_row) {
        const double* pe = &weights_.position_embedding[position * d];
        for (std::size_t j = 0; j < d; ++j) {
            in.x.push_back(embedding[j] + pe[j]);
        }
        in.latent_row.push_back(latent_row);
    };

    std::size_t position = 0;
    std::vector<double> row(d);
    for (std::size_t r = 0; r < latent_rows; ++r, ++position) {
        if (z->row_is_zero(r)) {
            continue;
        }
        const auto zr = z->row(r);
        std::copy(zr.begin(), zr.end(), row.begin());
        push(row, position, static_cast<std::ptrdiff_t>(r));
    }
    for (auto t : prompt) {
        push(std::span(&weights_.token_embedding[t * d], d), position++, -1);
    }
    in.context_end = in.latent_row.size();
    for (auto t : generated) {
        push(std::span(&weights_.token_embedding[t * d], d), position++, -1);
    }
    in.length = in.latent_row.size();
    return in;
}

ToyBackend::Trace ToyBackend::forward(const Input& input) const {
    const std::size_t n = input.length;
    const std::size_t d = config_.d;
    const std::size_t f = config_.ffn;
    const std::size_t heads = config_.heads;
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Trace tr;
    tr.length = n;
    Vec x = input.x;
    for (const auto& w : weights_.layers) {
        Trace::Layer c;
        const Vec a = layer_norm(x, w.ln1_gain, w.ln1_bias, n, d, c.ln1);
        c.q = matmul(a, w.wq, n, d, d);
        c.k = matmul(a, w.wk, n, d, d);
        c.v = matmul(a, w.wv, n, d, d);
        c.probs.assign(heads * n * n, 0.0);
        c.heads_out.assign(n * d, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                double* p = &c.probs[(h * n + i) * n];
                double peak = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        s += c.q[i * d + off + e] * c.k[j * d + off + e];
                    }
                    p[j] = s * scale;
                    peak = std::max(peak, p[j]);
                }
                double total = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] = std::exp(p[j] - peak);
                    total += p[j];
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] /= total;
                    for (std::size_t e = 0; e < dh; ++e) {
                        c.heads_out[i * d + off + e] += p[j] * c.v[j * d + off + e];
                    }
                }
            }
        }
        const Vec attn = matmul(c.heads_out, w.wo, n, d, d);
        for (std::size_t i = 0; i < n * d; ++i) {
            x[i] += attn[i];
        }

        const Vec b = layer_norm(x, w.ln2_gain, w.ln2_bias, n, d, c.ln2);
        c.u = matmul(b, w.w1, n, d, f);
        Vec act(n * f);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                c.u[i * f + j] += w.b1[j];
                act[i * f + j] = gelu(c.u[i * f + j]);
            }
        }
        const Vec mlp = matmul(act, w.w2, n, f, d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                x[i * d + j] += mlp[i * d + j] + w.b2[j];
            }
        }
        tr.layers.push_back(std::move(c));
    }
    tr.hidden = layer_norm(x, weights_.lnf_gain, weights_.lnf_bias, n, d, tr.lnf);
    const std::size_t v = config_.vocab_size;
    tr.logits = matmul(tr.hidden, weights_.w_out, n, d, v);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < v; ++j) {
            tr.logits[i * v + j] += weights_.b_out[j];
        }
    }
    return tr;
}

std::vector<double> ToyBackend::backward(const Trace& tr, const std::vector<double>& d_logits) const {
    const std::size_t n = tr.length;
    const std::size_t d = config_.d;
    const std::size_t f = config_.ffn;
    const std::size_t heads = config_.heads;
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Vec d_hidden = matmul_grad_input(d_logits, weights_.w_out, n, d, config_.vocab_size);
    Vec dx = layer_norm_backward(d_hidden, tr.lnf, weights_.lnf_gain, n, d);

    for (std::size_t li = weights_.layers.size(); li-- > 0;) {
        const auto& w = weights_.layers[li];
        const auto& c = tr.layers[li];

        // MLP branch.
        Vec d_act = matmul_grad_input(dx, w.w2, n, f, d);
        for (std::size_t i = 0; i < n * f; ++i) {
            d_act[i] *= gelu_grad(c.u[i]);
        }
        const Vec d_b = matmul_grad_input(d_act, w.w1, n, d, f);
        const Vec d_from_mlp = layer_norm_backward(d_b, c.ln2, w.ln2_gain, n, d);
        for (std::size_t i = 0; i < n * d; ++i) {
            dx[i] += d_from_mlp[i];
        }

        // Attention branch.
        const Vec d_heads = matmul_grad_input(dx, w.wo, n, d, d);
        Vec dq(n * d, 0.0);
        Vec dk(n * d, 0.0);
        Vec dv(n * d, 0.0);
        std::vector<double> dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                const double* p = &c.probs[(h * n + i) * n];
                double weighted = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    double g = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        g += d_heads[i * d + off + e] * c.v[j * d + off + e];
                        dv[j * d + off + e] += p[j] * d_heads[i * d + off + e];
                    }
                    dp[j] = g;
                    weighted += p[j] * g;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = p[j] * (dp[j] - weighted) * scale;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dq[i * d + off + e] += ds * c.k[j * d + off + e];
                        dk[j * d + off + e] += ds * c.q[i * d + off + e];
                    }
                }
            }
        }
        Vec d_a = matmul_grad_input(dq, w.wq, n, d, d);
        const Vec d_ak = matmul_grad_input(dk, w.wk, n, d, d);
        const Vec d_av = matmul_grad_input(dv, w.wv, n, d, d);
        for (std::size_t i = 0; i < n * d; ++i) {
            d_a[i] += d_ak[i] + d_av[i];
        }
        const Vec d_from_attn = layer_norm_backward(d_a, c.ln1, w.ln1_gain, n, d);
        for (std::size_t i = 0; i < n * d; ++i) {
            dx[i] += d_from_attn[i];
        }
    }
    return dx;
}

ContextEmbedding ToyBackend::embed_context(const QueryContext& ctx) const {
    const Input in = build_input(ctx, nullptr, {});
    const Trace tr = forward(in);
    const std::size_t d = config_.d;
    const std::size_t last = in.context_end - 1;
    std::vector<float> e(d);
    for (std::size_t j = 0; j < d; ++j) {
        e[j] = static_cast<float>(tr.hidden[last * d + j]);
    }
    return ContextEmbedding(std::move(e));
}

BaseLatent ToyBackend::base_latent(const QueryContext& ctx, std::size_t l_prime) const {
    if (l_prime == 0) {
        throw ConfigError("base latent length must be at least 1");
    }
    if (l_prime > config_.max_output_length) {
        throw ConfigError("base latent length " + std::to_string(l_prime) + " exceeds max output length " +
                          std::to_string(config_.max_output_length));
    }
    const std::size_t d = config_.d;
    const std::size_t v = config_.vocab_size;
    std::vector<std::uint32_t> generated;
    while (generated.size() < l_prime) {
        const Trace tr = forward(build_input(ctx, nullptr, generated));
        const std::uint32_t next = argmax(std::span(&tr.logits[(tr.length - 1) * v], v));
        if (next == eos()) {
            break;
        }
        generated.push_back(next);
    }

    std::vector<float> rows(l_prime * d, 0.0F);
    if (!generated.empty()) {
        const Input in = build_input(ctx, nullptr, generated);
        const Trace tr = forward(in);
        for (std::size_t r = 0; r < generated.size(); ++r) {
            const std::size_t pos = in.context_end + r;
            for (std::size_t j = 0; j < d; ++j) {
                rows[r * d + j] = static_cast<float>(tr.hidden[pos * d + j]);
            }
        }
    }
    return BaseLatent{LatentSequence(l_prime, d, std::move(rows)), generated.size() < l_prime, generated.size()};
}

std::vector<OutputSequence> ToyBackend::sample_outputs(const QueryContext& ctx, const LatentSequence& z, std::size_t n,
                                                       double temperature, std::uint64_t seed) const {
    validate_latent(z);
    if (n == 0) {
        throw PreconditionError("sample count must be at least 1");
    }
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
        throw DomainError("sampling temperature must be finite and non-negative");
    }
    const std::size_t v = config_.vocab_size;

    // Next-token logits per generated prefix; a pure function of the prefix,
    // so sharing it across samples of one call changes nothing but cost.
    std::map<std::vector<std::uint32_t>, Vec> memo;
    auto logits_for = [&](const std::vector<std::uint32_t>& prefix) -> const Vec& {
        auto it = memo.find(prefix);
        if (it == memo.end()) {
            const Trace tr = forward(build_input(ctx, &z, prefix));
            Vec last(tr.logits.begin() + static_cast<std::ptrdiff_t>((tr.length - 1) * v), tr.logits.end());
            it = memo.emplace(prefix, std::move(last)).first;
        }
        return it->second;
    };

    std::vector<OutputSequence> out;
    out.reserve(n);
    Vec weights(v);
    for (std::size_t s = 0; s < n; ++s) {
        Rng rng(derive_seed(seed, s));
        OutputSequence y;
        while (y.tokens.size() < config_.max_output_length) {
            const Vec& logits = logits_for(y.tokens);
            const Vec lp = log_softmax(logits);
            std::uint32_t tok = 0;
            if (temperature == 0.0) {
                tok = argmax(logits);
            } else {
                const double peak = *std::max_element(logits.begin(), logits.end());
                double total = 0.0;
                for (std::size_t j = 0; j < v; ++j) {
                    weights[j] = std::exp((logits[j] - peak) / temperature);
                    total += weights[j];
                }
                const double u = rng.uniform() * total;
                double cum = 0.0;
                tok = static_cast<std::uint32_t>(v - 1);
                for (std::size_t j = 0; j < v; ++j) {
                    cum += weights[j];
                    if (u < cum) {
                        tok = static_cast<std::uint32_t>(j);
                        break;
                    }
                }
            }
            y.log_prob += lp[tok];
            y.tokens.push_back(tok);
            if (tok == eos()) {
                break;
            }
        }
        y.text = decode(y.tokens);
        out.push_back(std::move(y));
    }
    return out;
}

double ToyBackend::log_prob(const QueryContext& ctx, const LatentSequence& z,
                            const std::vector<std::uint32_t>& tokens) const {
    validate_latent(z);
    validate_output(tokens);
    const std::vector<std::uint32_t> fed(tokens.begin(), tokens.end() - 1);
    const Input in = build_input(ctx, &z, fed);
    const Trace tr = forward(in);
    const std::size_t v = config_.vocab_size;
    double total = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::size_t pos = in.context_end - 1 + t;
        total += log_softmax(std::span(&tr.logits[pos * v], v))[tokens[t]];
    }
    return total;
}

Matrix ToyBackend::grad_log_prob(const QueryContext& ctx, const LatentSequence& z, const OutputSequence& y) const {
    validate_latent(z);
    validate_output(y.tokens);
    const std::vector<std::uint32_t> fed(y.tokens.begin(), y.tokens.end() - 1);
    const Input in = build_input(ctx, &z, fed);
    const Trace tr = forward(in);
    const std::size_t v = config_.vocab_size;
    const std::size_t d = config_.d;

    // d/dlogits of sum_t log softmax(logits_t)[y_t] = onehot(y_t) - softmax(logits_t).
    Vec d_logits(tr.length * v, 0.0);
    for (std::size_t t = 0; t < y.tokens.size(); ++t) {
        const std::size_t pos = in.context_end - 1 + t;
        const Vec lp = log_softmax(std::span(&tr.logits[pos * v], v));
        for (std::size_t j = 0; j < v; ++j) {
            d_logits[pos * v + j] = -std::exp(lp[j]);
        }
        d_logits[pos * v + y.tokens[t]] += 1.0;
    }
    const Vec dx = backward(tr, d_logits);

    Matrix grad(z.rows(), d);
    for (std::size_t i = 0; i < in.length; ++i) {
        const auto r = in.latent_row[i];
        if (r < 0) {
            continue;
        }
        for (std::size_t j = 0; j < d; ++j) {
            grad(static_cast<std::size_t>(r), j) = dx[i * d + j];
        }
    }
    return grad;
}

std::vector<OutputSequence> ToyBackend::enumerate_outputs(const QueryContext& ctx, const LatentSequence& z) const {
    validate_latent(z);
    const std::size_t v = config_.vocab_size;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < config_.max_output_length; ++i) {
        if (count > config_.enumeration_bound / v) {
            throw CapacityError("enumeration of " + std::to_string(v) + "^" +
                                std::to_string(config_.max_output_length) + " sequences exceeds the bound " +
                                std::to_string(config_.enumeration_bound));
        }
        count *= v;
    }

    std::vector<OutputSequence> out;
    std::vector<std::uint32_t> prefix;
    auto walk = [&](auto&& self, double logp) -> void {
        const Trace tr = forward(build_input(ctx, &z, prefix));
        const Vec lp = log_softmax(std::span(&tr.logits[(tr.length - 1) * v], v));
        for (std::uint32_t tok = 0; tok < v; ++tok) {
            prefix.push_back(tok);
            if (tok == eos() || prefix.size() == config_.max_output_length) {
                out.push_back(OutputSequence{prefix, decode(prefix), logp + lp[tok]});
            } else {
                self(self, logp + lp[tok]);
            }
            prefix.pop_back();
        }
    };
    walk(walk, 0.0);
    return out;
}

}  // namespace lev
