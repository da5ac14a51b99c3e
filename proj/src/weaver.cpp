#include "lev/weaver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lev/binary_io.hpp"
#include "lev/errors.hpp"
#include "lev/rng.hpp"

namespace lev {

namespace {

constexpr std::string_view kMagic = "LEVWVR01";

// Per-row activations kept for the backward pass.
struct RowCache {
    std::vector<double> x, a0, a1, a2, o;
};

template <typename T>
void dense_tanh(std::span<const T> w, std::span<const T> b, const std::vector<double>& in, std::vector<double>& out) {
    const std::size_t n_out = b.size();
    const std::size_t n_in = in.size();
    out.assign(n_out, 0.0);
    for (std::size_t i = 0; i < n_out; ++i) {
        double s = static_cast<double>(b[i]);
        const T* wi = w.data() + i * n_in;
        for (std::size_t j = 0; j < n_in; ++j) {
            s += static_cast<double>(wi[j]) * in[j];
        }
        out[i] = std::tanh(s);
    }
}

// Forward for row r; writes the predicted row into `out` and fills cache.
template <typename T>
void row_forward(const WeaverDims& dims, const WeaverLayout& lay, std::span<const T> p, std::span<const float> e,
                 std::span<const float> z_row, std::size_t r, RowCache& c, std::vector<double>& out) {
    const std::size_t h = dims.hidden;
    const std::size_t d = dims.latent_cols;
    const std::size_t n_in = dims.embedding_width + d;
    c.x.resize(n_in);
    std::copy(e.begin(), e.end(), c.x.begin());
    std::copy(z_row.begin(), z_row.end(), c.x.begin() + static_cast<std::ptrdiff_t>(e.size()));

    dense_tanh<T>(p.subspan(lay.proj_w, h * n_in), p.subspan(lay.proj_b, h), c.x, c.a0);
    dense_tanh<T>(p.subspan(lay.t1_w, h * h), p.subspan(lay.t1_b, h), c.a0, c.a1);
    dense_tanh<T>(p.subspan(lay.t2_w, h * h), p.subspan(lay.t2_b, h), c.a1, c.a2);

    const T* hw = p.data() + lay.head_w + r * d * h;
    const T* hb = p.data() + lay.head_b + r * d;
    const double gate = static_cast<double>(p[lay.gate + r]);
    c.o.assign(d, 0.0);
    out.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        double s = static_cast<double>(hb[i]);
        for (std::size_t j = 0; j < h; ++j) {
            s += static_cast<double>(hw[i * h + j]) * c.a2[j];
        }
        c.o[i] = s;
        out[i] = static_cast<double>(z_row[i]) + gate * s;
    }
}

template <typename T>
double triplet_loss(const WeaverDims& dims, const WeaverLayout& lay, std::span<const T> p, const ExperienceTriplet& t) {
    RowCache c;
    std::vector<double> out;
    double sq = 0.0;
    for (std::size_t r = 0; r < dims.latent_rows; ++r) {
        row_forward<T>(dims, lay, p, t.embedding.values(), t.z_base.row(r), r, c, out);
        const auto star = t.z_star.row(r);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double diff = out[i] - static_cast<double>(star[i]);
            sq += diff * diff;
        }
    }
    return sq / static_cast<double>(dims.latent_rows * dims.latent_cols);
}

template <typename T>
double mean_loss(const WeaverDims& dims, const WeaverLayout& lay, std::span<const T> p,
                 std::span<const TripletRef> triplets) {
    double total = 0.0;
    for (const auto& t : triplets) {
        total += triplet_loss<T>(dims, lay, p, *t);
    }
    return total / static_cast<double>(triplets.size());
}

// Accumulates d(loss * weight)/d(params) for one triplet into grad.
void triplet_backward(const WeaverDims& dims, const WeaverLayout& lay, std::span<const double> p,
                      const ExperienceTriplet& t, double weight, std::vector<double>& grad) {
    const std::size_t h = dims.hidden;
    const std::size_t d = dims.latent_cols;
    const double norm = weight * 2.0 / static_cast<double>(dims.latent_rows * d);
    RowCache c;
    std::vector<double> out;
    std::vector<double> d_o(d), da2(h), du2(h), da1(h), du1(h), da0(h), du0(h);
    for (std::size_t r = 0; r < dims.latent_rows; ++r) {
        row_forward<double>(dims, lay, p, t.embedding.values(), t.z_base.row(r), r, c, out);
        const auto star = t.z_star.row(r);
        const double gate = p[lay.gate + r];
        double d_gate = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double d_out = norm * (out[i] - static_cast<double>(star[i]));
            d_gate += d_out * c.o[i];
            d_o[i] = gate * d_out;
        }
        grad[lay.gate + r] += d_gate;

        const std::size_t hw = lay.head_w + r * d * h;
        std::fill(da2.begin(), da2.end(), 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            grad[lay.head_b + r * d + i] += d_o[i];
            for (std::size_t j = 0; j < h; ++j) {
                grad[hw + i * h + j] += d_o[i] * c.a2[j];
                da2[j] += p[hw + i * h + j] * d_o[i];
            }
        }

        auto dense_back = [&](std::size_t w_off, std::size_t b_off, const std::vector<double>& in,
                              const std::vector<double>& act, const std::vector<double>& d_act, std::vector<double>& du,
                              std::vector<double>* d_in) {
            const std::size_t n = in.size();
            for (std::size_t i = 0; i < h; ++i) {
                du[i] = d_act[i] * (1.0 - act[i] * act[i]);
                grad[b_off + i] += du[i];
            }
            if (d_in) {
                d_in->assign(n, 0.0);
            }
            for (std::size_t i = 0; i < h; ++i) {
                const std::size_t row = w_off + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    grad[row + j] += du[i] * in[j];
                    if (d_in) {
                        (*d_in)[j] += p[row + j] * du[i];
                    }
                }
            }
        };
        dense_back(lay.t2_w, lay.t2_b, c.a1, c.a2, da2, du2, &da1);
        dense_back(lay.t1_w, lay.t1_b, c.a0, c.a1, da1, du1, &da0);
        dense_back(lay.proj_w, lay.proj_b, c.x, c.a0, da0, du0, nullptr);
    }
}

}  // namespace

WeaverLayout::WeaverLayout(const WeaverDims& dims) {
    const std::size_t h = dims.hidden;
    const std::size_t n_in = static_cast<std::size_t>(dims.embedding_width) + dims.latent_cols;
    const std::size_t rows = dims.latent_rows;
    const std::size_t d = dims.latent_cols;
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
        const std::size_t off = at;
        at += n;
        return off;
    };
    proj_w = take(h * n_in);
    proj_b = take(h);
    t1_w = take(h * h);
    t1_b = take(h);
    t2_w = take(h * h);
    t2_b = take(h);
    head_w = take(rows * d * h);
    head_b = take(rows * d);
    gate = take(rows);
    total = at;
}

WeaverModel::WeaverModel(WeaverDims dims, std::uint64_t seed) : dims_(dims), layout_(dims) {
    if (dims_.embedding_width == 0 || dims_.latent_cols == 0 || dims_.latent_rows == 0 || dims_.hidden == 0) {
        throw ShapeError("weaver dimensions must be positive");
    }
    params_.assign(layout_.total, 0.0F);
    Rng rng(seed);
    const std::size_t h = dims_.hidden;
    const std::size_t n_in = static_cast<std::size_t>(dims_.embedding_width) + dims_.latent_cols;
    auto xavier = [&](std::size_t off, std::size_t fan_out, std::size_t fan_in) {
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < fan_out * fan_in; ++i) {
            params_[off + i] = static_cast<float>(sd * rng.normal());
        }
    };
    xavier(layout_.proj_w, h, n_in);
    xavier(layout_.t1_w, h, h);
    xavier(layout_.t2_w, h, h);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(layout_.gate), params_.end(), 1.0F);
}

WeaverModel::WeaverModel(WeaverDims dims, std::vector<float> parameters, std::uint64_t version)
    : dims_(dims), layout_(dims), params_(std::move(parameters)), version_(version) {
    if (dims_.embedding_width == 0 || dims_.latent_cols == 0 || dims_.latent_rows == 0 || dims_.hidden == 0) {
        throw ShapeError("weaver dimensions must be positive");
    }
    if (params_.size() != layout_.total) {
        throw ShapeError("weaver expects " + std::to_string(layout_.total) + " parameters, got " +
                         std::to_string(params_.size()));
    }
    if (!std::all_of(params_.begin(), params_.end(), [](float v) { return std::isfinite(v); })) {
        throw DomainError("weaver parameters must be finite");
    }
}

void WeaverModel::check_shapes(const ContextEmbedding& e, const LatentSequence& z_base) const {
    if (e.width() != dims_.embedding_width || z_base.rows() != dims_.latent_rows ||
        z_base.cols() != dims_.latent_cols) {
        throw ShapeError("weaver input shape (" + std::to_string(e.width()) + ", " + std::to_string(z_base.rows()) +
                         "x" + std::to_string(z_base.cols()) + ") does not match (" +
                         std::to_string(dims_.embedding_width) + ", " + std::to_string(dims_.latent_rows) + "x" +
                         std::to_string(dims_.latent_cols) + ")");
    }
}

LatentSequence WeaverModel::apply(const ContextEmbedding& e, const LatentSequence& z_base) const {
    RowCache c;
    std::vector<double> out;
    std::vector<float> result(z_base.size());
    const std::span<const float> p(params_);
    for (std::size_t r = 0; r < dims_.latent_rows; ++r) {
        row_forward<float>(dims_, layout_, p, e.values(), z_base.row(r), r, c, out);
        for (std::size_t i = 0; i < out.size(); ++i) {
            result[r * dims_.latent_cols + i] = static_cast<float>(out[i]);
        }
    }
    return LatentSequence(z_base.rows(), z_base.cols(), std::move(result));
}

LatentSequence WeaverModel::forward(const ContextEmbedding& e, const LatentSequence& z_base) const {
    check_shapes(e, z_base);
    if (!trained()) {
        return z_base;
    }
    return apply(e, z_base);
}

double WeaverModel::loss(std::span<const TripletRef> triplets) const {
    if (triplets.empty()) {
        throw PreconditionError("weaver loss over an empty triplet set");
    }
    for (const auto& t : triplets) {
        check_shapes(t->embedding, t->z_base);
    }
    return mean_loss<float>(dims_, layout_, std::span<const float>(params_), triplets);
}

std::vector<std::uint8_t> WeaverModel::serialize() const {
    io::ByteWriter w;
    w.put_bytes(kMagic);
    w.put_u64(version_);
    w.put_u32(dims_.embedding_width);
    w.put_u32(dims_.latent_cols);
    w.put_u32(dims_.latent_rows);
    w.put_u32(dims_.hidden);
    w.put_f32s(params_);
    w.seal();
    return w.bytes();
}

WeaverModel WeaverModel::deserialize(std::vector<std::uint8_t> bytes, const std::string& source_name) {
    constexpr std::size_t kHeader = 8 + 8 + 4 * 4;
    if (bytes.size() < 8) {
        throw LoadError(LoadError::Kind::Truncated, source_name + ": file too short for a weaver header");
    }
    if (std::string_view(reinterpret_cast<const char*>(bytes.data()), 8) != kMagic) {
        throw LoadError(LoadError::Kind::BadMagic, source_name + ": not a weaver file");
    }
    if (bytes.size() < kHeader + 4) {
        throw LoadError(LoadError::Kind::Truncated, source_name + ": file too short for a weaver header");
    }
    io::ByteReader r(std::move(bytes), source_name);
    r.get_bytes(8);
    const std::uint64_t version = r.get_u64();
    WeaverDims dims;
    dims.embedding_width = r.get_u32();
    dims.latent_cols = r.get_u32();
    dims.latent_rows = r.get_u32();
    dims.hidden = r.get_u32();
    if (dims.embedding_width == 0 || dims.latent_cols == 0 || dims.latent_rows == 0 || dims.hidden == 0) {
        throw LoadError(LoadError::Kind::Malformed, source_name + ": zero weaver dimension");
    }
    const WeaverLayout layout(dims);
    const std::size_t expected = kHeader + layout.total * 4 + 4;
    if (r.total_size() < expected) {
        throw LoadError(LoadError::Kind::Truncated, source_name + ": truncated weaver file (" +
                                                        std::to_string(r.total_size()) + " of " +
                                                        std::to_string(expected) + " bytes)");
    }
    if (r.total_size() > expected) {
        throw LoadError(LoadError::Kind::Malformed, source_name + ": trailing bytes after the weaver parameters");
    }
    r.verify_checksum();
    auto params = r.get_f32s(layout.total);
    try {
        return WeaverModel(dims, std::move(params), version);
    } catch (const Error& e) {
        throw LoadError(LoadError::Kind::Malformed, source_name + ": " + e.what());
    }
}

void WeaverModel::save(const std::filesystem::path& destination) const {
    io::write_file_atomic(destination, serialize());
}

WeaverModel WeaverModel::load(const std::filesystem::path& source) {
    return deserialize(io::read_file(source), source.string());
}

class WeaverTrainer {
public:
    static ConsolidationReport run(WeaverModel& w, std::span<const TripletRef> triplets, const WeaverTrainConfig& cfg,
                                   std::uint64_t seed);
};

ConsolidationReport WeaverTrainer::run(WeaverModel& w, std::span<const TripletRef> triplets,
                                       const WeaverTrainConfig& cfg, std::uint64_t seed) {
    if (triplets.empty()) {
        throw PreconditionError("consolidation needs at least one triplet");
    }
    for (const auto& t : triplets) {
        w.check_shapes(t->embedding, t->z_base);
    }
    if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0)) {
        throw ConfigError("weaver training needs positive epochs, batch size and learning rate");
    }

    const auto& dims = w.dims_;
    const auto& lay = w.layout_;
    const std::vector<float> entry = w.params_;

    ConsolidationReport report;
    report.triplets_used = triplets.size();
    report.initial_loss = mean_loss<float>(dims, lay, std::span<const float>(entry), triplets);
    if (!std::isfinite(report.initial_loss)) {
        report.message = "non-finite initial loss";
        report.final_loss = report.initial_loss;
        return report;
    }

    std::vector<double> p(entry.begin(), entry.end());
    std::vector<double> m(p.size(), 0.0);
    std::vector<double> v(p.size(), 0.0);
    std::vector<double> grad(p.size());
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;
    std::uint64_t step = 0;

    std::vector<float> best = entry;
    double best_loss = report.initial_loss;
    std::size_t stale = 0;
    std::vector<std::size_t> order(triplets.size());
    std::vector<float> rounded(p.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(seed, epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.below(i)]);
        }
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            const double weight = 1.0 / static_cast<double>(end - start);
            for (std::size_t b = start; b < end; ++b) {
                triplet_backward(dims, lay, p, *triplets[order[b]], weight, grad);
            }
            ++step;
            const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
                v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
            }
        }
        report.epochs_run = epoch + 1;

        for (std::size_t i = 0; i < p.size(); ++i) {
            rounded[i] = static_cast<float>(p[i]);
        }
        const double epoch_loss = mean_loss<float>(dims, lay, std::span<const float>(rounded), triplets);
        if (!std::isfinite(epoch_loss) ||
            !std::all_of(rounded.begin(), rounded.end(), [](float x) { return std::isfinite(x); })) {
            w.params_ = entry;
            report.final_loss = epoch_loss;
            report.succeeded = false;
            report.message = "non-finite loss at epoch " + std::to_string(epoch + 1) + "; parameters rolled back";
            return report;
        }
        const double gain = best_loss - epoch_loss;
        if (epoch_loss < best_loss) {
            best_loss = epoch_loss;
            best = rounded;
        }
        stale = gain < cfg.min_delta ? stale + 1 : 0;
        if (stale >= cfg.patience) {
            break;
        }
    }

    w.params_ = std::move(best);
    ++w.version_;
    report.final_loss = best_loss;
    report.succeeded = true;
    return report;
}

ConsolidationReport consolidate(WeaverModel& weaver, std::span<const TripletRef> triplets,
                                const WeaverTrainConfig& cfg, std::uint64_t seed) {
    return WeaverTrainer::run(weaver, triplets, cfg, seed);
}

ConsolidationReport consolidate(WeaverModel& weaver, const EpisodicBuffer& buffer, const WeaverTrainConfig& cfg,
                                std::uint64_t seed, std::optional<std::uint64_t> only_since) {
    auto triplets = buffer.snapshot();
    if (only_since) {
        std::erase_if(triplets, [&](const TripletRef& t) { return t->created_at < *only_since; });
    }
    if (triplets.empty()) {
        throw PreconditionError("consolidation on an empty buffer");
    }
    return WeaverTrainer::run(weaver, triplets, cfg, seed);
}

}  // namespace lev
