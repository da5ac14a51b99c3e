#include "oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lev::oracle {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd mat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) {
        throw std::logic_error("oracle: weight block has unexpected size");
    }
    return Eigen::Map<const RowMajor>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Eigen::RowVectorXd row(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& g, const Eigen::RowVectorXd& b) {
    Eigen::MatrixXd y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        const Eigen::RowVectorXd c = x.row(i).array() - mu;
        const double var = c.squaredNorm() / static_cast<double>(x.cols());
        y.row(i) = (c / std::sqrt(var + 1e-5)).cwiseProduct(g) + b;
    }
    return y;
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    return v.array() - (m + std::log((v.array() - m).exp().sum()));
}

}  // namespace

ToyReference::ToyReference(const ToyBackend& backend) {
    const auto& c = backend.config();
    const auto& w = backend.weights();
    vocab_ = c.vocab_size;
    d_ = c.d;
    heads_ = c.heads;
    max_len_ = c.max_output_length;
    alphabet_ = std::string(ToyBackend::kAlphabet.substr(0, vocab_ - 1));
    tok_ = mat(w.token_embedding, vocab_, d_);
    pos_ = mat(w.position_embedding, c.max_positions, d_);
    w_out_ = mat(w.w_out, d_, vocab_);
    b_out_ = row(w.b_out);
    gf_ = row(w.lnf_gain);
    nf_ = row(w.lnf_bias);
    for (const auto& l : w.layers) {
        Layer r;
        r.wq = mat(l.wq, d_, d_);
        r.wk = mat(l.wk, d_, d_);
        r.wv = mat(l.wv, d_, d_);
        r.wo = mat(l.wo, d_, d_);
        r.w1 = mat(l.w1, d_, c.ffn);
        r.w2 = mat(l.w2, c.ffn, d_);
        r.b1 = row(l.b1);
        r.b2 = row(l.b2);
        r.g1 = row(l.ln1_gain);
        r.n1 = row(l.ln1_bias);
        r.g2 = row(l.ln2_gain);
        r.n2 = row(l.ln2_bias);
        layers_.push_back(std::move(r));
    }
}

Eigen::MatrixXd ToyReference::hidden_states(const std::string& prompt, const Eigen::MatrixXd* z,
                                            const std::vector<std::uint32_t>& generated) const {
    std::vector<Eigen::RowVectorXd> rows;
    Eigen::Index p = 0;
    if (z != nullptr) {
        for (Eigen::Index r = 0; r < z->rows(); ++r, ++p) {
            if ((z->row(r).array() == 0.0).all()) {
                continue;  // padding row
            }
            rows.emplace_back(z->row(r) + pos_.row(p));
        }
    }
    for (char ch : prompt) {
        const auto t = alphabet_.find(ch);
        if (t == std::string::npos) {
            throw std::invalid_argument("oracle: prompt character outside the vocabulary");
        }
        rows.emplace_back(tok_.row(static_cast<Eigen::Index>(t)) + pos_.row(p++));
    }
    for (auto t : generated) {
        rows.emplace_back(tok_.row(t) + pos_.row(p++));
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd x(n, d_);
    for (Eigen::Index i = 0; i < n; ++i) {
        x.row(i) = rows[static_cast<std::size_t>(i)];
    }

    const Eigen::Index dh = d_ / heads_;
    for (const auto& l : layers_) {
        const Eigen::MatrixXd a = layer_norm(x, l.g1, l.n1);
        const Eigen::MatrixXd q = a * l.wq;
        const Eigen::MatrixXd k = a * l.wk;
        const Eigen::MatrixXd v = a * l.wv;
        Eigen::MatrixXd heads(n, d_);
        for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(heads_); ++h) {
            Eigen::MatrixXd s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
            s /= std::sqrt(static_cast<double>(dh));
            Eigen::MatrixXd prob = Eigen::MatrixXd::Zero(n, n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::VectorXd e = (s.row(i).head(i + 1).array() - s.row(i).head(i + 1).maxCoeff()).exp();
                prob.row(i).head(i + 1) = e.transpose() / e.sum();
            }
            heads.middleCols(h * dh, dh) = prob * v.middleCols(h * dh, dh);
        }
        x += heads * l.wo;
        const Eigen::MatrixXd b = layer_norm(x, l.g2, l.n2);
        Eigen::MatrixXd u = (b * l.w1).rowwise() + l.b1;
        u = u.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0))); });
        x += (u * l.w2).rowwise() + l.b2;
    }
    return layer_norm(x, gf_, nf_);
}

Eigen::VectorXd ToyReference::next_token_log_probs(const std::string& prompt, const Eigen::MatrixXd& z,
                                                   const std::vector<std::uint32_t>& prefix) const {
    const Eigen::MatrixXd hs = hidden_states(prompt, &z, prefix);
    const Eigen::RowVectorXd logits = hs.row(hs.rows() - 1) * w_out_ + b_out_;
    return log_softmax(logits.transpose());
}

double ToyReference::log_prob(const std::string& prompt, const Eigen::MatrixXd& z,
                              const std::vector<std::uint32_t>& tokens) const {
    double total = 0.0;
    std::vector<std::uint32_t> prefix;
    for (auto t : tokens) {
        total += next_token_log_probs(prompt, z, prefix)(t);
        prefix.push_back(t);
    }
    return total;
}

Eigen::VectorXd ToyReference::context_embedding(const std::string& prompt) const {
    const Eigen::MatrixXd hs = hidden_states(prompt, nullptr, {});
    return hs.row(hs.rows() - 1).transpose();
}

Eigen::MatrixXd to_eigen(const LatentSequence& z) {
    Eigen::MatrixXd m(z.rows(), z.cols());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        for (std::size_t c = 0; c < z.cols(); ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = z.at(r, c);
        }
    }
    return m;
}

Eigen::MatrixXd to_eigen(const Matrix& g) { return mat(g.data, g.rows, g.cols); }

std::vector<std::vector<std::uint32_t>> all_sequences(std::uint32_t vocab, std::uint32_t max_len, std::uint32_t eos) {
    std::vector<std::vector<std::uint32_t>> out;
    for (std::uint32_t len = 1; len <= max_len; ++len) {
        // Odometer over the len-1 non-eos leading tokens.
        std::vector<std::uint32_t> digits(len, 0);
        while (true) {
            bool ok = true;
            for (std::uint32_t i = 0; i + 1 < len; ++i) {
                ok = ok && digits[i] != eos;
            }
            if (ok && (len == max_len || digits[len - 1] == eos)) {
                out.push_back(digits);
            }
            std::uint32_t i = 0;
            while (i < len && ++digits[i] == vocab) {
                digits[i++] = 0;
            }
            if (i == len) {
                break;
            }
        }
    }
    return out;
}

double brute_force_objective(const ToyReference& ref, const std::string& prompt, const Eigen::MatrixXd& z,
                             const QualityFn& quality) {
    double j = 0.0;
    for (const auto& y : all_sequences(ref.vocab(), ref.max_len(), ref.eos())) {
        j += std::exp(ref.log_prob(prompt, z, y)) * quality(y);
    }
    return j;
}

Eigen::MatrixXd central_difference(const std::function<double(const Eigen::MatrixXd&)>& f, const Eigen::MatrixXd& z,
                                   double h) {
    Eigen::MatrixXd g(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        Eigen::MatrixXd zp = z;
        Eigen::MatrixXd zm = z;
        zp(i) += h;
        zm(i) -= h;
        g(i) = (f(zp) - f(zm)) / (2.0 * h);
    }
    return g;
}

double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor) {
    return (a - b).norm() / std::max(b.norm(), floor);
}

double cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const double den = a.norm() * b.norm();
    return den == 0.0 ? 0.0 : (a.array() * b.array()).sum() / den;
}

std::vector<ScanHit> brute_force_topk(const std::vector<TripletRef>& entries, const ContextEmbedding& query,
                                      std::size_t k) {
    std::vector<ScanHit> all;
    const auto qv = query.values();
    for (const auto& t : entries) {
        const auto ev = t->embedding.values();
        double dot = 0.0, nq = 0.0, ne = 0.0;
        for (std::size_t i = 0; i < qv.size(); ++i) {
            dot += static_cast<double>(qv[i]) * ev[i];
            nq += static_cast<double>(qv[i]) * qv[i];
            ne += static_cast<double>(ev[i]) * ev[i];
        }
        all.push_back({t->created_at, dot / (std::sqrt(nq) * std::sqrt(ne))});
    }
    std::sort(all.begin(), all.end(), [](const ScanHit& a, const ScanHit& b) {
        return a.similarity != b.similarity ? a.similarity > b.similarity : a.created_at < b.created_at;
    });
    all.resize(std::min(k, all.size()));
    return all;
}

std::vector<double> reference_softmax(const std::vector<double>& s) {
    long double total = 0.0L;
    for (double v : s) {
        total += std::exp(static_cast<long double>(v));
    }
    std::vector<double> out;
    for (double v : s) {
        out.push_back(static_cast<double>(std::exp(static_cast<long double>(v)) / total));
    }
    return out;
}

Eigen::MatrixXd weaver_reference(const WeaverModel& w, const ContextEmbedding& e, const LatentSequence& z_base) {
    const auto& dm = w.dims();
    const auto& lay = w.layout();
    const auto p = w.parameters();
    const Eigen::Index de = dm.embedding_width, d = dm.latent_cols, h = dm.hidden;
    auto block = [&](std::size_t off, Eigen::Index r, Eigen::Index c) {
        RowMajor m(r, c);
        for (Eigen::Index i = 0; i < r * c; ++i) {
            m(i / c, i % c) = p[off + static_cast<std::size_t>(i)];
        }
        return Eigen::MatrixXd(m);
    };
    const Eigen::MatrixXd proj = block(lay.proj_w, h, de + d);
    const Eigen::VectorXd pb = block(lay.proj_b, h, 1);
    const Eigen::MatrixXd t1 = block(lay.t1_w, h, h);
    const Eigen::VectorXd t1b = block(lay.t1_b, h, 1);
    const Eigen::MatrixXd t2 = block(lay.t2_w, h, h);
    const Eigen::VectorXd t2b = block(lay.t2_b, h, 1);

    const Eigen::MatrixXd zb = to_eigen(z_base);
    Eigen::MatrixXd out = zb;
    for (Eigen::Index r = 0; r < zb.rows(); ++r) {
        Eigen::VectorXd x(de + d);
        for (Eigen::Index i = 0; i < de; ++i) {
            x(i) = e.values()[static_cast<std::size_t>(i)];
        }
        x.tail(d) = zb.row(r).transpose();
        const Eigen::VectorXd a0 = (proj * x + pb).array().tanh();
        const Eigen::VectorXd a1 = (t1 * a0 + t1b).array().tanh();
        const Eigen::VectorXd a2 = (t2 * a1 + t2b).array().tanh();
        const Eigen::MatrixXd head = block(lay.head_w + static_cast<std::size_t>(r * d * h), d, h);
        const Eigen::VectorXd hb = block(lay.head_b + static_cast<std::size_t>(r * d), d, 1);
        const double gate = p[lay.gate + static_cast<std::size_t>(r)];
        out.row(r) += gate * (head * a2 + hb).transpose();
    }
    return out;
}

}  // namespace lev::oracle
