#include "roomsbi/flow.hpp"

#include <array>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <unsupported/Eigen/AutoDiff>

#include "roomsbi/parallel.hpp"
#include "roomsbi/random.hpp"

namespace roomsbi {

namespace {

constexpr int kMaxBins = 64;
constexpr Eigen::Index kChunk = 4096;
const double kLogTwoPi = std::log(2.0 * std::numbers::pi);

using Ad = Eigen::AutoDiffScalar<Eigen::Matrix<double, 7, 1>>;

double softplus(double u) { return u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)); }
double sigmoid(double u) { return u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u)); }

/// Softmax probabilities and knot positions for one set of B raw values.
void knots_from_raw(const double* raw, int B, double T, double min_size, double* prob, double* knots) {
    double peak = raw[0];
    for (int j = 1; j < B; ++j) peak = std::max(peak, raw[j]);
    double total = 0;
    for (int j = 0; j < B; ++j) total += prob[j] = std::exp(raw[j] - peak);
    for (int j = 0; j < B; ++j) prob[j] /= total;
    knots[0] = -T;
    double acc = 0;
    for (int j = 0; j + 1 < B; ++j) {
        acc += min_size + (1.0 - min_size * B) * prob[j];
        knots[j + 1] = -T + 2.0 * T * acc;
    }
    knots[B] = T;
}

/// Backward through knots_from_raw given gradients of (knot k, width of bin k).
void knots_backward(const double* prob, int B, int k, double T, double min_size, double g_knot, double g_width,
                    double* g_raw) {
    std::array<double, kMaxBins> g_p{};
    const double scale = 2.0 * T * (1.0 - min_size * B);
    for (int j = 0; j < k; ++j) g_p[static_cast<std::size_t>(j)] = scale * g_knot;
    g_p[static_cast<std::size_t>(k)] = scale * g_width;
    double dot = 0;
    for (int j = 0; j < B; ++j) dot += prob[j] * g_p[static_cast<std::size_t>(j)];
    for (int j = 0; j < B; ++j) g_raw[j] += prob[j] * (g_p[static_cast<std::size_t>(j)] - dot);
}

Eigen::Map<const Eigen::MatrixXd> weights(const Flow::Layer& l, const Eigen::VectorXd& p) {
    return {p.data() + l.offset, l.out, l.in};
}
Eigen::Map<const Eigen::VectorXd> bias(const Flow::Layer& l, const Eigen::VectorXd& p) {
    return {p.data() + l.offset + l.out * l.in, l.out};
}

Eigen::MatrixXd effective_weights(const Flow::Layer& l, const Eigen::VectorXd& p) {
    if (l.mask.size() == 0) return weights(l, p);
    return weights(l, p).cwiseProduct(l.mask);
}

Eigen::MatrixXd layer_forward(const Flow::Layer& l, const Eigen::VectorXd& p, const Eigen::MatrixXd& x) {
    Eigen::MatrixXd z = l.mask.size() == 0 ? Eigen::MatrixXd(weights(l, p) * x) : Eigen::MatrixXd(effective_weights(l, p) * x);
    z.colwise() += bias(l, p);
    return z;
}

/// Accumulates parameter gradients of one affine layer and returns dL/dx.
Eigen::MatrixXd layer_backward(const Flow::Layer& l, const Eigen::VectorXd& p, const Eigen::MatrixXd& x,
                               const Eigen::MatrixXd& dz, Eigen::VectorXd& grad) {
    Eigen::Map<Eigen::MatrixXd> gw(grad.data() + l.offset, l.out, l.in);
    Eigen::Map<Eigen::VectorXd> gb(grad.data() + l.offset + l.out * l.in, l.out);
    if (l.mask.size() == 0) {
        gw.noalias() += dz * x.transpose();
    } else {
        gw += (dz * x.transpose()).cwiseProduct(l.mask);
    }
    gb += dz.rowwise().sum();
    if (l.mask.size() == 0) return weights(l, p).transpose() * dz;
    return effective_weights(l, p).transpose() * dz;
}

Eigen::MatrixXd broadcast(const Eigen::MatrixXd& m, Eigen::Index cols) {
    if (m.cols() == cols) return m;
    if (m.cols() != 1) throw ValidationError("context columns must match theta columns or be 1");
    return m.replicate(1, cols);
}

void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw ValidationError(std::string(what) + " must be finite");
}

} // namespace

SplineValueGrad spline_forward_backward(double x, std::span<const double> raw, const SplineOptions& opts,
                                        double g_y, double g_ld, std::span<double> g_raw) {
    const int B = opts.bins;
    const double T = opts.tail;
    if (!(x > -T && x < T)) return {x, 0.0, g_y};

    std::array<double, kMaxBins + 1> kx, ky, dv;
    std::array<double, kMaxBins> pw, ph;
    knots_from_raw(raw.data(), B, T, opts.min_bin_width, pw.data(), kx.data());
    knots_from_raw(raw.data() + B, B, T, opts.min_bin_height, ph.data(), ky.data());
    dv[0] = 1.0;
    dv[static_cast<std::size_t>(B)] = 1.0;
    for (int j = 1; j < B; ++j)
        dv[static_cast<std::size_t>(j)] = opts.min_derivative + softplus(raw[static_cast<std::size_t>(2 * B + j - 1)]);

    const auto k = static_cast<std::size_t>(
        std::upper_bound(kx.begin() + 1, kx.begin() + B, x) - kx.begin() - 1);
    const double xk = kx[k], wk = kx[k + 1] - kx[k];
    const double yk = ky[k], hk = ky[k + 1] - ky[k];

    if (g_raw.empty()) {
        double y, ld;
        detail::rq_segment<double>(x, xk, wk, yk, hk, dv[k], dv[k + 1], y, ld);
        return {y, ld, 0.0};
    }

    using Vec7 = Eigen::Matrix<double, 7, 1>;
    const std::array<double, 7> vals{x, xk, wk, yk, hk, dv[k], dv[k + 1]};
    std::array<Ad, 7> v;
    for (int i = 0; i < 7; ++i) v[static_cast<std::size_t>(i)] = Ad(vals[static_cast<std::size_t>(i)], 7, i);
    Ad y, ld;
    detail::rq_segment<Ad>(v[0], v[1], v[2], v[3], v[4], v[5], v[6], y, ld);
    const Vec7 g = g_y * y.derivatives() + g_ld * ld.derivatives();

    const int kb = static_cast<int>(k);
    knots_backward(pw.data(), B, kb, T, opts.min_bin_width, g[1], g[2], g_raw.data());
    knots_backward(ph.data(), B, kb, T, opts.min_bin_height, g[3], g[4], g_raw.data() + B);
    if (kb >= 1) {
        const auto r = static_cast<std::size_t>(2 * B + kb - 1);
        g_raw[r] += g[5] * sigmoid(raw[r]);
    }
    if (kb + 1 <= B - 1) {
        const auto r = static_cast<std::size_t>(2 * B + kb);
        g_raw[r] += g[6] * sigmoid(raw[r]);
    }
    return {y.value(), ld.value(), g[0]};
}

// ---------------------------------------------------------------------------

ThetaBijection ThetaBijection::logit(const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
    if (lower.size() != upper.size()) throw ValidationError("bijection: bound sizes differ");
    if (!((upper - lower).array() > 0).all()) throw ValidationError("bijection: upper must exceed lower");
    return {Kind::Logit, lower, upper - lower};
}

ThetaBijection ThetaBijection::affine(const Eigen::VectorXd& mean, const Eigen::VectorXd& stddev) {
    if (mean.size() != stddev.size()) throw ValidationError("bijection: sizes differ");
    if (!(stddev.array() > 0).all()) throw ValidationError("bijection: scales must be positive");
    return {Kind::Affine, mean, stddev};
}

Eigen::MatrixXd ThetaBijection::forward(const Eigen::MatrixXd& theta, Eigen::VectorXd& log_det) const {
    if (theta.rows() != dim()) throw ValidationError("bijection: theta has the wrong dimension");
    Eigen::MatrixXd u = (theta.colwise() - shift).array().colwise() / scale.array();
    const double log_scale = scale.array().log().sum();
    if (kind == Kind::Affine) {
        log_det.array() -= log_scale;
        return u;
    }
    Eigen::MatrixXd y(u.rows(), u.cols());
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
        double ld = -log_scale;
        for (Eigen::Index i = 0; i < u.rows(); ++i) {
            const double v = u(i, j);
            if (!(v > 0 && v < 1)) {
                std::ostringstream msg;
                msg << "theta component " << i << " = " << theta(i, j)
                    << " lies outside the prior support (density is zero)";
                throw SupportError(msg.str());
            }
            const double l0 = std::log(v), l1 = std::log1p(-v);
            y(i, j) = l0 - l1;
            ld -= l0 + l1;
        }
        log_det[j] += ld;
    }
    return y;
}

Eigen::MatrixXd ThetaBijection::inverse(const Eigen::MatrixXd& y) const {
    if (kind == Kind::Affine) return (y.array().colwise() * scale.array()).colwise() + shift.array();
    Eigen::MatrixXd u = y.unaryExpr([](double v) { return sigmoid(v); });
    return (u.array().colwise() * scale.array()).colwise() + shift.array();
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& x) {
    if (x.cols() < 2) throw TrainingError("standardization needs at least two records");
    Standardizer s;
    s.mean = x.rowwise().mean();
    s.stddev = ((x.colwise() - s.mean).array().square().rowwise().sum() / static_cast<double>(x.cols() - 1)).sqrt();
    for (Eigen::Index i = 0; i < s.stddev.size(); ++i)
        if (!(s.stddev[i] > 1e-12 * std::max(1.0, std::abs(s.mean[i]))))
            throw TrainingError("standardization: data dimension " + std::to_string(i) + " is constant");
    return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& x) const {
    if (x.rows() != mean.size()) throw ValidationError("data has the wrong dimension for the standardizer");
    return (x.colwise() - mean).array().colwise() / stddev.array();
}

void FlowConfig::validate() const {
    if (theta_dim < 1 || data_dim < 1) throw ValidationError("flow: dimensions must be positive");
    if (transforms < 1) throw ValidationError("flow: need at least one transform");
    if (hidden < 1 || hidden_layers < 1) throw ValidationError("flow: hidden width and depth must be positive");
    if (spline.bins < 2 || spline.bins > kMaxBins) throw ValidationError("flow: bins must lie in [2, 64]");
    if (!(spline.tail > 0)) throw ValidationError("flow: tail bound must be positive");
    if (!(spline.min_bin_width > 0 && spline.min_bin_width * spline.bins < 1) ||
        !(spline.min_bin_height > 0 && spline.min_bin_height * spline.bins < 1) || !(spline.min_derivative > 0))
        throw ValidationError("flow: invalid spline minimum sizes");
    if (embedding) {
        if (embedding_dim < 1) throw ValidationError("flow: embedding size must be positive");
        for (int h : embedding_hidden)
            if (h < 1) throw ValidationError("flow: embedding hidden widths must be positive");
    }
}

// ---------------------------------------------------------------------------

Flow::Flow(const FlowConfig& cfg, ThetaBijection bijection, Standardizer standardizer, std::uint64_t seed)
    : cfg_(cfg), bijection_(std::move(bijection)), standardizer_(std::move(standardizer)) {
    cfg_.validate();
    if (bijection_.dim() != cfg_.theta_dim) throw ValidationError("flow: bijection dimension mismatch");
    if (standardizer_.mean.size() != cfg_.data_dim) throw ValidationError("flow: standardizer dimension mismatch");
    perms_.resize(static_cast<std::size_t>(cfg_.transforms));
    for (int t = 0; t < cfg_.transforms; ++t) {
        auto& p = perms_[static_cast<std::size_t>(t)];
        p.resize(static_cast<std::size_t>(cfg_.theta_dim));
        std::iota(p.begin(), p.end(), 0);
        Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(t)));
        std::shuffle(p.begin(), p.end(), rng.engine());
    }
    build(seed, true);
}

void Flow::build(std::uint64_t seed, bool init_params) {
    const Eigen::Index D = cfg_.theta_dim, C = cfg_.context_dim(), H = cfg_.hidden;
    const Eigen::Index R = cfg_.spline.raw_size();
    Eigen::Index offset = 0;
    const auto add = [&](Eigen::Index in, Eigen::Index out) {
        Layer l{in, out, offset, {}};
        offset += in * out + out;
        return l;
    };

    embed_.clear();
    if (cfg_.embedding) {
        Eigen::Index in = cfg_.data_dim;
        for (int h : cfg_.embedding_hidden) {
            embed_.push_back(add(in, h));
            in = h;
        }
        embed_.push_back(add(in, cfg_.embedding_dim));
    }

    // Degrees: theta input i has degree i+1, context 0; hidden units cycle
    // through 0..D-1; output rows of dimension d see hidden degrees < d+1.
    // Degree-0 units see only the context, so the first dimension is conditional too.
    Eigen::VectorXi hidden_deg(H);
    for (Eigen::Index k = 0; k < H; ++k) hidden_deg[k] = static_cast<int>(k % D);
    made_.assign(static_cast<std::size_t>(cfg_.transforms), {});
    for (auto& layers : made_) {
        Layer first = add(D + C, H);
        first.mask = Eigen::MatrixXd::Ones(H, D + C);
        for (Eigen::Index k = 0; k < H; ++k)
            for (Eigen::Index i = 0; i < D; ++i) first.mask(k, i) = hidden_deg[k] >= i + 1 ? 1.0 : 0.0;
        layers.push_back(first);
        for (int l = 1; l < cfg_.hidden_layers; ++l) {
            Layer mid = add(H, H);
            mid.mask.resize(H, H);
            for (Eigen::Index a = 0; a < H; ++a)
                for (Eigen::Index b = 0; b < H; ++b) mid.mask(a, b) = hidden_deg[a] >= hidden_deg[b] ? 1.0 : 0.0;
            layers.push_back(mid);
        }
        Layer last = add(H, D * R);
        last.mask.resize(D * R, H);
        for (Eigen::Index r = 0; r < D * R; ++r)
            for (Eigen::Index k = 0; k < H; ++k) last.mask(r, k) = (r / R) + 1 > hidden_deg[k] ? 1.0 : 0.0;
        layers.push_back(last);
    }

    free_ = Eigen::VectorXd::Ones(offset);
    for (const auto& layers : made_)
        for (const auto& l : layers)
            if (l.mask.size()) free_.segment(l.offset, l.in * l.out) = l.mask.reshaped();

    if (!init_params) return;
    params_.resize(offset);
    Rng rng(mix_seed(seed, 0));
    const auto init_uniform = [&](const Layer& l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
        for (Eigen::Index i = 0; i < l.in * l.out + l.out; ++i) params_[l.offset + i] = rng.uniform(-bound, bound);
    };
    for (const auto& l : embed_) init_uniform(l);
    const double id = identity_derivative_raw(cfg_.spline);
    for (const auto& layers : made_) {
        for (std::size_t i = 0; i + 1 < layers.size(); ++i) init_uniform(layers[i]);
        // Zero final layer: every spline starts as the identity map.
        const Layer& last = layers.back();
        params_.segment(last.offset, last.in * last.out).setZero();
        Eigen::Map<Eigen::VectorXd> b(params_.data() + last.offset + last.in * last.out, last.out);
        for (Eigen::Index r = 0; r < last.out; ++r) b[r] = (r % R) >= 2 * cfg_.spline.bins ? id : 0.0;
    }
    params_ = params_.cwiseProduct(free_);
}

Eigen::MatrixXd Flow::context(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd h = standardizer_.apply(x);
    for (std::size_t i = 0; i < embed_.size(); ++i) {
        h = layer_forward(embed_[i], params_, h);
        if (i + 1 < embed_.size()) h = h.array().tanh();
    }
    return h;
}

Eigen::MatrixXd Flow::conditioner(int t, const Eigen::MatrixXd& y, const Eigen::MatrixXd& ctx) const {
    const auto& layers = made_.at(static_cast<std::size_t>(t));
    Eigen::MatrixXd in(y.rows() + ctx.rows(), y.cols());
    in << y, broadcast(ctx, y.cols());
    Eigen::MatrixXd h = in;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layer_forward(layers[i], params_, h);
        if (i + 1 < layers.size()) h = h.array().tanh();
    }
    return h;
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> Flow::to_base(const Eigen::MatrixXd& theta,
                                                          const Eigen::MatrixXd& ctx) const {
    const Eigen::Index n = theta.cols(), D = cfg_.theta_dim, R = cfg_.spline.raw_size();
    Eigen::VectorXd log_det = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd y = bijection_.forward(theta, log_det);
    const Eigen::MatrixXd c = broadcast(ctx, n);
    for (int t = 0; t < cfg_.transforms; ++t) {
        const auto& perm = perms_[static_cast<std::size_t>(t)];
        Eigen::MatrixXd yin(D, n);
        for (Eigen::Index d = 0; d < D; ++d) yin.row(d) = y.row(perm[static_cast<std::size_t>(d)]);
        const Eigen::MatrixXd raw = conditioner(t, yin, c);
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index d = 0; d < D; ++d) {
                const auto r = spline_forward_backward(
                    yin(d, j), {raw.col(j).data() + d * R, static_cast<std::size_t>(R)}, cfg_.spline, 0, 0, {});
                yin(d, j) = r.y;
                log_det[j] += r.log_slope;
            }
        y = std::move(yin);
    }
    return {y, log_det};
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> Flow::from_base(const Eigen::MatrixXd& z,
                                                            const Eigen::MatrixXd& ctx) const {
    const Eigen::Index n = z.cols(), D = cfg_.theta_dim, R = cfg_.spline.raw_size();
    if (z.rows() != D) throw ValidationError("flow: base sample has the wrong dimension");
    if (ctx.cols() != 1 && ctx.cols() != n) throw ValidationError("flow: context columns mismatch");
    Eigen::VectorXd log_det = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd y = z;
    for (int t = cfg_.transforms - 1; t >= 0; --t) {
        const auto& layers = made_[static_cast<std::size_t>(t)];
        std::vector<Eigen::MatrixXd> w;
        for (const auto& l : layers) w.push_back(effective_weights(l, params_));
        const Eigen::MatrixXd& w0 = w.front();
        Eigen::MatrixXd pre = w0.rightCols(ctx.rows()) * ctx;
        pre.colwise() += bias(layers.front(), params_);
        if (pre.cols() != n) pre = pre.replicate(1, n).eval();

        Eigen::MatrixXd yin = Eigen::MatrixXd::Zero(D, n);
        const Layer& last = layers.back();
        for (Eigen::Index d = 0; d < D; ++d) {
            Eigen::MatrixXd h = pre.array().tanh();
            for (std::size_t i = 1; i + 1 < layers.size(); ++i) {
                h = w[i] * h;
                h.colwise() += bias(layers[i], params_);
                h = h.array().tanh();
            }
            Eigen::MatrixXd raw = w.back().middleRows(d * R, R) * h;
            raw.colwise() += bias(last, params_).segment(d * R, R);
            for (Eigen::Index j = 0; j < n; ++j) {
                const SplineParams sp =
                    make_spline_params<double>({raw.col(j).data(), static_cast<std::size_t>(R)}, cfg_.spline);
                const auto [x, ld] = spline_inverse(y(d, j), sp);
                yin(d, j) = x;
                log_det[j] += ld;
            }
            if (d + 1 < D) pre.noalias() += w0.col(d) * yin.row(d);
        }
        const auto& perm = perms_[static_cast<std::size_t>(t)];
        for (Eigen::Index d = 0; d < D; ++d) y.row(perm[static_cast<std::size_t>(d)]) = yin.row(d);
    }
    // log|d theta / dz| gains -log|dy/dtheta| of the bijection.
    Eigen::MatrixXd theta = bijection_.inverse(y);
    Eigen::VectorXd bij = Eigen::VectorXd::Zero(n);
    if (bijection_.kind == ThetaBijection::Kind::Logit) {
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < D; ++i) {
                const double v = y(i, j);
                // log(u (1-u)) with u = sigmoid(v), stable for large |v|.
                bij[j] += -std::abs(v) - 2.0 * std::log1p(std::exp(-std::abs(v)));
            }
        bij.array() += bijection_.scale.array().log().sum();
    } else {
        bij.array() += bijection_.scale.array().log().sum();
    }
    log_det += bij;
    return {theta, log_det};
}

Eigen::VectorXd Flow::log_prob(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x) const {
    if (theta.rows() != cfg_.theta_dim) throw ValidationError("flow: theta has the wrong dimension");
    if (x.cols() != 1 && x.cols() != theta.cols()) throw ValidationError("flow: data columns mismatch");
    const Eigen::MatrixXd ctx = context(x);
    Eigen::VectorXd out(theta.cols());
    for (Eigen::Index start = 0; start < theta.cols(); start += kChunk) {
        const Eigen::Index m = std::min(kChunk, theta.cols() - start);
        const Eigen::MatrixXd c = ctx.cols() == 1 ? ctx : Eigen::MatrixXd(ctx.middleCols(start, m));
        auto [z, ld] = to_base(theta.middleCols(start, m), c);
        out.segment(start, m) =
            -0.5 * z.colwise().squaredNorm().transpose().array() - 0.5 * kLogTwoPi * cfg_.theta_dim + ld.array();
    }
    return out;
}

double Flow::log_prob_single(const Eigen::VectorXd& theta, const Eigen::VectorXd& x) const {
    return log_prob(Eigen::MatrixXd(theta), Eigen::MatrixXd(x))[0];
}

double Flow::loss(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x, Eigen::VectorXd* grad,
                  double weight) const {
    const Eigen::Index n = theta.cols(), D = cfg_.theta_dim, R = cfg_.spline.raw_size();
    if (n == 0) throw ValidationError("flow: empty batch");
    if (theta.rows() != D) throw ValidationError("flow: theta has the wrong dimension");
    if (x.cols() != n) throw ValidationError("flow: theta and data column counts differ");
    if (!grad) return -log_prob(theta, x).mean();

    if (grad->size() != params_.size()) *grad = Eigen::VectorXd::Zero(params_.size());

    // Embedding forward with caches.
    std::vector<Eigen::MatrixXd> emb_in;
    Eigen::MatrixXd h = standardizer_.apply(x);
    for (std::size_t i = 0; i < embed_.size(); ++i) {
        emb_in.push_back(h);
        h = layer_forward(embed_[i], params_, h);
        if (i + 1 < embed_.size()) h = h.array().tanh();
    }
    const Eigen::MatrixXd ctx = std::move(h);
    const Eigen::Index C = ctx.rows();

    // Flow forward with caches.
    Eigen::VectorXd log_det = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd y = bijection_.forward(theta, log_det);
    std::vector<Eigen::MatrixXd> yins, raws;
    std::vector<std::vector<Eigen::MatrixXd>> acts(static_cast<std::size_t>(cfg_.transforms));
    for (int t = 0; t < cfg_.transforms; ++t) {
        const auto& perm = perms_[static_cast<std::size_t>(t)];
        const auto& layers = made_[static_cast<std::size_t>(t)];
        Eigen::MatrixXd yin(D, n);
        for (Eigen::Index d = 0; d < D; ++d) yin.row(d) = y.row(perm[static_cast<std::size_t>(d)]);
        Eigen::MatrixXd a(D + C, n);
        a << yin, ctx;
        auto& cache = acts[static_cast<std::size_t>(t)];
        for (std::size_t i = 0; i < layers.size(); ++i) {
            cache.push_back(a);
            a = layer_forward(layers[i], params_, a);
            if (i + 1 < layers.size()) a = a.array().tanh();
        }
        Eigen::MatrixXd yout(D, n);
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index d = 0; d < D; ++d) {
                const auto r = spline_forward_backward(
                    yin(d, j), {a.col(j).data() + d * R, static_cast<std::size_t>(R)}, cfg_.spline, 0, 0, {});
                yout(d, j) = r.y;
                log_det[j] += r.log_slope;
            }
        yins.push_back(std::move(yin));
        raws.push_back(std::move(a));
        y = std::move(yout);
    }
    const Eigen::VectorXd lp =
        -0.5 * y.colwise().squaredNorm().transpose().array() - 0.5 * kLogTwoPi * D + log_det.array();
    const double loss_value = -lp.mean();

    // Backward. Loss = weight * mean(0.5 |z|^2 - sum log slopes - bijection log det).
    const double inv_n = weight / static_cast<double>(n);
    Eigen::MatrixXd g_y = y * inv_n;
    Eigen::MatrixXd g_ctx = Eigen::MatrixXd::Zero(C, n);
    for (int t = cfg_.transforms - 1; t >= 0; --t) {
        const auto ts = static_cast<std::size_t>(t);
        const auto& layers = made_[ts];
        const Eigen::MatrixXd& yin = yins[ts];
        const Eigen::MatrixXd& raw = raws[ts];
        Eigen::MatrixXd g_raw = Eigen::MatrixXd::Zero(raw.rows(), n);
        Eigen::MatrixXd g_in(D, n);
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index d = 0; d < D; ++d) {
                const auto r = spline_forward_backward(
                    yin(d, j), {raw.col(j).data() + d * R, static_cast<std::size_t>(R)}, cfg_.spline, g_y(d, j),
                    -inv_n, {g_raw.col(j).data() + d * R, static_cast<std::size_t>(R)});
                g_in(d, j) = r.grad_x;
            }
        Eigen::MatrixXd g = std::move(g_raw);
        for (std::size_t i = layers.size(); i-- > 0;) {
            if (i + 1 < layers.size()) {
                // Output of layer i went through tanh; cache[i+1] holds that output.
                g = g.cwiseProduct((1.0 - acts[ts][i + 1].array().square()).matrix());
            }
            g = layer_backward(layers[i], params_, acts[ts][i], g, *grad);
        }
        g_in += g.topRows(D);
        g_ctx += g.bottomRows(C);
        const auto& perm = perms_[ts];
        Eigen::MatrixXd g_prev(D, n);
        for (Eigen::Index d = 0; d < D; ++d) g_prev.row(perm[static_cast<std::size_t>(d)]) = g_in.row(d);
        g_y = std::move(g_prev);
    }
    Eigen::MatrixXd g = std::move(g_ctx);
    for (std::size_t i = embed_.size(); i-- > 0;) {
        if (i + 1 < embed_.size()) g = g.cwiseProduct((1.0 - emb_in[i + 1].array().square()).matrix());
        g = layer_backward(embed_[i], params_, emb_in[i], g, *grad);
    }
    return loss_value;
}

Eigen::MatrixXd Flow::sample(const Eigen::VectorXd& x, Eigen::Index n, std::uint64_t seed, unsigned workers) const {
    if (n < 0) throw ValidationError("flow: negative sample count");
    Eigen::MatrixXd theta(cfg_.theta_dim, n);
    if (n == 0) return theta;
    Rng rng(seed);
    Eigen::MatrixXd z(cfg_.theta_dim, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < cfg_.theta_dim; ++i) z(i, j) = rng.normal();
    const Eigen::MatrixXd ctx = context(Eigen::MatrixXd(x));
    const auto chunks = static_cast<std::size_t>((n + kChunk - 1) / kChunk);
    parallel_for(chunks, workers, [&](std::size_t c) {
        const Eigen::Index start = static_cast<Eigen::Index>(c) * kChunk;
        const Eigen::Index m = std::min(kChunk, n - start);
        theta.middleCols(start, m) = from_base(z.middleCols(start, m), ctx).first;
    });
    return theta;
}

// ---------------------------------------------------------------------------
// Checkpoint: "roomsbi-flow <version>\n" + one JSON line + raw little-endian doubles.

namespace {

constexpr int kCheckpointVersion = 1;

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }
Eigen::VectorXd from_vec(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace

void Flow::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json j;
    j["theta_dim"] = cfg_.theta_dim;
    j["data_dim"] = cfg_.data_dim;
    j["transforms"] = cfg_.transforms;
    j["hidden"] = cfg_.hidden;
    j["hidden_layers"] = cfg_.hidden_layers;
    j["bins"] = cfg_.spline.bins;
    j["tail"] = cfg_.spline.tail;
    j["min_bin_width"] = cfg_.spline.min_bin_width;
    j["min_bin_height"] = cfg_.spline.min_bin_height;
    j["min_derivative"] = cfg_.spline.min_derivative;
    j["embedding"] = cfg_.embedding;
    j["embedding_hidden"] = cfg_.embedding_hidden;
    j["embedding_dim"] = cfg_.embedding_dim;
    j["bijection"] = bijection_.kind == ThetaBijection::Kind::Logit ? "logit" : "affine";
    j["bijection_shift"] = to_vec(bijection_.shift);
    j["bijection_scale"] = to_vec(bijection_.scale);
    j["data_mean"] = to_vec(standardizer_.mean);
    j["data_std"] = to_vec(standardizer_.stddev);
    j["permutations"] = perms_;
    j["num_parameters"] = params_.size();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write checkpoint " + path.string());
    out << "roomsbi-flow " << kCheckpointVersion << '\n' << j.dump() << '\n';
    out.write(reinterpret_cast<const char*>(params_.data()),
              static_cast<std::streamsize>(params_.size() * static_cast<Eigen::Index>(sizeof(double))));
    if (!out) throw ArtifactError("failed writing checkpoint " + path.string());
}

Flow Flow::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read checkpoint " + path.string());
    std::string magic, header;
    std::getline(in, magic);
    if (magic != "roomsbi-flow " + std::to_string(kCheckpointVersion))
        throw ArtifactError(path.string() + ": not a version " + std::to_string(kCheckpointVersion) +
                            " flow checkpoint");
    std::getline(in, header);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(path.string() + ": corrupt checkpoint header: " + e.what());
    }
    Flow f;
    try {
        f.cfg_.theta_dim = j.at("theta_dim");
        f.cfg_.data_dim = j.at("data_dim");
        f.cfg_.transforms = j.at("transforms");
        f.cfg_.hidden = j.at("hidden");
        f.cfg_.hidden_layers = j.at("hidden_layers");
        f.cfg_.spline.bins = j.at("bins");
        f.cfg_.spline.tail = j.at("tail");
        f.cfg_.spline.min_bin_width = j.at("min_bin_width");
        f.cfg_.spline.min_bin_height = j.at("min_bin_height");
        f.cfg_.spline.min_derivative = j.at("min_derivative");
        f.cfg_.embedding = j.at("embedding");
        f.cfg_.embedding_hidden = j.at("embedding_hidden").get<std::vector<int>>();
        f.cfg_.embedding_dim = j.at("embedding_dim");
        f.bijection_.kind =
            j.at("bijection") == "logit" ? ThetaBijection::Kind::Logit : ThetaBijection::Kind::Affine;
        f.bijection_.shift = from_vec(j.at("bijection_shift").get<std::vector<double>>());
        f.bijection_.scale = from_vec(j.at("bijection_scale").get<std::vector<double>>());
        f.standardizer_.mean = from_vec(j.at("data_mean").get<std::vector<double>>());
        f.standardizer_.stddev = from_vec(j.at("data_std").get<std::vector<double>>());
        f.perms_ = j.at("permutations").get<std::vector<std::vector<int>>>();
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(path.string() + ": incomplete checkpoint header: " + e.what());
    }
    f.cfg_.validate();
    f.build(0, false);
    const Eigen::Index n = j.at("num_parameters");
    if (n != f.free_.size()) throw ArtifactError(path.string() + ": parameter count does not match the architecture");
    f.params_.resize(n);
    in.read(reinterpret_cast<char*>(f.params_.data()), static_cast<std::streamsize>(n * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw ArtifactError(path.string() + ": truncated checkpoint");
    return f;
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const Flow& model, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x,
                           double step, double tolerance) {
    Eigen::VectorXd analytic;
    model.loss(theta, x, &analytic);
    Flow probe = model;
    GradCheckResult res;
    for (Eigen::Index i = 0; i < probe.num_parameters(); ++i) {
        const double p0 = probe.parameters()[i];
        probe.parameters()[i] = p0 + step;
        const double up = probe.loss(theta, x);
        probe.parameters()[i] = p0 - step;
        const double down = probe.loss(theta, x);
        probe.parameters()[i] = p0;
        const double numeric = (up - down) / (2 * step);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
        if (err > res.max_error || res.worst_parameter < 0) {
            res.max_error = err;
            res.worst_parameter = i;
            res.analytic = analytic[i];
            res.numeric = numeric;
        }
    }
    if (res.max_error > tolerance)
        throw DiagnosticError("grad_check: relative error " + std::to_string(res.max_error) + " at parameter " +
                              std::to_string(res.worst_parameter) + " (analytic " + std::to_string(res.analytic) +
                              ", numeric " + std::to_string(res.numeric) + ")");
    return res;
}

TrainResult train_flow(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x, const FlowConfig& cfg,
                       const ThetaBijection& bijection, const TrainConfig& tc,
                       const std::function<void(const EpochLog&)>& on_epoch) {
    const Eigen::Index n = theta.cols();
    if (x.cols() != n) throw ValidationError("train: theta and data record counts differ");
    if (tc.batch_size < 1) throw ValidationError("train: batch size must be positive");
    if (n < 10 * static_cast<Eigen::Index>(tc.batch_size))
        throw ValidationError("train: dataset must hold at least 10 x batch size records");
    if (!(tc.validation_fraction > 0 && tc.validation_fraction < 1))
        throw ValidationError("train: validation fraction must lie in (0, 1)");
    if (!(tc.learning_rate > 0)) throw ValidationError("train: learning rate must be positive");
    check_finite(tc.learning_rate, "learning rate");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    {
        Rng rng(mix_seed(tc.seed, 1));
        std::shuffle(order.begin(), order.end(), rng.engine());
    }
    const auto n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(tc.validation_fraction * static_cast<double>(n))));
    const Eigen::Index n_train = n - n_val;
    const auto gather = [&](const Eigen::MatrixXd& m, std::span<const Eigen::Index> idx) {
        Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(idx[k]);
        return out;
    };
    std::vector<Eigen::Index> train_idx(order.begin(), order.begin() + n_train);
    const std::vector<Eigen::Index> val_idx(order.begin() + n_train, order.end());
    const Eigen::MatrixXd theta_tr = gather(theta, train_idx), x_tr = gather(x, train_idx);
    const Eigen::MatrixXd theta_val = gather(theta, val_idx), x_val = gather(x, val_idx);

    TrainResult res;
    res.model = Flow(cfg, bijection, Standardizer::fit(x_tr), mix_seed(tc.seed, 2));
    Flow& model = res.model;

    const auto validation_loss = [&] {
        double total = 0;
        for (Eigen::Index s = 0; s < n_val; s += 1000) {
            const Eigen::Index m = std::min<Eigen::Index>(1000, n_val - s);
            total += -model.log_prob(theta_val.middleCols(s, m), x_val.middleCols(s, m)).sum();
        }
        return total / static_cast<double>(n_val);
    };

    res.initial_validation_loss = validation_loss();
    double best = res.initial_validation_loss;
    Eigen::VectorXd best_params = model.parameters();
    const Eigen::Index P = model.num_parameters();
    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(P), m2 = Eigen::VectorXd::Zero(P), grad(P);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    int since_best = 0;
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n_train));
    for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(mix_seed(tc.seed, 100 + static_cast<std::uint64_t>(epoch)));
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        double epoch_loss = 0;
        int batch_index = 0;
        for (Eigen::Index s = 0; s < n_train; s += tc.batch_size, ++batch_index) {
            const Eigen::Index m = std::min<Eigen::Index>(tc.batch_size, n_train - s);
            const std::span<const Eigen::Index> idx(perm.data() + s, static_cast<std::size_t>(m));
            grad.setZero();
            const double l = model.loss(gather(theta_tr, idx), gather(x_tr, idx), &grad);
            if (!std::isfinite(l) || !grad.allFinite())
                throw TrainingError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index));
            epoch_loss += l * static_cast<double>(m);
            if (tc.clip_norm > 0) {
                const double norm = grad.norm();
                if (norm > tc.clip_norm) grad *= tc.clip_norm / norm;
            }
            ++step;
            m1 = beta1 * m1 + (1 - beta1) * grad;
            m2 = beta2 * m2 + (1 - beta2) * grad.cwiseAbs2();
            const double c1 = 1 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1 - std::pow(beta2, static_cast<double>(step));
            model.parameters().array() -=
                tc.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
        }
        EpochLog entry{epoch, epoch_loss / static_cast<double>(n_train), validation_loss()};
        if (!std::isfinite(entry.validation_loss))
            throw TrainingError("non-finite validation loss in epoch " + std::to_string(epoch));
        res.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
        if (entry.validation_loss < best) {
            best = entry.validation_loss;
            best_params = model.parameters();
            res.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= tc.patience) {
            break;
        }
    }
    model.parameters() = best_params;
    return res;
}

} // namespace roomsbi
