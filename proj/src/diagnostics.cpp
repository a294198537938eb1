#include "roomsbi/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "roomsbi/io.hpp"
#include "roomsbi/parallel.hpp"
#include "roomsbi/random.hpp"

namespace roomsbi {

double relative_l2(const Eigen::VectorXcd& est, const Eigen::VectorXcd& ref, std::span<const double> freqs) {
    if (est.size() != ref.size() || ref.size() == 0)
        throw ValidationError("relative_l2: need equal, non-empty frequency sequences");
    double total = 0;
    for (Eigen::Index f = 0; f < ref.size(); ++f) {
        const double r = std::abs(ref[f]);
        if (r == 0) {
            const std::string where = static_cast<Eigen::Index>(freqs.size()) == ref.size()
                                          ? "f = " + format_double(freqs[static_cast<std::size_t>(f)]) + " Hz"
                                          : "index " + std::to_string(f);
            throw DomainError("relative_l2: zero reference impedance at " + where);
        }
        total += std::abs(est[f] - ref[f]) / r;
    }
    return total / static_cast<double>(ref.size());
}

double mac(const Eigen::VectorXcd& ref, const Eigen::VectorXcd& est) {
    if (ref.size() != est.size() || ref.size() == 0) throw ValidationError("mac: need equal, non-empty vectors");
    const double a = ref.squaredNorm(), b = est.squaredNorm();
    if (a == 0 || b == 0) throw DomainError("mac: zero-norm field");
    return std::min(1.0, std::norm(ref.dot(est)) / (a * b));
}

double spl_magnitude(double abs_p) {
    if (abs_p == 0) return -std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(abs_p / (std::sqrt(2.0) * 2e-5));
}

double spl(Complex p) { return spl_magnitude(std::abs(p)); }

std::vector<Eigen::Index> validation_nodes(const HexMesh& mesh, const RoomSpec& room,
                                           std::span<const Vector3> observation_points, std::size_t cap,
                                           std::uint64_t seed, double exclusion) {
    std::vector<Eigen::Index> nodes;
    for (Eigen::Index i = 0; i < mesh.num_nodes(); ++i) {
        const Vector3 x = mesh.nodes.col(i);
        if ((x - room.source_position).norm() < exclusion) continue;
        bool at_obs = false;
        for (const auto& p : observation_points) at_obs = at_obs || (x - p).norm() < 1e-9;
        if (!at_obs) nodes.push_back(i);
    }
    if (nodes.size() > cap) {
        Rng rng(seed);
        std::shuffle(nodes.begin(), nodes.end(), rng.engine());
        nodes.resize(cap);
        std::sort(nodes.begin(), nodes.end());
    }
    return nodes;
}

// ---------------------------------------------------------------------------
// Posterior predictive check

namespace {

BandStats column_bands(const Eigen::MatrixXd& m, double mass) {
    BandStats b;
    b.mean = m.colwise().mean().transpose();
    b.lower.resize(m.cols());
    b.upper.resize(m.cols());
    for (Eigen::Index f = 0; f < m.cols(); ++f) {
        const Eigen::VectorXd col = m.col(f);
        std::tie(b.lower[f], b.upper[f]) = hdi({col.data(), static_cast<std::size_t>(col.size())}, mass);
    }
    return b;
}

bool inside(const BandStats& b, Eigen::Index f, double v) { return b.lower[f] <= v && v <= b.upper[f]; }

} // namespace

bool PPCReport::reference_inside(Eigen::Index f) const {
    return inside(re_band, f, ref_re[f]) && inside(im_band, f, ref_im[f]) && inside(spl_band, f, ref_spl[f]);
}

double PPCReport::fraction_inside() const {
    int n = 0;
    for (Eigen::Index f = 0; f < ref_re.size(); ++f) n += reference_inside(f);
    return ref_re.size() ? static_cast<double>(n) / static_cast<double>(ref_re.size()) : 0.0;
}

void PPCReport::write_csv(const std::filesystem::path& path) const {
    const auto nf = static_cast<Eigen::Index>(freqs.size());
    Eigen::MatrixXd rows(nf, 17);
    for (Eigen::Index f = 0; f < nf; ++f)
        rows.row(f) << freqs[static_cast<std::size_t>(f)], ref_re[f], re_band.mean[f], re_band.lower[f],
            re_band.upper[f], ref_im[f], im_band.mean[f], im_band.lower[f], im_band.upper[f], ref_spl[f],
            spl_band.mean[f], spl_band.lower[f], spl_band.upper[f], mac_band.mean[f], mac_band.lower[f],
            mac_band.upper[f], reference_inside(f) ? 1.0 : 0.0;
    roomsbi::write_csv(path,
                       {"frequency_hz", "ref_re", "mean_re", "hdi_lo_re", "hdi_hi_re", "ref_im", "mean_im", "hdi_lo_im",
                        "hdi_hi_im", "ref_spl", "mean_spl", "hdi_lo_spl", "hdi_hi_spl", "mac_mean", "mac_hdi_lo",
                        "mac_hdi_hi", "reference_inside"},
                       rows);
}

PPCReport posterior_predictive_check(const Eigen::MatrixXd& posterior_samples, const Simulator& predictive,
                                     const Eigen::MatrixXcd& reference, const PPCOptions& opts) {
    const auto nf = static_cast<Eigen::Index>(predictive.freqs.size());
    const auto np = static_cast<Eigen::Index>(predictive.n_points());
    if (reference.rows() != np || reference.cols() != nf)
        throw ValidationError("ppc: reference field must be points x frequencies of the predictive simulator");
    if (opts.n_ppc < 100) throw ValidationError("ppc: n_ppc must be at least 100 for the HDIs");
    if (static_cast<Eigen::Index>(opts.n_ppc) > posterior_samples.cols())
        throw ValidationError("ppc: n_ppc exceeds the number of posterior samples");

    std::vector<Eigen::Index> pick(static_cast<std::size_t>(posterior_samples.cols()));
    std::iota(pick.begin(), pick.end(), 0);
    Rng rng(opts.seed);
    std::shuffle(pick.begin(), pick.end(), rng.engine());
    pick.resize(opts.n_ppc);

    const auto n = static_cast<Eigen::Index>(opts.n_ppc);
    Eigen::MatrixXd re(n, nf), im(n, nf), level(n, nf), macs(n, nf);
    std::vector<char> failed(opts.n_ppc, 0);
    parallel_for(opts.n_ppc, opts.workers, [&](std::size_t k) {
        const auto r = static_cast<Eigen::Index>(k);
        Eigen::MatrixXcd fields;
        try {
            fields = predictive.simulate_fields(posterior_samples.col(pick[k]));
        } catch (const SolverError&) {
            failed[k] = 1;
            return;
        } catch (const ValidationError&) {
            failed[k] = 1;
            return;
        }
        for (Eigen::Index f = 0; f < nf; ++f) {
            re(r, f) = fields.col(f).real().mean();
            im(r, f) = fields.col(f).imag().mean();
            level(r, f) = spl_magnitude(fields.col(f).cwiseAbs().mean());
            macs(r, f) = mac(reference.col(f), fields.col(f));
        }
    });

    std::vector<Eigen::Index> ok;
    for (std::size_t k = 0; k < failed.size(); ++k)
        if (!failed[k]) ok.push_back(static_cast<Eigen::Index>(k));
    PPCReport rep;
    rep.n_failed = failed.size() - ok.size();
    if (static_cast<double>(rep.n_failed) > opts.max_failure_fraction * static_cast<double>(opts.n_ppc))
        throw DiagnosticError("ppc: " + std::to_string(rep.n_failed) + " of " + std::to_string(opts.n_ppc) +
                              " predictive simulations failed");
    rep.freqs = predictive.freqs;
    rep.n_ppc = ok.size();
    rep.mass = opts.mass;
    rep.re = re(ok, Eigen::all);
    rep.im = im(ok, Eigen::all);
    rep.spl = level(ok, Eigen::all);
    rep.mac = macs(ok, Eigen::all);
    rep.re_band = column_bands(rep.re, opts.mass);
    rep.im_band = column_bands(rep.im, opts.mass);
    rep.spl_band = column_bands(rep.spl, opts.mass);
    rep.mac_band = column_bands(rep.mac, opts.mass);
    rep.ref_re = reference.real().colwise().mean().transpose();
    rep.ref_im = reference.imag().colwise().mean().transpose();
    rep.ref_spl.resize(nf);
    for (Eigen::Index f = 0; f < nf; ++f) rep.ref_spl[f] = spl_magnitude(reference.col(f).cwiseAbs().mean());
    return rep;
}

// ---------------------------------------------------------------------------
// Classifier

namespace {

Eigen::MatrixXd relu(const Eigen::MatrixXd& z) { return z.cwiseMax(0.0); }

double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

} // namespace

Classifier Classifier::fit(const Eigen::MatrixXd& features, const Eigen::VectorXd& labels, const ClassifierConfig& cfg,
                           std::uint64_t seed) {
    const Eigen::Index n = features.cols(), d = features.rows();
    if (labels.size() != n || n == 0) throw ValidationError("classifier: labels must match the feature columns");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0) || cfg.patience < 1)
        throw ValidationError("classifier: epochs, batch size, learning rate and patience must be positive");
    if (!(cfg.validation_fraction >= 0 && cfg.validation_fraction < 1))
        throw ValidationError("classifier: validation_fraction must lie in [0, 1)");
    Classifier c;
    c.mean_ = features.rowwise().mean();
    c.scale_ = ((features.colwise() - c.mean_).array().square().rowwise().sum() / static_cast<double>(n)).sqrt();
    for (Eigen::Index i = 0; i < d; ++i)
        if (!(c.scale_[i] > 1e-12)) c.scale_[i] = 1.0;
    const Eigen::MatrixXd x = (features.colwise() - c.mean_).array().colwise() / c.scale_.array();

    Rng rng(mix_seed(seed, 0));
    std::vector<int> sizes{static_cast<int>(d)};
    sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
    sizes.push_back(1);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
        Eigen::MatrixXd w(sizes[l + 1], sizes[l]);
        Eigen::VectorXd b(sizes[l + 1]);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
        for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
        c.w_.push_back(w);
        c.b_.push_back(b);
    }
    const std::size_t L = c.w_.size();
    std::vector<Eigen::MatrixXd> mw, vw;
    std::vector<Eigen::VectorXd> mb, vb;
    for (std::size_t l = 0; l < L; ++l) {
        mw.push_back(Eigen::MatrixXd::Zero(c.w_[l].rows(), c.w_[l].cols()));
        vw.push_back(mw.back());
        mb.push_back(Eigen::VectorXd::Zero(c.b_[l].size()));
        vb.push_back(mb.back());
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;

    std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(n)));
    if (n_val > 0) {
        Rng split(mix_seed(seed, 0x5eed));
        std::shuffle(all.begin(), all.end(), split.engine());
    }
    const std::vector<Eigen::Index> held(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<Eigen::Index> order(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
    std::sort(order.begin(), order.end());
    if (order.empty()) throw ValidationError("classifier: validation_fraction leaves no training examples");

    const auto held_loss = [&] {
        Eigen::MatrixXd a = x(Eigen::all, held);
        for (std::size_t l = 0; l < L; ++l) {
            Eigen::MatrixXd z = c.w_[l] * a;
            z.colwise() += c.b_[l];
            a = l + 1 < L ? relu(z) : z;
        }
        double loss = 0;
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            loss += softplus(a(0, j)) - labels[held[static_cast<std::size_t>(j)]] * a(0, j);
        return loss / static_cast<double>(held.size());
    };
    double best = n_val > 0 ? held_loss() : 0;
    auto best_w = c.w_;
    auto best_b = c.b_;
    int since_best = 0;

    const auto m_total = static_cast<Eigen::Index>(order.size());
    std::vector<Eigen::MatrixXd> act(L + 1);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle.engine());
        double epoch_loss = 0;
        for (Eigen::Index s = 0; s < m_total; s += cfg.batch_size) {
            const Eigen::Index m = std::min<Eigen::Index>(cfg.batch_size, m_total - s);
            const std::span<const Eigen::Index> idx(order.data() + s, static_cast<std::size_t>(m));
            act[0] = x(Eigen::all, idx);
            for (std::size_t l = 0; l < L; ++l) {
                Eigen::MatrixXd z = c.w_[l] * act[l];
                z.colwise() += c.b_[l];
                act[l + 1] = l + 1 < L ? relu(z) : z;
            }
            // Binary cross-entropy with logits: softplus(z) - y z.
            Eigen::MatrixXd delta(1, m);
            for (Eigen::Index j = 0; j < m; ++j) {
                const double z = act[L](0, j), y = labels[idx[static_cast<std::size_t>(j)]];
                epoch_loss += softplus(z) - y * z;
                delta(0, j) = (1.0 / (1.0 + std::exp(-z)) - y) / static_cast<double>(m);
            }
            ++step;
            const double c1 = 1 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1 - std::pow(beta2, static_cast<double>(step));
            for (std::size_t l = L; l-- > 0;) {
                const Eigen::MatrixXd gw = delta * act[l].transpose();
                const Eigen::VectorXd gb = delta.rowwise().sum();
                if (l > 0) delta = ((c.w_[l].transpose() * delta).array() * (act[l].array() > 0).cast<double>()).matrix();
                mw[l] = beta1 * mw[l] + (1 - beta1) * gw;
                vw[l] = beta2 * vw[l] + (1 - beta2) * gw.cwiseAbs2();
                mb[l] = beta1 * mb[l] + (1 - beta1) * gb;
                vb[l] = beta2 * vb[l] + (1 - beta2) * gb.cwiseAbs2();
                c.w_[l].array() -= cfg.learning_rate * (mw[l].array() / c1) / ((vw[l].array() / c2).sqrt() + eps);
                c.b_[l].array() -= cfg.learning_rate * (mb[l].array() / c1) / ((vb[l].array() / c2).sqrt() + eps);
            }
        }
        if (!std::isfinite(epoch_loss))
            throw DiagnosticError("classifier training diverged in epoch " + std::to_string(epoch));
        if (n_val == 0) continue;
        const double v = held_loss();
        if (!std::isfinite(v)) throw DiagnosticError("classifier training diverged in epoch " + std::to_string(epoch));
        if (v < best) {
            best = v;
            best_w = c.w_;
            best_b = c.b_;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    if (n_val > 0) {
        c.w_ = std::move(best_w);
        c.b_ = std::move(best_b);
    }
    return c;
}

Eigen::VectorXd Classifier::predict(const Eigen::MatrixXd& features) const {
    if (w_.empty()) throw ValidationError("classifier: not trained");
    if (features.rows() != mean_.size()) throw ValidationError("classifier: feature dimension mismatch");
    Eigen::MatrixXd a = (features.colwise() - mean_).array().colwise() / scale_.array();
    for (std::size_t l = 0; l < w_.size(); ++l) {
        Eigen::MatrixXd z = w_[l] * a;
        z.colwise() += b_[l];
        a = l + 1 < w_.size() ? relu(z) : z;
    }
    return (1.0 / (1.0 + (-a.row(0).array()).exp())).transpose();
}

// ---------------------------------------------------------------------------
// L-C2ST

namespace {

double statistic(const Eigen::VectorXd& d) { return (d.array() - 0.5).abs().mean(); }

Eigen::VectorXd cdf_at(const Eigen::VectorXd& d, const Eigen::VectorXd& grid) {
    std::vector<double> s(d.data(), d.data() + d.size());
    std::sort(s.begin(), s.end());
    Eigen::VectorXd out(grid.size());
    for (Eigen::Index g = 0; g < grid.size(); ++g) {
        // Fraction strictly below the abscissa; the last point is 1 by definition.
        out[g] = g + 1 == grid.size() ? 1.0
                                      : static_cast<double>(std::lower_bound(s.begin(), s.end(), grid[g]) - s.begin()) /
                                            static_cast<double>(s.size());
    }
    return out;
}

Eigen::MatrixXd broadcast_cols(const Eigen::MatrixXd& m, Eigen::Index n) {
    return m.cols() == 1 ? Eigen::MatrixXd(m.replicate(1, n)) : m;
}

} // namespace

std::vector<CalibrationReport> lc2st(const Eigen::MatrixXd& cal_theta, const Eigen::MatrixXd& cal_x,
                                     const std::vector<Eigen::VectorXd>& observations, const PosteriorSampler& sampler,
                                     const FeatureMap& features, const LC2STOptions& opts) {
    const Eigen::Index n = cal_theta.cols();
    if (cal_x.cols() != n) throw ValidationError("lc2st: calibration theta and x counts differ");
    if (n < 200) throw ValidationError("lc2st: need at least 200 calibration pairs, got " + std::to_string(n));
    if (opts.n_null < 100) throw ValidationError("lc2st: need at least 100 null replicates");
    if (!(opts.level > 0 && opts.level < 1) || opts.grid_points < 2 || opts.n_eval < 1)
        throw ValidationError("lc2st: invalid level, grid or evaluation size");

    Eigen::MatrixXd tilde(cal_theta.rows(), n);
    for (Eigen::Index i = 0; i < n; ++i)
        tilde.col(i) = sampler(cal_x.col(i), 1, mix_seed(opts.seed, 10 + static_cast<std::uint64_t>(i))).col(0);
    const Eigen::MatrixXd f0 = features(cal_theta, cal_x), f1 = features(tilde, cal_x);
    Eigen::MatrixXd train(f0.rows(), 2 * n);
    train << f0, f1;
    Eigen::VectorXd labels(2 * n);
    labels << Eigen::VectorXd::Zero(n), Eigen::VectorXd::Ones(n);

    const Classifier main = Classifier::fit(train, labels, opts.classifier, mix_seed(opts.seed, 1));
    std::vector<Classifier> null(opts.n_null);
    parallel_for(opts.n_null, opts.workers, [&](std::size_t k) {
        Eigen::VectorXd perm = labels;
        Rng rng(mix_seed(opts.seed, 1000 + k));
        std::shuffle(perm.data(), perm.data() + perm.size(), rng.engine());
        null[k] = Classifier::fit(train, perm, opts.classifier, mix_seed(opts.seed, 2000 + k));
    });

    const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(opts.grid_points, 0.0, 1.0);
    std::vector<CalibrationReport> out;
    for (std::size_t o = 0; o < observations.size(); ++o) {
        const Eigen::MatrixXd th = sampler(observations[o], opts.n_eval, mix_seed(opts.seed, 5000 + o));
        const Eigen::MatrixXd feat = features(th, broadcast_cols(observations[o], opts.n_eval));
        CalibrationReport r;
        r.grid = grid;
        const Eigen::VectorXd d = main.predict(feat);
        r.statistic = statistic(d);
        r.cdf = cdf_at(d, grid);
        Eigen::MatrixXd null_cdf(grid.size(), static_cast<Eigen::Index>(opts.n_null));
        r.null_statistics.resize(opts.n_null);
        for (std::size_t k = 0; k < opts.n_null; ++k) {
            const Eigen::VectorXd dk = null[k].predict(feat);
            r.null_statistics[k] = statistic(dk);
            null_cdf.col(static_cast<Eigen::Index>(k)) = cdf_at(dk, grid);
        }
        r.null_lower.resize(grid.size());
        r.null_upper.resize(grid.size());
        for (Eigen::Index g = 0; g < grid.size(); ++g) {
            std::vector<double> v(opts.n_null);
            for (Eigen::Index k = 0; k < null_cdf.cols(); ++k) v[static_cast<std::size_t>(k)] = null_cdf(g, k);
            r.null_lower[g] = empirical_quantile(v, (1 - opts.level) / 2);
            r.null_upper[g] = empirical_quantile(v, (1 + opts.level) / 2);
        }
        r.threshold = empirical_quantile(r.null_statistics, opts.level);
        r.pass = r.statistic <= r.threshold;
        out.push_back(std::move(r));
    }
    return out;
}

PosteriorSampler flow_sampler(const Flow& model) {
    return [&model](const Eigen::VectorXd& x, Eigen::Index n, std::uint64_t seed) { return model.sample(x, n, seed); };
}

FeatureMap flow_features(const Flow& model) {
    return [&model](const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x) {
        Eigen::VectorXd ld = Eigen::VectorXd::Zero(theta.cols());
        const Eigen::MatrixXd y = model.bijection().forward(theta, ld);
        const Eigen::MatrixXd ctx = broadcast_cols(model.context(x), theta.cols());
        Eigen::MatrixXd f(y.rows() + ctx.rows(), theta.cols());
        f << y, ctx;
        return f;
    };
}

PosteriorSampler shifted_sampler(PosteriorSampler base, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                                 double fraction) {
    return [base = std::move(base), lower, upper, fraction](const Eigen::VectorXd& x, Eigen::Index n,
                                                            std::uint64_t seed) {
        Eigen::MatrixXd t = base(x, n, seed);
        const Eigen::VectorXd width = upper - lower;
        for (Eigen::Index j = 0; j < t.cols(); ++j)
            for (Eigen::Index i = 0; i < t.rows(); ++i) {
                double u = (t(i, j) - lower[i]) / width[i] + fraction;
                u = std::fmod(u, 2.0);
                if (u < 0) u += 2.0;
                if (u > 1) u = 2.0 - u;
                u = std::clamp(u, 1e-12, 1 - 1e-12);
                t(i, j) = lower[i] + u * width[i];
            }
        return t;
    };
}

void write_calibration_csv(const std::filesystem::path& path, const std::vector<CalibrationReport>& reports) {
    Eigen::Index rows = 0;
    for (const auto& r : reports) rows += r.grid.size();
    Eigen::MatrixXd m(rows, 5);
    Eigen::Index k = 0;
    for (std::size_t o = 0; o < reports.size(); ++o)
        for (Eigen::Index g = 0; g < reports[o].grid.size(); ++g, ++k)
            m.row(k) << static_cast<double>(o), reports[o].grid[g], reports[o].cdf[g], reports[o].null_lower[g],
                reports[o].null_upper[g];
    write_csv(path, {"observation", "probability", "cdf", "null_lo", "null_hi"}, m);
}

} // namespace roomsbi
