#include "flowlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "flowlab/rng.hpp"

namespace flowlab {

namespace {

void check_finite(const Eigen::MatrixXd& data, const char* who) {
    if (!data.allFinite()) throw std::runtime_error(std::string(who) + ": non-finite input");
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
        const double lo = *std::max_element(v.begin(), v.begin() + mid);
        m = 0.5 * (m + lo);
    }
    return m;
}

}  // namespace

Spectrum pca_spectrum(const Eigen::MatrixXd& data, int k) {
    const auto n = data.rows();
    const auto d = data.cols();
    if (n < 2) throw std::runtime_error("pca_spectrum: need at least 2 samples");
    if (k < 1 || k > std::min(n, d)) throw std::runtime_error("pca_spectrum: k out of range");
    check_finite(data, "pca_spectrum");

    const Eigen::RowVectorXd mean = data.colwise().mean();
    const Eigen::MatrixXd centered = data.rowwise() - mean;

    Eigen::VectorXd evals;
    if (d <= n) {
        const Eigen::MatrixXd cov = (centered.transpose() * centered) / double(n - 1);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
        evals = es.eigenvalues();
    } else {
        // Gram trick: X X^T / (N-1) shares the nonzero spectrum of the covariance.
        const Eigen::MatrixXd gram = (centered * centered.transpose()) / double(n - 1);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
        evals = es.eigenvalues();
    }

    Spectrum s;
    s.eigenvalues.resize(k);
    for (int i = 0; i < k; ++i) s.eigenvalues[i] = std::max(0.0, evals(evals.size() - 1 - i));
    s.total_variance = std::accumulate(s.eigenvalues.begin(), s.eigenvalues.end(), 0.0);
    s.normalized.resize(k, 0.0);
    if (s.total_variance > 0)
        for (int i = 0; i < k; ++i) s.normalized[i] = s.eigenvalues[i] / s.total_variance;
    return s;
}

double effective_rank(const Spectrum& spec) {
    if (spec.total_variance <= 0.0) throw std::runtime_error("effective_rank: all-zero spectrum");
    double entropy = 0.0;
    for (double p : spec.normalized)
        if (p > 0.0) entropy -= p * std::log(p);
    return std::exp(entropy);
}

TwoNNResult twonn(const Eigen::MatrixXd& data, int subsample, int bootstraps, uint64_t seed) {
    const auto n = static_cast<int>(data.rows());
    if (subsample < 3) throw std::runtime_error("twonn: subsample must be >= 3");
    if (bootstraps < 1) throw std::runtime_error("twonn: bootstraps must be >= 1");
    check_finite(data, "twonn");

    const Eigen::VectorXd sq_norms_all = data.rowwise().squaredNorm();

    TwoNNResult res;
    Rng rng(seed);
    for (int b = 0; b < bootstraps; ++b) {
        // subsample without replacement (whole set if it is small enough)
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        const int m = std::min(subsample, n);
        for (int i = 0; i < m; ++i) {
            const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - i)));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(m);

        Eigen::MatrixXd pts(m, data.cols());
        Eigen::VectorXd sq(m);
        for (int i = 0; i < m; ++i) {
            pts.row(i) = data.row(idx[i]);
            sq(i) = sq_norms_all(idx[i]);
        }

        // chunked exact pairwise squared distances: |a|^2 + |b|^2 - 2 a.b
        std::vector<double> r1(m, std::numeric_limits<double>::infinity());
        std::vector<double> r2(m, std::numeric_limits<double>::infinity());
        const int chunk = 512;
        for (int i0 = 0; i0 < m; i0 += chunk) {
            const int ic = std::min(chunk, m - i0);
            const Eigen::MatrixXd dots = pts.middleRows(i0, ic) * pts.transpose();
            for (int i = 0; i < ic; ++i) {
                const int gi = i0 + i;
                for (int j = 0; j < m; ++j) {
                    if (j == gi) continue;
                    const double d2 = std::max(0.0, sq(gi) + sq(j) - 2.0 * dots(i, j));
                    if (d2 < r1[gi]) {
                        r2[gi] = r1[gi];
                        r1[gi] = d2;
                    } else if (d2 < r2[gi]) {
                        r2[gi] = d2;
                    }
                }
            }
        }

        double log_mu_sum = 0.0;
        int valid = 0;
        for (int i = 0; i < m; ++i) {
            if (r1[i] <= 0.0) {
                ++res.dropped_duplicates;  // coincident points carry no ratio information
                continue;
            }
            const double mu = std::sqrt(r2[i] / r1[i]);
            if (mu > 1.0) {
                log_mu_sum += std::log(mu);
                ++valid;
            }
        }
        if (valid < 3) throw std::runtime_error("twonn: fewer than 3 distinct points in subsample");
        if (log_mu_sum <= 0.0) throw std::runtime_error("twonn: all neighbor ratios <= 1");
        res.per_bootstrap.push_back(double(valid) / log_mu_sum);
    }

    const int nb = static_cast<int>(res.per_bootstrap.size());
    res.mean = std::accumulate(res.per_bootstrap.begin(), res.per_bootstrap.end(), 0.0) / nb;
    double ss = 0.0;
    for (double v : res.per_bootstrap) ss += (v - res.mean) * (v - res.mean);
    res.std = nb > 1 ? std::sqrt(ss / (nb - 1)) : 0.0;
    return res;
}

std::vector<double> excess_kurtosis(const Eigen::MatrixXd& data, int* constant_dims) {
    const auto n = data.rows();
    const auto d = data.cols();
    if (n < 4) throw std::runtime_error("excess_kurtosis: need at least 4 samples");
    check_finite(data, "excess_kurtosis");

    std::vector<double> kappa(d, 0.0);
    int constants = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
        const double mu = data.col(j).mean();
        const Eigen::ArrayXd c = data.col(j).array() - mu;
        const double m2 = c.square().mean();
        if (m2 <= 0.0) {
            ++constants;
            continue;
        }
        const double m4 = c.square().square().mean();
        kappa[j] = m4 / (m2 * m2) - 3.0;
    }
    if (constant_dims) *constant_dims = constants;
    return kappa;
}

KurtosisSummary summarize_kurtosis(const std::vector<double>& kappa, int constant_dims) {
    KurtosisSummary s;
    s.constant_dims = constant_dims;
    if (kappa.empty()) return s;
    std::vector<double> abs_k(kappa.size());
    int below_half = 0, below_one = 0;
    for (size_t j = 0; j < kappa.size(); ++j) {
        abs_k[j] = std::abs(kappa[j]);
        if (abs_k[j] < 0.5) ++below_half;
        if (abs_k[j] < 1.0) ++below_one;
    }
    s.mean_abs = std::accumulate(abs_k.begin(), abs_k.end(), 0.0) / abs_k.size();
    s.median_abs = median_of(abs_k);
    s.frac_below_half = double(below_half) / abs_k.size();
    s.frac_below_one = double(below_one) / abs_k.size();
    return s;
}

std::vector<std::pair<double, double>> conditioning_curve(const Spectrum& spec, const std::vector<double>& t_points) {
    if (spec.eigenvalues.empty()) throw std::runtime_error("conditioning_curve: empty spectrum");
    const double lam_max = spec.eigenvalues.front();
    const double lam_min_raw = spec.eigenvalues.back();
    const double lam_min = std::max(lam_min_raw, 1e-12);

    std::vector<std::pair<double, double>> curve;
    curve.reserve(t_points.size());
    for (double t : t_points) {
        if (t < 0.0 || t > 1.0) throw std::runtime_error("conditioning_curve: t outside [0,1]");
        double kappa;
        if (t == 1.0 && lam_min_raw <= 0.0) {
            kappa = std::numeric_limits<double>::infinity();
        } else {
            const double a = (1.0 - t) * (1.0 - t);
            kappa = (a + t * t * lam_max) / (a + t * t * lam_min);
        }
        curve.emplace_back(t, kappa);
    }
    return curve;
}

std::vector<std::pair<double, double>> interpolation_score(
    const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& pairs, int steps, const ManifoldOracle& oracle,
    double tolerance) {
    if (steps < 2) throw std::runtime_error("interpolation_score: steps must be >= 2");
    if (pairs.empty()) throw std::runtime_error("interpolation_score: no pairs");
    for (const auto& [za, zb] : pairs) {
        if (oracle(za) > tolerance || oracle(zb) > tolerance)
            throw std::runtime_error("interpolation_score: endpoint off-manifold beyond tolerance");
    }

    std::vector<std::pair<double, double>> curve(steps);
    for (int s = 0; s < steps; ++s) {
        const double t = double(s) / double(steps - 1);
        double acc = 0.0;
        for (const auto& [za, zb] : pairs) {
            const Eigen::VectorXd zt = (1.0 - t) * za + t * zb;
            const double dist = oracle(zt);
            acc += dist * dist;
        }
        curve[s] = {t, acc / double(pairs.size())};
    }
    return curve;
}

GeometryReport geometry_report(const Eigen::MatrixXd& data, const GeometryConfig& config, uint64_t seed) {
    config.validate();
    const auto n = data.rows();
    const auto d = data.cols();
    if (n < 4) throw std::runtime_error("geometry_report: need at least 4 samples");
    check_finite(data, "geometry_report");

    GeometryReport r;
    r.sample_count = n;

    int k = config.pca_components;
    if (k == 0) k = static_cast<int>(std::min<Eigen::Index>({n, d, 512}));
    k = static_cast<int>(std::min<Eigen::Index>({static_cast<Eigen::Index>(k), n, d}));
    r.spectrum_components = k;

    const Spectrum spec = pca_spectrum(data, k);
    r.effective_rank = effective_rank(spec);  // throws on constant data

    const TwoNNResult id = twonn(data, config.twonn_subsample, config.twonn_bootstraps, substream_seed(seed, "twonn"));
    r.intrinsic_dim_mean = id.mean;
    r.intrinsic_dim_std = id.std;
    r.twonn_dropped_duplicates = id.dropped_duplicates;

    int constant_dims = 0;
    const auto kappa = excess_kurtosis(data, &constant_dims);
    r.kurtosis = summarize_kurtosis(kappa, constant_dims);

    std::vector<double> t_points(config.curve_points);
    for (int i = 0; i < config.curve_points; ++i) t_points[i] = 0.01 * i;
    r.conditioning_curve = conditioning_curve(spec, t_points);
    return r;
}

std::string report_to_json(const GeometryReport& r) {
    nlohmann::json j;
    j["effective_rank"] = r.effective_rank;
    j["intrinsic_dim_mean"] = r.intrinsic_dim_mean;
    j["intrinsic_dim_std"] = r.intrinsic_dim_std;
    j["kurtosis"] = {{"mean_abs", r.kurtosis.mean_abs},
                     {"median_abs", r.kurtosis.median_abs},
                     {"frac_below_half", r.kurtosis.frac_below_half},
                     {"frac_below_one", r.kurtosis.frac_below_one},
                     {"constant_dims", r.kurtosis.constant_dims},
                     {"estimator", r.kurtosis_estimator}};
    j["sample_count"] = r.sample_count;
    j["spectrum_components"] = r.spectrum_components;
    j["twonn_dropped_duplicates"] = r.twonn_dropped_duplicates;
    if (!r.interpolation_curve.empty()) j["interpolation_mse"] = r.interpolation_mse;
    double kappa_09 = 0.0;
    for (const auto& [t, kap] : r.conditioning_curve)
        if (std::abs(t - 0.9) < 1e-12) kappa_09 = kap;
    j["kappa_at_0p9"] = kappa_09;
    return j.dump();
}

}  // namespace flowlab
