#include "flowlab/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace flowlab {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

void TimeGrid::validate() const {
    if (knots.size() < 2) throw std::runtime_error("TimeGrid: need at least 2 knots");
    if (knots.front() < 0.0) throw std::runtime_error("TimeGrid: t_0 must be >= 0");
    for (size_t i = 1; i < knots.size(); ++i)
        if (!(knots[i] > knots[i - 1])) throw std::runtime_error("TimeGrid: knots must be strictly increasing");
}

TimeGrid make_grid(const std::string& kind, int K, const SamplerConfig& params) {
    if (K < 1) throw std::runtime_error("make_grid: K must be >= 1");
    TimeGrid grid;
    grid.kind = kind;
    grid.knots.resize(K + 1);
    if (kind == "uniform") {
        for (int i = 0; i <= K; ++i) grid.knots[i] = double(i) / K;
    } else if (kind == "cosine") {
        for (int i = 0; i <= K; ++i) grid.knots[i] = 0.5 * (1.0 - std::cos(M_PI * double(i) / K));
    } else if (kind == "power2") {
        for (int i = 0; i <= K; ++i) {
            const double u = double(i) / K;
            grid.knots[i] = u * u;
        }
    } else if (kind == "logsnr") {
        const double eps = params.logsnr_eps;
        const double lo = logit(eps), hi = logit(1.0 - eps);
        for (int i = 0; i <= K; ++i) grid.knots[i] = sigmoid(lo + (double(i) / K) * (hi - lo));
    } else if (kind == "edm") {
        if (!(params.edm_sigma_min > 0 && params.edm_sigma_min < params.edm_sigma_max && params.edm_rho > 0))
            throw std::runtime_error("make_grid: invalid EDM parameters");
        const double inv_rho = 1.0 / params.edm_rho;
        const double smax = std::pow(params.edm_sigma_max, inv_rho);
        const double smin = std::pow(params.edm_sigma_min, inv_rho);
        for (int i = 0; i <= K; ++i) {
            const double sigma = std::pow(smax + (double(i) / K) * (smin - smax), params.edm_rho);
            grid.knots[i] = 1.0 / (1.0 + sigma);
        }
    } else if (kind == "timeshift") {
        // Table entries are descending in u; sorted ascending so every solver
        // consumes a noise-to-data grid with the same knot set.
        for (int i = 0; i <= K; ++i) {
            const double u = double(i) / K;
            grid.knots[K - i] = 1.0 - time_shift(u, params.shift_s);
        }
    } else {
        throw std::runtime_error("make_grid: unknown schedule " + kind);
    }
    for (auto& t : grid.knots) t = std::clamp(t, 0.0, params.t_max);
    grid.knots.erase(std::unique(grid.knots.begin(), grid.knots.end()), grid.knots.end());  // clamp can merge knots
    grid.validate();
    return grid;
}

DenoiserField::DenoiserField(const Denoiser* net, const std::vector<float>* params, std::string mode, double eps_t,
                             GuidanceConfig guidance)
    : net_(net), params_(params ? params : &net->params), mode_(std::move(mode)), eps_t_(eps_t),
      guidance_(guidance) {
    if (mode_ != "x" && mode_ != "v") throw std::runtime_error("DenoiserField: mode must be x|v");
    if (params_->size() != net_->params.size()) throw std::runtime_error("DenoiserField: weight size mismatch");
}

int DenoiserField::channels() const { return net_->config().channels; }
int DenoiserField::grid_h() const { return net_->config().grid_h; }
int DenoiserField::grid_w() const { return net_->config().grid_w; }

void DenoiserField::eval_branch(int B, const float* z, const float* z_cls, double t, const int32_t* labels, float* v,
                                float* v_cls) {
    // the field may carry EMA weights: run the net with them swapped in
    Denoiser& net = const_cast<Denoiser&>(*net_);
    std::vector<float> saved;
    const bool swap = params_ != &net_->params;
    if (swap) {
        saved = std::move(net.params);
        net.params = *params_;
    }
    DenoiserCache cache;
    std::vector<double> ts(B, t);
    net.forward(B, z, z_cls, ts.data(), labels, cache);
    if (swap) net.params = std::move(saved);

    const int C = net_->config().channels;
    const size_t pd = size_t(C) * net_->config().grid_h * net_->config().grid_w;
    if (mode_ == "x") {
        for (int i = 0; i < B; ++i) {
            xpred_to_velocity(cache.y_patch.data() + size_t(i) * pd, z + size_t(i) * pd, t, eps_t_,
                              v + size_t(i) * pd, pd);
            xpred_to_velocity(cache.y_cls.data() + size_t(i) * C, z_cls + size_t(i) * C, t, eps_t_,
                              v_cls + size_t(i) * C, C);
        }
    } else {
        std::copy(cache.y_patch.begin(), cache.y_patch.end(), v);
        std::copy(cache.y_cls.begin(), cache.y_cls.end(), v_cls);
    }
}

void DenoiserField::eval(int B, const float* z, const float* z_cls, double t, const int32_t* labels, float* v,
                         float* v_cls) {
    const bool gated = guidance_.enabled && t >= guidance_.lo && t <= guidance_.hi;
    const bool active = gated && !(guidance_.w == 1.0 && guidance_.w_cls == 1.0);
    if (!active) {
        eval_branch(B, z, z_cls, t, labels, v, v_cls);
        return;
    }
    const int C = net_->config().channels;
    const size_t pd = size_t(C) * net_->config().grid_h * net_->config().grid_w;
    std::vector<float> vu(size_t(B) * pd), vu_cls(size_t(B) * C);
    std::vector<int32_t> null_labels(B, net_->config().num_classes);
    eval_branch(B, z, z_cls, t, labels, v, v_cls);
    eval_branch(B, z, z_cls, t, null_labels.data(), vu.data(), vu_cls.data());
    const float w = float(guidance_.w), wc = float(guidance_.w_cls);
    for (size_t j = 0; j < size_t(B) * pd; ++j) v[j] = vu[j] + w * (v[j] - vu[j]);
    for (size_t j = 0; j < size_t(B) * C; ++j) v_cls[j] = vu_cls[j] + wc * (v_cls[j] - vu_cls[j]);
}

FeatureBatch integrate(VelocityField& field, const TimeGrid& grid, const std::vector<int32_t>& labels,
                       uint64_t noise_seed, const std::string& solver, const std::string& cls_init, double sigma_eps,
                       const StandardizationStats* stats) {
    grid.validate();
    if (solver != "euler" && solver != "heun") throw std::runtime_error("integrate: solver must be euler|heun");
    if (cls_init != "independent" && cls_init != "coupled")
        throw std::runtime_error("integrate: cls_init must be independent|coupled");
    const int B = static_cast<int>(labels.size());
    if (B < 1) throw std::runtime_error("integrate: empty label set");
    const int C = field.channels(), H = field.grid_h(), W = field.grid_w();
    const int HW = H * W;
    const size_t pd = size_t(C) * HW;

    // state is accumulated in double; the field is evaluated in f32
    std::vector<double> z(size_t(B) * pd), z_cls(size_t(B) * C);

    // patch noise comes from its own stream, so the coupled / independent
    // choice changes only the CLS initialization
    Rng rng_patch(substream_seed(noise_seed, "patch"));
    for (auto& v : z) v = sigma_eps * rng_patch.normal();
    if (cls_init == "independent") {
        Rng rng_cls(substream_seed(noise_seed, "cls"));
        for (auto& v : z_cls) v = sigma_eps * rng_cls.normal();
    } else {
        for (int i = 0; i < B; ++i)
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int k = 0; k < HW; ++k) acc += z[(size_t(i) * C + c) * HW + k];
                z_cls[size_t(i) * C + c] = acc / HW;
            }
    }

    const int K = static_cast<int>(grid.knots.size()) - 1;
    std::vector<float> zf(size_t(B) * pd), zf_cls(size_t(B) * C);
    std::vector<float> v(size_t(B) * pd), v_cls(size_t(B) * C);
    std::vector<float> v2(size_t(B) * pd), v2_cls(size_t(B) * C);
    auto eval_at = [&](const std::vector<double>& zs, const std::vector<double>& zs_cls, double t, float* out,
                       float* out_cls) {
        for (size_t j = 0; j < zs.size(); ++j) zf[j] = float(zs[j]);
        for (size_t j = 0; j < zs_cls.size(); ++j) zf_cls[j] = float(zs_cls[j]);
        field.eval(B, zf.data(), zf_cls.data(), t, labels.data(), out, out_cls);
    };
    std::vector<double> z_mid(z.size()), z_mid_cls(z_cls.size());
    for (int i = 0; i < K; ++i) {
        const double t0 = grid.knots[i], t1 = grid.knots[i + 1];
        const double dt = t1 - t0;
        eval_at(z, z_cls, t0, v.data(), v_cls.data());
        if (solver == "euler") {
            for (size_t j = 0; j < z.size(); ++j) z[j] += dt * v[j];
            for (size_t j = 0; j < z_cls.size(); ++j) z_cls[j] += dt * v_cls[j];
        } else {
            for (size_t j = 0; j < z.size(); ++j) z_mid[j] = z[j] + dt * v[j];
            for (size_t j = 0; j < z_cls.size(); ++j) z_mid_cls[j] = z_cls[j] + dt * v_cls[j];
            eval_at(z_mid, z_mid_cls, t1, v2.data(), v2_cls.data());
            for (size_t j = 0; j < z.size(); ++j) z[j] += 0.5 * dt * (double(v[j]) + double(v2[j]));
            for (size_t j = 0; j < z_cls.size(); ++j) z_cls[j] += 0.5 * dt * (double(v_cls[j]) + double(v2_cls[j]));
        }
        for (double x : z)
            if (!std::isfinite(x))
                throw std::runtime_error("integrate: non-finite state after step " + std::to_string(i));
    }

    FeatureBatch state;
    state.resize(B, C, H, W);
    state.labels = labels;
    for (size_t j = 0; j < z.size(); ++j) state.patches[j] = float(z[j]);
    for (size_t j = 0; j < z_cls.size(); ++j) state.cls[j] = float(z_cls[j]);
    if (stats) return destandardize(state, *stats);
    return state;
}

std::vector<TruncationRow> truncation_study(VelocityField& field, const std::string& schedule,
                                            const SamplerConfig& params, const std::vector<int>& k_list, int k_ref,
                                            int n, uint64_t seed, int num_classes,
                                            const StandardizationStats* stats) {
    if (n < 1) throw std::runtime_error("truncation_study: n must be >= 1");
    Rng rng_labels(substream_seed(seed, "labels"));
    std::vector<int32_t> labels(n);
    for (auto& l : labels) l = static_cast<int32_t>(rng_labels.uniform_int(num_classes));
    const uint64_t noise_seed = substream_seed(seed, "noise");

    auto endpoint = [&](int k) {
        const TimeGrid grid = make_grid(schedule, k, params);
        return integrate(field, grid, labels, noise_seed, "heun", params.cls_init, params.sigma_eps, stats);
    };

    const FeatureBatch ref = endpoint(k_ref);
    std::vector<TruncationRow> rows;
    for (int k : k_list) {
        const FeatureBatch gen = endpoint(k);
        std::vector<double> dist(n);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (size_t j = 0; j < gen.patch_dim(); ++j) {
                const double d = double(gen.sample(i)[j]) - double(ref.sample(i)[j]);
                acc += d * d;
            }
            dist[i] = std::sqrt(acc);
        }
        TruncationRow row;
        row.k = k;
        row.mean = std::accumulate(dist.begin(), dist.end(), 0.0) / n;
        double ss = 0.0;
        for (double d : dist) ss += (d - row.mean) * (d - row.mean);
        row.std = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
        rows.push_back(row);
    }
    return rows;
}

namespace {

double median_pairwise_distance(const Eigen::MatrixXd& ref) {
    const int n = std::min<int>(1024, static_cast<int>(ref.rows()));
    std::vector<double> d;
    d.reserve(size_t(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) d.push_back((ref.row(i) - ref.row(j)).norm());
    if (d.empty()) throw std::runtime_error("mmd: reference too small for a bandwidth");
    std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
    return d[d.size() / 2];
}

Eigen::MatrixXd gaussian_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth) {
    const Eigen::VectorXd na = a.rowwise().squaredNorm();
    const Eigen::VectorXd nb = b.rowwise().squaredNorm();
    Eigen::MatrixXd k = -2.0 * (a * b.transpose());
    k.colwise() += na;
    k.rowwise() += nb.transpose();
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    return (-k.cwiseMax(0.0) * inv).array().exp();
}

double mmd_from_kernel(const Eigen::MatrixXd& kxx, const Eigen::MatrixXd& kyy, const Eigen::MatrixXd& kxy) {
    const auto m = kxx.rows();
    const auto n = kyy.rows();
    if (m < 2 || n < 2) throw std::runtime_error("mmd: need at least 2 samples per set");
    const double sxx = (kxx.sum() - kxx.trace()) / double(m * (m - 1));
    const double syy = (kyy.sum() - kyy.trace()) / double(n * (n - 1));
    const double sxy = kxy.sum() / double(m * n);
    return sxx + syy - 2.0 * sxy;
}

}  // namespace

double mmd_metric(const Eigen::MatrixXd& generated, const Eigen::MatrixXd& reference) {
    if (generated.rows() < 100 || reference.rows() < 100)
        throw std::runtime_error("mmd_metric: need at least 100 samples per set");
    if (generated.cols() != reference.cols()) throw std::runtime_error("mmd_metric: dimension mismatch");
    const double bw = median_pairwise_distance(reference);
    const Eigen::MatrixXd kxx = gaussian_kernel(generated, generated, bw);
    const Eigen::MatrixXd kyy = gaussian_kernel(reference, reference, bw);
    const Eigen::MatrixXd kxy = gaussian_kernel(generated, reference, bw);
    return mmd_from_kernel(kxx, kyy, kxy);
}

MmdTestResult mmd_permutation_test(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int n_permutations,
                                   uint64_t seed) {
    if (x.cols() != y.cols()) throw std::runtime_error("mmd_permutation_test: dimension mismatch");
    const int m = static_cast<int>(x.rows()), n = static_cast<int>(y.rows());
    Eigen::MatrixXd pooled(m + n, x.cols());
    pooled.topRows(m) = x;
    pooled.bottomRows(n) = y;
    const double bw = median_pairwise_distance(y);
    const Eigen::MatrixXd k = gaussian_kernel(pooled, pooled, bw);

    auto mmd_of = [&](const std::vector<int>& perm) {
        double sxx = 0.0, syy = 0.0, sxy = 0.0;
        for (int i = 0; i < m + n; ++i)
            for (int j = 0; j < m + n; ++j) {
                if (i == j) continue;
                const bool xi = perm[i] < m, xj = perm[j] < m;
                if (xi && xj)
                    sxx += k(i, j);
                else if (!xi && !xj)
                    syy += k(i, j);
                else if (xi && !xj)
                    sxy += k(i, j);
            }
        return sxx / double(m) / double(m - 1) + syy / double(n) / double(n - 1) - 2.0 * sxy / double(m) / double(n);
    };

    std::vector<int> ident(m + n);
    std::iota(ident.begin(), ident.end(), 0);
    MmdTestResult res;
    res.mmd = mmd_of(ident);

    Rng rng(seed);
    res.null_values.reserve(n_permutations);
    std::vector<int> perm = ident;
    for (int p = 0; p < n_permutations; ++p) {
        for (int i = m + n - 1; i > 0; --i) {
            const int j = static_cast<int>(rng.uniform_int(uint64_t(i) + 1));
            std::swap(perm[i], perm[j]);
        }
        res.null_values.push_back(mmd_of(perm));
    }
    std::vector<double> sorted = res.null_values;
    std::sort(sorted.begin(), sorted.end());
    const size_t q = static_cast<size_t>(std::floor(0.95 * (sorted.size() - 1)));
    res.null_q95 = sorted[q];
    return res;
}

double prototype_accuracy(const Eigen::MatrixXd& generated, const std::vector<int32_t>& labels,
                          const Eigen::MatrixXd& class_prototypes) {
    if (generated.rows() == 0) throw std::runtime_error("prototype_accuracy: empty sample set");
    if (generated.rows() != static_cast<Eigen::Index>(labels.size()))
        throw std::runtime_error("prototype_accuracy: label count mismatch");
    int correct = 0;
    for (Eigen::Index i = 0; i < generated.rows(); ++i) {
        Eigen::Index best = 0;
        (class_prototypes.rowwise() - generated.row(i)).rowwise().squaredNorm().minCoeff(&best);
        if (static_cast<int32_t>(best) == labels[i]) ++correct;
    }
    return double(correct) / double(generated.rows());
}

double loglog_slope(const std::vector<int>& k, const std::vector<double>& err) {
    if (k.size() != err.size() || k.size() < 2) throw std::runtime_error("loglog_slope: need >= 2 points");
    const int n = static_cast<int>(k.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < n; ++i) {
        const double x = std::log(double(k[i]));
        const double y = std::log(err[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace flowlab
