#pragma once
// Linear probing on frozen embeddings: standard scaling fitted on the train
// split only, then logistic (or one-vs-rest multilabel, or linear) regression
// trained with L-BFGS to gradient-norm convergence.

#include "evseq/common.hpp"
#include "evseq/metrics.hpp"
#include "evseq/tensor.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace evseq {

struct Standardizer {
    std::vector<double> mean, std;

    static Standardizer fit(const Tensor& x) {
        Standardizer s;
        int64_t n = x.rows(), d = x.cols();
        if (n == 0) throw InvariantError("standardizer: empty input");
        s.mean.assign(static_cast<size_t>(d), 0.0);
        s.std.assign(static_cast<size_t>(d), 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) s.mean[static_cast<size_t>(j)] += x.at(i, j);
        for (auto& m : s.mean) m /= static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                double v = x.at(i, j) - s.mean[static_cast<size_t>(j)];
                s.std[static_cast<size_t>(j)] += v * v;
            }
        for (auto& v : s.std) v = std::sqrt(v / static_cast<double>(n));
        for (auto& v : s.std)
            if (v < 1e-12) v = 1.0;  // constant feature: leave centred at zero
        return s;
    }

    Tensor apply(const Tensor& x) const {
        Tensor out = x;
        for (int64_t i = 0; i < x.rows(); ++i)
            for (int64_t j = 0; j < x.cols(); ++j)
                out.at(i, j) = (x.at(i, j) - mean[static_cast<size_t>(j)]) / std[static_cast<size_t>(j)];
        return out;
    }
};

// ---------------------------------------------------------------------------
// L-BFGS (two-loop recursion, backtracking Armijo line search)

struct LbfgsOptions {
    int max_iters = 500;
    double grad_tol = 1e-6;
    int history = 10;
    double armijo_c = 1e-4;
};

struct LbfgsResult {
    bool converged = false;
    int iters = 0;
    double final_loss = 0.0;
    double grad_norm = 0.0;
};

// minimises f(w); fg fills grad and returns loss
inline LbfgsResult lbfgs_minimize(std::vector<double>& w,
                                  const std::function<double(const std::vector<double>&,
                                                             std::vector<double>&)>& fg,
                                  const LbfgsOptions& opt = {}) {
    size_t n = w.size();
    std::vector<std::vector<double>> s_hist, y_hist;
    std::vector<double> rho_hist;
    std::vector<double> grad(n), new_grad(n);
    double loss = fg(w, grad);

    LbfgsResult res;
    for (int iter = 0; iter < opt.max_iters; ++iter) {
        double gnorm = 0.0;
        for (double g : grad) gnorm += g * g;
        gnorm = std::sqrt(gnorm);
        res.grad_norm = gnorm;
        res.iters = iter;
        res.final_loss = loss;
        if (gnorm < opt.grad_tol) {
            res.converged = true;
            return res;
        }

        // two-loop recursion
        std::vector<double> q = grad;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            double a = 0.0;
            for (size_t j = 0; j < n; ++j) a += s_hist[i][j] * q[j];
            a *= rho_hist[i];
            alpha[i] = a;
            for (size_t j = 0; j < n; ++j) q[j] -= a * y_hist[i][j];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) {
            double sy = 0.0, yy = 0.0;
            const auto& s = s_hist.back();
            const auto& y = y_hist.back();
            for (size_t j = 0; j < n; ++j) {
                sy += s[j] * y[j];
                yy += y[j] * y[j];
            }
            if (yy > 0) gamma = sy / yy;
        }
        for (auto& v : q) v *= gamma;
        for (size_t i = 0; i < s_hist.size(); ++i) {
            double beta = 0.0;
            for (size_t j = 0; j < n; ++j) beta += y_hist[i][j] * q[j];
            beta *= rho_hist[i];
            for (size_t j = 0; j < n; ++j) q[j] += s_hist[i][j] * (alpha[i] - beta);
        }
        // q is the ascent image; step along -q
        double dir_dot_grad = 0.0;
        for (size_t j = 0; j < n; ++j) dir_dot_grad += q[j] * grad[j];
        if (dir_dot_grad <= 0) {  // not a descent direction; reset to gradient
            q = grad;
            dir_dot_grad = 0.0;
            for (double g : grad) dir_dot_grad += g * g;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        double step = 1.0;
        std::vector<double> w_new(n);
        double new_loss = loss;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            for (size_t j = 0; j < n; ++j) w_new[j] = w[j] - step * q[j];
            new_loss = fg(w_new, new_grad);
            if (new_loss <= loss - opt.armijo_c * step * dir_dot_grad) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.final_loss = loss;
            return res;  // line search stalled; report non-converged state
        }

        std::vector<double> s_vec(n), y_vec(n);
        for (size_t j = 0; j < n; ++j) {
            s_vec[j] = w_new[j] - w[j];
            y_vec[j] = new_grad[j] - grad[j];
        }
        double sy = 0.0;
        for (size_t j = 0; j < n; ++j) sy += s_vec[j] * y_vec[j];
        if (sy > 1e-10) {
            s_hist.push_back(std::move(s_vec));
            y_hist.push_back(std::move(y_vec));
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opt.history) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }
        w = std::move(w_new);
        w_new.assign(n, 0.0);
        grad = new_grad;
        loss = new_loss;
    }
    res.final_loss = loss;
    return res;
}

// ---------------------------------------------------------------------------
// Probes

struct ProbeResult {
    std::vector<double> weights;  // d+1 per output (bias last)
    int n_outputs = 1;
    bool converged = false;
    int iters = 0;
};

// Binary logistic regression with L2 penalty; y in {0,1}.
inline ProbeResult fit_logistic(const Tensor& x, const std::vector<int>& y, double l2 = 1e-4,
                                const LbfgsOptions& opt = {}) {
    int64_t n = x.rows(), d = x.cols();
    if (n == 0 || static_cast<int64_t>(y.size()) != n)
        throw InvariantError("fit_logistic: bad shapes");
    int64_t pos = 0;
    for (int v : y) pos += v;
    if (pos == 0 || pos == n) throw InvariantError("fit_logistic: single-class labels");

    std::vector<double> w(static_cast<size_t>(d) + 1, 0.0);
    auto fg = [&](const std::vector<double>& wv, std::vector<double>& g) {
        g.assign(wv.size(), 0.0);
        double loss = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double z = wv[static_cast<size_t>(d)];
            for (int64_t j = 0; j < d; ++j) z += wv[static_cast<size_t>(j)] * x.at(i, j);
            double yi = y[static_cast<size_t>(i)];
            loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - yi * z;
            double sig = 1.0 / (1.0 + std::exp(-z));
            double dz = sig - yi;
            for (int64_t j = 0; j < d; ++j) g[static_cast<size_t>(j)] += dz * x.at(i, j);
            g[static_cast<size_t>(d)] += dz;
        }
        double inv_n = 1.0 / static_cast<double>(n);
        loss *= inv_n;
        for (auto& v : g) v *= inv_n;
        for (int64_t j = 0; j < d; ++j) {  // no penalty on the bias
            loss += 0.5 * l2 * wv[static_cast<size_t>(j)] * wv[static_cast<size_t>(j)];
            g[static_cast<size_t>(j)] += l2 * wv[static_cast<size_t>(j)];
        }
        return loss;
    };
    auto res = lbfgs_minimize(w, fg, opt);
    ProbeResult pr;
    pr.weights = std::move(w);
    pr.converged = res.converged;
    pr.iters = res.iters;
    return pr;
}

inline std::vector<double> logistic_scores(const ProbeResult& probe, const Tensor& x,
                                           int output = 0) {
    int64_t d = x.cols();
    size_t base = static_cast<size_t>(output) * (static_cast<size_t>(d) + 1);
    std::vector<double> out(static_cast<size_t>(x.rows()));
    for (int64_t i = 0; i < x.rows(); ++i) {
        double z = probe.weights[base + static_cast<size_t>(d)];
        for (int64_t j = 0; j < d; ++j) z += probe.weights[base + static_cast<size_t>(j)] * x.at(i, j);
        out[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-z));
    }
    return out;
}

// One-vs-rest multilabel probe; columns of y are independent binary problems.
// Columns that are single-class keep zero weights (scored at 0.5).
inline ProbeResult fit_multilabel(const Tensor& x, const std::vector<std::vector<int>>& y,
                                  double l2 = 1e-4, const LbfgsOptions& opt = {}) {
    if (y.empty()) throw InvariantError("fit_multilabel: empty labels");
    int64_t n = x.rows(), d = x.cols();
    int k = static_cast<int>(y[0].size());
    ProbeResult pr;
    pr.n_outputs = k;
    pr.weights.assign(static_cast<size_t>(k) * (static_cast<size_t>(d) + 1), 0.0);
    pr.converged = true;
    for (int c = 0; c < k; ++c) {
        std::vector<int> col(static_cast<size_t>(n));
        int64_t pos = 0;
        for (int64_t i = 0; i < n; ++i) {
            col[static_cast<size_t>(i)] = y[static_cast<size_t>(i)][static_cast<size_t>(c)];
            pos += col[static_cast<size_t>(i)];
        }
        if (pos == 0 || pos == n) continue;
        ProbeResult one = fit_logistic(x, col, l2, opt);
        std::copy(one.weights.begin(), one.weights.end(),
                  pr.weights.begin() + static_cast<int64_t>(c) * (d + 1));
        pr.converged = pr.converged && one.converged;
        pr.iters = std::max(pr.iters, one.iters);
    }
    return pr;
}

// Ridge-penalised linear regression via the same optimiser.
inline ProbeResult fit_linear(const Tensor& x, const std::vector<double>& y, double l2 = 1e-4,
                              const LbfgsOptions& opt = {}) {
    int64_t n = x.rows(), d = x.cols();
    if (n == 0 || static_cast<int64_t>(y.size()) != n)
        throw InvariantError("fit_linear: bad shapes");
    std::vector<double> w(static_cast<size_t>(d) + 1, 0.0);
    auto fg = [&](const std::vector<double>& wv, std::vector<double>& g) {
        g.assign(wv.size(), 0.0);
        double loss = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double z = wv[static_cast<size_t>(d)];
            for (int64_t j = 0; j < d; ++j) z += wv[static_cast<size_t>(j)] * x.at(i, j);
            double r = z - y[static_cast<size_t>(i)];
            loss += 0.5 * r * r;
            for (int64_t j = 0; j < d; ++j) g[static_cast<size_t>(j)] += r * x.at(i, j);
            g[static_cast<size_t>(d)] += r;
        }
        double inv_n = 1.0 / static_cast<double>(n);
        loss *= inv_n;
        for (auto& v : g) v *= inv_n;
        for (int64_t j = 0; j < d; ++j) {
            loss += 0.5 * l2 * wv[static_cast<size_t>(j)] * wv[static_cast<size_t>(j)];
            g[static_cast<size_t>(j)] += l2 * wv[static_cast<size_t>(j)];
        }
        return loss;
    };
    auto res = lbfgs_minimize(w, fg, opt);
    ProbeResult pr;
    pr.weights = std::move(w);
    pr.converged = res.converged;
    pr.iters = res.iters;
    return pr;
}

} // namespace evseq
