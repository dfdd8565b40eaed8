#pragma once
// Dense row-major tensor over double. GEMM is delegated to Eigen; everything
// else is plain loops. Single-threaded by contract: reductions run in a fixed
// order, so forwards are bit-reproducible.

#include "evseq/common.hpp"

#include <Eigen/Dense>

#include <initializer_list>
#include <numeric>
#include <vector>

namespace evseq {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct Tensor {
    std::vector<int64_t> shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(numel_of(shape)))
            throw InvariantError("tensor: shape/data size mismatch");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    real& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    real at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    EMap mat() { return EMap(data.data(), rows(), cols()); }
    ECMap mat() const { return ECMap(data.data(), rows(), cols()); }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

inline Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = rng.normal(0.0, stddev);
    return t;
}

// out = a * b
inline void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    out.mat().noalias() = a.mat() * b.mat();
}

// out = a * b^T
inline void matmul_nt(const Tensor& a, const Tensor& b, Tensor& out) {
    out.mat().noalias() = a.mat() * b.mat().transpose();
}

// out = a^T * b
inline void matmul_tn(const Tensor& a, const Tensor& b, Tensor& out) {
    out.mat().noalias() = a.mat().transpose() * b.mat();
}

// Static sine/cosine table, one row per position (classic interleaved layout).
inline Tensor sinusoid_table(int64_t n_pos, int64_t dim) {
    Tensor t({n_pos, dim});
    for (int64_t p = 0; p < n_pos; ++p) {
        for (int64_t j = 0; j < dim; j += 2) {
            double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(dim));
            t.at(p, j) = std::sin(p * freq);
            if (j + 1 < dim) t.at(p, j + 1) = std::cos(p * freq);
        }
    }
    return t;
}

} // namespace evseq
