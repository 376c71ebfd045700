// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices, the handful of kernels the model needs, and a
// seeded SplitMix64 random source.
//
// Every reduction runs in a fixed left-to-right order so that results are
// reproducible run to run. Build with -ffp-contract=off to keep it that way
// across compilers.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include "qexit/errors.hpp"

namespace qexit {

template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw StructuralError("Matrix: data length does not match rows*cols");
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() { return data_; }
    std::span<const T> flat() const { return data_; }
    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> xs) {
    return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
    return all_finite(m.flat());
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& m) {
    Matrix<T> t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

// out = a * b. Each output cell accumulates over k = 0..K-1 in order. Columns
// are processed in register tiles of kTile so the k loop runs innermost over a
// fixed set of accumulators; the order of additions per cell is unchanged.
inline constexpr std::size_t kTile = 16;

template <typename T>
void matmul_into(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
    if (a.cols() != b.rows()) throw StructuralError("matmul: inner dimensions differ");
    out = Matrix<T>(a.rows(), b.cols());
    const std::size_t n = b.cols();
    const std::size_t kk = a.cols();
    const T* bp = b.data().data();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T* ar = a.row(i).data();
        T* o = out.row(i).data();
        std::size_t j0 = 0;
        for (; j0 + kTile <= n; j0 += kTile) {
            T acc[kTile] = {};
            for (std::size_t k = 0; k < kk; ++k) {
                const T s = ar[k];
                const T* br = bp + k * n + j0;
                for (std::size_t j = 0; j < kTile; ++j) acc[j] += s * br[j];
            }
            for (std::size_t j = 0; j < kTile; ++j) o[j0 + j] = acc[j];
        }
        for (std::size_t k = 0; k < kk && j0 < n; ++k) {
            const T s = ar[k];
            const T* br = bp + k * n;
            for (std::size_t j = j0; j < n; ++j) o[j] += s * br[j];
        }
    }
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> out;
    matmul_into(a, b, out);
    return out;
}

// acc += a^T * b, with a [n x p] and b [n x q]; sums over n in order.
template <typename T>
void accumulate_at_b(Matrix<T>& acc, const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows() || acc.rows() != a.cols() || acc.cols() != b.cols()) {
        throw StructuralError("accumulate_at_b: shape mismatch");
    }
    const std::size_t q = b.cols();
    const std::size_t n = a.rows();
    const T* bp = b.data().data();
    for (std::size_t p = 0; p < a.cols(); ++p) {
        T* o = acc.row(p).data();
        std::size_t j0 = 0;
        for (; j0 + kTile <= q; j0 += kTile) {
            T t[kTile];
            for (std::size_t j = 0; j < kTile; ++j) t[j] = o[j0 + j];
            for (std::size_t i = 0; i < n; ++i) {
                const T s = a(i, p);
                const T* br = bp + i * q + j0;
                for (std::size_t j = 0; j < kTile; ++j) t[j] += s * br[j];
            }
            for (std::size_t j = 0; j < kTile; ++j) o[j0 + j] = t[j];
        }
        for (std::size_t i = 0; i < n && j0 < q; ++i) {
            const T s = a(i, p);
            const T* br = bp + i * q;
            for (std::size_t j = j0; j < q; ++j) o[j] += s * br[j];
        }
    }
}

template <typename T>
void add_scaled(Matrix<T>& acc, const Matrix<T>& x, T scale) {
    if (!acc.same_shape(x)) throw StructuralError("add_scaled: shape mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * x[i];
}

template <typename T>
using ProbVector = std::vector<T>;

template <typename T>
bool is_prob_vector(std::span<const T> p, double tol = 1e-6) {
    if (p.empty()) return false;
    double sum = 0.0;
    for (T v : p) {
        if (!(v >= T(0) && v <= T(1))) return false;
        sum += static_cast<double>(v);
    }
    return std::abs(sum - 1.0) <= tol;
}

// Max-subtracted softmax.
template <typename T>
ProbVector<T> softmax(std::span<const T> logits) {
    if (logits.empty()) throw StructuralError("softmax: empty input");
    const T mx = *std::max_element(logits.begin(), logits.end());
    ProbVector<T> p(logits.size());
    T sum = T(0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (T& v : p) v /= sum;
    return p;
}

template <typename T>
ProbVector<T> softmax(const std::vector<T>& logits) {
    return softmax(std::span<const T>(logits));
}

enum class Activation { relu, gelu };

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename T>
T gelu(T x) {
    const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
    const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
    const T t = std::tanh(u);
    const T du = T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
T relu(T x) {
    return x > T(0) ? x : T(0);
}

template <typename T>
std::vector<T> activation(std::span<const T> x, Activation kind) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = kind == Activation::relu ? relu(x[i]) : gelu(x[i]);
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormStats {
    T mean;
    T rstd;
};

// y = gain * (x - mean) / sqrt(var + eps) + bias, population variance.
template <typename T>
LayerNormStats<T> layer_norm_into(std::span<const T> x, std::span<const T> gain,
                                  std::span<const T> bias, std::span<T> y) {
    const std::size_t d = x.size();
    if (d == 0 || gain.size() != d || bias.size() != d || y.size() != d) {
        throw StructuralError("layer_norm: dimension mismatch");
    }
    T mean = T(0);
    for (T v : x) mean += v;
    mean /= T(d);
    T var = T(0);
    for (T v : x) var += (v - mean) * (v - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (std::size_t i = 0; i < d; ++i) y[i] = gain[i] * ((x[i] - mean) * rstd) + bias[i];
    return {mean, rstd};
}

template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias) {
    std::vector<T> y(x.size());
    layer_norm_into<T>(x, gain, bias, y);
    return y;
}

/// SplitMix64 (Steele, Lea, Flood 2014). The state is a plain counter that
/// advances by the golden-ratio increment 0x9E3779B97F4A7C15; each output is
/// the finalizer
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   z ^ (z >> 31)
/// applied to the new counter value. Integer streams are identical on every
/// platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix(state_);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), by rejection to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw StructuralError("Rng::below: empty range");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Box-Muller; one draw per call (the sine branch is discarded).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[below(i)]);
        }
    }

    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

// Child seed for a named purpose: SplitMix finalizer over seed xor FNV-1a(purpose).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : purpose) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return Rng::mix(seed ^ h);
}

template <typename T>
Matrix<T> random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return m;
}

}  // namespace qexit
