// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
// Block-wise absmax quantization: 4-bit NormalFloat (NF4) and a symmetric
// uniform k-bit grid used as the baseline.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "qexit/errors.hpp"
#include "qexit/numerics.hpp"

namespace qexit {

using Nf4Codebook = std::array<float, 16>;

namespace detail {

// Inverse of the standard Normal CDF by bisection on erfc. Only used to build
// the 16-entry table once, so speed is irrelevant.
inline double normal_quantile(double p) {
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (0.5 * std::erfc(-mid / std::numbers::sqrt2) < p) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

inline Nf4Codebook build_nf4() {
    // The outermost probability sits halfway between the 1 - 1/(2*15) and
    // 1 - 1/(2*16) tail points so that the extreme quantile stays finite.
    constexpr double offset = 0.9677083;
    std::array<double, 16> v{};
    std::size_t n = 0;
    // Negative half: 7 points at evenly spaced probabilities offset..0.5 (8 steps, last dropped).
    for (int i = 0; i < 7; ++i) {
        const double p = offset + (0.5 - offset) * i / 7.0;
        v[n++] = -normal_quantile(p);
    }
    v[n++] = 0.0;
    // Positive half: 8 points over 9 evenly spaced probabilities, last dropped.
    for (int i = 0; i < 8; ++i) {
        const double p = offset + (0.5 - offset) * i / 8.0;
        v[n++] = normal_quantile(p);
    }
    std::sort(v.begin(), v.end());
    const double top = v[15];
    Nf4Codebook out{};
    for (std::size_t i = 0; i < 16; ++i) out[i] = static_cast<float>(v[i] / top);
    out[0] = -1.0f;
    out[15] = 1.0f;
    return out;
}

}  // namespace detail

/// The NF4 table: 7 negative and 8 positive standard-Normal quantiles plus an
/// exact zero, each side rescaled so its extreme lands on -1 / +1.
inline const Nf4Codebook& nf4_codebook() {
    static const Nf4Codebook table = detail::build_nf4();
    return table;
}

inline constexpr std::size_t kNf4ZeroIndex = 7;

enum class QuantScheme : std::uint8_t { nf4, uniform4, uniform8 };

inline unsigned scheme_bits(QuantScheme s) { return s == QuantScheme::uniform8 ? 8u : 4u; }

// Number of valid code values.
inline unsigned scheme_levels(QuantScheme s) {
    switch (s) {
        case QuantScheme::nf4: return 16;
        case QuantScheme::uniform4: return 15;
        case QuantScheme::uniform8: return 255;
    }
    return 0;
}

// Two codes per byte, element 2i in the low nibble.
inline std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
    std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > 0x0F) throw StructuralError("pack_nibbles: code does not fit in 4 bits");
        out[i / 2] |= static_cast<std::uint8_t>(codes[i] << ((i & 1) * 4));
    }
    return out;
}

inline std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> bytes, std::size_t count) {
    if (bytes.size() != (count + 1) / 2) throw DataError("unpack_nibbles: byte count mismatch");
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = (bytes[i / 2] >> ((i & 1) * 4)) & 0x0F;
    return out;
}

struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t block_size = 64;
    QuantScheme scheme = QuantScheme::nf4;
    std::vector<std::uint8_t> codes;  // packed nibbles for 4-bit schemes, one byte per code for 8-bit
    std::vector<float> scales;        // absmax per block

    std::size_t numel() const { return rows * cols; }
    std::size_t num_blocks() const { return (numel() + block_size - 1) / block_size; }

    std::uint8_t code(std::size_t i) const {
        if (scheme_bits(scheme) == 8) return codes[i];
        return (codes[i / 2] >> ((i & 1) * 4)) & 0x0F;
    }

    void set_code(std::size_t i, std::uint8_t c) {
        if (scheme_bits(scheme) == 8) {
            codes[i] = c;
            return;
        }
        const unsigned shift = (i & 1) * 4;
        codes[i / 2] = static_cast<std::uint8_t>((codes[i / 2] & ~(0x0F << shift)) | ((c & 0x0F) << shift));
    }

    std::size_t code_bytes() const {
        return scheme_bits(scheme) == 8 ? numel() : (numel() + 1) / 2;
    }

    // Structural and code-range checks; throws DataError.
    void validate() const {
        if (block_size == 0) throw DataError("QuantizedTensor: block_size is zero");
        if (scales.size() != num_blocks()) throw DataError("QuantizedTensor: scale count mismatch");
        if (codes.size() != code_bytes()) throw DataError("QuantizedTensor: code byte count mismatch");
        for (float s : scales) {
            if (!(s >= 0.0f) || !std::isfinite(s)) throw DataError("QuantizedTensor: invalid scale");
        }
        const unsigned levels = scheme_levels(scheme);
        for (std::size_t i = 0; i < numel(); ++i) {
            if (code(i) >= levels) throw DataError("QuantizedTensor: code index out of range");
        }
    }

    bool operator==(const QuantizedTensor&) const = default;
};

namespace detail {

// Nearest codebook entry; equidistant candidates resolve to the smaller index.
inline std::uint8_t nearest_nf4(double x) {
    const auto& cb = nf4_codebook();
    std::uint8_t best = 0;
    double best_d = std::abs(x - cb[0]);
    for (std::uint8_t k = 1; k < 16; ++k) {
        const double d = std::abs(x - cb[k]);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

inline int uniform_half_levels(QuantScheme s) { return s == QuantScheme::uniform8 ? 127 : 7; }

// Nearest level j in [-m, m] for t = x*m; halves go toward zero.
inline int nearest_uniform(double t, int m) {
    const double a = std::abs(t);
    int j = static_cast<int>(std::ceil(a - 0.5));
    j = std::min(j, m);
    return t < 0 ? -j : j;
}

inline float dequant_value(QuantScheme scheme, float scale, std::uint8_t code) {
    if (scheme == QuantScheme::nf4) return scale * nf4_codebook()[code];
    const int m = uniform_half_levels(scheme);
    return static_cast<float>(static_cast<double>(scale) * (static_cast<int>(code) - m) / m);
}

template <typename T>
QuantizedTensor quantize_impl(const Matrix<T>& w, std::size_t block_size, QuantScheme scheme) {
    if (block_size == 0) throw StructuralError("quantize: block_size must be >= 1");
    if (!all_finite(w)) throw DataError("quantize: non-finite input");
    QuantizedTensor q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.block_size = block_size;
    q.scheme = scheme;
    q.codes.assign(q.code_bytes(), 0);
    q.scales.assign(q.num_blocks(), 0.0f);
    const std::size_t n = q.numel();
    const int m = uniform_half_levels(scheme);
    const std::uint8_t zero_code =
        scheme == QuantScheme::nf4 ? static_cast<std::uint8_t>(kNf4ZeroIndex) : static_cast<std::uint8_t>(m);
    for (std::size_t b = 0; b < q.num_blocks(); ++b) {
        const std::size_t lo = b * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        double amax = 0.0;
        for (std::size_t i = lo; i < hi; ++i) amax = std::max(amax, std::abs(static_cast<double>(w[i])));
        const float c = static_cast<float>(amax);
        q.scales[b] = c;
        for (std::size_t i = lo; i < hi; ++i) {
            if (c == 0.0f) {
                q.set_code(i, zero_code);
                continue;
            }
            const double x = static_cast<double>(w[i]) / static_cast<double>(c);
            if (scheme == QuantScheme::nf4) {
                q.set_code(i, nearest_nf4(x));
            } else {
                q.set_code(i, static_cast<std::uint8_t>(nearest_uniform(x * m, m) + m));
            }
        }
    }
    return q;
}

}  // namespace detail

/// Absmax NF4 quantization over row-major blocks of `block_size` elements
/// (the final block may be short).
template <typename T>
QuantizedTensor quantize(const Matrix<T>& w, std::size_t block_size = 64,
                         QuantScheme scheme = QuantScheme::nf4) {
    return detail::quantize_impl(w, block_size, scheme);
}

/// Symmetric uniform grid with 2^bits - 1 levels over [-c, c].
template <typename T>
QuantizedTensor quantize_uniform(const Matrix<T>& w, unsigned bits, std::size_t block_size = 64) {
    if (bits != 4 && bits != 8) throw StructuralError("quantize_uniform: bits must be 4 or 8");
    return detail::quantize_impl(w, block_size, bits == 4 ? QuantScheme::uniform4 : QuantScheme::uniform8);
}

template <typename T = float>
Matrix<T> dequantize(const QuantizedTensor& q) {
    q.validate();
    Matrix<T> out(q.rows, q.cols);
    for (std::size_t i = 0; i < q.numel(); ++i) {
        out[i] = static_cast<T>(detail::dequant_value(q.scheme, q.scales[i / q.block_size], q.code(i)));
    }
    return out;
}

struct QuantError {
    double rel_frobenius = 0.0;
    double max_abs = 0.0;
};

template <typename T>
QuantError quant_error(const Matrix<T>& w, const QuantizedTensor& q) {
    if (w.rows() != q.rows || w.cols() != q.cols) throw StructuralError("quant_error: shape mismatch");
    const Matrix<double> dq = dequantize<double>(q);
    double num = 0.0, den = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = dq[i] - static_cast<double>(w[i]);
        num += d * d;
        den += static_cast<double>(w[i]) * static_cast<double>(w[i]);
        mx = std::max(mx, std::abs(d));
    }
    return {std::sqrt(num) / std::max(std::sqrt(den), 1e-12), mx};
}

}  // namespace qexit
