// Copyright (c) 2026, The qexit authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <cstddef>

#include "qexit/errors.hpp"
#include "qexit/numerics.hpp"
#include "qexit/quantizer.hpp"

namespace qexit {

/// Low-rank update B*A scaled by alpha/rank, added to a frozen base weight of
/// shape [d_out x d_in].
template <typename T>
struct LoraAdapter {
    Matrix<T> a;  // [rank x d_in]
    Matrix<T> b;  // [d_out x rank]
    std::size_t rank = 0;
    double alpha = 0.0;

    T scale() const { return static_cast<T>(alpha / static_cast<double>(rank)); }
    std::size_t d_out() const { return b.rows(); }
    std::size_t d_in() const { return a.cols(); }

    void check() const {
        if (rank == 0) throw StructuralError("LoraAdapter: rank must be >= 1");
        if (a.rows() != rank || b.cols() != rank) throw StructuralError("LoraAdapter: rank/shape mismatch");
    }

    bool operator==(const LoraAdapter&) const = default;
};

/// A ~ Normal(0, 0.02^2), B = 0: the initial update is exactly zero.
template <typename T>
LoraAdapter<T> init_lora(std::size_t d_out, std::size_t d_in, std::size_t rank, double alpha, Rng& rng) {
    if (rank == 0 || rank > std::min(d_out, d_in)) {
        throw StructuralError("init_lora: rank must be in [1, min(d_out, d_in)]");
    }
    LoraAdapter<T> ad;
    ad.a = random_normal<T>(rank, d_in, 0.02, rng);
    ad.b = Matrix<T>(d_out, rank);
    ad.rank = rank;
    ad.alpha = alpha;
    return ad;
}

/// W' = dequantize(base) + (alpha / r) * B * A
template <typename T>
Matrix<T> effective_weight(const Matrix<T>& base, const LoraAdapter<T>& adapter) {
    adapter.check();
    if (adapter.d_out() != base.rows() || adapter.d_in() != base.cols()) {
        throw StructuralError("effective_weight: adapter shape does not match base");
    }
    Matrix<T> w = base;
    add_scaled(w, matmul(adapter.b, adapter.a), adapter.scale());
    return w;
}

template <typename T>
Matrix<T> effective_weight(const QuantizedTensor& base, const LoraAdapter<T>& adapter) {
    return effective_weight(dequantize<T>(base), adapter);
}

// Fused dense export; numerically identical to effective_weight.
template <typename T>
Matrix<T> merge_lora(const QuantizedTensor& base, const LoraAdapter<T>& adapter) {
    return effective_weight(base, adapter);
}

}  // namespace qexit
