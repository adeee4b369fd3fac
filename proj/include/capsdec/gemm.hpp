#pragma once

#include <cstdint>
#include <vector>

#include "capsdec/parallel.hpp"

namespace capsdec {

// C[M x N] = (or +=) A[M x K] * B[K x N], row-major. Accumulation runs in
// double regardless of S. Per output element the k-loop order is fixed, so
// results do not depend on the worker count.
template <typename S>
void gemm_nn(int64_t M, int64_t N, int64_t K, const S* A, const S* B, S* C, bool accumulate = false) {
    constexpr int64_t IB = 8;    // A rows per register block
    constexpr int64_t NB = 512;  // C columns per tile

    const int64_t row_blocks = (M + IB - 1) / IB;
    parallel_for(0, row_blocks, [&](int64_t blk_lo, int64_t blk_hi) {
        std::vector<double> acc(IB * NB);
        for (int64_t blk = blk_lo; blk < blk_hi; ++blk) {
            const int64_t i0 = blk * IB;
            const int64_t ib = std::min(IB, M - i0);
            for (int64_t j0 = 0; j0 < N; j0 += NB) {
                const int64_t nb = std::min(NB, N - j0);
                for (int64_t r = 0; r < ib; ++r)
                    for (int64_t j = 0; j < nb; ++j) acc[r * NB + j] = 0.0;
                for (int64_t k = 0; k < K; ++k) {
                    const S* brow = B + k * N + j0;
                    for (int64_t r = 0; r < ib; ++r) {
                        const double a = static_cast<double>(A[(i0 + r) * K + k]);
                        double* arow = acc.data() + r * NB;
                        for (int64_t j = 0; j < nb; ++j) arow[j] += a * static_cast<double>(brow[j]);
                    }
                }
                for (int64_t r = 0; r < ib; ++r) {
                    S* crow = C + (i0 + r) * N + j0;
                    const double* arow = acc.data() + r * NB;
                    if (accumulate) {
                        for (int64_t j = 0; j < nb; ++j) crow[j] += static_cast<S>(arow[j]);
                    } else {
                        for (int64_t j = 0; j < nb; ++j) crow[j] = static_cast<S>(arow[j]);
                    }
                }
            }
        }
    });
}

// dst[C x R] = src[R x C] transposed, blocked for locality.
template <typename S>
void transpose(int64_t R, int64_t C, const S* src, S* dst) {
    constexpr int64_t BLK = 32;
    const int64_t row_blocks = (R + BLK - 1) / BLK;
    parallel_for(0, row_blocks, [&](int64_t blk_lo, int64_t blk_hi) {
        for (int64_t blk = blk_lo; blk < blk_hi; ++blk) {
            const int64_t r0 = blk * BLK;
            const int64_t r1 = std::min(r0 + BLK, R);
            for (int64_t c0 = 0; c0 < C; c0 += BLK) {
                const int64_t c1 = std::min(c0 + BLK, C);
                for (int64_t r = r0; r < r1; ++r)
                    for (int64_t c = c0; c < c1; ++c) dst[c * R + r] = src[r * C + c];
            }
        }
    });
}

}  // namespace capsdec
