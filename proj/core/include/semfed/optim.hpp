#pragma once

#include <cstdint>

#include "semfed/matrix.hpp"

namespace semfed {

struct AdamState {
    Matrix m;
    Matrix v;
    std::uint64_t t = 0;

    static AdamState for_param(const Matrix& p) {
        return AdamState{Matrix(p.rows(), p.cols()), Matrix(p.rows(), p.cols()), 0};
    }
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam step, in place. Deterministic: same
// (param, grad, state, config) always produces the same bits.
void adam_step(Matrix& param, const Matrix& grad, AdamState& state, const AdamConfig& cfg);

}  // namespace semfed
