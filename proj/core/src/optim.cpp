#include "semfed/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace semfed {

void adam_step(Matrix& param, const Matrix& grad, AdamState& state, const AdamConfig& cfg) {
    if (!param.same_shape(grad) || !param.same_shape(state.m) || !param.same_shape(state.v))
        throw std::invalid_argument("adam_step: shape mismatch");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0 ||
        cfg.eps <= 0.0)
        throw std::invalid_argument("adam_step: bad hyperparameters");

    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    double* p = param.data();
    const double* g = grad.data();
    double* m = state.m.data();
    double* v = state.v.data();
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

}  // namespace semfed
