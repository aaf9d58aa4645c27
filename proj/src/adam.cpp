#include "pandagpt/adam.hpp"

#include <cmath>

namespace pgpt {

int64_t param_count(const ParamMap& params) {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double step_lr) {
    if (step_lr < 0.0) throw ShapeError("adam_step: negative learning rate");
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw ShapeError("adam_step: gradient for unknown parameter " + name);
        if (!it->second.same_shape(g)) {
            throw ShapeError("adam_step: shape mismatch for " + name + ", param " +
                             it->second.shape_str() + " vs grad " + g.shape_str());
        }
    }

    state.t += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));

    static const Tensor kEmpty;
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        const Tensor& g = (git != grads.end()) ? git->second : kEmpty;
        Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = g.data.empty() ? 0.0 : static_cast<double>(g.data[i]);
            const double mi = b1 * static_cast<double>(m.data[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v.data[i]) + (1.0 - b2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.data[i] = static_cast<float>(static_cast<double>(p.data[i]) -
                                           step_lr * mhat / (std::sqrt(vhat) + state.eps));
        }
        ensure_finite(p, "adam_step");
    }
}

}  // namespace pgpt
