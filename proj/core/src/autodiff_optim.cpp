#include "colabel/autodiff/optim.hpp"

#include <cmath>

namespace colabel::ad {

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->size(), T(0));
            state.v[i].assign(params[i]->size(), T(0));
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adam_step: parameter count changed");

    ++state.step;
    const double b1 = state.options.beta1, b2 = state.options.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.size()) throw DimensionError("adam_step: moment shape does not match parameter");
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto x = p.data();
        for (std::size_t k = 0; k < x.size(); ++k) {
            m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * g[k]);
            v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * static_cast<double>(g[k]) * g[k]);
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            x[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + state.options.eps));
        }
    }
}

double StepDecay::operator()(int epoch) const {
    if (epoch < 0) throw UsageError("lr schedule: negative epoch");
    if (step_epochs <= 0) return base_lr;
    return base_lr * std::pow(factor, epoch / step_epochs);
}

double lr_schedule(int epoch) { return StepDecay{}(epoch); }

template <typename T>
void he_uniform(Tensor<T>& weight, Rng& rng) {
    if (weight.rank() != 4) throw DimensionError("he_uniform: expected [O, C, kh, kw] weight");
    const double fan_in = static_cast<double>(weight.dim(1)) * weight.dim(2) * weight.dim(3);
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : weight.data()) w = static_cast<T>(dist(rng));
}

template void adam_step(std::span<Tensor<float>* const>, AdamState<float>&, double);
template void adam_step(std::span<Tensor<double>* const>, AdamState<double>&, double);
template void he_uniform(Tensor<float>&, Rng&);
template void he_uniform(Tensor<double>&, Rng&);

} // namespace colabel::ad
