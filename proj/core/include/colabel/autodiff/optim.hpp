#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "colabel/autodiff/tensor.hpp"
#include "colabel/random.hpp"

namespace colabel::ad {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    AdamOptions options;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m; // first moments, one per parameter
    std::vector<std::vector<T>> v; // second moments
};

// One bias-corrected ADAM update from the gradients stored in each parameter.
// Parameters without a gradient buffer are treated as having zero gradient.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr);

// Step decay: base_lr * factor^floor(epoch / step_epochs).
struct StepDecay {
    double base_lr = 1e-4;
    int step_epochs = 30;
    double factor = 0.5;

    double operator()(int epoch) const;
};

// The default schedule: 1e-4 halved every 30 epochs.
double lr_schedule(int epoch);

// He-uniform initialisation of a [O, C, kh, kw] convolution weight.
template <typename T>
void he_uniform(Tensor<T>& weight, Rng& rng);

} // namespace colabel::ad
