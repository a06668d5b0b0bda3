#include <random>

#include <benchmark/benchmark.h>

#include "colabel/metrics.hpp"
#include "colabel/random.hpp"
#include "colabel/registration.hpp"
#include "colabel/training.hpp"

using namespace colabel;

namespace {

ad::Tensor<float> random_tensor(ad::Shape shape, std::uint64_t seed) {
    ad::Tensor<float> t(std::move(shape));
    Rng rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

Image2D random_image(int size, std::uint64_t seed) {
    Image2D img(size, size);
    Rng rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (auto& v : img.values()) v = u(rng);
    return img;
}

MaskGrid ball(int depth, int size, double cx, double radius) {
    MaskGrid m(depth, size, size);
    for (int n = 0; n < depth; ++n)
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
                const double dy = r - size / 2.0, dx = c - cx, dz = 3.0 * (n - depth / 2.0);
                m(n, r, c) = dx * dx + dy * dy + dz * dz <= radius * radius;
            }
    return m;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0)), channels = static_cast<int>(state.range(1));
    auto x = random_tensor({4, channels, size, size}, 1);
    auto w = random_tensor({channels, channels, 3, 3}, 2);
    auto b = random_tensor({channels}, 3);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    for (auto _ : state) {
        w.zero_grad();
        b.zero_grad();
        ad::Graph<float> g;
        const auto y = g.conv2d(g.constant(x), g.parameter(w), g.parameter(b), 1, 1);
        g.backward(g.mean(g.mul(y, y)));
        benchmark::DoNotOptimize(w.grad().data());
    }
    state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({64, 8})->Args({128, 16})->Unit(benchmark::kMillisecond);

void BM_SegmentationStep(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    UNetConfig cfg;
    cfg.depth = 3;
    cfg.base_channels = 8;
    SegmentationNet net(cfg, 1);
    ad::AdamState<float> adam;
    std::vector<Image2D> images;
    std::vector<Mask2D> masks;
    for (int i = 0; i < 4; ++i) {
        images.push_back(random_image(size, 10 + i));
        Mask2D m(size, size);
        for (int r = size / 4; r < 3 * size / 4; ++r)
            for (int c = size / 4; c < 3 * size / 4; ++c) m(r, c) = 1;
        masks.push_back(m);
    }
    for (auto _ : state) benchmark::DoNotOptimize(supervised_step(net, adam, images, masks, {}, 1e-3));
}
BENCHMARK(BM_SegmentationStep)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_WarpBilinear(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const auto img = random_image(size, 4);
    DeformationField f(size, size);
    f.drow = random_image(size, 5);
    f.dcol = random_image(size, 6);
    for (auto _ : state) benchmark::DoNotOptimize(warp_bilinear(img, f));
    state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_WarpBilinear)->Arg(128)->Arg(256);

void BM_Assd(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const auto p = ball(9, size, size / 2.0, size / 4.0), r = ball(9, size, size / 2.0 + 3.0, size / 4.0);
    for (auto _ : state) benchmark::DoNotOptimize(assd(p, r, {0.6, 0.6, 3.6}));
}
BENCHMARK(BM_Assd)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
