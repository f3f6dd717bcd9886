#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kanlab/tensor.hpp"

namespace kanlab {

class Layer;
class ModelStack;

namespace flops {

// Per-operation FLOP weights used by both the closed-form cost models and the
// instrumented counter. add/mul/sub 1, div/exp 5, trig 10; boolean logic and
// reshapes are free. SiLU decomposes as exp + add + div + mul + neg = 13.
struct CostModel {
    static constexpr std::int64_t add = 1;
    static constexpr std::int64_t mul = 1;
    static constexpr std::int64_t sub = 1;
    static constexpr std::int64_t div = 5;
    static constexpr std::int64_t exp = 5;
    static constexpr std::int64_t trig = 10;
    static constexpr std::int64_t silu = 13;
    static constexpr std::int64_t boolean = 0;
    static constexpr std::int64_t reshape = 0;
};

std::int64_t sinekan_flops(std::int64_t b, std::int64_t d_in, std::int64_t d_out, std::int64_t g);
std::int64_t fourierkan_flops(std::int64_t b, std::int64_t d_in, std::int64_t d_out, std::int64_t g);
std::int64_t bsplinekan_flops(std::int64_t b, std::int64_t d_in, std::int64_t d_out, std::int64_t g,
                              std::int64_t s);
std::int64_t mlp_flops(std::int64_t b, std::int64_t d_in, std::int64_t d_out);

// Thread-local elementary-op counter. Kernels charge into it while a
// CountScope is alive; otherwise charging is a no-op.
struct Counter {
    std::int64_t flops = 0;
    bool active = false;
};
Counter& counter();

inline void charge(std::int64_t n) {
    Counter& c = counter();
    if (c.active) c.flops += n;
}

class CountScope {
public:
    CountScope() {
        Counter& c = counter();
        prev_active_ = c.active;
        prev_flops_ = c.flops;
        c.active = true;
        c.flops = 0;
    }
    ~CountScope() {
        Counter& c = counter();
        c.active = prev_active_;
        c.flops = prev_flops_;
    }
    std::int64_t flops() const { return counter().flops; }

private:
    bool prev_active_;
    std::int64_t prev_flops_;
};

// Runs a real forward pass of `layer` on `x` with the counter enabled and
// returns the charged total.
std::int64_t instrumented_forward_flops(const Layer& layer, const Tensor& x);

// Forward-only wall-clock micro-benchmark. Strictly single-threaded.
struct BenchConfig {
    int warmup_passes = 10;   // >= 10
    int timed_passes = 1000;  // >= 100
};

struct BenchResult {
    std::string kind;
    int batch = 0, d_in = 0, d_out = 0, grid = 0, order = 0, depth = 0;
    double mean_s = 0.0, min_s = 0.0, std_s = 0.0;
    std::int64_t flops_modeled = 0;
};

BenchResult bench_forward(const ModelStack& model, int batch, const BenchConfig& cfg,
                          std::uint64_t input_seed);

std::string bench_csv_header();
std::string bench_csv_row(const BenchResult& r);

}  // namespace flops
}  // namespace kanlab
