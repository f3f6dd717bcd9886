#pragma once

#include <span>
#include <vector>

#include "kanlab/errors.hpp"

namespace kanlab {

// Constants of the grid scale factor R(g) = A*g^-K + C.
struct ScaleConstants {
    double A = 0.97241;
    double K = 0.988440;
    double C = 0.999450;
};

// R(g) = A*g^-K + C.
double scale_ratio(int g, const ScaleConstants& c = {});

// Cumulative recursion factor S(g) = prod_{m=1}^{g-1} R(m), S(1) = 1.
double cumulative_scale(int g, const ScaleConstants& c = {});

// Fixed grid phases k/(g+1), k = 1..g. Strictly inside (0, 1).
std::vector<double> grid_phases(int g);

// Per-input-feature phases j*pi/d_in, j = 0..d_in-1.
std::vector<double> input_phases(int d_in);

// f(g, x) = sum_k sin(x + k/(g+1)), divided by S(g) when apply_scaling.
double sum_of_sines(int g, double x, const ScaleConstants& c, bool apply_scaling);

// Fixed (non-learnable) phase data for one layer: phi[j][k] = input[j] + grid[k].
struct PhaseGrid {
    int grid_size = 0;
    std::vector<double> grid;    // length g
    std::vector<double> input;   // length d_in
    ScaleConstants constants;

    static PhaseGrid make(int d_in, int g, const ScaleConstants& c = {});
    double phase(int j, int k) const { return input[j] + grid[k]; }
};

// Masked statistics of the ratio f(g+1,x)/f(g,x) over a g-range and x-samples.
// Ratios where |f(g,x)| < mask_threshold are excluded.
struct RatioStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t count = 0;
};
RatioStats ratio_stats(int g_lo, int g_hi, std::span<const double> xs, const ScaleConstants& c,
                       bool apply_scaling, double mask_threshold = 0.1);

// Least-squares objective: sum over g of var(ratio) + (1 - mean(ratio))^2.
double scale_fit_objective(int g_lo, int g_hi, std::span<const double> xs,
                           const ScaleConstants& c, double mask_threshold = 0.1);

struct ScaleFitResult {
    ScaleConstants constants;
    double objective = 0.0;
    bool converged = false;
    int iterations = 0;
};

// Derivative-free (Nelder-Mead) minimization of scale_fit_objective, started
// from (1,1,1) with bounds A in (0,2), K in (0,2), C in (0.9,1.1). Converged
// when the best objective improves by less than 1e-10.
ScaleFitResult fit_scale_constants(int g_lo, int g_hi, std::span<const double> xs);

// Evenly spaced x-samples over [lo, hi], endpoints included.
std::vector<double> linspace(double lo, double hi, int n);

}  // namespace kanlab
