#pragma once

#include <cstdint>
#include <vector>

#include "snls/search.hpp"
#include "snls/tensor.hpp"

namespace snls {

// Row-stochastic weights over the selected neighbors of each query.
struct WeightTensor {
    std::int64_t rows = 0;
    int l = 0;
    std::vector<double> values;

    double at(std::int64_t r, int li) const { return values[std::size_t(r) * l + li]; }
    double& at(std::int64_t r, int li) { return values[std::size_t(r) * l + li]; }
};

// Numerically stable row softmax of beta * values (max subtracted per row).
WeightTensor softmax_rows(const SimilarityTensor& selected, double beta);

// Contribution counts per output pixel, saved by the forward pass for the
// backward pass. One count per (t, y, x); the L neighbors of a query count as
// a single softmax-weighted unit.
struct AggTape {
    SearchConfig cfg;
    QueryGrid grid;
    int t = 0, h = 0, w = 0, f = 0;
    std::vector<std::int32_t> counts;

    std::size_t pixel(int ti, int yi, int xi) const {
        return (std::size_t(ti) * h + yi) * w + xi;
    }
};

struct WpsumResult {
    VideoTensor video;
    AggTape tape;
};

// Weighted sum of non-local patches. Every query scatters its patch footprint
// (out-of-frame patch pixels are dropped; reads reflect, writes do not) and,
// when its patch does not already cover its own stride cell, one
// nearest-patch-pixel write per remaining cell pixel, so the hole-free
// condition (ps-1)/2 < stride0 guarantees a count of at least one everywhere.
// Each output pixel is finally divided by its contribution count.
//
// Deterministic mode evaluates the equivalent gather per output pixel in a
// fixed order and is bitwise-stable across thread counts; the scatter mode
// uses atomic accumulation and may differ by floating-point association.
WpsumResult wpsum(const VideoTensor& v, const WeightTensor& weights, const OffsetTensor& offsets,
                  const SearchConfig& cfg, const ExecPolicy& policy = {});

// L x T x H x W x F stack: slice li is the pre-normalization accumulator of
// wpsum restricted to neighbor li (weights applied at scatter time). Summing
// the stack over L reproduces wpsum's accumulator before count division.
struct StackedTensor {
    int l = 0, t = 0, h = 0, w = 0, f = 0;
    std::vector<double> data;

    std::size_t index(int li, int ti, int yi, int xi, int ci) const {
        return (((std::size_t(li) * t + ti) * h + yi) * w + xi) * f + ci;
    }
    double at(int li, int ti, int yi, int xi, int ci) const {
        return data[index(li, ti, yi, xi, ci)];
    }
};

StackedTensor gather_stack(const VideoTensor& v, const WeightTensor& weights,
                           const OffsetTensor& offsets, const SearchConfig& cfg,
                           const ExecPolicy& policy = {});

struct AggGradients {
    VideoTensor grad_v;
    WeightTensor grad_weights;
};

// Exact VJP of wpsum through the count normalization, the scatter and the
// bilinear reads. grad_v accumulates through the 4 taps of each sampled
// pixel; grad_weights through the sampled patch values.
AggGradients wpsum_backward(const VideoTensor& grad_out, const AggTape& tape,
                            const VideoTensor& v, const WeightTensor& weights,
                            const OffsetTensor& offsets, const ExecPolicy& policy = {});

namespace detail {

// Index of the query-grid point owning a pixel coordinate (nearest grid
// multiple, ties toward the smaller index, clamped to the grid).
inline int owning_grid_index(int coord, int stride, int n) {
    int gi = (coord + (stride - 1) / 2) / stride;
    if (gi > n - 1) gi = n - 1;
    return gi;
}

} // namespace detail

} // namespace snls
