#pragma once

#include <string>
#include <vector>

#include "snls/tensor.hpp"

namespace snls {

enum class FlowDirection { kForward, kBackward };

// Per-pixel displacement field, T x H x W x 2 with components (dy, dx) in
// pixels. The direction tag records whether the entry at frame t points
// toward t+1 or t-1. Component order is (dy, dx) everywhere inside the
// library; the .flo format stores (dx, dy) and is converted at the file
// boundary only.
struct FlowField {
    int t = 0, h = 0, w = 0;
    FlowDirection direction = FlowDirection::kForward;
    std::vector<double> data;

    FlowField() = default;
    FlowField(int t_, int h_, int w_, FlowDirection dir = FlowDirection::kForward,
              double fill = 0.0);

    std::size_t index(int ti, int yi, int xi, int comp) const {
        return ((std::size_t(ti) * h + yi) * w + xi) * 2 + comp;
    }
    double at(int ti, int yi, int xi, int comp) const { return data[index(ti, yi, xi, comp)]; }
    double& at(int ti, int yi, int xi, int comp) { return data[index(ti, yi, xi, comp)]; }

    bool matches_video(int vt, int vh, int vw) const { return t == vt && h == vh && w == vw; }

    void require_finite(const std::string& context) const;
};

// Middlebury .flo, single frame. Reading converts the file's (u, v) = (dx, dy)
// order to internal (dy, dx); writing converts back. Bit-exact round trip for
// fields whose values are 32-bit floats.
FlowField read_flo(const std::string& path);
void write_flo(const FlowField& flow, const std::string& path);

// Exhaustive integer block matching between two single-frame tensors of equal
// shape. For each block on a `block`-strided grid the displacement in
// [-radius, radius]^2 minimizing the sum of squared differences is chosen
// (ties: smallest dy, then dx, by scan order), then replicated to each pixel
// of the block.
FlowField estimate_flow_block_matching(const VideoTensor& frame_a, const VideoTensor& frame_b,
                                       int block, int radius);

// Chained composition of single-step fields (each with t == 1):
// total(p) = f1(p) + f2(p + f1(p)) + ..., later fields sampled bilinearly at
// the displaced position.
FlowField compose_flow(const std::vector<FlowField>& flows);

// Mean of |component| over all pixels and both components.
double mean_abs_flow(const FlowField& flow);

// Bilinear read of one flow component at a fractional position.
double flow_bilinear(const FlowField& flow, int ti, double y, double x, int comp);

FlowField frame_slice(const FlowField& flow, int ti);

} // namespace snls
