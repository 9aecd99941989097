#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "snls/errors.hpp"

namespace snls {

// Storage width used when a tensor is written back to disk. Computation is
// carried out in 64-bit throughout; a 32-bit tag only narrows the file
// encoding (every 32-bit value round-trips exactly through a double).
enum class ElemWidth : std::uint8_t { kF32 = 4, kF64 = 8 };

// Dense T x H x W x F video, row-major with the feature axis fastest.
struct VideoTensor {
    int t = 0, h = 0, w = 0, f = 0;
    ElemWidth width = ElemWidth::kF64;
    std::vector<double> data;

    VideoTensor() = default;
    VideoTensor(int t_, int h_, int w_, int f_, double fill = 0.0,
                ElemWidth width_ = ElemWidth::kF64);

    std::size_t size() const { return data.size(); }

    std::size_t index(int ti, int yi, int xi, int ci) const {
        return ((std::size_t(ti) * h + yi) * w + xi) * f + ci;
    }
    double at(int ti, int yi, int xi, int ci) const { return data[index(ti, yi, xi, ci)]; }
    double& at(int ti, int yi, int xi, int ci) { return data[index(ti, yi, xi, ci)]; }

    bool same_shape(const VideoTensor& o) const {
        return t == o.t && h == o.h && w == o.w && f == o.f;
    }

    // Throws DomainError naming `context` if any element is NaN or infinite.
    void require_finite(const std::string& context) const;
};

// Spatial reflection about the frame edge: -1 -> 1, n -> n-2. Handles any
// magnitude; a single-pixel extent always maps to 0. Temporal indexing never
// reflects; frames outside the clip are the caller's concern.
int reflect_index(int i, int n);

// The four source pixels and blend weights for one fractional (y, x)
// position. Source coordinates are already reflected into range; weights are
// computed from the raw position, so d(sample)/dy and d(sample)/dx follow
// from the pixel values alone.
struct BilinearTaps {
    int y0, y1, x0, x1;
    double w00, w01, w10, w11;
    double fy, fx;
};

BilinearTaps bilinear_taps(int h, int w, double y, double x);

// Blend of the 4 neighbors of (y, x) in frame ti, channel ci. Reproduces the
// stored pixel exactly when y and x are integral and in range.
double bilinear_sample(const VideoTensor& v, int ti, double y, double x, int ci);

// P x P x F patch centered at an integer coordinate, boundary-reflected.
// Values ordered (dy, dx, channel) with channel fastest.
struct PatchVector {
    std::vector<double> values;
    int t = 0, y = 0, x = 0;
    int ps = 1;
};

PatchVector extract_patch(const VideoTensor& v, int ti, int yi, int xi, int ps);

// 10*log10(peak^2 / MSE) in dB; +infinity when the inputs are identical.
double psnr(const VideoTensor& a, const VideoTensor& b, double peak);

// Adds i.i.d. zero-mean gaussian noise of standard deviation `sigma` to every
// element. Deterministic for a fixed seed (see rng.hpp).
VideoTensor add_gaussian_noise(const VideoTensor& v, double sigma, std::uint64_t seed);

// Copy of frame ti as a 1-frame tensor.
VideoTensor frame_slice(const VideoTensor& v, int ti);

} // namespace snls
