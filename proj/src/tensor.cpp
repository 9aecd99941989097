#include "snls/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "snls/rng.hpp"

namespace snls {

VideoTensor::VideoTensor(int t_, int h_, int w_, int f_, double fill, ElemWidth width_)
    : t(t_), h(h_), w(w_), f(f_), width(width_) {
    if (t < 1 || h < 1 || w < 1 || f < 1)
        throw DomainError("VideoTensor: all extents must be at least 1");
    data.assign(std::size_t(t) * h * w * f, fill);
}

void VideoTensor::require_finite(const std::string& context) const {
    for (double v : data)
        if (!std::isfinite(v)) throw DomainError(context + ": tensor holds a non-finite value");
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

BilinearTaps bilinear_taps(int h, int w, double y, double x) {
    BilinearTaps taps;
    const double fy = std::floor(y);
    const double fx = std::floor(x);
    const int y0 = int(fy);
    const int x0 = int(fx);
    taps.fy = y - fy;
    taps.fx = x - fx;
    taps.y0 = reflect_index(y0, h);
    taps.y1 = reflect_index(y0 + 1, h);
    taps.x0 = reflect_index(x0, w);
    taps.x1 = reflect_index(x0 + 1, w);
    taps.w00 = (1.0 - taps.fy) * (1.0 - taps.fx);
    taps.w01 = (1.0 - taps.fy) * taps.fx;
    taps.w10 = taps.fy * (1.0 - taps.fx);
    taps.w11 = taps.fy * taps.fx;
    return taps;
}

double bilinear_sample(const VideoTensor& v, int ti, double y, double x, int ci) {
    if (ti < 0 || ti >= v.t) throw DomainError("bilinear_sample: frame index out of range");
    if (!std::isfinite(y) || !std::isfinite(x))
        throw DomainError("bilinear_sample: non-finite coordinate");
    const BilinearTaps taps = bilinear_taps(v.h, v.w, y, x);
    return taps.w00 * v.at(ti, taps.y0, taps.x0, ci) + taps.w01 * v.at(ti, taps.y0, taps.x1, ci) +
           taps.w10 * v.at(ti, taps.y1, taps.x0, ci) + taps.w11 * v.at(ti, taps.y1, taps.x1, ci);
}

PatchVector extract_patch(const VideoTensor& v, int ti, int yi, int xi, int ps) {
    if (ps < 1 || ps % 2 == 0) throw ConfigError("extract_patch: patch size must be odd");
    if (ti < 0 || ti >= v.t) throw DomainError("extract_patch: frame index out of range");
    PatchVector p;
    p.t = ti;
    p.y = yi;
    p.x = xi;
    p.ps = ps;
    p.values.reserve(std::size_t(ps) * ps * v.f);
    const int half = ps / 2;
    for (int dy = -half; dy <= half; ++dy) {
        const int ry = reflect_index(yi + dy, v.h);
        for (int dx = -half; dx <= half; ++dx) {
            const int rx = reflect_index(xi + dx, v.w);
            for (int c = 0; c < v.f; ++c) p.values.push_back(v.at(ti, ry, rx, c));
        }
    }
    return p;
}

double psnr(const VideoTensor& a, const VideoTensor& b, double peak) {
    if (!a.same_shape(b)) throw DomainError("psnr: shape mismatch");
    if (!(peak > 0.0)) throw ConfigError("psnr: peak must be positive");
    double sq = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sq += d * d;
    }
    const double mse = sq / double(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

VideoTensor add_gaussian_noise(const VideoTensor& v, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ConfigError("add_gaussian_noise: sigma must be non-negative");
    VideoTensor out = v;
    if (sigma == 0.0) return out;
    GaussianStream rng(seed);
    for (double& x : out.data) x += sigma * rng.next();
    return out;
}

VideoTensor frame_slice(const VideoTensor& v, int ti) {
    if (ti < 0 || ti >= v.t) throw DomainError("frame_slice: frame index out of range");
    VideoTensor out(1, v.h, v.w, v.f, 0.0, v.width);
    const std::size_t n = std::size_t(v.h) * v.w * v.f;
    std::copy(v.data.begin() + std::size_t(ti) * n, v.data.begin() + std::size_t(ti + 1) * n,
              out.data.begin());
    return out;
}

} // namespace snls
