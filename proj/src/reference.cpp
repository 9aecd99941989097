#include "snls/reference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <vector>

#include "snls/memory.hpp"

namespace snls::reference {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

SearchResult shifted_nls_forward(const VideoTensor& q, const VideoTensor& k,
                                 const FlowField& fflow, const FlowField& bflow,
                                 const SearchConfig& cfg) {
    cfg.validate();
    if (!q.same_shape(k)) throw DomainError("search: query and key shapes differ");
    if (!fflow.matches_video(q.t, q.h, q.w) || !bflow.matches_video(q.t, q.h, q.w))
        throw DomainError("search: flow shape does not match the video");
    fflow.require_finite("search fflow");
    bflow.require_finite("search bflow");

    const QueryGrid grid = QueryGrid::over(q.t, q.h, q.w, cfg.stride0);
    const std::vector<int> dts = temporal_scan_order(cfg.wt);
    const int half_ws = cfg.ws / 2;
    const int n = cfg.window_slots();
    const std::int64_t rows = grid.rows();

    SearchResult res;
    res.sims.rows = rows;
    res.sims.cols = cfg.topl;
    res.sims.values.assign(std::size_t(rows) * cfg.topl, 0.0);
    res.offsets.rows = rows;
    res.offsets.l = cfg.topl;
    res.offsets.data.assign(std::size_t(rows) * cfg.topl * 3, 0.0);
    res.tape.cfg = cfg;
    res.tape.grid = grid;
    res.tape.vid_t = q.t;
    res.tape.vid_h = q.h;
    res.tape.vid_w = q.w;
    res.tape.vid_f = q.f;
    res.tape.centers.assign(std::size_t(rows) * cfg.topl * 3, 0.0);
    res.tape.chain_stride = cfg.wt > 1 ? cfg.wt - 1 : 0;
    res.tape.chains.assign(std::size_t(rows) * cfg.topl * res.tape.chain_stride * 6, 0.0);
    memory::TransientCharge outputs_charge((res.sims.values.size() + res.offsets.data.size() +
                                            res.tape.centers.size() + res.tape.chains.size()) *
                                           sizeof(double));

    // whole-row window grid, reused across rows
    memory::TrackedBuffer<double> vals(n);
    memory::TrackedBuffer<double> kys(n), kxs(n);
    memory::TrackedBuffer<int> kts(n);
    std::vector<int> idx(n);

    for (std::int64_t row = 0; row < rows; ++row) {
        int qt, qy, qx;
        grid.coords(row, qt, qy, qx);
        std::fill(vals.data(), vals.data() + n, kNegInf);
        for (std::size_t fpos = 0; fpos < dts.size(); ++fpos) {
            const int dt = dts[fpos];
            const int kt = qt + dt;
            if (kt < 0 || kt >= q.t) continue;
            double sdy, sdx;
            detail::accumulate_shift(fflow, bflow, qt, qy, qx, dt, sdy, sdx, nullptr);
            const double cy = double(qy) + sdy;
            const double cx = double(qx) + sdx;
            for (int dyi = 0; dyi < cfg.ws; ++dyi) {
                for (int dxi = 0; dxi < cfg.ws; ++dxi) {
                    const int slot = int(fpos) * cfg.ws * cfg.ws + dyi * cfg.ws + dxi;
                    const double ky = cy + cfg.stride1 * double(dyi - half_ws);
                    const double kx = cx + cfg.stride1 * double(dxi - half_ws);
                    vals[slot] = detail::patch_similarity(q, k, qt, qy, qx, kt, ky, kx, cfg.ps,
                                                          cfg.metric);
                    kys[slot] = ky;
                    kxs[slot] = kx;
                    kts[slot] = kt;
                }
            }
        }
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return vals[a] > vals[b]; });
        if (vals[idx[cfg.topl - 1]] == kNegInf)
            throw ConfigError("search: topl exceeds the valid window entries of some query");
        for (int li = 0; li < cfg.topl; ++li) {
            const int slot = idx[li];
            res.sims.at(row, li) = vals[slot];
            res.offsets.at(row, li, 0) = double(kts[slot] - qt);
            res.offsets.at(row, li, 1) = kys[slot] - double(qy);
            res.offsets.at(row, li, 2) = kxs[slot] - double(qx);
            const std::size_t cb = res.tape.center_base(row, li);
            res.tape.centers[cb + 0] = double(kts[slot]);
            res.tape.centers[cb + 1] = kys[slot];
            res.tape.centers[cb + 2] = kxs[slot];
            const int dt = kts[slot] - qt;
            if (res.tape.chain_stride > 0 && (dt > 1 || dt < -1)) {
                double sdy, sdx;
                detail::accumulate_shift(fflow, bflow, qt, qy, qx, dt, sdy, sdx,
                                         res.tape.chains.data() + res.tape.chain_base(row, li));
            }
        }
    }
    return res;
}

SearchResult nls_forward(const VideoTensor& q, const VideoTensor& k, const SearchConfig& cfg) {
    const FlowField zero_f(q.t, q.h, q.w, FlowDirection::kForward);
    const FlowField zero_b(q.t, q.h, q.w, FlowDirection::kBackward);
    return reference::shifted_nls_forward(q, k, zero_f, zero_b, cfg);
}

namespace {

inline int clamp_patch(int d, int half) { return d < -half ? -half : (d > half ? half : d); }

inline void cell_range(int gi, int stride, int n, int extent, int& lo, int& hi) {
    const int a = (stride - 1) / 2;
    lo = gi == 0 ? 0 : gi * stride - a;
    hi = gi == n - 1 ? extent - 1 : gi * stride + (stride - 1 - a);
}

// Plain scatter over queries, footprint first, cell completion second.
template <class Fn>
void scatter_writes(const QueryGrid& grid, int h, int w, int half, int stride, int qy, int qx,
                    Fn&& fn) {
    for (int py = -half; py <= half; ++py) {
        const int y = qy + py;
        if (y < 0 || y >= h) continue;
        for (int px = -half; px <= half; ++px) {
            const int x = qx + px;
            if (x < 0 || x >= w) continue;
            fn(y, x, py, px);
        }
    }
    int ylo, yhi, xlo, xhi;
    cell_range(qy / stride, stride, grid.nh, h, ylo, yhi);
    cell_range(qx / stride, stride, grid.nw, w, xlo, xhi);
    for (int y = ylo; y <= yhi; ++y)
        for (int x = xlo; x <= xhi; ++x) {
            if (std::abs(y - qy) <= half && std::abs(x - qx) <= half) continue;
            fn(y, x, clamp_patch(y - qy, half), clamp_patch(x - qx, half));
        }
}

} // namespace

WpsumResult wpsum(const VideoTensor& v, const WeightTensor& weights, const OffsetTensor& offsets,
                  const SearchConfig& cfg) {
    cfg.validate();
    if (!cfg.hole_free())
        throw ConfigError("aggregate: (ps-1)/2 < stride0 is required for hole-free output");
    const QueryGrid grid = QueryGrid::over(v.t, v.h, v.w, cfg.stride0);
    if (weights.rows != grid.rows() || offsets.rows != grid.rows() || weights.l != cfg.topl ||
        offsets.l != cfg.topl)
        throw DomainError("aggregate: weight/offset shape does not match the config");

    WpsumResult res;
    res.video = VideoTensor(v.t, v.h, v.w, v.f, 0.0, v.width);
    res.tape.cfg = cfg;
    res.tape.grid = grid;
    res.tape.t = v.t;
    res.tape.h = v.h;
    res.tape.w = v.w;
    res.tape.f = v.f;
    res.tape.counts.assign(std::size_t(v.t) * v.h * v.w, 0);

    const int half = cfg.ps / 2;
    for (std::int64_t row = 0; row < grid.rows(); ++row) {
        int ti, qy, qx;
        grid.coords(row, ti, qy, qx);
        scatter_writes(grid, v.h, v.w, half, cfg.stride0, qy, qx, [&](int y, int x, int pyu,
                                                                      int pxu) {
            for (int li = 0; li < cfg.topl; ++li) {
                const int kt = ti + int(std::llround(offsets.at(row, li, 0)));
                if (kt < 0 || kt >= v.t) throw DomainError("wpsum: offsets leave the clip");
                const double sy = double(qy) + offsets.at(row, li, 1) + double(pyu);
                const double sx = double(qx) + offsets.at(row, li, 2) + double(pxu);
                const double wv = weights.at(row, li);
                for (int c = 0; c < v.f; ++c)
                    res.video.at(ti, y, x, c) += wv * bilinear_sample(v, kt, sy, sx, c);
            }
            ++res.tape.counts[res.tape.pixel(ti, y, x)];
        });
    }
    for (int ti = 0; ti < v.t; ++ti)
        for (int y = 0; y < v.h; ++y)
            for (int x = 0; x < v.w; ++x) {
                const int cnt = res.tape.counts[res.tape.pixel(ti, y, x)];
                if (cnt == 0)
                    throw DomainError("wpsum: internal invariant failure, pixel with no writers");
                for (int c = 0; c < v.f; ++c) res.video.at(ti, y, x, c) /= double(cnt);
            }
    return res;
}

StackedTensor gather_stack(const VideoTensor& v, const WeightTensor& weights,
                           const OffsetTensor& offsets, const SearchConfig& cfg) {
    cfg.validate();
    if (!cfg.hole_free())
        throw ConfigError("aggregate: (ps-1)/2 < stride0 is required for hole-free output");
    const QueryGrid grid = QueryGrid::over(v.t, v.h, v.w, cfg.stride0);
    if (weights.rows != grid.rows() || offsets.rows != grid.rows() || weights.l != cfg.topl ||
        offsets.l != cfg.topl)
        throw DomainError("aggregate: weight/offset shape does not match the config");

    StackedTensor out;
    out.l = cfg.topl;
    out.t = v.t;
    out.h = v.h;
    out.w = v.w;
    out.f = v.f;
    out.data.assign(std::size_t(out.l) * v.t * v.h * v.w * v.f, 0.0);

    const int half = cfg.ps / 2;
    for (std::int64_t row = 0; row < grid.rows(); ++row) {
        int ti, qy, qx;
        grid.coords(row, ti, qy, qx);
        scatter_writes(grid, v.h, v.w, half, cfg.stride0, qy, qx, [&](int y, int x, int pyu,
                                                                      int pxu) {
            for (int li = 0; li < cfg.topl; ++li) {
                const int kt = ti + int(std::llround(offsets.at(row, li, 0)));
                if (kt < 0 || kt >= v.t)
                    throw DomainError("gather_stack: offsets leave the clip");
                const double sy = double(qy) + offsets.at(row, li, 1) + double(pyu);
                const double sx = double(qx) + offsets.at(row, li, 2) + double(pxu);
                const double wv = weights.at(row, li);
                for (int c = 0; c < v.f; ++c)
                    out.data[out.index(li, ti, y, x, c)] += wv * bilinear_sample(v, kt, sy, sx, c);
            }
        });
    }
    return out;
}

} // namespace snls::reference
