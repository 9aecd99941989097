#include "snls/aggregate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "snls/memory.hpp"

namespace snls {

WeightTensor softmax_rows(const SimilarityTensor& selected, double beta) {
    WeightTensor w;
    w.rows = selected.rows;
    w.l = selected.cols;
    w.values.assign(selected.values.size(), 0.0);
    for (std::int64_t r = 0; r < selected.rows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < selected.cols; ++c) {
            const double z = beta * selected.at(r, c);
            if (!std::isfinite(z)) throw DomainError("softmax_rows: non-finite input");
            m = std::max(m, z);
        }
        double sum = 0.0;
        for (int c = 0; c < selected.cols; ++c) {
            const double e = std::exp(beta * selected.at(r, c) - m);
            w.at(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < selected.cols; ++c) w.at(r, c) /= sum;
    }
    return w;
}

namespace {

struct AggShape {
    QueryGrid grid;
    int t, h, w, f, half;
    int qmax_y, qmax_x;
};

AggShape check_agg_inputs(const VideoTensor& v, const WeightTensor& weights,
                          const OffsetTensor& offsets, const SearchConfig& cfg) {
    cfg.validate();
    if (!cfg.hole_free())
        throw ConfigError("aggregate: (ps-1)/2 < stride0 is required for hole-free output");
    AggShape s;
    s.grid = QueryGrid::over(v.t, v.h, v.w, cfg.stride0);
    if (weights.rows != s.grid.rows() || offsets.rows != s.grid.rows())
        throw DomainError("aggregate: weight/offset rows do not match the query grid");
    if (weights.l != offsets.l || weights.l != cfg.topl)
        throw DomainError("aggregate: weight/offset L does not match the config");
    s.t = v.t;
    s.h = v.h;
    s.w = v.w;
    s.f = v.f;
    s.half = cfg.ps / 2;
    s.qmax_y = (s.grid.nh - 1) * cfg.stride0;
    s.qmax_x = (s.grid.nw - 1) * cfg.stride0;
    return s;
}

inline int clamp_patch(int d, int half) { return d < -half ? -half : (d > half ? half : d); }

// First and last pixel owned by grid index gi along one axis.
inline void cell_range(int gi, int stride, int n, int extent, int& lo, int& hi) {
    const int a = (stride - 1) / 2;
    lo = gi == 0 ? 0 : gi * stride - a;
    hi = gi == n - 1 ? extent - 1 : gi * stride + (stride - 1 - a);
}

// Write targets of one query: the in-frame patch footprint, then the
// remainder of its stride cell with the nearest patch pixel replicated.
// fn(y, x, py_used, px_used).
template <class Fn>
void for_each_write(const AggShape& s, int stride, int qy, int qx, Fn&& fn) {
    for (int py = -s.half; py <= s.half; ++py) {
        const int y = qy + py;
        if (y < 0 || y >= s.h) continue; // out-of-frame writes are dropped
        for (int px = -s.half; px <= s.half; ++px) {
            const int x = qx + px;
            if (x < 0 || x >= s.w) continue;
            fn(y, x, py, px);
        }
    }
    int ylo, yhi, xlo, xhi;
    cell_range(qy / stride, stride, s.grid.nh, s.h, ylo, yhi);
    cell_range(qx / stride, stride, s.grid.nw, s.w, xlo, xhi);
    for (int y = ylo; y <= yhi; ++y) {
        for (int x = xlo; x <= xhi; ++x) {
            if (std::abs(y - qy) <= s.half && std::abs(x - qx) <= s.half) continue;
            fn(y, x, clamp_patch(y - qy, s.half), clamp_patch(x - qx, s.half));
        }
    }
}

// Accumulates one (query, patch-pixel) unit into acc[f]: the softmax-weighted
// sum over the query's L neighbors, sampled bilinearly.
inline bool accumulate_unit(const VideoTensor& v, const WeightTensor& weights,
                            const OffsetTensor& offsets, const AggShape& s, std::int64_t row,
                            int ti, int qy, int qx, int py_used, int px_used, double* acc) {
    for (int li = 0; li < weights.l; ++li) {
        const int kt = ti + int(std::llround(offsets.at(row, li, 0)));
        if (kt < 0 || kt >= s.t) return false;
        const double sy = double(qy) + offsets.at(row, li, 1) + double(py_used);
        const double sx = double(qx) + offsets.at(row, li, 2) + double(px_used);
        const BilinearTaps taps = bilinear_taps(s.h, s.w, sy, sx);
        const double wv = weights.at(row, li);
        for (int c = 0; c < s.f; ++c) {
            acc[c] += wv * (taps.w00 * v.at(kt, taps.y0, taps.x0, c) +
                            taps.w01 * v.at(kt, taps.y0, taps.x1, c) +
                            taps.w10 * v.at(kt, taps.y1, taps.x0, c) +
                            taps.w11 * v.at(kt, taps.y1, taps.x1, c));
        }
    }
    return true;
}

WpsumResult wpsum_gather(const VideoTensor& v, const WeightTensor& weights,
                         const OffsetTensor& offsets, const SearchConfig& cfg,
                         const AggShape& s, const ExecPolicy& policy) {
    WpsumResult res;
    res.video = VideoTensor(s.t, s.h, s.w, s.f, 0.0, v.width);
    res.tape.cfg = cfg;
    res.tape.grid = s.grid;
    res.tape.t = s.t;
    res.tape.h = s.h;
    res.tape.w = s.w;
    res.tape.f = s.f;
    res.tape.counts.assign(std::size_t(s.t) * s.h * s.w, 0);
    memory::TransientCharge outputs_charge(res.video.size() * sizeof(double) +
                                           res.tape.counts.size() * sizeof(std::int32_t));

    const int nthreads = policy.resolved_threads();
    memory::TrackedBuffer<double> acc_ws(std::size_t(nthreads) * s.f);
    const int stride = cfg.stride0;
    std::atomic<bool> bad{false};

#ifdef _OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static)
#endif
    for (std::int64_t line = 0; line < std::int64_t(s.t) * s.h; ++line) {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
#else
        const int tid = 0;
#endif
        double* acc = acc_ws.data() + std::size_t(tid) * s.f;
        const int ti = int(line / s.h);
        const int y = int(line % s.h);
        for (int x = 0; x < s.w; ++x) {
            std::fill(acc, acc + s.f, 0.0);
            int cnt = 0;
            bool ok = true;
            // footprint contributions, patch pixel ascending
            for (int py = -s.half; py <= s.half && ok; ++py) {
                const int qy = y - py;
                if (qy < 0 || qy > s.qmax_y || qy % stride != 0) continue;
                for (int px = -s.half; px <= s.half; ++px) {
                    const int qx = x - px;
                    if (qx < 0 || qx > s.qmax_x || qx % stride != 0) continue;
                    const std::int64_t row =
                        (std::int64_t(ti) * s.grid.nh + qy / stride) * s.grid.nw + qx / stride;
                    if (!accumulate_unit(v, weights, offsets, s, row, ti, qy, qx, py, px, acc)) {
                        ok = false;
                        break;
                    }
                    ++cnt;
                }
            }
            // cell-completion contribution from the owning query, last
            if (ok) {
                const int qy = detail::owning_grid_index(y, stride, s.grid.nh) * stride;
                const int qx = detail::owning_grid_index(x, stride, s.grid.nw) * stride;
                if (std::abs(y - qy) > s.half || std::abs(x - qx) > s.half) {
                    const std::int64_t row =
                        (std::int64_t(ti) * s.grid.nh + qy / stride) * s.grid.nw + qx / stride;
                    ok = accumulate_unit(v, weights, offsets, s, row, ti, qy, qx,
                                         clamp_patch(y - qy, s.half), clamp_patch(x - qx, s.half),
                                         acc);
                    if (ok) ++cnt;
                }
            }
            if (!ok) {
                bad.store(true, std::memory_order_relaxed);
                continue;
            }
            if (cnt == 0) {
                bad.store(true, std::memory_order_relaxed);
                continue;
            }
            res.tape.counts[res.tape.pixel(ti, y, x)] = cnt;
            for (int c = 0; c < s.f; ++c) res.video.at(ti, y, x, c) = acc[c] / double(cnt);
        }
    }
    if (bad.load()) throw DomainError("wpsum: offsets leave the clip or a pixel has no writers");
    return res;
}

WpsumResult wpsum_scatter(const VideoTensor& v, const WeightTensor& weights,
                          const OffsetTensor& offsets, const SearchConfig& cfg,
                          const AggShape& s, const ExecPolicy& policy) {
    WpsumResult res;
    res.video = VideoTensor(s.t, s.h, s.w, s.f, 0.0, v.width);
    res.tape.cfg = cfg;
    res.tape.grid = s.grid;
    res.tape.t = s.t;
    res.tape.h = s.h;
    res.tape.w = s.w;
    res.tape.f = s.f;
    res.tape.counts.assign(std::size_t(s.t) * s.h * s.w, 0);
    memory::TransientCharge outputs_charge(res.video.size() * sizeof(double) +
                                           res.tape.counts.size() * sizeof(std::int32_t));

    const std::int64_t rows = s.grid.rows();
    std::atomic<bool> bad{false};
#ifdef _OPENMP
#pragma omp parallel for num_threads(policy.resolved_threads()) schedule(static)
#endif
    for (std::int64_t row = 0; row < rows; ++row) {
        int ti, qy, qx;
        s.grid.coords(row, ti, qy, qx);
        for_each_write(s, cfg.stride0, qy, qx, [&](int y, int x, int pyu, int pxu) {
            for (int li = 0; li < weights.l; ++li) {
                const int kt = ti + int(std::llround(offsets.at(row, li, 0)));
                if (kt < 0 || kt >= s.t) {
                    bad.store(true, std::memory_order_relaxed);
                    return;
                }
                const double sy = double(qy) + offsets.at(row, li, 1) + double(pyu);
                const double sx = double(qx) + offsets.at(row, li, 2) + double(pxu);
                const BilinearTaps taps = bilinear_taps(s.h, s.w, sy, sx);
                const double wv = weights.at(row, li);
                for (int c = 0; c < s.f; ++c) {
                    const double val = wv * (taps.w00 * v.at(kt, taps.y0, taps.x0, c) +
                                             taps.w01 * v.at(kt, taps.y0, taps.x1, c) +
                                             taps.w10 * v.at(kt, taps.y1, taps.x0, c) +
                                             taps.w11 * v.at(kt, taps.y1, taps.x1, c));
                    double& dst = res.video.at(ti, y, x, c);
#ifdef _OPENMP
#pragma omp atomic update
#endif
                    dst += val;
                }
            }
            std::int32_t& cref = res.tape.counts[res.tape.pixel(ti, y, x)];
#ifdef _OPENMP
#pragma omp atomic update
#endif
            ++cref;
        });
    }
    if (bad.load()) throw DomainError("wpsum: offsets leave the clip");

    bool hole = false;
#ifdef _OPENMP
#pragma omp parallel for num_threads(policy.resolved_threads()) schedule(static)
#endif
    for (std::int64_t p = 0; p < std::int64_t(res.tape.counts.size()); ++p) {
        const int cnt = res.tape.counts[p];
        if (cnt == 0) {
            hole = true;
            continue;
        }
        for (int c = 0; c < s.f; ++c) res.video.data[std::size_t(p) * s.f + c] /= double(cnt);
    }
    if (hole) throw DomainError("wpsum: internal invariant failure, pixel with no writers");
    return res;
}

} // namespace

WpsumResult wpsum(const VideoTensor& v, const WeightTensor& weights, const OffsetTensor& offsets,
                  const SearchConfig& cfg, const ExecPolicy& policy) {
    const AggShape s = check_agg_inputs(v, weights, offsets, cfg);
    if (policy.deterministic) return wpsum_gather(v, weights, offsets, cfg, s, policy);
    return wpsum_scatter(v, weights, offsets, cfg, s, policy);
}

StackedTensor gather_stack(const VideoTensor& v, const WeightTensor& weights,
                           const OffsetTensor& offsets, const SearchConfig& cfg,
                           const ExecPolicy& policy) {
    const AggShape s = check_agg_inputs(v, weights, offsets, cfg);
    StackedTensor out;
    out.l = cfg.topl;
    out.t = s.t;
    out.h = s.h;
    out.w = s.w;
    out.f = s.f;
    out.data.assign(std::size_t(out.l) * s.t * s.h * s.w * s.f, 0.0);
    memory::TransientCharge outputs_charge(out.data.size() * sizeof(double));

    const int stride = cfg.stride0;
    std::atomic<bool> bad{false};
#ifdef _OPENMP
#pragma omp parallel for num_threads(policy.resolved_threads()) schedule(static)
#endif
    for (std::int64_t job = 0; job < std::int64_t(out.l) * s.t * s.h; ++job) {
        const int li = int(job / (std::int64_t(s.t) * s.h));
        const std::int64_t line = job % (std::int64_t(s.t) * s.h);
        const int ti = int(line / s.h);
        const int y = int(line % s.h);
        for (int x = 0; x < s.w; ++x) {
            // same write set as wpsum, restricted to neighbor li, unnormalized
            auto accumulate = [&](int qy, int qx, int pyu, int pxu) {
                const std::int64_t row =
                    (std::int64_t(ti) * s.grid.nh + qy / stride) * s.grid.nw + qx / stride;
                const int kt = ti + int(std::llround(offsets.at(row, li, 0)));
                if (kt < 0 || kt >= s.t) {
                    bad.store(true, std::memory_order_relaxed);
                    return;
                }
                const double sy = double(qy) + offsets.at(row, li, 1) + double(pyu);
                const double sx = double(qx) + offsets.at(row, li, 2) + double(pxu);
                const BilinearTaps taps = bilinear_taps(s.h, s.w, sy, sx);
                const double wv = weights.at(row, li);
                for (int c = 0; c < s.f; ++c) {
                    out.data[out.index(li, ti, y, x, c)] +=
                        wv * (taps.w00 * v.at(kt, taps.y0, taps.x0, c) +
                              taps.w01 * v.at(kt, taps.y0, taps.x1, c) +
                              taps.w10 * v.at(kt, taps.y1, taps.x0, c) +
                              taps.w11 * v.at(kt, taps.y1, taps.x1, c));
                }
            };
            for (int py = -s.half; py <= s.half; ++py) {
                const int qy = y - py;
                if (qy < 0 || qy > s.qmax_y || qy % stride != 0) continue;
                for (int px = -s.half; px <= s.half; ++px) {
                    const int qx = x - px;
                    if (qx < 0 || qx > s.qmax_x || qx % stride != 0) continue;
                    accumulate(qy, qx, py, px);
                }
            }
            const int qy = detail::owning_grid_index(y, stride, s.grid.nh) * stride;
            const int qx = detail::owning_grid_index(x, stride, s.grid.nw) * stride;
            if (std::abs(y - qy) > s.half || std::abs(x - qx) > s.half)
                accumulate(qy, qx, clamp_patch(y - qy, s.half), clamp_patch(x - qx, s.half));
        }
    }
    if (bad.load()) throw DomainError("gather_stack: offsets leave the clip");
    return out;
}

namespace {

template <bool kAtomic>
void backward_query(const AggShape& s, const VideoTensor& grad_out, const VideoTensor& v,
                    const WeightTensor& weights, const OffsetTensor& offsets,
                    const std::vector<std::int32_t>& counts, std::int64_t row,
                    VideoTensor* dv, WeightTensor* dw, int stride) {
    int ti, qy, qx;
    s.grid.coords(row, ti, qy, qx);
    for_each_write(s, stride, qy, qx, [&](int y, int x, int pyu, int pxu) {
        const double inv_cnt = 1.0 / double(counts[(std::size_t(ti) * s.h + y) * s.w + x]);
        for (int li = 0; li < weights.l; ++li) {
            const int kt = ti + int(std::llround(offsets.at(row, li, 0)));
            const double sy = double(qy) + offsets.at(row, li, 1) + double(pyu);
            const double sx = double(qx) + offsets.at(row, li, 2) + double(pxu);
            const BilinearTaps taps = bilinear_taps(s.h, s.w, sy, sx);
            const double wv = weights.at(row, li);
            double dw_acc = 0.0;
            for (int c = 0; c < s.f; ++c) {
                const double g = grad_out.at(ti, y, x, c) * inv_cnt;
                const double sample = taps.w00 * v.at(kt, taps.y0, taps.x0, c) +
                                      taps.w01 * v.at(kt, taps.y0, taps.x1, c) +
                                      taps.w10 * v.at(kt, taps.y1, taps.x0, c) +
                                      taps.w11 * v.at(kt, taps.y1, taps.x1, c);
                dw_acc += g * sample;
                if (dv) {
                    const double gv = g * wv;
                    double& d00 = dv->at(kt, taps.y0, taps.x0, c);
                    double& d01 = dv->at(kt, taps.y0, taps.x1, c);
                    double& d10 = dv->at(kt, taps.y1, taps.x0, c);
                    double& d11 = dv->at(kt, taps.y1, taps.x1, c);
                    if constexpr (kAtomic) {
#ifdef _OPENMP
#pragma omp atomic update
#endif
                        d00 += gv * taps.w00;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                        d01 += gv * taps.w01;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                        d10 += gv * taps.w10;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                        d11 += gv * taps.w11;
                    } else {
                        d00 += gv * taps.w00;
                        d01 += gv * taps.w01;
                        d10 += gv * taps.w10;
                        d11 += gv * taps.w11;
                    }
                }
            }
            if (dw) dw->at(row, li) += dw_acc;
        }
    });
}

} // namespace

AggGradients wpsum_backward(const VideoTensor& grad_out, const AggTape& tape,
                            const VideoTensor& v, const WeightTensor& weights,
                            const OffsetTensor& offsets, const ExecPolicy& policy) {
    if (grad_out.t != tape.t || grad_out.h != tape.h || grad_out.w != tape.w ||
        grad_out.f != tape.f || !grad_out.same_shape(v))
        throw DomainError("wpsum_backward: gradient shape does not match the tape");
    if (weights.rows != tape.grid.rows() || offsets.rows != tape.grid.rows() ||
        weights.l != tape.cfg.topl || offsets.l != tape.cfg.topl)
        throw DomainError("wpsum_backward: weight/offset shape does not match the tape");

    AggShape s;
    s.grid = tape.grid;
    s.t = tape.t;
    s.h = tape.h;
    s.w = tape.w;
    s.f = tape.f;
    s.half = tape.cfg.ps / 2;
    s.qmax_y = (s.grid.nh - 1) * tape.cfg.stride0;
    s.qmax_x = (s.grid.nw - 1) * tape.cfg.stride0;

    AggGradients g;
    g.grad_v = VideoTensor(v.t, v.h, v.w, v.f);
    g.grad_weights.rows = weights.rows;
    g.grad_weights.l = weights.l;
    g.grad_weights.values.assign(weights.values.size(), 0.0);

    const std::int64_t rows = s.grid.rows();
    if (policy.deterministic) {
        // dWeights rows are independent: gather in parallel
#ifdef _OPENMP
#pragma omp parallel for num_threads(policy.resolved_threads()) schedule(static)
#endif
        for (std::int64_t row = 0; row < rows; ++row)
            backward_query<false>(s, grad_out, v, weights, offsets, tape.counts, row, nullptr,
                                  &g.grad_weights, tape.cfg.stride0);
        // dV scatters across queries: fixed order on one thread
        for (std::int64_t row = 0; row < rows; ++row)
            backward_query<false>(s, grad_out, v, weights, offsets, tape.counts, row, &g.grad_v,
                                  nullptr, tape.cfg.stride0);
    } else {
#ifdef _OPENMP
#pragma omp parallel for num_threads(policy.resolved_threads()) schedule(static)
#endif
        for (std::int64_t row = 0; row < rows; ++row)
            backward_query<true>(s, grad_out, v, weights, offsets, tape.counts, row, &g.grad_v,
                                 &g.grad_weights, tape.cfg.stride0);
    }
    return g;
}

} // namespace snls
