#include "snls/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "snls/memory.hpp"

namespace snls {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

void SearchConfig::validate() const {
    if (ws < 1 || ws % 2 == 0) throw ConfigError("SearchConfig: ws must be odd and positive");
    if (ps < 1 || ps % 2 == 0) throw ConfigError("SearchConfig: ps must be odd and positive");
    if (wt < 0) throw ConfigError("SearchConfig: wt must be >= 0");
    if (stride0 < 1) throw ConfigError("SearchConfig: stride0 must be >= 1");
    if (!(stride1 > 0.0) || !std::isfinite(stride1))
        throw ConfigError("SearchConfig: stride1 must be positive and finite");
    if (topl < 1 || topl > window_slots())
        throw ConfigError("SearchConfig: topl must lie in [1, window slots]");
    if (!std::isfinite(softmax_scale))
        throw ConfigError("SearchConfig: softmax_scale must be finite");
}

int ExecPolicy::resolved_threads() const {
    if (threads > 0) return threads;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

QueryGrid QueryGrid::over(int t, int h, int w, int stride) {
    QueryGrid g;
    g.t = t;
    g.nh = (h - 1) / stride + 1;
    g.nw = (w - 1) / stride + 1;
    g.stride = stride;
    return g;
}

void QueryGrid::coords(std::int64_t row, int& qt, int& qy, int& qx) const {
    qx = int(row % nw) * stride;
    const std::int64_t r = row / nw;
    qy = int(r % nh) * stride;
    qt = int(r / nh);
}

std::vector<int> temporal_scan_order(int wt) {
    std::vector<int> order;
    order.reserve(2 * wt + 1);
    order.push_back(0);
    for (int d = 1; d <= wt; ++d) {
        order.push_back(-d);
        order.push_back(d);
    }
    return order;
}

namespace detail {

void accumulate_shift(const FlowField& fflow, const FlowField& bflow, int qt, int qy, int qx,
                      int dt, double& dy, double& dx, double* links) {
    if (dt == 0) {
        dy = fflow.at(qt, qy, qx, 0);
        dx = fflow.at(qt, qy, qx, 1);
        return;
    }
    const FlowField& field = dt > 0 ? fflow : bflow;
    const int step = dt > 0 ? 1 : -1;
    const int m = dt > 0 ? dt : -dt;
    dy = 0.0;
    dx = 0.0;
    for (int k = 0; k < m; ++k) {
        const int frame = qt + step * k;
        double vy, vx;
        if (k == 0) {
            vy = field.at(frame, qy, qx, 0);
            vx = field.at(frame, qy, qx, 1);
        } else {
            const double py = qy + dy;
            const double px = qx + dx;
            const BilinearTaps taps = bilinear_taps(field.h, field.w, py, px);
            const double f00y = field.at(frame, taps.y0, taps.x0, 0);
            const double f01y = field.at(frame, taps.y0, taps.x1, 0);
            const double f10y = field.at(frame, taps.y1, taps.x0, 0);
            const double f11y = field.at(frame, taps.y1, taps.x1, 0);
            const double f00x = field.at(frame, taps.y0, taps.x0, 1);
            const double f01x = field.at(frame, taps.y0, taps.x1, 1);
            const double f10x = field.at(frame, taps.y1, taps.x0, 1);
            const double f11x = field.at(frame, taps.y1, taps.x1, 1);
            vy = taps.w00 * f00y + taps.w01 * f01y + taps.w10 * f10y + taps.w11 * f11y;
            vx = taps.w00 * f00x + taps.w01 * f01x + taps.w10 * f10x + taps.w11 * f11x;
            if (links) {
                double* lk = links + std::size_t(k - 1) * 6;
                lk[0] = py;
                lk[1] = px;
                // spatial jacobian of the sampled flow value
                lk[2] = -(1.0 - taps.fx) * f00y - taps.fx * f01y + (1.0 - taps.fx) * f10y +
                        taps.fx * f11y; // d vy / d y
                lk[3] = -(1.0 - taps.fy) * f00y + (1.0 - taps.fy) * f01y - taps.fy * f10y +
                        taps.fy * f11y; // d vy / d x
                lk[4] = -(1.0 - taps.fx) * f00x - taps.fx * f01x + (1.0 - taps.fx) * f10x +
                        taps.fx * f11x; // d vx / d y
                lk[5] = -(1.0 - taps.fy) * f00x + (1.0 - taps.fy) * f01x - taps.fy * f10x +
                        taps.fy * f11x; // d vx / d x
            }
        }
        dy += vy;
        dx += vx;
    }
}

double patch_similarity(const VideoTensor& q, const VideoTensor& k, int qt, int qy, int qx,
                        int kt, double ky, double kx, int ps, Metric metric) {
    const int half = ps / 2;
    double acc = 0.0;
    for (int py = -half; py <= half; ++py) {
        const int ry = reflect_index(qy + py, q.h);
        const double sy = ky + double(py);
        for (int px = -half; px <= half; ++px) {
            const int rx = reflect_index(qx + px, q.w);
            const double sx = kx + double(px);
            const BilinearTaps taps = bilinear_taps(k.h, k.w, sy, sx);
            for (int c = 0; c < q.f; ++c) {
                const double qv = q.at(qt, ry, rx, c);
                const double kv = taps.w00 * k.at(kt, taps.y0, taps.x0, c) +
                                  taps.w01 * k.at(kt, taps.y0, taps.x1, c) +
                                  taps.w10 * k.at(kt, taps.y1, taps.x0, c) +
                                  taps.w11 * k.at(kt, taps.y1, taps.x1, c);
                if (metric == Metric::kInnerProduct) {
                    acc += qv * kv;
                } else {
                    const double d = qv - kv;
                    acc -= d * d;
                }
            }
        }
    }
    return acc;
}

} // namespace detail

namespace {

struct SlotDecoder {
    int ws, half_ws;
    std::vector<int> dts;

    explicit SlotDecoder(const SearchConfig& cfg)
        : ws(cfg.ws), half_ws(cfg.ws / 2), dts(temporal_scan_order(cfg.wt)) {}

    int slots_per_frame() const { return ws * ws; }

    void decode(std::int64_t slot, int& dt, int& dy_idx, int& dx_idx) const {
        const int frame_pos = int(slot / slots_per_frame());
        const int rem = int(slot % slots_per_frame());
        dt = dts[frame_pos];
        dy_idx = rem / ws;
        dx_idx = rem % ws;
    }
};

void validate_forward_inputs(const VideoTensor& q, const VideoTensor& k, const FlowField& fflow,
                             const FlowField& bflow, const SearchConfig& cfg) {
    cfg.validate();
    if (!q.same_shape(k)) throw DomainError("search: query and key shapes differ");
    if (!fflow.matches_video(q.t, q.h, q.w) || !bflow.matches_video(q.t, q.h, q.w))
        throw DomainError("search: flow shape does not match the video");
    fflow.require_finite("search fflow");
    bflow.require_finite("search bflow");
}

// Running top-L insertion; candidates arrive in ascending slot order, so an
// equal value never displaces an earlier one.
inline void topl_insert(double* vals, std::int64_t* slots, int l, double v, std::int64_t s) {
    if (!(v > vals[l - 1])) return;
    int pos = l - 1;
    while (pos > 0 && v > vals[pos - 1]) --pos;
    for (int j = l - 1; j > pos; --j) {
        vals[j] = vals[j - 1];
        slots[j] = slots[j - 1];
    }
    vals[pos] = v;
    slots[pos] = s;
}

struct RowOutputs {
    SimilarityTensor* sims;
    OffsetTensor* offsets;
    SearchTape* tape;
};

// Emits the selected entries of one row given its winning slots; recomputes
// shifts so the key centers match the candidate loop bitwise.
void emit_row(const FlowField& fflow, const FlowField& bflow, const SearchConfig& cfg,
              const SlotDecoder& dec, const QueryGrid& grid, std::int64_t row,
              const double* vals, const std::int64_t* slots, RowOutputs out) {
    int qt, qy, qx;
    grid.coords(row, qt, qy, qx);
    for (int li = 0; li < cfg.topl; ++li) {
        int dt, dyi, dxi;
        dec.decode(slots[li], dt, dyi, dxi);
        double sdy, sdx;
        detail::accumulate_shift(fflow, bflow, qt, qy, qx, dt, sdy, sdx, nullptr);
        const double cy = double(qy) + sdy;
        const double cx = double(qx) + sdx;
        const double ky = cy + cfg.stride1 * double(dyi - dec.half_ws);
        const double kx = cx + cfg.stride1 * double(dxi - dec.half_ws);
        out.sims->at(row, li) = vals[li];
        out.offsets->at(row, li, 0) = double(dt);
        out.offsets->at(row, li, 1) = ky - double(qy);
        out.offsets->at(row, li, 2) = kx - double(qx);
        const std::size_t cb = out.tape->center_base(row, li);
        out.tape->centers[cb + 0] = double(qt + dt);
        out.tape->centers[cb + 1] = ky;
        out.tape->centers[cb + 2] = kx;
        if (out.tape->chain_stride > 0 && (dt > 1 || dt < -1)) {
            detail::accumulate_shift(fflow, bflow, qt, qy, qx, dt, sdy, sdx,
                                     out.tape->chains.data() + out.tape->chain_base(row, li));
        }
    }
}

SearchResult make_result_shell(const VideoTensor& q, const SearchConfig& cfg,
                               const QueryGrid& grid) {
    SearchResult res;
    const std::int64_t rows = grid.rows();
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
    return res;
}

std::uint64_t result_bytes(const SearchResult& res) {
    return (res.sims.values.size() + res.offsets.data.size() + res.tape.centers.size() +
            res.tape.chains.size()) *
           sizeof(double);
}

SearchResult fused_forward(const VideoTensor& q, const VideoTensor& k, const FlowField& fflow,
                           const FlowField& bflow, const SearchConfig& cfg,
                           const ExecPolicy& policy) {
    const QueryGrid grid = QueryGrid::over(q.t, q.h, q.w, cfg.stride0);
    const SlotDecoder dec(cfg);
    const std::int64_t rows = grid.rows();
    const int l = cfg.topl;
    const int nthreads = policy.resolved_threads();

    SearchResult res = make_result_shell(q, cfg, grid);
    memory::TransientCharge outputs_charge(result_bytes(res));
    memory::TrackedBuffer<double> ws_vals(std::size_t(nthreads) * l);
    memory::TrackedBuffer<std::int64_t> ws_slots(std::size_t(nthreads) * l);
    std::atomic<bool> underfull{false};

#ifdef _OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static)
#endif
    for (std::int64_t row = 0; row < rows; ++row) {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
#else
        const int tid = 0;
#endif
        double* vals = ws_vals.data() + std::size_t(tid) * l;
        std::int64_t* slots = ws_slots.data() + std::size_t(tid) * l;
        for (int i = 0; i < l; ++i) {
            vals[i] = kNegInf;
            slots[i] = -1;
        }
        int qt, qy, qx;
        grid.coords(row, qt, qy, qx);
        int valid = 0;
        for (std::size_t fpos = 0; fpos < dec.dts.size(); ++fpos) {
            const int dt = dec.dts[fpos];
            const int kt = qt + dt;
            if (kt < 0 || kt >= q.t) continue; // frames off the clip never enter top-L
            double sdy, sdx;
            detail::accumulate_shift(fflow, bflow, qt, qy, qx, dt, sdy, sdx, nullptr);
            const double cy = double(qy) + sdy;
            const double cx = double(qx) + sdx;
            const std::int64_t slot_base = std::int64_t(fpos) * dec.slots_per_frame();
            for (int dyi = 0; dyi < cfg.ws; ++dyi) {
                const double ky = cy + cfg.stride1 * double(dyi - dec.half_ws);
                for (int dxi = 0; dxi < cfg.ws; ++dxi) {
                    const double kx = cx + cfg.stride1 * double(dxi - dec.half_ws);
                    const double val = detail::patch_similarity(q, k, qt, qy, qx, kt, ky, kx,
                                                                cfg.ps, cfg.metric);
                    topl_insert(vals, slots, l, val, slot_base + std::int64_t(dyi) * cfg.ws + dxi);
                    ++valid;
                }
            }
        }
        if (valid < l) {
            underfull.store(true, std::memory_order_relaxed);
            continue;
        }
        emit_row(fflow, bflow, cfg, dec, grid, row, vals, slots,
                 {&res.sims, &res.offsets, &res.tape});
    }
    if (underfull.load())
        throw ConfigError("search: topl exceeds the valid window entries of some query");
    return res;
}

SearchResult full_grid_forward(const VideoTensor& q, const VideoTensor& k, const FlowField& fflow,
                               const FlowField& bflow, const SearchConfig& cfg,
                               const ExecPolicy& policy) {
    const QueryGrid grid = QueryGrid::over(q.t, q.h, q.w, cfg.stride0);
    const SlotDecoder dec(cfg);
    const std::int64_t rows = grid.rows();
    const int n = cfg.window_slots();
    const int l = cfg.topl;
    const int nthreads = policy.resolved_threads();

    SearchResult res = make_result_shell(q, cfg, grid);
    memory::TransientCharge outputs_charge(result_bytes(res));
    // Pre-top-L score grid: the whole point of this mode is to materialize it.
    memory::TrackedBuffer<double> scores(std::size_t(rows) * n);
    memory::TrackedBuffer<std::int64_t> ws_idx(std::size_t(nthreads) * n);
    memory::TrackedBuffer<double> ws_vals(std::size_t(nthreads) * l);
    memory::TrackedBuffer<std::int64_t> ws_slots(std::size_t(nthreads) * l);
    std::atomic<bool> underfull{false};

#ifdef _OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static)
#endif
    for (std::int64_t row = 0; row < rows; ++row) {
        double* dst = scores.data() + std::size_t(row) * n;
        int qt, qy, qx;
        grid.coords(row, qt, qy, qx);
        for (std::size_t fpos = 0; fpos < dec.dts.size(); ++fpos) {
            const int dt = dec.dts[fpos];
            const int kt = qt + dt;
            double* frame_dst = dst + fpos * dec.slots_per_frame();
            if (kt < 0 || kt >= q.t) {
                std::fill(frame_dst, frame_dst + dec.slots_per_frame(), kNegInf);
                continue;
            }
            double sdy, sdx;
            detail::accumulate_shift(fflow, bflow, qt, qy, qx, dt, sdy, sdx, nullptr);
            const double cy = double(qy) + sdy;
            const double cx = double(qx) + sdx;
            for (int dyi = 0; dyi < cfg.ws; ++dyi) {
                const double ky = cy + cfg.stride1 * double(dyi - dec.half_ws);
                for (int dxi = 0; dxi < cfg.ws; ++dxi) {
                    const double kx = cx + cfg.stride1 * double(dxi - dec.half_ws);
                    frame_dst[dyi * cfg.ws + dxi] = detail::patch_similarity(
                        q, k, qt, qy, qx, kt, ky, kx, cfg.ps, cfg.metric);
                }
            }
        }
    }

#ifdef _OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static)
#endif
    for (std::int64_t row = 0; row < rows; ++row) {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
#else
        const int tid = 0;
#endif
        const double* src = scores.data() + std::size_t(row) * n;
        std::int64_t* idx = ws_idx.data() + std::size_t(tid) * n;
        std::iota(idx, idx + n, std::int64_t(0));
        std::partial_sort(idx, idx + l, idx + n, [src](std::int64_t a, std::int64_t b) {
            if (src[a] != src[b]) return src[a] > src[b];
            return a < b;
        });
        if (src[idx[l - 1]] == kNegInf) {
            underfull.store(true, std::memory_order_relaxed);
            continue;
        }
        double* vals = ws_vals.data() + std::size_t(tid) * l;
        std::int64_t* slots = ws_slots.data() + std::size_t(tid) * l;
        for (int li = 0; li < l; ++li) {
            vals[li] = src[idx[li]];
            slots[li] = idx[li];
        }
        emit_row(fflow, bflow, cfg, dec, grid, row, vals, slots,
                 {&res.sims, &res.offsets, &res.tape});
    }
    if (underfull.load())
        throw ConfigError("search: topl exceeds the valid window entries of some query");
    return res;
}

} // namespace

SearchResult shifted_nls_forward(const VideoTensor& q, const VideoTensor& k,
                                 const FlowField& fflow, const FlowField& bflow,
                                 const SearchConfig& cfg, const ExecPolicy& policy) {
    validate_forward_inputs(q, k, fflow, bflow, cfg);
    if (policy.mode == SearchMode::kFullGrid)
        return full_grid_forward(q, k, fflow, bflow, cfg, policy);
    return fused_forward(q, k, fflow, bflow, cfg, policy);
}

SearchResult nls_forward(const VideoTensor& q, const VideoTensor& k, const SearchConfig& cfg,
                         const ExecPolicy& policy) {
    const FlowField zero_f(q.t, q.h, q.w, FlowDirection::kForward);
    const FlowField zero_b(q.t, q.h, q.w, FlowDirection::kBackward);
    return shifted_nls_forward(q, k, zero_f, zero_b, cfg, policy);
}

std::pair<SimilarityTensor, OffsetTensor> top_l(const SimilarityTensor& full,
                                                const OffsetTensor& full_offsets, int topl) {
    if (full.rows != full_offsets.rows || full.cols != full_offsets.l)
        throw DomainError("top_l: similarity and offset shapes disagree");
    if (topl < 1 || topl > full.cols) throw ConfigError("top_l: L out of range");

    SimilarityTensor sel;
    sel.rows = full.rows;
    sel.cols = topl;
    sel.values.assign(std::size_t(full.rows) * topl, 0.0);
    OffsetTensor off;
    off.rows = full.rows;
    off.l = topl;
    off.data.assign(std::size_t(full.rows) * topl * 3, 0.0);

    std::atomic<bool> underfull{false};
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t row = 0; row < full.rows; ++row) {
        std::vector<int> idx(full.cols);
        std::iota(idx.begin(), idx.end(), 0);
        const double* src = full.values.data() + std::size_t(row) * full.cols;
        std::partial_sort(idx.begin(), idx.begin() + topl, idx.end(), [src](int a, int b) {
            if (src[a] != src[b]) return src[a] > src[b];
            return a < b;
        });
        if (src[idx[topl - 1]] == kNegInf) {
            underfull.store(true, std::memory_order_relaxed);
            continue;
        }
        for (int li = 0; li < topl; ++li) {
            sel.at(row, li) = src[idx[li]];
            for (int c = 0; c < 3; ++c) off.at(row, li, c) = full_offsets.at(row, idx[li], c);
        }
    }
    if (underfull.load()) throw DomainError("top_l: some row has fewer than L valid entries");
    return {std::move(sel), std::move(off)};
}

SimilarityTensor replay_similarities(const SearchTape& tape, const VideoTensor& q,
                                     const VideoTensor& k) {
    if (q.t != tape.vid_t || q.h != tape.vid_h || q.w != tape.vid_w || q.f != tape.vid_f ||
        !q.same_shape(k))
        throw DomainError("replay_similarities: tensor shape does not match the tape");
    SimilarityTensor out;
    out.rows = tape.grid.rows();
    out.cols = tape.cfg.topl;
    out.values.assign(std::size_t(out.rows) * out.cols, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t row = 0; row < out.rows; ++row) {
        int qt, qy, qx;
        tape.grid.coords(row, qt, qy, qx);
        for (int li = 0; li < tape.cfg.topl; ++li) {
            const std::size_t cb = tape.center_base(row, li);
            out.at(row, li) = detail::patch_similarity(
                q, k, qt, qy, qx, int(tape.centers[cb + 0]), tape.centers[cb + 1],
                tape.centers[cb + 2], tape.cfg.ps, tape.cfg.metric);
        }
    }
    return out;
}

namespace {

// One selected entry's contribution to dQ, dK and the flow gradients.
// Atomic != 0 selects atomic accumulation for the parallel path.
template <bool kAtomic>
void backward_entry(const SearchTape& tape, const VideoTensor& q, const VideoTensor& k,
                    std::int64_t row, int li, double g, VideoTensor& dq, VideoTensor& dk,
                    FlowField& dff, FlowField& dbf) {
    const SearchConfig& cfg = tape.cfg;
    int qt, qy, qx;
    tape.grid.coords(row, qt, qy, qx);
    const std::size_t cb = tape.center_base(row, li);
    const int kt = int(tape.centers[cb + 0]);
    const double ky = tape.centers[cb + 1];
    const double kx = tape.centers[cb + 2];
    const int dt = kt - qt;
    const int half = cfg.ps / 2;

    double gy = 0.0, gx = 0.0; // dO / d(ky, kx)
    for (int py = -half; py <= half; ++py) {
        const int ry = reflect_index(qy + py, q.h);
        const double sy = ky + double(py);
        for (int px = -half; px <= half; ++px) {
            const int rx = reflect_index(qx + px, q.w);
            const double sx = kx + double(px);
            const BilinearTaps taps = bilinear_taps(k.h, k.w, sy, sx);
            for (int c = 0; c < q.f; ++c) {
                const double qv = q.at(qt, ry, rx, c);
                const double k00 = k.at(kt, taps.y0, taps.x0, c);
                const double k01 = k.at(kt, taps.y0, taps.x1, c);
                const double k10 = k.at(kt, taps.y1, taps.x0, c);
                const double k11 = k.at(kt, taps.y1, taps.x1, c);
                const double kv = taps.w00 * k00 + taps.w01 * k01 + taps.w10 * k10 +
                                  taps.w11 * k11;
                double ds_dqv, ds_dkv;
                if (cfg.metric == Metric::kInnerProduct) {
                    ds_dqv = kv;
                    ds_dkv = qv;
                } else {
                    const double diff = qv - kv;
                    ds_dqv = -2.0 * diff;
                    ds_dkv = 2.0 * diff;
                }
                const double gq = g * ds_dqv;
                const double gk = g * ds_dkv;
                double& dq_ref = dq.at(qt, ry, rx, c);
                double& dk00 = dk.at(kt, taps.y0, taps.x0, c);
                double& dk01 = dk.at(kt, taps.y0, taps.x1, c);
                double& dk10 = dk.at(kt, taps.y1, taps.x0, c);
                double& dk11 = dk.at(kt, taps.y1, taps.x1, c);
                if constexpr (kAtomic) {
#ifdef _OPENMP
#pragma omp atomic update
#endif
                    dq_ref += gq;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                    dk00 += gk * taps.w00;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                    dk01 += gk * taps.w01;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                    dk10 += gk * taps.w10;
#ifdef _OPENMP
#pragma omp atomic update
#endif
                    dk11 += gk * taps.w11;
                } else {
                    dq_ref += gq;
                    dk00 += gk * taps.w00;
                    dk01 += gk * taps.w01;
                    dk10 += gk * taps.w10;
                    dk11 += gk * taps.w11;
                }
                // d(sample)/dy and /dx from the tap values
                const double dkv_dy = -(1.0 - taps.fx) * k00 - taps.fx * k01 +
                                      (1.0 - taps.fx) * k10 + taps.fx * k11;
                const double dkv_dx = -(1.0 - taps.fy) * k00 + (1.0 - taps.fy) * k01 -
                                      taps.fy * k10 + taps.fy * k11;
                gy += gk * dkv_dy;
                gx += gk * dkv_dx;
            }
        }
    }

    // Route (gy, gx) into the flow entries that built the window shift.
    FlowField& field = dt >= 0 ? dff : dbf;
    const int step = dt >= 0 ? 1 : -1;
    const int m = dt == 0 ? 1 : (dt > 0 ? dt : -dt);
    double vy = gy, vx = gx;
    const double* chain = tape.chains.data() + tape.chain_base(row, li);
    for (int kk = m - 1; kk >= 1; --kk) {
        const double* lk = chain + std::size_t(kk - 1) * 6;
        const BilinearTaps taps = bilinear_taps(field.h, field.w, lk[0], lk[1]);
        const int frame = qt + step * kk;
        double* d00y = &field.at(frame, taps.y0, taps.x0, 0);
        double* d01y = &field.at(frame, taps.y0, taps.x1, 0);
        double* d10y = &field.at(frame, taps.y1, taps.x0, 0);
        double* d11y = &field.at(frame, taps.y1, taps.x1, 0);
        double* d00x = &field.at(frame, taps.y0, taps.x0, 1);
        double* d01x = &field.at(frame, taps.y0, taps.x1, 1);
        double* d10x = &field.at(frame, taps.y1, taps.x0, 1);
        double* d11x = &field.at(frame, taps.y1, taps.x1, 1);
        if constexpr (kAtomic) {
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d00y += vy * taps.w00;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d01y += vy * taps.w01;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d10y += vy * taps.w10;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d11y += vy * taps.w11;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d00x += vx * taps.w00;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d01x += vx * taps.w01;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d10x += vx * taps.w10;
#ifdef _OPENMP
#pragma omp atomic update
#endif
            *d11x += vx * taps.w11;
        } else {
            *d00y += vy * taps.w00;
            *d01y += vy * taps.w01;
            *d10y += vy * taps.w10;
            *d11y += vy * taps.w11;
            *d00x += vx * taps.w00;
            *d01x += vx * taps.w01;
            *d10x += vx * taps.w10;
            *d11x += vx * taps.w11;
        }
        // v <- (I + J)^T v  through position dependence of the next link
        const double j00 = lk[2], j01 = lk[3], j10 = lk[4], j11 = lk[5];
        const double ny = vy + j00 * vy + j10 * vx;
        const double nx = vx + j01 * vy + j11 * vx;
        vy = ny;
        vx = nx;
    }
    double& f_y = field.at(qt, qy, qx, 0);
    double& f_x = field.at(qt, qy, qx, 1);
    if constexpr (kAtomic) {
#ifdef _OPENMP
#pragma omp atomic update
#endif
        f_y += vy;
#ifdef _OPENMP
#pragma omp atomic update
#endif
        f_x += vx;
    } else {
        f_y += vy;
        f_x += vx;
    }
}

} // namespace

SearchGradients shifted_nls_backward(const SimilarityTensor& grad_selected,
                                     const SearchTape& tape, const VideoTensor& q,
                                     const VideoTensor& k, const ExecPolicy& policy) {
    if (grad_selected.rows != tape.grid.rows() || grad_selected.cols != tape.cfg.topl)
        throw DomainError("shifted_nls_backward: gradient shape does not match the tape");
    if (q.t != tape.vid_t || q.h != tape.vid_h || q.w != tape.vid_w || q.f != tape.vid_f ||
        !q.same_shape(k))
        throw DomainError("shifted_nls_backward: tensor shape does not match the tape");

    SearchGradients g;
    g.grad_q = VideoTensor(q.t, q.h, q.w, q.f);
    g.grad_k = VideoTensor(q.t, q.h, q.w, q.f);
    g.grad_fflow = FlowField(q.t, q.h, q.w, FlowDirection::kForward);
    g.grad_bflow = FlowField(q.t, q.h, q.w, FlowDirection::kBackward);
    const std::int64_t rows = tape.grid.rows();

    if (policy.deterministic) {
        // fixed scatter order: queries ascending, neighbors ascending
        for (std::int64_t row = 0; row < rows; ++row) {
            for (int li = 0; li < tape.cfg.topl; ++li) {
                const double up = grad_selected.at(row, li);
                if (up == 0.0) continue;
                backward_entry<false>(tape, q, k, row, li, up, g.grad_q, g.grad_k, g.grad_fflow,
                                      g.grad_bflow);
            }
        }
    } else {
#ifdef _OPENMP
#pragma omp parallel for num_threads(policy.resolved_threads()) schedule(static)
#endif
        for (std::int64_t row = 0; row < rows; ++row) {
            for (int li = 0; li < tape.cfg.topl; ++li) {
                const double up = grad_selected.at(row, li);
                if (up == 0.0) continue;
                backward_entry<true>(tape, q, k, row, li, up, g.grad_q, g.grad_k, g.grad_fflow,
                                     g.grad_bflow);
            }
        }
    }
    return g;
}

} // namespace snls
