#include "snls/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "snls/memory.hpp"
#include "snls/reference.hpp"
#include "snls/rng.hpp"

namespace snls {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string fmt_db(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", x);
    return buf;
}

std::string fmt_ms(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", x);
    return buf;
}

} // namespace

const char* metric_name(Metric m) { return m == Metric::kInnerProduct ? "ip" : "l2"; }

const char* bench_mode_name(BenchMode m) {
    switch (m) {
        case BenchMode::kReference: return "reference";
        case BenchMode::kFullGrid: return "fullgrid";
        default: return "fused";
    }
}

std::string AlignmentReport::to_records() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < frame_psnr.size(); ++i)
        os << "align frame=" << i << " psnr=" << fmt_db(frame_psnr[i]) << "\n";
    os << "align summary frames=" << frame_psnr.size() << " mean_psnr=" << fmt_db(mean_psnr)
       << " flow=" << flow_source << " ws=" << cfg.ws << " wt=" << cfg.wt << " ps=" << cfg.ps
       << " stride0=" << cfg.stride0 << " stride1=" << cfg.stride1 << " topl=" << cfg.topl
       << " metric=" << metric_name(cfg.metric) << " time_noise_ms=" << fmt_ms(time_noise_ms)
       << " time_flow_ms=" << fmt_ms(time_flow_ms) << " time_search_ms=" << fmt_ms(time_search_ms)
       << " time_aggregate_ms=" << fmt_ms(time_aggregate_ms)
       << " time_metrics_ms=" << fmt_ms(time_metrics_ms)
       << " time_total_ms=" << fmt_ms(time_total_ms) << " peak_aux_bytes=" << peak_aux_bytes
       << "\n";
    return os.str();
}

std::string AlignmentReport::to_csv() const {
    std::ostringstream os;
    os << "frame,psnr\n";
    for (std::size_t i = 0; i < frame_psnr.size(); ++i)
        os << i << "," << fmt_db(frame_psnr[i]) << "\n";
    return os.str();
}

AlignmentResult align_frames(const VideoTensor& clean, const AlignmentOptions& opts,
                             const FlowField* provided_flow) {
    opts.cfg.validate();
    if (opts.cfg.topl != 1) throw ConfigError("align_frames: requires topl == 1");
    if (clean.t < 2) throw DomainError("align_frames: needs at least two frames");
    if (opts.flow_source == FlowSource::kProvided) {
        if (!provided_flow) throw ConfigError("align_frames: flow source is 'provided' but none given");
        if (provided_flow->h != clean.h || provided_flow->w != clean.w ||
            provided_flow->t < clean.t - 1)
            throw DomainError("align_frames: provided flow does not cover every frame pair");
    }

    const Clock::time_point total0 = Clock::now();
    memory::reset();
    AlignmentResult out;
    AlignmentReport& rep = out.report;
    rep.cfg = opts.cfg;
    rep.flow_source = opts.flow_source == FlowSource::kZero ? "zero"
                      : opts.flow_source == FlowSource::kProvided ? "file"
                                                                  : "bm";

    Clock::time_point t0 = Clock::now();
    const VideoTensor noisy =
        opts.sigma > 0.0 ? add_gaussian_noise(clean, opts.sigma, opts.seed) : clean;
    rep.time_noise_ms = ms_since(t0);

    const int pairs = clean.t - 1;
    t0 = Clock::now();
    out.used_flow = FlowField(pairs, clean.h, clean.w, FlowDirection::kForward);
    if (opts.flow_source == FlowSource::kProvided) {
        const std::size_t n = std::size_t(clean.h) * clean.w * 2;
        std::copy(provided_flow->data.begin(), provided_flow->data.begin() + n * pairs,
                  out.used_flow.data.begin());
    } else if (opts.flow_source == FlowSource::kBlockMatching) {
        for (int ti = 0; ti < pairs; ++ti) {
            const FlowField est = estimate_flow_block_matching(
                frame_slice(noisy, ti), frame_slice(noisy, ti + 1), opts.bm_block, opts.bm_radius);
            std::copy(est.data.begin(), est.data.end(),
                      out.used_flow.data.begin() + std::size_t(ti) * est.data.size());
        }
    }
    rep.time_flow_ms = ms_since(t0);

    t0 = Clock::now(); // output staging counts as aggregation time
    out.aligned = VideoTensor(pairs, clean.h, clean.w, clean.f, 0.0, clean.width);
    const QueryGrid grid = QueryGrid::over(1, clean.h, clean.w, opts.cfg.stride0);
    out.top1_offsets.rows = std::int64_t(pairs) * grid.nh * grid.nw;
    out.top1_offsets.l = 1;
    out.top1_offsets.data.assign(std::size_t(out.top1_offsets.rows) * 3, 0.0);
    rep.time_aggregate_ms += ms_since(t0);

    const FlowField zero_b(1, clean.h, clean.w, FlowDirection::kBackward);
    double psnr_sum = 0.0;
    for (int ti = 0; ti < pairs; ++ti) {
        t0 = Clock::now(); // staging the frame pair counts as search time
        const VideoTensor qf = frame_slice(noisy, ti);
        const VideoTensor kf = frame_slice(noisy, ti + 1);
        const VideoTensor vf = frame_slice(clean, ti + 1);
        const FlowField ff = frame_slice(out.used_flow, ti);
        const SearchResult sr = shifted_nls_forward(qf, kf, ff, zero_b, opts.cfg, opts.policy);
        rep.time_search_ms += ms_since(t0);

        t0 = Clock::now();
        const WeightTensor wts = softmax_rows(sr.sims, opts.cfg.softmax_scale);
        const WpsumResult agg = wpsum(vf, wts, sr.offsets, opts.cfg, opts.policy);
        rep.time_aggregate_ms += ms_since(t0);

        std::copy(agg.video.data.begin(), agg.video.data.end(),
                  out.aligned.data.begin() + std::size_t(ti) * agg.video.data.size());
        std::copy(sr.offsets.data.begin(), sr.offsets.data.end(),
                  out.top1_offsets.data.begin() + std::size_t(ti) * sr.offsets.data.size());

        t0 = Clock::now();
        const double p = psnr(agg.video, frame_slice(clean, ti), 255.0);
        rep.time_metrics_ms += ms_since(t0);
        rep.frame_psnr.push_back(p);
        psnr_sum += p;
    }
    rep.mean_psnr = psnr_sum / double(pairs);
    rep.peak_aux_bytes = memory::peak();
    rep.time_total_ms = ms_since(total0);
    return out;
}

CorrectionStats correction_stats(const FlowField& flow_in, const OffsetTensor& top1, int stride0,
                                 double bin_width) {
    if (!(bin_width > 0.0)) throw ConfigError("correction_stats: bin_width must be positive");
    if (stride0 < 1) throw ConfigError("correction_stats: stride0 must be >= 1");
    const QueryGrid grid = QueryGrid::over(flow_in.t, flow_in.h, flow_in.w, stride0);
    if (grid.rows() != top1.rows)
        throw DomainError("correction_stats: offset rows do not match the flow grid");

    std::vector<double> cys, cxs;
    cys.reserve(std::size_t(top1.rows));
    cxs.reserve(std::size_t(top1.rows));
    for (std::int64_t row = 0; row < top1.rows; ++row) {
        const double dt = top1.at(row, 0, 0);
        if (dt > 1.5 || dt < -1.5) continue; // composed shifts are not raw predictions
        int qt, qy, qx;
        grid.coords(row, qt, qy, qx);
        cys.push_back(top1.at(row, 0, 1) - flow_in.at(qt, qy, qx, 0));
        cxs.push_back(top1.at(row, 0, 2) - flow_in.at(qt, qy, qx, 1));
    }
    if (cys.empty()) throw DomainError("correction_stats: no matches with |dt| <= 1");

    CorrectionStats st;
    st.bin_width = bin_width;
    st.samples = std::int64_t(cys.size());
    std::vector<int> bys(cys.size()), bxs(cys.size());
    for (std::size_t i = 0; i < cys.size(); ++i) {
        bys[i] = int(std::llround(cys[i] / bin_width));
        bxs[i] = int(std::llround(cxs[i] / bin_width));
        st.bin_min_y = std::min(st.bin_min_y, bys[i]);
        st.bin_max_y = std::max(st.bin_max_y, bys[i]);
        st.bin_min_x = std::min(st.bin_min_x, bxs[i]);
        st.bin_max_x = std::max(st.bin_max_x, bxs[i]);
    }
    st.histogram.assign(std::size_t(st.bins_y()) * st.bins_x(), 0.0);
    const double unit = 1.0 / double(cys.size());
    for (std::size_t i = 0; i < cys.size(); ++i)
        st.histogram[std::size_t(bys[i] - st.bin_min_y) * st.bins_x() + (bxs[i] - st.bin_min_x)] +=
            unit;
    st.fraction_at_zero = st.mass(0, 0);

    double my = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < cys.size(); ++i) {
        my += cys[i];
        mx += cxs[i];
    }
    my /= double(cys.size());
    mx /= double(cys.size());
    for (std::size_t i = 0; i < cys.size(); ++i) {
        st.cov_yy += (cys[i] - my) * (cys[i] - my);
        st.cov_yx += (cys[i] - my) * (cxs[i] - mx);
        st.cov_xx += (cxs[i] - mx) * (cxs[i] - mx);
    }
    st.cov_yy /= double(cys.size());
    st.cov_yx /= double(cys.size());
    st.cov_xx /= double(cys.size());

    std::vector<double> radii(cys.size());
    for (std::size_t i = 0; i < cys.size(); ++i) radii[i] = std::hypot(cys[i], cxs[i]);
    std::sort(radii.begin(), radii.end());
    auto quantile = [&](double f) {
        const std::size_t idx =
            std::min(radii.size() - 1, std::size_t(std::ceil(f * double(radii.size())) - 1));
        return radii[idx];
    };
    st.quantile68 = quantile(0.68);
    st.quantile90 = quantile(0.90);
    return st;
}

std::pair<long long, long long> global_reads_model(int q_tile, int ws) {
    if (q_tile < 1 || ws < 1) throw ConfigError("global_reads_model: arguments must be positive");
    return {(long long)q_tile + ws - 1, (long long)q_tile * ws * ws};
}

double n3net_memory_factor(int ps, double sq, double sk) {
    if (ps < 1 || !(sq > 0.0) || !(sk > 0.0))
        throw ConfigError("n3net_memory_factor: arguments must be positive");
    return double(ps) * ps * (1.0 / (sq * sq) + 1.0 / (sk * sk));
}

std::vector<BenchRow> run_benchmark(const std::vector<BenchCase>& grid,
                                    const BenchVideoSpec& spec, int repeats, int threads) {
    if (repeats < 3) throw ConfigError("run_benchmark: repeats must be >= 3");
    if (spec.t < 1 || spec.h < 1 || spec.w < 1 || spec.f < 1)
        throw ConfigError("run_benchmark: video extents must be positive");

    VideoTensor video(spec.t, spec.h, spec.w, spec.f);
    {
        UniformStream rng(spec.seed);
        for (double& x : video.data) x = rng.next_in(0.0, 255.0);
    }
    FlowField fflow(spec.t, spec.h, spec.w, FlowDirection::kForward);
    FlowField bflow(spec.t, spec.h, spec.w, FlowDirection::kBackward);
    {
        UniformStream rng(spec.seed + 1);
        for (double& x : fflow.data) x = rng.next_in(-2.0, 2.0);
        for (double& x : bflow.data) x = rng.next_in(-2.0, 2.0);
    }

    std::vector<BenchRow> rows;
    rows.reserve(grid.size());
    for (const BenchCase& bc : grid) {
        BenchRow row;
        row.bench = bc;
        try {
            auto run = [&]() {
                if (bc.mode == BenchMode::kReference) {
                    (void)reference::shifted_nls_forward(video, video, fflow, bflow, bc.cfg);
                } else {
                    ExecPolicy policy;
                    policy.threads = threads;
                    policy.deterministic = true;
                    policy.mode = bc.mode == BenchMode::kFullGrid ? SearchMode::kFullGrid
                                                                  : SearchMode::kFused;
                    (void)shifted_nls_forward(video, video, fflow, bflow, bc.cfg, policy);
                }
            };
            run(); // warm-up
            std::vector<double> times(repeats);
            for (int r = 0; r < repeats; ++r) {
                memory::reset();
                const Clock::time_point t0 = Clock::now();
                run();
                times[r] = ms_since(t0);
                row.peak_aux_bytes = memory::peak();
            }
            std::sort(times.begin(), times.end());
            row.median_ms = times[repeats / 2];
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string bench_to_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "mode,ws,wt,ps,stride0,stride1,topl,metric,median_ms,peak_aux_bytes,status\n";
    for (const BenchRow& r : rows) {
        std::string status = r.ok ? "ok" : r.error;
        std::replace(status.begin(), status.end(), ',', ';');
        os << bench_mode_name(r.bench.mode) << "," << r.bench.cfg.ws << "," << r.bench.cfg.wt
           << "," << r.bench.cfg.ps << "," << r.bench.cfg.stride0 << "," << r.bench.cfg.stride1
           << "," << r.bench.cfg.topl << "," << metric_name(r.bench.cfg.metric) << ","
           << fmt_ms(r.median_ms) << "," << r.peak_aux_bytes << "," << status << "\n";
    }
    return os.str();
}

} // namespace snls
