#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "snls/harness.hpp"
#include "snls/rng.hpp"

using namespace snls;

namespace {

VideoTensor random_frame_base(int h, int w, int f, std::uint64_t seed) {
    VideoTensor v(1, h, w, f);
    UniformStream rng(seed);
    for (double& x : v.data) x = rng.next_in(0.0, 255.0);
    return v;
}

// frame k is the base circularly shifted by k * (dy, dx); the true forward
// flow between consecutive frames is the constant (dy, dx)
VideoTensor shifting_video(int t, int h, int w, int f, int dy, int dx, std::uint64_t seed) {
    const VideoTensor base = random_frame_base(h, w, f, seed);
    VideoTensor v(t, h, w, f);
    for (int ti = 0; ti < t; ++ti)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < f; ++c) {
                    const int sy = ((y - ti * dy) % h + h) % h;
                    const int sx = ((x - ti * dx) % w + w) % w;
                    v.at(ti, y, x, c) = base.at(0, sy, sx, c);
                }
    return v;
}

FlowField constant_pair_flow(int pairs, int h, int w, double dy, double dx) {
    FlowField f(pairs, h, w, FlowDirection::kForward);
    for (int t = 0; t < pairs; ++t)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                f.at(t, y, x, 0) = dy;
                f.at(t, y, x, 1) = dx;
            }
    return f;
}

} // namespace

TEST_CASE("static scene with zero flow aligns exactly") {
    VideoTensor v(3, 10, 10, 1);
    UniformStream rng(7);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            const double val = rng.next_in(0.0, 255.0);
            for (int t = 0; t < 3; ++t) v.at(t, y, x, 0) = val;
        }
    AlignmentOptions opts;
    opts.cfg.ws = 3;
    opts.cfg.ps = 1;
    opts.cfg.topl = 1;
    opts.flow_source = FlowSource::kZero;
    const AlignmentResult res = align_frames(v, opts);
    for (double p : res.report.frame_psnr) CHECK(std::isinf(p));
    CHECK(std::isinf(res.report.mean_psnr));
}

TEST_CASE("a global shift with exact flow is recovered exactly at interior pixels") {
    const VideoTensor v = shifting_video(3, 16, 16, 1, 3, 4, 17);
    AlignmentOptions opts;
    opts.cfg.ws = 3;
    opts.cfg.ps = 1;
    opts.cfg.topl = 1;
    opts.flow_source = FlowSource::kProvided;
    const FlowField flow = constant_pair_flow(2, 16, 16, 3.0, 4.0);
    const AlignmentResult res = align_frames(v, opts, &flow);
    for (int t = 0; t < 2; ++t)
        for (int y = 1; y + 3 + 1 < 16; ++y)
            for (int x = 1; x + 4 + 1 < 16; ++x)
                CHECK(res.aligned.at(t, y, x, 0) == v.at(t, y, x, 0));
}

TEST_CASE("when the shift exceeds the window the unshifted search loses by over 3 dB") {
    const VideoTensor v = shifting_video(3, 24, 24, 1, 0, 7, 27);
    AlignmentOptions shifted;
    shifted.cfg.ws = 3;
    shifted.cfg.ps = 1;
    shifted.cfg.topl = 1;
    shifted.flow_source = FlowSource::kProvided;
    const FlowField flow = constant_pair_flow(2, 24, 24, 0.0, 7.0);
    const AlignmentResult a = align_frames(v, shifted, &flow);

    AlignmentOptions plain = shifted;
    plain.flow_source = FlowSource::kZero;
    const AlignmentResult b = align_frames(v, plain);

    CHECK(a.report.mean_psnr > b.report.mean_psnr + 3.0);
}

TEST_CASE("alignment quality is non-decreasing in the window size with noisy-but-bounded flow") {
    const VideoTensor v = shifting_video(3, 20, 20, 1, 2, 3, 37);
    FlowField flow = constant_pair_flow(2, 20, 20, 2.0, 3.0);
    UniformStream rng(38);
    for (double& x : flow.data) x += std::floor(rng.next_in(-2.0, 3.0)); // +-2 px error
    double prev = -1e300;
    for (int ws : {1, 3, 5, 7}) {
        AlignmentOptions opts;
        opts.cfg.ws = ws;
        opts.cfg.ps = 1;
        opts.cfg.topl = 1;
        opts.flow_source = FlowSource::kProvided;
        const AlignmentResult res = align_frames(v, opts, &flow);
        const double mean = res.report.mean_psnr;
        CHECK(mean >= prev);
        prev = mean;
    }
}

TEST_CASE("motion dependence: fake flow hurts static clips, real flow helps moving ones") {
    // static fixture, randomized fake flow
    {
        VideoTensor v(3, 14, 14, 1);
        UniformStream rng(47);
        for (int y = 0; y < 14; ++y)
            for (int x = 0; x < 14; ++x) {
                const double val = rng.next_in(0.0, 255.0);
                for (int t = 0; t < 3; ++t) v.at(t, y, x, 0) = val;
            }
        FlowField fake(2, 14, 14, FlowDirection::kForward);
        for (double& x : fake.data) x = rng.next_in(-3.0, 3.0);
        AlignmentOptions opts;
        opts.cfg.ws = 3;
        opts.cfg.ps = 1;
        opts.cfg.topl = 1;
        opts.flow_source = FlowSource::kZero;
        const AlignmentResult nls = align_frames(v, opts);
        opts.flow_source = FlowSource::kProvided;
        const AlignmentResult shifted = align_frames(v, opts, &fake);
        CHECK(nls.report.mean_psnr >= shifted.report.mean_psnr);
    }
    // moving fixture with exact flow; mean |flow| = 2 exceeds ws/2
    {
        const VideoTensor v = shifting_video(3, 20, 20, 1, 0, 4, 57);
        const FlowField flow = constant_pair_flow(2, 20, 20, 0.0, 4.0);
        CHECK(mean_abs_flow(flow) > 1.5);
        AlignmentOptions opts;
        opts.cfg.ws = 3;
        opts.cfg.ps = 1;
        opts.cfg.topl = 1;
        opts.flow_source = FlowSource::kProvided;
        const AlignmentResult shifted = align_frames(v, opts, &flow);
        opts.flow_source = FlowSource::kZero;
        const AlignmentResult nls = align_frames(v, opts);
        CHECK(shifted.report.mean_psnr > nls.report.mean_psnr);
    }
}

TEST_CASE("alignment report: stage times cover the total and validation fires") {
    const VideoTensor v = shifting_video(4, 96, 96, 2, 1, 2, 67);
    AlignmentOptions opts;
    opts.cfg.ws = 9;
    opts.cfg.ps = 3;
    opts.cfg.stride0 = 2;
    opts.cfg.topl = 1;
    opts.flow_source = FlowSource::kBlockMatching;
    opts.sigma = 10.0;
    opts.seed = 5;
    const AlignmentResult res = align_frames(v, opts);
    CHECK(res.report.frame_psnr.size() == 3);
    CHECK(res.report.peak_aux_bytes > 0);
    CHECK(res.report.stage_sum_ms() >= 0.95 * res.report.time_total_ms);
    CHECK(res.report.stage_sum_ms() <= 1.001 * res.report.time_total_ms);
    const std::string records = res.report.to_records();
    CHECK(records.find("align summary") != std::string::npos);
    CHECK(records.find("flow=bm") != std::string::npos);

    AlignmentOptions bad = opts;
    bad.cfg.topl = 2;
    CHECK_THROWS_AS(align_frames(v, bad), ConfigError);
    const VideoTensor single = frame_slice(v, 0);
    CHECK_THROWS_AS(align_frames(single, opts), DomainError);
}

TEST_CASE("correction statistics: zero corrections, moments and normalization") {
    // offsets exactly equal to the flow: all mass in the zero bin
    {
        FlowField flow(1, 6, 6, FlowDirection::kForward);
        UniformStream rng(77);
        for (double& x : flow.data) x = rng.next_in(-2.0, 2.0);
        OffsetTensor top1;
        top1.rows = 36;
        top1.l = 1;
        top1.data.assign(36 * 3, 0.0);
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                const std::int64_t row = y * 6 + x;
                top1.data[row * 3 + 0] = 0.0;
                top1.data[row * 3 + 1] = flow.at(0, y, x, 0);
                top1.data[row * 3 + 2] = flow.at(0, y, x, 1);
            }
        const CorrectionStats st = correction_stats(flow, top1, 1);
        CHECK(st.fraction_at_zero == doctest::Approx(1.0));
        CHECK(st.cov_yy == doctest::Approx(0.0));
        CHECK(st.quantile90 == doctest::Approx(0.0));
    }
    // corrections uniformly +-1 in dy only: covariance [[1,0],[0,0]]
    {
        const FlowField flow(1, 4, 4, FlowDirection::kForward);
        OffsetTensor top1;
        top1.rows = 16;
        top1.l = 1;
        top1.data.assign(16 * 3, 0.0);
        for (int i = 0; i < 16; ++i) top1.data[i * 3 + 1] = (i % 2 == 0) ? 1.0 : -1.0;
        const CorrectionStats st = correction_stats(flow, top1, 1);
        CHECK(st.cov_yy == doctest::Approx(1.0));
        CHECK(st.cov_yx == doctest::Approx(0.0));
        CHECK(st.cov_xx == doctest::Approx(0.0));
        CHECK(st.fraction_at_zero == doctest::Approx(0.0));
    }
    // histogram mass always sums to one
    {
        FlowField flow(1, 8, 8, FlowDirection::kForward);
        OffsetTensor top1;
        top1.rows = 64;
        top1.l = 1;
        top1.data.assign(64 * 3, 0.0);
        UniformStream rng(87);
        for (int i = 0; i < 64; ++i) {
            top1.data[i * 3 + 1] = std::floor(rng.next_in(-3.0, 4.0));
            top1.data[i * 3 + 2] = std::floor(rng.next_in(-3.0, 4.0));
        }
        const CorrectionStats st = correction_stats(flow, top1, 1);
        double mass = 0.0;
        for (double m : st.histogram) mass += m;
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("correction support never exceeds the window bound on a real run") {
    const VideoTensor v = shifting_video(3, 18, 18, 1, 1, 2, 97);
    FlowField flow = constant_pair_flow(2, 18, 18, 1.0, 2.0);
    UniformStream rng(98);
    for (double& x : flow.data) x += rng.next_in(-1.0, 1.0);
    AlignmentOptions opts;
    opts.cfg.ws = 5;
    opts.cfg.ps = 1;
    opts.cfg.topl = 1;
    opts.cfg.stride1 = 0.5;
    opts.flow_source = FlowSource::kProvided;
    const AlignmentResult res = align_frames(v, opts, &flow);
    const CorrectionStats st =
        correction_stats(res.used_flow, res.top1_offsets, opts.cfg.stride0, opts.cfg.stride1);
    const double bound = opts.cfg.stride1 * (opts.cfg.ws / 2) + 1e-9;
    CHECK(st.bin_min_y * st.bin_width >= -bound);
    CHECK(st.bin_max_y * st.bin_width <= bound);
    CHECK(st.bin_min_x * st.bin_width >= -bound);
    CHECK(st.bin_max_x * st.bin_width <= bound);
    CHECK(st.samples == res.top1_offsets.rows);
}

TEST_CASE("cost models reproduce the analytic counts") {
    CHECK(global_reads_model(3, 13) == std::make_pair(15LL, 507LL));
    CHECK(global_reads_model(1, 1) == std::make_pair(1LL, 1LL));
    CHECK(global_reads_model(3, 3) == std::make_pair(5LL, 27LL));
    CHECK(n3net_memory_factor(3, 1.0, 1.0) == doctest::Approx(18.0));
    CHECK(n3net_memory_factor(1, 1.0, 1.0) == doctest::Approx(2.0));
    CHECK(n3net_memory_factor(7, 1.0, 2.0) == doctest::Approx(61.25));
    CHECK_THROWS_AS(global_reads_model(0, 5), ConfigError);
    CHECK_THROWS_AS(n3net_memory_factor(3, 0.0, 1.0), ConfigError);
}

TEST_CASE("benchmark: deterministic accounting, stride scaling, fused memory win") {
    BenchVideoSpec spec;
    spec.t = 2;
    spec.h = 96;
    spec.w = 96;
    spec.f = 8;
    spec.seed = 3;

    std::vector<BenchCase> grid;
    BenchCase c;
    c.cfg.ws = 9;
    c.cfg.ps = 1;
    c.cfg.topl = 8;
    c.mode = BenchMode::kFused;
    grid.push_back(c); // stride0 = 1
    c.cfg.stride0 = 2;
    grid.push_back(c); // stride0 = 2
    c.cfg.stride0 = 1;
    c.mode = BenchMode::kFullGrid;
    grid.push_back(c);
    c.mode = BenchMode::kReference;
    grid.push_back(c);

    const std::vector<BenchRow> rows = run_benchmark(grid, spec, 3);
    REQUIRE(rows.size() == 4);
    for (const BenchRow& r : rows) {
        CHECK(r.ok);
        CHECK(r.peak_aux_bytes > 0);
    }
    // a quarter of the queries runs strictly faster
    CHECK(rows[1].median_ms < rows[0].median_ms);
    // streaming top-L needs less auxiliary memory than the materialized grid
    CHECK(rows[0].peak_aux_bytes < rows[2].peak_aux_bytes);

    // accounting is deterministic across runs
    const std::vector<BenchRow> again = run_benchmark(grid, spec, 3);
    for (std::size_t i = 0; i < rows.size(); ++i)
        CHECK(rows[i].peak_aux_bytes == again[i].peak_aux_bytes);

    CHECK_THROWS_AS(run_benchmark(grid, spec, 2), ConfigError);

    // a failing cell is reported in place and the run continues
    BenchCase broken;
    broken.cfg.ws = 4; // even window is invalid
    const std::vector<BenchRow> mixed = run_benchmark({broken, grid[0]}, spec, 3);
    REQUIRE(mixed.size() == 2);
    CHECK_FALSE(mixed[0].ok);
    CHECK(!mixed[0].error.empty());
    CHECK(mixed[1].ok);

    const std::string csv = bench_to_csv(rows);
    CHECK(csv.find("mode,ws,wt,ps,stride0,stride1,topl,metric,median_ms,peak_aux_bytes,status") !=
          std::string::npos);
    CHECK(csv.find("reference") != std::string::npos);
}
