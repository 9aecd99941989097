#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck_util.hpp"
#include "snls/aggregate.hpp"
#include "snls/rng.hpp"
#include "snls/search.hpp"

using namespace snls;

namespace {

VideoTensor random_video(int t, int h, int w, int f, std::uint64_t seed) {
    VideoTensor v(t, h, w, f);
    UniformStream rng(seed);
    for (double& x : v.data) x = rng.next_in(-1.0, 1.0);
    return v;
}

} // namespace

TEST_CASE("zero upstream gradient gives zero input gradients") {
    const VideoTensor q = random_video(2, 6, 6, 2, 7);
    const VideoTensor k = random_video(2, 6, 6, 2, 8);
    FlowField ff(2, 6, 6, FlowDirection::kForward);
    FlowField bf(2, 6, 6, FlowDirection::kBackward);
    UniformStream rng(9);
    for (double& x : ff.data) x = rng.next_in(-1.0, 1.0);
    for (double& x : bf.data) x = rng.next_in(-1.0, 1.0);
    SearchConfig cfg;
    cfg.ws = 3;
    cfg.wt = 1;
    cfg.topl = 2;
    const SearchResult res = shifted_nls_forward(q, k, ff, bf, cfg);
    SimilarityTensor zero;
    zero.rows = res.sims.rows;
    zero.cols = res.sims.cols;
    zero.values.assign(res.sims.values.size(), 0.0);
    const SearchGradients g = shifted_nls_backward(zero, res.tape, q, k);
    for (double x : g.grad_q.data) CHECK(x == 0.0);
    for (double x : g.grad_k.data) CHECK(x == 0.0);
    for (double x : g.grad_fflow.data) CHECK(x == 0.0);
    for (double x : g.grad_bflow.data) CHECK(x == 0.0);
}

TEST_CASE("dot-product derivative: dQ = K and dK = Q for a window of one") {
    const VideoTensor q = random_video(1, 5, 5, 3, 17);
    const VideoTensor k = random_video(1, 5, 5, 3, 18);
    SearchConfig cfg;
    cfg.ws = 1;
    cfg.wt = 0;
    cfg.ps = 1;
    cfg.topl = 1;
    cfg.metric = Metric::kInnerProduct;
    const SearchResult res = nls_forward(q, k, cfg);
    SimilarityTensor ones;
    ones.rows = res.sims.rows;
    ones.cols = 1;
    ones.values.assign(std::size_t(res.sims.rows), 1.0);
    const SearchGradients g = shifted_nls_backward(ones, res.tape, q, k);
    CHECK(g.grad_q.data == k.data);
    CHECK(g.grad_k.data == q.data);
}

TEST_CASE("search gradients match central finite differences") {
    int done = 0;
    std::uint64_t seed = 100;
    while (done < 8 && seed < 400) {
        auto inst = gradcheck::draw_search_instance(seed++);
        if (!inst) continue;
        const double err = gradcheck::search_fd_max_err(*inst);
        CHECK(err <= 1e-5);
        ++done;
    }
    CHECK(done == 8);
}

TEST_CASE("flow-composition chain gradients match finite differences") {
    // wt = 2 forces two-step chains through the bilinear flow sampling
    int done = 0;
    std::uint64_t seed = 7000;
    while (done < 3 && seed < 7400) {
        UniformStream rng(seed);
        gradcheck::SearchInstance in;
        in.cfg.ws = 3;
        in.cfg.wt = 2;
        in.cfg.ps = 1;
        in.cfg.stride0 = 2;
        in.cfg.stride1 = 0.5;
        in.cfg.topl = 2;
        in.q = random_video(3, 6, 6, 1, seed * 13 + 1);
        in.k = random_video(3, 6, 6, 1, seed * 13 + 2);
        in.fflow = FlowField(3, 6, 6, FlowDirection::kForward);
        in.bflow = FlowField(3, 6, 6, FlowDirection::kBackward);
        for (double& x : in.fflow.data) x = rng.next_in(-1.2, 1.2);
        for (double& x : in.bflow.data) x = rng.next_in(-1.2, 1.2);
        ++seed;

        // reuse the shared exclusion rules
        SearchConfig probe_cfg = in.cfg;
        probe_cfg.topl = in.cfg.topl + 1;
        const SearchResult probe =
            shifted_nls_forward(in.q, in.k, in.fflow, in.bflow, probe_cfg);
        bool usable = true;
        for (std::int64_t row = 0; row < probe.sims.rows && usable; ++row)
            for (int li = 0; li + 1 < probe_cfg.topl; ++li)
                if (probe.sims.at(row, li) - probe.sims.at(row, li + 1) < 1e-4) usable = false;
        const SearchResult fwd = shifted_nls_forward(in.q, in.k, in.fflow, in.bflow, in.cfg);
        auto near_integer = [](double v) {
            const double fr = v - std::floor(v);
            return fr < 1e-4 || fr > 1.0 - 1e-4;
        };
        for (std::int64_t row = 0; row < fwd.sims.rows && usable; ++row)
            for (int li = 0; li < in.cfg.topl && usable; ++li) {
                const std::size_t cb = fwd.tape.center_base(row, li);
                if (near_integer(fwd.tape.centers[cb + 1]) ||
                    near_integer(fwd.tape.centers[cb + 2]))
                    usable = false;
                const double* ch = fwd.tape.chains.data() + fwd.tape.chain_base(row, li);
                const int links = int(std::abs(fwd.offsets.at(row, li, 0)));
                for (int kk = 1; kk < links && usable; ++kk)
                    if (near_integer(ch[(kk - 1) * 6 + 0]) || near_integer(ch[(kk - 1) * 6 + 1]))
                        usable = false;
            }
        if (!usable) continue;

        in.upstream.rows = fwd.sims.rows;
        in.upstream.cols = in.cfg.topl;
        in.upstream.values.resize(std::size_t(fwd.sims.rows) * in.cfg.topl);
        UniformStream urng(seed * 31);
        for (double& x : in.upstream.values) x = urng.next_in(-1.0, 1.0);

        const double err = gradcheck::search_fd_max_err(in);
        CHECK(err <= 1e-5);
        ++done;
    }
    CHECK(done == 3);
}

TEST_CASE("deterministic and atomic backward modes agree to rounding") {
    auto inst = gradcheck::draw_search_instance(42);
    REQUIRE(inst);
    const SearchResult fwd =
        shifted_nls_forward(inst->q, inst->k, inst->fflow, inst->bflow, inst->cfg);
    ExecPolicy det;
    det.deterministic = true;
    ExecPolicy par;
    par.deterministic = false;
    par.threads = 4;
    const SearchGradients a = shifted_nls_backward(inst->upstream, fwd.tape, inst->q, inst->k, det);
    const SearchGradients b = shifted_nls_backward(inst->upstream, fwd.tape, inst->q, inst->k, par);
    for (std::size_t i = 0; i < a.grad_q.data.size(); ++i)
        CHECK(a.grad_q.data[i] == doctest::Approx(b.grad_q.data[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < a.grad_k.data.size(); ++i)
        CHECK(a.grad_k.data[i] == doctest::Approx(b.grad_k.data[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < a.grad_fflow.data.size(); ++i)
        CHECK(a.grad_fflow.data[i] == doctest::Approx(b.grad_fflow.data[i]).epsilon(1e-12));
}

TEST_CASE("wpsum backward: zero upstream and identity pipeline") {
    const VideoTensor v = random_video(1, 6, 6, 2, 27);
    SearchConfig cfg;
    cfg.ws = 3;
    cfg.ps = 1;
    cfg.stride0 = 1;
    cfg.topl = 1;
    const QueryGrid grid = QueryGrid::over(1, 6, 6, 1);
    WeightTensor w;
    w.rows = grid.rows();
    w.l = 1;
    w.values.assign(std::size_t(grid.rows()), 1.0);
    OffsetTensor off;
    off.rows = grid.rows();
    off.l = 1;
    off.data.assign(std::size_t(grid.rows()) * 3, 0.0);
    const WpsumResult fwd = wpsum(v, w, off, cfg);

    VideoTensor zero(1, 6, 6, 2);
    const AggGradients gz = wpsum_backward(zero, fwd.tape, v, w, off);
    for (double x : gz.grad_v.data) CHECK(x == 0.0);
    for (double x : gz.grad_weights.values) CHECK(x == 0.0);

    const VideoTensor g = random_video(1, 6, 6, 2, 28);
    const AggGradients gi = wpsum_backward(g, fwd.tape, v, w, off);
    CHECK(gi.grad_v.data == g.data); // identity warp passes the gradient through
}

TEST_CASE("wpsum gradients match central finite differences") {
    for (std::uint64_t seed : {501, 502, 503, 504, 505, 506}) {
        gradcheck::AggInstance in = gradcheck::draw_agg_instance(seed);
        const double err = gradcheck::agg_fd_max_err(in);
        CHECK(err <= 1e-5);
    }
}
