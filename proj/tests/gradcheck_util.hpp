#pragma once

// Shared finite-difference harness for the gradient tests and the acceptance
// suite. The oracle is central differences on the scalar objective
// sum(u .* selected_similarities) for the search and sum(g .* wpsum) for the
// aggregation; it never touches the analytic backward path.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "snls/aggregate.hpp"
#include "snls/rng.hpp"
#include "snls/search.hpp"

namespace gradcheck {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

struct SearchInstance {
    snls::VideoTensor q, k;
    snls::FlowField fflow, bflow;
    snls::SearchConfig cfg;
    snls::SimilarityTensor upstream;
};

// Random instance within the small-instance envelope. Returns nothing when
// the draw is tie-adjacent (top L and L+1 window values closer than 1e-4 for
// some query) or a sampled key coordinate sits within 1e-4 of the bilinear
// interpolation kinks at integer coordinates.
inline std::optional<SearchInstance> draw_search_instance(std::uint64_t seed) {
    snls::UniformStream rng(seed);
    SearchInstance in;
    const int t = 1 + int(rng.next_bits() % 2);
    const int h = 5 + int(rng.next_bits() % 4);
    const int w = 5 + int(rng.next_bits() % 4);
    const int f = 1 + int(rng.next_bits() % 2);
    in.cfg.ws = 1 + 2 * int(rng.next_bits() % 3); // 1, 3, 5
    in.cfg.wt = t > 1 ? int(rng.next_bits() % 2) : 0;
    in.cfg.ps = 1 + 2 * int(rng.next_bits() % 2); // 1, 3
    in.cfg.stride0 = 1 + int(rng.next_bits() % 2);
    in.cfg.stride1 = (rng.next_bits() % 2) ? 1.0 : 0.5;
    in.cfg.metric = (rng.next_bits() % 2) ? snls::Metric::kNegSquaredL2
                                          : snls::Metric::kInnerProduct;
    const int min_frames = in.cfg.wt > 0 ? 2 : 1; // frames valid at every query
    const int max_l = std::max(1, min_frames * in.cfg.ws * in.cfg.ws - 1);
    in.cfg.topl = 1 + int(rng.next_bits() % std::min(3, max_l));

    in.q = snls::VideoTensor(t, h, w, f);
    in.k = snls::VideoTensor(t, h, w, f);
    for (double& x : in.q.data) x = rng.next_in(-1.0, 1.0);
    for (double& x : in.k.data) x = rng.next_in(-1.0, 1.0);
    in.fflow = snls::FlowField(t, h, w, snls::FlowDirection::kForward);
    in.bflow = snls::FlowField(t, h, w, snls::FlowDirection::kBackward);
    for (double& x : in.fflow.data) x = rng.next_in(-1.5, 1.5);
    for (double& x : in.bflow.data) x = rng.next_in(-1.5, 1.5);

    // tie exclusion: probe one extra neighbor
    snls::SearchConfig probe_cfg = in.cfg;
    probe_cfg.topl = std::min(in.cfg.topl + 1, min_frames * in.cfg.ws * in.cfg.ws);
    const snls::SearchResult probe =
        snls::shifted_nls_forward(in.q, in.k, in.fflow, in.bflow, probe_cfg);
    for (std::int64_t row = 0; row < probe.sims.rows; ++row)
        for (int li = 0; li + 1 < probe_cfg.topl; ++li)
            if (probe.sims.at(row, li) - probe.sims.at(row, li + 1) < 1e-4)
                return std::nullopt;

    // kink exclusion: selected centers and chain positions off integers
    const snls::SearchResult fwd =
        snls::shifted_nls_forward(in.q, in.k, in.fflow, in.bflow, in.cfg);
    auto near_integer = [](double v) {
        const double fr = v - std::floor(v);
        return fr < 1e-4 || fr > 1.0 - 1e-4;
    };
    for (std::int64_t row = 0; row < fwd.sims.rows; ++row)
        for (int li = 0; li < in.cfg.topl; ++li) {
            const std::size_t cb = fwd.tape.center_base(row, li);
            if (near_integer(fwd.tape.centers[cb + 1]) || near_integer(fwd.tape.centers[cb + 2]))
                return std::nullopt;
            if (fwd.tape.chain_stride > 0) {
                const double* ch = fwd.tape.chains.data() + fwd.tape.chain_base(row, li);
                const int links = int(std::abs(fwd.offsets.at(row, li, 0)));
                for (int kk = 1; kk < links; ++kk)
                    if (near_integer(ch[(kk - 1) * 6 + 0]) || near_integer(ch[(kk - 1) * 6 + 1]))
                        return std::nullopt;
            }
        }

    in.upstream.rows = fwd.sims.rows;
    in.upstream.cols = in.cfg.topl;
    in.upstream.values.resize(std::size_t(fwd.sims.rows) * in.cfg.topl);
    for (double& x : in.upstream.values) x = rng.next_in(-1.0, 1.0);
    return in;
}

inline double search_objective(const SearchInstance& in) {
    const snls::SearchResult r =
        snls::shifted_nls_forward(in.q, in.k, in.fflow, in.bflow, in.cfg);
    double o = 0.0;
    for (std::size_t i = 0; i < r.sims.values.size(); ++i)
        o += in.upstream.values[i] * r.sims.values[i];
    return o;
}

// Max relative error of the analytic search gradients against central
// differences with step h over every element of q, k and both flows.
inline double search_fd_max_err(SearchInstance in, double h = 1e-6) {
    const snls::SearchResult fwd =
        snls::shifted_nls_forward(in.q, in.k, in.fflow, in.bflow, in.cfg);
    const snls::SearchGradients g =
        snls::shifted_nls_backward(in.upstream, fwd.tape, in.q, in.k);

    double worst = 0.0;
    auto probe = [&](double& slot, double analytic) {
        const double saved = slot;
        slot = saved + h;
        const double up = search_objective(in);
        slot = saved - h;
        const double dn = search_objective(in);
        slot = saved;
        worst = std::max(worst, rel_err(analytic, (up - dn) / (2.0 * h)));
    };
    for (std::size_t i = 0; i < in.q.data.size(); ++i) probe(in.q.data[i], g.grad_q.data[i]);
    for (std::size_t i = 0; i < in.k.data.size(); ++i) probe(in.k.data[i], g.grad_k.data[i]);
    for (std::size_t i = 0; i < in.fflow.data.size(); ++i)
        probe(in.fflow.data[i], g.grad_fflow.data[i]);
    for (std::size_t i = 0; i < in.bflow.data.size(); ++i)
        probe(in.bflow.data[i], g.grad_bflow.data[i]);
    return worst;
}

struct AggInstance {
    snls::VideoTensor v;
    snls::WeightTensor weights;
    snls::OffsetTensor offsets;
    snls::SearchConfig cfg;
    snls::VideoTensor upstream;
};

// Aggregation instance built from a real search so offsets are realistic.
inline AggInstance draw_agg_instance(std::uint64_t seed) {
    snls::UniformStream rng(seed);
    AggInstance in;
    const int t = 1 + int(rng.next_bits() % 2);
    const int h = 5 + int(rng.next_bits() % 4);
    const int w = 5 + int(rng.next_bits() % 4);
    const int f = 1 + int(rng.next_bits() % 2);
    in.cfg.ws = 3;
    in.cfg.wt = t > 1 ? int(rng.next_bits() % 2) : 0;
    in.cfg.ps = (rng.next_bits() % 2) ? 3 : 1;
    in.cfg.stride0 = in.cfg.ps / 2 + 1 + int(rng.next_bits() % 2);
    in.cfg.stride1 = (rng.next_bits() % 2) ? 1.0 : 0.5;
    in.cfg.topl = 1 + int(rng.next_bits() % 3);

    in.v = snls::VideoTensor(t, h, w, f);
    for (double& x : in.v.data) x = rng.next_in(-1.0, 1.0);
    snls::VideoTensor q(t, h, w, f);
    for (double& x : q.data) x = rng.next_in(-1.0, 1.0);
    snls::FlowField ff(t, h, w, snls::FlowDirection::kForward);
    snls::FlowField bf(t, h, w, snls::FlowDirection::kBackward);
    for (double& x : ff.data) x = rng.next_in(-1.0, 1.0);
    for (double& x : bf.data) x = rng.next_in(-1.0, 1.0);
    const snls::SearchResult sr = snls::shifted_nls_forward(q, in.v, ff, bf, in.cfg);
    in.offsets = sr.offsets;
    in.weights = snls::softmax_rows(sr.sims, in.cfg.softmax_scale);
    in.upstream = snls::VideoTensor(t, h, w, f);
    for (double& x : in.upstream.data) x = rng.next_in(-1.0, 1.0);
    return in;
}

inline double agg_objective(const AggInstance& in) {
    const snls::WpsumResult r = snls::wpsum(in.v, in.weights, in.offsets, in.cfg);
    double o = 0.0;
    for (std::size_t i = 0; i < r.video.data.size(); ++i)
        o += in.upstream.data[i] * r.video.data[i];
    return o;
}

inline double agg_fd_max_err(AggInstance in, double h = 1e-6) {
    const snls::WpsumResult fwd = snls::wpsum(in.v, in.weights, in.offsets, in.cfg);
    const snls::AggGradients g =
        snls::wpsum_backward(in.upstream, fwd.tape, in.v, in.weights, in.offsets);

    double worst = 0.0;
    auto probe = [&](double& slot, double analytic) {
        const double saved = slot;
        slot = saved + h;
        const double up = agg_objective(in);
        slot = saved - h;
        const double dn = agg_objective(in);
        slot = saved;
        worst = std::max(worst, rel_err(analytic, (up - dn) / (2.0 * h)));
    };
    for (std::size_t i = 0; i < in.v.data.size(); ++i) probe(in.v.data[i], g.grad_v.data[i]);
    for (std::size_t i = 0; i < in.weights.values.size(); ++i)
        probe(in.weights.values[i], g.grad_weights.values[i]);
    return worst;
}

} // namespace gradcheck
