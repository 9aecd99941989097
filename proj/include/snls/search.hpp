#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "snls/flow.hpp"
#include "snls/tensor.hpp"

namespace snls {

enum class Metric { kInnerProduct, kNegSquaredL2 };

// Both metrics order larger-is-better: inner product directly, squared L2
// negated so that an exact match scores 0.

struct SearchConfig {
    int ws = 9;          // spatial window size, odd
    int wt = 0;          // temporal radius: frames searched per side
    int ps = 1;          // patch size, odd
    int stride0 = 1;     // query stride
    double stride1 = 1.0; // key stride; fractional values give sub-pixel grids
    int topl = 1;        // neighbors retained per query
    Metric metric = Metric::kNegSquaredL2;
    double softmax_scale = 1.0; // beta forwarded to softmax_rows downstream

    void validate() const; // throws ConfigError

    // Aggregation covers every output pixel exactly when this holds; wpsum
    // and gather_stack refuse configs that violate it.
    bool hole_free() const { return (ps - 1) / 2 < stride0; }

    int window_frames() const { return 2 * wt + 1; }
    int window_slots() const { return window_frames() * ws * ws; }
};

enum class SearchMode { kFused, kFullGrid };

struct ExecPolicy {
    int threads = 0;            // 0: all available
    bool deterministic = true;  // fixed reduction order; bitwise-stable
    SearchMode mode = SearchMode::kFused;

    int resolved_threads() const;
};

// Query coordinates are the integer grid {0, stride0, 2*stride0, ...} per
// frame; rows are ordered (t, y, x), x fastest.
struct QueryGrid {
    int t = 0, nh = 0, nw = 0, stride = 1;

    static QueryGrid over(int t, int h, int w, int stride);
    std::int64_t rows() const { return std::int64_t(t) * nh * nw; }
    void coords(std::int64_t row, int& qt, int& qy, int& qx) const;
};

// Temporal scan order: 0, -1, +1, -2, +2, ... out to +-wt. Window slots are
// enumerated frame-major in this order, then dy, then dx ascending; that index
// is the tie-break for equal similarities.
std::vector<int> temporal_scan_order(int wt);

// Either a full window grid (cols == window_slots) or a selected form
// (cols == topl, rows sorted best-first). Invalid window slots (frames
// clamped off the clip) hold -infinity in the full form.
struct SimilarityTensor {
    std::int64_t rows = 0;
    int cols = 0;
    std::vector<double> values;

    double at(std::int64_t r, int c) const { return values[std::size_t(r) * cols + c]; }
    double& at(std::int64_t r, int c) { return values[std::size_t(r) * cols + c]; }
};

// Per (query, l) displacement (dt, dy, dx) from the query coordinate to the
// selected key coordinate. dt is integer-valued; dy, dx may be fractional.
struct OffsetTensor {
    std::int64_t rows = 0;
    int l = 0;
    std::vector<double> data;

    double at(std::int64_t r, int li, int k) const {
        return data[(std::size_t(r) * l + li) * 3 + k];
    }
    double& at(std::int64_t r, int li, int k) {
        return data[(std::size_t(r) * l + li) * 3 + k];
    }
};

// Saved forward state: exact fractional key centers per selected entry plus
// the flow-composition chain (sampling positions and spatial Jacobians) for
// |dt| > 1 entries. Enough to replay the selected similarities bitwise and to
// run the backward pass without the flow fields.
struct SearchTape {
    SearchConfig cfg;
    QueryGrid grid;
    int vid_t = 0, vid_h = 0, vid_w = 0, vid_f = 0;
    // (kt, ky, kx) per (row, l), l fastest.
    std::vector<double> centers;
    // Chain links for |dt| >= 2, fixed stride of max(wt-1, 0) links per
    // (row, l); each link is (pos_y, pos_x, J00, J01, J10, J11).
    std::vector<double> chains;
    int chain_stride = 0;

    std::size_t center_base(std::int64_t row, int li) const {
        return (std::size_t(row) * cfg.topl + li) * 3;
    }
    std::size_t chain_base(std::int64_t row, int li) const {
        return (std::size_t(row) * cfg.topl + li) * std::size_t(chain_stride) * 6;
    }
};

struct SearchResult {
    SimilarityTensor sims;  // rows x topl, best-first
    OffsetTensor offsets;   // rows x topl x 3
    SearchTape tape;
};

// Windowed patch-similarity search with the window center of every (query,
// frame) pair shifted by the accumulated predicted offset: the raw forward
// flow for dt >= 0 at the query pixel (dt = 0 searches the paired frame of K
// at the flow-shifted position, which is what frame-pair alignment needs and
// reduces to an unshifted search when the flow is zero), the raw backward
// flow for dt = -1, and chained bilinear composition beyond one step. Grid
// points are spaced stride1 apart; fractional key coordinates are read
// bilinearly with edge reflection. Per query the topl best slots are kept.
SearchResult shifted_nls_forward(const VideoTensor& q, const VideoTensor& k,
                                 const FlowField& fflow, const FlowField& bflow,
                                 const SearchConfig& cfg, const ExecPolicy& policy = {});

// Same search with both flows identically zero.
SearchResult nls_forward(const VideoTensor& q, const VideoTensor& k, const SearchConfig& cfg,
                         const ExecPolicy& policy = {});

// Per-row selection of the L best entries (larger is better, ties by lower
// column index). `full_offsets` must pair columns with `full`. Entries equal
// to -infinity are invalid and may not be selected.
std::pair<SimilarityTensor, OffsetTensor> top_l(const SimilarityTensor& full,
                                                const OffsetTensor& full_offsets, int topl);

struct SearchGradients {
    VideoTensor grad_q, grad_k;
    FlowField grad_fflow, grad_bflow;
};

// Exact vector-Jacobian product of the selected similarity values. Gradients
// flow only into selected entries (top-L subgradient): into query patch
// pixels, into the 4 bilinear taps of every sampled key pixel, and into the
// flow entries that produced the window shift. In deterministic mode the
// scatter runs in query order on one thread; otherwise rows run in parallel
// with atomic accumulation, which may differ by floating-point association.
SearchGradients shifted_nls_backward(const SimilarityTensor& grad_selected,
                                     const SearchTape& tape, const VideoTensor& q,
                                     const VideoTensor& k, const ExecPolicy& policy = {});

// Recomputes the selected similarity values from the tape; bitwise-equal to
// the forward output.
SimilarityTensor replay_similarities(const SearchTape& tape, const VideoTensor& q,
                                     const VideoTensor& k);

namespace detail {

// Accumulated displacement from query pixel (qy, qx) in frame qt to frame
// qt + dt. dt == 0 reads the forward field directly, like dt == +1; |dt| > 1
// chains per-step fields sampled at the displaced position. When `links` is
// non-null it receives |dt|-1 chain links of 6 doubles each.
void accumulate_shift(const FlowField& fflow, const FlowField& bflow, int qt, int qy, int qx,
                      int dt, double& dy, double& dx, double* links);

// Patch similarity between the query patch at integer (qt, qy, qx) and the
// key patch at fractional (kt, ky, kx). Accumulation order is (dy, dx,
// channel); this order is part of the bitwise determinism contract.
double patch_similarity(const VideoTensor& q, const VideoTensor& k, int qt, int qy, int qx,
                        int kt, double ky, double kx, int ps, Metric metric);

} // namespace detail

} // namespace snls
