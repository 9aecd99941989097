#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "snls/aggregate.hpp"
#include "snls/flow.hpp"
#include "snls/search.hpp"
#include "snls/tensor.hpp"

namespace snls {

enum class FlowSource { kZero, kProvided, kBlockMatching };

struct AlignmentOptions {
    SearchConfig cfg;            // topl must be 1
    FlowSource flow_source = FlowSource::kZero;
    double sigma = 0.0;          // gaussian noise stddev on the 0..255 scale
    std::uint64_t seed = 0;
    int bm_block = 9;            // block-matching parameters
    int bm_radius = 8;
    ExecPolicy policy;
};

struct AlignmentReport {
    std::vector<double> frame_psnr; // one per aligned pair, dB
    double mean_psnr = 0.0;
    SearchConfig cfg;
    std::string flow_source;
    double time_noise_ms = 0.0;
    double time_flow_ms = 0.0;
    double time_search_ms = 0.0;
    double time_aggregate_ms = 0.0;
    double time_metrics_ms = 0.0;
    double time_total_ms = 0.0;
    std::uint64_t peak_aux_bytes = 0;

    double stage_sum_ms() const {
        return time_noise_ms + time_flow_ms + time_search_ms + time_aggregate_ms +
               time_metrics_ms;
    }
    // Line-delimited key=value records, one per frame plus a summary line.
    std::string to_records() const;
    std::string to_csv() const; // frame,psnr rows
};

struct AlignmentResult {
    VideoTensor aligned;        // T-1 frames; frame i approximates input frame i
    AlignmentReport report;
    OffsetTensor top1_offsets;  // concatenated over frame pairs
    FlowField used_flow;        // per-pair flow actually applied (frame i: i -> i+1)
};

// Frame alignment: for every pair (t, t+1) the search runs with the query set
// to the noisy frame t and keys to the noisy frame t+1, aggregation gathers
// the noise-free frame t+1 values with top-1 weights, and PSNR compares the
// noise-free aligned frame against the noise-free frame t.
AlignmentResult align_frames(const VideoTensor& clean, const AlignmentOptions& opts,
                             const FlowField* provided_flow = nullptr);

struct CorrectionStats {
    double bin_width = 1.0;
    int bin_min_y = 0, bin_max_y = 0, bin_min_x = 0, bin_max_x = 0;
    std::vector<double> histogram; // mass per bin, sums to 1; row-major over y bins
    double fraction_at_zero = 0.0;
    double cov_yy = 0.0, cov_yx = 0.0, cov_xx = 0.0;
    double quantile68 = 0.0, quantile90 = 0.0; // empirical radii of |correction|
    std::int64_t samples = 0;

    int bins_y() const { return bin_max_y - bin_min_y + 1; }
    int bins_x() const { return bin_max_x - bin_min_x + 1; }
    double mass(int by, int bx) const {
        return histogram[std::size_t(by - bin_min_y) * bins_x() + (bx - bin_min_x)];
    }
};

// Distribution of the spatial corrections (selected offset minus predicted
// shift) over top-1 matches with |dt| <= 1, the matches whose window shift
// came directly from `flow_in`. Corrections are binned at `bin_width`
// resolution (pass the key stride).
CorrectionStats correction_stats(const FlowField& flow_in, const OffsetTensor& top1,
                                 int stride0, double bin_width = 1.0);

// Global memory reads needed for a tile of `q_tile` queries with window size
// ws: overlapping windows need q_tile + ws - 1 reads, shifted non-overlapping
// windows need q_tile * ws^2.
std::pair<long long, long long> global_reads_model(int q_tile, int ws);

// Memory growth factor of a patch-database search relative to the videos:
// ps^2 * (1/sq^2 + 1/sk^2).
double n3net_memory_factor(int ps, double sq, double sk);

enum class BenchMode { kReference, kFullGrid, kFused };

struct BenchCase {
    SearchConfig cfg;
    BenchMode mode = BenchMode::kFused;
};

struct BenchVideoSpec {
    int t = 5, h = 64, w = 64, f = 8;
    std::uint64_t seed = 0;
};

struct BenchRow {
    BenchCase bench;
    double median_ms = 0.0;
    std::uint64_t peak_aux_bytes = 0;
    bool ok = false;
    std::string error;
};

// Times each search configuration on a seeded random video (median over
// `repeats` runs after one warm-up; setup and I/O excluded) and reports the
// peak auxiliary allocation from the library's accounting. A failing cell is
// recorded and the run continues.
std::vector<BenchRow> run_benchmark(const std::vector<BenchCase>& grid,
                                    const BenchVideoSpec& spec, int repeats, int threads = 0);

std::string bench_to_csv(const std::vector<BenchRow>& rows);

const char* bench_mode_name(BenchMode m);
const char* metric_name(Metric m);

} // namespace snls
