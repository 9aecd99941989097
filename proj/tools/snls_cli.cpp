#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "snls/harness.hpp"
#include "snls/memory.hpp"
#include "snls/reference.hpp"
#include "snls/video_io.hpp"

namespace fs = std::filesystem;
using namespace snls;

namespace {

struct SearchFlags {
    int ws = 9, wt = 0, ps = 1, stride0 = 1, topl = 1, threads = 0;
    double stride1 = 1.0, beta = 1.0;
    std::string metric = "l2";
    std::string mode = "fused";

    SearchConfig to_config() const {
        SearchConfig cfg;
        cfg.ws = ws;
        cfg.wt = wt;
        cfg.ps = ps;
        cfg.stride0 = stride0;
        cfg.stride1 = stride1;
        cfg.topl = topl;
        cfg.softmax_scale = beta;
        if (metric == "l2")
            cfg.metric = Metric::kNegSquaredL2;
        else if (metric == "ip")
            cfg.metric = Metric::kInnerProduct;
        else
            throw ConfigError("unknown metric '" + metric + "' (expected l2 or ip)");
        return cfg;
    }

    ExecPolicy to_policy() const {
        ExecPolicy p;
        p.threads = threads;
        p.deterministic = true;
        if (mode == "fused")
            p.mode = SearchMode::kFused;
        else if (mode == "fullgrid")
            p.mode = SearchMode::kFullGrid;
        else
            throw ConfigError("unknown mode '" + mode + "' (expected fused or fullgrid)");
        return p;
    }
};

void add_search_flags(CLI::App* cmd, SearchFlags& f) {
    cmd->add_option("--ws", f.ws, "spatial window size (odd)");
    cmd->add_option("--wt", f.wt, "temporal radius (frames per side)");
    cmd->add_option("--ps", f.ps, "patch size (odd)");
    cmd->add_option("--stride0", f.stride0, "query stride");
    cmd->add_option("--stride1", f.stride1, "key stride (may be fractional)");
    cmd->add_option("--topl", f.topl, "neighbors kept per query");
    cmd->add_option("--metric", f.metric, "similarity metric: l2 or ip");
    cmd->add_option("--beta", f.beta, "softmax scale for aggregation weights");
    cmd->add_option("--mode", f.mode, "search mode: fused or fullgrid");
    cmd->add_option("--threads", f.threads, "worker threads (0 = all)");
}

VideoTensor flow_to_tensor(const FlowField& f) {
    VideoTensor v(f.t, f.h, f.w, 2);
    v.data = f.data;
    return v;
}

FlowField flow_from_tensor(const VideoTensor& v, FlowDirection dir) {
    if (v.f != 2) throw IoError("flow tensor must have 2 channels (dy, dx)");
    FlowField f(v.t, v.h, v.w, dir);
    f.data = v.data;
    return f;
}

FlowField load_flow_any(const std::string& path, FlowDirection dir) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".flo") {
        FlowField f = read_flo(path);
        f.direction = dir;
        return f;
    }
    return flow_from_tensor(load_raw(path), dir);
}

VideoTensor sims_to_tensor(const SimilarityTensor& s) {
    VideoTensor v(int(s.rows), s.cols, 1, 1);
    v.data = s.values;
    return v;
}

VideoTensor offsets_to_tensor(const OffsetTensor& o) {
    VideoTensor v(int(o.rows), o.l, 3, 1);
    v.data = o.data;
    return v;
}

int run_align(const SearchFlags& flags, const std::string& frames, const std::string& flow_kind,
              const std::string& flow_file, const std::string& flo_dir, double sigma,
              std::uint64_t seed, int block, int radius, const std::string& out_aligned,
              const std::string& out_offsets, const std::string& out_report,
              const std::string& save_frames, bool csv) {
    AlignmentOptions opts;
    opts.cfg = flags.to_config();
    opts.policy = flags.to_policy();
    opts.sigma = sigma;
    opts.seed = seed;
    opts.bm_block = block;
    opts.bm_radius = radius;

    const VideoTensor video = load_video(frames);
    FlowField provided;
    const FlowField* provided_ptr = nullptr;
    if (flow_kind == "zero") {
        opts.flow_source = FlowSource::kZero;
    } else if (flow_kind == "bm") {
        opts.flow_source = FlowSource::kBlockMatching;
    } else if (flow_kind == "file") {
        opts.flow_source = FlowSource::kProvided;
        if (!flow_file.empty()) {
            provided = load_flow_any(flow_file, FlowDirection::kForward);
        } else if (!flo_dir.empty()) {
            std::vector<std::string> names;
            for (const auto& e : fs::directory_iterator(flo_dir))
                if (e.is_regular_file() && e.path().extension() == ".flo")
                    names.push_back(e.path().string());
            std::sort(names.begin(), names.end());
            if (int(names.size()) < video.t - 1)
                throw IoError(flo_dir + ": need one .flo per frame pair");
            provided = FlowField(video.t - 1, video.h, video.w);
            for (int ti = 0; ti < video.t - 1; ++ti) {
                const FlowField f = read_flo(names[ti]);
                if (f.h != video.h || f.w != video.w)
                    throw IoError(names[ti] + ": flow size does not match the frames");
                std::copy(f.data.begin(), f.data.end(),
                          provided.data.begin() + std::size_t(ti) * f.data.size());
            }
        } else {
            throw ConfigError("--flow file needs --flow-file or --flo-dir");
        }
        provided_ptr = &provided;
    } else {
        throw ConfigError("unknown flow source '" + flow_kind + "' (expected zero, bm or file)");
    }

    const AlignmentResult res = align_frames(video, opts, provided_ptr);
    std::cout << res.report.to_records();
    if (csv) std::cout << res.report.to_csv();
    if (!out_aligned.empty()) save_raw(res.aligned, out_aligned);
    if (!out_offsets.empty()) save_raw(offsets_to_tensor(res.top1_offsets), out_offsets);
    if (!save_frames.empty()) save_png_dir(res.aligned, save_frames);
    if (!out_report.empty()) {
        std::ofstream os(out_report, std::ios::trunc);
        if (!os) throw IoError("cannot open " + out_report + " for writing");
        os << res.report.to_records();
        if (csv) os << res.report.to_csv();
    }
    return 0;
}

int run_search(const SearchFlags& flags, const std::string& q_path, const std::string& k_path,
               const std::string& fflow_path, const std::string& bflow_path,
               const std::string& out_dists, const std::string& out_inds) {
    const VideoTensor q = load_video(q_path);
    const VideoTensor k = load_video(k_path);
    const SearchConfig cfg = flags.to_config();
    const ExecPolicy policy = flags.to_policy();

    FlowField ff = fflow_path.empty() ? FlowField(q.t, q.h, q.w, FlowDirection::kForward)
                                      : load_flow_any(fflow_path, FlowDirection::kForward);
    FlowField bf = bflow_path.empty() ? FlowField(q.t, q.h, q.w, FlowDirection::kBackward)
                                      : load_flow_any(bflow_path, FlowDirection::kBackward);
    const SearchResult res = shifted_nls_forward(q, k, ff, bf, cfg, policy);
    std::cout << "search rows=" << res.sims.rows << " topl=" << cfg.topl
              << " peak_aux_bytes=" << memory::peak() << "\n";
    if (!out_dists.empty()) save_raw(sims_to_tensor(res.sims), out_dists);
    if (!out_inds.empty()) save_raw(offsets_to_tensor(res.offsets), out_inds);
    return 0;
}

int run_flow_estimate(const std::string& a_path, const std::string& b_path, int block, int radius,
                      const std::string& out) {
    const VideoTensor a = load_video(a_path);
    const VideoTensor b = load_video(b_path);
    const FlowField flow = estimate_flow_block_matching(a, b, block, radius);
    if (out.size() > 4 && out.substr(out.size() - 4) == ".flo")
        write_flo(flow, out);
    else
        save_raw(flow_to_tensor(flow), out);
    std::cout << "flow mean_abs=" << mean_abs_flow(flow) << "\n";
    return 0;
}

int run_flow_convert(const std::string& in, const std::string& out) {
    const FlowField flow = load_flow_any(in, FlowDirection::kForward);
    if (out.size() > 4 && out.substr(out.size() - 4) == ".flo")
        write_flo(flow, out);
    else
        save_raw(flow_to_tensor(flow), out);
    return 0;
}

BenchMode parse_bench_mode(const std::string& s) {
    if (s == "reference") return BenchMode::kReference;
    if (s == "fullgrid") return BenchMode::kFullGrid;
    if (s == "fused") return BenchMode::kFused;
    throw ConfigError("unknown bench mode '" + s + "'");
}

// One config per line, `key=value` pairs separated by spaces; `#` comments.
std::vector<BenchCase> parse_bench_grid(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<BenchCase> cases;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string tok;
        BenchCase bc;
        bool any = false;
        while (ls >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos)
                throw IoError(path + ": malformed token '" + tok + "'");
            const std::string key = tok.substr(0, eq);
            const std::string val = tok.substr(eq + 1);
            any = true;
            if (key == "ws") bc.cfg.ws = std::stoi(val);
            else if (key == "wt") bc.cfg.wt = std::stoi(val);
            else if (key == "ps") bc.cfg.ps = std::stoi(val);
            else if (key == "stride0") bc.cfg.stride0 = std::stoi(val);
            else if (key == "stride1") bc.cfg.stride1 = std::stod(val);
            else if (key == "topl") bc.cfg.topl = std::stoi(val);
            else if (key == "metric")
                bc.cfg.metric = val == "ip" ? Metric::kInnerProduct : Metric::kNegSquaredL2;
            else if (key == "mode") bc.mode = parse_bench_mode(val);
            else throw IoError(path + ": unknown key '" + key + "'");
        }
        if (any) cases.push_back(bc);
    }
    if (cases.empty()) throw IoError(path + ": no configs found");
    return cases;
}

int run_bench(const std::string& grid_path, const std::string& shape, std::uint64_t seed,
              int repeats, int threads, const std::string& out) {
    BenchVideoSpec spec;
    spec.seed = seed;
    if (!shape.empty()) {
        if (std::sscanf(shape.c_str(), "%dx%dx%dx%d", &spec.t, &spec.h, &spec.w, &spec.f) != 4)
            throw ConfigError("--shape expects TxHxWxF, e.g. 5x64x64x8");
    }
    const std::vector<BenchRow> rows = run_benchmark(parse_bench_grid(grid_path), spec, repeats,
                                                     threads);
    const std::string csv = bench_to_csv(rows);
    std::cout << csv;
    if (!out.empty()) {
        std::ofstream os(out, std::ios::trunc);
        if (!os) throw IoError("cannot open " + out + " for writing");
        os << csv;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"shifted non-local search for space-time attention"};
    app.require_subcommand(1);
    std::function<int()> action;

    // align
    auto* align = app.add_subcommand("align", "align adjacent frames and report PSNR");
    static SearchFlags align_flags;
    align_flags.ws = 11;
    align_flags.ps = 3;
    align_flags.stride0 = 2;
    static std::string al_frames, al_flow = "zero", al_flow_file, al_flo_dir;
    static std::string al_out_aligned, al_out_offsets, al_out_report, al_save_frames;
    static double al_sigma = 0.0;
    static std::uint64_t al_seed = 0;
    static int al_block = 9, al_radius = 8;
    static bool al_csv = false;
    align->add_option("--frames", al_frames, "input frames: PNG directory or raw tensor")
        ->required();
    add_search_flags(align, align_flags);
    align->add_option("--flow", al_flow, "flow source: zero, bm or file");
    align->add_option("--flow-file", al_flow_file, "raw (T-1,H,W,2) flow tensor for --flow file");
    align->add_option("--flo-dir", al_flo_dir, "directory of per-pair .flo files for --flow file");
    align->add_option("--sigma", al_sigma, "gaussian noise stddev on the 0..255 scale");
    align->add_option("--seed", al_seed, "noise seed");
    align->add_option("--block", al_block, "block-matching block size");
    align->add_option("--radius", al_radius, "block-matching search radius");
    align->add_option("--out-aligned", al_out_aligned, "write aligned frames as a raw tensor");
    align->add_option("--out-offsets", al_out_offsets, "write top-1 offsets as a raw tensor");
    align->add_option("--out-report", al_out_report, "write the report records to a file");
    align->add_option("--save-frames", al_save_frames, "write aligned frames as PNGs");
    align->add_flag("--csv", al_csv, "also emit a frame,psnr CSV table");
    align->callback([&]() {
        action = []() {
            return run_align(align_flags, al_frames, al_flow, al_flow_file, al_flo_dir, al_sigma,
                             al_seed, al_block, al_radius, al_out_aligned, al_out_offsets,
                             al_out_report, al_save_frames, al_csv);
        };
    });

    // search
    auto* search = app.add_subcommand("search", "run the search and dump similarities/offsets");
    static SearchFlags search_flags;
    static std::string se_q, se_k, se_fflow, se_bflow, se_out_dists, se_out_inds;
    search->add_option("--q", se_q, "query video (raw tensor or PNG directory)")->required();
    search->add_option("--k", se_k, "key video (raw tensor or PNG directory)")->required();
    add_search_flags(search, search_flags);
    search->add_option("--flow,--fflow", se_fflow, "forward flow (.flo or raw tensor)");
    search->add_option("--bflow", se_bflow, "backward flow (.flo or raw tensor)");
    search->add_option("--out-dists", se_out_dists, "write selected similarities (rows,L,1,1)");
    search->add_option("--out-inds", se_out_inds, "write selected offsets (rows,L,3,1)");
    search->callback([&]() {
        action = []() {
            return run_search(search_flags, se_q, se_k, se_fflow, se_bflow, se_out_dists,
                              se_out_inds);
        };
    });

    // flow
    auto* flow = app.add_subcommand("flow", "flow estimation and file conversion");
    flow->require_subcommand(1);
    auto* fest = flow->add_subcommand("estimate", "block-matching flow between two frames");
    static std::string fe_a, fe_b, fe_out = "flow.flo";
    static int fe_block = 9, fe_radius = 8;
    fest->add_option("--a", fe_a, "first frame (PNG or raw tensor)")->required();
    fest->add_option("--b", fe_b, "second frame (PNG or raw tensor)")->required();
    fest->add_option("--block", fe_block, "odd block size");
    fest->add_option("--radius", fe_radius, "integer search radius");
    fest->add_option("--out", fe_out, "output path (.flo or raw tensor)");
    fest->callback([&]() {
        action = []() { return run_flow_estimate(fe_a, fe_b, fe_block, fe_radius, fe_out); };
    });
    auto* fconv = flow->add_subcommand("convert", "convert between .flo and raw flow tensors");
    static std::string fc_in, fc_out;
    fconv->add_option("--in", fc_in, "input flow (.flo or raw tensor)")->required();
    fconv->add_option("--out", fc_out, "output flow (.flo or raw tensor)")->required();
    fconv->callback([&]() {
        action = []() { return run_flow_convert(fc_in, fc_out); };
    });

    // bench
    auto* bench = app.add_subcommand("bench", "time search configs and report peak memory");
    static std::string be_grid, be_shape, be_out;
    static std::uint64_t be_seed = 0;
    static int be_repeats = 5, be_threads = 0;
    bench->add_option("--grid", be_grid, "config grid file, one key=value line per config")
        ->required();
    bench->add_option("--shape", be_shape, "video shape TxHxWxF");
    bench->add_option("--seed", be_seed, "video seed");
    bench->add_option("--repeats", be_repeats, "timed repeats (>= 3)");
    bench->add_option("--threads", be_threads, "worker threads (0 = all)");
    bench->add_option("--out", be_out, "also write the CSV table to a file");
    bench->callback([&]() {
        action = []() { return run_bench(be_grid, be_shape, be_seed, be_repeats, be_threads,
                                         be_out); };
    });

    // model
    auto* model = app.add_subcommand("model", "analytic cost models");
    model->require_subcommand(1);
    auto* reads = model->add_subcommand("reads", "global reads: overlapping vs shifted windows");
    static int mr_q = 3, mr_ws = 13;
    reads->add_option("--q", mr_q, "tile size in queries")->required();
    reads->add_option("--ws", mr_ws, "window size")->required();
    reads->callback([&]() {
        action = []() {
            const auto [overlap, shifted] = global_reads_model(mr_q, mr_ws);
            std::cout << overlap << " " << shifted << "\n";
            return 0;
        };
    });
    auto* n3mem = model->add_subcommand("n3mem", "patch-database memory growth factor");
    static int mm_ps = 3;
    static double mm_sq = 1.0, mm_sk = 1.0;
    n3mem->add_option("--ps", mm_ps, "patch size")->required();
    n3mem->add_option("--sq", mm_sq, "query stride");
    n3mem->add_option("--sk", mm_sk, "key stride");
    n3mem->callback([&]() {
        action = []() {
            std::printf("%g\n", n3net_memory_factor(mm_ps, mm_sq, mm_sk));
            return 0;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        return action ? action() : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
