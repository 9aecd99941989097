#include "snls/flow.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace snls {

FlowField::FlowField(int t_, int h_, int w_, FlowDirection dir, double fill)
    : t(t_), h(h_), w(w_), direction(dir) {
    if (t < 1 || h < 1 || w < 1) throw DomainError("FlowField: all extents must be at least 1");
    data.assign(std::size_t(t) * h * w * 2, fill);
}

void FlowField::require_finite(const std::string& context) const {
    for (double v : data)
        if (!std::isfinite(v)) throw DomainError(context + ": flow holds a non-finite value");
}

namespace {

constexpr float kFloMagic = 202021.25f;

float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
    float x;
    std::memcpy(&x, &bits, 4);
    return x;
}

void put_f32_le(std::string& out, float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    out.push_back(char(bits & 0xff));
    out.push_back(char((bits >> 8) & 0xff));
    out.push_back(char((bits >> 16) & 0xff));
    out.push_back(char((bits >> 24) & 0xff));
}

std::int32_t get_i32_le(const unsigned char* p) {
    return std::int32_t(std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                        (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24));
}

} // namespace

FlowField read_flo(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw IoError(path + ": truncated header");
    if (get_f32_le(buf.data()) != kFloMagic) throw IoError(path + ": bad magic");
    const std::int32_t w = get_i32_le(buf.data() + 4);
    const std::int32_t h = get_i32_le(buf.data() + 8);
    if (w < 1 || h < 1 || w > 99999 || h > 99999)
        throw IoError(path + ": nonsensical dimensions " + std::to_string(w) + "x" +
                      std::to_string(h));
    const std::size_t count = std::size_t(w) * h * 2;
    if (buf.size() != 12 + count * 4) throw IoError(path + ": truncated payload");

    FlowField flow(1, h, w);
    const unsigned char* p = buf.data() + 12;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float u = get_f32_le(p);      // file stores (u, v) = (dx, dy)
            const float v = get_f32_le(p + 4);
            p += 8;
            flow.at(0, y, x, 0) = double(v);
            flow.at(0, y, x, 1) = double(u);
        }
    }
    flow.require_finite(path);
    return flow;
}

void write_flo(const FlowField& flow, const std::string& path) {
    if (flow.t != 1) throw DomainError("write_flo: expects a single-frame field");
    std::string out;
    out.reserve(12 + flow.data.size() * 4);
    put_f32_le(out, kFloMagic);
    put_f32_le(out, 0.0f); // placeholder, overwritten below
    put_f32_le(out, 0.0f);
    {
        // width and height as little-endian int32
        std::uint32_t w = std::uint32_t(flow.w), h = std::uint32_t(flow.h);
        out[4] = char(w & 0xff);
        out[5] = char((w >> 8) & 0xff);
        out[6] = char((w >> 16) & 0xff);
        out[7] = char((w >> 24) & 0xff);
        out[8] = char(h & 0xff);
        out[9] = char((h >> 8) & 0xff);
        out[10] = char((h >> 16) & 0xff);
        out[11] = char((h >> 24) & 0xff);
    }
    for (int y = 0; y < flow.h; ++y) {
        for (int x = 0; x < flow.w; ++x) {
            put_f32_le(out, float(flow.at(0, y, x, 1))); // u = dx first
            put_f32_le(out, float(flow.at(0, y, x, 0))); // v = dy second
        }
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(out.data(), std::streamoff(out.size()));
    if (!os) throw IoError("short write on " + path);
}

FlowField estimate_flow_block_matching(const VideoTensor& frame_a, const VideoTensor& frame_b,
                                       int block, int radius) {
    if (frame_a.t != 1 || frame_b.t != 1)
        throw DomainError("estimate_flow_block_matching: expects single-frame tensors");
    if (!frame_a.same_shape(frame_b))
        throw DomainError("estimate_flow_block_matching: shape mismatch");
    if (block < 1 || block % 2 == 0)
        throw ConfigError("estimate_flow_block_matching: block must be odd and positive");
    if (radius < 0) throw ConfigError("estimate_flow_block_matching: radius must be >= 0");

    const int h = frame_a.h, w = frame_a.w, f = frame_a.f;
    const int nby = (h + block - 1) / block;
    const int nbx = (w + block - 1) / block;
    std::vector<int> best_dy(std::size_t(nby) * nbx, 0), best_dx(std::size_t(nby) * nbx, 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int bi = 0; bi < nby * nbx; ++bi) {
        const int by = bi / nbx;
        const int bx = bi % nbx;
        const int y0 = by * block;
        const int x0 = bx * block;
        const int y1 = std::min(y0 + block, h);
        const int x1 = std::min(x0 + block, w);
        double best = std::numeric_limits<double>::infinity();
        int bdy = 0, bdx = 0;
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                double ssd = 0.0;
                for (int y = y0; y < y1; ++y) {
                    const int ry = reflect_index(y + dy, h);
                    for (int x = x0; x < x1; ++x) {
                        const int rx = reflect_index(x + dx, w);
                        for (int c = 0; c < f; ++c) {
                            const double d = frame_a.at(0, y, x, c) - frame_b.at(0, ry, rx, c);
                            ssd += d * d;
                        }
                    }
                }
                if (ssd < best) { // strict: first hit in scan order wins ties
                    best = ssd;
                    bdy = dy;
                    bdx = dx;
                }
            }
        }
        best_dy[bi] = bdy;
        best_dx[bi] = bdx;
    }

    FlowField flow(1, h, w);
    for (int y = 0; y < h; ++y) {
        const int by = y / block;
        for (int x = 0; x < w; ++x) {
            const int bx = x / block;
            flow.at(0, y, x, 0) = double(best_dy[std::size_t(by) * nbx + bx]);
            flow.at(0, y, x, 1) = double(best_dx[std::size_t(by) * nbx + bx]);
        }
    }
    return flow;
}

double flow_bilinear(const FlowField& flow, int ti, double y, double x, int comp) {
    const BilinearTaps taps = bilinear_taps(flow.h, flow.w, y, x);
    return taps.w00 * flow.at(ti, taps.y0, taps.x0, comp) +
           taps.w01 * flow.at(ti, taps.y0, taps.x1, comp) +
           taps.w10 * flow.at(ti, taps.y1, taps.x0, comp) +
           taps.w11 * flow.at(ti, taps.y1, taps.x1, comp);
}

FlowField compose_flow(const std::vector<FlowField>& flows) {
    if (flows.empty()) throw ConfigError("compose_flow: empty flow list");
    for (const FlowField& fl : flows) {
        if (fl.t != 1) throw DomainError("compose_flow: expects single-step fields");
        if (fl.h != flows[0].h || fl.w != flows[0].w)
            throw DomainError("compose_flow: field shapes disagree");
    }
    if (flows.size() == 1) return flows[0];

    const int h = flows[0].h, w = flows[0].w;
    FlowField out(1, h, w, flows[0].direction);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double dy = flows[0].at(0, y, x, 0);
            double dx = flows[0].at(0, y, x, 1);
            for (std::size_t k = 1; k < flows.size(); ++k) {
                const double py = y + dy;
                const double px = x + dx;
                dy += flow_bilinear(flows[k], 0, py, px, 0);
                dx += flow_bilinear(flows[k], 0, py, px, 1);
            }
            out.at(0, y, x, 0) = dy;
            out.at(0, y, x, 1) = dx;
        }
    }
    return out;
}

double mean_abs_flow(const FlowField& flow) {
    if (flow.data.empty()) throw DomainError("mean_abs_flow: empty field");
    double acc = 0.0;
    for (double v : flow.data) acc += std::abs(v);
    return acc / double(flow.data.size());
}

FlowField frame_slice(const FlowField& flow, int ti) {
    if (ti < 0 || ti >= flow.t) throw DomainError("frame_slice: frame index out of range");
    FlowField out(1, flow.h, flow.w, flow.direction);
    const std::size_t n = std::size_t(flow.h) * flow.w * 2;
    std::copy(flow.data.begin() + std::size_t(ti) * n,
              flow.data.begin() + std::size_t(ti + 1) * n, out.data.begin());
    return out;
}

} // namespace snls
