#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "snls/flow.hpp"
#include "snls/rng.hpp"
#include "snls/tensor.hpp"

using namespace snls;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() /
                 (std::string("snls_") + tag + "_" + std::to_string(::getpid()) + "_" +
                  std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

VideoTensor random_frame(int h, int w, int f, std::uint64_t seed) {
    VideoTensor v(1, h, w, f);
    UniformStream rng(seed);
    for (double& x : v.data) x = rng.next_in(0.0, 255.0);
    return v;
}

VideoTensor circular_shift(const VideoTensor& v, int dy, int dx) {
    VideoTensor out(v.t, v.h, v.w, v.f);
    for (int t = 0; t < v.t; ++t)
        for (int y = 0; y < v.h; ++y)
            for (int x = 0; x < v.w; ++x)
                for (int c = 0; c < v.f; ++c) {
                    const int sy = ((y - dy) % v.h + v.h) % v.h;
                    const int sx = ((x - dx) % v.w + v.w) % v.w;
                    out.at(t, y, x, c) = v.at(t, sy, sx, c);
                }
    return out;
}

} // namespace

TEST_CASE("flo round-trip is bit-identical") {
    const fs::path dir = temp_dir("flo");
    FlowField f(1, 8, 8);
    UniformStream rng(7);
    for (double& x : f.data) x = double(float(rng.next_in(-20.0, 20.0)));
    const std::string path = (dir / "f.flo").string();
    write_flo(f, path);
    const FlowField r = read_flo(path);
    CHECK(r.h == 8);
    CHECK(r.w == 8);
    CHECK(r.data == f.data);
    fs::remove_all(dir);
}

TEST_CASE("flo loader rejects a wrong magic") {
    const fs::path dir = temp_dir("flobad");
    const std::string path = (dir / "bad.flo").string();
    {
        std::ofstream os(path, std::ios::binary);
        const float wrong = 123.456f;
        const std::int32_t dim = 4;
        os.write(reinterpret_cast<const char*>(&wrong), 4);
        os.write(reinterpret_cast<const char*>(&dim), 4);
        os.write(reinterpret_cast<const char*>(&dim), 4);
        std::vector<float> payload(4 * 4 * 2, 0.0f);
        os.write(reinterpret_cast<const char*>(payload.data()), payload.size() * 4);
    }
    CHECK_THROWS_WITH_AS(read_flo(path), doctest::Contains("bad magic"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("zero flow writes an all-zero payload after the 12-byte header") {
    const fs::path dir = temp_dir("flozero");
    const FlowField f(1, 3, 5);
    const std::string path = (dir / "z.flo").string();
    write_flo(f, path);
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 12 + std::size_t(3) * 5 * 2 * 4);
    for (std::size_t i = 12; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
    fs::remove_all(dir);
}

TEST_CASE("block matching: identical frames give zero flow") {
    const VideoTensor a = random_frame(16, 16, 1, 17);
    const FlowField f = estimate_flow_block_matching(a, a, 3, 2);
    for (double x : f.data) CHECK(x == 0.0);
}

TEST_CASE("block matching recovers a circular shift at interior blocks") {
    const VideoTensor a = random_frame(24, 24, 1, 27);
    const VideoTensor b = circular_shift(a, 2, -3);
    const FlowField f = estimate_flow_block_matching(a, b, 3, 4);
    // interior pixels: stay clear of the wrap seam and the search radius
    for (int y = 8; y < 16; ++y)
        for (int x = 8; x < 16; ++x) {
            CHECK(f.at(0, y, x, 0) == 2.0);
            CHECK(f.at(0, y, x, 1) == -3.0);
        }
}

TEST_CASE("block matching with radius 0 returns zero flow") {
    const VideoTensor a = random_frame(12, 12, 2, 37);
    const VideoTensor b = random_frame(12, 12, 2, 38);
    const FlowField f = estimate_flow_block_matching(a, b, 3, 0);
    for (double x : f.data) CHECK(x == 0.0);
}

TEST_CASE("block matching validates its parameters") {
    const VideoTensor a = random_frame(8, 8, 1, 47);
    CHECK_THROWS_AS(estimate_flow_block_matching(a, a, 4, 2), ConfigError);
    CHECK_THROWS_AS(estimate_flow_block_matching(a, a, 3, -1), ConfigError);
}

TEST_CASE("compose_flow: single field is returned unchanged") {
    FlowField f(1, 4, 4);
    UniformStream rng(57);
    for (double& x : f.data) x = rng.next_in(-2.0, 2.0);
    const FlowField out = compose_flow({f});
    CHECK(out.data == f.data);
}

TEST_CASE("compose_flow: constants compose additively") {
    FlowField f1(1, 6, 6), f2(1, 6, 6);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
            f1.at(0, y, x, 0) = 1.0;
            f1.at(0, y, x, 1) = 0.0;
            f2.at(0, y, x, 0) = 0.0;
            f2.at(0, y, x, 1) = 2.0;
        }
    const FlowField out = compose_flow({f1, f2});
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) {
            CHECK(out.at(0, y, x, 0) == doctest::Approx(1.0));
            CHECK(out.at(0, y, x, 1) == doctest::Approx(2.0));
        }
}

TEST_CASE("compose_flow matches a pointwise chaining oracle on 8x8") {
    FlowField f1(1, 8, 8), f2(1, 8, 8);
    UniformStream rng(67);
    for (double& x : f1.data) x = rng.next_in(-1.5, 1.5);
    for (double& x : f2.data) x = rng.next_in(-1.5, 1.5);
    const FlowField out = compose_flow({f1, f2});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const double dy1 = f1.at(0, y, x, 0);
            const double dx1 = f1.at(0, y, x, 1);
            const double ey = dy1 + flow_bilinear(f2, 0, y + dy1, x + dx1, 0);
            const double ex = dx1 + flow_bilinear(f2, 0, y + dy1, x + dx1, 1);
            CHECK(out.at(0, y, x, 0) == doctest::Approx(ey).epsilon(1e-12));
            CHECK(out.at(0, y, x, 1) == doctest::Approx(ex).epsilon(1e-12));
        }
}

TEST_CASE("compose_flow of k copies of a constant equals k times the constant") {
    FlowField f(1, 5, 5);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            f.at(0, y, x, 0) = -0.5;
            f.at(0, y, x, 1) = 1.25;
        }
    const FlowField out = compose_flow({f, f, f, f});
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            CHECK(out.at(0, y, x, 0) == doctest::Approx(-2.0).epsilon(1e-12));
            CHECK(out.at(0, y, x, 1) == doctest::Approx(5.0).epsilon(1e-12));
        }
}

TEST_CASE("compose_flow rejects an empty list") {
    CHECK_THROWS_AS(compose_flow({}), ConfigError);
}

TEST_CASE("mean_abs_flow examples") {
    FlowField zero(1, 4, 4);
    CHECK(mean_abs_flow(zero) == 0.0);

    FlowField c(1, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            c.at(0, y, x, 0) = 3.0;
            c.at(0, y, x, 1) = 4.0;
        }
    CHECK(mean_abs_flow(c) == doctest::Approx(3.5));

    // half the pixels (2,0), half (0,2): direct average is 1.0
    FlowField half(1, 2, 4);
    for (int x = 0; x < 4; ++x) {
        half.at(0, 0, x, 0) = 2.0;
        half.at(0, 0, x, 1) = 0.0;
        half.at(0, 1, x, 0) = 0.0;
        half.at(0, 1, x, 1) = 2.0;
    }
    CHECK(mean_abs_flow(half) == doctest::Approx(1.0));
}
