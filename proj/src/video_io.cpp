#include "snls/video_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace snls {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'N', 'T'};

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff n = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n), 0);
    if (n > 0) in.read(reinterpret_cast<char*>(buf.data()), n);
    if (!in) throw IoError("short read on " + path);
    return buf;
}

void write_all(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), std::streamoff(bytes.size()));
    if (!out) throw IoError("short write on " + path);
}

} // namespace

VideoTensor load_raw(const std::string& path) {
    const auto buf = read_all(path);
    if (buf.size() < 21) throw IoError(path + ": truncated header");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw IoError(path + ": bad magic");
    const std::uint32_t t = get_u32_le(buf.data() + 4);
    const std::uint32_t h = get_u32_le(buf.data() + 8);
    const std::uint32_t w = get_u32_le(buf.data() + 12);
    const std::uint32_t f = get_u32_le(buf.data() + 16);
    const unsigned char width = buf[20];
    if (t == 0 || h == 0 || w == 0 || f == 0)
        throw IoError(path + ": zero extent in header");
    if (width != 4 && width != 8) throw IoError(path + ": element width must be 4 or 8");
    const std::size_t count = std::size_t(t) * h * w * f;
    if (buf.size() != 21 + count * width)
        throw IoError(path + ": payload size does not match header");

    VideoTensor v(int(t), int(h), int(w), int(f), 0.0,
                  width == 4 ? ElemWidth::kF32 : ElemWidth::kF64);
    const unsigned char* p = buf.data() + 21;
    if (width == 4) {
        for (std::size_t i = 0; i < count; ++i, p += 4) {
            std::uint32_t bits = get_u32_le(p);
            float x;
            std::memcpy(&x, &bits, 4);
            v.data[i] = double(x);
        }
    } else {
        for (std::size_t i = 0; i < count; ++i, p += 8) {
            std::uint64_t bits = std::uint64_t(get_u32_le(p)) |
                                 (std::uint64_t(get_u32_le(p + 4)) << 32);
            double x;
            std::memcpy(&x, &bits, 8);
            v.data[i] = x;
        }
    }
    v.require_finite(path);
    return v;
}

void save_raw(const VideoTensor& v, const std::string& path) {
    std::string out;
    const int width = v.width == ElemWidth::kF32 ? 4 : 8;
    out.reserve(21 + v.size() * std::size_t(width));
    out.append(kMagic, 4);
    put_u32_le(out, std::uint32_t(v.t));
    put_u32_le(out, std::uint32_t(v.h));
    put_u32_le(out, std::uint32_t(v.w));
    put_u32_le(out, std::uint32_t(v.f));
    out.push_back(char(width));
    if (width == 4) {
        for (double d : v.data) {
            const float x = float(d);
            std::uint32_t bits;
            std::memcpy(&bits, &x, 4);
            put_u32_le(out, bits);
        }
    } else {
        for (double d : v.data) {
            std::uint64_t bits;
            std::memcpy(&bits, &d, 8);
            put_u32_le(out, std::uint32_t(bits & 0xffffffffu));
            put_u32_le(out, std::uint32_t(bits >> 32));
        }
    }
    write_all(path, out);
}

namespace {

// Reads one PNG into interleaved 8-bit samples; channels is 1 or 3.
void read_png(const std::string& path, std::vector<unsigned char>& pixels, int& w, int& h,
              int& channels) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError(path + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    channels = color ? 3 : 1;
    w = int(image.width);
    h = int(image.height);
    pixels.resize(std::size_t(w) * h * channels);
    if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError(path + ": " + msg);
    }
}

} // namespace

VideoTensor load_png_file(const std::string& path) {
    std::vector<unsigned char> pixels;
    int w = 0, h = 0, channels = 0;
    read_png(path, pixels, w, h, channels);
    VideoTensor v(1, h, w, channels, 0.0, ElemWidth::kF64);
    for (std::size_t i = 0; i < pixels.size(); ++i) v.data[i] = double(pixels[i]);
    return v;
}

void save_png_file(const VideoTensor& v, int ti, const std::string& path) {
    if (ti < 0 || ti >= v.t) throw DomainError("save_png_file: frame index out of range");
    if (v.f != 1 && v.f != 3)
        throw IoError(path + ": PNG frames must have 1 or 3 channels, got " +
                      std::to_string(v.f));
    std::vector<unsigned char> pixels(std::size_t(v.h) * v.w * v.f);
    const std::size_t base = std::size_t(ti) * v.h * v.w * v.f;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const double x = std::lround(v.data[base + i]);
        pixels[i] = (unsigned char)(x < 0.0 ? 0 : (x > 255.0 ? 255 : x));
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = png_uint_32(v.w);
    image.height = png_uint_32(v.h);
    image.format = v.f == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr))
        throw IoError(path + ": " + image.message);
}

VideoTensor load_png_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError(dir + ": not a directory");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png")
            names.push_back(e.path().string());
    }
    if (names.empty()) throw IoError(dir + ": no .png frames found");
    std::sort(names.begin(), names.end());

    std::vector<unsigned char> pixels;
    int w = 0, h = 0, channels = 0;
    read_png(names[0], pixels, w, h, channels);
    VideoTensor v(int(names.size()), h, w, channels, 0.0, ElemWidth::kF64);
    const std::size_t frame = pixels.size();
    for (std::size_t i = 0; i < frame; ++i) v.data[i] = double(pixels[i]);
    for (std::size_t ti = 1; ti < names.size(); ++ti) {
        int w2 = 0, h2 = 0, c2 = 0;
        read_png(names[ti], pixels, w2, h2, c2);
        if (w2 != w || h2 != h || c2 != channels)
            throw IoError(names[ti] + ": frame size " + std::to_string(w2) + "x" +
                          std::to_string(h2) + "x" + std::to_string(c2) +
                          " does not match first frame " + std::to_string(w) + "x" +
                          std::to_string(h) + "x" + std::to_string(channels));
        for (std::size_t i = 0; i < frame; ++i) v.data[ti * frame + i] = double(pixels[i]);
    }
    return v;
}

void save_png_dir(const VideoTensor& v, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (int ti = 0; ti < v.t; ++ti) {
        char name[16];
        std::snprintf(name, sizeof(name), "%05d.png", ti);
        save_png_file(v, ti, (fs::path(dir) / name).string());
    }
}

VideoTensor load_video(const std::string& path) {
    if (std::filesystem::is_directory(path)) return load_png_dir(path);
    if (std::filesystem::path(path).extension() == ".png") return load_png_file(path);
    return load_raw(path);
}

} // namespace snls
