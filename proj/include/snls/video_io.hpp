#pragma once

#include <string>

#include "snls/tensor.hpp"

namespace snls {

// Raw tensor file: magic "STNT", little-endian u32 T, H, W, F, one byte
// element width (4 or 8), then T*H*W*F little-endian IEEE reals, row-major
// with the feature axis fastest. Round-trips bit-exactly.
VideoTensor load_raw(const std::string& path);
void save_raw(const VideoTensor& v, const std::string& path);

// Single 8-bit grayscale or RGB PNG as a 1-frame tensor on the 0..255 scale.
VideoTensor load_png_file(const std::string& path);
void save_png_file(const VideoTensor& v, int ti, const std::string& path);

// Directory of PNG frames, lexicographically ordered filenames. All frames
// must agree in size and channel count; a mismatch names the offending file.
VideoTensor load_png_dir(const std::string& dir);
// Writes frames as 00000.png, 00001.png, ... (values rounded and clamped).
void save_png_dir(const VideoTensor& v, const std::string& dir);

// Directory -> PNG frames, *.png file -> single frame, anything else -> raw
// tensor.
VideoTensor load_video(const std::string& path);

} // namespace snls
