#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "larvseg/errors.hpp"
#include "larvseg/tensor.hpp"

namespace larvseg {

// Fixed 32-entry palette for category masks; ids wrap around modulo 32.
inline const std::array<std::array<std::uint8_t, 3>, 32>& mask_palette() {
    static const std::array<std::array<std::uint8_t, 3>, 32> palette = {{
        {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},
        {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230},
        {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
        {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195},
        {128, 128, 0},   {255, 215, 180}, {0, 0, 128},     {128, 128, 128},
        {255, 255, 255}, {0, 0, 0},       {100, 60, 140},  {255, 105, 97},
        {40, 90, 40},    {90, 160, 255},  {200, 160, 90},  {60, 60, 110},
        {190, 255, 0},   {255, 0, 110},   {0, 190, 140},   {140, 20, 60},
    }};
    return palette;
}

namespace detail {

inline std::string ppm_header(std::size_t h, std::size_t w) {
    return "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

}  // namespace detail

// Category mask to P6 PPM bytes through the fixed palette.
inline std::string render_mask_ppm(const Tensor& mask) {
    if (mask.rank() != 2) throw DimensionError("render: mask must be H x W");
    const std::size_t h = mask.extent(0), w = mask.extent(1);
    std::string out = detail::ppm_header(h, w);
    out.reserve(out.size() + 3 * h * w);
    const auto& palette = mask_palette();
    for (std::size_t p = 0; p < h * w; ++p) {
        const auto id = static_cast<std::size_t>(mask.values()[p]) % palette.size();
        for (std::uint8_t channel : palette[id]) out.push_back(static_cast<char>(channel));
    }
    return out;
}

// Scalar map to P6 PPM bytes through a linear grayscale ramp: the minimum
// maps to 0 and the maximum to 255. A constant map renders as middle gray.
inline std::string render_map_ppm(const Tensor& map) {
    if (map.rank() != 2) throw DimensionError("render: map must be H x W");
    const std::size_t h = map.extent(0), w = map.extent(1);
    double lo = map.values()[0], hi = map.values()[0];
    for (double v : map.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::string out = detail::ppm_header(h, w);
    out.reserve(out.size() + 3 * h * w);
    for (double v : map.values()) {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        const auto g = static_cast<std::uint8_t>(std::lround(t * 255.0));
        for (int i = 0; i < 3; ++i) out.push_back(static_cast<char>(g));
    }
    return out;
}

inline void save_ppm(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace larvseg
