// Binary PPM (P6, maxval 255) image export/import; pixel = round(255 * v).
#pragma once

#include <cmath>
#include <fstream>
#include <string>

#include "recap/core/errors.hpp"
#include "recap/scene/render.hpp"

namespace recap {

inline void write_ppm(const std::string& path, const RasterImage& img) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write image '" + path + "'");
    out << "P6\n" << kImageSize << " " << kImageSize << "\n255\n";
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int c = 0; c < kChannels; ++c) {
                const float v = std::min(1.0f, std::max(0.0f, img.at(y, x, c)));
                const unsigned char b = static_cast<unsigned char>(std::lround(255.0f * v));
                out.write(reinterpret_cast<const char*>(&b), 1);
            }
    if (!out) throw IoError("write failed for image '" + path + "'");
}

inline RasterImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image '" + path + "'");
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw InputError("unsupported PPM variant in '" + path + "'");
    if (w != kImageSize || h != kImageSize)
        throw InputError("expected " + std::to_string(kImageSize) + "x" + std::to_string(kImageSize) + " image");
    in.get();  // single whitespace after header
    RasterImage img;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int c = 0; c < kChannels; ++c) {
                const int b = in.get();
                if (b < 0) throw InputError("truncated PPM '" + path + "'");
                img.at(y, x, c) = static_cast<float>(b) / 255.0f;
            }
    return img;
}

}  // namespace recap
