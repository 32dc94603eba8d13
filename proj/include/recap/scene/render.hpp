// Deterministic rasterizer: each object drawn as its glyph, centered in its
// 8x8 cell, on a 0.1 dark-gray background.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <vector>

#include "recap/core/hash.hpp"
#include "recap/scene/scene.hpp"

namespace recap {

inline constexpr int kImageSize = 32;
inline constexpr int kChannels = 3;
inline constexpr int kCellPixels = kImageSize / kGridSize;  // 8
inline constexpr float kBackgroundValue = 0.1f;

struct RasterImage {
    std::vector<float> values;  // row-major (y, x, channel), each in [0,1]

    RasterImage() : values(static_cast<size_t>(kImageSize) * kImageSize * kChannels, 0.0f) {}

    float& at(int y, int x, int c) { return values[(static_cast<size_t>(y) * kImageSize + x) * kChannels + c]; }
    float at(int y, int x, int c) const { return values[(static_cast<size_t>(y) * kImageSize + x) * kChannels + c]; }

    bool operator==(const RasterImage& o) const { return values == o.values; }
};

inline void color_rgb(ObjColor c, float rgb[3]) {
    static const float table[kNumColors][3] = {
        {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1},
    };
    rgb[0] = table[static_cast<int>(c)][0];
    rgb[1] = table[static_cast<int>(c)][1];
    rgb[2] = table[static_cast<int>(c)][2];
}

// Glyph membership inside an s x s bounding box, doubled coordinates so even
// box sizes keep an exact center.
inline bool glyph_hit(ObjShape shape, int s, int gx, int gy) {
    const int dx2 = 2 * gx - (s - 1);
    const int dy2 = 2 * gy - (s - 1);
    switch (shape) {
        case ObjShape::Square:
            return true;
        case ObjShape::Circle:
            return dx2 * dx2 + dy2 * dy2 <= s * s;
        case ObjShape::Triangle:
            // apex on top row, full-width base on the bottom row
            return std::abs(dx2) * s <= (s - 1) * (gy + 1);
        case ObjShape::Cross: {
            // diagonal X; an axis-aligned plus at s=4 degenerates into the
            // corner-clipped box that the small circle already occupies
            const int band = s / 3;
            return std::abs(dx2 - dy2) <= band || std::abs(dx2 + dy2) <= band;
        }
    }
    return false;
}

inline RasterImage render(const Scene& scene) {
    validate_scene(scene);
    RasterImage img;
    for (auto& v : img.values) v = kBackgroundValue;
    for (const auto& o : scene.objects) {
        const int s = (o.size == ObjSize::Large) ? 7 : 4;
        const int off = (kCellPixels - s) / 2;
        const int y0 = o.row * kCellPixels + off;
        const int x0 = o.col * kCellPixels + off;
        float rgb[3];
        color_rgb(o.color, rgb);
        for (int gy = 0; gy < s; ++gy)
            for (int gx = 0; gx < s; ++gx)
                if (glyph_hit(o.shape, s, gx, gy))
                    for (int c = 0; c < kChannels; ++c) img.at(y0 + gy, x0 + gx, c) = rgb[c];
    }
    return img;
}

inline uint64_t image_hash(const RasterImage& img) {
    return fnv1a64(img.values.data(), img.values.size() * sizeof(float));
}

}  // namespace recap
