// Four deterministic embedding backbones standing in for pretrained vision
// towers: pixel downsampling, per-cell color histograms, gradient
// orientations, and per-cell moments. All outputs are L2-normalized.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "recap/core/errors.hpp"
#include "recap/scene/render.hpp"

namespace recap {

enum class Backbone { PixDown = 0, CellHist, EdgeOrient, PatchMoments };
inline constexpr int kNumBackbones = 4;

inline const char* backbone_name(Backbone b) {
    static const char* names[] = {"pix-down", "cell-hist", "edge-orient", "patch-moments"};
    return names[static_cast<int>(b)];
}

inline Backbone backbone_from_name(const std::string& name) {
    for (int i = 0; i < kNumBackbones; ++i)
        if (name == backbone_name(static_cast<Backbone>(i))) return static_cast<Backbone>(i);
    throw ConfigError("unknown backbone '" + name + "'");
}

namespace detail {

inline void l2_normalize(std::vector<double>& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::max(std::sqrt(sq), 1e-8);
    for (double& x : v) x /= norm;
}

// 8x8 area-averaged RGB, flattened: 192 dims.
inline std::vector<double> embed_pix_down(const RasterImage& img) {
    constexpr int out = 8, block = kImageSize / out;
    std::vector<double> e(out * out * kChannels, 0.0);
    for (int gy = 0; gy < out; ++gy)
        for (int gx = 0; gx < out; ++gx)
            for (int c = 0; c < kChannels; ++c) {
                double acc = 0.0;
                for (int y = 0; y < block; ++y)
                    for (int x = 0; x < block; ++x) acc += img.at(gy * block + y, gx * block + x, c);
                e[(gy * out + gx) * kChannels + c] = acc / (block * block);
            }
    return e;
}

// Per-cell 6-bin palette-proximity histogram plus coverage: 112 dims.
inline std::vector<double> embed_cell_hist(const RasterImage& img) {
    std::vector<double> e(kNumCells * (kNumColors + 1), 0.0);
    for (int cell = 0; cell < kNumCells; ++cell) {
        const int y0 = (cell / kGridSize) * kCellPixels, x0 = (cell % kGridSize) * kCellPixels;
        double* slot = e.data() + cell * (kNumColors + 1);
        int covered = 0;
        for (int y = 0; y < kCellPixels; ++y)
            for (int x = 0; x < kCellPixels; ++x) {
                double dev = 0.0;
                double px[3];
                for (int c = 0; c < kChannels; ++c) {
                    px[c] = img.at(y0 + y, x0 + x, c);
                    dev = std::max(dev, std::abs(px[c] - kBackgroundValue));
                }
                if (dev <= 0.25) continue;  // background-like pixel
                ++covered;
                int best = 0;
                double best_d = 1e30;
                for (int col = 0; col < kNumColors; ++col) {
                    float rgb[3];
                    color_rgb(static_cast<ObjColor>(col), rgb);
                    double d = 0.0;
                    for (int c = 0; c < kChannels; ++c) d += (px[c] - rgb[c]) * (px[c] - rgb[c]);
                    if (d < best_d) {
                        best_d = d;
                        best = col;
                    }
                }
                slot[best] += 1.0;
            }
        const double denom = kCellPixels * kCellPixels;
        for (int col = 0; col < kNumColors; ++col) slot[col] /= denom;
        slot[kNumColors] = covered / denom;
    }
    return e;
}

// Per-cell 4-bin gradient-orientation histogram over luminance: 64 dims.
inline std::vector<double> embed_edge_orient(const RasterImage& img) {
    std::vector<double> e(kNumCells * 4, 0.0);
    auto lum = [&img](int y, int x) {
        return (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
    };
    for (int y = 1; y < kImageSize - 1; ++y)
        for (int x = 1; x < kImageSize - 1; ++x) {
            const double gx = lum(y, x + 1) - lum(y, x - 1);
            const double gy = lum(y + 1, x) - lum(y - 1, x);
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag < 1e-9) continue;
            double theta = std::atan2(gy, gx);
            if (theta < 0) theta += 3.14159265358979323846;
            int bin = static_cast<int>(theta / (3.14159265358979323846 / 4.0));
            if (bin > 3) bin = 3;
            const int cell = (y / kCellPixels) * kGridSize + (x / kCellPixels);
            e[cell * 4 + bin] += mag;
        }
    return e;
}

// Per-cell mean and population variance per channel: 96 dims.
inline std::vector<double> embed_patch_moments(const RasterImage& img) {
    std::vector<double> e(kNumCells * kChannels * 2, 0.0);
    for (int cell = 0; cell < kNumCells; ++cell) {
        const int y0 = (cell / kGridSize) * kCellPixels, x0 = (cell % kGridSize) * kCellPixels;
        for (int c = 0; c < kChannels; ++c) {
            double sum = 0.0, sumsq = 0.0;
            for (int y = 0; y < kCellPixels; ++y)
                for (int x = 0; x < kCellPixels; ++x) {
                    const double v = img.at(y0 + y, x0 + x, c);
                    sum += v;
                    sumsq += v * v;
                }
            const double n = kCellPixels * kCellPixels;
            const double mean = sum / n;
            e[(cell * kChannels + c) * 2] = mean;
            e[(cell * kChannels + c) * 2 + 1] = sumsq / n - mean * mean;
        }
    }
    return e;
}

}  // namespace detail

inline std::vector<double> embed(const RasterImage& img, Backbone backbone) {
    std::vector<double> e;
    switch (backbone) {
        case Backbone::PixDown: e = detail::embed_pix_down(img); break;
        case Backbone::CellHist: e = detail::embed_cell_hist(img); break;
        case Backbone::EdgeOrient: e = detail::embed_edge_orient(img); break;
        case Backbone::PatchMoments: e = detail::embed_patch_moments(img); break;
    }
    detail::l2_normalize(e);
    return e;
}

}  // namespace recap
