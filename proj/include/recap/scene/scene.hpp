// The synthetic scene universe: attributed shape objects on a 4x4 cell grid.
// Scenes are the ground truth behind both images and captions.
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "recap/core/errors.hpp"
#include "recap/core/rng.hpp"

namespace recap {

enum class ObjShape : uint8_t { Circle = 0, Square, Triangle, Cross };
enum class ObjColor : uint8_t { Red = 0, Green, Blue, Yellow, Magenta, Cyan };
enum class ObjSize : uint8_t { Small = 0, Large };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 6;
inline constexpr int kNumSizes = 2;
inline constexpr int kGridSize = 4;
inline constexpr int kNumCells = kGridSize * kGridSize;
inline constexpr int kMaxObjects = 4;

inline const char* shape_name(ObjShape s) {
    static const char* names[] = {"circle", "square", "triangle", "cross"};
    return names[static_cast<int>(s)];
}
inline const char* color_name(ObjColor c) {
    static const char* names[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
    return names[static_cast<int>(c)];
}
inline const char* size_name(ObjSize s) {
    static const char* names[] = {"small", "large"};
    return names[static_cast<int>(s)];
}

struct SceneObject {
    ObjShape shape = ObjShape::Circle;
    ObjColor color = ObjColor::Red;
    ObjSize size = ObjSize::Small;
    int row = 0;
    int col = 0;

    int cell() const { return row * kGridSize + col; }
    bool operator==(const SceneObject& o) const {
        return shape == o.shape && color == o.color && size == o.size && row == o.row && col == o.col;
    }
};

struct Scene {
    std::vector<SceneObject> objects;  // canonical order: row-major by cell

    bool operator==(const Scene& o) const { return objects == o.objects; }
};

inline void canonicalize(Scene& s) {
    std::sort(s.objects.begin(), s.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell() < b.cell(); });
}

inline void validate_scene(const Scene& s) {
    if (s.objects.empty() || s.objects.size() > kMaxObjects)
        throw InputError("scene must hold 1.." + std::to_string(kMaxObjects) + " objects");
    int prev_cell = -1;
    for (const auto& o : s.objects) {
        if (o.row < 0 || o.row >= kGridSize || o.col < 0 || o.col >= kGridSize)
            throw InputError("scene object cell out of range");
        if (o.cell() == prev_cell) throw InputError("two objects share a cell");
        if (o.cell() < prev_cell) throw InputError("scene objects not in canonical order");
        prev_cell = o.cell();
    }
}

// Stable 64-bit identity for split disjointness and content hashing.
inline uint64_t scene_key(const Scene& s) {
    uint64_t k = 0;
    for (const auto& o : s.objects) {
        const uint64_t obj = ((static_cast<uint64_t>(o.shape) * kNumColors + static_cast<uint64_t>(o.color)) * kNumSizes +
                              static_cast<uint64_t>(o.size)) *
                                 kNumCells +
                             static_cast<uint64_t>(o.cell());
        k = k * 769 + (obj + 1);
    }
    return k;
}

inline Scene sample_scene(SeededRng& rng, int max_objects) {
    if (max_objects < 1 || max_objects > kMaxObjects) throw InputError("max_objects must be in 1..4");
    Scene s;
    const int count = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_objects)));
    // cells without replacement via partial Fisher-Yates
    int cells[kNumCells];
    for (int i = 0; i < kNumCells; ++i) cells[i] = i;
    for (int i = 0; i < count; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(kNumCells - i)));
        std::swap(cells[i], cells[j]);
    }
    for (int i = 0; i < count; ++i) {
        SceneObject o;
        o.shape = static_cast<ObjShape>(rng.uniform_int(kNumShapes));
        o.color = static_cast<ObjColor>(rng.uniform_int(kNumColors));
        o.size = static_cast<ObjSize>(rng.uniform_int(kNumSizes));
        o.row = cells[i] / kGridSize;
        o.col = cells[i] % kGridSize;
        s.objects.push_back(o);
    }
    canonicalize(s);
    return s;
}

}  // namespace recap
