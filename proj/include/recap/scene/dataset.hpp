// Dataset synthesis and export: n training records plus a disjoint 100-scene
// evaluation split, all a pure function of the seed.
#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "recap/core/hash.hpp"
#include "recap/io/ppm.hpp"
#include "recap/scene/grammar.hpp"
#include "recap/scene/render.hpp"
#include "recap/scene/scene.hpp"

namespace recap {

inline constexpr int kEvalSplitSize = 100;

struct DatasetRecord {
    Scene scene;
    RasterImage image;
    CaptionTokens caption;
};

struct Dataset {
    std::vector<DatasetRecord> train;
    std::vector<DatasetRecord> eval_split;
};

inline DatasetRecord make_record(const Scene& s) {
    return {s, render(s), canonical_caption(s)};
}

inline Dataset build_dataset(int n, uint64_t seed, int max_objects) {
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    Dataset ds;
    SeededRng eval_rng = SeededRng(seed).split(0xe7a1);
    std::set<uint64_t> eval_keys;
    while (static_cast<int>(ds.eval_split.size()) < kEvalSplitSize) {
        Scene s = sample_scene(eval_rng, max_objects);
        if (eval_keys.insert(scene_key(s)).second) ds.eval_split.push_back(make_record(s));
    }
    SeededRng train_rng = SeededRng(seed).split(0x7a11);
    while (static_cast<int>(ds.train.size()) < n) {
        Scene s = sample_scene(train_rng, max_objects);
        if (eval_keys.count(scene_key(s))) continue;  // splits share no scene
        ds.train.push_back(make_record(s));
    }
    return ds;
}

inline uint64_t dataset_content_hash(const Dataset& ds) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto fold = [&h](const std::vector<DatasetRecord>& recs) {
        for (const auto& r : recs) {
            const uint64_t k = scene_key(r.scene);
            h = fnv1a64(&k, sizeof(k), h);
            const uint64_t ih = image_hash(r.image);
            h = fnv1a64(&ih, sizeof(ih), h);
            h = fnv1a64(r.caption.data(), r.caption.size() * sizeof(int), h);
        }
    };
    fold(ds.train);
    fold(ds.eval_split);
    return h;
}

inline nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects)
        objs.push_back({{"shape", shape_name(o.shape)},
                        {"color", color_name(o.color)},
                        {"size", size_name(o.size)},
                        {"row", o.row},
                        {"col", o.col}});
    return objs;
}

inline Scene scene_from_json(const nlohmann::json& arr) {
    Scene s;
    auto find_name = [](const std::string& v, const char* const* names, int count, const char* what) {
        for (int i = 0; i < count; ++i)
            if (v == names[i]) return i;
        throw InputError(std::string("unknown ") + what + " '" + v + "'");
    };
    static const char* shapes[] = {"circle", "square", "triangle", "cross"};
    static const char* colors[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
    static const char* sizes[] = {"small", "large"};
    for (const auto& j : arr) {
        SceneObject o;
        o.shape = static_cast<ObjShape>(find_name(j.at("shape"), shapes, kNumShapes, "shape"));
        o.color = static_cast<ObjColor>(find_name(j.at("color"), colors, kNumColors, "color"));
        o.size = static_cast<ObjSize>(find_name(j.at("size"), sizes, kNumSizes, "size"));
        o.row = j.at("row");
        o.col = j.at("col");
        s.objects.push_back(o);
    }
    canonicalize(s);
    validate_scene(s);
    return s;
}

// One JSONL file per split; each record points at its exported PPM image.
inline void export_dataset(const Dataset& ds, const std::string& dir, bool force) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    const fs::path img_dir = root / "images";
    for (const char* split : {"train.jsonl", "eval.jsonl"}) {
        if (!force && fs::exists(root / split))
            throw ConfigError("refusing to overwrite existing dataset in '" + dir + "' (use --force)");
    }
    fs::create_directories(img_dir);
    auto write_split = [&](const std::vector<DatasetRecord>& recs, const std::string& name) {
        std::ofstream out(root / (name + ".jsonl"), std::ios::trunc);
        if (!out) throw IoError("cannot write dataset split '" + name + "'");
        char buf[64];
        for (size_t i = 0; i < recs.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s_%05zu.ppm", name.c_str(), i);
            const std::string img_rel = "images/" + std::string(buf);
            write_ppm((root / img_rel).string(), recs[i].image);
            nlohmann::json rec = {{"id", i},
                                  {"scene", scene_to_json(recs[i].scene)},
                                  {"caption", recs[i].caption},
                                  {"image", img_rel}};
            out << rec.dump() << "\n";
        }
    };
    write_split(ds.train, "train");
    write_split(ds.eval_split, "eval");
}

}  // namespace recap
