// Caption grammar: a fixed 34-token vocabulary, canonical attribute-complete
// captions, and an error-recovering parser that maps arbitrary token
// sequences back to scenes.
#pragma once

#include <string>
#include <vector>

#include "recap/scene/scene.hpp"

namespace recap {

using CaptionTokens = std::vector<int>;

// Token layout. The trailing filler keywords never appear in canonical
// captions; they give an RL policy room to emit non-structural tokens the
// parser can skip.
inline constexpr int kTokBos = 0;
inline constexpr int kTokEos = 1;
inline constexpr int kTokSep = 2;
inline constexpr int kTokShape0 = 3;   // 4 shapes
inline constexpr int kTokColor0 = 7;   // 6 colors
inline constexpr int kTokSize0 = 13;   // 2 sizes
inline constexpr int kTokRow0 = 15;    // 4 rows
inline constexpr int kTokCol0 = 19;    // 4 cols
inline constexpr int kTokFiller0 = 23; // 11 filler keywords
inline constexpr int kVocabSize = 34;

inline const char* token_name(int id) {
    static const char* names[kVocabSize] = {
        "<bos>", "<eos>", "<sep>",
        "circle", "square", "triangle", "cross",
        "red", "green", "blue", "yellow", "magenta", "cyan",
        "small", "large",
        "row0", "row1", "row2", "row3",
        "col0", "col1", "col2", "col3",
        "at", "in", "on", "a", "the", "and", "with", "grid", "object", "scene", "is",
    };
    if (id < 0 || id >= kVocabSize) throw InputError("token id out of vocabulary");
    return names[id];
}

inline bool is_shape_tok(int id) { return id >= kTokShape0 && id < kTokShape0 + kNumShapes; }
inline bool is_color_tok(int id) { return id >= kTokColor0 && id < kTokColor0 + kNumColors; }
inline bool is_size_tok(int id) { return id >= kTokSize0 && id < kTokSize0 + kNumSizes; }
inline bool is_row_tok(int id) { return id >= kTokRow0 && id < kTokRow0 + kGridSize; }
inline bool is_col_tok(int id) { return id >= kTokCol0 && id < kTokCol0 + kGridSize; }

// BOS, then per object (canonical order): size color shape row col, clauses
// joined by SEP, terminated by EOS.
inline CaptionTokens canonical_caption(const Scene& scene) {
    validate_scene(scene);
    CaptionTokens t;
    t.push_back(kTokBos);
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        t.push_back(kTokSize0 + static_cast<int>(o.size));
        t.push_back(kTokColor0 + static_cast<int>(o.color));
        t.push_back(kTokShape0 + static_cast<int>(o.shape));
        t.push_back(kTokRow0 + o.row);
        t.push_back(kTokCol0 + o.col);
        t.push_back(i + 1 < scene.objects.size() ? kTokSep : kTokEos);
    }
    return t;
}

// Longest canonical caption: 4 objects -> 1 + 4*6 = 25 tokens.
inline constexpr int kMaxCanonicalCaptionLen = 1 + kMaxObjects * 6;

struct ParseReport {
    Scene scene;                                   // recovered objects, canonical order
    std::vector<std::pair<int, int>> skipped;      // (start index, length) of skipped spans
    int duplicate_cells = 0;                       // later duplicates dropped
    int overflow_objects = 0;                      // valid clauses beyond the 4-object cap
    bool reached_eos = false;

    int skipped_tokens() const {
        int n = 0;
        for (auto& s : skipped) n += s.second;
        return n;
    }
};

// Longest-prefix recovery over object clauses. Never fails: malformed spans
// are recorded and skipped, scanning stops at the first EOS.
inline ParseReport parse_caption(const CaptionTokens& tokens) {
    for (int id : tokens) {
        if (id < 0 || id >= kVocabSize) throw InputError("token id out of vocabulary");
    }
    ParseReport rep;
    bool cell_used[kNumCells] = {};
    size_t i = 0;
    int skip_start = -1;
    auto flush_skip = [&](size_t end) {
        if (skip_start >= 0) {
            rep.skipped.push_back({skip_start, static_cast<int>(end) - skip_start});
            skip_start = -1;
        }
    };
    if (!tokens.empty() && tokens[0] == kTokBos) i = 1;
    while (i < tokens.size()) {
        const int t = tokens[i];
        if (t == kTokEos) {
            flush_skip(i);
            rep.reached_eos = true;
            break;
        }
        if (t == kTokSep) {
            flush_skip(i);
            ++i;
            continue;
        }
        if (i + 4 < tokens.size() && is_size_tok(tokens[i]) && is_color_tok(tokens[i + 1]) &&
            is_shape_tok(tokens[i + 2]) && is_row_tok(tokens[i + 3]) && is_col_tok(tokens[i + 4])) {
            flush_skip(i);
            SceneObject o;
            o.size = static_cast<ObjSize>(tokens[i] - kTokSize0);
            o.color = static_cast<ObjColor>(tokens[i + 1] - kTokColor0);
            o.shape = static_cast<ObjShape>(tokens[i + 2] - kTokShape0);
            o.row = tokens[i + 3] - kTokRow0;
            o.col = tokens[i + 4] - kTokCol0;
            if (cell_used[o.cell()]) {
                ++rep.duplicate_cells;
            } else if (rep.scene.objects.size() < kMaxObjects) {
                cell_used[o.cell()] = true;
                rep.scene.objects.push_back(o);
            } else {
                ++rep.overflow_objects;
            }
            i += 5;
            continue;
        }
        if (skip_start < 0) skip_start = static_cast<int>(i);
        ++i;
    }
    flush_skip(i);
    canonicalize(rep.scene);
    return rep;
}

inline std::string caption_to_string(const CaptionTokens& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += token_name(tokens[i]);
    }
    return out;
}

}  // namespace recap
