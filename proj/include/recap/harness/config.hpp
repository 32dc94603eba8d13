// Run configuration: one flat dotted-key namespace, file plus command-line
// overrides, every training default in one place.
#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "recap/bench/score.hpp"
#include "recap/core/errors.hpp"
#include "recap/core/hash.hpp"
#include "recap/model/captioner.hpp"
#include "recap/model/velocity_net.hpp"

namespace recap {

struct RunConfig {
    uint64_t seed = 1;

    int data_n = 2000;
    int data_max_objects = 4;

    CaptionerConfig captioner;  // dim 64, 2 layers, max_len 32
    DecoderConfig decoder;      // width 256, 3 hidden layers, cond 64, time 16

    int pretrain_steps = 3000;
    double pretrain_lr = 3e-3;
    int pretrain_batch = 32;
    double pretrain_clip_norm = 1.0;
    int pretrain_eval_every = 500;
    int pretrain_ckpt_every = 1000;

    int stage1_steps = 5000;
    double stage1_lr = 1e-3;
    int stage1_batch = 8;
    double stage1_p_drop = 0.1;
    double stage1_clip_norm = 1.0;
    int stage1_eval_every = 1000;
    int stage1_ckpt_every = 1000;

    int stage2_steps = 300;
    int stage2_group = 4;          // sampled captions per source
    double stage2_lr = 1e-6;       // exposed; desk runs typically override
    double stage2_clip_eps = 0.2;
    double stage2_kl_beta = 0.0;   // "paper" preset = 1e-6
    double stage2_temperature = 1.0;
    std::string stage2_reward_backbone = "overall";  // or one backbone name
    int stage2_reward_steps = 20;
    int stage2_groups_per_step = 1;
    int stage2_old_refresh = 1;
    double stage2_clip_norm = 1.0;
    int stage2_eval_every = 50;
    int stage2_ckpt_every = 100;

    int stage3_steps = 200;
    int stage3_group = 8;          // sampled images per condition
    double stage3_lr = 1e-5;
    double stage3_clip_eps = 0.2;
    double stage3_kl_beta = 0.01;
    int stage3_rollout_steps = 20;
    int stage3_validation_steps = 30;
    double stage3_noise_level = 0.7;
    int stage3_sources = 256;      // train scenes given frozen captions
    std::string stage3_captioner_source = "stage2";  // or "pretrain"
    int stage3_groups_per_step = 1;
    int stage3_old_refresh = 1;
    double stage3_clip_norm = 1.0;
    int stage3_eval_every = 50;
    int stage3_ckpt_every = 100;

    int sampler_eval_steps = 40;
    double sampler_cfg = 5.0;

    std::string out_dir = "runs/default";

    void set(const std::string& key, const std::string& value);
    void validate() const;

    uint64_t captioner_hash() const { return captioner.arch_hash(); }
    uint64_t decoder_hash() const {
        // projector input width depends on the captioner, so fold it in
        return decoder.arch_hash() ^ detail::mix64(static_cast<uint64_t>(captioner.dim));
    }
};

namespace cfgdetail {

inline int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' wants an integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' wants a number, got '" + v + "'");
    }
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' wants an unsigned integer, got '" + v + "'");
    }
}

}  // namespace cfgdetail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    using namespace cfgdetail;
    if (key == "seed") seed = to_u64(key, value);
    else if (key == "data.n") data_n = to_int(key, value);
    else if (key == "data.max_objects") data_max_objects = to_int(key, value);
    else if (key == "captioner.dim") captioner.dim = to_int(key, value);
    else if (key == "captioner.layers") captioner.layers = to_int(key, value);
    else if (key == "captioner.max_len") captioner.max_len = to_int(key, value);
    else if (key == "captioner.mlp_mult") captioner.mlp_mult = to_int(key, value);
    else if (key == "decoder.cond_dim") decoder.cond_dim = to_int(key, value);
    else if (key == "decoder.time_dim") decoder.time_dim = to_int(key, value);
    else if (key == "decoder.width") decoder.width = to_int(key, value);
    else if (key == "decoder.hidden_layers") decoder.hidden_layers = to_int(key, value);
    else if (key == "pretrain.steps") pretrain_steps = to_int(key, value);
    else if (key == "pretrain.lr") pretrain_lr = to_double(key, value);
    else if (key == "pretrain.batch") pretrain_batch = to_int(key, value);
    else if (key == "pretrain.clip_norm") pretrain_clip_norm = to_double(key, value);
    else if (key == "pretrain.eval_every") pretrain_eval_every = to_int(key, value);
    else if (key == "pretrain.ckpt_every") pretrain_ckpt_every = to_int(key, value);
    else if (key == "stage1.steps") stage1_steps = to_int(key, value);
    else if (key == "stage1.lr") stage1_lr = to_double(key, value);
    else if (key == "stage1.batch") stage1_batch = to_int(key, value);
    else if (key == "stage1.p_drop") stage1_p_drop = to_double(key, value);
    else if (key == "stage1.clip_norm") stage1_clip_norm = to_double(key, value);
    else if (key == "stage1.eval_every") stage1_eval_every = to_int(key, value);
    else if (key == "stage1.ckpt_every") stage1_ckpt_every = to_int(key, value);
    else if (key == "stage2.steps") stage2_steps = to_int(key, value);
    else if (key == "stage2.group") stage2_group = to_int(key, value);
    else if (key == "stage2.lr") stage2_lr = to_double(key, value);
    else if (key == "stage2.clip_eps") stage2_clip_eps = to_double(key, value);
    else if (key == "stage2.kl_beta") stage2_kl_beta = (value == "paper") ? 1e-6 : to_double(key, value);
    else if (key == "stage2.temperature") stage2_temperature = to_double(key, value);
    else if (key == "stage2.reward_backbone") stage2_reward_backbone = value;
    else if (key == "stage2.reward_steps") stage2_reward_steps = to_int(key, value);
    else if (key == "stage2.groups_per_step") stage2_groups_per_step = to_int(key, value);
    else if (key == "stage2.old_refresh") stage2_old_refresh = to_int(key, value);
    else if (key == "stage2.clip_norm") stage2_clip_norm = to_double(key, value);
    else if (key == "stage2.eval_every") stage2_eval_every = to_int(key, value);
    else if (key == "stage2.ckpt_every") stage2_ckpt_every = to_int(key, value);
    else if (key == "stage3.steps") stage3_steps = to_int(key, value);
    else if (key == "stage3.group") stage3_group = to_int(key, value);
    else if (key == "stage3.lr") stage3_lr = to_double(key, value);
    else if (key == "stage3.clip_eps") stage3_clip_eps = to_double(key, value);
    else if (key == "stage3.kl_beta") stage3_kl_beta = to_double(key, value);
    else if (key == "stage3.rollout_steps") stage3_rollout_steps = to_int(key, value);
    else if (key == "stage3.validation_steps") stage3_validation_steps = to_int(key, value);
    else if (key == "stage3.noise_level") stage3_noise_level = to_double(key, value);
    else if (key == "stage3.sources") stage3_sources = to_int(key, value);
    else if (key == "stage3.captioner_source") stage3_captioner_source = value;
    else if (key == "stage3.groups_per_step") stage3_groups_per_step = to_int(key, value);
    else if (key == "stage3.old_refresh") stage3_old_refresh = to_int(key, value);
    else if (key == "stage3.clip_norm") stage3_clip_norm = to_double(key, value);
    else if (key == "stage3.eval_every") stage3_eval_every = to_int(key, value);
    else if (key == "stage3.ckpt_every") stage3_ckpt_every = to_int(key, value);
    else if (key == "sampler.eval_steps") sampler_eval_steps = to_int(key, value);
    else if (key == "sampler.cfg") sampler_cfg = to_double(key, value);
    else if (key == "paths.out") out_dir = value;
    else throw ConfigError("unknown config key '" + key + "'");
}

inline void RunConfig::validate() const {
    auto positive = [](long long v, const char* what) {
        if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(data_n, "data.n");
    if (data_max_objects < 1 || data_max_objects > kMaxObjects) throw ConfigError("data.max_objects must be in 1..4");
    positive(captioner.dim, "captioner.dim");
    positive(captioner.layers, "captioner.layers");
    if (captioner.max_len < 2) throw ConfigError("captioner.max_len must be >= 2");
    positive(decoder.cond_dim, "decoder.cond_dim");
    if (decoder.time_dim <= 0 || decoder.time_dim % 2 != 0) throw ConfigError("decoder.time_dim must be positive and even");
    positive(decoder.width, "decoder.width");
    positive(decoder.hidden_layers, "decoder.hidden_layers");
    positive(pretrain_steps, "pretrain.steps");
    positive(pretrain_batch, "pretrain.batch");
    positive(stage1_steps, "stage1.steps");
    positive(stage1_batch, "stage1.batch");
    if (stage1_p_drop < 0.0 || stage1_p_drop >= 1.0) throw ConfigError("stage1.p_drop must be in [0,1)");
    positive(stage2_steps, "stage2.steps");
    if (stage2_group < 2) throw ConfigError("stage2.group must be >= 2");
    positive(stage3_steps, "stage3.steps");
    if (stage3_group < 2) throw ConfigError("stage3.group must be >= 2");
    positive(stage3_rollout_steps, "stage3.rollout_steps");
    positive(stage3_validation_steps, "stage3.validation_steps");
    positive(stage3_sources, "stage3.sources");
    if (stage3_captioner_source != "stage2" && stage3_captioner_source != "pretrain")
        throw ConfigError("stage3.captioner_source must be 'stage2' or 'pretrain'");
    if (stage2_reward_backbone != "overall") backbone_from_name(stage2_reward_backbone);
    positive(sampler_eval_steps, "sampler.eval_steps");
    if (sampler_cfg < 0.0) throw ConfigError("sampler.cfg must be >= 0");
}

inline RunConfig load_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig cfg;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file '" + path + "'");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                bool blank = true;
                for (char c : line) blank = blank && std::isspace(static_cast<unsigned char>(c));
                if (blank) continue;
                throw ConfigError("bad config line " + std::to_string(lineno) + " in '" + path + "'");
            }
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
            };
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

inline RewardSpec reward_from_config(const RunConfig& cfg) {
    RewardSpec r;
    if (cfg.stage2_reward_backbone == "overall") {
        r.use_overall = true;
    } else {
        r.use_overall = false;
        r.backbone = backbone_from_name(cfg.stage2_reward_backbone);
    }
    return r;
}

}  // namespace recap
