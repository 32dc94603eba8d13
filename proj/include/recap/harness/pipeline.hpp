// Orchestration behind the CLI verbs: model bundles, checkpoint wiring, the
// four training loops, evaluation reports, and single reconstructions.
#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "recap/bench/protocol.hpp"
#include "recap/core/checkpoint.hpp"
#include "recap/harness/config.hpp"
#include "recap/harness/metrics.hpp"
#include "recap/io/ppm.hpp"
#include "recap/rl/grpo.hpp"
#include "recap/scene/dataset.hpp"

namespace recap {

struct ArtifactPaths {
    std::string out;

    std::string captioner_ckpt() const { return out + "/captioner.ckpt"; }
    std::string decoder_stage1_ckpt() const { return out + "/decoder-stage1.ckpt"; }
    std::string captioner_stage2_ckpt() const { return out + "/captioner-stage2.ckpt"; }
    std::string decoder_stage3_ckpt() const { return out + "/decoder-stage3.ckpt"; }
    std::string metrics(const std::string& stage) const { return out + "/metrics-" + stage + ".jsonl"; }
    std::string timings(const std::string& stage) const { return out + "/timings-" + stage + ".jsonl"; }

    void ensure() const { std::filesystem::create_directories(out); }
};

template <typename S>
struct Models {
    ParameterStore<S> cap_store, dec_store;
    std::unique_ptr<CaptionerModel<S>> captioner;
    std::unique_ptr<Projector<S>> projector;
    std::unique_ptr<VelocityNet<S>> decoder;
    IdentityCodec<S> codec;
};

template <typename S>
std::unique_ptr<Models<S>> make_models(const RunConfig& cfg) {
    auto m = std::make_unique<Models<S>>();
    SeededRng crng = SeededRng(cfg.seed).split(0xCAB0);
    m->captioner = std::make_unique<CaptionerModel<S>>(m->cap_store, cfg.captioner, crng);
    m->cap_store.lock();
    SeededRng drng = SeededRng(cfg.seed).split(0xDEC0);
    DecoderConfig dc = cfg.decoder;
    dc.latent_dim = m->codec.latent_dim();
    m->decoder = std::make_unique<VelocityNet<S>>(m->dec_store, dc, drng);
    m->projector = std::make_unique<Projector<S>>(m->dec_store, cfg.captioner.dim, dc.cond_dim, drng);
    m->dec_store.lock();
    return m;
}

template <typename S>
SamplerConfig eval_sampler(const RunConfig& cfg) {
    SamplerConfig sc;
    sc.steps = cfg.sampler_eval_steps;
    sc.cfg_scale = cfg.sampler_cfg;
    sc.mode = SamplerMode::Ode;
    return sc;
}

inline uint64_t eval_seed_of(const RunConfig& cfg) { return detail::hash_pair(cfg.seed, 0xE7A15EEDULL); }

// ---- shared eval helpers ----

template <typename S>
double caption_eval_ce(const CaptionerModel<S>& model, const std::vector<DatasetRecord>& records) {
    ag::NoGradGuard ng;
    double total = 0.0;
    int64_t tokens = 0;
    for (const auto& rec : records) {
        auto lp = model.caption_logprob(&rec.image, rec.caption);
        for (int64_t i = 0; i < lp->numel(); ++i) total -= static_cast<double>(lp->data[i]);
        tokens += lp->numel();
    }
    return total / static_cast<double>(tokens);
}

template <typename S>
double caption_eval_f1(const CaptionerModel<S>& model, const std::vector<DatasetRecord>& records) {
    ag::NoGradGuard ng;
    double acc = 0.0;
    for (const auto& rec : records)
        acc += judge_caption(model.greedy_caption(rec.image, model.config().max_len), rec.scene).f1;
    return acc / static_cast<double>(records.size());
}

// Frozen-caption reconstruction score used by stage-3 validation.
template <typename S>
double frozen_caption_eval(const VelocityNet<S>& net, const LatentCodec<S>& codec,
                           const std::vector<std::vector<S>>& conds, const std::vector<DatasetRecord>& records,
                           int steps, double cfg_scale, uint64_t seed, const RewardSpec& reward) {
    SamplerConfig sc;
    sc.steps = steps;
    sc.cfg_scale = cfg_scale;
    sc.mode = SamplerMode::Ode;
    std::vector<SeededRng> rngs;
    const SeededRng base(seed);
    for (size_t i = 0; i < conds.size(); ++i) rngs.push_back(base.split(i));
    auto recons = ode_sample_batch(net, codec, conds, sc, rngs);
    double acc = 0.0;
    for (size_t i = 0; i < records.size(); ++i) acc += reward.score(records[i].image, recons[i]);
    return acc / static_cast<double>(records.size());
}

// ---- verbs ----

inline void run_gen_data(const RunConfig& cfg, const std::string& dir, bool force) {
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    export_dataset(ds, dir, force);
    std::cout << "wrote " << ds.train.size() << " train + " << ds.eval_split.size() << " eval records to " << dir
              << "\ncontent hash " << hash_hex(dataset_content_hash(ds)) << "\n";
}

template <typename S>
void run_pretrain_captioner(const RunConfig& cfg, const std::string& resume) {
    ArtifactPaths paths{cfg.out_dir};
    paths.ensure();
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    auto models = make_models<S>(cfg);
    AdamOptimizer<S> opt(cfg.pretrain_lr, 0.9, 0.999, 1e-8, cfg.pretrain_clip_norm);

    int64_t start = 0;
    if (!resume.empty()) {
        load_store(resume, "captioner", cfg.captioner_hash(), models->cap_store, &opt);
        start = models->cap_store.step_count();
    }
    MetricsWriter metrics(paths.metrics("pretrain"), paths.timings("pretrain"), !resume.empty());

    std::vector<const DatasetRecord*> batch;
    double best_f1 = 0.0, loss = 0.0;
    for (int64_t step = start + 1; step <= cfg.pretrain_steps; ++step) {
        WallTimer timer;
        SeededRng rng = SeededRng(cfg.seed).split(0x0BA7).split(static_cast<uint64_t>(step));
        batch.clear();
        for (int b = 0; b < cfg.pretrain_batch; ++b)
            batch.push_back(&ds.train[rng.uniform_int(ds.train.size())]);
        loss = captioner_pretrain_step(*models->captioner, batch.begin(), batch.end(), opt);
        nlohmann::json rec = {{"stage", "pretrain"}, {"step", step}, {"loss", loss}};
        if (step % cfg.pretrain_eval_every == 0 || step == cfg.pretrain_steps) {
            const double f1 = caption_eval_f1(*models->captioner, ds.eval_split);
            rec["eval_ce"] = caption_eval_ce(*models->captioner, ds.eval_split);
            rec["eval_f1"] = f1;
            best_f1 = std::max(best_f1, f1);
        }
        metrics.write(rec, timer.elapsed_ms());
        if (step % cfg.pretrain_ckpt_every == 0 || step == cfg.pretrain_steps)
            save_store(paths.captioner_ckpt(), "captioner", step, cfg.captioner_hash(), models->cap_store, &opt);
    }
    std::cout << "pretrain done: final loss " << loss << ", best eval F1 " << best_f1 << "\n"
              << "checkpoint " << paths.captioner_ckpt() << "\n";
}

template <typename S>
void run_stage1(const RunConfig& cfg, const std::string& resume) {
    ArtifactPaths paths{cfg.out_dir};
    paths.ensure();
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    auto models = make_models<S>(cfg);
    load_store(paths.captioner_ckpt(), "captioner", cfg.captioner_hash(), models->cap_store);
    models->cap_store.set_all_trainable(false);  // frozen encoder during stage-1

    AdamOptimizer<S> opt(cfg.stage1_lr, 0.9, 0.999, 1e-8, cfg.stage1_clip_norm);
    int64_t start = 0;
    if (!resume.empty()) {
        load_store(resume, "decoder", cfg.decoder_hash(), models->dec_store, &opt);
        start = models->dec_store.step_count();
    }
    MetricsWriter metrics(paths.metrics("stage1"), paths.timings("stage1"), !resume.empty());

    // the captioner is frozen, so text-mode hidden states and image latents
    // are both cacheable
    std::vector<std::vector<S>> h_cache(ds.train.size());
    std::vector<std::vector<S>> latents(ds.train.size());
    {
        ag::NoGradGuard ng;
        for (size_t i = 0; i < ds.train.size(); ++i) {
            h_cache[i] = models->captioner->hidden_last(nullptr, ds.train[i].caption)->data;
            latents[i] = models->codec.encode(ds.train[i].image);
        }
    }

    const RewardSpec reward = reward_from_config(cfg);
    double best_overall = -1e9, loss = 0.0;
    const int d = cfg.captioner.dim;
    for (int64_t step = start + 1; step <= cfg.stage1_steps; ++step) {
        WallTimer timer;
        SeededRng rng = SeededRng(cfg.seed).split(0x57A6).split(static_cast<uint64_t>(step));
        std::vector<std::vector<S>> z1;
        std::vector<TensorPtr<S>> conds;
        for (int b = 0; b < cfg.stage1_batch; ++b) {
            const size_t idx = rng.uniform_int(ds.train.size());
            z1.push_back(latents[idx]);
            conds.push_back(models->projector->apply(ag::leaf<S>({1, d}, std::vector<S>(h_cache[idx]))));
        }
        models->dec_store.zero_grad();
        auto loss_node = rf_loss(*models->decoder, z1, conds, rng, cfg.stage1_p_drop);
        loss = static_cast<double>(loss_node->data[0]);
        if (!std::isfinite(loss)) throw NumericError("stage-1 loss non-finite");
        ag::backward(loss_node);
        opt.step(models->dec_store);

        nlohmann::json rec = {{"stage", "stage1"}, {"step", step}, {"rf_loss", loss}};
        if (step % cfg.stage1_eval_every == 0 || step == cfg.stage1_steps) {
            auto res = protocol1_eval(*models->captioner, *models->projector, *models->decoder, models->codec,
                                      ds.eval_split, eval_sampler<S>(cfg), eval_seed_of(cfg), reward);
            rec["eval_overall"] = res.means.overall;
            rec["eval_reward_score"] = res.mean_reward_score;
            rec["eval_f1"] = res.mean_caption_f1;
            best_overall = std::max(best_overall, res.means.overall);
        }
        metrics.write(rec, timer.elapsed_ms());
        if (step % cfg.stage1_ckpt_every == 0 || step == cfg.stage1_steps)
            save_store(paths.decoder_stage1_ckpt(), "decoder", step, cfg.decoder_hash(), models->dec_store, &opt);
    }
    std::cout << "stage1 done: final rf_loss " << loss << ", best eval overall " << best_overall << "\n"
              << "checkpoint " << paths.decoder_stage1_ckpt() << "\n";
}

template <typename S>
void run_stage2(const RunConfig& cfg, const std::string& resume) {
    ArtifactPaths paths{cfg.out_dir};
    paths.ensure();
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    auto models = make_models<S>(cfg);
    load_store(paths.captioner_ckpt(), "captioner", cfg.captioner_hash(), models->cap_store);
    load_store(paths.decoder_stage1_ckpt(), "decoder", cfg.decoder_hash(), models->dec_store);
    models->dec_store.set_all_trainable(false);  // decoder + projector are a frozen environment
    models->cap_store.set_step_count(0);         // stage-local optimizer clock

    AdamOptimizer<S> opt(cfg.stage2_lr, 0.9, 0.999, 1e-8, cfg.stage2_clip_norm);
    int64_t start = 0;
    if (!resume.empty()) {
        load_store(resume, "captioner", cfg.captioner_hash(), models->cap_store, &opt);
        start = models->cap_store.step_count();
    }
    MetricsWriter metrics(paths.metrics("stage2"), paths.timings("stage2"), !resume.empty());

    GrpoConfig gcfg;
    gcfg.group = cfg.stage2_group;
    gcfg.clip_eps = cfg.stage2_clip_eps;
    gcfg.kl_beta = cfg.stage2_kl_beta;
    gcfg.groups_per_step = cfg.stage2_groups_per_step;
    gcfg.temperature = cfg.stage2_temperature;
    gcfg.old_refresh = cfg.stage2_old_refresh;
    SamplerConfig reward_sampler;
    reward_sampler.steps = cfg.stage2_reward_steps;
    reward_sampler.cfg_scale = cfg.sampler_cfg;
    reward_sampler.mode = SamplerMode::Ode;
    const RewardSpec reward = reward_from_config(cfg);

    Stage2Trainer<S> trainer(*models->captioner, opt, *models->decoder, models->codec, *models->projector, ds.train,
                             reward, gcfg, reward_sampler, detail::hash_pair(cfg.seed, 0x5702));

    double best_eval = -1e9;
    for (int64_t step = start + 1; step <= cfg.stage2_steps; ++step) {
        WallTimer timer;
        auto m = trainer.step(static_cast<int>(step));
        nlohmann::json rec = {{"stage", "stage2"},        {"step", step},
                              {"mean_reward", m.mean_reward}, {"mean_caption_len", m.mean_caption_len},
                              {"kl", m.kl},               {"clip_fraction", m.clip_fraction}};
        if (m.aborted) {
            rec["aborted"] = true;
            metrics.write(rec, timer.elapsed_ms());
            std::cout << "stage2 aborted at step " << step << " (non-finite training signal); last checkpoint kept\n";
            throw NumericError("stage-2 aborted");
        }
        if (step % cfg.stage2_eval_every == 0 || step == cfg.stage2_steps) {
            auto res = protocol1_eval(*models->captioner, *models->projector, *models->decoder, models->codec,
                                      ds.eval_split, eval_sampler<S>(cfg), eval_seed_of(cfg), reward);
            rec["eval_reward_score"] = res.mean_reward_score;
            rec["eval_overall"] = res.means.overall;
            rec["eval_f1"] = res.mean_caption_f1;
            rec["eval_caption_len"] = res.mean_caption_len;
            best_eval = std::max(best_eval, res.mean_reward_score);
        }
        metrics.write(rec, timer.elapsed_ms());
        if (step % cfg.stage2_ckpt_every == 0 || step == cfg.stage2_steps) {
            models->cap_store.set_step_count(step);
            save_store(paths.captioner_stage2_ckpt(), "captioner", step, cfg.captioner_hash(), models->cap_store, &opt);
        }
    }
    std::cout << "stage2 done: best eval reward score " << best_eval << "\n"
              << "checkpoint " << paths.captioner_stage2_ckpt() << "\n";
}

template <typename S>
void run_stage3(const RunConfig& cfg, const std::string& resume) {
    ArtifactPaths paths{cfg.out_dir};
    paths.ensure();
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    auto models = make_models<S>(cfg);
    const std::string cap_path =
        (cfg.stage3_captioner_source == "stage2") ? paths.captioner_stage2_ckpt() : paths.captioner_ckpt();
    load_store(cap_path, "captioner", cfg.captioner_hash(), models->cap_store);
    models->cap_store.set_all_trainable(false);  // LVLM fully frozen
    load_store(paths.decoder_stage1_ckpt(), "decoder", cfg.decoder_hash(), models->dec_store);
    models->dec_store.set_step_count(0);  // stage-local optimizer clock

    AdamOptimizer<S> opt(cfg.stage3_lr, 0.9, 0.999, 1e-8, cfg.stage3_clip_norm);
    int64_t start = 0;
    if (!resume.empty()) {
        load_store(resume, "decoder", cfg.decoder_hash(), models->dec_store, &opt);
        start = models->dec_store.step_count();
    }
    MetricsWriter metrics(paths.metrics("stage3"), paths.timings("stage3"), !resume.empty());

    // captions fixed once per source under the frozen captioner
    const int n_sources = std::min<int>(cfg.stage3_sources, static_cast<int>(ds.train.size()));
    std::vector<const RasterImage*> sources;
    std::vector<std::vector<S>> conds;
    std::vector<std::vector<S>> eval_conds;
    {
        ag::NoGradGuard ng;
        for (int i = 0; i < n_sources; ++i) {
            auto caption = models->captioner->greedy_caption(ds.train[i].image, cfg.captioner.max_len);
            conds.push_back(models->captioner->condition_from_text(*models->projector, caption)->data);
            sources.push_back(&ds.train[i].image);
        }
        for (const auto& rec : ds.eval_split) {
            auto caption = models->captioner->greedy_caption(rec.image, cfg.captioner.max_len);
            eval_conds.push_back(models->captioner->condition_from_text(*models->projector, caption)->data);
        }
    }

    GrpoConfig gcfg;
    gcfg.group = cfg.stage3_group;
    gcfg.clip_eps = cfg.stage3_clip_eps;
    gcfg.kl_beta = cfg.stage3_kl_beta;
    gcfg.groups_per_step = cfg.stage3_groups_per_step;
    gcfg.old_refresh = cfg.stage3_old_refresh;
    SamplerConfig rollout;
    rollout.steps = cfg.stage3_rollout_steps;
    rollout.cfg_scale = cfg.sampler_cfg;
    rollout.mode = SamplerMode::Sde;
    rollout.noise_level = cfg.stage3_noise_level;
    const RewardSpec reward = reward_from_config(cfg);

    Stage3Trainer<S> trainer(*models->decoder, opt, models->codec, sources, conds, reward, gcfg, rollout,
                             detail::hash_pair(cfg.seed, 0x5703));

    double best_eval = -1e9;
    for (int64_t step = start + 1; step <= cfg.stage3_steps; ++step) {
        WallTimer timer;
        auto m = trainer.step(static_cast<int>(step));
        nlohmann::json rec = {{"stage", "stage3"},
                              {"step", step},
                              {"mean_reward", m.mean_reward},
                              {"kl", m.kl},
                              {"clip_fraction", m.clip_fraction}};
        if (m.aborted) {
            rec["aborted"] = true;
            metrics.write(rec, timer.elapsed_ms());
            std::cout << "stage3 aborted at step " << step << " (non-finite training signal); last checkpoint kept\n";
            throw NumericError("stage-3 aborted");
        }
        if (step % cfg.stage3_eval_every == 0 || step == cfg.stage3_steps) {
            const double score = frozen_caption_eval(*models->decoder, models->codec, eval_conds, ds.eval_split,
                                                     cfg.stage3_validation_steps, cfg.sampler_cfg, eval_seed_of(cfg),
                                                     reward);
            rec["eval_reward_score"] = score;
            best_eval = std::max(best_eval, score);
        }
        metrics.write(rec, timer.elapsed_ms());
        if (step % cfg.stage3_ckpt_every == 0 || step == cfg.stage3_steps) {
            models->dec_store.set_step_count(step);
            save_store(paths.decoder_stage3_ckpt(), "decoder", step, cfg.decoder_hash(), models->dec_store, &opt);
        }
    }
    std::cout << "stage3 done: best eval reconstruction score " << best_eval << "\n"
              << "checkpoint " << paths.decoder_stage3_ckpt() << "\n";
}

// ---- reports ----

inline std::string protocol1_table(const Protocol1Result& res) {
    char buf[256];
    std::string out;
    out += "backbone        mean score\n";
    for (int b = 0; b < kNumBackbones; ++b) {
        std::snprintf(buf, sizeof(buf), "%-15s %10.4f\n", backbone_name(static_cast<Backbone>(b)),
                      res.means.per_backbone[b]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-15s %10.4f\n", "overall", res.means.overall);
    out += buf;
    std::snprintf(buf, sizeof(buf), "mean caption F1 %10.4f\nmean caption len %9.2f\n", res.mean_caption_f1,
                  res.mean_caption_len);
    out += buf;
    return out;
}

inline void write_protocol1_reports(const Protocol1Result& res, const std::string& table_path,
                                    const std::string& records_path) {
    std::ofstream table(table_path, std::ios::trunc);
    if (!table) throw IoError("cannot write report '" + table_path + "'");
    table << protocol1_table(res);
    std::ofstream records(records_path, std::ios::trunc);
    if (!records) throw IoError("cannot write report '" + records_path + "'");
    for (const auto& row : res.rows) {
        nlohmann::json r = {{"scene_id", row.scene_id},
                            {"overall", row.scores.overall},
                            {"caption_f1", row.caption_f1},
                            {"caption_len", row.caption_len}};
        for (int b = 0; b < kNumBackbones; ++b)
            r[backbone_name(static_cast<Backbone>(b))] = row.scores.per_backbone[b];
        records << r.dump() << "\n";
    }
}

template <typename S>
Protocol1Result run_protocol1(const RunConfig& cfg, const std::string& captioner_path,
                              const std::string& decoder_path, bool oracle) {
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    const RewardSpec reward = reward_from_config(cfg);
    Protocol1Result res;
    if (oracle) {
        res = protocol1_oracle(ds.eval_split, reward);
    } else {
        auto models = make_models<S>(cfg);
        load_store(captioner_path, "captioner", cfg.captioner_hash(), models->cap_store);
        load_store(decoder_path, "decoder", cfg.decoder_hash(), models->dec_store);
        res = protocol1_eval(*models->captioner, *models->projector, *models->decoder, models->codec, ds.eval_split,
                             eval_sampler<S>(cfg), eval_seed_of(cfg), reward);
    }
    ArtifactPaths paths{cfg.out_dir};
    paths.ensure();
    write_protocol1_reports(res, paths.out + "/protocol1.txt", paths.out + "/protocol1.jsonl");
    std::cout << protocol1_table(res);
    return res;
}

struct Protocol2Result {
    std::vector<double> f1_model, f1_baseline;
    double win_rate = 0.0;  // model vs baseline
    double mean_f1_model = 0.0, mean_f1_baseline = 0.0;
};

template <typename S>
Protocol2Result run_protocol2(const RunConfig& cfg, const std::string& captioner_path,
                              const std::string& baseline_path) {
    auto ds = build_dataset(cfg.data_n, cfg.seed, cfg.data_max_objects);
    Protocol2Result res;

    auto evaluate = [&cfg, &ds](const std::string& path) {
        auto models = make_models<S>(cfg);
        load_store(path, "captioner", cfg.captioner_hash(), models->cap_store);
        ag::NoGradGuard ng;
        std::vector<double> f1;
        for (const auto& rec : ds.eval_split)
            f1.push_back(
                judge_caption(models->captioner->greedy_caption(rec.image, cfg.captioner.max_len), rec.scene).f1);
        return f1;
    };
    res.f1_model = evaluate(captioner_path);
    res.f1_baseline = evaluate(baseline_path);
    res.win_rate = pairwise_win_rate(res.f1_model, res.f1_baseline);
    for (double v : res.f1_model) res.mean_f1_model += v;
    for (double v : res.f1_baseline) res.mean_f1_baseline += v;
    res.mean_f1_model /= res.f1_model.size();
    res.mean_f1_baseline /= res.f1_baseline.size();

    ArtifactPaths paths{cfg.out_dir};
    paths.ensure();
    std::ofstream table(paths.out + "/protocol2.txt", std::ios::trunc);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "mean caption F1: model %.4f, baseline %.4f\nwin rate (model vs baseline): %.1f%%\n",
                  res.mean_f1_model, res.mean_f1_baseline, res.win_rate);
    table << buf;
    std::ofstream records(paths.out + "/protocol2.jsonl", std::ios::trunc);
    for (size_t i = 0; i < res.f1_model.size(); ++i)
        records << nlohmann::json({{"scene_id", i}, {"f1_model", res.f1_model[i]}, {"f1_baseline", res.f1_baseline[i]}})
                       .dump()
                << "\n";
    std::cout << buf;
    return res;
}

// ---- single reconstruction / caption ----

inline Scene scene_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open scene file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed scene file '" + path + "': " + e.what());
    }
    if (j.is_object() && j.contains("scene")) j = j["scene"];
    if (!j.is_array()) throw InputError("scene file must hold an object array");
    return scene_from_json(j);
}

template <typename S>
UnifiedScoreReport run_reconstruct(const RunConfig& cfg, const std::string& input, const std::string& captioner_path,
                                   const std::string& decoder_path, bool oracle, const std::string& out_prefix) {
    const bool is_scene = input.size() > 5 && input.substr(input.size() - 5) == ".json";
    Scene scene;
    RasterImage source;
    if (is_scene) {
        scene = scene_from_file(input);
        source = render(scene);
    } else {
        source = read_ppm(input);
    }

    CaptionTokens caption;
    RasterImage recon;
    if (oracle) {
        if (!is_scene) throw InputError("oracle reconstruction needs a scene .json input");
        caption = canonical_caption(scene);
        recon = render(parse_caption(caption).scene);
    } else {
        auto models = make_models<S>(cfg);
        load_store(captioner_path, "captioner", cfg.captioner_hash(), models->cap_store);
        load_store(decoder_path, "decoder", cfg.decoder_hash(), models->dec_store);
        ag::NoGradGuard ng;
        caption = models->captioner->greedy_caption(source, cfg.captioner.max_len);
        auto cond = models->captioner->condition_from_text(*models->projector, caption);
        recon = ode_sample(*models->decoder, models->codec, cond->data, eval_sampler<S>(cfg),
                           SeededRng(eval_seed_of(cfg)));
    }

    const auto report = unified_score(source, recon);
    write_ppm(out_prefix + ".recon.ppm", recon);
    {
        std::ofstream cap(out_prefix + ".caption.txt", std::ios::trunc);
        for (size_t i = 0; i < caption.size(); ++i) cap << (i ? " " : "") << caption[i];
        cap << "\n" << caption_to_string(caption) << "\n";
    }
    nlohmann::json sj = {{"overall", report.overall}};
    for (int b = 0; b < kNumBackbones; ++b) sj[backbone_name(static_cast<Backbone>(b))] = report.per_backbone[b];
    {
        std::ofstream score(out_prefix + ".score.json", std::ios::trunc);
        score << sj.dump(2) << "\n";
    }
    std::cout << "caption: " << caption_to_string(caption) << "\n"
              << "scores: " << sj.dump() << "\n"
              << "wrote " << out_prefix << ".recon.ppm\n";
    return report;
}

template <typename S>
CaptionTokens run_caption(const RunConfig& cfg, const std::string& input, const std::string& captioner_path) {
    const bool is_scene = input.size() > 5 && input.substr(input.size() - 5) == ".json";
    RasterImage img = is_scene ? render(scene_from_file(input)) : read_ppm(input);
    auto models = make_models<S>(cfg);
    load_store(captioner_path, "captioner", cfg.captioner_hash(), models->cap_store);
    ag::NoGradGuard ng;
    auto caption = models->captioner->greedy_caption(img, cfg.captioner.max_len);
    for (size_t i = 0; i < caption.size(); ++i) std::cout << (i ? " " : "") << caption[i];
    std::cout << "\n" << caption_to_string(caption) << "\n";
    return caption;
}

}  // namespace recap
