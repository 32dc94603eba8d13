// Group-relative policy optimization: within-group advantage normalization,
// the clipped importance-ratio surrogate with k3 KL penalty, and the two
// post-training stages (captioner-as-policy, then decoder-as-policy).
#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "recap/bench/score.hpp"
#include "recap/flow/rectified_flow.hpp"
#include "recap/model/captioner.hpp"
#include "recap/model/velocity_net.hpp"
#include "recap/scene/dataset.hpp"

namespace recap {

struct GrpoConfig {
    int group = 4;             // G
    double clip_eps = 0.2;     // trust-region width
    double kl_beta = 0.0;      // KL penalty coefficient against the reference policy
    int groups_per_step = 1;   // groups folded into one update
    double std_floor = 1e-8;   // advantage normalization guard
    double temperature = 1.0;  // stage-2 sampling temperature
    int old_refresh = 1;       // snapshot cadence in steps (1 = on-policy)

    void validate() const {
        if (group < 2) throw ConfigError("grpo group size must be >= 2");
        if (clip_eps <= 0.0) throw ConfigError("grpo clip epsilon must be > 0");
        if (kl_beta < 0.0) throw ConfigError("grpo kl beta must be >= 0");
        if (std_floor <= 0.0) throw ConfigError("grpo std floor must be > 0");
        if (groups_per_step < 1) throw ConfigError("grpo groups_per_step must be >= 1");
        if (old_refresh < 1) throw ConfigError("grpo old_refresh must be >= 1");
    }
};

// (R_i - mean) / max(population std, floor). All-equal rewards give zeros.
inline std::vector<double> advantages(const std::vector<double>& rewards, double std_floor) {
    if (rewards.size() < 2) throw InputError("advantages: need at least 2 rewards");
    for (double r : rewards)
        if (!std::isfinite(r)) throw InputError("advantages: non-finite reward");
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rewards.size());
    const double denom = std::max(std::sqrt(var), std_floor);
    std::vector<double> out(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
    return out;
}

// Per-step objective contributions min(r*A, clip(r, 1-eps, 1+eps)*A).
inline std::vector<double> clipped_surrogate(const std::vector<double>& ratios, double advantage, double eps) {
    std::vector<double> out(ratios.size());
    for (size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] > 0.0)) throw InputError("clipped_surrogate: ratios must be positive");
        const double clipped = std::min(1.0 + eps, std::max(1.0 - eps, ratios[i]));
        out[i] = std::min(ratios[i] * advantage, clipped * advantage);
    }
    return out;
}

// k3 estimator of KL(policy || ref), averaged per step; always >= 0.
inline double kl_penalty(const std::vector<double>& logp_policy, const std::vector<double>& logp_ref) {
    if (logp_policy.size() != logp_ref.size()) throw InputError("kl_penalty: length mismatch");
    if (logp_policy.empty()) return 0.0;
    double acc = 0.0;
    for (size_t i = 0; i < logp_policy.size(); ++i) {
        const double d = logp_ref[i] - logp_policy[i];
        acc += std::exp(d) - d - 1.0;
    }
    return acc / static_cast<double>(logp_policy.size());
}

namespace detail {

// Graph form of the clipped surrogate, per step: min(r*A, clip(r)*A).
template <typename S>
TensorPtr<S> surrogate_node(const TensorPtr<S>& ratios, double advantage, double eps) {
    auto adv = static_cast<S>(advantage);
    auto unclipped = ag::scale(ratios, adv);
    auto clipped = ag::scale(ag::clamp(ratios, static_cast<S>(1.0 - eps), static_cast<S>(1.0 + eps)), adv);
    return ag::min_elem(unclipped, clipped);
}

// Graph form of the k3 estimator per step, given constant reference logps.
template <typename S>
TensorPtr<S> k3_node(const TensorPtr<S>& logp_policy, const std::vector<S>& logp_ref) {
    auto ref = ag::leaf<S>(logp_policy->shape, std::vector<S>(logp_ref));
    auto d = ag::sub(ref, logp_policy);
    return ag::add_const(ag::sub(ag::exp(d), d), S(-1));
}

inline double clip_fraction_of(const std::vector<double>& ratios, double eps) {
    if (ratios.empty()) return 0.0;
    int n = 0;
    for (double r : ratios) n += (r < 1.0 - eps || r > 1.0 + eps);
    return static_cast<double>(n) / static_cast<double>(ratios.size());
}

}  // namespace detail

struct StageMetrics {
    int step = 0;
    double mean_reward = 0.0;
    double mean_caption_len = 0.0;  // stage 2 only
    double kl = 0.0;
    double clip_fraction = 0.0;
    double objective = 0.0;
    double grad_norm = 0.0;
    bool aborted = false;
};

// Stage-2: the captioner is the policy; the decoder, projector, and reward
// embedders form a frozen evaluation environment.
template <typename S>
class Stage2Trainer {
   public:
    Stage2Trainer(CaptionerModel<S>& policy, AdamOptimizer<S>& opt, const VelocityNet<S>& decoder,
                  const LatentCodec<S>& codec, const Projector<S>& projector,
                  const std::vector<DatasetRecord>& train, const RewardSpec& reward, const GrpoConfig& cfg,
                  const SamplerConfig& reward_sampler, uint64_t seed)
        : policy_(policy),
          opt_(opt),
          decoder_(decoder),
          codec_(codec),
          projector_(projector),
          train_(train),
          reward_(reward),
          cfg_(cfg),
          reward_sampler_(reward_sampler),
          seed_(seed) {
        cfg_.validate();
        if (reward_sampler_.mode != SamplerMode::Ode)
            throw ConfigError("stage-2 reward evaluation uses the deterministic ode sampler");
        if (train_.empty()) throw ConfigError("stage-2: empty training set");
        policy_.freeze_visual_encoder();
        SeededRng dummy(0);
        old_model_ = std::make_unique<CaptionerModel<S>>(old_store_, policy_.config(), dummy);
        ref_model_ = std::make_unique<CaptionerModel<S>>(ref_store_, policy_.config(), dummy);
        old_store_.lock();
        ref_store_.lock();
        refresh_old();
        ref_store_.restore(policy_.store().snapshot());
    }

    void refresh_old() { old_store_.restore(policy_.store().snapshot()); }

    StageMetrics step(int step_idx) {
        if (step_idx % cfg_.old_refresh == 0) refresh_old();
        StageMetrics m;
        m.step = step_idx;
        const auto pre_step = policy_.store().snapshot();
        try {
            run_step(step_idx, m);
        } catch (const NumericError&) {
            policy_.store().restore(pre_step);
            policy_.store().zero_grad();
            m.aborted = true;
        }
        return m;
    }

   private:
    void run_step(int step_idx, StageMetrics& m) {
        SeededRng rng = SeededRng(seed_).split(0x5702).split(static_cast<uint64_t>(step_idx));
        std::vector<TensorPtr<S>> group_terms;
        double reward_acc = 0.0, len_acc = 0.0, kl_acc = 0.0;
        std::vector<double> all_ratios;
        int traj_count = 0;

        for (int g = 0; g < cfg_.groups_per_step; ++g) {
            SeededRng grng = rng.split(static_cast<uint64_t>(g));
            const auto& rec = train_[grng.uniform_int(train_.size())];

            // G rollouts from the old policy
            std::vector<CaptionTrajectory<S>> trajs;
            for (int i = 0; i < cfg_.group; ++i) {
                SeededRng srng = grng.split(100 + static_cast<uint64_t>(i));
                trajs.push_back(old_model_->sample_caption(rec.image, cfg_.temperature, policy_.config().max_len, srng));
            }

            // frozen projector maps each trajectory's h_T to a condition
            std::vector<std::vector<S>> conds;
            {
                ag::NoGradGuard ng;
                for (const auto& t : trajs) {
                    auto h = ag::leaf<S>({1, policy_.config().dim}, std::vector<S>(t.h_last));
                    conds.push_back(projector_.apply(h)->data);
                }
            }

            // reconstruction rewards under a group-shared initial noise seed
            SeededRng noise = grng.split(0x6012);
            auto recons =
                ode_sample_batch(decoder_, codec_, conds, reward_sampler_, std::vector<SeededRng>(cfg_.group, noise));
            std::vector<double> rewards(cfg_.group);
            for (int i = 0; i < cfg_.group; ++i) {
                rewards[i] = reward_(rec.image, recons[i]);
                reward_acc += rewards[i];
                len_acc += trajs[i].emitted();
                ++traj_count;
            }
            auto advs = advantages(rewards, cfg_.std_floor);

            // recompute per-token logps under the current policy
            std::vector<TensorPtr<S>> traj_terms;
            for (int i = 0; i < cfg_.group; ++i) {
                auto lp_new = policy_.caption_logprob(&rec.image, trajs[i].tokens, static_cast<S>(cfg_.temperature));
                std::vector<S> lp_old(trajs[i].logps.begin(), trajs[i].logps.end());
                auto ratios = ag::exp(ag::sub(lp_new, ag::leaf<S>(lp_new->shape, std::vector<S>(lp_old))));
                for (int64_t k = 0; k < ratios->numel(); ++k)
                    all_ratios.push_back(static_cast<double>(ratios->data[k]));
                auto term = ag::mean_all(detail::surrogate_node(ratios, advs[i], cfg_.clip_eps));
                if (cfg_.kl_beta > 0.0) {
                    std::vector<S> ref;
                    {
                        ag::NoGradGuard ng;
                        ref = ref_model_->caption_logprob(&rec.image, trajs[i].tokens, static_cast<S>(cfg_.temperature))
                                  ->data;
                    }
                    auto k3 = detail::k3_node(lp_new, ref);
                    term = ag::sub(term, ag::scale(ag::mean_all(k3), static_cast<S>(cfg_.kl_beta)));
                    kl_acc += static_cast<double>(ag::mean_all(k3)->data[0]);
                } else {
                    // diagnostic: policy drift against the old snapshot
                    std::vector<double> lpn(lp_new->data.begin(), lp_new->data.end());
                    kl_acc += kl_penalty(lpn, trajs[i].logps);
                }
                traj_terms.push_back(term);
            }
            auto group_term = traj_terms[0];
            for (size_t i = 1; i < traj_terms.size(); ++i) group_term = ag::add(group_term, traj_terms[i]);
            group_terms.push_back(ag::scale(group_term, static_cast<S>(1.0 / cfg_.group)));
        }

        auto objective = group_terms[0];
        for (size_t g = 1; g < group_terms.size(); ++g) objective = ag::add(objective, group_terms[g]);
        objective = ag::scale(objective, static_cast<S>(1.0 / cfg_.groups_per_step));
        auto loss = ag::neg(objective);
        if (!std::isfinite(static_cast<double>(loss->data[0]))) throw NumericError("stage-2 loss non-finite");

        policy_.store().zero_grad();
        ag::backward(loss);
        m.grad_norm = opt_.step(policy_.store());

        m.objective = static_cast<double>(objective->data[0]);
        m.mean_reward = reward_acc / traj_count;
        m.mean_caption_len = len_acc / traj_count;
        m.kl = kl_acc / traj_count;
        m.clip_fraction = detail::clip_fraction_of(all_ratios, cfg_.clip_eps);
    }

    CaptionerModel<S>& policy_;
    AdamOptimizer<S>& opt_;
    const VelocityNet<S>& decoder_;
    const LatentCodec<S>& codec_;
    const Projector<S>& projector_;
    const std::vector<DatasetRecord>& train_;
    RewardSpec reward_;
    GrpoConfig cfg_;
    SamplerConfig reward_sampler_;
    uint64_t seed_;

    ParameterStore<S> old_store_, ref_store_;
    std::unique_ptr<CaptionerModel<S>> old_model_, ref_model_;
};

// Stage-3: the decoder is the policy; the captioner is frozen and its
// per-source caption conditions are precomputed once.
template <typename S>
class Stage3Trainer {
   public:
    Stage3Trainer(VelocityNet<S>& policy, AdamOptimizer<S>& opt, const LatentCodec<S>& codec,
                  const std::vector<const RasterImage*>& sources, const std::vector<std::vector<S>>& conditions,
                  const RewardSpec& reward, const GrpoConfig& cfg, const SamplerConfig& rollout, uint64_t seed)
        : policy_(policy),
          opt_(opt),
          codec_(codec),
          sources_(sources),
          conditions_(conditions),
          reward_(reward),
          cfg_(cfg),
          rollout_(rollout),
          seed_(seed) {
        cfg_.validate();
        if (rollout_.mode != SamplerMode::Sde) throw ConfigError("stage-3 rollouts require the sde sampler");
        if (rollout_.noise_level <= 0.0)
            throw ConfigError("stage-3 rollouts need noise_level > 0 (zero-variance densities otherwise)");
        if (sources_.empty() || sources_.size() != conditions_.size())
            throw ConfigError("stage-3: sources and conditions must align");
        policy_.store().set_trainable_prefix("proj.", false);  // projector frozen after stage-1
        SeededRng dummy(0);
        old_net_ = std::make_unique<VelocityNet<S>>(old_store_, policy_.config(), dummy);
        ref_net_ = std::make_unique<VelocityNet<S>>(ref_store_, policy_.config(), dummy);
        old_store_.lock();
        ref_store_.lock();
        refresh_old();
        copy_net_params(ref_store_);
    }

    void refresh_old() { copy_net_params(old_store_); }

    StageMetrics step(int step_idx) {
        if (step_idx % cfg_.old_refresh == 0) refresh_old();
        StageMetrics m;
        m.step = step_idx;
        const auto pre_step = policy_.store().snapshot();
        try {
            run_step(step_idx, m);
        } catch (const NumericError&) {
            policy_.store().restore(pre_step);
            policy_.store().zero_grad();
            m.aborted = true;
        }
        return m;
    }

   private:
    // The policy store also holds the frozen projector; the rollout/ref
    // stores carry only the net parameters, so copy key-by-key.
    void copy_net_params(ParameterStore<S>& dst) {
        for (const auto& [k, t] : dst.entries()) {
            auto src = policy_.store().at(k);
            t->data = src->data;
        }
    }

    void run_step(int step_idx, StageMetrics& m) {
        SeededRng rng = SeededRng(seed_).split(0x5703).split(static_cast<uint64_t>(step_idx));
        std::vector<TensorPtr<S>> group_terms;
        double reward_acc = 0.0, kl_acc = 0.0;
        std::vector<double> all_ratios;
        int traj_count = 0, kl_count = 0;

        for (int g = 0; g < cfg_.groups_per_step; ++g) {
            SeededRng grng = rng.split(static_cast<uint64_t>(g));
            const size_t idx = grng.uniform_int(sources_.size());
            auto trajs = sde_sample_group(*old_net_, conditions_[idx], cfg_.group, rollout_, grng.split(7));

            std::vector<double> rewards(cfg_.group);
            for (int i = 0; i < cfg_.group; ++i) {
                rewards[i] = reward_(*sources_[idx], codec_.decode(trajs[i].states.back()));
                reward_acc += rewards[i];
                ++traj_count;
            }
            auto advs = advantages(rewards, cfg_.std_floor);

            std::vector<TensorPtr<S>> traj_terms;
            for (int i = 0; i < cfg_.group; ++i) {
                std::vector<S> lp_old;
                {
                    ag::NoGradGuard ng;
                    lp_old = trajectory_logprob(*old_net_, trajs[i], rollout_)->data;
                }
                auto lp_new = trajectory_logprob(policy_, trajs[i], rollout_);
                auto ratios = ag::exp(ag::sub(lp_new, ag::leaf<S>(lp_new->shape, std::vector<S>(lp_old))));
                for (int64_t k = 0; k < ratios->numel(); ++k)
                    all_ratios.push_back(static_cast<double>(ratios->data[k]));
                auto term = ag::mean_all(detail::surrogate_node(ratios, advs[i], cfg_.clip_eps));
                if (cfg_.kl_beta > 0.0) {
                    std::vector<S> lp_ref;
                    {
                        ag::NoGradGuard ng;
                        lp_ref = trajectory_logprob(*ref_net_, trajs[i], rollout_)->data;
                    }
                    auto k3 = detail::k3_node(lp_new, lp_ref);
                    term = ag::sub(term, ag::scale(ag::mean_all(k3), static_cast<S>(cfg_.kl_beta)));
                    kl_acc += static_cast<double>(ag::mean_all(k3)->data[0]);
                    ++kl_count;
                } else {
                    std::vector<double> lpn(lp_new->data.begin(), lp_new->data.end());
                    std::vector<double> lpo(lp_old.begin(), lp_old.end());
                    kl_acc += kl_penalty(lpn, lpo);
                    ++kl_count;
                }
                traj_terms.push_back(term);
            }
            auto group_term = traj_terms[0];
            for (size_t i = 1; i < traj_terms.size(); ++i) group_term = ag::add(group_term, traj_terms[i]);
            group_terms.push_back(ag::scale(group_term, static_cast<S>(1.0 / cfg_.group)));
        }

        auto objective = group_terms[0];
        for (size_t g = 1; g < group_terms.size(); ++g) objective = ag::add(objective, group_terms[g]);
        objective = ag::scale(objective, static_cast<S>(1.0 / cfg_.groups_per_step));
        auto loss = ag::neg(objective);
        if (!std::isfinite(static_cast<double>(loss->data[0]))) throw NumericError("stage-3 loss non-finite");

        policy_.store().zero_grad();
        ag::backward(loss);
        m.grad_norm = opt_.step(policy_.store());

        m.objective = static_cast<double>(objective->data[0]);
        m.mean_reward = reward_acc / traj_count;
        m.kl = kl_acc / std::max(kl_count, 1);
        m.clip_fraction = detail::clip_fraction_of(all_ratios, cfg_.clip_eps);
    }

    VelocityNet<S>& policy_;
    AdamOptimizer<S>& opt_;
    const LatentCodec<S>& codec_;
    std::vector<const RasterImage*> sources_;
    std::vector<std::vector<S>> conditions_;
    RewardSpec reward_;
    GrpoConfig cfg_;
    SamplerConfig rollout_;
    uint64_t seed_;

    ParameterStore<S> old_store_, ref_store_;
    std::unique_ptr<VelocityNet<S>> old_net_, ref_net_;
};

}  // namespace recap
