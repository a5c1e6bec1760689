#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "framefuse/datasets.hpp"
#include "framefuse/model.hpp"

namespace ff::training {

struct TrainConfig {
    int batch_size = 16;
    long total_steps = 4000;
    double base_lr = 1e-3;  // desk scale; the reference large-model setting is 1e-5
    long warmup_steps = 200;
    // family name -> weight; empty selects log-capped weights by family size
    std::vector<std::pair<std::string, double>> mixing;
    uint64_t seed = 1;
    long checkpoint_every = 1000;
    long log_every = 10;
    double p_uncond = 0.1;  // prompt dropout feeding the guidance null branch
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.95;
    double adam_eps = 1e-8;
    // optional progressive stages: (start_step, resolution), ascending
    std::vector<std::pair<long, int>> resolution_schedule;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// LR = base * min((step - stage_start) / warmup, 1), restarting per stage
double lr_at(const TrainConfig& cfg, long step, long stage_start = 0);

// ---------------------------------------------------------- flow matching

/// Linear (rectified) path: x_t = (1-t) x0 + t eps, target velocity eps - x0.
template <class T>
void fm_make_path(const std::vector<T>& x0, const std::vector<T>& eps, T t, std::vector<T>& xt,
                  std::vector<T>& vstar);

/// Mean squared error over all entries; optionally fills dLoss/dPred.
template <class T>
T mse_loss(const std::vector<T>& pred, const std::vector<T>& target, std::vector<T>* dpred);

// a dataset sample lowered to latents + token ids, ready to pack
template <class T>
struct Example {
    std::vector<int> text_ids;
    std::vector<model::Latent<T>> inputs;
    std::vector<prompting::Role> roles;
    std::vector<model::Latent<T>> outputs;  // clean x0
    prompting::ReferenceMap ref;
};

template <class T>
Example<T> make_example(const datasets::Sample& s, const prompting::Vocabulary& vocab,
                        const model::ModelConfig& cfg, const model::Autoencoder* ae);

/// Flow-matching loss on one example. Draws (t, prompt-drop coin, eps) from
/// rng in that order; noises only output latents; loss is MSE over noise
/// tokens only. When grads is non-null also runs backward into it.
template <class T>
T flow_loss(const model::Net<T>& net, const Example<T>& ex, Rng& rng, double p_uncond,
            std::vector<T>* grads);

// ---------------------------------------------------------- training loop

std::vector<std::pair<std::string, double>> default_mixing(
    const std::vector<const datasets::DatasetManifest*>& data);

// deterministic family choice from normalized weights
int sample_family_index(Rng& rng, const std::vector<double>& weights);

/// Mixture training. Writes metrics.jsonl plus periodic checkpoints under
/// out_dir; deterministic given cfg.seed (resume included). Returns the final
/// net (progressive stages may change its resolution).
model::Net<float> train(const model::Net<float>& initial, const prompting::Vocabulary& vocab,
                        const std::vector<const datasets::DatasetManifest*>& data,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const model::OptState* resume_opt = nullptr, long resume_step = 0,
                        const model::Autoencoder* ae = nullptr);

/// Bilinear resize of the shared 2D positional table when the grid changes
/// between progressive-resolution stages.
std::vector<float> resize_positional_table(const std::vector<float>& table, int old_grid,
                                           int new_grid, int d_model);

}  // namespace ff::training
