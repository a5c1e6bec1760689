#include "framefuse/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>
#include <omp.h>

#include "framefuse/kernels.hpp"
#include "framefuse/prompting.hpp"

namespace ff::training {

using nlohmann::json;

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw ConfigError("warm-up must lie within total steps");
    if (base_lr <= 0) throw ConfigError("base_lr must be positive");
    double sum = 0;
    for (const auto& [name, w] : mixing) {
        datasets::family_from_name(name);
        if (w < 0) throw ConfigError("mixing weight for " + name + " is negative");
        sum += w;
    }
    if (!mixing.empty() && sum <= 0) throw ConfigError("mixing weights sum to zero");
    long prev = -1;
    for (const auto& [step, res] : resolution_schedule) {
        if (step <= prev) throw ConfigError("resolution schedule steps must ascend");
        if (res != 16 && res != 32 && res != 64) throw ConfigError("bad schedule resolution");
        prev = step;
    }
}

json TrainConfig::to_json() const {
    json mix = json::array();
    for (const auto& [k, v] : mixing) mix.push_back({{"family", k}, {"weight", v}});
    json sched = json::array();
    for (const auto& [s, r] : resolution_schedule) sched.push_back({{"step", s}, {"resolution", r}});
    return {{"batch_size", batch_size},
            {"total_steps", total_steps},
            {"base_lr", base_lr},
            {"warmup_steps", warmup_steps},
            {"mixing", mix},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"log_every", log_every},
            {"p_uncond", p_uncond},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"resolution_schedule", sched}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    if (j.contains("mixing"))
        for (const json& m : j.at("mixing"))
            c.mixing.emplace_back(m.at("family").get<std::string>(), m.at("weight").get<double>());
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
    c.p_uncond = j.value("p_uncond", c.p_uncond);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    if (j.contains("resolution_schedule"))
        for (const json& s : j.at("resolution_schedule"))
            c.resolution_schedule.emplace_back(s.at("step").get<long>(),
                                               s.at("resolution").get<int>());
    return c;
}

double lr_at(const TrainConfig& cfg, long step, long stage_start) {
    long local = step - stage_start;
    if (cfg.warmup_steps <= 0) return cfg.base_lr;
    double f = double(local) / double(cfg.warmup_steps);
    return cfg.base_lr * std::min(f, 1.0);
}

// ---------------------------------------------------------- flow matching

template <class T>
void fm_make_path(const std::vector<T>& x0, const std::vector<T>& eps, T t, std::vector<T>& xt,
                  std::vector<T>& vstar) {
    if (x0.size() != eps.size()) throw ShapeError("fm_make_path: shape mismatch");
    if (!(t >= T(0) && t <= T(1))) throw Error("fm_make_path: t outside [0, 1]");
    xt.resize(x0.size());
    vstar.resize(x0.size());
    const T omt = T(1) - t;
    for (size_t i = 0; i < x0.size(); i++) {
        xt[i] = omt * x0[i] + t * eps[i];
        vstar[i] = eps[i] - x0[i];
    }
}

template <class T>
T mse_loss(const std::vector<T>& pred, const std::vector<T>& target, std::vector<T>* dpred) {
    if (pred.size() != target.size()) throw ShapeError("mse_loss: shape mismatch");
    if (pred.empty()) return T(0);
    T acc = 0;
    for (size_t i = 0; i < pred.size(); i++) {
        T d = pred[i] - target[i];
        acc += d * d;
    }
    if (dpred) {
        dpred->resize(pred.size());
        T scale = T(2) / T(pred.size());
        for (size_t i = 0; i < pred.size(); i++) (*dpred)[i] = scale * (pred[i] - target[i]);
    }
    return acc / T(pred.size());
}

template <class T>
Example<T> make_example(const datasets::Sample& s, const prompting::Vocabulary& vocab,
                        const model::ModelConfig& cfg, const model::Autoencoder* ae) {
    Example<T> ex;
    std::string prompt = prompting::assemble({s.base_prompt, s.context_tags, {}});
    ex.text_ids = prompting::tokenize(prompt, vocab);
    ex.ref = prompting::resolve(prompt, int(s.inputs.size()), int(s.outputs.size()));
    auto encode = [&](const Image& img) -> model::Latent<T> {
        if (img.width != cfg.resolution || img.height != cfg.resolution)
            throw ShapeError("sample image resolution does not match model config");
        if (cfg.use_ae) {
            if (!ae) throw ConfigError("model config expects an autoencoder");
            model::Latent<float> lf = ae->encode(img);
            model::Latent<T> lt;
            lt.ch = lf.ch;
            lt.h = lf.h;
            lt.w = lf.w;
            lt.v.assign(lf.v.begin(), lf.v.end());
            return lt;
        }
        return model::encode_image<T>(img);
    };
    for (const auto& [img, role] : s.inputs) {
        ex.inputs.push_back(encode(img));
        ex.roles.push_back(role);
    }
    for (const Image& img : s.outputs) ex.outputs.push_back(encode(img));
    return ex;
}

template <class T>
T flow_loss(const model::Net<T>& net, const Example<T>& ex, Rng& rng, double p_uncond,
            std::vector<T>* grads) {
    const model::ModelConfig& cfg = net.config();
    T t = T(rng.uniform());
    std::vector<int> text = ex.text_ids;
    if (p_uncond > 0 && rng.coin(p_uncond))
        text = {prompting::Vocabulary::kBos, prompting::Vocabulary::kNull,
                prompting::Vocabulary::kEos};

    std::vector<model::Latent<T>> noised(ex.outputs.size());
    std::vector<T> target;
    target.reserve(ex.outputs.size() * size_t(cfg.tokens_per_image()) * size_t(cfg.patch_dim()));
    for (size_t m = 0; m < ex.outputs.size(); m++) {
        const model::Latent<T>& x0 = ex.outputs[m];
        std::vector<T> eps(x0.v.size());
        for (T& e : eps) e = T(rng.normal());
        std::vector<T> xt, vstar;
        fm_make_path(x0.v, eps, t, xt, vstar);
        noised[m] = x0;
        noised[m].v = std::move(xt);
        model::Latent<T> vlat = x0;
        vlat.v = std::move(vstar);
        std::vector<T> vtok = model::patchify(vlat, cfg.patch);
        target.insert(target.end(), vtok.begin(), vtok.end());
    }

    model::PackedSample<T> ps =
        model::pack(cfg, text, ex.inputs, ex.roles, noised, ex.ref, t);
    if (!grads) {
        std::vector<T> pred = net.forward(ps);
        return mse_loss(pred, target, static_cast<std::vector<T>*>(nullptr));
    }
    model::ActsBox<T> acts;
    std::vector<T> pred = net.forward(ps, *acts.a);
    std::vector<T> dpred;
    T loss = mse_loss(pred, target, &dpred);
    net.backward(ps, *acts.a, dpred, *grads);
    return loss;
}

// ---------------------------------------------------------- training loop

std::vector<std::pair<std::string, double>> default_mixing(
    const std::vector<const datasets::DatasetManifest*>& data) {
    std::map<std::string, size_t> sizes;
    for (const datasets::DatasetManifest* m : data)
        sizes[datasets::family_name(m->family)] += m->records.size();
    std::vector<std::pair<std::string, double>> mix;
    for (const auto& [name, n] : sizes)
        mix.emplace_back(name, std::log2(2.0 + double(n)));  // log-capped by family size
    return mix;
}

int sample_family_index(Rng& rng, const std::vector<double>& weights) {
    double u = rng.uniform();
    double acc = 0;
    for (size_t i = 0; i < weights.size(); i++) {
        acc += weights[i];
        if (u < acc) return int(i);
    }
    return int(weights.size()) - 1;
}

std::vector<float> resize_positional_table(const std::vector<float>& table, int old_grid,
                                           int new_grid, int d) {
    if (int(table.size()) != old_grid * old_grid * d) throw ShapeError("positional table size");
    std::vector<float> out(size_t(new_grid) * new_grid * d);
    for (int y = 0; y < new_grid; y++) {
        for (int x = 0; x < new_grid; x++) {
            // map new cell centers onto the old grid
            double sy = new_grid > 1 ? double(y) * (old_grid - 1) / double(new_grid - 1) : 0.0;
            double sx = new_grid > 1 ? double(x) * (old_grid - 1) / double(new_grid - 1) : 0.0;
            int y0 = int(sy), x0 = int(sx);
            int y1 = std::min(y0 + 1, old_grid - 1), x1 = std::min(x0 + 1, old_grid - 1);
            double fy = sy - y0, fx = sx - x0;
            for (int j = 0; j < d; j++) {
                double v00 = table[(size_t(y0) * old_grid + x0) * d + j];
                double v01 = table[(size_t(y0) * old_grid + x1) * d + j];
                double v10 = table[(size_t(y1) * old_grid + x0) * d + j];
                double v11 = table[(size_t(y1) * old_grid + x1) * d + j];
                out[(size_t(y) * new_grid + x) * d + j] =
                    float((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                          fy * ((1 - fx) * v10 + fx * v11));
            }
        }
    }
    return out;
}

namespace {

struct FamilyPool {
    std::string name;
    std::vector<const datasets::Sample*> records;
    int resolution = 0;
};

// per-stage view of the data grouped by family
std::vector<FamilyPool> group_by_family(const std::vector<const datasets::DatasetManifest*>& data,
                                        int resolution) {
    std::map<std::string, FamilyPool> pools;
    for (const datasets::DatasetManifest* m : data) {
        if (m->build.gen.resolution != resolution) continue;
        FamilyPool& p = pools[datasets::family_name(m->family)];
        p.name = datasets::family_name(m->family);
        p.resolution = resolution;
        for (const datasets::Sample& s : m->records) p.records.push_back(&s);
    }
    std::vector<FamilyPool> out;
    for (auto& [k, v] : pools) out.push_back(std::move(v));
    return out;
}

model::OptState fresh_opt(const model::Net<float>& net) {
    model::OptState o;
    o.m.assign(net.n_params(), 0.0f);
    o.v.assign(net.n_params(), 0.0f);
    o.step = 0;
    return o;
}

}  // namespace

model::Net<float> train(const model::Net<float>& initial, const prompting::Vocabulary& vocab,
                        const std::vector<const datasets::DatasetManifest*>& data,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const model::OptState* resume_opt, long resume_step,
                        const model::Autoencoder* ae) {
    cfg.validate();
    if (data.empty()) throw ConfigError("training needs at least one manifest");
    std::filesystem::create_directories(out_dir);

    // stage boundaries: (start_step, resolution)
    std::vector<std::pair<long, int>> stages = cfg.resolution_schedule;
    if (stages.empty()) stages.emplace_back(0, initial.config().resolution);
    if (stages.front().first != 0) throw ConfigError("first stage must start at step 0");

    std::vector<std::pair<std::string, double>> mixing =
        cfg.mixing.empty() ? default_mixing(data) : cfg.mixing;
    double wsum = 0;
    for (const auto& [k, w] : mixing) wsum += w;
    std::vector<double> weights;
    for (const auto& [k, w] : mixing) weights.push_back(w / wsum);

    model::Net<float> net = initial;
    model::OptState opt = resume_opt ? *resume_opt : fresh_opt(net);
    long step0 = resume_step;

    std::ofstream metrics(out_dir + "/metrics.jsonl", resume_step > 0 ? std::ios::app
                                                                      : std::ios::trunc);
    std::map<std::string, double> fam_ema;

    // pin kernel-level threading to the batch loop
    omp_set_max_active_levels(1);

    size_t stage_idx = 0;
    while (stage_idx + 1 < stages.size() && stages[stage_idx + 1].first <= step0) stage_idx++;
    auto stage_resolution = [&](size_t si) { return stages[si].second; };

    auto switch_stage = [&](size_t si) {
        int res = stage_resolution(si);
        if (net.config().resolution == res) return;
        model::ModelConfig ncfg = net.config();
        int old_grid = ncfg.grid();
        ncfg.resolution = res;
        model::Net<float> next(ncfg);
        // copy shared parameters; resize the positional table to the new grid
        for (const model::ParamInfo& pi : next.params()) {
            const model::ParamInfo& old = net.param_info(pi.name);
            if (pi.name == "img_pos") {
                std::vector<float> t(net.param("img_pos"), net.param("img_pos") + old.size);
                std::vector<float> r =
                    resize_positional_table(t, old_grid, ncfg.grid(), ncfg.d_model);
                std::copy(r.begin(), r.end(), next.param(pi.name));
            } else {
                if (old.size != pi.size) throw ShapeError("stage switch size mismatch: " + pi.name);
                std::copy(net.param(pi.name.c_str()), net.param(pi.name.c_str()) + pi.size,
                          next.param(pi.name));
            }
        }
        net = next;
        opt = fresh_opt(net);  // new stage gets its own warm-up and moments
    };
    switch_stage(stage_idx);

    std::vector<FamilyPool> pools = group_by_family(data, net.config().resolution);
    auto check_pools = [&]() {
        for (size_t i = 0; i < mixing.size(); i++) {
            if (weights[i] <= 0) continue;
            bool found = false;
            for (const FamilyPool& p : pools)
                found |= p.name == mixing[i].first && !p.records.empty();
            if (!found)
                throw ConfigError("family " + mixing[i].first +
                                  " has positive weight but no records at resolution " +
                                  std::to_string(net.config().resolution));
        }
    };
    check_pools();

    const size_t B = size_t(cfg.batch_size);
    std::vector<std::vector<float>> grads(B);
    std::vector<float> losses(B);
    std::vector<int> fams(B);
    std::vector<Example<float>> examples(B);

    for (long step = step0 + 1; step <= cfg.total_steps; step++) {
        if (stage_idx + 1 < stages.size() && step > stages[stage_idx + 1].first) {
            stage_idx++;
            switch_stage(stage_idx);
            pools = group_by_family(data, net.config().resolution);
            check_pools();
        }
        Rng pick(derive_seed(cfg.seed, uint64_t(step), 0x9a3f));
        for (size_t b = 0; b < B; b++) {
            int fi = sample_family_index(pick, weights);
            const std::string& fam = mixing[size_t(fi)].first;
            const FamilyPool* pool = nullptr;
            for (const FamilyPool& p : pools)
                if (p.name == fam) pool = &p;
            const datasets::Sample* rec = pool->records[pick.below(pool->records.size())];
            fams[b] = fi;
            examples[b] = make_example<float>(*rec, vocab, net.config(), ae);
        }
#pragma omp parallel for schedule(dynamic)
        for (int b = 0; b < int(B); b++) {
            Rng r(derive_seed(derive_seed(cfg.seed, uint64_t(step), 0x10c5), uint64_t(b)));
            losses[size_t(b)] =
                flow_loss(net, examples[size_t(b)], r, cfg.p_uncond, &grads[size_t(b)]);
        }
        // deterministic reduction in batch order
        std::vector<float>& g = grads[0];
        for (size_t b = 1; b < B; b++) kern::add_inplace(g.data(), grads[b].data(), g.size());
        float inv_b = 1.0f / float(B);
        for (float& x : g) x *= inv_b;

        double lr = lr_at(cfg, step, stages[stage_idx].first);
        opt.step++;
        for (const model::ParamInfo& pi : net.params()) {
            kern::adamw_update(net.weights().data() + pi.offset, g.data() + pi.offset,
                               opt.m.data() + pi.offset, opt.v.data() + pi.offset, pi.size,
                               float(lr), float(cfg.beta1), float(cfg.beta2),
                               float(cfg.adam_eps), pi.decay ? float(cfg.weight_decay) : 0.0f,
                               opt.step);
        }

        double mean_loss = 0;
        for (size_t b = 0; b < B; b++) mean_loss += losses[b];
        mean_loss /= double(B);
        for (size_t b = 0; b < B; b++) {
            const std::string& fam = mixing[size_t(fams[b])].first;
            auto it = fam_ema.find(fam);
            if (it == fam_ema.end())
                fam_ema[fam] = losses[b];
            else
                it->second = 0.95 * it->second + 0.05 * losses[b];
        }
        if (step % cfg.log_every == 0 || step == cfg.total_steps) {
            json per_family;
            for (const auto& [k, v] : fam_ema) per_family[k] = v;
            metrics << json{{"step", step},
                            {"lr", lr},
                            {"loss", mean_loss},
                            {"per_family", per_family}}
                           .dump()
                    << "\n";
            metrics.flush();
        }
        if ((cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) ||
            step == cfg.total_steps) {
            char name[32];
            std::snprintf(name, sizeof name, "ckpt_%07ld", step);
            model::save_checkpoint(out_dir + "/" + name, net, vocab, &opt, step, cfg.seed, ae);
            model::save_checkpoint(out_dir + "/ckpt_final", net, vocab, &opt, step, cfg.seed, ae);
        }
    }
    return net;
}

// ---------------------------------------------------------- instantiation

#define FF_TRAIN_INST(T)                                                                         \
    template void fm_make_path<T>(const std::vector<T>&, const std::vector<T>&, T,              \
                                  std::vector<T>&, std::vector<T>&);                            \
    template T mse_loss<T>(const std::vector<T>&, const std::vector<T>&, std::vector<T>*);      \
    template struct Example<T>;                                                                 \
    template Example<T> make_example<T>(const datasets::Sample&, const prompting::Vocabulary&,  \
                                        const model::ModelConfig&, const model::Autoencoder*); \
    template T flow_loss<T>(const model::Net<T>&, const Example<T>&, Rng&, double,              \
                            std::vector<T>*);

FF_TRAIN_INST(float)
FF_TRAIN_INST(double)
#undef FF_TRAIN_INST

}  // namespace ff::training
