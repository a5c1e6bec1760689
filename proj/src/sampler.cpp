#include "framefuse/sampler.hpp"

#include <cmath>

#include "framefuse/prompting.hpp"

namespace ff::sampler {

template <class T>
std::vector<T> integrate_euler(
    std::vector<T> z, int steps,
    const std::function<void(const std::vector<T>&, T, std::vector<T>&)>& field) {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    const T dt = T(1) / T(steps);
    std::vector<T> v(z.size());
    for (int s = 0; s < steps; s++) {
        T t = T(1) - T(s) * dt;
        field(z, t, v);
        if (v.size() != z.size()) throw ShapeError("velocity field changed shape");
        for (size_t i = 0; i < z.size(); i++) z[i] -= dt * v[i];
    }
    return z;
}

template <class T>
std::vector<T> guided_velocity(const model::Net<T>& net, const model::PackedSample<T>& cond,
                               const model::PackedSample<T>& uncond, T scale) {
    if (scale < T(0)) throw ConfigError("guidance scale must be >= 0");
    if (cond.n_noise_blocks() != uncond.n_noise_blocks())
        throw ShapeError("cond/uncond noise-token counts differ");
    if (scale == T(1)) return net.forward(cond);
    if (scale == T(0)) return net.forward(uncond);
    std::vector<T> v_cond = net.forward(cond);
    std::vector<T> v_uncond = net.forward(uncond);
    if (v_cond.size() != v_uncond.size()) throw ShapeError("cond/uncond velocity shapes differ");
    std::vector<T> v(v_cond.size());
    for (size_t i = 0; i < v.size(); i++)
        v[i] = v_uncond[i] + scale * (v_cond[i] - v_uncond[i]);
    return v;
}

std::vector<Image> sample(const model::Net<float>& net, const prompting::Vocabulary& vocab,
                          const std::vector<std::pair<Image, Role>>& inputs,
                          const std::string& prompt, int n_outputs, const SampleOptions& opt,
                          const model::Autoencoder* ae) {
    const model::ModelConfig& cfg = net.config();
    if (n_outputs < 1 || n_outputs > cfg.max_outputs)
        throw CapacityError("output count outside [1, " + std::to_string(cfg.max_outputs) + "]");

    std::vector<int> text = prompting::tokenize(prompt, vocab);
    prompting::ReferenceMap ref =
        prompting::resolve(prompt, int(inputs.size()), n_outputs);

    std::vector<model::Latent<float>> in_lat;
    std::vector<Role> roles;
    for (const auto& [img, role] : inputs) {
        if (img.width != cfg.resolution || img.height != cfg.resolution)
            throw ShapeError("input image resolution does not match model");
        in_lat.push_back(cfg.use_ae && ae ? ae->encode(img) : model::encode_image<float>(img));
        roles.push_back(role);
    }

    // seeded standard-normal output latents at t=1
    const size_t lat_n =
        size_t(cfg.latent_channels()) * cfg.latent_res() * cfg.latent_res();
    std::vector<float> z(lat_n * size_t(n_outputs));
    for (int m = 0; m < n_outputs; m++) {
        Rng rng(derive_seed(opt.seed, uint64_t(m), 0x5eed));
        for (size_t i = 0; i < lat_n; i++) z[size_t(m) * lat_n + i] = float(rng.normal());
    }

    const std::vector<int> null_text = {prompting::Vocabulary::kBos,
                                        prompting::Vocabulary::kNull,
                                        prompting::Vocabulary::kEos};
    int step_counter = 0;

    std::function<void(const std::vector<float>&, float, std::vector<float>&)> field =
        [&](const std::vector<float>& zz, float t, std::vector<float>& v) {
        std::vector<model::Latent<float>> outs(static_cast<size_t>(n_outputs));
        for (int m = 0; m < n_outputs; m++) {
            outs[size_t(m)].ch = cfg.latent_channels();
            outs[size_t(m)].h = outs[size_t(m)].w = cfg.latent_res();
            outs[size_t(m)].v.assign(zz.begin() + long(size_t(m) * lat_n),
                                     zz.begin() + long(size_t(m + 1) * lat_n));
        }
        model::PackedSample<float> cond = model::pack(cfg, text, in_lat, roles, outs, ref, t);
        model::PackedSample<float> uncond =
            model::pack(cfg, null_text, in_lat, roles, outs, ref, t);
        std::vector<float> pred = guided_velocity(net, cond, uncond, float(opt.guidance));
        // predictions arrive in noise-block order; unpatchify back to latents
        const size_t tok_per_img = size_t(cfg.tokens_per_image()) * size_t(cfg.patch_dim());
        v.resize(zz.size());
        for (int m = 0; m < n_outputs; m++) {
            std::vector<float> toks(pred.begin() + long(size_t(m) * tok_per_img),
                                    pred.begin() + long(size_t(m + 1) * tok_per_img));
            model::Latent<float> vl = model::unpatchify(toks, cfg.patch, cfg.latent_channels(),
                                                        cfg.latent_res(), cfg.latent_res());
            std::copy(vl.v.begin(), vl.v.end(), v.begin() + long(size_t(m) * lat_n));
        }
        if (opt.trace) opt.trace(step_counter, double(t), cond, outs);
        step_counter++;
    };

    std::vector<float> z_final = integrate_euler(std::move(z), opt.steps, field);

    std::vector<Image> images;
    for (int m = 0; m < n_outputs; m++) {
        model::Latent<float> lat;
        lat.ch = cfg.latent_channels();
        lat.h = lat.w = cfg.latent_res();
        lat.v.assign(z_final.begin() + long(size_t(m) * lat_n),
                     z_final.begin() + long(size_t(m + 1) * lat_n));
        images.push_back(cfg.use_ae && ae ? ae->decode(lat) : model::decode_latent(lat));
    }
    return images;
}

#define FF_SAMPLER_INST(T)                                                                       \
    template std::vector<T> integrate_euler<T>(                                                  \
        std::vector<T>, int,                                                                     \
        const std::function<void(const std::vector<T>&, T, std::vector<T>&)>&);                 \
    template std::vector<T> guided_velocity<T>(const model::Net<T>&,                             \
                                               const model::PackedSample<T>&,                    \
                                               const model::PackedSample<T>&, T);

FF_SAMPLER_INST(float)
FF_SAMPLER_INST(double)
#undef FF_SAMPLER_INST

}  // namespace ff::sampler
