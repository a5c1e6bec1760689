#pragma once

#include <functional>
#include <string>
#include <vector>

#include "framefuse/image.hpp"
#include "framefuse/model.hpp"

// Deterministic Euler integration of the learned velocity field. Output
// latents start from seeded noise at t=1 and are integrated down to t=0;
// input images stay clean at every step.

namespace ff::sampler {

using prompting::Role;

/// z <- z - dt * v(z, t) for t = 1, 1-dt, ..., dt with dt = 1/steps.
/// `field` must fill v with the velocity at (z, t).
template <class T>
std::vector<T> integrate_euler(
    std::vector<T> z, int steps,
    const std::function<void(const std::vector<T>&, T, std::vector<T>&)>& field);

/// v = v_uncond + scale * (v_cond - v_uncond). The two sequences must carry
/// the same number of noise tokens; scale 0 and 1 shortcut to a single
/// forward pass.
template <class T>
std::vector<T> guided_velocity(const model::Net<T>& net, const model::PackedSample<T>& cond,
                               const model::PackedSample<T>& uncond, T scale);

struct SampleOptions {
    int steps = 50;
    double guidance = 2.0;
    uint64_t seed = 0;
    // optional per-step hook: (step index, t, cond sequence, output latents)
    std::function<void(int, double, const model::PackedSample<float>&,
                       const std::vector<model::Latent<float>>&)>
        trace;
};

/// End-to-end sampling: tokenizes the assembled prompt, resolves references,
/// runs guided Euler integration, and decodes the outputs. The unconditional
/// branch replaces the text with the NULL token but keeps the input images.
std::vector<Image> sample(const model::Net<float>& net, const prompting::Vocabulary& vocab,
                          const std::vector<std::pair<Image, Role>>& inputs,
                          const std::string& prompt, int n_outputs, const SampleOptions& opt,
                          const model::Autoencoder* ae = nullptr);

}  // namespace ff::sampler
