#include "framefuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>
#include <omp.h>

#include "framefuse/kernels.hpp"
#include "framefuse/sampler.hpp"
#include "framefuse/toyworld.hpp"

namespace ff::eval {

using nlohmann::json;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("embedding dimensions differ");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); i++) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> normalized(std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    if (n > 0) {
        n = std::sqrt(n);
        for (double& x : v) x /= n;
    }
    return v;
}

}  // namespace

double clip_dir(const Image& src_img, const Image& out_img, const std::string& src_txt,
                const std::string& out_txt, const Embedder& emb) {
    std::vector<double> di = emb.embed_image(out_img);
    std::vector<double> si = emb.embed_image(src_img);
    std::vector<double> dt = emb.embed_text(out_txt);
    std::vector<double> st = emb.embed_text(src_txt);
    if (di.size() != si.size() || dt.size() != st.size() || di.size() != dt.size())
        throw ShapeError("embedding dimensions differ");
    double ni = 0, nt = 0;
    for (size_t i = 0; i < di.size(); i++) {
        di[i] -= si[i];
        dt[i] -= st[i];
        ni += di[i] * di[i];
        nt += dt[i] * dt[i];
    }
    if (ni <= 0 || nt <= 0) return 0.0;  // zero-change convention
    return cosine(di, dt);
}

double clip_sim(const Image& a, const Image& b, const Embedder& emb) {
    return cosine(emb.embed_image(a), emb.embed_image(b));
}

double clip_sim(const Image& a, const std::string& text, const Embedder& emb) {
    return cosine(emb.embed_image(a), emb.embed_text(text));
}

double l1(const Image& a, const Image& b) { return image_l1(a, b); }

// ------------------------------------------------------------ toy embedder

namespace {

constexpr int kAttrDim = 20;  // 8 colors + 3 shapes + 9 cells

std::vector<double> scene_attribute_vec(const toyworld::Scene& s) {
    std::vector<double> v(kAttrDim, 0.0);
    v[size_t(s.background)] = 1.0;
    for (const toyworld::SceneObject& o : s.objects) {
        v[size_t(o.color)] = 1.0;
        v[8 + size_t(o.shape)] = 1.0;
        v[11 + size_t(toyworld::coarse_cell(o.cx, o.cy, s.width, s.height))] = 1.0;
    }
    return v;
}

std::vector<float> image_features(const Image& img) {
    std::vector<float> x(img.px.size());
    for (size_t i = 0; i < img.px.size(); i++) x[i] = float(img.px[i]) / 255.0f * 2.0f - 1.0f;
    return x;
}

}  // namespace

std::vector<double> AttributeEmbedder::text_attributes(const std::string& text) {
    std::vector<double> v(kAttrDim, 0.0);
    std::istringstream ss(text);
    std::vector<std::string> words;
    std::string w;
    while (ss >> w) {
        while (!w.empty() && (w.back() == ',' || w.back() == '.')) w.pop_back();
        words.push_back(w);
    }
    for (size_t i = 0; i < words.size(); i++) {
        int c = color_id_from_name(words[i]);
        if (c >= 0) v[size_t(c)] = 1.0;
        if (words[i] == "square") v[8] = 1.0;
        if (words[i] == "circle") v[9] = 1.0;
        if (words[i] == "triangle") v[10] = 1.0;
        if (i + 1 < words.size()) {
            int cell = toyworld::cell_from_phrase(words[i] + " " + words[i + 1]);
            if (cell >= 0) v[11 + size_t(cell)] = 1.0;
        }
        if (words[i] == "center" &&
            (i == 0 || (words[i - 1] != "upper" && words[i - 1] != "middle" &&
                        words[i - 1] != "lower")))
            v[11 + 4] = 1.0;
    }
    return v;
}

AttributeEmbedder AttributeEmbedder::train(int resolution, uint64_t seed, int steps) {
    AttributeEmbedder e;
    e.resolution_ = resolution;
    const int in_dim = 3 * resolution * resolution;
    const int h = e.hidden_;

    Rng rng(derive_seed(seed, 0xa77));
    e.w1_.resize(size_t(in_dim) * h);
    for (float& x : e.w1_) x = float(rng.normal() * 0.02);
    e.b1_.assign(size_t(h), 0.0f);
    e.w2_.resize(size_t(h) * kAttrDim);
    for (float& x : e.w2_) x = float(rng.normal() * 0.02);
    e.b2_.assign(kAttrDim, 0.0f);

    // fixed pool of rendered scenes with their attribute targets
    const int n_scenes = 400;
    toyworld::GeneratorConfig gen = toyworld::GeneratorConfig::for_resolution(resolution);
    gen.min_objects = 0;  // include empty scenes
    std::vector<std::vector<float>> feats(n_scenes);
    std::vector<std::vector<double>> targets(n_scenes);
    for (int i = 0; i < n_scenes; i++) {
        toyworld::Scene s = toyworld::sample_scene(derive_seed(seed, uint64_t(i), 0xe3b), gen);
        feats[size_t(i)] = image_features(toyworld::render(s, resolution));
        targets[size_t(i)] = scene_attribute_vec(s);
    }

    const int B = 32;
    std::vector<float> x(size_t(B) * in_dim), z(size_t(B) * h), g(size_t(B) * h);
    std::vector<float> logits(size_t(B) * kAttrDim), y(size_t(B) * kAttrDim);
    std::vector<float> dlogit(size_t(B) * kAttrDim), dg(size_t(B) * h), dz(size_t(B) * h);
    std::vector<float> gw1(e.w1_.size()), gb1(e.b1_.size()), gw2(e.w2_.size()), gb2(e.b2_.size());
    size_t n_all = e.w1_.size() + e.b1_.size() + e.w2_.size() + e.b2_.size();
    std::vector<float> mom(n_all, 0.0f), vel(n_all, 0.0f);

    for (int step = 1; step <= steps; step++) {
        for (int b = 0; b < B; b++) {
            int i = int(rng.below(uint64_t(n_scenes)));
            std::copy(feats[size_t(i)].begin(), feats[size_t(i)].end(),
                      x.begin() + long(size_t(b) * in_dim));
            for (int k = 0; k < kAttrDim; k++)
                y[size_t(b) * kAttrDim + size_t(k)] = float(targets[size_t(i)][size_t(k)]);
        }
        kern::matmul(x.data(), e.w1_.data(), z.data(), B, in_dim, h);
        kern::add_bias(z.data(), e.b1_.data(), B, h);
        kern::gelu_fwd(z.data(), g.data(), z.size());
        kern::matmul(g.data(), e.w2_.data(), logits.data(), B, h, kAttrDim);
        kern::add_bias(logits.data(), e.b2_.data(), B, kAttrDim);
        // sigmoid MSE
        float inv = 2.0f / float(B * kAttrDim);
        for (size_t i = 0; i < logits.size(); i++) {
            float s = 1.0f / (1.0f + std::exp(-logits[i]));
            dlogit[i] = inv * (s - y[i]) * s * (1.0f - s);
        }
        std::fill(gb1.begin(), gb1.end(), 0.0f);
        std::fill(gb2.begin(), gb2.end(), 0.0f);
        kern::matmul_tn(g.data(), dlogit.data(), gw2.data(), B, h, kAttrDim);
        kern::bias_grad_acc(dlogit.data(), gb2.data(), B, kAttrDim);
        kern::matmul_nt(dlogit.data(), e.w2_.data(), dg.data(), B, kAttrDim, h);
        kern::gelu_bwd(dg.data(), z.data(), dz.data(), z.size());
        kern::matmul_tn(x.data(), dz.data(), gw1.data(), B, in_dim, h);
        kern::bias_grad_acc(dz.data(), gb1.data(), B, h);

        size_t off = 0;
        auto upd = [&](std::vector<float>& w, std::vector<float>& grad) {
            kern::adamw_update(w.data(), grad.data(), mom.data() + off, vel.data() + off,
                               w.size(), 1e-3f, 0.9f, 0.95f, 1e-8f, 0.0f, step);
            off += w.size();
        };
        upd(e.w1_, gw1);
        upd(e.b1_, gb1);
        upd(e.w2_, gw2);
        upd(e.b2_, gb2);
    }
    return e;
}

std::vector<double> AttributeEmbedder::embed_image(const Image& img) const {
    if (img.width != resolution_ || img.height != resolution_)
        throw ShapeError("embedder trained at a different resolution");
    std::vector<float> x = image_features(img);
    std::vector<float> z(static_cast<size_t>(hidden_)), g(static_cast<size_t>(hidden_)), logits(kAttrDim);
    ref::matmul(x.data(), w1_.data(), z.data(), 1, int(x.size()), hidden_);
    ref::add_bias(z.data(), b1_.data(), 1, hidden_);
    ref::gelu_fwd(z.data(), g.data(), z.size());
    ref::matmul(g.data(), w2_.data(), logits.data(), 1, hidden_, kAttrDim);
    ref::add_bias(logits.data(), b2_.data(), 1, kAttrDim);
    std::vector<double> out(kAttrDim);
    for (int i = 0; i < kAttrDim; i++) out[size_t(i)] = 1.0 / (1.0 + std::exp(-double(logits[size_t(i)])));
    return normalized(std::move(out));
}

std::vector<double> AttributeEmbedder::embed_text(const std::string& text) const {
    return normalized(text_attributes(text));
}

// ------------------------------------------------------------ generators

std::vector<Image> ModelGenerator::generate(const datasets::Sample& s, uint64_t seed) const {
    std::string prompt = prompting::assemble({s.base_prompt, s.context_tags, {}});
    sampler::SampleOptions opt;
    opt.steps = steps;
    opt.guidance = guidance;
    opt.seed = seed;
    return sampler::sample(*net, *vocab, s.inputs, prompt, int(s.outputs.size()), opt, ae);
}

std::vector<Image> OracleGenerator::generate(const datasets::Sample& s, uint64_t) const {
    return {datasets::oracle_reference(s)};
}

// ------------------------------------------------------------ scoring

RegionScores score_candidate(const datasets::Sample& s, const Image& candidate) {
    Image ref = datasets::oracle_reference(s);
    if (candidate.width != ref.width || candidate.height != ref.height)
        throw ShapeError("candidate resolution does not match oracle");
    std::vector<uint8_t> mask = datasets::oracle_edited_mask(s);
    bool grayscale = s.oracle.kind == datasets::OracleData::control &&
                     s.oracle.flavor == "perception";
    auto agree = [&](size_t p) {
        if (grayscale) {
            for (int c = 0; c < 3; c++)
                if (std::abs(int(candidate.px[p * 3 + size_t(c)]) -
                             int(ref.px[p * 3 + size_t(c)])) > 32)
                    return false;
            return true;
        }
        return nearest_palette(candidate.px[p * 3], candidate.px[p * 3 + 1],
                               candidate.px[p * 3 + 2]) ==
               nearest_palette(ref.px[p * 3], ref.px[p * 3 + 1], ref.px[p * 3 + 2]);
    };
    size_t n_px = size_t(ref.width) * ref.height;
    long e_total = 0, e_agree = 0, p_total = 0, p_agree = 0;
    for (size_t p = 0; p < n_px; p++) {
        bool in_mask = !mask.empty() && mask[p];
        bool ok = agree(p);
        if (in_mask) {
            e_total++;
            e_agree += ok;
        } else {
            p_total++;
            p_agree += ok;
        }
    }
    RegionScores rs;
    rs.edited = e_total ? double(e_agree) / double(e_total) : 1.0;
    rs.preserved = p_total ? double(p_agree) / double(p_total) : 1.0;
    return rs;
}

// ------------------------------------------------------------ evaluate

MetricReport evaluate(const Generator& gen, const datasets::DatasetManifest& m,
                      const EvalOptions& opt, const Embedder* emb, const Embedder* second) {
    MetricReport rep;
    rep.family = datasets::family_name(m.family);
    rep.count = long(m.records.size());
    rep.oracle_metrics = m.family != datasets::Family::t2i;
    rep.embedder_name = emb ? emb->name() : "";
    rep.second_name = second ? second->name() : "";

    const int n = int(m.records.size());
    std::vector<RegionScores> scores(static_cast<size_t>(n));
    std::vector<double> l1s(static_cast<size_t>(n), 0.0);
    std::vector<double> cdirs(size_t(n), 0.0), cims(size_t(n), 0.0), couts(size_t(n), 0.0),
        dinos(size_t(n), 0.0);
    std::vector<uint8_t> has_dir(size_t(n), 0), has_im(size_t(n), 0);
    std::string error;

    omp_set_max_active_levels(1);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; i++) {
        try {
            const datasets::Sample& s = m.records[size_t(i)];
            Image cand = gen.generate(s, derive_seed(opt.seed, uint64_t(i), 0xe7a1)).at(0);
            if (rep.oracle_metrics) {
                scores[size_t(i)] = score_candidate(s, cand);
                l1s[size_t(i)] = image_l1(cand, datasets::oracle_reference(s));
            }
            if (emb) {
                const datasets::OracleData& o = s.oracle;
                bool scenes = o.kind == datasets::OracleData::edit ||
                              o.kind == datasets::OracleData::compose;
                std::string out_txt =
                    scenes ? toyworld::caption(o.after) : s.base_prompt;
                couts[size_t(i)] = clip_sim(cand, out_txt, *emb);
                if (scenes && !s.inputs.empty()) {
                    std::string src_txt = toyworld::caption(o.before);
                    cdirs[size_t(i)] =
                        clip_dir(s.inputs[0].first, cand, src_txt, out_txt, *emb);
                    has_dir[size_t(i)] = 1;
                }
                if (!s.inputs.empty()) {
                    cims[size_t(i)] = clip_sim(cand, s.inputs[0].first, *emb);
                    has_im[size_t(i)] = 1;
                    if (second) dinos[size_t(i)] = clip_sim(cand, s.inputs[0].first, *second);
                }
            }
        } catch (const std::exception& e) {
#pragma omp critical
            error = e.what();
        }
    }
    if (!error.empty()) throw Error("evaluate failed: " + error);

    for (int i = 0; i < n; i++) {
        const RegionScores& rs = scores[size_t(i)];
        if (rep.oracle_metrics) {
            bool e_ok = rs.edited >= 1.0 - opt.tolerance;
            bool p_ok = rs.preserved >= 1.0 - opt.tolerance;
            rep.edited_passed += e_ok;
            rep.preserved_passed += p_ok;
            rep.passed += e_ok && p_ok;
            rep.mean_edited_score += rs.edited;
            rep.mean_preserved_score += rs.preserved;
            rep.l1 += l1s[size_t(i)];
        }
        rep.clip_out += couts[size_t(i)];
        rep.clip_dir += has_dir[size_t(i)] ? cdirs[size_t(i)] : 0.0;
        rep.clip_dir_n += has_dir[size_t(i)];
        rep.clip_im += has_im[size_t(i)] ? cims[size_t(i)] : 0.0;
        rep.dino += has_im[size_t(i)] ? dinos[size_t(i)] : 0.0;
        rep.clip_im_n += has_im[size_t(i)];
    }
    if (n > 0) {
        rep.clip_out /= n;
        rep.clip_t = rep.clip_out;
        if (rep.clip_dir_n) rep.clip_dir /= double(rep.clip_dir_n);
        if (rep.clip_im_n) {
            rep.clip_im /= double(rep.clip_im_n);
            rep.dino /= double(rep.clip_im_n);
        }
        if (rep.oracle_metrics) {
            rep.pass_rate = double(rep.passed) / n;
            rep.edited_rate = double(rep.edited_passed) / n;
            rep.preserved_rate = double(rep.preserved_passed) / n;
            rep.mean_edited_score /= n;
            rep.mean_preserved_score /= n;
            rep.l1 /= n;
        }
    }
    return rep;
}

json MetricReport::to_json() const {
    json j{{"family", family},
           {"count", count},
           {"oracle_metrics", oracle_metrics},
           {"clip_dir", clip_dir},
           {"clip_im", clip_im},
           {"clip_out", clip_out},
           {"clip_t", clip_t},
           {"dino", dino},
           {"embedder", embedder_name},
           {"second_embedder", second_name}};
    if (oracle_metrics) {
        j["l1"] = l1;
        j["pass"] = {{"overall", pass_rate},
                     {"edited", edited_rate},
                     {"preserved", preserved_rate},
                     {"passed", passed},
                     {"edited_passed", edited_passed},
                     {"preserved_passed", preserved_passed},
                     {"count", count},
                     {"mean_edited_score", mean_edited_score},
                     {"mean_preserved_score", mean_preserved_score}};
    }
    return j;
}

std::string MetricReport::table() const {
    char buf[512];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-18s %9s %9s %9s %9s %9s\n", family.c_str(), "CLIP_dir",
                  "CLIP_im", "CLIP_out", "L1", "DINO");
    out += buf;
    std::snprintf(buf, sizeof buf, "%-18s %9.4f %9.4f %9.4f %9.4f %9.4f\n", "", clip_dir,
                  clip_im, clip_out, l1, dino);
    out += buf;
    if (oracle_metrics) {
        std::snprintf(buf, sizeof buf,
                      "pass: overall %.3f  edited %.3f  preserved %.3f  (n=%ld)\n", pass_rate,
                      edited_rate, preserved_rate, count);
        out += buf;
    } else {
        out += "oracle metrics omitted: family has no exact oracle\n";
    }
    return out;
}

}  // namespace ff::eval
