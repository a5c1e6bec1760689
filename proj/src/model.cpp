#include "framefuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "framefuse/kernels.hpp"

namespace ff::model {

using nlohmann::json;

void ModelConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) throw ConfigError("bad model dimensions");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (resolution != 16 && resolution != 32 && resolution != 64)
        throw ConfigError("resolution must be 16, 32 or 64");
    if (latent_res() % patch != 0)
        throw ConfigError("latent resolution must be divisible by patch size");
    if (text_len < 2) throw ConfigError("text_len too small");
    if (vocab_size <= 0) throw ConfigError("vocab_size unset");
    if (time_features < 2 || time_features % 2 != 0)
        throw ConfigError("time_features must be even and >= 2");
    if (max_inputs != prompting::kMaxInputs || max_outputs != prompting::kMaxOutputs ||
        n_roles != 3)
        throw ConfigError("image-slot limits are fixed at 5 inputs / 3 outputs / 3 roles");
}

json ModelConfig::to_json() const {
    return {{"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"patch", patch},
            {"resolution", resolution},
            {"text_len", text_len},
            {"max_inputs", max_inputs},
            {"max_outputs", max_outputs},
            {"n_roles", n_roles},
            {"vocab_size", vocab_size},
            {"time_features", time_features},
            {"use_ae", use_ae},
            {"ae_channels", ae_channels}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.patch = j.value("patch", c.patch);
    c.resolution = j.value("resolution", c.resolution);
    c.text_len = j.value("text_len", c.text_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.time_features = j.value("time_features", c.time_features);
    c.use_ae = j.value("use_ae", c.use_ae);
    c.ae_channels = j.value("ae_channels", c.ae_channels);
    return c;
}

// ------------------------------------------------------------ latents

template <class T>
Latent<T> encode_image(const Image& img) {
    Latent<T> lat;
    lat.ch = 3;
    lat.h = img.height;
    lat.w = img.width;
    lat.v.resize(size_t(3) * img.height * img.width);
    for (int c = 0; c < 3; c++)
        for (int y = 0; y < img.height; y++)
            for (int x = 0; x < img.width; x++)
                lat.at(c, y, x) = T(img.px[(size_t(y) * img.width + x) * 3 + c]) / T(255) * T(2) -
                                  T(1);
    return lat;
}

template <class T>
Image decode_latent(const Latent<T>& lat) {
    if (lat.ch != 3) throw ShapeError("decode_latent expects 3 channels");
    Image img(lat.w, lat.h);
    for (int c = 0; c < 3; c++)
        for (int y = 0; y < lat.h; y++)
            for (int x = 0; x < lat.w; x++) {
                double v = (double(lat.at(c, y, x)) + 1.0) / 2.0 * 255.0;
                img.px[(size_t(y) * lat.w + x) * 3 + c] =
                    uint8_t(std::clamp(std::lround(v), 0l, 255l));
            }
    return img;
}

template <class T>
std::vector<T> patchify(const Latent<T>& lat, int patch) {
    if (lat.h % patch != 0 || lat.w % patch != 0)
        throw ShapeError("latent dimensions not divisible by patch size");
    const int gh = lat.h / patch, gw = lat.w / patch;
    const int pd = patch * patch * lat.ch;
    std::vector<T> out(size_t(gh) * gw * pd);
    for (int gy = 0; gy < gh; gy++)
        for (int gx = 0; gx < gw; gx++) {
            T* tok = out.data() + (size_t(gy) * gw + gx) * pd;
            for (int c = 0; c < lat.ch; c++)
                for (int py = 0; py < patch; py++)
                    for (int px = 0; px < patch; px++)
                        tok[(c * patch + py) * patch + px] =
                            lat.at(c, gy * patch + py, gx * patch + px);
        }
    return out;
}

template <class T>
Latent<T> unpatchify(const std::vector<T>& tokens, int patch, int channels, int h, int w) {
    if (h % patch != 0 || w % patch != 0) throw ShapeError("dims not divisible by patch");
    const int gh = h / patch, gw = w / patch;
    const int pd = patch * patch * channels;
    if (tokens.size() != size_t(gh) * gw * pd) throw ShapeError("token buffer size mismatch");
    Latent<T> lat;
    lat.ch = channels;
    lat.h = h;
    lat.w = w;
    lat.v.resize(size_t(channels) * h * w);
    for (int gy = 0; gy < gh; gy++)
        for (int gx = 0; gx < gw; gx++) {
            const T* tok = tokens.data() + (size_t(gy) * gw + gx) * pd;
            for (int c = 0; c < channels; c++)
                for (int py = 0; py < patch; py++)
                    for (int px = 0; px < patch; px++)
                        lat.at(c, gy * patch + py, gx * patch + px) =
                            tok[(c * patch + py) * patch + px];
        }
    return lat;
}

// ------------------------------------------------------------ packing

template <class T>
int PackedSample<T>::n_noise_blocks() const {
    int n = 0;
    for (const Block& b : blocks) n += b.noise;
    return n;
}

template <class T>
PackedSample<T> pack(const ModelConfig& cfg, const std::vector<int>& text_ids,
                     const std::vector<Latent<T>>& inputs, const std::vector<Role>& roles,
                     const std::vector<Latent<T>>& noised_outputs, const ReferenceMap& ref,
                     T t) {
    if (int(inputs.size()) > cfg.max_inputs)
        throw CapacityError("too many input images: " + std::to_string(inputs.size()));
    if (noised_outputs.empty() || int(noised_outputs.size()) > cfg.max_outputs)
        throw CapacityError("output count outside [1, " + std::to_string(cfg.max_outputs) + "]");
    if (roles.size() != inputs.size()) throw ShapeError("one role required per input image");
    if (ref.inputs.size() != inputs.size() || ref.outputs.size() != noised_outputs.size())
        throw ShapeError("reference map does not match image counts");
    if (int(text_ids.size()) > cfg.text_len)
        throw CapacityError("text length exceeds " + std::to_string(cfg.text_len));
    if (!(t >= T(0) && t <= T(1))) throw Error("diffusion time outside [0, 1]");

    auto check_latent = [&](const Latent<T>& lat) {
        if (lat.ch != cfg.latent_channels() || lat.h != cfg.latent_res() ||
            lat.w != cfg.latent_res())
            throw ShapeError("latent shape does not match model config");
    };

    PackedSample<T> ps;
    ps.text_ids = text_ids;
    ps.t = t;
    // input blocks in referring-word order: IMG<k> binds slot ref.inputs[k-1]
    for (size_t k = 0; k < inputs.size(); k++) {
        int slot = ref.inputs[k];
        if (slot < 0 || slot >= int(inputs.size())) throw ShapeError("reference map slot invalid");
        check_latent(inputs[size_t(slot)]);
        typename PackedSample<T>::Block b;
        b.index_row = int(k);
        b.role = int(roles[size_t(slot)]);
        b.noise = false;
        b.patches = patchify(inputs[size_t(slot)], cfg.patch);
        ps.blocks.push_back(std::move(b));
    }
    for (size_t m = 0; m < noised_outputs.size(); m++) {
        int slot = ref.outputs[m];
        if (slot < 0 || slot >= int(noised_outputs.size()))
            throw ShapeError("reference map slot invalid");
        check_latent(noised_outputs[size_t(slot)]);
        typename PackedSample<T>::Block b;
        b.index_row = cfg.max_inputs + int(m);
        b.role = -1;
        b.noise = true;
        b.patches = patchify(noised_outputs[size_t(slot)], cfg.patch);
        ps.blocks.push_back(std::move(b));
    }
    return ps;
}

template <class T>
std::vector<TokenMeta> token_metadata(const ModelConfig& cfg, const PackedSample<T>& ps) {
    std::vector<TokenMeta> meta;
    for (size_t i = 0; i < ps.text_ids.size(); i++) meta.push_back({TokenMeta::text, -1, -1, -1, -1});
    const int G = cfg.grid();
    for (const auto& b : ps.blocks)
        for (int g = 0; g < G * G; g++)
            meta.push_back({b.noise ? TokenMeta::noise_image : TokenMeta::input_image,
                            b.index_row, b.role, g / G, g % G});
    return meta;
}

template <class T>
Latent<T> unpack_block(const ModelConfig& cfg, const PackedSample<T>& ps, int b) {
    const auto& blk = ps.blocks.at(size_t(b));
    return unpatchify(blk.patches, cfg.patch, cfg.latent_channels(), cfg.latent_res(),
                      cfg.latent_res());
}

template <class T>
std::vector<T> time_features(const ModelConfig& cfg, T t) {
    const int half = cfg.time_features / 2;
    std::vector<T> f(size_t(cfg.time_features));
    for (int i = 0; i < half; i++) {
        double freq =
            half > 1 ? std::pow(1000.0, double(i) / double(half - 1)) : 1.0;
        f[size_t(2 * i)] = T(std::sin(double(t) * freq));
        f[size_t(2 * i + 1)] = T(std::cos(double(t) * freq));
    }
    return f;
}

// ------------------------------------------------------------ activations

template <class T>
struct Acts {
    int L = 0, n_noise = 0;
    std::vector<T> X;             // L x d, embedding output
    std::vector<T> patches_all;   // n_img_rows x patch_dim
    std::vector<T> time_feats, time_u, time_s, time_e;
    struct Layer {
        std::vector<T> ln1_mean, ln1_rstd, ln1_out;
        std::vector<T> q, k, v, probs, att_y, x_attn;
        std::vector<T> ln2_mean, ln2_rstd, ln2_out;
        std::vector<T> fc_out, gelu_out, x_out;
    };
    std::vector<Layer> layers;
    std::vector<T> lnf_mean, lnf_rstd, lnf_out;
};

template <class T>
Acts<T>* new_acts() {
    return new Acts<T>();
}
template <class T>
void delete_acts(Acts<T>* a) {
    delete a;
}

// ------------------------------------------------------------ net

template <class T>
Net<T>::Net(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build_layout();
    w_.assign(infos_.empty() ? 0 : infos_.back().offset + infos_.back().size, T(0));
}

template <class T>
Net<T>::Net(const Net&) = default;

template <class T>
Net<T>& Net<T>::operator=(const Net&) = default;

template <class T>
Net<T>::~Net() = default;

template <class T>
void Net<T>::add_param(const std::string& name, size_t size, bool decay) {
    size_t offset = infos_.empty() ? 0 : infos_.back().offset + infos_.back().size;
    index_.emplace(name, infos_.size());
    infos_.push_back({name, offset, size, decay});
}

template <class T>
void Net<T>::build_layout() {
    const size_t d = size_t(cfg_.d_model);
    add_param("tok_emb", size_t(cfg_.vocab_size) * d, false);
    add_param("text_pos", size_t(cfg_.text_len) * d, false);
    add_param("img_pos", size_t(cfg_.tokens_per_image()) * d, false);
    add_param("idx_emb", size_t(cfg_.max_inputs + cfg_.max_outputs) * d, false);
    add_param("role_emb", size_t(cfg_.n_roles) * d, false);
    add_param("time_w1", size_t(cfg_.time_features) * d, true);
    add_param("time_b1", d, false);
    add_param("time_w2", d * d, true);
    add_param("time_b2", d, false);
    add_param("patch_w", size_t(cfg_.patch_dim()) * d, true);
    add_param("patch_b", d, false);
    for (int l = 0; l < cfg_.n_layers; l++) {
        std::string p = "l" + std::to_string(l) + ".";
        add_param(p + "ln1_g", d, false);
        add_param(p + "ln1_b", d, false);
        add_param(p + "wq", d * d, true);
        add_param(p + "bq", d, false);
        add_param(p + "wk", d * d, true);
        add_param(p + "bk", d, false);
        add_param(p + "wv", d * d, true);
        add_param(p + "bv", d, false);
        add_param(p + "wo", d * d, true);
        add_param(p + "bo", d, false);
        add_param(p + "ln2_g", d, false);
        add_param(p + "ln2_b", d, false);
        add_param(p + "fc_w", d * d * 4, true);
        add_param(p + "fc_b", d * 4, false);
        add_param(p + "proj_w", d * 4 * d, true);
        add_param(p + "proj_b", d, false);
    }
    add_param("lnf_g", d, false);
    add_param("lnf_b", d, false);
    add_param("out_w", d * size_t(cfg_.patch_dim()), true);
    add_param("out_b", size_t(cfg_.patch_dim()), false);
}

template <class T>
T* Net<T>::param(const std::string& name) {
    return w_.data() + param_info(name).offset;
}

template <class T>
const T* Net<T>::param(const std::string& name) const {
    return w_.data() + param_info(name).offset;
}

template <class T>
const ParamInfo& Net<T>::param_info(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return infos_[it->second];
}

template <class T>
void Net<T>::init_params(uint64_t seed) {
    const double res_scale = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
    for (size_t pi = 0; pi < infos_.size(); pi++) {
        const ParamInfo& info = infos_[pi];
        T* p = w_.data() + info.offset;
        Rng rng(derive_seed(seed, pi, 0x1a17));
        const std::string& n = info.name;
        bool is_ln_gain = n.size() >= 2 && n.compare(n.size() - 2, 2, "_g") == 0 &&
                          n.find("ln") != std::string::npos;
        bool is_bias = n.size() >= 2 && (n.compare(n.size() - 2, 2, "_b") == 0 ||
                                         n[n.size() - 2] == 'b');
        bool is_residual_proj =
            n.find(".wo") != std::string::npos || n.find(".proj_w") != std::string::npos;
        bool is_head = n == "out_w" || n == "out_b";
        if (is_head) {
            std::fill(p, p + info.size, T(0));  // zero-init head: predicts 0 at step 0
        } else if (is_ln_gain) {
            std::fill(p, p + info.size, T(1));
        } else if (is_bias) {
            std::fill(p, p + info.size, T(0));
        } else {
            double s = is_residual_proj ? res_scale : 0.02;
            for (size_t i = 0; i < info.size; i++) p[i] = T(rng.normal() * s);
        }
    }
}

// fills X and the embed-related fields of acts
template <class T>
static void embed_into(const Net<T>& net, const ModelConfig& cfg, const PackedSample<T>& ps,
                       std::vector<T>& X, Acts<T>& acts) {
    const int d = cfg.d_model;
    const int G = cfg.tokens_per_image();
    const int P = cfg.patch_dim();
    const int n_text = ps.n_text();
    const int n_img_rows = int(ps.blocks.size()) * G;
    const int L = n_text + n_img_rows;
    X.assign(size_t(L) * d, T(0));

    const T* tok_emb = net.param("tok_emb");
    const T* text_pos = net.param("text_pos");
    const T* img_pos = net.param("img_pos");
    const T* idx_emb = net.param("idx_emb");
    const T* role_emb = net.param("role_emb");

    for (int i = 0; i < n_text; i++) {
        int id = ps.text_ids[size_t(i)];
        if (id < 0 || id >= cfg.vocab_size) throw VocabularyError("token id out of range");
        T* row = X.data() + size_t(i) * d;
        const T* te = tok_emb + size_t(id) * d;
        const T* pe = text_pos + size_t(i) * d;
        for (int j = 0; j < d; j++) row[j] = te[j] + pe[j];
    }

    // timestep embedding: sinusoidal features -> linear -> silu -> linear
    acts.time_feats = time_features<T>(cfg, ps.t);
    acts.time_u.assign(size_t(d), T(0));
    kern::matmul(acts.time_feats.data(), net.param("time_w1"), acts.time_u.data(), 1,
                 cfg.time_features, d);
    kern::add_bias(acts.time_u.data(), net.param("time_b1"), 1, d);
    acts.time_s.assign(size_t(d), T(0));
    kern::silu_fwd(acts.time_u.data(), acts.time_s.data(), size_t(d));
    acts.time_e.assign(size_t(d), T(0));
    kern::matmul(acts.time_s.data(), net.param("time_w2"), acts.time_e.data(), 1, d, d);
    kern::add_bias(acts.time_e.data(), net.param("time_b2"), 1, d);

    acts.patches_all.resize(size_t(n_img_rows) * P);
    for (size_t b = 0; b < ps.blocks.size(); b++) {
        if (int(ps.blocks[b].patches.size()) != G * P)
            throw ShapeError("packed block has wrong patch count");
        std::copy(ps.blocks[b].patches.begin(), ps.blocks[b].patches.end(),
                  acts.patches_all.begin() + size_t(b) * G * P);
    }
    if (n_img_rows > 0) {
        kern::matmul(acts.patches_all.data(), net.param("patch_w"),
                     X.data() + size_t(n_text) * d, n_img_rows, P, d);
        kern::add_bias(X.data() + size_t(n_text) * d, net.param("patch_b"), n_img_rows, d);
    }
    for (size_t b = 0; b < ps.blocks.size(); b++) {
        const auto& blk = ps.blocks[b];
        const T* idx_row = idx_emb + size_t(blk.index_row) * d;
        const T* role_row = blk.noise ? acts.time_e.data() : role_emb + size_t(blk.role) * d;
        for (int g = 0; g < G; g++) {
            T* row = X.data() + (size_t(n_text) + b * G + g) * d;
            const T* pos_row = img_pos + size_t(g) * d;
            for (int j = 0; j < d; j++) row[j] += pos_row[j] + idx_row[j] + role_row[j];
        }
    }
}

template <class T>
void Net<T>::embed(const PackedSample<T>& ps, std::vector<T>& X) const {
    ActsBox<T> box;
    embed_into(*this, cfg_, ps, X, *box.a);
}

template <class T>
std::vector<T> Net<T>::forward(const PackedSample<T>& ps) const {
    ActsBox<T> box;
    return forward(ps, *box.a);
}

template <class T>
std::vector<T> Net<T>::forward(const PackedSample<T>& ps, Acts<T>& a) const {
    const int d = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int dh = d / H;
    const int G = cfg_.tokens_per_image();
    const int P = cfg_.patch_dim();
    const int L = ps.n_tokens(cfg_);
    const int n_noise = ps.n_noise_blocks() * G;
    if (n_noise == 0) throw ShapeError("sample has no noise tokens");

    a.L = L;
    a.n_noise = n_noise;
    embed_into(*this, cfg_, ps, a.X, a);

    a.layers.resize(size_t(cfg_.n_layers));
    const T* cur = a.X.data();
    std::vector<T> tmp(size_t(L) * d);
    for (int l = 0; l < cfg_.n_layers; l++) {
        auto& al = a.layers[size_t(l)];
        std::string pre = "l" + std::to_string(l) + ".";
        al.ln1_mean.resize(size_t(L));
        al.ln1_rstd.resize(size_t(L));
        al.ln1_out.resize(size_t(L) * d);
        kern::layernorm_fwd(cur, param(pre + "ln1_g"), param(pre + "ln1_b"), al.ln1_out.data(),
                            al.ln1_mean.data(), al.ln1_rstd.data(), L, d);
        al.q.resize(size_t(L) * d);
        al.k.resize(size_t(L) * d);
        al.v.resize(size_t(L) * d);
        kern::matmul(al.ln1_out.data(), param(pre + "wq"), al.q.data(), L, d, d);
        kern::add_bias(al.q.data(), param(pre + "bq"), L, d);
        kern::matmul(al.ln1_out.data(), param(pre + "wk"), al.k.data(), L, d, d);
        kern::add_bias(al.k.data(), param(pre + "bk"), L, d);
        kern::matmul(al.ln1_out.data(), param(pre + "wv"), al.v.data(), L, d, d);
        kern::add_bias(al.v.data(), param(pre + "bv"), L, d);
        al.probs.resize(size_t(H) * L * L);
        al.att_y.resize(size_t(L) * d);
        kern::attention_fwd(al.q.data(), al.k.data(), al.v.data(), al.probs.data(),
                            al.att_y.data(), L, H, dh);
        kern::matmul(al.att_y.data(), param(pre + "wo"), tmp.data(), L, d, d);
        kern::add_bias(tmp.data(), param(pre + "bo"), L, d);
        al.x_attn.resize(size_t(L) * d);
        for (size_t i = 0; i < al.x_attn.size(); i++) al.x_attn[i] = cur[i] + tmp[i];

        al.ln2_mean.resize(size_t(L));
        al.ln2_rstd.resize(size_t(L));
        al.ln2_out.resize(size_t(L) * d);
        kern::layernorm_fwd(al.x_attn.data(), param(pre + "ln2_g"), param(pre + "ln2_b"),
                            al.ln2_out.data(), al.ln2_mean.data(), al.ln2_rstd.data(), L, d);
        al.fc_out.resize(size_t(L) * d * 4);
        kern::matmul(al.ln2_out.data(), param(pre + "fc_w"), al.fc_out.data(), L, d, 4 * d);
        kern::add_bias(al.fc_out.data(), param(pre + "fc_b"), L, 4 * d);
        al.gelu_out.resize(size_t(L) * d * 4);
        kern::gelu_fwd(al.fc_out.data(), al.gelu_out.data(), al.fc_out.size());
        kern::matmul(al.gelu_out.data(), param(pre + "proj_w"), tmp.data(), L, 4 * d, d);
        kern::add_bias(tmp.data(), param(pre + "proj_b"), L, d);
        al.x_out.resize(size_t(L) * d);
        for (size_t i = 0; i < al.x_out.size(); i++) al.x_out[i] = al.x_attn[i] + tmp[i];
        cur = al.x_out.data();
    }

    const T* xn = cur + size_t(L - n_noise) * d;
    a.lnf_mean.resize(size_t(n_noise));
    a.lnf_rstd.resize(size_t(n_noise));
    a.lnf_out.resize(size_t(n_noise) * d);
    kern::layernorm_fwd(xn, param("lnf_g"), param("lnf_b"), a.lnf_out.data(), a.lnf_mean.data(),
                        a.lnf_rstd.data(), n_noise, d);
    std::vector<T> pred(size_t(n_noise) * P);
    kern::matmul(a.lnf_out.data(), param("out_w"), pred.data(), n_noise, d, P);
    kern::add_bias(pred.data(), param("out_b"), n_noise, P);
    return pred;
}

template <class T>
void Net<T>::backward(const PackedSample<T>& ps, const Acts<T>& a, const std::vector<T>& dpred,
                      std::vector<T>& grads) const {
    const int d = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int dh = d / H;
    const int G = cfg_.tokens_per_image();
    const int P = cfg_.patch_dim();
    const int L = a.L;
    const int n_noise = a.n_noise;
    const int n_text = ps.n_text();
    if (int(dpred.size()) != n_noise * P) throw ShapeError("dpred shape mismatch");

    grads.assign(w_.size(), T(0));
    auto gp = [&](const std::string& name) { return grads.data() + param_info(name).offset; };

    // head
    std::vector<T> d_lnf(size_t(n_noise) * d);
    kern::matmul_nt(dpred.data(), param("out_w"), d_lnf.data(), n_noise, P, d);
    kern::matmul_tn(a.lnf_out.data(), dpred.data(), gp("out_w"), n_noise, d, P);
    kern::bias_grad_acc(dpred.data(), gp("out_b"), n_noise, P);

    const T* x_last =
        cfg_.n_layers > 0 ? a.layers.back().x_out.data() : a.X.data();
    std::vector<T> d_cur(size_t(L) * d, T(0));
    kern::layernorm_bwd(d_lnf.data(), x_last + size_t(L - n_noise) * d, param("lnf_g"),
                        a.lnf_mean.data(), a.lnf_rstd.data(),
                        d_cur.data() + size_t(L - n_noise) * d, gp("lnf_g"), gp("lnf_b"),
                        n_noise, d);

    std::vector<T> d_tmp(size_t(L) * d), d_xa(size_t(L) * d);
    std::vector<T> d_fc(size_t(L) * d * 4), d_gelu(size_t(L) * d * 4);
    std::vector<T> dq(size_t(L) * d), dk(size_t(L) * d), dv(size_t(L) * d);
    std::vector<T> d_att_y(size_t(L) * d);
    std::vector<T> dscores(size_t(H) * L * L);

    for (int l = cfg_.n_layers - 1; l >= 0; l--) {
        const auto& al = a.layers[size_t(l)];
        std::string pre = "l" + std::to_string(l) + ".";
        const T* x0 = l == 0 ? a.X.data() : a.layers[size_t(l - 1)].x_out.data();

        // mlp branch; d_cur holds d(loss)/d(x_out)
        kern::matmul_nt(d_cur.data(), param(pre + "proj_w"), d_gelu.data(), L, d, 4 * d);
        kern::matmul_tn(al.gelu_out.data(), d_cur.data(), gp(pre + "proj_w"), L, 4 * d, d);
        kern::bias_grad_acc(d_cur.data(), gp(pre + "proj_b"), L, d);
        kern::gelu_bwd(d_gelu.data(), al.fc_out.data(), d_fc.data(), size_t(L) * 4 * d);
        kern::matmul_nt(d_fc.data(), param(pre + "fc_w"), d_tmp.data(), L, 4 * d, d);
        kern::matmul_tn(al.ln2_out.data(), d_fc.data(), gp(pre + "fc_w"), L, d, 4 * d);
        kern::bias_grad_acc(d_fc.data(), gp(pre + "fc_b"), L, 4 * d);
        kern::layernorm_bwd(d_tmp.data(), al.x_attn.data(), param(pre + "ln2_g"),
                            al.ln2_mean.data(), al.ln2_rstd.data(), d_xa.data(), gp(pre + "ln2_g"),
                            gp(pre + "ln2_b"), L, d);
        kern::add_inplace(d_xa.data(), d_cur.data(), size_t(L) * d);  // residual

        // attention branch; d_xa holds d(loss)/d(x_attn)
        kern::matmul_nt(d_xa.data(), param(pre + "wo"), d_att_y.data(), L, d, d);
        kern::matmul_tn(al.att_y.data(), d_xa.data(), gp(pre + "wo"), L, d, d);
        kern::bias_grad_acc(d_xa.data(), gp(pre + "bo"), L, d);
        kern::attention_bwd(d_att_y.data(), al.q.data(), al.k.data(), al.v.data(),
                            al.probs.data(), dscores.data(), dq.data(), dk.data(), dv.data(), L,
                            H, dh);
        kern::matmul_tn(al.ln1_out.data(), dq.data(), gp(pre + "wq"), L, d, d);
        kern::bias_grad_acc(dq.data(), gp(pre + "bq"), L, d);
        kern::matmul_tn(al.ln1_out.data(), dk.data(), gp(pre + "wk"), L, d, d);
        kern::bias_grad_acc(dk.data(), gp(pre + "bk"), L, d);
        kern::matmul_tn(al.ln1_out.data(), dv.data(), gp(pre + "wv"), L, d, d);
        kern::bias_grad_acc(dv.data(), gp(pre + "bv"), L, d);
        kern::matmul_nt(dq.data(), param(pre + "wq"), d_tmp.data(), L, d, d);
        kern::matmul_nt(dk.data(), param(pre + "wk"), d_gelu.data(), L, d, d);  // reuse scratch
        kern::add_inplace(d_tmp.data(), d_gelu.data(), size_t(L) * d);
        kern::matmul_nt(dv.data(), param(pre + "wv"), d_gelu.data(), L, d, d);
        kern::add_inplace(d_tmp.data(), d_gelu.data(), size_t(L) * d);
        kern::layernorm_bwd(d_tmp.data(), x0, param(pre + "ln1_g"), al.ln1_mean.data(),
                            al.ln1_rstd.data(), d_cur.data(), gp(pre + "ln1_g"),
                            gp(pre + "ln1_b"), L, d);
        kern::add_inplace(d_cur.data(), d_xa.data(), size_t(L) * d);  // residual
    }

    // --- embedding backward; d_cur is now d(loss)/d(X)
    T* g_tok = gp("tok_emb");
    T* g_tpos = gp("text_pos");
    for (int i = 0; i < n_text; i++) {
        const T* row = d_cur.data() + size_t(i) * d;
        T* gt = g_tok + size_t(ps.text_ids[size_t(i)]) * d;
        T* gpos = g_tpos + size_t(i) * d;
        for (int j = 0; j < d; j++) {
            gt[j] += row[j];
            gpos[j] += row[j];
        }
    }
    const int n_img_rows = int(ps.blocks.size()) * G;
    if (n_img_rows > 0) {
        kern::matmul_tn(a.patches_all.data(), d_cur.data() + size_t(n_text) * d, gp("patch_w"),
                        n_img_rows, P, d);
        kern::bias_grad_acc(d_cur.data() + size_t(n_text) * d, gp("patch_b"), n_img_rows, d);
    }
    T* g_ipos = gp("img_pos");
    T* g_idx = gp("idx_emb");
    T* g_role = gp("role_emb");
    std::vector<T> d_time_e(size_t(d), T(0));
    for (size_t b = 0; b < ps.blocks.size(); b++) {
        const auto& blk = ps.blocks[b];
        for (int g = 0; g < G; g++) {
            const T* row = d_cur.data() + (size_t(n_text) + b * G + g) * d;
            T* gpos = g_ipos + size_t(g) * d;
            T* gidx = g_idx + size_t(blk.index_row) * d;
            T* extra = blk.noise ? d_time_e.data() : g_role + size_t(blk.role) * d;
            for (int j = 0; j < d; j++) {
                gpos[j] += row[j];
                gidx[j] += row[j];
                extra[j] += row[j];
            }
        }
    }
    // timestep mlp backward
    kern::matmul_tn(a.time_s.data(), d_time_e.data(), gp("time_w2"), 1, d, d);
    kern::bias_grad_acc(d_time_e.data(), gp("time_b2"), 1, d);
    std::vector<T> d_time_s(size_t(d), T(0)), d_time_u(size_t(d), T(0));
    kern::matmul_nt(d_time_e.data(), param("time_w2"), d_time_s.data(), 1, d, d);
    kern::silu_bwd(d_time_s.data(), a.time_u.data(), d_time_u.data(), size_t(d));
    kern::matmul_tn(a.time_feats.data(), d_time_u.data(), gp("time_w1"), 1, cfg_.time_features,
                    d);
    kern::bias_grad_acc(d_time_u.data(), gp("time_b1"), 1, d);
}

// ------------------------------------------------------------ autoencoder

Autoencoder::Autoencoder(int ch) : channels(ch) {
    enc_w.assign(size_t(12) * ch, 0.0f);
    enc_b.assign(size_t(ch), 0.0f);
    dec_w.assign(size_t(ch) * 12, 0.0f);
    dec_b.assign(12, 0.0f);
}

namespace {

// 2x2 pixel patch as 12 floats in [-1,1], channel-major
void patch_vec(const Image& img, int gy, int gx, float* out) {
    for (int c = 0; c < 3; c++)
        for (int py = 0; py < 2; py++)
            for (int px = 0; px < 2; px++)
                out[c * 4 + py * 2 + px] =
                    float(img.px[(size_t(gy * 2 + py) * img.width + gx * 2 + px) * 3 + c]) /
                        255.0f * 2.0f -
                    1.0f;
}

}  // namespace

Latent<float> Autoencoder::encode(const Image& img) const {
    if (img.width % 2 != 0 || img.height % 2 != 0) throw ShapeError("image dims must be even");
    Latent<float> lat;
    lat.ch = channels;
    lat.h = img.height / 2;
    lat.w = img.width / 2;
    lat.v.assign(size_t(channels) * lat.h * lat.w, 0.0f);
    std::vector<float> x(12);
    for (int gy = 0; gy < lat.h; gy++)
        for (int gx = 0; gx < lat.w; gx++) {
            patch_vec(img, gy, gx, x.data());
            for (int c = 0; c < channels; c++) {
                float acc = enc_b[size_t(c)];
                for (int i = 0; i < 12; i++) acc += x[size_t(i)] * enc_w[size_t(i) * channels + c];
                lat.at(c, gy, gx) = acc;
            }
        }
    return lat;
}

Image Autoencoder::decode(const Latent<float>& lat) const {
    if (lat.ch != channels) throw ShapeError("latent channels mismatch");
    Image img(lat.w * 2, lat.h * 2);
    for (int gy = 0; gy < lat.h; gy++)
        for (int gx = 0; gx < lat.w; gx++) {
            for (int i = 0; i < 12; i++) {
                float acc = dec_b[size_t(i)];
                for (int c = 0; c < channels; c++) acc += lat.at(c, gy, gx) * dec_w[size_t(c) * 12 + i];
                int ch = i / 4, py = (i % 4) / 2, px = i % 2;
                double v = (double(acc) + 1.0) / 2.0 * 255.0;
                img.px[(size_t(gy * 2 + py) * img.width + gx * 2 + px) * 3 + ch] =
                    uint8_t(std::clamp(std::lround(v), 0l, 255l));
            }
        }
    return img;
}

void Autoencoder::train(const std::vector<Image>& images, int steps, float lr, uint64_t seed) {
    if (images.empty()) throw ConfigError("autoencoder needs training images");
    Rng rng(derive_seed(seed, 0xae));
    for (float& w : enc_w) w = float(rng.normal() * 0.2);
    for (float& w : dec_w) w = float(rng.normal() * 0.2);

    const int B = 64;
    const int c = channels;
    std::vector<float> x(size_t(B) * 12), z(size_t(B) * c), xh(size_t(B) * 12);
    std::vector<float> dxh(size_t(B) * 12), dz(size_t(B) * c);
    std::vector<float> g_enc_w(enc_w.size()), g_enc_b(enc_b.size());
    std::vector<float> g_dec_w(dec_w.size()), g_dec_b(dec_b.size());
    std::vector<float> m(enc_w.size() + enc_b.size() + dec_w.size() + dec_b.size(), 0.0f);
    std::vector<float> v(m.size(), 0.0f);

    for (int step = 1; step <= steps; step++) {
        for (int i = 0; i < B; i++) {
            const Image& img = images[rng.below(images.size())];
            int gy = int(rng.below(uint64_t(img.height / 2)));
            int gx = int(rng.below(uint64_t(img.width / 2)));
            patch_vec(img, gy, gx, x.data() + size_t(i) * 12);
        }
        ref::matmul(x.data(), enc_w.data(), z.data(), B, 12, c);
        ref::add_bias(z.data(), enc_b.data(), B, c);
        ref::matmul(z.data(), dec_w.data(), xh.data(), B, c, 12);
        ref::add_bias(xh.data(), dec_b.data(), B, 12);
        float inv = 2.0f / float(B * 12);
        for (size_t i = 0; i < xh.size(); i++) dxh[i] = inv * (xh[i] - x[i]);
        std::fill(g_dec_b.begin(), g_dec_b.end(), 0.0f);
        std::fill(g_enc_b.begin(), g_enc_b.end(), 0.0f);
        ref::matmul_tn(z.data(), dxh.data(), g_dec_w.data(), B, c, 12);
        ref::bias_grad_acc(dxh.data(), g_dec_b.data(), B, 12);
        ref::matmul_nt(dxh.data(), dec_w.data(), dz.data(), B, 12, c);
        ref::matmul_tn(x.data(), dz.data(), g_enc_w.data(), B, 12, c);
        ref::bias_grad_acc(dz.data(), g_enc_b.data(), B, c);

        size_t off = 0;
        auto upd = [&](std::vector<float>& w, std::vector<float>& g) {
            kern::adamw_update(w.data(), g.data(), m.data() + off, v.data() + off, w.size(), lr,
                               0.9f, 0.95f, 1e-8f, 0.0f, step);
            off += w.size();
        };
        upd(enc_w, g_enc_w);
        upd(enc_b, g_enc_b);
        upd(dec_w, g_dec_w);
        upd(dec_b, g_dec_b);
    }
}

void Autoencoder::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot write " + path);
    uint32_t magic = 0x46414531;  // "FAE1"
    uint32_t ch = uint32_t(channels);
    f.write(reinterpret_cast<const char*>(&magic), 4);
    f.write(reinterpret_cast<const char*>(&ch), 4);
    auto dump = [&](const std::vector<float>& v) {
        f.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 4));
    };
    dump(enc_w);
    dump(enc_b);
    dump(dec_w);
    dump(dec_b);
}

Autoencoder Autoencoder::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot read " + path);
    uint32_t magic = 0, ch = 0;
    f.read(reinterpret_cast<char*>(&magic), 4);
    f.read(reinterpret_cast<char*>(&ch), 4);
    if (magic != 0x46414531) throw IntegrityError("bad autoencoder file: " + path);
    Autoencoder ae{int(ch)};
    auto slurp = [&](std::vector<float>& v) {
        f.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * 4));
    };
    slurp(ae.enc_w);
    slurp(ae.enc_b);
    slurp(ae.dec_w);
    slurp(ae.dec_b);
    if (!f) throw IntegrityError("truncated autoencoder file: " + path);
    return ae;
}

double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height) throw ShapeError("psnr: size mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.px.size(); i++) {
        double d = (double(a.px[i]) - double(b.px[i])) / 255.0;
        mse += d * d;
    }
    mse /= double(a.px.size());
    if (mse <= 0.0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

// ------------------------------------------------------------ checkpoints

namespace fs = std::filesystem;

static constexpr uint32_t kWeightsMagic = 0x46465731;  // "FFW1"

void save_checkpoint(const std::string& dir, const Net<float>& net, const Vocabulary& vocab,
                     const OptState* opt, long step, uint64_t train_seed,
                     const Autoencoder* ae) {
    fs::create_directories(dir);

    std::string vocab_text = vocab.to_json().dump(2);
    uint64_t vocab_hash = fnv1a64(vocab_text.data(), vocab_text.size());
    {
        std::ofstream f(dir + "/vocab.json");
        f << vocab_text << "\n";
    }

    std::string wpath = dir + "/weights.bin";
    uint64_t whash;
    {
        std::ofstream f(wpath, std::ios::binary);
        if (!f) throw IntegrityError("cannot write " + wpath);
        std::vector<char> payload;
        auto append = [&](const void* p, size_t n) {
            const char* c = static_cast<const char*>(p);
            payload.insert(payload.end(), c, c + n);
        };
        uint32_t magic = kWeightsMagic, schema = 1;
        uint64_t n = net.n_params();
        uint8_t has_opt = opt != nullptr;
        append(&magic, 4);
        append(&schema, 4);
        append(&n, 8);
        append(&has_opt, 1);
        append(net.weights().data(), n * 4);
        if (opt) {
            if (opt->m.size() != n || opt->v.size() != n)
                throw ShapeError("optimizer state size mismatch");
            append(opt->m.data(), n * 4);
            append(opt->v.data(), n * 4);
        }
        whash = fnv1a64(payload.data(), payload.size());
        f.write(payload.data(), std::streamsize(payload.size()));
        f.write(reinterpret_cast<const char*>(&whash), 8);
    }

    json params = json::array();
    for (const ParamInfo& p : net.params())
        params.push_back({{"name", p.name}, {"offset", p.offset}, {"size", p.size}});
    char hex[32];
    auto hexstr = [&](uint64_t h) {
        std::snprintf(hex, sizeof hex, "%016llx", (unsigned long long)h);
        return std::string(hex);
    };
    json cfg_json{{"schema_version", 1},
                  {"model", net.config().to_json()},
                  {"step", step},
                  {"train_seed", train_seed},
                  {"vocab_hash", hexstr(vocab_hash)},
                  {"weights_hash", hexstr(whash)},
                  {"params", params}};
    {
        std::ofstream f(dir + "/config.json");
        f << cfg_json.dump(2) << "\n";
    }
    if (ae) ae->save(dir + "/ae.bin");
}

CheckpointData load_checkpoint(const std::string& dir) {
    std::ifstream cf(dir + "/config.json");
    if (!cf) throw IntegrityError("missing checkpoint config: " + dir + "/config.json");
    json cfg_json = json::parse(cf, nullptr, true);
    if (cfg_json.value("schema_version", 0) != 1)
        throw IntegrityError("unsupported checkpoint schema");

    CheckpointData ck;
    ck.cfg = ModelConfig::from_json(cfg_json.at("model"));
    ck.step = cfg_json.value("step", 0l);
    ck.train_seed = cfg_json.value("train_seed", uint64_t(0));

    std::ifstream vf(dir + "/vocab.json");
    if (!vf) throw IntegrityError("missing vocab.json in " + dir);
    std::string vocab_text((std::istreambuf_iterator<char>(vf)), std::istreambuf_iterator<char>());
    while (!vocab_text.empty() && vocab_text.back() == '\n') vocab_text.pop_back();
    ck.vocab = Vocabulary::from_json(json::parse(vocab_text));
    if (ck.cfg.vocab_size != ck.vocab.size())
        throw IntegrityError("vocab size does not match model config");

    std::string wpath = dir + "/weights.bin";
    std::ifstream f(wpath, std::ios::binary);
    if (!f) throw IntegrityError("missing weights: " + wpath);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 25) throw IntegrityError("weights file truncated: " + wpath);
    uint64_t stored_hash;
    std::memcpy(&stored_hash, bytes.data() + bytes.size() - 8, 8);
    if (fnv1a64(bytes.data(), bytes.size() - 8) != stored_hash)
        throw IntegrityError("weights integrity hash mismatch: " + wpath);
    size_t off = 0;
    auto read = [&](void* p, size_t n) {
        if (off + n > bytes.size() - 8) throw IntegrityError("weights file truncated: " + wpath);
        std::memcpy(p, bytes.data() + off, n);
        off += n;
    };
    uint32_t magic, schema;
    uint64_t n;
    uint8_t has_opt;
    read(&magic, 4);
    read(&schema, 4);
    read(&n, 8);
    read(&has_opt, 1);
    if (magic != kWeightsMagic || schema != 1) throw IntegrityError("bad weights header");

    ck.net.emplace(ck.cfg);
    if (ck.net->n_params() != n) throw IntegrityError("parameter count mismatch");
    read(ck.net->weights().data(), n * 4);
    ck.has_opt = has_opt != 0;
    if (ck.has_opt) {
        ck.opt.m.resize(n);
        ck.opt.v.resize(n);
        read(ck.opt.m.data(), n * 4);
        read(ck.opt.v.data(), n * 4);
        ck.opt.step = ck.step;
    }
    if (fs::exists(dir + "/ae.bin")) ck.ae = Autoencoder::load(dir + "/ae.bin");
    if (ck.cfg.use_ae && !ck.ae) throw IntegrityError("config expects ae.bin in " + dir);
    return ck;
}

// ------------------------------------------------------------ instantiation

#define FF_MODEL_INST(T)                                                                         \
    template Latent<T> encode_image<T>(const Image&);                                           \
    template Image decode_latent<T>(const Latent<T>&);                                          \
    template std::vector<T> patchify<T>(const Latent<T>&, int);                                 \
    template Latent<T> unpatchify<T>(const std::vector<T>&, int, int, int, int);                \
    template struct PackedSample<T>;                                                            \
    template PackedSample<T> pack<T>(const ModelConfig&, const std::vector<int>&,               \
                                     const std::vector<Latent<T>>&, const std::vector<Role>&,   \
                                     const std::vector<Latent<T>>&, const ReferenceMap&, T);    \
    template std::vector<TokenMeta> token_metadata<T>(const ModelConfig&,                       \
                                                      const PackedSample<T>&);                  \
    template Latent<T> unpack_block<T>(const ModelConfig&, const PackedSample<T>&, int);        \
    template std::vector<T> time_features<T>(const ModelConfig&, T);                            \
    template Acts<T>* new_acts<T>();                                                            \
    template void delete_acts<T>(Acts<T>*);                                                     \
    template class Net<T>;

FF_MODEL_INST(float)
FF_MODEL_INST(double)
#undef FF_MODEL_INST

}  // namespace ff::model
