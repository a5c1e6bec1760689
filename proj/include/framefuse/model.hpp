#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "framefuse/common.hpp"
#include "framefuse/image.hpp"
#include "framefuse/prompting.hpp"

// Discontinuous-frame diffusion transformer. A sample's text tokens and the
// visual tokens of every input/output image are packed into one 1D sequence
// processed with full bidirectional attention; only noise (output) tokens are
// projected back to patch space.

namespace ff::model {

using prompting::ReferenceMap;
using prompting::Role;
using prompting::Vocabulary;

struct ModelConfig {
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int patch = 4;
    int resolution = 32;       // image resolution
    int text_len = 48;         // max text tokens including BOS/EOS
    int max_inputs = prompting::kMaxInputs;
    int max_outputs = prompting::kMaxOutputs;
    int n_roles = 3;
    int vocab_size = 0;
    int time_features = 32;    // sinusoidal feature count, even
    bool use_ae = false;       // optional 2x-downsampling autoencoder
    int ae_channels = 8;

    int latent_channels() const { return use_ae ? ae_channels : 3; }
    int latent_res() const { return use_ae ? resolution / 2 : resolution; }
    int grid() const { return latent_res() / patch; }
    int tokens_per_image() const { return grid() * grid(); }
    int patch_dim() const { return patch * patch * latent_channels(); }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

// ------------------------------------------------------------ latents

template <class T>
struct Latent {
    int ch = 0, h = 0, w = 0;
    std::vector<T> v;  // channel-major planes

    T& at(int c, int y, int x) { return v[(size_t(c) * h + y) * w + x]; }
    const T& at(int c, int y, int x) const { return v[(size_t(c) * h + y) * w + x]; }
};

/// Pixel-mode encoding: RGB rescaled to [-1, 1], three channels.
template <class T>
Latent<T> encode_image(const Image& img);

template <class T>
Image decode_latent(const Latent<T>& lat);

/// Row-major patch grid; token vector layout is channel plane, then row, then
/// column within the patch. unpatchify(patchify(x)) == x exactly.
template <class T>
std::vector<T> patchify(const Latent<T>& lat, int patch);

template <class T>
Latent<T> unpatchify(const std::vector<T>& tokens, int patch, int channels, int h, int w);

// ------------------------------------------------------------ packing

/// One packed sample: text ids followed by image blocks. Input blocks are
/// ordered by the referring word bound to them (IMG1's image first), so
/// swapping two images together with their referring-word bindings yields a
/// bit-identical sequence. Output (noise) blocks follow in RES order.
template <class T>
struct PackedSample {
    struct Block {
        int index_row = 0;   // row of the index-embedding table
        int role = -1;       // input role, -1 for noise blocks
        bool noise = false;
        std::vector<T> patches;  // tokens_per_image x patch_dim
    };
    std::vector<int> text_ids;
    std::vector<Block> blocks;
    T t{};

    int n_text() const { return int(text_ids.size()); }
    int n_noise_blocks() const;
    int n_tokens(const ModelConfig& cfg) const {
        return n_text() + int(blocks.size()) * cfg.tokens_per_image();
    }
};

template <class T>
PackedSample<T> pack(const ModelConfig& cfg, const std::vector<int>& text_ids,
                     const std::vector<Latent<T>>& inputs, const std::vector<Role>& roles,
                     const std::vector<Latent<T>>& noised_outputs, const ReferenceMap& ref,
                     T t);

struct TokenMeta {
    enum Kind { text = 0, input_image = 1, noise_image = 2 };
    Kind kind = text;
    int index_row = -1;   // index-embedding row, -1 for text
    int role = -1;
    int grid_row = -1, grid_col = -1;
};

template <class T>
std::vector<TokenMeta> token_metadata(const ModelConfig& cfg, const PackedSample<T>& ps);

// restores the latent of block `b` exactly from the packed metadata
template <class T>
Latent<T> unpack_block(const ModelConfig& cfg, const PackedSample<T>& ps, int b);

// ------------------------------------------------------------ network

struct ParamInfo {
    std::string name;
    size_t offset = 0;
    size_t size = 0;
    bool decay = false;  // weight decay applies only to matrices
};

template <class T>
struct Acts;  // forward activations, defined in model.cpp

template <class T>
class Net {
  public:
    explicit Net(const ModelConfig& cfg);
    Net(const Net&);
    Net& operator=(const Net&);
    ~Net();

    const ModelConfig& config() const { return cfg_; }
    const std::vector<ParamInfo>& params() const { return infos_; }
    size_t n_params() const { return w_.size(); }
    std::vector<T>& weights() { return w_; }
    const std::vector<T>& weights() const { return w_; }
    T* param(const std::string& name);
    const T* param(const std::string& name) const;
    const ParamInfo& param_info(const std::string& name) const;

    void init_params(uint64_t seed);

    /// Embedding attachment only: token/positional/index/role/timestep tables
    /// applied to the packed sample. X is n_tokens x d_model.
    void embed(const PackedSample<T>& ps, std::vector<T>& X) const;

    /// Full forward pass; returns velocity predictions for noise tokens,
    /// shape (noise tokens) x patch_dim. `acts` keeps what backward needs.
    std::vector<T> forward(const PackedSample<T>& ps, Acts<T>& acts) const;
    std::vector<T> forward(const PackedSample<T>& ps) const;

    /// Accumulates parameter gradients into `grads` (flat, same layout as
    /// weights); dpred is dLoss/dPredictions.
    void backward(const PackedSample<T>& ps, const Acts<T>& acts, const std::vector<T>& dpred,
                  std::vector<T>& grads) const;

  private:
    ModelConfig cfg_;
    std::vector<ParamInfo> infos_;
    std::unordered_map<std::string, size_t> index_;
    std::vector<T> w_;

    void add_param(const std::string& name, size_t size, bool decay);
    void build_layout();
};

template <class T>
Acts<T>* new_acts();
template <class T>
void delete_acts(Acts<T>*);

/// RAII holder so callers can reuse activation storage across calls.
template <class T>
struct ActsBox {
    Acts<T>* a;
    ActsBox() : a(new_acts<T>()) {}
    ~ActsBox() { delete_acts(a); }
    ActsBox(const ActsBox&) = delete;
    Acts<T>& operator*() { return *a; }
};

// sinusoidal time features, length cfg.time_features
template <class T>
std::vector<T> time_features(const ModelConfig& cfg, T t);

// ------------------------------------------------------------ autoencoder

/// Optional linear patch autoencoder: 2x2 pixel patches to ae_channels and
/// back, trained separately with a reconstruction loss.
struct Autoencoder {
    int channels = 8;
    std::vector<float> enc_w, enc_b;  // 12 x c, c
    std::vector<float> dec_w, dec_b;  // c x 12, 12

    explicit Autoencoder(int channels = 8);

    Latent<float> encode(const Image& img) const;
    Image decode(const Latent<float>& lat) const;

    void train(const std::vector<Image>& images, int steps, float lr, uint64_t seed);

    void save(const std::string& path) const;
    static Autoencoder load(const std::string& path);
};

double psnr(const Image& a, const Image& b);

// ------------------------------------------------------------ checkpoints

struct OptState {
    std::vector<float> m, v;
    long step = 0;
};

struct CheckpointData {
    ModelConfig cfg;
    Vocabulary vocab;
    std::optional<Net<float>> net;
    OptState opt;        // empty when the checkpoint carries no optimizer state
    bool has_opt = false;
    long step = 0;
    uint64_t train_seed = 0;
    std::optional<Autoencoder> ae;
};

/// Directory layout: config.json (schema, model config, parameter table,
/// step, hashes), vocab.json, weights.bin (f32 weights, optional Adam moments,
/// FNV-1a integrity hash), optional ae.bin.
void save_checkpoint(const std::string& dir, const Net<float>& net, const Vocabulary& vocab,
                     const OptState* opt, long step, uint64_t train_seed,
                     const Autoencoder* ae = nullptr);

CheckpointData load_checkpoint(const std::string& dir);

}  // namespace ff::model
