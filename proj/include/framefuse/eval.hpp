#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "framefuse/datasets.hpp"
#include "framefuse/model.hpp"

// Editing metrics over a pluggable embedder plus exact oracle pass rates.
// Cosine metrics follow the usual directional/similarity formulas; the pass
// rates come from the toyworld verifier and are the primary fidelity measure
// at this scale.

namespace ff::eval {

struct Embedder {
    virtual ~Embedder() = default;
    virtual std::vector<double> embed_image(const Image& img) const = 0;  // unit norm
    virtual std::vector<double> embed_text(const std::string& text) const = 0;
    virtual const char* name() const { return "embedder"; }
};

/// cosine( E(out_img)-E(src_img), E(out_txt)-E(src_txt) ); 0 when either
/// delta vanishes.
double clip_dir(const Image& src_img, const Image& out_img, const std::string& src_txt,
                const std::string& out_txt, const Embedder& emb);

double clip_sim(const Image& a, const Image& b, const Embedder& emb);
double clip_sim(const Image& a, const std::string& text, const Embedder& emb);

// mean absolute pixel difference on [0,1] images
double l1(const Image& a, const Image& b);

/// Frozen toy embedder: a small multi-label classifier over scene attributes
/// (8 colors, 3 shapes, 9 coarse cells) trained on rendered scenes, paired
/// with a bag-of-attributes text encoder in the same 20-dim space.
class AttributeEmbedder : public Embedder {
  public:
    static AttributeEmbedder train(int resolution, uint64_t seed, int steps = 800);

    std::vector<double> embed_image(const Image& img) const override;
    std::vector<double> embed_text(const std::string& text) const override;
    const char* name() const override { return "toy-attr"; }

    static std::vector<double> text_attributes(const std::string& text);  // raw 0/1 vector

  private:
    int resolution_ = 32;
    int hidden_ = 64;
    std::vector<float> w1_, b1_, w2_, b2_;
};

// ------------------------------------------------------------ evaluation

struct Generator {
    virtual ~Generator() = default;
    virtual std::vector<Image> generate(const datasets::Sample& s, uint64_t seed) const = 0;
};

struct ModelGenerator : Generator {
    const model::Net<float>* net = nullptr;
    const prompting::Vocabulary* vocab = nullptr;
    int steps = 50;
    double guidance = 2.0;
    const model::Autoencoder* ae = nullptr;

    std::vector<Image> generate(const datasets::Sample& s, uint64_t seed) const override;
};

/// Emits the exact ground-truth output for every record; the stub that pins
/// the pass-rate plumbing at 1.0.
struct OracleGenerator : Generator {
    std::vector<Image> generate(const datasets::Sample& s, uint64_t seed) const override;
};

struct EvalOptions {
    int steps = 50;
    double guidance = 2.0;
    uint64_t seed = 0;
    double tolerance = 0.05;  // per-region agreement threshold is 1 - tolerance
};

struct MetricReport {
    std::string family;
    long count = 0;
    bool oracle_metrics = true;  // false for families without an exact oracle (t2i)

    double clip_dir = 0, clip_im = 0, clip_out = 0, clip_t = 0, l1 = 0, dino = 0;
    long clip_dir_n = 0, clip_im_n = 0;

    long passed = 0, edited_passed = 0, preserved_passed = 0;
    double pass_rate = 0, edited_rate = 0, preserved_rate = 0;
    double mean_edited_score = 0, mean_preserved_score = 0;

    std::string embedder_name, second_name;

    nlohmann::json to_json() const;
    std::string table() const;
};

/// Runs the generator on every record (deterministic per-record seeds),
/// scores region agreement against the oracle, and aggregates the embedding
/// metrics. `second` fills the DINO-style column.
MetricReport evaluate(const Generator& gen, const datasets::DatasetManifest& m,
                      const EvalOptions& opt, const Embedder* emb = nullptr,
                      const Embedder* second = nullptr);

// per-record region agreement against the oracle reference
struct RegionScores {
    double edited = 1.0, preserved = 1.0;
};
RegionScores score_candidate(const datasets::Sample& s, const Image& candidate);

}  // namespace ff::eval
