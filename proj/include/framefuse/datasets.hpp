#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "framefuse/image.hpp"
#include "framefuse/prompting.hpp"
#include "framefuse/toyworld.hpp"

// Dataset families derived from toyworld frame pairs, mirroring video-derived
// supervision: instructive editing from before/after frames, customization
// from segmented objects, insertion, referring segmentation, and control maps.

namespace ff::datasets {

using prompting::Role;
using toyworld::EditOp;
using toyworld::Scene;

enum class Family {
    frame2frame = 0,
    multi_object = 1,
    object_insertion = 2,
    object_add = 3,
    seg = 4,
    control = 5,
    t2i = 6,
};

const char* family_name(Family f);
Family family_from_name(const std::string& name);

struct OracleData {
    enum Kind { edit = 0, compose = 1, seg = 2, control = 3, t2i = 4 };
    Kind kind = edit;
    Scene before;               // edit, compose
    std::vector<EditOp> ops;    // edit
    Scene after;                // edit, compose
    int jitter_dx = 0, jitter_dy = 0;  // global motion applied after the edits
    Scene scene;                // seg, control, t2i
    int target = -1;            // seg
    std::string map_kind;       // control: "depth" | "edge"
    std::string flavor;         // control: "generation" | "perception"

    bool operator==(const OracleData&) const = default;
};

struct Sample {
    std::vector<std::pair<Image, Role>> inputs;
    std::vector<Image> outputs;
    std::string base_prompt;
    std::vector<std::string> context_tags;  // sorted
    OracleData oracle;

    void validate() const;
    bool operator==(const Sample&) const = default;
};

struct BuildConfig {
    toyworld::GeneratorConfig gen;
    int min_edits = 1, max_edits = 3;  // frame2frame; paper leaves the count open
    double p_jitter = 0.5;             // probability of global background/camera jitter
    double tau = 1e-4;                 // static/dynamic threshold on out-of-mask pixel MSE
    std::vector<toyworld::EditKind> edit_kinds = {
        toyworld::EditKind::add,    toyworld::EditKind::remove,
        toyworld::EditKind::recolor, toyworld::EditKind::move,
        toyworld::EditKind::resize,  toyworld::EditKind::replace_background,
    };

    nlohmann::json to_json() const;
    static BuildConfig from_json(const nlohmann::json& j);
};

struct DatasetManifest {
    std::string name;
    Family family = Family::frame2frame;
    std::vector<Sample> records;
    BuildConfig build;
    uint64_t seed = 0;

    bool operator==(const DatasetManifest&) const = default;
};

DatasetManifest build_frame2frame(int n, uint64_t seed, const BuildConfig& cfg);
DatasetManifest build_multi_object(int n, uint64_t seed, const BuildConfig& cfg);
DatasetManifest build_object_insertion(int n, uint64_t seed, const BuildConfig& cfg);
DatasetManifest build_object_add(int n, uint64_t seed, const BuildConfig& cfg);
DatasetManifest build_seg(int n, uint64_t seed, const BuildConfig& cfg);
DatasetManifest build_control(int n, uint64_t seed, const BuildConfig& cfg);
DatasetManifest build_t2i(int n, uint64_t seed, const BuildConfig& cfg);

DatasetManifest build(Family f, int n, uint64_t seed, const BuildConfig& cfg);

/// Directory layout: manifest.jsonl, images/{record:06d}_{slot}.png,
/// schema.json, config.json. save/load round-trips bit-exactly.
void save(const DatasetManifest& m, const std::string& dir);
DatasetManifest load(const std::string& dir);

/// Exact ground-truth check of one generated record: stored images equal the
/// recomputed renders and the verifier passes at tolerance 0.
bool verify_self(const Sample& s, double* edited_score = nullptr,
                 double* preserved_score = nullptr);

/// Recomputes the static/dynamic tag from the stored pixels (frame2frame).
std::string recompute_motion_tag(const Sample& s, double tau);

/// Object re-rendered at canonical size (resolution/4 half-extent) centered on
/// a neutral gray canvas; the standard asset view.
Image asset_crop(const toyworld::SceneObject& obj, int resolution);

// reference image for scoring a model output against a record's oracle
Image oracle_reference(const Sample& s);
// edited-region mask for the record (empty = judge the whole image)
std::vector<uint8_t> oracle_edited_mask(const Sample& s);

}  // namespace ff::datasets
