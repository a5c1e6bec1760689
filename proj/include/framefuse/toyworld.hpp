#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "framefuse/common.hpp"
#include "framefuse/image.hpp"

// Procedural scenes with exact rasterization. Pixel footprints (integer pixel
// coordinates, half-extent s, center (cx, cy)):
//   square:   cx-s <= x < cx+s  and  cy-s <= y < cy+s
//   circle:   (x+0.5-cx)^2 + (y+0.5-cy)^2 <= s^2
//   triangle: rows k = y-(cy-s) in [0, 2s), half-width k/2+1,
//             cx-hw <= x < cx+hw  (apex up)
// No anti-aliasing anywhere; every downstream oracle relies on these being
// exact.

namespace ff::toyworld {

inline constexpr int kMaxObjects = 4;

enum class Shape { square = 0, circle = 1, triangle = 2 };

const char* shape_name(Shape s);
Shape shape_from_name(const std::string& name);

enum class EditKind {
    add = 0,
    remove = 1,
    recolor = 2,
    move = 3,
    resize = 4,
    replace_background = 5,
    insert_reference = 6,
};

const char* edit_kind_name(EditKind k);
EditKind edit_kind_from_name(const std::string& name);

struct SceneObject {
    Shape shape = Shape::square;
    int color = 0;   // palette id
    int cx = 0, cy = 0;
    int size = 2;    // half-extent in pixels
    int z = 0;

    bool covers(int x, int y) const;
    bool operator==(const SceneObject&) const = default;
};

struct Scene {
    int width = 0, height = 0;
    int background = 0;  // palette id
    std::vector<SceneObject> objects;  // ascending z, unique z

    void validate() const;  // throws on any broken invariant
    bool operator==(const Scene&) const = default;
};

struct EditOp {
    EditKind kind = EditKind::recolor;
    int target = -1;        // remove/recolor/move/resize only
    int new_color = -1;     // recolor, replace_background
    int dx = 0, dy = 0;     // move
    double scale = 1.0;     // resize, in [0.5, 2.0]
    SceneObject object{};   // add, insert_reference
};

struct GeneratorConfig {
    int resolution = 32;
    int palette_size = 8;
    int min_objects = 1;
    int max_objects = 4;
    int min_size = 3;
    int max_size = 6;
    bool allow_overlap = false;
    bool distinct_attributes = true;  // reject duplicate (color, shape) pairs

    void validate() const;
    static GeneratorConfig for_resolution(int res);
};

Scene sample_scene(uint64_t seed, const GeneratorConfig& config);

/// Back-to-front exact rasterization; requires scene dimensions to equal
/// `resolution` (one of 16/32/64).
Image render(const Scene& scene, int resolution);

Scene apply_edit(const Scene& scene, const EditOp& op);

// whole-scene translation, used for the camera/background jitter in datasets
Scene translate_all(const Scene& scene, int dx, int dy);

// ------------------------------------------------------------ captions

// 3x3 coarse position grid, cells row-major: cell = row*3+col
int coarse_cell(int cx, int cy, int width, int height);
std::pair<int, int> cell_center(int cell, int resolution);  // (x, y)
const char* cell_phrase(int cell);                          // "upper left", "center", ...
int cell_from_phrase(const std::string& phrase);            // -1 if unknown

std::string caption(const Scene& scene);

struct Attribute {
    Shape shape;
    int color;
    int cell;
    auto operator<=>(const Attribute&) const = default;
};

// attribute multiset recovered from a caption (sorted); throws ParseError on
// text outside the caption grammar
std::vector<Attribute> parse_caption(const std::string& text);
// the same multiset taken directly from a Scene (sorted) — the round-trip oracle
std::vector<Attribute> scene_attributes(const Scene& scene);

std::string instruction(const EditOp& op, const Scene& scene);

// ------------------------------------------------------------ control maps

struct ControlMaps {
    std::vector<std::vector<uint8_t>> masks;  // per object, occlusion-aware, 0/1
    std::vector<float> depth;                 // z-rank / object count, background 0
    std::vector<uint8_t> edge;                // boundary pixels of visible regions
};

ControlMaps control_maps(const Scene& scene, int resolution);

Image mask_to_image(const std::vector<uint8_t>& mask, int resolution);
Image grid_to_image(const std::vector<float>& grid, int resolution);

// ------------------------------------------------------------ verification

struct VerifierReport {
    double edited_score = 0.0;
    double preserved_score = 0.0;
    bool pass = false;
    long edited_pixels = 0;
    long preserved_pixels = 0;
};

/// Pixel mask (1 = edited) of everything an edit sequence may legitimately
/// change, accumulated over the intermediate scenes.
std::vector<uint8_t> edited_mask(const Scene& before, const std::vector<EditOp>& ops,
                                 int resolution);

/// Region agreement against render(after). Pixels agree when they snap to the
/// same palette color; each region must reach 1 - tolerance for a pass.
VerifierReport verify_sequence(const Scene& before, const std::vector<EditOp>& ops,
                               const Scene& after, const Image& candidate, double tolerance);

VerifierReport verify(const Scene& before, const EditOp& op, const Image& candidate,
                      double tolerance);

// ------------------------------------------------------------ serialization

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json edit_to_json(const EditOp& op);
EditOp edit_from_json(const nlohmann::json& j);

}  // namespace ff::toyworld
