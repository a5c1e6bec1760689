#include "framefuse/datasets.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace ff::datasets {

namespace fs = std::filesystem;
using nlohmann::json;
using toyworld::EditKind;
using toyworld::GeneratorConfig;
using toyworld::SceneObject;
using toyworld::Shape;

namespace {

const char* kFamilyNames[] = {"frame2frame", "multi_object", "object_insertion",
                              "object_add",  "seg",          "control",
                              "t2i"};

}  // namespace

const char* family_name(Family f) { return kFamilyNames[int(f)]; }

Family family_from_name(const std::string& name) {
    for (int i = 0; i < 7; i++)
        if (name == kFamilyNames[i]) return Family(i);
    throw ConfigError("unknown dataset family: " + name);
}

void Sample::validate() const {
    if (inputs.size() > size_t(prompting::kMaxInputs))
        throw CapacityError("sample has too many inputs");
    if (outputs.empty() || outputs.size() > size_t(prompting::kMaxOutputs))
        throw CapacityError("sample output count out of range");
    // throws on dangling or duplicated referring words
    prompting::resolve(base_prompt, int(inputs.size()), int(outputs.size()));
    bool has_static = false, has_dynamic = false;
    for (const std::string& t : context_tags) {
        if (!prompting::is_context_tag(t)) throw VocabularyError("unknown context tag: " + t);
        has_static |= t == "static_scenario";
        has_dynamic |= t == "dynamic_scenario";
    }
    if (has_static && has_dynamic)
        throw VocabularyError("static_scenario and dynamic_scenario are mutually exclusive");
    if (!std::is_sorted(context_tags.begin(), context_tags.end()))
        throw VocabularyError("context tags must be sorted");
}

json BuildConfig::to_json() const {
    json kinds = json::array();
    for (EditKind k : edit_kinds) kinds.push_back(toyworld::edit_kind_name(k));
    return {{"resolution", gen.resolution},
            {"palette_size", gen.palette_size},
            {"min_objects", gen.min_objects},
            {"max_objects", gen.max_objects},
            {"min_size", gen.min_size},
            {"max_size", gen.max_size},
            {"allow_overlap", gen.allow_overlap},
            {"distinct_attributes", gen.distinct_attributes},
            {"min_edits", min_edits},
            {"max_edits", max_edits},
            {"p_jitter", p_jitter},
            {"tau", tau},
            {"edit_kinds", kinds}};
}

BuildConfig BuildConfig::from_json(const json& j) {
    BuildConfig c;
    c.gen.resolution = j.value("resolution", c.gen.resolution);
    c.gen.palette_size = j.value("palette_size", c.gen.palette_size);
    c.gen.min_objects = j.value("min_objects", c.gen.min_objects);
    c.gen.max_objects = j.value("max_objects", c.gen.max_objects);
    c.gen.min_size = j.value("min_size", c.gen.min_size);
    c.gen.max_size = j.value("max_size", c.gen.max_size);
    c.gen.allow_overlap = j.value("allow_overlap", c.gen.allow_overlap);
    c.gen.distinct_attributes = j.value("distinct_attributes", c.gen.distinct_attributes);
    c.min_edits = j.value("min_edits", c.min_edits);
    c.max_edits = j.value("max_edits", c.max_edits);
    c.p_jitter = j.value("p_jitter", c.p_jitter);
    c.tau = j.value("tau", c.tau);
    if (j.contains("edit_kinds")) {
        c.edit_kinds.clear();
        for (const json& k : j.at("edit_kinds"))
            c.edit_kinds.push_back(toyworld::edit_kind_from_name(k.get<std::string>()));
    }
    return c;
}

// ------------------------------------------------------------ edit sampling

namespace {

int default_add_size(int res) { return std::max(2, res / 8); }

bool pair_exists(const Scene& s, int color, Shape shape) {
    for (const SceneObject& o : s.objects)
        if (o.color == color && o.shape == shape) return true;
    return false;
}

// indices whose (color, shape) pair is unique, so instructions stay unambiguous
std::vector<int> unique_pair_targets(const Scene& s) {
    std::vector<int> out;
    for (size_t i = 0; i < s.objects.size(); i++) {
        bool unique = true;
        for (size_t j = 0; j < s.objects.size(); j++)
            if (i != j && s.objects[j].color == s.objects[i].color &&
                s.objects[j].shape == s.objects[i].shape)
                unique = false;
        if (unique) out.push_back(int(i));
    }
    return out;
}

bool fits_inside(const SceneObject& o, int res, int margin = 2) {
    return o.cx - o.size >= margin && o.cx + o.size <= res - margin && o.cy - o.size >= margin &&
           o.cy + o.size <= res - margin;
}

bool overlaps_any(const SceneObject& o, const Scene& s, int skip = -1) {
    for (size_t i = 0; i < s.objects.size(); i++) {
        if (int(i) == skip) continue;
        const SceneObject& e = s.objects[i];
        bool apart = o.cx + o.size + 1 <= e.cx - e.size - 1 ||
                     e.cx + e.size + 1 <= o.cx - o.size - 1 ||
                     o.cy + o.size + 1 <= e.cy - e.size - 1 ||
                     e.cy + e.size + 1 <= o.cy - o.size - 1;
        if (!apart) return true;
    }
    return false;
}

// free 3x3 cells (shuffled) where an object of half-extent `size` fits
std::vector<int> free_cells(Rng& rng, const Scene& s, int size, int skip = -1) {
    std::vector<int> cells(9);
    std::iota(cells.begin(), cells.end(), 0);
    for (int i = 8; i > 0; i--) std::swap(cells[size_t(i)], cells[rng.below(uint64_t(i + 1))]);
    std::vector<int> out;
    for (int c : cells) {
        auto [x, y] = toyworld::cell_center(c, s.width);
        SceneObject probe{Shape::square, 0, x, y, size, 0};
        if (fits_inside(probe, s.width) && !overlaps_any(probe, s, skip)) out.push_back(c);
    }
    return out;
}

// sample one applicable edit for `cur`; false when nothing fits
bool sample_edit(Rng& rng, const Scene& cur, const BuildConfig& cfg, EditOp& out) {
    const int res = cur.width;
    for (int attempt = 0; attempt < 40; attempt++) {
        EditKind kind = cfg.edit_kinds[rng.below(cfg.edit_kinds.size())];
        std::vector<int> targets = unique_pair_targets(cur);
        switch (kind) {
            case EditKind::add: {
                if (int(cur.objects.size()) >= toyworld::kMaxObjects) break;
                int color = int(rng.below(uint64_t(cfg.gen.palette_size)));
                Shape shape = Shape(rng.below(3));
                if (color == cur.background || pair_exists(cur, color, shape)) break;
                int size = default_add_size(res);
                std::vector<int> cells = free_cells(rng, cur, size);
                if (cells.empty()) break;
                auto [x, y] = toyworld::cell_center(cells[0], res);
                int z = cur.objects.empty() ? 0 : cur.objects.back().z + 1;
                out = EditOp{EditKind::add, -1, -1, 0, 0, 1.0, {shape, color, x, y, size, z}};
                return true;
            }
            case EditKind::remove: {
                if (targets.empty()) break;
                out = EditOp{EditKind::remove, targets[rng.below(targets.size())]};
                return true;
            }
            case EditKind::recolor: {
                if (targets.empty()) break;
                int t = targets[rng.below(targets.size())];
                int color = int(rng.below(uint64_t(cfg.gen.palette_size)));
                const SceneObject& o = cur.objects[size_t(t)];
                if (color == cur.background || color == o.color ||
                    pair_exists(cur, color, o.shape))
                    break;
                out = EditOp{EditKind::recolor, t, color};
                return true;
            }
            case EditKind::move: {
                if (targets.empty()) break;
                int t = targets[rng.below(targets.size())];
                const SceneObject& o = cur.objects[size_t(t)];
                std::vector<int> cells = free_cells(rng, cur, o.size, t);
                int from = toyworld::coarse_cell(o.cx, o.cy, res, res);
                std::erase(cells, from);
                if (cells.empty()) break;
                auto [x, y] = toyworld::cell_center(cells[0], res);
                out = EditOp{EditKind::move, t, -1, x - o.cx, y - o.cy};
                return true;
            }
            case EditKind::resize: {
                if (targets.empty()) break;
                int t = targets[rng.below(targets.size())];
                const SceneObject& o = cur.objects[size_t(t)];
                double scale = rng.coin(0.5) ? 2.0 : 0.5;
                SceneObject probe = o;
                probe.size = int(std::lround(o.size * scale));
                if (probe.size < 2 || !fits_inside(probe, res) || overlaps_any(probe, cur, t))
                    break;
                out = EditOp{EditKind::resize, t, -1, 0, 0, scale};
                return true;
            }
            case EditKind::replace_background: {
                int color = int(rng.below(uint64_t(cfg.gen.palette_size)));
                if (color == cur.background) break;
                bool clash = false;
                for (const SceneObject& o : cur.objects) clash |= o.color == color;
                if (clash) break;
                out = EditOp{EditKind::replace_background, -1, color};
                return true;
            }
            case EditKind::insert_reference:
                break;  // only the insertion builder emits this kind
        }
    }
    return false;
}

std::pair<int, int> draw_jitter(Rng& rng) {
    while (true) {
        int dx = int(rng.range(-2, 2)), dy = int(rng.range(-2, 2));
        if (dx != 0 || dy != 0) return {dx, dy};
    }
}

}  // namespace

// ------------------------------------------------------------ builders

namespace {

Sample make_frame2frame_record(uint64_t seed, const BuildConfig& cfg) {
    Rng rng(seed);
    const int res = cfg.gen.resolution;
    for (int scene_try = 0; scene_try < 50; scene_try++) {
        Scene before = toyworld::sample_scene(rng.next_u64(), cfg.gen);
        int want = int(rng.range(cfg.min_edits, cfg.max_edits));
        Scene cur = before;
        std::vector<EditOp> ops;
        std::vector<std::string> parts;
        for (int e = 0; e < want; e++) {
            EditOp op;
            if (!sample_edit(rng, cur, cfg, op)) break;
            parts.push_back(toyworld::instruction(op, cur));
            cur = toyworld::apply_edit(cur, op);
            ops.push_back(op);
        }
        if (ops.empty()) continue;
        int jdx = 0, jdy = 0;
        if (rng.coin(cfg.p_jitter)) std::tie(jdx, jdy) = draw_jitter(rng);
        Scene after = toyworld::translate_all(cur, jdx, jdy);

        Sample s;
        s.oracle.kind = OracleData::edit;
        s.oracle.before = before;
        s.oracle.ops = ops;
        s.oracle.after = after;
        s.oracle.jitter_dx = jdx;
        s.oracle.jitter_dy = jdy;
        Image before_img = toyworld::render(before, res);
        Image after_img = toyworld::render(after, res);
        std::string instr;
        for (size_t i = 0; i < parts.size(); i++) {
            if (i) instr += " and ";
            instr += parts[i];
        }
        s.base_prompt = instr + " in IMG1 to make RES1";
        std::vector<uint8_t> emask = toyworld::edited_mask(before, ops, res);
        double mse = image_mse_outside(before_img, after_img, emask);
        std::string motion = mse > cfg.tau ? "dynamic_scenario" : "static_scenario";
        s.context_tags = {motion, "synthetic_style"};
        std::sort(s.context_tags.begin(), s.context_tags.end());
        s.inputs.emplace_back(std::move(before_img), Role::canvas);
        s.outputs.push_back(std::move(after_img));
        s.validate();
        return s;
    }
    throw Error("frame2frame: could not build a record");
}

Sample make_multi_object_record(uint64_t seed, const BuildConfig& cfg) {
    Rng rng(seed);
    const int res = cfg.gen.resolution;
    GeneratorConfig gen = cfg.gen;
    gen.min_objects = std::max(2, gen.min_objects);  // <2 objects is rejected
    gen.max_objects = std::max(gen.max_objects, gen.min_objects);
    Scene a = toyworld::sample_scene(rng.next_u64(), gen);
    // pose changes: nudge objects, keeping the layout valid
    Scene b = a;
    for (size_t i = 0; i < b.objects.size(); i++) {
        if (!rng.coin(0.5)) continue;
        for (int attempt = 0; attempt < 20; attempt++) {
            SceneObject probe = b.objects[i];
            probe.cx += int(rng.range(-3, 3));
            probe.cy += int(rng.range(-3, 3));
            if (fits_inside(probe, res) && !overlaps_any(probe, b, int(i))) {
                b.objects[i] = probe;
                break;
            }
        }
    }
    int jdx = 0, jdy = 0;
    if (rng.coin(cfg.p_jitter)) std::tie(jdx, jdy) = draw_jitter(rng);
    b = toyworld::translate_all(b, jdx, jdy);

    Sample s;
    s.oracle.kind = OracleData::compose;
    s.oracle.before = a;
    s.oracle.after = b;
    s.oracle.jitter_dx = jdx;
    s.oracle.jitter_dy = jdy;
    std::string prompt = "a scene with";
    for (size_t i = 0; i < a.objects.size(); i++) {
        s.inputs.emplace_back(asset_crop(a.objects[i], res), Role::asset);
        int cell = toyworld::coarse_cell(b.objects[i].cx, b.objects[i].cy, res, res);
        if (i) prompt += " and";
        prompt += " the object from IMG" + std::to_string(i + 1) + " in the " +
                  toyworld::cell_phrase(cell);
    }
    std::string bgcolor = color_name(b.background);
    prompt += std::string(" on a ") + bgcolor + " background";
    s.base_prompt = prompt;
    s.outputs.push_back(toyworld::render(b, res));
    s.context_tags = {"synthetic_style", "with_reference_object"};
    s.validate();
    return s;
}

// shared by object_insertion (with asset image) and object_add (prompt only)
Sample make_insertion_record(uint64_t seed, const BuildConfig& cfg, bool with_asset) {
    Rng rng(seed);
    const int res = cfg.gen.resolution;
    GeneratorConfig gen = cfg.gen;
    gen.max_objects = std::min(gen.max_objects, toyworld::kMaxObjects - 1);
    gen.min_objects = std::min(gen.min_objects, gen.max_objects);
    const int size = default_add_size(res);
    for (int scene_try = 0; scene_try < 50; scene_try++) {
        Scene base = toyworld::sample_scene(rng.next_u64(), gen);
        std::vector<int> cells = free_cells(rng, base, size);
        if (cells.empty()) continue;
        int color = int(rng.below(uint64_t(cfg.gen.palette_size)));
        Shape shape = Shape(rng.below(3));
        if (color == base.background || pair_exists(base, color, shape)) continue;
        auto [x, y] = toyworld::cell_center(cells[0], res);
        int z = base.objects.empty() ? 0 : base.objects.back().z + 1;
        SceneObject obj{shape, color, x, y, size, z};
        EditOp op{with_asset ? EditKind::insert_reference : EditKind::add, -1, -1, 0, 0, 1.0, obj};
        Scene with = toyworld::apply_edit(base, op);

        Sample s;
        s.oracle.kind = OracleData::edit;
        s.oracle.before = base;
        s.oracle.ops = {op};
        s.oracle.after = with;
        s.inputs.emplace_back(toyworld::render(base, res), Role::canvas);
        if (with_asset) {
            s.inputs.emplace_back(asset_crop(obj, res), Role::asset);
            s.base_prompt = std::string("add the object from IMG2 to the ") +
                            toyworld::cell_phrase(cells[0]) + " of IMG1";
            s.context_tags = {"static_scenario", "synthetic_style", "with_reference_object"};
        } else {
            s.base_prompt = toyworld::instruction(op, base) + " in IMG1 to make RES1";
            s.context_tags = {"static_scenario", "synthetic_style"};
        }
        std::sort(s.context_tags.begin(), s.context_tags.end());
        s.outputs.push_back(toyworld::render(with, res));
        s.validate();
        return s;
    }
    throw Error("insertion: could not build a record");
}

Sample make_seg_record(uint64_t seed, const BuildConfig& cfg) {
    Rng rng(seed);
    const int res = cfg.gen.resolution;
    GeneratorConfig gen = cfg.gen;
    gen.min_objects = std::max(1, gen.min_objects);
    for (int scene_try = 0; scene_try < 50; scene_try++) {
        Scene scene = toyworld::sample_scene(rng.next_u64(), gen);
        std::vector<int> targets = unique_pair_targets(scene);
        if (targets.empty()) continue;  // ambiguous referring expressions are rejected
        int t = targets[rng.below(targets.size())];
        toyworld::ControlMaps maps = toyworld::control_maps(scene, res);

        Sample s;
        s.oracle.kind = OracleData::seg;
        s.oracle.scene = scene;
        s.oracle.target = t;
        const SceneObject& o = scene.objects[size_t(t)];
        s.base_prompt = std::string("segment the ") + color_name(o.color) + " " +
                        toyworld::shape_name(o.shape);
        s.inputs.emplace_back(toyworld::render(scene, res), Role::canvas);
        s.outputs.push_back(toyworld::mask_to_image(maps.masks[size_t(t)], res));
        s.context_tags = {"perception_task", "synthetic_style"};
        s.validate();
        return s;
    }
    throw Error("seg: could not build a record");
}

Sample make_control_record(uint64_t seed, const BuildConfig& cfg) {
    Rng rng(seed);
    const int res = cfg.gen.resolution;
    Scene scene = toyworld::sample_scene(rng.next_u64(), cfg.gen);
    bool generation = rng.coin(0.5);
    bool depth = rng.coin(0.5);
    toyworld::ControlMaps maps = toyworld::control_maps(scene, res);
    Image map_img = depth ? toyworld::grid_to_image(maps.depth, res)
                          : toyworld::mask_to_image(maps.edge, res);

    Sample s;
    s.oracle.kind = OracleData::control;
    s.oracle.scene = scene;
    s.oracle.map_kind = depth ? "depth" : "edge";
    s.oracle.flavor = generation ? "generation" : "perception";
    if (generation) {
        s.inputs.emplace_back(std::move(map_img), Role::control);
        s.outputs.push_back(toyworld::render(scene, res));
        s.base_prompt = toyworld::caption(scene);
        s.context_tags = {"synthetic_style"};
    } else {
        s.inputs.emplace_back(toyworld::render(scene, res), Role::canvas);
        s.outputs.push_back(std::move(map_img));
        s.base_prompt = std::string("predict the ") + (depth ? "depth" : "edge") + " map";
        s.context_tags = {"perception_task", "synthetic_style"};
    }
    s.validate();
    return s;
}

Sample make_t2i_record(uint64_t seed, const BuildConfig& cfg) {
    Rng rng(seed);
    Scene scene = toyworld::sample_scene(rng.next_u64(), cfg.gen);
    Sample s;
    s.oracle.kind = OracleData::t2i;
    s.oracle.scene = scene;
    s.base_prompt = toyworld::caption(scene);
    s.outputs.push_back(toyworld::render(scene, cfg.gen.resolution));
    s.context_tags = {"synthetic_style"};
    s.validate();
    return s;
}

Sample make_record(Family f, uint64_t seed, const BuildConfig& cfg) {
    switch (f) {
        case Family::frame2frame: return make_frame2frame_record(seed, cfg);
        case Family::multi_object: return make_multi_object_record(seed, cfg);
        case Family::object_insertion: return make_insertion_record(seed, cfg, true);
        case Family::object_add: return make_insertion_record(seed, cfg, false);
        case Family::seg: return make_seg_record(seed, cfg);
        case Family::control: return make_control_record(seed, cfg);
        case Family::t2i: return make_t2i_record(seed, cfg);
    }
    throw Error("unreachable family");
}

}  // namespace

DatasetManifest build(Family f, int n, uint64_t seed, const BuildConfig& cfg) {
    if (n < 1) throw ConfigError("record count must be >= 1");
    cfg.gen.validate();
    DatasetManifest m;
    m.name = family_name(f);
    m.family = f;
    m.build = cfg;
    m.seed = seed;
    m.records.resize(size_t(n));
    std::string error;
    // per-record seeds make parallel generation deterministic
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; i++) {
        try {
            m.records[size_t(i)] = make_record(f, derive_seed(seed, uint64_t(i)), cfg);
        } catch (const std::exception& e) {
#pragma omp critical
            error = e.what();
        }
    }
    if (!error.empty()) throw Error("dataset build failed: " + error);
    return m;
}

DatasetManifest build_frame2frame(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::frame2frame, n, seed, cfg);
}
DatasetManifest build_multi_object(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::multi_object, n, seed, cfg);
}
DatasetManifest build_object_insertion(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::object_insertion, n, seed, cfg);
}
DatasetManifest build_object_add(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::object_add, n, seed, cfg);
}
DatasetManifest build_seg(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::seg, n, seed, cfg);
}
DatasetManifest build_control(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::control, n, seed, cfg);
}
DatasetManifest build_t2i(int n, uint64_t seed, const BuildConfig& cfg) {
    return build(Family::t2i, n, seed, cfg);
}

// ------------------------------------------------------------ asset crops

Image asset_crop(const SceneObject& obj, int resolution) {
    Image img(resolution, resolution);
    std::fill(img.px.begin(), img.px.end(), kAssetGray);
    SceneObject canon = obj;
    canon.cx = canon.cy = resolution / 2;
    canon.size = resolution / 4;
    const PaletteEntry& c = kPalette[size_t(canon.color)];
    for (int y = 0; y < resolution; y++)
        for (int x = 0; x < resolution; x++)
            if (canon.covers(x, y)) img.set(x, y, c.r, c.g, c.b);
    return img;
}

// ------------------------------------------------------------ oracles

Image oracle_reference(const Sample& s) {
    const OracleData& o = s.oracle;
    switch (o.kind) {
        case OracleData::edit:
        case OracleData::compose:
            return toyworld::render(o.after, o.after.width);
        case OracleData::seg: {
            toyworld::ControlMaps maps = toyworld::control_maps(o.scene, o.scene.width);
            return toyworld::mask_to_image(maps.masks.at(size_t(o.target)), o.scene.width);
        }
        case OracleData::control: {
            if (o.flavor == "generation") return toyworld::render(o.scene, o.scene.width);
            toyworld::ControlMaps maps = toyworld::control_maps(o.scene, o.scene.width);
            return o.map_kind == "depth" ? toyworld::grid_to_image(maps.depth, o.scene.width)
                                         : toyworld::mask_to_image(maps.edge, o.scene.width);
        }
        case OracleData::t2i:
            return toyworld::render(o.scene, o.scene.width);
    }
    throw Error("unreachable oracle kind");
}

std::vector<uint8_t> oracle_edited_mask(const Sample& s) {
    const OracleData& o = s.oracle;
    if (o.kind == OracleData::edit)
        return toyworld::edited_mask(o.before, o.ops, o.before.width);
    if (o.kind == OracleData::seg) {
        toyworld::ControlMaps maps = toyworld::control_maps(o.scene, o.scene.width);
        return maps.masks.at(size_t(o.target));
    }
    return {};  // whole-image families: compose, control, t2i
}

bool verify_self(const Sample& s, double* edited_score, double* preserved_score) {
    const OracleData& o = s.oracle;
    if (edited_score) *edited_score = 0.0;
    if (preserved_score) *preserved_score = 0.0;
    try {
        switch (o.kind) {
            case OracleData::edit: {
                Scene core = o.before;
                for (const EditOp& op : o.ops) core = toyworld::apply_edit(core, op);
                if (!(toyworld::translate_all(core, o.jitter_dx, o.jitter_dy) == o.after))
                    return false;
                if (s.inputs.empty() ||
                    !(s.inputs[0].first == toyworld::render(o.before, o.before.width)))
                    return false;
                if (s.inputs.size() > 1) {
                    if (o.ops.size() != 1 || o.ops[0].kind != EditKind::insert_reference)
                        return false;
                    if (!(s.inputs[1].first == asset_crop(o.ops[0].object, o.before.width)))
                        return false;
                }
                toyworld::VerifierReport rep =
                    toyworld::verify_sequence(o.before, o.ops, o.after, s.outputs.at(0), 0.0);
                if (edited_score) *edited_score = rep.edited_score;
                if (preserved_score) *preserved_score = rep.preserved_score;
                return rep.pass &&
                       s.outputs[0] == toyworld::render(o.after, o.after.width);
            }
            case OracleData::compose: {
                if (s.inputs.size() != o.before.objects.size()) return false;
                for (size_t i = 0; i < s.inputs.size(); i++)
                    if (!(s.inputs[i].first == asset_crop(o.before.objects[i], o.before.width)))
                        return false;
                bool ok = s.outputs.at(0) == toyworld::render(o.after, o.after.width);
                if (edited_score) *edited_score = ok ? 1.0 : 0.0;
                if (preserved_score) *preserved_score = ok ? 1.0 : 0.0;
                return ok;
            }
            case OracleData::seg:
            case OracleData::control:
            case OracleData::t2i: {
                Image want_out = oracle_reference(s);
                bool ok = s.outputs.at(0) == want_out;
                if (o.kind == OracleData::seg || o.flavor == "perception") {
                    ok = ok && !s.inputs.empty() &&
                         s.inputs[0].first == toyworld::render(o.scene, o.scene.width);
                }
                if (o.kind == OracleData::control && o.flavor == "generation") {
                    toyworld::ControlMaps maps = toyworld::control_maps(o.scene, o.scene.width);
                    Image want_in = o.map_kind == "depth"
                                        ? toyworld::grid_to_image(maps.depth, o.scene.width)
                                        : toyworld::mask_to_image(maps.edge, o.scene.width);
                    ok = ok && !s.inputs.empty() && s.inputs[0].first == want_in;
                }
                if (edited_score) *edited_score = ok ? 1.0 : 0.0;
                if (preserved_score) *preserved_score = ok ? 1.0 : 0.0;
                return ok;
            }
        }
    } catch (const Error&) {
        return false;
    }
    return false;
}

std::string recompute_motion_tag(const Sample& s, double tau) {
    if (s.oracle.kind != OracleData::edit || s.inputs.empty()) return "";
    const OracleData& o = s.oracle;
    std::vector<uint8_t> emask = toyworld::edited_mask(o.before, o.ops, o.before.width);
    double mse = image_mse_outside(s.inputs[0].first, s.outputs.at(0), emask);
    return mse > tau ? "dynamic_scenario" : "static_scenario";
}

// ------------------------------------------------------------ persistence

namespace {

json oracle_to_json(const OracleData& o) {
    switch (o.kind) {
        case OracleData::edit: {
            json ops = json::array();
            for (const EditOp& op : o.ops) ops.push_back(toyworld::edit_to_json(op));
            return {{"kind", "edit"},
                    {"before", toyworld::scene_to_json(o.before)},
                    {"ops", ops},
                    {"after", toyworld::scene_to_json(o.after)},
                    {"jitter", {o.jitter_dx, o.jitter_dy}}};
        }
        case OracleData::compose:
            return {{"kind", "compose"},
                    {"before", toyworld::scene_to_json(o.before)},
                    {"after", toyworld::scene_to_json(o.after)},
                    {"jitter", {o.jitter_dx, o.jitter_dy}}};
        case OracleData::seg:
            return {{"kind", "seg"},
                    {"scene", toyworld::scene_to_json(o.scene)},
                    {"target", o.target}};
        case OracleData::control:
            return {{"kind", "control"},
                    {"scene", toyworld::scene_to_json(o.scene)},
                    {"map", o.map_kind},
                    {"flavor", o.flavor}};
        case OracleData::t2i:
            return {{"kind", "t2i"}, {"scene", toyworld::scene_to_json(o.scene)}};
    }
    throw Error("unreachable oracle kind");
}

OracleData oracle_from_json(const json& j) {
    OracleData o;
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "edit") {
        o.kind = OracleData::edit;
        o.before = toyworld::scene_from_json(j.at("before"));
        o.after = toyworld::scene_from_json(j.at("after"));
        for (const json& jop : j.at("ops")) o.ops.push_back(toyworld::edit_from_json(jop));
        o.jitter_dx = j.at("jitter").at(0).get<int>();
        o.jitter_dy = j.at("jitter").at(1).get<int>();
    } else if (kind == "compose") {
        o.kind = OracleData::compose;
        o.before = toyworld::scene_from_json(j.at("before"));
        o.after = toyworld::scene_from_json(j.at("after"));
        o.jitter_dx = j.at("jitter").at(0).get<int>();
        o.jitter_dy = j.at("jitter").at(1).get<int>();
    } else if (kind == "seg") {
        o.kind = OracleData::seg;
        o.scene = toyworld::scene_from_json(j.at("scene"));
        o.target = j.at("target").get<int>();
    } else if (kind == "control") {
        o.kind = OracleData::control;
        o.scene = toyworld::scene_from_json(j.at("scene"));
        o.map_kind = j.at("map").get<std::string>();
        o.flavor = j.at("flavor").get<std::string>();
    } else if (kind == "t2i") {
        o.kind = OracleData::t2i;
        o.scene = toyworld::scene_from_json(j.at("scene"));
    } else {
        throw ParseError("unknown oracle kind: " + kind);
    }
    return o;
}

std::string slot_image_name(int record, const std::string& slot) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d_%s.png", record, slot.c_str());
    return std::string("images/") + buf;
}

const char* kSchemaText = R"({
  "format": "one JSON object per line in manifest.jsonl, UTF-8",
  "record": {
    "index": "integer, line number from 0",
    "family": "dataset family name",
    "inputs": "array of {path, role}; role in [canvas, asset, control]",
    "outputs": "array of image paths",
    "base_prompt": "text; referring words IMG1..IMG5 / RES1..RES3, each at most once",
    "context_tags": "sorted array drawn from the closed context-tag vocabulary",
    "oracle": "exact ground truth; kind in [edit, compose, seg, control, t2i]"
  },
  "oracle.edit": "before/after scenes, edit op list, jitter [dx, dy]",
  "oracle.seg": "scene plus target object index",
  "oracle.control": "scene, map in [depth, edge], flavor in [generation, perception]",
  "images": "lossless RGB PNG, images/{record:06d}_{slot}.png with slot in{i}/out{j}"
})";

}  // namespace

void save(const DatasetManifest& m, const std::string& dir) {
    fs::create_directories(dir + "/images");
    std::ofstream mf(dir + "/manifest.jsonl");
    if (!mf) throw IntegrityError("cannot write manifest in " + dir);
    for (size_t i = 0; i < m.records.size(); i++) {
        const Sample& s = m.records[i];
        json inputs = json::array();
        for (size_t j = 0; j < s.inputs.size(); j++) {
            std::string path = slot_image_name(int(i), "in" + std::to_string(j));
            write_png(dir + "/" + path, s.inputs[j].first);
            inputs.push_back({{"path", path}, {"role", prompting::role_name(s.inputs[j].second)}});
        }
        json outputs = json::array();
        for (size_t j = 0; j < s.outputs.size(); j++) {
            std::string path = slot_image_name(int(i), "out" + std::to_string(j));
            write_png(dir + "/" + path, s.outputs[j]);
            outputs.push_back(path);
        }
        json rec{{"index", i},
                 {"family", family_name(m.family)},
                 {"inputs", inputs},
                 {"outputs", outputs},
                 {"base_prompt", s.base_prompt},
                 {"context_tags", s.context_tags},
                 {"oracle", oracle_to_json(s.oracle)}};
        mf << rec.dump() << "\n";
    }
    mf.close();
    json cfg{{"name", m.name},
             {"family", family_name(m.family)},
             {"count", m.records.size()},
             {"seed", m.seed},
             {"build", m.build.to_json()}};
    std::ofstream cf(dir + "/config.json");
    cf << cfg.dump(2) << "\n";
    std::ofstream sf(dir + "/schema.json");
    sf << kSchemaText << "\n";
}

DatasetManifest load(const std::string& dir) {
    std::ifstream cf(dir + "/config.json");
    if (!cf) throw IntegrityError("missing config.json in " + dir);
    json cfg = json::parse(cf, nullptr, true);

    DatasetManifest m;
    m.name = cfg.at("name").get<std::string>();
    m.family = family_from_name(cfg.at("family").get<std::string>());
    m.seed = cfg.at("seed").get<uint64_t>();
    m.build = BuildConfig::from_json(cfg.at("build"));
    size_t declared = cfg.at("count").get<size_t>();

    std::ifstream mf(dir + "/manifest.jsonl");
    if (!mf) throw IntegrityError("missing manifest.jsonl in " + dir);
    std::string line;
    int line_no = 0;
    while (std::getline(mf, line)) {
        line_no++;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("manifest.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
        Sample s;
        try {
            s.base_prompt = rec.at("base_prompt").get<std::string>();
            s.context_tags = rec.at("context_tags").get<std::vector<std::string>>();
            s.oracle = oracle_from_json(rec.at("oracle"));
            for (const json& ji : rec.at("inputs")) {
                std::string path = ji.at("path").get<std::string>();
                if (!fs::exists(dir + "/" + path))
                    throw IntegrityError("record " + std::to_string(line_no - 1) +
                                         ": missing image " + path);
                s.inputs.emplace_back(read_png(dir + "/" + path),
                                      prompting::role_from_name(ji.at("role").get<std::string>()));
            }
            for (const json& jo : rec.at("outputs")) {
                std::string path = jo.get<std::string>();
                if (!fs::exists(dir + "/" + path))
                    throw IntegrityError("record " + std::to_string(line_no - 1) +
                                         ": missing image " + path);
                s.outputs.push_back(read_png(dir + "/" + path));
            }
        } catch (const json::exception& e) {
            throw ParseError("manifest.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
        s.validate();
        m.records.push_back(std::move(s));
    }
    if (m.records.size() != declared)
        throw IntegrityError("manifest record count " + std::to_string(m.records.size()) +
                             " does not match declared count " + std::to_string(declared));
    return m;
}

}  // namespace ff::datasets
