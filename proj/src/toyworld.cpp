#include "framefuse/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ff::toyworld {

using nlohmann::json;

namespace {

const char* kShapeNames[] = {"square", "circle", "triangle"};
const char* kEditNames[] = {"add",    "remove", "recolor",          "move",
                            "resize", "replace_background", "insert_reference"};

const char* kCellPhrases[] = {"upper left",  "upper center", "upper right",
                              "middle left", "center",       "middle right",
                              "lower left",  "lower center", "lower right"};

std::string article(const std::string& word) {
    if (word.empty()) return "a";
    char c = word[0];
    return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an" : "a";
}

bool bbox_intersects_canvas(const SceneObject& o, int w, int h) {
    return o.cx + o.size > 0 && o.cx - o.size < w && o.cy + o.size > 0 && o.cy - o.size < h;
}

bool needs_target(EditKind k) {
    return k == EditKind::remove || k == EditKind::recolor || k == EditKind::move ||
           k == EditKind::resize;
}

void check_object(const SceneObject& o, int background, int w, int h) {
    if (o.size < 2) throw InvalidEditError("object size below 2 pixels");
    if (o.color < 0 || o.color >= int(kPalette.size()))
        throw InvalidEditError("object color out of palette");
    if (o.color == background) throw InvalidEditError("object color equals background");
    if (!bbox_intersects_canvas(o, w, h))
        throw InvalidEditError("object bounding box leaves the canvas");
}

}  // namespace

const char* shape_name(Shape s) { return kShapeNames[int(s)]; }

Shape shape_from_name(const std::string& name) {
    for (int i = 0; i < 3; i++)
        if (name == kShapeNames[i]) return Shape(i);
    throw ParseError("unknown shape: " + name);
}

const char* edit_kind_name(EditKind k) { return kEditNames[int(k)]; }

EditKind edit_kind_from_name(const std::string& name) {
    for (int i = 0; i < 7; i++)
        if (name == kEditNames[i]) return EditKind(i);
    throw ParseError("unknown edit kind: " + name);
}

bool SceneObject::covers(int x, int y) const {
    switch (shape) {
        case Shape::square:
            return cx - size <= x && x < cx + size && cy - size <= y && y < cy + size;
        case Shape::circle: {
            double dx = double(x) + 0.5 - double(cx);
            double dy = double(y) + 0.5 - double(cy);
            return dx * dx + dy * dy <= double(size) * double(size);
        }
        case Shape::triangle: {
            int k = y - (cy - size);
            if (k < 0 || k >= 2 * size) return false;
            int hw = k / 2 + 1;
            return cx - hw <= x && x < cx + hw;
        }
    }
    return false;
}

void Scene::validate() const {
    if (width <= 0 || height <= 0) throw Error("scene has empty canvas");
    if (background < 0 || background >= int(kPalette.size()))
        throw Error("scene background out of palette");
    if (int(objects.size()) > kMaxObjects) throw Error("scene exceeds max object count");
    int prev_z = 0;
    for (size_t i = 0; i < objects.size(); i++) {
        const SceneObject& o = objects[i];
        if (i > 0 && o.z <= prev_z) throw Error("object z-orders not strictly ascending");
        prev_z = o.z;
        if (o.size < 2) throw Error("object size below 2 pixels");
        if (o.color < 0 || o.color >= int(kPalette.size()))
            throw Error("object color out of palette");
        if (o.color == background) throw Error("object color equals background");
        if (!bbox_intersects_canvas(o, width, height))
            throw Error("object bounding box outside canvas");
    }
}

void GeneratorConfig::validate() const {
    if (resolution != 16 && resolution != 32 && resolution != 64)
        throw ConfigError("resolution must be 16, 32 or 64");
    if (palette_size < 2 || palette_size > int(kPalette.size()))
        throw ConfigError("palette_size must be in [2, 8]");
    if (max_objects > kMaxObjects)
        throw ConfigError("object-count max exceeds limit of " + std::to_string(kMaxObjects));
    if (min_objects < 0 || min_objects > max_objects)
        throw ConfigError("invalid object-count range");
    if (min_size < 2 || max_size < min_size) throw ConfigError("invalid size range");
    if (max_size * 2 + 4 > resolution) throw ConfigError("max_size too large for resolution");
}

GeneratorConfig GeneratorConfig::for_resolution(int res) {
    GeneratorConfig c;
    c.resolution = res;
    if (res <= 16) {
        c.min_size = 2;
        c.max_size = 3;
        c.max_objects = 3;
    } else if (res <= 32) {
        c.min_size = 3;
        c.max_size = 6;
    } else {
        c.min_size = 6;
        c.max_size = 12;
    }
    return c;
}

Scene sample_scene(uint64_t seed, const GeneratorConfig& config) {
    config.validate();
    Rng rng(derive_seed(seed, 0x5ce7e));
    Scene s;
    s.width = s.height = config.resolution;
    s.background = int(rng.below(uint64_t(config.palette_size)));
    int n = int(rng.range(config.min_objects, config.max_objects));
    const int margin = 2;
    for (int i = 0; i < n; i++) {
        bool placed = false;
        for (int attempt = 0; attempt < 500 && !placed; attempt++) {
            SceneObject o;
            o.shape = Shape(rng.below(3));
            o.color = int(rng.below(uint64_t(config.palette_size)));
            if (o.color == s.background) continue;
            o.size = int(rng.range(config.min_size, config.max_size));
            int lo = o.size + margin, hi = config.resolution - o.size - margin;
            if (hi < lo) continue;
            o.cx = int(rng.range(lo, hi));
            o.cy = int(rng.range(lo, hi));
            o.z = i;
            if (config.distinct_attributes) {
                bool dup = false;
                for (const SceneObject& e : s.objects)
                    dup |= (e.color == o.color && e.shape == o.shape);
                if (dup) continue;
            }
            if (!config.allow_overlap) {
                bool hit = false;
                for (const SceneObject& e : s.objects) {
                    bool apart = o.cx + o.size + 1 <= e.cx - e.size - 1 ||
                                 e.cx + e.size + 1 <= o.cx - o.size - 1 ||
                                 o.cy + o.size + 1 <= e.cy - e.size - 1 ||
                                 e.cy + e.size + 1 <= o.cy - o.size - 1;
                    hit |= !apart;
                }
                if (hit) continue;
            }
            s.objects.push_back(o);
            placed = true;
        }
        if (!placed) throw Error("sample_scene: could not place object " + std::to_string(i));
    }
    s.validate();
    return s;
}

Image render(const Scene& scene, int resolution) {
    if (resolution != 16 && resolution != 32 && resolution != 64)
        throw ShapeError("render resolution must be 16, 32 or 64");
    if (scene.width != resolution || scene.height != resolution)
        throw ShapeError("scene dimensions do not match render resolution");
    scene.validate();
    Image img(resolution, resolution);
    const PaletteEntry& bg = kPalette[size_t(scene.background)];
    for (int y = 0; y < resolution; y++)
        for (int x = 0; x < resolution; x++) img.set(x, y, bg.r, bg.g, bg.b);
    for (const SceneObject& o : scene.objects) {
        const PaletteEntry& c = kPalette[size_t(o.color)];
        int x0 = std::max(0, o.cx - o.size - 1), x1 = std::min(resolution, o.cx + o.size + 1);
        int y0 = std::max(0, o.cy - o.size - 1), y1 = std::min(resolution, o.cy + o.size + 1);
        for (int y = y0; y < y1; y++)
            for (int x = x0; x < x1; x++)
                if (o.covers(x, y)) img.set(x, y, c.r, c.g, c.b);
    }
    return img;
}

Scene apply_edit(const Scene& scene, const EditOp& op) {
    if (needs_target(op.kind)) {
        if (op.target < 0 || op.target >= int(scene.objects.size()))
            throw InvalidEditError("edit target " + std::to_string(op.target) +
                                   " out of range for " + std::to_string(scene.objects.size()) +
                                   " objects");
    } else if (op.target != -1) {
        throw InvalidEditError(std::string("edit kind ") + edit_kind_name(op.kind) +
                               " takes no target");
    }
    Scene out = scene;
    switch (op.kind) {
        case EditKind::add:
        case EditKind::insert_reference: {
            if (int(out.objects.size()) >= kMaxObjects)
                throw CapacityError("cannot add object: scene already has " +
                                    std::to_string(kMaxObjects) + " objects");
            check_object(op.object, out.background, out.width, out.height);
            for (const SceneObject& e : out.objects)
                if (e.z == op.object.z) throw InvalidEditError("duplicate z-order on add");
            auto it = std::lower_bound(
                out.objects.begin(), out.objects.end(), op.object,
                [](const SceneObject& a, const SceneObject& b) { return a.z < b.z; });
            out.objects.insert(it, op.object);
            break;
        }
        case EditKind::remove:
            out.objects.erase(out.objects.begin() + op.target);
            break;
        case EditKind::recolor: {
            SceneObject& o = out.objects[size_t(op.target)];
            if (op.new_color < 0 || op.new_color >= int(kPalette.size()))
                throw InvalidEditError("recolor color out of palette");
            if (op.new_color == out.background)
                throw InvalidEditError("recolor color equals background");
            o.color = op.new_color;
            break;
        }
        case EditKind::move: {
            SceneObject& o = out.objects[size_t(op.target)];
            o.cx += op.dx;
            o.cy += op.dy;
            if (!bbox_intersects_canvas(o, out.width, out.height))
                throw InvalidEditError("move pushes object off the canvas");
            break;
        }
        case EditKind::resize: {
            if (op.scale < 0.5 || op.scale > 2.0)
                throw InvalidEditError("resize scale outside [0.5, 2.0]");
            SceneObject& o = out.objects[size_t(op.target)];
            int ns = int(std::lround(double(o.size) * op.scale));
            if (ns < 2) throw InvalidEditError("resize result below minimum size");
            o.size = ns;
            if (!bbox_intersects_canvas(o, out.width, out.height))
                throw InvalidEditError("resize pushes object off the canvas");
            break;
        }
        case EditKind::replace_background: {
            if (op.new_color < 0 || op.new_color >= int(kPalette.size()))
                throw InvalidEditError("background color out of palette");
            for (const SceneObject& e : out.objects)
                if (e.color == op.new_color)
                    throw InvalidEditError("new background collides with an object color");
            out.background = op.new_color;
            break;
        }
    }
    out.validate();
    return out;
}

Scene translate_all(const Scene& scene, int dx, int dy) {
    Scene out = scene;
    for (SceneObject& o : out.objects) {
        o.cx += dx;
        o.cy += dy;
    }
    out.validate();
    return out;
}

// ------------------------------------------------------------ captions

int coarse_cell(int cx, int cy, int width, int height) {
    int x = std::clamp(cx, 0, width - 1);
    int y = std::clamp(cy, 0, height - 1);
    return (y * 3 / height) * 3 + (x * 3 / width);
}

std::pair<int, int> cell_center(int cell, int resolution) {
    int row = cell / 3, col = cell % 3;
    return {(2 * col + 1) * resolution / 6, (2 * row + 1) * resolution / 6};
}

const char* cell_phrase(int cell) { return kCellPhrases[cell]; }

int cell_from_phrase(const std::string& phrase) {
    for (int i = 0; i < 9; i++)
        if (phrase == kCellPhrases[i]) return i;
    return -1;
}

std::string caption(const Scene& scene) {
    std::string bg = color_name(scene.background);
    if (scene.objects.empty()) return "an empty " + bg + " background";
    std::string out;
    for (size_t i = 0; i < scene.objects.size(); i++) {
        const SceneObject& o = scene.objects[i];
        std::string color = color_name(o.color);
        if (i > 0) out += " and ";
        out += article(color) + " " + color + " " + shape_name(o.shape) + " in the " +
               cell_phrase(coarse_cell(o.cx, o.cy, scene.width, scene.height));
    }
    out += " on " + article(bg) + " " + bg + " background";
    return out;
}

namespace {

struct WordCursor {
    std::vector<std::string> words;
    size_t pos = 0;

    explicit WordCursor(const std::string& text) {
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) words.push_back(w);
    }
    bool done() const { return pos >= words.size(); }
    const std::string& peek() const {
        if (done()) throw ParseError("caption ended unexpectedly");
        return words[pos];
    }
    std::string take() {
        std::string w = peek();
        pos++;
        return w;
    }
    void expect(const std::string& w) {
        std::string got = take();
        if (got != w) throw ParseError("expected '" + w + "' but found '" + got + "'");
    }
};

int take_color(WordCursor& c) {
    std::string w = c.take();
    int id = color_id_from_name(w);
    if (id < 0) throw ParseError("unknown color: " + w);
    return id;
}

int take_cell(WordCursor& c) {
    std::string first = c.take();
    if (first == "center") return 4;
    std::string phrase = first + " " + c.take();
    int cell = cell_from_phrase(phrase);
    if (cell < 0) throw ParseError("unknown position: " + phrase);
    return cell;
}

}  // namespace

std::vector<Attribute> parse_caption(const std::string& text) {
    WordCursor c(text);
    std::string art = c.take();
    if (art != "a" && art != "an") throw ParseError("caption must start with an article");
    if (c.peek() == "empty") {
        c.take();
        take_color(c);
        c.expect("background");
        if (!c.done()) throw ParseError("trailing words after empty caption");
        return {};
    }
    std::vector<Attribute> attrs;
    while (true) {
        Attribute a{};
        a.color = take_color(c);
        a.shape = shape_from_name(c.take());
        c.expect("in");
        c.expect("the");
        a.cell = take_cell(c);
        attrs.push_back(a);
        std::string link = c.take();
        if (link == "on") break;
        if (link != "and") throw ParseError("expected 'and' or 'on', found '" + link + "'");
        std::string art2 = c.take();
        if (art2 != "a" && art2 != "an") throw ParseError("expected article, found '" + art2 + "'");
    }
    std::string art3 = c.take();
    if (art3 != "a" && art3 != "an") throw ParseError("expected article, found '" + art3 + "'");
    take_color(c);
    c.expect("background");
    if (!c.done()) throw ParseError("trailing words after caption");
    std::sort(attrs.begin(), attrs.end());
    return attrs;
}

std::vector<Attribute> scene_attributes(const Scene& scene) {
    std::vector<Attribute> attrs;
    for (const SceneObject& o : scene.objects)
        attrs.push_back({o.shape, o.color, coarse_cell(o.cx, o.cy, scene.width, scene.height)});
    std::sort(attrs.begin(), attrs.end());
    return attrs;
}

std::string instruction(const EditOp& op, const Scene& scene) {
    auto obj_phrase = [&](int idx) {
        const SceneObject& o = scene.objects.at(size_t(idx));
        return std::string(color_name(o.color)) + " " + shape_name(o.shape);
    };
    switch (op.kind) {
        case EditKind::recolor:
            return "turn the " + obj_phrase(op.target) + " " + color_name(op.new_color);
        case EditKind::remove:
            return "remove the " + obj_phrase(op.target);
        case EditKind::add: {
            std::string color = color_name(op.object.color);
            int cell = coarse_cell(op.object.cx, op.object.cy, scene.width, scene.height);
            return "add " + article(color) + " " + color + " " + shape_name(op.object.shape) +
                   " in the " + cell_phrase(cell);
        }
        case EditKind::move: {
            const SceneObject& o = scene.objects.at(size_t(op.target));
            int cell = coarse_cell(o.cx + op.dx, o.cy + op.dy, scene.width, scene.height);
            return "move the " + obj_phrase(op.target) + " to the " + cell_phrase(cell);
        }
        case EditKind::resize:
            return (op.scale >= 1.0 ? "enlarge the " : "shrink the ") + obj_phrase(op.target);
        case EditKind::replace_background:
            return std::string("change the background to ") + color_name(op.new_color);
        case EditKind::insert_reference:
            return "add the object from IMG1 to IMG2";
    }
    throw Error("unreachable edit kind");
}

// ------------------------------------------------------------ control maps

ControlMaps control_maps(const Scene& scene, int resolution) {
    if (scene.width != resolution || scene.height != resolution)
        throw ShapeError("scene dimensions do not match resolution");
    const size_t n_px = size_t(resolution) * resolution;
    std::vector<int> owner(n_px, -1);
    for (size_t i = 0; i < scene.objects.size(); i++) {
        const SceneObject& o = scene.objects[i];
        int x0 = std::max(0, o.cx - o.size - 1), x1 = std::min(resolution, o.cx + o.size + 1);
        int y0 = std::max(0, o.cy - o.size - 1), y1 = std::min(resolution, o.cy + o.size + 1);
        for (int y = y0; y < y1; y++)
            for (int x = x0; x < x1; x++)
                if (o.covers(x, y)) owner[size_t(y) * resolution + x] = int(i);
    }
    ControlMaps maps;
    maps.masks.assign(scene.objects.size(), std::vector<uint8_t>(n_px, 0));
    maps.depth.assign(n_px, 0.0f);
    maps.edge.assign(n_px, 0);
    const float n_obj = float(scene.objects.size());
    for (size_t p = 0; p < n_px; p++) {
        if (owner[p] < 0) continue;
        maps.masks[size_t(owner[p])][p] = 1;
        maps.depth[p] = float(owner[p] + 1) / n_obj;
    }
    for (size_t i = 0; i < scene.objects.size(); i++) {
        const std::vector<uint8_t>& m = maps.masks[i];
        for (int y = 0; y < resolution; y++) {
            for (int x = 0; x < resolution; x++) {
                size_t p = size_t(y) * resolution + x;
                if (!m[p]) continue;
                bool boundary = x == 0 || x == resolution - 1 || y == 0 || y == resolution - 1 ||
                                !m[p - 1] || !m[p + 1] || !m[p - size_t(resolution)] ||
                                !m[p + size_t(resolution)];
                if (boundary) maps.edge[p] = 1;
            }
        }
    }
    return maps;
}

Image mask_to_image(const std::vector<uint8_t>& mask, int resolution) {
    Image img(resolution, resolution);
    for (size_t p = 0; p < mask.size(); p++) {
        uint8_t v = mask[p] ? 255 : 0;
        img.px[p * 3] = img.px[p * 3 + 1] = img.px[p * 3 + 2] = v;
    }
    return img;
}

Image grid_to_image(const std::vector<float>& grid, int resolution) {
    Image img(resolution, resolution);
    for (size_t p = 0; p < grid.size(); p++) {
        uint8_t v = uint8_t(std::lround(std::clamp(grid[p], 0.0f, 1.0f) * 255.0f));
        img.px[p * 3] = img.px[p * 3 + 1] = img.px[p * 3 + 2] = v;
    }
    return img;
}

// ------------------------------------------------------------ verification

std::vector<uint8_t> edited_mask(const Scene& before, const std::vector<EditOp>& ops,
                                 int resolution) {
    std::vector<uint8_t> mask(size_t(resolution) * resolution, 0);
    auto or_in = [&](const std::vector<uint8_t>& m) {
        for (size_t p = 0; p < mask.size(); p++) mask[p] |= m[p];
    };
    Scene cur = before;
    for (const EditOp& op : ops) {
        Scene next = apply_edit(cur, op);
        ControlMaps pre = control_maps(cur, resolution);
        ControlMaps post = control_maps(next, resolution);
        switch (op.kind) {
            case EditKind::recolor:
            case EditKind::remove:
                or_in(pre.masks[size_t(op.target)]);
                break;
            case EditKind::move:
            case EditKind::resize:
                or_in(pre.masks[size_t(op.target)]);
                or_in(post.masks[size_t(op.target)]);
                break;
            case EditKind::add:
            case EditKind::insert_reference: {
                size_t idx = 0;
                while (idx < next.objects.size() && next.objects[idx].z != op.object.z) idx++;
                or_in(post.masks.at(idx));
                break;
            }
            case EditKind::replace_background: {
                std::vector<uint8_t> bg(mask.size(), 1);
                for (const std::vector<uint8_t>& m : pre.masks)
                    for (size_t p = 0; p < bg.size(); p++)
                        if (m[p]) bg[p] = 0;
                or_in(bg);
                break;
            }
        }
        cur = next;
    }
    return mask;
}

VerifierReport verify_sequence(const Scene& before, const std::vector<EditOp>& ops,
                               const Scene& after, const Image& candidate, double tolerance) {
    const int res = before.width;
    if (candidate.width != res || candidate.height != res)
        throw ShapeError("candidate resolution does not match scene resolution");
    Image ref = render(after, res);
    std::vector<uint8_t> mask = edited_mask(before, ops, res);
    long edited_total = 0, edited_agree = 0, preserved_total = 0, preserved_agree = 0;
    for (size_t p = 0; p < mask.size(); p++) {
        int rc = nearest_palette(ref.px[p * 3], ref.px[p * 3 + 1], ref.px[p * 3 + 2]);
        int cc = nearest_palette(candidate.px[p * 3], candidate.px[p * 3 + 1],
                                 candidate.px[p * 3 + 2]);
        bool agree = rc == cc;
        if (mask[p]) {
            edited_total++;
            edited_agree += agree;
        } else {
            preserved_total++;
            preserved_agree += agree;
        }
    }
    VerifierReport rep;
    rep.edited_pixels = edited_total;
    rep.preserved_pixels = preserved_total;
    rep.edited_score = edited_total ? double(edited_agree) / double(edited_total) : 1.0;
    rep.preserved_score =
        preserved_total ? double(preserved_agree) / double(preserved_total) : 1.0;
    rep.pass = rep.edited_score >= 1.0 - tolerance && rep.preserved_score >= 1.0 - tolerance;
    return rep;
}

VerifierReport verify(const Scene& before, const EditOp& op, const Image& candidate,
                      double tolerance) {
    return verify_sequence(before, {op}, apply_edit(before, op), candidate, tolerance);
}

// ------------------------------------------------------------ serialization

json scene_to_json(const Scene& scene) {
    json objs = json::array();
    for (const SceneObject& o : scene.objects)
        objs.push_back({{"shape", shape_name(o.shape)},
                        {"color", o.color},
                        {"cx", o.cx},
                        {"cy", o.cy},
                        {"size", o.size},
                        {"z", o.z}});
    return {{"width", scene.width},
            {"height", scene.height},
            {"background", scene.background},
            {"objects", objs}};
}

Scene scene_from_json(const json& j) {
    Scene s;
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    s.background = j.at("background").get<int>();
    for (const json& jo : j.at("objects")) {
        SceneObject o;
        o.shape = shape_from_name(jo.at("shape").get<std::string>());
        o.color = jo.at("color").get<int>();
        o.cx = jo.at("cx").get<int>();
        o.cy = jo.at("cy").get<int>();
        o.size = jo.at("size").get<int>();
        o.z = jo.at("z").get<int>();
        s.objects.push_back(o);
    }
    s.validate();
    return s;
}

json edit_to_json(const EditOp& op) {
    json j{{"kind", edit_kind_name(op.kind)}};
    if (needs_target(op.kind)) j["target"] = op.target;
    if (op.kind == EditKind::recolor || op.kind == EditKind::replace_background)
        j["new_color"] = op.new_color;
    if (op.kind == EditKind::move) {
        j["dx"] = op.dx;
        j["dy"] = op.dy;
    }
    if (op.kind == EditKind::resize) j["scale"] = op.scale;
    if (op.kind == EditKind::add || op.kind == EditKind::insert_reference)
        j["object"] = {{"shape", shape_name(op.object.shape)}, {"color", op.object.color},
                       {"cx", op.object.cx},                   {"cy", op.object.cy},
                       {"size", op.object.size},               {"z", op.object.z}};
    return j;
}

EditOp edit_from_json(const json& j) {
    EditOp op;
    op.kind = edit_kind_from_name(j.at("kind").get<std::string>());
    op.target = j.value("target", -1);
    op.new_color = j.value("new_color", -1);
    op.dx = j.value("dx", 0);
    op.dy = j.value("dy", 0);
    op.scale = j.value("scale", 1.0);
    if (j.contains("object")) {
        const json& jo = j.at("object");
        op.object.shape = shape_from_name(jo.at("shape").get<std::string>());
        op.object.color = jo.at("color").get<int>();
        op.object.cx = jo.at("cx").get<int>();
        op.object.cy = jo.at("cy").get<int>();
        op.object.size = jo.at("size").get<int>();
        op.object.z = jo.at("z").get<int>();
    }
    return op;
}

}  // namespace ff::toyworld
