#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "framefuse/image.hpp"
#include "framefuse/toyworld.hpp"

using namespace ff;
using namespace ff::toyworld;

namespace {

// Independent brute-force rasterizer: walks every pixel and searches objects
// top-down for the first one whose footprint covers it. Written against the
// documented footprint definitions, separately from the renderer.
bool oracle_covers(const SceneObject& o, int x, int y) {
    if (o.shape == Shape::square) {
        int dx = x - o.cx, dy = y - o.cy;
        return dx >= -o.size && dx <= o.size - 1 && dy >= -o.size && dy <= o.size - 1;
    }
    if (o.shape == Shape::circle) {
        double ddx = x - o.cx + 0.5, ddy = y - o.cy + 0.5;
        return ddx * ddx + ddy * ddy <= double(o.size) * o.size;
    }
    // triangle: row index from the top of the bbox, widening every two rows
    int row = y - o.cy + o.size;
    if (row < 0 || row > 2 * o.size - 1) return false;
    int half = row / 2 + 1;
    int dx = x - o.cx;
    return dx >= -half && dx <= half - 1;
}

Image oracle_render(const Scene& s, int res) {
    Image img(res, res);
    for (int y = 0; y < res; y++)
        for (int x = 0; x < res; x++) {
            int color = s.background;
            for (int i = int(s.objects.size()) - 1; i >= 0; i--) {
                if (oracle_covers(s.objects[size_t(i)], x, y)) {
                    color = s.objects[size_t(i)].color;
                    break;
                }
            }
            const PaletteEntry& p = kPalette[size_t(color)];
            img.set(x, y, p.r, p.g, p.b);
        }
    return img;
}

Scene make_scene(int res, int bg, std::vector<SceneObject> objs) {
    Scene s;
    s.width = s.height = res;
    s.background = bg;
    s.objects = std::move(objs);
    return s;
}

}  // namespace

TEST_CASE("empty scene renders pure background") {
    Scene s = make_scene(32, 3, {});
    Image img = render(s, 32);
    for (int y = 0; y < 32; y++)
        for (int x = 0; x < 32; x++) {
            const uint8_t* p = img.at(x, y);
            CHECK(p[0] == kPalette[3].r);
            CHECK(p[1] == kPalette[3].g);
            CHECK(p[2] == kPalette[3].b);
        }
}

TEST_CASE("red square at (16,16) size 4 covers exactly rows/cols 12..19") {
    Scene s = make_scene(32, 0, {{Shape::square, 3, 16, 16, 4, 0}});  // palette 3 = red
    Image img = render(s, 32);
    for (int y = 0; y < 32; y++)
        for (int x = 0; x < 32; x++) {
            bool in_block = x >= 12 && x <= 19 && y >= 12 && y <= 19;
            const uint8_t* p = img.at(x, y);
            bool is_red = p[0] == kPalette[3].r && p[1] == kPalette[3].g && p[2] == kPalette[3].b;
            CHECK(is_red == in_block);
        }
    CHECK(img == oracle_render(s, 32));
}

TEST_CASE("overlap takes the higher z color") {
    Scene s = make_scene(32, 0,
                         {{Shape::square, 2, 14, 14, 5, 0}, {Shape::square, 4, 17, 17, 5, 1}});
    Image img = render(s, 32);
    // pixel inside both squares
    const uint8_t* p = img.at(16, 16);
    CHECK(p[0] == kPalette[4].r);
    CHECK(p[1] == kPalette[4].g);
    CHECK(p[2] == kPalette[4].b);
    CHECK(img == oracle_render(s, 32));
}

TEST_CASE("render matches the brute-force oracle over 1000 sampled scenes") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    cfg.allow_overlap = true;  // exercise occlusion
    cfg.distinct_attributes = false;
    for (uint64_t seed = 0; seed < 1000; seed++) {
        Scene s = sample_scene(seed, cfg);
        REQUIRE(render(s, 32) == oracle_render(s, 32));
    }
}

TEST_CASE("sample_scene: degenerate zero-object config and determinism") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    cfg.min_objects = 0;
    cfg.max_objects = 0;
    Scene s = sample_scene(7, cfg);
    CHECK(s.objects.empty());
    CHECK(s.background >= 0);
    CHECK(s.background < 8);

    GeneratorConfig full = GeneratorConfig::for_resolution(32);
    Scene a = sample_scene(7, full);
    Scene b = sample_scene(7, full);
    CHECK(a == b);
}

TEST_CASE("sample_scene object-count histogram is uniform within 3 percent") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    cfg.min_objects = 1;
    cfg.max_objects = 4;
    std::map<size_t, int> counts;
    const int n = 1000;
    for (uint64_t seed = 0; seed < n; seed++) counts[sample_scene(seed, cfg).objects.size()]++;
    for (int k = 1; k <= 4; k++) {
        double frac = double(counts[size_t(k)]) / n;
        CHECK(frac > 0.25 - 0.03);
        CHECK(frac < 0.25 + 0.03);
    }
}

TEST_CASE("sample_scene config validation") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    cfg.max_objects = 5;  // above the hard limit of 4
    CHECK_THROWS_AS(sample_scene(0, cfg), ConfigError);
    cfg = GeneratorConfig::for_resolution(32);
    cfg.resolution = 20;
    CHECK_THROWS_AS(sample_scene(0, cfg), ConfigError);
}

TEST_CASE("apply_edit semantics") {
    Scene s = make_scene(32, 0,
                         {{Shape::square, 3, 10, 10, 4, 0},
                          {Shape::circle, 4, 22, 22, 4, 1},
                          {Shape::triangle, 2, 10, 22, 4, 2}});

    SUBCASE("recolor involution restores the original scene") {
        EditOp red_to_blue{EditKind::recolor, 0, 4};
        Scene t = apply_edit(s, red_to_blue);
        CHECK(t.objects[0].color == 4);
        EditOp blue_to_red{EditKind::recolor, 0, 3};
        CHECK(apply_edit(t, blue_to_red) == s);
    }
    SUBCASE("move shifts exactly by the displacement") {
        EditOp mv{EditKind::move, 0, -1, 4, 0};
        Scene t = apply_edit(s, mv);
        CHECK(t.objects[0].cx == 14);
        CHECK(t.objects[0].cy == 10);
        for (size_t i = 1; i < s.objects.size(); i++) CHECK(t.objects[i] == s.objects[i]);
    }
    SUBCASE("remove keeps z gaps and matches the oracle render") {
        EditOp rm{EditKind::remove, 1};
        Scene t = apply_edit(s, rm);
        CHECK(t.objects.size() == 2);
        CHECK(t.objects[1].z == 2);
        CHECK(render(t, 32) == oracle_render(t, 32));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(apply_edit(s, EditOp{EditKind::remove, 5}), InvalidEditError);
        Scene full = s;
        full.objects.push_back({Shape::square, 5, 26, 10, 3, 3});
        EditOp add{EditKind::add, -1, -1, 0, 0, 1.0, {Shape::circle, 6, 16, 16, 3, 9}};
        CHECK_THROWS_AS(apply_edit(full, add), CapacityError);
        CHECK_THROWS_AS(apply_edit(s, EditOp{EditKind::resize, 0, -1, 0, 0, 3.0}),
                        InvalidEditError);
        CHECK_THROWS_AS(apply_edit(s, EditOp{EditKind::recolor, 0, 0}), InvalidEditError);
    }
}

TEST_CASE("caption examples") {
    CHECK(caption(make_scene(32, 2, {})) == "an empty green background");
    Scene s = make_scene(32, 1, {{Shape::square, 3, 5, 5, 3, 0}});
    CHECK(caption(s) == "a red square in the upper left on a white background");
    Scene two = make_scene(32, 0,
                           {{Shape::square, 3, 5, 5, 3, 0}, {Shape::circle, 7, 16, 16, 3, 1}});
    CHECK(caption(two) ==
          "a red square in the upper left and an orange circle in the center on a black "
          "background");
}

TEST_CASE("caption/parse round trip over 1000 scenes") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    cfg.min_objects = 0;
    cfg.distinct_attributes = false;  // duplicates must survive as a multiset
    for (uint64_t seed = 0; seed < 1000; seed++) {
        Scene s = sample_scene(seed + 5000, cfg);
        CHECK(parse_caption(caption(s)) == scene_attributes(s));
    }
}

TEST_CASE("instruction templates") {
    Scene s = make_scene(32, 0,
                         {{Shape::square, 3, 10, 10, 4, 0}, {Shape::circle, 4, 22, 22, 4, 1}});
    CHECK(instruction(EditOp{EditKind::recolor, 0, 4}, s) == "turn the red square blue");
    CHECK(instruction(EditOp{EditKind::remove, 1}, s) == "remove the blue circle");
    EditOp add{EditKind::add, -1, -1, 0, 0, 1.0, {Shape::circle, 2, 26, 26, 4, 2}};
    CHECK(instruction(add, s) == "add a green circle in the lower right");
    EditOp ins{EditKind::insert_reference, -1, -1, 0, 0, 1.0, {Shape::circle, 2, 26, 26, 4, 2}};
    std::string text = instruction(ins, s);
    CHECK(text == "add the object from IMG1 to IMG2");
    CHECK(text.find("IMG1") != std::string::npos);
    CHECK(text.find("IMG2") != std::string::npos);
    CHECK(instruction(EditOp{EditKind::move, 0, -1, 12, 12}, s) ==
          "move the red square to the lower right");
    CHECK(instruction(EditOp{EditKind::resize, 0, -1, 0, 0, 2.0}, s) == "enlarge the red square");
    CHECK(instruction(EditOp{EditKind::replace_background, -1, 5}, s) ==
          "change the background to yellow");
}

TEST_CASE("control maps: single object footprint and empty scene") {
    Scene s = make_scene(32, 0, {{Shape::triangle, 4, 16, 16, 5, 0}});
    ControlMaps maps = control_maps(s, 32);
    REQUIRE(maps.masks.size() == 1);
    Image img = render(s, 32);
    for (int y = 0; y < 32; y++)
        for (int x = 0; x < 32; x++) {
            bool painted = img.at(x, y)[2] == kPalette[4].b && img.at(x, y)[0] == kPalette[4].r;
            CHECK(bool(maps.masks[0][size_t(y) * 32 + x]) == painted);
        }

    Scene empty = make_scene(32, 5, {});
    ControlMaps em = control_maps(empty, 32);
    for (float d : em.depth) CHECK(d == 0.0f);
    for (uint8_t e : em.edge) CHECK(e == 0);
}

TEST_CASE("occluded object mask excludes hidden pixels (brute-force oracle)") {
    Scene s = make_scene(32, 0,
                         {{Shape::square, 2, 14, 14, 5, 0}, {Shape::square, 4, 17, 17, 5, 1}});
    ControlMaps maps = control_maps(s, 32);
    for (int y = 0; y < 32; y++)
        for (int x = 0; x < 32; x++) {
            // per-pixel top-object test
            int top = -1;
            for (int i = 1; i >= 0; i--)
                if (oracle_covers(s.objects[size_t(i)], x, y)) {
                    top = i;
                    break;
                }
            CHECK(bool(maps.masks[0][size_t(y) * 32 + x]) == (top == 0));
            CHECK(bool(maps.masks[1][size_t(y) * 32 + x]) == (top == 1));
            float want_depth = top < 0 ? 0.0f : float(top + 1) / 2.0f;
            CHECK(maps.depth[size_t(y) * 32 + x] == want_depth);
        }
}

TEST_CASE("depth is z-rank normalized and edges are boundary pixels") {
    Scene s = make_scene(32, 0,
                         {{Shape::square, 2, 8, 8, 3, 0},
                          {Shape::square, 4, 16, 16, 3, 1},
                          {Shape::square, 5, 24, 24, 3, 2}});
    ControlMaps maps = control_maps(s, 32);
    CHECK(maps.depth[size_t(8) * 32 + 8] == doctest::Approx(1.0 / 3));
    CHECK(maps.depth[size_t(16) * 32 + 16] == doctest::Approx(2.0 / 3));
    CHECK(maps.depth[size_t(24) * 32 + 24] == doctest::Approx(1.0));
    // interior pixel is not edge, rim pixel is
    CHECK(maps.edge[size_t(8) * 32 + 8] == 0);
    CHECK(maps.edge[size_t(5) * 32 + 5] == 1);  // top-left corner of first square (5..10)
}

TEST_CASE("verify: exact render passes with both scores 1") {
    Scene s = make_scene(32, 0, {{Shape::square, 3, 10, 10, 4, 0}});
    EditOp op{EditKind::recolor, 0, 4};
    Image cand = render(apply_edit(s, op), 32);
    VerifierReport rep = verify(s, op, cand, 0.0);
    CHECK(rep.pass);
    CHECK(rep.edited_score == 1.0);
    CHECK(rep.preserved_score == 1.0);
}

TEST_CASE("verify: null edit is detected") {
    Scene s = make_scene(32, 0, {{Shape::square, 3, 10, 10, 4, 0}});
    EditOp op{EditKind::recolor, 0, 4};
    Image cand = render(s, 32);  // edit not applied
    VerifierReport rep = verify(s, op, cand, 0.05);
    CHECK(rep.edited_score == doctest::Approx(0.0));
    CHECK_FALSE(rep.pass);
}

TEST_CASE("verify: 3 percent corruption passes at tolerance 0.05") {
    Scene s = make_scene(32, 2, {{Shape::square, 3, 10, 10, 4, 0}});
    EditOp op{EditKind::recolor, 0, 4};
    Scene after = apply_edit(s, op);
    Image cand = render(after, 32);
    // corrupt 3% of pixels in each region, spread deterministically
    std::vector<uint8_t> mask = edited_mask(s, {op}, 32);
    std::vector<size_t> edited_px, preserved_px;
    for (size_t p = 0; p < mask.size(); p++) (mask[p] ? edited_px : preserved_px).push_back(p);
    auto corrupt = [&](const std::vector<size_t>& pool) {
        size_t n = pool.size() * 3 / 100;
        for (size_t i = 0; i < n; i++) {
            size_t p = pool[i * pool.size() / std::max<size_t>(n, 1)];
            cand.px[p * 3] = 255;
            cand.px[p * 3 + 1] = 255;
            cand.px[p * 3 + 2] = 255;  // white, never equals red/blue/green
        }
    };
    corrupt(edited_px);
    corrupt(preserved_px);
    VerifierReport rep = verify(s, op, cand, 0.05);
    CHECK(rep.pass);
    CHECK(rep.edited_score >= 0.95);
    CHECK(rep.preserved_score >= 0.95);
    // oracle: the exact corrupted fraction
    CHECK(rep.edited_score == doctest::Approx(1.0 - double(edited_px.size() * 3 / 100) /
                                                        double(edited_px.size())));
}

TEST_CASE("verify: resolution mismatch is a shape error") {
    Scene s = make_scene(32, 0, {{Shape::square, 3, 10, 10, 4, 0}});
    Image wrong(16, 16);
    CHECK_THROWS_AS(verify(s, EditOp{EditKind::recolor, 0, 4}, wrong, 0.0), ShapeError);
}

TEST_CASE("render and apply_edit commute with the oracle rasterizer (property)") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    for (uint64_t seed = 0; seed < 300; seed++) {
        Scene s = sample_scene(seed + 100, cfg);
        if (s.objects.empty()) continue;
        EditOp op{EditKind::recolor, 0, -1};
        op.new_color = (s.objects[0].color + 1) % 8;
        if (op.new_color == s.background) op.new_color = (op.new_color + 1) % 8;
        Scene t = apply_edit(s, op);
        REQUIRE(render(t, 32) == oracle_render(t, 32));
    }
}

TEST_CASE("scene and edit JSON round trip") {
    GeneratorConfig cfg = GeneratorConfig::for_resolution(32);
    Scene s = sample_scene(11, cfg);
    CHECK(scene_from_json(scene_to_json(s)) == s);
    EditOp op{EditKind::move, 1, -1, 3, -2};
    if (s.objects.size() < 2) op.target = 0;
    nlohmann::json j = edit_to_json(op);
    EditOp back = edit_from_json(j);
    CHECK(back.kind == op.kind);
    CHECK(back.target == op.target);
    CHECK(back.dx == op.dx);
    CHECK(back.dy == op.dy);
}
