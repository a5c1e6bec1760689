#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "framefuse/common.hpp"

namespace ff {

/// 8-bit RGB image, row-major, 3 channels interleaved.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> px;  // width*height*3

    Image() = default;
    Image(int w, int h) : width(w), height(h), px(size_t(w) * h * 3, 0) {}

    uint8_t* at(int x, int y) { return px.data() + (size_t(y) * width + x) * 3; }
    const uint8_t* at(int x, int y) const { return px.data() + (size_t(y) * width + x) * 3; }

    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        uint8_t* p = at(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }

    bool operator==(const Image& o) const {
        return width == o.width && height == o.height && px == o.px;
    }
};

// closed 8-color palette; caption grammar depends on these exact names
struct PaletteEntry {
    const char* name;
    uint8_t r, g, b;
};

inline constexpr std::array<PaletteEntry, 8> kPalette = {{
    {"black", 0, 0, 0},
    {"white", 255, 255, 255},
    {"green", 0, 200, 0},
    {"red", 220, 30, 30},
    {"blue", 30, 60, 220},
    {"yellow", 240, 220, 40},
    {"purple", 150, 40, 180},
    {"orange", 250, 140, 20},
}};

inline const char* color_name(int id) { return kPalette.at(size_t(id)).name; }

int color_id_from_name(const std::string& name);  // -1 if unknown

/// Index of the palette color nearest in squared RGB distance. Ties break to
/// the lower index; used by the verifier to snap model output pixels.
int nearest_palette(uint8_t r, uint8_t g, uint8_t b);

// neutral background for asset crops; deliberately off-palette
inline constexpr uint8_t kAssetGray = 128;

// mean |a-b| over all channels with pixels normalized to [0,1]
double image_l1(const Image& a, const Image& b);
// mean squared [0,1]-normalized channel difference over pixels where mask==0
// (mask empty means all pixels)
double image_mse_outside(const Image& a, const Image& b, const std::vector<uint8_t>& mask);

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace ff
