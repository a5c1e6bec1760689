#include "framefuse/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace ff {

int color_id_from_name(const std::string& name) {
    for (size_t i = 0; i < kPalette.size(); i++)
        if (name == kPalette[i].name) return int(i);
    return -1;
}

int nearest_palette(uint8_t r, uint8_t g, uint8_t b) {
    int best = 0;
    long best_d = -1;
    for (size_t i = 0; i < kPalette.size(); i++) {
        long dr = long(r) - kPalette[i].r;
        long dg = long(g) - kPalette[i].g;
        long db = long(b) - kPalette[i].b;
        long d = dr * dr + dg * dg + db * db;
        if (best_d < 0 || d < best_d) {
            best_d = d;
            best = int(i);
        }
    }
    return best;
}

double image_l1(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw ShapeError("image_l1: size mismatch");
    if (a.px.empty()) return 0.0;
    double sum = 0.0;
    for (size_t i = 0; i < a.px.size(); i++)
        sum += std::abs(double(a.px[i]) - double(b.px[i]));
    return sum / (255.0 * double(a.px.size()));
}

double image_mse_outside(const Image& a, const Image& b, const std::vector<uint8_t>& mask) {
    if (a.width != b.width || a.height != b.height)
        throw ShapeError("image_mse_outside: size mismatch");
    size_t n_px = size_t(a.width) * a.height;
    if (!mask.empty() && mask.size() != n_px)
        throw ShapeError("image_mse_outside: mask size mismatch");
    double sum = 0.0;
    size_t count = 0;
    for (size_t p = 0; p < n_px; p++) {
        if (!mask.empty() && mask[p]) continue;
        for (int c = 0; c < 3; c++) {
            double d = (double(a.px[p * 3 + c]) - double(b.px[p * 3 + c])) / 255.0;
            sum += d * d;
        }
        count += 3;
    }
    return count ? sum / double(count) : 0.0;
}

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const std::string& path, const Image& img) {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IntegrityError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IntegrityError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IntegrityError("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(img.height));
    for (int y = 0; y < img.height; y++)
        rows[size_t(y)] = const_cast<png_bytep>(img.px.data() + size_t(y) * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IntegrityError("cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError("png read failed: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    Image img(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
    if (png_get_rowbytes(png, info) != size_t(img.width) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError("unexpected png layout: " + path);
    }
    std::vector<png_bytep> rows(size_t(img.height));
    for (int y = 0; y < img.height; y++)
        rows[size_t(y)] = img.px.data() + size_t(y) * img.width * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace ff
