#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace spanocr {

// 8-bit image, interleaved by pixel, channels 1 (gray) or 3 (RGB).
struct ImageU8 {
    int h = 0, w = 0, channels = 0;
    std::vector<uint8_t> data;

    uint8_t& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * w + x) * channels + c]; }
    uint8_t at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * w + x) * channels + c];
    }
    static ImageU8 filled(int h, int w, int channels, uint8_t value);
};

// Float image, planar by channel, intensity domain (nominal [0,255]).
struct ImageF {
    int h = 0, w = 0, channels = 0;
    std::vector<float> data;

    float& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * h + y) * w + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * h + y) * w + x];
    }
    static ImageF filled(int h, int w, int channels, float value);
};

ImageF to_float(const ImageU8& img);
ImageU8 to_u8(const ImageF& img);  // rounds and clamps to [0,255]

// File IO. Format picked by extension: .png, .pgm. PNG supports 8-bit gray,
// gray+alpha, RGB, RGBA (alpha dropped), non-interlaced.
ImageU8 load_image(const std::string& path);
void save_image(const std::string& path, const ImageU8& img);

ImageU8 load_png(const std::string& path);
void save_png(const std::string& path, const ImageU8& img);
ImageU8 load_pgm(const std::string& path);
void save_pgm(const std::string& path, const ImageU8& img);  // gray only

// Geometry / filtering on float images.
ImageF resize_bilinear(const ImageF& img, int out_h, int out_w);
ImageF gaussian_blur(const ImageF& img, double sigma);

// 3x3 homography mapping OUTPUT coordinates to input coordinates
// (x_in, y_in, w) = H * (x_out, y_out, 1); samples bilinearly, constant border.
using Homography = std::array<double, 9>;
ImageF warp_homography(const ImageF& img, const Homography& out_to_in,
                       const std::vector<float>& border);

// Least-squares-free exact fit from 4 point correspondences (from -> to).
Homography fit_homography(const std::array<std::array<double, 2>, 4>& from,
                          const std::array<std::array<double, 2>, 4>& to);

// Displacement-field warp: out(y,x) = in(y + dy(y,x), x + dx(y,x)).
ImageF warp_displacement(const ImageF& img, const std::vector<float>& dx,
                         const std::vector<float>& dy, const std::vector<float>& border);

// 3x3 min / max filter, one iteration.
ImageF morphology3x3(const ImageF& img, bool dilate);

}  // namespace spanocr
