#include "spanocr/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace spanocr {

ImageU8 ImageU8::filled(int h, int w, int channels, uint8_t value) {
    ImageU8 img;
    img.h = h;
    img.w = w;
    img.channels = channels;
    img.data.assign(static_cast<size_t>(h) * w * channels, value);
    return img;
}

ImageF ImageF::filled(int h, int w, int channels, float value) {
    ImageF img;
    img.h = h;
    img.w = w;
    img.channels = channels;
    img.data.assign(static_cast<size_t>(h) * w * channels, value);
    return img;
}

ImageF to_float(const ImageU8& img) {
    ImageF out = ImageF::filled(img.h, img.w, img.channels, 0.0f);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) out.at(c, y, x) = static_cast<float>(img.at(y, x, c));
    return out;
}

ImageU8 to_u8(const ImageF& img) {
    ImageU8 out = ImageU8::filled(img.h, img.w, img.channels, 0);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                float v = std::round(img.at(c, y, x));
                out.at(y, x, c) = static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f));
            }
    return out;
}

// ---------------------------------------------------------------- PGM

ImageU8 load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("pgm: " + path + " is not binary P5");
    auto next_int = [&in, &path]() {
        // skip whitespace and '#' comments
        int c = in.peek();
        while (c == '#' || std::isspace(c)) {
            if (c == '#') in.ignore(1 << 20, '\n');
            else in.get();
            c = in.peek();
        }
        int v;
        if (!(in >> v)) throw std::runtime_error("pgm: malformed header in " + path);
        return v;
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw std::runtime_error("pgm: " + path + " must be 8-bit (maxval 255)");
    in.get();  // single whitespace after maxval
    ImageU8 img = ImageU8::filled(h, w, 1, 0);
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (!in) throw std::runtime_error("pgm: truncated pixel data in " + path);
    return img;
}

void save_pgm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1) throw std::invalid_argument("pgm: only grayscale images");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("pgm: cannot write " + path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
}

// ---------------------------------------------------------------- PNG

namespace {

uint32_t read_be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t len) {
    write_be32(out, static_cast<uint32_t>(len));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data, data + len);
    uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(4 + len));
    write_be32(out, crc);
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

const uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace

ImageU8 load_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("png: cannot open " + path);
    std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < 8 || std::memcmp(file.data(), kPngSig, 8) != 0)
        throw std::runtime_error("png: " + path + " has no PNG signature");

    size_t pos = 8;
    int w = 0, h = 0, bit_depth = 0, color_type = 0;
    std::vector<uint8_t> idat;
    bool seen_end = false;
    while (pos + 8 <= file.size() && !seen_end) {
        uint32_t len = read_be32(&file[pos]);
        if (pos + 12 + len > file.size()) throw std::runtime_error("png: truncated chunk in " + path);
        std::string type(reinterpret_cast<char*>(&file[pos + 4]), 4);
        const uint8_t* data = &file[pos + 8];
        if (type == "IHDR") {
            w = static_cast<int>(read_be32(data));
            h = static_cast<int>(read_be32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw std::runtime_error("png: interlaced files unsupported: " + path);
            if (bit_depth != 8)
                throw std::runtime_error("png: only 8-bit depth supported: " + path);
            if (color_type != 0 && color_type != 2 && color_type != 4 && color_type != 6)
                throw std::runtime_error("png: unsupported color type " +
                                         std::to_string(color_type) + ": " + path);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            seen_end = true;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || idat.empty()) throw std::runtime_error("png: malformed file " + path);

    int src_ch = color_type == 0 ? 1 : color_type == 2 ? 3 : color_type == 4 ? 2 : 4;
    size_t stride = static_cast<size_t>(w) * src_ch;
    std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    int zrc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || raw_len != raw.size())
        throw std::runtime_error("png: inflate failed for " + path);

    // defilter
    std::vector<uint8_t> pixels(static_cast<size_t>(h) * stride);
    int bpp = src_ch;
    for (int y = 0; y < h; ++y) {
        uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = &raw[static_cast<size_t>(y) * (stride + 1) + 1];
        uint8_t* dst = &pixels[static_cast<size_t>(y) * stride];
        const uint8_t* up = y > 0 ? &pixels[static_cast<size_t>(y - 1) * stride] : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
            int b = up ? up[i] : 0;
            int c = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
            int x = src[i];
            switch (filter) {
                case 0: dst[i] = static_cast<uint8_t>(x); break;
                case 1: dst[i] = static_cast<uint8_t>(x + a); break;
                case 2: dst[i] = static_cast<uint8_t>(x + b); break;
                case 3: dst[i] = static_cast<uint8_t>(x + (a + b) / 2); break;
                case 4: dst[i] = static_cast<uint8_t>(x + paeth(a, b, c)); break;
                default: throw std::runtime_error("png: bad filter byte in " + path);
            }
        }
    }

    // drop alpha, keep gray or rgb
    int out_ch = (src_ch == 1 || src_ch == 2) ? 1 : 3;
    ImageU8 img = ImageU8::filled(h, w, out_ch, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const uint8_t* px = &pixels[(static_cast<size_t>(y) * w + x) * src_ch];
            for (int c = 0; c < out_ch; ++c) img.at(y, x, c) = px[c];
        }
    return img;
}

void save_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("png: only gray or RGB images");
    size_t stride = static_cast<size_t>(img.w) * img.channels;
    std::vector<uint8_t> raw(static_cast<size_t>(img.h) * (stride + 1));
    for (int y = 0; y < img.h; ++y) {
        raw[static_cast<size_t>(y) * (stride + 1)] = 0;  // filter: none
        std::memcpy(&raw[static_cast<size_t>(y) * (stride + 1) + 1],
                    &img.data[static_cast<size_t>(y) * stride], stride);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    int zrc = compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
    if (zrc != Z_OK) throw std::runtime_error("png: deflate failed for " + path);
    compressed.resize(bound);

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>(img.w >> 24);
    ihdr[1] = static_cast<uint8_t>(img.w >> 16);
    ihdr[2] = static_cast<uint8_t>(img.w >> 8);
    ihdr[3] = static_cast<uint8_t>(img.w);
    ihdr[4] = static_cast<uint8_t>(img.h >> 24);
    ihdr[5] = static_cast<uint8_t>(img.h >> 16);
    ihdr[6] = static_cast<uint8_t>(img.h >> 8);
    ihdr[7] = static_cast<uint8_t>(img.h);
    ihdr[8] = 8;                                         // bit depth
    ihdr[9] = img.channels == 1 ? 0 : 2;                 // gray / rgb
    ihdr[10] = ihdr[11] = ihdr[12] = 0;                  // deflate, adaptive, no interlace
    append_chunk(out, "IHDR", ihdr, 13);
    append_chunk(out, "IDAT", compressed.data(), compressed.size());
    append_chunk(out, "IEND", nullptr, 0);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("png: cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

namespace {
bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

ImageU8 load_image(const std::string& path) {
    if (ends_with(path, ".pgm")) return load_pgm(path);
    if (ends_with(path, ".png")) return load_png(path);
    throw std::runtime_error("image: unsupported format (want .png or .pgm): " + path);
}

void save_image(const std::string& path, const ImageU8& img) {
    if (ends_with(path, ".pgm")) return save_pgm(path, img);
    if (ends_with(path, ".png")) return save_png(path, img);
    throw std::runtime_error("image: unsupported format (want .png or .pgm): " + path);
}

// ---------------------------------------------------------------- geometry

namespace {

float sample_bilinear(const ImageF& img, int c, double y, double x, float border) {
    if (x < -0.5 || y < -0.5 || x > img.w - 0.5 || y > img.h - 0.5) return border;
    int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto px = [&](int yy, int xx) -> double {
        if (xx < 0 || yy < 0 || xx >= img.w || yy >= img.h) return border;
        return img.at(c, yy, xx);
    };
    double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
    double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
    return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace

ImageF resize_bilinear(const ImageF& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: empty output extent");
    ImageF out = ImageF::filled(out_h, out_w, img.channels, 0.0f);
    double sy = static_cast<double>(img.h) / out_h;
    double sx = static_cast<double>(img.w) / out_w;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < out_h; ++y) {
            double src_y = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.h - 1.0);
            for (int x = 0; x < out_w; ++x) {
                double src_x = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.w - 1.0);
                out.at(c, y, x) = sample_bilinear(img, c, src_y, src_x, 0.0f);
            }
        }
    return out;
}

ImageF gaussian_blur(const ImageF& img, double sigma) {
    if (sigma <= 0) return img;
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double total = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        total += kernel[static_cast<size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= total;

    ImageF tmp = ImageF::filled(img.h, img.w, img.channels, 0.0f);
    ImageF out = ImageF::filled(img.h, img.w, img.channels, 0.0f);
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    int xx = std::clamp(x + i, 0, img.w - 1);
                    acc += kernel[static_cast<size_t>(i + radius)] * img.at(c, y, xx);
                }
                tmp.at(c, y, x) = static_cast<float>(acc);
            }
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    int yy = std::clamp(y + i, 0, img.h - 1);
                    acc += kernel[static_cast<size_t>(i + radius)] * tmp.at(c, yy, x);
                }
                out.at(c, y, x) = static_cast<float>(acc);
            }
    }
    return out;
}

ImageF warp_homography(const ImageF& img, const Homography& m, const std::vector<float>& border) {
    ImageF out = ImageF::filled(img.h, img.w, img.channels, 0.0f);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double denom = m[6] * x + m[7] * y + m[8];
            double sx = (m[0] * x + m[1] * y + m[2]) / denom;
            double sy = (m[3] * x + m[4] * y + m[5]) / denom;
            for (int c = 0; c < img.channels; ++c)
                out.at(c, y, x) = sample_bilinear(img, c, sy, sx, border[static_cast<size_t>(c)]);
        }
    return out;
}

Homography fit_homography(const std::array<std::array<double, 2>, 4>& from,
                          const std::array<std::array<double, 2>, 4>& to) {
    // Solve the 8x8 linear system for h with h0..h7, h8 = 1.
    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double x = from[i][0], y = from[i][1];
        double u = to[i][0], v = to[i][1];
        double* r1 = a[2 * i];
        double* r2 = a[2 * i + 1];
        r1[0] = x; r1[1] = y; r1[2] = 1; r1[6] = -u * x; r1[7] = -u * y; r1[8] = u;
        r2[3] = x; r2[4] = y; r2[5] = 1; r2[6] = -v * x; r2[7] = -v * y; r2[8] = v;
    }
    // Gaussian elimination with partial pivoting.
    for (int col = 0; col < 8; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-12)
            throw std::invalid_argument("fit_homography: degenerate point configuration");
        std::swap_ranges(a[col], a[col] + 9, a[pivot]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            double f = a[r][col] / a[col][col];
            for (int k = col; k < 9; ++k) a[r][k] -= f * a[col][k];
        }
    }
    Homography h;
    for (int i = 0; i < 8; ++i) h[static_cast<size_t>(i)] = a[i][8] / a[i][i];
    h[8] = 1.0;
    return h;
}

ImageF warp_displacement(const ImageF& img, const std::vector<float>& dx,
                         const std::vector<float>& dy, const std::vector<float>& border) {
    if (dx.size() != static_cast<size_t>(img.h) * img.w || dx.size() != dy.size())
        throw std::invalid_argument("warp_displacement: field extent mismatch");
    ImageF out = ImageF::filled(img.h, img.w, img.channels, 0.0f);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            size_t i = static_cast<size_t>(y) * img.w + x;
            double sx = x + dx[i], sy = y + dy[i];
            for (int c = 0; c < img.channels; ++c)
                out.at(c, y, x) = sample_bilinear(img, c, sy, sx, border[static_cast<size_t>(c)]);
        }
    return out;
}

ImageF morphology3x3(const ImageF& img, bool dilate) {
    ImageF out = ImageF::filled(img.h, img.w, img.channels, 0.0f);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                float best = img.at(c, y, x);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = std::clamp(y + dy, 0, img.h - 1);
                        int xx = std::clamp(x + dx, 0, img.w - 1);
                        float v = img.at(c, yy, xx);
                        best = dilate ? std::max(best, v) : std::min(best, v);
                    }
                out.at(c, y, x) = best;
            }
    return out;
}

}  // namespace spanocr
