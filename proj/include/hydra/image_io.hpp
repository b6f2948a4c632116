#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hydra/errors.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

/// Binary portable pixmap IO (P6, maxval 255). Chosen as the dataset
/// format because it round-trips bit-exactly with zero dependencies.

inline void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.shape()[2] != 3) {
        throw ShapeError("write_ppm: expected [HxWx3] image, got " + shape_str(image.shape()));
    }
    const std::size_t h = image.shape()[0], w = image.shape()[1];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("write_ppm: cannot open " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w * 3; ++x) {
            double v = image[y * w * 3 + x];
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            row[x] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw FormatError("write_ppm: short write to " + path);
}

namespace detail {

// PPM token reader: skips whitespace and '#' comments.
inline std::string ppm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("read_ppm: cannot open " + path);

    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') {
        throw FormatError("read_ppm: " + path + ": unsupported format (expected P6)");
    }
    const std::string ws = detail::ppm_token(in);
    const std::string hs = detail::ppm_token(in);
    const std::string ms = detail::ppm_token(in);
    std::size_t w = 0, h = 0;
    long maxval = -1;
    try {
        w = static_cast<std::size_t>(std::stoul(ws));
        h = static_cast<std::size_t>(std::stoul(hs));
        maxval = std::stol(ms);
    } catch (const std::exception&) {
        throw FormatError("read_ppm: " + path + ": malformed header");
    }
    if (w == 0 || h == 0 || maxval != 255) {
        throw FormatError("read_ppm: " + path + ": unsupported geometry or maxval");
    }

    std::vector<unsigned char> bytes(w * h * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
        throw TruncationError("read_ppm: " + path + ": truncated pixel payload");
    }
    Tensor image(Shape{h, w, 3});
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        image[i] = static_cast<double>(bytes[i]) / 255.0;
    }
    return image;
}

/// Bilinear resize to resize_to, then center crop to crop_to. No other
/// augmentation is applied anywhere in the pipeline.
inline Tensor preprocess(const Tensor& image, int resize_to, int crop_to) {
    if (image.rank() != 3) {
        throw ShapeError("preprocess: expected [HxWxC] image, got " + shape_str(image.shape()));
    }
    if (crop_to > resize_to) {
        throw ConfigError("preprocess: crop " + std::to_string(crop_to) + " exceeds resize " +
                          std::to_string(resize_to));
    }
    const std::size_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
    const std::size_t r = static_cast<std::size_t>(resize_to);

    Tensor resized(Shape{r, r, c});
    if (r == h && r == w) {
        resized = image;
    } else {
        const double sy = static_cast<double>(h) / static_cast<double>(r);
        const double sx = static_cast<double>(w) / static_cast<double>(r);
        for (std::size_t y = 0; y < r; ++y) {
            double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
            fy = std::max(0.0, std::min(fy, static_cast<double>(h - 1)));
            const std::size_t y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::size_t x = 0; x < r; ++x) {
                double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                fx = std::max(0.0, std::min(fx, static_cast<double>(w - 1)));
                const std::size_t x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - static_cast<double>(x0);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double v00 = image[(y0 * w + x0) * c + ch];
                    const double v01 = image[(y0 * w + x1) * c + ch];
                    const double v10 = image[(y1 * w + x0) * c + ch];
                    const double v11 = image[(y1 * w + x1) * c + ch];
                    resized[(y * r + x) * c + ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) +
                                                    wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
    }

    const std::size_t k = static_cast<std::size_t>(crop_to);
    if (k == r) return resized;
    const std::size_t off = (r - k) / 2;
    Tensor cropped(Shape{k, k, c});
    for (std::size_t y = 0; y < k; ++y) {
        for (std::size_t x = 0; x < k; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                cropped[(y * k + x) * c + ch] = resized[((y + off) * r + (x + off)) * c + ch];
            }
        }
    }
    return cropped;
}

}  // namespace hydra
