#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hydra/dataset.hpp"
#include "hydra/errors.hpp"
#include "hydra/image_io.hpp"
#include "hydra/rng.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

/// Synthetic asymmetric-forgery benchmark. Real images are smooth
/// low-frequency textures drawn from one family. Each fake family is a
/// real base plus one procedural high-frequency artifact; families have
/// deliberately distinct spatial signatures so that forgery sources
/// scatter while the real distribution stays unified. A seen/unseen
/// split of the families gives an out-of-distribution test.
struct GenSpec {
    int image_size = 32;
    std::vector<std::string> families = {"checker", "sine", "smooth", "salt", "ringing"};
    int seen = 3;  // first `seen` families appear in the training split
    double amplitude = 0.18;
    int train_real = 200;
    int train_per_family = 200;
    int test_per_subset = 100;
    double hf_margin = 0.01;  // required high-frequency energy gap

    void validate() const {
        if (image_size < 8) throw ConfigError("gen: image size too small");
        if (families.size() < 3) throw ConfigError("gen: need at least 3 fake families");
        if (seen < 1 || seen >= static_cast<int>(families.size())) {
            throw ConfigError("gen: seen family count must leave at least one unseen family");
        }
        if (amplitude <= 0.0) throw ConfigError("gen: artifact amplitude must be positive");
        if (train_real < 1 || train_per_family < 1 || test_per_subset < 1) {
            throw ConfigError("gen: counts must be >= 1");
        }
    }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t subset, std::uint64_t index) {
    std::uint64_t x = seed ^ (subset * 0x9E3779B97F4A7C15ull) ^ (index * 0xBF58476D1CE4E5B9ull);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

/// Real-family texture: long-wavelength cosine waves with correlated
/// channels, overlaid with consistent fine grain. The grain gives every
/// real image a unified mid/high-frequency signature that forgeries
/// disturb in one direction or the other (added artifacts raise it,
/// oversmoothing removes it).
inline Tensor real_texture(Rng& rng, int size) {
    const std::size_t s = static_cast<std::size_t>(size);
    Tensor img(Shape{s, s, 3});
    const int waves = 3;
    double fx[waves], fy[waves], phase[waves], amp[waves];
    for (int k = 0; k < waves; ++k) {
        fx[k] = static_cast<double>(rng.index(3));  // wavelengths >= size/2
        fy[k] = static_cast<double>(rng.index(3));
        if (fx[k] == 0.0 && fy[k] == 0.0) fx[k] = 1.0;
        phase[k] = rng.uniform(0.0, 6.283185307179586);
        amp[k] = rng.uniform(0.08, 0.14);
    }
    // fine grain, identical for every real image up to phase: the
    // "unified physics" signature that forgeries either bury or remove
    const int grains = 2;
    const double grain_angles[grains] = {0.6108652381980153, 2.181661564992912};  // 35, 125 deg
    const double grain_wavelength = 3.0;
    double gfx[grains], gfy[grains], gphase[grains];
    for (int k = 0; k < grains; ++k) {
        gfx[k] = std::cos(grain_angles[k]) / grain_wavelength;
        gfy[k] = std::sin(grain_angles[k]) / grain_wavelength;
        gphase[k] = rng.uniform(0.0, 6.283185307179586);
    }
    const double grain_amp = 0.15;
    double gain[3];
    for (auto& gc : gain) gc = rng.uniform(0.8, 1.0);
    const double base = rng.uniform(0.4, 0.6);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            double v = 0.0;
            for (int k = 0; k < waves; ++k) {
                v += amp[k] * std::cos(6.283185307179586 *
                                           (fx[k] * static_cast<double>(x) +
                                            fy[k] * static_cast<double>(y)) /
                                           static_cast<double>(size) +
                                       phase[k]);
            }
            double grain = 0.0;
            for (int k = 0; k < grains; ++k) {
                grain += grain_amp * std::cos(6.283185307179586 *
                                                  (gfx[k] * static_cast<double>(x) +
                                                   gfy[k] * static_cast<double>(y)) +
                                              gphase[k]);
            }
            for (std::size_t c = 0; c < 3; ++c) {
                double px = base + gain[c] * v + grain;
                img[(y * s + x) * 3 + c] = px < 0.0 ? 0.0 : (px > 1.0 ? 1.0 : px);
            }
        }
    }
    return img;
}

inline void clamp01(Tensor& img) {
    for (std::size_t i = 0; i < img.numel(); ++i) {
        img[i] = img[i] < 0.0 ? 0.0 : (img[i] > 1.0 ? 1.0 : img[i]);
    }
}

inline void add_checker(Tensor& img, Rng& rng, double amp) {
    const std::size_t s = img.shape()[0];
    const double sign0 = rng.index(2) == 0 ? 1.0 : -1.0;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double v = sign0 * (((x + y) % 2 == 0) ? amp : -amp);
            for (std::size_t c = 0; c < 3; ++c) img[(y * s + x) * 3 + c] += v;
        }
    }
    clamp01(img);
}

inline void add_sine(Tensor& img, Rng& rng, double amp) {
    const std::size_t s = img.shape()[0];
    // short-wavelength plane wave; orientation and wavelength vary per
    // image so the family spans the whole band of wave-like artifacts
    const double angle = rng.uniform(0.0, 3.141592653589793);
    const double wavelength = rng.uniform(2.5, 4.0);
    const double ux = std::cos(angle) / wavelength, uy = std::sin(angle) / wavelength;
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double v = amp * std::sin(6.283185307179586 *
                                                (ux * static_cast<double>(x) +
                                                 uy * static_cast<double>(y)) +
                                            phase);
            for (std::size_t c = 0; c < 3; ++c) img[(y * s + x) * 3 + c] += v;
        }
    }
    clamp01(img);
}

inline void add_salt(Tensor& img, Rng& rng, double amp) {
    const std::size_t s = img.shape()[0];
    const std::size_t impulses = (s * s) / 5;
    for (std::size_t k = 0; k < impulses; ++k) {
        const std::size_t y = rng.index(s), x = rng.index(s);
        const double v = rng.index(2) == 0 ? 2.0 * amp : -2.0 * amp;
        for (std::size_t c = 0; c < 3; ++c) img[(y * s + x) * 3 + c] += v;
    }
    clamp01(img);
}

// Block quantization with a superimposed cell grid: the flattened
// blocks plus boundary lines guarantee edge energy even when the base
// texture quantizes to a flat field.
inline void add_blocky(Tensor& img, Rng&, double amp) {
    const std::size_t s = img.shape()[0];
    const std::size_t cell = 2;
    const double levels = 3.0;
    for (std::size_t by = 0; by < s; by += cell) {
        for (std::size_t bx = 0; bx < s; bx += cell) {
            for (std::size_t c = 0; c < 3; ++c) {
                double mean = 0.0;
                for (std::size_t y = by; y < by + cell; ++y) {
                    for (std::size_t x = bx; x < bx + cell; ++x) {
                        mean += img[(y * s + x) * 3 + c];
                    }
                }
                mean /= static_cast<double>(cell * cell);
                const double q = std::round(mean * levels) / levels;
                for (std::size_t y = by; y < by + cell; ++y) {
                    for (std::size_t x = bx; x < bx + cell; ++x) {
                        const bool grid = (y % cell == 0) || (x % cell == 0);
                        img[(y * s + x) * 3 + c] = q - (grid ? 0.5 * amp : 0.0);
                    }
                }
            }
        }
    }
    clamp01(img);
}

inline void add_ringing(Tensor& img, Rng& rng, double amp) {
    const std::size_t s = img.shape()[0];
    const int centers = 2;
    for (int k = 0; k < centers; ++k) {
        const double cy = rng.uniform(0.0, static_cast<double>(s));
        const double cx = rng.uniform(0.0, static_cast<double>(s));
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const double dy = static_cast<double>(y) - cy;
                const double dx = static_cast<double>(x) - cx;
                const double r = std::sqrt(dx * dx + dy * dy);
                const double v = 1.2 * amp * std::sin(6.283185307179586 * r / 3.0);
                for (std::size_t c = 0; c < 3; ++c) img[(y * s + x) * 3 + c] += v;
            }
        }
    }
    clamp01(img);
}

// Over-smoothing forgery: a blended box blur strips the grain the real
// family always carries, leaving the image "too clean".
inline void add_smooth(Tensor& img, Rng&, double amp) {
    const std::size_t s = img.shape()[0];
    const double w = std::min(1.0, 4.0 * amp);
    Tensor blurred = img;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double sum = 0.0;
                int count = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const long yy = static_cast<long>(y) + dy;
                        const long xx = static_cast<long>(x) + dx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<long>(s) ||
                            xx >= static_cast<long>(s)) {
                            continue;
                        }
                        sum += img[(static_cast<std::size_t>(yy) * s +
                                    static_cast<std::size_t>(xx)) *
                                       3 +
                                   c];
                        ++count;
                    }
                }
                blurred[(y * s + x) * 3 + c] = sum / count;
            }
        }
    }
    for (std::size_t i = 0; i < img.numel(); ++i) {
        img[i] = (1.0 - w) * img[i] + w * blurred[i];
    }
    clamp01(img);
}

inline void apply_artifact(const std::string& family, Tensor& img, Rng& rng, double amp) {
    if (family == "checker") return add_checker(img, rng, amp);
    if (family == "sine") return add_sine(img, rng, amp);
    if (family == "smooth") return add_smooth(img, rng, amp);
    if (family == "salt") return add_salt(img, rng, amp);
    if (family == "blocky") return add_blocky(img, rng, amp);
    if (family == "ringing") return add_ringing(img, rng, amp);
    throw ConfigError("unknown fake family: " + family);
}

}  // namespace detail

/// Mean squared 4-neighbour Laplacian over interior pixels: a crude but
/// monotone proxy for high-frequency energy.
inline double hf_energy(const Tensor& img) {
    const std::size_t h = img.shape()[0], w = img.shape()[1], c = img.shape()[2];
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 1; y + 1 < h; ++y) {
        for (std::size_t x = 1; x + 1 < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double lap = 4.0 * img[(y * w + x) * c + ch] -
                                   img[((y - 1) * w + x) * c + ch] -
                                   img[((y + 1) * w + x) * c + ch] -
                                   img[(y * w + (x - 1)) * c + ch] -
                                   img[(y * w + (x + 1)) * c + ch];
                sum += lap * lap;
                ++count;
            }
        }
    }
    return sum / static_cast<double>(count);
}

/// Deterministically generate one sample of a subset. Subset index 0 is
/// the real family; fake family f uses subset index f + 1. Artifact
/// strength varies per image so each family spans faint through blatant
/// forgeries.
inline Tensor generate_image(const GenSpec& spec, std::uint64_t seed, std::size_t subset_index,
                             std::size_t image_index) {
    Rng rng(detail::mix_seed(seed, subset_index, image_index));
    Tensor img = detail::real_texture(rng, spec.image_size);
    if (subset_index > 0) {
        const double strength = spec.amplitude * rng.uniform(0.6, 1.25);
        detail::apply_artifact(spec.families[subset_index - 1], img, rng, strength);
    }
    return img;
}

struct GeneratedDataset {
    DatasetManifest train;
    DatasetManifest test;
    std::vector<double> family_hf;  // mean high-frequency energy per family (test split)
    double real_hf = 0.0;
};

/// Write the benchmark to <root>/train and <root>/test. The train split
/// holds the real family plus the seen fake families; the test split
/// holds everything. Byte-identical output for identical seeds.
inline GeneratedDataset gen_dataset(const GenSpec& spec, std::uint64_t seed,
                                    const std::string& root, bool force = false) {
    spec.validate();
    namespace fs = std::filesystem;
    for (const char* split : {"train", "test"}) {
        const fs::path dir = fs::path(root) / split;
        if (fs::exists(dir) && !fs::is_empty(dir)) {
            if (!force) {
                throw OutputExistsError("refusing to overwrite non-empty " + dir.string() +
                                        " (pass --force to allow)");
            }
            fs::remove_all(dir);
        }
    }

    GeneratedDataset out;
    const std::uint64_t test_salt = 0x7E57DA7Aull;  // disjoint stream from the train split

    auto write_subset = [&](const std::string& split, const std::string& name,
                            std::size_t subset_index, int count, int label,
                            std::uint64_t salt) -> double {
        const fs::path dir = fs::path(root) / split / name;
        fs::create_directories(dir);
        double hf_sum = 0.0;
        for (int i = 0; i < count; ++i) {
            const Tensor img =
                generate_image(spec, seed ^ salt, subset_index, static_cast<std::size_t>(i));
            hf_sum += hf_energy(img);
            char fname[32];
            std::snprintf(fname, sizeof(fname), "img_%05d.ppm", i);
            write_ppm((dir / fname).string(), img);
        }
        DatasetManifest& m = split == "train" ? out.train : out.test;
        m.subsets.push_back({name, label, count});
        return hf_sum / static_cast<double>(count);
    };

    out.train.root = (fs::path(root) / "train").string();
    out.train.seed = seed;
    out.test.root = (fs::path(root) / "test").string();
    out.test.seed = seed;

    write_subset("train", "real", 0, spec.train_real, 0, 0);
    for (int f = 0; f < spec.seen; ++f) {
        write_subset("train", "fake_" + spec.families[static_cast<std::size_t>(f)],
                     static_cast<std::size_t>(f) + 1, spec.train_per_family, 1, 0);
    }
    out.real_hf = write_subset("test", "real", 0, spec.test_per_subset, 0, test_salt);
    for (std::size_t f = 0; f < spec.families.size(); ++f) {
        out.family_hf.push_back(write_subset("test", "fake_" + spec.families[f], f + 1,
                                             spec.test_per_subset, 1, test_salt));
    }

    // generator self-check: every family must clear the margin (in
    // either direction: artifacts add energy, oversmoothing removes it)
    for (std::size_t f = 0; f < spec.families.size(); ++f) {
        const double gap = std::fabs(out.family_hf[f] - out.real_hf);
        if (gap < spec.hf_margin) {
            throw NumericError("generator self-check failed: family " + spec.families[f] +
                               " high-frequency gap " + std::to_string(gap) + " below margin " +
                               std::to_string(spec.hf_margin));
        }
    }

    save_manifest(out.train);
    save_manifest(out.test);
    return out;
}

}  // namespace hydra
