#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "pifs/rng.hpp"
#include "pifs/tensor.hpp"

namespace pifs {

constexpr int kIgnoreIndex = 255;

/// One training example: RGB pixels in [0,1] (C,H,W layout) and a per-pixel
/// class-index mask (255 = ignore).
struct LabeledImage {
    int id = 0;
    std::vector<double> pixels;  // 3*H*W
    std::vector<std::uint8_t> mask;  // H*W
};

struct SegDataset {
    int height = 0;
    int width = 0;
    std::vector<LabeledImage> images;

    std::size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }
};

bool image_contains_class(const LabeledImage& img, int label);

/// Image tensor [3,H,W]; optionally mirrored horizontally.
Tensor image_tensor(const SegDataset& dset, const LabeledImage& img, bool hflip = false);
std::vector<std::uint8_t> mask_of(const SegDataset& dset, const LabeledImage& img, bool hflip);

struct SyntheticSpec {
    int height = 32;
    int width = 32;
    int n_classes = 9;  // background plus shape classes
    int shapes_min = 1;
    int shapes_max = 3;
    int min_pixels_per_shape = 16;
    double color_noise_sigma = 0.05;
    std::uint64_t seed = 1234;
};

/// Base color of a class in RGB; classes beyond the built-in palette cycle
/// with a deterministic offset.
void class_color(const SyntheticSpec& spec, int label, double rgb[3]);

/// Smallest pairwise distance between class colors (used to verify the
/// 6-sigma separation the spec demands).
double palette_min_separation(const SyntheticSpec& spec);

LabeledImage generate_image(const SyntheticSpec& spec, int id,
                            const std::set<int>& allowed_classes);

/// n_images images with ids [id_offset, id_offset+n); each image depends only
/// on (spec.seed, id), so generation order and slicing do not matter.
SegDataset generate_dataset(const SyntheticSpec& spec, int n_images,
                            const std::set<int>& allowed_classes, int id_offset = 0);

/// True when a nearest-centroid rule on raw pixel colors reaches >= 99% pixel
/// accuracy on a 100-image probe set.
bool class_separability_check(const SyntheticSpec& spec);

// Binary PPM (P6) / PGM (P5), maxval 255. Images quantize by x255 rounding.
void write_ppm(const std::string& path, int height, int width,
               const std::vector<double>& pixels);
std::vector<double> read_ppm(const std::string& path, int& height, int& width);
void write_pgm(const std::string& path, int height, int width,
               const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& height, int& width);

/// Manifest: one line per image, `id<TAB>image_path<TAB>mask_path`, LF.
void write_manifest(const std::string& path,
                    const std::vector<std::tuple<int, std::string, std::string>>& rows);
std::vector<std::tuple<int, std::string, std::string>> read_manifest(const std::string& path);

SegDataset load_dataset(const std::string& manifest_path);

}  // namespace pifs
