#include "pifs/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pifs {

namespace {

// Palette chosen so pairwise RGB distances stay >= 0.3 (6 sigma at the
// default noise level). Index 0 is the background.
constexpr double kPalette[][3] = {
    {0.10, 0.10, 0.10},  // background
    {0.90, 0.10, 0.10},  // red
    {0.10, 0.80, 0.10},  // green
    {0.15, 0.25, 0.90},  // blue
    {0.90, 0.85, 0.10},  // yellow
    {0.80, 0.10, 0.80},  // magenta
    {0.10, 0.80, 0.80},  // cyan
    {0.95, 0.50, 0.10},  // orange
    {0.90, 0.90, 0.90},  // near white
    {0.50, 0.10, 0.50},  // plum
    {0.10, 0.45, 0.10},  // dark green
    {0.55, 0.35, 0.10},  // brown
};
constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));

}  // namespace

bool image_contains_class(const LabeledImage& img, int label) {
    for (std::uint8_t v : img.mask)
        if (v == label) return true;
    return false;
}

Tensor image_tensor(const SegDataset& dset, const LabeledImage& img, bool hflip) {
    const int h = dset.height, w = dset.width;
    if (!hflip) return Tensor::from_data({3, h, w}, img.pixels);
    std::vector<double> flipped(img.pixels.size());
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                flipped[(c * h + y) * w + x] = img.pixels[(c * h + y) * w + (w - 1 - x)];
    return Tensor::from_data({3, h, w}, std::move(flipped));
}

std::vector<std::uint8_t> mask_of(const SegDataset& dset, const LabeledImage& img, bool hflip) {
    if (!hflip) return img.mask;
    const int h = dset.height, w = dset.width;
    std::vector<std::uint8_t> flipped(img.mask.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) flipped[y * w + x] = img.mask[y * w + (w - 1 - x)];
    return flipped;
}

void class_color(const SyntheticSpec& spec, int label, double rgb[3]) {
    (void)spec;
    const int idx = label % kPaletteSize;
    rgb[0] = kPalette[idx][0];
    rgb[1] = kPalette[idx][1];
    rgb[2] = kPalette[idx][2];
}

double palette_min_separation(const SyntheticSpec& spec) {
    double best = HUGE_VAL;
    for (int a = 0; a < spec.n_classes; ++a)
        for (int b = a + 1; b < spec.n_classes; ++b) {
            double ca[3], cb[3];
            class_color(spec, a, ca);
            class_color(spec, b, cb);
            const double d = std::sqrt((ca[0] - cb[0]) * (ca[0] - cb[0]) +
                                       (ca[1] - cb[1]) * (ca[1] - cb[1]) +
                                       (ca[2] - cb[2]) * (ca[2] - cb[2]));
            best = std::min(best, d);
        }
    return best;
}

namespace {

enum class ShapeKind { Rect, Circle, Triangle };

ShapeKind kind_of_class(int label) {
    switch ((label - 1) % 3) {
        case 0: return ShapeKind::Rect;
        case 1: return ShapeKind::Circle;
        default: return ShapeKind::Triangle;
    }
}

int rand_range(Rng& rng, int lo, int hi) {  // inclusive, hi clamped to lo
    if (hi < lo) hi = lo;
    return lo + static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

// Paints candidate pixels of one shape instance; returns them without
// touching the mask so the caller can reject overlaps. Size ranges adapt to
// the canvas so small test images stay placeable.
std::vector<int> rasterize_shape(const SyntheticSpec& spec, ShapeKind kind, Rng& rng) {
    const int h = spec.height, w = spec.width;
    const int min_dim = std::min(h, w);
    std::vector<int> pix;
    switch (kind) {
        case ShapeKind::Rect: {
            const int hi = std::min(3 * min_dim / 8, min_dim - 2);
            const int rw = rand_range(rng, 4, hi);
            const int rh = rand_range(rng, 4, hi);
            if (rw > w || rh > h) return pix;
            const int x0 = rand_range(rng, 0, w - rw);
            const int y0 = rand_range(rng, 0, h - rh);
            for (int y = y0; y < y0 + rh; ++y)
                for (int x = x0; x < x0 + rw; ++x) pix.push_back(y * w + x);
            break;
        }
        case ShapeKind::Circle: {
            const int lo = min_dim >= 14 ? 3 : 2;
            const int r = rand_range(rng, lo, std::max(lo, 3 * min_dim / 16));
            if (2 * r + 1 > min_dim) return pix;
            const int cx = rand_range(rng, r, w - 1 - r);
            const int cy = rand_range(rng, r, h - 1 - r);
            for (int y = cy - r; y <= cy + r; ++y)
                for (int x = cx - r; x <= cx + r; ++x)
                    if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
                        pix.push_back(y * w + x);
            break;
        }
        case ShapeKind::Triangle: {
            const int base = rand_range(rng, std::min(8, min_dim - 1),
                                        std::min(min_dim / 2, min_dim - 1));
            const int height = rand_range(rng, std::min(7, min_dim - 1),
                                          std::min(3 * min_dim / 8, min_dim - 1));
            if (base > w || height > h) return pix;
            const int x0 = rand_range(rng, 0, w - base);
            const int y0 = rand_range(rng, 0, h - height);
            // isoceles, apex up
            for (int dy = 0; dy < height; ++dy) {
                const double frac = static_cast<double>(dy) / height;
                const int half = static_cast<int>(std::floor(frac * base / 2.0));
                const int cx = x0 + base / 2;
                for (int x = cx - half; x <= cx + half; ++x)
                    pix.push_back((y0 + dy) * w + x);
            }
            break;
        }
    }
    return pix;
}

}  // namespace

LabeledImage generate_image(const SyntheticSpec& spec, int id,
                            const std::set<int>& allowed_classes) {
    for (int label : allowed_classes)
        if (label <= 0 || label >= spec.n_classes)
            throw std::invalid_argument("generate: class " + std::to_string(label) +
                                        " outside declared range 1.." +
                                        std::to_string(spec.n_classes - 1));

    const int h = spec.height, w = spec.width;
    Rng rng(mix_seed(spec.seed, 0x646174u, static_cast<std::uint64_t>(id)));

    LabeledImage img;
    img.id = id;
    img.mask.assign(static_cast<std::size_t>(h) * w, 0);

    if (!allowed_classes.empty()) {
        const std::vector<int> classes(allowed_classes.begin(), allowed_classes.end());
        const int span = spec.shapes_max - spec.shapes_min + 1;
        const int instances =
            spec.shapes_min + static_cast<int>(rand_below(rng, static_cast<std::uint64_t>(span)));
        // Scenes cluster around one primary class; other classes co-occur
        // rarely, like objects in natural segmentation pools.
        const int primary = classes[rand_below(rng, classes.size())];
        for (int inst = 0; inst < instances; ++inst) {
            const int label = rand_unit(rng) < 0.8
                                  ? primary
                                  : classes[rand_below(rng, classes.size())];
            bool placed = false;
            for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
                const std::vector<int> pix = rasterize_shape(spec, kind_of_class(label), rng);
                if (static_cast<int>(pix.size()) < spec.min_pixels_per_shape) continue;
                bool overlaps = false;
                for (int p : pix) overlaps = overlaps || img.mask[p] != 0;
                if (overlaps) continue;
                for (int p : pix) img.mask[p] = static_cast<std::uint8_t>(label);
                placed = true;
            }
            if (!placed)
                throw std::runtime_error(
                    "generate: shape placement exceeded 1000 attempts (image " +
                    std::to_string(id) + ", class " + std::to_string(label) +
                    "); spec over-constrained");
        }
    }

    img.pixels.resize(3 * static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double rgb[3];
            class_color(spec, img.mask[y * w + x], rgb);
            for (int c = 0; c < 3; ++c) {
                const double v = rgb[c] + spec.color_noise_sigma * rand_normal(rng);
                img.pixels[(c * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
            }
        }
    return img;
}

SegDataset generate_dataset(const SyntheticSpec& spec, int n_images,
                            const std::set<int>& allowed_classes, int id_offset) {
    SegDataset dset;
    dset.height = spec.height;
    dset.width = spec.width;
    dset.images.reserve(static_cast<std::size_t>(n_images));
    for (int i = 0; i < n_images; ++i)
        dset.images.push_back(generate_image(spec, id_offset + i, allowed_classes));
    return dset;
}

bool class_separability_check(const SyntheticSpec& spec) {
    std::set<int> all;
    for (int c = 1; c < spec.n_classes; ++c) all.insert(c);
    // probe ids live far from any training/validation range
    const int probe_offset = 1 << 24;
    std::size_t correct = 0, total = 0;
    for (int i = 0; i < 100; ++i) {
        const LabeledImage img = generate_image(spec, probe_offset + i, all);
        const std::size_t pixels = img.mask.size();
        for (std::size_t p = 0; p < pixels; ++p) {
            double best = HUGE_VAL;
            int best_class = -1;
            for (int c = 0; c < spec.n_classes; ++c) {
                double rgb[3];
                class_color(spec, c, rgb);
                double d = 0.0;
                for (int ch = 0; ch < 3; ++ch) {
                    const double diff = img.pixels[ch * pixels + p] - rgb[ch];
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    best_class = c;
                }
            }
            correct += best_class == img.mask[p];
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total) >= 0.99;
}

// --- PPM / PGM ---

namespace {

struct PnmReader {
    std::string data;
    std::size_t pos = 0;
    std::string path;

    [[noreturn]] void fail_at(const std::string& what) const {
        throw std::runtime_error(path + ": " + what + " at byte offset " + std::to_string(pos));
    }
    int parse_int(const char* what) {
        while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
        if (pos >= data.size() || !std::isdigit(static_cast<unsigned char>(data[pos])))
            fail_at(std::string("malformed header: expected ") + what);
        long v = 0;
        while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
            v = v * 10 + (data[pos] - '0');
            ++pos;
        }
        return static_cast<int>(v);
    }
};

std::string read_file(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error(path + ": cannot open");
    std::ostringstream buf;
    buf << file.rdbuf();
    return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw std::runtime_error(path + ": cannot open for writing");
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw std::runtime_error(path + ": write failed");
}

std::string payload_of(const char* magic, const std::string& path, int& height, int& width,
                       std::size_t bytes_per_pixel) {
    PnmReader r{read_file(path), 0, path};
    if (r.data.size() < 2 || r.data[0] != magic[0] || r.data[1] != magic[1])
        r.fail_at(std::string("malformed header: expected magic ") + magic);
    r.pos = 2;
    width = r.parse_int("width");
    height = r.parse_int("height");
    const int maxval = r.parse_int("maxval");
    if (maxval != 255) r.fail_at("unsupported maxval " + std::to_string(maxval));
    if (r.pos >= r.data.size() || !std::isspace(static_cast<unsigned char>(r.data[r.pos])))
        r.fail_at("malformed header: expected whitespace before payload");
    ++r.pos;
    const std::size_t need = static_cast<std::size_t>(height) * width * bytes_per_pixel;
    if (r.data.size() - r.pos < need) {
        r.pos = r.data.size();
        r.fail_at("truncated payload");
    }
    return r.data.substr(r.pos, need);
}

}  // namespace

void write_ppm(const std::string& path, int height, int width,
               const std::vector<double>& pixels) {
    if (pixels.size() != 3 * static_cast<std::size_t>(height) * width)
        throw std::invalid_argument(path + ": pixel buffer does not match dimensions");
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) {
            const double v = std::clamp(pixels[c * plane + p], 0.0, 1.0);
            out.push_back(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
        }
    write_file(path, out);
}

std::vector<double> read_ppm(const std::string& path, int& height, int& width) {
    const std::string payload = payload_of("P6", path, height, width, 3);
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    std::vector<double> pixels(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            pixels[c * plane + p] =
                static_cast<double>(static_cast<unsigned char>(payload[p * 3 + c])) / 255.0;
    return pixels;
}

void write_pgm(const std::string& path, int height, int width,
               const std::vector<std::uint8_t>& mask) {
    if (mask.size() != static_cast<std::size_t>(height) * width)
        throw std::invalid_argument(path + ": mask buffer does not match dimensions");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(mask.data()), mask.size());
    write_file(path, out);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& height, int& width) {
    const std::string payload = payload_of("P5", path, height, width, 1);
    return std::vector<std::uint8_t>(payload.begin(), payload.end());
}

void write_manifest(const std::string& path,
                    const std::vector<std::tuple<int, std::string, std::string>>& rows) {
    std::string out;
    for (const auto& [id, img, mask] : rows)
        out += std::to_string(id) + "\t" + img + "\t" + mask + "\n";
    write_file(path, out);
}

std::vector<std::tuple<int, std::string, std::string>> read_manifest(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw std::runtime_error(path + ": cannot open");
    std::vector<std::tuple<int, std::string, std::string>> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(file, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::size_t t1 = line.find('\t');
        const std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw std::runtime_error(path + ": malformed manifest line " +
                                     std::to_string(line_no));
        rows.emplace_back(std::stoi(line.substr(0, t1)), line.substr(t1 + 1, t2 - t1 - 1),
                          line.substr(t2 + 1));
    }
    return rows;
}

SegDataset load_dataset(const std::string& manifest_path) {
    const auto rows = read_manifest(manifest_path);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    SegDataset dset;
    for (const auto& [id, img_rel, mask_rel] : rows) {
        LabeledImage img;
        img.id = id;
        int h = 0, w = 0;
        img.pixels = read_ppm((base / img_rel).string(), h, w);
        int mh = 0, mw = 0;
        img.mask = read_pgm((base / mask_rel).string(), mh, mw);
        if (mh != h || mw != w)
            throw std::runtime_error(manifest_path + ": image/mask size mismatch for id " +
                                     std::to_string(id));
        if (dset.images.empty()) {
            dset.height = h;
            dset.width = w;
        } else if (dset.height != h || dset.width != w) {
            throw std::runtime_error(manifest_path + ": inconsistent image sizes");
        }
        dset.images.push_back(std::move(img));
    }
    return dset;
}

}  // namespace pifs
