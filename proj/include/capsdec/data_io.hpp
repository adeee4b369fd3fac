#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "capsdec/capsnet.hpp"
#include "capsdec/errors.hpp"
#include "capsdec/rng.hpp"

namespace capsdec {

// Paired (stimulus image, voxel vector, label) samples with optional fold
// assignments. Synthetic datasets keep the planted signal voxel indices.
struct VoxelDataset {
    int64_t image_h = 28, image_w = 28;
    int64_t voxel_count = 0;
    std::vector<float> images;  // n x (h*w)
    std::vector<float> voxels;  // n x voxel_count
    std::vector<int> labels;
    std::vector<int> folds;  // empty until assigned
    std::string provenance = "real";
    std::vector<int64_t> signal_voxels;  // synthetic only

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    int64_t pixels() const { return image_h * image_w; }
    const float* image(int64_t i) const { return images.data() + i * pixels(); }
    const float* voxel_row(int64_t i) const { return voxels.data() + i * voxel_count; }
};

struct SynthConfig {
    int64_t signal_count = 100;
    double noise_sigma = 0.25;
    uint64_t seed = 0;
    int64_t total_voxels = 3092;
};

namespace detail {

inline uint32_t read_be_u32(std::istream& is, const std::string& path, int64_t offset) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4)
        throw FormatError("IDX file '" + path + "' truncated at offset " + std::to_string(offset));
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

inline void write_be_u32(std::ostream& os, uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// IDX-format MNIST pair: images magic 0x00000803, labels magic 0x00000801,
// big-endian dimensions, raw bytes. Pixels are scaled to [0,1] by /255.
inline ImageDataset<float> load_mnist(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw FormatError("cannot open IDX image file '" + images_path + "'");
    const uint32_t img_magic = detail::read_be_u32(imgs, images_path, 0);
    if (img_magic != 0x00000803)
        throw FormatError("IDX file '" + images_path + "' has magic " + std::to_string(img_magic) +
                          " at offset 0, expected 2051 (0x00000803)");
    const uint32_t count = detail::read_be_u32(imgs, images_path, 4);
    const uint32_t rows = detail::read_be_u32(imgs, images_path, 8);
    const uint32_t cols = detail::read_be_u32(imgs, images_path, 12);

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw FormatError("cannot open IDX label file '" + labels_path + "'");
    const uint32_t lab_magic = detail::read_be_u32(labs, labels_path, 0);
    if (lab_magic != 0x00000801)
        throw FormatError("IDX file '" + labels_path + "' has magic " + std::to_string(lab_magic) +
                          " at offset 0, expected 2049 (0x00000801)");
    const uint32_t lab_count = detail::read_be_u32(labs, labels_path, 4);
    if (lab_count != count)
        throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                          std::to_string(lab_count) + " labels");

    ImageDataset<float> ds;
    ds.height = rows;
    ds.width = cols;
    const size_t npix = static_cast<size_t>(count) * rows * cols;
    std::vector<unsigned char> raw(npix);
    imgs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(npix));
    if (static_cast<size_t>(imgs.gcount()) != npix)
        throw FormatError("IDX file '" + images_path + "' truncated at offset " +
                          std::to_string(16 + imgs.gcount()));
    ds.pixels.resize(npix);
    for (size_t i = 0; i < npix; ++i) ds.pixels[i] = static_cast<float>(raw[i]) / 255.0f;

    std::vector<unsigned char> lraw(count);
    labs.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(count));
    if (static_cast<size_t>(labs.gcount()) != count)
        throw FormatError("IDX file '" + labels_path + "' truncated at offset " +
                          std::to_string(8 + labs.gcount()));
    ds.labels.assign(lraw.begin(), lraw.end());
    return ds;
}

// Writer for the same layout; pixels are rounded back to bytes.
inline void save_mnist(const std::string& images_path, const std::string& labels_path,
                       const ImageDataset<float>& ds) {
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw FormatError("cannot open '" + images_path + "' for writing");
    detail::write_be_u32(imgs, 0x00000803);
    detail::write_be_u32(imgs, static_cast<uint32_t>(ds.size()));
    detail::write_be_u32(imgs, static_cast<uint32_t>(ds.height));
    detail::write_be_u32(imgs, static_cast<uint32_t>(ds.width));
    std::vector<unsigned char> raw(ds.pixels.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, ds.pixels[i]));
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    imgs.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));

    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw FormatError("cannot open '" + labels_path + "' for writing");
    detail::write_be_u32(labs, 0x00000801);
    detail::write_be_u32(labs, static_cast<uint32_t>(ds.size()));
    for (int lab : ds.labels) labs.put(static_cast<char>(lab));
}

// ---- fMRI CSV ----------------------------------------------------------------
//
// Header row declares the layout: "label,pixels=784,voxels=<V>". Each data
// row is label, 784 pixel values, V voxel values. Floats print with %.9g so
// a write/read round trip reproduces float32 values exactly.

inline void write_fmri_csv(const std::string& path, const VoxelDataset& ds) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os << "label,pixels=" << ds.pixels() << ",voxels=" << ds.voxel_count << "\n";
    char buf[32];
    for (int64_t i = 0; i < ds.size(); ++i) {
        os << ds.labels[static_cast<size_t>(i)];
        const float* img = ds.image(i);
        for (int64_t j = 0; j < ds.pixels(); ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(img[j]));
            os << ',' << buf;
        }
        const float* vox = ds.voxel_row(i);
        for (int64_t j = 0; j < ds.voxel_count; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(vox[j]));
            os << ',' << buf;
        }
        os << "\n";
    }
    if (!os) throw FormatError("write failed for '" + path + "'");
}

inline VoxelDataset load_fmri_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open fMRI CSV '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line.empty()) throw FormatError("fMRI CSV '" + path + "' is empty");

    int64_t pixels = 0, voxel_count = 0;
    if (std::sscanf(line.c_str(), "label,pixels=%" SCNd64 ",voxels=%" SCNd64, &pixels, &voxel_count) != 2)
        throw FormatError("fMRI CSV '" + path + "' header row '" + line +
                          "' does not declare 'label,pixels=<P>,voxels=<V>'");
    if (pixels < 1 || voxel_count < 1)
        throw FormatError("fMRI CSV '" + path + "' declares invalid pixels/voxels counts");

    VoxelDataset ds;
    ds.voxel_count = voxel_count;
    const int64_t side = static_cast<int64_t>(std::lround(std::sqrt(static_cast<double>(pixels))));
    if (side * side != pixels)
        throw FormatError("fMRI CSV '" + path + "' pixel count " + std::to_string(pixels) + " is not square");
    ds.image_h = ds.image_w = side;

    int64_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty()) continue;
        const char* p = line.c_str();
        char* end = nullptr;
        const long lab = std::strtol(p, &end, 10);
        if (end == p || lab < 0 || lab > 9)
            throw FormatError("fMRI CSV row " + std::to_string(row) + ": bad label field");
        p = end;
        const int64_t fields = pixels + voxel_count;
        std::vector<float> vals(static_cast<size_t>(fields));
        for (int64_t j = 0; j < fields; ++j) {
            if (*p != ',')
                throw FormatError("fMRI CSV row " + std::to_string(row) + ": expected " +
                                  std::to_string(fields) + " values, found " + std::to_string(j));
            ++p;
            vals[static_cast<size_t>(j)] = std::strtof(p, &end);
            if (end == p) throw FormatError("fMRI CSV row " + std::to_string(row) + ": non-numeric field " +
                                            std::to_string(j + 1));
            p = end;
        }
        if (*p != '\0' && *p != '\r')
            throw FormatError("fMRI CSV row " + std::to_string(row) + ": trailing data after " +
                              std::to_string(fields) + " values");
        ds.labels.push_back(static_cast<int>(lab));
        ds.images.insert(ds.images.end(), vals.begin(), vals.begin() + pixels);
        ds.voxels.insert(ds.voxels.end(), vals.begin() + pixels, vals.end());
    }
    if (ds.size() == 0) throw FormatError("fMRI CSV '" + path + "' has a header but no data rows");
    return ds;
}

// ---- synthetic fMRI ------------------------------------------------------------
//
// Stand-in for unavailable recordings. Each planted signal voxel responds
// linearly (fixed random weights and offset) to the true-class capsule of
// the stimulus, plus Gaussian noise; the remaining voxels are pure N(0,1).

inline VoxelDataset synthesize_fmri(CapsNetModel<float>& capsnet, const ImageDataset<float>& stimuli,
                                    const SynthConfig& cfg) {
    if (stimuli.size() == 0) throw DomainError("synthesize_fmri: empty stimulus set");
    if (cfg.signal_count < 0 || cfg.signal_count > cfg.total_voxels)
        throw DomainError("synthesize_fmri: signal_count outside 0..total_voxels");
    if (cfg.noise_sigma < 0) throw DomainError("synthesize_fmri: negative noise sigma");
    const int64_t d = capsnet.cfg.digit_dim;
    const int64_t v_total = cfg.total_voxels;

    Rng rng(cfg.seed);
    // placement of the signal voxels, then their response weights, then noise
    std::vector<int64_t> position(static_cast<size_t>(v_total));
    std::iota(position.begin(), position.end(), 0);
    rng.shuffle(position);
    std::vector<int64_t> signal(position.begin(), position.begin() + cfg.signal_count);
    std::sort(signal.begin(), signal.end());

    std::vector<double> resp_w(static_cast<size_t>(cfg.signal_count * d));
    std::vector<double> resp_b(static_cast<size_t>(cfg.signal_count));
    for (auto& w : resp_w) w = rng.normal();
    for (auto& b : resp_b) b = rng.normal();

    capsnet.set_parameters_requires_grad(false);
    VoxelDataset ds;
    ds.image_h = stimuli.height;
    ds.image_w = stimuli.width;
    ds.voxel_count = v_total;
    ds.labels = stimuli.labels;
    ds.images = stimuli.pixels;
    ds.voxels.assign(static_cast<size_t>(stimuli.size() * v_total), 0.0f);
    ds.signal_voxels = signal;
    {
        std::ostringstream prov;
        prov << "synthetic(seed=" << cfg.seed << ",sigma=" << cfg.noise_sigma
             << ",signal_count=" << cfg.signal_count << ")";
        ds.provenance = prov.str();
    }

    std::vector<char> is_signal(static_cast<size_t>(v_total), 0);
    std::vector<int64_t> signal_slot(static_cast<size_t>(v_total), -1);
    for (int64_t s = 0; s < cfg.signal_count; ++s) {
        is_signal[static_cast<size_t>(signal[static_cast<size_t>(s)])] = 1;
        signal_slot[static_cast<size_t>(signal[static_cast<size_t>(s)])] = s;
    }

    for (int64_t i = 0; i < stimuli.size(); ++i) {
        std::vector<float> img(stimuli.image(i), stimuli.image(i) + stimuli.height * stimuli.width);
        Tensor<float> image = Tensor<float>::from_data({1, stimuli.height, stimuli.width}, std::move(img));
        DigitCapsOutput<float> out = forward(capsnet, image);
        const int label = stimuli.labels[static_cast<size_t>(i)];
        if (label < 0 || label >= capsnet.cfg.num_classes)
            throw DomainError("synthesize_fmri: label " + std::to_string(label) + " outside the model's classes");
        const float* caps = out.capsules.data() + label * d;
        float* row = ds.voxels.data() + i * v_total;
        for (int64_t v = 0; v < v_total; ++v) {
            if (is_signal[static_cast<size_t>(v)]) {
                const int64_t s = signal_slot[static_cast<size_t>(v)];
                double act = resp_b[static_cast<size_t>(s)];
                for (int64_t j = 0; j < d; ++j)
                    act += resp_w[static_cast<size_t>(s * d + j)] * static_cast<double>(caps[j]);
                act += cfg.noise_sigma * rng.normal();
                row[v] = static_cast<float>(act);
            } else {
                row[v] = static_cast<float>(rng.normal());
            }
        }
    }
    capsnet.set_parameters_requires_grad(true);
    return ds;
}

// Stratified, seeded k-fold split; fold sizes differ by at most one overall
// and within each label group.
inline std::vector<int> kfold_split(int64_t n, int k, uint64_t seed, const std::vector<int>& labels) {
    if (n < 1) throw DomainError("kfold_split: empty sample set");
    if (k < 1 || static_cast<int64_t>(k) > n)
        throw DomainError("kfold_split: k=" + std::to_string(k) + " outside 1.." + std::to_string(n));
    if (static_cast<int64_t>(labels.size()) != n)
        throw DimensionError("kfold_split: " + std::to_string(labels.size()) + " labels for n=" + std::to_string(n));
    std::map<int, std::vector<int64_t>> groups;
    for (int64_t i = 0; i < n; ++i) groups[labels[static_cast<size_t>(i)]].push_back(i);
    Rng rng(seed);
    std::vector<int> folds(static_cast<size_t>(n), -1);
    int cursor = 0;
    for (auto& [label, idx] : groups) {
        rng.shuffle(idx);
        for (int64_t i : idx) {
            folds[static_cast<size_t>(i)] = cursor;
            cursor = (cursor + 1) % k;
        }
    }
    return folds;
}

}  // namespace capsdec
