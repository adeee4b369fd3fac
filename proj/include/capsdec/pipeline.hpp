#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "capsdec/capsnet.hpp"
#include "capsdec/data_io.hpp"
#include "capsdec/encoding.hpp"
#include "capsdec/errors.hpp"
#include "capsdec/fmri_decoder.hpp"
#include "capsdec/metrics.hpp"
#include "capsdec/pgm.hpp"

namespace capsdec {

struct ReconstructionResult {
    std::vector<float> stimulus;
    std::vector<float> theoretical;
    std::vector<float> predicted;
    int chosen_class = -1;
    MetricTriple predicted_metrics;
    MetricTriple theoretical_metrics;
};

struct CrossValConfig {
    int64_t voxels_to_keep = 100;
    int decoder_epochs = 200;
    uint64_t seed = 0;
    int ssim_window = 7;
    double ssim_sigma = 1.5;
    int64_t decoder_hidden1 = 64;
    int64_t decoder_hidden2 = 64;
};

struct FoldMetrics {
    int fold = 0;
    int64_t samples = 0;
    MetricTriple predicted;
    MetricTriple theoretical;
};

struct CrossValResult {
    std::vector<FoldMetrics> folds;
    MetricTriple aggregate_predicted;    // mean over all test reconstructions
    MetricTriple aggregate_theoretical;  // same, for the upper-bound decode
    MetricTriple stddev_predicted;       // sample std over all test reconstructions
    double chosen_class_accuracy = 0.0;
    std::vector<int64_t> sample_index;   // original dataset index per entry
    std::vector<ReconstructionResult> samples;
};

namespace detail {

template <typename S>
std::vector<float> image_from_tensor(const Tensor<S>& t) {
    std::vector<float> out(t.value().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.data()[i]);
    return out;
}

inline int longest_capsule_class(const float* capsules, int64_t classes, int64_t dim) {
    int best = 0;
    double best_n2 = -1.0;
    for (int64_t j = 0; j < classes; ++j) {
        double n2 = 0.0;
        for (int64_t d = 0; d < dim; ++d) {
            const double v = static_cast<double>(capsules[j * dim + d]);
            n2 += v * v;
        }
        if (n2 > best_n2) {
            best_n2 = n2;
            best = static_cast<int>(j);
        }
    }
    return best;
}

// Decode one 16-D capsule placed at its class slot in a zeroed block.
template <typename S>
std::vector<float> decode_single_capsule(const CapsNetModel<S>& capsnet, const S* capsule, int cls) {
    const auto& cfg = capsnet.cfg;
    std::vector<S> block(static_cast<size_t>(cfg.num_classes * cfg.digit_dim), S(0));
    std::copy_n(capsule, cfg.digit_dim, block.begin() + cls * cfg.digit_dim);
    Tensor<S> caps = Tensor<S>::from_data({cfg.num_classes, cfg.digit_dim}, std::move(block));
    return image_from_tensor(decode(capsnet, caps, cls));
}

}  // namespace detail

// Upper-bound reconstruction: run the stimulus through the capsule network
// and decode its longest digit capsule.
template <typename S>
std::vector<float> theoretical_reconstruction(const CapsNetModel<S>& capsnet, const std::vector<S>& stimulus) {
    const auto& cfg = capsnet.cfg;
    if (static_cast<int64_t>(stimulus.size()) != cfg.pixels())
        throw DimensionError("theoretical_reconstruction: stimulus has " + std::to_string(stimulus.size()) +
                             " pixels, model expects " + std::to_string(cfg.pixels()));
    Tensor<S> image = Tensor<S>::from_data({1, cfg.image_h, cfg.image_w}, stimulus);
    DigitCapsOutput<S> out = forward(capsnet, image);
    const int cls = detail::longest_capsule_class(out.capsules.data(), cfg.num_classes, cfg.digit_dim);
    return detail::decode_single_capsule(capsnet, out.capsules.data() + cls * cfg.digit_dim, cls);
}

// fMRI reconstruction: gather the selected voxels, regress the candidate
// capsules, keep the longer one (ties to the lower class index), and decode.
template <typename S>
std::pair<std::vector<float>, int> reconstruct_from_fmri(const CapsNetModel<S>& capsnet,
                                                         const EncodingModel& encoder,
                                                         const FmriDecoderModel<S>& decoder_model,
                                                         const std::vector<S>& voxels_full) {
    if (encoder.selected != decoder_model.input_voxel_indices)
        throw ConfigError("reconstruct_from_fmri: encoder selects " + std::to_string(encoder.selected.size()) +
                          " voxels but the decoder was trained on a different index set");
    if (static_cast<int64_t>(voxels_full.size()) != encoder.voxel_count)
        throw DimensionError("reconstruct_from_fmri: got " + std::to_string(voxels_full.size()) +
                             " voxels, encoder expects " + std::to_string(encoder.voxel_count));
    const auto& cfg = capsnet.cfg;
    if (decoder_model.digit_dim != cfg.digit_dim)
        throw ConfigError("reconstruct_from_fmri: decoder digit_dim " + std::to_string(decoder_model.digit_dim) +
                          " does not match the capsule network");
    for (int cls : decoder_model.candidate_classes)
        if (cls < 0 || cls >= cfg.num_classes)
            throw ConfigError("reconstruct_from_fmri: candidate class " + std::to_string(cls) +
                              " outside the capsule network's classes");

    std::vector<S> picked(encoder.selected.size());
    for (size_t i = 0; i < encoder.selected.size(); ++i)
        picked[i] = voxels_full[static_cast<size_t>(encoder.selected[i])];
    Tensor<S> caps = predict_capsules(decoder_model, picked);

    const int64_t d = cfg.digit_dim;
    int pick = 0;
    double best_n2 = -1.0;
    for (size_t c = 0; c < decoder_model.candidate_classes.size(); ++c) {
        double n2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(caps.data()[static_cast<int64_t>(c) * d + j]);
            n2 += v * v;
        }
        const int cls = decoder_model.candidate_classes[c];
        const int best_cls = decoder_model.candidate_classes[static_cast<size_t>(pick)];
        if (n2 > best_n2 || (n2 == best_n2 && cls < best_cls)) {
            best_n2 = n2;
            pick = static_cast<int>(c);
        }
    }
    const int chosen = decoder_model.candidate_classes[static_cast<size_t>(pick)];
    std::vector<float> img =
        detail::decode_single_capsule(capsnet, caps.data() + static_cast<int64_t>(pick) * d, chosen);
    return {std::move(img), chosen};
}

// 10-fold (or k-fold) cross-validated evaluation: per fold, fit the voxel
// encoding and train the fMRI decoder on the training pairs, reconstruct the
// held-out samples, and score them against the stimuli.
template <typename S>
CrossValResult cross_validate(CapsNetModel<S>& capsnet, const VoxelDataset& ds, const CrossValConfig& cfg) {
    const int64_t n = ds.size();
    if (n == 0) throw DomainError("cross_validate: empty dataset");
    if (static_cast<int64_t>(ds.folds.size()) != n)
        throw DomainError("cross_validate: dataset has no fold assignment");
    int num_folds = 0;
    for (int f : ds.folds) {
        if (f < 0) throw DomainError("cross_validate: negative fold index, not a partition");
        num_folds = std::max(num_folds, f + 1);
    }
    {
        std::vector<int64_t> sizes(static_cast<size_t>(num_folds), 0);
        for (int f : ds.folds) sizes[static_cast<size_t>(f)]++;
        for (int f = 0; f < num_folds; ++f)
            if (sizes[static_cast<size_t>(f)] == 0)
                throw DomainError("cross_validate: fold " + std::to_string(f) + " is empty, not a partition");
    }
    if (cfg.voxels_to_keep > ds.voxel_count)
        throw DomainError("cross_validate: k=" + std::to_string(cfg.voxels_to_keep) + " exceeds " +
                          std::to_string(ds.voxel_count) + " voxels");

    std::vector<int> classes;
    {
        std::set<int> dist(ds.labels.begin(), ds.labels.end());
        classes.assign(dist.begin(), dist.end());
    }
    if (classes.size() < 2) throw DomainError("cross_validate: need at least 2 classes in the dataset");

    const auto& net_cfg = capsnet.cfg;
    const int64_t d = net_cfg.digit_dim;

    // stage-1 capsule features are fold-independent; compute once
    capsnet.set_parameters_requires_grad(false);
    std::vector<std::vector<float>> caps_all(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        std::vector<S> img(ds.image(i), ds.image(i) + ds.pixels());
        Tensor<S> image = Tensor<S>::from_data({1, ds.image_h, ds.image_w}, std::move(img));
        DigitCapsOutput<S> out = forward(capsnet, image);
        caps_all[static_cast<size_t>(i)] = detail::image_from_tensor(out.capsules);
    }
    capsnet.set_parameters_requires_grad(true);

    CrossValResult res;
    std::vector<double> all_pred_mse, all_pred_pcc, all_pred_ssim;
    int64_t correct = 0;

    for (int fold = 0; fold < num_folds; ++fold) {
        std::vector<int64_t> train_idx, test_idx;
        for (int64_t i = 0; i < n; ++i)
            (ds.folds[static_cast<size_t>(i)] == fold ? test_idx : train_idx).push_back(i);

        // encoding pairs: longest capsule's 16-D features per training sample
        std::vector<float> feats;
        std::vector<float> voxmat;
        feats.reserve(train_idx.size() * static_cast<size_t>(d));
        voxmat.reserve(train_idx.size() * static_cast<size_t>(ds.voxel_count));
        for (int64_t i : train_idx) {
            const float* caps = caps_all[static_cast<size_t>(i)].data();
            const int cls = detail::longest_capsule_class(caps, net_cfg.num_classes, d);
            feats.insert(feats.end(), caps + cls * d, caps + (cls + 1) * d);
            voxmat.insert(voxmat.end(), ds.voxel_row(i), ds.voxel_row(i) + ds.voxel_count);
        }
        EncodingModel enc = build_encoding(feats, voxmat, static_cast<int64_t>(train_idx.size()), d,
                                           ds.voxel_count, cfg.voxels_to_keep);

        // decoder pairs: selected voxels -> candidate-class capsule block
        const int64_t k = cfg.voxels_to_keep;
        const int64_t out_dim = static_cast<int64_t>(classes.size()) * d;
        std::vector<S> dec_in(train_idx.size() * static_cast<size_t>(k));
        std::vector<S> dec_tgt(train_idx.size() * static_cast<size_t>(out_dim));
        for (size_t t = 0; t < train_idx.size(); ++t) {
            const int64_t i = train_idx[t];
            for (int64_t j = 0; j < k; ++j)
                dec_in[t * static_cast<size_t>(k) + static_cast<size_t>(j)] =
                    static_cast<S>(ds.voxel_row(i)[enc.selected[static_cast<size_t>(j)]]);
            const float* caps = caps_all[static_cast<size_t>(i)].data();
            for (size_t c = 0; c < classes.size(); ++c)
                for (int64_t j = 0; j < d; ++j)
                    dec_tgt[t * static_cast<size_t>(out_dim) + c * static_cast<size_t>(d) + static_cast<size_t>(j)] =
                        static_cast<S>(caps[classes[c] * d + j]);
        }
        const uint64_t fold_seed = cfg.seed + static_cast<uint64_t>(fold) * 0x9e3779b97f4a7c15ULL;
        FmriDecoderModel<S> dec = make_fmri_decoder<S>(enc.selected, classes, fold_seed, cfg.decoder_hidden1,
                                                       cfg.decoder_hidden2, d);
        train_decoder(dec, dec_in, dec_tgt, static_cast<int64_t>(train_idx.size()), cfg.decoder_epochs, fold_seed);

        FoldMetrics fm;
        fm.fold = fold;
        fm.samples = static_cast<int64_t>(test_idx.size());
        capsnet.set_parameters_requires_grad(false);
        for (int64_t i : test_idx) {
            ReconstructionResult rr;
            rr.stimulus.assign(ds.image(i), ds.image(i) + ds.pixels());
            std::vector<S> vox(ds.voxel_row(i), ds.voxel_row(i) + ds.voxel_count);
            auto [pred, chosen] = reconstruct_from_fmri(capsnet, enc, dec, vox);
            rr.predicted = std::move(pred);
            rr.chosen_class = chosen;
            rr.theoretical = theoretical_reconstruction(capsnet, std::vector<S>(rr.stimulus.begin(), rr.stimulus.end()));
            rr.predicted_metrics =
                compute_metrics(rr.stimulus, rr.predicted, ds.image_h, ds.image_w, cfg.ssim_window, cfg.ssim_sigma);
            rr.theoretical_metrics =
                compute_metrics(rr.stimulus, rr.theoretical, ds.image_h, ds.image_w, cfg.ssim_window, cfg.ssim_sigma);
            if (rr.chosen_class == ds.labels[static_cast<size_t>(i)]) ++correct;
            fm.predicted.mse += rr.predicted_metrics.mse;
            fm.predicted.pcc += rr.predicted_metrics.pcc;
            fm.predicted.ssim += rr.predicted_metrics.ssim;
            fm.theoretical.mse += rr.theoretical_metrics.mse;
            fm.theoretical.pcc += rr.theoretical_metrics.pcc;
            fm.theoretical.ssim += rr.theoretical_metrics.ssim;
            all_pred_mse.push_back(rr.predicted_metrics.mse);
            all_pred_pcc.push_back(rr.predicted_metrics.pcc);
            all_pred_ssim.push_back(rr.predicted_metrics.ssim);
            res.aggregate_theoretical.mse += rr.theoretical_metrics.mse;
            res.aggregate_theoretical.pcc += rr.theoretical_metrics.pcc;
            res.aggregate_theoretical.ssim += rr.theoretical_metrics.ssim;
            res.sample_index.push_back(i);
            res.samples.push_back(std::move(rr));
        }
        capsnet.set_parameters_requires_grad(true);
        const double cnt = static_cast<double>(fm.samples);
        fm.predicted.mse /= cnt;
        fm.predicted.pcc /= cnt;
        fm.predicted.ssim /= cnt;
        fm.theoretical.mse /= cnt;
        fm.theoretical.pcc /= cnt;
        fm.theoretical.ssim /= cnt;
        res.folds.push_back(fm);
    }

    const double total = static_cast<double>(res.samples.size());
    auto mean_of = [&](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc / total;
    };
    auto std_of = [&](const std::vector<double>& v, double mean) {
        if (v.size() < 2) return 0.0;
        double acc = 0.0;
        for (double x : v) acc += (x - mean) * (x - mean);
        return std::sqrt(acc / (total - 1.0));
    };
    res.aggregate_predicted.mse = mean_of(all_pred_mse);
    res.aggregate_predicted.pcc = mean_of(all_pred_pcc);
    res.aggregate_predicted.ssim = mean_of(all_pred_ssim);
    res.stddev_predicted.mse = std_of(all_pred_mse, res.aggregate_predicted.mse);
    res.stddev_predicted.pcc = std_of(all_pred_pcc, res.aggregate_predicted.pcc);
    res.stddev_predicted.ssim = std_of(all_pred_ssim, res.aggregate_predicted.ssim);
    res.aggregate_theoretical.mse /= total;
    res.aggregate_theoretical.pcc /= total;
    res.aggregate_theoretical.ssim /= total;
    res.chosen_class_accuracy = static_cast<double>(correct) / total;
    return res;
}

// Writes metrics.tsv (per-fold rows, then mean and std aggregate rows) and
// the per-sample stimulus/theoretical/predicted PGM triplets.
inline void write_report(const std::string& dir, const CrossValResult& res, int64_t image_h, int64_t image_w) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream os(fs::path(dir) / "metrics.tsv");
    if (!os) throw FormatError("cannot open metrics report in '" + dir + "'");
    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    os << "fold\tmse\tpcc\tssim\n";
    for (const auto& fm : res.folds)
        os << fm.fold << "\t" << fmt(fm.predicted.mse) << "\t" << fmt(fm.predicted.pcc) << "\t"
           << fmt(fm.predicted.ssim) << "\n";
    os << "mean\t" << fmt(res.aggregate_predicted.mse) << "\t" << fmt(res.aggregate_predicted.pcc) << "\t"
       << fmt(res.aggregate_predicted.ssim) << "\n";
    os << "std\t" << fmt(res.stddev_predicted.mse) << "\t" << fmt(res.stddev_predicted.pcc) << "\t"
       << fmt(res.stddev_predicted.ssim) << "\n";

    for (size_t s = 0; s < res.samples.size(); ++s) {
        std::snprintf(buf, sizeof buf, "%03lld", static_cast<long long>(res.sample_index[s]));
        const std::string stem = buf;
        write_pgm((fs::path(dir) / (stem + "_stim.pgm")).string(), res.samples[s].stimulus, image_h, image_w);
        write_pgm((fs::path(dir) / (stem + "_theory.pgm")).string(), res.samples[s].theoretical, image_h, image_w);
        write_pgm((fs::path(dir) / (stem + "_pred.pgm")).string(), res.samples[s].predicted, image_h, image_w);
    }
}

}  // namespace capsdec
