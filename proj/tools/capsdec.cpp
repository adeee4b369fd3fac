// Command-line front end for the two-stage capsule decoding pipeline:
// stage 1 trains the capsule network on digit images, stage 2 maps voxel
// data to capsule features and decodes them back to images.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capsdec/capsnet.hpp"
#include "capsdec/checkpoint.hpp"
#include "capsdec/data_io.hpp"
#include "capsdec/encoding.hpp"
#include "capsdec/fmri_decoder.hpp"
#include "capsdec/metrics.hpp"
#include "capsdec/pgm.hpp"
#include "capsdec/pipeline.hpp"

namespace fs = std::filesystem;
using namespace capsdec;

namespace {

std::string fmt(double v, int prec = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

ImageDataset<float> load_mnist_pair(const std::string& dir, const std::string& stem) {
    return load_mnist((fs::path(dir) / (stem + "-images-idx3-ubyte")).string(),
                      (fs::path(dir) / (stem + "-labels-idx1-ubyte")).string());
}

// capsule blocks [classes x 16] for every sample, inference mode
std::vector<std::vector<float>> capsules_for_dataset(CapsNetModel<float>& net, const VoxelDataset& ds) {
    net.set_parameters_requires_grad(false);
    std::vector<std::vector<float>> out(static_cast<size_t>(ds.size()));
    for (int64_t i = 0; i < ds.size(); ++i) {
        std::vector<float> img(ds.image(i), ds.image(i) + ds.pixels());
        Tensor<float> image = Tensor<float>::from_data({1, ds.image_h, ds.image_w}, std::move(img));
        out[static_cast<size_t>(i)] = forward(net, image).capsules.value();
    }
    net.set_parameters_requires_grad(true);
    return out;
}

std::vector<int> distinct_labels(const VoxelDataset& ds) {
    std::set<int> s(ds.labels.begin(), ds.labels.end());
    return std::vector<int>(s.begin(), s.end());
}

int cmd_train_capsnet(const std::string& mnist_dir, int epochs, int batch_size, uint64_t seed,
                      int64_t train_limit, const std::string& out) {
    std::cout << "config: command=train-capsnet mnist_dir=" << mnist_dir << " epochs=" << epochs
              << " batch_size=" << batch_size << " seed=" << seed << " train_limit=" << train_limit
              << " out=" << out << "\n";
    ImageDataset<float> train_set = load_mnist_pair(mnist_dir, "train");
    if (train_limit > 0 && train_limit < train_set.size()) {
        train_set.pixels.resize(static_cast<size_t>(train_limit * train_set.height * train_set.width));
        train_set.labels.resize(static_cast<size_t>(train_limit));
    }
    ImageDataset<float> test_set;
    bool have_test = false;
    try {
        test_set = load_mnist_pair(mnist_dir, "t10k");
        have_test = true;
    } catch (const FormatError&) {
        std::cout << "no t10k files found, skipping per-epoch accuracy\n";
    }

    CapsNetModel<float> model = make_capsnet<float>(CapsNetConfig{}, seed);
    train(model, train_set, epochs, batch_size, seed, [&](int epoch, double mean_loss) {
        std::cout << "epoch " << epoch << " mean_loss " << fmt(mean_loss);
        if (have_test) std::cout << " test_accuracy " << fmt(evaluate_accuracy(model, test_set), 4);
        std::cout << "\n" << std::flush;
    });
    if (epochs == 0 && have_test)
        std::cout << "initial test_accuracy " << fmt(evaluate_accuracy(model, test_set), 4) << "\n";
    save_capsnet(out, model);
    std::cout << "wrote checkpoint " << out << "\n";
    return 0;
}

int cmd_simulate(const std::string& capsnet_path, const std::string& mnist_dir, int64_t n, double sigma,
                 int64_t signal, int64_t voxels, uint64_t seed, const std::string& out) {
    std::cout << "config: command=simulate capsnet=" << capsnet_path << " mnist_dir=" << mnist_dir << " n=" << n
              << " sigma=" << sigma << " signal=" << signal << " voxels=" << voxels << " seed=" << seed
              << " out=" << out << "\n";
    if (n < 2 || n % 2 != 0) throw DomainError("simulate: --n must be even and >= 2");
    CapsNetModel<float> net = load_capsnet(capsnet_path);
    ImageDataset<float> test_set = load_mnist_pair(mnist_dir, "t10k");

    ImageDataset<float> stimuli;
    stimuli.height = test_set.height;
    stimuli.width = test_set.width;
    int64_t took6 = 0, took9 = 0;
    for (int64_t i = 0; i < test_set.size() && (took6 < n / 2 || took9 < n / 2); ++i) {
        const int lab = test_set.labels[static_cast<size_t>(i)];
        if ((lab == 6 && took6 < n / 2) || (lab == 9 && took9 < n / 2)) {
            stimuli.pixels.insert(stimuli.pixels.end(), test_set.image(i),
                                  test_set.image(i) + test_set.height * test_set.width);
            stimuli.labels.push_back(lab);
            (lab == 6 ? took6 : took9)++;
        }
    }
    if (took6 < n / 2 || took9 < n / 2)
        throw DomainError("simulate: test set has too few 6s/9s for n=" + std::to_string(n));

    SynthConfig cfg;
    cfg.signal_count = signal;
    cfg.noise_sigma = sigma;
    cfg.seed = seed;
    cfg.total_voxels = voxels;
    VoxelDataset ds = synthesize_fmri(net, stimuli, cfg);
    write_fmri_csv(out, ds);
    std::cout << "wrote " << ds.size() << " samples x " << ds.voxel_count << " voxels to " << out << "\n";
    return 0;
}

int cmd_encode(const std::string& capsnet_path, const std::string& fmri_path, int64_t k, const std::string& out) {
    std::cout << "config: command=encode capsnet=" << capsnet_path << " fmri=" << fmri_path << " k=" << k
              << " out=" << out << "\n";
    CapsNetModel<float> net = load_capsnet(capsnet_path);
    VoxelDataset ds = load_fmri_csv(fmri_path);
    auto caps = capsules_for_dataset(net, ds);

    const int64_t d = net.cfg.digit_dim;
    std::vector<float> feats;
    feats.reserve(static_cast<size_t>(ds.size() * d));
    for (int64_t i = 0; i < ds.size(); ++i) {
        const float* block = caps[static_cast<size_t>(i)].data();
        const int cls = capsdec::detail::longest_capsule_class(block, net.cfg.num_classes, d);
        feats.insert(feats.end(), block + cls * d, block + (cls + 1) * d);
    }
    EncodingModel enc = build_encoding(feats, ds.voxels, ds.size(), d, ds.voxel_count, k);
    save_encoding(out, enc);
    double mean_r2 = 0.0;
    for (int64_t idx : enc.selected) mean_r2 += enc.r2[static_cast<size_t>(idx)];
    mean_r2 /= static_cast<double>(enc.selected.size());
    std::cout << "selected " << enc.selected.size() << " voxels, mean fit r2 " << fmt(mean_r2, 4) << ", best "
              << fmt(enc.r2[static_cast<size_t>(enc.selected[0])], 4) << "\n";
    std::cout << "wrote encoding " << out << "\n";
    return 0;
}

int cmd_train_decoder(const std::string& capsnet_path, const std::string& fmri_path,
                      const std::string& encoding_path, int epochs, uint64_t seed, const std::string& out) {
    std::cout << "config: command=train-decoder capsnet=" << capsnet_path << " fmri=" << fmri_path
              << " encoding=" << encoding_path << " epochs=" << epochs << " seed=" << seed << " out=" << out
              << "\n";
    CapsNetModel<float> net = load_capsnet(capsnet_path);
    VoxelDataset ds = load_fmri_csv(fmri_path);
    EncodingModel enc = load_encoding(encoding_path);
    if (enc.voxel_count != ds.voxel_count)
        throw ConfigError("train-decoder: encoding expects " + std::to_string(enc.voxel_count) +
                          " voxels, dataset has " + std::to_string(ds.voxel_count));
    auto caps = capsules_for_dataset(net, ds);
    std::vector<int> classes = distinct_labels(ds);

    const int64_t d = net.cfg.digit_dim;
    const int64_t k = static_cast<int64_t>(enc.selected.size());
    const int64_t out_dim = static_cast<int64_t>(classes.size()) * d;
    std::vector<float> in(static_cast<size_t>(ds.size() * k));
    std::vector<float> tgt(static_cast<size_t>(ds.size() * out_dim));
    for (int64_t i = 0; i < ds.size(); ++i) {
        for (int64_t j = 0; j < k; ++j)
            in[static_cast<size_t>(i * k + j)] = ds.voxel_row(i)[enc.selected[static_cast<size_t>(j)]];
        const float* block = caps[static_cast<size_t>(i)].data();
        for (size_t c = 0; c < classes.size(); ++c)
            for (int64_t j = 0; j < d; ++j)
                tgt[static_cast<size_t>(i * out_dim) + c * static_cast<size_t>(d) + static_cast<size_t>(j)] =
                    block[classes[c] * d + j];
    }
    FmriDecoderModel<float> dec = make_fmri_decoder<float>(enc.selected, classes, seed);
    auto history = train_decoder(dec, in, tgt, ds.size(), epochs, seed);
    std::cout << "final training mse " << fmt(history.empty() ? 0.0 : history.back(), 6) << "\n";
    save_fmri_decoder(out, dec);
    std::cout << "wrote decoder " << out << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& capsnet_path, const std::string& encoding_path,
                    const std::string& decoder_path, const std::string& fmri_path, int ssim_window,
                    const std::string& out_dir) {
    std::cout << "config: command=reconstruct capsnet=" << capsnet_path << " encoding=" << encoding_path
              << " decoder=" << decoder_path << " fmri=" << fmri_path << " ssim_window=" << ssim_window
              << " out=" << out_dir << "\n";
    CapsNetModel<float> net = load_capsnet(capsnet_path);
    EncodingModel enc = load_encoding(encoding_path);
    FmriDecoderModel<float> dec = load_fmri_decoder(decoder_path);
    VoxelDataset ds = load_fmri_csv(fmri_path);
    fs::create_directories(out_dir);

    net.set_parameters_requires_grad(false);
    std::ofstream table(fs::path(out_dir) / "reconstructions.tsv");
    table << "sample\tlabel\tchosen_class\tmse\tpcc\tssim\n";
    double acc = 0.0;
    for (int64_t i = 0; i < ds.size(); ++i) {
        std::vector<float> stim(ds.image(i), ds.image(i) + ds.pixels());
        std::vector<float> vox(ds.voxel_row(i), ds.voxel_row(i) + ds.voxel_count);
        auto [pred, chosen] = reconstruct_from_fmri(net, enc, dec, vox);
        std::vector<float> theory = theoretical_reconstruction(net, stim);
        MetricTriple m = compute_metrics(stim, pred, ds.image_h, ds.image_w, ssim_window);
        char stem[24];
        std::snprintf(stem, sizeof stem, "%03lld", static_cast<long long>(i));
        write_pgm((fs::path(out_dir) / (std::string(stem) + "_stim.pgm")).string(), stim, ds.image_h, ds.image_w);
        write_pgm((fs::path(out_dir) / (std::string(stem) + "_theory.pgm")).string(), theory, ds.image_h, ds.image_w);
        write_pgm((fs::path(out_dir) / (std::string(stem) + "_pred.pgm")).string(), pred, ds.image_h, ds.image_w);
        table << i << "\t" << ds.labels[static_cast<size_t>(i)] << "\t" << chosen << "\t" << fmt(m.mse) << "\t"
              << fmt(m.pcc) << "\t" << fmt(m.ssim) << "\n";
        if (chosen == ds.labels[static_cast<size_t>(i)]) acc += 1.0;
    }
    std::cout << "chosen_class_accuracy " << fmt(acc / static_cast<double>(ds.size()), 4) << "\n";
    std::cout << "wrote reconstructions to " << out_dir << "\n";
    return 0;
}

int cmd_evaluate(const std::string& capsnet_path, const std::string& fmri_path, int64_t k, int folds,
                 uint64_t seed, int decoder_epochs, int ssim_window, const std::string& out_dir) {
    std::cout << "config: command=evaluate capsnet=" << capsnet_path << " fmri=" << fmri_path << " k=" << k
              << " folds=" << folds << " seed=" << seed << " decoder_epochs=" << decoder_epochs
              << " ssim_window=" << ssim_window << " out=" << out_dir << "\n";
    CapsNetModel<float> net = load_capsnet(capsnet_path);
    VoxelDataset ds = load_fmri_csv(fmri_path);
    ds.folds = kfold_split(ds.size(), folds, seed, ds.labels);

    CrossValConfig cfg;
    cfg.voxels_to_keep = k;
    cfg.decoder_epochs = decoder_epochs;
    cfg.seed = seed;
    cfg.ssim_window = ssim_window;
    CrossValResult res = cross_validate(net, ds, cfg);
    write_report(out_dir, res, ds.image_h, ds.image_w);

    for (const auto& fm : res.folds)
        std::cout << "fold " << fm.fold << " mse " << fmt(fm.predicted.mse) << " pcc " << fmt(fm.predicted.pcc)
                  << " ssim " << fmt(fm.predicted.ssim) << "\n";
    std::cout << "aggregate mse " << fmt(res.aggregate_predicted.mse) << " pcc "
              << fmt(res.aggregate_predicted.pcc) << " ssim " << fmt(res.aggregate_predicted.ssim) << "\n";
    std::cout << "aggregate_std mse " << fmt(res.stddev_predicted.mse) << " pcc " << fmt(res.stddev_predicted.pcc)
              << " ssim " << fmt(res.stddev_predicted.ssim) << "\n";
    std::cout << "theoretical mse " << fmt(res.aggregate_theoretical.mse) << " pcc "
              << fmt(res.aggregate_theoretical.pcc) << " ssim " << fmt(res.aggregate_theoretical.ssim) << "\n";
    std::cout << "chosen_class_accuracy " << fmt(res.chosen_class_accuracy, 4) << "\n";
    std::cout << "table-row capsdec " << fmt(res.aggregate_predicted.mse, 3) << " "
              << fmt(res.aggregate_predicted.pcc, 3) << " " << fmt(res.aggregate_predicted.ssim, 3) << "\n";
    std::cout << "wrote report to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"capsdec: capsule-network digit training and fMRI image reconstruction"};
    app.require_subcommand(1);

    // train-capsnet
    std::string mnist_dir, out_path, capsnet_path, fmri_path, encoding_path, decoder_path, out_dir;
    int epochs = 20, batch_size = 10, folds = 10, decoder_epochs = 200, ssim_window = 7;
    uint64_t seed = 1;
    int64_t train_limit = 0, n_samples = 100, signal = 100, voxels = 3092, k = 100;
    double sigma = 0.25;

    auto* tc = app.add_subcommand("train-capsnet", "train the capsule network on an MNIST-format directory");
    tc->add_option("--mnist-dir", mnist_dir, "directory with train-/t10k- IDX files")->required();
    tc->add_option("--epochs", epochs, "training epochs (default 20)");
    tc->add_option("--batch-size", batch_size, "mini-batch size (default 10)");
    tc->add_option("--seed", seed, "RNG seed");
    tc->add_option("--train-limit", train_limit, "use only the first N training images (0 = all)");
    tc->add_option("--out", out_path, "output checkpoint path")->required();

    auto* sim = app.add_subcommand("simulate", "synthesize an fMRI CSV from 6/9 test digits");
    sim->add_option("--capsnet", capsnet_path, "trained capsule network checkpoint")->required();
    sim->add_option("--mnist-dir", mnist_dir, "directory with t10k- IDX files")->required();
    sim->add_option("--n", n_samples, "sample count, half 6s half 9s (default 100)");
    sim->add_option("--sigma", sigma, "voxel noise std (default 0.25)");
    sim->add_option("--signal", signal, "planted signal voxel count (default 100)");
    sim->add_option("--voxels", voxels, "total voxel count (default 3092)");
    sim->add_option("--seed", seed, "RNG seed");
    sim->add_option("--out", out_path, "output CSV path")->required();

    auto* enc = app.add_subcommand("encode", "fit per-voxel linear encoding and select the top-k voxels");
    enc->add_option("--capsnet", capsnet_path, "trained capsule network checkpoint")->required();
    enc->add_option("--fmri", fmri_path, "fMRI CSV")->required();
    enc->add_option("--k", k, "voxels to keep (default 100)");
    enc->add_option("--out", out_path, "output encoding checkpoint")->required();

    auto* td = app.add_subcommand("train-decoder", "train the voxel-to-capsule regressor");
    td->add_option("--capsnet", capsnet_path, "trained capsule network checkpoint")->required();
    td->add_option("--fmri", fmri_path, "fMRI CSV")->required();
    td->add_option("--encoding", encoding_path, "encoding checkpoint")->required();
    td->add_option("--epochs", decoder_epochs, "training epochs (default 200)");
    td->add_option("--seed", seed, "RNG seed");
    td->add_option("--out", out_path, "output decoder checkpoint")->required();

    auto* rec = app.add_subcommand("reconstruct", "reconstruct every sample of an fMRI CSV");
    rec->add_option("--capsnet", capsnet_path, "trained capsule network checkpoint")->required();
    rec->add_option("--encoding", encoding_path, "encoding checkpoint")->required();
    rec->add_option("--decoder", decoder_path, "decoder checkpoint")->required();
    rec->add_option("--fmri", fmri_path, "fMRI CSV")->required();
    rec->add_option("--ssim-window", ssim_window, "SSIM window size (default 7)");
    rec->add_option("--out", out_dir, "output directory")->required();

    auto* ev = app.add_subcommand("evaluate", "k-fold cross-validated reconstruction metrics");
    ev->add_option("--capsnet", capsnet_path, "trained capsule network checkpoint")->required();
    ev->add_option("--fmri", fmri_path, "fMRI CSV")->required();
    ev->add_option("--k", k, "voxels to keep (default 100)");
    ev->add_option("--folds", folds, "fold count (default 10)");
    ev->add_option("--seed", seed, "RNG seed");
    ev->add_option("--decoder-epochs", decoder_epochs, "decoder training epochs per fold (default 200)");
    ev->add_option("--ssim-window", ssim_window, "SSIM window size (default 7)");
    ev->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (tc->parsed())
            return cmd_train_capsnet(mnist_dir, epochs, batch_size, seed, train_limit, out_path);
        if (sim->parsed()) return cmd_simulate(capsnet_path, mnist_dir, n_samples, sigma, signal, voxels, seed, out_path);
        if (enc->parsed()) return cmd_encode(capsnet_path, fmri_path, k, out_path);
        if (td->parsed())
            return cmd_train_decoder(capsnet_path, fmri_path, encoding_path, decoder_epochs, seed, out_path);
        if (rec->parsed())
            return cmd_reconstruct(capsnet_path, encoding_path, decoder_path, fmri_path, ssim_window, out_dir);
        if (ev->parsed())
            return cmd_evaluate(capsnet_path, fmri_path, k, folds, seed, decoder_epochs, ssim_window, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
