#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "capsdec/adam.hpp"
#include "capsdec/errors.hpp"
#include "capsdec/rng.hpp"
#include "capsdec/tensor.hpp"

namespace capsdec {

// Architecture and loss hyperparameters. Defaults give the 28x28 digit
// network: Conv1 256x9x9 stride 1, PrimaryCaps 32 maps of 8-D capsules
// (stride 2), ten 16-D digit capsules, decoder 160-512-1024-784.
struct CapsNetConfig {
    int64_t image_h = 28, image_w = 28;
    int64_t conv1_channels = 256;
    int64_t kernel = 9;
    int64_t conv1_stride = 1;
    int64_t primary_maps = 32;
    int64_t primary_dim = 8;
    int64_t primary_stride = 2;
    int64_t num_classes = 10;
    int64_t digit_dim = 16;
    int64_t decoder_hidden1 = 512;
    int64_t decoder_hidden2 = 1024;
    int routing_iterations = 3;
    double m_plus = 0.9;
    double m_minus = 0.1;
    double lambda = 0.5;
    double mu = 4.0;

    int64_t conv1_out_h() const { return (image_h - kernel) / conv1_stride + 1; }
    int64_t conv1_out_w() const { return (image_w - kernel) / conv1_stride + 1; }
    int64_t primary_out_h() const { return (conv1_out_h() - kernel) / primary_stride + 1; }
    int64_t primary_out_w() const { return (conv1_out_w() - kernel) / primary_stride + 1; }
    int64_t primary_capsules() const { return primary_maps * primary_out_h() * primary_out_w(); }
    int64_t pixels() const { return image_h * image_w; }
};

// Images stacked row-major with integer class labels.
template <typename S = float>
struct ImageDataset {
    int64_t height = 28, width = 28;
    std::vector<S> pixels;
    std::vector<int> labels;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    const S* image(int64_t i) const { return pixels.data() + i * height * width; }
};

template <typename S = float>
struct CapsNetModel {
    CapsNetConfig cfg;
    uint64_t seed = 0;
    int64_t trained_epochs = 0;

    Tensor<S> conv1_kernels, conv1_bias;
    Tensor<S> primary_kernels, primary_bias;
    Tensor<S> w_routing;  // [P x classes x digit_dim x primary_dim]
    Tensor<S> dec_w1, dec_b1, dec_w2, dec_b2, dec_w3, dec_b3;

    std::vector<Tensor<S>> parameters() {
        return {conv1_kernels, conv1_bias, primary_kernels, primary_bias, w_routing,
                dec_w1,        dec_b1,     dec_w2,          dec_b2,       dec_w3,  dec_b3};
    }

    std::vector<std::pair<std::string, Tensor<S>>> named_parameters() {
        return {{"conv1_kernels", conv1_kernels},
                {"conv1_bias", conv1_bias},
                {"primary_kernels", primary_kernels},
                {"primary_bias", primary_bias},
                {"w_routing", w_routing},
                {"dec_w1", dec_w1},
                {"dec_b1", dec_b1},
                {"dec_w2", dec_w2},
                {"dec_b2", dec_b2},
                {"dec_w3", dec_w3},
                {"dec_b3", dec_b3}};
    }

    void set_parameters_requires_grad(bool rg) {
        for (auto& p : parameters()) p.set_requires_grad(rg);
    }
};

namespace detail {

template <typename S>
Tensor<S> init_trunc_normal(Rng& rng, Shape shape, double stddev, bool requires_grad = true) {
    std::vector<S> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<S>(rng.truncated_normal(stddev));
    return Tensor<S>::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace detail

// Fresh model: conv/dense weights from a truncated normal with
// std 0.1/sqrt(fan_in), routing transforms from std 0.05, biases zero.
// The draw order is fixed, so a seed pins every parameter.
template <typename S = float>
CapsNetModel<S> make_capsnet(const CapsNetConfig& cfg, uint64_t seed) {
    if (cfg.conv1_out_h() < 1 || cfg.primary_out_h() < 1)
        throw DomainError("make_capsnet: kernel/stride do not fit the image");
    CapsNetModel<S> m;
    m.cfg = cfg;
    m.seed = seed;
    Rng rng(seed);
    const int64_t k = cfg.kernel;
    const int64_t pc = cfg.primary_maps * cfg.primary_dim;

    m.conv1_kernels = detail::init_trunc_normal<S>(rng, {cfg.conv1_channels, 1, k, k}, 0.1 / std::sqrt(double(k * k)));
    m.conv1_bias = Tensor<S>::zeros({cfg.conv1_channels}, true);
    m.primary_kernels =
        detail::init_trunc_normal<S>(rng, {pc, cfg.conv1_channels, k, k}, 0.1 / std::sqrt(double(cfg.conv1_channels * k * k)));
    m.primary_bias = Tensor<S>::zeros({pc}, true);
    m.w_routing = detail::init_trunc_normal<S>(
        rng, {cfg.primary_capsules(), cfg.num_classes, cfg.digit_dim, cfg.primary_dim}, 0.05);

    const int64_t dec_in = cfg.num_classes * cfg.digit_dim;
    m.dec_w1 = detail::init_trunc_normal<S>(rng, {dec_in, cfg.decoder_hidden1}, 0.1 / std::sqrt(double(dec_in)));
    m.dec_b1 = Tensor<S>::zeros({cfg.decoder_hidden1}, true);
    m.dec_w2 = detail::init_trunc_normal<S>(rng, {cfg.decoder_hidden1, cfg.decoder_hidden2},
                                            0.1 / std::sqrt(double(cfg.decoder_hidden1)));
    m.dec_b2 = Tensor<S>::zeros({cfg.decoder_hidden2}, true);
    m.dec_w3 = detail::init_trunc_normal<S>(rng, {cfg.decoder_hidden2, cfg.pixels()},
                                            0.1 / std::sqrt(double(cfg.decoder_hidden2)));
    m.dec_b3 = Tensor<S>::zeros({cfg.pixels()}, true);
    return m;
}

// Digit capsules of one sample plus their Euclidean norms.
template <typename S = float>
struct DigitCapsOutput {
    Tensor<S> capsules;  // [classes x digit_dim]
    Tensor<S> lengths;   // [classes]
};

template <typename S = float>
struct RoutingResult {
    Tensor<S> v;                        // [B x classes x digit_dim]
    std::vector<Tensor<S>> couplings;   // c per iteration, [B x P x classes]
};

// Dynamic routing by agreement. Logits start at zero; every iteration takes
// the softmax over output capsules, mixes predictions, squashes, and adds
// the prediction/output agreement back onto the logits.
template <typename S>
RoutingResult<S> routing_batched(const Tensor<S>& u_hat, int iterations) {
    if (u_hat.ndim() != 4)
        throw DimensionError("routing: expected [B x P x J x D], got " + shape_str(u_hat.shape()));
    if (iterations < 1) throw DomainError("routing: iterations must be >= 1");
    const int64_t B = u_hat.dim(0), P = u_hat.dim(1), J = u_hat.dim(2);
    RoutingResult<S> res;
    Tensor<S> logits = Tensor<S>::zeros({B, P, J});
    Tensor<S> v;
    for (int it = 0; it < iterations; ++it) {
        Tensor<S> c = softmax(logits, 2);
        res.couplings.push_back(c);
        v = squash(routing_mix(c, u_hat));
        logits = add(logits, routing_agree(u_hat, v));
    }
    res.v = v;
    return res;
}

// Single-sample routing per the module contract: u_hat [P x J x D].
template <typename S>
DigitCapsOutput<S> routing(const Tensor<S>& u_hat, int iterations) {
    if (u_hat.ndim() != 3)
        throw DimensionError("routing: expected [P x J x D], got " + shape_str(u_hat.shape()));
    const int64_t P = u_hat.dim(0), J = u_hat.dim(1), D = u_hat.dim(2);
    auto res = routing_batched(reshape(u_hat, {1, P, J, D}), iterations);
    DigitCapsOutput<S> out;
    out.capsules = reshape(res.v, {J, D});
    out.lengths = vec_norm(out.capsules);
    return out;
}

// Image batch [B x 1 x H x W] to digit capsules [B x J x D].
template <typename S>
Tensor<S> digit_caps_batched(const CapsNetModel<S>& m, const Tensor<S>& images) {
    const auto& cfg = m.cfg;
    if (images.ndim() != 4 || images.dim(1) != 1 || images.dim(2) != cfg.image_h || images.dim(3) != cfg.image_w)
        throw DimensionError("forward: expected [B x 1 x " + std::to_string(cfg.image_h) + " x " +
                             std::to_string(cfg.image_w) + "], got " + shape_str(images.shape()));
    Tensor<S> h = relu(conv2d(images, m.conv1_kernels, m.conv1_bias, cfg.conv1_stride));
    Tensor<S> pc = conv2d(h, m.primary_kernels, m.primary_bias, cfg.primary_stride);
    Tensor<S> u = squash(to_capsules(pc, cfg.primary_maps, cfg.primary_dim));
    Tensor<S> u_hat = caps_predict(m.w_routing, u);
    return routing_batched(u_hat, cfg.routing_iterations).v;
}

// Full forward pass for one image [1 x H x W].
template <typename S>
DigitCapsOutput<S> forward(const CapsNetModel<S>& m, const Tensor<S>& image) {
    if (image.ndim() != 3)
        throw DimensionError("forward: expected [1 x H x W], got " + shape_str(image.shape()));
    Tensor<S> batched = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    Tensor<S> v = digit_caps_batched(m, batched);
    DigitCapsOutput<S> out;
    out.capsules = reshape(v, {m.cfg.num_classes, m.cfg.digit_dim});
    out.lengths = vec_norm(out.capsules);
    return out;
}

// Margin loss, mean over the batch. lengths [B x J].
template <typename S>
Tensor<S> margin_loss_batched(const Tensor<S>& lengths, const std::vector<int>& labels, const CapsNetConfig& cfg) {
    const int64_t B = lengths.dim(0), J = lengths.dim(1);
    if (static_cast<int64_t>(labels.size()) != B)
        throw DimensionError("margin_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(B));
    std::vector<S> pos_w(static_cast<size_t>(B * J), S(0));
    std::vector<S> neg_w(static_cast<size_t>(B * J), static_cast<S>(cfg.lambda));
    for (int64_t b = 0; b < B; ++b) {
        const int lab = labels[static_cast<size_t>(b)];
        if (lab < 0 || lab >= J)
            throw DomainError("margin_loss: label " + std::to_string(lab) + " outside 0.." + std::to_string(J - 1));
        pos_w[static_cast<size_t>(b * J + lab)] = S(1);
        neg_w[static_cast<size_t>(b * J + lab)] = S(0);
    }
    Tensor<S> tpos = Tensor<S>::from_data({B, J}, std::move(pos_w));
    Tensor<S> tneg = Tensor<S>::from_data({B, J}, std::move(neg_w));
    Tensor<S> present = relu(add_scalar(mul_scalar(lengths, S(-1)), static_cast<S>(cfg.m_plus)));
    Tensor<S> absent = relu(add_scalar(lengths, static_cast<S>(-cfg.m_minus)));
    Tensor<S> per_class = add(mul(tpos, mul(present, present)), mul(tneg, mul(absent, absent)));
    return mul_scalar(sum(per_class), static_cast<S>(1.0 / static_cast<double>(B)));
}

// Single-sample margin loss on capsule lengths [J].
template <typename S>
Tensor<S> margin_loss(const Tensor<S>& lengths, int label, const CapsNetConfig& cfg = CapsNetConfig{}) {
    const int64_t J = lengths.numel();
    return margin_loss_batched(reshape(lengths, {1, J}), {label}, cfg);
}

// Decoder: mask all but one capsule per sample, then dense-relu, dense-relu,
// dense-sigmoid to pixel space. Returns [B x pixels].
template <typename S>
Tensor<S> decode_batched(const CapsNetModel<S>& m, const Tensor<S>& capsules, const std::vector<int>& selected) {
    const auto& cfg = m.cfg;
    const int64_t B = capsules.dim(0), J = cfg.num_classes, D = cfg.digit_dim;
    if (capsules.ndim() != 3 || capsules.dim(1) != J || capsules.dim(2) != D)
        throw DimensionError("decode: expected [B x " + std::to_string(J) + " x " + std::to_string(D) +
                             "], got " + shape_str(capsules.shape()));
    if (static_cast<int64_t>(selected.size()) != B)
        throw DimensionError("decode: " + std::to_string(selected.size()) + " class picks for batch of " +
                             std::to_string(B));
    std::vector<S> mask(static_cast<size_t>(B * J * D), S(0));
    for (int64_t b = 0; b < B; ++b) {
        const int cls = selected[static_cast<size_t>(b)];
        if (cls < 0 || cls >= J)
            throw DomainError("decode: class " + std::to_string(cls) + " outside 0.." + std::to_string(J - 1));
        for (int64_t d = 0; d < D; ++d) mask[static_cast<size_t>((b * J + cls) * D + d)] = S(1);
    }
    Tensor<S> masked = mul(capsules, Tensor<S>::from_data({B, J, D}, std::move(mask)));
    Tensor<S> flat = reshape(masked, {B, J * D});
    Tensor<S> h1 = relu(add_bias(matmul(flat, m.dec_w1), m.dec_b1));
    Tensor<S> h2 = relu(add_bias(matmul(h1, m.dec_w2), m.dec_b2));
    return sigmoid(add_bias(matmul(h2, m.dec_w3), m.dec_b3));
}

// Single-sample decode to an image [1 x H x W].
template <typename S>
Tensor<S> decode(const CapsNetModel<S>& m, const Tensor<S>& capsules, int selected) {
    const auto& cfg = m.cfg;
    Tensor<S> caps3 = reshape(capsules, {1, cfg.num_classes, cfg.digit_dim});
    Tensor<S> out = decode_batched(m, caps3, {selected});
    return reshape(out, {1, cfg.image_h, cfg.image_w});
}

// Margin loss plus mu * per-pixel-mean reconstruction MSE, averaged over the
// batch. The decoder is conditioned on the true labels.
template <typename S>
Tensor<S> overall_loss_batched(const CapsNetModel<S>& m, const Tensor<S>& images, const std::vector<int>& labels) {
    const auto& cfg = m.cfg;
    const int64_t B = images.dim(0);
    Tensor<S> v = digit_caps_batched(m, images);
    Tensor<S> lengths = vec_norm(v);
    Tensor<S> margin = margin_loss_batched(lengths, labels, cfg);
    Tensor<S> recon = decode_batched(m, v, labels);
    Tensor<S> diff = sub(recon, reshape(images, {B, cfg.pixels()}));
    Tensor<S> mse = mul_scalar(sum(mul(diff, diff)), static_cast<S>(1.0 / static_cast<double>(B * cfg.pixels())));
    return add(margin, mul_scalar(mse, static_cast<S>(cfg.mu)));
}

template <typename S>
Tensor<S> overall_loss(const CapsNetModel<S>& m, const Tensor<S>& image, int label) {
    const auto& cfg = m.cfg;
    Tensor<S> batched = reshape(image, {1, 1, cfg.image_h, cfg.image_w});
    return overall_loss_batched(m, batched, {label});
}

// Argmax of capsule lengths; ties go to the lowest class index.
template <typename S>
int classify_lengths(const Tensor<S>& lengths) {
    int best = 0;
    for (int64_t j = 1; j < lengths.numel(); ++j)
        if (lengths.data()[j] > lengths.data()[best]) best = static_cast<int>(j);
    return best;
}

template <typename S>
int classify(const CapsNetModel<S>& m, const Tensor<S>& image) {
    return classify_lengths(forward(m, image).lengths);
}

// Fraction of correct argmax predictions, evaluated in inference mode.
template <typename S>
double evaluate_accuracy(CapsNetModel<S>& m, const ImageDataset<S>& data, int64_t batch_size = 100) {
    if (data.size() == 0) throw DomainError("evaluate_accuracy: empty dataset");
    m.set_parameters_requires_grad(false);
    const auto& cfg = m.cfg;
    int64_t correct = 0;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t bs = std::min(batch_size, data.size() - start);
        std::vector<S> pix(data.pixels.begin() + start * cfg.pixels(),
                           data.pixels.begin() + (start + bs) * cfg.pixels());
        Tensor<S> images = Tensor<S>::from_data({bs, 1, cfg.image_h, cfg.image_w}, std::move(pix));
        Tensor<S> v = digit_caps_batched(m, images);
        Tensor<S> lengths = vec_norm(v);
        for (int64_t b = 0; b < bs; ++b) {
            int best = 0;
            const S* row = lengths.data() + b * cfg.num_classes;
            for (int64_t j = 1; j < cfg.num_classes; ++j)
                if (row[j] > row[best]) best = static_cast<int>(j);
            if (best == data.labels[static_cast<size_t>(start + b)]) ++correct;
        }
    }
    m.set_parameters_requires_grad(true);
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Shuffled mini-batch Adam on the overall loss. Returns per-epoch mean loss.
// Identical model/seed/data give an identical history and final parameters.
// on_epoch (when set) runs after each epoch with (epochs_so_far, mean_loss).
template <typename S>
std::vector<double> train(CapsNetModel<S>& m, const ImageDataset<S>& data, int epochs, int64_t batch_size,
                          uint64_t seed, const std::function<void(int, double)>& on_epoch = {}) {
    if (data.size() == 0) throw DomainError("train: empty dataset");
    if (batch_size < 1) throw DomainError("train: batch_size must be >= 1");
    const auto& cfg = m.cfg;
    if (data.height != cfg.image_h || data.width != cfg.image_w)
        throw DimensionError("train: dataset images " + std::to_string(data.height) + "x" +
                             std::to_string(data.width) + " do not match the model");
    AdamOptimizer<S> opt(m.parameters());
    Rng rng(seed);
    const int64_t n = data.size();
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> history;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (int64_t start = 0; start < n; start += batch_size) {
            const int64_t bs = std::min(batch_size, n - start);
            std::vector<S> pix(static_cast<size_t>(bs * cfg.pixels()));
            std::vector<int> labels(static_cast<size_t>(bs));
            for (int64_t b = 0; b < bs; ++b) {
                const int64_t i = order[static_cast<size_t>(start + b)];
                std::copy_n(data.image(i), cfg.pixels(), pix.begin() + b * cfg.pixels());
                labels[static_cast<size_t>(b)] = data.labels[static_cast<size_t>(i)];
            }
            Tensor<S> images = Tensor<S>::from_data({bs, 1, cfg.image_h, cfg.image_w}, std::move(pix));
            Tensor<S> loss = overall_loss_batched(m, images, labels);
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(bs);
        }
        history.push_back(loss_sum / static_cast<double>(n));
        m.trained_epochs += 1;
        if (on_epoch) on_epoch(static_cast<int>(m.trained_epochs), history.back());
    }
    return history;
}

}  // namespace capsdec
