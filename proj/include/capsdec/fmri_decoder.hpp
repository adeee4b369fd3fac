#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "capsdec/adam.hpp"
#include "capsdec/checkpoint.hpp"
#include "capsdec/errors.hpp"
#include "capsdec/rng.hpp"
#include "capsdec/tensor.hpp"

namespace capsdec {

// Fully connected k -> hidden -> hidden -> |classes| x digit_dim regressor
// from selected voxel values to the digit-capsule coordinates of the
// candidate classes. ReLU hidden layers, linear output.
template <typename S = float>
struct FmriDecoderModel {
    std::vector<int> candidate_classes;        // ordered, e.g. {6, 9}
    std::vector<int64_t> input_voxel_indices;  // copy of EncodingModel::selected
    int64_t digit_dim = 16;
    uint64_t seed = 0;
    int64_t trained_epochs = 0;
    Tensor<S> w1, b1, w2, b2, w3, b3;

    int64_t input_size() const { return static_cast<int64_t>(input_voxel_indices.size()); }
    int64_t output_size() const { return static_cast<int64_t>(candidate_classes.size()) * digit_dim; }

    std::vector<Tensor<S>> parameters() { return {w1, b1, w2, b2, w3, b3}; }

    std::vector<std::pair<std::string, Tensor<S>>> named_parameters() {
        return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3}, {"b3", b3}};
    }
};

template <typename S = float>
FmriDecoderModel<S> make_fmri_decoder(std::vector<int64_t> voxel_indices, std::vector<int> candidate_classes,
                                      uint64_t seed, int64_t hidden1 = 64, int64_t hidden2 = 64,
                                      int64_t digit_dim = 16) {
    if (voxel_indices.empty()) throw DomainError("fmri_decoder: empty voxel index set");
    if (candidate_classes.size() < 2) throw DomainError("fmri_decoder: need at least 2 candidate classes");
    FmriDecoderModel<S> m;
    m.candidate_classes = std::move(candidate_classes);
    m.input_voxel_indices = std::move(voxel_indices);
    m.digit_dim = digit_dim;
    m.seed = seed;
    Rng rng(seed);
    const int64_t k = m.input_size();
    const int64_t out = m.output_size();
    m.w1 = detail::init_trunc_normal<S>(rng, {k, hidden1}, 0.1 / std::sqrt(static_cast<double>(k)));
    m.b1 = Tensor<S>::zeros({hidden1}, true);
    m.w2 = detail::init_trunc_normal<S>(rng, {hidden1, hidden2}, 0.1 / std::sqrt(static_cast<double>(hidden1)));
    m.b2 = Tensor<S>::zeros({hidden2}, true);
    m.w3 = detail::init_trunc_normal<S>(rng, {hidden2, out}, 0.1 / std::sqrt(static_cast<double>(hidden2)));
    m.b3 = Tensor<S>::zeros({out}, true);
    return m;
}

// Forward pass for a batch [B x k]; no squash on the outputs, the targets
// are already-squashed capsule vectors.
template <typename S>
Tensor<S> decoder_forward(const FmriDecoderModel<S>& m, const Tensor<S>& inputs) {
    if (inputs.ndim() != 2 || inputs.dim(1) != m.input_size())
        throw DimensionError("fmri_decoder: expected [B x " + std::to_string(m.input_size()) + "], got " +
                             shape_str(inputs.shape()));
    Tensor<S> h1 = relu(add_bias(matmul(inputs, m.w1), m.b1));
    Tensor<S> h2 = relu(add_bias(matmul(h1, m.w2), m.b2));
    return add_bias(matmul(h2, m.w3), m.b3);
}

// Predicted capsule block [|classes| x digit_dim] for one voxel vector.
template <typename S>
Tensor<S> predict_capsules(const FmriDecoderModel<S>& m, const std::vector<S>& voxels_k) {
    if (static_cast<int64_t>(voxels_k.size()) != m.input_size())
        throw DimensionError("predict_capsules: got " + std::to_string(voxels_k.size()) + " voxels, expected " +
                             std::to_string(m.input_size()));
    Tensor<S> in = Tensor<S>::from_data({1, m.input_size()}, voxels_k);
    Tensor<S> out = decoder_forward(m, in);
    return reshape(out, {static_cast<int64_t>(m.candidate_classes.size()), m.digit_dim});
}

// Mini-batch Adam on the mean squared error over all outputs. inputs is
// N x k, targets N x (|classes| * digit_dim). Deterministic under seed.
template <typename S>
std::vector<double> train_decoder(FmriDecoderModel<S>& m, const std::vector<S>& inputs,
                                  const std::vector<S>& targets, int64_t n_samples, int epochs, uint64_t seed,
                                  int64_t batch_size = 10) {
    const int64_t k = m.input_size();
    const int64_t out = m.output_size();
    if (n_samples < 2) throw DomainError("train_decoder: need at least 2 samples");
    if (static_cast<int64_t>(inputs.size()) != n_samples * k ||
        static_cast<int64_t>(targets.size()) != n_samples * out)
        throw DimensionError("train_decoder: input/target matrix sizes do not match the sample count");
    AdamOptimizer<S> opt(m.parameters());
    Rng rng(seed);
    std::vector<int64_t> order(static_cast<size_t>(n_samples));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> history;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (int64_t start = 0; start < n_samples; start += batch_size) {
            const int64_t bs = std::min(batch_size, n_samples - start);
            std::vector<S> bx(static_cast<size_t>(bs * k));
            std::vector<S> by(static_cast<size_t>(bs * out));
            for (int64_t b = 0; b < bs; ++b) {
                const int64_t i = order[static_cast<size_t>(start + b)];
                std::copy_n(inputs.begin() + i * k, k, bx.begin() + b * k);
                std::copy_n(targets.begin() + i * out, out, by.begin() + b * out);
            }
            Tensor<S> tx = Tensor<S>::from_data({bs, k}, std::move(bx));
            Tensor<S> ty = Tensor<S>::from_data({bs, out}, std::move(by));
            Tensor<S> diff = sub(decoder_forward(m, tx), ty);
            Tensor<S> loss = mul_scalar(sum(mul(diff, diff)), static_cast<S>(1.0 / static_cast<double>(bs * out)));
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(bs);
        }
        history.push_back(loss_sum / static_cast<double>(n_samples));
        m.trained_epochs += 1;
    }
    return history;
}

// ---- serialization -----------------------------------------------------------

inline void save_fmri_decoder(const std::string& path, FmriDecoderModel<float>& m) {
    Checkpoint ckpt;
    ckpt.kind = "fmri_decoder";
    ckpt.put_int("k", m.input_size());
    ckpt.put_int("hidden1", m.w1.dim(1));
    ckpt.put_int("hidden2", m.w2.dim(1));
    ckpt.put_int("digit_dim", m.digit_dim);
    ckpt.put_u64("seed", m.seed);
    ckpt.put_int("epochs", m.trained_epochs);
    std::string classes;
    for (size_t i = 0; i < m.candidate_classes.size(); ++i)
        classes += (i ? " " : "") + std::to_string(m.candidate_classes[i]);
    ckpt.put("classes", classes);
    std::vector<float> idx(m.input_voxel_indices.begin(), m.input_voxel_indices.end());
    ckpt.tensors.push_back({"input_voxel_indices", {static_cast<int64_t>(idx.size())}, std::move(idx)});
    for (auto& [name, t] : m.named_parameters())
        ckpt.tensors.push_back({name, t.shape(), t.value()});
    write_checkpoint(path, ckpt);
}

inline FmriDecoderModel<float> load_fmri_decoder(const std::string& path) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.kind != "fmri_decoder")
        throw FormatError("checkpoint '" + path + "' holds kind '" + ckpt.kind + "', expected fmri_decoder");
    std::vector<int> classes;
    {
        std::istringstream ss(ckpt.get("classes"));
        int c;
        while (ss >> c) classes.push_back(c);
    }
    const auto& idx = ckpt.tensor("input_voxel_indices").data;
    FmriDecoderModel<float> m = make_fmri_decoder<float>(std::vector<int64_t>(idx.begin(), idx.end()),
                                                         std::move(classes), ckpt.get_u64("seed"),
                                                         ckpt.get_int("hidden1"), ckpt.get_int("hidden2"),
                                                         ckpt.get_int("digit_dim"));
    m.trained_epochs = ckpt.get_int("epochs");
    for (auto& [name, t] : m.named_parameters()) {
        const NamedTensor& src = ckpt.tensor(name);
        if (src.shape != t.shape())
            throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape) +
                              ", model expects " + shape_str(t.shape()));
        t.value() = src.data;
    }
    return m;
}

}  // namespace capsdec
