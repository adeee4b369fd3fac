#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "capsdec/capsnet.hpp"
#include "capsdec/errors.hpp"
#include "capsdec/tensor.hpp"

namespace capsdec {

// Checkpoint container: a human-readable key/value header followed by named
// tensors stored as little-endian 32-bit floats. Round-trips bit-exactly.
struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::string kind;
    std::vector<std::pair<std::string, std::string>> header;
    std::vector<NamedTensor> tensors;

    void put(const std::string& key, const std::string& value) { header.emplace_back(key, value); }
    void put_int(const std::string& key, int64_t v) { put(key, std::to_string(v)); }
    void put_u64(const std::string& key, uint64_t v) { put(key, std::to_string(v)); }
    void put_double(const std::string& key, double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        put(key, buf);
    }

    const std::string& get(const std::string& key) const {
        for (const auto& [k, v] : header)
            if (k == key) return v;
        throw FormatError("checkpoint: missing header key '" + key + "'");
    }
    int64_t get_int(const std::string& key) const { return std::stoll(get(key)); }
    uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }
    double get_double(const std::string& key) const { return std::stod(get(key)); }

    const NamedTensor& tensor(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw FormatError("checkpoint: missing tensor '" + name + "'");
    }
};

namespace detail {

inline void write_f32_le(std::ostream& os, const float* data, size_t n) {
    std::vector<unsigned char> buf(n * 4);
    for (size_t i = 0; i < n; ++i) {
        const uint32_t bits = std::bit_cast<uint32_t>(data[i]);
        buf[i * 4 + 0] = static_cast<unsigned char>(bits & 0xff);
        buf[i * 4 + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
        buf[i * 4 + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
        buf[i * 4 + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void read_f32_le(std::istream& is, float* data, size_t n, const std::string& what) {
    std::vector<unsigned char> buf(n * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<size_t>(is.gcount()) != buf.size())
        throw FormatError("checkpoint: truncated tensor data for '" + what + "'");
    for (size_t i = 0; i < n; ++i) {
        const uint32_t bits = static_cast<uint32_t>(buf[i * 4 + 0]) | (static_cast<uint32_t>(buf[i * 4 + 1]) << 8) |
                              (static_cast<uint32_t>(buf[i * 4 + 2]) << 16) |
                              (static_cast<uint32_t>(buf[i * 4 + 3]) << 24);
        data[i] = std::bit_cast<float>(bits);
    }
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
    os << "capsdec-checkpoint v1\n";
    os << "kind " << ckpt.kind << "\n";
    for (const auto& [k, v] : ckpt.header) os << k << " " << v << "\n";
    os << "tensors " << ckpt.tensors.size() << "\n";
    for (const auto& t : ckpt.tensors) {
        os << "tensor " << t.name << " " << t.shape.size();
        for (int64_t d : t.shape) os << " " << d;
        os << "\n";
        detail::write_f32_le(os, t.data.data(), t.data.size());
    }
    if (!os) throw FormatError("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line != "capsdec-checkpoint v1")
        throw FormatError("checkpoint: bad magic line in '" + path + "'");
    Checkpoint ckpt;
    if (!std::getline(is, line) || line.rfind("kind ", 0) != 0)
        throw FormatError("checkpoint: missing kind line in '" + path + "'");
    ckpt.kind = line.substr(5);
    size_t tensor_count = 0;
    while (std::getline(is, line)) {
        if (line.rfind("tensors ", 0) == 0) {
            tensor_count = std::stoul(line.substr(8));
            break;
        }
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw FormatError("checkpoint: malformed header line '" + line + "'");
        ckpt.header.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    for (size_t i = 0; i < tensor_count; ++i) {
        if (!std::getline(is, line) || line.rfind("tensor ", 0) != 0)
            throw FormatError("checkpoint: missing tensor descriptor " + std::to_string(i));
        std::istringstream ls(line.substr(7));
        NamedTensor t;
        size_t ndim = 0;
        ls >> t.name >> ndim;
        t.shape.resize(ndim);
        for (auto& d : t.shape) ls >> d;
        if (!ls) throw FormatError("checkpoint: malformed tensor descriptor '" + line + "'");
        t.data.resize(static_cast<size_t>(shape_numel(t.shape)));
        detail::read_f32_le(is, t.data.data(), t.data.size(), t.name);
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

// ---- CapsNet <-> checkpoint ------------------------------------------------

inline void save_capsnet(const std::string& path, CapsNetModel<float>& m) {
    Checkpoint ckpt;
    ckpt.kind = "capsnet";
    const auto& c = m.cfg;
    ckpt.put_int("image_h", c.image_h);
    ckpt.put_int("image_w", c.image_w);
    ckpt.put_int("conv1_channels", c.conv1_channels);
    ckpt.put_int("kernel", c.kernel);
    ckpt.put_int("conv1_stride", c.conv1_stride);
    ckpt.put_int("primary_maps", c.primary_maps);
    ckpt.put_int("primary_dim", c.primary_dim);
    ckpt.put_int("primary_stride", c.primary_stride);
    ckpt.put_int("num_classes", c.num_classes);
    ckpt.put_int("digit_dim", c.digit_dim);
    ckpt.put_int("decoder_hidden1", c.decoder_hidden1);
    ckpt.put_int("decoder_hidden2", c.decoder_hidden2);
    ckpt.put_int("routing_iterations", c.routing_iterations);
    ckpt.put_double("m_plus", c.m_plus);
    ckpt.put_double("m_minus", c.m_minus);
    ckpt.put_double("lambda", c.lambda);
    ckpt.put_double("mu", c.mu);
    ckpt.put_u64("seed", m.seed);
    ckpt.put_int("epochs", m.trained_epochs);
    for (auto& [name, t] : m.named_parameters())
        ckpt.tensors.push_back({name, t.shape(), t.value()});
    write_checkpoint(path, ckpt);
}

inline CapsNetModel<float> load_capsnet(const std::string& path) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.kind != "capsnet")
        throw FormatError("checkpoint '" + path + "' holds kind '" + ckpt.kind + "', expected capsnet");
    CapsNetConfig c;
    c.image_h = ckpt.get_int("image_h");
    c.image_w = ckpt.get_int("image_w");
    c.conv1_channels = ckpt.get_int("conv1_channels");
    c.kernel = ckpt.get_int("kernel");
    c.conv1_stride = ckpt.get_int("conv1_stride");
    c.primary_maps = ckpt.get_int("primary_maps");
    c.primary_dim = ckpt.get_int("primary_dim");
    c.primary_stride = ckpt.get_int("primary_stride");
    c.num_classes = ckpt.get_int("num_classes");
    c.digit_dim = ckpt.get_int("digit_dim");
    c.decoder_hidden1 = ckpt.get_int("decoder_hidden1");
    c.decoder_hidden2 = ckpt.get_int("decoder_hidden2");
    c.routing_iterations = static_cast<int>(ckpt.get_int("routing_iterations"));
    c.m_plus = ckpt.get_double("m_plus");
    c.m_minus = ckpt.get_double("m_minus");
    c.lambda = ckpt.get_double("lambda");
    c.mu = ckpt.get_double("mu");
    CapsNetModel<float> m = make_capsnet<float>(c, ckpt.get_u64("seed"));
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
