#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "capsdec/errors.hpp"

namespace capsdec {

// Binary PGM (P5, maxval 255); pixels in [0,1] are clamped and scaled.
inline void write_pgm(const std::string& path, const std::vector<float>& pixels, int64_t h, int64_t w) {
    if (static_cast<int64_t>(pixels.size()) != h * w)
        throw DimensionError("write_pgm: " + std::to_string(pixels.size()) + " pixels for " + std::to_string(h) +
                             "x" + std::to_string(w));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> raw(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, pixels[i]));
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw FormatError("write failed for '" + path + "'");
}

}  // namespace capsdec
