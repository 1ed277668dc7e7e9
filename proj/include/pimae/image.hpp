#pragma once

#include <cstddef>
#include <vector>

namespace pimae {

/// RGB image, row-major height x width x 3, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> rgb;

    Image() = default;
    Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0.0) {}

    double& at(int row, int col, int channel) {
        return rgb[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
    }
    double at(int row, int col, int channel) const {
        return rgb[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace pimae
