#include "pimae/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "pimae/error.hpp"

namespace pimae::geometry {

namespace {

constexpr double kMinDepth = 1e-9;

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::array<double, 3> homogeneous(const Point3& p, const CameraModel& cam) {
    const auto& rt = cam.extrinsics;
    const auto& k = cam.intrinsics;
    std::array<double, 4> cam_point{};
    for (int r = 0; r < 4; ++r) {
        cam_point[r] = rt[r * 4 + 0] * p.x + rt[r * 4 + 1] * p.y + rt[r * 4 + 2] * p.z + rt[r * 4 + 3];
    }
    std::array<double, 3> h{};
    for (int r = 0; r < 3; ++r) {
        h[r] = k[r * 4 + 0] * cam_point[0] + k[r * 4 + 1] * cam_point[1] + k[r * 4 + 2] * cam_point[2] +
               k[r * 4 + 3] * cam_point[3];
    }
    return h;
}

}  // namespace

void CameraModel::validate(int patch_size) const {
    if (!all_finite(intrinsics) || !all_finite(extrinsics)) {
        fail(ErrorKind::InvalidArgument, "camera matrices contain non-finite entries");
    }
    if (height <= 0 || width <= 0) {
        fail(ErrorKind::InvalidArgument, "camera image size must be positive");
    }
    if (patch_size <= 0 || height % patch_size != 0 || width % patch_size != 0) {
        fail(ErrorKind::InvalidArgument, "image size " + std::to_string(height) + "x" + std::to_string(width) +
                                             " not divisible by patch size " + std::to_string(patch_size));
    }
}

PatchGrid::PatchGrid(int patch_size, int height, int width) {
    if (patch_size <= 0 || height <= 0 || width <= 0 || height % patch_size != 0 || width % patch_size != 0) {
        fail(ErrorKind::ShapeMismatch, "image " + std::to_string(height) + "x" + std::to_string(width) +
                                           " is not tiled by patch size " + std::to_string(patch_size));
    }
    patch_size_ = patch_size;
    rows_ = height / patch_size;
    cols_ = width / patch_size;
}

std::optional<Projected2> try_project_point(const Point3& p, const CameraModel& cam) {
    const auto h = homogeneous(p, cam);
    if (!(h[2] > kMinDepth)) return std::nullopt;
    return Projected2{h[0] / h[2], h[1] / h[2], h[2]};
}

Projected2 project_point(const Point3& p, const CameraModel& cam) {
    auto projected = try_project_point(p, cam);
    if (!projected) {
        fail(ErrorKind::DepthNonPositive, "point projects behind or onto the camera plane");
    }
    return *projected;
}

std::optional<int> patch_index(const Projected2& p, const PatchGrid& grid) {
    if (!std::isfinite(p.u) || !std::isfinite(p.v)) return std::nullopt;
    if (p.u < 0.0 || p.v < 0.0 || p.u >= grid.width() || p.v >= grid.height()) return std::nullopt;
    const int col_pixel = static_cast<int>(std::floor(p.u));
    const int row_pixel = static_cast<int>(std::floor(p.v));
    const int s = grid.patch_size();
    return (row_pixel / s) * (grid.width() / s) + col_pixel / s;
}

std::vector<std::size_t> farthest_point_sampling(std::span<const Point3> points, std::size_t m,
                                                 std::size_t seed_index) {
    const std::size_t n = points.size();
    if (m > n) {
        fail(ErrorKind::TooFewPoints,
             "requested " + std::to_string(m) + " centers from " + std::to_string(n) + " points");
    }
    if (m == 0) return {};
    if (seed_index >= n) {
        fail(ErrorKind::InvalidArgument, "seed index " + std::to_string(seed_index) + " out of range");
    }

    std::vector<std::size_t> centers;
    centers.reserve(m);
    // -1 marks an already selected point so duplicates are never re-picked.
    std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
    std::size_t current = seed_index;
    for (std::size_t step = 0; step < m; ++step) {
        centers.push_back(current);
        min_dist[current] = -1.0;
        if (step + 1 == m) break;
        std::size_t best = n;
        double best_dist = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (min_dist[i] < 0.0) continue;
            min_dist[i] = std::min(min_dist[i], squared_distance(points[i], points[current]));
            if (min_dist[i] > best_dist) {
                best_dist = min_dist[i];
                best = i;
            }
        }
        current = best;
    }
    return centers;
}

std::vector<std::size_t> knn_group(std::span<const Point3> points, std::size_t center_index, std::size_t k) {
    const std::size_t n = points.size();
    if (k > n) {
        fail(ErrorKind::TooFewPoints, "requested " + std::to_string(k) + " neighbors from " + std::to_string(n) +
                                          " points");
    }
    if (center_index >= n) {
        fail(ErrorKind::InvalidArgument, "center index " + std::to_string(center_index) + " out of range");
    }
    std::vector<std::pair<double, std::size_t>> keyed(n);
    const Point3& center = points[center_index];
    for (std::size_t i = 0; i < n; ++i) keyed[i] = {squared_distance(points[i], center), i};
    // The center ranks ahead of any coincident duplicates.
    keyed[center_index].first = -1.0;
    std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = keyed[i].second;
    return out;
}

}  // namespace pimae::geometry
