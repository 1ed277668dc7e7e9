#include "pimae/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pimae/error.hpp"

namespace pimae::tokenizer {

namespace {

template <typename T>
std::vector<std::size_t> indices_where(const std::vector<std::uint8_t>& flags, T want) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        if (static_cast<bool>(flags[i]) == static_cast<bool>(want)) out.push_back(i);
    }
    return out;
}

// Partial Fisher-Yates: moves `count` uniformly chosen elements to the front.
template <typename T>
void choose_front(std::vector<T>& items, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count && i < items.size(); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
        std::swap(items[i], items[pick(rng)]);
    }
}

void check_ratio(double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        fail(ErrorKind::InvalidArgument, "masking ratio must lie in [0,1), got " + std::to_string(ratio));
    }
}

}  // namespace

std::string_view to_string(MaskStrategy strategy) {
    switch (strategy) {
        case MaskStrategy::Random: return "random";
        case MaskStrategy::Uniform: return "uniform";
        case MaskStrategy::Complement: return "complement";
    }
    return "random";
}

MaskStrategy parse_strategy(std::string_view name) {
    if (name == "random") return MaskStrategy::Random;
    if (name == "uniform") return MaskStrategy::Uniform;
    if (name == "complement") return MaskStrategy::Complement;
    fail(ErrorKind::TypeError, "unknown masking strategy '" + std::string(name) + "'");
}

std::size_t masked_count(double ratio, std::size_t count) {
    check_ratio(ratio);
    // Guard against products like 0.29 * 100 = 28.999999999999996.
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(count) + 1e-9));
}

std::vector<std::size_t> PointTokenSet::visible_indices() const { return indices_where(visible, true); }
std::vector<std::size_t> PointTokenSet::masked_indices() const { return indices_where(visible, false); }
std::vector<std::size_t> ImagePatchSet::visible_indices() const { return indices_where(visible, true); }
std::vector<std::size_t> ImagePatchSet::masked_indices() const { return indices_where(visible, false); }

PointTokenSet cluster_points(std::span<const Point3> points, std::size_t m, std::size_t k, std::size_t seed_index) {
    if (m == 0 || k == 0) fail(ErrorKind::InvalidArgument, "cluster and group counts must be positive");
    PointTokenSet tokens;
    tokens.center_indices = geometry::farthest_point_sampling(points, m, seed_index);
    if (k > points.size()) {
        fail(ErrorKind::TooFewPoints,
             "group size " + std::to_string(k) + " exceeds " + std::to_string(points.size()) + " points");
    }
    tokens.group_size = k;
    tokens.centers.reserve(m);
    tokens.groups.reserve(m * k);
    for (std::size_t c : tokens.center_indices) {
        tokens.centers.push_back(points[c]);
        auto group = geometry::knn_group(points, c, k);
        tokens.groups.insert(tokens.groups.end(), group.begin(), group.end());
    }
    return tokens;
}

void sample_point_mask(PointTokenSet& tokens, double ratio, Rng& rng) {
    const std::size_t m = tokens.cluster_count();
    const std::size_t n_masked = masked_count(ratio, m);
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    choose_front(order, n_masked, rng);
    tokens.visible.assign(m, 1);
    for (std::size_t i = 0; i < n_masked; ++i) tokens.visible[order[i]] = 0;
}

ImagePatchSet patchify_image(const Image& image, const PatchGrid& grid) {
    if (image.height != grid.height() || image.width != grid.width() ||
        image.rgb.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
        fail(ErrorKind::ShapeMismatch, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                           " does not match patch grid " + std::to_string(grid.height()) + "x" +
                                           std::to_string(grid.width()));
    }
    const int s = grid.patch_size();
    ImagePatchSet out{grid, static_cast<std::size_t>(s) * s * 3, {}, {}};
    out.values.reserve(out.patch_count() * out.patch_dim);
    for (int pr = 0; pr < grid.rows(); ++pr) {
        for (int pc = 0; pc < grid.cols(); ++pc) {
            for (int dy = 0; dy < s; ++dy) {
                for (int dx = 0; dx < s; ++dx) {
                    for (int ch = 0; ch < 3; ++ch) out.values.push_back(image.at(pr * s + dy, pc * s + dx, ch));
                }
            }
        }
    }
    return out;
}

MaskAlignment project_hits(const PointTokenSet& tokens, const CameraModel& cam, const PatchGrid& grid) {
    if (tokens.visible.size() != tokens.cluster_count()) {
        fail(ErrorKind::InvalidArgument, "point mask must be sampled before projecting hits");
    }
    MaskAlignment align;
    for (std::size_t c = 0; c < tokens.cluster_count(); ++c) {
        auto projected = geometry::try_project_point(tokens.centers[c], cam);
        std::optional<int> index;
        if (projected) index = geometry::patch_index(*projected, grid);
        if (!index) {
            ++align.dropped;
            continue;
        }
        (tokens.visible[c] ? align.hit_visible : align.hit_masked).push_back(*index);
    }
    for (auto* hits : {&align.hit_visible, &align.hit_masked}) {
        std::sort(hits->begin(), hits->end());
        hits->erase(std::unique(hits->begin(), hits->end()), hits->end());
    }
    return align;
}

MaskAlignment build_image_mask(const PointTokenSet& tokens, const CameraModel& cam, ImagePatchSet& patches,
                               MaskStrategy strategy, double ratio, Rng& rng) {
    const std::size_t total = patches.patch_count();
    const std::size_t target = masked_count(ratio, total);
    MaskAlignment align = project_hits(tokens, cam, patches.grid);
    align.strategy = strategy;

    patches.visible.assign(total, 1);
    if (strategy == MaskStrategy::Random) {
        std::vector<std::size_t> order(total);
        for (std::size_t i = 0; i < total; ++i) order[i] = i;
        choose_front(order, target, rng);
        for (std::size_t i = 0; i < target; ++i) patches.visible[order[i]] = 0;
        return align;
    }

    // 0 = free, 1 = primary (visible-center hit), 2 = secondary (masked-center hit only).
    std::vector<std::uint8_t> role(total, 0);
    for (int p : align.hit_masked) role[static_cast<std::size_t>(p)] = 2;
    for (int p : align.hit_visible) role[static_cast<std::size_t>(p)] = 1;
    std::vector<std::size_t> primary, secondary, free;
    for (std::size_t p = 0; p < total; ++p) {
        (role[p] == 1 ? primary : role[p] == 2 ? secondary : free).push_back(p);
    }

    if (strategy == MaskStrategy::Complement) {
        const std::size_t n_masked = std::max(target, primary.size());
        for (std::size_t p : primary) patches.visible[p] = 0;
        std::size_t extra = n_masked - primary.size();
        choose_front(free, extra, rng);
        const std::size_t from_free = std::min(extra, free.size());
        for (std::size_t i = 0; i < from_free; ++i) patches.visible[free[i]] = 0;
        // Secondary hits give way only when the free patches cannot reach the target.
        extra -= from_free;
        choose_front(secondary, extra, rng);
        for (std::size_t i = 0; i < extra; ++i) patches.visible[secondary[i]] = 0;
    } else {
        const std::size_t n_masked = std::min(std::max(target, secondary.size()), total - primary.size());
        for (std::size_t p : secondary) patches.visible[p] = 0;
        const std::size_t extra = n_masked - secondary.size();
        choose_front(free, extra, rng);
        for (std::size_t i = 0; i < extra; ++i) patches.visible[free[i]] = 0;
    }
    return align;
}

}  // namespace pimae::tokenizer
