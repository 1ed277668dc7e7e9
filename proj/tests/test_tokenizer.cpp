#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "pimae/error.hpp"
#include "pimae/tokenizer.hpp"

using namespace pimae;
using namespace pimae::tokenizer;

namespace {

CameraModel pixel_camera(int h, int w) {
    // Maps (x, y, 1) straight to pixel (x, y).
    CameraModel cam;
    cam.intrinsics = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
    cam.extrinsics = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    cam.height = h;
    cam.width = w;
    return cam;
}

// One cluster per listed pixel, visible flags as given.
PointTokenSet tokens_at(const std::vector<std::pair<double, double>>& pixels, const std::vector<std::uint8_t>& vis) {
    PointTokenSet t;
    t.group_size = 1;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        t.centers.push_back({pixels[i].first, pixels[i].second, 1.0});
        t.center_indices.push_back(i);
        t.groups.push_back(i);
    }
    t.visible = vis;
    return t;
}

std::pair<double, double> centre_of(int patch, const PatchGrid& g) {
    const int r = patch / g.cols(), c = patch % g.cols();
    return {c * g.patch_size() + 3.5, r * g.patch_size() + 7.25};
}

}  // namespace

TEST_CASE("masked_count") {
    CHECK(masked_count(0.6, 128) == 76);
    CHECK(masked_count(0.6, 352) == 211);
    CHECK(masked_count(0.0, 10) == 0);
    CHECK(masked_count(0.29, 100) == 29);
    CHECK_THROWS_AS(masked_count(1.0, 10), Error);
}

TEST_CASE("cluster_points examples") {
    std::mt19937_64 rng(1);
    auto pts = oracle::random_points(rng, 2048);
    auto tokens = cluster_points(pts, 128, 16);
    CHECK(tokens.cluster_count() == 128);
    CHECK(tokens.groups.size() == 128 * 16);
    CHECK(tokens.center_indices == geometry::farthest_point_sampling(pts, 128, 0));
    for (std::size_t c = 0; c < 128; ++c) CHECK(tokens.group(c)[0] == tokens.center_indices[c]);

    auto single = cluster_points(pts, 1, pts.size());
    std::set<std::size_t> covered(single.groups.begin(), single.groups.end());
    CHECK(covered.size() == pts.size());

    std::vector<Point3> few(4);
    CHECK_THROWS_AS(cluster_points(few, 5, 1), Error);
}

TEST_CASE("sample_point_mask counts") {
    std::mt19937_64 rng(2);
    auto pts = oracle::random_points(rng, 512);
    auto tokens = cluster_points(pts, 128, 4);
    Rng mask_rng(9);
    sample_point_mask(tokens, 0.6, mask_rng);
    CHECK(tokens.masked_indices().size() == 76);
    CHECK(tokens.visible_indices().size() == 52);
    sample_point_mask(tokens, 0.0, mask_rng);
    CHECK(tokens.masked_indices().empty());
}

TEST_CASE("patchify_image layout") {
    Image img(256, 352);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<double>(i % 997) / 997.0;
    PatchGrid grid(16, 256, 352);
    auto patches = patchify_image(img, grid);
    CHECK(patches.patch_count() == 352);
    CHECK(patches.patch_dim == 768);
    // Patch 24 = row 1, col 2.
    auto p = patches.patch(24);
    CHECK(p[0] == img.at(16, 32, 0));
    CHECK(p[(5 * 16 + 7) * 3 + 2] == img.at(21, 39, 2));

    Image small(16, 16);
    small.rgb[17] = 0.5;
    auto one = patchify_image(small, PatchGrid(16, 16, 16));
    CHECK(one.values == small.rgb);

    Image bad(250, 352);
    CHECK_THROWS_AS(patchify_image(bad, grid), Error);
    CHECK_THROWS_AS(PatchGrid(16, 250, 352), Error);
}

TEST_CASE("patch order consistency over every pixel") {
    PatchGrid grid(16, 256, 352);
    Image img(256, 352);
    for (int r = 0; r < 256; ++r)
        for (int c = 0; c < 352; ++c) img.at(r, c, 0) = r * 352 + c;  // unique tag per pixel
    auto patches = patchify_image(img, grid);
    for (int r = 0; r < 256; ++r) {
        for (int c = 0; c < 352; ++c) {
            auto idx = geometry::patch_index({c + 0.5, r + 0.5, 1}, grid);
            REQUIRE(idx.has_value());
            auto patch = patches.patch(static_cast<std::size_t>(*idx));
            const double tag = r * 352 + c;
            bool found = false;
            for (std::size_t i = 0; i < patch.size(); i += 3) found = found || patch[i] == tag;
            REQUIRE(found);
        }
    }
}

TEST_CASE("build_image_mask strategies with fixed hits") {
    PatchGrid grid(16, 64, 80);  // 20 patches
    auto cam = pixel_camera(64, 80);
    Image img(64, 80);
    std::vector<std::pair<double, double>> pix;
    for (int p : {3, 7, 12}) pix.push_back(centre_of(p, grid));
    for (int p : {12, 15}) pix.push_back(centre_of(p, grid));  // 12 conflicts with a visible hit
    pix.push_back({-5.0, 3.0});                                 // out of frame
    auto tokens = tokens_at(pix, {1, 1, 1, 0, 0, 0});

    for (auto strategy : {MaskStrategy::Complement, MaskStrategy::Uniform, MaskStrategy::Random}) {
        auto patches = patchify_image(img, grid);
        Rng rng(4);
        auto align = build_image_mask(tokens, cam, patches, strategy, 0.6, rng);
        CHECK(align.hit_visible == std::vector<int>{3, 7, 12});
        CHECK(align.hit_masked == std::vector<int>{12, 15});
        CHECK(align.dropped == 1);
        CHECK(patches.masked_indices().size() == 12);
        if (strategy == MaskStrategy::Complement) {
            for (int p : {3, 7, 12}) CHECK(patches.visible[p] == 0);
            CHECK(patches.visible[15] == 1);
        } else if (strategy == MaskStrategy::Uniform) {
            for (int p : {3, 7, 12}) CHECK(patches.visible[p] == 1);
            CHECK(patches.visible[15] == 0);
        }
    }
}

TEST_CASE("build_image_mask clamps up to the forced set") {
    PatchGrid grid(16, 32, 32);  // 4 patches
    auto cam = pixel_camera(32, 32);
    Image img(32, 32);
    std::vector<std::pair<double, double>> pix;
    for (int p : {0, 1, 2}) pix.push_back(centre_of(p, grid));
    auto tokens = tokens_at(pix, {1, 1, 1});
    auto patches = patchify_image(img, grid);
    Rng rng(0);
    build_image_mask(tokens, cam, patches, MaskStrategy::Complement, 0.25, rng);
    CHECK(patches.masked_indices() == std::vector<std::size_t>{0, 1, 2});

    // Secondary hits give way once the free patches run out.
    auto secondary = tokens_at({centre_of(0, grid), centre_of(1, grid), centre_of(2, grid)}, {1, 0, 0});
    patches = patchify_image(img, grid);
    build_image_mask(secondary, cam, patches, MaskStrategy::Complement, 0.75, rng);
    CHECK(patches.masked_indices().size() == 3);
    CHECK(patches.visible[0] == 0);
    CHECK(patches.visible[3] == 0);
}

TEST_CASE("build_image_mask is deterministic per seed") {
    PatchGrid grid(16, 64, 80);
    auto cam = pixel_camera(64, 80);
    Image img(64, 80);
    std::mt19937_64 gen(8);
    std::uniform_real_distribution<double> u(0, 80), v(0, 64);
    std::vector<std::pair<double, double>> pix;
    for (int i = 0; i < 16; ++i) pix.push_back({u(gen), v(gen)});
    auto tokens = tokens_at(pix, std::vector<std::uint8_t>(16, 1));
    Rng r0(21);
    sample_point_mask(tokens, 0.6, r0);
    auto a = patchify_image(img, grid);
    auto b = patchify_image(img, grid);
    Rng r1(5), r2(5);
    build_image_mask(tokens, cam, a, MaskStrategy::Random, 0.6, r1);
    build_image_mask(tokens, cam, b, MaskStrategy::Random, 0.6, r2);
    CHECK(a.visible == b.visible);
}
