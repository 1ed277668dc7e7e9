#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "pimae/error.hpp"
#include "pimae/model.hpp"
#include "pimae/train.hpp"

using namespace pimae;
using namespace pimae::model;
using diff::Tensor;

namespace {

Tensor random_tensor(std::mt19937_64& rng, diff::Shape shape) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(diff::element_count(shape));
    for (auto& x : v) x = n(rng);
    return Tensor::constant(shape, std::move(v));
}

}  // namespace

TEST_CASE("profiles satisfy their invariants") {
    for (const auto& cfg : {ModelConfig::paper(), ModelConfig::desk(), ModelConfig::tiny()}) {
        CHECK_NOTHROW(cfg.validate());
        CHECK(cfg.enc_dim % cfg.enc_heads == 0);
        CHECK(cfg.dec_dim % cfg.dec_heads == 0);
    }
    const auto paper = ModelConfig::paper();
    CHECK(paper.enc_dim == 256);
    CHECK(paper.dec_heads == 3);
    CHECK(paper.patch_dim() == 768);
    CHECK(paper.grid().patch_count() == 16 * 22);
    const auto tiny = ModelConfig::tiny();
    CHECK(tiny.num_clusters == 8);
    CHECK(tiny.group_size == 4);
    CHECK(tiny.grid().rows() == 4);
    CHECK(tiny.grid().cols() == 5);
    CHECK(tiny.enc_dim == 32);

    auto bad = ModelConfig::tiny();
    bad.enc_heads = 3;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK(parse_branches("point_only") == Branches::PointOnly);
    CHECK_THROWS_AS(parse_branches("neither"), Error);
}

TEST_CASE("weights follow the layout and initialization rules") {
    const auto cfg = ModelConfig::desk();
    const auto layout = ModelWeights::layout(cfg);
    auto w = ModelWeights::initialize(cfg, 3);
    CHECK(w.params().size() == layout.size());
    std::size_t count = 0;
    for (const auto& [name, shape] : layout) {
        INFO(name);
        REQUIRE(w.contains(name));
        CHECK(w[name].shape() == shape);
        CHECK(w[name].requires_grad());
        count += diff::element_count(shape);
        const auto v = w[name].values();
        if (name.ends_with(".gamma")) {
            for (double x : v) CHECK(x == 1.0);
        } else if (name.ends_with(".b") || name.ends_with(".beta")) {
            for (double x : v) CHECK(x == 0.0);
        } else {
            double sum2 = 0;
            for (double x : v) {
                CHECK(std::abs(x) <= 0.04);
                sum2 += x * x;
            }
            if (v.size() > 500) CHECK(std::sqrt(sum2 / v.size()) == doctest::Approx(0.0176).epsilon(0.1));
        }
    }
    CHECK(w.parameter_count() == count);
    CHECK(layout.at("img_embed.w") == diff::Shape{cfg.patch_dim(), cfg.enc_dim});
    CHECK(layout.at("enc_to_dec.w") == diff::Shape{cfg.enc_dim, cfg.dec_dim});
    CHECK(layout.at("head_pc.w") == diff::Shape{cfg.dec_dim, cfg.group_size * 3});
    CHECK(layout.at("head_cross.w") == diff::Shape{cfg.dec_dim, cfg.dec_dim});
    CHECK(layout.count("enc_pc.2.mlp.fc2.w") == 1);
    CHECK(layout.count("enc_pc.3.mlp.fc2.w") == 0);
    CHECK(layout.count("dec_pc.1.ln1.gamma") == 1);

    auto again = ModelWeights::initialize(cfg, 3);
    for (const auto& [name, t] : w.params()) CHECK(std::ranges::equal(t.values(), again[name].values()));
}

TEST_CASE("sin-cos table rows are distinct and bounded") {
    auto table = sincos_position_table(4, 5, 16);
    CHECK(table.shape() == diff::Shape{20, 16});
    std::set<std::vector<double>> rows;
    for (std::size_t r = 0; r < 20; ++r) {
        std::vector<double> row;
        for (std::size_t j = 0; j < 16; ++j) {
            CHECK(std::abs(table.at(r, j)) <= 1.0);
            row.push_back(table.at(r, j));
        }
        rows.insert(row);
    }
    CHECK(rows.size() == 20);
    CHECK(table.at(0, 4) == 1.0);  // cos(0) of the row block
}

TEST_CASE("shared encoder is permutation equivariant") {
    const auto cfg = ModelConfig::desk();
    auto w = ModelWeights::initialize(cfg, 11);
    std::mt19937_64 rng(12);
    // Larger weights so attention is far from uniform.
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& [name, t] : w.params()) {
        if (name.starts_with("enc_shared")) {
            for (double& v : t.mutable_values()) v += n(rng);
        }
    }
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t tokens = 5 + trial;
        auto x = random_tensor(rng, {tokens, cfg.enc_dim});
        std::vector<std::size_t> perm(tokens);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        auto out = run_stack(w, "enc_shared", cfg.shared_enc_depth, cfg.enc_heads, x);
        auto out_perm = run_stack(w, "enc_shared", cfg.shared_enc_depth, cfg.enc_heads, diff::gather_rows(x, perm));
        for (std::size_t i = 0; i < tokens; ++i) {
            for (std::size_t j = 0; j < cfg.enc_dim; ++j) {
                CHECK(std::abs(out_perm.at(i, j) - out.at(perm[i], j)) < 1e-10);
            }
        }
    }
}

TEST_CASE("stage token counts match the bookkeeping") {
    std::mt19937_64 rng(13);
    auto pick = [&](std::initializer_list<std::size_t> xs) {
        std::vector<std::size_t> v(xs);
        return v[rng() % v.size()];
    };
    const tokenizer::MaskStrategy strategies[] = {tokenizer::MaskStrategy::Random, tokenizer::MaskStrategy::Uniform,
                                                  tokenizer::MaskStrategy::Complement};
    const Branches branches[] = {Branches::Both, Branches::PointOnly, Branches::ImageOnly};
    for (int trial = 0; trial < 100; ++trial) {
        ModelConfig cfg;
        cfg.enc_heads = pick({1, 2, 4});
        cfg.enc_dim = cfg.enc_heads * pick({4, 8});
        cfg.dec_heads = pick({1, 2});
        cfg.dec_dim = cfg.dec_heads * 4 * pick({1, 2});
        cfg.specific_enc_depth = pick({0, 1});
        cfg.shared_enc_depth = pick({0, 1});
        cfg.shared_dec_depth = pick({0, 1});
        cfg.specific_dec_depth = pick({0, 1});
        cfg.patch_size = static_cast<int>(pick({2, 4}));
        cfg.image_height = cfg.patch_size * static_cast<int>(pick({2, 3}));
        cfg.image_width = cfg.patch_size * static_cast<int>(pick({3, 4}));
        cfg.num_points = pick({20, 24});
        cfg.num_clusters = pick({4, 6, 8});
        cfg.group_size = pick({3, 5});
        cfg.point_hidden = 8;
        cfg.branches = branches[trial % 3];
        cfg.cross_modal = trial % 2 == 0;
        INFO("trial " << trial);
        REQUIRE_NOTHROW(cfg.validate());

        auto scene = train::generate_scene(static_cast<std::uint64_t>(trial), cfg);
        const double ratio = 0.25 * static_cast<double>(rng() % 4);
        auto tok = train::tokenize_scene(scene, cfg, strategies[trial % 3], ratio, ratio, rng());
        auto w = ModelWeights::initialize(cfg, static_cast<std::uint64_t>(trial));
        const std::size_t m = cfg.num_clusters, p = static_cast<std::size_t>(cfg.grid().patch_count());
        const std::size_t pv = cfg.uses_points() ? tok.tokens.visible_indices().size() : 0;
        const std::size_t iv = cfg.uses_image() ? tok.patches.visible_indices().size() : 0;
        if (pv + iv == 0) {
            // Complement masking can hide every patch; an encoder needs at least one token.
            CHECK_THROWS_AS(forward(cfg, w, tok.tokens, scene.points, tok.patches), Error);
            continue;
        }
        auto lat = forward(cfg, w, tok.tokens, scene.points, tok.patches);
        auto rec = heads(cfg, w, lat);
        CHECK(lat.pc_visible.size() + lat.pc_masked.size() == (cfg.uses_points() ? m : 0));
        CHECK(lat.img_visible.size() + lat.img_masked.size() == (cfg.uses_image() ? p : 0));
        if (pv) CHECK(lat.pc_l1.shape() == diff::Shape{pv, cfg.enc_dim});
        if (iv) CHECK(lat.img_l1.shape() == diff::Shape{iv, cfg.enc_dim});
        if (pv + iv) CHECK(lat.shared_l2.shape() == diff::Shape{pv + iv, cfg.enc_dim});
        CHECK(lat.l2_refs.size() == pv + iv);
        const std::size_t slots = (cfg.uses_points() ? m : 0) + (cfg.uses_image() ? p : 0);
        CHECK(lat.dec_input.shape() == diff::Shape{slots, cfg.dec_dim});
        if (cfg.uses_points()) {
            CHECK(lat.pc_l3.shape() == diff::Shape{m, cfg.dec_dim});
            CHECK(lat.pc_dec.shape() == diff::Shape{m, cfg.dec_dim});
            const std::size_t pm = lat.pc_masked.size();
            if (pm) {
                CHECK(rec.offsets.shape() == diff::Shape{pm, cfg.group_size * 3});
                CHECK(rec.cross.defined() == cfg.cross_active());
                if (cfg.cross_active()) CHECK(rec.cross.shape() == diff::Shape{pm, cfg.dec_dim});
            } else {
                CHECK_FALSE(rec.offsets.defined());
            }
        } else {
            CHECK_FALSE(lat.pc_l3.defined());
            CHECK_FALSE(rec.offsets.defined());
        }
        if (cfg.uses_image()) {
            CHECK(lat.img_l3.shape() == diff::Shape{p, cfg.dec_dim});
            const std::size_t im = lat.img_masked.size();
            if (im) CHECK(rec.pixels.shape() == diff::Shape{im, cfg.patch_dim()});
        } else {
            CHECK_FALSE(lat.img_l3.defined());
            CHECK_FALSE(rec.pixels.defined());
        }
    }
}

TEST_CASE("image branch is independent of points without shared stacks") {
    auto cfg = ModelConfig::tiny();
    cfg.shared_enc_depth = 0;
    cfg.shared_dec_depth = 0;
    cfg.cross_modal = false;
    auto w = ModelWeights::initialize(cfg, 21);
    auto scene_a = train::generate_scene(21, cfg);
    auto scene_b = train::generate_scene(22, cfg);
    auto tok_a = train::tokenize_scene(scene_a, cfg, tokenizer::MaskStrategy::Random, 0.6, 0.6, 1);
    auto tok_b = train::tokenize_scene(scene_b, cfg, tokenizer::MaskStrategy::Random, 0.6, 0.6, 2);

    auto lat_a = forward(cfg, w, tok_a.tokens, scene_a.points, tok_a.patches);
    auto lat_b = forward(cfg, w, tok_b.tokens, scene_b.points, tok_a.patches);
    auto rec_a = heads(cfg, w, lat_a), rec_b = heads(cfg, w, lat_b);
    CHECK(std::ranges::equal(lat_a.img_dec.values(), lat_b.img_dec.values()));
    CHECK(std::ranges::equal(rec_a.pixels.values(), rec_b.pixels.values()));
    CHECK_FALSE(std::ranges::equal(lat_a.pc_dec.values(), lat_b.pc_dec.values()));
}

TEST_CASE("masked decoder slots see only mask tokens and positions") {
    const auto cfg = ModelConfig::tiny();
    auto w = ModelWeights::initialize(cfg, 31);
    for (const char* name : {"mask_token.pc", "mask_token.img"}) {
        for (double& v : w[name].mutable_values()) v = 0.0;
    }
    for (auto& [name, t] : w.params()) {
        if (name.starts_with("pc_pos_dec")) {
            for (double& v : t.mutable_values()) v = 0.0;
        }
    }
    auto scene = train::generate_scene(31, cfg);
    auto tok = train::tokenize_scene(scene, cfg, tokenizer::MaskStrategy::Complement, 0.6, 0.6, 31);
    auto lat = forward(cfg, w, tok.tokens, scene.points, tok.patches);
    const auto table = sincos_position_table(4, 5, cfg.dec_dim);
    const std::size_t m = cfg.num_clusters;

    REQUIRE(lat.pc_masked.size() >= 2);
    REQUIRE(lat.img_masked.size() >= 2);
    for (auto s : lat.pc_masked) {
        for (std::size_t j = 0; j < cfg.dec_dim; ++j) CHECK(lat.dec_input.at(s, j) == w["modality.pc_dec"].values()[j]);
    }
    for (auto s : lat.img_masked) {
        for (std::size_t j = 0; j < cfg.dec_dim; ++j) {
            const double without_pe = lat.dec_input.at(m + s, j) - table.at(s, j);
            CHECK(std::abs(without_pe - w["modality.img_dec"].values()[j]) < 1e-15);
        }
    }

    // Moving the masked clusters' points leaves their decoder inputs unchanged.
    auto moved = scene.points;
    for (auto c : lat.pc_masked) {
        for (auto i : tok.tokens.group(c)) {
            if (i != tok.tokens.center_indices[c]) moved[i].x += 0.5;
        }
    }
    auto lat_moved = forward(cfg, w, tok.tokens, moved, tok.patches);
    for (auto s : lat.pc_masked) {
        for (std::size_t j = 0; j < cfg.dec_dim; ++j) CHECK(lat_moved.dec_input.at(s, j) == lat.dec_input.at(s, j));
    }
}

TEST_CASE("attention maps are softmax rows over both modalities") {
    const auto cfg = ModelConfig::desk();
    auto w = ModelWeights::initialize(cfg, 41);
    auto scene = train::generate_scene(41, cfg);
    auto tok = train::tokenize_scene(scene, cfg, tokenizer::MaskStrategy::Complement, 0.6, 0.6, 41);
    auto lat = forward(cfg, w, tok.tokens, scene.points, tok.patches, true);
    const std::size_t tokens = lat.l2_refs.size();
    for (std::size_t layer = 0; layer < cfg.shared_enc_depth; ++layer) {
        for (std::size_t head = 0; head < cfg.enc_heads; ++head) {
            for (std::size_t q = 0; q < tokens; ++q) {
                auto row = attention_maps(lat, "enc_shared", layer, head, q);
                CHECK(row.size() == tokens);
                double sum = 0;
                for (double v : row) sum += v;
                CHECK(std::abs(sum - 1.0) < 1e-12);
            }
        }
    }
    bool has_point = false, has_image = false;
    for (const auto& r : lat.l2_refs) (r.modality == Modality::Point ? has_point : has_image) = true;
    CHECK(has_point);
    CHECK(has_image);
    try {
        attention_maps(lat, "enc_shared", 0, 0, tokens);
        FAIL("expected UnknownToken");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::UnknownToken);
    }
    CHECK_THROWS_AS(attention_maps(lat, "enc_shared", 0, cfg.enc_heads, 0), Error);
    CHECK_THROWS_AS(attention_maps(lat, "nowhere", 0, 0, 0), Error);
}
