#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "oracles.hpp"
#include "pimae/error.hpp"
#include "pimae/train.hpp"

using namespace pimae;
using namespace pimae::train;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "pimae_test_train";
    fs::create_directories(dir);
    return dir / name;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::IoError;
}

TrainConfig small_run(std::size_t steps) {
    TrainConfig t;
    t.profile = Profile::Tiny;
    t.batch_size = 2;
    t.total_steps = steps;
    t.warmup_steps = 2;
    t.seed = 5;
    return t;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

TEST_CASE("lr_at warms up linearly and decays to zero") {
    TrainConfig c;
    c.base_lr = 1e-3;
    c.warmup_steps = 25;
    c.total_steps = 500;
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(25, c) == 1e-3);
    CHECK(lr_at(500, c) == 0.0);
    CHECK(lr_at(10, c) == doctest::Approx(4e-4).epsilon(1e-14));
    // Continuity at the junction: the warmup line and the cosine agree.
    const double from_warmup = c.base_lr * 25.0 / 25.0;
    const double from_cosine = c.base_lr * 0.5 * (1.0 + std::cos(0.0));
    CHECK(from_warmup == from_cosine);
    CHECK(std::abs(lr_at(24, c) - lr_at(25, c)) < 1e-4);
    CHECK(std::abs(lr_at(26, c) - lr_at(25, c)) < 1e-7);
    for (std::size_t s = 26; s <= 500; ++s) CHECK(lr_at(s, c) <= lr_at(s - 1, c));
    CHECK(lr_at(262, c) == doctest::Approx(5e-4).epsilon(1e-3));
}

TEST_CASE("adamw_update matches a hand trace") {
    TrainConfig c;
    c.weight_decay = 0.05;
    const double lr = 1e-3;

    SUBCASE("zero gradients only decay the weight") {
        std::vector<double> w{2.0, -4.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
        adamw_update(w, g, m, v, 1, lr, c);
        CHECK(w[0] == 2.0 * 0.99995);
        CHECK(w[1] == -4.0 * 0.99995);
        CHECK(m == std::vector<double>{0.0, 0.0});
        CHECK(v == std::vector<double>{0.0, 0.0});
    }
    SUBCASE("two scalar steps") {
        std::vector<double> w{1.0}, m{0.0}, v{0.0};
        std::vector<double> g1{0.5}, g2{-0.25};
        adamw_update(w, g1, m, v, 1, lr, c);
        // Step 1: m = 0.05, v = 0.0125, m_hat = 0.5, v_hat = 0.25.
        const double w1 = 1.0 * (1 - lr * 0.05) - lr * 0.5 / (0.5 + 1e-8);
        CHECK(std::abs(w[0] - w1) < 1e-12);
        adamw_update(w, g2, m, v, 2, lr, c);
        const double m2 = 0.9 * 0.05 + 0.1 * -0.25;
        const double v2 = 0.95 * 0.0125 + 0.05 * 0.0625;
        const double m_hat = m2 / (1 - 0.81), v_hat = v2 / (1 - 0.9025);
        const double w2 = w1 * (1 - lr * 0.05) - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
        CHECK(std::abs(m[0] - m2) < 1e-15);
        CHECK(std::abs(v[0] - v2) < 1e-15);
        CHECK(std::abs(w[0] - w2) < 1e-12);
    }
    SUBCASE("no decay equals plain Adam") {
        c.weight_decay = 0.0;
        std::vector<double> w{0.3}, m{0.0}, v{0.0};
        double pw = 0.3, pm = 0.0, pv = 0.0;
        for (std::size_t t = 1; t <= 5; ++t) {
            const double g = std::sin(static_cast<double>(t));
            std::vector<double> gv{g};
            adamw_update(w, gv, m, v, t, lr, c);
            pm = 0.9 * pm + 0.1 * g;
            pv = 0.95 * pv + 0.05 * g * g;
            pw -= lr * (pm / (1 - std::pow(0.9, t))) / (std::sqrt(pv / (1 - std::pow(0.95, t))) + 1e-8);
            CHECK(std::abs(w[0] - pw) < 1e-15);
        }
    }
}

TEST_CASE("synthetic scenes are deterministic and pixel-aligned") {
    const auto cfg = model::ModelConfig::desk();
    const auto a = generate_scene(17, cfg), b = generate_scene(17, cfg);
    CHECK(a.points == b.points);
    CHECK(a.image == b.image);
    CHECK(a.cam.intrinsics == b.cam.intrinsics);
    CHECK(a.cam.extrinsics == b.cam.extrinsics);

    std::size_t checked = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto s = generate_scene(seed, cfg);
        REQUIRE(s.points.size() == cfg.num_points);
        for (std::size_t i = 0; i < s.points.size(); ++i) {
            auto p = oracle::project(s.points[i], s.cam);
            REQUIRE(p.has_value());
            const int u = static_cast<int>(std::floor((*p)[0])), v = static_cast<int>(std::floor((*p)[1]));
            REQUIRE(u >= 0);
            REQUIRE(v >= 0);
            REQUIRE(u < cfg.image_width);
            REQUIRE(v < cfg.image_height);
            for (int ch = 0; ch < 3; ++ch) REQUIRE(s.image.at(v, u, ch) == s.point_colors[i][ch]);
            ++checked;
        }
    }
    CHECK(checked == 100 * cfg.num_points);
}

TEST_CASE("distinct seeds give visibly different images") {
    const auto cfg = model::ModelConfig::desk();
    const std::size_t pixels = static_cast<std::size_t>(cfg.image_height) * cfg.image_width;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto a = generate_scene(seed, cfg), b = generate_scene(seed + 1000, cfg);
        std::size_t differ = 0;
        for (std::size_t i = 0; i < pixels; ++i) {
            differ += a.image.rgb[i * 3] != b.image.rgb[i * 3] || a.image.rgb[i * 3 + 1] != b.image.rgb[i * 3 + 1] ||
                      a.image.rgb[i * 3 + 2] != b.image.rgb[i * 3 + 2];
        }
        CHECK(differ * 100 >= pixels);
    }
}

TEST_CASE("config JSON round trips and rejects unknown keys") {
    auto m = model::ModelConfig::tiny();
    m.branches = model::Branches::ImageOnly;
    TrainConfig t;
    t.strategy = tokenizer::MaskStrategy::Uniform;
    t.seed = 99;
    model::ModelConfig m2;
    TrainConfig t2;
    update_from_json(m2, nlohmann::json::parse(to_json(m).dump()));
    update_from_json(t2, nlohmann::json::parse(to_json(t).dump()));
    CHECK(to_json(m2) == to_json(m));
    CHECK(to_json(t2) == to_json(t));

    CHECK(kind_of([&] { update_from_json(t2, {{"mask_rato", 0.6}}); }) == ErrorKind::UnknownKey);
    CHECK(kind_of([&] { update_from_json(t2, {{"batch_size", "four"}}); }) == ErrorKind::TypeError);
    CHECK(kind_of([&] { update_from_json(t2, {{"batch_size", -1}}); }) == ErrorKind::TypeError);
    CHECK(kind_of([&] { update_from_json(m2, {{"enc_dim", 1.5}}); }) == ErrorKind::TypeError);
    CHECK(kind_of([&] { update_from_json(t2, {{"strategy", "sideways"}}); }) == ErrorKind::TypeError);
}

TEST_CASE("mask seeds vary per step only when resampling") {
    TrainConfig t;
    CHECK(mask_seed(t, 1, 0) != mask_seed(t, 2, 0));
    CHECK(mask_seed(t, 1, 0) != mask_seed(t, 1, 1));
    t.resample_masks = false;
    CHECK(mask_seed(t, 1, 3) == mask_seed(t, 7, 3));
}

TEST_CASE("training steps are deterministic") {
    const auto mcfg = model::ModelConfig::desk();
    TrainConfig t;
    t.total_steps = 10;
    t.warmup_steps = 1;
    auto data = generate_scenes(0, 4, mcfg);
    Trainer a(mcfg, t, data), b(mcfg, t, data);
    for (int i = 0; i < 2; ++i) {
        auto ra = a.step(), rb = b.step();
        CHECK(ra.losses.loss_pc == rb.losses.loss_pc);
        CHECK(ra.losses.loss_img == rb.losses.loss_img);
        CHECK(ra.losses.loss_cross == rb.losses.loss_cross);
        CHECK(ra.losses.loss_total == rb.losses.loss_total);
        CHECK(ra.losses.loss_total == ra.losses.loss_pc + ra.losses.loss_img + ra.losses.loss_cross);
    }
    for (const auto& [name, w] : a.weights().params()) CHECK(std::ranges::equal(w.values(), b.weights()[name].values()));
}

TEST_CASE("zero masking ratios leave nothing to reconstruct") {
    const auto mcfg = model::ModelConfig::tiny();
    const auto scene = generate_scene(3, mcfg);
    auto w = model::ModelWeights::initialize(mcfg, 3);
    for (auto strategy : {tokenizer::MaskStrategy::Random, tokenizer::MaskStrategy::Uniform}) {
        auto tok = tokenize_scene(scene, mcfg, strategy, 0.0, 0.0, 1);
        auto f = evaluate_scene(mcfg, w, tok);
        CHECK(f.report.loss_pc == 0.0);
        CHECK(f.report.loss_img == 0.0);
        CHECK(f.report.loss_total == 0.0);
    }
}

TEST_CASE("ablation toggles train without numeric failure") {
    auto mcfg = model::ModelConfig::tiny();
    auto data = generate_scenes(0, 2, mcfg);
    for (auto strategy :
         {tokenizer::MaskStrategy::Random, tokenizer::MaskStrategy::Uniform, tokenizer::MaskStrategy::Complement}) {
        auto t = small_run(10);
        t.strategy = strategy;
        mcfg.cross_modal = false;
        Trainer trainer(mcfg, t, data);
        for (int i = 0; i < 3; ++i) CHECK(trainer.step().losses.loss_cross == 0.0);
    }
    mcfg.cross_modal = true;
    for (auto branches : {model::Branches::PointOnly, model::Branches::ImageOnly}) {
        mcfg.branches = branches;
        Trainer trainer(mcfg, small_run(10), data);
        auto r = trainer.step();
        CHECK(r.losses.loss_cross == 0.0);
        CHECK((branches == model::Branches::PointOnly ? r.losses.loss_img : r.losses.loss_pc) == 0.0);
    }
}

TEST_CASE("non-finite parameters abort the step untouched") {
    const auto mcfg = model::ModelConfig::tiny();
    auto data = generate_scenes(0, 2, mcfg);
    Trainer trainer(mcfg, small_run(10), data);
    trainer.weights()["head_img.w"].mutable_values()[3] = std::nan("");
    const auto before = trainer.checkpoint();
    try {
        trainer.step();
        FAIL("expected NonFinite");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
        CHECK(std::string(e.what()).find("head_img.w") != std::string::npos);
    }
    CHECK(trainer.current_step() == 0);
    const auto& w = trainer.weights()["enc_pc.0.attn.q.w"].values();
    CHECK(std::ranges::equal(w, before.weights["enc_pc.0.attn.q.w"].values()));
}

TEST_CASE("checkpoints round trip bit for bit") {
    const auto mcfg = model::ModelConfig::tiny();
    auto data = generate_scenes(0, 2, mcfg);
    Trainer trainer(mcfg, small_run(20), data);
    trainer.step();
    trainer.step();
    const auto path = scratch("roundtrip.ckpt");
    save_checkpoint(path, trainer.checkpoint());
    auto loaded = load_checkpoint(path);
    CHECK(loaded.step == 2);
    CHECK(loaded.optimizer.step == 2);
    CHECK(to_json(loaded.model) == to_json(mcfg));
    CHECK(to_json(loaded.train) == to_json(trainer.train_config()));
    for (const auto& [name, t] : trainer.weights().params()) {
        CHECK(std::ranges::equal(t.values(), loaded.weights[name].values()));
    }

    auto tok = trainer.tokenize(0, 3);
    auto before = evaluate_scene(mcfg, trainer.weights(), tok);
    auto after = evaluate_scene(mcfg, loaded.weights, tok);
    CHECK(std::ranges::equal(before.recon.pixels.values(), after.recon.pixels.values()));
    CHECK(std::ranges::equal(before.recon.offsets.values(), after.recon.offsets.values()));
    CHECK(before.report.loss_total == after.report.loss_total);

    save_checkpoint(scratch("again.ckpt"), loaded);
    CHECK(read_file(path) == read_file(scratch("again.ckpt")));
}

TEST_CASE("corrupt checkpoints are rejected") {
    const auto mcfg = model::ModelConfig::tiny();
    Trainer trainer(mcfg, small_run(20), generate_scenes(0, 1, mcfg));
    const auto good = scratch("good.ckpt");
    save_checkpoint(good, trainer.checkpoint());
    const auto bytes = read_file(good);

    auto bad = bytes;
    bad[0] = 'X';
    write_file(scratch("magic.ckpt"), bad);
    CHECK(kind_of([&] { load_checkpoint(scratch("magic.ckpt")); }) == ErrorKind::BadMagic);

    write_file(scratch("short.ckpt"), bytes.substr(0, bytes.size() - 9));
    CHECK(kind_of([&] { load_checkpoint(scratch("short.ckpt")); }) == ErrorKind::Truncated);
    write_file(scratch("stub.ckpt"), bytes.substr(0, 12));
    CHECK(kind_of([&] { load_checkpoint(scratch("stub.ckpt")); }) == ErrorKind::Truncated);

    // Edit one shape in the header without changing its length.
    auto shaped = bytes;
    const auto at = shaped.find("\"shape\":[32,32]");
    REQUIRE(at != std::string::npos);
    shaped.replace(at, 15, "\"shape\":[32,16]");
    write_file(scratch("shape.ckpt"), shaped);
    CHECK(kind_of([&] { load_checkpoint(scratch("shape.ckpt")); }) == ErrorKind::ShapeMismatch);

    auto versioned = bytes;
    const auto v = versioned.find("\"version\":1");
    REQUIRE(v != std::string::npos);
    versioned[v + 10] = '7';
    write_file(scratch("version.ckpt"), versioned);
    CHECK(kind_of([&] { load_checkpoint(scratch("version.ckpt")); }) == ErrorKind::ParseError);

    CHECK(kind_of([&] { load_checkpoint(scratch("missing.ckpt")); }) == ErrorKind::IoError);
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
    const auto mcfg = model::ModelConfig::tiny();
    auto data = generate_scenes(10, 3, mcfg);
    Trainer straight(mcfg, small_run(20), data);
    std::vector<StepMetrics> expected;
    for (int i = 0; i < 8; ++i) expected.push_back(straight.step());

    Trainer first(mcfg, small_run(20), data);
    for (int i = 0; i < 3; ++i) first.step();
    const auto path = scratch("resume.ckpt");
    save_checkpoint(path, first.checkpoint());
    Trainer resumed(load_checkpoint(path), data);
    CHECK(resumed.current_step() == 3);
    for (std::size_t i = 3; i < 8; ++i) {
        auto r = resumed.step();
        CHECK(r.step == expected[i].step);
        CHECK(std::abs(r.losses.loss_pc - expected[i].losses.loss_pc) <= 1e-12);
        CHECK(std::abs(r.losses.loss_img - expected[i].losses.loss_img) <= 1e-12);
        CHECK(std::abs(r.losses.loss_cross - expected[i].losses.loss_cross) <= 1e-12);
        CHECK(std::abs(r.losses.loss_total - expected[i].losses.loss_total) <= 1e-12);
    }
}

TEST_CASE("batches cycle through the dataset") {
    const auto mcfg = model::ModelConfig::tiny();
    auto t = small_run(20);
    t.batch_size = 4;
    Trainer trainer(mcfg, t, generate_scenes(0, 6, mcfg));
    CHECK(trainer.batch_indices(1) == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(trainer.batch_indices(2) == std::vector<std::size_t>{4, 5, 0, 1});
}

TEST_CASE("metrics lines carry the documented keys in order") {
    StepMetrics m;
    m.step = 3;
    m.lr = 0.5;
    m.losses = losses::total_loss(1, 2, 3);
    m.wall_ms = 0;
    CHECK(metrics_line(m) ==
          R"({"step":3,"lr":0.5,"loss_pc":1.0,"loss_img":2.0,"loss_cross":3.0,"loss_total":6.0,"wall_ms":0.0})");
}

TEST_CASE("parallel_for visits every index once and forwards errors") {
    setenv("PIMAE_THREADS", "3", 1);
    CHECK(worker_count() == 3);
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) CHECK(h == 1);
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                        if (i == 7) fail(ErrorKind::InvalidArgument, "boom");
                    }),
                    Error);
    setenv("PIMAE_THREADS", "zero", 1);
    CHECK(worker_count() >= 1);
    unsetenv("PIMAE_THREADS");
}
