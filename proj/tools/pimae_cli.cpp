#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "pimae/cli_io.hpp"
#include "pimae/error.hpp"
#include "pimae/train.hpp"

using namespace pimae;
using nlohmann::json;

namespace {

// Every flat configuration key doubles as a `--key value` flag.
struct Flags {
    std::string config_path;
    std::map<std::string, std::string> values;
};

void add_config_flags(CLI::App* cmd, Flags& flags) {
    cmd->add_option("--config", flags.config_path, "JSON file of flat configuration keys");
    for (const auto& key : io::config_keys()) {
        cmd->add_option("--" + key, flags.values[key], "overrides '" + key + "' from the config file");
    }
}

io::RunConfig resolve(const CLI::App* cmd, const Flags& flags, bool require_output) {
    const auto defaults = io::to_json(io::RunConfig{});
    json file = flags.config_path.empty() ? json::object() : io::read_config_file(flags.config_path);
    json overrides = json::object();
    for (const auto& [key, text] : flags.values) {
        if (cmd->count("--" + key) == 0) continue;
        // String-typed keys take the text verbatim; others are JSON literals.
        const bool textual = key != "mask_ratio" && defaults.contains(key) && defaults[key].is_string();
        if (textual) {
            overrides[key] = text;
        } else {
            auto parsed = json::parse(text, nullptr, false);
            overrides[key] = parsed.is_discarded() ? json(text) : parsed;
        }
    }
    return io::resolve_config(file, overrides, require_output);
}

std::ofstream open_metrics(const io::fs::path& path, bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    return out;
}

int run_pretrain(io::RunConfig rc) {
    std::optional<train::Checkpoint> resume;
    if (!rc.checkpoint.empty()) {
        resume = train::load_checkpoint(rc.checkpoint);
        rc.model = resume->model;
        rc.train = resume->train;
    }
    io::write_resolved_config(rc);
    auto dataset = io::load_dataset(rc);
    train::Trainer trainer = resume ? train::Trainer(std::move(*resume), std::move(dataset))
                                    : train::Trainer(rc.model, rc.train, std::move(dataset));
    const auto ckpt_path = rc.output_dir / "checkpoint.ckpt";
    auto metrics = open_metrics(rc.output_dir / "metrics.jsonl", resume.has_value());
    train::StepMetrics last;
    while (trainer.current_step() < trainer.train_config().total_steps) {
        last = trainer.step();
        if (!rc.wall_clock) last.wall_ms = 0.0;
        metrics << train::metrics_line(last) << '\n';
        metrics.flush();
        if (rc.checkpoint_every != 0 && last.step % rc.checkpoint_every == 0) {
            train::save_checkpoint(ckpt_path, trainer.checkpoint());
        }
    }
    if (!metrics) fail(ErrorKind::IoError, "write failed for metrics.jsonl");
    train::save_checkpoint(ckpt_path, trainer.checkpoint());
    std::printf("step %zu loss_total %.6g checkpoint %s\n", trainer.current_step(), last.losses.loss_total,
                ckpt_path.string().c_str());
    return 0;
}

void print_written(const std::vector<io::fs::path>& paths) {
    for (const auto& p : paths) std::printf("%s\n", p.string().c_str());
}

int run_gradcheck(const io::RunConfig& rc) {
    const auto r = train::end_to_end_grad_check(rc.train.seed);
    std::printf("max_relative_error %.3e over %zu coordinates\n", r.max_relative_error, r.coordinates);
    if (!(r.max_relative_error < 1e-4)) {
        std::fprintf(stderr, "error: gradient check failed: max relative error %.3e >= 1e-4\n",
                     r.max_relative_error);
        return exit_code(ErrorKind::NonFinite);
    }
    return 0;
}

int run_synth_gen(const io::RunConfig& rc) {
    io::write_resolved_config(rc);
    const auto scenes = train::generate_scenes(rc.synth_first, rc.synth_count, rc.model);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "scene_%06llu", static_cast<unsigned long long>(rc.synth_first + i));
        io::save_scene(rc.output_dir / name, scenes[i]);
        std::printf("%s\n", (rc.output_dir / name).string().c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-modal masked autoencoder pre-training on paired point clouds and images"};
    app.require_subcommand(1);
    struct Command {
        const char* name;
        const char* help;
        Flags flags;
        CLI::App* app = nullptr;
    };
    Command commands[] = {
        {"pretrain", "train from scratch or resume; writes metrics.jsonl and checkpoint.ckpt", {}},
        {"reconstruct", "write recon_image.ppm and recon_points.ply for one scene", {}},
        {"mask-vis", "write mask_image.ppm and hits.json for one scene", {}},
        {"attn-dump", "write one attention row as attn_{layer}_{head}_{query}.json", {}},
        {"gradcheck", "end-to-end gradient check on the tiny profile", {}},
        {"synth-gen", "write synthetic scenes as scene directories", {}},
    };
    for (auto& c : commands) {
        c.app = app.add_subcommand(c.name, c.help);
        add_config_flags(c.app, c.flags);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }

    try {
        for (auto& c : commands) {
            if (!c.app->parsed()) continue;
            const std::string name = c.name;
            const auto rc = resolve(c.app, c.flags, name != "gradcheck");
            if (name == "pretrain") return run_pretrain(rc);
            if (name == "gradcheck") return run_gradcheck(rc);
            if (name == "synth-gen") return run_synth_gen(rc);
            io::write_resolved_config(rc);
            const auto inspection = io::prepare_inspection(rc);
            if (name == "reconstruct") print_written(io::emit_reconstruction(rc.output_dir, inspection));
            if (name == "mask-vis") print_written(io::emit_mask_vis(rc.output_dir, inspection));
            if (name == "attn-dump") {
                print_written({io::emit_attention(rc.output_dir, inspection, rc.attn_stack, rc.attn_layer,
                                                  rc.attn_head, rc.attn_query)});
            }
            return 0;
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 2;
}
