#include "pimae/cli_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "pimae/error.hpp"

namespace pimae::io {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string describe(const json& v) { return std::string(v.type_name()); }

std::uint64_t as_count(const json& v, const std::string& key) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        fail(ErrorKind::TypeError, "key '" + key + "' expects a non-negative integer, got " + describe(v));
    }
    return v.get<std::uint64_t>();
}

std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string()) fail(ErrorKind::TypeError, "key '" + key + "' expects a string, got " + describe(v));
    return v.get<std::string>();
}

bool as_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) fail(ErrorKind::TypeError, "key '" + key + "' expects a boolean, got " + describe(v));
    return v.get<bool>();
}

void set_run_key(RunConfig& c, const std::string& key, const json& v) {
    if (key == "output_dir") c.output_dir = as_string(v, key);
    else if (key == "scene_dir") c.scene_dir = as_string(v, key);
    else if (key == "synth_first") c.synth_first = as_count(v, key);
    else if (key == "synth_count") c.synth_count = as_count(v, key);
    else if (key == "checkpoint") c.checkpoint = as_string(v, key);
    else if (key == "checkpoint_every") c.checkpoint_every = as_count(v, key);
    else if (key == "wall_clock") c.wall_clock = as_bool(v, key);
    else if (key == "scene_index") c.scene_index = as_count(v, key);
    else if (key == "attn_stack") c.attn_stack = as_string(v, key);
    else if (key == "attn_layer") c.attn_layer = as_count(v, key);
    else if (key == "attn_head") c.attn_head = as_count(v, key);
    else if (key == "attn_query") c.attn_query = as_count(v, key);
    else fail(ErrorKind::UnknownKey, "unknown key '" + key + "'");
}

std::set<std::string> keys_of(const ordered_json& j) {
    std::set<std::string> out;
    for (const auto& [k, _] : j.items()) out.insert(k);
    return out;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    return out;
}

void finish(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) fail(ErrorKind::IoError, "write failed for " + path.string());
}

[[noreturn]] void parse_fail(const fs::path& path, std::size_t offset, const std::string& what) {
    fail(ErrorKind::ParseError, path.string() + " at byte " + std::to_string(offset) + ": " + what);
}

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Line cursor over a text buffer that remembers byte offsets.
struct Lines {
    const std::string& text;
    std::size_t pos = 0;

    bool next(std::string_view& line, std::size_t& start) {
        if (pos >= text.size()) return false;
        start = pos;
        auto end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        line = std::string_view(text).substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = end + 1;
        return true;
    }
};

// Whitespace-separated fields with their offsets inside the line.
std::vector<std::pair<std::string_view, std::size_t>> fields(std::string_view line) {
    std::vector<std::pair<std::string_view, std::size_t>> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        const std::size_t s = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
        if (i > s) out.emplace_back(line.substr(s, i - s), s);
    }
    return out;
}

std::uint8_t to_byte(double v) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

std::array<int, 2> patch_origin(const geometry::PatchGrid& grid, std::size_t patch) {
    const int p = static_cast<int>(patch);
    return {(p / grid.cols()) * grid.patch_size(), (p % grid.cols()) * grid.patch_size()};
}

ordered_json token_json(const model::TokenRef& ref) {
    return {{"modality", ref.modality == model::Modality::Point ? "point" : "image"}, {"slot", ref.slot}};
}

}  // namespace

// ---- configuration ----

ordered_json to_json(const RunConfig& cfg) {
    ordered_json j;
    j["profile"] = std::string(train::to_string(cfg.train.profile));
    const auto model = train::to_json(cfg.model), training = train::to_json(cfg.train);
    for (const auto& [k, v] : model.items()) j[k] = v;
    for (const auto& [k, v] : training.items()) j[k] = v;
    j["output_dir"] = cfg.output_dir.string();
    j["scene_dir"] = cfg.scene_dir.string();
    j["synth_first"] = cfg.synth_first;
    j["synth_count"] = cfg.synth_count;
    j["checkpoint"] = cfg.checkpoint.string();
    j["checkpoint_every"] = cfg.checkpoint_every;
    j["wall_clock"] = cfg.wall_clock;
    j["scene_index"] = cfg.scene_index;
    j["attn_stack"] = cfg.attn_stack;
    j["attn_layer"] = cfg.attn_layer;
    j["attn_head"] = cfg.attn_head;
    j["attn_query"] = cfg.attn_query;
    return j;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    const auto all = to_json(RunConfig{});
    for (const auto& [k, _] : all.items()) keys.push_back(k);
    keys.push_back("mask_ratio");
    return keys;
}

RunConfig resolve_config(const json& file, const json& overrides, bool require_output) {
    const json* layers[] = {&file, &overrides};
    for (const json* layer : layers) {
        if (!layer->is_null() && !layer->is_object()) fail(ErrorKind::TypeError, "configuration must be a JSON object");
    }
    train::Profile profile = train::Profile::Desk;
    for (const json* layer : layers) {
        if (layer->is_object() && layer->contains("profile")) {
            profile = train::parse_profile(as_string(layer->at("profile"), "profile"));
        }
    }
    RunConfig rc;
    rc.model = train::model_config_for(profile);
    rc.train.profile = profile;

    const auto model_keys = keys_of(train::to_json(rc.model));
    const auto train_keys = keys_of(train::to_json(rc.train));
    for (const json* layer : layers) {
        if (!layer->is_object()) continue;
        json model_part = json::object(), train_part = json::object();
        if (layer->contains("mask_ratio")) {
            const auto& r = layer->at("mask_ratio");
            if (!r.is_number()) fail(ErrorKind::TypeError, "key 'mask_ratio' expects a number, got " + describe(r));
            rc.train.point_mask_ratio = rc.train.image_mask_ratio = r.get<double>();
        }
        for (const auto& [k, v] : layer->items()) {
            if (k == "profile" || k == "mask_ratio") continue;
            if (model_keys.count(k)) model_part[k] = v;
            else if (train_keys.count(k)) train_part[k] = v;
            else set_run_key(rc, k, v);
        }
        train::update_from_json(rc.model, model_part);
        train::update_from_json(rc.train, train_part);
    }
    if (require_output && rc.output_dir.empty()) fail(ErrorKind::MissingRequired, "output_dir is required");
    rc.model.validate();
    rc.train.validate();
    return rc;
}

json read_config_file(const fs::path& path) {
    const auto text = read_bytes(path);
    try {
        auto j = json::parse(text);
        if (!j.is_object()) fail(ErrorKind::TypeError, path.string() + " must hold a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        parse_fail(path, e.byte == 0 ? 0 : e.byte - 1, "invalid JSON");
    }
}

void write_resolved_config(const RunConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create " + cfg.output_dir.string() + ": " + ec.message());
    const auto path = cfg.output_dir / "resolved_config.json";
    auto out = open_out(path);
    out << to_json(cfg).dump(2) << '\n';
    finish(out, path);
}

// ---- scene files ----

std::vector<geometry::Point3> read_ply_points(const fs::path& path) {
    const auto text = read_bytes(path);
    Lines lines{text};
    std::string_view line;
    std::size_t at = 0;
    if (!lines.next(line, at) || line != "ply") parse_fail(path, 0, "missing 'ply' magic");

    struct Element {
        std::string name;
        std::size_t count = 0;
        std::vector<std::string> properties;
    };
    std::vector<Element> elements;
    bool ascii = false, ended = false;
    while (lines.next(line, at)) {
        const auto f = fields(line);
        if (f.empty()) continue;
        const auto head = f[0].first;
        if (head == "end_header") {
            ended = true;
            break;
        }
        if (head == "comment" || head == "obj_info") continue;
        if (head == "format") {
            if (f.size() != 3 || f[1].first != "ascii") parse_fail(path, at, "only 'format ascii 1.0' is supported");
            ascii = true;
        } else if (head == "element") {
            if (f.size() != 3) parse_fail(path, at, "malformed element line");
            Element e{std::string(f[1].first), 0, {}};
            const auto c = f[2].first;
            if (std::from_chars(c.data(), c.data() + c.size(), e.count).ec != std::errc{}) {
                parse_fail(path, at + f[2].second, "bad element count");
            }
            elements.push_back(std::move(e));
        } else if (head == "property") {
            if (elements.empty()) parse_fail(path, at, "property before any element");
            if (f.size() < 3) parse_fail(path, at, "malformed property line");
            if (f[1].first == "list" && elements.back().name == "vertex") {
                parse_fail(path, at, "list properties on vertices are not supported");
            }
            elements.back().properties.emplace_back(f.back().first);
        } else {
            parse_fail(path, at, "unexpected header line");
        }
    }
    if (!ended) parse_fail(path, text.size(), "header has no end_header");
    if (!ascii) parse_fail(path, 0, "header has no format line");

    std::vector<geometry::Point3> points;
    bool found = false;
    for (const auto& e : elements) {
        if (e.name != "vertex") {
            for (std::size_t i = 0; i < e.count; ++i) {
                if (!lines.next(line, at)) parse_fail(path, text.size(), "file ends inside element '" + e.name + "'");
            }
            continue;
        }
        found = true;
        std::array<std::ptrdiff_t, 3> idx{-1, -1, -1};
        for (std::size_t p = 0; p < e.properties.size(); ++p) {
            if (e.properties[p] == "x") idx[0] = static_cast<std::ptrdiff_t>(p);
            if (e.properties[p] == "y") idx[1] = static_cast<std::ptrdiff_t>(p);
            if (e.properties[p] == "z") idx[2] = static_cast<std::ptrdiff_t>(p);
        }
        if (idx[0] < 0 || idx[1] < 0 || idx[2] < 0) parse_fail(path, 0, "vertex element lacks x, y or z");
        points.reserve(e.count);
        for (std::size_t i = 0; i < e.count; ++i) {
            if (!lines.next(line, at)) parse_fail(path, text.size(), "expected " + std::to_string(e.count) + " vertices");
            const auto f = fields(line);
            if (f.size() != e.properties.size()) parse_fail(path, at, "vertex has the wrong number of values");
            double xyz[3];
            for (int c = 0; c < 3; ++c) {
                const auto [token, off] = f[static_cast<std::size_t>(idx[c])];
                const auto r = std::from_chars(token.data(), token.data() + token.size(), xyz[c]);
                if (r.ec != std::errc{} || r.ptr != token.data() + token.size() || !std::isfinite(xyz[c])) {
                    parse_fail(path, at + off, "bad coordinate '" + std::string(token) + "'");
                }
            }
            points.push_back({xyz[0], xyz[1], xyz[2]});
        }
        break;
    }
    if (!found) parse_fail(path, 0, "no vertex element");
    return points;
}

void write_ply_points(const fs::path& path, std::span<const geometry::Point3> points,
                      std::span<const std::uint8_t> masked) {
    if (!masked.empty() && masked.size() != points.size()) {
        fail(ErrorKind::ShapeMismatch, "one mask flag per point is required");
    }
    auto out = open_out(path);
    out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
        << "\nproperty double x\nproperty double y\nproperty double z\n";
    if (!masked.empty()) out << "property uchar masked\n";
    out << "end_header\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
        out << number(points[i].x) << ' ' << number(points[i].y) << ' ' << number(points[i].z);
        if (!masked.empty()) out << ' ' << static_cast<int>(masked[i]);
        out << '\n';
    }
    finish(out, path);
}

Image read_ppm(const fs::path& path) {
    const auto data = read_bytes(path);
    if (data.size() < 2 || data[0] != 'P' || data[1] != '6') parse_fail(path, 0, "only binary P6 is accepted");
    std::size_t pos = 2;
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
    auto header_int = [&](const char* what) {
        for (;;) {
            while (pos < data.size() && is_space(data[pos])) ++pos;
            if (pos < data.size() && data[pos] == '#') {
                while (pos < data.size() && data[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        const std::size_t start = pos;
        int value = 0;
        const auto r = std::from_chars(data.data() + pos, data.data() + data.size(), value);
        if (r.ec != std::errc{} || value <= 0) parse_fail(path, start, std::string("bad ") + what);
        pos = static_cast<std::size_t>(r.ptr - data.data());
        return value;
    };
    const int width = header_int("width");
    const int height = header_int("height");
    const int maxval = header_int("maxval");
    if (maxval > 255) parse_fail(path, pos, "maxval above 255 is not supported");
    if (pos >= data.size() || !is_space(data[pos])) parse_fail(path, pos, "expected whitespace before pixel data");
    ++pos;
    const std::size_t need = static_cast<std::size_t>(width) * height * 3;
    if (data.size() - pos < need) {
        parse_fail(path, data.size(), "pixel data truncated, expected " + std::to_string(need) + " bytes");
    }
    Image img(height, width);
    for (std::size_t i = 0; i < need; ++i) {
        const auto byte = static_cast<unsigned char>(data[pos + i]);
        if (byte > maxval) parse_fail(path, pos + i, "sample exceeds maxval");
        img.rgb[i] = static_cast<double>(byte) / maxval;
    }
    return img;
}

void write_ppm(const fs::path& path, const Image& image) {
    auto out = open_out(path);
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::string bytes(image.rgb.size(), '\0');
    for (std::size_t i = 0; i < image.rgb.size(); ++i) bytes[i] = static_cast<char>(to_byte(image.rgb[i]));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    finish(out, path);
}

geometry::CameraModel read_camera(const fs::path& path) {
    const json j = read_config_file(path);
    geometry::CameraModel cam;
    auto numbers = [&](const char* key, std::span<double> dst) {
        if (!j.contains(key) || !j[key].is_array() || j[key].size() != dst.size()) {
            fail(ErrorKind::ParseError, path.string() + ": '" + key + "' must be an array of " +
                                            std::to_string(dst.size()) + " numbers");
        }
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (!j[key][i].is_number()) fail(ErrorKind::ParseError, path.string() + ": '" + key + "' holds a non-number");
            dst[i] = j[key][i].get<double>();
        }
    };
    numbers("K", cam.intrinsics);
    numbers("Rt", cam.extrinsics);
    for (const char* key : {"H", "W"}) {
        if (!j.contains(key) || !j[key].is_number_integer()) {
            fail(ErrorKind::ParseError, path.string() + ": '" + key + "' must be an integer");
        }
    }
    cam.height = j["H"].get<int>();
    cam.width = j["W"].get<int>();
    for (const auto& [k, _] : j.items()) {
        if (k != "K" && k != "Rt" && k != "H" && k != "W") fail(ErrorKind::UnknownKey, path.string() + ": unknown key '" + k + "'");
    }
    return cam;
}

void write_camera(const fs::path& path, const geometry::CameraModel& cam) {
    ordered_json j{{"K", cam.intrinsics}, {"Rt", cam.extrinsics}, {"H", cam.height}, {"W", cam.width}};
    auto out = open_out(path);
    out << j.dump(2) << '\n';
    finish(out, path);
}

train::Scene load_scene(const fs::path& dir, const model::ModelConfig& cfg) {
    train::Scene scene;
    scene.cam = read_camera(dir / "camera.json");
    scene.image = read_ppm(dir / "image.ppm");
    auto points = read_ply_points(dir / "points.ply");
    scene.provenance = dir.string();
    auto size = [](int h, int w) { return std::to_string(h) + "x" + std::to_string(w); };
    if (scene.image.height != scene.cam.height || scene.image.width != scene.cam.width) {
        fail(ErrorKind::DimensionMismatch, dir.string() + ": image is " + size(scene.image.height, scene.image.width) +
                                               " but camera.json says " + size(scene.cam.height, scene.cam.width));
    }
    if (scene.cam.height != cfg.image_height || scene.cam.width != cfg.image_width) {
        fail(ErrorKind::DimensionMismatch, dir.string() + ": image is " + size(scene.cam.height, scene.cam.width) +
                                               " but the model expects " + size(cfg.image_height, cfg.image_width));
    }
    if (points.size() < cfg.num_points) {
        fail(ErrorKind::DimensionMismatch, dir.string() + ": " + std::to_string(points.size()) + " points, need " +
                                               std::to_string(cfg.num_points));
    }
    if (points.size() > cfg.num_points) {
        const auto keep = geometry::farthest_point_sampling(points, cfg.num_points, 0);
        scene.points.reserve(keep.size());
        for (auto i : keep) scene.points.push_back(points[i]);
    } else {
        scene.points = std::move(points);
    }
    return scene;
}

void save_scene(const fs::path& dir, const train::Scene& scene) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());
    write_ply_points(dir / "points.ply", scene.points);
    write_ppm(dir / "image.ppm", scene.image);
    write_camera(dir / "camera.json", scene.cam);
}

std::vector<fs::path> list_scene_dirs(const fs::path& root) {
    if (fs::exists(root / "points.ply")) return {root};
    std::error_code ec;
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root, ec)) {
        if (entry.is_directory() && fs::exists(entry.path() / "points.ply")) dirs.push_back(entry.path());
    }
    if (ec) fail(ErrorKind::IoError, "cannot list " + root.string() + ": " + ec.message());
    if (dirs.empty()) fail(ErrorKind::IoError, "no scene directories under " + root.string());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

std::vector<train::Scene> load_dataset(const RunConfig& cfg) {
    if (cfg.scene_dir.empty()) {
        if (cfg.synth_count == 0) fail(ErrorKind::InvalidArgument, "synth_count must be positive");
        return train::generate_scenes(cfg.synth_first, cfg.synth_count, cfg.model);
    }
    const auto dirs = list_scene_dirs(cfg.scene_dir);
    std::vector<train::Scene> scenes(dirs.size());
    train::parallel_for(dirs.size(), [&](std::size_t i) { scenes[i] = load_scene(dirs[i], cfg.model); });
    return scenes;
}

// ---- inspection ----

Inspection prepare_inspection(const RunConfig& cfg) {
    model::ModelConfig mcfg = cfg.model;
    train::TrainConfig tcfg = cfg.train;
    model::ModelWeights weights;
    std::size_t step = 0;
    if (cfg.checkpoint.empty()) {
        weights = model::ModelWeights::initialize(mcfg, tcfg.seed);
    } else {
        auto ckpt = train::load_checkpoint(cfg.checkpoint);
        mcfg = ckpt.model;
        tcfg = ckpt.train;
        weights = std::move(ckpt.weights);
        step = ckpt.step;
    }
    std::shared_ptr<const train::Scene> scene;
    if (cfg.scene_dir.empty()) {
        scene = std::make_shared<train::Scene>(train::generate_scene(cfg.synth_first + cfg.scene_index, mcfg));
    } else {
        const auto dirs = list_scene_dirs(cfg.scene_dir);
        if (cfg.scene_index >= dirs.size()) {
            fail(ErrorKind::OutOfBounds, "scene_index " + std::to_string(cfg.scene_index) + " but only " +
                                             std::to_string(dirs.size()) + " scenes");
        }
        scene = std::make_shared<train::Scene>(load_scene(dirs[cfg.scene_index], mcfg));
    }
    auto tokenized = train::tokenize_scene(*scene, mcfg, tcfg.strategy, tcfg.point_mask_ratio, tcfg.image_mask_ratio,
                                           train::mask_seed(tcfg, step, cfg.scene_index));
    return {mcfg, tcfg, std::move(weights), step, std::move(scene), std::move(tokenized)};
}

Image reconstructed_image(const train::TokenizedScene& scene, const model::Reconstructions& recon,
                          const model::LatentBatch& latents) {
    Image img = scene.scene->image;
    if (!recon.pixels.defined()) return img;
    const auto& grid = scene.patches.grid;
    const int s = grid.patch_size();
    for (std::size_t r = 0; r < latents.img_masked.size(); ++r) {
        const auto [row0, col0] = patch_origin(grid, latents.img_masked[r]);
        std::size_t j = 0;
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                for (int ch = 0; ch < 3; ++ch) img.at(row0 + y, col0 + x, ch) = recon.pixels.at(r, j++);
            }
        }
    }
    return img;
}

PointReconstruction reconstructed_points(const train::TokenizedScene& scene, const model::Reconstructions& recon,
                                         const model::LatentBatch& latents) {
    PointReconstruction out;
    const auto& tokens = scene.tokens;
    std::vector<std::ptrdiff_t> row_of(tokens.cluster_count(), -1);
    for (std::size_t r = 0; r < latents.pc_masked.size(); ++r) row_of[latents.pc_masked[r]] = static_cast<std::ptrdiff_t>(r);
    for (std::size_t c = 0; c < tokens.cluster_count(); ++c) {
        if (row_of[c] < 0 || !recon.offsets.defined()) {
            for (auto i : tokens.group(c)) {
                out.points.push_back(scene.scene->points[i]);
                out.masked.push_back(row_of[c] >= 0);
            }
            continue;
        }
        const auto& center = tokens.centers[c];
        const auto r = static_cast<std::size_t>(row_of[c]);
        for (std::size_t k = 0; k < tokens.group_size; ++k) {
            out.points.push_back({center.x + recon.offsets.at(r, 3 * k), center.y + recon.offsets.at(r, 3 * k + 1),
                                  center.z + recon.offsets.at(r, 3 * k + 2)});
            out.masked.push_back(1);
        }
    }
    return out;
}

Image mask_visualization(const train::TokenizedScene& scene) {
    Image img = scene.scene->image;
    const auto& grid = scene.patches.grid;
    const int s = grid.patch_size();
    for (auto p : scene.patches.masked_indices()) {
        const auto [row0, col0] = patch_origin(grid, p);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                for (int ch = 0; ch < 3; ++ch) img.at(row0 + y, col0 + x, ch) *= 0.5;
            }
        }
    }
    return img;
}

ordered_json hits_json(const train::TokenizedScene& scene) {
    const auto masked = scene.patches.masked_indices();
    return {{"strategy", std::string(tokenizer::to_string(scene.alignment.strategy))},
            {"hit_visible", scene.alignment.hit_visible},
            {"hit_masked", scene.alignment.hit_masked},
            {"dropped", scene.alignment.dropped},
            {"masked_patches", masked},
            {"masked_patch_count", masked.size()},
            {"masked_clusters", scene.tokens.masked_indices()}};
}

std::vector<fs::path> emit_reconstruction(const fs::path& out, const Inspection& in) {
    fs::create_directories(out);
    const auto f = train::evaluate_scene(in.model, in.weights, in.tokenized);
    std::vector<fs::path> written;
    if (in.model.uses_image()) {
        written.push_back(out / "recon_image.ppm");
        write_ppm(written.back(), reconstructed_image(in.tokenized, f.recon, f.latents));
    }
    if (in.model.uses_points()) {
        const auto pts = reconstructed_points(in.tokenized, f.recon, f.latents);
        written.push_back(out / "recon_points.ply");
        write_ply_points(written.back(), pts.points, pts.masked);
    }
    return written;
}

std::vector<fs::path> emit_mask_vis(const fs::path& out, const Inspection& in) {
    fs::create_directories(out);
    const auto image = out / "mask_image.ppm", hits = out / "hits.json";
    write_ppm(image, mask_visualization(in.tokenized));
    auto f = open_out(hits);
    f << hits_json(in.tokenized).dump(2) << '\n';
    finish(f, hits);
    return {image, hits};
}

fs::path emit_attention(const fs::path& out, const Inspection& in, const std::string& stack, std::size_t layer,
                        std::size_t head, std::size_t query) {
    const auto f = train::evaluate_scene(in.model, in.weights, in.tokenized, {}, true);
    const auto row = model::attention_maps(f.latents, stack, layer, head, query);
    const model::AttentionRecord* rec = nullptr;
    for (const auto& r : f.latents.attention) {
        if (r.stack == stack && r.layer == layer) rec = &r;
    }
    ordered_json tokens = ordered_json::array();
    if (rec != nullptr) {
        for (const auto& ref : rec->refs) tokens.push_back(token_json(ref));
    }
    ordered_json j{{"stack", stack}, {"layer", layer}, {"head", head}, {"query", query}};
    if (rec != nullptr && query < rec->refs.size()) j["query_token"] = token_json(rec->refs[query]);
    j["tokens"] = tokens;
    j["weights"] = row;

    fs::create_directories(out);
    const auto path =
        out / ("attn_" + std::to_string(layer) + "_" + std::to_string(head) + "_" + std::to_string(query) + ".json");
    auto file = open_out(path);
    file << j.dump() << '\n';
    finish(file, path);
    return path;
}

}  // namespace pimae::io
