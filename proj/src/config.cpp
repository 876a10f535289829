#include "egopat/config.hpp"

#include "egopat/dataset_io.hpp"

#include <nlohmann/json.hpp>

#include <set>

namespace egopat {

using nlohmann::json;

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json box_json(const Box& b) { return {{"lo", vec_json(b.lo)}, {"hi", vec_json(b.hi)}}; }

// Reads the keys of one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const std::string& key) const { return path_ + "." + key; }

    void number(const std::string& key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) throw ConfigError(path(key) + ": expected a number");
            out = v->get<double>();
        }
    }

    template <class Int>
    void integer(const std::string& key, Int& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) throw ConfigError(path(key) + ": expected an integer");
            if constexpr (std::is_unsigned_v<Int>) {
                if (v->is_number_unsigned() || v->get<std::int64_t>() >= 0) {
                    out = v->get<Int>();
                    return;
                }
                throw ConfigError(path(key) + ": expected a non-negative integer");
            } else {
                out = v->get<Int>();
            }
        }
    }

    void string(const std::string& key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) throw ConfigError(path(key) + ": expected a string");
            out = v->get<std::string>();
        }
    }

    template <class Enum, class Parse>
    void enumeration(const std::string& key, Enum& out, Parse parse) {
        std::string s;
        if (find(key) == nullptr) return;
        string(key, s);
        try {
            out = parse(s);
        } catch (const std::exception& e) {
            throw ConfigError(path(key) + ": " + e.what());
        }
    }

    void vec3(const std::string& key, Vec3& out) {
        if (const json* v = find(key)) {
            if (!v->is_array() || v->size() != 3) throw ConfigError(path(key) + ": expected [x, y, z]");
            for (int i = 0; i < 3; ++i) {
                if (!(*v)[i].is_number()) throw ConfigError(path(key) + ": expected [x, y, z]");
                out[i] = (*v)[i].get<double>();
            }
        }
    }

    void widths(const std::string& key, std::vector<int>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) throw ConfigError(path(key) + ": expected an array of integers");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number_integer()) throw ConfigError(path(key) + ": expected an array of integers");
                out.push_back(e.get<int>());
            }
        }
    }

    void box(const std::string& key, Box& out) {
        if (const json* v = find(key)) {
            Section s(*v, path(key));
            s.vec3("lo", out.lo);
            s.vec3("hi", out.hi);
            s.finish();
        }
    }

    template <class Fn>
    void section(const std::string& key, Fn fn) {
        if (const json* v = find(key)) {
            Section s(*v, path(key));
            fn(s);
            s.finish();
        }
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(path(key) + ": unknown key");
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_model(Section& s, ModelConfig& m) {
    s.section("grid", [&](Section& g) {
        g.integer("n_cells", m.grid.n_cells);
        g.box("workspace", m.grid.workspace);
    });
    s.integer("voxel_resolution", m.voxel_resolution);
    s.widths("visual_widths", m.visual_widths);
    s.widths("motion_widths", m.motion_widths);
    s.widths("fusion_widths", m.fusion_widths);
    s.enumeration("cell", m.cell, parse_cell_type);
    s.integer("hidden", m.hidden);
    s.integer("layers", m.layers);
    s.enumeration("features", m.features, FeatureFlags::parse);
    s.enumeration("decode", m.decode, parse_decode_mode);
    s.number("gamma", m.gamma);
}

}  // namespace

json to_json(const ModelConfig& m) {
    return {{"grid", {{"n_cells", m.grid.n_cells}, {"workspace", box_json(m.grid.workspace)}}},
            {"voxel_resolution", m.voxel_resolution},
            {"visual_widths", m.visual_widths},
            {"motion_widths", m.motion_widths},
            {"fusion_widths", m.fusion_widths},
            {"cell", to_string(m.cell)},
            {"hidden", m.hidden},
            {"layers", m.layers},
            {"features", m.features.to_string()},
            {"decode", to_string(m.decode)},
            {"gamma", m.gamma}};
}

ModelConfig model_config_from(const json& j, const std::string& path) {
    ModelConfig m;
    Section s(j, path);
    read_model(s, m);
    s.finish();
    return m;
}

std::string model_config_json(const ModelConfig& config) { return to_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
    }
    ModelConfig m = model_config_from(j);
    m.validate();
    return m;
}

void RunConfig::resolve() {
    simulator.seed = seed;
    train.seed = seed;
    try {
        simulator.validate();
        model.validate();
        train.validate();
        registration.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (!(fitness_floor >= 0.0 && fitness_floor <= 1.0)) {
        throw ConfigError("registration.fitness_floor: must lie in [0, 1]");
    }
}

json to_json(const RunConfig& c) {
    const DatasetConfig& d = c.simulator;
    json sim = {
        {"scene",
         {{"workspace", box_json(d.scene.workspace)},
          {"n_objects", d.scene.n_objects},
          {"points_per_object", d.scene.points_per_object},
          {"plane_points", d.scene.plane_points},
          {"table_height", d.scene.table_height},
          {"object_spread", d.scene.object_spread}}},
        {"motion",
         {{"gaze_lead_fraction", d.motion.gaze_lead_fraction},
          {"angular_noise_std", d.motion.angular_noise_std},
          {"position_noise_std", d.motion.position_noise_std},
          {"fps", d.motion.fps},
          {"head_height", d.motion.head_height},
          {"standoff", d.motion.standoff},
          {"lateral_range", d.motion.lateral_range},
          {"initial_gaze_min_deg", d.motion.initial_gaze_min_deg},
          {"initial_gaze_max_deg", d.motion.initial_gaze_max_deg},
          {"lean_min", d.motion.lean_min},
          {"lean_max", d.motion.lean_max},
          {"reach_max", d.motion.reach_max}}},
        {"camera",
         {{"hfov_deg", d.camera.hfov_deg},
          {"vfov_deg", d.camera.vfov_deg},
          {"near", d.camera.near},
          {"far", d.camera.far},
          {"max_points", d.camera.max_points}}},
        {"lengths",
         {{"log_mean", d.lengths.log_mean},
          {"log_sigma", d.lengths.log_sigma},
          {"min_length", d.lengths.min_length},
          {"max_length", d.lengths.max_length}}},
        {"splits",
         {{"train", d.train_clips}, {"val", d.val_clips}, {"test", d.test_clips}, {"unseen", d.unseen_clips}}},
        {"seen_scenes", d.seen_scenes},
        {"unseen_scenes", d.unseen_scenes}};
    const TrainConfig& t = c.train;
    json train = {{"epochs", t.epochs},
                  {"lr0", t.lr0},
                  {"lr_decay", t.lr_decay},
                  {"decay_every", t.decay_every},
                  {"momentum", t.momentum},
                  {"weight_decay", t.weight_decay},
                  {"batch_size", t.batch_size},
                  {"loss", to_string(t.loss)},
                  {"weight_schedule", to_string(t.weight_schedule)}};
    const IcpParams& r = c.registration;
    json reg = {{"max_iterations", r.max_iterations},
                {"max_correspondence_dist", r.max_correspondence_dist},
                {"min_correspondence_dist", r.min_correspondence_dist},
                {"geometric_weight", r.geometric_weight},
                {"convergence_tol", r.convergence_tol},
                {"downsample_cell", r.downsample_cell},
                {"normal_neighbors", r.normal_neighbors},
                {"gradient_neighbors", r.gradient_neighbors},
                {"fitness_floor", c.fitness_floor}};
    return {{"seed", c.seed}, {"simulator", sim}, {"model", to_json(c.model)}, {"train", train}, {"registration", reg}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section root(j, "config");
    root.integer("seed", c.seed);
    root.section("simulator", [&](Section& s) {
        DatasetConfig& d = c.simulator;
        s.section("scene", [&](Section& x) {
            x.box("workspace", d.scene.workspace);
            x.integer("n_objects", d.scene.n_objects);
            x.integer("points_per_object", d.scene.points_per_object);
            x.integer("plane_points", d.scene.plane_points);
            x.number("table_height", d.scene.table_height);
            x.number("object_spread", d.scene.object_spread);
        });
        s.section("motion", [&](Section& x) {
            x.number("gaze_lead_fraction", d.motion.gaze_lead_fraction);
            x.number("angular_noise_std", d.motion.angular_noise_std);
            x.number("position_noise_std", d.motion.position_noise_std);
            x.number("fps", d.motion.fps);
            x.number("head_height", d.motion.head_height);
            x.number("standoff", d.motion.standoff);
            x.number("lateral_range", d.motion.lateral_range);
            x.number("initial_gaze_min_deg", d.motion.initial_gaze_min_deg);
            x.number("initial_gaze_max_deg", d.motion.initial_gaze_max_deg);
            x.number("lean_min", d.motion.lean_min);
            x.number("lean_max", d.motion.lean_max);
            x.number("reach_max", d.motion.reach_max);
        });
        s.section("camera", [&](Section& x) {
            x.number("hfov_deg", d.camera.hfov_deg);
            x.number("vfov_deg", d.camera.vfov_deg);
            x.number("near", d.camera.near);
            x.number("far", d.camera.far);
            x.integer("max_points", d.camera.max_points);
        });
        s.section("lengths", [&](Section& x) {
            x.number("log_mean", d.lengths.log_mean);
            x.number("log_sigma", d.lengths.log_sigma);
            x.integer("min_length", d.lengths.min_length);
            x.integer("max_length", d.lengths.max_length);
        });
        s.section("splits", [&](Section& x) {
            x.integer("train", d.train_clips);
            x.integer("val", d.val_clips);
            x.integer("test", d.test_clips);
            x.integer("unseen", d.unseen_clips);
        });
        s.integer("seen_scenes", d.seen_scenes);
        s.integer("unseen_scenes", d.unseen_scenes);
    });
    root.section("model", [&](Section& s) { read_model(s, c.model); });
    root.section("train", [&](Section& s) {
        TrainConfig& t = c.train;
        s.integer("epochs", t.epochs);
        s.number("lr0", t.lr0);
        s.number("lr_decay", t.lr_decay);
        s.integer("decay_every", t.decay_every);
        s.number("momentum", t.momentum);
        s.number("weight_decay", t.weight_decay);
        s.integer("batch_size", t.batch_size);
        s.enumeration("loss", t.loss, parse_loss_kind);
        s.enumeration("weight_schedule", t.weight_schedule, parse_weight_schedule);
    });
    root.section("registration", [&](Section& s) {
        IcpParams& r = c.registration;
        s.integer("max_iterations", r.max_iterations);
        s.number("max_correspondence_dist", r.max_correspondence_dist);
        s.number("min_correspondence_dist", r.min_correspondence_dist);
        s.number("geometric_weight", r.geometric_weight);
        s.number("convergence_tol", r.convergence_tol);
        s.number("downsample_cell", r.downsample_cell);
        s.integer("normal_neighbors", r.normal_neighbors);
        s.integer("gradient_neighbors", r.gradient_neighbors);
        s.number("fitness_floor", c.fitness_floor);
    });
    root.finish();
    return c;
}

std::string dump_run_config(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": not valid JSON: " + e.what());
    }
    try {
        RunConfig c = run_config_from_json(j);
        c.resolve();
        return c;
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace egopat
