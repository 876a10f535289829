#include "egopat/model.hpp"

#include "egopat/config.hpp"
#include "egopat/dataset_io.hpp"
#include "egopat/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace egopat {

// ---- grid -------------------------------------------------------------------------

void GridSpec::validate() const {
    if (n_cells < 2) throw std::invalid_argument("GridSpec: need at least 2 cells per axis");
    if (!((workspace.hi - workspace.lo).array() > 0.0).all()) {
        throw std::invalid_argument("GridSpec: workspace must have positive extent on every axis");
    }
}

VectorXd GridSpec::centers() const {
    VectorXd g(n_cells);
    for (int i = 0; i < n_cells; ++i) g[i] = -1.0 + (2.0 * i + 1.0) / n_cells;
    return g;
}

Vec3 GridSpec::normalize(const Vec3& p) const {
    return (2.0 * (p - workspace.lo).array() / workspace.extent().array() - 1.0).matrix();
}

Vec3 GridSpec::denormalize(const Vec3& u) const {
    return workspace.lo + ((u.array() + 1.0) * 0.5 * workspace.extent().array()).matrix();
}

int GridSpec::cell_of(double u) const {
    const int c = static_cast<int>(std::floor((u + 1.0) * 0.5 * n_cells));
    return std::clamp(c, 0, n_cells - 1);
}

// ---- config enums -----------------------------------------------------------------

std::string FeatureFlags::to_string() const {
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!s.empty()) s += ',';
        s += name;
    };
    add(visual, "vf");
    add(tf, "tf");
    add(imu, "imu");
    return s;
}

FeatureFlags FeatureFlags::parse(const std::string& text) {
    FeatureFlags f{false, false, false};
    std::string norm = text;
    std::replace(norm.begin(), norm.end(), '+', ',');
    std::stringstream ss(norm);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::string t;
        for (char ch : item) {
            if (!std::isspace(static_cast<unsigned char>(ch))) t += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
        if (t.empty()) continue;
        if (t == "vf") f.visual = true;
        else if (t == "tf") f.tf = true;
        else if (t == "imu") f.imu = true;
        else throw std::invalid_argument("unknown feature '" + t + "'");
    }
    if (!f.visual && !f.motion()) throw std::invalid_argument("feature set must enable at least one of vf, tf, imu");
    return f;
}

std::string to_string(CellType c) { return c == CellType::lstm ? "lstm" : "gru"; }
std::string to_string(DecodeMode d) {
    switch (d) {
        case DecodeMode::renorm: return "renorm";
        case DecodeMode::raw: return "raw";
        case DecodeMode::argmax: return "argmax";
    }
    return "renorm";
}
std::string to_string(LossKind l) { return l == LossKind::twr ? "twr" : "nll"; }
std::string to_string(WeightSchedule w) { return w == WeightSchedule::decreasing ? "decreasing" : "reversed"; }

CellType parse_cell_type(const std::string& s) {
    if (s == "lstm") return CellType::lstm;
    if (s == "gru") return CellType::gru;
    throw std::invalid_argument("unknown cell type '" + s + "'");
}
DecodeMode parse_decode_mode(const std::string& s) {
    if (s == "renorm") return DecodeMode::renorm;
    if (s == "raw") return DecodeMode::raw;
    if (s == "argmax") return DecodeMode::argmax;
    throw std::invalid_argument("unknown decode mode '" + s + "'");
}
LossKind parse_loss_kind(const std::string& s) {
    if (s == "twr") return LossKind::twr;
    if (s == "nll") return LossKind::nll;
    throw std::invalid_argument("unknown loss '" + s + "'");
}
WeightSchedule parse_weight_schedule(const std::string& s) {
    if (s == "decreasing") return WeightSchedule::decreasing;
    if (s == "reversed") return WeightSchedule::reversed;
    throw std::invalid_argument("unknown weight schedule '" + s + "'");
}

void ModelConfig::validate() const {
    grid.validate();
    if (voxel_resolution < 1) throw std::invalid_argument("ModelConfig: voxel_resolution must be >= 1");
    if (hidden < 1 || layers < 1) throw std::invalid_argument("ModelConfig: hidden and layers must be >= 1");
    if (!features.visual && !features.motion()) {
        throw std::invalid_argument("ModelConfig: at least one feature group must be enabled");
    }
    auto check = [](const std::vector<int>& widths, const char* what, bool needed) {
        if (needed && widths.empty()) throw std::invalid_argument(std::string("ModelConfig: ") + what + " needs a layer");
        for (int w : widths) {
            if (w < 1) throw std::invalid_argument(std::string("ModelConfig: ") + what + " widths must be >= 1");
        }
    };
    check(visual_widths, "visual encoder", features.visual);
    check(motion_widths, "motion encoder", features.motion());
    check(fusion_widths, "fusion", true);
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("ModelConfig: gamma must lie in [0,1)");
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.grid.n_cells = 8;
    c.voxel_resolution = 3;
    c.visual_widths = {12};
    c.motion_widths = {8};
    c.fusion_widths = {10};
    c.hidden = 8;
    c.layers = 2;
    return c;
}

// ---- parameters -------------------------------------------------------------------

std::size_t ParameterSet::add(std::string name, int rows, int cols, int fan_in, bool trainable) {
    Block b{std::move(name), rows, cols, static_cast<std::size_t>(values.size()), fan_in, trainable};
    blocks_.push_back(b);
    values.conservativeResize(static_cast<Eigen::Index>(b.offset + b.size()));
    values.tail(static_cast<Eigen::Index>(b.size())).setZero();
    return blocks_.size() - 1;
}

PredictorModel::PredictorModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build_layout();
    Rng rng(seed);
    for (const auto& b : params_.blocks()) {
        if (!b.trainable) continue;
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.fan_in));
        for (std::size_t i = 0; i < b.size(); ++i) params_.values[static_cast<Eigen::Index>(b.offset + i)] = rng.uniform(-bound, bound);
    }
}

void PredictorModel::build_layout() {
    auto norm = [&](const std::string& prefix, int width) {
        InputNorm n;
        n.shift = params_.add(prefix + ".shift", width, 1, 1, false);
        n.scale = params_.add(prefix + ".scale", width, 1, 1, false);
        params_.block(n.scale, params_.values).setOnes();
        return n;
    };
    if (config_.features.visual) visual_norm_ = norm("input.visual", config_.visual_input_width());
    if (config_.features.motion()) motion_norm_ = norm("input.motion", ModelConfig::kMotionInputWidth);

    auto mlp = [&](const std::string& prefix, int in, const std::vector<int>& widths, std::vector<DenseLayer>& out) {
        for (std::size_t i = 0; i < widths.size(); ++i) {
            DenseLayer l;
            l.in = in;
            l.out = widths[i];
            l.weight = params_.add(prefix + "." + std::to_string(i) + ".weight", l.out, in, in);
            l.bias = params_.add(prefix + "." + std::to_string(i) + ".bias", l.out, 1, in);
            out.push_back(l);
            in = l.out;
        }
    };
    if (config_.features.visual) mlp("visual", config_.visual_input_width(), config_.visual_widths, visual_);
    if (config_.features.motion()) mlp("motion", ModelConfig::kMotionInputWidth, config_.motion_widths, motion_);
    mlp("fusion", visual_width() + motion_width(), config_.fusion_widths, fusion_);

    const int h = config_.hidden;
    const int gates = config_.cell == CellType::lstm ? 4 : 3;
    int in = fused_width();
    for (int l = 0; l < config_.layers; ++l) {
        RecurrentLayer r;
        r.in = in;
        const std::string p = "rnn." + std::to_string(l);
        r.w_ih = params_.add(p + ".w_ih", gates * h, in, in);
        r.w_hh = params_.add(p + ".w_hh", gates * h, h, h);
        r.b_ih = params_.add(p + ".b_ih", gates * h, 1, h);
        r.b_hh = config_.cell == CellType::gru ? params_.add(p + ".b_hh", gates * h, 1, h) : r.b_ih;
        rnn_.push_back(r);
        in = h;
    }
    const char* axes[] = {"x", "y", "z"};
    for (int a = 0; a < 3; ++a) {
        heads_[a].weight = params_.add(std::string("head.") + axes[a] + ".weight", config_.grid.n_cells, h, h);
        heads_[a].bias = params_.add(std::string("head.") + axes[a] + ".bias", config_.grid.n_cells, 1, h);
    }
}

namespace {

void fit_norm(ParameterSet& p, const InputNorm& n, const std::vector<const MatrixXd*>& data) {
    const Eigen::Index rows = p.block(n.shift).rows();
    VectorXd mean = VectorXd::Zero(rows);
    VectorXd sq = VectorXd::Zero(rows);
    double count = 0.0;
    for (const MatrixXd* m : data) {
        mean += m->rowwise().sum();
        sq += m->array().square().matrix().rowwise().sum();
        count += static_cast<double>(m->cols());
    }
    if (count == 0.0) return;
    mean /= count;
    const Eigen::ArrayXd var = (sq.array() / count - mean.array().square()).max(0.0);
    p.block(n.shift, p.values) = mean;
    p.block(n.scale, p.values) = (1.0 / var.sqrt().max(kMinInputStd)).matrix();
}

void apply_norm(const ParameterSet& p, const std::optional<InputNorm>& n, MatrixXd& raw) {
    if (!n) return;
    raw.colwise() -= p.block(n->shift).col(0);
    raw = raw.array().colwise() * p.block(n->scale).col(0).array();
}

}  // namespace

void PredictorModel::fit_input_normalization(const std::vector<ClipInputs>& inputs) {
    std::vector<const MatrixXd*> visual, motion;
    for (const auto& in : inputs) {
        visual.push_back(&in.visual);
        motion.push_back(&in.motion);
    }
    if (visual_norm_) fit_norm(params_, *visual_norm_, visual);
    if (motion_norm_) fit_norm(params_, *motion_norm_, motion);
}

void PredictorModel::normalize_visual(MatrixXd& raw) const { apply_norm(params_, visual_norm_, raw); }
void PredictorModel::normalize_motion(MatrixXd& raw) const { apply_norm(params_, motion_norm_, raw); }

int PredictorModel::visual_width() const { return visual_.empty() ? 0 : visual_.back().out; }
int PredictorModel::motion_width() const { return motion_.empty() ? 0 : motion_.back().out; }
int PredictorModel::fused_width() const { return fusion_.empty() ? 0 : fusion_.back().out; }

PredictorState PredictorModel::initial_state() const {
    PredictorState s;
    for (int l = 0; l < config_.layers; ++l) {
        s.h.push_back(VectorXd::Zero(config_.hidden));
        s.c.push_back(VectorXd::Zero(config_.cell == CellType::lstm ? config_.hidden : 0));
    }
    return s;
}

std::uint64_t PredictorModel::digest() const {
    Fnv1a h;
    h.update(encode_checkpoint(*this));
    return h.value();
}

// ---- features ---------------------------------------------------------------------

VectorXd voxel_features(const PointCloud& cloud, const Box& box, int resolution) {
    const int r = resolution;
    const int cells = r * r * r;
    VectorXd out = VectorXd::Zero(4 * cells);
    if (cloud.empty()) return out;
    const Vec3 size = box.extent() / r;
    std::vector<int> counts(static_cast<std::size_t>(cells), 0);
    for (const auto& p : cloud) {
        if (!box.contains(p.position)) continue;
        int idx[3];
        for (int k = 0; k < 3; ++k) {
            idx[k] = std::clamp(static_cast<int>(std::floor((p.position[k] - box.lo[k]) / size[k])), 0, r - 1);
        }
        const int cell = idx[0] + r * (idx[1] + r * idx[2]);
        ++counts[static_cast<std::size_t>(cell)];
        for (int k = 0; k < 3; ++k) out[(k + 1) * cells + cell] += p.color[k];
    }
    const double total = static_cast<double>(cloud.size());
    for (int c = 0; c < cells; ++c) {
        const int n = counts[static_cast<std::size_t>(c)];
        out[c] = n / total;
        if (n > 0) {
            for (int k = 1; k <= 3; ++k) out[k * cells + c] /= n;
        }
    }
    return out;
}

VectorXd motion_features(const ImuSample& imu, const std::optional<RigidTransform>& rel, double fps,
                         const FeatureFlags& flags) {
    VectorXd out = VectorXd::Zero(ModelConfig::kMotionInputWidth);
    if (flags.imu) {
        for (int k = 0; k < 3; ++k) out[k] = imu[k];
        for (int k = 0; k < 3; ++k) out[3 + k] = imu[3 + k] / 9.81;
    }
    if (flags.tf && rel) {
        out.segment<3>(6) = rel->rotation_vector() * fps;
        out.segment<3>(9) = rel->translation() * fps;
    }
    return out;
}

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename Derived>
auto sigmoid_array(const Eigen::ArrayBase<Derived>& x) {
    return 1.0 / (1.0 + (-x).exp());
}

VectorXd mlp_forward(const PredictorModel& model, const std::vector<DenseLayer>& layers, VectorXd x) {
    const auto& p = model.parameters();
    for (const auto& l : layers) {
        x = (p.block(l.weight) * x + p.block(l.bias)).cwiseMax(0.0);
    }
    return x;
}

}  // namespace

VectorXd encode_visual(const PointCloud& cloud, const PredictorModel& model) {
    if (!model.config().features.visual) return {};
    const auto& c = model.config();
    MatrixXd x = voxel_features(cloud, c.grid.workspace, c.voxel_resolution);
    model.normalize_visual(x);
    return mlp_forward(model, model.visual_layers(), x.col(0));
}

VectorXd encode_motion(const ImuSample& imu, const std::optional<RigidTransform>& rel, double fps,
                       const PredictorModel& model) {
    if (!model.config().features.motion()) return {};
    MatrixXd x = motion_features(imu, rel, fps, model.config().features);
    model.normalize_motion(x);
    return mlp_forward(model, model.motion_layers(), x.col(0));
}

VectorXd fuse(const VectorXd& visual, const VectorXd& motion, const PredictorModel& model) {
    if (visual.size() != model.visual_width() || motion.size() != model.motion_width()) {
        throw std::invalid_argument("fuse: feature widths do not match the model");
    }
    VectorXd cat(visual.size() + motion.size());
    cat << visual, motion;
    return mlp_forward(model, model.fusion_layers(), cat);
}

PredictorModel::StepOutput step(const PredictorModel& model, PredictorState& state, const VectorXd& fused) {
    const auto& p = model.parameters();
    const auto& cfg = model.config();
    const int h = cfg.hidden;
    VectorXd x = fused;
    for (std::size_t l = 0; l < model.recurrent_layers().size(); ++l) {
        const auto& r = model.recurrent_layers()[l];
        if (cfg.cell == CellType::lstm) {
            const VectorXd a = p.block(r.w_ih) * x + p.block(r.w_hh) * state.h[l] + p.block(r.b_ih);
            const VectorXd i = sigmoid_array(a.segment(0, h).array()).matrix();
            const VectorXd f = sigmoid_array(a.segment(h, h).array()).matrix();
            const VectorXd g = a.segment(2 * h, h).array().tanh().matrix();
            const VectorXd o = sigmoid_array(a.segment(3 * h, h).array()).matrix();
            state.c[l] = f.cwiseProduct(state.c[l]) + i.cwiseProduct(g);
            state.h[l] = o.cwiseProduct(state.c[l].array().tanh().matrix());
        } else {
            const VectorXd gx = p.block(r.w_ih) * x + p.block(r.b_ih);
            const VectorXd gh = p.block(r.w_hh) * state.h[l] + p.block(r.b_hh);
            const VectorXd rg = sigmoid_array((gx.segment(0, h) + gh.segment(0, h)).array()).matrix();
            const VectorXd z = sigmoid_array((gx.segment(h, h) + gh.segment(h, h)).array()).matrix();
            const VectorXd n = (gx.segment(2 * h, h) + rg.cwiseProduct(gh.segment(2 * h, h))).array().tanh().matrix();
            state.h[l] = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(state.h[l]);
        }
        x = state.h[l];
    }
    PredictorModel::StepOutput out;
    out.logits.resize(3, cfg.grid.n_cells);
    for (int a = 0; a < 3; ++a) {
        const auto& hd = model.heads()[a];
        out.logits.row(a) = (p.block(hd.weight) * x + p.block(hd.bias)).transpose();
    }
    out.scores = sigmoid_array(out.logits.array()).matrix();
    return out;
}

// ---- decode & losses --------------------------------------------------------------

namespace {

/// Per-axis decode with its derivative w.r.t. each score (zero off the mask).
double decode_axis_with_grad(const Eigen::Ref<const VectorXd>& s, const VectorXd& g, double gamma, DecodeMode mode,
                             VectorXd* dp_ds) {
    const Eigen::Index n = s.size();
    if (dp_ds) dp_ds->setZero(n);
    Eigen::Index best = 0;
    s.maxCoeff(&best);
    if (mode == DecodeMode::argmax || s[best] <= gamma) return g[best];
    double sum = 0.0, weighted = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (s[i] > gamma) {
            sum += s[i];
            weighted += s[i] * g[i];
        }
    }
    if (mode == DecodeMode::raw) {
        if (dp_ds) {
            for (Eigen::Index i = 0; i < n; ++i) (*dp_ds)[i] = s[i] > gamma ? g[i] : 0.0;
        }
        return weighted;
    }
    const double p = weighted / sum;
    if (dp_ds) {
        for (Eigen::Index i = 0; i < n; ++i) (*dp_ds)[i] = s[i] > gamma ? (g[i] - p) / sum : 0.0;
    }
    return p;
}

}  // namespace

double decode_axis(const Eigen::Ref<const VectorXd>& scores, const VectorXd& centers, double gamma, DecodeMode mode) {
    return decode_axis_with_grad(scores, centers, gamma, mode, nullptr);
}

Vec3 decode(const ScoreMatrix& scores, const GridSpec& grid, double gamma, DecodeMode mode) {
    const VectorXd g = grid.centers();
    Vec3 u;
    for (int a = 0; a < 3; ++a) u[a] = decode_axis(scores.row(a).transpose(), g, gamma, mode);
    return grid.denormalize(u);
}

double frame_weight(std::size_t t, std::size_t T, WeightSchedule schedule) {
    const double frac = static_cast<double>(t) / static_cast<double>(T);
    return schedule == WeightSchedule::decreasing ? 2.0 - frac : 1.0 + frac;
}

LossResult twr_loss(const std::vector<ScoreMatrix>& scores, const GridSpec& grid,
                    const std::vector<Vec3>& targets, double gamma, WeightSchedule schedule, DecodeMode mode) {
    if (scores.size() != targets.size()) throw std::invalid_argument("twr_loss: scores/targets length mismatch");
    const VectorXd g = grid.centers();
    const std::size_t T = scores.size();
    LossResult r;
    r.per_frame.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        const double w = frame_weight(t + 1, T, schedule);
        double term = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double p = decode_axis(scores[t].row(a).transpose(), g, gamma, mode);
            term += (targets[t][a] - p) * (targets[t][a] - p);
        }
        r.per_frame[t] = w * term;
        r.loss += r.per_frame[t];
    }
    return r;
}

namespace {
double log_sum_exp(const Eigen::Ref<const VectorXd>& z) {
    const double m = z.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((z.array() - m).exp().sum());
}
}  // namespace

LossResult nll_loss(const std::vector<ScoreMatrix>& logits, const GridSpec& grid, const std::vector<Vec3>& targets,
                    WeightSchedule schedule) {
    if (logits.size() != targets.size()) throw std::invalid_argument("nll_loss: logits/targets length mismatch");
    const std::size_t T = logits.size();
    LossResult r;
    r.per_frame.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        const double w = frame_weight(t + 1, T, schedule);
        double term = 0.0;
        for (int a = 0; a < 3; ++a) {
            const VectorXd z = logits[t].row(a).transpose();
            const int c = grid.cell_of(targets[t][a]);
            term += log_sum_exp(z) - z[c];
        }
        r.per_frame[t] = w * term;
        r.loss += r.per_frame[t];
    }
    return r;
}

// ---- batched clip forward / backward ----------------------------------------------

ClipInputs prepare_inputs(const Clip& clip, const ModelConfig& config) {
    const std::size_t T = clip.length();
    if (clip.track.size() != T) throw std::invalid_argument("prepare_inputs: target track length mismatch");
    ClipInputs in;
    in.clip_id = clip.clip_id;
    const auto cols = static_cast<Eigen::Index>(T);
    if (config.features.visual) in.visual.resize(config.visual_input_width(), cols);
    in.motion.resize(ModelConfig::kMotionInputWidth, cols);
    in.targets.resize(3, cols);
    for (std::size_t t = 0; t < T; ++t) {
        const auto c = static_cast<Eigen::Index>(t);
        const Frame& f = clip.frames[t];
        if (config.features.visual) {
            in.visual.col(c) = voxel_features(f.cloud, config.grid.workspace, config.voxel_resolution);
        }
        in.motion.col(c) = motion_features(f.imu, f.rel_transform, clip.fps, config.features);
        const Vec3& y = clip.track.targets[t];
        if (!config.grid.workspace.contains(y)) ++in.clamped_targets;
        in.targets.col(c) = config.grid.normalize(config.grid.workspace.clamp(y));
    }
    return in;
}

namespace {

struct MlpCache {
    std::vector<MatrixXd> acts;  // acts[0] = input, acts[i+1] = relu(W acts[i] + b)
};

void mlp_forward_batch(const ParameterSet& p, const std::vector<DenseLayer>& layers, const MatrixXd& input,
                       MlpCache& cache) {
    cache.acts.clear();
    cache.acts.push_back(input);
    for (const auto& l : layers) {
        MatrixXd z = p.block(l.weight) * cache.acts.back();
        z.colwise() += p.block(l.bias).col(0);
        cache.acts.push_back(z.cwiseMax(0.0));
    }
}

/// Returns d(loss)/d(input) unless `need_input_grad` is false.
MatrixXd mlp_backward_batch(const ParameterSet& p, const std::vector<DenseLayer>& layers, const MlpCache& cache,
                            MatrixXd grad, VectorXd& g, bool need_input_grad) {
    for (std::size_t i = layers.size(); i-- > 0;) {
        const auto& l = layers[i];
        grad = grad.cwiseProduct((cache.acts[i + 1].array() > 0.0).cast<double>().matrix());
        p.block(l.weight, g).noalias() += grad * cache.acts[i].transpose();
        p.block(l.bias, g).col(0) += grad.rowwise().sum();
        if (i > 0 || need_input_grad) grad = p.block(l.weight).transpose() * grad;
    }
    return grad;
}

struct RnnCache {
    MatrixXd input;   // in x T
    MatrixXd gates;   // activated gates, (4H or 3H) x T
    MatrixXd hn;      // GRU only: W_hn h + b_hn
    MatrixXd cell;    // LSTM only: c_t
    MatrixXd hidden;  // h_t
};

void rnn_forward(const ParameterSet& p, const RecurrentLayer& r, CellType cell, int H, const MatrixXd& input,
                 RnnCache& cache) {
    const Eigen::Index T = input.cols();
    cache.input = input;
    MatrixXd gx = p.block(r.w_ih) * input;
    gx.colwise() += p.block(r.b_ih).col(0);
    const auto w_hh = p.block(r.w_hh);
    cache.hidden.resize(H, T);
    VectorXd h = VectorXd::Zero(H);
    if (cell == CellType::lstm) {
        cache.gates.resize(4 * H, T);
        cache.cell.resize(H, T);
        VectorXd c = VectorXd::Zero(H);
        for (Eigen::Index t = 0; t < T; ++t) {
            VectorXd a = gx.col(t);
            a.noalias() += w_hh * h;
            a.segment(0, 2 * H) = sigmoid_array(a.segment(0, 2 * H).array()).matrix();
            a.segment(2 * H, H) = a.segment(2 * H, H).array().tanh().matrix();
            a.segment(3 * H, H) = sigmoid_array(a.segment(3 * H, H).array()).matrix();
            c = a.segment(H, H).cwiseProduct(c) + a.segment(0, H).cwiseProduct(a.segment(2 * H, H));
            h = a.segment(3 * H, H).cwiseProduct(c.array().tanh().matrix());
            cache.gates.col(t) = a;
            cache.cell.col(t) = c;
            cache.hidden.col(t) = h;
        }
    } else {
        cache.gates.resize(3 * H, T);
        cache.hn.resize(H, T);
        const auto b_hh = p.block(r.b_hh).col(0);
        for (Eigen::Index t = 0; t < T; ++t) {
            VectorXd gh = w_hh * h + b_hh;
            VectorXd a(3 * H);
            a.segment(0, 2 * H) = sigmoid_array((gx.col(t).segment(0, 2 * H) + gh.segment(0, 2 * H)).array()).matrix();
            a.segment(2 * H, H) =
                (gx.col(t).segment(2 * H, H) + a.segment(0, H).cwiseProduct(gh.segment(2 * H, H))).array().tanh().matrix();
            const auto z = a.segment(H, H).array();
            h = ((1.0 - z) * a.segment(2 * H, H).array() + z * h.array()).matrix();
            cache.gates.col(t) = a;
            cache.hn.col(t) = gh.segment(2 * H, H);
            cache.hidden.col(t) = h;
        }
    }
}

/// Backward through one recurrent layer given d(loss)/d(h_t) for every t from
/// the layer above; accumulates parameter gradients and returns d/d(input).
MatrixXd rnn_backward(const ParameterSet& p, const RecurrentLayer& r, CellType cell, int H, const RnnCache& cache,
                      const MatrixXd& dh_out, VectorXd& g) {
    const Eigen::Index T = cache.hidden.cols();
    const auto w_hh = p.block(r.w_hh);
    MatrixXd h_prev(H, T);
    h_prev.col(0).setZero();
    if (T > 1) h_prev.rightCols(T - 1) = cache.hidden.leftCols(T - 1);

    VectorXd dh_next = VectorXd::Zero(H);
    if (cell == CellType::lstm) {
        MatrixXd da(4 * H, T);
        VectorXd dc_next = VectorXd::Zero(H);
        for (Eigen::Index t = T - 1; t >= 0; --t) {
            const auto a = cache.gates.col(t);
            const auto i = a.segment(0, H).array();
            const auto f = a.segment(H, H).array();
            const auto gg = a.segment(2 * H, H).array();
            const auto o = a.segment(3 * H, H).array();
            const Eigen::ArrayXd tc = cache.cell.col(t).array().tanh();
            const Eigen::ArrayXd c_prev = t > 0 ? Eigen::ArrayXd(cache.cell.col(t - 1).array()) : Eigen::ArrayXd::Zero(H);
            const Eigen::ArrayXd dh = (dh_out.col(t) + dh_next).array();
            const Eigen::ArrayXd dc = dc_next.array() + dh * o * (1.0 - tc * tc);
            da.col(t).segment(0, H) = (dc * gg * i * (1.0 - i)).matrix();
            da.col(t).segment(H, H) = (dc * c_prev * f * (1.0 - f)).matrix();
            da.col(t).segment(2 * H, H) = (dc * i * (1.0 - gg * gg)).matrix();
            da.col(t).segment(3 * H, H) = (dh * tc * o * (1.0 - o)).matrix();
            dc_next = (dc * f).matrix();
            dh_next.noalias() = w_hh.transpose() * da.col(t);
        }
        p.block(r.w_ih, g).noalias() += da * cache.input.transpose();
        p.block(r.w_hh, g).noalias() += da * h_prev.transpose();
        p.block(r.b_ih, g).col(0) += da.rowwise().sum();
        return p.block(r.w_ih).transpose() * da;
    }

    MatrixXd dgx(3 * H, T), dgh(3 * H, T);
    for (Eigen::Index t = T - 1; t >= 0; --t) {
        const auto a = cache.gates.col(t);
        const auto rg = a.segment(0, H).array();
        const auto z = a.segment(H, H).array();
        const auto n = a.segment(2 * H, H).array();
        const auto hp = h_prev.col(t).array();
        const Eigen::ArrayXd dh = (dh_out.col(t) + dh_next).array();
        const Eigen::ArrayXd dn_pre = dh * (1.0 - z) * (1.0 - n * n);
        const Eigen::ArrayXd dz_pre = dh * (hp - n) * z * (1.0 - z);
        const Eigen::ArrayXd dr_pre = dn_pre * cache.hn.col(t).array() * rg * (1.0 - rg);
        dgx.col(t) << dr_pre.matrix(), dz_pre.matrix(), dn_pre.matrix();
        dgh.col(t) << dr_pre.matrix(), dz_pre.matrix(), (dn_pre * rg).matrix();
        dh_next = (dh * z).matrix();
        dh_next.noalias() += w_hh.transpose() * dgh.col(t);
    }
    p.block(r.w_ih, g).noalias() += dgx * cache.input.transpose();
    p.block(r.w_hh, g).noalias() += dgh * h_prev.transpose();
    p.block(r.b_ih, g).col(0) += dgx.rowwise().sum();
    p.block(r.b_hh, g).col(0) += dgh.rowwise().sum();
    return p.block(r.w_ih).transpose() * dgx;
}

struct ClipForward {
    MlpCache visual, motion, fusion;
    std::vector<RnnCache> rnn;
    std::array<MatrixXd, 3> logits;  // N x T per axis
};

void forward_clip(const PredictorModel& model, const ClipInputs& in, ClipForward& fw) {
    const auto& p = model.parameters();
    const auto& cfg = model.config();
    const auto T = static_cast<Eigen::Index>(in.length());
    MatrixXd fused_in(model.visual_width() + model.motion_width(), T);
    if (cfg.features.visual) {
        MatrixXd x = in.visual;
        model.normalize_visual(x);
        mlp_forward_batch(p, model.visual_layers(), x, fw.visual);
        fused_in.topRows(model.visual_width()) = fw.visual.acts.back();
    }
    if (cfg.features.motion()) {
        MatrixXd x = in.motion;
        model.normalize_motion(x);
        mlp_forward_batch(p, model.motion_layers(), x, fw.motion);
        fused_in.bottomRows(model.motion_width()) = fw.motion.acts.back();
    }
    mlp_forward_batch(p, model.fusion_layers(), fused_in, fw.fusion);
    fw.rnn.resize(model.recurrent_layers().size());
    const MatrixXd* x = &fw.fusion.acts.back();
    for (std::size_t l = 0; l < fw.rnn.size(); ++l) {
        rnn_forward(p, model.recurrent_layers()[l], cfg.cell, cfg.hidden, *x, fw.rnn[l]);
        x = &fw.rnn[l].hidden;
    }
    for (int a = 0; a < 3; ++a) {
        const auto& hd = model.heads()[a];
        fw.logits[a] = p.block(hd.weight) * *x;
        fw.logits[a].colwise() += p.block(hd.bias).col(0);
    }
}

}  // namespace

double clip_loss(const PredictorModel& model, const ClipInputs& in, const LossSpec& spec, VectorXd* gradient) {
    const auto& cfg = model.config();
    const auto& p = model.parameters();
    const std::size_t T = in.length();
    if (T == 0) throw std::invalid_argument("clip_loss: empty clip");
    ClipForward fw;
    forward_clip(model, in, fw);

    const VectorXd g = cfg.grid.centers();
    const int N = cfg.grid.n_cells;
    const DecodeMode mode = cfg.decode == DecodeMode::raw ? DecodeMode::raw : DecodeMode::renorm;
    std::array<MatrixXd, 3> dlogits;
    for (auto& d : dlogits) d.setZero(N, static_cast<Eigen::Index>(T));

    double loss = 0.0;
    VectorXd dp_ds(N);
    for (std::size_t t = 0; t < T; ++t) {
        const auto c = static_cast<Eigen::Index>(t);
        const double w = frame_weight(t + 1, T, spec.schedule);
        for (int a = 0; a < 3; ++a) {
            const double y = in.targets(a, c);
            const auto z = fw.logits[a].col(c);
            if (spec.kind == LossKind::twr) {
                const VectorXd s = sigmoid_array(z.array()).matrix();
                const double pred = decode_axis_with_grad(s, g, cfg.gamma, mode, &dp_ds);
                loss += w * (pred - y) * (pred - y);
                const double dl_dp = 2.0 * w * (pred - y);
                dlogits[a].col(c) = (dl_dp * dp_ds.array() * s.array() * (1.0 - s.array())).matrix();
            } else {
                const int cell = cfg.grid.cell_of(y);
                const double lse = log_sum_exp(z);
                loss += w * (lse - z[cell]);
                VectorXd soft = (z.array() - lse).exp().matrix();
                soft[cell] -= 1.0;
                dlogits[a].col(c) = w * soft;
            }
        }
    }
    if (!gradient) return loss;

    VectorXd& grad = *gradient;
    grad.setZero(static_cast<Eigen::Index>(p.size()));
    const MatrixXd& top = fw.rnn.empty() ? fw.fusion.acts.back() : fw.rnn.back().hidden;
    MatrixXd dh = MatrixXd::Zero(top.rows(), top.cols());
    for (int a = 0; a < 3; ++a) {
        const auto& hd = model.heads()[a];
        p.block(hd.weight, grad).noalias() += dlogits[a] * top.transpose();
        p.block(hd.bias, grad).col(0) += dlogits[a].rowwise().sum();
        dh.noalias() += p.block(hd.weight).transpose() * dlogits[a];
    }
    for (std::size_t l = fw.rnn.size(); l-- > 0;) {
        dh = rnn_backward(p, model.recurrent_layers()[l], cfg.cell, cfg.hidden, fw.rnn[l], dh, grad);
    }
    MatrixXd dfused = mlp_backward_batch(p, model.fusion_layers(), fw.fusion, dh, grad, true);
    if (cfg.features.visual) {
        mlp_backward_batch(p, model.visual_layers(), fw.visual, dfused.topRows(model.visual_width()), grad, false);
    }
    if (cfg.features.motion()) {
        mlp_backward_batch(p, model.motion_layers(), fw.motion, dfused.bottomRows(model.motion_width()), grad, false);
    }
    return loss;
}

std::vector<Vec3> predict_inputs(const PredictorModel& model, const ClipInputs& in) {
    const auto& cfg = model.config();
    ClipForward fw;
    forward_clip(model, in, fw);
    std::vector<Vec3> out;
    out.reserve(in.length());
    for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(in.length()); ++t) {
        ScoreMatrix s(3, cfg.grid.n_cells);
        for (int a = 0; a < 3; ++a) s.row(a) = sigmoid_array(fw.logits[a].col(t).array()).matrix().transpose();
        out.push_back(decode(s, cfg.grid, cfg.gamma, cfg.decode));
    }
    return out;
}

std::vector<Vec3> predict_clip(const PredictorModel& model, const Clip& clip) {
    const auto& cfg = model.config();
    PredictorState state = model.initial_state();
    std::vector<Vec3> out;
    out.reserve(clip.length());
    for (const auto& f : clip.frames) {
        const VectorXd v = encode_visual(f.cloud, model);
        const VectorXd m = encode_motion(f.imu, f.rel_transform, clip.fps, model);
        const auto s = step(model, state, fuse(v, m, model));
        out.push_back(decode(s.scores, cfg.grid, cfg.gamma, cfg.decode));
    }
    return out;
}

// ---- checkpoints ------------------------------------------------------------------

namespace {
void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& b, const std::string& origin) : b_(b), origin_(origin) {}
    std::uint64_t uint(int bytes, const char* what) {
        if (b_.size() - pos_ < static_cast<std::size_t>(bytes)) fail(std::string("truncated while reading ") + what);
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        if (b_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return b_.size() - pos_; }
    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(origin_ + ": " + msg + " (offset " + std::to_string(pos_) + ")");
    }

private:
    const std::string& b_;
    std::string origin_;
    std::size_t pos_ = 0;
};
}  // namespace

std::string encode_checkpoint(const PredictorModel& model) {
    std::string out(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    const std::string cfg = model_config_json(model.config());
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    const auto& blocks = model.parameters().blocks();
    put_u32(out, static_cast<std::uint32_t>(blocks.size()));
    for (const auto& b : blocks) {
        put_u32(out, static_cast<std::uint32_t>(b.name.size()));
        out += b.name;
        put_u32(out, static_cast<std::uint32_t>(b.rows));
        put_u32(out, static_cast<std::uint32_t>(b.cols));
    }
    const auto& v = model.parameters().values;
    for (Eigen::Index i = 0; i < v.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(v[i]));
    return out;
}

PredictorModel decode_checkpoint(const std::string& bytes, const std::string& origin) {
    Reader r(bytes, origin);
    if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) r.fail("bad magic");
    const auto version = r.uint(4, "version");
    if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
    const auto cfg_len = r.uint(4, "config length");
    if (cfg_len > r.remaining()) r.fail("config length exceeds file size");
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(r.bytes(cfg_len, "config"));
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        r.fail(std::string("invalid model config: ") + e.what());
    }
    PredictorModel model(cfg, 0);
    const auto& blocks = model.parameters().blocks();
    const auto n_blocks = r.uint(4, "block count");
    if (n_blocks != blocks.size()) r.fail("block count does not match the model config");
    for (const auto& b : blocks) {
        const auto len = r.uint(4, "block name length");
        if (len > r.remaining()) r.fail("block name exceeds file size");
        if (r.bytes(len, "block name") != b.name) r.fail("unexpected block name, expected " + b.name);
        if (r.uint(4, "rows") != static_cast<std::uint64_t>(b.rows) ||
            r.uint(4, "cols") != static_cast<std::uint64_t>(b.cols)) {
            r.fail("shape mismatch for block " + b.name);
        }
    }
    auto& v = model.parameters().values;
    if (r.remaining() != static_cast<std::size_t>(v.size()) * 8) r.fail("parameter payload has the wrong size");
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        v[i] = std::bit_cast<double>(r.uint(8, "parameter"));
        if (!std::isfinite(v[i])) r.fail("non-finite parameter");
    }
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const PredictorModel& model) {
    write_file_atomic(path, encode_checkpoint(model));
}

PredictorModel load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

}  // namespace egopat
