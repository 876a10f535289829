#pragma once

#include "egopat/clip.hpp"
#include "egopat/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace egopat {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Uniform partition of the normalized range [-1,1] per axis, mapped affinely
/// onto a camera-frame workspace box.
struct GridSpec {
    int n_cells = 64;
    Box workspace;

    void validate() const;
    /// Cell centers g[i] = -1 + (2i + 1) / N.
    VectorXd centers() const;
    double cell_width() const { return 2.0 / n_cells; }
    /// Meters -> [-1,1]^3 (no clamping).
    Vec3 normalize(const Vec3& p) const;
    Vec3 denormalize(const Vec3& u) const;
    /// Index of the cell containing normalized coordinate u (clamped to range).
    int cell_of(double u) const;
};

enum class CellType { lstm, gru };
enum class DecodeMode { renorm, raw, argmax };
enum class LossKind { twr, nll };
enum class WeightSchedule { decreasing, reversed };

struct FeatureFlags {
    bool visual = true;  // VF
    bool tf = true;      // TF: relative transform to the previous frame
    bool imu = true;     // IMU

    bool motion() const { return tf || imu; }
    std::string to_string() const;
    /// Parses "vf,tf,imu" style lists; throws on unknown or empty sets.
    static FeatureFlags parse(const std::string& s);
};

struct ModelConfig {
    GridSpec grid;
    int voxel_resolution = 8;
    // One hidden layer each: with the U(+-1/sqrt(fan_in)) initialization every
    // extra ReLU layer shrinks the input-driven signal about 2.5x, and deeper
    // encoders leave the recurrent trunk input-blind at the start of training.
    std::vector<int> visual_widths = {256};
    std::vector<int> motion_widths = {64};
    std::vector<int> fusion_widths = {128};
    CellType cell = CellType::lstm;
    int hidden = 128;
    int layers = 2;
    FeatureFlags features;
    DecodeMode decode = DecodeMode::renorm;
    double gamma = 0.5;

    /// Configuration errors (width mismatches, empty feature sets) surface here.
    void validate() const;
    int visual_input_width() const { return 4 * voxel_resolution * voxel_resolution * voxel_resolution; }
    static constexpr int kMotionInputWidth = 12;

    /// H=8, N=8 model used for gradient checks.
    static ModelConfig tiny();
};

std::string to_string(CellType c);
std::string to_string(DecodeMode d);
std::string to_string(LossKind l);
std::string to_string(WeightSchedule w);
CellType parse_cell_type(const std::string& s);
DecodeMode parse_decode_mode(const std::string& s);
LossKind parse_loss_kind(const std::string& s);
WeightSchedule parse_weight_schedule(const std::string& s);

/// Flat parameter vector with named, shaped blocks in declaration order.
class ParameterSet {
public:
    struct Block {
        std::string name;
        int rows = 0;
        int cols = 0;
        std::size_t offset = 0;
        int fan_in = 1;
        bool trainable = true;  // frozen blocks are set by fitting, not by the optimizer
        std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
    };

    std::size_t add(std::string name, int rows, int cols, int fan_in, bool trainable = true);
    const std::vector<Block>& blocks() const { return blocks_; }
    std::size_t size() const { return static_cast<std::size_t>(values.size()); }

    Eigen::Map<MatrixXd> block(std::size_t i, VectorXd& storage) const {
        const Block& b = blocks_[i];
        return {storage.data() + b.offset, b.rows, b.cols};
    }
    Eigen::Map<const MatrixXd> block(std::size_t i, const VectorXd& storage) const {
        const Block& b = blocks_[i];
        return {storage.data() + b.offset, b.rows, b.cols};
    }
    Eigen::Map<const MatrixXd> block(std::size_t i) const { return block(i, values); }

    VectorXd values;

private:
    std::vector<Block> blocks_;
};

struct DenseLayer {
    std::size_t weight = 0;  // block indices
    std::size_t bias = 0;
    int in = 0;
    int out = 0;
};

struct RecurrentLayer {
    std::size_t w_ih = 0, w_hh = 0, b_ih = 0, b_hh = 0;  // b_hh only used by GRU
    int in = 0;
};

struct HeadLayer {
    std::size_t weight = 0, bias = 0;
};

struct ClipInputs;

/// Frozen per-feature affine map x' = (x - shift) * scale applied to raw
/// encoder inputs. Identity until fitted to training data.
struct InputNorm {
    std::size_t shift = 0, scale = 0;
};

/// Recurrent state: hidden and (LSTM only) cell memory per layer.
struct PredictorState {
    std::vector<VectorXd> h;
    std::vector<VectorXd> c;
};

/// 3 x N matrix of per-axis scores (rows x, y, z).
using ScoreMatrix = Eigen::Matrix<double, 3, Eigen::Dynamic>;

class PredictorModel {
public:
    PredictorModel() = default;
    /// Builds the layout and fills parameters with seeded
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    PredictorModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    const ParameterSet& parameters() const { return params_; }
    ParameterSet& parameters() { return params_; }
    /// Decoding does not touch the parameter layout, so it may change freely.
    void set_decode(DecodeMode mode) { config_.decode = mode; }

    const std::vector<DenseLayer>& visual_layers() const { return visual_; }
    const std::vector<DenseLayer>& motion_layers() const { return motion_; }
    const std::vector<DenseLayer>& fusion_layers() const { return fusion_; }
    const std::vector<RecurrentLayer>& recurrent_layers() const { return rnn_; }
    const std::array<HeadLayer, 3>& heads() const { return heads_; }
    const std::optional<InputNorm>& visual_norm() const { return visual_norm_; }
    const std::optional<InputNorm>& motion_norm() const { return motion_norm_; }

    /// Sets the input normalization to the per-feature mean and
    /// 1 / max(std, kMinInputStd) over every frame of `inputs`.
    void fit_input_normalization(const std::vector<ClipInputs>& inputs);
    /// Applies the fitted normalization in place (one column per frame).
    void normalize_visual(MatrixXd& raw) const;
    void normalize_motion(MatrixXd& raw) const;

    int visual_width() const;
    int motion_width() const;
    int fused_width() const;

    PredictorState initial_state() const;

    /// Raw head pre-activations for one step; scores are their sigmoid.
    struct StepOutput {
        ScoreMatrix logits;
        ScoreMatrix scores;
    };

    std::uint64_t digest() const;

private:
    void build_layout();

    ModelConfig config_;
    ParameterSet params_;
    std::vector<DenseLayer> visual_;
    std::vector<DenseLayer> motion_;
    std::vector<DenseLayer> fusion_;
    std::vector<RecurrentLayer> rnn_;
    std::array<HeadLayer, 3> heads_{};
    std::optional<InputNorm> visual_norm_;
    std::optional<InputNorm> motion_norm_;
};

/// Features that barely vary in training (empty voxels, say) would otherwise
/// be amplified without bound when they do vary at test time.
inline constexpr double kMinInputStd = 0.05;

// ---- per-frame feature extraction -------------------------------------------------

/// Occupancy fraction and mean color per voxel of the grid workspace box,
/// channel-major (occupancy, r, g, b), each R^3 in x-fastest order. Points
/// outside the box are ignored; the fraction is relative to the full cloud.
VectorXd voxel_features(const PointCloud& cloud, const Box& box, int resolution);

/// Raw 12-wide motion input: angular rate, specific force / g, relative
/// rotation vector * fps, relative translation * fps. Disabled groups are
/// zero-filled.
VectorXd motion_features(const ImuSample& imu, const std::optional<RigidTransform>& rel, double fps,
                         const FeatureFlags& flags);

// ---- forward pieces (online path) -------------------------------------------------

VectorXd encode_visual(const PointCloud& cloud, const PredictorModel& model);
VectorXd encode_motion(const ImuSample& imu, const std::optional<RigidTransform>& rel, double fps,
                       const PredictorModel& model);
VectorXd fuse(const VectorXd& visual, const VectorXd& motion, const PredictorModel& model);
PredictorModel::StepOutput step(const PredictorModel& model, PredictorState& state, const VectorXd& fused);

// ---- decoding and losses ----------------------------------------------------------

/// Masked expectation over one axis. Returns a normalized coordinate.
double decode_axis(const Eigen::Ref<const VectorXd>& scores, const VectorXd& centers, double gamma,
                   DecodeMode mode);
/// Decodes all three axes and maps to meters.
Vec3 decode(const ScoreMatrix& scores, const GridSpec& grid, double gamma, DecodeMode mode = DecodeMode::renorm);

/// w_t for 1-based frame t of T.
double frame_weight(std::size_t t, std::size_t T, WeightSchedule schedule);

struct LossResult {
    double loss = 0.0;
    std::vector<double> per_frame;
};

/// Targets in normalized coordinates, one column per frame.
LossResult twr_loss(const std::vector<ScoreMatrix>& scores, const GridSpec& grid,
                    const std::vector<Vec3>& targets_normalized, double gamma,
                    WeightSchedule schedule = WeightSchedule::decreasing, DecodeMode mode = DecodeMode::renorm);
LossResult nll_loss(const std::vector<ScoreMatrix>& logits, const GridSpec& grid,
                    const std::vector<Vec3>& targets_normalized,
                    WeightSchedule schedule = WeightSchedule::decreasing);

// ---- whole-clip paths -------------------------------------------------------------

/// Per-clip tensors computed once: voxel features, motion inputs, and
/// clamped normalized targets (one column per frame).
struct ClipInputs {
    std::string clip_id;
    MatrixXd visual;
    MatrixXd motion;
    MatrixXd targets;
    std::size_t clamped_targets = 0;
    std::size_t length() const { return static_cast<std::size_t>(targets.cols()); }
};

ClipInputs prepare_inputs(const Clip& clip, const ModelConfig& config);

struct LossSpec {
    LossKind kind = LossKind::twr;
    WeightSchedule schedule = WeightSchedule::decreasing;
};

/// Clip loss and, if `gradient` is non-null, its gradient w.r.t. every
/// parameter by reverse accumulation through the unrolled clip.
double clip_loss(const PredictorModel& model, const ClipInputs& inputs, const LossSpec& loss,
                 VectorXd* gradient = nullptr);

/// Batched forward over a prepared clip; returns per-frame predictions in meters.
std::vector<Vec3> predict_inputs(const PredictorModel& model, const ClipInputs& inputs);

/// Online prediction: state reset, then one step + decode per frame.
std::vector<Vec3> predict_clip(const PredictorModel& model, const Clip& clip);

// ---- checkpoints ------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'E', 'G', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const PredictorModel& model);
/// Throws FormatError on any layout deviation.
PredictorModel decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");
void save_checkpoint(const std::filesystem::path& path, const PredictorModel& model);
PredictorModel load_checkpoint(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace egopat
