#pragma once

#include "egopat/clip.hpp"
#include "egopat/metrics.hpp"
#include "egopat/model.hpp"

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace egopat {

struct TrainConfig {
    int epochs = 30;
    double lr0 = 0.01;
    double lr_decay = 0.9;
    int decay_every = 5;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 8;
    LossKind loss = LossKind::twr;
    WeightSchedule weight_schedule = WeightSchedule::decreasing;
    std::uint64_t seed = 0;

    void validate() const;
};

/// lr0 * decay^floor((epoch - 1) / decay_every), epoch 1-based.
double lr_at(int epoch, const TrainConfig& config);

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Momentum state; one velocity per parameter, persisting across steps.
struct SgdState {
    VectorXd velocity;
};

/// v <- momentum v + grad + weight_decay * param; param <- param - lr v.
/// Throws NonFiniteError naming the block holding a non-finite gradient.
void sgd_step(ParameterSet& params, const VectorXd& grad, double lr, double momentum, double weight_decay,
              SgdState& state);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;  // mean per-clip loss
    double val_overall_cm = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;  // 0: the initial model was never beaten
    double best_val_cm = 0.0;
};

struct TrainResult {
    PredictorModel best;   // lowest validation overall error seen
    PredictorModel final;  // parameters after the last epoch
    TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded SGD over the training split. Every clip in `train` must carry the
/// train tag and every clip in `val` the val tag; anything else is a hard
/// error. Deterministic in (data, model seed, config.seed).
TrainResult train(const std::vector<Clip>& train_clips, const std::vector<Clip>& val_clips, const ModelConfig& model_config,
                  const TrainConfig& config, unsigned max_threads = 0, const EpochCallback& on_epoch = {});

/// Same, starting from given parameters. Before the first epoch the input
/// normalization is refitted to the training split (skipped when epochs = 0,
/// so the initial model comes back untouched).
TrainResult train_from(PredictorModel init, const std::vector<Clip>& train_clips, const std::vector<Clip>& val_clips,
                       const TrainConfig& config, unsigned max_threads = 0, const EpochCallback& on_epoch = {});

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    std::string worst_block;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Central differences (f(x+eps) - f(x-eps)) / 2eps for every trainable parameter,
/// compared with the analytic gradient as |a - n| / max(1e-8, |a| + |n|).
/// The numeric side evaluates an independent online forward pass in long
/// double: in double, rounding of the loss (about 1e-16 |L| / eps) swamps
/// gradient entries near the 1e-8 floor.
/// `corrupt_index`, when set, doubles that analytic entry (fault injection).
GradCheckResult grad_check(const PredictorModel& model, const ClipInputs& inputs, const LossSpec& loss, double eps,
                           std::optional<std::size_t> corrupt_index = std::nullopt);

std::string history_csv(const TrainHistory& history);

}  // namespace egopat
