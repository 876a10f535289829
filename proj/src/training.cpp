#include "egopat/training.hpp"

#include "egopat/dataset_io.hpp"
#include "egopat/parallel.hpp"
#include "egopat/rng.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace egopat {

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (!(lr0 > 0.0) || !(lr_decay > 0.0) || decay_every < 1) {
        throw std::invalid_argument("TrainConfig: learning-rate schedule must be positive");
    }
    if (!(momentum >= 0.0) || !(weight_decay >= 0.0)) {
        throw std::invalid_argument("TrainConfig: momentum and weight_decay must be non-negative");
    }
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
}

double lr_at(int epoch, const TrainConfig& config) {
    if (epoch < 1) throw std::invalid_argument("lr_at: epochs are 1-based");
    return config.lr0 * std::pow(config.lr_decay, (epoch - 1) / config.decay_every);
}

void sgd_step(ParameterSet& params, const VectorXd& grad, double lr, double momentum, double weight_decay,
              SgdState& state) {
    if (grad.size() != params.values.size()) throw std::invalid_argument("sgd_step: gradient size mismatch");
    if (!grad.allFinite()) {
        for (const auto& b : params.blocks()) {
            if (!grad.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.size())).allFinite()) {
                throw NonFiniteError("sgd_step: non-finite gradient in parameter block '" + b.name + "'");
            }
        }
    }
    if (state.velocity.size() != params.values.size()) state.velocity.setZero(params.values.size());
    state.velocity = momentum * state.velocity + grad + weight_decay * params.values;
    for (const auto& b : params.blocks()) {
        if (!b.trainable) state.velocity.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.size())).setZero();
    }
    params.values -= lr * state.velocity;
}

namespace {

void check_split(const std::vector<Clip>& clips, Split expected) {
    for (const auto& c : clips) {
        if (c.split != expected) {
            throw std::invalid_argument("train: clip " + c.clip_id + " carries split '" + std::string(to_string(c.split)) +
                                        "' where '" + std::string(to_string(expected)) + "' is required");
        }
    }
}

std::vector<ClipInputs> prepare_all(const std::vector<Clip>& clips, const ModelConfig& cfg, unsigned threads) {
    std::vector<ClipInputs> out(clips.size());
    parallel_for(clips.size(), threads, [&](std::size_t i) { out[i] = prepare_inputs(clips[i], cfg); });
    return out;
}

double validation_score(const PredictorModel& model, const std::vector<Clip>& clips,
                        const std::vector<ClipInputs>& inputs, unsigned threads) {
    std::vector<ClipPrediction> preds(clips.size());
    parallel_for(clips.size(), threads, [&](std::size_t i) {
        preds[i] = {clips[i].scene_id, predict_inputs(model, inputs[i]), clips[i].track.targets};
    });
    return aggregate(preds).overall_cm;
}

}  // namespace

TrainResult train(const std::vector<Clip>& train_clips, const std::vector<Clip>& val_clips, const ModelConfig& model_config,
                  const TrainConfig& config, unsigned max_threads, const EpochCallback& on_epoch) {
    return train_from(PredictorModel(model_config, derive_seed(config.seed, "init")), train_clips, val_clips, config,
                      max_threads, on_epoch);
}

TrainResult train_from(PredictorModel init, const std::vector<Clip>& train_clips, const std::vector<Clip>& val_clips,
                       const TrainConfig& config, unsigned max_threads, const EpochCallback& on_epoch) {
    config.validate();
    check_split(train_clips, Split::train);
    check_split(val_clips, Split::val);
    if (train_clips.empty() && config.epochs > 0) throw std::invalid_argument("train: training split is empty");

    const unsigned threads = worker_count(max_threads);
    const ModelConfig& cfg = init.config();
    const std::vector<ClipInputs> train_in = prepare_all(train_clips, cfg, threads);
    const std::vector<ClipInputs> val_in = prepare_all(val_clips, cfg, threads);
    if (config.epochs > 0) init.fit_input_normalization(train_in);

    TrainResult result{init, init, {}};
    PredictorModel& model = result.final;
    const LossSpec loss{config.loss, config.weight_schedule};
    SgdState sgd;
    Rng rng(derive_seed(config.seed, "shuffle"));
    std::vector<std::size_t> order(train_in.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    bool have_best = false;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        rng.shuffle(order);
        const double lr = lr_at(epoch, config);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), order.size() - b);
            std::vector<VectorXd> grads(n);
            std::vector<double> losses(n);
            parallel_for(n, threads, [&](std::size_t i) {
                losses[i] = clip_loss(model, train_in[order[b + i]], loss, &grads[i]);
            });
            VectorXd g = VectorXd::Zero(static_cast<Eigen::Index>(model.parameters().size()));
            for (std::size_t i = 0; i < n; ++i) {
                if (!std::isfinite(losses[i])) {
                    throw NonFiniteError("train: non-finite loss on clip " + train_in[order[b + i]].clip_id +
                                         " in epoch " + std::to_string(epoch));
                }
                loss_sum += losses[i];
                g += grads[i];
            }
            g /= static_cast<double>(n);
            sgd_step(model.parameters(), g, lr, config.momentum, config.weight_decay, sgd);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_overall_cm = val_in.empty() ? std::nan("") : validation_score(model, val_clips, val_in, threads);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.history.epochs.push_back(rec);
        if (val_in.empty() || !have_best || rec.val_overall_cm < result.history.best_val_cm) {
            have_best = true;
            result.best = model;
            result.history.best_epoch = epoch;
            result.history.best_val_cm = rec.val_overall_cm;
        }
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

namespace {

// Forward-only clip loss in a wider scalar type, written step by step
// (online, one frame at a time) independently of the batched path in the
// model. Finite differences taken on it are limited by the rounding of S
// rather than of double, which matters for entries near 1e-8.
template <class S>
class ReferenceLoss {
public:
    using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

    ReferenceLoss(const PredictorModel& model, const ClipInputs& in, const LossSpec& spec)
        : model_(model), in_(in), spec_(spec) {}

    S operator()(const Vec& theta) const {
        const auto& cfg = model_.config();
        const int H = cfg.hidden;
        const std::size_t T = in_.length();
        const VectorXd centers = cfg.grid.centers();
        MatrixXd visual = in_.visual, motion = in_.motion;
        model_.normalize_visual(visual);
        model_.normalize_motion(motion);
        std::vector<Vec> h(model_.recurrent_layers().size(), Vec::Zero(H));
        std::vector<Vec> c(model_.recurrent_layers().size(), Vec::Zero(H));
        S loss = 0;
        for (std::size_t t = 0; t < T; ++t) {
            const auto col = static_cast<Eigen::Index>(t);
            Vec fused_in(model_.visual_width() + model_.motion_width());
            if (cfg.features.visual) {
                fused_in.head(model_.visual_width()) =
                    mlp(theta, model_.visual_layers(), visual.col(col).cast<S>());
            }
            if (cfg.features.motion()) {
                fused_in.tail(model_.motion_width()) =
                    mlp(theta, model_.motion_layers(), motion.col(col).cast<S>());
            }
            Vec x = mlp(theta, model_.fusion_layers(), fused_in);
            for (std::size_t l = 0; l < h.size(); ++l) {
                const auto& r = model_.recurrent_layers()[l];
                if (cfg.cell == CellType::lstm) {
                    const Vec a = block(theta, r.w_ih) * x + block(theta, r.w_hh) * h[l] + block(theta, r.b_ih);
                    for (int k = 0; k < H; ++k) {
                        const S i = sigmoid(a[k]), f = sigmoid(a[H + k]), g = std::tanh(a[2 * H + k]),
                                o = sigmoid(a[3 * H + k]);
                        c[l][k] = f * c[l][k] + i * g;
                        h[l][k] = o * std::tanh(c[l][k]);
                    }
                } else {
                    const Vec gx = block(theta, r.w_ih) * x + block(theta, r.b_ih);
                    const Vec gh = block(theta, r.w_hh) * h[l] + block(theta, r.b_hh);
                    for (int k = 0; k < H; ++k) {
                        const S rg = sigmoid(gx[k] + gh[k]), z = sigmoid(gx[H + k] + gh[H + k]);
                        const S n = std::tanh(gx[2 * H + k] + rg * gh[2 * H + k]);
                        h[l][k] = (1 - z) * n + z * h[l][k];
                    }
                }
                x = h[l];
            }
            const S w = static_cast<S>(frame_weight(t + 1, T, spec_.schedule));
            for (int a = 0; a < 3; ++a) {
                const auto& hd = model_.heads()[a];
                const Vec z = block(theta, hd.weight) * x + block(theta, hd.bias);
                const S y = static_cast<S>(in_.targets(a, col));
                if (spec_.kind == LossKind::nll) {
                    const S m = z.maxCoeff();
                    S sum = 0;
                    for (Eigen::Index k = 0; k < z.size(); ++k) sum += std::exp(z[k] - m);
                    loss += w * (m + std::log(sum) - z[cfg.grid.cell_of(in_.targets(a, col))]);
                } else {
                    const S p = decode(z, centers, cfg);
                    loss += w * (p - y) * (p - y);
                }
            }
        }
        return loss;
    }

private:
    static S sigmoid(S v) { return 1 / (1 + std::exp(-v)); }

    Eigen::Map<const Mat> block(const Vec& theta, std::size_t i) const {
        const auto& b = model_.parameters().blocks()[i];
        return {theta.data() + b.offset, b.rows, b.cols};
    }

    Vec mlp(const Vec& theta, const std::vector<DenseLayer>& layers, Vec x) const {
        for (const auto& l : layers) x = (block(theta, l.weight) * x + block(theta, l.bias)).cwiseMax(S(0));
        return x;
    }

    S decode(const Vec& z, const VectorXd& centers, const ModelConfig& cfg) const {
        const S gamma = static_cast<S>(cfg.gamma);
        Eigen::Index best = 0;
        z.maxCoeff(&best);
        if (sigmoid(z[best]) <= gamma) return static_cast<S>(centers[best]);
        S sum = 0, weighted = 0;
        for (Eigen::Index k = 0; k < z.size(); ++k) {
            const S s = sigmoid(z[k]);
            if (s > gamma) {
                sum += s;
                weighted += s * static_cast<S>(centers[k]);
            }
        }
        return cfg.decode == DecodeMode::raw ? weighted : weighted / sum;
    }

    const PredictorModel& model_;
    const ClipInputs& in_;
    LossSpec spec_;
};

}  // namespace

GradCheckResult grad_check(const PredictorModel& model, const ClipInputs& inputs, const LossSpec& loss, double eps,
                           std::optional<std::size_t> corrupt_index) {
    VectorXd analytic;
    clip_loss(model, inputs, loss, &analytic);
    if (corrupt_index) analytic[static_cast<Eigen::Index>(*corrupt_index)] *= 2.0;

    using S = long double;
    const ReferenceLoss<S> f(model, inputs, loss);
    Eigen::Matrix<S, Eigen::Dynamic, 1> theta = model.parameters().values.cast<S>();
    GradCheckResult r;
    std::vector<Eigen::Index> checked;
    for (const auto& b : model.parameters().blocks()) {
        for (std::size_t k = 0; b.trainable && k < b.size(); ++k) checked.push_back(static_cast<Eigen::Index>(b.offset + k));
    }
    bool first = true;
    for (const Eigen::Index i : checked) {
        const S orig = theta[i];
        theta[i] = orig + eps;
        const S up = f(theta);
        theta[i] = orig - eps;
        const S down = f(theta);
        theta[i] = orig;
        const double numeric = static_cast<double>((up - down) / (2 * static_cast<S>(eps)));
        const double a = analytic[i];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        if (rel > r.max_relative_error || first) {
            first = false;
            r.max_relative_error = rel;
            r.worst_index = static_cast<std::size_t>(i);
            r.analytic = a;
            r.numeric = numeric;
        }
    }
    for (const auto& b : model.parameters().blocks()) {
        if (r.worst_index >= b.offset && r.worst_index < b.offset + b.size()) r.worst_block = b.name;
    }
    return r;
}

std::string history_csv(const TrainHistory& history) {
    std::string out = "epoch,train_loss,val_overall_cm,lr,wall_seconds\n";
    for (const auto& e : history.epochs) {
        out += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.val_overall_cm) + "," +
               format_double(e.lr) + "," + format_double(e.wall_seconds) + "\n";
    }
    return out;
}

}  // namespace egopat
