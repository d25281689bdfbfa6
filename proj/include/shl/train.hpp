#pragma once

// Masked feed-forward regressor trained from scratch: sigmoid hidden layers
// with batch normalization and inverted dropout, a linear output layer with one
// neuron per tree node, Adam updates, and the rolling-window protocol with an
// adaptive covariance for the coherency loss.

#include "core.hpp"
#include "hierarchy.hpp"
#include "json.hpp"
#include "loss.hpp"
#include "netarch.hpp"
#include "reconcile.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace shl {

struct DenseLayer {
    Matrix weight;  // out x in; zero wherever mask is zero
    Matrix mask;
    Vector bias;
    // Batch normalization parameters. Empty for the output layer.
    Vector gamma;
    Vector beta;
    Vector running_mean;
    Vector running_var;

    bool normalized() const { return gamma.size() > 0; }
    Index inputs() const { return weight.cols(); }
    Index outputs() const { return weight.rows(); }
};

struct Model {
    ArchitectureSpec spec;
    std::vector<DenseLayer> layers;
    std::uint64_t seed = 0;
    double bn_momentum = 0.9;
    double bn_epsilon = 1e-5;

    Index input_width() const { return layers.front().inputs(); }
    Index output_width() const { return layers.back().outputs(); }

    bool masks_respected() const {
        for (const auto& l : layers)
            if ((l.weight.array() * (1.0 - l.mask.array())).abs().maxCoeff() != 0.0) return false;
        return true;
    }

    friend bool operator==(const Model& a, const Model& b) {
        if (!(a.spec == b.spec) || a.seed != b.seed || a.layers.size() != b.layers.size())
            return false;
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            const auto& x = a.layers[i];
            const auto& y = b.layers[i];
            if (x.weight != y.weight || x.mask != y.mask || x.bias != y.bias ||
                x.gamma != y.gamma || x.beta != y.beta || x.running_mean != y.running_mean ||
                x.running_var != y.running_var)
                return false;
        }
        return true;
    }
};

/// Glorot-uniform initialization using mask-aware fan counts: an active weight
/// (r, c) is drawn in +-sqrt(6 / (active inputs of r + active outputs of c)).
inline Model init_model(const NetworkLayout& layout, std::uint64_t seed) {
    require(!layout.masks.empty(), "init_model: layout has no layers");
    for (std::size_t l = 1; l < layout.masks.size(); ++l)
        require(layout.masks[l].cols() == layout.masks[l - 1].rows(),
                "init_model: inconsistent mask shapes");
    Model model;
    model.spec = layout.spec;
    model.seed = seed;
    Rng rng(seed);
    const std::size_t D = layout.masks.size();
    for (std::size_t l = 0; l < D; ++l) {
        DenseLayer layer;
        layer.mask = layout.masks[l];
        layer.weight = Matrix::Zero(layer.mask.rows(), layer.mask.cols());
        const Vector fan_in = layer.mask.rowwise().sum();
        const RowVector fan_out = layer.mask.colwise().sum();
        for (Index r = 0; r < layer.mask.rows(); ++r)
            for (Index c = 0; c < layer.mask.cols(); ++c)
                if (layer.mask(r, c) != 0.0) {
                    const double limit = std::sqrt(6.0 / (fan_in(r) + fan_out(c)));
                    layer.weight(r, c) = rng.uniform(-limit, limit);
                }
        layer.bias = Vector::Zero(layer.mask.rows());
        if (l + 1 < D) {
            const Index w = layer.mask.rows();
            layer.gamma = Vector::Ones(w);
            layer.beta = Vector::Zero(w);
            layer.running_mean = Vector::Zero(w);
            layer.running_var = Vector::Ones(w);
        }
        model.layers.push_back(std::move(layer));
    }
    return model;
}

enum class Mode { train, infer };

struct ForwardOptions {
    Mode mode = Mode::infer;
    /// In train mode, normalize with the running statistics and leave them
    /// untouched. Makes the network a deterministic function of its inputs.
    bool freeze_batchnorm = false;
};

struct LayerCache {
    Matrix input;
    Matrix xhat;
    Vector inv_std;
    Matrix activation;  // sigmoid output, before dropout
    Matrix keep;        // inverted-dropout multipliers; empty when unused
    bool batch_stats = false;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
};

inline Matrix sigmoid(const Matrix& x) {
    return (1.0 + (-x.array()).exp()).inverse().matrix();
}

/// Forward pass. `rng` is required in train mode when dropout is active;
/// `cache` is filled when given (needed for backward).
inline Matrix forward(Model& model, const Matrix& X, const ForwardOptions& opts = {},
                      Rng* rng = nullptr, ForwardCache* cache = nullptr) {
    require(X.cols() == model.input_width(), "forward: input has " + std::to_string(X.cols()) +
                                                 " features, expected " +
                                                 std::to_string(model.input_width()));
    require(X.rows() >= 1, "forward: empty batch");
    const bool train = opts.mode == Mode::train;
    const double p = model.spec.dropout;
    if (cache) cache->layers.assign(model.layers.size(), {});
    Matrix a = X;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        Matrix z = (a * layer.weight.transpose()).rowwise() + layer.bias.transpose();
        if (cache) cache->layers[l].input = a;
        if (!layer.normalized()) {
            a = std::move(z);
            continue;
        }
        const bool batch_stats = train && !opts.freeze_batchnorm;
        Vector mean, var;
        if (batch_stats) {
            mean = z.colwise().mean().transpose();
            var = (z.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
            const double mom = model.bn_momentum;
            layer.running_mean = mom * layer.running_mean + (1.0 - mom) * mean;
            layer.running_var = mom * layer.running_var + (1.0 - mom) * var;
        } else {
            mean = layer.running_mean;
            var = layer.running_var;
        }
        const Vector inv_std = (var.array() + model.bn_epsilon).rsqrt().matrix();
        Matrix xhat = (z.rowwise() - mean.transpose()) * inv_std.asDiagonal();
        Matrix h = sigmoid((xhat * layer.gamma.asDiagonal()).rowwise() + layer.beta.transpose());
        Matrix keep;
        if (train && p > 0.0) {
            require(rng != nullptr, "forward: dropout in train mode needs a random source");
            keep.resize(h.rows(), h.cols());
            const double scale = 1.0 / (1.0 - p);
            for (Index c = 0; c < h.cols(); ++c)
                for (Index r = 0; r < h.rows(); ++r) keep(r, c) = rng->uniform() < p ? 0.0 : scale;
        }
        if (cache) {
            auto& lc = cache->layers[l];
            lc.xhat = xhat;
            lc.inv_std = inv_std;
            lc.activation = h;
            lc.keep = keep;
            lc.batch_stats = batch_stats;
        }
        a = keep.size() ? Matrix(h.cwiseProduct(keep)) : std::move(h);
    }
    return a;
}

/// Inference-mode forward pass on a const model.
inline Matrix predict(const Model& model, const Matrix& X) {
    Model copy = model;
    return forward(copy, X, {Mode::infer});
}

struct Gradients {
    std::vector<Matrix> weight;
    std::vector<Vector> bias;
    std::vector<Vector> gamma;
    std::vector<Vector> beta;
};

/// Backpropagates dL/d(output) through the cached forward pass. Weight
/// gradients are masked, so masked entries receive exactly zero.
inline Gradients backward(const Model& model, const ForwardCache& cache, const Matrix& d_output) {
    const std::size_t D = model.layers.size();
    require(cache.layers.size() == D, "backward: cache does not match the model");
    require(d_output.cols() == model.output_width() &&
                d_output.rows() == cache.layers.back().input.rows(),
            "backward: output gradient shape does not match the cached batch");
    Gradients g;
    g.weight.resize(D);
    g.bias.resize(D);
    g.gamma.resize(D);
    g.beta.resize(D);
    Matrix delta = d_output;  // gradient w.r.t. the layer's output
    for (std::size_t k = D; k-- > 0;) {
        const auto& layer = model.layers[k];
        const auto& lc = cache.layers[k];
        Matrix dz;
        if (!layer.normalized()) {
            dz = delta;
        } else {
            Matrix dh = lc.keep.size() ? Matrix(delta.cwiseProduct(lc.keep)) : delta;
            const Matrix dbn =
                dh.array() * lc.activation.array() * (1.0 - lc.activation.array());
            g.gamma[k] = (dbn.cwiseProduct(lc.xhat)).colwise().sum().transpose();
            g.beta[k] = dbn.colwise().sum().transpose();
            const Matrix dxhat = dbn * layer.gamma.asDiagonal();
            if (lc.batch_stats) {
                const double B = static_cast<double>(dxhat.rows());
                const RowVector sum_dx = dxhat.colwise().sum();
                const RowVector sum_dx_xhat = dxhat.cwiseProduct(lc.xhat).colwise().sum();
                Matrix centered = (B * dxhat).rowwise() - sum_dx;
                centered -= lc.xhat * sum_dx_xhat.asDiagonal();
                dz = centered * (lc.inv_std / B).asDiagonal();
            } else {
                dz = dxhat * lc.inv_std.asDiagonal();
            }
        }
        g.weight[k] = (dz.transpose() * lc.input).cwiseProduct(layer.mask);
        g.bias[k] = dz.colwise().sum().transpose();
        if (k > 0) delta = dz * layer.weight;
    }
    return g;
}

enum class OptimizerKind { adam, sgd };

inline OptimizerKind optimizer_from_string(std::string_view s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd") return OptimizerKind::sgd;
    throw ValidationError("unknown optimizer '" + std::string(s) + "'");
}
inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

/// Adam (or plain SGD) over every trainable tensor of a model.
class Optimizer {
public:
    Optimizer(const Model& model, OptimizerKind kind, double learning_rate, double beta1 = 0.9,
              double beta2 = 0.999, double epsilon = 1e-8)
        : kind_(kind), lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(epsilon) {
        for (const auto& l : model.layers) {
            state_.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()),
                              Matrix::Zero(l.weight.rows(), l.weight.cols())});
            state_.push_back({Matrix::Zero(l.bias.size(), 1), Matrix::Zero(l.bias.size(), 1)});
            state_.push_back({Matrix::Zero(l.gamma.size(), 1), Matrix::Zero(l.gamma.size(), 1)});
            state_.push_back({Matrix::Zero(l.beta.size(), 1), Matrix::Zero(l.beta.size(), 1)});
        }
    }

    void step(Model& model, const Gradients& g) {
        ++t_;
        std::size_t s = 0;
        for (std::size_t k = 0; k < model.layers.size(); ++k) {
            auto& l = model.layers[k];
            update(l.weight, g.weight[k], state_[s++]);
            l.weight = l.weight.cwiseProduct(l.mask);
            update(l.bias, g.bias[k], state_[s++]);
            if (l.normalized()) {
                update(l.gamma, g.gamma[k], state_[s++]);
                update(l.beta, g.beta[k], state_[s++]);
            } else {
                s += 2;
            }
        }
    }

private:
    struct Moments {
        Matrix m;
        Matrix v;
    };

    template <class Param, class Grad>
    void update(Param& param, const Grad& grad, Moments& st) const {
        if (kind_ == OptimizerKind::sgd) {
            param -= lr_ * grad;
            return;
        }
        st.m = b1_ * st.m + (1.0 - b1_) * grad;
        st.v = b2_ * st.v + (1.0 - b2_) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        param.array() -= lr_ * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps_);
    }

    OptimizerKind kind_;
    double lr_, b1_, b2_, eps_;
    long long t_ = 0;
    std::vector<Moments> state_;
};

struct TrainConfig {
    int epochs = 200;
    int batch_size = 32;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double alpha = kDefaultAlpha;
    double dropout = 0.2;
    LossKind loss = LossKind::shc;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;  // chronological tail used for early stopping
    int patience = 20;
    bool init_output_bias = true;  // start output biases at the training-target means
    double bn_momentum = 0.9;

    void validate() const {
        require(epochs > 0, "train config: epochs must be positive");
        require(batch_size > 0, "train config: batch size must be positive");
        require(learning_rate > 0.0, "train config: learning rate must be positive");
        require(alpha >= 0.0 && alpha <= 1.0, "train config: alpha must lie in [0, 1]");
        require(dropout >= 0.0 && dropout < 1.0, "train config: dropout must lie in [0, 1)");
        require(validation_fraction >= 0.0 && validation_fraction < 1.0,
                "train config: validation fraction must lie in [0, 1)");
        require(bn_momentum >= 0.0 && bn_momentum <= 1.0,
                "train config: batch-norm momentum must lie in [0, 1]");
    }
};

struct FitResult {
    Model model;
    std::vector<double> train_loss;       // mean mini-batch loss per epoch
    std::vector<double> validation_loss;  // empty without early stopping
    int best_epoch = 0;
};

/// Mini-batch training of `model` on design rows X -> targets Y (T x n). The
/// coherency term uses a reconciliation map built once from `sigma`.
inline FitResult fit(Model model, const Matrix& X, const Matrix& Y, const StructuralMatrices& sm,
                     const TrainConfig& config, const CovarianceEstimate& sigma) {
    config.validate();
    require(X.rows() == Y.rows(), "fit: features and targets have different row counts");
    require(Y.cols() == model.output_width(), "fit: target width does not match the model");
    require(Y.cols() == sm.kappa.size(), "fit: target width does not match the tree");
    require(X.rows() >= 2, "fit: need at least two training rows");
    require(X.allFinite() && Y.allFinite(), "fit: training data contain non-finite values");

    LossConfig loss_cfg{config.alpha, sm.kappa, {}};
    if (config.loss == LossKind::shc && config.alpha < 1.0)
        loss_cfg.reconciliation = ReconciliationMap(sm.S, sigma);
    model.bn_momentum = config.bn_momentum;
    model.spec.dropout = config.dropout;

    const Index rows = X.rows();
    Index val_rows = static_cast<Index>(std::ceil(config.validation_fraction * static_cast<double>(rows)));
    const bool early_stop = config.patience > 0 && val_rows >= 1 && rows - val_rows >= 2 &&
                            config.validation_fraction > 0.0;
    if (!early_stop) val_rows = 0;
    const Index train_rows = rows - val_rows;

    if (config.init_output_bias)
        model.layers.back().bias = Y.topRows(train_rows).colwise().mean().transpose();

    Rng rng(Rng::derive(config.seed, 0xF17));
    Optimizer opt(model, config.optimizer, config.learning_rate);
    std::vector<Index> order(static_cast<std::size_t>(train_rows));
    for (Index i = 0; i < train_rows; ++i) order[static_cast<std::size_t>(i)] = i;

    FitResult result;
    Model best = model;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    const Index bs = config.batch_size;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        int batches = 0;
        Index start = 0;
        while (start < train_rows) {
            Index stop = std::min(start + bs, train_rows);
            // A trailing singleton batch has no batch statistics; fold it in.
            if (train_rows - stop == 1) stop = train_rows;
            const Index B = stop - start;
            Matrix xb(B, X.cols()), yb(B, Y.cols());
            for (Index r = 0; r < B; ++r) {
                const Index src = order[static_cast<std::size_t>(start + r)];
                xb.row(r) = X.row(src);
                yb.row(r) = Y.row(src);
            }
            ForwardCache cache;
            const Matrix out = forward(model, xb, {Mode::train}, &rng, &cache);
            const double loss = loss_value(config.loss, yb, out, loss_cfg);
            if (!std::isfinite(loss))
                throw RuntimeError("fit: loss became non-finite at epoch " + std::to_string(epoch + 1));
            opt.step(model, backward(model, cache, loss_gradients(config.loss, yb, out, loss_cfg)));
            epoch_loss += loss;
            ++batches;
            start = stop;
        }
        result.train_loss.push_back(epoch_loss / batches);

        if (early_stop) {
            const Matrix val_out = predict(model, X.bottomRows(val_rows));
            const double v = loss_value(config.loss, Y.bottomRows(val_rows), val_out, loss_cfg);
            if (!std::isfinite(v))
                throw RuntimeError("fit: validation loss became non-finite at epoch " +
                                   std::to_string(epoch + 1));
            result.validation_loss.push_back(v);
            if (v < best_val) {
                best_val = v;
                best = model;
                result.best_epoch = epoch + 1;
                since_best = 0;
            } else if (++since_best >= config.patience) {
                break;
            }
        }
    }
    if (early_stop) {
        result.model = std::move(best);
    } else {
        result.model = std::move(model);
        result.best_epoch = static_cast<int>(result.train_loss.size());
    }
    return result;
}

// ---------------------------------------------------------------------------
// Rolling-window protocol

struct Fold {
    std::size_t train_begin = 0;
    std::size_t train_end = 0;  // exclusive; equals test_begin
    std::size_t test_begin = 0;
    std::size_t test_end = 0;   // exclusive
};

struct SplitPlan {
    std::vector<Fold> folds;
    std::size_t test_size = 0;
};

/// Chronological splits with equal test blocks, as in scikit-learn's
/// TimeSeriesSplit: test_size defaults to rows / (count + 1) and the blocks are
/// packed against the end of the series. Training ranges expand from row 0
/// unless `max_train_size` caps them.
inline SplitPlan make_split_plan(std::size_t rows, std::size_t count = 10,
                                 std::optional<std::size_t> test_size = std::nullopt,
                                 std::optional<std::size_t> max_train_size = std::nullopt) {
    require(count >= 1, "split plan: need at least one split");
    SplitPlan plan;
    plan.test_size = test_size.value_or(rows / (count + 1));
    require(plan.test_size >= 1, "split plan: " + std::to_string(rows) +
                                     " rows are too few for " + std::to_string(count) + " splits");
    require(rows > count * plan.test_size,
            "split plan: " + std::to_string(rows) + " rows leave no training data for " +
                std::to_string(count) + " test blocks of " + std::to_string(plan.test_size));
    const std::size_t first_test = rows - count * plan.test_size;
    for (std::size_t i = 0; i < count; ++i) {
        Fold f;
        f.test_begin = first_test + i * plan.test_size;
        f.test_end = f.test_begin + plan.test_size;
        f.train_end = f.test_begin;
        f.train_begin = max_train_size && f.train_end > *max_train_size ? f.train_end - *max_train_size : 0;
        plan.folds.push_back(f);
    }
    return plan;
}

struct FoldRecord {
    Fold fold;
    CovarianceEstimate sigma;  // covariance used by this fold's coherency loss
    std::vector<double> train_loss;
    int best_epoch = 0;
    bool restored = false;  // model loaded instead of trained
};

struct RollingResult {
    Matrix forecasts;                  // concatenated test forecasts, rows x n
    Matrix targets;                    // matching observations
    std::vector<std::size_t> rows;     // design-row index of every forecast row
    std::vector<CovarianceEstimate> sigmas;  // one per fold, identity first
    CovarianceEstimate next_sigma;     // estimate from the final fold's test residuals
    std::vector<FoldRecord> records;
    std::vector<Model> models;
};

/// Optional persistence hooks: `load` may return a stored model for a fold to
/// skip its training; `save` receives every freshly trained model.
struct RollingHooks {
    std::function<std::optional<Model>(std::size_t fold)> load;
    std::function<void(std::size_t fold, const Model&)> save;
};

inline RollingResult rolling_window_run(const Matrix& X, const Matrix& Y,
                                        const StructuralMatrices& sm, const NetworkLayout& layout,
                                        const TrainConfig& config, std::size_t split_count = 10,
                                        const RollingHooks& hooks = {},
                                        std::optional<std::size_t> max_train_size = std::nullopt) {
    require(X.rows() == Y.rows(), "rolling_window_run: features and targets differ in rows");
    const auto plan = make_split_plan(static_cast<std::size_t>(X.rows()), split_count, std::nullopt,
                                      max_train_size);
    const Index n = Y.cols();
    RollingResult out;
    out.forecasts.resize(static_cast<Index>(plan.folds.size() * plan.test_size), n);
    out.targets.resize(out.forecasts.rows(), n);
    CovarianceEstimate sigma = CovarianceEstimate::identity(n, 0);
    Index cursor = 0;
    for (std::size_t i = 0; i < plan.folds.size(); ++i) {
        const Fold& f = plan.folds[i];
        const auto tb = static_cast<Index>(f.train_begin);
        const auto tl = static_cast<Index>(f.train_end - f.train_begin);
        const auto sb = static_cast<Index>(f.test_begin);
        const auto sl = static_cast<Index>(f.test_end - f.test_begin);

        FoldRecord rec{f, sigma, {}, 0, false};
        std::optional<Model> model;
        if (hooks.load) model = hooks.load(i);
        if (model) {
            rec.restored = true;
        } else {
            TrainConfig fold_cfg = config;
            fold_cfg.seed = Rng::derive(config.seed, i);
            auto fitted = fit(init_model(layout, fold_cfg.seed), X.middleRows(tb, tl), Y.middleRows(tb, tl), sm,
                              fold_cfg, sigma);
            rec.train_loss = std::move(fitted.train_loss);
            rec.best_epoch = fitted.best_epoch;
            model = std::move(fitted.model);
            if (hooks.save) hooks.save(i, *model);
        }
        const Matrix test_out = predict(*model, X.middleRows(sb, sl));
        const Matrix test_y = Y.middleRows(sb, sl);
        out.forecasts.middleRows(cursor, sl) = test_out;
        out.targets.middleRows(cursor, sl) = test_y;
        for (Index r = 0; r < sl; ++r) out.rows.push_back(static_cast<std::size_t>(sb + r));
        cursor += sl;

        out.sigmas.push_back(sigma);
        out.records.push_back(std::move(rec));
        out.models.push_back(std::move(*model));
        sigma = estimate_hvar(test_y - test_out, kVarianceFloor, static_cast<int>(i + 1));
    }
    out.next_sigma = sigma;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace detail {
inline nlohmann::json matrix_to_json(const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}
inline Matrix matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Index>();
    const auto cols = j.at("cols").get<Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    require(static_cast<Index>(data.size()) == rows * cols, "checkpoint: tensor size mismatch");
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    return m;
}
inline nlohmann::json vector_to_json(const Vector& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}
inline Vector vector_from_json(const nlohmann::json& j) {
    const auto d = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(d.data(), static_cast<Index>(d.size()));
}
}  // namespace detail

inline nlohmann::json model_to_json(const Model& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : model.layers) {
        nlohmann::json j{{"weight", detail::matrix_to_json(l.weight)},
                         {"mask", detail::matrix_to_json(l.mask)},
                         {"bias", detail::vector_to_json(l.bias)}};
        if (l.normalized()) {
            j["gamma"] = detail::vector_to_json(l.gamma);
            j["beta"] = detail::vector_to_json(l.beta);
            j["running_mean"] = detail::vector_to_json(l.running_mean);
            j["running_var"] = detail::vector_to_json(l.running_var);
        }
        layers.push_back(std::move(j));
    }
    return {{"spec", architecture_to_json(model.spec)},
            {"seed", model.seed},
            {"bn_momentum", model.bn_momentum},
            {"bn_epsilon", model.bn_epsilon},
            {"layers", layers}};
}

inline Model model_from_json(const nlohmann::json& j) {
    Model model;
    model.spec = architecture_from_json(j.at("spec"));
    model.seed = j.at("seed").get<std::uint64_t>();
    model.bn_momentum = j.value("bn_momentum", 0.9);
    model.bn_epsilon = j.value("bn_epsilon", 1e-5);
    for (const auto& lj : j.at("layers")) {
        DenseLayer l;
        l.weight = detail::matrix_from_json(lj.at("weight"));
        l.mask = detail::matrix_from_json(lj.at("mask"));
        l.bias = detail::vector_from_json(lj.at("bias"));
        require(l.weight.rows() == l.mask.rows() && l.weight.cols() == l.mask.cols() &&
                    l.bias.size() == l.weight.rows(),
                "checkpoint: inconsistent layer shapes");
        if (lj.contains("gamma")) {
            l.gamma = detail::vector_from_json(lj.at("gamma"));
            l.beta = detail::vector_from_json(lj.at("beta"));
            l.running_mean = detail::vector_from_json(lj.at("running_mean"));
            l.running_var = detail::vector_from_json(lj.at("running_var"));
        }
        if (!model.layers.empty())
            require(model.layers.back().outputs() == l.inputs(), "checkpoint: layer chain mismatch");
        model.layers.push_back(std::move(l));
    }
    require(!model.layers.empty(), "checkpoint: no layers");
    require(model.masks_respected(), "checkpoint: weights outside the mask");
    return model;
}

}  // namespace shl
