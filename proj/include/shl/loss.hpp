#pragma once

// Structurally scaled accuracy and coherency losses. All matrices are T x n:
// one row per time step, columns in canonical node order. Scalar losses are
// means over both time and nodes.

#include "core.hpp"
#include "reconcile.hpp"

namespace shl {

inline constexpr double kDefaultAlpha = 0.75;

enum class LossKind { sh, shc };

inline std::string to_string(LossKind k) { return k == LossKind::sh ? "sh" : "shc"; }

inline LossKind loss_kind_from_string(std::string_view s) {
    if (s == "sh") return LossKind::sh;
    if (s == "shc") return LossKind::shc;
    throw ValidationError("unknown loss kind '" + std::string(s) + "'");
}

struct LossConfig {
    double alpha = kDefaultAlpha;
    Vector kappa;
    ReconciliationMap reconciliation;

    void validate() const {
        require(alpha >= 0.0 && alpha <= 1.0, "loss: alpha must lie in [0, 1]");
        require(kappa.size() > 0 && (kappa.array() >= 1.0).all(), "loss: kappa entries must be >= 1");
    }
};

namespace detail {
inline void check_loss_shapes(const Matrix& y, const Matrix& y_hat, const Vector& kappa) {
    require(y.rows() == y_hat.rows() && y.cols() == y_hat.cols(),
            "loss: target and forecast shapes differ");
    require(y.cols() == kappa.size(), "loss: kappa dimension mismatch");
    require(y.rows() >= 1, "loss: empty batch");
}
inline double mean_square(const Matrix& m) {
    return m.squaredNorm() / static_cast<double>(m.size());
}
}  // namespace detail

/// (y - y_hat) with column j divided by kappa[j].
inline Matrix structural_error(const Matrix& y, const Matrix& y_hat, const Vector& kappa) {
    detail::check_loss_shapes(y, y_hat, kappa);
    return (y - y_hat) * kappa.cwiseInverse().asDiagonal();
}

inline double loss_sh(const Matrix& y, const Matrix& y_hat, const Vector& kappa) {
    return detail::mean_square(structural_error(y, y_hat, kappa));
}

/// Per row: y_hat_t - P y_hat_t.
inline Matrix coherency_error(const Matrix& y_hat, const ReconciliationMap& map) {
    require(y_hat.cols() == map.size(), "coherency_error: dimension mismatch");
    return y_hat - map.apply_rows(y_hat);
}

inline double loss_sc(const Matrix& y_hat, const Vector& kappa, const ReconciliationMap& map) {
    require(y_hat.cols() == kappa.size(), "loss_sc: kappa dimension mismatch");
    require(y_hat.rows() >= 1, "loss_sc: empty batch");
    return detail::mean_square(coherency_error(y_hat, map) * kappa.cwiseInverse().asDiagonal());
}

inline double loss_shc(const Matrix& y, const Matrix& y_hat, const LossConfig& config) {
    config.validate();
    const double sh = loss_sh(y, y_hat, config.kappa);
    if (config.alpha == 1.0) return sh;
    const double sc = loss_sc(y_hat, config.kappa, config.reconciliation);
    if (config.alpha == 0.0) return sc;
    return config.alpha * sh + (1.0 - config.alpha) * sc;
}

inline double loss_value(LossKind kind, const Matrix& y, const Matrix& y_hat,
                         const LossConfig& config) {
    return kind == LossKind::sh ? loss_sh(y, y_hat, config.kappa) : loss_shc(y, y_hat, config);
}

/// dL/dy_hat of loss_shc. P is a constant of the loss, not differentiated.
inline Matrix loss_gradients(const Matrix& y, const Matrix& y_hat, const LossConfig& config) {
    config.validate();
    detail::check_loss_shapes(y, y_hat, config.kappa);
    const double scale = 2.0 / static_cast<double>(y.size());
    const Vector inv_k2 = config.kappa.array().square().inverse();
    Matrix grad = (config.alpha * -scale) * ((y - y_hat) * inv_k2.asDiagonal());
    if (config.alpha < 1.0) {
        require(config.reconciliation.size() == y.cols(),
                "loss_gradients: reconciliation map dimension mismatch");
        const Matrix& P = config.reconciliation.matrix();
        const Matrix E = coherency_error(y_hat, config.reconciliation);
        // Row form of (I - P)' diag(1/kappa^2) (I - P) y_hat_t.
        const Matrix weighted = E * inv_k2.asDiagonal();
        grad += ((1.0 - config.alpha) * scale) * (weighted - weighted * P);
    }
    return grad;
}

inline Matrix loss_gradients(LossKind kind, const Matrix& y, const Matrix& y_hat,
                             const LossConfig& config) {
    if (kind == LossKind::shc) return loss_gradients(y, y_hat, config);
    LossConfig accuracy_only{1.0, config.kappa, {}};
    return loss_gradients(y, y_hat, accuracy_only);
}

}  // namespace shl
