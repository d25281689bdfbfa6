#pragma once

// Forecast reconciliation: bottom-up, top-down from historical proportions,
// and generalized least squares with diagonal covariance approximations.

#include "core.hpp"
#include "hierarchy.hpp"
#include "json.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace shl {

inline constexpr double kVarianceFloor = 1e-8;

enum class CovarianceKind { identity, hvar, structural };

inline std::string to_string(CovarianceKind k) {
    switch (k) {
        case CovarianceKind::identity: return "identity";
        case CovarianceKind::hvar: return "hvar";
        case CovarianceKind::structural: return "structural";
    }
    return "?";
}

inline CovarianceKind covariance_kind_from_string(std::string_view s) {
    if (s == "identity") return CovarianceKind::identity;
    if (s == "hvar") return CovarianceKind::hvar;
    if (s == "structural") return CovarianceKind::structural;
    throw ValidationError("unknown covariance kind '" + std::string(s) + "'");
}

/// Diagonal approximation of the coherency-error covariance.
struct CovarianceEstimate {
    CovarianceKind kind = CovarianceKind::identity;
    Vector diag;
    int batch_index = 0;

    static CovarianceEstimate identity(Index n, int batch_index = 0) {
        return {CovarianceKind::identity, Vector::Ones(n), batch_index};
    }
    static CovarianceEstimate structural(const Vector& kappa, int batch_index = 0) {
        return {CovarianceKind::structural, kappa, batch_index};
    }

    friend bool operator==(const CovarianceEstimate& a, const CovarianceEstimate& b) {
        return a.kind == b.kind && a.batch_index == b.batch_index && a.diag.size() == b.diag.size() &&
               a.diag == b.diag;
    }
};

/// P = S (S' W S)^{-1} S' W with W = Sigma^{-1} diagonal. Built once per
/// (S, Sigma) and then read-only.
class ReconciliationMap {
public:
    ReconciliationMap() = default;

    ReconciliationMap(const Matrix& S, const Vector& sigma_diag) {
        require(sigma_diag.size() == S.rows(), "ReconciliationMap: covariance has dimension " +
                                                   std::to_string(sigma_diag.size()) +
                                                   ", expected " + std::to_string(S.rows()));
        require((sigma_diag.array() > 0.0).all() && sigma_diag.allFinite(),
                "ReconciliationMap: covariance diagonal must be positive and finite");
        // (S' W S)^{-1} S' W is the least-squares solve of (W^1/2 S) X = W^1/2.
        // QR keeps the conditioning of W^1/2 S instead of squaring it, which
        // matters once variances sit at the floor.
        const Vector root_w = sigma_diag.cwiseInverse().cwiseSqrt();
        const Matrix A = root_w.asDiagonal() * S;
        const Eigen::ColPivHouseholderQR<Matrix> qr(A);
        if (qr.rank() < S.cols())
            throw RuntimeError("ReconciliationMap: S' Sigma^-1 S is singular");
        const Matrix rhs = root_w.asDiagonal().toDenseMatrix();
        P_ = S * qr.solve(rhs);
    }

    ReconciliationMap(const Matrix& S, const CovarianceEstimate& sigma)
        : ReconciliationMap(S, sigma.diag) {}

    const Matrix& matrix() const { return P_; }
    Index size() const { return P_.rows(); }

    Vector apply(const Vector& y_hat) const {
        require(y_hat.size() == P_.cols(), "reconcile: forecast has length " +
                                               std::to_string(y_hat.size()) + ", expected " +
                                               std::to_string(P_.cols()));
        return P_ * y_hat;
    }

    /// Row-wise application to a T x n forecast matrix.
    Matrix apply_rows(const Matrix& y_hat) const {
        require(y_hat.cols() == P_.cols(), "reconcile: forecast matrix has " +
                                               std::to_string(y_hat.cols()) + " columns, expected " +
                                               std::to_string(P_.cols()));
        return y_hat * P_.transpose();
    }

private:
    Matrix P_;
};

inline Vector reconcile_gls(const Vector& y_hat, const Matrix& S, const CovarianceEstimate& sigma) {
    return ReconciliationMap(S, sigma).apply(y_hat);
}

inline Vector reconcile_bottom_up(const Vector& y_hat, const Matrix& S, const Matrix& G) {
    require(y_hat.size() == G.cols() && S.cols() == G.rows(),
            "reconcile_bottom_up: dimension mismatch");
    return S * (G * y_hat);
}

/// Leaves receive root forecast x proportions; aggregates are re-summed.
inline Vector reconcile_top_down(const Vector& y_hat, const Matrix& S, const Vector& proportions) {
    require(y_hat.size() == S.rows(), "reconcile_top_down: forecast dimension mismatch");
    require(proportions.size() == S.cols(), "reconcile_top_down: proportions dimension mismatch");
    require((proportions.array() >= 0.0).all(), "reconcile_top_down: negative proportion");
    require(std::abs(proportions.sum() - 1.0) <= 1e-12,
            "reconcile_top_down: proportions do not sum to 1");
    return S * (y_hat(0) * proportions);
}

/// Share of each leaf in the root's historical total. `panel` is T x n in
/// canonical node order. Incoherent panels are renormalized with a warning.
inline Vector historical_proportions(const Matrix& panel, std::size_t leaf_count) {
    const auto m = static_cast<Index>(leaf_count);
    require(m > 0 && panel.cols() >= m, "historical_proportions: panel has too few columns");
    const double root_total = panel.col(0).sum();
    require(std::isfinite(root_total) && root_total > 0.0,
            "historical_proportions: root series total must be strictly positive");
    Vector p = panel.rightCols(m).colwise().sum().transpose() / root_total;
    const double s = p.sum();
    if (std::abs(s - 1.0) > 1e-12) {
        require(s > 0.0, "historical_proportions: leaf totals are not positive");
        warn("historical_proportions: leaf totals sum to " + std::to_string(s) +
             " of the root total; renormalizing");
        p /= s;
    }
    return p;
}

/// Per-node sample variances (denominator T-1) of a T x n residual matrix,
/// floored at `floor`.
inline CovarianceEstimate estimate_hvar(const Matrix& residuals, double floor = kVarianceFloor,
                                        int batch_index = 0) {
    require(residuals.rows() >= 2, "estimate_hvar: need at least two residual rows");
    require(floor > 0.0, "estimate_hvar: floor must be positive");
    const double T = static_cast<double>(residuals.rows());
    const RowVector mean = residuals.colwise().mean();
    const Vector var =
        ((residuals.rowwise() - mean).array().square().colwise().sum() / (T - 1.0)).transpose();
    return {CovarianceKind::hvar, var.cwiseMax(floor), batch_index};
}

inline CovarianceEstimate estimate_covariance(CovarianceKind kind, const Matrix& residuals,
                                              const Vector& kappa, double floor = kVarianceFloor,
                                              int batch_index = 0) {
    switch (kind) {
        case CovarianceKind::identity: return CovarianceEstimate::identity(residuals.cols(), batch_index);
        case CovarianceKind::structural: return CovarianceEstimate::structural(kappa, batch_index);
        case CovarianceKind::hvar: return estimate_hvar(residuals, floor, batch_index);
    }
    throw ValidationError("estimate_covariance: unknown kind");
}

/// Batch 0 uses the identity; batch i+1 uses the hvar estimate of batch i's
/// test residuals.
inline std::vector<CovarianceEstimate> adaptive_covariance_schedule(
    const std::vector<Matrix>& batch_residuals, double floor = kVarianceFloor) {
    require(!batch_residuals.empty(), "adaptive_covariance_schedule: no batches");
    std::vector<CovarianceEstimate> out;
    out.push_back(CovarianceEstimate::identity(batch_residuals.front().cols(), 0));
    for (std::size_t i = 0; i + 1 < batch_residuals.size(); ++i)
        out.push_back(estimate_hvar(batch_residuals[i], floor, static_cast<int>(i + 1)));
    return out;
}

inline nlohmann::json covariance_to_json(const CovarianceEstimate& c) {
    return {{"kind", to_string(c.kind)},
            {"diag", std::vector<double>(c.diag.data(), c.diag.data() + c.diag.size())},
            {"batch_index", c.batch_index}};
}

inline CovarianceEstimate covariance_from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("kind") && j.contains("diag"),
            "covariance JSON: expected {kind, diag, batch_index}");
    CovarianceEstimate c;
    c.kind = covariance_kind_from_string(j.at("kind").get<std::string>());
    const auto d = j.at("diag").get<std::vector<double>>();
    c.diag = Eigen::Map<const Vector>(d.data(), static_cast<Index>(d.size()));
    c.batch_index = j.value("batch_index", 0);
    require((c.diag.array() > 0.0).all(), "covariance JSON: diagonal must be positive");
    return c;
}

}  // namespace shl
