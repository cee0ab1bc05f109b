#pragma once

// The per-datum loss ℓ(z; θ) seen by the bilevel machinery, plus optional
// data-independent quadratic terms. Two families are provided:
//
//   * MlpLoss: ℓ is the MLP's cross-entropy / mse loss.
//   * LinearDataLoss: ℓ(z; θ) = -xᵀθ, i.e. each datum contributes a linear
//     term. Combined with the quadratic terms this gives the fully quadratic
//     bilevel surrogate used as an analytic oracle.

#include <memory>
#include <span>

#include "metaif/linalg.hpp"
#include "metaif/model.hpp"

namespace metaif {

class DatasetLoss {
public:
    virtual ~DatasetLoss() = default;

    virtual std::size_t dim() const = 0;
    // Summed loss over `data` (0 for an empty batch). When `grad` is
    // non-empty it is overwritten with the gradient.
    virtual double value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const = 0;
    virtual Vector hvp(std::span<const double> theta, Batch data, std::span<const double> v) const = 0;
    virtual DenseMatrix hessian(std::span<const double> theta, Batch data) const;
    // Non-null for MLP-backed losses.
    virtual const Architecture* architecture() const { return nullptr; }
    virtual LossKind loss_kind() const { return LossKind::mse; }

    double value(std::span<const double> theta, Batch data) const { return value_grad(theta, data, {}); }
    Vector grad(std::span<const double> theta, Batch data) const;
};

class MlpLoss final : public DatasetLoss {
public:
    MlpLoss(Architecture arch, LossKind loss) : arch_(std::move(arch)), loss_(loss) {}

    std::size_t dim() const override { return arch_.param_count(); }
    double value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const override;
    Vector hvp(std::span<const double> theta, Batch data, std::span<const double> v) const override;
    DenseMatrix hessian(std::span<const double> theta, Batch data) const override;
    const Architecture* architecture() const override { return &arch_; }
    LossKind loss_kind() const override { return loss_; }

private:
    Architecture arch_;
    LossKind loss_;
};

class LinearDataLoss final : public DatasetLoss {
public:
    explicit LinearDataLoss(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const override { return dim_; }
    double value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const override;
    Vector hvp(std::span<const double> theta, Batch data, std::span<const double> v) const override;
    DenseMatrix hessian(std::span<const double> theta, Batch data) const override;

private:
    std::size_t dim_;
};

struct Problem {
    std::shared_ptr<const DatasetLoss> loss;
    // ½θᵀAθ added to every inner objective / ½θᵀCθ to every outer objective.
    // A 0×0 matrix means "absent".
    DenseMatrix inner_quadratic;
    DenseMatrix outer_quadratic;

    static Problem mlp(const Architecture& arch, LossKind loss = LossKind::cross_entropy);
    static Problem quadratic(DenseMatrix inner, DenseMatrix outer);

    std::size_t dim() const { return loss->dim(); }
    const Architecture* architecture() const { return loss->architecture(); }

    // Σ_data ℓ + ½θᵀAθ (train side) and Σ_data ℓ + ½θᵀCθ (validation side).
    double train_value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const;
    double val_value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const;
    Vector train_hvp(std::span<const double> theta, Batch data, std::span<const double> v) const;
    Vector val_hvp(std::span<const double> theta, Batch data, std::span<const double> v) const;
    DenseMatrix train_hessian(std::span<const double> theta, Batch data) const;
    DenseMatrix val_hessian(std::span<const double> theta, Batch data) const;
};

}  // namespace metaif
