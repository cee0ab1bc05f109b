#include "metaif/problem.hpp"

#include <algorithm>

#include "metaif/error.hpp"

namespace metaif {

Vector DatasetLoss::grad(std::span<const double> theta, Batch data) const {
    Vector g(dim());
    value_grad(theta, data, g);
    return g;
}

DenseMatrix DatasetLoss::hessian(std::span<const double> theta, Batch data) const {
    const std::size_t P = dim();
    DenseMatrix H(P, P);
    Vector e(P, 0.0);
    for (std::size_t j = 0; j < P; ++j) {
        e[j] = 1.0;
        const Vector col = hvp(theta, data, e);
        for (std::size_t i = 0; i < P; ++i) H(i, j) = col[i];
        e[j] = 0.0;
    }
    return H;
}

double MlpLoss::value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const {
    if (data.empty()) {
        std::fill(grad.begin(), grad.end(), 0.0);
        return 0.0;
    }
    if (grad.empty()) return loss_value(arch_, theta, data, loss_);
    LossGrad lg = loss_and_grad(arch_, theta, data, loss_);
    require_dims(grad.size() == lg.grad.size(), "MlpLoss: gradient buffer length mismatch");
    std::copy(lg.grad.begin(), lg.grad.end(), grad.begin());
    return lg.loss;
}

Vector MlpLoss::hvp(std::span<const double> theta, Batch data, std::span<const double> v) const {
    if (data.empty()) return Vector(dim(), 0.0);
    return metaif::hvp(arch_, theta, data, loss_, v);
}

DenseMatrix MlpLoss::hessian(std::span<const double> theta, Batch data) const {
    if (data.empty()) return DenseMatrix(dim(), dim());
    return dense_hessian(arch_, theta, data, loss_);
}

double LinearDataLoss::value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const {
    require_dims(theta.size() == dim_, "LinearDataLoss: parameter length mismatch");
    std::fill(grad.begin(), grad.end(), 0.0);
    double v = 0.0;
    for (const Example& ex : data) {
        require_dims(ex.x.size() == dim_, "LinearDataLoss: example length mismatch");
        v -= dot(ex.x, theta);
        if (!grad.empty()) axpy(-1.0, ex.x, grad);
    }
    return v;
}

Vector LinearDataLoss::hvp(std::span<const double>, Batch, std::span<const double> v) const {
    require_dims(v.size() == dim_, "LinearDataLoss: direction length mismatch");
    return Vector(dim_, 0.0);
}

DenseMatrix LinearDataLoss::hessian(std::span<const double>, Batch) const { return DenseMatrix(dim_, dim_); }

Problem Problem::mlp(const Architecture& arch, LossKind loss) {
    return Problem{std::make_shared<MlpLoss>(arch, loss), {}, {}};
}

Problem Problem::quadratic(DenseMatrix inner, DenseMatrix outer) {
    require_dims(inner.square() && outer.square() && inner.rows() == outer.rows(),
                 "quadratic problem: curvature matrices must be square and equal-sized");
    const std::size_t P = inner.rows();
    return Problem{std::make_shared<LinearDataLoss>(P), std::move(inner), std::move(outer)};
}

namespace {

double add_quadratic(const DenseMatrix& q, std::span<const double> theta, std::span<double> grad) {
    if (q.rows() == 0) return 0.0;
    const Vector qt = matvec(q, theta);
    if (!grad.empty()) axpy(1.0, qt, grad);
    return 0.5 * dot(qt, theta);
}

void add_quadratic_hvp(const DenseMatrix& q, std::span<const double> v, Vector& out) {
    if (q.rows() == 0) return;
    axpy(1.0, matvec(q, v), out);
}

void add_quadratic_matrix(const DenseMatrix& q, DenseMatrix& h) {
    if (q.rows() == 0) return;
    for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t j = 0; j < q.cols(); ++j) h(i, j) += q(i, j);
}

}  // namespace

double Problem::train_value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const {
    double v = loss->value_grad(theta, data, grad);
    return v + add_quadratic(inner_quadratic, theta, grad);
}

double Problem::val_value_grad(std::span<const double> theta, Batch data, std::span<double> grad) const {
    double v = loss->value_grad(theta, data, grad);
    return v + add_quadratic(outer_quadratic, theta, grad);
}

Vector Problem::train_hvp(std::span<const double> theta, Batch data, std::span<const double> v) const {
    Vector out = loss->hvp(theta, data, v);
    add_quadratic_hvp(inner_quadratic, v, out);
    return out;
}

Vector Problem::val_hvp(std::span<const double> theta, Batch data, std::span<const double> v) const {
    Vector out = loss->hvp(theta, data, v);
    add_quadratic_hvp(outer_quadratic, v, out);
    return out;
}

DenseMatrix Problem::train_hessian(std::span<const double> theta, Batch data) const {
    DenseMatrix h = loss->hessian(theta, data);
    add_quadratic_matrix(inner_quadratic, h);
    return h;
}

DenseMatrix Problem::val_hessian(std::span<const double> theta, Batch data) const {
    DenseMatrix h = loss->hessian(theta, data);
    add_quadratic_matrix(outer_quadratic, h);
    return h;
}

}  // namespace metaif
