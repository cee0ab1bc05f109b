#pragma once

// Multilayer perceptron with hand-written reverse mode and R-operator
// (forward-over-reverse) Hessian-vector products.
//
// Parameter layout: layer l owns a row-major (d_out × (d_in + 1)) block, the
// last column being the bias (bias folded into the weights, i.e. each layer
// sees its input extended by a constant 1). Blocks are stored back to back in
// layer order.
//
// Losses are SUMS over the examples of a batch, never means. Every influence
// magnitude downstream scales with this convention.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metaif/linalg.hpp"

namespace metaif {

enum class Activation : std::uint8_t { relu = 0, tanh = 1, identity = 2 };
enum class LossKind { cross_entropy, mse };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& s);
const char* loss_name(LossKind k);
LossKind parse_loss(const std::string& s);

struct Example {
    Vector x;
    int label = 0;
    // Regression target for mse; when empty the one-hot encoding of `label`
    // is used.
    Vector target;
};

using Batch = std::span<const Example>;

struct LayerShape {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t offset = 0;  // into the flat parameter vector

    std::size_t cols() const { return in + 1; }
    std::size_t size() const { return out * (in + 1); }
};

class Architecture {
public:
    Architecture() = default;
    // activations.size() must be layer_sizes.size() - 2 (one per hidden layer);
    // the output layer is always linear (logits).
    Architecture(std::vector<std::size_t> layer_sizes, std::vector<Activation> activations);

    const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
    const std::vector<Activation>& activations() const { return acts_; }
    const std::vector<LayerShape>& layers() const { return layers_; }
    std::size_t num_layers() const { return layers_.size(); }
    std::size_t param_count() const { return param_count_; }
    std::size_t input_size() const { return sizes_.front(); }
    std::size_t output_size() const { return sizes_.back(); }
    Activation activation_of(std::size_t layer) const {
        return layer + 1 < layers_.size() ? acts_[layer] : Activation::identity;
    }

    bool operator==(const Architecture& o) const { return sizes_ == o.sizes_ && acts_ == o.acts_; }

private:
    std::vector<std::size_t> sizes_;
    std::vector<Activation> acts_;
    std::vector<LayerShape> layers_;
    std::size_t param_count_ = 0;
};

struct ParamVector {
    Architecture arch;
    Vector values;

    ParamVector() = default;
    ParamVector(Architecture a, Vector v);

    std::span<const double> layer(std::size_t l) const;
};

// uniform(-s, s), s = sqrt(6 / (d_in + d_out)) for weights, zero biases.
// One RNG stream per layer.
ParamVector init_params(const Architecture& arch, std::uint64_t seed);

struct ForwardTrace {
    std::vector<Vector> inputs;  // h_{l-1} per layer, without the folded 1
    std::vector<Vector> pre;     // o_l per layer
    Vector logits;
};

ForwardTrace forward(const Architecture& arch, std::span<const double> params,
                     std::span<const double> x);
inline ForwardTrace forward(const ParamVector& p, std::span<const double> x) {
    return forward(p.arch, p.values, x);
}

int predict(const Architecture& arch, std::span<const double> params, std::span<const double> x);

struct LossGrad {
    double loss = 0.0;
    Vector grad;
};

// Summed loss over the batch and its gradient.
LossGrad loss_and_grad(const Architecture& arch, std::span<const double> params, Batch batch,
                       LossKind loss);
double loss_value(const Architecture& arch, std::span<const double> params, Batch batch,
                  LossKind loss);
// H v with H the Hessian of the summed batch loss (R-operator, exact).
Vector hvp(const Architecture& arch, std::span<const double> params, Batch batch, LossKind loss,
           std::span<const double> v);

inline constexpr std::size_t kDenseHessianGuard = 4000;

DenseMatrix dense_hessian(const Architecture& arch, std::span<const double> params, Batch batch,
                          LossKind loss);

// Per-example quantities consumed by curvature estimators: layer inputs
// h_{l-1}, gradients of the loss w.r.t. pre-activations o_l, and the full
// parameter gradient of this example's loss.
struct ExampleBackprop {
    std::vector<Vector> inputs;
    std::vector<Vector> pre_grads;
    Vector grad;
    double loss = 0.0;
};

ExampleBackprop backprop_example(const Architecture& arch, std::span<const double> params,
                                 const Example& ex, LossKind loss);

}  // namespace metaif
