#include "metaif/model.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "metaif/error.hpp"
#include "metaif/random.hpp"

namespace metaif {

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}

Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    fail(ErrorCode::config, "unknown activation '" + s + "'");
}

const char* loss_name(LossKind k) { return k == LossKind::cross_entropy ? "cross_entropy" : "mse"; }

LossKind parse_loss(const std::string& s) {
    if (s == "cross_entropy") return LossKind::cross_entropy;
    if (s == "mse") return LossKind::mse;
    fail(ErrorCode::config, "unknown loss '" + s + "'");
}

Architecture::Architecture(std::vector<std::size_t> layer_sizes, std::vector<Activation> activations)
    : sizes_(std::move(layer_sizes)), acts_(std::move(activations)) {
    if (sizes_.size() < 2) fail(ErrorCode::config, "architecture needs at least one layer");
    if (acts_.size() != sizes_.size() - 2)
        fail(ErrorCode::config, "architecture needs one activation per hidden layer");
    for (std::size_t s : sizes_)
        if (s == 0) fail(ErrorCode::config, "architecture layer sizes must be >= 1");
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
        LayerShape shape{sizes_[l], sizes_[l + 1], offset};
        offset += shape.size();
        layers_.push_back(shape);
    }
    param_count_ = offset;
}

ParamVector::ParamVector(Architecture a, Vector v) : arch(std::move(a)), values(std::move(v)) {
    require_dims(values.size() == arch.param_count(), "ParamVector: length does not match architecture");
    if (!all_finite(values)) fail(ErrorCode::numerical, "ParamVector: non-finite value");
}

std::span<const double> ParamVector::layer(std::size_t l) const {
    const auto& s = arch.layers().at(l);
    return std::span<const double>(values).subspan(s.offset, s.size());
}

ParamVector init_params(const Architecture& arch, std::uint64_t seed) {
    Vector values(arch.param_count(), 0.0);
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const auto& s = arch.layers()[l];
        Rng rng = Rng::stream(seed, l);
        const double bound = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
        for (std::size_t o = 0; o < s.out; ++o)
            for (std::size_t i = 0; i < s.in; ++i)
                values[s.offset + o * s.cols() + i] = rng.uniform(-bound, bound);
    }
    return ParamVector(arch, std::move(values));
}

namespace {

struct ActDerivs {
    double d1;
    double d2;
};

inline double activate(Activation a, double o) {
    switch (a) {
        case Activation::relu: return o > 0.0 ? o : 0.0;
        case Activation::tanh: return std::tanh(o);
        case Activation::identity: return o;
    }
    return o;
}

// ReLU's second derivative is taken as 0 everywhere (a.e. derivative).
inline ActDerivs derivs(Activation a, double o) {
    switch (a) {
        case Activation::relu: return {o > 0.0 ? 1.0 : 0.0, 0.0};
        case Activation::tanh: {
            const double t = std::tanh(o);
            const double s = 1.0 - t * t;
            return {s, -2.0 * t * s};
        }
        case Activation::identity: return {1.0, 0.0};
    }
    return {1.0, 0.0};
}

// Per-example cache of a forward + backward pass.
struct Pass {
    std::vector<Vector> h;  // h[0] = x, h[l+1] = activation of layer l
    std::vector<Vector> o;  // pre-activations
    std::vector<Vector> d;  // dℓ/do_l
    Vector prob;            // softmax (cross entropy only)
    double loss = 0.0;
};

void forward_pass(const Architecture& arch, std::span<const double> params, std::span<const double> x,
                  Pass& p) {
    require_dims(x.size() == arch.input_size(),
                 "forward: input length " + std::to_string(x.size()) + " != " +
                     std::to_string(arch.input_size()));
    const std::size_t L = arch.num_layers();
    p.h.resize(L + 1);
    p.o.resize(L);
    p.h[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < L; ++l) {
        const auto& s = arch.layers()[l];
        const double* w = params.data() + s.offset;
        const Vector& in = p.h[l];
        Vector& o = p.o[l];
        o.assign(s.out, 0.0);
        for (std::size_t r = 0; r < s.out; ++r) {
            const double* wr = w + r * s.cols();
            double acc = wr[s.in];
            for (std::size_t i = 0; i < s.in; ++i) acc += wr[i] * in[i];
            o[r] = acc;
        }
        const Activation act = arch.activation_of(l);
        Vector& out = p.h[l + 1];
        out.resize(s.out);
        for (std::size_t r = 0; r < s.out; ++r) out[r] = activate(act, o[r]);
        if (!all_finite(out)) fail(ErrorCode::numerical, "forward: non-finite activation in layer " + std::to_string(l));
    }
}

// Loss and dℓ/do_L for the output layer.
void output_grad(const Architecture& arch, const Example& ex, LossKind loss, Pass& p) {
    const Vector& z = p.o.back();
    const std::size_t C = z.size();
    p.d.resize(arch.num_layers());
    Vector& g = p.d.back();
    g.assign(C, 0.0);
    if (loss == LossKind::cross_entropy) {
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= C)
            fail(ErrorCode::invalid_argument, "label " + std::to_string(ex.label) + " out of range");
        const double zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        p.prob.resize(C);
        for (std::size_t c = 0; c < C; ++c) {
            p.prob[c] = std::exp(z[c] - zmax);
            sum += p.prob[c];
        }
        for (std::size_t c = 0; c < C; ++c) {
            p.prob[c] /= sum;
            g[c] = p.prob[c];
        }
        g[ex.label] -= 1.0;
        p.loss = zmax + std::log(sum) - z[ex.label];
    } else {
        double l = 0.0;
        if (!ex.target.empty()) {
            require_dims(ex.target.size() == C, "mse: target length mismatch");
            for (std::size_t c = 0; c < C; ++c) g[c] = z[c] - ex.target[c];
        } else {
            if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= C)
                fail(ErrorCode::invalid_argument, "label " + std::to_string(ex.label) + " out of range");
            for (std::size_t c = 0; c < C; ++c) g[c] = z[c] - (static_cast<int>(c) == ex.label ? 1.0 : 0.0);
        }
        for (double v : g) l += v * v;
        p.loss = 0.5 * l;
    }
}

// Fills p.d for all layers and accumulates the parameter gradient.
void backward_pass(const Architecture& arch, std::span<const double> params, Pass& p,
                   std::span<double> grad) {
    const std::size_t L = arch.num_layers();
    for (std::size_t l = L; l-- > 0;) {
        const auto& s = arch.layers()[l];
        const Vector& d = p.d[l];
        const Vector& in = p.h[l];
        if (!grad.empty()) {
            double* g = grad.data() + s.offset;
            for (std::size_t r = 0; r < s.out; ++r) {
                double* gr = g + r * s.cols();
                const double dr = d[r];
                for (std::size_t i = 0; i < s.in; ++i) gr[i] += dr * in[i];
                gr[s.in] += dr;
            }
        }
        if (l == 0) break;
        const double* w = params.data() + s.offset;
        Vector& dprev = p.d[l - 1];
        dprev.assign(s.in, 0.0);
        for (std::size_t r = 0; r < s.out; ++r) {
            const double* wr = w + r * s.cols();
            const double dr = d[r];
            for (std::size_t i = 0; i < s.in; ++i) dprev[i] += wr[i] * dr;
        }
        const Activation act = arch.activation_of(l - 1);
        for (std::size_t i = 0; i < s.in; ++i) dprev[i] *= derivs(act, p.o[l - 1][i]).d1;
    }
}

// Scratch buffers for the R-pass.
struct RScratch {
    std::vector<Vector> rh;
    std::vector<Vector> ro;
    std::vector<Vector> rd;
    Vector e;
    Vector re;
};

// Accumulates (∇²ℓ) v into out for one cached example.
void r_pass(const Architecture& arch, std::span<const double> params, std::span<const double> v,
            LossKind loss, const Pass& p, RScratch& s, std::span<double> out) {
    const std::size_t L = arch.num_layers();
    s.rh.resize(L + 1);
    s.ro.resize(L);
    s.rd.resize(L);
    s.rh[0].assign(arch.input_size(), 0.0);
    for (std::size_t l = 0; l < L; ++l) {
        const auto& sh = arch.layers()[l];
        const double* w = params.data() + sh.offset;
        const double* vw = v.data() + sh.offset;
        const Vector& in = p.h[l];
        const Vector& rin = s.rh[l];
        Vector& ro = s.ro[l];
        ro.assign(sh.out, 0.0);
        for (std::size_t r = 0; r < sh.out; ++r) {
            const double* wr = w + r * sh.cols();
            const double* vr = vw + r * sh.cols();
            double acc = vr[sh.in];
            for (std::size_t i = 0; i < sh.in; ++i) acc += vr[i] * in[i] + wr[i] * rin[i];
            ro[r] = acc;
        }
        const Activation act = arch.activation_of(l);
        Vector& rh = s.rh[l + 1];
        rh.resize(sh.out);
        for (std::size_t r = 0; r < sh.out; ++r) rh[r] = derivs(act, p.o[l][r]).d1 * ro[r];
    }
    // Output curvature.
    {
        const Vector& ro = s.ro[L - 1];
        Vector& rd = s.rd[L - 1];
        rd.resize(ro.size());
        if (loss == LossKind::cross_entropy) {
            double pr = 0.0;
            for (std::size_t c = 0; c < ro.size(); ++c) pr += p.prob[c] * ro[c];
            for (std::size_t c = 0; c < ro.size(); ++c) rd[c] = p.prob[c] * (ro[c] - pr);
        } else {
            rd = ro;
        }
    }
    for (std::size_t l = L; l-- > 0;) {
        const auto& sh = arch.layers()[l];
        const Vector& d = p.d[l];
        const Vector& rd = s.rd[l];
        const Vector& in = p.h[l];
        const Vector& rin = s.rh[l];
        double* g = out.data() + sh.offset;
        for (std::size_t r = 0; r < sh.out; ++r) {
            double* gr = g + r * sh.cols();
            const double rdr = rd[r], dr = d[r];
            for (std::size_t i = 0; i < sh.in; ++i) gr[i] += rdr * in[i] + dr * rin[i];
            gr[sh.in] += rdr;
        }
        if (l == 0) break;
        const double* w = params.data() + sh.offset;
        const double* vw = v.data() + sh.offset;
        s.e.assign(sh.in, 0.0);
        s.re.assign(sh.in, 0.0);
        for (std::size_t r = 0; r < sh.out; ++r) {
            const double* wr = w + r * sh.cols();
            const double* vr = vw + r * sh.cols();
            const double dr = d[r], rdr = rd[r];
            for (std::size_t i = 0; i < sh.in; ++i) {
                s.e[i] += wr[i] * dr;
                s.re[i] += vr[i] * dr + wr[i] * rdr;
            }
        }
        const Activation act = arch.activation_of(l - 1);
        Vector& rdp = s.rd[l - 1];
        rdp.resize(sh.in);
        for (std::size_t i = 0; i < sh.in; ++i) {
            const ActDerivs a = derivs(act, p.o[l - 1][i]);
            rdp[i] = a.d2 * s.ro[l - 1][i] * s.e[i] + a.d1 * s.re[i];
        }
    }
}

void check_batch(const Architecture& arch, std::span<const double> params, Batch batch) {
    if (batch.empty()) fail(ErrorCode::invalid_argument, "empty batch");
    require_dims(params.size() == arch.param_count(), "parameter vector does not match architecture");
}

}  // namespace

ForwardTrace forward(const Architecture& arch, std::span<const double> params, std::span<const double> x) {
    require_dims(params.size() == arch.param_count(), "parameter vector does not match architecture");
    Pass p;
    forward_pass(arch, params, x, p);
    ForwardTrace t;
    t.inputs.assign(p.h.begin(), p.h.end() - 1);
    t.pre = p.o;
    t.logits = p.h.back();
    return t;
}

int predict(const Architecture& arch, std::span<const double> params, std::span<const double> x) {
    Pass p;
    forward_pass(arch, params, x, p);
    const Vector& z = p.h.back();
    return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

LossGrad loss_and_grad(const Architecture& arch, std::span<const double> params, Batch batch, LossKind loss) {
    check_batch(arch, params, batch);
    LossGrad out{0.0, Vector(arch.param_count(), 0.0)};
    Pass p;
    for (const Example& ex : batch) {
        forward_pass(arch, params, ex.x, p);
        output_grad(arch, ex, loss, p);
        backward_pass(arch, params, p, out.grad);
        out.loss += p.loss;
    }
    return out;
}

double loss_value(const Architecture& arch, std::span<const double> params, Batch batch, LossKind loss) {
    check_batch(arch, params, batch);
    double total = 0.0;
    Pass p;
    for (const Example& ex : batch) {
        forward_pass(arch, params, ex.x, p);
        output_grad(arch, ex, loss, p);
        total += p.loss;
    }
    return total;
}

Vector hvp(const Architecture& arch, std::span<const double> params, Batch batch, LossKind loss,
           std::span<const double> v) {
    check_batch(arch, params, batch);
    require_dims(v.size() == arch.param_count(), "hvp: direction length mismatch");
    Vector out(arch.param_count(), 0.0);
    Pass p;
    RScratch s;
    for (const Example& ex : batch) {
        forward_pass(arch, params, ex.x, p);
        output_grad(arch, ex, loss, p);
        backward_pass(arch, params, p, {});
        r_pass(arch, params, v, loss, p, s, out);
    }
    return out;
}

DenseMatrix dense_hessian(const Architecture& arch, std::span<const double> params, Batch batch, LossKind loss) {
    check_batch(arch, params, batch);
    const std::size_t P = arch.param_count();
    if (P > kDenseHessianGuard)
        fail(ErrorCode::invalid_argument,
             "dense_hessian: parameter count " + std::to_string(P) + " exceeds guard");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ConstMap = Eigen::Map<const Mat>;
    const Eigen::Index NP = static_cast<Eigen::Index>(P);
    const std::size_t L = arch.num_layers();

    // The R-pass of r_pass() run for all P unit directions at once: every
    // R-quantity becomes a (width × P) matrix with one column per direction.
    Mat H = Mat::Zero(NP, NP);
    std::vector<Mat> rh(L), ro(L), rd(L);
    Pass p;
    for (const Example& ex : batch) {
        forward_pass(arch, params, ex.x, p);
        output_grad(arch, ex, loss, p);
        backward_pass(arch, params, p, {});
        for (std::size_t l = 0; l < L; ++l) {
            const auto& sh = arch.layers()[l];
            const Eigen::Index out = static_cast<Eigen::Index>(sh.out), in = static_cast<Eigen::Index>(sh.in);
            const ConstMap w(params.data() + sh.offset, out, in + 1);
            Mat& o = ro[l];
            if (l == 0) o = Mat::Zero(out, NP);
            else o.noalias() = w.leftCols(in) * rh[l - 1];
            // Direction e_(r,c) in this layer's block moves o_r by h̃_c.
            const Vector& hin = p.h[l];
            for (std::size_t r = 0; r < sh.out; ++r) {
                double* row = o.data() + r * P + sh.offset + r * sh.cols();
                for (std::size_t c = 0; c < sh.in; ++c) row[c] += hin[c];
                row[sh.in] += 1.0;
            }
            const Activation act = arch.activation_of(l);
            rh[l] = o;
            for (std::size_t r = 0; r < sh.out; ++r) rh[l].row(static_cast<Eigen::Index>(r)) *= derivs(act, p.o[l][r]).d1;
        }
        {
            const Mat& o = ro[L - 1];
            Mat& d = rd[L - 1];
            if (loss == LossKind::cross_entropy) {
                const Eigen::Map<const Eigen::RowVectorXd> prob(p.prob.data(), static_cast<Eigen::Index>(p.prob.size()));
                const Eigen::RowVectorXd pr = prob * o;
                d = o;
                for (Eigen::Index c = 0; c < d.rows(); ++c) d.row(c) = p.prob[c] * (o.row(c) - pr);
            } else {
                d = o;
            }
        }
        for (std::size_t l = L; l-- > 0;) {
            const auto& sh = arch.layers()[l];
            const Eigen::Index out = static_cast<Eigen::Index>(sh.out), in = static_cast<Eigen::Index>(sh.in);
            const Vector& dvec = p.d[l];
            const Vector& hin = p.h[l];
            const Eigen::Index cols = in + 1;
            Eigen::VectorXd ht(cols);
            for (Eigen::Index c = 0; c < in; ++c) ht[c] = hin[c];
            ht[in] = 1.0;
            for (Eigen::Index r = 0; r < out; ++r) {
                auto block = H.middleRows(static_cast<Eigen::Index>(sh.offset) + r * cols, cols);
                block.noalias() += ht * rd[l].row(r);
                if (l > 0) block.topRows(in) += dvec[r] * rh[l - 1];
            }
            if (l == 0) break;
            const ConstMap w(params.data() + sh.offset, out, in + 1);
            Mat re = w.leftCols(in).transpose() * rd[l];
            // Direction e_(r,i) adds d_r to re_i.
            for (std::size_t r = 0; r < sh.out; ++r)
                for (std::size_t i = 0; i < sh.in; ++i) re(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(sh.offset + r * sh.cols() + i)) += dvec[r];
            const Activation act = arch.activation_of(l - 1);
            Mat& dprev = rd[l - 1];
            dprev.resize(in, NP);
            for (Eigen::Index i = 0; i < in; ++i) {
                double e = 0.0;
                for (Eigen::Index r = 0; r < out; ++r) e += w(r, i) * dvec[r];
                const ActDerivs a = derivs(act, p.o[l - 1][i]);
                dprev.row(i) = a.d2 * e * ro[l - 1].row(i) + a.d1 * re.row(i);
            }
        }
    }
    DenseMatrix out(P, P);
    for (Eigen::Index i = 0; i < NP; ++i)
        for (Eigen::Index j = 0; j < NP; ++j) out(i, j) = 0.5 * (H(i, j) + H(j, i));
    return out;
}

ExampleBackprop backprop_example(const Architecture& arch, std::span<const double> params, const Example& ex,
                                 LossKind loss) {
    require_dims(params.size() == arch.param_count(), "parameter vector does not match architecture");
    Pass p;
    forward_pass(arch, params, ex.x, p);
    output_grad(arch, ex, loss, p);
    ExampleBackprop out;
    out.grad.assign(arch.param_count(), 0.0);
    backward_pass(arch, params, p, out.grad);
    out.inputs.assign(p.h.begin(), p.h.end() - 1);
    out.pre_grads = p.d;
    out.loss = p.loss;
    return out;
}

}  // namespace metaif
