// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/methods.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ckptmerge/error.hpp"
#include "ckptmerge/rng.hpp"

namespace ckptmerge {

namespace {

void require_same_shape(const Shape& a, const Shape& b, std::string_view what) {
    if (a != b) {
        throw ShapeMismatch(fmt::format("{}: shapes {} and {} differ", what, shape_to_string(a), shape_to_string(b)));
    }
}

void require_count(std::size_t got, std::size_t want, std::string_view what) {
    if (got != want) {
        throw Error(ErrorKind::Internal, fmt::format("{}: expected {} per-model values, got {}", what, want, got));
    }
}

// |x| with NaN sorted above everything else so the ordering stays total.
double magnitude_key(double x) {
    return std::isnan(x) ? std::numeric_limits<double>::infinity() : std::fabs(x);
}

// Indices ordered by descending magnitude, lower index first on ties.
struct MagnitudeOrder {
    const std::vector<double>* values;
    bool operator()(std::size_t a, std::size_t b) const {
        const double ka = magnitude_key((*values)[a]);
        const double kb = magnitude_key((*values)[b]);
        return ka != kb ? ka > kb : a < b;
    }
};

// Element counts from fractions, tolerant of products like 0.1 * 30 landing a
// hair above an integer.
std::size_t ceil_count(double fraction, std::size_t n) {
    const double x = fraction * static_cast<double>(n);
    const double c = std::ceil(x - 1e-9 * std::max(1.0, x));
    return std::min(n, static_cast<std::size_t>(std::max(0.0, c)));
}

std::size_t floor_count(double fraction, std::size_t n) {
    const double x = fraction * static_cast<double>(n);
    const double f = std::floor(x + 1e-9 * std::max(1.0, x));
    return std::min(n, static_cast<std::size_t>(std::max(0.0, f)));
}

Tensor from_doubles(const Shape& shape, const std::vector<double>& values) {
    std::vector<float> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i]);
    return Tensor(shape, std::move(out));
}

void check_deltas(std::span<const Delta> taus, std::size_t weights, std::string_view what) {
    if (taus.empty()) throw Error(ErrorKind::Internal, fmt::format("{}: no task vectors", what));
    require_count(weights, taus.size(), what);
    for (const auto& tau : taus) require_same_shape(tau.shape, taus[0].shape, what);
}

} // namespace

Tensor linear(TensorRefs tensors, std::span<const double> weights, bool normalize) {
    if (tensors.empty()) throw Error(ErrorKind::Internal, "linear: no tensors");
    require_count(weights.size(), tensors.size(), "linear");
    for (const auto* t : tensors) require_same_shape(t->shape(), tensors[0]->shape(), "linear");

    double total = 0.0;
    for (double w : weights) total += w;
    if (normalize && total == 0.0) throw DegenerateWeights("linear: weights sum to zero with normalize enabled");

    const std::size_t n = tensors[0]->size();
    std::vector<double> acc(n, 0.0);
    for (std::size_t m = 0; m < tensors.size(); ++m) {
        const auto values = tensors[m]->values();
        const double w = weights[m];
        for (std::size_t i = 0; i < n; ++i) acc[i] += w * values[i];
    }
    if (normalize) {
        for (auto& v : acc) v /= total;
    }
    return from_doubles(tensors[0]->shape(), acc);
}

Tensor slerp(double t, const Tensor& p0, const Tensor& p1, double eps) {
    require_same_shape(p0.shape(), p1.shape(), "slerp");
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(fmt::format("slerp: t = {} outside [0, 1]", t));
    if (t == 0.0) return p0;
    if (t == 1.0) return p1;

    const auto a = p0.values();
    const auto b = p1.values();
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
        ab += static_cast<double>(a[i]) * b[i];
    }

    double c0 = 1.0 - t;
    double c1 = t;
    if (aa == 0.0 || bb == 0.0) {
        spdlog::debug("slerp: zero-norm input, using linear interpolation");
    } else {
        const double dot = std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
        if (std::fabs(dot) <= 1.0 - eps) {
            const double omega = std::acos(dot);
            const double s = std::sin(omega);
            c0 = std::sin((1.0 - t) * omega) / s;
            c1 = std::sin(t * omega) / s;
        }
    }

    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = static_cast<float>(c0 * a[i] + c1 * b[i]);
    }
    return Tensor(p0.shape(), std::move(out));
}

Delta task_vector(const Tensor& model, const Tensor& base) {
    require_same_shape(model.shape(), base.shape(), "task_vector");
    Delta d{model.shape(), std::vector<double>(model.size())};
    const auto m = model.values();
    const auto b = base.values();
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] = static_cast<double>(m[i]) - static_cast<double>(b[i]);
    return d;
}

Tensor task_arithmetic(const Tensor& base, std::span<const Delta> task_vectors, std::span<const double> lambdas) {
    require_count(lambdas.size(), task_vectors.size(), "task_arithmetic");
    std::vector<double> acc(base.size(), 0.0);
    for (std::size_t m = 0; m < task_vectors.size(); ++m) {
        require_same_shape(task_vectors[m].shape, base.shape(), "task_arithmetic");
        const double l = lambdas[m];
        const auto& v = task_vectors[m].values;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += l * v[i];
    }
    const auto b = base.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
    return from_doubles(base.shape(), acc);
}

Delta trim_by_magnitude(const Delta& tau, double density) {
    if (!(density > 0.0 && density <= 1.0)) {
        throw ConfigError(fmt::format("trim: density {} outside (0, 1]", density));
    }
    const std::size_t n = tau.size();
    const std::size_t keep = ceil_count(density, n);
    if (keep >= n) return tau;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                     MagnitudeOrder{&tau.values});

    Delta out{tau.shape, std::vector<double>(n, 0.0)};
    for (std::size_t r = 0; r < keep; ++r) out.values[order[r]] = tau.values[order[r]];
    return out;
}

Delta breadcrumbs_mask(const Delta& tau, double beta, double gamma) {
    if (!(beta >= 0.0 && gamma >= 0.0 && beta + gamma < 1.0)) {
        throw ConfigError(fmt::format("breadcrumbs: need beta, gamma >= 0 and beta + gamma < 1 (got {}, {})", beta, gamma));
    }
    const std::size_t n = tau.size();
    const std::size_t top = floor_count(beta, n);
    const std::size_t bottom = std::min(floor_count(gamma, n), n - top);
    if (top == 0 && bottom == 0) return tau;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const MagnitudeOrder cmp{&tau.values};
    const auto first = order.begin();
    const auto band_end = order.begin() + static_cast<std::ptrdiff_t>(n - bottom);
    // ranks [0, top) are the outliers, [n - bottom, n) the noise floor
    if (bottom > 0) std::nth_element(first, band_end, order.end(), cmp);
    if (top > 0) std::nth_element(first, first + static_cast<std::ptrdiff_t>(top), band_end, cmp);

    Delta out{tau.shape, std::vector<double>(n, 0.0)};
    for (std::size_t r = top; r < n - bottom; ++r) out.values[order[r]] = tau.values[order[r]];
    return out;
}

Delta dare_drop(const Delta& tau, double p, bool rescale, std::uint64_t stream_key) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError(fmt::format("dare: drop probability {} outside [0, 1)", p));
    if (p == 0.0) return tau;
    const double scale = rescale ? 1.0 / (1.0 - p) : 1.0;
    Delta out{tau.shape, std::vector<double>(tau.size(), 0.0)};
    for (std::size_t i = 0; i < tau.size(); ++i) {
        if (stream_uniform(stream_key, i) >= p) out.values[i] = tau.values[i] * scale;
    }
    return out;
}

std::vector<std::int8_t> elect_sign(std::span<const Delta> taus, std::span<const double> weights) {
    check_deltas(taus, weights.size(), "elect_sign");
    const std::size_t n = taus[0].size();
    std::vector<std::int8_t> signs(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mass = 0.0;
        for (std::size_t m = 0; m < taus.size(); ++m) mass += weights[m] * taus[m].values[i];
        signs[i] = mass < 0.0 ? std::int8_t{-1} : std::int8_t{1};
    }
    return signs;
}

Delta disjoint_merge(std::span<const Delta> taus, std::span<const double> weights, std::span<const std::int8_t> signs) {
    check_deltas(taus, weights.size(), "disjoint_merge");
    const std::size_t n = taus[0].size();
    require_count(signs.size(), n, "disjoint_merge signs");
    Delta out{taus[0].shape, std::vector<double>(n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) {
        double num = 0.0;
        double den = 0.0;
        for (std::size_t m = 0; m < taus.size(); ++m) {
            const double v = taus[m].values[i];
            if (v == 0.0 || (v > 0.0) != (signs[i] > 0)) continue;
            num += weights[m] * v;
            den += weights[m];
        }
        out.values[i] = den != 0.0 ? num / den : 0.0;
    }
    return out;
}

Tensor apply_delta(const Tensor& base, const Delta& delta, double scale) {
    require_same_shape(base.shape(), delta.shape, "apply_delta");
    const auto b = base.values();
    std::vector<float> out(b.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(b[i] + scale * delta.values[i]);
    return Tensor(base.shape(), std::move(out));
}

Tensor sign_consensus_merge(const Tensor& base, std::span<const Delta> taus, std::span<const double> weights,
                            double lambda) {
    if (taus.empty()) return base;
    const auto signs = elect_sign(taus, weights);
    return apply_delta(base, disjoint_merge(taus, weights, signs), lambda);
}

Tensor ties_merge(const Tensor& base, std::span<const Delta> taus, std::span<const double> weights, double density,
                  double lambda) {
    std::vector<Delta> trimmed;
    trimmed.reserve(taus.size());
    for (const auto& tau : taus) trimmed.push_back(trim_by_magnitude(tau, density));
    return sign_consensus_merge(base, trimmed, weights, lambda);
}

namespace {

std::vector<Delta> task_vectors(const MethodContext& ctx) {
    std::vector<Delta> taus;
    taus.reserve(ctx.inputs.size());
    for (const auto* t : ctx.inputs) taus.push_back(task_vector(*t, *ctx.base));
    return taus;
}

Tensor weighted_delta_sum(const MethodContext& ctx, const std::vector<Delta>& taus) {
    std::vector<double> lambdas(ctx.weights);
    for (auto& l : lambdas) l *= ctx.lambda;
    return task_arithmetic(*ctx.base, taus, lambdas);
}

class LinearMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::Linear; }
    Tensor merge(const MethodContext& ctx) const override { return linear(ctx.inputs, ctx.weights, ctx.normalize); }
};

class SlerpMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::Slerp; }
    Tensor merge(const MethodContext& ctx) const override {
        if (ctx.inputs.size() != 2) throw ConfigError("slerp merges exactly two tensors");
        return slerp(ctx.t, *ctx.inputs[0], *ctx.inputs[1], ctx.slerp_eps);
    }
};

class TaskArithmeticMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::TaskArithmetic; }
    Tensor merge(const MethodContext& ctx) const override { return weighted_delta_sum(ctx, task_vectors(ctx)); }
};

class TiesMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::Ties; }
    Tensor merge(const MethodContext& ctx) const override {
        auto taus = task_vectors(ctx);
        for (std::size_t m = 0; m < taus.size(); ++m) taus[m] = trim_by_magnitude(taus[m], ctx.densities[m]);
        return sign_consensus_merge(*ctx.base, taus, ctx.weights, ctx.lambda);
    }
};

std::vector<Delta> dropped_task_vectors(const MethodContext& ctx) {
    auto taus = task_vectors(ctx);
    for (std::size_t m = 0; m < taus.size(); ++m) {
        taus[m] = dare_drop(taus[m], 1.0 - ctx.densities[m], ctx.rescale, ctx.dare_keys[m]);
    }
    return taus;
}

class DareTiesMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::DareTies; }
    Tensor merge(const MethodContext& ctx) const override {
        return sign_consensus_merge(*ctx.base, dropped_task_vectors(ctx), ctx.weights, ctx.lambda);
    }
};

class DareLinearMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::DareLinear; }
    Tensor merge(const MethodContext& ctx) const override { return weighted_delta_sum(ctx, dropped_task_vectors(ctx)); }
};

class BreadcrumbsMethod final : public MergeMethodImpl {
public:
    MergeMethod method() const override { return MergeMethod::Breadcrumbs; }
    Tensor merge(const MethodContext& ctx) const override {
        auto taus = task_vectors(ctx);
        for (std::size_t m = 0; m < taus.size(); ++m) taus[m] = breadcrumbs_mask(taus[m], ctx.betas[m], ctx.gammas[m]);
        return weighted_delta_sum(ctx, taus);
    }
};

} // namespace

const MergeMethodImpl& method_impl(MergeMethod method) {
    static const LinearMethod linear_impl;
    static const SlerpMethod slerp_impl;
    static const TaskArithmeticMethod task_arithmetic_impl;
    static const TiesMethod ties_impl;
    static const DareTiesMethod dare_ties_impl;
    static const DareLinearMethod dare_linear_impl;
    static const BreadcrumbsMethod breadcrumbs_impl;
    switch (method) {
    case MergeMethod::Linear: return linear_impl;
    case MergeMethod::Slerp: return slerp_impl;
    case MergeMethod::TaskArithmetic: return task_arithmetic_impl;
    case MergeMethod::Ties: return ties_impl;
    case MergeMethod::DareTies: return dare_ties_impl;
    case MergeMethod::DareLinear: return dare_linear_impl;
    case MergeMethod::Breadcrumbs: return breadcrumbs_impl;
    case MergeMethod::Passthrough: break;
    }
    throw ConfigError(fmt::format("merge method '{}' has no tensor arithmetic", method_name(method)));
}

Tensor apply_method(const MethodContext& ctx) {
    const auto& impl = method_impl(ctx.method);
    if (ctx.inputs.empty()) throw Error(ErrorKind::Internal, fmt::format("{}: no input tensors", ctx.tensor_name));
    const std::size_t n = ctx.inputs.size();
    if (impl.needs_base() && !ctx.base) {
        throw Error(ErrorKind::Internal, fmt::format("{}: method needs a base tensor", ctx.tensor_name));
    }
    const Shape& shape = ctx.base ? ctx.base->shape() : ctx.inputs[0]->shape();
    for (const auto* t : ctx.inputs) {
        if (t->shape() != shape) {
            throw ShapeMismatch(fmt::format("'{}': input shapes {} and {} differ", ctx.tensor_name,
                                            shape_to_string(t->shape()), shape_to_string(shape)));
        }
    }
    if (ctx.method != MergeMethod::Slerp) require_count(ctx.weights.size(), n, "weights");
    switch (ctx.method) {
    case MergeMethod::Ties: require_count(ctx.densities.size(), n, "densities"); break;
    case MergeMethod::DareTies:
    case MergeMethod::DareLinear:
        require_count(ctx.densities.size(), n, "densities");
        require_count(ctx.dare_keys.size(), n, "dare keys");
        break;
    case MergeMethod::Breadcrumbs:
        require_count(ctx.betas.size(), n, "betas");
        require_count(ctx.gammas.size(), n, "gammas");
        break;
    default: break;
    }
    return impl.merge(ctx);
}

} // namespace ckptmerge
