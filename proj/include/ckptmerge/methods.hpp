// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ckptmerge/config.hpp"
#include "ckptmerge/tensor.hpp"

namespace ckptmerge {

/// Difference between a fine-tuned tensor and its base. Held in double: the
/// difference of two floats is exact there, so base + delta gives back the
/// fine-tuned values bit for bit after narrowing.
struct Delta {
    Shape shape;
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }
};

using TensorRefs = std::span<const Tensor* const>;

// ---- elementwise building blocks -------------------------------------------

/// Σ wᵢ·θᵢ, divided by Σ wᵢ when `normalize`.
Tensor linear(TensorRefs tensors, std::span<const double> weights, bool normalize);

/// Spherical interpolation of the flattened tensors. The angle comes from
/// normalized copies; the blend is applied to the raw tensors. Nearly
/// colinear or zero-norm inputs fall back to linear interpolation.
Tensor slerp(double t, const Tensor& p0, const Tensor& p1, double eps = 1e-8);

Delta task_vector(const Tensor& model, const Tensor& base);

/// base + Σ λᵢ·τᵢ
Tensor task_arithmetic(const Tensor& base, std::span<const Delta> task_vectors, std::span<const double> lambdas);

/// Keeps the ⌈density·n⌉ largest magnitudes; ties go to the lower flat index.
Delta trim_by_magnitude(const Delta& tau, double density);

/// Drops the ⌊beta·n⌋ largest and ⌊gamma·n⌋ smallest magnitudes, using the
/// same ordering as trim_by_magnitude.
Delta breadcrumbs_mask(const Delta& tau, double beta, double gamma);

/// Zeroes each element independently with probability `p`, drawing from the
/// counter-based stream `stream_key` (see dare_stream_key). Survivors are
/// scaled by 1/(1-p) when `rescale`.
Delta dare_drop(const Delta& tau, double p, bool rescale, std::uint64_t stream_key);

/// Per element, the sign of Σ wᵢτᵢ; a zero sum elects +1.
std::vector<std::int8_t> elect_sign(std::span<const Delta> taus, std::span<const double> weights);

/// Per element, the weighted mean of the nonzero entries agreeing with the
/// elected sign, or 0 when none agree.
Delta disjoint_merge(std::span<const Delta> taus, std::span<const double> weights, std::span<const std::int8_t> signs);

/// base + scale·delta
Tensor apply_delta(const Tensor& base, const Delta& delta, double scale);

/// base + lambda·disjoint_merge(taus, weights, elect_sign(taus, weights)).
/// `taus` are used as given, so callers sparsify first (trim or DARE).
Tensor sign_consensus_merge(const Tensor& base, std::span<const Delta> taus, std::span<const double> weights,
                            double lambda);

/// TIES: trim every task vector to `density`, then sign_consensus_merge.
Tensor ties_merge(const Tensor& base, std::span<const Delta> taus, std::span<const double> weights, double density,
                  double lambda);

// ---- method interface --------------------------------------------------------

/// Everything a merge method needs for one output tensor. Per-model vectors
/// are indexed like `inputs`.
struct MethodContext {
    MergeMethod method = MergeMethod::Linear;
    std::string tensor_name;
    const Tensor* base = nullptr;
    std::vector<const Tensor*> inputs;

    std::vector<double> weights;
    std::vector<double> densities;
    std::vector<double> betas;
    std::vector<double> gammas;
    std::vector<std::uint64_t> dare_keys;

    double t = 0.5;
    bool normalize = true;
    bool rescale = true;
    double lambda = 1.0;
    double slerp_eps = 1e-8;
};

/// Interface every merge method implements. Implementations are stateless.
class MergeMethodImpl {
public:
    virtual ~MergeMethodImpl() = default;
    virtual MergeMethod method() const = 0;
    virtual bool needs_base() const { return method_uses_base(method()); }
    virtual Tensor merge(const MethodContext& ctx) const = 0;
};

/// Throws ConfigError for methods without tensor arithmetic (passthrough).
const MergeMethodImpl& method_impl(MergeMethod method);

/// Checks shapes and per-model vector lengths, then dispatches.
Tensor apply_method(const MethodContext& ctx);

} // namespace ckptmerge
