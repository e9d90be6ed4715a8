// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ckptmerge/tensor.hpp"

namespace ckptmerge {

enum class MergeMethod { Linear, Slerp, TaskArithmetic, Ties, DareTies, DareLinear, Breadcrumbs, Passthrough };

std::string_view method_name(MergeMethod method);
std::optional<MergeMethod> parse_method(std::string_view name);
/// Methods that operate on task vectors relative to a base model.
bool method_uses_base(MergeMethod method);
bool method_uses_dare(MergeMethod method);

/// Anchor values of a layer-varying parameter, spread evenly over [0, 1].
using Gradient = std::vector<double>;
using ParameterValue = std::variant<double, Gradient>;

struct ParameterEntry {
    std::optional<std::string> filter; // substring of the tensor name; none matches everything
    ParameterValue value;

    bool operator==(const ParameterEntry&) const = default;
};

/// Ordered list of (filter, value) entries. The first matching entry wins.
struct ParameterSpec {
    std::vector<ParameterEntry> entries;

    static ParameterSpec constant(double value) { return {{{std::nullopt, value}}}; }
    static ParameterSpec gradient(Gradient anchors) { return {{{std::nullopt, std::move(anchors)}}}; }

    bool operator==(const ParameterSpec&) const = default;
};

using ParameterMap = std::map<std::string, ParameterSpec>;

struct ModelInput {
    std::string model;
    ParameterMap parameters; // shadows MergeConfig::parameters

    bool operator==(const ModelInput&) const = default;
};

struct SliceSource {
    std::string model;
    int start = 0; // [start, end)
    int end = 0;

    bool operator==(const SliceSource&) const = default;
};

struct SliceSpec {
    std::vector<SliceSource> sources;

    bool operator==(const SliceSpec&) const = default;
};

struct MergeConfig {
    MergeMethod merge_method = MergeMethod::Linear;
    std::vector<ModelInput> models;
    std::optional<std::string> base_model;
    std::optional<std::vector<SliceSpec>> slices;
    ParameterMap parameters;
    std::optional<DType> dtype;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> tokenizer_source;

    bool operator==(const MergeConfig&) const = default;
};

/// Parses and validates a YAML recipe. Throws ConfigError naming the offending
/// key path (e.g. `models[1].parameters.density`).
MergeConfig parse_config(std::string_view yaml_text);

/// Canonical YAML rendering; parse_config(render_config(c)) == c.
std::string render_config(const MergeConfig& config);

/// Position along the layer stack at which gradients are evaluated, kept as an
/// exact fraction so evenly spaced anchors resolve without drift.
struct GradientPosition {
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 1;

    /// Embeddings and anything else before the first layer.
    static GradientPosition start() { return {0, 1}; }
    /// Final norm, output head and anything after the last layer.
    static GradientPosition end() { return {1, 1}; }
    /// Layer `index` of `num_layers`; a single-layer stack sits at 0.
    static GradientPosition layer(int index, int num_layers);

    double as_double() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

/// Piecewise-linear interpolation over anchors evenly spaced on [0, 1].
double evaluate_gradient(const Gradient& anchors, GradientPosition position);

/// First entry whose filter is a substring of `tensor_name` decides the value;
/// `fallback` when nothing matches.
double resolve_parameter(const ParameterSpec& spec, std::string_view tensor_name, GradientPosition position,
                         double fallback);

/// Layer-index form: no layer index means position 0.
double resolve_parameter(const ParameterSpec& spec, std::string_view tensor_name, std::optional<int> layer_index,
                         int num_layers, double fallback);

/// Whether any entry of `spec` applies to `tensor_name`.
bool parameter_matches(const ParameterSpec& spec, std::string_view tensor_name);

} // namespace ckptmerge
