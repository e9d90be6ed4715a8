// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/config.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "ckptmerge/error.hpp"

namespace ckptmerge {

namespace {

struct MethodInfo {
    MergeMethod method;
    std::string_view name;
    std::set<std::string, std::less<>> params;
};

const std::vector<MethodInfo>& method_table() {
    static const std::vector<MethodInfo> table = {
        {MergeMethod::Linear, "linear", {"weight", "normalize"}},
        {MergeMethod::Slerp, "slerp", {"t"}},
        {MergeMethod::TaskArithmetic, "task_arithmetic", {"weight", "lambda"}},
        {MergeMethod::Ties, "ties", {"weight", "density", "lambda"}},
        {MergeMethod::DareTies, "dare_ties", {"weight", "density", "rescale", "lambda"}},
        {MergeMethod::DareLinear, "dare_linear", {"weight", "density", "rescale", "lambda"}},
        {MergeMethod::Breadcrumbs, "breadcrumbs", {"weight", "beta", "gamma", "lambda"}},
        {MergeMethod::Passthrough, "passthrough", {}},
    };
    return table;
}

const MethodInfo& info(MergeMethod method) {
    for (const auto& m : method_table()) {
        if (m.method == method) return m;
    }
    throw Error(ErrorKind::Internal, "unknown merge method");
}

// Parameters that make no sense per model.
bool is_global_only(std::string_view name) {
    return name == "t" || name == "normalize" || name == "rescale" || name == "lambda";
}

bool is_boolean(std::string_view name) { return name == "normalize" || name == "rescale"; }

[[noreturn]] void fail(const std::string& path, const std::string& message) {
    throw ConfigError(path.empty() ? message : fmt::format("{}: {}", path, message));
}

void check_keys(const YAML::Node& node, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!node.IsMap()) fail(path, "expected a mapping");
    for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            fail(path.empty() ? key : path + "." + key, "unknown key");
        }
    }
}

std::string parse_string(const YAML::Node& node, const std::string& path) {
    if (!node.IsScalar()) fail(path, "expected a string");
    auto s = node.as<std::string>();
    if (s.empty()) fail(path, "must not be empty");
    return s;
}

double parse_scalar(const YAML::Node& node, const std::string& path) {
    if (!node.IsScalar()) fail(path, "expected a number");
    double value;
    if (YAML::convert<double>::decode(node, value)) {
        if (!std::isfinite(value)) fail(path, "must be finite");
        return value;
    }
    bool flag;
    if (YAML::convert<bool>::decode(node, flag)) return flag ? 1.0 : 0.0;
    fail(path, fmt::format("'{}' is not a number", node.Scalar()));
}

ParameterValue parse_value(const YAML::Node& node, const std::string& path) {
    if (node.IsScalar()) return parse_scalar(node, path);
    if (!node.IsSequence()) fail(path, "expected a number or a list of numbers");
    Gradient anchors;
    for (std::size_t i = 0; i < node.size(); ++i) anchors.push_back(parse_scalar(node[i], fmt::format("{}[{}]", path, i)));
    if (anchors.size() < 2) fail(path, "a gradient needs at least 2 values");
    return anchors;
}

ParameterSpec parse_parameter(const YAML::Node& node, const std::string& path) {
    ParameterSpec spec;
    const bool entry_list = node.IsSequence() && node.size() > 0 && node[0].IsMap();
    if (!entry_list) {
        spec.entries.push_back({std::nullopt, parse_value(node, path)});
        return spec;
    }
    bool has_default = false;
    for (std::size_t i = 0; i < node.size(); ++i) {
        const auto entry_path = fmt::format("{}[{}]", path, i);
        const auto& entry = node[i];
        check_keys(entry, entry_path, {"filter", "value"});
        if (!entry["value"]) fail(entry_path, "missing 'value'");
        ParameterEntry e;
        if (entry["filter"]) {
            e.filter = parse_string(entry["filter"], entry_path + ".filter");
        } else {
            if (has_default) fail(entry_path, "only one entry may omit 'filter'");
            has_default = true;
        }
        e.value = parse_value(entry["value"], entry_path + ".value");
        spec.entries.push_back(std::move(e));
    }
    return spec;
}

template <class Fn>
void for_each_number(const ParameterSpec& spec, Fn&& fn) {
    for (const auto& e : spec.entries) {
        if (const auto* d = std::get_if<double>(&e.value)) {
            fn(*d);
        } else {
            for (double v : std::get<Gradient>(e.value)) fn(v);
        }
    }
}

void validate_parameter(const std::string& name, const ParameterSpec& spec, const std::string& path) {
    if (is_boolean(name)) {
        for (const auto& e : spec.entries) {
            const auto* d = std::get_if<double>(&e.value);
            if (!d || (*d != 0.0 && *d != 1.0)) fail(path, "expected true or false");
        }
        return;
    }
    for_each_number(spec, [&](double v) {
        if (name == "density" && !(v > 0.0 && v <= 1.0)) fail(path, fmt::format("density {} outside (0, 1]", v));
        if (name == "t" && !(v >= 0.0 && v <= 1.0)) fail(path, fmt::format("t {} outside [0, 1]", v));
        if ((name == "beta" || name == "gamma") && !(v >= 0.0 && v < 1.0)) {
            fail(path, fmt::format("{} {} outside [0, 1)", name, v));
        }
    });
}

double max_value(const ParameterSpec* spec) {
    double m = 0.0;
    if (spec) for_each_number(*spec, [&](double v) { m = std::max(m, v); });
    return m;
}

ParameterMap parse_parameter_map(const YAML::Node& node, const std::string& path, const MethodInfo& method,
                                 bool per_model) {
    ParameterMap out;
    if (!node.IsMap()) fail(path, "expected a mapping");
    for (const auto& kv : node) {
        const auto name = kv.first.as<std::string>();
        const auto key_path = path + "." + name;
        if (method.params.count(name) == 0) {
            fail(key_path, fmt::format("not a parameter of merge method '{}'", method.name));
        }
        if (per_model && is_global_only(name)) fail(key_path, "may only be set globally");
        auto spec = parse_parameter(kv.second, key_path);
        validate_parameter(name, spec, key_path);
        out.emplace(name, std::move(spec));
    }
    return out;
}

const ParameterSpec* find_param(const ParameterMap& map, const char* name) {
    auto it = map.find(name);
    return it == map.end() ? nullptr : &it->second;
}

void validate_structure(const MergeConfig& c) {
    const auto method = c.merge_method;
    const auto name = std::string(method_name(method));

    if (method == MergeMethod::Passthrough) {
        if (!c.slices) fail("slices", "passthrough requires 'slices'");
        if (c.base_model) fail("base_model", "passthrough does not use a base model");
        return;
    }
    if (c.slices) fail("slices", fmt::format("'{}' takes 'models', not 'slices'", name));
    if (c.models.empty()) fail("models", "at least one model is required");

    if (method_uses_base(method) && !c.base_model) {
        fail("base_model", fmt::format("'{}' requires base_model", name));
    }
    if (!method_uses_base(method) && c.base_model) {
        fail("base_model", fmt::format("'{}' does not use a base model", name));
    }
    if (method == MergeMethod::Slerp) {
        if (c.models.size() != 2) fail("models", fmt::format("slerp needs exactly 2 models, got {}", c.models.size()));
        if (!find_param(c.parameters, "t")) fail("parameters.t", "slerp requires 't'");
    }
    if (method == MergeMethod::Breadcrumbs) {
        for (std::size_t i = 0; i < c.models.size(); ++i) {
            // filters can mix model and global entries, so bound both sides by their largest value
            const auto& mp = c.models[i].parameters;
            const double b = std::max(max_value(find_param(mp, "beta")), max_value(find_param(c.parameters, "beta")));
            const double g = std::max(max_value(find_param(mp, "gamma")), max_value(find_param(c.parameters, "gamma")));
            if (b + g >= 1.0) {
                fail(fmt::format("models[{}].parameters", i), fmt::format("beta + gamma must be < 1 (got {} + {})", b, g));
            }
        }
    }
}

void emit_value(YAML::Emitter& out, const ParameterValue& value) {
    if (const auto* d = std::get_if<double>(&value)) {
        out << fmt::format("{}", *d);
        return;
    }
    out << YAML::Flow << YAML::BeginSeq;
    for (double v : std::get<Gradient>(value)) out << fmt::format("{}", v);
    out << YAML::EndSeq;
}

void emit_parameters(YAML::Emitter& out, const ParameterMap& params) {
    out << YAML::BeginMap;
    for (const auto& [name, spec] : params) {
        out << YAML::Key << name << YAML::Value;
        if (spec.entries.size() == 1 && !spec.entries[0].filter) {
            emit_value(out, spec.entries[0].value);
            continue;
        }
        out << YAML::BeginSeq;
        for (const auto& e : spec.entries) {
            out << YAML::BeginMap;
            if (e.filter) out << YAML::Key << "filter" << YAML::Value << YAML::DoubleQuoted << *e.filter;
            out << YAML::Key << "value" << YAML::Value;
            emit_value(out, e.value);
            out << YAML::EndMap;
        }
        out << YAML::EndSeq;
    }
    out << YAML::EndMap;
}

} // namespace

std::string_view method_name(MergeMethod method) { return info(method).name; }

std::optional<MergeMethod> parse_method(std::string_view name) {
    for (const auto& m : method_table()) {
        if (m.name == name) return m.method;
    }
    return std::nullopt;
}

bool method_uses_base(MergeMethod method) {
    switch (method) {
    case MergeMethod::TaskArithmetic:
    case MergeMethod::Ties:
    case MergeMethod::DareTies:
    case MergeMethod::DareLinear:
    case MergeMethod::Breadcrumbs: return true;
    default: return false;
    }
}

bool method_uses_dare(MergeMethod method) {
    return method == MergeMethod::DareTies || method == MergeMethod::DareLinear;
}

MergeConfig parse_config(std::string_view yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(yaml_text));
    } catch (const YAML::Exception& e) {
        throw ConfigError(fmt::format("invalid YAML: {}", e.what()));
    }
    if (!root.IsMap()) fail("", "recipe must be a YAML mapping");

    try {
        check_keys(root, "", {"merge_method", "models", "base_model", "slices", "parameters", "dtype", "seed",
                              "tokenizer_source"});

        MergeConfig c;
        if (!root["merge_method"]) fail("merge_method", "missing");
        const auto method_str = parse_string(root["merge_method"], "merge_method");
        const auto method = parse_method(method_str);
        if (!method) fail("merge_method", fmt::format("unknown merge method '{}'", method_str));
        c.merge_method = *method;
        const auto& minfo = info(c.merge_method);

        if (root["models"] && root["slices"]) fail("", "give either 'models' or 'slices', not both");

        if (const auto models = root["models"]) {
            if (!models.IsSequence()) fail("models", "expected a list");
            for (std::size_t i = 0; i < models.size(); ++i) {
                const auto path = fmt::format("models[{}]", i);
                check_keys(models[i], path, {"model", "parameters"});
                if (!models[i]["model"]) fail(path, "missing 'model'");
                ModelInput input;
                input.model = parse_string(models[i]["model"], path + ".model");
                if (const auto p = models[i]["parameters"]) {
                    input.parameters = parse_parameter_map(p, path + ".parameters", minfo, true);
                }
                c.models.push_back(std::move(input));
            }
        }

        if (const auto slices = root["slices"]) {
            if (!slices.IsSequence() || slices.size() == 0) fail("slices", "expected a non-empty list");
            c.slices.emplace();
            for (std::size_t i = 0; i < slices.size(); ++i) {
                const auto path = fmt::format("slices[{}]", i);
                check_keys(slices[i], path, {"sources"});
                const auto sources = slices[i]["sources"];
                if (!sources || !sources.IsSequence()) fail(path + ".sources", "expected a list");
                if (sources.size() != 1) fail(path + ".sources", "each slice takes exactly one source");
                SliceSpec slice;
                for (std::size_t j = 0; j < sources.size(); ++j) {
                    const auto spath = fmt::format("{}.sources[{}]", path, j);
                    check_keys(sources[j], spath, {"model", "layer_range"});
                    if (!sources[j]["model"]) fail(spath, "missing 'model'");
                    const auto range = sources[j]["layer_range"];
                    if (!range || !range.IsSequence() || range.size() != 2) {
                        fail(spath + ".layer_range", "expected [start, end]");
                    }
                    SliceSource src;
                    src.model = parse_string(sources[j]["model"], spath + ".model");
                    int bounds[2];
                    for (int k = 0; k < 2; ++k) {
                        if (!YAML::convert<int>::decode(range[k], bounds[k])) {
                            fail(spath + ".layer_range", "bounds must be integers");
                        }
                    }
                    src.start = bounds[0];
                    src.end = bounds[1];
                    if (src.start < 0 || src.start >= src.end) {
                        fail(spath + ".layer_range", fmt::format("need 0 <= start < end, got [{}, {})", src.start, src.end));
                    }
                    slice.sources.push_back(std::move(src));
                }
                c.slices->push_back(std::move(slice));
            }
        }

        if (root["base_model"]) c.base_model = parse_string(root["base_model"], "base_model");
        if (root["parameters"]) c.parameters = parse_parameter_map(root["parameters"], "parameters", minfo, false);
        if (root["dtype"]) {
            const auto s = parse_string(root["dtype"], "dtype");
            c.dtype = parse_torch_dtype(s);
            if (!c.dtype) fail("dtype", fmt::format("unsupported dtype '{}'", s));
        }
        if (root["seed"]) {
            std::uint64_t seed;
            if (!root["seed"].IsScalar() || root["seed"].Scalar().starts_with("-") ||
                !YAML::convert<std::uint64_t>::decode(root["seed"], seed)) {
                fail("seed", "expected a non-negative integer");
            }
            c.seed = seed;
        }
        if (root["tokenizer_source"]) c.tokenizer_source = parse_string(root["tokenizer_source"], "tokenizer_source");

        validate_structure(c);
        return c;
    } catch (const YAML::Exception& e) {
        throw ConfigError(fmt::format("malformed recipe: {}", e.what()));
    }
}

std::string render_config(const MergeConfig& c) {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "merge_method" << YAML::Value << std::string(method_name(c.merge_method));
    if (c.base_model) out << YAML::Key << "base_model" << YAML::Value << YAML::DoubleQuoted << *c.base_model;
    if (!c.models.empty()) {
        out << YAML::Key << "models" << YAML::Value << YAML::BeginSeq;
        for (const auto& m : c.models) {
            out << YAML::BeginMap << YAML::Key << "model" << YAML::Value << YAML::DoubleQuoted << m.model;
            if (!m.parameters.empty()) {
                out << YAML::Key << "parameters" << YAML::Value;
                emit_parameters(out, m.parameters);
            }
            out << YAML::EndMap;
        }
        out << YAML::EndSeq;
    }
    if (c.slices) {
        out << YAML::Key << "slices" << YAML::Value << YAML::BeginSeq;
        for (const auto& s : *c.slices) {
            out << YAML::BeginMap << YAML::Key << "sources" << YAML::Value << YAML::BeginSeq;
            for (const auto& src : s.sources) {
                out << YAML::BeginMap << YAML::Key << "model" << YAML::Value << YAML::DoubleQuoted << src.model;
                out << YAML::Key << "layer_range" << YAML::Value << YAML::Flow << YAML::BeginSeq << src.start
                    << src.end << YAML::EndSeq << YAML::EndMap;
            }
            out << YAML::EndSeq << YAML::EndMap;
        }
        out << YAML::EndSeq;
    }
    if (!c.parameters.empty()) {
        out << YAML::Key << "parameters" << YAML::Value;
        emit_parameters(out, c.parameters);
    }
    if (c.dtype) out << YAML::Key << "dtype" << YAML::Value << std::string(dtype_torch_name(*c.dtype));
    if (c.seed) out << YAML::Key << "seed" << YAML::Value << *c.seed;
    if (c.tokenizer_source) {
        out << YAML::Key << "tokenizer_source" << YAML::Value << YAML::DoubleQuoted << *c.tokenizer_source;
    }
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

GradientPosition GradientPosition::layer(int index, int num_layers) {
    if (num_layers < 1 || index < 0 || index >= num_layers) {
        throw Error(ErrorKind::Internal, fmt::format("layer {} outside a stack of {}", index, num_layers));
    }
    if (num_layers == 1) return start();
    return {static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(num_layers - 1)};
}

double evaluate_gradient(const Gradient& anchors, GradientPosition position) {
    if (anchors.empty()) throw Error(ErrorKind::Internal, "empty gradient");
    if (anchors.size() == 1) return anchors[0];

    const std::uint64_t segments = anchors.size() - 1;
    const std::uint64_t den = position.denominator;
    // Segment index and remainder of position * segments, computed exactly.
    const std::uint64_t scaled = position.numerator * segments;
    std::uint64_t seg = scaled / den;
    std::uint64_t rem = scaled % den;
    if (seg >= segments) {
        seg = segments - 1;
        rem = den;
    }
    // anchors and flat segments come back unrounded
    if (rem == 0) return anchors[seg];
    if (rem == den) return anchors[seg + 1];
    if (anchors[seg] == anchors[seg + 1]) return anchors[seg];
    const double d = static_cast<double>(den);
    const double r = static_cast<double>(rem);
    // single rounding at the division whenever the numerator is exact
    return (anchors[seg] * (d - r) + anchors[seg + 1] * r) / d;
}

bool parameter_matches(const ParameterSpec& spec, std::string_view tensor_name) {
    return std::any_of(spec.entries.begin(), spec.entries.end(), [&](const ParameterEntry& e) {
        return !e.filter || tensor_name.find(*e.filter) != std::string_view::npos;
    });
}

double resolve_parameter(const ParameterSpec& spec, std::string_view tensor_name, GradientPosition position,
                         double fallback) {
    for (const auto& e : spec.entries) {
        if (e.filter && tensor_name.find(*e.filter) == std::string_view::npos) continue;
        if (const auto* d = std::get_if<double>(&e.value)) return *d;
        return evaluate_gradient(std::get<Gradient>(e.value), position);
    }
    return fallback;
}

double resolve_parameter(const ParameterSpec& spec, std::string_view tensor_name, std::optional<int> layer_index,
                         int num_layers, double fallback) {
    const auto pos = layer_index ? GradientPosition::layer(*layer_index, num_layers) : GradientPosition::start();
    return resolve_parameter(spec, tensor_name, pos, fallback);
}

} // namespace ckptmerge
