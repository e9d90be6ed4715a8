// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/architecture.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/error.hpp"

namespace ckptmerge {

namespace {

constexpr std::string_view kIndexPlaceholder = "{idx}";

std::vector<WeightTemplate> parse_templates(const nlohmann::json& doc, const char* key, const std::string& source) {
    if (!doc.contains(key)) throw FormatError(fmt::format("{}: missing field '{}'", source, key));
    const auto& list = doc.at(key);
    if (!list.is_array()) throw FormatError(fmt::format("{}: '{}' must be a list", source, key));
    std::vector<WeightTemplate> out;
    for (const auto& item : list) {
        WeightTemplate t;
        if (item.is_string()) {
            t.name = item.get<std::string>();
        } else if (item.is_object() && item.contains("name") && item["name"].is_string()) {
            t.name = item["name"].get<std::string>();
            if (item.contains("optional")) {
                if (!item["optional"].is_boolean()) {
                    throw FormatError(fmt::format("{}: '{}' optional flag must be a boolean", source, t.name));
                }
                t.optional = item["optional"].get<bool>();
            }
        } else {
            throw FormatError(fmt::format("{}: entries of '{}' must be strings or {{\"name\", \"optional\"}}", source, key));
        }
        if (t.name.empty()) throw FormatError(fmt::format("{}: empty name in '{}'", source, key));
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace

void ArchitectureRegistry::add(ArchitectureDef def) {
    const auto family = def.family;
    if (def.fallback && fallback()) {
        throw FormatError(fmt::format("architecture '{}' is a second fallback definition", family));
    }
    if (!defs_.emplace(family, std::move(def)).second) {
        throw FormatError(fmt::format("architecture family '{}' is defined twice", family));
    }
}

const ArchitectureDef* ArchitectureRegistry::find(const std::string& family) const {
    auto it = defs_.find(family);
    return it == defs_.end() ? nullptr : &it->second;
}

const ArchitectureDef* ArchitectureRegistry::fallback() const {
    for (const auto& [_, def] : defs_) {
        if (def.fallback) return &def;
    }
    return nullptr;
}

ArchitectureDef parse_architecture_def(const nlohmann::json& doc, const std::string& source) {
    if (!doc.is_object()) throw FormatError(fmt::format("{}: expected a JSON object", source));
    ArchitectureDef def;
    for (const char* key : {"family", "num_layers_key"}) {
        if (!doc.contains(key) || !doc[key].is_string()) {
            throw FormatError(fmt::format("{}: missing string field '{}'", source, key));
        }
    }
    def.family = doc["family"].get<std::string>();
    def.num_layers_key = doc["num_layers_key"].get<std::string>();
    if (doc.contains("fallback")) {
        if (!doc["fallback"].is_boolean()) throw FormatError(fmt::format("{}: 'fallback' must be a boolean", source));
        def.fallback = doc["fallback"].get<bool>();
    }
    def.pre_weights = parse_templates(doc, "pre_weights", source);
    def.layer_templates = parse_templates(doc, "layer_templates", source);
    def.post_weights = parse_templates(doc, "post_weights", source);

    if (def.family.empty()) throw FormatError(fmt::format("{}: 'family' is empty", source));
    if (!def.fallback && def.num_layers_key.empty()) {
        throw FormatError(fmt::format("{}: 'num_layers_key' is empty", source));
    }

    std::set<std::string> seen;
    for (const auto* list : {&def.pre_weights, &def.layer_templates, &def.post_weights}) {
        for (const auto& t : *list) {
            if (!seen.insert(t.name).second) throw FormatError(fmt::format("{}: template '{}' is repeated", source, t.name));
        }
    }
    for (const auto& t : def.layer_templates) {
        if (t.name.find(kIndexPlaceholder) == std::string::npos) {
            throw FormatError(fmt::format("{}: layer template '{}' lacks {{idx}}", source, t.name));
        }
    }
    for (const auto* list : {&def.pre_weights, &def.post_weights}) {
        for (const auto& t : *list) {
            if (t.name.find(kIndexPlaceholder) != std::string::npos) {
                throw FormatError(fmt::format("{}: '{}' is not a layer template but contains {{idx}}", source, t.name));
            }
        }
    }
    return def;
}

ArchitectureRegistry load_architecture_defs(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw FormatError(fmt::format("architecture directory '{}' does not exist", dir.string()));
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());

    ArchitectureRegistry registry;
    for (const auto& path : files) {
        std::ifstream in(path);
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
        }
        registry.add(parse_architecture_def(doc, path.string()));
    }
    return registry;
}

std::string expand_layer_template(const std::string& name_template, int layer_index) {
    std::string out = name_template;
    const auto idx = std::to_string(layer_index);
    for (auto pos = out.find(kIndexPlaceholder); pos != std::string::npos;
         pos = out.find(kIndexPlaceholder, pos + idx.size())) {
        out.replace(pos, kIndexPlaceholder.size(), idx);
    }
    return out;
}

std::vector<WeightInfo> enumerate_weights(const ArchitectureDef& def, int num_layers) {
    if (num_layers < 1) throw Error(ErrorKind::Internal, "enumerate_weights needs at least one layer");
    std::vector<WeightInfo> out;
    out.reserve(def.pre_weights.size() + def.post_weights.size() +
                def.layer_templates.size() * static_cast<std::size_t>(num_layers));
    for (std::size_t i = 0; i < def.pre_weights.size(); ++i) {
        out.push_back({def.pre_weights[i].name, WeightKind::Pre, std::nullopt, def.pre_weights[i].optional, i});
    }
    for (int layer = 0; layer < num_layers; ++layer) {
        for (std::size_t i = 0; i < def.layer_templates.size(); ++i) {
            const auto& t = def.layer_templates[i];
            out.push_back({expand_layer_template(t.name, layer), WeightKind::Layer, layer, t.optional, i});
        }
    }
    for (std::size_t i = 0; i < def.post_weights.size(); ++i) {
        out.push_back({def.post_weights[i].name, WeightKind::Post, std::nullopt, def.post_weights[i].optional, i});
    }
    return out;
}

InferredArchitecture infer_architecture(const LazyCheckpoint& ckpt, const ArchitectureRegistry& registry) {
    const auto& cfg = ckpt.model_config();
    const ArchitectureDef* def = nullptr;
    if (cfg.contains("model_type") && cfg["model_type"].is_string()) {
        const auto family = cfg["model_type"].get<std::string>();
        def = registry.find(family);
        if (!def) def = registry.fallback();
        if (!def) {
            throw UnknownArchitecture(fmt::format("no architecture definition for model_type '{}' ({})", family,
                                                  ckpt.root().string()));
        }
    } else {
        def = registry.fallback();
        if (!def) throw FormatError(fmt::format("'{}' has no model_type in its config", ckpt.root().string()));
    }

    if (def->fallback) return {def, 1};

    if (!cfg.contains(def->num_layers_key)) {
        throw FormatError(fmt::format("'{}': config lacks layer count key '{}'", ckpt.root().string(),
                                      def->num_layers_key));
    }
    const auto& n = cfg[def->num_layers_key];
    if (!n.is_number_integer() || n.get<long long>() < 1) {
        throw FormatError(fmt::format("'{}': '{}' must be a positive integer", ckpt.root().string(),
                                      def->num_layers_key));
    }
    return {def, static_cast<int>(n.get<long long>())};
}

} // namespace ckptmerge
