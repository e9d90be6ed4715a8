// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/planner.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ckptmerge/error.hpp"
#include "ckptmerge/methods.hpp"
#include "ckptmerge/rng.hpp"

namespace ckptmerge {

namespace {

class LoadOp final : public TaskOp {
public:
    LoadOp(std::shared_ptr<const LazyCheckpoint> ckpt, std::string name, std::optional<std::uint64_t> rows)
        : ckpt_(std::move(ckpt)), name_(std::move(name)), rows_(rows) {}

    Value run(std::span<const Value>) const override {
        if (rows_) return std::make_shared<const Tensor>(ckpt_->load_tensor_rows(name_, *rows_));
        return std::make_shared<const Tensor>(ckpt_->load_tensor(name_));
    }

private:
    std::shared_ptr<const LazyCheckpoint> ckpt_;
    std::string name_;
    std::optional<std::uint64_t> rows_;
};

// Inputs arrive as [base?, model 0, model 1, ...] after deduplication, so the
// op keeps the slot of each role.
class MethodOp final : public TaskOp {
public:
    MethodOp(MethodContext context, std::optional<std::size_t> base_slot, std::vector<std::size_t> model_slots)
        : context_(std::move(context)), base_slot_(base_slot), model_slots_(std::move(model_slots)) {}

    Value run(std::span<const Value> inputs) const override {
        MethodContext ctx = context_;
        ctx.base = base_slot_ ? inputs[*base_slot_].get() : nullptr;
        ctx.inputs.clear();
        for (auto slot : model_slots_) ctx.inputs.push_back(inputs[slot].get());
        return std::make_shared<const Tensor>(apply_method(ctx));
    }

private:
    MethodContext context_;
    std::optional<std::size_t> base_slot_;
    std::vector<std::size_t> model_slots_;
};

// Rounds values to what the output dtype can hold.
class CastOp final : public TaskOp {
public:
    explicit CastOp(DType dtype) : dtype_(dtype) {}

    Value run(std::span<const Value> inputs) const override {
        const Tensor& in = *inputs[0];
        std::vector<std::byte> bytes(in.size() * dtype_size(dtype_));
        encode_from_f32(dtype_, in.values(), bytes);
        std::vector<float> values(in.size());
        decode_to_f32(dtype_, bytes, values);
        return std::make_shared<const Tensor>(in.shape(), std::move(values));
    }

private:
    DType dtype_;
};

std::uint64_t f32_bytes(const Shape& shape) { return element_count(shape) * sizeof(float); }

const LazyCheckpoint& input(const CheckpointSet& inputs, const std::string& ref) {
    auto it = inputs.find(ref);
    if (it == inputs.end()) throw ConfigError(fmt::format("model '{}' was not opened", ref));
    return *it->second;
}

std::shared_ptr<const LazyCheckpoint> input_ptr(const CheckpointSet& inputs, const std::string& ref) {
    auto it = inputs.find(ref);
    if (it == inputs.end()) throw ConfigError(fmt::format("model '{}' was not opened", ref));
    return it->second;
}

GradientPosition position_of(const WeightInfo& w, int num_layers) {
    switch (w.kind) {
    case WeightKind::Pre: return GradientPosition::start();
    case WeightKind::Layer: return GradientPosition::layer(*w.layer_index, num_layers);
    case WeightKind::Post: return GradientPosition::end();
    }
    return GradientPosition::start();
}

const ParameterSpec* find_param(const ParameterMap& map, const std::string& name) {
    auto it = map.find(name);
    return it == map.end() ? nullptr : &it->second;
}

// Per-model value: the model's own entries first, then the global ones.
double model_param(const MergeConfig& config, std::size_t model, const std::string& name, const std::string& tensor,
                   GradientPosition pos, double fallback) {
    if (const auto* spec = find_param(config.models[model].parameters, name); spec && parameter_matches(*spec, tensor)) {
        return resolve_parameter(*spec, tensor, pos, fallback);
    }
    if (const auto* spec = find_param(config.parameters, name)) return resolve_parameter(*spec, tensor, pos, fallback);
    return fallback;
}

double global_param(const MergeConfig& config, const std::string& name, const std::string& tensor, GradientPosition pos,
                    double fallback) {
    if (const auto* spec = find_param(config.parameters, name)) return resolve_parameter(*spec, tensor, pos, fallback);
    return fallback;
}

struct InputArchitecture {
    const ArchitectureDef* def = nullptr;
    int num_layers = 1;
};

InputArchitecture common_architecture(const std::vector<std::string>& refs, const CheckpointSet& inputs,
                                      const ArchitectureRegistry& registry, bool require_same_depth) {
    InputArchitecture out;
    std::string first_ref;
    for (const auto& ref : refs) {
        const auto arch = infer_architecture(input(inputs, ref), registry);
        if (!out.def) {
            out = {arch.def, arch.num_layers};
            first_ref = ref;
            continue;
        }
        if (arch.def != out.def) {
            throw UnknownArchitecture(fmt::format("'{}' is {} but '{}' is {}; inputs must share one architecture", ref,
                                                  arch.def->family, first_ref, out.def->family));
        }
        if (require_same_depth && arch.num_layers != out.num_layers) {
            throw ShapeMismatch(fmt::format("'{}' has {} layers but '{}' has {}", ref, arch.num_layers, first_ref,
                                            out.num_layers));
        }
    }
    return out;
}

// Flat fallback: tensors every input holds, by name.
std::vector<WeightInfo> shared_tensor_names(const std::vector<std::string>& refs, const CheckpointSet& inputs,
                                            std::vector<std::string>& warnings) {
    std::set<std::string> all;
    for (const auto& ref : refs) {
        for (const auto& [name, _] : input(inputs, ref).records()) all.insert(name);
    }
    std::vector<WeightInfo> out;
    for (const auto& name : all) {
        const bool everywhere = std::all_of(refs.begin(), refs.end(),
                                            [&](const std::string& r) { return input(inputs, r).contains(name); });
        if (everywhere) {
            out.push_back({name, WeightKind::Pre, std::nullopt, false, 0});
        } else {
            warnings.push_back(fmt::format("skipping '{}': not present in every input", name));
        }
    }
    return out;
}

DType first_record_dtype(const LazyCheckpoint& ckpt, const std::vector<OutputTensorSpec>& tensors,
                         const std::string& fallback_name = {}) {
    for (const auto& t : tensors) {
        if (ckpt.contains(t.name)) return ckpt.record(t.name).dtype;
    }
    if (!fallback_name.empty() && ckpt.contains(fallback_name)) return ckpt.record(fallback_name).dtype;
    const auto names = ckpt.names_in_file_order();
    return names.empty() ? DType::F32 : ckpt.record(names.front()).dtype;
}

void finish_manifest(OutputManifest& manifest, const MergeConfig& config, const LazyCheckpoint& donor,
                     const LazyCheckpoint& tokenizer_source, const PlanOptions& options,
                     const std::string& first_source_tensor) {
    manifest.dtype = config.dtype ? *config.dtype : first_record_dtype(donor, manifest.tensors, first_source_tensor);
    manifest.model_config = donor.model_config();
    if (manifest.model_config.contains("torch_dtype")) {
        manifest.model_config["torch_dtype"] = std::string(dtype_torch_name(manifest.dtype));
    }
    manifest.metadata = donor.header_metadata();
    manifest.metadata["merge_recipe"] = options.recipe_text;
    manifest.metadata["merge_seed"] = std::to_string(manifest.seed);
    manifest.metadata["merge_tool"] = fmt::format("{} {}", kToolName, kToolVersion);
    manifest.tokenizer_files = tokenizer_source.tokenizer_files();
}

std::string tokenizer_source_ref(const MergeConfig& config) {
    if (config.tokenizer_source) return *config.tokenizer_source;
    if (config.base_model) return *config.base_model;
    if (!config.models.empty()) return config.models.front().model;
    return config.slices->front().sources.front().model;
}

TaskId emit_chain(TaskGraph& graph, TaskId value, const Shape& shape, const std::string& name, DType out_dtype) {
    if (out_dtype != DType::F32) {
        value = graph.add(TaskKind::CastDtype, {value}, std::make_shared<CastOp>(out_dtype), f32_bytes(shape), name);
    }
    return graph.add_output(value, name);
}

bool differs_only_in_rows(const Shape& a, const Shape& b) {
    return a.size() == b.size() && !a.empty() && std::equal(a.begin() + 1, a.end(), b.begin() + 1);
}

} // namespace

std::vector<std::string> referenced_models(const MergeConfig& config) {
    std::vector<std::string> refs;
    auto add = [&](const std::string& r) {
        if (std::find(refs.begin(), refs.end(), r) == refs.end()) refs.push_back(r);
    };
    if (config.base_model) add(*config.base_model);
    for (const auto& m : config.models) add(m.model);
    if (config.slices) {
        for (const auto& s : *config.slices) {
            for (const auto& src : s.sources) add(src.model);
        }
    }
    if (config.tokenizer_source) add(*config.tokenizer_source);
    return refs;
}

CheckpointSet open_inputs(const MergeConfig& config, std::shared_ptr<const FileReader> reader) {
    CheckpointSet out;
    for (const auto& ref : referenced_models(config)) {
        if (!std::filesystem::is_directory(ref)) {
            throw ConfigError(fmt::format("model '{}' does not exist or is not a directory", ref));
        }
        out.emplace(ref, std::make_shared<const LazyCheckpoint>(open_checkpoint(ref, reader)));
    }
    return out;
}

MergePlan plan_merge(const MergeConfig& config, const CheckpointSet& inputs, const ArchitectureRegistry& registry,
                     const PlanOptions& options) {
    if (config.merge_method == MergeMethod::Passthrough) return plan_passthrough(config, inputs, registry, options);
    if (config.models.empty()) throw ConfigError("models: at least one model is required");

    MergePlan plan;
    auto& manifest = plan.manifest;
    auto& graph = plan.graph;
    const auto method = config.merge_method;
    const bool uses_base = method_uses_base(method);
    if (uses_base && !config.base_model) throw ConfigError(fmt::format("'{}' requires base_model", method_name(method)));
    manifest.seed = options.seed ? *options.seed : config.seed.value_or(0);

    std::vector<std::string> refs;
    if (uses_base) refs.push_back(*config.base_model);
    for (const auto& m : config.models) refs.push_back(m.model);

    const auto arch = common_architecture(refs, inputs, registry, true);
    const auto weights = arch.def->fallback ? shared_tensor_names(refs, inputs, manifest.warnings)
                                            : enumerate_weights(*arch.def, arch.num_layers);
    const auto& donor = input(inputs, config.models.front().model);
    DType out_dtype = DType::F32;
    if (config.dtype) {
        out_dtype = *config.dtype;
    } else {
        std::vector<OutputTensorSpec> probe;
        for (const auto& w : weights) probe.push_back({w.name, {}});
        out_dtype = first_record_dtype(donor, probe);
    }

    for (const auto& w : weights) {
        const auto& name = w.name;
        std::vector<bool> model_has;
        for (const auto& m : config.models) model_has.push_back(input(inputs, m.model).contains(name));
        const bool base_has = uses_base && input(inputs, *config.base_model).contains(name);
        const bool all_models = std::all_of(model_has.begin(), model_has.end(), [](bool b) { return b; });
        const bool any_model = std::any_of(model_has.begin(), model_has.end(), [](bool b) { return b; });

        if (!w.optional) {
            for (std::size_t i = 0; i < config.models.size(); ++i) {
                if (!model_has[i]) {
                    throw KeyError(fmt::format("tensor '{}' is missing from model '{}'", name, config.models[i].model));
                }
            }
            if (uses_base && !base_has) {
                throw KeyError(fmt::format("tensor '{}' is missing from base model '{}'", name, *config.base_model));
            }
        } else if (!(all_models && (!uses_base || base_has))) {
            if (!any_model && !base_has) continue;
            if (uses_base && base_has) {
                manifest.warnings.push_back(fmt::format("'{}' is not in every input; copying it from the base model", name));
                const auto& rec = input(inputs, *config.base_model).record(name);
                const auto load = graph.add(TaskKind::LoadTensor, {},
                                            std::make_shared<LoadOp>(input_ptr(inputs, *config.base_model), name,
                                                                     std::nullopt),
                                            f32_bytes(rec.shape), name);
                emit_chain(graph, load, rec.shape, name, out_dtype);
                manifest.tensors.push_back({name, rec.shape});
            } else {
                manifest.warnings.push_back(fmt::format("skipping optional '{}': not present in every input", name));
            }
            continue;
        }

        // shapes, with the vocabulary escape hatch for embeddings and heads
        std::vector<std::string> shape_refs;
        if (uses_base) shape_refs.push_back(*config.base_model);
        for (const auto& m : config.models) shape_refs.push_back(m.model);
        Shape shape = input(inputs, shape_refs.front()).record(name).shape;
        std::optional<std::uint64_t> rows;
        for (const auto& ref : shape_refs) {
            const auto& s = input(inputs, ref).record(name).shape;
            if (s == shape) continue;
            if (w.kind != WeightKind::Layer && differs_only_in_rows(s, shape)) {
                if (!options.truncate_vocab) {
                    throw ShapeMismatch(fmt::format("'{}' has {} rows in '{}' but {} in '{}' (use --truncate-vocab)", name,
                                                    s[0], ref, shape[0], shape_refs.front()));
                }
                rows = std::min(rows.value_or(shape[0]), std::min(s[0], shape[0]));
                continue;
            }
            throw ShapeMismatch(fmt::format("tensor '{}' has shape {} in '{}' but {} in '{}'", name, shape_to_string(s),
                                            ref, shape_to_string(shape), shape_refs.front()));
        }
        if (rows) {
            manifest.warnings.push_back(fmt::format("truncating '{}' to {} rows", name, *rows));
            shape[0] = *rows;
        }

        const auto pos = position_of(w, arch.num_layers);
        MethodContext ctx;
        ctx.method = method;
        ctx.tensor_name = name;
        for (std::size_t i = 0; i < config.models.size(); ++i) {
            ctx.weights.push_back(model_param(config, i, "weight", name, pos, 1.0));
            if (method == MergeMethod::Ties || method_uses_dare(method)) {
                ctx.densities.push_back(model_param(config, i, "density", name, pos, 1.0));
            }
            if (method == MergeMethod::Breadcrumbs) {
                ctx.betas.push_back(model_param(config, i, "beta", name, pos, 0.0));
                ctx.gammas.push_back(model_param(config, i, "gamma", name, pos, 0.0));
            }
            if (method_uses_dare(method)) ctx.dare_keys.push_back(dare_stream_key(manifest.seed, name, i));
        }
        ctx.normalize = global_param(config, "normalize", name, pos, 1.0) != 0.0;
        ctx.rescale = global_param(config, "rescale", name, pos, 1.0) != 0.0;
        ctx.lambda = global_param(config, "lambda", name, pos, 1.0);
        if (method == MergeMethod::Slerp) {
            const auto* t = find_param(config.parameters, "t");
            if (!t || !parameter_matches(*t, name)) {
                throw ConfigError(fmt::format("parameters.t: no value applies to tensor '{}'", name));
            }
            ctx.t = resolve_parameter(*t, name, pos, 0.0);
        }

        // one load per distinct checkpoint
        std::vector<TaskId> load_ids;
        std::map<std::string, std::size_t> slot_of;
        auto slot_for = [&](const std::string& ref) {
            auto [it, inserted] = slot_of.emplace(ref, load_ids.size());
            if (inserted) {
                load_ids.push_back(graph.add(TaskKind::LoadTensor, {},
                                             std::make_shared<LoadOp>(input_ptr(inputs, ref), name, rows),
                                             f32_bytes(shape), name));
            }
            return it->second;
        };
        std::optional<std::size_t> base_slot;
        if (uses_base) base_slot = slot_for(*config.base_model);
        std::vector<std::size_t> model_slots;
        for (const auto& m : config.models) model_slots.push_back(slot_for(m.model));

        const auto apply = graph.add(TaskKind::MethodApply, load_ids,
                                     std::make_shared<MethodOp>(std::move(ctx), base_slot, std::move(model_slots)),
                                     f32_bytes(shape), name);
        emit_chain(graph, apply, shape, name, out_dtype);
        manifest.tensors.push_back({name, shape});
    }

    MergeConfig resolved = config;
    resolved.dtype = out_dtype;
    finish_manifest(manifest, resolved, donor, input(inputs, tokenizer_source_ref(config)), options, {});
    graph.prune();
    graph.validate();
    return plan;
}

MergePlan plan_passthrough(const MergeConfig& config, const CheckpointSet& inputs,
                           const ArchitectureRegistry& registry, const PlanOptions& options) {
    if (!config.slices || config.slices->empty()) throw ConfigError("slices: passthrough requires at least one slice");

    MergePlan plan;
    auto& manifest = plan.manifest;
    auto& graph = plan.graph;
    manifest.seed = options.seed ? *options.seed : config.seed.value_or(0);

    struct Piece {
        std::string model;
        int start;
        int end;
        int offset; // first output layer
    };
    std::vector<Piece> pieces;
    std::vector<std::string> refs;
    int total_layers = 0;
    for (std::size_t i = 0; i < config.slices->size(); ++i) {
        const auto& slice = (*config.slices)[i];
        if (slice.sources.size() != 1) {
            throw ConfigError(fmt::format("slices[{}].sources: passthrough takes exactly one source", i));
        }
        const auto& src = slice.sources.front();
        pieces.push_back({src.model, src.start, src.end, total_layers});
        total_layers += src.end - src.start;
        refs.push_back(src.model);
    }

    const auto arch = common_architecture(refs, inputs, registry, false);
    if (arch.def->fallback) {
        throw UnknownArchitecture("passthrough needs an architecture definition with layer templates");
    }
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        const auto layers = infer_architecture(input(inputs, pieces[i].model), registry).num_layers;
        if (pieces[i].start < 0 || pieces[i].end > layers || pieces[i].start >= pieces[i].end) {
            throw ConfigError(fmt::format("slices[{}].sources[0].layer_range: [{}, {}) is outside the {} layers of '{}'",
                                          i, pieces[i].start, pieces[i].end, layers, pieces[i].model));
        }
    }

    // per-layer shapes must agree across the stacked sources
    for (const auto& t : arch.def->layer_templates) {
        std::optional<Shape> expected;
        std::string expected_from;
        for (const auto& p : pieces) {
            const auto name = expand_layer_template(t.name, p.start);
            const auto& ckpt = input(inputs, p.model);
            if (!ckpt.contains(name)) continue;
            const auto& shape = ckpt.record(name).shape;
            if (!expected) {
                expected = shape;
                expected_from = p.model;
            } else if (shape != *expected) {
                throw ShapeMismatch(fmt::format("layer tensor '{}' is {} in '{}' but {} in '{}'", t.name,
                                                shape_to_string(shape), p.model, shape_to_string(*expected),
                                                expected_from));
            }
        }
    }

    const auto out_dtype = config.dtype.value_or(
        first_record_dtype(input(inputs, pieces.front().model), {},
                           expand_layer_template(arch.def->layer_templates.empty() ? std::string()
                                                                                   : arch.def->layer_templates[0].name,
                                                 pieces.front().start)));

    for (const auto& w : enumerate_weights(*arch.def, total_layers)) {
        std::string source_model;
        std::string source_name;
        if (w.kind == WeightKind::Pre) {
            source_model = pieces.front().model;
            source_name = w.name;
        } else if (w.kind == WeightKind::Post) {
            source_model = pieces.back().model;
            source_name = w.name;
        } else {
            const int layer = *w.layer_index;
            const auto piece = std::find_if(pieces.rbegin(), pieces.rend(), [&](const Piece& p) { return p.offset <= layer; });
            source_model = piece->model;
            source_name = expand_layer_template(arch.def->layer_templates[w.template_index].name,
                                                piece->start + (layer - piece->offset));
        }
        const auto& ckpt = input(inputs, source_model);
        if (!ckpt.contains(source_name)) {
            if (w.optional) continue;
            throw KeyError(fmt::format("tensor '{}' (for output '{}') is missing from '{}'", source_name, w.name,
                                       source_model));
        }
        const auto& shape = ckpt.record(source_name).shape;
        const auto load = graph.add(TaskKind::LoadTensor, {},
                                    std::make_shared<LoadOp>(input_ptr(inputs, source_model), source_name, std::nullopt),
                                    f32_bytes(shape), w.name);
        emit_chain(graph, load, shape, w.name, out_dtype);
        manifest.tensors.push_back({w.name, shape});
    }

    MergeConfig resolved = config;
    resolved.dtype = out_dtype;
    finish_manifest(manifest, resolved, input(inputs, pieces.front().model),
                    input(inputs, tokenizer_source_ref(config)), options, {});
    manifest.model_config[arch.def->num_layers_key] = total_layers;
    graph.prune();
    graph.validate();
    return plan;
}

ExecutionStats write_merge(const MergePlan& plan, const std::filesystem::path& out_dir, const std::string& recipe_text,
                           const WriteOptions& options) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    // leftovers from an earlier run would shadow or pad the new shard set
    for (const auto& entry : fs::directory_iterator(out_dir)) {
        const auto fname = entry.path().filename().string();
        if (entry.is_regular_file() && (fname == kShardIndexName || (fname.starts_with("model") &&
                                                                      entry.path().extension() == ".safetensors"))) {
            fs::remove(entry.path());
        }
    }

    const auto order = schedule(plan.graph);
    ShardedWriter writer(out_dir, plan.manifest.tensors, plan.manifest.dtype, options.max_shard_bytes,
                         plan.manifest.metadata);
    std::size_t written = 0;
    const std::size_t total = plan.manifest.tensors.size();
    const auto stats = execute(
        plan.graph, order,
        [&](const std::string& name, const Tensor& value) {
            writer.write(name, value);
            ++written;
            if (options.on_output) options.on_output(written, total, name);
        },
        ExecuteOptions{options.threads, options.on_commit});
    writer.finish();

    {
        std::ofstream out(out_dir / kModelConfigName, std::ios::binary | std::ios::trunc);
        out << plan.manifest.model_config.dump(2) << '\n';
        if (!out) throw FormatError("failed to write config.json");
    }
    for (const auto& file : plan.manifest.tokenizer_files) {
        fs::copy_file(file, out_dir / file.filename(), fs::copy_options::overwrite_existing);
    }
    {
        std::ofstream out(out_dir / kRecipeFileName, std::ios::binary | std::ios::trunc);
        out << recipe_text;
        if (!out) throw FormatError("failed to write the recipe copy");
    }
    return stats;
}

} // namespace ckptmerge
