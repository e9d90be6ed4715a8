// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/cli.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "ckptmerge/planner.hpp"

#ifndef CKPTMERGE_ARCH_DIR
#define CKPTMERGE_ARCH_DIR "architectures"
#endif

namespace ckptmerge {

int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::DegenerateWeights:
    case ErrorKind::Capacity: return 2;
    case ErrorKind::Format:
    case ErrorKind::Key:
    case ErrorKind::ShapeMismatch:
    case ErrorKind::UnknownArchitecture: return 3;
    case ErrorKind::Cycle:
    case ErrorKind::Internal: return 1;
    }
    return 1;
}

namespace {

std::uint64_t parse_size(const std::string& text) {
    static const std::map<std::string, std::uint64_t> units = {
        {"", 1}, {"B", 1}, {"KB", 1ull << 10}, {"MB", 1ull << 20}, {"GB", 1ull << 30}, {"TB", 1ull << 40},
        {"K", 1ull << 10}, {"M", 1ull << 20}, {"G", 1ull << 30},
    };
    std::uint64_t n = 0;
    const auto* begin = text.data();
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, n);
    if (ec != std::errc() || ptr == begin) throw ConfigError(fmt::format("--max-shard-size: cannot parse '{}'", text));
    std::string suffix(ptr, end);
    for (auto& c : suffix) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    auto it = units.find(suffix);
    if (it == units.end()) throw ConfigError(fmt::format("--max-shard-size: unknown unit '{}'", suffix));
    if (n > UINT64_MAX / it->second) throw ConfigError(fmt::format("--max-shard-size: '{}' is too large", text));
    return n * it->second;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot read recipe '{}'", path));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void print_dry_run(std::ostream& out, const MergePlan& plan) {
    const auto order = schedule(plan.graph);
    std::map<TaskKind, std::size_t> by_kind;
    for (const auto& [_, t] : plan.graph.tasks()) ++by_kind[t.kind];
    out << "tasks: " << plan.graph.size() << '\n';
    for (auto kind : {TaskKind::LoadTensor, TaskKind::MethodApply, TaskKind::CastDtype, TaskKind::EmitOutput}) {
        out << "  " << task_kind_name(kind) << ": " << by_kind[kind] << '\n';
    }
    out << "outputs: " << plan.manifest.tensors.size() << " (" << dtype_name(plan.manifest.dtype) << ")\n";
    out << "schedule:\n";
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& t = plan.graph.task(order[i]);
        out << fmt::format("  {:>6} {:<12} {:>12} {}\n", i, task_kind_name(t.kind), t.est_bytes, t.label);
    }
    out << "predicted peak bytes: " << predict_peak_bytes(plan.graph, order) << '\n';
}

int fail(std::ostream& err, ErrorKind kind, const std::string& detail) {
    std::string line = detail;
    for (auto& c : line) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    err << "ERROR " << error_kind_name(kind) << ": " << line << '\n';
    return exit_code_for(kind);
}

} // namespace

int run_merge(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Merge checkpoints according to a YAML recipe", kToolName};
    app.require_subcommand(1);
    auto* merge = app.add_subcommand("merge", "Run a merge recipe");
    std::string recipe_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    std::string max_shard = "5GB";
    bool dry_run = false;
    bool truncate_vocab = false;
    bool verbose = false;
    std::string arch_dir = CKPTMERGE_ARCH_DIR;
    merge->add_option("recipe", recipe_path, "Recipe YAML")->required();
    merge->add_option("out_dir", out_dir, "Output directory")->required();
    merge->add_option("--seed", seed, "Overrides the recipe seed");
    merge->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1u, 1024u));
    merge->add_option("--max-shard-size", max_shard, "Shard cap in bytes, or with a KB/MB/GB suffix");
    merge->add_flag("--dry-run", dry_run, "Print the plan and write nothing");
    merge->add_flag("--truncate-vocab", truncate_vocab, "Truncate mismatched embedding rows to the minimum");
    merge->add_flag("--verbose", verbose, "Log every task");
    merge->add_option("--arch-dir", arch_dir, "Architecture definition directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        return fail(err, ErrorKind::Config, e.what());
    }

    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(out);
    spdlog::logger log("ckptmerge", sink);
    log.set_pattern("%v");
    log.set_level(verbose ? spdlog::level::debug : spdlog::level::info);

    try {
        const auto max_shard_bytes = parse_size(max_shard);
        const auto recipe_text = read_text(recipe_path);
        const auto config = parse_config(recipe_text);
        const auto registry = load_architecture_defs(arch_dir);
        const auto inputs = open_inputs(config);
        PlanOptions plan_options;
        plan_options.truncate_vocab = truncate_vocab;
        plan_options.seed = seed;
        plan_options.recipe_text = recipe_text;
        const auto plan = plan_merge(config, inputs, registry, plan_options);
        for (const auto& w : plan.manifest.warnings) log.warn("warning: {}", w);

        if (dry_run) {
            print_dry_run(out, plan);
            return 0;
        }

        WriteOptions write_options;
        write_options.threads = threads;
        write_options.max_shard_bytes = max_shard_bytes;
        if (verbose) {
            write_options.on_commit = [&log](const Task& t) {
                log.debug("task {} {} '{}'", t.id, task_kind_name(t.kind), t.label);
            };
        }
        write_options.on_output = [&log](std::size_t i, std::size_t n, const std::string& name) {
            log.info("[{}/{}] {}", i, n, name);
        };
        const auto stats = write_merge(plan, out_dir, recipe_text, write_options);
        log.info("wrote {} tensors to {} (peak live bytes {})", plan.manifest.tensors.size(), out_dir,
                 stats.peak_live_bytes);
        log.flush();
        return 0;
    } catch (const Error& e) {
        log.flush();
        return fail(err, e.kind(), e.what());
    } catch (const std::exception& e) {
        log.flush();
        return fail(err, ErrorKind::Internal, e.what());
    }
}

} // namespace ckptmerge
