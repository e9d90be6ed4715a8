// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sstream>
#include <sys/wait.h>

#include "ckptmerge/cli.hpp"
#include "support.hpp"

using namespace ckptmerge;
using testsupport::LlamaDims;
using testsupport::TempDir;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_merge(args, out, err);
    return {code, out.str(), err.str()};
}

struct Fixture {
    TempDir dir;
    fs::path recipe;

    explicit Fixture(const std::string& extra_model = "") {
        std::mt19937_64 rng(8);
        const LlamaDims dims{2, 8, 12, 16, true};
        for (const char* name : {"a", "b"}) {
            testsupport::write_model(dir / name, testsupport::llama_tensors(dims, rng), testsupport::llama_config(dims));
        }
        recipe = dir / "recipe.yaml";
        testsupport::write_text(recipe, "merge_method: linear\nmodels:\n  - model: " + (dir / "a").string() +
                                            "\n  - model: " + (extra_model.empty() ? (dir / "b").string() : extra_model) +
                                            "\n");
    }
};

// Shard file per tensor for the fixture layout, packed greedily by F32 data bytes.
nlohmann::json greedy_shards(std::uint64_t cap) {
    const auto layout = testsupport::llama_layout({2, 8, 12, 16, true});
    std::vector<std::size_t> shard;
    std::uint64_t used = 0;
    std::size_t current = 0;
    for (const auto& [name, shape] : layout) {
        std::uint64_t b = 4;
        for (auto d : shape) b *= d;
        if (used > 0 && used + b > cap) {
            ++current;
            used = 0;
        }
        used += b;
        shard.push_back(current);
    }
    const auto total = current + 1;
    nlohmann::json out = nlohmann::json::object();
    for (std::size_t i = 0; i < layout.size(); ++i) {
        char file[64];
        std::snprintf(file, sizeof file, "model-%05zu-of-%05zu.safetensors", shard[i] + 1, total);
        out[layout[i].first] = file;
    }
    return out;
}

} // namespace

TEST_CASE("a valid linear recipe writes shards, index and config") {
    Fixture f;
    const auto out = f.dir / "out";
    const auto r = run({"merge", f.recipe.string(), out.string(), "--max-shard-size", "1KB"});
    CHECK(r.code == 0);
    CHECK(r.err.empty());
    REQUIRE(fs::exists(out / "model.safetensors.index.json"));
    const auto map = nlohmann::json::parse(testsupport::read_text(out / "model.safetensors.index.json"))["weight_map"];
    const auto expected = greedy_shards(1024);
    CHECK(map == expected);
    for (const auto& [name, file] : map.items()) CHECK(fs::exists(out / file.get<std::string>()));
    CHECK(fs::exists(out / "config.json"));
    CHECK(fs::exists(out / "tokenizer.json"));
    CHECK(fs::exists(out / "mergekit_recipe.yaml"));
    // progress names every output tensor
    CHECK(r.out.find("model.layers.1.mlp.down_proj.weight") != std::string::npos);
    CHECK(r.out.find("[21/21]") != std::string::npos);
    CHECK(open_checkpoint(out).records().size() == 21);
}

TEST_CASE("dry run reports and writes nothing") {
    Fixture f;
    const auto out = f.dir / "out";
    auto r = run({"merge", f.recipe.string(), out.string(), "--dry-run"});
    CHECK(r.code == 0);
    CHECK_FALSE(fs::exists(out));
    CHECK(r.out.find("tasks: 84") != std::string::npos);
    CHECK(r.out.find("schedule:") != std::string::npos);
    CHECK(r.out.find("predicted peak bytes:") != std::string::npos);

    fs::create_directories(out);
    testsupport::write_text(out / "keep.txt", "x");
    const auto before = testsupport::directory_contents(out);
    r = run({"merge", f.recipe.string(), out.string(), "--dry-run"});
    CHECK(r.code == 0);
    CHECK(testsupport::directory_contents(out) == before);
}

TEST_CASE("missing model directory exits 2 with a ConfigError line") {
    Fixture f((fs::path("/nonexistent") / "model").string());
    const auto r = run({"merge", f.recipe.string(), (f.dir / "out").string()});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("ERROR ConfigError: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("exit codes by error kind") {
    CHECK(exit_code_for(ErrorKind::Config) == 2);
    CHECK(exit_code_for(ErrorKind::Capacity) == 2);
    CHECK(exit_code_for(ErrorKind::DegenerateWeights) == 2);
    CHECK(exit_code_for(ErrorKind::Format) == 3);
    CHECK(exit_code_for(ErrorKind::Key) == 3);
    CHECK(exit_code_for(ErrorKind::ShapeMismatch) == 3);
    CHECK(exit_code_for(ErrorKind::UnknownArchitecture) == 3);
    CHECK(exit_code_for(ErrorKind::Internal) == 1);
    CHECK(exit_code_for(ErrorKind::Cycle) == 1);

    TempDir dir;
    std::mt19937_64 rng(1);
    testsupport::write_model(dir / "a", testsupport::llama_tensors({2, 8, 12, 16, true}, rng),
                             testsupport::llama_config({2, 8, 12, 16, true}));
    testsupport::write_model(dir / "w", testsupport::llama_tensors({2, 6, 12, 16, true}, rng),
                             testsupport::llama_config({2, 6, 12, 16, true}));
    const auto recipe = dir / "r.yaml";
    testsupport::write_text(recipe, "merge_method: linear\nmodels: [{model: " + (dir / "a").string() +
                                        "}, {model: " + (dir / "w").string() + "}]\n");
    auto r = run({"merge", recipe.string(), (dir / "out").string()});
    CHECK(r.code == 3);
    CHECK(r.err.rfind("ERROR ShapeMismatch: ", 0) == 0);

    testsupport::write_text(recipe, "merge_method: linear\nmodels: [{model: " + (dir / "a").string() +
                                        ", parameters: {weight: 0}}]\n");
    r = run({"merge", recipe.string(), (dir / "out").string()});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("ERROR DegenerateWeights: ", 0) == 0);

    testsupport::write_text(recipe, "merge_method: linear\nmodels: [{model: " + (dir / "a").string() + "}]\n");
    r = run({"merge", recipe.string(), (dir / "out").string(), "--max-shard-size", "16B"});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("ERROR CapacityError: ", 0) == 0);
}

TEST_CASE("usage errors exit 2") {
    Fixture f;
    CHECK(run({}).code == 2);
    CHECK(run({"merge", f.recipe.string()}).code == 2);
    CHECK(run({"merge", f.recipe.string(), "out", "--bogus"}).code == 2);
    CHECK(run({"merge", f.recipe.string(), "out", "--threads", "0"}).code == 2);
    const auto r = run({"merge", f.recipe.string(), (f.dir / "o").string(), "--max-shard-size", "5XB"});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("ERROR ConfigError: ", 0) == 0);
    CHECK(run({"merge", (f.dir / "none.yaml").string(), "out"}).code == 2);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("size suffixes are powers of 1024") {
    Fixture f;
    auto shards = [&](const std::string& size, const std::string& sub) {
        const auto out = f.dir / sub;
        REQUIRE(run({"merge", f.recipe.string(), out.string(), "--max-shard-size", size}).code == 0);
        return nlohmann::json::parse(testsupport::read_text(out / "model.safetensors.index.json"))["weight_map"];
    };
    const auto kb = shards("2KB", "kb");
    const auto bytes = shards("2048", "bytes");
    const auto lower = shards("2kb", "lower");
    CHECK(kb == greedy_shards(2048));
    CHECK(bytes == kb);
    CHECK(lower == kb);
    CHECK(shards("1056B", "suffix_b") == greedy_shards(1056));
    // one shard needs no index
    REQUIRE(run({"merge", f.recipe.string(), (f.dir / "mega").string(), "--max-shard-size", "3M"}).code == 0);
    CHECK(fs::exists(f.dir / "mega" / "model.safetensors"));
    CHECK_FALSE(fs::exists(f.dir / "mega" / "model.safetensors.index.json"));
    CHECK(greedy_shards(1056) != greedy_shards(1000));
}

TEST_CASE("thread count does not change the bytes") {
    Fixture f;
    REQUIRE(run({"merge", f.recipe.string(), (f.dir / "t1").string(), "--threads", "1"}).code == 0);
    REQUIRE(run({"merge", f.recipe.string(), (f.dir / "t4").string(), "--threads", "4"}).code == 0);
    CHECK(testsupport::directory_contents(f.dir / "t1") == testsupport::directory_contents(f.dir / "t4"));
}

TEST_CASE("verbose logs task events") {
    Fixture f;
    const auto quiet = run({"merge", f.recipe.string(), (f.dir / "q").string()});
    const auto loud = run({"merge", f.recipe.string(), (f.dir / "v").string(), "--verbose"});
    CHECK(quiet.out.find("LoadTensor") == std::string::npos);
    CHECK(loud.out.find("LoadTensor") != std::string::npos);
    CHECK(loud.out.find("MethodApply") != std::string::npos);
}

TEST_CASE("installed binary maps errors to exit status") {
    Fixture f("/nonexistent/model");
    const std::string cmd = std::string(CKPTMERGE_TEST_CLI) + " merge " + f.recipe.string() + " " +
                            (f.dir / "out").string() + " 2> " + (f.dir / "err.txt").string();
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 2);
    CHECK(testsupport::read_text(f.dir / "err.txt").rfind("ERROR ConfigError: ", 0) == 0);
}
