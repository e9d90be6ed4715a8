// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <atomic>
#include <map>
#include <random>
#include <set>

#include "ckptmerge/error.hpp"
#include "ckptmerge/graph.hpp"

using namespace ckptmerge;

namespace {

class ConstOp final : public TaskOp {
public:
    ConstOp(std::size_t n, float v) : n_(n), v_(v) {}
    Value run(std::span<const Value>) const override {
        return std::make_shared<const Tensor>(Shape{n_}, std::vector<float>(n_, v_));
    }

private:
    std::size_t n_;
    float v_;
};

// Elementwise sum of the inputs, plus one.
class SumOp final : public TaskOp {
public:
    Value run(std::span<const Value> inputs) const override {
        std::vector<float> out(inputs[0]->size(), 1.0f);
        for (const auto& in : inputs) {
            for (std::size_t i = 0; i < std::min(out.size(), in->size()); ++i) out[i] += (*in)[i];
        }
        return std::make_shared<const Tensor>(inputs[0]->shape(), std::move(out));
    }
};

class FailOp final : public TaskOp {
public:
    Value run(std::span<const Value>) const override { throw KeyError("tensor 'gone' not found"); }
};

std::uint64_t bytes(std::size_t n) { return n * 4; }

TaskId load(TaskGraph& g, std::size_t n, float v, const std::string& label) {
    return g.add(TaskKind::LoadTensor, {}, std::make_shared<ConstOp>(n, v), bytes(n), label);
}

TaskId apply(TaskGraph& g, std::vector<TaskId> ins, std::size_t n, const std::string& label) {
    return g.add(TaskKind::MethodApply, std::move(ins), std::make_shared<SumOp>(), bytes(n), label);
}

// k loads feeding one apply per output, like a per-tensor merge cone.
TaskGraph merge_like(std::size_t outputs, std::size_t k, std::size_t n) {
    TaskGraph g;
    for (std::size_t o = 0; o < outputs; ++o) {
        const auto name = "t" + std::to_string(o);
        std::vector<TaskId> ins;
        for (std::size_t m = 0; m < k; ++m) ins.push_back(load(g, n, float(o * 10 + m), name));
        g.add_output(apply(g, ins, n, name), name);
    }
    return g;
}

// Random two-output graph with shared loads, interleaved ids.
TaskGraph random_two_cone(std::mt19937_64& rng) {
    TaskGraph g;
    std::vector<TaskId> pool_a, pool_b;
    const int steps = 4 + static_cast<int>(rng() % 12);
    for (int s = 0; s < steps; ++s) {
        const bool for_a = rng() % 2;
        auto& pool = for_a ? pool_a : pool_b;
        const std::string label = for_a ? "A" : "B";
        const std::size_t n = 1 + rng() % 50;
        if (pool.empty() || rng() % 3 == 0) {
            pool.push_back(load(g, n, float(s), label));
        } else {
            std::vector<TaskId> ins;
            for (int j = 0, k = 1 + static_cast<int>(rng() % 3); j < k; ++j) ins.push_back(pool[rng() % pool.size()]);
            pool.push_back(apply(g, ins, 1, label)); // SumOp keeps the first input's size; est is nominal
        }
    }
    if (pool_a.empty()) pool_a.push_back(load(g, 3, 1, "A"));
    if (pool_b.empty()) pool_b.push_back(load(g, 3, 2, "B"));
    g.add_output(apply(g, pool_a, 1, "A"), "A");
    g.add_output(apply(g, pool_b, 1, "B"), "B");
    return g;
}

bool valid_order(const TaskGraph& g, const std::vector<TaskId>& order) {
    std::set<TaskId> seen;
    for (auto id : order) {
        for (auto in : g.task(id).inputs) {
            if (!seen.count(in)) return false;
        }
        if (!seen.insert(id).second) return false;
    }
    return seen.size() == g.size();
}

std::map<std::string, std::vector<float>> run(const TaskGraph& g, unsigned threads, ExecutionStats* stats = nullptr) {
    std::map<std::string, std::vector<float>> out;
    const auto order = schedule(g);
    const auto s = execute(
        g, order,
        [&](const std::string& name, const Tensor& t) { out[name] = {t.values().begin(), t.values().end()}; },
        {threads, {}});
    if (stats) *stats = s;
    return out;
}

} // namespace

TEST_CASE("chain schedules in its only order with one eviction") {
    TaskGraph g;
    const auto l = load(g, 4, 1, "w");
    const auto a = apply(g, {l}, 4, "w");
    const auto e = g.add_output(a, "w");
    const auto order = schedule(g);
    CHECK(order == std::vector<TaskId>{l, a, e});

    ExecutionStats stats;
    const auto out = run(g, 1, &stats);
    CHECK(out.at("w") == std::vector<float>(4, 2.0f));
    CHECK(stats.evictions == 1);
    CHECK(stats.tasks_executed == 3);
    CHECK(stats.peak_live_bytes == 32);
}

TEST_CASE("diamond loads come first, lower id first") {
    TaskGraph g;
    const auto l0 = load(g, 2, 1, "d");
    const auto l1 = load(g, 2, 2, "d");
    const auto a = apply(g, {l0, l1}, 2, "d");
    const auto e = g.add_output(a, "d");
    CHECK(schedule(g) == std::vector<TaskId>{l0, l1, a, e});
    CHECK(run(g, 1).at("d") == std::vector<float>{4, 4});
}

TEST_CASE("scheduler prefers tasks that free the most bytes") {
    TaskGraph g;
    const auto big = load(g, 100, 1, "x");
    const auto small = load(g, 2, 1, "x");
    // large output, but running it frees `small`
    const auto use_small = g.add(TaskKind::MethodApply, {small}, std::make_shared<SumOp>(), 4000, "x");
    const auto out = apply(g, {big, use_small}, 1, "x");
    g.add_output(out, "x");
    const auto order = schedule(g);
    const auto pos = [&](TaskId id) { return std::find(order.begin(), order.end(), id) - order.begin(); };
    // neither load frees anything, so the smaller one goes first; then freeing
    // bytes outranks the smaller estimate of `big`
    CHECK(pos(small) == 0);
    CHECK(pos(use_small) == 1);
    CHECK(pos(big) == 2);
    CHECK(pos(out) == 3);
}

TEST_CASE("two cones are grouped output-major") {
    std::mt19937_64 rng(77);
    for (int round = 0; round < 300; ++round) {
        const auto g = random_two_cone(rng);
        const auto order = schedule(g);
        REQUIRE(valid_order(g, order));
        // all of A's cone precedes every task belonging only to B
        const auto emit_a = g.outputs()[0];
        std::set<TaskId> cone_a;
        std::vector<TaskId> stack{emit_a};
        while (!stack.empty()) {
            const auto id = stack.back();
            stack.pop_back();
            if (!cone_a.insert(id).second) continue;
            for (auto in : g.task(id).inputs) stack.push_back(in);
        }
        const auto last_a = std::find(order.begin(), order.end(), emit_a) - order.begin();
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (!cone_a.count(order[i])) CHECK(static_cast<std::ptrdiff_t>(i) > last_a);
        }
        CHECK(schedule(g) == order);
    }
}

TEST_CASE("cycles are reported") {
    TaskGraph g;
    g.insert(Task{0, TaskKind::MethodApply, {1}, std::make_shared<SumOp>(), 4, "c"});
    g.insert(Task{1, TaskKind::MethodApply, {0}, std::make_shared<SumOp>(), 4, "c"});
    g.insert(Task{2, TaskKind::EmitOutput, {1}, nullptr, 0, "c"});
    g.set_outputs({2});
    CHECK_THROWS_AS(schedule(g), CycleError);

    TaskGraph self;
    self.insert(Task{0, TaskKind::MethodApply, {0}, std::make_shared<SumOp>(), 4, "s"});
    self.insert(Task{1, TaskKind::EmitOutput, {0}, nullptr, 0, "s"});
    self.set_outputs({1});
    CHECK_THROWS_AS(schedule(self), CycleError);
}

TEST_CASE("prune drops tasks no output needs") {
    TaskGraph g;
    const auto used = load(g, 2, 1, "u");
    load(g, 2, 1, "dead");
    g.add_output(used, "u");
    CHECK(g.size() == 3);
    g.prune();
    CHECK(g.size() == 2);
    CHECK_NOTHROW(g.validate());
    CHECK_THROWS(g.add(TaskKind::MethodApply, {999}, std::make_shared<SumOp>(), 4, "x"));
}

TEST_CASE("working set stays within (k+1) tensors for merge cones") {
    for (std::size_t k : {1u, 2u, 3u, 4u}) {
        const std::size_t n = 256;
        const auto g = merge_like(10, k, n);
        ExecutionStats stats;
        run(g, 1, &stats);
        CHECK(stats.peak_live_bytes <= (k + 1) * bytes(n));
        CHECK(stats.peak_live_bytes >= bytes(n));
        CHECK(predict_peak_bytes(g, schedule(g)) == stats.peak_live_bytes);
    }
}

TEST_CASE("one and many threads agree") {
    std::mt19937_64 rng(5);
    for (int round = 0; round < 50; ++round) {
        const auto g = round % 2 ? merge_like(1 + rng() % 20, 1 + rng() % 4, 1 + rng() % 100) : random_two_cone(rng);
        ExecutionStats s1, s8;
        const auto a = run(g, 1, &s1);
        const auto b = run(g, 8, &s8);
        CHECK(a == b);
        CHECK(s1.peak_live_bytes == s8.peak_live_bytes);
        CHECK(s1.evictions == s8.evictions);
        CHECK(s1.tasks_executed == s8.tasks_executed);
    }
}

TEST_CASE("outputs arrive in output order") {
    const auto g = merge_like(7, 2, 3);
    std::vector<std::string> names;
    execute(g, schedule(g), [&](const std::string& n, const Tensor&) { names.push_back(n); }, {4, {}});
    CHECK(names == std::vector<std::string>{"t0", "t1", "t2", "t3", "t4", "t5", "t6"});
}

TEST_CASE("invalid schedules are rejected before anything runs") {
    TaskGraph g;
    const auto l = load(g, 2, 1, "p");
    const auto a = apply(g, {l}, 2, "p");
    const auto b = apply(g, {l}, 2, "p");
    g.add_output(a, "p");
    g.add_output(b, "q");
    auto order = schedule(g);
    // a schedule that lists `b` twice is rejected up front
    auto doubled = order;
    doubled.push_back(b);
    CHECK_THROWS_AS(execute(g, doubled, [](const std::string&, const Tensor&) {}), Error);
    // a schedule placing a consumer before its producer is rejected too
    std::vector<TaskId> backwards(order.rbegin(), order.rend());
    CHECK_THROWS_AS(execute(g, backwards, [](const std::string&, const Tensor&) {}), Error);

    CHECK_NOTHROW(execute(g, order, [](const std::string&, const Tensor&) {}));
}

TEST_CASE("task failures carry the task and its label") {
    TaskGraph g;
    const auto l = load(g, 2, 1, "ok");
    const auto bad = g.add(TaskKind::LoadTensor, {}, std::make_shared<FailOp>(), 8, "model.norm.weight");
    g.add_output(apply(g, {l, bad}, 2, "model.norm.weight"), "model.norm.weight");
    for (unsigned threads : {1u, 4u}) {
        try {
            execute(g, schedule(g), [](const std::string&, const Tensor&) {}, {threads, {}});
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Key);
            const std::string msg = e.what();
            CHECK(msg.find("model.norm.weight") != std::string::npos);
            CHECK(msg.find("task " + std::to_string(bad)) != std::string::npos);
        }
    }
}
