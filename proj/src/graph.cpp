// SPDX-License-Identifier: Apache-2.0
#include "ckptmerge/graph.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "ckptmerge/error.hpp"

namespace ckptmerge {

std::string_view task_kind_name(TaskKind kind) {
    switch (kind) {
    case TaskKind::LoadTensor: return "LoadTensor";
    case TaskKind::MethodApply: return "MethodApply";
    case TaskKind::CastDtype: return "CastDtype";
    case TaskKind::EmitOutput: return "EmitOutput";
    }
    return "?";
}

TaskId TaskGraph::add(TaskKind kind, std::vector<TaskId> inputs, std::shared_ptr<const TaskOp> op,
                      std::uint64_t est_bytes, std::string label) {
    for (auto in : inputs) {
        if (!tasks_.count(in)) throw Error(ErrorKind::Internal, fmt::format("task input {} does not exist", in));
    }
    const TaskId id = next_id_++;
    tasks_.emplace(id, Task{id, kind, std::move(inputs), std::move(op), est_bytes, std::move(label)});
    return id;
}

TaskId TaskGraph::add_output(TaskId input, std::string output_name) {
    const TaskId id = add(TaskKind::EmitOutput, {input}, nullptr, 0, std::move(output_name));
    outputs_.push_back(id);
    return id;
}

void TaskGraph::insert(Task task) {
    next_id_ = std::max(next_id_, task.id + 1);
    const auto id = task.id;
    if (!tasks_.emplace(id, std::move(task)).second) {
        throw Error(ErrorKind::Internal, fmt::format("task id {} inserted twice", id));
    }
}

const Task& TaskGraph::task(TaskId id) const {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) throw Error(ErrorKind::Internal, fmt::format("unknown task id {}", id));
    return it->second;
}

void TaskGraph::prune() {
    std::unordered_set<TaskId> live;
    std::vector<TaskId> stack(outputs_.begin(), outputs_.end());
    while (!stack.empty()) {
        const TaskId id = stack.back();
        stack.pop_back();
        if (!live.insert(id).second) continue;
        for (auto in : task(id).inputs) stack.push_back(in);
    }
    std::erase_if(tasks_, [&](const auto& kv) { return !live.count(kv.first); });
}

void TaskGraph::validate() const {
    for (const auto& [id, t] : tasks_) {
        for (auto in : t.inputs) {
            if (!tasks_.count(in)) throw Error(ErrorKind::Internal, fmt::format("task {} reads missing task {}", id, in));
        }
        if (t.kind != TaskKind::EmitOutput && !t.op) {
            throw Error(ErrorKind::Internal, fmt::format("task {} has no operation", id));
        }
    }
    for (auto out : outputs_) {
        if (task(out).kind != TaskKind::EmitOutput) {
            throw Error(ErrorKind::Internal, fmt::format("output {} is not an EmitOutput task", out));
        }
    }
}

namespace {

std::vector<TaskId> distinct_inputs(const Task& t) {
    std::vector<TaskId> ins = t.inputs;
    std::sort(ins.begin(), ins.end());
    ins.erase(std::unique(ins.begin(), ins.end()), ins.end());
    return ins;
}

// Number of distinct consumer tasks per task.
std::unordered_map<TaskId, std::size_t> consumer_counts(const TaskGraph& graph) {
    std::unordered_map<TaskId, std::size_t> counts;
    for (const auto& [id, t] : graph.tasks()) {
        counts.try_emplace(id, 0);
        for (auto in : distinct_inputs(t)) ++counts[in];
    }
    return counts;
}

class Scheduler {
public:
    explicit Scheduler(const TaskGraph& graph) : graph_(graph), remaining_uses_(consumer_counts(graph)) {
        for (const auto& [id, t] : graph.tasks()) {
            for (auto in : distinct_inputs(t)) consumers_[in].push_back(id);
        }
    }

    std::vector<TaskId> run() {
        for (auto out : graph_.outputs()) {
            if (!done_.count(out)) schedule_set(cone_of(out));
        }
        // anything no output depends on goes last, in id order
        std::vector<TaskId> rest;
        for (const auto& [id, _] : graph_.tasks()) {
            if (!done_.count(id)) rest.push_back(id);
        }
        if (!rest.empty()) schedule_set(rest);
        return std::move(order_);
    }

private:
    std::vector<TaskId> cone_of(TaskId root) {
        std::vector<TaskId> cone;
        std::unordered_set<TaskId> seen;
        std::vector<TaskId> stack{root};
        while (!stack.empty()) {
            const TaskId id = stack.back();
            stack.pop_back();
            if (done_.count(id) || !seen.insert(id).second) continue;
            cone.push_back(id);
            for (auto in : graph_.task(id).inputs) stack.push_back(in);
        }
        std::sort(cone.begin(), cone.end());
        return cone;
    }

    std::uint64_t bytes_released(const Task& t) const {
        std::uint64_t freed = 0;
        for (auto in : distinct_inputs(t)) {
            if (remaining_uses_.at(in) == 1) freed += graph_.task(in).est_bytes;
        }
        return freed;
    }

    void schedule_set(const std::vector<TaskId>& members) {
        const std::unordered_set<TaskId> in_set(members.begin(), members.end());
        std::unordered_map<TaskId, std::size_t> pending;
        std::set<TaskId> ready;
        for (auto id : members) {
            std::size_t n = 0;
            for (auto in : distinct_inputs(graph_.task(id))) {
                if (!done_.count(in)) ++n;
            }
            pending[id] = n;
            if (n == 0) ready.insert(id);
        }

        std::size_t scheduled = 0;
        while (!ready.empty()) {
            TaskId best = *ready.begin();
            std::uint64_t best_freed = bytes_released(graph_.task(best));
            for (auto id : ready) {
                const auto& t = graph_.task(id);
                const auto freed = bytes_released(t);
                const auto& b = graph_.task(best);
                if (freed > best_freed || (freed == best_freed && t.est_bytes < b.est_bytes)) {
                    best = id;
                    best_freed = freed;
                }
            }
            ready.erase(best);
            order_.push_back(best);
            done_.insert(best);
            ++scheduled;
            for (auto in : distinct_inputs(graph_.task(best))) --remaining_uses_[in];
            if (auto it = consumers_.find(best); it != consumers_.end()) {
                for (auto c : it->second) {
                    if (in_set.count(c) && --pending[c] == 0) ready.insert(c);
                }
            }
        }
        if (scheduled != members.size()) {
            std::vector<TaskId> stuck;
            for (auto id : members) {
                if (!done_.count(id)) stuck.push_back(id);
            }
            throw CycleError(fmt::format("task graph has a cycle through tasks {}", fmt::join(stuck, ", ")));
        }
    }

    const TaskGraph& graph_;
    std::unordered_map<TaskId, std::size_t> remaining_uses_;
    std::unordered_map<TaskId, std::vector<TaskId>> consumers_;
    std::unordered_set<TaskId> done_;
    std::vector<TaskId> order_;
};

} // namespace

std::vector<TaskId> schedule(const TaskGraph& graph) {
    for (const auto& [id, t] : graph.tasks()) {
        for (auto in : t.inputs) {
            if (!graph.tasks().count(in)) {
                throw Error(ErrorKind::Internal, fmt::format("task {} reads missing task {}", id, in));
            }
        }
    }
    return Scheduler(graph).run();
}

} // namespace ckptmerge
