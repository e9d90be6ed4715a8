// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ckptmerge/tensor.hpp"

namespace ckptmerge {

using TaskId = std::uint64_t;

enum class TaskKind { LoadTensor, MethodApply, CastDtype, EmitOutput };

std::string_view task_kind_name(TaskKind kind);

/// Values flowing between tasks. Shared and immutable, so a worker can hold
/// one after the executor has dropped its own reference.
using Value = std::shared_ptr<const Tensor>;

/// The computation behind a task. Must be pure: same inputs, same output.
class TaskOp {
public:
    virtual ~TaskOp() = default;
    virtual Value run(std::span<const Value> inputs) const = 0;
};

struct Task {
    TaskId id = 0;
    TaskKind kind = TaskKind::LoadTensor;
    std::vector<TaskId> inputs;
    std::shared_ptr<const TaskOp> op; // null for EmitOutput
    std::uint64_t est_bytes = 0;      // predicted size of the output value
    std::string label;                // output tensor the task works towards
};

class TaskGraph {
public:
    /// Appends a task whose inputs must already exist. Returns its id.
    TaskId add(TaskKind kind, std::vector<TaskId> inputs, std::shared_ptr<const TaskOp> op, std::uint64_t est_bytes,
               std::string label);
    /// Appends an EmitOutput task forwarding `input` under `output_name` and
    /// registers it as the next output.
    TaskId add_output(TaskId input, std::string output_name);

    /// Inserts a task verbatim. Inputs are not checked, which allows building
    /// malformed graphs in tests; validate() or schedule() will object.
    void insert(Task task);
    void set_outputs(std::vector<TaskId> outputs) { outputs_ = std::move(outputs); }

    /// Drops tasks no output depends on.
    void prune();
    /// Throws Error(Internal) on dangling inputs or a non-Emit output.
    void validate() const;

    const std::map<TaskId, Task>& tasks() const noexcept { return tasks_; }
    const Task& task(TaskId id) const;
    const std::vector<TaskId>& outputs() const noexcept { return outputs_; }
    std::size_t size() const noexcept { return tasks_.size(); }

private:
    std::map<TaskId, Task> tasks_;
    std::vector<TaskId> outputs_;
    TaskId next_id_ = 0;
};

/// Output-major topological order. Outputs are completed one at a time in
/// output order; inside each output's dependency cone the next task is the
/// ready one that frees the most input bytes, then the smaller est_bytes, then
/// the lower id. Throws CycleError.
std::vector<TaskId> schedule(const TaskGraph& graph);

struct ExecutionStats {
    std::uint64_t peak_live_bytes = 0;
    std::uint64_t tasks_executed = 0;
    std::uint64_t evictions = 0;
};

/// Peak of the summed est_bytes of live values along `order`, using the same
/// accounting as execute().
std::uint64_t predict_peak_bytes(const TaskGraph& graph, std::span<const TaskId> order);

using OutputSink = std::function<void(const std::string& name, const Tensor& value)>;

struct ExecuteOptions {
    unsigned threads = 1;
    /// Called after each task commits, in schedule order.
    std::function<void(const Task&)> on_commit;
};

/// Runs every task once in `order`. A value is dropped as soon as its last
/// consumer has committed; EmitOutput tasks hand their input to `sink` in
/// schedule order. With several threads, ready tasks run ahead on a pool but
/// commits (and therefore evictions and sink calls) stay in schedule order.
ExecutionStats execute(const TaskGraph& graph, std::span<const TaskId> order, const OutputSink& sink,
                       const ExecuteOptions& options = {});

} // namespace ckptmerge
