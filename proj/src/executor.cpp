// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <condition_variable>
#include <deque>
#include <future>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>

#include "ckptmerge/error.hpp"
#include "ckptmerge/graph.hpp"

namespace ckptmerge {

namespace {

class WorkerPool {
public:
    explicit WorkerPool(unsigned threads) {
        for (unsigned i = 0; i < threads; ++i) workers_.emplace_back([this] { loop(); });
    }
    ~WorkerPool() {
        {
            std::lock_guard lock(mutex_);
            stopping_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }
    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    std::future<Value> submit(std::function<Value()> fn) {
        std::packaged_task<Value()> task(std::move(fn));
        auto future = task.get_future();
        {
            std::lock_guard lock(mutex_);
            queue_.push_back(std::move(task));
        }
        cv_.notify_one();
        return future;
    }

private:
    void loop() {
        for (;;) {
            std::packaged_task<Value()> task;
            {
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
                if (queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop_front();
            }
            task();
        }
    }

    std::vector<std::thread> workers_;
    std::deque<std::packaged_task<Value()>> queue_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool stopping_ = false;
};

enum class SlotState { Pending, Live, Evicted };

struct Slot {
    SlotState state = SlotState::Pending;
    Value value;
    std::size_t remaining_consumers = 0;
    std::uint64_t bytes = 0;
};

std::vector<TaskId> distinct(std::vector<TaskId> ids) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

// Reference counts and live-byte accounting shared by execute() and
// predict_peak_bytes(), so the prediction mirrors what execution measures.
class LiveSet {
public:
    LiveSet(const TaskGraph& graph, std::span<const TaskId> order) : graph_(graph) {
        std::unordered_map<TaskId, bool> seen;
        for (auto id : order) {
            if (!graph.tasks().count(id)) throw Error(ErrorKind::Internal, fmt::format("schedule names unknown task {}", id));
            if (seen[id]) throw Error(ErrorKind::Internal, fmt::format("task {} scheduled twice", id));
            for (auto in : graph.task(id).inputs) {
                if (!seen[in]) {
                    throw Error(ErrorKind::Internal, fmt::format("schedule runs task {} before its input {}", id, in));
                }
            }
            seen[id] = true;
            slots_[id];
            for (auto in : distinct(graph.task(id).inputs)) ++slots_[in].remaining_consumers;
        }
        if (seen.size() != graph.size()) throw Error(ErrorKind::Internal, "schedule does not cover every task");
    }

    /// Reads an input. Evicted slots are poisoned: touching one is a bug.
    const Value& read(TaskId id) const {
        const auto& slot = slots_.at(id);
        if (slot.state == SlotState::Evicted) {
            throw Error(ErrorKind::Internal, fmt::format("task {} value read after eviction", id));
        }
        if (slot.state != SlotState::Live) throw Error(ErrorKind::Internal, fmt::format("task {} value not ready", id));
        return slot.value;
    }

    bool ready(TaskId id) const { return slots_.at(id).state == SlotState::Live; }

    /// Records the task's output, updates the peak, then releases inputs
    /// whose last consumer this was. Values released by an EmitOutput task
    /// were handed to the sink and do not count as evictions.
    void commit(TaskId id, Value value, std::uint64_t bytes) {
        const bool emitted = graph_.task(id).kind == TaskKind::EmitOutput;
        auto& slot = slots_.at(id);
        slot.state = SlotState::Live;
        slot.value = std::move(value);
        slot.bytes = bytes;
        live_ += bytes;
        peak_ = std::max(peak_, live_);
        for (auto in : distinct(graph_.task(id).inputs)) {
            auto& s = slots_.at(in);
            if (--s.remaining_consumers == 0) evict(s, !emitted);
        }
        if (slot.remaining_consumers == 0) evict(slot, true);
    }

    std::uint64_t peak() const { return peak_; }
    std::uint64_t evictions() const { return evictions_; }

private:
    void evict(Slot& slot, bool count) {
        if (slot.state != SlotState::Live) return;
        live_ -= slot.bytes;
        slot.value.reset();
        slot.state = SlotState::Evicted;
        if (count && slot.bytes > 0) ++evictions_;
    }

    const TaskGraph& graph_;
    std::unordered_map<TaskId, Slot> slots_;
    std::uint64_t live_ = 0;
    std::uint64_t peak_ = 0;
    std::uint64_t evictions_ = 0;
};

Value run_task(const Task& task, std::vector<Value> inputs) {
    try {
        Value out = task.op->run(inputs);
        if (!out) throw Error(ErrorKind::Internal, "task produced no value");
        return out;
    } catch (const Error& e) {
        throw e.with_context(fmt::format("task {} ({} for '{}')", task.id, task_kind_name(task.kind), task.label));
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Internal,
                    fmt::format("task {} ({} for '{}'): {}", task.id, task_kind_name(task.kind), task.label, e.what()));
    }
}

} // namespace

std::uint64_t predict_peak_bytes(const TaskGraph& graph, std::span<const TaskId> order) {
    LiveSet live(graph, order);
    for (auto id : order) {
        const auto& t = graph.task(id);
        live.commit(id, nullptr, t.kind == TaskKind::EmitOutput ? 0 : t.est_bytes);
    }
    return live.peak();
}

ExecutionStats execute(const TaskGraph& graph, std::span<const TaskId> order, const OutputSink& sink,
                       const ExecuteOptions& options) {
    LiveSet live(graph, order);
    ExecutionStats stats;
    const unsigned threads = std::max(1u, options.threads);
    std::unique_ptr<WorkerPool> pool;
    if (threads > 1) pool = std::make_unique<WorkerPool>(threads);

    std::vector<std::future<Value>> running(order.size());
    std::size_t next_start = 0;

    auto gather = [&](const Task& t) {
        std::vector<Value> ins;
        ins.reserve(t.inputs.size());
        for (auto in : t.inputs) ins.push_back(live.read(in));
        return ins;
    };
    auto can_start = [&](const Task& t) {
        return std::all_of(t.inputs.begin(), t.inputs.end(), [&](TaskId in) { return live.ready(in); });
    };

    try {
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            if (pool) {
                // run ahead while inputs are committed and the window has room
                while (next_start < order.size() && next_start < pos + threads) {
                    const auto& t = graph.task(order[next_start]);
                    if (t.kind == TaskKind::EmitOutput) {
                        ++next_start;
                        continue;
                    }
                    if (!can_start(t)) break;
                    running[next_start] = pool->submit([&t, ins = gather(t)]() mutable { return run_task(t, std::move(ins)); });
                    ++next_start;
                }
            }

            const auto& task = graph.task(order[pos]);
            if (task.kind == TaskKind::EmitOutput) {
                const auto& value = live.read(task.inputs.at(0));
                try {
                    sink(task.label, *value);
                } catch (const Error& e) {
                    throw e.with_context(fmt::format("writing output '{}'", task.label));
                }
                live.commit(task.id, nullptr, 0);
            } else {
                Value value = running[pos].valid() ? running[pos].get() : run_task(task, gather(task));
                const auto bytes = value->byte_size();
                live.commit(task.id, std::move(value), bytes);
            }
            next_start = std::max(next_start, pos + 1);
            ++stats.tasks_executed;
            if (options.on_commit) options.on_commit(task);
        }
    } catch (...) {
        // let in-flight work finish before the pool and graph go away
        for (auto& f : running) {
            if (f.valid()) f.wait();
        }
        throw;
    }

    stats.peak_live_bytes = live.peak();
    stats.evictions = live.evictions();
    return stats;
}

} // namespace ckptmerge
