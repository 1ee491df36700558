#pragma once

#include <ucontext.h>

#include <chrono>
#include <condition_variable>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>
#include <vector>

#include "rtx/fabric.hpp"

namespace rtx {

// ---------------------------------------------------------------------------
// Deterministic single-scheduler executor. Each simulated client runs on a
// stackful fiber; every fabric micro-op is a yield point, so (seed, plan,
// program) fully determines the interleaving, the simulated clock and the
// final memory image. Small scenarios can be enumerated exhaustively.
// ---------------------------------------------------------------------------

class SimExecutor : public Executor {
public:
    explicit SimExecutor(uint64_t seed = 1) : rng_(seed) {}

    void spawn(ClientId c, std::function<void()> fn) {
        if (fibers_.size() <= c) fibers_.resize(c + 1);
        auto& f = fibers_[c];
        if (f && !f->done) throw std::logic_error("client fiber already active");
        f = std::make_unique<Fiber>();
        f->self = this;
        f->client = c;
        f->fn = std::move(fn);
        f->stack.reset(new char[kStackSize]);
        getcontext(&f->ctx);
        f->ctx.uc_stack.ss_sp = f->stack.get();
        f->ctx.uc_stack.ss_size = kStackSize;
        f->ctx.uc_link = nullptr;
        makecontext(&f->ctx, reinterpret_cast<void (*)()>(&SimExecutor::trampoline), 2,
                    unsigned(reinterpret_cast<uintptr_t>(f.get()) >> 32),
                    unsigned(reinterpret_cast<uintptr_t>(f.get()) & 0xffffffffu));
        f->started = false;
        f->done = false;
    }

    // Runs all fibers to completion under a seeded random schedule.
    void run() {
        run_with_chooser([this](size_t n) { return rng_() % n; });
    }

    // Runs following a fixed choice sequence, then first-runnable after the
    // prefix ends; records the branching factor at each step. Used by the
    // exhaustive enumerator.
    std::vector<size_t> run_prefix(const std::vector<size_t>& prefix) {
        std::vector<size_t> fanout;
        size_t depth = 0;
        run_with_chooser([&](size_t n) {
            fanout.push_back(n);
            size_t pick = depth < prefix.size() ? prefix[depth] : 0;
            depth++;
            return pick < n ? pick : n - 1;
        });
        return fanout;
    }

    // Executor interface ------------------------------------------------------
    // Ops issued outside any fiber (setup / bulk load from the calling thread)
    // run sequentially: no yield, sleeps just advance the clock.

    void step_point(ClientId) override {
        if (current_) yield_to_scheduler(current_);
    }

    uint64_t now_us() const override { return now_us_; }
    void advance_us(uint64_t us) override { now_us_ += us; }

    void sleep_us(ClientId, uint64_t us) override {
        if (!current_) {
            now_us_ += us;
            return;
        }
        Fiber* f = current_;
        f->wake_at_us = now_us_ + us;
        f->blocked = true;
        yield_to_scheduler(f);
    }

private:
    static constexpr size_t kStackSize = 256 * 1024;

    struct Fiber {
        SimExecutor* self = nullptr;
        ClientId client = 0;
        std::function<void()> fn;
        std::unique_ptr<char[]> stack;
        ucontext_t ctx{};
        bool started = false;
        bool done = true;
        bool blocked = false;
        uint64_t wake_at_us = 0;
        std::exception_ptr error;
    };

    static void trampoline(unsigned hi, unsigned lo) {
        auto* f = reinterpret_cast<Fiber*>((uintptr_t(hi) << 32) | uintptr_t(lo));
        try {
            f->fn();
        } catch (const ClientKilled&) {
            // killed clients just stop issuing ops
        } catch (...) {
            f->error = std::current_exception();
        }
        f->done = true;
        swapcontext(&f->ctx, &f->self->sched_ctx_);
    }

    void yield_to_scheduler(Fiber* f) {
        current_ = nullptr;
        swapcontext(&f->ctx, &sched_ctx_);
    }

    void resume(Fiber* f) {
        f->started = true;
        current_ = f;
        swapcontext(&sched_ctx_, &f->ctx);
        current_ = nullptr;
        if (f->error) {
            auto e = f->error;
            f->error = nullptr;
            f->done = true;
            std::rethrow_exception(e);
        }
    }

    template <typename Chooser>
    void run_with_chooser(Chooser&& choose) {
        for (;;) {
            runnable_.clear();
            uint64_t min_wake = UINT64_MAX;
            bool any_alive = false;
            for (auto& up : fibers_) {
                Fiber* f = up.get();
                if (!f || f->done) continue;
                any_alive = true;
                if (f->blocked) {
                    if (f->wake_at_us <= now_us_) {
                        f->blocked = false;
                        runnable_.push_back(f);
                    } else {
                        min_wake = std::min(min_wake, f->wake_at_us);
                    }
                } else {
                    runnable_.push_back(f);
                }
            }
            if (!any_alive) return;
            if (runnable_.empty()) {
                if (min_wake == UINT64_MAX)
                    throw std::logic_error("simulation deadlock: all fibers blocked forever");
                now_us_ = min_wake;
                continue;
            }
            size_t pick = runnable_.size() == 1 ? 0 : choose(runnable_.size());
            resume(runnable_[pick]);
        }
    }

    std::vector<std::unique_ptr<Fiber>> fibers_;
    std::vector<Fiber*> runnable_;
    Fiber* current_ = nullptr;
    ucontext_t sched_ctx_{};
    uint64_t now_us_ = 0;
    std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Exhaustive schedule exploration by whole-world replay: a scenario factory
// rebuilds the world, run_prefix() drives it down one choice path, and the
// choice tree is walked depth-first (odometer over per-step fanouts).
//
//   ScenarioFn: void(SimExecutor&, size_t path_index) — builds the world and
//   spawns fibers; called once per explored path.
//   VisitFn:    void(size_t path_index) — called after each completed path.
// ---------------------------------------------------------------------------

template <typename ScenarioFn, typename VisitFn>
size_t explore_schedules(ScenarioFn&& scenario, VisitFn&& visit,
                         size_t max_paths = 2'000'000) {
    std::vector<size_t> prefix;
    size_t paths = 0;
    for (;;) {
        SimExecutor exec(1);
        scenario(exec, paths);
        std::vector<size_t> fanout = exec.run_prefix(prefix);
        visit(paths);
        if (++paths >= max_paths)
            throw std::runtime_error("schedule space exceeds max_paths");
        // Advance the odometer: extend the deepest position still having an
        // untried branch.
        size_t depth = fanout.size();
        while (depth > 0) {
            size_t tried = depth - 1 < prefix.size() ? prefix[depth - 1] : 0;
            if (tried + 1 < fanout[depth - 1]) {
                prefix.resize(depth);
                prefix[depth - 1] = tried + 1;
                break;
            }
            depth--;
        }
        if (depth == 0) return paths;
    }
}

// ---------------------------------------------------------------------------
// Free-running executor: real worker threads over a mutex-serialized fabric,
// wall-clock time base. Used for throughput runs, not for correctness suites.
// ---------------------------------------------------------------------------

class FreeExecutor : public Executor {
public:
    FreeExecutor() : start_(std::chrono::steady_clock::now()) {}

    void step_point(ClientId) override {}
    uint64_t now_us() const override {
        auto d = std::chrono::steady_clock::now() - start_;
        return uint64_t(std::chrono::duration_cast<std::chrono::microseconds>(d).count());
    }
    void advance_us(uint64_t) override {}
    void sleep_us(ClientId, uint64_t us) override {
        std::this_thread::sleep_for(std::chrono::microseconds(us));
    }
    void lock() override { mu_.lock(); }
    void unlock() override { mu_.unlock(); }

    template <typename F>
    void run_threads(uint32_t n, F&& body) {
        std::vector<std::thread> ts;
        ts.reserve(n);
        for (uint32_t i = 0; i < n; i++)
            ts.emplace_back([&body, i] {
                try {
                    body(ClientId(i));
                } catch (const ClientKilled&) {
                }
            });
        for (auto& t : ts) t.join();
    }

private:
    std::chrono::steady_clock::time_point start_;
    std::recursive_mutex mu_;
};

} // namespace rtx
