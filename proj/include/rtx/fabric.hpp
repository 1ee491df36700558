#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtx {

// ---------------------------------------------------------------------------
// Simulated memory node exposing one-sided DM primitives (READ/WRITE/CAS/FAA)
// with RDMA-like atomicity: READ/WRITE are atomic per 64 B aligned cell,
// CAS/FAA act on 8 B aligned words. A fault plan injects kill points, delayed
// ("fly") writes and per-client clock offsets, all deterministic under the
// single-scheduler executor.
// ---------------------------------------------------------------------------

using ClientId = uint32_t;

struct MemAddr {
    uint64_t offset = 0;
};

constexpr uint64_t kCellSize = 64;

struct AddressFault : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AlignmentFault : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown into a client's flow when its kill point is reached. The fiber or
// worker unwinds; already-issued delayed writes still land.
struct ClientKilled {
    ClientId client;
};

enum class OpKind : uint8_t { Read = 0, Write = 1, Cas = 2, Faa = 3 };
constexpr size_t kOpKinds = 4;

// Purpose tag carried by each op so audits can classify traffic without
// guessing from addresses. Does not affect semantics.
enum class OpTag : uint8_t {
    General = 0,
    Data,        // data-pool buffer payloads
    Meta,        // TXObj metadata (lock + dptr words)
    Lock,        // lock acquire/release CAS
    DPtr,        // data-pointer install CAS
    LogInstall,  // log header image write (excluded by the op-count audit)
    LogEntries,  // log entry payload write
    LogState,    // log state CAS: INIT->DOING / lease forward (audit-excluded)
    LogDone,     // final 8 B DONE stamp
    Reclaim,     // reclamation ring append
    Alloc,       // allocator bitmap / generation table maintenance
    LockCheck,   // delegated fast path: subtable lock probe
    Verify,      // delegated fast path: post-mutation meta re-read
};
constexpr size_t kOpTags = 13;

struct KindCounter {
    uint64_t ops = 0;
    uint64_t bytes = 0;
};

struct OpCounters {
    // [kind] and [kind][tag] views; both monotone until reset.
    KindCounter per_kind[kOpKinds];
    KindCounter per_tag[kOpKinds][kOpTags];

    void add(OpKind k, OpTag t, uint64_t bytes) {
        per_kind[size_t(k)].ops += 1;
        per_kind[size_t(k)].bytes += bytes;
        per_tag[size_t(k)][size_t(t)].ops += 1;
        per_tag[size_t(k)][size_t(t)].bytes += bytes;
    }
};

struct WriteDelay {
    uint64_t delay_us = 0;
    bool drop = false;
};

struct FaultPlan {
    // client -> ordinal (1-based) of the last op the client completes; the
    // next op never issues.
    std::map<ClientId, uint64_t> kill_points;
    // (client, op ordinal) -> delay applied to that WRITE (or CAS).
    std::map<std::pair<ClientId, uint64_t>, WriteDelay> write_delays;
    // client -> signed clock drift in ms.
    std::map<ClientId, int64_t> clock_offsets;

    bool empty() const {
        return kill_points.empty() && write_delays.empty() && clock_offsets.empty();
    }
};

// Scheduling/time backend. The deterministic executor yields fibers at each
// micro-op; the free-running executor maps these to real threads/clock.
class Executor {
public:
    virtual ~Executor() = default;
    // One potential context switch; called once per 64 B/8 B micro-op.
    virtual void step_point(ClientId c) = 0;
    virtual uint64_t now_us() const = 0;
    virtual void advance_us(uint64_t us) = 0;
    virtual void sleep_us(ClientId c, uint64_t us) = 0;
    // Serialize a multi-step critical section (no-op when single-threaded).
    virtual void lock() {}
    virtual void unlock() {}
};

class Fabric {
public:
    struct Config {
        uint64_t mn_size = 1ull << 30;  // 1 GiB simulated
        uint32_t max_clients = 16;
        uint64_t op_cost_us = 20;       // simulated cost per micro-op
    };

    Fabric(const Config& cfg, Executor& exec)
        : cfg_(cfg), exec_(exec),
          mem_(static_cast<uint8_t*>(std::calloc(cfg.mn_size, 1)), &std::free) {
        if (!mem_) throw std::bad_alloc();
        counters_.resize(cfg.max_clients);
        op_ordinal_.resize(cfg.max_clients, 0);
        killed_.resize(cfg.max_clients, false);
        pending_by_client_.resize(cfg.max_clients, 0);
    }

    const Config& config() const { return cfg_; }
    uint64_t size() const { return cfg_.mn_size; }

    void inject(const FaultPlan& plan) {
        for (auto& [c, _] : plan.kill_points) check_client_known(c);
        for (auto& [k, _] : plan.write_delays) check_client_known(k.first);
        for (auto& [c, _] : plan.clock_offsets) check_client_known(c);
        plan_ = plan;
    }

    // ---- DM primitives ----------------------------------------------------

    void read(ClientId c, MemAddr a, std::span<uint8_t> out, OpTag tag = OpTag::General) {
        begin_op(c, a, out.size(), /*align8=*/false);
        count(c, OpKind::Read, tag, out.size());
        for_each_cell(a.offset, out.size(), [&](uint64_t off, uint64_t pos, uint64_t n) {
            exec_.step_point(c);
            Guard g(exec_);
            flush_due();
            std::memcpy(out.data() + pos, mem_.get() + off, n);
            exec_.advance_us(cfg_.op_cost_us);
        });
    }

    std::vector<uint8_t> read(ClientId c, MemAddr a, size_t len, OpTag tag = OpTag::General) {
        std::vector<uint8_t> out(len);
        read(c, a, out, tag);
        return out;
    }

    uint64_t read_u64(ClientId c, MemAddr a, OpTag tag = OpTag::General) {
        uint64_t v = 0;
        read(c, a, std::span<uint8_t>(reinterpret_cast<uint8_t*>(&v), 8), tag);
        return v;
    }

    void write(ClientId c, MemAddr a, std::span<const uint8_t> data, OpTag tag = OpTag::General) {
        uint64_t ord = begin_op(c, a, data.size(), /*align8=*/false);
        count(c, OpKind::Write, tag, data.size());
        auto it = plan_.write_delays.find({c, ord});
        if (it != plan_.write_delays.end()) {
            exec_.step_point(c);
            Guard g(exec_);
            flush_due();
            if (!it->second.drop) {
                PendingWrite pw;
                pw.client = c;
                pw.offset = a.offset;
                pw.data.assign(data.begin(), data.end());
                pw.apply_at_us = exec_.now_us() + it->second.delay_us;
                pending_.push_back(std::move(pw));
                pending_by_client_[c]++;
            }
            exec_.advance_us(cfg_.op_cost_us);
            return;
        }
        for_each_cell(a.offset, data.size(), [&](uint64_t off, uint64_t pos, uint64_t n) {
            exec_.step_point(c);
            Guard g(exec_);
            flush_due();
            std::memcpy(mem_.get() + off, data.data() + pos, n);
            exec_.advance_us(cfg_.op_cost_us);
        });
    }

    void write_u64(ClientId c, MemAddr a, uint64_t v, OpTag tag = OpTag::General) {
        write(c, a, std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(&v), 8), tag);
    }

    // Returns the prior word in either case.
    uint64_t cas(ClientId c, MemAddr a, uint64_t expected, uint64_t desired,
                 OpTag tag = OpTag::General) {
        uint64_t ord = begin_op(c, a, 8, /*align8=*/true);
        count(c, OpKind::Cas, tag, 8);
        auto it = plan_.write_delays.find({c, ord});
        if (it != plan_.write_delays.end() && !it->second.drop) {
            // Delayed CAS: the effect lands at the apply instant; a live
            // issuer stalls for the result, a killed issuer's CAS still flies.
            exec_.sleep_us(c, it->second.delay_us);
        }
        exec_.step_point(c);
        Guard g(exec_);
        flush_due();
        uint64_t old = load_u64(a.offset);
        if (old == expected) store_u64(a.offset, desired);
        exec_.advance_us(cfg_.op_cost_us);
        return old;
    }

    uint64_t faa(ClientId c, MemAddr a, uint64_t delta, OpTag tag = OpTag::General) {
        begin_op(c, a, 8, /*align8=*/true);
        count(c, OpKind::Faa, tag, 8);
        exec_.step_point(c);
        Guard g(exec_);
        flush_due();
        uint64_t old = load_u64(a.offset);
        store_u64(a.offset, old + delta);
        exec_.advance_us(cfg_.op_cost_us);
        return old;
    }

    // Simulated global time plus the client's configured drift; monotone per
    // client. Not a DM op (local clock read), so no counters/steps.
    uint64_t clock_now_ms(ClientId c) const {
        int64_t off = 0;
        auto it = plan_.clock_offsets.find(c);
        if (it != plan_.clock_offsets.end()) off = it->second;
        int64_t t = int64_t(exec_.now_us() / 1000) + off;
        return t < 0 ? 0 : uint64_t(t);
    }

    void sleep_ms(ClientId c, uint64_t ms) { exec_.sleep_us(c, ms * 1000); }

    // Completion fence: blocks until all of this client's in-flight delayed
    // writes have applied (models polling RDMA completions).
    void fence(ClientId c) {
        while (pending_by_client_[c] > 0) {
            uint64_t wake = 0;
            {
                Guard g(exec_);
                flush_due();
                if (pending_by_client_[c] == 0) break;
                wake = earliest_apply_for(c);
            }
            uint64_t now = exec_.now_us();
            exec_.sleep_us(c, wake > now ? wake - now : 1);
        }
    }

    // Applies every still-pending delayed write (end-of-run quiescence).
    void quiesce() {
        Guard g(exec_);
        for (auto& pw : pending_) apply_pending(pw);
        pending_.clear();
    }

    // ---- counters ----------------------------------------------------------

    const OpCounters& counters(ClientId c) const { return counters_.at(c); }
    void reset_counters() {
        for (auto& c : counters_) c = OpCounters{};
    }
    OpCounters totals() const {
        OpCounters t;
        for (auto& c : counters_)
            for (size_t k = 0; k < kOpKinds; k++) {
                t.per_kind[k].ops += c.per_kind[k].ops;
                t.per_kind[k].bytes += c.per_kind[k].bytes;
                for (size_t g = 0; g < kOpTags; g++) {
                    t.per_tag[k][g].ops += c.per_tag[k][g].ops;
                    t.per_tag[k][g].bytes += c.per_tag[k][g].bytes;
                }
            }
        return t;
    }

    bool killed(ClientId c) const { return killed_.at(c); }
    uint64_t ops_issued(ClientId c) const { return op_ordinal_.at(c); }

    // ---- verification plane (not DM primitives) ----------------------------
    // Direct image access for oracles, structural sweeps and test setup.

    const uint8_t* peek(MemAddr a, size_t len) const {
        bounds_check(a.offset, len);
        return mem_.get() + a.offset;
    }
    uint64_t peek_u64(MemAddr a) const {
        uint64_t v;
        std::memcpy(&v, peek(a, 8), 8);
        return v;
    }
    void poke(MemAddr a, std::span<const uint8_t> data) {
        bounds_check(a.offset, data.size());
        std::memcpy(mem_.get() + a.offset, data.data(), data.size());
    }
    void poke_u64(MemAddr a, uint64_t v) {
        poke(a, std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(&v), 8));
    }
    std::span<const uint8_t> image() const { return {mem_.get(), cfg_.mn_size}; }

private:
    struct Guard {
        Executor& e;
        explicit Guard(Executor& e) : e(e) { e.lock(); }
        ~Guard() { e.unlock(); }
    };

    struct PendingWrite {
        ClientId client;
        uint64_t offset;
        std::vector<uint8_t> data;
        uint64_t apply_at_us;
    };

    void check_client_known(ClientId c) const {
        if (c >= cfg_.max_clients)
            throw ConfigError("fault plan references unknown client " + std::to_string(c));
    }

    void bounds_check(uint64_t off, uint64_t len) const {
        if (len == 0 || off > cfg_.mn_size || cfg_.mn_size - off < len)
            throw AddressFault("access [" + std::to_string(off) + ", +" +
                               std::to_string(len) + ") out of MN bounds");
    }

    // Kill check + ordinal bump shared by all primitives.
    uint64_t begin_op(ClientId c, MemAddr a, uint64_t len, bool align8) {
        if (c >= cfg_.max_clients) throw ConfigError("unknown client");
        bounds_check(a.offset, len);
        if (align8 && (a.offset % 8 != 0))
            throw AlignmentFault("atomic target not 8-byte aligned");
        if (killed_[c]) throw ClientKilled{c};
        auto kp = plan_.kill_points.find(c);
        if (kp != plan_.kill_points.end() && op_ordinal_[c] >= kp->second) {
            killed_[c] = true;
            throw ClientKilled{c};
        }
        return ++op_ordinal_[c];
    }

    void count(ClientId c, OpKind k, OpTag t, uint64_t bytes) {
        counters_[c].add(k, t, bytes);
    }

    template <typename F>
    void for_each_cell(uint64_t off, uint64_t len, F&& f) {
        uint64_t pos = 0;
        while (pos < len) {
            uint64_t cell_end = ((off + pos) / kCellSize + 1) * kCellSize;
            uint64_t n = std::min(len - pos, cell_end - (off + pos));
            f(off + pos, pos, n);
            pos += n;
        }
    }

    uint64_t load_u64(uint64_t off) const {
        uint64_t v;
        std::memcpy(&v, mem_.get() + off, 8);
        return v;
    }
    void store_u64(uint64_t off, uint64_t v) { std::memcpy(mem_.get() + off, &v, 8); }

    void apply_pending(const PendingWrite& pw) {
        std::memcpy(mem_.get() + pw.offset, pw.data.data(), pw.data.size());
        pending_by_client_[pw.client]--;
    }

    void flush_due() {
        if (pending_.empty()) return;
        uint64_t now = exec_.now_us();
        for (size_t i = 0; i < pending_.size();) {
            if (pending_[i].apply_at_us <= now) {
                apply_pending(pending_[i]);
                pending_.erase(pending_.begin() + i);
            } else {
                i++;
            }
        }
    }

    uint64_t earliest_apply_for(ClientId c) const {
        uint64_t best = UINT64_MAX;
        for (auto& pw : pending_)
            if (pw.client == c) best = std::min(best, pw.apply_at_us);
        return best == UINT64_MAX ? 0 : best;
    }

    Config cfg_;
    Executor& exec_;
    std::unique_ptr<uint8_t, void (*)(void*)> mem_;
    std::vector<OpCounters> counters_;
    std::vector<uint64_t> op_ordinal_;
    std::vector<bool> killed_;
    std::vector<PendingWrite> pending_;
    std::vector<uint32_t> pending_by_client_;
    FaultPlan plan_;
};

} // namespace rtx
