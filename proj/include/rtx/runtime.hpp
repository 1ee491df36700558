#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "rtx/alloc.hpp"
#include "rtx/fabric.hpp"
#include "rtx/layout.hpp"
#include "rtx/lllock.hpp"

namespace rtx {

// ---------------------------------------------------------------------------
// Repairable-transaction runtime: separated-layout objects (16 B meta =
// LLLock + versioned data pointer), per-owner log slots, OCC execution,
// a single lease shared by all of a transaction's locks, an idempotent
// CAS-based commit, and online repair of suspected-failed peers.
// ---------------------------------------------------------------------------

enum class TxStatus {
    Committed,
    AbortedConflict,
    AbortedExpiredPeerRepaired,
};

enum class CommitOutcome { Done, DoneByOther, AbortedByRepair, StillRepairing };

enum class RepairOutcome { Repaired, NothingToDo, StillRepairing, StaleLog };

struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RtxConfig {
    uint32_t per_item_commit_estimate_us = 100;
    uint32_t drift_ms = 8;
    uint32_t repair_check_interval_ms = 1;
    uint32_t max_writeset = 8;
    bool opt1 = true;   // elide the log for single-object writesets
    bool opt2 = true;   // честь execution-phase hooks
    bool regulate_lease = true;  // scale the lease with the item count
    // §5.3 ladder flags consumed by the harness when picking a protocol rung.
    bool occ_only = false;
    bool idempotent_commit = true;
    bool value_log_baseline = false;
    bool separate_layout = true;
    // test-only mutation hook: skips readset validation (used to prove the
    // serializability checker catches broken isolation)
    bool test_skip_validation = false;
};

struct TxHooks {
    // returning true pre-locks the written object during execution
    std::function<bool(uint64_t mptr)> on_write_prelock;
    // extra user validation per readset entry; false forces a conflict abort
    std::function<bool(uint64_t mptr, const MetaImage&)> custom_validate;
    // true = the operation bypasses OCC entirely (index-delegated path)
    std::function<bool(uint32_t op_kind)> delegate;
};

struct RuntimeEvent {
    enum Kind {
        Commit,
        AbortConflict,
        AbortPeer,
        RepairAttempt,
        RepairDone,
        BlockStart,
        BlockEnd
    } kind;
    ClientId client = 0;
    uint64_t ts_ms = 0;
    uint64_t aux = 0;  // Commit: item count; RepairAttempt: owner id;
                       // BlockEnd: blocked duration in ms
};

class Runtime {
public:
    struct ReadsetEntry {
        uint64_t mptr = 0;
        MetaImage observed;
        std::vector<uint8_t> value;
    };
    struct WritesetEntry {
        uint64_t mptr = 0;
        size_t rs_index = 0;  // backing readset observation
        std::vector<uint8_t> value;
        VPtr new_dptr = kNullVPtr;
        bool prelocked = false;
    };

    struct Tx {
        ClientId client = 0;
        uint16_t owner = 0;  // rTX id, 1-based; 0 is the no-log sentinel
        bool active = false;
        uint32_t planned_items = 1;
        std::vector<ReadsetEntry> rs;
        std::vector<WritesetEntry> ws;
        LockWord prelock_word = 0;  // shared no-log word for prelocked entries
        std::optional<TxStatus> doomed;
        LockWord doomed_lockv = 0;  // expired peer seen during execution
        uint64_t doomed_mptr = 0;
    };

    Runtime(Fabric& fab, const Layout& lay, Allocator& alloc, RtxConfig cfg = {})
        : fab_(fab), lay_(lay), alloc_(alloc), cfg_(cfg) {
        txs_.resize(lay.config().max_clients);
        last_lease_.resize(lay.config().max_clients, 0);
        meta_cursor_.resize(lay.config().max_clients, 0);
        uint64_t per = lay.meta_slots() / lay.config().max_clients;
        for (ClientId c = 0; c < txs_.size(); c++) {
            txs_[c].client = c;
            txs_[c].owner = uint16_t(c + 1);
            meta_cursor_[c] = c * per;
        }
        meta_limit_ = per;
    }

    const RtxConfig& config() const { return cfg_; }
    RtxConfig& config() { return cfg_; }
    void set_hooks(TxHooks h) { hooks_ = std::move(h); }
    const TxHooks& hooks() const { return hooks_; }
    void set_event_hook(std::function<void(const RuntimeEvent&)> f) { on_event_ = std::move(f); }
    Fabric& fabric() { return fab_; }
    const Layout& layout() const { return lay_; }
    Allocator& allocator() { return alloc_; }

    // ---- object lifecycle ----------------------------------------------------

    // Creates a TXObj: fresh meta (unlocked, version 0) + fully written buffer.
    // The object is private until some committed pointer links its mptr.
    uint64_t create_object(ClientId c, std::span<const uint8_t> payload) {
        uint64_t slot = meta_cursor_.at(c)++;
        if (slot >= (c + 1) * meta_limit_) throw OutOfMemory("meta pool arena exhausted");
        VPtr d = alloc_.alloc_for_payload(c, payload.size());
        alloc_.write_buffer(c, d, payload);
        uint64_t mptr = lay_.meta_addr(slot).offset;
        uint64_t words[2] = {0, d};
        fab_.write(c, {mptr},
                   std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(words), 16),
                   OpTag::Meta);
        alloc_.on_installed(c, d);
        return mptr;
    }

    // ---- transaction API -------------------------------------------------------

    Tx& begin(ClientId c) {
        Tx& tx = txs_.at(c);
        tx.active = true;
        tx.planned_items = 1;
        tx.rs.clear();
        tx.ws.clear();
        tx.prelock_word = 0;
        tx.doomed.reset();
        return tx;
    }

    // Hint from the index about the final writeset size (used for the shared
    // lease and for prelock eligibility).
    void plan_items(Tx& tx, uint32_t n) { tx.planned_items = n; }

    std::span<const uint8_t> read(Tx& tx, uint64_t mptr) {
        assert(tx.active);
        if (auto* w = find_ws(tx, mptr)) return w->value;  // read-own-writes
        if (auto* r = find_rs(tx, mptr)) return r->value;  // local copy, no fabric ops
        for (;;) {
            MetaImage m = read_meta(tx.client, mptr);
            if (lock_is_locked(m.lock)) {
                uint64_t now = fab_.clock_now_ms(tx.client);
                if (is_expired(m.lock, now)) {
                    repair_until_settled(tx.client, mptr, m.lock);
                    continue;  // re-read after repair
                }
                // valid lease: the current buffer is a stable pre-commit (or
                // freshly committed) snapshot; validation decides later
            }
            ReadsetEntry e;
            e.mptr = mptr;
            e.observed = m;
            e.value = read_payload(tx.client, m.dptr);
            tx.rs.push_back(std::move(e));
            return tx.rs.back().value;
        }
    }

    void write(Tx& tx, uint64_t mptr, std::span<const uint8_t> value) {
        assert(tx.active);
        if (auto* w = find_ws(tx, mptr)) {  // last write wins
            w->value.assign(value.begin(), value.end());
            return;
        }
        const ReadsetEntry* r = find_rs(tx, mptr);
        if (!r) throw ContractViolation("tx_write without prior tx_read of the object");
        if (tx.ws.size() >= cfg_.max_writeset) {
            abort_tx(tx);
            throw CapacityError("writeset exceeds the log slot capacity");
        }
        WritesetEntry w;
        w.mptr = mptr;
        w.rs_index = size_t(r - tx.rs.data());
        w.value.assign(value.begin(), value.end());
        tx.ws.push_back(std::move(w));
        if (cfg_.opt2 && hooks_.on_write_prelock && !tx.doomed &&
            hooks_.on_write_prelock(mptr)) {
            prelock(tx, tx.ws.back());
        }
    }

    // lease = now + ceil(n_items x estimate / 1000 ms) + drift, shared by all
    // locks of the transaction.
    uint64_t compute_lease(ClientId c, uint32_t n_items, uint64_t now_ms) const {
        uint32_t n = cfg_.regulate_lease ? n_items : 1;
        uint64_t margin = (uint64_t(n) * cfg_.per_item_commit_estimate_us + 999) / 1000;
        return now_ms + margin + cfg_.drift_ms;
    }

    TxStatus end(Tx& tx) {
        assert(tx.active);
        if (tx.doomed) return finish_doomed(tx);
        if (tx.ws.empty()) return end_read_only(tx);
        if (tx.ws.size() == 1 && cfg_.opt1) return end_single(tx);
        return end_logged(tx);
    }

    void abort_tx(Tx& tx) {
        // execution-phase abort: nothing on the MN except possible prelocks
        for (auto& w : tx.ws) {
            if (w.prelocked)
                fab_.cas(tx.client, {w.mptr}, tx.prelock_word, unlock_value(tx.prelock_word),
                         OpTag::Lock);
            if (w.new_dptr != kNullVPtr) alloc_.release_fresh(tx.client, w.new_dptr);
        }
        clear(tx);
    }

    // ---- idempotent commit phase ------------------------------------------------
    // Re-executable by the owner or any repairer; every mutation is a CAS that
    // can win at most once, and the DONE stamp is a canonical word.

    CommitOutcome try_commit(ClientId c, uint16_t owner, LockWord checksum,
                             const std::vector<LogEntry>& entries, bool already_doing,
                             bool is_owner) {
        MemAddr w0 = lay_.log_word0(owner);
        uint32_t count = uint32_t(entries.size());
        if (!already_doing) {
            uint64_t expected = make_log_word0(LogStatus::Init, 0, count);
            uint64_t now = fab_.clock_now_ms(c);
            uint64_t doing =
                make_log_word0(LogStatus::Doing, repair_lease(c, count, now), count);
            uint64_t old = fab_.cas(c, w0, expected, doing, OpTag::LogState);
            if (old != expected) {
                switch (log_status(old)) {
                    case LogStatus::Done:
                        return log_repair_lease(old) == 1 ? CommitOutcome::AbortedByRepair
                                                          : CommitOutcome::DoneByOther;
                    case LogStatus::Abort:
                        return CommitOutcome::AbortedByRepair;
                    case LogStatus::Init:
                        return CommitOutcome::StillRepairing;  // racing re-dispatch
                    case LogStatus::Doing: {
                        uint64_t now2 = fab_.clock_now_ms(c);
                        if (now2 <= log_repair_lease(old)) return CommitOutcome::StillRepairing;
                        uint64_t fresh = make_log_word0(
                            LogStatus::Doing, repair_lease(c, count, now2), count);
                        if (fab_.cas(c, w0, old, fresh, OpTag::LogState) != old)
                            return CommitOutcome::StillRepairing;
                        break;  // lease forwarded; proceed
                    }
                }
            }
        }
        uint64_t started_ms = fab_.clock_now_ms(c);
        for (size_t i = 0; i < entries.size(); i++) {
            // a non-owner periodically stops if the log got finished or reused
            if (!is_owner && fab_.clock_now_ms(c) >=
                                 started_ms + cfg_.repair_check_interval_ms) {
                uint64_t cur0 = fab_.read_u64(c, w0, OpTag::LogState);
                uint64_t cur1 = fab_.read_u64(c, lay_.log_word1(owner), OpTag::LogState);
                if (cur1 != checksum || log_status(cur0) == LogStatus::Done)
                    return CommitOutcome::DoneByOther;
                started_ms = fab_.clock_now_ms(c);
            }
            const LogEntry& e = entries[i];
            uint64_t old = fab_.cas(c, {e.mptr + 8}, e.old_dptr, e.new_dptr, OpTag::DPtr);
            if (old == e.old_dptr) alloc_.on_installed(c, e.new_dptr);
        }
        for (const LogEntry& e : entries)
            fab_.cas(c, {e.mptr}, checksum, unlock_value(checksum), OpTag::Lock);
        // DONE strictly after the releases so a crash here is still repairable
        fab_.write_u64(c, w0, make_log_word0(LogStatus::Done, 0, count), OpTag::LogDone);
        return CommitOutcome::Done;
    }

    // ---- online repair -----------------------------------------------------------

    // lockv is the expired locked word observed at mptr.
    RepairOutcome repair(ClientId c, LockWord lockv, uint64_t mptr) {
        emit({RuntimeEvent::RepairAttempt, c, fab_.clock_now_ms(c), lock_owner(lockv)});
        RepairOutcome out = lock_owner(lockv) == kNoLogOwner
                                ? repair_single_nolog(c, mptr, lockv)
                                : repair_logged(c, lockv);
        emit({RuntimeEvent::RepairDone, c, fab_.clock_now_ms(c), uint64_t(out)});
        return out;
    }

    // OPT1 repair: no log to consult; re-install the currently visible value
    // under a fresh pointer so any in-flight commit of the suspect is fenced,
    // then release the lock.
    RepairOutcome repair_single_nolog(ClientId c, uint64_t mptr, LockWord lockv) {
        MetaImage m = read_meta(c, mptr);
        if (m.lock != lockv) return RepairOutcome::NothingToDo;  // already cleared
        VPtr d0 = m.dptr;
        std::vector<uint8_t> value = read_payload(c, d0);
        size_t cls = lay_.class_of_pool_off(vptr_offset(d0));
        VPtr fresh = alloc_.alloc(c, cls);
        alloc_.write_buffer(c, fresh, value);
        uint64_t old = fab_.cas(c, {mptr + 8}, d0, fresh, OpTag::DPtr);
        if (old == d0) {
            alloc_.on_installed(c, fresh);
            // crash record for the displaced buffer; the victim partition's
            // owner reclaims it on reboot
            alloc_.retire_ring_only(c, d0);
        } else {
            // the suspect's own commit landed first: keep its value
            alloc_.release_fresh(c, fresh);
        }
        fab_.cas(c, {mptr}, lockv, unlock_value(lockv), OpTag::Lock);
        return RepairOutcome::Repaired;
    }

    RepairOutcome repair_logged(ClientId c, LockWord lockv) {
        uint16_t owner = lock_owner(lockv);
        for (;;) {
            uint64_t w0 = fab_.read_u64(c, lay_.log_word0(owner), OpTag::LogState);
            uint64_t checksum = fab_.read_u64(c, lay_.log_word1(owner), OpTag::LogState);
            if (checksum != lockv) {
                // The slot belongs to a different transaction. Reuse requires a
                // prior DONE, and DONE requires released locks, so the observed
                // lock word is stale; the caller re-reads the lock and retries.
                return RepairOutcome::StaleLog;
            }
            uint32_t count = log_entry_count(w0);
            switch (log_status(w0)) {
                case LogStatus::Init: {
                    uint64_t abort_w = make_log_word0(LogStatus::Abort, 0, count);
                    if (fab_.cas(c, lay_.log_word0(owner), w0, abort_w, OpTag::LogState) != w0)
                        continue;  // state moved; re-dispatch
                    release_from_log(c, owner, count, lockv);
                    fab_.write_u64(c, lay_.log_word0(owner),
                                   make_log_word0(LogStatus::Done, 1, count), OpTag::LogDone);
                    return RepairOutcome::Repaired;
                }
                case LogStatus::Abort: {
                    release_from_log(c, owner, count, lockv);
                    fab_.write_u64(c, lay_.log_word0(owner),
                                   make_log_word0(LogStatus::Done, 1, count), OpTag::LogDone);
                    return RepairOutcome::Repaired;
                }
                case LogStatus::Done:
                    return RepairOutcome::NothingToDo;
                case LogStatus::Doing: {
                    uint64_t now = fab_.clock_now_ms(c);
                    if (now <= log_repair_lease(w0)) return RepairOutcome::StillRepairing;
                    uint64_t fwd =
                        make_log_word0(LogStatus::Doing, repair_lease(c, count, now), count);
                    if (fab_.cas(c, lay_.log_word0(owner), w0, fwd, OpTag::LogState) != w0)
                        continue;  // someone else took over; re-dispatch
                    std::vector<LogEntry> entries = read_log_entries(c, owner, count);
                    CommitOutcome r = try_commit(c, owner, lockv, entries,
                                                 /*already_doing=*/true, /*is_owner=*/false);
                    return r == CommitOutcome::StillRepairing ? RepairOutcome::StillRepairing
                                                              : RepairOutcome::Repaired;
                }
            }
        }
    }

    // ---- stats ---------------------------------------------------------------

    struct Stats {
        uint64_t commits = 0;
        uint64_t aborts_conflict = 0;
        uint64_t aborts_peer = 0;
        uint64_t repairs = 0;
        uint64_t max_block_ms = 0;
    };
    const Stats& stats() const { return stats_; }

private:
    // ---- helpers ----------------------------------------------------------------

    MetaImage read_meta(ClientId c, uint64_t mptr) {
        uint8_t buf[16];
        fab_.read(c, {mptr}, buf, OpTag::Meta);
        return meta_from_bytes(buf);
    }

    std::vector<uint8_t> read_payload(ClientId c, VPtr d) {
        size_t cls = lay_.class_of_pool_off(vptr_offset(d));
        return fab_.read(c, lay_.data_addr(d), lay_.slab(cls).payload_size, OpTag::Data);
    }

    ReadsetEntry* find_rs(Tx& tx, uint64_t mptr) {
        for (auto& e : tx.rs)
            if (e.mptr == mptr) return &e;
        return nullptr;
    }
    WritesetEntry* find_ws(Tx& tx, uint64_t mptr) {
        for (auto& e : tx.ws)
            if (e.mptr == mptr) return &e;
        return nullptr;
    }

    void emit(RuntimeEvent e) {
        if (e.kind == RuntimeEvent::Commit) stats_.commits++;
        if (e.kind == RuntimeEvent::AbortConflict) stats_.aborts_conflict++;
        if (e.kind == RuntimeEvent::AbortPeer) stats_.aborts_peer++;
        if (e.kind == RuntimeEvent::RepairAttempt) stats_.repairs++;
        if (e.kind == RuntimeEvent::BlockEnd)
            stats_.max_block_ms = std::max(stats_.max_block_ms, e.aux);
        if (on_event_) on_event_(e);
    }

    uint64_t repair_lease(ClientId c, uint32_t n, uint64_t now) const {
        return compute_lease(c, std::max(1u, n), now);
    }

    // One lease per transaction: regulated estimate, bumped past every prior
    // unlocked version observed on the writeset words (keeps every unlock
    // word globally fresh per lock) and past this owner's previous lease.
    uint64_t tx_lease(Tx& tx, uint32_t n_items) {
        uint64_t lease = compute_lease(tx.client, n_items, fab_.clock_now_ms(tx.client));
        for (auto& w : tx.ws) {
            const MetaImage& m = tx.rs[w.rs_index].observed;
            if (!lock_is_locked(m.lock)) lease = std::max(lease, (m.lock >> 15) + 1);
        }
        if (tx.prelock_word != 0)
            lease = std::max(lease, lock_lease_ms(tx.prelock_word));
        lease = std::max(lease, last_lease_.at(tx.client) + 1);
        last_lease_[tx.client] = lease;
        return lease;
    }

    void prelock(Tx& tx, WritesetEntry& w) {
        const MetaImage& m = tx.rs[w.rs_index].observed;
        if (lock_is_locked(m.lock)) {
            tx.doomed = TxStatus::AbortedConflict;
            return;
        }
        if (tx.prelock_word == 0) {
            uint64_t lease =
                compute_lease(tx.client, std::max(tx.planned_items, 1u),
                              fab_.clock_now_ms(tx.client));
            lease = std::max(lease, (m.lock >> 15) + 1);
            lease = std::max(lease, last_lease_.at(tx.client) + 1);
            last_lease_[tx.client] = lease;
            tx.prelock_word = encode_locked(lease, kNoLogOwner);
        }
        uint64_t old = fab_.cas(tx.client, {w.mptr}, m.lock, tx.prelock_word, OpTag::Lock);
        if (old != m.lock) {
            if (lock_is_locked(old) && is_expired(old, fab_.clock_now_ms(tx.client))) {
                tx.doomed = TxStatus::AbortedExpiredPeerRepaired;
                tx.doomed_lockv = old;
                tx.doomed_mptr = w.mptr;
            } else {
                tx.doomed = TxStatus::AbortedConflict;
            }
            return;
        }
        w.prelocked = true;
    }

    TxStatus finish_doomed(Tx& tx) {
        TxStatus st = *tx.doomed;
        LockWord lockv = tx.doomed_lockv;
        uint64_t mptr = tx.doomed_mptr;
        abort_tx(tx);
        if (st == TxStatus::AbortedExpiredPeerRepaired) {
            repair_until_settled(tx.client, mptr, lockv);
            emit({RuntimeEvent::AbortPeer, tx.client, fab_.clock_now_ms(tx.client), 0});
        } else {
            emit({RuntimeEvent::AbortConflict, tx.client, fab_.clock_now_ms(tx.client), 0});
        }
        return st;
    }

    // One blocked episode per wait loop (criterion: bounded blocking).
    void begin_block(ClientId c) {
        block_since_.resize(std::max(block_since_.size(), size_t(c) + 1), UINT64_MAX);
        block_since_[c] = fab_.clock_now_ms(c);
        emit({RuntimeEvent::BlockStart, c, block_since_[c], 0});
    }
    void end_block(ClientId c) {
        uint64_t t1 = fab_.clock_now_ms(c);
        uint64_t t0 = c < block_since_.size() ? block_since_[c] : t1;
        if (t0 == UINT64_MAX) t0 = t1;
        block_since_[c] = UINT64_MAX;
        emit({RuntimeEvent::BlockEnd, c, t1, t1 - t0});
    }

    void repair_until_settled(ClientId c, uint64_t mptr, LockWord lockv) {
        bool waited = false;
        for (;;) {
            RepairOutcome r = repair(c, lockv, mptr);
            if (r == RepairOutcome::Repaired || r == RepairOutcome::NothingToDo) break;
            if (!waited) {
                begin_block(c);
                waited = true;
            }
            fab_.sleep_ms(c, cfg_.repair_check_interval_ms);
            MetaImage m = read_meta(c, mptr);
            if (m.lock != lockv) break;  // cleared by someone
        }
        if (waited) end_block(c);
    }

    TxStatus end_read_only(Tx& tx) {
        auto fail = validate_readset(tx);
        if (fail) {
            abort_tx(tx);
            return settle_failed(tx.client, fail->first, fail->second);
        }
        emit({RuntimeEvent::Commit, tx.client, fab_.clock_now_ms(tx.client), tx.rs.size()});
        clear(tx);
        return TxStatus::Committed;
    }

    // Re-reads every readset-only entry; the 16 B meta must be bit-identical
    // to the observation. Writeset-backing entries are validated by their lock
    // CAS against the observed word (version freshness makes that exact).
    // Returns the current lock word + mptr of the first failing entry.
    std::optional<std::pair<LockWord, uint64_t>> validate_readset(Tx& tx) {
        if (cfg_.test_skip_validation) return std::nullopt;
        for (size_t i = 0; i < tx.rs.size(); i++) {
            const ReadsetEntry& e = tx.rs[i];
            if (hooks_.custom_validate && !hooks_.custom_validate(e.mptr, e.observed))
                return std::make_pair(e.observed.lock, e.mptr);
            bool backs_ws = false;
            for (auto& w : tx.ws)
                if (w.rs_index == i) backs_ws = true;
            if (backs_ws) continue;
            MetaImage cur = read_meta(tx.client, e.mptr);
            if (!(cur == e.observed)) return std::make_pair(cur.lock, e.mptr);
        }
        return std::nullopt;
    }

    // Own state is already rolled back; classify the failure and, if the
    // culprit is an expired peer, help it before returning.
    TxStatus settle_failed(ClientId c, LockWord cur, uint64_t mptr) {
        if (lock_is_locked(cur) && is_expired(cur, fab_.clock_now_ms(c))) {
            repair_until_settled(c, mptr, cur);
            emit({RuntimeEvent::AbortPeer, c, fab_.clock_now_ms(c), 0});
            return TxStatus::AbortedExpiredPeerRepaired;
        }
        emit({RuntimeEvent::AbortConflict, c, fab_.clock_now_ms(c), 0});
        return TxStatus::AbortedConflict;
    }

    // Writes every new-value buffer to the data pool (execution-phase work, so
    // the commit needs only pointer CASes).
    void stage_buffers(Tx& tx) {
        for (auto& w : tx.ws) {
            if (w.new_dptr != kNullVPtr) continue;
            w.new_dptr = alloc_.alloc_for_payload(tx.client, w.value.size());
            alloc_.write_buffer(tx.client, w.new_dptr, w.value);
        }
    }

    // OPT1: single-object commit with no log traffic at all. The lock word
    // carries the no-log owner sentinel; repair re-installs the current value.
    TxStatus end_single(Tx& tx) {
        WritesetEntry& w = tx.ws[0];
        const MetaImage m = tx.rs[w.rs_index].observed;
        stage_buffers(tx);
        LockWord word = tx.prelock_word;
        bool held = w.prelocked;
        if (!held) {
            if (lock_is_locked(m.lock)) {
                VPtr fresh = w.new_dptr;
                clear(tx);
                alloc_.release_fresh(tx.client, fresh);
                return settle_failed(tx.client, m.lock, w.mptr);
            }
            uint64_t lease = tx_lease(tx, uint32_t(tx.rs.size()));
            word = encode_locked(lease, kNoLogOwner);
            uint64_t old = fab_.cas(tx.client, {w.mptr}, m.lock, word, OpTag::Lock);
            if (old != m.lock) {
                VPtr fresh = w.new_dptr;
                uint64_t mptr = w.mptr;
                clear(tx);
                alloc_.release_fresh(tx.client, fresh);
                return settle_failed(tx.client, old, mptr);
            }
        }
        auto fail = validate_readset(tx);
        if (fail) {
            // abort self first: drop the held lock, then help the peer
            fab_.cas(tx.client, {w.mptr}, word, unlock_value(word), OpTag::Lock);
            VPtr fresh = w.new_dptr;
            clear(tx);
            alloc_.release_fresh(tx.client, fresh);
            return settle_failed(tx.client, fail->first, fail->second);
        }
        VPtr old_d = m.dptr;
        uint64_t prior = fab_.cas(tx.client, {w.mptr + 8}, old_d, w.new_dptr, OpTag::DPtr);
        bool installed = prior == old_d;
        if (installed) alloc_.on_installed(tx.client, w.new_dptr);
        fab_.cas(tx.client, {w.mptr}, word, unlock_value(word), OpTag::Lock);
        if (!installed) {
            // fenced out by a repairer that suspected us: the old value was
            // re-installed, so this transaction did not take effect
            VPtr fresh = w.new_dptr;
            clear(tx);
            alloc_.release_fresh(tx.client, fresh);
            emit({RuntimeEvent::AbortConflict, tx.client, fab_.clock_now_ms(tx.client), 0});
            return TxStatus::AbortedConflict;
        }
        alloc_.retire_opt1(tx.client, old_d);
        emit({RuntimeEvent::Commit, tx.client, fab_.clock_now_ms(tx.client), 1});
        clear(tx);
        return TxStatus::Committed;
    }

    TxStatus end_logged(Tx& tx) {
        stage_buffers(tx);
        std::sort(tx.ws.begin(), tx.ws.end(),
                  [](const WritesetEntry& a, const WritesetEntry& b) { return a.mptr < b.mptr; });

        // write the log: entries first, then the header (INIT + checksum)
        uint32_t count = uint32_t(tx.ws.size());
        uint64_t lease = tx_lease(tx, uint32_t(tx.rs.size()));
        LockWord word = encode_locked(lease, tx.owner);
        std::vector<LogEntry> entries(count);
        std::vector<uint8_t> blob(count * kLogEntryBytes);
        for (uint32_t i = 0; i < count; i++) {
            entries[i] = {tx.ws[i].mptr, tx.rs[tx.ws[i].rs_index].observed.dptr,
                          tx.ws[i].new_dptr};
            std::memcpy(blob.data() + i * kLogEntryBytes, &entries[i].mptr, 8);
            std::memcpy(blob.data() + i * kLogEntryBytes + 8, &entries[i].old_dptr, 8);
            std::memcpy(blob.data() + i * kLogEntryBytes + 16, &entries[i].new_dptr, 8);
        }
        fab_.write(tx.client, lay_.log_entry_addr(tx.owner, 0), blob, OpTag::LogEntries);
        uint64_t hdr[2] = {make_log_word0(LogStatus::Init, 0, count), word};
        fab_.write(tx.client, lay_.log_word0(tx.owner),
                   std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(hdr), 16),
                   OpTag::LogInstall);
        fab_.fence(tx.client);

        // lock phase (canonical mptr order); prelocked entries upgrade their
        // no-log word to the owner word so repair can trace the log
        size_t locked_upto = 0;
        for (size_t i = 0; i < tx.ws.size(); i++) {
            WritesetEntry& w = tx.ws[i];
            LockWord expected = w.prelocked ? tx.prelock_word
                                            : tx.rs[w.rs_index].observed.lock;
            uint64_t old = lock_is_locked(expected) && !w.prelocked
                               ? expected
                               : fab_.cas(tx.client, {w.mptr}, expected, word, OpTag::Lock);
            if (old != expected || (lock_is_locked(expected) && !w.prelocked)) {
                uint64_t mptr = w.mptr;
                rollback_log_and_locks(tx, locked_upto, word, count, entries);
                return settle_failed(tx.client, old, mptr);
            }
            w.prelocked = false;  // now held under the owner word
            locked_upto = i + 1;
        }

        auto fail = validate_readset(tx);
        if (fail) {
            rollback_log_and_locks(tx, locked_upto, word, count, entries);
            return settle_failed(tx.client, fail->first, fail->second);
        }

        // commit: loop the idempotent phase until settled
        bool waited = false;
        for (;;) {
            CommitOutcome r = try_commit(tx.client, tx.owner, word, entries,
                                         /*already_doing=*/false, /*is_owner=*/true);
            if (r == CommitOutcome::Done || r == CommitOutcome::DoneByOther) {
                if (waited) end_block(tx.client);
                alloc_.mark_log_done(tx.client, tx.owner);
                for (auto& e : entries) alloc_.retire_logged(tx.client, e.old_dptr, tx.owner);
                emit({RuntimeEvent::Commit, tx.client, fab_.clock_now_ms(tx.client), count});
                clear(tx);
                return TxStatus::Committed;
            }
            if (r == CommitOutcome::AbortedByRepair) {
                if (waited) end_block(tx.client);
                for (auto& w : tx.ws) alloc_.release_fresh(tx.client, w.new_dptr);
                clear(tx);
                emit({RuntimeEvent::AbortPeer, tx.client, fab_.clock_now_ms(tx.client), 0});
                return TxStatus::AbortedExpiredPeerRepaired;
            }
            if (!waited) {
                begin_block(tx.client);
                waited = true;
            }
            fab_.sleep_ms(tx.client, cfg_.repair_check_interval_ms);
        }
    }

    void rollback_log_and_locks(Tx& tx, size_t locked_upto, LockWord word, uint32_t count,
                                const std::vector<LogEntry>& entries) {
        uint64_t init_w = make_log_word0(LogStatus::Init, 0, count);
        uint64_t abort_w = make_log_word0(LogStatus::Abort, 0, count);
        fab_.cas(tx.client, lay_.log_word0(tx.owner), init_w, abort_w, OpTag::LogState);
        for (size_t i = 0; i < locked_upto; i++)
            fab_.cas(tx.client, {entries[i].mptr}, word, unlock_value(word), OpTag::Lock);
        // release any prelocks beyond the upgraded prefix
        for (auto& w : tx.ws)
            if (w.prelocked)
                fab_.cas(tx.client, {w.mptr}, tx.prelock_word, unlock_value(tx.prelock_word),
                         OpTag::Lock);
        fab_.write_u64(tx.client, lay_.log_word0(tx.owner),
                       make_log_word0(LogStatus::Done, 1, count), OpTag::LogDone);
        for (auto& w : tx.ws) alloc_.release_fresh(tx.client, w.new_dptr);
        clear(tx);
    }

    void release_from_log(ClientId c, uint16_t owner, uint32_t count, LockWord lockv) {
        std::vector<LogEntry> entries = read_log_entries(c, owner, count);
        for (auto& e : entries)
            fab_.cas(c, {e.mptr}, lockv, unlock_value(lockv), OpTag::Lock);
    }

    std::vector<LogEntry> read_log_entries(ClientId c, uint16_t owner, uint32_t count) {
        std::vector<LogEntry> out(count);
        if (count == 0) return out;
        std::vector<uint8_t> blob =
            fab_.read(c, lay_.log_entry_addr(owner, 0), count * kLogEntryBytes,
                      OpTag::LogEntries);
        for (uint32_t i = 0; i < count; i++) {
            std::memcpy(&out[i].mptr, blob.data() + i * kLogEntryBytes, 8);
            std::memcpy(&out[i].old_dptr, blob.data() + i * kLogEntryBytes + 8, 8);
            std::memcpy(&out[i].new_dptr, blob.data() + i * kLogEntryBytes + 16, 8);
        }
        return out;
    }

    void clear(Tx& tx) {
        tx.active = false;
        tx.rs.clear();
        tx.ws.clear();
        tx.prelock_word = 0;
        tx.doomed.reset();
    }

    Fabric& fab_;
    const Layout& lay_;
    Allocator& alloc_;
    RtxConfig cfg_;
    TxHooks hooks_;
    std::vector<Tx> txs_;
    std::vector<uint64_t> last_lease_;
    std::vector<uint64_t> meta_cursor_;
    std::vector<uint64_t> block_since_;
    uint64_t meta_limit_ = 0;
    Stats stats_;
    std::function<void(const RuntimeEvent&)> on_event_;
};

} // namespace rtx
