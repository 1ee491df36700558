#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rtx/fabric.hpp"
#include "rtx/layout.hpp"

namespace rtx {

// ---------------------------------------------------------------------------
// Data-pool allocation with versioned pointers.
//
// Slots of each slab class are statically partitioned into per-client arenas.
// A client reserves slots in chunks, eagerly marking them allocated in the
// MN-resident allocation map (so the map over-approximates truth and never
// under-marks); generation-table updates and free marks are batched.
//
// Retired pointers become reusable only after (a) the retiring transaction's
// log reads DONE (logged txs) or its displacing CAS + unlock happened (OPT1,
// recorded by an 8 B reclamation-ring append), and (b) a simulated-time floor
// has passed, which is the wrap-around guard for the 16-bit pointer version.
// ---------------------------------------------------------------------------

struct OutOfMemory : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BackpressureError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RebootReport {
    uint64_t leaked_freed = 0;
    uint64_t confirmed_live = 0;
};

class Allocator {
public:
    struct Config {
        uint32_t chunk_slots = 64;
        uint32_t batch_max = 64;
        uint64_t batch_interval_ms = 1;
        uint64_t reuse_delay_ms = 25;  // pointer-version wrap guard
        bool audit_writes = true;      // assert buffers are never written once live
    };

    Allocator(Fabric& fab, const Layout& lay, Config cfg = {})
        : fab_(fab), lay_(lay), cfg_(cfg) {
        arenas_.resize(lay.config().max_clients);
        for (auto& a : arenas_) {
            a.per_class.resize(lay.class_count());
        }
        slot_state_.resize(lay.class_count());
        for (size_t c = 0; c < lay.class_count(); c++)
            slot_state_[c].resize(lay.slab(c).slot_count);
    }

    const Config& config() const { return cfg_; }

    // ---- allocation ---------------------------------------------------------

    VPtr alloc(ClientId c, size_t cls) {
        Arena& ar = arenas_.at(c);
        ClassArena& ca = ar.per_class.at(cls);
        maybe_flush(c);

        // recycle gated+aged retirees first
        uint64_t now = fab_.clock_now_ms(c);
        for (size_t i = 0; i < ca.retired.size(); i++) {
            Retired& r = ca.retired[i];
            if (!gate_open(ar, r)) continue;
            if (now < r.retired_at_ms + cfg_.reuse_delay_ms) continue;
            uint64_t idx = lay_.slot_index(cls, vptr_offset(r.ptr));
            ca.retired.erase(ca.retired.begin() + i);
            return take_slot(c, cls, idx);
        }
        // then fresh slots from the current chunk
        if (ca.free_fresh.empty()) reserve_chunk(c, cls);
        uint64_t idx = ca.free_fresh.front();
        ca.free_fresh.pop_front();
        return take_slot(c, cls, idx);
    }

    VPtr alloc_for_payload(ClientId c, uint64_t bytes) {
        return alloc(c, lay_.class_for_payload(bytes));
    }

    // Returns a never-installed buffer to the arena (aborted tx, lost repair
    // race). Local only; the slot stays reserved in the MN map.
    void release_fresh(ClientId c, VPtr p) {
        size_t cls = lay_.class_of_pool_off(vptr_offset(p));
        SlotState& st = state_of(p, cls);
        if (st.generation != vptr_version(p) || st.installed) return;
        arenas_.at(c).per_class[cls].free_fresh.push_back(
            lay_.slot_index(cls, vptr_offset(p)));
    }

    // Buffer write helper: enforces the copy-on-write discipline (a buffer is
    // writable only between alloc and install).
    void write_buffer(ClientId c, VPtr p, std::span<const uint8_t> data,
                      OpTag tag = OpTag::Data) {
        size_t cls = lay_.class_of_pool_off(vptr_offset(p));
        if (data.size() > lay_.slab(cls).payload_size)
            throw ContractViolation("payload exceeds slab class");
        if (cfg_.audit_writes) {
            const SlotState& st = state_of(p, cls);
            if (st.generation != vptr_version(p))
                throw ContractViolation("write through stale versioned pointer");
            if (st.installed)
                throw ContractViolation("write to live (installed) buffer");
        }
        fab_.write(c, lay_.data_addr(p), data, tag);
    }

    // Called when a pointer-CAS made the buffer reachable.
    void on_installed(ClientId, VPtr p) {
        size_t cls = lay_.class_of_pool_off(vptr_offset(p));
        SlotState& st = state_of(p, cls);
        if (st.generation == vptr_version(p)) st.installed = true;
    }

    // ---- retirement ----------------------------------------------------------

    // Displaced by a committed logged tx; reusable once that log is DONE.
    void retire_logged(ClientId c, VPtr p, uint16_t owner) {
        push_retired(c, p, owner);
    }

    // The owner's log slot reached DONE; its pending retirees open.
    void mark_log_done(ClientId c, uint16_t owner) {
        arenas_.at(c).done_owners.insert(owner);
    }

    // Displaced by an OPT1 (log-free) commit, already unreachable: record the
    // retired pointer in this client's reclamation-ring segment (8 B WRITE).
    void retire_opt1(ClientId c, VPtr p) {
        ring_append(c, p);
        push_retired(c, p, kNoLogOwner);
    }

    // Crash record only: a repairer displaced a buffer belonging to another
    // client's partition; the partition owner reclaims it via reboot_fix (or
    // the sweep accounts for it through the ring).
    void retire_ring_only(ClientId c, VPtr p) {
        if (cfg_.audit_writes) {
            size_t cls = lay_.class_of_pool_off(vptr_offset(p));
            SlotState& st = state_of(p, cls);
            if (st.generation == vptr_version(p)) st.installed = false;
        }
        ring_append(c, p);
    }

    // ---- batched MN maintenance ----------------------------------------------

    void flush(ClientId c) {
        Arena& ar = arenas_.at(c);
        for (auto& u : ar.batch) apply_update(c, u);
        ar.batch.clear();
        ar.batch_since_ms.reset();
    }

    // ---- post-crash repair -----------------------------------------------------

    // Rebuilds the client's arena and the MN-side allocation map after reboot.
    // Liveness rule: a slot is live iff some meta's dptr resolves to it with a
    // version matching the slot generation; everything else that is marked
    // allocated in this client's partitions is reclaimed as a leak.
    RebootReport reboot_fix(ClientId c) {
        RebootReport rep;
        Arena& ar = arenas_.at(c);
        ar = Arena{};
        ar.per_class.resize(lay_.class_count());

        // Reference scan over the meta pool.
        std::unordered_map<uint64_t, uint16_t> referenced;  // pool_off -> version
        uint64_t metas = lay_.meta_slots();
        std::vector<uint8_t> block(4096);
        for (uint64_t s = 0; s < metas;) {
            uint64_t batch = std::min<uint64_t>(256, metas - s);
            fab_.read(c, lay_.meta_addr(s), std::span(block.data(), batch * 16), OpTag::Alloc);
            for (uint64_t i = 0; i < batch; i++) {
                MetaImage m = meta_from_bytes(block.data() + i * 16);
                if (m.dptr != kNullVPtr)
                    referenced[vptr_offset(m.dptr)] = vptr_version(m.dptr);
            }
            s += batch;
        }

        for (size_t cls = 0; cls < lay_.class_count(); cls++) {
            auto [lo, hi] = partition(c, cls);
            ClassArena& ca = ar.per_class[cls];
            ca.next_fresh = hi;  // treat the partition as fully reserved
            std::vector<uint8_t> marks(hi - lo);
            for (uint64_t at = lo; at < hi;) {
                uint64_t n = std::min<uint64_t>(4096, hi - at);
                fab_.read(c, lay_.bitmap_addr(cls, at), std::span(marks.data() + (at - lo), n),
                          OpTag::Alloc);
                at += n;
            }
            ca.next_fresh = hi;
            for (uint64_t idx = lo; idx < hi; idx++) {
                if (!marks[idx - lo]) {
                    // unreserved region starts here (chunks grow upward)
                    ca.next_fresh = idx;
                    break;
                }
            }
            for (uint64_t idx = lo; idx < ca.next_fresh; idx++) {
                uint64_t pool_off = lay_.slot_pool_off(cls, idx);
                SlotState& st = slot_state_[cls][idx];
                auto it = referenced.find(pool_off);
                if (it != referenced.end()) {
                    // confirmed live: repair the generation table if stale
                    st.generation = it->second;
                    st.installed = true;
                    fab_.write(c, lay_.gentab_addr(cls, idx), gentab_bytes(st.generation),
                               OpTag::Alloc);
                    rep.confirmed_live++;
                } else {
                    // allocated-but-unreachable: a leak. Return it to the free
                    // pool (it stays marked, like any reserved slot) under a
                    // safe generation derived from MN state alone: the local
                    // counter is lost, but unflushed bumps are bounded by the
                    // batch limit.
                    uint32_t gw = 0;
                    fab_.read(c, lay_.gentab_addr(cls, idx),
                              std::span(reinterpret_cast<uint8_t*>(&gw), 4), OpTag::Alloc);
                    uint16_t flushed = uint16_t(gw & 0xffff);
                    st.generation = uint16_t(flushed + cfg_.batch_max + 1);
                    st.installed = false;
                    fab_.write(c, lay_.gentab_addr(cls, idx), gentab_bytes(st.generation),
                               OpTag::Alloc);
                    ca.free_fresh.push_back(idx);
                    rep.leaked_freed++;
                }
            }
        }
        // reset ring head
        fab_.write_u64(c, lay_.ring_head(c), 0, OpTag::Alloc);
        ar.ring_cursor = 0;
        return rep;
    }

    // ---- verification plane ----------------------------------------------------

    // Quiescent classification used by the leak sweep.
    enum class SlotClass { Free, Live, PendingReuse };

    struct SweepResult {
        uint64_t free_slots = 0;
        uint64_t live = 0;
        uint64_t pending = 0;
        std::vector<std::pair<size_t, uint64_t>> violations;  // (class, slot idx)
    };

    // Every slot must be free, meta-referenced, or locally pending/fresh.
    SweepResult leak_sweep() const {
        SweepResult r;
        std::unordered_set<uint64_t> referenced;
        for (uint64_t s = 0; s < lay_.meta_slots(); s++) {
            MetaImage m = meta_from_bytes(fab_.peek(lay_.meta_addr(s), 16));
            if (m.dptr != kNullVPtr) referenced.insert(vptr_offset(m.dptr));
        }
        std::vector<std::unordered_set<uint64_t>> local_free(lay_.class_count());
        std::vector<std::unordered_set<uint64_t>> local_pending(lay_.class_count());
        for (ClientId c = 0; c < arenas_.size(); c++) {
            for (size_t cls = 0; cls < lay_.class_count(); cls++) {
                const ClassArena& ca = arenas_[c].per_class[cls];
                for (uint64_t idx : ca.free_fresh) local_free[cls].insert(idx);
                for (auto& rt : ca.retired)
                    local_pending[cls].insert(lay_.slot_index(cls, vptr_offset(rt.ptr)));
                auto [lo, hi] = partition(c, cls);
                for (uint64_t idx = ca.next_fresh; idx < hi; idx++) local_free[cls].insert(idx);
            }
            // ring-recorded retirees (crash records from repairers) are
            // accounted-for until the partition owner reclaims them
            uint64_t n = std::min(arenas_[c].ring_cursor, lay_.ring_entries_per_client());
            for (uint64_t i = 0; i < n; i++) {
                VPtr p = fab_.peek_u64(lay_.ring_entry(c, i));
                if (p == kNullVPtr) continue;
                size_t cls = lay_.class_of_pool_off(vptr_offset(p));
                local_pending[cls].insert(lay_.slot_index(cls, vptr_offset(p)));
            }
        }
        for (size_t cls = 0; cls < lay_.class_count(); cls++) {
            for (uint64_t idx = 0; idx < lay_.slab(cls).slot_count; idx++) {
                uint8_t marked = *fab_.peek(lay_.bitmap_addr(cls, idx), 1);
                uint64_t pool_off = lay_.slot_pool_off(cls, idx);
                bool is_ref = referenced.count(pool_off) > 0;
                if (is_ref) {
                    r.live++;
                } else if (local_pending[cls].count(idx)) {
                    r.pending++;
                } else if (!marked || local_free[cls].count(idx)) {
                    r.free_slots++;
                } else {
                    r.violations.push_back({cls, idx});
                }
            }
        }
        return r;
    }

    uint16_t generation_of(VPtr p) const {
        size_t cls = lay_.class_of_pool_off(vptr_offset(p));
        return slot_state_[cls][lay_.slot_index(cls, vptr_offset(p))].generation;
    }

private:
    struct Retired {
        VPtr ptr;
        uint16_t gate_owner;  // kNoLogOwner when already gated
        uint64_t retired_at_ms;
    };

    struct PendingUpdate {
        enum Kind { Bitmap, GenTab, RingHead } kind;
        size_t cls;
        uint64_t idx;
        uint64_t value;
    };

    struct ClassArena {
        std::deque<uint64_t> free_fresh;  // reserved-but-unused slot indexes
        std::vector<Retired> retired;
        uint64_t next_fresh = UINT64_MAX;  // next unreserved slot (lazy init)
    };

    struct Arena {
        std::vector<ClassArena> per_class;
        std::vector<PendingUpdate> batch;
        std::optional<uint64_t> batch_since_ms;
        std::set<uint16_t> done_owners;
        std::set<VPtr> retired_seen;  // double-retire guard
        uint64_t ring_cursor = 0;
    };

    struct SlotState {
        uint16_t generation = 0;
        bool installed = false;
    };

    std::pair<uint64_t, uint64_t> partition(ClientId c, size_t cls) const {
        uint64_t per = lay_.slab(cls).slot_count / arenas_.size();
        return {c * per, (c + 1) * per};
    }

    SlotState& state_of(VPtr p, size_t cls) {
        return slot_state_[cls][lay_.slot_index(cls, vptr_offset(p))];
    }
    const SlotState& state_of(VPtr p, size_t cls) const {
        return slot_state_[cls][lay_.slot_index(cls, vptr_offset(p))];
    }

    bool gate_open(const Arena& ar, const Retired& r) const {
        return r.gate_owner == kNoLogOwner || ar.done_owners.count(r.gate_owner) > 0;
    }

    void ring_append(ClientId c, VPtr p) {
        Arena& ar = arenas_.at(c);
        fab_.write_u64(c, lay_.ring_entry(c, ar.ring_cursor), p, OpTag::Reclaim);
        ar.ring_cursor++;
        batch_append(c, PendingUpdate{PendingUpdate::RingHead, 0, 0, ar.ring_cursor});
    }

    void push_retired(ClientId c, VPtr p, uint16_t owner) {
        Arena& ar = arenas_.at(c);
        if (!ar.retired_seen.insert(p).second) return;  // idempotent double retire
        size_t cls = lay_.class_of_pool_off(vptr_offset(p));
        SlotState& st = state_of(p, cls);
        if (st.generation == vptr_version(p)) st.installed = false;
        ar.per_class[cls].retired.push_back(Retired{p, owner, fab_.clock_now_ms(c)});
        if (ar.per_class[cls].retired.size() > lay_.ring_entries_per_client())
            throw BackpressureError("reclamation backlog exceeds ring segment");
    }

    VPtr take_slot(ClientId c, size_t cls, uint64_t idx) {
        SlotState& st = slot_state_[cls][idx];
        st.generation = uint16_t(st.generation + 1);  // wraps mod 2^16 by design
        st.installed = false;
        batch_append(c, PendingUpdate{PendingUpdate::GenTab, cls, idx, st.generation});
        // drop the consumed double-retire guard entry of the prior generation
        arenas_.at(c).retired_seen.erase(make_vptr(lay_.slot_pool_off(cls, idx),
                                                   uint16_t(st.generation - 1)));
        return make_vptr(lay_.slot_pool_off(cls, idx), st.generation);
    }

    void reserve_chunk(ClientId c, size_t cls) {
        Arena& ar = arenas_.at(c);
        ClassArena& ca = ar.per_class[cls];
        auto [lo, hi] = partition(c, cls);
        if (ca.next_fresh == UINT64_MAX) ca.next_fresh = lo;
        if (ca.next_fresh >= hi) throw OutOfMemory("slab class arena exhausted");
        uint64_t n = std::min<uint64_t>(cfg_.chunk_slots, hi - ca.next_fresh);
        // eager allocation marks: the map may over-state, never under-state
        std::vector<uint8_t> ones(n, 1);
        fab_.write(c, lay_.bitmap_addr(cls, ca.next_fresh), ones, OpTag::Alloc);
        for (uint64_t i = 0; i < n; i++) ca.free_fresh.push_back(ca.next_fresh + i);
        ca.next_fresh += n;
    }

    std::span<const uint8_t> gentab_bytes(uint16_t gen) {
        scratch_gentab_ = uint32_t(gen) | (uint32_t(gen) << 16);  // generation doubles as incarnation
        return {reinterpret_cast<const uint8_t*>(&scratch_gentab_), 4};
    }

    void batch_append(ClientId c, PendingUpdate u) {
        Arena& ar = arenas_.at(c);
        ar.batch.push_back(u);
        if (!ar.batch_since_ms) ar.batch_since_ms = fab_.clock_now_ms(c);
        maybe_flush(c);
    }

    void maybe_flush(ClientId c) {
        Arena& ar = arenas_.at(c);
        if (ar.batch.empty()) return;
        bool by_count = ar.batch.size() >= cfg_.batch_max;
        bool by_time = ar.batch_since_ms &&
                       fab_.clock_now_ms(c) >= *ar.batch_since_ms + cfg_.batch_interval_ms;
        if (by_count || by_time) flush(c);
    }

    void apply_update(ClientId c, const PendingUpdate& u) {
        switch (u.kind) {
            case PendingUpdate::Bitmap: {
                uint8_t v = uint8_t(u.value);
                fab_.write(c, lay_.bitmap_addr(u.cls, u.idx), std::span(&v, 1), OpTag::Alloc);
                break;
            }
            case PendingUpdate::GenTab:
                fab_.write(c, lay_.gentab_addr(u.cls, u.idx), gentab_bytes(uint16_t(u.value)),
                           OpTag::Alloc);
                break;
            case PendingUpdate::RingHead:
                fab_.write_u64(c, lay_.ring_head(c), u.value, OpTag::Alloc);
                break;
        }
    }

    Fabric& fab_;
    const Layout& lay_;
    Config cfg_;
    std::vector<Arena> arenas_;
    std::vector<std::vector<SlotState>> slot_state_;
    uint32_t scratch_gentab_ = 0;
};

} // namespace rtx
