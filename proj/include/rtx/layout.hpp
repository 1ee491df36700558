#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rtx/fabric.hpp"
#include "rtx/lllock.hpp"

namespace rtx {

// ---------------------------------------------------------------------------
// MN address space (normative, see docs/formats.md):
//
//   [0, 4096)           layout header page (geometry + index anchors)
//   [log_array ...]     one fixed log slot per owner id (slot 0 unused)
//   [alloc region ...]  per-class allocation bitmaps + generation tables,
//                       per-client reclamation ring segments
//   [meta pool ...]     16 B TXObj metadata: {LLLock word, versioned dptr}
//   [data pool ...]     per-class 64 B aligned buffer slots
//
// Log slot: word0 = {state:2 | repair_lease_ms:48 | entry_count:14},
//           word1 = checksum (the writing rTX's lock word),
//           entries[i] = {mptr, old_dptr, new_dptr}, 24 B each.
// ---------------------------------------------------------------------------

// Versioned data pointer: 48-bit data-pool byte offset | 16-bit generation.
using VPtr = uint64_t;

inline VPtr make_vptr(uint64_t pool_off, uint16_t version) {
    return (pool_off << 16) | version;
}
inline uint64_t vptr_offset(VPtr p) { return p >> 16; }
inline uint16_t vptr_version(VPtr p) { return uint16_t(p & 0xffff); }

constexpr VPtr kNullVPtr = 0;

// Log header word0 fields.
enum class LogStatus : uint8_t { Init = 0, Doing = 1, Abort = 2, Done = 3 };

inline uint64_t make_log_word0(LogStatus s, uint64_t repair_lease_ms, uint32_t count) {
    return (uint64_t(s) << 62) | ((repair_lease_ms & kLeaseMask) << 14) | (count & 0x3fff);
}
inline LogStatus log_status(uint64_t w0) { return LogStatus(w0 >> 62); }
inline uint64_t log_repair_lease(uint64_t w0) { return (w0 >> 14) & kLeaseMask; }
inline uint32_t log_entry_count(uint64_t w0) { return uint32_t(w0 & 0x3fff); }

struct LogEntry {
    uint64_t mptr = 0;
    VPtr old_dptr = 0;
    VPtr new_dptr = 0;
};
constexpr uint64_t kLogHeaderBytes = 16;
constexpr uint64_t kLogEntryBytes = 24;

struct SlabClassGeom {
    uint64_t payload_size = 0;  // bytes usable by a buffer
    uint64_t slot_size = 0;     // 64 B aligned slot stride
    uint64_t slot_count = 0;
    uint64_t slots_off = 0;     // data-pool-relative? absolute MN offset
    uint64_t bitmap_off = 0;    // 1 byte per slot (simple, still MN-resident)
    uint64_t gentab_off = 0;    // 4 B per slot: generation u16 | incarnation u16
};

struct LayoutConfig {
    uint32_t max_clients = 16;
    uint32_t max_writeset = 8;
    uint64_t meta_slots = 1 << 16;
    // payload sizes and per-class slot counts
    std::vector<std::pair<uint64_t, uint64_t>> classes = {
        {64, 1 << 14}, {1024, 1 << 13}, {4096, 1 << 10}, {8192, 1 << 8}};
    uint64_t ring_entries_per_client = 4096;
};

class Layout {
public:
    static constexpr uint64_t kHeaderMagic = 0x52545844'4c415931ull;  // "RTXD LAY1"
    static constexpr uint64_t kPage = 4096;

    Layout() = default;

    // Computes the region map; fits must hold within mn_size.
    static Layout plan(const LayoutConfig& cfg, uint64_t mn_size) {
        Layout l;
        l.cfg_ = cfg;
        uint64_t at = kPage;

        l.log_slot_size_ = align64(kLogHeaderBytes + cfg.max_writeset * kLogEntryBytes);
        l.log_array_off_ = at;
        l.log_slots_ = cfg.max_clients + 1;  // owner ids 1..max_clients; slot 0 unused
        at += l.log_slot_size_ * l.log_slots_;

        l.ring_off_ = align64(at);
        l.ring_seg_entries_ = cfg.ring_entries_per_client;
        // per client: head counter word + entries
        l.ring_seg_size_ = align64(8 + 8 * l.ring_seg_entries_);
        at = l.ring_off_ + l.ring_seg_size_ * cfg.max_clients;

        for (auto [payload, count] : cfg.classes) {
            SlabClassGeom g;
            g.payload_size = payload;
            g.slot_size = align64(payload);
            g.slot_count = count;
            g.bitmap_off = align64(at);
            at = g.bitmap_off + count;  // 1 byte per slot
            g.gentab_off = align64(at);
            at = g.gentab_off + 4 * count;
            l.classes_.push_back(g);
        }

        l.meta_pool_off_ = align64(at);
        at = l.meta_pool_off_ + 16 * cfg.meta_slots;

        l.data_pool_off_ = align64(at);
        uint64_t pool = 64;  // data-pool offset 0 reserved so vptr 0 stays null
        for (auto& g : l.classes_) {
            g.slots_off = pool;
            pool += g.slot_size * g.slot_count;
        }
        l.data_pool_size_ = pool;
        at = l.data_pool_off_ + pool;

        if (at > mn_size)
            throw ConfigError("MN size too small for layout: need " + std::to_string(at));
        l.total_ = at;
        return l;
    }

    // Writes the layout header into page 0 (verification-plane poke; done once
    // at world setup by the loader before clients run).
    void install(Fabric& fab) const {
        std::vector<uint64_t> w;
        w.push_back(kHeaderMagic);
        w.push_back(1);  // format version
        w.push_back(fab.size());
        w.push_back(cfg_.max_clients);
        w.push_back(cfg_.max_writeset);
        w.push_back(log_array_off_);
        w.push_back(log_slot_size_);
        w.push_back(log_slots_);
        w.push_back(ring_off_);
        w.push_back(ring_seg_size_);
        w.push_back(ring_seg_entries_);
        w.push_back(meta_pool_off_);
        w.push_back(cfg_.meta_slots);
        w.push_back(data_pool_off_);
        w.push_back(data_pool_size_);
        w.push_back(anchor_tree_);
        w.push_back(anchor_hash_);
        w.push_back(classes_.size());
        for (auto& g : classes_) {
            w.push_back(g.payload_size);
            w.push_back(g.slot_size);
            w.push_back(g.slot_count);
            w.push_back(g.slots_off);
            w.push_back(g.bitmap_off);
            w.push_back(g.gentab_off);
        }
        fab.poke({0}, std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(w.data()),
                                               w.size() * 8));
    }

    // ---- log slots ----------------------------------------------------------

    MemAddr log_slot(uint16_t owner) const {
        if (owner == 0 || owner >= log_slots_)
            throw ContractViolation("bad owner id for log slot");
        return {log_array_off_ + owner * log_slot_size_};
    }
    MemAddr log_word0(uint16_t owner) const { return log_slot(owner); }
    MemAddr log_word1(uint16_t owner) const { return {log_slot(owner).offset + 8}; }
    MemAddr log_entry_addr(uint16_t owner, uint32_t i) const {
        return {log_slot(owner).offset + kLogHeaderBytes + i * kLogEntryBytes};
    }
    uint64_t log_slot_size() const { return log_slot_size_; }

    // ---- metas --------------------------------------------------------------

    MemAddr meta_addr(uint64_t meta_slot) const {
        return {meta_pool_off_ + meta_slot * 16};
    }
    uint64_t meta_slot_of(uint64_t mptr) const { return (mptr - meta_pool_off_) / 16; }
    bool is_meta_addr(uint64_t off) const {
        return off >= meta_pool_off_ && off < meta_pool_off_ + cfg_.meta_slots * 16;
    }
    uint64_t meta_slots() const { return cfg_.meta_slots; }

    // ---- data pool ----------------------------------------------------------

    MemAddr data_addr(VPtr p) const { return {data_pool_off_ + vptr_offset(p)}; }
    uint64_t data_pool_off() const { return data_pool_off_; }

    size_t class_count() const { return classes_.size(); }
    const SlabClassGeom& slab(size_t i) const { return classes_.at(i); }
    // Class of a data-pool-relative offset (regions are contiguous per class).
    size_t class_of_pool_off(uint64_t pool_off) const {
        for (size_t i = 0; i < classes_.size(); i++) {
            auto& g = classes_[i];
            if (pool_off >= g.slots_off && pool_off < g.slots_off + g.slot_size * g.slot_count)
                return i;
        }
        throw AddressFault("offset not in any slab class");
    }
    size_t class_for_payload(uint64_t bytes) const {
        for (size_t i = 0; i < classes_.size(); i++)
            if (classes_[i].payload_size >= bytes) return i;
        throw ConfigError("no slab class fits payload of " + std::to_string(bytes));
    }
    uint64_t slot_index(size_t cls, uint64_t pool_off) const {
        return (pool_off - classes_[cls].slots_off) / classes_[cls].slot_size;
    }
    uint64_t slot_pool_off(size_t cls, uint64_t idx) const {
        return classes_[cls].slots_off + idx * classes_[cls].slot_size;
    }
    MemAddr bitmap_addr(size_t cls, uint64_t idx) const {
        return {classes_[cls].bitmap_off + idx};
    }
    MemAddr gentab_addr(size_t cls, uint64_t idx) const {
        return {classes_[cls].gentab_off + 4 * idx};
    }

    // ---- reclamation ring ----------------------------------------------------

    MemAddr ring_head(ClientId c) const { return {ring_off_ + c * ring_seg_size_}; }
    MemAddr ring_entry(ClientId c, uint64_t i) const {
        return {ring_off_ + c * ring_seg_size_ + 8 + 8 * (i % ring_seg_entries_)};
    }
    uint64_t ring_entries_per_client() const { return ring_seg_entries_; }

    // ---- anchors -------------------------------------------------------------

    void set_anchor_tree(uint64_t mptr) { anchor_tree_ = mptr; }
    void set_anchor_hash(uint64_t mptr) { anchor_hash_ = mptr; }
    uint64_t anchor_tree() const { return anchor_tree_; }
    uint64_t anchor_hash() const { return anchor_hash_; }

    const LayoutConfig& config() const { return cfg_; }
    uint64_t bytes_used() const { return total_; }

private:
    static uint64_t align64(uint64_t v) { return (v + 63) & ~uint64_t(63); }

    LayoutConfig cfg_;
    uint64_t log_array_off_ = 0, log_slot_size_ = 0, log_slots_ = 0;
    uint64_t ring_off_ = 0, ring_seg_size_ = 0, ring_seg_entries_ = 0;
    uint64_t meta_pool_off_ = 0;
    uint64_t data_pool_off_ = 0, data_pool_size_ = 0;
    uint64_t anchor_tree_ = 0, anchor_hash_ = 0;
    uint64_t total_ = 0;
    std::vector<SlabClassGeom> classes_;
};

// 16 B TXObj metadata image as read/validated by transactions.
struct MetaImage {
    LockWord lock = 0;
    VPtr dptr = 0;
    bool operator==(const MetaImage&) const = default;
};

inline MetaImage meta_from_bytes(const uint8_t* p) {
    MetaImage m;
    std::memcpy(&m.lock, p, 8);
    std::memcpy(&m.dptr, p + 8, 8);
    return m;
}

} // namespace rtx
