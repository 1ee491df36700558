#pragma once

#include <cstdint>
#include <stdexcept>

namespace rtx {

// 8-byte logged lease lock word.
//
// Locked form:   bit 63 = 1 | bits 15..62 = lease (POSIX ms, 48 bit)
//                         | bits  0..14 = owner rTX id (15 bit)
// Unlocked form: bit 63 = 0 | bits  0..62 = version (63 bit)
//
// Owner id 0 is reserved: a locked word with owner 0 means the holder wrote
// no log (single-object commit). The unlock value of a locked word is the
// same word with bit 63 cleared, so any releaser (holder or repairer)
// produces the same unique version word.

using LockWord = uint64_t;

constexpr uint64_t kLockBit    = 1ull << 63;
constexpr uint64_t kLeaseMask  = (1ull << 48) - 1;
constexpr uint64_t kOwnerMask  = (1ull << 15) - 1;
constexpr uint16_t kNoLogOwner = 0;

struct EncodingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

inline bool lock_is_locked(LockWord w) { return (w & kLockBit) != 0; }

inline LockWord encode_locked(uint64_t lease_ms, uint16_t owner_id) {
    if (lease_ms > kLeaseMask) throw EncodingError("lease exceeds 48 bits");
    if (owner_id > kOwnerMask) throw EncodingError("owner id exceeds 15 bits");
    return kLockBit | (lease_ms << 15) | owner_id;
}

inline uint64_t lock_lease_ms(LockWord w) { return (w >> 15) & kLeaseMask; }
inline uint16_t lock_owner(LockWord w) { return static_cast<uint16_t>(w & kOwnerMask); }
inline uint64_t lock_version(LockWord w) { return w & ~kLockBit; }

struct LockState {
    bool locked = false;
    uint64_t lease_ms = 0;  // locked form only
    uint16_t owner = 0;     // locked form only
    uint64_t version = 0;   // unlocked form only
};

inline LockState decode_lock(LockWord w) {
    LockState s;
    s.locked = lock_is_locked(w);
    if (s.locked) {
        s.lease_ms = lock_lease_ms(w);
        s.owner = lock_owner(w);
    } else {
        s.version = lock_version(w);
    }
    return s;
}

// Deterministic unlock value: clear the lock bit, keep (lease, owner) as the
// new ABA version. Unique per transaction given per-owner lease monotonicity.
inline LockWord unlock_value(LockWord locked) {
    if (!lock_is_locked(locked)) throw ContractViolation("unlock_value on unlocked word");
    return locked & ~kLockBit;
}

// Expiry is strict: the lease instant itself is still valid.
inline bool is_expired(LockWord locked, uint64_t now_ms) {
    if (!lock_is_locked(locked)) throw ContractViolation("is_expired on unlocked word");
    return now_ms > lock_lease_ms(locked);
}

} // namespace rtx
