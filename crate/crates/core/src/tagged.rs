//! Bit manipulation for references that smuggle metadata in their low bits:
//! a one-bit deletion mark (link-free) or a two-bit node state (SOFT).

/// Harris-style mark bit in bit 0.
pub mod mark {
    pub const MARK: u64 = 1;

    #[inline]
    pub fn is_marked(raw: u64) -> bool {
        raw & MARK != 0
    }

    #[inline]
    pub fn get_ref(raw: u64) -> u64 {
        raw & !MARK
    }

    #[inline]
    pub fn mark(raw: u64) -> u64 {
        raw | MARK
    }
}

/// Two state bits in bits 0..2.
pub mod state {
    pub const STATE_MASK: u64 = 0b11;

    #[inline]
    pub fn create_ref(addr: u64, state: u64) -> u64 {
        debug_assert_eq!(addr & STATE_MASK, 0, "address must be 4-byte aligned");
        addr | state
    }

    #[inline]
    pub fn get_ref(raw: u64) -> u64 {
        raw & !STATE_MASK
    }

    #[inline]
    pub fn get_state(raw: u64) -> u64 {
        raw & STATE_MASK
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mark_roundtrip() {
        let r = 0xabcd_ef00u64;
        assert!(!mark::is_marked(r));
        assert!(mark::is_marked(mark::mark(r)));
        assert_eq!(mark::get_ref(mark::mark(r)), r);
    }

    #[test]
    fn state_roundtrip() {
        let addr = 0x1000u64;
        for s in 0..4 {
            let r = state::create_ref(addr, s);
            assert_eq!(state::get_state(r), s);
            assert_eq!(state::get_ref(r), addr);
        }
    }
}
