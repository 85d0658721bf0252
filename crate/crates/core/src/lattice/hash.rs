//! Open-addressing table mapping integer lattice keys to dense vertex ids.
//!
//! Vertex ids are handed out in insertion order, so the layout of a lattice
//! depends only on the order in which points are inserted, never on the
//! probing sequence.

const EMPTY: u32 = u32::MAX;

pub(crate) struct KeyTable {
    key_len: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
    mask: usize,
}

impl KeyTable {
    pub(crate) fn with_capacity(key_len: usize, min_capacity: usize) -> Self {
        let capacity = min_capacity.max(16).next_power_of_two();
        Self {
            key_len,
            keys: Vec::new(),
            slots: vec![EMPTY; capacity],
            mask: capacity - 1,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.keys.len() / self.key_len.max(1)
    }

    pub(crate) fn key(&self, id: usize) -> &[i32] {
        &self.keys[id * self.key_len..(id + 1) * self.key_len]
    }

    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0;
        for &k in key {
            h = h.wrapping_add(k as i64 as u64).wrapping_mul(2_531_011);
        }
        // fold high bits in; the multiplier leaves low bits poorly mixed
        (h ^ (h >> 29)) as usize
    }

    fn probe(&self, key: &[i32]) -> (usize, Option<u32>) {
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let id = self.slots[slot];
            if id == EMPTY {
                return (slot, None);
            }
            if self.key(id as usize) == key {
                return (slot, Some(id));
            }
            slot = (slot + 1) & self.mask;
        }
    }

    pub(crate) fn find(&self, key: &[i32]) -> Option<u32> {
        self.probe(key).1
    }

    /// Returns the id of `key`, inserting it if absent.
    pub(crate) fn find_or_insert(&mut self, key: &[i32]) -> u32 {
        debug_assert_eq!(key.len(), self.key_len);
        if let (_, Some(id)) = self.probe(key) {
            return id;
        }
        if 2 * (self.len() + 1) > self.slots.len() {
            self.grow();
        }
        let (slot, _) = self.probe(key);
        let id = self.len() as u32;
        self.keys.extend_from_slice(key);
        self.slots[slot] = id;
        id
    }

    fn grow(&mut self) {
        let capacity = self.slots.len() * 2;
        self.slots = vec![EMPTY; capacity];
        self.mask = capacity - 1;
        for id in 0..self.len() {
            let mut slot = Self::hash(self.key(id)) & self.mask;
            while self.slots[slot] != EMPTY {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = id as u32;
        }
    }
}
