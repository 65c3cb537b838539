//! On-chip storage model: set-associative LRU caches with miss merging and
//! line pinning, the banked feature address map, and a fixed-latency DRAM.

use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{vertex_class, vertex_rank_in_class, CLASS_COUNTS, VERTICES_PER_FINE};

pub const FEATURE_BANKS: usize = 8;
pub const DEFAULT_LINE_BYTES: usize = 32;
pub const DEFAULT_WAYS: usize = 4;

/// Bank holding vertex class `class` of the fine voxel stored at `index`.
/// Rotating by the index balances bank depth while keeping the eight
/// corners of any micro voxel (eight distinct classes) on distinct banks.
pub fn bank_of(vertex_class: usize, index: usize) -> usize {
    (vertex_class + index) % FEATURE_BANKS
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("every way of set {set} is pinned")]
    SetPinned { set: usize },
    #[error("release of unpinned line {0:#x}")]
    ReleaseUnpinned(u64),
    #[error("line {0:#x} is neither resident nor in flight")]
    NotPresent(u64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    /// Misses that joined an in-flight fetch.
    pub merged: u64,
    /// Misses on lines never fetched before.
    pub cold_misses: u64,
    pub evictions: u64,
    /// Lines fetched from DRAM.
    pub fetches: u64,
}

impl CacheCounters {
    pub fn add(&mut self, o: &CacheCounters) {
        self.accesses += o.accesses;
        self.hits += o.hits;
        self.misses += o.misses;
        self.merged += o.merged;
        self.cold_misses += o.cold_misses;
        self.evictions += o.evictions;
        self.fetches += o.fetches;
    }

    /// Plain hits over accesses.
    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 { 1.0 } else { self.hits as f64 / self.accesses as f64 }
    }

    /// Fraction of non-compulsory accesses served without a new DRAM fetch.
    /// Merged misses count as served: they ride an in-flight line.
    pub fn steady_state_hit_rate(&self) -> f64 {
        let warm = self.accesses.saturating_sub(self.cold_misses);
        let refetches = self.fetches.saturating_sub(self.cold_misses);
        if warm == 0 { 1.0 } else { 1.0 - refetches as f64 / warm as f64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss { merged: bool },
    /// No MSHR entry was free; nothing was recorded.
    MshrFull,
}

/// Miss status holding registers: in-flight line -> waiting requesters.
#[derive(Clone, Debug, Default)]
pub struct Mshr {
    capacity: usize,
    entries: BTreeMap<u64, Vec<u64>>,
}

impl Mshr {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: BTreeMap::new() }
    }

    pub fn in_flight(&self, line: u64) -> bool {
        self.entries.contains_key(&line)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// `Some(merged)` on success, `None` when a new entry is needed but the
    /// table is full.
    pub fn allocate(&mut self, line: u64, requester: u64) -> Option<bool> {
        if let Some(w) = self.entries.get_mut(&line) {
            w.push(requester);
            return Some(true);
        }
        if self.is_full() {
            return None;
        }
        self.entries.insert(line, vec![requester]);
        Some(false)
    }

    pub fn complete(&mut self, line: u64) -> Vec<u64> {
        self.entries.remove(&line).unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug)]
struct Way {
    line: u64,
    stamp: u64,
}

/// Set-associative cache with LRU replacement, an MSHR and a reservation
/// monitor. Pinned lines are never chosen as victims.
#[derive(Clone, Debug)]
pub struct CacheModel {
    line_bytes: usize,
    ways: usize,
    sets: Vec<Vec<Way>>,
    clock: u64,
    mshr: Mshr,
    pins: HashMap<u64, u32>,
    pinned_per_set: Vec<usize>,
    seen: HashSet<u64>,
    counters: CacheCounters,
}

impl CacheModel {
    pub fn new(capacity_bytes: usize, line_bytes: usize, ways: usize, mshr_entries: usize) -> Self {
        assert!(line_bytes > 0 && ways > 0 && mshr_entries > 0, "cache geometry must be positive");
        let lines = (capacity_bytes / line_bytes).max(ways);
        let n_sets = (lines / ways).max(1);
        Self {
            line_bytes,
            ways,
            sets: vec![Vec::with_capacity(ways); n_sets],
            clock: 0,
            mshr: Mshr::new(mshr_entries),
            pins: HashMap::new(),
            pinned_per_set: vec![0; n_sets],
            seen: HashSet::new(),
            counters: CacheCounters::default(),
        }
    }

    pub fn line_bytes(&self) -> usize {
        self.line_bytes
    }

    pub fn set_count(&self) -> usize {
        self.sets.len()
    }

    pub fn capacity_bytes(&self) -> usize {
        self.sets.len() * self.ways * self.line_bytes
    }

    /// Set index with the higher address digits folded in, so strided
    /// streams (one line per z-slab, say) spread over all sets.
    pub fn set_of(&self, line: u64) -> usize {
        let n = self.sets.len() as u64;
        if n == 1 {
            return 0;
        }
        let (mut rest, mut acc) = (line, 0u64);
        while rest > 0 {
            acc += rest % n;
            rest /= n;
        }
        (acc % n) as usize
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn mshr(&self) -> &Mshr {
        &self.mshr
    }

    pub fn is_resident(&self, line: u64) -> bool {
        self.sets[self.set_of(line)].iter().any(|w| w.line == line)
    }

    pub fn resident_lines(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// Looks up `line` on behalf of `requester`. A fresh miss allocates an
    /// MSHR entry; the caller then issues the DRAM fetch.
    pub fn access(&mut self, line: u64, requester: u64) -> Access {
        let set = self.set_of(line);
        self.clock += 1;
        if let Some(w) = self.sets[set].iter_mut().find(|w| w.line == line) {
            w.stamp = self.clock;
            self.counters.accesses += 1;
            self.counters.hits += 1;
            return Access::Hit;
        }
        let Some(merged) = self.mshr.allocate(line, requester) else {
            return Access::MshrFull;
        };
        self.counters.accesses += 1;
        self.counters.misses += 1;
        if merged {
            self.counters.merged += 1;
        } else {
            self.counters.fetches += 1;
            if self.seen.insert(line) {
                self.counters.cold_misses += 1;
            }
        }
        Access::Miss { merged }
    }

    /// Installs a fetched line, evicting the least recently used unpinned
    /// way if the set is full. Returns the requesters waiting on it.
    pub fn fill(&mut self, line: u64) -> Result<Vec<u64>, MemoryError> {
        let set = self.set_of(line);
        self.clock += 1;
        let stamp = self.clock;
        if self.sets[set].len() < self.ways {
            self.sets[set].push(Way { line, stamp });
        } else {
            let pins = &self.pins;
            let victim = self.sets[set]
                .iter()
                .enumerate()
                .filter(|(_, w)| !pins.contains_key(&w.line))
                .min_by_key(|(_, w)| w.stamp)
                .map(|(i, _)| i)
                .ok_or(MemoryError::SetPinned { set })?;
            self.sets[set][victim] = Way { line, stamp };
            self.counters.evictions += 1;
        }
        Ok(self.mshr.complete(line))
    }

    pub fn pin(&mut self, line: u64) -> Result<(), MemoryError> {
        if !self.is_resident(line) && !self.mshr.in_flight(line) {
            return Err(MemoryError::NotPresent(line));
        }
        self.pin_unchecked(line);
        Ok(())
    }

    fn pin_unchecked(&mut self, line: u64) {
        let set = self.set_of(line);
        let c = self.pins.entry(line).or_insert(0);
        if *c == 0 {
            self.pinned_per_set[set] += 1;
        }
        *c += 1;
    }

    pub fn release(&mut self, line: u64) -> Result<(), MemoryError> {
        let set = self.set_of(line);
        match self.pins.get_mut(&line) {
            None => Err(MemoryError::ReleaseUnpinned(line)),
            Some(c) => {
                *c -= 1;
                if *c == 0 {
                    self.pins.remove(&line);
                    self.pinned_per_set[set] -= 1;
                }
                Ok(())
            }
        }
    }

    pub fn pin_count(&self, line: u64) -> u32 {
        self.pins.get(&line).copied().unwrap_or(0)
    }

    pub fn total_pins(&self) -> u64 {
        self.pins.values().map(|&c| c as u64).sum()
    }

    /// Whether pinning all of `lines` (distinct) keeps every set with at
    /// most `ways` distinct pinned lines, so each future fill finds a victim.
    pub fn can_reserve(&self, lines: &[u64]) -> bool {
        let mut extra: HashMap<usize, usize> = HashMap::new();
        for &l in lines {
            if !self.pins.contains_key(&l) {
                *extra.entry(self.set_of(l)).or_insert(0) += 1;
            }
        }
        extra.iter().all(|(&s, &n)| self.pinned_per_set[s] + n <= self.ways)
    }

    /// Pins lines without a presence check; used when reserving ahead of
    /// the access that will bring them in.
    pub fn reserve(&mut self, lines: &[u64]) {
        for &l in lines {
            self.pin_unchecked(l);
        }
    }
}

/// Fixed-latency external memory with transfer counters.
#[derive(Clone, Debug)]
pub struct DramModel {
    pub latency: u64,
    pub e_dram: f64,
    pub e_sram: f64,
    lines: u64,
    seq: u64,
    pending: BinaryHeap<Reverse<(u64, u64, usize, u64)>>,
}

impl DramModel {
    pub fn new(latency: u64, e_dram: f64, e_sram: f64) -> Self {
        Self { latency, e_dram, e_sram, lines: 0, seq: 0, pending: BinaryHeap::new() }
    }

    /// Starts a line fetch for cache `cache`; it lands at `now + latency`.
    pub fn request(&mut self, now: u64, cache: usize, line: u64) {
        self.lines += 1;
        self.seq += 1;
        self.pending.push(Reverse((now + self.latency, self.seq, cache, line)));
    }

    /// Fetches that have landed by `now`, in request order.
    pub fn arrivals(&mut self, now: u64) -> Vec<(usize, u64)> {
        let mut out = Vec::new();
        while let Some(Reverse((t, _, c, l))) = self.pending.peek().copied() {
            if t > now {
                break;
            }
            self.pending.pop();
            out.push((c, l));
        }
        out
    }

    pub fn next_arrival(&self) -> Option<u64> {
        self.pending.peek().map(|Reverse((t, ..))| *t)
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn lines_fetched(&self) -> u64 {
        self.lines
    }
}

/// Byte layout of the feature store across the eight banks: bank-major,
/// then slot order, then vertex rank within its class. Each vector takes
/// `ceil(F / 2)` bytes.
#[derive(Clone, Debug)]
pub struct FeatureAddressMap {
    vector_bytes: usize,
    line_bytes: usize,
    /// Per bank, vector offset of every slot's group.
    offsets: [Vec<u32>; FEATURE_BANKS],
    depths: [usize; FEATURE_BANKS],
}

impl FeatureAddressMap {
    pub fn new(slot_count: usize, feature_dim: usize, line_bytes: usize) -> Self {
        let mut offsets: [Vec<u32>; FEATURE_BANKS] = Default::default();
        let mut depths = [0usize; FEATURE_BANKS];
        for slot in 0..slot_count {
            for class in 0..FEATURE_BANKS {
                let b = bank_of(class, slot);
                offsets[b].push(depths[b] as u32);
                depths[b] += CLASS_COUNTS[class];
            }
        }
        debug_assert_eq!(depths.iter().sum::<usize>(), slot_count * VERTICES_PER_FINE);
        Self { vector_bytes: feature_dim.div_ceil(2), line_bytes, offsets, depths }
    }

    /// (bank, line) holding vertex `vertex` of `slot`.
    pub fn locate(&self, slot: usize, vertex: usize) -> (usize, u64) {
        let bank = bank_of(vertex_class_of(vertex), slot);
        let vec = self.offsets[bank][slot] as usize + vertex_rank_in_class(vertex);
        (bank, (vec * self.vector_bytes / self.line_bytes) as u64)
    }

    /// Feature vectors stored per bank.
    pub fn bank_depths(&self) -> [usize; FEATURE_BANKS] {
        self.depths
    }

    pub fn depth_ratio(&self) -> f64 {
        let max = *self.depths.iter().max().unwrap_or(&0);
        let min = *self.depths.iter().min().unwrap_or(&0);
        if min == 0 {
            if max == 0 { 1.0 } else { f64::INFINITY }
        } else {
            max as f64 / min as f64
        }
    }
}

fn vertex_class_of(vertex: usize) -> usize {
    vertex_class([vertex % 5, (vertex / 5) % 5, vertex / 25])
}

/// Aggregated memory counters at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryCounters {
    pub micro_grid: CacheCounters,
    pub feature: CacheCounters,
    pub mlp: CacheCounters,
    pub dram_lines: u64,
    pub ema_bytes: u64,
    pub sram_accesses: u64,
    pub energy: f64,
}

/// The three caches (features split over eight banks) plus DRAM.
#[derive(Clone, Debug)]
pub struct MemorySystem {
    pub micro_grid: CacheModel,
    pub feature_banks: Vec<CacheModel>,
    pub mlp: CacheModel,
    pub dram: DramModel,
}

/// Cache indices used in DRAM requests.
pub const CACHE_MICRO: usize = 0;
pub const CACHE_MLP: usize = 1;
pub const CACHE_FEATURE0: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub micro_cache_bytes: usize,
    /// Total across the eight banks.
    pub feature_cache_bytes: usize,
    pub mlp_cache_bytes: usize,
    pub line_bytes: usize,
    pub ways: usize,
    pub mshr_entries: usize,
    pub dram_latency: u64,
    pub e_dram: f64,
    pub e_sram: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            micro_cache_bytes: 8 * 1024,
            feature_cache_bytes: 256 * 1024,
            mlp_cache_bytes: 8 * 1024 + 256,
            line_bytes: DEFAULT_LINE_BYTES,
            ways: DEFAULT_WAYS,
            mshr_entries: 8,
            dram_latency: 100,
            e_dram: 20.0,
            e_sram: 1.0,
        }
    }
}

impl MemorySystem {
    pub fn new(cfg: &MemoryConfig) -> Self {
        let mk = |bytes| CacheModel::new(bytes, cfg.line_bytes, cfg.ways, cfg.mshr_entries);
        Self {
            micro_grid: mk(cfg.micro_cache_bytes),
            feature_banks: (0..FEATURE_BANKS).map(|_| mk(cfg.feature_cache_bytes / FEATURE_BANKS)).collect(),
            mlp: mk(cfg.mlp_cache_bytes),
            dram: DramModel::new(cfg.dram_latency, cfg.e_dram, cfg.e_sram),
        }
    }

    pub fn cache_mut(&mut self, id: usize) -> &mut CacheModel {
        match id {
            CACHE_MICRO => &mut self.micro_grid,
            CACHE_MLP => &mut self.mlp,
            b => &mut self.feature_banks[b - CACHE_FEATURE0],
        }
    }

    pub fn cache(&self, id: usize) -> &CacheModel {
        match id {
            CACHE_MICRO => &self.micro_grid,
            CACHE_MLP => &self.mlp,
            b => &self.feature_banks[b - CACHE_FEATURE0],
        }
    }

    pub fn total_pins(&self) -> u64 {
        self.micro_grid.total_pins()
            + self.mlp.total_pins()
            + self.feature_banks.iter().map(CacheModel::total_pins).sum::<u64>()
    }

    pub fn counters_snapshot(&self) -> MemoryCounters {
        let mut feature = CacheCounters::default();
        for b in &self.feature_banks {
            feature.add(&b.counters());
        }
        let micro_grid = self.micro_grid.counters();
        let mlp = self.mlp.counters();
        let sram_accesses = micro_grid.accesses + feature.accesses + mlp.accesses;
        let dram_lines = self.dram.lines_fetched();
        MemoryCounters {
            micro_grid,
            feature,
            mlp,
            dram_lines,
            ema_bytes: dram_lines * self.micro_grid.line_bytes() as u64,
            sram_accesses,
            energy: sram_accesses as f64 * self.dram.e_sram + dram_lines as f64 * self.dram.e_dram,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rotation_at_index_zero() {
        for c in 0..8 {
            assert_eq!(bank_of(c, 0), c);
        }
    }

    #[test]
    fn eight_slots_balance_banks_exactly() {
        let m = FeatureAddressMap::new(8, 8, 32);
        assert_eq!(m.bank_depths(), [125; 8]);
        assert_eq!(m.depth_ratio(), 1.0);
    }

    #[test]
    fn cold_then_hit() {
        let mut c = CacheModel::new(1024, 32, 4, 8);
        assert_eq!(c.access(5, 0), Access::Miss { merged: false });
        c.fill(5).unwrap();
        assert_eq!(c.access(5, 0), Access::Hit);
        assert_eq!(c.counters().accesses, 2);
    }

    #[test]
    fn duplicate_miss_merges() {
        let mut c = CacheModel::new(1024, 32, 4, 8);
        assert_eq!(c.access(9, 1), Access::Miss { merged: false });
        assert_eq!(c.access(9, 2), Access::Miss { merged: true });
        assert_eq!(c.counters().fetches, 1);
        assert_eq!(c.fill(9).unwrap(), vec![1, 2]);
    }

    #[test]
    fn pinned_line_survives_pressure() {
        // One set of four ways.
        let mut c = CacheModel::new(128, 32, 4, 8);
        for l in 0..4 {
            c.access(l, 0);
            c.fill(l).unwrap();
        }
        c.pin(0).unwrap();
        c.access(4, 0);
        c.fill(4).unwrap();
        assert!(c.is_resident(0));
        assert!(!c.is_resident(1));
        c.release(0).unwrap();
        assert_eq!(c.release(0), Err(MemoryError::ReleaseUnpinned(0)));
    }

    #[test]
    fn fully_pinned_set_blocks_fill_until_release() {
        let mut c = CacheModel::new(128, 32, 4, 8);
        for l in 0..4 {
            c.access(l, 0);
            c.fill(l).unwrap();
            c.pin(l).unwrap();
        }
        c.access(7, 0);
        assert_eq!(c.fill(7), Err(MemoryError::SetPinned { set: 0 }));
        assert!(!c.can_reserve(&[7]));
        c.release(2).unwrap();
        c.fill(7).unwrap();
        assert!(c.is_resident(7) && !c.is_resident(2));
    }

    #[test]
    fn mshr_capacity_is_enforced() {
        let mut c = CacheModel::new(1024, 32, 4, 2);
        c.access(1, 0);
        c.access(2, 0);
        assert_eq!(c.access(3, 0), Access::MshrFull);
        assert_eq!(c.access(2, 5), Access::Miss { merged: true });
        assert_eq!(c.counters().accesses, 3);
    }

    #[test]
    fn snapshot_starts_at_zero() {
        let m = MemorySystem::new(&MemoryConfig::default());
        assert_eq!(m.counters_snapshot(), MemoryCounters::default());
        assert_eq!(m.mlp.capacity_bytes(), 8448);
        assert_eq!(m.mlp.set_count(), 66);
    }
}
