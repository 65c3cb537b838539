//! Sample back end on a single clock: issue queue, feature/MLP caches with
//! miss merging and pinning, DRAM, and the shader.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{Access, MemoryConfig, MemorySystem, CACHE_FEATURE0, CACHE_MICRO, CACHE_MLP};
use crate::sched::{LocationShifter, LsState};

/// Everything the timing model needs to know about one sample batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub id: u64,
    pub rp: u32,
    /// (bank, line) pairs, distinct.
    pub feature_lines: Vec<(u8, u64)>,
    pub mlp_lines: Vec<u64>,
    pub samples: u32,
}

impl BatchMeta {
    fn lines(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        let f = self.feature_lines.iter().map(|&(b, l)| (CACHE_FEATURE0 + b as usize, l));
        f.chain(self.mlp_lines.iter().map(|&l| (CACHE_MLP, l)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub memory: MemoryConfig,
    pub ooo: bool,
    pub ls_depth: usize,
    pub shader_depth: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { memory: MemoryConfig::default(), ooo: true, ls_depth: 8, shader_depth: 8 }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("batch {0} can never be admitted: its lines overfill a cache set")]
    Unadmittable(u64),
    #[error("cache fill failed: {0}")]
    Fill(String),
}

#[derive(Clone, Debug)]
struct Pending {
    meta: BatchMeta,
    missing: usize,
    /// Lines still waiting for an MSHR entry.
    deferred: Vec<(usize, u64)>,
}

#[derive(Clone, Debug)]
pub struct Backend {
    pub mem: MemorySystem,
    ls: LocationShifter<Pending>,
    ooo: bool,
    shader_depth: u64,
    shader_free_at: u64,
    in_shader: VecDeque<(u64, BatchMeta)>,
    pub issued_batches: u64,
    pub shader_busy_cycles: u64,
    pub ooo_bypasses: u64,
    /// Bumped whenever pins are released or a queue slot frees up, so a
    /// refused producer knows when retrying can succeed.
    epoch: u64,
    /// Micro-word requesters woken by fills since the last drain.
    woken: Vec<u64>,
}

impl Backend {
    pub fn new(cfg: &BackendConfig) -> Self {
        Self {
            mem: MemorySystem::new(&cfg.memory),
            ls: LocationShifter::new(cfg.ls_depth.max(1)),
            ooo: cfg.ooo,
            shader_depth: cfg.shader_depth,
            shader_free_at: 0,
            in_shader: VecDeque::new(),
            issued_batches: 0,
            shader_busy_cycles: 0,
            ooo_bypasses: 0,
            epoch: 0,
            woken: Vec::new(),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.ls.is_empty() && self.in_shader.is_empty()
    }

    pub fn queued(&self) -> usize {
        self.ls.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Earliest future cycle at which the back end changes state on its
    /// own: a DRAM arrival, a shading completion or the shader freeing up.
    pub fn next_event(&self, now: u64) -> Option<u64> {
        let mut t = self.mem.dram.next_arrival();
        if let Some((c, _)) = self.in_shader.front() {
            t = Some(t.map_or(*c, |x| x.min(*c)));
        }
        if self.shader_free_at > now && !self.ls.is_empty() {
            t = Some(t.map_or(self.shader_free_at, |x| x.min(self.shader_free_at)));
        }
        t
    }

    /// Requesters whose micro words have arrived.
    pub fn take_woken(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.woken)
    }

    /// Offers a batch to the issue queue. Its lines are pinned and probed;
    /// misses go out to DRAM (or wait for an MSHR entry). Returns `false`
    /// when the queue is full or pinning would overfill a cache set.
    pub fn try_enqueue(&mut self, meta: BatchMeta, now: u64) -> Result<bool, BackendError> {
        if self.ls.is_full() {
            return Ok(false);
        }
        let mut per_cache: HashMap<usize, Vec<u64>> = HashMap::new();
        for (c, l) in meta.lines() {
            per_cache.entry(c).or_default().push(l);
        }
        if !per_cache.iter().all(|(&c, ls)| self.mem.cache(c).can_reserve(ls)) {
            if self.ls.is_empty() && self.in_shader.is_empty() {
                return Err(BackendError::Unadmittable(meta.id));
            }
            return Ok(false);
        }
        for (&c, ls) in &per_cache {
            self.mem.cache_mut(c).reserve(ls);
        }
        let mut pending = Pending { meta, missing: 0, deferred: Vec::new() };
        let lines: Vec<_> = pending.meta.lines().collect();
        for (c, l) in lines {
            match self.mem.cache_mut(c).access(l, pending.meta.id) {
                Access::Hit => {}
                Access::Miss { merged } => {
                    pending.missing += 1;
                    if !merged {
                        self.mem.dram.request(now, c, l);
                    }
                }
                Access::MshrFull => {
                    pending.missing += 1;
                    pending.deferred.push((c, l));
                }
            }
        }
        let state = if pending.missing == 0 { LsState::Ready } else { LsState::WaitingFetch };
        let rp = pending.meta.rp;
        self.ls.push(rp, state, pending).expect("capacity checked above");
        Ok(true)
    }

    /// Micro-word lookup for the traversal unit. On a fresh miss the DRAM
    /// fetch is issued; the requester is reported by [`Backend::take_woken`]
    /// once the line lands.
    pub fn micro_access(&mut self, line: u64, requester: u64, now: u64) -> Access {
        let a = self.mem.micro_grid.access(line, requester);
        if a == (Access::Miss { merged: false }) {
            self.mem.dram.request(now, CACHE_MICRO, line);
        }
        a
    }

    /// Batches whose shading finished by `now`; their pins are released.
    pub fn complete(&mut self, now: u64) -> Vec<BatchMeta> {
        let mut done = Vec::new();
        while self.in_shader.front().is_some_and(|(t, _)| *t <= now) {
            let (_, meta) = self.in_shader.pop_front().unwrap();
            for (c, l) in meta.lines() {
                self.mem.cache_mut(c).release(l).expect("issued batch holds its pins");
            }
            self.epoch += 1;
            done.push(meta);
        }
        done
    }

    /// Lands DRAM fills, retries deferred misses and issues one batch to
    /// the shader if it is free. Returns whether any state changed.
    pub fn advance(&mut self, now: u64) -> Result<bool, BackendError> {
        let mut changed = false;
        for (c, l) in self.mem.dram.arrivals(now) {
            changed = true;
            let waiters = self.mem.cache_mut(c).fill(l).map_err(|e| BackendError::Fill(e.to_string()))?;
            if c == CACHE_MICRO {
                self.woken.extend(waiters);
                continue;
            }
            for w in waiters {
                if let Some(e) = self.ls.iter_mut().find(|e| e.batch.meta.id == w) {
                    e.batch.missing -= 1;
                    if e.batch.missing == 0 {
                        e.state = LsState::Ready;
                    }
                }
            }
        }
        let mut requests = Vec::new();
        for e in self.ls.iter_mut().filter(|e| !e.batch.deferred.is_empty()) {
            let id = e.batch.meta.id;
            let before = e.batch.deferred.len();
            let mut still = Vec::new();
            for (c, l) in std::mem::take(&mut e.batch.deferred) {
                match self.mem.cache_mut(c).access(l, id) {
                    Access::Hit => e.batch.missing -= 1,
                    Access::Miss { merged } => {
                        if !merged {
                            requests.push((c, l));
                        }
                    }
                    Access::MshrFull => still.push((c, l)),
                }
            }
            changed |= still.len() != before;
            e.batch.deferred = still;
            if e.batch.missing == 0 {
                e.state = LsState::Ready;
            }
        }
        for (c, l) in requests {
            self.mem.dram.request(now, c, l);
        }
        if self.shader_free_at <= now {
            let head_ready = self.ls.iter().next().is_some_and(|e| e.state == LsState::Ready);
            if let Some(entry) = self.ls.oosi_issue(self.ooo) {
                if !head_ready {
                    self.ooo_bypasses += 1;
                }
                let n = entry.batch.meta.samples.max(1) as u64;
                self.shader_free_at = now + n;
                self.shader_busy_cycles += n;
                self.issued_batches += 1;
                self.epoch += 1;
                changed = true;
                self.in_shader.push_back((now + n + self.shader_depth, entry.batch.meta));
            }
        }
        Ok(changed)
    }
}

/// Replays recorded batches through the back end, offering one per cycle
/// in order. Returns the cycle at which the last batch finished shading.
pub fn simulate_batches(batches: &[BatchMeta], cfg: &BackendConfig) -> Result<u64, BackendError> {
    let mut be = Backend::new(cfg);
    let mut next = 0;
    let mut now = 0u64;
    let mut last = 0u64;
    let mut done = 0usize;
    while done < batches.len() {
        done += be.complete(now).len();
        if done == batches.len() {
            last = now;
            break;
        }
        if next < batches.len() && be.try_enqueue(batches[next].clone(), now)? {
            next += 1;
        }
        be.advance(now)?;
        now += 1;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(id: u64, rp: u32, lines: &[u64]) -> BatchMeta {
        BatchMeta { id, rp, feature_lines: lines.iter().map(|&l| (0, l)).collect(), mlp_lines: vec![], samples: 1 }
    }

    #[test]
    fn all_hit_runs_one_batch_per_cycle() {
        let cfg = BackendConfig::default();
        let trace: Vec<_> = (0..50).map(|i| batch(i, i as u32, &[])).collect();
        let c = simulate_batches(&trace, &cfg).unwrap();
        assert_eq!(c, 50 + cfg.shader_depth);
    }

    #[test]
    fn unhideable_miss_costs_exactly_the_latency() {
        let cfg = BackendConfig { ooo: true, ..BackendConfig::default() };
        let base = simulate_batches(&[batch(0, 0, &[]), batch(1, 0, &[])], &cfg).unwrap();
        let miss = simulate_batches(&[batch(0, 0, &[3]), batch(1, 0, &[])], &cfg).unwrap();
        assert_eq!(miss - base, cfg.memory.dram_latency);
    }

    #[test]
    fn out_of_order_hides_a_miss() {
        let trace = [batch(0, 0, &[3]), batch(1, 1, &[])];
        let ooo = simulate_batches(&trace, &BackendConfig { ooo: true, ..Default::default() }).unwrap();
        let ino = simulate_batches(&trace, &BackendConfig { ooo: false, ..Default::default() }).unwrap();
        assert!(ooo < ino);
    }

    #[test]
    fn duplicate_misses_fetch_once() {
        let mut be = Backend::new(&BackendConfig::default());
        assert!(be.try_enqueue(batch(0, 0, &[42]), 0).unwrap());
        assert!(be.try_enqueue(batch(1, 1, &[42]), 0).unwrap());
        assert_eq!(be.mem.dram.lines_fetched(), 1);
        assert_eq!(be.mem.feature_banks[0].counters().merged, 1);
        let mut now = 0;
        let mut done = 0;
        while done < 2 {
            done += be.complete(now).len();
            be.advance(now).unwrap();
            now += 1;
        }
        assert_eq!(be.mem.total_pins(), 0);
    }
}
