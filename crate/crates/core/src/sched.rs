//! Packet scheduling: the coarse-voxel reorder buffer, its pass-through
//! baseline, the global packet buffer and the out-of-order issue queue.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("no space for another packet")]
    Backpressure,
    #[error("unknown packet pointer {0}")]
    UnknownPacket(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    /// Waiting to be scheduled.
    Ready,
    /// Scheduled; the slot is held until its samples are shaded.
    InFlight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RobSlot {
    pub rp: u32,
    pub state: SlotState,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RobEntry {
    pub tag: Option<usize>,
    pub slots: Vec<RobSlot>,
}

/// Reorder buffer clustering packets by coarse-voxel tag.
#[derive(Clone, Debug)]
pub struct RpRob {
    entries: Vec<RobEntry>,
    capacity: usize,
    recorder: VecDeque<usize>,
    recorder_depth: usize,
    current: Option<usize>,
}

impl RpRob {
    pub fn new(entries: usize, capacity: usize, recorder_depth: usize) -> Self {
        assert!(entries > 0 && capacity > 0, "reorder buffer needs space");
        Self {
            entries: vec![RobEntry::default(); entries],
            capacity,
            recorder: VecDeque::new(),
            recorder_depth,
            current: None,
        }
    }

    pub fn entries(&self) -> &[RobEntry] {
        &self.entries
    }

    pub fn current_tag(&self) -> Option<usize> {
        self.current
    }

    /// Most recent tag first.
    pub fn recent_tags(&self) -> impl Iterator<Item = usize> + '_ {
        self.recorder.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.slots.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn touch_recorder(&mut self, tag: usize) {
        self.recorder.retain(|&t| t != tag);
        self.recorder.push_front(tag);
        self.recorder.truncate(self.recorder_depth);
    }

    /// Places a packet in the fullest non-full entry with its tag, else in
    /// the lowest free entry.
    pub fn insert(&mut self, rp: u32, tag: usize) -> Result<usize, SchedError> {
        let k = self.capacity;
        let same = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tag == Some(tag) && e.slots.len() < k)
            .max_by_key(|(i, e)| (e.slots.len(), std::cmp::Reverse(*i)))
            .map(|(i, _)| i);
        let idx = same
            .or_else(|| self.entries.iter().position(|e| e.tag.is_none()))
            .ok_or(SchedError::Backpressure)?;
        let e = &mut self.entries[idx];
        e.tag = Some(tag);
        e.slots.push(RobSlot { rp, state: SlotState::Ready });
        self.touch_recorder(tag);
        Ok(idx)
    }

    fn tag_present(&self, tag: usize) -> bool {
        self.entries.iter().any(|e| e.tag == Some(tag))
    }

    /// Next packet to traverse. Stays on the current tag while any of its
    /// packets remain; once none do, switches to a recently seen tag if
    /// possible, picking the entry with the fewest packets.
    pub fn schedule(&mut self) -> Option<(u32, usize)> {
        if self.current.is_none_or(|t| !self.tag_present(t)) {
            let recent: Vec<usize> = self.recorder.iter().copied().filter(|&t| self.tag_present(t)).collect();
            let pick = |filter: &dyn Fn(usize) -> bool| {
                self.entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.tag.is_some_and(filter))
                    .min_by_key(|(i, e)| (e.slots.len(), *i))
                    .and_then(|(_, e)| e.tag)
            };
            self.current = if recent.is_empty() { pick(&|_| true) } else { pick(&|t| recent.contains(&t)) };
        }
        let tag = self.current?;
        let k = self.capacity;
        let idx = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tag == Some(tag) && e.slots.iter().any(|s| s.state == SlotState::Ready))
            .max_by_key(|(i, e)| (k - e.slots.len(), std::cmp::Reverse(*i)))
            .map(|(i, _)| i)?;
        let slot = self.entries[idx].slots.iter_mut().find(|s| s.state == SlotState::Ready)?;
        slot.state = SlotState::InFlight;
        Some((slot.rp, tag))
    }

    fn find(&mut self, rp: u32) -> Result<(usize, usize), SchedError> {
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(j) = e.slots.iter().position(|s| s.rp == rp) {
                return Ok((i, j));
            }
        }
        Err(SchedError::UnknownPacket(rp))
    }

    /// The packet's samples are shaded; it may be scheduled again.
    pub fn mark_ready(&mut self, rp: u32) -> Result<(), SchedError> {
        let (i, j) = self.find(rp)?;
        self.entries[i].slots[j].state = SlotState::Ready;
        Ok(())
    }

    /// Releases the packet's placeholder.
    pub fn remove(&mut self, rp: u32) -> Result<(), SchedError> {
        let (i, j) = self.find(rp)?;
        let e = &mut self.entries[i];
        e.slots.remove(j);
        if e.slots.is_empty() {
            e.tag = None;
        }
        Ok(())
    }
}

/// Baseline without reordering: packets are served first-come first-served
/// and requeued at the tail.
#[derive(Clone, Debug, Default)]
pub struct PassThrough {
    queue: VecDeque<(u32, usize, SlotState)>,
}

impl PassThrough {
    pub fn insert(&mut self, rp: u32, tag: usize) {
        self.queue.push_back((rp, tag, SlotState::Ready));
    }

    pub fn schedule(&mut self) -> Option<(u32, usize)> {
        let i = self.queue.iter().position(|q| q.2 == SlotState::Ready)?;
        let (rp, tag, _) = self.queue.remove(i)?;
        self.queue.push_back((rp, tag, SlotState::InFlight));
        Some((rp, tag))
    }

    pub fn mark_ready(&mut self, rp: u32) -> Result<(), SchedError> {
        let q = self.queue.iter_mut().find(|q| q.0 == rp).ok_or(SchedError::UnknownPacket(rp))?;
        q.2 = SlotState::Ready;
        Ok(())
    }

    pub fn remove(&mut self, rp: u32) -> Result<(), SchedError> {
        let i = self.queue.iter().position(|q| q.0 == rp).ok_or(SchedError::UnknownPacket(rp))?;
        self.queue.remove(i);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// Either scheduling policy behind one interface.
#[derive(Clone, Debug)]
pub enum CrpScheduler {
    Rob(RpRob),
    Fifo(PassThrough),
}

impl CrpScheduler {
    pub fn insert(&mut self, rp: u32, tag: usize) -> Result<(), SchedError> {
        match self {
            CrpScheduler::Rob(r) => r.insert(rp, tag).map(|_| ()),
            CrpScheduler::Fifo(f) => {
                f.insert(rp, tag);
                Ok(())
            }
        }
    }

    pub fn schedule(&mut self) -> Option<(u32, usize)> {
        match self {
            CrpScheduler::Rob(r) => r.schedule(),
            CrpScheduler::Fifo(f) => f.schedule(),
        }
    }

    pub fn mark_ready(&mut self, rp: u32) -> Result<(), SchedError> {
        match self {
            CrpScheduler::Rob(r) => r.mark_ready(rp),
            CrpScheduler::Fifo(f) => f.mark_ready(rp),
        }
    }

    pub fn remove(&mut self, rp: u32) -> Result<(), SchedError> {
        match self {
            CrpScheduler::Rob(r) => r.remove(rp),
            CrpScheduler::Fifo(f) => f.remove(rp),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CrpScheduler::Rob(r) => r.len(),
            CrpScheduler::Fifo(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed pool of per-packet state addressed by packet pointer.
#[derive(Clone, Debug)]
pub struct GlobalRpBuffer<T> {
    slots: Vec<Option<T>>,
    free: BTreeSet<u32>,
}

impl<T> GlobalRpBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self { slots: (0..capacity).map(|_| None).collect(), free: (0..capacity as u32).collect() }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn live(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    pub fn has_free(&self) -> bool {
        !self.free.is_empty()
    }

    /// Stores `value` in the lowest free slot.
    pub fn alloc(&mut self, value: T) -> Result<u32, SchedError> {
        let p = self.free.pop_first().ok_or(SchedError::Backpressure)?;
        self.slots[p as usize] = Some(value);
        Ok(p)
    }

    pub fn get(&self, p: u32) -> Result<&T, SchedError> {
        self.slots.get(p as usize).and_then(Option::as_ref).ok_or(SchedError::UnknownPacket(p))
    }

    pub fn get_mut(&mut self, p: u32) -> Result<&mut T, SchedError> {
        self.slots.get_mut(p as usize).and_then(Option::as_mut).ok_or(SchedError::UnknownPacket(p))
    }

    pub fn release(&mut self, p: u32) -> Result<T, SchedError> {
        let v = self.slots.get_mut(p as usize).and_then(Option::take).ok_or(SchedError::UnknownPacket(p))?;
        self.free.insert(p);
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsState {
    WaitingFetch,
    Ready,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsEntry<B> {
    pub state: LsState,
    pub rp: u32,
    pub batch: B,
}

/// Issue queue of sample batches in arrival order.
#[derive(Clone, Debug)]
pub struct LocationShifter<B> {
    entries: VecDeque<LsEntry<B>>,
    capacity: usize,
}

impl<B> LocationShifter<B> {
    pub fn new(capacity: usize) -> Self {
        Self { entries: VecDeque::new(), capacity }
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

    pub fn push(&mut self, rp: u32, state: LsState, batch: B) -> Result<(), SchedError> {
        if self.is_full() {
            return Err(SchedError::Backpressure);
        }
        self.entries.push_back(LsEntry { state, rp, batch });
        Ok(())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LsEntry<B>> {
        self.entries.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LsEntry<B>> {
        self.entries.iter()
    }

    /// Out-of-order issue: the oldest ready batch with no older batch of
    /// the same packet still queued. In-order issue only considers the head.
    pub fn oosi_issue(&mut self, out_of_order: bool) -> Option<LsEntry<B>> {
        let limit = if out_of_order { self.entries.len() } else { self.entries.len().min(1) };
        let mut blocked: Vec<u32> = Vec::new();
        for i in 0..limit {
            let e = &self.entries[i];
            if e.state == LsState::Ready && !blocked.contains(&e.rp) {
                return self.entries.remove(i);
            }
            blocked.push(e.rp);
        }
        None
    }
}
