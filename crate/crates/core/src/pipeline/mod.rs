//! The full renderer on a single simulated clock: packet generation, box
//! test and start-point search, coarse traversal, tag clustering, fine
//! traversal, out-of-order sample issue, shading and accumulation.

mod backend;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{simulate_batches, Backend, BackendConfig, BackendError, BatchMeta};

use crate::hrm::{CoarseEvent, FineEvent, FineStep, RpTraversal, Sample, TraversalStats};
use crate::image::RgbImage;
use crate::memory::{Access, FeatureAddressMap, MemoryConfig, MemoryCounters};
use crate::ray::{generate_rp, quad_codes, Camera, ScanMode, DEFAULT_TSPS_TOL};
use crate::scene::{Aabb, Scene, MICRO_PER_FINE};
use crate::sched::{CrpScheduler, GlobalRpBuffer, PassThrough, RpRob, SchedError};
use crate::shading::{
    frequency_encode, micro_corners, shade_sample, to_u8, vru_accumulate, Gather, PixelAccumulator, ShadeScratch,
    ShadingMode, DEFAULT_T_THRESHOLD,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub scan_mode: ScanMode,
    pub aabb_enabled: bool,
    pub rprob_enabled: bool,
    pub ooo_enabled: bool,
    pub shading: ShadingMode,
    pub t_threshold: f64,
    pub background: [f64; 3],
    pub memory: MemoryConfig,
    pub rob_entries: usize,
    pub rob_capacity: usize,
    pub recorder_depth: usize,
    pub global_buffer: usize,
    pub ls_depth: usize,
    pub shader_depth: u64,
    /// Batches a packet may have queued or shading before it stops
    /// being rescheduled. With 1 a packet waits for every batch.
    pub rp_batch_window: u32,
    pub tsps_tol: f64,
    pub record_events: bool,
    pub record_samples: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scan_mode: ScanMode::ZOrder,
            aabb_enabled: true,
            rprob_enabled: true,
            ooo_enabled: true,
            shading: ShadingMode::Float,
            t_threshold: DEFAULT_T_THRESHOLD,
            background: [1.0; 3],
            memory: MemoryConfig::default(),
            rob_entries: 16,
            rob_capacity: 8,
            recorder_depth: 4,
            global_buffer: 64,
            ls_depth: 8,
            shader_depth: 8,
            rp_batch_window: 16,
            tsps_tol: DEFAULT_TSPS_TOL,
            record_events: false,
            record_samples: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let sizes = [
            ("rob_entries", self.rob_entries),
            ("rob_capacity", self.rob_capacity),
            ("global_buffer", self.global_buffer),
            ("ls_depth", self.ls_depth),
            ("rp_batch_window", self.rp_batch_window as usize),
            ("memory.line_bytes", self.memory.line_bytes),
            ("memory.ways", self.memory.ways),
            ("memory.mshr_entries", self.memory.mshr_entries),
            ("memory.micro_cache_bytes", self.memory.micro_cache_bytes),
            ("memory.feature_cache_bytes", self.memory.feature_cache_bytes),
            ("memory.mlp_cache_bytes", self.memory.mlp_cache_bytes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(PipelineError::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.t_threshold) {
            return Err(PipelineError::Config(format!("t_threshold must be in [0,1), got {}", self.t_threshold)));
        }
        if !(self.tsps_tol > 0.0) {
            return Err(PipelineError::Config("tsps_tol must be positive".into()));
        }
        Ok(())
    }

    /// The sixteen combinations of the four scheduling toggles, in a fixed
    /// order (scan mode slowest).
    pub fn toggle_matrix(&self) -> Vec<PipelineConfig> {
        let mut out = Vec::with_capacity(16);
        for scan in [ScanMode::ZOrder, ScanMode::RowOrder] {
            for aabb in [true, false] {
                for rprob in [true, false] {
                    for ooo in [true, false] {
                        out.push(PipelineConfig {
                            scan_mode: scan,
                            aabb_enabled: aabb,
                            rprob_enabled: rprob,
                            ooo_enabled: ooo,
                            ..*self
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scheduler fault: {0}")]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("accumulation fault on pixel {pixel:?}: {source}")]
    Vru { pixel: [u32; 2], source: crate::shading::VruError },
    #[error("deadlock at cycle {0}: no unit can make progress")]
    Stalled(u64),
    #[error("pixel {0:?} written twice")]
    DoubleWrite([u32; 2]),
    #[error("malformed event log: {0}")]
    MalformedLog(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Event {
    RpGenerated { rp: u32, quad: u32 },
    CrpFormed { rp: u32, tag: usize, mask: u8 },
    Scheduled { rp: u32, tag: usize },
    Batch(BatchMeta),
    Reschedule { rp: u32 },
    CvTransition { rp: u32 },
    Retired { rp: u32, pixels: [[u32; 2]; 4] },
}

/// One row of the metrics table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scan_mode: String,
    pub ooo: bool,
    pub aabb: bool,
    pub rprob: bool,
    pub width: u32,
    pub height: u32,
    pub micro_cache_bytes: usize,
    pub feature_cache_bytes: usize,
    pub mlp_cache_bytes: usize,
    pub micro_accesses: u64,
    pub micro_hits: u64,
    pub micro_misses: u64,
    pub micro_cold_misses: u64,
    pub micro_fetches: u64,
    pub micro_hit_rate: f64,
    pub feature_accesses: u64,
    pub feature_hits: u64,
    pub feature_misses: u64,
    pub feature_cold_misses: u64,
    pub feature_fetches: u64,
    pub feature_hit_rate: f64,
    pub mlp_accesses: u64,
    pub mlp_hits: u64,
    pub mlp_misses: u64,
    pub mlp_cold_misses: u64,
    pub mlp_fetches: u64,
    pub mlp_hit_rate: f64,
    pub merged_misses: u64,
    pub dram_lines: u64,
    pub ema_bytes: u64,
    pub sram_accesses: u64,
    pub energy: f64,
    pub cycles: u64,
    pub shader_busy_cycles: u64,
    pub rps: u64,
    pub ccrps_scheduled: u64,
    pub tag_switches: u64,
    pub rps_per_tag_switch: f64,
    pub coarse_queries: u64,
    pub fine_queries: u64,
    pub avg_active_rays_coarse: f64,
    pub avg_active_rays_fine: f64,
    pub batches: u64,
    pub samples_generated: u64,
    pub samples_shaded: u64,
    pub samples_discarded: u64,
    pub bank_conflicts: u64,
    pub ooo_bypasses: u64,
    pub lag_first_violations: u64,
    pub lag_only_steps: u64,
    pub spread_increases: u64,
    pub pins_at_end: u64,
}

impl MetricsRecord {
    fn assemble(
        cfg: &PipelineConfig,
        camera: &Camera,
        mem: &MemoryCounters,
        trav: &TraversalStats,
        run: &RunCounters,
        pins_at_end: u64,
    ) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        MetricsRecord {
            scan_mode: cfg.scan_mode.as_str().to_string(),
            ooo: cfg.ooo_enabled,
            aabb: cfg.aabb_enabled,
            rprob: cfg.rprob_enabled,
            width: camera.width,
            height: camera.height,
            micro_cache_bytes: cfg.memory.micro_cache_bytes,
            feature_cache_bytes: cfg.memory.feature_cache_bytes,
            mlp_cache_bytes: cfg.memory.mlp_cache_bytes,
            micro_accesses: mem.micro_grid.accesses,
            micro_hits: mem.micro_grid.hits,
            micro_misses: mem.micro_grid.misses,
            micro_cold_misses: mem.micro_grid.cold_misses,
            micro_fetches: mem.micro_grid.fetches,
            micro_hit_rate: mem.micro_grid.steady_state_hit_rate(),
            feature_accesses: mem.feature.accesses,
            feature_hits: mem.feature.hits,
            feature_misses: mem.feature.misses,
            feature_cold_misses: mem.feature.cold_misses,
            feature_fetches: mem.feature.fetches,
            feature_hit_rate: mem.feature.steady_state_hit_rate(),
            mlp_accesses: mem.mlp.accesses,
            mlp_hits: mem.mlp.hits,
            mlp_misses: mem.mlp.misses,
            mlp_cold_misses: mem.mlp.cold_misses,
            mlp_fetches: mem.mlp.fetches,
            mlp_hit_rate: mem.mlp.steady_state_hit_rate(),
            merged_misses: mem.micro_grid.merged + mem.feature.merged + mem.mlp.merged,
            dram_lines: mem.dram_lines,
            ema_bytes: mem.ema_bytes,
            sram_accesses: mem.sram_accesses,
            energy: mem.energy,
            cycles: run.cycles,
            shader_busy_cycles: run.shader_busy,
            rps: run.rps,
            ccrps_scheduled: run.scheduled,
            tag_switches: run.tag_switches,
            rps_per_tag_switch: ratio(run.scheduled, run.tag_switches.max(1)),
            coarse_queries: trav.coarse_queries,
            fine_queries: trav.fine_queries,
            avg_active_rays_coarse: ratio(trav.active_rays_coarse, trav.coarse_queries),
            avg_active_rays_fine: ratio(trav.active_rays_fine, trav.fine_queries),
            batches: run.batches,
            samples_generated: trav.samples,
            samples_shaded: run.shaded,
            samples_discarded: run.discarded,
            bank_conflicts: run.bank_conflicts,
            ooo_bypasses: run.ooo_bypasses,
            lag_first_violations: trav.lag_first_violations,
            lag_only_steps: trav.lag_only_steps,
            spread_increases: trav.spread_increases,
            pins_at_end,
        }
    }
}

/// A shaded sample, as seen by the accumulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecord {
    pub pixel: [u32; 2],
    pub micro: [u32; 3],
    pub t: f64,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct RenderResult {
    pub image: RgbImage,
    /// Per-pixel radiance before clamping, row-major.
    pub radiance: Vec<[f64; 3]>,
    pub metrics: MetricsRecord,
    pub traversal: TraversalStats,
    pub events: Vec<Event>,
    pub samples: Vec<SampleRecord>,
    /// Coarse voxels examined per pixel, row-major.
    pub coarse_visits: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Default)]
struct RunCounters {
    cycles: u64,
    rps: u64,
    scheduled: u64,
    tag_switches: u64,
    batches: u64,
    shaded: u64,
    discarded: u64,
    bank_conflicts: u64,
    ooo_bypasses: u64,
    shader_busy: u64,
}

struct RpState {
    trav: RpTraversal,
    acc: [PixelAccumulator; 4],
    encoded: [Vec<f64>; 4],
    /// Batches built but not yet shaded.
    pending: u32,
    /// Holding its scheduler slot until a batch finishes.
    throttled: bool,
    /// Traversal is over; retires once `pending` reaches zero.
    draining: bool,
}

/// A batch built by the fine traversal unit, waiting for the issue queue.
struct BuiltBatch {
    meta: BatchMeta,
    samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParkState {
    /// The micro-grid MSHR was full; the fetch still has to be issued.
    Unissued,
    Waiting,
    Arrived,
}

/// A fine step whose micro word missed: the packet waits here, off the
/// traversal unit, until the word arrives.
struct Parked {
    id: u64,
    rp: u32,
    step: FineStep,
    samples: Vec<Sample>,
    line: u64,
    state: ParkState,
}

/// Micro-grid line holding the occupancy word of a fine voxel.
fn micro_line(fine_linear: usize, line_bytes: usize) -> u64 {
    (fine_linear * 8 / line_bytes) as u64
}

struct Engine<'a> {
    scene: &'a Scene,
    camera: &'a Camera,
    cfg: &'a PipelineConfig,
    bounds: Option<Aabb>,
    addr: FeatureAddressMap,
    quads: Vec<u32>,
    next_quad: usize,
    rps: GlobalRpBuffer<RpState>,
    ctu_queue: VecDeque<u32>,
    blocked_crp: Option<(u32, usize)>,
    sched: CrpScheduler,
    last_tag: Option<usize>,
    ftu: Option<u32>,
    ftu_out: Vec<Sample>,
    parked: Vec<Parked>,
    next_park_id: u64,
    built: Option<BuiltBatch>,
    blocked_epoch: Option<u64>,
    in_flight: std::collections::HashMap<u64, Vec<Sample>>,
    backend: Backend,
    next_batch_id: u64,
    stats: TraversalStats,
    run: RunCounters,
    events: Vec<Event>,
    samples: Vec<SampleRecord>,
    radiance: Vec<[f64; 3]>,
    written: Vec<bool>,
    coarse_visits: Vec<u32>,
    scratch: ShadeScratch,
}

impl<'a> Engine<'a> {
    fn new(scene: &'a Scene, camera: &'a Camera, cfg: &'a PipelineConfig) -> Self {
        let bounds = if cfg.aabb_enabled { scene.aabb() } else { Some(Aabb::unit(scene.geometry().coarse_dim())) };
        let sched = if cfg.rprob_enabled {
            CrpScheduler::Rob(RpRob::new(cfg.rob_entries, cfg.rob_capacity, cfg.recorder_depth))
        } else {
            CrpScheduler::Fifo(PassThrough::default())
        };
        let backend = Backend::new(&BackendConfig {
            memory: cfg.memory,
            ooo: cfg.ooo_enabled,
            ls_depth: cfg.ls_depth,
            shader_depth: cfg.shader_depth,
        });
        let n = (camera.width * camera.height) as usize;
        Self {
            scene,
            camera,
            cfg,
            bounds,
            addr: FeatureAddressMap::new(scene.features.slot_count(), scene.features.dim(), cfg.memory.line_bytes),
            quads: quad_codes(cfg.scan_mode, camera.width, camera.height),
            next_quad: 0,
            rps: GlobalRpBuffer::new(cfg.global_buffer),
            ctu_queue: VecDeque::new(),
            blocked_crp: None,
            sched,
            last_tag: None,
            ftu: None,
            ftu_out: Vec::new(),
            parked: Vec::new(),
            next_park_id: 0,
            built: None,
            blocked_epoch: None,
            in_flight: Default::default(),
            backend,
            next_batch_id: 0,
            stats: TraversalStats::default(),
            run: RunCounters::default(),
            events: Vec::new(),
            samples: Vec::new(),
            radiance: vec![[0.0; 3]; n],
            written: vec![false; n],
            coarse_visits: vec![0; n],
            scratch: ShadeScratch::default(),
        }
    }

    fn log(&mut self, e: impl FnOnce() -> Event) {
        if self.cfg.record_events {
            self.events.push(e());
        }
    }

    fn done(&self) -> bool {
        self.next_quad == self.quads.len() && self.rps.live() == 0
    }

    /// Retires a packet whose traversal is over, or leaves it draining
    /// until its last batch is shaded.
    fn end_traversal(&mut self, rp: u32) -> Result<(), PipelineError> {
        let st = self.rps.get_mut(rp)?;
        if st.pending > 0 {
            st.draining = true;
            Ok(())
        } else {
            self.retire(rp)
        }
    }

    fn retire(&mut self, rp: u32) -> Result<(), PipelineError> {
        let st = self.rps.release(rp)?;
        debug_assert_eq!(st.pending, 0, "retired with batches in flight");
        let rays = st.trav.rays();
        for lane in 0..4 {
            let [x, y] = rays[lane].pixel;
            let i = (y * self.camera.width + x) as usize;
            if self.written[i] {
                return Err(PipelineError::DoubleWrite([x, y]));
            }
            self.written[i] = true;
            self.radiance[i] = st.acc[lane].resolve(self.cfg.background);
            self.coarse_visits[i] = st.trav.coarse_visits[lane];
        }
        self.log(|| Event::Retired { rp, pixels: rays.map(|r| r.pixel) });
        Ok(())
    }

    /// Shades a finished batch and applies the retire or reschedule
    /// feedback to its packet.
    fn finish_batch(&mut self, meta: BatchMeta) -> Result<(), PipelineError> {
        let samples = self.in_flight.remove(&meta.id).expect("every issued batch was recorded");
        let rp = meta.rp;
        let st = self.rps.get_mut(rp)?;
        for s in &samples {
            let lane = s.ray as usize;
            if st.acc[lane].terminated {
                self.run.discarded += 1;
                continue;
            }
            let (sigma, rgb) =
                shade_sample(self.scene, s, &st.encoded[lane], self.cfg.shading, Gather::Banked, &mut self.scratch);
            let pixel = st.trav.rays()[lane].pixel;
            vru_accumulate(&mut st.acc[lane], sigma, rgb, s.delta, s.t, self.cfg.t_threshold)
                .map_err(|source| PipelineError::Vru { pixel, source })?;
            self.run.shaded += 1;
            if self.cfg.record_samples {
                self.samples.push(SampleRecord { pixel, micro: s.micro, t: s.t, delta: s.delta });
            }
            if st.acc[lane].terminated {
                st.trav.mark_terminated(lane);
            }
        }
        st.pending -= 1;
        if st.throttled {
            st.throttled = false;
            if st.trav.any_marching() {
                self.sched.mark_ready(rp)?;
                self.log(|| Event::Reschedule { rp });
            } else {
                self.sched.remove(rp)?;
                self.end_traversal(rp)?;
            }
        } else if st.draining && st.pending == 0 {
            self.retire(rp)?;
        }
        Ok(())
    }

    /// Packet generation with box test and start-point search.
    fn front_end(&mut self) -> Result<bool, PipelineError> {
        if self.next_quad == self.quads.len() || !self.rps.has_free() {
            return Ok(false);
        }
        let quad = self.quads[self.next_quad];
        self.next_quad += 1;
        let packet = generate_rp(self.camera, quad);
        let g = self.scene.geometry();
        let bands = self.scene.freq_bands();
        let trav = RpTraversal::new(&packet, self.bounds.as_ref(), g, self.cfg.tsps_tol);
        let encoded = packet.rays.map(|r| {
            let mut e = Vec::with_capacity(6 * bands);
            frequency_encode(r.dir, bands, &mut e);
            e
        });
        let rp = self.rps.alloc(RpState {
            trav,
            acc: [PixelAccumulator::default(); 4],
            encoded,
            pending: 0,
            throttled: false,
            draining: false,
        })?;
        self.run.rps += 1;
        self.log(|| Event::RpGenerated { rp, quad });
        self.ctu_queue.push_back(rp);
        Ok(true)
    }

    /// Coarse traversal: one bitmap query per cycle for the head packet.
    fn ctu(&mut self) -> Result<bool, PipelineError> {
        if let Some((rp, tag)) = self.blocked_crp {
            if self.sched.insert(rp, tag).is_err() {
                return Ok(false);
            }
            self.blocked_crp = None;
            return Ok(true);
        }
        let Some(&rp) = self.ctu_queue.front() else { return Ok(false) };
        let st = self.rps.get_mut(rp)?;
        match st.trav.coarse_step(&self.scene.hierarchy, &mut self.stats) {
            CoarseEvent::Continue => {}
            CoarseEvent::Crp { tag, mask } => {
                self.ctu_queue.pop_front();
                self.log(|| Event::CrpFormed { rp, tag, mask });
                match self.sched.insert(rp, tag) {
                    Ok(()) => {}
                    Err(SchedError::Backpressure) => self.blocked_crp = Some((rp, tag)),
                    Err(e) => return Err(e.into()),
                }
            }
            CoarseEvent::Exited => {
                self.ctu_queue.pop_front();
                self.end_traversal(rp)?;
            }
        }
        Ok(true)
    }

    fn build_batch(&mut self, rp: u32, samples: Vec<Sample>) -> BuiltBatch {
        let features = &self.scene.features;
        let mut feature_lines = BTreeSet::new();
        for s in &samples {
            let slot = features.slot(s.fine_linear as usize).expect("samples lie in occupied fine voxels");
            let local = s.micro.map(|v| v as usize % MICRO_PER_FINE);
            let mut banks = 0u8;
            for (v, _) in micro_corners(local) {
                let (bank, line) = self.addr.locate(slot, v);
                if banks >> bank & 1 == 1 {
                    self.run.bank_conflicts += 1;
                }
                banks |= 1 << bank;
                feature_lines.insert((bank as u8, line));
            }
        }
        let mut mlp_lines = Vec::new();
        let cv = samples[0].coarse_linear as usize;
        debug_assert!(samples.iter().all(|s| s.coarse_linear as usize == cv));
        if let Some(slot) = self.scene.mlps.slot(cv) {
            let lb = self.cfg.memory.line_bytes;
            let len = self.scene.mlps.layout().block_len();
            let (first, last) = (slot * len / lb, (slot * len + len - 1) / lb);
            mlp_lines.extend((first..=last).map(|l| l as u64));
        }
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        let meta = BatchMeta {
            id,
            rp,
            feature_lines: feature_lines.into_iter().collect(),
            mlp_lines,
            samples: samples.len() as u32,
        };
        BuiltBatch { meta, samples }
    }

    /// Offers the held batch to the issue queue. A refused batch is only
    /// offered again once pins or queue slots have been released.
    fn offer_batch(&mut self, now: u64) -> Result<bool, PipelineError> {
        let Some(b) = self.built.take() else { return Ok(false) };
        if self.blocked_epoch == Some(self.backend.epoch()) {
            self.built = Some(b);
            return Ok(false);
        }
        if self.backend.try_enqueue(b.meta.clone(), now)? {
            self.blocked_epoch = None;
            self.run.batches += 1;
            let id = b.meta.id;
            self.log(|| Event::Batch(b.meta));
            self.in_flight.insert(id, b.samples);
            Ok(true)
        } else {
            self.blocked_epoch = Some(self.backend.epoch());
            self.built = Some(b);
            Ok(false)
        }
    }

    /// Micro-word bookkeeping for parked packets: retry fetches the MSHR
    /// refused and note arrivals.
    fn service_parked(&mut self, now: u64) -> bool {
        let mut changed = false;
        for id in self.backend.take_woken() {
            if let Some(p) = self.parked.iter_mut().find(|p| p.id == id) {
                p.state = ParkState::Arrived;
                changed = true;
            }
        }
        for i in 0..self.parked.len() {
            if self.parked[i].state != ParkState::Unissued {
                continue;
            }
            let (line, id) = (self.parked[i].line, self.parked[i].id);
            self.parked[i].state = match self.backend.micro_access(line, id, now) {
                Access::Hit => ParkState::Arrived,
                Access::Miss { .. } => ParkState::Waiting,
                Access::MshrFull => continue,
            };
            changed = true;
        }
        changed
    }

    /// Scheduling and fine traversal. Each cycle the unit does one of:
    /// offer a held batch (stalling while it is refused), finish a parked
    /// step whose micro word arrived, or take one fine step.
    fn ftu(&mut self, now: u64) -> Result<bool, PipelineError> {
        let mut progress = self.service_parked(now);
        if self.built.is_some() {
            return Ok(self.offer_batch(now)? || progress);
        }
        if let Some(i) = self.parked.iter().position(|p| p.state == ParkState::Arrived) {
            let p = self.parked.remove(i);
            self.apply_step(p.rp, p.step, p.samples, false, now)?;
            return Ok(true);
        }
        let rp = match self.ftu {
            Some(rp) => rp,
            None => {
                let Some((rp, tag)) = self.sched.schedule() else { return Ok(progress) };
                self.run.scheduled += 1;
                if self.last_tag != Some(tag) {
                    self.run.tag_switches += 1;
                    self.last_tag = Some(tag);
                }
                self.log(|| Event::Scheduled { rp, tag });
                self.ftu = Some(rp);
                rp
            }
        };
        progress = true;
        let st = self.rps.get_mut(rp)?;
        self.ftu_out.clear();
        let step = st.trav.fine_step(&self.scene.hierarchy, rp, &mut self.stats, &mut self.ftu_out);
        let samples = std::mem::take(&mut self.ftu_out);
        if let Some(fine) = step.fetched {
            let line = micro_line(fine, self.cfg.memory.line_bytes);
            let id = self.next_park_id;
            let state = match self.backend.micro_access(line, id, now) {
                Access::Hit => None,
                Access::Miss { .. } => Some(ParkState::Waiting),
                Access::MshrFull => Some(ParkState::Unissued),
            };
            if let Some(state) = state {
                self.next_park_id += 1;
                self.parked.push(Parked { id, rp, step, samples, line, state });
                self.ftu = None;
                return Ok(progress);
            }
        }
        self.apply_step(rp, step, samples, true, now)?;
        Ok(progress)
    }

    /// Acts on a fine step. `current` is true when the packet is still
    /// held by the traversal unit (as opposed to returning from parking).
    fn apply_step(
        &mut self,
        rp: u32,
        step: FineStep,
        samples: Vec<Sample>,
        current: bool,
        now: u64,
    ) -> Result<(), PipelineError> {
        match step.event {
            FineEvent::Continue => {
                if !current {
                    self.sched.mark_ready(rp)?;
                    self.log(|| Event::Reschedule { rp });
                }
            }
            FineEvent::Samples => {
                if current {
                    self.ftu = None;
                }
                let st = self.rps.get_mut(rp)?;
                st.pending += 1;
                if st.pending < self.cfg.rp_batch_window {
                    self.sched.mark_ready(rp)?;
                    self.log(|| Event::Reschedule { rp });
                } else {
                    st.throttled = true;
                }
                self.built = Some(self.build_batch(rp, samples));
                self.offer_batch(now)?;
            }
            FineEvent::CvExit => {
                debug_assert!(current, "a CV exit reads no micro word");
                self.ftu = None;
                self.sched.remove(rp)?;
                self.log(|| Event::CvTransition { rp });
                if self.rps.get(rp)?.trav.any_marching() {
                    self.ctu_queue.push_back(rp);
                } else {
                    self.end_traversal(rp)?;
                }
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<RenderResult, PipelineError> {
        let mut now = 0u64;
        while !self.done() {
            let mut progress = false;
            for meta in self.backend.complete(now) {
                self.finish_batch(meta)?;
                progress = true;
            }
            progress |= self.front_end()?;
            progress |= self.ctu()?;
            progress |= self.ftu(now)?;
            progress |= self.backend.advance(now)?;
            if self.done() {
                break;
            }
            let next = if progress {
                now + 1
            } else {
                // Nothing moved, so nothing will until the back end's next
                // timed event.
                match self.backend.next_event(now) {
                    Some(t) if t > now => t,
                    _ => return Err(PipelineError::Stalled(now)),
                }
            };
            now = next;
        }
        self.run.cycles = now;
        self.run.ooo_bypasses = self.backend.ooo_bypasses;
        self.run.shader_busy = self.backend.shader_busy_cycles;
        let mem = self.backend.mem.counters_snapshot();
        let pins = self.backend.mem.total_pins();
        let metrics = MetricsRecord::assemble(self.cfg, self.camera, &mem, &self.stats, &self.run, pins);
        let mut image = RgbImage::new(self.camera.width, self.camera.height);
        for (i, r) in self.radiance.iter().enumerate() {
            let (x, y) = (i as u32 % self.camera.width, i as u32 / self.camera.width);
            image.set(x, y, r.map(to_u8));
        }
        Ok(RenderResult {
            image,
            radiance: self.radiance,
            metrics,
            traversal: self.stats,
            events: self.events,
            samples: self.samples,
            coarse_visits: self.coarse_visits,
        })
    }
}

/// Renders `scene` from `camera`. Output depends only on the inputs, never
/// on the scheduling toggles.
pub fn render(scene: &Scene, camera: &Camera, cfg: &PipelineConfig) -> Result<RenderResult, PipelineError> {
    cfg.validate()?;
    if camera.width % 2 != 0 || camera.height % 2 != 0 {
        return Err(PipelineError::Config(format!("image must have even sides, got {}x{}", camera.width, camera.height)));
    }
    Engine::new(scene, camera, cfg).run()
}

/// Replays the batch stream of a recorded render through the back end and
/// returns the cycle at which the last batch finished shading.
pub fn simulate_cycles(events: &[Event], cfg: &BackendConfig) -> Result<u64, PipelineError> {
    let mut seen = std::collections::HashSet::new();
    let mut batches = Vec::new();
    for e in events {
        if let Event::Batch(b) = e {
            if b.samples == 0 {
                return Err(PipelineError::MalformedLog(format!("batch {} has no samples", b.id)));
            }
            if !seen.insert(b.id) {
                return Err(PipelineError::MalformedLog(format!("batch {} appears twice", b.id)));
            }
            batches.push(b.clone());
        }
    }
    Ok(simulate_batches(&batches, cfg)?)
}
