//! Hierarchical ray-packet marching over the coarse, fine, leaf and micro
//! tiers, with lag-first selection of which rays advance.

use crate::math::Vec3;
use crate::ray::{slab, tsps_refine, Ray, RayPacket};
use crate::scene::{
    leaf_occupied, Aabb, GridGeometry, OccupancyHierarchy, FINE_PER_COARSE, LEAF_PER_FINE, MICRO_PER_FINE,
    MICRO_PER_LEAF,
};

/// Intersections shorter than this produce no sample.
pub const MIN_SEGMENT: f64 = 1e-9;

/// Grid walk over one tier, restricted to an inclusive cell range.
/// Boundary-crossing parameters are recomputed from the plane positions
/// `index / dim`, so every tier agrees exactly on shared planes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dda {
    cell: [i64; 3],
    step: [i64; 3],
    t_next: [f64; 3],
    t: f64,
    dim: usize,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl Dda {
    /// Starts in the cell containing `ray.at(t)`, clamped into `lo..=hi`.
    pub fn start(ray: &Ray, t: f64, dim: usize, lo: [usize; 3], hi: [usize; 3]) -> Self {
        let p = ray.at(t);
        let mut d = Dda {
            cell: [0; 3],
            step: [0; 3],
            t_next: [f64::INFINITY; 3],
            t,
            dim,
            lo: lo.map(|v| v as i64),
            hi: hi.map(|v| v as i64),
        };
        for a in 0..3 {
            let c = (p[a] * dim as f64).floor() as i64;
            d.cell[a] = c.clamp(d.lo[a], d.hi[a]);
            d.step[a] = if ray.dir[a] > 0.0 {
                1
            } else if ray.dir[a] < 0.0 {
                -1
            } else {
                0
            };
            d.t_next[a] = d.crossing(ray, a);
        }
        d
    }

    fn crossing(&self, ray: &Ray, a: usize) -> f64 {
        if self.step[a] == 0 {
            return f64::INFINITY;
        }
        let plane = self.cell[a] + i64::from(self.step[a] > 0);
        (plane as f64 / self.dim as f64 - ray.origin[a]) / ray.dir[a]
    }

    pub fn cell(&self) -> [usize; 3] {
        self.cell.map(|v| v as usize)
    }

    /// Parameter at which the walk entered the current cell.
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn t_exit(&self) -> f64 {
        self.t_next[0].min(self.t_next[1]).min(self.t_next[2]).max(self.t)
    }

    fn exit_axis(&self) -> usize {
        let mut a = 0;
        for b in 1..3 {
            if self.t_next[b] < self.t_next[a] {
                a = b;
            }
        }
        a
    }

    /// Moves to the next cell; `false` once the walk leaves its range
    /// (the state then stays at the exit parameter).
    pub fn advance(&mut self, ray: &Ray) -> bool {
        let a = self.exit_axis();
        if self.t_next[a].is_infinite() {
            return false;
        }
        self.t = self.t.max(self.t_next[a]);
        let next = self.cell[a] + self.step[a];
        if next < self.lo[a] || next > self.hi[a] {
            return false;
        }
        self.cell[a] = next;
        self.t_next[a] = self.crossing(ray, a);
        true
    }
}

/// One shading request: the midpoint of a ray's intersection with an
/// occupied micro voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    /// Lane (0..4) of the originating ray within its packet.
    pub ray: u8,
    pub rp: u32,
    pub t: f64,
    pub delta: f64,
    pub position: Vec3,
    pub micro: [u32; 3],
    pub fine_linear: u32,
    pub coarse_linear: u32,
    /// Position within the micro voxel, in [0, 1] per axis.
    pub frac: [f64; 3],
}

/// Ray/micro-voxel intersection; `None` for grazing hits.
pub fn micro_segment(ray: &Ray, micro: [usize; 3], micro_dim: usize) -> Option<(f64, f64)> {
    let md = micro_dim as f64;
    let lo = Vec3::new(micro[0] as f64 / md, micro[1] as f64 / md, micro[2] as f64 / md);
    let hi = Vec3::new(
        (micro[0] + 1) as f64 / md,
        (micro[1] + 1) as f64 / md,
        (micro[2] + 1) as f64 / md,
    );
    let (t0, t1) = slab(ray, lo, hi)?;
    (t1 - t0 >= MIN_SEGMENT).then_some((t0, t1))
}

/// Midpoint sample of `ray` inside micro voxel `micro`, if the
/// intersection is not degenerate. Occupancy is the caller's concern.
pub fn generate_samples(ray: &Ray, micro: [usize; 3], geometry: GridGeometry) -> Option<Sample> {
    let md = geometry.micro_dim();
    let (t0, t1) = micro_segment(ray, micro, md)?;
    let t = 0.5 * (t0 + t1);
    let position = ray.at(t);
    let frac = std::array::from_fn(|a| (position[a] * md as f64 - micro[a] as f64).clamp(0.0, 1.0));
    let fine = micro.map(|v| v / MICRO_PER_FINE);
    Some(Sample {
        ray: 0,
        rp: 0,
        t,
        delta: t1 - t0,
        position,
        micro: micro.map(|v| v as u32),
        fine_linear: geometry.fine_linear(fine) as u32,
        coarse_linear: geometry.coarse_linear(geometry.coarse_of_fine(fine)) as u32,
        frac,
    })
}

/// Lag-first selection: the alive ray with minimal `t` (lowest lane on
/// ties) names the voxel; every alive ray in that voxel joins the mask.
/// `voxel[i] == None` marks lane `i` as not eligible.
pub fn lfau_select(t: [f64; 4], voxel: [Option<usize>; 4]) -> Option<(usize, u8)> {
    let mut lag: Option<usize> = None;
    for i in 0..4 {
        if voxel[i].is_some() && lag.is_none_or(|j| t[i] < t[j]) {
            lag = Some(i);
        }
    }
    let tag = voxel[lag?]?;
    let mask = (0..4).filter(|&i| voxel[i] == Some(tag)).fold(0u8, |m, i| m | 1 << i);
    Some((tag, mask))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraversalStats {
    pub coarse_queries: u64,
    pub fine_queries: u64,
    pub leaf_queries: u64,
    pub micro_queries: u64,
    pub micro_word_fetches: u64,
    pub active_rays_coarse: u64,
    pub active_rays_fine: u64,
    pub samples: u64,
    /// Advanced rays checked against the selected tag, and mismatches.
    pub lag_first_checks: u64,
    pub lag_first_violations: u64,
    /// Steps where every advanced ray had the minimal `t`, and how many of
    /// those widened the alive-ray `t` spread.
    pub lag_only_steps: u64,
    pub spread_increases: u64,
}

impl TraversalStats {
    pub fn merge(&mut self, o: &TraversalStats) {
        self.coarse_queries += o.coarse_queries;
        self.fine_queries += o.fine_queries;
        self.leaf_queries += o.leaf_queries;
        self.micro_queries += o.micro_queries;
        self.micro_word_fetches += o.micro_word_fetches;
        self.active_rays_coarse += o.active_rays_coarse;
        self.active_rays_fine += o.active_rays_fine;
        self.samples += o.samples;
        self.lag_first_checks += o.lag_first_checks;
        self.lag_first_violations += o.lag_first_violations;
        self.lag_only_steps += o.lag_only_steps;
        self.spread_increases += o.spread_increases;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoarseEvent {
    /// An empty coarse voxel was skipped.
    Continue,
    /// The selected rays reached occupied coarse voxel `tag`.
    Crp { tag: usize, mask: u8 },
    /// No ray has coarse work left.
    Exited,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FineEvent {
    Continue,
    /// Samples were emitted for one occupied fine voxel.
    Samples,
    /// Every packet member has left the coarse voxel or stopped.
    CvExit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FineStep {
    pub event: FineEvent,
    /// Fine voxel whose micro word was read this step.
    pub fetched: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lane {
    ray: Ray,
    t_end: f64,
    coarse: Option<Dda>,
    fine: Option<Dda>,
    terminated: bool,
}

impl Lane {
    fn marching(&self) -> bool {
        self.coarse.is_some() && !self.terminated
    }
}

/// Persistent traversal state of one ray packet.
#[derive(Clone, Debug, PartialEq)]
pub struct RpTraversal {
    lanes: [Lane; 4],
    geometry: GridGeometry,
    /// Members of the current coarse-voxel visit.
    mask: u8,
    tag: Option<usize>,
    /// Coarse voxels examined per lane.
    pub coarse_visits: [u32; 4],
}

fn box_range(b: &Aabb, dim: usize) -> ([usize; 3], [usize; 3]) {
    let d = dim as f64;
    let lo = [0, 1, 2].map(|a| ((b.min[a] * d).floor().max(0.0) as usize).min(dim - 1));
    let hi = [0, 1, 2].map(|a| (((b.max[a] * d).ceil() as usize).max(1) - 1).min(dim - 1));
    (lo, hi)
}

impl RpTraversal {
    /// Runs the box test and start-point refinement for every ray.
    /// `bounds == None` (an empty scene) makes every ray miss.
    pub fn new(rp: &RayPacket, bounds: Option<&Aabb>, geometry: GridGeometry, tol: f64) -> Self {
        let (lo, hi) = bounds.map_or(([0; 3], [0; 3]), |b| box_range(b, geometry.coarse_dim()));
        let lanes = rp.rays.map(|ray| {
            let mut ray = ray;
            let hit = bounds.and_then(|b| crate::ray::aabb_test(&ray, b).map(|span| (span, tsps_refine(&ray, b, tol))));
            match hit {
                Some(((t_enter, t_end), t0)) if t_enter < t_end => {
                    // The refined point is at most `tol` past the entry and
                    // `t0 - tol` is outside, so walking from there (clamped
                    // into range) cannot miss a voxel clipped at the face.
                    let start = t0.map_or(t_enter, |t0| (t0 - tol).max(0.0).min(t_enter));
                    ray.t = start;
                    let coarse = Dda::start(&ray, start, geometry.coarse_dim(), lo, hi);
                    Lane { ray, t_end, coarse: Some(coarse), fine: None, terminated: false }
                }
                _ => {
                    ray.alive = false;
                    Lane { ray, t_end: 0.0, coarse: None, fine: None, terminated: false }
                }
            }
        });
        Self { lanes, geometry, mask: 0, tag: None, coarse_visits: [0; 4] }
    }

    pub fn rays(&self) -> [Ray; 4] {
        self.lanes.map(|l| l.ray)
    }

    pub fn tag(&self) -> Option<usize> {
        self.tag
    }

    pub fn mask(&self) -> u8 {
        self.mask
    }

    /// True while some ray still has traversal work.
    pub fn any_marching(&self) -> bool {
        self.lanes.iter().any(Lane::marching)
    }

    pub fn mark_terminated(&mut self, lane: usize) {
        let l = &mut self.lanes[lane];
        l.terminated = true;
        l.ray.alive = false;
    }

    pub fn is_terminated(&self, lane: usize) -> bool {
        self.lanes[lane].terminated
    }

    fn spread(&self, eligible: &dyn Fn(&Self, usize) -> bool) -> f64 {
        let ts = (0..4).filter(|&i| eligible(self, i)).map(|i| self.lanes[i].ray.t);
        let (lo, hi) = ts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
        if lo.is_finite() { hi - lo } else { 0.0 }
    }

    /// Checks that every ray about to advance sits in the selected voxel and
    /// reports whether they all have the minimal `t`, plus the spread before.
    fn check_advance(
        &self,
        stats: &mut TraversalStats,
        mask: u8,
        tag: usize,
        voxel: [Option<usize>; 4],
        eligible: &dyn Fn(&Self, usize) -> bool,
    ) -> (bool, f64) {
        let min_t = (0..4)
            .filter(|&i| eligible(self, i))
            .map(|i| self.lanes[i].ray.t)
            .fold(f64::INFINITY, f64::min);
        let mut lag_only = true;
        for i in (0..4).filter(|i| mask >> i & 1 == 1) {
            stats.lag_first_checks += 1;
            if voxel[i] != Some(tag) {
                stats.lag_first_violations += 1;
            }
            lag_only &= self.lanes[i].ray.t == min_t;
        }
        (lag_only, self.spread(eligible))
    }

    fn record_spread(&self, stats: &mut TraversalStats, lag_only: bool, before: f64, eligible: &dyn Fn(&Self, usize) -> bool) {
        if lag_only {
            stats.lag_only_steps += 1;
            if self.spread(eligible) > before {
                stats.spread_increases += 1;
            }
        }
    }

    /// Coarse-tier step: one bitmap query for the lagging group.
    pub fn coarse_step(&mut self, hierarchy: &OccupancyHierarchy, stats: &mut TraversalStats) -> CoarseEvent {
        let g = self.geometry;
        let voxel = self.lanes.map(|l| {
            l.coarse.filter(|_| l.marching()).map(|d| g.coarse_linear(d.cell()))
        });
        let t = self.lanes.map(|l| l.ray.t);
        let Some((tag, mask)) = lfau_select(t, voxel) else {
            self.mask = 0;
            self.tag = None;
            return CoarseEvent::Exited;
        };
        stats.coarse_queries += 1;
        stats.active_rays_coarse += mask.count_ones() as u64;
        for i in (0..4).filter(|i| mask >> i & 1 == 1) {
            self.coarse_visits[i] += 1;
        }
        if hierarchy.coarse().get_linear(tag) {
            let c = g.coarse_coords(tag);
            let lo = c.map(|v| v * FINE_PER_COARSE);
            let hi = lo.map(|v| v + FINE_PER_COARSE - 1);
            for i in (0..4).filter(|i| mask >> i & 1 == 1) {
                let l = &mut self.lanes[i];
                l.fine = Some(Dda::start(&l.ray, l.ray.t, g.fine_dim(), lo, hi));
            }
            self.mask = mask;
            self.tag = Some(tag);
            return CoarseEvent::Crp { tag, mask };
        }
        let marching = |s: &Self, i: usize| s.lanes[i].marching();
        let (lag_only, before) = self.check_advance(stats, mask, tag, voxel, &marching);
        for i in (0..4).filter(|i| mask >> i & 1 == 1) {
            let l = &mut self.lanes[i];
            let mut d = l.coarse.expect("selected lane is marching");
            let inside = d.advance(&l.ray);
            l.ray.t = d.t();
            l.coarse = (inside && d.t() < l.t_end).then_some(d);
            if l.coarse.is_none() {
                l.ray.alive = false;
            }
        }
        self.record_spread(stats, lag_only, before, &marching);
        CoarseEvent::Continue
    }

    fn in_cv(&self, i: usize) -> bool {
        self.mask >> i & 1 == 1 && self.lanes[i].fine.is_some() && self.lanes[i].marching()
    }

    /// Fine-tier step inside the current coarse voxel. Samples for an
    /// occupied fine voxel are appended to `out`.
    pub fn fine_step(
        &mut self,
        hierarchy: &OccupancyHierarchy,
        rp: u32,
        stats: &mut TraversalStats,
        out: &mut Vec<Sample>,
    ) -> FineStep {
        let g = self.geometry;
        let voxel: [Option<usize>; 4] = std::array::from_fn(|i| {
            self.in_cv(i).then(|| g.fine_linear(self.lanes[i].fine.unwrap().cell()))
        });
        let t = self.lanes.map(|l| l.ray.t);
        let Some((tag, mask)) = lfau_select(t, voxel) else {
            for l in &mut self.lanes {
                l.fine = None;
            }
            self.mask = 0;
            self.tag = None;
            return FineStep { event: FineEvent::CvExit, fetched: None };
        };
        stats.fine_queries += 1;
        stats.active_rays_fine += mask.count_ones() as u64;
        let members: Vec<usize> = (0..4).filter(|i| mask >> i & 1 == 1).collect();
        let in_cv = |s: &Self, i: usize| s.in_cv(i);
        let (lag_only, before) = self.check_advance(stats, mask, tag, voxel, &in_cv);

        let mut fetched = None;
        let before_len = out.len();
        if hierarchy.fine().get_linear(tag) {
            fetched = Some(tag);
            stats.micro_word_fetches += 1;
            let word = hierarchy.micro_word(tag);
            for &i in &members {
                let lane = &self.lanes[i];
                let start = out.len();
                march_fine_voxel(&lane.ray, lane.fine.unwrap(), word, g, stats, out);
                for s in &mut out[start..] {
                    s.ray = i as u8;
                    s.rp = rp;
                }
            }
        }

        for &i in &members {
            let l = &mut self.lanes[i];
            let mut f = l.fine.expect("member has fine state");
            let inside = f.advance(&l.ray);
            l.ray.t = f.t();
            if f.t() >= l.t_end {
                l.fine = None;
                l.coarse = None;
                l.ray.alive = false;
            } else if inside {
                l.fine = Some(f);
            } else {
                l.fine = None;
                let mut c = l.coarse.expect("fine walk implies coarse walk");
                let still = c.advance(&l.ray);
                l.coarse = (still && c.t() < l.t_end).then_some(c);
                if l.coarse.is_none() {
                    l.ray.alive = false;
                }
            }
        }
        // Lanes that just left the voxel drop out of the spread; the mask
        // still names the visit's members.
        self.record_spread(stats, lag_only, before, &in_cv);

        let emitted = out.len() > before_len;
        stats.samples += (out.len() - before_len) as u64;
        let event = if emitted { FineEvent::Samples } else { FineEvent::Continue };
        FineStep { event, fetched }
    }
}

/// Leaf then micro walk through one occupied fine voxel.
fn march_fine_voxel(
    ray: &Ray,
    fine: Dda,
    word: u64,
    g: GridGeometry,
    stats: &mut TraversalStats,
    out: &mut Vec<Sample>,
) {
    let f = fine.cell();
    let leaf_dim = g.fine_dim() * LEAF_PER_FINE;
    let lo = f.map(|v| v * LEAF_PER_FINE);
    let hi = lo.map(|v| v + LEAF_PER_FINE - 1);
    let mut leaf = Dda::start(ray, fine.t(), leaf_dim, lo, hi);
    loop {
        stats.leaf_queries += 1;
        let lc = leaf.cell();
        let local = [0, 1, 2].map(|a| lc[a] - lo[a]);
        if leaf_occupied(word, local) {
            let mlo = lc.map(|v| v * MICRO_PER_LEAF);
            let mhi = mlo.map(|v| v + MICRO_PER_LEAF - 1);
            let mut micro = Dda::start(ray, leaf.t(), g.micro_dim(), mlo, mhi);
            loop {
                stats.micro_queries += 1;
                let m = micro.cell();
                let bit = [0, 1, 2].map(|a| m[a] % MICRO_PER_FINE);
                if word >> (bit[0] + MICRO_PER_FINE * (bit[1] + MICRO_PER_FINE * bit[2])) & 1 == 1 {
                    if let Some(s) = generate_samples(ray, m, g) {
                        out.push(s);
                    }
                }
                if !micro.advance(ray) {
                    break;
                }
            }
        }
        if !leaf.advance(ray) {
            break;
        }
    }
}
