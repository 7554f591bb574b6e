//! Parallel block coordinate ascent over a catalog.
//!
//! Sources whose regions overlap are never updated at the same time. A
//! worker takes a source from the queue only after try-locking the source
//! and all of its neighbors in index order; otherwise the source goes back
//! to the end of the queue.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, RwLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{sample_source, source_rng, AisConfig, SourcePosterior};
use crate::model::{truncation_radius, ImageModel, ProfileTable, SourceParams, DEFAULT_REF_BAND};
use crate::patch::{Patch, MAX_PATCH_RADIUS};
use crate::priors::PriorParams;
use crate::vi::{
    add_variational_source, build_neighborhood, kl_source, optimize_source, refine_source, Neighborhood, NewtonOptions,
    Region, SourceObjective, VariationalParams,
};

/// Which sources interact: an edge joins two sources whose disks intersect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapGraph {
    adjacency: Vec<Vec<usize>>,
}

impl OverlapGraph {
    /// Graph of disks `(positions[i], radii[i])`, in pixels. Candidate pairs
    /// come from a uniform grid, so the cost is near linear for sparse fields.
    pub fn build(positions: &[[f64; 2]], radii: &[f64]) -> Result<Self> {
        if positions.len() != radii.len() {
            return Err(Error::InvalidParameter(format!(
                "{} positions but {} radii",
                positions.len(),
                radii.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite source position".into()));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter("radii must be finite and non-negative".into()));
        }
        let n = positions.len();
        let cell = (2.0 * radii.iter().copied().fold(0.0, f64::max)).max(1.0);
        let key = |p: [f64; 2]| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in positions.iter().enumerate() {
            grid.entry(key(p)).or_default().push(i);
        }
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            let (cx, cy) = key(positions[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(cands) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in cands {
                        let d2 =
                            (positions[i][0] - positions[j][0]).powi(2) + (positions[i][1] - positions[j][1]).powi(2);
                        if j > i && d2 <= (radii[i] + radii[j]).powi(2) {
                            adjacency[i].push(j);
                            adjacency[j].push(i);
                        }
                    }
                }
            }
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Ok(Self { adjacency })
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.adjacency[s]
    }

    pub fn is_isolated(&self, s: usize) -> bool {
        self.adjacency[s].is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// `s` and its neighbors, ascending.
    fn lock_set(&self, s: usize) -> Vec<usize> {
        let mut set = self.adjacency[s].clone();
        let at = set.partition_point(|&j| j < s);
        set.insert(at, s);
        set
    }
}

/// Span during which one source was being updated, in seconds from the start
/// of the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub source: usize,
    pub pass: usize,
    pub thread: usize,
    pub start: f64,
    pub end: f64,
}

struct LockTable(Vec<AtomicBool>);

impl LockTable {
    fn new(n: usize) -> Self {
        Self((0..n).map(|_| AtomicBool::new(false)).collect())
    }

    /// Takes every lock in `set` (ascending) or none.
    fn try_acquire(&self, set: &[usize]) -> bool {
        for (k, &i) in set.iter().enumerate() {
            if self.0[i]
                .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
                .is_err()
            {
                self.release(&set[..k]);
                return false;
            }
        }
        true
    }

    fn release(&self, set: &[usize]) {
        for &i in set {
            self.0[i].store(false, Ordering::Release);
        }
    }
}

struct PassRun<T> {
    results: Vec<(usize, T)>,
    intervals: Vec<Interval>,
    idle: f64,
}

/// Runs `work` once for every source in `order` on `threads` workers, never
/// on two adjacent sources at once.
fn run_pass<T, F>(
    graph: &OverlapGraph,
    order: &[usize],
    threads: usize,
    pass: usize,
    epoch: Instant,
    work: F,
) -> PassRun<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let locks = LockTable::new(graph.len());
    let queue = Mutex::new(order.iter().copied().collect::<VecDeque<usize>>());
    let wake = Condvar::new();
    let merged = Mutex::new(PassRun {
        results: Vec::with_capacity(order.len()),
        intervals: Vec::with_capacity(order.len()),
        idle: 0.0,
    });
    std::thread::scope(|scope| {
        for thread in 0..threads.max(1) {
            let (locks, queue, wake, merged, work) = (&locks, &queue, &wake, &merged, &work);
            scope.spawn(move || {
                let mut mine = PassRun {
                    results: Vec::new(),
                    intervals: Vec::new(),
                    idle: 0.0,
                };
                loop {
                    let mut q = queue.lock().expect("queue lock");
                    let picked = loop {
                        if q.is_empty() {
                            break None;
                        }
                        let mut found = None;
                        for _ in 0..q.len() {
                            let s = q.pop_front().expect("non-empty");
                            let set = graph.lock_set(s);
                            if locks.try_acquire(&set) {
                                found = Some((s, set));
                                break;
                            }
                            q.push_back(s);
                        }
                        if found.is_some() {
                            break found;
                        }
                        // every queued source is blocked by one in progress
                        let t = Instant::now();
                        q = wake.wait(q).expect("queue lock");
                        mine.idle += t.elapsed().as_secs_f64();
                    };
                    drop(q);
                    let Some((s, set)) = picked else {
                        break;
                    };
                    let start = epoch.elapsed().as_secs_f64();
                    let out = work(s);
                    let end = epoch.elapsed().as_secs_f64();
                    {
                        // release under the queue lock so no waiter misses it
                        let _q = queue.lock().expect("queue lock");
                        locks.release(&set);
                        wake.notify_all();
                    }
                    mine.results.push((s, out));
                    mine.intervals.push(Interval {
                        source: s,
                        pass,
                        thread,
                        start,
                        end,
                    });
                }
                let mut all = merged.lock().expect("merge lock");
                all.results.append(&mut mine.results);
                all.intervals.append(&mut mine.intervals);
                all.idle += mine.idle;
            });
        }
    });
    merged.into_inner().expect("merge lock")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceOrder {
    RoundRobin,
    Random { seed: u64 },
}

/// Visit order for one pass. The field is cut into vertical strips by the
/// first image's column; sources are taken strip by strip, and odd passes
/// shift the strip boundaries by half a strip.
fn pass_order(
    columns: &[f64],
    width: f64,
    strips: usize,
    pass: usize,
    order: SourceOrder,
    include: &[bool],
) -> Vec<usize> {
    let strip_width = width / strips.max(1) as f64;
    let shift = if pass % 2 == 1 { 0.5 * strip_width } else { 0.0 };
    let mut ids: Vec<usize> = (0..columns.len()).filter(|&s| include[s]).collect();
    if let SourceOrder::Random { seed } = order {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pass as u64);
        ids.shuffle(&mut rng);
    }
    let strip = |s: usize| ((columns[s] + 0.5 - shift) / strip_width).floor() as i64;
    ids.sort_by_key(|&s| strip(s));
    ids
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub threads: usize,
    /// Passes over sources that have neighbors; isolated sources are fitted
    /// once.
    pub passes: usize,
    /// Vertical strips that set the visit order.
    pub strips: usize,
    pub order: SourceOrder,
    pub newton: NewtonOptions,
    pub ref_band: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            passes: 3,
            strips: 4,
            order: SourceOrder::RoundRobin,
            newton: NewtonOptions::default(),
            ref_band: DEFAULT_REF_BAND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    /// Single-source ELBO at the final states.
    pub elbo: f64,
    pub updates: usize,
    pub converged: bool,
    /// Newton iterations in the last update.
    pub iterations: usize,
    /// Wall time spent building neighborhoods and optimizing, summed over
    /// updates.
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub threads: usize,
    pub passes: usize,
    pub edges: usize,
    pub isolated: usize,
    pub sources: Vec<SourceReport>,
    /// Global ELBO before the first pass and after each pass.
    pub global_elbo: Vec<f64>,
    pub load_seconds: f64,
    pub optimize_seconds: f64,
    pub idle_seconds: f64,
    pub wall_seconds: f64,
    pub regions: Vec<Region>,
    pub intervals: Vec<Interval>,
}

fn pixel_positions(images: &[ImageModel], directions: impl Iterator<Item = [f64; 2]>) -> Vec<[f64; 2]> {
    directions.map(|d| images[0].wcs.to_pixel(d)).collect()
}

/// Global ELBO: the expected log-likelihood of every pixel of every image,
/// each source's light confined to its region, minus every source's KL.
pub fn global_elbo(
    images: &[ImageModel],
    states: &[VariationalParams],
    regions: &[Region],
    prior: &PriorParams,
    table: &ProfileTable,
    ref_band: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (idx, img) in images.iter().enumerate() {
        let one = std::slice::from_ref(img);
        let center = img
            .wcs
            .to_sky([0.5 * (img.width as f64 - 1.0), 0.5 * (img.height as f64 - 1.0)]);
        let mut patch = Patch::new(one, center, (img.width as f64).hypot(img.height as f64), ref_band)
            .map_err(|e| Error::InvalidParameter(format!("image {idx}: {e}")))?;
        for (vp, r) in states.iter().zip(regions) {
            add_variational_source(&mut patch, one, vp, Some(r), table)?;
        }
        let bp = &patch.bands[0];
        for i in 0..bp.len() {
            let (e, v) = (bp.base[i], bp.base_var[i]);
            total += bp.counts[i] * (e.ln() - v / (2.0 * e * e)) - e - bp.ln_fact[i];
        }
    }
    for vp in states {
        total -= kl_source(vp, prior)?;
    }
    Ok(total)
}

struct Update {
    load: f64,
    optimize: f64,
    outcome: Result<(bool, usize)>,
}

/// Variational fit of a whole catalog by block coordinate ascent.
pub fn fit_catalog(
    images: &[ImageModel],
    init: &[VariationalParams],
    prior: &PriorParams,
    table: &ProfileTable,
    options: &FitOptions,
) -> Result<(Vec<VariationalParams>, FitReport)> {
    if options.threads == 0 {
        return Err(Error::InvalidParameter("threads must be at least 1".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidParameter("no images".into()));
    }
    let epoch = Instant::now();
    let ref_band = options.ref_band;
    let regions = init
        .iter()
        .map(|vp| Region::for_source(images, vp, table, ref_band))
        .collect::<Result<Vec<_>>>()?;
    let positions = pixel_positions(images, regions.iter().map(|r| r.center));
    let radii: Vec<f64> = regions.iter().map(|r| r.radius).collect();
    let graph = OverlapGraph::build(&positions, &radii)?;
    let columns: Vec<f64> = positions.iter().map(|p| p[0]).collect();

    let states: Vec<RwLock<VariationalParams>> = init.iter().cloned().map(RwLock::new).collect();
    let snapshot = |states: &[RwLock<VariationalParams>]| -> Vec<VariationalParams> {
        states.iter().map(|s| s.read().expect("state lock").clone()).collect()
    };
    let mut global = vec![global_elbo(images, init, &regions, prior, table, ref_band)?];
    let mut sources = vec![
        SourceReport {
            elbo: f64::NAN,
            updates: 0,
            converged: false,
            iterations: 0,
            seconds: 0.0,
            error: None,
        };
        init.len()
    ];
    let (mut load, mut optimize, mut idle) = (0.0, 0.0, 0.0);
    let mut intervals = Vec::new();

    // The type-flip restart runs on a source's first update only.
    let work = |s: usize, first: bool| -> Update {
        let t0 = Instant::now();
        let target = states[s].read().expect("state lock").clone();
        let neighbors: Vec<VariationalParams> = graph
            .neighbors(s)
            .iter()
            .map(|&j| states[j].read().expect("state lock").clone())
            .collect();
        let pairs: Vec<(&VariationalParams, &Region)> = neighbors
            .iter()
            .zip(graph.neighbors(s))
            .map(|(vp, &j)| (vp, &regions[j]))
            .collect();
        let nb = build_neighborhood(images, &target, &regions[s], &pairs, table, ref_band);
        let t1 = Instant::now();
        let fit = |nb: Neighborhood| {
            if first {
                optimize_source(&target, &nb, prior, table, &options.newton)
            } else {
                refine_source(&target, &nb, prior, table, &options.newton)
            }
        };
        let outcome = nb.and_then(fit).map(|fit| {
            let summary = (fit.converged, fit.iterations);
            *states[s].write().expect("state lock") = fit.params;
            summary
        });
        Update {
            load: (t1 - t0).as_secs_f64(),
            optimize: t1.elapsed().as_secs_f64(),
            outcome,
        }
    };

    let passes = options.passes.max(1);
    for pass in 0..passes {
        let include: Vec<bool> = (0..init.len()).map(|s| pass == 0 || !graph.is_isolated(s)).collect();
        let order = pass_order(
            &columns,
            images[0].width as f64,
            options.strips,
            pass,
            options.order,
            &include,
        );
        let run = run_pass(&graph, &order, options.threads, pass, epoch, |s| work(s, pass == 0));
        idle += run.idle;
        intervals.extend(run.intervals);
        for (s, u) in run.results {
            load += u.load;
            optimize += u.optimize;
            let rep = &mut sources[s];
            rep.updates += 1;
            rep.seconds += u.load + u.optimize;
            match u.outcome {
                Ok((converged, iterations)) => {
                    rep.converged = converged;
                    rep.iterations = iterations;
                }
                Err(e) => rep.error = Some(e.to_string()),
            }
        }
        global.push(global_elbo(
            images,
            &snapshot(&states),
            &regions,
            prior,
            table,
            ref_band,
        )?);
    }

    let fitted = snapshot(&states);
    for s in 0..fitted.len() {
        let pairs: Vec<(&VariationalParams, &Region)> =
            graph.neighbors(s).iter().map(|&j| (&fitted[j], &regions[j])).collect();
        let nb = build_neighborhood(images, &fitted[s], &regions[s], &pairs, table, ref_band)?;
        let objective = SourceObjective::new(&nb, prior, table)?;
        // NaN marks a source whose state cannot be evaluated
        sources[s].elbo = objective
            .evaluate(&nb.chart.to_vector(&fitted[s]))
            .map_or(f64::NAN, |v| v.value);
    }
    intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
    let report = FitReport {
        threads: options.threads,
        passes,
        edges: graph.num_edges(),
        isolated: (0..graph.len()).filter(|&s| graph.is_isolated(s)).count(),
        sources,
        global_elbo: global,
        load_seconds: load,
        optimize_seconds: optimize,
        idle_seconds: idle,
        wall_seconds: epoch.elapsed().as_secs_f64(),
        regions,
        intervals,
    };
    Ok((fitted, report))
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub threads: usize,
    pub sweeps: usize,
    pub order: SourceOrder,
    pub ais: AisConfig,
    pub ref_band: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            sweeps: 1,
            order: SourceOrder::RoundRobin,
            ais: AisConfig::desk(),
            ref_band: DEFAULT_REF_BAND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub threads: usize,
    pub sweeps: usize,
    pub wall_seconds: f64,
    pub idle_seconds: f64,
    pub errors: Vec<Option<String>>,
    pub intervals: Vec<Interval>,
}

/// Reach of a fixed source's influence under the sampler: its patch never
/// exceeds [`MAX_PATCH_RADIUS`] and its light stops at the truncation radius.
fn sampler_radius(images: &[ImageModel], source: &SourceParams, table: &ProfileTable) -> f64 {
    let reach = images
        .iter()
        .map(|img| truncation_radius(img, source, table))
        .fold(0.0, f64::max);
    reach.max(MAX_PATCH_RADIUS)
}

/// Gibbs sweeps over a catalog, each source resampled given the others,
/// with non-adjacent sources sampled in parallel. Returns the final state
/// and each source's posterior pooled over the second half of the sweeps,
/// its `seconds` summed over all sweeps.
#[allow(clippy::type_complexity)]
pub fn sample_catalog(
    images: &[ImageModel],
    init: &[SourceParams],
    prior: &PriorParams,
    table: &ProfileTable,
    options: &SampleOptions,
) -> Result<(Vec<SourceParams>, Vec<Option<SourcePosterior>>, SampleReport)> {
    if options.threads == 0 {
        return Err(Error::InvalidParameter("threads must be at least 1".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidParameter("no images".into()));
    }
    options.ais.validate()?;
    let epoch = Instant::now();
    let states: Vec<RwLock<SourceParams>> = init.iter().cloned().map(RwLock::new).collect();
    let snapshot = || -> Vec<SourceParams> { states.iter().map(|s| s.read().expect("state lock").clone()).collect() };
    let mut posteriors: Vec<Option<SourcePosterior>> = vec![None; init.len()];
    let mut pooled = vec![0usize; init.len()];
    // the first half of the sweeps is burn-in
    let keep_from = options.sweeps / 2;
    let mut errors: Vec<Option<String>> = vec![None; init.len()];
    let mut spent = vec![0.0; init.len()];
    let mut intervals = Vec::new();
    let mut idle = 0.0;
    for sweep in 0..options.sweeps {
        let current = snapshot();
        let positions = pixel_positions(images, current.iter().map(|s| s.direction));
        let radii: Vec<f64> = current.iter().map(|s| sampler_radius(images, s, table)).collect();
        let graph = OverlapGraph::build(&positions, &radii)?;
        let include = vec![true; init.len()];
        let columns: Vec<f64> = positions.iter().map(|p| p[0]).collect();
        let order = pass_order(&columns, images[0].width as f64, 1, sweep, options.order, &include);
        let work = |s: usize| -> Result<SourcePosterior> {
            let view = snapshot();
            let post = sample_source(
                &view,
                images,
                prior,
                table,
                &options.ais,
                options.ref_band,
                s,
                sweep as u64,
            )?;
            let mut rng = source_rng(options.ais.seed ^ 0x5eed, sweep as u64, s);
            *states[s].write().expect("state lock") = post.draw(&mut rng);
            Ok(post)
        };
        let run = run_pass(&graph, &order, options.threads, sweep, epoch, work);
        idle += run.idle;
        intervals.extend(run.intervals);
        for (s, out) in run.results {
            match out {
                Ok(post) => {
                    spent[s] += post.seconds;
                    match &mut posteriors[s] {
                        Some(acc) if sweep > keep_from && pooled[s] > 0 => acc.pool(post, pooled[s]),
                        _ => posteriors[s] = Some(post),
                    }
                    pooled[s] = if sweep >= keep_from { pooled[s] + 1 } else { 0 };
                    errors[s] = None;
                }
                Err(e) => errors[s] = Some(e.to_string()),
            }
        }
    }
    for (post, secs) in posteriors.iter_mut().zip(spent) {
        if let Some(p) = post {
            p.seconds = secs;
        }
    }
    intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
    let report = SampleReport {
        threads: options.threads,
        sweeps: options.sweeps,
        wall_seconds: epoch.elapsed().as_secs_f64(),
        idle_seconds: idle,
        errors,
        intervals,
    };
    Ok((snapshot(), posteriors, report))
}
