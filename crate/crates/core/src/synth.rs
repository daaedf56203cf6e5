//! AR vibration synthesis over the force/speed grid and tap transient playback.

use std::path::Path;

use delaunator::{triangulate, Point};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::corpus::{ArGrid, TapBank, TAP_LEN, TAP_RATE_HZ};
use crate::lpc::{self, ArCoeffs, LpcError, LsfVector, AR_ORDER};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error(transparent)]
    Lpc(#[from] LpcError),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

/// Where an interpolated model came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Exactly at grid node `i`.
    Node(usize),
    /// On an edge shared by two triangles (or a hull edge).
    Edge,
    Interior,
    /// Outside the hull, clamped to the nearest hull point.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolatedParams<T> {
    pub ar: ArCoeffs<T>,
    pub lsf: LsfVector<T>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
struct Node<T> {
    x: T,
    y: T,
    lsf: LsfVector<T>,
    ar: ArCoeffs<T>,
}

/// Delaunay-triangulated AR grid. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Interpolator<T> {
    nodes: Vec<Node<T>>,
    triangles: Vec<[usize; 3]>,
    hull: Vec<usize>,
    f_min: T,
    f_span: T,
    v_min: T,
    v_span: T,
}

const NODE_SNAP: f64 = 1e-12;
const EDGE_SNAP: f64 = 1e-12;

impl<T: Scalar> Interpolator<T> {
    pub fn new(grid: &ArGrid) -> Result<Self, SynthError> {
        let n = grid.entries.len();
        if n < 3 {
            return Err(SynthError::DegenerateGrid(format!("{n} points, need at least 3")));
        }
        for e in &grid.entries {
            if !e.force.is_finite() || !e.speed.is_finite() {
                return Err(SynthError::NonFiniteInput("grid force/speed"));
            }
            lpc::validate_lsf(&e.lsf)?;
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (&grid.entries[i], &grid.entries[j]);
                if a.force == b.force && a.speed == b.speed {
                    return Err(SynthError::DegenerateGrid(format!(
                        "duplicate point ({}, {}) at entries {j} and {i}",
                        a.force, a.speed
                    )));
                }
            }
        }
        let range = |it: &mut dyn Iterator<Item = f64>| {
            it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
        };
        let (f_lo, f_hi) = range(&mut grid.entries.iter().map(|e| e.force));
        let (v_lo, v_hi) = range(&mut grid.entries.iter().map(|e| e.speed));
        if !(f_hi > f_lo) || !(v_hi > v_lo) {
            return Err(SynthError::DegenerateGrid("all points collinear".into()));
        }
        let pts: Vec<Point> = grid
            .entries
            .iter()
            .map(|e| Point { x: (e.force - f_lo) / (f_hi - f_lo), y: (e.speed - v_lo) / (v_hi - v_lo) })
            .collect();
        let tri = triangulate(&pts);
        let triangles: Vec<[usize; 3]> = tri
            .triangles
            .chunks_exact(3)
            .map(|t| [t[0], t[1], t[2]])
            .filter(|t| {
                let (a, b, c) = (&pts[t[0]], &pts[t[1]], &pts[t[2]]);
                ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs() > 1e-14
            })
            .collect();
        if triangles.is_empty() {
            return Err(SynthError::DegenerateGrid("all points collinear".into()));
        }
        let mut nodes = Vec::with_capacity(n);
        for (e, p) in grid.entries.iter().zip(&pts) {
            let lsf = LsfVector(e.lsf.map(T::lit));
            let ar = lpc::lsf_to_ar(&lsf, T::lit(e.variance))?;
            nodes.push(Node { x: T::lit(p.x), y: T::lit(p.y), lsf, ar });
        }
        Ok(Self {
            nodes,
            triangles,
            hull: tri.hull,
            f_min: T::lit(f_lo),
            f_span: T::lit(f_hi - f_lo),
            v_min: T::lit(v_lo),
            v_span: T::lit(v_hi - v_lo),
        })
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Hull vertex indices in boundary order.
    pub fn hull(&self) -> &[usize] {
        &self.hull
    }

    /// Normalized coordinates of node `i`.
    pub fn node_point(&self, i: usize) -> (T, T) {
        (self.nodes[i].x, self.nodes[i].y)
    }

    pub fn node_params(&self, i: usize) -> (&LsfVector<T>, &ArCoeffs<T>) {
        (&self.nodes[i].lsf, &self.nodes[i].ar)
    }

    pub fn normalize(&self, f: T, v: T) -> (T, T) {
        ((f - self.f_min) / self.f_span, (v - self.v_min) / self.v_span)
    }

    pub fn denormalize(&self, x: T, y: T) -> (T, T) {
        (self.f_min + x * self.f_span, self.v_min + y * self.v_span)
    }

    /// Barycentric weights of normalized point `(x, y)` in triangle `t`.
    pub fn barycentric(&self, t: usize, x: T, y: T) -> [T; 3] {
        let [i, j, k] = self.triangles[t];
        let (a, b, c) = (&self.nodes[i], &self.nodes[j], &self.nodes[k]);
        let det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
        let w0 = ((b.y - c.y) * (x - c.x) + (c.x - b.x) * (y - c.y)) / det;
        let w1 = ((c.y - a.y) * (x - c.x) + (a.x - c.x) * (y - c.y)) / det;
        [w0, w1, T::one() - w0 - w1]
    }

    /// Blend inside triangle `t` at normalized `(x, y)`, whether or not the
    /// point lies in it.
    pub fn interpolate_in(&self, t: usize, x: T, y: T) -> Result<InterpolatedParams<T>, LpcError> {
        let w = self.barycentric(t, x, y);
        let tri = self.triangles[t];
        let snap = T::lit(NODE_SNAP);
        for (&wi, &ni) in w.iter().zip(&tri) {
            if (wi - T::one()).abs() <= snap {
                let node = &self.nodes[ni];
                return Ok(InterpolatedParams { ar: node.ar, lsf: node.lsf, provenance: Provenance::Node(ni) });
            }
        }
        let mut lsf = [T::zero(); AR_ORDER];
        let mut variance = T::zero();
        for (&wi, &ni) in w.iter().zip(&tri) {
            let node = &self.nodes[ni];
            for (o, &l) in lsf.iter_mut().zip(node.lsf.0.iter()) {
                *o += wi * l;
            }
            variance += wi * node.ar.variance;
        }
        // rounding in the blend can leave a touching pair; the convex
        // combination is valid in exact arithmetic
        lpc::enforce_min_gap(&mut lsf, lpc::min_gap::<T>());
        let lsf = LsfVector(lsf);
        let ar = lpc::lsf_to_ar(&lsf, variance.max(T::zero()))?;
        let on_edge = w.iter().any(|wi| wi.abs() <= T::lit(EDGE_SNAP));
        let provenance = if on_edge { Provenance::Edge } else { Provenance::Interior };
        Ok(InterpolatedParams { ar, lsf, provenance })
    }

    /// Triangle containing normalized `(x, y)`, if any.
    pub fn locate(&self, x: T, y: T) -> Option<usize> {
        let tol = T::lit(-1e-12);
        let mut best: Option<(usize, T)> = None;
        for t in 0..self.triangles.len() {
            let w = self.barycentric(t, x, y);
            let m = w[0].min(w[1]).min(w[2]);
            if m >= tol && best.is_none_or(|(_, bm)| m > bm) {
                best = Some((t, m));
            }
        }
        best.map(|(t, _)| t)
    }

    /// Nearest point of the hull boundary to normalized `(x, y)`.
    pub fn nearest_hull_point(&self, x: T, y: T) -> (T, T) {
        let mut best = (T::infinity(), x, y);
        let h = self.hull.len();
        for i in 0..h {
            let a = &self.nodes[self.hull[i]];
            let b = &self.nodes[self.hull[(i + 1) % h]];
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > T::zero() {
                (((x - a.x) * dx + (y - a.y) * dy) / len2).max(T::zero()).min(T::one())
            } else {
                T::zero()
            };
            let (px, py) = (a.x + t * dx, a.y + t * dy);
            let d = (px - x) * (px - x) + (py - y) * (py - y);
            if d < best.0 {
                best = (d, px, py);
            }
        }
        (best.1, best.2)
    }

    /// Model at force `f` (N) and speed `v` (mm/s). Non-finite inputs are
    /// treated as 0 (NaN) or clamped to the hull (infinities).
    pub fn interpolate(&self, f: T, v: T) -> InterpolatedParams<T> {
        let clean = |z: T| if z.is_nan() { T::zero() } else { z.max(-T::max_value()).min(T::max_value()) };
        let (f, v) = (clean(f), clean(v));
        let (mut x, mut y) = self.normalize(f, v);
        if !x.is_finite() || !y.is_finite() {
            x = x.max(T::lit(-1e6)).min(T::lit(1e6));
            y = y.max(T::lit(-1e6)).min(T::lit(1e6));
        }
        let (t, clamped) = match self.locate(x, y) {
            Some(t) => (t, false),
            None => {
                (x, y) = self.nearest_hull_point(x, y);
                (self.locate(x, y).unwrap_or_else(|| self.closest_triangle(x, y)), true)
            }
        };
        let mut out = self
            .interpolate_in(t, x, y)
            .expect("convex LSF blend of valid nodes converts");
        if clamped && !matches!(out.provenance, Provenance::Node(_)) {
            out.provenance = Provenance::Clamped;
        }
        out
    }

    fn closest_triangle(&self, x: T, y: T) -> usize {
        (0..self.triangles.len())
            .max_by(|&a, &b| {
                let m = |t| {
                    let w = self.barycentric(t, x, y);
                    w[0].min(w[1]).min(w[2])
                };
                m(a).partial_cmp(&m(b)).unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0)
    }
}

/// Streaming AR synthesizer: `y[n] = sum a_k y[n-k] + e[n]`, `e ~ N(0, var)`.
#[derive(Debug, Clone)]
pub struct Synthesizer<T> {
    /// newest first
    history: [T; AR_ORDER],
    rng: ChaCha8Rng,
    seed: u64,
    pub sample_rate: f64,
}

impl<T: Scalar> Synthesizer<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            history: [T::zero(); AR_ORDER],
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            sample_rate: TAP_RATE_HZ,
        }
    }

    /// Clear history and restart the noise stream from the seed.
    pub fn reset(&mut self) {
        self.history = [T::zero(); AR_ORDER];
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    pub fn history(&self) -> &[T; AR_ORDER] {
        &self.history
    }

    /// Fill `out` with the next samples under `params`.
    pub fn synthesize_into(&mut self, params: &ArCoeffs<T>, out: &mut [T]) -> Result<(), SynthError> {
        if params.a.iter().any(|x| !x.is_finite()) || !params.variance.is_finite() {
            return Err(SynthError::NonFiniteInput("AR parameters"));
        }
        if params.variance < T::zero() {
            return Err(SynthError::NonFiniteInput("negative variance"));
        }
        let sd = params.variance.sqrt();
        for o in out.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut self.rng);
            let mut y = sd * T::lit(e);
            for (a, h) in params.a.iter().zip(self.history.iter()) {
                y += *a * *h;
            }
            self.history.copy_within(0..AR_ORDER - 1, 1);
            self.history[0] = y;
            *o = y;
        }
        Ok(())
    }

    pub fn synthesize(&mut self, params: &ArCoeffs<T>, n: usize) -> Result<Vec<T>, SynthError> {
        let mut out = vec![T::zero(); n];
        self.synthesize_into(params, &mut out)?;
        Ok(out)
    }
}

/// Tap transient at impact speed `v_tap` (mm/s) written into `out`
/// (`TAP_LEN` samples). Linear between recorded speeds, nearest trace scaled
/// by `v_tap / v_nearest` outside them.
pub fn render_tap_into<T: Scalar>(bank: &TapBank, v_tap: T, out: &mut [T]) {
    let traces = &bank.traces;
    let v = if v_tap.is_nan() { T::zero() } else { v_tap.max(T::zero()) };
    let n = out.len().min(TAP_LEN);
    let speed = |i: usize| T::lit(traces[i].impact_speed as f64);
    let sample = |i: usize, k: usize| T::lit(traces[i].samples[k] as f64);
    let last = traces.len() - 1;
    if v <= speed(0) || v >= speed(last) {
        let i = if v <= speed(0) { 0 } else { last };
        let s = v / speed(i);
        for (k, o) in out[..n].iter_mut().enumerate() {
            *o = if v == speed(i) { sample(i, k) } else { sample(i, k) * s };
        }
        return;
    }
    let hi = (1..=last).find(|&i| speed(i) >= v).unwrap_or(last);
    let lo = hi - 1;
    if v == speed(hi) {
        for (k, o) in out[..n].iter_mut().enumerate() {
            *o = sample(hi, k);
        }
        return;
    }
    let t = (v - speed(lo)) / (speed(hi) - speed(lo));
    for (k, o) in out[..n].iter_mut().enumerate() {
        let (a, b) = (sample(lo, k), sample(hi, k));
        *o = a + (b - a) * t;
    }
}

pub fn render_tap<T: Scalar>(bank: &TapBank, v_tap: T) -> [T; TAP_LEN] {
    let mut out = [T::zero(); TAP_LEN];
    render_tap_into(bank, v_tap, &mut out);
    out
}

fn wav_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: hound::SampleFormat::Float }
}

fn write_samples<W: std::io::Write + std::io::Seek, T: Scalar>(mut w: hound::WavWriter<W>, samples: &[T]) -> Result<(), SynthError> {
    for s in samples {
        w.write_sample(s.to_f32().unwrap_or(0.0))?;
    }
    w.finalize()?;
    Ok(())
}

/// Mono 32-bit float WAV.
pub fn write_wav<T: Scalar>(path: &Path, samples: &[T], sample_rate: u32) -> Result<(), SynthError> {
    write_samples(hound::WavWriter::create(path, wav_spec(sample_rate))?, samples)
}

/// Same bytes as [`write_wav`], in memory.
pub fn encode_wav<T: Scalar>(samples: &[T], sample_rate: u32) -> Result<Vec<u8>, SynthError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    write_samples(hound::WavWriter::new(&mut buf, wav_spec(sample_rate))?, samples)?;
    Ok(buf.into_inner())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32), SynthError> {
    let mut r = hound::WavReader::open(path)?;
    let rate = r.spec().sample_rate;
    let samples = r.samples::<f32>().collect::<Result<Vec<_>, _>>()?;
    Ok((samples, rate))
}
