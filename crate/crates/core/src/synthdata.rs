//! Deterministic synthetic weather: advecting Gaussian rain cells on a
//! periodic grid, pseudo-satellite channels derived from them, and a sparse
//! diagonal swath sampler.
//!
//! Every frame is a pure function of its parameters and step index, so
//! frames can be produced in any order or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{GeoGrid, Geometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub geometry: Geometry,
    pub cells: usize,
    /// Gaussian sigma range, pixels.
    pub radius_px: [f64; 2],
    /// Shared drift `[columns, rows]` per step; positive rows move south.
    pub velocity_px: [f64; 2],
    /// Half-width of the uniform per-cell perturbation of the drift.
    #[serde(default)]
    pub velocity_jitter_px: f64,
    /// Peak intensity range at birth, mm/hr.
    pub intensity_mm_hr: [f64; 2],
    /// Range of per-step log growth rates; negative values decay.
    pub growth_per_step: [f64; 2],
    /// Upper bound on the rendered rate, mm/hr.
    pub intensity_cap_mm_hr: f64,
    /// When set, each cell is replaced by a freshly drawn one after this
    /// many steps (staggered per cell).
    #[serde(default)]
    pub lifetime_steps: Option<u32>,
    pub seed: u64,
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::invalid(format!("{name} range {:?} is not ordered", r)));
    }
    Ok(())
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        Geometry::new(g.lat0, g.lon0, g.res, g.height, g.width)?;
        check_range("radius", self.radius_px)?;
        check_range("intensity", self.intensity_mm_hr)?;
        check_range("growth", self.growth_per_step)?;
        if !(self.radius_px[0] > 0.0) {
            return Err(Error::invalid("cell radius must be positive"));
        }
        if self.intensity_mm_hr[0] < 0.0 || !(self.intensity_cap_mm_hr > 0.0) {
            return Err(Error::invalid("intensities must be non-negative with a positive cap"));
        }
        if !(self.velocity_jitter_px >= 0.0) {
            return Err(Error::invalid("velocity jitter must be non-negative"));
        }
        let speed = self.velocity_px[0].hypot(self.velocity_px[1]) + self.velocity_jitter_px * 2f64.sqrt();
        if !(speed <= self.radius_px[0]) {
            return Err(Error::invalid(format!(
                "speed {speed:.3} px/step exceeds the smallest cell radius {}",
                self.radius_px[0]
            )));
        }
        if self.lifetime_steps == Some(0) {
            return Err(Error::invalid("lifetime must be at least one step"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ a) ^ b))
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Position split into an integer pixel and a fraction in `[0, 1)`, so that
/// integer displacements shift rendered fields exactly.
#[derive(Clone, Copy, Debug)]
struct Coord {
    whole: i64,
    frac: f64,
}

impl Coord {
    fn new(x: f64) -> Coord {
        let whole = x.floor();
        Coord { whole: whole as i64, frac: x - whole }
    }

    fn advance(self, v: f64, t: f64) -> Coord {
        let d = v * t;
        let dw = d.floor();
        let f = self.frac + (d - dw);
        let carry = f.floor();
        Coord { whole: self.whole + dw as i64 + carry as i64, frac: f - carry }
    }
}

struct Cell {
    x: Coord,
    y: Coord,
    vx: f64,
    vy: f64,
    sigma: f64,
    peak: f64,
    growth: f64,
    /// Steps since this cell was born.
    age: f64,
}

fn cell_at(p: &SceneParams, c: usize, t: u64) -> Cell {
    let (generation, age) = match p.lifetime_steps {
        Some(life) => {
            let life = life as u64;
            let stagger = stream(p.seed, c as u64, u64::MAX).gen_range(0..life);
            let k = t + stagger;
            (k / life, (k % life) as f64)
        }
        None => (0, t as f64),
    };
    let mut rng = stream(p.seed, c as u64, generation);
    let g = &p.geometry;
    let x0 = rng.gen_range(0.0..g.width as f64);
    let y0 = rng.gen_range(0.0..g.height as f64);
    let j = p.velocity_jitter_px;
    let (jx, jy) = if j > 0.0 { (rng.gen_range(-j..j), rng.gen_range(-j..j)) } else { (0.0, 0.0) };
    Cell {
        x: Coord::new(x0),
        y: Coord::new(y0),
        vx: p.velocity_px[0] + jx,
        vy: p.velocity_px[1] + jy,
        sigma: draw(&mut rng, p.radius_px),
        peak: draw(&mut rng, p.intensity_mm_hr),
        growth: draw(&mut rng, p.growth_per_step),
        age,
    }
}

/// Periodic offsets `k - frac` for `k` in `0..n`, wrapped to `[-n/2, n/2)`.
fn wrapped_offsets(n: usize, whole: i64, frac: f64) -> Vec<f64> {
    let half = n as f64 / 2.0;
    (0..n)
        .map(|i| {
            let k = (i as i64 - whole).rem_euclid(n as i64) as f64;
            let d = k - frac;
            if d >= half {
                d - n as f64
            } else if d < -half {
                d + n as f64
            } else {
                d
            }
        })
        .collect()
}

/// Truth rain rate (mm/hr) at step `t`.
pub fn scene_frame(p: &SceneParams, t: u64) -> Result<GeoGrid> {
    p.validate()?;
    let g = p.geometry;
    let mut out = vec![0f64; g.pixels()];
    for c in 0..p.cells {
        let cell = cell_at(p, c, t);
        let x = cell.x.advance(cell.vx, cell.age);
        let y = cell.y.advance(cell.vy, cell.age);
        let amp = (cell.peak * (cell.growth * cell.age).exp()).min(p.intensity_cap_mm_hr);
        let inv = -0.5 / (cell.sigma * cell.sigma);
        let fx: Vec<f64> = wrapped_offsets(g.width, x.whole, x.frac).iter().map(|d| (d * d * inv).exp()).collect();
        let fy: Vec<f64> = wrapped_offsets(g.height, y.whole, y.frac).iter().map(|d| (d * d * inv).exp()).collect();
        for (r, wy) in fy.iter().enumerate() {
            let row = &mut out[r * g.width..(r + 1) * g.width];
            for (v, wx) in row.iter_mut().zip(&fx) {
                *v += amp * wy * wx;
            }
        }
    }
    let cap = f32_at_most(p.intensity_cap_mm_hr);
    let data = out.iter().map(|&v| (v.max(0.0) as f32).min(cap)).collect();
    GeoGrid::from_parts(g, 1, data, vec![true; g.pixels()])
}

/// Largest `f32` not above `x` (for positive `x`).
fn f32_at_most(x: f64) -> f32 {
    let c = x as f32;
    if c as f64 > x {
        f32::from_bits(c.to_bits() - 1)
    } else {
        c
    }
}

/// Frames for steps `0..steps`.
pub fn generate_scene(p: &SceneParams, steps: usize) -> Result<Vec<GeoGrid>> {
    if steps == 0 {
        return Err(Error::invalid("scene needs at least one step"));
    }
    (0..steps as u64).map(|t| scene_frame(p, t)).collect()
}

/// Response of one pseudo-satellite channel to the rain rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transfer {
    Identity,
    /// `offset + gain * tanh(x / scale)`.
    Saturating { offset: f64, gain: f64, scale: f64 },
}

impl Transfer {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Transfer::Identity => x,
            Transfer::Saturating { offset, gain, scale } => offset + gain * (x / scale).tanh(),
        }
    }
}

/// A fixed family of saturating responses with distinct offsets, gains and
/// knee points.
pub fn default_transfers(k: usize) -> Vec<Transfer> {
    (0..k)
        .map(|c| {
            let c = c as f64;
            Transfer::Saturating {
                offset: 200.0 + 15.0 * c,
                gain: if c as usize % 2 == 0 { -40.0 } else { 25.0 + 5.0 * c },
                scale: 2.0 * 1.7f64.powf(c),
            }
        })
        .collect()
}

/// `k` pseudo-satellite channels from truth using [`default_transfers`].
pub fn observe_channels(truth: &GeoGrid, k: usize, noise_sigma: f64, seed: u64) -> Result<GeoGrid> {
    observe_channels_with(truth, &default_transfers(k), noise_sigma, seed)
}

/// One output channel per transfer, plus seeded Gaussian noise.
pub fn observe_channels_with(truth: &GeoGrid, transfers: &[Transfer], noise_sigma: f64, seed: u64) -> Result<GeoGrid> {
    if truth.channels() != 1 {
        return Err(Error::shape("truth must have one channel"));
    }
    if transfers.is_empty() {
        return Err(Error::invalid("at least one channel is required"));
    }
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else if noise_sigma == 0.0 {
        None
    } else {
        return Err(Error::invalid(format!("noise sigma {noise_sigma} is negative")));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = transfers.len();
    let mut data = Vec::with_capacity(truth.data().len() * k);
    for &x in truth.data() {
        for tr in transfers {
            let mut v = tr.apply(x as f64);
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            data.push(v as f32);
        }
    }
    let mut out = GeoGrid::from_parts(*truth.geometry(), k, data, truth.mask().to_vec())?;
    out.zero_invalid();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwathParams {
    pub width_px: usize,
    /// Angle between the band and the east-west axis; 90 is a vertical band.
    pub inclination_deg: f64,
    pub revisit_steps: u64,
    pub seed: u64,
}

impl SwathParams {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.revisit_steps == 0 {
            return Err(Error::invalid("swath width and revisit period must be at least 1"));
        }
        if !(self.inclination_deg > 0.0 && self.inclination_deg < 180.0) {
            return Err(Error::invalid(format!("inclination {} outside (0, 180)", self.inclination_deg)));
        }
        Ok(())
    }
}

/// Validity mask of the swath at step `t`.
pub fn swath_mask(geom: &Geometry, p: &SwathParams, t: u64) -> Result<Vec<bool>> {
    p.validate()?;
    let w = geom.width as i64;
    if p.width_px as i64 >= w {
        return Ok(vec![true; geom.pixels()]);
    }
    let phase = ChaCha8Rng::seed_from_u64(mix(p.seed)).gen_range(0..w);
    let step = t % p.revisit_steps;
    let pos = (step as i64 * w) / p.revisit_steps as i64 + phase;
    let cot = 1.0 / p.inclination_deg.to_radians().tan();
    let mut mask = Vec::with_capacity(geom.pixels());
    for i in 0..geom.height {
        let shift = (i as f64 * cot).floor() as i64;
        for j in 0..w {
            mask.push((j - shift - pos).rem_euclid(w) < p.width_px as i64);
        }
    }
    Ok(mask)
}

/// Truth restricted to the swath at step `t`; values outside are zero.
pub fn sample_swath(truth: &GeoGrid, p: &SwathParams, t: u64) -> Result<GeoGrid> {
    let band = swath_mask(truth.geometry(), p, t)?;
    let mut out = truth.clone();
    for (m, b) in out.mask_mut().iter_mut().zip(band) {
        *m &= b;
    }
    out.zero_invalid();
    Ok(out)
}
