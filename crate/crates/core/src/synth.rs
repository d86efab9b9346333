//! Synthetic anomalies: Gaussian random squares and Poisson-blended patch
//! transplantation.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample, Label, Mask, Rect};
use crate::rng::{derive_indexed, derive_seed, stream, StreamRng};

pub const DEFAULT_ANOMALIES_PER_IMAGE: usize = 5;
pub const MIN_PATCH_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMethod {
    Perturb,
    Nsa,
}

impl std::fmt::Display for SynthMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthMethod::Perturb => "perturb",
            SynthMethod::Nsa => "nsa",
        })
    }
}

impl std::str::FromStr for SynthMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perturb" => Ok(SynthMethod::Perturb),
            "nsa" => Ok(SynthMethod::Nsa),
            other => Err(Error::Config(format!("unknown synthesis method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbParams {
    /// Inclusive range for the number of squares per anomaly.
    pub num_regions: (usize, usize),
    /// Inclusive side range in pixels; `None` means 1/8 to 1/4 of the shorter side.
    pub region_side_range: Option<(usize, usize)>,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub anomalies_per_image: usize,
    pub seed: u64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self {
            num_regions: (1, 4),
            region_side_range: None,
            noise_mean: 0.5,
            noise_std: 0.3,
            anomalies_per_image: DEFAULT_ANOMALIES_PER_IMAGE,
            seed: 0,
        }
    }
}

impl PerturbParams {
    fn side_range(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let short = height.min(width);
        let (lo, hi) = self
            .region_side_range
            .unwrap_or(((short / 8).max(1), (short / 4).max(1)));
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!("invalid region side range ({lo}, {hi})")));
        }
        if hi > short {
            return Err(Error::Parameter(format!(
                "region side {hi} exceeds image {height}x{width}"
            )));
        }
        Ok((lo, hi))
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.num_regions;
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!("invalid region count range ({lo}, {hi})")));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if !self.noise_mean.is_finite() {
            return Err(Error::Parameter("noise_mean must be finite".into()));
        }
        if self.anomalies_per_image == 0 {
            return Err(Error::Parameter("anomalies_per_image must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsaParams {
    pub gamma_shape: f64,
    /// `None` means `min(H, W) / 16`, giving a mean side of about `H/8` at shape 2.
    pub gamma_scale: Option<f64>,
    pub patch_count_range: (usize, usize),
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    pub anomalies_per_image: usize,
    pub seed: u64,
}

impl Default for NsaParams {
    fn default() -> Self {
        Self {
            gamma_shape: 2.0,
            gamma_scale: None,
            patch_count_range: (1, 3),
            solver_tol: 1e-4,
            solver_max_iters: 10_000,
            anomalies_per_image: DEFAULT_ANOMALIES_PER_IMAGE,
            seed: 0,
        }
    }
}

impl NsaParams {
    fn validate(&self) -> Result<()> {
        if !(self.gamma_shape > 0.0 && self.gamma_shape.is_finite()) {
            return Err(Error::Parameter(format!(
                "gamma_shape must be positive, got {}",
                self.gamma_shape
            )));
        }
        if let Some(s) = self.gamma_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("gamma_scale must be positive, got {s}")));
            }
        }
        let (lo, hi) = self.patch_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::Parameter(format!("invalid patch count range ({lo}, {hi})")));
        }
        if self.solver_tol.is_nan() || self.solver_tol <= 0.0 {
            return Err(Error::Parameter("solver_tol must be positive".into()));
        }
        if self.solver_max_iters == 0 {
            return Err(Error::Parameter("solver_max_iters must be positive".into()));
        }
        if self.anomalies_per_image == 0 {
            return Err(Error::Parameter("anomalies_per_image must be at least 1".into()));
        }
        Ok(())
    }

    /// Inclusive clipping interval for sampled patch sides.
    pub fn side_bounds(height: usize, width: usize) -> Result<(usize, usize)> {
        let hi = height.min(width) / 2;
        if hi < MIN_PATCH_SIDE {
            return Err(Error::Parameter(format!(
                "image {height}x{width} too small for patches of side {MIN_PATCH_SIDE}"
            )));
        }
        Ok((MIN_PATCH_SIDE, hi))
    }

    /// Draws one patch side from the Gamma distribution, rounded and clipped.
    pub fn sample_side(&self, rng: &mut StreamRng, height: usize, width: usize) -> Result<usize> {
        let (lo, hi) = Self::side_bounds(height, width)?;
        let scale = self.gamma_scale.unwrap_or(height.min(width) as f64 / 16.0);
        let gamma =
            Gamma::new(self.gamma_shape, scale).map_err(|e| Error::Parameter(format!("gamma distribution: {e}")))?;
        let v: f64 = gamma.sample(rng);
        Ok((v.round() as usize).clamp(lo, hi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SynthParams {
    Perturb(PerturbParams),
    Nsa(NsaParams),
}

impl SynthParams {
    pub fn method(&self) -> SynthMethod {
        match self {
            SynthParams::Perturb(_) => SynthMethod::Perturb,
            SynthParams::Nsa(_) => SynthMethod::Nsa,
        }
    }

    pub fn anomalies_per_image(&self) -> usize {
        match self {
            SynthParams::Perturb(p) => p.anomalies_per_image,
            SynthParams::Nsa(p) => p.anomalies_per_image,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            SynthParams::Perturb(p) => p.seed,
            SynthParams::Nsa(p) => p.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            SynthParams::Perturb(p) => p.seed = seed,
            SynthParams::Nsa(p) => p.seed = seed,
        }
        self
    }
}

fn require_normal(sample: &ImageSample, what: &str) -> Result<()> {
    if sample.label != Label::Normal {
        return Err(Error::Input(format!("{what} {:?} is not normal", sample.source_id)));
    }
    Ok(())
}

fn synth_id(source_id: &str, method: SynthMethod, j: usize) -> String {
    format!("{source_id}#{method}{j}")
}

/// Replaces random squares with clipped Gaussian noise.
pub fn perturb(image: &ImageSample, params: &PerturbParams) -> Result<Vec<ImageSample>> {
    let mut rng = stream(derive_seed(params.seed, "perturb"));
    perturb_with(image, params, &mut rng)
}

fn perturb_with(image: &ImageSample, params: &PerturbParams, rng: &mut StreamRng) -> Result<Vec<ImageSample>> {
    require_normal(image, "perturbation input")?;
    params.validate()?;
    let (h, w) = image.image.dims();
    let (side_lo, side_hi) = params.side_range(h, w)?;
    let noise = Normal::new(params.noise_mean, params.noise_std)
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
    (0..params.anomalies_per_image)
        .map(|j| {
            let mut out = image.image.clone();
            let mut mask = Mask::empty(h, w);
            let count = rng.random_range(params.num_regions.0..=params.num_regions.1);
            for _ in 0..count {
                let side_h = rng.random_range(side_lo..=side_hi);
                let side_w = rng.random_range(side_lo..=side_hi);
                let rect = Rect {
                    y: rng.random_range(0..=h - side_h),
                    x: rng.random_range(0..=w - side_w),
                    height: side_h,
                    width: side_w,
                };
                for y in rect.y..rect.y + rect.height {
                    for x in rect.x..rect.x + rect.width {
                        for c in 0..3 {
                            let v: f64 = noise.sample(rng);
                            out.set(y, x, c, v.clamp(0.0, 1.0));
                        }
                    }
                }
                mask.fill_rect(rect);
            }
            ImageSample::synthesized(out, mask, synth_id(&image.source_id, SynthMethod::Perturb, j))
        })
        .collect()
}

/// Result of one Poisson solve: the unclipped field over `region`, channels
/// interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonField {
    pub region: Rect,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Everything needed to re-check one transplant after the fact.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendRecord {
    /// Destination image before this patch was applied.
    pub dest_before: Image,
    /// Top-left corner of the patch in the source image.
    pub source_origin: (usize, usize),
    pub field: PoissonField,
}

/// An NSA sample with the per-patch solve records.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendedSample {
    pub sample: ImageSample,
    pub records: Vec<BlendRecord>,
}

fn optimal_omega(height: usize, width: usize) -> f64 {
    let rho = ((std::f64::consts::PI / (height as f64 + 1.0)).cos()
        + (std::f64::consts::PI / (width as f64 + 1.0)).cos())
        / 2.0;
    2.0 / (1.0 + (1.0 - rho * rho).sqrt())
}

/// Solves the discrete Poisson equation on `region` of `dest` with guidance
/// gradients taken from the same-sized patch of `source` at `source_origin`.
///
/// Both the region and the source patch need a one-pixel margin inside their
/// images, since the stencil reads every 4-neighbour.
pub fn poisson_blend(
    dest: &Image,
    source: &Image,
    source_origin: (usize, usize),
    region: Rect,
    tol: f64,
    max_iters: usize,
) -> Result<PoissonField> {
    let (h, w) = dest.dims();
    if source.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "source {:?} vs destination {:?}",
            source.dims(),
            dest.dims()
        )));
    }
    let fits = |y: usize, x: usize| {
        region.height > 0 && region.width > 0 && y >= 1 && x >= 1 && y + region.height < h && x + region.width < w
    };
    if !fits(region.y, region.x) || !fits(source_origin.0, source_origin.1) {
        return Err(Error::Parameter(format!(
            "patch {region:?} from {source_origin:?} lacks a one-pixel margin in {h}x{w}"
        )));
    }
    let (ph, pw) = (region.height, region.width);
    let (sy, sx) = source_origin;
    let at = |i: usize, j: usize, c: usize| (i * pw + j) * 3 + c;

    // Right-hand side: destination boundary values plus guidance divergence.
    let mut rhs = vec![0.0; ph * pw * 3];
    let mut u = vec![0.0; ph * pw * 3];
    const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    for i in 0..ph {
        for j in 0..pw {
            for c in 0..3 {
                let s_p = source.get(sy + i, sx + j, c);
                let mut b = 0.0;
                for (di, dj) in NEIGHBOURS {
                    let (qi, qj) = (i as isize + di, j as isize + dj);
                    let sq = source.get((sy as isize + qi) as usize, (sx as isize + qj) as usize, c);
                    b += s_p - sq;
                    if qi < 0 || qj < 0 || qi >= ph as isize || qj >= pw as isize {
                        b += dest.get((region.y as isize + qi) as usize, (region.x as isize + qj) as usize, c);
                    }
                }
                rhs[at(i, j, c)] = b;
                u[at(i, j, c)] = s_p;
            }
        }
    }

    let inner_sum = |u: &[f64], i: usize, j: usize, c: usize| {
        let mut s = 0.0;
        if i > 0 {
            s += u[at(i - 1, j, c)];
        }
        if i + 1 < ph {
            s += u[at(i + 1, j, c)];
        }
        if j > 0 {
            s += u[at(i, j - 1, c)];
        }
        if j + 1 < pw {
            s += u[at(i, j + 1, c)];
        }
        s
    };
    let residual = |u: &[f64]| {
        let mut r = 0.0f64;
        for i in 0..ph {
            for j in 0..pw {
                for c in 0..3 {
                    let v = 4.0 * u[at(i, j, c)] - inner_sum(u, i, j, c) - rhs[at(i, j, c)];
                    r = r.max(v.abs());
                }
            }
        }
        r
    };

    let omega = optimal_omega(ph, pw);
    let mut res = residual(&u);
    let mut iterations = 0;
    while res > tol {
        if iterations == max_iters {
            return Err(Error::Convergence {
                iterations,
                residual: res,
                tolerance: tol,
            });
        }
        for colour in 0..2 {
            for i in 0..ph {
                for j in ((i + colour) % 2..pw).step_by(2) {
                    for c in 0..3 {
                        let k = at(i, j, c);
                        let gs = (inner_sum(&u, i, j, c) + rhs[k]) / 4.0;
                        u[k] += omega * (gs - u[k]);
                    }
                }
            }
        }
        iterations += 1;
        res = residual(&u);
    }
    Ok(PoissonField {
        region,
        values: u,
        iterations,
        residual: res,
    })
}

/// Random location for a patch of the given size, keeping a one-pixel margin.
fn random_origin(rng: &mut StreamRng, h: usize, w: usize, ph: usize, pw: usize) -> (usize, usize) {
    (rng.random_range(1..=h - ph - 1), rng.random_range(1..=w - pw - 1))
}

fn nsa_one(
    dest: &Image,
    source: &Image,
    params: &NsaParams,
    rng: &mut StreamRng,
) -> Result<(Image, Mask, Vec<BlendRecord>)> {
    let (h, w) = dest.dims();
    let mut out = dest.clone();
    let mut mask = Mask::empty(h, w);
    let mut records = Vec::new();
    let count = rng.random_range(params.patch_count_range.0..=params.patch_count_range.1);
    for _ in 0..count {
        let ph = params.sample_side(rng, h, w)?;
        let pw = params.sample_side(rng, h, w)?;
        let src = random_origin(rng, h, w, ph, pw);
        // A patch landing where it came from would be a no-op for self-transplants.
        let single_position = h - ph - 1 == 1 && w - pw - 1 == 1;
        let mut dst = random_origin(rng, h, w, ph, pw);
        while dst == src && !single_position {
            dst = random_origin(rng, h, w, ph, pw);
        }
        let region = Rect {
            y: dst.0,
            x: dst.1,
            height: ph,
            width: pw,
        };
        let field = poisson_blend(&out, source, src, region, params.solver_tol, params.solver_max_iters)?;
        let before = out.clone();
        for i in 0..ph {
            for j in 0..pw {
                for c in 0..3 {
                    let v = field.values[(i * pw + j) * 3 + c];
                    out.set(region.y + i, region.x + j, c, v.clamp(0.0, 1.0));
                }
            }
        }
        mask.fill_rect(region);
        records.push(BlendRecord {
            dest_before: before,
            source_origin: src,
            field,
        });
    }
    Ok((out, mask, records))
}

/// Transplants Gamma-sized patches of `source` into `dest` by Poisson editing.
pub fn nsa_blend(dest: &ImageSample, source: &ImageSample, params: &NsaParams) -> Result<Vec<ImageSample>> {
    Ok(nsa_blend_detailed(dest, source, params)?
        .into_iter()
        .map(|b| b.sample)
        .collect())
}

/// Like [`nsa_blend`], also returning the solve records of every patch.
pub fn nsa_blend_detailed(dest: &ImageSample, source: &ImageSample, params: &NsaParams) -> Result<Vec<BlendedSample>> {
    let mut rng = stream(derive_seed(params.seed, "nsa"));
    nsa_blend_with(dest, source, params, &mut rng)
}

fn nsa_blend_with(
    dest: &ImageSample,
    source: &ImageSample,
    params: &NsaParams,
    rng: &mut StreamRng,
) -> Result<Vec<BlendedSample>> {
    require_normal(dest, "blend destination")?;
    params.validate()?;
    if dest.image.dims() != source.image.dims() {
        return Err(Error::Shape(format!(
            "source {:?} vs destination {:?}",
            source.image.dims(),
            dest.image.dims()
        )));
    }
    (0..params.anomalies_per_image)
        .map(|j| {
            let (image, mask, records) = nsa_one(&dest.image, &source.image, params, rng)?;
            Ok(BlendedSample {
                sample: ImageSample::synthesized(image, mask, synth_id(&dest.source_id, SynthMethod::Nsa, j))?,
                records,
            })
        })
        .collect()
}

/// NSA negatives for a whole support set, with the donor index of each record.
pub fn build_nsa_detailed(train_set: &[ImageSample], params: &NsaParams) -> Result<Vec<(usize, BlendedSample)>> {
    if train_set.is_empty() {
        return Err(Error::Input("cannot synthesize from an empty training set".into()));
    }
    for s in train_set {
        require_normal(s, "training image")?;
    }
    let root = derive_seed(params.seed, "nsa");
    let per_image: Vec<Vec<(usize, BlendedSample)>> = train_set
        .par_iter()
        .enumerate()
        .map(|(i, dest)| {
            let mut rng = stream(derive_indexed(root, i as u64));
            let donor = if train_set.len() > 1 {
                let d = rng.random_range(0..train_set.len() - 1);
                if d >= i {
                    d + 1
                } else {
                    d
                }
            } else {
                i
            };
            let out = nsa_blend_with(dest, &train_set[donor], params, &mut rng)?;
            Ok(out.into_iter().map(|b| (donor, b)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Synthesizes `anomalies_per_image` abnormal samples for every normal image.
pub fn build_negatives(train_set: &[ImageSample], params: &SynthParams) -> Result<Vec<ImageSample>> {
    if train_set.is_empty() {
        return Err(Error::Input("cannot synthesize from an empty training set".into()));
    }
    match params {
        SynthParams::Nsa(p) => Ok(build_nsa_detailed(train_set, p)?
            .into_iter()
            .map(|(_, b)| b.sample)
            .collect()),
        SynthParams::Perturb(p) => {
            for s in train_set {
                require_normal(s, "training image")?;
            }
            let root = derive_seed(p.seed, "perturb");
            let per_image: Vec<Vec<ImageSample>> = train_set
                .par_iter()
                .enumerate()
                .map(|(i, s)| perturb_with(s, p, &mut stream(derive_indexed(root, i as u64))))
                .collect::<Result<_>>()?;
            Ok(per_image.into_iter().flatten().collect())
        }
    }
}
