//! Patient sequences, synthetic valve phantoms, resampling, and dataset I/O.
//!
//! A phantom patient is a cycle of 3D volumes showing two curved leaflet
//! sheets hinged at an annulus line, swinging open and closed. The continuous
//! shape at every phase is a rigid motion of the same sheet, so ground-truth
//! surface area and volume are conserved across the cycle up to rasterization
//! noise — the property the topology regularizer assumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Dense row-major 3D grid, indexed (z, y, x) over shape [D, H, W].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(shape[0] * shape[1] * shape[2], data.len(), "grid shape/data mismatch");
        Grid3 { shape, data }
    }

    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Grid3 {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.idx(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.idx(z, y, x);
        self.data[i] = v;
    }
}

/// One 3D volume of a patient's cycle. `label` carries ground truth when
/// available (phantoms have it at every phase); `is_labeled` marks the phases
/// whose labels training is allowed to read. `is_labeled` implies a label is
/// present; the converse does not hold — evaluation-only ground truth stays
/// invisible to the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolume {
    pub intensities: Grid3<f32>,
    pub spacing: f64,
    pub phase_index: usize,
    pub label: Option<Grid3<u8>>,
    pub is_labeled: bool,
}

impl PhaseVolume {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) {
            return Err(Error::config(format!(
                "phase {}: spacing must be > 0, got {}",
                self.phase_index, self.spacing
            )));
        }
        if let Some(label) = &self.label {
            if label.shape() != self.intensities.shape() {
                return Err(Error::shape(format!(
                    "phase {}: label shape {:?} != intensity shape {:?}",
                    self.phase_index,
                    label.shape(),
                    self.intensities.shape()
                )));
            }
            if let Some(v) = label.data().iter().find(|&&v| v > 1) {
                return Err(Error::config(format!(
                    "phase {}: label contains value {} outside {{0,1}}",
                    self.phase_index, v
                )));
            }
        } else if self.is_labeled {
            return Err(Error::config(format!(
                "phase {} marked labeled but carries no label",
                self.phase_index
            )));
        }
        Ok(())
    }

    /// Intensities as a [1, D, H, W] f64 tensor (network input layout).
    pub fn intensity_tensor(&self) -> Tensor {
        let [d, h, w] = self.intensities.shape();
        Tensor::new(
            vec![1, d, h, w],
            self.intensities.data().iter().map(|&v| v as f64).collect(),
        )
    }

    /// Label as a [D, H, W] 0/1 f64 tensor, when present.
    pub fn label_tensor(&self) -> Option<Tensor> {
        self.label.as_ref().map(|l| {
            let [d, h, w] = l.shape();
            Tensor::new(vec![d, h, w], l.data().iter().map(|&v| v as f64).collect())
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSequence {
    pub patient_id: String,
    pub phases: Vec<PhaseVolume>,
    /// (t_closed, t_open): the two annotated extremal-opening phases.
    pub labeled_indices: (usize, usize),
}

impl PatientSequence {
    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.phases.len())
            .filter(|&t| t != self.labeled_indices.0 && t != self.labeled_indices.1)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phases.len();
        if n < 3 {
            return Err(Error::config(format!(
                "patient {}: needs at least 3 phases, got {n}",
                self.patient_id
            )));
        }
        let (a, b) = self.labeled_indices;
        if a == b || a >= n || b >= n {
            return Err(Error::config(format!(
                "patient {}: labeled indices ({a}, {b}) must be distinct and < {n}",
                self.patient_id
            )));
        }
        let shape = self.phases[0].intensities.shape();
        let spacing = self.phases[0].spacing;
        for (t, phase) in self.phases.iter().enumerate() {
            if phase.phase_index != t {
                return Err(Error::config(format!(
                    "patient {}: phase at position {t} has index {}",
                    self.patient_id, phase.phase_index
                )));
            }
            if phase.intensities.shape() != shape {
                return Err(Error::shape(format!(
                    "patient {}: phase {t} shape {:?} != phase 0 shape {:?}",
                    self.patient_id,
                    phase.intensities.shape(),
                    shape
                )));
            }
            if (phase.spacing - spacing).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "patient {}: phase {t} spacing {} != phase 0 spacing {}",
                    self.patient_id, phase.spacing, spacing
                )));
            }
            let expect_labeled = t == a || t == b;
            if phase.is_labeled != expect_labeled {
                return Err(Error::config(format!(
                    "patient {}: phase {t} is_labeled={} but labeled_indices are ({a}, {b})",
                    self.patient_id, phase.is_labeled
                )));
            }
            phase.validate()?;
        }
        Ok(())
    }
}

/// One training sample: a labeled anchor phase plus two unlabeled phases of
/// the same patient, stored in ascending phase order.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub labeled: PhaseVolume,
    pub unlabeled_1: PhaseVolume,
    pub unlabeled_2: PhaseVolume,
    pub patient_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub grid_size: usize,
    pub n_phases: usize,
    pub n_patients: usize,
    pub seed: u64,
    /// Peak leaflet-tip excursion as a fraction of grid size.
    pub deformation_amplitude: f64,
    /// Standard deviation of the speckle-like noise (0 = clean).
    pub noise_level: f64,
    /// Relative bound on ground-truth volume drift across phases.
    pub target_volume_tolerance: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            grid_size: 32,
            n_phases: 8,
            n_patients: 1,
            seed: 0,
            deformation_amplitude: 0.25,
            noise_level: 0.1,
            target_volume_tolerance: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 8 {
            return Err(Error::config(format!("grid_size must be >= 8, got {}", self.grid_size)));
        }
        if self.n_phases < 3 {
            return Err(Error::config(format!("n_phases must be >= 3, got {}", self.n_phases)));
        }
        if self.n_patients == 0 {
            return Err(Error::config("n_patients must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.deformation_amplitude) {
            return Err(Error::config(format!(
                "deformation_amplitude must be in [0, 0.5), got {}",
                self.deformation_amplitude
            )));
        }
        if self.noise_level < 0.0 {
            return Err(Error::config("noise_level must be >= 0"));
        }
        if !(self.target_volume_tolerance > 0.0 && self.target_volume_tolerance <= 0.2) {
            return Err(Error::config(format!(
                "target_volume_tolerance must be in (0, 0.2], got {}",
                self.target_volume_tolerance
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream derived from a base seed and a purpose salt, so
/// adding a consumer never perturbs the draws of existing ones.
pub fn derived_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(salt)))
}

/// Per-patient leaflet geometry in voxel units (grid edge = `g`).
struct LeafletGeometry {
    g: f64,
    hinge_half_span: f64, // annulus half-width a: hinges at x = g/2 ± a
    hinge_z: f64,
    half_width: f64, // sheet half-extent in y at the hinge
    length: f64,     // sheet length from hinge toward the center
    thickness: f64,
    curvature: f64, // bow sag: sag(xi, up) = curvature * (xi^2 + up^2/2) / length
    theta_min: f64,
    theta_max: f64,
    warp: f64,        // time-warp exponent of the opening profile
    offset: [f64; 3], // sub-voxel rigid shift decorrelating grid alignment
}

impl LeafletGeometry {
    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = cfg.grid_size as f64;
        let jitter = |rng: &mut ChaCha8Rng, rel: f64| 1.0 + rng.gen_range(-rel..rel);
        let hinge_half_span = 0.28 * g * jitter(rng, 0.05);
        let hinge_z = 0.34 * g * jitter(rng, 0.03);
        let half_width = 0.30 * g * jitter(rng, 0.05);
        let curvature = 0.18 * jitter(rng, 0.2);
        let theta_min = (8f64).to_radians() * jitter(rng, 0.2);
        let span = (cfg.deformation_amplitude * g / (0.34 * g).max(1.0)) * jitter(rng, 0.05);
        let theta_max = (theta_min + span).min((80f64).to_radians());
        // Tip reach along x is at most sqrt(length^2 + curvature^2 * (length +
        // half_width^2 / (2 length))^2) over all angles; cap it at the hinge
        // half-span so the two leaflets never cross the midline and their
        // union volume stays phase-independent. Solved by fixed point.
        let mut length = hinge_half_span;
        for _ in 0..20 {
            let sag_tip = curvature * (length + 0.5 * half_width * half_width / length);
            length = hinge_half_span * length / (length * length + sag_tip * sag_tip).sqrt();
        }
        let warp = rng.gen_range(0.60..0.85);
        let offset = [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ];
        LeafletGeometry {
            g,
            hinge_half_span,
            hinge_z,
            half_width,
            length,
            thickness: (0.075 * g).max(2.4),
            curvature,
            theta_min,
            theta_max,
            warp,
            offset,
        }
    }

    /// Opening fraction in [0,1] at integer phase t of an n-phase cycle.
    /// Time-warped so the peak falls strictly between the sampled extremes.
    fn opening(&self, t: usize, n_phases: usize) -> f64 {
        let s = (t as f64 / n_phases as f64).powf(self.warp);
        (std::f64::consts::PI * s).sin().powi(2)
    }

    fn theta(&self, t: usize, n_phases: usize) -> f64 {
        self.theta_min + (self.theta_max - self.theta_min) * self.opening(t, n_phases)
    }

    /// Membership test for a point (x, y, z) in voxel coordinates at leaflet
    /// angle theta. The sheet hangs from each hinge toward the midline,
    /// rotated downward by theta about the hinge line (parallel to y). It is
    /// bowed along both in-plane directions so no face is ever voxel-aligned,
    /// which keeps the rasterized volume stable across rotation angles.
    fn contains(&self, x: f64, y: f64, z: f64, theta: f64, thickness_scale: f64) -> bool {
        let c = self.g / 2.0;
        let (sin_t, cos_t) = theta.sin_cos();
        let x = x - self.offset[0];
        let y = y - self.offset[1];
        let z = z - self.offset[2];
        // fold both leaflets onto the left one via mirror symmetry in x
        let dx0 = (x - c).abs();
        let dx = self.hinge_half_span - dx0; // distance from hinge toward midline
        let dz = z - self.hinge_z;
        // local frame: xi along the rotated sheet, nu across its thickness
        let xi = dx * cos_t + dz * sin_t;
        if !(0.0..=self.length).contains(&xi) {
            return false;
        }
        let half_w = self.half_width * (1.0 - 0.35 * (xi / self.length).powi(2));
        let up = y - c;
        if up.abs() > half_w {
            return false;
        }
        let nu = -dx * sin_t + dz * cos_t;
        let sag = self.curvature * (xi * xi + 0.5 * up * up) / self.length;
        (nu - sag).abs() <= thickness_scale * self.thickness / 2.0
    }

    /// Supersampled occupancy mask at angle theta (4x4x4 samples per voxel).
    fn rasterize(&self, grid_size: usize, theta: f64, thickness_scale: f64) -> Grid3<u8> {
        let mut mask = Grid3::filled([grid_size; 3], 0u8);
        let sub = 4usize;
        let offsets: Vec<f64> = (0..sub).map(|i| (i as f64 + 0.5) / sub as f64).collect();
        let needed = (sub * sub * sub).div_ceil(2);
        for z in 0..grid_size {
            for y in 0..grid_size {
                for x in 0..grid_size {
                    let mut hits = 0usize;
                    'sampling: for oz in &offsets {
                        for oy in &offsets {
                            for ox in &offsets {
                                if self.contains(
                                    x as f64 + ox,
                                    y as f64 + oy,
                                    z as f64 + oz,
                                    theta,
                                    thickness_scale,
                                ) {
                                    hits += 1;
                                    if hits >= needed {
                                        break 'sampling;
                                    }
                                }
                            }
                        }
                    }
                    if hits >= needed {
                        mask.set(z, y, x, 1);
                    }
                }
            }
        }
        mask
    }
}

/// Separable [1,2,1]/4 blur along each axis with zero padding.
fn blur_121(mask: &Grid3<u8>) -> Grid3<f32> {
    let [d, h, w] = mask.shape();
    let mut cur: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let mut next = vec![0.0f64; cur.len()];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for axis in 0..3 {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let at = |dz: i64, dy: i64, dx: i64| -> f64 {
                        let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if zz < 0 || yy < 0 || xx < 0 || zz >= d as i64 || yy >= h as i64 || xx >= w as i64 {
                            0.0
                        } else {
                            cur[idx(zz as usize, yy as usize, xx as usize)]
                        }
                    };
                    let v = match axis {
                        0 => at(-1, 0, 0) + 2.0 * at(0, 0, 0) + at(1, 0, 0),
                        1 => at(0, -1, 0) + 2.0 * at(0, 0, 0) + at(0, 1, 0),
                        _ => at(0, 0, -1) + 2.0 * at(0, 0, 0) + at(0, 0, 1),
                    };
                    next[idx(z, y, x)] = v / 4.0;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Grid3::new(mask.shape(), cur.iter().map(|&v| v as f32).collect())
}

/// Generate `n_patients` deterministic synthetic valve cycles.
///
/// Every phase carries a ground-truth mask; only the two extremal-opening
/// phases are marked `is_labeled`. Intensities are the blurred mask with
/// multiplicative and additive noise at `noise_level` (exactly the blurred
/// mask when `noise_level == 0`).
pub fn generate_phantom(config: &PhantomConfig) -> Result<Vec<PatientSequence>> {
    config.validate()?;
    let spacing = 1.0;
    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let mut geom_rng = derived_rng(config.seed, 0x67656F6D ^ (p as u64).wrapping_mul(7919));
        let geom = LeafletGeometry::sample(config, &mut geom_rng);

        let openings: Vec<f64> = (0..config.n_phases)
            .map(|t| geom.opening(t, config.n_phases))
            .collect();
        let argmin = openings
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let argmax = openings
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        debug_assert_ne!(argmin, argmax);

        // Rasterization of a thin shell quantizes differently at different
        // angles; a small per-phase thickness correction pins every phase's
        // voxel volume to the reference phase within the configured tolerance
        // (volume is near-linear in thickness, surface area is not affected).
        let reference = geom.rasterize(config.grid_size, geom.theta(0, config.n_phases), 1.0);
        let v0 = reference.data().iter().filter(|&&v| v == 1).count() as f64;
        let rasterize_conserving = |theta: f64| -> Grid3<u8> {
            let mut scale = 1.0f64;
            let mut best: Option<(f64, Grid3<u8>)> = None;
            for _ in 0..6 {
                let mask = geom.rasterize(config.grid_size, theta, scale);
                let v = mask.data().iter().filter(|&&v| v == 1).count() as f64;
                let drift = (v - v0).abs() / v0;
                if best.as_ref().is_none_or(|(d, _)| drift < *d) {
                    best = Some((drift, mask));
                }
                if drift <= 0.5 * config.target_volume_tolerance {
                    break;
                }
                scale = (scale * (1.0 + (v0 - v) / v0)).clamp(0.7, 1.3);
            }
            best.unwrap().1
        };

        let mut phases = Vec::with_capacity(config.n_phases);
        for t in 0..config.n_phases {
            let mask = if t == 0 {
                reference.clone()
            } else {
                rasterize_conserving(geom.theta(t, config.n_phases))
            };
            let blurred = blur_121(&mask);
            let mut noise_rng = derived_rng(
                config.seed,
                0x6E6F6973 ^ ((p * 10_000 + t) as u64).wrapping_mul(104_729),
            );
            let mut intensities = blurred.clone();
            if config.noise_level > 0.0 {
                for v in intensities.data_mut() {
                    let speckle: f64 = noise_rng.sample(StandardNormal);
                    let floor: f64 = noise_rng.sample(StandardNormal);
                    let noisy = *v as f64 * (1.0 + config.noise_level * speckle)
                        + 0.5 * config.noise_level * floor;
                    *v = noisy.clamp(0.0, 1.0) as f32;
                }
            }
            phases.push(PhaseVolume {
                intensities,
                spacing,
                phase_index: t,
                label: Some(mask),
                is_labeled: t == argmin || t == argmax,
            });
        }
        let seq = PatientSequence {
            patient_id: format!("patient_{p:03}"),
            phases,
            labeled_indices: (argmin, argmax),
        };
        seq.validate()?;
        patients.push(seq);
    }
    Ok(patients)
}

/// Trilinear (intensities) / nearest-neighbor (labels) resampling to
/// `target_shape`, preserving the physical extent per axis. Errors when the
/// per-axis scale factors disagree, since spacing is a single scalar.
pub fn resample(volume: &PhaseVolume, target_shape: [usize; 3]) -> Result<PhaseVolume> {
    if target_shape.iter().any(|&s| s < 2) {
        return Err(Error::config(format!(
            "resample target {target_shape:?} degenerate: every dim must be >= 2"
        )));
    }
    let src_shape = volume.intensities.shape();
    let ratios: Vec<f64> = (0..3)
        .map(|i| src_shape[i] as f64 / target_shape[i] as f64)
        .collect();
    for i in 1..3 {
        if (ratios[i] - ratios[0]).abs() > 1e-6 * ratios[0].abs() {
            return Err(Error::config(format!(
                "resample from {src_shape:?} to {target_shape:?} is anisotropic (scale {} vs {}); \
                 spacing is isotropic",
                ratios[0], ratios[i]
            )));
        }
    }
    let scale = ratios[0];
    let [sd, sh, sw] = src_shape;
    let [td, th, tw] = target_shape;
    // half-pixel convention: target center i maps to (i + 0.5) * scale - 0.5
    let src_coord = |i: usize, ratio: f64, src_len: usize| -> f64 {
        ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, src_len as f64 - 1.0)
    };

    let mut out = Grid3::filled(target_shape, 0.0f32);
    for z in 0..td {
        let fz = src_coord(z, ratios[0], sd);
        let (z0, wz) = (fz.floor() as usize, fz.fract());
        let z1 = (z0 + 1).min(sd - 1);
        for y in 0..th {
            let fy = src_coord(y, ratios[1], sh);
            let (y0, wy) = (fy.floor() as usize, fy.fract());
            let y1 = (y0 + 1).min(sh - 1);
            for x in 0..tw {
                let fx = src_coord(x, ratios[2], sw);
                let (x0, wx) = (fx.floor() as usize, fx.fract());
                let x1 = (x0 + 1).min(sw - 1);
                let s = &volume.intensities;
                let c00 = s.get(z0, y0, x0) as f64 * (1.0 - wx) + s.get(z0, y0, x1) as f64 * wx;
                let c01 = s.get(z0, y1, x0) as f64 * (1.0 - wx) + s.get(z0, y1, x1) as f64 * wx;
                let c10 = s.get(z1, y0, x0) as f64 * (1.0 - wx) + s.get(z1, y0, x1) as f64 * wx;
                let c11 = s.get(z1, y1, x0) as f64 * (1.0 - wx) + s.get(z1, y1, x1) as f64 * wx;
                let c0 = c00 * (1.0 - wy) + c01 * wy;
                let c1 = c10 * (1.0 - wy) + c11 * wy;
                out.set(z, y, x, (c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }

    let label = volume.label.as_ref().map(|l| {
        let mut lo = Grid3::filled(target_shape, 0u8);
        for z in 0..td {
            let zz = src_coord(z, ratios[0], sd).round() as usize;
            for y in 0..th {
                let yy = src_coord(y, ratios[1], sh).round() as usize;
                for x in 0..tw {
                    let xx = src_coord(x, ratios[2], sw).round() as usize;
                    lo.set(z, y, x, l.get(zz.min(sd - 1), yy.min(sh - 1), xx.min(sw - 1)));
                }
            }
        }
        lo
    });

    Ok(PhaseVolume {
        intensities: out,
        spacing: volume.spacing * scale,
        phase_index: volume.phase_index,
        label,
        is_labeled: volume.is_labeled,
    })
}

/// Draw one training triplet: the labeled member uniformly from the two
/// anchors, the unlabeled members uniformly without replacement, returned in
/// ascending phase order.
pub fn sample_triplet(sequence: &PatientSequence, rng: &mut ChaCha8Rng) -> Result<Triplet> {
    let unlabeled = sequence.unlabeled_indices();
    if unlabeled.len() < 2 {
        return Err(Error::config(format!(
            "patient {}: triplet sampling needs >= 2 unlabeled phases, found {}",
            sequence.patient_id,
            unlabeled.len()
        )));
    }
    let (a, b) = sequence.labeled_indices;
    let labeled_idx = if rng.gen_range(0..2u32) == 0 { a } else { b };
    let i = rng.gen_range(0..unlabeled.len());
    let mut j = rng.gen_range(0..unlabeled.len() - 1);
    if j >= i {
        j += 1;
    }
    let (u1, u2) = (unlabeled[i.min(j)], unlabeled[i.max(j)]);
    Ok(Triplet {
        labeled: sequence.phases[labeled_idx].clone(),
        unlabeled_1: sequence.phases[u1].clone(),
        unlabeled_2: sequence.phases[u2].clone(),
        patient_id: sequence.patient_id.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    patient_id: String,
    n_phases: usize,
    spacing_mm: f64,
    shape: [usize; 3],
    labeled_indices: [usize; 2],
    dtype: String,
    byte_order: String,
}

const META_DTYPE: &str = "float32/uint8";
const META_BYTE_ORDER: &str = "little";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Write a sequence as `meta.json` + per-phase raw little-endian arrays.
pub fn save_sequence(sequence: &PatientSequence, directory: &Path) -> Result<()> {
    sequence.validate()?;
    std::fs::create_dir_all(directory)?;
    let shape = sequence.phases[0].intensities.shape();
    let meta = SequenceMeta {
        patient_id: sequence.patient_id.clone(),
        n_phases: sequence.phases.len(),
        spacing_mm: sequence.phases[0].spacing,
        shape,
        labeled_indices: [sequence.labeled_indices.0, sequence.labeled_indices.1],
        dtype: META_DTYPE.to_string(),
        byte_order: META_BYTE_ORDER.to_string(),
    };
    let meta_path = directory.join("meta.json");
    let file = std::fs::File::create(&meta_path)?;
    serde_json::to_writer_pretty(file, &meta)?;

    for phase in &sequence.phases {
        let t = phase.phase_index;
        let mut buf = Vec::with_capacity(phase.intensities.numel() * 4);
        for &v in phase.intensities.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(directory.join(format!("phase_{t}.raw")))?;
        f.write_all(&buf)?;
        if let Some(label) = &phase.label {
            let mut f = std::fs::File::create(directory.join(format!("label_{t}.raw")))?;
            f.write_all(label.data())?;
        }
    }
    Ok(())
}

/// Load a sequence saved by [`save_sequence`]. Labels are read for every
/// phase that has a `label_<t>.raw` file; they are required at the labeled
/// indices. Malformed files are reported by name.
pub fn load_sequence(directory: &Path) -> Result<PatientSequence> {
    let meta_path = directory.join("meta.json");
    if !meta_path.exists() {
        return Err(format_err(&meta_path, "metadata file not found"));
    }
    let meta_text = std::fs::read_to_string(&meta_path)?;
    let meta: SequenceMeta = serde_json::from_str(&meta_text)
        .map_err(|e| format_err(&meta_path, format!("invalid metadata: {e}")))?;
    if meta.dtype != META_DTYPE {
        return Err(format_err(
            &meta_path,
            format!("unsupported dtype {:?}, expected {:?}", meta.dtype, META_DTYPE),
        ));
    }
    if meta.byte_order != META_BYTE_ORDER {
        return Err(format_err(
            &meta_path,
            format!("unsupported byte order {:?}", meta.byte_order),
        ));
    }
    if meta.n_phases < 3 {
        return Err(format_err(&meta_path, format!("n_phases {} < 3", meta.n_phases)));
    }
    let numel = meta.shape[0] * meta.shape[1] * meta.shape[2];
    let labeled = (meta.labeled_indices[0], meta.labeled_indices[1]);

    let mut phases = Vec::with_capacity(meta.n_phases);
    for t in 0..meta.n_phases {
        let ipath = directory.join(format!("phase_{t}.raw"));
        if !ipath.exists() {
            return Err(format_err(&ipath, "phase file not found"));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(&ipath)?.read_to_end(&mut bytes)?;
        if bytes.len() != numel * 4 {
            return Err(format_err(
                &ipath,
                format!(
                    "expected {} bytes for shape {:?}, found {}",
                    numel * 4,
                    meta.shape,
                    bytes.len()
                ),
            ));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let lpath = directory.join(format!("label_{t}.raw"));
        let is_labeled = t == labeled.0 || t == labeled.1;
        let label = if lpath.exists() {
            let lbytes = std::fs::read(&lpath)?;
            if lbytes.len() != numel {
                return Err(format_err(
                    &lpath,
                    format!("expected {} bytes for shape {:?}, found {}", numel, meta.shape, lbytes.len()),
                ));
            }
            if let Some(&v) = lbytes.iter().find(|&&v| v > 1) {
                return Err(format_err(&lpath, format!("label value {v} outside {{0,1}}")));
            }
            Some(Grid3::new(meta.shape, lbytes))
        } else if is_labeled {
            return Err(format_err(&lpath, "label file required for an annotated phase"));
        } else {
            None
        };

        phases.push(PhaseVolume {
            intensities: Grid3::new(meta.shape, data),
            spacing: meta.spacing_mm,
            phase_index: t,
            label,
            is_labeled,
        });
    }
    let seq = PatientSequence {
        patient_id: meta.patient_id,
        phases,
        labeled_indices: labeled,
    };
    seq.validate()?;
    Ok(seq)
}
