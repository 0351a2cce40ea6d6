//! Surface/volume consistency regularization.
//!
//! Predictions for every phase of a cycle should enclose the same tissue:
//! bending changes shape but not surface area or volume. The loss compares a
//! differentiable surface measure and soft voxel volume of each unlabeled
//! prediction against the labeled phase's, penalizing relative and absolute
//! deviation.
//!
//! A hard 0/1 binarization has zero gradient almost everywhere, so all
//! regularization terms run on a logistic soft binarization; the hard
//! indicator path is kept for evaluation-only reporting.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// The three 3x3x3 derivative stencils, each the outer product of the
/// centered difference [-1, 0, 1] along its axis and the smoothing [1, 2, 1]
/// along the other two. Stored as convolution weights of shape [3, 1, 3, 3, 3]
/// with output channels (d/dz, d/dy, d/dx) for grids indexed (z, y, x).
pub struct SobelKernels {
    pub weights: Tensor,
}

impl SobelKernels {
    pub fn new() -> Self {
        let deriv = [-1.0, 0.0, 1.0];
        let smooth = [1.0, 2.0, 1.0];
        let mut data = Vec::with_capacity(81);
        for axis in 0..3 {
            for (kz, ky, kx) in itertools_3() {
                let f = |pos: usize, k: usize| {
                    if axis == pos {
                        deriv[k]
                    } else {
                        smooth[k]
                    }
                };
                data.push(f(0, kz) * f(1, ky) * f(2, kx));
            }
        }
        SobelKernels {
            weights: Tensor::new(vec![3, 1, 3, 3, 3], data),
        }
    }

    /// Peak response of one stencil to a unit step: 1+2+1 smoothing in two
    /// axes times the unit difference.
    pub const STEP_RESPONSE: f64 = 16.0;
}

impl Default for SobelKernels {
    fn default() -> Self {
        SobelKernels::new()
    }
}

fn itertools_3() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..3).flat_map(|z| (0..3).flat_map(move |y| (0..3).map(move |x| (z, y, x))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceMode {
    /// Gradient mass over soft surface-voxel count: a mean boundary gradient,
    /// insensitive to object scale.
    Normalized,
    /// Calibrated raw gradient mass: approximates the physical surface area
    /// (a flat face contributes its exact area), so nested shapes order
    /// strictly by size. Default for training.
    RawMass,
}

#[derive(Clone, Copy, Debug)]
pub struct TCRConfig {
    /// Weight of the absolute-difference term (the relative term has weight 1).
    pub lambda: f64,
    /// Division guard in the relative term and the normalized denominator.
    pub epsilon: f64,
    /// Soft-binarization temperature.
    pub tau: f64,
    pub surface_mode: SurfaceMode,
    /// Block gradients into the labeled phase's measures.
    pub detach_reference: bool,
}

impl Default for TCRConfig {
    fn default() -> Self {
        TCRConfig {
            lambda: 0.01,
            epsilon: 1e-6,
            tau: 0.05,
            surface_mode: SurfaceMode::RawMass,
            detach_reference: false,
        }
    }
}

/// Differentiable surrogate for the 0.5-threshold indicator:
/// logistic((p - 0.5) / tau).
pub fn soft_binarize(tape: &mut Tape, p: Var, tau: f64) -> Var {
    let shifted = tape.add_scalar(p, -0.5);
    let scaled = tape.scale(shifted, 1.0 / tau);
    tape.logistic(scaled)
}

/// Voxelwise gradient magnitude of a [D, H, W] map, normalized so a unit
/// step responds with 1/spacing at the two voxel layers astride the face.
/// Border values are replicated outward before convolving, so constant
/// fields have exactly zero gradient everywhere and interior responses stay
/// intact up to the last voxel layer.
pub fn sobel_gradient_magnitude(tape: &mut Tape, b: Var, spacing: f64) -> Var {
    let shape = tape.value(b).shape().to_vec();
    assert_eq!(shape.len(), 3, "gradient magnitude expects [D,H,W]");
    let as_conv = tape.reshape(b, vec![1, shape[0], shape[1], shape[2]]);
    let padded = tape.replicate_pad1(as_conv);
    let kernels = tape.constant(SobelKernels::new().weights);
    let grads_padded = tape.conv3d(padded, kernels, None);
    let grads = tape.crop1(grads_padded);
    let sq = tape.mul(grads, grads);
    let gz = tape.slice_channels(sq, 0, 1);
    let gy = tape.slice_channels(sq, 1, 2);
    let gx = tape.slice_channels(sq, 2, 3);
    let zy = tape.add(gz, gy);
    let total = tape.add(zy, gx);
    let norm = tape.sqrt(total);
    let scaled = tape.scale(norm, 1.0 / (SobelKernels::STEP_RESPONSE * spacing));
    tape.reshape(scaled, shape)
}

/// Raw gradient mass per unit face area of a large flat face is 2/spacing;
/// finite shapes respond less at edges and corners. The divisor is calibrated
/// once against the face-count oracle (a 4^3 voxel cube has 96 exposed unit
/// faces) and frozen.
const RAW_MASS_CALIBRATION: f64 = 1.5626;

/// Surface measure of a probability map (see [`SurfaceMode`]). Differentiable
/// in `p`; both modes are invariant to integer-voxel translation of interior
/// shapes.
pub fn surface_measure(tape: &mut Tape, p: Var, spacing: f64, cfg: &TCRConfig) -> Var {
    let b = soft_binarize(tape, p, cfg.tau);
    let g = sobel_gradient_magnitude(tape, b, spacing);
    let area = spacing * spacing;
    match cfg.surface_mode {
        SurfaceMode::RawMass => {
            let mass = tape.sum(g);
            tape.scale(mass, area * spacing / RAW_MASS_CALIBRATION)
        }
        SurfaceMode::Normalized => {
            let mass = tape.sum(g);
            let num = tape.scale(mass, area);
            // soft count of surface voxels: indicator of G above a small floor
            let floor = 0.05 / spacing;
            let tau_g = floor / 5.0;
            let shifted = tape.add_scalar(g, -floor);
            let sharp = tape.scale(shifted, 1.0 / tau_g);
            let w = tape.logistic(sharp);
            let wsum = tape.sum(w);
            let den_area = tape.scale(wsum, area);
            let den = tape.add_scalar(den_area, cfg.epsilon);
            tape.div(num, den)
        }
    }
}

/// Soft voxel count: sum of the soft binarization.
pub fn volume_measure(tape: &mut Tape, p: Var, cfg: &TCRConfig) -> Var {
    let b = soft_binarize(tape, p, cfg.tau);
    tape.sum(b)
}

/// Relative plus absolute deviation of a measure from its reference:
/// |q_t - q_1| / (q_1 + epsilon) + lambda * |q_t - q_1|.
///
/// The relative part is the guarded form of |1 - q_t/q_1|, written as a
/// difference quotient so it is exactly zero at q_t == q_1 (the unguarded
/// ratio form would leave an epsilon-sized residue).
pub fn dual_term(tape: &mut Tape, q_t: Var, q_1: Var, lambda: f64, epsilon: f64) -> Var {
    let diff = tape.sub(q_t, q_1);
    let guarded = tape.add_scalar(q_1, epsilon);
    let ratio = tape.div(diff, guarded);
    let rel = tape.abs(ratio);
    let abs_diff = tape.abs(diff);
    let weighted = tape.scale(abs_diff, lambda);
    tape.add(rel, weighted)
}

pub struct TcrTerms {
    pub l_surf: Var,
    pub l_vol: Var,
    pub l_tcp: Var,
}

/// Surface and volume consistency of two unlabeled predictions against the
/// labeled phase's prediction. The absolute term's weight is `lambda` for
/// volume and `lambda / spacing^2` for surface so both stay commensurate with
/// their unitless relative terms.
pub fn tcr_loss(
    tape: &mut Tape,
    p_labeled: Var,
    p_u1: Var,
    p_u2: Var,
    spacing: f64,
    cfg: &TCRConfig,
) -> TcrTerms {
    let reference = if cfg.detach_reference {
        let detached = tape.value(p_labeled).clone();
        tape.constant(detached)
    } else {
        p_labeled
    };
    let s1 = surface_measure(tape, reference, spacing, cfg);
    let v1 = volume_measure(tape, reference, cfg);
    let lambda_surf = cfg.lambda / (spacing * spacing);

    let mut l_surf = None;
    let mut l_vol = None;
    for p in [p_u1, p_u2] {
        let st = surface_measure(tape, p, spacing, cfg);
        let vt = volume_measure(tape, p, cfg);
        let ds = dual_term(tape, st, s1, lambda_surf, cfg.epsilon);
        let dv = dual_term(tape, vt, v1, cfg.lambda, cfg.epsilon);
        l_surf = Some(match l_surf {
            None => ds,
            Some(acc) => tape.add(acc, ds),
        });
        l_vol = Some(match l_vol {
            None => dv,
            Some(acc) => tape.add(acc, dv),
        });
    }
    let l_surf = l_surf.unwrap();
    let l_vol = l_vol.unwrap();
    let l_tcp = tape.add(l_surf, l_vol);
    TcrTerms { l_surf, l_vol, l_tcp }
}

/// Gradient-free evaluation of the loss terms: (l_surf, l_vol, l_tcp).
pub fn eval_tcr_loss(
    p_labeled: &Tensor,
    p_u1: &Tensor,
    p_u2: &Tensor,
    spacing: f64,
    cfg: &TCRConfig,
) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let a = tape.constant(p_labeled.clone());
    let b = tape.constant(p_u1.clone());
    let c = tape.constant(p_u2.clone());
    let terms = tcr_loss(&mut tape, a, b, c, spacing, cfg);
    (
        tape.value(terms.l_surf).item(),
        tape.value(terms.l_vol).item(),
        tape.value(terms.l_tcp).item(),
    )
}

/// Hard-indicator surface area and voxel volume of a binary mask, for
/// evaluation reports. Surface applies the calibrated raw-mass measure to the
/// 0/1 field directly; volume is the exact voxel count times voxel volume.
pub fn hard_measures(mask: &Tensor, spacing: f64) -> (f64, f64) {
    assert_eq!(mask.shape().len(), 3);
    let mut tape = Tape::new();
    let b = tape.constant(mask.clone());
    let g = sobel_gradient_magnitude(&mut tape, b, spacing);
    let mass = tape.value(g).sum();
    let surface = mass * spacing.powi(3) / RAW_MASS_CALIBRATION;
    let volume = mask.data().iter().sum::<f64>() * spacing.powi(3);
    (surface, volume)
}

/// Convenience used by tests: saturated probability map of a cuboid.
#[cfg(test)]
fn cuboid_map(grid: usize, lo: [usize; 3], hi: [usize; 3], p_in: f64, p_out: f64) -> Tensor {
    let mut t = Tensor::full(&[grid, grid, grid], p_out);
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for x in lo[2]..hi[2] {
                t.data_mut()[(z * grid + y) * grid + x] = p_in;
            }
        }
    }
    t
}
