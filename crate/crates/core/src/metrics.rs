//! Segmentation quality metrics and per-phase reporting.
//!
//! Dice and conformity are voxel-count metrics; HD95 is the 95th percentile
//! of pooled symmetric boundary-to-boundary Euclidean distances, computed
//! with an exact distance transform. Undefined cases (empty masks, zero true
//! positives) are reported as missing rather than folded into aggregates as
//! zeros.

use crate::data::{Grid3, PatientSequence};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// 2|A∩B| / (|A| + |B|) as a fraction. Two empty masks count as perfect
/// agreement (1.0); one empty mask as total disagreement (0.0).
pub fn dice(a: &Grid3<u8>, b: &Grid3<u8>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "dice: mask shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0usize;
    let mut ca = 0usize;
    let mut cb = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ca += (x == 1) as usize;
        cb += (y == 1) as usize;
        inter += (x == 1 && y == 1) as usize;
    }
    Ok(match (ca, cb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (ca + cb) as f64,
    })
}

/// 1 - (FP + FN)/TP with `a` as prediction and `b` as reference; undefined
/// when there are no true positives.
pub fn conformity(a: &Grid3<u8>, b: &Grid3<u8>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "conformity: mask shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        match (x == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Err(Error::UndefinedMetric(
            "conformity undefined without true positives".into(),
        ));
    }
    Ok(1.0 - (fp + fneg) as f64 / tp as f64)
}

/// Boundary voxels under 6-connectivity: mask voxels with at least one face
/// neighbor outside the mask (the grid edge counts as outside).
pub fn boundary_voxels(mask: &Grid3<u8>) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.shape();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) != 1 {
                    continue;
                }
                let exposed = (z == 0 || mask.get(z - 1, y, x) != 1)
                    || (z + 1 == d || mask.get(z + 1, y, x) != 1)
                    || (y == 0 || mask.get(z, y - 1, x) != 1)
                    || (y + 1 == h || mask.get(z, y + 1, x) != 1)
                    || (x == 0 || mask.get(z, y, x - 1) != 1)
                    || (x + 1 == w || mask.get(z, y, x + 1) != 1);
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Exact 1D squared-distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact Euclidean distance (in voxel units) from every grid point to the
/// nearest seed voxel, by separable squared-distance transforms.
fn distance_field(shape: [usize; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [d, h, w] = shape;
    let big = 1e12f64;
    let mut field = vec![big; d * h * w];
    for s in seeds {
        field[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let mut buf_in = vec![0.0f64; d.max(h).max(w)];
    let mut buf_out = vec![0.0f64; d.max(h).max(w)];
    // along x
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            buf_in[..w].copy_from_slice(&field[base..base + w]);
            dt1d(&buf_in[..w], &mut buf_out[..w]);
            field[base..base + w].copy_from_slice(&buf_out[..w]);
        }
    }
    // along y
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                buf_in[y] = field[(z * h + y) * w + x];
            }
            dt1d(&buf_in[..h], &mut buf_out[..h]);
            for y in 0..h {
                field[(z * h + y) * w + x] = buf_out[y];
            }
        }
    }
    // along z
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                buf_in[z] = field[(z * h + y) * w + x];
            }
            dt1d(&buf_in[..d], &mut buf_out[..d]);
            for z in 0..d {
                field[(z * h + y) * w + x] = buf_out[z];
            }
        }
    }
    field.iter_mut().for_each(|v| *v = v.sqrt());
    field
}

/// 95th percentile with linear interpolation between order statistics.
pub fn percentile_95(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < values.len() {
        values[lo] + frac * (values[lo + 1] - values[lo])
    } else {
        values[lo]
    }
}

/// 95th percentile of pooled symmetric boundary distances, in physical units.
/// Undefined (error) when either mask is empty.
pub fn hd95(a: &Grid3<u8>, b: &Grid3<u8>, spacing: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "hd95: mask shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedMetric(
            "hd95 undefined for an empty mask".into(),
        ));
    }
    let [_, h, w] = a.shape();
    let field_b = distance_field(a.shape(), &bb);
    let field_a = distance_field(a.shape(), &ba);
    let mut pooled = Vec::with_capacity(ba.len() + bb.len());
    for v in &ba {
        pooled.push(field_b[(v[0] * h + v[1]) * w + v[2]]);
    }
    for v in &bb {
        pooled.push(field_a[(v[0] * h + v[1]) * w + v[2]]);
    }
    Ok(percentile_95(pooled) * spacing)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseTag {
    #[serde(rename = "ES")]
    Es,
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "MD")]
    Md,
    #[serde(rename = "MD-1")]
    MdMinus1,
    #[serde(rename = "other")]
    Other,
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseTag::Es => "ES",
            PhaseTag::Ed => "ED",
            PhaseTag::Md => "MD",
            PhaseTag::MdMinus1 => "MD-1",
            PhaseTag::Other => "other",
        };
        f.write_str(s)
    }
}

/// Tag each phase of a phantom sequence. ES/ED come from the annotated
/// indices (closed and open anchors). MD is the unlabeled phase whose
/// ground-truth mask hangs deepest (largest z extent, ties to the later
/// phase); MD-1 is MD's neighbor toward ED when that neighbor is unlabeled,
/// else its other neighbor.
pub fn phase_tags(sequence: &PatientSequence) -> Vec<PhaseTag> {
    let n = sequence.n_phases();
    let (es, ed) = sequence.labeled_indices;
    let mut tags = vec![PhaseTag::Other; n];
    tags[es] = PhaseTag::Es;
    tags[ed] = PhaseTag::Ed;

    let z_extent = |t: usize| -> Option<usize> {
        let mask = sequence.phases[t].label.as_ref()?;
        let [d, h, w] = mask.shape();
        let mut lo = None;
        let mut hi = None;
        for z in 0..d {
            let any = (0..h).any(|y| (0..w).any(|x| mask.get(z, y, x) == 1));
            if any {
                if lo.is_none() {
                    lo = Some(z);
                }
                hi = Some(z);
            }
        }
        Some(hi? - lo.unwrap() + 1)
    };

    let mut md = None;
    let mut best = 0usize;
    for t in sequence.unlabeled_indices() {
        if let Some(e) = z_extent(t) {
            if e >= best {
                best = e;
                md = Some(t);
            }
        }
    }
    if let Some(md) = md {
        tags[md] = PhaseTag::Md;
        let toward_ed = if ed > md { md + 1 } else { md.wrapping_sub(1) };
        let neighbor = if toward_ed < n && tags[toward_ed] == PhaseTag::Other {
            Some(toward_ed)
        } else {
            let other = if ed > md { md.wrapping_sub(1) } else { md + 1 };
            (other < n && tags[other] == PhaseTag::Other).then_some(other)
        };
        if let Some(nb) = neighbor {
            tags[nb] = PhaseTag::MdMinus1;
        }
    }
    tags
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase_index: usize,
    pub tag: PhaseTag,
    pub dice_pct: f64,
    /// Missing when a mask is empty.
    pub hd95_mm: Option<f64>,
    /// Missing when there are no true positives.
    pub conformity_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n_phases: usize,
    pub dice_pct: f64,
    pub hd95_mm: Option<f64>,
    pub conformity_pct: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub patient_id: String,
    pub rows: Vec<PhaseMetrics>,
    pub all_phases: AggregateRow,
    /// Mean over the ES, ED, MD, and MD-1 rows.
    pub key_phases: AggregateRow,
}

fn aggregate(rows: &[&PhaseMetrics]) -> AggregateRow {
    if rows.is_empty() {
        return AggregateRow::default();
    }
    let dice_pct = rows.iter().map(|r| r.dice_pct).sum::<f64>() / rows.len() as f64;
    let mean_opt = |vals: Vec<f64>| {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    AggregateRow {
        n_phases: rows.len(),
        dice_pct,
        hd95_mm: mean_opt(rows.iter().filter_map(|r| r.hd95_mm).collect()),
        conformity_pct: mean_opt(rows.iter().filter_map(|r| r.conformity_pct).collect()),
    }
}

/// Score one prediction per phase against the sequence's ground truth.
/// Phases without ground truth are skipped (partial report).
pub fn evaluate_sequence(
    predictions: &[Grid3<u8>],
    sequence: &PatientSequence,
) -> Result<MetricsReport> {
    if predictions.len() != sequence.n_phases() {
        return Err(Error::shape(format!(
            "{} predictions for {} phases",
            predictions.len(),
            sequence.n_phases()
        )));
    }
    let tags = phase_tags(sequence);
    let spacing = sequence.phases[0].spacing;
    let mut rows = Vec::new();
    for (t, pred) in predictions.iter().enumerate() {
        let Some(truth) = sequence.phases[t].label.as_ref() else {
            continue;
        };
        let d = dice(pred, truth)?;
        let hd = hd95(pred, truth, spacing).ok();
        let conf = conformity(pred, truth).ok();
        rows.push(PhaseMetrics {
            phase_index: t,
            tag: tags[t],
            dice_pct: 100.0 * d,
            hd95_mm: hd,
            conformity_pct: conf.map(|c| 100.0 * c),
        });
    }
    let all_phases = aggregate(&rows.iter().collect::<Vec<_>>());
    let key: Vec<&PhaseMetrics> = rows.iter().filter(|r| r.tag != PhaseTag::Other).collect();
    let key_phases = aggregate(&key);
    Ok(MetricsReport {
        patient_id: sequence.patient_id.clone(),
        rows,
        all_phases,
        key_phases,
    })
}

/// Mean of per-patient aggregate rows (each patient weighted equally).
/// Side-by-side table for a pair of evaluation runs (e.g. an ablation
/// pair): All-Phases and Key-Phases aggregates per run with deltas.
pub fn comparison_table(
    label_a: &str,
    a: &MetricsReport,
    label_b: &str,
    b: &MetricsReport,
) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:>10.3}")).unwrap_or_else(|| format!("{:>10}", "-"));
    let delta = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => format!("{:>+10.3}", y - x),
        _ => format!("{:>10}", "-"),
    };
    let width = label_a.len().max(label_b.len()).max(5) + 14;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<width$} {:>10} {:>10} {:>10}\n",
        "run", "dice_pct", "hd95_mm", "conf_pct"
    ));
    for (section, ra, rb) in [
        ("all phases", &a.all_phases, &b.all_phases),
        ("key phases", &a.key_phases, &b.key_phases),
    ] {
        out.push_str(&format!(
            "{:<width$} {:>10.3} {} {}\n",
            format!("{label_a} ({section})"),
            ra.dice_pct,
            opt(ra.hd95_mm),
            opt(ra.conformity_pct)
        ));
        out.push_str(&format!(
            "{:<width$} {:>10.3} {} {}\n",
            format!("{label_b} ({section})"),
            rb.dice_pct,
            opt(rb.hd95_mm),
            opt(rb.conformity_pct)
        ));
        out.push_str(&format!(
            "{:<width$} {:>+10.3} {} {}\n",
            format!("delta ({section})"),
            rb.dice_pct - ra.dice_pct,
            delta(ra.hd95_mm, rb.hd95_mm),
            delta(ra.conformity_pct, rb.conformity_pct)
        ));
    }
    out
}

pub fn mean_reports(reports: &[MetricsReport]) -> AggregateRow {
    let rows: Vec<PhaseMetrics> = reports
        .iter()
        .map(|r| PhaseMetrics {
            phase_index: 0,
            tag: PhaseTag::Other,
            dice_pct: r.all_phases.dice_pct,
            hd95_mm: r.all_phases.hd95_mm,
            conformity_pct: r.all_phases.conformity_pct,
        })
        .collect();
    aggregate(&rows.iter().collect::<Vec<_>>())
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase_index,tag,dice_pct,hd95_mm,conformity_pct\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.phase_index,
                r.tag,
                r.dice_pct,
                opt(r.hd95_mm),
                opt(r.conformity_pct)
            ));
        }
        for (name, agg) in [("All Phases", &self.all_phases), ("Key Phases", &self.key_phases)] {
            out.push_str(&format!(
                ",{},{},{},{}\n",
                name,
                agg.dice_pct,
                opt(agg.hd95_mm),
                opt(agg.conformity_pct)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(grid: usize, lo: [usize; 3], hi: [usize; 3]) -> Grid3<u8> {
        let mut g = Grid3::filled([grid; 3], 0u8);
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    g.set(z, y, x, 1);
                }
            }
        }
        g
    }

    fn random_mask(grid: usize, fill: f64, rng: &mut ChaCha8Rng) -> Grid3<u8> {
        let mut g = Grid3::filled([grid; 3], 0u8);
        for v in g.data_mut() {
            *v = (rng.gen_range(0.0..1.0) < fill) as u8;
        }
        g
    }

    #[test]
    fn dice_hand_cases() {
        let a = cube(8, [2, 2, 2], [6, 6, 6]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);

        let b = cube(8, [0, 0, 0], [2, 2, 2]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);

        // |A| = |B| = 8, overlap 4
        let a8 = cube(8, [0, 0, 0], [2, 2, 2]);
        let b8 = cube(8, [0, 0, 1], [2, 2, 3]);
        assert_eq!(dice(&a8, &b8).unwrap(), 0.5);

        let empty = Grid3::filled([8; 3], 0u8);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        assert_eq!(dice(&empty, &a).unwrap(), 0.0);
    }

    #[test]
    fn dice_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_mask(6, 0.4, &mut rng);
            let b = random_mask(6, 0.4, &mut rng);
            assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
    }

    #[test]
    fn conformity_cases() {
        let a = cube(8, [2, 2, 2], [6, 6, 6]);
        assert_eq!(conformity(&a, &a).unwrap(), 1.0);

        // TP=4, FP=3, FN=2 -> 1 - 5/4
        let mut pred = Grid3::filled([4; 3], 0u8);
        let mut truth = Grid3::filled([4; 3], 0u8);
        for i in 0..4 {
            pred.data_mut()[i] = 1;
            truth.data_mut()[i] = 1;
        }
        for i in 4..7 {
            pred.data_mut()[i] = 1;
        }
        for i in 7..9 {
            truth.data_mut()[i] = 1;
        }
        assert_eq!(conformity(&pred, &truth).unwrap(), -0.25);

        let disjoint = cube(8, [0, 0, 0], [1, 1, 1]);
        assert!(matches!(
            conformity(&a, &disjoint),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn conformity_dice_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tested = 0;
        while tested < 100 {
            let a = random_mask(6, 0.5, &mut rng);
            let b = random_mask(6, 0.5, &mut rng);
            let Ok(conf) = conformity(&a, &b) else {
                continue;
            };
            let d = dice(&a, &b).unwrap();
            let expect = (3.0 * d - 2.0) / d;
            assert!(
                (conf - expect).abs() < 1e-9,
                "conf {conf} vs identity {expect}"
            );
            tested += 1;
        }
    }

    #[test]
    fn hd95_plates_and_scaling() {
        // unit-thickness plates at z=2 and z=5: all pooled distances are 3
        let a = cube(10, [2, 2, 2], [3, 8, 8]);
        let b = cube(10, [5, 2, 2], [6, 8, 8]);
        assert!((hd95(&a, &b, 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((hd95(&a, &b, 0.5).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(hd95(&a, &a, 1.0).unwrap(), 0.0);

        let empty = Grid3::filled([10; 3], 0u8);
        assert!(matches!(hd95(&a, &empty, 1.0), Err(Error::UndefinedMetric(_))));
    }

    /// Independent oracle: all-pairs nearest-boundary distances, pooled, same
    /// interpolated percentile.
    fn hd95_oracle(a: &Grid3<u8>, b: &Grid3<u8>, spacing: f64) -> f64 {
        let ba = boundary_voxels(a);
        let bb = boundary_voxels(b);
        let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
            let dz = p[0] as f64 - q[0] as f64;
            let dy = p[1] as f64 - q[1] as f64;
            let dx = p[2] as f64 - q[2] as f64;
            (dz * dz + dy * dy + dx * dx).sqrt()
        };
        let mut pooled = Vec::new();
        for p in &ba {
            pooled.push(bb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
        for q in &bb {
            pooled.push(ba.iter().map(|p| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
        percentile_95(pooled) * spacing
    }

    #[test]
    fn hd95_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tested = 0;
        while tested < 10 {
            let grid = rng.gen_range(5..=12);
            let a = random_mask(grid, 0.3, &mut rng);
            let b = random_mask(grid, 0.3, &mut rng);
            let Ok(fast) = hd95(&a, &b, 1.0) else {
                continue;
            };
            let expect = hd95_oracle(&a, &b, 1.0);
            assert_eq!(fast, expect, "grid {grid}");
            tested += 1;
        }
    }

    #[test]
    fn hd95_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let a = random_mask(8, 0.3, &mut rng);
            let b = random_mask(8, 0.3, &mut rng);
            if let (Ok(ab), Ok(ba)) = (hd95(&a, &b, 1.0), hd95(&b, &a, 1.0)) {
                assert_eq!(ab, ba);
            }
        }
    }

    #[test]
    fn dilation_degrades_monotonically() {
        let truth = cube(12, [4, 4, 4], [8, 8, 8]);
        let mut dilated = truth.clone();
        let src = truth.clone();
        for z in 0..12usize {
            for y in 0..12usize {
                for x in 0..12usize {
                    if src.get(z, y, x) == 1 {
                        continue;
                    }
                    let near = [
                        (z > 0).then(|| src.get(z - 1, y, x)),
                        (z < 11).then(|| src.get(z + 1, y, x)),
                        (y > 0).then(|| src.get(z, y - 1, x)),
                        (y < 11).then(|| src.get(z, y + 1, x)),
                        (x > 0).then(|| src.get(z, y, x - 1)),
                        (x < 11).then(|| src.get(z, y, x + 1)),
                    ];
                    if near.iter().flatten().any(|&v| v == 1) {
                        dilated.set(z, y, x, 1);
                    }
                }
            }
        }
        let d_exact = dice(&truth, &truth).unwrap();
        let d_dilated = dice(&dilated, &truth).unwrap();
        assert!(d_dilated <= d_exact);
        let h_exact = hd95(&truth, &truth, 1.0).unwrap();
        let h_dilated = hd95(&dilated, &truth, 1.0).unwrap();
        assert!(h_dilated >= h_exact);
    }

    fn phantom() -> PatientSequence {
        generate_phantom(&PhantomConfig {
            grid_size: 16,
            n_phases: 8,
            n_patients: 1,
            seed: 3,
            deformation_amplitude: 0.25,
            noise_level: 0.05,
            target_volume_tolerance: 0.05,
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let seq = phantom();
        let preds: Vec<Grid3<u8>> = seq
            .phases
            .iter()
            .map(|p| p.label.clone().unwrap())
            .collect();
        let report = evaluate_sequence(&preds, &seq).unwrap();
        assert_eq!(report.rows.len(), 8);
        for r in &report.rows {
            assert_eq!(r.dice_pct, 100.0);
            assert_eq!(r.hd95_mm, Some(0.0));
            assert_eq!(r.conformity_pct, Some(100.0));
        }
        assert_eq!(report.all_phases.dice_pct, 100.0);
        assert_eq!(report.key_phases.n_phases, 4);
    }

    #[test]
    fn aggregates_recompute_exactly() {
        let seq = phantom();
        // deliberately imperfect predictions: use phase 0's truth everywhere
        let stand_in = seq.phases[0].label.clone().unwrap();
        let preds: Vec<Grid3<u8>> = (0..8).map(|_| stand_in.clone()).collect();
        let report = evaluate_sequence(&preds, &seq).unwrap();
        assert_eq!(report.rows.len(), 8);
        let mean: f64 = report.rows.iter().map(|r| r.dice_pct).sum::<f64>() / 8.0;
        assert!((report.all_phases.dice_pct - mean).abs() < 1e-9);
        let hd: Vec<f64> = report.rows.iter().filter_map(|r| r.hd95_mm).collect();
        let hd_mean = hd.iter().sum::<f64>() / hd.len() as f64;
        assert!((report.all_phases.hd95_mm.unwrap() - hd_mean).abs() < 1e-9);
    }

    #[test]
    fn tags_cover_key_phases() {
        let seq = phantom();
        let tags = phase_tags(&seq);
        assert_eq!(tags.iter().filter(|&&t| t == PhaseTag::Es).count(), 1);
        assert_eq!(tags.iter().filter(|&&t| t == PhaseTag::Ed).count(), 1);
        assert_eq!(tags.iter().filter(|&&t| t == PhaseTag::Md).count(), 1);
        assert_eq!(tags.iter().filter(|&&t| t == PhaseTag::MdMinus1).count(), 1);
        let md = tags.iter().position(|&t| t == PhaseTag::Md).unwrap();
        assert!(!seq.phases[md].is_labeled, "MD must be an unlabeled phase");
        let md1 = tags.iter().position(|&t| t == PhaseTag::MdMinus1).unwrap();
        assert_eq!(md.abs_diff(md1), 1, "MD-1 must neighbor MD");
    }

    #[test]
    fn csv_layout() {
        let seq = phantom();
        let preds: Vec<Grid3<u8>> = seq
            .phases
            .iter()
            .map(|p| p.label.clone().unwrap())
            .collect();
        let report = evaluate_sequence(&preds, &seq).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "phase_index,tag,dice_pct,hd95_mm,conformity_pct");
        assert_eq!(lines.len(), 1 + 8 + 2);
        assert!(lines[9].contains("All Phases"));
        assert!(lines[10].contains("Key Phases"));
        let json = report.to_json();
        assert!(json.contains("\"all_phases\""));
    }
}
