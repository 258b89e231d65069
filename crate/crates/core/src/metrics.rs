//! Hardware cost model and quality metrics.
//!
//! Energy decomposes into synaptic work, event messaging and per-neuron idle
//! cost; latency is additive over layers (fall-through execution, no
//! cross-frame pipelining). EDP multiplies mJ by ms, which lands directly in
//! microjoule-seconds. GOPS/W counts dense-equivalent operations at two per
//! multiply-accumulate. The coefficients are calibrated model constants, not
//! silicon measurements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::RegionMask;
use crate::network::{BoundingBox, Detection, FrameStats};

/// Energy/latency coefficients of the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// Energy per synaptic operation, nanojoule.
    #[serde(rename = "e_synop_nJ")]
    pub e_synop_nj: f64,
    /// Energy per emitted event message, nanojoule.
    #[serde(rename = "e_event_nJ")]
    pub e_event_nj: f64,
    /// Idle energy per neuron per frame, nanojoule.
    #[serde(rename = "e_static_nJ")]
    pub e_static_nj: f64,
    /// Time per synaptic operation, nanosecond.
    pub t_synop_ns: f64,
    /// Fixed per-layer latency overhead, microsecond.
    pub t_layer_us: f64,
}

impl CostCoefficients {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.e_synop_nj,
            self.e_event_nj,
            self.e_static_nj,
            self.t_synop_ns,
            self.t_layer_us,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "cost coefficients must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for CostCoefficients {
    /// Model constants, not silicon measurements. Fitted with `calibrate`
    /// against two reference operating points of the default detector on
    /// synthetic video (dense: 23.01 mJ / 2.29 ms, 58%-masked: 17.07 mJ /
    /// 1.87 ms), then rounded, with a small idle floor re-added (the
    /// two-point energy fit cannot resolve it). The refit recipe lives in
    /// the pipeline crate's calibration fixture test.
    fn default() -> Self {
        CostCoefficients {
            e_synop_nj: 0.025,
            e_event_nj: 7.0,
            e_static_nj: 1.0,
            t_synop_ns: 0.0039,
            t_layer_us: 10.0,
        }
    }
}

/// Event totals for one layer, accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerActivity {
    pub name: String,
    /// Neurons in the layer (constant per frame).
    pub neurons: u64,
    /// Total events emitted across all frames.
    pub events: u64,
    /// Total synaptic operations across all frames.
    pub synops: u64,
    /// Dense multiply-accumulates of one frame.
    pub dense_macs: u64,
}

/// Aggregated run activity: per-layer totals plus the frame count.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunActivity {
    pub layers: Vec<LayerActivity>,
    pub frames: u64,
}

impl RunActivity {
    /// Fold per-frame stats in a fixed order; aggregation is independent of
    /// how sequences were scheduled as long as the fold order is fixed.
    pub fn accumulate(&mut self, frame: &FrameStats) -> Result<()> {
        if self.layers.is_empty() {
            self.layers = frame
                .layers
                .iter()
                .map(|l| LayerActivity {
                    name: l.name.clone(),
                    neurons: l.neurons,
                    events: 0,
                    synops: 0,
                    dense_macs: l.dense_macs,
                })
                .collect();
        }
        if self.layers.len() != frame.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame reports {} layers, run has {}",
                frame.layers.len(),
                self.layers.len()
            )));
        }
        for (acc, l) in self.layers.iter_mut().zip(&frame.layers) {
            acc.events += l.events_out;
            acc.synops += l.synops;
        }
        self.frames += 1;
        Ok(())
    }

    pub fn total_dense_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_macs).sum()
    }
}

/// Mean events per neuron per frame, one entry per layer.
pub fn event_rate(activity: &RunActivity) -> Result<Vec<f64>> {
    if activity.frames == 0 {
        return Err(Error::Config("event rate of an empty run".into()));
    }
    activity
        .layers
        .iter()
        .map(|l| {
            if l.neurons == 0 {
                Err(Error::Config(format!("layer {} has zero neurons", l.name)))
            } else {
                Ok(l.events as f64 / (l.neurons as f64 * activity.frames as f64))
            }
        })
        .collect()
}

/// Mean energy per frame in millijoule.
pub fn energy_mj(activity: &RunActivity, coeff: &CostCoefficients) -> Result<f64> {
    if activity.frames == 0 {
        return Err(Error::Config("energy of an empty run".into()));
    }
    let frames = activity.frames as f64;
    let mut nj = 0f64;
    for l in &activity.layers {
        nj += l.synops as f64 / frames * coeff.e_synop_nj;
        nj += l.events as f64 / frames * coeff.e_event_nj;
        nj += l.neurons as f64 * coeff.e_static_nj;
    }
    Ok(nj * 1e-6)
}

/// Mean latency per frame in millisecond: layers execute strictly in
/// sequence, each charging its fixed overhead plus its synaptic work.
pub fn latency_ms(activity: &RunActivity, coeff: &CostCoefficients) -> Result<f64> {
    if activity.frames == 0 {
        return Err(Error::Config("latency of an empty run".into()));
    }
    let frames = activity.frames as f64;
    let mut us = 0f64;
    for l in &activity.layers {
        us += coeff.t_layer_us;
        us += l.synops as f64 / frames * coeff.t_synop_ns * 1e-3;
    }
    Ok(us * 1e-3)
}

/// Energy-delay product: mJ x ms is exactly uJ*s.
pub fn edp_ujs(energy_mj: f64, latency_ms: f64) -> f64 {
    energy_mj * latency_ms
}

pub fn throughput_fps(latency_ms: f64) -> f64 {
    1000.0 / latency_ms
}

/// Dense-equivalent operations per watt: 2 ops per MAC over the energy of
/// one frame.
pub fn gops_per_watt(dense_macs: u64, energy_mj: f64) -> Result<f64> {
    if !energy_mj.is_finite() || energy_mj <= 0.0 {
        return Err(Error::Config("gops/W requires positive energy".into()));
    }
    let ops = 2.0 * dense_macs as f64;
    let joules = energy_mj * 1e-3;
    Ok(ops / joules / 1e9)
}

/// Fraction of skipped regions.
pub fn frame_sparsity(mask: &RegionMask) -> f64 {
    let total = mask.total();
    if total == 0 {
        return 0.0;
    }
    (total - mask.kept_count()) as f64 / total as f64
}

/// Intersection over union of two keep-grids; 1.0 when both are empty.
pub fn mask_iou(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    if pred.rows() != gt.rows() || pred.cols() != gt.cols() {
        return Err(Error::ShapeMismatch(format!(
            "mask grids differ: {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            gt.rows(),
            gt.cols()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.grid().iter().zip(gt.grid()) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Mean of per-frame mask IoU values.
pub fn miou(frames: &[(RegionMask, RegionMask)]) -> Result<Option<f64>> {
    if frames.is_empty() {
        return Ok(None);
    }
    let mut sum = 0f64;
    for (pred, gt) in frames {
        sum += mask_iou(pred, gt)?;
    }
    Ok(Some(sum / frames.len() as f64))
}

/// Ground-truth box with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Mean average precision at IoU 0.5 with all-point interpolation.
///
/// Per class: detections sort by confidence (ties keep insertion order),
/// greedily match the highest-IoU unmatched ground truth of their frame at
/// IoU >= 0.5, and the precision envelope integrates over recall. Classes
/// without any ground truth are excluded; `None` when nothing has ground
/// truth at all.
pub fn map50(detections: &[Vec<Detection>], ground_truth: &[Vec<GtBox>]) -> Result<Option<f64>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection frames vs {} ground-truth frames",
            detections.len(),
            ground_truth.len()
        )));
    }
    let max_class = ground_truth
        .iter()
        .flatten()
        .map(|g| g.class_id)
        .chain(detections.iter().flatten().map(|d| d.class_id))
        .max();
    let Some(max_class) = max_class else {
        return Ok(None);
    };

    let mut aps = Vec::new();
    for class in 0..=max_class {
        let total_gt: usize = ground_truth
            .iter()
            .map(|frame| frame.iter().filter(|g| g.class_id == class).count())
            .sum();
        if total_gt == 0 {
            continue;
        }
        aps.push(average_precision(detections, ground_truth, class, total_gt, 0.5));
    }
    if aps.is_empty() {
        Ok(None)
    } else {
        Ok(Some(aps.iter().sum::<f64>() / aps.len() as f64))
    }
}

fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    class: usize,
    total_gt: usize,
    iou_thresh: f32,
) -> f64 {
    // (confidence, frame, bbox) in insertion order, then stable-sorted.
    let mut dets: Vec<(f32, usize, BoundingBox)> = Vec::new();
    for (frame_idx, frame) in detections.iter().enumerate() {
        for d in frame {
            if d.class_id == class {
                dets.push((d.confidence, frame_idx, d.bbox));
            }
        }
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut matched: Vec<Vec<bool>> = ground_truth
        .iter()
        .map(|frame| vec![false; frame.len()])
        .collect();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (_, frame_idx, bbox) in dets {
        let mut best: Option<(usize, f32)> = None;
        for (gi, g) in ground_truth[frame_idx].iter().enumerate() {
            if g.class_id != class || matched[frame_idx][gi] {
                continue;
            }
            let iou = bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[frame_idx][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }

    // All-point interpolation: integrate the running-max precision envelope
    // over recall.
    let mut ap = 0f64;
    let mut envelope = 0f64;
    for i in (0..precision.len()).rev() {
        envelope = envelope.max(precision[i]);
        let r_lo = if i == 0 { 0.0 } else { recall[i - 1] };
        ap += (recall[i] - r_lo) * envelope;
    }
    ap
}

// ---------------------------------------------------------------------------
// Cost report and calibration
// ---------------------------------------------------------------------------

/// Everything the cost model says about one run.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub energy_mj: f64,
    pub latency_ms: f64,
    pub throughput_fps: f64,
    pub edp_ujs: f64,
    pub gops_per_watt: f64,
    pub frame_sparsity: f64,
    pub event_rate: Vec<f64>,
}

pub fn cost_report(
    activity: &RunActivity,
    coeff: &CostCoefficients,
    frame_sparsity: f64,
) -> Result<CostReport> {
    coeff.validate()?;
    let energy = energy_mj(activity, coeff)?;
    let latency = latency_ms(activity, coeff)?;
    Ok(CostReport {
        energy_mj: energy,
        latency_ms: latency,
        throughput_fps: throughput_fps(latency),
        edp_ujs: edp_ujs(energy, latency),
        gops_per_watt: gops_per_watt(activity.total_dense_macs(), energy)?,
        frame_sparsity,
        event_rate: event_rate(activity)?,
    })
}

/// One calibration observation: run activity plus measured targets.
#[derive(Clone, Debug)]
pub struct CalibrationPoint {
    pub activity: RunActivity,
    pub energy_mj: f64,
    pub latency_ms: f64,
}

/// Calibration output with per-target residuals and rank diagnostics.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub coefficients: CostCoefficients,
    pub energy_residuals: Vec<f64>,
    pub latency_residuals: Vec<f64>,
    /// True when the energy (resp. latency) system was rank-deficient and
    /// free directions were pinned to zero.
    pub energy_rank_deficient: bool,
    pub latency_rank_deficient: bool,
}

/// Solve the normal equations of a least-squares fit over the columns in
/// `active` by Gaussian elimination with partial pivoting. Near-zero pivots
/// mark the system rank-deficient and pin that unknown to zero.
fn least_squares_active(
    rows: &[Vec<f64>],
    targets: &[f64],
    unknowns: usize,
    active: &[bool],
) -> (Vec<f64>, bool) {
    let cols: Vec<usize> = (0..unknowns).filter(|&i| active[i]).collect();
    let n = cols.len();
    let mut a = vec![vec![0f64; n]; n];
    let mut b = vec![0f64; n];
    for (row, &t) in rows.iter().zip(targets) {
        for (i, &ci) in cols.iter().enumerate() {
            b[i] += row[ci] * t;
            for (j, &cj) in cols.iter().enumerate() {
                a[i][j] += row[ci] * row[cj];
            }
        }
    }
    let scale = a
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0f64, f64::max)
        .max(1e-300);
    let mut deficient = false;
    for col in 0..n {
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .fold((col, 0f64), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_val < 1e-12 * scale {
            deficient = true;
            for row in a.iter_mut() {
                row[col] = 0.0;
            }
            a[col][col] = 1.0;
            b[col] = 0.0;
            continue;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let pivot = a[col].clone();
        for r in col + 1..n {
            let f = a[r][col] / pivot[col];
            for (c, pv) in pivot.iter().enumerate().skip(col) {
                a[r][c] -= f * pv;
            }
            b[r] -= f * b[col];
        }
    }
    let mut reduced = vec![0f64; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * reduced[c];
        }
        reduced[col] = acc / a[col][col];
    }
    let mut solution = vec![0f64; unknowns];
    for (i, &ci) in cols.iter().enumerate() {
        solution[ci] = reduced[i];
    }
    (solution, deficient)
}

/// Non-negative least squares by active-set pinning: solve, pin the most
/// negative coefficient to zero, and refit the rest until all remaining
/// coefficients are nonnegative.
fn least_squares(rows: &[Vec<f64>], targets: &[f64], unknowns: usize) -> (Vec<f64>, bool) {
    let mut active = vec![true; unknowns];
    let mut deficient = false;
    loop {
        let (solution, d) = least_squares_active(rows, targets, unknowns, &active);
        deficient |= d;
        let worst = (0..unknowns)
            .filter(|&i| active[i] && solution[i] < 0.0)
            .min_by(|&a, &b| solution[a].partial_cmp(&solution[b]).unwrap());
        match worst {
            Some(idx) => active[idx] = false,
            None => return (solution, deficient),
        }
    }
}

/// Fit cost coefficients to observed (activity, energy, latency) targets
/// under nonnegativity constraints. Needs at least two observations;
/// rank-deficient directions are reported and pinned to zero.
pub fn calibrate(points: &[CalibrationPoint]) -> Result<Calibration> {
    if points.len() < 2 {
        return Err(Error::Config(format!(
            "calibration needs at least 2 observations, got {}",
            points.len()
        )));
    }
    // Energy model: e = synops*e_synop + events*e_event + neurons*e_static
    // (all per frame, converted to mJ).
    let mut energy_rows = Vec::new();
    let mut energy_targets = Vec::new();
    let mut latency_rows = Vec::new();
    let mut latency_targets = Vec::new();
    for p in points {
        if p.activity.frames == 0 {
            return Err(Error::Config("calibration point with zero frames".into()));
        }
        let frames = p.activity.frames as f64;
        let synops: f64 = p.activity.layers.iter().map(|l| l.synops as f64).sum::<f64>() / frames;
        let events: f64 = p.activity.layers.iter().map(|l| l.events as f64).sum::<f64>() / frames;
        let neurons: f64 = p.activity.layers.iter().map(|l| l.neurons as f64).sum();
        energy_rows.push(vec![synops * 1e-6, events * 1e-6, neurons * 1e-6]);
        energy_targets.push(p.energy_mj);
        let layer_count = p.activity.layers.len() as f64;
        latency_rows.push(vec![layer_count * 1e-3, synops * 1e-6]);
        latency_targets.push(p.latency_ms);
    }
    let (e_fit, e_deficient) = least_squares(&energy_rows, &energy_targets, 3);
    let (t_fit, t_deficient) = least_squares(&latency_rows, &latency_targets, 2);
    let coefficients = CostCoefficients {
        e_synop_nj: e_fit[0],
        e_event_nj: e_fit[1],
        e_static_nj: e_fit[2],
        t_layer_us: t_fit[0],
        t_synop_ns: t_fit[1],
    };
    let energy_residuals = points
        .iter()
        .map(|p| energy_mj(&p.activity, &coefficients).unwrap_or(f64::NAN) - p.energy_mj)
        .collect();
    let latency_residuals = points
        .iter()
        .map(|p| latency_ms(&p.activity, &coefficients).unwrap_or(f64::NAN) - p.latency_ms)
        .collect();
    Ok(Calibration {
        coefficients,
        energy_residuals,
        latency_residuals,
        energy_rank_deficient: e_deficient,
        latency_rank_deficient: t_deficient,
    })
}
