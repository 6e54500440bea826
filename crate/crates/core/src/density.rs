//! Implicit keypoint distributions: repeated constrained sampling plus
//! kernel density estimation, against a fixed-variance Gaussian baseline.
//!
//! The KDE keeps all its mass wherever the samples are; the baseline is a
//! Gaussian centered on the ground truth, truncated at the unit square
//! without renormalization, so its out-of-bounds mass loss is visible in the
//! report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{generate_answer, DecodeStrategy, PromptSetup};
use crate::error::{Error, Result};
use crate::image::{save_pgm_bytes, Image, Mask};
use crate::infer::InferSession;
use crate::instructions::{build_round, KeypointSpec};
use crate::model::ModelBundle;
use crate::par;
use crate::rng::{stream, tag_str};

/// Points sampled from the model's coordinate distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Vec<(f64, f64)>,
    pub strategy: String,
}

/// Density evaluated at the centers of a G x G grid over the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub resolution: usize,
    /// Row-major (y rows, x columns).
    pub values: Vec<f64>,
}

impl DensityGrid {
    fn new(resolution: usize) -> Self {
        DensityGrid {
            resolution,
            values: vec![0.0; resolution * resolution],
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let g = self.resolution as f64;
        ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g)
    }

    /// Riemann integral over the unit square.
    pub fn integral(&self) -> f64 {
        let area = 1.0 / (self.resolution * self.resolution) as f64;
        self.values.iter().sum::<f64>() * area
    }

    /// (row, col) of the maximal cell; first in row-major order on ties.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.resolution, best % self.resolution)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in 0..self.resolution {
            let cells: Vec<String> = (0..self.resolution)
                .map(|col| format!("{:.8e}", self.values[row * self.resolution + col]))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// 8-bit PGM heatmap, max value scaled to 255.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        save_pgm_bytes(
            path,
            self.resolution,
            self.resolution,
            self.values.iter().map(|&v| (v * scale).round() as u8),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Per-axis h = S^(-1/6) * sigma, floored at 1e-3.
    Scott,
    Fixed { h: f64 },
}

const MIN_BANDWIDTH: f64 = 1e-3;

fn gaussian_1d(x: f64, mu: f64, h: f64) -> f64 {
    let z = (x - mu) / h;
    (-0.5 * z * z).exp() / (h * (2.0 * std::f64::consts::PI).sqrt())
}

/// Kernel density estimate over the unit square with an axis-aligned
/// Gaussian kernel.
pub fn kde(samples: &SampleSet, rule: BandwidthRule, resolution: usize) -> Result<DensityGrid> {
    let s = samples.points.len();
    if s == 0 {
        return Err(Error::Config("KDE needs a non-empty sample set".into()));
    }
    let (hx, hy) = match rule {
        BandwidthRule::Fixed { h } => {
            if h <= 0.0 {
                return Err(Error::Config(format!("bandwidth {h} must be positive")));
            }
            (h, h)
        }
        BandwidthRule::Scott => {
            if s < 2 {
                return Err(Error::Config(
                    "data-driven bandwidth needs at least 2 samples".into(),
                ));
            }
            let n = s as f64;
            let mean_x = samples.points.iter().map(|p| p.0).sum::<f64>() / n;
            let mean_y = samples.points.iter().map(|p| p.1).sum::<f64>() / n;
            let var_x = samples.points.iter().map(|p| (p.0 - mean_x).powi(2)).sum::<f64>() / (n - 1.0);
            let var_y = samples.points.iter().map(|p| (p.1 - mean_y).powi(2)).sum::<f64>() / (n - 1.0);
            let factor = n.powf(-1.0 / 6.0);
            (
                (factor * var_x.sqrt()).max(MIN_BANDWIDTH),
                (factor * var_y.sqrt()).max(MIN_BANDWIDTH),
            )
        }
    };

    // Canonical point order makes the grid independent of sample order even
    // at the bit level.
    let mut points = samples.points.clone();
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite sample points"));

    let mut grid = DensityGrid::new(resolution);
    let g = resolution as f64;
    let rows: Vec<Vec<f64>> = par::map_range(resolution, |row| {
        let cy = (row as f64 + 0.5) / g;
        (0..resolution)
            .map(|col| {
                let cx = (col as f64 + 0.5) / g;
                let mut acc = 0.0;
                for &(sx, sy) in &points {
                    acc += gaussian_1d(cx, sx, hx) * gaussian_1d(cy, sy, hy);
                }
                acc / points.len() as f64
            })
            .collect()
    });
    for (row, vals) in rows.into_iter().enumerate() {
        grid.values[row * resolution..(row + 1) * resolution].copy_from_slice(&vals);
    }
    Ok(grid)
}

/// Isotropic Gaussian around the ground truth, truncated at the unit square
/// without renormalization.
pub fn gaussian_baseline(gt: (f64, f64), sigma: f64, resolution: usize) -> Result<DensityGrid> {
    if sigma <= 0.0 {
        return Err(Error::Config(format!("sigma {sigma} must be positive")));
    }
    let mut grid = DensityGrid::new(resolution);
    let g = resolution as f64;
    for row in 0..resolution {
        let cy = (row as f64 + 0.5) / g;
        for col in 0..resolution {
            let cx = (col as f64 + 0.5) / g;
            grid.values[row * resolution + col] =
                gaussian_1d(cx, gt.0, sigma) * gaussian_1d(cy, gt.1, sigma);
        }
    }
    Ok(grid)
}

/// Draw S constrained coordinate samples for one keypoint prompt.
///
/// Each draw owns an RNG stream keyed by (seed, keypoint, draw index), so
/// the set is reproducible and independent of evaluation order.
pub fn sample_keypoint(
    model: &ModelBundle,
    image: &Image,
    spec: &KeypointSpec,
    setup: &PromptSetup,
    strategy: &DecodeStrategy,
    count: usize,
    seed: u64,
) -> Result<SampleSet> {
    strategy.validate()?;
    if !strategy.is_stochastic() {
        return Err(Error::Config(format!(
            "density sampling needs a stochastic strategy; {} has zero variance",
            strategy.label()
        )));
    }
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut round_rng = stream(seed, &[tag_str(&spec.name), 1]);
    let round = build_round(
        spec,
        &setup.category_names,
        setup.style,
        setup.templates,
        &mut round_rng,
    )?;
    let mut prompt = vec![setup.vocab.bos()];
    if setup.style.conversation_outline {
        prompt.extend(setup.vocab.encode_text(setup.templates.get("outline")?)?);
    }
    prompt.push(setup.vocab.sep_user());
    prompt.extend(setup.vocab.encode_text(&round.turns.last().expect("turn").question)?);
    prompt.push(setup.vocab.sep_assistant());

    let mut base = InferSession::new(model, image)?;
    base.prefill(&prompt)?;

    let draws: Vec<Result<(f64, f64)>> = par::map_range(count, |i| {
        let mut session = base.clone();
        let mut rng = stream(seed, &[tag_str(&spec.name), 2, i as u64]);
        let ans = generate_answer(
            &mut session,
            setup.vocab,
            setup.codec,
            strategy,
            true,
            &mut rng,
            setup.codec.answer_len(),
        )?;
        Ok((ans.x, ans.y))
    });
    let points: Result<Vec<(f64, f64)>> = draws.into_iter().collect();
    Ok(SampleSet {
        points: points?,
        strategy: strategy.label(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub in_square_mass: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_foreground_mass: Option<f64>,
    /// Mean distance to the ground truth under the (in-square) density.
    pub expected_distance: f64,
    /// Distance from the density mode to the ground truth.
    pub mode_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityReport {
    pub resolution: usize,
    pub gt: (f64, f64),
    pub kde: MethodMetrics,
    pub gaussian: MethodMetrics,
}

fn method_metrics(grid: &DensityGrid, gt: (f64, f64), mask: Option<&Mask>) -> MethodMetrics {
    let g = grid.resolution;
    let area = 1.0 / (g * g) as f64;
    let mut mass = 0.0;
    let mut fg_mass = mask.map(|_| 0.0);
    let mut dist_acc = 0.0;
    for row in 0..g {
        for col in 0..g {
            let v = grid.values[row * g + col] * area;
            let (cx, cy) = grid.cell_center(row, col);
            mass += v;
            dist_acc += v * ((cx - gt.0).powi(2) + (cy - gt.1).powi(2)).sqrt();
            if let (Some(fg), Some(m)) = (fg_mass.as_mut(), mask) {
                let my = ((cy * m.height as f64) as usize).min(m.height - 1);
                let mx = ((cx * m.width as f64) as usize).min(m.width - 1);
                if m.get(my, mx) > 0.5 {
                    *fg += v;
                }
            }
        }
    }
    let (mode_r, mode_c) = grid.argmax_cell();
    let (mx, my) = grid.cell_center(mode_r, mode_c);
    MethodMetrics {
        in_square_mass: mass,
        in_foreground_mass: fg_mass,
        expected_distance: if mass > 0.0 { dist_acc / mass } else { 0.0 },
        mode_distance: ((mx - gt.0).powi(2) + (my - gt.1).powi(2)).sqrt(),
    }
}

/// Side-by-side metrics for the sampled KDE and the Gaussian baseline.
pub fn density_report(
    kde_grid: &DensityGrid,
    gauss_grid: &DensityGrid,
    gt: (f64, f64),
    mask: Option<&Mask>,
) -> Result<DensityReport> {
    if kde_grid.resolution != gauss_grid.resolution {
        return Err(Error::Shape(format!(
            "grid resolutions differ: {} vs {}",
            kde_grid.resolution, gauss_grid.resolution
        )));
    }
    Ok(DensityReport {
        resolution: kde_grid.resolution,
        gt,
        kde: method_metrics(kde_grid, gt, mask),
        gaussian: method_metrics(gauss_grid, gt, mask),
    })
}
