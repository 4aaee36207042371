//! Quality and rate metrics, the three evaluation studies and their CSV
//! artifacts.

use crate::channel::{compute_cpp, SnrDb};
use crate::config::DecisionMode;
use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{JsccModel, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

/// Reported PSNR for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const RATESNR_CSV: &str = "ratesnr.csv";
pub const CLASSES_CSV: &str = "classes.csv";
pub const COMPARE_CSV: &str = "compare.csv";
/// Per-image policy decisions behind `ratesnr.csv`.
pub const DECISIONS_CSV: &str = "decisions.csv";

/// Model id of the interpolated fixed-rate row in `compare.csv`.
pub const INTERPOLATED_ID: &str = "fixed_interp";

/// `10 log10(1 / mse)` with a peak of 1, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!(
            "psnr needs equal non-empty inputs, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mse = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = (a - b).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub mode: DecisionMode,
    pub seed: u64,
    pub batch_size: usize,
}

/// Outcome for one test image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageOutcome {
    /// Position in the evaluated dataset.
    pub index: usize,
    pub label: u8,
    pub g_active: usize,
    pub cpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStats {
    pub class: u8,
    pub count: usize,
    pub avg_cpp: f64,
    pub avg_psnr: f64,
    /// Population standard deviation of per-image PSNR within the class.
    pub psnr_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatePsnrRecord {
    pub snr_db: f64,
    pub avg_cpp: f64,
    pub avg_psnr_db: f64,
    pub per_class: Vec<ClassStats>,
    pub decisions: Vec<ImageOutcome>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Population standard deviation; zero for fewer than two values.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn batch_seed(seed: u64, snr: f64, batch: usize) -> u64 {
    seed ^ snr.to_bits().rotate_left(17) ^ (batch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D)
}

/// Sends every image of `data` through the model at one SNR.
pub fn evaluate_images(
    model: &JsccModel<f32>,
    data: &Dataset,
    snr: SnrDb,
    opts: &EvalOptions,
) -> Result<Vec<ImageOutcome>> {
    let (h, w) = model.image_hw;
    let batch = opts.batch_size.max(1);
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for (bi, chunk) in idx.chunks(batch).enumerate() {
        let x: Tensor<f32> = data.batch(chunk);
        let t = model.transmit(&x, snr, opts.mode, batch_seed(opts.seed, snr.db(), bi))?;
        for (k, &i) in chunk.iter().enumerate() {
            let g = t.g_active[k];
            out.push(ImageOutcome {
                index: i,
                label: data.labels[i],
                g_active: g,
                cpp: compute_cpp(g, model.layout.length, h, w)?,
                psnr: psnr(x.outer(k), t.reconstruction.outer(k))?,
            });
        }
    }
    Ok(out)
}

pub fn class_stats(outcomes: &[ImageOutcome]) -> Vec<ClassStats> {
    let mut classes = Vec::new();
    for c in 0..NUM_CLASSES as u8 {
        let members: Vec<&ImageOutcome> = outcomes.iter().filter(|o| o.label == c).collect();
        if members.is_empty() {
            continue;
        }
        let psnrs: Vec<f64> = members.iter().map(|o| o.psnr).collect();
        classes.push(ClassStats {
            class: c,
            count: members.len(),
            avg_cpp: mean(members.iter().map(|o| o.cpp)),
            avg_psnr: mean(psnrs.iter().copied()),
            psnr_std: population_std(&psnrs),
        });
    }
    classes
}

pub fn summarize(snr_db: f64, outcomes: &[ImageOutcome]) -> RatePsnrRecord {
    RatePsnrRecord {
        snr_db,
        avg_cpp: mean(outcomes.iter().map(|o| o.cpp)),
        avg_psnr_db: mean(outcomes.iter().map(|o| o.psnr)),
        per_class: class_stats(outcomes),
        decisions: outcomes.to_vec(),
    }
}

/// Average rate and quality at every SNR of `snrs`.
pub fn eval_rate_vs_snr(
    model: &JsccModel<f32>,
    snrs: &[f64],
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<RatePsnrRecord>> {
    snrs.iter()
        .map(|&s| {
            let outcomes = evaluate_images(model, data, SnrDb::new(s)?, opts)?;
            Ok(summarize(s, &outcomes))
        })
        .collect()
}

/// Piecewise-linear interpolation through `points` (sorted by x internally).
///
/// Returns `None` outside the covered range or without points.
pub fn interpolate(points: &[(f64, f64)], x: f64) -> Option<f64> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (first, last) = (p.first()?, p.last()?);
    if x < first.0 || x > last.0 {
        return None;
    }
    for pair in p.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x >= x0 && x <= x1 {
            if x1 == x0 {
                return Some(y0.max(y1));
            }
            return Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0));
        }
    }
    Some(first.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPoint {
    pub model_id: String,
    pub cpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub snr_db: f64,
    pub adaptive: ModelPoint,
    pub fixed: Vec<ModelPoint>,
    /// Fixed-rate curve interpolated at the adaptive model's CPP.
    pub interpolated_psnr: Option<f64>,
    /// Adaptive PSNR minus the interpolated fixed PSNR.
    pub psnr_gap: Option<f64>,
}

/// `fixed_j<j>` for fixed-rate models, `adaptive` otherwise.
pub fn model_id(model: &JsccModel<f32>) -> String {
    match model.kind() {
        ModelKind::Adaptive => "adaptive".into(),
        ModelKind::Fixed { active_groups } => format!("fixed_j{active_groups}"),
    }
}

pub fn eval_adaptive_vs_fixed(
    adaptive: &JsccModel<f32>,
    fixed: &[&JsccModel<f32>],
    snrs: &[f64],
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<ComparisonRow>> {
    if fixed.is_empty() {
        return Err(Error::Argument("comparison needs at least one fixed-rate model".into()));
    }
    let mut rows = Vec::with_capacity(snrs.len());
    for &s in snrs {
        let a = &eval_rate_vs_snr(adaptive, &[s], data, opts)?[0];
        let mut points = Vec::with_capacity(fixed.len());
        for m in fixed {
            let r = &eval_rate_vs_snr(m, &[s], data, opts)?[0];
            points.push(ModelPoint {
                model_id: model_id(m),
                cpp: r.avg_cpp,
                psnr: r.avg_psnr_db,
            });
        }
        let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.cpp, p.psnr)).collect();
        let interpolated_psnr = interpolate(&curve, a.avg_cpp);
        rows.push(ComparisonRow {
            snr_db: s,
            adaptive: ModelPoint {
                model_id: model_id(adaptive),
                cpp: a.avg_cpp,
                psnr: a.avg_psnr_db,
            },
            fixed: points,
            interpolated_psnr,
            psnr_gap: interpolated_psnr.map(|f| a.avg_psnr_db - f),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClassReport {
    pub model_id: String,
    pub snr_db: f64,
    pub avg_cpp: f64,
    pub classes: Vec<ClassStats>,
    /// Population standard deviation of the per-class mean PSNRs.
    pub psnr_std_across_classes: f64,
}

pub fn eval_per_class(
    model: &JsccModel<f32>,
    snr: SnrDb,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<PerClassReport> {
    if data.labels.len() != data.len() || data.is_empty() {
        return Err(Error::Data("per-class evaluation needs a labeled, non-empty test set".into()));
    }
    let outcomes = evaluate_images(model, data, snr, opts)?;
    let rec = summarize(snr.db(), &outcomes);
    let means: Vec<f64> = rec.per_class.iter().map(|c| c.avg_psnr).collect();
    Ok(PerClassReport {
        model_id: model_id(model),
        snr_db: rec.snr_db,
        avg_cpp: rec.avg_cpp,
        psnr_std_across_classes: population_std(&means),
        classes: rec.per_class,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

/// `ratesnr.csv`: alpha, snr_db, avg_cpp, avg_psnr.
pub fn write_ratesnr_csv(path: &Path, rows: &[(f64, &RatePsnrRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "snr_db", "avg_cpp", "avg_psnr"])?;
    for (alpha, r) in rows {
        w.write_record([
            alpha.to_string(),
            r.snr_db.to_string(),
            r.avg_cpp.to_string(),
            r.avg_psnr_db.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `decisions.csv`: alpha, snr_db, index, class, g_active, cpp, psnr.
pub fn write_decisions_csv(path: &Path, rows: &[(f64, &RatePsnrRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "snr_db", "index", "class", "g_active", "cpp", "psnr"])?;
    for (alpha, r) in rows {
        for d in &r.decisions {
            w.write_record([
                alpha.to_string(),
                r.snr_db.to_string(),
                d.index.to_string(),
                d.label.to_string(),
                d.g_active.to_string(),
                d.cpp.to_string(),
                d.psnr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `classes.csv`: alpha, snr_db, class, avg_cpp, avg_psnr, model_id.
pub fn write_classes_csv(path: &Path, alpha: f64, reports: &[PerClassReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "snr_db", "class", "avg_cpp", "avg_psnr", "model_id"])?;
    for r in reports {
        for c in &r.classes {
            w.write_record([
                alpha.to_string(),
                r.snr_db.to_string(),
                c.class.to_string(),
                c.avg_cpp.to_string(),
                c.avg_psnr.to_string(),
                r.model_id.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `compare.csv`: snr_db, model_id, cpp, psnr. The interpolated fixed-rate
/// point at the adaptive CPP is written as [`INTERPOLATED_ID`].
pub fn write_compare_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["snr_db", "model_id", "cpp", "psnr"])?;
    for r in rows {
        let snr = r.snr_db.to_string();
        for p in std::iter::once(&r.adaptive).chain(&r.fixed) {
            w.write_record([snr.clone(), p.model_id.clone(), p.cpp.to_string(), p.psnr.to_string()])?;
        }
        if let Some(ip) = r.interpolated_psnr {
            w.write_record([
                snr.clone(),
                INTERPOLATED_ID.to_string(),
                r.adaptive.cpp.to_string(),
                ip.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Records from one of the three studies.
#[derive(Clone, Debug)]
pub enum Artifacts<'a> {
    RateVsSnr(&'a [(f64, RatePsnrRecord)]),
    Compare(&'a [ComparisonRow]),
    PerClass { alpha: f64, reports: &'a [PerClassReport] },
}

/// Writes the CSV for `records` plus its figure; returns the paths written.
pub fn emit_artifacts(
    records: &Artifacts<'_>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    let csv_path = match records {
        Artifacts::RateVsSnr(rows) => {
            if rows.is_empty() {
                return Err(Error::Argument("no records to write".into()));
            }
            let p = out_dir.join(RATESNR_CSV);
            let refs: Vec<(f64, &RatePsnrRecord)> = rows.iter().map(|(a, r)| (*a, r)).collect();
            write_ratesnr_csv(&p, &refs)?;
            let d = out_dir.join(DECISIONS_CSV);
            write_decisions_csv(&d, &refs)?;
            written.push(d);
            p
        }
        Artifacts::Compare(rows) => {
            if rows.is_empty() {
                return Err(Error::Argument("no records to write".into()));
            }
            let p = out_dir.join(COMPARE_CSV);
            write_compare_csv(&p, rows)?;
            p
        }
        Artifacts::PerClass { alpha, reports } => {
            if reports.is_empty() {
                return Err(Error::Argument("no records to write".into()));
            }
            let p = out_dir.join(CLASSES_CSV);
            write_classes_csv(&p, *alpha, reports)?;
            p
        }
    };
    let figure = crate::plot::plot_from_csv(&csv_path, out_dir)?;
    written.splice(0..0, [csv_path, figure]);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::{synthetic, DatasetName, DatasetSpec, Split};

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.001) - 30.0).abs() < 1e-12);
        let x = [0.5f32; 8];
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&x[..4], &x).is_err());
    }

    #[test]
    fn psnr_monotone_in_mse() {
        let mut last = f64::INFINITY;
        for i in 1..=100 {
            let p = psnr_from_mse(i as f64 / 100.0);
            assert!(p < last);
            last = p;
        }
        assert_eq!(psnr_from_mse(1.0), 0.0);
    }

    #[test]
    fn interpolation() {
        let pts = [(0.5, 30.0), (0.25, 20.0), (0.375, 26.0)];
        assert_eq!(interpolate(&pts, 0.25), Some(20.0));
        assert_eq!(interpolate(&pts, 0.5), Some(30.0));
        assert!((interpolate(&pts, 0.3125).unwrap() - 23.0).abs() < 1e-12);
        assert_eq!(interpolate(&pts, 0.6), None);
        assert_eq!(interpolate(&[], 0.3), None);
        assert_eq!(interpolate(&[(0.3, 1.0)], 0.3), Some(1.0));
    }

    #[test]
    fn population_std_matches_definition() {
        assert_eq!(population_std(&[1.0]), 0.0);
        assert!((population_std(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }

    fn small_set(n: usize) -> Dataset {
        synthetic(&DatasetSpec {
            name: DatasetName::Synthetic,
            path: None,
            split: Split::Test,
            subset: None,
            seed: 1,
            synthetic_size: n,
            height: 16,
            width: 16,
        })
    }

    #[test]
    fn untrained_model_rates_stay_in_range_and_eval_is_pure() {
        let config = ExperimentConfig::smoke();
        let model = JsccModel::<f32>::new(&config, ModelKind::Adaptive, 5).unwrap();
        let before = crate::checkpoint::parameter_hash(&model, &|_| true);
        let data = small_set(20);
        let opts = EvalOptions {
            batch_size: 8,
            ..Default::default()
        };
        let recs = eval_rate_vs_snr(&model, &[0.0, 10.0, 20.0], &data, &opts).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert!((0.25..=0.5).contains(&r.avg_cpp));
            assert!(r.avg_psnr_db.is_finite());
        }
        assert_eq!(before, crate::checkpoint::parameter_hash(&model, &|_| true));
        let again = eval_rate_vs_snr(&model, &[0.0, 10.0, 20.0], &data, &opts).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn decisions_account_for_the_average_rate() {
        let config = ExperimentConfig::smoke();
        let model = JsccModel::<f32>::new(&config, ModelKind::Adaptive, 6).unwrap();
        let data = small_set(12);
        let opts = EvalOptions {
            batch_size: 5,
            ..Default::default()
        };
        let recs = eval_rate_vs_snr(&model, &[0.0, 20.0], &data, &opts).unwrap();
        for r in &recs {
            assert_eq!(r.decisions.len(), 12);
            assert!(r.decisions.iter().enumerate().all(|(i, d)| d.index == i && d.label == data.labels[i]));
            let cpps: Vec<f64> = r
                .decisions
                .iter()
                .map(|d| compute_cpp(d.g_active, config.group_length, 16, 16).unwrap())
                .collect();
            assert_eq!(r.avg_cpp, cpps.iter().sum::<f64>() / cpps.len() as f64);
        }
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<(f64, RatePsnrRecord)> = recs.into_iter().map(|r| (config.alpha, r)).collect();
        let files = emit_artifacts(&Artifacts::RateVsSnr(&rows), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let text = std::fs::read_to_string(dir.path().join(DECISIONS_CSV)).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 12);
        assert!(text.starts_with("alpha,snr_db,index,class,g_active,cpp,psnr\n"));
    }

    #[test]
    fn fixed_model_is_constant_across_classes() {
        let config = ExperimentConfig::smoke();
        let model = JsccModel::<f32>::new(&config, ModelKind::Fixed { active_groups: 4 }, 5).unwrap();
        let data = small_set(30);
        let opts = EvalOptions {
            batch_size: 16,
            ..Default::default()
        };
        let rep = eval_per_class(&model, SnrDb::new(10.0).unwrap(), &data, &opts).unwrap();
        assert_eq!(rep.avg_cpp, 0.5);
        assert!(rep.classes.iter().all(|c| c.avg_cpp == 0.5));
        assert_eq!(rep.model_id, "fixed_j4");
    }

    #[test]
    fn comparison_needs_fixed_models_and_handles_empty_grid() {
        let config = ExperimentConfig::smoke();
        let a = JsccModel::<f32>::new(&config, ModelKind::Adaptive, 5).unwrap();
        let f = JsccModel::<f32>::new(&config, ModelKind::Fixed { active_groups: 2 }, 5).unwrap();
        let data = small_set(4);
        let opts = EvalOptions {
            batch_size: 4,
            ..Default::default()
        };
        assert!(eval_adaptive_vs_fixed(&a, &[], &[0.0], &data, &opts).is_err());
        assert!(eval_adaptive_vs_fixed(&a, &[&f], &[], &data, &opts).unwrap().is_empty());
    }
}
