//! View-count sweeps, per-query part analysis and attention export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::{grid_fscore, voxel_iou};
use crate::model::{AttentionRecord, LegoFormer, PredictOptions, Scheme, Variant};
use crate::synth::LoadedObject;
use crate::voxel::{compose_factors, threshold, OccupancyGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tau: f32,
    /// F-score distance as a fraction of the unit cube side.
    pub fscore_distance: f64,
    pub view_counts: Vec<usize>,
    pub capture_attention: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 0.3,
            fscore_distance: 0.01,
            view_counts: vec![1, 2, 4, 8],
            capture_attention: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.tau
            )));
        }
        if !(self.fscore_distance > 0.0) {
            return Err(Error::Config(format!(
                "f-score distance must be positive, got {}",
                self.fscore_distance
            )));
        }
        if self.view_counts.is_empty() || self.view_counts.contains(&0) {
            return Err(Error::Config(
                "view counts must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that turns an object's first `views` views into occupancy grids.
pub trait Reconstructor {
    fn supports_views(&self, views: usize) -> bool;
    fn reconstruct(&self, objects: &[&LoadedObject], views: usize) -> Result<Vec<OccupancyGrid>>;
}

impl Reconstructor for LegoFormer {
    fn supports_views(&self, views: usize) -> bool {
        self.config().variant == Variant::MultiView || views == 1
    }

    fn reconstruct(&self, objects: &[&LoadedObject], views: usize) -> Result<Vec<OccupancyGrid>> {
        let mut out = Vec::with_capacity(objects.len());
        for chunk in objects.chunks(8) {
            let batch: Vec<Vec<GrayImage>> =
                chunk.iter().map(|o| o.views[..views].to_vec()).collect();
            out.extend(
                self.predict_batch(&batch, PredictOptions::default())?
                    .into_iter()
                    .map(|p| p.grid),
            );
        }
        Ok(out)
    }
}

/// Splits objects over scoped worker threads. Per-object outputs do not
/// depend on batch composition, so results match the serial path exactly.
pub struct ParallelReconstructor<'m> {
    model: &'m LegoFormer,
    threads: usize,
}

impl<'m> ParallelReconstructor<'m> {
    pub fn new(model: &'m LegoFormer, threads: usize) -> Self {
        ParallelReconstructor {
            model,
            threads: threads.max(1),
        }
    }
}

impl Reconstructor for ParallelReconstructor<'_> {
    fn supports_views(&self, views: usize) -> bool {
        self.model.supports_views(views)
    }

    fn reconstruct(&self, objects: &[&LoadedObject], views: usize) -> Result<Vec<OccupancyGrid>> {
        if self.threads == 1 || objects.len() < 2 {
            return self.model.reconstruct(objects, views);
        }
        let per = objects.len().div_ceil(self.threads);
        let results: Vec<Result<Vec<OccupancyGrid>>> = std::thread::scope(|s| {
            let handles: Vec<_> = objects
                .chunks(per)
                .map(|chunk| s.spawn(move || self.model.reconstruct(chunk, views)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(objects.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub id: String,
    pub iou: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCountResult {
    pub views: usize,
    pub mean_iou: f64,
    pub mean_fscore: f64,
    pub per_object: Vec<ObjectScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub per_view_count: Vec<ViewCountResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn result(&self, views: usize) -> Option<&ViewCountResult> {
        self.per_view_count.iter().find(|r| r.views == views)
    }
}

/// Scores `model` on `objects` at each configured view count, using the
/// first `v` views of every object's pool.
pub fn evaluate_sweep(
    model: &impl Reconstructor,
    checkpoint: &str,
    dataset: &str,
    objects: &[&LoadedObject],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut per_view_count = Vec::with_capacity(cfg.view_counts.len());
    for &v in &cfg.view_counts {
        if !model.supports_views(v) {
            return Err(Error::Config(format!("model does not accept {v} views")));
        }
        if let Some(o) = objects.iter().find(|o| o.views.len() < v) {
            return Err(Error::InvalidArgument(format!(
                "object {} has {} views, sweep needs {v}",
                o.entry.id,
                o.views.len()
            )));
        }
        let preds = model.reconstruct(objects, v)?;
        let mut per_object = Vec::with_capacity(objects.len());
        for (o, p) in objects.iter().zip(&preds) {
            let bin = threshold(p, cfg.tau)?;
            per_object.push(ObjectScore {
                id: o.entry.id.clone(),
                iou: voxel_iou(&bin, &o.grid)?,
                fscore: grid_fscore(&bin, &o.grid, cfg.fscore_distance)?,
            });
        }
        let count = per_object.len().max(1) as f64;
        per_view_count.push(ViewCountResult {
            views: v,
            mean_iou: per_object.iter().map(|s| s.iou).sum::<f64>() / count,
            mean_fscore: per_object.iter().map(|s| s.fscore).sum::<f64>() / count,
            per_object,
        });
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        dataset: dataset.to_string(),
        per_view_count,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartAnalysis {
    /// Unclipped rank-1 grid of each query.
    pub rank1: Vec<OccupancyGrid>,
    /// Each rank-1 grid thresholded at `tau`.
    pub parts: Vec<OccupancyGrid>,
    /// `min(1, Σ_{i ≤ j} rank1_i)` for each `j`, in query order.
    pub partial_sums: Vec<OccupancyGrid>,
    /// The forward pass's composed grid.
    pub composed: OccupancyGrid,
}

pub fn part_analysis(model: &LegoFormer, views: &[GrayImage], tau: f32) -> Result<PartAnalysis> {
    if model.config().scheme != Scheme::Factors {
        return Err(Error::InvalidArgument(format!(
            "part analysis needs the factors scheme, model uses {}",
            model.config().scheme
        )));
    }
    let pred = model.predict(views, PredictOptions::default())?;
    let factors = pred.factors.expect("factors scheme returns factors");
    let k = factors.k();
    let rank1: Vec<OccupancyGrid> = (0..k).map(|i| factors.rank1_grid(i)).collect();
    let parts = rank1
        .iter()
        .map(|g| threshold(g, tau))
        .collect::<Result<_>>()?;
    let partial_sums = (1..=k)
        .map(|j| {
            Ok(compose_factors(
                &factors.select(&(0..j).collect::<Vec<_>>())?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(PartAnalysis {
        rank1,
        parts,
        partial_sums,
        composed: pred.grid,
    })
}

pub fn export_attention(records: &[AttentionRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no attention was captured".into()));
    }
    Ok(serde_json::to_string(records).expect("records serialize"))
}

pub fn import_attention(text: &str) -> Result<Vec<AttentionRecord>> {
    let records: Vec<AttentionRecord> = serde_json::from_str(text)
        .map_err(|e| Error::InvalidArgument(format!("bad attention JSON: {e}")))?;
    if let Some(r) = records.iter().find(|r| r.scores.len() != r.rows * r.cols) {
        return Err(Error::InvalidArgument(format!(
            "record {:?}/{}/{} has {} scores for {}x{}",
            r.kind,
            r.layer,
            r.head,
            r.scores.len(),
            r.rows,
            r.cols
        )));
    }
    Ok(records)
}
