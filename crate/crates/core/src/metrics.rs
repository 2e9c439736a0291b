//! Clamped-cosine similarity scores over the toy embedding space and voxel
//! occupancy measures of how far an edit moved.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{vecops, RngStream};
use crate::scene::{render_intensity, View, VoxelScene};

fn clamped_cos(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity", "vector lengths differ"));
    }
    let (na, nb) = (vecops::norm(a), vecops::norm(b));
    if na == 0.0 || nb == 0.0 || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((vecops::dot(a, b) / (na * nb)).max(0.0))
}

/// `max(cos(image, text), 0)`.
pub fn clip_sim(image: &[f64], text: &[f64]) -> Result<f64> {
    clamped_cos(image, text)
}

/// `max(cos(image_t - image_o, text_t - text_o), 0)`.
pub fn clip_dir(image_t: &[f64], image_o: &[f64], text_t: &[f64], text_o: &[f64]) -> Result<f64> {
    if image_t.len() != image_o.len() || text_t.len() != text_o.len() {
        return Err(Error::shape("clip_dir", "vector lengths differ"));
    }
    clamped_cos(&vecops::sub(image_t, image_o), &vecops::sub(text_t, text_o))
}

/// Thresholded occupancy of an `n`-grid in scene index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occupancy {
    n: usize,
    cells: Vec<bool>,
}

impl Occupancy {
    pub fn new(n: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != n * n * n {
            return Err(Error::shape("occupancy", alloc::format!("{} cells for n = {n}", cells.len())));
        }
        Ok(Self { n, cells })
    }

    /// Voxels whose density is at least `threshold`.
    pub fn of_scene(scene: &VoxelScene, threshold: f64) -> Self {
        Self { n: scene.n(), cells: scene.density().data().iter().map(|&d| d >= threshold).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Intersection over union; two empty sets count as identical.
    pub fn iou(&self, other: &Occupancy) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::shape("iou", alloc::format!("grid {} against {}", self.n, other.n)));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.cells.iter().zip(&other.cells) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn voxel_iou(scene: &VoxelScene, reference: &Occupancy, threshold: f64) -> Result<f64> {
    Occupancy::of_scene(scene, threshold).iou(reference)
}

/// `iou(edited, target) - iou(edited, original)` with the original
/// thresholded like the edit: positive once the edit resembles the target
/// more than the starting object.
pub fn edit_extent(original: &VoxelScene, edited: &VoxelScene, target: &Occupancy) -> Result<f64> {
    let e = Occupancy::of_scene(edited, DEFAULT_THRESHOLD);
    let o = Occupancy::of_scene(original, DEFAULT_THRESHOLD);
    Ok(e.iou(target)? - e.iou(&o)?)
}

/// Fixed random linear map from a flattened intensity render to the
/// embedding space, standing in for an image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEmbedder {
    image_len: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl ProbeEmbedder {
    pub fn new(image_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let scale = 1.0 / libm::sqrt(image_len as f64);
        let weights = (0..image_len * dim).map(|_| rng.standard_normal() * scale).collect();
        Self { image_len, dim, weights }
    }

    pub fn embed(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.image_len {
            return Err(Error::shape("probe", alloc::format!("image of {} pixels", image.len())));
        }
        Ok(self.weights.chunks(self.image_len).map(|row| vecops::dot(row, image)).collect())
    }
}

/// One evaluation result, serialised as a report line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub views: usize,
    pub seed: u64,
}

/// What the edit was asked to do.
#[derive(Debug, Clone, Copy)]
pub struct EditIntent<'a> {
    pub original_text: &'a [f64],
    pub target_text: &'a [f64],
    pub target_shape: Option<&'a Occupancy>,
}

pub const EVAL_VIEWS: usize = 100;

/// Averages the similarity scores over `views` uniformly random azimuths and
/// adds the occupancy measures when a target shape is known.
pub fn evaluate(
    original: &VoxelScene,
    edited: &VoxelScene,
    intent: &EditIntent<'_>,
    probe: &ProbeEmbedder,
    image_size: usize,
    views: usize,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    if views == 0 {
        return Err(Error::argument("views", "at least one evaluation view"));
    }
    let mut rng = RngStream::new(seed);
    let (mut sim, mut dir) = (0.0, 0.0);
    for _ in 0..views {
        let view = View::new(rng.uniform_range(-180.0, 180.0), image_size)?;
        let io = probe.embed(render_intensity(original, &view).data())?;
        let ie = probe.embed(render_intensity(edited, &view).data())?;
        sim += clip_sim(&ie, intent.target_text)?;
        // An unchanged view has no direction; it contributes zero.
        dir += match clip_dir(&ie, &io, intent.target_text, intent.original_text) {
            Err(Error::UndefinedSimilarity) => 0.0,
            r => r?,
        };
    }
    let record = |metric: &str, value: f64| MetricRecord { metric: metric.into(), value, views, seed };
    let mut out = alloc::vec![record("clip_sim", sim / views as f64), record("clip_dir", dir / views as f64)];
    if let Some(target) = intent.target_shape {
        out.push(record("voxel_iou_target", voxel_iou(edited, target, DEFAULT_THRESHOLD)?));
        let o = Occupancy::of_scene(original, DEFAULT_THRESHOLD);
        out.push(record("voxel_iou_original", voxel_iou(edited, &o, DEFAULT_THRESHOLD)?));
        out.push(record("edit_extent", edit_extent(original, edited, target)?));
    }
    Ok(out)
}
