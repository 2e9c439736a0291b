//! Concept vocabulary, the bag-of-tags prompt encoder, and the procedural
//! corpus of captioned primitives the denoisers are trained on.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, TensorValue};
use crate::scene::{render_color, render_depth, render_intensity, VoxelScene, View};

pub const EMBED_DIM: usize = 32;

pub const DEFAULT_TAGS: [&str; 13] = [
    "sphere", "cube", "cylinder", "tall", "flat", "wide", "hollow", "small", "large", "offset", "red",
    "green", "blue",
];

const VOCAB_SEED: u64 = 0x5eed_7a65;

/// Ordered tags with one orthonormal basis vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    tags: Vec<String>,
    basis: Vec<Vec<f64>>,
}

impl Default for ConceptVocabulary {
    fn default() -> Self {
        Self::new(&DEFAULT_TAGS, EMBED_DIM).expect("default vocabulary fits")
    }
}

impl ConceptVocabulary {
    /// Draws Gaussian vectors from a fixed seed and orthonormalises them
    /// (modified Gram-Schmidt, two passes).
    pub fn new(tags: &[&str], dim: usize) -> Result<Self> {
        if tags.len() > dim {
            return Err(Error::argument("vocabulary", format!("{} tags in dimension {dim}", tags.len())));
        }
        let mut rng = RngStream::new(VOCAB_SEED);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(tags.len());
        for _ in tags {
            let mut v = rng.gaussian(&[dim]).into_data();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        Ok(Self { tags: tags.iter().map(|t| t.to_string()).collect(), basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.first().map_or(EMBED_DIM, Vec::len)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn basis(&self, tag: &str) -> Result<&[f64]> {
        let i = self.tags.iter().position(|t| t == tag).ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
        Ok(&self.basis[i])
    }

    /// Sum of the basis vectors of the (deduplicated) tags; the empty set
    /// encodes to the zero vector, which serves as the unconditional
    /// embedding.
    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let mut seen: Vec<&str> = Vec::with_capacity(tags.len());
        for t in tags {
            let t = t.as_ref();
            let b = self.basis(t)?;
            if seen.contains(&t) {
                continue;
            }
            seen.push(t);
            out.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }

    pub fn unconditional(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
}

impl ShapeKind {
    pub fn tag(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
        }
    }
}

/// Analytic primitive in voxel-centred coordinates (the grid centre is the
/// origin, one unit per voxel). `radius` is the ball radius, the cube
/// half-side, or the cylinder radius; `half_height` only matters for
/// cylinders, whose axis is vertical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub center: [f64; 3],
    pub radius: f64,
    pub half_height: f64,
    pub shell: Option<f64>,
}

impl Primitive {
    pub fn sphere(radius: f64) -> Self {
        Self { kind: ShapeKind::Sphere, center: [0.0; 3], radius, half_height: radius, shell: None }
    }

    pub fn cube(half_side: f64) -> Self {
        Self { kind: ShapeKind::Cube, center: [0.0; 3], radius: half_side, half_height: half_side, shell: None }
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        Self { kind: ShapeKind::Cylinder, center: [0.0; 3], radius, half_height, shell: None }
    }

    fn solid_contains(&self, p: [f64; 3], shrink: f64) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = self.radius - shrink;
        match self.kind {
            ShapeKind::Sphere => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r,
            ShapeKind::Cube => d.iter().all(|c| libm::fabs(*c) <= r),
            ShapeKind::Cylinder => {
                d[0] * d[0] + d[2] * d[2] <= r * r && libm::fabs(d[1]) <= self.half_height - shrink
            }
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self.shell {
            None => self.solid_contains(p, 0.0),
            Some(t) => self.solid_contains(p, 0.0) && !self.solid_contains(p, t),
        }
    }

    /// Binary occupancy at voxel centres of an `n`-grid, in scene index order.
    pub fn occupancy(&self, n: usize) -> Vec<bool> {
        let c = (n as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(n * n * n);
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    out.push(self.contains([x as f64 - c, y as f64 - c, z as f64 - c]));
                }
            }
        }
        out
    }

    /// Scene whose density is the occupancy smoothed by one tent-filter pass.
    pub fn to_scene(&self, n: usize, rgb: [f64; 3]) -> VoxelScene {
        let occ: Vec<f64> = self.occupancy(n).into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        let mut scene = VoxelScene::empty(n);
        scene.density_mut().data_mut().copy_from_slice(&blur(&occ, n));
        scene.fill_color(rgb);
        scene
    }
}

/// Separable `[1/4, 1/2, 1/4]` filter along each axis, zero outside.
pub fn blur(grid: &[f64], n: usize) -> Vec<f64> {
    let mut cur = grid.to_vec();
    let strides = [n * n, n, 1];
    for &stride in &strides {
        let mut next = vec![0.0; cur.len()];
        for (i, slot) in next.iter_mut().enumerate() {
            let coord = (i / stride) % n;
            let mut v = 0.5 * cur[i];
            if coord > 0 {
                v += 0.25 * cur[i - stride];
            }
            if coord + 1 < n {
                v += 0.25 * cur[i + stride];
            }
            *slot = v;
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paint {
    Red,
    Green,
    Blue,
}

impl Paint {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Paint::Red => [1.0, 0.0, 0.0],
            Paint::Green => [0.0, 1.0, 0.0],
            Paint::Blue => [0.0, 0.0, 1.0],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Paint::Red => "red",
            Paint::Green => "green",
            Paint::Blue => "blue",
        }
    }
}

/// One view of a corpus object.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub azimuth: f64,
    pub intensity: TensorValue,
    pub depth: TensorValue,
    pub color: TensorValue,
}

pub fn render_views(scene: &VoxelScene, views: &[View]) -> Vec<ViewRender> {
    views
        .iter()
        .map(|v| ViewRender {
            azimuth: v.azimuth(),
            intensity: render_intensity(scene, v),
            depth: render_depth(scene, v),
            color: render_color(scene, v),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub index: usize,
    pub primitive: Primitive,
    pub paint: Paint,
    pub tags: Vec<&'static str>,
    pub scene: VoxelScene,
    pub renders: Vec<ViewRender>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub grid_size: usize,
    pub image_size: usize,
    pub n_views: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { grid_size: 16, image_size: 16, n_views: 8, count: 384, seed: 0 }
    }
}

/// Extent of the occupied voxels along each axis, in voxels.
pub fn occupied_extent(occ: &[bool], n: usize) -> [usize; 3] {
    let mut lo = [n; 3];
    let mut hi = [0; 3];
    let mut any = false;
    for (i, &o) in occ.iter().enumerate() {
        if o {
            any = true;
            let c = [i / (n * n), (i / n) % n, i % n];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return [0; 3];
    }
    [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1]
}

fn sample_primitive(rng: &mut RngStream, n: usize) -> Primitive {
    let s = n as f64 / 16.0;
    let kind = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Cylinder][rng.index(3)];
    let offset = rng.uniform() < 0.25;
    let mut p = match kind {
        ShapeKind::Sphere => Primitive::sphere(rng.uniform_range(2.5, 6.0) * s),
        ShapeKind::Cube => Primitive::cube(rng.uniform_range(2.0, 5.2) * s),
        ShapeKind::Cylinder => {
            Primitive::cylinder(rng.uniform_range(1.8, 5.5) * s, rng.uniform_range(1.0, 7.0) * s)
        }
    };
    if offset {
        // Shrink until the shifted primitive still fits inside the grid.
        let max_r = 0.5 * n as f64 - 3.2 * s;
        p.radius = p.radius.min(max_r);
        let theta = rng.uniform_range(0.0, core::f64::consts::TAU);
        let mag = rng.uniform_range(2.0, 3.0) * s;
        p.center = [mag * libm::cos(theta), 0.0, mag * libm::sin(theta)];
    }
    if kind != ShapeKind::Cylinder && p.radius >= 4.0 * s && rng.uniform() < 0.15 {
        p.shell = Some(1.5 * s);
    }
    p
}

/// Tags that truthfully describe `p` rendered on an `n`-grid.
pub fn describe(p: &Primitive, n: usize) -> Vec<&'static str> {
    let occ = p.occupancy(n);
    let [ex, ey, ez] = occupied_extent(&occ, n);
    let horiz = ex.max(ez) as f64;
    let mut tags = vec![p.kind.tag()];
    let largest = ex.max(ey).max(ez) as f64;
    if largest <= 0.4 * n as f64 {
        tags.push("small");
    } else if largest >= 0.625 * n as f64 {
        tags.push("large");
    }
    if p.kind == ShapeKind::Cylinder {
        if ey as f64 <= n as f64 / 4.0 {
            tags.push("flat");
        } else if ey as f64 >= 1.5 * horiz {
            tags.push("tall");
        } else if horiz >= 1.5 * ey as f64 {
            tags.push("wide");
        }
    }
    if p.shell.is_some() {
        tags.push("hollow");
    }
    let c = p.center;
    if libm::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) >= 1.5 {
        tags.push("offset");
    }
    tags
}

/// Deterministic corpus of `spec.count` captioned primitives.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusEntry>> {
    if spec.count == 0 || spec.n_views == 0 || spec.grid_size < 4 {
        return Err(Error::argument("corpus", format!("{spec:?}")));
    }
    let views = View::ring(spec.n_views, spec.image_size);
    let root = RngStream::new(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let mut rng = root.fork(index as u64);
        let primitive = sample_primitive(&mut rng, spec.grid_size);
        let paint = [Paint::Red, Paint::Green, Paint::Blue][rng.index(3)];
        let mut tags = describe(&primitive, spec.grid_size);
        tags.push(paint.tag());
        let scene = primitive.to_scene(spec.grid_size, paint.rgb());
        let renders = render_views(&scene, &views);
        out.push(CorpusEntry { index, primitive, paint, tags, scene, renders });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        let v = ConceptVocabulary::default();
        for (i, a) in v.tags().iter().enumerate() {
            for (j, b) in v.tags().iter().enumerate() {
                let d: f64 = v.basis(a).unwrap().iter().zip(v.basis(b).unwrap()).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encode_cases() {
        let v = ConceptVocabulary::default();
        assert_eq!(v.encode::<&str>(&[]).unwrap(), vec![0.0; EMBED_DIM]);
        assert_eq!(v.encode(&["sphere"]).unwrap(), v.basis("sphere").unwrap());
        let e = v.encode(&["sphere", "tall"]).unwrap();
        let d: f64 = e.iter().zip(v.basis("cube").unwrap()).map(|(a, b)| a * b).sum();
        assert!(d.abs() < 1e-10);
        assert_eq!(v.encode(&["bogus"]), Err(Error::UnknownTag("bogus".into())));
    }

    #[test]
    fn blur_preserves_range() {
        let n = 5;
        let grid: Vec<f64> = (0..n * n * n).map(|i| (i % 2) as f64).collect();
        assert!(blur(&grid, n).iter().all(|v| (0.0..=1.0).contains(v)));
        let ones = vec![1.0; n * n * n];
        let b = blur(&ones, n);
        assert_eq!(b[(2 * n + 2) * n + 2], 1.0);
        assert_eq!(b[0], 0.75 * 0.75 * 0.75);
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = CorpusSpec { count: 12, ..CorpusSpec::default() };
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    }
}
