//! Voxel scene and the orthographic alpha-compositing renderer.
//!
//! Grids are indexed `(x, y, z)` with `y` pointing up; flat index
//! `(x * n + y) * n + z`, colors interleaved RGB. A view at azimuth `a`
//! samples the grid at ray points rotated by `a` about the vertical axis
//! through the grid centre, with trilinear interpolation, and composites
//! front to back with per-sample opacity `density / n`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{CustomBackward, Tape, TensorValue, Var};

/// Editable object: density (geometry) and RGB color (texture) grids.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    n: usize,
    density: TensorValue,
    color: TensorValue,
}

impl VoxelScene {
    /// Empty scene with a mid-grey color grid.
    pub fn empty(n: usize) -> Self {
        assert!(n > 0);
        Self {
            n,
            density: TensorValue::zeros(&[n, n, n]),
            color: TensorValue::filled(&[n, n, n, 3], 0.5),
        }
    }

    pub fn from_parts(density: TensorValue, color: TensorValue) -> Result<Self> {
        let n = density.shape()[0];
        if density.shape() != [n, n, n] || color.shape() != [n, n, n, 3] {
            return Err(Error::shape(
                "scene",
                format!("density {:?}, color {:?}", density.shape(), color.shape()),
            ));
        }
        let mut s = Self { n, density, color };
        s.clamp();
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn density(&self) -> &TensorValue {
        &self.density
    }

    pub fn color(&self) -> &TensorValue {
        &self.color
    }

    pub fn density_mut(&mut self) -> &mut TensorValue {
        &mut self.density
    }

    pub fn color_mut(&mut self) -> &mut TensorValue {
        &mut self.color
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.n + y) * self.n + z
    }

    /// Clamps every entry into `[0, 1]`.
    pub fn clamp(&mut self) {
        self.density.clamp_in_place(0.0, 1.0);
        self.color.clamp_in_place(0.0, 1.0);
    }

    /// Paints the whole color grid with one RGB value.
    pub fn fill_color(&mut self, rgb: [f64; 3]) {
        for (i, v) in self.color.data_mut().iter_mut().enumerate() {
            *v = rgb[i % 3];
        }
    }

    /// The scene turned by `degrees` about the vertical axis, resampled
    /// trilinearly, so that rendering the result at `a - degrees` matches
    /// rendering `self` at `a`.
    pub fn rotated(&self, degrees: f64) -> Self {
        let n = self.n;
        let (s, c) = sin_cos_deg(degrees);
        let centre = (n as f64 - 1.0) / 2.0;
        let mut out = Self::empty(n);
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let (u, w) = (x as f64 - centre, z as f64 - centre);
                    let gx = c * u + s * w + centre;
                    let gz = -s * u + c * w + centre;
                    let taps = trilinear_taps(n, gx, y as f64, gz);
                    let dst = out.index(x, y, z);
                    let mut d = 0.0;
                    let mut rgb = [0.0; 3];
                    for &(i, wt) in taps.iter().filter(|t| t.1 != 0.0) {
                        let i = i as usize;
                        d += wt * self.density.data()[i];
                        for ch in 0..3 {
                            rgb[ch] += wt * self.color.data()[i * 3 + ch];
                        }
                    }
                    out.density.data_mut()[dst] = d;
                    out.color.data_mut()[dst * 3..dst * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
        out.clamp();
        out
    }
}

/// Camera placement: azimuth in degrees, elevation fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    azimuth: f64,
    image_size: usize,
}

/// Maps any angle into `[-180, 180)`.
pub fn normalize_azimuth(degrees: f64) -> f64 {
    let r = libm::fmod(degrees + 180.0, 360.0);
    let a = if r < 0.0 { r + 360.0 } else { r } - 180.0;
    if a >= 180.0 { a - 360.0 } else { a }
}

// Exact at multiples of 90 degrees so that quarter turns are permutations.
fn sin_cos_deg(degrees: f64) -> (f64, f64) {
    let a = normalize_azimuth(degrees);
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == 90.0 {
        (1.0, 0.0)
    } else if a == -90.0 {
        (-1.0, 0.0)
    } else if a == -180.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (libm::sin(r), libm::cos(r))
    }
}

impl View {
    pub fn new(azimuth: f64, image_size: usize) -> Result<Self> {
        if !azimuth.is_finite() || image_size == 0 {
            return Err(Error::argument("view", format!("azimuth {azimuth}, size {image_size}")));
        }
        Ok(Self { azimuth: normalize_azimuth(azimuth), image_size })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        0.0
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// `count` evenly spaced azimuths starting at 0.
    pub fn ring(count: usize, image_size: usize) -> Vec<View> {
        (0..count)
            .map(|i| View::new(360.0 * i as f64 / count as f64, image_size).expect("finite azimuth"))
            .collect()
    }
}

type Taps = [(u32, f64); 8];

fn trilinear_taps(n: usize, gx: f64, gy: f64, gz: f64) -> Taps {
    let mut taps = [(0u32, 0.0f64); 8];
    let (x0, y0, z0) = (libm::floor(gx), libm::floor(gy), libm::floor(gz));
    let (fx, fy, fz) = (gx - x0, gy - y0, gz - z0);
    let mut k = 0;
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let w = (if dx == 1 { fx } else { 1.0 - fx })
                    * (if dy == 1 { fy } else { 1.0 - fy })
                    * (if dz == 1 { fz } else { 1.0 - fz });
                let (x, y, z) = (x0 as i64 + dx, y0 as i64 + dy, z0 as i64 + dz);
                let inside = |c: i64| c >= 0 && c < n as i64;
                if w != 0.0 && inside(x) && inside(y) && inside(z) {
                    taps[k] = ((((x as usize) * n + y as usize) * n + z as usize) as u32, w);
                }
                k += 1;
            }
        }
    }
    taps
}

/// Trilinear sampling taps of every ray sample of one view: `m * m` pixels
/// times `n` depth samples, front to back.
struct RayPlan {
    n: usize,
    m: usize,
    taps: Vec<Taps>,
}

impl RayPlan {
    fn new(n: usize, view: &View) -> Self {
        let m = view.image_size;
        let (s, c) = sin_cos_deg(view.azimuth);
        let centre = (n as f64 - 1.0) / 2.0;
        let scale = n as f64 / m as f64;
        let half = n as f64 / 2.0;
        let mut taps = Vec::with_capacity(m * m * n);
        for py in 0..m {
            let up = half - (py as f64 + 0.5) * scale;
            for px in 0..m {
                let u = (px as f64 + 0.5) * scale - half;
                for k in 0..n {
                    let w = k as f64 - centre;
                    let gx = c * u + s * w + centre;
                    let gz = -s * u + c * w + centre;
                    taps.push(trilinear_taps(n, gx, up + centre, gz));
                }
            }
        }
        Self { n, m, taps }
    }

    fn sample(&self, grid: &[f64]) -> Vec<f64> {
        self.taps.iter().map(|t| t.iter().map(|&(i, w)| w * grid[i as usize]).sum()).collect()
    }

    // Colors outside the grid are undefined rather than black, so the taps
    // that stay inside are renormalised.
    fn color_taps(&self) -> Vec<Taps> {
        self.taps
            .iter()
            .map(|t| {
                let total: f64 = t.iter().map(|p| p.1).sum();
                let mut out = *t;
                if total > 0.0 {
                    out.iter_mut().for_each(|p| p.1 /= total);
                }
                out
            })
            .collect()
    }

    fn opacity(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Scatters per-sample gradients back onto the grid (transpose of `sample`).
    fn scatter(&self, sample_grad: &[f64], grid_len: usize) -> Vec<f64> {
        let mut g = vec![0.0; grid_len];
        for (t, &sg) in self.taps.iter().zip(sample_grad) {
            if sg == 0.0 {
                continue;
            }
            for &(i, w) in t {
                g[i as usize] += w * sg;
            }
        }
        g
    }
}

/// Front-to-back compositing of per-sample values `v_k` against a background
/// value: `sum_k w_k v_k + T * background`, with `w_k = a_k prod_{j<k}(1-a_j)`.
/// Returns the composite and, per sample, `d composite / d a_k`.
fn composite_ray(alpha: &[f64], values: impl Fn(usize) -> f64, background: f64) -> (f64, Vec<f64>) {
    let len = alpha.len();
    // behind[k]: composite of the samples after k over the background.
    let mut behind = vec![0.0; len];
    let mut acc = background;
    for k in (0..len).rev() {
        behind[k] = acc;
        acc = alpha[k] * values(k) + (1.0 - alpha[k]) * acc;
    }
    let mut d_alpha = vec![0.0; len];
    let mut prefix = 1.0;
    for k in 0..len {
        d_alpha[k] = prefix * (values(k) - behind[k]);
        prefix *= 1.0 - alpha[k];
    }
    (acc, d_alpha)
}

#[derive(Clone, Copy)]
enum Channel {
    Intensity,
    Depth,
}

impl Channel {
    fn value(self, n: usize, k: usize) -> f64 {
        match self {
            Channel::Intensity => 1.0,
            Channel::Depth => (k as f64 + 0.5) / n as f64,
        }
    }

    fn background(self) -> f64 {
        match self {
            Channel::Intensity => 0.0,
            Channel::Depth => 1.0,
        }
    }
}

struct DensityBackward {
    plan: RayPlan,
    d_alpha: Vec<f64>,
    grid_len: usize,
}

impl CustomBackward for DensityBackward {
    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let n = self.plan.n;
        let delta = self.plan.opacity();
        let sample_grad: Vec<f64> =
            self.d_alpha.iter().enumerate().map(|(s, da)| out_grad[s / n] * da * delta).collect();
        vec![self.plan.scatter(&sample_grad, self.grid_len)]
    }
}

fn density_forward(n: usize, density: &[f64], view: &View, channel: Channel) -> (Vec<f64>, DensityBackward) {
    let plan = RayPlan::new(n, view);
    let delta = plan.opacity();
    let alpha: Vec<f64> = plan.sample(density).into_iter().map(|r| r * delta).collect();
    let mut image = Vec::with_capacity(plan.m * plan.m);
    let mut d_alpha = Vec::with_capacity(alpha.len());
    for ray in alpha.chunks(n) {
        let (v, d) = composite_ray(ray, |k| channel.value(n, k), channel.background());
        image.push(v);
        d_alpha.extend(d);
    }
    (image, DensityBackward { plan, d_alpha, grid_len: density.len() })
}

fn check_density(tape: &Tape, density: Var) -> Result<usize> {
    match tape.shape(density)? {
        [a, b, c] if a == b && b == c => Ok(*a),
        s => Err(Error::shape("render", format!("density shape {s:?}"))),
    }
}

/// Intensity image `1 - prod(1 - a_k)` per pixel, shape `[m, m]`.
pub fn render_intensity(scene: &VoxelScene, view: &View) -> TensorValue {
    let m = view.image_size;
    let (img, _) = density_forward(scene.n, scene.density.data(), view, Channel::Intensity);
    TensorValue::new(&[m, m], img).expect("image shape")
}

/// Expected termination depth per pixel in `[0, 1]`; transmittance left at
/// the back of the grid terminates on the far plane at depth 1.
pub fn render_depth(scene: &VoxelScene, view: &View) -> TensorValue {
    let m = view.image_size;
    let (img, _) = density_forward(scene.n, scene.density.data(), view, Channel::Depth);
    TensorValue::new(&[m, m], img).expect("image shape")
}

/// Composited RGB image over a black background, shape `[m, m, 3]`.
pub fn render_color(scene: &VoxelScene, view: &View) -> TensorValue {
    let (img, _) = color_forward(scene.n, scene.density.data(), scene.color.data(), view);
    let m = view.image_size;
    TensorValue::new(&[m, m, 3], img).expect("image shape")
}

/// [`render_intensity`] recorded on a tape, differentiable w.r.t. `density`.
pub fn record_intensity(tape: &mut Tape, density: Var, view: &View) -> Result<Var> {
    record_density(tape, density, view, Channel::Intensity)
}

/// [`render_depth`] recorded on a tape, differentiable w.r.t. `density`.
pub fn record_depth(tape: &mut Tape, density: Var, view: &View) -> Result<Var> {
    record_density(tape, density, view, Channel::Depth)
}

fn record_density(tape: &mut Tape, density: Var, view: &View, channel: Channel) -> Result<Var> {
    let n = check_density(tape, density)?;
    let (img, back) = density_forward(n, tape.value(density)?, view, channel);
    let m = view.image_size;
    tape.custom(&[density], img, &[m, m], Box::new(back))
}

struct ColorBackward {
    n: usize,
    taps: Vec<Taps>,
    weights: Vec<f64>,
    grid_len: usize,
}

impl CustomBackward for ColorBackward {
    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n;
        let mut g = vec![0.0; self.grid_len];
        for (s, taps) in self.taps.iter().enumerate() {
            let w = self.weights[s];
            if w == 0.0 {
                continue;
            }
            let pg = &out_grad[(s / n) * 3..(s / n) * 3 + 3];
            for &(i, tw) in taps {
                for ch in 0..3 {
                    g[i as usize * 3 + ch] += tw * w * pg[ch];
                }
            }
        }
        vec![g]
    }
}

fn color_forward(n: usize, density: &[f64], color: &[f64], view: &View) -> (Vec<f64>, ColorBackward) {
    let plan = RayPlan::new(n, view);
    let delta = plan.opacity();
    let alpha: Vec<f64> = plan.sample(density).into_iter().map(|r| r * delta).collect();
    let taps = plan.color_taps();
    let mut rgb = Vec::with_capacity(taps.len() * 3);
    for t in &taps {
        let mut px = [0.0; 3];
        for &(i, w) in t {
            for ch in 0..3 {
                px[ch] += w * color[i as usize * 3 + ch];
            }
        }
        rgb.extend_from_slice(&px);
    }
    let mut weights = Vec::with_capacity(alpha.len());
    for ray in alpha.chunks(n) {
        let mut prefix = 1.0;
        for &a in ray {
            weights.push(a * prefix);
            prefix *= 1.0 - a;
        }
    }
    let mut image = vec![0.0; plan.m * plan.m * 3];
    for (s, w) in weights.iter().enumerate() {
        let p = s / n;
        for ch in 0..3 {
            image[p * 3 + ch] += w * rgb[s * 3 + ch];
        }
    }
    (image, ColorBackward { n, taps, weights, grid_len: color.len() })
}

/// [`render_color`] recorded on a tape, differentiable w.r.t. `color`; the
/// density grid only supplies (constant) compositing weights.
pub fn record_color(tape: &mut Tape, color: Var, density: &TensorValue, view: &View) -> Result<Var> {
    let n = density.shape()[0];
    if tape.shape(color)? != [n, n, n, 3] {
        return Err(Error::shape("render_color", format!("color {:?}", tape.shape(color)?)));
    }
    let (img, back) = color_forward(n, density.data(), tape.value(color)?, view);
    let m = view.image_size;
    tape.custom(&[color], img, &[m, m, 3], Box::new(back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, RngStream};

    fn random_scene(n: usize, seed: u64) -> VoxelScene {
        let mut rng = RngStream::new(seed);
        let mut s = VoxelScene::empty(n);
        for v in s.density_mut().data_mut() {
            *v = rng.uniform();
        }
        for v in s.color_mut().data_mut() {
            *v = rng.uniform();
        }
        s
    }

    #[test]
    fn azimuth_normalisation() {
        assert_eq!(normalize_azimuth(180.0), -180.0);
        assert_eq!(normalize_azimuth(-180.0), -180.0);
        assert_eq!(normalize_azimuth(270.0), -90.0);
        assert_eq!(normalize_azimuth(-190.0), 170.0);
        assert_eq!(View::new(540.0, 4).unwrap().azimuth(), -180.0);
    }

    #[test]
    fn empty_scene_renders() {
        let s = VoxelScene::empty(6);
        let v = View::new(33.0, 6).unwrap();
        assert!(render_intensity(&s, &v).data().iter().all(|&p| p == 0.0));
        assert!(render_depth(&s, &v).data().iter().all(|&p| p == 1.0));
        assert!(render_color(&s, &v).data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn axial_voxel_is_symmetric_under_half_turn() {
        let mut s = VoxelScene::empty(9);
        let i = s.index(4, 4, 4);
        s.density_mut().data_mut()[i] = 1.0;
        let a = render_intensity(&s, &View::new(0.0, 9).unwrap());
        let b = render_intensity(&s, &View::new(180.0, 9).unwrap());
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&p| p > 0.0));
    }

    // Hand-enumerated rays over a 2x2x2 grid at azimuth 0, where every ray
    // sample hits exactly one voxel.
    #[test]
    fn two_voxel_grid_brute_force() {
        let s = random_scene(2, 3);
        let v = View::new(0.0, 2).unwrap();
        let int = render_intensity(&s, &v);
        let dep = render_depth(&s, &v);
        let col = render_color(&s, &v);
        let d = |x: usize, y: usize, z: usize| s.density().data()[(x * 2 + y) * 2 + z];
        for py in 0..2 {
            for px in 0..2 {
                let y = 1 - py;
                let (a0, a1) = (d(px, y, 0) / 2.0, d(px, y, 1) / 2.0);
                let expect_i = 1.0 - (1.0 - a0) * (1.0 - a1);
                let (w0, w1) = (a0, (1.0 - a0) * a1);
                let expect_d = w0 * 0.25 + w1 * 0.75 + (1.0 - a0) * (1.0 - a1);
                assert!((int.data()[py * 2 + px] - expect_i).abs() < 1e-15);
                assert!((dep.data()[py * 2 + px] - expect_d).abs() < 1e-15);
                for ch in 0..3 {
                    let c = |z: usize| s.color().data()[((px * 2 + y) * 2 + z) * 3 + ch];
                    let expect_c = w0 * c(0) + w1 * c(1);
                    assert!((col.data()[(py * 2 + px) * 3 + ch] - expect_c).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn front_slab_depth_is_constant() {
        let n = 8;
        let mut s = VoxelScene::empty(n);
        for x in 0..n {
            for y in 0..n {
                let i = s.index(x, y, 2);
                s.density_mut().data_mut()[i] = 1.0;
            }
        }
        let img = render_depth(&s, &View::new(0.0, n).unwrap());
        let a = 1.0 / n as f64;
        let expect = a * 2.5 / n as f64 + (1.0 - a);
        for &p in img.data() {
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn red_object_renders_red() {
        let mut s = random_scene(6, 9);
        s.fill_color([1.0, 0.0, 0.0]);
        let v = View::new(20.0, 6).unwrap();
        let int = render_intensity(&s, &v);
        let col = render_color(&s, &v);
        for (p, &i) in int.data().iter().enumerate() {
            assert!(i > 0.0);
            assert!((col.data()[p * 3] - i).abs() < 1e-12);
            assert_eq!(col.data()[p * 3 + 1], 0.0);
            assert_eq!(col.data()[p * 3 + 2], 0.0);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for seed in 0..4 {
            let s = random_scene(7, seed);
            for az in [-170.0, -33.0, 0.0, 61.0, 135.0] {
                let v = View::new(az, 5).unwrap();
                for img in [render_intensity(&s, &v), render_depth(&s, &v), render_color(&s, &v)] {
                    assert!(img.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
                }
            }
        }
    }

    #[test]
    fn quarter_turns_commute_with_view() {
        let s = random_scene(8, 4);
        for beta in [90.0, 180.0] {
            let r = s.rotated(beta);
            for alpha in [0.0, 30.0, -100.0] {
                let a = render_intensity(&s, &View::new(alpha, 8).unwrap());
                let b = render_intensity(&r, &View::new(alpha - beta, 8).unwrap());
                let mad = crate::numerics::vecops::mean_abs_diff(a.data(), b.data());
                assert!(mad < 2e-2, "beta {beta} alpha {alpha}: {mad}");
            }
        }
    }

    fn check_density_grad(channel: Channel, seed: u64) {
        let s = random_scene(4, seed);
        let view = View::new(37.0 + 50.0 * seed as f64, 4).unwrap();
        let weights: Vec<f64> = (0..16).map(|i| libm::sin(i as f64 + seed as f64)).collect();
        let mut tape = Tape::new();
        let d = tape.param(s.density());
        let img = record_density(&mut tape, d, &view, channel).unwrap();
        let loss = tape.weighted_sum(img, weights.clone()).unwrap();
        let g = tape.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let (img, _) = density_forward(4, t.data(), &view, channel);
                Ok(img.iter().zip(&weights).map(|(a, b)| a * b).sum())
            },
            s.density(),
            1e-4,
        )
        .unwrap();
        for (a, b) in g.get(d).unwrap().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-5 + 1e-3 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn intensity_and_depth_gradients_match_finite_differences() {
        for seed in 0..3 {
            check_density_grad(Channel::Intensity, seed);
            check_density_grad(Channel::Depth, seed);
        }
    }

    #[test]
    fn color_gradient_matches_finite_differences() {
        let s = random_scene(4, 12);
        let view = View::new(-71.0, 3).unwrap();
        let weights: Vec<f64> = (0..27).map(|i| libm::cos(i as f64)).collect();
        let mut tape = Tape::new();
        let c = tape.param(s.color());
        let img = record_color(&mut tape, c, s.density(), &view).unwrap();
        let loss = tape.weighted_sum(img, weights.clone()).unwrap();
        let g = tape.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let (img, _) = color_forward(4, s.density().data(), t.data(), &view);
                Ok(img.iter().zip(&weights).map(|(a, b)| a * b).sum())
            },
            s.color(),
            1e-4,
        )
        .unwrap();
        for (a, b) in g.get(c).unwrap().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-5 + 1e-3 * b.abs());
        }
    }
}
