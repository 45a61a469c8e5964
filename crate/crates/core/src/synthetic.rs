//! Procedural pedestrians with exact part masks.
//!
//! Figures are drawn from eight body atoms (head, torso, two arms, two legs,
//! two feet) laid out top to bottom. With `K = 8` every atom is its own part;
//! with `K = 5` left/right atoms share a label. "Right" means the person's
//! right, which appears on the image's left.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DropError, Result};
use crate::registry::Registry;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "meta.json";
/// Column order of the manifest.
pub const MANIFEST_COLUMNS: [&str; 6] = ["image", "mask", "identity", "camera", "split", "occluded"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    /// Per identity; taken after the training images.
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub num_parts: usize,
    /// Occlusion rate of training and gallery images.
    pub occlusion_prob: f64,
    /// Occlusion rate of query images.
    pub query_occlusion_prob: f64,
    pub occluder_kind: String,
    /// Minimum RGB distance between identities over upper-body parts.
    pub color_separation: f64,
    pub max_color_attempts: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            images_per_identity: 40,
            query_per_identity: 6,
            gallery_per_identity: 6,
            height: 128,
            width: 64,
            num_parts: 8,
            occlusion_prob: 0.3,
            query_occlusion_prob: 1.0,
            occluder_kind: "box".into(),
            color_separation: 0.4,
            max_color_attempts: 20_000,
            rng_seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_parts != 5 && self.num_parts != 8 {
            return Err(DropError::Config(format!("num_parts must be 5 or 8, got {}", self.num_parts)));
        }
        if self.n_identities < 2 {
            return Err(DropError::Config("need at least two identities".into()));
        }
        if self.query_per_identity + self.gallery_per_identity >= self.images_per_identity {
            return Err(DropError::Config("no training images left per identity".into()));
        }
        if self.height < 16 || self.width < 8 {
            return Err(DropError::Config("image too small".into()));
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("query_occlusion_prob", self.query_occlusion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DropError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        occluders().check(&self.occluder_kind)
    }

    pub fn train_per_identity(&self) -> usize {
        self.images_per_identity - self.query_per_identity - self.gallery_per_identity
    }
}

/// Label of each atom for `k` parts.
pub fn atom_labels(k: usize) -> [u8; 8] {
    match k {
        5 => [1, 2, 3, 3, 4, 4, 5, 5],
        _ => [1, 2, 3, 4, 5, 6, 7, 8],
    }
}

pub fn part_names(k: usize) -> Vec<&'static str> {
    match k {
        5 => vec!["head", "torso", "arms", "legs", "feet"],
        _ => vec![
            "head",
            "torso",
            "right_arm",
            "left_arm",
            "right_leg",
            "left_leg",
            "right_foot",
            "left_foot",
        ],
    }
}

/// `map[label]` is the label after a horizontal flip.
pub fn flip_label_map(k: usize) -> Vec<u8> {
    let mut map: Vec<u8> = (0..=k as u8).collect();
    if k == 8 {
        for (a, b) in [(3, 4), (5, 6), (7, 8)] {
            map[a] = b as u8;
            map[b] = a as u8;
        }
    }
    map
}

/// Labels that stay above any occluder (head, torso, arms).
fn upper_labels(k: usize) -> Vec<usize> {
    match k {
        5 => vec![1, 2, 3],
        _ => vec![1, 2, 3, 4],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartStyle {
    pub color: [f32; 3],
    pub stripe_freq: f32,
    pub stripe_amp: f32,
    pub vertical: bool,
    pub phase: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityAppearance {
    pub index: usize,
    /// Indexed by label - 1.
    pub parts: Vec<PartStyle>,
    /// Horizontal body scale.
    pub build: f32,
    pub head_scale: f32,
}

impl IdentityAppearance {
    /// Largest color difference over the upper-body parts.
    pub fn distance(&self, other: &IdentityAppearance) -> f64 {
        upper_labels(self.parts.len())
            .iter()
            .map(|&l| color_distance(self.parts[l - 1].color, other.parts[l - 1].color))
            .fold(0.0, f64::max)
    }
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| f64::from(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn random_appearance(rng: &mut ChaCha8Rng, index: usize, k: usize) -> IdentityAppearance {
    let parts = (0..k)
        .map(|_| PartStyle {
            color: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
            stripe_freq: rng.random_range(1.0..4.0),
            stripe_amp: rng.random_range(0.0..0.15),
            vertical: rng.random_bool(0.5),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
        })
        .collect();
    IdentityAppearance {
        index,
        parts,
        build: rng.random_range(0.9..1.1),
        head_scale: rng.random_range(0.9..1.1),
    }
}

/// Appearances for every identity by rejection sampling against the
/// separation floor.
pub fn generate_identities(config: &SyntheticConfig) -> Result<Vec<IdentityAppearance>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.rng_seed, 0x1d, 0));
    let mut out: Vec<IdentityAppearance> = Vec::with_capacity(config.n_identities);
    for index in 0..config.n_identities {
        let mut found = None;
        for _ in 0..config.max_color_attempts {
            let cand = random_appearance(&mut rng, index, config.num_parts);
            if out.iter().all(|o| o.distance(&cand) >= config.color_separation) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(a) => out.push(a),
            None => {
                return Err(DropError::Config(format!(
                    "could not place identity {index} at color separation {} within {} attempts",
                    config.color_separation, config.max_color_attempts
                )))
            }
        }
    }
    Ok(out)
}

pub fn generate_identity(config: &SyntheticConfig, index: usize) -> Result<IdentityAppearance> {
    generate_identities(config)?
        .into_iter()
        .nth(index)
        .ok_or_else(|| DropError::Config(format!("identity {index} out of range")))
}

/// Per-sample geometry perturbation in image fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub dx: f32,
    pub dy: f32,
    pub arm_swing: f32,
    pub stance: f32,
}

impl Pose {
    pub const NEUTRAL: Pose = Pose {
        dx: 0.0,
        dy: 0.0,
        arm_swing: 0.0,
        stance: 0.0,
    };

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: rng.random_range(-0.06..0.06),
            dy: rng.random_range(-0.03..0.03),
            arm_swing: rng.random_range(-0.03..0.03),
            stance: rng.random_range(-0.03..0.03),
        }
    }
}

/// Float RGB canvas with a label plane, row-major `H x W`.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<[f32; 3]>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

impl Canvas {
    pub fn new(height: usize, width: usize, fill: [f32; 3]) -> Self {
        Self {
            height,
            width,
            rgb: vec![fill; height * width],
            labels: vec![0; height * width],
        }
    }

    /// Fills the box `[x0, x1) x [y0, y1)` (image fractions); `paint` gets
    /// local coordinates in `[0, 1]`.
    fn fill(
        &mut self,
        shape: Shape,
        (x0, y0, x1, y1): (f32, f32, f32, f32),
        label: u8,
        paint: impl Fn(f32, f32) -> [f32; 3],
    ) {
        let (h, w) = (self.height as f32, self.width as f32);
        for r in 0..self.height {
            let y = (r as f32 + 0.5) / h;
            if y < y0 || y >= y1 {
                continue;
            }
            let v = (y - y0) / (y1 - y0);
            for c in 0..self.width {
                let x = (c as f32 + 0.5) / w;
                if x < x0 || x >= x1 {
                    continue;
                }
                let u = (x - x0) / (x1 - x0);
                if let Shape::Ellipse = shape {
                    if (u - 0.5).powi(2) + (v - 0.5).powi(2) > 0.25 {
                        continue;
                    }
                }
                let i = r * self.width + c;
                self.rgb[i] = paint(u, v);
                self.labels[i] = label;
            }
        }
    }

    /// Covers every pixel at or below row fraction `top` with a flat color.
    pub fn fill_below(&mut self, top: f32, color: [f32; 3], rng: &mut ChaCha8Rng) {
        let h = self.height as f32;
        for r in 0..self.height {
            if (r as f32 + 0.5) / h < top {
                continue;
            }
            for c in 0..self.width {
                let i = r * self.width + c;
                let n = rng.random_range(-0.04f32..0.04);
                self.rgb[i] = color.map(|v| (v + n).clamp(0.0, 1.0));
                self.labels[i] = 0;
            }
        }
    }

    /// Draws a figure. With `label_as` set every pixel gets that label.
    pub fn draw_figure(&mut self, who: &IdentityAppearance, pose: Pose, label_as: Option<u8>) {
        let k = who.parts.len();
        let labels = atom_labels(k);
        let b = who.build;
        let cx = 0.5 + pose.dx;
        let dy = pose.dy;
        let arm_x = 0.21 * b;
        let atoms: [(Shape, (f32, f32, f32, f32)); 8] = [
            (Shape::Ellipse, {
                let ry = 0.075 * who.head_scale;
                let rx = 0.14 * who.head_scale;
                (cx - rx, 0.11 + dy - ry, cx + rx, 0.11 + dy + ry)
            }),
            (Shape::Rect, (cx - 0.19 * b, 0.19 + dy, cx + 0.19 * b, 0.56 + dy)),
            (
                Shape::Rect,
                (cx - arm_x - 0.1 - pose.arm_swing, 0.2 + dy, cx - arm_x + 0.015, 0.52 + dy),
            ),
            (
                Shape::Rect,
                (cx + arm_x - 0.015, 0.2 + dy, cx + arm_x + 0.1 + pose.arm_swing, 0.52 + dy),
            ),
            (
                Shape::Rect,
                (cx - 0.17 * b - pose.stance, 0.56 + dy, cx - 0.01, 0.86 + dy),
            ),
            (
                Shape::Rect,
                (cx + 0.01, 0.56 + dy, cx + 0.17 * b + pose.stance, 0.86 + dy),
            ),
            (
                Shape::Rect,
                (cx - 0.22 * b - pose.stance, 0.86 + dy, cx - 0.01, 0.94 + dy),
            ),
            (
                Shape::Rect,
                (cx + 0.01, 0.86 + dy, cx + 0.22 * b + pose.stance, 0.94 + dy),
            ),
        ];
        // Back to front: legs and feet, torso, arms, head.
        for atom in [4, 5, 6, 7, 1, 2, 3, 0] {
            let (shape, bounds) = atoms[atom];
            let label = labels[atom];
            let style = who.parts[label as usize - 1].clone();
            self.fill(shape, bounds, label_as.unwrap_or(label), move |u, v| {
                let t = if style.vertical { u } else { v };
                let m = 1.0 + style.stripe_amp * (std::f32::consts::TAU * style.stripe_freq * t + style.phase).sin();
                style.color.map(|c| (c * m).clamp(0.0, 1.0))
            });
        }
    }

    fn apply_camera(&mut self, camera: u32) {
        let (brightness, contrast) = camera_transform(camera);
        for p in &mut self.rgb {
            *p = p.map(|v| ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0));
        }
    }

    fn into_sample(self, identity: usize, camera: u32, occluded: bool, split: Split) -> Sample {
        let n = self.height * self.width;
        let mut image = vec![0u8; 3 * n];
        for (i, p) in self.rgb.iter().enumerate() {
            for ch in 0..3 {
                image[ch * n + i] = (p[ch] * 255.0).round() as u8;
            }
        }
        Sample {
            image,
            mask: self.labels,
            height: self.height,
            width: self.width,
            identity,
            camera,
            occluded,
            split,
        }
    }
}

/// `(brightness offset, contrast factor)` of each virtual camera.
pub fn camera_transform(camera: u32) -> (f32, f32) {
    match camera {
        0 => (0.0, 1.0),
        _ => (0.08, 0.85),
    }
}

pub trait Occluder: Send + Sync {
    fn name(&self) -> &'static str;
    /// Paints over the lower body; occluder pixels must be labelled background.
    fn apply(&self, canvas: &mut Canvas, rng: &mut ChaCha8Rng, num_parts: usize);
}

/// Full-width block from mid-body down to the bottom edge.
pub struct BoxOccluder;

impl Occluder for BoxOccluder {
    fn name(&self) -> &'static str {
        "box"
    }

    fn apply(&self, canvas: &mut Canvas, rng: &mut ChaCha8Rng, _num_parts: usize) {
        let top = rng.random_range(0.40..0.50);
        let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        canvas.fill_below(top, color, rng);
    }
}

/// Another pedestrian standing in front, shifted down over the legs.
pub struct SecondPersonOccluder;

impl Occluder for SecondPersonOccluder {
    fn name(&self) -> &'static str {
        "second_person"
    }

    fn apply(&self, canvas: &mut Canvas, rng: &mut ChaCha8Rng, num_parts: usize) {
        let mut other = random_appearance(rng, usize::MAX, num_parts);
        other.build = rng.random_range(1.2..1.4);
        let pose = Pose {
            dx: rng.random_range(-0.1..0.1),
            dy: rng.random_range(0.38..0.46),
            ..Pose::random(rng)
        };
        canvas.draw_figure(&other, pose, Some(0));
    }
}

pub fn occluders() -> Registry<dyn Occluder> {
    Registry::<dyn Occluder>::new("occluder")
        .with("box", |_| Ok(Box::new(BoxOccluder)))
        .with("second_person", |_| Ok(Box::new(SecondPersonOccluder)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(DropError::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// One image: planar RGB `[3, H, W]` and an `H x W` label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub identity: usize,
    pub camera: u32,
    pub occluded: bool,
    pub split: Split,
}

impl Sample {
    /// Whether each part label `1..=k` appears in the mask.
    pub fn part_presence(&self, k: usize) -> Vec<bool> {
        let mut seen = vec![false; k + 1];
        for &l in &self.mask {
            if (l as usize) <= k {
                seen[l as usize] = true;
            }
        }
        seen[1..].to_vec()
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let n = self.height * self.width;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([self.image[i], self.image[n + i], self.image[2 * n + i]])
        })
    }
}

/// Occlusion draw for [`render_sample`].
#[derive(Clone, Copy)]
pub struct Occlusion<'a> {
    pub occluder: &'a dyn Occluder,
}

pub fn render_sample(
    who: &IdentityAppearance,
    pose: Pose,
    occlusion: Option<Occlusion<'_>>,
    camera: u32,
    split: Split,
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let bg = {
        let g = rng.random_range(0.25..0.75f32);
        [g + rng.random_range(-0.08..0.08), g + rng.random_range(-0.08..0.08), g + rng.random_range(-0.08..0.08)]
    };
    let mut canvas = Canvas::new(config.height, config.width, bg);
    for p in &mut canvas.rgb {
        let n = rng.random_range(-0.05f32..0.05);
        *p = p.map(|v| (v + n).clamp(0.0, 1.0));
    }
    canvas.draw_figure(who, pose, None);
    if let Some(o) = occlusion {
        o.occluder.apply(&mut canvas, rng, config.num_parts);
    }
    canvas.apply_camera(camera);
    canvas.into_sample(who.index, camera, occlusion.is_some(), split)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 10,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

/// Mirrors image and mask, swapping left/right labels.
pub fn flip_horizontal(sample: &Sample, k: usize) -> Sample {
    let map = flip_label_map(k);
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for r in 0..h {
        for c in 0..w {
            let src = r * w + (w - 1 - c);
            let dst = r * w + c;
            out.mask[dst] = map[sample.mask[src] as usize];
            for ch in 0..3 {
                out.image[ch * h * w + dst] = sample.image[ch * h * w + src];
            }
        }
    }
    out
}

/// Zero-pads by `pad` on every side then crops the original size at
/// offset `(top, left)` of the padded image.
pub fn pad_crop(sample: &Sample, pad: usize, top: usize, left: usize) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for r in 0..h {
        for c in 0..w {
            let sr = (r + top) as isize - pad as isize;
            let sc = (c + left) as isize - pad as isize;
            let dst = r * w + c;
            let inside = sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w;
            let src = if inside { Some(sr as usize * w + sc as usize) } else { None };
            out.mask[dst] = src.map_or(0, |s| sample.mask[s]);
            for ch in 0..3 {
                out.image[ch * h * w + dst] = src.map_or(0, |s| sample.image[ch * h * w + s]);
            }
        }
    }
    out
}

/// Fills rows `r0..r1`, columns `c0..c1` with noise and marks it background.
pub fn erase(sample: &mut Sample, (r0, r1): (usize, usize), (c0, c1): (usize, usize), rng: &mut ChaCha8Rng) {
    let (h, w) = (sample.height, sample.width);
    for r in r0..r1.min(h) {
        for c in c0..c1.min(w) {
            sample.mask[r * w + c] = 0;
            for ch in 0..3 {
                sample.image[ch * h * w + r * w + c] = rng.random();
            }
        }
    }
}

pub fn augment(sample: &Sample, k: usize, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = if rng.random_bool(cfg.flip_prob) {
        flip_horizontal(sample, k)
    } else {
        sample.clone()
    };
    if cfg.pad > 0 {
        let top = rng.random_range(0..=2 * cfg.pad);
        let left = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, cfg.pad, top, left);
    }
    if rng.random_bool(cfg.erase_prob) {
        let (h, w) = (out.height as f64, out.width as f64);
        for _ in 0..100 {
            let area = rng.random_range(cfg.erase_area.0..cfg.erase_area.1) * h * w;
            let aspect = rng.random_range(cfg.erase_aspect.0..cfg.erase_aspect.1);
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            if eh > 0 && ew > 0 && eh < out.height && ew < out.width {
                let r0 = rng.random_range(0..out.height - eh);
                let c0 = rng.random_range(0..out.width - ew);
                erase(&mut out, (r0, r0 + eh), (c0, c0 + ew), rng);
                break;
            }
        }
    }
    out
}

/// Majority label of each `H/h x W/w` cell; ties go to the lower label.
pub fn downsample_mask(mask: &[u8], height: usize, width: usize, h: usize, w: usize, num_labels: usize) -> Vec<u8> {
    let (sy, sx) = (height / h, width / w);
    let mut out = vec![0u8; h * w];
    let mut counts = vec![0usize; num_labels];
    for r in 0..h {
        for c in 0..w {
            counts.iter_mut().for_each(|x| *x = 0);
            for y in r * sy..(r + 1) * sy {
                for x in c * sx..(c + 1) * sx {
                    let l = mask[y * width + x] as usize;
                    if l < num_labels {
                        counts[l] += 1;
                    }
                }
            }
            let mut best = 0;
            for (l, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = l;
                }
            }
            out[r * w + c] = best as u8;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: SyntheticConfig,
    part_names: Vec<String>,
    flip_map: Vec<u8>,
    columns: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image: String,
    mask: String,
    identity: usize,
    camera: u32,
    split: String,
    occluded: u8,
}

impl Dataset {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        let identities = generate_identities(config)?;
        let occluder = occluders().create(&config.occluder_kind, &())?;
        let n_train = config.train_per_identity();
        let mut samples = Vec::with_capacity(config.n_identities * config.images_per_identity);
        for who in &identities {
            for j in 0..config.images_per_identity {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(config.rng_seed, who.index as u64 + 1, j as u64 + 1));
                let (split, camera, p_occ) = if j < n_train {
                    (Split::Train, rng.random_range(0..2u32), config.occlusion_prob)
                } else if j < n_train + config.query_per_identity {
                    (Split::Query, 0, config.query_occlusion_prob)
                } else {
                    (Split::Gallery, 1, config.occlusion_prob)
                };
                let occlusion = rng.random_bool(p_occ).then_some(Occlusion {
                    occluder: occluder.as_ref(),
                });
                let pose = Pose::random(&mut rng);
                samples.push(render_sample(who, pose, occlusion, camera, split, config, &mut rng));
            }
        }
        Ok(Self {
            config: config.clone(),
            samples,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.config.num_parts
    }

    pub fn num_identities(&self) -> usize {
        self.config.n_identities
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut wtr = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
        for (i, s) in self.samples.iter().enumerate() {
            let image = format!("images/{i:06}.png");
            let mask = format!("masks/{i:06}.png");
            s.to_rgb_image().save(dir.join(&image))?;
            GrayImage::from_raw(s.width as u32, s.height as u32, s.mask.clone())
                .ok_or_else(|| DropError::Internal("mask buffer size".into()))?
                .save(dir.join(&mask))?;
            wtr.serialize(ManifestRow {
                image,
                mask,
                identity: s.identity,
                camera: s.camera,
                split: s.split.as_str().into(),
                occluded: s.occluded as u8,
            })?;
        }
        wtr.flush()?;
        let meta = Meta {
            config: self.config.clone(),
            part_names: part_names(self.config.num_parts).into_iter().map(String::from).collect(),
            flip_map: flip_label_map(self.config.num_parts),
            columns: MANIFEST_COLUMNS.iter().map(|s| s.to_string()).collect(),
        };
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        let mut rdr = csv::Reader::from_path(dir.join(MANIFEST_FILE))?;
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if headers != MANIFEST_COLUMNS {
            return Err(DropError::Format(format!("unexpected manifest columns {headers:?}")));
        }
        let mut samples = Vec::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row?;
            let rgb = image::open(dir.join(&row.image))?.to_rgb8();
            let mask = image::open(dir.join(&row.mask))?.to_luma8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            if mask.dimensions() != rgb.dimensions() {
                return Err(DropError::Format(format!("mask size differs for {}", row.image)));
            }
            let n = w * h;
            let mut planar = vec![0u8; 3 * n];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    planar[ch * n + i] = p[ch];
                }
            }
            let mask = mask.into_raw();
            if let Some(bad) = mask.iter().find(|&&l| l as usize > meta.config.num_parts) {
                return Err(DropError::LabelOutOfRange {
                    label: *bad as usize,
                    classes: meta.config.num_parts + 1,
                });
            }
            samples.push(Sample {
                image: planar,
                mask,
                height: h,
                width: w,
                identity: row.identity,
                camera: row.camera,
                occluded: row.occluded != 0,
                split: Split::parse(&row.split)?,
            });
        }
        Ok(Self {
            config: meta.config,
            samples,
        })
    }
}
