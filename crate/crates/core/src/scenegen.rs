//! Procedural street-like scenes with exact ground truth.
//!
//! Stuff classes fill horizontal bands, things are ellipses and rectangles in
//! the lower part of the frame. Each class carries a sparse blob texture whose
//! blob width is tied to the class's `texture_freq`, so the band-pass encoder
//! responds most strongly to a class when the image is rescaled by roughly
//! that class's `optimal_scale`. Class identity is carried by chroma
//! (a per-class hue); texture and grain only touch luminance.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::prng::Prng;
use crate::raster::{ClassMap, CropRect, Label, Raster, IGNORE};

/// Blob-noise spatial frequency that the default encoder band sees best at
/// scale 1: a Gaussian blob of standard deviation `sqrt(2)` px maximizes the
/// centre response of the unit/two-pixel difference of Gaussians.
pub const MATCHED_TEXTURE_FREQ: f64 = 0.112_539_539_519_638_12; // 1 / (2π√2)

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("the profile set is empty")]
    EmptyProfiles,
    #[error("scene index {index} out of range (dataset has {len} scenes)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid profile {name}: {reason}")]
    InvalidProfile { name: String, reason: &'static str },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ClassKind {
    Stuff,
    Thing,
}

/// One semantic class of the synthetic world.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ClassProfile {
    pub id: Label,
    pub name: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub synonyms: Vec<String>,
    pub kind: ClassKind,
    /// Min/max object extent in pixels (things only).
    pub size_range: (u32, u32),
    /// Cycles per pixel of the interior blob texture.
    pub texture_freq: f64,
    /// Scale at which the simulated API segments this class best.
    pub optimal_scale: f64,
    pub confusable_with: Vec<Label>,
    /// Hue of the class colour, degrees.
    pub hue_deg: f64,
    /// Inclusive range of instances per scene (things only).
    #[cfg_attr(feature = "serde", serde(default))]
    pub instances: (u32, u32),
}

impl ClassProfile {
    pub fn is_stuff(&self) -> bool {
        self.kind == ClassKind::Stuff
    }
}

/// Rendering constants shared by every class.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Appearance {
    pub base_luminance: f64,
    /// Peak luminance of one texture blob.
    pub blob_amplitude: f64,
    /// Mean blob spacing inside things, in texture periods.
    pub blob_spacing_periods: f64,
    /// Mean blob spacing in stuff; sparser blobs keep stuff attention peaked.
    pub stuff_blob_spacing_periods: f64,
    /// Per-pixel luminance noise standard deviation.
    pub grain: f64,
    /// Distance of class colours from the grey axis.
    pub chroma_radius: f64,
    /// Per-pixel chroma noise standard deviation.
    pub chroma_noise: f64,
    /// Texture amplitude of stuff relative to things; below 1 makes things
    /// the salient structure.
    pub stuff_contrast: f64,
    /// Things are centred below this fraction of the image height.
    pub thing_top: f64,
    /// Instances of one thing class gather around a per-scene centre with
    /// this standard deviation, as a fraction of the image size. Zero places
    /// them uniformly.
    pub cluster_spread: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            base_luminance: 0.45,
            blob_amplitude: 0.25,
            blob_spacing_periods: 0.6,
            stuff_blob_spacing_periods: 1.8,
            grain: 0.05,
            chroma_radius: 0.12,
            chroma_noise: 0.03,
            stuff_contrast: 1.0,
            thing_top: 0.15,
            cluster_spread: 0.12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Corruption {
    #[default]
    None,
    /// Additive per-channel Gaussian noise.
    Noise,
    /// Global darkening.
    Dim,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub profiles: Vec<ClassProfile>,
    pub corruption: Corruption,
    pub corruption_strength: f64,
    pub appearance: Appearance,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_train: 400,
            n_val: 40,
            image_w: 256,
            image_h: 256,
            profiles: default_profiles(),
            corruption: Corruption::None,
            corruption_strength: 0.0,
            appearance: Appearance::default(),
        }
    }
}

impl DatasetConfig {
    pub fn len(&self) -> usize {
        self.n_train + self.n_val
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.profiles.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.profiles.is_empty() {
            return Err(SceneError::EmptyProfiles);
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(SceneError::InvalidConfig("n_train and n_val must be at least 1"));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(SceneError::InvalidConfig("image dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corruption_strength) {
            return Err(SceneError::InvalidConfig("corruption_strength must lie in [0, 1]"));
        }
        validate_profiles(&self.profiles, self.image_w.min(self.image_h))
    }
}

fn invalid(p: &ClassProfile, reason: &'static str) -> SceneError {
    SceneError::InvalidProfile { name: p.name.clone(), reason }
}

/// Structural checks on a profile set: dense distinct ids, distinct names,
/// confusable lists non-empty and free of self references.
pub fn validate_profiles(profiles: &[ClassProfile], max_extent: usize) -> Result<(), SceneError> {
    if profiles.is_empty() {
        return Err(SceneError::EmptyProfiles);
    }
    let k = profiles.len();
    for (i, p) in profiles.iter().enumerate() {
        if p.id as usize != i {
            return Err(invalid(p, "ids must be 0..K in order"));
        }
        if profiles[..i].iter().any(|q| q.name.eq_ignore_ascii_case(&p.name)) {
            return Err(invalid(p, "duplicate name"));
        }
        if p.confusable_with.is_empty() && k > 1 {
            return Err(invalid(p, "confusable_with is empty"));
        }
        if p.confusable_with.iter().any(|&c| c == p.id || c as usize >= k) {
            return Err(invalid(p, "confusable_with must reference other existing classes"));
        }
        if !(p.texture_freq > 0.0 && p.texture_freq < 0.5) {
            return Err(invalid(p, "texture_freq must lie in (0, 0.5)"));
        }
        if !(p.optimal_scale > 0.0) {
            return Err(invalid(p, "optimal_scale must be positive"));
        }
        if p.kind == ClassKind::Thing {
            let (lo, hi) = p.size_range;
            if lo == 0 || lo > hi || hi as usize > max_extent {
                return Err(invalid(p, "size_range must satisfy 1 <= min <= max <= image size"));
            }
            if p.instances.0 > p.instances.1 {
                return Err(invalid(p, "instances range is reversed"));
            }
        }
    }
    Ok(())
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// The default eight-class world: three stuff classes and five things of
/// decreasing size and increasing optimal scale.
pub fn default_profiles() -> Vec<ClassProfile> {
    let f = |scale: f64| MATCHED_TEXTURE_FREQ * scale;
    let stuff = |id: Label, name: &str, syn: &[&str], scale: f64, conf: &[Label], hue: f64| ClassProfile {
        id,
        name: name.to_string(),
        synonyms: names(syn),
        kind: ClassKind::Stuff,
        size_range: (0, 0),
        texture_freq: f(scale),
        optimal_scale: scale,
        confusable_with: conf.to_vec(),
        hue_deg: hue,
        instances: (0, 0),
    };
    #[allow(clippy::too_many_arguments)]
    let thing = |id: Label,
                 name: &str,
                 syn: &[&str],
                 scale: f64,
                 size: (u32, u32),
                 count: (u32, u32),
                 conf: &[Label],
                 hue: f64| ClassProfile {
        id,
        name: name.to_string(),
        synonyms: names(syn),
        kind: ClassKind::Thing,
        size_range: size,
        texture_freq: f(scale),
        optimal_scale: scale,
        confusable_with: conf.to_vec(),
        hue_deg: hue,
        instances: count,
    };
    vec![
        stuff(0, "sky", &["air", "clouds"], 0.5, &[1], 0.0),
        stuff(1, "wall", &["brick wall", "stone wall"], 0.5, &[0, 2], 45.0),
        stuff(2, "road", &["street", "highway"], 0.25, &[1, 0], 90.0),
        thing(3, "bus", &["shuttle", "minibus"], 0.75, (40, 64), (6, 9), &[4, 5], 135.0),
        thing(4, "car", &["automobile", "vehicle"], 1.0, (24, 48), (12, 18), &[3, 5], 180.0),
        thing(5, "person", &["pedestrian", "people"], 1.25, (16, 32), (24, 36), &[4, 6], 225.0),
        thing(6, "traffic sign", &["stop sign", "warning sign"], 1.75, (10, 20), (60, 90), &[7, 5], 270.0),
        thing(7, "pole", &["post", "pillar"], 2.0, (8, 16), (80, 120), &[6, 5], 315.0),
    ]
}

/// Thing classes whose optimal scales lie within this ratio of each other
/// share a cluster centre in every scene.
const CLUSTER_RATIO: f64 = 1.3;

/// Cluster group of every profile (`None` for stuff). Things are sorted by
/// optimal scale and neighbours closer than [`CLUSTER_RATIO`] are grouped.
pub fn cluster_groups(profiles: &[ClassProfile]) -> Vec<Option<usize>> {
    let mut things: Vec<usize> = (0..profiles.len()).filter(|&i| !profiles[i].is_stuff()).collect();
    things.sort_by(|&a, &b| profiles[a].optimal_scale.total_cmp(&profiles[b].optimal_scale).then(a.cmp(&b)));
    let mut out = vec![None; profiles.len()];
    let mut group = 0;
    for (n, &i) in things.iter().enumerate() {
        if n > 0 && profiles[i].optimal_scale >= CLUSTER_RATIO * profiles[things[n - 1]].optimal_scale {
            group += 1;
        }
        out[i] = Some(group);
    }
    out
}

/// Orthonormal basis of the plane orthogonal to the grey axis (1, 1, 1).
const CHROMA_U: [f64; 3] = [core::f64::consts::FRAC_1_SQRT_2, -core::f64::consts::FRAC_1_SQRT_2, 0.0];
const CHROMA_V: [f64; 3] = [0.408_248_290_463_863, 0.408_248_290_463_863, -0.816_496_580_927_726];

/// Chroma coordinates of an RGB triple.
#[inline]
pub fn chroma_of(rgb: [f64; 3]) -> (f64, f64) {
    let u = rgb[0] * CHROMA_U[0] + rgb[1] * CHROMA_U[1] + rgb[2] * CHROMA_U[2];
    let v = rgb[0] * CHROMA_V[0] + rgb[1] * CHROMA_V[1] + rgb[2] * CHROMA_V[2];
    (u, v)
}

/// Class colours in chroma coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub centers: Vec<(f64, f64)>,
    pub radius: f64,
}

impl Palette {
    pub fn new(profiles: &[ClassProfile], radius: f64) -> Self {
        let centers = profiles
            .iter()
            .map(|p| {
                let h = p.hue_deg.to_radians();
                (radius * math::cos(h), radius * math::sin(h))
            })
            .collect();
        Palette { centers, radius }
    }

    /// Nearest class colour, or IGNORE for (near-)grey input.
    pub fn classify(&self, u: f64, v: f64) -> Label {
        if u * u + v * v < (self.radius / 3.0) * (self.radius / 3.0) {
            return IGNORE;
        }
        let mut best = IGNORE;
        let mut best_d = f64::INFINITY;
        for (i, &(cu, cv)) in self.centers.iter().enumerate() {
            let d = (u - cu) * (u - cu) + (v - cv) * (v - cv);
            if d < best_d {
                best_d = d;
                best = i as Label;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Rect,
}

/// A placed thing instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: Label,
    pub shape: Shape,
    pub center: (f64, f64),
    pub extent: (u32, u32),
    /// Pixels of the rasterized shape before occlusion.
    pub footprint: usize,
    /// Pixels still showing this object after later objects were painted.
    pub visible: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster,
    pub truth: ClassMap,
    pub objects: Vec<SceneObject>,
}

const SCENE_STREAM: u64 = 0x5343_454e_4531;

/// Render scene `index` of the dataset; a pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &DatasetConfig, index: usize) -> Result<Scene, SceneError> {
    if cfg.profiles.is_empty() {
        return Err(SceneError::EmptyProfiles);
    }
    if index >= cfg.len() {
        return Err(SceneError::IndexOutOfRange { index, len: cfg.len() });
    }
    let (w, h) = (cfg.image_w, cfg.image_h);
    let look = &cfg.appearance;
    let mut rng = Prng::from_parts(&[cfg.seed, SCENE_STREAM, index as u64]);
    let mut truth = vec![IGNORE; w * h];
    let mut lum = vec![look.base_luminance; w * h];

    // Stuff bands, top to bottom in profile order.
    let stuff: Vec<&ClassProfile> = cfg.profiles.iter().filter(|p| p.is_stuff()).collect();
    if !stuff.is_empty() {
        let k = stuff.len();
        let mut edges = Vec::with_capacity(k + 1);
        edges.push(0usize);
        for i in 1..k {
            let jitter = rng.uniform(-0.3, 0.3);
            let y = math::round_half_up(h as f64 * (i as f64 + jitter) / k as f64) as usize;
            let prev = *edges.last().unwrap();
            edges.push(y.clamp(prev, h));
        }
        edges.push(h);
        for (band, p) in stuff.iter().enumerate() {
            let (y0, y1) = (edges[band], edges[band + 1]);
            if y0 == y1 {
                continue;
            }
            for t in &mut truth[y0 * w..y1 * w] {
                *t = p.id;
            }
            let tex = blob_texture(&mut rng, w, y1 - y0, p.texture_freq, look.stuff_blob_spacing_periods, look);
            for (l, t) in lum[y0 * w..y1 * w].iter_mut().zip(&tex) {
                *l += look.stuff_contrast * t;
            }
        }
    }

    // Things, in shuffled order; later instances occlude earlier ones.
    let y_top = math::floor(look.thing_top * h as f64) as usize;
    let mut queue: Vec<(&ClassProfile, (f64, f64))> = Vec::new();
    let groups = cluster_groups(&cfg.profiles);
    let centres: Vec<(f64, f64)> = (0..groups.iter().flatten().max().map_or(0, |g| g + 1))
        .map(|_| (rng.uniform(0.0, w as f64), rng.uniform(y_top as f64, h as f64)))
        .collect();
    for (p, g) in cfg.profiles.iter().zip(&groups) {
        let Some(g) = *g else { continue };
        let centre = centres[g];
        let n = rng.range_inclusive(p.instances.0 as u64, p.instances.1 as u64);
        for _ in 0..n {
            queue.push((p, centre));
        }
    }
    rng.shuffle(&mut queue);
    let mut owner = vec![u32::MAX; w * h];
    let mut objects = Vec::with_capacity(queue.len());
    for (obj_idx, &(p, centre)) in queue.iter().enumerate() {
        let (lo, hi) = p.size_range;
        let ew = (rng.range_inclusive(lo as u64, hi as u64) as usize).min(w);
        let eh = (rng.range_inclusive(lo as u64, hi as u64) as usize).min(h);
        let y_min = y_top.saturating_sub(eh / 2).min(h - eh);
        let (x0, y0) = if look.cluster_spread > 0.0 {
            let (a, b) = rng.normal_pair();
            let x = centre.0 + a * look.cluster_spread * w as f64 - ew as f64 / 2.0;
            let y = centre.1 + b * look.cluster_spread * h as f64 - eh as f64 / 2.0;
            (
                (math::round_half_up(x.max(0.0)) as usize).min(w - ew),
                (math::round_half_up(y.max(0.0)) as usize).clamp(y_min, h - eh),
            )
        } else {
            (rng.below((w - ew + 1) as u64) as usize, rng.range_inclusive(y_min as u64, (h - eh) as u64) as usize)
        };
        let shape = if rng.next_f64() < 0.5 { Shape::Ellipse } else { Shape::Rect };
        let cx = x0 as f64 + ew as f64 / 2.0;
        let cy = y0 as f64 + eh as f64 / 2.0;
        let tex = blob_texture(&mut rng, ew, eh, p.texture_freq, look.blob_spacing_periods, look);
        let mut footprint = 0;
        for yy in 0..eh {
            for xx in 0..ew {
                let inside = match shape {
                    Shape::Rect => true,
                    Shape::Ellipse => {
                        let dx = (xx as f64 + 0.5 - ew as f64 / 2.0) / (ew as f64 / 2.0);
                        let dy = (yy as f64 + 0.5 - eh as f64 / 2.0) / (eh as f64 / 2.0);
                        dx * dx + dy * dy <= 1.0
                    }
                };
                if inside {
                    let i = (y0 + yy) * w + x0 + xx;
                    truth[i] = p.id;
                    lum[i] = look.base_luminance + tex[yy * ew + xx];
                    owner[i] = obj_idx as u32;
                    footprint += 1;
                }
            }
        }
        objects.push(SceneObject {
            class: p.id,
            shape,
            center: (cx, cy),
            extent: (ew as u32, eh as u32),
            footprint,
            visible: 0,
        });
    }
    for &o in &owner {
        if o != u32::MAX {
            objects[o as usize].visible += 1;
        }
    }
    objects.retain(|o| o.visible > 0);

    // Luminance grain, then per-class colour with chroma noise.
    let palette = Palette::new(&cfg.profiles, look.chroma_radius);
    let mut values = vec![0.0; 3 * w * h];
    let plane = w * h;
    for i in 0..plane {
        let (g, _) = rng.normal_pair();
        let l = lum[i] + look.grain * g;
        let (nu, nv) = rng.normal_pair();
        let (u, v) = match truth[i] {
            IGNORE => (0.0, 0.0),
            c => {
                let (cu, cv) = palette.centers[c as usize];
                (cu + look.chroma_noise * nu, cv + look.chroma_noise * nv)
            }
        };
        for ch in 0..3 {
            values[ch * plane + i] = l + u * CHROMA_U[ch] + v * CHROMA_V[ch];
        }
    }

    match cfg.corruption {
        Corruption::None => {}
        Corruption::Noise => {
            let sd = 0.15 * cfg.corruption_strength;
            for pair in values.chunks_mut(2) {
                let (a, b) = rng.normal_pair();
                pair[0] += sd * a;
                if pair.len() > 1 {
                    pair[1] += sd * b;
                }
            }
        }
        Corruption::Dim => {
            let gain = 1.0 - 0.7 * cfg.corruption_strength;
            for v in &mut values {
                *v *= gain;
            }
        }
    }
    for v in &mut values {
        *v = quantize_u8(*v);
    }

    Ok(Scene {
        image: Raster::new(w, h, 3, values).expect("shape computed above"),
        truth: ClassMap::new(w, h, truth).expect("shape computed above"),
        objects,
    })
}

/// Clamp to [0, 1] and snap to the nearest multiple of 1/255, the precision
/// images are stored at.
#[inline]
pub fn quantize_u8(v: f64) -> f64 {
    math::round_half_up(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Sparse Gaussian blobs of standard deviation `1/(2πf)` spaced about
/// `blob_spacing_periods / f` apart, over a `w x h` region.
fn blob_texture(rng: &mut Prng, w: usize, h: usize, freq: f64, spacing_periods: f64, look: &Appearance) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let sigma = 1.0 / (2.0 * core::f64::consts::PI * freq);
    let spacing = spacing_periods / freq;
    let expected = (w * h) as f64 / (spacing * spacing);
    let n = math::floor(expected + rng.next_f64()) as usize;
    let reach = math::ceil(3.0 * sigma) as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    // One exponent per integer offset; a blob is the outer product of two
    // one-dimensional profiles, shifted by the sub-pixel centre.
    let mut gx = vec![0.0; (2 * reach + 2) as usize];
    let mut gy = vec![0.0; (2 * reach + 2) as usize];
    for _ in 0..n {
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        let ix = math::floor(cx) as isize;
        let iy = math::floor(cy) as isize;
        for (k, d) in (-reach..=reach).enumerate() {
            let dx = (ix + d) as f64 + 0.5 - cx;
            let dy = (iy + d) as f64 + 0.5 - cy;
            gx[k] = math::exp(-dx * dx * inv);
            gy[k] = math::exp(-dy * dy * inv);
        }
        for (ky, dy) in (-reach..=reach).enumerate() {
            let y = iy + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            let row = &mut out[y as usize * w..(y as usize + 1) * w];
            let a = look.blob_amplitude * gy[ky];
            for (kx, dx) in (-reach..=reach).enumerate() {
                let x = ix + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                row[x as usize] += a * gx[kx];
            }
        }
    }
    out
}

/// Which half of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Compact in-memory dataset: images as 8-bit samples, truth as 8-bit labels
/// (255 for IGNORE). Images produced by [`generate_scene`] are already on the
/// 1/255 grid, so storage is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStore {
    width: usize,
    height: usize,
    num_classes: usize,
    n_train: usize,
    images: Vec<Vec<u8>>,
    truths: Vec<Vec<u8>>,
}

impl SceneStore {
    pub fn new(width: usize, height: usize, num_classes: usize, n_train: usize) -> Self {
        assert!(num_classes < 255, "labels must fit below the 8-bit IGNORE code");
        SceneStore { width, height, num_classes, n_train, images: Vec::new(), truths: Vec::new() }
    }

    /// Generate every scene of a config, in index order.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self, SceneError> {
        cfg.validate()?;
        let mut store = SceneStore::new(cfg.image_w, cfg.image_h, cfg.num_classes(), cfg.n_train);
        for i in 0..cfg.len() {
            store.push(&generate_scene(cfg, i)?);
        }
        Ok(store)
    }

    pub fn push(&mut self, scene: &Scene) {
        self.push_raw(encode_image(&scene.image), encode_truth(&scene.truth));
    }

    /// Append pre-encoded samples (see [`encode_image`] and [`encode_truth`]).
    pub fn push_raw(&mut self, image: Vec<u8>, truth: Vec<u8>) {
        assert_eq!(image.len(), 3 * self.width * self.height, "image size");
        assert_eq!(truth.len(), self.width * self.height, "truth size");
        self.images.push(image);
        self.truths.push(truth);
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train.min(self.len()),
            Split::Val => self.len().saturating_sub(self.n_train),
        }
    }

    /// Global scene index of the `i`-th member of a split.
    pub fn index(&self, split: Split, i: usize) -> usize {
        assert!(i < self.split_len(split), "index {i} out of range for {split:?}");
        match split {
            Split::Train => i,
            Split::Val => self.n_train + i,
        }
    }

    pub fn raw_image(&self, index: usize) -> &[u8] {
        &self.images[index]
    }

    pub fn raw_truth(&self, index: usize) -> &[u8] {
        &self.truths[index]
    }

    pub fn image(&self, index: usize) -> Raster {
        self.crop_image(index, CropRect::full(self.width, self.height))
    }

    pub fn truth(&self, index: usize) -> ClassMap {
        self.crop_truth(index, CropRect::full(self.width, self.height))
    }

    pub fn crop_image(&self, index: usize, rect: CropRect) -> Raster {
        rect.check_within(self.width, self.height).expect("crop inside the image");
        let src = &self.images[index];
        let plane = self.width * self.height;
        let mut values = Vec::with_capacity(3 * rect.w * rect.h);
        for c in 0..3 {
            for y in rect.y..rect.y + rect.h {
                let start = c * plane + y * self.width + rect.x;
                values.extend(src[start..start + rect.w].iter().map(|&b| b as f64 / 255.0));
            }
        }
        Raster::new(rect.w, rect.h, 3, values).expect("crop shape")
    }

    pub fn crop_truth(&self, index: usize, rect: CropRect) -> ClassMap {
        rect.check_within(self.width, self.height).expect("crop inside the image");
        let src = &self.truths[index];
        let mut labels = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y..rect.y + rect.h {
            let start = y * self.width + rect.x;
            labels.extend(src[start..start + rect.w].iter().map(|&b| if b == 255 { IGNORE } else { b as Label }));
        }
        ClassMap::new(rect.w, rect.h, labels).expect("crop shape")
    }

    /// A store holding only the first `n` training scenes and all validation
    /// scenes.
    pub fn with_train_prefix(&self, n: usize) -> SceneStore {
        let n = n.min(self.n_train);
        let keep = (0..n).chain(self.n_train..self.len());
        let mut out = SceneStore::new(self.width, self.height, self.num_classes, n);
        for i in keep {
            out.push_raw(self.images[i].clone(), self.truths[i].clone());
        }
        out
    }
}

/// 8-bit samples of an image on the 1/255 grid.
pub fn encode_image(img: &Raster) -> Vec<u8> {
    img.values().iter().map(|&v| math::round_half_up(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
}

/// 8-bit labels with 255 for IGNORE.
pub fn encode_truth(truth: &ClassMap) -> Vec<u8> {
    truth
        .labels()
        .iter()
        .map(|&l| {
            if l == IGNORE {
                255
            } else {
                assert!(l < 255, "label {l} does not fit in 8 bits");
                l as u8
            }
        })
        .collect()
}
