//! Image batches, the synthetic two-domain generator with ground-truth
//! geometry, and ingestion of ReID-style image directories.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{self, invert, mat3_mul, Transform, TransformKind};
use crate::tensor::Tensor;

/// `values [n, c, h, w]` in `[-1, 1]`, binary `mask [n, 1, h, w]`, and
/// per-item identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub values: Tensor,
    pub mask: Tensor,
    pub identity: Vec<i64>,
    pub camera: Vec<i64>,
}

impl ImageBatch {
    pub fn new(values: Tensor, mask: Tensor, identity: Vec<i64>, camera: Vec<i64>) -> Result<Self> {
        let b = Self {
            values,
            mask,
            identity,
            camera,
        };
        b.validate()?;
        Ok(b)
    }

    /// A batch with all-ones masks and zero labels.
    pub fn from_values(values: Tensor) -> Result<Self> {
        if values.ndim() != 4 {
            return Err(Error::Shape(format!(
                "expected NCHW, got {:?}",
                values.shape()
            )));
        }
        let s = values.shape().to_vec();
        let n = s[0];
        Self::new(
            values,
            Tensor::ones(&[n, 1, s[2], s[3]]),
            vec![0; n],
            vec![0; n],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.values.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("values must be NCHW, got {:?}", s)));
        }
        if self.mask.shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::Shape(format!(
                "mask {:?} does not match values {:?}",
                self.mask.shape(),
                s
            )));
        }
        if self.identity.len() != s[0] || self.camera.len() != s[0] {
            return Err(Error::Shape("label count differs from batch size".into()));
        }
        if self.values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image values outside [-1, 1]".into(),
            ));
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("mask is not binary".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            values: self.values.select_outer(idx),
            mask: self.mask.select_outer(idx),
            identity: idx.iter().map(|&i| self.identity[i]).collect(),
            camera: idx.iter().map(|&i| self.camera[i]).collect(),
        }
    }

    pub fn concat(parts: &[ImageBatch]) -> Result<Self> {
        let values =
            Tensor::cat_outer(&parts.iter().map(|p| p.values.clone()).collect::<Vec<_>>())?;
        let mask = Tensor::cat_outer(&parts.iter().map(|p| p.mask.clone()).collect::<Vec<_>>())?;
        Ok(Self {
            values,
            mask,
            identity: parts
                .iter()
                .flat_map(|p| p.identity.iter().copied())
                .collect(),
            camera: parts
                .iter()
                .flat_map(|p| p.camera.iter().copied())
                .collect(),
        })
    }
}

/// An immutable collection of images with optional names.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: ImageBatch,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(items: ImageBatch) -> Self {
        let names = (0..items.len()).map(|i| format!("item{i:05}")).collect();
        Self { items, names }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Draws `n` distinct items uniformly at random, deterministically in `seed`.
pub fn sample_batch(dataset: &Dataset, n: usize, seed: u64) -> Result<ImageBatch> {
    if n == 0 || n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} items from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = rand::seq::index::sample(&mut rng, dataset.len(), n).into_vec();
    Ok(dataset.items.select(&idx))
}

/// Item indices of batch `k` in a stateless epoch schedule: every epoch is
/// a seeded permutation of the dataset cut into `len / n` batches, so batch
/// `k` depends only on `(seed, k)`.
pub fn epoch_batch_indices(len: usize, n: usize, seed: u64, k: u64) -> Vec<usize> {
    assert!(n > 0 && n <= len, "batch of {n} from dataset of {len}");
    let per_epoch = (len / n) as u64;
    let epoch = k / per_epoch;
    let pos = (k % per_epoch) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut crate::seeded_rng(seed, epoch));
    order[pos * n..(pos + 1) * n].to_vec()
}

// ---- synthetic domain pair --------------------------------------------------

/// Parameters of the synthetic X/Y domain pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomainSpec {
    pub gt_kind: TransformKind,
    /// Maximum rotation of the per-domain transform, degrees.
    pub max_rotation_deg: f64,
    /// Maximum magnitude of each perspective term.
    pub max_perspective: f64,
    /// Maximum translation per axis, normalized units.
    pub max_translation: f64,
    /// Per-item translation jitter around the domain transform, normalized units.
    pub item_jitter: f64,
    pub gain_range: (f64, f64),
    pub bias_range: (f64, f64),
    pub noise_std: f64,
    pub n_identities: usize,
    pub n_views: usize,
    pub size: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            gt_kind: TransformKind::Homography,
            max_rotation_deg: 15.0,
            max_perspective: 0.1,
            max_translation: 0.2,
            item_jitter: 0.01,
            gain_range: (0.6, 1.4),
            bias_range: (-0.2, 0.2),
            noise_std: 0.02,
            n_identities: 32,
            n_views: 4,
            size: (32, 32),
            seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    /// No geometric or photometric shift: the Y domain equals X.
    pub fn zero_shift(seed: u64) -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_perspective: 0.0,
            max_translation: 0.0,
            item_jitter: 0.0,
            gain_range: (1.0, 1.0),
            bias_range: (0.0, 0.0),
            noise_std: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.max_rotation_deg,
            self.max_perspective,
            self.max_translation,
            self.item_jitter,
            self.gain_range.0,
            self.gain_range.1,
            self.bias_range.0,
            self.bias_range.1,
            self.noise_std,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < -1e9) {
            return Err(Error::Config("non-finite synthetic spec value".into()));
        }
        if self.max_rotation_deg < 0.0
            || self.max_perspective < 0.0
            || self.max_translation < 0.0
            || self.item_jitter < 0.0
            || self.noise_std < 0.0
        {
            return Err(Error::Config(
                "synthetic ranges must be non-negative".into(),
            ));
        }
        if self.gain_range.0 <= 0.0 || self.gain_range.1 < self.gain_range.0 {
            return Err(Error::Config("gains must be positive with lo <= hi".into()));
        }
        if self.bias_range.1 < self.bias_range.0 {
            return Err(Error::Config("bias range must have lo <= hi".into()));
        }
        if self.n_identities == 0 || self.n_views == 0 {
            return Err(Error::Config(
                "need at least one identity and one view".into(),
            ));
        }
        if self.size.0 < 8 || self.size.1 < 8 {
            return Err(Error::Config(
                "synthetic images must be at least 8x8".into(),
            ));
        }
        if !self.gt_kind.is_projective() {
            return Err(Error::Config(
                "ground-truth family must be affine or homography".into(),
            ));
        }
        if self.gt_kind == TransformKind::Affine && self.max_perspective > 0.0 {
            return Err(Error::Config(
                "affine ground truth cannot have perspective terms".into(),
            ));
        }
        Ok(())
    }
}

/// Synthetic domain pair. `gt[i]` maps Y pixel coordinates to X coordinates
/// for item `i` (`y = warp(x, grid(gt[i]))`); it is for evaluation only.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub x: Dataset,
    pub y: Dataset,
    pub gt: Vec<Transform>,
    /// Per-domain base transform before per-item jitter.
    pub base: Transform,
    pub gains: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Half extents of the rendered card within the frame, normalized.
const CARD_HALF: (f64, f64) = (0.42, 0.6);

struct Identity {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    torso_w: f64,
    leg_len: f64,
    bag: bool,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // saturated colours spread over the cube, away from the background range
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = if rng.random_bool(0.5) {
            rng.random_range(0.45..0.95)
        } else {
            rng.random_range(-0.95..-0.45)
        };
    }
    c
}

fn random_identity(rng: &mut ChaCha8Rng) -> Identity {
    Identity {
        head: random_color(rng),
        torso: random_color(rng),
        legs: random_color(rng),
        torso_w: rng.random_range(0.22..0.34),
        leg_len: rng.random_range(0.32..0.46),
        bag: rng.random_bool(0.5),
    }
}

/// Renders one X-domain item: a textured card with a person sprite.
fn render_item(
    id: &Identity,
    rng: &mut ChaCha8Rng,
    (h, w): (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let (cw, ch) = CARD_HALF;
    let bg_base = [
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ];
    let stripe_amp = rng.random_range(0.12..0.22);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let dx = rng.random_range(-0.06..0.06);
    let dy = rng.random_range(-0.05..0.05);
    let mut img = vec![0.0; 3 * h * w];
    let mut mask = vec![0.0; h * w];
    let head_c = (dx, dy - 0.38);
    let torso_top = dy - 0.26;
    let torso_bot = dy + 0.08;
    for i in 0..h {
        let y = geometry::pixel_to_norm(i, h);
        for j in 0..w {
            let x = geometry::pixel_to_norm(j, w);
            if x.abs() > cw || y.abs() > ch {
                continue;
            }
            // card background: horizontal stripes plus a vertical ramp
            let stripe = stripe_amp * (y * 14.0 + phase).sin();
            let ramp = 0.1 * y;
            let mut px = [
                bg_base[0] + stripe + ramp,
                bg_base[1] + stripe,
                bg_base[2] - ramp,
            ];
            let mut fg = false;
            let hx = (x - head_c.0) / 0.1;
            let hy = (y - head_c.1) / 0.12;
            if hx * hx + hy * hy <= 1.0 {
                px = id.head;
                fg = true;
            } else if (x - dx).abs() <= id.torso_w / 2.0 && y >= torso_top && y <= torso_bot {
                px = id.torso;
                fg = true;
            } else if y > torso_bot && y <= torso_bot + id.leg_len {
                let off = (x - dx).abs();
                if off >= 0.02 && off <= 0.02 + id.torso_w * 0.4 {
                    px = id.legs;
                    fg = true;
                }
            }
            if !fg && id.bag {
                let bx = x - (dx + id.torso_w / 2.0 + 0.06);
                if bx.abs() <= 0.05 && y >= torso_top + 0.1 && y <= torso_bot {
                    px = id.legs.map(|v| -0.8 * v);
                    fg = true;
                }
            }
            for c in 0..3 {
                img[c * h * w + i * w + j] = px[c].clamp(-1.0, 1.0);
            }
            if fg {
                mask[i * w + j] = 1.0;
            }
        }
    }
    (img, mask)
}

fn perspective_mat(p: f64, q: f64) -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [p, q, 1.0]]
}

fn signed_draw(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max == 0.0 {
        return 0.0;
    }
    let mag = rng.random_range(0.5 * max..=max);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Whether the whole card stays inside the Y frame under `gt`.
fn card_visible(gt: &Transform) -> bool {
    let Ok(inv) = invert(gt) else { return false };
    let (cw, ch) = CARD_HALF;
    [(-cw, -ch), (cw, -ch), (-cw, ch), (cw, ch)]
        .iter()
        .all(|&c| {
            let (u, v) = inv.apply(c);
            u.is_finite() && v.is_finite() && u.abs() <= 0.98 && v.abs() <= 0.98
        })
}

fn draw_base_transform(spec: &SyntheticDomainSpec, rng: &mut ChaCha8Rng) -> Result<Transform> {
    for _ in 0..1000 {
        let theta = signed_draw(rng, spec.max_rotation_deg.to_radians());
        let tx = signed_draw(rng, spec.max_translation);
        let ty = signed_draw(rng, spec.max_translation);
        let (p, q) = (
            signed_draw(rng, spec.max_perspective),
            signed_draw(rng, spec.max_perspective),
        );
        let (s, c) = theta.sin_cos();
        let rt = [[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]];
        let m = mat3_mul(&rt, &perspective_mat(p, q));
        let Ok(t) = Transform::from_matrix(spec.gt_kind, &m) else {
            continue;
        };
        if card_visible(&t) {
            return Ok(t);
        }
    }
    Err(Error::Config(
        "synthetic transform ranges never keep the scene in frame".into(),
    ))
}

/// Generates the synthetic X/Y domain pair described by `spec`.
pub fn synth_pair(spec: &SyntheticDomainSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identities: Vec<Identity> = (0..spec.n_identities)
        .map(|_| random_identity(&mut rng))
        .collect();
    let base = draw_base_transform(spec, &mut rng)?;
    let gains: Vec<f64> = (0..3)
        .map(|_| rng.random_range(spec.gain_range.0..=spec.gain_range.1))
        .collect();
    let biases: Vec<f64> = (0..3)
        .map(|_| rng.random_range(spec.bias_range.0..=spec.bias_range.1))
        .collect();
    let noise =
        Normal::new(0.0, spec.noise_std.max(1e-300)).map_err(|e| Error::Config(e.to_string()))?;

    let n = spec.n_identities * spec.n_views;
    let mut xs = Vec::with_capacity(n * 3 * h * w);
    let mut xm = Vec::with_capacity(n * h * w);
    let mut ids = Vec::with_capacity(n);
    let mut cams = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    for (pid, ident) in identities.iter().enumerate() {
        for view in 0..spec.n_views {
            let (img, mask) = render_item(ident, &mut rng, spec.size);
            xs.extend(img);
            xm.extend(mask);
            ids.push(pid as i64);
            cams.push(view as i64);
            names.push(format!("{:04}_c{}_{:06}", pid, view, view));
            let t = if spec.item_jitter > 0.0 {
                let jx = rng.random_range(-spec.item_jitter..=spec.item_jitter);
                let jy = rng.random_range(-spec.item_jitter..=spec.item_jitter);
                let shift = [[1.0, 0.0, jx], [0.0, 1.0, jy], [0.0, 0.0, 1.0]];
                Transform::from_matrix(spec.gt_kind, &mat3_mul(&shift, &base.matrix()?))?
            } else {
                base.clone()
            };
            gts.push(t);
        }
    }
    let x_items = ImageBatch::new(
        Tensor::new(&[n, 3, h, w], xs),
        Tensor::new(&[n, 1, h, w], xm),
        ids.clone(),
        cams.clone(),
    )?;

    let grids: Vec<Tensor> = gts
        .iter()
        .map(|t| {
            geometry::generate_grid(t, spec.size).and_then(|g| g.to_tensor().reshape(&[1, h, w, 2]))
        })
        .collect::<Result<_>>()?;
    let grids = Tensor::cat_outer(&grids)?;
    let mut y_items = geometry::warp_each(&x_items, &grids, 0.0)?;
    {
        let vals = y_items.values.data_mut();
        for b in 0..n {
            for c in 0..3 {
                for p in 0..h * w {
                    let idx = (b * 3 + c) * h * w + p;
                    let mut v = gains[c] * vals[idx] + biases[c];
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    vals[idx] = v.clamp(-1.0, 1.0);
                }
            }
        }
    }
    y_items.validate()?;
    Ok(SyntheticPair {
        x: Dataset {
            items: x_items,
            names: names.clone(),
        },
        y: Dataset {
            items: y_items,
            names,
        },
        gt: gts,
        base,
        gains,
        biases,
    })
}

// ---- image files ------------------------------------------------------------

/// Identity and camera labels from a `<identity>_c<camera>...` file stem.
pub fn parse_reid_name(file_name: &str) -> Option<(i64, i64)> {
    let (stem, ext) = file_name.rsplit_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
        return None;
    }
    let (id_part, rest) = stem.split_once('_')?;
    let identity: i64 = id_part.parse().ok()?;
    let rest = rest.strip_prefix('c')?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let tail = &rest[digits.len()..];
    if !(tail.is_empty() || tail.starts_with('_') || tail.starts_with('s')) {
        return None;
    }
    Some((identity, digits.parse().ok()?))
}

/// Result of reading an image directory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    /// Files skipped because their names or contents could not be parsed.
    pub skipped: usize,
}

/// Loads every `<identity>_c<camera>_<seq>.<png|jpg>` image in `path`,
/// resized to `size` and scaled to `[-1, 1]`, with all-ones masks.
pub fn load_reid_dir(path: &Path, size: (usize, usize)) -> Result<LoadedDataset> {
    load_dir(path, size, true)
}

/// Like [`load_reid_dir`] but accepts any png/jpg name; images without
/// ReID labels get identity and camera `-1`.
pub fn load_image_dir(path: &Path, size: (usize, usize)) -> Result<LoadedDataset> {
    load_dir(path, size, false)
}

fn load_dir(path: &Path, size: (usize, usize), require_labels: bool) -> Result<LoadedDataset> {
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let (h, w) = size;
    let mut values = Vec::new();
    let mut ids = Vec::new();
    let mut cams = Vec::new();
    let mut names = Vec::new();
    let mut skipped = 0;
    for p in &entries {
        let Some(fname) = p.file_name().and_then(|f| f.to_str()) else {
            skipped += 1;
            continue;
        };
        let is_image = fname.rsplit_once('.').is_some_and(|(_, e)| {
            matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg")
        });
        let (id, cam) = match parse_reid_name(fname) {
            Some(l) => l,
            None if is_image && !require_labels => (-1, -1),
            None => {
                log::warn!(
                    "skipping {}: name does not match <id>_c<cam>_<seq>",
                    p.display()
                );
                skipped += 1;
                continue;
            }
        };
        let img = match image::open(p) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped += 1;
                continue;
            }
        };
        let rgb = image::imageops::resize(
            &img.to_rgb8(),
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut item = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                item[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        values.extend(item);
        ids.push(id);
        cams.push(cam);
        names.push(
            fname
                .rsplit_once('.')
                .map(|s| s.0)
                .unwrap_or(fname)
                .to_string(),
        );
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let n = ids.len();
    let items = ImageBatch::new(
        Tensor::new(&[n, 3, h, w], values),
        Tensor::ones(&[n, 1, h, w]),
        ids,
        cams,
    )?;
    Ok(LoadedDataset {
        dataset: Dataset { items, names },
        skipped,
    })
}

/// Converts item `i` of an image tensor to 8-bit RGB.
pub fn to_rgb8(values: &Tensor, i: usize) -> image::RgbImage {
    let s = values.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let d = values.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let ch = ch.min(c - 1);
            let v = d[((i * c + ch) * h + y as usize) * w + x as usize];
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(Error::from)
}

/// Writes a dataset as `<name>.png` files (plus `masks/<name>.png`).
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for (i, name) in ds.names.iter().enumerate() {
        save_png(
            &to_rgb8(&ds.items.values, i),
            &dir.join(format!("{name}.png")),
        )?;
        let m = ds.items.mask.map(|v| v * 2.0 - 1.0);
        save_png(&to_rgb8(&m, i), &mask_dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// Writes both domains and the ground-truth transforms under `dir`.
pub fn export_pair(pair: &SyntheticPair, dir: &Path) -> Result<()> {
    export_dataset(&pair.x, &dir.join("x"))?;
    export_dataset(&pair.y, &dir.join("y"))?;
    let path = dir.join("y").join("gt.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    let pl = pair.base.kind().param_len();
    let mut header = vec!["name".to_string()];
    header.extend((0..pl).map(|k| format!("p{k}")));
    wtr.write_record(&header)?;
    for (name, t) in pair.y.names.iter().zip(&pair.gt) {
        let mut row = vec![name.clone()];
        row.extend(t.params().iter().map(|v| format!("{v:.17e}")));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
