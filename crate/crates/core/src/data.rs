//! Procedural two-domain toy benchmark: geometric street-like scenes with
//! per-pixel labels, rendered under a "synthetic" source style and a
//! "real" target style, plus the dataset file formats.
//!
//! Images are stored as binary PPM (P6, maxval 255), label maps as binary
//! PGM (P5) with pixel value = class index and 255 = ignore. The float/byte
//! mapping is `byte = round((v + 1) · 127.5)` clamped to [0, 255].

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{rng, sc, Scalar};
use rand::Rng;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Class indices of the benchmark.
pub const CLASS_SKY: i32 = 0;
pub const CLASS_GROUND: i32 = 1;
pub const CLASS_ROAD: i32 = 2;
pub const CLASS_BOX: i32 = 3;
pub const CLASS_DISC: i32 = 4;
pub const NUM_CLASSES: usize = 5;

/// Byte value marking ignored pixels in PGM label maps.
pub const IGNORE_BYTE: u8 = 255;

/// Per-pixel integer labels with −1 as the ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub data: Vec<i32>,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone)]
pub struct BoxSpec {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct DiscSpec {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Geometry of one scene. All fields are fractions of the image size and
/// are drawn uniformly from the documented ranges in [`gen_scene`].
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    /// Sky/ground boundary, fraction of height; U[0.30, 0.50].
    pub horizon: f64,
    /// Road trapezoid: center/width at the horizon and at the bottom edge;
    /// centers U[0.3, 0.7] / U[0.2, 0.8], widths U[0.04, 0.10] / U[0.25, 0.45].
    pub road_top_center: f64,
    pub road_top_width: f64,
    pub road_bottom_center: f64,
    pub road_bottom_width: f64,
    /// 1–4 boxes on the ground: size U[0.10, 0.22] × U[0.10, 0.25].
    pub boxes: Vec<BoxSpec>,
    /// 0–3 discs anywhere: radius U[0.04, 0.10].
    pub discs: Vec<DiscSpec>,
}

/// Deterministically draw a scene and paint its label map. Painting order
/// sky → ground → road → boxes → discs guarantees exactly one class per
/// pixel.
pub fn gen_scene(seed: u64, size: usize) -> (LabelMap, SceneSpec) {
    let mut r = rng::stream(seed, "scene");
    let horizon = r.random_range(0.30..0.50);
    let road_top_center = r.random_range(0.3..0.7);
    let road_top_width = r.random_range(0.04..0.10);
    let road_bottom_center = r.random_range(0.2..0.8);
    let road_bottom_width = r.random_range(0.25..0.45);
    let n_boxes = r.random_range(1..=4usize);
    let boxes: Vec<BoxSpec> = (0..n_boxes)
        .map(|_| BoxSpec {
            cx: r.random_range(0.05..0.95),
            cy: r.random_range(f64::min(horizon + 0.05, 0.94)..0.95),
            w: r.random_range(0.10..0.22),
            h: r.random_range(0.10..0.25),
        })
        .collect();
    let n_discs = r.random_range(0..=3usize);
    let discs: Vec<DiscSpec> = (0..n_discs)
        .map(|_| DiscSpec {
            cx: r.random_range(0.05..0.95),
            cy: r.random_range(0.05..0.95),
            r: r.random_range(0.04..0.10),
        })
        .collect();
    let spec = SceneSpec {
        seed,
        horizon,
        road_top_center,
        road_top_width,
        road_bottom_center,
        road_bottom_width,
        boxes,
        discs,
    };
    (paint(&spec, size), spec)
}

fn paint(spec: &SceneSpec, size: usize) -> LabelMap {
    let (h, w) = (size, size);
    let hf = h as f64;
    let wf = w as f64;
    let horizon_row = (spec.horizon * hf) as usize;
    let mut data = vec![CLASS_SKY; h * w];
    for y in horizon_row..h {
        for x in 0..w {
            data[y * w + x] = CLASS_GROUND;
        }
    }
    // Road: per-row interpolation of the trapezoid between horizon and
    // bottom.
    for y in horizon_row..h {
        let t = if h - 1 > horizon_row {
            (y - horizon_row) as f64 / (h - 1 - horizon_row) as f64
        } else {
            1.0
        };
        let center = spec.road_top_center + t * (spec.road_bottom_center - spec.road_top_center);
        let width = spec.road_top_width + t * (spec.road_bottom_width - spec.road_top_width);
        let x0 = ((center - width / 2.0) * wf).max(0.0) as usize;
        let x1 = (((center + width / 2.0) * wf) as usize).min(w);
        for x in x0..x1 {
            data[y * w + x] = CLASS_ROAD;
        }
    }
    for b in &spec.boxes {
        let x0 = ((b.cx - b.w / 2.0) * wf).max(0.0) as usize;
        let x1 = (((b.cx + b.w / 2.0) * wf) as usize).min(w);
        let y0 = ((b.cy - b.h / 2.0) * hf).max(0.0) as usize;
        let y1 = (((b.cy + b.h / 2.0) * hf) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = CLASS_BOX;
            }
        }
    }
    for d in &spec.discs {
        let (cx, cy, rr) = (d.cx * wf, d.cy * hf, d.r * wf);
        let y0 = (cy - rr).max(0.0) as usize;
        let y1 = ((cy + rr + 1.0) as usize).min(h);
        for y in y0..y1 {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= rr * rr {
                    data[y * w + x] = CLASS_DISC;
                }
            }
        }
    }
    LabelMap { data, h, w }
}

/// Rendering recipe for one domain.
#[derive(Debug, Clone)]
pub struct DomainStyle {
    /// Base RGB color per class, in [−1, 1].
    pub palette: [[f64; 3]; NUM_CLASSES],
    /// Vertical lighting gradient amplitude (top dark, bottom bright).
    pub gradient: f64,
    /// Additive Gaussian noise standard deviation.
    pub noise_std: f64,
    /// Checker/stripe amplitude on ground and road.
    pub texture: f64,
}

/// Flat palette, no gradient, faint noise: the "synthetic" look.
pub fn source_style() -> DomainStyle {
    DomainStyle {
        palette: [
            [-0.30, 0.10, 0.80],  // sky
            [-0.20, 0.40, -0.30], // ground
            [-0.50, -0.50, -0.45],// road
            [0.70, -0.10, -0.25], // box
            [0.85, 0.70, -0.40],  // disc
        ],
        gradient: 0.0,
        noise_std: 0.02,
        texture: 0.0,
    }
}

/// Shifted palette, lighting gradient, texture and stronger noise: the
/// "real" look. Shifts are class-dependent on purpose, so no global color
/// transform maps one domain onto the other.
pub fn target_style() -> DomainStyle {
    DomainStyle {
        palette: [
            [0.35, 0.45, 0.65],   // sky
            [0.25, 0.05, -0.45],  // ground
            [-0.15, -0.18, -0.05],// road
            [0.30, -0.45, 0.20],  // box
            [0.55, 0.80, 0.10],   // disc
        ],
        gradient: 0.3,
        noise_std: 0.05,
        texture: 0.08,
    }
}

/// Render a label map under a style: `palette[class] + gradient(y) + texture
/// + noise`, clamped to [−1, 1]. Returns `[3, H, W]`.
pub fn render_domain<S: Scalar>(labels: &LabelMap, style: &DomainStyle, seed: u64) -> Tensor<S> {
    let (h, w) = (labels.h, labels.w);
    let mut r = rng::stream(seed, "render");
    let mut data = vec![S::zero(); 3 * h * w];
    for y in 0..h {
        let grad = style.gradient * (y as f64 / h as f64 - 0.5);
        for x in 0..w {
            let class = labels.data[y * w + x] as usize;
            let tex = if style.texture > 0.0 {
                match class as i32 {
                    CLASS_GROUND => {
                        if ((x / 4) + (y / 4)) % 2 == 0 {
                            style.texture
                        } else {
                            -style.texture
                        }
                    }
                    CLASS_ROAD => {
                        if (y / 3) % 2 == 0 {
                            style.texture
                        } else {
                            -style.texture
                        }
                    }
                    _ => 0.0,
                }
            } else {
                0.0
            };
            for c in 0..3 {
                let noise: f64 = rng::normal::<f64>(&mut r, 0.0, style.noise_std);
                let v = (style.palette[class][c] + grad + tex + noise).clamp(-1.0, 1.0);
                data[c * h * w + y * w + x] = sc::<S>(v);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

// ---- PPM / PGM ----

fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().ok();
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write a `[3, H, W]` image in [−1, 1] as binary PPM.
pub fn write_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let shape = image.shape();
    assert!(
        shape.len() == 3 && shape[0] == 3,
        "write_ppm expects [3, h, w], got {shape:?}"
    );
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(d[c * h * w + y * w + x].to_f64().unwrap()));
            }
        }
    }
    atomic_write(path, &bytes)
}

struct PnmHeader {
    w: usize,
    h: usize,
    data_offset: usize,
}

fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<PnmHeader> {
    let err = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(err(&format!("bad magic, expected {magic}")));
    }
    let mut fields = Vec::new();
    let mut i = 2usize;
    let mut cur = String::new();
    while i < bytes.len() && fields.len() < 3 {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            if !cur.is_empty() {
                fields.push(cur.clone());
                cur.clear();
            }
        } else {
            cur.push(b as char);
        }
        i += 1;
        if fields.len() == 3 {
            break;
        }
    }
    if fields.len() != 3 {
        return Err(err("truncated header"));
    }
    let w: usize = fields[0].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[1].parse().map_err(|_| err("bad height"))?;
    let maxval: usize = fields[2].parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("maxval must be 255"));
    }
    Ok(PnmHeader { w, h, data_offset: i })
}

/// Read a binary PPM into `[3, H, W]` floats in [−1, 1].
pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hdr = parse_pnm_header(path, &bytes, "P6")?;
    let need = hdr.data_offset + 3 * hdr.w * hdr.h;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated pixel data ({} < {need})",
            path.display(),
            bytes.len()
        )));
    }
    let (h, w) = (hdr.h, hdr.w);
    let mut data = vec![S::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = bytes[hdr.data_offset + 3 * (y * w + x) + c];
                data[c * h * w + y * w + x] = sc::<S>(dequantize(b));
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Write a label map as binary PGM (class index per byte, 255 = ignore).
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", labels.w, labels.h).into_bytes();
    for &v in &labels.data {
        bytes.push(if v < 0 { IGNORE_BYTE } else { v as u8 });
    }
    atomic_write(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hdr = parse_pnm_header(path, &bytes, "P5")?;
    let need = hdr.data_offset + hdr.w * hdr.h;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    let data = bytes[hdr.data_offset..need]
        .iter()
        .map(|&b| if b == IGNORE_BYTE { -1 } else { b as i32 })
        .collect();
    Ok(LabelMap {
        data,
        h: hdr.h,
        w: hdr.w,
    })
}

// ---- dataset manifest ----

/// On-disk description of a two-domain dataset. Target-train labels exist
/// only for bound computation and are kept in a separate eval-only
/// directory that trainers never read.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train_s: usize,
    pub train_t: usize,
    pub val_t: usize,
    pub image_size: usize,
    pub seed: u64,
    pub classes: usize,
    pub src_train_images: String,
    pub src_train_labels: String,
    pub tgt_train_images: String,
    pub tgt_train_labels_eval: String,
    pub tgt_val_images: String,
    pub tgt_val_labels: String,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, train_s: usize, train_t: usize, val_t: usize, image_size: usize, seed: u64) -> Self {
        DatasetManifest {
            root: root.into(),
            train_s,
            train_t,
            val_t,
            image_size,
            seed,
            classes: NUM_CLASSES,
            src_train_images: "source/train/images".into(),
            src_train_labels: "source/train/labels".into(),
            tgt_train_images: "target/train/images".into(),
            tgt_train_labels_eval: "target/train/labels_eval_only".into(),
            tgt_val_images: "target/val/images".into(),
            tgt_val_labels: "target/val/labels".into(),
        }
    }

    pub fn image_path(&self, dir: &str, idx: usize) -> PathBuf {
        self.root.join(dir).join(format!("{idx:05}.ppm"))
    }

    pub fn label_path(&self, dir: &str, idx: usize) -> PathBuf {
        self.root.join(dir).join(format!("{idx:05}.pgm"))
    }

    fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.txt")
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("train_s={}\n", self.train_s));
        s.push_str(&format!("train_t={}\n", self.train_t));
        s.push_str(&format!("val_t={}\n", self.val_t));
        s.push_str(&format!("image_size={}\n", self.image_size));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("classes={}\n", self.classes));
        s.push_str(&format!("src_train_images={}\n", self.src_train_images));
        s.push_str(&format!("src_train_labels={}\n", self.src_train_labels));
        s.push_str(&format!("tgt_train_images={}\n", self.tgt_train_images));
        s.push_str(&format!("tgt_train_labels_eval={}\n", self.tgt_train_labels_eval));
        s.push_str(&format!("tgt_val_images={}\n", self.tgt_val_images));
        s.push_str(&format!("tgt_val_labels={}\n", self.tgt_val_labels));
        s
    }
}

/// Materialize the full dataset under `manifest.root`. Source and target
/// scenes come from disjoint seed streams (the domains are unpaired); the
/// same scene stream rendered under both styles is used only by tests.
pub fn write_dataset(manifest: &DatasetManifest) -> Result<()> {
    let root = &manifest.root;
    for dir in [
        &manifest.src_train_images,
        &manifest.src_train_labels,
        &manifest.tgt_train_images,
        &manifest.tgt_train_labels_eval,
        &manifest.tgt_val_images,
        &manifest.tgt_val_labels,
    ] {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    let size = manifest.image_size;
    let src = source_style();
    let tgt = target_style();

    for i in 0..manifest.train_s {
        let scene_seed = rng::derive_seed(manifest.seed, &format!("scene.src.{i}"));
        let (labels, _) = gen_scene(scene_seed, size);
        let img = render_domain::<f32>(&labels, &src, rng::derive_seed(manifest.seed, &format!("noise.src.{i}")));
        write_ppm(&manifest.image_path(&manifest.src_train_images, i), &img)?;
        write_pgm(&manifest.label_path(&manifest.src_train_labels, i), &labels)?;
    }
    for i in 0..manifest.train_t {
        let scene_seed = rng::derive_seed(manifest.seed, &format!("scene.tgt.{i}"));
        let (labels, _) = gen_scene(scene_seed, size);
        let img = render_domain::<f32>(&labels, &tgt, rng::derive_seed(manifest.seed, &format!("noise.tgt.{i}")));
        write_ppm(&manifest.image_path(&manifest.tgt_train_images, i), &img)?;
        write_pgm(&manifest.label_path(&manifest.tgt_train_labels_eval, i), &labels)?;
    }
    for i in 0..manifest.val_t {
        let scene_seed = rng::derive_seed(manifest.seed, &format!("scene.val.{i}"));
        let (labels, _) = gen_scene(scene_seed, size);
        let img = render_domain::<f32>(&labels, &tgt, rng::derive_seed(manifest.seed, &format!("noise.val.{i}")));
        write_ppm(&manifest.image_path(&manifest.tgt_val_images, i), &img)?;
        write_pgm(&manifest.label_path(&manifest.tgt_val_labels, i), &labels)?;
    }
    atomic_write(&DatasetManifest::manifest_path(root), manifest.to_text().as_bytes())
}

/// Load a manifest and verify every listed file exists.
pub fn read_dataset(root: &Path) -> Result<DatasetManifest> {
    let path = DatasetManifest::manifest_path(root);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m = DatasetManifest::new(root, 0, 0, 0, 0, 0);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: line {}: expected key=value", path.display(), lineno + 1)))?;
        let bad = |k: &str| Error::Format(format!("{}: bad value for {k}", path.display()));
        match key {
            "train_s" => m.train_s = value.parse().map_err(|_| bad(key))?,
            "train_t" => m.train_t = value.parse().map_err(|_| bad(key))?,
            "val_t" => m.val_t = value.parse().map_err(|_| bad(key))?,
            "image_size" => m.image_size = value.parse().map_err(|_| bad(key))?,
            "seed" => m.seed = value.parse().map_err(|_| bad(key))?,
            "classes" => m.classes = value.parse().map_err(|_| bad(key))?,
            "src_train_images" => m.src_train_images = value.into(),
            "src_train_labels" => m.src_train_labels = value.into(),
            "tgt_train_images" => m.tgt_train_images = value.into(),
            "tgt_train_labels_eval" => m.tgt_train_labels_eval = value.into(),
            "tgt_val_images" => m.tgt_val_images = value.into(),
            "tgt_val_labels" => m.tgt_val_labels = value.into(),
            other => {
                return Err(Error::Format(format!(
                    "{}: unknown manifest key '{other}'",
                    path.display()
                )))
            }
        }
    }
    for i in 0..m.train_s {
        check_exists(&m.image_path(&m.src_train_images, i))?;
        check_exists(&m.label_path(&m.src_train_labels, i))?;
    }
    for i in 0..m.train_t {
        check_exists(&m.image_path(&m.tgt_train_images, i))?;
        check_exists(&m.label_path(&m.tgt_train_labels_eval, i))?;
    }
    for i in 0..m.val_t {
        check_exists(&m.image_path(&m.tgt_val_images, i))?;
        check_exists(&m.label_path(&m.tgt_val_labels, i))?;
    }
    Ok(m)
}

fn check_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Format(format!("missing dataset file {}", path.display())))
    }
}

/// The three dataset splits trainers and evaluators read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainSource,
    TrainTarget,
    ValTarget,
}

pub fn load_images<S: Scalar>(m: &DatasetManifest, split: Split) -> Result<Vec<Tensor<S>>> {
    let (dir, count) = match split {
        Split::TrainSource => (&m.src_train_images, m.train_s),
        Split::TrainTarget => (&m.tgt_train_images, m.train_t),
        Split::ValTarget => (&m.tgt_val_images, m.val_t),
    };
    (0..count).map(|i| read_ppm(&m.image_path(dir, i))).collect()
}

/// Labels for a split. Target-train labels are the eval-only set; loading
/// them is legitimate only for bound computation, never for adaptation.
pub fn load_labels(m: &DatasetManifest, split: Split) -> Result<Vec<LabelMap>> {
    let (dir, count) = match split {
        Split::TrainSource => (&m.src_train_labels, m.train_s),
        Split::TrainTarget => (&m.tgt_train_labels_eval, m.train_t),
        Split::ValTarget => (&m.tgt_val_labels, m.val_t),
    };
    (0..count).map(|i| read_pgm(&m.label_path(dir, i))).collect()
}
