//! Procedural paired images (outline drawing → filled colored shape),
//! binary PPM I/O and the dataset manifest.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const MIN_IMAGE_SIZE: usize = 16;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const MANIFEST_VERSION: &str = "dit-manifest-1";

/// Half-width, in pixels, of the anti-aliased outline stroke.
const STROKE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Ellipse { rx: f64, ry: f64, angle: f64 },
    /// Regular-angle convex polygon inscribed in a circle of `radius`.
    Polygon { sides: usize, radius: f64, phase: f64 },
}

/// Everything that determines a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Fill color, RGB in `[-1, 1]`.
    pub color: [f64; 3],
}

impl ShapeSpec {
    /// 0 for ellipses, otherwise the vertex count.
    pub fn vertex_count(&self) -> usize {
        match self.kind {
            ShapeKind::Ellipse { .. } => 0,
            ShapeKind::Polygon { sides, .. } => sides,
        }
    }

    pub fn area(&self) -> f64 {
        match self.kind {
            ShapeKind::Ellipse { rx, ry, .. } => PI * rx * ry,
            ShapeKind::Polygon { sides, radius, .. } => {
                0.5 * sides as f64 * radius * radius * (2.0 * PI / sides as f64).sin()
            }
        }
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        match self.kind {
            ShapeKind::Ellipse { .. } => Vec::new(),
            ShapeKind::Polygon { sides, radius, phase } => (0..sides)
                .map(|i| {
                    let a = phase + 2.0 * PI * i as f64 / sides as f64;
                    (self.cx + radius * a.cos(), self.cy + radius * a.sin())
                })
                .collect(),
        }
    }

    /// Approximate signed distance in pixels, negative inside.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            ShapeKind::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - self.cx, y - self.cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let f = (u / rx).powi(2) + (v / ry).powi(2);
                let grad = 2.0 * ((u / (rx * rx)).powi(2) + (v / (ry * ry)).powi(2)).sqrt();
                if grad < 1e-12 {
                    -rx.min(ry)
                } else {
                    (f - 1.0) / grad
                }
            }
            ShapeKind::Polygon { .. } => {
                let vs = self.vertices();
                let mut dist = f64::INFINITY;
                let mut inside = true;
                for i in 0..vs.len() {
                    let (ax, ay) = vs[i];
                    let (bx, by) = vs[(i + 1) % vs.len()];
                    let (ex, ey) = (bx - ax, by - ay);
                    let (px, py) = (x - ax, y - ay);
                    let t = ((px * ex + py * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
                    let (qx, qy) = (px - t * ex, py - t * ey);
                    dist = dist.min((qx * qx + qy * qy).sqrt());
                    // counter-clockwise vertices: inside is to the left of every edge
                    if ex * py - ey * px < 0.0 {
                        inside = false;
                    }
                }
                if inside {
                    -dist
                } else {
                    dist
                }
            }
        }
    }

    /// Distance field sampled at pixel centers, `[S·S]` row-major.
    pub fn distance_field(&self, s: usize) -> Vec<f64> {
        (0..s * s)
            .map(|i| self.signed_distance((i % s) as f64 + 0.5, (i / s) as f64 + 0.5))
            .collect()
    }
}

/// Stroke coverage of a pixel at signed distance `d`.
pub fn outline_coverage(d: f64) -> f64 {
    (1.0 - d.abs() / STROKE).clamp(0.0, 1.0)
}

/// Fill coverage of a pixel at signed distance `d`.
pub fn fill_coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue bands per shape class are 0.2 wide; area moves the hue within the
/// band, so distinct (class, area) pairs never share a color.
fn fill_color(vertex_count: usize, area_frac: f64) -> [f64; 3] {
    let class = if vertex_count == 0 { 0 } else { vertex_count - 2 };
    let hue = class as f64 * 0.2 + 0.16 * area_frac.clamp(0.0, 1.0);
    hsv_to_rgb(hue, 0.85, 0.9).map(|c| 2.0 * c - 1.0)
}

/// Draw the shape parameters for `(seed, sample_id)` at image size `s`.
pub fn shape_spec(seed: u64, sample_id: u64, s: usize) -> Result<ShapeSpec> {
    if s < MIN_IMAGE_SIZE {
        return Err(Error::param(format!("image size {s} is below the minimum {MIN_IMAGE_SIZE}")));
    }
    let mut rng = Rng::new(seed).split("pair").split_index(sample_id);
    let sf = s as f64;
    let (r_lo, r_hi) = (0.13 * sf, 0.19 * sf);
    let r = rng.uniform_range(r_lo, r_hi);
    let cx = rng.uniform_range(0.35 * sf, 0.65 * sf);
    let cy = rng.uniform_range(0.35 * sf, 0.65 * sf);
    let class = rng.below(5);
    let kind = if class == 0 {
        ShapeKind::Ellipse {
            rx: r,
            ry: r * rng.uniform_range(0.6, 1.0),
            angle: rng.uniform_range(0.0, PI),
        }
    } else {
        ShapeKind::Polygon {
            sides: class + 2,
            radius: r,
            phase: rng.uniform_range(0.0, 2.0 * PI),
        }
    };
    let mut spec = ShapeSpec {
        kind,
        cx,
        cy,
        color: [0.0; 3],
    };
    // normalize area against the largest shape of this class
    let area_max = match kind {
        ShapeKind::Ellipse { .. } => PI * r_hi * r_hi,
        ShapeKind::Polygon { sides, .. } => {
            0.5 * sides as f64 * r_hi * r_hi * (2.0 * PI / sides as f64).sin()
        }
    };
    let area_min = match kind {
        ShapeKind::Ellipse { .. } => PI * r_lo * r_lo * 0.6,
        ShapeKind::Polygon { sides, .. } => {
            0.5 * sides as f64 * r_lo * r_lo * (2.0 * PI / sides as f64).sin()
        }
    };
    let frac = (spec.area() - area_min) / (area_max - area_min);
    spec.color = fill_color(spec.vertex_count(), frac);
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub source: Tensor,
    pub target: Tensor,
    pub sample_id: u64,
}

/// Rasterize the source outline and target fill of `spec`.
pub fn render(spec: &ShapeSpec, s: usize) -> Result<(Tensor, Tensor)> {
    let field = spec.distance_field(s);
    let plane = s * s;
    let mut source = vec![0.0; 3 * plane];
    let mut target = vec![0.0; 3 * plane];
    for (i, &d) in field.iter().enumerate() {
        let ink = 1.0 - 2.0 * outline_coverage(d);
        let cov = fill_coverage(d);
        for c in 0..3 {
            source[c * plane + i] = ink;
            target[c * plane + i] = 1.0 + cov * (spec.color[c] - 1.0);
        }
    }
    Ok((Tensor::new(&[3, s, s], source)?, Tensor::new(&[3, s, s], target)?))
}

pub fn generate_pair(seed: u64, sample_id: u64, s: usize) -> Result<PairedSample> {
    let spec = shape_spec(seed, sample_id, s)?;
    let (source, target) = render(&spec, s)?;
    Ok(PairedSample {
        source,
        target,
        sample_id,
    })
}

// ---- PPM ------------------------------------------------------------------

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary P6 encoding of a `[3, H, W]` image with values in `[-1, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::dim(format!("PPM images are [3, H, W], got {:?}", img.shape())));
    };
    if let Some(v) = img.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::param(format!("pixel value {v} outside [-1, 1]")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + i]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(start, format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.get(..2) != Some(b"P6") {
        return Err(Error::parse(0, "missing P6 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::parse(maxval_at, "zero image extent"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::parse(cur.pos, "expected whitespace before pixel data")),
    }
    let plane = w * h;
    let body = &bytes[cur.pos..];
    if body.len() < 3 * plane {
        return Err(Error::parse(bytes.len(), format!("pixel data truncated: {} of {} bytes", body.len(), 3 * plane)));
    }
    if body.len() > 3 * plane {
        return Err(Error::parse(cur.pos + 3 * plane, "trailing bytes after pixel data"));
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = body[3 * i + c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::parse(offset, format!("{}: {msg}", path.display())),
        other => other,
    })
}

// ---- manifest -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    /// Paths relative to the manifest's directory.
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub image_size: usize,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

const HEADER_KEYS: [&str; 5] = ["version", "seed", "size", "count", "split"];

impl DatasetManifest {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn serialize(&self) -> String {
        let mut out = format!(
            "version\t{}\nseed\t{}\nsize\t{}\ncount\t{}\nsplit\t{}\n",
            self.version,
            self.seed,
            self.image_size,
            self.entries.len(),
            self.split
        );
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.id, e.source, e.target));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut header = Vec::with_capacity(5);
        let mut entries = Vec::new();
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let body = line.strip_suffix('\n').unwrap_or(line);
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split('\t').collect();
            if header.len() < HEADER_KEYS.len() {
                let key = HEADER_KEYS[header.len()];
                match fields.as_slice() {
                    [k, v] if *k == key => header.push(v.to_string()),
                    _ => return Err(Error::parse(at, format!("expected header '{key}<TAB>value'"))),
                }
                continue;
            }
            let [id, src, tgt] = fields.as_slice() else {
                return Err(Error::parse(at, "expected 'id<TAB>source<TAB>target'"));
            };
            let id = id
                .parse()
                .map_err(|_| Error::parse(at, format!("bad sample id '{id}'")))?;
            entries.push(ManifestEntry {
                id,
                source: src.to_string(),
                target: tgt.to_string(),
            });
        }
        if header.len() < HEADER_KEYS.len() {
            return Err(Error::parse(offset, "manifest header incomplete"));
        }
        let num = |i: usize| -> Result<u64> {
            header[i]
                .parse()
                .map_err(|_| Error::parse(0, format!("bad {} '{}'", HEADER_KEYS[i], header[i])))
        };
        if header[0] != MANIFEST_VERSION {
            return Err(Error::Version(format!("unsupported manifest version '{}'", header[0])));
        }
        let count = num(3)? as usize;
        if count != entries.len() {
            return Err(Error::parse(offset, format!("count {count} but {} entries", entries.len())));
        }
        Ok(DatasetManifest {
            version: header[0].clone(),
            seed: num(1)?,
            image_size: num(2)? as usize,
            split: header[4].parse()?,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize()).map_err(|e| Error::file(path, e))
    }

    /// Load every pair, resolving paths against `base_dir`.
    pub fn load_pairs(&self, base_dir: &Path) -> Result<Vec<PairedSample>> {
        self.entries
            .iter()
            .map(|e| {
                let source = read_image(&base_dir.join(&e.source))?;
                let target = read_image(&base_dir.join(&e.target))?;
                let s = self.image_size;
                if source.shape() != [3, s, s] || target.shape() != [3, s, s] {
                    return Err(Error::dim(format!("sample {} is not {s}x{s}", e.id)));
                }
                Ok(PairedSample {
                    source,
                    target,
                    sample_id: e.id,
                })
            })
            .collect()
    }
}

/// Read a manifest file and all images it references.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let m = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let pairs = m.load_pairs(base)?;
    Ok((m, pairs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

/// Write `n_train + n_test` pairs and a manifest per split under `out_dir`.
/// Train ids are `0..n_train`, test ids follow.
pub fn generate_dataset(seed: u64, n_train: usize, n_test: usize, s: usize, out_dir: &Path) -> Result<GeneratedDataset> {
    if s < MIN_IMAGE_SIZE {
        return Err(Error::param(format!("image size {s} is below the minimum {MIN_IMAGE_SIZE}")));
    }
    let write_split = |split: Split, ids: std::ops::Range<u64>| -> Result<(DatasetManifest, PathBuf)> {
        let dir = out_dir.join(split.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        let mut entries = Vec::new();
        for id in ids {
            let pair = generate_pair(seed, id, s)?;
            let source = format!("{split}/{id:06}_src.ppm");
            let target = format!("{split}/{id:06}_tgt.ppm");
            write_image(&out_dir.join(&source), &pair.source)?;
            write_image(&out_dir.join(&target), &pair.target)?;
            entries.push(ManifestEntry { id, source, target });
        }
        let m = DatasetManifest {
            version: MANIFEST_VERSION.to_string(),
            seed,
            image_size: s,
            split,
            entries,
        };
        let path = out_dir.join(format!("{split}.manifest"));
        m.write(&path)?;
        Ok((m, path))
    };
    let (train, train_path) = write_split(Split::Train, 0..n_train as u64)?;
    let (test, test_path) = write_split(Split::Test, n_train as u64..(n_train + n_test) as u64)?;
    Ok(GeneratedDataset {
        train,
        test,
        train_path,
        test_path,
    })
}

/// Fill color of a target image: mean over fully covered pixels, which are
/// the pixels farthest from white.
pub fn target_color(target: &Tensor) -> Result<[f64; 3]> {
    let &[3, h, w] = target.shape() else {
        return Err(Error::dim("target_color expects [3, H, W]"));
    };
    let plane = h * w;
    let d = target.data();
    let whiteness: Vec<f64> = (0..plane)
        .map(|i| (0..3).map(|c| 1.0 - d[c * plane + i]).sum())
        .collect();
    let peak = whiteness.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::contract("target has no fill"));
    }
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for (i, &wv) in whiteness.iter().enumerate() {
        if wv >= peak - 1e-9 {
            for c in 0..3 {
                sum[c] += d[c * plane + i];
            }
            n += 1.0;
        }
    }
    Ok(sum.map(|v| v / n))
}

/// Dataset self-test: each source, perturbed with Gaussian pixel noise of
/// std `noise`, is matched to its nearest source (L2 over pixels); the match
/// counts as correct when the retrieved target has the query's fill color
/// (within 1e-6). Returns the fraction correct.
pub fn learnability_witness(pairs: &[PairedSample], noise: f64, rng: &Rng) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::param("learnability witness needs pairs"));
    }
    let colors = pairs
        .iter()
        .map(|p| target_color(&p.target))
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0;
    for (qi, q) in pairs.iter().enumerate() {
        let mut r = rng.split_index(qi as u64);
        let query: Vec<f64> = q.source.data().iter().map(|v| v + noise * r.normal()).collect();
        let best = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d: f64 = p.source.data().iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
                (i, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let same = colors[best].iter().zip(&colors[qi]).all(|(a, b)| (a - b).abs() < 1e-6);
        correct += usize::from(same);
    }
    Ok(correct as f64 / pairs.len() as f64)
}
