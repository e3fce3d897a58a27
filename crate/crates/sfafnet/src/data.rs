//! Synthetic blur corpus: procedural texture images, Gaussian/motion blur
//! degradation, PPM I/O, patch extraction and flip augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::normal_sample;

/// Planar 3×H×W image with values clamped to [0,1].
#[derive(Clone, Debug)]
pub struct Image {
    pub data: Vec<f32>,
    pub h: usize,
    pub w: usize,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            data: vec![0.0; 3 * h * w],
            h,
            w,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn clamp01(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Image {
        assert!(y0 + size <= self.h && x0 + size <= self.w);
        let mut out = Image::new(size, size);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    *out.at_mut(c, y, x) = self.at(c, y0 + y, x0 + x);
                }
            }
        }
        out
    }

    pub fn flip_h(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    *out.at_mut(c, y, x) = self.at(c, y, self.w - 1 - x);
                }
            }
        }
        out
    }

    pub fn flip_v(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    *out.at_mut(c, y, x) = self.at(c, self.h - 1 - y, x);
                }
            }
        }
        out
    }

    /// 2×2 average downsampling; requires even H and W.
    pub fn down2(&self) -> Result<Image> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::dim(format!(
                "down2 requires even size, got {}x{}",
                self.h, self.w
            )));
        }
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut out = Image::new(oh, ow);
        for c in 0..3 {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(c, y, x) = 0.25
                        * (self.at(c, 2 * y, 2 * x)
                            + self.at(c, 2 * y, 2 * x + 1)
                            + self.at(c, 2 * y + 1, 2 * x)
                            + self.at(c, 2 * y + 1, 2 * x + 1));
                }
            }
        }
        Ok(out)
    }
}

/// Aligned degraded/sharp sample.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub degraded: Image,
    pub sharp: Image,
    pub id: String,
}

/// Stable seed derivation (splitmix64 over a mixed pair).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Degradation kernels.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurKind {
    Gaussian { sigma: f64 },
    LinearMotion { length: f64, angle: f64 },
}

fn gaussian_kernel(sigma: f64) -> (Vec<f32>, usize) {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let k = 2 * radius + 1;
    let mut kernel = vec![0.0f32; k * k];
    let mut sum = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let dy = i as f64 - radius as f64;
            let dx = j as f64 - radius as f64;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            kernel[i * k + j] = v as f32;
            sum += v;
        }
    }
    for v in kernel.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
    (kernel, k)
}

fn motion_kernel(length: f64, angle: f64) -> (Vec<f32>, usize) {
    let radius = ((length - 1.0) / 2.0).ceil().max(1.0) as usize;
    let k = 2 * radius + 1;
    let mut kernel = vec![0.0f32; k * k];
    let steps = (length * 8.0).ceil() as usize;
    let (dy, dx) = (angle.sin(), angle.cos());
    for s in 0..=steps {
        let t = (s as f64 / steps as f64 - 0.5) * (length - 1.0);
        let y = radius as f64 + t * dy;
        let x = radius as f64 + t * dx;
        // Bilinear splat onto the grid.
        let (y0, x0) = (y.floor() as isize, x.floor() as isize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        for (oy, ox, wgt) in [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1, (1.0 - fy) * fx),
            (y0 + 1, x0, fy * (1.0 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        ] {
            if oy >= 0 && (oy as usize) < k && ox >= 0 && (ox as usize) < k {
                kernel[oy as usize * k + ox as usize] += wgt as f32;
            }
        }
    }
    let sum: f32 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    (kernel, k)
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let m = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    m.clamp(0, n - 1) as usize
}

fn convolve_reflect(img: &Image, kernel: &[f32], k: usize) -> Image {
    let radius = (k / 2) as isize;
    let mut out = Image::new(img.h, img.w);
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let mut acc = 0.0f32;
                for i in 0..k {
                    for j in 0..k {
                        let sy = reflect(y as isize + i as isize - radius, img.h);
                        let sx = reflect(x as isize + j as isize - radius, img.w);
                        acc += kernel[i * k + j] * img.at(c, sy, sx);
                    }
                }
                *out.at_mut(c, y, x) = acc;
            }
        }
    }
    out
}

/// Degrade a sharp image with a normalized blur kernel (reflect padding)
/// plus optional Gaussian noise, clamped back to [0,1].
pub fn make_blur_pair(
    sharp: &Image,
    kind: BlurKind,
    noise_sigma: f64,
    seed: u64,
    id: impl Into<String>,
) -> Result<ImagePair> {
    let (kernel, k) = match kind {
        BlurKind::Gaussian { sigma } => {
            if sigma <= 0.0 {
                return Err(Error::config(format!("blur sigma must be > 0, got {sigma}")));
            }
            gaussian_kernel(sigma)
        }
        BlurKind::LinearMotion { length, angle } => {
            if length < 1.0 {
                return Err(Error::config(format!("motion length must be >= 1, got {length}")));
            }
            motion_kernel(length, angle)
        }
    };
    let mut degraded = convolve_reflect(sharp, &kernel, k);
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in degraded.data.iter_mut() {
            *v += (noise_sigma * normal_sample(&mut rng)) as f32;
        }
    }
    degraded.clamp01();
    Ok(ImagePair {
        degraded,
        sharp: sharp.clone(),
        id: id.into(),
    })
}

/// Aligned random square crops, deterministic under the seed.
pub fn extract_patches(pair: &ImagePair, size: usize, count: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let (h, w) = (pair.sharp.h, pair.sharp.w);
    if size == 0 || size > h.min(w) {
        return Err(Error::dim(format!(
            "patch size {size} exceeds image size {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        out.push(ImagePair {
            degraded: pair.degraded.crop(y0, x0, size),
            sharp: pair.sharp.crop(y0, x0, size),
            id: format!("{}_p{}", pair.id, i),
        });
    }
    Ok(out)
}

/// Independent 50% horizontal and vertical flips, applied identically to
/// both images of the pair.
pub fn augment(pair: &ImagePair, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degraded = pair.degraded.clone();
    let mut sharp = pair.sharp.clone();
    if rng.gen::<bool>() {
        degraded = degraded.flip_h();
        sharp = sharp.flip_h();
    }
    if rng.gen::<bool>() {
        degraded = degraded.flip_v();
        sharp = sharp.flip_v();
    }
    ImagePair {
        degraded,
        sharp,
        id: pair.id.clone(),
    }
}

/// Supervision pyramid [full, full, half, quarter] matching the network's
/// four outputs.
pub fn target_pyramid(sharp: &Image) -> Result<[Image; 4]> {
    if sharp.h % 4 != 0 || sharp.w % 4 != 0 {
        return Err(Error::dim(format!(
            "target_pyramid needs sizes divisible by 4, got {}x{}",
            sharp.h, sharp.w
        )));
    }
    let half = sharp.down2()?;
    let quarter = half.down2()?;
    Ok([sharp.clone(), sharp.clone(), half, quarter])
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255) I/O.
// ---------------------------------------------------------------------------

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 3 * img.h * img.w);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.w, img.h).as_bytes());
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                let v = (img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read one whitespace/comment-delimited ASCII token from the header.
fn next_token<'a>(buf: &'a [u8], pos: &mut usize, path: &str) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::decode(path, "truncated header"));
    }
    Ok(&buf[start..*pos])
}

fn parse_usize(tok: &[u8], path: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::decode(path, format!("bad header token {:?}", String::from_utf8_lossy(tok))))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let pathstr = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(&pathstr, e))?;
    let mut pos = 0;
    if next_token(&buf, &mut pos, &pathstr)? != b"P6" {
        return Err(Error::decode(&pathstr, "not a binary PPM (P6) file"));
    }
    let w = parse_usize(next_token(&buf, &mut pos, &pathstr)?, &pathstr)?;
    let h = parse_usize(next_token(&buf, &mut pos, &pathstr)?, &pathstr)?;
    let maxval = parse_usize(next_token(&buf, &mut pos, &pathstr)?, &pathstr)?;
    if maxval != 255 {
        return Err(Error::decode(&pathstr, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // exactly one whitespace byte after maxval
    if buf.len() < pos + 3 * h * w {
        return Err(Error::decode(&pathstr, "truncated pixel data"));
    }
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                *img.at_mut(c, y, x) = buf[pos + (y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Procedural texture corpus.
// ---------------------------------------------------------------------------

/// Deterministic texture: a mixture of oriented sinusoids overlaid with a
/// few solid random triangles, giving both smooth regions and sharp edges.
pub fn synth_texture(seed: u64, index: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    let mut img = Image::new(size, size);

    let n_waves = rng.gen_range(2..=4);
    let waves: Vec<(f64, f64, f64, [f64; 3], [f64; 3])> = (0..n_waves)
        .map(|_| {
            let fy = rng.gen_range(1.0..5.0) / size as f64;
            let fx = rng.gen_range(1.0..5.0) / size as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
            ];
            let shift = [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ];
            (fy, fx, phase, amp, shift)
        })
        .collect();
    for c in 0..3 {
        let base = rng.gen_range(0.35..0.65);
        for y in 0..size {
            for x in 0..size {
                let mut v = base;
                for (fy, fx, phase, amp, shift) in &waves {
                    let arg = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase + shift[c];
                    v += amp[c] * arg.sin();
                }
                *img.at_mut(c, y, x) = v as f32;
            }
        }
    }

    // Solid triangles give the corpus hard edges to restore.
    let n_tris = rng.gen_range(2..=5);
    for _ in 0..n_tris {
        let pts: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)))
            .collect();
        let color = [
            rng.gen_range(0.0..1.0) as f32,
            rng.gen_range(0.0..1.0) as f32,
            rng.gen_range(0.0..1.0) as f32,
        ];
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
            (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
        };
        for y in 0..size {
            for x in 0..size {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let d0 = edge(pts[0], pts[1], p);
                let d1 = edge(pts[1], pts[2], p);
                let d2 = edge(pts[2], pts[0], p);
                let inside = (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0);
                if inside {
                    for c in 0..3 {
                        *img.at_mut(c, y, x) = color[c];
                    }
                }
            }
        }
    }
    img.clamp01();
    img
}

// ---------------------------------------------------------------------------
// On-disk corpus: <root>/{train,test}/blur_%04d.ppm + sharp_%04d.ppm.
// ---------------------------------------------------------------------------

pub struct Corpus {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
}

/// Generate `count` texture pairs (3/4 train, 1/4 test) under `root`.
pub fn write_corpus(
    root: &Path,
    count: usize,
    seed: u64,
    kind: BlurKind,
    noise_sigma: f64,
    size: usize,
) -> Result<Corpus> {
    let train_dir = root.join("train");
    let test_dir = root.join("test");
    for d in [&train_dir, &test_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    let train_count = (count * 3) / 4;
    let (mut tr, mut te) = (0usize, 0usize);
    for i in 0..count {
        let sharp = synth_texture(seed, i as u64, size);
        let pair = make_blur_pair(&sharp, kind, noise_sigma, mix_seed(seed, 0x5EED ^ i as u64), format!("{i:04}"))?;
        let (dir, idx) = if i < train_count {
            tr += 1;
            (&train_dir, tr - 1)
        } else {
            te += 1;
            (&test_dir, te - 1)
        };
        write_ppm(&dir.join(format!("blur_{idx:04}.ppm")), &pair.degraded)?;
        write_ppm(&dir.join(format!("sharp_{idx:04}.ppm")), &pair.sharp)?;
    }
    Ok(Corpus {
        train_dir,
        test_dir,
        train_count: tr,
        test_count: te,
    })
}

/// Load every blur/sharp pair from a directory following the corpus naming
/// convention, in ascending index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("blur_").and_then(|s| s.strip_suffix(".ppm")) {
            if let Ok(idx) = num.parse::<usize>() {
                indices.push(idx);
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::decode(
            dir.display().to_string(),
            "no blur_NNNN.ppm files found",
        ));
    }
    let mut pairs = Vec::with_capacity(indices.len());
    for idx in indices {
        let blur_path = dir.join(format!("blur_{idx:04}.ppm"));
        let sharp_path = dir.join(format!("sharp_{idx:04}.ppm"));
        pairs.push(ImagePair {
            degraded: read_ppm(&blur_path)?,
            sharp: read_ppm(&sharp_path)?,
            id: format!("{idx:04}"),
        });
    }
    Ok(pairs)
}
