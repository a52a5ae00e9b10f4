//! Persistence: the `WTNS` binary tensor container, image I/O, dataset
//! loading with channel normalization, JSON sidecars, and the encoded-state
//! dataset layout shared by the encode and train stages.
//!
//! `WTNS` byte layout (little-endian, normative):
//! magic `"WTNS"` (4 bytes), version `u16`, rank `u16`, one `u32` per axis,
//! then row-major IEEE-754 `f32` payload. Tensors are computed in `f64` and
//! narrowed to `f32` on write.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

const MAGIC: &[u8; 4] = b"WTNS";
const VERSION: u16 = 1;

fn tensor_bytes(t: &Tensor4) -> Result<Vec<u8>> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for d in dims {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Format(format!("axis extent {d} overflows the u32 dim field")))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes one tensor to `path` (write-to-temp, atomic rename).
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    atomic_write(path.as_ref(), &tensor_bytes(t)?)
}

fn parse_tensor(buf: &[u8], pos: &mut usize, path: &Path) -> Result<Tensor4> {
    let p = path.display();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Format(format!("{p}: truncated tensor record")));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(pos, 4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{p}: bad magic {magic:?}, expected \"WTNS\""
        )));
    }
    let version = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "{p}: unsupported version {version}, expected {VERSION}"
        )));
    }
    let rank = u16::from_le_bytes(take(pos, 2)?.try_into().unwrap());
    if rank != 4 {
        return Err(Error::Format(format!("{p}: rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    }
    let count: usize = dims.iter().product();
    let payload = take(pos, 4 * count)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor4::from_vec(dims, data)
}

/// Reads one tensor; trailing bytes are treated as corruption.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut pos = 0;
    let t = parse_tensor(&buf, &mut pos, path)?;
    if pos != buf.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after tensor payload",
            path.display(),
            buf.len() - pos
        )));
    }
    Ok(t)
}

/// Writes several tensors back to back into one container file.
pub fn write_tensor_seq(path: impl AsRef<Path>, tensors: &[Tensor4]) -> Result<()> {
    let mut bytes = Vec::new();
    for t in tensors {
        bytes.extend_from_slice(&tensor_bytes(t)?);
    }
    atomic_write(path.as_ref(), &bytes)
}

/// Reads records until end of file.
pub fn read_tensor_seq(path: impl AsRef<Path>) -> Result<Vec<Tensor4>> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        out.push(parse_tensor(&buf, &mut pos, path)?);
    }
    Ok(out)
}

/// SHA-256 of a tensor's stored (`f32` little-endian) payload bytes, hex
/// encoded. Used to pin encoded-state datasets to the dictionary that
/// produced them.
pub fn fingerprint(t: &Tensor4) -> String {
    let mut hasher = Sha256::new();
    for &v in t.data() {
        hasher.update((v as f32).to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    atomic_write(path.as_ref(), &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let mut buf = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    Ok(serde_json::from_slice(&buf)?)
}

/// Loads an 8-bit PNG or PNM image as `[1, C, H, W]` with values in `[0, 1]`
/// (C = 1 for grayscale, 3 otherwise; alpha is dropped).
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor4> {
    let img = image::open(path.as_ref())?;
    let (t, _) = dynamic_to_tensor(img);
    Ok(t)
}

fn dynamic_to_tensor(img: image::DynamicImage) -> (Tensor4, usize) {
    use image::DynamicImage as D;
    let gray = matches!(img, D::ImageLuma8(_) | D::ImageLuma16(_) | D::ImageLumaA8(_));
    if gray {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        let mut t = Tensor4::zeros([1, 1, h as usize, w as usize]);
        for (x, y, p) in g.enumerate_pixels() {
            *t.at_mut(0, 0, y as usize, x as usize) = p.0[0] as f64 / 255.0;
        }
        (t, 1)
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut t = Tensor4::zeros([1, 3, h as usize, w as usize]);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                *t.at_mut(0, c, y as usize, x as usize) = p.0[c] as f64 / 255.0;
            }
        }
        (t, 3)
    }
}

fn quantize(v: f64) -> u8 {
    // Clamp to [0, 1], then round half up.
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Saves a `[1, C, H, W]` tensor (C = 1 or 3) as an 8-bit image; the format
/// follows the file extension (`.png`, `.pgm`, `.ppm`). Values are clamped to
/// `[0, 1]` and quantized with round-half-up.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let [b, c, h, w] = t.dims();
    if b != 1 || (c != 1 && c != 3) {
        return Err(Error::shape(
            "save_image",
            format!("expected [1, 1|3, H, W], got {:?}", t.dims()),
        ));
    }
    let mut buf = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push(quantize(t.at(0, ch, y, x)));
            }
        }
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path.as_ref(), &buf, w as u32, h as u32, color)?;
    Ok(())
}

/// What to do when a directory holds images of different sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePolicy {
    /// Mixed sizes are an error.
    Strict,
    /// Center-crop everything to the smallest height/width present.
    CenterCrop,
}

/// Loads every recognized image (`png`, `pgm`, `ppm`, `pnm`) in `dir`, sorted
/// by filename. Returns the images alongside their filenames; an empty
/// directory yields an empty list (the caller decides whether to warn).
pub fn load_dataset(dir: impl AsRef<Path>, policy: SizePolicy) -> Result<Vec<(String, Tensor4)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("pgm") | Some("ppm") | Some("pnm")
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        out.push((name, load_image(p)?));
    }
    if out.is_empty() {
        return Ok(out);
    }
    let channels = out[0].1.dims()[1];
    if out.iter().any(|(_, t)| t.dims()[1] != channels) {
        return Err(Error::shape(
            "load_dataset",
            "mixed channel counts in dataset".to_string(),
        ));
    }
    let min_h = out.iter().map(|(_, t)| t.dims()[2]).min().unwrap();
    let min_w = out.iter().map(|(_, t)| t.dims()[3]).min().unwrap();
    let mixed = out
        .iter()
        .any(|(_, t)| t.dims()[2] != min_h || t.dims()[3] != min_w);
    if mixed {
        match policy {
            SizePolicy::Strict => {
                return Err(Error::shape(
                    "load_dataset",
                    format!("mixed image sizes (smallest {min_h}x{min_w}); pass a center-crop policy to accept"),
                ))
            }
            SizePolicy::CenterCrop => {
                for (_, t) in &mut out {
                    *t = center_crop(t, min_h, min_w);
                }
            }
        }
    }
    Ok(out)
}

fn center_crop(t: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let [_, c, th, tw] = t.dims();
    let oy = (th - h) / 2;
    let ox = (tw - w) / 2;
    let mut out = Tensor4::zeros([1, c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(0, ch, y, x) = t.at(0, ch, y + oy, x + ox);
            }
        }
    }
    out
}

/// Dataset-global per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Identity statistics (mean 0, std 1) for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Computes dataset-global statistics over all pixels of all images.
    pub fn compute(images: &[Tensor4]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("cannot compute stats of an empty dataset".into()))?;
        let channels = first.dims()[1];
        let mut sum = vec![0.0; channels];
        let mut sum_sq = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for img in images {
            let [b, c, h, w] = img.dims();
            if c != channels {
                return Err(Error::shape("channel_stats", "mixed channel counts"));
            }
            for bi in 0..b {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let v = img.at(bi, ch, y, x);
                            sum[ch] += v;
                            sum_sq[ch] += v * v;
                            count[ch] += 1;
                        }
                    }
                }
            }
        }
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for ch in 0..channels {
            let n = count[ch] as f64;
            mean[ch] = sum[ch] / n;
            let var = (sum_sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
            std[ch] = var.sqrt().max(1e-6);
        }
        Ok(ChannelStats { mean, std })
    }

    /// `(x - mean) / std`, per channel.
    pub fn normalize(&self, t: &Tensor4) -> Result<Tensor4> {
        self.affine(t, |v, m, s| (v - m) / s)
    }

    /// `x * std + mean`, per channel (inverse of [`Self::normalize`]).
    pub fn denormalize(&self, t: &Tensor4) -> Result<Tensor4> {
        self.affine(t, |v, m, s| v * s + m)
    }

    fn affine(&self, t: &Tensor4, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor4> {
        let [_, c, _, _] = t.dims();
        if c != self.mean.len() {
            return Err(Error::shape(
                "channel_stats",
                format!("{} channels vs {} stats", c, self.mean.len()),
            ));
        }
        let mut out = t.clone();
        let [b, _, h, w] = t.dims();
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = out.at(bi, ch, y, x);
                        *out.at_mut(bi, ch, y, x) = f(v, self.mean[ch], self.std[ch]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One encoded sample: the source image, the sparsity level it was encoded
/// at, the stored membrane-state file, and the nonzero count of its
/// thresholded activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateEntry {
    pub image: String,
    pub lambda: f64,
    pub state: String,
    pub l0: usize,
}

/// Manifest of an encoded-state dataset (`manifest.json` next to a `states/`
/// directory of per-sample tensor files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateManifest {
    /// Code-space dims `[M, H', W']` shared by every stored state.
    pub code_dims: [usize; 3],
    /// Image dims `[C, H, W]` of the source dataset.
    pub image_dims: [usize; 3],
    /// Global min/max over all stored states; targets are scaled to `[0, 1]`
    /// with these during predictor training.
    pub t_min: f64,
    pub t_max: f64,
    /// Fingerprint of the dictionary the states were encoded with.
    pub dict_fingerprint: String,
    pub entries: Vec<StateEntry>,
}

impl StateManifest {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(Self::manifest_path(dir), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: StateManifest = read_json(Self::manifest_path(dir))?;
        let mut seen = std::collections::HashSet::new();
        for e in &manifest.entries {
            if !seen.insert(&e.state) {
                return Err(Error::Format(format!(
                    "manifest lists state file {} twice",
                    e.state
                )));
            }
        }
        Ok(manifest)
    }
}

/// Writes a text file atomically (CSV reports and the like).
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    atomic_write(path.as_ref(), text.as_bytes())
}

pub fn write_csv(path: impl AsRef<Path>, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_text(path, &s)
}
