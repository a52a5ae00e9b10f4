//! Dense rank-4 tensors and the convolution primitives everything else
//! composes: strided cross-correlation, its exact adjoint (transposed
//! convolution), kernel cross-correlation (Gram) tensors, and the kernel
//! gradient used by dictionary updates and network training.
//!
//! Layout is row-major `(batch, channels, height, width)`. All arithmetic is
//! carried out in `f64`; file storage narrows to `f32` (see [`crate::storage`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rank-4 array of `f64` values in row-major `(B, C, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match dims {:?} (= {} elements)",
                    data.len(),
                    dims,
                    expected
                ),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(
                "tensor",
                format!("non-finite value at flat index {pos}"),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.dims[0] && c < self.dims[1] && y < self.dims[2] && x < self.dims[3]);
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(b, c, y, x);
        &mut self.data[i]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "zip_map",
                format!("dims {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`, in place.
    pub fn add_scaled(&mut self, other: &Tensor4, alpha: f64) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add_scaled",
                format!("dims {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "dot",
                format!("dims {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts batch element `b` as a `[1, C, H, W]` tensor.
    pub fn batch_slice(&self, b: usize) -> Tensor4 {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenates `[1, C, H, W]` tensors along the batch axis.
    pub fn stack_batches(items: &[&Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack_batches", "empty input".to_string()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.dims[1] != c || t.dims[2] != h || t.dims[3] != w {
                return Err(Error::shape(
                    "stack_batches",
                    format!("dims {:?} vs [_, {c}, {h}, {w}]", t.dims),
                ));
            }
            for b in 0..t.dims[0] {
                let per = c * h * w;
                data.extend_from_slice(&t.data[b * per..(b + 1) * per]);
            }
        }
        let batches = data.len() / (c * h * w);
        Ok(Tensor4 {
            dims: [batches, c, h, w],
            data,
        })
    }

    /// Rounds every value through `f32`, the storage precision.
    pub fn round_to_f32(&self) -> Tensor4 {
        self.map(|v| v as f32 as f64)
    }
}

/// Zero-padding policy. `Same` keeps `ceil(extent / stride)` output cells per
/// axis, splitting the pad evenly with the extra pixel on the bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
}

/// Kernel size, stride, and padding for the convolution primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn same(kernel_h: usize, kernel_w: usize, stride_h: usize, stride_w: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Config("kernel dims must be >= 1".into()));
        }
        if stride_h == 0 || stride_w == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(ConvGeometry {
            kernel_h,
            kernel_w,
            stride_h,
            stride_w,
            padding: Padding::Same,
        })
    }

    /// Code-space dims produced for an `h x w` input.
    pub fn code_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride_h), w.div_ceil(self.stride_w))
    }

    /// Pad inserted before the first row (the leftover pixel goes after).
    pub fn pad_before(&self, extent: usize, kernel: usize, stride: usize) -> usize {
        let out = extent.div_ceil(stride);
        let total = ((out - 1) * stride + kernel).saturating_sub(extent);
        total / 2
    }

    fn pads(&self, h: usize, w: usize) -> (isize, isize) {
        (
            self.pad_before(h, self.kernel_h, self.stride_h) as isize,
            self.pad_before(w, self.kernel_w, self.stride_w) as isize,
        )
    }
}

fn check_kernels(op: &'static str, kernels: &Tensor4, geom: &ConvGeometry) -> Result<()> {
    let [_, _, kh, kw] = kernels.dims();
    if kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(Error::shape(
            op,
            format!(
                "kernel spatial dims ({kh}, {kw}) disagree with geometry ({}, {})",
                geom.kernel_h, geom.kernel_w
            ),
        ));
    }
    Ok(())
}

/// Strided cross-correlation of `input [B,C,H,W]` with `kernels [M,C,kH,kW]`
/// under zero `Same` padding, producing `[B,M,H',W']`.
pub fn correlate(input: &Tensor4, kernels: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    check_kernels("correlate", kernels, geom)?;
    let [batch, in_c, h, w] = input.dims();
    let [m, kc, kh, kw] = kernels.dims();
    if kc != in_c {
        return Err(Error::shape(
            "correlate",
            format!("channel axis: input has {in_c} channels, kernels expect {kc}"),
        ));
    }
    let (out_h, out_w) = geom.code_dims(h, w);
    let (pad_y, pad_x) = geom.pads(h, w);
    let mut out = Tensor4::zeros([batch, m, out_h, out_w]);

    let per_out = m * out_h * out_w;
    let per_in = in_c * h * w;
    let kdata = kernels.data();
    let idata = input.data();
    out.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(b, ochunk)| {
            let islice = &idata[b * per_in..(b + 1) * per_in];
            for mi in 0..m {
                for oy in 0..out_h {
                    let base_y = oy as isize * geom.stride_h as isize - pad_y;
                    let ky0 = (-base_y).max(0) as usize;
                    let ky1 = kh.min((h as isize - base_y).max(0) as usize);
                    for ox in 0..out_w {
                        let base_x = ox as isize * geom.stride_w as isize - pad_x;
                        let kx0 = (-base_x).max(0) as usize;
                        let kx1 = kw.min((w as isize - base_x).max(0) as usize);
                        let mut acc = 0.0;
                        for c in 0..in_c {
                            for ky in ky0..ky1 {
                                let iy = (base_y + ky as isize) as usize;
                                let irow = (c * h + iy) * w;
                                let krow = ((mi * kc + c) * kh + ky) * kw;
                                for kx in kx0..kx1 {
                                    let ix = (base_x + kx as isize) as usize;
                                    acc += kdata[krow + kx] * islice[irow + ix];
                                }
                            }
                        }
                        ochunk[(mi * out_h + oy) * out_w + ox] = acc;
                    }
                }
            }
        });
    Ok(out)
}

/// Exact linear adjoint of [`correlate`]: scatter-adds each kernel scaled by
/// its coefficient back into a `[B,C,out_h,out_w]` image.
pub fn transposed_convolve(
    coeffs: &Tensor4,
    kernels: &Tensor4,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor4> {
    check_kernels("transposed_convolve", kernels, geom)?;
    let [batch, m, ch, cw] = coeffs.dims();
    let [km, kc, kh, kw] = kernels.dims();
    if km != m {
        return Err(Error::shape(
            "transposed_convolve",
            format!("feature axis: coeffs carry {m} maps, kernel bank has {km}"),
        ));
    }
    let (want_h, want_w) = geom.code_dims(out_h, out_w);
    if (ch, cw) != (want_h, want_w) {
        return Err(Error::shape(
            "transposed_convolve",
            format!(
                "code dims ({ch}, {cw}) inconsistent with target ({out_h}, {out_w}) -> ({want_h}, {want_w})"
            ),
        ));
    }
    let (pad_y, pad_x) = geom.pads(out_h, out_w);
    let mut out = Tensor4::zeros([batch, kc, out_h, out_w]);

    let per_out = kc * out_h * out_w;
    let per_code = m * ch * cw;
    let kdata = kernels.data();
    let cdata = coeffs.data();
    out.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(b, ochunk)| {
            let cslice = &cdata[b * per_code..(b + 1) * per_code];
            for mi in 0..m {
                for oy in 0..ch {
                    let base_y = oy as isize * geom.stride_h as isize - pad_y;
                    let ky0 = (-base_y).max(0) as usize;
                    let ky1 = kh.min((out_h as isize - base_y).max(0) as usize);
                    for ox in 0..cw {
                        let v = cslice[(mi * ch + oy) * cw + ox];
                        if v == 0.0 {
                            continue;
                        }
                        let base_x = ox as isize * geom.stride_w as isize - pad_x;
                        let kx0 = (-base_x).max(0) as usize;
                        let kx1 = kw.min((out_w as isize - base_x).max(0) as usize);
                        for c in 0..kc {
                            for ky in ky0..ky1 {
                                let iy = (base_y + ky as isize) as usize;
                                let orow = (c * out_h + iy) * out_w;
                                let krow = ((mi * kc + c) * kh + ky) * kw;
                                for kx in kx0..kx1 {
                                    let ix = (base_x + kx as isize) as usize;
                                    ochunk[orow + ix] += v * kdata[krow + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Cross-correlation of every kernel pair at stride-multiple offsets.
///
/// Entry `(i, j, L_h + dy, L_w + dx)` is the inner product of kernel `i` with
/// kernel `j` shifted by `(stride_h * dy, stride_w * dx)` pixels; shifts that
/// exit the kernel support contribute zero. The zero-lag diagonal holds the
/// squared kernel norms.
pub fn kernel_gram(kernels: &Tensor4, geom: &ConvGeometry) -> Tensor4 {
    let [m, c, kh, kw] = kernels.dims();
    let lag_h = kh.div_ceil(geom.stride_h) - 1;
    let lag_w = kw.div_ceil(geom.stride_w) - 1;
    let (gh, gw) = (2 * lag_h + 1, 2 * lag_w + 1);
    let mut gram = Tensor4::zeros([m, m, gh, gw]);
    for i in 0..m {
        for j in 0..m {
            for dy in -(lag_h as isize)..=(lag_h as isize) {
                for dx in -(lag_w as isize)..=(lag_w as isize) {
                    let sy = dy * geom.stride_h as isize;
                    let sx = dx * geom.stride_w as isize;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            let jy = ky as isize + sy;
                            if jy < 0 || jy >= kh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let jx = kx as isize + sx;
                                if jx < 0 || jx >= kw as isize {
                                    continue;
                                }
                                acc += kernels.at(i, ch, ky, kx)
                                    * kernels.at(j, ch, jy as usize, jx as usize);
                            }
                        }
                    }
                    *gram.at_mut(i, j, (dy + lag_h as isize) as usize, (dx + lag_w as isize) as usize) =
                        acc;
                }
            }
        }
    }
    gram
}

/// Applies the precomputed Gram tensor to a code tensor so that the result
/// equals `correlate(transposed_convolve(a), kernels)` for an `img_h x img_w`
/// image, boundary cells included.
///
/// The stationary code-space convolution with the Gram tensor is exact in the
/// interior; near the borders the reconstruction crop discards scattered mass,
/// so the contribution of that outside ring is computed directly from the
/// kernels and subtracted.
pub fn gram_apply(
    gram: &Tensor4,
    coeffs: &Tensor4,
    kernels: &Tensor4,
    geom: &ConvGeometry,
    img_h: usize,
    img_w: usize,
) -> Result<Tensor4> {
    let [batch, m, ch, cw] = coeffs.dims();
    let [gm, gm2, gh, gw] = gram.dims();
    if gm != m || gm2 != m {
        return Err(Error::shape(
            "gram_apply",
            format!("gram is {gm}x{gm2}, coeffs carry {m} maps"),
        ));
    }
    let lag_h = (gh - 1) as isize / 2;
    let lag_w = (gw - 1) as isize / 2;
    let mut out = Tensor4::zeros([batch, m, ch, cw]);
    let per_code = m * ch * cw;
    let gdata = gram.data();
    let cdata = coeffs.data();
    out.data_mut()
        .par_chunks_mut(per_code)
        .enumerate()
        .for_each(|(b, ochunk)| {
            let cslice = &cdata[b * per_code..(b + 1) * per_code];
            for i in 0..m {
                for py in 0..ch {
                    for px in 0..cw {
                        let mut acc = 0.0;
                        for j in 0..m {
                            for dy in -lag_h..=lag_h {
                                let qy = py as isize - dy;
                                if qy < 0 || qy >= ch as isize {
                                    continue;
                                }
                                let grow = ((i * m + j) * gh + (dy + lag_h) as usize) * gw;
                                let crow = (j * ch + qy as usize) * cw;
                                for dx in -lag_w..=lag_w {
                                    let qx = px as isize - dx;
                                    if qx < 0 || qx >= cw as isize {
                                        continue;
                                    }
                                    acc += gdata[grow + (dx + lag_w) as usize]
                                        * cslice[crow + qx as usize];
                                }
                            }
                        }
                        ochunk[(i * ch + py) * cw + px] = acc;
                    }
                }
            }
        });

    subtract_ring_correction(&mut out, coeffs, kernels, geom, img_h, img_w)?;
    Ok(out)
}

/// Subtracts the contribution of scattered mass that falls outside the
/// `img_h x img_w` image (and is therefore cropped away on reconstruction).
fn subtract_ring_correction(
    out: &mut Tensor4,
    coeffs: &Tensor4,
    kernels: &Tensor4,
    geom: &ConvGeometry,
    img_h: usize,
    img_w: usize,
) -> Result<()> {
    let [_, m, ch, cw] = coeffs.dims();
    let [_, kc, kh, kw] = kernels.dims();
    let pad_y = geom.pad_before(img_h, kh, geom.stride_h);
    let pad_x = geom.pad_before(img_w, kw, geom.stride_w);
    let span_h = (ch - 1) * geom.stride_h + kh;
    let span_w = (cw - 1) * geom.stride_w + kw;
    // No pad and the scatter never leaves the image: nothing was cropped.
    if pad_y == 0 && pad_x == 0 && span_h <= img_h && span_w <= img_w {
        return Ok(());
    }
    let canvas_h = span_h.max(pad_y + img_h);
    let canvas_w = span_w.max(pad_x + img_w);

    let per_code = m * ch * cw;
    let per_out = per_code;
    let kdata = kernels.data();
    let cdata = coeffs.data();
    out.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(b, ochunk)| {
            let cslice = &cdata[b * per_code..(b + 1) * per_code];
            // Scatter into the uncropped canvas, then keep only the ring.
            let mut canvas = vec![0.0; kc * canvas_h * canvas_w];
            for mi in 0..m {
                for oy in 0..ch {
                    for ox in 0..cw {
                        let v = cslice[(mi * ch + oy) * cw + ox];
                        if v == 0.0 {
                            continue;
                        }
                        for c in 0..kc {
                            for ky in 0..kh {
                                let yy = oy * geom.stride_h + ky;
                                let crow = (c * canvas_h + yy) * canvas_w;
                                let krow = ((mi * kc + c) * kh + ky) * kw;
                                for kx in 0..kw {
                                    canvas[crow + ox * geom.stride_w + kx] += v * kdata[krow + kx];
                                }
                            }
                        }
                    }
                }
            }
            for c in 0..kc {
                for yy in pad_y..pad_y + img_h {
                    let crow = (c * canvas_h + yy) * canvas_w;
                    for xx in pad_x..pad_x + img_w {
                        canvas[crow + xx] = 0.0;
                    }
                }
            }
            for i in 0..m {
                for oy in 0..ch {
                    for ox in 0..cw {
                        let mut acc = 0.0;
                        for c in 0..kc {
                            for ky in 0..kh {
                                let yy = oy * geom.stride_h + ky;
                                let crow = (c * canvas_h + yy) * canvas_w;
                                let krow = ((i * kc + c) * kh + ky) * kw;
                                for kx in 0..kw {
                                    acc += kdata[krow + kx] * canvas[crow + ox * geom.stride_w + kx];
                                }
                            }
                        }
                        ochunk[(i * ch + oy) * cw + ox] -= acc;
                    }
                }
            }
        });
    Ok(())
}

/// Gradient of `<grad_out, correlate(input, kernels)>` with respect to the
/// kernels: correlates each code-space gradient map against the input windows.
pub fn kernel_grad(
    input: &Tensor4,
    grad_out: &Tensor4,
    geom: &ConvGeometry,
    kernel_channels: usize,
) -> Result<Tensor4> {
    let [batch, in_c, h, w] = input.dims();
    let [gb, m, gh, gw] = grad_out.dims();
    if gb != batch {
        return Err(Error::shape(
            "kernel_grad",
            format!("batch axis: input has {batch}, grad has {gb}"),
        ));
    }
    if in_c != kernel_channels {
        return Err(Error::shape(
            "kernel_grad",
            format!("channel axis: input has {in_c}, kernels expect {kernel_channels}"),
        ));
    }
    let (want_h, want_w) = geom.code_dims(h, w);
    if (gh, gw) != (want_h, want_w) {
        return Err(Error::shape(
            "kernel_grad",
            format!("code dims ({gh}, {gw}) vs expected ({want_h}, {want_w})"),
        ));
    }
    let (pad_y, pad_x) = geom.pads(h, w);
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let mut grad = Tensor4::zeros([m, in_c, kh, kw]);
    let per_k = in_c * kh * kw;
    let idata = input.data();
    let gdata = grad_out.data();
    grad.data_mut()
        .par_chunks_mut(per_k)
        .enumerate()
        .for_each(|(mi, kchunk)| {
            for b in 0..batch {
                let ibase = b * in_c * h * w;
                let gbase = (b * m + mi) * gh * gw;
                for oy in 0..gh {
                    let base_y = oy as isize * geom.stride_h as isize - pad_y;
                    let ky0 = (-base_y).max(0) as usize;
                    let ky1 = kh.min((h as isize - base_y).max(0) as usize);
                    for ox in 0..gw {
                        let g = gdata[gbase + oy * gw + ox];
                        if g == 0.0 {
                            continue;
                        }
                        let base_x = ox as isize * geom.stride_w as isize - pad_x;
                        let kx0 = (-base_x).max(0) as usize;
                        let kx1 = kw.min((w as isize - base_x).max(0) as usize);
                        for c in 0..in_c {
                            for ky in ky0..ky1 {
                                let iy = (base_y + ky as isize) as usize;
                                let irow = ibase + (c * h + iy) * w;
                                let krow = (c * kh + ky) * kw;
                                for kx in kx0..kx1 {
                                    let ix = (base_x + kx as isize) as usize;
                                    kchunk[krow + kx] += g * idata[irow + ix];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(grad)
}
