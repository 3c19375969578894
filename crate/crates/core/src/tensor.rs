//! Dense `(channels, height, width)` tensors, label maps, and the scalar
//! kernels used by the staged networks.
//!
//! Every kernel is a pure function with a fixed accumulation order, so equal
//! inputs give bit-identical outputs on every run and thread.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};

/// Per-pixel class index.
pub type Label = u8;

/// Ground-truth pixels carrying this value are excluded from scoring.
pub const IGNORE_LABEL: Label = 255;

/// Largest class count representable next to [`IGNORE_LABEL`].
pub const MAX_CLASSES: usize = IGNORE_LABEL as usize;

/// Dense real-valued array laid out channel-major, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(shape_err!(
                "{} values for a {channels}x{height}x{width} tensor (expected {expected})",
                data.len()
            ));
        }
        ensure_finite("tensor construction", &data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds a tensor by evaluating `f(channel, row, column)` in storage order.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel plane as a contiguous slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Spatial crop keeping all channels.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height,
            width,
            data,
        })
    }

    fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

/// Per-pixel labels with a reserved ignore value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!(
                "{} labels for a {height}x{width} map",
                labels.len()
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    /// Checks that every label is a class below `n_classes` or the ignore value.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= n_classes)
        {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as u32,
                n_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut labels = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            labels.extend_from_slice(&self.labels[row + left..row + left + width]);
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }
}

/// Convolution filter bank of shape `[out_channels, in_channels, kernel_h, kernel_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernels {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f32>,
}

impl ConvKernels {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f32>,
    ) -> Result<Self> {
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(shape_err!(
                "{} weights for a {out_channels}x{in_channels}x{kernel_h}x{kernel_w} bank",
                weights.len()
            ));
        }
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(invalid!(
                "kernel dims must be odd, got {kernel_h}x{kernel_w}"
            ));
        }
        ensure_finite("kernel construction", &weights)?;
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Dims in storage order.
    pub fn dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }
}

/// Output size of a sliding window along one axis, or `None` if empty.
fn window_out(len: usize, pad: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < window {
        None
    } else {
        Some((padded - window) / stride + 1)
    }
}

/// 2-D cross-correlation with zero padding.
///
/// For each output value the sum runs over input channels (outer), then kernel
/// rows, then kernel columns, starting from zero; the bias is added last.
pub fn conv2d(
    input: &Tensor,
    kernels: &ConvKernels,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if input.channels != kernels.in_channels {
        return Err(shape_err!(
            "conv2d input has {} channels, kernels expect {}",
            input.channels,
            kernels.in_channels
        ));
    }
    if bias.len() != kernels.out_channels {
        return Err(shape_err!(
            "conv2d bias has {} entries for {} output channels",
            bias.len(),
            kernels.out_channels
        ));
    }
    if stride == 0 {
        return Err(invalid!("conv2d stride must be >= 1"));
    }
    let (kh, kw) = (kernels.kernel_h, kernels.kernel_w);
    let out_h = window_out(input.height, pad, kh, stride);
    let out_w = window_out(input.width, pad, kw, stride);
    let (out_h, out_w) = match (out_h, out_w) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(shape_err!(
                "conv2d output is empty for {}x{} input, {kh}x{kw} kernel, pad {pad}",
                input.height,
                input.width
            ))
        }
    };

    let (in_h, in_w) = (input.height as isize, input.width as isize);
    let mut out = Vec::with_capacity(kernels.out_channels * out_h * out_w);
    for oc in 0..kernels.out_channels {
        let bank =
            &kernels.weights[oc * kernels.in_channels * kh * kw..][..kernels.in_channels * kh * kw];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0f32;
                for ic in 0..kernels.in_channels {
                    let plane = input.plane(ic);
                    let filt = &bank[ic * kh * kw..][..kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= in_h {
                            continue;
                        }
                        let row = &plane[iy as usize * input.width..][..input.width];
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= in_w {
                                continue;
                            }
                            acc += filt[ky * kw + kx] * row[ix as usize];
                        }
                    }
                }
                out.push(acc + bias[oc]);
            }
        }
    }
    ensure_finite("conv2d", &out)?;
    Ok(Tensor {
        channels: kernels.out_channels,
        height: out_h,
        width: out_w,
        data: out,
    })
}

/// Per-channel max pooling without padding.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    if window == 0 || stride == 0 {
        return Err(invalid!("maxpool2d window and stride must be >= 1"));
    }
    if window > input.height || window > input.width {
        return Err(shape_err!(
            "maxpool2d window {window} larger than {}x{} input",
            input.height,
            input.width
        ));
    }
    let out_h = (input.height - window) / stride + 1;
    let out_w = (input.width - window) / stride + 1;
    let mut out = Vec::with_capacity(input.channels * out_h * out_w);
    for c in 0..input.channels {
        let plane = input.plane(c);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f32::NEG_INFINITY;
                for wy in 0..window {
                    let row = &plane[(oy * stride + wy) * input.width..];
                    for wx in 0..window {
                        let v = row[ox * stride + wx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(Tensor {
        channels: input.channels,
        height: out_h,
        width: out_w,
        data: out,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input
        .data
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    input.with_data(data)
}

/// Bilinear upsampling by an integer factor with aligned corners.
///
/// Output row `i` samples input row `i * (H - 1) / (outH - 1)` (row 0 when
/// `outH == 1`); columns likewise. Interpolation is `a + w * (b - a)` clamped
/// to `[min(a, b), max(a, b)]`, so constants stay exact and the output never
/// leaves the input range.
pub fn upsample_bilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid!("upsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let out_h = input.height * factor;
    let out_w = input.width * factor;
    let rows = sample_positions(input.height, out_h);
    let cols = sample_positions(input.width, out_w);

    let mut out = Vec::with_capacity(input.channels * out_h * out_w);
    for c in 0..input.channels {
        let plane = input.plane(c);
        for &(y0, y1, wy) in &rows {
            let r0 = &plane[y0 * input.width..][..input.width];
            let r1 = &plane[y1 * input.width..][..input.width];
            for &(x0, x1, wx) in &cols {
                let top = lerp(r0[x0], r0[x1], wx);
                let bottom = lerp(r1[x0], r1[x1], wx);
                out.push(lerp(top, bottom, wy));
            }
        }
    }
    ensure_finite("upsample_bilinear", &out)?;
    Ok(Tensor {
        channels: input.channels,
        height: out_h,
        width: out_w,
        data: out,
    })
}

fn sample_positions(len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|i| {
            if out_len == 1 || len == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (len - 1)) as f32 / (out_len - 1) as f32;
            let lo = (libm::floorf(pos) as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, pos - lo as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, w: f32) -> f32 {
    let v = a + w * (b - a);
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    v.clamp(lo, hi)
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
pub fn argmax_channels(scores: &Tensor) -> Result<LabelMap> {
    if scores.channels == 0 || scores.channels > MAX_CLASSES {
        return Err(invalid!(
            "argmax needs 1..={MAX_CLASSES} channels, got {}",
            scores.channels
        ));
    }
    let n = scores.height * scores.width;
    let mut best = scores.plane(0).to_vec();
    let mut labels = vec![0 as Label; n];
    for c in 1..scores.channels {
        for (i, &v) in scores.plane(c).iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                labels[i] = c as Label;
            }
        }
    }
    Ok(LabelMap {
        height: scores.height,
        width: scores.width,
        labels,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

fn zip_with(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{op} of {:?} and {:?}", a.dims(), b.dims()));
    }
    let data: Vec<f32> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    ensure_finite(op, &data)?;
    Ok(a.with_data(data))
}

fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(c: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
        Tensor::new(c, h, w, data.to_vec()).unwrap()
    }

    fn identity_1x1(channels: usize) -> ConvKernels {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        ConvKernels::new(channels, channels, 1, 1, w).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t(1, 2, 3, &[1.0, -2.0, 3.5, 0.0, 7.0, -1.25]);
        let out = conv2d(&input, &identity_1x1(1), &[0.0], 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let input = Tensor::filled(1, 3, 3, 1.0);
        let k = ConvKernels::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &k, &[0.0], 1, 0).unwrap();
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_output_dims_with_stride_and_pad() {
        let input = Tensor::filled(2, 8, 8, 0.5);
        let k = ConvKernels::new(4, 2, 3, 3, vec![0.1; 4 * 2 * 9]).unwrap();
        let out = conv2d(&input, &k, &[0.0; 4], 2, 1).unwrap();
        assert_eq!(out.dims(), (4, 4, 4));
    }

    #[test]
    fn conv_zero_padding_at_corner() {
        // Corner output of a padded 3x3 all-ones kernel sees 4 input pixels.
        let input = Tensor::filled(1, 4, 4, 1.0);
        let k = ConvKernels::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &k, &[0.5], 1, 1).unwrap();
        assert_eq!(out.get(0, 0, 0), 4.5);
        assert_eq!(out.get(0, 1, 1), 9.5);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor::zeros(3, 4, 4);
        let k = ConvKernels::new(1, 2, 3, 3, vec![0.0; 18]).unwrap();
        assert!(matches!(
            conv2d(&input, &k, &[0.0], 1, 1),
            Err(Error::Shape(_))
        ));
        let k = ConvKernels::new(1, 3, 3, 3, vec![0.0; 27]).unwrap();
        assert!(matches!(
            conv2d(&Tensor::zeros(3, 1, 1), &k, &[0.0], 1, 0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv2d(&input, &k, &[0.0, 1.0], 1, 0),
            Err(Error::Shape(_))
        ));
        assert!(conv2d(&input, &k, &[0.0], 0, 0).is_err());
        assert!(ConvKernels::new(1, 1, 2, 2, vec![0.0; 4]).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let out = maxpool2d(&t(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);

        let input = t(1, 2, 2, &[1.0, -2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d(&input, 1, 1).unwrap(), input);

        let ascending: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = maxpool2d(&t(1, 4, 4, &ascending), 2, 2).unwrap();
        assert_eq!(out.dims(), (1, 2, 2));
        assert_eq!(out.data(), &[5.0, 7.0, 13.0, 15.0]);

        assert!(maxpool2d(&Tensor::zeros(1, 2, 2), 3, 1).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(
            relu(&t(1, 1, 3, &[-1.0, 0.0, 2.0])).data(),
            &[0.0, 0.0, 2.0]
        );
        let pos = t(1, 1, 3, &[0.0, 1.0, 2.0]);
        assert_eq!(relu(&pos), pos);
        assert_eq!(relu(&t(1, 1, 2, &[-3.0, -0.5])).data(), &[0.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let input = t(2, 2, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(upsample_bilinear(&input, 1).unwrap(), input);

        let c = Tensor::filled(3, 3, 2, 0.1);
        let up = upsample_bilinear(&c, 4).unwrap();
        assert_eq!(up.dims(), (3, 12, 8));
        assert!(up.data().iter().all(|&v| v == 0.1));

        let up = upsample_bilinear(&t(1, 1, 2, &[0.0, 1.0]), 2).unwrap();
        assert_eq!(up.dims(), (1, 2, 4));
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in 0..2 {
            for (x, e) in expected.iter().enumerate() {
                assert!((up.get(0, row, x) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn argmax_examples() {
        let one = t(1, 1, 3, &[0.3, -1.0, 5.0]);
        assert_eq!(argmax_channels(&one).unwrap().labels(), &[0, 0, 0]);

        let two = t(2, 1, 2, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(argmax_channels(&two).unwrap().labels(), &[1, 1]);

        let tie = t(3, 1, 2, &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]);
        assert_eq!(argmax_channels(&tie).unwrap().labels(), &[0, 1]);
    }

    #[test]
    fn add_examples() {
        let a = t(1, 1, 2, &[1.0, 2.0]);
        assert_eq!(add(&a, &Tensor::zeros(1, 1, 2)).unwrap(), a);
        assert_eq!(
            add(&a, &t(1, 1, 2, &[3.0, 4.0])).unwrap().data(),
            &[4.0, 6.0]
        );
        let neg = t(1, 1, 2, &[-1.0, -2.0]);
        assert_eq!(add(&a, &neg).unwrap().data(), &[0.0, 0.0]);
        assert!(add(&a, &Tensor::zeros(1, 2, 1)).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(matches!(
            Tensor::new(1, 1, 1, vec![f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        let big = t(1, 1, 1, &[f32::MAX]);
        assert!(matches!(add(&big, &big), Err(Error::NonFinite("add"))));
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..7, 1usize..7).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(-10.0f32..10.0, c * h * w)
                .prop_map(move |data| Tensor::new(c, h, w, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn conv_identity_is_identity(input in tensor_strategy()) {
            let k = identity_1x1(input.channels());
            let bias = vec![0.0; input.channels()];
            let out = conv2d(&input, &k, &bias, 1, 0).unwrap();
            prop_assert_eq!(out, input);
        }

        #[test]
        fn maxpool_picks_window_member(input in tensor_strategy(), window in 1usize..3, stride in 1usize..3) {
            prop_assume!(window <= input.height() && window <= input.width());
            let out = maxpool2d(&input, window, stride).unwrap();
            for c in 0..out.channels() {
                for oy in 0..out.height() {
                    for ox in 0..out.width() {
                        let v = out.get(c, oy, ox);
                        let mut found = false;
                        for wy in 0..window {
                            for wx in 0..window {
                                let x = input.get(c, oy * stride + wy, ox * stride + wx);
                                prop_assert!(v >= x);
                                found |= v == x;
                            }
                        }
                        prop_assert!(found);
                    }
                }
            }
        }

        #[test]
        fn upsample_stays_in_range(input in tensor_strategy(), factor in 1usize..5) {
            let up = upsample_bilinear(&input, factor).unwrap();
            let (lo, hi) = input.min_max().unwrap();
            prop_assert!(up.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn upsample_constant_is_constant(v in -5.0f32..5.0, factor in 1usize..6, h in 1usize..5, w in 1usize..5) {
            let up = upsample_bilinear(&Tensor::filled(2, h, w, v), factor).unwrap();
            prop_assert!(up.data().iter().all(|&u| u == v));
        }

        #[test]
        fn argmax_invariant_to_pixel_offset(input in tensor_strategy(), offsets in proptest::collection::vec(-3.0f32..3.0, 36)) {
            let (c, h, w) = input.dims();
            let shifted = Tensor::from_fn(c, h, w, |ch, y, x| input.get(ch, y, x) + offsets[y * 6 + x]).unwrap();
            // Rounding can merge near-ties, so only pixels with a clear winner are compared.
            let a = argmax_channels(&input).unwrap();
            let b = argmax_channels(&shifted).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let win = a.get(y, x) as usize;
                    let margin = (0..c)
                        .filter(|&ch| ch != win)
                        .map(|ch| input.get(win, y, x) - input.get(ch, y, x))
                        .fold(f32::INFINITY, f32::min);
                    if margin > 1e-3 {
                        prop_assert_eq!(a.get(y, x), b.get(y, x));
                    }
                }
            }
        }

        #[test]
        fn kernels_are_deterministic(input in tensor_strategy()) {
            let k = ConvKernels::new(2, input.channels(), 3, 3, (0..2 * input.channels() * 9).map(|i| libm::sinf(i as f32 * 0.37)).collect()).unwrap();
            let a = conv2d(&input, &k, &[0.1, -0.2], 1, 1).unwrap();
            let b = conv2d(&input, &k, &[0.1, -0.2], 1, 1).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
