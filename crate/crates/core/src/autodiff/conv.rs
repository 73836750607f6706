use super::{Result, TensorError};

/// Shape bookkeeping for a 2-D convolution over `[n, c, h, w]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, kc, kernel_h, kernel_w) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![out_channels, in_channels, kernel_h, kernel_w],
                found: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "conv2d stride must be at least 1".into(),
            ));
        }
        if kernel_h > height + 2 * pad || kernel_w > width + 2 * pad {
            return Err(TensorError::KernelTooLarge {
                kernel: [kernel_h, kernel_w],
                padded: [height + 2 * pad, width + 2 * pad],
            });
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output positions `o` along one axis for which `o*stride + k - pad`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        // largest o with o*s + k - pad < extent
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / s + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let plane = &mut out[(b * g.out_channels + oc) * oh * ow..][..oh * ow];
            for ic in 0..g.in_channels {
                let src = &input[(b * g.in_channels + ic) * h * w..][..h * w];
                for ky in 0..g.kernel_h {
                    let ys = g.valid_range(ky, h, oh);
                    for kx in 0..g.kernel_w {
                        let kv =
                            kernel[((oc * g.in_channels + ic) * g.kernel_h + ky) * g.kernel_w + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let xs = g.valid_range(kx, w, ow);
                        for oy in ys.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in xs.clone() {
                                orow[ox] += kv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`, each computed only when requested.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    let mut d_k = want_kernel.then(|| vec![0.0; kernel.len()]);
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let gplane = &grad_out[(b * g.out_channels + oc) * oh * ow..][..oh * ow];
            for ic in 0..g.in_channels {
                let base = (b * g.in_channels + ic) * h * w;
                for ky in 0..g.kernel_h {
                    let ys = g.valid_range(ky, h, oh);
                    for kx in 0..g.kernel_w {
                        let kidx = ((oc * g.in_channels + ic) * g.kernel_h + ky) * g.kernel_w + kx;
                        let kv = kernel[kidx];
                        let xs = g.valid_range(kx, w, ow);
                        let mut acc = 0.0;
                        for oy in ys.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            for ox in xs.clone() {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = gplane[oy * ow + ox];
                                if let Some(d) = d_in.as_mut() {
                                    d[base + iy * w + ix] += gv * kv;
                                }
                                acc += gv * input[base + iy * w + ix];
                            }
                        }
                        if let Some(d) = d_k.as_mut() {
                            d[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k)
}
