//! Plain numeric kernels behind the tape operations.
//!
//! Layouts are NCHW for images and `[out, in, k, k]` for convolution weights.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    /// Visits every (input offset, weight offset, output offset) triple that
    /// contributes to the convolution, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (k, s, p) = (self.kernel, self.stride as isize, self.padding as isize);
        let (ih, iw) = (self.in_h as isize, self.in_w as isize);
        for n in 0..self.batch {
            for o in 0..self.out_channels {
                let out_base = (n * self.out_channels + o) * oh * ow;
                for c in 0..self.in_channels {
                    let in_base = (n * self.in_channels + c) * self.in_h * self.in_w;
                    let w_base = (o * self.in_channels + c) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let w_idx = w_base + ky * k + kx;
                            for oy in 0..oh {
                                let iy = oy as isize * s + ky as isize - p;
                                if iy < 0 || iy >= ih {
                                    continue;
                                }
                                let row = in_base + iy as usize * self.in_w;
                                let out_row = out_base + oy * ow;
                                for ox in 0..ow {
                                    let ix = ox as isize * s + kx as isize - p;
                                    if ix < 0 || ix >= iw {
                                        continue;
                                    }
                                    f(row + ix as usize, w_idx, out_row + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.output_shape().iter().product()];
    g.for_each_tap(|xi, wi, oi| out[oi] += x[xi] * w[wi]);
    out
}

/// Adjoint of `conv2d` with respect to its input.
pub fn conv2d_input_grad(g: &ConvGeometry, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.input_shape().iter().product()];
    g.for_each_tap(|xi, wi, oi| gx[xi] += gy[oi] * w[wi]);
    gx
}

/// Adjoint of `conv2d` with respect to its weights.
pub fn conv2d_weight_grad(g: &ConvGeometry, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; g.weight_shape().iter().product()];
    g.for_each_tap(|xi, wi, oi| gw[wi] += gy[oi] * x[xi]);
    gw
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Non-overlapping max pooling over `size × size` blocks. Returns the pooled
/// values and, per output, the flat input index of the selected element.
/// Ties go to the lowest flat index.
pub fn maxpool2d(x: &[f64], shape: &[usize], size: usize) -> (Vec<f64>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut vals = Vec::with_capacity(nc * oh * ow);
    let mut idx = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                vals.push(x[best]);
                idx.push(best);
            }
        }
    }
    (vals, idx)
}

pub fn gather(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

pub fn scatter(values: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&v, &i) in values.iter().zip(idx) {
        out[i] += v;
    }
    out
}

pub fn avgpool2d(x: &[f64], shape: &[usize], size: usize) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; nc * oh * ow];
    for plane in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += x[plane * h * w + (oy * size + dy) * w + ox * size + dx];
                    }
                }
                out[(plane * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    out
}

/// Adjoint of `avgpool2d`: spreads each pooled value uniformly over its block.
/// `input_shape` is the shape of the tensor that was pooled.
pub fn avgpool2d_adjoint(gy: &[f64], input_shape: &[usize], size: usize) -> Vec<f64> {
    let (nc, h, w) = (input_shape[0] * input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; nc * h * w];
    for plane in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[(plane * oh + oy) * ow + ox] * scale;
                for dy in 0..size {
                    for dx in 0..size {
                        out[plane * h * w + (oy * size + dy) * w + ox * size + dx] = g;
                    }
                }
            }
        }
    }
    out
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - m).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v - lse;
        }
    }
    out
}

/// Index of the axis-`axis` coordinate of each flat position in `shape`.
pub fn axis_index(shape: &[usize], axis: usize) -> impl Iterator<Item = usize> + '_ {
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let n: usize = shape.iter().product();
    (0..n).map(move |i| (i / inner) % extent)
}
