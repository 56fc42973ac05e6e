//! Tiny convolutional heatmap regressor with hand-written backpropagation.
//!
//! Activations are stored channel-last as `[batch·height·width, channels]`
//! matrices so that every convolution is an im2col followed by one GEMM.
//!
//! ```text
//! input ─ conv3x3/s2 ─ relu ─ conv3x3 ─ relu ─┬──────────────── + ─ [bx,by] ─ conv3x3 ─ relu ─ conv1x1 ─ out
//!                                              └ avgpool ─ conv3x3 ─ relu ─ conv3x3 ─ relu ─ up ┘
//!                                              └ conv1x1 (boundary head, optional) ─ threshold ─ bx,by
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::coords::BOUNDARY_THRESHOLD;

/// Channel-last activation: rows are `(b, y, x)` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub data: Array2<f64>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Act {
    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array2::zeros((batch * height * width, channels)),
            batch,
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    fn like(&self, data: Array2<f64>) -> Self {
        Self {
            data,
            batch: self.batch,
            height: self.height,
            width: self.width,
        }
    }
}

/// Square convolution with zero padding `k/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
    /// `[kernel·kernel·cin, cout]`, rows ordered `(ky, kx, cin)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv {
    pub fn new<R: Rng>(kernel: usize, stride: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = Array2::from_shape_fn((kernel * kernel * cin, cout), |_| normal.sample(rng));
        Self {
            kernel,
            stride,
            cin,
            cout,
            weight,
            bias: Array1::zeros(cout),
        }
    }

    fn out_size(&self, n: usize) -> usize {
        let pad = self.kernel / 2;
        (n + 2 * pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Act) -> (Array2<f64>, usize, usize) {
        let (ho, wo) = (self.out_size(x.height), self.out_size(x.width));
        if self.kernel == 1 && self.stride == 1 {
            return (x.data.clone(), ho, wo);
        }
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let cin = self.cin;
        let mut col = Array2::zeros((x.batch * ho * wo, k * k * cin));
        let src = x.data.as_slice().expect("standard layout");
        let dst = col.as_slice_mut().expect("standard layout");
        let row_len = k * k * cin;
        for b in 0..x.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize - pad + ky as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride) as isize - pad + kx as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let s = ((b * x.height + iy as usize) * x.width + ix as usize) * cin;
                            let d = row + (ky * k + kx) * cin;
                            dst[d..d + cin].copy_from_slice(&src[s..s + cin]);
                        }
                    }
                }
            }
        }
        (col, ho, wo)
    }

    fn col2im(&self, dcol: &Array2<f64>, x_like: &Act) -> Act {
        if self.kernel == 1 && self.stride == 1 {
            return x_like.like(dcol.clone());
        }
        let (ho, wo) = (self.out_size(x_like.height), self.out_size(x_like.width));
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let cin = self.cin;
        let mut dx = Act::zeros(x_like.batch, x_like.height, x_like.width, cin);
        let src = dcol.as_slice().expect("standard layout");
        let dst = dx.data.as_slice_mut().expect("standard layout");
        let row_len = k * k * cin;
        for b in 0..x_like.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride) as isize - pad + ky as isize;
                        if iy < 0 || iy >= x_like.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride) as isize - pad + kx as isize;
                            if ix < 0 || ix >= x_like.width as isize {
                                continue;
                            }
                            let d = ((b * x_like.height + iy as usize) * x_like.width + ix as usize) * cin;
                            let s = row + (ky * k + kx) * cin;
                            for c in 0..cin {
                                dst[d + c] += src[s + c];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward(&self, x: &Act) -> (Act, Array2<f64>) {
        debug_assert_eq!(x.channels(), self.cin);
        let (col, ho, wo) = self.im2col(x);
        let mut out = Array2::zeros((col.nrows(), self.cout));
        out += &self.bias;
        general_mat_mul(1.0, &col, &self.weight, 1.0, &mut out);
        (
            Act {
                data: out,
                batch: x.batch,
                height: ho,
                width: wo,
            },
            col,
        )
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂input`
    /// when `need_input` is set.
    pub fn backward(
        &self,
        x_like: &Act,
        col: &Array2<f64>,
        dout: &Array2<f64>,
        grad: &mut ConvGrad,
        need_input: bool,
    ) -> Option<Act> {
        general_mat_mul(1.0, &col.t(), dout, 1.0, &mut grad.weight);
        grad.bias += &dout.sum_axis(Axis(0));
        if !need_input {
            return None;
        }
        let mut dcol = Array2::zeros((dout.nrows(), self.weight.nrows()));
        general_mat_mul(1.0, dout, &self.weight.t(), 0.0, &mut dcol);
        Some(self.col2im(&dcol, x_like))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvGrad {
    fn zeros_like(c: &Conv) -> Self {
        Self {
            weight: Array2::zeros(c.weight.raw_dim()),
            bias: Array1::zeros(c.bias.raw_dim()),
        }
    }
}

/// Negative-side slope of the leaky ReLU.
pub const LEAK: f64 = 0.01;

fn relu(a: &mut Act) {
    a.data.mapv_inplace(|v| if v > 0.0 { v } else { LEAK * v });
}

/// Scales `grad` by the leak where the post-activation value is not positive.
fn relu_back(grad: &mut Array2<f64>, post: &Array2<f64>) {
    ndarray::Zip::from(grad).and(post).for_each(|g, &a| {
        if a <= 0.0 {
            *g *= LEAK;
        }
    });
}

fn avg_pool2(x: &Act) -> Act {
    let (h, w) = (x.height / 2, x.width / 2);
    let c = x.channels();
    let mut out = Act::zeros(x.batch, h, w, c);
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.data.as_slice_mut().expect("standard layout");
    for b in 0..x.batch {
        for y in 0..h {
            for xx in 0..w {
                let o = ((b * h + y) * w + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((b * x.height + 2 * y + dy) * x.width + 2 * xx + dx) * c;
                    for k in 0..c {
                        dst[o + k] += 0.25 * src[i + k];
                    }
                }
            }
        }
    }
    out
}

fn avg_pool2_back(dout: &Act, x_like: &Act) -> Array2<f64> {
    let mut dx = Array2::zeros(x_like.data.raw_dim());
    let c = dx.ncols();
    let (h, w) = (dout.height, dout.width);
    let src = dout.data.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for b in 0..dout.batch {
        for y in 0..h {
            for xx in 0..w {
                let o = ((b * h + y) * w + xx) * c;
                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((b * x_like.height + 2 * y + dy) * x_like.width + 2 * xx + dxo) * c;
                    for k in 0..c {
                        dst[i + k] += 0.25 * src[o + k];
                    }
                }
            }
        }
    }
    dx
}

fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.height * 2, x.width * 2);
    let c = x.channels();
    let mut out = Act::zeros(x.batch, h, w, c);
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.data.as_slice_mut().expect("standard layout");
    for b in 0..x.batch {
        for y in 0..h {
            for xx in 0..w {
                let i = ((b * x.height + y / 2) * x.width + xx / 2) * c;
                let o = ((b * h + y) * w + xx) * c;
                dst[o..o + c].copy_from_slice(&src[i..i + c]);
            }
        }
    }
    out
}

fn upsample2_back(dout: &Array2<f64>, small: &Act) -> Array2<f64> {
    let mut dx = Array2::zeros(small.data.raw_dim());
    let c = dx.ncols();
    let (h, w) = (small.height * 2, small.width * 2);
    let src = dout.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for b in 0..small.batch {
        for y in 0..h {
            for xx in 0..w {
                let i = ((b * small.height + y / 2) * small.width + xx / 2) * c;
                let o = ((b * h + y) * w + xx) * c;
                for k in 0..c {
                    dst[i + k] += src[o + k];
                }
            }
        }
    }
    dx
}

/// Shape of a [`TinyNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub width3: usize,
    /// Adds an intermediate boundary head whose thresholded prediction masks
    /// coordinate channels (`bx`, `by`) fed to the last convolution.
    pub boundary_coords: bool,
}

impl NetSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            width1: 8,
            width2: 16,
            width3: 16,
            boundary_coords: false,
        }
    }
}

/// Everything `backward` needs from a forward pass.
pub struct Cache {
    input: Act,
    col1: Array2<f64>,
    a1: Act,
    col2: Array2<f64>,
    a2: Act,
    pooled: Act,
    col3: Array2<f64>,
    a3: Act,
    col4: Array2<f64>,
    a4: Act,
    merged: Act,
    col5: Array2<f64>,
    a5: Act,
    /// Intermediate boundary prediction, `[rows, 1]`.
    pub boundary: Option<Act>,
    /// Network output, `[rows, out_channels]`.
    pub output: Act,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet {
    pub spec: NetSpec,
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub conv4: Conv,
    pub conv5: Conv,
    pub head: Conv,
    pub boundary_head: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub convs: Vec<ConvGrad>,
}

impl Grads {
    /// Flattened view matching [`TinyNet::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.convs
            .iter()
            .flat_map(|g| {
                [
                    g.weight.as_slice().expect("standard layout"),
                    g.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

/// Coordinate grids at the output resolution for the boundary-masked
/// channels, flattened per pixel.
fn boundary_coord_grid(h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let sx = if w > 1 { 2.0 / (w as f64 - 1.0) } else { 0.0 };
    let sy = if h > 1 { 2.0 / (h as f64 - 1.0) } else { 0.0 };
    let mut cx = Vec::with_capacity(h * w);
    let mut cy = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            cx.push(x as f64 * sx - 1.0);
            cy.push(y as f64 * sy - 1.0);
        }
    }
    (cx, cy)
}

impl TinyNet {
    pub fn new<R: Rng>(spec: NetSpec, rng: &mut R) -> Self {
        let extra = if spec.boundary_coords { 2 } else { 0 };
        let conv1 = Conv::new(3, 2, spec.in_channels, spec.width1, rng);
        let conv2 = Conv::new(3, 1, spec.width1, spec.width2, rng);
        let conv3 = Conv::new(3, 1, spec.width2, spec.width3, rng);
        let conv4 = Conv::new(3, 1, spec.width3, spec.width2, rng);
        let conv5 = Conv::new(3, 1, spec.width2 + extra, spec.width2, rng);
        let mut head = Conv::new(1, 1, spec.width2, spec.out_channels, rng);
        head.weight.mapv_inplace(|v| v * 0.1);
        let boundary_head = spec.boundary_coords.then(|| {
            let mut c = Conv::new(1, 1, spec.width2, 1, rng);
            c.weight.mapv_inplace(|v| v * 0.1);
            c
        });
        Self {
            spec,
            conv1,
            conv2,
            conv3,
            conv4,
            conv5,
            head,
            boundary_head,
        }
    }

    fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.conv1, &self.conv2, &self.conv3, &self.conv4, &self.conv5, &self.head];
        v.extend(self.boundary_head.as_ref());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv> {
        let mut v = vec![
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.conv4,
            &mut self.conv5,
            &mut self.head,
        ];
        v.extend(self.boundary_head.as_mut());
        v
    }

    /// Parameter tensors in a fixed order: weight then bias per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.convs()
            .into_iter()
            .flat_map(|c| {
                [
                    c.weight.as_slice().expect("standard layout"),
                    c.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| {
                [
                    c.weight.as_slice_mut().expect("standard layout"),
                    c.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Shapes matching [`TinyNet::tensors`].
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.convs()
            .into_iter()
            .flat_map(|c| [c.weight.shape().to_vec(), c.bias.shape().to_vec()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            convs: self.convs().into_iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    /// Output resolution for an input of `height × width`.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (self.conv1.out_size(height), self.conv1.out_size(width))
    }

    pub fn forward(&self, input: Act) -> Cache {
        assert_eq!(input.channels(), self.spec.in_channels, "input channel count");
        assert!(
            input.height % 4 == 0 && input.width % 4 == 0,
            "input sides must be multiples of 4"
        );
        let (mut a1, col1) = self.conv1.forward(&input);
        relu(&mut a1);
        let (mut a2, col2) = self.conv2.forward(&a1);
        relu(&mut a2);
        let pooled = avg_pool2(&a2);
        let (mut a3, col3) = self.conv3.forward(&pooled);
        relu(&mut a3);
        let (mut a4, col4) = self.conv4.forward(&a3);
        relu(&mut a4);
        let mut merged = upsample2(&a4);
        merged.data += &a2.data;

        let boundary = self.boundary_head.as_ref().map(|bh| bh.forward(&a2).0);
        if let Some(b) = &boundary {
            let (cx, cy) = boundary_coord_grid(merged.height, merged.width);
            let per_image = merged.height * merged.width;
            let mut coords = Array2::zeros((merged.data.nrows(), 2));
            for (r, mut row) in coords.outer_iter_mut().enumerate() {
                if b.data[[r, 0]] >= BOUNDARY_THRESHOLD {
                    row[0] = cx[r % per_image];
                    row[1] = cy[r % per_image];
                }
            }
            let joined = ndarray::concatenate(Axis(1), &[merged.data.view(), coords.view()])
                .expect("row counts agree");
            merged.data = joined.as_standard_layout().into_owned();
        }

        let (mut a5, col5) = self.conv5.forward(&merged);
        relu(&mut a5);
        let (output, _) = self.head.forward(&a5);
        Cache {
            input,
            col1,
            a1,
            col2,
            a2,
            pooled,
            col3,
            a3,
            col4,
            a4,
            merged,
            col5,
            a5,
            boundary,
            output,
        }
    }

    /// Backpropagates `d_output` (and `d_boundary` for the intermediate head)
    /// and returns parameter gradients.
    pub fn backward(&self, cache: &Cache, d_output: &Array2<f64>, d_boundary: Option<&Array2<f64>>) -> Grads {
        let mut g = self.zero_grads();
        let (g1, rest) = g.convs.split_at_mut(1);
        let (g2, rest) = rest.split_at_mut(1);
        let (g3, rest) = rest.split_at_mut(1);
        let (g4, rest) = rest.split_at_mut(1);
        let (g5, rest) = rest.split_at_mut(1);
        let (gh, gb) = rest.split_at_mut(1);

        let mut da5 = self
            .head
            .backward(&cache.a5, &cache.a5.data, d_output, &mut gh[0], true)
            .expect("input gradient requested");
        relu_back(&mut da5.data, &cache.a5.data);
        let dmerged = self
            .conv5
            .backward(&cache.merged, &cache.col5, &da5.data, &mut g5[0], true)
            .expect("input gradient requested");
        let dsum = dmerged.data.slice(s![.., ..self.spec.width2]).to_owned();

        let mut da2 = dsum.clone();
        let mut da4 = upsample2_back(&dsum, &cache.a4);
        relu_back(&mut da4, &cache.a4.data);
        let mut da3 = self
            .conv4
            .backward(&cache.a3, &cache.col4, &da4, &mut g4[0], true)
            .expect("input gradient requested");
        relu_back(&mut da3.data, &cache.a3.data);
        let dpooled = self
            .conv3
            .backward(&cache.pooled, &cache.col3, &da3.data, &mut g3[0], true)
            .expect("input gradient requested");
        da2 += &avg_pool2_back(&dpooled, &cache.a2);

        if let (Some(bh), Some(db)) = (&self.boundary_head, d_boundary) {
            let d = bh
                .backward(&cache.a2, &cache.a2.data, db, &mut gb[0], true)
                .expect("input gradient requested");
            da2 += &d.data;
        }

        relu_back(&mut da2, &cache.a2.data);
        let mut da1 = self
            .conv2
            .backward(&cache.a1, &cache.col2, &da2, &mut g2[0], true)
            .expect("input gradient requested");
        relu_back(&mut da1.data, &cache.a1.data);
        self.conv1
            .backward(&cache.input, &cache.col1, &da1.data, &mut g1[0], false);
        g
    }

    /// `params -= lr · grads`.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Reshapes per-image `[C, H, W]` stacks into one channel-last activation.
pub fn stack_images<'a, I>(images: I, channels: usize, height: usize, width: usize) -> Act
where
    I: IntoIterator<Item = ndarray::ArrayView3<'a, f64>>,
{
    let per = height * width;
    let images: Vec<_> = images.into_iter().collect();
    let mut act = Act::zeros(images.len(), height, width, channels);
    for (b, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), &[channels, height, width]);
        for c in 0..channels {
            let plane = img.index_axis(Axis(0), c);
            for (i, v) in plane.iter().enumerate() {
                act.data[[b * per + i, c]] = *v;
            }
        }
    }
    act
}

/// Inverse of [`stack_images`] for one image of the batch.
pub fn unstack_image(act: ArrayView2<'_, f64>, b: usize, height: usize, width: usize) -> ndarray::Array3<f64> {
    let per = height * width;
    let c = act.ncols();
    ndarray::Array3::from_shape_fn((c, height, width), |(ch, y, x)| act[[b * per + y * width + x, ch]])
}
