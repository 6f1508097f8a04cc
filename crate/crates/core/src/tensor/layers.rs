//! Layer kernels. Activations use the `(batch, maps, height, width)` layout,
//! where height indexes EEG channels and width indexes time.

use rand::Rng;

use super::gemm::{gemm, View};
use super::network::ForwardMode;
use super::{Param, Scalar, Tensor};

/// Inputs of the log activation are floored here before taking the log.
pub const LOG_CLAMP: f64 = 1e-6;

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Sum with eight independent partial sums so the loop vectorizes.
#[inline]
fn lane_sum<T: Scalar>(x: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += f(c[k]);
        }
    }
    let mut s = acc.iter().map(|v| v.f64()).sum::<f64>();
    for &v in rest {
        s += f(v).f64();
    }
    s
}

#[inline]
fn lane_dot<T: Scalar>(x: &[T], y: &[T]) -> f64 {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut s = acc.iter().map(|v| v.f64()).sum::<f64>();
    for (&a, &b) in xr.iter().zip(yr) {
        s += (a * b).f64();
    }
    s
}

fn dims4(x: &Tensor<impl Scalar>) -> Option<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Some([b, c, h, w]),
        _ => None,
    }
}

/// Convolution along time with a `(1, kernel)` filter and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConv<T = f32> {
    /// `[filters, in_maps, kernel]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl<T: Scalar> TemporalConv<T> {
    pub fn filters(&self) -> usize {
        self.weight.value.shape()[0]
    }
    fn in_maps(&self) -> usize {
        self.weight.value.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_width(&self, width: usize) -> Option<usize> {
        (width + self.pad_left + self.pad_right + 1).checked_sub(self.kernel())
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, String> {
        let expected = || format!("[batch, {}, height, width >= kernel]", self.in_maps());
        let [b, cin, h, w] = dims4(x).ok_or_else(expected)?;
        let wo = self.out_width(w).filter(|&v| v > 0).ok_or_else(expected)?;
        if cin != self.in_maps() {
            return Err(expected());
        }
        let (f_n, k) = (self.filters(), self.kernel());
        if self.pad_left >= k || self.pad_right >= k {
            return Err(format!(
                "padding ({}, {}) below kernel {k}",
                self.pad_left, self.pad_right
            ));
        }
        let mut pad = PaddedRows::new(cin, w, wo, k);
        let mut out = Tensor::zeros(&[b, f_n, h, wo]);
        let od = out.data_mut();
        let bias = self.bias.as_ref().map(|p| p.value.data());
        for bi in 0..b {
            for hi in 0..h {
                pad.load(|c| &x.data()[((bi * cin + c) * h + hi) * w..][..w], self.pad_left);
                correlate(self.weight.value.data(), f_n, &pad, k, |f, t0, vals| {
                    let row = &mut od[((bi * f_n + f) * h + hi) * wo..][..wo];
                    let end = (t0 + TILE_T).min(wo);
                    let bv = bias.map_or(T::zero(), |bs| bs[f]);
                    for (o, &v) in row[t0..end].iter_mut().zip(vals) {
                        *o = v + bv;
                    }
                });
            }
        }
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let [b, cin, h, w] = dims4(x).expect("cached input is 4-d");
        let wo = g.shape()[3];
        let (f_n, k) = (self.filters(), self.kernel());
        let gd = g.data();
        if self.weight.trainable {
            let mut pad = PaddedRows::new(cin * h, w, wo, k);
            let mut grows = PaddedRows::new(f_n * h, wo, wo, 1);
            let mut acc = vec![0.0f64; f_n * cin * k];
            for bi in 0..b {
                pad.load(|r| &x.data()[(bi * cin * h + r) * w..][..w], self.pad_left);
                grows.load(|r| &gd[(bi * f_n * h + r) * wo..][..wo], 0);
                weight_grad(&grows, &pad, h, k, &mut acc);
            }
            for (gw, a) in self.weight.grad.data_mut().iter_mut().zip(acc) {
                *gw += T::of(a);
            }
        }
        if let Some(bias) = self.bias.as_mut().filter(|p| p.trainable) {
            for f in 0..f_n {
                let s: f64 = (0..b)
                    .map(|bi| lane_sum(&gd[(bi * f_n + f) * h * wo..][..h * wo], |v| v))
                    .sum();
                bias.grad.data_mut()[f] += T::of(s);
            }
        }
        if !need_input {
            return None;
        }
        // The input gradient is a correlation of the output gradient with the
        // flipped kernels, channels and filters swapped.
        let wt = self.weight.value.data();
        let mut flipped = vec![T::zero(); cin * f_n * k];
        for f in 0..f_n {
            for c in 0..cin {
                for j in 0..k {
                    flipped[(c * f_n + f) * k + j] = wt[(f * cin + c) * k + (k - 1 - j)];
                }
            }
        }
        let mut pad = PaddedRows::new(f_n, wo, w, k);
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        for bi in 0..b {
            for hi in 0..h {
                pad.load(|f| &gd[((bi * f_n + f) * h + hi) * wo..][..wo], k - 1 - self.pad_left);
                correlate(&flipped, cin, &pad, k, |c, t0, vals| {
                    let row = &mut dxd[((bi * cin + c) * h + hi) * w..][..w];
                    let end = (t0 + TILE_T).min(w);
                    row[t0..end].copy_from_slice(&vals[..end - t0]);
                });
            }
        }
        Some(dx)
    }
}

const TILE_T: usize = 16;
const TILE_F: usize = 4;
const TILE_J: usize = 4;
const TILE_GF: usize = 2;

/// Zero-padded copies of a set of rows, long enough that every output tile
/// of `TILE_T` samples can read `kernel - 1` samples past its end.
struct PaddedRows<T> {
    data: Vec<T>,
    rows: usize,
    stride: usize,
    out_w: usize,
    width: usize,
}

impl<T: Scalar> PaddedRows<T> {
    fn new(rows: usize, width: usize, out_w: usize, kernel: usize) -> Self {
        let stride = out_w.div_ceil(TILE_T) * TILE_T + kernel - 1;
        Self {
            data: vec![T::zero(); rows * stride],
            rows,
            stride,
            out_w,
            width,
        }
    }

    /// Places each source row at `offset`, truncating whatever falls past the
    /// padded extent.
    fn load<'a>(&mut self, src: impl Fn(usize) -> &'a [T], offset: usize)
    where
        T: 'a,
    {
        self.data.fill(T::zero());
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.stride..][..self.stride];
            let n = self.width.min(self.stride.saturating_sub(offset));
            dst[offset..offset + n].copy_from_slice(&src(r)[..n]);
        }
    }

    fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.stride..][..self.stride]
    }
}

/// `out[f][t] = sum_c sum_j w[f][c][j] * x[c][t + j]` over padded rows, one
/// tile of `TILE_T` outputs at a time. `emit(f, t0, tile)` receives each tile.
fn correlate<T: Scalar>(
    w: &[T],
    f_n: usize,
    x: &PaddedRows<T>,
    k: usize,
    mut emit: impl FnMut(usize, usize, &[T; TILE_T]),
) {
    let mut f0 = 0;
    while f0 + TILE_F <= f_n {
        correlate_tile::<T, TILE_F>(w, f0, x, k, &mut emit);
        f0 += TILE_F;
    }
    while f0 < f_n {
        correlate_tile::<T, 1>(w, f0, x, k, &mut emit);
        f0 += 1;
    }
}

#[inline(always)]
fn correlate_tile<T: Scalar, const NF: usize>(
    w: &[T],
    f0: usize,
    x: &PaddedRows<T>,
    k: usize,
    emit: &mut impl FnMut(usize, usize, &[T; TILE_T]),
) {
    let cin = x.rows;
    let mut t0 = 0;
    while t0 < x.out_w {
        let mut acc = [[T::zero(); TILE_T]; NF];
        for c in 0..cin {
            let xr = &x.row(c)[t0..t0 + TILE_T + k - 1];
            let taps: [&[T]; NF] = std::array::from_fn(|f| &w[((f0 + f) * cin + c) * k..][..k]);
            for j in 0..k {
                let xs: &[T; TILE_T] = xr[j..j + TILE_T].try_into().expect("tile width");
                for f in 0..NF {
                    let wf = taps[f][j];
                    for l in 0..TILE_T {
                        acc[f][l] += wf * xs[l];
                    }
                }
            }
        }
        for (f, a) in acc.iter().enumerate() {
            emit(f0 + f, t0, a);
        }
        t0 += TILE_T;
    }
}

/// `acc[f][c][j] += sum_h sum_t g[f, h][t] * x[c, h][t + j]`, where rows are
/// grouped `h` at a time. Each call contributes single-precision partial
/// sums that are accumulated in `f64`.
fn weight_grad<T: Scalar>(g: &PaddedRows<T>, x: &PaddedRows<T>, h: usize, k: usize, acc: &mut [f64]) {
    let (f_n, cin) = (g.rows / h, x.rows / h);
    let mut f0 = 0;
    while f0 < f_n {
        let nf = (f_n - f0).min(TILE_GF);
        for c in 0..cin {
            let mut j0 = 0;
            while j0 < k {
                let nj = (k - j0).min(TILE_J);
                let sums = if nf == TILE_GF && nj == TILE_J {
                    weight_grad_tile::<T, TILE_GF, TILE_J>(g, x, h, f0, c, j0)
                } else {
                    let mut out = [[0.0; TILE_J]; TILE_GF];
                    for (f, row) in out.iter_mut().enumerate().take(nf) {
                        for (jj, v) in row.iter_mut().enumerate().take(nj) {
                            *v = weight_grad_tile::<T, 1, 1>(g, x, h, f0 + f, c, j0 + jj)[0][0];
                        }
                    }
                    out
                };
                for f in 0..nf {
                    for jj in 0..nj {
                        acc[((f0 + f) * cin + c) * k + j0 + jj] += sums[f][jj];
                    }
                }
                j0 += nj;
            }
        }
        f0 += nf;
    }
}

#[inline(always)]
fn weight_grad_tile<T: Scalar, const NF: usize, const NJ: usize>(
    g: &PaddedRows<T>,
    x: &PaddedRows<T>,
    h: usize,
    f0: usize,
    c: usize,
    j0: usize,
) -> [[f64; NJ]; NF] {
    let mut acc = [[[T::zero(); TILE_T]; NJ]; NF];
    for hi in 0..h {
        let xr = x.row(c * h + hi);
        let grows: [&[T]; NF] = std::array::from_fn(|f| g.row((f0 + f) * h + hi));
        let mut t0 = 0;
        while t0 < g.out_w {
            let gs: [&[T; TILE_T]; NF] =
                std::array::from_fn(|f| grows[f][t0..t0 + TILE_T].try_into().expect("tile width"));
            for jj in 0..NJ {
                let xs: &[T; TILE_T] = xr[t0 + j0 + jj..][..TILE_T].try_into().expect("tile width");
                for f in 0..NF {
                    for l in 0..TILE_T {
                        acc[f][jj][l] += gs[f][l] * xs[l];
                    }
                }
            }
            t0 += TILE_T;
        }
    }
    acc.map(|per_j| per_j.map(|lanes| lanes.iter().map(|v| v.f64()).sum()))
}

/// Spatial filter spanning the full height (EEG channel) axis, collapsing it
/// to one row. `groups == in_maps` gives the depthwise variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConv<T = f32> {
    /// `[out_maps, in_maps / groups, height]`
    pub weight: Param<T>,
    pub groups: usize,
}

impl<T: Scalar> SpatialConv<T> {
    pub fn out_maps(&self) -> usize {
        self.weight.value.shape()[0]
    }
    fn in_per_group(&self) -> usize {
        self.weight.value.shape()[1]
    }
    fn height(&self) -> usize {
        self.weight.value.shape()[2]
    }
    fn in_maps(&self) -> usize {
        self.in_per_group() * self.groups
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, String> {
        let expected = || format!("[batch, {}, {}, width]", self.in_maps(), self.height());
        let [b, cin, h, w] = dims4(x).ok_or_else(expected)?;
        if cin != self.in_maps() || h != self.height() {
            return Err(expected());
        }
        let (o_n, ipg) = (self.out_maps(), self.in_per_group());
        let opg = o_n / self.groups;
        let wt = self.weight.value.data();
        let xd = x.data();
        let mut out = Tensor::zeros(&[b, o_n, 1, w]);
        let od = out.data_mut();
        if self.groups == 1 {
            for bi in 0..b {
                gemm(
                    T::one(),
                    wt,
                    View::row_major(o_n, cin * h),
                    &xd[bi * cin * h * w..][..cin * h * w],
                    View::row_major(cin * h, w),
                    T::zero(),
                    &mut od[bi * o_n * w..][..o_n * w],
                    View::row_major(o_n, w),
                );
            }
            return Ok(out);
        }
        for bi in 0..b {
            for o in 0..o_n {
                let grp = o / opg;
                let orow = &mut od[(bi * o_n + o) * w..][..w];
                let src = &xd[(bi * cin + grp * ipg) * h * w..][..ipg * h * w];
                for (tap, xrow) in wt[o * ipg * h..][..ipg * h].iter().zip(src.chunks_exact(w)) {
                    axpy(*tap, xrow, orow);
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let [b, cin, h, w] = dims4(x).expect("cached input is 4-d");
        let (o_n, ipg) = (self.out_maps(), self.in_per_group());
        let opg = o_n / self.groups;
        let xd = x.data();
        let gd = g.data();
        if self.weight.trainable {
            let mut acc = vec![0.0f64; o_n * ipg * h];
            for bi in 0..b {
                for o in 0..o_n {
                    let grp = o / opg;
                    let grow = &gd[(bi * o_n + o) * w..][..w];
                    let src = &xd[(bi * cin + grp * ipg) * h * w..][..ipg * h * w];
                    for (a, xrow) in acc[o * ipg * h..][..ipg * h].iter_mut().zip(src.chunks_exact(w)) {
                        *a += lane_dot(grow, xrow);
                    }
                }
            }
            for (gw, a) in self.weight.grad.data_mut().iter_mut().zip(acc) {
                *gw += T::of(a);
            }
        }
        if !need_input {
            return None;
        }
        let wt = self.weight.value.data();
        let mut dx = Tensor::zeros(x.shape());
        let dxd = dx.data_mut();
        if self.groups == 1 {
            for bi in 0..b {
                gemm(
                    T::one(),
                    wt,
                    View::row_major(o_n, cin * h).t(),
                    &gd[bi * o_n * w..][..o_n * w],
                    View::row_major(o_n, w),
                    T::zero(),
                    &mut dxd[bi * cin * h * w..][..cin * h * w],
                    View::row_major(cin * h, w),
                );
            }
            return Some(dx);
        }
        for bi in 0..b {
            for o in 0..o_n {
                let grp = o / opg;
                let grow = &gd[(bi * o_n + o) * w..][..w];
                let dst = &mut dxd[(bi * cin + grp * ipg) * h * w..][..ipg * h * w];
                for (tap, dxrow) in wt[o * ipg * h..][..ipg * h].iter().zip(dst.chunks_exact_mut(w)) {
                    axpy(*tap, grow, dxrow);
                }
            }
        }
        Some(dx)
    }
}

/// 1x1 convolution mixing feature maps at every (height, width) position.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseConv<T = f32> {
    /// `[out_maps, in_maps]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> PointwiseConv<T> {
    fn out_maps(&self) -> usize {
        self.weight.value.shape()[0]
    }
    fn in_maps(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, String> {
        let expected = || format!("[batch, {}, height, width]", self.in_maps());
        let [b, cin, h, w] = dims4(x).ok_or_else(expected)?;
        if cin != self.in_maps() {
            return Err(expected());
        }
        let o_n = self.out_maps();
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, o_n, h, w]);
        for bi in 0..b {
            let ob = &mut out.data_mut()[bi * o_n * plane..][..o_n * plane];
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.data().iter().enumerate() {
                    ob[o * plane..][..plane].fill(bv);
                }
            }
            gemm(
                T::one(),
                self.weight.value.data(),
                View::row_major(o_n, cin),
                &x.data()[bi * cin * plane..][..cin * plane],
                View::row_major(cin, plane),
                T::one(),
                ob,
                View::row_major(o_n, plane),
            );
        }
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let [b, cin, h, w] = dims4(x).expect("cached input is 4-d");
        let o_n = self.out_maps();
        let plane = h * w;
        let gd = g.data();
        if self.weight.trainable {
            for bi in 0..b {
                gemm(
                    T::one(),
                    &gd[bi * o_n * plane..][..o_n * plane],
                    View::row_major(o_n, plane),
                    &x.data()[bi * cin * plane..][..cin * plane],
                    View::row_major(cin, plane).t(),
                    T::one(),
                    self.weight.grad.data_mut(),
                    View::row_major(o_n, cin),
                );
            }
        }
        if let Some(bias) = self.bias.as_mut().filter(|p| p.trainable) {
            for o in 0..o_n {
                let s: f64 = (0..b)
                    .map(|bi| lane_sum(&gd[(bi * o_n + o) * plane..][..plane], |v| v))
                    .sum();
                bias.grad.data_mut()[o] += T::of(s);
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        for bi in 0..b {
            gemm(
                T::one(),
                self.weight.value.data(),
                View::row_major(o_n, cin).t(),
                &gd[bi * o_n * plane..][..o_n * plane],
                View::row_major(o_n, plane),
                T::zero(),
                &mut dx.data_mut()[bi * cin * plane..][..cin * plane],
                View::row_major(cin, plane),
            );
        }
        Some(dx)
    }
}

/// Fully connected layer over the flattened per-example features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    /// `[outputs, inputs]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, String> {
        let expected = || format!("[batch, ...] with {} features per example", self.inputs());
        let b = *x.shape().first().ok_or_else(expected)?;
        let n = self.inputs();
        if b == 0 || x.len() != b * n {
            return Err(expected());
        }
        let k_n = self.outputs();
        let mut out = Tensor::zeros(&[b, k_n]);
        for row in out.data_mut().chunks_exact_mut(k_n) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            x.data(),
            View::row_major(b, n),
            self.weight.value.data(),
            View::row_major(k_n, n).t(),
            T::one(),
            out.data_mut(),
            View::row_major(b, k_n),
        );
        Ok(out)
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let b = x.shape()[0];
        let (n, k_n) = (self.inputs(), self.outputs());
        let gd = g.data();
        if self.weight.trainable {
            gemm(
                T::one(),
                gd,
                View::row_major(b, k_n).t(),
                x.data(),
                View::row_major(b, n),
                T::one(),
                self.weight.grad.data_mut(),
                View::row_major(k_n, n),
            );
        }
        if self.bias.trainable {
            for k in 0..k_n {
                let s: f64 = (0..b).map(|bi| gd[bi * k_n + k].f64()).sum();
                self.bias.grad.data_mut()[k] += T::of(s);
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            T::one(),
            gd,
            View::row_major(b, k_n),
            self.weight.value.data(),
            View::row_major(k_n, n),
            T::zero(),
            dx.data_mut(),
            View::row_major(b, n),
        );
        Some(dx)
    }
}

/// Per-feature-map batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(maps: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[maps], T::one())),
            beta: Param::new(Tensor::zeros(&[maps])),
            running_mean: vec![T::zero(); maps],
            running_var: vec![T::one(); maps],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn maps(&self) -> usize {
        self.running_mean.len()
    }

    fn frozen(&self) -> bool {
        !self.gamma.trainable && !self.beta.trainable
    }

    /// Batch statistics are used in train mode (unless the layer is frozen)
    /// and in AdaBN mode; AdaBN never touches the running statistics.
    fn forward(&mut self, x: &Tensor<T>, mode: ForwardMode) -> Result<(Tensor<T>, LayerCache<T>), String> {
        let expected = || format!("[batch, {}, height, width]", self.maps());
        let [b, c, h, w] = dims4(x).ok_or_else(expected)?;
        if c != self.maps() {
            return Err(expected());
        }
        let plane = h * w;
        let n = b * plane;
        let use_batch = match mode {
            ForwardMode::Train => !self.frozen(),
            ForwardMode::AdaBn => true,
            ForwardMode::Eval => false,
        };
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        if use_batch {
            for ch in 0..c {
                let rows = || (0..b).map(|bi| &x.data()[(bi * c + ch) * plane..][..plane]);
                let m = rows().map(|r| lane_sum(r, |v| v)).sum::<f64>() / n as f64;
                let mt = T::of(m);
                let ss: f64 = rows().map(|r| lane_sum(r, |v| (v - mt) * (v - mt))).sum();
                mean[ch] = m;
                var[ch] = ss / n as f64;
            }
            if mode == ForwardMode::Train {
                let mom = self.momentum;
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    self.running_mean[ch] = T::of((1.0 - mom) * self.running_mean[ch].f64() + mom * mean[ch]);
                    self.running_var[ch] = T::of((1.0 - mom) * self.running_var[ch].f64() + mom * var[ch] * unbias);
                }
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean[ch].f64();
                var[ch] = self.running_var[ch].f64();
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let (m, is) = (T::of(mean[ch]), T::of(inv_std[ch]));
                let (gm, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                let src = &x.data()[off..][..plane];
                let xh = &mut xhat.data_mut()[off..][..plane];
                let os = &mut out.data_mut()[off..][..plane];
                for ((d, o), &s) in xh.iter_mut().zip(os.iter_mut()).zip(src) {
                    *d = (s - m) * is;
                    *o = gm * *d + bt;
                }
            }
        }
        Ok((
            out,
            LayerCache::BatchNorm {
                xhat,
                inv_std,
                batch_stats: use_batch,
            },
        ))
    }

    fn backward(
        &mut self,
        xhat: &Tensor<T>,
        inv_std: &[f64],
        batch_stats: bool,
        g: &Tensor<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let [b, c, h, w] = dims4(xhat).expect("cached input is 4-d");
        let plane = h * w;
        let n = (b * plane) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let gs = &g.data()[off..][..plane];
                sum_g[ch] += lane_sum(gs, |v| v);
                sum_gx[ch] += lane_dot(gs, &xhat.data()[off..][..plane]);
            }
        }
        if self.gamma.trainable {
            for (g, s) in self.gamma.grad.data_mut().iter_mut().zip(&sum_gx) {
                *g += T::of(*s);
            }
        }
        if self.beta.trainable {
            for (g, s) in self.beta.grad.data_mut().iter_mut().zip(&sum_g) {
                *g += T::of(*s);
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = Tensor::zeros(xhat.shape());
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                let scale = T::of(self.gamma.value.data()[ch].f64() * inv_std[ch]);
                let gs = &g.data()[off..][..plane];
                let xs = &xhat.data()[off..][..plane];
                let ds = &mut dx.data_mut()[off..][..plane];
                if batch_stats {
                    let (mg, mgx) = (T::of(sum_g[ch] / n), T::of(sum_gx[ch] / n));
                    for ((d, &gv), &xv) in ds.iter_mut().zip(gs).zip(xs) {
                        *d = scale * (gv - mg - xv * mgx);
                    }
                } else {
                    for (d, &gv) in ds.iter_mut().zip(gs) {
                        *d = scale * gv;
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Average pooling along the width (time) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AvgPool {
    pub kernel: usize,
    pub stride: usize,
}

impl AvgPool {
    pub fn out_width(&self, width: usize) -> Option<usize> {
        (width >= self.kernel && self.stride > 0).then(|| (width - self.kernel) / self.stride + 1)
    }

    fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, String> {
        let expected = || format!("[batch, maps, height, width >= {}]", self.kernel);
        let [b, c, h, w] = dims4(x).ok_or_else(expected)?;
        let wo = self.out_width(w).ok_or_else(expected)?;
        let rows = b * c * h;
        let inv = T::of(1.0 / self.kernel as f64);
        let mut out = Tensor::zeros(&[b, c, h, wo]);
        for r in 0..rows {
            let src = &x.data()[r * w..][..w];
            let dst = &mut out.data_mut()[r * wo..][..wo];
            for (t, d) in dst.iter_mut().enumerate() {
                let s = t * self.stride;
                *d = src[s..s + self.kernel].iter().fold(T::zero(), |a, &v| a + v) * inv;
            }
        }
        Ok(out)
    }

    fn backward<T: Scalar>(&self, in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
        let w = in_shape[3];
        let wo = g.shape()[3];
        let rows: usize = in_shape[..3].iter().product();
        let inv = T::of(1.0 / self.kernel as f64);
        let mut dx = Tensor::zeros(in_shape);
        for r in 0..rows {
            let gs = &g.data()[r * wo..][..wo];
            let ds = &mut dx.data_mut()[r * w..][..w];
            for (t, &gv) in gs.iter().enumerate() {
                let s = t * self.stride;
                for d in &mut ds[s..s + self.kernel] {
                    *d += gv * inv;
                }
            }
        }
        dx
    }
}

/// Inverted dropout; identity outside train mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

/// Per-layer state recorded by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Input(Tensor<T>),
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Pool {
        in_shape: Vec<usize>,
    },
    Mask(Option<Vec<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f32> {
    TemporalConv(TemporalConv<T>),
    SpatialConv(SpatialConv<T>),
    Pointwise(PointwiseConv<T>),
    Dense(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Elu,
    Square,
    Log,
    AvgPool(AvgPool),
    Dropout(Dropout),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::TemporalConv(_) => "temporal_conv",
            Layer::SpatialConv(_) => "spatial_conv",
            Layer::Pointwise(_) => "pointwise_conv",
            Layer::Dense(_) => "dense",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Elu => "elu",
            Layer::Square => "square",
            Layer::Log => "log",
            Layer::AvgPool(_) => "avg_pool",
            Layer::Dropout(_) => "dropout",
        }
    }

    /// Parameters with their field names, in declaration order.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::TemporalConv(l) => {
                let mut v = vec![("weight", &l.weight)];
                v.extend(l.bias.as_ref().map(|b| ("bias", b)));
                v
            }
            Layer::SpatialConv(l) => vec![("weight", &l.weight)],
            Layer::Pointwise(l) => {
                let mut v = vec![("weight", &l.weight)];
                v.extend(l.bias.as_ref().map(|b| ("bias", b)));
                v
            }
            Layer::Dense(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::TemporalConv(l) => {
                let mut v = vec![&mut l.weight];
                v.extend(l.bias.as_mut());
                v
            }
            Layer::SpatialConv(l) => vec![&mut l.weight],
            Layer::Pointwise(l) => {
                let mut v = vec![&mut l.weight];
                v.extend(l.bias.as_mut());
                v
            }
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    pub fn has_trainable(&self) -> bool {
        self.params().iter().any(|(_, p)| p.trainable)
    }

    pub(crate) fn forward<R: Rng + ?Sized>(
        &mut self,
        x: Tensor<T>,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, LayerCache<T>), String> {
        match self {
            Layer::TemporalConv(l) => Ok((l.forward(&x)?, LayerCache::Input(x))),
            Layer::SpatialConv(l) => Ok((l.forward(&x)?, LayerCache::Input(x))),
            Layer::Pointwise(l) => Ok((l.forward(&x)?, LayerCache::Input(x))),
            Layer::Dense(l) => Ok((l.forward(&x)?, LayerCache::Input(x))),
            Layer::BatchNorm(l) => l.forward(&x, mode),
            Layer::Elu => {
                let mut y = x.clone();
                y.data_mut()
                    .iter_mut()
                    .filter(|v| **v <= T::zero())
                    .for_each(|v| *v = v.exp() - T::one());
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Square => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = *v * *v);
                Ok((y, LayerCache::Input(x)))
            }
            Layer::Log => {
                let floor = T::of(LOG_CLAMP);
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(floor).ln());
                Ok((y, LayerCache::Input(x)))
            }
            Layer::AvgPool(p) => {
                let y = p.forward(&x)?;
                Ok((
                    y,
                    LayerCache::Pool {
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::Dropout(d) => {
                if mode != ForwardMode::Train || d.rate <= 0.0 {
                    return Ok((x, LayerCache::Mask(None)));
                }
                let keep = 1.0 - d.rate;
                let scale = T::of(1.0 / keep);
                let threshold = (keep * 4_294_967_296.0) as u64;
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if u64::from(rng.next_u32()) < threshold {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let mut y = x;
                y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                Ok((y, LayerCache::Mask(Some(mask))))
            }
        }
    }

    pub(crate) fn backward(&mut self, cache: &LayerCache<T>, g: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        match (self, cache) {
            (Layer::TemporalConv(l), LayerCache::Input(x)) => l.backward(x, g, need_input),
            (Layer::SpatialConv(l), LayerCache::Input(x)) => l.backward(x, g, need_input),
            (Layer::Pointwise(l), LayerCache::Input(x)) => l.backward(x, g, need_input),
            (Layer::Dense(l), LayerCache::Input(x)) => l.backward(x, g, need_input),
            (
                Layer::BatchNorm(l),
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => l.backward(xhat, inv_std, *batch_stats, g, need_input),
            (_, _) if !need_input => None,
            (Layer::Elu, LayerCache::Input(x)) => {
                Some(zip_map(x, g, |xv, gv| if xv > T::zero() { gv } else { gv * xv.exp() }))
            }
            (Layer::Square, LayerCache::Input(x)) => Some(zip_map(x, g, |xv, gv| gv * (xv + xv))),
            (Layer::Log, LayerCache::Input(x)) => {
                let floor = T::of(LOG_CLAMP);
                Some(zip_map(x, g, |xv, gv| if xv > floor { gv / xv } else { T::zero() }))
            }
            (Layer::AvgPool(p), LayerCache::Pool { in_shape }) => Some(p.backward(in_shape, g)),
            (Layer::Dropout(_), LayerCache::Mask(mask)) => Some(match mask {
                None => g.clone(),
                Some(m) => {
                    let mut dx = g.clone();
                    dx.data_mut().iter_mut().zip(m).for_each(|(v, &mv)| *v *= mv);
                    dx
                }
            }),
            (layer, _) => unreachable!("cache kind does not match layer {}", layer.name()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::TemporalConv(l) => Layer::TemporalConv(TemporalConv {
                weight: l.weight.cast(),
                bias: l.bias.as_ref().map(Param::cast),
                pad_left: l.pad_left,
                pad_right: l.pad_right,
            }),
            Layer::SpatialConv(l) => Layer::SpatialConv(SpatialConv {
                weight: l.weight.cast(),
                groups: l.groups,
            }),
            Layer::Pointwise(l) => Layer::Pointwise(PointwiseConv {
                weight: l.weight.cast(),
                bias: l.bias.as_ref().map(Param::cast),
            }),
            Layer::Dense(l) => Layer::Dense(Dense {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::BatchNorm(l) => Layer::BatchNorm(BatchNorm {
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                running_mean: l.running_mean.iter().map(|v| U::of(v.f64())).collect(),
                running_var: l.running_var.iter().map(|v| U::of(v.f64())).collect(),
                momentum: l.momentum,
                eps: l.eps,
            }),
            Layer::Elu => Layer::Elu,
            Layer::Square => Layer::Square,
            Layer::Log => Layer::Log,
            Layer::AvgPool(p) => Layer::AvgPool(*p),
            Layer::Dropout(d) => Layer::Dropout(*d),
        }
    }
}

fn zip_map<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = g.clone();
    out.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(o, &xv)| *o = f(xv, *o));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lane_reductions_match_naive_for_odd_lengths() {
        for n in [0usize, 1, 7, 8, 9, 31] {
            let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            let y: Vec<f64> = (0..n).map(|i| (i * i) as f64 * 0.1).collect();
            let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((lane_dot(&x, &y) - naive).abs() < 1e-12);
            assert!((lane_sum(&x, |v| v) - x.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_conv_same_padding_keeps_width() {
        let conv = TemporalConv::<f64> {
            weight: Param::new(Tensor::full(&[1, 1, 4], 0.25)),
            bias: None,
            pad_left: 1,
            pad_right: 2,
        };
        assert_eq!(conv.out_width(10), Some(10));
        let x = Tensor::full(&[1, 1, 1, 10], 1.0);
        let y = conv.forward(&x).unwrap();
        // interior sees all four taps, the edges lose the padded ones
        assert_eq!(y.data()[0], 0.75);
        assert_eq!(y.data()[4], 1.0);
        assert_eq!(y.data()[9], 0.5);
    }

    #[test]
    fn avg_pool_arithmetic() {
        let p = AvgPool { kernel: 3, stride: 2 };
        assert_eq!(p.out_width(7), Some(3));
        assert_eq!(p.out_width(2), None);
        let x = Tensor::<f64>::new(vec![1, 1, 1, 7], (0..7).map(f64::from).collect()).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[1.0, 3.0, 5.0]);
    }
}
