use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Graph, Tensor, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn mat(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), t.data()).expect("matrix view")
}

/// out (m×n) = op(a)·op(b), written into a fresh tensor.
fn gemm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = vec![0.0; m * n];
    {
        let mut view = ArrayViewMut2::from_shape((m, n), &mut out).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut view);
    }
    out
}

fn pad3(shape: &[usize]) -> [usize; 3] {
    assert!(shape.len() <= 3, "broadcast supports rank <= 3, got {shape:?}");
    let mut s = [1; 3];
    let off = 3 - shape.len();
    s[off..].copy_from_slice(shape);
    s
}

struct Broadcast {
    out: [usize; 3],
    sa: [usize; 3],
    sb: [usize; 3],
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Self {
        let (pa, pb) = (pad3(a), pad3(b));
        let mut out = [0; 3];
        for d in 0..3 {
            assert!(pa[d] == pb[d] || pa[d] == 1 || pb[d] == 1, "cannot broadcast {a:?} with {b:?}");
            out[d] = pa[d].max(pb[d]);
        }
        let strides = |p: [usize; 3]| {
            let full = [p[1] * p[2], p[2], 1];
            [0, 1, 2].map(|d| if p[d] == 1 { 0 } else { full[d] })
        };
        Self { out, sa: strides(pa), sb: strides(pb) }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut o = 0;
        for i in 0..self.out[0] {
            for j in 0..self.out[1] {
                let (mut ia, mut ib) = (i * self.sa[0] + j * self.sa[1], i * self.sb[0] + j * self.sb[1]);
                for _ in 0..self.out[2] {
                    f(o, ia, ib);
                    o += 1;
                    ia += self.sa[2];
                    ib += self.sb[2];
                }
            }
        }
    }

    fn out_shape(&self, a: &[usize], b: &[usize]) -> Vec<usize> {
        let rank = a.len().max(b.len());
        self.out[3 - rank..].to_vec()
    }
}

/// Geometry of a 1-D linear resampling: each output index reads two input
/// indices with weights.
#[derive(Clone)]
struct Resample {
    taps: Vec<(usize, usize, f64, f64)>,
    input: usize,
}

impl Resample {
    /// Half-pixel-centred bilinear weights (`align_corners = false`).
    fn bilinear(input: usize, output: usize) -> Self {
        let ratio = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let l = src - i0 as f64;
                (i0, i1, 1.0 - l, l)
            })
            .collect();
        Self { taps, input }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[i * w..][..w];
                    let dx = kx as isize - pad as isize;
                    let (j0, j1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    for j in j0..j1 {
                        dst[j] = src[(j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dx = kx as isize - pad as isize;
                    let (j0, j1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let src = &row[i * w..][..w];
                    let dst = &mut plane[si as usize * w..][..w];
                    for j in j0..j1 {
                        dst[(j as isize + dx) as usize] += src[j];
                    }
                }
            }
        }
    }
    x
}

/// Per-channel k×k correlation with zero padding; `weights` is `[C, k, k]`.
fn depthwise(x: &[f64], weights: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..][..hw];
        let dst = &mut out[ch * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let wv = weights[(ch * k + ky) * k + kx];
                if wv == 0.0 {
                    continue;
                }
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let (i0, i1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                let (j0, j1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                for i in i0..i1 {
                    let src = &plane[(i as isize + dy) as usize * w..][..w];
                    let d = &mut dst[i * w..][..w];
                    for j in j0..j1 {
                        d[j] += wv * src[(j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`depthwise`] w.r.t. its input (correlation with the flipped kernel).
fn depthwise_input_grad(g: &[f64], weights: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut flipped = vec![0.0; weights.len()];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                flipped[(ch * k + (k - 1 - ky)) * k + (k - 1 - kx)] = weights[(ch * k + ky) * k + kx];
            }
        }
    }
    depthwise(g, &flipped, c, h, w, k)
}

fn depthwise_weight_grad(g: &[f64], x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut gw = vec![0.0; c * k * k];
    for ch in 0..c {
        let plane = &x[ch * hw..][..hw];
        let gp = &g[ch * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let (i0, i1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                let (j0, j1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                let mut acc = 0.0;
                for i in i0..i1 {
                    let src = &plane[(i as isize + dy) as usize * w..][..w];
                    let gr = &gp[i * w..][..w];
                    for j in j0..j1 {
                        acc += gr[j] * src[(j as isize + dx) as usize];
                    }
                }
                gw[(ch * k + ky) * k + kx] = acc;
            }
        }
    }
    gw
}

fn add_bias(out: &mut [f64], bias: &[f64], hw: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut out[co * hw..(co + 1) * hw] {
            *v += b;
        }
    }
}

fn channel_sums(g: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|co| g[co * hw..(co + 1) * hw].iter().sum()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let value = Tensor::new(ta.shape().to_vec(), data);
            return self.push(value, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]));
        }
        let bc = Broadcast::new(ta.shape(), tb.shape());
        let mut out = vec![0.0; bc.out.iter().product()];
        bc.for_each(|o, ia, ib| out[o] = ta.data()[ia] + tb.data()[ib]);
        let value = Tensor::new(bc.out_shape(ta.shape(), tb.shape()), out);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, p, _| {
                let mut ga = Tensor::zeros(p[0].shape());
                let mut gb = Tensor::zeros(p[1].shape());
                bc.for_each(|o, ia, ib| {
                    ga.data_mut()[ia] += g.data()[o];
                    gb.data_mut()[ib] += g.data()[o];
                });
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            let value = Tensor::new(ta.shape().to_vec(), data);
            return self.push(
                value,
                &[a, b],
                Box::new(|g, p, _| {
                    let ga = g.data().iter().zip(p[1].data()).map(|(g, y)| g * y).collect();
                    let gb = g.data().iter().zip(p[0].data()).map(|(g, x)| g * x).collect();
                    vec![Some(Tensor::new(p[0].shape().to_vec(), ga)), Some(Tensor::new(p[1].shape().to_vec(), gb))]
                }),
            );
        }
        let bc = Broadcast::new(ta.shape(), tb.shape());
        let mut out = vec![0.0; bc.out.iter().product()];
        bc.for_each(|o, ia, ib| out[o] = ta.data()[ia] * tb.data()[ib]);
        let value = Tensor::new(bc.out_shape(ta.shape(), tb.shape()), out);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, p, _| {
                let mut ga = Tensor::zeros(p[0].shape());
                let mut gb = Tensor::zeros(p[1].shape());
                bc.for_each(|o, ia, ib| {
                    ga.data_mut()[ia] += g.data()[o] * p[1].data()[ib];
                    gb.data_mut()[ib] += g.data()[o] * p[0].data()[ia];
                });
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
        self.push(value, &[a], Box::new(move |g, _, _| vec![Some(Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * s).collect()))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + s).collect());
        self.push(value, &[a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(
            value,
            &[a],
            Box::new(move |g, p, out| {
                let d = g.data().iter().zip(p[0].data()).zip(out.data()).map(|((g, &x), &y)| g * df(x, y)).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, |_, y| -y * y)
    }

    /// Clamp to `[0, 1]`; gradient passes only where the input is inside.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(0.0, 1.0), |x, _| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape.to_vec());
        self.push(value, &[a], Box::new(|g, p, _| vec![Some(g.clone().reshaped(p[0].shape().to_vec()))]))
    }

    /// 2-D convolution (cross-correlation), stride 1, zero "same" padding.
    /// `x` is `[Cin, H, W]`, `w` is `[Cout, Cin/groups, k, k]`; `groups` is
    /// 1 or equal to `Cin` (depth-wise).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, groups: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[2], ws[3]);
        assert_eq!(k % 2, 1, "odd kernels only");
        let hw = h * wd;
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            assert_eq!(self.value(b).len(), cout);
            parents.push(b);
        }
        if groups == 1 {
            assert_eq!(ws[1], cin, "conv expects {} input channels, got {cin}", ws[1]);
            let xt = self.value(x);
            let wt = self.value(w);
            let kk = cin * k * k;
            let mut out = if k == 1 {
                gemm(mat(wt, cout, cin), mat(xt, cin, hw))
            } else {
                let cols = im2col(xt.data(), cin, h, wd, k);
                gemm(mat(wt, cout, kk), ArrayView2::from_shape((kk, hw), &cols).unwrap())
            };
            if let Some(b) = bias {
                add_bias(&mut out, self.value(b).data(), hw);
            }
            let value = Tensor::new(vec![cout, h, wd], out);
            self.push(
                value,
                &parents,
                Box::new(move |g, p, _| {
                    let gm = mat(g, cout, hw);
                    let wm = mat(p[1], cout, kk);
                    let (gx, gw) = if k == 1 {
                        let gx = gemm(wm.t(), gm);
                        let gw = gemm(gm, mat(p[0], cin, hw).t());
                        (gx, gw)
                    } else {
                        let cols = im2col(p[0].data(), cin, h, wd, k);
                        let cols_v = ArrayView2::from_shape((kk, hw), &cols).unwrap();
                        let gw = gemm(gm, cols_v.t());
                        let gcols = gemm(wm.t(), gm);
                        (col2im(&gcols, cin, h, wd, k), gw)
                    };
                    let mut res = vec![Some(Tensor::new(p[0].shape().to_vec(), gx)), Some(Tensor::new(p[1].shape().to_vec(), gw))];
                    if p.len() == 3 {
                        res.push(Some(Tensor::new(p[2].shape().to_vec(), channel_sums(g.data(), cout, hw))));
                    }
                    res
                }),
            )
        } else {
            assert!(groups == cin && cout == cin && ws[1] == 1, "only depth-wise grouping is supported");
            let mut out = depthwise(self.value(x).data(), self.value(w).data(), cin, h, wd, k);
            if let Some(b) = bias {
                add_bias(&mut out, self.value(b).data(), hw);
            }
            let value = Tensor::new(vec![cout, h, wd], out);
            self.push(
                value,
                &parents,
                Box::new(move |g, p, _| {
                    let gx = depthwise_input_grad(g.data(), p[1].data(), cin, h, wd, k);
                    let gw = depthwise_weight_grad(g.data(), p[0].data(), cin, h, wd, k);
                    let mut res = vec![Some(Tensor::new(p[0].shape().to_vec(), gx)), Some(Tensor::new(p[1].shape().to_vec(), gw))];
                    if p.len() == 3 {
                        res.push(Some(Tensor::new(p[2].shape().to_vec(), channel_sums(g.data(), cout, hw))));
                    }
                    res
                }),
            )
        }
    }

    /// 3×3 average pooling, stride 1, zero padding counted in the divisor.
    pub fn avg_pool3(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let kernel = vec![1.0 / 9.0; c * 9];
        let out = depthwise(self.value(x).data(), &kernel, c, h, w, 3);
        let value = Tensor::new(vec![c, h, w], out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let gx = depthwise(g.data(), &kernel, c, h, w, 3);
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// Bilinear resampling to `(out_h, out_w)`, half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let ry = Resample::bilinear(h, out_h);
        let rx = Resample::bilinear(w, out_w);
        let src = self.value(x).data();
        let mut tmp = vec![0.0; c * h * out_w];
        for ch in 0..c {
            for i in 0..h {
                let row = &src[(ch * h + i) * w..][..w];
                let dst = &mut tmp[(ch * h + i) * out_w..][..out_w];
                for (o, &(a, b, wa, wb)) in rx.taps.iter().enumerate() {
                    dst[o] = wa * row[a] + wb * row[b];
                }
            }
        }
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for (o, &(a, b, wa, wb)) in ry.taps.iter().enumerate() {
                let ra = &tmp[(ch * h + a) * out_w..][..out_w];
                let rb = &tmp[(ch * h + b) * out_w..][..out_w];
                let dst = &mut out[(ch * out_h + o) * out_w..][..out_w];
                for j in 0..out_w {
                    dst[j] = wa * ra[j] + wb * rb[j];
                }
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let (h, w) = (ry.input, rx.input);
                let gd = g.data();
                let mut gtmp = vec![0.0; c * h * out_w];
                for ch in 0..c {
                    for (o, &(a, b, wa, wb)) in ry.taps.iter().enumerate() {
                        let src = &gd[(ch * out_h + o) * out_w..][..out_w];
                        for j in 0..out_w {
                            gtmp[(ch * h + a) * out_w + j] += wa * src[j];
                            gtmp[(ch * h + b) * out_w + j] += wb * src[j];
                        }
                    }
                }
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        let src = &gtmp[(ch * h + i) * out_w..][..out_w];
                        let dst = &mut gx[(ch * h + i) * w..][..w];
                        for (o, &(a, b, wa, wb)) in rx.taps.iter().enumerate() {
                            dst[a] += wa * src[o];
                            dst[b] += wb * src[o];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// Reflect-pad at the bottom and right edges.
    pub fn pad_reflect(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Var {
        if pad_h == 0 && pad_w == 0 {
            return x;
        }
        let (c, h, w) = self.value(x).chw();
        assert!(pad_h < h && pad_w < w, "reflect pad larger than input");
        let (oh, ow) = (h + pad_h, w + pad_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                let si = reflect(i, h);
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = src[(ch * h + si) * w + reflect(j, w)];
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        let si = reflect(i, h);
                        for j in 0..ow {
                            gx[(ch * h + si) * w + reflect(j, w)] += g.data()[(ch * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// Keep the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, ih, iw) = self.value(x).chw();
        if (ih, iw) == (h, w) {
            return x;
        }
        assert!(h <= ih && w <= iw);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                out.extend_from_slice(&src[(ch * ih + i) * iw..][..w]);
            }
        }
        let value = Tensor::new(vec![c, h, w], out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * ih * iw];
                for ch in 0..c {
                    for i in 0..h {
                        gx[(ch * ih + i) * iw..][..w].copy_from_slice(&g.data()[(ch * h + i) * w..][..w]);
                    }
                }
                vec![Some(Tensor::new(vec![c, ih, iw], gx))]
            }),
        )
    }

    /// Concatenate `[C_i, H, W]` tensors along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let (_, h, w) = self.value(xs[0]).chw();
        let sizes: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (c, hh, ww) = self.value(v).chw();
                assert_eq!((hh, ww), (h, w), "concat spatial mismatch");
                c
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(total * h * w);
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new(vec![total, h, w], out);
        self.push(
            value,
            xs,
            Box::new(move |g, _, _| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&c| {
                        let n = c * h * w;
                        let t = Tensor::new(vec![c, h, w], g.data()[off..off + n].to_vec());
                        off += n;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c);
        if start == 0 && len == c {
            return x;
        }
        let hw = h * w;
        let value = Tensor::new(vec![len, h, w], self.value(x).data()[start * hw..(start + len) * hw].to_vec());
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * hw];
                gx[start * hw..(start + len) * hw].copy_from_slice(g.data());
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// Bias-free layer norm over channels at each position:
    /// `y = x / sqrt(var_c(x) + eps) · weight`.
    #[allow(clippy::needless_range_loop)]
    pub fn layer_norm_channels(&mut self, x: Var, weight: Var, eps: f64) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(weight).len(), c);
        let hw = h * w;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; c * hw];
        let mut inv = vec![0.0; hw];
        for p in 0..hw {
            let mean = (0..c).map(|ch| xd[ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xd[ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv[p] = s;
            for ch in 0..c {
                out[ch * hw + p] = xd[ch * hw + p] * s * wd[ch];
            }
        }
        let value = Tensor::new(vec![c, h, w], out);
        self.push(
            value,
            &[x, weight],
            Box::new(move |g, p, _| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut gx = vec![0.0; c * hw];
                let mut gw = vec![0.0; c];
                for pos in 0..hw {
                    let s = inv[pos];
                    let mean = (0..c).map(|ch| xd[ch * hw + pos]).sum::<f64>() / c as f64;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let i = ch * hw + pos;
                        dot += gd[i] * wd[ch] * xd[i];
                        gw[ch] += gd[i] * xd[i] * s;
                    }
                    let k = s * s * s * dot / c as f64;
                    for ch in 0..c {
                        let i = ch * hw + pos;
                        gx[i] = s * wd[ch] * gd[i] - k * (xd[i] - mean);
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], gx)), Some(Tensor::new(p[1].shape().to_vec(), gw))]
            }),
        )
    }

    /// `[C, H, W]` → `[C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let means: Vec<f64> = channel_sums(self.value(x).data(), c, hw).into_iter().map(|s| s / hw as f64).collect();
        let value = Tensor::new(vec![c, 1, 1], means);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    let v = g.data()[ch] / hw as f64;
                    gx[ch * hw..(ch + 1) * hw].fill(v);
                }
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// `[C, H, W]` → `[1, H, W]` sum over channels.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&xd[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![1, h, w], out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(c * hw);
                for _ in 0..c {
                    gx.extend_from_slice(g.data());
                }
                vec![Some(Tensor::new(vec![c, h, w], gx))]
            }),
        )
    }

    /// 2-D product `op(a)·op(b)` with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2);
        let va = mat(self.value(a), sa[0], sa[1]);
        let vb = mat(self.value(b), sb[0], sb[1]);
        let oa = if trans_a { va.t() } else { va };
        let ob = if trans_b { vb.t() } else { vb };
        assert_eq!(oa.ncols(), ob.nrows(), "matmul inner dims {sa:?} {sb:?}");
        let (m, n) = (oa.nrows(), ob.ncols());
        let value = Tensor::new(vec![m, n], gemm(oa, ob));
        self.push(
            value,
            &[a, b],
            Box::new(move |g, p, _| {
                let gm = mat(g, m, n);
                let va = mat(p[0], sa[0], sa[1]);
                let vb = mat(p[1], sb[0], sb[1]);
                let oa = if trans_a { va.t() } else { va };
                let ob = if trans_b { vb.t() } else { vb };
                // d op(a) = g·op(b)ᵀ, d op(b) = op(a)ᵀ·g
                let ga = if trans_a { gemm(ob, gm.t()) } else { gemm(gm, ob.t()) };
                let gb = if trans_b { gemm(gm.t(), oa) } else { gemm(oa.t(), gm) };
                vec![Some(Tensor::new(sa.clone(), ga)), Some(Tensor::new(sb.clone(), gb))]
            }),
        )
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        let value = Tensor::new(s.clone(), out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(s.clone(), gx))]
            }),
        )
    }

    /// Divide each row of a 2-D tensor by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let norms: Vec<f64> = (0..r).map(|i| xd[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let d = norms[i].max(eps);
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] / d;
            }
        }
        let value = Tensor::new(s.clone(), out);
        self.push(
            value,
            &[x],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    if norms[i] > eps {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            gx[i * c + j] = gr[j] / eps;
                        }
                    }
                }
                vec![Some(Tensor::new(s.clone(), gx))]
            }),
        )
    }

    /// Band `c` of `[C, H, W]` moves right by `step·c` into `[C, H, W + step·(C−1)]`.
    pub fn shift_bands(&mut self, x: Var, step: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let wide = w + step * (c - 1);
        let out = shift_data(self.value(x).data(), c, h, w, step);
        let value = Tensor::new(vec![c, h, wide], out);
        self.push(value, &[x], Box::new(move |g, _, _| vec![Some(Tensor::new(vec![c, h, w], unshift_data(g.data(), c, h, wide, step)))]))
    }

    /// Inverse of [`Graph::shift_bands`].
    pub fn unshift_bands(&mut self, x: Var, step: usize) -> Var {
        let (c, h, wide) = self.value(x).chw();
        let w = wide - step * (c - 1);
        let out = unshift_data(self.value(x).data(), c, h, wide, step);
        let value = Tensor::new(vec![c, h, w], out);
        self.push(value, &[x], Box::new(move |g, _, _| vec![Some(Tensor::new(vec![c, h, wide], shift_data(g.data(), c, h, w, step)))]))
    }

    /// Mean of `sqrt((pred − target)² + eps²)` over all elements; shape `[1]`.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape());
        let n = p.len() as f64;
        let e2 = eps * eps;
        let loss = p.data().iter().zip(t.data()).map(|(a, b)| ((a - b).powi(2) + e2).sqrt()).sum::<f64>() / n;
        self.push(
            Tensor::scalar(loss),
            &[pred, target],
            Box::new(move |g, p, _| {
                let scale = g.data()[0] / n;
                let gp: Vec<f64> = p[0]
                    .data()
                    .iter()
                    .zip(p[1].data())
                    .map(|(a, b)| {
                        let d = a - b;
                        let r = (d * d + e2).sqrt();
                        if r == 0.0 {
                            0.0
                        } else {
                            scale * d / r
                        }
                    })
                    .collect();
                let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                vec![Some(Tensor::new(p[0].shape().to_vec(), gp)), Some(Tensor::new(p[1].shape().to_vec(), gt))]
            }),
        )
    }

    /// Sum of all elements; shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]))
    }
}

pub(crate) fn shift_data(x: &[f64], c: usize, h: usize, w: usize, step: usize) -> Vec<f64> {
    let wide = w + step * (c - 1);
    let mut out = vec![0.0; c * h * wide];
    for ch in 0..c {
        for i in 0..h {
            out[(ch * h + i) * wide + step * ch..][..w].copy_from_slice(&x[(ch * h + i) * w..][..w]);
        }
    }
    out
}

pub(crate) fn unshift_data(x: &[f64], c: usize, h: usize, wide: usize, step: usize) -> Vec<f64> {
    let w = wide - step * (c - 1);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            out[(ch * h + i) * w..][..w].copy_from_slice(&x[(ch * h + i) * wide + step * ch..][..w]);
        }
    }
    out
}
