//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products. Nodes whose
//! inputs need no gradient are recorded as plain leaves.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{QarvError, Result};
use crate::prob::density::rate_nats_with_grad;
use crate::prob::normal::{std_normal_cdf, std_normal_pdf};

/// Variance epsilon shared by all normalization ops.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Replicate,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Pad {
        x: Var,
        pad: usize,
        mode: PadMode,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    /// Normalization over `group` contiguous elements (group/instance norm)
    /// or over channels at each position (layer norm).
    Norm {
        x: Var,
        kind: NormSets,
        rstd: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        per_item: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Tile {
        x: Var,
    },
    RateNats {
        z: Var,
        mean: Var,
        sigma: Var,
    },
    SumAll(Var),
    SumPerItem(Var),
}

#[derive(Clone, Copy, Debug)]
enum NormSets {
    Channels,
    Groups(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Parameters are read from the borrowed store.
pub struct Tape<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var.0)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    /// Replace every gradient in `store` with this pass's gradients.
    /// Parameters that did not take part get zero.
    pub fn write_to(&self, store: &mut ParamStore<T>) {
        store.zero_grads();
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(QarvError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'s, T: Real> Tape<'s, T> {
    /// Tape that records gradients for parameters in `store`.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Tape that records no backward information.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new(store)
        }
    }

    /// Tape with no parameters, for testing ops on explicit inputs.
    pub fn detached() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let idx = self.nodes.len();
        assert!(
            inputs.iter().all(|v| v.0 < idx),
            "tape inputs must precede outputs"
        );
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(idx)
    }

    /// Parameter leaf, shared across uses within this tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(idx);
        self.param_vars.insert(id, v);
        v
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(QarvError::NonFinite(what.to_string()))
        }
    }

    // ---- elementwise ----

    fn zip_with(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        Ok(Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| T::of(x.f64() * std_normal_cdf(x.f64())));
        self.push(v, Op::Gelu(a), &[a])
    }

    // ---- convolution family ----

    /// Valid cross-correlation, NCHW input, weight [c_out, c_in, k, k].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 || stride == 0 || k > h || k > wd {
            return Err(QarvError::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(QarvError::shape(
                    "conv2d",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, c_out, ho, wo], out),
            Op::Conv2d { x, w, b, geom },
            &inputs,
        ))
    }

    /// Valid per-channel convolution, weight [c, k, k], stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != c || ws[1] != ws[2] || ws[1] > h || ws[1] > wd {
            return Err(QarvError::shape(
                "depthwise_conv2d",
                format!("input {:?}, weight {ws:?}", self.shape(x)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(QarvError::shape(
                    "depthwise_conv2d",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let k = ws[1];
        let out = kernels::depthwise_forward(
            n,
            c,
            h,
            wd,
            k,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h - k + 1, wd - k + 1], out),
            Op::Depthwise { x, w, b, k },
            &inputs,
        ))
    }

    /// Pads both spatial axes by `pad` on each side.
    pub fn pad2d(&mut self, x: Var, pad: usize, mode: PadMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad == 0 {
            return Ok(x);
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let replicate = mode == PadMode::Replicate;
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * hp * wp];
        for (plane, dst) in out.chunks_mut(hp * wp).enumerate() {
            let s = &src[plane * h * w..][..h * w];
            for i in 0..hp {
                let Some(si) = kernels::pad_source(i, pad, h, replicate) else {
                    continue;
                };
                for j in 0..wp {
                    if let Some(sj) = kernels::pad_source(j, pad, w, replicate) {
                        dst[i * wp + j] = s[si * w + sj];
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, hp, wp], out),
            Op::Pad { x, pad, mode },
            &[x],
        ))
    }

    /// (N, C·r², H, W) → (N, C, H·r, W·r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(QarvError::shape(
                "pixel_shuffle",
                format!("{c} channels not divisible by {r}²"),
            ));
        }
        let co = c / (r * r);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for nn in 0..n {
            for oc in 0..co {
                for i in 0..r {
                    for j in 0..r {
                        let ic = oc * r * r + i * r + j;
                        let s = &src[(nn * c + ic) * h * w..][..h * w];
                        let base = (nn * co + oc) * h * r * w * r;
                        for y in 0..h {
                            for xx in 0..w {
                                out[base + (y * r + i) * (w * r) + xx * r + j] = s[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, co, h * r, w * r], out),
            Op::PixelShuffle { x, r },
            &[x],
        ))
    }

    // ---- normalization ----

    /// Normalizes across channels at every spatial position (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c < 2 {
            return Err(QarvError::shape(
                "layer_norm",
                format!("needs >= 2 channels, got {c}"),
            ));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        let mut rstd = vec![T::ZERO; n * hw];
        let inv_c = 1.0 / c as f64;
        for nn in 0..n {
            let xs = &src[nn * c * hw..][..c * hw];
            let mut mean = vec![0.0f64; hw];
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xs[ch * hw..][..hw]) {
                    *m += v.f64();
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            let mut var = vec![0.0f64; hw];
            for ch in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xs[ch * hw..][..hw]).zip(&mean) {
                    let d = v.f64() - m;
                    *s += d * d;
                }
            }
            let r: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v * inv_c + NORM_EPS).sqrt())
                .collect();
            let ys = &mut out[nn * c * hw..][..c * hw];
            for ch in 0..c {
                for p in 0..hw {
                    ys[ch * hw + p] = T::of((xs[ch * hw + p].f64() - mean[p]) * r[p]);
                }
            }
            for (dst, &v) in rstd[nn * hw..][..hw].iter_mut().zip(&r) {
                *dst = T::of(v);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Norm {
                x,
                kind: NormSets::Channels,
                rstd,
            },
            &[x],
        ))
    }

    /// Normalizes over (C/groups)·H·W elements per group (no affine).
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(QarvError::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let size = c / groups * h * w;
        if size < 2 {
            return Err(QarvError::shape(
                "group_norm",
                "group has fewer than 2 elements",
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        let mut rstd = vec![T::ZERO; n * groups];
        for (gi, (xs, ys)) in src.chunks(size).zip(out.chunks_mut(size)).enumerate() {
            let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / size as f64;
            let var = xs
                .iter()
                .map(|v| (v.f64() - mean) * (v.f64() - mean))
                .sum::<f64>()
                / size as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = T::of((v.f64() - mean) * r);
            }
            rstd[gi] = T::of(r);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::Norm {
                x,
                kind: NormSets::Groups(groups),
                rstd,
            },
            &[x],
        ))
    }

    /// Group norm with one group per channel.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).dims4()?.1;
        self.group_norm(x, c)
    }

    /// y = x·scale[c] + shift[c], with scale/shift of shape [C] or [N, C].
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let ss = self.shape(scale).to_vec();
        let per_item = if ss == [c] {
            false
        } else if ss == [n, c] {
            true
        } else {
            return Err(QarvError::shape(
                "channel_affine",
                format!("input {:?}, scale {ss:?}", self.shape(x)),
            ));
        };
        check_same("channel_affine", self.value(scale), self.value(shift))?;
        let hw = h * w;
        let (xs, sc, sh) = (
            self.value(x).data(),
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let mut out = vec![T::ZERO; xs.len()];
        for nn in 0..n {
            for ch in 0..c {
                let pi = if per_item { nn * c + ch } else { ch };
                let (a, b) = (sc[pi], sh[pi]);
                let off = (nn * c + ch) * hw;
                for (y, &v) in out[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                    *y = v * a + b;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::ChannelAffine {
                x,
                scale,
                shift,
                per_item,
            },
            &[x, scale, shift],
        ))
    }

    // ---- dense / structural ----

    /// x [N, in] · wᵀ [in, out] + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(QarvError::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(QarvError::shape(
                    "linear",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::ZERO; n * fout];
        for i in 0..n {
            let row = &xv[i * fin..][..fin];
            for o in 0..fout {
                let mut acc = bv.map_or(T::ZERO, |b| b[o]);
                for (&a, &bb) in row.iter().zip(&wv[o * fin..][..fin]) {
                    acc += a * bb;
                }
                out[i * fout + o] = acc;
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, fout], out),
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(QarvError::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for nn in 0..sa[0] {
            out.extend_from_slice(&va[nn * ca..][..ca]);
            out.extend_from_slice(&vb[nn * cb..][..cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b), &[a, b]))
    }

    /// Slice `len` entries of axis 1 starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(QarvError::shape(
                "narrow",
                format!("{s:?}[{start}..{}]", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for nn in 0..s[0] {
            out.extend_from_slice(&v[(nn * s[1] + start) * inner..][..len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow { x, start },
            &[x],
        ))
    }

    /// Repeats a [1, C, h, w] tensor to [n, C, h·th, w·tw].
    pub fn tile(&mut self, x: Var, n: usize, th: usize, tw: usize) -> Result<Var> {
        let (one, c, h, w) = self.value(x).dims4()?;
        if one != 1 || n == 0 || th == 0 || tw == 0 {
            return Err(QarvError::shape("tile", format!("{:?}", self.shape(x))));
        }
        let (ho, wo) = (h * th, w * tw);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for (plane, dst) in out.chunks_mut(ho * wo).enumerate() {
            let s = &src[(plane % c) * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = s[(i % h) * w + j % w];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::Tile { x },
            &[x],
        ))
    }

    /// Elementwise −ln p(z | mean, sigma) of the boxed-Gaussian prior.
    pub fn rate_nats(&mut self, z: Var, mean: Var, sigma: Var) -> Result<Var> {
        check_same("rate_nats", self.value(z), self.value(mean))?;
        check_same("rate_nats", self.value(z), self.value(sigma))?;
        let (zs, ms, ss) = (
            self.value(z).data(),
            self.value(mean).data(),
            self.value(sigma).data(),
        );
        let out = zs
            .iter()
            .zip(ms)
            .zip(ss)
            .map(|((&z, &m), &s)| T::of(crate::prob::density::rate_nats(z.f64(), m.f64(), s.f64())))
            .collect();
        Ok(self.push(
            Tensor::from_parts(self.shape(z).to_vec(), out),
            Op::RateNats { z, mean, sigma },
            &[z, mean, sigma],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::of(self.value(x).data().iter().map(|v| v.f64()).sum());
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums everything but axis 0, giving shape [N].
    pub fn sum_per_item(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(QarvError::shape("sum_per_item", "scalar input"));
        }
        let inner: usize = s[1..].iter().product();
        let v = self.value(x).data();
        let out = (0..s[0])
            .map(|i| T::of(v[i * inner..][..inner].iter().map(|x| x.f64()).sum()))
            .collect();
        Ok(self.push(Tensor::from_parts(vec![s[0]], out), Op::SumPerItem(x), &[x]))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(QarvError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::ONE));
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        for (id, g) in &out.params {
            if !g.all_finite() {
                return Err(QarvError::NonFinite(format!(
                    "gradient of {}",
                    self.store
                        .map_or("parameter".into(), |s| s.get(*id).name.clone())
                )));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let shaped = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape().to_vec(), data);
        let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            shaped(
                a,
                a.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| f(x, gg))
                    .collect(),
            )
        };
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let t = zip(self.value(b), &|bv, gg| bv * gg);
                    self.accumulate(grads, a, t);
                }
                if self.needs(b) {
                    let t = zip(self.value(a), &|av, gg| av * gg);
                    self.accumulate(grads, b, t);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Square(a) => {
                let two = T::of(2.0);
                let t = zip(self.value(a), &|x, gg| two * x * gg);
                self.accumulate(grads, a, t);
            }
            Op::Exp(a) => {
                let t = zip(y, &|yv, gg| yv * gg);
                self.accumulate(grads, a, t);
            }
            Op::Clamp(a, lo, hi) => {
                let t = zip(self.value(a), &|x, gg| {
                    if x >= lo && x <= hi {
                        gg
                    } else {
                        T::ZERO
                    }
                });
                self.accumulate(grads, a, t);
            }
            Op::Gelu(a) => {
                let t = zip(self.value(a), &|x, gg| {
                    let xf = x.f64();
                    T::of(std_normal_cdf(xf) + xf * std_normal_pdf(xf)) * gg
                });
                self.accumulate(grads, a, t);
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.needs(x) {
                    let gx = kernels::conv2d_backward_input(geom, g.data(), self.value(w).data());
                    self.accumulate(grads, x, shaped(self.value(x), gx));
                }
                let want_b = b.is_some_and(|b| self.needs(b));
                if self.needs(w) || want_b {
                    let (gw, gb) = kernels::conv2d_backward_weight(
                        geom,
                        g.data(),
                        self.value(x).data(),
                        want_b,
                    );
                    self.accumulate(grads, w, shaped(self.value(w), gw));
                    if let (Some(b), Some(gb)) = (b, gb) {
                        self.accumulate(grads, b, shaped(self.value(b), gb));
                    }
                }
            }
            Op::Depthwise { x, w, b, k } => {
                let (n, c, h, wd) = self.value(x).dims4()?;
                let (gx, gw, gb) = kernels::depthwise_backward(
                    n,
                    c,
                    h,
                    wd,
                    k,
                    g.data(),
                    self.value(x).data(),
                    self.value(w).data(),
                );
                self.accumulate(grads, x, shaped(self.value(x), gx));
                self.accumulate(grads, w, shaped(self.value(w), gw));
                if let Some(b) = b {
                    self.accumulate(grads, b, shaped(self.value(b), gb));
                }
            }
            Op::Pad { x, pad, mode } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let replicate = mode == PadMode::Replicate;
                let mut gx = vec![T::ZERO; n * c * h * w];
                for (plane, src) in g.data().chunks(hp * wp).enumerate() {
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for i in 0..hp {
                        let Some(si) = kernels::pad_source(i, pad, h, replicate) else {
                            continue;
                        };
                        for j in 0..wp {
                            if let Some(sj) = kernels::pad_source(j, pad, w, replicate) {
                                dst[si * w + sj] += src[i * wp + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, x, shaped(self.value(x), gx));
            }
            Op::PixelShuffle { x, r } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let co = c / (r * r);
                let src = g.data();
                let mut gx = vec![T::ZERO; src.len()];
                for nn in 0..n {
                    for oc in 0..co {
                        for i in 0..r {
                            for j in 0..r {
                                let ic = oc * r * r + i * r + j;
                                let d = &mut gx[(nn * c + ic) * h * w..][..h * w];
                                let base = (nn * co + oc) * h * r * w * r;
                                for yy in 0..h {
                                    for xx in 0..w {
                                        d[yy * w + xx] =
                                            src[base + (yy * r + i) * (w * r) + xx * r + j];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, shaped(self.value(x), gx));
            }
            Op::Norm { x, kind, ref rstd } => {
                let gx = norm_backward(kind, y, g, rstd)?;
                self.accumulate(grads, x, gx);
            }
            Op::ChannelAffine {
                x,
                scale,
                shift,
                per_item,
            } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let (xs, sc) = (self.value(x).data(), self.value(scale).data());
                let gd = g.data();
                let mut gx = vec![T::ZERO; xs.len()];
                let mut gs = vec![T::ZERO; sc.len()];
                let mut gb = vec![T::ZERO; sc.len()];
                for nn in 0..n {
                    for ch in 0..c {
                        let pi = if per_item { nn * c + ch } else { ch };
                        let off = (nn * c + ch) * hw;
                        let a = sc[pi];
                        let (mut ds, mut db) = (T::ZERO, T::ZERO);
                        for p in off..off + hw {
                            gx[p] = gd[p] * a;
                            ds += gd[p] * xs[p];
                            db += gd[p];
                        }
                        gs[pi] += ds;
                        gb[pi] += db;
                    }
                }
                self.accumulate(grads, x, shaped(self.value(x), gx));
                self.accumulate(grads, scale, shaped(self.value(scale), gs));
                self.accumulate(grads, shift, shaped(self.value(shift), gb));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(x)[0], self.shape(x)[1]);
                let fout = self.shape(w)[0];
                let (xv, wv, gd) = (self.value(x).data(), self.value(w).data(), g.data());
                if self.needs(x) {
                    let mut gx = vec![T::ZERO; n * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let go = gd[i * fout + o];
                            for (d, &wv) in
                                gx[i * fin..][..fin].iter_mut().zip(&wv[o * fin..][..fin])
                            {
                                *d += go * wv;
                            }
                        }
                    }
                    self.accumulate(grads, x, shaped(self.value(x), gx));
                }
                if self.needs(w) {
                    let mut gw = vec![T::ZERO; fout * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let go = gd[i * fout + o];
                            for (d, &xv) in
                                gw[o * fin..][..fin].iter_mut().zip(&xv[i * fin..][..fin])
                            {
                                *d += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, w, shaped(self.value(w), gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::ZERO; fout];
                    for i in 0..n {
                        for o in 0..fout {
                            gb[o] += gd[i * fout + o];
                        }
                    }
                    self.accumulate(grads, b, shaped(self.value(b), gb));
                }
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * ca);
                let mut gb = Vec::with_capacity(sa[0] * cb);
                for chunk in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                self.accumulate(grads, a, shaped(self.value(a), ga));
                self.accumulate(grads, b, shaped(self.value(b), gb));
            }
            Op::Narrow { x, start } => {
                let s = self.shape(x);
                let inner: usize = s[2..].iter().product();
                let len = g.shape()[1];
                let mut gx = vec![T::ZERO; self.value(x).numel()];
                for (nn, chunk) in g.data().chunks(len * inner).enumerate() {
                    gx[(nn * s[1] + start) * inner..][..len * inner].copy_from_slice(chunk);
                }
                self.accumulate(grads, x, shaped(self.value(x), gx));
            }
            Op::Tile { x } => {
                let (_, c, h, w) = self.value(x).dims4()?;
                let (_, _, ho, wo) = g.dims4()?;
                let mut gx = vec![T::ZERO; c * h * w];
                for (plane, src) in g.data().chunks(ho * wo).enumerate() {
                    let d = &mut gx[(plane % c) * h * w..][..h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            d[(i % h) * w + j % w] += src[i * wo + j];
                        }
                    }
                }
                self.accumulate(grads, x, shaped(self.value(x), gx));
            }
            Op::RateNats { z, mean, sigma } => {
                let (zs, ms, ss) = (
                    self.value(z).data(),
                    self.value(mean).data(),
                    self.value(sigma).data(),
                );
                let n = zs.len();
                let (mut gz, mut gm, mut gs) =
                    (vec![T::ZERO; n], vec![T::ZERO; n], vec![T::ZERO; n]);
                for i in 0..n {
                    let (_, d) = rate_nats_with_grad(zs[i].f64(), ms[i].f64(), ss[i].f64());
                    let gg = g.data()[i].f64();
                    gz[i] = T::of(gg * d[0]);
                    gm[i] = T::of(gg * d[1]);
                    gs[i] = T::of(gg * d[2]);
                }
                self.accumulate(grads, z, shaped(self.value(z), gz));
                self.accumulate(grads, mean, shaped(self.value(mean), gm));
                self.accumulate(grads, sigma, shaped(self.value(sigma), gs));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv));
            }
            Op::SumPerItem(x) => {
                let s = self.shape(x);
                let inner: usize = s[1..].iter().product();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv, inner))
                    .collect();
                self.accumulate(grads, x, Tensor::from_parts(s.to_vec(), data));
            }
        }
        Ok(())
    }
}

/// dx = r·(dy − mean(dy) − y·mean(dy·y)) over each normalization set.
fn norm_backward<T: Real>(
    kind: NormSets,
    y: &Tensor<T>,
    g: &Tensor<T>,
    rstd: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4()?;
    let (ys, gs) = (y.data(), g.data());
    let mut gx = vec![T::ZERO; ys.len()];
    match kind {
        NormSets::Groups(groups) => {
            let size = c / groups * h * w;
            for (gi, ((yc, gc), dc)) in ys
                .chunks(size)
                .zip(gs.chunks(size))
                .zip(gx.chunks_mut(size))
                .enumerate()
            {
                let mg = gc.iter().map(|v| v.f64()).sum::<f64>() / size as f64;
                let mgy = gc
                    .iter()
                    .zip(yc)
                    .map(|(a, b)| a.f64() * b.f64())
                    .sum::<f64>()
                    / size as f64;
                let r = rstd[gi].f64();
                for ((d, &gv), &yv) in dc.iter_mut().zip(gc).zip(yc) {
                    *d = T::of(r * (gv.f64() - mg - yv.f64() * mgy));
                }
            }
        }
        NormSets::Channels => {
            let hw = h * w;
            let inv_c = 1.0 / c as f64;
            for nn in 0..n {
                let off = nn * c * hw;
                let mut mg = vec![0.0f64; hw];
                let mut mgy = vec![0.0f64; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let i = off + ch * hw + p;
                        mg[p] += gs[i].f64();
                        mgy[p] += gs[i].f64() * ys[i].f64();
                    }
                }
                for ch in 0..c {
                    for p in 0..hw {
                        let i = off + ch * hw + p;
                        let r = rstd[nn * hw + p].f64();
                        gx[i] =
                            T::of(r * (gs[i].f64() - mg[p] * inv_c - ys[i].f64() * mgy[p] * inv_c));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), gx))
}
