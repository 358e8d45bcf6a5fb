use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{glorot_uniform, Params};
use crate::error::{shape_check, Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, stable for large |x|. Its derivative is `sigmoid(x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { w: DMatrix::zeros(output, input), b: DVector::zeros(output) }
    }

    /// Glorot-uniform weights times `gain`, zero bias.
    pub fn glorot(input: usize, output: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = DMatrix::from_vec(output, input, glorot_uniform(rng, output, input, gain));
        Linear { w, b: DVector::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        shape_check(x.len() == self.input_dim(), || {
            format!("linear input has {} entries, expected {}", x.len(), self.input_dim())
        })?;
        let mut y = self.b.clone();
        y.gemv(1.0, &self.w, &DVectorView::from_slice(x, x.len()), 1.0);
        Ok(y.data.into())
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad`; returns `Wᵀ dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Result<Vec<f64>> {
        shape_check(x.len() == self.input_dim() && dy.len() == self.output_dim(), || {
            format!(
                "linear backward got x {} / dy {}, expected {} / {}",
                x.len(),
                dy.len(),
                self.input_dim(),
                self.output_dim()
            )
        })?;
        let dyv = DVectorView::from_slice(dy, dy.len());
        let xv = DVectorView::from_slice(x, x.len());
        grad.w.ger(1.0, &dyv, &xv, 1.0);
        grad.b += dyv;
        let mut dx = DVector::zeros(x.len());
        dx.gemv_tr(1.0, &self.w, &dyv, 0.0);
        Ok(dx.data.into())
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice());
        f(self.b.as_slice());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_mut_slice());
        f(self.b.as_mut_slice());
    }
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LnCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gain: vec![1.0; dim], bias: vec![0.0; dim], eps: LN_EPS }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, LnCache)> {
        shape_check(x.len() == self.dim() && x.len() >= 2, || {
            format!("layer norm input has {} entries, expected {} (>= 2)", x.len(), self.dim())
        })?;
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat.iter().zip(self.gain.iter().zip(&self.bias)).map(|(h, (g, b))| h * g + b).collect();
        Ok((y, LnCache { xhat, inv_std }))
    }

    pub fn backward(&self, cache: &LnCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = vec![0.0; dy.len()];
        for i in 0..dy.len() {
            grad.gain[i] += dy[i] * cache.xhat[i];
            grad.bias[i] += dy[i];
            dxhat[i] = dy[i] * self.gain[i];
        }
        let sum: f64 = dxhat.iter().sum();
        let dot: f64 = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum();
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, h)| cache.inv_std / n * (n * d - sum - h * dot))
            .collect()
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Fully connected stack: hidden layers are `Linear -> [LayerNorm] -> ReLU`,
/// the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    ln: Vec<LnCache>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`. The output layer uses `out_gain`.
    pub fn new(dims: &[usize], layer_norm: bool, out_gain: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let last = dims.len() - 2;
        let layers = (0..=last)
            .map(|i| Linear::glorot(dims[i], dims[i + 1], if i == last { out_gain } else { 1.0 }, rng))
            .collect();
        let norms = if layer_norm { dims[1..=last].iter().map(|&d| LayerNorm::new(d)).collect() } else { vec![] };
        Mlp { layers, norms }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn output_layer_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut cache = MlpCache { inputs: vec![], ln: vec![], pre: vec![] };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h)?;
            cache.inputs.push(h);
            if i < last {
                if let Some(ln) = self.norms.get(i) {
                    let (z, c) = ln.forward(&y)?;
                    cache.ln.push(c);
                    y = z;
                }
                h = y.iter().map(|&v| relu(v)).collect();
                cache.pre.push(y);
            } else {
                h = y;
            }
        }
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Result<Vec<f64>> {
        let mut d = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (dv, p) in d.iter_mut().zip(&cache.pre[i]) {
                    if *p <= 0.0 {
                        *dv = 0.0;
                    }
                }
                if let Some(ln) = self.norms.get(i) {
                    d = ln.backward(&cache.ln[i], &d, &mut grad.norms[i]);
                }
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i])?;
        }
        Ok(d)
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.visit(f);
        self.norms.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.visit_mut(f);
        self.norms.visit_mut(f);
    }
}

/// Feed-forward network with an additive skip around every pair of layers:
/// `x <- x + fc_b(relu([ln_b] fc_a(relu([ln_a] x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResMlp {
    pub input: Linear,
    pub blocks: Vec<[Linear; 2]>,
    pub norms: Vec<[LayerNorm; 2]>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln: [Option<LnCache>; 2],
    /// Inputs to the two ReLUs.
    pre: [Vec<f64>; 2],
    /// Input to `fc_a`, `fc_b`.
    acts: [Vec<f64>; 2],
}

#[derive(Clone, Debug)]
pub struct ResMlpCache {
    x: Vec<f64>,
    blocks: Vec<BlockCache>,
    top: Vec<f64>,
}

impl ResMlp {
    pub fn new(
        input: usize,
        hidden: usize,
        blocks: usize,
        output: usize,
        layer_norm: bool,
        out_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let first = Linear::glorot(input, hidden, 1.0, rng);
        let blk = (0..blocks)
            .map(|_| [Linear::glorot(hidden, hidden, 1.0, rng), Linear::glorot(hidden, hidden, 1.0, rng)])
            .collect();
        let norms = if layer_norm {
            (0..blocks).map(|_| [LayerNorm::new(hidden), LayerNorm::new(hidden)]).collect()
        } else {
            vec![]
        };
        let head = Linear::glorot(hidden, output, out_gain, rng);
        ResMlp { input: first, blocks: blk, norms, head }
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ResMlpCache)> {
        let mut h = self.input.forward(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (b, [fa, fb]) in self.blocks.iter().enumerate() {
            let mut c = BlockCache { ln: [None, None], pre: [vec![], vec![]], acts: [vec![], vec![]] };
            let mut u = h.clone();
            for (k, fc) in [fa, fb].into_iter().enumerate() {
                if let Some(ln) = self.norms.get(b) {
                    let (y, lc) = ln[k].forward(&u)?;
                    c.ln[k] = Some(lc);
                    u = y;
                }
                let a: Vec<f64> = u.iter().map(|&v| relu(v)).collect();
                c.pre[k] = u;
                u = fc.forward(&a)?;
                c.acts[k] = a;
            }
            for (hv, uv) in h.iter_mut().zip(&u) {
                *hv += uv;
            }
            caches.push(c);
        }
        let y = self.head.forward(&h)?;
        Ok((y, ResMlpCache { x: x.to_vec(), blocks: caches, top: h }))
    }

    pub fn backward(&self, cache: &ResMlpCache, dy: &[f64], grad: &mut ResMlp) -> Result<Vec<f64>> {
        let mut dh = self.head.backward(&cache.top, dy, &mut grad.head)?;
        for b in (0..self.blocks.len()).rev() {
            let c = &cache.blocks[b];
            let mut du = dh.clone();
            for k in (0..2).rev() {
                let da = self.blocks[b][k].backward(&c.acts[k], &du, &mut grad.blocks[b][k])?;
                du = da.iter().zip(&c.pre[k]).map(|(d, p)| if *p > 0.0 { *d } else { 0.0 }).collect();
                if let (Some(ln), Some(lc)) = (self.norms.get(b), &c.ln[k]) {
                    du = ln[k].backward(lc, &du, &mut grad.norms[b][k]);
                }
            }
            for (d, u) in dh.iter_mut().zip(&du) {
                *d += u;
            }
        }
        self.input.backward(&cache.x, &dh, &mut grad.input)
    }
}

impl Params for ResMlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.input.visit(f);
        for [a, b] in &self.blocks {
            a.visit(f);
            b.visit(f);
        }
        for [a, b] in &self.norms {
            a.visit(f);
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.input.visit_mut(f);
        for [a, b] in &mut self.blocks {
            a.visit_mut(f);
            b.visit_mut(f);
        }
        for [a, b] in &mut self.norms {
            a.visit_mut(f);
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Inverted dropout. Returns the output and the per-entry multiplier
/// (0 or `1/(1-p)`), which is also the backward map.
pub fn dropout(x: &[f64], p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::BadConfig(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok((x.to_vec(), vec![1.0; x.len()]));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = x.iter().map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    Ok((x.iter().zip(&mask).map(|(a, m)| a * m).collect(), mask))
}
