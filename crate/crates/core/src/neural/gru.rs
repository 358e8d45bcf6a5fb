use rand_chacha::ChaCha8Rng;

use super::layers::{sigmoid, LayerNorm, LnCache, Linear};
use super::Params;
use crate::error::{shape_check, Result};

/// Layer-normalized GRU cell:
///
/// ```text
/// z  = σ(LN(W_z x) + LN(U_z h))
/// r  = σ(LN(W_r x) + LN(U_r h))
/// ĥ  = tanh(LN(W_h x) + LN(U_h (r ⊙ h)))
/// h' = (1 - z) ⊙ h + z ⊙ ĥ
/// ```
///
/// Each affine map carries a bias; all biases start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    /// `W_z, W_r, W_h`.
    pub w: [Linear; 3],
    /// `U_z, U_r, U_h`.
    pub u: [Linear; 3],
    /// Norms on the `W` terms, then on the `U` terms.
    pub ln_w: [LayerNorm; 3],
    pub ln_u: [LayerNorm; 3],
}

#[derive(Clone, Debug)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    rh: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    hc: Vec<f64>,
    ln_w: [LnCache; 3],
    ln_u: [LnCache; 3],
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = [(); 3].map(|_| Linear::glorot(input, hidden, 1.0, rng));
        let u = [(); 3].map(|_| Linear::glorot(hidden, hidden, 1.0, rng));
        GruCell { w, u, ln_w: [(); 3].map(|_| LayerNorm::new(hidden)), ln_u: [(); 3].map(|_| LayerNorm::new(hidden)) }
    }

    pub fn input_dim(&self) -> usize {
        self.w[0].input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u[0].output_dim()
    }

    pub fn forward(&self, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        shape_check(h.len() == self.hidden_dim(), || {
            format!("GRU state has {} entries, expected {}", h.len(), self.hidden_dim())
        })?;
        let (az, lwz) = self.ln_w[0].forward(&self.w[0].forward(x)?)?;
        let (ar, lwr) = self.ln_w[1].forward(&self.w[1].forward(x)?)?;
        let (ah, lwh) = self.ln_w[2].forward(&self.w[2].forward(x)?)?;
        let (bz, luz) = self.ln_u[0].forward(&self.u[0].forward(h)?)?;
        let (br, lur) = self.ln_u[1].forward(&self.u[1].forward(h)?)?;
        let z: Vec<f64> = az.iter().zip(&bz).map(|(a, b)| sigmoid(a + b)).collect();
        let r: Vec<f64> = ar.iter().zip(&br).map(|(a, b)| sigmoid(a + b)).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let (bh, luh) = self.ln_u[2].forward(&self.u[2].forward(&rh)?)?;
        let hc: Vec<f64> = ah.iter().zip(&bh).map(|(a, b)| (a + b).tanh()).collect();
        let next = (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * hc[i]).collect();
        let cache = GruCache {
            x: x.to_vec(),
            h: h.to_vec(),
            rh,
            z,
            r,
            hc,
            ln_w: [lwz, lwr, lwh],
            ln_u: [luz, lur, luh],
        };
        Ok((next, cache))
    }

    /// Given `dL/dh'`, accumulates parameter gradients and returns
    /// `(dL/dx, dL/dh)`.
    pub fn backward(&self, c: &GruCache, dnext: &[f64], grad: &mut GruCell) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = c.h.len();
        shape_check(dnext.len() == n, || format!("GRU upstream has {} entries, expected {n}", dnext.len()))?;
        let mut dh: Vec<f64> = (0..n).map(|i| dnext[i] * (1.0 - c.z[i])).collect();
        let dpre_h: Vec<f64> = (0..n).map(|i| dnext[i] * c.z[i] * (1.0 - c.hc[i] * c.hc[i])).collect();
        let dpre_z: Vec<f64> = (0..n).map(|i| dnext[i] * (c.hc[i] - c.h[i]) * c.z[i] * (1.0 - c.z[i])).collect();

        let mut dx = vec![0.0; c.x.len()];
        let add = |acc: &mut Vec<f64>, v: Vec<f64>| {
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        };

        // Candidate path.
        let d = self.ln_w[2].backward(&c.ln_w[2], &dpre_h, &mut grad.ln_w[2]);
        add(&mut dx, self.w[2].backward(&c.x, &d, &mut grad.w[2])?);
        let d = self.ln_u[2].backward(&c.ln_u[2], &dpre_h, &mut grad.ln_u[2]);
        let drh = self.u[2].backward(&c.rh, &d, &mut grad.u[2])?;
        let dpre_r: Vec<f64> = (0..n).map(|i| drh[i] * c.h[i] * c.r[i] * (1.0 - c.r[i])).collect();
        for i in 0..n {
            dh[i] += drh[i] * c.r[i];
        }

        for (k, dpre) in [(0, &dpre_z), (1, &dpre_r)] {
            let d = self.ln_w[k].backward(&c.ln_w[k], dpre, &mut grad.ln_w[k]);
            add(&mut dx, self.w[k].backward(&c.x, &d, &mut grad.w[k])?);
            let d = self.ln_u[k].backward(&c.ln_u[k], dpre, &mut grad.ln_u[k]);
            add(&mut dh, self.u[k].backward(&c.h, &d, &mut grad.u[k])?);
        }
        Ok((dx, dh))
    }
}

impl Params for GruCell {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in self.w.iter().chain(&self.u) {
            l.visit(f);
        }
        for l in self.ln_w.iter().chain(&self.ln_u) {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in self.w.iter_mut().chain(&mut self.u) {
            l.visit_mut(f);
        }
        for l in self.ln_w.iter_mut().chain(&mut self.ln_u) {
            l.visit_mut(f);
        }
    }
}
