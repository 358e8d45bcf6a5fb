//! Small dense networks with hand-written backward passes.
//!
//! Every layer exposes `forward` returning its output plus a cache, and
//! `backward` that accumulates parameter gradients into a zero-initialized
//! twin of the layer and returns the input gradient.

mod adam;
mod checkpoint;
mod gru;
mod layers;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gru::{GruCache, GruCell};
pub use layers::{
    dropout, relu, sigmoid, softplus, LayerNorm, LnCache, Linear, Mlp, MlpCache, ResMlp, ResMlpCache, LN_EPS,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Visitor over the trainable arrays of a network, in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    /// Panics if `flat` has the wrong length; callers check with `num_params`.
    fn assign(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            s.copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        assert_eq!(at, flat.len(), "parameter count mismatch");
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |s| s.fill(0.0));
    }

    /// `self += other`, element-wise over the flattened parameters.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut at = 0;
        self.visit_mut(&mut |s| {
            for x in s.iter_mut() {
                *x += flat[at];
                at += 1;
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|x| x.is_finite()));
        ok
    }
}

/// A zeroed copy of `net`, used as a gradient accumulator.
pub fn zeros_like<P: Params + Clone>(net: &P) -> P {
    let mut z = net.clone();
    z.fill_zero();
    z
}

/// Glorot-uniform fill for an `rows x cols` matrix, scaled by `gain`.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect()
}

impl<P: Params> Params for Vec<P> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for p in self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in self {
            p.visit_mut(f);
        }
    }
}
