//! Plain-loop reference implementations used by unit tests.

use crate::autograd::Tensor;
use crate::nn::{FcBlock, GruCell, ParamId, ParamStore, DEFAULT_SLOPE};

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        DEFAULT_SLOPE * x
    }
}

pub fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn affine(s: &ParamStore, w: ParamId, b: ParamId, x: &[f64]) -> Vec<f64> {
    mv(s.get(w), x).iter().zip(s.get(b).data()).map(|(a, b)| a + b).collect()
}

pub fn fc(s: &ParamStore, blk: &FcBlock, x: &[f64]) -> Vec<f64> {
    affine(s, blk.w, blk.b, x).into_iter().map(lrelu).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn gru(cell: &GruCell, s: &ParamStore, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |w: ParamId, u: ParamId, b: ParamId, hin: &[f64]| -> Vec<f64> {
        let a = mv(s.get(w), x);
        let c = mv(s.get(u), hin);
        (0..a.len()).map(|i| a[i] + c[i] + s.get(b).data()[i]).collect()
    };
    let z: Vec<f64> = gate(cell.wz, cell.uz, cell.bz, h).into_iter().map(sig).collect();
    let r: Vec<f64> = gate(cell.wr, cell.ur, cell.br, h).into_iter().map(sig).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate(cell.wh, cell.uh, cell.bh, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

/// Fills every parameter (biases included) with uniform noise in `±scale`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}
