//! Online selection of the supervising caption: the candidate whose loss gradient
//! at the shared features `V^q` has the largest inner product with the VQA loss
//! gradient, provided that product exceeds `ξ`.

use crate::autograd::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// One gradient tensor per region, each shaped like that region's feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGradients(pub Vec<Tensor>);

impl FeatureGradients {
    pub fn regions(&self) -> &[Tensor] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().flat_map(|t| t.data()).map(|v| v * v).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= c);
                    t
                })
                .collect(),
        )
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        check_aligned(self, other)?;
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| {
                    let mut t = a.clone();
                    t.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    t
                })
                .collect(),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionConfig {
    pub xi: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { xi: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionOutcome {
    Selected { index: usize, inner_product: f64 },
    Infeasible,
}

impl SelectionOutcome {
    pub fn index(&self) -> Option<usize> {
        match *self {
            SelectionOutcome::Selected { index, .. } => Some(index),
            SelectionOutcome::Infeasible => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.index().is_some()
    }
}

/// `∂root/∂v^q_i` for every region node, zeros where the root does not depend on it.
pub fn feature_gradients(graph: &Graph, root: NodeId, vq: &[NodeId]) -> Result<FeatureGradients> {
    let mut grads = graph.gradients_at(root, vq)?;
    Ok(FeatureGradients(
        vq.iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(graph.value(v).shape())))
            .collect(),
    ))
}

fn check_aligned(a: &FeatureGradients, b: &FeatureGradients) -> Result<()> {
    if a.0.len() != b.0.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient sets cover {} and {} regions",
            a.0.len(),
            b.0.len()
        )));
    }
    for (x, y) in a.0.iter().zip(&b.0) {
        if x.shape() != y.shape() {
            return Err(Error::shape("inner_product", &[x.shape(), y.shape()]));
        }
    }
    Ok(())
}

/// `Σ_i g_a,i · g_b,i`
pub fn inner_product(a: &FeatureGradients, b: &FeatureGradients) -> Result<f64> {
    check_aligned(a, b)?;
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>())
        .sum())
}

/// Inner product of `g_vqa` with every candidate, in candidate order.
pub fn candidate_products(g_vqa: &FeatureGradients, g_caps: &[FeatureGradients]) -> Result<Vec<f64>> {
    g_caps.iter().map(|g| inner_product(g_vqa, g)).collect()
}

/// Picks `argmax_j ⟨g_vqa, g_j⟩` (lowest index on ties) if it exceeds `ξ`.
pub fn select_caption(g_vqa: &FeatureGradients, g_caps: &[FeatureGradients], cfg: SelectionConfig) -> Result<SelectionOutcome> {
    if g_caps.is_empty() {
        return Err(Error::InvalidArgument("no candidate captions".into()));
    }
    Ok(select_from_products(&candidate_products(g_vqa, g_caps)?, cfg))
}

pub fn select_from_products(products: &[f64], cfg: SelectionConfig) -> SelectionOutcome {
    let mut best: Option<usize> = None;
    for (j, &p) in products.iter().enumerate() {
        if best.is_none_or(|b| p > products[b]) {
            best = Some(j);
        }
    }
    match best {
        Some(index) if products[index] > cfg.xi => SelectionOutcome::Selected {
            index,
            inner_product: products[index],
        },
        _ => SelectionOutcome::Infeasible,
    }
}

/// `L_vqa + L_cap[j*]`, or `L_vqa` itself when no caption was selected.
pub fn joint_loss(graph: &mut Graph, l_vqa: NodeId, l_caps: &[NodeId], outcome: SelectionOutcome) -> Result<NodeId> {
    match outcome {
        SelectionOutcome::Infeasible => Ok(l_vqa),
        SelectionOutcome::Selected { index, .. } => {
            let l_cap = *l_caps.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!("selected caption {index} but only {} losses", l_caps.len()))
            })?;
            graph.add(l_vqa, l_cap)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grads(rng: &mut ChaCha8Rng, k: usize, d: usize) -> FeatureGradients {
        FeatureGradients((0..k).map(|_| Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect())
    }

    fn flat(g: &FeatureGradients) -> Vec<f64> {
        g.0.iter().flat_map(|t| t.data().to_vec()).collect()
    }

    #[test]
    fn quadratic_loss_gradient_is_the_feature() {
        let mut g = Graph::new();
        let vals = [vec![1.0, -2.0], vec![0.5, 3.0], vec![0.0, 0.25]];
        let vq: Vec<NodeId> = vals.iter().map(|v| g.input(Tensor::vector(v.clone()))).collect();
        let sq: Vec<NodeId> = vq.iter().map(|&v| g.mul(v, v).unwrap()).collect();
        let total = g.add_all(&sq).unwrap();
        let total = g.sum(total, None).unwrap();
        let l = g.scale(total, 0.5).unwrap();
        let fg = feature_gradients(&g, l, &vq).unwrap();
        for (t, v) in fg.0.iter().zip(&vals) {
            assert_eq!(t.data(), v.as_slice());
        }
        let full = g.backward(l).unwrap();
        for (t, &v) in fg.0.iter().zip(&vq) {
            assert_eq!(t, full.get(v).unwrap());
        }
    }

    #[test]
    fn independent_loss_gives_zeros() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 2.0]));
        let w = g.input(Tensor::vector(vec![3.0]));
        let l = g.sum(w, None).unwrap();
        let fg = feature_gradients(&g, l, &[v]).unwrap();
        assert_eq!(fg.0[0].data(), &[0.0, 0.0]);
        assert_eq!(fg.norm_sq(), 0.0);
    }

    #[test]
    fn inner_product_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_grads(&mut rng, 9, 4);
        let b = random_grads(&mut rng, 9, 4);
        assert!((inner_product(&a, &a).unwrap() - a.norm_sq()).abs() < 1e-12);
        assert!((inner_product(&a, &a.scaled(-1.0)).unwrap() + a.norm_sq()).abs() < 1e-12);
        let naive: f64 = flat(&a).iter().zip(flat(&b)).map(|(x, y)| x * y).sum();
        assert!((inner_product(&a, &b).unwrap() - naive).abs() < 1e-12);
        let short = random_grads(&mut rng, 8, 4);
        assert!(inner_product(&a, &short).is_err());
        let narrow = random_grads(&mut rng, 9, 3);
        assert!(inner_product(&a, &narrow).is_err());
    }

    #[test]
    fn trivial_selections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grads(&mut rng, 3, 2);
        let cfg = SelectionConfig::default();
        match select_caption(&g, std::slice::from_ref(&g), cfg).unwrap() {
            SelectionOutcome::Selected { index, inner_product } => {
                assert_eq!(index, 0);
                assert!((inner_product - g.norm_sq()).abs() < 1e-12);
            }
            SelectionOutcome::Infeasible => panic!("expected a selection"),
        }
        let neg = vec![g.scaled(-1.0), g.scaled(-2.0)];
        assert_eq!(select_caption(&g, &neg, cfg).unwrap(), SelectionOutcome::Infeasible);
        assert!(select_caption(&g, &[], cfg).is_err());
        let ties = vec![g.scaled(-1.0), g.clone(), g.clone()];
        assert_eq!(select_caption(&g, &ties, cfg).unwrap().index(), Some(1));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let g = random_grads(&mut rng, 9, 3);
            let caps: Vec<FeatureGradients> = (0..5).map(|_| random_grads(&mut rng, 9, 3)).collect();
            let xi = [0.0, 0.5, -0.5, 2.0][trial % 4];
            let got = select_caption(&g, &caps, SelectionConfig { xi }).unwrap();
            let fg = flat(&g);
            let ips: Vec<f64> = caps.iter().map(|c| fg.iter().zip(flat(c)).map(|(a, b)| a * b).sum()).collect();
            let feasible: Vec<usize> = (0..5).filter(|&j| ips[j] > xi).collect();
            let want = feasible
                .iter()
                .copied()
                .find(|&j| feasible.iter().all(|&k| ips[j] >= ips[k]));
            assert_eq!(got.index(), want);
        }
    }

    #[test]
    fn joint_loss_cases() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.5));
        let b = g.input(Tensor::scalar(0.25));
        assert_eq!(joint_loss(&mut g, a, &[], SelectionOutcome::Infeasible).unwrap(), a);
        assert_eq!(joint_loss(&mut g, a, &[b], SelectionOutcome::Infeasible).unwrap(), a);
        let sel = SelectionOutcome::Selected {
            index: 0,
            inner_product: 1.0,
        };
        let l = joint_loss(&mut g, a, &[b], sel).unwrap();
        assert_eq!(g.value(l).item(), 1.75);
        let bad = SelectionOutcome::Selected {
            index: 3,
            inner_product: 1.0,
        };
        assert!(joint_loss(&mut g, a, &[b], bad).is_err());
    }

    #[test]
    fn joint_gradient_is_sum_of_parts() {
        // Shared parameter w feeds both losses.
        let w0 = vec![0.3, -0.7];
        let build = |g: &mut Graph, w: NodeId| {
            let t = g.tanh(w).unwrap();
            let lv = g.sum(t, None).unwrap();
            let sq = g.mul(w, w).unwrap();
            let lc = g.sum(sq, None).unwrap();
            (lv, lc)
        };
        let mut g = Graph::new();
        let w = g.input(Tensor::vector(w0.clone()));
        let (lv, lc) = build(&mut g, w);
        let sel = SelectionOutcome::Selected {
            index: 0,
            inner_product: 1.0,
        };
        let l = joint_loss(&mut g, lv, &[lc], sel).unwrap();
        let gj = g.backward(l).unwrap().get(w).unwrap().clone();
        let gv = g.backward(lv).unwrap().get(w).unwrap().clone();
        let gc = g.backward(lc).unwrap().get(w).unwrap().clone();
        for i in 0..2 {
            assert!((gj.data()[i] - gv.data()[i] - gc.data()[i]).abs() < 1e-12);
            let eval = |d: f64| {
                let mut p = w0.clone();
                p[i] += d;
                p.iter().map(|x| x.tanh() + x * x).sum::<f64>()
            };
            let num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            assert!((num - gj.data()[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_argmax(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grads(&mut rng, 4, 3);
            let caps: Vec<FeatureGradients> = (0..5).map(|_| random_grads(&mut rng, 4, 3)).collect();
            let scaled: Vec<FeatureGradients> = caps.iter().map(|c| c.scaled(scale)).collect();
            let cfg = SelectionConfig::default();
            let a = select_caption(&g, &caps, cfg).unwrap();
            let b = select_caption(&g, &scaled, cfg).unwrap();
            prop_assert_eq!(a.index(), b.index());
            prop_assert_eq!(a, select_caption(&g, &caps, cfg).unwrap());
        }

        #[test]
        fn selected_product_dominates(seed in any::<u64>(), xi in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grads(&mut rng, 3, 2);
            let caps: Vec<FeatureGradients> = (0..4).map(|_| random_grads(&mut rng, 3, 2)).collect();
            let products = candidate_products(&g, &caps).unwrap();
            if let SelectionOutcome::Selected { index, inner_product } = select_caption(&g, &caps, SelectionConfig { xi }).unwrap() {
                prop_assert!(inner_product > xi);
                prop_assert!(products.iter().all(|&p| inner_product >= p));
                prop_assert!(products[..index].iter().all(|&p| p < inner_product));
            } else {
                prop_assert!(products.iter().all(|&p| p <= xi));
            }
        }
    }
}
