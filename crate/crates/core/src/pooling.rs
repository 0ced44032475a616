//! Phases 2 and 3 of FedEP: the sample-weighted global label distribution
//! and the KL-divergence attention coefficients used as aggregation weights.

use crate::distfit::{FittedDistribution, GmmParams, DISCRETE_FLOOR};
use crate::{Error, Result};

/// Below this total divergence the federation is treated as IID and every
/// node gets the same weight.
pub const ZERO_DIVERGENCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalComponent {
    /// `p_k = N_k / Σ N_j`.
    pub weight: f64,
    pub params: GmmParams,
}

/// Sample-weighted mixture of the contributing nodes' fits, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDistribution {
    pub components: Vec<GlobalComponent>,
    pub n_classes: usize,
}

/// How divergences become attention coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// `α_k = KLD_k / Σ KLD_j`.
    #[default]
    Proportional,
    /// `α_k ∝ 1 / (KLD_k + ε)`. Ablation only.
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingConfig {
    pub epsilon: f64,
    pub mode: AttentionMode,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            epsilon: DISCRETE_FLOOR,
            mode: AttentionMode::Proportional,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingWeights {
    pub kld: Vec<f64>,
    pub alpha: Vec<f64>,
    /// True when the uniform zero-divergence fallback was used.
    pub fallback: bool,
}

pub fn estimate_global(fits: &[FittedDistribution]) -> Result<GlobalDistribution> {
    let first = fits
        .first()
        .ok_or_else(|| Error::invalid("global estimate needs at least one fit"))?;
    let n_classes = first.n_classes();
    if let Some(f) = fits.iter().find(|f| f.n_classes() != n_classes) {
        return Err(Error::Consistency(format!(
            "fits disagree on class count ({} vs {n_classes})",
            f.n_classes()
        )));
    }
    let total: usize = fits.iter().map(FittedDistribution::n_samples).sum();
    let components = fits
        .iter()
        .map(|f| GlobalComponent {
            weight: f.n_samples() as f64 / total as f64,
            params: f.params().clone(),
        })
        .collect();
    Ok(GlobalDistribution { components, n_classes })
}

/// `Σ_k p_k · discretize(fit_k)`, renormalised.
pub fn global_discrete(global: &GlobalDistribution) -> Vec<f64> {
    let mut out = vec![0.0; global.n_classes];
    for c in &global.components {
        for (o, p) in out
            .iter_mut()
            .zip(c.params.discretize(global.n_classes, DISCRETE_FLOOR))
        {
            *o += c.weight * p;
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `KL(P ‖ Q) = Σ P(y) (ln P(y) − ln Q(y))` with both sides floored at
/// `epsilon` inside the logarithms. Terms with `P(y) = 0` vanish.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    kl_divergence_with_floor(p, q, DISCRETE_FLOOR)
}

pub fn kl_divergence_with_floor(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Consistency(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(epsilon).ln() - qi.max(epsilon).ln()))
        .sum())
}

/// Attention coefficients from the divergence of every local distribution to
/// the global one. Divergences are clamped at zero; if they sum below
/// [`ZERO_DIVERGENCE`] the weights fall back to uniform.
pub fn entropy_pooling_weights(
    p_global: &[f64],
    p_locals: &[Vec<f64>],
    config: &PoolingConfig,
) -> Result<PoolingWeights> {
    if p_locals.is_empty() {
        return Err(Error::invalid("pooling needs at least one local distribution"));
    }
    let kld = p_locals
        .iter()
        .map(|q| kl_divergence_with_floor(p_global, q, config.epsilon).map(|d| d.max(0.0)))
        .collect::<Result<Vec<_>>>()?;
    let (alpha, fallback) = attention_from_divergences(&kld, config);
    Ok(PoolingWeights { kld, alpha, fallback })
}

/// Normalises non-negative divergences into attention coefficients. The
/// flag reports whether the uniform fallback was taken.
pub fn attention_from_divergences(kld: &[f64], config: &PoolingConfig) -> (Vec<f64>, bool) {
    let k = kld.len();
    let total: f64 = kld.iter().sum();
    if total < ZERO_DIVERGENCE {
        return (vec![1.0 / k as f64; k], true);
    }
    let alpha = match config.mode {
        AttentionMode::Proportional => kld.iter().map(|d| d / total).collect(),
        AttentionMode::Inverse => {
            let inv: Vec<f64> = kld.iter().map(|d| 1.0 / (d + config.epsilon)).collect();
            let s: f64 = inv.iter().sum();
            inv.into_iter().map(|v| v / s).collect()
        }
    };
    (alpha, false)
}

/// Phases 2–3 for one node: global estimate over `fits` (the node itself and
/// its neighbours) and the resulting attention weights, in the same order.
pub fn pool_neighbourhood(fits: &[FittedDistribution], config: &PoolingConfig) -> Result<PoolingWeights> {
    let global = global_discrete(&estimate_global(fits)?);
    let locals: Vec<Vec<f64>> = fits.iter().map(crate::distfit::discretize).collect();
    entropy_pooling_weights(&global, &locals, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distfit::discretize;
    use proptest::prelude::*;

    fn delta(at: f64, n: usize, k: usize) -> FittedDistribution {
        FittedDistribution::new(GmmParams::new(vec![1.0], vec![at], vec![1e-4]).unwrap(), n, k).unwrap()
    }

    fn wide(mu: f64, var: f64, n: usize) -> FittedDistribution {
        FittedDistribution::new(GmmParams::new(vec![1.0], vec![mu], vec![var]).unwrap(), n, 10).unwrap()
    }

    #[test]
    fn single_fit_global_equals_local() {
        let f = wide(3.2, 2.0, 50);
        let g = global_discrete(&estimate_global(std::slice::from_ref(&f)).unwrap());
        for (a, b) in g.iter().zip(discretize(&f)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_fits_are_a_fixed_point() {
        let f = wide(6.0, 1.3, 80);
        let g = global_discrete(&estimate_global(&[f.clone(), f.clone()]).unwrap());
        for (a, b) in g.iter().zip(discretize(&f)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_weighted_mixture_of_deltas() {
        let global = estimate_global(&[delta(0.0, 100, 2), delta(1.0, 300, 2)]).unwrap();
        assert_eq!(global.components[0].weight, 0.25);
        let p = global_discrete(&global);
        assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn class_count_mismatch() {
        assert!(matches!(
            estimate_global(&[delta(0.0, 1, 2), delta(0.0, 1, 3)]),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let d = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.143_841_036_225_890_1).abs() < 1e-12);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
        // zero target mass is floored rather than infinite
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn proportional_weights() {
        let cfg = PoolingConfig::default();
        let p = [0.5, 0.5];
        let locals = vec![vec![0.5, 0.5], vec![0.25, 0.75], vec![0.75, 0.25]];
        let w = entropy_pooling_weights(&p, &locals, &cfg).unwrap();
        assert_eq!(w.alpha[0], 0.0);
        assert!((w.alpha[1] - 0.5).abs() < 1e-15 && (w.alpha[2] - 0.5).abs() < 1e-15);
        assert!(!w.fallback);
    }

    #[test]
    fn divergences_normalise_to_attention() {
        let (alpha, fallback) = attention_from_divergences(&[1.0, 1.0, 2.0], &PoolingConfig::default());
        assert_eq!(alpha, vec![0.25, 0.25, 0.5]);
        assert!(!fallback);
        let (alpha, fallback) = attention_from_divergences(&[0.0, 0.0], &PoolingConfig::default());
        assert_eq!(alpha, vec![0.5, 0.5]);
        assert!(fallback);
    }

    #[test]
    fn weights_follow_returned_divergences() {
        let p = [0.2, 0.3, 0.5];
        let locals = vec![vec![0.3, 0.3, 0.4], vec![0.1, 0.4, 0.5], vec![0.6, 0.2, 0.2]];
        let w = entropy_pooling_weights(&p, &locals, &PoolingConfig::default()).unwrap();
        let total: f64 = w.kld.iter().sum();
        for (a, d) in w.alpha.iter().zip(&w.kld) {
            assert!((a - d / total).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_divergence_falls_back_to_uniform() {
        let p = vec![0.1, 0.2, 0.7];
        let w = entropy_pooling_weights(
            &p,
            &[p.clone(), p.clone(), p.clone(), p.clone()],
            &PoolingConfig::default(),
        )
        .unwrap();
        assert!(w.fallback);
        assert_eq!(w.alpha, vec![0.25; 4]);
    }

    #[test]
    fn inverse_mode_prefers_close_nodes() {
        let cfg = PoolingConfig {
            mode: AttentionMode::Inverse,
            ..PoolingConfig::default()
        };
        let p = [0.5, 0.5];
        let w = entropy_pooling_weights(&p, &[vec![0.45, 0.55], vec![0.1, 0.9]], &cfg).unwrap();
        assert!(w.alpha[0] > w.alpha[1]);
        assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        })
    }

    fn fit_strategy() -> impl Strategy<Value = FittedDistribution> {
        (1usize..4, 1usize..500).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(0.05f64..1.0, m),
                prop::collection::vec(-1.0f64..10.0, m),
                prop::collection::vec(1e-4f64..9.0, m),
            )
                .prop_map(move |(w, mu, var)| {
                    let s: f64 = w.iter().sum();
                    let w: Vec<f64> = w.into_iter().map(|x| x / s).collect();
                    FittedDistribution::new(GmmParams::new(w, mu, var).unwrap(), n, 10).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_identity(p in simplex(6), q in simplex(6)) {
    prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn attention_weights_form_a_distribution(fits in prop::collection::vec(fit_strategy(), 1..8)) {
            let w = pool_neighbourhood(&fits, &PoolingConfig::default()).unwrap();
            prop_assert!(w.alpha.iter().all(|&a| a >= 0.0));
            prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.kld.iter().all(|&d| d >= 0.0));
        }

        #[test]
        fn scaling_sample_counts_changes_nothing(
            fits in prop::collection::vec(fit_strategy(), 1..8),
            scale in 2usize..50,
        ) {
            let scaled: Vec<FittedDistribution> = fits
                .iter()
                .map(|f| FittedDistribution::new(f.params().clone(), f.n_samples() * scale, 10).unwrap())
                .collect();
            let a = pool_neighbourhood(&fits, &PoolingConfig::default()).unwrap();
            let b = pool_neighbourhood(&scaled, &PoolingConfig::default()).unwrap();
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn weights_are_permutation_equivariant(
            fits in prop::collection::vec(fit_strategy(), 2..8),
            seed in any::<u64>(),
        ) {
            let mut order: Vec<usize> = (0..fits.len()).collect();
            crate::numkit::Rng::new(seed).shuffle(&mut order);
            let permuted: Vec<FittedDistribution> = order.iter().map(|&i| fits[i].clone()).collect();
            let a = pool_neighbourhood(&fits, &PoolingConfig::default()).unwrap();
            let b = pool_neighbourhood(&permuted, &PoolingConfig::default()).unwrap();
            for (j, &i) in order.iter().enumerate() {
                prop_assert!((b.alpha[j] - a.alpha[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn farther_local_gets_more_attention(
            base in simplex(5),
            others in prop::collection::vec(simplex(5), 1..5),
            shift in 0.05f64..0.9,
        ) {
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let global = vec![0.2; 5];
            let near = norm(base.iter().map(|x| 0.2 * (1.0 - shift) + shift * x).collect());
            let far = norm(base.clone());
            let d_near = kl_divergence(&global, &near).unwrap();
            let d_far = kl_divergence(&global, &far).unwrap();
            prop_assume!(d_far > d_near + 1e-9);
            let mut a_locals = vec![near];
            let mut b_locals = vec![far];
            for o in &others {
                a_locals.push(norm(o.clone()));
                b_locals.push(norm(o.clone()));
            }
            let cfg = PoolingConfig::default();
            let a = entropy_pooling_weights(&global, &a_locals, &cfg).unwrap();
            let b = entropy_pooling_weights(&global, &b_locals, &cfg).unwrap();
            prop_assume!(!a.fallback && !b.fallback);
            prop_assume!(a.kld[1..].iter().sum::<f64>() > 0.0);
            prop_assert!(b.alpha[0] > a.alpha[0]);
        }
    }
}
