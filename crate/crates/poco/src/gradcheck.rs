//! Central-difference validation of analytic gradients.
//!
//! The loss is treated as a black box that also reports an activation
//! signature (see [`crate::graph::Graph::activation_signature`]). A
//! coordinate whose plus/minus evaluations land on different signatures
//! crossed a ReLU or max-pool boundary, where the finite-difference
//! quotient is meaningless; those coordinates are skipped and counted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{
    derive_stage_plans, full_negative_sets, select_hard_negatives, stage_loss, total_loss,
    RankingView, StagePlan, Temperature,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{BackboneKind, Binding, Model, ModelConfig, ProbeOn, StageFeatureIds};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// half-width of the central difference
    pub step: f64,
    /// per-parameter cap on checked coordinates; larger tensors are
    /// subsampled deterministically
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: 200, seed: 17 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
    /// parameter and flat coordinate of the largest relative error
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, max_tol: f64, median_tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < max_tol && self.median_rel_err < median_tol
    }
}

/// Guarded relative error. The floor keeps structurally-zero gradients
/// honest: a convolution bias is cancelled exactly by the normalization
/// that follows it, so both sides are round-off noise (~1e-11 for the
/// central difference) and an unguarded ratio would compare noise
/// against noise. Genuine mismatches sit orders of magnitude above the
/// floor.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare analytic gradients against central differences of `eval`.
///
/// `eval` maps parameter values to `(loss, activation_signature)` and must
/// be deterministic; the harness evaluates the base point twice and errors
/// if the bits differ. `analytic` holds the gradients at `base`.
pub fn check_gradients(
    names: &[String],
    base: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut eval: impl FnMut(&[Vec<f64>]) -> Result<(f64, u64)>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if names.len() != base.len() || analytic.len() != base.len() {
        return Err(Error::shape(format!(
            "check_gradients: {} names, {} tensors, {} gradients",
            names.len(),
            base.len(),
            analytic.len()
        )));
    }
    for (i, (b, a)) in base.iter().zip(analytic).enumerate() {
        if b.len() != a.len() {
            return Err(Error::shape(format!(
                "check_gradients: '{}' has {} values but {} gradient entries",
                names[i],
                b.len(),
                a.len()
            )));
        }
    }
    let (l0, sig0) = eval(base)?;
    let (l1, sig1) = eval(base)?;
    if l0.to_bits() != l1.to_bits() || sig0 != sig1 {
        return Err(Error::numeric(
            "check_gradients: loss is not deterministic at the base point",
        ));
    }

    let mut work: Vec<Vec<f64>> = base.to_vec();
    let mut rels: Vec<f64> = Vec::new();
    let mut skipped = 0usize;
    let mut worst: Option<(String, usize)> = None;
    let mut worst_rel = -1.0f64;

    for p in 0..base.len() {
        let len = base[p].len();
        let coords: Vec<usize> = if len <= opts.max_coords {
            (0..len).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (p as u64).wrapping_mul(0x9e37_79b9));
            let mut picked = rand::seq::index::sample(&mut rng, len, opts.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        for &c in &coords {
            let saved = work[p][c];
            work[p][c] = saved + opts.step;
            let (lp, sp) = eval(&work)?;
            work[p][c] = saved - opts.step;
            let (lm, sm) = eval(&work)?;
            work[p][c] = saved;
            if sp != sig0 || sm != sig0 {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * opts.step);
            let a = analytic[p][c];
            let r = rel_err(a, fd);
            if r > worst_rel {
                worst_rel = r;
                worst = Some((names[p].clone(), c));
            }
            rels.push(r);
        }
    }

    rels.sort_by(|x, y| x.partial_cmp(y).expect("rel errors are finite"));
    let median = if rels.is_empty() {
        0.0
    } else if rels.len() % 2 == 1 {
        rels[rels.len() / 2]
    } else {
        0.5 * (rels[rels.len() / 2 - 1] + rels[rels.len() / 2])
    };
    Ok(GradCheckReport {
        checked: rels.len(),
        skipped,
        max_rel_err: rels.last().copied().unwrap_or(0.0),
        median_rel_err: median,
        worst,
    })
}

/// The three per-stage losses over frozen negative sets, summed.
fn frozen_loss(
    g: &mut Graph<f64>,
    feats: &StageFeatureIds,
    n: usize,
    plans: &[StagePlan; 3],
    sets: &[Vec<Vec<usize>>],
    tau: Temperature,
) -> Result<NodeId> {
    let mut losses = Vec::with_capacity(3);
    for (t, plan) in plans.iter().enumerate() {
        let whole = plan.source.pick(feats);
        let q = g.slice_rows(whole, 0, n)?;
        let k = g.slice_rows(whole, n, 2 * n)?;
        losses.push(stage_loss(g, q, k, &sets[t], tau)?);
    }
    total_loss(g, &losses)
}

/// End-to-end harness: the full three-stage loss through a tiny
/// backbone and both heads on one random batch, in 64-bit.
///
/// Hard-negative selection picks indices from feature values and is not
/// differentiated through, so the sets are frozen at the base point;
/// the finite-difference surface is then exactly the one an optimizer
/// step descends. Batch statistics feed the normalization, as in
/// training.
pub fn check_model_gradients(
    batch: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        backbone: BackboneKind::Tiny,
        input_size: 8,
        input_channels: 1,
        dims: (8, 4, 2),
        num_classes: 2,
        head_relu: false,
        probe_on: ProbeOn::F,
    };
    let model = Model::<f64>::new(cfg, seed)?;
    let plans = derive_stage_plans(batch)?;
    let tau = Temperature::new(0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // image-like pixels centered on mid-grey; an all-negative sample
    // would die at the first ReLU and zero out its feature row
    let mut input = Tensor::<f64>::randn(vec![2 * batch, 1, 8, 8], 1.0, &mut rng);
    for v in input.data_mut() {
        *v = 0.5 + 0.15 * *v;
    }

    // the forward pass mutates BN running buffers, so each evaluation
    // runs on a throwaway clone and the original stays at the base point
    let forward = |vals: Option<&[Vec<f64>]>| -> Result<(Graph<f64>, Binding, StageFeatureIds)> {
        let mut m = model.clone();
        if let Some(vals) = vals {
            for (p, v) in m.params_mut().iter_mut().zip(vals) {
                p.value.data_mut().copy_from_slice(v);
            }
        }
        let mut g = Graph::new();
        let bind = m.bind(&mut g);
        let images = g.constant(input.clone());
        let feats = m.forward_features(&mut g, &bind, images)?;
        Ok((g, bind, feats))
    };

    let sets = {
        let (mut g, _, feats) = forward(None)?;
        let full = full_negative_sets(batch);
        let mut stages = vec![full];
        for t in 1..3 {
            let whole = plans[t].source.pick(&feats);
            let q = g.slice_rows(whole, 0, batch)?;
            let k = g.slice_rows(whole, batch, 2 * batch)?;
            let picked = select_hard_negatives(
                g.value(q),
                g.value(k),
                stages.last().expect("previous stage present"),
                plans[t].n_neg,
                RankingView::KeyToKey,
            )?;
            stages.push(picked);
        }
        stages
    };

    let (names, base, analytic) = {
        let (mut g, bind, feats) = forward(None)?;
        let total = frozen_loss(&mut g, &feats, batch, &plans, &sets, tau)?;
        g.backward(total)?;
        let mut names = Vec::new();
        let mut base = Vec::new();
        let mut analytic = Vec::new();
        for (i, p) in model.params().iter().enumerate() {
            names.push(p.name.clone());
            base.push(p.value.data().to_vec());
            analytic.push(match g.grad(bind.node(i)) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; p.value.numel()],
            });
        }
        (names, base, analytic)
    };

    check_gradients(
        &names,
        &base,
        &analytic,
        |vals| {
            let (mut g, _, feats) = forward(Some(vals))?;
            let total = frozen_loss(&mut g, &feats, batch, &plans, &sets, tau)?;
            Ok((g.value(total).item()?, g.activation_signature()))
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn correct_quadratic_gradient_passes() {
        let base = vec![vec![1.0, 2.0, 3.0]];
        let analytic = vec![vec![2.0, 4.0, 6.0]];
        let report = check_gradients(
            &names(&["w"]),
            &base,
            &analytic,
            |p| Ok((p[0].iter().map(|v| v * v).sum(), 0)),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-8, "max {}", report.max_rel_err);
        assert!(report.passes(1e-3, 1e-6));
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let base = vec![vec![1.0, 2.0]];
        let analytic = vec![vec![2.0, 5.5]];
        let report = check_gradients(
            &names(&["w"]),
            &base,
            &analytic,
            |p| Ok((p[0].iter().map(|v| v * v).sum(), 0)),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err > 0.2, "max {}", report.max_rel_err);
        assert_eq!(report.worst.as_ref().unwrap().1, 1);
        assert!(!report.passes(1e-3, 1e-6));
    }

    #[test]
    fn kink_crossing_coordinates_are_skipped() {
        // relu(x) with x closer to zero than the step: the two half
        // evaluations land on different sides
        let base = vec![vec![0.5e-5]];
        let analytic = vec![vec![1.0]];
        let report = check_gradients(
            &names(&["x"]),
            &base,
            &analytic,
            |p| {
                let x = p[0][0];
                Ok((x.max(0.0), u64::from(x > 0.0)))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn nondeterministic_loss_is_an_error() {
        let mut calls = 0u32;
        let err = check_gradients(
            &names(&["x"]),
            &[vec![1.0]],
            &[vec![1.0]],
            |p| {
                calls += 1;
                Ok((p[0][0] + f64::from(calls) * 1e-3, 0))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"), "{err}");
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let base = vec![vec![0.1; 10_000]];
        let analytic = vec![vec![0.2; 10_000]];
        let opts = GradCheckOptions { max_coords: 25, ..GradCheckOptions::default() };
        let report = check_gradients(
            &names(&["w"]),
            &base,
            &analytic,
            |p| Ok((p[0].iter().map(|v| v * v).sum(), 0)),
            &opts,
        )
        .unwrap();
        assert_eq!(report.checked, 25);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn model_loss_gradients_match_finite_differences() {
        // batch 8 → stage plan 7/3/1: all three stages and both heads
        // carry gradient
        let opts = GradCheckOptions { max_coords: 30, ..GradCheckOptions::default() };
        let report = check_model_gradients(8, 17, &opts).unwrap();
        assert!(report.checked > 100, "only {} coordinates checked", report.checked);
        assert!(
            report.passes(1e-3, 1e-6),
            "max {} median {} (worst: {:?})",
            report.max_rel_err,
            report.median_rel_err,
            report.worst
        );
        // kink crossings should be rare at a random init
        assert!(report.skipped < report.checked / 2, "skipped {}", report.skipped);
    }

    #[test]
    fn minimum_batch_leaves_the_last_stage_empty_but_checks_out() {
        // batch 4 → plan 3/1/0: the last stage contributes nothing and
        // the second head's gradient is identically zero, which the
        // finite differences must confirm
        let opts = GradCheckOptions { max_coords: 25, ..GradCheckOptions::default() };
        let report = check_model_gradients(4, 3, &opts).unwrap();
        assert!(report.passes(1e-3, 1e-6), "max {}", report.max_rel_err);
    }

    #[test]
    fn odd_batches_are_rejected() {
        let err = check_model_gradients(6, 1, &GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
    }
}
