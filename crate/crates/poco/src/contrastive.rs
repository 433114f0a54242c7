//! Progressive contrastive losses and hard-negative mining.
//!
//! Each training stage scores one positive pair per anchor against a
//! per-anchor negative set, turns the scores into a softmax distribution,
//! and sums negative log-likelihoods over the batch. Later stages keep
//! only the hardest negatives — the candidates most similar to the
//! positive — so the sets shrink and nest as training progresses.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::StageFeatureIds;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax temperature; sharpens (small) or flattens (large) pair scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(0.5)
    }
}

/// Which projection level a stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    F,
    H1,
    H2,
}

impl FeatureSource {
    pub fn pick(self, feats: &StageFeatureIds) -> NodeId {
        match self {
            FeatureSource::F => feats.f,
            FeatureSource::H1 => feats.h1,
            FeatureSource::H2 => feats.h2,
        }
    }
}

/// Negative-set size and feature level for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    /// 1-based stage index
    pub stage: usize,
    /// negatives per anchor at this stage
    pub n_neg: usize,
    pub source: FeatureSource,
}

impl StagePlan {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.stage == 0 || self.stage > 3 {
            return Err(Error::invalid(format!("stage index {} out of range 1..=3", self.stage)));
        }
        if self.n_neg > batch.saturating_sub(1) {
            return Err(Error::invalid(format!(
                "stage {}: {} negatives but batch {batch} offers at most {}",
                self.stage,
                self.n_neg,
                batch.saturating_sub(1)
            )));
        }
        if self.stage == 1 && self.n_neg != batch - 1 {
            return Err(Error::invalid(format!(
                "stage 1 must use all {} negatives, got {}",
                batch - 1,
                self.n_neg
            )));
        }
        Ok(())
    }
}

/// The canonical three-stage schedule for a batch: every other sample,
/// then half, then a quarter (counts n−1, n/2−1, n/4−1), training f, h1
/// and h2 in that order.
pub fn derive_stage_plans(batch: usize) -> Result<[StagePlan; 3]> {
    if batch < 4 || batch % 4 != 0 {
        return Err(Error::invalid(format!(
            "batch size {batch} must be a positive multiple of 4 to derive stage plans"
        )));
    }
    Ok([
        StagePlan { stage: 1, n_neg: batch - 1, source: FeatureSource::F },
        StagePlan { stage: 2, n_neg: batch / 2 - 1, source: FeatureSource::H1 },
        StagePlan { stage: 3, n_neg: batch / 4 - 1, source: FeatureSource::H2 },
    ])
}

/// Every other batch member, in index order — the stage-1 negative set.
pub fn full_negative_sets(batch: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|i| (0..batch).filter(|&j| j != i).collect())
        .collect()
}

fn validate_stage_sets(batch: usize, sets: &[Vec<usize>]) -> Result<usize> {
    if sets.len() != batch {
        return Err(Error::invalid(format!(
            "negative sets cover {} anchors, batch has {batch}",
            sets.len()
        )));
    }
    let m = sets.first().map_or(0, Vec::len);
    for (i, list) in sets.iter().enumerate() {
        if list.len() != m {
            return Err(Error::invalid(format!(
                "anchor {i} has {} negatives, expected {m} for all anchors",
                list.len()
            )));
        }
        let mut seen = vec![false; batch];
        for &j in list {
            if j >= batch {
                return Err(Error::invalid(format!("anchor {i}: negative index {j} outside batch")));
            }
            if j == i {
                return Err(Error::invalid(format!("anchor {i} lists itself as a negative")));
            }
            if seen[j] {
                return Err(Error::invalid(format!("anchor {i}: duplicate negative index {j}")));
            }
            seen[j] = true;
        }
    }
    Ok(m)
}

/// Per-anchor negative index lists for each stage, newest stage last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSets {
    stages: Vec<Vec<Vec<usize>>>,
    batch: usize,
}

impl NegativeSets {
    /// Validates shape, self-exclusion and (optionally) that each stage's
    /// lists are subsets of the previous stage's.
    pub fn new(batch: usize, stages: Vec<Vec<Vec<usize>>>, require_nested: bool) -> Result<Self> {
        if stages.is_empty() || stages.len() > 3 {
            return Err(Error::invalid(format!("{} stages, expected 1..=3", stages.len())));
        }
        let mut prev_m = usize::MAX;
        for (t, stage) in stages.iter().enumerate() {
            let m = validate_stage_sets(batch, stage)?;
            if m > prev_m {
                return Err(Error::invalid(format!(
                    "stage {} grows to {m} negatives from {prev_m}",
                    t + 1
                )));
            }
            prev_m = m;
        }
        if require_nested {
            for t in 1..stages.len() {
                for i in 0..batch {
                    let prev = &stages[t - 1][i];
                    for &j in &stages[t][i] {
                        if !prev.contains(&j) {
                            return Err(Error::invalid(format!(
                                "anchor {i}: stage-{} negative {j} was not in stage {t}",
                                t + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(NegativeSets { stages, batch })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// 1-based stage accessor.
    pub fn stage(&self, t: usize) -> Result<&[Vec<usize>]> {
        self.stages
            .get(t.wrapping_sub(1))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no stage {t} in {}-stage sets", self.stages.len())))
    }
}

fn dot_f64<S: Scalar>(u: &[S], v: &[S]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum()
}

/// uᵀv / (‖u‖‖v‖), clamped to [−1, 1] against rounding spill.
pub fn cosine_similarity<S: Scalar>(u: &[S], v: &[S]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine_similarity: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot_f64(u, u).sqrt();
    let nv = dot_f64(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::numeric(
            "cosine similarity of a zero vector has no defined direction".to_string(),
        ));
    }
    Ok((dot_f64(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Softmax over [positive, negatives...] similarity scores at temperature
/// tau, computed with max-subtraction so large score/tau ratios stay
/// finite.
fn pair_distribution<S: Scalar>(
    q: &[S],
    k_pos: &[S],
    negatives: &[&[S]],
    tau: Temperature,
) -> Result<Vec<f64>> {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_similarity(q, k_pos)? / tau.value());
    for neg in negatives {
        logits.push(cosine_similarity(q, neg)? / tau.value());
    }
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Probability assigned to the positive pair: exp(sim(q,k⁺)/τ) over the
/// sum across the positive and every negative. 1 exactly when there are
/// no negatives.
pub fn pair_probability<S: Scalar>(
    q: &[S],
    k_pos: &[S],
    negatives: &[&[S]],
    tau: Temperature,
) -> Result<f64> {
    Ok(pair_distribution(q, k_pos, negatives, tau)?[0])
}

/// Softmax mass of negative `j` under the same denominator as
/// [`pair_probability`]; together with it the masses sum to one.
pub fn negative_pair_probability<S: Scalar>(
    q: &[S],
    k_pos: &[S],
    negatives: &[&[S]],
    j: usize,
    tau: Temperature,
) -> Result<f64> {
    if j >= negatives.len() {
        return Err(Error::invalid(format!(
            "negative index {j} outside the {}-element set",
            negatives.len()
        )));
    }
    Ok(pair_distribution(q, k_pos, negatives, tau)?[j + 1])
}

/// One stage's loss over a batch: queries and keys are (n, d) feature
/// rows, matched by index (k row i is q row i's positive). For each
/// anchor the positive and its listed negatives form a softmax at
/// temperature tau; the loss sums −log P(positive) − Σ log(1 − P(negative))
/// over the batch. Sum, not mean: gradient magnitude scales with batch
/// size.
pub fn stage_loss<S: Scalar>(
    g: &mut Graph<S>,
    queries: NodeId,
    keys: NodeId,
    sets: &[Vec<usize>],
    tau: Temperature,
) -> Result<NodeId> {
    let qs = g.value(queries).shape().to_vec();
    let ks = g.value(keys).shape().to_vec();
    if qs.len() != 2 || qs != ks {
        return Err(Error::shape(format!(
            "stage_loss: queries {qs:?} and keys {ks:?} must be matching (n, d) matrices"
        )));
    }
    let n = qs[0];
    let m = validate_stage_sets(n, sets)?;

    let qn = g.row_normalize(queries)?;
    let kn = g.row_normalize(keys)?;
    let sims = g.matmul_nt(qn, kn)?;

    let mut coords = Vec::with_capacity(n * (m + 1));
    for (i, list) in sets.iter().enumerate() {
        coords.push((i, i));
        coords.extend(list.iter().map(|&j| (i, j)));
    }
    let picked = g.gather2d(sims, coords, n, m + 1)?;
    let logits = g.affine(picked, S::from_f64(1.0 / tau.value()), S::zero())?;
    let probs = g.row_softmax(logits)?;

    let pos = g.gather2d(probs, (0..n).map(|i| (i, 0)).collect(), n, 1)?;
    let ln_pos = g.ln(pos)?;
    let mut log_lik = g.sum(ln_pos)?;
    if m > 0 {
        let neg_coords = (0..n).flat_map(|i| (1..=m).map(move |c| (i, c))).collect();
        let negs = g.gather2d(probs, neg_coords, n, m)?;
        let complement = g.affine(negs, S::from_f64(-1.0), S::one())?;
        let ln_neg = g.ln(complement)?;
        let neg_sum = g.sum(ln_neg)?;
        log_lik = g.add(log_lik, neg_sum)?;
    }
    g.affine(log_lik, S::from_f64(-1.0), S::zero())
}

/// Which feature plays the anchor role when ranking candidate negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingView {
    /// rank by cos(k_j, k_i): similarity of each candidate key to the
    /// positive key
    #[default]
    KeyToKey,
    /// rank by cos(q_i, k_j): similarity of each candidate key to the
    /// query
    AnchorToKey,
}

/// Keep, per anchor, the `n_prime` candidates most similar to the
/// positive (largest cosine first, ties broken by ascending index).
/// Feeding each stage's survivors back in yields nested sets.
pub fn select_hard_negatives<S: Scalar>(
    queries: &Tensor<S>,
    keys: &Tensor<S>,
    prev_sets: &[Vec<usize>],
    n_prime: usize,
    view: RankingView,
) -> Result<Vec<Vec<usize>>> {
    let ks = keys.shape();
    if ks.len() != 2 || queries.shape() != ks {
        return Err(Error::shape(format!(
            "select_hard_negatives: queries {:?} and keys {ks:?} must be matching (n, d) matrices",
            queries.shape()
        )));
    }
    let n = ks[0];
    validate_stage_sets(n, prev_sets)?;
    let mut out = Vec::with_capacity(n);
    for (i, candidates) in prev_sets.iter().enumerate() {
        if n_prime > candidates.len() {
            return Err(Error::invalid(format!(
                "anchor {i}: want {n_prime} hard negatives from {} candidates",
                candidates.len()
            )));
        }
        let anchor = match view {
            RankingView::KeyToKey => keys.row(i),
            RankingView::AnchorToKey => queries.row(i),
        };
        let mut ranked: Vec<(usize, f64)> = candidates
            .iter()
            .map(|&j| Ok((j, cosine_similarity(keys.row(j), anchor)?)))
            .collect::<Result<_>>()?;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.push(ranked.into_iter().take(n_prime).map(|(j, _)| j).collect());
    }
    Ok(out)
}

/// Unweighted sum of the per-stage losses (up to three scalars).
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, stage_losses: &[NodeId]) -> Result<NodeId> {
    if stage_losses.is_empty() || stage_losses.len() > 3 {
        return Err(Error::invalid(format!(
            "total_loss: {} stage losses, expected 1..=3",
            stage_losses.len()
        )));
    }
    for &id in stage_losses {
        if !g.value(id).shape().is_empty() {
            return Err(Error::shape("total_loss: stage losses must be scalars".to_string()));
        }
    }
    let mut acc = stage_losses[0];
    for &next in &stage_losses[1..] {
        acc = g.add(acc, next)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TAU_HALF: Temperature = Temperature(0.5);

    fn unit_at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn pair_probability_frozen_cases() {
        let q = [1.0, 0.0];
        // no negatives: the softmax has one entry
        assert_eq!(pair_probability(&q, &[1.0, 0.0], &[], TAU_HALF).unwrap(), 1.0);
        // pos sim 1, one orthogonal negative, tau 0.5
        let neg = [0.0, 1.0];
        let p = pair_probability(&q, &[1.0, 0.0], &[&neg], TAU_HALF).unwrap();
        assert!((p - 0.8807970779778824).abs() < 1e-12);
        let pn = negative_pair_probability(&q, &[1.0, 0.0], &[&neg], 0, TAU_HALF).unwrap();
        assert!((pn - 0.11920292202211756).abs() < 1e-12);
        assert!((p + pn - 1.0).abs() < 1e-15);
    }

    #[test]
    fn huge_temperature_flattens_to_uniform() {
        let q = [1.0, 0.0];
        let negs: Vec<Vec<f64>> = vec![unit_at_cos(0.3), unit_at_cos(-0.5), unit_at_cos(0.9)];
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let tau = Temperature::new(1e6).unwrap();
        let p = pair_probability(&q, &[1.0, 0.0], &refs, tau).unwrap();
        assert!((p - 0.25).abs() < 1e-6);
    }

    #[test]
    fn symmetric_negative_probabilities() {
        let q = [0.4, 0.3];
        // every key identical: all sims equal, masses split evenly
        let k = [2.0, 1.0];
        let refs: Vec<&[f64]> = vec![&k, &k, &k];
        for j in 0..3 {
            let p = negative_pair_probability(&q, &k, &refs, j, TAU_HALF).unwrap();
            assert!((p - 0.25).abs() < 1e-12);
        }
        // one negative at the same similarity as the positive: both 0.5
        let pos = unit_at_cos(0.3);
        let neg = unit_at_cos(0.3);
        let p_pos = pair_probability(&[1.0, 0.0], &pos, &[&neg], TAU_HALF).unwrap();
        let p_neg = negative_pair_probability(&[1.0, 0.0], &pos, &[&neg], 0, TAU_HALF).unwrap();
        assert!((p_pos - 0.5).abs() < 1e-12);
        assert!((p_neg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stabilized_softmax_matches_naive_and_survives_extremes() {
        let q = [1.0, 0.0];
        let negs: Vec<Vec<f64>> = vec![unit_at_cos(0.7), unit_at_cos(-0.2)];
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let p = pair_probability(&q, &[1.0, 0.0], &refs, TAU_HALF).unwrap();
        let naive = {
            let e_pos = (1.0f64 / 0.5).exp();
            let e1 = (0.7f64 / 0.5).exp();
            let e2 = (-0.2f64 / 0.5).exp();
            e_pos / (e_pos + e1 + e2)
        };
        assert!((p - naive).abs() < 1e-12);

        // score/tau of 700 would overflow many naive formulations once
        // summed; the stabilized path stays finite and exact
        let tau = Temperature::new(1.0 / 700.0).unwrap();
        let same = [1.0, 0.0];
        let hot: Vec<&[f64]> = vec![&same, &same, &same];
        let p = pair_probability(&q, &same, &hot, tau).unwrap();
        assert!(p.is_finite());
        assert!((p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn pos_similarity_strictly_improves_anchor_terms() {
        let q = [1.0, 0.0];
        let negs: Vec<Vec<f64>> = vec![unit_at_cos(0.6), unit_at_cos(0.0)];
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let anchor_loss = |pos_sim: f64| {
            let pos = unit_at_cos(pos_sim);
            let p = pair_probability(&q, &pos, &refs, TAU_HALF).unwrap();
            let mut l = -p.ln();
            for j in 0..refs.len() {
                let pn = negative_pair_probability(&q, &pos, &refs, j, TAU_HALF).unwrap();
                l -= (1.0 - pn).ln();
            }
            (p, l)
        };
        let (p_low, l_low) = anchor_loss(0.2);
        let (p_high, l_high) = anchor_loss(0.8);
        assert!(p_high > p_low);
        assert!(l_high < l_low);
    }

    #[test]
    fn two_anchor_stage_loss_matches_hand_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let sets = vec![vec![1], vec![0]];
        let loss = stage_loss(&mut g, q, k, &sets, TAU_HALF).unwrap();
        // 2·[−ln(e²/(e²+1)) − ln(1 − 1/(e²+1))] = 4·ln(1+e⁻²)
        assert!((g.value(loss).item().unwrap() - 0.5077120441718900).abs() < 1e-12);
    }

    #[test]
    fn identical_features_hit_the_closed_form() {
        // all sims 1: every mass is 1/(m+1); per anchor the loss is
        // ln(m+1) − m·ln(m/(m+1))
        for (n, expected) in [(4usize, 8.997362313900934f64), (2, 2.772588722239781)] {
            let mut g = Graph::<f64>::new();
            let rows: Vec<f64> = (0..n).flat_map(|_| [0.3, -0.4, 0.5]).collect();
            let q = g.constant(Tensor::new(vec![n, 3], rows.clone()).unwrap());
            let k = g.constant(Tensor::new(vec![n, 3], rows).unwrap());
            let sets = full_negative_sets(n);
            let loss = stage_loss(&mut g, q, k, &sets, Temperature::new(7.3).unwrap()).unwrap();
            assert!(
                (g.value(loss).item().unwrap() - expected).abs() < 1e-9,
                "n = {n}: {} vs {expected}",
                g.value(loss).item().unwrap()
            );
        }
    }

    #[test]
    fn empty_negative_sets_cost_nothing() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let k = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let sets = vec![vec![], vec![]];
        let loss = stage_loss(&mut g, q, k, &sets, TAU_HALF).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn stage_loss_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);
        let keys = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);
        let sets = full_negative_sets(4);
        let eval = |q: &Tensor<f64>, k: &Tensor<f64>| {
            let mut g = Graph::new();
            let qn = g.constant(q.clone());
            let kn = g.constant(k.clone());
            let loss = stage_loss(&mut g, qn, kn, &sets, TAU_HALF).unwrap();
            g.value(loss).item().unwrap()
        };
        let reference = eval(&base, &keys);
        let scales = [3.0, 0.25, 17.0, 0.001];
        let mut scaled_q = base.clone();
        let mut scaled_k = keys.clone();
        for i in 0..4 {
            for j in 0..6 {
                scaled_q.data_mut()[i * 6 + j] *= scales[i];
                scaled_k.data_mut()[i * 6 + j] *= scales[3 - i];
            }
        }
        assert!((eval(&scaled_q, &scaled_k) - reference).abs() < 1e-9);
        let picked = select_hard_negatives(&base, &keys, &sets, 2, RankingView::KeyToKey).unwrap();
        let picked_scaled =
            select_hard_negatives(&scaled_q, &scaled_k, &sets, 2, RankingView::KeyToKey).unwrap();
        assert_eq!(picked, picked_scaled);
    }

    #[test]
    fn stage_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
        let sets = vec![vec![1, 2], vec![0, 3], vec![3, 0], vec![2, 1]];
        let perm = [2usize, 0, 3, 1]; // new index -> old index
        let mut inv = [0usize; 4];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let permute = |t: &Tensor<f64>| {
            let mut data = Vec::with_capacity(20);
            for &old in &perm {
                data.extend_from_slice(t.row(old));
            }
            Tensor::new(vec![4, 5], data).unwrap()
        };
        let perm_sets: Vec<Vec<usize>> = perm
            .iter()
            .map(|&old| sets[old].iter().map(|&j| inv[j]).collect())
            .collect();
        let eval = |q: &Tensor<f64>, k: &Tensor<f64>, sets: &[Vec<usize>]| {
            let mut g = Graph::new();
            let qn = g.constant(q.clone());
            let kn = g.constant(k.clone());
            let loss = stage_loss(&mut g, qn, kn, sets, TAU_HALF).unwrap();
            g.value(loss).item().unwrap()
        };
        let a = eval(&q, &k, &sets);
        let b = eval(&permute(&q), &permute(&k), &perm_sets);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn stage_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q0 = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let k0 = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let sets = full_negative_sets(4);
        let run = |flats: &[Vec<f64>]| -> Result<(Graph<f64>, NodeId, NodeId, NodeId)> {
            let mut g = Graph::<f64>::new();
            let q = g.leaf(Tensor::new(vec![4, 8], flats[0].clone()).unwrap(), true);
            let k = g.leaf(Tensor::new(vec![4, 8], flats[1].clone()).unwrap(), true);
            let loss = stage_loss(&mut g, q, k, &sets, TAU_HALF)?;
            Ok((g, q, k, loss))
        };
        let base = vec![q0.data().to_vec(), k0.data().to_vec()];
        let (mut g, q, k, loss) = run(&base).unwrap();
        g.backward(loss).unwrap();
        let analytic = vec![g.grad(q).unwrap().data().to_vec(), g.grad(k).unwrap().data().to_vec()];
        let report = check_gradients(
            &["queries".into(), "keys".into()],
            &base,
            &analytic,
            |flats| {
                let (g, _, _, loss) = run(flats)?;
                Ok((g.value(loss).item().unwrap(), g.activation_signature()))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn hard_negative_selection_keeps_topk() {
        // anchor 0's candidates carry sims 0.9, 0.1, 0.5 to its key
        let rows = vec![
            vec![1.0, 0.0],
            unit_at_cos(0.9),
            unit_at_cos(0.1),
            unit_at_cos(0.5),
        ];
        let keys = Tensor::new(vec![4, 2], rows.concat()).unwrap();
        let prev = full_negative_sets(4);
        let picked = select_hard_negatives(&keys, &keys, &prev, 2, RankingView::KeyToKey).unwrap();
        assert_eq!(picked[0], vec![1, 3]);
        // keeping the whole candidate list only reorders it
        let all = select_hard_negatives(&keys, &keys, &prev, 3, RankingView::KeyToKey).unwrap();
        let mut sorted = all[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3]);
        // asking for more than available fails
        assert!(select_hard_negatives(&keys, &keys, &prev, 4, RankingView::KeyToKey).is_err());
    }

    #[test]
    fn ties_break_toward_lower_indices() {
        let keys = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let prev = full_negative_sets(4);
        let picked = select_hard_negatives(&keys, &keys, &prev, 2, RankingView::KeyToKey).unwrap();
        assert_eq!(picked[0], vec![1, 2]);
        assert_eq!(picked[3], vec![0, 1]);
    }

    #[test]
    fn selection_matches_brute_force_and_nests() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let keys = Tensor::<f64>::randn(vec![16, 8], 1.0, &mut rng);
        let queries = Tensor::<f64>::randn(vec![16, 8], 1.0, &mut rng);
        for view in [RankingView::KeyToKey, RankingView::AnchorToKey] {
            let stage1 = full_negative_sets(16);
            let stage2 = select_hard_negatives(&queries, &keys, &stage1, 7, view).unwrap();
            for (i, list) in stage2.iter().enumerate() {
                let anchor = match view {
                    RankingView::KeyToKey => keys.row(i),
                    RankingView::AnchorToKey => queries.row(i),
                };
                let mut oracle: Vec<(usize, f64)> = (0..16)
                    .filter(|&j| j != i)
                    .map(|j| (j, cosine_similarity(keys.row(j), anchor).unwrap()))
                    .collect();
                oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let want: Vec<usize> = oracle.into_iter().take(7).map(|(j, _)| j).collect();
                assert_eq!(*list, want, "anchor {i}");
            }
            let stage3 = select_hard_negatives(&queries, &keys, &stage2, 3, view).unwrap();
            NegativeSets::new(16, vec![stage1, stage2, stage3], true).unwrap();
        }
    }

    #[test]
    fn negative_set_validation_catches_malformed_input() {
        // self-reference
        assert!(NegativeSets::new(2, vec![vec![vec![0], vec![0]]], true).is_err());
        // duplicate entry
        assert!(NegativeSets::new(3, vec![vec![vec![1, 1], vec![0, 2], vec![0, 1]]], true).is_err());
        // ragged lists
        assert!(NegativeSets::new(3, vec![vec![vec![1, 2], vec![0], vec![0, 1]]], true).is_err());
        // growing stage
        let s1 = vec![vec![1], vec![0], vec![0]];
        let s2 = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        assert!(NegativeSets::new(3, vec![s1.clone(), s2.clone()], false).is_err());
        // nesting violation: stage 2 swaps in an index stage 1 dropped
        let s1 = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let s2_bad = vec![vec![3], vec![0], vec![0]];
        assert!(NegativeSets::new(3, vec![s1.clone(), s2_bad], true).is_err());
        let s2_ok = vec![vec![2], vec![0], vec![1]];
        let sets = NegativeSets::new(3, vec![s1, s2_ok], true).unwrap();
        assert_eq!(sets.num_stages(), 2);
        assert_eq!(sets.stage(2).unwrap()[0], vec![2]);
        assert!(sets.stage(3).is_err());
    }

    #[test]
    fn stage_plans_follow_the_batch_size() {
        let plans = derive_stage_plans(64).unwrap();
        assert_eq!(plans.map(|p| p.n_neg), [63, 31, 15]);
        assert_eq!(plans[0].source, FeatureSource::F);
        assert_eq!(plans[2].source, FeatureSource::H2);
        assert_eq!(derive_stage_plans(32).unwrap().map(|p| p.n_neg), [31, 15, 7]);
        assert_eq!(derive_stage_plans(4).unwrap().map(|p| p.n_neg), [3, 1, 0]);
        assert!(derive_stage_plans(6).is_err());
        assert!(derive_stage_plans(0).is_err());
        for p in derive_stage_plans(64).unwrap() {
            p.validate(64).unwrap();
        }
        assert!(StagePlan { stage: 1, n_neg: 10, source: FeatureSource::F }.validate(64).is_err());
        assert!(StagePlan { stage: 2, n_neg: 64, source: FeatureSource::H1 }.validate(64).is_err());
    }

    #[test]
    fn total_loss_sums_stage_scalars() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut g, &[a, b, c]).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 6.0);
        let single = total_loss(&mut g, &[a]).unwrap();
        assert_eq!(g.value(single).item().unwrap(), 1.0);
        assert!(total_loss(&mut g, &[]).is_err());
        assert!(total_loss(&mut g, &[a, b, c, a]).is_err());
    }

    #[test]
    fn three_identical_stages_triple_the_closed_form() {
        let mut g = Graph::<f64>::new();
        let rows: Vec<f64> = (0..4).flat_map(|_| [1.0, 2.0]).collect();
        let q = g.constant(Tensor::new(vec![4, 2], rows.clone()).unwrap());
        let k = g.constant(Tensor::new(vec![4, 2], rows).unwrap());
        let sets = full_negative_sets(4);
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(stage_loss(&mut g, q, k, &sets, TAU_HALF).unwrap());
        }
        let t = total_loss(&mut g, &losses).unwrap();
        assert!((g.value(t).item().unwrap() - 3.0 * 8.997362313900934).abs() < 1e-9);
    }
}
