//! Built-in verification battery: fast, deterministic checks of the
//! library's core numeric contracts — the rotation-to-column-shift
//! equivalence of the polar warp, the contrastive loss against
//! hand-computed values and closed forms, hard-negative selection
//! against a brute-force oracle, AUC against an independent trapezoid
//! formulation, checkpoint round-trips, and bit-exact training
//! reproducibility. `poco selfcheck` runs the battery on any install
//! without compiling the test suite; every check is seeded and finishes
//! in seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{
    full_negative_sets, negative_pair_probability, pair_probability, select_hard_negatives,
    stage_loss, NegativeSets, RankingView, Temperature,
};
use crate::error::{CheckpointError, Error, Result};
use crate::graph::Graph;
use crate::imagebuf::ImageBuf;
use crate::metrics::{binary_auc, confusion_and_prf, PredictionSet};
use crate::model::{BackboneKind, Model, ModelConfig, ProbeOn};
use crate::pipeline::{pretrain, Checkpoint, CheckpointMeta, TrainConfig, PHASE_PRETRAINED};
use crate::polar::{cyclic_shift, rotate_image, warp_to_polar, PolarGrid};
use crate::synth::{generate_dataset, SplitCounts, SynthConfig};
use crate::tensor::Tensor;

/// Outcome of a single named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    /// Stable identifier, usable in scripts.
    pub name: &'static str,
    pub passed: bool,
    /// Measured values on success, the failure reason otherwise.
    pub detail: String,
}

/// Runs every check and collects the results; nothing short-circuits,
/// so a report always covers the full battery.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        run_one("polar-grid-constants", grid_constants),
        run_one("polar-rotation-shift", rotation_shift),
        run_one("loss-hand-value", loss_hand_value),
        run_one("loss-closed-form", loss_closed_form),
        run_one("probability-normalization", probability_normalization),
        run_one("hard-negative-selection", hard_negative_selection),
        run_one("auc-consistency", auc_consistency),
        run_one("metrics-hand-report", metrics_hand_report),
        run_one("checkpoint-roundtrip", checkpoint_roundtrip),
        run_one("pretrain-determinism", pretrain_determinism),
    ]
}

/// True when every result in the slice passed.
pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn run_one(name: &'static str, check: fn() -> Result<String>) -> CheckResult {
    match check() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
    }
}

fn expect(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::numeric(msg.into()))
    }
}

/// The canonical 224-square grid must hit its spacings exactly: the
/// radial step is (224/2)/224 = 0.5 px and the angular step 360/224°.
fn grid_constants() -> Result<String> {
    let g = PolarGrid::square(224)?;
    expect(
        g.radial_spacing() == 0.5,
        format!("radial spacing {} != 0.5", g.radial_spacing()),
    )?;
    expect(
        g.angular_spacing_deg() == 360.0 / 224.0,
        format!("angular spacing {} != 360/224", g.angular_spacing_deg()),
    )?;
    Ok(format!(
        "224×224 grid: Δr = {} px, Δθ = {:.6}° (both exact)",
        g.radial_spacing(),
        g.angular_spacing_deg()
    ))
}

/// A smooth low-frequency test card; band-limited enough that bilinear
/// resampling error stays well under the equivalence tolerance.
fn smooth_image(side: usize) -> ImageBuf {
    let mut img = ImageBuf::zeros(side, side, 1).expect("valid dims");
    for y in 0..side {
        for x in 0..side {
            let v = 0.5
                + 0.2 * ((x as f64) * 0.17).sin()
                + 0.2 * ((y as f64) * 0.13).cos()
                + 0.05 * (((x + y) as f64) * 0.05).sin();
            img.set(x, y, 0, v as f32);
        }
    }
    img
}

/// Rotating the input by k angular steps must equal cyclically shifting
/// the warped image by k columns, up to resampling error. The two rows
/// at each radial extreme are skipped: the innermost alias heavily and
/// the outermost touch the zero padding.
fn rotation_shift() -> Result<String> {
    let side = 64;
    let img = smooth_image(side);
    let grid = PolarGrid::square(side)?;
    let base = warp_to_polar(&grid, &img)?;
    let mut worst = (0.0f64, 0i64);
    for k in [1i64, 16, 32] {
        let rotated = rotate_image(&img, k as f64 * grid.angular_spacing_deg());
        let via_rotation = warp_to_polar(&grid, &rotated)?;
        let via_shift = cyclic_shift(&base, k);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for row in 2..side - 2 {
            for col in 0..side {
                total += f64::from((via_rotation.get(col, row, 0) - via_shift.get(col, row, 0)).abs());
                count += 1;
            }
        }
        let mean = total / count as f64;
        if mean > worst.0 {
            worst = (mean, k);
        }
        expect(mean <= 0.02, format!("k = {k}: mean abs diff {mean} > 0.02"))?;
    }
    Ok(format!("worst mean |rotate−shift| = {:.5} at k = {} (limit 0.02)", worst.0, worst.1))
}

/// Two orthonormal anchors, each the other's only negative, at τ = 0.5:
/// the stage loss is 4·ln(1 + e⁻²) = 0.50771204417189.
fn loss_hand_value() -> Result<String> {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
    let k = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
    let loss = stage_loss(&mut g, q, k, &[vec![1], vec![0]], Temperature::new(0.5)?)?;
    let got = g.value(loss).item()?;
    let want = 0.5077120441718900;
    expect((got - want).abs() <= 1e-9, format!("loss {got} != {want}"))?;
    Ok(format!("two-anchor loss {got:.12}, |err| = {:.1e}", (got - want).abs()))
}

/// When every feature is the same vector all similarities are 1, every
/// probability mass is 1/(m+1), and the per-anchor loss reduces to
/// ln(m+1) − m·ln(m/(m+1)) at any temperature.
fn loss_closed_form() -> Result<String> {
    let mut worst = 0.0f64;
    for (n, want) in [(4usize, 8.997362313900934f64), (2, 2.772588722239781)] {
        let mut g = Graph::<f64>::new();
        let rows: Vec<f64> = (0..n).flat_map(|_| [0.3, -0.4, 0.5]).collect();
        let q = g.constant(Tensor::new(vec![n, 3], rows.clone())?);
        let k = g.constant(Tensor::new(vec![n, 3], rows)?);
        let loss = stage_loss(&mut g, q, k, &full_negative_sets(n), Temperature::new(7.3)?)?;
        let got = g.value(loss).item()?;
        worst = worst.max((got - want).abs());
        expect((got - want).abs() <= 1e-9, format!("n = {n}: loss {got} != {want}"))?;
    }
    Ok(format!("identical-feature batches n = 2, 4: worst |err| = {worst:.1e}"))
}

/// For any anchor the positive probability plus every negative-pair
/// probability must sum to exactly 1 — they share one denominator.
fn probability_normalization() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut worst = 0.0f64;
    let taus = [0.1, 0.5, 2.0];
    for trial in 0..50 {
        let d = 3 + trial % 6;
        let m = 1 + trial % 8;
        let feats = Tensor::<f64>::randn(vec![m + 2, d], 1.0, &mut rng);
        let q = feats.row(0);
        let pos = feats.row(1);
        let negs: Vec<&[f64]> = (2..m + 2).map(|j| feats.row(j)).collect();
        let tau = Temperature::new(taus[trial % taus.len()])?;
        let mut total = pair_probability(q, pos, &negs, tau)?;
        for j in 0..negs.len() {
            total += negative_pair_probability(q, pos, &negs, j, tau)?;
        }
        worst = worst.max((total - 1.0).abs());
        expect(
            (total - 1.0).abs() <= 1e-9,
            format!("trial {trial}: probabilities sum to {total}"),
        )?;
    }
    Ok(format!("50 random anchors: worst |ΣP − 1| = {worst:.1e}"))
}

fn brute_cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// An independent top-k: rank candidates by cosine to the anchor,
/// largest first, ties by ascending index.
fn brute_top_k(
    feats: &Tensor<f64>,
    anchor: &[f64],
    candidates: &[usize],
    k: usize,
) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> =
        candidates.iter().map(|&j| (j, brute_cosine(feats.row(j), anchor))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(j, _)| j).collect()
}

/// Hard-negative selection must match an exhaustive search under both
/// ranking views, and chaining each stage's survivors must produce sets
/// the nesting validator accepts.
fn hard_negative_selection() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xcafe);
    let sizes = [4usize, 8, 16, 32];
    let mut trials = 0usize;
    for t in 0..60 {
        let n = sizes[t % sizes.len()];
        let q = Tensor::<f64>::randn(vec![n, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![n, 5], 1.0, &mut rng);
        let full = full_negative_sets(n);
        let view = if t % 2 == 0 { RankingView::KeyToKey } else { RankingView::AnchorToKey };
        let s2 = select_hard_negatives(&q, &k, &full, n / 2 - 1, view)?;
        let s3 = select_hard_negatives(&q, &k, &s2, n / 4.max(1) - 1, view)?;
        for i in 0..n {
            let anchor = match view {
                RankingView::KeyToKey => k.row(i),
                RankingView::AnchorToKey => q.row(i),
            };
            let want2 = brute_top_k(&k, anchor, &full[i], n / 2 - 1);
            expect(s2[i] == want2, format!("trial {t} anchor {i}: stage-2 pick differs"))?;
            let want3 = brute_top_k(&k, anchor, &s2[i], n / 4.max(1) - 1);
            expect(s3[i] == want3, format!("trial {t} anchor {i}: stage-3 pick differs"))?;
        }
        NegativeSets::new(n, vec![full, s2, s3], true)?;
        trials += 1;
    }
    Ok(format!("{trials} seeded batches (n ≤ 32, both views) match the exhaustive oracle"))
}

/// Trapezoid rule over the ROC curve with tie groups collapsed — an
/// independent formulation that must agree with the pairwise AUC.
fn trapezoid_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let n = positive.len() as f64 - p;
    let (mut tp, mut fp, mut area) = (0.0f64, 0.0f64, 0.0f64);
    let (mut prev_tp, mut prev_fp) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - prev_fp) / n * (tp + prev_tp) / (2.0 * p);
        prev_tp = tp;
        prev_fp = fp;
    }
    area
}

/// Pairwise AUC and the trapezoid ROC integral are the same number;
/// scores are quantized so tie handling is actually exercised.
fn auc_consistency() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    let mut worst = 0.0f64;
    let mut trials = 0usize;
    while trials < 200 {
        let n = 10 + trials % 50;
        let raw = Tensor::<f64>::randn(vec![n], 1.0, &mut rng);
        let scores: Vec<f64> = raw.data().iter().map(|v| (v * 10.0).round() / 10.0).collect();
        let flags = Tensor::<f64>::randn(vec![n], 1.0, &mut rng);
        let positive: Vec<bool> = flags.data().iter().map(|&v| v > 0.0).collect();
        let pos = positive.iter().filter(|&&x| x).count();
        if pos == 0 || pos == n {
            continue;
        }
        let fast = binary_auc(&scores, &positive)?;
        let slow = trapezoid_auc(&scores, &positive);
        worst = worst.max((fast - slow).abs());
        expect(
            (fast - slow).abs() <= 1e-9,
            format!("trial {trials}: pairwise {fast} vs trapezoid {slow}"),
        )?;
        trials += 1;
    }
    Ok(format!("200 tied-score instances: worst |pairwise − trapezoid| = {worst:.1e}"))
}

/// A four-sample, two-class case small enough to count by hand:
/// accuracy 3/4 and macro F1 = (2/3 + 4/5)/2 = 11/15.
fn metrics_hand_report() -> Result<String> {
    let labels = vec![0usize, 0, 1, 1];
    let preds = [0usize, 1, 1, 1];
    let mut scores = vec![0.0f64; 8];
    for (i, &p) in preds.iter().enumerate() {
        scores[i * 2 + p] = 1.0;
    }
    let pred = PredictionSet::new(2, scores, labels)?;
    let report = confusion_and_prf(&pred)?;
    expect(report.accuracy == 0.75, format!("accuracy {} != 0.75", report.accuracy))?;
    let want = 11.0 / 15.0;
    expect(
        (report.macro_f1 - want).abs() <= 1e-12,
        format!("macro F1 {} != 11/15", report.macro_f1),
    )?;
    Ok(format!("accuracy {:.2}, macro F1 {:.10} = 11/15", report.accuracy, report.macro_f1))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneKind::Tiny,
        input_size: 16,
        input_channels: 3,
        dims: (8, 4, 2),
        num_classes: 3,
        head_relu: false,
        probe_on: ProbeOn::F,
    }
}

/// Serialize → parse → serialize must be byte-identical, and flipping a
/// single payload bit must be caught by the per-tensor checksum.
fn checkpoint_roundtrip() -> Result<String> {
    let cfg = tiny_model_config();
    let model = Model::<f32>::new(cfg.clone(), 3)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            model: cfg,
            use_polar: true,
            seed: 3,
            phase: PHASE_PRETRAINED.to_string(),
            epoch: 0,
            epoch_loss: Vec::new(),
            best_val_accuracy: None,
        },
        tensors: model.named_tensors(),
    };
    let bytes = ckpt.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    let again = back.to_bytes()?;
    expect(bytes == again, "serialize → parse → serialize changed bytes".to_string())?;

    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 1;
    corrupt[last] ^= 0x01;
    match Checkpoint::from_bytes(&corrupt) {
        Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. })) => {}
        Err(e) => return Err(Error::numeric(format!("corruption misreported as: {e}"))),
        Ok(_) => return Err(Error::numeric("corrupted payload parsed cleanly".to_string())),
    }
    Ok(format!(
        "{} tensors, {} bytes: round-trip byte-identical, bit flip caught",
        back.tensors.len(),
        bytes.len()
    ))
}

/// Two identical runs — one with a second view-prep worker — must
/// produce byte-identical checkpoints and loss tables.
fn pretrain_determinism() -> Result<String> {
    let synth = SynthConfig {
        image_size: 16,
        counts: SplitCounts { pretrain: 4, finetune_train: 3, finetune_val: 3, test: 3 },
        ..SynthConfig::default()
    };
    let data = generate_dataset(&synth, 5)?;
    let mut cfg = TrainConfig::desk(tiny_model_config(), 1);
    cfg.batch_size = 4;
    cfg.seed = 9;
    let (ckpt_a, hist_a) = pretrain::<f32>(&cfg, &data.pretrain)?;
    cfg.workers = 2;
    let (ckpt_b, hist_b) = pretrain::<f32>(&cfg, &data.pretrain)?;
    let bytes_a = ckpt_a.to_bytes()?;
    let bytes_b = ckpt_b.to_bytes()?;
    expect(bytes_a == bytes_b, "checkpoints differ between identical runs".to_string())?;
    expect(hist_a.to_csv() == hist_b.to_csv(), "loss histories differ".to_string())?;
    Ok(format!(
        "repeat run (workers 1 → 2): checkpoint {} bytes and loss CSV identical",
        bytes_a.len()
    ))
}
