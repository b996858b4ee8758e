//! Contrastive alignment of the mapping network with in-batch negatives.
//!
//! For a batch of (image feature, document) pairs the query of pair `i` is
//! `F_M(x_i)` and `s_ij = maxsim(F_M(x_i), D_j)`. The loss is
//!
//! ```text
//! L = sum_i [ -s_ii + logsumexp_j s_ij ]
//! ```
//!
//! Gradients are derived by hand: `dL/ds_ij = p_ij - [i == j]`, routed through
//! the arg-max document row of each query token, the optional row
//! normalization, and the two MLP layers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{map_visual, mlp_forward, normalize_token_rows};
use crate::error::{Error, Result};
use crate::model::{MappingNetwork, TokenMatrix, VisualFeature};
use crate::scorer::maxsim;

/// XORed into the seed for the shuffle stream so it differs from initialization.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

fn default_lr() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    30
}

fn default_steps() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub seed: u64,
    /// Global L2 norm cap on the gradient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Held-out Recall@1 is measured every this many steps; 0 measures only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// The last `holdout` pairs are kept out of training and used for evaluation.
    #[serde(default)]
    pub holdout: usize,
    /// Hidden width of a freshly initialized network; defaults to half the output width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            steps: default_steps(),
            seed,
            grad_clip: None,
            eval_every: 0,
            holdout: 0,
            hidden: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 so every query has a negative".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig("grad_clip must be positive".into()));
            }
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidConfig("hidden must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses TOML; `seed` is required.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        if !table.contains_key("seed") {
            return Err(Error::InvalidConfig("missing field: seed".into()));
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }
}

/// In-batch score matrix; row `i` holds query `i` against every document.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    b: usize,
    data: Vec<f64>,
}

impl BatchScores {
    pub fn new(b: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != b * b {
            return Err(Error::Shape(format!(
                "batch scores: {} values do not form a {b}x{b} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("batch scores must be finite".into()));
        }
        Ok(BatchScores { b, data })
    }

    pub fn size(&self) -> usize {
        self.b
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.b + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.b..(i + 1) * self.b]
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `sum_i [ -s_ii + logsumexp_j s_ij ]`.
pub fn contrastive_loss(scores: &BatchScores) -> Result<f64> {
    if scores.b < 2 {
        return Err(Error::InvalidConfig(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    Ok((0..scores.b)
        .map(|i| logsumexp(scores.row(i)) - scores.get(i, i))
        .sum())
}

/// `dL/ds`: row-wise softmax minus the identity.
pub fn score_gradients(scores: &BatchScores) -> Vec<f64> {
    let b = scores.b;
    let mut g = Vec::with_capacity(b * b);
    for i in 0..b {
        let row = scores.row(i);
        let lse = logsumexp(row);
        g.extend(
            row.iter()
                .enumerate()
                .map(|(j, s)| (s - lse).exp() - f64::from(u8::from(i == j))),
        );
    }
    g
}

/// Forward state of one query: MLP activations and its (normalized) tokens in f64.
struct QueryState {
    x: Vec<f64>,
    hidden: Vec<f64>,
    tokens: Vec<f64>,
    norms: Option<Vec<f64>>,
}

fn forward_query(net: &MappingNetwork, feature: &[f32], normalize: bool) -> QueryState {
    let x: Vec<f64> = feature.iter().map(|&v| f64::from(v)).collect();
    let f = mlp_forward(net, &x);
    let mut tokens = f.out;
    let norms = normalize.then(|| normalize_token_rows(&mut tokens, net.d_l));
    QueryState {
        x,
        hidden: f.hidden,
        tokens,
        norms,
    }
}

fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * f64::from(y)).sum()
}

/// MaxSim of f64 query tokens against a document, with the arg-max row per
/// query token (lowest index on ties).
fn maxsim_f64(tokens: &[f64], d_l: usize, doc: &TokenMatrix) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut arg = Vec::with_capacity(tokens.len() / d_l);
    for q in tokens.chunks_exact(d_l) {
        let mut best = (0, f64::NEG_INFINITY);
        for (r, row) in doc.iter_rows().enumerate() {
            let s = dot_mixed(q, row);
            if s > best.1 {
                best = (r, s);
            }
        }
        total += best.1;
        arg.push(best.0);
    }
    (total, arg)
}

fn check_batch(net: &MappingNetwork, features: &[&[f32]], docs: &[&TokenMatrix]) -> Result<()> {
    if features.len() != docs.len() {
        return Err(Error::LengthMismatch {
            context: "batch features vs documents",
            left: features.len(),
            right: docs.len(),
        });
    }
    if features.len() < 2 {
        return Err(Error::InvalidConfig(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    for f in features {
        if f.len() != net.d_v {
            return Err(Error::dim("training feature", net.d_v, f.len()));
        }
    }
    for d in docs {
        if d.dim() != net.d_l {
            return Err(Error::dim("training document", net.d_l, d.dim()));
        }
    }
    Ok(())
}

/// Loss of one batch, evaluated on the same f64 path as [`loss_gradients`].
pub fn batch_loss(
    net: &MappingNetwork,
    features: &[&[f32]],
    docs: &[&TokenMatrix],
    normalize: bool,
) -> Result<f64> {
    check_batch(net, features, docs)?;
    let states: Vec<QueryState> = features
        .iter()
        .map(|f| forward_query(net, f, normalize))
        .collect();
    let b = docs.len();
    let mut data = Vec::with_capacity(b * b);
    for s in &states {
        data.extend(docs.iter().map(|d| maxsim_f64(&s.tokens, net.d_l, d).0));
    }
    contrastive_loss(&BatchScores::new(b, data)?)
}

/// Loss and its gradient with respect to every network parameter. The
/// gradient has the network's own shape.
pub fn loss_gradients(
    net: &MappingNetwork,
    features: &[&[f32]],
    docs: &[&TokenMatrix],
    normalize: bool,
) -> Result<(f64, MappingNetwork)> {
    check_batch(net, features, docs)?;
    let b = docs.len();
    let d_l = net.d_l;
    let (h, o) = (net.hidden, net.out_width());
    let states: Vec<QueryState> = features
        .iter()
        .map(|f| forward_query(net, f, normalize))
        .collect();

    let mut data = Vec::with_capacity(b * b);
    let mut argmax = Vec::with_capacity(b * b);
    for s in &states {
        for d in docs {
            let (score, arg) = maxsim_f64(&s.tokens, d_l, d);
            data.push(score);
            argmax.push(arg);
        }
    }
    let scores = BatchScores::new(b, data)?;
    let loss = contrastive_loss(&scores)?;
    let g = score_gradients(&scores);

    let mut grad = MappingNetwork::zeros(net.d_v, h, net.n_vt, d_l);
    let mut dy = vec![0.0f64; o];
    let mut dh = vec![0.0f64; h];
    for (i, s) in states.iter().enumerate() {
        // dL/dQ_i[t] = sum_j g_ij * D_j[argmax_ij(t)]
        dy.iter_mut().for_each(|v| *v = 0.0);
        for (j, doc) in docs.iter().enumerate() {
            let gij = g[i * b + j];
            for (t, &r) in argmax[i * b + j].iter().enumerate() {
                for (acc, &dv) in dy[t * d_l..(t + 1) * d_l].iter_mut().zip(doc.row(r)) {
                    *acc += gij * f64::from(dv);
                }
            }
        }
        // Back through y = u / |u|: du = (dy - y (y . dy)) / |u|.
        if let Some(norms) = &s.norms {
            for (t, &n) in norms.iter().enumerate() {
                if n == 0.0 {
                    continue;
                }
                let y = &s.tokens[t * d_l..(t + 1) * d_l];
                let dyt = &mut dy[t * d_l..(t + 1) * d_l];
                let proj: f64 = y.iter().zip(dyt.iter()).map(|(a, b)| a * b).sum();
                for (d, &yv) in dyt.iter_mut().zip(y) {
                    *d = (*d - yv * proj) / n;
                }
            }
        }
        for (acc, &d) in grad.b2.iter_mut().zip(&dy) {
            *acc += d;
        }
        for (k, &hk) in s.hidden.iter().enumerate() {
            let w2 = &net.w2[k * o..(k + 1) * o];
            let gw2 = &mut grad.w2[k * o..(k + 1) * o];
            let mut back = 0.0;
            for ((gw, &w), &d) in gw2.iter_mut().zip(w2).zip(&dy) {
                *gw += hk * d;
                back += w * d;
            }
            dh[k] = back * (1.0 - hk * hk);
        }
        for (acc, &d) in grad.b1.iter_mut().zip(&dh) {
            *acc += d;
        }
        for (m, &xm) in s.x.iter().enumerate() {
            if xm == 0.0 {
                continue;
            }
            for (gw, &d) in grad.w1[m * h..(m + 1) * h].iter_mut().zip(&dh) {
                *gw += xm * d;
            }
        }
    }
    Ok((loss, grad))
}

fn sgd_step(net: &mut MappingNetwork, grad: &MappingNetwork, lr: f64, clip: Option<f64>) {
    let norm = grad.params().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for (p, g) in net.params_mut().zip(grad.params()) {
        *p -= lr * scale * g;
    }
}

/// Image-to-document Recall@1 over the given pairs: the fraction of features
/// whose own document ranks first among all documents (ties go to the lower position).
pub fn recall_at_1(
    net: &MappingNetwork,
    features: &[VisualFeature],
    docs: &[TokenMatrix],
    normalize: bool,
) -> Result<f64> {
    if features.len() != docs.len() {
        return Err(Error::LengthMismatch {
            context: "evaluation features vs documents",
            left: features.len(),
            right: docs.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let hits = features
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let q = map_visual(f, net, normalize)?;
            let mut best = (0, f64::NEG_INFINITY);
            for (j, d) in docs.iter().enumerate() {
                let s = maxsim(&q, d)?.value();
                if s > best.1 {
                    best = (j, s);
                }
            }
            Ok(usize::from(best.0 == i))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / features.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub net: MappingNetwork,
    /// Batch loss before each step's update.
    pub losses: Vec<f64>,
    /// `(step, held-out Recall@1)`; step 0 is the untrained network.
    pub evals: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn final_recall(&self) -> Option<f64> {
        self.evals.last().map(|&(_, r)| r)
    }

    /// `step,loss,heldout_recall_at_1` with the recall column filled on evaluation steps.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,loss,heldout_recall_at_1\n");
        let recall_at = |step: usize| {
            self.evals
                .iter()
                .find(|(s, _)| *s == step)
                .map_or(String::new(), |(_, r)| r.to_string())
        };
        if self.losses.is_empty() {
            out.push_str(&format!("0,,{}\n", recall_at(0)));
        }
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{l},{}\n", i + 1, recall_at(i + 1)));
        }
        out
    }
}

/// Plain SGD over shuffled batches, starting from `init` or from a fresh
/// network seeded with `cfg.seed`. Deterministic for a given config.
pub fn train_alignment(
    features: &[VisualFeature],
    docs: &[TokenMatrix],
    cfg: &TrainConfig,
    n_vt: usize,
    normalize: bool,
    init: Option<MappingNetwork>,
) -> Result<TrainReport> {
    cfg.check()?;
    if features.len() != docs.len() {
        return Err(Error::LengthMismatch {
            context: "training features vs documents",
            left: features.len(),
            right: docs.len(),
        });
    }
    let n_train = features.len().saturating_sub(cfg.holdout);
    if n_train < cfg.batch_size {
        return Err(Error::InsufficientPairs {
            needed: cfg.batch_size + cfg.holdout,
            got: features.len(),
        });
    }
    let d_v = features[0].dim();
    let d_l = docs[0].dim();
    let mut net = match init {
        Some(n) => n,
        None => {
            let hidden = cfg
                .hidden
                .unwrap_or_else(|| MappingNetwork::default_hidden(n_vt, d_l));
            MappingNetwork::init_with_hidden(d_v, hidden, n_vt, d_l, cfg.seed)
        }
    };
    let (held_f, held_d) = (&features[n_train..], &docs[n_train..]);
    let evaluate = |net: &MappingNetwork| -> Result<Option<f64>> {
        if held_f.is_empty() {
            Ok(None)
        } else {
            recall_at_1(net, held_f, held_d, normalize).map(Some)
        }
    };

    let mut evals = Vec::new();
    if let Some(r) = evaluate(&net)? {
        evals.push((0, r));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > n_train {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let f: Vec<&[f32]> = batch.iter().map(|&i| features[i].data.as_slice()).collect();
        let d: Vec<&TokenMatrix> = batch.iter().map(|&i| &docs[i]).collect();
        let (loss, grad) = loss_gradients(&net, &f, &d, normalize)?;
        sgd_step(&mut net, &grad, cfg.learning_rate, cfg.grad_clip);
        losses.push(loss);
        let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if due || step == cfg.steps {
            if let Some(r) = evaluate(&net)? {
                evals.push((step, r));
            }
        }
    }
    Ok(TrainReport { net, losses, evals })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::RngExt;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v as f32
            })
            .collect()
    }

    fn finite_difference(
        net: &MappingNetwork,
        f: &[&[f32]],
        d: &[&TokenMatrix],
        normalize: bool,
        eps: f64,
    ) -> Vec<f64> {
        let n = net.param_count();
        (0..n)
            .map(|k| {
                let mut plus = net.clone();
                *plus.params_mut().nth(k).unwrap() += eps;
                let mut minus = net.clone();
                *minus.params_mut().nth(k).unwrap() -= eps;
                let lp = batch_loss(&plus, f, d, normalize).unwrap();
                let lm = batch_loss(&minus, f, d, normalize).unwrap();
                (lp - lm) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn loss_cases() {
        let s = BatchScores::new(2, vec![1.0; 4]).unwrap();
        assert!((contrastive_loss(&s).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let s = BatchScores::new(2, vec![10.0, -10.0, -10.0, 10.0]).unwrap();
        let expected = 2.0 * (-20f64).exp().ln_1p();
        assert!((contrastive_loss(&s).unwrap() - expected).abs() < 1e-14);
        assert!(expected > 4.1e-9 && expected < 4.2e-9);
        assert!(BatchScores::new(2, vec![1.0; 3]).is_err());
        assert!(contrastive_loss(&BatchScores::new(1, vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn loss_matches_direct_oracle_on_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = BatchScores::new(5, data.clone()).unwrap();
        let mut oracle = 0.0;
        for i in 0..5 {
            let denom: f64 = (0..5).map(|j| data[i * 5 + j].exp()).sum();
            oracle -= (data[i * 5 + i].exp() / denom).ln();
        }
        assert!((contrastive_loss(&s).unwrap() - oracle).abs() < 1e-8);
        let shifted = BatchScores::new(5, data.iter().map(|v| v + 7.5).collect()).unwrap();
        assert!((contrastive_loss(&shifted).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn score_gradient_rows_sum_to_zero() {
        let s = BatchScores::new(3, vec![0.5; 9]).unwrap();
        let g = score_gradients(&s);
        for i in 0..3 {
            assert!(g[i * 3..(i + 1) * 3].iter().sum::<f64>().abs() < 1e-15);
        }
    }

    /// Smallest gap between the best and second-best document row over all
    /// query tokens; tiny gaps make finite differences cross a max switch.
    pub(crate) fn min_argmax_gap(
        net: &MappingNetwork,
        f: &[&[f32]],
        d: &[&TokenMatrix],
        normalize: bool,
    ) -> f64 {
        let mut gap = f64::INFINITY;
        for feat in f {
            let s = forward_query(net, feat, normalize);
            for doc in d {
                for q in s.tokens.chunks_exact(net.d_l) {
                    let mut v: Vec<f64> = doc.iter_rows().map(|r| dot_mixed(q, r)).collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v.len() > 1 {
                        gap = gap.min(v[0] - v[1]);
                    }
                }
            }
        }
        gap
    }

    /// A tiny random instance whose arg-max structure is stable under small perturbations.
    pub(crate) fn gradient_instance(
        seed: u64,
        normalize: bool,
    ) -> (MappingNetwork, Vec<Vec<f32>>, Vec<TokenMatrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let net = MappingNetwork::init_with_hidden(6, 4, 2, 3, rng.random());
            let feats: Vec<Vec<f32>> = (0..3).map(|_| gaussian(&mut rng, 6)).collect();
            let docs: Vec<TokenMatrix> = (0..3)
                .map(|_| {
                    let rows = rng.random_range(2..=4);
                    TokenMatrix::new(rows, 3, gaussian(&mut rng, rows * 3)).unwrap()
                })
                .collect();
            let f: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
            let d: Vec<&TokenMatrix> = docs.iter().collect();
            if min_argmax_gap(&net, &f, &d, normalize) > 1e-2 {
                return (net, feats, docs);
            }
        }
    }

    pub(crate) fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..6 {
            for normalize in [true, false] {
                let (net, feats, docs) = gradient_instance(seed, normalize);
                let f: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
                let d: Vec<&TokenMatrix> = docs.iter().collect();
                let (_, grad) = loss_gradients(&net, &f, &d, normalize).unwrap();
                let analytic: Vec<f64> = grad.params().copied().collect();
                let numeric = finite_difference(&net, &f, &d, normalize, 1e-4);
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "seed {seed} normalize {normalize}: {err}");
            }
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        for seed in 0..10 {
            let (net, feats, docs) = gradient_instance(100 + seed, true);
            let f: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
            let d: Vec<&TokenMatrix> = docs.iter().collect();
            let (before, grad) = loss_gradients(&net, &f, &d, true).unwrap();
            let mut stepped = net.clone();
            sgd_step(&mut stepped, &grad, 1e-4, None);
            let after = batch_loss(&stepped, &f, &d, true).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let (net, feats, docs) = gradient_instance(3, true);
        let f: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
        let d: Vec<&TokenMatrix> = docs.iter().collect();
        let (_, grad) = loss_gradients(&net, &f, &d, true).unwrap();
        let mut stepped = net.clone();
        sgd_step(&mut stepped, &grad, 1.0, Some(1e-3));
        let moved = stepped
            .params()
            .zip(net.params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved <= 1e-3 + 1e-12);
    }

    fn tiny_pairs(seed: u64, n: usize) -> (Vec<VisualFeature>, Vec<TokenMatrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (0..n)
            .map(|_| VisualFeature::global(gaussian(&mut rng, 6)))
            .collect();
        let docs = (0..n)
            .map(|_| TokenMatrix::new(3, 3, gaussian(&mut rng, 9)).unwrap())
            .collect();
        (feats, docs)
    }

    #[test]
    fn zero_steps_returns_init_and_training_is_deterministic() {
        let (f, d) = tiny_pairs(1, 12);
        let mut cfg = TrainConfig::new(9);
        cfg.batch_size = 4;
        cfg.steps = 0;
        cfg.holdout = 4;
        let rep = train_alignment(&f, &d, &cfg, 2, true, None).unwrap();
        assert_eq!(rep.net, MappingNetwork::init_with_hidden(6, 3, 2, 3, 9));
        assert!(rep.losses.is_empty());
        assert_eq!(rep.evals.len(), 1);
        cfg.steps = 7;
        cfg.learning_rate = 0.05;
        let a = train_alignment(&f, &d, &cfg, 2, true, None).unwrap();
        let b = train_alignment(&f, &d, &cfg, 2, true, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.losses.len(), 7);
        assert!(a
            .loss_curve_csv()
            .starts_with("step,loss,heldout_recall_at_1\n1,"));
    }

    #[test]
    fn training_checks_inputs() {
        let (f, d) = tiny_pairs(2, 5);
        let mut cfg = TrainConfig::new(1);
        cfg.batch_size = 4;
        cfg.holdout = 2;
        assert!(matches!(
            train_alignment(&f, &d, &cfg, 2, true, None),
            Err(Error::InsufficientPairs { needed: 6, got: 5 })
        ));
        cfg.batch_size = 1;
        assert!(train_alignment(&f, &d, &cfg, 2, true, None).is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::parse("seed = 3\nlearning_rate = 0.5\nholdout = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.batch_size, 30);
        let err = TrainConfig::parse("steps = 3").unwrap_err();
        assert!(err.to_string().contains("missing field: seed"));
        assert!(TrainConfig::parse("seed = 1\nbatch_size = 1").is_err());
        assert!(TrainConfig::parse("seed = 1\nlearning_rate = 0").is_err());
        assert!(TrainConfig::parse("seed = 1\nbogus = 0").is_err());
    }

    #[test]
    fn documents_are_untouched_by_training() {
        let (f, d) = tiny_pairs(4, 8);
        let before = d.clone();
        let mut cfg = TrainConfig::new(2);
        cfg.batch_size = 4;
        cfg.steps = 3;
        train_alignment(&f, &d, &cfg, 2, true, None).unwrap();
        assert_eq!(d, before);
    }
}
