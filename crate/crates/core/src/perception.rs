//! Perception: mapping glyph feature vectors to distributions over the
//! symbol vocabulary.
//!
//! The scorer is a one-hidden-layer network. Before any supervision exists it
//! is initialized from unlabeled k-means clusters so that class `c`'s logit
//! decreases with distance to centroid `c`; which centroid ends up standing
//! for which symbol is arbitrary at that point, and abduction later settles
//! the assignment. Training consumes abduced (glyph, symbol) pseudo-labels.

use crate::nn::{cross_entropy_batch, log_softmax, Adam, Matrix, Mlp};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerceptionError {
    #[error("degenerate clustering: {0}")]
    DegenerateClusters(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// One-hidden-layer softmax classifier over the symbol vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionModel {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub mlp: Mlp,
    pub w1_adam: Adam,
    pub b1_adam: Adam,
    pub w2_adam: Adam,
    pub b2_adam: Adam,
    pub version: u64,
}

impl PerceptionModel {
    pub fn new(feature_dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(feature_dim, hidden, n_classes, &mut rng);
        Self::from_mlp(feature_dim, n_classes, mlp)
    }

    fn from_mlp(feature_dim: usize, n_classes: usize, mlp: Mlp) -> Self {
        PerceptionModel {
            feature_dim,
            n_classes,
            w1_adam: Adam::new(mlp.w1.data.len()),
            b1_adam: Adam::new(mlp.b1.len()),
            w2_adam: Adam::new(mlp.w2.data.len()),
            b2_adam: Adam::new(mlp.b2.len()),
            mlp,
            version: 0,
        }
    }

    /// Add output rows for newly registered symbols, keeping existing ones.
    pub fn extend_classes(&mut self, new_n_classes: usize, seed: u64) {
        assert!(new_n_classes >= self.n_classes);
        if new_n_classes == self.n_classes {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = self.mlp.hidden_dim();
        let mut rows: Vec<Vec<f64>> =
            (0..self.mlp.w2.rows).map(|r| self.mlp.w2.row(r).to_vec()).collect();
        for _ in self.n_classes..new_n_classes {
            rows.push((0..hidden).map(|_| rng.gen_range(-0.01..0.01)).collect());
            self.mlp.b2.push(0.0);
        }
        self.mlp.w2 = Matrix::from_rows(rows);
        self.w2_adam = Adam::new(self.mlp.w2.data.len());
        self.b2_adam = Adam::new(self.mlp.b2.len());
        self.n_classes = new_n_classes;
        self.version += 1;
    }

    fn check_dim(&self, features: &[f64]) -> Result<(), PerceptionError> {
        if features.len() != self.feature_dim {
            return Err(PerceptionError::DimensionMismatch {
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Softmax distribution over the vocabulary for one glyph.
    pub fn perceive(&self, features: &[f64]) -> Result<Vec<f64>, PerceptionError> {
        Ok(self.perceive_log(features)?.into_iter().map(f64::exp).collect())
    }

    /// Log-probabilities over the vocabulary for one glyph.
    pub fn perceive_log(&self, features: &[f64]) -> Result<Vec<f64>, PerceptionError> {
        self.check_dim(features)?;
        Ok(log_softmax(&self.mlp.forward_one(features)))
    }

    /// Sequence log-likelihood: by the per-token factorization this is just
    /// the sum of per-token log-probabilities.
    pub fn sequence_log_prob(
        &self,
        glyphs: &[&[f64]],
        symbols: &[usize],
    ) -> Result<f64, PerceptionError> {
        assert_eq!(glyphs.len(), symbols.len());
        let mut total = 0.0;
        for (g, &s) in glyphs.iter().zip(symbols) {
            total += self.perceive_log(g)?[s];
        }
        Ok(total)
    }
}

/// K-means clustering with k-means++ seeding and restarts (best inertia
/// wins); at most `max_iters` Lloyd iterations per restart. Returns
/// centroids. Deterministic per seed.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<Vec<f64>>, PerceptionError> {
    const RESTARTS: u64 = 8;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut last_err = None;
    for restart in 0..RESTARTS {
        match kmeans_once(points, k, seed.wrapping_add(restart.wrapping_mul(0x9E37)), max_iters) {
            Ok((inertia, centroids)) => {
                if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
                    best = Some((inertia, centroids));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, centroids)) => Ok(centroids),
        None => Err(last_err.expect("at least one restart ran")),
    }
}

fn kmeans_once(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(f64, Vec<Vec<f64>>), PerceptionError> {
    if k < 2 {
        return Err(PerceptionError::DegenerateClusters(format!(
            "k = {k}: a single cluster cannot carry a vocabulary"
        )));
    }
    if points.len() < k {
        return Err(PerceptionError::DegenerateClusters(format!(
            "{} points for {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = 0;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
                idx = i;
            }
            idx
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let nd = dist2(p, centroids.last().expect("just pushed"));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist2(p, centroid);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
            centroids[c] = sums[c].clone();
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(PerceptionError::DegenerateClusters("empty cluster after convergence".into()));
    }
    let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| dist2(p, &centroids[a])).sum();
    Ok((inertia, centroids))
}

/// Unsupervised pretraining: k-means over unlabeled glyph features, then a
/// network whose class-`c` logit decreases with distance to centroid `c`.
///
/// With first-layer weights `[s*I; -s*I]` the tanh hidden pair for feature
/// `i` is an odd encoding of `x_i`, so the output row built from `mu_c`
/// recovers `(mu_c . x) / tau - |mu_c|^2 / (2 tau)`, which orders classes by
/// `-|x - mu_c|^2` exactly in the linear regime.
pub fn pretrain_clusters(
    glyphs: &[Vec<f64>],
    k: usize,
    rng_seed: u64,
) -> Result<PerceptionModel, PerceptionError> {
    if glyphs.is_empty() {
        return Err(PerceptionError::DegenerateClusters("no glyphs".into()));
    }
    let dim = glyphs[0].len();
    let centroids = kmeans(glyphs, k, rng_seed, 200)?;

    let s = 0.2;
    let tau = 4.0;
    let hidden = 2 * dim;
    let mut w1 = Matrix::zeros(hidden, dim);
    for i in 0..dim {
        w1.set(i, i, s);
        w1.set(dim + i, i, -s);
    }
    let mut w2 = Matrix::zeros(k, hidden);
    let mut b2 = vec![0.0; k];
    for (c, mu) in centroids.iter().enumerate() {
        let norm2: f64 = mu.iter().map(|v| v * v).sum();
        for i in 0..dim {
            w2.set(c, i, mu[i] / (2.0 * s * tau));
            w2.set(c, dim + i, -mu[i] / (2.0 * s * tau));
        }
        b2[c] = -norm2 / (2.0 * tau);
    }
    let mlp = Mlp { w1, b1: vec![0.0; hidden], w2, b2 };
    Ok(PerceptionModel::from_mlp(dim, k, mlp))
}

/// One Adam step on mean cross-entropy over (features, pseudo-label) pairs;
/// returns the pre-step loss.
pub fn perception_update(
    model: &mut PerceptionModel,
    batch: &[(&[f64], usize)],
    lr: f64,
) -> Result<f64, PerceptionError> {
    let (loss, grads) = perception_loss_and_grads(model, batch)?;
    model.w1_adam.step(&mut model.mlp.w1.data, &grads.w1.data, lr);
    model.b1_adam.step(&mut model.mlp.b1, &grads.b1, lr);
    model.w2_adam.step(&mut model.mlp.w2.data, &grads.w2.data, lr);
    model.b2_adam.step(&mut model.mlp.b2, &grads.b2, lr);
    model.version += 1;
    Ok(loss)
}

pub fn perception_loss_and_grads(
    model: &PerceptionModel,
    batch: &[(&[f64], usize)],
) -> Result<(f64, crate::nn::MlpGrads), PerceptionError> {
    assert!(!batch.is_empty());
    for (g, _) in batch {
        model.check_dim(g)?;
    }
    let mut x = Matrix::zeros(batch.len(), model.feature_dim);
    for (r, (g, _)) in batch.iter().enumerate() {
        x.row_mut(r).copy_from_slice(g);
    }
    let gold: Vec<usize> = batch.iter().map(|(_, s)| *s).collect();
    let (h, logits) = model.mlp.forward(&x);
    let (loss, dlogits) = cross_entropy_batch(&logits, &gold, None);
    let grads = model.mlp.backward(&x, &h, &dlogits);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_glyph_bank, BankParams};

    fn demo_bank(noise_sigma: f64, seed: u64) -> crate::dataset::GlyphBank {
        build_glyph_bank(
            seed,
            &BankParams {
                feature_dim: 16,
                prototypes_per_symbol: 3,
                noise_sigma,
                pool_size_train: 120,
                pool_size_test: 60,
                num_symbols: 16,
            },
        )
        .unwrap()
    }

    #[test]
    fn perceive_is_a_distribution() {
        let model = PerceptionModel::new(16, 32, 16, 0);
        let glyph = vec![0.3; 16];
        let p = model.perceive(&glyph).unwrap();
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut model = PerceptionModel::new(16, 32, 16, 0);
        model.mlp.w1.data.iter_mut().for_each(|v| *v = 0.0);
        model.mlp.w2.data.iter_mut().for_each(|v| *v = 0.0);
        model.mlp.b1.iter_mut().for_each(|v| *v = 0.0);
        model.mlp.b2.iter_mut().for_each(|v| *v = 0.0);
        let p = model.perceive(&vec![1.0; 16]).unwrap();
        for &x in &p {
            assert!((x - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = PerceptionModel::new(16, 32, 16, 0);
        assert!(matches!(
            model.perceive(&vec![0.0; 7]),
            Err(PerceptionError::DimensionMismatch { expected: 16, got: 7 })
        ));
    }

    #[test]
    fn kmeans_k1_is_degenerate() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(
            kmeans(&pts, 1, 0, 10),
            Err(PerceptionError::DegenerateClusters(_))
        ));
    }

    #[test]
    fn pretrain_recovers_separable_prototypes() {
        // noise -> 0 with one prototype per symbol: clusters recover the
        // prototypes and nearest-centroid classification is exact.
        let bank = build_glyph_bank(
            3,
            &BankParams {
                feature_dim: 16,
                prototypes_per_symbol: 1,
                noise_sigma: 1e-6,
                pool_size_train: 40,
                pool_size_test: 10,
                num_symbols: 16,
            },
        )
        .unwrap();
        let (features, labels) = bank.labeled_train_pool();
        let model = pretrain_clusters(&features, 16, 11).unwrap();
        // Purity: each cluster argmax maps to exactly one label.
        let mut cluster_label: Vec<Option<usize>> = vec![None; 16];
        for (f, &l) in features.iter().zip(&labels) {
            let p = model.perceive(f).unwrap();
            let c = argmax(&p);
            match cluster_label[c] {
                None => cluster_label[c] = Some(l),
                Some(prev) => assert_eq!(prev, l, "cluster {c} mixes labels"),
            }
        }
        let mut seen: Vec<usize> = cluster_label.iter().map(|o| o.unwrap()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16, "all symbols recovered");
    }

    fn argmax(xs: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate() {
            if x > xs[best] {
                best = i;
            }
        }
        best
    }

    /// Cluster purity against held-out hidden labels on the default bank.
    #[test]
    fn pretrain_cluster_purity() {
        let bank = demo_bank(0.15, 5);
        let (features, labels) = bank.labeled_train_pool();
        let model = pretrain_clusters(&features, 16, 17).unwrap();
        let mut votes = vec![[0usize; 16]; 16];
        for (f, &l) in features.iter().zip(&labels) {
            let c = argmax(&model.perceive(f).unwrap());
            votes[c][l] += 1;
        }
        let total: usize = votes.iter().map(|v| v.iter().sum::<usize>()).sum();
        let pure: usize = votes.iter().map(|v| *v.iter().max().unwrap()).sum();
        let purity = pure as f64 / total as f64;
        assert!(purity >= 0.9, "purity {purity}");
    }

    /// Label-permutation symmetry at init: permuting the centroid-to-class
    /// assignment permutes outputs identically.
    #[test]
    fn permutation_symmetry_at_init() {
        let bank = demo_bank(0.15, 9);
        let (features, _) = bank.labeled_train_pool();
        let model = pretrain_clusters(&features, 16, 23).unwrap();
        // Permute output rows.
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
        let mut permuted = model.clone();
        for (new_row, &src) in perm.iter().enumerate() {
            let row = model.mlp.w2.row(src).to_vec();
            permuted.mlp.w2.row_mut(new_row).copy_from_slice(&row);
            permuted.mlp.b2[new_row] = model.mlp.b2[src];
        }
        for f in features.iter().take(50) {
            let p = model.perceive(f).unwrap();
            let q = permuted.perceive(f).unwrap();
            for (new_row, &src) in perm.iter().enumerate() {
                assert!((q[new_row] - p[src]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convergence_on_separable_batch() {
        let bank = demo_bank(0.15, 13);
        let (features, labels) = bank.labeled_train_pool();
        let mut model = PerceptionModel::new(16, 32, 16, 1);
        let batch: Vec<(&[f64], usize)> = features
            .iter()
            .map(|f| f.as_slice())
            .zip(labels.iter().copied())
            .take(512)
            .collect();
        let mut last = f64::INFINITY;
        let mut losses = Vec::new();
        for _ in 0..400 {
            let loss = perception_update(&mut model, &batch, 1e-2).unwrap();
            losses.push(loss);
            assert!(loss <= last + 1e-6, "loss went up: {loss} after {last}");
            last = loss;
        }
        assert!(last < 0.01, "final loss {last}");
    }

    #[test]
    fn zero_lr_keeps_weights_and_reports_nll() {
        let mut model = PerceptionModel::new(4, 8, 3, 2);
        let g = vec![0.1, -0.2, 0.3, 0.4];
        let before = model.mlp.clone();
        let p = model.perceive(&g).unwrap();
        let loss = perception_update(&mut model, &[(&g, 1)], 0.0).unwrap();
        assert!((loss - (-p[1].ln())).abs() < 1e-9);
        assert_eq!(model.mlp, before);
    }

    #[test]
    fn gradient_check_against_finite_differences() {
        let mut rng_seed = 0;
        let model = PerceptionModel::new(8, 6, 5, 3);
        let glyphs: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..8).map(|j| ((i * 13 + j * 7) % 11) as f64 / 11.0 - 0.4).collect())
            .collect();
        let batch: Vec<(&[f64], usize)> =
            glyphs.iter().enumerate().map(|(i, g)| (g.as_slice(), i % 5)).collect();
        let (_, grads) = perception_loss_and_grads(&model, &batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in [0usize, 11, 23, 40] {
            let mut m = model.clone();
            m.mlp.w1.data[idx] += h;
            let (up, _) = perception_loss_and_grads(&m, &batch).unwrap();
            m.mlp.w1.data[idx] -= 2.0 * h;
            let (down, _) = perception_loss_and_grads(&m, &batch).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let denom = grads.w1.data[idx].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grads.w1.data[idx] - numeric).abs() / denom);
            rng_seed += 1;
        }
        let _ = rng_seed;
        assert!(worst <= 1e-4, "relative error {worst}");
    }

    /// Sequence factorization: the sequence log-likelihood equals the sum of
    /// per-token log-probabilities.
    #[test]
    fn sequence_factorization() {
        let model = PerceptionModel::new(6, 8, 4, 4);
        let glyphs: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..6).map(|j| ((i + j) % 5) as f64 * 0.2 - 0.4).collect())
            .collect();
        let refs: Vec<&[f64]> = glyphs.iter().map(|g| g.as_slice()).collect();
        let symbols = vec![0usize, 2, 3];
        let seq = model.sequence_log_prob(&refs, &symbols).unwrap();
        let mut manual = 0.0;
        for (g, &s) in refs.iter().zip(&symbols) {
            manual += model.perceive(g).unwrap()[s].ln();
        }
        assert!((seq - manual).abs() < 1e-9);
    }
}
