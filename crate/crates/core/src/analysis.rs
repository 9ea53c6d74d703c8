//! Representation geometry: in-class and paired similarity, effective
//! rank, local Lipschitz roughness and KNN evaluation.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::container::{ArrayData, Container, NamedArray};
use crate::data::{ImageBatch, PoisonedDataset};
use crate::error::{Error, Result};
use crate::model::{grad_wrt_input, HeadGrads, HeadLoss, Heads, ModelBundle};
use crate::seed;
use crate::trainer::representations;

/// N×D encoder outputs aligned with the labels and ids of their source.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    reps: Array2<f64>,
    labels: Vec<usize>,
    ids: Vec<String>,
}

impl RepresentationMatrix {
    pub fn new(reps: Array2<f64>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        let n = reps.nrows();
        if labels.len() != n || ids.len() != n {
            return Err(Error::arg(format!(
                "{} labels and {} ids for {n} rows",
                labels.len(),
                ids.len()
            )));
        }
        if reps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("representation matrix has non-finite entries".into()));
        }
        Ok(Self { reps, labels, ids })
    }

    /// Encode `batch` with the bundle's encoder.
    pub fn encode(bundle: &ModelBundle, batch: &ImageBatch) -> Result<Self> {
        Self::new(
            representations(bundle, batch)?,
            batch.labels().to_vec(),
            batch.ids().to_vec(),
        )
    }

    pub fn reps(&self) -> &Array2<f64> {
        &self.reps
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            reps: self.reps.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Mean cosine over all unordered same-class pairs. A class with fewer
/// than two samples is an error unless `skip_small` is set.
pub fn in_class_similarity_with(r: &RepresentationMatrix, skip_small: bool) -> Result<f64> {
    let k = r.labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in r.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (y, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            if skip_small {
                continue;
            }
            return Err(Error::arg(format!("class {y} has fewer than 2 samples")));
        }
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += cosine(r.reps.row(i), r.reps.row(j));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::arg("no same-class pairs"));
    }
    Ok(sum / pairs as f64)
}

pub fn in_class_similarity(r: &RepresentationMatrix) -> Result<f64> {
    in_class_similarity_with(r, false)
}

/// Mean row-wise cosine between two equally shaped matrices.
pub fn mean_paired_cosine(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::arg("paired matrices differ in shape"));
    }
    if a.nrows() == 0 {
        return Err(Error::arg("no pairs"));
    }
    let s: f64 = a.rows().into_iter().zip(b.rows()).map(|(x, y)| cosine(x, y)).sum();
    Ok(s / a.nrows() as f64)
}

/// Mean cosine between poisoned and clean representations of the same
/// samples; ids must align.
pub fn paired_similarity(rp: &RepresentationMatrix, rc: &RepresentationMatrix) -> Result<f64> {
    if rp.ids != rc.ids {
        return Err(Error::arg("poisoned and clean representation ids do not align"));
    }
    mean_paired_cosine(&rp.reps, &rc.reps)
}

/// Exponent of the entropy of the normalized singular values of the
/// row-centered matrix. An all-zero centered matrix has rank 1.0.
pub fn effective_rank(r: &Array2<f64>) -> Result<f64> {
    let (n, d) = r.dim();
    if n < 2 {
        return Err(Error::arg("effective rank needs at least 2 rows"));
    }
    let mean = r.mean_axis(Axis(0)).expect("n >= 2");
    let centered = r - &mean;
    let m = DMatrix::from_row_slice(n, d, centered.as_slice().expect("standard layout"));
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Ok(1.0);
    }
    let h: f64 = sv
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

/// Mean over samples of the largest `‖f(x')−f(x)‖₁ / ‖x'−x‖∞` found by
/// sign-gradient ascent over corners of the `radius` L∞ ball, starting
/// from a random corner. The estimate is a lower bound on the true
/// local constant.
pub fn local_lipschitz(bundle: &ModelBundle, x: &Array2<f64>, radius: f64, est_steps: usize, seed: u64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::arg("radius must be > 0"));
    }
    let n = x.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let base = bundle.encoder.forward(x)?;
    let mut rng = seed::rng(seed::derive(seed, "lipschitz"));
    let mut signs = Array2::from_shape_fn(x.raw_dim(), |_| {
        if rand::Rng::random::<bool>(&mut rng) {
            1.0
        } else {
            -1.0
        }
    });
    let mut best = vec![0.0f64; n];
    for it in 0..=est_steps {
        let xp = x + &(&signs * radius);
        let (_, g) = grad_wrt_input(bundle, &xp, Heads::REP, |out| {
            let diff = &out.rep - &base;
            Ok(HeadLoss {
                value: diff.iter().map(|v| v.abs()).sum(),
                grads: Some(HeadGrads {
                    rep: Some(diff.mapv(f64::signum)),
                    ..Default::default()
                }),
            })
        })?;
        let rep = bundle.encoder.forward(&xp)?;
        for (i, b) in best.iter_mut().enumerate() {
            let l1: f64 = rep
                .row(i)
                .iter()
                .zip(base.row(i))
                .map(|(a, c)| (a - c).abs())
                .sum();
            *b = b.max(l1 / radius);
        }
        if it < est_steps {
            ndarray::Zip::from(&mut signs).and(&g).for_each(|s, &gv| {
                if gv != 0.0 {
                    *s = gv.signum();
                }
            });
        }
    }
    Ok(best.iter().sum::<f64>() / n as f64)
}

/// KNN accuracy with cosine similarity. `pool` training rows are sampled
/// without replacement; each test row takes the majority label of its `k`
/// most similar pool rows. Vote ties go to the tied class whose best
/// member ranks highest.
pub fn knn_eval(
    train: &RepresentationMatrix,
    test: &RepresentationMatrix,
    k: usize,
    pool: usize,
    seed: u64,
) -> Result<f64> {
    if pool == 0 || train.is_empty() {
        return Err(Error::arg("knn pool is empty"));
    }
    if k == 0 || k > pool || pool > train.len() {
        return Err(Error::arg(format!(
            "need 1 <= k ({k}) <= pool ({pool}) <= training rows ({})",
            train.len()
        )));
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut idx = sample(&mut seed::rng(seed::derive(seed, "knn-pool")), train.len(), pool).into_vec();
    idx.sort_unstable();
    let pool_rows = train.select(&idx);
    let preds = knn_predict(&pool_rows, test.reps(), k);
    let hits = preds.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Predicted labels of `queries` against every row of `train`.
pub fn knn_predict(train: &RepresentationMatrix, queries: &Array2<f64>, k: usize) -> Vec<usize> {
    let num_labels = train.labels.iter().max().map_or(0, |m| m + 1);
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut sims: Vec<(f64, usize)> = train
                .reps
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| (cosine(q, r), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let top = &sims[..k.min(sims.len())];
            let mut votes = vec![0usize; num_labels];
            let mut first_rank = vec![usize::MAX; num_labels];
            for (rank, &(_, i)) in top.iter().enumerate() {
                let y = train.labels[i];
                votes[y] += 1;
                first_rank[y] = first_rank[y].min(rank);
            }
            let max = *votes.iter().max().unwrap_or(&0);
            (0..num_labels)
                .filter(|&y| votes[y] == max && max > 0)
                .min_by_key(|&y| first_rank[y])
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub radius: f64,
    pub est_steps: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            radius: 8.0 / 255.0,
            est_steps: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub in_cls_sim_psn: f64,
    pub psn_cln_sim: f64,
    pub e_rank_psn: f64,
    pub local_lip_psn: f64,
    /// Which samples the metrics were computed on.
    pub sample_set: String,
    pub samples: usize,
    pub config: AnalysisConfig,
}

/// All four geometry metrics on the full poisoned training set.
pub fn analysis_report(bundle: &ModelBundle, poisoned: &PoisonedDataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let rp = RepresentationMatrix::encode(bundle, poisoned.poisoned())?;
    let rc = RepresentationMatrix::encode(bundle, poisoned.clean())?;
    Ok(AnalysisReport {
        in_cls_sim_psn: in_class_similarity_with(&rp, true)?,
        psn_cln_sim: paired_similarity(&rp, &rc)?,
        e_rank_psn: effective_rank(rp.reps())?,
        local_lip_psn: local_lipschitz(
            bundle,
            &poisoned.poisoned().to_input(),
            cfg.radius,
            cfg.est_steps,
            cfg.seed,
        )?,
        sample_set: "poisoned-train".into(),
        samples: poisoned.len(),
        config: *cfg,
    })
}

/// Write representations, labels and ids to a container file.
pub fn export_embeddings(r: &RepresentationMatrix, path: &Path, extra: Map<String, Value>) -> Result<()> {
    let mut c = Container::new("embeddings");
    c.meta.insert("labels".into(), json!(r.labels));
    c.meta.insert("ids".into(), json!(r.ids));
    c.meta
        .insert("version".into(), Value::from(crate::ARTIFACT_VERSION));
    for (k, v) in extra {
        c.meta.entry(k).or_insert(v);
    }
    c.arrays.push(NamedArray {
        name: "reps".into(),
        shape: r.reps.shape().to_vec(),
        data: ArrayData::F64(r.reps.iter().copied().collect()),
    });
    c.write(path)
}

pub fn load_embeddings(path: &Path) -> Result<RepresentationMatrix> {
    let c = Container::read(path)?;
    if c.kind != "embeddings" {
        return Err(Error::format("kind", format!("not an embeddings container: `{}`", c.kind)));
    }
    let a = c.array("reps")?;
    let data = match &a.data {
        ArrayData::F64(v) => v.clone(),
        ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
    };
    if a.shape.len() != 2 {
        return Err(Error::format("reps", format!("expected rank 2, got {:?}", a.shape)));
    }
    let reps = Array2::from_shape_vec((a.shape[0], a.shape[1]), data).map_err(|e| Error::format("reps", e.to_string()))?;
    let labels: Vec<usize> =
        serde_json::from_value(c.meta_field("labels")?.clone()).map_err(|e| Error::format("labels", e.to_string()))?;
    let ids: Vec<String> =
        serde_json::from_value(c.meta_field("ids")?.clone()).map_err(|e| Error::format("ids", e.to_string()))?;
    RepresentationMatrix::new(reps, labels, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_rows_are_fully_similar() {
        let r = RepresentationMatrix::new(
            array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]],
            vec![0, 0, 1, 1],
            (0..4).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        assert!((in_class_similarity(&r).unwrap() - 1.0).abs() < 1e-12);
        assert!((paired_similarity(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_class_is_rejected_unless_skipped() {
        let r = RepresentationMatrix::new(array![[1.0], [1.0], [2.0]], vec![0, 0, 1], vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        assert!(in_class_similarity(&r).is_err());
        assert!((in_class_similarity_with(&r, true).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_rank_is_one() {
        assert_eq!(effective_rank(&Array2::zeros((4, 3))).unwrap(), 1.0);
        assert!(effective_rank(&Array2::zeros((1, 3))).is_err());
    }
}
