//! Gradient-based interpretation and embedding analysis: per-token
//! importance read off the embedding table, lab-level aggregation and
//! comparison, k-means clustering of lab embeddings with elbow scores, and
//! plot-ready embedding export.

use rayon::prelude::*;

use crate::bpe::BpeModel;
use crate::config::HeadKind;
use crate::data::{LabCatalog, PlasmidRecord};
use crate::error::{Error, Result};
use crate::eval::rank_vectors;
use crate::model::AttributionModel;
use crate::rng::substream_indexed;
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Non-negative importance per vocabulary token: the mean absolute gradient
/// of the model's prediction score with respect to that token's embedding
/// row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenImportance {
    pub values: Vec<f64>,
}

impl TokenImportance {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Token ids of the `k` largest entries, descending (index tie-break).
    pub fn top_tokens(&self, k: usize) -> Vec<(u32, f64)> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(k)
            .map(|i| (i as u32, self.values[i]))
            .collect()
    }
}

/// The scalar whose gradient is inspected: the model's own top prediction,
/// or a caller-chosen lab.
#[derive(Clone, Copy, Debug, Default)]
pub enum ImportanceTarget {
    #[default]
    PredictedLab,
    Lab(usize),
}

/// Gradient of the prediction score with respect to the token-embedding
/// table, absolute value, averaged over the embedding dimensions.
///
/// For a triplet model the score is the cosine similarity to the target
/// lab's embedding; for a softmax model it is the target lab's logit.
/// Tokens absent from the input have no lookup path, so their rows get
/// exactly zero importance.
pub fn token_importance<T: Scalar>(
    model: &AttributionModel<T>,
    bpe: &BpeModel,
    record: &PlasmidRecord,
    target: ImportanceTarget,
) -> Result<TokenImportance> {
    let mut toks = bpe.encode(&record.sequence);
    toks.ids.truncate(model.config.max_tokens);

    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let features = bound.encode_sequence(&toks.ids, &record.metadata, None)?;

    let score = match model.config.head {
        HeadKind::Triplet => {
            let emb = bound.sequence_embedding(&features)?;
            let lab_index = match target {
                ImportanceTarget::Lab(li) => li,
                ImportanceTarget::PredictedLab => {
                    let rows = model.normalized_lab_rows()?;
                    rank_vectors(&record.sequence_id, &tape.value(&emb), &rows).entries[0].0
                }
            };
            let lab = bound.lab_embedding(lab_index)?;
            tape.dot(&emb, &lab)?
        }
        HeadKind::Softmax => {
            let logits = bound.softmax_logits(&features)?;
            let lab_index = match target {
                ImportanceTarget::Lab(li) => li,
                ImportanceTarget::PredictedLab => {
                    let v = tape.value(&logits);
                    let mut best = 0usize;
                    for (i, &x) in v.iter().enumerate() {
                        if x > v[best] {
                            best = i;
                        }
                    }
                    best
                }
            };
            tape.index(&logits, lab_index)?
        }
    };

    tape.backward(&score)?;
    let grad = tape
        .grad(&bound.token_table)
        .expect("token table requires grad");
    let e = model.config.token_embed_dim;
    let values = grad
        .chunks(e)
        .map(|row| row.iter().map(|&g| g.as_f64().abs()).sum::<f64>() / e as f64)
        .collect();
    Ok(TokenImportance { values })
}

/// Min-max scaling to [0, 1]. A constant vector cannot be scaled; it maps
/// to all zeros and the flag reports it.
pub fn normalize_nti(importance: &TokenImportance) -> (Vec<f64>, bool) {
    let min = importance.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = importance
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if importance.values.is_empty() || max == min {
        return (vec![0.0; importance.values.len()], true);
    }
    let span = max - min;
    (
        importance.values.iter().map(|v| (v - min) / span).collect(),
        false,
    )
}

/// Elementwise mean of the per-sequence importances of one lab's records.
pub fn lab_token_importance<T: Scalar>(
    model: &AttributionModel<T>,
    bpe: &BpeModel,
    records: &[PlasmidRecord],
    target: ImportanceTarget,
) -> Result<TokenImportance> {
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "lab token importance needs at least one record".into(),
        ));
    }
    let per_record: Result<Vec<TokenImportance>> = records
        .par_iter()
        .map(|r| token_importance(model, bpe, r, target))
        .collect();
    let per_record = per_record?;
    let mut mean = vec![0.0f64; per_record[0].len()];
    for imp in &per_record {
        for (m, v) in mean.iter_mut().zip(&imp.values) {
            *m += v;
        }
    }
    let n = per_record.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(TokenImportance { values: mean })
}

/// `lab - global`: positive entries are over-represented tokens for the
/// lab, negative entries are tokens expected globally but absent here.
pub fn nti_difference(lab_nti: &[f64], global_nti: &[f64]) -> Result<Vec<f64>> {
    if lab_nti.len() != global_nti.len() {
        return Err(Error::Shape(format!(
            "nti lengths differ: {} vs {}",
            lab_nti.len(),
            global_nti.len()
        )));
    }
    Ok(lab_nti.iter().zip(global_nti).map(|(a, b)| a - b).collect())
}

/// The least similar lab by cosine over lab embeddings (never the lab
/// itself; index tie-break).
pub fn furthest_lab<T: Scalar>(model: &AttributionModel<T>, lab_index: usize) -> Result<usize> {
    let rows = model.normalized_lab_rows()?;
    if rows.len() < 2 {
        return Err(Error::InvalidInput("need at least two labs".into()));
    }
    if lab_index >= rows.len() {
        return Err(Error::InvalidInput(format!(
            "lab index {lab_index} out of range for {} labs",
            rows.len()
        )));
    }
    let anchor = &rows[lab_index];
    let mut best: Option<(usize, f64)> = None;
    for (li, row) in rows.iter().enumerate() {
        if li == lab_index {
            continue;
        }
        let sim: f64 = anchor.iter().zip(row).map(|(&a, &b)| (a * b).as_f64()).sum();
        let better = match best {
            None => true,
            Some((_, bs)) => sim < bs,
        };
        if better {
            best = Some((li, sim));
        }
    }
    Ok(best.expect("at least one other lab").0)
}

// ---- k-means -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClusterAssignment {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster label per input point.
    pub labels: Vec<usize>,
    /// Sum of squared Euclidean distances to assigned centroids.
    pub distortion: f64,
    /// Distortion after each assignment step; non-increasing.
    pub distortion_trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (ci, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (ci, d);
        }
    }
    best
}

/// Seeded farthest-point start: a random first centroid, then repeatedly
/// the point with the greatest distance to its nearest chosen centroid.
fn farthest_point_init(points: &[Vec<f64>], k: usize, seed: u64, stream: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = substream_indexed(seed, "kmeans-init", stream);
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    while centroids.len() < k {
        let mut far = (0usize, f64::NEG_INFINITY);
        for (pi, p) in points.iter().enumerate() {
            let (_, d) = nearest_centroid(p, &centroids);
            if d > far.1 {
                far = (pi, d);
            }
        }
        centroids.push(points[far.0].clone());
    }
    centroids
}

/// Lloyd iterations from the given start centroids.
fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iter: usize,
    tol: f64,
) -> ClusterAssignment {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; points.len()];
    let mut trace = Vec::new();

    for _ in 0..max_iter {
        // Assignment.
        let mut distortion = 0.0;
        for (pi, p) in points.iter().enumerate() {
            let (ci, d) = nearest_centroid(p, &centroids);
            labels[pi] = ci;
            distortion += d;
        }
        trace.push(distortion);

        // Means; an empty cluster is reseeded to the point farthest from
        // its assigned centroid.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (pi, p) in points.iter().enumerate() {
            counts[labels[pi]] += 1;
            for (s, &v) in sums[labels[pi]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for ci in 0..k {
            let new_c = if counts[ci] == 0 {
                let mut far = (0usize, f64::NEG_INFINITY);
                for (pi, p) in points.iter().enumerate() {
                    let d = squared_distance(p, &centroids[labels[pi]]);
                    if d > far.1 {
                        far = (pi, d);
                    }
                }
                points[far.0].clone()
            } else {
                sums[ci]
                    .iter()
                    .map(|s| s / counts[ci] as f64)
                    .collect::<Vec<f64>>()
            };
            shift = shift.max(squared_distance(&new_c, &centroids[ci]).sqrt());
            centroids[ci] = new_c;
        }
        if shift < tol {
            break;
        }
    }

    // Final assignment so labels match the converged centroids.
    let mut distortion = 0.0;
    for (pi, p) in points.iter().enumerate() {
        let (ci, d) = nearest_centroid(p, &centroids);
        labels[pi] = ci;
        distortion += d;
    }
    trace.push(distortion);

    ClusterAssignment {
        k,
        centroids,
        labels,
        distortion,
        distortion_trace: trace,
    }
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    kmeans_with(points, k, seed, 0, KMEANS_MAX_ITER, KMEANS_TOL)
}

pub fn kmeans_with(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    stream: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds {} points",
            points.len()
        )));
    }
    let centroids = farthest_point_init(points, k, seed, stream);
    Ok(lloyd(points, centroids, max_iter, tol))
}

/// Best distortion per cluster count. Five candidate starts per `k`: four
/// fresh seeded farthest-point inits plus a warm start that extends the
/// previous `k`'s best centroids by the farthest point, which pins the
/// curve non-increasing in `k`.
pub fn elbow_scores(
    points: &[Vec<f64>],
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let max_k = *k_range.end();
    if max_k > points.len() {
        return Err(Error::InvalidInput(format!(
            "elbow range ends at {max_k} but there are only {} points",
            points.len()
        )));
    }
    let mut out = Vec::new();
    let mut previous_best: Option<ClusterAssignment> = None;
    for k in k_range {
        let mut candidates = Vec::new();
        let fresh_starts = if previous_best.is_some() { 4 } else { 5 };
        for c in 0..fresh_starts {
            candidates.push(kmeans_with(
                points,
                k,
                seed,
                (k * 8 + c) as u64,
                KMEANS_MAX_ITER,
                KMEANS_TOL,
            )?);
        }
        if let Some(prev) = &previous_best {
            let mut warm = prev.centroids.clone();
            let mut far = (0usize, f64::NEG_INFINITY);
            for (pi, p) in points.iter().enumerate() {
                let (_, d) = nearest_centroid(p, &warm);
                if d > far.1 {
                    far = (pi, d);
                }
            }
            warm.push(points[far.0].clone());
            candidates.push(lloyd(points, warm, KMEANS_MAX_ITER, KMEANS_TOL));
        }
        let best = candidates
            .into_iter()
            .min_by(|a, b| a.distortion.total_cmp(&b.distortion))
            .expect("at least one candidate");
        out.push((k, best.distortion));
        previous_best = Some(best);
    }
    Ok(out)
}

// ---- export --------------------------------------------------------------------------

/// Writes `id,kind,e0..e{D-1}` rows: every lab embedding (unit norm), then
/// one embedding per record. Full float precision, so re-importing
/// reproduces the vectors bitwise.
pub fn export_embeddings<T: Scalar>(
    model: &AttributionModel<T>,
    bpe: &BpeModel,
    catalog: &LabCatalog,
    records: &[PlasmidRecord],
    tta_rounds: usize,
    path: &std::path::Path,
    provenance: &[String],
) -> Result<()> {
    use std::io::Write as _;
    let dim = model.config.metric_dim;
    let mut out = String::new();
    for line in provenance {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("id,kind");
    for i in 0..dim {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');

    for (li, row) in model.normalized_lab_rows()?.iter().enumerate() {
        out.push_str(&format!("{},lab", catalog.lab(li)));
        for v in row {
            out.push_str(&format!(",{}", v.as_f64()));
        }
        out.push('\n');
    }
    let seq_embeddings: Result<Vec<Vec<T>>> = records
        .par_iter()
        .map(|r| crate::eval::tta_embed(model, bpe, r, tta_rounds))
        .collect();
    for (r, emb) in records.iter().zip(seq_embeddings?) {
        out.push_str(&format!("{},sequence", r.sequence_id));
        for v in emb {
            out.push_str(&format!(",{}", v.as_f64()));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads an embedding export back: `(id, kind, vector)` per row.
pub fn read_embeddings_csv(path: &std::path::Path) -> Result<Vec<(String, String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("id,") || line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or("").to_string();
        let kind = parts.next().unwrap_or("").to_string();
        let vec: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let vec = vec.map_err(|e| Error::Dataset(format!("bad embedding row: {e}")))?;
        out.push((id, kind, vec));
    }
    Ok(out)
}

/// Writes `token_id,importance,nti` for one importance vector.
pub fn write_importance_csv(
    path: &std::path::Path,
    importance: &TokenImportance,
    provenance: &[String],
) -> Result<()> {
    use std::io::Write as _;
    let (nti, _constant) = normalize_nti(importance);
    let mut out = String::new();
    for line in provenance {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("token_id,importance,nti\n");
    for (i, (v, n)) in importance.values.iter().zip(&nti).enumerate() {
        out.push_str(&format!("{i},{v},{n}\n"));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Writes the `k,distortion` elbow table.
pub fn write_elbow_csv(
    path: &std::path::Path,
    scores: &[(usize, f64)],
    provenance: &[String],
) -> Result<()> {
    use std::io::Write as _;
    let mut out = String::new();
    for line in provenance {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(&format!(
        "# reference full-scale elbow choice (not reproduced at this scale): k={}\n",
        crate::eval::reference::FULL_SCALE_ELBOW_CLUSTERS
    ));
    out.push_str("k,distortion\n");
    for (k, d) in scores {
        out.push_str(&format!("{k},{d}\n"));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
