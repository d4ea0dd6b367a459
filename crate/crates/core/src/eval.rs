//! Retrieval evaluation: camera-A queries against a camera-B gallery,
//! cumulative match characteristic, and rank-k reporting.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::backbone::{forward_features, BackboneConfig, ModelParams, StatUpdates};
use crate::data::augment::resize_normalize;
use crate::data::{Camera, IdentityDataset};
use crate::error::{ensure_contract, Error, Result};
use crate::head::{pair_score_from_descriptors, VerificationHead};
use crate::rng::stream_rng;
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Record indices selected by the single-shot protocol: every camera-A image
/// is a query; one seed-selected camera-B image per identity is the gallery.
#[derive(Clone, Debug)]
pub struct GalleryPlan {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    pub query_ids: Vec<u32>,
    pub gallery_ids: Vec<u32>,
}

pub fn build_gallery(dataset: &IdentityDataset, seed: u64) -> Result<GalleryPlan> {
    let mut rng = stream_rng(seed, "gallery");
    let mut plan = GalleryPlan {
        queries: Vec::new(),
        gallery: Vec::new(),
        query_ids: Vec::new(),
        gallery_ids: Vec::new(),
    };
    for id in dataset.identities() {
        let a_images = dataset.images_of(id, Camera::A);
        let b_images = dataset.images_of(id, Camera::B);
        if a_images.is_empty() {
            return Err(Error::Protocol(format!(
                "identity {id} has no camera-A image"
            )));
        }
        if b_images.is_empty() {
            return Err(Error::Protocol(format!(
                "identity {id} has no camera-B image"
            )));
        }
        for &q in a_images {
            plan.queries.push(q);
            plan.query_ids.push(id);
        }
        plan.gallery.push(b_images[rng.random_range(0..b_images.len())]);
        plan.gallery_ids.push(id);
    }
    Ok(plan)
}

/// Query-by-gallery matrix of same-person probabilities.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    values: Vec<f64>,
    pub query_ids: Vec<u32>,
    pub gallery_ids: Vec<u32>,
}

impl ScoreMatrix {
    pub fn new(values: Vec<f64>, query_ids: Vec<u32>, gallery_ids: Vec<u32>) -> Result<Self> {
        const OP: &str = "ScoreMatrix";
        ensure_contract!(
            values.len() == query_ids.len() * gallery_ids.len(),
            OP,
            "{} values for {} x {} matrix",
            values.len(),
            query_ids.len(),
            gallery_ids.len()
        );
        ensure_contract!(
            values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            OP,
            "scores must be probabilities in [0, 1]"
        );
        Ok(ScoreMatrix {
            values,
            query_ids,
            gallery_ids,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn at(&self, query: usize, gallery: usize) -> f64 {
        self.values[query * self.gallery_ids.len() + gallery]
    }
}

/// Extracts eval-mode descriptors for the given records, resizing each image
/// to the configured resolution. One forward pass per image, in chunks.
fn compute_descriptors(
    params: &ModelParams<f32>,
    config: &BackboneConfig,
    dataset: &IdentityDataset,
    records: &[usize],
) -> Result<Vec<Tensor<f32>>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let prepared: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&i| {
                resize_normalize(
                    &dataset.record(i).image,
                    config.resolution.0,
                    config.resolution.1,
                )
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = prepared.iter().collect();
        let batch = Tensor::stack(&refs)?;
        let mut tape = Tape::no_grad();
        let images = tape.leaf(&batch);
        let mut stats = StatUpdates::new();
        let descriptors =
            forward_features(&mut tape, params, config, images, Mode::Eval, &mut stats)?;
        let value = tape.value(descriptors);
        for row in 0..chunk.len() {
            out.push(value.row(row)?);
        }
    }
    Ok(out)
}

fn score_matrix_from_descriptors(
    params: &ModelParams<f32>,
    head: &VerificationHead,
    query_descriptors: &[Tensor<f32>],
    gallery_descriptors: &[Tensor<f32>],
    query_ids: &[u32],
    gallery_ids: &[u32],
) -> Result<ScoreMatrix> {
    let mut values = Vec::with_capacity(query_descriptors.len() * gallery_descriptors.len());
    for qd in query_descriptors {
        for gd in gallery_descriptors {
            values.push(pair_score_from_descriptors(params, head, qd, gd)?);
        }
    }
    ScoreMatrix::new(values, query_ids.to_vec(), gallery_ids.to_vec())
}

/// Scores every (query, gallery) pair. Descriptors are extracted once per
/// image; the square layer and head run per pair.
pub fn score_all(
    params: &ModelParams<f32>,
    config: &BackboneConfig,
    head: &VerificationHead,
    dataset: &IdentityDataset,
    plan: &GalleryPlan,
) -> Result<ScoreMatrix> {
    let queries = compute_descriptors(params, config, dataset, &plan.queries)?;
    let gallery = compute_descriptors(params, config, dataset, &plan.gallery)?;
    score_matrix_from_descriptors(
        params,
        head,
        &queries,
        &gallery,
        &plan.query_ids,
        &plan.gallery_ids,
    )
}

/// Cumulative match characteristic: `values[k-1]` is the fraction of queries
/// whose correct identity appears within the top-k ranked gallery entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    values: Vec<f64>,
}

impl CmcCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        const OP: &str = "CmcCurve";
        ensure_contract!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            OP,
            "curve values must be in [0, 1]"
        );
        ensure_contract!(
            values.windows(2).all(|w| w[0] <= w[1]),
            OP,
            "curve must be non-decreasing"
        );
        Ok(CmcCurve { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rank-k accuracy, `None` beyond the gallery size. `k` is 1-based.
    pub fn rank_k(&self, k: usize) -> Option<f64> {
        if k >= 1 && k <= self.values.len() {
            Some(self.values[k - 1])
        } else {
            None
        }
    }
}

/// Ranks each query's correct gallery entry by descending score, ties broken
/// by ascending gallery index, and accumulates the match curve.
pub fn compute_cmc(scores: &ScoreMatrix) -> Result<CmcCurve> {
    let q = scores.n_queries();
    let g = scores.n_gallery();
    ensure_contract!(q > 0 && g > 0, "compute_cmc", "empty score matrix");

    let gallery_set: BTreeSet<u32> = scores.gallery_ids.iter().copied().collect();
    let mut rank_counts = vec![0usize; g];
    for i in 0..q {
        let qid = scores.query_ids[i];
        if !gallery_set.contains(&qid) {
            return Err(Error::Protocol(format!(
                "query identity {qid} is absent from the gallery"
            )));
        }
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| {
            scores
                .at(i, b)
                .partial_cmp(&scores.at(i, a))
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        let position = order
            .iter()
            .position(|&j| scores.gallery_ids[j] == qid)
            .expect("query identity present in gallery");
        rank_counts[position] += 1;
    }

    let mut values = Vec::with_capacity(g);
    let mut cumulative = 0usize;
    for count in rank_counts {
        cumulative += count;
        values.push(cumulative as f64 / q as f64);
    }
    CmcCurve::new(values)
}

/// Full evaluation under the single-shot protocol, averaged over `trials`
/// gallery draws (one seed per trial).
pub fn evaluate_cmc(
    params: &ModelParams<f32>,
    config: &BackboneConfig,
    head: &VerificationHead,
    dataset: &IdentityDataset,
    trials: usize,
    seed: u64,
) -> Result<CmcCurve> {
    ensure_contract!(trials >= 1, "evaluate_cmc", "trials must be >= 1");

    // Descriptors depend only on the records; compute them once across trials.
    let all_records: Vec<usize> = (0..dataset.len()).collect();
    let descriptors = compute_descriptors(params, config, dataset, &all_records)?;

    let mut mean: Vec<f64> = Vec::new();
    for trial in 0..trials {
        let plan = build_gallery(dataset, seed.wrapping_add(trial as u64))?;
        let qd: Vec<Tensor<f32>> = plan.queries.iter().map(|&i| descriptors[i].clone()).collect();
        let gd: Vec<Tensor<f32>> = plan.gallery.iter().map(|&i| descriptors[i].clone()).collect();
        let matrix = score_matrix_from_descriptors(
            params,
            head,
            &qd,
            &gd,
            &plan.query_ids,
            &plan.gallery_ids,
        )?;
        let curve = compute_cmc(&matrix)?;
        if mean.is_empty() {
            mean = vec![0.0; curve.len()];
        }
        for (m, v) in mean.iter_mut().zip(curve.values()) {
            *m += v / trials as f64;
        }
    }
    CmcCurve::new(mean)
}

pub const DEFAULT_RANKS: [usize; 5] = [1, 5, 10, 15, 20];

/// Rank-k percentages at the requested cutoffs; entries beyond the gallery
/// size are reported as an em dash.
#[derive(Clone, Debug)]
pub struct RankTable {
    pub entries: Vec<(usize, Option<f64>)>,
}

pub fn rank_table(cmc: &CmcCurve, ks: &[usize]) -> RankTable {
    RankTable {
        entries: ks
            .iter()
            .map(|&k| (k, cmc.rank_k(k).map(|v| v * 100.0)))
            .collect(),
    }
}

impl RankTable {
    fn cell(value: &Option<f64>) -> String {
        match value {
            Some(v) => format!("{v:.1}"),
            None => "\u{2014}".to_string(),
        }
    }

    /// Aligned two-line text table.
    pub fn render_text(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for (k, value) in &self.entries {
            header.push_str(&format!("{:<8}", format!("R-{k}")));
            row.push_str(&format!("{:<8}", Self::cell(value)));
        }
        format!("{}\n{}\n", header.trim_end(), row.trim_end())
    }

    pub fn to_csv(&self) -> String {
        let header: Vec<String> = self.entries.iter().map(|(k, _)| format!("R-{k}")).collect();
        let row: Vec<String> = self.entries.iter().map(|(_, v)| Self::cell(v)).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

pub fn write_cmc_csv<W: Write>(cmc: &CmcCurve, mut w: W) -> std::io::Result<()> {
    writeln!(w, "k,cmc")?;
    for (i, v) in cmc.values().iter().enumerate() {
        writeln!(w, "{},{:.6}", i + 1, v)?;
    }
    Ok(())
}

pub fn emit_cmc_csv(cmc: &CmcCurve, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    write_cmc_csv(cmc, &mut file)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic;

    #[test]
    fn gallery_counts_follow_single_shot_protocol() {
        let ds = generate_synthetic(4, 2, 5).unwrap();
        let plan = build_gallery(&ds, 3).unwrap();
        assert_eq!(plan.queries.len(), 8);
        assert_eq!(plan.gallery.len(), 4);
        let unique: BTreeSet<u32> = plan.gallery_ids.iter().copied().collect();
        assert_eq!(unique.len(), 4);
        let again = build_gallery(&ds, 3).unwrap();
        assert_eq!(plan.gallery, again.gallery);
    }

    #[test]
    fn cmc_hand_example() {
        // scores [[0.9, 0.8, 0.1], [0.2, 0.6, 0.7]] with q = (a, b),
        // g = (a, b, c): ranks 1 and 2, cmc = (0.5, 1.0, 1.0).
        let m = ScoreMatrix::new(
            vec![0.9, 0.8, 0.1, 0.2, 0.6, 0.7],
            vec![0, 1],
            vec![0, 1, 2],
        )
        .unwrap();
        let cmc = compute_cmc(&m).unwrap();
        assert_eq!(cmc.values(), &[0.5, 1.0, 1.0]);
    }

    #[test]
    fn perfect_scores_give_flat_unit_curve() {
        let mut values = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                values.push(if i == j { 0.9 } else { 0.1 });
            }
        }
        let m = ScoreMatrix::new(values, vec![0, 1, 2], vec![0, 1, 2]).unwrap();
        let cmc = compute_cmc(&m).unwrap();
        assert_eq!(cmc.values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn missing_query_identity_is_a_protocol_error() {
        let m = ScoreMatrix::new(vec![0.5, 0.5], vec![7], vec![0, 1]).unwrap();
        let err = compute_cmc(&m).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn rank_table_formats_beyond_gallery_as_dash() {
        let cmc = CmcCurve::new(vec![0.5, 1.0, 1.0]).unwrap();
        let table = rank_table(&cmc, &DEFAULT_RANKS);
        assert_eq!(table.entries[0], (1, Some(50.0)));
        assert_eq!(table.entries[1].1, None);
        let csv = table.to_csv();
        assert_eq!(csv, "R-1,R-5,R-10,R-15,R-20\n50.0,\u{2014},\u{2014},\u{2014},\u{2014}\n");
        let text = table.render_text();
        assert!(text.starts_with("R-1"));
        assert!(text.contains("50.0"));
    }

    #[test]
    fn all_perfect_table_row() {
        let cmc = CmcCurve::new(vec![1.0; 20]).unwrap();
        let table = rank_table(&cmc, &DEFAULT_RANKS);
        let row = table.to_csv().lines().nth(1).unwrap().to_string();
        assert_eq!(row, "100.0,100.0,100.0,100.0,100.0");
    }

    #[test]
    fn cmc_csv_round_trips() {
        let cmc = CmcCurve::new(vec![0.5, 1.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_cmc_csv(&cmc, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,cmc\n"));
        assert!(text.ends_with('\n'));
        let parsed: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(parsed, vec![0.5, 1.0, 1.0]);
    }
}
