//! Post-hoc analysis of attention heads: entropy, rank correlation,
//! Jensen–Shannon divergence between heads, distances between models and a
//! 2-D projection of head-distance matrices.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{CLS, SEP};
use crate::error::{Error, Result};
use crate::model::{forward, AttentionCapture, ModelConfig, ParamSet, SequenceInput};
use crate::tensor::Tensor;

const SUM_TOLERANCE: f64 = 1e-9;

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Mean row entropy of every head, `[L, A]`, averaged over all attention
/// rows (one per probe token) of all captures.
pub fn head_entropy(captures: &[AttentionCapture]) -> Result<Tensor> {
    let (layers, heads) = capture_dims(captures)?;
    let mut sums = vec![0.0; layers * heads];
    let mut rows = 0usize;
    for c in captures {
        let n = c.seq_len();
        rows += n;
        for (h, t) in c.heads.iter().enumerate() {
            sums[h] += t.data().chunks(n).map(entropy).sum::<f64>();
        }
    }
    if rows == 0 {
        return Err(Error::Contract("probe corpus has no tokens".into()));
    }
    Tensor::new(
        vec![layers, heads],
        sums.into_iter().map(|s| s / rows as f64).collect(),
    )
}

fn capture_dims(captures: &[AttentionCapture]) -> Result<(usize, usize)> {
    let first = captures
        .first()
        .ok_or_else(|| Error::Contract("probe corpus is empty".into()))?;
    let dims = (first.num_layers, first.num_heads);
    for c in captures {
        if (c.num_layers, c.num_heads) != dims || c.heads.len() != dims.0 * dims.1 {
            return Err(Error::Contract(
                "captures come from different architectures".into(),
            ));
        }
    }
    Ok(dims)
}

/// Average ranks (1-based); ties share the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal-length inputs of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::Contract("spearman input contains NaN".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("an input has no rank variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Contract(format!(
            "{what} has negative or non-finite mass"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Contract(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Jensen–Shannon divergence in nats, validated inputs.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "distributions have supports {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(jsd_unchecked(p, q))
}

fn jsd_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += a * (a / m).ln();
        }
        if b > 0.0 {
            total += b * (b / m).ln();
        }
    }
    (0.5 * total).max(0.0)
}

/// Head-by-head matrix `[(L·A), (L·A)]`: entry `(i, j)` is the mean over all
/// probe tokens of the JSD between head `i`'s and head `j`'s attention rows.
pub fn jsd_head_matrix(captures: &[AttentionCapture]) -> Result<Tensor> {
    let (layers, heads) = capture_dims(captures)?;
    let h = layers * heads;
    let mut sums = vec![0.0; h * h];
    let mut rows = 0usize;
    for c in captures {
        let n = c.seq_len();
        for t in &c.heads {
            for row in t.data().chunks(n) {
                check_distribution(row, "attention row")?;
            }
        }
        for r in 0..n {
            rows += 1;
            for i in 0..h {
                let pi = &c.heads[i].data()[r * n..(r + 1) * n];
                for j in i + 1..h {
                    let pj = &c.heads[j].data()[r * n..(r + 1) * n];
                    let d = jsd_unchecked(pi, pj);
                    sums[i * h + j] += d;
                    sums[j * h + i] += d;
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::Contract("probe corpus has no tokens".into()));
    }
    Tensor::new(
        vec![h, h],
        sums.into_iter().map(|s| s / rows as f64).collect(),
    )
}

/// How [`model_distance`] reduces the element-wise absolute differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    #[default]
    Mean,
    Sum,
}

/// Mean (or sum) of `|a − b|` over all entries, diagonal included.
pub fn model_distance(a: &Tensor, b: &Tensor, mode: DistanceMode) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "model_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(match mode {
        DistanceMode::Sum => sum,
        DistanceMode::Mean => sum / a.numel() as f64,
    })
}

/// Classical multidimensional scaling into the plane: double-centre
/// `−½ J D² J`, keep the two largest eigenpairs and scale the eigenvectors by
/// the root eigenvalue. Non-positive eigenvalues give a zero coordinate.
pub fn mds_project_2d(distances: &Tensor) -> Result<Vec<[f64; 2]>> {
    let n = match distances.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(Error::Contract(format!(
                "distance matrix must be square, got {other:?}"
            )))
        }
    };
    let d = distances.data();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (d[i * n + j], d[j * n + i]);
            if !x.is_finite() || x < 0.0 {
                return Err(Error::Contract(format!("distance ({i},{j}) is {x}")));
            }
            if (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::Contract(format!(
                    "distance matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let sq = DMatrix::from_fn(n, n, |i, j| {
        let x = 0.5 * (d[i * n + j] + d[j * n + i]);
        x * x
    });
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut points = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-12 * eig.eigenvalues.amax().max(1.0) {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        // Fix the arbitrary eigenvector sign: largest component positive.
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("n > 0");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt();
        for (i, p) in points.iter_mut().enumerate() {
            p[axis] = v[i] * scale;
        }
    }
    Ok(points)
}

/// Attention statistics of one model over a shared probe corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub tag: String,
    /// `[L, A]` mean row entropies in nats.
    pub entropy: Tensor,
    /// `[(L·A), (L·A)]` mean head-pair JSD.
    pub jsd_matrix: Tensor,
}

/// Wraps probe sentences (already tokenized into ids) as `[CLS] … [SEP]`,
/// truncated to `max_len`.
pub fn probe_inputs(sentences: &[Vec<usize>], max_len: usize) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .map(|s| {
            let keep = s.len().min(max_len.saturating_sub(2));
            let mut ids = Vec::with_capacity(keep + 2);
            ids.push(CLS);
            ids.extend_from_slice(&s[..keep]);
            ids.push(SEP);
            ids
        })
        .collect()
}

/// Attention captures of every probe sequence under evaluation mode.
pub fn capture_attention(
    config: &ModelConfig,
    params: &ParamSet,
    probes: &[Vec<usize>],
) -> Result<Vec<AttentionCapture>> {
    probes
        .iter()
        .map(|ids| {
            let segments = vec![0; ids.len()];
            let mask = vec![true; ids.len()];
            let input = SequenceInput {
                token_ids: ids,
                segment_ids: &segments,
                attention_mask: &mask,
            };
            let (_, capture) = forward(config, params, input, true)?;
            Ok(capture.expect("capture requested"))
        })
        .collect()
}

impl AttentionProfile {
    pub fn from_captures(tag: impl Into<String>, captures: &[AttentionCapture]) -> Result<Self> {
        Ok(Self {
            tag: tag.into(),
            entropy: head_entropy(captures)?,
            jsd_matrix: jsd_head_matrix(captures)?,
        })
    }

    pub fn compute(
        tag: impl Into<String>,
        config: &ModelConfig,
        params: &ParamSet,
        probes: &[Vec<usize>],
    ) -> Result<Self> {
        Self::from_captures(tag, &capture_attention(config, params, probes)?)
    }
}

/// Pairwise model comparison: lower-triangular Spearman correlations of head
/// entropies and distances between head JSD matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionReport {
    pub models: Vec<String>,
    /// `None` where the correlation is undefined.
    pub spearman: Vec<Vec<Option<f64>>>,
    pub distance_mean: Vec<Vec<f64>>,
    pub distance_sum: Vec<Vec<f64>>,
}

const BLOCKS: [&str; 3] = ["spearman", "distance_mean", "distance_sum"];

impl AttentionReport {
    pub fn build(profiles: &[AttentionProfile]) -> Result<Self> {
        let mut correlations = Vec::with_capacity(profiles.len());
        let mut distance_mean = Vec::with_capacity(profiles.len());
        let mut distance_sum = Vec::with_capacity(profiles.len());
        for (i, a) in profiles.iter().enumerate() {
            let mut s = Vec::with_capacity(i + 1);
            let mut dm = Vec::with_capacity(i + 1);
            let mut ds = Vec::with_capacity(i + 1);
            for b in &profiles[..=i] {
                s.push(match spearman(a.entropy.data(), b.entropy.data()) {
                    Ok(r) => Some(r),
                    Err(Error::Undefined(_)) => None,
                    Err(e) => return Err(e),
                });
                dm.push(model_distance(
                    &a.jsd_matrix,
                    &b.jsd_matrix,
                    DistanceMode::Mean,
                )?);
                ds.push(model_distance(
                    &a.jsd_matrix,
                    &b.jsd_matrix,
                    DistanceMode::Sum,
                )?);
            }
            correlations.push(s);
            distance_mean.push(dm);
            distance_sum.push(ds);
        }
        Ok(Self {
            models: profiles.iter().map(|p| p.tag.clone()).collect(),
            spearman: correlations,
            distance_mean,
            distance_sum,
        })
    }

    /// Three blocks, each introduced by a `# name` line, then a header row
    /// of model names and one lower-triangular row per model. Undefined
    /// correlations are written as `NA`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, block) in BLOCKS.iter().zip(self.blocks()) {
            let _ = writeln!(out, "# {name}");
            let _ = writeln!(out, "model\t{}", self.models.join("\t"));
            for (model, row) in self.models.iter().zip(block) {
                out.push_str(model);
                for v in row {
                    match v {
                        Some(x) => {
                            let _ = write!(out, "\t{x}");
                        }
                        None => out.push_str("\tNA"),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    fn blocks(&self) -> [Vec<Vec<Option<f64>>>; 3] {
        let wrap = |m: &Vec<Vec<f64>>| {
            m.iter()
                .map(|r| r.iter().map(|&x| Some(x)).collect())
                .collect()
        };
        [
            self.spearman.clone(),
            wrap(&self.distance_mean),
            wrap(&self.distance_sum),
        ]
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut models: Option<Vec<String>> = None;
        let mut blocks: Vec<Vec<Vec<Option<f64>>>> = Vec::new();
        for name in BLOCKS {
            let title = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing block {name}")))?;
            if title != format!("# {name}") {
                return Err(Error::Format(format!(
                    "expected block {name}, found {title:?}"
                )));
            }
            let header = lines
                .next()
                .ok_or_else(|| Error::Format("missing header".into()))?;
            let names: Vec<String> = header
                .strip_prefix("model\t")
                .ok_or_else(|| Error::Format(format!("bad header {header:?}")))?
                .split('\t')
                .map(str::to_owned)
                .collect();
            if models.as_ref().is_some_and(|m| *m != names) {
                return Err(Error::Format("blocks list different models".into()));
            }
            let mut rows = Vec::with_capacity(names.len());
            for (i, expect) in names.iter().enumerate() {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Format("missing row".into()))?;
                let mut cells = line.split('\t');
                if cells.next() != Some(expect.as_str()) {
                    return Err(Error::Format(format!("row {i} of {name} is not {expect}")));
                }
                let row = cells
                    .map(|c| match c {
                        "NA" => Ok(None),
                        c => c
                            .parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::Format(format!("bad number {c:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != i + 1 {
                    return Err(Error::Format(format!(
                        "row {i} of {name} has {} cells",
                        row.len()
                    )));
                }
                rows.push(row);
            }
            models = Some(names);
            blocks.push(rows);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Format("trailing content after the report".into()));
        }
        let unwrap = |m: Vec<Vec<Option<f64>>>| -> Result<Vec<Vec<f64>>> {
            m.into_iter()
                .map(|r| {
                    r.into_iter()
                        .map(|x| x.ok_or_else(|| Error::Format("NA in a distance block".into())))
                        .collect()
                })
                .collect()
        };
        let distance_sum = unwrap(blocks.pop().expect("three blocks"))?;
        let distance_mean = unwrap(blocks.pop().expect("three blocks"))?;
        Ok(Self {
            models: models.expect("three blocks"),
            spearman: blocks.pop().expect("three blocks"),
            distance_mean,
            distance_sum,
        })
    }
}
