//! Inspection of learned latent policies.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingTuple;
use crate::error::{Error, Result};
use crate::models::{mix_latent, Codebook, LatentPolicy};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeAssignment {
    pub tuple_id: String,
    pub latent: LatentPolicy,
    pub hard_code: usize,
    pub distance: f64,
}

/// Nearest codebook row to `point`, ties to the lower index.
pub fn nearest_code<S: Scalar>(codebook: &Codebook<S>, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..codebook.k() {
        let d2: f64 = codebook.row(k).iter().zip(point).map(|(c, p)| (c.as_f64() - p).powi(2)).sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Mixes each tuple's pseudo-label into a latent and snaps it to the codebook.
pub fn assign_codes<S: Scalar>(codebook: &Codebook<S>, tuples: &[TrainingTuple]) -> Result<Vec<CodeAssignment>> {
    tuples
        .iter()
        .map(|t| {
            let label = t
                .pseudo_label
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("tuple {} has no pseudo-label", t.id())))?;
            let latent = mix_latent(codebook, label)?;
            let (hard_code, distance) = nearest_code(codebook, &latent.vector);
            Ok(CodeAssignment { tuple_id: t.id(), latent, hard_code, distance })
        })
        .collect()
}

pub fn codebook_usage(assignments: &[CodeAssignment], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for a in assignments {
        counts[a.hard_code] += 1;
    }
    counts
}

/// Codes used by at most `max_share` of the assignments.
pub fn dead_codes(usage: &[usize], max_share: f64) -> Vec<usize> {
    let n: usize = usage.iter().sum();
    usage.iter().enumerate().filter(|(_, &c)| c as f64 <= max_share * n as f64).map(|(k, _)| k).collect()
}

/// The `top_n` utterances assigned to `code`, closest first.
pub fn representative_utterances(
    assignments: &[CodeAssignment],
    tuples: &[TrainingTuple],
    code: usize,
    k: usize,
    top_n: usize,
) -> Result<Vec<(String, f64)>> {
    if code >= k {
        return Err(Error::Validation(format!("code {code} out of range for K={k}")));
    }
    if top_n == 0 {
        return Err(Error::Validation("top_n must be at least 1".into()));
    }
    if assignments.len() != tuples.len() {
        return Err(Error::Shape(format!("{} assignments for {} tuples", assignments.len(), tuples.len())));
    }
    let mut picked: Vec<(String, f64)> = assignments
        .iter()
        .zip(tuples)
        .filter(|(a, _)| a.hard_code == code)
        .map(|(a, t)| (t.sys_utterance.text.clone(), a.distance))
        .collect();
    picked.sort_by(|a, b| a.1.total_cmp(&b.1));
    picked.truncate(top_n);
    Ok(picked)
}

/// Markdown table of representative utterances, one section per code.
pub fn representatives_markdown(rows: &[(usize, usize, Vec<(String, f64)>)]) -> String {
    let mut out = String::new();
    for (code, usage, items) in rows {
        let _ = writeln!(out, "## Policy {code} (used {usage} times)\n");
        out.push_str("| # | utterance | distance |\n|---|---|---|\n");
        for (i, (text, dist)) in items.iter().enumerate() {
            let _ = writeln!(out, "| {} | {} | {dist:.6} |", i + 1, text.replace('|', "\\|"));
        }
        out.push('\n');
    }
    out
}

/// Projects points onto their top two principal components.
///
/// Component signs make the first nonzero loading positive. Degenerate inputs
/// with no spread map every point to the origin.
pub fn project_2d(latents: &[LatentPolicy]) -> Result<Vec<[f64; 2]>> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::Validation(format!("projection needs at least 2 points, got {n}")));
    }
    let d = latents[0].vector.len();
    if d < 2 {
        return Err(Error::Validation(format!("projection needs d >= 2, got {d}")));
    }
    if let Some(bad) = latents.iter().find(|l| l.vector.len() != d) {
        return Err(Error::Shape(format!("latent of length {} among length {d}", bad.vector.len())));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| latents[i].vector[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let scale = x.amax();
    if scale == 0.0 {
        warn!("all {n} latents are identical; projecting to the origin");
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let tol = 1e-12 * scale;
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            if v.iter().find(|x| x.abs() > tol).is_some_and(|&x| x < 0.0) {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(x.row_iter()
        .map(|row| {
            let p = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub nmi: f64,
    pub purity: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// NMI with arithmetic-mean normalization, and purity of `pred` clusters.
pub fn clustering_quality(pred: &[usize], truth: &[usize]) -> Result<ClusterQuality> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Validation("clustering quality of an empty labelling".into()));
    }
    let n = pred.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut tc: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pc.entry(p).or_default() += 1;
        *tc.entry(t).or_default() += 1;
    }
    let hp = entropy(pc.values().copied(), n);
    let ht = entropy(tc.values().copied(), n);
    let mi: f64 = joint
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / n * (c * n / (pc[&p] as f64 * tc[&t] as f64)).ln()
        })
        .sum();
    let nmi = if hp + ht == 0.0 { 1.0 } else { (2.0 * mi / (hp + ht)).clamp(0.0, 1.0) };
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(p, _), &c) in &joint {
        let e = best.entry(p).or_default();
        *e = (*e).max(c);
    }
    let purity = best.values().sum::<usize>() as f64 / n;
    Ok(ClusterQuality { nmi, purity })
}

pub fn assignments_csv(assignments: &[CodeAssignment]) -> String {
    let mut out = String::from("tuple_id,hard_code,distance\n");
    for a in assignments {
        let _ = writeln!(out, "{},{},{}", a.tuple_id, a.hard_code, a.distance);
    }
    out
}

pub fn usage_csv(usage: &[usize]) -> String {
    let mut out = String::from("code,count\n");
    for (k, c) in usage.iter().enumerate() {
        let _ = writeln!(out, "{k},{c}");
    }
    out
}

pub fn points_csv(points: &[[f64; 2]], codes: &[usize], truth: Option<&[usize]>) -> String {
    let mut out = String::from(if truth.is_some() { "x,y,hard_code,truth_label\n" } else { "x,y,hard_code\n" });
    for (i, (p, c)) in points.iter().zip(codes).enumerate() {
        match truth {
            Some(t) => writeln!(out, "{},{},{c},{}", p[0], p[1], t[i]),
            None => writeln!(out, "{},{},{c}", p[0], p[1]),
        }
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PolicyDistribution;
    use crate::tensor::Tensor;

    fn book(rows: &[[f64; 2]]) -> Codebook<f64> {
        Codebook::new(Tensor::from_vec(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()).unwrap()
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let cb = book(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(nearest_code(&cb, &[0.0, 0.0]), (0, 1.0));
        let cb = book(&[[0.0, 3.0], [1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(nearest_code(&cb, &[0.0, 0.0]).0, 1);
    }

    #[test]
    fn one_hot_labels_snap_to_their_code() {
        let cb = book(&[[0.5, 1.0], [2.0, -1.0], [0.0, 0.0]]);
        let tuples: Vec<TrainingTuple> = (0..3)
            .map(|k| TrainingTuple {
                dialogue_id: "d".into(),
                turn_index: k,
                history: vec![],
                sys_utterance: crate::corpus::Turn::system("x"),
                usr_reply: None,
                next_history: vec![],
                reward: None,
                pseudo_label: Some(PolicyDistribution::one_hot(3, k)),
                is_terminal: true,
            })
            .collect();
        let a = assign_codes(&cb, &tuples).unwrap();
        for (k, a) in a.iter().enumerate() {
            assert_eq!((a.hard_code, a.distance), (k, 0.0));
        }
        assert_eq!(codebook_usage(&a, 3), vec![1, 1, 1]);
        assert_eq!(codebook_usage(&[], 4), vec![0; 4]);
    }

    #[test]
    fn clustering_extremes() {
        let t = [0, 0, 1, 1, 2, 2];
        assert_eq!(clustering_quality(&t, &t).unwrap(), ClusterQuality { nmi: 1.0, purity: 1.0 });
        let q = clustering_quality(&[3, 3, 3, 3], &[0, 1, 0, 1]).unwrap();
        assert_eq!((q.nmi, q.purity), (0.0, 0.5));
        let relabeled = clustering_quality(&[5, 5, 9, 9, 1, 1], &t).unwrap();
        assert!((relabeled.nmi - 1.0).abs() < 1e-12);
        assert!(clustering_quality(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn identical_latents_project_to_origin() {
        let l = vec![LatentPolicy { vector: vec![0.3, -0.2, 1.0] }; 4];
        assert_eq!(project_2d(&l).unwrap(), vec![[0.0, 0.0]; 4]);
        assert!(project_2d(&l[..1]).is_err());
    }
}
