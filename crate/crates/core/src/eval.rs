//! Accuracy metrics, logit fusion, feature extraction and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};

use crate::arrayfile;
use crate::augment::eval_view;
use crate::autograd::{Graph, Params};
use crate::contrastive::{Modality, Networks};
use crate::corpus::Sample;
use crate::encoders::{pose_batch, rgb_batch, Classifier};
use crate::error::{invalid, Error, Result};

/// Elementwise sum of the two branches' logits.
pub fn fuse_logits(rgb: &Array2<f64>, pose: &Array2<f64>) -> Result<Array2<f64>> {
    if rgb.shape() != pose.shape() {
        return Err(Error::Dimension(format!(
            "cannot fuse logits of shapes {:?} and {:?}",
            rgb.shape(),
            pose.shape()
        )));
    }
    Ok(rgb + pose)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccuracyMode {
    Instance,
    Class,
}

impl AccuracyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AccuracyMode::Instance => "instance",
            AccuracyMode::Class => "class",
        }
    }
}

/// Whether `label` is among the `k` largest entries of `row`; ties rank the
/// lower class index first.
pub fn in_top_k(row: ndarray::ArrayView1<'_, f64>, label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count();
    ahead < k
}

pub fn topk_accuracy(logits: ArrayView2<'_, f64>, labels: &[usize], k: usize, mode: AccuracyMode) -> Result<f64> {
    let (m, c) = logits.dim();
    if k == 0 || k > c {
        return invalid(format!("top-k needs 1 <= k <= {c}, got k = {k}"));
    }
    if m == 0 || labels.len() != m {
        return invalid("need one label per logit row and at least one row");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return invalid(format!("label {bad} out of range for {c} classes"));
    }
    let hits: Vec<bool> = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &l)| in_top_k(row, l, k))
        .collect();
    Ok(match mode {
        AccuracyMode::Instance => hits.iter().filter(|&&h| h).count() as f64 / m as f64,
        AccuracyMode::Class => {
            let mut per = vec![(0usize, 0usize); c];
            for (&h, &l) in hits.iter().zip(labels) {
                per[l].0 += h as usize;
                per[l].1 += 1;
            }
            mean_of_ratios(&per)
        }
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Unweighted mean of `hits / count` over entries with `count > 0`. Summed
/// over a common denominator and rounded once when the integers stay exact
/// in f64, so balanced splits give exactly `sum(hits) / sum(count)`.
fn mean_of_ratios(per: &[(usize, usize)]) -> f64 {
    const EXACT: u128 = 1 << 53;
    let present: Vec<(u128, u128)> = per.iter().filter(|(_, n)| *n > 0).map(|&(h, n)| (h as u128, n as u128)).collect();
    let mut l: u128 = 1;
    for &(_, n) in &present {
        l = l / gcd(l, n) * n;
        if l >= EXACT {
            break;
        }
    }
    let den = l * present.len() as u128;
    if l < EXACT && den < EXACT {
        let num: u128 = present.iter().map(|&(h, n)| h * (l / n)).sum();
        return num as f64 / den as f64;
    }
    present.iter().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / present.len() as f64
}

/// Metric values keyed `{branch}_{mode}_top{k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn from_logits(rgb: &Array2<f64>, pose: &Array2<f64>, labels: &[usize]) -> Result<Self> {
        let fused = fuse_logits(rgb, pose)?;
        let mut entries = Vec::with_capacity(12);
        for (branch, logits) in [("rgb", rgb), ("pose", pose), ("fused", &fused)] {
            for mode in [AccuracyMode::Instance, AccuracyMode::Class] {
                for k in [1, 5] {
                    let k_eff = k.min(logits.ncols());
                    let v = topk_accuracy(logits.view(), labels, k_eff, mode)?;
                    entries.push((format!("{branch}_{}_top{k}", mode.as_str()), v));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("metrics line without `=`: {line}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("metrics value is not a number: {line}")))?;
            entries.push((k.trim().to_string(), v));
        }
        Ok(Self { entries })
    }
}

/// Samples per encoder batch during feature extraction. Fixed so results do
/// not depend on the worker count.
const FEATURE_CHUNK: usize = 16;

/// Encoder outputs `[M, d]` on deterministic evaluation views.
pub fn extract_features(
    nets: &Networks,
    m: Modality,
    encoder: &Params,
    samples: &[&Sample],
    t_model: usize,
    threads: usize,
) -> Result<Array2<f64>> {
    let chunks: Vec<&[&Sample]> = samples.chunks(FEATURE_CHUNK).collect();
    let run = |chunk: &[&Sample]| -> Result<Array2<f64>> {
        let views: Vec<_> = chunk.iter().map(|s| eval_view(s, t_model)).collect();
        let x = match m {
            Modality::Rgb => rgb_batch(&views.iter().map(|v| &v.rgb).collect::<Vec<_>>()),
            Modality::Pose => pose_batch(&views.iter().map(|v| &v.pose).collect::<Vec<_>>()),
        };
        let mut g = Graph::no_grad();
        let b = encoder.bind(&mut g, false);
        let out = nets.encode(m, &mut g, &b, &x)?;
        Ok(g.value(out).view().into_dimensionality().expect("rank 2").to_owned())
    };
    let parts = crate::parallel::map(&chunks, threads, |c| run(c))?;
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, nets.embed_dim(m))));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
}

/// Applies a classifier head to precomputed features.
pub fn classify_features(head: &Classifier, params: &Params, features: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g, false);
    let x = g.constant(features.clone().into_dyn());
    let out = head.forward(&mut g, &b, x);
    g.value(out).view().into_dimensionality().expect("rank 2").to_owned()
}

/// Writes per-branch embedding arrays and a manifest with one row per
/// (branch, sample). Returns the manifest path.
pub fn export_embeddings(
    nets: &Networks,
    encoders: [&Params; 2],
    samples: &[&Sample],
    t_model: usize,
    threads: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = String::from("row\tbranch\tid\tlabel\tfile\n");
    for (m, enc) in Modality::BOTH.into_iter().zip(encoders) {
        let feats = extract_features(nets, m, enc, samples, t_model, threads)?;
        let file = format!("{}_embeddings.arr", m.name());
        arrayfile::write_array(&out_dir.join(&file), &feats.mapv(|v| v as f32).into_dyn())?;
        for (row, s) in samples.iter().enumerate() {
            let _ = writeln!(manifest, "{row}\t{}\t{}\t{}\t{file}", m.name(), s.id, s.label);
        }
    }
    let path = out_dir.join("embeddings.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fusion_examples() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 0.0]];
        assert_eq!(fuse_logits(&a, &b).unwrap(), array![[4.0, 2.0]]);
        assert_eq!(fuse_logits(&a, &b).unwrap(), fuse_logits(&b, &a).unwrap());
        assert_eq!(fuse_logits(&a, &Array2::zeros((1, 2))).unwrap(), a);
        assert!(fuse_logits(&a, &Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn hand_counted_case() {
        // labels [0,0,1]; sample 0 right, sample 1 wrong, sample 2 right
        let logits = array![[2.0, 1.0], [0.0, 1.0], [0.0, 3.0]];
        let labels = [0, 0, 1];
        let inst = topk_accuracy(logits.view(), &labels, 1, AccuracyMode::Instance).unwrap();
        let class = topk_accuracy(logits.view(), &labels, 1, AccuracyMode::Class).unwrap();
        assert_eq!(inst, 2.0 / 3.0);
        assert_eq!(class, 0.75);
        assert_eq!(topk_accuracy(logits.view(), &labels, 2, AccuracyMode::Instance).unwrap(), 1.0);
        assert!(topk_accuracy(logits.view(), &labels, 3, AccuracyMode::Instance).is_err());
        assert!(topk_accuracy(logits.view(), &labels, 0, AccuracyMode::Instance).is_err());
    }

    #[test]
    fn ties_favour_lower_index() {
        let logits = array![[1.0, 1.0, 1.0]];
        assert!(in_top_k(logits.row(0), 0, 1));
        assert!(!in_top_k(logits.row(0), 1, 1));
        assert!(in_top_k(logits.row(0), 1, 2));
    }

    #[test]
    fn report_has_twelve_keys_and_round_trips() {
        let r = array![[1.0, 0.0], [0.0, 1.0]];
        let p = array![[0.0, 1.0], [0.0, 1.0]];
        let rep = MetricsReport::from_logits(&r, &p, &[0, 1]).unwrap();
        assert_eq!(rep.entries().len(), 12);
        assert_eq!(rep.get("rgb_instance_top1"), Some(1.0));
        assert_eq!(rep.get("pose_class_top1"), Some(0.5));
        let back = MetricsReport::parse(&rep.to_text()).unwrap();
        assert_eq!(back, rep);
    }
}
