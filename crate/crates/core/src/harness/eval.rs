//! Evaluation reports: per-sample metrics, per-category and overall means.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::corpus::Sample;
use super::par_map;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l1, chamfer_l2, f_score, fidelity, mmd, PointCloud};
use crate::model::{Network, SampleInput};

/// Fraction of the longest ground-truth bounding-box side used as the
/// F-score threshold.
pub const F_SCORE_FRACTION: f64 = 0.01;

/// Per-sample metrics. Distances are reported ×1000.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub category: String,
    pub reference: Option<String>,
    pub cd_l1_x1000: f64,
    pub cd_l2_x1000: f64,
    pub f_score: f64,
    pub fidelity_x1000: f64,
    pub mmd_x1000: f64,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricMeans {
    pub category: String,
    pub count: usize,
    pub cd_l1_x1000: f64,
    pub cd_l2_x1000: f64,
    pub f_score: f64,
    pub fidelity_x1000: f64,
    pub mmd_x1000: f64,
}

impl MetricMeans {
    /// Means accumulated in record order.
    pub fn of<'a>(category: &str, records: impl IntoIterator<Item = &'a SampleMetrics>) -> Self {
        let mut m = MetricMeans {
            category: category.to_string(),
            count: 0,
            cd_l1_x1000: 0.0,
            cd_l2_x1000: 0.0,
            f_score: 0.0,
            fidelity_x1000: 0.0,
            mmd_x1000: 0.0,
        };
        for r in records {
            m.count += 1;
            m.cd_l1_x1000 += r.cd_l1_x1000;
            m.cd_l2_x1000 += r.cd_l2_x1000;
            m.f_score += r.f_score;
            m.fidelity_x1000 += r.fidelity_x1000;
            m.mmd_x1000 += r.mmd_x1000;
        }
        let n = m.count.max(1) as f64;
        m.cd_l1_x1000 /= n;
        m.cd_l2_x1000 /= n;
        m.f_score /= n;
        m.fidelity_x1000 /= n;
        m.mmd_x1000 /= n;
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    /// `model` or `oracle`.
    pub mode: String,
    pub reference_mode: String,
    pub config_hash: String,
    pub count: usize,
    pub categories: Vec<MetricMeans>,
    pub average: MetricMeans,
    #[serde(skip)]
    pub records: Vec<SampleMetrics>,
}

impl EvalReport {
    pub fn from_records(
        split: &str,
        mode: &str,
        reference_mode: &str,
        config_hash: &str,
        records: Vec<SampleMetrics>,
    ) -> Self {
        let mut cats: Vec<&str> = records.iter().map(|r| r.category.as_str()).collect();
        cats.sort_unstable();
        cats.dedup();
        let categories = cats
            .iter()
            .map(|c| MetricMeans::of(c, records.iter().filter(|r| r.category == *c)))
            .collect();
        EvalReport {
            split: split.into(),
            mode: mode.into(),
            reference_mode: reference_mode.into(),
            config_hash: config_hash.into(),
            count: records.len(),
            categories,
            average: MetricMeans::of("average", &records),
            records,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| r.finite)
    }

    /// One `{"kind":"sample",...}` line per sample, then one
    /// `{"kind":"summary",...}` line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            kind: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}",
                serde_json::to_string(&Tagged { kind: "sample", body: r }).expect("serializes")
            );
        }
        let _ = writeln!(
            s,
            "{}",
            serde_json::to_string(&Tagged {
                kind: "summary",
                body: self
            })
            .expect("serializes")
        );
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "split={} mode={} reference={} samples={} config={}",
            self.split, self.mode, self.reference_mode, self.count, self.config_hash
        );
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>12} {:>12} {:>10} {:>14} {:>10}",
            "category", "n", "CD-l1 x1e3", "CD-l2 x1e3", "F@1%", "fidelity x1e3", "MMD x1e3"
        );
        for m in self.categories.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>12.4} {:>12.4} {:>10.4} {:>14.4} {:>10.4}",
                m.category, m.count, m.cd_l1_x1000, m.cd_l2_x1000, m.f_score, m.fidelity_x1000, m.mmd_x1000
            );
        }
        s
    }
}

/// F-score threshold for a ground-truth cloud.
pub fn f_score_tau(gt: &PointCloud) -> f64 {
    let (lo, hi) = gt.bounds();
    let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    F_SCORE_FRACTION * side
}

pub fn sample_metrics(
    sample: &Sample,
    reference: Option<String>,
    output: &PointCloud,
    mmd_pool: &[PointCloud],
) -> Result<SampleMetrics> {
    let finite = output.is_finite();
    let (mut cd1, mut cd2, mut fs, mut fid, mut md) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    if finite {
        cd1 = chamfer_l1(output, &sample.gt)? * 1000.0;
        cd2 = chamfer_l2(output, &sample.gt)? * 1000.0;
        fs = f_score(output, &sample.gt, f_score_tau(&sample.gt))?;
        fid = fidelity(&sample.partial, output)? * 1000.0;
        md = if mmd_pool.is_empty() {
            0.0
        } else {
            mmd(output, mmd_pool)? * 1000.0
        };
    }
    Ok(SampleMetrics {
        sample_id: sample.record.sample_id.clone(),
        category: sample.record.category.clone(),
        reference,
        cd_l1_x1000: cd1,
        cd_l2_x1000: cd2,
        f_score: fs,
        fidelity_x1000: fid,
        mmd_x1000: md,
        finite,
    })
}

/// Evaluates `net` on `samples` with the given references. Without a
/// network the ground truth itself is scored (oracle self-check).
pub fn evaluate(
    net: Option<&Network>,
    samples: &[Sample],
    references: &[(Option<String>, Option<PointCloud>)],
    mmd_pool: &[PointCloud],
) -> Result<Vec<SampleMetrics>> {
    if samples.len() != references.len() {
        return Err(Error::contract("one reference slot per sample is required"));
    }
    let pairs: Vec<(&Sample, &(Option<String>, Option<PointCloud>))> = samples.iter().zip(references).collect();
    par_map(&pairs, |(s, (rid, rc))| {
        let output = match net {
            Some(net) => {
                let prep = net.prepare(SampleInput {
                    partial: &s.partial,
                    image: Some(&s.image),
                    reference: rc.as_ref(),
                })?;
                net.complete(&prep)?.dense
            }
            None => s.gt.clone(),
        };
        sample_metrics(s, rid.clone(), &output, mmd_pool)
    })
    .into_iter()
    .collect()
}
