//! Synthetic corpus on disk.
//!
//! ```text
//! <corpus>/
//!   config.cfg              run config used for generation
//!   manifest.txt            every shape: shape_id path category
//!   index_manifest.txt      train shapes only (the retrieval corpus)
//!   shapes/<shape_id>.xyz   complete shapes, gt_points each
//!   partials/<sample>.xyz   occluded inputs, partial_points each
//!   partials_sparse/<sample>.xyz
//!   splits/{train,val,test,unseen,test_sparse}.txt
//! ```
//!
//! A split line is `sample_id shape_id category viewpoint partial gt` with
//! paths relative to the corpus root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::data::{
    degrade, depth_raster, occlude, read_cloud, sample_shape, sample_shape_stream, write_cloud,
    write_manifest, Family, ManifestEntry, Raster, ShapeSpec, NUM_VIEWPOINTS,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const SPLITS: [&str; 5] = ["train", "val", "test", "unseen", "test_sparse"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRecord {
    pub sample_id: String,
    pub shape_id: String,
    pub category: String,
    pub viewpoint: usize,
    pub partial: PathBuf,
    pub gt: PathBuf,
}

/// One loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SplitRecord,
    pub partial: PointCloud,
    pub gt: PointCloud,
    pub image: Raster,
}

/// Per-split sample counts of a generated corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthReport {
    pub shapes: usize,
    pub counts: Vec<(String, usize)>,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn split_path(corpus: &Path, split: &str) -> PathBuf {
    corpus.join("splits").join(format!("{split}.txt"))
}

pub fn write_split(path: &Path, records: &[SplitRecord]) -> Result<()> {
    let mut s = String::from("# sample_id shape_id category viewpoint partial gt\n");
    for r in records {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            r.sample_id,
            r.shape_id,
            r.category,
            r.viewpoint,
            r.partial.display(),
            r.gt.display()
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<Vec<SplitRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        out.push(SplitRecord {
            sample_id: f[0].into(),
            shape_id: f[1].into(),
            category: f[2].into(),
            viewpoint: f[3].parse().map_err(|_| bad("bad viewpoint"))?,
            partial: f[4].into(),
            gt: f[5].into(),
        });
    }
    Ok(out)
}

pub fn load_sample(corpus: &Path, record: &SplitRecord, image_res: usize) -> Result<Sample> {
    let partial = read_cloud(&corpus.join(&record.partial))?;
    let gt = read_cloud(&corpus.join(&record.gt))?;
    let image = depth_raster(&partial, record.viewpoint, image_res, image_res)?;
    Ok(Sample {
        record: record.clone(),
        partial,
        gt,
        image,
    })
}

pub fn load_split(corpus: &Path, split: &str, image_res: usize, limit: usize) -> Result<Vec<Sample>> {
    let mut recs = read_split(&split_path(corpus, split))?;
    if limit > 0 {
        recs.truncate(limit);
    }
    super::par_map(&recs, |r| load_sample(corpus, r, image_res))
        .into_iter()
        .collect()
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

struct ShapeJob {
    family: Family,
    shape_id: String,
    spec: ShapeSpec,
    split: &'static str,
}

/// Generates the corpus. Refuses to write into a non-empty directory unless
/// `force`; with `force`, files are overwritten in place. With `sparse_all`
/// every partial is degraded to the sparse configuration.
pub fn synth(cfg: &RunConfig, out: &Path, force: bool, sparse_all: bool) -> Result<SynthReport> {
    if is_nonempty_dir(out) && !force {
        return Err(Error::contract(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    if cfg.views_per_shape == 0 || cfg.views_per_shape > NUM_VIEWPOINTS {
        return Err(Error::Config(format!(
            "views_per_shape must be in 1..={NUM_VIEWPOINTS}"
        )));
    }
    for d in ["shapes", "partials", "partials_sparse", "splits"] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }

    let mut jobs = Vec::new();
    let families: Vec<(Family, bool)> = cfg
        .seen_families
        .iter()
        .map(|&f| (f, true))
        .chain(cfg.unseen_families.iter().map(|&f| (f, false)))
        .collect();
    for &(family, seen) in &families {
        let n = cfg.shapes_per_family;
        let n_test = (cfg.test_fraction * n as f64).round() as usize;
        let n_val = (cfg.val_fraction * n as f64).round() as usize;
        for i in 0..n {
            let split = if !seen {
                "unseen"
            } else if i + n_test >= n {
                "test"
            } else if i + n_test + n_val >= n {
                "val"
            } else {
                "train"
            };
            let fam_idx = Family::ALL.iter().position(|&f| f == family).unwrap() as u64;
            jobs.push(ShapeJob {
                family,
                shape_id: format!("{}_{i:03}", family.as_str()),
                spec: ShapeSpec::random(family, mix_seed(cfg.seed, fam_idx, i as u64)),
                split,
            });
        }
    }

    type JobOut = (ManifestEntry, Vec<(&'static str, SplitRecord)>);
    let results: Vec<Result<JobOut>> = super::par_map(&jobs, |job| {
        let gt = sample_shape(&job.spec, cfg.gt_points)?;
        let gt_rel = PathBuf::from("shapes").join(format!("{}.xyz", job.shape_id));
        write_cloud(&gt, &out.join(&gt_rel))?;
        let dense = sample_shape_stream(&job.spec, 4 * cfg.partial_points, 1)?;
        let mut views: Vec<usize> = (0..NUM_VIEWPOINTS).collect();
        views.shuffle(&mut ChaCha8Rng::seed_from_u64(job.spec.seed ^ 0x7669_6577));
        views.truncate(cfg.views_per_shape);
        views.sort_unstable();
        let mut recs = Vec::new();
        for vp in views {
            let sample_id = format!("{}_v{vp:02}", job.shape_id);
            let mut partial = occlude(&dense, vp, cfg.partial_points)?;
            let noise_seed = mix_seed(job.spec.seed, vp as u64, 0x5a);
            if sparse_all {
                partial = degrade(&partial, cfg.sparse_points, cfg.sparse_sigma, noise_seed)?;
            }
            let rel = PathBuf::from("partials").join(format!("{sample_id}.xyz"));
            write_cloud(&partial, &out.join(&rel))?;
            let rec = SplitRecord {
                sample_id: sample_id.clone(),
                shape_id: job.shape_id.clone(),
                category: job.family.as_str().to_string(),
                viewpoint: vp,
                partial: rel,
                gt: gt_rel.clone(),
            };
            if job.split == "test" {
                let sparse = degrade(&partial, cfg.sparse_points.min(partial.len()), cfg.sparse_sigma, noise_seed)?;
                let srel = PathBuf::from("partials_sparse").join(format!("{sample_id}.xyz"));
                write_cloud(&sparse, &out.join(&srel))?;
                recs.push((
                    "test_sparse",
                    SplitRecord {
                        partial: srel,
                        ..rec.clone()
                    },
                ));
            }
            recs.push((job.split, rec));
        }
        let entry = ManifestEntry {
            shape_id: job.shape_id.clone(),
            path: gt_rel,
            category: Some(job.family.as_str().to_string()),
        };
        Ok((entry, recs))
    });

    let mut manifest = Vec::new();
    let mut index_manifest = Vec::new();
    let mut splits: Vec<(&str, Vec<SplitRecord>)> = SPLITS.iter().map(|&s| (s, Vec::new())).collect();
    for (job, r) in jobs.iter().zip(results) {
        let (entry, recs) = r?;
        if job.split == "train" {
            index_manifest.push(entry.clone());
        }
        manifest.push(entry);
        for (split, rec) in recs {
            splits.iter_mut().find(|(s, _)| *s == split).unwrap().1.push(rec);
        }
    }
    write_manifest(&out.join("manifest.txt"), &manifest)?;
    write_manifest(&out.join("index_manifest.txt"), &index_manifest)?;
    for (name, recs) in &splits {
        write_split(&split_path(out, name), recs)?;
    }
    let cfg_path = out.join("config.cfg");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(SynthReport {
        shapes: manifest.len(),
        counts: splits.iter().map(|(s, r)| (s.to_string(), r.len())).collect(),
    })
}
