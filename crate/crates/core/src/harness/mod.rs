//! Training, evaluation and corpus tooling shared by the command-line tool
//! and the experiments.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod run;
pub mod train;

pub use config::RunConfig;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::retrieval::{retrieve_reference, GeometricEmbedder, RetrievalIndex};
use corpus::{mix_seed, Sample};

/// Order-preserving map, parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// How references are chosen for a set of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Top-1 retrieval, never returning the sample's own shape.
    Retrieved,
    /// A seeded random index shape from a different category.
    Irrelevant,
    None,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieved" => Ok(ReferenceMode::Retrieved),
            "irrelevant" => Ok(ReferenceMode::Irrelevant),
            "none" => Ok(ReferenceMode::None),
            _ => Err(Error::Config(format!(
                "unknown reference mode {s:?} (retrieved, irrelevant, none)"
            ))),
        }
    }
}

impl ReferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceMode::Retrieved => "retrieved",
            ReferenceMode::Irrelevant => "irrelevant",
            ReferenceMode::None => "none",
        }
    }
}

/// One reference (or none) per sample, resampled to `cfg.ref_points`.
/// Returns the chosen shape ids alongside.
pub fn choose_references(
    cfg: &RunConfig,
    index: &RetrievalIndex,
    samples: &[Sample],
    mode: ReferenceMode,
) -> Result<Vec<(Option<String>, Option<PointCloud>)>> {
    if mode == ReferenceMode::None || !cfg.model.use_reference {
        return Ok(vec![(None, None); samples.len()]);
    }
    let indexed: Vec<(usize, &Sample)> = samples.iter().enumerate().collect();
    par_map(&indexed, |&(i, s)| match mode {
        ReferenceMode::Retrieved => {
            let mut hits = retrieve_reference(
                index,
                &GeometricEmbedder,
                &s.partial,
                1,
                cfg.ref_points,
                Some(&s.record.shape_id),
            )?;
            let (id, cloud) = hits.remove(0);
            Ok((Some(id), Some(cloud)))
        }
        ReferenceMode::Irrelevant => {
            let pool: Vec<&str> = index
                .records
                .iter()
                .filter(|r| r.category.as_deref() != Some(s.record.category.as_str()))
                .map(|r| r.shape_id.as_str())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64, 0x1e));
            let id = pool.choose(&mut rng).ok_or_else(|| {
                Error::contract(format!("no index shape outside category {}", s.record.category))
            })?;
            Ok((Some(id.to_string()), Some(index.load_shape(id, cfg.ref_points)?)))
        }
        ReferenceMode::None => unreachable!(),
    })
    .into_iter()
    .collect()
}
