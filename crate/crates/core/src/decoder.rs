//! Progressive decoder: global fusion, seed generation, per-seed reference
//! attention and displacement into the dense cloud.

use rand::Rng;

use crate::encoder::{cosine_knn, pool_rows, TokenSet};
use crate::error::{Error, Result};
use crate::geometry::{Point3, SpatialIndex};
use crate::tensor::nn::{LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Bound on seed coordinates: seeds are `SEED_BOUND · tanh(·)`.
pub const SEED_BOUND: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub d_global: usize,
    pub seeds: usize,
    pub group: usize,
    pub rounds: usize,
    pub k_geo: usize,
    pub k_sem: usize,
    /// `false` replaces per-seed KNN attention by attention over all tokens.
    pub progressive: bool,
}

/// Seed coordinates `[M₀ × 3]` and their queries `[M₀ × D]`.
#[derive(Clone, Copy, Debug)]
pub struct SeedSet {
    pub seeds: Var,
    pub queries: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CompletionOutput {
    pub dense: Var,
    pub seeds: Var,
    pub group: usize,
}

/// Single-head cross-attention from each query to its own `k` gathered rows.
#[derive(Clone, Debug)]
struct GroupAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl GroupAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        GroupAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::unbiased(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::scaled(store, &format!("{name}.o"), d, d, 0.5, rng),
        }
    }

    /// `query: [G × D]`, `kv: [G·k × D]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, kv: Var, k: usize) -> Result<Var> {
        let d = g.shape(query)[1];
        let q = self.q.forward(g, store, query)?;
        let keys = self.k.forward(g, store, kv)?;
        let vals = self.v.forward(g, store, kv)?;
        let s = g.group_dot(q, keys, k)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = g.softmax(s, 1)?;
        let o = g.group_weighted_sum(a, vals, k)?;
        self.o.forward(g, store, o)
    }
}

#[derive(Clone, Debug)]
struct Round {
    geo: GroupAttention,
    rel: Linear,
    sem: GroupAttention,
    ln: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub fuse: Mlp,
    pub seed: Mlp,
    pub query: Mlp,
    rounds: Vec<Round>,
    pub offsets: Mlp,
}

fn repeat_rows(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.seeds == 0 || config.group == 0 {
            return Err(Error::Config("seed count and group size must be at least 1".into()));
        }
        let (d, dg) = (config.d_model, config.d_global);
        let seed = Mlp::new(store, "dec.seed", (dg, dg, 3 * config.seeds), rng);
        store.get_mut(seed.out.weight).data_mut().iter_mut().for_each(|x| *x *= 0.5);
        Ok(Decoder {
            config,
            fuse: Mlp::new(store, "dec.fuse", (dg + d, dg, dg), rng),
            seed,
            query: Mlp::new(store, "dec.query", (dg + 3, d, d), rng),
            rounds: (0..config.rounds)
                .map(|r| Round {
                    geo: GroupAttention::new(store, &format!("dec.round{r}.geo"), d, rng),
                    rel: Linear::new(store, &format!("dec.round{r}.rel"), 3, d, rng),
                    sem: GroupAttention::new(store, &format!("dec.round{r}.sem"), d, rng),
                    ln: LayerNorm::new(store, &format!("dec.round{r}.ln"), d),
                    ffn: Mlp::new(store, &format!("dec.round{r}.ffn"), (d, 2 * d, d), rng),
                })
                .collect(),
            offsets: {
                let m = Mlp::new(store, "dec.displace", (d, d, 3 * config.group), rng);
                store.get_mut(m.out.weight).data_mut().iter_mut().for_each(|x| *x *= 0.1);
                m
            },
        })
    }

    /// `G = MLP([global_term, max over gated reference tokens])`. Without a
    /// reference the second half is zero.
    pub fn fuse_global(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        global_term: Var,
        gated_ref: Option<&TokenSet>,
    ) -> Result<Var> {
        let pooled = match gated_ref {
            Some(r) if !r.is_empty() => pool_rows(g, r.features)?,
            _ => g.input(Tensor::zeros(vec![1, self.config.d_model])),
        };
        let cat = g.concat(&[global_term, pooled], 1)?;
        self.fuse.forward(g, store, cat)
    }

    /// `[M₀ × 3]` seed coordinates bounded to `[−2, 2]³`.
    pub fn generate_seeds(&self, g: &mut Graph, store: &ParamStore, global: Var) -> Result<Var> {
        let s = self.seed.forward(g, store, global)?;
        let s = g.tanh(s);
        let s = g.scale(s, SEED_BOUND);
        g.reshape(s, vec![self.config.seeds, 3])
    }

    /// One query per seed from the global feature and its coordinates.
    pub fn seed_queries(&self, g: &mut Graph, store: &ParamStore, global: Var, seeds: Var) -> Result<Var> {
        let m = g.shape(seeds)[0];
        let rep = g.gather(global, &vec![0; m])?;
        let cat = g.concat(&[rep, seeds], 1)?;
        self.query.forward(g, store, cat)
    }

    pub fn seed_set(&self, g: &mut Graph, store: &ParamStore, global: Var) -> Result<SeedSet> {
        let seeds = self.generate_seeds(g, store, global)?;
        let queries = self.seed_queries(g, store, global, seeds)?;
        Ok(SeedSet { seeds, queries })
    }

    /// Refinement rounds. Geometric branch: attention to the input cloud
    /// tokens whose anchors are nearest each seed, with keys and values
    /// offset by an embedding of `anchor − seed`. Semantic branch: attention
    /// to the gated reference tokens most cosine-similar to the query, with
    /// keys and values built from `F_ref − Q`.
    pub fn refer_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        set: SeedSet,
        input: &TokenSet,
        gated_ref: Option<&TokenSet>,
    ) -> Result<Var> {
        let anchors: Vec<Point3> = input.anchor_points();
        if anchors.len() != input.len() || anchors.is_empty() {
            return Err(Error::contract("refer_attend: input tokens must all carry anchors"));
        }
        let m = g.shape(set.seeds)[0];
        let seed_vals = g.value(set.seeds).clone();
        let k_geo = if self.config.progressive {
            self.config.k_geo.clamp(1, anchors.len())
        } else {
            anchors.len()
        };
        let tree = SpatialIndex::build(&anchors);
        let geo_idx: Vec<usize> = (0..m)
            .flat_map(|i| {
                let row = seed_vals.row(i);
                tree.knn(&[row[0], row[1], row[2]], k_geo).into_iter().map(|(j, _)| j)
            })
            .collect();
        let anchor_rows: Vec<f64> = geo_idx.iter().flat_map(|&j| anchors[j]).collect();
        let anchor_t = g.input(Tensor::new(vec![m * k_geo, 3], anchor_rows)?);
        let seed_rep = g.gather(set.seeds, &repeat_rows(m, k_geo))?;
        let rel = g.sub(anchor_t, seed_rep)?;
        let geo_feats = g.gather(input.features, &geo_idx)?;

        let mut q = set.queries;
        for round in &self.rounds {
            let r = round.rel.forward(g, store, rel)?;
            let kv = g.add(geo_feats, r)?;
            let geo = round.geo.forward(g, store, q, kv, k_geo)?;
            q = g.add(q, geo)?;
            if let Some(refs) = gated_ref.filter(|r| !r.is_empty()) {
                let k_sem = if self.config.progressive {
                    self.config.k_sem.clamp(1, refs.len())
                } else {
                    refs.len()
                };
                let idx = cosine_knn(g.value(q), g.value(refs.features), k_sem)?;
                let rf = g.gather(refs.features, &idx)?;
                let qr = g.gather(q, &repeat_rows(m, k_sem))?;
                let diff = g.sub(rf, qr)?;
                let sem = round.sem.forward(g, store, q, diff, k_sem)?;
                q = g.add(q, sem)?;
            }
            let h = round.ln.forward(g, store, q)?;
            let f = round.ffn.forward(g, store, h)?;
            q = g.add(q, f)?;
        }
        Ok(q)
    }

    /// Dense point `(i, j) = seed_i + H_i^j`, giving `M₀ · k` points.
    pub fn displace(&self, g: &mut Graph, store: &ParamStore, queries: Var, seeds: Var) -> Result<CompletionOutput> {
        let k = self.config.group;
        let m = g.shape(seeds)[0];
        let h = self.offsets.forward(g, store, queries)?;
        let h = g.reshape(h, vec![m * k, 3])?;
        let base = g.gather(seeds, &repeat_rows(m, k))?;
        let dense = g.add(base, h)?;
        Ok(CompletionOutput {
            dense,
            seeds,
            group: k,
        })
    }
}
