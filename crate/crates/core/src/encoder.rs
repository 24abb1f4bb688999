//! Shared structural feature encoder and the reference gates.
//!
//! All three streams (depth image, input cloud, reference cloud) are turned
//! into token sets and pushed through the same attention blocks. Only the
//! input cloud receives a positional term.

use rand::Rng;

use crate::data::Raster;
use crate::error::{Error, Result};
use crate::geometry::{ball_query, fps, sub, Point3, PointCloud, SpatialIndex};
use crate::tensor::nn::{LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Input,
    Reference,
}

/// Token features with per-token anchors (cloud tokens only) and modality.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub features: Var,
    pub anchors: Vec<Option<Point3>>,
    pub modality: Vec<Modality>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    /// Same tokens with new features (anchors and tags kept).
    pub fn with_features(&self, features: Var) -> TokenSet {
        TokenSet {
            features,
            anchors: self.anchors.clone(),
            modality: self.modality.clone(),
        }
    }

    pub fn anchor_points(&self) -> Vec<Point3> {
        self.anchors.iter().flatten().copied().collect()
    }
}

/// Parameter-free grouping of a cloud into proxies: FPS centers, ball-query
/// neighborhoods and the edge inputs fed to the edge perceptron.
///
/// Each neighbor row is `[mean offset of the group (3), neighbor − center (3)]`
/// so nothing depends on absolute position.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyGeometry {
    pub anchors: Vec<Point3>,
    pub edges: Tensor,
    pub segments: Vec<(usize, usize)>,
}

pub fn proxy_geometry(cloud: &PointCloud, m: usize, radius: f64, max_k: usize) -> Result<ProxyGeometry> {
    cloud.require_nonempty("proxy_encode")?;
    let centers = fps(cloud, m, 0)?;
    let index = SpatialIndex::build(&cloud.points);
    let mut rows = Vec::new();
    let mut segments = Vec::with_capacity(m);
    let mut anchors = Vec::with_capacity(m);
    for &c in &centers {
        let center = cloud.points[c];
        let group = ball_query(&index, &center, radius, max_k)?;
        let offsets: Vec<Point3> = group.iter().map(|&i| sub(&cloud.points[i], &center)).collect();
        let mut mean = [0.0; 3];
        for o in &offsets {
            (0..3).for_each(|a| mean[a] += o[a]);
        }
        mean.iter_mut().for_each(|v| *v /= offsets.len() as f64);
        segments.push((rows.len() / 6, offsets.len()));
        for o in &offsets {
            rows.extend_from_slice(&mean);
            rows.extend_from_slice(o);
        }
        anchors.push(center);
    }
    let n = rows.len() / 6;
    Ok(ProxyGeometry {
        anchors,
        edges: Tensor::new(vec![n, 6], rows)?,
        segments,
    })
}

/// Flattens non-overlapping `patch × patch` tiles of a raster into rows,
/// tile-major in reading order.
pub fn image_patches(image: &Raster, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::contract(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let (ph, pw) = (image.height / patch, image.width / patch);
    let c = image.channels;
    let mut data = Vec::with_capacity(image.data.len());
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        data.push(image.at(py * patch + y, px * patch + x, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, patch * patch * c], data)
}

/// For each row of `a`, the `k` rows of `b` with the highest cosine
/// similarity, most similar first (ties to the lower index). Returned
/// flattened, `k` entries per row of `a`.
pub fn cosine_knn(a: &Tensor, b: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (na, d) = a.dims2()?;
    let (nb, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::Shape {
            op: "cosine_knn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let bn: Vec<f64> = (0..nb).map(|j| norm(b.row(j))).collect();
    let mut out = Vec::with_capacity(na * k);
    let mut sims = Vec::with_capacity(nb);
    for i in 0..na {
        let ar = a.row(i);
        let an = norm(ar);
        sims.clear();
        for j in 0..nb {
            let dot: f64 = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            sims.push((dot / (an * bn[j]), j));
        }
        sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        out.extend(sims.iter().take(k).map(|&(_, j)| j));
    }
    Ok(out)
}

/// Column-wise maximum over all rows, kept as a `[1 × D]` matrix.
pub fn pool_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let rows = g.value(x).dims2()?.0;
    g.segment_max(x, &[(0, rows)])
}

/// Token-axis concatenation of an optional image set and a cloud set.
pub fn fuse_modalities(g: &mut Graph, img: Option<&TokenSet>, pc: &TokenSet) -> Result<TokenSet> {
    let Some(img) = img else {
        return Ok(pc.clone());
    };
    let (di, dp) = (g.shape(img.features)[1], g.shape(pc.features)[1]);
    if di != dp {
        return Err(Error::contract(format!(
            "cannot fuse image tokens of width {di} with cloud tokens of width {dp}"
        )));
    }
    let features = g.concat(&[img.features, pc.features], 0)?;
    let mut anchors = img.anchors.clone();
    anchors.extend_from_slice(&pc.anchors);
    let mut modality = img.modality.clone();
    modality.extend_from_slice(&pc.modality);
    Ok(TokenSet {
        features,
        anchors,
        modality,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_global: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_channels: usize,
    pub gate_neighbors: usize,
}

/// Pre-norm multi-head self-attention followed by a feed-forward layer.
#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::unbiased(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::scaled(store, &format!("{name}.o"), d, d, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), (d, 2 * d, d), rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, heads: usize) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / heads;
        let h = self.ln1.forward(g, store, x)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, h)?;
        let v = self.wv.forward(g, store, h)?;
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = g.slice_cols(q, i * dh, dh)?;
            let kh = g.slice_cols(k, i * dh, dh)?;
            let vh = g.slice_cols(v, i * dh, dh)?;
            let s = g.matmul_t(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        let o = self.wo.forward(g, store, cat)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Encoder weights. One instance serves every stream.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: Linear,
    pub edge: Mlp,
    pub pos: Mlp,
    blocks: Vec<Block>,
    pub similarity: Mlp,
    pub global: Linear,
    pub absence: Mlp,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.d_model;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by heads {}",
                config.heads
            )));
        }
        let patch_in = config.patch * config.patch * config.image_channels;
        Ok(Encoder {
            config,
            patch: Linear::new(store, "enc.patch", patch_in, d, rng),
            edge: Mlp::new(store, "enc.edge", (6, d, d), rng),
            pos: Mlp::new(store, "enc.pos", (3, d, d), rng),
            blocks: (0..config.blocks)
                .map(|i| Block::new(store, &format!("enc.block{i}"), d, rng))
                .collect(),
            similarity: Mlp::new(store, "gate.similarity", (d, d, d), rng),
            global: Linear::new(store, "gate.global", d, config.d_global, rng),
            absence: Mlp::new(store, "gate.absence", (d + config.d_global, d, d), rng),
        })
    }

    /// One token per image patch via a shared linear map of the patch pixels.
    pub fn patch_encode(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor) -> Result<TokenSet> {
        let x = g.input(patches.clone());
        let features = self.patch.forward(g, store, x)?;
        let t = patches.shape()[0];
        Ok(TokenSet {
            features,
            anchors: vec![None; t],
            modality: vec![Modality::Image; t],
        })
    }

    /// Edge perceptron over every (center, neighbor) pair, max over each
    /// neighborhood.
    pub fn proxy_encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geo: &ProxyGeometry,
        modality: Modality,
    ) -> Result<TokenSet> {
        let x = g.input(geo.edges.clone());
        let e = self.edge.forward(g, store, x)?;
        let features = g.segment_max(e, &geo.segments)?;
        Ok(TokenSet {
            features,
            anchors: geo.anchors.iter().map(|&a| Some(a)).collect(),
            modality: vec![modality; geo.anchors.len()],
        })
    }

    /// The shared attention stack. With `use_pos`, a perceptron of the anchor
    /// coordinates is added first; image tokens get no positional term.
    pub fn shared_encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &TokenSet,
        use_pos: bool,
    ) -> Result<TokenSet> {
        let d = g.shape(tokens.features)[1];
        if d != self.config.d_model {
            return Err(Error::contract(format!(
                "token width {d} differs from encoder width {}",
                self.config.d_model
            )));
        }
        let mut x = tokens.features;
        if use_pos {
            let coords: Vec<f64> = tokens
                .anchors
                .iter()
                .flat_map(|a| a.unwrap_or([0.0; 3]))
                .collect();
            let mask: Vec<f64> = tokens
                .anchors
                .iter()
                .flat_map(|a| std::iter::repeat_n(if a.is_some() { 1.0 } else { 0.0 }, d))
                .collect();
            let c = g.input(Tensor::new(vec![tokens.len(), 3], coords)?);
            let p = self.pos.forward(g, store, c)?;
            let m = g.input(Tensor::new(vec![tokens.len(), d], mask)?);
            let p = g.mul(p, m)?;
            x = g.add(x, p)?;
        }
        for b in &self.blocks {
            x = b.forward(g, store, x, self.config.heads)?;
        }
        Ok(tokens.with_features(x))
    }

    /// `S = σ(MLP(F_ref[i] − mean of its nearest input tokens))`, neighbors
    /// chosen by cosine similarity of the encoded features.
    pub fn similarity_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reference: &TokenSet,
        input: &TokenSet,
    ) -> Result<Var> {
        let k = self.config.gate_neighbors.min(input.len()).max(1);
        let idx = cosine_knn(g.value(reference.features), g.value(input.features), k)?;
        let neigh = g.gather(input.features, &idx)?;
        let w = g.input(Tensor::full(vec![reference.len(), k], 1.0 / k as f64));
        let mean = g.group_weighted_sum(w, neigh, k)?;
        let delta = g.sub(reference.features, mean)?;
        let s = self.similarity.forward(g, store, delta)?;
        Ok(g.sigmoid(s))
    }

    /// Up-projection followed by a max over tokens, `[1 × d_global]`.
    pub fn global_pool(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSet) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("global_pool: empty token set"));
        }
        let up = self.global.forward(g, store, tokens.features)?;
        pool_rows(g, up)
    }

    /// `C = σ(MLP([S ⊙ F_ref, G_p]))`, one row per reference token.
    pub fn absence_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        similarity: Var,
        reference: &TokenSet,
        global: Var,
    ) -> Result<Var> {
        let scaled = g.mul(similarity, reference.features)?;
        let gp = g.gather(global, &vec![0; reference.len()])?;
        let cat = g.concat(&[scaled, gp], 1)?;
        let c = self.absence.forward(g, store, cat)?;
        Ok(g.sigmoid(c))
    }

    pub fn reconstruct_reference(&self, g: &mut Graph, reference: &TokenSet, gates: Var) -> Result<TokenSet> {
        let f = g.mul(gates, reference.features)?;
        Ok(reference.with_features(f))
    }
}
