//! The full completion network: encoder, gates and decoder over one sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::decoder::{CompletionOutput, Decoder, DecoderConfig};
use crate::encoder::{
    fuse_modalities, image_patches, proxy_geometry, Encoder, EncoderConfig, Modality, ProxyGeometry,
    TokenSet,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::objectives::{cloud_of, ft_loss, output_loss, seed_loss, total_loss, LossBreakdown, LossWeights};
use crate::tensor::{Checkpoint, Graph, ParamStore, Tensor, Var};

/// Architecture, ablation switches and loss weights. Serialized into every
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_global: usize,
    pub blocks: usize,
    pub heads: usize,
    pub input_proxies: usize,
    pub ref_proxies: usize,
    pub radius: f64,
    pub max_k: usize,
    pub seeds: usize,
    pub group: usize,
    pub rounds: usize,
    pub k_geo: usize,
    pub k_sem: usize,
    pub gate_neighbors: usize,
    pub image_res: usize,
    pub patch: usize,
    pub use_pos_input: bool,
    pub use_sacg: bool,
    pub progressive_decode: bool,
    pub use_reference: bool,
    pub use_image: bool,
    /// Take the first global term from the reference tokens instead of the
    /// input tokens.
    pub global_from_reference: bool,
    /// Include the (gated reference, encoded input) pair in the
    /// feature-transfer term.
    pub ft_reference_pair: bool,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_global: 128,
            blocks: 4,
            heads: 4,
            input_proxies: 64,
            ref_proxies: 64,
            radius: 0.2,
            max_k: 16,
            seeds: 512,
            group: 4,
            rounds: 2,
            k_geo: 8,
            k_sem: 8,
            gate_neighbors: 4,
            image_res: 32,
            patch: 8,
            use_pos_input: true,
            use_sacg: true,
            progressive_decode: true,
            use_reference: true,
            use_image: true,
            global_from_reference: false,
            ft_reference_pair: true,
            weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    /// Dense output size `M = M₀ · k`.
    pub fn output_points(&self) -> usize {
        self.seeds * self.group
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_global", self.d_global),
            ("heads", self.heads),
            ("input_proxies", self.input_proxies),
            ("ref_proxies", self.ref_proxies),
            ("max_k", self.max_k),
            ("seeds", self.seeds),
            ("group", self.group),
            ("k_geo", self.k_geo),
            ("k_sem", self.k_sem),
            ("gate_neighbors", self.gate_neighbors),
            ("image_res", self.image_res),
            ("patch", self.patch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.image_res % self.patch != 0 {
            return Err(Error::Config(format!(
                "image_res {} is not divisible by patch {}",
                self.image_res, self.patch
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("radius must be positive".into()));
        }
        Ok(())
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            d_global: self.d_global,
            blocks: self.blocks,
            heads: self.heads,
            patch: self.patch,
            image_channels: 1,
            gate_neighbors: self.gate_neighbors,
        }
    }

    fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            d_global: self.d_global,
            seeds: self.seeds,
            group: self.group,
            rounds: self.rounds,
            k_geo: self.k_geo,
            k_sem: self.k_sem,
            progressive: self.progressive_decode,
        }
    }
}

/// Raw inputs of one completion.
#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a> {
    pub partial: &'a PointCloud,
    pub image: Option<&'a Raster>,
    pub reference: Option<&'a PointCloud>,
}

/// Parameter-free preprocessing of a sample, reusable across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub input: ProxyGeometry,
    pub reference: Option<ProxyGeometry>,
    pub patches: Option<Tensor>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: CompletionOutput,
    pub input_tokens: TokenSet,
    pub image_tokens: Option<TokenSet>,
    pub reference_tokens: Option<TokenSet>,
    pub gated_reference: Option<TokenSet>,
    pub similarity: Option<Var>,
    pub gates: Option<Var>,
    pub global: Var,
    /// `(F_in, F_out)` pairs of the feature-transfer term, in summation order.
    pub ft_pairs: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub dense: PointCloud,
    pub seeds: PointCloud,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder(), &mut rng)?;
        let decoder = Decoder::new(&mut store, config.decoder(), &mut rng)?;
        Ok(Network {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn prepare(&self, sample: SampleInput<'_>) -> Result<Prepared> {
        let c = &self.config;
        let n = sample.partial.len();
        let input = proxy_geometry(sample.partial, c.input_proxies.min(n), c.radius, c.max_k)?;
        let reference = match sample.reference.filter(|_| c.use_reference) {
            Some(r) => Some(proxy_geometry(r, c.ref_proxies.min(r.len()), c.radius, c.max_k)?),
            None => None,
        };
        let patches = match sample.image.filter(|_| c.use_image) {
            Some(img) => Some(image_patches(img, c.patch)?),
            None => None,
        };
        Ok(Prepared {
            input,
            reference,
            patches,
        })
    }

    pub fn forward(&self, g: &mut Graph, prep: &Prepared) -> Result<Forward> {
        let (enc, dec, c, st) = (&self.encoder, &self.decoder, &self.config, &self.store);
        let pc_in = enc.proxy_encode(g, st, &prep.input, Modality::Input)?;
        let pc_out = enc.shared_encode(g, st, &pc_in, c.use_pos_input)?;
        let mut ft_pairs = Vec::new();

        let image = match &prep.patches {
            Some(p) => {
                let img_in = enc.patch_encode(g, st, p)?;
                let img_out = enc.shared_encode(g, st, &img_in, false)?;
                ft_pairs.push((img_in.features, pc_out.features));
                ft_pairs.push((pc_in.features, img_out.features));
                Some(img_out)
            }
            None => None,
        };
        ft_pairs.push((pc_in.features, pc_out.features));
        let fused = fuse_modalities(g, image.as_ref(), &pc_out)?;
        let gp = enc.global_pool(g, st, &fused)?;

        let (mut similarity, mut gates, mut ref_out, mut gated) = (None, None, None, None);
        if let Some(geo) = &prep.reference {
            let r_in = enc.proxy_encode(g, st, geo, Modality::Reference)?;
            let r_out = enc.shared_encode(g, st, &r_in, false)?;
            let gr = if c.use_sacg {
                let s = enc.similarity_gate(g, st, &r_out, &fused)?;
                let cg = enc.absence_gate(g, st, s, &r_out, gp)?;
                similarity = Some(s);
                gates = Some(cg);
                enc.reconstruct_reference(g, &r_out, cg)?
            } else {
                r_out.clone()
            };
            if c.ft_reference_pair {
                ft_pairs.push((gr.features, pc_out.features));
            }
            ref_out = Some(r_out);
            gated = Some(gr);
        }

        let global_term = match (&ref_out, c.global_from_reference) {
            (Some(r), true) => enc.global_pool(g, st, r)?,
            _ => gp,
        };
        let global = dec.fuse_global(g, st, global_term, gated.as_ref())?;
        let set = dec.seed_set(g, st, global)?;
        let q = dec.refer_attend(g, st, set, &pc_out, gated.as_ref())?;
        let output = dec.displace(g, st, q, set.seeds)?;
        Ok(Forward {
            output,
            input_tokens: pc_out,
            image_tokens: image,
            reference_tokens: ref_out,
            gated_reference: gated,
            similarity,
            gates,
            global,
            ft_pairs,
        })
    }

    /// Weighted `seed + output + ft` loss against a ground-truth cloud.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, gt: &PointCloud) -> Result<(Var, LossBreakdown)> {
        let seed = seed_loss(g, fwd.output.seeds, gt)?;
        let out = output_loss(g, fwd.output.dense, gt)?;
        let mut ft = None;
        for &(a, b) in &fwd.ft_pairs {
            let l = ft_loss(g, a, b)?;
            ft = Some(match ft {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let ft = ft.unwrap_or_else(|| g.input(Tensor::scalar(0.0)));
        total_loss(g, seed, out, ft, &self.config.weights)
    }

    /// Inference: dense cloud and seeds.
    pub fn complete(&self, prep: &Prepared) -> Result<Completion> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, prep)?;
        Ok(Completion {
            dense: cloud_of(g.value(fwd.output.dense)),
            seeds: cloud_of(g.value(fwd.output.seeds)),
        })
    }

    pub const CONFIG_KEY: &'static str = "model_config";

    /// Parameters plus the serialized model config.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: vec![(
                Self::CONFIG_KEY.to_string(),
                serde_json::to_string(&self.config).expect("config serializes"),
            )],
            tensors: self.store.named(),
        }
    }

    /// Rebuilds a network from a checkpoint. When `expected` is given, the
    /// stored config must match it exactly.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let raw = ck
            .meta(Self::CONFIG_KEY)
            .ok_or_else(|| Error::Incompatible("checkpoint has no model config".into()))?;
        let config: ModelConfig = serde_json::from_str(raw)
            .map_err(|e| Error::Incompatible(format!("unreadable model config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Incompatible(format!(
                    "checkpoint model config differs from the requested one: {}",
                    describe_diff(&config, exp)
                )));
            }
        }
        let mut net = Network::new(config, 0)?;
        net.store.load_named(&ck.tensors)?;
        Ok(net)
    }
}

fn describe_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (va, vb) = (
        serde_json::to_value(a).expect("serializes"),
        serde_json::to_value(b).expect("serializes"),
    );
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return String::new();
    };
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", mb[k]))
        .collect::<Vec<_>>()
        .join("; ")
}
