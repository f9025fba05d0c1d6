//! Encoders, condition and prior networks, and the two decoders.

use super::batch::{Batch, UPPER};
use super::{ModelConfig, ModelVariant};
use crate::graph::{EIGEN_DIM, MAX_AGENTS, MAX_NODES, MAX_STEPS};
use crate::prelude::*;
use crate::rng::SimRng;
use crate::tensor::{
    dropout, leaky, EdgeList, Embedding, GineLayer, Linear, Mode, ParamStore, Tape, Tensor,
    TensorError, Var,
};
use crate::textenc::EMBED_DIM;
use crate::vocab::{NUM_ACTIONS, NUM_LOCATIONS};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
/// Action logits followed by location logits.
pub const FEATURE_LOGITS: usize = NUM_ACTIONS + NUM_LOCATIONS;
const AGENT_TABLE_DIM: usize = 32;

/// Mean and clamped log-variance, each `rows × latent`.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mean: Var,
    pub logvar: Var,
}

/// The five label embedding tables feeding an encoder.
#[derive(Clone, Copy, Debug)]
pub struct NodeEmbedder {
    pub action: Embedding,
    pub location: Embedding,
    pub agent: Embedding,
    pub step: Embedding,
    pub shared: Embedding,
}

impl NodeEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut SimRng) -> Self {
        Self {
            action: Embedding::new(store, &format!("{name}.action"), NUM_ACTIONS, 6, rng),
            location: Embedding::new(store, &format!("{name}.location"), NUM_LOCATIONS, 4, rng),
            agent: Embedding::new(store, &format!("{name}.agent"), MAX_AGENTS, 5, rng),
            step: Embedding::new(store, &format!("{name}.step"), MAX_STEPS, 4, rng),
            shared: Embedding::new(store, &format!("{name}.shared"), 2, 2, rng),
        }
    }

    /// Width of the concatenated embeddings (21).
    pub const WIDTH: usize = 6 + 4 + 5 + 4 + 2;

    /// `nodes × 25`: the embeddings followed by the eigenfeatures.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        b: &Batch,
    ) -> Result<Var, TensorError> {
        let parts = [
            self.action.forward(tape, store, b.actions.clone())?,
            self.location.forward(tape, store, b.locations.clone())?,
            self.agent.forward(tape, store, b.agents.clone())?,
            self.step.forward(tape, store, b.steps.clone())?,
            self.shared.forward(tape, store, b.shared.clone())?,
            tape.constant(b.eigen.clone()),
        ];
        Ok(tape.concat_cols(&parts))
    }
}

/// Posterior network `q(z | graph, C)`.
#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    pub embed: NodeEmbedder,
    pub gine: [GineLayer; 2],
    pub head: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SimRng) -> Self {
        let embed = NodeEmbedder::new(store, &format!("{name}.embed"), rng);
        let width = NodeEmbedder::WIDTH + EIGEN_DIM;
        let g0 = GineLayer::batch_mlp(
            store,
            &format!("{name}.gine0"),
            width,
            cfg.encoder_hidden,
            rng,
        );
        let g1 = GineLayer::batch_mlp(
            store,
            &format!("{name}.gine1"),
            cfg.encoder_hidden,
            cfg.encoder_hidden,
            rng,
        );
        let head = Linear::new(
            store,
            &format!("{name}.head"),
            cfg.encoder_hidden + cfg.condition_dim,
            2 * cfg.latent,
            rng,
        );
        Self {
            embed,
            gine: [g0, g1],
            head,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        b: &Batch,
        cond: Var,
        cfg: &ModelConfig,
        mode: Mode,
        rng: &mut SimRng,
    ) -> Result<Gaussian, TensorError> {
        let mut h = self.embed.forward(tape, store, b)?;
        for layer in &self.gine {
            h = layer.forward(tape, store, h, &b.edges, mode)?;
            h = dropout(tape, h, cfg.dropout, mode, rng);
        }
        let pooled = tape.segment_mean(h, b.segments.clone());
        let joined = tape.concat_cols(&[pooled, cond]);
        let out = self.head.forward(tape, store, joined);
        let out = leaky(tape, out);
        Ok(split_gaussian(tape, out, cfg.latent))
    }
}

fn split_gaussian(tape: &mut Tape, out: Var, latent: usize) -> Gaussian {
    let mean = tape.slice_cols(out, 0, latent);
    let raw = tape.slice_cols(out, latent, latent);
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Gaussian { mean, logvar }
}

/// `C = LeakyReLU(W_t · text + W_a · agent_table[k − 1])`.
#[derive(Clone, Copy, Debug)]
pub struct ConditionNet {
    pub text: Linear,
    pub agent_table: Embedding,
    pub agent: Linear,
}

impl ConditionNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SimRng) -> Self {
        Self {
            text: Linear::new(
                store,
                &format!("{name}.text"),
                EMBED_DIM,
                cfg.condition_dim,
                rng,
            ),
            agent_table: Embedding::new(
                store,
                &format!("{name}.agents"),
                MAX_AGENTS,
                AGENT_TABLE_DIM,
                rng,
            ),
            agent: Linear::new(
                store,
                &format!("{name}.agent"),
                AGENT_TABLE_DIM,
                cfg.condition_dim,
                rng,
            ),
        }
    }

    /// `text: rows × 384`, one agent index (`count − 1`) per row.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        text: &Tensor,
        agent_index: Rc<Vec<usize>>,
    ) -> Result<Var, TensorError> {
        let t = tape.constant(text.clone());
        let t = self.text.forward(tape, store, t);
        let a = self.agent_table.forward(tape, store, agent_index)?;
        let a = self.agent.forward(tape, store, a);
        let s = tape.add(t, a);
        Ok(leaky(tape, s))
    }
}

/// `p(z | C)`: two linear layers.
#[derive(Clone, Copy, Debug)]
pub struct PriorNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl PriorNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SimRng) -> Self {
        Self {
            hidden: Linear::new(
                store,
                &format!("{name}.l0"),
                cfg.condition_dim,
                cfg.prior_hidden,
                rng,
            ),
            out: Linear::new(
                store,
                &format!("{name}.l1"),
                cfg.prior_hidden,
                2 * cfg.latent,
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cond: Var,
        latent: usize,
    ) -> Gaussian {
        let h = self.hidden.forward(tape, store, cond);
        let h = leaky(tape, h);
        let out = self.out.forward(tape, store, h);
        split_gaussian(tape, out, latent)
    }
}

/// MLP from `(z, C)` to the 780 strict upper-triangle entries, tanh output.
#[derive(Clone, Copy, Debug)]
pub struct StructureDecoder {
    pub layers: [Linear; 3],
}

impl StructureDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SimRng) -> Self {
        let h = cfg.decoder_hidden;
        Self {
            layers: [
                Linear::new(
                    store,
                    &format!("{name}.l0"),
                    cfg.latent + cfg.condition_dim,
                    h,
                    rng,
                ),
                Linear::new(store, &format!("{name}.l1"), h, h, rng),
                Linear::new(store, &format!("{name}.l2"), h, UPPER, rng),
            ],
        }
    }

    /// `rows × 780` values in (−1, 1).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, cond: Var) -> Var {
        let mut h = tape.concat_cols(&[z, cond]);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            h = if i + 1 < self.layers.len() {
                leaky(tape, h)
            } else {
                tape.tanh(h)
            };
        }
        h
    }
}

/// Per-node `(z, C, eigenfeatures)` → linear → three GINE layers with
/// LayerNorm → 23 logits.
#[derive(Clone, Copy, Debug)]
pub struct FeatureDecoder {
    pub input: Linear,
    pub gine: [GineLayer; 3],
    pub out: Linear,
}

impl FeatureDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SimRng) -> Self {
        let h = cfg.decoder_hidden;
        let width = cfg.latent + cfg.condition_dim + EIGEN_DIM;
        Self {
            input: Linear::new(store, &format!("{name}.in"), width, h, rng),
            gine: [
                GineLayer::layer_mlp(store, &format!("{name}.gine0"), h, h, rng),
                GineLayer::layer_mlp(store, &format!("{name}.gine1"), h, h, rng),
                GineLayer::layer_mlp(store, &format!("{name}.gine2"), h, h, rng),
            ],
            out: Linear::new(store, &format!("{name}.out"), h, FEATURE_LOGITS, rng),
        }
    }

    /// `z`, `cond`: one row per graph; `node_graph` maps node rows to graphs.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        z: Var,
        cond: Var,
        node_graph: Rc<Vec<usize>>,
        eigen: &Tensor,
        edges: &Rc<EdgeList>,
    ) -> Result<Var, TensorError> {
        if node_graph.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let zn = tape.gather_rows(z, node_graph.clone())?;
        let cn = tape.gather_rows(cond, node_graph)?;
        let e = tape.constant(eigen.clone());
        let x = tape.concat_cols(&[zn, cn, e]);
        let mut h = self.input.forward(tape, store, x);
        for layer in &self.gine {
            h = layer.forward(tape, store, h, edges, Mode::Eval)?;
        }
        Ok(self.out.forward(tape, store, h))
    }
}

/// Encoder, condition net and prior of one latent space.
#[derive(Clone, Copy, Debug)]
pub struct LatentBranch {
    pub encoder: Encoder,
    pub condition: ConditionNet,
    pub prior: PriorNet,
}

impl LatentBranch {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut SimRng) -> Self {
        Self {
            encoder: Encoder::new(store, &format!("{name}.enc"), cfg, rng),
            condition: ConditionNet::new(store, &format!("{name}.cond"), cfg, rng),
            prior: PriorNet::new(store, &format!("{name}.prior"), cfg, rng),
        }
    }
}

/// The full model: latent branches plus both decoders, owning its parameters.
#[derive(Clone, Debug)]
pub struct CrowdVgae {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Structure branch; also the only branch of the single-latent variant.
    pub s: LatentBranch,
    /// Feature branch (dual variant only).
    pub f: Option<LatentBranch>,
    pub structure: StructureDecoder,
    pub features: FeatureDecoder,
}

/// Loss terms of one batch, each summed over the batch (not yet averaged).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub structure: Var,
    pub features: Var,
    pub kl_s: Var,
    /// Equal to `kl_s` in the single-latent variant, where it is counted once.
    pub kl_f: Option<Var>,
}

impl CrowdVgae {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = SimRng::split(seed, "model-init");
        let mut store = ParamStore::new();
        let s = LatentBranch::new(&mut store, "s", &config, &mut rng);
        let f = match config.variant {
            ModelVariant::Dual => Some(LatentBranch::new(&mut store, "f", &config, &mut rng)),
            ModelVariant::SingleLatent => None,
        };
        let structure = StructureDecoder::new(&mut store, "s.dec", &config, &mut rng);
        let features = FeatureDecoder::new(&mut store, "f.dec", &config, &mut rng);
        Self {
            config,
            store,
            s,
            f,
            structure,
            features,
        }
    }

    /// Condition vectors for the structure and feature branches.
    pub fn conditions(
        &self,
        tape: &mut Tape,
        text: &Tensor,
        agent_index: Rc<Vec<usize>>,
    ) -> Result<(Var, Var), TensorError> {
        let cs = self
            .s
            .condition
            .forward(tape, &self.store, text, agent_index.clone())?;
        let cf = match &self.f {
            Some(f) => f.condition.forward(tape, &self.store, text, agent_index)?,
            None => cs,
        };
        Ok((cs, cf))
    }

    /// Reconstruction and KL terms on a batch. `sample` draws posterior
    /// noise; otherwise the posterior mean is decoded.
    pub fn losses(
        &mut self,
        tape: &mut Tape,
        b: &Batch,
        mode: Mode,
        sample: bool,
        rng: &mut SimRng,
    ) -> Result<LossVars, TensorError> {
        let cfg = self.config.clone();
        let (cs, cf) = self.conditions(tape, &b.text, b.agent_index.clone())?;
        let s = self.s;
        let q_s = s
            .encoder
            .forward(tape, &mut self.store, b, cs, &cfg, mode, rng)?;
        let p_s = s.prior.forward(tape, &self.store, cs, cfg.latent);
        let z_s = self.latent(tape, q_s, sample, rng);
        let kl_s = tape.gaussian_kl(q_s.mean, q_s.logvar, p_s.mean, p_s.logvar);
        let (z_f, kl_f) = match self.f {
            Some(f) => {
                let q_f = f
                    .encoder
                    .forward(tape, &mut self.store, b, cf, &cfg, mode, rng)?;
                let p_f = f.prior.forward(tape, &self.store, cf, cfg.latent);
                let z_f = self.latent(tape, q_f, sample, rng);
                (
                    z_f,
                    Some(tape.gaussian_kl(q_f.mean, q_f.logvar, p_f.mean, p_f.logvar)),
                )
            }
            None => (z_s, None),
        };
        let adj = self.structure.forward(tape, &self.store, z_s, cs);
        // the upper triangle counted twice equals the full symmetric sum
        let half = tape.smooth_l1_sum(adj, b.adjacency_upper.clone());
        let structure = tape.scale(half, 2.0);
        let logits = self.features.forward(
            tape,
            &mut self.store,
            z_f,
            cf,
            b.node_graph.clone(),
            &b.eigen,
            &b.edges,
        )?;
        let ce_a = tape.cross_entropy_sum(logits, 0, NUM_ACTIONS, b.actions.clone());
        let ce_l = tape.cross_entropy_sum(logits, NUM_ACTIONS, NUM_LOCATIONS, b.locations.clone());
        let features = tape.add(ce_a, ce_l);
        Ok(LossVars {
            structure,
            features,
            kl_s,
            kl_f,
        })
    }

    fn latent(&self, tape: &mut Tape, q: Gaussian, sample: bool, rng: &mut SimRng) -> Var {
        if !sample {
            return q.mean;
        }
        let (r, c) = tape.shape(q.mean);
        let eps = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect());
        tape.reparameterize(q.mean, q.logvar, eps)
    }

    /// Prior draws `(z_s, z_f)` for each row of the conditions.
    pub fn sample_prior(&self, tape: &mut Tape, cs: Var, cf: Var, rng: &mut SimRng) -> (Var, Var) {
        let latent = self.config.latent;
        let p_s = self.s.prior.forward(tape, &self.store, cs, latent);
        let z_s = self.latent(tape, p_s, true, rng);
        let z_f = match &self.f {
            Some(f) => {
                let p_f = f.prior.forward(tape, &self.store, cf, latent);
                self.latent(tape, p_f, true, rng)
            }
            None => z_s,
        };
        (z_s, z_f)
    }

    /// Symmetric `40 × 40` matrix with zero diagonal from one row of upper-triangle values.
    pub fn full_adjacency(upper: &[f64]) -> Tensor {
        let mut m = Tensor::zeros(MAX_NODES, MAX_NODES);
        let mut k = 0;
        for i in 0..MAX_NODES {
            for j in i + 1..MAX_NODES {
                m.set(i, j, upper[k]);
                m.set(j, i, upper[k]);
                k += 1;
            }
        }
        m
    }

    pub fn decode_structure(&self, tape: &mut Tape, z_s: Var, cs: Var) -> Var {
        self.structure.forward(tape, &self.store, z_s, cs)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode_features(
        &mut self,
        tape: &mut Tape,
        z_f: Var,
        cf: Var,
        node_graph: Rc<Vec<usize>>,
        eigen: &Tensor,
        edges: &Rc<EdgeList>,
    ) -> Result<Var, TensorError> {
        let features = self.features;
        features.forward(tape, &mut self.store, z_f, cf, node_graph, eigen, edges)
    }
}
