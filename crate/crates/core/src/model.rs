//! Dual-channel fusion model: a GraphSAGE channel over topology and bus
//! data, an MLP channel over system-level data, a dense fusion head that
//! emits six preliminary indicators, and a small graph network that
//! corrects predictions failing the constraint gate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asfr::{asfr_predict, AggregatedParams, AsfrError};
use crate::constraints::{gate_residuals, kc_residuals_with, ConstraintContext, ConstraintResiduals, Gate, KcWeights};
use crate::dataset::{SampleInput, GLOBAL_FEATURES, NODE_FEATURES};
use crate::grid::AdjacencyMatrix;
use crate::nn::{
    run_layers, seeded_rng, Activation, GraphBatch, Layer, LayerKind, LayerSpec, NnError, ParamStore, Standardizer,
    Tape, Tensor, Var,
};
use crate::sim::FrequencyMetrics;

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
pub const OUTPUTS: usize = 6;

/// Constraint couplings between outputs, as index pairs in output order
/// (rocof_max, f_nadir, t_nadir, f_ss, dp0_syn, dpinf_syn).
pub const CN_EDGES: [(usize, usize); 5] = [(0, 4), (0, 1), (1, 2), (0, 2), (3, 5)];
const CN_FEATURES: usize = 1 + OUTPUTS + 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input was not normalized with this model's statistics")]
    UnnormalizedInput,
    #[error("the constraint corrector has not been trained")]
    UntrainedCorrector,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("knowledge: {0}")]
    Asfr(#[from] AsfrError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over nodes; works for any grid size.
    Mean,
    /// Row-major concatenation of all node embeddings; fixed grid size.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gcn_widths: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    pub head_hidden: usize,
    pub cn_hidden: usize,
    pub activation: Activation,
    pub pooling: Pooling,
    /// Node count, only used by [`Pooling::Flatten`].
    pub n_nodes: usize,
    /// Append the closed-form six-vector to the global features.
    pub kd_inputs: bool,
    /// Predict the residual to the closed form instead of the indicators.
    pub kd_residual: bool,
    /// Outputs taken verbatim from the closed form.
    pub kd_override: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gcn_widths: vec![32, 32],
            mlp_widths: vec![64, 64, 32],
            head_hidden: 32,
            cn_hidden: 16,
            activation: Activation::Tanh,
            pooling: Pooling::Mean,
            n_nodes: 0,
            kd_inputs: false,
            kd_residual: false,
            kd_override: Vec::new(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn global_dim(&self) -> usize {
        GLOBAL_FEATURES + if self.kd_inputs { OUTPUTS } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.gcn_widths.is_empty() || self.mlp_widths.is_empty() {
            return Err(ModelError::InvalidConfig("both channels need at least one layer".into()));
        }
        if self.pooling == Pooling::Flatten && self.n_nodes == 0 {
            return Err(ModelError::InvalidConfig("flatten pooling needs n_nodes".into()));
        }
        if self.kd_override.iter().any(|&o| o >= OUTPUTS) {
            return Err(ModelError::InvalidConfig("kd_override index out of range".into()));
        }
        Ok(())
    }
}

/// Trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    GcnChannel,
    MlpChannel,
    FusionHead,
    /// Temporary head used while pretraining the MLP channel alone.
    PretrainHead,
    CnCorrector,
}

impl Channel {
    pub const ALL: [Channel; 5] =
        [Self::GcnChannel, Self::MlpChannel, Self::FusionHead, Self::PretrainHead, Self::CnCorrector];
}

/// Per-feature standardisation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub node: Standardizer,
    pub global: Standardizer,
    pub output: Standardizer,
    /// (h_syn, d_eq_syn) of the constraint context.
    pub ctx: Standardizer,
}

impl NormStats {
    pub fn fingerprint(&self) -> String {
        [&self.node, &self.global, &self.output, &self.ctx].iter().map(|s| s.fingerprint()).collect::<Vec<_>>().join("")
    }
}

/// A sample standardised with a specific model's statistics.
#[derive(Debug, Clone)]
pub struct NormalizedSample {
    pub node: Vec<f64>,
    pub n_nodes: usize,
    pub global: Vec<f64>,
    pub neighbors: Arc<Vec<Vec<usize>>>,
    pub ctx: ConstraintContext,
    /// Closed-form prediction, present when the model uses it.
    pub kd: Option<[f64; OUTPUTS]>,
    pub fingerprint: String,
}

/// Closed-form prediction from a sample's global features.
pub fn kd_predict(sample: &SampleInput) -> Result<FrequencyMetrics> {
    let g = &sample.global_features;
    let agg = AggregatedParams::new(g[1], g[2], g[3], g[4], g[5], g[6])?;
    Ok(asfr_predict(&agg, g[8], sample.ctx.f_n)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub gcn: Vec<Layer>,
    pub mlp: Vec<Layer>,
    pub head: Vec<Layer>,
    pub pretrain_head: Vec<Layer>,
    pub cn: Vec<Layer>,
    pub norm: Option<NormStats>,
    /// Output scale used while pretraining on knowledge labels.
    pub knowledge_scale: Option<Standardizer>,
    pub cn_trained: bool,
    pub kc_weights: KcWeights,
}

fn stack(
    kind: LayerKind,
    name: &str,
    input: usize,
    widths: &[usize],
    act: Activation,
    last_act: Activation,
    store: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut d = input;
    for (i, &w) in widths.iter().enumerate() {
        let activation = if i + 1 == widths.len() { last_act } else { act };
        let spec = LayerSpec { kind, in_dim: d, out_dim: w, activation };
        layers.push(Layer::new(spec, &format!("{name}.{i}"), store, rng)?);
        d = w;
    }
    Ok(layers)
}

fn ids(layers: &[Layer]) -> Vec<usize> {
    layers.iter().flat_map(|l| l.params).collect()
}

impl FusionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed, 0);
        let mut store = ParamStore::default();
        let act = config.activation;
        let gcn = stack(LayerKind::Graphsage, "gcn", NODE_FEATURES, &config.gcn_widths, act, act, &mut store, &mut rng)?;
        let mlp = stack(LayerKind::Dense, "mlp", config.global_dim(), &config.mlp_widths, act, act, &mut store, &mut rng)?;
        let g_out = *config.gcn_widths.last().expect("validated");
        let m_out = *config.mlp_widths.last().expect("validated");
        let pooled = match config.pooling {
            Pooling::Mean => g_out,
            Pooling::Flatten => g_out * config.n_nodes,
        };
        let widths = [config.head_hidden, OUTPUTS];
        let head = stack(LayerKind::Dense, "head", pooled + m_out, &widths, act, Activation::Identity, &mut store, &mut rng)?;
        let pretrain_head =
            stack(LayerKind::Dense, "pretrain_head", m_out, &widths, act, Activation::Identity, &mut store, &mut rng)?;
        let cn = stack(
            LayerKind::Graphsage,
            "cn",
            CN_FEATURES,
            &[config.cn_hidden, 1],
            act,
            Activation::Identity,
            &mut store,
            &mut rng,
        )?;
        let mut model = Self {
            config,
            store,
            gcn,
            mlp,
            head,
            pretrain_head,
            cn,
            norm: None,
            knowledge_scale: None,
            cn_trained: false,
            kc_weights: KcWeights::default(),
        };
        // The corrector starts as the identity map.
        let last = model.cn.last().expect("two layers").params;
        for p in last {
            model.store.params[p].value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(model)
    }

    pub fn channel_params(&self, c: Channel) -> Vec<usize> {
        match c {
            Channel::GcnChannel => ids(&self.gcn),
            Channel::MlpChannel => ids(&self.mlp),
            Channel::FusionHead => ids(&self.head),
            Channel::PretrainHead => ids(&self.pretrain_head),
            Channel::CnCorrector => ids(&self.cn),
        }
    }

    pub fn channel_hash(&self, c: Channel) -> String {
        self.store.hash(self.channel_params(c))
    }

    /// Parameter mask for the given trainable channels.
    pub fn trainable_mask(&self, channels: &[Channel]) -> Vec<bool> {
        let mut mask = vec![false; self.store.len()];
        for c in channels {
            for p in self.channel_params(*c) {
                mask[p] = true;
            }
        }
        mask
    }

    /// Fits input, output and context statistics on training samples.
    pub fn fit_normalization(&mut self, samples: &[&SampleInput], labels: &[FrequencyMetrics]) -> Result<()> {
        if samples.is_empty() || samples.len() != labels.len() {
            return Err(ModelError::ShapeMismatch("normalization needs matching, non-empty samples and labels".into()));
        }
        let node_rows: Vec<Vec<f64>> =
            samples.iter().flat_map(|s| s.node_features.iter().map(|r| r.to_vec())).collect();
        let global_rows: Vec<Vec<f64>> = samples.iter().map(|s| self.raw_global(s)).collect::<Result<_>>()?;
        let out_rows: Vec<Vec<f64>> = labels.iter().map(|l| l.to_array().to_vec()).collect();
        let ctx_rows: Vec<Vec<f64>> = samples.iter().map(|s| vec![s.ctx.h_syn, s.ctx.d_eq_syn]).collect();
        self.norm = Some(NormStats {
            node: Standardizer::fit(&node_rows),
            global: Standardizer::fit(&global_rows),
            output: Standardizer::fit(&out_rows),
            ctx: Standardizer::fit(&ctx_rows),
        });
        Ok(())
    }

    pub fn norm(&self) -> Result<&NormStats> {
        self.norm.as_ref().ok_or(ModelError::UnnormalizedInput)
    }

    fn raw_global(&self, s: &SampleInput) -> Result<Vec<f64>> {
        let mut g = s.global_features.to_vec();
        if self.config.kd_inputs {
            g.extend(kd_predict(s)?.to_array());
        }
        Ok(g)
    }

    pub fn normalize(&self, s: &SampleInput) -> Result<NormalizedSample> {
        let norm = self.norm()?;
        if let Pooling::Flatten = self.config.pooling {
            if s.node_features.len() != self.config.n_nodes {
                return Err(ModelError::ShapeMismatch("flatten pooling needs a fixed node count".into()));
            }
        }
        if s.adjacency.n() != s.node_features.len() {
            return Err(ModelError::ShapeMismatch("adjacency and node features disagree".into()));
        }
        let node = s.node_features.iter().flat_map(|r| norm.node.normalize(r)).collect();
        let needs_kd = self.config.kd_inputs || self.config.kd_residual || !self.config.kd_override.is_empty();
        Ok(NormalizedSample {
            node,
            n_nodes: s.node_features.len(),
            global: norm.global.normalize(&self.raw_global(s)?),
            neighbors: Arc::new(s.adjacency.neighbor_lists()),
            ctx: s.ctx,
            kd: if needs_kd { Some(kd_predict(s)?.to_array()) } else { None },
            fingerprint: norm.fingerprint(),
        })
    }

    /// Normalises a batch, sharing neighbour lists between samples that
    /// point at the same adjacency.
    pub fn normalize_all(&self, samples: &[&SampleInput]) -> Result<Vec<NormalizedSample>> {
        let mut cache: Vec<(*const AdjacencyMatrix, Arc<Vec<Vec<usize>>>)> = Vec::new();
        samples
            .iter()
            .map(|s| {
                let mut n = self.normalize(s)?;
                let key = Arc::as_ptr(&s.adjacency);
                match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, lists)) => n.neighbors = lists.clone(),
                    None => cache.push((key, n.neighbors.clone())),
                }
                Ok(n)
            })
            .collect()
    }

    fn check(&self, batch: &[&NormalizedSample]) -> Result<()> {
        let fp = self.norm()?.fingerprint();
        if batch.iter().any(|s| s.fingerprint != fp) {
            return Err(ModelError::UnnormalizedInput);
        }
        Ok(())
    }

    /// Records the main network on `tape`; returns the B×6 raw head output.
    pub fn record_preliminary(&self, tape: &mut Tape, batch: &[&NormalizedSample]) -> Result<Var> {
        self.check(batch)?;
        let b = batch.len();
        let graph = Arc::new(GraphBatch::stack(batch.iter().map(|s| s.neighbors.as_slice())));
        let rows = graph.rows();
        let mut node = Vec::with_capacity(rows * NODE_FEATURES);
        for s in batch {
            node.extend_from_slice(&s.node);
        }
        let x = tape.input(Tensor::new(vec![rows, NODE_FEATURES], node)?);
        let h = run_layers(&self.gcn, tape, &self.store, x, Some(&graph))?;
        let pooled = match self.config.pooling {
            Pooling::Mean => tape.segment_mean(h, &graph)?,
            Pooling::Flatten => {
                let w = tape.value(h).cols();
                tape.reshape(h, b, self.config.n_nodes * w)?
            }
        };
        let gdim = self.config.global_dim();
        let mut global = Vec::with_capacity(b * gdim);
        for s in batch {
            if s.global.len() != gdim {
                return Err(ModelError::ShapeMismatch(format!("{} global features, model takes {gdim}", s.global.len())));
            }
            global.extend_from_slice(&s.global);
        }
        let g = tape.input(Tensor::new(vec![b, gdim], global)?);
        let m = run_layers(&self.mlp, tape, &self.store, g, None)?;
        let cat = tape.concat_cols(pooled, m)?;
        Ok(run_layers(&self.head, tape, &self.store, cat, None)?)
    }

    /// MLP channel plus the temporary pretraining head.
    pub fn record_pretrain(&self, tape: &mut Tape, globals: Tensor) -> Result<Var> {
        let g = tape.input(globals);
        let m = run_layers(&self.mlp, tape, &self.store, g, None)?;
        Ok(run_layers(&self.pretrain_head, tape, &self.store, m, None)?)
    }

    /// Corrector graph: B×6 normalised predictions in, B×6 corrected out.
    pub fn record_cn(&self, tape: &mut Tape, prelim: Tensor, ctxs: &[ConstraintContext]) -> Result<Var> {
        let norm = self.norm()?;
        let b = prelim.rows();
        if prelim.cols() != OUTPUTS || ctxs.len() != b {
            return Err(ModelError::ShapeMismatch("corrector input must be B×6 with B contexts".into()));
        }
        let graph = Arc::new(GraphBatch::repeat(&cn_neighbors(), b));
        let mut feats = Vec::with_capacity(b * OUTPUTS * CN_FEATURES);
        for (i, ctx) in ctxs.iter().enumerate() {
            let c = norm.ctx.normalize(&[ctx.h_syn, ctx.d_eq_syn]);
            for o in 0..OUTPUTS {
                feats.push(prelim.get(i, o));
                feats.extend((0..OUTPUTS).map(|k| if k == o { 1.0 } else { 0.0 }));
                feats.extend_from_slice(&c);
            }
        }
        let x = tape.input(Tensor::new(vec![b * OUTPUTS, CN_FEATURES], feats)?);
        let corr = run_layers(&self.cn, tape, &self.store, x, Some(&graph))?;
        let corr = tape.reshape(corr, b, OUTPUTS)?;
        let base = tape.input(prelim);
        Ok(tape.add(base, corr)?)
    }

    /// Physical indicators from a row of raw head output.
    pub fn to_physical(&self, raw: &[f64], s: &NormalizedSample) -> Result<[f64; OUTPUTS]> {
        let norm = self.norm()?;
        let mut y = [0.0; OUTPUTS];
        if self.config.kd_residual {
            let kd = s.kd.ok_or(ModelError::UnnormalizedInput)?;
            for o in 0..OUTPUTS {
                y[o] = kd[o] + raw[o] * norm.output.std[o];
            }
        } else {
            y = norm.output.denormalize(raw);
        }
        for &o in &self.config.kd_override {
            y[o] = s.kd.ok_or(ModelError::UnnormalizedInput)?[o];
        }
        Ok(y)
    }

    /// Regression target of the head for a physical label.
    pub fn head_target(&self, label: &[f64; OUTPUTS], s: &NormalizedSample) -> Result<[f64; OUTPUTS]> {
        let norm = self.norm()?;
        let mut t = [0.0; OUTPUTS];
        if self.config.kd_residual {
            let kd = s.kd.ok_or(ModelError::UnnormalizedInput)?;
            for o in 0..OUTPUTS {
                t[o] = (label[o] - kd[o]) / norm.output.std[o];
            }
        } else {
            t.copy_from_slice(&norm.output.normalize(label));
        }
        Ok(t)
    }

    /// Head outputs that the loss should ignore (taken from the closed form).
    pub fn output_mask(&self) -> [f64; OUTPUTS] {
        let mut m = [1.0; OUTPUTS];
        for &o in &self.config.kd_override {
            m[o] = 0.0;
        }
        m
    }

    /// Raw head outputs (normalised units) for a batch, evaluated in chunks.
    pub fn raw_preliminary(&self, batch: &[&NormalizedSample]) -> Result<Vec<[f64; OUTPUTS]>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(256) {
            let mut tape = Tape::new();
            let v = self.record_preliminary(&mut tape, chunk)?;
            let t = tape.value(v);
            for i in 0..chunk.len() {
                let mut r = [0.0; OUTPUTS];
                r.copy_from_slice(t.row(i));
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn forward_preliminary_batch(&self, batch: &[&NormalizedSample]) -> Result<Vec<FrequencyMetrics>> {
        let raw = self.raw_preliminary(batch)?;
        raw.iter().zip(batch).map(|(r, s)| Ok(FrequencyMetrics::from_array(self.to_physical(r, s)?))).collect()
    }

    pub fn forward_preliminary(&self, sample: &NormalizedSample) -> Result<FrequencyMetrics> {
        Ok(self.forward_preliminary_batch(&[sample])?.remove(0))
    }

    /// Corrector applied to physical preliminaries.
    pub fn cn_correct_batch(&self, prelim: &[FrequencyMetrics], ctxs: &[ConstraintContext]) -> Result<Vec<FrequencyMetrics>> {
        if !self.cn_trained {
            return Err(ModelError::UntrainedCorrector);
        }
        self.cn_apply(prelim, ctxs)
    }

    /// Corrector without the trained-flag guard.
    pub fn cn_apply(&self, prelim: &[FrequencyMetrics], ctxs: &[ConstraintContext]) -> Result<Vec<FrequencyMetrics>> {
        let norm = self.norm()?;
        if prelim.is_empty() {
            return Ok(Vec::new());
        }
        let data = prelim.iter().flat_map(|p| norm.output.normalize(&p.to_array())).collect();
        let z = Tensor::new(vec![prelim.len(), OUTPUTS], data)?;
        let mut tape = Tape::new();
        let v = self.record_cn(&mut tape, z, ctxs)?;
        let t = tape.value(v);
        Ok((0..prelim.len()).map(|i| FrequencyMetrics::from_array(norm.output.denormalize(t.row(i)))).collect())
    }

    pub fn cn_correct(&self, prelim: &FrequencyMetrics, ctx: &ConstraintContext) -> Result<FrequencyMetrics> {
        Ok(self.cn_correct_batch(&[*prelim], &[*ctx])?.remove(0))
    }

    pub fn gate(&self, pred: &FrequencyMetrics, ctx: &ConstraintContext) -> (ConstraintResiduals, Gate) {
        let r = kc_residuals_with(pred, ctx, self.kc_weights.floor);
        (r, gate_residuals(&r, &self.kc_weights))
    }

    /// Preliminary → gate → retain or correct.
    pub fn predict_batch(&self, batch: &[&NormalizedSample]) -> Result<Vec<Prediction>> {
        let prelim = self.forward_preliminary_batch(batch)?;
        let gates: Vec<Gate> = prelim.iter().zip(batch).map(|(p, s)| self.gate(p, &s.ctx).1).collect();
        let routed: Vec<usize> = (0..batch.len()).filter(|&i| gates[i] == Gate::RouteToCn).collect();
        let corrected = if routed.is_empty() {
            Vec::new()
        } else {
            let p: Vec<FrequencyMetrics> = routed.iter().map(|&i| prelim[i]).collect();
            let c: Vec<ConstraintContext> = routed.iter().map(|&i| batch[i].ctx).collect();
            self.cn_correct_batch(&p, &c)?
        };
        let mut out = Vec::with_capacity(batch.len());
        let mut next = corrected.into_iter();
        for (i, p) in prelim.into_iter().enumerate() {
            let (metrics, provenance) = if gates[i] == Gate::RouteToCn {
                (next.next().expect("one correction per routed sample"), PredictionSource::Corrected)
            } else {
                (p, PredictionSource::Retained)
            };
            let residuals = kc_residuals_with(&metrics, &batch[i].ctx, self.kc_weights.floor);
            out.push(Prediction { metrics, preliminary: p, residuals, provenance });
        }
        Ok(out)
    }

    pub fn predict(&self, sample: &NormalizedSample) -> Result<Prediction> {
        Ok(self.predict_batch(&[sample])?.remove(0))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint { version: CHECKPOINT_VERSION, model: self.clone() }).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(ModelError::InvalidConfig(format!("checkpoint version {} unsupported", c.version)));
        }
        Ok(c.model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: FusionModel,
}

/// Neighbour lists of the six-node constraint graph.
pub fn cn_neighbors() -> Vec<Vec<usize>> {
    let mut n = vec![Vec::new(); OUTPUTS];
    for (a, b) in CN_EDGES {
        n[a].push(b);
        n[b].push(a);
    }
    for l in &mut n {
        l.sort_unstable();
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Retained,
    Corrected,
}

impl PredictionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Retained => "retained",
            Self::Corrected => "corrected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub metrics: FrequencyMetrics,
    pub preliminary: FrequencyMetrics,
    pub residuals: ConstraintResiduals,
    pub provenance: PredictionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityClass {
    Secure,
    Warning,
    Insecure,
}

impl SecurityClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Secure => "secure",
            Self::Warning => "warning",
            Self::Insecure => "insecure",
        }
    }
}

/// Bounds on |deviation| per indicator, mirrored for over-frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// |f_nadir − f_N| in Hz.
    pub nadir: f64,
    /// |RoCoF| in Hz/s.
    pub rocof: f64,
    /// |f_ss − f_N| in Hz.
    pub steady: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityThresholds {
    pub warning: Bounds,
    pub insecure: Bounds,
}

impl Default for SecurityThresholds {
    fn default() -> Self {
        Self {
            warning: Bounds { nadir: 0.2, rocof: 0.5, steady: 0.1 },
            insecure: Bounds { nadir: 0.5, rocof: 1.0, steady: 0.2 },
        }
    }
}

impl SecurityThresholds {
    pub fn validate(&self) -> Result<()> {
        let (w, i) = (self.warning, self.insecure);
        let pairs = [("nadir", w.nadir, i.nadir), ("rocof", w.rocof, i.rocof), ("steady", w.steady, i.steady)];
        for (name, a, b) in pairs {
            if !(a > 0.0 && b > a && b.is_finite()) {
                return Err(ModelError::InvalidThresholds(format!(
                    "{name}: insecure bound {b} must exceed warning bound {a} > 0"
                )));
            }
        }
        Ok(())
    }
}

pub fn classify_security(m: &FrequencyMetrics, t: &SecurityThresholds, f_n: f64) -> Result<SecurityClass> {
    t.validate()?;
    let nadir = (m.f_nadir - f_n).abs();
    let rocof = m.rocof_max.abs();
    let steady = (m.f_ss - f_n).abs();
    let over = |b: &Bounds| nadir > b.nadir || rocof > b.rocof || steady > b.steady;
    Ok(if over(&t.insecure) {
        SecurityClass::Insecure
    } else if over(&t.warning) {
        SecurityClass::Warning
    } else {
        SecurityClass::Secure
    })
}
