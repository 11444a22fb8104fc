//! The forward path: per-modality encoders, non-linear projectors, radial
//! classifiers (per-modality and global), the auxiliary linear head, and
//! the lightweight decoupler heads used by the pretext tasks.
//!
//! Parameters live as plain tensors between steps; each training step binds
//! them onto a fresh tape as leaves. A radial classifier owns exactly one
//! trainable scalar: its radius is `softplus(raw)` and therefore always
//! positive, and its two logits `(r - |z|, |z| - r)` sum to zero, so the
//! decision depends on the feature norm alone.

use crate::error::{Error, Result};
use crate::numerics::autodiff::{concat_cols, GeluKind, Tape, Var};
use crate::numerics::Tensor;
use crate::synth::lift_to_tokens;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Decision-boundary family of a classification branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierKind {
    /// Spherical boundary, live class inside.
    RadialLiveInside,
    /// Spherical boundary flipped: spoof inside (a deliberately wrong prior).
    RadialSpoofInside,
    /// Linear hyperplane logit `(minus u, u)` with `u = z . beta`.
    Linear,
}

impl Default for ClassifierKind {
    fn default() -> Self {
        ClassifierKind::RadialLiveInside
    }
}

/// Architecture and initialization knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: usize,
    pub input_dim: usize,
    pub enc_hidden: usize,
    /// Per-modality feature width; must be divisible by 4 for the projector.
    pub feature_dim: usize,
    /// Token grid `(h, w)`; `None` disables token maps (and the pretext
    /// tasks that need them).
    pub token_grid: Option<(usize, usize)>,
    pub gelu: GeluKind,
    /// Raw radius initialization `s`; the radius starts at `softplus(s)`.
    pub radius_init: f64,
    /// Decoupler head width.
    pub dec_hidden: usize,
    pub classifier: ClassifierKind,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: 3,
            input_dim: 16,
            enc_hidden: 64,
            feature_dim: 32,
            token_grid: Some((8, 8)),
            gelu: GeluKind::Exact,
            radius_init: 0.0,
            dec_hidden: 32,
            classifier: ClassifierKind::RadialLiveInside,
            init_seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn global_dim(&self) -> usize {
        self.modalities * self.feature_dim
    }

    pub fn positions(&self) -> usize {
        self.token_grid.map(|(h, w)| h * w).unwrap_or(1)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim % 4 != 0 || self.global_dim() % 4 != 0 {
            return Err(Error::Config(
                "feature width must be divisible by 4 for the quarter-width projector".into(),
            ));
        }
        if self.modalities == 0 || self.input_dim == 0 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }
}

/// Affine layer parameters, weight `(in x out)` plus bias `[out]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        // zero-mean uniform with fan-in scaling
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("init shape"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    #[cfg(test)]
    fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }
}

/// Two affine layers with GELU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub l1: Affine,
    pub l2: Affine,
}

impl Mlp {
    fn init(rng: &mut impl Rng, dims: (usize, usize, usize)) -> Self {
        Self {
            l1: Affine::init(rng, dims.0, dims.1),
            l2: Affine::init(rng, dims.1, dims.2),
        }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Vec<Mlp>,
    pub projectors: Vec<Mlp>,
    /// Raw radius scalar per modality; radius = softplus(raw).
    pub radii_raw: Vec<Tensor>,
    /// Hyperplane weights per modality, used by the linear classifier kind.
    pub linear_heads: Vec<Tensor>,
    pub global_projector: Mlp,
    pub global_radius_raw: Tensor,
    pub global_linear_head: Tensor,
    pub aux: Affine,
    pub dec_low: Vec<Mlp>,
    pub dec_high: Vec<Mlp>,
    pub dec_pos: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.init_seed);
        let m = config.modalities;
        let (d, h, c) = (config.input_dim, config.enc_hidden, config.feature_dim);
        let g = config.global_dim();
        let encoders = (0..m).map(|_| Mlp::init(&mut rng, (d, h, c))).collect();
        let projectors = (0..m)
            .map(|_| Mlp::init(&mut rng, (c, c / 4, c)))
            .collect();
        let radii_raw = (0..m)
            .map(|_| Tensor::scalar(config.radius_init))
            .collect();
        let linear_heads = (0..m)
            .map(|_| Affine::init(&mut rng, c, 1).weight)
            .collect();
        let global_projector = Mlp::init(&mut rng, (g, g / 4, g));
        let global_radius_raw = Tensor::scalar(config.radius_init);
        let global_linear_head = Affine::init(&mut rng, g, 1).weight;
        let aux = Affine::init(&mut rng, g, 2);
        let dh = config.dec_hidden;
        let dec_low = (0..m).map(|_| Mlp::init(&mut rng, (c, dh, m))).collect();
        let dec_high = (0..m).map(|_| Mlp::init(&mut rng, (c, dh, m))).collect();
        let dec_pos = Mlp::init(&mut rng, (c, dh, 2));
        Ok(Self {
            config,
            encoders,
            projectors,
            radii_raw,
            linear_heads,
            global_projector,
            global_radius_raw,
            global_linear_head,
            aux,
            dec_low,
            dec_high,
            dec_pos,
        })
    }

    /// Flat parameter list in a stable order (shared with Adam state and
    /// checkpoints).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        fn push<'a>(out: &mut Vec<&'a Tensor>, m: &'a Mlp) {
            out.push(&m.l1.weight);
            out.push(&m.l1.bias);
            out.push(&m.l2.weight);
            out.push(&m.l2.bias);
        }
        for e in &self.encoders {
            push(&mut out, e);
        }
        for p in &self.projectors {
            push(&mut out, p);
        }
        for r in &self.radii_raw {
            out.push(r);
        }
        for l in &self.linear_heads {
            out.push(l);
        }
        push(&mut out, &self.global_projector);
        out.push(&self.global_radius_raw);
        out.push(&self.global_linear_head);
        out.push(&self.aux.weight);
        out.push(&self.aux.bias);
        for d in &self.dec_low {
            push(&mut out, d);
        }
        for d in &self.dec_high {
            push(&mut out, d);
        }
        push(&mut out, &self.dec_pos);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        macro_rules! push_mlp {
            ($m:expr) => {
                out.push(&mut $m.l1.weight);
                out.push(&mut $m.l1.bias);
                out.push(&mut $m.l2.weight);
                out.push(&mut $m.l2.bias);
            };
        }
        for e in &mut self.encoders {
            push_mlp!(e);
        }
        for p in &mut self.projectors {
            push_mlp!(p);
        }
        for r in &mut self.radii_raw {
            out.push(r);
        }
        for l in &mut self.linear_heads {
            out.push(l);
        }
        push_mlp!(self.global_projector);
        out.push(&mut self.global_radius_raw);
        out.push(&mut self.global_linear_head);
        out.push(&mut self.aux.weight);
        out.push(&mut self.aux.bias);
        for d in &mut self.dec_low {
            push_mlp!(d);
        }
        for d in &mut self.dec_high {
            push_mlp!(d);
        }
        push_mlp!(self.dec_pos);
        out
    }

    /// Bind all parameters onto a tape as trainable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let mut all = Vec::new();
        let bind_mlp = |mlp: &Mlp, all: &mut Vec<Var<'t>>| -> BoundMlp<'t> {
            let l1 = BoundAffine {
                w: tape.leaf(mlp.l1.weight.clone()),
                b: tape.leaf(mlp.l1.bias.clone()),
            };
            let l2 = BoundAffine {
                w: tape.leaf(mlp.l2.weight.clone()),
                b: tape.leaf(mlp.l2.bias.clone()),
            };
            all.extend([l1.w, l1.b, l2.w, l2.b]);
            BoundMlp {
                l1,
                l2,
                gelu: self.config.gelu,
            }
        };
        let encoders: Vec<BoundMlp> = self.encoders.iter().map(|e| bind_mlp(e, &mut all)).collect();
        let projectors: Vec<BoundMlp> = self
            .projectors
            .iter()
            .map(|p| bind_mlp(p, &mut all))
            .collect();
        let radii_raw: Vec<Var> = self
            .radii_raw
            .iter()
            .map(|r| {
                let v = tape.leaf(r.clone());
                all.push(v);
                v
            })
            .collect();
        let linear_heads: Vec<Var> = self
            .linear_heads
            .iter()
            .map(|l| {
                let v = tape.leaf(l.clone());
                all.push(v);
                v
            })
            .collect();
        let global_projector = bind_mlp(&self.global_projector, &mut all);
        let global_radius_raw = tape.leaf(self.global_radius_raw.clone());
        all.push(global_radius_raw);
        let global_linear_head = tape.leaf(self.global_linear_head.clone());
        all.push(global_linear_head);
        let aux = BoundAffine {
            w: tape.leaf(self.aux.weight.clone()),
            b: tape.leaf(self.aux.bias.clone()),
        };
        all.extend([aux.w, aux.b]);
        let dec_low: Vec<BoundMlp> = self.dec_low.iter().map(|d| bind_mlp(d, &mut all)).collect();
        let dec_high: Vec<BoundMlp> = self.dec_high.iter().map(|d| bind_mlp(d, &mut all)).collect();
        let dec_pos = bind_mlp(&self.dec_pos, &mut all);
        BoundModel {
            config: self.config.clone(),
            encoders,
            projectors,
            radii_raw,
            linear_heads,
            global_projector,
            global_radius_raw,
            global_linear_head,
            aux,
            dec_low,
            dec_high,
            dec_pos,
            all,
        }
    }

    fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let mut h = DefaultHasher::new();
        json.hash(&mut h);
        h.finish()
    }

    /// Save as a JSON manifest line plus one numeric text line per tensor.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            format: &'a str,
            config: &'a ModelConfig,
            config_hash: u64,
            shapes: Vec<Vec<usize>>,
        }
        let params = self.params();
        let manifest = Manifest {
            format: "radfas-checkpoint",
            config: &self.config,
            config_hash: self.config_hash(),
            shapes: params.iter().map(|t| t.shape().to_vec()).collect(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &manifest)?;
        out.write_all(b"\n")?;
        for t in params {
            let mut first = true;
            for v in t.data() {
                if !first {
                    out.write_all(b" ")?;
                }
                write!(out, "{v:.17e}")?;
                first = false;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Manifest {
            format: String,
            config: ModelConfig,
            config_hash: u64,
            shapes: Vec<Vec<usize>>,
        }
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let manifest: Manifest = serde_json::from_str(line.trim_end())?;
        if manifest.format != "radfas-checkpoint" {
            return Err(Error::Config("not a checkpoint file".into()));
        }
        let mut model = Model::new(manifest.config)?;
        if model.config_hash() != manifest.config_hash {
            return Err(Error::Config("checkpoint config hash mismatch".into()));
        }
        {
            let params = model.params_mut();
            if params.len() != manifest.shapes.len() {
                return Err(Error::Config("checkpoint tensor count mismatch".into()));
            }
            for (i, (t, shape)) in params.into_iter().zip(manifest.shapes.iter()).enumerate() {
                if t.shape() != shape.as_slice() {
                    return Err(Error::Config(format!("checkpoint shape mismatch at {i}")));
                }
                line.clear();
                reader.read_line(&mut line)?;
                let vals: std::result::Result<Vec<f64>, _> = line
                    .split_ascii_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect();
                let vals = vals.map_err(|e| Error::Config(format!("bad checkpoint value: {e}")))?;
                if vals.len() != t.data().len() {
                    return Err(Error::Config(format!("checkpoint length mismatch at {i}")));
                }
                t.data_mut().copy_from_slice(&vals);
            }
        }
        Ok(model)
    }

    /// Overwrite parameters from same-shaped tensors in registry order.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Shape("parameter count mismatch".into()));
        }
        for (t, v) in params.into_iter().zip(values.iter()) {
            if t.shape() != v.shape() {
                return Err(Error::Shape("parameter shape mismatch".into()));
            }
            t.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }
}

/// Affine layer bound to a tape.
#[derive(Clone, Copy)]
pub struct BoundAffine<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> BoundAffine<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let rows = x.shape()[0];
        Ok(x.matmul(self.w)?.add(self.b.repeat_rows(rows)))
    }
}

/// Two-layer perceptron bound to a tape.
#[derive(Clone, Copy)]
pub struct BoundMlp<'t> {
    pub l1: BoundAffine<'t>,
    pub l2: BoundAffine<'t>,
    pub gelu: GeluKind,
}

impl<'t> BoundMlp<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.l2.apply(self.l1.apply(x)?.gelu(self.gelu))
    }
}

/// All parameters as tape leaves, in registry order.
pub struct BoundModel<'t> {
    pub config: ModelConfig,
    pub encoders: Vec<BoundMlp<'t>>,
    pub projectors: Vec<BoundMlp<'t>>,
    pub radii_raw: Vec<Var<'t>>,
    pub linear_heads: Vec<Var<'t>>,
    pub global_projector: BoundMlp<'t>,
    pub global_radius_raw: Var<'t>,
    pub global_linear_head: Var<'t>,
    pub aux: BoundAffine<'t>,
    pub dec_low: Vec<BoundMlp<'t>>,
    pub dec_high: Vec<BoundMlp<'t>>,
    pub dec_pos: BoundMlp<'t>,
    all: Vec<Var<'t>>,
}

/// One classification branch: the feature batch it scores, the norms, the
/// positive radius, and the two antisymmetric logits.
pub struct Branch<'t> {
    /// Projected features the radial classifier sees, `(B x F)`.
    pub features: Var<'t>,
    /// Row norms `(B x 1)`.
    pub norms: Var<'t>,
    /// Positive radius (scalar node); absent for the linear kind.
    pub radius: Option<Var<'t>>,
    /// `(B x 2)` antisymmetric logits (live, spoof).
    pub logits: Var<'t>,
}

/// Everything downstream losses need from one forward pass.
pub struct Forward<'t> {
    /// Pre-projector pooled features per modality, `(B x C)`.
    pub pooled: Vec<Var<'t>>,
    /// Per-token encoder features per modality, `(B*P x C)` (token mode).
    pub tokens: Option<Vec<Var<'t>>>,
    /// Per-modality classification branches.
    pub branches: Vec<Branch<'t>>,
    /// Global branch over concatenated projected features.
    pub global: Branch<'t>,
    /// `(B x 2)` auxiliary linear logits on pre-projector features.
    pub aux_logits: Var<'t>,
    pub batch: usize,
}

/// Radial classification logits for a feature batch: live logit
/// `r - |z|`, spoof logit `|z| - r`. The pair always sums to zero.
pub fn radial_logits<'t>(features: Var<'t>, raw_radius: Var<'t>) -> Branch<'t> {
    branch_logits(features, raw_radius, ClassifierKind::RadialLiveInside)
}

/// Build the chosen classifier's logits on a feature batch. All kinds emit
/// antisymmetric `(B x 2)` logits with the spoof logit second.
pub fn branch_logits<'t>(
    features: Var<'t>,
    head: Var<'t>,
    kind: ClassifierKind,
) -> Branch<'t> {
    let b = features.shape()[0];
    let norms = features.l2_norm_rows();
    match kind {
        ClassifierKind::RadialLiveInside | ClassifierKind::RadialSpoofInside => {
            let radius = head.softplus().reshape(vec![1]);
            let r_col = radius.broadcast_scalar(vec![b, 1]);
            let inside = r_col.sub(norms);
            let outside = norms.sub(r_col);
            let logits = if kind == ClassifierKind::RadialLiveInside {
                concat_cols(&[inside, outside])
            } else {
                concat_cols(&[outside, inside])
            };
            Branch {
                features,
                norms,
                radius: Some(radius),
                logits,
            }
        }
        ClassifierKind::Linear => {
            let u = features
                .matmul(head)
                .expect("linear head width matches features");
            let logits = concat_cols(&[u.neg(), u]);
            Branch {
                features,
                norms,
                radius: None,
                logits,
            }
        }
    }
}

impl<'t> BoundModel<'t> {
    /// Every bound parameter in registry order (for `grad` and Adam).
    pub fn all_params(&self) -> &[Var<'t>] {
        &self.all
    }

    /// The classifier parameter of modality branch `m` under the current kind.
    pub fn branch_head(&self, m: usize) -> Var<'t> {
        match self.config.classifier {
            ClassifierKind::Linear => self.linear_heads[m],
            _ => self.radii_raw[m],
        }
    }

    /// The global branch's classifier parameter.
    pub fn global_head(&self) -> Var<'t> {
        match self.config.classifier {
            ClassifierKind::Linear => self.global_linear_head,
            _ => self.global_radius_raw,
        }
    }

    /// Encode one modality batch `(B x d)` into pooled features `(B x C)`
    /// and, in token mode, per-token features `(B*P x C)`.
    pub fn encode(
        &self,
        tape: &'t Tape,
        modality: usize,
        raw: &Tensor,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        if raw.shape().len() != 2 || raw.shape()[1] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "modality {modality} input shape {:?}",
                raw.shape()
            )));
        }
        let b = raw.shape()[0];
        match self.config.token_grid {
            None => {
                let x = tape.constant(raw.clone());
                let feats = self.encoders[modality].apply(x)?;
                Ok((feats, None))
            }
            Some((h, w)) => {
                let p = h * w;
                let d = self.config.input_dim;
                let mut lifted = Vec::with_capacity(b * p * d);
                for i in 0..b {
                    let row = &raw.data()[i * d..(i + 1) * d];
                    lifted.extend_from_slice(lift_to_tokens(row, h, w).data());
                }
                let x = tape.constant(Tensor::matrix(b * p, d, lifted)?);
                let tok = self.encoders[modality].apply(x)?;
                let pooled = tok.pool_rows(p);
                Ok((pooled, Some(tok)))
            }
        }
    }

    /// Full forward pass over per-modality raw input batches.
    pub fn forward(&self, tape: &'t Tape, raw_inputs: &[Tensor]) -> Result<Forward<'t>> {
        if raw_inputs.len() != self.config.modalities {
            return Err(Error::Shape(format!(
                "expected {} modalities, got {}",
                self.config.modalities,
                raw_inputs.len()
            )));
        }
        let b = raw_inputs[0].shape()[0];
        let mut pooled = Vec::with_capacity(raw_inputs.len());
        let mut tokens = Vec::new();
        for (m, raw) in raw_inputs.iter().enumerate() {
            if raw.shape()[0] != b {
                return Err(Error::Shape("modalities disagree on batch size".into()));
            }
            let (p, t) = self.encode(tape, m, raw)?;
            pooled.push(p);
            if let Some(t) = t {
                tokens.push(t);
            }
        }
        let tokens = if tokens.len() == raw_inputs.len() {
            Some(tokens)
        } else {
            None
        };

        let kind = self.config.classifier;
        let branches: Vec<Branch> = pooled
            .iter()
            .enumerate()
            .map(|(m, p)| {
                let feats = self.projectors[m].apply(*p)?;
                Ok(branch_logits(feats, self.branch_head(m), kind))
            })
            .collect::<Result<_>>()?;

        let concat = concat_cols(&pooled);
        let global_feats = self.global_projector.apply(concat)?;
        let global = branch_logits(global_feats, self.global_head(), kind);
        let aux_logits = self.aux.apply(concat)?;

        Ok(Forward {
            pooled,
            tokens,
            branches,
            global,
            aux_logits,
            batch: b,
        })
    }
}
