use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    bidirectional, check_no_empty_conversation, stack_steps, Activation, Dense, LstmParams,
    LstmVars,
};
use super::{BottleneckId, Layer, Level};
use crate::error::{Error, Result};
use crate::synth::{ConversationBatch, CLASS_COUNT};
use crate::tensor::{Graph, Tensor, Var};

/// Videos evaluated per graph in inference passes; bounds peak memory.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub input_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub unimodal_hidden: usize,
    pub unimodal_dense: usize,
    pub fusion_hidden: usize,
    pub fusion_dense: usize,
    pub class_count: usize,
    /// Inverted dropout on dense outputs while training.
    pub dropout: f32,
}

impl ModelConfig {
    pub fn new(modalities: Vec<ModalitySpec>) -> Self {
        ModelConfig {
            modalities,
            unimodal_hidden: 64,
            unimodal_dense: 64,
            fusion_hidden: 64,
            fusion_dense: 64,
            class_count: CLASS_COUNT,
            dropout: 0.0,
        }
    }

    /// One modality per batch modality, in batch order.
    pub fn for_batch(batch: &ConversationBatch) -> Self {
        Self::new(
            batch
                .modalities
                .iter()
                .map(|m| ModalitySpec {
                    name: m.name.clone(),
                    input_dim: m.dim(),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.input_dim == 0 || m.name.is_empty() {
                return Err(Error::Config(format!(
                    "modality {i} has an empty name or width"
                )));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality `{}`", m.name)));
            }
        }
        let widths = [
            self.unimodal_hidden,
            self.unimodal_dense,
            self.fusion_hidden,
            self.fusion_dense,
        ];
        if widths.contains(&0) || self.class_count < 2 {
            return Err(Error::Config(
                "layer widths must be positive and class_count ≥ 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Bidirectional contextual LSTM, tanh dense projection, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub dense: Dense,
    pub head: Dense,
    pub frozen: bool,
}

pub(crate) const BRANCH_PARAM_NAMES: [&str; 10] = [
    "fwd.w_ih", "fwd.w_hh", "fwd.b", "bwd.w_ih", "bwd.w_hh", "bwd.b", "dense.w", "dense.b",
    "head.w", "head.b",
];

impl Branch {
    fn init(
        rng: &mut impl Rng,
        input_dim: usize,
        hidden: usize,
        dense: usize,
        classes: usize,
    ) -> Self {
        Branch {
            fwd: LstmParams::init(rng, input_dim, hidden),
            bwd: LstmParams::init(rng, input_dim, hidden),
            dense: Dense::init(rng, 2 * hidden, dense, Activation::Tanh),
            head: Dense::init(rng, dense, classes, Activation::Linear),
            frozen: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn lstm_width(&self) -> usize {
        self.fwd.hidden_size + self.bwd.hidden_size
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self
            .fwd
            .tensors()
            .into_iter()
            .chain(self.bwd.tensors())
            .collect();
        v.extend([
            &self.dense.weight,
            &self.dense.bias,
            &self.head.weight,
            &self.head.bias,
        ]);
        v
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .fwd
            .tensors_mut()
            .into_iter()
            .chain(self.bwd.tensors_mut())
            .collect();
        v.extend([
            &mut self.dense.weight,
            &mut self.dense.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        v
    }

    fn check_shapes(
        &self,
        input_dim: usize,
        hidden: usize,
        dense: usize,
        classes: usize,
    ) -> Result<()> {
        let expect = Branch {
            fwd: LstmParams::zeros(input_dim, hidden),
            bwd: LstmParams::zeros(input_dim, hidden),
            dense: Dense {
                weight: Tensor::zeros(&[2 * hidden, dense]),
                bias: Tensor::zeros(&[dense]),
                activation: Activation::Tanh,
            },
            head: Dense {
                weight: Tensor::zeros(&[dense, classes]),
                bias: Tensor::zeros(&[classes]),
                activation: Activation::Linear,
            },
            frozen: false,
        };
        for ((name, got), want) in BRANCH_PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .zip(expect.tensors())
        {
            if got.shape() != want.shape() {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, architecture needs {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A branch's parameters recorded on a graph.
pub(crate) struct BranchVars {
    fwd: LstmVars,
    bwd: LstmVars,
    dense: [Var; 2],
    head: [Var; 2],
    pub(crate) all: Vec<Var>,
}

impl BranchVars {
    pub(crate) fn insert(g: &mut Graph, b: &Branch, trainable: bool) -> Self {
        let fwd = LstmVars::insert(g, &b.fwd, trainable);
        let bwd = LstmVars::insert(g, &b.bwd, trainable);
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let dense = [leaf(&b.dense.weight), leaf(&b.dense.bias)];
        let head = [leaf(&b.head.weight), leaf(&b.head.bias)];
        let mut all: Vec<Var> = fwd.vars().into_iter().chain(bwd.vars()).collect();
        all.extend(dense);
        all.extend(head);
        BranchVars {
            fwd,
            bwd,
            dense,
            head,
            all,
        }
    }
}

/// Per-step outputs of one branch.
pub(crate) struct BranchOut {
    pub(crate) lstm: Vec<Var>,
    pub(crate) dense: Vec<Var>,
    pub(crate) logits: Vec<Var>,
}

pub(crate) fn run_branch(
    g: &mut Graph,
    branch: &Branch,
    vars: &BranchVars,
    xs: &[Var],
    masks: &[Vec<f32>],
    mut dropout: Option<(f32, &mut ChaCha8Rng)>,
) -> Result<BranchOut> {
    let lstm = bidirectional(g, &vars.fwd, &vars.bwd, xs, masks)?;
    let mut dense = Vec::with_capacity(xs.len());
    let mut logits = Vec::with_capacity(xs.len());
    for (s, &h) in lstm.iter().enumerate() {
        let d = branch.dense.apply(g, vars.dense[0], vars.dense[1], h)?;
        let mut d = g.row_scale(d, &masks[s])?;
        if let Some((p, rng)) = dropout.as_mut() {
            let (b, w) = g.value(d).dims2()?;
            let keep = 1.0 - *p;
            let m = (0..b * w)
                .map(|_| {
                    if rng.random::<f32>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let m = g.constant(Tensor::new(vec![b, w], m)?);
            d = g.mul(d, m)?;
        }
        let z = branch.head.apply(g, vars.head[0], vars.head[1], d)?;
        logits.push(g.row_scale(z, &masks[s])?);
        dense.push(d);
    }
    Ok(BranchOut {
        lstm,
        dense,
        logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Fusion-branch logits, `n × t × K`; zero at padded slots.
    pub logits: Tensor,
    /// Per-modality head logits, `n × t × K`.
    pub unimodal_logits: BTreeMap<String, Tensor>,
    pub captured: BTreeMap<BottleneckId, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcLstmModel {
    pub config: ModelConfig,
    /// Aligned with `config.modalities`.
    pub unimodal: Vec<Branch>,
    pub fusion: Branch,
}

impl BcLstmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unimodal = config
            .modalities
            .iter()
            .map(|m| {
                Branch::init(
                    &mut rng,
                    m.input_dim,
                    config.unimodal_hidden,
                    config.unimodal_dense,
                    config.class_count,
                )
            })
            .collect::<Vec<_>>();
        let fusion = Branch::init(
            &mut rng,
            config.modalities.len() * config.unimodal_dense,
            config.fusion_hidden,
            config.fusion_dense,
            config.class_count,
        );
        Ok(BcLstmModel {
            config,
            unimodal,
            fusion,
        })
    }

    /// Checks every parameter against the shapes `config` implies.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.unimodal.len() != c.modalities.len() {
            return Err(Error::Dimension(format!(
                "{} unimodal branches for {} modalities",
                self.unimodal.len(),
                c.modalities.len()
            )));
        }
        for (b, m) in self.unimodal.iter().zip(&c.modalities) {
            b.check_shapes(
                m.input_dim,
                c.unimodal_hidden,
                c.unimodal_dense,
                c.class_count,
            )
            .map_err(|e| Error::Dimension(format!("unimodal `{}`: {e}", m.name)))?;
        }
        let fusion_in: usize = self.unimodal.iter().map(|b| b.dense.out_dim()).sum();
        self.fusion
            .check_shapes(fusion_in, c.fusion_hidden, c.fusion_dense, c.class_count)
            .map_err(|e| Error::Dimension(format!("fusion: {e}")))
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn modality_names(&self) -> Vec<&str> {
        self.config
            .modalities
            .iter()
            .map(|m| m.name.as_str())
            .collect()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.config.modalities.iter().position(|m| m.name == name)
    }

    /// Every capture point, unimodal branches first.
    pub fn bottlenecks(&self) -> Vec<BottleneckId> {
        let mut out = Vec::new();
        for m in &self.config.modalities {
            out.push(BottleneckId::unimodal(&m.name, Layer::ContextualLstmOutput));
            out.push(BottleneckId::unimodal(&m.name, Layer::DenseOutput));
        }
        out.push(BottleneckId::multimodal(Layer::ContextualLstmOutput));
        out.push(BottleneckId::multimodal(Layer::DenseOutput));
        out
    }

    fn branch_of(&self, l: &BottleneckId) -> Result<&Branch> {
        match &l.level {
            Level::Unimodal(m) => self
                .modality_index(m)
                .map(|i| &self.unimodal[i])
                .ok_or_else(|| Error::UnknownBottleneck(l.to_string())),
            Level::Multimodal => Ok(&self.fusion),
        }
    }

    pub fn bottleneck_width(&self, l: &BottleneckId) -> Result<usize> {
        let b = self.branch_of(l)?;
        Ok(match l.layer {
            Layer::ContextualLstmOutput => b.lstm_width(),
            Layer::DenseOutput => b.dense.out_dim(),
        })
    }

    /// Batch modality index for each model modality.
    pub(crate) fn batch_inputs(&self, batch: &ConversationBatch) -> Result<Vec<usize>> {
        self.config
            .modalities
            .iter()
            .map(|spec| {
                let idx = batch
                    .modalities
                    .iter()
                    .position(|m| m.name == spec.name)
                    .ok_or_else(|| {
                        Error::Validation(format!("batch is missing modality `{}`", spec.name))
                    })?;
                let d = batch.modalities[idx].dim();
                if d != spec.input_dim {
                    return Err(Error::Dimension(format!(
                        "modality `{}` has {d} features, model expects {}",
                        spec.name, spec.input_dim
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    pub fn forward(
        &self,
        batch: &ConversationBatch,
        capture: &[BottleneckId],
    ) -> Result<ForwardOutput> {
        for l in capture {
            self.bottleneck_width(l)?;
        }
        let inputs = self.batch_inputs(batch)?;
        check_no_empty_conversation(&batch.mask, batch.n_videos, batch.t_max)?;
        let n = batch.n_videos;
        let mut chunks = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let videos: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            chunks.push(self.forward_videos(batch, &inputs, &videos, capture)?);
        }
        let join = |parts: Vec<&Tensor>| -> Result<Tensor> {
            let (_, t, f) = parts[0].dims3()?;
            let data = parts
                .iter()
                .flat_map(|p| p.data().iter().copied())
                .collect();
            Tensor::new(vec![n, t, f], data)
        };
        let logits = join(chunks.iter().map(|c| &c.logits).collect())?;
        let mut unimodal_logits = BTreeMap::new();
        for m in self.modality_names() {
            unimodal_logits.insert(
                m.to_string(),
                join(chunks.iter().map(|c| &c.unimodal_logits[m]).collect())?,
            );
        }
        let mut captured = BTreeMap::new();
        for l in capture {
            captured.insert(
                l.clone(),
                join(chunks.iter().map(|c| &c.captured[l]).collect())?,
            );
        }
        Ok(ForwardOutput {
            logits,
            unimodal_logits,
            captured,
        })
    }

    fn forward_videos(
        &self,
        batch: &ConversationBatch,
        inputs: &[usize],
        videos: &[usize],
        capture: &[BottleneckId],
    ) -> Result<ForwardOutput> {
        let t = batch.t_max;
        let b = videos.len();
        let mut g = Graph::new();
        let masks: Vec<Vec<f32>> = (0..t).map(|s| batch.step_mask(s, videos)).collect();
        let mut outs = Vec::with_capacity(self.unimodal.len());
        for (branch, &bi) in self.unimodal.iter().zip(inputs) {
            let vars = BranchVars::insert(&mut g, branch, false);
            let xs: Vec<Var> = (0..t)
                .map(|s| g.constant(batch.step_rows(bi, s, videos)))
                .collect();
            outs.push(run_branch(&mut g, branch, &vars, &xs, &masks, None)?);
        }
        let xs = (0..t)
            .map(|s| {
                let parts: Vec<Var> = outs.iter().map(|o| o.dense[s]).collect();
                g.concat_cols(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        let vars = BranchVars::insert(&mut g, &self.fusion, false);
        let fused = run_branch(&mut g, &self.fusion, &vars, &xs, &masks, None)?;

        let mut unimodal_logits = BTreeMap::new();
        for (m, o) in self.modality_names().into_iter().zip(&outs) {
            unimodal_logits.insert(m.to_string(), stack_steps(&g, &o.logits, b));
        }
        let mut captured = BTreeMap::new();
        for l in capture {
            let out = match &l.level {
                Level::Unimodal(m) => &outs[self.modality_index(m).expect("checked")],
                Level::Multimodal => &fused,
            };
            let steps = match l.layer {
                Layer::ContextualLstmOutput => &out.lstm,
                Layer::DenseOutput => &out.dense,
            };
            captured.insert(l.clone(), stack_steps(&g, steps, b));
        }
        Ok(ForwardOutput {
            logits: stack_steps(&g, &fused.logits, b),
            unimodal_logits,
            captured,
        })
    }

    /// Bottleneck activations, `n × t × f_l`.
    pub fn activations(&self, batch: &ConversationBatch, l: &BottleneckId) -> Result<Tensor> {
        let mut out = self.forward(batch, std::slice::from_ref(l))?;
        Ok(out.captured.remove(l).expect("captured"))
    }

    /// Records the layers above `l` on `g`, applied row-wise to `acts`.
    fn head_graph(&self, g: &mut Graph, l: &BottleneckId, acts: Var) -> Result<Var> {
        let branch = self.branch_of(l)?;
        let vars = BranchVars::insert(g, branch, false);
        let width = g.value(acts).dims2()?.1;
        if width != self.bottleneck_width(l)? {
            return Err(Error::Dimension(format!(
                "{width}-wide activations for bottleneck {l} of width {}",
                self.bottleneck_width(l)?
            )));
        }
        let d = match l.layer {
            Layer::ContextualLstmOutput => {
                branch.dense.apply(g, vars.dense[0], vars.dense[1], acts)?
            }
            Layer::DenseOutput => acts,
        };
        branch.head.apply(g, vars.head[0], vars.head[1], d)
    }

    /// Pre-softmax logits produced from captured activations `m × f_l` by the
    /// layers above `l`. Unimodal bottlenecks feed that modality's head.
    pub fn head_logits(&self, l: &BottleneckId, acts: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let a = g.constant(acts.clone());
        let z = self.head_graph(&mut g, l, a)?;
        Ok(g.value(z).clone())
    }

    /// `∂ logit_k / ∂ a_l` per utterance, `n × t × f_l`; zero at padded slots.
    pub fn logit_gradient(
        &self,
        batch: &ConversationBatch,
        k: usize,
        l: &BottleneckId,
    ) -> Result<Tensor> {
        self.check_class(k)?;
        let acts = self.activations(batch, l)?;
        self.logit_gradient_at(&acts, &batch.mask, k, l)
    }

    /// As [`Self::logit_gradient`], from activations already captured.
    pub fn logit_gradient_at(
        &self,
        acts: &Tensor,
        mask: &[bool],
        k: usize,
        l: &BottleneckId,
    ) -> Result<Tensor> {
        self.check_class(k)?;
        let (n, t, f) = acts.dims3()?;
        if mask.len() != n * t {
            return Err(Error::Dimension(format!(
                "mask of {} for {n}x{t} activations",
                mask.len()
            )));
        }
        let mut g = Graph::new();
        let a = g.param(acts.clone().reshape(vec![n * t, f])?);
        let z = self.head_graph(&mut g, l, a)?;
        let kk = self.class_count();
        let mut sel = vec![0.0f32; n * t * kk];
        for (r, &m) in mask.iter().enumerate() {
            if m {
                sel[r * kk + k] = 1.0;
            }
        }
        let sel = g.constant(Tensor::new(vec![n * t, kk], sel)?);
        let picked = g.mul(z, sel)?;
        let y = g.sum(picked)?;
        let grads = g.backward(y)?;
        grads.get(a)?.clone().reshape(vec![n, t, f])
    }

    fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.class_count() {
            return Err(Error::Contract(format!(
                "class {k} out of range for {} classes",
                self.class_count()
            )));
        }
        Ok(())
    }

    /// Argmax class per valid utterance, in slot order.
    pub fn predict(&self, batch: &ConversationBatch) -> Result<Vec<(usize, usize)>> {
        let out = self.forward(batch, &[])?;
        Ok(argmax_valid(&out.logits, &batch.mask))
    }

    /// Fraction of valid utterances whose fusion prediction matches the label.
    pub fn accuracy(&self, batch: &ConversationBatch) -> Result<f64> {
        let preds = self.predict(batch)?;
        Ok(accuracy_of(&preds, &batch.labels))
    }

    /// Named parameters in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, b) in self.config.modalities.iter().zip(&self.unimodal) {
            for (name, t) in BRANCH_PARAM_NAMES.iter().zip(b.tensors()) {
                out.push((format!("uni.{}.{name}", m.name), t));
            }
        }
        for (name, t) in BRANCH_PARAM_NAMES.iter().zip(self.fusion.tensors()) {
            out.push((format!("fusion.{name}"), t));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `(slot, argmax)` for every valid slot of an `n × t × K` logit tensor.
pub(crate) fn argmax_valid(logits: &Tensor, mask: &[bool]) -> Vec<(usize, usize)> {
    let k = logits.shape()[2];
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(slot, _)| {
            let row = &logits.data()[slot * k..(slot + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            (slot, best)
        })
        .collect()
}

pub(crate) fn accuracy_of(preds: &[(usize, usize)], labels: &[u8]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .filter(|&&(s, p)| usize::from(labels[s]) == p)
        .count();
    hits as f64 / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::fixtures::two_video_batch;
    use crate::synth::{generate, PlantedSpec};

    fn small_config(batch: &ConversationBatch) -> ModelConfig {
        let mut c = ModelConfig::for_batch(batch);
        c.unimodal_hidden = 3;
        c.unimodal_dense = 4;
        c.fusion_hidden = 3;
        c.fusion_dense = 5;
        c
    }

    #[test]
    fn shapes_and_empty_capture() {
        let b = generate(&PlantedSpec::default_with_seed(1), 4, 5).unwrap();
        let m = BcLstmModel::new(small_config(&b), 0).unwrap();
        m.validate().unwrap();
        let out = m.forward(&b, &[]).unwrap();
        assert_eq!(out.logits.shape(), &[4, 5, 6]);
        assert!(out.captured.is_empty());
        let dense = BottleneckId::multimodal_canonical();
        let lstm = BottleneckId::unimodal_canonical("video");
        let out = m.forward(&b, &[dense.clone(), lstm.clone()]).unwrap();
        assert_eq!(out.captured[&dense].shape(), &[4, 5, 5]);
        assert_eq!(out.captured[&lstm].shape(), &[4, 5, 6]);
    }

    #[test]
    fn unknown_bottleneck() {
        let b = two_video_batch();
        let m = BcLstmModel::new(small_config(&b), 0).unwrap();
        let l = BottleneckId::unimodal_canonical("smell");
        assert!(matches!(
            m.forward(&b, std::slice::from_ref(&l)),
            Err(Error::UnknownBottleneck(_))
        ));
        assert!(matches!(
            m.logit_gradient(&b, 0, &l),
            Err(Error::UnknownBottleneck(_))
        ));
    }

    #[test]
    fn zero_head_is_uniform() {
        let b = two_video_batch();
        let mut m = BcLstmModel::new(small_config(&b), 3).unwrap();
        m.fusion.head.weight = Tensor::zeros(m.fusion.head.weight.shape());
        let out = m.forward(&b, &[]).unwrap();
        assert!(out.logits.data().iter().all(|&z| z == 0.0));
        let mut g = Graph::new();
        let z = g.constant(out.logits.reshape(vec![6, 6]).unwrap());
        let targets: Vec<usize> = b.labels.iter().map(|&l| usize::from(l.min(5))).collect();
        let w: Vec<f32> = b
            .mask
            .iter()
            .map(|&m| if m { 1.0 / 5.0 } else { 0.0 })
            .collect();
        let ce = g.softmax_cross_entropy(z, &targets, &w).unwrap();
        assert!((g.value(ce).data()[0] - 6f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn linear_head_gradient_is_weight_row() {
        let b = generate(&PlantedSpec::default_with_seed(2), 3, 4).unwrap();
        let m = BcLstmModel::new(small_config(&b), 1).unwrap();
        let l = BottleneckId::multimodal_canonical();
        let k = 4;
        let g = m.logit_gradient(&b, k, &l).unwrap();
        let w = &m.fusion.head.weight;
        let kk = w.shape()[1];
        for slot in 0..b.slots() {
            let row = &g.data()[slot * 5..(slot + 1) * 5];
            for (j, &got) in row.iter().enumerate() {
                let want = if b.mask[slot] {
                    w.data()[j * kk + k]
                } else {
                    0.0
                };
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn gradient_ignores_constant_logit_shift() {
        let b = generate(&PlantedSpec::default_with_seed(4), 2, 3).unwrap();
        let mut m = BcLstmModel::new(small_config(&b), 5).unwrap();
        let l = BottleneckId::unimodal_canonical("audio");
        let before = m.logit_gradient(&b, 2, &l).unwrap();
        let ai = m.modality_index("audio").unwrap();
        m.unimodal[ai]
            .head
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += 3.5);
        assert_eq!(m.logit_gradient(&b, 2, &l).unwrap(), before);
    }

    #[test]
    fn invalid_class_is_contract_error() {
        let b = two_video_batch();
        let m = BcLstmModel::new(small_config(&b), 0).unwrap();
        let l = BottleneckId::multimodal_canonical();
        assert!(matches!(
            m.logit_gradient(&b, 6, &l),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn padding_is_zero_in_outputs() {
        let b = two_video_batch();
        let m = BcLstmModel::new(small_config(&b), 0).unwrap();
        let ids = m.bottlenecks();
        let out = m.forward(&b, &ids).unwrap();
        let pad = 5;
        for t in out.captured.values().chain([&out.logits]) {
            let f = t.shape()[2];
            assert!(t.data()[pad * f..(pad + 1) * f].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn missing_modality_rejected() {
        let mut b = generate(&PlantedSpec::default_with_seed(2), 2, 3).unwrap();
        let m = BcLstmModel::new(small_config(&b), 1).unwrap();
        b.modalities.pop();
        assert!(matches!(m.forward(&b, &[]), Err(Error::Validation(_))));
    }
}
