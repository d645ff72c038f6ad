//! Toy convolutional backbone with per-stage feature normalization.
//!
//! Four variants share the same conv/classifier skeleton and differ only
//! in what follows each stage: nothing (baseline), instance normalization
//! alone (in_only), or a full restitution module (snr / snr_no_dual_loss,
//! which differ in the loss, not the graph).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::snr::{self, snr_forward, snr_forward_inference, SnrNodes, SnrOutputs, SnrParams};
use crate::tensor::{Graph, Tensor, TensorData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    InOnly,
    Snr,
    SnrNoDualLoss,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::InOnly, Variant::Snr, Variant::SnrNoDualLoss];

    pub fn uses_snr(self) -> bool {
        matches!(self, Variant::Snr | Variant::SnrNoDualLoss)
    }

    pub fn uses_dual_loss(self) -> bool {
        matches!(self, Variant::Snr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::InOnly => "in_only",
            Variant::Snr => "snr",
            Variant::SnrNoDualLoss => "snr_no_dual_loss",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "in_only" => Ok(Variant::InOnly),
            "snr" => Ok(Variant::Snr),
            "snr_no_dual_loss" => Ok(Variant::SnrNoDualLoss),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected baseline | in_only | snr | snr_no_dual_loss"
            ))),
        }
    }
}

/// One conv stage: 3x3 kernel, pad 1, configurable stride and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stages: Vec<StageSpec>,
    pub snr_after_stage: Vec<bool>,
    pub variant: Variant,
    pub num_classes: usize,
    pub reduction: usize,
    pub eps: f64,
    pub input_channels: usize,
}

impl ModelSpec {
    /// Default topology: 3x3 convs of widths 16/32/64/64 with strides
    /// 2/2/2/1, normalization after every stage for the non-baseline
    /// variants, K classes.
    ///
    /// Bare IN never goes after the final stage: the global average pool
    /// of an instance-normalized map is the constant beta, so a trailing
    /// IN starves the classifier of its input. Restitution adds the gated
    /// residual back, which is what lets the snr variants keep a module
    /// there.
    pub fn default_toy(variant: Variant, num_classes: usize) -> Self {
        let stages = vec![
            StageSpec { out_channels: 16, stride: 2 },
            StageSpec { out_channels: 32, stride: 2 },
            StageSpec { out_channels: 64, stride: 2 },
            StageSpec { out_channels: 64, stride: 1 },
        ];
        let enabled = variant != Variant::Baseline;
        let mut snr_after_stage = vec![enabled; stages.len()];
        if variant == Variant::InOnly {
            *snr_after_stage.last_mut().unwrap() = false;
        }
        ModelSpec {
            stages,
            snr_after_stage,
            variant,
            num_classes,
            reduction: snr::DEFAULT_REDUCTION,
            eps: snr::DEFAULT_EPS,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Construction("model needs at least one stage".into()));
        }
        if self.snr_after_stage.len() != self.stages.len() {
            return Err(Error::Construction(format!(
                "snr_after_stage has {} entries for {} stages",
                self.snr_after_stage.len(),
                self.stages.len()
            )));
        }
        if self.variant == Variant::Baseline && self.snr_after_stage.iter().any(|&b| b) {
            return Err(Error::Construction(
                "baseline variant must have snr_after_stage all false".into(),
            ));
        }
        if self.num_classes == 0 || self.reduction == 0 || self.input_channels == 0 {
            return Err(Error::Construction(
                "num_classes, reduction, input_channels must be >= 1".into(),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.stride == 0 {
                return Err(Error::Construction(format!(
                    "stage {i}: out_channels and stride must be >= 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum StageNorm<S> {
    None,
    InstanceNorm { gamma: TensorData<S>, beta: TensorData<S> },
    Snr(SnrParams<S>),
}

#[derive(Clone, Debug)]
pub struct StageParams<S> {
    pub conv_w: TensorData<S>,
    pub conv_b: TensorData<S>,
    pub norm: StageNorm<S>,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub spec: ModelSpec,
    pub stages: Vec<StageParams<S>>,
    pub head_w: TensorData<S>,
    pub head_b: TensorData<S>,
}

/// Build and initialize a model. Conv and head weights draw from streams
/// keyed only by stage index, so all variants share backbone
/// initialization under the same seed.
pub fn build_model<S: Scalar>(spec: &ModelSpec, init_seed: u64) -> Result<Model<S>> {
    spec.validate()?;
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut cin = spec.input_channels;
    for (i, st) in spec.stages.iter().enumerate() {
        let cout = st.out_channels;
        let fan_in = 3 * 3 * cin;
        // He-style gain: keeps activation scale roughly constant through
        // the relu stages, which plain 1/sqrt(fan_in) does not.
        let lim = (6.0 / fan_in as f64).sqrt();
        let mut conv_rng = StreamRng::derive(init_seed, "init-conv", &[i as u64]);
        let conv_w = TensorData::uniform(vec![3, 3, cin, cout], -lim, lim, &mut conv_rng);
        let conv_b = TensorData::zeros(vec![cout]);
        let norm = if !spec.snr_after_stage[i] {
            StageNorm::None
        } else if spec.variant.uses_snr() {
            let mut snr_rng = StreamRng::derive(init_seed, "init-snr", &[i as u64]);
            StageNorm::Snr(SnrParams::init(
                cout,
                spec.num_classes,
                spec.reduction,
                spec.eps,
                &mut snr_rng,
            )?)
        } else {
            StageNorm::InstanceNorm {
                gamma: TensorData::filled(vec![cout], S::one()),
                beta: TensorData::zeros(vec![cout]),
            }
        };
        stages.push(StageParams { conv_w, conv_b, norm });
        cin = cout;
    }
    let lim = 1.0 / (cin as f64).sqrt();
    let mut head_rng = StreamRng::derive(init_seed, "init-head", &[]);
    let head_w = TensorData::uniform(vec![spec.num_classes, cin], -lim, lim, &mut head_rng);
    let head_b = TensorData::zeros(vec![spec.num_classes]);
    Ok(Model { spec: spec.clone(), stages, head_w, head_b })
}

impl<S: Scalar> Model<S> {
    /// Named parameters in canonical (checkpoint and optimizer) order.
    pub fn param_entries(&self) -> Vec<(String, &TensorData<S>)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.conv_w"), &st.conv_w));
            out.push((format!("stage{i}.conv_b"), &st.conv_b));
            match &st.norm {
                StageNorm::None => {}
                StageNorm::InstanceNorm { gamma, beta } => {
                    out.push((format!("stage{i}.in.gamma"), gamma));
                    out.push((format!("stage{i}.in.beta"), beta));
                }
                StageNorm::Snr(p) => {
                    for (name, t) in p.tensors() {
                        out.push((format!("stage{i}.snr.{name}"), t));
                    }
                }
            }
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut TensorData<S>)> {
        let mut out: Vec<(String, &mut TensorData<S>)> = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{i}.conv_w"), &mut st.conv_w));
            out.push((format!("stage{i}.conv_b"), &mut st.conv_b));
            match &mut st.norm {
                StageNorm::None => {}
                StageNorm::InstanceNorm { gamma, beta } => {
                    out.push((format!("stage{i}.in.gamma"), gamma));
                    out.push((format!("stage{i}.in.beta"), beta));
                }
                StageNorm::Snr(p) => {
                    out.push((format!("stage{i}.snr.gamma"), &mut p.gamma));
                    out.push((format!("stage{i}.snr.beta"), &mut p.beta));
                    out.push((format!("stage{i}.snr.w1"), &mut p.w1));
                    out.push((format!("stage{i}.snr.b1"), &mut p.b1));
                    out.push((format!("stage{i}.snr.w2"), &mut p.w2));
                    out.push((format!("stage{i}.snr.b2"), &mut p.b2));
                    out.push((format!("stage{i}.snr.w_phi"), &mut p.w_phi));
                    out.push((format!("stage{i}.snr.b_phi"), &mut p.b_phi));
                }
            }
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Indices (into `spec.stages`) of stages carrying an SNR module.
    pub fn snr_stage_indices(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .filter_map(|(i, st)| matches!(st.norm, StageNorm::Snr(_)).then_some(i))
            .collect()
    }

    pub fn lease(&self, g: &mut Graph<S>) -> LeasedModel<S> {
        let stages = self
            .stages
            .iter()
            .map(|st| LeasedStage {
                conv_w: g.param(&st.conv_w),
                conv_b: g.param(&st.conv_b),
                stride: 0, // filled below from spec
                norm: match &st.norm {
                    StageNorm::None => LeasedNorm::None,
                    StageNorm::InstanceNorm { gamma, beta } => LeasedNorm::InstanceNorm {
                        gamma: g.param(gamma),
                        beta: g.param(beta),
                        eps: self.spec.eps,
                    },
                    StageNorm::Snr(p) => LeasedNorm::Snr(p.lease(g)),
                },
            })
            .collect::<Vec<_>>();
        let mut leased = LeasedModel {
            stages,
            head_w: g.param(&self.head_w),
            head_b: g.param(&self.head_b),
        };
        for (ls, st) in leased.stages.iter_mut().zip(&self.spec.stages) {
            ls.stride = st.stride;
        }
        leased
    }
}

#[derive(Clone)]
pub enum LeasedNorm<S> {
    None,
    InstanceNorm { gamma: Tensor<S>, beta: Tensor<S>, eps: f64 },
    Snr(SnrNodes<S>),
}

#[derive(Clone)]
pub struct LeasedStage<S> {
    pub conv_w: Tensor<S>,
    pub conv_b: Tensor<S>,
    pub stride: usize,
    pub norm: LeasedNorm<S>,
}

#[derive(Clone)]
pub struct LeasedModel<S> {
    pub stages: Vec<LeasedStage<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

impl<S: Scalar> LeasedModel<S> {
    /// Leased parameter tensors in the same order as
    /// `Model::param_entries`.
    pub fn flat(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.push(st.conv_w.clone());
            out.push(st.conv_b.clone());
            match &st.norm {
                LeasedNorm::None => {}
                LeasedNorm::InstanceNorm { gamma, beta, .. } => {
                    out.push(gamma.clone());
                    out.push(beta.clone());
                }
                LeasedNorm::Snr(n) => {
                    out.extend([
                        n.gamma.clone(),
                        n.beta.clone(),
                        n.w1.clone(),
                        n.b1.clone(),
                        n.w2.clone(),
                        n.b2.clone(),
                        n.w_phi.clone(),
                        n.b_phi.clone(),
                    ]);
                }
            }
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        out
    }

    /// SNR nodes per module, in stage order.
    pub fn snr_nodes(&self) -> Vec<&SnrNodes<S>> {
        self.stages
            .iter()
            .filter_map(|st| match &st.norm {
                LeasedNorm::Snr(n) => Some(n),
                _ => None,
            })
            .collect()
    }
}

/// Everything one sample's forward pass produces.
pub struct ForwardPass<S> {
    pub logits: Tensor<S>,
    /// Pooled final feature vector (the penultimate embedding).
    pub embedding: Tensor<S>,
    /// Per enabled SNR module, in stage order.
    pub snr_outputs: Vec<SnrOutputs<S>>,
}

/// Full forward pass over one [h, w, c] image, keeping the loss-side
/// branches of every SNR module.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    m: &LeasedModel<S>,
    image: &Tensor<S>,
) -> Result<ForwardPass<S>> {
    let mut x = image.clone();
    let mut snr_outputs = Vec::new();
    for st in &m.stages {
        let y = g.conv2d(&x, &st.conv_w, st.stride, 1)?;
        let y = g.add_channels(&y, &st.conv_b)?;
        let y = g.relu(&y)?;
        x = match &st.norm {
            LeasedNorm::None => y,
            LeasedNorm::InstanceNorm { gamma, beta, eps } => {
                snr::instance_normalize(g, &y, gamma, beta, *eps)?
            }
            LeasedNorm::Snr(nodes) => {
                let out = snr_forward(g, &y, nodes)?;
                let next = out.f_plus.clone();
                snr_outputs.push(out);
                next
            }
        };
    }
    let embedding = g.global_avg_pool(&x)?;
    let logits = g.matvec(&m.head_w, &embedding)?;
    let logits = g.add(&logits, &m.head_b)?;
    Ok(ForwardPass { logits, embedding, snr_outputs })
}

/// Output-path-only forward (the contaminated branches are never built).
pub fn forward_inference<S: Scalar>(
    g: &mut Graph<S>,
    m: &LeasedModel<S>,
    image: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut x = image.clone();
    for st in &m.stages {
        let y = g.conv2d(&x, &st.conv_w, st.stride, 1)?;
        let y = g.add_channels(&y, &st.conv_b)?;
        let y = g.relu(&y)?;
        x = match &st.norm {
            LeasedNorm::None => y,
            LeasedNorm::InstanceNorm { gamma, beta, eps } => {
                snr::instance_normalize(g, &y, gamma, beta, *eps)?
            }
            LeasedNorm::Snr(nodes) => snr_forward_inference(g, &y, nodes)?,
        };
    }
    let embedding = g.global_avg_pool(&x)?;
    let logits = g.matvec(&m.head_w, &embedding)?;
    let logits = g.add(&logits, &m.head_b)?;
    Ok((logits, embedding))
}

/// Top-1 prediction with ties broken toward the lowest class index.
pub fn argmax_lowest<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snr::param_count;

    #[test]
    fn default_specs_validate() {
        for v in Variant::ALL {
            ModelSpec::default_toy(v, 4).validate().unwrap();
        }
    }

    #[test]
    fn baseline_with_snr_flags_is_rejected() {
        let mut spec = ModelSpec::default_toy(Variant::Baseline, 4);
        spec.snr_after_stage[1] = true;
        assert!(matches!(spec.validate(), Err(Error::Construction(_))));
    }

    #[test]
    fn param_delta_matches_formula() {
        let base: Model<f64> = build_model(&ModelSpec::default_toy(Variant::Baseline, 4), 1).unwrap();
        let snr: Model<f64> = build_model(&ModelSpec::default_toy(Variant::Snr, 4), 1).unwrap();
        let expected: usize = [16, 32, 64, 64].iter().map(|&c| param_count(c, 16, 4)).sum();
        assert_eq!(snr.num_params() - base.num_params(), expected);

        // in_only skips the final stage (bare IN there starves the head)
        let in_only: Model<f64> = build_model(&ModelSpec::default_toy(Variant::InOnly, 4), 1).unwrap();
        let expected_in: usize = [16, 32, 64].iter().map(|&c| 2 * c).sum();
        assert_eq!(in_only.num_params() - base.num_params(), expected_in);
    }

    #[test]
    fn zero_image_yields_finite_logits() {
        for v in Variant::ALL {
            let model: Model<f64> = build_model(&ModelSpec::default_toy(v, 4), 2).unwrap();
            let mut g = Graph::new();
            let leased = model.lease(&mut g);
            let img = g.input(TensorData::zeros(vec![32, 32, 3]));
            let out = forward(&mut g, &leased, &img).unwrap();
            assert_eq!(out.logits.shape(), &[4]);
            assert!(out.logits.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn snr_and_no_dual_loss_share_forward_values() {
        let a: Model<f64> = build_model(&ModelSpec::default_toy(Variant::Snr, 4), 3).unwrap();
        let b: Model<f64> = build_model(&ModelSpec::default_toy(Variant::SnrNoDualLoss, 4), 3).unwrap();
        let mut rng = StreamRng::from_seed(50);
        let img = TensorData::<f64>::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);

        let run = |m: &Model<f64>| {
            let mut g = Graph::new();
            let leased = m.lease(&mut g);
            let it = g.input(img.clone());
            forward(&mut g, &leased, &it).unwrap().logits.data().to_vec()
        };
        let la = run(&a);
        let lb = run(&b);
        assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn variants_share_backbone_initialization() {
        let base: Model<f64> = build_model(&ModelSpec::default_toy(Variant::Baseline, 4), 7).unwrap();
        let snr: Model<f64> = build_model(&ModelSpec::default_toy(Variant::Snr, 4), 7).unwrap();
        assert_eq!(base.stages[0].conv_w, snr.stages[0].conv_w);
        assert_eq!(base.head_w, snr.head_w);
    }

    #[test]
    fn inference_matches_full_forward() {
        let model: Model<f64> = build_model(&ModelSpec::default_toy(Variant::Snr, 4), 4).unwrap();
        let mut rng = StreamRng::from_seed(51);
        let img = TensorData::<f64>::uniform(vec![32, 32, 3], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let leased = model.lease(&mut g);
        let it = g.input(img);
        let full = forward(&mut g, &leased, &it).unwrap();
        let (lean_logits, _) = forward_inference(&mut g, &leased, &it).unwrap();
        assert!(full
            .logits
            .data()
            .iter()
            .zip(lean_logits.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(full.snr_outputs.len(), 4);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_lowest(&[0.5f64, 0.5, 0.1]), 0);
        assert_eq!(argmax_lowest(&[0.1f64, 0.7, 0.7]), 1);
    }
}
