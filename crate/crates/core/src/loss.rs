//! Entropy machinery and the dual restitution loss.
//!
//! The two sides compare class-likelihood ambiguity before and after
//! restitution: the enhanced feature should predict with lower entropy
//! than the normalized one, the contaminated feature with higher entropy.
//! Three task forms differ only in how feature vectors reach the entropy
//! head: image-pooled (classification), per-pixel (segmentation), or
//! box-pooled (detection).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snr::SnrNodes;
use crate::tensor::{Graph, Tensor};

/// Integer pixel boxes (x0, y0, x1, y1), inclusive-exclusive, with a
/// ground-truth class per box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoxSet {
    pub boxes: Vec<(usize, usize, usize, usize)>,
    pub classes: Vec<usize>,
}

impl BoxSet {
    pub fn new(boxes: Vec<(usize, usize, usize, usize)>, classes: Vec<usize>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(Error::contract(format!(
                "box set has {} boxes but {} classes",
                boxes.len(),
                classes.len()
            )));
        }
        Ok(BoxSet { boxes, classes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// One module's dual loss, still attached to the graph, along with the
/// three entropies it compared.
#[derive(Clone)]
pub struct DualLoss<S> {
    pub l_plus: Tensor<S>,
    pub l_minus: Tensor<S>,
    pub h_norm: Tensor<S>,
    pub h_plus: Tensor<S>,
    pub h_minus: Tensor<S>,
}

impl<S: Scalar> DualLoss<S> {
    pub fn values(&self) -> (f64, f64) {
        (self.l_plus.scalar_value().as_f64(), self.l_minus.scalar_value().as_f64())
    }
}

/// Plain-number loss report: per-module pairs and their sum.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l_plus: f64,
    pub l_minus: f64,
    pub l_snr: f64,
    pub per_module: Vec<(usize, f64, f64)>,
}

impl LossBundle {
    pub fn from_modules(per_module: Vec<(usize, f64, f64)>) -> Self {
        let l_plus = per_module.iter().map(|m| m.1).sum();
        let l_minus = per_module.iter().map(|m| m.2).sum();
        LossBundle { l_plus, l_minus, l_snr: l_plus + l_minus, per_module }
    }
}

/// Shannon entropy of a probability vector, natural log. The input must
/// already be normalized: components nonnegative and summing to 1 within
/// 1e-5.
pub fn entropy<S: Scalar>(g: &mut Graph<S>, p: &Tensor<S>) -> Result<Tensor<S>> {
    if p.shape().len() != 1 {
        return Err(Error::contract(format!("entropy expects [K], got {:?}", p.shape())));
    }
    let mut sum = 0.0;
    for &v in p.data() {
        if v.as_f64() < 0.0 {
            return Err(Error::contract(format!("entropy input has negative component {}", v.as_f64())));
        }
        sum += v.as_f64();
    }
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::contract(format!("entropy input sums to {sum}, not 1")));
    }
    g.entropy_rows(p)
}

/// Standard task loss on logits; negative log-likelihood of the label.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: &Tensor<S>, label: usize) -> Result<Tensor<S>> {
    g.cross_entropy(logits, label)
}

/// Entropy of the head's prediction on a spatially pooled map; the
/// quantity evaluation reports per module.
pub fn pooled_phi_entropy<S: Scalar>(
    g: &mut Graph<S>,
    f_map: &Tensor<S>,
    p: &SnrNodes<S>,
) -> Result<Tensor<S>> {
    let v = g.global_avg_pool(f_map)?;
    phi_entropy_vec(g, &v, p)
}

/// phi on a pooled feature vector: affine map to K logits, softmax, entropy.
fn phi_entropy_vec<S: Scalar>(g: &mut Graph<S>, f: &Tensor<S>, p: &SnrNodes<S>) -> Result<Tensor<S>> {
    let logits = g.matvec(&p.w_phi, f)?;
    let logits = g.add(&logits, &p.b_phi)?;
    let probs = g.softmax(&logits)?;
    g.entropy_rows(&probs)
}

/// phi applied at every spatial position; returns the mean entropy over
/// pixels as a scalar.
fn phi_mean_entropy_pixels<S: Scalar>(g: &mut Graph<S>, f: &Tensor<S>, p: &SnrNodes<S>) -> Result<Tensor<S>> {
    let sh = f.shape();
    if sh.len() != 3 {
        return Err(Error::dim(format!("per-pixel entropy expects [h,w,c], got {sh:?}")));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let flat = g.reshape(f, vec![h * w, c])?;
    let logits = g.matmul_nt(&flat, &p.w_phi)?;
    let logits = g.add_rows(&logits, &p.b_phi)?;
    let probs = g.softmax(&logits)?;
    let ents = g.entropy_rows(&probs)?;
    g.mean_all(&ents)
}

fn dual_from_entropies<S: Scalar>(
    g: &mut Graph<S>,
    h_norm: Tensor<S>,
    h_plus: Tensor<S>,
    h_minus: Tensor<S>,
) -> Result<DualLoss<S>> {
    let d_plus = g.sub(&h_plus, &h_norm)?;
    let l_plus = g.softplus(&d_plus)?;
    let d_minus = g.sub(&h_norm, &h_minus)?;
    let l_minus = g.softplus(&d_minus)?;
    Ok(DualLoss { l_plus, l_minus, h_norm, h_plus, h_minus })
}

/// Image-level form: spatially average-pool each map, then compare the
/// entropy-head outputs.
pub fn classification_dual_loss<S: Scalar>(
    g: &mut Graph<S>,
    f_norm: &Tensor<S>,
    f_plus: &Tensor<S>,
    f_minus: &Tensor<S>,
    p: &SnrNodes<S>,
) -> Result<DualLoss<S>> {
    let v_norm = g.global_avg_pool(f_norm)?;
    let v_plus = g.global_avg_pool(f_plus)?;
    let v_minus = g.global_avg_pool(f_minus)?;
    let h_norm = phi_entropy_vec(g, &v_norm, p)?;
    let h_plus = phi_entropy_vec(g, &v_plus, p)?;
    let h_minus = phi_entropy_vec(g, &v_minus, p)?;
    dual_from_entropies(g, h_norm, h_plus, h_minus)
}

/// Pixel-level form: entropies are averaged over all positions first and
/// softplus is applied once to the difference of the averages.
pub fn segmentation_dual_loss<S: Scalar>(
    g: &mut Graph<S>,
    f_norm: &Tensor<S>,
    f_plus: &Tensor<S>,
    f_minus: &Tensor<S>,
    p: &SnrNodes<S>,
) -> Result<DualLoss<S>> {
    let h_norm = phi_mean_entropy_pixels(g, f_norm, p)?;
    let h_plus = phi_mean_entropy_pixels(g, f_plus, p)?;
    let h_minus = phi_mean_entropy_pixels(g, f_minus, p)?;
    dual_from_entropies(g, h_norm, h_plus, h_minus)
}

/// Region-level form: pool inside each ground-truth box, average the box
/// entropies, then compare the averages.
pub fn detection_dual_loss<S: Scalar>(
    g: &mut Graph<S>,
    f_norm: &Tensor<S>,
    f_plus: &Tensor<S>,
    f_minus: &Tensor<S>,
    boxes: &BoxSet,
    p: &SnrNodes<S>,
) -> Result<DualLoss<S>> {
    if boxes.is_empty() {
        return Err(Error::contract("detection dual loss needs at least one box"));
    }
    let mut hs_norm = Vec::with_capacity(boxes.len());
    let mut hs_plus = Vec::with_capacity(boxes.len());
    let mut hs_minus = Vec::with_capacity(boxes.len());
    for &bx in &boxes.boxes {
        let v_norm = g.region_avg_pool(f_norm, bx)?;
        let v_plus = g.region_avg_pool(f_plus, bx)?;
        let v_minus = g.region_avg_pool(f_minus, bx)?;
        hs_norm.push(phi_entropy_vec(g, &v_norm, p)?);
        hs_plus.push(phi_entropy_vec(g, &v_plus, p)?);
        hs_minus.push(phi_entropy_vec(g, &v_minus, p)?);
    }
    let h_norm = g.mean_scalars(&hs_norm)?;
    let h_plus = g.mean_scalars(&hs_plus)?;
    let h_minus = g.mean_scalars(&hs_minus)?;
    dual_from_entropies(g, h_norm, h_plus, h_minus)
}

/// total = task + lambda * sum over modules of (l_plus + l_minus).
pub fn aggregate_snr_loss<S: Scalar>(
    g: &mut Graph<S>,
    task_loss: &Tensor<S>,
    modules: &[DualLoss<S>],
    lambda: f64,
) -> Result<Tensor<S>> {
    if lambda < 0.0 {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda}")));
    }
    if modules.is_empty() {
        return Ok(task_loss.clone());
    }
    let mut acc = g.add(&modules[0].l_plus, &modules[0].l_minus)?;
    for m in &modules[1..] {
        let pair = g.add(&m.l_plus, &m.l_minus)?;
        acc = g.add(&acc, &pair)?;
    }
    let weighted = g.scale(&acc, lambda)?;
    g.add(task_loss, &weighted)
}
