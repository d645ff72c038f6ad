//! Style normalization and restitution.
//!
//! One module normalizes a feature map with instance normalization, then
//! splits the removed residual through a channel-attention gate into a
//! task-relevant part (restituted onto the output path) and a
//! task-irrelevant part (kept only for the loss side).

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorData};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_EPS: f64 = 1e-5;

/// ceil(c/r), floored at 1 so the bottleneck survives c < r.
pub fn bottleneck_width(c: usize, r: usize) -> usize {
    ((c + r - 1) / r).max(1)
}

/// Learnable parameters count of one module with `c` channels, reduction
/// `r`, and a `k`-class entropy head:
/// `2c + ceil(c/r)*c + ceil(c/r) + c*ceil(c/r) + c + k*c + k`.
pub fn param_count(c: usize, r: usize, k: usize) -> usize {
    let m = bottleneck_width(c, r);
    2 * c + (m * c + m) + (c * m + c) + (k * c + k)
}

/// Learnable state of one module. The gate biases are always stored and
/// counted; `bias_enabled` turns them off in the forward path for the
/// strict-equation mode used by the oracle tests.
#[derive(Clone, Debug)]
pub struct SnrParams<S> {
    pub gamma: TensorData<S>,
    pub beta: TensorData<S>,
    pub w1: TensorData<S>,
    pub b1: TensorData<S>,
    pub w2: TensorData<S>,
    pub b2: TensorData<S>,
    pub w_phi: TensorData<S>,
    pub b_phi: TensorData<S>,
    pub reduction: usize,
    pub eps: f64,
    pub bias_enabled: bool,
}

impl<S: Scalar> SnrParams<S> {
    /// gamma = 1, beta = 0, weights uniform in +-1/sqrt(fan_in), biases 0.
    /// Weight draws come from `rng` in field order (w1, w2, w_phi).
    pub fn init(c: usize, k: usize, reduction: usize, eps: f64, rng: &mut StreamRng) -> Result<Self> {
        if c == 0 || k == 0 || reduction == 0 {
            return Err(Error::Construction(format!(
                "snr params need c, k, reduction >= 1 (got c={c}, k={k}, r={reduction})"
            )));
        }
        let m = bottleneck_width(c, reduction);
        let lim_c = 1.0 / (c as f64).sqrt();
        let lim_m = 1.0 / (m as f64).sqrt();
        Ok(SnrParams {
            gamma: TensorData::filled(vec![c], S::one()),
            beta: TensorData::zeros(vec![c]),
            w1: TensorData::uniform(vec![m, c], -lim_c, lim_c, rng),
            b1: TensorData::zeros(vec![m]),
            w2: TensorData::uniform(vec![c, m], -lim_m, lim_m, rng),
            b2: TensorData::zeros(vec![c]),
            w_phi: TensorData::uniform(vec![k, c], -lim_c, lim_c, rng),
            b_phi: TensorData::zeros(vec![k]),
            reduction,
            eps,
            bias_enabled: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.w_phi.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        param_count(self.channels(), self.reduction, self.num_classes())
    }

    /// Parameter tensors in their canonical (checkpoint) order.
    pub fn tensors(&self) -> [(&'static str, &TensorData<S>); 8] {
        [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w_phi", &self.w_phi),
            ("b_phi", &self.b_phi),
        ]
    }

    pub fn lease(&self, g: &mut Graph<S>) -> SnrNodes<S> {
        SnrNodes {
            gamma: g.param(&self.gamma),
            beta: g.param(&self.beta),
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
            w_phi: g.param(&self.w_phi),
            b_phi: g.param(&self.b_phi),
            eps: self.eps,
            bias_enabled: self.bias_enabled,
        }
    }
}

/// Graph-attached view of `SnrParams` for one forward pass.
#[derive(Clone)]
pub struct SnrNodes<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub w_phi: Tensor<S>,
    pub b_phi: Tensor<S>,
    pub eps: f64,
    pub bias_enabled: bool,
}

/// The feature maps one forward pass yields. `f_plus` is the output path;
/// `f_norm`, `f_minus`, and the rest exist for the loss side and analysis.
#[derive(Clone)]
pub struct SnrOutputs<S> {
    pub f_norm: Tensor<S>,
    pub residual: Tensor<S>,
    pub r_plus: Tensor<S>,
    pub r_minus: Tensor<S>,
    pub gate: Tensor<S>,
    pub f_plus: Tensor<S>,
    pub f_minus: Tensor<S>,
}

/// Instance normalization of a single sample: per-channel statistics over
/// spatial positions, then the learned affine. Statistics are never mixed
/// across samples; callers map this over the batch.
pub fn instance_normalize<S: Scalar>(
    g: &mut Graph<S>,
    f: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let mu = g.global_avg_pool(f)?;
    let centered = g.sub_channels(f, &mu)?;
    let sq = g.mul(&centered, &centered)?;
    let var = g.global_avg_pool(&sq)?;
    let var_eps = g.add_scalar(&var, eps)?;
    let sigma = g.sqrt(&var_eps)?;
    let inv_sigma = g.recip(&sigma)?;
    let normalized = g.mul_channels(&centered, &inv_sigma)?;
    let scaled = g.mul_channels(&normalized, gamma)?;
    g.add_channels(&scaled, beta)
}

/// R = F - F_norm: the information normalization removed.
pub fn compute_residual<S: Scalar>(
    g: &mut Graph<S>,
    f: &Tensor<S>,
    f_norm: &Tensor<S>,
) -> Result<Tensor<S>> {
    g.sub(f, f_norm)
}

/// a = sigmoid(W2 relu(W1 pool(R) + b1) + b2); biases are skipped when the
/// params run in strict-equation mode.
pub fn channel_gate<S: Scalar>(
    g: &mut Graph<S>,
    residual: &Tensor<S>,
    p: &SnrNodes<S>,
) -> Result<Tensor<S>> {
    let pooled = g.global_avg_pool(residual)?;
    let mut hidden = g.matvec(&p.w1, &pooled)?;
    if p.bias_enabled {
        hidden = g.add(&hidden, &p.b1)?;
    }
    let activated = g.relu(&hidden)?;
    let mut out = g.matvec(&p.w2, &activated)?;
    if p.bias_enabled {
        out = g.add(&out, &p.b2)?;
    }
    g.sigmoid(&out)
}

/// Complementary channel masks: R+ = a (.) R, R- = (1 - a) (.) R.
pub fn disentangle<S: Scalar>(
    g: &mut Graph<S>,
    residual: &Tensor<S>,
    gate: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if residual.shape().len() != 3 || gate.shape() != [residual.shape()[2]] {
        return Err(Error::dim(format!(
            "disentangle: residual {:?} with gate {:?}",
            residual.shape(),
            gate.shape()
        )));
    }
    let r_plus = g.mul_channels(residual, gate)?;
    let neg = g.scale(gate, -1.0)?;
    let complement = g.add_scalar(&neg, 1.0)?;
    let r_minus = g.mul_channels(residual, &complement)?;
    Ok((r_plus, r_minus))
}

/// Full module: normalize, take the residual, gate it, and restitute. The
/// contaminated branch feeds only the loss; `snr_forward_inference`
/// produces the identical output path without materializing it.
pub fn snr_forward<S: Scalar>(
    g: &mut Graph<S>,
    f: &Tensor<S>,
    p: &SnrNodes<S>,
) -> Result<SnrOutputs<S>> {
    let f_norm = instance_normalize(g, f, &p.gamma, &p.beta, p.eps)?;
    let residual = compute_residual(g, f, &f_norm)?;
    let gate = channel_gate(g, &residual, p)?;
    let (r_plus, r_minus) = disentangle(g, &residual, &gate)?;
    let f_plus = g.add(&f_norm, &r_plus)?;
    let f_minus = g.add(&f_norm, &r_minus)?;
    Ok(SnrOutputs { f_norm, residual, r_plus, r_minus, gate, f_plus, f_minus })
}

/// Output path only.
pub fn snr_forward_inference<S: Scalar>(
    g: &mut Graph<S>,
    f: &Tensor<S>,
    p: &SnrNodes<S>,
) -> Result<Tensor<S>> {
    let f_norm = instance_normalize(g, f, &p.gamma, &p.beta, p.eps)?;
    let residual = compute_residual(g, f, &f_norm)?;
    let gate = channel_gate(g, &residual, p)?;
    let r_plus = g.mul_channels(&residual, &gate)?;
    g.add(&f_norm, &r_plus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;

    fn leased_input(g: &mut Graph<f64>, t: &TensorData<f64>) -> Tensor<f64> {
        g.input(t.clone())
    }

    fn random_params(c: usize, k: usize, r: usize, seed: u64) -> SnrParams<f64> {
        let mut rng = StreamRng::from_seed(seed);
        SnrParams::init(c, k, r, DEFAULT_EPS, &mut rng).unwrap()
    }

    #[test]
    fn in_constant_channel_goes_to_zero() {
        let mut g = Graph::<f64>::new();
        let f = g.input(TensorData::filled(vec![2, 3, 1], 4.2));
        let gamma = g.input(TensorData::filled(vec![1], 1.0));
        let beta = g.input(TensorData::zeros(vec![1]));
        let out = instance_normalize(&mut g, &f, &gamma, &beta, 1e-5).unwrap();
        // the numerator is zero up to summation rounding amplified by 1/sqrt(eps)
        for &v in out.data() {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn in_two_point_channel() {
        // values {1, 3}: gamma=1, beta=0, eps->0 gives {-1, +1};
        // gamma=2, beta=3 gives {1, 5}
        let mut g = Graph::<f64>::new();
        let f = g.input(TensorData::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap());
        let gamma = g.input(TensorData::filled(vec![1], 1.0));
        let beta = g.input(TensorData::zeros(vec![1]));
        let out = instance_normalize(&mut g, &f, &gamma, &beta, 0.0).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0).abs() < 1e-12);

        let gamma2 = g.input(TensorData::filled(vec![1], 2.0));
        let beta2 = g.input(TensorData::filled(vec![1], 3.0));
        let out2 = instance_normalize(&mut g, &f, &gamma2, &beta2, 0.0).unwrap();
        assert!((out2.data()[0] - 1.0).abs() < 1e-12);
        assert!((out2.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn in_is_invariant_to_per_channel_affine_restyle() {
        let mut rng = StreamRng::from_seed(31);
        let f = TensorData::<f64>::uniform(vec![5, 4, 3], 0.0, 1.0, &mut rng);
        let scales = [1.7, 0.4, 2.3];
        let shifts = [0.3, -0.2, 0.05];
        let mut styled = f.clone();
        for px in styled.data_mut().chunks_exact_mut(3) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = scales[k] * *v + shifts[k];
            }
        }
        let mut g = Graph::new();
        let gamma = g.input(TensorData::filled(vec![3], 1.0));
        let beta = g.input(TensorData::zeros(vec![3]));
        let a = leased_input(&mut g, &f);
        let b = leased_input(&mut g, &styled);
        let na = instance_normalize(&mut g, &a, &gamma, &beta, 0.0).unwrap();
        let nb = instance_normalize(&mut g, &b, &gamma, &beta, 0.0).unwrap();
        for (&x, &y) in na.data().iter().zip(nb.data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn residual_reconstructs_input_exactly() {
        let mut rng = StreamRng::from_seed(32);
        let f = TensorData::<f64>::uniform(vec![4, 4, 2], -1.0, 1.0, &mut rng);
        let p = random_params(2, 3, 2, 7);
        let mut g = Graph::new();
        let nodes = p.lease(&mut g);
        let ft = leased_input(&mut g, &f);
        let out = snr_forward(&mut g, &ft, &nodes).unwrap();
        // f_norm + residual == F
        let recon = g.add(&out.f_norm, &out.residual).unwrap();
        for (&x, &y) in recon.data().iter().zip(f.data()) {
            let rel = (x - y).abs() / y.abs().max(1.0);
            assert!(rel < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn residual_of_identical_maps_is_zero_and_constant_input_passes_through() {
        let mut g = Graph::new();
        let f = g.input(TensorData::filled(vec![2, 2, 1], 5.0));
        let z = compute_residual(&mut g, &f, &f).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        // gamma=1, beta=0, constant channel v: F_norm = 0 so R = F
        let gamma = g.input(TensorData::filled(vec![1], 1.0));
        let beta = g.input(TensorData::zeros(vec![1]));
        let fnorm = instance_normalize(&mut g, &f, &gamma, &beta, 1e-5).unwrap();
        let r = compute_residual(&mut g, &f, &fnorm).unwrap();
        assert!(r.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn gate_is_half_for_zero_weights() {
        let mut rng = StreamRng::from_seed(33);
        let mut p = random_params(8, 4, 4, 8);
        p.w1 = TensorData::zeros(vec![2, 8]);
        p.w2 = TensorData::zeros(vec![8, 2]);
        let r = TensorData::<f64>::uniform(vec![3, 3, 8], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let nodes = p.lease(&mut g);
        let rt = leased_input(&mut g, &r);
        let gate = channel_gate(&mut g, &rt, &nodes).unwrap();
        for &v in gate.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn gate_matches_step_by_step_formula() {
        // independent direct evaluation of the gate equation, c=8, r=4
        let mut rng = StreamRng::from_seed(34);
        let mut p = random_params(8, 4, 4, 9);
        p.bias_enabled = false; // strict-equation mode
        let r = TensorData::<f64>::uniform(vec![5, 3, 8], -2.0, 2.0, &mut rng);

        let mut g = Graph::new();
        let nodes = p.lease(&mut g);
        let rt = leased_input(&mut g, &r);
        let gate = channel_gate(&mut g, &rt, &nodes).unwrap();

        // pool
        let mut pooled = [0.0f64; 8];
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..8 {
                    pooled[k] += r.at3(i, j, k);
                }
            }
        }
        for v in pooled.iter_mut() {
            *v /= 15.0;
        }
        // W1 (2x8), relu, W2 (8x2), sigmoid
        let m = 2;
        let mut hidden = vec![0.0f64; m];
        for i in 0..m {
            for k in 0..8 {
                hidden[i] += p.w1.data()[i * 8 + k] * pooled[k];
            }
            hidden[i] = hidden[i].max(0.0);
        }
        for k in 0..8 {
            let mut z = 0.0;
            for i in 0..m {
                z += p.w2.data()[k * m + i] * hidden[i];
            }
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!(
                (gate.data()[k] - expect).abs() < 1e-12,
                "gate[{k}] {} vs {expect}",
                gate.data()[k]
            );
        }
    }

    #[test]
    fn gate_strictly_inside_unit_interval() {
        for seed in 0..10 {
            let p = random_params(16, 4, 16, seed);
            let mut rng = StreamRng::from_seed(seed + 100);
            let r = TensorData::<f64>::uniform(vec![4, 4, 16], -30.0, 30.0, &mut rng);
            let mut g = Graph::new();
            let nodes = p.lease(&mut g);
            let rt = leased_input(&mut g, &r);
            let gate = channel_gate(&mut g, &rt, &nodes).unwrap();
            for &v in gate.data() {
                assert!(v > 0.0 && v < 1.0, "gate {v} out of (0,1)");
            }
        }
    }

    #[test]
    fn disentangle_edge_gates() {
        let mut rng = StreamRng::from_seed(35);
        let r = TensorData::<f64>::uniform(vec![3, 3, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let rt = leased_input(&mut g, &r);

        let ones = g.input(TensorData::filled(vec![4], 1.0));
        let (p1, m1) = disentangle(&mut g, &rt, &ones).unwrap();
        assert_eq!(p1.data(), r.data());
        assert!(m1.data().iter().all(|&v| v == 0.0));

        let half = g.input(TensorData::filled(vec![4], 0.5));
        let (p2, m2) = disentangle(&mut g, &rt, &half).unwrap();
        for ((&a, &b), &rv) in p2.data().iter().zip(m2.data()).zip(r.data()) {
            assert_eq!(a, b);
            assert!((a - rv / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn disentangle_complementarity_random_gate() {
        let mut rng = StreamRng::from_seed(36);
        let r = TensorData::<f64>::uniform(vec![4, 5, 6], -2.0, 2.0, &mut rng);
        let a = TensorData::<f64>::uniform(vec![6], 0.01, 0.99, &mut rng);
        let mut g = Graph::new();
        let rt = leased_input(&mut g, &r);
        let at = g.input(a);
        let (rp, rm) = disentangle(&mut g, &rt, &at).unwrap();
        for ((&p, &m), &rv) in rp.data().iter().zip(rm.data()).zip(r.data()) {
            let rel = (p + m - rv).abs() / rv.abs().max(1.0);
            assert!(rel < 1e-15, "{p} + {m} vs {rv}");
        }
    }

    #[test]
    fn forward_with_zero_gate_weights_is_half_restitution() {
        // gamma=1, beta=0, zero gate weights: f_plus = F_norm + 0.5 R
        let mut rng = StreamRng::from_seed(37);
        let mut p = random_params(4, 4, 2, 10);
        p.w1 = TensorData::zeros(vec![2, 4]);
        p.w2 = TensorData::zeros(vec![4, 2]);
        let f = TensorData::<f64>::uniform(vec![4, 4, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let nodes = p.lease(&mut g);
        let ft = leased_input(&mut g, &f);
        let out = snr_forward(&mut g, &ft, &nodes).unwrap();
        for ((&fp, &fnm), &rv) in out.f_plus.data().iter().zip(out.f_norm.data()).zip(out.residual.data()) {
            assert!((fp - (fnm + 0.5 * rv)).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_path_matches_full_forward_bitwise() {
        let mut rng = StreamRng::from_seed(38);
        let p = random_params(6, 4, 3, 11);
        let f = TensorData::<f64>::uniform(vec![5, 5, 6], -1.0, 1.0, &mut rng);

        let mut g1 = Graph::new();
        let n1 = p.lease(&mut g1);
        let f1 = leased_input(&mut g1, &f);
        let full = snr_forward(&mut g1, &f1, &n1).unwrap();

        let mut g2 = Graph::new();
        let n2 = p.lease(&mut g2);
        let f2 = leased_input(&mut g2, &f);
        let lean = snr_forward_inference(&mut g2, &f2, &n2).unwrap();

        for (&a, &b) in full.f_plus.data().iter().zip(lean.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        // full gradient check through snr_forward + a scalar head, for the
        // input and every parameter
        let p = random_params(4, 3, 2, 12);
        let mut rng = StreamRng::from_seed(39);
        let f = TensorData::<f64>::uniform(vec![3, 3, 4], -1.0, 1.0, &mut rng);
        let w_plus = TensorData::<f64>::uniform(vec![3 * 3 * 4], -1.0, 1.0, &mut rng);
        let w_minus = TensorData::<f64>::uniform(vec![3 * 3 * 4], -1.0, 1.0, &mut rng);

        let inputs = vec![
            f,
            p.gamma.clone(),
            p.beta.clone(),
            p.w1.clone(),
            p.b1.clone(),
            p.w2.clone(),
            p.b2.clone(),
            p.w_phi.clone(),
            p.b_phi.clone(),
        ];
        let err = grad_check_many(
            &|g, xs| {
                let nodes = SnrNodes {
                    gamma: xs[1].clone(),
                    beta: xs[2].clone(),
                    w1: xs[3].clone(),
                    b1: xs[4].clone(),
                    w2: xs[5].clone(),
                    b2: xs[6].clone(),
                    w_phi: xs[7].clone(),
                    b_phi: xs[8].clone(),
                    eps: DEFAULT_EPS,
                    bias_enabled: true,
                };
                let out = snr_forward(g, &xs[0], &nodes)?;
                // scalar head touching both branches
                let wp = g.input(w_plus.clone());
                let wm = g.input(w_minus.clone());
                let fp = g.reshape(&out.f_plus, vec![36])?;
                let fm = g.reshape(&out.f_minus, vec![36])?;
                let sp = g.mul(&fp, &wp)?;
                let sm = g.mul(&fm, &wm)?;
                let tp = g.mean_all(&sp)?;
                let tm = g.mean_all(&sm)?;
                g.add(&tp, &tm)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(param_count(64, 16, 4), 968);
        assert_eq!(param_count(1, 16, 1), 8);
        // monotone in c for fixed r, k
        let mut prev = 0;
        for c in 1..64 {
            let n = param_count(c, 16, 4);
            assert!(n >= prev, "c={c}");
            prev = n;
        }
    }

    #[test]
    fn param_count_matches_enumeration() {
        for (c, k, r) in [(16, 4, 16), (8, 4, 4), (3, 2, 16), (64, 4, 16)] {
            let p = random_params(c, k, r, 13);
            let total: usize = p.tensors().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(total, param_count(c, r, k), "c={c} k={k} r={r}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = random_params(6, 4, 3, 14);
        let mut rng = StreamRng::from_seed(40);
        let f = TensorData::<f64>::uniform(vec![4, 4, 6], -1.0, 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let nodes = p.lease(&mut g);
            let ft = g.input(f.clone());
            let out = snr_forward(&mut g, &ft, &nodes).unwrap();
            out.f_plus.data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
