use snr_core::gradcheck::grad_check_many;
use snr_core::model::{build_model, forward, LeasedModel, LeasedNorm, Model, ModelSpec, StageSpec, Variant};
use snr_core::rng::StreamRng;
use snr_core::tensor::{Graph, TensorData};

fn main() {
    let mut spec = ModelSpec::default_toy(Variant::Snr, 3);
    spec.stages = vec![StageSpec { out_channels: 4, stride: 2 }, StageSpec { out_channels: 6, stride: 1 }];
    spec.snr_after_stage = vec![true, true];
    let model: Model<f64> = build_model(&spec, 5).unwrap();
    let mut rng = StreamRng::from_seed(60);
    let img = TensorData::<f64>::uniform(vec![8, 8, 3], 0.0, 1.0, &mut rng);

    // flatten all params as gradcheck inputs
    let mut inputs: Vec<TensorData<f64>> = vec![img];
    for (_, t) in model.param_entries() { inputs.push(t.clone()); }
    let spec2 = spec.clone();
    let err = grad_check_many(&move |g: &mut Graph<f64>, xs| {
        // rebuild a model from leased tensors in param_entries order
        let mut m: Model<f64> = build_model(&spec2, 5).unwrap();
        {
            let mut entries = m.param_entries_mut();
            for (slot, x) in entries.iter_mut().zip(&xs[1..]) {
                *slot.1 = x.to_data();
            }
        }
        let leased: LeasedModel<f64> = m.lease(g);
        // swap leased params for the gradcheck-tracked tensors
        let mut leased = leased;
        let flat_src: Vec<_> = xs[1..].to_vec();
        let mut i = 0;
        for st in leased.stages.iter_mut() {
            st.conv_w = flat_src[i].clone(); i += 1;
            st.conv_b = flat_src[i].clone(); i += 1;
            if let LeasedNorm::Snr(n) = &mut st.norm {
                n.gamma = flat_src[i].clone(); i += 1;
                n.beta = flat_src[i].clone(); i += 1;
                n.w1 = flat_src[i].clone(); i += 1;
                n.b1 = flat_src[i].clone(); i += 1;
                n.w2 = flat_src[i].clone(); i += 1;
                n.b2 = flat_src[i].clone(); i += 1;
                n.w_phi = flat_src[i].clone(); i += 1;
                n.b_phi = flat_src[i].clone(); i += 1;
            }
        }
        leased.head_w = flat_src[i].clone(); i += 1;
        leased.head_b = flat_src[i].clone();
        let fw = forward(g, &leased, &xs[0])?;
        let ce = g.cross_entropy(&fw.logits, 1)?;
        // plus dual losses
        let snr_nodes: Vec<_> = leased.stages.iter().filter_map(|st| match &st.norm { LeasedNorm::Snr(n) => Some(n.clone()), _ => None }).collect();
        let mut total = ce;
        for (out, nodes) in fw.snr_outputs.iter().zip(&snr_nodes) {
            let d = snr_core::loss::classification_dual_loss(g, &out.f_norm, &out.f_plus, &out.f_minus, nodes)?;
            let pair = g.add(&d.l_plus, &d.l_minus)?;
            total = g.add(&total, &pair)?;
        }
        Ok(total)
    }, &inputs, 1e-5).unwrap();
    println!("full composite max rel err = {err:.3e}");
}
