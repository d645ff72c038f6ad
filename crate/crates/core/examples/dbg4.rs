use snr_core::gradcheck::grad_check_many;
use snr_core::model::{build_model, forward, LeasedNorm, Model, ModelSpec, StageSpec, Variant};
use snr_core::rng::StreamRng;
use snr_core::tensor::{Graph, TensorData};

fn main() {
    let mut spec = ModelSpec::default_toy(Variant::Snr, 3);
    spec.stages = vec![StageSpec { out_channels: 4, stride: 2 }, StageSpec { out_channels: 6, stride: 1 }];
    spec.snr_after_stage = vec![true, true];
    let model: Model<f64> = build_model(&spec, 7).unwrap();
    let mut rng = StreamRng::from_seed(67);
    let img = TensorData::<f64>::uniform(vec![8, 8, 3], 0.0, 1.0, &mut rng);
    let target = model.param_entries().iter().position(|(n, _)| n == "stage1.snr.w_phi").unwrap();
    let w_phi0 = model.param_entries()[target].1.clone();

    for step in [1e-4, 1e-5, 1e-6, 1e-7] {
        let model2 = model.clone();
        let img2 = img.clone();
        let err = grad_check_many(&move |g: &mut Graph<f64>, xs| {
            let m = model2.clone();
            let mut leased = m.lease(g);
            if let LeasedNorm::Snr(n) = &mut leased.stages[1].norm { n.w_phi = xs[0].clone(); }
            let img_t = g.input(img2.clone());
            let fw = forward(g, &leased, &img_t)?;
            let ce = g.cross_entropy(&fw.logits, 1)?;
            let snr_nodes: Vec<_> = leased.stages.iter().filter_map(|st| match &st.norm { LeasedNorm::Snr(n) => Some(n.clone()), _ => None }).collect();
            let mut total = ce;
            for (out, nodes) in fw.snr_outputs.iter().zip(&snr_nodes) {
                let d = snr_core::loss::classification_dual_loss(g, &out.f_norm, &out.f_plus, &out.f_minus, nodes)?;
                let pair = g.add(&d.l_plus, &d.l_minus)?;
                total = g.add(&total, &pair)?;
            }
            Ok(total)
        }, &[w_phi0.clone()], step).unwrap();
        println!("step {step:.0e}: err {err:.3e}");
    }
}
