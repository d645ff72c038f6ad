use snr_core::gradcheck::grad_check_many;
use snr_core::model::{build_model, forward, LeasedNorm, Model, ModelSpec, StageSpec, Variant};
use snr_core::rng::StreamRng;
use snr_core::tensor::{Graph, TensorData};

fn main() {
    for seed in [5u64, 6, 7] {
        let mut spec = ModelSpec::default_toy(Variant::Snr, 3);
        spec.stages = vec![StageSpec { out_channels: 4, stride: 2 }, StageSpec { out_channels: 6, stride: 1 }];
        spec.snr_after_stage = vec![true, true];
        let model: Model<f64> = build_model(&spec, seed).unwrap();
        let mut rng = StreamRng::from_seed(60 + seed);
        let img = TensorData::<f64>::uniform(vec![8, 8, 3], 0.0, 1.0, &mut rng);
        let names: Vec<String> = std::iter::once("image".to_string())
            .chain(model.param_entries().iter().map(|(n, _)| n.clone()))
            .collect();
        let mut inputs: Vec<TensorData<f64>> = vec![img];
        for (_, t) in model.param_entries() { inputs.push(t.clone()); }

        // vary ONE input at a time, keep the rest at model values
        for (ix, name) in names.iter().enumerate() {
            let spec2 = spec.clone();
            let model2 = model.clone();
            let full_inputs = inputs.clone();
            let err = grad_check_many(&move |g: &mut Graph<f64>, xs| {
                let mut m = model2.clone();
                {
                    let mut entries = m.param_entries_mut();
                    // xs[0] is the single varied tensor; splice it in
                    if ix > 0 { *entries[ix - 1].1 = xs[0].to_data(); }
                }
                let _ = &spec2;
                let mut leased = m.lease(g);
                if ix > 0 {
                    // re-lease with xs[0] tracked: easiest is to rebuild flat and patch
                    let mut i = 0usize;
                    let mut patched = false;
                    for st in leased.stages.iter_mut() {
                        for slot in [&mut st.conv_w, &mut st.conv_b] {
                            i += 1; if i == ix { *slot = xs[0].clone(); patched = true; }
                        }
                        if let LeasedNorm::Snr(n) = &mut st.norm {
                            for slot in [&mut n.gamma, &mut n.beta, &mut n.w1, &mut n.b1, &mut n.w2, &mut n.b2, &mut n.w_phi, &mut n.b_phi] {
                                i += 1; if i == ix { *slot = xs[0].clone(); patched = true; }
                            }
                        }
                    }
                    i += 1; if i == ix { leased.head_w = xs[0].clone(); patched = true; }
                    i += 1; if i == ix { leased.head_b = xs[0].clone(); patched = true; }
                    assert!(patched);
                }
                let img_t = if ix == 0 { xs[0].clone() } else { g.input(full_inputs[0].clone()) };
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
            }, &[inputs[ix].clone()], 1e-5).unwrap();
            if err > 1e-5 { println!("seed {seed} {name:20} err {err:.3e}"); }
        }
        println!("---");
    }
}
