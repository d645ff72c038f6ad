use snr_core::config::TrainParams;
use snr_core::data::{generate_domain, preset_domains, DomainDataset};
use snr_core::model::{ModelSpec, Variant};
use snr_core::train::{train, evaluate, TrainOutcome, TrainSetting};

fn main() {
    let presets = preset_domains();
    let trains: Vec<DomainDataset> = presets.iter().map(|(n, s)| generate_domain(n, s, 448, 4, 1042).unwrap()).collect();
    let tests: Vec<DomainDataset> = presets.iter().map(|(n, s)| generate_domain(n, s, 400, 4, 2042).unwrap()).collect();

    // cells: (variant, target, seed, uda)
    let mut cells: Vec<(Variant, usize, u64, bool)> = Vec::new();
    for &seed in &[0u64, 1, 2] {
        for target in 0..4 {
            for v in [Variant::Baseline, Variant::InOnly, Variant::Snr, Variant::SnrNoDualLoss] {
                cells.push((v, target, seed, false));
            }
            cells.push((Variant::Snr, target, seed, true));
        }
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let t0 = std::time::Instant::now();
    let results: Vec<(Variant, usize, u64, bool, f64, f64)> = std::thread::scope(|sc| {
        let mut handles = Vec::new();
        for _ in 0..2 {
            let cells = &cells; let next = &next; let trains = &trains; let tests = &tests;
            handles.push(sc.spawn(move || {
                let mut out = Vec::new();
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() { break; }
                    let (v, target, seed, uda) = cells[i];
                    let spec = ModelSpec::default_toy(v, 4);
                    let params = TrainParams { epochs: 18, batch_size: 48, lr0: 0.05, lambda: 1.0,
                        train_per_domain: None, target_batch: Some(24), ..TrainParams::default() };
                    let sources: Vec<&DomainDataset> = (0..4).filter(|&d| d != target).map(|d| &trains[d]).collect();
                    let t = std::time::Instant::now();
                    let o: TrainOutcome<f32> = train(&TrainSetting {
                        spec: &spec, params: &params, sources,
                        target_unlabeled: if uda { Some(&trains[target]) } else { None },
                        seed, out_dir: None,
                    }).unwrap();
                    let secs = t.elapsed().as_secs_f64();
                    let acc = evaluate(&o.model, &tests[target], None, false, 1).unwrap().accuracy;
                    out.push((v, target, seed, uda, acc, secs));
                }
                out
            }));
        }
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    println!("total wall {:.0}s", t0.elapsed().as_secs_f64());
    for (v, uda) in [(Variant::Baseline, false), (Variant::InOnly, false), (Variant::SnrNoDualLoss, false), (Variant::Snr, false), (Variant::Snr, true)] {
        let mut by_seed = Vec::new();
        for &seed in &[0u64, 1, 2] {
            let accs: Vec<f64> = results.iter().filter(|r| r.0 == v && r.2 == seed && r.3 == uda).map(|r| r.4).collect();
            by_seed.push(25.0 * accs.iter().sum::<f64>());
        }
        let mean = by_seed.iter().sum::<f64>() / 3.0;
        let dg_secs: f64 = results.iter().filter(|r| r.0 == v && r.3 == uda).map(|r| r.5).sum();
        println!("{:18} uda={}: mean {:.2}% | seeds {:?} | cpu {:.0}s", v.name(), uda, mean,
            by_seed.iter().map(|a| (a*10.0).round()/10.0).collect::<Vec<_>>(), dg_secs);
    }
}
