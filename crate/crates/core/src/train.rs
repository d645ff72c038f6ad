//! Optimizer, training loop, and evaluation.
//!
//! Training minimizes `cross_entropy(source) + lambda * L_SNR(source)`;
//! in UDA mode each step additionally consumes a batch of unlabeled
//! target images and adds `lambda * L_SNR(target)` (no target task loss).
//! Everything is driven by named random streams off the run seed, so a
//! run is a pure function of (config, seed, datasets).

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::save_checkpoint;
use crate::config::TrainParams;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::loss::{classification_dual_loss, pooled_phi_entropy};
use crate::model::{
    argmax_lowest, build_model, forward, forward_inference, LeasedNorm, Model, ModelSpec,
};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Graph;

/// SGD with momentum: v <- m*v + g, w <- w - lr*v.
pub struct SgdMomentum<S> {
    momentum: f64,
    velocities: Vec<Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(model: &Model<S>, momentum: f64) -> Self {
        let velocities = model
            .param_entries()
            .iter()
            .map(|(_, t)| vec![S::zero(); t.numel()])
            .collect();
        SgdMomentum { momentum, velocities }
    }

    /// Parameters stay bitwise untouched when lr == 0; velocities still
    /// integrate the gradient.
    pub fn step(&mut self, model: &mut Model<S>, grads: &[Option<Vec<S>>], lr: f64) {
        let m = S::from_f64(self.momentum);
        let lr_s = S::from_f64(lr);
        let mut entries = model.param_entries_mut();
        debug_assert_eq!(entries.len(), grads.len());
        for ((v, (_, w)), g) in self.velocities.iter_mut().zip(entries.iter_mut()).zip(grads) {
            match g {
                Some(g) => {
                    for (vv, &gv) in v.iter_mut().zip(g.iter()) {
                        *vv = m * *vv + gv;
                    }
                }
                None => {
                    for vv in v.iter_mut() {
                        *vv = m * *vv;
                    }
                }
            }
            if lr != 0.0 {
                for (wv, &vv) in w.data_mut().iter_mut().zip(v.iter()) {
                    *wv = *wv - lr_s * vv;
                }
            }
        }
    }
}

/// Per-epoch cosine annealing from lr0 at epoch 0 to 0 at the final epoch.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: f64,
    /// (l_plus, l_minus) batch means per SNR module, source batch.
    pub per_module: Vec<(f64, f64)>,
    pub total: f64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub snr_loss: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub steps: usize,
    pub epochs: Vec<EpochSummary>,
    pub train_secs: f64,
}

pub struct TrainSetting<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a TrainParams,
    pub sources: Vec<&'a DomainDataset>,
    /// Unlabeled target pool for UDA; labels in the dataset are ignored.
    pub target_unlabeled: Option<&'a DomainDataset>,
    pub seed: u64,
    /// When set, curves.csv, epochs.csv, and checkpoints land here.
    pub out_dir: Option<&'a Path>,
}

struct TargetSampler {
    pool: Vec<usize>,
    cursor: usize,
    cycle: u64,
    seed: u64,
    n: usize,
}

impl TargetSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = TargetSampler { pool: (0..n).collect(), cursor: 0, cycle: 0, seed, n };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = StreamRng::derive(self.seed, "shuffle-target", &[self.cycle]);
        self.pool = (0..self.n).collect();
        rng.shuffle(&mut self.pool);
        self.cursor = 0;
        self.cycle += 1;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.pool.len() {
                self.reshuffle();
            }
            out.push(self.pool[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn logit_stats<S: Scalar>(logits: &[Vec<S>]) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in logits {
        for &v in row {
            let v = v.as_f64();
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
            n += 1;
        }
    }
    format!("logits min {lo:.4} max {hi:.4} mean {:.4}", sum / n.max(1) as f64)
}

/// Train one model. The returned outcome holds the final model and the
/// per-epoch summaries; per-step traces stream to `curves.csv` when an
/// output directory is given.
pub fn train<S: Scalar>(setting: &TrainSetting) -> Result<TrainOutcome<S>> {
    let started = Instant::now();
    let p = setting.params;
    let spec = setting.spec;
    if setting.sources.is_empty() {
        return Err(Error::contract("training needs at least one source domain"));
    }
    for ds in &setting.sources {
        if ds.num_classes != spec.num_classes {
            return Err(Error::contract(format!(
                "domain {} has {} classes, model expects {}",
                ds.name, ds.num_classes, spec.num_classes
            )));
        }
    }

    let mut model: Model<S> = build_model(spec, setting.seed)?;
    let mut optimizer = SgdMomentum::new(&model, p.momentum);
    let use_dual = spec.variant.uses_dual_loss() && p.lambda > 0.0;

    // per-domain training pools, optionally capped
    let pool_sizes: Vec<usize> = setting
        .sources
        .iter()
        .map(|ds| p.train_per_domain.map_or(ds.len(), |cap| cap.min(ds.len())))
        .collect();
    let ns = setting.sources.len();
    let base = p.batch_size / ns;
    let extra = p.batch_size % ns;
    let takes: Vec<usize> = (0..ns).map(|d| base + usize::from(d < extra)).collect();
    if takes.iter().any(|&t| t == 0) {
        return Err(Error::Config(format!(
            "batch size {} too small for {ns} source domains",
            p.batch_size
        )));
    }
    let steps_per_epoch = pool_sizes
        .iter()
        .zip(&takes)
        .map(|(&n, &t)| n / t)
        .min()
        .unwrap_or(0);
    if steps_per_epoch == 0 {
        return Err(Error::Config("not enough training data for one batch".into()));
    }

    let mut target_sampler = match (setting.target_unlabeled, p.target_batch.unwrap_or(p.batch_size)) {
        (Some(t), tb) if tb > 0 => Some((TargetSampler::new(t.len(), setting.seed), tb)),
        _ => None,
    };

    let mut curves = match setting.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("curves.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let modules = if spec.variant.uses_snr() {
                spec.snr_after_stage.iter().filter(|&&b| b).count()
            } else {
                0
            };
            let mut header = String::from("step,epoch,task_loss");
            for i in 0..modules {
                header.push_str(&format!(",l_plus_{i},l_minus_{i}"));
            }
            header.push_str(",total\n");
            f.write_all(header.as_bytes()).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut epoch_rows: Vec<EpochSummary> = Vec::with_capacity(p.epochs);
    let mut global_step = 0usize;

    for epoch in 0..p.epochs {
        let lr = cosine_lr(p.lr0, epoch, p.epochs);
        // fresh shuffles per domain
        let mut pools: Vec<Vec<usize>> = Vec::with_capacity(ns);
        for (d, &n) in pool_sizes.iter().enumerate() {
            let mut ixs: Vec<usize> = (0..n).collect();
            let mut rng = StreamRng::derive(setting.seed, "shuffle", &[d as u64, epoch as u64]);
            rng.shuffle(&mut ixs);
            pools.push(ixs);
        }
        let mut cursors = vec![0usize; ns];

        let mut ep_task = 0.0;
        let mut ep_snr = 0.0;
        let mut ep_total = 0.0;
        let mut ep_correct = 0usize;
        let mut ep_seen = 0usize;

        for _ in 0..steps_per_epoch {
            let mut g: Graph<S> = Graph::new();
            let leased = model.lease(&mut g);
            let snr_nodes: Vec<_> = leased
                .stages
                .iter()
                .filter_map(|st| match &st.norm {
                    LeasedNorm::Snr(n) => Some(n.clone()),
                    _ => None,
                })
                .collect();
            let n_modules = snr_nodes.len();

            let mut ces = Vec::with_capacity(p.batch_size);
            let mut batch_logits = Vec::with_capacity(p.batch_size);
            let mut plus_parts: Vec<Vec<crate::tensor::Tensor<S>>> = vec![Vec::new(); n_modules];
            let mut minus_parts: Vec<Vec<crate::tensor::Tensor<S>>> = vec![Vec::new(); n_modules];

            for (d, ds) in setting.sources.iter().enumerate() {
                for _ in 0..takes[d] {
                    let ix = pools[d][cursors[d]];
                    cursors[d] += 1;
                    let img = g.input(ds.image::<S>(ix));
                    let label = ds.labels[ix] as usize;
                    let fw = forward(&mut g, &leased, &img)?;
                    let ce = g.cross_entropy(&fw.logits, label)?;
                    if argmax_lowest(fw.logits.data()) == label {
                        ep_correct += 1;
                    }
                    ep_seen += 1;
                    batch_logits.push(fw.logits.data().to_vec());
                    ces.push(ce);
                    if use_dual {
                        for (m, (out, nodes)) in fw.snr_outputs.iter().zip(&snr_nodes).enumerate() {
                            let dual = classification_dual_loss(
                                &mut g, &out.f_norm, &out.f_plus, &out.f_minus, nodes,
                            )?;
                            plus_parts[m].push(dual.l_plus);
                            minus_parts[m].push(dual.l_minus);
                        }
                    }
                }
            }

            let task = g.mean_scalars(&ces)?;
            let mut per_module = Vec::with_capacity(n_modules);
            let mut total = task.clone();
            if use_dual {
                let mut snr_sum: Option<crate::tensor::Tensor<S>> = None;
                for m in 0..n_modules {
                    let pm = g.mean_scalars(&plus_parts[m])?;
                    let mm = g.mean_scalars(&minus_parts[m])?;
                    per_module.push((pm.scalar_value().as_f64(), mm.scalar_value().as_f64()));
                    let pair = g.add(&pm, &mm)?;
                    snr_sum = Some(match snr_sum {
                        Some(acc) => g.add(&acc, &pair)?,
                        None => pair,
                    });
                }
                // UDA: dual loss on unlabeled target images
                if let Some((sampler, tb)) = target_sampler.as_mut() {
                    let tgt = setting.target_unlabeled.expect("sampler implies target");
                    let mut t_parts: Vec<crate::tensor::Tensor<S>> = Vec::new();
                    for ix in sampler.take(*tb) {
                        let img = g.input(tgt.image::<S>(ix));
                        let fw = forward(&mut g, &leased, &img)?;
                        for (out, nodes) in fw.snr_outputs.iter().zip(&snr_nodes) {
                            let dual = classification_dual_loss(
                                &mut g, &out.f_norm, &out.f_plus, &out.f_minus, nodes,
                            )?;
                            let pair = g.add(&dual.l_plus, &dual.l_minus)?;
                            t_parts.push(pair);
                        }
                    }
                    if !t_parts.is_empty() {
                        let t_mean = g.mean_scalars(&t_parts)?;
                        let t_scaled = g.scale(&t_mean, n_modules as f64)?;
                        snr_sum = Some(match snr_sum {
                            Some(acc) => g.add(&acc, &t_scaled)?,
                            None => t_scaled,
                        });
                    }
                }
                if let Some(s) = snr_sum {
                    let weighted = g.scale(&s, p.lambda)?;
                    total = g.add(&task, &weighted)?;
                }
            }

            let total_v = total.scalar_value().as_f64();
            if !total_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} step {global_step}: task {} \
                     per-module {:?} lr {lr:.6}; {}",
                    task.scalar_value().as_f64(),
                    per_module,
                    logit_stats(&batch_logits)
                )));
            }

            g.backward(&total)?;
            let flat = leased.flat();
            let grads: Vec<Option<Vec<S>>> =
                flat.iter().map(|t| g.grad(t).map(|s| s.to_vec())).collect();
            drop(g);
            optimizer.step(&mut model, &grads, lr);

            let task_v = task.scalar_value().as_f64();
            let snr_v = total_v - task_v;
            ep_task += task_v;
            ep_snr += snr_v;
            ep_total += total_v;

            if let Some((f, path)) = curves.as_mut() {
                let mut row = format!("{global_step},{epoch},{task_v}");
                for (lp, lm) in &per_module {
                    row.push_str(&format!(",{lp},{lm}"));
                }
                row.push_str(&format!(",{total_v}\n"));
                f.write_all(row.as_bytes())
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            global_step += 1;
        }

        let denom = steps_per_epoch as f64;
        epoch_rows.push(EpochSummary {
            epoch,
            lr,
            task_loss: ep_task / denom,
            snr_loss: ep_snr / denom,
            total: ep_total / denom,
            train_accuracy: ep_correct as f64 / ep_seen.max(1) as f64,
        });

        if let Some(dir) = setting.out_dir {
            let last = epoch + 1 == p.epochs;
            if last || (p.checkpoint_every > 0 && (epoch + 1) % p.checkpoint_every == 0) {
                let name = if last {
                    "ckpt_final.snrt".to_string()
                } else {
                    format!("ckpt_epoch{epoch}.snrt")
                };
                save_checkpoint(&dir.join(name), &model)?;
            }
        }
    }

    if let Some(dir) = setting.out_dir {
        let path = dir.join("epochs.csv");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(b"epoch,lr,task_loss,snr_loss,total,train_accuracy\n")
            .map_err(|e| Error::io(&path, e))?;
        for r in &epoch_rows {
            f.write_all(
                format!(
                    "{},{},{},{},{},{}\n",
                    r.epoch, r.lr, r.task_loss, r.snr_loss, r.total, r.train_accuracy
                )
                .as_bytes(),
            )
            .map_err(|e| Error::io(&path, e))?;
        }
    }

    Ok(TrainOutcome {
        model,
        steps: global_step,
        epochs: epoch_rows,
        train_secs: started.elapsed().as_secs_f64(),
    })
}

/// Mean entropies of the head's predictions per SNR module.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct EntropyStats {
    pub h_plus: f64,
    pub h_norm: f64,
    pub h_minus: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    /// Per SNR module, empty for variants without modules or when entropy
    /// collection is off.
    pub entropy_stats: Vec<EntropyStats>,
}

const EVAL_CHUNK: usize = 64;

struct ChunkOutcome {
    correct: usize,
    n: usize,
    h_sums: Vec<EntropyStats>,
}

fn eval_chunk<S: Scalar>(
    model: &Model<S>,
    ds: &DomainDataset,
    ixs: &[usize],
    with_entropy: bool,
) -> Result<ChunkOutcome> {
    let mut g: Graph<S> = Graph::new();
    let leased = model.lease(&mut g);
    let snr_nodes: Vec<_> = leased
        .stages
        .iter()
        .filter_map(|st| match &st.norm {
            LeasedNorm::Snr(n) => Some(n.clone()),
            _ => None,
        })
        .collect();
    let mut correct = 0usize;
    let mut h_sums = vec![EntropyStats::default(); snr_nodes.len()];
    for &ix in ixs {
        let img = g.input(ds.image::<S>(ix));
        let label = ds.labels[ix] as usize;
        if with_entropy && !snr_nodes.is_empty() {
            let fw = forward(&mut g, &leased, &img)?;
            if argmax_lowest(fw.logits.data()) == label {
                correct += 1;
            }
            for ((out, nodes), sums) in
                fw.snr_outputs.iter().zip(&snr_nodes).zip(h_sums.iter_mut())
            {
                let hp = pooled_phi_entropy(&mut g, &out.f_plus, nodes)?;
                let hn = pooled_phi_entropy(&mut g, &out.f_norm, nodes)?;
                let hm = pooled_phi_entropy(&mut g, &out.f_minus, nodes)?;
                sums.h_plus += hp.scalar_value().as_f64();
                sums.h_norm += hn.scalar_value().as_f64();
                sums.h_minus += hm.scalar_value().as_f64();
            }
        } else {
            let (logits, _) = forward_inference(&mut g, &leased, &img)?;
            if argmax_lowest(logits.data()) == label {
                correct += 1;
            }
        }
    }
    Ok(ChunkOutcome { correct, n: ixs.len(), h_sums })
}

/// Top-1 accuracy (ties to the lowest class index) and, when requested,
/// per-module prediction entropies. The set is split into fixed chunks
/// that may evaluate on `workers` threads; results fold in chunk order,
/// so the numbers do not depend on the worker count.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    ds: &DomainDataset,
    limit: Option<usize>,
    with_entropy: bool,
    workers: usize,
) -> Result<EvalResult> {
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    let ixs: Vec<usize> = (0..n).collect();
    let chunks: Vec<&[usize]> = ixs.chunks(EVAL_CHUNK).collect();
    let outcomes: Vec<ChunkOutcome> = if workers <= 1 || chunks.len() <= 1 {
        chunks
            .iter()
            .map(|c| eval_chunk(model, ds, c, with_entropy))
            .collect::<Result<_>>()?
    } else {
        let workers = workers.min(chunks.len());
        let mut slots: Vec<Option<Result<ChunkOutcome>>> = Vec::new();
        slots.resize_with(chunks.len(), || None);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let chunks = &chunks;
                let handle = scope.spawn(move || {
                    let mut mine = Vec::new();
                    let mut i = w;
                    while i < chunks.len() {
                        mine.push((i, eval_chunk(model, ds, chunks[i], with_entropy)));
                        i += workers;
                    }
                    mine
                });
                handles.push(handle);
            }
            for h in handles {
                for (i, r) in h.join().expect("eval worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("chunk not evaluated"))
            .collect::<Result<_>>()?
    };

    let mut correct = 0usize;
    let mut total = 0usize;
    let mut sums: Vec<EntropyStats> = Vec::new();
    for o in outcomes {
        correct += o.correct;
        total += o.n;
        if sums.is_empty() {
            sums = o.h_sums;
        } else {
            for (a, b) in sums.iter_mut().zip(o.h_sums) {
                a.h_plus += b.h_plus;
                a.h_norm += b.h_norm;
                a.h_minus += b.h_minus;
            }
        }
    }
    let entropy_stats = sums
        .into_iter()
        .map(|s| EntropyStats {
            h_plus: s.h_plus / total as f64,
            h_norm: s.h_norm / total as f64,
            h_minus: s.h_minus / total as f64,
        })
        .collect();
    Ok(EvalResult { accuracy: correct as f64 / total.max(1) as f64, correct, n: total, entropy_stats })
}
