//! The semi-supervised training loop.
//!
//! Each step draws a labeled mini-batch (balance loss on all five side
//! outputs and the fused output, construction loss on the fused output) and,
//! in semi mode, an unlabeled mini-batch of overlapping crop pairs (both
//! crops forwarded, same-pixel embeddings gathered per active stage,
//! confidence-gated contrastive loss evaluated in both directions).
//! Optimization is SGD with momentum under a step learning-rate schedule;
//! weight decay enters as an explicit loss term whose gradient is added to
//! the weight (not bias) gradients.
//!
//! Every stochastic draw comes from a stream keyed by
//! `(seed, purpose, epoch, step, slot)`, so runs are bit-reproducible and
//! the unlabeled branch cannot perturb labeled-batch sampling.

mod config;

pub use config::{TrainConfig, TrainMode};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::Rng;

use crate::crop::{paired_pixel_indices, sample_crop_pair, CropPair, Rect};
use crate::data::{DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{default_thresholds, evaluate_model};
use crate::losses::{
    balance_loss_grad, construction_loss_grad, contrastive_loss_grad, total_loss, BalanceOpts,
    ContrastiveBatch, LossBreakdown,
};
use crate::network::{save_checkpoint, stage_stride, CrSeg, ParamSet, NUM_STAGES};
use crate::par::map_ordered;
use crate::rng::stream;

/// One optimizer step's logged terms.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub lr: f64,
}

/// Per-step loss records, per-epoch validation MIOU, and the lr trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub val_miou: Vec<(usize, f64)>,
    pub lr_trace: Vec<f64>,
}

impl TrainLog {
    /// `step,epoch,contrast,balance,construction,weight_decay,total,lr`
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("step,epoch,contrast,balance,construction,weight_decay,total,lr\n");
        for r in &self.steps {
            let b = &r.breakdown;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step, r.epoch, b.contrast, b.balance, b.construction, b.weight_decay, b.total, r.lr
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// `epoch,miou`
    pub fn write_val_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,miou\n");
        for (epoch, miou) in &self.val_miou {
            let _ = writeln!(out, "{epoch},{miou}");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Max-class probability of a two-class sigmoid output: `max(p, 1-p)`.
pub fn max_class_confidence(p: f64) -> f64 {
    p.max(1.0 - p)
}

/// Confidence of the fused prediction at one pixel.
pub fn confidence_at(fused_prob: &ArrayView2<f32>, index: (usize, usize)) -> f64 {
    max_class_confidence(f64::from(fused_prob[index]))
}

/// Negative-bank cells for one stage of one crop pair, drawn from the
/// non-positive cells of the opposite crop's embedding map.
struct StageNegatives {
    /// Cells in crop B's map (negatives for the a->b direction).
    in_b: Vec<(usize, usize)>,
    /// Cells in crop A's map (negatives for the b->a direction).
    in_a: Vec<(usize, usize)>,
}

enum JobSpec {
    Labeled {
        sample: usize,
        rect: Rect,
    },
    Unlabeled {
        sample: usize,
        pair: CropPair,
        jitter: (f32, f32),
        negatives: Vec<Option<StageNegatives>>,
    },
}

#[derive(Default)]
struct JobOutput {
    grads: Option<ParamSet>,
    side_balance: [f64; NUM_STAGES],
    fused_balance: f64,
    construction: f64,
    contrast: [f64; NUM_STAGES],
}

fn crop_image(image: &Array3<f32>, rect: &Rect) -> Array3<f32> {
    image
        .slice(s![
            ..,
            rect.y0..rect.y0 + rect.h,
            rect.x0..rect.x0 + rect.w
        ])
        .to_owned()
}

fn crop_mask(mask: &Array2<u8>, rect: &Rect) -> Array2<u8> {
    mask.slice(s![rect.y0..rect.y0 + rect.h, rect.x0..rect.x0 + rect.w])
        .to_owned()
}

fn apply_jitter(image: &mut Array3<f32>, delta: f32) {
    if delta != 0.0 {
        image.mapv_inplace(|v| (v + delta).clamp(0.0, 1.0));
    }
}

/// Nearest-neighbor source row/column for each destination index.
fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1))
        .collect()
}

fn f64_map(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

fn f32_map(x: &Array2<f64>) -> Array2<f32> {
    x.mapv(|v| v as f32)
}

/// Sum of squared weights times lambda/2, accumulated in f64.
fn weight_decay_value(params: &ParamSet, lambda_wd: f64) -> f64 {
    let sq: f64 = params
        .weight_slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|&w| f64::from(w) * f64::from(w))
        .sum();
    0.5 * lambda_wd * sq
}

struct TrainContext<'a> {
    model: &'a CrSeg,
    samples: &'a [ImageSample],
    cfg: &'a TrainConfig,
}

impl TrainContext<'_> {
    fn run_labeled(&self, sample: usize, rect: &Rect, inv_batch: f64) -> Result<JobOutput> {
        let cfg = self.cfg;
        let s = &self.samples[sample];
        let image = crop_image(&s.image, rect);
        let mask = crop_mask(s.mask.as_ref().expect("labeled sample has mask"), rect);
        let trace = self.model.forward_trace(&image, false)?;

        let opts = BalanceOpts {
            alpha_exp: cfg.alpha_exp,
            eps: 1e-7,
            weighting: cfg.balance_weighting,
        };
        let mut out = JobOutput {
            grads: Some(self.model.params.zeros_like()),
            ..JobOutput::default()
        };

        let mut d_side = Vec::with_capacity(NUM_STAGES);
        for m in 0..NUM_STAGES {
            let pred = f64_map(&trace.side_probs[m]);
            let (value, grad) = balance_loss_grad(&pred.view(), &mask.view(), &opts)?;
            out.side_balance[m] = value;
            d_side.push(f32_map(&grad.mapv(|g| g * cfg.weight_balance * inv_batch)));
        }

        let fused = f64_map(&trace.fused_prob);
        let (bal_value, bal_grad) = balance_loss_grad(&fused.view(), &mask.view(), &opts)?;
        out.fused_balance = bal_value;
        let gt64 = mask.mapv(|v| f64::from(v));
        let (cons_value, cons_grad) =
            construction_loss_grad(&fused.view(), &gt64.view(), cfg.construction_reduction)?;
        out.construction = cons_value;
        let d_fused = f32_map(
            &(bal_grad.mapv(|g| g * cfg.weight_balance)
                + cons_grad.mapv(|g| g * cfg.weight_construction))
            .mapv(|g| g * inv_batch),
        );

        let d_embs: Vec<Option<Array3<f32>>> = vec![None; NUM_STAGES];
        self.model.backward(
            &trace,
            &d_side,
            &d_fused,
            &d_embs,
            out.grads.as_mut().unwrap(),
        );
        Ok(out)
    }

    fn run_unlabeled(
        &self,
        sample: usize,
        pair: &CropPair,
        jitter: (f32, f32),
        negatives: &[Option<StageNegatives>],
        inv_batch: f64,
    ) -> Result<JobOutput> {
        let cfg = self.cfg;
        let s = &self.samples[sample];
        let mut img_a = crop_image(&s.image, &pair.crop_a);
        let mut img_b = crop_image(&s.image, &pair.crop_b);
        apply_jitter(&mut img_a, jitter.0);
        apply_jitter(&mut img_b, jitter.1);

        let trace_a = self.model.forward_trace(&img_a, true)?;
        let trace_b = self.model.forward_trace(&img_b, true)?;

        let mut out = JobOutput {
            grads: Some(self.model.params.zeros_like()),
            ..JobOutput::default()
        };
        let mut d_emb_a: Vec<Option<Array3<f32>>> = vec![None; NUM_STAGES];
        let mut d_emb_b: Vec<Option<Array3<f32>>> = vec![None; NUM_STAGES];

        let scale = cfg.weight_contrast * inv_batch;
        for m in 0..NUM_STAGES {
            let Some(neg) = &negatives[m] else { continue };
            let lattice = paired_pixel_indices(pair, stage_stride(m));
            if lattice.is_empty() {
                continue;
            }

            let emb_a = trace_a.embedding(m);
            let emb_b = trace_b.embedding(m);
            let dim = emb_a.shape()[0];
            let (ha, wa) = (emb_a.shape()[1], emb_a.shape()[2]);
            let (hb, wb) = (emb_b.shape()[1], emb_b.shape()[2]);

            // confidences: fused map nearest-resampled to the stage grid
            let rows_a = nearest_indices(pair.crop_a.h, ha);
            let cols_a = nearest_indices(pair.crop_a.w, wa);
            let rows_b = nearest_indices(pair.crop_b.h, hb);
            let cols_b = nearest_indices(pair.crop_b.w, wb);

            let gather = |emb: &Array3<f32>, cells: &[(usize, usize)]| -> Array2<f64> {
                let mut rows = Array2::<f64>::zeros((cells.len(), dim));
                for (i, &(r, c)) in cells.iter().enumerate() {
                    for d in 0..dim {
                        rows[[i, d]] = f64::from(emb[[d, r, c]]);
                    }
                }
                rows
            };
            let cells_a: Vec<(usize, usize)> = lattice.iter().map(|&(ia, _)| ia).collect();
            let cells_b: Vec<(usize, usize)> = lattice.iter().map(|&(_, ib)| ib).collect();
            let rows_emb_a = gather(emb_a, &cells_a);
            let rows_emb_b = gather(emb_b, &cells_b);

            let conf = |fused: &Array2<f32>,
                        rows_map: &[usize],
                        cols_map: &[usize],
                        cells: &[(usize, usize)]| {
                Array1::from_iter(cells.iter().map(|&(r, c)| {
                    max_class_confidence(f64::from(fused[[rows_map[r], cols_map[c]]]))
                }))
            };
            let conf_a = conf(&trace_a.fused_prob, &rows_a, &cols_a, &cells_a);
            let conf_b = conf(&trace_b.fused_prob, &rows_b, &cols_b, &cells_b);

            let bank_b = gather(emb_b, &neg.in_b);
            let bank_a = gather(emb_a, &neg.in_a);

            // a -> b: anchors in A pull toward frozen targets in B
            let (loss_ab, d_anchor_a, d_bank_b) = contrastive_loss_grad(&ContrastiveBatch {
                emb_a: rows_emb_a.clone(),
                emb_b: rows_emb_b.clone(),
                conf_a: conf_a.clone(),
                conf_b: conf_b.clone(),
                neg_bank: bank_b,
                tau: cfg.tau,
                alpha_conf: cfg.alpha_conf,
                exclusive_denominator: cfg.exclusive_denominator,
            })?;
            // b -> a
            let (loss_ba, d_anchor_b, d_bank_a) = contrastive_loss_grad(&ContrastiveBatch {
                emb_a: rows_emb_b,
                emb_b: rows_emb_a,
                conf_a: conf_b,
                conf_b: conf_a,
                neg_bank: bank_a,
                tau: cfg.tau,
                alpha_conf: cfg.alpha_conf,
                exclusive_denominator: cfg.exclusive_denominator,
            })?;
            out.contrast[m] = loss_ab + loss_ba;

            let mut map_a = Array3::<f32>::zeros((dim, ha, wa));
            let mut map_b = Array3::<f32>::zeros((dim, hb, wb));
            let scatter = |map: &mut Array3<f32>, cells: &[(usize, usize)], g: &Array2<f64>| {
                for (i, &(r, c)) in cells.iter().enumerate() {
                    for d in 0..dim {
                        map[[d, r, c]] += (g[[i, d]] * scale) as f32;
                    }
                }
            };
            scatter(&mut map_a, &cells_a, &d_anchor_a);
            scatter(&mut map_b, &cells_b, &d_anchor_b);
            scatter(&mut map_b, &neg.in_b, &d_bank_b);
            scatter(&mut map_a, &neg.in_a, &d_bank_a);
            d_emb_a[m] = Some(map_a);
            d_emb_b[m] = Some(map_b);
        }

        let zero_side_a: Vec<Array2<f32>> = trace_a
            .side_probs
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        let zero_fused_a = Array2::<f32>::zeros(trace_a.fused_prob.raw_dim());
        self.model.backward(
            &trace_a,
            &zero_side_a,
            &zero_fused_a,
            &d_emb_a,
            out.grads.as_mut().unwrap(),
        );
        let zero_side_b: Vec<Array2<f32>> = trace_b
            .side_probs
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        let zero_fused_b = Array2::<f32>::zeros(trace_b.fused_prob.raw_dim());
        self.model.backward(
            &trace_b,
            &zero_side_b,
            &zero_fused_b,
            &d_emb_b,
            out.grads.as_mut().unwrap(),
        );
        Ok(out)
    }
}

fn validate_setup(
    model: &CrSeg,
    samples: &[ImageSample],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let by_id: HashMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    let resolve = |ids: &[String], want_mask: bool| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                let &idx = by_id.get(id.as_str()).ok_or_else(|| {
                    Error::Config(format!("split references unknown sample id '{id}'"))
                })?;
                let s = &samples[idx];
                if want_mask && !s.labeled() {
                    return Err(Error::Config(format!(
                        "labeled split member '{id}' has no mask"
                    )));
                }
                if s.channels() != model.config().in_channels {
                    return Err(Error::Config(format!(
                        "sample '{id}' has {} channels, model expects {}",
                        s.channels(),
                        model.config().in_channels
                    )));
                }
                Ok(idx)
            })
            .collect()
    };
    let labeled = resolve(&split.labeled_ids, true)?;
    let unlabeled = resolve(&split.unlabeled_ids, false)?;

    if labeled.is_empty() {
        return Err(Error::Config("empty labeled split".into()));
    }
    if cfg.mode == TrainMode::Semi && unlabeled.is_empty() {
        return Err(Error::Config(
            "semi mode requested but the split has no unlabeled data".into(),
        ));
    }
    for &idx in labeled.iter().chain(&unlabeled) {
        let s = &samples[idx];
        let min_dim = s.height().min(s.width());
        if min_dim < cfg.crop_size {
            return Err(Error::Config(format!(
                "sample '{}' is {}x{}, smaller than crop_size {}",
                s.id,
                s.height(),
                s.width(),
                cfg.crop_size
            )));
        }
    }
    Ok((labeled, unlabeled))
}

/// Sample `count` negative cells uniformly from the grid, avoiding the
/// positive lattice cells when any non-lattice cell exists.
fn sample_negative_cells(
    h: usize,
    w: usize,
    exclude: &[(usize, usize)],
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut blocked = vec![false; h * w];
    for &(r, c) in exclude {
        blocked[r * w + c] = true;
    }
    let pool: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| !blocked[i])
        .map(|i| (i / w, i % w))
        .collect();
    let pool = if pool.is_empty() {
        (0..h * w).map(|i| (i / w, i % w)).collect()
    } else {
        pool
    };
    (0..count)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

/// Train `model` in place; returns the log. `checkpoint_dir` enables
/// periodic checkpoints (`cfg.checkpoint_every`) named
/// `checkpoint_epoch_<e>.ckpt`.
pub fn train(
    model: &mut CrSeg,
    samples: &[ImageSample],
    split: &DatasetSplit,
    val_samples: &[ImageSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    let (labeled, unlabeled) = validate_setup(model, samples, split, cfg)?;
    let seed = cfg.seed;
    let steps_per_epoch = labeled.len().div_ceil(cfg.batch_labeled);
    let mut velocity = model.params.zeros_like();
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        log.lr_trace.push(lr);

        // epoch-shuffled pass over the labeled pool
        let mut order = labeled.clone();
        let mut order_rng = stream(seed, "labeled-order", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }

        for step in 0..steps_per_epoch {
            let lo = step * cfg.batch_labeled;
            let hi = (lo + cfg.batch_labeled).min(order.len());
            let batch_l = &order[lo..hi];
            let inv_l = 1.0 / batch_l.len() as f64;

            let mut specs: Vec<JobSpec> = Vec::new();
            for (slot, &sample) in batch_l.iter().enumerate() {
                let s = &samples[sample];
                let rect = if cfg.train_full_image {
                    Rect {
                        x0: 0,
                        y0: 0,
                        w: s.width(),
                        h: s.height(),
                    }
                } else {
                    let mut rng = stream(
                        seed,
                        "labeled-crop",
                        &[epoch as u64, step as u64, slot as u64],
                    );
                    Rect {
                        x0: rng.random_range(0..=s.width() - cfg.crop_size),
                        y0: rng.random_range(0..=s.height() - cfg.crop_size),
                        w: cfg.crop_size,
                        h: cfg.crop_size,
                    }
                };
                specs.push(JobSpec::Labeled { sample, rect });
            }

            let mut inv_u = 0.0;
            if cfg.mode == TrainMode::Semi {
                let mut batch_rng =
                    stream(seed, "unlabeled-batch", &[epoch as u64, step as u64]);
                let batch_u: Vec<usize> = (0..cfg.batch_unlabeled)
                    .map(|_| unlabeled[batch_rng.random_range(0..unlabeled.len())])
                    .collect();
                inv_u = 1.0 / batch_u.len() as f64;

                for (slot, &sample) in batch_u.iter().enumerate() {
                    let s = &samples[sample];
                    let coords = [epoch as u64, step as u64, slot as u64];
                    let mut pair_rng = stream(seed, "crop-pair", &coords);
                    let pair = sample_crop_pair(
                        s.height(),
                        s.width(),
                        cfg.crop_size,
                        cfg.min_overlap_fraction,
                        &mut pair_rng,
                    )?;
                    let jitter = if cfg.crop_jitter > 0.0 {
                        let mut jr = stream(seed, "jitter", &coords);
                        let j = cfg.crop_jitter;
                        (
                            (jr.random::<f64>() * 2.0 * j - j) as f32,
                            (jr.random::<f64>() * 2.0 * j - j) as f32,
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    let negatives: Vec<Option<StageNegatives>> = (0..NUM_STAGES)
                        .map(|m| {
                            if !cfg.contrast_stages.contains(&(m + 1)) {
                                return None;
                            }
                            let stride = stage_stride(m);
                            let lattice = paired_pixel_indices(&pair, stride);
                            if lattice.is_empty() {
                                return None;
                            }
                            let dims = |crop: &Rect| {
                                (crop.h.div_ceil(stride), crop.w.div_ceil(stride))
                            };
                            let (ha, wa) = dims(&pair.crop_a);
                            let (hb, wb) = dims(&pair.crop_b);
                            let cells_a: Vec<(usize, usize)> =
                                lattice.iter().map(|&(ia, _)| ia).collect();
                            let cells_b: Vec<(usize, usize)> =
                                lattice.iter().map(|&(_, ib)| ib).collect();
                            let mut neg_rng =
                                stream(seed, "negatives", &[coords[0], coords[1], coords[2], m as u64]);
                            Some(StageNegatives {
                                in_b: sample_negative_cells(
                                    hb,
                                    wb,
                                    &cells_b,
                                    cfg.neg_bank_size,
                                    &mut neg_rng,
                                ),
                                in_a: sample_negative_cells(
                                    ha,
                                    wa,
                                    &cells_a,
                                    cfg.neg_bank_size,
                                    &mut neg_rng,
                                ),
                            })
                        })
                        .collect();
                    specs.push(JobSpec::Unlabeled {
                        sample,
                        pair,
                        jitter,
                        negatives,
                    });
                }
            }

            let ctx = TrainContext {
                model,
                samples,
                cfg,
            };
            let outputs: Vec<Result<JobOutput>> = map_ordered(specs, |spec| match spec {
                JobSpec::Labeled { sample, rect } => ctx.run_labeled(sample, &rect, inv_l),
                JobSpec::Unlabeled {
                    sample,
                    pair,
                    jitter,
                    negatives,
                } => ctx.run_unlabeled(sample, &pair, jitter, &negatives, inv_u),
            });

            let mut grads = model.params.zeros_like();
            let mut side_balance = [0.0f64; NUM_STAGES];
            let mut fused_balance = 0.0;
            let mut construction = 0.0;
            let mut contrast = [0.0f64; NUM_STAGES];
            for out in outputs {
                let out = out?;
                if let Some(g) = &out.grads {
                    grads.add_assign(g);
                }
                for m in 0..NUM_STAGES {
                    side_balance[m] += out.side_balance[m] * inv_l;
                    contrast[m] += out.contrast[m] * inv_u;
                }
                fused_balance += out.fused_balance * inv_l;
                construction += out.construction * inv_l;
            }

            let wd_value = weight_decay_value(&model.params, cfg.lambda_wd);
            let mut stage_terms: Vec<(f64, f64)> = (0..NUM_STAGES)
                .map(|m| {
                    (
                        cfg.weight_contrast * contrast[m],
                        cfg.weight_balance * side_balance[m],
                    )
                })
                .collect();
            stage_terms.push((0.0, cfg.weight_balance * fused_balance));
            let breakdown = total_loss(
                &stage_terms,
                cfg.weight_construction * construction,
                wd_value,
            )?;

            model.params.sgd_step(
                &grads,
                &mut velocity,
                lr as f32,
                cfg.momentum as f32,
                cfg.lambda_wd as f32,
            );

            log.steps.push(StepRecord {
                step: global_step,
                epoch,
                breakdown,
                lr,
            });
            global_step += 1;
        }

        if !val_samples.is_empty()
            && cfg.val_every > 0
            && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs)
        {
            let report = evaluate_model(model, val_samples, &default_thresholds())?;
            log.val_miou.push((epoch, report.best_miou));
        }

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join(format!("checkpoint_epoch_{epoch}.ckpt")))?;
            }
        }
    }

    Ok(log)
}
