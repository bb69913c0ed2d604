//! Sequential three-stage training.
//!
//! Stage 1 trains the comprehension network alone; stage 2 warms up the
//! caption generator with comprehension weights frozen (shared embedding
//! included); stage 3 trains everything under the joint objective with the
//! alpha-weighted caption term. Variants without the caption branch skip
//! stage 2 and run stage 3 on the comprehension objective.

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, ReferringSample};
use crate::dynfilter::ForwardStats;
use crate::error::{Error, Result};
use crate::model::{LossReport, Network};
use crate::optim::{Sgd, TapeBindings};
use crate::scalar::Scalar;
use crate::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug)]
pub struct StageLogEntry {
    pub stage: usize,
    pub step: usize,
    pub loss: LossReport,
}

pub struct TrainOutcome<T> {
    pub net: Network<T>,
    pub log: Vec<StageLogEntry>,
    pub stats: ForwardStats,
    pub final_loss: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Objective {
    Comprehension,
    CaptionOnly,
    Joint,
}

fn batch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// One optimization stage; returns per-step logs. The `frozen` predicate
/// names parameters excluded from updates.
pub(crate) fn run_stage<T: Scalar>(
    net: &mut Network<T>,
    cfg: &TrainConfig,
    stage: usize,
    objective: Objective,
    train_set: &[ReferringSample],
    rng: &mut ChaCha8Rng,
    frozen: &dyn Fn(&str) -> bool,
    stats: &mut ForwardStats,
) -> Result<Vec<StageLogEntry>> {
    assert!(!train_set.is_empty(), "empty training split");
    let steps = cfg.stage_steps[stage];
    let mut sgd = Sgd::new(cfg.sgd_for_stage(stage), &net.store)?;
    let mut log = Vec::new();
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..steps {
        let mut report = LossReport::default();
        for _ in 0..cfg.batch_size {
            let sample = &train_set[rng.gen_range(0..train_set.len())];
            let mut tape = Tape::new();
            let mut binds = TapeBindings::new();
            let (loss_vars, sample_report, fstats) = match objective {
                Objective::CaptionOnly => {
                    let cap = net.caption_only_loss(&mut tape, &mut binds, sample)?;
                    let v = tape.scalar_value(cap);
                    let r = LossReport { cap: v, total: v, ..LossReport::default() };
                    (cap, r, ForwardStats::default())
                }
                Objective::Comprehension | Objective::Joint => {
                    let alpha = if objective == Objective::Joint { cfg.alpha } else { 0.0 };
                    let (l, fs) = net.sample_loss(&mut tape, &mut binds, sample, alpha)?;
                    let r = LossReport::from_tape(&tape, &l);
                    (l.total, r, fs)
                }
            };
            for (acc, v) in stats.region_evals.iter_mut().zip(fstats.region_evals) {
                *acc += v;
            }
            tape.backward(loss_vars)?;
            net.store.accumulate(&tape, &binds, scale)?;
            report.add_assign(&sample_report.scaled(scale));
        }
        if !report.is_finite() {
            return Err(Error::Diverged { step, stage: stage + 1 });
        }
        sgd.step(&mut net.store, frozen);
        if step % cfg.log_every == 0 || step + 1 == steps {
            log.push(StageLogEntry { stage: stage + 1, step, loss: report });
        }
    }
    Ok(log)
}

/// Runs the full schedule; checkpoints land in `out_dir` when given.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut net: Network<T> = Network::new(cfg.dims(ds.vocab.len()), cfg.variant, cfg.seed);
    let mut rng = batch_rng(cfg.seed);
    let mut log = Vec::new();
    let mut stats = ForwardStats::default();

    let stage1 =
        run_stage(&mut net, cfg, 0, Objective::Comprehension, &ds.train, &mut rng, &|n| {
            n.starts_with("cap.")
        }, &mut stats)?;
    log.extend(stage1);
    save_stage(&net, out_dir, 1)?;

    if cfg.variant.uses_caption() {
        let frozen: Box<dyn Fn(&str) -> bool> = if cfg.unfreeze_stage2 {
            Box::new(|_: &str| false)
        } else {
            Box::new(|n: &str| !n.starts_with("cap."))
        };
        let stage2 = run_stage(
            &mut net,
            cfg,
            1,
            Objective::CaptionOnly,
            &ds.train,
            &mut rng,
            frozen.as_ref(),
            &mut stats,
        )?;
        log.extend(stage2);
        save_stage(&net, out_dir, 2)?;
    }

    let stage3 =
        run_stage(&mut net, cfg, 2, Objective::Joint, &ds.train, &mut rng, &|_| false, &mut stats)?;
    log.extend(stage3);
    save_stage(&net, out_dir, 3)?;

    let final_loss = log.last().map(|e| e.loss).unwrap_or_default();
    if let Some(dir) = out_dir {
        checkpoint::save(&net.store, &dir.join("model.ckpt"))?;
        ds.vocab.save(&dir.join("vocab.txt"))?;
        cfg.save(&dir.join("config.txt"))?;
        std::fs::write(dir.join("train_log.tsv"), render_log(&log))?;
    }
    Ok(TrainOutcome { net, log, stats, final_loss })
}

fn save_stage<T: Scalar>(net: &Network<T>, out_dir: Option<&Path>, stage: usize) -> Result<()> {
    if let Some(dir) = out_dir {
        checkpoint::save(&net.store, &dir.join(format!("stage{stage}.ckpt")))?;
    }
    Ok(())
}

pub fn render_log(log: &[StageLogEntry]) -> String {
    let mut s = String::from("stage\tstep\ttotal\tcls\tbox\tmask\tres\tcap\n");
    for e in log {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            e.stage, e.step, e.loss.total, e.loss.cls, e.loss.boxr, e.loss.mask, e.loss.res, e.loss.cap
        );
    }
    s
}
