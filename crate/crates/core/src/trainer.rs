//! Episodic training of the encoder over source domains.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{sample_shots, DomainCollection, EcpSample, Scaler, ShotSet, Space};
use crate::diffable::{Array, Graph, Var};
use crate::encoder::{apply_shift_graph, init_model, predict, to_f32_grid, tokenize, EncoderConfig, EncoderModel};
use crate::error::{ensure, Error, Result};
use crate::gmm::{fixed_weights, within_domain_tuning, z_schedule, GmmFile, SphericalGmm, Z_BETA};
use crate::metrics;
use crate::seed;

/// Shots per validation domain.
pub const VAL_SHOTS: usize = 4;
const CLIP_NORM: f64 = 1.0;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Episodes whose gradients are held in memory at once.
const CHUNK: usize = 8;
const MIN_LR_SCALE: f64 = 1.0 / 1024.0;

const TAG_EPISODE: u64 = 0xe915;
const TAG_VALID: u64 = 0x7a11;
const TAG_INIT: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Inclusive range of shots per episode.
    pub n_range: [usize; 2],
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_length: usize,
    pub total_steps: usize,
    pub master_seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            n_range: [4, 25],
            lr_max: 1e-3,
            lr_min: 1e-5,
            cycle_length: 2000,
            total_steps: 5000,
            master_seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        ensure!(
            self.lr_min > 0.0 && self.lr_min < self.lr_max,
            InvalidArgument,
            "need 0 < lr_min < lr_max"
        );
        let [lo, hi] = self.n_range;
        ensure!(
            1 <= lo && lo <= hi && hi <= enc.n_max,
            InvalidArgument,
            "n_range [{lo}, {hi}] must lie within [1, {}]",
            enc.n_max
        );
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be at least 1");
        ensure!(self.cycle_length >= 2, InvalidArgument, "cycle_length must be at least 2");
        ensure!(self.eval_every >= 1, InvalidArgument, "eval_every must be at least 1");
        Ok(())
    }
}

/// Triangular schedule: `lr_min` at the start and end of each cycle,
/// `lr_max` halfway.
pub fn cyclical_lr(step: usize, config: &TrainConfig) -> f64 {
    let cycle = config.cycle_length as f64;
    let pos = (step % config.cycle_length) as f64;
    let half = cycle / 2.0;
    let frac = if pos <= half { pos / half } else { (cycle - pos) / half };
    config.lr_min + (config.lr_max - config.lr_min) * frac
}

/// One training unit: a domain, its shots, the EM-tuned start and the
/// complete domain used for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub domain_id: String,
    pub shots: ShotSet,
    pub theta_e: SphericalGmm,
    pub full_domain: Arc<Array>,
}

/// Which domain, how many shots and which shot seed each batch member uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodePlan {
    pub domain: usize,
    pub n: usize,
    pub shot_seed: u64,
}

pub fn episode_plan(n_domains: usize, config: &TrainConfig, step: usize) -> Result<Vec<EpisodePlan>> {
    ensure!(n_domains >= 1, InvalidArgument, "source collection is empty");
    ensure!(
        config.batch_size <= n_domains,
        InvalidArgument,
        "batch_size {} exceeds {n_domains} source domains",
        config.batch_size
    );
    let mut rng = seed::rng(config.master_seed, &[TAG_EPISODE, step as u64]);
    let picked = index::sample(&mut rng, n_domains, config.batch_size).into_vec();
    let [lo, hi] = config.n_range;
    Ok(picked
        .into_iter()
        .map(|domain| EpisodePlan {
            domain,
            n: rng.random_range(lo..=hi),
            shot_seed: rng.random(),
        })
        .collect())
}

fn domain_array(points: Vec<Vec<f64>>) -> Result<Arc<Array>> {
    Ok(Arc::new(Array::from_rows(&points)?))
}

/// Builds the batch for `step`; all randomness comes from the master seed
/// and the step.
pub fn make_episode(
    source: &DomainCollection,
    theta_o: &SphericalGmm,
    config: &TrainConfig,
    enc: &EncoderConfig,
    step: usize,
) -> Result<Vec<Episode>> {
    let plan = episode_plan(source.len(), config, step)?;
    plan.par_iter()
        .map(|p| {
            let domain = &source.domains()[p.domain];
            let shots = sample_shots(domain, p.n, p.shot_seed)?;
            let z = z_schedule(p.n, Z_BETA)?;
            let theta_e = within_domain_tuning(theta_o, &shots.points(), z, enc.sigma_floor)?;
            Ok(Episode {
                domain_id: domain.domain_id.clone(),
                shots,
                theta_e,
                full_domain: domain_array(domain.points())?,
            })
        })
        .collect()
}

/// Adam moments, kept on the `f32` grid like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(model: &EncoderModel) -> Self {
        Adam::for_shapes(model.params().iter().map(|p| p.shape()))
    }

    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Array> = shapes.into_iter().map(Array::zeros).collect();
        Adam {
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update(&mut self, model: &mut EncoderModel, grads: &[Array], lr: f64) {
        self.update_arrays(model.params_mut(), grads, lr);
    }

    /// One bias-corrected moment update of `params` in place.
    pub fn update_arrays<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Array>,
        grads: &[Array],
        lr: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for ((x, gk), (mk, vk)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let m_new = BETA1 * *mk + (1.0 - BETA1) * gk;
                let v_new = BETA2 * *vk + (1.0 - BETA2) * gk * gk;
                *mk = to_f32_grid(m_new);
                *vk = to_f32_grid(v_new);
                let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + ADAM_EPS);
                *x = to_f32_grid(*x - step);
            }
        }
    }
}

/// Mean per-sample NLL of the full domain under the shifted `theta_e`,
/// recorded on `g` with the model bound as `vars`.
pub fn episode_loss(g: &mut Graph, model: &EncoderModel, vars: &[Var], ep: &Episode) -> Result<Var> {
    let tokens = tokenize(&ep.shots.shots, &ep.theta_e, &model.config)?.compacted();
    let (d_mu, d_sigma) = model.forward(g, vars, &tokens)?;
    let (mu, sd) = apply_shift_graph(g, &ep.theta_e, d_mu, d_sigma, &model.config)?;
    let weights = fixed_weights(model.config.j)?;
    g.gmm_nll(mu, sd, ep.full_domain.clone(), &weights)
}

fn episode_grads(model: &EncoderModel, ep: &Episode) -> Result<(f64, Vec<Option<Array>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = episode_loss(&mut g, model, &vars, ep)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let out = vars.iter().map(|v| grads.take(*v)).collect();
    Ok((value, out))
}

/// Mean loss of the batch and its gradient, reduced in batch order.
pub fn batch_gradient(model: &EncoderModel, batch: &[Episode]) -> Result<(f64, Vec<Array>)> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty batch");
    let mut total: Vec<Array> = model.params().iter().map(|p| Array::zeros(p.shape())).collect();
    let mut loss = 0.0;
    for chunk in batch.chunks(CHUNK) {
        let results: Vec<Result<(f64, Vec<Option<Array>>)>> =
            chunk.par_iter().map(|ep| episode_grads(model, ep)).collect();
        for r in results {
            let (l, grads) = r?;
            loss += l;
            for (acc, g) in total.iter_mut().zip(grads) {
                if let Some(g) = g {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    let n = batch.len() as f64;
    for acc in &mut total {
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
    }
    Ok((loss / n, total))
}

fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One optimizer update on `batch`; returns the pre-update mean loss.
///
/// A non-finite loss or gradient leaves the model untouched and returns a
/// numeric error.
pub fn train_step(model: &mut EncoderModel, batch: &[Episode], opt: &mut Adam, lr: f64) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(model, batch)?;
    ensure!(loss.is_finite(), Numeric, "non-finite training loss");
    let norm = clip_global_norm(&mut grads, CLIP_NORM);
    ensure!(norm.is_finite(), Numeric, "non-finite gradient norm");
    opt.update(model, &grads, lr);
    Ok(loss)
}

/// Mean 4-shot MMD over validation domains.
pub fn validation_mmd(
    model: &EncoderModel,
    theta_o: &SphericalGmm,
    validation: &DomainCollection,
    master_seed: u64,
) -> Result<f64> {
    ensure!(!validation.is_empty(), InvalidArgument, "no validation domains");
    let z = z_schedule(VAL_SHOTS, Z_BETA)?;
    let scores: Vec<Result<f64>> = validation
        .domains()
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let shot_seed = seed::derive(master_seed, &[TAG_VALID, i as u64]);
            let shots = sample_shots(d, VAL_SHOTS.min(d.len()), shot_seed)?;
            let theta_e = within_domain_tuning(theta_o, &shots.points(), z, model.config.sigma_floor)?;
            let est = predict(model, &shots.shots, &theta_e)?;
            let generated = est.sample(metrics::DEFAULT_M, seed::derive(shot_seed, &[1]), true);
            metrics::mmd(&generated, &d.points())
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / validation.len() as f64)
}

/// Inputs that stay fixed over a training run.
pub struct TrainSetup<'a> {
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    /// Scaled source domains.
    pub source: &'a DomainCollection,
    /// Scaled validation domains; may be empty.
    pub validation: &'a DomainCollection,
    pub theta_o: &'a SphericalGmm,
    pub scaler: Option<Scaler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub best_val: Option<f64>,
    pub last_loss: Option<f64>,
    /// Skipped updates and learning-rate reductions.
    pub events: Vec<String>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,lr,train_loss,val_mmd";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Keeps the header and the rows for steps before `start`.
fn open_log(path: &Path, start: usize) -> Result<fs::File> {
    let mut kept = String::from(LOG_HEADER);
    kept.push('\n');
    if start > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < start) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Runs training from scratch, or from `resume`, up to
/// `config.total_steps`, writing the log and checkpoints into `out_dir`.
pub fn train(setup: &TrainSetup, out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let cfg = &setup.config;
    cfg.validate(&setup.encoder)?;
    ensure!(
        setup.theta_o.j() == setup.encoder.j && setup.theta_o.t() == setup.encoder.t,
        Shape,
        "theta_o does not match the encoder's J and T"
    );
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut ckpt = match resume {
        Some(c) => {
            ensure!(
                c.model.config == setup.encoder,
                InvalidArgument,
                "checkpoint encoder config differs from the requested one"
            );
            ensure!(
                c.master_seed == cfg.master_seed,
                InvalidArgument,
                "checkpoint master seed {} differs from {}",
                c.master_seed,
                cfg.master_seed
            );
            c
        }
        None => {
            let model = init_model(&setup.encoder, seed::derive(cfg.master_seed, &[TAG_INIT]))?;
            let optimizer = Some(Adam::new(&model));
            Checkpoint {
                model,
                theta_o: setup.theta_o.clone(),
                scaler: setup.scaler,
                step: 0,
                master_seed: cfg.master_seed,
                train: Some(*cfg),
                optimizer,
                lr_scale: 1.0,
                best_val: None,
            }
        }
    };
    ckpt.train = Some(*cfg);
    if ckpt.optimizer.is_none() {
        ckpt.optimizer = Some(Adam::new(&ckpt.model));
    }
    let has_val = !setup.validation.is_empty();
    let start = ckpt.step as usize;
    let mut log = open_log(&out_dir.join(LOG_FILE), start)?;
    let mut outcome = TrainOutcome {
        steps: start,
        best_val: ckpt.best_val,
        last_loss: None,
        events: Vec::new(),
    };

    if start == 0 {
        if has_val {
            let val = validation_mmd(&ckpt.model, setup.theta_o, setup.validation, cfg.master_seed)?;
            ckpt.best_val = Some(val);
            ckpt.save(&out_dir.join(BEST_CKPT))?;
        }
        ckpt.save(&out_dir.join(LAST_CKPT))?;
        outcome.best_val = ckpt.best_val;
    }

    for step in start..cfg.total_steps {
        let lr = cyclical_lr(step, cfg) * ckpt.lr_scale;
        let batch = make_episode(setup.source, setup.theta_o, cfg, &setup.encoder, step)?;
        let opt = ckpt.optimizer.as_mut().expect("optimizer state");
        let loss = match train_step(&mut ckpt.model, &batch, opt, lr) {
            Ok(l) => Some(l),
            Err(Error::Numeric(msg)) => {
                ckpt.lr_scale /= 2.0;
                outcome.events.push(format!(
                    "step {step}: {msg}; update skipped, learning-rate scale now {}",
                    ckpt.lr_scale
                ));
                if ckpt.lr_scale < MIN_LR_SCALE {
                    return Err(Error::Numeric(format!(
                        "training diverged at step {step}: {msg}"
                    )));
                }
                None
            }
            Err(e) => return Err(e),
        };
        let done = step + 1;
        ckpt.step = done as u64;
        let eval_now = done % cfg.eval_every == 0 || done == cfg.total_steps;
        let mut val = None;
        if eval_now {
            if has_val {
                let v = validation_mmd(&ckpt.model, setup.theta_o, setup.validation, cfg.master_seed)?;
                val = Some(v);
                if ckpt.best_val.is_none_or(|b| v < b) {
                    ckpt.best_val = Some(v);
                    ckpt.save(&out_dir.join(BEST_CKPT))?;
                }
            }
            ckpt.save(&out_dir.join(LAST_CKPT))?;
        }
        writeln!(
            log,
            "{step},{lr},{},{}",
            loss.map_or("nan".to_owned(), |l| l.to_string()),
            val.map_or(String::new(), |v| v.to_string())
        )
        .map_err(|e| Error::io(out_dir.join(LOG_FILE), e))?;
        outcome.steps = done;
        outcome.last_loss = loss.or(outcome.last_loss);
        outcome.best_val = ckpt.best_val;
    }
    if !has_val {
        ckpt.save(&out_dir.join(BEST_CKPT))?;
    }
    Ok(outcome)
}

/// `theta_r` estimate from physical-unit shots, in scaled units.
pub fn estimate(ckpt: &Checkpoint, shots: &[EcpSample]) -> Result<GmmFile> {
    let cfg = &ckpt.model.config;
    let n = shots.len();
    ensure!(
        (1..=cfg.n_max).contains(&n),
        InvalidArgument,
        "need between 1 and {} shots, got {n}",
        cfg.n_max
    );
    let scaler = ckpt
        .scaler
        .ok_or_else(|| Error::Format("checkpoint carries no scaler".into()))?;
    let scaled: Vec<EcpSample> = shots.iter().map(|s| scaler.apply_sample(s)).collect();
    let points: Vec<Vec<f64>> = scaled.iter().map(|s| s.values.clone()).collect();
    let theta_e = within_domain_tuning(&ckpt.theta_o, &points, z_schedule(n, Z_BETA)?, cfg.sigma_floor)?;
    let gmm = predict(&ckpt.model, &scaled, &theta_e)?;
    Ok(GmmFile::new(&gmm, scaler, Space::Scaled))
}
