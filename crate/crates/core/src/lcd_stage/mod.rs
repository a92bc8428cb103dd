//! Stage 2: latent consistency training.
//!
//! Per step, each sample's clean latent (from the frozen stage-1
//! encoder) is noised at two levels `t` and `t + k` with a single shared
//! Gaussian draw. The online network maps the noisier point to a clean
//! prediction, the EMA target network maps the less-noisy point, and the
//! consistency loss is the L1 distance between the two with the target
//! branch excluded from gradient flow. A knowledge-distillation loss
//! pulls the conditional network's LR features toward the clean latent.
//! After each optimizer step the target parameters take an EMA step
//! toward the online ones.

use crate::autodiff::{Graph, ParamCtx, Var};
use crate::backbone::{Encoder, Unet};
use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParameterSet;
use crate::rng::{normal_tensor, stream_rng};
use crate::schedule::{boundary_coeffs, forward_noise, NoiseSchedule};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loss-ablation variants. `NoConsistency` replaces the consistency term
/// with a direct L1 between the model output and the clean latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    NoKd,
    NoConsistency,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<AblationMode> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no_kd" => Ok(AblationMode::NoKd),
            "no_consistency" => Ok(AblationMode::NoConsistency),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected full|no_kd|no_consistency)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoKd => "no_kd",
            AblationMode::NoConsistency => "no_consistency",
        }
    }
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone)]
pub struct ConsistencyConfig {
    /// Timestep interval between the two noising levels.
    pub k: usize,
    /// EMA rate for the target network.
    pub mu: f64,
    pub lambda_ct: f64,
    pub lambda_kd: f64,
    pub ablation_mode: AblationMode,
}

impl ConsistencyConfig {
    pub fn from_config(cfg: &Config) -> Self {
        ConsistencyConfig {
            k: cfg.lcd_k,
            mu: cfg.lcd_mu,
            lambda_ct: cfg.lcd_lambda_ct,
            lambda_kd: cfg.lcd_lambda_kd,
            ablation_mode: cfg.lcd_ablation,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.k >= 1 && self.k <= total_steps - 1) {
            return Err(Error::range("k", format!("must be in [1, {}], got {}", total_steps - 1, self.k)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::range("mu", format!("must be in [0, 1], got {}", self.mu)));
        }
        if self.lambda_ct < 0.0 || self.lambda_kd < 0.0 {
            return Err(Error::range("lambdas", "must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// The stage-2 networks: a UNet noise predictor and the conditional
/// network (an encoder over the upsampled LR image).
pub struct LcdModel {
    pub unet: Unet,
    pub cond: Encoder,
}

impl LcdModel {
    pub fn from_config(cfg: &Config) -> LcdModel {
        LcdModel {
            unet: Unet::new(cfg.unet_spec()),
            cond: Encoder::new(cfg.cond_spec()),
        }
    }

    /// Online parameters under `unet.` and `cond.` (one optimizer covers
    /// both) plus the EMA target copy of the UNet subset.
    pub fn init_params(&self, seed: u64) -> (ParameterSet, ParameterSet) {
        let mut online = ParameterSet::new();
        self.unet
            .init_params(&mut stream_rng(seed, "init.unet", 0))
            .merge_into("unet.", &mut online);
        self.cond
            .init_params(&mut stream_rng(seed, "init.cond", 0))
            .merge_into("cond.", &mut online);
        let target = unet_subset(&online);
        (online, target)
    }
}

/// Extracts the `unet.`-prefixed tensors (the subset shadowed by EMA).
pub fn unet_subset(online: &ParameterSet) -> ParameterSet {
    let mut out = ParameterSet::new();
    for (name, t) in online.iter() {
        if name.starts_with("unet.") {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

/// Closed-form consistency parameterization:
/// `c_skip(t) z_t + c_out(t) (z_t - sqrt(1 - a_bar_t) eps_hat) / sqrt(a_bar_t)`.
///
/// At t = 0 the coefficients are exactly (1, 0), so the result is `z_t`
/// bit-for-bit no matter what the noise predictor returned.
pub fn consistency_parameterize(
    z_t: &Var,
    eps_hat: &Var,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let (c_skip, c_out) = boundary_coeffs(t, schedule.sigma_data(), schedule)?;
    let ab = schedule.alpha_bar()[t];
    let x0 = z_t.sub(&eps_hat.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt());
    Ok(z_t.scale(c_skip).add(&x0.scale(c_out)))
}

/// Value-level variant for callers outside a graph.
pub fn consistency_parameterize_value(
    z_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    let g = Graph::new(false);
    let zv = g.constant(z_t.clone());
    let ev = g.constant(eps_hat.clone());
    Ok((*consistency_parameterize(&zv, &ev, t, schedule)?.value()).clone())
}

/// Graph-level consistency function through a bound UNet.
pub fn consistency_fn_var(
    model: &LcdModel,
    ctx: &ParamCtx,
    z_t: &Var,
    cond: &Var,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let eps_hat = model.unet.forward(ctx, z_t, cond, t);
    consistency_parameterize(z_t, &eps_hat, t, schedule)
}

/// Predicted clean latent for a noisy latent, conditional features, and
/// timestep. `params` holds the UNet tensors under `unet.`.
pub fn consistency_fn(
    model: &LcdModel,
    z_t: &ArrayD<f64>,
    cond: &ArrayD<f64>,
    t: usize,
    params: &ParameterSet,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    if z_t.shape() != cond.shape() {
        return Err(Error::shape("consistency_fn cond", z_t.shape(), cond.shape()));
    }
    if t >= schedule.total_steps() {
        return Err(Error::range(
            "timestep",
            format!("t = {t} out of range 0..{}", schedule.total_steps()),
        ));
    }
    let g = Graph::new(false);
    let ctx = ParamCtx::frozen(&g, params, "unet.");
    let zv = g.constant(z_t.clone());
    let cv = g.constant(cond.clone());
    Ok((*consistency_fn_var(model, &ctx, &zv, &cv, t, schedule)?.value()).clone())
}

/// Consistency-training loss between the online prediction at `t + k`
/// and the target prediction at `t`, sharing one `eps` draw. The target
/// branch is detached (its parameters and the conditional features reach
/// the loss only through the online branch).
#[allow(clippy::too_many_arguments)]
pub fn ct_loss(
    model: &LcdModel,
    z0: &ArrayD<f64>,
    cond: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    params_online: &ParameterSet,
    params_target: &ParameterSet,
    config: &ConsistencyConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    config.validate(schedule.total_steps())?;
    if t + config.k > schedule.total_steps() - 1 {
        return Err(Error::range(
            "timestep",
            format!("t + k = {} exceeds {}", t + config.k, schedule.total_steps() - 1),
        ));
    }
    let g = Graph::new(false);
    let online_ctx = ParamCtx::frozen(&g, params_online, "unet.");
    let target_ctx = ParamCtx::frozen(&g, params_target, "unet.");
    let cv = g.constant(cond.clone());
    let loss = ct_loss_var(model, &g, z0, &cv, t, eps, &online_ctx, &target_ctx, config, schedule)?;
    Ok(loss.scalar())
}

/// Graph-level CT loss; `cond` may carry gradients (they flow through the
/// online branch only).
#[allow(clippy::too_many_arguments)]
pub fn ct_loss_var(
    model: &LcdModel,
    graph: &Graph,
    z0: &ArrayD<f64>,
    cond: &Var,
    t: usize,
    eps: &ArrayD<f64>,
    online_ctx: &ParamCtx,
    target_ctx: &ParamCtx,
    config: &ConsistencyConfig,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let z_t = forward_noise(z0, t, eps, schedule)?;
    let z_tk = forward_noise(z0, t + config.k, eps, schedule)?;
    let z_t = graph.constant(z_t);
    let z_tk = graph.constant(z_tk);

    let f_online = consistency_fn_var(model, online_ctx, &z_tk, cond, t + config.k, schedule)?;
    // stopgrad: the whole target branch sees detached inputs and its
    // output is detached again
    let cond_det = cond.detach();
    let f_target = consistency_fn_var(model, target_ctx, &z_t, &cond_det, t, schedule)?.detach();
    Ok(f_online.sub(&f_target).abs().mean_all())
}

/// Knowledge-distillation loss: elementwise L1 between the conditional
/// features of the upsampled LR image and the clean latent.
pub fn kd_loss(
    model: &LcdModel,
    lr_up_image: &ArrayD<f64>,
    z0: &ArrayD<f64>,
    params_cond: &ParameterSet,
) -> Result<f64> {
    let g = Graph::new(false);
    let ctx = ParamCtx::frozen(&g, params_cond, "cond.");
    let c = model.cond.forward(&ctx, &g.constant(lr_up_image.clone())).mu;
    if c.shape() != z0.shape() {
        return Err(Error::shape("kd_loss cond vs z0", z0.shape(), &c.shape()));
    }
    Ok(kd_loss_var(&c, &g.constant(z0.clone())).scalar())
}

/// Graph-level KD term from precomputed conditional features.
pub fn kd_loss_var(cond: &Var, z0: &Var) -> Var {
    cond.sub(z0).abs().mean_all()
}

/// `target <- mu * target + (1 - mu) * online`, path for path. Every
/// target path must exist in `online` with an identical shape.
pub fn ema_update(params_target: &mut ParameterSet, params_online: &ParameterSet, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::range("mu", format!("must be in [0, 1], got {mu}")));
    }
    // validate everything before mutating anything
    for (name, t) in params_target.iter() {
        let o = params_online.get(name)?;
        if o.shape() != t.shape() {
            return Err(Error::shape(format!("ema_update {name}"), t.shape(), o.shape()));
        }
    }
    for (name, t) in params_target.iter_mut() {
        let o = params_online.get(name).expect("validated above");
        t.zip_mut_with(o, |tv, &ov| *tv = mu * *tv + (1.0 - mu) * ov);
    }
    Ok(())
}

/// Logical random draws for one training step, injectable so tests can
/// count them.
pub trait NoiseSource {
    fn normal(&mut self, shape: &[usize]) -> ArrayD<f64>;
    fn uniform_t(&mut self, max_inclusive: usize) -> usize;
}

/// Adapter over any RNG.
pub struct RngNoise<R: Rng>(pub R);

impl<R: Rng> NoiseSource for RngNoise<R> {
    fn normal(&mut self, shape: &[usize]) -> ArrayD<f64> {
        normal_tensor(&mut self.0, shape)
    }
    fn uniform_t(&mut self, max_inclusive: usize) -> usize {
        self.0.random_range(0..=max_inclusive)
    }
}

#[derive(Debug, Clone)]
pub struct LcdLossOutput {
    pub ct: f64,
    pub kd: Option<f64>,
    pub total: f64,
}

/// One optimizer step over `batch` (pairs with precomputed clean
/// latents), followed by the EMA target update.
///
/// Draw order per sample: one timestep, then one `eps` tensor — the same
/// `eps` builds both noising levels.
#[allow(clippy::too_many_arguments)]
pub fn lcd_step(
    model: &LcdModel,
    batch: &[(&crate::datapipe::ImagePair, &ArrayD<f64>)],
    params_online: &mut ParameterSet,
    params_target: &mut ParameterSet,
    opt: &mut Adam,
    config: &ConsistencyConfig,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<LcdLossOutput> {
    let t_max = schedule.total_steps() - 1 - config.k;
    let draws: Vec<(usize, ArrayD<f64>)> = batch
        .iter()
        .map(|(_, z0)| {
            let t = noise.uniform_t(t_max);
            let eps = noise.normal(z0.shape());
            (t, eps)
        })
        .collect();

    struct SampleOut {
        ct: f64,
        kd: Option<f64>,
        total: f64,
        grads: BTreeMap<String, ArrayD<f64>>,
    }

    let n = batch.len() as f64;
    let per_sample: Vec<Result<SampleOut>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|((pair, z0), (t, eps))| {
            let g = Graph::new(true);
            let unet_ctx = ParamCtx::trainable(&g, params_online, "unet.");
            let cond_ctx = ParamCtx::trainable(&g, params_online, "cond.");
            let target_ctx = ParamCtx::frozen(&g, params_target, "unet.");

            let c = model.cond.forward(&cond_ctx, &g.constant(pair.lr_up.clone())).mu;
            let z0_const = g.constant((*z0).clone());

            let ct_term = match config.ablation_mode {
                AblationMode::NoConsistency => {
                    // direct L1 between the model output at t and the clean latent
                    let z_t = g.constant(forward_noise(z0, *t, eps, schedule)?);
                    let f = consistency_fn_var(model, &unet_ctx, &z_t, &c, *t, schedule)?;
                    f.sub(&z0_const).abs().mean_all()
                }
                _ => ct_loss_var(model, &g, z0, &c, *t, eps, &unet_ctx, &target_ctx, config, schedule)?,
            };

            let (total, kd_val) = if config.ablation_mode == AblationMode::NoKd {
                (ct_term.scale(config.lambda_ct), None)
            } else {
                let kd = kd_loss_var(&c, &z0_const);
                let total = ct_term.scale(config.lambda_ct).add(&kd.scale(config.lambda_kd));
                (total, Some(kd.scalar()))
            };
            g.backward(&total);
            Ok(SampleOut {
                ct: ct_term.scalar(),
                kd: kd_val,
                total: total.scalar(),
                grads: g.param_grads(),
            })
        })
        .collect();

    let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut acc = LcdLossOutput {
        ct: 0.0,
        kd: None,
        total: 0.0,
    };
    for s in per_sample {
        let s = s?;
        for (name, g) in &s.grads {
            match grads.get_mut(name) {
                Some(t) => *t += &(g / n),
                None => {
                    grads.insert(name.clone(), g / n);
                }
            }
        }
        acc.ct += s.ct / n;
        acc.total += s.total / n;
        if let Some(k) = s.kd {
            *acc.kd.get_or_insert(0.0) += k / n;
        }
    }

    opt.step(params_online, &grads)?;
    ema_update(params_target, params_online, config.mu)?;
    Ok(acc)
}

pub struct LcdTrainReport {
    pub params_online: ParameterSet,
    pub params_target: ParameterSet,
    pub epoch_mean_loss: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub global_step: u64,
}

/// Precomputes the frozen-encoder clean latents for every pair.
pub fn encode_dataset(cfg: &Config, params_ae: &ParameterSet, dataset: &[crate::datapipe::ImagePair]) -> Result<Vec<ArrayD<f64>>> {
    let spec = cfg.encoder_spec();
    let enc = Encoder::new(spec);
    dataset
        .iter()
        .map(|pair| {
            let g = Graph::new(false);
            let ctx = ParamCtx::frozen(&g, params_ae, "enc.");
            let x = crate::autodiff::concat_channels(&[
                &g.constant(pair.hr.clone()),
                &g.constant(pair.lr_up.clone()),
            ]);
            Ok((*enc.forward(&ctx, &x).mu.value()).clone())
        })
        .collect()
}

/// Runs the stage-2 loop against a frozen stage-1 autoencoder. Writes
/// `lcd_epoch{N}.ckpt` checkpoints and `lcd_loss.csv` under `out` (the
/// `kd` column is omitted in `no_kd` mode).
pub fn train_lcd(
    dataset: &[crate::datapipe::ImagePair],
    params_ae: &ParameterSet,
    cfg: &Config,
    out: &Path,
    resume: Option<&Path>,
) -> Result<LcdTrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("stage-2 training set".to_string()));
    }
    cfg.validate()?;
    let schedule = cfg.noise_schedule()?;
    let ccfg = ConsistencyConfig::from_config(cfg);
    ccfg.validate(schedule.total_steps())?;
    if !params_ae.paths().any(|p| p.starts_with("enc.")) {
        return Err(Error::range(
            "stage-1 parameters",
            "no `enc.` tensors found; incompatible or missing checkpoint".to_string(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let model = LcdModel::from_config(cfg);
    let (mut online, mut target) = model.init_params(cfg.seed);
    let mut opt = Adam::new(cfg.lcd_learning_rate);
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    let mut history: Vec<crate::rae_stage::LossRow> = Vec::new();

    if let Some(path) = resume {
        let ck = load_lcd_checkpoint(path)?;
        if !crate::config::resume_compatible(&ck.config_echo, &cfg.to_flat_text()) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "checkpoint was produced under a different configuration".to_string(),
            });
        }
        online = ck.params_online;
        target = ck.params_target;
        opt.import_state("opt.", ck.opt_step, &ck.opt_tensors);
        start_epoch = ck.epoch + 1;
        global_step = ck.global_step;
        history = ck.history;
    }

    // frozen encoder: clean latents never change during stage 2
    let z0s = encode_dataset(cfg, params_ae, dataset)?;

    let csv_path = out.join("lcd_loss.csv");
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let has_kd = ccfg.ablation_mode != AblationMode::NoKd;
    if has_kd {
        writeln!(csv, "step,epoch,ct,kd,total").map_err(|e| Error::io(&csv_path, e))?;
    } else {
        writeln!(csv, "step,epoch,ct,total").map_err(|e| Error::io(&csv_path, e))?;
    }
    for row in &history {
        write_lcd_csv_row(&mut csv, &csv_path, row, has_kd)?;
    }

    let mut epoch_mean_loss = vec![f64::NAN; start_epoch];
    let mut final_ckpt = out.join(format!("lcd_epoch{}.ckpt", cfg.lcd_epochs.saturating_sub(1)));
    for epoch in start_epoch..cfg.lcd_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "lcd.order", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.lcd_batch_size) {
            let batch: Vec<(&crate::datapipe::ImagePair, &ArrayD<f64>)> =
                chunk.iter().map(|&i| (&dataset[i], &z0s[i])).collect();
            let mut noise = RngNoise(stream_rng(cfg.seed, "lcd.noise", global_step));
            let outv = lcd_step(
                &model,
                &batch,
                &mut online,
                &mut target,
                &mut opt,
                &ccfg,
                &schedule,
                &mut noise,
            )?;
            if !outv.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: global_step as usize,
                    components: format!("ct={:?} kd={:?} total={:?}", outv.ct, outv.kd, outv.total),
                });
            }
            global_step += 1;
            loss_sum += outv.total;
            batches += 1;
            let mut values = vec![("ct".to_string(), outv.ct)];
            if let Some(kd) = outv.kd {
                values.push(("kd".to_string(), kd));
            }
            values.push(("total".to_string(), outv.total));
            let row = crate::rae_stage::LossRow {
                step: global_step,
                epoch,
                values,
            };
            write_lcd_csv_row(&mut csv, &csv_path, &row, has_kd)?;
            history.push(row);
        }
        epoch_mean_loss.push(loss_sum / batches.max(1) as f64);

        let last = epoch + 1 == cfg.lcd_epochs;
        if last || (cfg.lcd_save_every > 0 && (epoch + 1) % cfg.lcd_save_every == 0) {
            let path = out.join(format!("lcd_epoch{epoch}.ckpt"));
            save_lcd_checkpoint(&path, cfg, &online, &target, &opt, epoch, global_step, &history)?;
            if last {
                final_ckpt = path;
            }
        }
    }

    Ok(LcdTrainReport {
        params_online: online,
        params_target: target,
        epoch_mean_loss,
        final_checkpoint: final_ckpt,
        loss_csv: csv_path,
        global_step,
    })
}

fn write_lcd_csv_row(csv: &mut std::fs::File, path: &Path, row: &crate::rae_stage::LossRow, has_kd: bool) -> Result<()> {
    let v: BTreeMap<&str, f64> = row.values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    if has_kd {
        writeln!(csv, "{},{},{},{},{}", row.step, row.epoch, v["ct"], v["kd"], v["total"])
    } else {
        writeln!(csv, "{},{},{},{}", row.step, row.epoch, v["ct"], v["total"])
    }
    .map_err(|e| Error::io(path, e))
}

pub struct LcdCheckpoint {
    pub params_online: ParameterSet,
    pub params_target: ParameterSet,
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub config_echo: String,
    pub history: Vec<crate::rae_stage::LossRow>,
    pub opt_tensors: BTreeMap<String, ArrayD<f64>>,
    pub opt_step: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn save_lcd_checkpoint(
    path: &Path,
    cfg: &Config,
    online: &ParameterSet,
    target: &ParameterSet,
    opt: &Adam,
    epoch: usize,
    global_step: u64,
    history: &[crate::rae_stage::LossRow],
) -> Result<()> {
    let mut ck = Checkpoint::new("lcd", epoch, global_step, cfg.seed);
    for (name, t) in online.iter() {
        ck.tensors.insert(format!("online.{name}"), t.clone());
    }
    for (name, t) in target.iter() {
        ck.tensors.insert(format!("target.{name}"), t.clone());
    }
    opt.export_state("opt.", &mut ck.tensors);
    ck.meta = serde_json::json!({
        "config_echo": cfg.to_flat_text(),
        "opt_step": opt.step_count(),
        "history": history,
    });
    checkpoint::save(path, &ck)
}

pub fn load_lcd_checkpoint(path: &Path) -> Result<LcdCheckpoint> {
    let ck = checkpoint::load(path)?;
    if ck.kind != "lcd" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a stage-2 checkpoint, found kind {:?}", ck.kind),
        });
    }
    let mut online = ParameterSet::new();
    let mut target = ParameterSet::new();
    let mut opt_tensors = BTreeMap::new();
    for (name, t) in &ck.tensors {
        if let Some(rest) = name.strip_prefix("online.") {
            online.insert(rest, t.clone());
        } else if let Some(rest) = name.strip_prefix("target.") {
            target.insert(rest, t.clone());
        } else {
            opt_tensors.insert(name.clone(), t.clone());
        }
    }
    Ok(LcdCheckpoint {
        params_online: online,
        params_target: target,
        epoch: ck.epoch,
        global_step: ck.global_step,
        seed: ck.rng_seed,
        config_echo: ck
            .meta
            .get("config_echo")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        history: ck
            .meta
            .get("history")
            .map(|h| serde_json::from_value(h.clone()).unwrap_or_default())
            .unwrap_or_default(),
        opt_tensors,
        opt_step: ck.meta.get("opt_step").and_then(|v| v.as_u64()).unwrap_or(0),
    })
}
