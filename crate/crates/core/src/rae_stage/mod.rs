//! Stage 1: residual-autoencoder pretraining.
//!
//! The generator objective is `w_l1 * L1(I_SR, I_HR)` during the warmup
//! epochs, after which the adversarial term (hinge objective against a
//! patch discriminator) and the KL-to-standard-normal penalty on the
//! encoder posterior join in. Generator and discriminator alternate;
//! each sees the other's parameters frozen.

use crate::autodiff::{concat_channels, Graph, ParamCtx, Var};
use crate::backbone::{Decoder, Discriminator, Encoder};
use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParameterSet;
use crate::rng::{normal_tensor, stream_rng};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loss weights and the warmup gate.
#[derive(Debug, Clone)]
pub struct RaeLossWeights {
    pub w_l1: f64,
    pub w_adv: f64,
    pub w_reg: f64,
    pub warmup_epochs: usize,
}

impl Default for RaeLossWeights {
    fn default() -> Self {
        RaeLossWeights {
            w_l1: 1.0,
            w_adv: 0.5,
            w_reg: 1.0e-6,
            warmup_epochs: 50,
        }
    }
}

impl RaeLossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        RaeLossWeights {
            w_l1: cfg.rae_w_l1,
            w_adv: cfg.rae_w_adv,
            w_reg: cfg.rae_w_reg,
            warmup_epochs: cfg.rae_warmup_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_l1 < 0.0 || self.w_adv < 0.0 || self.w_reg < 0.0 {
            return Err(Error::range("loss weights", "must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// Named loss components for one generator evaluation. `adv`/`reg` are
/// absent during warmup — the terms are not merely zero, they are not in
/// the objective at all.
#[derive(Debug, Clone)]
pub struct RaeLossOutput {
    pub l1: f64,
    pub adv: Option<f64>,
    pub reg: Option<f64>,
    pub total: f64,
}

/// The stage-1 model trio.
pub struct RaeModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

impl RaeModel {
    pub fn from_config(cfg: &Config) -> RaeModel {
        RaeModel {
            encoder: Encoder::new(cfg.encoder_spec()),
            decoder: Decoder::new(cfg.decoder_spec()),
            discriminator: Discriminator::new(cfg.disc_spec()),
        }
    }

    /// Autoencoder parameters under `enc.`/`dec.` plus a separate
    /// discriminator set. Draw order is fixed, so a seed pins the init.
    pub fn init_params(&self, seed: u64) -> (ParameterSet, ParameterSet) {
        let mut ae = ParameterSet::new();
        self.encoder
            .init_params(&mut stream_rng(seed, "init.enc", 0))
            .merge_into("enc.", &mut ae);
        self.decoder
            .init_params(&mut stream_rng(seed, "init.dec", 0))
            .merge_into("dec.", &mut ae);
        let disc = self
            .discriminator
            .init_params(&mut stream_rng(seed, "init.disc", 0));
        (ae, disc)
    }

    /// Builds the generator loss for one sample on `graph`.
    ///
    /// `eps` is the reparameterization draw (passed in for determinism).
    /// Warmup epochs build only the L1 term; afterwards the adversarial
    /// and KL terms are added, with discriminator parameters frozen.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_loss(
        &self,
        graph: &Graph,
        pair: &crate::datapipe::ImagePair,
        eps: &ArrayD<f64>,
        params_ae: &ParameterSet,
        params_disc: &ParameterSet,
        weights: &RaeLossWeights,
        epoch: usize,
        trainable: bool,
    ) -> GeneratorLoss {
        let enc_ctx = if trainable {
            ParamCtx::trainable(graph, params_ae, "enc.")
        } else {
            ParamCtx::frozen(graph, params_ae, "enc.")
        };
        let dec_ctx = if trainable {
            ParamCtx::trainable(graph, params_ae, "dec.")
        } else {
            ParamCtx::frozen(graph, params_ae, "dec.")
        };

        let hr = graph.constant(pair.hr.clone());
        let lr = graph.constant(pair.lr.clone());
        let lr_up = graph.constant(pair.lr_up.clone());

        let enc_in = concat_channels(&[&hr, &lr_up]);
        let enc_out = self.encoder.forward(&enc_ctx, &enc_in);
        let logvar = enc_out.logvar.expect("stage-1 encoder has a double head");
        // z = mu + exp(logvar / 2) * eps
        let eps_v = graph.constant(eps.clone());
        let z = enc_out.mu.add(&logvar.scale(0.5).exp().mul(&eps_v));
        let sr = self.decoder.forward(&dec_ctx, &lr, &z);

        let l1 = sr.sub(&hr).abs().mean_all();
        let mut total = l1.scale(weights.w_l1);
        let mut adv = None;
        let mut reg = None;
        if epoch >= weights.warmup_epochs {
            // generator hinge term: -mean D(fake); discriminator frozen
            let disc_ctx = ParamCtx::frozen(graph, params_disc, "");
            let adv_v = self.discriminator.forward(&disc_ctx, &sr).mean_all().neg();
            // KL(N(mu, sigma^2) || N(0, 1)) summed over latent elements
            let kl = enc_out
                .mu
                .square()
                .add(&logvar.exp())
                .add_scalar(-1.0)
                .sub(&logvar)
                .sum_all()
                .scale(0.5);
            total = total.add(&adv_v.scale(weights.w_adv)).add(&kl.scale(weights.w_reg));
            adv = Some(adv_v);
            reg = Some(kl);
        }
        GeneratorLoss {
            sr,
            l1,
            adv,
            reg,
            total,
        }
    }

    /// Hinge discriminator loss for one (real, fake) pair; the fake image
    /// enters as a constant (no generator gradients).
    pub fn discriminator_loss(
        &self,
        graph: &Graph,
        real: &ArrayD<f64>,
        fake: &ArrayD<f64>,
        params_disc: &ParameterSet,
        trainable: bool,
    ) -> Var {
        let ctx = if trainable {
            ParamCtx::trainable(graph, params_disc, "")
        } else {
            ParamCtx::frozen(graph, params_disc, "")
        };
        let d_real = self.discriminator.forward(&ctx, &graph.constant(real.clone()));
        let d_fake = self.discriminator.forward(&ctx, &graph.constant(fake.clone()));
        let real_term = d_real.neg().add_scalar(1.0).relu().mean_all();
        let fake_term = d_fake.add_scalar(1.0).relu().mean_all();
        real_term.add(&fake_term)
    }
}

pub struct GeneratorLoss {
    pub sr: Var,
    pub l1: Var,
    pub adv: Option<Var>,
    pub reg: Option<Var>,
    pub total: Var,
}

/// Batch-mean loss values without gradients: the per-operation contract
/// used by tests and the FD oracle.
#[allow(clippy::too_many_arguments)]
pub fn rae_loss(
    model: &RaeModel,
    pairs: &[crate::datapipe::ImagePair],
    eps: &[ArrayD<f64>],
    params_ae: &ParameterSet,
    params_disc: &ParameterSet,
    weights: &RaeLossWeights,
    epoch: usize,
) -> Result<RaeLossOutput> {
    weights.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("rae_loss batch".to_string()));
    }
    if pairs.len() != eps.len() {
        return Err(Error::range("eps batch", format!("{} draws for {} pairs", eps.len(), pairs.len())));
    }
    let mut acc = RaeLossOutput {
        l1: 0.0,
        adv: None,
        reg: None,
        total: 0.0,
    };
    let n = pairs.len() as f64;
    for (pair, e) in pairs.iter().zip(eps) {
        let g = Graph::new(false);
        let out = model.generator_loss(&g, pair, e, params_ae, params_disc, weights, epoch, false);
        acc.l1 += out.l1.scalar() / n;
        acc.total += out.total.scalar() / n;
        if let Some(a) = out.adv {
            *acc.adv.get_or_insert(0.0) += a.scalar() / n;
        }
        if let Some(r) = out.reg {
            *acc.reg.get_or_insert(0.0) += r.scalar() / n;
        }
    }
    Ok(acc)
}

/// Per-epoch loss row written to the CSV and kept in checkpoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub values: Vec<(String, f64)>,
}

pub struct RaeTrainReport {
    pub params_ae: ParameterSet,
    pub params_disc: ParameterSet,
    pub epoch_mean_l1: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub global_step: u64,
}

/// One generator + (after warmup) discriminator update over `batch`.
/// Returns the generator components averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn rae_step(
    model: &RaeModel,
    batch: &[&crate::datapipe::ImagePair],
    params_ae: &mut ParameterSet,
    params_disc: &mut ParameterSet,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    weights: &RaeLossWeights,
    epoch: usize,
    eps_draws: &[ArrayD<f64>],
) -> Result<RaeLossOutput> {
    let n = batch.len() as f64;

    struct SampleOut {
        l1: f64,
        adv: Option<f64>,
        reg: Option<f64>,
        total: f64,
        grads: BTreeMap<String, ArrayD<f64>>,
        fake: ArrayD<f64>,
    }

    let per_sample: Vec<SampleOut> = batch
        .par_iter()
        .zip(eps_draws.par_iter())
        .map(|(pair, eps)| {
            let g = Graph::new(true);
            let out = model.generator_loss(&g, pair, eps, params_ae, params_disc, weights, epoch, true);
            g.backward(&out.total);
            SampleOut {
                l1: out.l1.scalar(),
                adv: out.adv.as_ref().map(Var::scalar),
                reg: out.reg.as_ref().map(Var::scalar),
                total: out.total.scalar(),
                grads: g.param_grads(),
                fake: (*out.sr.value()).clone(),
            }
        })
        .collect();

    // deterministic fold in batch order
    let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut acc = RaeLossOutput {
        l1: 0.0,
        adv: None,
        reg: None,
        total: 0.0,
    };
    for s in &per_sample {
        for (name, g) in &s.grads {
            match grads.get_mut(name) {
                Some(t) => *t += &(g / n),
                None => {
                    grads.insert(name.clone(), g / n);
                }
            }
        }
        acc.l1 += s.l1 / n;
        acc.total += s.total / n;
        if let Some(a) = s.adv {
            *acc.adv.get_or_insert(0.0) += a / n;
        }
        if let Some(r) = s.reg {
            *acc.reg.get_or_insert(0.0) += r / n;
        }
    }
    // generator gradients carry the `enc.`/`dec.` prefixes of params_ae
    opt_g.step(params_ae, &grads)?;

    if epoch >= weights.warmup_epochs {
        let disc_grads: Vec<BTreeMap<String, ArrayD<f64>>> = batch
            .par_iter()
            .zip(per_sample.par_iter())
            .map(|(pair, s)| {
                let g = Graph::new(true);
                let loss = model.discriminator_loss(&g, &pair.hr, &s.fake, params_disc, true);
                g.backward(&loss);
                g.param_grads()
            })
            .collect();
        let mut dgrads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        for gmap in &disc_grads {
            for (name, g) in gmap {
                match dgrads.get_mut(name) {
                    Some(t) => *t += &(g / n),
                    None => {
                        dgrads.insert(name.clone(), g / n);
                    }
                }
            }
        }
        opt_d.step(params_disc, &dgrads)?;
    }
    Ok(acc)
}

fn check_finite(out: &RaeLossOutput, epoch: usize, step: u64) -> Result<()> {
    if out.total.is_finite() && out.l1.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        epoch,
        step: step as usize,
        components: format!("l1={:?} adv={:?} reg={:?} total={:?}", out.l1, out.adv, out.reg, out.total),
    })
}

/// Runs the stage-1 loop, optionally resuming from a checkpoint.
/// Writes `rae_epoch{N}.ckpt` checkpoints and `rae_loss.csv` under `out`.
pub fn train_rae(
    dataset: &[crate::datapipe::ImagePair],
    cfg: &Config,
    out: &Path,
    resume: Option<&Path>,
) -> Result<RaeTrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("stage-1 training set".to_string()));
    }
    cfg.validate()?;
    let weights = RaeLossWeights::from_config(cfg);
    weights.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let model = RaeModel::from_config(cfg);
    let (mut params_ae, mut params_disc) = model.init_params(cfg.seed);
    let mut opt_g = Adam::new(cfg.rae_learning_rate);
    let mut opt_d = Adam::new(cfg.rae_learning_rate);
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    let mut history: Vec<LossRow> = Vec::new();

    if let Some(path) = resume {
        let ck = load_rae_checkpoint(path)?;
        if !crate::config::resume_compatible(&ck.config_echo, &cfg.to_flat_text()) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "checkpoint was produced under a different configuration".to_string(),
            });
        }
        params_ae = ck.params_ae;
        params_disc = ck.params_disc;
        opt_g.import_state("opt_g.", ck.opt_step, &ck.opt_tensors);
        opt_d.import_state("opt_d.", ck.opt_d_step, &ck.opt_tensors);
        start_epoch = ck.epoch + 1;
        global_step = ck.global_step;
        history = ck.history;
    }

    let csv_path = out.join("rae_loss.csv");
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "step,epoch,l1,adv,reg,total").map_err(|e| Error::io(&csv_path, e))?;
    for row in &history {
        write_rae_csv_row(&mut csv, &csv_path, row)?;
    }

    let latent_shape = [
        cfg.latent_channels,
        cfg.data_patch_size / cfg.downsample_factor,
        cfg.data_patch_size / cfg.downsample_factor,
    ];

    let mut epoch_mean_l1 = vec![f64::NAN; start_epoch];
    let mut final_ckpt = out.join(format!("rae_epoch{}.ckpt", cfg.rae_epochs.saturating_sub(1)));
    for epoch in start_epoch..cfg.rae_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, "rae.order", epoch as u64));
        let mut l1_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.rae_batch_size) {
            let batch: Vec<&crate::datapipe::ImagePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let eps: Vec<ArrayD<f64>> = (0..batch.len())
                .map(|i| {
                    let mut r = stream_rng(cfg.seed, "rae.reparam", global_step * 4096 + i as u64);
                    normal_tensor(&mut r, &latent_shape)
                })
                .collect();
            let outv = rae_step(
                &model,
                &batch,
                &mut params_ae,
                &mut params_disc,
                &mut opt_g,
                &mut opt_d,
                &weights,
                epoch,
                &eps,
            )?;
            check_finite(&outv, epoch, global_step)?;
            global_step += 1;
            l1_sum += outv.l1;
            batches += 1;
            let row = LossRow {
                step: global_step,
                epoch,
                values: vec![
                    ("l1".to_string(), outv.l1),
                    ("adv".to_string(), outv.adv.unwrap_or(0.0)),
                    ("reg".to_string(), outv.reg.unwrap_or(0.0)),
                    ("total".to_string(), outv.total),
                ],
            };
            write_rae_csv_row(&mut csv, &csv_path, &row)?;
            history.push(row);
        }
        epoch_mean_l1.push(l1_sum / batches.max(1) as f64);

        let last = epoch + 1 == cfg.rae_epochs;
        if last || (cfg.rae_save_every > 0 && (epoch + 1) % cfg.rae_save_every == 0) {
            let path = out.join(format!("rae_epoch{epoch}.ckpt"));
            save_rae_checkpoint(&path, cfg, &params_ae, &params_disc, &opt_g, &opt_d, epoch, global_step, &history)?;
            if last {
                final_ckpt = path;
            }
        }
    }

    Ok(RaeTrainReport {
        params_ae,
        params_disc,
        epoch_mean_l1,
        final_checkpoint: final_ckpt,
        loss_csv: csv_path,
        global_step,
    })
}

fn write_rae_csv_row(csv: &mut std::fs::File, path: &Path, row: &LossRow) -> Result<()> {
    let v: BTreeMap<&str, f64> = row.values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    writeln!(
        csv,
        "{},{},{},{},{},{}",
        row.step, row.epoch, v["l1"], v["adv"], v["reg"], v["total"]
    )
    .map_err(|e| Error::io(path, e))
}

pub struct RaeCheckpoint {
    pub params_ae: ParameterSet,
    pub params_disc: ParameterSet,
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub config_echo: String,
    pub history: Vec<LossRow>,
    pub opt_tensors: BTreeMap<String, ArrayD<f64>>,
    pub opt_step: u64,
    pub opt_d_step: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn save_rae_checkpoint(
    path: &Path,
    cfg: &Config,
    params_ae: &ParameterSet,
    params_disc: &ParameterSet,
    opt_g: &Adam,
    opt_d: &Adam,
    epoch: usize,
    global_step: u64,
    history: &[LossRow],
) -> Result<()> {
    let mut ck = Checkpoint::new("rae", epoch, global_step, cfg.seed);
    for (name, t) in params_ae.iter() {
        ck.tensors.insert(format!("ae.{name}"), t.clone());
    }
    for (name, t) in params_disc.iter() {
        ck.tensors.insert(format!("disc.{name}"), t.clone());
    }
    opt_g.export_state("opt_g.", &mut ck.tensors);
    opt_d.export_state("opt_d.", &mut ck.tensors);
    ck.meta = serde_json::json!({
        "config_echo": cfg.to_flat_text(),
        "opt_g_step": opt_g.step_count(),
        "opt_d_step": opt_d.step_count(),
        "history": history,
    });
    checkpoint::save(path, &ck)
}

pub fn load_rae_checkpoint(path: &Path) -> Result<RaeCheckpoint> {
    let ck = checkpoint::load(path)?;
    if ck.kind != "rae" {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a stage-1 checkpoint, found kind {:?}", ck.kind),
        });
    }
    let mut params_ae = ParameterSet::new();
    let mut params_disc = ParameterSet::new();
    let mut opt_tensors = BTreeMap::new();
    for (name, t) in &ck.tensors {
        if let Some(rest) = name.strip_prefix("ae.") {
            params_ae.insert(rest, t.clone());
        } else if let Some(rest) = name.strip_prefix("disc.") {
            params_disc.insert(rest, t.clone());
        } else {
            opt_tensors.insert(name.clone(), t.clone());
        }
    }
    let meta = &ck.meta;
    let history: Vec<LossRow> = meta
        .get("history")
        .map(|h| serde_json::from_value(h.clone()).unwrap_or_default())
        .unwrap_or_default();
    Ok(RaeCheckpoint {
        params_ae,
        params_disc,
        epoch: ck.epoch,
        global_step: ck.global_step,
        seed: ck.rng_seed,
        config_echo: meta
            .get("config_echo")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string(),
        history,
        opt_tensors,
        opt_step: meta.get("opt_g_step").and_then(|v| v.as_u64()).unwrap_or(0),
        opt_d_step: meta.get("opt_d_step").and_then(|v| v.as_u64()).unwrap_or(0),
    })
}

#[cfg(test)]
mod tests;
