//! Run configuration: flat `section.key = value` text files, profile
//! defaults, override resolution, and the resolved-config echo.
//!
//! Resolution order: profile defaults, then the config file, then
//! explicit overrides. Unknown keys and malformed values are typed
//! errors raised before any work starts.

use crate::backbone::{DecoderSpec, DiscriminatorSpec, EncoderSpec, SRBranchSpec, UnetSpec};
use crate::error::{Error, Result};
use crate::lcd_stage::AblationMode;
use crate::schedule::NoiseSchedule;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Paper-scale defaults (256-class hardware assumed; not exercised
    /// by the desk-scale tests).
    Full,
    /// Desk-scale profile: 32x32 HR patches, latent factor 4, narrow
    /// widths, learning rates sized so the full pipeline trains in
    /// minutes on CPU.
    Tiny,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "full" => Ok(Profile::Full),
            "tiny" => Ok(Profile::Tiny),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected full|tiny)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,

    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_data: f64,

    pub image_channels: usize,
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub ae_base_width: usize,
    pub ae_blocks_per_level: usize,
    pub unet_base_width: usize,
    pub unet_channel_mults: Vec<usize>,
    pub unet_blocks_per_level: usize,
    pub sr_feature_width: usize,
    pub num_fru: usize,
    pub imdb_per_fru: usize,
    pub disc_base_width: usize,

    pub rae_epochs: usize,
    pub rae_batch_size: usize,
    pub rae_learning_rate: f64,
    pub rae_warmup_epochs: usize,
    pub rae_w_l1: f64,
    pub rae_w_adv: f64,
    pub rae_w_reg: f64,
    pub rae_save_every: usize,

    pub lcd_epochs: usize,
    pub lcd_batch_size: usize,
    pub lcd_learning_rate: f64,
    pub lcd_k: usize,
    pub lcd_mu: f64,
    pub lcd_lambda_ct: f64,
    pub lcd_lambda_kd: f64,
    pub lcd_ablation: AblationMode,
    pub lcd_save_every: usize,

    pub data_patch_size: usize,
    pub data_split: (f64, f64, f64),
    pub data_root: Option<String>,
}

impl Config {
    /// Paper-reported training values: 1000 steps with beta from 0.0015
    /// to 0.0155, 64 UNet base channels, autoencoder at lr 3.6e-5 batch
    /// 8 with a 50-epoch L1-only warmup and weights (1.0, 0.5, 1e-6),
    /// consistency stage at lr 8e-5 batch 16.
    pub fn defaults(profile: Profile) -> Config {
        let full = Config {
            profile,
            seed: 0,
            total_steps: 1000,
            beta_start: 0.0015,
            beta_end: 0.0155,
            sigma_data: 0.5,
            image_channels: 3,
            latent_channels: 4,
            downsample_factor: 8,
            ae_base_width: 64,
            ae_blocks_per_level: 1,
            unet_base_width: 64,
            unet_channel_mults: vec![1, 2, 4],
            unet_blocks_per_level: 2,
            sr_feature_width: 64,
            num_fru: 4,
            imdb_per_fru: 12,
            disc_base_width: 64,
            rae_epochs: 200,
            rae_batch_size: 8,
            rae_learning_rate: 3.6e-5,
            rae_warmup_epochs: 50,
            rae_w_l1: 1.0,
            rae_w_adv: 0.5,
            rae_w_reg: 1.0e-6,
            rae_save_every: 50,
            lcd_epochs: 200,
            lcd_batch_size: 16,
            lcd_learning_rate: 8.0e-5,
            lcd_k: 20,
            lcd_mu: 0.95,
            lcd_lambda_ct: 1.0,
            lcd_lambda_kd: 1.0,
            lcd_ablation: AblationMode::Full,
            lcd_save_every: 50,
            data_patch_size: 128,
            data_split: (0.8, 0.1, 0.1),
            data_root: None,
        };
        match profile {
            Profile::Full => full,
            Profile::Tiny => Config {
                downsample_factor: 4,
                ae_base_width: 16,
                unet_base_width: 32,
                unet_channel_mults: vec![1, 2],
                unet_blocks_per_level: 1,
                sr_feature_width: 32,
                disc_base_width: 16,
                rae_epochs: 30,
                rae_batch_size: 4,
                rae_learning_rate: 1.0e-3,
                rae_warmup_epochs: 20,
                rae_save_every: 10,
                lcd_epochs: 50,
                lcd_batch_size: 4,
                lcd_learning_rate: 1.0e-3,
                lcd_save_every: 10,
                data_patch_size: 32,
                ..full
            },
        }
    }

    /// Applies `key = value` pairs on top of `self`.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in entries {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {key:?}: {what}: {value:?}"));
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad("invalid value"))?
            };
        }
        match key {
            "run.seed" => self.seed = parse!(u64),
            "schedule.total_steps" => self.total_steps = parse!(usize),
            "schedule.beta_start" => self.beta_start = parse!(f64),
            "schedule.beta_end" => self.beta_end = parse!(f64),
            "schedule.sigma_data" => self.sigma_data = parse!(f64),
            "model.image_channels" => self.image_channels = parse!(usize),
            "model.latent_channels" => self.latent_channels = parse!(usize),
            "model.downsample_factor" => self.downsample_factor = parse!(usize),
            "model.ae_base_width" => self.ae_base_width = parse!(usize),
            "model.ae_blocks_per_level" => self.ae_blocks_per_level = parse!(usize),
            "model.unet_base_width" => self.unet_base_width = parse!(usize),
            "model.unet_channel_mults" => {
                self.unet_channel_mults = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|_| bad("invalid list")))
                    .collect::<Result<Vec<_>>>()?;
            }
            "model.unet_blocks_per_level" => self.unet_blocks_per_level = parse!(usize),
            "model.sr_feature_width" => self.sr_feature_width = parse!(usize),
            "model.num_fru" => self.num_fru = parse!(usize),
            "model.imdb_per_fru" => self.imdb_per_fru = parse!(usize),
            "model.disc_base_width" => self.disc_base_width = parse!(usize),
            "rae.epochs" => self.rae_epochs = parse!(usize),
            "rae.batch_size" => self.rae_batch_size = parse!(usize),
            "rae.learning_rate" => self.rae_learning_rate = parse!(f64),
            "rae.warmup_epochs" => self.rae_warmup_epochs = parse!(usize),
            "rae.w_l1" => self.rae_w_l1 = parse!(f64),
            "rae.w_adv" => self.rae_w_adv = parse!(f64),
            "rae.w_reg" => self.rae_w_reg = parse!(f64),
            "rae.save_every" => self.rae_save_every = parse!(usize),
            "lcd.epochs" => self.lcd_epochs = parse!(usize),
            "lcd.batch_size" => self.lcd_batch_size = parse!(usize),
            "lcd.learning_rate" => self.lcd_learning_rate = parse!(f64),
            "lcd.k" => self.lcd_k = parse!(usize),
            "lcd.mu" => self.lcd_mu = parse!(f64),
            "lcd.lambda_ct" => self.lcd_lambda_ct = parse!(f64),
            "lcd.lambda_kd" => self.lcd_lambda_kd = parse!(f64),
            "lcd.ablation" => self.lcd_ablation = AblationMode::parse(value)?,
            "lcd.save_every" => self.lcd_save_every = parse!(usize),
            "data.patch_size" => self.data_patch_size = parse!(usize),
            "data.split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| p.trim().parse::<f64>().map_err(|_| bad("invalid fractions")))
                    .collect::<Result<Vec<_>>>()?;
                if parts.len() != 3 {
                    return Err(bad("expected three comma-separated fractions"));
                }
                self.data_split = (parts[0], parts[1], parts[2]);
            }
            "data.root" => self.data_root = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 2 {
            return Err(Error::Config("schedule.total_steps must be >= 2".to_string()));
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start < beta_end < 1".to_string()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("schedule.sigma_data must be positive".to_string()));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config("model.image_channels must be 1 or 3".to_string()));
        }
        if !(self.lcd_k >= 1 && self.lcd_k <= self.total_steps - 1) {
            return Err(Error::Config(format!(
                "lcd.k must be in [1, {}], got {}",
                self.total_steps - 1,
                self.lcd_k
            )));
        }
        if !(0.0..=1.0).contains(&self.lcd_mu) {
            return Err(Error::Config(format!("lcd.mu must be in [0, 1], got {}", self.lcd_mu)));
        }
        for (name, v) in [
            ("rae.w_l1", self.rae_w_l1),
            ("rae.w_adv", self.rae_w_adv),
            ("rae.w_reg", self.rae_w_reg),
            ("lcd.lambda_ct", self.lcd_lambda_ct),
            ("lcd.lambda_kd", self.lcd_lambda_kd),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.rae_batch_size == 0 || self.lcd_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".to_string()));
        }
        if self.data_patch_size % crate::datapipe::SCALE != 0 {
            return Err(Error::Config(format!(
                "data.patch_size {} must be divisible by {}",
                self.data_patch_size,
                crate::datapipe::SCALE
            )));
        }
        if self.data_patch_size % self.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "data.patch_size {} must be divisible by model.downsample_factor {}",
                self.data_patch_size, self.downsample_factor
            )));
        }
        self.encoder_spec().validate()?;
        self.cond_spec().validate()?;
        self.decoder_spec().validate()?;
        self.unet_spec().validate()?;
        let (a, b, c) = self.data_split;
        if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c > 1.0 + 1e-9 {
            return Err(Error::Config("data.split fractions must be non-negative and sum to <= 1".to_string()));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        crate::schedule::make_schedule(self.total_steps, self.beta_start, self.beta_end)?
            .with_sigma_data(self.sigma_data)
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            in_channels: 2 * self.image_channels,
            latent_channels: self.latent_channels,
            downsample_factor: self.downsample_factor,
            base_width: self.ae_base_width,
            blocks_per_level: self.ae_blocks_per_level,
            double_latent: true,
        }
    }

    pub fn cond_spec(&self) -> EncoderSpec {
        EncoderSpec {
            in_channels: self.image_channels,
            latent_channels: self.latent_channels,
            downsample_factor: self.downsample_factor,
            base_width: self.ae_base_width,
            blocks_per_level: self.ae_blocks_per_level,
            double_latent: false,
        }
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        DecoderSpec {
            latent_channels: self.latent_channels,
            image_channels: self.image_channels,
            base_width: self.ae_base_width,
            downsample_factor: self.downsample_factor,
            blocks_per_level: self.ae_blocks_per_level,
            sr: SRBranchSpec {
                num_fru: self.num_fru,
                imdb_per_fru: self.imdb_per_fru,
                feature_width: self.sr_feature_width,
                upscale: crate::datapipe::SCALE,
            },
        }
    }

    pub fn unet_spec(&self) -> UnetSpec {
        UnetSpec {
            in_channels: 2 * self.latent_channels,
            out_channels: self.latent_channels,
            base_width: self.unet_base_width,
            channel_mults: self.unet_channel_mults.clone(),
            blocks_per_level: self.unet_blocks_per_level,
        }
    }

    pub fn disc_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            in_channels: self.image_channels,
            base_width: self.disc_base_width,
        }
    }

    /// Serializes every key in the flat file format, sorted.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# resolved configuration (profile: {})", self.profile.name());
        let mults = self
            .unet_channel_mults
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut kv: Vec<(String, String)> = vec![
            ("run.seed".into(), self.seed.to_string()),
            ("schedule.total_steps".into(), self.total_steps.to_string()),
            ("schedule.beta_start".into(), format!("{}", self.beta_start)),
            ("schedule.beta_end".into(), format!("{}", self.beta_end)),
            ("schedule.sigma_data".into(), format!("{}", self.sigma_data)),
            ("model.image_channels".into(), self.image_channels.to_string()),
            ("model.latent_channels".into(), self.latent_channels.to_string()),
            ("model.downsample_factor".into(), self.downsample_factor.to_string()),
            ("model.ae_base_width".into(), self.ae_base_width.to_string()),
            ("model.ae_blocks_per_level".into(), self.ae_blocks_per_level.to_string()),
            ("model.unet_base_width".into(), self.unet_base_width.to_string()),
            ("model.unet_channel_mults".into(), mults),
            ("model.unet_blocks_per_level".into(), self.unet_blocks_per_level.to_string()),
            ("model.sr_feature_width".into(), self.sr_feature_width.to_string()),
            ("model.num_fru".into(), self.num_fru.to_string()),
            ("model.imdb_per_fru".into(), self.imdb_per_fru.to_string()),
            ("model.disc_base_width".into(), self.disc_base_width.to_string()),
            ("rae.epochs".into(), self.rae_epochs.to_string()),
            ("rae.batch_size".into(), self.rae_batch_size.to_string()),
            ("rae.learning_rate".into(), format!("{}", self.rae_learning_rate)),
            ("rae.warmup_epochs".into(), self.rae_warmup_epochs.to_string()),
            ("rae.w_l1".into(), format!("{}", self.rae_w_l1)),
            ("rae.w_adv".into(), format!("{}", self.rae_w_adv)),
            ("rae.w_reg".into(), format!("{}", self.rae_w_reg)),
            ("rae.save_every".into(), self.rae_save_every.to_string()),
            ("lcd.epochs".into(), self.lcd_epochs.to_string()),
            ("lcd.batch_size".into(), self.lcd_batch_size.to_string()),
            ("lcd.learning_rate".into(), format!("{}", self.lcd_learning_rate)),
            ("lcd.k".into(), self.lcd_k.to_string()),
            ("lcd.mu".into(), format!("{}", self.lcd_mu)),
            ("lcd.lambda_ct".into(), format!("{}", self.lcd_lambda_ct)),
            ("lcd.lambda_kd".into(), format!("{}", self.lcd_lambda_kd)),
            ("lcd.ablation".into(), self.lcd_ablation.name().to_string()),
            ("lcd.save_every".into(), self.lcd_save_every.to_string()),
            ("data.patch_size".into(), self.data_patch_size.to_string()),
            (
                "data.split".into(),
                format!("{},{},{}", self.data_split.0, self.data_split.1, self.data_split.2),
            ),
        ];
        if let Some(root) = &self.data_root {
            kv.push(("data.root".into(), root.clone()));
        }
        kv.sort();
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config_echo.cfg");
        std::fs::write(&path, self.to_flat_text()).map_err(|e| Error::io(path, e))
    }
}

/// True when a checkpoint produced under `echo_a` may resume a run under
/// `echo_b`: everything must match except the keys that merely extend or
/// re-slice the training horizon.
pub fn resume_compatible(echo_a: &str, echo_b: &str) -> bool {
    const EXTENDABLE: [&str; 4] = ["rae.epochs", "lcd.epochs", "rae.save_every", "lcd.save_every"];
    let (Ok(mut a), Ok(mut b)) = (parse_flat_text(echo_a), parse_flat_text(echo_b)) else {
        return false;
    };
    for key in EXTENDABLE {
        a.remove(key);
        b.remove(key);
    }
    a == b
}

/// Parses the flat `key = value` format (`#` comments, blank lines ok).
pub fn parse_flat_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
        };
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
    }
    Ok(map)
}

pub fn load_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_flat_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_reference_values() {
        let c = Config::defaults(Profile::Full);
        assert_eq!(c.total_steps, 1000);
        assert_eq!(c.beta_start, 0.0015);
        assert_eq!(c.beta_end, 0.0155);
        assert_eq!(c.unet_base_width, 64);
        assert_eq!(c.rae_learning_rate, 3.6e-5);
        assert_eq!(c.rae_batch_size, 8);
        assert_eq!(c.lcd_learning_rate, 8e-5);
        assert_eq!(c.lcd_batch_size, 16);
        assert_eq!(c.rae_warmup_epochs, 50);
        assert_eq!((c.rae_w_l1, c.rae_w_adv, c.rae_w_reg), (1.0, 0.5, 1e-6));
        c.validate().unwrap();
        Config::defaults(Profile::Tiny).validate().unwrap();
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let mut c = Config::defaults(Profile::Tiny);
        c.seed = 123;
        c.lcd_ablation = AblationMode::NoKd;
        c.data_root = Some("/tmp/data".to_string());
        let text = c.to_flat_text();
        let entries = parse_flat_text(&text).unwrap();
        let mut back = Config::defaults(Profile::Tiny);
        back.apply(&entries).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_typed_errors() {
        let mut c = Config::defaults(Profile::Tiny);
        assert!(c.set("nope.key", "1").is_err());
        assert!(c.set("lcd.mu", "huge").is_err());
        assert!(c.set("data.split", "0.5,0.5").is_err());
        c.set("lcd.mu", "2.0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn parser_rejects_malformed_lines() {
        assert!(parse_flat_text("just words").is_err());
        assert!(parse_flat_text("a.b = 1\na.b = 2").is_err());
        let ok = parse_flat_text("# comment\n\nrun.seed = 9\n").unwrap();
        assert_eq!(ok["run.seed"], "9");
    }
}
