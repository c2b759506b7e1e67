//! Run configuration and its `key=value` text form.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::AdamConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sharing {
    /// Only the item-embedding table is shared.
    Embeddings,
    /// The whole encoder is shared.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplerMode {
    Multinomial,
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Generator plus discriminator; the discriminator ranks.
    Elecrec,
    /// Generator trained alone with next-item prediction; it ranks.
    GeneratorOnly,
    /// Single encoder trained with per-position BCE against one sampled negative.
    SequentialBce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantMode {
    ElecrecEs,
    ElecrecFs,
    GeneratorOnly,
    SequentialBce,
}

impl VariantMode {
    pub const ALL: [VariantMode; 4] = [
        VariantMode::ElecrecEs,
        VariantMode::ElecrecFs,
        VariantMode::GeneratorOnly,
        VariantMode::SequentialBce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantMode::ElecrecEs => "elecrec_es",
            VariantMode::ElecrecFs => "elecrec_fs",
            VariantMode::GeneratorOnly => "generator_only",
            VariantMode::SequentialBce => "sequential_bce",
        }
    }
}

impl FromStr for VariantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for VariantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub variant: Variant,
    pub sharing: Sharing,
    pub sampler: SamplerMode,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    /// Drop already-interacted items from the ranking candidates.
    pub filter_seen: bool,
    /// Record wall-clock time per epoch; when off, `wall_ms` is written as 0.
    pub timing: bool,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            lambda: 0.5,
            variant: Variant::Elecrec,
            sharing: Sharing::Full,
            sampler: SamplerMode::Multinomial,
            lr: 1e-3,
            batch_size: crate::data::DEFAULT_BATCH_SIZE,
            max_len: crate::data::DEFAULT_MAX_LEN,
            hidden: 64,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            epochs_max: 200,
            patience: 40,
            seed: 0,
            filter_seen: false,
            timing: false,
            data: None,
            out: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: [&str; 19] = [
    "alpha",
    "lambda",
    "variant",
    "sharing_mode",
    "sampler_mode",
    "lr",
    "batch_size",
    "max_len",
    "d",
    "layers",
    "heads",
    "dropout",
    "epochs_max",
    "patience",
    "seed",
    "filter_seen",
    "timing",
    "data",
    "out",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

impl TrainConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn variant_mode(&self) -> VariantMode {
        match (self.variant, self.sharing) {
            (Variant::Elecrec, Sharing::Embeddings) => VariantMode::ElecrecEs,
            (Variant::Elecrec, Sharing::Full) => VariantMode::ElecrecFs,
            (Variant::GeneratorOnly, _) => VariantMode::GeneratorOnly,
            (Variant::SequentialBce, _) => VariantMode::SequentialBce,
        }
    }

    /// Configures one of the ablation variants.
    pub fn build_variant(mut self, mode: VariantMode) -> Self {
        match mode {
            VariantMode::ElecrecEs => {
                self.variant = Variant::Elecrec;
                self.sharing = Sharing::Embeddings;
            }
            VariantMode::ElecrecFs => {
                self.variant = Variant::Elecrec;
                self.sharing = Sharing::Full;
            }
            VariantMode::GeneratorOnly => {
                self.variant = Variant::GeneratorOnly;
                self.lambda = 0.0;
            }
            VariantMode::SequentialBce => self.variant = Variant::SequentialBce,
        }
        self
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match key {
            "alpha" => self.alpha = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "variant" => match value {
                "elecrec" => self.variant = Variant::Elecrec,
                "generator_only" => self.variant = Variant::GeneratorOnly,
                "sequential_bce" => self.variant = Variant::SequentialBce,
                other => return Err(format!("variant: expected elecrec|generator_only|sequential_bce, got `{other}`")),
            },
            "sharing_mode" => match value.to_ascii_lowercase().as_str() {
                "es" => self.sharing = Sharing::Embeddings,
                "fs" => self.sharing = Sharing::Full,
                other => return Err(format!("sharing_mode: expected es|fs, got `{other}`")),
            },
            "sampler_mode" => match value {
                "multinomial" => self.sampler = SamplerMode::Multinomial,
                "argmax" => self.sampler = SamplerMode::Argmax,
                other => return Err(format!("sampler_mode: expected multinomial|argmax, got `{other}`")),
            },
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            "d" => self.hidden = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "epochs_max" => self.epochs_max = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "filter_seen" => self.filter_seen = parse_num(key, value)?,
            "timing" => match value {
                "wall" => self.timing = true,
                "off" => self.timing = false,
                other => return Err(format!("timing: expected wall|off, got `{other}`")),
            },
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Checks value ranges; every problem is reported.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            bad.push(format!("alpha: {} outside [0, 1]", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad.push(format!("lambda: {} must be >= 0", self.lambda));
        }
        if self.variant == Variant::GeneratorOnly && self.lambda != 0.0 {
            bad.push("lambda: generator_only requires lambda = 0".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr: {} must be >= 0", self.lr));
        }
        if self.batch_size == 0 {
            bad.push("batch_size: must be >= 1".into());
        }
        if self.max_len < 2 {
            bad.push("max_len: must be >= 2".into());
        }
        if self.hidden == 0 {
            bad.push("d: must be >= 1".into());
        }
        if self.layers == 0 {
            bad.push("layers: must be >= 1".into());
        }
        if self.heads == 0 || (self.hidden > 0 && !self.hidden.is_multiple_of(self.heads)) {
            bad.push(format!("heads: d={} is not divisible by {}", self.hidden, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout: {} outside [0, 1)", self.dropout));
        }
        if self.epochs_max == 0 {
            bad.push("epochs_max: must be >= 1".into());
        }
        if self.patience == 0 {
            bad.push("patience: must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. All malformed lines,
    /// unknown keys and bad values are collected into one error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut bad = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bad.push(format!("line {}: expected key=value", i + 1));
                continue;
            };
            if let Err(e) = cfg.set(key.trim(), value) {
                bad.push(e);
            }
        }
        if let Err(Error::Config(msg)) = cfg.validate() {
            bad.push(msg);
        }
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn to_kv_string(&self) -> String {
        let variant = match self.variant {
            Variant::Elecrec => "elecrec",
            Variant::GeneratorOnly => "generator_only",
            Variant::SequentialBce => "sequential_bce",
        };
        let sharing = match self.sharing {
            Sharing::Embeddings => "es",
            Sharing::Full => "fs",
        };
        let sampler = match self.sampler {
            SamplerMode::Multinomial => "multinomial",
            SamplerMode::Argmax => "argmax",
        };
        let data = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        [
            format!("alpha={}", self.alpha),
            format!("lambda={}", self.lambda),
            format!("variant={variant}"),
            format!("sharing_mode={sharing}"),
            format!("sampler_mode={sampler}"),
            format!("lr={}", self.lr),
            format!("batch_size={}", self.batch_size),
            format!("max_len={}", self.max_len),
            format!("d={}", self.hidden),
            format!("layers={}", self.layers),
            format!("heads={}", self.heads),
            format!("dropout={}", self.dropout),
            format!("epochs_max={}", self.epochs_max),
            format!("patience={}", self.patience),
            format!("seed={}", self.seed),
            format!("filter_seen={}", self.filter_seen),
            format!("timing={}", if self.timing { "wall" } else { "off" }),
            format!("data={data}"),
            format!("out={}", self.out.display()),
        ]
        .join("\n")
            + "\n"
    }
}
