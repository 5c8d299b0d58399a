//! Plain-text `key=value` run configuration.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, STAGES};
use crate::ops::PadMode;
use crate::train::loss::{LossConfig, DEFAULT_EPS};
use crate::train::optim::AdamWConfig;
use crate::train::synth::SynthTask;
use crate::train::trainer::TrainConfig;
use std::path::{Path, PathBuf};

/// Every key with its default, one per line.
pub const KEYS_HELP: &str = "\
variant=tiny          tiny | s | l; architecture preset
channels=             base width C, stage widths C,2C,4C,8C (preset)
cat_blocks=           four comma-separated counts (preset)
convnext_blocks=      four comma-separated counts (preset)
heads=                four comma-separated counts (preset)
reduction=            four comma-separated ratios (preset)
image_size=           square input side, multiple of 32 (preset)
dfcn_pad=zero         zero | circular | reflect
epochs=30
batch=8
lr=0.0001
eps_loss=0.000001
seed=0
samples=200           synthetic samples when data_dir is empty
task=shapes           shapes | quadrant
data_dir=             directory with images/*.ctfa and masks/*.pgm; empty for synthetic data
out_dir=runs";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: String,
    pub channels: Option<usize>,
    pub cat_blocks: Option<[usize; STAGES]>,
    pub convnext_blocks: Option<[usize; STAGES]>,
    pub heads: Option<[usize; STAGES]>,
    pub reduction: Option<[usize; STAGES]>,
    pub image_size: Option<usize>,
    pub dfcn_pad: PadMode,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub eps_loss: f64,
    pub seed: u64,
    pub samples: usize,
    pub task: SynthTask,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "tiny".into(),
            channels: None,
            cat_blocks: None,
            convnext_blocks: None,
            heads: None,
            reduction: None,
            image_size: None,
            dfcn_pad: PadMode::Zero,
            epochs: 30,
            batch: 8,
            lr: 1e-4,
            eps_loss: DEFAULT_EPS,
            seed: 0,
            samples: 200,
            task: SynthTask::Shapes,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_list(v: &str) -> std::result::Result<[usize; STAGES], String> {
    let items = v
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad integer {s:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    items.try_into().map_err(|items: Vec<usize>| format!("expected {STAGES} values, got {}", items.len()))
}

fn parse_pad(v: &str) -> std::result::Result<PadMode, String> {
    match v {
        "zero" => Ok(PadMode::Zero),
        "circular" => Ok(PadMode::Circular),
        "reflect" => Ok(PadMode::Reflect),
        _ => Err(format!("unknown padding {v:?}")),
    }
}

fn pad_name(p: PadMode) -> &'static str {
    match p {
        PadMode::Zero => "zero",
        PadMode::Circular => "circular",
        PadMode::Reflect => "reflect",
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad number {v:?}"))
}

fn opt<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v.is_empty() {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment. All problems are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("line {}: expected key=value", no + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                errs.push(format!("line {}: duplicate key {key}", no + 1));
                continue;
            }
            let res: std::result::Result<(), String> = (|| {
                match key {
                    "variant" => {
                        ModelConfig::by_name(value).ok_or(format!("unknown variant {value:?}"))?;
                        cfg.variant = value.to_string();
                    }
                    // empty keeps the preset
                    "channels" => cfg.channels = opt(value, num)?,
                    "cat_blocks" => cfg.cat_blocks = opt(value, parse_list)?,
                    "convnext_blocks" => cfg.convnext_blocks = opt(value, parse_list)?,
                    "heads" => cfg.heads = opt(value, parse_list)?,
                    "reduction" => cfg.reduction = opt(value, parse_list)?,
                    "image_size" => cfg.image_size = opt(value, num)?,
                    "dfcn_pad" => cfg.dfcn_pad = parse_pad(value)?,
                    "epochs" => cfg.epochs = num(value)?,
                    "batch" => cfg.batch = num(value)?,
                    "lr" => cfg.lr = num(value)?,
                    "eps_loss" => cfg.eps_loss = num(value)?,
                    "seed" => cfg.seed = num(value)?,
                    "samples" => cfg.samples = num(value)?,
                    "task" => cfg.task = SynthTask::parse(value).ok_or(format!("unknown task {value:?}"))?,
                    "data_dir" => cfg.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
                    "out_dir" => cfg.out_dir = PathBuf::from(value),
                    _ => return Err(format!("unknown key {key}")),
                }
                Ok(())
            })();
            if let Err(e) = res {
                errs.push(format!("line {}: {e}", no + 1));
            }
        }
        if cfg.batch == 0 {
            errs.push("batch must be positive".into());
        }
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            errs.push(format!("lr {} must be a finite non-negative number", cfg.lr));
        }
        if let Err(Error::InvalidConfig(e)) = LossConfig::new(cfg.eps_loss) {
            errs.extend(e);
        }
        if let Err(Error::InvalidConfig(e)) = cfg.model_config() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let list = |a: &Option<[usize; STAGES]>| a.map(|a| a.map(|x| x.to_string()).join(",")).unwrap_or_default();
        let opt = |a: Option<usize>| a.map(|x| x.to_string()).unwrap_or_default();
        [
            format!("variant={}", self.variant),
            format!("channels={}", opt(self.channels)),
            format!("cat_blocks={}", list(&self.cat_blocks)),
            format!("convnext_blocks={}", list(&self.convnext_blocks)),
            format!("heads={}", list(&self.heads)),
            format!("reduction={}", list(&self.reduction)),
            format!("image_size={}", opt(self.image_size)),
            format!("dfcn_pad={}", pad_name(self.dfcn_pad)),
            format!("epochs={}", self.epochs),
            format!("batch={}", self.batch),
            format!("lr={}", self.lr),
            format!("eps_loss={}", self.eps_loss),
            format!("seed={}", self.seed),
            format!("samples={}", self.samples),
            format!("task={}", if self.task == SynthTask::Shapes { "shapes" } else { "quadrant" }),
            format!("data_dir={}", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            format!("out_dir={}", self.out_dir.display()),
        ]
        .join("\n")
            + "\n"
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::by_name(&self.variant)
            .ok_or_else(|| Error::InvalidConfig(vec![format!("unknown variant {:?}", self.variant)]))?;
        if let Some(c) = self.channels {
            m.channels = [c, 2 * c, 4 * c, 8 * c];
        }
        m.cat_blocks = self.cat_blocks.unwrap_or(m.cat_blocks);
        m.convnext_blocks = self.convnext_blocks.unwrap_or(m.convnext_blocks);
        m.heads = self.heads.unwrap_or(m.heads);
        m.reduction = self.reduction.unwrap_or(m.reduction);
        if let Some(s) = self.image_size {
            m.input_hw = (s, s);
        }
        m.dfcn_pad = self.dfcn_pad;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            optim: AdamWConfig { lr: self.lr, ..Default::default() },
            loss: LossConfig { eps: self.eps_loss },
            seed: self.seed,
            ..Default::default()
        }
    }
}
